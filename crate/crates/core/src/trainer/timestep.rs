use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::RngState;

pub const DEFAULT_BINS: usize = 32;
pub const IMPACT_DECAY: f64 = 0.99;
/// The probability floor is `FLOOR_FACTOR / bins`.
pub const FLOOR_FACTOR: f64 = 0.25;
const EPS_NUM: f64 = 1e-12;

/// Adaptive categorical distribution over uniform timestep bins.
///
/// Each bin keeps an exponential moving average of the squared gradient norm
/// observed when training at that bin; probabilities are proportional to it,
/// floored at `0.25 / bins`. Draws carry the importance weight
/// `(1 / bins) / p[bin]` so that weighted losses estimate the uniform-time
/// objective.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimestepDistribution {
    pub probs: Vec<f64>,
    pub impact: Vec<f64>,
    /// False until the first impact observation; the first one seeds every bin.
    pub warmed: bool,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TimestepDraw {
    pub t: f64,
    pub weight: f64,
    pub bin: usize,
}

impl Default for TimestepDistribution {
    fn default() -> Self {
        Self::uniform(DEFAULT_BINS)
    }
}

impl TimestepDistribution {
    pub fn uniform(bins: usize) -> Self {
        assert!(bins > 0, "timestep distribution needs at least one bin");
        Self { probs: vec![1.0 / bins as f64; bins], impact: vec![0.0; bins], warmed: false }
    }

    /// Distribution with given probabilities (renormalized, floored).
    pub fn from_probs(probs: &[f64]) -> Result<Self> {
        if probs.is_empty() || probs.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(Error::contract("timestep probabilities must be finite and nonnegative"));
        }
        let mut d = Self::uniform(probs.len());
        d.probs = floored(probs, d.floor());
        Ok(d)
    }

    pub fn bins(&self) -> usize {
        self.probs.len()
    }

    pub fn floor(&self) -> f64 {
        FLOOR_FACTOR / self.bins() as f64
    }

    pub fn weight(&self, bin: usize) -> f64 {
        (1.0 / self.bins() as f64) / self.probs[bin]
    }

    pub fn sample_bin(&self, rng: &mut RngState) -> usize {
        rng.categorical(&self.probs)
    }

    /// Uniform time inside `bin`.
    pub fn t_in_bin(&self, bin: usize, rng: &mut RngState) -> f64 {
        (bin as f64 + rng.uniform()) / self.bins() as f64
    }

    pub fn sample(&self, rng: &mut RngState) -> TimestepDraw {
        let bin = self.sample_bin(rng);
        TimestepDraw { t: self.t_in_bin(bin, rng), weight: self.weight(bin), bin }
    }

    pub fn update(&mut self, bin: usize, grad_norm_sq: f64) -> Result<()> {
        if !(grad_norm_sq >= 0.0) || !grad_norm_sq.is_finite() {
            return Err(Error::contract(format!("gradient norm² {grad_norm_sq} must be finite and >= 0")));
        }
        if bin >= self.bins() {
            return Err(Error::contract(format!("bin {bin} out of range")));
        }
        if !self.warmed {
            self.impact.iter_mut().for_each(|v| *v = grad_norm_sq);
            self.warmed = true;
        } else {
            self.impact[bin] = IMPACT_DECAY * self.impact[bin] + (1.0 - IMPACT_DECAY) * grad_norm_sq;
        }
        let raw: Vec<f64> = self.impact.iter().map(|v| v.max(EPS_NUM)).collect();
        self.probs = floored(&raw, self.floor());
        Ok(())
    }
}

/// Normalizes `w`, then raises entries below `floor` to it, scaling the rest
/// so the total stays 1.
fn floored(w: &[f64], floor: f64) -> Vec<f64> {
    let total: f64 = w.iter().sum();
    let mut p: Vec<f64> = if total > 0.0 {
        w.iter().map(|v| v / total).collect()
    } else {
        vec![1.0 / w.len() as f64; w.len()]
    };
    let mut pinned = vec![false; p.len()];
    loop {
        let free_mass: f64 = p.iter().zip(&pinned).filter(|(_, &k)| !k).map(|(v, _)| v).sum();
        let budget = 1.0 - floor * pinned.iter().filter(|&&k| k).count() as f64;
        let scale = budget / free_mass;
        let mut changed = false;
        for (v, k) in p.iter_mut().zip(pinned.iter_mut()) {
            if *k {
                *v = floor;
            } else if *v * scale < floor {
                *v = floor;
                *k = true;
                changed = true;
            }
        }
        if !changed {
            for (v, k) in p.iter_mut().zip(&pinned) {
                if !*k {
                    *v *= scale;
                }
            }
            return p;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_weights_are_one() {
        let d = TimestepDistribution::default();
        let mut rng = RngState::new(1);
        for _ in 0..100 {
            let draw = d.sample(&mut rng);
            assert_eq!(draw.weight, 1.0);
            assert!(draw.t >= draw.bin as f64 / 32.0 && draw.t < (draw.bin + 1) as f64 / 32.0);
        }
    }

    #[test]
    fn doubled_bin_has_half_weight() {
        let mut p = vec![1.0 / 32.0; 32];
        p[5] = 2.0 / 32.0;
        // renormalization would move mass; give the extra to bin 5 from bin 6
        p[6] = 0.0;
        let mut d = TimestepDistribution::uniform(32);
        d.probs = p;
        assert_eq!(d.weight(5), 0.5);
    }

    #[test]
    fn frequencies_match_probs() {
        let mut raw: Vec<f64> = (0..32).map(|i| 1.0 + (i % 5) as f64).collect();
        raw[3] = 20.0;
        let d = TimestepDistribution::from_probs(&raw).unwrap();
        let mut rng = RngState::new(2);
        let n = 100_000;
        let mut counts = vec![0usize; 32];
        for _ in 0..n {
            counts[d.sample(&mut rng).bin] += 1;
        }
        for (c, p) in counts.iter().zip(&d.probs) {
            assert!((*c as f64 / n as f64 - p).abs() < 0.01);
        }
    }

    #[test]
    fn equal_impacts_give_uniform() {
        let mut d = TimestepDistribution::default();
        for b in 0..32 {
            d.update(b, 3.0).unwrap();
        }
        assert!(d.probs.iter().all(|p| (p - 1.0 / 32.0).abs() < 1e-15));
    }

    #[test]
    fn dominant_bin_hits_the_clamp_limit() {
        let mut d = TimestepDistribution::default();
        d.update(0, 0.0).unwrap();
        for _ in 0..200 {
            d.update(7, 1e30).unwrap();
        }
        let floor = 0.25 / 32.0;
        assert!((d.probs[7] - (1.0 - 31.0 * floor)).abs() < 1e-12);
        assert!(d.probs.iter().enumerate().all(|(i, &p)| i == 7 || (p - floor).abs() < 1e-15));
    }

    #[test]
    fn random_update_streams_keep_invariants() {
        let mut rng = RngState::new(3);
        for _ in 0..50 {
            let mut d = TimestepDistribution::default();
            for _ in 0..200 {
                let bin = rng.index(32);
                let g = rng.uniform().powi(4) * 10f64.powi(rng.index(12) as i32 - 6);
                d.update(bin, g).unwrap();
                let s: f64 = d.probs.iter().sum();
                assert!((s - 1.0).abs() < 1e-12);
                assert!(d.probs.iter().all(|&p| p >= d.floor() - 1e-15));
            }
        }
    }

    #[test]
    fn rejects_negative_norm() {
        assert!(TimestepDistribution::default().update(0, -1.0).is_err());
    }
}
