use super::types::Block;
use crate::numerics::RngState;

/// Seed pinning every feature projection for the lifetime of the project.
pub const FEATURE_SEED: u64 = 0x5EED_C11F_0000_0001;
pub const FEATURE_ROWS: usize = 64;

/// Frozen random projection used as the image-embedding stand-in: 64
/// unit-norm rows of Gaussian entries, one matrix per sample dimension.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    dim: usize,
    rows: Vec<Vec<f64>>,
}

impl FeatureMap {
    pub fn new(dim: usize) -> Self {
        let mut rng = RngState::new(FEATURE_SEED).fork(dim as u64);
        let rows = (0..FEATURE_ROWS)
            .map(|_| {
                let r: Vec<f64> = (0..dim).map(|_| rng.normal()).collect();
                let n = r.iter().map(|v| v * v).sum::<f64>().sqrt();
                r.into_iter().map(|v| v / n).collect()
            })
            .collect();
        Self { dim, rows }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }

    pub fn project(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.dim, "feature projection dimension");
        self.rows.iter().map(|r| r.iter().zip(x).map(|(a, b)| a * b).sum()).collect()
    }

    /// Projection through only the columns of `blocks`.
    pub fn project_blocks(&self, x: &[f64], blocks: &[Block]) -> Vec<f64> {
        assert_eq!(x.len(), self.dim, "feature projection dimension");
        self.rows
            .iter()
            .map(|r| blocks.iter().flat_map(|b| b.range(self.dim)).map(|j| r[j] * x[j]).sum())
            .collect()
    }
}

/// Cosine similarity; `None` when either vector is zero.
pub fn cosine(a: &[f64], b: &[f64]) -> Option<f64> {
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return None;
    }
    let c = a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (na * nb);
    Some(c.clamp(-1.0, 1.0))
}
