//! Line-delimited JSON dataset files.
//!
//! One record per line, keys in this order:
//! `id, dim, source, target, instruction {op_kind, params}, meta {task_label,
//! tags, source_kind}, quality, weight`. Floats are written in scientific
//! notation with 17 significant digits, which round-trips every `f64`.
//! A sidecar manifest (`<file>.manifest.json`) records the generator version,
//! the seed and per-source-kind counts.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::types::{EditPair, Instruction, MetaInfo, SourceKind, ToySample};
use crate::error::{Error, Result};

pub const GENERATOR_VERSION: &str = concat!("seedlab-toydata/", env!("CARGO_PKG_VERSION"));

/// `f64` with 17 significant digits.
pub fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}

fn fmt_list(xs: &[f64]) -> String {
    let mut s = String::from("[");
    for (i, x) in xs.iter().enumerate() {
        if i > 0 {
            s.push(',');
        }
        s.push_str(&fmt_f64(*x));
    }
    s.push(']');
    s
}

fn json_str<T: Serialize>(v: &T) -> String {
    serde_json::to_string(v).expect("enum and tag values serialize")
}

pub fn pair_to_line(p: &EditPair) -> String {
    let mut s = String::new();
    write!(
        s,
        "{{\"id\":{},\"dim\":{},\"source\":{},\"target\":{},\"instruction\":{{\"op_kind\":{},\"params\":{}}},\
         \"meta\":{{\"task_label\":{},\"tags\":{},\"source_kind\":{}}},\"quality\":{},\"weight\":{}}}",
        p.id,
        p.dim(),
        fmt_list(p.source.values()),
        fmt_list(p.target.values()),
        json_str(&p.instruction.op_kind),
        fmt_list(&p.instruction.params),
        json_str(&p.meta.task_label),
        json_str(&p.meta.tags),
        json_str(&p.meta.source_kind),
        fmt_f64(p.quality),
        fmt_f64(p.weight),
    )
    .expect("writing to a string");
    s
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct Record {
    id: u64,
    dim: usize,
    source: Vec<f64>,
    target: Vec<f64>,
    instruction: Instruction,
    meta: MetaInfo,
    quality: f64,
    weight: f64,
}

pub fn pair_from_line(line: &str) -> Result<EditPair> {
    let r: Record = serde_json::from_str(line)?;
    let source = ToySample::new(r.source)?;
    let target = ToySample::new(r.target)?;
    if source.dim() != r.dim || target.dim() != r.dim {
        return Err(Error::shape(format!("record {} declares dim {} but carries other lengths", r.id, r.dim)));
    }
    if !(0.0..=1.0).contains(&r.quality) {
        return Err(Error::contract(format!("record {} quality {} outside [0, 1]", r.id, r.quality)));
    }
    Ok(EditPair {
        id: r.id,
        source,
        target,
        instruction: r.instruction,
        meta: r.meta,
        quality: r.quality,
        weight: r.weight,
    })
}

pub fn write_dataset(path: &Path, pairs: &[EditPair]) -> Result<()> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    for p in pairs {
        writeln!(w, "{}", pair_to_line(p))?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_dataset(path: &Path) -> Result<Vec<EditPair>> {
    let r = BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(pair_from_line(&line).map_err(|e| match e {
            Error::Json(j) => Error::Contract(format!("{}: line {}: {j}", path.display(), i + 1)),
            other => other,
        })?);
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub generator_version: String,
    pub seed: u64,
    pub records: usize,
    pub counts: BTreeMap<String, usize>,
}

impl DatasetManifest {
    pub fn describe(pairs: &[EditPair], seed: u64) -> Self {
        let mut counts: BTreeMap<String, usize> =
            SourceKind::ALL.iter().map(|k| (k.name().to_string(), 0)).collect();
        for p in pairs {
            *counts.get_mut(p.meta.source_kind.name()).expect("all kinds present") += 1;
        }
        Self { generator_version: GENERATOR_VERSION.to_string(), seed, records: pairs.len(), counts }
    }
}

pub fn manifest_path(dataset: &Path) -> PathBuf {
    let mut s = dataset.as_os_str().to_owned();
    s.push(".manifest.json");
    PathBuf::from(s)
}

/// Writes the dataset and its sidecar manifest.
pub fn write_dataset_with_manifest(path: &Path, pairs: &[EditPair], seed: u64) -> Result<DatasetManifest> {
    write_dataset(path, pairs)?;
    let m = DatasetManifest::describe(pairs, seed);
    std::fs::write(manifest_path(path), serde_json::to_string_pretty(&m)? + "\n")?;
    Ok(m)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::RngState;
    use crate::toydata::generate::{gen_pairs, GenSpec};
    use proptest::prelude::*;

    #[test]
    fn seventeen_significant_digits() {
        assert_eq!(fmt_f64(0.1), "1.0000000000000001e-1");
        assert_eq!(fmt_f64(-2.5), "-2.5000000000000000e0");
    }

    #[test]
    fn file_round_trip_with_manifest() {
        let mut pairs = Vec::new();
        for (i, kind) in SourceKind::ALL.into_iter().enumerate() {
            let spec = GenSpec::new(kind, 25, &[8, 16, 32, 64]).with_first_id(100 * i as u64);
            pairs.extend(gen_pairs(&spec, &RngState::new(1)).unwrap());
        }
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.jsonl");
        let m = write_dataset_with_manifest(&path, &pairs, 1).unwrap();
        assert_eq!(read_dataset(&path).unwrap(), pairs);
        assert_eq!(m.counts["video_frames"], 25);
        let text = std::fs::read_to_string(manifest_path(&path)).unwrap();
        let back: DatasetManifest = serde_json::from_str(&text).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn key_order_is_fixed() {
        let p = gen_pairs(&GenSpec::new(SourceKind::TraditionalOp, 1, &[8]), &RngState::new(2)).unwrap();
        let line = pair_to_line(&p[0]);
        let keys = ["\"id\"", "\"dim\"", "\"source\"", "\"target\"", "\"instruction\"", "\"meta\"", "\"quality\"", "\"weight\""];
        let pos: Vec<usize> = keys.iter().map(|k| line.find(k).unwrap()).collect();
        assert!(pos.windows(2).all(|w| w[0] < w[1]));
    }

    proptest! {
        #[test]
        fn record_round_trip(seed in any::<u64>(), kind in 0usize..4, dim in 0usize..4, w in 0.0f64..1e6) {
            let spec = GenSpec::new(SourceKind::ALL[kind], 1, &[[8, 16, 32, 64][dim]]);
            let mut p = gen_pairs(&spec, &RngState::new(seed)).unwrap().remove(0);
            p.weight = w;
            prop_assert_eq!(pair_from_line(&pair_to_line(&p)).unwrap(), p);
        }
    }
}
