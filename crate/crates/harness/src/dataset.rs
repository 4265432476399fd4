//! JSON-lines training data: one `{"features": 70×I×M, "label": [x,y,z]}`
//! record per sampled trajectory.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use vla_core::initializer::build_features;
use vla_core::signal::synthesize_cfr;

use crate::bench::trial_rng;
use crate::config::HarnessConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Record {
    pub features: Vec<Vec<Vec<f64>>>,
    pub label: [f64; 3],
}

pub fn make_record(config: &HarnessConfig, seed: u64, index: usize) -> vla_core::Result<Record> {
    let mut rng = trial_rng(seed, index as u64);
    let scenario = config.scenario.sample(&mut rng)?;
    let snapshots = synthesize_cfr(&scenario, &mut rng)?;
    let features = build_features(&snapshots, &scenario.array, &scenario.grid)?;
    let s = scenario.source();
    Ok(Record {
        features: features.to_nested(),
        label: [s.x, s.y, s.z],
    })
}

/// Writes `count` records in index order. Records are built in parallel in
/// chunks to bound memory.
pub fn export_dataset<W: Write>(config: &HarnessConfig, count: usize, seed: u64, mut w: W) -> anyhow::Result<()> {
    const CHUNK: usize = 256;
    for start in (0..count).step_by(CHUNK) {
        let end = (start + CHUNK).min(count);
        let lines: Vec<String> = (start..end)
            .into_par_iter()
            .map(|k| make_record(config, seed, k).map(|r| serde_json::to_string(&r).expect("record serializes")))
            .collect::<vla_core::Result<_>>()?;
        for line in lines {
            writeln!(w, "{line}")?;
        }
    }
    w.flush()?;
    Ok(())
}
