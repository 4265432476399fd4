//! Parity check between a weights file and a golden `{input, output}`
//! fixture.

use std::path::Path;

use serde::{Deserialize, Serialize};
use vla_core::initializer::{load_model, neural_forward, FeatureTensor};

pub const PARITY_TOLERANCE: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Fixture {
    pub input: Vec<Vec<Vec<f64>>>,
    pub output: [f64; 3],
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParityReport {
    pub output: [f64; 3],
    pub expected: [f64; 3],
    pub max_abs_diff: f64,
}

impl ParityReport {
    pub fn passed(&self) -> bool {
        self.max_abs_diff <= PARITY_TOLERANCE
    }
}

/// Loads both files and runs the forward pass. Any error is a load failure;
/// a mismatch is reported through [`ParityReport::passed`].
pub fn verify_forward(model_path: &Path, fixture_path: &Path) -> anyhow::Result<ParityReport> {
    let model = load_model(model_path)?;
    let text = std::fs::read_to_string(fixture_path)
        .map_err(|e| anyhow::anyhow!("cannot read fixture {}: {e}", fixture_path.display()))?;
    let fixture: Fixture = serde_json::from_str(&text)
        .map_err(|e| anyhow::anyhow!("fixture {}: {e}", fixture_path.display()))?;
    let input = FeatureTensor::from_nested(&fixture.input)?;
    let out = neural_forward(&model, &input)?;
    let output = [out.x, out.y, out.z];
    let max_abs_diff = output
        .iter()
        .zip(&fixture.output)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    Ok(ParityReport {
        output,
        expected: fixture.output,
        max_abs_diff,
    })
}
