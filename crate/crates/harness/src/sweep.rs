//! SPEB-versus-movement sweep and its CSV.

use std::io::Write;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use vla_core::fisher::{speb_sweep, SpebRow, SpebSweepConfig, SPEB_CSV_HEADER};

pub const SPEB_CSV_VERSION: &str = "# vla-speb-csv v1";

pub fn run_sweep(config: &SpebSweepConfig, seed: u64) -> vla_core::Result<Vec<SpebRow>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    speb_sweep(config, &mut rng)
}

pub fn write_csv<W: Write>(mut w: W, rows: &[SpebRow]) -> std::io::Result<()> {
    writeln!(w, "{SPEB_CSV_VERSION}")?;
    writeln!(w, "{SPEB_CSV_HEADER}")?;
    for row in rows {
        writeln!(w, "{}", row.csv_line())?;
    }
    Ok(())
}
