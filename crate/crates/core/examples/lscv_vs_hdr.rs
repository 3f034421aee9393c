//! Paired comparison of the HDR selector and LSCV on a sharp-mode mixture.

use lsband::density_models::MixtureDensity;
use lsband::kde::BandwidthClass;
use lsband::montecarlo::{compare_methods, SimConfig, DEFAULT_SIM_GRID};
use lsband::selector::Target;

fn main() -> lsband::Result<()> {
    let reps = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(6);
    let mut config = SimConfig::new(MixtureDensity::sharp_mode(), 2000, Target::Hdr { tau: 0.2 }, reps, 1)?;
    config.grid = config.grid.with_counts(DEFAULT_SIM_GRID / 2)?;
    let cmp = compare_methods(&config, BandwidthClass::Full)?;
    println!("rep  hdr_error  lscv_error");
    for row in &cmp.rows {
        println!("{:3}  {:.5}    {:.5}", row.rep, row.hdr_error, row.lscv_error);
    }
    println!(
        "median {:.5} vs {:.5}; one-sided signed-rank p = {:.4} ({:?})",
        cmp.median_hdr_error, cmp.median_lscv_error, cmp.wilcoxon.p_value, cmp.wilcoxon.method
    );
    Ok(())
}
