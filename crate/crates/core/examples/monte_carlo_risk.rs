//! Simulated true risk against the asymptotic approximation.

use lsband::density_models::MixtureDensity;
use lsband::montecarlo::{risk_curve, SimConfig};
use lsband::selector::Target;

fn main() -> lsband::Result<()> {
    let reps = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(10);
    let config = SimConfig::new(MixtureDensity::standard_bivariate_normal(), 2000, Target::Hdr { tau: 0.5 }, reps, 1)?;
    let hs: Vec<f64> = (0..8).map(|k| 0.1 + 0.05 * k as f64).collect();
    let curve = risk_curve(&config, &hs)?;
    println!("   h     simulated (se)       approximation");
    for r in &curve.rows {
        println!("{:.3}   {:.5} ({:.5})   {:.5}", r.h, r.sim_risk, r.sim_se, r.approx_risk);
    }
    println!(
        "minimizers: simulated {:.3}, approximation {:.3}",
        curve.sim_argmin().unwrap_or(f64::NAN),
        curve.approx_argmin().unwrap_or(f64::NAN)
    );
    curve.write_csv(std::io::stdout())?;
    Ok(())
}
