//! Asymptotic risk of scalar bandwidths computed from a known density.

use lsband::density_models::MixtureDensity;
use lsband::kde::Bandwidth;
use lsband::levels::{EvalGrid, DEFAULT_TAU_TOL};
use lsband::selector::{RiskModel, Target};

fn main() -> lsband::Result<()> {
    let model = MixtureDensity::standard_bivariate_normal();
    let grid = EvalGrid::square(-6.0, 6.0, 400)?;
    for n in [500, 2000, 8000] {
        let oracle = RiskModel::from_fields(Target::Hdr { tau: 0.5 }, n, &grid, &model, &model, &model, DEFAULT_TAU_TOL)?;
        let mut best = (f64::NAN, f64::INFINITY);
        println!("n = {n}");
        for k in 0..12 {
            let h = 0.1 + 0.04 * k as f64;
            let report = oracle.risk(&Bandwidth::scalar(h, 2)?)?;
            if report.risk < best.1 {
                best = (h, report.risk);
            }
            let aux = report.aux.expect("HDR targets report level terms");
            println!("  h = {h:.2}  risk = {:.5}  level bias = {:+.5}", report.risk, aux.d2);
        }
        println!("  best h on this grid: {:.2}", best.0);
    }
    Ok(())
}
