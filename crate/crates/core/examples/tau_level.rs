//! The density level bounding a highest density region, three ways.

use std::f64::consts::PI;

use lsband::density_models::{spherical_tau_level, MixtureDensity};
use lsband::kde::{Bandwidth, Kde};
use lsband::levels::{tau_level, tau_level_resample, EvalGrid, DEFAULT_TAU_TOL};

fn main() -> lsband::Result<()> {
    let model = MixtureDensity::standard_bivariate_normal();
    let grid = EvalGrid::square(-6.0, 6.0, 512)?;
    println!("tau    exact     closed form  grid bisection");
    for tau in [0.1, 0.5, 0.9] {
        println!(
            "{tau:.1}   {:.6}  {:.6}     {:.6}",
            tau / (2.0 * PI),
            spherical_tau_level(&model, tau)?,
            tau_level(&model, tau, &grid, DEFAULT_TAU_TOL)?
        );
    }

    let data = model.sample(1000, 3);
    let h = Bandwidth::scalar(0.3, 2)?;
    let kde = Kde::new(data.clone(), h.clone())?;
    let kde_grid = EvalGrid::covering(&data, &h, 256)?;
    let by_grid = tau_level(&kde, 0.5, &kde_grid, DEFAULT_TAU_TOL)?;
    let by_draws = tau_level_resample(&data, &h, 0.5, 20_000, 7)?;
    println!("kernel estimate, tau = 0.5: grid {by_grid:.5}, resampling {by_draws:.5}");
    Ok(())
}
