//! Evaluate a Gaussian kernel density estimate and its derivatives.

use lsband::density_models::MixtureDensity;
use lsband::kde::{Bandwidth, Kde};
use lsband::levels::EvalGrid;
use nalgebra::DMatrix;

fn main() -> lsband::Result<()> {
    let data = MixtureDensity::standard_bivariate_normal().sample(500, 1);
    let h = Bandwidth::full(DMatrix::from_row_slice(2, 2, &[0.12, 0.03, 0.03, 0.09]))?;
    let kde = Kde::new(data.clone(), h.clone())?;

    for x in [[0.0, 0.0], [1.0, -0.5], [2.5, 2.5]] {
        let g = kde.gradient(&x);
        let hess = kde.hessian(&x);
        println!(
            "f({:5.2}, {:5.2}) = {:.5}   grad = ({:+.4}, {:+.4})   tr hess = {:+.4}",
            x[0],
            x[1],
            kde.density(&x),
            g[0],
            g[1],
            hess.trace()
        );
    }

    let grid = EvalGrid::covering(&data, &h, 256)?;
    let values = kde.grid_density(&grid);
    let mass: f64 = values.values().iter().sum::<f64>() * grid.cell_area();
    println!("grid mass = {mass:.6}, peak = {:.5}", values.max());
    Ok(())
}
