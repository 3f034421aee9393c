//! Extract the boundary of an estimated HDR and write it as CSV.

use lsband::contour::{attach_normals, extract_contour};
use lsband::density_models::MixtureDensity;
use lsband::kde::{Bandwidth, Kde};
use lsband::levels::{tau_level_values, EvalGrid, DEFAULT_TAU_TOL};

fn main() -> lsband::Result<()> {
    let data = MixtureDensity::sharp_mode().sample(2000, 5);
    let h = Bandwidth::diagonal(&[0.02, 0.06])?;
    let kde = Kde::new(data.clone(), h.clone())?;
    let grid = EvalGrid::covering(&data, &h, 300)?;
    let values = kde.grid_density(&grid);

    for tau in [0.2, 0.5, 0.8] {
        let level = tau_level_values(&values, tau, DEFAULT_TAU_TOL)?;
        let contour = attach_normals(extract_contour(&values, level)?, &kde)?;
        println!(
            "tau = {tau}: level {level:.4}, {} loop(s), {} segments, length {:.3}, closed = {}",
            contour.n_loops(),
            contour.segments.len(),
            contour.total_length(),
            contour.is_closed()
        );
        if tau == 0.2 {
            let path = std::env::temp_dir().join("lsband_contour.csv");
            contour.write_csv(std::fs::File::create(&path)?)?;
            println!("  wrote {}", path.display());
        }
    }
    Ok(())
}
