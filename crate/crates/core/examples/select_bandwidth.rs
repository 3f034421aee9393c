//! Plug-in bandwidth selection for each bandwidth class.

use lsband::density_models::MixtureDensity;
use lsband::kde::BandwidthClass;
use lsband::selector::{select_bandwidth, SelectorConfig};
use lsband::Error;

fn main() -> lsband::Result<()> {
    let data = MixtureDensity::sharp_mode().sample(1500, 11);
    for class in [BandwidthClass::Scalar, BandwidthClass::Diagonal, BandwidthClass::Full] {
        let config = SelectorConfig::hdr(0.2).with_class(class);
        let result = match select_bandwidth(&data, &config) {
            Ok(r) => r,
            Err(Error::NoConvergence(r)) => {
                println!("{class:?}: no start converged, reporting the best point");
                *r
            }
            Err(e) => return Err(e),
        };
        let h = result.bandwidth.rows();
        println!(
            "{class:?}: H = [[{:.4}, {:.4}], [{:.4}, {:.4}]]  risk = {:.5}  f_tau = {:.4}  iterates = {}",
            h[0][0],
            h[0][1],
            h[1][0],
            h[1][1],
            result.risk,
            result.f_tau_hat.unwrap_or(f64::NAN),
            result.trace.len()
        );
    }
    Ok(())
}
