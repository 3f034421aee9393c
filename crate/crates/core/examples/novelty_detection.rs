//! Flag points outside a 90% HDR fitted to clean training data.

use lsband::density_models::MixtureDensity;
use lsband::kde::DataSet;
use lsband::selector::novelty_classify;

fn main() -> lsband::Result<()> {
    let train = MixtureDensity::sharp_mode().sample(1000, 21);
    let normal = MixtureDensity::sharp_mode().sample(300, 22);
    let anomalies = MixtureDensity::isotropic(3.0, 2)?.sample(60, 23);

    let mut rows: Vec<Vec<f64>> = normal.rows().map(<[f64]>::to_vec).collect();
    rows.extend(anomalies.rows().map(<[f64]>::to_vec));
    let test = DataSet::from_vec_rows(&rows)?;
    let labels: Vec<u8> = (0..test.n()).map(|i| u8::from(i >= normal.n())).collect();

    let result = novelty_classify(&train, 0.1, &test, None, Some(&labels))?;
    let summary = result.summary.expect("labels were supplied");
    println!("selected H = {:?}", result.bandwidth.rows());
    println!("f_tau_hat = {:.4}", result.f_tau_hat);
    println!(
        "false positive rate {:.3} on {} normal points, true positive rate {:.3} on {} anomalies",
        summary.fpr.unwrap_or(f64::NAN),
        summary.n_normal,
        summary.tpr.unwrap_or(f64::NAN),
        summary.n_anomaly
    );
    Ok(())
}
