//! Simulate training data, fit a small CNN and report test metrics.
//!
//! `cargo run --release -p fhn-core --example quickstart`

use fhn_core::dataset::{DataSpec, FeatureKind, Scaler};
use fhn_core::experiments::Fitted;
use fhn_core::nn::{train, Network, NetworkSpec, TrainConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let spec = DataSpec::default();
    let train_set = spec.build_dataset(1, 300, FeatureKind::Time, false, false)?;
    let valid_set = spec.build_dataset(2, 100, FeatureKind::Time, false, false)?;
    let test_set = spec.build_dataset(3, 200, FeatureKind::Time, false, false)?;

    let scaler = Scaler::fit(&train_set)?;
    let net = Network::init(NetworkSpec::cnn_family(train_set.feature_len(), 3, 8, 2), 7)?;
    let cfg = TrainConfig { epochs: 30, ..TrainConfig::default() };
    let (net, history) = train(net, &scaler.apply(&train_set)?, Some(&scaler.apply(&valid_set)?), &cfg)?;
    if let Some(last) = history.last() {
        println!("epoch {}: train loss {:.4}, valid loss {:.4}", last.epoch, last.train_loss, last.valid_loss);
    }

    let fitted = Fitted { net, scaler, history };
    let (report, _) = fitted.evaluate(&test_set)?;
    println!(
        "test: R2 {:.4}, median APE {:.4}, squared bias {:.2e}, C-MSE {:.2e}",
        report.r2, report.median_ape, report.squared_bias, report.c_mse
    );
    Ok(())
}
