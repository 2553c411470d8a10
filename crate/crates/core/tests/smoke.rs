use cattn::attention::DensityFamily;
use cattn::pipeline::{generate_synthetic, train_demo, RunConfig};

#[test]
fn smoke_train() {
    let dataset = generate_synthetic(0, 3, 100, 50, 0.3).unwrap();
    for family in [DensityFamily::KernelDeformed, DensityFamily::KernelSoftmax, DensityFamily::CtsSoftmax, DensityFamily::CtsSparsemax, DensityFamily::GaussianMixture] {
        let config = RunConfig {
            density_family: family,
            epochs: 30,
            learning_rate: 0.5,
            ..RunConfig::default()
        };
        let start = std::time::Instant::now();
        match train_demo(&config, &dataset) {
            Ok(outcome) => {
                let secs = start.elapsed().as_secs_f64();
                let last = outcome.metrics.epochs.last().unwrap();
                let fb: usize = outcome.metrics.epochs.iter().map(|e| e.degenerate_fallbacks).sum();
                eprintln!(
                    "{family:?}: final loss {:.4} train {:.3} test {:.3} f1 {:.3} fallbacks {fb} | {secs:.1}s",
                    last.mean_loss, last.train.accuracy, last.test.accuracy, last.test.macro_f1
                );
            }
            Err(e) => eprintln!("{family:?}: ERROR {e}"),
        }
    }
}
