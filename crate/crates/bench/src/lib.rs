//! Benchmark fixtures shared by the criterion targets.

use lsgvae_core::{Model, ModelConfig, RngStream, Tensor};

/// A seeded `[rows, cols]` matrix of standard normal entries.
pub fn random_matrix(rows: usize, cols: usize, seed: u64) -> Tensor {
    RngStream::new(seed).normal_tensor(&[rows, cols])
}

/// A univariate model at the default window sizes with a reduced width.
pub fn bench_model(latent_dim: usize, hidden_width: usize) -> Model {
    let config = ModelConfig {
        latent_dim,
        hidden_width,
        ..Default::default()
    };
    Model::init(config, 0).expect("valid bench config")
}

/// `batch` look-back windows of a noisy sine.
pub fn lookbacks(model: &Model, batch: usize) -> Vec<Tensor> {
    let (l, c) = (model.config.lookback, model.config.channels);
    let mut rng = RngStream::new(1);
    (0..batch)
        .map(|b| {
            let data = (0..l * c)
                .map(|i| ((b + i / c) as f64 * 0.1).sin() + 0.3 * rng.normal())
                .collect();
            Tensor::new(vec![l, c], data).expect("consistent shape")
        })
        .collect()
}
