//! Shared fixtures for the benchmarks.

use equivar_core::pipeline::{assemble_batch, generate_synthetic_pairs, Batch, PairedDataset, Samplers, TrainConfig, Trainer};

/// Desk-default trainer with `centroids` vectors per item, its dataset and
/// one assembled batch.
pub fn fixture(centroids: usize) -> (Trainer, PairedDataset, Batch) {
    let config = TrainConfig {
        centroids,
        ..TrainConfig::default()
    };
    let data = generate_synthetic_pairs(&config.data_config(), &config.model_config()).expect("valid config");
    let trainer = Trainer::new(config.clone(), data.len()).expect("valid config");
    let mut samplers = Samplers::new(&config);
    let batch = assemble_batch(&data, &trainer.next_indices(), &mut samplers, &config).expect("batch");
    (trainer, data, batch)
}
