//! Fifty steps on one fixed batch must at least halve the joint loss.

use lgformer::model::{model_build, train_step, AdamW, Example, ModelConfig, Supervision};
use lgformer::synthshapes::{gen_dataset, GenConfig};

#[test]
fn fixed_batch_loss_halves_in_fifty_steps() {
    let cfg = ModelConfig::default();
    let mut model = model_build::<f32>(&cfg, 0).unwrap();
    let mut opt = AdamW::new(model.store(), 0.05);
    let batch: Vec<Example<f32>> = gen_dataset(&GenConfig { seed: 42, ..GenConfig::default() }, 4)
        .unwrap()
        .iter()
        .map(|s| s.example().unwrap())
        .collect();
    let mut losses = Vec::new();
    for _ in 0..50 {
        losses.push(train_step(&mut model, &mut opt, &batch, 1e-3, Supervision::Joint).unwrap().loss);
    }
    let (first, last) = (losses[0], *losses.last().unwrap());
    assert!(last <= 0.5 * first, "loss {first:.4} -> {last:.4}: {losses:?}");
}
