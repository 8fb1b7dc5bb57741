//! Forward pass of a small random model in audio-only and audio-visual modes.

use stereo_seld::datagen::SplitMix64;
use stereo_seld::dsp::FeatureTensor;
use stereo_seld::labels::{decode, DecodeThresholds};
use stereo_seld::model::{ModelConfig, ModelWeights, SeldModel};
use stereo_seld::numerics::Tensor;

fn random(shape: &[usize], seed: u64) -> Tensor<f32> {
    let mut rng = SplitMix64::new(seed);
    Tensor::from_fn(shape, |_| (rng.next_f64() * 2.0 - 1.0) as f32)
}

fn main() -> stereo_seld::Result<()> {
    let cfg = ModelConfig::tiny();
    let weights = ModelWeights::random(&cfg, 1)?;
    let path = std::env::temp_dir().join("seld_example_tiny.ssw");
    weights.save(&path)?;
    let model = SeldModel::from_weights(&ModelWeights::load(&path)?)?;
    println!("{} parameter tensors, saved to {}", weights.tensors.len(), path.display());

    let features = FeatureTensor::new(random(&[4, 160, 64], 2))?;
    let clap = random(&[1, cfg.clap_dim], 3);
    let frames: Vec<_> = (0..4).map(|k| random(&[cfg.visual_tokens, cfg.visual_dim], 10 + k)).collect();

    let audio = model.forward(&features, &clap, None)?;
    let av = model.forward(&features, &clap, Some(&frames))?;
    println!("output: {} frames x {} classes x 3 tracks x 4 lanes", av.n_frames(), av.n_classes());
    println!("audio-visual changes the output by up to {:.3}", audio.max_abs_diff(&av));

    let low = DecodeThresholds { activity: 0.3, onscreen: 0.5 };
    println!("{} events decoded at activity 0.3", decode(&av, low).event_count());
    let _ = std::fs::remove_file(path);
    Ok(())
}
