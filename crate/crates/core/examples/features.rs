//! Feature extraction for a panned noise source, plus normalisation statistics.

use stereo_seld::datagen::SplitMix64;
use stereo_seld::dsp::{stack_features, NormStats, StereoClip, ILD, SAMPLE_RATE};

fn main() -> stereo_seld::Result<()> {
    let n = 5 * SAMPLE_RATE as usize;
    let mut rng = SplitMix64::new(1);
    let src: Vec<f32> = (0..n).map(|_| (rng.next_f64() * 2.0 - 1.0) as f32 * 0.3).collect();
    // Twice as loud on the left: the ILD plane should sit near ln 4.
    let clip = StereoClip::new(src.iter().map(|v| 2.0 * v).collect(), src, SAMPLE_RATE)?;

    let feats = stack_features(&clip, None)?;
    println!("feature tensor shape: {:?}", feats.tensor().shape());
    let ild = feats.channel(ILD);
    let mean = ild.iter().map(|&v| v as f64).sum::<f64>() / ild.len() as f64;
    println!("mean ILD {mean:.4} (ln 4 = {:.4})", 4f64.ln());

    let stats = NormStats::compute(std::slice::from_ref(&feats))?;
    let normed = stats.apply(&feats)?;
    let first = &normed.channel(0)[..5];
    println!("stats over {} channels x {} bins; first normalised values {first:?}", stats.n_channels, stats.n_bins);
    Ok(())
}
