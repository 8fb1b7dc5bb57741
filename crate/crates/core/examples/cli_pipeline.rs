//! The batch pipeline driven through the library: datagen, features, inference with
//! random weights, and evaluation against the generated labels.
//!
//! The same steps are available from the `seld` binary.

use std::fs;

use stereo_seld::cli::{self, DatagenOptions, RunConfig};
use stereo_seld::codec;
use stereo_seld::datagen::{FoaClip, SplitMix64};
use stereo_seld::model::ModelConfig;
use stereo_seld::numerics::Tensor;

fn main() -> stereo_seld::Result<()> {
    let root = std::env::temp_dir().join(format!("seld_pipeline_{}", std::process::id()));
    let (foa, meta) = (root.join("foa"), root.join("meta"));
    fs::create_dir_all(&foa)?;
    fs::create_dir_all(&meta)?;

    // One 10 s recording with a source at 50 degrees, 2.5 m away.
    let mut rng = SplitMix64::new(5);
    let signal: Vec<f32> = (0..240_000).map(|_| (rng.next_f64() - 0.5) as f32 * 0.5).collect();
    codec::write_foa(&foa.join("scene.wav"), &FoaClip::plane_wave(&signal, 50.0, 0.0, 24_000))?;
    let rows: String = (0..100).map(|t| format!("{t},2,0,50,0,250\n")).collect();
    fs::write(meta.join("scene.csv"), rows)?;

    let cfg = RunConfig::default();
    let stereo = root.join("stereo");
    let opts = DatagenOptions { rotations: 2, swap: true, seed: 1, ..DatagenOptions::default() };
    let summary = cli::datagen(&foa, &meta, &stereo, &opts, &cfg)?;
    println!("datagen: {summary:?}");

    let feats = root.join("features");
    println!("features: {} clips", cli::features(&stereo, None, &feats)?);

    let model_cfg = ModelConfig::tiny();
    let weights = root.join("tiny.ssw");
    cli::init_weights(&model_cfg, 9, &weights)?;
    let clap = root.join("clap");
    fs::create_dir_all(&clap)?;
    for f in codec::list_files(&feats, "ssf")? {
        let emb = Tensor::from_fn(&[1, model_cfg.clap_dim], |i| (i as f32 * 0.37).sin());
        codec::write_embedding_file(&clap.join(format!("{}.sse", codec::stem(&f)?)), &emb)?;
    }
    let preds = root.join("pred");
    println!("infer: {} clips", cli::infer(&feats, &clap, None, &weights, &preds, &cfg)?);

    let report = cli::evaluate(&stereo, &preds, &cfg)?;
    print!("{}", report.table("random tiny"));
    fs::remove_dir_all(&root)?;
    Ok(())
}
