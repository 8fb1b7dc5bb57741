//! Synthetic fixtures shared by the integration tests.
#![allow(dead_code)]

use std::fs;
use std::path::{Path, PathBuf};

use stereo_seld::codec::{self, DistanceUnit, MetadataLayout};
use stereo_seld::datagen::{FoaClip, SplitMix64};
use stereo_seld::event::{Event, SeldFrameLabels};
use stereo_seld::model::ModelConfig;
use stereo_seld::numerics::Tensor;

pub const SR: u32 = 24_000;

pub fn noise(n: usize, seed: u64) -> Vec<f32> {
    let mut rng = SplitMix64::new(seed);
    (0..n).map(|_| (rng.next_f64() * 2.0 - 1.0) as f32 * 0.3).collect()
}

/// One source: class, azimuth, distance and the active label-frame range.
pub struct Source {
    pub class_id: usize,
    pub azimuth: f64,
    pub distance: f64,
    pub frames: std::ops::Range<usize>,
}

/// Mixes noise-burst plane waves into an FOA clip and returns the matching labels.
pub fn foa_scene(secs: usize, sources: &[Source], seed: u64) -> (FoaClip, SeldFrameLabels) {
    let n = secs * SR as usize;
    let spf = SR as usize / 10;
    let mut mix = FoaClip::new(vec![0.0; n], vec![0.0; n], vec![0.0; n], vec![0.0; n], SR).unwrap();
    let mut labels = SeldFrameLabels::new(secs * 10);
    for (k, s) in sources.iter().enumerate() {
        let mut sig = noise(n, seed * 31 + k as u64);
        for (i, v) in sig.iter_mut().enumerate() {
            if !s.frames.contains(&(i / spf)) {
                *v = 0.0;
            }
        }
        let pw = FoaClip::plane_wave(&sig, s.azimuth, 0.0, SR);
        for (dst, src) in [(&mut mix.w, &pw.w), (&mut mix.x, &pw.x), (&mut mix.y, &pw.y), (&mut mix.z, &pw.z)] {
            dst.iter_mut().zip(src).for_each(|(d, v)| *d += v);
        }
        for t in s.frames.clone() {
            labels.push(t, Event::new(s.class_id, k as u32, s.azimuth, s.distance, false));
        }
    }
    (mix, labels)
}

/// Writes FOA metadata in the 6-column layout with elevation, distances in centimetres.
pub fn write_foa_metadata(path: &Path, labels: &SeldFrameLabels) {
    let mut s = String::new();
    for (t, e) in labels.iter() {
        s += &format!("{t},{},{},{},0,{}\n", e.class_id, e.source_id, e.azimuth_deg.round(), (e.distance_m * 100.0).round());
    }
    fs::write(path, s).unwrap();
}

/// Three 10 s FOA recordings with metadata under `root/foa` and `root/meta`.
pub fn write_foa_fixture(root: &Path) -> (PathBuf, PathBuf) {
    let (foa, meta) = (root.join("foa"), root.join("meta"));
    fs::create_dir_all(&foa).unwrap();
    fs::create_dir_all(&meta).unwrap();
    let scenes = [
        vec![Source { class_id: 0, azimuth: 30.0, distance: 1.5, frames: 5..60 }, Source { class_id: 8, azimuth: -60.0, distance: 3.0, frames: 40..95 }],
        vec![Source { class_id: 11, azimuth: 120.0, distance: 2.0, frames: 10..30 }, Source { class_id: 1, azimuth: -10.0, distance: 1.0, frames: 55..80 }],
        vec![Source { class_id: 6, azimuth: 80.0, distance: 4.0, frames: 0..100 }],
    ];
    for (i, sources) in scenes.iter().enumerate() {
        let (clip, labels) = foa_scene(10, sources, i as u64 + 1);
        codec::write_foa(&foa.join(format!("room{i}.wav")), &clip).unwrap();
        write_foa_metadata(&meta.join(format!("room{i}.csv")), &labels);
        // Sanity check that the fixture parses back with the intended layout.
        codec::read_metadata(&meta.join(format!("room{i}.csv")), MetadataLayout::Foa, DistanceUnit::Centimeters, 13).unwrap();
    }
    (foa, meta)
}

fn stem_seed(stem: &str) -> u64 {
    stem.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x100_0000_01b3))
}

pub fn random_tensor(shape: &[usize], seed: u64) -> Tensor<f32> {
    let mut rng = SplitMix64::new(seed);
    Tensor::from_fn(shape, |_| (rng.next_f64() * 2.0 - 1.0) as f32)
}

/// Deterministic CLAP and stacked visual embeddings for every stem in `features_dir`.
pub fn write_embeddings(features_dir: &Path, clap_dir: &Path, visual_dir: &Path, cfg: &ModelConfig) {
    fs::create_dir_all(clap_dir).unwrap();
    fs::create_dir_all(visual_dir).unwrap();
    for f in codec::list_files(features_dir, "ssf").unwrap() {
        let stem = codec::stem(&f).unwrap();
        let seed = stem_seed(&stem);
        codec::write_embedding_file(&clap_dir.join(format!("{stem}.sse")), &random_tensor(&[1, cfg.clap_dim], seed)).unwrap();
        let visual = random_tensor(&[3 * cfg.visual_tokens, cfg.visual_dim], seed ^ 0x5555);
        codec::write_embedding_file(&visual_dir.join(format!("{stem}.sse")), &visual).unwrap();
    }
}

/// Every file under `dir`, relative path to contents, sorted.
pub fn snapshot(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    fn walk(base: &Path, dir: &Path, out: &mut Vec<(PathBuf, Vec<u8>)>) {
        for entry in fs::read_dir(dir).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                walk(base, &p, out);
            } else {
                out.push((p.strip_prefix(base).unwrap().to_path_buf(), fs::read(&p).unwrap()));
            }
        }
    }
    let mut out = Vec::new();
    walk(dir, dir, &mut out);
    out.sort();
    out
}

/// datagen -> features -> stats -> normalised features -> infer (three random tiny
/// systems) -> ensemble -> evaluate, all under `root`.
pub fn run_pipeline(root: &Path) -> stereo_seld::metrics::EvalReport {
    use stereo_seld::cli::{self, DatagenOptions, RunConfig};
    let cfg = RunConfig::default();
    let (foa, meta) = write_foa_fixture(root);
    let stereo = root.join("stereo");
    let opts = DatagenOptions { rotations: 2, swap: true, seed: 7, ..DatagenOptions::default() };
    let summary = cli::datagen(&foa, &meta, &stereo, &opts, &cfg).unwrap();
    assert_eq!(summary.clips, 3);
    assert_eq!(summary.emitted, summary.segments * 4);

    let raw = root.join("features_raw");
    cli::features(&stereo, None, &raw).unwrap();
    let stats = root.join("stats.ssns");
    cli::stats(&raw, &stats).unwrap();
    let feats = root.join("features");
    cli::features(&stereo, Some(&stats), &feats).unwrap();

    let model_cfg = ModelConfig::tiny();
    let (clap, visual) = (root.join("clap"), root.join("visual"));
    write_embeddings(&feats, &clap, &visual, &model_cfg);
    let mut pred_dirs = Vec::new();
    for (k, use_visual) in [(1u64, true), (2, false), (3, true)] {
        let w = root.join(format!("weights{k}.ssw"));
        cli::init_weights(&model_cfg, k, &w).unwrap();
        let out = root.join(format!("pred{k}"));
        cli::infer(&feats, &clap, use_visual.then_some(visual.as_path()), &w, &out, &cfg).unwrap();
        pred_dirs.push(out);
    }
    let ens = root.join("ensemble");
    cli::ensemble(&pred_dirs, &ens, &cfg).unwrap();
    cli::evaluate(&stereo, &ens, &cfg).unwrap()
}
