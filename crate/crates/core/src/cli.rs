//! Batch commands behind the `seld` binary. Each command maps directories of per-clip
//! files to directories of per-clip outputs; clips are processed on a bounded worker
//! pool and every output file is written atomically.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::codec::{self, DistanceUnit, MetadataLayout};
use crate::datagen::{lr_swap, render_rotated, segment_clip, silence_filter, SplitMix64};
use crate::dsp::{FeatureConfig, FeatureExtractor, FeatureTensor, NormStats};
use crate::ensemble::{combine, EnsembleConfig, EventPredictionSet};
use crate::error::{Error, Result};
use crate::event::{classes, SeldFrameLabels};
use crate::labels::{decode, DecodeThresholds};
use crate::metrics::{evaluate as score, EvalReport, MetricsConfig};
use crate::model::{ModelConfig, ModelWeights, SeldModel};
use crate::vision::{keypoint_postprocess, read_keypoints, PostprocessConfig};

/// Environment variable holding the worker count; defaults to the available cores.
pub const WORKERS_ENV: &str = "SELD_WORKERS";

/// Settings shared by the commands, loadable from JSON. Missing fields take defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub class_names: Vec<String>,
    /// Unit of the distance column in every stereo metadata file read or written.
    pub distance_unit: DistanceUnit,
    pub decode: DecodeThresholds,
    pub postprocess: PostprocessConfig,
    pub ensemble: EnsembleConfig,
    pub metrics: MetricsConfig,
    pub stats: Option<PathBuf>,
    pub weights: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            class_names: classes::NAMES.iter().map(|s| s.to_string()).collect(),
            distance_unit: DistanceUnit::Meters,
            decode: DecodeThresholds::default(),
            postprocess: PostprocessConfig::new(640.0),
            ensemble: EnsembleConfig::default(),
            metrics: MetricsConfig::default(),
            stats: None,
            weights: None,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let cfg: Self = serde_json::from_slice(&fs::read(path)?)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn n_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn validate(&self) -> Result<()> {
        let unit = |x: f64| (0.0..=1.0).contains(&x);
        let angle = |x: f64| x > 0.0 && x <= 180.0;
        let checks = [
            (!self.class_names.is_empty(), "class list must not be empty"),
            (unit(self.decode.activity) && unit(self.decode.onscreen), "decode thresholds must lie in [0, 1]"),
            (self.postprocess.hfov_deg > 0.0 && self.postprocess.hfov_deg < 180.0, "hfov must lie in (0, 180)"),
            (self.postprocess.image_width >= 1.0, "image width must be at least one pixel"),
            (angle(self.postprocess.thresh_deg), "keypoint threshold must lie in (0, 180]"),
            (unit(self.postprocess.min_confidence), "keypoint confidence must lie in [0, 1]"),
            (self.ensemble.quorum >= 1, "ensemble quorum must be at least 1"),
            (angle(self.ensemble.angle_thresh_deg), "ensemble angle must lie in (0, 180]"),
            ((1..=crate::labels::N_TRACKS).contains(&self.ensemble.max_per_class), "ensemble cap must lie in 1..=3"),
            (angle(self.metrics.angle_thresh_deg), "metric angle must lie in (0, 180]"),
            (self.metrics.rel_dist_thresh > 0.0, "metric distance gate must be positive"),
        ];
        match checks.iter().find(|(ok, _)| !ok) {
            Some((_, msg)) => Err(Error::invalid(format!("run config: {msg}"))),
            None => Ok(()),
        }
    }
}

/// Worker pool sized by [`WORKERS_ENV`].
pub fn worker_pool() -> Result<rayon::ThreadPool> {
    let n = match std::env::var(WORKERS_ENV) {
        Ok(v) => v
            .trim()
            .parse::<usize>()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| Error::invalid(format!("{WORKERS_ENV} must be a positive integer, got {v:?}")))?,
        Err(_) => std::thread::available_parallelism().map_or(1, |n| n.get()),
    };
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build()
        .map_err(|e| Error::invalid(format!("cannot start worker pool: {e}")))
}

fn par_map<T: Sync, U: Send>(items: &[T], f: impl Fn(&T) -> Result<U> + Sync + Send) -> Result<Vec<U>> {
    worker_pool()?.install(|| items.par_iter().map(f).collect())
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::data(format!("cannot create {}: {e}", dir.display())))
}

fn stems(dir: &Path, ext: &str) -> Result<Vec<String>> {
    codec::list_files(dir, ext)?.iter().map(|p| codec::stem(p)).collect()
}

/// Fails unless both directories hold the same clip stems.
fn require_same_stems(a: &[String], a_dir: &Path, b: &[String], b_dir: &Path) -> Result<()> {
    let (sa, sb): (BTreeSet<_>, BTreeSet<_>) = (a.iter().collect(), b.iter().collect());
    if sa == sb {
        return Ok(());
    }
    let only_a: Vec<_> = sa.difference(&sb).map(|s| s.as_str()).collect();
    let only_b: Vec<_> = sb.difference(&sa).map(|s| s.as_str()).collect();
    Err(Error::data(format!(
        "misaligned stems: only in {}: [{}]; only in {}: [{}]",
        a_dir.display(),
        only_a.join(", "),
        b_dir.display(),
        only_b.join(", ")
    )))
}

fn read_stereo_csv(path: &Path, cfg: &RunConfig) -> Result<SeldFrameLabels> {
    codec::read_metadata(path, MetadataLayout::Stereo, cfg.distance_unit, cfg.n_classes())
}

/// Pads a set of grids to a common length.
fn align(grids: Vec<SeldFrameLabels>) -> Result<Vec<SeldFrameLabels>> {
    let n = grids.iter().map(SeldFrameLabels::n_frames).max().unwrap_or(0);
    grids.iter().map(|g| g.fit_to(n)).collect()
}

/// Extracts features for every `*.wav` in `in_dir` into `out_dir/<stem>.ssf`.
pub fn features(in_dir: &Path, stats: Option<&Path>, out_dir: &Path) -> Result<usize> {
    let stats = stats.map(|p| NormStats::read(&mut std::io::BufReader::new(fs::File::open(p)?))).transpose()?;
    let extractor = FeatureExtractor::new(FeatureConfig::default())?;
    let wavs = codec::list_files(in_dir, "wav")?;
    ensure_dir(out_dir)?;
    par_map(&wavs, |wav| {
        let clip = codec::read_stereo(wav)?;
        let f = extractor.extract(&clip, stats.as_ref()).map_err(|e| context(e, wav))?;
        codec::write_features(&out_dir.join(format!("{}.ssf", codec::stem(wav)?)), &f)
    })?;
    Ok(wavs.len())
}

/// Per-channel, per-bin normalisation statistics over unnormalised feature files.
pub fn stats(features_dir: &Path, out: &Path) -> Result<NormStats> {
    let files = codec::list_files(features_dir, "ssf")?;
    let feats: Vec<FeatureTensor> = par_map(&files, |p| codec::read_features(p))?;
    let stats = NormStats::compute(&feats)?;
    codec::atomic_write(out, |w| stats.write(w))?;
    Ok(stats)
}

fn context(e: Error, path: &Path) -> Error {
    match e {
        Error::Data(m) => Error::Data(format!("{}: {m}", path.display())),
        Error::Shape(m) => Error::Shape(format!("{}: {m}", path.display())),
        other => other,
    }
}

#[derive(Debug, Clone)]
pub struct DatagenOptions {
    pub rotations: usize,
    pub swap: bool,
    pub seed: u64,
    pub segment_secs: f64,
    pub hop_secs: f64,
    /// Layout and distance unit of the input metadata.
    pub meta_layout: MetadataLayout,
    pub meta_unit: DistanceUnit,
}

impl Default for DatagenOptions {
    fn default() -> Self {
        Self {
            rotations: 4,
            swap: false,
            seed: 0,
            segment_secs: 5.0,
            hop_secs: 5.0,
            meta_layout: MetadataLayout::Foa,
            meta_unit: DistanceUnit::Centimeters,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct DatagenSummary {
    pub clips: usize,
    /// Segments kept after the silence filter.
    pub segments: usize,
    /// Stereo clips written.
    pub emitted: usize,
}

/// Segments, rotates and renders FOA recordings into labelled stereo clips.
///
/// Rotation angles depend only on the seed, the clip's position in sorted stem order, the
/// segment index and the rotation index. With zero rotations each segment is rendered
/// once without rotation.
pub fn datagen(foa_dir: &Path, meta_dir: &Path, out_dir: &Path, opts: &DatagenOptions, cfg: &RunConfig) -> Result<DatagenSummary> {
    let wav_stems = stems(foa_dir, "wav")?;
    let csv_stems = stems(meta_dir, "csv")?;
    require_same_stems(&wav_stems, foa_dir, &csv_stems, meta_dir)?;
    ensure_dir(out_dir)?;
    let root = SplitMix64::new(opts.seed);
    let indexed: Vec<(usize, &String)> = wav_stems.iter().enumerate().collect();
    let per_clip = par_map(&indexed, |&(ci, stem)| {
        let audio = codec::read_foa(&foa_dir.join(format!("{stem}.wav")))?;
        let meta = meta_dir.join(format!("{stem}.csv"));
        let labels = codec::read_metadata(&meta, opts.meta_layout, opts.meta_unit, cfg.n_classes())?;
        let segments = silence_filter(segment_clip(&audio, &labels, opts.segment_secs, opts.hop_secs).map_err(|e| context(e, &meta))?);
        let clip_rng = root.fork(ci as u64);
        let mut emitted = 0;
        for seg in &segments {
            let mut rng = clip_rng.fork(seg.index as u64);
            let yaws: Vec<(String, f64)> = if opts.rotations == 0 {
                vec![(String::new(), 0.0)]
            } else {
                (0..opts.rotations).map(|r| (format!("_r{r}"), rng.yaw_deg())).collect()
            };
            for (suffix, yaw) in yaws {
                let (stereo, lab) = render_rotated(seg, yaw, true);
                let name = format!("{stem}_s{:02}{suffix}", seg.index);
                codec::write_stereo(&out_dir.join(format!("{name}.wav")), &stereo)?;
                codec::write_metadata(&out_dir.join(format!("{name}.csv")), &lab, cfg.distance_unit)?;
                emitted += 1;
                if opts.swap {
                    let (s, l) = lr_swap(&stereo, &lab);
                    codec::write_stereo(&out_dir.join(format!("{name}_swap.wav")), &s)?;
                    codec::write_metadata(&out_dir.join(format!("{name}_swap.csv")), &l, cfg.distance_unit)?;
                    emitted += 1;
                }
            }
        }
        Ok((segments.len(), emitted))
    })?;
    Ok(DatagenSummary {
        clips: wav_stems.len(),
        segments: per_clip.iter().map(|c| c.0).sum(),
        emitted: per_clip.iter().map(|c| c.1).sum(),
    })
}

/// Runs the model over every `<stem>.ssf` and writes decoded `<stem>.csv` files.
///
/// CLAP embeddings are read from `clap_dir/<stem>.sse`. Visual embeddings, when a
/// directory is given, come from `visual_dir/<stem>.sse` as a stack of frames; without
/// one the audio-visual blocks are skipped.
pub fn infer(
    features_dir: &Path,
    clap_dir: &Path,
    visual_dir: Option<&Path>,
    weights: &Path,
    out_dir: &Path,
    cfg: &RunConfig,
) -> Result<usize> {
    let model = SeldModel::from_weights(&ModelWeights::load(weights)?)?;
    if model.config().n_classes != cfg.n_classes() {
        return Err(Error::invalid(format!(
            "model predicts {} classes but the class list has {}",
            model.config().n_classes,
            cfg.n_classes()
        )));
    }
    let feature_stems = stems(features_dir, "ssf")?;
    require_same_stems(&feature_stems, features_dir, &stems(clap_dir, "sse")?, clap_dir)?;
    if let Some(v) = visual_dir {
        require_same_stems(&feature_stems, features_dir, &stems(v, "sse")?, v)?;
    }
    ensure_dir(out_dir)?;
    par_map(&feature_stems, |stem| {
        let feats = codec::read_features(&features_dir.join(format!("{stem}.ssf")))?;
        let clap = codec::read_embedding_file(&clap_dir.join(format!("{stem}.sse")))?;
        let visual = visual_dir
            .map(|v| codec::read_embedding_file(&v.join(format!("{stem}.sse"))).and_then(|s| model.split_visual_frames(&s)))
            .transpose()?;
        let pred = model.forward(&feats, &clap, visual.as_deref()).map_err(|e| context(e, Path::new(stem)))?;
        codec::write_metadata(&out_dir.join(format!("{stem}.csv")), &decode(&pred, cfg.decode), cfg.distance_unit)
    })?;
    Ok(feature_stems.len())
}

/// Scores every prediction CSV against the reference CSV of the same stem, pooling all
/// clips into one report.
pub fn evaluate(ref_dir: &Path, pred_dir: &Path, cfg: &RunConfig) -> Result<EvalReport> {
    let ref_stems = stems(ref_dir, "csv")?;
    require_same_stems(&ref_stems, ref_dir, &stems(pred_dir, "csv")?, pred_dir)?;
    let pairs = par_map(&ref_stems, |stem| {
        let r = read_stereo_csv(&ref_dir.join(format!("{stem}.csv")), cfg)?;
        let p = read_stereo_csv(&pred_dir.join(format!("{stem}.csv")), cfg)?;
        align(vec![r, p])
    })?;
    let (mut refs, mut preds) = (SeldFrameLabels::new(0), SeldFrameLabels::new(0));
    for pair in &pairs {
        refs = refs.concat(&pair[0]);
        preds = preds.concat(&pair[1]);
    }
    score(&refs, &preds, cfg.n_classes(), &cfg.metrics)
}

/// Majority-vote fusion of prediction directories; system ids follow argument order.
pub fn ensemble(pred_dirs: &[PathBuf], out_dir: &Path, cfg: &RunConfig) -> Result<usize> {
    let first = pred_dirs.first().ok_or_else(|| Error::invalid("ensemble needs at least one prediction directory"))?;
    let first_stems = stems(first, "csv")?;
    for d in &pred_dirs[1..] {
        require_same_stems(&first_stems, first, &stems(d, "csv")?, d)?;
    }
    ensure_dir(out_dir)?;
    par_map(&first_stems, |stem| {
        let grids = pred_dirs
            .iter()
            .map(|d| read_stereo_csv(&d.join(format!("{stem}.csv")), cfg))
            .collect::<Result<Vec<_>>>()?;
        let systems: Vec<EventPredictionSet> = align(grids)?
            .into_iter()
            .enumerate()
            .map(|(i, labels)| EventPredictionSet { system_id: i as u32, labels })
            .collect();
        codec::write_metadata(&out_dir.join(format!("{stem}.csv")), &combine(&systems, &cfg.ensemble)?, cfg.distance_unit)
    })?;
    Ok(first_stems.len())
}

/// Keypoint-driven on-screen correction of every prediction CSV, using
/// `kp_dir/<stem>.jsonl`.
pub fn postprocess(pred_dir: &Path, kp_dir: &Path, out_dir: &Path, cfg: &RunConfig) -> Result<usize> {
    let pred_stems = stems(pred_dir, "csv")?;
    require_same_stems(&pred_stems, pred_dir, &stems(kp_dir, "jsonl")?, kp_dir)?;
    ensure_dir(out_dir)?;
    par_map(&pred_stems, |stem| {
        let preds = read_stereo_csv(&pred_dir.join(format!("{stem}.csv")), cfg)?;
        let kp_path = kp_dir.join(format!("{stem}.jsonl"));
        let kps = read_keypoints(std::io::BufReader::new(fs::File::open(&kp_path)?)).map_err(|e| match e {
            Error::Format(m) => Error::Format(format!("{}: {m}", kp_path.display())),
            other => other,
        })?;
        let out = keypoint_postprocess(&preds, &kps, &cfg.postprocess)?;
        codec::write_metadata(&out_dir.join(format!("{stem}.csv")), &out, cfg.distance_unit)
    })?;
    Ok(pred_stems.len())
}

/// Writes seeded random weights for `config`.
pub fn init_weights(config: &ModelConfig, seed: u64, out: &Path) -> Result<()> {
    let w = ModelWeights::random(config, seed)?;
    codec::atomic_write(out, |f| w.write(f))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_is_valid_and_round_trips() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        assert_eq!(cfg.n_classes(), 13);
        let json = serde_json::to_string(&cfg).unwrap();
        assert_eq!(serde_json::from_str::<RunConfig>(&json).unwrap(), cfg);
        let partial: RunConfig = serde_json::from_str(r#"{"distance_unit": "centimeters"}"#).unwrap();
        assert_eq!(partial.distance_unit, DistanceUnit::Centimeters);
        assert!(serde_json::from_str::<RunConfig>(r#"{"bogus": 1}"#).is_err());
    }

    #[test]
    fn invalid_thresholds_rejected() {
        let mut cfg = RunConfig::default();
        cfg.decode.activity = 1.5;
        assert!(matches!(cfg.validate(), Err(Error::InvalidArgument(_))));
        let mut cfg = RunConfig::default();
        cfg.ensemble.max_per_class = 4;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn stem_mismatch_is_a_data_error() {
        let a = vec!["x".to_string(), "y".to_string()];
        let b = vec!["x".to_string()];
        let err = require_same_stems(&a, Path::new("A"), &b, Path::new("B")).unwrap_err();
        assert!(matches!(err, Error::Data(ref m) if m.contains("only in A: [y]")));
    }
}
