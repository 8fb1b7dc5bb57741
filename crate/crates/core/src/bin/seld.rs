use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use stereo_seld::cli::{self, DatagenOptions, RunConfig};
use stereo_seld::codec::{DistanceUnit, MetadataLayout};
use stereo_seld::model::ModelConfig;
use stereo_seld::Result;

/// Stereo sound event localization and detection pipeline.
///
/// Worker threads are taken from SELD_WORKERS (default: all cores).
/// Exit codes: 0 ok, 2 usage, 3 data error, 4 format error.
#[derive(Parser)]
#[command(name = "seld", version)]
struct Args {
    /// JSON run configuration; fields left out keep their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Distance unit of stereo metadata files (overrides the config).
    #[arg(long, global = true, value_enum)]
    unit: Option<Unit>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Unit {
    M,
    Cm,
}

impl From<Unit> for DistanceUnit {
    fn from(u: Unit) -> Self {
        match u {
            Unit::M => DistanceUnit::Meters,
            Unit::Cm => DistanceUnit::Centimeters,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Layout {
    Foa,
    Stereo,
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    Default,
    Tiny,
}

#[derive(Subcommand)]
enum Command {
    /// Extract 4-channel feature stacks from 24 kHz stereo WAVs.
    Features {
        in_dir: PathBuf,
        out_dir: PathBuf,
        /// Normalisation statistics (SSNS); falls back to the config.
        #[arg(long)]
        stats: Option<PathBuf>,
    },
    /// Compute normalisation statistics over unnormalised feature files.
    Stats { features_dir: PathBuf, out: PathBuf },
    /// Segment, rotate and render FOA recordings into stereo training clips.
    Datagen {
        foa_dir: PathBuf,
        meta_dir: PathBuf,
        out_dir: PathBuf,
        #[arg(long, default_value_t = 4)]
        rotations: usize,
        /// Also emit a left/right mirrored copy of every clip.
        #[arg(long)]
        swap: bool,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 5.0)]
        segment_secs: f64,
        #[arg(long, default_value_t = 5.0)]
        hop_secs: f64,
        #[arg(long, value_enum, default_value = "foa")]
        meta_layout: Layout,
        /// Distance unit of the input metadata.
        #[arg(long, value_enum, default_value = "cm")]
        meta_unit: Unit,
    },
    /// Run the model and write decoded prediction CSVs.
    Infer {
        features_dir: PathBuf,
        clap_dir: PathBuf,
        out_dir: PathBuf,
        /// Stacked visual embeddings; omit for audio-only inference.
        #[arg(long)]
        visual_dir: Option<PathBuf>,
        /// Weight file (SSW1); falls back to the config.
        #[arg(long)]
        weights: Option<PathBuf>,
    },
    /// Score prediction CSVs against references.
    Evaluate {
        ref_dir: PathBuf,
        pred_dir: PathBuf,
        /// Row label in the printed table.
        #[arg(long, default_value = "system")]
        label: String,
        /// Also write the full report as JSON.
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Majority-vote fusion of several prediction directories.
    Ensemble {
        #[arg(long, short)]
        out_dir: PathBuf,
        #[arg(required = true)]
        pred_dirs: Vec<PathBuf>,
    },
    /// Flag predictions on-screen when a body keypoint lies close in azimuth.
    Postprocess { pred_dir: PathBuf, kp_dir: PathBuf, out_dir: PathBuf },
    /// Write seeded random weights.
    InitWeights {
        out: PathBuf,
        #[arg(long, value_enum, default_value = "default")]
        preset: Preset,
        /// Model configuration as JSON; overrides the preset.
        #[arg(long)]
        model_config: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn required<'a>(flag: &'a Option<PathBuf>, fallback: &'a Option<PathBuf>, what: &str) -> Result<&'a Path> {
    flag.as_deref()
        .or(fallback.as_deref())
        .ok_or_else(|| stereo_seld::Error::InvalidArgument(format!("no {what} given on the command line or in the config")))
}

fn run(args: Args) -> Result<()> {
    let mut cfg = match &args.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(u) = args.unit {
        cfg.distance_unit = u.into();
    }
    match args.command {
        Command::Features { in_dir, out_dir, stats } => {
            let stats = stats.or(cfg.stats.clone());
            let n = cli::features(&in_dir, stats.as_deref(), &out_dir)?;
            println!("extracted features for {n} clips");
        }
        Command::Stats { features_dir, out } => {
            let s = cli::stats(&features_dir, &out)?;
            println!("wrote {}x{} statistics to {}", s.n_channels, s.n_bins, out.display());
        }
        Command::Datagen { foa_dir, meta_dir, out_dir, rotations, swap, seed, segment_secs, hop_secs, meta_layout, meta_unit } => {
            let opts = DatagenOptions {
                rotations,
                swap,
                seed,
                segment_secs,
                hop_secs,
                meta_layout: match meta_layout {
                    Layout::Foa => MetadataLayout::Foa,
                    Layout::Stereo => MetadataLayout::Stereo,
                },
                meta_unit: meta_unit.into(),
            };
            let s = cli::datagen(&foa_dir, &meta_dir, &out_dir, &opts, &cfg)?;
            println!("{} clips, {} segments kept, {} stereo clips written", s.clips, s.segments, s.emitted);
        }
        Command::Infer { features_dir, clap_dir, out_dir, visual_dir, weights } => {
            let weights = required(&weights, &cfg.weights, "weights file")?;
            let n = cli::infer(&features_dir, &clap_dir, visual_dir.as_deref(), weights, &out_dir, &cfg)?;
            println!("wrote predictions for {n} clips");
        }
        Command::Evaluate { ref_dir, pred_dir, label, json } => {
            let report = cli::evaluate(&ref_dir, &pred_dir, &cfg)?;
            print!("{}", report.table(&label));
            if let Some(p) = json {
                let body = serde_json::to_vec_pretty(&report)?;
                stereo_seld::codec::atomic_write(&p, |w| Ok(std::io::Write::write_all(w, &body)?))?;
            }
        }
        Command::Ensemble { out_dir, pred_dirs } => {
            let n = cli::ensemble(&pred_dirs, &out_dir, &cfg)?;
            println!("fused {} systems over {n} clips", pred_dirs.len());
        }
        Command::Postprocess { pred_dir, kp_dir, out_dir } => {
            let n = cli::postprocess(&pred_dir, &kp_dir, &out_dir, &cfg)?;
            println!("post-processed {n} clips");
        }
        Command::InitWeights { out, preset, model_config, seed } => {
            let config = match model_config {
                Some(p) => serde_json::from_slice(&std::fs::read(p)?)?,
                None => match preset {
                    Preset::Default => ModelConfig::default(),
                    Preset::Tiny => ModelConfig::tiny(),
                },
            };
            cli::init_weights(&config, seed, &out)?;
            println!("wrote weights to {}", out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let args = Args::parse();
    match run(args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("seld: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
