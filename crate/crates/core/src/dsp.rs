//! Acoustic front-end: the four-plane stereo feature stack.
//!
//! Planes, in order: log-mel of the left channel, log-mel of the right channel, the
//! inter-channel level difference projected onto the mel bands, and the short-term
//! power of the autocorrelation (stpACC) of the mid channel.
//!
//! All spectral work runs in `f64`; the stacked output is stored as `f32`.

use std::io::{Read, Write};
use std::sync::Arc;

use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use crate::binio;
use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const SAMPLE_RATE: u32 = 24_000;
pub const N_MELS: usize = 64;
pub const N_FEATURE_CHANNELS: usize = 4;

pub const LOGMEL_LEFT: usize = 0;
pub const LOGMEL_RIGHT: usize = 1;
pub const ILD: usize = 2;
pub const STPACC: usize = 3;

/// Two equal-length channels in `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct StereoClip {
    pub left: Vec<f32>,
    pub right: Vec<f32>,
    pub sample_rate: u32,
}

impl StereoClip {
    pub fn new(left: Vec<f32>, right: Vec<f32>, sample_rate: u32) -> Result<Self> {
        if left.len() != right.len() {
            return Err(Error::data(format!(
                "stereo channels differ in length: {} vs {}",
                left.len(),
                right.len()
            )));
        }
        if sample_rate == 0 {
            return Err(Error::invalid("sample rate must be positive"));
        }
        Ok(Self { left, right, sample_rate })
    }

    pub fn len(&self) -> usize {
        self.left.len()
    }

    pub fn is_empty(&self) -> bool {
        self.left.is_empty()
    }

    pub fn duration_secs(&self) -> f64 {
        self.len() as f64 / self.sample_rate as f64
    }

    /// Left and right exchanged.
    pub fn swapped(&self) -> Self {
        Self { left: self.right.clone(), right: self.left.clone(), sample_rate: self.sample_rate }
    }

    /// `(left + right) / 2`.
    pub fn mid(&self) -> Vec<f32> {
        self.left.iter().zip(&self.right).map(|(l, r)| 0.5 * (l + r)).collect()
    }
}

/// Framing of a short-time transform.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct StftSpec {
    /// Analysis (Hann) window length in samples.
    pub window_size: usize,
    pub hop: usize,
    /// Transform length; the window is zero-padded up to it.
    pub n_fft: usize,
}

impl StftSpec {
    pub fn new(window_size: usize, hop: usize, n_fft: usize) -> Result<Self> {
        if window_size < 2 || hop == 0 || hop > window_size || n_fft < window_size {
            return Err(Error::invalid(format!(
                "invalid STFT framing: window {window_size}, hop {hop}, n_fft {n_fft}"
            )));
        }
        Ok(Self { window_size, hop, n_fft })
    }

    /// 512-point Hann window, 150-sample hop.
    pub fn spectrogram() -> Self {
        Self { window_size: 512, hop: 150, n_fft: 512 }
    }

    /// 1014-point Hann window, 150-sample hop, transformed at 1024 points.
    pub fn autocorrelation() -> Self {
        Self { window_size: 1014, hop: 150, n_fft: 1024 }
    }

    pub fn n_bins(&self) -> usize {
        self.n_fft / 2 + 1
    }

    /// Frames produced for a signal of `len` samples: one per hop.
    pub fn n_frames(&self, len: usize) -> usize {
        len / self.hop
    }
}

/// One-sided complex spectrum, stored frame-major (`frames x bins`).
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrogram {
    n_frames: usize,
    n_bins: usize,
    data: Vec<Complex64>,
}

impl Spectrogram {
    pub fn n_frames(&self) -> usize {
        self.n_frames
    }

    pub fn n_bins(&self) -> usize {
        self.n_bins
    }

    pub fn get(&self, bin: usize, frame: usize) -> Complex64 {
        self.data[frame * self.n_bins + bin]
    }

    pub fn frame(&self, t: usize) -> &[Complex64] {
        &self.data[t * self.n_bins..(t + 1) * self.n_bins]
    }
}

/// Periodic Hann window.
pub fn hann_window(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / n as f64).cos())
        .collect()
}

/// Short-time transform with planned FFTs, reusable across clips and threads.
#[derive(Clone)]
pub struct Stft {
    spec: StftSpec,
    window: Vec<f64>,
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
}

impl std::fmt::Debug for Stft {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Stft").field("spec", &self.spec).finish()
    }
}

impl Stft {
    pub fn new(spec: StftSpec) -> Self {
        let mut planner = FftPlanner::new();
        Self {
            spec,
            window: hann_window(spec.window_size),
            forward: planner.plan_fft_forward(spec.n_fft),
            inverse: planner.plan_fft_inverse(spec.n_fft),
        }
    }

    pub fn spec(&self) -> &StftSpec {
        &self.spec
    }

    /// Runs `f(frame_index, full_spectrum)` for every centred frame.
    ///
    /// Frame `t` is centred on sample `t * hop`; samples outside the signal are taken by
    /// reflection about the first and last sample.
    fn for_each_frame(&self, x: &[f32], mut f: impl FnMut(usize, &mut [Complex64])) -> Result<()> {
        let StftSpec { window_size, hop, n_fft } = self.spec;
        if x.len() < window_size {
            return Err(Error::data(format!(
                "signal of {} samples is shorter than one {window_size}-sample window",
                x.len()
            )));
        }
        let len = x.len() as isize;
        let half = (window_size / 2) as isize;
        let mut buf = vec![Complex64::new(0.0, 0.0); n_fft];
        for t in 0..self.spec.n_frames(x.len()) {
            let start = (t * hop) as isize - half;
            for (i, slot) in buf.iter_mut().enumerate() {
                *slot = if i < window_size {
                    let mut idx = start + i as isize;
                    if idx < 0 {
                        idx = -idx;
                    } else if idx >= len {
                        idx = 2 * (len - 1) - idx;
                    }
                    Complex64::new(x[idx as usize] as f64 * self.window[i], 0.0)
                } else {
                    Complex64::new(0.0, 0.0)
                };
            }
            self.forward.process(&mut buf);
            f(t, &mut buf);
        }
        Ok(())
    }

    pub fn process(&self, x: &[f32]) -> Result<Spectrogram> {
        let n_bins = self.spec.n_bins();
        let n_frames = self.spec.n_frames(x.len());
        let mut data = Vec::with_capacity(n_frames * n_bins);
        self.for_each_frame(x, |_, spectrum| data.extend_from_slice(&spectrum[..n_bins]))?;
        Ok(Spectrogram { n_frames, n_bins, data })
    }

    /// Circular autocorrelation of every windowed frame (`frames x n_fft`, lag-indexed).
    pub fn autocorrelation(&self, x: &[f32]) -> Result<Vec<Vec<f64>>> {
        let n = self.spec.n_fft as f64;
        let mut out = Vec::with_capacity(self.spec.n_frames(x.len()));
        self.for_each_frame(x, |_, spectrum| {
            for v in spectrum.iter_mut() {
                *v = Complex64::new(v.norm_sqr(), 0.0);
            }
            self.inverse.process(spectrum);
            out.push(spectrum.iter().map(|c| c.re / n).collect());
        })?;
        Ok(out)
    }
}

/// Convenience wrapper planning a fresh transform.
pub fn stft(x: &[f32], spec: &StftSpec) -> Result<Spectrogram> {
    Stft::new(*spec).process(x)
}

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Triangular HTK-scale filters over the one-sided FFT bins, each row summing to one.
#[derive(Debug, Clone, PartialEq)]
pub struct MelFilterbank {
    n_mels: usize,
    n_bins: usize,
    f_min: f64,
    f_max: f64,
    weights: Vec<f64>,
}

impl MelFilterbank {
    pub fn new(n_mels: usize, n_fft: usize, sample_rate: u32, f_min: f64, f_max: f64) -> Result<Self> {
        let nyquist = sample_rate as f64 / 2.0;
        if n_mels == 0 || n_mels > n_fft / 2 {
            return Err(Error::invalid(format!("{n_mels} mel bands do not fit a {n_fft}-point FFT")));
        }
        if !(0.0..nyquist).contains(&f_min) || f_max <= f_min || f_max > nyquist {
            return Err(Error::invalid(format!(
                "mel range [{f_min}, {f_max}] Hz invalid for sample rate {sample_rate}"
            )));
        }
        let n_bins = n_fft / 2 + 1;
        let (mel_lo, mel_hi) = (hz_to_mel(f_min), hz_to_mel(f_max));
        let edges: Vec<f64> = (0..n_mels + 2)
            .map(|i| mel_to_hz(mel_lo + (mel_hi - mel_lo) * i as f64 / (n_mels + 1) as f64))
            .collect();
        let bin_hz = sample_rate as f64 / n_fft as f64;
        let mut weights = vec![0.0; n_mels * n_bins];
        for m in 0..n_mels {
            let (lo, centre, hi) = (edges[m], edges[m + 1], edges[m + 2]);
            let row = &mut weights[m * n_bins..(m + 1) * n_bins];
            for (k, w) in row.iter_mut().enumerate() {
                let f = k as f64 * bin_hz;
                let rise = (f - lo) / (centre - lo);
                let fall = (hi - f) / (hi - centre);
                *w = rise.min(fall).max(0.0);
            }
            let sum: f64 = row.iter().sum();
            if sum > 0.0 {
                row.iter_mut().for_each(|w| *w /= sum);
            } else {
                // Band narrower than one bin: take the bin nearest its centre.
                let nearest = ((centre / bin_hz).round() as usize).min(n_bins - 1);
                row[nearest] = 1.0;
            }
        }
        Ok(Self { n_mels, n_bins, f_min, f_max, weights })
    }

    /// 64 bands over 0..12 kHz for the standard 24 kHz front-end.
    pub fn standard(n_fft: usize) -> Self {
        Self::new(N_MELS, n_fft, SAMPLE_RATE, 0.0, 12_000.0).expect("standard filterbank is valid")
    }

    pub fn n_mels(&self) -> usize {
        self.n_mels
    }

    pub fn n_bins(&self) -> usize {
        self.n_bins
    }

    pub fn row(&self, m: usize) -> &[f64] {
        &self.weights[m * self.n_bins..(m + 1) * self.n_bins]
    }

    /// Centre frequency of every band in Hz.
    pub fn center_frequencies(&self) -> Vec<f64> {
        let (lo, hi) = (hz_to_mel(self.f_min), hz_to_mel(self.f_max));
        (1..=self.n_mels)
            .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (self.n_mels + 1) as f64))
            .collect()
    }

    /// `H * v` for one frame of per-bin values.
    pub fn project(&self, v: &[f64], out: &mut [f64]) {
        for (m, o) in out.iter_mut().enumerate() {
            *o = self.row(m).iter().zip(v).map(|(w, x)| w * x).sum();
        }
    }
}

fn check_bins(spec: &Spectrogram, fb: &MelFilterbank) -> Result<()> {
    if spec.n_bins != fb.n_bins {
        return Err(Error::shape(format!(
            "spectrogram has {} bins, filterbank expects {}",
            spec.n_bins, fb.n_bins
        )));
    }
    Ok(())
}

/// `log(H * |X|^2 + eps)` as a `frames x mels` matrix.
pub fn logmel(spec: &Spectrogram, fb: &MelFilterbank, eps: f64) -> Result<Tensor<f64>> {
    check_bins(spec, fb)?;
    let mut power = vec![0.0; spec.n_bins];
    let mut out = vec![0.0; spec.n_frames * fb.n_mels];
    for (t, o) in out.chunks_mut(fb.n_mels).enumerate() {
        for (p, c) in power.iter_mut().zip(spec.frame(t)) {
            *p = c.norm_sqr();
        }
        fb.project(&power, o);
        o.iter_mut().for_each(|v| *v = (*v + eps).ln());
    }
    Tensor::new(vec![spec.n_frames, fb.n_mels], out)
}

/// Where the logarithm sits relative to the mel projection in the level difference.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IldMode {
    /// `H * log(ratio)`: exactly antisymmetric under a channel swap.
    #[default]
    LogRatio,
    /// `log(H * ratio)`: mel-weighted arithmetic mean of the ratio, then the log.
    RatioThenLog,
}

/// Inter-channel level difference on the mel axis; the power ratio
/// `(|L|^2 + eps) / (|R|^2 + eps)` is formed per STFT bin before projection.
pub fn ild(
    left: &Spectrogram,
    right: &Spectrogram,
    fb: &MelFilterbank,
    eps: f64,
    mode: IldMode,
) -> Result<Tensor<f64>> {
    check_bins(left, fb)?;
    if left.n_frames != right.n_frames || left.n_bins != right.n_bins {
        return Err(Error::shape("left and right spectrograms differ in shape"));
    }
    let mut per_bin = vec![0.0; left.n_bins];
    let mut out = vec![0.0; left.n_frames * fb.n_mels];
    for (t, o) in out.chunks_mut(fb.n_mels).enumerate() {
        for ((v, l), r) in per_bin.iter_mut().zip(left.frame(t)).zip(right.frame(t)) {
            let ratio = (l.norm_sqr() + eps) / (r.norm_sqr() + eps);
            *v = match mode {
                IldMode::LogRatio => ratio.ln(),
                IldMode::RatioThenLog => ratio,
            };
        }
        fb.project(&per_bin, o);
        if mode == IldMode::RatioThenLog {
            o.iter_mut().for_each(|v| *v = v.ln());
        }
    }
    Tensor::new(vec![left.n_frames, fb.n_mels], out)
}

/// Short-term power of the autocorrelation: lags `1..=n_lags` of every frame, squared,
/// mean-pooled in groups of `pool` lags, then `log(. + eps)`.
///
/// A delay of `L` samples therefore lands in pooled bin `(L - 1) / pool`.
pub fn stpacc(x: &[f32], stft: &Stft, n_lags: usize, pool: usize, eps: f64) -> Result<Tensor<f64>> {
    if pool == 0 || !n_lags.is_multiple_of(pool) {
        return Err(Error::invalid(format!("{n_lags} lags cannot be pooled by {pool}")));
    }
    if n_lags >= stft.spec().n_fft {
        return Err(Error::invalid(format!(
            "{n_lags} lags exceed the {}-point transform",
            stft.spec().n_fft
        )));
    }
    let frames = stft.autocorrelation(x)?;
    let n_out = n_lags / pool;
    let mut out = Vec::with_capacity(frames.len() * n_out);
    for r in &frames {
        for b in 0..n_out {
            let lags = &r[1 + b * pool..1 + (b + 1) * pool];
            let power = lags.iter().map(|v| v * v).sum::<f64>() / pool as f64;
            out.push((power + eps).ln());
        }
    }
    Tensor::new(vec![frames.len(), n_out], out)
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct FeatureConfig {
    pub sample_rate: u32,
    pub spectrogram: StftSpec,
    pub autocorrelation: StftSpec,
    pub n_mels: usize,
    pub f_min: f64,
    pub f_max: f64,
    pub eps: f64,
    pub ild_mode: IldMode,
    pub stpacc_lags: usize,
    pub stpacc_pool: usize,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self {
            sample_rate: SAMPLE_RATE,
            spectrogram: StftSpec::spectrogram(),
            autocorrelation: StftSpec::autocorrelation(),
            n_mels: N_MELS,
            f_min: 0.0,
            f_max: 12_000.0,
            eps: 1e-10,
            ild_mode: IldMode::LogRatio,
            stpacc_lags: 512,
            stpacc_pool: 8,
        }
    }
}

/// `4 x frames x bins` stack: `[logmel_L, logmel_R, ILD, stpACC]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureTensor(Tensor<f32>);

impl FeatureTensor {
    pub fn new(tensor: Tensor<f32>) -> Result<Self> {
        let (c, _, _) = tensor.dims3()?;
        if c != N_FEATURE_CHANNELS {
            return Err(Error::shape(format!("feature tensor needs {N_FEATURE_CHANNELS} channels, got {c}")));
        }
        if !tensor.is_finite() {
            return Err(Error::data("feature tensor contains non-finite values"));
        }
        Ok(Self(tensor))
    }

    pub fn n_frames(&self) -> usize {
        self.0.shape()[1]
    }

    pub fn n_bins(&self) -> usize {
        self.0.shape()[2]
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        let n = self.n_frames() * self.n_bins();
        &self.0.data()[c * n..(c + 1) * n]
    }

    pub fn tensor(&self) -> &Tensor<f32> {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor<f32> {
        self.0
    }
}

/// Builds feature stacks with filterbank and transforms planned once.
#[derive(Debug, Clone)]
pub struct FeatureExtractor {
    config: FeatureConfig,
    filterbank: MelFilterbank,
    spectrogram: Stft,
    autocorrelation: Stft,
}

impl FeatureExtractor {
    pub fn new(config: FeatureConfig) -> Result<Self> {
        if config.spectrogram.hop != config.autocorrelation.hop {
            return Err(Error::invalid("spectrogram and autocorrelation hops must match"));
        }
        if config.stpacc_lags / config.stpacc_pool.max(1) != config.n_mels {
            return Err(Error::invalid(format!(
                "stpACC yields {} bins but the stack needs {}",
                config.stpacc_lags / config.stpacc_pool.max(1),
                config.n_mels
            )));
        }
        let filterbank = MelFilterbank::new(
            config.n_mels,
            config.spectrogram.n_fft,
            config.sample_rate,
            config.f_min,
            config.f_max,
        )?;
        Ok(Self {
            spectrogram: Stft::new(config.spectrogram),
            autocorrelation: Stft::new(config.autocorrelation),
            filterbank,
            config,
        })
    }

    pub fn config(&self) -> &FeatureConfig {
        &self.config
    }

    pub fn filterbank(&self) -> &MelFilterbank {
        &self.filterbank
    }

    /// Stacks the four planes, normalising with `stats` when given.
    pub fn extract(&self, clip: &StereoClip, stats: Option<&NormStats>) -> Result<FeatureTensor> {
        if clip.sample_rate != self.config.sample_rate {
            return Err(Error::data(format!(
                "clip sampled at {} Hz, features expect {} Hz",
                clip.sample_rate, self.config.sample_rate
            )));
        }
        let need = self.config.spectrogram.window_size.max(self.config.autocorrelation.window_size);
        if clip.len() < need {
            return Err(Error::data(format!("clip of {} samples is shorter than {need}", clip.len())));
        }
        let eps = self.config.eps;
        let spec_l = self.spectrogram.process(&clip.left)?;
        let spec_r = self.spectrogram.process(&clip.right)?;
        let planes = [
            logmel(&spec_l, &self.filterbank, eps)?,
            logmel(&spec_r, &self.filterbank, eps)?,
            ild(&spec_l, &spec_r, &self.filterbank, eps, self.config.ild_mode)?,
            stpacc(
                &clip.mid(),
                &self.autocorrelation,
                self.config.stpacc_lags,
                self.config.stpacc_pool,
                eps,
            )?,
        ];
        let (t, f) = planes[0].dims2()?;
        let mut data = Vec::with_capacity(N_FEATURE_CHANNELS * t * f);
        for p in &planes {
            data.extend(p.data().iter().map(|&v| v as f32));
        }
        let mut features = FeatureTensor::new(Tensor::new(vec![N_FEATURE_CHANNELS, t, f], data)?)?;
        if let Some(stats) = stats {
            features = stats.apply(&features)?;
        }
        Ok(features)
    }
}

/// One-shot feature stack with the default configuration.
pub fn stack_features(clip: &StereoClip, stats: Option<&NormStats>) -> Result<FeatureTensor> {
    FeatureExtractor::new(FeatureConfig::default())?.extract(clip, stats)
}

/// Per (channel, bin) mean and standard deviation over all frames.
#[derive(Debug, Clone, PartialEq)]
pub struct NormStats {
    pub n_channels: usize,
    pub n_bins: usize,
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
}

pub const STD_FLOOR: f64 = 1e-5;
const NORM_STATS_MAGIC: &[u8; 4] = b"SSNS";

impl NormStats {
    pub fn compute(features: &[FeatureTensor]) -> Result<Self> {
        let first = features.first().ok_or_else(|| Error::data("no feature tensors to summarise"))?;
        let (c, f) = (N_FEATURE_CHANNELS, first.n_bins());
        if features.iter().any(|x| x.n_bins() != f) {
            return Err(Error::shape("feature tensors disagree on bin count"));
        }
        let count: usize = features.iter().map(|x| x.n_frames()).sum();
        let mut mean = vec![0.0f64; c * f];
        for x in features {
            for ch in 0..c {
                for row in x.channel(ch).chunks(f) {
                    for (b, &v) in row.iter().enumerate() {
                        mean[ch * f + b] += v as f64;
                    }
                }
            }
        }
        mean.iter_mut().for_each(|m| *m /= count as f64);
        let mut var = vec![0.0f64; c * f];
        for x in features {
            for ch in 0..c {
                for row in x.channel(ch).chunks(f) {
                    for (b, &v) in row.iter().enumerate() {
                        let d = v as f64 - mean[ch * f + b];
                        var[ch * f + b] += d * d;
                    }
                }
            }
        }
        Ok(Self {
            n_channels: c,
            n_bins: f,
            mean: mean.iter().map(|&m| m as f32).collect(),
            std: var.iter().map(|&v| (v / count as f64).sqrt().max(STD_FLOOR) as f32).collect(),
        })
    }

    pub fn apply(&self, features: &FeatureTensor) -> Result<FeatureTensor> {
        if features.n_bins() != self.n_bins {
            return Err(Error::shape(format!(
                "stats cover {} bins, features have {}",
                self.n_bins,
                features.n_bins()
            )));
        }
        let f = self.n_bins;
        let plane = features.n_frames() * f;
        let mut t = features.tensor().clone();
        for (ch, chunk) in t.data_mut().chunks_mut(plane).enumerate() {
            for row in chunk.chunks_mut(f) {
                for (b, v) in row.iter_mut().enumerate() {
                    *v = (*v - self.mean[ch * f + b]) / self.std[ch * f + b];
                }
            }
        }
        FeatureTensor::new(t)
    }

    pub fn write<W: Write>(&self, w: &mut W) -> Result<()> {
        binio::write_header(w, NORM_STATS_MAGIC, 1)?;
        binio::write_u32(w, self.n_channels as u32)?;
        binio::write_u32(w, self.n_bins as u32)?;
        binio::write_f32s(w, &self.mean)?;
        binio::write_f32s(w, &self.std)
    }

    pub fn read<R: Read>(r: &mut R) -> Result<Self> {
        binio::read_header(r, NORM_STATS_MAGIC, 1)?;
        let n_channels = binio::read_u32(r)? as usize;
        let n_bins = binio::read_u32(r)? as usize;
        if n_channels != N_FEATURE_CHANNELS || n_bins == 0 || n_bins > 4096 {
            return Err(Error::format(format!("implausible stats dims {n_channels}x{n_bins}")));
        }
        let mean = binio::read_f32s(r, n_channels * n_bins)?;
        let std = binio::read_f32s(r, n_channels * n_bins)?;
        binio::expect_eof(r)?;
        if std.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::format("stats file contains non-positive std"));
        }
        Ok(Self { n_channels, n_bins, mean, std })
    }
}
