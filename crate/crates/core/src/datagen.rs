//! First-order ambisonics to stereo training segments.
//!
//! FOA channels follow ACN channel naming with SN3D normalisation: a plane wave from
//! azimuth `a` (elevation 0) encodes as `W = s`, `X = s cos a`, `Y = s sin a`, `Z = 0`,
//! with `Y` positive towards the left.

use crate::dsp::StereoClip;
use crate::error::{Error, Result};
use crate::event::{wrap_azimuth, SeldFrameLabels, LABEL_FRAMES_PER_SEC};

#[derive(Debug, Clone, PartialEq)]
pub struct FoaClip {
    pub w: Vec<f32>,
    pub x: Vec<f32>,
    pub y: Vec<f32>,
    pub z: Vec<f32>,
    pub sample_rate: u32,
}

impl FoaClip {
    pub fn new(w: Vec<f32>, x: Vec<f32>, y: Vec<f32>, z: Vec<f32>, sample_rate: u32) -> Result<Self> {
        let n = w.len();
        if x.len() != n || y.len() != n || z.len() != n {
            return Err(Error::data("FOA channels differ in length"));
        }
        if sample_rate == 0 {
            return Err(Error::invalid("sample rate must be positive"));
        }
        Ok(Self { w, x, y, z, sample_rate })
    }

    /// Encodes a mono signal as a plane wave from `(azimuth, elevation)` in degrees.
    pub fn plane_wave(signal: &[f32], azimuth_deg: f64, elevation_deg: f64, sample_rate: u32) -> Self {
        let (a, e) = (azimuth_deg.to_radians(), elevation_deg.to_radians());
        let gx = (a.cos() * e.cos()) as f32;
        let gy = (a.sin() * e.cos()) as f32;
        let gz = e.sin() as f32;
        Self {
            w: signal.to_vec(),
            x: signal.iter().map(|s| s * gx).collect(),
            y: signal.iter().map(|s| s * gy).collect(),
            z: signal.iter().map(|s| s * gz).collect(),
            sample_rate,
        }
    }

    pub fn len(&self) -> usize {
        self.w.len()
    }

    pub fn is_empty(&self) -> bool {
        self.w.is_empty()
    }
}

/// Audio that can be cut into segments on the label grid.
pub trait AudioSignal: Sized {
    fn n_samples(&self) -> usize;
    fn sample_rate(&self) -> u32;
    fn slice(&self, range: std::ops::Range<usize>) -> Self;
    fn concat(&self, other: &Self) -> Self;
}

impl AudioSignal for FoaClip {
    fn n_samples(&self) -> usize {
        self.len()
    }

    fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    fn slice(&self, r: std::ops::Range<usize>) -> Self {
        Self {
            w: self.w[r.clone()].to_vec(),
            x: self.x[r.clone()].to_vec(),
            y: self.y[r.clone()].to_vec(),
            z: self.z[r].to_vec(),
            sample_rate: self.sample_rate,
        }
    }

    fn concat(&self, o: &Self) -> Self {
        let cat = |a: &[f32], b: &[f32]| [a, b].concat();
        Self {
            w: cat(&self.w, &o.w),
            x: cat(&self.x, &o.x),
            y: cat(&self.y, &o.y),
            z: cat(&self.z, &o.z),
            sample_rate: self.sample_rate,
        }
    }
}

impl AudioSignal for StereoClip {
    fn n_samples(&self) -> usize {
        self.len()
    }

    fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    fn slice(&self, r: std::ops::Range<usize>) -> Self {
        Self { left: self.left[r.clone()].to_vec(), right: self.right[r].to_vec(), sample_rate: self.sample_rate }
    }

    fn concat(&self, o: &Self) -> Self {
        Self {
            left: [&self.left[..], &o.left[..]].concat(),
            right: [&self.right[..], &o.right[..]].concat(),
            sample_rate: self.sample_rate,
        }
    }
}

/// Rotates the sound field about the vertical axis by `phi_deg`.
///
/// A source at azimuth `a` is heard at `a - phi` afterwards.
pub fn foa_rotate_yaw(clip: &FoaClip, phi_deg: f64) -> FoaClip {
    let (s, c) = phi_deg.to_radians().sin_cos();
    let (s, c) = (s as f32, c as f32);
    let (x, y) = clip
        .x
        .iter()
        .zip(&clip.y)
        .map(|(&x, &y)| (c * x + s * y, -s * x + c * y))
        .unzip();
    FoaClip { w: clip.w.clone(), x, y, z: clip.z.clone(), sample_rate: clip.sample_rate }
}

/// Label counterpart of [`foa_rotate_yaw`].
pub fn rotate_labels_yaw(labels: &SeldFrameLabels, phi_deg: f64) -> SeldFrameLabels {
    labels.map_events(|e| {
        let mut e = *e;
        e.azimuth_deg = wrap_azimuth(e.azimuth_deg - phi_deg);
        e
    })
}

/// Keeps only events inside the frontal half-plane `|azimuth| <= 90`.
pub fn frontal_view(labels: &SeldFrameLabels) -> SeldFrameLabels {
    labels.filter_events(|e| e.azimuth_deg.abs() <= 90.0)
}

/// Front-facing mid-side cardioid pair: `L = (W + Y) / 2`, `R = (W - Y) / 2`.
///
/// Set `y_positive_left` to false for material whose dipole points right.
pub fn foa_to_stereo(clip: &FoaClip, y_positive_left: bool) -> StereoClip {
    let sign = if y_positive_left { 1.0 } else { -1.0 };
    let (left, right) = clip
        .w
        .iter()
        .zip(&clip.y)
        .map(|(&w, &y)| (0.5 * (w + sign * y), 0.5 * (w - sign * y)))
        .unzip();
    StereoClip { left, right, sample_rate: clip.sample_rate }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Segment<A> {
    /// Position of the segment within its source clip.
    pub index: usize,
    pub audio: A,
    pub labels: SeldFrameLabels,
}

fn frames_for(secs: f64) -> Result<usize> {
    let frames = secs * LABEL_FRAMES_PER_SEC as f64;
    if secs <= 0.0 || (frames - frames.round()).abs() > 1e-9 {
        return Err(Error::invalid(format!("{secs} s is not a whole number of label frames")));
    }
    Ok(frames.round() as usize)
}

/// Cuts `audio` and its labels into `seg_secs` segments every `hop_secs`; a trailing
/// remainder shorter than one segment is discarded.
pub fn segment_clip<A: AudioSignal>(
    audio: &A,
    labels: &SeldFrameLabels,
    seg_secs: f64,
    hop_secs: f64,
) -> Result<Vec<Segment<A>>> {
    let sr = audio.sample_rate() as usize;
    if !sr.is_multiple_of(LABEL_FRAMES_PER_SEC) {
        return Err(Error::data(format!("sample rate {sr} is not a multiple of the label rate")));
    }
    let spf = sr / LABEL_FRAMES_PER_SEC;
    let (seg_frames, hop_frames) = (frames_for(seg_secs)?, frames_for(hop_secs)?);
    let audio_frames = audio.n_samples().div_ceil(spf);
    let labels = labels.fit_to(audio_frames)?;
    let mut out = Vec::new();
    let mut start = 0;
    while (start + seg_frames) * spf <= audio.n_samples() {
        out.push(Segment {
            index: out.len(),
            audio: audio.slice(start * spf..(start + seg_frames) * spf),
            labels: labels.slice(start, seg_frames),
        });
        start += hop_frames;
    }
    Ok(out)
}

/// Drops segments without a single active label frame.
pub fn silence_filter<A>(segments: Vec<Segment<A>>) -> Vec<Segment<A>> {
    segments.into_iter().filter(|s| !s.labels.is_silent()).collect()
}

/// Left/right mirror: channels exchanged and every azimuth negated.
pub fn lr_swap(audio: &StereoClip, labels: &SeldFrameLabels) -> (StereoClip, SeldFrameLabels) {
    let swapped = labels.map_events(|e| {
        let mut e = *e;
        e.azimuth_deg = wrap_azimuth(-e.azimuth_deg);
        e
    });
    (audio.swapped(), swapped)
}

/// Rotates an FOA segment, renders it to stereo and keeps the labels that stay in view.
pub fn render_rotated(segment: &Segment<FoaClip>, yaw_deg: f64, y_positive_left: bool) -> (StereoClip, SeldFrameLabels) {
    let rotated = foa_rotate_yaw(&segment.audio, yaw_deg);
    let labels = frontal_view(&rotate_labels_yaw(&segment.labels, yaw_deg));
    (foa_to_stereo(&rotated, y_positive_left), labels)
}

/// SplitMix64: `state += 0x9E3779B97F4A7C15`, then two xor-shift-multiply rounds with
/// `0xBF58476D1CE4E5B9` and `0x94D049BB133111EB`.
#[derive(Debug, Clone)]
pub struct SplitMix64 {
    state: u64,
}

impl SplitMix64 {
    pub fn new(seed: u64) -> Self {
        Self { state: seed }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = self.state;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }

    /// Uniform in `[0, 1)` with 53 random bits.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Independent generator for the `index`-th work item.
    pub fn fork(&self, index: u64) -> Self {
        let mut mixer = Self::new(self.state ^ index.wrapping_mul(0xD1B5_4A32_D192_ED03));
        Self::new(mixer.next_u64())
    }

    /// Yaw angle uniform in `[0, 360)` degrees.
    pub fn yaw_deg(&mut self) -> f64 {
        self.next_f64() * 360.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsp::{self, FeatureConfig, FeatureExtractor, SAMPLE_RATE};
    use crate::event::Event;

    fn noise(n: usize, seed: u64) -> Vec<f32> {
        let mut rng = SplitMix64::new(seed);
        (0..n).map(|_| (rng.next_f64() * 2.0 - 1.0) as f32 * 0.3).collect()
    }

    fn close(a: &[f32], b: &[f32], tol: f32) -> bool {
        a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn splitmix_reference_values() {
        // First outputs for seed 0 of the reference SplitMix64.
        let mut r = SplitMix64::new(0);
        assert_eq!(r.next_u64(), 0xE220_A839_7B1D_CDAF);
        assert_eq!(r.next_u64(), 0x6E78_9E6A_A1B9_65F4);
    }

    #[test]
    fn rotation_identity_and_group() {
        let clip = FoaClip::new(noise(500, 1), noise(500, 2), noise(500, 3), noise(500, 4), SAMPLE_RATE).unwrap();
        let same = foa_rotate_yaw(&clip, 0.0);
        assert_eq!(same, clip);

        let two = foa_rotate_yaw(&foa_rotate_yaw(&clip, 25.0), 47.0);
        let one = foa_rotate_yaw(&clip, 72.0);
        assert!(close(&two.x, &one.x, 1e-6) && close(&two.y, &one.y, 1e-6));
        assert_eq!(two.w, clip.w);
        assert_eq!(two.z, clip.z);
    }

    #[test]
    fn rotation_group_property_in_f64() {
        // The f32 sample path rounds; the rotation itself composes exactly.
        let rot = |phi: f64, x: f64, y: f64| {
            let (s, c) = phi.to_radians().sin_cos();
            (c * x + s * y, -s * x + c * y)
        };
        let (x, y) = (0.3, -0.8);
        let (a, b) = rot(33.0, x, y);
        let (a, b) = rot(101.0, a, b);
        let (p, q) = rot(134.0, x, y);
        assert!((a - p).abs() < 1e-9 && (b - q).abs() < 1e-9);
    }

    #[test]
    fn rotated_plane_wave_points_forward() {
        let sig = noise(200, 5);
        let clip = FoaClip::plane_wave(&sig, 40.0, 0.0, SAMPLE_RATE);
        let r = foa_rotate_yaw(&clip, 40.0);
        assert!(close(&r.x, &r.w, 1e-6));
        assert!(r.y.iter().all(|v| v.abs() < 1e-6));
    }

    #[test]
    fn stereo_rendering_symmetries() {
        let sig = noise(200, 6);
        let front = foa_to_stereo(&FoaClip::plane_wave(&sig, 0.0, 0.0, SAMPLE_RATE), true);
        assert_eq!(front.left, front.right);

        let left = foa_to_stereo(&FoaClip::plane_wave(&sig, 90.0, 0.0, SAMPLE_RATE), true);
        assert!(left.right.iter().all(|v| v.abs() < 1e-6));
        assert!(close(&left.left, &sig, 1e-6));

        let clip = FoaClip::plane_wave(&sig, 35.0, 0.0, SAMPLE_RATE);
        let flipped = FoaClip { y: clip.y.iter().map(|v| -v).collect(), ..clip.clone() };
        let a = foa_to_stereo(&clip, true);
        let b = foa_to_stereo(&flipped, true);
        assert_eq!((a.left, a.right), (b.right, b.left));
        assert_eq!(foa_to_stereo(&clip, false), foa_to_stereo(&flipped, true));
    }

    #[test]
    fn rotated_source_ild_sign() {
        let ex = FeatureExtractor::new(FeatureConfig::default()).unwrap();
        let sig = noise(SAMPLE_RATE as usize / 2, 9);
        for (az, phi) in [(30.0, 0.0), (30.0, 60.0), (-50.0, -80.0), (10.0, 45.0), (-20.0, -5.0)] {
            let clip = FoaClip::plane_wave(&sig, az, 0.0, SAMPLE_RATE);
            let stereo = foa_to_stereo(&foa_rotate_yaw(&clip, phi), true);
            let f = ex.extract(&stereo, None).unwrap();
            let ild = f.channel(dsp::ILD);
            let mean = ild.iter().map(|&v| v as f64).sum::<f64>() / ild.len() as f64;
            assert_eq!(mean.signum(), (az - phi).signum(), "az {az} phi {phi} mean ild {mean}");
        }
    }

    fn labelled_clip(secs: usize, active: &[usize]) -> (FoaClip, SeldFrameLabels) {
        let n = secs * SAMPLE_RATE as usize;
        let sig = noise(n, 12);
        let clip = FoaClip::plane_wave(&sig, 20.0, 0.0, SAMPLE_RATE);
        let mut labels = SeldFrameLabels::new(secs * 10);
        for &t in active {
            labels.push(t, Event::new(3, 0, 20.0, 2.0, false));
        }
        (clip, labels)
    }

    #[test]
    fn segmentation_counts_and_alignment() {
        let (clip, labels) = labelled_clip(60, &[0, 49, 50, 599]);
        let segs = segment_clip(&clip, &labels, 5.0, 5.0).unwrap();
        assert_eq!(segs.len(), 12);
        assert_eq!(segs[0].labels.n_frames(), 50);
        assert_eq!(segs[0].labels.active_frame_count(), 2);
        assert_eq!(segs[1].labels.frame(0).len(), 1);
        assert_eq!(segs[11].labels.frame(49).len(), 1);

        let joined = segs.iter().skip(1).fold(segs[0].audio.clone(), |acc, s| acc.concat(&s.audio));
        assert_eq!(joined, clip);

        let (short, short_labels) = labelled_clip(4, &[]);
        assert!(segment_clip(&short, &short_labels, 5.0, 5.0).unwrap().is_empty());

        let mut late = labels.clone();
        late.push(700, Event::new(0, 0, 0.0, 1.0, false));
        assert!(matches!(segment_clip(&clip, &late, 5.0, 5.0), Err(Error::Data(_))));
    }

    #[test]
    fn silence_filter_counts() {
        let (clip, labels) = labelled_clip(30, &[3, 120, 121, 299]);
        let segs = segment_clip(&clip, &labels, 5.0, 5.0).unwrap();
        assert_eq!(segs.len(), 6);
        // Active frames fall in segments 0, 2 and 5.
        let kept = silence_filter(segs);
        assert_eq!(kept.iter().map(|s| s.index).collect::<Vec<_>>(), vec![0, 2, 5]);
    }

    #[test]
    fn swap_is_an_involution() {
        let clip = StereoClip::new(noise(100, 1), noise(100, 2), SAMPLE_RATE).unwrap();
        let mut labels = SeldFrameLabels::new(3);
        labels.push(1, Event::new(0, 0, 30.0, 2.0, true));
        labels.push(2, Event::new(4, 1, -75.5, 1.0, false));
        let (c1, l1) = lr_swap(&clip, &labels);
        assert_eq!(l1.frame(1)[0].azimuth_deg, -30.0);
        assert!(l1.frame(1)[0].onscreen);
        let (c2, l2) = lr_swap(&c1, &l1);
        assert_eq!((c2, l2), (clip, labels));
    }

    #[test]
    fn labels_follow_rotation_and_view() {
        let mut labels = SeldFrameLabels::new(1);
        labels.push(0, Event::new(0, 0, 40.0, 2.0, false));
        labels.push(0, Event::new(1, 1, 170.0, 2.0, false));
        let seg = Segment { index: 0, audio: FoaClip::plane_wave(&[0.0; 2400], 0.0, 0.0, SAMPLE_RATE), labels };
        let (_, out) = render_rotated(&seg, 100.0, true);
        // 40 - 100 = -60 stays in view; 170 - 100 = 70 stays in view.
        let az: Vec<f64> = out.frame(0).iter().map(|e| e.azimuth_deg).collect();
        assert_eq!(az, vec![-60.0, 70.0]);
        let (_, out) = render_rotated(&seg, -30.0, true);
        // 40 + 30 = 70 in view; 170 + 30 = 200 -> -160 dropped.
        assert_eq!(out.frame(0).len(), 1);
    }

    #[test]
    fn seeded_yaws_are_reproducible() {
        let a: Vec<f64> = { let mut r = SplitMix64::new(42).fork(3); (0..4).map(|_| r.yaw_deg()).collect() };
        let b: Vec<f64> = { let mut r = SplitMix64::new(42).fork(3); (0..4).map(|_| r.yaw_deg()).collect() };
        assert_eq!(a, b);
        assert!(a.iter().all(|y| (0.0..360.0).contains(y)));
    }
}
