//! Image geometry and the keypoint-driven on-screen post-processor.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::event::{angular_distance, SeldFrameLabels};

/// Side of the square frames fed to the visual encoder.
pub const TARGET_SIZE: f64 = 768.0;

/// Maps a `W x H` frame (`W >= H`) onto the square target. Horizontal scaling is uniform.
/// Vertically, the middle half of the frame keeps the horizontal scale, and the outer
/// quarters are stretched quadratically so the edges land on the target edges.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReframeMap {
    width: f64,
    height: f64,
    scale: f64,
    curvature: f64,
}

impl ReframeMap {
    pub fn new(width: f64, height: f64) -> Result<Self> {
        if !(width > 0.0 && height > 0.0 && width.is_finite()) {
            return Err(Error::invalid(format!("invalid frame size {width}x{height}")));
        }
        if height > width {
            return Err(Error::invalid(format!("portrait frames ({width}x{height}) are not supported")));
        }
        let scale = TARGET_SIZE / width;
        let quarter = height / 4.0;
        // g(e) = s e + k (e - H/4)^2 must reach the half target size at e = H/2.
        let curvature = (TARGET_SIZE / 2.0 - scale * height / 2.0) / (quarter * quarter);
        Ok(Self { width, height, scale, curvature })
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    /// Vertical offset from the target centre for a source offset `e >= 0` from the frame centre.
    fn stretch(&self, e: f64) -> f64 {
        let band = self.height / 4.0;
        if e <= band { self.scale * e } else { self.scale * e + self.curvature * (e - band).powi(2) }
    }

    pub fn map_vertical(&self, v: f64) -> Result<f64> {
        if !(0.0..=self.height).contains(&v) {
            return Err(Error::invalid(format!("row {v} outside 0..={}", self.height)));
        }
        let off = v - self.height / 2.0;
        Ok(TARGET_SIZE / 2.0 + off.signum() * self.stretch(off.abs()))
    }

    pub fn map(&self, u: f64, v: f64) -> Result<(f64, f64)> {
        if !(0.0..=self.width).contains(&u) {
            return Err(Error::invalid(format!("column {u} outside 0..={}", self.width)));
        }
        Ok((u * self.scale, self.map_vertical(v)?))
    }
}

fn check_fov(hfov_deg: f64) -> Result<()> {
    if !(hfov_deg > 0.0 && hfov_deg < 180.0) {
        return Err(Error::invalid(format!("horizontal field of view {hfov_deg} outside (0, 180)")));
    }
    Ok(())
}

/// Pinhole angle of image column `u`: negative towards the left edge, `-hfov/2` at `u = 0`.
pub fn pixel_to_azimuth(u: f64, width: f64, hfov_deg: f64) -> Result<f64> {
    check_fov(hfov_deg)?;
    if !(width > 0.0) {
        return Err(Error::invalid(format!("image width {width} must be positive")));
    }
    let half = (hfov_deg / 2.0).to_radians();
    Ok(((2.0 * u / width - 1.0) * half.tan()).atan().to_degrees())
}

/// Sound direction of pixel index `x` (pixel centre `x + 0.5`), left-positive like all
/// event azimuths.
pub fn pixel_to_doa(x: f64, width: f64, hfov_deg: f64) -> Result<f64> {
    Ok(-pixel_to_azimuth(x + 0.5, width, hfov_deg)?)
}

/// `[x, y, confidence]` of one named keypoint.
pub type Keypoint = [f64; 3];

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Person(pub BTreeMap<String, Keypoint>);

/// Pose detections for one 100 ms label frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeypointFrame {
    pub frame: usize,
    pub persons: Vec<Person>,
}

impl KeypointFrame {
    /// Horizontal mirror of every keypoint (`x -> width - 1 - x`).
    pub fn mirrored(&self, width: f64) -> Self {
        let persons = self
            .persons
            .iter()
            .map(|p| Person(p.0.iter().map(|(k, &[x, y, c])| (k.clone(), [width - 1.0 - x, y, c])).collect()))
            .collect();
        Self { frame: self.frame, persons }
    }
}

/// Reads JSON-lines keypoint records, skipping blank lines.
pub fn read_keypoints<R: BufRead>(r: R) -> Result<Vec<KeypointFrame>> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let kf: KeypointFrame =
            serde_json::from_str(&line).map_err(|e| Error::format(format!("keypoint line {}: {e}", i + 1)))?;
        for p in &kf.persons {
            if p.0.values().any(|&[x, y, c]| !x.is_finite() || !y.is_finite() || !(0.0..=1.0).contains(&c)) {
                return Err(Error::data(format!("keypoint line {}: non-finite coordinate or confidence outside [0, 1]", i + 1)));
            }
        }
        out.push(kf);
    }
    Ok(out)
}

pub fn write_keypoints<W: Write>(w: &mut W, frames: &[KeypointFrame]) -> Result<()> {
    for f in frames {
        serde_json::to_writer(&mut *w, f)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

/// Body location associated with a sound class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KeypointTarget {
    Nose,
    /// Mean of the confident wrists.
    Wrists,
    /// Mean of the confident ankles.
    Ankles,
}

impl KeypointTarget {
    fn names(self) -> &'static [&'static str] {
        match self {
            Self::Nose => &["nose"],
            Self::Wrists => &["left_wrist", "right_wrist"],
            Self::Ankles => &["left_ankle", "right_ankle"],
        }
    }

    /// Horizontal pixel position for this target, if any contributing point is confident.
    pub fn locate(self, person: &Person, min_confidence: f64) -> Option<f64> {
        let xs: Vec<f64> = self
            .names()
            .iter()
            .filter_map(|n| person.0.get(*n))
            .filter(|kp| kp[2] >= min_confidence)
            .map(|kp| kp[0])
            .collect();
        (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64)
    }
}

/// Speech and laughter follow the nose, clapping the wrists, footsteps the ankles.
pub fn default_class_map() -> BTreeMap<usize, KeypointTarget> {
    use crate::event::classes::*;
    BTreeMap::from([
        (FEMALE_SPEECH, KeypointTarget::Nose),
        (MALE_SPEECH, KeypointTarget::Nose),
        (CLAPPING, KeypointTarget::Wrists),
        (LAUGHTER, KeypointTarget::Nose),
        (FOOTSTEPS, KeypointTarget::Ankles),
    ])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PostprocessConfig {
    pub image_width: f64,
    pub hfov_deg: f64,
    pub thresh_deg: f64,
    pub min_confidence: f64,
    pub class_map: BTreeMap<usize, KeypointTarget>,
}

impl PostprocessConfig {
    pub fn new(image_width: f64) -> Self {
        Self { image_width, hfov_deg: 100.0, thresh_deg: 20.0, min_confidence: 0.3, class_map: default_class_map() }
    }
}

/// Marks predicted events on-screen when a matching body keypoint lies within the angular
/// threshold. Only off-to-on flips happen; everything else is copied unchanged.
pub fn keypoint_postprocess(preds: &SeldFrameLabels, keypoints: &[KeypointFrame], cfg: &PostprocessConfig) -> Result<SeldFrameLabels> {
    check_fov(cfg.hfov_deg)?;
    let mut by_frame: BTreeMap<usize, Vec<&Person>> = BTreeMap::new();
    for kf in keypoints {
        by_frame.entry(kf.frame).or_default().extend(kf.persons.iter());
    }
    let mut frames = preds.frames().to_vec();
    for (t, events) in frames.iter_mut().enumerate() {
        let Some(persons) = by_frame.get(&t) else { continue };
        for e in events.iter_mut().filter(|e| !e.onscreen) {
            let Some(&target) = cfg.class_map.get(&e.class_id) else { continue };
            for p in persons {
                let Some(x) = target.locate(p, cfg.min_confidence) else { continue };
                if angular_distance(pixel_to_doa(x, cfg.image_width, cfg.hfov_deg)?, e.azimuth_deg) <= cfg.thresh_deg {
                    e.onscreen = true;
                    break;
                }
            }
        }
    }
    Ok(SeldFrameLabels::from_frames(frames))
}
