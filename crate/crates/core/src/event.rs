//! Frame-level sound events on the 100 ms label grid.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const LABEL_FRAMES_PER_SEC: usize = 10;

/// DCASE2025 stereo SELD sound classes.
pub mod classes {
    pub const FEMALE_SPEECH: usize = 0;
    pub const MALE_SPEECH: usize = 1;
    pub const CLAPPING: usize = 2;
    pub const TELEPHONE: usize = 3;
    pub const LAUGHTER: usize = 4;
    pub const DOMESTIC_SOUNDS: usize = 5;
    pub const FOOTSTEPS: usize = 6;
    pub const DOOR: usize = 7;
    pub const MUSIC: usize = 8;
    pub const MUSICAL_INSTRUMENT: usize = 9;
    pub const WATER_TAP: usize = 10;
    pub const BELL: usize = 11;
    pub const KNOCK: usize = 12;

    pub const COUNT: usize = 13;

    pub const NAMES: [&str; COUNT] = [
        "Female speech",
        "Male speech",
        "Clapping",
        "Telephone",
        "Laughter",
        "Domestic sounds",
        "Footsteps",
        "Door",
        "Music",
        "Musical instrument",
        "Water tap",
        "Bell",
        "Knock",
    ];
}

/// One active source in one label frame.
///
/// Azimuth is in degrees, counter-clockwise positive (left of the listener is positive).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub class_id: usize,
    pub source_id: u32,
    pub azimuth_deg: f64,
    pub distance_m: f64,
    pub onscreen: bool,
}

impl Event {
    pub fn new(class_id: usize, source_id: u32, azimuth_deg: f64, distance_m: f64, onscreen: bool) -> Self {
        Self { class_id, source_id, azimuth_deg, distance_m, onscreen }
    }
}

/// Wraps an angle into `[-180, 180)`.
pub fn wrap_azimuth(deg: f64) -> f64 {
    // In-range angles are returned untouched so that negation round-trips exactly.
    if (-180.0..180.0).contains(&deg) {
        return deg;
    }
    let w = (deg + 180.0).rem_euclid(360.0) - 180.0;
    // rem_euclid can round up to exactly 360 for tiny negative inputs.
    if w >= 180.0 { w - 360.0 } else { w }
}

/// Absolute azimuth difference folded into `[0, 180]`.
pub fn angular_distance(a: f64, b: f64) -> f64 {
    wrap_azimuth(a - b).abs()
}

/// Events for every label frame of a clip.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SeldFrameLabels {
    frames: Vec<Vec<Event>>,
}

impl SeldFrameLabels {
    pub fn new(n_frames: usize) -> Self {
        Self { frames: vec![Vec::new(); n_frames] }
    }

    pub fn from_frames(frames: Vec<Vec<Event>>) -> Self {
        Self { frames }
    }

    pub fn n_frames(&self) -> usize {
        self.frames.len()
    }

    pub fn frame(&self, t: usize) -> &[Event] {
        self.frames.get(t).map_or(&[], Vec::as_slice)
    }

    pub fn frames(&self) -> &[Vec<Event>] {
        &self.frames
    }

    /// Adds an event, growing the grid if `t` lies past the end.
    pub fn push(&mut self, t: usize, event: Event) {
        if t >= self.frames.len() {
            self.frames.resize(t + 1, Vec::new());
        }
        self.frames[t].push(event);
    }

    /// `(frame, event)` pairs in frame order.
    pub fn iter(&self) -> impl Iterator<Item = (usize, &Event)> {
        self.frames.iter().enumerate().flat_map(|(t, evs)| evs.iter().map(move |e| (t, e)))
    }

    pub fn event_count(&self) -> usize {
        self.frames.iter().map(Vec::len).sum()
    }

    pub fn active_frame_count(&self) -> usize {
        self.frames.iter().filter(|f| !f.is_empty()).count()
    }

    pub fn is_silent(&self) -> bool {
        self.frames.iter().all(Vec::is_empty)
    }

    /// Frames `start..start + len`, padding with empty frames past the end.
    pub fn slice(&self, start: usize, len: usize) -> Self {
        Self { frames: (start..start + len).map(|t| self.frame(t).to_vec()).collect() }
    }

    /// Resizes the grid to exactly `n_frames`, failing if events would be cut off.
    pub fn fit_to(&self, n_frames: usize) -> Result<Self> {
        if let Some(t) = (n_frames..self.frames.len()).find(|&t| !self.frames[t].is_empty()) {
            return Err(Error::data(format!(
                "label frame {t} lies beyond the {n_frames} frames covered by the audio"
            )));
        }
        Ok(self.slice(0, n_frames))
    }

    pub fn map_events(&self, f: impl Fn(&Event) -> Event) -> Self {
        Self { frames: self.frames.iter().map(|evs| evs.iter().map(&f).collect()).collect() }
    }

    pub fn filter_events(&self, keep: impl Fn(&Event) -> bool) -> Self {
        Self { frames: self.frames.iter().map(|evs| evs.iter().copied().filter(|e| keep(e)).collect()).collect() }
    }

    /// Frame-wise concatenation of two grids.
    pub fn concat(&self, other: &Self) -> Self {
        Self { frames: self.frames.iter().chain(&other.frames).cloned().collect() }
    }

    /// Events of one class in one frame, ordered by source id.
    pub fn class_events(&self, t: usize, class_id: usize) -> Vec<Event> {
        let mut evs: Vec<Event> = self.frame(t).iter().copied().filter(|e| e.class_id == class_id).collect();
        evs.sort_by_key(|e| e.source_id);
        evs
    }
}
