//! File codecs: WAV audio, DCASE metadata CSV, feature containers and atomic writes.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use hound::{SampleFormat, WavReader, WavSpec, WavWriter};
use serde::{Deserialize, Serialize};

use crate::binio;
use crate::datagen::FoaClip;
use crate::dsp::{FeatureTensor, StereoClip};
use crate::error::{Error, Result};
use crate::event::{wrap_azimuth, Event, SeldFrameLabels};
use crate::numerics::Tensor;

const FEATURE_MAGIC: &[u8; 4] = b"SSF1";

/// Planar audio read from a WAV file, samples scaled to `[-1, 1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct WavAudio {
    pub channels: Vec<Vec<f32>>,
    pub sample_rate: u32,
}

/// Reads 16/24-bit PCM or 32-bit float WAV data.
pub fn read_wav_from<R: Read>(r: R) -> Result<WavAudio> {
    let reader = WavReader::new(r)?;
    let spec = reader.spec();
    let n_ch = spec.channels as usize;
    if n_ch == 0 {
        return Err(Error::format("WAV has no channels"));
    }
    let interleaved: Vec<f32> = match (spec.sample_format, spec.bits_per_sample) {
        (SampleFormat::Int, 16 | 24) => {
            let scale = 1.0 / (1u32 << (spec.bits_per_sample - 1)) as f32;
            reader.into_samples::<i32>().map(|s| s.map(|v| v as f32 * scale)).collect::<std::result::Result<_, _>>()?
        }
        (SampleFormat::Float, 32) => reader.into_samples::<f32>().collect::<std::result::Result<_, _>>()?,
        (fmt, bits) => return Err(Error::format(format!("unsupported WAV encoding {fmt:?} {bits}-bit"))),
    };
    if !interleaved.len().is_multiple_of(n_ch) {
        return Err(Error::format("WAV data ends mid-frame"));
    }
    let mut channels = vec![Vec::with_capacity(interleaved.len() / n_ch); n_ch];
    for frame in interleaved.chunks_exact(n_ch) {
        for (c, &v) in channels.iter_mut().zip(frame) {
            c.push(v);
        }
    }
    Ok(WavAudio { channels, sample_rate: spec.sample_rate })
}

pub fn read_wav(path: &Path) -> Result<WavAudio> {
    read_wav_from(BufReader::new(File::open(path)?))
}

/// Writes 32-bit float WAV data.
pub fn write_wav_to<W: Write + std::io::Seek>(w: W, channels: &[&[f32]], sample_rate: u32) -> Result<()> {
    let n = channels.first().map_or(0, |c| c.len());
    if channels.is_empty() || channels.iter().any(|c| c.len() != n) {
        return Err(Error::invalid("channels must be non-empty and of equal length"));
    }
    let spec = WavSpec { channels: channels.len() as u16, sample_rate, bits_per_sample: 32, sample_format: SampleFormat::Float };
    let mut writer = WavWriter::new(w, spec)?;
    for i in 0..n {
        for c in channels {
            writer.write_sample(c[i])?;
        }
    }
    writer.finalize()?;
    Ok(())
}

pub fn read_stereo(path: &Path) -> Result<StereoClip> {
    let mut a = read_wav(path)?;
    if a.channels.len() != 2 {
        return Err(Error::data(format!("{}: expected 2 channels, found {}", path.display(), a.channels.len())));
    }
    let right = a.channels.pop().unwrap_or_default();
    let left = a.channels.pop().unwrap_or_default();
    StereoClip::new(left, right, a.sample_rate)
}

pub fn write_stereo(path: &Path, clip: &StereoClip) -> Result<()> {
    atomic_write(path, |f| {
        let mut cursor = std::io::Cursor::new(Vec::new());
        write_wav_to(&mut cursor, &[&clip.left, &clip.right], clip.sample_rate)?;
        f.write_all(cursor.get_ref())?;
        Ok(())
    })
}

/// Reads a 4-channel ambisonics file stored in ACN order (W, Y, Z, X).
pub fn read_foa(path: &Path) -> Result<FoaClip> {
    let a = read_wav(path)?;
    let [w, y, z, x]: [Vec<f32>; 4] = a
        .channels
        .try_into()
        .map_err(|c: Vec<Vec<f32>>| Error::data(format!("{}: expected 4 FOA channels, found {}", path.display(), c.len())))?;
    FoaClip::new(w, x, y, z, a.sample_rate)
}

pub fn write_foa(path: &Path, clip: &FoaClip) -> Result<()> {
    atomic_write(path, |f| {
        let mut cursor = std::io::Cursor::new(Vec::new());
        write_wav_to(&mut cursor, &[&clip.w, &clip.y, &clip.z, &clip.x], clip.sample_rate)?;
        f.write_all(cursor.get_ref())?;
        Ok(())
    })
}

/// Unit of the distance column in metadata files.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DistanceUnit {
    #[default]
    Meters,
    Centimeters,
}

impl DistanceUnit {
    fn to_meters(self, v: f64) -> f64 {
        match self {
            Self::Meters => v,
            Self::Centimeters => v / 100.0,
        }
    }

    fn of_meters(self, m: f64) -> f64 {
        match self {
            Self::Meters => m,
            Self::Centimeters => m * 100.0,
        }
    }
}

/// Column layout of a metadata CSV.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MetadataLayout {
    /// `frame, class, source, azimuth, distance, onscreen`.
    #[default]
    Stereo,
    /// `frame, class, source, azimuth, elevation, distance`; elevation is discarded.
    Foa,
}

fn parse_field<T: std::str::FromStr>(rec: &csv::StringRecord, i: usize, what: &str, line: u64) -> Result<T> {
    let raw = rec.get(i).unwrap_or("").trim();
    raw.parse().map_err(|_| Error::format(format!("line {line}: bad {what} {raw:?}")))
}

/// Parses DCASE metadata rows into a frame grid. A non-numeric first row is taken as a header.
pub fn read_metadata_from<R: Read>(r: R, layout: MetadataLayout, unit: DistanceUnit, n_classes: usize) -> Result<SeldFrameLabels> {
    let mut reader = csv::ReaderBuilder::new().has_headers(false).trim(csv::Trim::All).from_reader(r);
    let mut labels = SeldFrameLabels::new(0);
    for (i, rec) in reader.records().enumerate() {
        let rec = rec?;
        let line = rec.position().map_or(i as u64 + 1, |p| p.line());
        if i == 0 && rec.get(0).is_some_and(|f| f.parse::<f64>().is_err()) {
            continue;
        }
        if rec.len() != 6 {
            return Err(Error::format(format!("line {line}: expected 6 columns, found {}", rec.len())));
        }
        let frame: usize = parse_field(&rec, 0, "frame", line)?;
        let class_id: usize = parse_field(&rec, 1, "class", line)?;
        let source_id: u32 = parse_field(&rec, 2, "source", line)?;
        let azimuth: f64 = parse_field(&rec, 3, "azimuth", line)?;
        let (distance, onscreen) = match layout {
            MetadataLayout::Stereo => {
                let on: u8 = parse_field(&rec, 5, "onscreen flag", line)?;
                if on > 1 {
                    return Err(Error::format(format!("line {line}: onscreen flag must be 0 or 1")));
                }
                (parse_field::<f64>(&rec, 4, "distance", line)?, on == 1)
            }
            MetadataLayout::Foa => (parse_field::<f64>(&rec, 5, "distance", line)?, false),
        };
        if class_id >= n_classes {
            return Err(Error::data(format!("line {line}: class {class_id} outside 0..{n_classes}")));
        }
        let distance_m = unit.to_meters(distance);
        if !(distance_m > 0.0) || !azimuth.is_finite() {
            return Err(Error::data(format!("line {line}: distance must be positive and azimuth finite")));
        }
        labels.push(frame, Event::new(class_id, source_id, wrap_azimuth(azimuth), distance_m, onscreen));
    }
    Ok(labels)
}

pub fn read_metadata(path: &Path, layout: MetadataLayout, unit: DistanceUnit, n_classes: usize) -> Result<SeldFrameLabels> {
    read_metadata_from(BufReader::new(File::open(path)?), layout, unit, n_classes)
        .map_err(|e| match e {
            Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
            Error::Data(m) => Error::Data(format!("{}: {m}", path.display())),
            other => other,
        })
}

/// Writes stereo-layout rows sorted by frame, class and source; azimuth as an integer,
/// distance with two decimals.
pub fn write_metadata_to<W: Write>(w: W, labels: &SeldFrameLabels, unit: DistanceUnit) -> Result<()> {
    let mut writer = csv::WriterBuilder::new().has_headers(false).from_writer(w);
    for (t, frame) in labels.frames().iter().enumerate() {
        let mut evs = frame.clone();
        evs.sort_by_key(|e| (e.class_id, e.source_id));
        for e in evs {
            let az = e.azimuth_deg.round() as i64;
            writer.write_record(&[
                t.to_string(),
                e.class_id.to_string(),
                e.source_id.to_string(),
                az.to_string(),
                format!("{:.2}", unit.of_meters(e.distance_m)),
                u8::from(e.onscreen).to_string(),
            ])?;
        }
    }
    writer.flush()?;
    Ok(())
}

pub fn write_metadata(path: &Path, labels: &SeldFrameLabels, unit: DistanceUnit) -> Result<()> {
    atomic_write(path, |f| write_metadata_to(f, labels, unit))
}

/// `SSF1`: u32 channels, u32 frames, u32 bins, then the f32 payload.
pub fn write_features_to<W: Write>(w: &mut W, f: &FeatureTensor) -> Result<()> {
    binio::write_header(w, FEATURE_MAGIC, 1)?;
    for &d in f.tensor().shape() {
        binio::write_u32(w, d as u32)?;
    }
    binio::write_f32s(w, f.tensor().data())
}

pub fn read_features_from<R: Read>(r: &mut R) -> Result<FeatureTensor> {
    binio::read_header(r, FEATURE_MAGIC, 1)?;
    let shape = (0..3).map(|_| binio::read_u32(r).map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
    let n = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or_else(|| Error::format("feature shape overflow"))?;
    if n == 0 {
        return Err(Error::format("empty feature tensor"));
    }
    let data = binio::read_f32s(r, n)?;
    binio::expect_eof(r)?;
    FeatureTensor::new(Tensor::new(shape, data)?)
}

pub fn write_features(path: &Path, f: &FeatureTensor) -> Result<()> {
    atomic_write(path, |w| write_features_to(w, f))
}

pub fn read_features(path: &Path) -> Result<FeatureTensor> {
    read_features_from(&mut BufReader::new(File::open(path)?))
}

pub fn read_embedding_file(path: &Path) -> Result<Tensor<f32>> {
    crate::model::read_embedding(&mut BufReader::new(File::open(path)?))
}

pub fn write_embedding_file(path: &Path, t: &Tensor<f32>) -> Result<()> {
    atomic_write(path, |w| crate::model::write_embedding(w, t))
}

/// Writes through a temporary sibling file and renames it into place, so readers never
/// observe a partially written output.
pub fn atomic_write(path: &Path, body: impl FnOnce(&mut BufWriter<File>) -> Result<()>) -> Result<()> {
    let name = path.file_name().ok_or_else(|| Error::invalid(format!("{} is not a file path", path.display())))?;
    let tmp = path.with_file_name(format!(".{}.tmp{}", name.to_string_lossy(), std::process::id()));
    let result = (|| {
        let mut w = BufWriter::new(File::create(&tmp)?);
        body(&mut w)?;
        w.into_inner().map_err(|e| e.into_error())?.sync_all()?;
        fs::rename(&tmp, path)?;
        Ok(())
    })();
    if result.is_err() {
        let _ = fs::remove_file(&tmp);
    }
    result
}

/// Files in `dir` with extension `ext`, sorted by name.
pub fn list_files(dir: &Path, ext: &str) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::data(format!("{}: {e}", dir.display())))? {
        let p = entry?.path();
        if p.is_file() && p.extension().is_some_and(|e| e.eq_ignore_ascii_case(ext)) {
            out.push(p);
        }
    }
    out.sort();
    Ok(out)
}

pub fn stem(path: &Path) -> Result<String> {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .ok_or_else(|| Error::invalid(format!("{} has no file name", path.display())))
}
