//! Acoustic features for the pose forecaster and ingestion of precomputed
//! per-frame condition features.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::blob::{write_atomic, TensorBlob};
use crate::error::{ensure_finite, Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct AudioTrack {
    pub samples: Vec<f32>,
    pub sample_rate: u32,
}

impl AudioTrack {
    pub fn new(samples: Vec<f32>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::invalid("sample_rate", "must be positive"));
        }
        if let Some(index) = samples.iter().position(|s| !s.is_finite()) {
            return Err(Error::NonFinite {
                field: "samples".into(),
                index,
            });
        }
        Ok(Self { samples, sample_rate })
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    /// Reads RIFF/WAVE, PCM 16-bit little-endian, mono.
    pub fn read_wav(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode_wav(&bytes)
    }

    pub fn decode_wav(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 12 || &bytes[0..4] != b"RIFF" {
            return Err(Error::format("riff.chunk_id", "expected \"RIFF\""));
        }
        if &bytes[8..12] != b"WAVE" {
            return Err(Error::format("riff.format", "expected \"WAVE\""));
        }
        let mut pos = 12;
        let mut fmt: Option<(u32, u16)> = None;
        while pos + 8 <= bytes.len() {
            let id = &bytes[pos..pos + 4];
            let size = u32::from_le_bytes(bytes[pos + 4..pos + 8].try_into().unwrap()) as usize;
            let body_start = pos + 8;
            let body_end = body_start
                .checked_add(size)
                .filter(|&e| e <= bytes.len())
                .ok_or_else(|| {
                    Error::format(
                        format!("{}.size", String::from_utf8_lossy(id).trim()),
                        "chunk extends past end of file",
                    )
                })?;
            let body = &bytes[body_start..body_end];
            match id {
                b"fmt " => {
                    if body.len() < 16 {
                        return Err(Error::format("fmt.size", "fmt chunk shorter than 16 bytes"));
                    }
                    let u16_at = |o: usize| u16::from_le_bytes(body[o..o + 2].try_into().unwrap());
                    let audio_format = u16_at(0);
                    let channels = u16_at(2);
                    let sample_rate = u32::from_le_bytes(body[4..8].try_into().unwrap());
                    let bits = u16_at(14);
                    if audio_format != 1 {
                        return Err(Error::format(
                            "fmt.audio_format",
                            format!("{audio_format} (only PCM = 1 is supported)"),
                        ));
                    }
                    if channels != 1 {
                        return Err(Error::format(
                            "fmt.num_channels",
                            format!("{channels} (only mono is supported)"),
                        ));
                    }
                    if bits != 16 {
                        return Err(Error::format(
                            "fmt.bits_per_sample",
                            format!("{bits} (only 16-bit is supported)"),
                        ));
                    }
                    if sample_rate == 0 {
                        return Err(Error::format("fmt.sample_rate", "zero sample rate"));
                    }
                    fmt = Some((sample_rate, bits));
                }
                b"data" => {
                    let (sample_rate, _) =
                        fmt.ok_or_else(|| Error::format("fmt", "data chunk before fmt chunk"))?;
                    if !body.len().is_multiple_of(2) {
                        return Err(Error::format("data.size", "odd byte count for 16-bit PCM"));
                    }
                    let samples = body
                        .chunks_exact(2)
                        .map(|c| i16::from_le_bytes([c[0], c[1]]) as f32 / 32768.0)
                        .collect();
                    return AudioTrack::new(samples, sample_rate);
                }
                _ => {}
            }
            // Chunks are padded to even sizes.
            pos = body_end + (size & 1);
        }
        Err(Error::format(
            if fmt.is_none() { "fmt" } else { "data" },
            "required chunk missing",
        ))
    }

    pub fn encode_wav(&self) -> Vec<u8> {
        let data_len = (self.samples.len() * 2) as u32;
        let mut out = Vec::with_capacity(44 + data_len as usize);
        out.extend_from_slice(b"RIFF");
        out.extend_from_slice(&(36 + data_len).to_le_bytes());
        out.extend_from_slice(b"WAVEfmt ");
        out.extend_from_slice(&16u32.to_le_bytes());
        out.extend_from_slice(&1u16.to_le_bytes());
        out.extend_from_slice(&1u16.to_le_bytes());
        out.extend_from_slice(&self.sample_rate.to_le_bytes());
        out.extend_from_slice(&(self.sample_rate * 2).to_le_bytes());
        out.extend_from_slice(&2u16.to_le_bytes());
        out.extend_from_slice(&16u16.to_le_bytes());
        out.extend_from_slice(b"data");
        out.extend_from_slice(&data_len.to_le_bytes());
        for &s in &self.samples {
            let q = (s as f64 * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
            out.extend_from_slice(&q.to_le_bytes());
        }
        out
    }

    pub fn write_wav(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.encode_wav())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FrameWindowing {
    pub video_fps: f64,
    pub window_s: f64,
}

impl FrameWindowing {
    pub fn new(video_fps: f64) -> Self {
        Self {
            video_fps,
            window_s: 0.2,
        }
    }

    fn validate(&self) -> Result<()> {
        if !(self.video_fps.is_finite() && self.video_fps > 0.0) {
            return Err(Error::invalid("video_fps", "must be positive"));
        }
        if !(self.window_s.is_finite() && self.window_s > 0.0) {
            return Err(Error::invalid("window_s", "must be positive"));
        }
        Ok(())
    }
}

/// Fraction of adjacent sample pairs whose signs differ; zero counts as positive.
pub fn zcr(window: &[f32]) -> Result<f64> {
    if window.len() < 2 {
        return Err(Error::invalid("window", "zcr needs at least 2 samples"));
    }
    let crossings = window
        .windows(2)
        .filter(|w| (w[0] >= 0.0) != (w[1] >= 0.0))
        .count();
    Ok(crossings as f64 / (window.len() - 1) as f64)
}

pub fn rms(window: &[f32]) -> Result<f64> {
    if window.is_empty() {
        return Err(Error::invalid("window", "rms of an empty window"));
    }
    let sum: f64 = window.iter().map(|&s| (s as f64) * (s as f64)).sum();
    Ok((sum / window.len() as f64).sqrt())
}

/// One `(zcr, rms)` pair per video frame. Frame `i` uses a window of
/// `window_s` seconds centered on `i / video_fps`, clamped to the track;
/// frames whose clamped window holds fewer than two samples are silent.
pub fn features_per_frame(track: &AudioTrack, win: &FrameWindowing, n_frames: usize) -> Result<Vec<[f64; 2]>> {
    if n_frames == 0 {
        return Err(Error::invalid("n_frames", "must be positive"));
    }
    win.validate()?;
    let sr = track.sample_rate as f64;
    let width = ((win.window_s * sr).round() as i64).max(2);
    let len = track.samples.len() as i64;
    let mut out = Vec::with_capacity(n_frames);
    for i in 0..n_frames {
        let center = (i as f64 / win.video_fps * sr).round() as i64;
        let start = (center - width / 2).clamp(0, len);
        let end = (center - width / 2 + width).clamp(0, len);
        if end - start < 2 {
            out.push([0.0, 0.0]);
            continue;
        }
        let w = &track.samples[start as usize..end as usize];
        out.push([zcr(w)?, rms(w)?]);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureRole {
    SpeakerAudio,
    ListenerExpression,
}

/// Default width of ingested speaker audio features.
pub const SPEAKER_FEATURE_DIM: usize = 512;
/// Default width of ingested listener expression features.
pub const EXPRESSION_FEATURE_DIM: usize = 64;

/// Per-frame condition vectors, stored row-major `frames x dim`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionFeature {
    pub role: FeatureRole,
    pub dim: usize,
    pub values: Vec<f64>,
}

impl ConditionFeature {
    pub fn new(role: FeatureRole, dim: usize, values: Vec<f64>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::invalid("condition.dim", "must be positive"));
        }
        if values.is_empty() || !values.len().is_multiple_of(dim) {
            return Err(Error::format(
                "condition.values",
                format!("{} values is not a positive multiple of dim {dim}", values.len()),
            ));
        }
        ensure_finite("condition.values", &values)?;
        Ok(Self { role, dim, values })
    }

    pub fn frames(&self) -> usize {
        self.values.len() / self.dim
    }

    pub fn frame(&self, i: usize) -> &[f64] {
        &self.values[i * self.dim..(i + 1) * self.dim]
    }

    pub fn to_blob(&self) -> Result<TensorBlob> {
        TensorBlob::f32_from_f64(vec![self.frames(), self.dim], &self.values)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_blob()?.save(path)
    }
}

/// Loads a `(frames, dim)` blob; `expected_dim` comes from the manifest or
/// model configuration when known.
pub fn load_condition_features(path: &Path, role: FeatureRole, expected_dim: Option<usize>) -> Result<ConditionFeature> {
    let blob = TensorBlob::load(path)?;
    condition_from_blob(&blob, role, expected_dim).map_err(|e| e.context(path.display()))
}

pub fn condition_from_blob(blob: &TensorBlob, role: FeatureRole, expected_dim: Option<usize>) -> Result<ConditionFeature> {
    if blob.dims.len() != 2 {
        return Err(Error::format(
            "condition.ndim",
            format!("expected 2 dims (frames, dim), got {}", blob.dims.len()),
        ));
    }
    let dim = blob.dims[1];
    if let Some(expected) = expected_dim {
        if expected != dim {
            return Err(Error::dim("condition.dim", expected, dim));
        }
    }
    ConditionFeature::new(role, dim, blob.to_f64())
}
