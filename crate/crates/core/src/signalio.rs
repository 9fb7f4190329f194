//! Audio I/O, framing, windowing and frame log-energy.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// The only sample rate the pipeline accepts.
pub const CANONICAL_RATE: u32 = 16_000;

/// Floor added to frame energies before taking the logarithm.
pub const ENERGY_FLOOR: f64 = 1e-10;

pub const FRAME_MS: f64 = 25.0;
pub const SHIFT_MS: f64 = 10.0;

/// The nine speech production tasks of the recording protocol, in session order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum TaskKind {
    #[serde(rename = "vowel_a")]
    SustainedVowel,
    #[serde(rename = "mpt")]
    MaxPhonation,
    #[serde(rename = "ddk")]
    Diadochokinesis,
    #[serde(rename = "words")]
    ReadingWords,
    #[serde(rename = "sentences")]
    ReadingSentences,
    #[serde(rename = "text")]
    ReadingText,
    #[serde(rename = "prosodic")]
    ProsodicSentences,
    #[serde(rename = "story")]
    Storytelling,
    #[serde(rename = "conversation")]
    Conversation,
}

impl TaskKind {
    pub const ALL: [TaskKind; 9] = [
        TaskKind::SustainedVowel,
        TaskKind::MaxPhonation,
        TaskKind::Diadochokinesis,
        TaskKind::ReadingWords,
        TaskKind::ReadingSentences,
        TaskKind::ReadingText,
        TaskKind::ProsodicSentences,
        TaskKind::Storytelling,
        TaskKind::Conversation,
    ];

    /// Short identifier used in file names, manifests and CLI flags.
    pub fn code(self) -> &'static str {
        match self {
            TaskKind::SustainedVowel => "vowel_a",
            TaskKind::MaxPhonation => "mpt",
            TaskKind::Diadochokinesis => "ddk",
            TaskKind::ReadingWords => "words",
            TaskKind::ReadingSentences => "sentences",
            TaskKind::ReadingText => "text",
            TaskKind::ProsodicSentences => "prosodic",
            TaskKind::Storytelling => "story",
            TaskKind::Conversation => "conversation",
        }
    }

    /// Human-readable label used in report tables.
    pub fn label(self) -> &'static str {
        match self {
            TaskKind::SustainedVowel => "/a/",
            TaskKind::MaxPhonation => "MPT",
            TaskKind::Diadochokinesis => "DDK",
            TaskKind::ReadingWords => "Reading 10 words",
            TaskKind::ReadingSentences => "Reading 10 sentences",
            TaskKind::ReadingText => "Reading text",
            TaskKind::ProsodicSentences => "Reading prosodic sentences",
            TaskKind::Storytelling => "Story telling",
            TaskKind::Conversation => "Conversation",
        }
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.code())
    }
}

impl FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        TaskKind::ALL
            .into_iter()
            .find(|t| t.code() == s)
            .ok_or_else(|| Error::parse("task", format!("unknown task '{s}'")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum MedState {
    On,
    Off,
    Unknown,
}

impl MedState {
    pub fn code(self) -> &'static str {
        match self {
            MedState::On => "ON",
            MedState::Off => "OFF",
            MedState::Unknown => "UNKNOWN",
        }
    }

    /// Binary training target: ON = 1, OFF = 0.
    pub fn target(self) -> Option<f64> {
        match self {
            MedState::On => Some(1.0),
            MedState::Off => Some(0.0),
            MedState::Unknown => None,
        }
    }
}

impl fmt::Display for MedState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.code())
    }
}

impl FromStr for MedState {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ON" => Ok(MedState::On),
            "OFF" => Ok(MedState::Off),
            "UNKNOWN" => Ok(MedState::Unknown),
            other => Err(Error::parse("state", format!("unknown state '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecordingMeta {
    pub speaker_id: String,
    pub task: TaskKind,
    pub state: MedState,
    pub split_hint: Option<String>,
}

impl RecordingMeta {
    pub fn new(speaker_id: impl Into<String>, task: TaskKind, state: MedState) -> Self {
        Self {
            speaker_id: speaker_id.into(),
            task,
            state,
            split_hint: None,
        }
    }
}

/// Mono PCM audio normalized to [-1, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct AudioClip {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
    pub meta: Option<RecordingMeta>,
}

impl AudioClip {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Self {
        Self {
            samples,
            sample_rate,
            meta: None,
        }
    }

    pub fn with_meta(mut self, meta: RecordingMeta) -> Self {
        self.meta = Some(meta);
        self
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / f64::from(self.sample_rate)
    }

    /// Checks the admission invariants: non-empty, finite, within [-1, 1].
    pub fn validate(&self) -> Result<()> {
        if self.samples.is_empty() {
            return Err(Error::InvalidInput("empty audio clip".into()));
        }
        if self.sample_rate == 0 {
            return Err(Error::InvalidInput("sample rate must be positive".into()));
        }
        if let Some(i) = self.samples.iter().position(|s| !s.is_finite() || s.abs() > 1.0) {
            return Err(Error::InvalidInput(format!(
                "sample {i} is {} (must be finite and within [-1, 1])",
                self.samples[i]
            )));
        }
        Ok(())
    }

    /// Number of samples spanned by `ms` milliseconds at this clip's rate.
    pub fn samples_for_ms(&self, ms: f64) -> usize {
        ms_to_samples(ms, self.sample_rate)
    }
}

pub fn ms_to_samples(ms: f64, sample_rate: u32) -> usize {
    (ms * f64::from(sample_rate) / 1000.0).round() as usize
}

pub fn read_wav(path: impl AsRef<Path>) -> Result<AudioClip> {
    let path = path.as_ref();
    let reader = hound::WavReader::open(path).map_err(|e| wav_error(path, e))?;
    let spec = reader.spec();
    if spec.channels != 1 {
        return Err(Error::Format(format!(
            "{}: {} channels, only mono is supported",
            path.display(),
            spec.channels
        )));
    }
    if spec.sample_format != hound::SampleFormat::Int || spec.bits_per_sample != 16 {
        return Err(Error::Format(format!(
            "{}: {:?} {}-bit samples, only 16-bit PCM is supported",
            path.display(),
            spec.sample_format,
            spec.bits_per_sample
        )));
    }
    if spec.sample_rate != CANONICAL_RATE {
        return Err(Error::Format(format!(
            "{}: sample rate {} Hz, expected {CANONICAL_RATE} Hz",
            path.display(),
            spec.sample_rate
        )));
    }
    let samples = reader
        .into_samples::<i16>()
        .map(|s| s.map(|v| f64::from(v) / 32768.0))
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|e| wav_error(path, e))?;
    Ok(AudioClip::new(samples, spec.sample_rate))
}

/// Writes a clip as 16-bit mono PCM. Samples are scaled by 32768 and clipped.
pub fn write_wav(path: impl AsRef<Path>, clip: &AudioClip) -> Result<()> {
    let path = path.as_ref();
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: clip.sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut writer = hound::WavWriter::create(path, spec).map_err(|e| wav_error(path, e))?;
    for &s in &clip.samples {
        writer.write_sample(quantize(s)).map_err(|e| wav_error(path, e))?;
    }
    writer.finalize().map_err(|e| wav_error(path, e))
}

/// Maps a normalized sample onto the PCM16 grid.
pub fn quantize(sample: f64) -> i16 {
    (sample * 32768.0).round().clamp(-32768.0, 32767.0) as i16
}

fn wav_error(path: &Path, e: hound::Error) -> Error {
    match e {
        hound::Error::IoError(io) => Error::io(path, io),
        other => Error::Format(format!("{}: {other}", path.display())),
    }
}

/// Rectangular frames cut from a clip.
#[derive(Debug, Clone)]
pub struct FrameSet {
    pub frames: Array2<f64>,
    pub frame_shift: usize,
    pub frame_length: usize,
    pub origin_rate: u32,
}

impl FrameSet {
    pub fn num_frames(&self) -> usize {
        self.frames.nrows()
    }
}

/// Frame count for `num_samples` samples; `None` when not even one frame fits.
pub fn frame_count(num_samples: usize, frame_length: usize, frame_shift: usize) -> Option<usize> {
    if frame_length == 0 || frame_shift == 0 || num_samples < frame_length {
        return None;
    }
    Some((num_samples - frame_length) / frame_shift + 1)
}

pub fn frame_signal(clip: &AudioClip, frame_ms: f64, shift_ms: f64) -> Result<FrameSet> {
    let frame_length = clip.samples_for_ms(frame_ms);
    let frame_shift = clip.samples_for_ms(shift_ms);
    if frame_length == 0 || frame_shift == 0 {
        return Err(Error::InvalidInput(format!(
            "frame {frame_ms} ms / shift {shift_ms} ms round to zero samples"
        )));
    }
    let n = frame_count(clip.samples.len(), frame_length, frame_shift).ok_or(Error::TooShort {
        needed: frame_length,
        got: clip.samples.len(),
    })?;
    let frames = Array2::from_shape_fn((n, frame_length), |(t, i)| clip.samples[t * frame_shift + i]);
    Ok(FrameSet {
        frames,
        frame_shift,
        frame_length,
        origin_rate: clip.sample_rate,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WindowKind {
    Hamming,
    Hann,
}

pub fn window_coefficients(len: usize, kind: WindowKind) -> Vec<f64> {
    if len == 1 {
        return vec![1.0];
    }
    let denom = (len - 1) as f64;
    (0..len)
        .map(|n| {
            let c = (2.0 * std::f64::consts::PI * n as f64 / denom).cos();
            match kind {
                WindowKind::Hamming => 0.54 - 0.46 * c,
                WindowKind::Hann => 0.5 - 0.5 * c,
            }
        })
        .collect()
}

pub fn apply_window(frame: &[f64], kind: WindowKind) -> Result<Vec<f64>> {
    if frame.is_empty() {
        return Err(Error::InvalidInput("cannot window an empty frame".into()));
    }
    let w = window_coefficients(frame.len(), kind);
    Ok(frame.iter().zip(&w).map(|(s, w)| s * w).collect())
}

/// `ln(sum(s^2) + ENERGY_FLOOR)`.
pub fn log_energy(frame: &[f64]) -> f64 {
    let energy: f64 = frame.iter().map(|s| s * s).sum();
    (energy + ENERGY_FLOOR).ln()
}

/// Log-energy of every 25 ms / 10 ms frame of a clip.
pub fn frame_log_energies(clip: &AudioClip) -> Result<Vec<f64>> {
    let frames = frame_signal(clip, FRAME_MS, SHIFT_MS)?;
    Ok(frames
        .frames
        .rows()
        .into_iter()
        .map(|row| log_energy(row.as_slice().expect("frame rows are contiguous")))
        .collect())
}
