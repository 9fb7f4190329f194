//! Speech/non-speech segmentation from frame log-energies.
//!
//! A two-component Gaussian mixture is fitted to the log-energies of one
//! recording; the speech-component posterior of every frame drives a two-state
//! machine with hysteresis, and segments shorter than their minimum duration are
//! merged into the longer neighbour.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::IndexedRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::signalio::{frame_log_energies, AudioClip, SHIFT_MS};

pub const VARIANCE_FLOOR: f64 = 1e-4;
const MAX_ITERATIONS: usize = 200;
const TOLERANCE: f64 = 1e-6;
const MIN_FRAMES: usize = 20;

/// Two-component 1-D Gaussian mixture. Index 1 is speech (higher mean).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BiGaussian {
    pub weights: [f64; 2],
    pub means: [f64; 2],
    pub variances: [f64; 2],
}

pub const NON_SPEECH: usize = 0;
pub const SPEECH: usize = 1;

fn log_normal(x: f64, mean: f64, var: f64) -> f64 {
    -0.5 * ((2.0 * std::f64::consts::PI * var).ln() + (x - mean).powi(2) / var)
}

fn log_add(a: f64, b: f64) -> f64 {
    let m = a.max(b);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + ((a - m).exp() + (b - m).exp()).ln()
}

impl BiGaussian {
    fn component_log_joint(&self, x: f64) -> [f64; 2] {
        [0, 1].map(|k| self.weights[k].ln() + log_normal(x, self.means[k], self.variances[k]))
    }

    pub fn log_likelihood(&self, x: f64) -> f64 {
        let [a, b] = self.component_log_joint(x);
        log_add(a, b)
    }

    pub fn avg_log_likelihood(&self, data: &[f64]) -> f64 {
        data.iter().map(|&x| self.log_likelihood(x)).sum::<f64>() / data.len() as f64
    }

    /// Posterior probability of the speech component.
    pub fn speech_posterior(&self, x: f64) -> f64 {
        let [ns, sp] = self.component_log_joint(x);
        if ns == f64::NEG_INFINITY && sp == f64::NEG_INFINITY {
            return 0.5;
        }
        1.0 / (1.0 + (ns - sp).exp())
    }

    fn relabeled(mut self) -> Self {
        if self.means[SPEECH] < self.means[NON_SPEECH] {
            self.weights.swap(0, 1);
            self.means.swap(0, 1);
            self.variances.swap(0, 1);
        }
        self
    }

    /// One EM step; returns the updated model.
    fn em_step(&self, data: &[f64]) -> Self {
        let mut n = [0.0; 2];
        let mut sx = [0.0; 2];
        let mut sxx = [0.0; 2];
        for &x in data {
            let [a, b] = self.component_log_joint(x);
            let total = log_add(a, b);
            let g = [(a - total).exp(), (b - total).exp()];
            for k in 0..2 {
                n[k] += g[k];
                sx[k] += g[k] * x;
            }
        }
        let mut next = *self;
        let total = n[0] + n[1];
        let means = [0, 1].map(|k| if n[k] > 0.0 { sx[k] / n[k] } else { self.means[k] });
        for &x in data {
            let [a, b] = self.component_log_joint(x);
            let t = log_add(a, b);
            let g = [(a - t).exp(), (b - t).exp()];
            for k in 0..2 {
                sxx[k] += g[k] * (x - means[k]).powi(2);
            }
        }
        for k in 0..2 {
            if n[k] > 0.0 {
                next.means[k] = means[k];
                next.variances[k] = (sxx[k] / n[k]).max(VARIANCE_FLOOR);
            }
            next.weights[k] = n[k] / total;
        }
        next
    }
}

/// Fitted model plus the average log-likelihood after every EM iteration
/// (entry 0 is the initial model).
#[derive(Debug, Clone)]
pub struct BiGaussianFit {
    pub model: BiGaussian,
    pub log_likelihood_trace: Vec<f64>,
}

fn percentile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

fn check_data(data: &[f64]) -> Result<()> {
    if data.len() < MIN_FRAMES {
        return Err(Error::InvalidInput(format!(
            "bi-Gaussian fit needs at least {MIN_FRAMES} frames, got {}",
            data.len()
        )));
    }
    if data.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("non-finite log-energy".into()));
    }
    let first = data[0];
    if data.iter().all(|&v| v == first) {
        return Err(Error::Degenerate("all log-energies are identical".into()));
    }
    Ok(())
}

/// Initial model from the 25th/75th percentiles. When those coincide (long runs
/// of identical values) two distinct data values are drawn with `seed` instead.
pub fn initial_bigaussian(data: &[f64], seed: u64) -> Result<BiGaussian> {
    check_data(data)?;
    let mut sorted = data.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mut lo = percentile(&sorted, 0.25);
    let mut hi = percentile(&sorted, 0.75);
    if lo == hi {
        sorted.dedup();
        let mut rng = crate::seed::rng_from(seed);
        let picks: Vec<f64> = sorted.choose_multiple(&mut rng, 2).copied().collect();
        lo = picks[0].min(picks[1]);
        hi = picks[0].max(picks[1]);
    }
    let n = data.len() as f64;
    let mean = data.iter().sum::<f64>() / n;
    let var = (data.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).max(VARIANCE_FLOOR);
    Ok(BiGaussian {
        weights: [0.5, 0.5],
        means: [lo, hi],
        variances: [var / 4.0 + VARIANCE_FLOOR, var / 4.0 + VARIANCE_FLOOR],
    })
}

/// Runs EM from `init` until the average log-likelihood improves by less than
/// 1e-6 or 200 iterations pass; relabels so that speech has the higher mean.
pub fn fit_bigaussian_from(data: &[f64], init: BiGaussian) -> Result<BiGaussianFit> {
    check_data(data)?;
    let mut model = init;
    let mut trace = vec![model.avg_log_likelihood(data)];
    for _ in 0..MAX_ITERATIONS {
        model = model.em_step(data);
        let ll = model.avg_log_likelihood(data);
        let gain = ll - trace[trace.len() - 1];
        trace.push(ll);
        if gain.abs() < TOLERANCE {
            break;
        }
    }
    if model.weights.iter().any(|w| !(w.is_finite() && *w > 0.0)) {
        return Err(Error::Degenerate("mixture collapsed onto a single component".into()));
    }
    Ok(BiGaussianFit {
        model: model.relabeled(),
        log_likelihood_trace: trace,
    })
}

pub fn fit_bigaussian(log_energies: &[f64], seed: u64) -> Result<BiGaussian> {
    let init = initial_bigaussian(log_energies, seed)?;
    Ok(fit_bigaussian_from(log_energies, init)?.model)
}

pub fn frame_speech_posterior(model: &BiGaussian, log_energy: f64) -> f64 {
    model.speech_posterior(log_energy)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SnsFsmParams {
    pub enter_speech_posterior: f64,
    pub exit_speech_posterior: f64,
    pub min_speech_ms: f64,
    pub min_pause_ms: f64,
}

impl Default for SnsFsmParams {
    fn default() -> Self {
        Self {
            enter_speech_posterior: 0.7,
            exit_speech_posterior: 0.3,
            min_speech_ms: 100.0,
            min_pause_ms: 200.0,
        }
    }
}

impl SnsFsmParams {
    pub fn validate(&self) -> Result<()> {
        let unit = |p: f64| p > 0.0 && p < 1.0;
        if !unit(self.enter_speech_posterior) || !unit(self.exit_speech_posterior) {
            return Err(Error::InvalidInput("FSM thresholds must lie in (0, 1)".into()));
        }
        if self.enter_speech_posterior < self.exit_speech_posterior {
            return Err(Error::InvalidInput(
                "enter threshold must not be below exit threshold".into(),
            ));
        }
        if self.min_speech_ms < 0.0 || self.min_pause_ms < 0.0 {
            return Err(Error::InvalidInput("minimum durations must be >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SnsLabel {
    Speech,
    NonSpeech,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SpeakerLabel {
    Patient,
    Therapist,
    Unassigned,
}

impl fmt::Display for SnsLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SnsLabel::Speech => "SPEECH",
            SnsLabel::NonSpeech => "NON_SPEECH",
        })
    }
}

impl FromStr for SnsLabel {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "SPEECH" => Ok(SnsLabel::Speech),
            "NON_SPEECH" => Ok(SnsLabel::NonSpeech),
            _ => Err(Error::parse("segment label", format!("unknown SNS label '{s}'"))),
        }
    }
}

impl fmt::Display for SpeakerLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SpeakerLabel::Patient => "PATIENT",
            SpeakerLabel::Therapist => "THERAPIST",
            SpeakerLabel::Unassigned => "UNASSIGNED",
        })
    }
}

impl FromStr for SpeakerLabel {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "PATIENT" => Ok(SpeakerLabel::Patient),
            "THERAPIST" => Ok(SpeakerLabel::Therapist),
            "UNASSIGNED" => Ok(SpeakerLabel::Unassigned),
            _ => Err(Error::parse("segment label", format!("unknown speaker '{s}'"))),
        }
    }
}

/// Frames `[start, end)` sharing one label pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub start: usize,
    pub end: usize,
    pub sns: SnsLabel,
    pub speaker: SpeakerLabel,
}

impl Segment {
    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end == self.start
    }

    fn same_label(&self, other: &Segment) -> bool {
        self.sns == other.sns && self.speaker == other.speaker
    }
}

/// Contiguous labelled partition of a recording's frame axis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentList {
    pub segments: Vec<Segment>,
    pub frame_period_ms: f64,
}

impl SegmentList {
    /// Builds a list from per-frame labels, merging runs.
    pub fn from_frame_labels(labels: &[(SnsLabel, SpeakerLabel)], frame_period_ms: f64) -> Self {
        let mut segments: Vec<Segment> = Vec::new();
        for (t, &(sns, speaker)) in labels.iter().enumerate() {
            match segments.last_mut() {
                Some(last) if last.sns == sns && last.speaker == speaker => last.end = t + 1,
                _ => segments.push(Segment {
                    start: t,
                    end: t + 1,
                    sns,
                    speaker,
                }),
            }
        }
        Self {
            segments,
            frame_period_ms,
        }
    }

    pub fn num_frames(&self) -> usize {
        self.segments.last().map_or(0, |s| s.end)
    }

    pub fn frame_labels(&self) -> Vec<(SnsLabel, SpeakerLabel)> {
        self.segments
            .iter()
            .flat_map(|s| std::iter::repeat_n((s.sns, s.speaker), s.len()))
            .collect()
    }

    /// Indices of frames that are speech attributed to `speaker`.
    pub fn frames_of(&self, sns: SnsLabel, speaker: SpeakerLabel) -> Vec<usize> {
        self.segments
            .iter()
            .filter(|s| s.sns == sns && s.speaker == speaker)
            .flat_map(|s| s.start..s.end)
            .collect()
    }

    pub fn speech_frames(&self) -> Vec<usize> {
        self.segments
            .iter()
            .filter(|s| s.sns == SnsLabel::Speech)
            .flat_map(|s| s.start..s.end)
            .collect()
    }

    /// Coalesces adjacent segments with equal labels.
    pub fn coalesce(&mut self) {
        let mut out: Vec<Segment> = Vec::with_capacity(self.segments.len());
        for s in self.segments.drain(..) {
            match out.last_mut() {
                Some(last) if last.same_label(&s) => last.end = s.end,
                _ => out.push(s),
            }
        }
        self.segments = out;
    }

    pub fn check_invariants(&self) -> Result<()> {
        let mut expected_start = 0;
        for (i, s) in self.segments.iter().enumerate() {
            if s.start != expected_start || s.end <= s.start {
                return Err(Error::InvalidInput(format!(
                    "segment {i} [{}, {}) breaks contiguity",
                    s.start, s.end
                )));
            }
            if i > 0 && self.segments[i - 1].same_label(s) {
                return Err(Error::InvalidInput(format!("segments {} and {i} share a label", i - 1)));
            }
            expected_start = s.end;
        }
        Ok(())
    }

    /// One line per segment: `start_s<TAB>end_s<TAB>SNS<TAB>SPEAKER`.
    pub fn to_text(&self) -> String {
        let secs = |f: usize| f as f64 * self.frame_period_ms / 1000.0;
        self.segments
            .iter()
            .map(|s| format!("{:.3}\t{:.3}\t{}\t{}\n", secs(s.start), secs(s.end), s.sns, s.speaker))
            .collect()
    }

    pub fn from_text(text: &str, frame_period_ms: f64) -> Result<Self> {
        let to_frame = |v: &str, line: usize| -> Result<usize> {
            let secs: f64 = v
                .parse()
                .map_err(|_| Error::parse(format!("segment line {line}"), format!("bad time '{v}'")))?;
            Ok((secs * 1000.0 / frame_period_ms).round() as usize)
        };
        let mut segments = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let cols: Vec<&str> = line.split('\t').collect();
            if cols.len() != 4 {
                return Err(Error::parse(
                    format!("segment line {}", i + 1),
                    "expected 4 tab-separated columns",
                ));
            }
            segments.push(Segment {
                start: to_frame(cols[0], i + 1)?,
                end: to_frame(cols[1], i + 1)?,
                sns: cols[2].parse()?,
                speaker: cols[3].parse()?,
            });
        }
        let list = Self {
            segments,
            frame_period_ms,
        };
        list.check_invariants()?;
        Ok(list)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: impl AsRef<Path>, frame_period_ms: f64) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text, frame_period_ms)
    }
}

/// Hysteresis state machine followed by short-segment merging.
pub fn sns_fsm(posteriors: &[f64], params: &SnsFsmParams, frame_period_ms: f64) -> Result<SegmentList> {
    if posteriors.is_empty() {
        return Err(Error::InvalidInput("empty posterior sequence".into()));
    }
    params.validate()?;
    let mut speech = posteriors[0] >= params.enter_speech_posterior;
    let labels: Vec<(SnsLabel, SpeakerLabel)> = posteriors
        .iter()
        .map(|&p| {
            if speech && p <= params.exit_speech_posterior {
                speech = false;
            } else if !speech && p >= params.enter_speech_posterior {
                speech = true;
            }
            let sns = if speech { SnsLabel::Speech } else { SnsLabel::NonSpeech };
            (sns, SpeakerLabel::Unassigned)
        })
        .collect();
    let mut list = SegmentList::from_frame_labels(&labels, frame_period_ms);
    let min_frames = |s: &Segment| {
        let ms = match s.sns {
            SnsLabel::Speech => params.min_speech_ms,
            SnsLabel::NonSpeech => params.min_pause_ms,
        };
        (ms / frame_period_ms).ceil() as usize
    };
    // repeatedly absorb the shortest too-short segment (earliest on ties)
    loop {
        if list.segments.len() < 2 {
            break;
        }
        let victim = list
            .segments
            .iter()
            .enumerate()
            .filter(|(_, s)| s.len() < min_frames(s))
            .min_by_key(|(i, s)| (s.len(), *i))
            .map(|(i, _)| i);
        let Some(i) = victim else { break };
        let prev = i.checked_sub(1).map(|j| list.segments[j].len());
        let next = list.segments.get(i + 1).map(Segment::len);
        let target = match (prev, next) {
            (Some(p), Some(n)) if n > p => i + 1,
            (Some(_), _) => i - 1,
            (None, _) => i + 1,
        };
        let t = list.segments[target];
        list.segments[i].sns = t.sns;
        list.segments[i].speaker = t.speaker;
        list.coalesce();
    }
    Ok(list)
}

/// Log-energy → bi-Gaussian → posteriors → FSM. Speaker labels stay unassigned.
pub fn segment_recording(clip: &AudioClip, params: &SnsFsmParams, seed: u64) -> Result<SegmentList> {
    if clip.duration_s() < 1.0 {
        return Err(Error::InvalidInput(format!(
            "segmentation needs at least 1 s of audio, got {:.3} s",
            clip.duration_s()
        )));
    }
    let energies = frame_log_energies(clip)?;
    let model = fit_bigaussian(&energies, seed).map_err(|e| match e {
        Error::Degenerate(msg) => Error::Unsegmentable(msg),
        other => other,
    })?;
    let posteriors: Vec<f64> = energies.iter().map(|&e| model.speech_posterior(e)).collect();
    sns_fsm(&posteriors, params, SHIFT_MS)
}
