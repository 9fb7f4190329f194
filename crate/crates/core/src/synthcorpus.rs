//! Parametric source-filter generator for a synthetic ON/OFF corpus.
//!
//! Every speaker records all nine tasks in both states. Voiced speech is a
//! Rosenberg glottal pulse train with per-cycle jitter and shimmer, shaped by a
//! cascade of formant resonators. The OFF state compresses F0 excursions,
//! lowers intensity, raises jitter, shimmer and breathiness, adds a slow vocal
//! tremor, centralizes vowels and lengthens pauses, all scaled by one effect size.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed::{derive_seed, rng_from};
use crate::segmentation::{SegmentList, SnsLabel, SpeakerLabel};
use crate::signalio::{
    frame_count, write_wav, AudioClip, MedState, RecordingMeta, TaskKind, CANONICAL_RATE, FRAME_MS, SHIFT_MS,
};

const FS: f64 = CANONICAL_RATE as f64;
/// Formants of the vowels used by the generator, for a reference speaker.
const VOWELS: [[f64; 3]; 5] = [
    [730.0, 1090.0, 2440.0],
    [530.0, 1840.0, 2480.0],
    [270.0, 2290.0, 3010.0],
    [570.0, 840.0, 2410.0],
    [300.0, 870.0, 2240.0],
];
const BANDWIDTHS: [f64; 4] = [80.0, 90.0, 120.0, 180.0];
const F4_HZ: f64 = 3500.0;
/// Shortest pause the layout produces, long enough to survive segmentation.
pub const MIN_PAUSE_S: f64 = 0.4;
const EDGE_RAMP_S: f64 = 0.02;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpeakerProfile {
    pub speaker_id: String,
    pub base_f0: f64,
    /// F1-F3 of the speaker's open vowel.
    pub formants: [f64; 3],
    /// Active-speech RMS level in dBFS.
    pub base_intensity: f64,
    pub base_jitter: f64,
    pub base_shimmer: f64,
    pub syllable_rate: f64,
    pub breathiness: f64,
    pub seed: u64,
}

impl SpeakerProfile {
    pub fn validate(&self) -> Result<()> {
        if !(70.0..=300.0).contains(&self.base_f0) {
            return Err(Error::InvalidInput(format!(
                "base F0 {} outside [70, 300] Hz",
                self.base_f0
            )));
        }
        for v in [self.base_jitter, self.base_shimmer] {
            if !(0.0..=0.1).contains(&v) {
                return Err(Error::InvalidInput("jitter and shimmer must lie in [0, 0.1]".into()));
            }
        }
        if self.formants.iter().any(|f| !(100.0..7000.0).contains(f)) || self.syllable_rate <= 0.0 {
            return Err(Error::InvalidInput("implausible formants or syllable rate".into()));
        }
        Ok(())
    }

    /// Draws a random patient or control speaker.
    pub fn random(speaker_id: &str, master_seed: u64) -> Self {
        let seed = derive_seed(master_seed, "profile", speaker_id);
        let mut rng = rng_from(seed);
        let female = rng.random_bool(0.5);
        let (f0, scale) = if female {
            (rng.random_range(165.0..235.0), rng.random_range(1.08..1.18))
        } else {
            (rng.random_range(90.0..145.0), rng.random_range(0.92..1.04))
        };
        Self {
            speaker_id: speaker_id.to_string(),
            base_f0: f0,
            formants: VOWELS[0].map(|f| f * scale),
            base_intensity: rng.random_range(-24.0..-18.0),
            base_jitter: rng.random_range(0.004..0.01),
            base_shimmer: rng.random_range(0.02..0.045),
            syllable_rate: rng.random_range(3.8..5.2),
            breathiness: rng.random_range(0.02..0.06),
            seed,
        }
    }

    /// The clinician voice; far from the patient ranges unless `hard` is set.
    pub fn therapist(hard: bool) -> Self {
        let (f0, scale) = if hard { (205.0, 1.12) } else { (265.0, 1.3) };
        Self {
            speaker_id: "THERAPIST".into(),
            base_f0: f0,
            formants: VOWELS[0].map(|f| f * scale),
            base_intensity: -20.0,
            base_jitter: 0.005,
            base_shimmer: 0.025,
            syllable_rate: 4.8,
            breathiness: 0.03,
            seed: 0x7e4a,
        }
    }

    fn formant_scale(&self) -> [f64; 3] {
        [0, 1, 2].map(|i| self.formants[i] / VOWELS[0][i])
    }
}

/// OFF-state deviation size; 0 makes ON and OFF generation identical.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StateEffect {
    pub delta: f64,
}

impl StateEffect {
    pub fn new(delta: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&delta) {
            return Err(Error::InvalidInput(format!("effect size {delta} outside [0, 1]")));
        }
        Ok(Self { delta })
    }

    fn scale(&self, state: MedState) -> f64 {
        if state == MedState::Off {
            self.delta
        } else {
            0.0
        }
    }

    /// Multiplier on F0 excursions (monopitch).
    pub fn f0_range_factor(&self, state: MedState) -> f64 {
        1.0 - 0.75 * self.scale(state)
    }

    pub fn intensity_offset_db(&self, state: MedState) -> f64 {
        -6.0 * self.scale(state)
    }

    pub fn jitter_increase(&self, state: MedState) -> f64 {
        0.02 * self.scale(state)
    }

    pub fn shimmer_increase(&self, state: MedState) -> f64 {
        0.1 * self.scale(state)
    }

    pub fn pause_factor(&self, state: MedState) -> f64 {
        1.0 + 0.6 * self.scale(state)
    }

    /// Depth of the slow F0 and amplitude modulation (vocal tremor).
    pub fn tremor_depth(&self, state: MedState) -> f64 {
        TREMOR_DEPTH * self.scale(state)
    }

    pub fn breathiness_increase(&self, state: MedState) -> f64 {
        BREATHINESS_INCREASE * self.scale(state)
    }

    /// Fraction by which vowel targets move toward the neutral vowel.
    pub fn centralization(&self, state: MedState) -> f64 {
        CENTRALIZATION * self.scale(state)
    }

    fn voice(&self, state: MedState) -> VoiceShape {
        VoiceShape {
            range_factor: self.f0_range_factor(state),
            tremor: self.tremor_depth(state),
            centralization: self.centralization(state),
        }
    }
}

const TREMOR_HZ: f64 = 5.0;
const TREMOR_DEPTH: f64 = 0.06;
const BREATHINESS_INCREASE: f64 = 0.3;
const CENTRALIZATION: f64 = 0.35;
/// Formants of the neutral vowel.
const SCHWA: [f64; 3] = [500.0, 1500.0, 2500.0];

/// State-dependent shaping of the control tracks.
#[derive(Debug, Clone, Copy)]
struct VoiceShape {
    range_factor: f64,
    tremor: f64,
    centralization: f64,
}

impl VoiceShape {
    const NEUTRAL: VoiceShape = VoiceShape {
        range_factor: 1.0,
        tremor: 0.0,
        centralization: 0.0,
    };

    fn vowel(&self, v: [f64; 3]) -> [f64; 3] {
        [0, 1, 2].map(|i| v[i] + self.centralization * (SCHWA[i] - v[i]))
    }
}

/// Layout and prosody of one task.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TaskStyle {
    pub duration_s: f64,
    /// Patient speech time over recording time in the ON state.
    pub speech_ratio: f64,
    pub phrase_s: (f64, f64),
    /// Peak F0 excursion in semitones.
    pub f0_range_st: f64,
    pub rate_factor: f64,
    pub sustained: bool,
}

pub fn task_style(task: TaskKind) -> TaskStyle {
    let style = |duration_s, speech_ratio, phrase_s, f0_range_st, rate_factor, sustained| TaskStyle {
        duration_s,
        speech_ratio,
        phrase_s,
        f0_range_st,
        rate_factor,
        sustained,
    };
    match task {
        TaskKind::SustainedVowel => style(6.0, 0.75, (4.5, 4.5), 1.5, 1.0, true),
        TaskKind::MaxPhonation => style(9.0, 0.8, (7.2, 7.2), 1.5, 1.0, true),
        TaskKind::Diadochokinesis => style(9.0, 0.7, (1.5, 3.0), 1.5, 1.4, false),
        TaskKind::ReadingWords => style(10.0, 0.5, (0.5, 0.9), 3.0, 1.0, false),
        TaskKind::ReadingSentences => style(12.0, 0.7, (1.5, 3.0), 4.0, 1.0, false),
        TaskKind::ReadingText => style(16.0, 0.75, (2.0, 4.0), 4.0, 1.0, false),
        TaskKind::ProsodicSentences => style(12.0, 0.7, (1.5, 3.0), 7.0, 0.9, false),
        TaskKind::Storytelling => style(22.0, 0.7, (2.0, 4.0), 6.0, 1.0, false),
        TaskKind::Conversation => style(20.0, 0.65, (1.0, 3.5), 6.0, 1.0, false),
    }
}

/// Speech ratio the layout realizes for a task and state, before therapist turns.
pub fn configured_speech_ratio(task: TaskKind, state: MedState, effect: &StateEffect) -> f64 {
    let r = task_style(task).speech_ratio;
    r / (r + (1.0 - r) * effect.pause_factor(state))
}

/// Sample interval `[start, end)` spoken by one party.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpeechInterval {
    pub start: usize,
    pub end: usize,
    pub speaker: SpeakerLabel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub state: MedState,
    pub num_samples: usize,
    /// Sorted, non-overlapping speech intervals.
    pub speech: Vec<SpeechInterval>,
}

impl GroundTruth {
    /// Frame-level masks: a frame takes the label of the sample at its centre.
    pub fn to_segments(&self) -> SegmentList {
        let len = (FRAME_MS * FS / 1000.0) as usize;
        let shift = (SHIFT_MS * FS / 1000.0) as usize;
        let n = frame_count(self.num_samples, len, shift).unwrap_or(0);
        let mut labels = vec![(SnsLabel::NonSpeech, SpeakerLabel::Unassigned); n];
        for iv in &self.speech {
            for (t, l) in labels.iter_mut().enumerate() {
                let centre = t * shift + len / 2;
                if centre >= iv.start && centre < iv.end {
                    *l = (SnsLabel::Speech, iv.speaker);
                }
            }
        }
        SegmentList::from_frame_labels(&labels, SHIFT_MS)
    }

    pub fn speech_fraction(&self, speaker: Option<SpeakerLabel>) -> f64 {
        let total: usize = self
            .speech
            .iter()
            .filter(|iv| speaker.is_none_or(|s| iv.speaker == s))
            .map(|iv| iv.end - iv.start)
            .sum();
        total as f64 / self.num_samples as f64
    }
}

/// Two-pole resonator with unity DC gain.
#[derive(Default, Clone, Copy)]
struct Resonator {
    a: f64,
    b: f64,
    c: f64,
    y1: f64,
    y2: f64,
}

impl Resonator {
    fn set(&mut self, freq: f64, bw: f64) {
        let t = 1.0 / FS;
        self.c = -(-2.0 * PI * bw * t).exp();
        self.b = 2.0 * (-PI * bw * t).exp() * (2.0 * PI * freq * t).cos();
        self.a = 1.0 - self.b - self.c;
    }

    fn step(&mut self, x: f64) -> f64 {
        let y = self.a * x + self.b * self.y1 + self.c * self.y2;
        self.y2 = self.y1;
        self.y1 = y;
        y
    }
}

/// Rosenberg glottal flow over one cycle, phase in [0, 1).
fn glottal_flow(phase: f64) -> f64 {
    if phase < 0.4 {
        0.5 * (1.0 - (PI * phase / 0.4).cos())
    } else if phase < 0.6 {
        (PI * (phase - 0.4) / 0.4).cos()
    } else {
        0.0
    }
}

fn smoothing_coef(tau_s: f64) -> f64 {
    1.0 - (-1.0 / (tau_s * FS)).exp()
}

/// Per-sample control tracks for one phrase.
struct PhraseTracks {
    f0: Vec<f64>,
    amp: Vec<f64>,
    formants: Vec<[f64; 3]>,
}

fn phrase_tracks(
    profile: &SpeakerProfile,
    style: &TaskStyle,
    shape: &VoiceShape,
    len: usize,
    rng: &mut ChaCha8Rng,
) -> PhraseTracks {
    let scale = profile.formant_scale();
    let range = style.f0_range_st * shape.range_factor;
    let tremor_phase = rng.random_range(0.0..2.0 * PI);
    let tremor = |n: usize| shape.tremor * (2.0 * PI * TREMOR_HZ * n as f64 / FS + tremor_phase).sin();
    let mut f0 = Vec::with_capacity(len);
    let mut amp = Vec::with_capacity(len);
    let mut formants = Vec::with_capacity(len);
    let slow = smoothing_coef(0.25);
    let mut drift = 0.0;
    let mut drift_target = 0.0;

    if style.sustained {
        let target = shape.vowel(VOWELS[0]);
        let mut level = 0.0;
        let mut level_target = 0.0;
        for n in 0..len {
            if n % 1600 == 0 {
                drift_target = range * rng.random_range(-1.0..1.0);
                level_target = rng.random_range(-1.5..1.5);
            }
            drift += slow * (drift_target - drift);
            level += slow * (level_target - level);
            let t = tremor(n);
            f0.push(profile.base_f0 * 2f64.powf(drift / 12.0) * (1.0 + t));
            amp.push(10f64.powf(level / 20.0) * (1.0 + 4.0 * t));
            formants.push([0, 1, 2].map(|i| target[i] * scale[i]));
        }
        return PhraseTracks { f0, amp, formants };
    }

    let rate = profile.syllable_rate * style.rate_factor;
    let mut syllables = Vec::new();
    let mut pos = 0usize;
    while pos < len {
        let dur = ((FS / rate) * rng.random_range(0.7..1.3)) as usize;
        let vowel = shape.vowel(VOWELS[rng.random_range(0..VOWELS.len())]);
        let accent = range * rng.random_range(-0.5..1.0);
        let loud = rng.random_range(-3.0..2.0);
        syllables.push((pos, dur.max(400), vowel, accent, loud));
        pos += dur.max(400);
    }
    let fast = smoothing_coef(0.03);
    let form = smoothing_coef(0.02);
    let mut pitch = syllables[0].3;
    let mut cur = syllables[0].2.map(|f| f);
    let declination = -0.3 * range;
    for (start, dur, vowel, accent, loud) in syllables {
        for k in 0..dur {
            let n = start + k;
            if n >= len {
                break;
            }
            if n % 1600 == 0 {
                drift_target = 0.3 * range * rng.random_range(-1.0..1.0);
            }
            drift += slow * (drift_target - drift);
            pitch += fast * (accent - pitch);
            let progress = n as f64 / len as f64;
            let t = tremor(n);
            f0.push(profile.base_f0 * 2f64.powf((pitch + drift + declination * progress) / 12.0) * (1.0 + t));
            let tau = k as f64 / dur as f64;
            let env = 0.25 + 0.75 * (PI * tau).sin();
            amp.push(env * 10f64.powf(loud / 20.0) * (1.0 + 4.0 * t));
            for i in 0..3 {
                cur[i] += form * (vowel[i] - cur[i]);
            }
            formants.push([0, 1, 2].map(|i| cur[i] * scale[i]));
        }
    }
    PhraseTracks { f0, amp, formants }
}

/// Renders voiced speech driven by the given tracks.
fn render_voice(tracks: &PhraseTracks, jitter: f64, shimmer: f64, breathiness: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let len = tracks.f0.len();
    let mut out = Vec::with_capacity(len);
    let mut res = [Resonator::default(); 4];
    let mut phase = 0.0;
    let mut cycle_f0 = tracks.f0[0];
    let mut cycle_amp = 1.0;
    let mut prev_flow = 0.0;
    let ramp = (EDGE_RAMP_S * FS) as usize;
    for n in 0..len {
        if n % 32 == 0 {
            let f = tracks.formants[n];
            for i in 0..3 {
                res[i].set(f[i], BANDWIDTHS[i]);
            }
            res[3].set(F4_HZ * f[2] / VOWELS[0][2], BANDWIDTHS[3]);
        }
        phase += cycle_f0 / FS;
        if phase >= 1.0 {
            phase -= 1.0;
            let z: f64 = StandardNormal.sample(rng);
            cycle_f0 = tracks.f0[n] * (1.0 + jitter * z).clamp(0.7, 1.3);
            let z: f64 = StandardNormal.sample(rng);
            cycle_amp = (1.0 + shimmer * z).max(0.1);
        }
        let flow = cycle_amp * glottal_flow(phase);
        let noise: f64 = StandardNormal.sample(rng);
        let mut x = (flow - prev_flow) + breathiness * 0.05 * noise * (0.3 + flow);
        prev_flow = flow;
        let edge = (n.min(len - 1 - n) as f64 / ramp as f64).min(1.0);
        x *= tracks.amp[n] * 0.5 * (1.0 - (PI * edge).cos());
        for r in &mut res {
            x = r.step(x);
        }
        out.push(x);
    }
    out
}

fn rms(x: &[f64]) -> f64 {
    (x.iter().map(|v| v * v).sum::<f64>() / x.len().max(1) as f64).sqrt()
}

fn db_to_amp(db: f64) -> f64 {
    10f64.powf(db / 20.0)
}

/// Splits `total` into `parts` random shares, each at least `floor`.
fn random_shares(total: f64, parts: usize, floor: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let w: Vec<f64> = (0..parts).map(|_| rng.random_range(0.5..1.5)).collect();
    let ws: f64 = w.iter().sum();
    let spare = (total - floor * parts as f64).max(0.0);
    w.iter().map(|v| floor + spare * v / ws).collect()
}

/// Background noise level used for every recording of a speaker.
pub fn noise_rms(profile: &SpeakerProfile, snr_db: f64) -> f64 {
    db_to_amp(profile.base_intensity - snr_db)
}

/// One patient recording without therapist turns.
pub fn synth_utterance(
    profile: &SpeakerProfile,
    state: MedState,
    task: TaskKind,
    effect: &StateEffect,
    snr_db: f64,
    seed: u64,
) -> Result<(AudioClip, GroundTruth)> {
    profile.validate()?;
    let style = task_style(task);
    let mut rng = rng_from(seed);
    let duration = style.duration_s * rng.random_range(0.9..1.1);
    let speech_total = duration * style.speech_ratio;
    let pause_total = duration - speech_total;

    let phrases: Vec<f64> = if style.sustained {
        vec![speech_total]
    } else {
        let mut v = Vec::new();
        let mut left = speech_total;
        while left > 1e-9 {
            let d = rng.random_range(style.phrase_s.0..=style.phrase_s.1).min(left);
            if left - d < style.phrase_s.0 * 0.5 {
                v.push(left);
                break;
            }
            v.push(d);
            left -= d;
        }
        v
    };
    let pauses: Vec<f64> = random_shares(pause_total, phrases.len() + 1, MIN_PAUSE_S, &mut rng)
        .into_iter()
        .map(|p| p * effect.pause_factor(state))
        .collect();

    let jitter = profile.base_jitter + effect.jitter_increase(state);
    let shimmer = profile.base_shimmer + effect.shimmer_increase(state);
    let shape = effect.voice(state);
    let breathiness = profile.breathiness + effect.breathiness_increase(state);
    let mut samples = Vec::new();
    let mut speech = Vec::new();
    for (i, phrase) in phrases.iter().enumerate() {
        samples.resize(samples.len() + (pauses[i] * FS) as usize, 0.0);
        let len = (phrase * FS) as usize;
        let tracks = phrase_tracks(profile, &style, &shape, len, &mut rng);
        let start = samples.len();
        samples.extend(render_voice(&tracks, jitter, shimmer, breathiness, &mut rng));
        speech.push(SpeechInterval {
            start,
            end: samples.len(),
            speaker: SpeakerLabel::Patient,
        });
    }
    samples.resize(samples.len() + (pauses[phrases.len()] * FS) as usize, 0.0);

    let active: Vec<f64> = speech
        .iter()
        .flat_map(|iv| samples[iv.start..iv.end].iter().copied())
        .collect();
    let level = profile.base_intensity + effect.intensity_offset_db(state) + rng.random_range(-0.5..0.5);
    let gain = db_to_amp(level) / rms(&active);
    let noise = noise_rms(profile, snr_db);
    for s in &mut samples {
        let z: f64 = StandardNormal.sample(&mut rng);
        *s = (*s * gain + noise * z).clamp(-1.0, 1.0);
    }
    let truth = GroundTruth {
        state,
        num_samples: samples.len(),
        speech,
    };
    let meta = RecordingMeta::new(profile.speaker_id.clone(), task, state);
    Ok((AudioClip::new(samples, CANONICAL_RATE).with_meta(meta), truth))
}

/// Therapist turns to splice into a recording.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TurnSpec {
    /// (insertion point in the input recording, turn duration), both in seconds.
    pub turns: Vec<(f64, f64)>,
    pub noise_rms: f64,
    pub seed: u64,
}

/// Splices therapist speech into non-speech regions of a recording. Each turn
/// is inserted at its position in the input timeline; later audio shifts right.
pub fn inject_therapist(
    clip: &AudioClip,
    truth: &GroundTruth,
    therapist: &SpeakerProfile,
    spec: &TurnSpec,
) -> Result<(AudioClip, GroundTruth)> {
    if spec.turns.is_empty() {
        return Ok((clip.clone(), truth.clone()));
    }
    therapist.validate()?;
    let mut turns: Vec<(usize, f64)> = spec.turns.iter().map(|&(at, d)| ((at * FS) as usize, d)).collect();
    turns.sort_by(|a, b| a.0.cmp(&b.0));
    for w in turns.windows(2) {
        if w[0].0 == w[1].0 {
            return Err(Error::InvalidInput("overlapping therapist turns".into()));
        }
    }
    for &(at, dur) in &turns {
        if dur <= 0.0 || at > clip.samples.len() {
            return Err(Error::InvalidInput("therapist turn outside the recording".into()));
        }
        if truth.speech.iter().any(|iv| at > iv.start && at < iv.end) {
            return Err(Error::InvalidInput(format!(
                "therapist turn at sample {at} falls inside speech"
            )));
        }
    }

    let style = task_style(TaskKind::Conversation);
    let mut rng = rng_from(spec.seed);
    let mut out = Vec::with_capacity(clip.samples.len());
    let mut speech: Vec<SpeechInterval> = Vec::new();
    let mut cursor = 0usize;
    let mut shift = 0usize;
    let mut pending = truth.speech.iter().peekable();
    for &(at, dur) in &turns {
        out.extend_from_slice(&clip.samples[cursor..at]);
        while let Some(iv) = pending.next_if(|iv| iv.end <= at) {
            speech.push(SpeechInterval {
                start: iv.start + shift,
                end: iv.end + shift,
                speaker: iv.speaker,
            });
        }
        let len = (dur * FS) as usize;
        let tracks = phrase_tracks(therapist, &style, &VoiceShape::NEUTRAL, len, &mut rng);
        let voice = render_voice(
            &tracks,
            therapist.base_jitter,
            therapist.base_shimmer,
            therapist.breathiness,
            &mut rng,
        );
        let gain = db_to_amp(therapist.base_intensity) / rms(&voice);
        let start = out.len();
        for v in voice {
            let z: f64 = StandardNormal.sample(&mut rng);
            out.push((v * gain + spec.noise_rms * z).clamp(-1.0, 1.0));
        }
        speech.push(SpeechInterval {
            start,
            end: out.len(),
            speaker: SpeakerLabel::Therapist,
        });
        shift += len;
        cursor = at;
    }
    out.extend_from_slice(&clip.samples[cursor..]);
    for iv in pending {
        speech.push(SpeechInterval {
            start: iv.start + shift,
            end: iv.end + shift,
            speaker: iv.speaker,
        });
    }
    let truth = GroundTruth {
        state: truth.state,
        num_samples: out.len(),
        speech,
    };
    let mut clip_out = AudioClip::new(out, clip.sample_rate);
    clip_out.meta = clip.meta.clone();
    Ok((clip_out, truth))
}

/// Midpoints of the pauses of a recording, in seconds, longest pause first.
fn pause_midpoints(truth: &GroundTruth) -> Vec<f64> {
    let mut bounds = vec![0usize];
    for iv in &truth.speech {
        bounds.push(iv.start);
        bounds.push(iv.end);
    }
    bounds.push(truth.num_samples);
    let mut pauses: Vec<(usize, usize)> = bounds.chunks(2).map(|c| (c[0], c[1])).collect();
    pauses.sort_by(|a, b| (b.1 - b.0).cmp(&(a.1 - a.0)).then(a.0.cmp(&b.0)));
    pauses.iter().map(|(s, e)| (s + e) as f64 / 2.0 / FS).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorpusSpec {
    pub num_speakers: usize,
    pub num_control: usize,
    pub delta: f64,
    pub snr_db: f64,
    pub seed: u64,
    /// Therapist voice close to the patient ranges.
    pub hard_mode: bool,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        Self {
            num_speakers: 20,
            num_control: 6,
            delta: 1.0,
            snr_db: 20.0,
            seed: 7,
            hard_mode: false,
        }
    }
}

/// Tasks recorded by control speakers, who have no medication state.
pub const CONTROL_TASKS: [TaskKind; 9] = TaskKind::ALL;

/// One row of a corpus manifest.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GeneratedRecording {
    /// Relative to the corpus root.
    pub path: PathBuf,
    pub speaker_id: String,
    pub task: TaskKind,
    pub state: MedState,
}

impl GeneratedRecording {
    /// Ground-truth segment file stored next to the audio.
    pub fn truth_path(&self) -> PathBuf {
        truth_path_for(&self.path)
    }
}

pub fn truth_path_for(wav: &Path) -> PathBuf {
    wav.with_extension("truth.tsv")
}

pub fn patient_id(i: usize) -> String {
    format!("P{:03}", i + 1)
}

pub fn control_id(i: usize) -> String {
    format!("C{:03}", i + 1)
}

fn therapist_turns(task: TaskKind, control: bool, rng: &mut ChaCha8Rng) -> usize {
    match (control, task) {
        (true, _) => 4,
        (false, TaskKind::Conversation) => 3,
        (false, TaskKind::Storytelling | TaskKind::ReadingText) => 2,
        _ => rng.random_range(1..=2),
    }
}

/// Renders one recording with its therapist turns.
pub fn synth_recording(
    spec: &CorpusSpec,
    speaker_id: &str,
    task: TaskKind,
    state: MedState,
) -> Result<(AudioClip, GroundTruth)> {
    let effect = StateEffect::new(spec.delta)?;
    let profile = SpeakerProfile::random(speaker_id, spec.seed);
    let item = format!("{speaker_id}/{}/{}", task.code(), state.code());
    let seed = derive_seed(spec.seed, "synth", &item);
    let (clip, truth) = synth_utterance(&profile, state, task, &effect, spec.snr_db, seed)?;
    let mut rng = rng_from(derive_seed(spec.seed, "turns", &item));
    let count = therapist_turns(task, state == MedState::Unknown, &mut rng);
    let turns = pause_midpoints(&truth)
        .into_iter()
        .take(count)
        .map(|at| (at, rng.random_range(1.2..2.8)))
        .collect();
    let turn_spec = TurnSpec {
        turns,
        noise_rms: noise_rms(&profile, spec.snr_db),
        seed: derive_seed(spec.seed, "therapist", &item),
    };
    inject_therapist(&clip, &truth, &SpeakerProfile::therapist(spec.hard_mode), &turn_spec)
}

/// Patient and control recordings of a corpus, in manifest order.
pub fn corpus_plan(spec: &CorpusSpec) -> (Vec<GeneratedRecording>, Vec<GeneratedRecording>) {
    let entry = |speaker: String, task: TaskKind, state: MedState| GeneratedRecording {
        path: PathBuf::from("audio")
            .join(&speaker)
            .join(format!("{speaker}_{}_{}.wav", task.code(), state.code())),
        speaker_id: speaker,
        task,
        state,
    };
    let mut patients = Vec::new();
    for i in 0..spec.num_speakers {
        for task in TaskKind::ALL {
            for state in [MedState::On, MedState::Off] {
                patients.push(entry(patient_id(i), task, state));
            }
        }
    }
    let mut controls = Vec::new();
    for i in 0..spec.num_control {
        for task in CONTROL_TASKS {
            controls.push(entry(control_id(i), task, MedState::Unknown));
        }
    }
    (patients, controls)
}

pub const MANIFEST_FILE: &str = "manifest.csv";
pub const CONTROL_MANIFEST_FILE: &str = "control_manifest.csv";
pub const SPEC_FILE: &str = "corpus_spec.json";

pub fn manifest_csv(entries: &[GeneratedRecording]) -> String {
    let mut out = String::from("path,speaker_id,task,state\n");
    for e in entries {
        out.push_str(&format!(
            "{},{},{},{}\n",
            e.path.display(),
            e.speaker_id,
            e.task.code(),
            e.state.code()
        ));
    }
    out
}

/// Writes all recordings, truth files, both manifests and the spec echo under `root`.
pub fn generate_corpus(spec: &CorpusSpec, root: &Path) -> Result<(Vec<GeneratedRecording>, Vec<GeneratedRecording>)> {
    StateEffect::new(spec.delta)?;
    if spec.num_speakers == 0 {
        return Err(Error::InvalidInput("corpus needs at least one speaker".into()));
    }
    let (patients, controls) = corpus_plan(spec);
    let all: Vec<&GeneratedRecording> = patients.iter().chain(&controls).collect();
    all.par_iter().try_for_each(|rec| -> Result<()> {
        let (clip, truth) = synth_recording(spec, &rec.speaker_id, rec.task, rec.state)?;
        let wav = root.join(&rec.path);
        let dir = wav.parent().expect("recording path has a parent");
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_wav(&wav, &clip)?;
        truth.to_segments().write(root.join(rec.truth_path()))
    })?;
    let write = |name: &str, text: String| {
        let p = root.join(name);
        std::fs::write(&p, text).map_err(|e| Error::io(&p, e))
    };
    write(MANIFEST_FILE, manifest_csv(&patients))?;
    write(CONTROL_MANIFEST_FILE, manifest_csv(&controls))?;
    let echo = serde_json::to_string_pretty(spec).map_err(|e| Error::parse("corpus spec", e.to_string()))?;
    write(SPEC_FILE, echo)?;
    Ok((patients, controls))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::signalio::frame_log_energies;

    fn profile() -> SpeakerProfile {
        SpeakerProfile::random("P001", 3)
    }

    fn ks_statistic(a: &[f64], b: &[f64]) -> f64 {
        let mut a = a.to_vec();
        let mut b = b.to_vec();
        a.sort_by(f64::total_cmp);
        b.sort_by(f64::total_cmp);
        let (mut i, mut j, mut d) = (0, 0, 0.0f64);
        while i < a.len() && j < b.len() {
            let x = a[i].min(b[j]);
            while i < a.len() && a[i] <= x {
                i += 1;
            }
            while j < b.len() && b[j] <= x {
                j += 1;
            }
            d = d.max((i as f64 / a.len() as f64 - j as f64 / b.len() as f64).abs());
        }
        d
    }

    #[test]
    fn null_effect_states_match() {
        let effect = StateEffect::new(0.0).unwrap();
        let (on, _) = synth_utterance(&profile(), MedState::On, TaskKind::ReadingText, &effect, 20.0, 5).unwrap();
        let (off, _) = synth_utterance(&profile(), MedState::Off, TaskKind::ReadingText, &effect, 20.0, 5).unwrap();
        let a = frame_log_energies(&on).unwrap();
        let b = frame_log_energies(&off).unwrap();
        let n = (a.len() * b.len()) as f64 / (a.len() + b.len()) as f64;
        // two-sample KS critical value at the 1% level
        let critical = 1.628 / n.sqrt();
        assert!(ks_statistic(&a, &b) < critical);
    }

    /// Generated vowel F0 in semitones, split into a 200 ms moving average and
    /// the residual around it; returns the SD of each.
    fn vowel_f0_spread(state: MedState) -> (f64, f64) {
        let effect = StateEffect::new(1.0).unwrap();
        let style = task_style(TaskKind::SustainedVowel);
        let mut rng = crate::seed::rng_from(9);
        let tracks = phrase_tracks(&profile(), &style, &effect.voice(state), 4 * FS as usize, &mut rng);
        let st: Vec<f64> = tracks.f0.iter().map(|f| 12.0 * f.log2()).collect();
        let w = (0.2 * FS) as usize;
        let mut smooth = Vec::new();
        let mut resid = Vec::new();
        let mut sum: f64 = st[..w].iter().sum();
        for i in w..st.len() {
            let m = sum / w as f64;
            smooth.push(m);
            resid.push(st[i - w / 2] - m);
            sum += st[i] - st[i - w];
        }
        let sd = |v: &[f64]| {
            let m = v.iter().sum::<f64>() / v.len() as f64;
            (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / v.len() as f64).sqrt()
        };
        (sd(&smooth), sd(&resid))
    }

    #[test]
    fn off_vowel_drifts_less_and_trembles_more() {
        let (on_drift, on_fast) = vowel_f0_spread(MedState::On);
        let (off_drift, off_fast) = vowel_f0_spread(MedState::Off);
        assert!(off_drift < on_drift, "drift on {on_drift} off {off_drift}");
        assert!(off_fast > 5.0 * on_fast, "fast on {on_fast} off {off_fast}");
    }

    #[test]
    fn speech_ratio_matches_layout() {
        let effect = StateEffect::new(1.0).unwrap();
        for task in TaskKind::ALL {
            for state in [MedState::On, MedState::Off] {
                let (_, truth) = synth_utterance(&profile(), state, task, &effect, 20.0, 11).unwrap();
                let got = truth.to_segments().speech_frames().len() as f64 / truth.to_segments().num_frames() as f64;
                let want = configured_speech_ratio(task, state, &effect);
                assert!((got - want).abs() < 0.05, "{task} {state:?}: {got} vs {want}");
            }
        }
    }

    #[test]
    fn empty_turns_are_identity() {
        let effect = StateEffect::new(1.0).unwrap();
        let (clip, truth) =
            synth_utterance(&profile(), MedState::On, TaskKind::ReadingWords, &effect, 20.0, 1).unwrap();
        let spec = TurnSpec {
            turns: vec![],
            noise_rms: 0.0,
            seed: 0,
        };
        let (c2, t2) = inject_therapist(&clip, &truth, &SpeakerProfile::therapist(false), &spec).unwrap();
        assert_eq!(c2, clip);
        assert_eq!(t2, truth);
    }

    #[test]
    fn injected_turns_are_masked() {
        let effect = StateEffect::new(1.0).unwrap();
        let (clip, truth) =
            synth_utterance(&profile(), MedState::On, TaskKind::Storytelling, &effect, 20.0, 2).unwrap();
        let mids = pause_midpoints(&truth);
        let spec = TurnSpec {
            turns: vec![(mids[0], 2.0)],
            noise_rms: 0.001,
            seed: 3,
        };
        let (out, t2) = inject_therapist(&clip, &truth, &SpeakerProfile::therapist(false), &spec).unwrap();
        assert_eq!(out.samples.len(), clip.samples.len() + 32000);
        let segs = t2.to_segments();
        let therapist = segs.frames_of(SnsLabel::Speech, SpeakerLabel::Therapist);
        assert!((therapist.len() as i64 - 200).abs() <= 1, "{}", therapist.len());
        let start = (mids[0] * 100.0) as i64;
        assert!((therapist[0] as i64 - start).abs() <= 2);
        assert_eq!(t2.speech.len(), truth.speech.len() + 1);

        let durations = [1.3, 2.2, 0.7];
        let spec = TurnSpec {
            turns: mids.iter().take(3).copied().zip(durations).collect(),
            noise_rms: 0.001,
            seed: 4,
        };
        let (_, t3) = inject_therapist(&clip, &truth, &SpeakerProfile::therapist(false), &spec).unwrap();
        let frames = t3
            .to_segments()
            .frames_of(SnsLabel::Speech, SpeakerLabel::Therapist)
            .len() as f64;
        assert!((frames - 420.0).abs() <= 3.0);

        let bad = TurnSpec {
            turns: vec![(mids[0], 1.0), (mids[0], 1.0)],
            noise_rms: 0.0,
            seed: 0,
        };
        assert!(inject_therapist(&clip, &truth, &SpeakerProfile::therapist(false), &bad).is_err());
        let inside = (truth.speech[0].start + 100) as f64 / FS;
        let bad = TurnSpec {
            turns: vec![(inside, 1.0)],
            noise_rms: 0.0,
            seed: 0,
        };
        assert!(inject_therapist(&clip, &truth, &SpeakerProfile::therapist(false), &bad).is_err());
    }

    #[test]
    fn plan_sizes() {
        let spec = CorpusSpec {
            num_speakers: 20,
            ..Default::default()
        };
        assert_eq!(corpus_plan(&spec).0.len(), 360);
        let spec = CorpusSpec {
            num_speakers: 74,
            ..Default::default()
        };
        assert_eq!(corpus_plan(&spec).0.len(), 1332);
    }

    #[test]
    fn generation_is_deterministic() {
        let spec = CorpusSpec {
            num_speakers: 1,
            num_control: 1,
            ..Default::default()
        };
        let a = synth_recording(&spec, "P001", TaskKind::Diadochokinesis, MedState::Off).unwrap();
        let b = synth_recording(&spec, "P001", TaskKind::Diadochokinesis, MedState::Off).unwrap();
        assert_eq!(a, b);
        assert!(a.0.validate().is_ok());
        let segs = a.1.to_segments();
        assert!(segs.check_invariants().is_ok());
        assert!(!segs.frames_of(SnsLabel::Speech, SpeakerLabel::Therapist).is_empty());
    }

    #[test]
    fn profile_bounds() {
        for i in 0..50 {
            assert!(SpeakerProfile::random(&patient_id(i), 1).validate().is_ok());
        }
        let mut p = profile();
        p.base_f0 = 40.0;
        assert!(p.validate().is_err());
        assert!(StateEffect::new(1.5).is_err());
    }
}
