//! Frame-level acoustic-prosodic descriptors modelled on the eGeMAPS LLD set.
//!
//! Every descriptor is produced at a 10 ms frame period. Frame `t` is centred at
//! `t * 10 ms + 30 ms`; pitch-related descriptors use a 60 ms window around that
//! centre and spectral descriptors a 20 ms window. In unvoiced frames every
//! pitch-dependent descriptor is 0, so a zero log-F0 doubles as the voicing flag.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::mfcc::{MfccConfig, MfccExtractor};
use super::spectrum::{MelFilterbank, PowerSpectrum};
use super::{FeatureKind, FeatureMatrix};
use crate::error::{Error, Result};
use crate::signalio::{ms_to_samples, window_coefficients, AudioClip, WindowKind};

const DB_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Lld {
    LogF0,
    Jitter,
    Shimmer,
    Hnr,
    Loudness,
    AlphaRatio,
    Hammarberg,
    Slope0To500,
    Slope500To1500,
    SpectralFlux,
    F1Frequency,
    F2Frequency,
    F3Frequency,
    F1Bandwidth,
    F2Bandwidth,
    F3Bandwidth,
    F1Amplitude,
    F2Amplitude,
    F3Amplitude,
    Mfcc1,
    Mfcc2,
    Mfcc3,
    Mfcc4,
    H1MinusH2,
    H1MinusA3,
}

impl Lld {
    pub fn is_pitch_dependent(self) -> bool {
        !matches!(
            self,
            Lld::Loudness
                | Lld::AlphaRatio
                | Lld::Hammarberg
                | Lld::Slope0To500
                | Lld::Slope500To1500
                | Lld::SpectralFlux
                | Lld::Mfcc1
                | Lld::Mfcc2
                | Lld::Mfcc3
                | Lld::Mfcc4
        )
    }
}

/// The 23-column default layout: the full descriptor list minus the F2 and F3
/// bandwidths.
pub const EGEMAPS_DEFAULT_LLDS: [Lld; 23] = [
    Lld::LogF0,
    Lld::Jitter,
    Lld::Shimmer,
    Lld::Hnr,
    Lld::Loudness,
    Lld::AlphaRatio,
    Lld::Hammarberg,
    Lld::Slope0To500,
    Lld::Slope500To1500,
    Lld::SpectralFlux,
    Lld::F1Frequency,
    Lld::F2Frequency,
    Lld::F3Frequency,
    Lld::F1Bandwidth,
    Lld::F1Amplitude,
    Lld::F2Amplitude,
    Lld::F3Amplitude,
    Lld::Mfcc1,
    Lld::Mfcc2,
    Lld::Mfcc3,
    Lld::Mfcc4,
    Lld::H1MinusH2,
    Lld::H1MinusA3,
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EgemapsConfig {
    pub llds: Vec<Lld>,
    pub shift_ms: f64,
    pub pitch_window_ms: f64,
    pub spectral_window_ms: f64,
    pub f0_min_hz: f64,
    pub f0_max_hz: f64,
    /// Minimum normalized autocorrelation peak for a frame to count as voiced.
    pub voicing_threshold: f64,
    /// Frames whose RMS is below this are unvoiced regardless of periodicity.
    pub silence_rms: f64,
    pub lpc_order: usize,
}

impl Default for EgemapsConfig {
    fn default() -> Self {
        Self {
            llds: EGEMAPS_DEFAULT_LLDS.to_vec(),
            shift_ms: 10.0,
            pitch_window_ms: 60.0,
            spectral_window_ms: 20.0,
            f0_min_hz: 55.0,
            f0_max_hz: 400.0,
            voicing_threshold: 0.5,
            silence_rms: 1e-4,
            lpc_order: 18,
        }
    }
}

/// Pitch analysis of one 60 ms window.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct PitchFrame {
    pub voiced: bool,
    pub f0_hz: f64,
    /// Normalized autocorrelation at the pitch lag.
    pub periodicity: f64,
    pub jitter: f64,
    pub shimmer: f64,
}

/// Autocorrelation pitch estimate for one window (mean removed by the caller).
fn analyse_pitch(x: &[f64], sample_rate: f64, cfg: &EgemapsConfig) -> PitchFrame {
    let n = x.len();
    let rms = (x.iter().map(|v| v * v).sum::<f64>() / n as f64).sqrt();
    if rms < cfg.silence_rms {
        return PitchFrame::default();
    }
    let min_lag = (sample_rate / cfg.f0_max_hz).floor().max(2.0) as usize;
    let max_lag = ((sample_rate / cfg.f0_min_hz).ceil() as usize).min(n / 2);
    if max_lag <= min_lag + 2 {
        return PitchFrame::default();
    }
    // normalized autocorrelation for lags min_lag-1 ..= max_lag+1
    let lo = min_lag - 1;
    let hi = max_lag + 1;
    let mut prefix = vec![0.0; n + 1];
    for i in 0..n {
        prefix[i + 1] = prefix[i] + x[i] * x[i];
    }
    let r: Vec<f64> = (lo..=hi)
        .map(|lag| {
            let m = n - lag;
            let dot: f64 = x[..m].iter().zip(&x[lag..]).map(|(a, b)| a * b).sum();
            let e0 = prefix[m];
            let e1 = prefix[n] - prefix[lag];
            let denom = (e0 * e1).sqrt();
            if denom > 0.0 {
                dot / denom
            } else {
                0.0
            }
        })
        .collect();
    let at = |lag: usize| r[lag - lo];
    let peaks: Vec<usize> = (min_lag..=max_lag)
        .filter(|&l| at(l) > at(l - 1) && at(l) >= at(l + 1))
        .collect();
    let Some(best) = peaks.iter().map(|&l| at(l)).reduce(f64::max) else {
        return PitchFrame::default();
    };
    if best < cfg.voicing_threshold {
        return PitchFrame::default();
    }
    // shortest lag close to the best peak avoids octave-down errors
    let lag = peaks
        .into_iter()
        .find(|&l| at(l) >= 0.9 * best)
        .expect("best peak is in the list");
    let (y0, y1, y2) = (at(lag - 1), at(lag), at(lag + 1));
    let curvature = y0 - 2.0 * y1 + y2;
    let offset = if curvature < 0.0 {
        (0.5 * (y0 - y2) / curvature).clamp(-0.5, 0.5)
    } else {
        0.0
    };
    let period = lag as f64 + offset;
    let (jitter, shimmer) = cycle_perturbation(x, period);
    PitchFrame {
        voiced: true,
        f0_hz: sample_rate / period,
        periodicity: y1.clamp(0.0, 1.0),
        jitter,
        shimmer,
    }
}

/// Local jitter and shimmer from successive cycle peaks: mean absolute
/// difference of consecutive periods (amplitudes) over their mean.
fn cycle_perturbation(x: &[f64], period: f64) -> (f64, f64) {
    let n = x.len();
    let first_end = (period.ceil() as usize).min(n);
    let Some(mut pos) = argmax(&x[..first_end]) else {
        return (0.0, 0.0);
    };
    let mut peaks = vec![refine_peak(x, pos)];
    loop {
        let lo = pos + (0.8 * period) as usize;
        let hi = (pos + (1.2 * period).ceil() as usize).min(n - 1);
        if lo >= hi {
            break;
        }
        let Some(rel) = argmax(&x[lo..=hi]) else { break };
        pos = lo + rel;
        peaks.push(refine_peak(x, pos));
    }
    if peaks.len() < 3 {
        return (0.0, 0.0);
    }
    let periods: Vec<f64> = peaks.windows(2).map(|w| w[1].0 - w[0].0).collect();
    let amps: Vec<f64> = peaks.iter().map(|p| p.1).collect();
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let mean_abs_diff = |v: &[f64]| v.windows(2).map(|w| (w[1] - w[0]).abs()).sum::<f64>() / (v.len() - 1) as f64;
    let jitter = mean_abs_diff(&periods) / mean(&periods);
    let mean_amp = mean(&amps);
    let shimmer = if mean_amp > 0.0 {
        mean_abs_diff(&amps) / mean_amp
    } else {
        0.0
    };
    (jitter, shimmer)
}

fn argmax(x: &[f64]) -> Option<usize> {
    x.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).map(|(i, _)| i)
}

/// Parabolic refinement of a sample peak: (position, height).
fn refine_peak(x: &[f64], i: usize) -> (f64, f64) {
    if i == 0 || i + 1 >= x.len() {
        return (i as f64, x[i]);
    }
    let (a, b, c) = (x[i - 1], x[i], x[i + 1]);
    let curvature = a - 2.0 * b + c;
    if curvature >= 0.0 {
        return (i as f64, b);
    }
    let off = (0.5 * (a - c) / curvature).clamp(-0.5, 0.5);
    (i as f64 + off, b - 0.25 * (a - c) * off)
}

/// LPC coefficients `a[1..=order]` (with `a[0] = 1`) by Levinson-Durbin.
fn lpc(x: &[f64], order: usize) -> Option<Vec<f64>> {
    let n = x.len();
    if n <= order {
        return None;
    }
    let r: Vec<f64> = (0..=order)
        .map(|k| x[..n - k].iter().zip(&x[k..]).map(|(a, b)| a * b).sum())
        .collect();
    if r[0] <= 0.0 {
        return None;
    }
    let mut a = vec![0.0; order + 1];
    a[0] = 1.0;
    let mut err = r[0] * (1.0 + 1e-9);
    for i in 1..=order {
        let acc: f64 = (1..i).map(|j| a[j] * r[i - j]).sum::<f64>() + r[i];
        let k = -acc / err;
        let prev = a.clone();
        for j in 1..i {
            a[j] = prev[j] + k * prev[i - j];
        }
        a[i] = k;
        err *= 1.0 - k * k;
        if err <= 0.0 {
            return None;
        }
    }
    Some(a)
}

/// Formant frequencies and -3 dB bandwidths from peaks of the LPC envelope.
fn formants(x: &[f64], order: usize, sample_rate: f64) -> [(f64, f64); 3] {
    let mut out = [(0.0, 0.0); 3];
    let Some(a) = lpc(x, order) else {
        return out;
    };
    let grid = 1024;
    let max_hz = 5500.0;
    let step = max_hz / grid as f64;
    let env: Vec<f64> = (0..=grid)
        .map(|g| {
            let w = 2.0 * std::f64::consts::PI * g as f64 * step / sample_rate;
            let (mut re, mut im) = (0.0, 0.0);
            for (k, c) in a.iter().enumerate() {
                re += c * (w * k as f64).cos();
                im -= c * (w * k as f64).sin();
            }
            -10.0 * (re * re + im * im + DB_FLOOR).log10()
        })
        .collect();
    let mut found = 0;
    for g in 1..grid {
        if found == 3 {
            break;
        }
        let hz = g as f64 * step;
        if hz < 150.0 || !(env[g] > env[g - 1] && env[g] >= env[g + 1]) {
            continue;
        }
        let half = env[g] - 3.0;
        let mut left = g;
        while left > 0 && env[left] > half {
            left -= 1;
        }
        let mut right = g;
        while right < grid && env[right] > half {
            right += 1;
        }
        let bandwidth = (right - left) as f64 * step;
        out[found] = (hz, bandwidth);
        found += 1;
    }
    out
}

/// Amplitude (dB) of the strongest bin within ±10% of F0 around `hz`.
fn harmonic_db(power: &[f64], bin_hz: f64, hz: f64, f0: f64) -> f64 {
    let lo = ((hz - 0.1 * f0) / bin_hz).floor().max(0.0) as usize;
    let hi = (((hz + 0.1 * f0) / bin_hz).ceil() as usize).min(power.len() - 1);
    let peak = power[lo.min(hi)..=hi].iter().copied().fold(0.0, f64::max);
    10.0 * (peak + DB_FLOOR).log10()
}

fn band_indices(bin_hz: f64, lo_hz: f64, hi_hz: f64, bins: usize) -> std::ops::Range<usize> {
    let lo = (lo_hz / bin_hz).ceil() as usize;
    let hi = ((hi_hz / bin_hz).floor() as usize + 1).min(bins);
    lo.min(hi)..hi
}

fn regression_slope(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len() as f64;
    if xs.len() < 2 {
        return 0.0;
    }
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    if sxx > 0.0 {
        sxy / sxx
    } else {
        0.0
    }
}

struct Analyzer<'a> {
    cfg: &'a EgemapsConfig,
    rate: f64,
    shift: usize,
    pitch_len: usize,
    spec_len: usize,
    pitch_window: Vec<f64>,
    spec_window: Vec<f64>,
    pitch_fft: PowerSpectrum,
    spec_fft: PowerSpectrum,
    loudness_bank: MelFilterbank,
    mfcc: MfccExtractor,
}

impl<'a> Analyzer<'a> {
    fn new(cfg: &'a EgemapsConfig, sample_rate: u32) -> Result<Self> {
        let pitch_len = ms_to_samples(cfg.pitch_window_ms, sample_rate);
        let spec_len = ms_to_samples(cfg.spectral_window_ms, sample_rate);
        let spec_fft = PowerSpectrum::for_frame(spec_len);
        let nyquist = f64::from(sample_rate) / 2.0;
        let mfcc = MfccExtractor::new(
            &MfccConfig {
                frame_ms: cfg.spectral_window_ms,
                shift_ms: cfg.shift_ms,
                ..MfccConfig::default()
            },
            sample_rate,
        )?;
        Ok(Self {
            cfg,
            rate: f64::from(sample_rate),
            shift: ms_to_samples(cfg.shift_ms, sample_rate),
            pitch_len,
            spec_len,
            pitch_window: window_coefficients(pitch_len, WindowKind::Hann),
            spec_window: window_coefficients(spec_len, WindowKind::Hamming),
            pitch_fft: PowerSpectrum::for_frame(pitch_len),
            loudness_bank: MelFilterbank::new(26, spec_fft.num_bins(), sample_rate, 20.0, nyquist),
            spec_fft,
            mfcc,
        })
    }

    fn num_frames(&self, n: usize) -> Option<usize> {
        crate::signalio::frame_count(n, self.pitch_len, self.shift)
    }

    fn pitch_frame(&self, samples: &[f64], t: usize) -> (PitchFrame, Vec<f64>) {
        let start = t * self.shift;
        let seg = &samples[start..start + self.pitch_len];
        let mean = seg.iter().sum::<f64>() / seg.len() as f64;
        let centred: Vec<f64> = seg.iter().map(|v| v - mean).collect();
        (analyse_pitch(&centred, self.rate, self.cfg), centred)
    }
}

/// F0 track at the 10 ms frame period.
pub fn estimate_f0_track(clip: &AudioClip, cfg: &EgemapsConfig) -> Result<Vec<PitchFrame>> {
    let an = Analyzer::new(cfg, clip.sample_rate)?;
    let n = an.num_frames(clip.samples.len()).ok_or(Error::TooShort {
        needed: an.pitch_len,
        got: clip.samples.len(),
    })?;
    Ok((0..n).map(|t| an.pitch_frame(&clip.samples, t).0).collect())
}

/// The default 23-descriptor layout.
pub fn egemaps_lld(clip: &AudioClip) -> Result<FeatureMatrix> {
    egemaps_lld_with(clip, &EgemapsConfig::default())
}

pub fn egemaps_lld_with(clip: &AudioClip, cfg: &EgemapsConfig) -> Result<FeatureMatrix> {
    if cfg.llds.is_empty() {
        return Err(Error::InvalidInput("empty LLD selection".into()));
    }
    let an = Analyzer::new(cfg, clip.sample_rate)?;
    let samples = &clip.samples;
    let n = an.num_frames(samples.len()).ok_or(Error::TooShort {
        needed: an.pitch_len,
        got: samples.len(),
    })?;
    let spec_bin = an.spec_fft.bin_hz(clip.sample_rate);
    let pitch_bin = an.pitch_fft.bin_hz(clip.sample_rate);
    let spec_bins = an.spec_fft.num_bins();
    let alpha_lo = band_indices(spec_bin, 50.0, 1000.0, spec_bins);
    let alpha_hi = band_indices(spec_bin, 1000.0, 5000.0, spec_bins);
    let ham_lo = band_indices(spec_bin, 0.0, 2000.0, spec_bins);
    let ham_hi = band_indices(spec_bin, 2000.0, 5000.0, spec_bins);
    let slope_a = band_indices(spec_bin, 0.0, 500.0, spec_bins);
    let slope_b = band_indices(spec_bin, 500.0, 1500.0, spec_bins);
    let spec_offset = (an.pitch_len - an.spec_len) / 2;

    let mut out = Array2::zeros((n, cfg.llds.len()));
    let mut prev_norm_mag: Option<Vec<f64>> = None;
    for t in 0..n {
        let (pitch, centred) = an.pitch_frame(samples, t);

        // spectral family: 20 ms window centred in the pitch window
        let start = t * an.shift + spec_offset;
        let raw = &samples[start..start + an.spec_len];
        let windowed: Vec<f64> = raw.iter().zip(&an.spec_window).map(|(s, w)| s * w).collect();
        let power = an.spec_fft.compute(&windowed);
        let db: Vec<f64> = power.iter().map(|p| 10.0 * (p + DB_FLOOR).log10()).collect();
        let band_sum = |r: &std::ops::Range<usize>| power[r.clone()].iter().sum::<f64>();
        let band_max = |r: &std::ops::Range<usize>| db[r.clone()].iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let slope = |r: &std::ops::Range<usize>| {
            let xs: Vec<f64> = r.clone().map(|k| k as f64 * spec_bin / 1000.0).collect();
            regression_slope(&xs, &db[r.clone()])
        };
        let loudness: f64 = an
            .loudness_bank
            .apply(&power)
            .iter()
            .map(|e| e.max(0.0).powf(0.3))
            .sum();
        let mag: Vec<f64> = power.iter().map(|p| p.sqrt()).collect();
        let mag_sum: f64 = mag.iter().sum();
        let norm_mag: Vec<f64> = if mag_sum > 0.0 {
            mag.iter().map(|m| m / mag_sum).collect()
        } else {
            vec![0.0; mag.len()]
        };
        let flux = prev_norm_mag
            .as_ref()
            .map(|p| p.iter().zip(&norm_mag).map(|(a, b)| (a - b).powi(2)).sum())
            .unwrap_or(0.0);
        prev_norm_mag = Some(norm_mag);
        let needs_mfcc = cfg
            .llds
            .iter()
            .any(|l| matches!(l, Lld::Mfcc1 | Lld::Mfcc2 | Lld::Mfcc3 | Lld::Mfcc4));
        let ceps = if needs_mfcc {
            an.mfcc.frame_cepstra(raw)
        } else {
            Vec::new()
        };

        // pitch-synchronous family
        let voiced = pitch.voiced;
        let needs_harmonics = voiced
            && cfg.llds.iter().any(|l| {
                matches!(
                    l,
                    Lld::H1MinusH2 | Lld::H1MinusA3 | Lld::F1Amplitude | Lld::F2Amplitude | Lld::F3Amplitude
                )
            });
        let needs_formants = voiced
            && cfg.llds.iter().any(|l| {
                matches!(
                    l,
                    Lld::F1Frequency
                        | Lld::F2Frequency
                        | Lld::F3Frequency
                        | Lld::F1Bandwidth
                        | Lld::F2Bandwidth
                        | Lld::F3Bandwidth
                        | Lld::F1Amplitude
                        | Lld::F2Amplitude
                        | Lld::F3Amplitude
                        | Lld::H1MinusA3
                )
            });
        let fmt = if needs_formants {
            let mut emphasized: Vec<f64> = Vec::with_capacity(raw.len());
            for i in 0..raw.len() {
                let prev = if i == 0 { raw[0] } else { raw[i - 1] };
                emphasized.push((raw[i] - 0.97 * prev) * an.spec_window[i]);
            }
            formants(&emphasized, cfg.lpc_order, an.rate)
        } else {
            [(0.0, 0.0); 3]
        };
        let harm_power = if needs_harmonics {
            let w: Vec<f64> = centred.iter().zip(&an.pitch_window).map(|(s, w)| s * w).collect();
            an.pitch_fft.compute(&w)
        } else {
            Vec::new()
        };
        let harmonic = |hz: f64| harmonic_db(&harm_power, pitch_bin, hz, pitch.f0_hz);
        let h1 = if needs_harmonics { harmonic(pitch.f0_hz) } else { 0.0 };
        let formant_amp = |i: usize| {
            if fmt[i].0 > 0.0 {
                let k = (fmt[i].0 / pitch.f0_hz).round().max(1.0);
                harmonic(k * pitch.f0_hz) - h1
            } else {
                0.0
            }
        };

        for (j, lld) in cfg.llds.iter().enumerate() {
            let v = if lld.is_pitch_dependent() && !voiced {
                0.0
            } else {
                match lld {
                    Lld::LogF0 => 12.0 * (pitch.f0_hz / 27.5).log2(),
                    Lld::Jitter => pitch.jitter,
                    Lld::Shimmer => pitch.shimmer,
                    Lld::Hnr => {
                        let r = pitch.periodicity.clamp(1e-6, 1.0 - 1e-6);
                        10.0 * (r / (1.0 - r)).log10()
                    }
                    Lld::Loudness => loudness,
                    Lld::AlphaRatio => {
                        10.0 * ((band_sum(&alpha_lo) + DB_FLOOR) / (band_sum(&alpha_hi) + DB_FLOOR)).log10()
                    }
                    Lld::Hammarberg => band_max(&ham_lo) - band_max(&ham_hi),
                    Lld::Slope0To500 => slope(&slope_a),
                    Lld::Slope500To1500 => slope(&slope_b),
                    Lld::SpectralFlux => flux,
                    Lld::F1Frequency => fmt[0].0,
                    Lld::F2Frequency => fmt[1].0,
                    Lld::F3Frequency => fmt[2].0,
                    Lld::F1Bandwidth => fmt[0].1,
                    Lld::F2Bandwidth => fmt[1].1,
                    Lld::F3Bandwidth => fmt[2].1,
                    Lld::F1Amplitude => formant_amp(0),
                    Lld::F2Amplitude => formant_amp(1),
                    Lld::F3Amplitude => formant_amp(2),
                    Lld::Mfcc1 => ceps[1],
                    Lld::Mfcc2 => ceps[2],
                    Lld::Mfcc3 => ceps[3],
                    Lld::Mfcc4 => ceps[4],
                    Lld::H1MinusH2 => h1 - harmonic(2.0 * pitch.f0_hz),
                    Lld::H1MinusA3 => {
                        if fmt[2].0 > 0.0 {
                            let k = (fmt[2].0 / pitch.f0_hz).round().max(1.0);
                            h1 - harmonic(k * pitch.f0_hz)
                        } else {
                            0.0
                        }
                    }
                }
            };
            out[[t, j]] = if v.is_finite() { v } else { 0.0 };
        }
    }
    Ok(FeatureMatrix::new(out, FeatureKind::Egemaps23, cfg.shift_ms))
}
