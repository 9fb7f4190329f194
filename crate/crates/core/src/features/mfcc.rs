use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::spectrum::{MelFilterbank, PowerSpectrum};
use super::{FeatureKind, FeatureMatrix};
use crate::error::{Error, Result};
use crate::signalio::{frame_signal, window_coefficients, AudioClip, WindowKind, ENERGY_FLOOR};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MfccConfig {
    pub num_ceps: usize,
    pub num_filters: usize,
    pub frame_ms: f64,
    pub shift_ms: f64,
    pub pre_emphasis: f64,
    /// Start at c0 (c0..c12) instead of c1 (c1..c13).
    pub use_c0: bool,
    /// Sinusoidal lifter length; 0 disables liftering.
    pub lifter: f64,
    pub low_hz: f64,
    /// Upper filterbank edge; `None` means Nyquist.
    pub high_hz: Option<f64>,
}

impl Default for MfccConfig {
    fn default() -> Self {
        Self {
            num_ceps: 13,
            num_filters: 26,
            frame_ms: 25.0,
            shift_ms: 10.0,
            pre_emphasis: 0.97,
            use_c0: true,
            lifter: 0.0,
            low_hz: 0.0,
            high_hz: None,
        }
    }
}

impl MfccConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_ceps == 0 || self.num_ceps > self.num_filters {
            return Err(Error::InvalidInput(format!(
                "num_ceps ({}) must be in 1..={} (num_filters)",
                self.num_ceps, self.num_filters
            )));
        }
        if !self.use_c0 && self.num_ceps + 1 > self.num_filters {
            return Err(Error::InvalidInput(
                "c1-based cepstra need num_ceps < num_filters".into(),
            ));
        }
        Ok(())
    }
}

/// Precomputed MFCC front end for one sample rate and configuration.
#[derive(Debug, Clone)]
pub struct MfccExtractor {
    cfg: MfccConfig,
    sample_rate: u32,
    frame_len: usize,
    frame_shift: usize,
    window: Vec<f64>,
    spectrum: PowerSpectrum,
    filterbank: MelFilterbank,
    /// DCT-II basis rows for the emitted coefficients.
    dct: Vec<Vec<f64>>,
}

impl MfccExtractor {
    pub fn new(cfg: &MfccConfig, sample_rate: u32) -> Result<Self> {
        cfg.validate()?;
        let frame_len = crate::signalio::ms_to_samples(cfg.frame_ms, sample_rate);
        let frame_shift = crate::signalio::ms_to_samples(cfg.shift_ms, sample_rate);
        let spectrum = PowerSpectrum::for_frame(frame_len);
        let nyquist = f64::from(sample_rate) / 2.0;
        let filterbank = MelFilterbank::new(
            cfg.num_filters,
            spectrum.num_bins(),
            sample_rate,
            cfg.low_hz,
            cfg.high_hz.unwrap_or(nyquist).min(nyquist),
        );
        let first = usize::from(!cfg.use_c0);
        let nf = cfg.num_filters as f64;
        let norm = (2.0 / nf).sqrt();
        let dct = (first..first + cfg.num_ceps)
            .map(|i| {
                let lift = if cfg.lifter > 0.0 {
                    1.0 + cfg.lifter / 2.0 * (std::f64::consts::PI * i as f64 / cfg.lifter).sin()
                } else {
                    1.0
                };
                (0..cfg.num_filters)
                    .map(|j| lift * norm * (std::f64::consts::PI * i as f64 * (j as f64 + 0.5) / nf).cos())
                    .collect()
            })
            .collect();
        Ok(Self {
            cfg: cfg.clone(),
            sample_rate,
            frame_len,
            frame_shift,
            window: window_coefficients(frame_len, WindowKind::Hamming),
            spectrum,
            filterbank,
            dct,
        })
    }

    pub fn config(&self) -> &MfccConfig {
        &self.cfg
    }

    /// Cepstra of a single frame of `frame_len` samples.
    pub fn frame_cepstra(&self, frame: &[f64]) -> Vec<f64> {
        let k = self.cfg.pre_emphasis;
        let mut buf = Vec::with_capacity(frame.len());
        for (i, &s) in frame.iter().enumerate() {
            let prev = if i == 0 { s } else { frame[i - 1] };
            buf.push((s - k * prev) * self.window[i]);
        }
        let power = self.spectrum.compute(&buf);
        let log_mel: Vec<f64> = self
            .filterbank
            .apply(&power)
            .into_iter()
            .map(|e| (e + ENERGY_FLOOR).ln())
            .collect();
        self.dct
            .iter()
            .map(|basis| basis.iter().zip(&log_mel).map(|(b, m)| b * m).sum())
            .collect()
    }

    pub fn extract(&self, clip: &AudioClip) -> Result<FeatureMatrix> {
        if clip.sample_rate != self.sample_rate {
            return Err(Error::InvalidInput(format!(
                "extractor built for {} Hz, clip is {} Hz",
                self.sample_rate, clip.sample_rate
            )));
        }
        let frames = frame_signal(clip, self.cfg.frame_ms, self.cfg.shift_ms)?;
        debug_assert_eq!(frames.frame_length, self.frame_len);
        debug_assert_eq!(frames.frame_shift, self.frame_shift);
        let n = frames.num_frames();
        let mut values = Array2::zeros((n, self.cfg.num_ceps));
        for (t, row) in frames.frames.rows().into_iter().enumerate() {
            let ceps = self.frame_cepstra(row.as_slice().expect("contiguous frame"));
            for (j, c) in ceps.into_iter().enumerate() {
                values[[t, j]] = c;
            }
        }
        Ok(FeatureMatrix::new(values, FeatureKind::Mfcc13, self.cfg.shift_ms))
    }
}

/// Pre-emphasis, Hamming window, power spectrum, Mel filterbank, log, DCT-II.
pub fn mfcc(clip: &AudioClip, cfg: &MfccConfig) -> Result<FeatureMatrix> {
    MfccExtractor::new(cfg, clip.sample_rate)?.extract(clip)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn tone(freq: f64, secs: f64, phase: f64) -> AudioClip {
        let n = (16_000.0 * secs) as usize;
        AudioClip::new(
            (0..n)
                .map(|i| 0.5 * (2.0 * PI * freq * i as f64 / 16_000.0 + phase).sin())
                .collect(),
            16_000,
        )
    }

    fn mean_row(f: &FeatureMatrix) -> Vec<f64> {
        f.values.mean_axis(ndarray::Axis(0)).unwrap().to_vec()
    }

    #[test]
    fn silence_gives_identical_frames() {
        let f = mfcc(&AudioClip::new(vec![0.0; 16_000], 16_000), &MfccConfig::default()).unwrap();
        assert_eq!(f.num_frames(), 98);
        assert_eq!(f.dim(), 13);
        let first = f.values.row(0).to_owned();
        assert!(f.values.rows().into_iter().all(|r| r == first));
        // c0 of silence: sqrt(2/26) * 26 * ln(1e-10)
        let expected_c0 = (2.0f64 / 26.0).sqrt() * 26.0 * ENERGY_FLOOR.ln();
        assert!((first[0] - expected_c0).abs() < 1e-9);
    }

    /// Direct evaluation of the cepstrum of one frame without the extractor's
    /// precomputed tables: naive DFT, Mel weights recomputed per bin.
    fn reference_frame_mfcc(frame: &[f64]) -> Vec<f64> {
        let n = frame.len();
        let nfft = 512;
        let mut x = vec![0.0; nfft];
        for i in 0..n {
            let prev = if i == 0 { frame[0] } else { frame[i - 1] };
            let w = 0.54 - 0.46 * (2.0 * PI * i as f64 / (n - 1) as f64).cos();
            x[i] = (frame[i] - 0.97 * prev) * w;
        }
        let power: Vec<f64> = (0..=nfft / 2)
            .map(|k| {
                let (mut re, mut im) = (0.0, 0.0);
                for (t, v) in x.iter().enumerate() {
                    let a = -2.0 * PI * (k * t) as f64 / nfft as f64;
                    re += v * a.cos();
                    im += v * a.sin();
                }
                re * re + im * im
            })
            .collect();
        let mel = |f: f64| 2595.0 * (1.0 + f / 700.0).log10();
        let top = mel(8000.0);
        let c: Vec<f64> = (0..28).map(|i| top * i as f64 / 27.0).collect();
        let fbank: Vec<f64> = (0..26)
            .map(|m| {
                let mut e = 0.0;
                for (k, p) in power.iter().enumerate() {
                    let mk = mel(k as f64 * 31.25);
                    let w = if mk > c[m] && mk <= c[m + 1] {
                        (mk - c[m]) / (c[m + 1] - c[m])
                    } else if mk > c[m + 1] && mk < c[m + 2] {
                        (c[m + 2] - mk) / (c[m + 2] - c[m + 1])
                    } else {
                        0.0
                    };
                    e += w * p;
                }
                (e + 1e-10).ln()
            })
            .collect();
        (0..13)
            .map(|i| {
                (2.0f64 / 26.0).sqrt()
                    * fbank
                        .iter()
                        .enumerate()
                        .map(|(j, v)| v * (PI * i as f64 * (j as f64 + 0.5) / 26.0).cos())
                        .sum::<f64>()
            })
            .collect()
    }

    #[test]
    fn matches_direct_formula_evaluation() {
        let clip = tone(440.0, 0.1, 0.3);
        let f = mfcc(&clip, &MfccConfig::default()).unwrap();
        let frame = &clip.samples[160 * 2..160 * 2 + 400];
        let reference = reference_frame_mfcc(frame);
        for (a, b) in f.values.row(2).iter().zip(&reference) {
            assert!((a - b).abs() < 1e-8, "{a} vs {b}");
        }
    }

    #[test]
    fn different_tones_give_different_cepstra() {
        let cfg = MfccConfig::default();
        let a = mean_row(&mfcc(&tone(1000.0, 1.0, 0.0), &cfg).unwrap());
        let b = mean_row(&mfcc(&tone(3000.0, 1.0, 0.0), &cfg).unwrap());
        let dot: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
        let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
        let cosine_distance = 1.0 - dot / (na * nb);
        assert!(cosine_distance > 0.1, "cosine distance {cosine_distance}");
    }

    #[test]
    fn shifting_by_whole_frame_shifts_permutes_frames() {
        // 200 Hz has an integer number of cycles per 10 ms shift.
        let clip = tone(200.0, 0.5, 0.0);
        let shift = 3 * 160;
        let shifted = AudioClip::new(clip.samples[shift..].to_vec(), 16_000);
        let cfg = MfccConfig::default();
        let a = mfcc(&clip, &cfg).unwrap();
        let b = mfcc(&shifted, &cfg).unwrap();
        for t in 0..b.num_frames() {
            assert_eq!(a.values.row(t + 3), b.values.row(t));
        }
    }

    #[test]
    fn deterministic_and_c1_option() {
        let clip = tone(523.0, 0.3, 1.0);
        let cfg = MfccConfig::default();
        assert_eq!(mfcc(&clip, &cfg).unwrap(), mfcc(&clip, &cfg).unwrap());
        let with_c0 = mfcc(&clip, &cfg).unwrap();
        let no_c0 = mfcc(
            &clip,
            &MfccConfig {
                use_c0: false,
                ..cfg.clone()
            },
        )
        .unwrap();
        assert_eq!(with_c0.values[[0, 1]], no_c0.values[[0, 0]]);
        assert!(mfcc(&AudioClip::new(vec![0.0; 100], 16_000), &cfg).is_err());
        assert!(MfccConfig { num_ceps: 30, ..cfg }.validate().is_err());
    }
}
