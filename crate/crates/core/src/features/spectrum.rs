use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

/// HTK Mel scale.
pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Real-input power spectrum with a fixed FFT size (zero padding shorter frames).
#[derive(Clone)]
pub struct PowerSpectrum {
    fft: Arc<dyn Fft<f64>>,
    size: usize,
}

impl std::fmt::Debug for PowerSpectrum {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("PowerSpectrum").field("size", &self.size).finish()
    }
}

impl PowerSpectrum {
    pub fn new(size: usize) -> Self {
        let fft = FftPlanner::new().plan_fft_forward(size);
        Self { fft, size }
    }

    /// Smallest power of two that holds `frame_len` samples.
    pub fn for_frame(frame_len: usize) -> Self {
        Self::new(frame_len.next_power_of_two())
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn num_bins(&self) -> usize {
        self.size / 2 + 1
    }

    pub fn bin_hz(&self, sample_rate: u32) -> f64 {
        f64::from(sample_rate) / self.size as f64
    }

    /// `|X_k|^2` for bins `0..=size/2`.
    pub fn compute(&self, frame: &[f64]) -> Vec<f64> {
        let mut buf: Vec<Complex<f64>> = frame.iter().take(self.size).map(|&x| Complex::new(x, 0.0)).collect();
        buf.resize(self.size, Complex::new(0.0, 0.0));
        self.fft.process(&mut buf);
        buf[..self.num_bins()].iter().map(|c| c.norm_sqr()).collect()
    }
}

/// Triangular filters equally spaced on the Mel scale, weights linear in Mel.
#[derive(Debug, Clone)]
pub struct MelFilterbank {
    /// Per filter: first bin and the weights from that bin on.
    filters: Vec<(usize, Vec<f64>)>,
}

impl MelFilterbank {
    pub fn new(num_filters: usize, num_bins: usize, sample_rate: u32, low_hz: f64, high_hz: f64) -> Self {
        let fft_size = (num_bins - 1) * 2;
        let bin_hz = f64::from(sample_rate) / fft_size as f64;
        let mel_lo = hz_to_mel(low_hz);
        let mel_hi = hz_to_mel(high_hz);
        let step = (mel_hi - mel_lo) / (num_filters + 1) as f64;
        let centers: Vec<f64> = (0..num_filters + 2).map(|i| mel_lo + step * i as f64).collect();
        let filters = (0..num_filters)
            .map(|m| {
                let (left, center, right) = (centers[m], centers[m + 1], centers[m + 2]);
                let mut first = None;
                let mut weights = Vec::new();
                for k in 0..num_bins {
                    let mel = hz_to_mel(k as f64 * bin_hz);
                    let w = if mel > left && mel <= center {
                        (mel - left) / (center - left)
                    } else if mel > center && mel < right {
                        (right - mel) / (right - center)
                    } else {
                        0.0
                    };
                    if w > 0.0 {
                        first.get_or_insert(k);
                        weights.push(w);
                    } else if first.is_some() {
                        break;
                    }
                }
                (first.unwrap_or(0), weights)
            })
            .collect();
        Self { filters }
    }

    pub fn num_filters(&self) -> usize {
        self.filters.len()
    }

    pub fn apply(&self, power: &[f64]) -> Vec<f64> {
        self.filters
            .iter()
            .map(|(start, w)| w.iter().zip(&power[*start..]).map(|(w, p)| w * p).sum())
            .collect()
    }
}
