//! Frame-level acoustic features and the transforms applied before classification.

mod cache;
mod egemaps;
mod mfcc;
mod pca;
mod spectrum;

use std::fmt;
use std::str::FromStr;

use ndarray::{s, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use cache::{read_feature_cache, write_feature_cache};
pub use egemaps::{
    egemaps_lld, egemaps_lld_with, estimate_f0_track, EgemapsConfig, Lld, PitchFrame, EGEMAPS_DEFAULT_LLDS,
};
pub use mfcc::{mfcc, MfccConfig, MfccExtractor};
pub use pca::{apply_pca, fit_pca, fit_pca_streaming, PcaModel};
pub use spectrum::{hz_to_mel, mel_to_hz, MelFilterbank, PowerSpectrum};

/// Default regression half-window for delta coefficients.
pub const DELTA_HALF_WINDOW: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum FeatureKind {
    Mfcc13,
    Mfcc26,
    Egemaps23,
    Stacked,
    PcaProjected,
}

impl FeatureKind {
    pub fn code(self) -> u8 {
        match self {
            FeatureKind::Mfcc13 => 1,
            FeatureKind::Mfcc26 => 2,
            FeatureKind::Egemaps23 => 3,
            FeatureKind::Stacked => 4,
            FeatureKind::PcaProjected => 5,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Some(match code {
            1 => FeatureKind::Mfcc13,
            2 => FeatureKind::Mfcc26,
            3 => FeatureKind::Egemaps23,
            4 => FeatureKind::Stacked,
            5 => FeatureKind::PcaProjected,
            _ => return None,
        })
    }
}

/// A transform recorded in a matrix's history.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Transform {
    Delta { half_window: usize },
    ZNorm,
    Context { size: usize },
    Pca { kept: usize },
    Select { frames: usize },
}

impl fmt::Display for Transform {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Transform::Delta { half_window } => write!(f, "delta:{half_window}"),
            Transform::ZNorm => f.write_str("znorm"),
            Transform::Context { size } => write!(f, "context:{size}"),
            Transform::Pca { kept } => write!(f, "pca:{kept}"),
            Transform::Select { frames } => write!(f, "select:{frames}"),
        }
    }
}

impl FromStr for Transform {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::parse("transform history", format!("bad entry '{s}'"));
        if s == "znorm" {
            return Ok(Transform::ZNorm);
        }
        let (name, arg) = s.split_once(':').ok_or_else(bad)?;
        let n: usize = arg.parse().map_err(|_| bad())?;
        match name {
            "delta" => Ok(Transform::Delta { half_window: n }),
            "context" => Ok(Transform::Context { size: n }),
            "pca" => Ok(Transform::Pca { kept: n }),
            "select" => Ok(Transform::Select { frames: n }),
            _ => Err(bad()),
        }
    }
}

/// Frames × coefficients, plus provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    pub values: Array2<f64>,
    pub kind: FeatureKind,
    pub frame_period_ms: f64,
    pub history: Vec<Transform>,
}

impl FeatureMatrix {
    pub fn new(values: Array2<f64>, kind: FeatureKind, frame_period_ms: f64) -> Self {
        Self {
            values,
            kind,
            frame_period_ms,
            history: Vec::new(),
        }
    }

    pub fn num_frames(&self) -> usize {
        self.values.nrows()
    }

    pub fn dim(&self) -> usize {
        self.values.ncols()
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    fn derived(&self, values: Array2<f64>, kind: FeatureKind, step: Transform) -> Self {
        let mut history = self.history.clone();
        history.push(step);
        Self {
            values,
            kind,
            frame_period_ms: self.frame_period_ms,
            history,
        }
    }

    /// Keeps only the frames whose index is in `keep` (ascending).
    pub fn select_frames(&self, keep: &[usize]) -> Self {
        let values = self.values.select(Axis(0), keep);
        self.derived(values, self.kind, Transform::Select { frames: keep.len() })
    }

    /// Keeps the first `n` columns, e.g. MFCC13 out of MFCC26.
    pub fn leading_columns(&self, n: usize) -> Result<Self> {
        if n > self.dim() {
            return Err(Error::DimensionMismatch {
                expected: n,
                got: self.dim(),
            });
        }
        let kind = match (self.kind, n) {
            (FeatureKind::Mfcc26, 13) => FeatureKind::Mfcc13,
            (k, _) => k,
        };
        Ok(Self {
            values: self.values.slice(s![.., ..n]).to_owned(),
            kind,
            frame_period_ms: self.frame_period_ms,
            history: self.history.clone(),
        })
    }
}

/// Regression deltas `d_t = sum_k k (c_{t+k} - c_{t-k}) / (2 sum_k k^2)` with edge
/// replication, appended to the static coefficients.
pub fn delta(feat: &FeatureMatrix, half_window: usize) -> FeatureMatrix {
    let n = feat.num_frames();
    let dim = feat.dim();
    let mut out = Array2::zeros((n, 2 * dim));
    out.slice_mut(s![.., ..dim]).assign(&feat.values);
    if half_window > 0 && n > 0 {
        let denom = 2.0 * (1..=half_window).map(|k| (k * k) as f64).sum::<f64>();
        let last = n - 1;
        for t in 0..n {
            for j in 0..dim {
                let mut acc = 0.0;
                for k in 1..=half_window {
                    let fwd = feat.values[[(t + k).min(last), j]];
                    let back = feat.values[[t.saturating_sub(k), j]];
                    acc += k as f64 * (fwd - back);
                }
                out[[t, dim + j]] = acc / denom;
            }
        }
    }
    let kind = if feat.kind == FeatureKind::Mfcc13 {
        FeatureKind::Mfcc26
    } else {
        feat.kind
    };
    feat.derived(out, kind, Transform::Delta { half_window })
}

/// Column statistics: mean and population standard deviation.
pub fn column_stats(values: ArrayView2<'_, f64>) -> (Vec<f64>, Vec<f64>) {
    let n = values.nrows() as f64;
    values
        .columns()
        .into_iter()
        .map(|col| {
            let mean = col.sum() / n;
            let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            (mean, var.sqrt())
        })
        .unzip()
}

fn is_zero_variance(mean: f64, std: f64) -> bool {
    std <= 1e-12 * (1.0 + mean.abs())
}

/// Standardizes every column with the file's own mean and population standard
/// deviation. Zero-variance columns become all-zero.
pub fn znorm_per_file(feat: &FeatureMatrix) -> Result<FeatureMatrix> {
    if feat.num_frames() < 2 {
        return Err(Error::InvalidInput(format!(
            "per-file normalization needs at least 2 frames, got {}",
            feat.num_frames()
        )));
    }
    let (means, stds) = column_stats(feat.values.view());
    let mut out = feat.values.clone();
    for (j, mut col) in out.columns_mut().into_iter().enumerate() {
        if is_zero_variance(means[j], stds[j]) {
            col.fill(0.0);
        } else {
            col.mapv_inplace(|v| (v - means[j]) / stds[j]);
        }
    }
    Ok(feat.derived(out, feat.kind, Transform::ZNorm))
}

/// Concatenates each frame with its `(context - 1) / 2` neighbours on both sides,
/// replicating the edge frames.
pub fn stack_context(feat: &FeatureMatrix, context: usize) -> Result<FeatureMatrix> {
    if context == 0 || context % 2 == 0 {
        return Err(Error::InvalidInput(format!(
            "context size must be odd and positive, got {context}"
        )));
    }
    let n = feat.num_frames();
    let dim = feat.dim();
    let half = (context - 1) / 2;
    let mut out = Array2::zeros((n, dim * context));
    if n > 0 {
        let last = n as isize - 1;
        for t in 0..n {
            for c in 0..context {
                let src = (t as isize + c as isize - half as isize).clamp(0, last) as usize;
                out.slice_mut(s![t, c * dim..(c + 1) * dim])
                    .assign(&feat.values.row(src));
            }
        }
    }
    Ok(feat.derived(out, FeatureKind::Stacked, Transform::Context { size: context }))
}
