//! GMM-UBM speaker modelling used to remove therapist speech.
//!
//! A diagonal-covariance UBM is trained by EM with binary splitting, a therapist
//! model is derived from it by means-only MAP adaptation, and every speech
//! segment is scored by the mean per-frame log-likelihood ratio between the two.

use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::FeatureMatrix;
use crate::segmentation::{SegmentList, SnsLabel, SpeakerLabel};

pub const GMM_VARIANCE_FLOOR: f64 = 1e-4;
const GMM_FORMAT_VERSION: u32 = 1;
/// Rows per E-step work unit. Fixed so partial sums are always reduced in the
/// same order, whatever the thread count.
const CHUNK_ROWS: usize = 2048;
const SPLIT_EM_ITERATIONS: usize = 8;
const FINAL_EM_ITERATIONS: usize = 100;
const FINAL_TOLERANCE: f64 = 1e-5;
const SPLIT_OFFSET: f64 = 0.2;

/// Diagonal-covariance Gaussian mixture.
#[derive(Debug, Clone, PartialEq)]
pub struct GmmModel {
    pub weights: Array1<f64>,
    pub means: Array2<f64>,
    pub variances: Array2<f64>,
    pub feature_kind: String,
}

#[derive(Serialize, Deserialize)]
struct GmmFile {
    version: u32,
    num_components: usize,
    dim: usize,
    feature_kind: String,
    weights: Vec<f64>,
    means: Vec<Vec<f64>>,
    variances: Vec<Vec<f64>>,
}

/// Per-component constants for fast log-density evaluation.
struct Scorer<'a> {
    model: &'a GmmModel,
    log_consts: Vec<f64>,
    inv_var: Array2<f64>,
}

impl<'a> Scorer<'a> {
    fn new(model: &'a GmmModel) -> Self {
        let dim = model.dim() as f64;
        let log_consts = (0..model.num_components())
            .map(|k| {
                let log_det: f64 = model.variances.row(k).iter().map(|v| v.ln()).sum();
                model.weights[k].ln() - 0.5 * (dim * (2.0 * std::f64::consts::PI).ln() + log_det)
            })
            .collect();
        Self {
            model,
            log_consts,
            inv_var: model.variances.mapv(|v| 1.0 / v),
        }
    }

    /// Log of `w_k N(x | m_k, Σ_k)` for every component, written into `out`.
    fn log_joint(&self, x: ArrayView1<'_, f64>, out: &mut [f64]) {
        for (k, o) in out.iter_mut().enumerate() {
            let m = self.model.means.row(k);
            let iv = self.inv_var.row(k);
            let mut q = 0.0;
            for d in 0..x.len() {
                let diff = x[d] - m[d];
                q += diff * diff * iv[d];
            }
            *o = self.log_consts[k] - 0.5 * q;
        }
    }
}

fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Zeroth, first and second order statistics plus total log-likelihood.
struct Stats {
    n: Array1<f64>,
    sx: Array2<f64>,
    sxx: Array2<f64>,
    loglik: f64,
}

impl Stats {
    fn zeros(k: usize, dim: usize) -> Self {
        Self {
            n: Array1::zeros(k),
            sx: Array2::zeros((k, dim)),
            sxx: Array2::zeros((k, dim)),
            loglik: 0.0,
        }
    }

    fn add(mut self, other: &Stats) -> Self {
        self.n += &other.n;
        self.sx += &other.sx;
        self.sxx += &other.sxx;
        self.loglik += other.loglik;
        self
    }
}

fn chunk_stats(scorer: &Scorer<'_>, rows: ArrayView2<'_, f64>) -> Stats {
    let k = scorer.model.num_components();
    let dim = scorer.model.dim();
    let mut stats = Stats::zeros(k, dim);
    let mut lj = vec![0.0; k];
    for x in rows.rows() {
        scorer.log_joint(x, &mut lj);
        let total = log_sum_exp(&lj);
        stats.loglik += total;
        for c in 0..k {
            let g = (lj[c] - total).exp();
            if g == 0.0 {
                continue;
            }
            stats.n[c] += g;
            let mut sx = stats.sx.row_mut(c);
            for d in 0..dim {
                sx[d] += g * x[d];
            }
            let mut sxx = stats.sxx.row_mut(c);
            for d in 0..dim {
                sxx[d] += g * x[d] * x[d];
            }
        }
    }
    stats
}

fn accumulate(model: &GmmModel, data: ArrayView2<'_, f64>) -> Stats {
    let scorer = Scorer::new(model);
    let chunks: Vec<ArrayView2<'_, f64>> = data.axis_chunks_iter(Axis(0), CHUNK_ROWS).collect();
    let parts: Vec<Stats> = chunks.par_iter().map(|c| chunk_stats(&scorer, *c)).collect();
    parts
        .iter()
        .fold(Stats::zeros(model.num_components(), model.dim()), |acc, p| acc.add(p))
}

impl GmmModel {
    pub fn num_components(&self) -> usize {
        self.weights.len()
    }

    pub fn dim(&self) -> usize {
        self.means.ncols()
    }

    fn check_dim(&self, dim: usize) -> Result<()> {
        if dim != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                got: dim,
            });
        }
        Ok(())
    }

    pub fn log_likelihood(&self, x: ArrayView1<'_, f64>) -> f64 {
        let scorer = Scorer::new(self);
        let mut lj = vec![0.0; self.num_components()];
        scorer.log_joint(x, &mut lj);
        log_sum_exp(&lj)
    }

    fn em_step(&self, data: ArrayView2<'_, f64>) -> (GmmModel, f64) {
        let stats = accumulate(self, data);
        let total: f64 = stats.n.sum();
        let mut next = self.clone();
        for k in 0..self.num_components() {
            let nk = stats.n[k];
            next.weights[k] = nk / total;
            if nk <= 0.0 {
                continue;
            }
            for d in 0..self.dim() {
                let m = stats.sx[[k, d]] / nk;
                let v = stats.sxx[[k, d]] / nk - m * m;
                next.means[[k, d]] = m;
                next.variances[[k, d]] = v.max(GMM_VARIANCE_FLOOR);
            }
        }
        (next, stats.loglik / data.nrows() as f64)
    }

    pub fn to_json(&self) -> Result<String> {
        let file = GmmFile {
            version: GMM_FORMAT_VERSION,
            num_components: self.num_components(),
            dim: self.dim(),
            feature_kind: self.feature_kind.clone(),
            weights: self.weights.to_vec(),
            means: self.means.rows().into_iter().map(|r| r.to_vec()).collect(),
            variances: self.variances.rows().into_iter().map(|r| r.to_vec()).collect(),
        };
        serde_json::to_string_pretty(&file).map_err(|e| Error::parse("gmm model", e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let f: GmmFile = serde_json::from_str(text).map_err(|e| Error::parse("gmm model", e.to_string()))?;
        if f.version != GMM_FORMAT_VERSION {
            return Err(Error::parse("gmm model", format!("unsupported version {}", f.version)));
        }
        let shape_ok = f.weights.len() == f.num_components
            && f.means.len() == f.num_components
            && f.variances.len() == f.num_components
            && f.means.iter().chain(&f.variances).all(|r| r.len() == f.dim);
        if !shape_ok {
            return Err(Error::parse("gmm model", "inconsistent shapes"));
        }
        let to_array = |rows: Vec<Vec<f64>>| {
            Array2::from_shape_vec((f.num_components, f.dim), rows.concat()).expect("checked shape")
        };
        Ok(Self {
            weights: Array1::from(f.weights),
            means: to_array(f.means),
            variances: to_array(f.variances),
            feature_kind: f.feature_kind,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

/// UBM plus the average log-likelihood of every EM iteration at the final size.
#[derive(Debug, Clone)]
pub struct UbmFit {
    pub model: GmmModel,
    pub final_phase_trace: Vec<f64>,
}

fn kind_tag(frames: &FeatureMatrix) -> String {
    format!("{:?}", frames.kind)
}

/// Maximum-likelihood single Gaussian.
fn single_gaussian(data: ArrayView2<'_, f64>, feature_kind: String) -> GmmModel {
    let n = data.nrows() as f64;
    let mean = data.sum_axis(Axis(0)) / n;
    let var = data
        .rows()
        .into_iter()
        .fold(Array1::zeros(data.ncols()), |acc: Array1<f64>, r| {
            acc + (&r - &mean).mapv(|v| v * v)
        })
        / n;
    GmmModel {
        weights: Array1::ones(1),
        means: mean.insert_axis(Axis(0)),
        variances: var.mapv(|v| v.max(GMM_VARIANCE_FLOOR)).insert_axis(Axis(0)),
        feature_kind,
    }
}

fn split(model: &GmmModel, rng: &mut impl Rng) -> GmmModel {
    let k = model.num_components();
    let dim = model.dim();
    let mut weights = Array1::zeros(2 * k);
    let mut means = Array2::zeros((2 * k, dim));
    let mut variances = Array2::zeros((2 * k, dim));
    for c in 0..k {
        for j in [2 * c, 2 * c + 1] {
            weights[j] = model.weights[c] / 2.0;
            variances.row_mut(j).assign(&model.variances.row(c));
        }
        for d in 0..dim {
            let jitter: f64 = rng.random_range(0.5..1.5);
            let offset = SPLIT_OFFSET * jitter * model.variances[[c, d]].sqrt();
            means[[2 * c, d]] = model.means[[c, d]] + offset;
            means[[2 * c + 1, d]] = model.means[[c, d]] - offset;
        }
    }
    GmmModel {
        weights,
        means,
        variances,
        feature_kind: model.feature_kind.clone(),
    }
}

fn run_em(mut model: GmmModel, data: ArrayView2<'_, f64>, iterations: usize, tol: Option<f64>) -> (GmmModel, Vec<f64>) {
    let mut trace = Vec::new();
    for _ in 0..iterations {
        let (next, ll_before) = model.em_step(data);
        let converged = tol.is_some_and(|t| trace.last().is_some_and(|prev: &f64| (ll_before - prev).abs() < t));
        trace.push(ll_before);
        model = next;
        if converged {
            break;
        }
    }
    trace.push(gmm_avg_loglik_view(&model, data));
    (model, trace)
}

/// Binary-splitting EM: 1 → 2 → … → K components with a short EM after every
/// split, then EM at size K until the average log-likelihood gains less than
/// 1e-5 or 100 iterations pass.
pub fn train_ubm_traced(frames: &FeatureMatrix, num_components: usize, seed: u64) -> Result<UbmFit> {
    if num_components == 0 || !num_components.is_power_of_two() {
        return Err(Error::InvalidInput(format!(
            "component count must be a power of two, got {num_components}"
        )));
    }
    if frames.num_frames() < 2 * num_components {
        return Err(Error::InvalidInput(format!(
            "{} frames are not enough for {num_components} components",
            frames.num_frames()
        )));
    }
    if !frames.all_finite() {
        return Err(Error::InvalidInput("non-finite features".into()));
    }
    let data = frames.values.view();
    let mut rng = crate::seed::rng_from(seed);
    let mut model = single_gaussian(data, kind_tag(frames));
    while model.num_components() < num_components {
        model = split(&model, &mut rng);
        model = run_em(model, data, SPLIT_EM_ITERATIONS, None).0;
    }
    if num_components == 1 {
        let trace = vec![gmm_avg_loglik_view(&model, data)];
        return Ok(UbmFit {
            model,
            final_phase_trace: trace,
        });
    }
    let (model, trace) = run_em(model, data, FINAL_EM_ITERATIONS, Some(FINAL_TOLERANCE));
    Ok(UbmFit {
        model,
        final_phase_trace: trace,
    })
}

pub fn train_ubm(frames: &FeatureMatrix, num_components: usize, seed: u64) -> Result<GmmModel> {
    Ok(train_ubm_traced(frames, num_components, seed)?.model)
}

/// Runs `iterations` plain EM steps from `model`, returning the log-likelihood
/// trace (one entry per model visited).
pub fn em_iterations(model: GmmModel, frames: &FeatureMatrix, iterations: usize) -> Result<(GmmModel, Vec<f64>)> {
    model.check_dim(frames.dim())?;
    Ok(run_em(model, frames.values.view(), iterations, None))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MapConfig {
    pub relevance_factor: f64,
}

impl Default for MapConfig {
    fn default() -> Self {
        Self { relevance_factor: 16.0 }
    }
}

/// Means-only MAP: `m̂_k = (n_k x̄_k + r m_k) / (n_k + r)`; weights and
/// variances are copied from the UBM.
pub fn map_adapt(ubm: &GmmModel, enrolment: &FeatureMatrix, cfg: &MapConfig) -> Result<GmmModel> {
    if !(cfg.relevance_factor > 0.0) {
        return Err(Error::InvalidInput("relevance factor must be positive".into()));
    }
    if enrolment.num_frames() == 0 {
        return Err(Error::InvalidInput("empty enrolment data".into()));
    }
    ubm.check_dim(enrolment.dim())?;
    let stats = accumulate(ubm, enrolment.values.view());
    let r = cfg.relevance_factor;
    let mut adapted = ubm.clone();
    for k in 0..ubm.num_components() {
        let nk = stats.n[k];
        if nk <= 0.0 {
            continue;
        }
        for d in 0..ubm.dim() {
            let data_mean = stats.sx[[k, d]] / nk;
            adapted.means[[k, d]] = (nk * data_mean + r * ubm.means[[k, d]]) / (nk + r);
        }
    }
    Ok(adapted)
}

/// Soft counts `n_k` of `frames` under `model`.
pub fn soft_counts(model: &GmmModel, frames: &FeatureMatrix) -> Result<Vec<f64>> {
    model.check_dim(frames.dim())?;
    Ok(accumulate(model, frames.values.view()).n.to_vec())
}

fn gmm_avg_loglik_view(model: &GmmModel, data: ArrayView2<'_, f64>) -> f64 {
    let scorer = Scorer::new(model);
    let mut lj = vec![0.0; model.num_components()];
    let total: f64 = data
        .rows()
        .into_iter()
        .map(|x| {
            scorer.log_joint(x, &mut lj);
            log_sum_exp(&lj)
        })
        .sum();
    total / data.nrows() as f64
}

/// Mean over frames of `log sum_k w_k N(x | m_k, Σ_k)`.
pub fn gmm_avg_loglik(model: &GmmModel, frames: &FeatureMatrix) -> Result<f64> {
    if frames.num_frames() == 0 {
        return Err(Error::InvalidInput("no frames to score".into()));
    }
    model.check_dim(frames.dim())?;
    Ok(gmm_avg_loglik_view(model, frames.values.view()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Verdict {
    Therapist,
    Patient,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LlrDecision {
    pub llr: f64,
    pub threshold: f64,
    pub verdict: Verdict,
}

impl LlrDecision {
    pub fn new(llr: f64, threshold: f64) -> Self {
        let verdict = if llr > threshold {
            Verdict::Therapist
        } else {
            Verdict::Patient
        };
        Self {
            llr,
            threshold,
            verdict,
        }
    }
}

fn segment_llr(ubm: &GmmModel, therapist: &GmmModel, frames: ArrayView2<'_, f64>) -> f64 {
    gmm_avg_loglik_view(therapist, frames) - gmm_avg_loglik_view(ubm, frames)
}

fn check_pair(ubm: &GmmModel, therapist: &GmmModel) -> Result<()> {
    ubm.check_dim(therapist.dim())?;
    if ubm.feature_kind != therapist.feature_kind {
        return Err(Error::InvalidInput(format!(
            "models built on different features ({} vs {})",
            ubm.feature_kind, therapist.feature_kind
        )));
    }
    Ok(())
}

pub fn score_segment(
    ubm: &GmmModel,
    therapist: &GmmModel,
    segment_frames: &FeatureMatrix,
    threshold: f64,
) -> Result<LlrDecision> {
    check_pair(ubm, therapist)?;
    if segment_frames.num_frames() == 0 {
        return Err(Error::InvalidInput("empty segment".into()));
    }
    ubm.check_dim(segment_frames.dim())?;
    Ok(LlrDecision::new(
        segment_llr(ubm, therapist, segment_frames.values.view()),
        threshold,
    ))
}

/// Offset below the smallest therapist score when every segment is therapist.
pub const CALIBRATION_MARGIN: f64 = 1e-3;

/// Error rates of a threshold on labelled scores.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThresholdRates {
    pub threshold: f64,
    /// Therapist segments kept as patient, over therapist segments.
    pub insertion_rate: f64,
    /// Patient segments removed as therapist, over patient segments.
    pub deletion_rate: f64,
}

pub fn threshold_rates(scores: &[(f64, SpeakerLabel)], threshold: f64) -> ThresholdRates {
    let therapist = scores.iter().filter(|s| s.1 == SpeakerLabel::Therapist).count();
    let patient = scores.iter().filter(|s| s.1 == SpeakerLabel::Patient).count();
    let inserted = scores
        .iter()
        .filter(|(llr, l)| *l == SpeakerLabel::Therapist && *llr <= threshold)
        .count();
    let deleted = scores
        .iter()
        .filter(|(llr, l)| *l == SpeakerLabel::Patient && *llr > threshold)
        .count();
    let rate = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    ThresholdRates {
        threshold,
        insertion_rate: rate(inserted, therapist),
        deletion_rate: rate(deleted, patient),
    }
}

/// Candidate thresholds: midpoints between consecutive distinct scores, plus one
/// below the minimum and one above the maximum.
pub fn candidate_thresholds(scores: &[(f64, SpeakerLabel)]) -> Vec<f64> {
    let mut v: Vec<f64> = scores.iter().map(|s| s.0).collect();
    v.sort_by(f64::total_cmp);
    v.dedup();
    let mut out = Vec::with_capacity(v.len() + 1);
    out.push(v[0] - CALIBRATION_MARGIN);
    out.extend(v.windows(2).map(|w| 0.5 * (w[0] + w[1])));
    out.push(v[v.len() - 1] + CALIBRATION_MARGIN);
    out
}

/// Picks the threshold with the fewest therapist insertions, then the fewest
/// patient deletions, then the lowest value.
pub fn calibrate_from_scores(scores: &[(f64, SpeakerLabel)]) -> Result<ThresholdRates> {
    if !scores.iter().any(|s| s.1 == SpeakerLabel::Therapist) {
        return Err(Error::InvalidInput(
            "calibration needs at least one therapist segment".into(),
        ));
    }
    if scores
        .iter()
        .any(|s| s.1 == SpeakerLabel::Unassigned || !s.0.is_finite())
    {
        return Err(Error::InvalidInput(
            "calibration scores must be finite and labelled".into(),
        ));
    }
    let best = candidate_thresholds(scores)
        .into_iter()
        .map(|t| threshold_rates(scores, t))
        .min_by(|a, b| {
            a.insertion_rate
                .total_cmp(&b.insertion_rate)
                .then(a.deletion_rate.total_cmp(&b.deletion_rate))
                .then(a.threshold.total_cmp(&b.threshold))
        })
        .expect("at least two candidates");
    Ok(best)
}

pub fn score_labelled_segments(
    control_segments: &[(FeatureMatrix, SpeakerLabel)],
    ubm: &GmmModel,
    therapist: &GmmModel,
) -> Result<Vec<(f64, SpeakerLabel)>> {
    check_pair(ubm, therapist)?;
    control_segments
        .par_iter()
        .map(|(f, label)| Ok((score_segment(ubm, therapist, f, 0.0)?.llr, *label)))
        .collect()
}

pub fn calibrate_threshold(
    control_segments: &[(FeatureMatrix, SpeakerLabel)],
    ubm: &GmmModel,
    therapist: &GmmModel,
) -> Result<f64> {
    let scores = score_labelled_segments(control_segments, ubm, therapist)?;
    Ok(calibrate_from_scores(&scores)?.threshold)
}

/// Assigns PATIENT or THERAPIST to every speech segment. `feats` must be
/// frame-aligned with the segment list. Non-speech segments are left unassigned.
pub fn filter_therapist(
    segments: &SegmentList,
    feats: &FeatureMatrix,
    ubm: &GmmModel,
    therapist: &GmmModel,
    threshold: f64,
) -> Result<SegmentList> {
    check_pair(ubm, therapist)?;
    ubm.check_dim(feats.dim())?;
    if segments.num_frames() > feats.num_frames() {
        return Err(Error::InvalidInput(format!(
            "segments cover {} frames but features have {}",
            segments.num_frames(),
            feats.num_frames()
        )));
    }
    let mut out = segments.clone();
    for seg in &mut out.segments {
        seg.speaker = match seg.sns {
            SnsLabel::NonSpeech => SpeakerLabel::Unassigned,
            SnsLabel::Speech => {
                let rows = feats.values.slice(ndarray::s![seg.start..seg.end, ..]);
                match LlrDecision::new(segment_llr(ubm, therapist, rows), threshold).verdict {
                    Verdict::Therapist => SpeakerLabel::Therapist,
                    Verdict::Patient => SpeakerLabel::Patient,
                }
            }
        };
    }
    out.coalesce();
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::FeatureKind;
    use ndarray::array;
    use rand_distr::{Distribution, Normal, StandardNormal};

    fn fm(values: Array2<f64>) -> FeatureMatrix {
        FeatureMatrix::new(values, FeatureKind::Mfcc26, 10.0)
    }

    fn blobs(seed: u64, n: usize) -> FeatureMatrix {
        let mut rng = crate::seed::rng_from(seed);
        let centers = [[-3.0, 1.0], [3.0, -2.0]];
        fm(Array2::from_shape_fn((n, 2), |(i, d)| {
            let z: f64 = StandardNormal.sample(&mut rng);
            centers[i % 2][d] + 0.5 * z
        }))
    }

    #[test]
    fn two_blobs_recovered() {
        let m = train_ubm(&blobs(1, 2000), 2, 3).unwrap();
        let mut found: Vec<Vec<f64>> = m.means.rows().into_iter().map(|r| r.to_vec()).collect();
        found.sort_by(|a, b| a[0].total_cmp(&b[0]));
        assert!(
            (found[0][0] + 3.0).abs() < 0.1 && (found[0][1] - 1.0).abs() < 0.1,
            "{found:?}"
        );
        assert!(
            (found[1][0] - 3.0).abs() < 0.1 && (found[1][1] + 2.0).abs() < 0.1,
            "{found:?}"
        );
        assert!((m.weights.sum() - 1.0).abs() < 1e-10);
    }

    #[test]
    fn single_component_is_closed_form() {
        let data = blobs(2, 301);
        let m = train_ubm(&data, 1, 0).unwrap();
        let n = 301.0;
        for d in 0..2 {
            let col = data.values.column(d);
            let mean = col.sum() / n;
            let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            assert!((m.means[[0, d]] - mean).abs() < 1e-12);
            assert!((m.variances[[0, d]] - var).abs() < 1e-12);
        }
    }

    #[test]
    fn em_trace_is_monotone() {
        let fit = train_ubm_traced(&blobs(4, 800), 4, 9).unwrap();
        for w in fit.final_phase_trace.windows(2) {
            assert!(w[1] >= w[0] - 1e-9, "{w:?}");
        }
        assert!(train_ubm(&blobs(4, 100), 3, 0).is_err());
        assert!(train_ubm(&fm(Array2::zeros((3, 2))), 4, 0).is_err());
    }

    #[test]
    fn fixed_seed_is_bit_identical() {
        let data = blobs(5, 1000);
        assert_eq!(train_ubm(&data, 4, 11).unwrap(), train_ubm(&data, 4, 11).unwrap());
    }

    fn two_component_ubm() -> GmmModel {
        GmmModel {
            weights: array![0.5, 0.5],
            means: array![[-10.0, 0.0], [10.0, 0.0]],
            variances: array![[1.0, 1.0], [1.0, 1.0]],
            feature_kind: "Mfcc26".into(),
        }
    }

    #[test]
    fn map_limits() {
        let ubm = two_component_ubm();
        let enrol = fm(array![[9.0, 1.0], [9.5, 0.5], [10.5, 1.5]]);
        let prior = map_adapt(&ubm, &enrol, &MapConfig { relevance_factor: 1e12 }).unwrap();
        assert!((&prior.means - &ubm.means).iter().all(|v| v.abs() < 1e-6));
        let data = map_adapt(
            &ubm,
            &enrol,
            &MapConfig {
                relevance_factor: 1e-12,
            },
        )
        .unwrap();
        assert!((data.means[[1, 0]] - 29.0 / 3.0).abs() < 1e-6);
        assert!((data.means[[1, 1]] - 1.0).abs() < 1e-6);
        assert_eq!(data.weights, ubm.weights);
        assert_eq!(data.variances, ubm.variances);
        assert!(map_adapt(&ubm, &fm(array![[1.0, 2.0, 3.0]]), &MapConfig::default()).is_err());
    }

    #[test]
    fn map_midpoint_when_count_equals_relevance() {
        let ubm = GmmModel {
            weights: array![1.0],
            means: array![[0.0, 2.0]],
            variances: array![[1.0, 1.0]],
            feature_kind: "Mfcc26".into(),
        };
        let enrol = fm(array![[1.0, 0.0], [3.0, 2.0], [2.0, 7.0], [6.0, -1.0]]);
        let adapted = map_adapt(&ubm, &enrol, &MapConfig { relevance_factor: 4.0 }).unwrap();
        // data mean (3, 2); UBM mean (0, 2)
        assert!((adapted.means[[0, 0]] - 1.5).abs() < 1e-9);
        assert!((adapted.means[[0, 1]] - 2.0).abs() < 1e-9);
    }

    #[test]
    fn loglik_closed_form_and_brute_force() {
        let m = GmmModel {
            weights: array![1.0],
            means: array![[0.5, -1.0, 2.0]],
            variances: array![[1.0, 1.0, 1.0]],
            feature_kind: "x".into(),
        };
        let at_mean = gmm_avg_loglik(&m, &fm(array![[0.5, -1.0, 2.0]])).unwrap();
        assert!((at_mean + 1.5 * (2.0 * std::f64::consts::PI).ln()).abs() < 1e-12);

        let mut rng = crate::seed::rng_from(8);
        let normal = Normal::new(0.0, 1.0).unwrap();
        for _ in 0..10 {
            let k = 3;
            let dim = 2;
            let w: Vec<f64> = (0..k).map(|_| rng.random_range(0.1..1.0)).collect();
            let ws: f64 = w.iter().sum();
            let model = GmmModel {
                weights: Array1::from_iter(w.iter().map(|v| v / ws)),
                means: Array2::from_shape_fn((k, dim), |_| normal.sample(&mut rng)),
                variances: Array2::from_shape_fn((k, dim), |_| rng.random_range(0.3..2.0)),
                feature_kind: "x".into(),
            };
            let frames = Array2::from_shape_fn((7, dim), |_| normal.sample(&mut rng));
            let naive: f64 = frames
                .rows()
                .into_iter()
                .map(|x| {
                    (0..k)
                        .map(|c| {
                            let mut p = model.weights[c];
                            for d in 0..dim {
                                let v = model.variances[[c, d]];
                                p *= (-(x[d] - model.means[[c, d]]).powi(2) / (2.0 * v)).exp()
                                    / (2.0 * std::f64::consts::PI * v).sqrt();
                            }
                            p
                        })
                        .sum::<f64>()
                        .ln()
                })
                .sum::<f64>()
                / 7.0;
            let fast = gmm_avg_loglik(&model, &fm(frames.clone())).unwrap();
            assert!((naive - fast).abs() < 1e-8);
            let doubled = ndarray::concatenate![Axis(0), frames, frames];
            assert!((gmm_avg_loglik(&model, &fm(doubled)).unwrap() - fast).abs() < 1e-12);
        }
    }

    #[test]
    fn scoring_cases() {
        let ubm = two_component_ubm();
        let seg = fm(array![[9.0, 0.0], [11.0, 0.5]]);
        let same = score_segment(&ubm, &ubm, &seg, 0.0).unwrap();
        assert_eq!(same.llr, 0.0);
        assert_eq!(same.verdict, Verdict::Patient);

        let therapist = GmmModel {
            weights: array![1.0],
            means: array![[10.0, 0.0]],
            variances: array![[1.0, 1.0]],
            feature_kind: "Mfcc26".into(),
        };
        let mut ubm1 = two_component_ubm();
        ubm1.means = array![[-10.0, 0.0], [-12.0, 0.0]];
        let d = score_segment(&ubm1, &therapist, &seg, 0.0).unwrap();
        assert!(d.llr > 0.0);
        assert_eq!(d.verdict, Verdict::Therapist);
        let never = score_segment(&ubm1, &therapist, &seg, f64::INFINITY).unwrap();
        assert_eq!(never.verdict, Verdict::Patient);
        let swapped = score_segment(&therapist, &ubm1, &seg, 0.0).unwrap();
        assert_eq!(swapped.llr, -d.llr);
        assert!(score_segment(&ubm, &ubm, &fm(Array2::zeros((0, 2))), 0.0).is_err());
    }

    #[test]
    fn calibration_cases() {
        use SpeakerLabel::{Patient, Therapist};
        let separated = vec![(-3.0, Patient), (-2.0, Patient), (1.0, Therapist), (2.5, Therapist)];
        let r = calibrate_from_scores(&separated).unwrap();
        assert_eq!(r.insertion_rate, 0.0);
        assert_eq!(r.deletion_rate, 0.0);
        assert_eq!(r.threshold, -0.5);

        let all_therapist = vec![(0.4, Therapist), (1.2, Therapist)];
        let r = calibrate_from_scores(&all_therapist).unwrap();
        assert_eq!(r.threshold, 0.4 - CALIBRATION_MARGIN);
        assert!(calibrate_from_scores(&[(1.0, Patient)]).is_err());

        // exhaustive check: no candidate beats the chosen one lexicographically
        let overlapping = vec![
            (-1.0, Patient),
            (0.2, Therapist),
            (0.3, Patient),
            (0.8, Therapist),
            (-0.4, Patient),
            (1.5, Therapist),
        ];
        let best = calibrate_from_scores(&overlapping).unwrap();
        for t in candidate_thresholds(&overlapping) {
            let r = threshold_rates(&overlapping, t);
            assert!(r.insertion_rate >= best.insertion_rate);
        }
        assert_eq!(best.insertion_rate, 0.0);
    }

    #[test]
    fn gmm_json_round_trip() {
        let m = train_ubm(&blobs(6, 400), 2, 1).unwrap();
        assert_eq!(GmmModel::from_json(&m.to_json().unwrap()).unwrap(), m);
        assert!(GmmModel::from_json("{}").is_err());
    }

    #[test]
    fn filter_leaves_non_speech_unassigned() {
        use crate::segmentation::Segment;
        let ubm = two_component_ubm();
        let therapist = GmmModel {
            weights: array![1.0],
            means: array![[10.0, 0.0]],
            variances: array![[1.0, 1.0]],
            feature_kind: "Mfcc26".into(),
        };
        let mut ubm1 = ubm.clone();
        ubm1.means = array![[-10.0, 0.0], [0.0, 0.0]];
        let feats = fm(array![[0.0, 0.0], [0.1, 0.0], [5.0, 5.0], [10.0, 0.0], [9.5, 0.2]]);
        let segs = SegmentList {
            segments: vec![
                Segment {
                    start: 0,
                    end: 2,
                    sns: SnsLabel::Speech,
                    speaker: SpeakerLabel::Unassigned,
                },
                Segment {
                    start: 2,
                    end: 3,
                    sns: SnsLabel::NonSpeech,
                    speaker: SpeakerLabel::Unassigned,
                },
                Segment {
                    start: 3,
                    end: 5,
                    sns: SnsLabel::Speech,
                    speaker: SpeakerLabel::Unassigned,
                },
            ],
            frame_period_ms: 10.0,
        };
        let out = filter_therapist(&segs, &feats, &ubm1, &therapist, 0.0).unwrap();
        let speakers: Vec<SpeakerLabel> = out.segments.iter().map(|s| s.speaker).collect();
        assert_eq!(
            speakers,
            vec![SpeakerLabel::Patient, SpeakerLabel::Unassigned, SpeakerLabel::Therapist]
        );
        assert!(out.check_invariants().is_ok());
    }
}
