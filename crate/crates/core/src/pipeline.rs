//! File-level orchestration of the processing stages over a working directory.
//!
//! Layout under the working directory:
//!
//! ```text
//! segments/<utt>.seg.tsv        speech/non-speech segmentation
//! speakerid/ubm.json            background model
//! speakerid/therapist.json      adapted therapist model
//! speakerid/calibration.json    decision threshold and its control-set rates
//! filtered/<utt>.seg.tsv        segmentation with patient/therapist labels
//! features/mfcc26/<utt>.pdfc    raw MFCC13 + deltas
//! features/egemaps/<utt>.pdfc   raw eGeMAPS descriptors
//! ```

use std::path::{Path, PathBuf};

use ndarray::{concatenate, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::experiment::{
    evaluate, grid_search, partition, train_speaker_bank, BankOptions, CorpusManifest, EvaluationReport, FeatureSet,
    FeatureStore, GlobalConfig, GridReport, ManifestEntry, SpeakerModelBank, SplitPlan, UtteranceFeatures,
};
use crate::features::{
    column_stats, delta, egemaps_lld_with, mfcc, read_feature_cache, write_feature_cache, znorm_per_file,
    EgemapsConfig, FeatureKind, FeatureMatrix, MfccConfig, DELTA_HALF_WINDOW,
};
use crate::seed::derive_seed;
use crate::segmentation::{segment_recording, SegmentList, SnsFsmParams, SnsLabel, SpeakerLabel};
use crate::signalio::read_wav;
use crate::speakerid::{
    calibrate_from_scores, filter_therapist, map_adapt, score_labelled_segments, train_ubm, GmmModel, MapConfig,
    ThresholdRates,
};
use crate::synthcorpus::{generate_corpus, CorpusSpec, CONTROL_MANIFEST_FILE, MANIFEST_FILE};

/// Segment frame period, shared by segmentation, MFCC and eGeMAPS.
pub const FRAME_PERIOD_MS: f64 = 10.0;

/// eGeMAPS frame `t` is centred on segmentation frame `t + 2`.
pub const EGEMAPS_FRAME_OFFSET: usize = 2;

/// How speaker-ID features are standardized.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SpeakerIdNorm {
    /// Each recording with its own statistics.
    PerRecording,
    /// One transform estimated on all control speech.
    Corpus,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SpeakerIdConfig {
    pub components: usize,
    pub relevance_factor: f64,
    pub normalization: SpeakerIdNorm,
}

impl Default for SpeakerIdConfig {
    fn default() -> Self {
        Self {
            components: 64,
            relevance_factor: MapConfig::default().relevance_factor,
            normalization: SpeakerIdNorm::Corpus,
        }
    }
}

/// Column-wise affine standardization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    pub fn fit(feat: &FeatureMatrix) -> Result<Self> {
        if feat.num_frames() < 2 {
            return Err(Error::InvalidInput("standardization needs at least 2 frames".into()));
        }
        let (mean, std) = column_stats(feat.values.view());
        Ok(Self {
            mean,
            std: std.into_iter().map(|s| s.max(1e-12)).collect(),
        })
    }

    pub fn apply(&self, feat: &FeatureMatrix) -> Result<FeatureMatrix> {
        if feat.dim() != self.mean.len() {
            return Err(Error::DimensionMismatch {
                expected: self.mean.len(),
                got: feat.dim(),
            });
        }
        let mut out = feat.clone();
        for (j, mut col) in out.values.columns_mut().into_iter().enumerate() {
            col.mapv_inplace(|v| (v - self.mean[j]) / self.std[j]);
        }
        out.history.push(crate::features::Transform::ZNorm);
        Ok(out)
    }
}

/// Stage parameters for segmentation, speaker filtering and feature extraction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct StageConfig {
    pub segmentation: SnsFsmParams,
    pub speaker_id: SpeakerIdConfig,
    pub mfcc: MfccConfig,
    pub egemaps: EgemapsConfig,
}

#[derive(Debug, Clone)]
pub struct WorkDir {
    pub root: PathBuf,
}

impl WorkDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn segments(&self, e: &ManifestEntry) -> PathBuf {
        self.root.join("segments").join(format!("{}.seg.tsv", e.utterance_id()))
    }

    pub fn filtered(&self, e: &ManifestEntry) -> PathBuf {
        self.root.join("filtered").join(format!("{}.seg.tsv", e.utterance_id()))
    }

    pub fn cache(&self, e: &ManifestEntry, kind: FeatureKind) -> PathBuf {
        let dir = match kind {
            FeatureKind::Egemaps23 => "egemaps",
            _ => "mfcc26",
        };
        self.root
            .join("features")
            .join(dir)
            .join(format!("{}.pdfc", e.utterance_id()))
    }

    pub fn speaker_id_dir(&self) -> PathBuf {
        self.root.join("speakerid")
    }
}

fn ensure_parent(path: &Path) -> Result<()> {
    let dir = path.parent().expect("artifact paths have a parent");
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    ensure_parent(path)?;
    let text =
        serde_json::to_string_pretty(value).map_err(|e| Error::parse(path.display().to_string(), e.to_string()))?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::parse(path.display().to_string(), e.to_string()))
}

/// MFCC13 with deltas, before any normalization.
pub fn mfcc_with_deltas(clip: &crate::AudioClip, cfg: &MfccConfig) -> Result<FeatureMatrix> {
    Ok(delta(&mfcc(clip, cfg)?, DELTA_HALF_WINDOW))
}

/// MFCC13 + deltas for speaker ID: per-recording z-norm, or the corpus
/// standardizer when one is given.
pub fn speaker_id_features(
    clip: &crate::AudioClip,
    cfg: &MfccConfig,
    corpus: Option<&Standardizer>,
) -> Result<FeatureMatrix> {
    let raw = mfcc_with_deltas(clip, cfg)?;
    match corpus {
        Some(s) => s.apply(&raw),
        None => znorm_per_file(&raw),
    }
}

/// Standardizes every column with statistics of the `reference` rows only.
pub fn znorm_with_reference(feat: &FeatureMatrix, reference: &[usize]) -> Result<FeatureMatrix> {
    if reference.len() < 2 {
        return Err(Error::InvalidInput(format!(
            "normalization needs at least 2 reference frames, got {}",
            reference.len()
        )));
    }
    let rows = feat.values.select(Axis(0), reference);
    let (means, stds) = column_stats(rows.view());
    let mut out = feat.clone();
    for (j, mut col) in out.values.columns_mut().into_iter().enumerate() {
        if stds[j] <= 1e-12 * (1.0 + means[j].abs()) {
            col.fill(0.0);
        } else {
            col.mapv_inplace(|v| (v - means[j]) / stds[j]);
        }
    }
    out.history.push(crate::features::Transform::ZNorm);
    Ok(out)
}

/// Speech/non-speech segmentation of every recording.
pub fn segment_stage(manifest: &CorpusManifest, work: &WorkDir, params: &SnsFsmParams, seed: u64) -> Result<()> {
    log::info!("segmenting {} recordings", manifest.len());
    manifest.entries.par_iter().try_for_each(|e| {
        let clip = read_wav(&e.path)?;
        let segs = segment_recording(&clip, params, derive_seed(seed, "segment", &e.utterance_id()))?;
        let out = work.segments(e);
        ensure_parent(&out)?;
        segs.write(out)
    })
}

/// Background model, therapist model and calibrated threshold.
#[derive(Debug, Clone, PartialEq)]
pub struct SpeakerIdModels {
    pub ubm: GmmModel,
    pub therapist: GmmModel,
    pub calibration: ThresholdRates,
    /// Present with corpus-level normalization.
    pub standardizer: Option<Standardizer>,
}

impl SpeakerIdModels {
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.ubm.save(dir.join("ubm.json"))?;
        self.therapist.save(dir.join("therapist.json"))?;
        write_json(&dir.join("calibration.json"), &self.calibration)?;
        let norm = dir.join("standardizer.json");
        match &self.standardizer {
            Some(s) => write_json(&norm, s),
            None if norm.exists() => std::fs::remove_file(&norm).map_err(|e| Error::io(&norm, e)),
            None => Ok(()),
        }
    }

    pub fn load(dir: &Path) -> Result<Self> {
        Ok(Self {
            ubm: GmmModel::load(dir.join("ubm.json"))?,
            therapist: GmmModel::load(dir.join("therapist.json"))?,
            calibration: read_json(&dir.join("calibration.json"))?,
            standardizer: {
                let norm = dir.join("standardizer.json");
                if norm.exists() {
                    Some(read_json(&norm)?)
                } else {
                    None
                }
            },
        })
    }
}

/// Control recordings with their ground-truth segments, as speaker-ID frames.
struct ControlData {
    all_speech: Vec<FeatureMatrix>,
    therapist: Vec<FeatureMatrix>,
    segments: Vec<(FeatureMatrix, SpeakerLabel)>,
}

fn load_control(e: &ManifestEntry, cfg: &MfccConfig, corpus: Option<&Standardizer>) -> Result<ControlData> {
    let clip = read_wav(&e.path)?;
    let feats = speaker_id_features(&clip, cfg, corpus)?;
    let truth = SegmentList::read(e.truth_path(), FRAME_PERIOD_MS)?;
    let n = feats.num_frames().min(truth.num_frames());
    let clip_to = |v: Vec<usize>| v.into_iter().filter(|&t| t < n).collect::<Vec<_>>();
    let segments = truth
        .segments
        .iter()
        .filter(|s| s.sns == SnsLabel::Speech && s.start < n)
        .map(|s| {
            let idx: Vec<usize> = (s.start..s.end.min(n)).collect();
            (feats.select_frames(&idx), s.speaker)
        })
        .collect();
    Ok(ControlData {
        all_speech: vec![feats.select_frames(&clip_to(truth.speech_frames()))],
        therapist: vec![feats.select_frames(&clip_to(truth.frames_of(SnsLabel::Speech, SpeakerLabel::Therapist)))],
        segments,
    })
}

fn stack_rows(parts: &[FeatureMatrix]) -> Result<FeatureMatrix> {
    let views: Vec<_> = parts.iter().map(|m| m.values.view()).collect();
    let values = concatenate(Axis(0), &views).map_err(|e| Error::InvalidInput(e.to_string()))?;
    Ok(FeatureMatrix::new(values, parts[0].kind, FRAME_PERIOD_MS))
}

/// Trains the background model on all control speech, adapts the therapist
/// model on control therapist speech and calibrates the threshold on the
/// labelled control segments.
pub fn train_speaker_id(controls: &CorpusManifest, cfg: &StageConfig, seed: u64) -> Result<SpeakerIdModels> {
    if controls.is_empty() {
        return Err(Error::InvalidInput(
            "speaker-ID training needs control recordings".into(),
        ));
    }
    let standardizer = match cfg.speaker_id.normalization {
        SpeakerIdNorm::PerRecording => None,
        SpeakerIdNorm::Corpus => {
            let raw: Vec<FeatureMatrix> = controls
                .entries
                .par_iter()
                .map(|e| {
                    let feats = mfcc_with_deltas(&read_wav(&e.path)?, &cfg.mfcc)?;
                    let truth = SegmentList::read(e.truth_path(), FRAME_PERIOD_MS)?;
                    let speech: Vec<usize> = truth
                        .speech_frames()
                        .into_iter()
                        .filter(|&t| t < feats.num_frames())
                        .collect();
                    Ok(feats.select_frames(&speech))
                })
                .collect::<Result<_>>()?;
            Some(Standardizer::fit(&stack_rows(&raw)?)?)
        }
    };
    let data: Vec<ControlData> = controls
        .entries
        .par_iter()
        .map(|e| load_control(e, &cfg.mfcc, standardizer.as_ref()))
        .collect::<Result<_>>()?;
    let mut all = Vec::new();
    let mut therapist = Vec::new();
    let mut segments = Vec::new();
    for d in data {
        all.extend(d.all_speech);
        therapist.extend(d.therapist);
        segments.extend(d.segments);
    }
    log::info!("training a {}-component background model", cfg.speaker_id.components);
    let ubm = train_ubm(
        &stack_rows(&all)?,
        cfg.speaker_id.components,
        derive_seed(seed, "ubm", ""),
    )?;
    let enrol = stack_rows(&therapist)?;
    if enrol.num_frames() == 0 {
        return Err(Error::InvalidInput(
            "control recordings contain no therapist speech".into(),
        ));
    }
    let therapist = map_adapt(
        &ubm,
        &enrol,
        &MapConfig {
            relevance_factor: cfg.speaker_id.relevance_factor,
        },
    )?;
    let scores = score_labelled_segments(&segments, &ubm, &therapist)?;
    let calibration = calibrate_from_scores(&scores)?;
    log::info!(
        "threshold {:.4}: insertion {:.4}, deletion {:.4}",
        calibration.threshold,
        calibration.insertion_rate,
        calibration.deletion_rate
    );
    Ok(SpeakerIdModels {
        ubm,
        therapist,
        calibration,
        standardizer,
    })
}

/// Labels every speech segment as patient or therapist.
pub fn filter_stage(
    manifest: &CorpusManifest,
    work: &WorkDir,
    models: &SpeakerIdModels,
    cfg: &MfccConfig,
) -> Result<()> {
    log::info!("filtering therapist speech in {} recordings", manifest.len());
    manifest.entries.par_iter().try_for_each(|e| {
        let clip = read_wav(&e.path)?;
        let feats = speaker_id_features(&clip, cfg, models.standardizer.as_ref())?;
        let segs = SegmentList::read(work.segments(e), FRAME_PERIOD_MS)?;
        let filtered = filter_therapist(
            &segs,
            &feats,
            &models.ubm,
            &models.therapist,
            models.calibration.threshold,
        )?;
        let out = work.filtered(e);
        ensure_parent(&out)?;
        filtered.write(out)
    })
}

/// Writes raw feature caches for the requested sets.
pub fn extract_stage(manifest: &CorpusManifest, work: &WorkDir, sets: &[FeatureSet], cfg: &StageConfig) -> Result<()> {
    let want_mfcc = sets.iter().any(|s| *s != FeatureSet::Egemaps);
    let want_egemaps = sets.contains(&FeatureSet::Egemaps);
    log::info!("extracting features for {} recordings", manifest.len());
    manifest.entries.par_iter().try_for_each(|e| {
        let clip = read_wav(&e.path)?;
        if want_mfcc {
            let p = work.cache(e, FeatureKind::Mfcc26);
            ensure_parent(&p)?;
            write_feature_cache(&p, &mfcc_with_deltas(&clip, &cfg.mfcc)?)?;
        }
        if want_egemaps {
            let p = work.cache(e, FeatureKind::Egemaps23);
            ensure_parent(&p)?;
            write_feature_cache(&p, &egemaps_lld_with(&clip, &cfg.egemaps)?)?;
        }
        Ok(())
    })
}

/// Feature caches plus filtered segmentations from a working directory.
pub struct CacheStore {
    pub work: WorkDir,
}

impl FeatureStore for CacheStore {
    fn load(&self, entry: &ManifestEntry, set: FeatureSet) -> Result<UtteranceFeatures> {
        let segs = SegmentList::read(self.work.filtered(entry), FRAME_PERIOD_MS)?;
        let patient = segs.frames_of(SnsLabel::Speech, SpeakerLabel::Patient);
        let (kind, offset) = match set {
            FeatureSet::Egemaps => (FeatureKind::Egemaps23, EGEMAPS_FRAME_OFFSET),
            _ => (FeatureKind::Mfcc26, 0),
        };
        let raw = read_feature_cache(self.work.cache(entry, kind))?;
        let raw = match set {
            FeatureSet::Mfcc => raw.leading_columns(13)?,
            _ => raw,
        };
        let n = raw.num_frames();
        let keep: Vec<usize> = patient
            .iter()
            .filter_map(|&t| t.checked_sub(offset))
            .filter(|&t| t < n)
            .collect();
        if keep.len() < 2 {
            return Ok(UtteranceFeatures {
                features: raw,
                keep: Vec::new(),
            });
        }
        Ok(UtteranceFeatures {
            features: znorm_with_reference(&raw, &keep)?,
            keep,
        })
    }
}

/// Frame-level agreement of automatic speech/non-speech labels with ground truth.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct SegmentationScore {
    pub agreeing_frames: usize,
    pub total_frames: usize,
}

impl SegmentationScore {
    pub fn agreement(&self) -> f64 {
        if self.total_frames == 0 {
            0.0
        } else {
            self.agreeing_frames as f64 / self.total_frames as f64
        }
    }
}

pub fn segmentation_score(manifest: &CorpusManifest, work: &WorkDir) -> Result<SegmentationScore> {
    let parts: Vec<SegmentationScore> = manifest
        .entries
        .par_iter()
        .map(|e| {
            let auto = SegmentList::read(work.segments(e), FRAME_PERIOD_MS)?.frame_labels();
            let truth = SegmentList::read(e.truth_path(), FRAME_PERIOD_MS)?.frame_labels();
            let n = auto.len().min(truth.len());
            let agreeing = (0..n).filter(|&t| auto[t].0 == truth[t].0).count();
            Ok(SegmentationScore {
                agreeing_frames: agreeing,
                total_frames: n,
            })
        })
        .collect::<Result<_>>()?;
    Ok(parts
        .iter()
        .fold(SegmentationScore::default(), |a, p| SegmentationScore {
            agreeing_frames: a.agreeing_frames + p.agreeing_frames,
            total_frames: a.total_frames + p.total_frames,
        }))
}

/// Frame-level therapist filtering errors, over frames detected as speech.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct FilterScore {
    pub therapist_frames: usize,
    /// Therapist frames kept as patient speech.
    pub inserted: usize,
    pub patient_frames: usize,
    /// Patient frames removed as therapist speech.
    pub deleted: usize,
}

impl FilterScore {
    pub fn insertion_rate(&self) -> f64 {
        ratio(self.inserted, self.therapist_frames)
    }

    pub fn deletion_rate(&self) -> f64 {
        ratio(self.deleted, self.patient_frames)
    }
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

pub fn filter_score(manifest: &CorpusManifest, work: &WorkDir) -> Result<FilterScore> {
    let parts: Vec<FilterScore> = manifest
        .entries
        .par_iter()
        .map(|e| {
            let auto = SegmentList::read(work.filtered(e), FRAME_PERIOD_MS)?.frame_labels();
            let truth = SegmentList::read(e.truth_path(), FRAME_PERIOD_MS)?.frame_labels();
            let mut s = FilterScore::default();
            for (a, t) in auto.iter().zip(&truth) {
                if a.0 != SnsLabel::Speech || t.0 != SnsLabel::Speech {
                    continue;
                }
                match t.1 {
                    SpeakerLabel::Therapist => {
                        s.therapist_frames += 1;
                        s.inserted += usize::from(a.1 == SpeakerLabel::Patient);
                    }
                    SpeakerLabel::Patient => {
                        s.patient_frames += 1;
                        s.deleted += usize::from(a.1 == SpeakerLabel::Therapist);
                    }
                    SpeakerLabel::Unassigned => {}
                }
            }
            Ok(s)
        })
        .collect::<Result<_>>()?;
    Ok(parts.iter().fold(FilterScore::default(), |a, p| FilterScore {
        therapist_frames: a.therapist_frames + p.therapist_frames,
        inserted: a.inserted + p.inserted,
        patient_frames: a.patient_frames + p.patient_frames,
        deleted: a.deleted + p.deleted,
    }))
}

/// Everything `reproduce` needs; all randomness derives from `seed`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReproduceConfig {
    pub seed: u64,
    pub corpus: CorpusSpec,
    pub stages: StageConfig,
    pub plan: SplitPlan,
    pub model: GlobalConfig,
    /// When set, the model configuration is chosen by grid search over these.
    pub search: Option<Vec<GlobalConfig>>,
    pub bank: BankOptions,
}

impl Default for ReproduceConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            corpus: CorpusSpec::default(),
            stages: StageConfig::default(),
            plan: SplitPlan::standard(),
            model: GlobalConfig::default(),
            search: None,
            bank: BankOptions::default(),
        }
    }
}

/// Stage quality measured against the synthetic ground truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub segmentation: SegmentationScore,
    pub calibration: ThresholdRates,
    pub control_filter: FilterScore,
    pub patient_filter: FilterScore,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReproduceOutcome {
    pub diagnostics: Diagnostics,
    pub grid: Option<GridReport>,
    pub bank: SpeakerModelBank,
    pub dev: EvaluationReport,
    pub test: EvaluationReport,
}

/// Output directories of a `reproduce` run.
pub struct RunLayout {
    pub corpus: PathBuf,
    pub work: WorkDir,
    pub bank: PathBuf,
    pub reports: PathBuf,
}

impl RunLayout {
    pub fn new(out: &Path) -> Self {
        Self {
            corpus: out.join("corpus"),
            work: WorkDir::new(out.join("work")),
            bank: out.join("bank"),
            reports: out.join("reports"),
        }
    }
}

pub fn write_report(dir: &Path, name: &str, report: &EvaluationReport) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let txt = dir.join(format!("{name}.txt"));
    std::fs::write(&txt, report.to_text()).map_err(|e| Error::io(&txt, e))?;
    let json = dir.join(format!("{name}.json"));
    std::fs::write(&json, report.to_json()?).map_err(|e| Error::io(&json, e))
}

/// Synthesis, segmentation, therapist filtering, extraction, partitioning,
/// optional grid search, bank training and evaluation.
pub fn reproduce(cfg: &ReproduceConfig, out: &Path) -> Result<ReproduceOutcome> {
    let layout = RunLayout::new(out);
    let mut corpus = cfg.corpus.clone();
    corpus.seed = cfg.seed;
    log::info!(
        "synthesizing {} speakers into {}",
        corpus.num_speakers,
        layout.corpus.display()
    );
    generate_corpus(&corpus, &layout.corpus)?;
    let patients = CorpusManifest::load(layout.corpus.join(MANIFEST_FILE))?;
    let controls = CorpusManifest::load(layout.corpus.join(CONTROL_MANIFEST_FILE))?;
    let work = &layout.work;

    let both = CorpusManifest {
        entries: patients.entries.iter().chain(&controls.entries).cloned().collect(),
    };
    segment_stage(&both, work, &cfg.stages.segmentation, cfg.seed)?;
    let models = train_speaker_id(&controls, &cfg.stages, cfg.seed)?;
    models.save(&work.speaker_id_dir())?;
    filter_stage(&both, work, &models, &cfg.stages.mfcc)?;
    let diagnostics = Diagnostics {
        segmentation: segmentation_score(&patients, work)?,
        calibration: models.calibration,
        control_filter: filter_score(&controls, work)?,
        patient_filter: filter_score(&patients, work)?,
    };
    write_json(&layout.reports.join("diagnostics.json"), &diagnostics)?;

    let mut sets = vec![cfg.model.feature_set];
    if let Some(search) = &cfg.search {
        sets.extend(search.iter().map(|c| c.feature_set));
    }
    extract_stage(&patients, work, &sets, &cfg.stages)?;

    let split = partition(&patients, &cfg.plan)?;
    let store = CacheStore { work: work.clone() };
    let (model, grid) = match &cfg.search {
        Some(candidates) => {
            let g = grid_search(candidates, &store, &split.train, &split.dev, cfg.seed, &cfg.bank)?;
            std::fs::create_dir_all(&layout.reports).map_err(|e| Error::io(&layout.reports, e))?;
            let p = layout.reports.join("grid.txt");
            std::fs::write(&p, g.to_text()).map_err(|e| Error::io(&p, e))?;
            write_json(&layout.reports.join("grid.json"), &g)?;
            (g.best().clone(), Some(g))
        }
        None => (cfg.model.clone(), None),
    };
    log::info!("training speaker models: {model}");
    let bank = train_speaker_bank(&model, &store, &split.train, &split.dev, cfg.seed, &cfg.bank)?;
    bank.save(&layout.bank)?;
    let dev = evaluate(&bank, &store, &split.dev, "dev")?;
    let test = evaluate(&bank, &store, &split.test, "test")?;
    write_report(&layout.reports, "dev", &dev)?;
    write_report(&layout.reports, "test", &test)?;
    Ok(ReproduceOutcome {
        diagnostics,
        grid,
        bank,
        dev,
        test,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn reference_normalization_uses_only_reference_rows() {
        let f = FeatureMatrix::new(array![[1.0, 5.0], [3.0, 5.0], [100.0, 7.0]], FeatureKind::Mfcc26, 10.0);
        let n = znorm_with_reference(&f, &[0, 1]).unwrap();
        assert_eq!(n.values.column(0).to_vec(), vec![-1.0, 1.0, 98.0]);
        assert_eq!(n.values.column(1).to_vec(), vec![0.0, 0.0, 0.0]);
        assert!(znorm_with_reference(&f, &[2]).is_err());
    }

    #[test]
    fn standardizer_whitens_its_fit_data() {
        let f = FeatureMatrix::new(array![[1.0, 10.0], [3.0, 10.0], [5.0, 10.0]], FeatureKind::Mfcc26, 10.0);
        let s = Standardizer::fit(&f).unwrap();
        let z = s.apply(&f).unwrap();
        let (mean, sd) = column_stats(z.values.view());
        assert!(mean.iter().all(|m| m.abs() < 1e-12));
        assert!((sd[0] - 1.0).abs() < 1e-12);
        assert_eq!(z.values.column(1).to_vec(), vec![0.0; 3]);
        let narrow = FeatureMatrix::new(array![[1.0], [2.0]], FeatureKind::Mfcc13, 10.0);
        assert!(s.apply(&narrow).is_err());
        assert!(Standardizer::fit(&narrow.select_frames(&[0])).is_err());
    }

    #[test]
    fn small_corpus_runs_end_to_end() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = ReproduceConfig {
            corpus: CorpusSpec {
                num_speakers: 2,
                num_control: 3,
                ..Default::default()
            },
            stages: StageConfig {
                speaker_id: SpeakerIdConfig {
                    components: 16,
                    ..Default::default()
                },
                ..Default::default()
            },
            model: GlobalConfig::new(FeatureSet::Mfcc, false, 1, &[16], 0.01),
            bank: BankOptions {
                max_epochs: 3,
                patience: 2,
                ..Default::default()
            },
            ..Default::default()
        };
        let out = reproduce(&cfg, dir.path()).unwrap();
        assert_eq!(out.test.overall.total + out.test.excluded.len(), 12);
        assert_eq!(out.bank.members.len(), 2, "{:?}", out.bank.excluded);
        assert!(dir.path().join("reports/test.txt").is_file());
        assert!(dir
            .path()
            .join("bank")
            .join(crate::experiment::BANK_MANIFEST_FILE)
            .is_file());
    }
}
