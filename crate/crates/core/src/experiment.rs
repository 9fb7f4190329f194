//! Experimental protocol: task-based partitioning, global grid search, per-speaker
//! model banks and utterance-level evaluation reports.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use ndarray::CowArray;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{apply_pca, fit_pca, fit_pca_streaming, stack_context, FeatureMatrix, PcaModel};
use crate::neuralnet::{
    init_network, predict_frames, train, utterance_decision, DnnArchitecture, FrameDataset, LabelledUtterance,
    SavedModel, TrainConfig, TrainHistory,
};
use crate::seed::derive_seed;
use crate::signalio::{MedState, TaskKind};

pub const PCA_VARIANCE_FRACTION: f64 = 0.95;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub path: PathBuf,
    pub speaker_id: String,
    pub task: TaskKind,
    pub state: MedState,
}

impl ManifestEntry {
    /// File stem, used to name derived artifacts and report rows.
    pub fn utterance_id(&self) -> String {
        self.path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default()
    }

    /// Ground-truth segment file stored next to the audio, if any.
    pub fn truth_path(&self) -> PathBuf {
        crate::synthcorpus::truth_path_for(&self.path)
    }
}

/// Recordings with speaker, task and state. Paths are absolute once loaded.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct CorpusManifest {
    pub entries: Vec<ManifestEntry>,
}

impl CorpusManifest {
    pub fn new(entries: Vec<ManifestEntry>) -> Result<Self> {
        let mut seen = BTreeSet::new();
        for e in &entries {
            if !seen.insert((e.speaker_id.clone(), e.task, e.state)) {
                return Err(Error::InvalidInput(format!(
                    "duplicate manifest entry {}/{}/{}",
                    e.speaker_id,
                    e.task.code(),
                    e.state
                )));
            }
        }
        Ok(Self { entries })
    }

    /// Parses `path,speaker_id,task,state` rows; relative paths resolve against `base`.
    pub fn parse(text: &str, base: &Path) -> Result<Self> {
        let mut reader = csv::ReaderBuilder::new()
            .trim(csv::Trim::All)
            .from_reader(text.as_bytes());
        let headers = reader
            .headers()
            .map_err(|e| Error::parse("manifest", e.to_string()))?
            .clone();
        let expected = ["path", "speaker_id", "task", "state"];
        if headers.iter().collect::<Vec<_>>() != expected {
            return Err(Error::parse(
                "manifest",
                format!("expected header {}", expected.join(",")),
            ));
        }
        let mut entries = Vec::new();
        for (i, record) in reader.records().enumerate() {
            let r = record.map_err(|e| Error::parse("manifest", e.to_string()))?;
            let ctx = format!("manifest row {}", i + 2);
            let path = PathBuf::from(&r[0]);
            let path = if path.is_absolute() { path } else { base.join(path) };
            entries.push(ManifestEntry {
                path: std::path::absolute(&path).map_err(|e| Error::io(&path, e))?,
                speaker_id: r[1].to_string(),
                task: r[2]
                    .parse()
                    .map_err(|e: Error| Error::parse(ctx.clone(), e.to_string()))?,
                state: r[3]
                    .parse()
                    .map_err(|e: Error| Error::parse(ctx.clone(), e.to_string()))?,
            });
        }
        Self::new(entries)
    }

    /// Reads a manifest file and checks that every referenced recording exists.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let manifest = Self::parse(&text, path.parent().unwrap_or(Path::new(".")))?;
        manifest.check_files()?;
        Ok(manifest)
    }

    pub fn check_files(&self) -> Result<()> {
        let missing: Vec<String> = self
            .entries
            .iter()
            .filter(|e| !e.path.is_file())
            .map(|e| e.path.display().to_string())
            .collect();
        if missing.is_empty() {
            Ok(())
        } else {
            Err(Error::MissingEntries(missing))
        }
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("path,speaker_id,task,state\n");
        for e in &self.entries {
            out.push_str(&format!(
                "{},{},{},{}\n",
                e.path.display(),
                e.speaker_id,
                e.task.code(),
                e.state
            ));
        }
        out
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn speakers(&self) -> Vec<String> {
        let set: BTreeSet<&String> = self.entries.iter().map(|e| &e.speaker_id).collect();
        set.into_iter().cloned().collect()
    }

    pub fn for_speaker<'a>(&'a self, speaker: &'a str) -> impl Iterator<Item = &'a ManifestEntry> + 'a {
        self.entries.iter().filter(move |e| e.speaker_id == speaker)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct SplitPlan {
    pub train: Vec<TaskKind>,
    pub dev: Vec<TaskKind>,
    pub test: Vec<TaskKind>,
}

impl SplitPlan {
    /// Train on MPT, DDK, words, prosodic sentences and conversation; develop on
    /// sentences; test on /a/, reading text and storytelling.
    pub fn standard() -> Self {
        Self {
            train: vec![
                TaskKind::MaxPhonation,
                TaskKind::Diadochokinesis,
                TaskKind::ReadingWords,
                TaskKind::ProsodicSentences,
                TaskKind::Conversation,
            ],
            dev: vec![TaskKind::ReadingSentences],
            test: vec![TaskKind::SustainedVowel, TaskKind::ReadingText, TaskKind::Storytelling],
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, set) in [("train", &self.train), ("dev", &self.dev), ("test", &self.test)] {
            if set.is_empty() {
                return Err(Error::InvalidInput(format!("{name} task set is empty")));
            }
        }
        let all: Vec<TaskKind> = self.train.iter().chain(&self.dev).chain(&self.test).copied().collect();
        let unique: BTreeSet<TaskKind> = all.iter().copied().collect();
        if unique.len() != all.len() {
            return Err(Error::InvalidInput("split task sets must be disjoint".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Partition {
    pub train: CorpusManifest,
    pub dev: CorpusManifest,
    pub test: CorpusManifest,
}

/// Speaker-dependent split by task: every speaker appears in all three subsets.
pub fn partition(manifest: &CorpusManifest, plan: &SplitPlan) -> Result<Partition> {
    plan.validate()?;
    if let Some(e) = manifest.entries.iter().find(|e| e.state == MedState::Unknown) {
        return Err(Error::InvalidInput(format!(
            "{} has no medication state",
            e.utterance_id()
        )));
    }
    let present: BTreeSet<(&str, TaskKind, MedState)> = manifest
        .entries
        .iter()
        .map(|e| (e.speaker_id.as_str(), e.task, e.state))
        .collect();
    let mut missing = Vec::new();
    for speaker in manifest.speakers() {
        for task in plan.train.iter().chain(&plan.dev).chain(&plan.test) {
            for state in [MedState::On, MedState::Off] {
                if !present.contains(&(speaker.as_str(), *task, state)) {
                    missing.push(format!("{speaker}/{}/{state}", task.code()));
                }
            }
        }
    }
    if !missing.is_empty() {
        return Err(Error::MissingEntries(missing));
    }
    let pick = |tasks: &[TaskKind]| CorpusManifest {
        entries: manifest
            .entries
            .iter()
            .filter(|e| tasks.contains(&e.task))
            .cloned()
            .collect(),
    };
    Ok(Partition {
        train: pick(&plan.train),
        dev: pick(&plan.dev),
        test: pick(&plan.test),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum FeatureSet {
    #[serde(rename = "mfcc")]
    Mfcc,
    #[serde(rename = "mfcc-delta")]
    MfccDelta,
    #[serde(rename = "egemaps")]
    Egemaps,
}

impl FeatureSet {
    pub const ALL: [FeatureSet; 3] = [FeatureSet::Mfcc, FeatureSet::MfccDelta, FeatureSet::Egemaps];

    pub fn code(self) -> &'static str {
        match self {
            FeatureSet::Mfcc => "mfcc",
            FeatureSet::MfccDelta => "mfcc-delta",
            FeatureSet::Egemaps => "egemaps",
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            FeatureSet::Mfcc => "MFCC",
            FeatureSet::MfccDelta => "MFCC+Δ",
            FeatureSet::Egemaps => "eGeMAPS",
        }
    }
}

impl FromStr for FeatureSet {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        FeatureSet::ALL
            .into_iter()
            .find(|f| f.code() == s)
            .ok_or_else(|| Error::parse("feature set", format!("unknown feature set '{s}'")))
    }
}

/// One configuration shared by every speaker's model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GlobalConfig {
    pub feature_set: FeatureSet,
    pub pca: bool,
    pub context: usize,
    pub hidden: Vec<usize>,
    pub learning_rate: f64,
}

impl Default for GlobalConfig {
    fn default() -> Self {
        GlobalConfig::new(FeatureSet::MfccDelta, true, 11, &[512, 128], 0.003)
    }
}

impl Default for SplitPlan {
    fn default() -> Self {
        SplitPlan::standard()
    }
}

impl GlobalConfig {
    pub fn new(feature_set: FeatureSet, pca: bool, context: usize, hidden: &[usize], learning_rate: f64) -> Self {
        Self {
            feature_set,
            pca,
            context,
            hidden: hidden.to_vec(),
            learning_rate,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.context == 0 || self.context % 2 == 0 {
            return Err(Error::InvalidInput(format!(
                "context must be odd, got {}",
                self.context
            )));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidInput("learning rate must be positive".into()));
        }
        DnnArchitecture::new(1, self.hidden.clone()).map(|_| ())
    }

    pub fn features_label(&self) -> String {
        format!("{}{}", self.feature_set.label(), if self.pca { "+PCA" } else { "" })
    }

    pub fn label(&self) -> String {
        format!(
            "{} ctx={} {}-1 α={}",
            self.features_label(),
            self.context,
            self.hidden
                .iter()
                .map(ToString::to_string)
                .collect::<Vec<_>>()
                .join("-"),
            self.learning_rate
        )
    }

    /// Six fixed configurations, one per feature pipeline (MFCC, MFCC+Δ, eGeMAPS, each with and without PCA).
    pub fn feature_table() -> Vec<GlobalConfig> {
        use FeatureSet::*;
        vec![
            GlobalConfig::new(Mfcc, false, 15, &[512, 128], 0.003),
            GlobalConfig::new(MfccDelta, false, 15, &[512, 128], 0.01),
            GlobalConfig::new(Egemaps, false, 15, &[128, 64], 0.001),
            GlobalConfig::new(Mfcc, true, 15, &[256, 128, 32], 0.01),
            GlobalConfig::new(MfccDelta, true, 11, &[512, 128], 0.003),
            GlobalConfig::new(Egemaps, true, 15, &[512, 128], 0.003),
        ]
    }
}

/// Cartesian search space over every configuration axis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchSpace {
    pub feature_sets: Vec<FeatureSet>,
    pub pca: Vec<bool>,
    pub contexts: Vec<usize>,
    pub architectures: Vec<Vec<usize>>,
    pub learning_rates: Vec<f64>,
}

/// 1 to 3 hidden layers with non-increasing widths from the searched set.
pub fn search_architectures() -> Vec<Vec<usize>> {
    let widths = crate::neuralnet::SEARCH_WIDTHS;
    let mut out = Vec::new();
    for &a in widths.iter().rev() {
        out.push(vec![a]);
    }
    for &a in widths.iter().rev() {
        for &b in widths.iter().rev().filter(|&&b| b <= a) {
            out.push(vec![a, b]);
        }
    }
    for &a in widths.iter().rev() {
        for &b in widths.iter().rev().filter(|&&b| b <= a) {
            for &c in widths.iter().rev().filter(|&&c| c <= b) {
                out.push(vec![a, b, c]);
            }
        }
    }
    out
}

impl SearchSpace {
    pub fn full() -> Self {
        Self {
            feature_sets: FeatureSet::ALL.to_vec(),
            pca: vec![false, true],
            contexts: vec![1, 5, 11, 15],
            architectures: search_architectures(),
            learning_rates: vec![0.001, 0.003, 0.01],
        }
    }

    pub fn expand(&self) -> Vec<GlobalConfig> {
        let mut out = Vec::new();
        for &f in &self.feature_sets {
            for &p in &self.pca {
                for &c in &self.contexts {
                    for a in &self.architectures {
                        for &lr in &self.learning_rates {
                            out.push(GlobalConfig::new(f, p, c, a, lr));
                        }
                    }
                }
            }
        }
        out
    }
}

/// Normalized features of one whole recording and the frames to classify.
#[derive(Debug, Clone, PartialEq)]
pub struct UtteranceFeatures {
    pub features: FeatureMatrix,
    /// Ascending indices of patient-speech frames.
    pub keep: Vec<usize>,
}

/// Source of per-recording features, e.g. an on-disk cache.
pub trait FeatureStore: Sync {
    fn load(&self, entry: &ManifestEntry, set: FeatureSet) -> Result<UtteranceFeatures>;
}

/// Stacks context over the whole recording, then keeps the patient frames.
pub fn prepare_utterance(u: &UtteranceFeatures, context: usize) -> Result<FeatureMatrix> {
    if u.keep.iter().any(|&i| i >= u.features.num_frames()) {
        return Err(Error::InvalidInput("frame selection exceeds the feature matrix".into()));
    }
    Ok(stack_context(&u.features, context)?.select_frames(&u.keep))
}

fn project(input: FeatureMatrix, pca: Option<&PcaModel>) -> Result<FeatureMatrix> {
    match pca {
        Some(p) => apply_pca(p, &input),
        None => Ok(input),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BankOptions {
    pub pca_fraction: f64,
    /// Fit one PCA per speaker instead of one pooled projection.
    pub per_speaker_pca: bool,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub balance_classes: bool,
}

impl Default for BankOptions {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            pca_fraction: PCA_VARIANCE_FRACTION,
            per_speaker_pca: false,
            batch_size: t.batch_size,
            max_epochs: t.max_epochs,
            patience: t.patience,
            balance_classes: t.balance_classes,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BankMember {
    pub model: SavedModel,
    pub pca: Option<PcaModel>,
    pub history: TrainHistory,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Exclusion {
    pub id: String,
    pub reason: String,
}

/// One classifier per speaker, all sharing one configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct SpeakerModelBank {
    pub config: GlobalConfig,
    pub seed: u64,
    pub pca: Option<PcaModel>,
    pub members: BTreeMap<String, BankMember>,
    pub excluded: Vec<Exclusion>,
}

impl SpeakerModelBank {
    pub fn pca_for(&self, speaker: &str) -> Option<&PcaModel> {
        self.members
            .get(speaker)
            .and_then(|m| m.pca.as_ref())
            .or(self.pca.as_ref())
    }

    pub fn input_dim(&self) -> Option<usize> {
        self.members.values().next().map(|m| m.model.model.input_dim())
    }

    pub fn num_params(&self) -> Option<usize> {
        self.members.values().next().map(|m| m.model.model.num_params())
    }

    pub fn mean_dev_accuracy(&self) -> Option<f64> {
        if self.members.is_empty() {
            return None;
        }
        let sum: f64 = self.members.values().map(|m| m.history.best_dev_accuracy).sum();
        Some(sum / self.members.len() as f64)
    }
}

pub const BANK_MANIFEST_FILE: &str = "bank_manifest.json";
const BANK_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct BankMemberFile {
    speaker: String,
    model_file: String,
    pca: Option<PcaModel>,
    history: TrainHistory,
}

#[derive(Serialize, Deserialize)]
struct BankManifestFile {
    version: u32,
    config: GlobalConfig,
    seed: u64,
    pca: Option<PcaModel>,
    members: Vec<BankMemberFile>,
    excluded: Vec<Exclusion>,
}

impl SpeakerModelBank {
    /// Writes `bank_manifest.json` plus one model file per speaker into `dir`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        let models = dir.join("models");
        std::fs::create_dir_all(&models).map_err(|e| Error::io(&models, e))?;
        let mut members = Vec::new();
        for (speaker, m) in &self.members {
            let model_file = format!("models/{speaker}.json");
            m.model.save(dir.join(&model_file))?;
            members.push(BankMemberFile {
                speaker: speaker.clone(),
                model_file,
                pca: m.pca.clone(),
                history: m.history.clone(),
            });
        }
        let manifest = BankManifestFile {
            version: BANK_VERSION,
            config: self.config.clone(),
            seed: self.seed,
            pca: self.pca.clone(),
            members,
            excluded: self.excluded.clone(),
        };
        let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::parse("bank manifest", e.to_string()))?;
        let path = dir.join(BANK_MANIFEST_FILE);
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let path = dir.join(BANK_MANIFEST_FILE);
        if !path.is_file() {
            return Err(Error::MissingModelBank(path.display().to_string()));
        }
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let file: BankManifestFile =
            serde_json::from_str(&text).map_err(|e| Error::parse("bank manifest", e.to_string()))?;
        if file.version != BANK_VERSION {
            return Err(Error::parse(
                "bank manifest",
                format!("unsupported version {}", file.version),
            ));
        }
        let mut members = BTreeMap::new();
        for m in file.members {
            let model = SavedModel::load(dir.join(&m.model_file))?;
            members.insert(
                m.speaker,
                BankMember {
                    model,
                    pca: m.pca,
                    history: m.history,
                },
            );
        }
        Ok(Self {
            config: file.config,
            seed: file.seed,
            pca: file.pca,
            members,
            excluded: file.excluded,
        })
    }
}

fn load_inputs(
    store: &dyn FeatureStore,
    entries: &[&ManifestEntry],
    config: &GlobalConfig,
) -> Result<Vec<(FeatureMatrix, MedState)>> {
    entries
        .iter()
        .map(|e| {
            let u = store.load(e, config.feature_set)?;
            Ok((prepare_utterance(&u, config.context)?, e.state))
        })
        .collect()
}

fn fit_pooled_pca(
    store: &dyn FeatureStore,
    train: &CorpusManifest,
    config: &GlobalConfig,
    fraction: f64,
) -> Result<PcaModel> {
    let first = train
        .entries
        .first()
        .ok_or_else(|| Error::InvalidInput("empty training split".into()))?;
    let dim = prepare_utterance(&store.load(first, config.feature_set)?, config.context)?.dim();
    fit_pca_streaming(fraction, dim, || {
        train.entries.iter().map(|e| {
            let u = store.load(e, config.feature_set)?;
            Ok(CowArray::from(prepare_utterance(&u, config.context)?.values))
        })
    })
}

fn train_member(
    speaker: &str,
    config: &GlobalConfig,
    store: &dyn FeatureStore,
    train_entries: &[&ManifestEntry],
    dev_entries: &[&ManifestEntry],
    pooled_pca: Option<&PcaModel>,
    seed: u64,
    opts: &BankOptions,
) -> Result<BankMember> {
    let raw_train = load_inputs(store, train_entries, config)?;
    let own_pca = if config.pca && opts.per_speaker_pca {
        let rows: Vec<ndarray::ArrayView2<'_, f64>> = raw_train.iter().map(|(m, _)| m.values.view()).collect();
        let stacked = ndarray::concatenate(ndarray::Axis(0), &rows).map_err(|e| Error::InvalidInput(e.to_string()))?;
        let kind = raw_train[0].0.kind;
        Some(fit_pca(&FeatureMatrix::new(stacked, kind, 10.0), opts.pca_fraction)?)
    } else {
        None
    };
    let pca = own_pca.as_ref().or(pooled_pca);

    let mut frames = Vec::new();
    let mut labels = Vec::new();
    for (m, state) in raw_train {
        let m = project(m, pca)?;
        let y = state.target().expect("partitioned entries carry a state");
        labels.extend(std::iter::repeat_n(y, m.num_frames()));
        frames.push(m.values);
    }
    let views: Vec<_> = frames.iter().map(|f| f.view()).collect();
    let frames = ndarray::concatenate(ndarray::Axis(0), &views).map_err(|e| Error::InvalidInput(e.to_string()))?;
    if frames.nrows() == 0 {
        return Err(Error::InvalidInput(format!("speaker {speaker} has no training frames")));
    }
    let dev: Vec<LabelledUtterance> = load_inputs(store, dev_entries, config)?
        .into_iter()
        .filter(|(m, _)| m.num_frames() > 0)
        .map(|(m, state)| {
            Ok(LabelledUtterance {
                frames: project(m, pca)?.values,
                state,
            })
        })
        .collect::<Result<_>>()?;

    let member_seed = derive_seed(seed, "bank", speaker);
    let arch = DnnArchitecture::new(frames.ncols(), config.hidden.clone())?;
    let init = init_network(&arch, derive_seed(member_seed, "init", speaker))?;
    let cfg = TrainConfig {
        learning_rate: config.learning_rate,
        batch_size: opts.batch_size,
        max_epochs: opts.max_epochs,
        patience: opts.patience,
        seed: member_seed,
        balance_classes: opts.balance_classes,
    };
    let (model, history) = train(init, &FrameDataset { frames, labels }, &dev, &cfg)?;
    Ok(BankMember {
        model: SavedModel {
            model,
            train_config: Some(cfg),
            dev_accuracy: Some(history.best_dev_accuracy),
        },
        pca: own_pca,
        history,
    })
}

/// Trains one model per speaker on that speaker's training recordings. Speakers
/// whose data cannot train a model (one class only, no frames) are excluded.
pub fn train_speaker_bank(
    config: &GlobalConfig,
    store: &dyn FeatureStore,
    train_split: &CorpusManifest,
    dev_split: &CorpusManifest,
    seed: u64,
    opts: &BankOptions,
) -> Result<SpeakerModelBank> {
    config.validate()?;
    let pooled = if config.pca && !opts.per_speaker_pca {
        Some(fit_pooled_pca(store, train_split, config, opts.pca_fraction)?)
    } else {
        None
    };
    let speakers = train_split.speakers();
    let results: Vec<(String, Result<BankMember>)> = speakers
        .par_iter()
        .map(|s| {
            let tr: Vec<&ManifestEntry> = train_split.for_speaker(s).collect();
            let dv: Vec<&ManifestEntry> = dev_split.for_speaker(s).collect();
            let r = train_member(s, config, store, &tr, &dv, pooled.as_ref(), seed, opts);
            (s.clone(), r)
        })
        .collect();
    let mut members = BTreeMap::new();
    let mut excluded = Vec::new();
    for (speaker, r) in results {
        match r {
            Ok(m) => {
                members.insert(speaker, m);
            }
            Err(Error::InvalidInput(reason) | Error::Degenerate(reason)) => {
                log::warn!("excluding speaker {speaker}: {reason}");
                excluded.push(Exclusion { id: speaker, reason });
            }
            Err(e) => return Err(e),
        }
    }
    Ok(SpeakerModelBank {
        config: config.clone(),
        seed,
        pca: pooled,
        members,
        excluded,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridCell {
    pub config: GlobalConfig,
    pub mean_dev_accuracy: Option<f64>,
    pub num_params: Option<usize>,
    pub per_speaker: BTreeMap<String, f64>,
    pub failure: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridReport {
    pub seed: u64,
    pub cells: Vec<GridCell>,
    pub selected: usize,
}

impl GridReport {
    pub fn best(&self) -> &GlobalConfig {
        &self.cells[self.selected].config
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("grid search, seed {}\n", self.seed);
        out.push_str(&format!(
            "{:<3} {:<16} {:>4} {:<14} {:>6} {:>9} {:>9}\n",
            "", "features", "ctx", "hidden", "alpha", "params", "dev acc"
        ));
        for (i, c) in self.cells.iter().enumerate() {
            let acc = c
                .mean_dev_accuracy
                .map_or_else(|| "failed".to_string(), |a| format!("{:.2}", 100.0 * a));
            out.push_str(&format!(
                "{:<3} {:<16} {:>4} {:<14} {:>6} {:>9} {:>9}\n",
                if i == self.selected { "*" } else { "" },
                c.config.features_label(),
                c.config.context,
                c.config
                    .hidden
                    .iter()
                    .map(ToString::to_string)
                    .collect::<Vec<_>>()
                    .join("-"),
                c.config.learning_rate,
                c.num_params.map_or_else(|| "-".into(), |p| p.to_string()),
                acc
            ));
        }
        out
    }
}

/// Better cell first: higher mean dev accuracy, then fewer parameters, smaller
/// context, smaller learning rate.
fn cell_order(a: &GridCell, b: &GridCell) -> std::cmp::Ordering {
    let acc = |c: &GridCell| c.mean_dev_accuracy.unwrap_or(f64::NEG_INFINITY);
    acc(b)
        .total_cmp(&acc(a))
        .then(a.num_params.cmp(&b.num_params))
        .then(a.config.context.cmp(&b.config.context))
        .then(a.config.learning_rate.total_cmp(&b.config.learning_rate))
}

/// Trains a bank per candidate and selects the best average dev accuracy. A
/// candidate that fails for any speaker is disqualified.
pub fn grid_search(
    candidates: &[GlobalConfig],
    store: &dyn FeatureStore,
    train_split: &CorpusManifest,
    dev_split: &CorpusManifest,
    seed: u64,
    opts: &BankOptions,
) -> Result<GridReport> {
    if candidates.is_empty() {
        return Err(Error::InvalidInput("empty search space".into()));
    }
    let cells: Vec<GridCell> = candidates
        .iter()
        .map(|config| {
            let failed = |failure: String| GridCell {
                config: config.clone(),
                mean_dev_accuracy: None,
                num_params: None,
                per_speaker: BTreeMap::new(),
                failure: Some(failure),
            };
            match train_speaker_bank(config, store, train_split, dev_split, seed, opts) {
                Ok(bank) if bank.excluded.is_empty() && !bank.members.is_empty() => GridCell {
                    config: config.clone(),
                    mean_dev_accuracy: bank.mean_dev_accuracy(),
                    num_params: bank.num_params(),
                    per_speaker: bank
                        .members
                        .iter()
                        .map(|(s, m)| (s.clone(), m.history.best_dev_accuracy))
                        .collect(),
                    failure: None,
                },
                Ok(bank) => failed(format!("{} speaker(s) excluded", bank.excluded.len())),
                Err(e) => failed(e.to_string()),
            }
        })
        .collect();
    let selected = (0..cells.len())
        .filter(|&i| cells[i].failure.is_none())
        .min_by(|&a, &b| cell_order(&cells[a], &cells[b]))
        .ok_or_else(|| Error::InvalidInput("every grid cell failed".into()))?;
    Ok(GridReport { seed, cells, selected })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Tally {
    pub correct: usize,
    pub total: usize,
}

impl Tally {
    pub fn accuracy(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            100.0 * self.correct as f64 / self.total as f64
        }
    }

    fn add(&mut self, ok: bool) {
        self.total += 1;
        if ok {
            self.correct += 1;
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UtteranceResult {
    pub id: String,
    pub speaker_id: String,
    pub task: TaskKind,
    pub truth: MedState,
    pub predicted: MedState,
    pub mean_prob: f64,
    pub frames: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Confusion {
    pub on_as_on: usize,
    pub on_as_off: usize,
    pub off_as_on: usize,
    pub off_as_off: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskRow {
    pub task: TaskKind,
    pub tally: Tally,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub split: String,
    pub seed: u64,
    pub config: GlobalConfig,
    pub input_dim: Option<usize>,
    pub overall: Tally,
    pub per_task: Vec<TaskRow>,
    /// All tasks except the sustained vowel, when the vowel was evaluated.
    pub excluding_vowel: Option<Tally>,
    pub per_speaker: BTreeMap<String, Tally>,
    pub confusion: Confusion,
    pub utterances: Vec<UtteranceResult>,
    pub excluded: Vec<Exclusion>,
}

impl EvaluationReport {
    pub fn task_accuracy(&self, task: TaskKind) -> Option<f64> {
        self.per_task
            .iter()
            .find(|r| r.task == task)
            .map(|r| r.tally.accuracy())
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::parse("report", e.to_string()))
    }

    /// Aligned-column summary: configuration row, then accuracy by task.
    pub fn to_text(&self) -> String {
        let c = &self.config;
        let mut out = format!("{} evaluation, seed {}\n\n", self.split, self.seed);
        out.push_str(&format!(
            "{:<16} {:>4} {:>9} {:<14} {:>6} {:>9}\n",
            "features", "ctx", "input dim", "hidden", "alpha", "acc (%)"
        ));
        out.push_str(&format!(
            "{:<16} {:>4} {:>9} {:<14} {:>6} {:>9.2}\n\n",
            c.features_label(),
            c.context,
            self.input_dim.map_or_else(|| "-".into(), |d| d.to_string()),
            format!(
                "{}-1",
                c.hidden.iter().map(ToString::to_string).collect::<Vec<_>>().join("-")
            ),
            c.learning_rate,
            self.overall.accuracy()
        ));
        let mut header = Vec::new();
        let mut values = Vec::new();
        for row in &self.per_task {
            header.push(row.task.label().to_string());
            values.push(format!("{:.2}", row.tally.accuracy()));
        }
        if let Some(t) = &self.excluding_vowel {
            header.push("Excluding /a/".into());
            values.push(format!("{:.2}", t.accuracy()));
        }
        header.push("Overall".into());
        values.push(format!("{:.2}", self.overall.accuracy()));
        let widths: Vec<usize> = header.iter().map(|h| h.chars().count().max(7)).collect();
        let line = |cells: &[String]| {
            cells
                .iter()
                .zip(&widths)
                .map(|(c, w)| format!("{c:>w$}"))
                .collect::<Vec<_>>()
                .join("  ")
        };
        out.push_str(&line(&header));
        out.push('\n');
        out.push_str(&line(&values));
        out.push_str("\n\n");
        let cf = &self.confusion;
        out.push_str(&format!(
            "confusion (truth -> predicted): ON->ON {}  ON->OFF {}  OFF->ON {}  OFF->OFF {}\n",
            cf.on_as_on, cf.on_as_off, cf.off_as_on, cf.off_as_off
        ));
        out.push_str(&format!(
            "utterances: {} correct of {}\n\n",
            self.overall.correct, self.overall.total
        ));
        out.push_str("speaker    correct  total  acc (%)\n");
        for (s, t) in &self.per_speaker {
            out.push_str(&format!(
                "{:<10} {:>7} {:>6} {:>8.2}\n",
                s,
                t.correct,
                t.total,
                t.accuracy()
            ));
        }
        for e in &self.excluded {
            out.push_str(&format!("excluded {}: {}\n", e.id, e.reason));
        }
        out
    }
}

/// Per-utterance probability source used by [`evaluate_with`].
pub trait UtteranceScorer: Sync {
    /// Mean frame probability of ON, or `None` when the speaker has no model.
    fn frame_probabilities(&self, entry: &ManifestEntry) -> Result<Option<Vec<f64>>>;
}

struct BankScorer<'a> {
    bank: &'a SpeakerModelBank,
    store: &'a dyn FeatureStore,
}

impl UtteranceScorer for BankScorer<'_> {
    fn frame_probabilities(&self, entry: &ManifestEntry) -> Result<Option<Vec<f64>>> {
        let Some(member) = self.bank.members.get(&entry.speaker_id) else {
            return Ok(None);
        };
        let u = self.store.load(entry, self.bank.config.feature_set)?;
        let input = project(
            prepare_utterance(&u, self.bank.config.context)?,
            self.bank.pca_for(&entry.speaker_id),
        )?;
        Ok(Some(predict_frames(&member.model.model, &input)?))
    }
}

/// Scores every utterance of `split` with its own speaker's model.
pub fn evaluate(
    bank: &SpeakerModelBank,
    store: &dyn FeatureStore,
    split: &CorpusManifest,
    split_name: &str,
) -> Result<EvaluationReport> {
    let scorer = BankScorer { bank, store };
    let mut report = evaluate_with(&scorer, split, split_name, bank.config.clone(), bank.seed)?;
    report.input_dim = bank.input_dim();
    Ok(report)
}

pub fn evaluate_with(
    scorer: &dyn UtteranceScorer,
    split: &CorpusManifest,
    split_name: &str,
    config: GlobalConfig,
    seed: u64,
) -> Result<EvaluationReport> {
    let scored: Vec<Result<Option<Vec<f64>>>> = split
        .entries
        .par_iter()
        .map(|e| scorer.frame_probabilities(e))
        .collect();
    let mut utterances = Vec::new();
    let mut excluded = Vec::new();
    for (entry, probs) in split.entries.iter().zip(scored) {
        if entry.state == MedState::Unknown {
            return Err(Error::InvalidInput(format!(
                "{} has no medication state",
                entry.utterance_id()
            )));
        }
        let id = entry.utterance_id();
        match probs? {
            None => excluded.push(Exclusion {
                id,
                reason: format!("no model for speaker {}", entry.speaker_id),
            }),
            Some(p) if p.is_empty() => excluded.push(Exclusion {
                id,
                reason: "no patient speech frames".into(),
            }),
            Some(p) => {
                let d = utterance_decision(&p)?;
                utterances.push(UtteranceResult {
                    id,
                    speaker_id: entry.speaker_id.clone(),
                    task: entry.task,
                    truth: entry.state,
                    predicted: d.label,
                    mean_prob: d.mean_prob,
                    frames: d.frame_count,
                });
            }
        }
    }

    let mut overall = Tally::default();
    let mut by_task: BTreeMap<TaskKind, Tally> = BTreeMap::new();
    let mut per_speaker: BTreeMap<String, Tally> = BTreeMap::new();
    let mut confusion = Confusion::default();
    for u in &utterances {
        let ok = u.truth == u.predicted;
        overall.add(ok);
        by_task.entry(u.task).or_default().add(ok);
        per_speaker.entry(u.speaker_id.clone()).or_default().add(ok);
        match (u.truth, u.predicted) {
            (MedState::On, MedState::On) => confusion.on_as_on += 1,
            (MedState::On, _) => confusion.on_as_off += 1,
            (_, MedState::On) => confusion.off_as_on += 1,
            _ => confusion.off_as_off += 1,
        }
    }
    let excluding_vowel = by_task.contains_key(&TaskKind::SustainedVowel).then(|| {
        let mut t = Tally::default();
        for (task, tally) in &by_task {
            if *task != TaskKind::SustainedVowel {
                t.correct += tally.correct;
                t.total += tally.total;
            }
        }
        t
    });
    Ok(EvaluationReport {
        split: split_name.to_string(),
        seed,
        config,
        input_dim: None,
        overall,
        per_task: by_task
            .into_iter()
            .map(|(task, tally)| TaskRow { task, tally })
            .collect(),
        excluding_vowel,
        per_speaker,
        confusion,
        utterances,
        excluded,
    })
}

/// Two-sided binomial band `[lo, hi]` (in %) containing at least `coverage` of
/// the mass of Binomial(n, 0.5) accuracies, computed from the exact CDF.
pub fn chance_band(n: usize, coverage: f64) -> (f64, f64) {
    let tail = (1.0 - coverage) / 2.0;
    let log_half_n = n as f64 * 0.5f64.ln();
    let mut log_c = 0.0f64;
    let mut pmf = Vec::with_capacity(n + 1);
    for k in 0..=n {
        if k > 0 {
            log_c += ((n - k + 1) as f64).ln() - (k as f64).ln();
        }
        pmf.push((log_c + log_half_n).exp());
    }
    let mut cum = 0.0;
    let mut lo = 0;
    for (k, p) in pmf.iter().enumerate() {
        if cum + p > tail {
            lo = k;
            break;
        }
        cum += p;
    }
    let hi = n - lo;
    (100.0 * lo as f64 / n as f64, 100.0 * hi as f64 / n as f64)
}

impl fmt::Display for GlobalConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.label())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::FeatureKind;
    use ndarray::Array2;
    use rand_distr::{Distribution, StandardNormal};

    fn entry(speaker: &str, task: TaskKind, state: MedState) -> ManifestEntry {
        ManifestEntry {
            path: PathBuf::from(format!("/corpus/{speaker}_{}_{}.wav", task.code(), state)),
            speaker_id: speaker.into(),
            task,
            state,
        }
    }

    fn full_manifest(speakers: usize) -> CorpusManifest {
        let mut entries = Vec::new();
        for s in 0..speakers {
            for task in TaskKind::ALL {
                for state in [MedState::On, MedState::Off] {
                    entries.push(entry(&format!("S{s:02}"), task, state));
                }
            }
        }
        CorpusManifest::new(entries).unwrap()
    }

    #[test]
    fn partition_counts() {
        let p = partition(&full_manifest(74), &SplitPlan::standard()).unwrap();
        assert_eq!((p.train.len(), p.dev.len(), p.test.len()), (740, 148, 444));
        let p = partition(&full_manifest(1), &SplitPlan::standard()).unwrap();
        assert_eq!((p.train.len(), p.dev.len(), p.test.len()), (10, 2, 6));
        for split in [&p.train, &p.dev, &p.test] {
            assert_eq!(split.speakers(), vec!["S00".to_string()]);
        }
        let mut plan = SplitPlan::standard();
        plan.dev.clear();
        assert!(partition(&full_manifest(1), &plan).is_err());
    }

    #[test]
    fn partition_lists_missing_entries() {
        let mut m = full_manifest(2);
        m.entries
            .retain(|e| !(e.speaker_id == "S01" && e.task == TaskKind::Storytelling && e.state == MedState::Off));
        match partition(&m, &SplitPlan::standard()) {
            Err(Error::MissingEntries(v)) => assert_eq!(v, vec!["S01/story/OFF".to_string()]),
            other => panic!("{other:?}"),
        }
        let dup = vec![entry("A", TaskKind::Conversation, MedState::On); 2];
        assert!(CorpusManifest::new(dup).is_err());
    }

    #[test]
    fn manifest_csv_round_trip() {
        let m = full_manifest(2);
        let parsed = CorpusManifest::parse(&m.to_csv(), Path::new("/")).unwrap();
        assert_eq!(parsed, m);
        let rel = CorpusManifest::parse("path,speaker_id,task,state\na/x.wav,P1,ddk,ON\n", Path::new("/data")).unwrap();
        assert_eq!(rel.entries[0].path, PathBuf::from("/data/a/x.wav"));
        assert!(CorpusManifest::parse("path,speaker,task,state\n", Path::new("/")).is_err());
        assert!(CorpusManifest::parse("path,speaker_id,task,state\nx.wav,P1,walk,ON\n", Path::new("/")).is_err());
    }

    #[test]
    fn search_space_shapes() {
        let archs = search_architectures();
        assert_eq!(archs.len(), 5 + 15 + 35);
        assert!(archs.iter().all(|a| a.windows(2).all(|w| w[0] >= w[1])));
        assert_eq!(SearchSpace::full().expand().len(), 3 * 2 * 4 * 55 * 3);
        assert!(GlobalConfig::feature_table().iter().all(|c| c.validate().is_ok()));
        assert!(GlobalConfig::new(FeatureSet::Mfcc, false, 4, &[32], 0.01)
            .validate()
            .is_err());
    }

    /// Two-dimensional features whose first column encodes the state.
    struct SyntheticStore {
        shift: f64,
    }

    impl FeatureStore for SyntheticStore {
        fn load(&self, entry: &ManifestEntry, _set: FeatureSet) -> Result<UtteranceFeatures> {
            let seed = derive_seed(1, "store", &entry.utterance_id());
            let mut rng = crate::seed::rng_from(seed);
            let sign = if entry.state == MedState::On { 1.0 } else { -1.0 };
            let values = Array2::from_shape_fn((60, 3), |(_, d)| {
                let z: f64 = StandardNormal.sample(&mut rng);
                if d == 0 {
                    sign * self.shift + z
                } else {
                    z
                }
            });
            Ok(UtteranceFeatures {
                features: FeatureMatrix::new(values, FeatureKind::Mfcc13, 10.0),
                keep: (5..55).collect(),
            })
        }
    }

    fn quick_opts() -> BankOptions {
        BankOptions {
            max_epochs: 15,
            patience: 5,
            ..Default::default()
        }
    }

    #[test]
    fn bank_and_evaluation() {
        let p = partition(&full_manifest(3), &SplitPlan::standard()).unwrap();
        let store = SyntheticStore { shift: 2.0 };
        let config = GlobalConfig::new(FeatureSet::Mfcc, true, 3, &[16], 0.01);
        let bank = train_speaker_bank(&config, &store, &p.train, &p.dev, 5, &quick_opts()).unwrap();
        assert_eq!(bank.members.len(), 3);
        let report = evaluate(&bank, &store, &p.test, "test").unwrap();
        assert_eq!(report.overall.total, 18);
        assert_eq!(report.overall.accuracy(), 100.0);
        let task_sum: usize = report.per_task.iter().map(|r| r.tally.total).sum();
        assert_eq!(task_sum, report.overall.total);
        assert_eq!(report.excluding_vowel.unwrap().total, 12);
        assert!(report.to_text().contains("Excluding /a/"));

        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            SpeakerModelBank::load(dir.path()),
            Err(Error::MissingModelBank(_))
        ));
        bank.save(dir.path()).unwrap();
        assert_eq!(SpeakerModelBank::load(dir.path()).unwrap(), bank);

        // PCA must come from training frames only
        let refit = fit_pooled_pca(&store, &p.train, &config, PCA_VARIANCE_FRACTION).unwrap();
        assert_eq!(bank.pca.as_ref().unwrap(), &refit);
    }

    #[test]
    fn removing_a_speaker_leaves_others_unchanged() {
        let p = partition(&full_manifest(3), &SplitPlan::standard()).unwrap();
        let store = SyntheticStore { shift: 1.0 };
        let config = GlobalConfig::new(FeatureSet::Mfcc, false, 1, &[8], 0.01);
        let full = train_speaker_bank(&config, &store, &p.train, &p.dev, 2, &quick_opts()).unwrap();
        let drop = |m: &CorpusManifest| CorpusManifest {
            entries: m.entries.iter().filter(|e| e.speaker_id != "S01").cloned().collect(),
        };
        let partial = train_speaker_bank(&config, &store, &drop(&p.train), &drop(&p.dev), 2, &quick_opts()).unwrap();
        assert_eq!(partial.members.len(), 2);
        for s in ["S00", "S02"] {
            assert_eq!(partial.members[s], full.members[s]);
        }
    }

    struct ConstantScorer(Option<f64>);

    impl UtteranceScorer for ConstantScorer {
        fn frame_probabilities(&self, entry: &ManifestEntry) -> Result<Option<Vec<f64>>> {
            Ok(Some(match self.0 {
                Some(p) => vec![p; 4],
                None => vec![entry.state.target().unwrap(); 4],
            }))
        }
    }

    #[test]
    fn degenerate_scorers() {
        let p = partition(&full_manifest(2), &SplitPlan::standard()).unwrap();
        let cfg = GlobalConfig::feature_table()[4].clone();
        let oracle = evaluate_with(&ConstantScorer(None), &p.test, "test", cfg.clone(), 0).unwrap();
        assert_eq!(oracle.overall.accuracy(), 100.0);
        assert!(oracle.per_task.iter().all(|r| r.tally.accuracy() == 100.0));
        let half = evaluate_with(&ConstantScorer(Some(0.5)), &p.test, "test", cfg, 0).unwrap();
        assert!(half.utterances.iter().all(|u| u.predicted == MedState::Off));
        assert_eq!(half.overall.accuracy(), 50.0);
    }

    #[test]
    fn grid_search_selection() {
        let p = partition(&full_manifest(2), &SplitPlan::standard()).unwrap();
        let store = SyntheticStore { shift: 1.5 };
        let single = vec![GlobalConfig::new(FeatureSet::Mfcc, false, 1, &[8], 0.01)];
        let r = grid_search(&single, &store, &p.train, &p.dev, 3, &quick_opts()).unwrap();
        assert_eq!(r.best(), &single[0]);

        let cands = vec![
            GlobalConfig::new(FeatureSet::Mfcc, false, 3, &[32], 0.01),
            GlobalConfig::new(FeatureSet::Mfcc, false, 1, &[8], 0.01),
            GlobalConfig::new(FeatureSet::Mfcc, false, 1, &[8], 0.003),
        ];
        let a = grid_search(&cands, &store, &p.train, &p.dev, 3, &quick_opts()).unwrap();
        let b = grid_search(&cands, &store, &p.train, &p.dev, 3, &quick_opts()).unwrap();
        assert_eq!(a, b);
        let best = a.cells[a.selected].mean_dev_accuracy.unwrap();
        assert!(a.cells.iter().all(|c| c.mean_dev_accuracy.unwrap() <= best));
    }

    #[test]
    fn chance_band_is_symmetric_and_covering() {
        let (lo, hi) = chance_band(120, 0.99);
        assert!((lo + hi - 100.0).abs() < 1e-12);
        assert!(lo > 35.0 && lo < 40.0, "{lo}");
    }
}
