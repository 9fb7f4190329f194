use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use pdstate::experiment::{
    evaluate, grid_search, partition, train_speaker_bank, BankOptions, CorpusManifest, FeatureSet, GlobalConfig,
    SearchSpace, SpeakerModelBank, SplitPlan,
};
use pdstate::pipeline::{
    extract_stage, filter_stage, reproduce, segment_stage, train_speaker_id, write_report, CacheStore, ReproduceConfig,
    StageConfig, WorkDir,
};
use pdstate::synthcorpus::{generate_corpus, CorpusSpec};

/// Name of the effective-configuration echo written into every output directory.
const CONFIG_ECHO: &str = "effective_config.toml";

mod exit {
    pub const USAGE: u8 = 2;
    pub const MISSING_INPUT: u8 = 3;
    pub const MISSING_BANK: u8 = 4;
    pub const INVALID: u8 = 5;
    pub const STAGE_FAILED: u8 = 6;
}

#[derive(Parser)]
#[command(
    name = "pdstate",
    version,
    about = "Speech-based ON/OFF medication-state classification"
)]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct GlobalArgs {
    /// Master seed; every random stream is derived from it.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (default: available cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// TOML configuration file; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// More log output (repeatable).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus with ground truth and manifests.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        corpus: CorpusArgs,
    },
    /// Speech/non-speech segmentation of every recording in a manifest.
    Segment {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        work: PathBuf,
    },
    /// Train speaker models on control recordings and label therapist speech.
    FilterTherapist {
        #[arg(long)]
        manifest: PathBuf,
        /// Control-group manifest with ground-truth segment files.
        #[arg(long)]
        controls: PathBuf,
        #[arg(long)]
        work: PathBuf,
        /// Background model size (power of two).
        #[arg(long)]
        components: Option<usize>,
        #[arg(long)]
        relevance: Option<f64>,
        /// Fixed decision threshold instead of the calibrated one.
        #[arg(long, allow_hyphen_values = true)]
        threshold: Option<f64>,
    },
    /// Write feature caches for the filtered recordings.
    Extract {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        work: PathBuf,
        /// Feature sets to extract.
        #[arg(long, value_delimiter = ',', default_value = "mfcc-delta")]
        features: Vec<FeatureArg>,
    },
    /// Split a manifest into train/dev/test by task.
    Partition {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Select the global configuration by mean dev accuracy.
    GridSearch {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        work: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum)]
        search: Option<SearchArg>,
        #[command(flatten)]
        training: TrainingArgs,
    },
    /// Train one classifier per speaker with a shared configuration.
    TrainBank {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        work: PathBuf,
        /// Bank output directory.
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        model: ModelArgs,
        #[command(flatten)]
        training: TrainingArgs,
    },
    /// Score a split with a trained bank and write reports.
    Evaluate {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        work: PathBuf,
        #[arg(long)]
        bank: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
    },
    /// Run the whole chain on a fresh synthetic corpus.
    Reproduce {
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        corpus: CorpusArgs,
        #[arg(long, value_enum)]
        search: Option<SearchArg>,
        #[command(flatten)]
        model: ModelArgs,
        #[command(flatten)]
        training: TrainingArgs,
    },
}

#[derive(Args)]
struct CorpusArgs {
    #[arg(long)]
    speakers: Option<usize>,
    #[arg(long)]
    controls: Option<usize>,
    /// OFF-state effect size in [0, 1].
    #[arg(long)]
    delta: Option<f64>,
    #[arg(long)]
    snr: Option<f64>,
    /// Therapist voice close to the patient voices.
    #[arg(long)]
    hard_mode: bool,
}

#[derive(Args)]
struct ModelArgs {
    #[arg(long, value_enum)]
    features: Option<FeatureArg>,
    #[arg(long)]
    pca: Option<bool>,
    #[arg(long)]
    context: Option<usize>,
    /// Hidden layer widths, e.g. 512,128.
    #[arg(long, value_delimiter = ',')]
    hidden: Option<Vec<usize>>,
    #[arg(long)]
    learning_rate: Option<f64>,
}

#[derive(Args)]
struct TrainingArgs {
    #[arg(long)]
    max_epochs: Option<usize>,
    #[arg(long)]
    patience: Option<usize>,
    #[arg(long)]
    per_speaker_pca: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum FeatureArg {
    Mfcc,
    MfccDelta,
    Egemaps,
}

impl From<FeatureArg> for FeatureSet {
    fn from(f: FeatureArg) -> Self {
        match f {
            FeatureArg::Mfcc => FeatureSet::Mfcc,
            FeatureArg::MfccDelta => FeatureSet::MfccDelta,
            FeatureArg::Egemaps => FeatureSet::Egemaps,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Dev,
    Test,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
enum SearchArg {
    /// No search: use the configured model.
    #[default]
    None,
    /// One configuration per feature pipeline.
    FeatureTable,
    /// Every combination of the full search space.
    Full,
}

/// Effective configuration of a run: file values overridden by flags.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
struct RunConfig {
    seed: u64,
    search: SearchArg,
    corpus: CorpusSpec,
    stages: StageConfig,
    plan: SplitPlan,
    model: GlobalConfig,
    bank: BankOptions,
}

impl Default for RunConfig {
    fn default() -> Self {
        let r = ReproduceConfig::default();
        Self {
            seed: r.seed,
            search: SearchArg::None,
            corpus: r.corpus,
            stages: r.stages,
            plan: r.plan,
            model: r.model,
            bank: r.bank,
        }
    }
}

impl RunConfig {
    fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        toml::from_str(&text).map_err(|e| anyhow::Error::new(ConfigError(format!("{}: {e}", path.display()))))
    }

    fn apply_corpus(&mut self, a: &CorpusArgs) {
        let c = &mut self.corpus;
        c.num_speakers = a.speakers.unwrap_or(c.num_speakers);
        c.num_control = a.controls.unwrap_or(c.num_control);
        c.delta = a.delta.unwrap_or(c.delta);
        c.snr_db = a.snr.unwrap_or(c.snr_db);
        c.hard_mode |= a.hard_mode;
        c.seed = self.seed;
    }

    fn apply_model(&mut self, a: &ModelArgs) {
        let m = &mut self.model;
        if let Some(f) = a.features {
            m.feature_set = f.into();
        }
        m.pca = a.pca.unwrap_or(m.pca);
        m.context = a.context.unwrap_or(m.context);
        if let Some(h) = &a.hidden {
            m.hidden = h.clone();
        }
        m.learning_rate = a.learning_rate.unwrap_or(m.learning_rate);
    }

    fn apply_training(&mut self, a: &TrainingArgs) {
        let b = &mut self.bank;
        b.max_epochs = a.max_epochs.unwrap_or(b.max_epochs);
        b.patience = a.patience.unwrap_or(b.patience);
        b.per_speaker_pca |= a.per_speaker_pca;
    }

    fn candidates(&self) -> Option<Vec<GlobalConfig>> {
        match self.search {
            SearchArg::None => None,
            SearchArg::FeatureTable => Some(GlobalConfig::feature_table()),
            SearchArg::Full => Some(SearchSpace::full().expand()),
        }
    }

    fn echo(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        let text = toml::to_string_pretty(self).context("serializing effective config")?;
        let path = dir.join(CONFIG_ECHO);
        std::fs::write(&path, text).with_context(|| format!("writing {}", path.display()))
    }
}

#[derive(Debug)]
struct ConfigError(String);

impl std::error::Error for ConfigError {}

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "invalid configuration: {}", self.0)
    }
}

fn load_manifest(path: &Path) -> Result<CorpusManifest> {
    CorpusManifest::load(path).with_context(|| format!("loading manifest {}", path.display()))
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = RunConfig::load(cli.global.config.as_deref())?;
    if let Some(seed) = cli.global.seed {
        cfg.seed = seed;
    }
    cfg.corpus.seed = cfg.seed;
    let started = Instant::now();
    match &cli.command {
        Command::Synth { out, corpus } => {
            cfg.apply_corpus(corpus);
            cfg.echo(out)?;
            let (patients, controls) = generate_corpus(&cfg.corpus, out)?;
            println!(
                "wrote {} patient and {} control recordings to {}",
                patients.len(),
                controls.len(),
                out.display()
            );
        }
        Command::Segment { manifest, work } => {
            let m = load_manifest(manifest)?;
            cfg.echo(work)?;
            segment_stage(&m, &WorkDir::new(work), &cfg.stages.segmentation, cfg.seed)?;
            println!("segmented {} recordings", m.len());
        }
        Command::FilterTherapist {
            manifest,
            controls,
            work,
            components,
            relevance,
            threshold,
        } => {
            let sid = &mut cfg.stages.speaker_id;
            sid.components = components.unwrap_or(sid.components);
            sid.relevance_factor = relevance.unwrap_or(sid.relevance_factor);
            let m = load_manifest(manifest)?;
            let c = load_manifest(controls)?;
            cfg.echo(work)?;
            let work = WorkDir::new(work);
            let mut models = train_speaker_id(&c, &cfg.stages, cfg.seed)?;
            println!(
                "calibrated threshold {:.4} (control insertion {:.4}, deletion {:.4})",
                models.calibration.threshold, models.calibration.insertion_rate, models.calibration.deletion_rate
            );
            if let Some(t) = threshold {
                models.calibration.threshold = *t;
                println!("using fixed threshold {t:.4}");
            }
            models.save(&work.speaker_id_dir())?;
            filter_stage(&m, &work, &models, &cfg.stages.mfcc)?;
        }
        Command::Extract {
            manifest,
            work,
            features,
        } => {
            let m = load_manifest(manifest)?;
            let sets: Vec<FeatureSet> = features.iter().map(|&f| f.into()).collect();
            cfg.echo(work)?;
            extract_stage(&m, &WorkDir::new(work), &sets, &cfg.stages)?;
            println!("extracted features for {} recordings", m.len());
        }
        Command::Partition { manifest, out } => {
            let m = load_manifest(manifest)?;
            let split = partition(&m, &cfg.plan)?;
            cfg.echo(out)?;
            for (name, part) in [("train", &split.train), ("dev", &split.dev), ("test", &split.test)] {
                part.save(out.join(format!("{name}.csv")))?;
                println!("{name}: {} files", part.len());
            }
        }
        Command::GridSearch {
            manifest,
            work,
            out,
            search,
            training,
        } => {
            cfg.search = search.unwrap_or(match cfg.search {
                SearchArg::None => SearchArg::FeatureTable,
                s => s,
            });
            cfg.apply_training(training);
            let m = load_manifest(manifest)?;
            let split = partition(&m, &cfg.plan)?;
            cfg.echo(out)?;
            let store = CacheStore {
                work: WorkDir::new(work),
            };
            let candidates = cfg.candidates().expect("search selected");
            let report = grid_search(&candidates, &store, &split.train, &split.dev, cfg.seed, &cfg.bank)?;
            std::fs::write(out.join("grid.txt"), report.to_text())?;
            std::fs::write(out.join("grid.json"), serde_json::to_string_pretty(&report)?)?;
            print!("{}", report.to_text());
        }
        Command::TrainBank {
            manifest,
            work,
            out,
            model,
            training,
        } => {
            cfg.apply_model(model);
            cfg.apply_training(training);
            cfg.model.validate().map_err(|e| ConfigError(e.to_string()))?;
            let m = load_manifest(manifest)?;
            let split = partition(&m, &cfg.plan)?;
            cfg.echo(out)?;
            let store = CacheStore {
                work: WorkDir::new(work),
            };
            let bank = train_speaker_bank(&cfg.model, &store, &split.train, &split.dev, cfg.seed, &cfg.bank)?;
            bank.save(out)?;
            for e in &bank.excluded {
                eprintln!("excluded {}: {}", e.id, e.reason);
            }
            println!(
                "trained {} speaker models, mean dev accuracy {:.2}%",
                bank.members.len(),
                100.0 * bank.mean_dev_accuracy().unwrap_or(0.0)
            );
        }
        Command::Evaluate {
            manifest,
            work,
            bank,
            out,
            split,
        } => {
            let bank = SpeakerModelBank::load(bank)?;
            let m = load_manifest(manifest)?;
            let parts = partition(&m, &cfg.plan)?;
            cfg.model = bank.config.clone();
            cfg.echo(out)?;
            let (name, part) = match split {
                SplitArg::Dev => ("dev", &parts.dev),
                SplitArg::Test => ("test", &parts.test),
            };
            let store = CacheStore {
                work: WorkDir::new(work),
            };
            let report = evaluate(&bank, &store, part, name)?;
            write_report(out, name, &report)?;
            print!("{}", report.to_text());
        }
        Command::Reproduce {
            out,
            corpus,
            search,
            model,
            training,
        } => {
            cfg.apply_corpus(corpus);
            cfg.apply_model(model);
            cfg.apply_training(training);
            if let Some(s) = search {
                cfg.search = *s;
            }
            cfg.model.validate().map_err(|e| ConfigError(e.to_string()))?;
            cfg.echo(out)?;
            let rc = ReproduceConfig {
                seed: cfg.seed,
                corpus: cfg.corpus.clone(),
                stages: cfg.stages.clone(),
                plan: cfg.plan.clone(),
                model: cfg.model.clone(),
                search: cfg.candidates(),
                bank: cfg.bank.clone(),
            };
            let outcome = reproduce(&rc, out)?;
            for dir in ["corpus", "work", "bank", "reports"] {
                cfg.echo(&out.join(dir))?;
            }
            let d = &outcome.diagnostics;
            println!(
                "segmentation agreement {:.2}%  therapist insertion {:.2}%  patient deletion {:.2}%",
                100.0 * d.segmentation.agreement(),
                100.0 * d.control_filter.insertion_rate(),
                100.0 * d.control_filter.deletion_rate()
            );
            print!("{}", outcome.test.to_text());
        }
    }
    log::info!("finished in {:.1} s", started.elapsed().as_secs_f64());
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    use pdstate::Error as E;
    for cause in err.chain() {
        if cause.is::<ConfigError>() {
            return exit::INVALID;
        }
        if let Some(e) = cause.downcast_ref::<E>() {
            return match e {
                E::MissingModelBank(_) => exit::MISSING_BANK,
                E::MissingEntries(_) => exit::MISSING_INPUT,
                E::Io { source, .. } if source.kind() == std::io::ErrorKind::NotFound => exit::MISSING_INPUT,
                E::InvalidInput(_) | E::Parse { .. } => exit::INVALID,
                _ => exit::STAGE_FAILED,
            };
        }
        if let Some(io) = cause.downcast_ref::<std::io::Error>() {
            if io.kind() == std::io::ErrorKind::NotFound {
                return exit::MISSING_INPUT;
            }
        }
    }
    exit::STAGE_FAILED
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(exit::USAGE)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let level = match cli.global.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .write_style(match std::env::var_os("NO_COLOR") {
            Some(_) => env_logger::WriteStyle::Never,
            None => env_logger::WriteStyle::Auto,
        })
        .init();
    if let Some(jobs) = cli.global.jobs {
        if jobs == 0 {
            eprintln!("error: --jobs must be at least 1");
            return ExitCode::from(exit::USAGE);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(jobs).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(exit::STAGE_FAILED);
        }
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
