//! `semcap` command line: synthetic data, SDN training and semantic feature
//! export, captioner training, evaluation and generation.
//!
//! Every command reads one TOML run configuration (`--config`) and applies
//! flag overrides on top of it. Outputs go under `--out`.

use std::collections::HashSet;
use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::{
    default_stoplist, generate_synthetic_dataset, read_feature_file, read_token_file,
    write_jsonl, Corpus, Split, SynthSpec,
};
use crate::error::{Error, Result};
use crate::metrics::{caption_length_stats, MetricReport, Tops};
use crate::scn_decoder::DecodeMode;
use crate::sdn::{
    predict, read_semantic_file, sdn_forward, sdn_train, write_semantic_file, FeatureSet,
    SdnConfig, SdnParameters,
};
use crate::trainer::{
    generate_caption, load_json, save_json, train_captioner, validate, AdamState, CaptionData,
    Checkpoint, DecoderConfig, Strategy, TrainConfig,
};

pub const SDN_CHECKPOINT: &str = "sdn_checkpoint.json";
pub const SDN_TRACE: &str = "sdn_trace.jsonl";
pub const CAPTION_CHECKPOINT: &str = "caption_checkpoint.json";
pub const CAPTION_TRACE: &str = "caption_trace.jsonl";
pub const GENERATED_FILE: &str = "captions_generated.jsonl";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Corpus directory; `<out>/data` when unset.
    pub dir: Option<PathBuf>,
    pub min_count: usize,
    pub tag_k: Option<usize>,
    /// One word per line; the built-in list when unset.
    pub stoplist: Option<PathBuf>,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            dir: None,
            min_count: 1,
            tag_k: None,
            stoplist: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub out: PathBuf,
    pub synth: SynthSpec,
    pub data: DataConfig,
    pub sdn: SdnConfig,
    pub decoder: DecoderConfig,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            out: PathBuf::from("out"),
            synth: SynthSpec::default(),
            data: DataConfig::default(),
            sdn: SdnConfig::default(),
            decoder: DecoderConfig::default(),
            train: TrainConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str, path: &Path) -> Result<Self> {
        toml::from_str(text).map_err(|e| {
            let line = e
                .span()
                .map_or(0, |s| text[..s.start.min(text.len())].lines().count().max(1));
            Error::Config(format!("{}:{line}: {}", path.display(), e.message()))
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text, path)
    }

    /// SHA-256 of the canonical JSON form.
    pub fn fingerprint(&self) -> String {
        let canonical = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(canonical.as_bytes()))
    }

    pub fn data_dir(&self) -> PathBuf {
        self.data.dir.clone().unwrap_or_else(|| self.out.join("data"))
    }

    fn stoplist(&self) -> Result<HashSet<String>> {
        match &self.data.stoplist {
            Some(p) => Ok(read_token_file(p)?.into_iter().collect()),
            None => Ok(default_stoplist()),
        }
    }

    /// Uses `vocab.txt`/`tags.txt` when present, otherwise builds both from
    /// the train captions.
    pub fn load_corpus(&self) -> Result<Corpus> {
        let dir = self.data_dir();
        if dir.join(Corpus::VOCAB_FILE).exists() && dir.join(Corpus::TAG_FILE).exists() {
            Corpus::load(&dir)
        } else {
            Corpus::build(&dir, self.data.min_count, self.data.tag_k, &self.stoplist()?)
        }
    }

    fn semantic_path(&self, split: Split) -> PathBuf {
        self.out.join(format!("semantic_{split}.jsonl"))
    }
}

#[derive(Debug, Parser)]
#[command(name = "semcap", version, about = "Semantics-assisted video captioning")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// TOML run configuration; defaults apply to absent keys.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Seed of SDN and captioner training.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Length-modulation exponent of the caption loss
    #[arg(long, global = true)]
    pub beta: Option<f64>,
    #[arg(long, global = true)]
    pub strategy: Option<Strategy>,
    /// Per-epoch growth of the scheduled-sampling probability
    #[arg(long, global = true)]
    pub epsilon_rate: Option<f64>,
    /// Captioner epochs.
    #[arg(long, global = true)]
    pub epochs: Option<usize>,
    /// Output directory of the run
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// File holding a single METEOR value for `evaluate`.
    #[arg(long, global = true)]
    pub meteor_file: Option<PathBuf>,
    /// JSON object with `bleu4`, `cider`, `rouge_l` and optional `meteor`
    /// column maxima for the overall score.
    #[arg(long, global = true)]
    pub tops_file: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic corpus to the data directory.
    SynthData,
    /// Train the semantic detection network and export semantic features.
    TrainSdn,
    /// Train the captioner on exported semantic features.
    TrainCaption,
    /// Decode a split greedily and score it.
    Evaluate {
        /// Caption checkpoint; defaults to the one in the output directory
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value = "test")]
        split: Split,
    },
    /// Caption every video of a feature file.
    Generate {
        /// Caption checkpoint; defaults to the one in the output directory
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Feature file in the corpus feature format
        #[arg(long)]
        features: PathBuf,
        /// SDN checkpoint that predicts the semantic features
        #[arg(long)]
        sdn_checkpoint: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "argmax")]
        mode: ModeArg,
    },
}

#[derive(Debug, Clone, Copy, clap::ValueEnum)]
pub enum ModeArg {
    Argmax,
    Multinomial,
}

impl clap::ValueEnum for Strategy {
    fn value_variants<'a>() -> &'a [Self] {
        &[Strategy::TeacherForcing, Strategy::ScheduledArgmax, Strategy::ScheduledMultinomial]
    }

    fn to_possible_value(&self) -> Option<clap::builder::PossibleValue> {
        Some(clap::builder::PossibleValue::new(self.as_str()))
    }
}

impl clap::ValueEnum for Split {
    fn value_variants<'a>() -> &'a [Self] {
        &Split::ALL
    }

    fn to_possible_value(&self) -> Option<clap::builder::PossibleValue> {
        Some(clap::builder::PossibleValue::new(self.as_str()))
    }
}

impl Cli {
    /// The configuration file (or defaults) with flags applied.
    pub fn run_config(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.sdn.seed = s;
            cfg.train.seed = s;
        }
        if let Some(b) = self.beta {
            cfg.train.beta = b;
        }
        if let Some(s) = self.strategy {
            cfg.train.strategy = s;
        }
        if let Some(r) = self.epsilon_rate {
            cfg.train.epsilon_rate = r;
        }
        if let Some(e) = self.epochs {
            cfg.train.epochs = e;
        }
        if let Some(o) = &self.out {
            cfg.out = o.clone();
        }
        cfg.train.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SdnCheckpoint {
    pub fingerprint: String,
    pub best_epoch: Option<usize>,
    pub feature_set: FeatureSet,
    pub params: SdnParameters,
    pub adam: AdamState,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub split: Split,
    pub checkpoint_epoch: usize,
    pub report: MetricReport,
    pub token_accuracy: f64,
    pub mean_length: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratedLine {
    pub id: String,
    pub caption: String,
}

pub fn cmd_synth_data(cfg: &RunConfig) -> Result<PathBuf> {
    let dir = cfg.data_dir();
    let synth = generate_synthetic_dataset(&cfg.synth)?;
    let corpus = synth.write(&dir, cfg.data.tag_k)?;
    log::info!(
        "wrote {} / {} / {} videos, {} words, {} tags to {}",
        corpus.train.len(),
        corpus.val.len(),
        corpus.test.len(),
        corpus.vocab.len(),
        corpus.tags.len(),
        dir.display()
    );
    Ok(dir)
}

pub fn cmd_train_sdn(cfg: &RunConfig) -> Result<SdnCheckpoint> {
    let corpus = cfg.load_corpus()?;
    let outcome = sdn_train(&corpus.train, &corpus.val, &cfg.sdn)?;
    let ckpt = SdnCheckpoint {
        fingerprint: cfg.fingerprint(),
        best_epoch: outcome.best_epoch,
        feature_set: cfg.sdn.feature_set,
        params: outcome.params,
        adam: outcome.adam,
    };
    save_json(&cfg.out.join(SDN_CHECKPOINT), &ckpt)?;
    write_jsonl(&cfg.out.join(SDN_TRACE), &outcome.trace)?;
    for split in Split::ALL {
        let ds = corpus.split(split);
        let feats = predict(&ckpt.params, ds, ckpt.feature_set)?;
        write_semantic_file(&cfg.semantic_path(split), ds, &feats)?;
    }
    Ok(ckpt)
}

pub fn cmd_train_caption(cfg: &RunConfig) -> Result<Checkpoint> {
    let corpus = cfg.load_corpus()?;
    let train_sem = read_semantic_file(&cfg.semantic_path(Split::Train), &corpus.train)?;
    let val_sem = read_semantic_file(&cfg.semantic_path(Split::Val), &corpus.val)?;
    let outcome = train_captioner(
        CaptionData::new(&corpus.train, &train_sem)?,
        CaptionData::new(&corpus.val, &val_sem)?,
        &cfg.decoder,
        &cfg.train,
    )?;
    let mut ckpt = outcome.checkpoint;
    ckpt.fingerprint = cfg.fingerprint();
    ckpt.save(&cfg.out.join(CAPTION_CHECKPOINT))?;
    write_jsonl(&cfg.out.join(CAPTION_TRACE), &outcome.trace)?;
    Ok(ckpt)
}

fn load_caption_checkpoint(cfg: &RunConfig, path: Option<&Path>) -> Result<Checkpoint> {
    let path = path.map_or_else(|| cfg.out.join(CAPTION_CHECKPOINT), Path::to_path_buf);
    let ckpt = Checkpoint::load(&path)?;
    warn_fingerprint(&path, &ckpt.fingerprint, cfg);
    Ok(ckpt)
}

fn warn_fingerprint(path: &Path, found: &str, cfg: &RunConfig) {
    let expected = cfg.fingerprint();
    if found != expected {
        log::warn!(
            "{}: configuration fingerprint {found} differs from the current {expected}; using the checkpoint's dimensions",
            path.display()
        );
    }
}

fn read_meteor(path: &Path) -> Result<f64> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let value: f64 = text.trim().parse().map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        line: 1,
        msg: format!("expected a single METEOR value: {e}"),
    })?;
    if !(value.is_finite() && value >= 0.0) {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            line: 1,
            msg: format!("METEOR value {value} must be finite and >= 0"),
        });
    }
    Ok(value)
}

pub fn cmd_evaluate(
    cfg: &RunConfig,
    checkpoint: Option<&Path>,
    split: Split,
    meteor_file: Option<&Path>,
    tops_file: Option<&Path>,
) -> Result<EvalReport> {
    let ckpt = load_caption_checkpoint(cfg, checkpoint)?;
    let corpus = cfg.load_corpus()?;
    let ds = corpus.split(split);
    let sem = read_semantic_file(&cfg.semantic_path(split), ds)?;
    let data = CaptionData::new(ds, &sem)?;
    let (mut report, token_accuracy) = validate(&ckpt.params, &data, cfg.train.max_len)?;
    if let Some(p) = meteor_file {
        report.meteor = Some(read_meteor(p)?);
    }
    if let Some(p) = tops_file {
        let tops: Tops = load_json(p)?;
        report = report.with_overall(&tops)?;
    }
    let generated = crate::trainer::generate_split(&ckpt.params, &data, DecodeMode::Argmax, cfg.train.max_len, 0)?;
    let eval = EvalReport {
        split,
        checkpoint_epoch: ckpt.epoch,
        report,
        token_accuracy,
        mean_length: caption_length_stats(&generated)?,
    };
    save_json(&cfg.out.join(format!("eval_{split}.json")), &eval)?;
    Ok(eval)
}

pub fn cmd_generate(
    cfg: &RunConfig,
    checkpoint: Option<&Path>,
    features: &Path,
    sdn_checkpoint: Option<&Path>,
    mode: DecodeMode,
) -> Result<Vec<GeneratedLine>> {
    let ckpt = load_caption_checkpoint(cfg, checkpoint)?;
    let sdn_path = sdn_checkpoint.map_or_else(|| cfg.out.join(SDN_CHECKPOINT), Path::to_path_buf);
    let sdn: SdnCheckpoint = load_json(&sdn_path)?;
    warn_fingerprint(&sdn_path, &sdn.fingerprint, cfg);

    let mut rng = crate::numkit::SeededRng::new(cfg.train.seed);
    let mut lines = Vec::new();
    for f in read_feature_file(features)? {
        let sdn_in = match sdn.feature_set {
            FeatureSet::Both => crate::corpus::concat_features(&f.res2d, &f.res3d),
            FeatureSet::Res2d => f.res2d.clone(),
            FeatureSet::Res3d => f.res3d.clone(),
        };
        let s = sdn_forward(&sdn.params, &sdn_in)?;
        let v = crate::corpus::concat_features(&f.res2d, &f.res3d);
        let ids = generate_caption(&ckpt.params, &v, &s, mode, cfg.train.max_len, Some(&mut rng))?;
        let words: Vec<&str> = ids
            .iter()
            .map(|&i| ckpt.vocab.get(i).map_or(crate::corpus::UNK, String::as_str))
            .collect();
        lines.push(GeneratedLine {
            id: f.id,
            caption: words.join(" "),
        });
    }
    write_jsonl(&cfg.out.join(GENERATED_FILE), &lines)?;
    Ok(lines)
}

fn dispatch(cli: &Cli) -> Result<()> {
    use std::io::Write;
    let cfg = cli.run_config()?;
    let mut stdout = std::io::stdout().lock();
    // a closed pipe (e.g. `| head`) is not an error
    macro_rules! emit {
        ($($arg:tt)*) => { let _ = writeln!(stdout, $($arg)*); };
    }
    match &cli.command {
        Command::SynthData => {
            let dir = cmd_synth_data(&cfg)?;
            emit!("{}", dir.display());
        }
        Command::TrainSdn => {
            let ckpt = cmd_train_sdn(&cfg)?;
            emit!("sdn best epoch: {:?}", ckpt.best_epoch);
        }
        Command::TrainCaption => {
            let ckpt = cmd_train_caption(&cfg)?;
            emit!("caption checkpoint epoch: {}", ckpt.epoch);
        }
        Command::Evaluate { checkpoint, split } => {
            let eval = cmd_evaluate(
                &cfg,
                checkpoint.as_deref(),
                *split,
                cli.meteor_file.as_deref(),
                cli.tops_file.as_deref(),
            )?;
            emit!("{}", serde_json::to_string_pretty(&eval).expect("report serializes"));
        }
        Command::Generate {
            checkpoint,
            features,
            sdn_checkpoint,
            mode,
        } => {
            let mode = match mode {
                ModeArg::Argmax => DecodeMode::Argmax,
                ModeArg::Multinomial => DecodeMode::Multinomial,
            };
            for line in cmd_generate(&cfg, checkpoint.as_deref(), features, sdn_checkpoint.as_deref(), mode)? {
                emit!("{}\t{}", line.id, line.caption);
            }
        }
    }
    Ok(())
}

/// Parses `args`, runs the command and returns the process exit code:
/// 0 success, 1 usage or configuration error, 2 data error, 3 divergence.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
