//! Command-line front end: config resolution, subcommands, comparison
//! tables and the gradient suite.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cif::{
    integrate_and_fire, integrate_and_fire_graph, quantity_loss_graph, scale_weights, scale_weights_graph,
    AlignmentWeights, CifConfig, FrameSequence, TailPolicy,
};
use crate::diffcore::{finite_diff_check, finite_diff_check_all, GradReport, Graph, Tensor};
use crate::error::{Error, Result};
use crate::evalmetrics::{pca_project, similarity_heatmap, diagonality_score, MetricsReport};
use crate::losses::{self, AlignMode, LossConfig, LossWeights, Reduction};
use crate::models::{linguistic_targets, GraftedModel, ModelConfig};
use crate::synthdata::{generate_utterances, load_corpus, split_corpus, write_corpus, SynthConfig, Utterance};
use crate::train::{
    evaluate_checkpoint, finetune_downstream, pretrain_linguistic, teacher_forced_alignment, train_align,
    FinetuneConfig, TrainConfig,
};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_RUNTIME: i32 = 3;

pub const GRAFT_DEPTHS: [usize; 4] = [3, 6, 9, 12];
const GRADIENT_TOLERANCE: f64 = 1e-4;

/// Every tunable of a run, flat so that `--set key=value` can reach it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// Utterances generated when `data_dir` is empty.
    pub count: usize,
    /// Corpus written by `gen-data`; empty means generate in memory.
    pub data_dir: String,
    /// Checkpoint to read; empty means the one in the output directory.
    pub checkpoint: String,
    pub eval_split: String,
    pub split_train: f64,
    pub split_dev: f64,
    pub split_test: f64,

    pub vocab: usize,
    pub d_in: usize,
    pub frames_per_token_min: usize,
    pub frames_per_token_max: usize,
    pub raw_hop_ms: f64,
    pub noise_sigma: f64,
    pub tokens_per_utt_min: usize,
    pub tokens_per_utt_max: usize,

    pub d_model: usize,
    pub lm_layers: usize,
    pub lm_hidden: usize,
    pub lm_attention: bool,
    pub anisotropy: f64,
    pub position_scale: f64,
    pub residual_scale: f64,
    pub encoder_hidden: usize,
    pub encoder_blocks: usize,
    pub graft_depth: usize,
    pub lm_pretrain_steps: usize,

    pub beta: f64,
    pub tail_policy: String,
    pub epsilon_residual: f64,

    pub base_lr: f64,
    pub warmup_steps: usize,
    /// 0 means epochs x batches per epoch.
    pub total_steps: usize,
    /// 0 means no early stop.
    pub max_steps: usize,
    pub batch_size: usize,
    pub epochs: usize,
    pub weight_decay: f64,
    pub clip_norm: f64,

    pub tau: f64,
    pub align_mode: String,
    pub w_align: f64,
    pub w_quantity: f64,
    pub w_subword: f64,
    pub cosine_reduction: String,
    pub cross_utterance_negatives: bool,

    pub ft_lr: f64,
    pub ft_epochs: usize,
    pub ft_batch_size: usize,
    pub ft_unfreeze: bool,
    pub ft_joint_epochs: usize,
    pub ft_joint_lr: f64,
    pub ft_permute_labels: bool,

    pub heatmap_utterance: usize,
    pub pca_utterances: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let s = SynthConfig::default();
        let m = ModelConfig::default();
        let c = CifConfig::default();
        let t = TrainConfig::default();
        let f = FinetuneConfig::default();
        RunConfig {
            seed: 0,
            count: 500,
            data_dir: String::new(),
            checkpoint: String::new(),
            eval_split: "test".into(),
            split_train: 0.8,
            split_dev: 0.1,
            split_test: 0.1,
            vocab: s.vocab,
            d_in: s.d_in,
            frames_per_token_min: s.frames_per_token.0,
            frames_per_token_max: s.frames_per_token.1,
            raw_hop_ms: s.raw_hop_ms,
            noise_sigma: s.noise_sigma,
            tokens_per_utt_min: s.tokens_per_utt.0,
            tokens_per_utt_max: s.tokens_per_utt.1,
            d_model: m.d_model,
            lm_layers: m.lm_layers,
            lm_hidden: m.lm_hidden,
            lm_attention: m.lm_attention,
            anisotropy: m.anisotropy,
            position_scale: m.position_scale,
            residual_scale: m.residual_scale,
            encoder_hidden: m.encoder_hidden,
            encoder_blocks: m.encoder_blocks,
            graft_depth: m.graft_depth,
            lm_pretrain_steps: 0,
            beta: c.beta,
            tail_policy: "fire_if_at_least_half".into(),
            epsilon_residual: c.epsilon_residual,
            base_lr: t.base_lr,
            warmup_steps: t.warmup_steps,
            total_steps: 0,
            max_steps: 0,
            batch_size: t.batch_size,
            epochs: t.epochs,
            weight_decay: t.weight_decay,
            clip_norm: t.clip_norm,
            tau: t.loss.tau,
            align_mode: t.loss.align_mode.to_string(),
            w_align: t.loss.weights.align,
            w_quantity: t.loss.weights.quantity,
            w_subword: t.loss.weights.subword,
            cosine_reduction: "sum".into(),
            cross_utterance_negatives: t.loss.cross_utterance_negatives,
            ft_lr: f.lr,
            ft_epochs: f.epochs,
            ft_batch_size: f.batch_size,
            ft_unfreeze: f.unfreeze_acoustic,
            ft_joint_epochs: f.joint_epochs,
            ft_joint_lr: f.joint_lr,
            ft_permute_labels: f.permute_labels,
            heatmap_utterance: 0,
            pca_utterances: 20,
        }
    }
}

impl RunConfig {
    /// Layers a TOML file (optional), `key=value` overrides and explicit
    /// flags over the defaults, in that order.
    pub fn resolve(file: Option<&Path>, overrides: &[String], flags: &[(&str, toml::Value)]) -> Result<Self> {
        let mut table = match file {
            Some(path) => {
                let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
                text.parse::<toml::Table>()
                    .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
            }
            None => toml::Table::new(),
        };
        for item in overrides {
            let (key, raw) = item
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override `{item}` is not KEY=VALUE")))?;
            table.insert(key.trim().to_string(), parse_value(raw.trim()));
        }
        for (key, value) in flags {
            table.insert((*key).to_string(), value.clone());
        }
        let cfg: RunConfig = table.try_into().map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("flat config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.synth().validate()?;
        self.model().validate()?;
        self.train()?.validate()?;
        self.cif()?;
        if !["train", "dev", "test"].contains(&self.eval_split.as_str()) {
            return Err(Error::Config(format!("eval_split `{}` is not train|dev|test", self.eval_split)));
        }
        if !GRAFT_DEPTHS.contains(&self.graft_depth) {
            return Err(Error::Config(format!("graft_depth {} is not one of 3, 6, 9, 12", self.graft_depth)));
        }
        let total = self.split_train + self.split_dev + self.split_test;
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("split fractions sum to {total}, not 1")));
        }
        Ok(())
    }

    pub fn synth(&self) -> SynthConfig {
        SynthConfig {
            vocab: self.vocab,
            d_in: self.d_in,
            frames_per_token: (self.frames_per_token_min, self.frames_per_token_max),
            raw_hop_ms: self.raw_hop_ms,
            noise_sigma: self.noise_sigma,
            tokens_per_utt: (self.tokens_per_utt_min, self.tokens_per_utt_max),
            sentiment_map: Vec::new(),
            seed: self.seed,
        }
    }

    pub fn model(&self) -> ModelConfig {
        ModelConfig {
            d_in: self.d_in,
            d_model: self.d_model,
            vocab: self.vocab,
            lm_layers: self.lm_layers,
            lm_hidden: self.lm_hidden,
            lm_attention: self.lm_attention,
            anisotropy: self.anisotropy,
            position_scale: self.position_scale,
            residual_scale: self.residual_scale,
            encoder_hidden: self.encoder_hidden,
            encoder_blocks: self.encoder_blocks,
            graft_depth: self.graft_depth,
            seed: self.seed,
        }
    }

    pub fn cif(&self) -> Result<CifConfig> {
        Ok(CifConfig {
            beta: self.beta,
            tail_policy: self.tail_policy.parse::<TailPolicy>()?,
            epsilon_residual: self.epsilon_residual,
        })
    }

    pub fn train(&self) -> Result<TrainConfig> {
        Ok(TrainConfig {
            base_lr: self.base_lr,
            warmup_steps: self.warmup_steps,
            total_steps: (self.total_steps > 0).then_some(self.total_steps),
            max_steps: (self.max_steps > 0).then_some(self.max_steps),
            batch_size: self.batch_size,
            epochs: self.epochs,
            weight_decay: self.weight_decay,
            clip_norm: self.clip_norm,
            loss: LossConfig {
                tau: self.tau,
                align_mode: self.align_mode.parse::<AlignMode>()?,
                weights: LossWeights {
                    align: self.w_align,
                    quantity: self.w_quantity,
                    subword: self.w_subword,
                },
                cosine_reduction: self.cosine_reduction.parse::<Reduction>()?,
                cross_utterance_negatives: self.cross_utterance_negatives,
            },
            seed: self.seed,
            ..TrainConfig::default()
        })
    }

    pub fn finetune(&self) -> FinetuneConfig {
        FinetuneConfig {
            lr: self.ft_lr,
            epochs: self.ft_epochs,
            batch_size: self.ft_batch_size,
            unfreeze_acoustic: self.ft_unfreeze,
            joint_epochs: self.ft_joint_epochs,
            joint_lr: self.ft_joint_lr,
            permute_labels: self.ft_permute_labels,
            seed: self.seed,
            ..FinetuneConfig::default()
        }
    }

    pub fn build_model(&self) -> Result<GraftedModel> {
        let mut model = GraftedModel::new(self.model(), self.cif()?)?;
        if self.lm_pretrain_steps > 0 {
            pretrain_linguistic(&mut model.linguistic, self.lm_pretrain_steps, self.seed, std::io::stderr())?;
        }
        Ok(model)
    }

    /// The corpus split into train, dev and test.
    pub fn corpus(&self) -> Result<Splits> {
        let all = if self.data_dir.is_empty() {
            generate_utterances(&self.synth(), self.count)?
        } else {
            load_corpus(Path::new(&self.data_dir))?
        };
        let (train, dev, test) = split_corpus(&all, [self.split_train, self.split_dev, self.split_test], self.seed)?;
        Ok(Splits { train, dev, test })
    }
}

fn parse_value(raw: &str) -> toml::Value {
    format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

pub struct Splits {
    pub train: Vec<Utterance>,
    pub dev: Vec<Utterance>,
    pub test: Vec<Utterance>,
}

impl Splits {
    pub fn named(&self, name: &str) -> &[Utterance] {
        match name {
            "train" => &self.train,
            "dev" => &self.dev,
            _ => &self.test,
        }
    }
}

/// Listing appended to `--help`.
pub fn config_help() -> String {
    let mut out = String::from("Config keys (TOML file via --config, or --set KEY=VALUE), with defaults:\n");
    for line in RunConfig::default().to_toml().lines() {
        let _ = writeln!(out, "  {line}");
    }
    out.push_str("\nEnvironment: WABERT_THREADS caps the number of concurrent ablation runs.\n");
    out.push_str("Exit status: 0 success, 2 configuration error, 3 runtime failure.");
    out
}

#[derive(Debug, Parser)]
#[command(name = "wabert", version, about = "Speech-to-text alignment with integrate-and-fire and a grafted frozen language model")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    #[command(flatten)]
    pub common: CommonArgs,
}

#[derive(Debug, Args)]
pub struct CommonArgs {
    /// TOML config file.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory; nothing is written outside it.
    #[arg(long, global = true, value_name = "DIR", default_value = "out")]
    pub out: PathBuf,
    /// Config override, repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    #[arg(long, global = true, value_parser = ["cos", "infonce"])]
    pub align_mode: Option<String>,
    #[arg(long, global = true, value_parser = clap::value_parser!(u32).range(3..=12))]
    pub graft_depth: Option<u32>,
    #[arg(long, global = true)]
    pub tau: Option<f64>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic corpus to <out>/corpus.
    GenData {
        #[arg(long)]
        count: Option<usize>,
    },
    /// Train the acoustic path against the frozen language model.
    TrainAlign,
    /// Fit the sentiment classifier on top of a trained checkpoint.
    Finetune,
    /// Score a checkpoint and write <out>/metrics.json.
    Eval,
    /// Write the similarity matrix of one utterance as CSV and PGM.
    Heatmap,
    /// Project aligned acoustic and linguistic tokens onto two components.
    Pca,
    /// Train and evaluate every graft depth with both alignment losses.
    Ablate,
    /// Compare analytic and numeric gradients of every objective.
    Gradcheck,
}

impl CommonArgs {
    fn flags(&self, count: Option<usize>) -> Vec<(&'static str, toml::Value)> {
        let mut flags = Vec::new();
        if let Some(s) = self.seed {
            flags.push(("seed", toml::Value::Integer(s as i64)));
        }
        if let Some(m) = &self.align_mode {
            flags.push(("align_mode", toml::Value::String(m.clone())));
        }
        if let Some(d) = self.graft_depth {
            flags.push(("graft_depth", toml::Value::Integer(d as i64)));
        }
        if let Some(t) = self.tau {
            flags.push(("tau", toml::Value::Float(t)));
        }
        if let Some(c) = count {
            flags.push(("count", toml::Value::Integer(c as i64)));
        }
        flags
    }
}

/// Parses `args` (including the program name) and runs the subcommand.
/// Returns the process exit status.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let command = Cli::command().after_help(config_help());
    let cli = match command.try_get_matches_from(args).and_then(|m| Cli::from_arg_matches(&m)) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
        }
    };
    let count = match cli.command {
        Command::GenData { count } => count,
        _ => None,
    };
    let cfg = match RunConfig::resolve(cli.common.config.as_deref(), &cli.common.overrides, &cli.common.flags(count)) {
        Ok(cfg) => cfg,
        Err(e) => {
            eprintln!("error[{}]: {e}", e.module());
            return if matches!(e, Error::Io { .. }) { EXIT_RUNTIME } else { EXIT_CONFIG };
        }
    };
    match execute(&cli.command, &cfg, &cli.common.out) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error[{}]: {e}", e.module());
            match e {
                Error::Config(_) => EXIT_CONFIG,
                _ => EXIT_RUNTIME,
            }
        }
    }
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn checkpoint_path(cfg: &RunConfig, out: &Path) -> PathBuf {
    if !cfg.checkpoint.is_empty() {
        return PathBuf::from(&cfg.checkpoint);
    }
    let classifier = out.join("classifier.wabt");
    if classifier.exists() {
        classifier
    } else {
        out.join("checkpoint.wabt")
    }
}

fn execute(command: &Command, cfg: &RunConfig, out: &Path) -> Result<()> {
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    match command {
        Command::GenData { .. } => {
            let corpus = generate_utterances(&cfg.synth(), cfg.count)?;
            let dir = out.join("corpus");
            write_corpus(&dir, &corpus)?;
            println!("wrote {} utterances to {}", corpus.len(), dir.display());
        }
        Command::TrainAlign => {
            let splits = cfg.corpus()?;
            let (model, log) = train_run(cfg, &splits.train)?;
            model.save(&out.join("checkpoint.wabt"))?;
            write(&out.join("loss_log.csv"), log)?;
            write(&out.join("config.toml"), cfg.to_toml())?;
            println!("trained on {} utterances; checkpoint {}", splits.train.len(), out.join("checkpoint.wabt").display());
        }
        Command::Finetune => {
            let splits = cfg.corpus()?;
            let path = if cfg.checkpoint.is_empty() { out.join("checkpoint.wabt") } else { PathBuf::from(&cfg.checkpoint) };
            let mut model = GraftedModel::load(&path)?;
            let log = finetune_downstream(&splits.train, &mut model, &cfg.finetune())?;
            model.save(&out.join("classifier.wabt"))?;
            write(&out.join("finetune_log.csv"), log.to_csv())?;
            println!("classifier checkpoint {}", out.join("classifier.wabt").display());
        }
        Command::Eval => {
            let splits = cfg.corpus()?;
            let model = GraftedModel::load(&checkpoint_path(cfg, out))?;
            let report = evaluate_checkpoint(splits.named(&cfg.eval_split), &model)?;
            let json = report.to_json();
            write(&out.join("metrics.json"), &json)?;
            println!("{json}");
        }
        Command::Heatmap => {
            let splits = cfg.corpus()?;
            let model = GraftedModel::load(&checkpoint_path(cfg, out))?;
            let split = splits.named(&cfg.eval_split);
            let u = split.get(cfg.heatmap_utterance).ok_or_else(|| {
                Error::Config(format!("heatmap_utterance {} outside a split of {}", cfg.heatmap_utterance, split.len()))
            })?;
            let fired = teacher_forced_alignment(&model, u)?;
            let l = linguistic_targets(&u.token_ids, model.graft_depth(), &model.linguistic)?;
            let h = similarity_heatmap(&fired.aligned, &l.states)?;
            write(&out.join("heatmap.csv"), h.to_csv())?;
            write(&out.join("heatmap.pgm"), h.to_pgm())?;
            println!("{}: diagonality {:.4}", u.utterance_id, diagonality_score(&h)?);
        }
        Command::Pca => {
            let splits = cfg.corpus()?;
            let model = GraftedModel::load(&checkpoint_path(cfg, out))?;
            let mut rows = Vec::new();
            let mut tags = Vec::new();
            for u in splits.named(&cfg.eval_split).iter().take(cfg.pca_utterances) {
                let fired = teacher_forced_alignment(&model, u)?;
                let l = linguistic_targets(&u.token_ids, model.graft_depth(), &model.linguistic)?;
                for r in fired.aligned.rows() {
                    rows.push(r.to_vec());
                    tags.push("acoustic");
                }
                for r in l.states.rows() {
                    rows.push(r.to_vec());
                    tags.push("linguistic");
                }
            }
            let proj = pca_project(&Tensor::from_rows(&rows)?)?;
            write(&out.join("pca.csv"), proj.to_csv(&tags))?;
            println!("projected {} points; explained variance {:?}", rows.len(), proj.explained_variance);
        }
        Command::Ablate => {
            let results = ablate(cfg, out)?;
            let (text, csv) = compare_table(&results);
            write(&out.join("ablation.txt"), &text)?;
            write(&out.join("ablation.csv"), csv)?;
            print!("{text}");
        }
        Command::Gradcheck => {
            let suite = gradient_suite(cfg.seed)?;
            let mut text = String::new();
            for (name, r) in &suite {
                let _ = writeln!(
                    text,
                    "{name:<32} max_rel_err {:.3e} at {:?} (analytic {:.6e}, numeric {:.6e}; {} checked, {} excluded)",
                    r.max_abs_rel_error, r.worst_coordinate, r.analytic, r.numeric, r.checked, r.excluded
                );
            }
            write(&out.join("gradcheck.txt"), &text)?;
            print!("{text}");
            if let Some((name, r)) = suite.iter().find(|(_, r)| r.max_abs_rel_error >= GRADIENT_TOLERANCE) {
                return Err(Error::GradientMismatch {
                    name: name.clone(),
                    error: r.max_abs_rel_error,
                });
            }
        }
    }
    Ok(())
}

fn train_run(cfg: &RunConfig, train: &[Utterance]) -> Result<(GraftedModel, String)> {
    let mut model = cfg.build_model()?;
    let log = train_align(train, &mut model, &cfg.train()?)?;
    Ok((model, log.to_csv()))
}

/// One finished ablation cell.
#[derive(Debug, Clone, PartialEq)]
pub struct RunResult {
    pub depth: usize,
    pub align_mode: AlignMode,
    pub report: Option<MetricsReport>,
}

fn thread_budget() -> usize {
    std::env::var("WABERT_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

/// Trains and evaluates every (depth, loss) pair, each in its own
/// subdirectory of `out`.
pub fn ablate(cfg: &RunConfig, out: &Path) -> Result<Vec<RunResult>> {
    let splits = cfg.corpus()?;
    let cells: Vec<(usize, AlignMode)> = GRAFT_DEPTHS
        .iter()
        .flat_map(|&d| [AlignMode::Cosine, AlignMode::InfoNce].map(|m| (d, m)))
        .collect();
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<Result<RunResult>>>> = Mutex::new((0..cells.len()).map(|_| None).collect());
    let workers = thread_budget().min(cells.len());
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(&(depth, mode)) = cells.get(i) else { break };
                let result = ablation_cell(cfg, &splits, out, depth, mode);
                slots.lock().expect("no worker panics while holding the lock")[i] = Some(result);
            });
        }
    });
    slots
        .into_inner()
        .expect("workers finished")
        .into_iter()
        .map(|r| r.expect("every cell ran"))
        .collect()
}

fn ablation_cell(cfg: &RunConfig, splits: &Splits, out: &Path, depth: usize, mode: AlignMode) -> Result<RunResult> {
    let cell = RunConfig {
        graft_depth: depth,
        align_mode: mode.to_string(),
        ..cfg.clone()
    };
    let dir = out.join("ablate").join(format!("depth{depth}_{mode}"));
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let (model, log) = train_run(&cell, &splits.train)?;
    model.save(&dir.join("checkpoint.wabt"))?;
    write(&dir.join("loss_log.csv"), log)?;
    let report = evaluate_checkpoint(splits.named(&cell.eval_split), &model)?;
    write(&dir.join("metrics.json"), report.to_json())?;
    Ok(RunResult {
        depth,
        align_mode: mode,
        report: Some(report),
    })
}

pub const TABLE_COLUMNS: [&str; 11] = [
    "depth",
    "align_mode",
    "mae_ms",
    "median_ms",
    "acc_50",
    "acc_100",
    "acc_500",
    "acc_1000",
    "diagonality",
    "recall",
    "f1",
];

fn cell(v: Option<f64>) -> String {
    match v {
        Some(x) if x.is_finite() => format!("{x:.3}"),
        _ => "n/a".into(),
    }
}

/// Rows ordered by depth then loss name, as aligned text and as CSV.
/// Missing values print as `n/a`.
pub fn compare_table(results: &[RunResult]) -> (String, String) {
    let mut sorted: Vec<&RunResult> = results.iter().collect();
    sorted.sort_by_key(|r| (r.depth, r.align_mode.to_string()));
    let rows: Vec<Vec<String>> = sorted
        .iter()
        .map(|r| {
            let m = r.report.as_ref();
            let mut row = vec![r.depth.to_string(), r.align_mode.to_string()];
            row.extend(
                [
                    m.map(|m| m.mae_ms),
                    m.map(|m| m.median_ms),
                    m.map(|m| m.acc_50),
                    m.map(|m| m.acc_100),
                    m.map(|m| m.acc_500),
                    m.map(|m| m.acc_1000),
                    m.map(|m| m.diagonality),
                    m.and_then(|m| m.recall_weighted),
                    m.and_then(|m| m.f1_weighted),
                ]
                .map(cell),
            );
            row
        })
        .collect();
    let widths: Vec<usize> = (0..TABLE_COLUMNS.len())
        .map(|c| rows.iter().map(|r| r[c].len()).chain([TABLE_COLUMNS[c].len()]).max().unwrap_or(0))
        .collect();
    let line = |cells: &[&str]| {
        let padded: Vec<String> = cells.iter().zip(&widths).map(|(c, w)| format!("{c:>w$}")).collect();
        padded.join("  ").trim_end().to_string() + "\n"
    };
    let mut text = line(&TABLE_COLUMNS);
    let mut csv = TABLE_COLUMNS.join(",") + "\n";
    for r in &rows {
        let refs: Vec<&str> = r.iter().map(String::as_str).collect();
        text.push_str(&line(&refs));
        csv.push_str(&r.join(","));
        csv.push('\n');
    }
    (text, csv)
}

/// Reads back a table written by [`compare_table`]; `n/a` becomes `None`.
pub fn parse_compare_csv(csv: &str) -> Result<Vec<(usize, AlignMode, Vec<Option<f64>>)>> {
    let mut lines = csv.lines();
    if lines.next() != Some(TABLE_COLUMNS.join(",").as_str()) {
        return Err(Error::Config("comparison table header mismatch".into()));
    }
    lines
        .map(|line| {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != TABLE_COLUMNS.len() {
                return Err(Error::Config(format!("bad table row `{line}`")));
            }
            let depth = f[0].parse().map_err(|_| Error::Config(format!("bad depth `{}`", f[0])))?;
            let values = f[2..]
                .iter()
                .map(|v| match *v {
                    "n/a" => Ok(None),
                    v => v.parse().map(Some).map_err(|_| Error::Config(format!("bad value `{v}`"))),
                })
                .collect::<Result<_>>()?;
            Ok((depth, f[1].parse()?, values))
        })
        .collect()
}

fn random_matrix(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Tensor {
    Tensor::matrix(n, d, (0..n * d).map(|_| rng.random_range(-1.0..1.0)).collect()).expect("sizes agree")
}

/// Firing pattern of plain CIF on `alpha`, `None` if the pass fails.
fn firing_signature(
    alpha: &Tensor,
    frames: &Tensor,
    cif: &CifConfig,
    target: Option<usize>,
) -> Option<Vec<(usize, usize, crate::cif::ContributionKind)>> {
    let fs = FrameSequence::new(frames.clone(), 20.0, "probe").ok()?;
    let w = match target {
        Some(n) => scale_weights(&AlignmentWeights::unscaled(alpha.data().to_vec()), n).ok()?,
        None => AlignmentWeights::unscaled(alpha.data().to_vec()),
    };
    integrate_and_fire(&fs, &w, cif).ok().map(|f| f.signature())
}

/// Finite-difference checks of every loss and of the CIF-composed
/// objective on small random instances. Coordinates whose perturbation
/// changes the firing pattern are excluded.
pub fn gradient_suite(seed: u64) -> Result<Vec<(String, GradReport)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let eps = 1e-5;
    let (x, y) = (random_matrix(&mut rng, 4, 8), random_matrix(&mut rng, 4, 8));
    let (nx, ny) = (random_matrix(&mut rng, 3, 8), random_matrix(&mut rng, 3, 8));
    let table = random_matrix(&mut rng, 10, 8);
    let ids: Vec<usize> = (0..4).map(|_| rng.random_range(0..10)).collect();
    let xy = [x.clone(), y.clone()];
    let mut out = vec![
        (
            "cosine_align_loss".to_string(),
            finite_diff_check_all(|g, v| losses::cosine_align_loss(g, v[0], v[1], Reduction::Sum), &xy, eps)?,
        ),
        (
            "info_nce".to_string(),
            finite_diff_check_all(|g, v| losses::info_nce(g, v[0], v[1], 0.1, None), &xy, eps)?,
        ),
        (
            "aligned_token_similarity_loss".to_string(),
            finite_diff_check_all(|g, v| losses::aligned_token_similarity_loss(g, v[0], v[1], 0.1, None), &xy, eps)?,
        ),
        (
            "aligned_token_similarity_loss+neg".to_string(),
            finite_diff_check_all(
                |g, v| losses::aligned_token_similarity_loss(g, v[0], v[1], 0.1, Some((v[2], v[3]))),
                &[x.clone(), y.clone(), nx, ny],
                eps,
            )?,
        ),
        (
            "subword_loss".to_string(),
            finite_diff_check_all(|g, v| losses::subword_loss(g, v[0], v[1], &ids), &[x.clone(), table.clone()], eps)?,
        ),
    ];
    let cfg = LossConfig::default();
    let q = Tensor::vector((0..6).map(|_| rng.random_range(0.1..0.9)).collect())?;
    out.push((
        "total_loss".to_string(),
        finite_diff_check_all(
            |g: &mut Graph, v| {
                let a = losses::aligned_token_similarity_loss(g, v[0], v[1], cfg.tau, None)?;
                let qv = quantity_loss_graph(g, v[2], 4)?;
                let s = losses::subword_loss(g, v[0], v[3], &ids)?;
                losses::total_loss_graph(g, a, qv, s, &cfg)
            },
            &[x, y, q, table.clone()],
            eps,
        )?,
    ));

    // CIF composed with scaling, the alignment loss and the subword loss
    let cif = CifConfig::default();
    let m = 9;
    let alpha = Tensor::vector((0..m).map(|_| rng.random_range(0.2..0.9)).collect())?;
    let frames = random_matrix(&mut rng, m, 8);
    let n: usize = 4;
    let targets = random_matrix(&mut rng, n, 8);
    let cif_ids: Vec<usize> = (0..n).map(|_| rng.random_range(0..10)).collect();
    let report = finite_diff_check(
        |g: &mut Graph, v| {
            let q = quantity_loss_graph(g, v[0], n)?;
            let scaled = scale_weights_graph(g, v[0], n)?;
            let (a_hat, _) = integrate_and_fire_graph(g, v[1], scaled, &cif, Some(n))?;
            let align = losses::aligned_token_similarity_loss(g, a_hat, v[2], 0.1, None)?;
            let sub = losses::subword_loss(g, a_hat, v[3], &cif_ids)?;
            losses::total_loss_graph(g, align, q, sub, &cfg)
        },
        &[alpha, frames, targets, table],
        eps,
        |p| {
            p.param == 0 && {
                let base = firing_signature(&p.base[0], &p.base[1], &cif, Some(n));
                base.is_none()
                    || firing_signature(&p.plus[0], &p.plus[1], &cif, Some(n)) != base
                    || firing_signature(&p.minus[0], &p.minus[1], &cif, Some(n)) != base
            }
        },
    )?;
    out.push(("cif_composed_objective".to_string(), report));
    Ok(out)
}
