//! Command-line driver.
//!
//! Every command writes into a run directory holding the produced files, the
//! resolved configuration (`config.resolved.toml`) and `run.json`, which lists
//! the command, seeds and SHA-256 digests of inputs and outputs. Failures
//! print one line, `error: code=<n> kind=<kind> detail=<text>`, and exit with
//! the code from [`exit_code`].

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::checkpoint::{peek_dtype, Checkpoint, Stage};
use crate::config::ExperimentConfig;
use crate::corpus::{read_corpus, write_corpus};
use crate::coupcycle::{merge_models, upcycle_init};
use crate::error::{MobreError, Result};
use crate::fsio;
use crate::gradcheck;
use crate::model::{validate_params, LocalFfn, ModelConfig};
use crate::pipeline::{
    loso_run, model_init_seed, prepare_corpus, pretrain_all, rmae_subject_seed, variant_init, MergeCache, Variant,
    VARIANT_NAMES,
};
use crate::preprocess::preprocess;
use crate::report::{curve_text, metrics_jsonl, route_tsv, summary_table};
use crate::scalar::{DType, Scalar};
use crate::synth::{generate_corpus, Recording};
use crate::train::{evaluate, split_corpus, train, MetricsReport, TrainConfig};

#[derive(Parser, Debug)]
#[command(name = "mobre", version, about = "Brain-regional mixture-of-experts decoder for multi-subject recordings")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// Preset name (large, desk, tiny) or path to a TOML file.
    #[arg(long, default_value = "desk")]
    config: String,
    /// Run directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug, Clone)]
struct Data {
    /// Corpus directory written by `synth`; generated from the config when absent.
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// Seed controlling splits, initialization and batching; defaults to the first configured seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic corpus.
    Synth {
        #[command(flatten)]
        common: Common,
    },
    /// Pretrain one dense model per subject with regional masked reconstruction.
    Pretrain {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: Data,
    },
    /// Trim and merge pretrained subject models.
    Merge {
        #[command(flatten)]
        common: Common,
        /// Pretrained checkpoints, or directories containing them.
        #[arg(long, num_args = 1.., required = true)]
        inputs: Vec<PathBuf>,
    },
    /// Supervised multi-task training.
    Train {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: Data,
        #[arg(long, default_value = "rmae")]
        variant: String,
        /// Merged checkpoint to upcycle from; pretraining runs in-process when absent.
        #[arg(long)]
        init: Option<PathBuf>,
    },
    /// Evaluate a trained checkpoint.
    Eval {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: Data,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "test", value_parser = ["train", "val", "test", "all"])]
        split: String,
    },
    /// Leave-one-subject-out zero-shot evaluation.
    Loso {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: Data,
        /// Held-out subject; every subject in turn when absent.
        #[arg(long)]
        held_out: Option<usize>,
        /// Seeds to run; the configured seed list when absent.
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
    },
    /// Train and evaluate several variants under identical seeds.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: Data,
        #[arg(long, value_delimiter = ',', default_values_t = VARIANT_NAMES.map(String::from))]
        variants: Vec<String>,
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
    },
    /// Export per-layer, per-region expert dispatch counts.
    RouteReport {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: Data,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "test", value_parser = ["train", "val", "test", "all"])]
        split: String,
    },
    /// Compare analytic gradients with central finite differences.
    Gradcheck {
        #[arg(long, default_value = "tiny")]
        config: String,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 4)]
        channels: usize,
        #[arg(long, default_value_t = 3)]
        patches: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1.0)]
        aux_weight: f64,
        #[arg(long, default_value_t = 1e-5)]
        step: f64,
        /// Lower bound on the relative-error denominator.
        #[arg(long, default_value_t = 1e-6)]
        floor: f64,
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
    },
}

/// Process exit code for an error.
pub fn exit_code(e: &MobreError) -> i32 {
    match e {
        MobreError::Io { source, .. } if source.kind() == std::io::ErrorKind::NotFound => 3,
        MobreError::Io { .. } => 1,
        MobreError::Config(_)
        | MobreError::UnknownVariant(_)
        | MobreError::TopKExceedsExperts { .. }
        | MobreError::InvalidMaskRatio(_) => 4,
        MobreError::Version(_) => 5,
        MobreError::ShapeMismatch { .. } | MobreError::MissingParams(_) => 6,
        MobreError::Integrity(_) | MobreError::CheckpointFormat(_) => 7,
        MobreError::Stage { .. } => 8,
        MobreError::NonFinite(_) => 9,
        _ => 10,
    }
}

pub fn error_kind(e: &MobreError) -> &'static str {
    match e {
        MobreError::Config(_) => "config",
        MobreError::ShapeMismatch { .. } => "shape_mismatch",
        MobreError::SignalTooShort { .. } => "signal_too_short",
        MobreError::TopKExceedsExperts { .. } => "top_k_exceeds_experts",
        MobreError::NonFinite(_) => "non_finite",
        MobreError::UnknownTask(_) => "unknown_task",
        MobreError::RegionOutOfRange { .. } => "region_out_of_range",
        MobreError::EmptySplit(_) => "empty_split",
        MobreError::MissingParams(_) => "missing_params",
        MobreError::InvalidMaskRatio(_) => "invalid_mask_ratio",
        MobreError::NoMaskedTokens => "no_masked_tokens",
        MobreError::UnknownVariant(_) => "unknown_variant",
        MobreError::HeldOut(_) => "held_out",
        MobreError::Resample { .. } => "resample",
        MobreError::Integrity(_) => "integrity",
        MobreError::Version(_) => "version",
        MobreError::CheckpointFormat(_) => "checkpoint_format",
        MobreError::Stage { .. } => "stage",
        MobreError::Corpus(_) => "corpus",
        MobreError::Invalid(_) => "invalid",
        MobreError::Io { source, .. } if source.kind() == std::io::ErrorKind::NotFound => "not_found",
        MobreError::Io { .. } => "io",
    }
}

fn one_line(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Parses `args` (program name first), runs the command and returns the exit code.
pub fn run<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return 0;
            }
            let detail = e.to_string();
            let first = detail.lines().next().unwrap_or("").trim_start_matches("error: ");
            eprintln!("error: code=2 kind=usage detail={}", one_line(first));
            return 2;
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            let code = exit_code(&e);
            eprintln!("error: code={code} kind={} detail={}", error_kind(&e), one_line(&e.to_string()));
            code
        }
    }
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[derive(Serialize)]
struct RunRecord<'a> {
    command: &'a str,
    seeds: &'a [u64],
    config_sha256: String,
    inputs: &'a BTreeMap<String, String>,
    outputs: &'a BTreeMap<String, String>,
}

/// Output directory bookkeeping.
struct RunDir {
    root: PathBuf,
    inputs: BTreeMap<String, String>,
    outputs: BTreeMap<String, String>,
}

impl RunDir {
    fn new(root: &Path) -> Result<Self> {
        std::fs::create_dir_all(root).map_err(|e| MobreError::io(root, e))?;
        Ok(RunDir {
            root: root.to_path_buf(),
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
        })
    }

    fn write(&mut self, name: &str, bytes: &[u8]) -> Result<()> {
        fsio::write_atomic(&self.root.join(name), bytes)?;
        self.outputs.insert(name.to_string(), sha256_hex(bytes));
        Ok(())
    }

    fn save_checkpoint<T: Scalar>(&mut self, name: &str, ckpt: &Checkpoint<T>) -> Result<String> {
        let hash = ckpt.save(&self.root.join(name))?;
        self.outputs.insert(name.to_string(), hash.clone());
        Ok(hash)
    }

    fn input(&mut self, path: &Path, hash: String) {
        self.inputs.insert(path.display().to_string(), hash);
    }

    fn finish(mut self, command: &str, cfg: &ExperimentConfig, seeds: &[u64]) -> Result<()> {
        let toml = cfg.to_toml();
        fsio::write_atomic(&self.root.join("config.resolved.toml"), toml.as_bytes())?;
        self.outputs.remove("run.json");
        let rec = RunRecord {
            command,
            seeds,
            config_sha256: sha256_hex(toml.as_bytes()),
            inputs: &self.inputs,
            outputs: &self.outputs,
        };
        let text = serde_json::to_string_pretty(&rec).expect("run record serializes") + "\n";
        fsio::write_atomic(&self.root.join("run.json"), text.as_bytes())
    }
}

fn load_config(spec: &str) -> Result<ExperimentConfig> {
    let cfg = ExperimentConfig::load(spec)?;
    cfg.validate()?;
    Ok(cfg)
}

/// Preprocessed recordings from a stored corpus or freshly generated.
fn load_corpus(cfg: &ExperimentConfig, dir: Option<&Path>) -> Result<Vec<Recording>> {
    match dir {
        None => prepare_corpus(cfg),
        Some(d) => {
            let (raw, tasks) = read_corpus(d)?;
            let classes: Vec<usize> = tasks.iter().map(|t| t.num_classes).collect();
            if classes != cfg.model.task_classes {
                return Err(MobreError::Config(format!(
                    "corpus tasks {classes:?} differ from model.task_classes {:?}",
                    cfg.model.task_classes
                )));
            }
            raw.iter().map(|r| preprocess(r, &cfg.preprocess)).collect()
        }
    }
}

fn seed_of(cfg: &ExperimentConfig, data: &Data) -> u64 {
    data.seed.unwrap_or(cfg.seeds[0])
}

fn seeds_of(cfg: &ExperimentConfig, given: &[u64]) -> Vec<u64> {
    if given.is_empty() {
        cfg.seeds.clone()
    } else {
        given.to_vec()
    }
}

fn train_config(cfg: &ExperimentConfig, seed: u64) -> TrainConfig {
    TrainConfig {
        seed,
        ..cfg.train.clone()
    }
}

fn split_indices(corpus: &[Recording], cfg: &ExperimentConfig, seed: u64, split: &str) -> Vec<usize> {
    let s = split_corpus(corpus, cfg.train.test_fraction, cfg.train.val_fraction, seed);
    match split {
        "train" => s.train,
        "val" => s.val,
        "test" => s.test,
        _ => (0..corpus.len()).collect(),
    }
}

fn print_report(label: &str, report: &MetricsReport) {
    for (t, m) in report.tasks.iter().enumerate() {
        println!(
            "{label} task={t} acc={:.4} kappa={:.4} sen={:.4} f1={:.4} chance={:.4}",
            m.accuracy, m.kappa, m.sensitivity, m.weighted_f1, m.chance
        );
    }
}

fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::Synth { common } => cmd_synth(&common),
        Command::Gradcheck {
            config,
            out,
            channels,
            patches,
            seed,
            aux_weight,
            step,
            floor,
            tolerance,
        } => cmd_gradcheck(&config, out.as_deref(), channels, patches, seed, aux_weight, step, floor, tolerance),
        Command::Merge { common, inputs } => {
            let files = expand_inputs(&inputs)?;
            match peek_dtype(&files[0])? {
                DType::F32 => cmd_merge::<f32>(&common, &files),
                DType::F64 => cmd_merge::<f64>(&common, &files),
            }
        }
        other => {
            let cfg = match &other {
                Command::Pretrain { common, .. }
                | Command::Train { common, .. }
                | Command::Eval { common, .. }
                | Command::Loso { common, .. }
                | Command::Ablate { common, .. }
                | Command::RouteReport { common, .. } => load_config(&common.config)?,
                _ => unreachable!("handled above"),
            };
            match cfg.train.dtype {
                DType::F32 => typed::<f32>(other, cfg),
                DType::F64 => typed::<f64>(other, cfg),
            }
        }
    }
}

fn typed<T: Scalar>(cmd: Command, cfg: ExperimentConfig) -> Result<()> {
    match cmd {
        Command::Pretrain { common, data } => cmd_pretrain::<T>(&cfg, &common, &data),
        Command::Train {
            common,
            data,
            variant,
            init,
        } => cmd_train::<T>(&cfg, &common, &data, &variant, init.as_deref()),
        Command::Eval {
            common,
            data,
            checkpoint,
            split,
        } => cmd_eval::<T>(&cfg, &common, &data, &checkpoint, &split, false),
        Command::RouteReport {
            common,
            data,
            checkpoint,
            split,
        } => cmd_eval::<T>(&cfg, &common, &data, &checkpoint, &split, true),
        Command::Loso {
            common,
            data,
            held_out,
            seeds,
        } => cmd_loso::<T>(&cfg, &common, &data, held_out, &seeds),
        Command::Ablate {
            common,
            data,
            variants,
            seeds,
        } => cmd_ablate::<T>(&cfg, &common, &data, &variants, &seeds),
        _ => unreachable!("untyped commands are dispatched earlier"),
    }
}

fn cmd_synth(common: &Common) -> Result<()> {
    let cfg = load_config(&common.config)?;
    let recs = generate_corpus(&cfg.synth)?;
    write_corpus(&common.out, &recs, &cfg.synth.tasks)?;
    let mut run = RunDir::new(&common.out)?;
    let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
    for r in &recs {
        *counts.entry(r.subject_id).or_default() += 1;
    }
    let mut summary = String::from("subject\trecordings\tchannels\n");
    for (s, n) in &counts {
        let c = recs.iter().find(|r| r.subject_id == *s).map_or(0, |r| r.num_channels);
        summary.push_str(&format!("{s}\t{n}\t{c}\n"));
    }
    run.write("subjects.tsv", summary.as_bytes())?;
    println!("synth subjects={} recordings={}", counts.len(), recs.len());
    run.finish("synth", &cfg, &[cfg.synth.seed])
}

fn cmd_pretrain<T: Scalar>(cfg: &ExperimentConfig, common: &Common, data: &Data) -> Result<()> {
    let corpus = load_corpus(cfg, data.corpus.as_deref())?;
    let seed = seed_of(cfg, data);
    let mut run = RunDir::new(&common.out)?;
    let idx = split_indices(&corpus, cfg, seed, "train");
    eprintln!("pretraining {} subject models", corpus.iter().map(|r| r.subject_id).collect::<BTreeSet<_>>().len());
    let pre = pretrain_all::<T>(&corpus, &idx, cfg, &cfg.model, seed)?;
    for (i, &s) in pre.subjects.iter().enumerate() {
        let regions: Vec<String> = pre.region_sets[i].iter().map(usize::to_string).collect();
        let ckpt = Checkpoint {
            stage: Stage::Rmae,
            parents: Vec::new(),
            rng_seed: rmae_subject_seed(seed, s),
            model: cfg.model.dense(),
            meta: [("subject".to_string(), s.to_string()), ("regions".to_string(), regions.join(","))].into(),
            params: pre.params[i].clone(),
        };
        run.save_checkpoint(&format!("subject_{s:03}.ckpt"), &ckpt)?;
        let curve: Vec<(usize, f64)> = pre.losses[i].iter().copied().enumerate().collect();
        run.write(&format!("rmae_loss_subject_{s:03}.tsv"), curve_text(&curve).as_bytes())?;
        println!(
            "pretrain subject={s} loss_start={:.6} loss_end={:.6}",
            pre.losses[i][0],
            pre.losses[i].last().unwrap()
        );
    }
    run.finish("pretrain", cfg, &[seed])
}

fn expand_inputs(inputs: &[PathBuf]) -> Result<Vec<PathBuf>> {
    let mut files = Vec::new();
    for p in inputs {
        if p.is_dir() {
            let mut found: Vec<PathBuf> = std::fs::read_dir(p)
                .map_err(|e| MobreError::io(p, e))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|f| f.extension().is_some_and(|x| x == "ckpt"))
                .collect();
            found.sort();
            files.extend(found);
        } else {
            files.push(p.clone());
        }
    }
    if files.is_empty() {
        return Err(MobreError::Invalid("no checkpoints to merge".into()));
    }
    Ok(files)
}

fn cmd_merge<T: Scalar>(common: &Common, files: &[PathBuf]) -> Result<()> {
    let cfg = load_config(&common.config)?;
    let mut run = RunDir::new(&common.out)?;
    let mut params = Vec::new();
    let mut region_sets = Vec::new();
    let mut parents = Vec::new();
    for f in files {
        let ckpt = Checkpoint::<T>::load(f)?;
        ckpt.require_stage(&[Stage::Rmae])?;
        let hash = ckpt.content_hash();
        run.input(f, hash.clone());
        parents.push(hash);
        let regions = ckpt
            .meta
            .get("regions")
            .map(|s| s.split(',').filter(|x| !x.is_empty()).map(|x| x.parse::<usize>()).collect::<std::result::Result<Vec<_>, _>>())
            .transpose()
            .map_err(|_| MobreError::CheckpointFormat(format!("{}: bad regions annotation", f.display())))?
            .unwrap_or_else(|| (0..ckpt.model.num_regions).collect());
        region_sets.push(regions);
        params.push(ckpt.params);
    }
    let merged = merge_models(&params, &region_sets, &cfg.merge)?;
    let model = Variant::Full.model_config(&cfg.model)?;
    let ckpt = Checkpoint {
        stage: Stage::Merged,
        parents,
        rng_seed: 0,
        model,
        meta: BTreeMap::new(),
        params: merged,
    };
    ckpt.validate()?;
    let hash = run.save_checkpoint("merged.ckpt", &ckpt)?;
    println!("merge inputs={} tensors={} hash={hash}", files.len(), ckpt.params.len());
    run.finish("merge", &cfg, &[])
}

fn write_report(run: &mut RunDir, cfg: &ExperimentConfig, label: &str, seed: u64, report: &MetricsReport) -> Result<()> {
    run.write("metrics.jsonl", metrics_jsonl(label, seed, report).as_bytes())?;
    if !report.utilization.dispatch.is_empty() {
        run.write("routes.tsv", route_tsv(&report.utilization, &cfg.synth.region_names).as_bytes())?;
    }
    print_report(label, report);
    Ok(())
}

fn cmd_train<T: Scalar>(cfg: &ExperimentConfig, common: &Common, data: &Data, variant: &str, init: Option<&Path>) -> Result<()> {
    let variant = Variant::parse(variant)?;
    let corpus = load_corpus(cfg, data.corpus.as_deref())?;
    let seed = seed_of(cfg, data);
    let tcfg = train_config(cfg, seed);
    let splits = split_corpus(&corpus, tcfg.test_fraction, tcfg.val_fraction, seed);
    let mut run = RunDir::new(&common.out)?;
    let mut parents = Vec::new();
    let (model, params) = match init {
        Some(path) => {
            if !variant.uses_rmae() {
                return Err(MobreError::Config(format!("variant {variant} does not start from a merged model")));
            }
            let ckpt = Checkpoint::<T>::load(path)?;
            ckpt.require_stage(&[Stage::Merged])?;
            let hash = ckpt.content_hash();
            run.input(path, hash.clone());
            parents.push(hash);
            let model = variant.model_config(&cfg.model)?;
            let params = upcycle_init(&ckpt.params, &model, model_init_seed(seed))?;
            (model, params)
        }
        None => {
            let mut cache = MergeCache::<T>::new();
            variant_init(&corpus, &splits.train, cfg, variant, seed, &mut cache)?
        }
    };
    eprintln!("training {variant} for {} epochs", tcfg.epochs);
    let outcome = train(&corpus, &splits, params, &model, &tcfg)?;
    let report = evaluate(&outcome.params, &model, &corpus, &splits.test)?;
    let ckpt = Checkpoint {
        stage: Stage::Trained,
        parents,
        rng_seed: seed,
        model,
        meta: [("variant".to_string(), variant.to_string())].into(),
        params: outcome.params,
    };
    run.save_checkpoint("trained.ckpt", &ckpt)?;
    run.write("loss.tsv", curve_text(&outcome.loss_curve).as_bytes())?;
    run.write("val_accuracy.tsv", curve_text(&outcome.val_curve).as_bytes())?;
    write_report(&mut run, cfg, &variant.to_string(), seed, &report)?;
    println!("best_epoch={}", outcome.best_epoch);
    run.finish("train", cfg, &[seed])
}

fn cmd_eval<T: Scalar>(
    cfg: &ExperimentConfig,
    common: &Common,
    data: &Data,
    path: &Path,
    split: &str,
    routes_only: bool,
) -> Result<()> {
    let ckpt = Checkpoint::<T>::load(path)?;
    ckpt.require_stage(&[Stage::Trained])?;
    validate_params(&ckpt.model, &ckpt.params)?;
    check_compatible(&ckpt.model, &cfg.model)?;
    let corpus = load_corpus(cfg, data.corpus.as_deref())?;
    let seed = data.seed.unwrap_or(ckpt.rng_seed);
    let idx = split_indices(&corpus, cfg, seed, split);
    let report = evaluate(&ckpt.params, &ckpt.model, &corpus, &idx)?;
    let mut run = RunDir::new(&common.out)?;
    run.input(path, ckpt.content_hash());
    let label = ckpt.meta.get("variant").cloned().unwrap_or_else(|| "model".into());
    if routes_only {
        if ckpt.model.local_ffn != LocalFfn::Moe {
            return Err(MobreError::Invalid("checkpoint has no expert routing".into()));
        }
        let tsv = route_tsv(&report.utilization, &cfg.synth.region_names);
        run.write("routes.tsv", tsv.as_bytes())?;
        println!("route-report layers={} variance={:.6e}", report.utilization.dispatch.len(), report.utilization.variance());
        run.finish("route-report", cfg, &[seed])
    } else {
        write_report(&mut run, cfg, &label, seed, &report)?;
        run.finish("eval", cfg, &[seed])
    }
}

fn check_compatible(stored: &ModelConfig, cfg: &ModelConfig) -> Result<()> {
    if stored.task_classes != cfg.task_classes || stored.num_regions != cfg.num_regions {
        return Err(MobreError::Config(
            "checkpoint tasks or regions differ from the configuration".into(),
        ));
    }
    Ok(())
}

fn cmd_loso<T: Scalar>(cfg: &ExperimentConfig, common: &Common, data: &Data, held_out: Option<usize>, seeds: &[u64]) -> Result<()> {
    let corpus = load_corpus(cfg, data.corpus.as_deref())?;
    let seeds = seeds_of(cfg, seeds);
    let subjects: Vec<usize> = match held_out {
        Some(h) => vec![h],
        None => corpus.iter().map(|r| r.subject_id).collect::<BTreeSet<_>>().into_iter().collect(),
    };
    let mut run = RunDir::new(&common.out)?;
    let mut lines = String::new();
    let mut rows = Vec::new();
    for &h in &subjects {
        let label = format!("loso-subject-{h}");
        let mut reports = Vec::new();
        for &seed in &seeds {
            eprintln!("{label} seed={seed}");
            let report = loso_run::<T>(&corpus, cfg, h, seed)?;
            print_report(&format!("{label} seed={seed}"), &report);
            lines.push_str(&metrics_jsonl(&label, seed, &report));
            reports.push(report);
        }
        rows.push((label, reports));
    }
    run.write("metrics.jsonl", lines.as_bytes())?;
    run.write("summary.tsv", summary_table(&rows).as_bytes())?;
    run.finish("loso", cfg, &seeds)
}

fn cmd_ablate<T: Scalar>(cfg: &ExperimentConfig, common: &Common, data: &Data, names: &[String], seeds: &[u64]) -> Result<()> {
    let variants = names.iter().map(|n| Variant::parse(n)).collect::<Result<Vec<_>>>()?;
    for v in &variants {
        v.model_config(&cfg.model)?;
    }
    let corpus = load_corpus(cfg, data.corpus.as_deref())?;
    let seeds = seeds_of(cfg, seeds);
    let mut run = RunDir::new(&common.out)?;
    let mut lines = String::new();
    let mut util = String::from("variant\tseed\tutilization_variance\n");
    let mut by_variant: BTreeMap<usize, Vec<MetricsReport>> = BTreeMap::new();
    for &seed in &seeds {
        let mut cache = MergeCache::<T>::new();
        for (vi, &v) in variants.iter().enumerate() {
            eprintln!("ablate {v} seed={seed}");
            let r = crate::pipeline::run_variant::<T>(&corpus, cfg, v, seed, &mut cache)?;
            print_report(&format!("{v} seed={seed}"), &r.report);
            lines.push_str(&metrics_jsonl(&v.to_string(), seed, &r.report));
            util.push_str(&format!("{v}\t{seed}\t{:.9e}\n", r.report.utilization.variance()));
            run.write(&format!("curves/{v}_seed{seed}_loss.tsv"), curve_text(&r.loss_curve).as_bytes())?;
            by_variant.entry(vi).or_default().push(r.report);
        }
    }
    let rows: Vec<(String, Vec<MetricsReport>)> =
        by_variant.into_iter().map(|(vi, r)| (variants[vi].to_string(), r)).collect();
    run.write("metrics.jsonl", lines.as_bytes())?;
    run.write("utilization.tsv", util.as_bytes())?;
    run.write("summary.tsv", summary_table(&rows).as_bytes())?;
    run.finish("ablate", cfg, &seeds)
}

#[allow(clippy::too_many_arguments)]
fn cmd_gradcheck(
    config: &str,
    out: Option<&Path>,
    channels: usize,
    patches: usize,
    seed: u64,
    aux_weight: f64,
    step: f64,
    floor: f64,
    tolerance: f64,
) -> Result<()> {
    let cfg = load_config(config)?;
    let case = gradcheck::make_case(&cfg.model, channels, patches, seed)?;
    let report = gradcheck::check(&cfg.model, &case, aux_weight, step, floor)?;
    println!(
        "max_rel_error={:.6e} worst={} checked={} routing_flips={}",
        report.max_rel_error, report.worst, report.checked, report.routing_flips
    );
    if let Some(dir) = out {
        let mut run = RunDir::new(dir)?;
        let text = serde_json::to_string_pretty(&report).expect("report serializes") + "\n";
        run.write("gradcheck.json", text.as_bytes())?;
        run.finish("gradcheck", &cfg, &[seed])?;
    }
    if report.max_rel_error < tolerance {
        Ok(())
    } else {
        Err(MobreError::Invalid(format!(
            "gradient mismatch {:.3e} at {} exceeds {tolerance:e}",
            report.max_rel_error, report.worst
        )))
    }
}
