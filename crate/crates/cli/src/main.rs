use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use sublab::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, Metadata};
use sublab::config::{parse_config, ExperimentConfig};
use sublab::nn::Model;
use sublab::pipeline::{
    derive_subnetwork, downstream_finetune, evaluate, pretrain_base, run_grid_with,
    train_upstreams, upstream_finetune, GridInputs, RunResult,
};
use sublab::prune::{global_l1_prune, Mask};
use sublab::report::{
    downstream_averages_csv, grid_csv, iou_matrix_csv, read_results_json, upstream_averages_csv,
    write_results_json, write_text,
};
use sublab::synth::{derive_seed, read_corpus, write_corpus, Corpus};
use sublab::{Error, ParameterTree};

#[derive(Parser)]
#[command(
    name = "sublab",
    version,
    about = "Language-specific subnetwork experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the pretraining and per-language fine-tuning corpora.
    Corpus(CorpusArgs),
    /// Masked-frame pretraining of the base model.
    Pretrain(PretrainArgs),
    /// Fine-tune the base model on one language.
    Upstream(UpstreamArgs),
    /// Derive global magnitude masks from a fine-tuned model.
    Prune(PruneArgs),
    /// Prune a model with a mask and fine-tune it on a language.
    Downstream(DownstreamArgs),
    /// Run the configured experiment grid end to end.
    Grid(GridArgs),
    /// Pairwise IOU of masks.
    Iou(IouArgs),
    /// Grid CSV, per-language averages and IOU matrices from a grid run.
    Report(ReportArgs),
}

#[derive(Args)]
struct Common {
    /// Experiment configuration (JSON).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the configuration seed.
    #[arg(long)]
    seed: Option<u64>,
}

impl Common {
    fn load(&self) -> Result<ExperimentConfig, Error> {
        let mut cfg = match &self.config {
            Some(p) => parse_config(p)?,
            None => ExperimentConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        Ok(cfg)
    }
}

#[derive(Args)]
struct CorpusArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct PretrainArgs {
    #[command(flatten)]
    common: Common,
    /// Corpus directory; the train split's frames are used. Generated from
    /// the configuration when absent.
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct UpstreamArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    base: PathBuf,
    /// Single-language corpus directory.
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct PruneArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long, required = true)]
    sparsity: Vec<f64>,
    /// Mask file, or a directory when several sparsities are given.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct DownstreamArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    mask: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct GridArgs {
    #[command(flatten)]
    common: Common,
    /// Replaces the configured grid sparsities.
    #[arg(long)]
    sparsity: Vec<f64>,
    /// Pretrained base checkpoint; pretrains from the configuration when absent.
    #[arg(long)]
    base: Option<PathBuf>,
    /// Directory written by `corpus`; generated when absent.
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct IouArgs {
    #[arg(long, required = true)]
    mask: Vec<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ReportArgs {
    /// Output directory of a `grid` run.
    #[arg(long)]
    grid: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

struct Failure {
    kind: &'static str,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure {
            kind: e.kind(),
            message: e.to_string(),
        }
    }
}

fn fail(kind: &'static str, message: impl Into<String>) -> Failure {
    Failure {
        kind,
        message: message.into(),
    }
}

fn emit(value: serde_json::Value) {
    println!("{value}");
}

fn single_language(corpus: &Corpus, dir: &Path) -> Result<String, Failure> {
    let mut ids = corpus
        .train
        .iter()
        .chain(&corpus.val)
        .chain(&corpus.test)
        .map(|u| u.language_id.as_str());
    let first = ids
        .next()
        .ok_or_else(|| Failure::from(Error::EmptyCorpus))?;
    if ids.any(|id| id != first) {
        return Err(fail(
            "corpus",
            format!("{} mixes several languages", dir.display()),
        ));
    }
    Ok(first.to_string())
}

fn mask_checkpoint(model: &Checkpoint, mask: Mask, sparsity: f64) -> Checkpoint {
    let mut metadata = model.metadata.clone();
    metadata.stage = "mask".into();
    metadata.sparsity = Some(sparsity);
    Checkpoint {
        metadata,
        params: ParameterTree::new(),
        mask: Some(mask),
    }
}

fn check_sparsities(values: &[f64]) -> Result<(), Failure> {
    for s in values {
        if !(0.0..=1.0).contains(s) {
            return Err(Error::OutOfRange("sparsity", *s).into());
        }
    }
    Ok(())
}

fn cmd_corpus(a: &CorpusArgs) -> Result<(), Failure> {
    let cfg = a.common.load()?;
    let langs = cfg.build_languages()?;
    let emb = cfg.embedding();
    let pre = cfg.pretrain_corpus(&langs, &emb)?;
    write_corpus(&a.out.join("pretrain"), &pre)?;
    for id in cfg.finetune_languages() {
        let c = cfg.finetune_corpus(&langs, &emb, &id)?;
        write_corpus(&a.out.join("finetune").join(&id), &c)?;
    }
    emit(json!({"command": "corpus", "pretrain_utterances": pre.len()}));
    Ok(())
}

fn pretrain(cfg: &ExperimentConfig, corpus: Option<&Path>) -> Result<(Model, Vec<f64>), Failure> {
    let corpus = match corpus {
        Some(dir) => read_corpus(dir)?,
        None => {
            let langs = cfg.build_languages()?;
            cfg.pretrain_corpus(&langs, &cfg.embedding())?
        }
    };
    let frames: Vec<_> = corpus.train.into_iter().map(|u| u.frames).collect();
    let r = pretrain_base(&cfg.init_model()?, &frames, &cfg.pretrain_config())?;
    Ok((r.model, r.losses))
}

fn cmd_pretrain(a: &PretrainArgs) -> Result<(), Failure> {
    let cfg = a.common.load()?;
    let (model, losses) = pretrain(&cfg, a.corpus.as_deref())?;
    let mut metadata = Metadata::new(cfg.model, "base", cfg.seed);
    metadata.epoch = Some(losses.len());
    save_checkpoint(
        &a.out,
        &Checkpoint {
            metadata,
            params: model.params,
            mask: None,
        },
    )?;
    emit(json!({"command": "pretrain", "epochs": losses.len(), "losses": losses}));
    Ok(())
}

fn load_model(path: &Path) -> Result<Checkpoint, Failure> {
    let c = load_checkpoint(path)?;
    if c.params.is_empty() {
        return Err(fail(
            "not_a_model",
            format!("{} holds no parameters", path.display()),
        ));
    }
    Ok(c)
}

fn cmd_upstream(a: &UpstreamArgs) -> Result<(), Failure> {
    let cfg = a.common.load()?;
    let base = load_model(&a.base)?;
    let corpus = read_corpus(&a.corpus)?;
    let lang = single_language(&corpus, &a.corpus)?;
    let tc = cfg.upstream_config(derive_seed(cfg.seed, &format!("upstream|{lang}")));
    let r = upstream_finetune(&base.model(), &corpus.train, &corpus.val, &tc)?;
    let mut metadata = Metadata::new(base.metadata.config, "upstream", cfg.seed);
    metadata.language = Some(lang.clone());
    metadata.epoch = Some(r.best_epoch);
    save_checkpoint(
        &a.out,
        &Checkpoint {
            metadata,
            params: r.best.params.clone(),
            mask: None,
        },
    )?;
    emit(json!({
        "command": "upstream",
        "language": lang,
        "best_epoch": r.best_epoch,
        "best_val_loss": r.best_val_loss(),
        "val_losses": r.logs.iter().map(|l| l.val_loss).collect::<Vec<_>>(),
    }));
    Ok(())
}

fn cmd_prune(a: &PruneArgs) -> Result<(), Failure> {
    check_sparsities(&a.sparsity)?;
    let model = load_model(&a.model)?;
    let mut written = Vec::new();
    for &s in &a.sparsity {
        let mask = global_l1_prune(&model.params, s)?;
        let path = if a.sparsity.len() == 1 {
            a.out.clone()
        } else {
            a.out.join(format!("mask_s{s:.2}.ckpt"))
        };
        save_checkpoint(&path, &mask_checkpoint(&model, mask, s))?;
        written.push(path.display().to_string());
    }
    emit(json!({"command": "prune", "masks": written}));
    Ok(())
}

fn load_mask(path: &Path) -> Result<(Checkpoint, Mask), Failure> {
    let mut c = load_checkpoint(path)?;
    let mask = c.mask.take().ok_or_else(|| {
        fail(
            "not_a_mask",
            format!("{} has no mask section", path.display()),
        )
    })?;
    Ok((c, mask))
}

fn cmd_downstream(a: &DownstreamArgs) -> Result<(), Failure> {
    let cfg = a.common.load()?;
    let model = load_model(&a.model)?;
    let (_, mask) = load_mask(&a.mask)?;
    let corpus = read_corpus(&a.corpus)?;
    let lang = single_language(&corpus, &a.corpus)?;
    let matched = model.metadata.language.as_deref() == Some(lang.as_str());
    let tc = cfg.downstream_config(derive_seed(cfg.seed, &format!("downstream|{lang}")));
    let r = downstream_finetune(
        &model.model(),
        &mask,
        &corpus.train,
        &corpus.val,
        &tc,
        matched,
        None,
    )?;
    let cer = evaluate(&r.model, &corpus.test)?;
    let mut metadata = Metadata::new(model.metadata.config, "downstream", cfg.seed);
    metadata.language = Some(lang.clone());
    metadata.epoch = Some(r.logs.len());
    save_checkpoint(
        &a.out,
        &Checkpoint {
            metadata,
            params: r.model.params,
            mask: Some(mask),
        },
    )?;
    emit(json!({
        "command": "downstream",
        "language": lang,
        "matched": matched,
        "epochs": r.logs.len(),
        "cer": cer,
    }));
    Ok(())
}

fn mask_name(label: &str, seed: u64, sparsity: f64) -> String {
    format!("{label}_seed{seed}_s{sparsity:.2}.ckpt")
}

fn cmd_grid(a: &GridArgs) -> Result<(), Failure> {
    let mut cfg = a.common.load()?;
    if !a.sparsity.is_empty() {
        check_sparsities(&a.sparsity)?;
        cfg.grid.sparsities = a.sparsity.clone();
    }
    let base = match &a.base {
        Some(p) => load_model(p)?.model(),
        None => {
            pretrain(
                &cfg,
                a.corpus.as_ref().map(|d| d.join("pretrain")).as_deref(),
            )?
            .0
        }
    };
    let specs = cfg.experiments();
    let needed = cfg.grid_languages();
    let mut corpora = BTreeMap::new();
    let generated = if a.corpus.is_none() {
        Some((cfg.build_languages()?, cfg.embedding()))
    } else {
        None
    };
    for id in &needed {
        let c = match (&a.corpus, &generated) {
            (Some(dir), _) => read_corpus(&dir.join("finetune").join(id))?,
            (None, Some((langs, emb))) => cfg.finetune_corpus(langs, emb, id)?,
            (None, None) => unreachable!(),
        };
        corpora.insert(id.clone(), c);
    }
    let inputs = GridInputs {
        base: &base,
        corpora: &corpora,
        upstream: cfg.upstream_config(0),
        downstream: cfg.downstream_config(0),
    };
    let (langs, seeds) = sublab::pipeline::required_upstreams(&specs);
    let upstreams = train_upstreams(&inputs, &langs, &seeds);
    let results = run_grid_with(&inputs, &upstreams, &specs);

    // masks behind every IOU analysis: base plus each upstream language
    let masks_dir = a.out.join("masks");
    let meta = |stage: &str, lang: Option<&str>, seed: u64, s: f64| {
        let mut m = Metadata::new(cfg.model, stage, seed);
        m.language = lang.map(str::to_string);
        m.sparsity = Some(s);
        m
    };
    for &s in &cfg.grid.sparsities {
        let mask = global_l1_prune(&base.params, s)?;
        for &seed in &seeds {
            let ckpt = Checkpoint {
                metadata: meta("mask", None, seed, s),
                params: ParameterTree::new(),
                mask: Some(mask.clone()),
            };
            save_checkpoint(&masks_dir.join(mask_name("base", seed, s)), &ckpt)?;
        }
        for ((lang, seed), up) in &upstreams {
            let Ok(up) = up else { continue };
            let ckpt = Checkpoint {
                metadata: meta("mask", Some(lang), *seed, s),
                params: ParameterTree::new(),
                mask: Some(derive_subnetwork(&up.best, s)?),
            };
            save_checkpoint(&masks_dir.join(mask_name(lang, *seed, s)), &ckpt)?;
        }
    }
    write_results_json(&a.out.join("results.json"), &results)?;
    write_text(&a.out.join("grid.csv"), &grid_csv(&results))?;
    let failed: Vec<&RunResult> = results.iter().filter(|r| r.error.is_some()).collect();
    for r in &failed {
        eprintln!(
            "{}",
            json!({
                "cell": format!("{}|{}|{}|{:.2}|{}", r.upstream, r.downstream, r.mask_source, r.sparsity, r.seed),
                "error": r.error,
            })
        );
    }
    if !failed.is_empty() {
        return Err(fail(
            "cell_failures",
            format!("{} of {} cells failed", failed.len(), results.len()),
        ));
    }
    emit(json!({"command": "grid", "cells": results.len()}));
    Ok(())
}

fn label_of(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.display().to_string())
}

fn cmd_iou(a: &IouArgs) -> Result<(), Failure> {
    let mut labels = Vec::new();
    let mut masks = Vec::new();
    for p in &a.mask {
        let (_, m) = load_mask(p)?;
        labels.push(label_of(p));
        masks.push(m);
    }
    write_text(&a.out, &iou_matrix_csv(&labels, &masks)?)?;
    emit(json!({"command": "iou", "masks": labels.len()}));
    Ok(())
}

fn cmd_report(a: &ReportArgs) -> Result<(), Failure> {
    let results = read_results_json(&a.grid.join("results.json"))?;
    write_text(&a.out.join("grid.csv"), &grid_csv(&results))?;
    let (up, mut problems) = upstream_averages_csv(&results);
    write_text(&a.out.join("upstream_averages.csv"), &up)?;
    let (down, p2) = downstream_averages_csv(&results);
    problems.extend(p2);
    write_text(&a.out.join("downstream_averages.csv"), &down)?;

    // one IOU matrix per (seed, sparsity) over the saved masks
    let dir = a.grid.join("masks");
    let mut groups: BTreeMap<String, Vec<(String, PathBuf)>> = BTreeMap::new();
    if dir.is_dir() {
        let mut entries: Vec<PathBuf> = std::fs::read_dir(&dir)
            .map_err(|e| Error::io(&dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "ckpt"))
            .collect();
        entries.sort();
        for p in entries {
            let stem = label_of(&p);
            if let Some((lang, key)) = stem.split_once("_seed") {
                groups
                    .entry(key.to_string())
                    .or_default()
                    .push((lang.to_string(), p.clone()));
            }
        }
    }
    let mut matrices = 0;
    for (key, mut items) in groups {
        // base first, then languages alphabetically
        items.sort_by_key(|(l, _)| (l != "base", l.clone()));
        let mut labels = Vec::new();
        let mut masks = Vec::new();
        for (l, p) in items {
            labels.push(l);
            masks.push(load_mask(&p)?.1);
        }
        write_text(
            &a.out.join(format!("iou_seed{key}.csv")),
            &iou_matrix_csv(&labels, &masks)?,
        )?;
        matrices += 1;
    }
    for p in &problems {
        eprintln!("{}", json!({"warning": "incomplete_average", "message": p}));
    }
    emit(json!({
        "command": "report",
        "rows": results.len(),
        "iou_matrices": matrices,
        "incomplete_averages": problems.len(),
    }));
    Ok(())
}

fn run(cli: Cli) -> Result<(), Failure> {
    match &cli.command {
        Command::Corpus(a) => cmd_corpus(a),
        Command::Pretrain(a) => cmd_pretrain(a),
        Command::Upstream(a) => cmd_upstream(a),
        Command::Prune(a) => cmd_prune(a),
        Command::Downstream(a) => cmd_downstream(a),
        Command::Grid(a) => cmd_grid(a),
        Command::Iou(a) => cmd_iou(a),
        Command::Report(a) => cmd_report(a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("invalid usage");
            eprintln!(
                "{}",
                json!({"error": "usage", "message": first.trim_start_matches("error: ")})
            );
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("{}", json!({"error": f.kind, "message": f.message}));
            ExitCode::FAILURE
        }
    }
}
