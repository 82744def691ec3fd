//! Experiment grids over (upstream, downstream, mask source, sparsity, seed)
//! and the cross-language averages computed from their results.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::train::{
    derive_subnetwork, downstream_finetune, evaluate, upstream_finetune, TrainConfig,
    UpstreamResult,
};
use crate::error::{Error, Result};
use crate::nn::Model;
use crate::par;
use crate::prune::{union_mask, Mask};
use crate::synth::{derive_seed, Corpus};

/// Where the pruning mask of a cell comes from. Masks are always derived from
/// upstream-fine-tuned models at the cell's sparsity.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum MaskSource {
    /// The upstream model's own subnetwork.
    Own,
    /// Another language's upstream subnetwork.
    Other(String),
    /// Union of several upstream subnetworks.
    Union(Vec<String>),
}

impl MaskSource {
    pub fn languages<'a>(&'a self, upstream: &'a str) -> Vec<&'a str> {
        match self {
            MaskSource::Own => vec![upstream],
            MaskSource::Other(l) => vec![l.as_str()],
            MaskSource::Union(ls) => ls.iter().map(String::as_str).collect(),
        }
    }
}

impl fmt::Display for MaskSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MaskSource::Own => f.write_str("self"),
            MaskSource::Other(l) => write!(f, "other:{l}"),
            MaskSource::Union(ls) => write!(f, "union:{}", ls.join("+")),
        }
    }
}

impl FromStr for MaskSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || {
            Error::schema(
                "mask_source",
                format!("expected self, other:<id> or union:<id>+<id>..., got `{s}`"),
            )
        };
        if s == "self" {
            return Ok(MaskSource::Own);
        }
        if let Some(l) = s.strip_prefix("other:") {
            return if l.is_empty() || l.contains('+') {
                Err(bad())
            } else {
                Ok(MaskSource::Other(l.to_string()))
            };
        }
        if let Some(ls) = s.strip_prefix("union:") {
            let ids: Vec<String> = ls.split('+').map(str::to_string).collect();
            if ids.iter().any(String::is_empty) {
                return Err(bad());
            }
            return Ok(MaskSource::Union(ids));
        }
        Err(bad())
    }
}

impl TryFrom<String> for MaskSource {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<MaskSource> for String {
    fn from(m: MaskSource) -> String {
        m.to_string()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSpec {
    pub upstream: String,
    pub downstream: String,
    pub sparsities: Vec<f64>,
    #[serde(default = "own")]
    pub mask_source: MaskSource,
    pub seeds: Vec<u64>,
}

fn own() -> MaskSource {
    MaskSource::Own
}

impl ExperimentSpec {
    pub fn validate(&self) -> Result<()> {
        for (i, s) in self.sparsities.iter().enumerate() {
            if !(0.0..=1.0).contains(s) {
                return Err(Error::schema(
                    format!("sparsities[{i}]"),
                    format!("{s} outside [0, 1]"),
                ));
            }
        }
        if self.seeds.is_empty() {
            return Err(Error::schema("seeds", "at least one seed required"));
        }
        Ok(())
    }
}

/// One executed grid cell. Failed cells carry the error text and no CER.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub upstream: String,
    pub downstream: String,
    pub mask_source: MaskSource,
    pub sparsity: f64,
    pub seed: u64,
    pub cer: Option<f64>,
    pub train_losses: Vec<f64>,
    pub val_losses: Vec<f64>,
    pub checkpoint: Option<String>,
    pub error: Option<String>,
}

impl RunResult {
    pub fn epochs_run(&self) -> usize {
        self.val_losses.len()
    }

    pub fn best_val_loss(&self) -> Option<f64> {
        self.val_losses.iter().copied().reduce(f64::min)
    }

    pub fn is_matched(&self) -> bool {
        self.upstream == self.downstream
    }

    fn canonical_cmp(&self, other: &Self) -> Ordering {
        (
            &self.upstream,
            &self.downstream,
            self.mask_source.to_string(),
        )
            .cmp(&(
                &other.upstream,
                &other.downstream,
                other.mask_source.to_string(),
            ))
            .then(self.sparsity.total_cmp(&other.sparsity))
            .then(self.seed.cmp(&other.seed))
    }
}

pub fn sort_results(results: &mut [RunResult]) {
    results.sort_by(RunResult::canonical_cmp);
}

/// Shared inputs of a grid: the pretrained base, one labeled corpus per
/// language and the two training configurations. Training seeds come from
/// the cell seeds, not from the configs.
pub struct GridInputs<'a> {
    pub base: &'a Model,
    pub corpora: &'a BTreeMap<String, Corpus>,
    pub upstream: TrainConfig,
    pub downstream: TrainConfig,
}

impl GridInputs<'_> {
    fn corpus(&self, id: &str) -> Result<&Corpus> {
        self.corpora
            .get(id)
            .ok_or_else(|| Error::UnknownLanguage(id.to_string()))
    }
}

pub type UpstreamModels = BTreeMap<(String, u64), std::result::Result<UpstreamResult, String>>;

/// Fine-tunes the base on every (language, seed) pair.
pub fn train_upstreams(
    inputs: &GridInputs<'_>,
    languages: &BTreeSet<String>,
    seeds: &BTreeSet<u64>,
) -> UpstreamModels {
    let jobs: Vec<(String, u64)> = languages
        .iter()
        .flat_map(|l| seeds.iter().map(move |&s| (l.clone(), s)))
        .collect();
    let out = par::map(&jobs, |(lang, seed)| {
        let corpus = inputs.corpus(lang)?;
        let config = TrainConfig {
            seed: derive_seed(*seed, &format!("upstream|{lang}")),
            freeze_first_epoch: false,
            ..inputs.upstream
        };
        upstream_finetune(inputs.base, &corpus.train, &corpus.val, &config)
    });
    jobs.into_iter()
        .zip(out)
        .map(|(k, r)| (k, r.map_err(|e| e.to_string())))
        .collect()
}

struct Cell<'s> {
    spec: &'s ExperimentSpec,
    sparsity: f64,
    seed: u64,
}

fn cell_mask(upstreams: &UpstreamModels, cell: &Cell<'_>) -> Result<Mask> {
    let mut mask: Option<Mask> = None;
    for lang in cell.spec.mask_source.languages(&cell.spec.upstream) {
        let up = lookup(upstreams, lang, cell.seed)?;
        let m = derive_subnetwork(&up.best, cell.sparsity)?;
        mask = Some(match mask {
            None => m,
            Some(acc) => union_mask(&acc, &m)?,
        });
    }
    mask.ok_or_else(|| Error::schema("mask_source", "union of no languages"))
}

fn lookup<'u>(upstreams: &'u UpstreamModels, lang: &str, seed: u64) -> Result<&'u UpstreamResult> {
    match upstreams.get(&(lang.to_string(), seed)) {
        Some(Ok(u)) => Ok(u),
        Some(Err(e)) => Err(Error::MissingCell(format!(
            "upstream {lang} seed {seed} failed: {e}"
        ))),
        None => Err(Error::UnknownLanguage(lang.to_string())),
    }
}

fn run_cell(
    inputs: &GridInputs<'_>,
    upstreams: &UpstreamModels,
    cell: &Cell<'_>,
) -> Result<(f64, Vec<f64>, Vec<f64>)> {
    let spec = cell.spec;
    let up = lookup(upstreams, &spec.upstream, cell.seed)?;
    let corpus = inputs.corpus(&spec.downstream)?;
    let mask = cell_mask(upstreams, cell)?;
    let matched = spec.upstream == spec.downstream;
    let key = format!(
        "{}|{}|{}|{:.6}",
        spec.upstream, spec.downstream, spec.mask_source, cell.sparsity
    );
    let config = TrainConfig {
        seed: derive_seed(cell.seed, &key),
        freeze_first_epoch: !matched,
        ..inputs.downstream
    };
    let run = downstream_finetune(
        &up.best,
        &mask,
        &corpus.train,
        &corpus.val,
        &config,
        matched,
        None,
    )?;
    let cer = evaluate(&run.model, &corpus.test)?;
    Ok((
        cer,
        run.logs.iter().map(|l| l.train_loss).collect(),
        run.logs.iter().map(|l| l.val_loss).collect(),
    ))
}

/// Runs every (spec, sparsity, seed) cell against upstream models already
/// trained by [`train_upstreams`]. Failures are recorded per cell.
pub fn run_grid_with(
    inputs: &GridInputs<'_>,
    upstreams: &UpstreamModels,
    specs: &[ExperimentSpec],
) -> Vec<RunResult> {
    let cells: Vec<Cell<'_>> = specs
        .iter()
        .flat_map(|spec| {
            spec.sparsities.iter().flat_map(move |&sparsity| {
                spec.seeds.iter().map(move |&seed| Cell {
                    spec,
                    sparsity,
                    seed,
                })
            })
        })
        .collect();
    let outcomes = par::map(&cells, |cell| {
        cell.spec.validate()?;
        run_cell(inputs, upstreams, cell)
    });
    let mut results: Vec<RunResult> = cells
        .iter()
        .zip(outcomes)
        .map(|(cell, outcome)| {
            let mut r = RunResult {
                upstream: cell.spec.upstream.clone(),
                downstream: cell.spec.downstream.clone(),
                mask_source: cell.spec.mask_source.clone(),
                sparsity: cell.sparsity,
                seed: cell.seed,
                cer: None,
                train_losses: Vec::new(),
                val_losses: Vec::new(),
                checkpoint: None,
                error: None,
            };
            match outcome {
                Ok((cer, train, val)) => {
                    r.cer = Some(cer);
                    r.train_losses = train;
                    r.val_losses = val;
                }
                Err(e) => r.error = Some(e.to_string()),
            }
            r
        })
        .collect();
    sort_results(&mut results);
    results
}

/// Upstream languages (including mask sources) and seeds a spec list needs.
pub fn required_upstreams(specs: &[ExperimentSpec]) -> (BTreeSet<String>, BTreeSet<u64>) {
    let mut langs = BTreeSet::new();
    let mut seeds = BTreeSet::new();
    for s in specs {
        langs.extend(
            s.mask_source
                .languages(&s.upstream)
                .into_iter()
                .map(str::to_string),
        );
        langs.insert(s.upstream.clone());
        seeds.extend(s.seeds.iter().copied());
    }
    (langs, seeds)
}

/// Trains the needed upstream models, then runs every cell.
pub fn run_grid(inputs: &GridInputs<'_>, specs: &[ExperimentSpec]) -> Vec<RunResult> {
    if specs.is_empty() {
        return Vec::new();
    }
    let (langs, seeds) = required_upstreams(specs);
    let upstreams = train_upstreams(inputs, &langs, &seeds);
    run_grid_with(inputs, &upstreams, specs)
}

/// Full cross product with the own-subnetwork mask source.
pub fn full_grid(languages: &[String], sparsities: &[f64], seeds: &[u64]) -> Vec<ExperimentSpec> {
    languages
        .iter()
        .flat_map(|u| {
            languages.iter().map(move |d| ExperimentSpec {
                upstream: u.clone(),
                downstream: d.clone(),
                sparsities: sparsities.to_vec(),
                mask_source: MaskSource::Own,
                seeds: seeds.to_vec(),
            })
        })
        .collect()
}

/// Whether the averages count the cell whose upstream and downstream match.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MatchedCells {
    Exclude,
    Include,
}

#[derive(Clone, Copy)]
enum Axis {
    Upstream,
    Downstream,
}

fn sparsity_key(s: f64) -> i64 {
    (s * 1e6).round() as i64
}

fn average(
    results: &[RunResult],
    axis: Axis,
    language: &str,
    matched: MatchedCells,
) -> Result<Vec<(f64, f64)>> {
    let own: Vec<&RunResult> = results
        .iter()
        .filter(|r| r.mask_source == MaskSource::Own)
        .collect();
    type Key = fn(&RunResult) -> &str;
    let (fixed, other): (Key, Key) = match axis {
        Axis::Upstream => (|r| &r.upstream, |r| &r.downstream),
        Axis::Downstream => (|r| &r.downstream, |r| &r.upstream),
    };
    let partners: BTreeSet<&str> = own
        .iter()
        .map(|r| other(r))
        .filter(|l| matched == MatchedCells::Include || *l != language)
        .collect();
    let mut sparsities: BTreeMap<i64, f64> = BTreeMap::new();
    // (sparsity, partner) -> successful CERs over seeds
    let mut cells: BTreeMap<(i64, &str), Vec<f64>> = BTreeMap::new();
    for r in own.iter().filter(|r| fixed(r) == language) {
        let k = sparsity_key(r.sparsity);
        sparsities.insert(k, r.sparsity);
        if let Some(c) = r.cer {
            cells.entry((k, other(r))).or_default().push(c);
        }
    }
    if sparsities.is_empty() {
        return Err(Error::MissingCell(format!(
            "no cells for language `{language}`"
        )));
    }
    let mut out = Vec::with_capacity(sparsities.len());
    for (k, s) in sparsities {
        let mut sum = 0.0;
        for p in &partners {
            let cers = cells.get(&(k, p)).ok_or_else(|| {
                let (u, d) = match axis {
                    Axis::Upstream => (language, *p),
                    Axis::Downstream => (*p, language),
                };
                Error::MissingCell(format!("upstream={u} downstream={d} sparsity={s}"))
            })?;
            sum += cers.iter().sum::<f64>() / cers.len() as f64;
        }
        if partners.is_empty() {
            return Err(Error::MissingCell(format!(
                "no partner languages for `{language}`"
            )));
        }
        out.push((s, sum / partners.len() as f64));
    }
    Ok(out)
}

/// Per-sparsity mean CER of `upstream`'s own subnetwork across downstream
/// languages (seeds averaged first). `Exclude` drops the matched cell.
pub fn avg_subnetwork_performance(
    results: &[RunResult],
    upstream: &str,
    matched: MatchedCells,
) -> Result<Vec<(f64, f64)>> {
    average(results, Axis::Upstream, upstream, matched)
}

/// Per-sparsity mean CER on `language` across upstream subnetworks.
pub fn avg_downstream_language(
    results: &[RunResult],
    language: &str,
    matched: MatchedCells,
) -> Result<Vec<(f64, f64)>> {
    average(results, Axis::Downstream, language, matched)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cell(u: &str, d: &str, s: f64, cer: f64) -> RunResult {
        RunResult {
            upstream: u.into(),
            downstream: d.into(),
            mask_source: MaskSource::Own,
            sparsity: s,
            seed: 0,
            cer: Some(cer),
            train_losses: vec![],
            val_losses: vec![],
            checkpoint: None,
            error: None,
        }
    }

    #[test]
    fn mask_source_round_trip() {
        for s in ["self", "other:es", "union:en+es+pl"] {
            assert_eq!(s.parse::<MaskSource>().unwrap().to_string(), s);
        }
        assert!("other:".parse::<MaskSource>().is_err());
        assert!("union:en+".parse::<MaskSource>().is_err());
        assert!("mine".parse::<MaskSource>().is_err());
    }

    #[test]
    fn averages_exclude_matched() {
        let r = vec![
            cell("a", "a", 0.5, 1.0),
            cell("a", "b", 0.5, 10.0),
            cell("a", "c", 0.5, 20.0),
        ];
        let avg = avg_subnetwork_performance(&r, "a", MatchedCells::Exclude).unwrap();
        assert_eq!(avg, vec![(0.5, 15.0)]);
        let inc = avg_subnetwork_performance(&r, "a", MatchedCells::Include).unwrap();
        assert!((inc[0].1 - 31.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn downstream_average() {
        let r = vec![
            cell("b", "l", 0.9, 40.0),
            cell("c", "l", 0.9, 60.0),
            cell("l", "l", 0.9, 1.0),
        ];
        let avg = avg_downstream_language(&r, "l", MatchedCells::Exclude).unwrap();
        assert_eq!(avg, vec![(0.9, 50.0)]);
    }

    #[test]
    fn missing_cell_is_named() {
        let mut r = vec![
            cell("a", "b", 0.5, 10.0),
            cell("a", "c", 0.5, 20.0),
            cell("a", "b", 0.9, 30.0),
        ];
        let err = avg_subnetwork_performance(&r, "a", MatchedCells::Exclude).unwrap_err();
        assert!(
            err.to_string().contains("downstream=c sparsity=0.9"),
            "{err}"
        );
        r.push(cell("a", "c", 0.9, 30.0));
        assert!(avg_subnetwork_performance(&r, "a", MatchedCells::Exclude).is_ok());
    }

    #[test]
    fn canonical_order() {
        let mut r = vec![
            cell("b", "a", 0.9, 0.0),
            cell("a", "b", 0.9, 0.0),
            cell("a", "b", 0.5, 0.0),
        ];
        sort_results(&mut r);
        let keys: Vec<_> = r
            .iter()
            .map(|c| (c.upstream.as_str(), c.sparsity))
            .collect();
        assert_eq!(keys, [("a", 0.5), ("a", 0.9), ("b", 0.9)]);
    }
}
