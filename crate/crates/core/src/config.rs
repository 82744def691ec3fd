//! JSON experiment configuration.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{init_model, EncoderConfig, Model};
use crate::pipeline::{ExperimentSpec, MaskSource, PretrainConfig, TrainConfig};
use crate::synth::{
    build_corpus, derive_seed, embedding_table, make_language, reference_proportions, Corpus,
    CorpusSpec, FrameParams, LanguageParams, LanguageSpec,
};
use crate::tensor::Tensor;

/// A generated language, optionally interpolated toward an earlier one.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LanguageDef {
    pub id: String,
    #[serde(default)]
    pub parent: Option<String>,
    /// Weight on the parent's chain; ignored without a parent.
    #[serde(default)]
    pub alpha: f64,
}

impl LanguageDef {
    fn root(id: &str) -> Self {
        Self {
            id: id.into(),
            parent: None,
            alpha: 0.0,
        }
    }

    fn child(id: &str, parent: &str, alpha: f64) -> Self {
        Self {
            id: id.into(),
            parent: Some(parent.into()),
            alpha,
        }
    }
}

fn default_cast() -> Vec<LanguageDef> {
    vec![
        LanguageDef::root("en"),
        LanguageDef::child("de", "en", 0.5),
        LanguageDef::root("es"),
        LanguageDef::child("fr", "es", 0.5),
        LanguageDef::child("ca", "es", 0.7),
        LanguageDef::root("pl"),
        LanguageDef::child("as", "es", 0.8),
        LanguageDef::child("xh", "pl", 0.0),
    ]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainSection {
    pub corpus: CorpusSpec,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub mask_fraction: f64,
}

impl Default for PretrainSection {
    fn default() -> Self {
        let p = PretrainConfig::default();
        Self {
            corpus: CorpusSpec::new(reference_proportions(), 1000),
            epochs: p.epochs,
            batch_size: p.batch_size,
            lr: p.lr,
            mask_fraction: p.mask_fraction,
        }
    }
}

/// Labeled per-language corpora for upstream and downstream fine-tuning.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinetuneSection {
    pub utterances_per_language: usize,
    pub splits: [f64; 3],
    /// Defaults to every defined language.
    pub languages: Option<Vec<String>>,
}

impl Default for FinetuneSection {
    fn default() -> Self {
        Self {
            utterances_per_language: 200,
            splits: [0.8, 0.1, 0.1],
            languages: None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageConfig {
    #[serde(default)]
    pub epochs: Option<usize>,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_lr")]
    pub lr: f64,
}

fn default_batch() -> usize {
    16
}

fn default_lr() -> f64 {
    3e-4
}

impl StageConfig {
    fn with_epochs(epochs: usize) -> Self {
        Self {
            epochs: Some(epochs),
            batch_size: default_batch(),
            lr: default_lr(),
        }
    }

    pub fn train_config(&self, default_epochs: usize, seed: u64) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs.unwrap_or(default_epochs),
            batch_size: self.batch_size,
            lr: self.lr,
            seed,
            freeze_first_epoch: false,
        }
    }
}

pub const UPSTREAM_EPOCHS: usize = 30;
pub const DOWNSTREAM_EPOCHS: usize = crate::pipeline::DOWNSTREAM_EPOCHS;

fn default_upstream() -> StageConfig {
    StageConfig::with_epochs(UPSTREAM_EPOCHS)
}

fn default_downstream() -> StageConfig {
    StageConfig::with_epochs(DOWNSTREAM_EPOCHS)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridSection {
    /// Upstream and downstream sets default to the fine-tuning languages.
    pub upstreams: Option<Vec<String>>,
    pub downstreams: Option<Vec<String>>,
    pub sparsities: Vec<f64>,
    pub mask_sources: Vec<MaskSource>,
    pub seeds: Vec<u64>,
    /// Explicit cells in addition to the cross product.
    pub experiments: Vec<ExperimentSpec>,
}

impl Default for GridSection {
    fn default() -> Self {
        Self {
            upstreams: None,
            downstreams: None,
            sparsities: vec![0.0, 0.5, 0.7, 0.9],
            mask_sources: vec![MaskSource::Own],
            seeds: vec![0],
            experiments: Vec::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub model: EncoderConfig,
    #[serde(default)]
    pub language_params: LanguageParams,
    #[serde(default = "default_cast")]
    pub languages: Vec<LanguageDef>,
    #[serde(default)]
    pub frames: FrameParams,
    #[serde(default)]
    pub pretrain: PretrainSection,
    #[serde(default)]
    pub finetune: FinetuneSection,
    #[serde(default = "default_upstream")]
    pub upstream: StageConfig,
    #[serde(default = "default_downstream")]
    pub downstream: StageConfig,
    #[serde(default)]
    pub grid: GridSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("empty config parses")
    }
}

fn check_range(path: String, v: f64) -> Result<()> {
    if (0.0..=1.0).contains(&v) {
        Ok(())
    } else {
        Err(Error::schema(path, format!("{v} outside [0, 1]")))
    }
}

fn corpus_error(prefix: &str, e: Error) -> Error {
    match e {
        Error::Corpus(msg) => match msg.split_once(": ") {
            Some((field, rest)) => Error::schema(format!("{prefix}.{field}"), rest),
            None => Error::schema(prefix, msg),
        },
        other => other,
    }
}

impl ExperimentConfig {
    /// Semantic checks beyond what deserialization enforces; error paths
    /// use dotted field names.
    pub fn validate(&self) -> Result<()> {
        self.model
            .validate()
            .map_err(|e| Error::schema("model", e.to_string()))?;
        let ids: BTreeSet<&str> = self.languages.iter().map(|l| l.id.as_str()).collect();
        if ids.len() != self.languages.len() {
            return Err(Error::schema("languages", "duplicate language id"));
        }
        let mut seen = BTreeSet::new();
        for (i, l) in self.languages.iter().enumerate() {
            if let Some(p) = &l.parent {
                if !seen.contains(p.as_str()) {
                    return Err(Error::schema(
                        format!("languages[{i}].parent"),
                        format!("`{p}` must be defined before `{}`", l.id),
                    ));
                }
            }
            check_range(format!("languages[{i}].alpha"), l.alpha)?;
            seen.insert(l.id.as_str());
        }
        let known = |path: String, id: &str| -> Result<()> {
            if ids.contains(id) {
                Ok(())
            } else {
                Err(Error::schema(path, format!("unknown language `{id}`")))
            }
        };

        self.pretrain
            .corpus
            .validate()
            .map_err(|e| corpus_error("pretrain.corpus", e))?;
        for id in self.pretrain.corpus.proportions.keys() {
            known(format!("pretrain.corpus.proportions.{id}"), id)?;
        }
        if self.pretrain.batch_size == 0 {
            return Err(Error::schema("pretrain.batch_size", "must be at least 1"));
        }
        if !(self.pretrain.lr > 0.0) {
            return Err(Error::schema("pretrain.lr", "must be positive"));
        }
        if !(self.pretrain.mask_fraction > 0.0 && self.pretrain.mask_fraction <= 1.0) {
            return Err(Error::schema(
                "pretrain.mask_fraction",
                "must be within (0, 1]",
            ));
        }

        let ft = &self.finetune;
        CorpusSpec {
            proportions: [("x".to_string(), 1.0)].into(),
            total_utterances: ft.utterances_per_language,
            splits: ft.splits,
        }
        .validate()
        .map_err(|e| corpus_error("finetune", e))?;
        for (i, id) in ft.languages.iter().flatten().enumerate() {
            known(format!("finetune.languages[{i}]"), id)?;
        }

        for (name, stage, default) in [
            ("upstream", &self.upstream, UPSTREAM_EPOCHS),
            ("downstream", &self.downstream, DOWNSTREAM_EPOCHS),
        ] {
            if stage.epochs.unwrap_or(default) == 0 {
                return Err(Error::schema(
                    format!("{name}.epochs"),
                    "must be at least 1",
                ));
            }
            if stage.batch_size == 0 {
                return Err(Error::schema(
                    format!("{name}.batch_size"),
                    "must be at least 1",
                ));
            }
            if !(stage.lr > 0.0) || !stage.lr.is_finite() {
                return Err(Error::schema(format!("{name}.lr"), "must be positive"));
            }
        }

        let g = &self.grid;
        for (i, s) in g.sparsities.iter().enumerate() {
            check_range(format!("grid.sparsities[{i}]"), *s)?;
        }
        if g.seeds.is_empty() {
            return Err(Error::schema("grid.seeds", "at least one seed required"));
        }
        for (field, list) in [("upstreams", &g.upstreams), ("downstreams", &g.downstreams)] {
            for (i, id) in list.iter().flatten().enumerate() {
                known(format!("grid.{field}[{i}]"), id)?;
            }
        }
        for (i, m) in g.mask_sources.iter().enumerate() {
            for id in m.languages("").into_iter().filter(|s| !s.is_empty()) {
                known(format!("grid.mask_sources[{i}]"), id)?;
            }
        }
        for (i, e) in g.experiments.iter().enumerate() {
            e.validate().map_err(|err| match err {
                Error::Schema { path, message } => {
                    Error::schema(format!("grid.experiments[{i}].{path}"), message)
                }
                other => other,
            })?;
            known(format!("grid.experiments[{i}].upstream"), &e.upstream)?;
            known(format!("grid.experiments[{i}].downstream"), &e.downstream)?;
        }
        Ok(())
    }

    /// Generates every defined language from the experiment seed.
    pub fn build_languages(&self) -> Result<Vec<LanguageSpec>> {
        let mut out: Vec<LanguageSpec> = Vec::with_capacity(self.languages.len());
        for def in &self.languages {
            let parent = match &def.parent {
                Some(p) => {
                    let spec = out
                        .iter()
                        .find(|l| &l.id == p)
                        .ok_or_else(|| Error::UnknownLanguage(p.clone()))?;
                    Some((spec, def.alpha))
                }
                None => None,
            };
            let seed = derive_seed(self.seed, &def.id);
            let spec = make_language(&def.id, seed, parent, &self.language_params)?;
            out.push(spec);
        }
        Ok(out)
    }

    /// Symbol embedding shared by every corpus of the experiment.
    pub fn embedding(&self) -> Tensor {
        embedding_table(
            derive_seed(self.seed, "embedding"),
            self.model.input_dim,
            self.frames.embedding_scale,
        )
    }

    pub fn init_model(&self) -> Result<Model> {
        init_model(self.model, derive_seed(self.seed, "init"))
    }

    pub fn pretrain_corpus(
        &self,
        languages: &[LanguageSpec],
        embedding: &Tensor,
    ) -> Result<Corpus> {
        build_corpus(
            &self.pretrain.corpus,
            languages,
            embedding,
            &self.frames,
            derive_seed(self.seed, "pretrain-corpus"),
        )
    }

    pub fn finetune_corpus(
        &self,
        languages: &[LanguageSpec],
        embedding: &Tensor,
        id: &str,
    ) -> Result<Corpus> {
        build_corpus(
            &self.finetune_corpus_spec(id),
            languages,
            embedding,
            &self.frames,
            derive_seed(self.seed, &format!("finetune/{id}")),
        )
    }

    pub fn finetune_languages(&self) -> Vec<String> {
        match &self.finetune.languages {
            Some(l) => l.clone(),
            None => self.languages.iter().map(|l| l.id.clone()).collect(),
        }
    }

    pub fn finetune_corpus_spec(&self, language: &str) -> CorpusSpec {
        CorpusSpec {
            proportions: [(language.to_string(), 1.0)].into(),
            total_utterances: self.finetune.utterances_per_language,
            splits: self.finetune.splits,
        }
    }

    pub fn pretrain_config(&self) -> PretrainConfig {
        PretrainConfig {
            epochs: self.pretrain.epochs,
            batch_size: self.pretrain.batch_size,
            lr: self.pretrain.lr,
            seed: derive_seed(self.seed, "pretrain"),
            mask_fraction: self.pretrain.mask_fraction,
        }
    }

    pub fn upstream_config(&self, seed: u64) -> TrainConfig {
        self.upstream.train_config(UPSTREAM_EPOCHS, seed)
    }

    pub fn downstream_config(&self, seed: u64) -> TrainConfig {
        self.downstream.train_config(DOWNSTREAM_EPOCHS, seed)
    }

    /// Cross product of the grid section plus its explicit experiments.
    pub fn experiments(&self) -> Vec<ExperimentSpec> {
        let langs = self.finetune_languages();
        let ups = self.grid.upstreams.clone().unwrap_or_else(|| langs.clone());
        let downs = self.grid.downstreams.clone().unwrap_or(langs);
        let mut out = Vec::new();
        for u in &ups {
            for d in &downs {
                for m in &self.grid.mask_sources {
                    out.push(ExperimentSpec {
                        upstream: u.clone(),
                        downstream: d.clone(),
                        sparsities: self.grid.sparsities.clone(),
                        mask_source: m.clone(),
                        seeds: self.grid.seeds.clone(),
                    });
                }
            }
        }
        out.extend(self.grid.experiments.iter().cloned());
        out
    }

    /// Languages whose corpora a grid needs.
    pub fn grid_languages(&self) -> BTreeSet<String> {
        let mut set = BTreeSet::new();
        for e in self.experiments() {
            set.insert(e.downstream.clone());
            set.extend(
                e.mask_source
                    .languages(&e.upstream)
                    .into_iter()
                    .map(String::from),
            );
        }
        set
    }
}

/// Parses and validates a configuration document.
pub fn parse_config_str(text: &str) -> Result<ExperimentConfig> {
    let de = &mut serde_json::Deserializer::from_str(text);
    let config: ExperimentConfig = serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        Error::schema(
            if path == "." { "$".into() } else { path },
            e.into_inner().to_string(),
        )
    })?;
    config.validate()?;
    Ok(config)
}

pub fn parse_config(path: &Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_config_str(&text)
}

/// Proportions with `dominant` holding `share` and the rest split evenly.
pub fn dominant_proportions(ids: &[&str], dominant: &str, share: f64) -> BTreeMap<String, f64> {
    let rest = (1.0 - share) / (ids.len() - 1) as f64;
    ids.iter()
        .map(|id| (id.to_string(), if *id == dominant { share } else { rest }))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config_fills_defaults() {
        let c = parse_config_str("{}").unwrap();
        assert_eq!(c.upstream_config(0).epochs, 30);
        assert_eq!(c.downstream_config(0).epochs, 10);
        assert_eq!(c.upstream_config(0).lr, 3e-4);
        assert_eq!(c.downstream_config(0).lr, 3e-4);
        assert_eq!(c.downstream_config(0).batch_size, 16);
        assert_eq!(c.languages.len(), 8);
    }

    #[test]
    fn partial_stage_keeps_other_defaults() {
        let c = parse_config_str(r#"{"upstream": {"lr": 0.001}}"#).unwrap();
        assert_eq!(c.upstream_config(0).epochs, 30);
        assert_eq!(c.upstream_config(0).lr, 1e-3);
    }

    #[test]
    fn proportions_must_sum_to_one() {
        let text = r#"{"pretrain": {"corpus": {"proportions": {"en": 0.5, "es": 0.4}, "total_utterances": 10}}}"#;
        let err = parse_config_str(text).unwrap_err();
        assert!(err.to_string().contains("proportions"), "{err}");
    }

    #[test]
    fn sparsity_range() {
        let err = parse_config_str(r#"{"grid": {"sparsities": [0.5, 1.2]}}"#).unwrap_err();
        assert!(err.to_string().contains("grid.sparsities[1]"), "{err}");
    }

    #[test]
    fn unknown_keys_name_their_path() {
        let err = parse_config_str(r#"{"upstream": {"epoch": 3}}"#).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("upstream") && msg.contains("epoch"), "{msg}");
    }

    #[test]
    fn default_cast_matches_library_cast() {
        let c = ExperimentConfig::default();
        let a = c.build_languages().unwrap();
        let b = crate::synth::default_languages(c.seed, &c.language_params).unwrap();
        for l in &b {
            let m = a.iter().find(|x| x.id == l.id).unwrap();
            assert_eq!(m, l);
        }
    }
}
