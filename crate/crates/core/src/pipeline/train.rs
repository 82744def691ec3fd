//! Training loops: masked-frame pretraining, CTC fine-tuning with
//! best-checkpoint selection, and pruned downstream fine-tuning.

use std::collections::BTreeMap;

use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{cer, greedy_decode};
use crate::nn::{adam_step, adam_step_map, AdamConfig, AdamState, Graph, Model};
use crate::par;
use crate::prune::{apply_mask_in_place, Mask};
use crate::synth::{derive_seed, Utterance};
use crate::tensor::{ParameterTree, Region, Tensor};

/// Epochs of full training after the optional frozen-encoder epoch.
pub const DOWNSTREAM_EPOCHS: usize = 10;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    pub freeze_first_epoch: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 16,
            lr: 3e-4,
            seed: 0,
            freeze_first_epoch: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::schema("batch_size", "must be at least 1"));
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::schema("lr", "must be positive"));
        }
        Ok(())
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig::with_lr(self.lr)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub train_loss: f64,
    pub val_loss: f64,
}

/// Which parameters an epoch updates.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Trainable {
    All,
    /// Only `ctc_head/`; feature projection and encoder frozen.
    HeadOnly,
}

impl Trainable {
    pub fn accepts(self, path: &str) -> bool {
        match self {
            Trainable::All => true,
            Trainable::HeadOnly => path.starts_with(Region::CtcHead.prefix()),
        }
    }
}

/// Snapshot handed to step observers after every optimizer step.
pub struct StepInfo<'a> {
    /// 1-based epoch index.
    pub epoch: usize,
    pub step: usize,
    pub trainable: Trainable,
    pub params: &'a ParameterTree,
}

pub type StepObserver<'o> = &'o mut dyn FnMut(&StepInfo<'_>);

fn add_into(acc: &mut ParameterTree, g: &ParameterTree) {
    for ((_, a), (_, b)) in acc.iter_mut().zip(g.iter()) {
        a.data_mut()
            .iter_mut()
            .zip(b.data())
            .for_each(|(x, y)| *x += y);
    }
}

fn scale(tree: &mut ParameterTree, s: f32) {
    for (_, t) in tree.iter_mut() {
        t.data_mut().iter_mut().for_each(|v| *v *= s);
    }
}

/// Mean CTC loss over `utts`.
pub fn mean_ctc_loss(model: &Model, utts: &[Utterance]) -> Result<f64> {
    if utts.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let losses = par::map(utts, |u| model.ctc_loss(&u.frames, &u.target()));
    let mut total = 0.0;
    for l in losses {
        total += l?;
    }
    Ok(total / utts.len() as f64)
}

/// Runs one pass per entry of `schedule` over `train`, logging the mean
/// training loss and the validation loss after each epoch. The mask, when
/// given, is re-applied after every optimizer step. `on_epoch` sees the
/// parameters at the end of each epoch.
#[allow(clippy::too_many_arguments)]
pub fn train_ctc(
    model: &mut Model,
    train: &[Utterance],
    val: &[Utterance],
    schedule: &[Trainable],
    config: &TrainConfig,
    mask: Option<&Mask>,
    mut observer: Option<StepObserver<'_>>,
    mut on_epoch: impl FnMut(usize, &EpochLog, &Model),
) -> Result<Vec<EpochLog>> {
    config.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let mut state = AdamState::new();
    let hyper = config.adam();
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut logs = Vec::with_capacity(schedule.len());
    let mut step = 0;

    for (e, &trainable) in schedule.iter().enumerate() {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(config.batch_size) {
            let utts: Vec<&Utterance> = batch.iter().map(|&i| &train[i]).collect();
            let results = par::map(&utts, |u| model.ctc_loss_and_grads(&u.frames, &u.target()));
            let mut grads = model.params.zeros_like();
            for r in results {
                let (loss, g) = r?;
                epoch_loss += loss;
                add_into(&mut grads, &g);
            }
            scale(&mut grads, 1.0 / batch.len() as f32);
            adam_step(&mut model.params, &grads, &mut state, &hyper, |p| {
                trainable.accepts(p)
            })?;
            if let Some(mask) = mask {
                apply_mask_in_place(&mut model.params, mask)?;
            }
            step += 1;
            if let Some(obs) = observer.as_mut() {
                obs(&StepInfo {
                    epoch: e + 1,
                    step,
                    trainable,
                    params: &model.params,
                });
            }
        }
        let log = EpochLog {
            train_loss: epoch_loss / train.len() as f64,
            val_loss: mean_ctc_loss(model, val)?,
        };
        on_epoch(e + 1, &log, model);
        logs.push(log);
    }
    Ok(logs)
}

/// 1-based epoch with the lowest validation loss; ties go to the earliest.
pub fn select_best_epoch(val_losses: &[f64]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, &l) in val_losses.iter().enumerate() {
        if best.is_none_or(|(_, b)| l < b) {
            best = Some((i, l));
        }
    }
    best.map(|(i, _)| i + 1)
}

#[derive(Clone, Debug)]
pub struct PretrainResult {
    pub model: Model,
    pub losses: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    /// Fraction of frames replaced by the mask embedding.
    pub mask_fraction: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 16,
            lr: 1e-3,
            seed: 0,
            mask_fraction: 0.3,
        }
    }
}

const HEAD_W: &str = "pretrain_head/weight";
const HEAD_B: &str = "pretrain_head/bias";

/// Frames to mask: `max(1, round(fraction * T))` distinct rows, sorted.
pub fn masked_rows<R: Rng + ?Sized>(t: usize, fraction: f64, rng: &mut R) -> Vec<usize> {
    let m = ((fraction * t as f64).round() as usize).clamp(1, t);
    let mut rows = sample(rng, t, m).into_vec();
    rows.sort_unstable();
    rows
}

/// Masked-frame regression loss of one utterance with gradients for the
/// model tree and the auxiliary regression head.
fn masked_frame_loss(
    model: &Model,
    head: &BTreeMap<String, Tensor>,
    frames: &Tensor,
    rows: &[usize],
) -> Result<(f64, ParameterTree, BTreeMap<String, Tensor>)> {
    let mut g = Graph::new();
    let h = model.encode(&mut g, frames, rows)?;
    let w = g.param(HEAD_W, &head[HEAD_W]);
    let b = g.param(HEAD_B, &head[HEAD_B]);
    let pred = g.matmul(h, w)?;
    let pred = g.add_bias(pred, b)?;
    let d = frames.cols();
    let p = g.value_f64(pred);
    let norm = (rows.len() * d) as f64;
    let mut loss = 0.0;
    let mut grad = vec![0.0; p.len()];
    for &r in rows {
        for j in 0..d {
            let diff = p[r * d + j] - frames.row(r)[j] as f64;
            loss += diff * diff / norm;
            grad[r * d + j] = 2.0 * diff / norm;
        }
    }
    let node = g.loss(pred, loss, grad)?;
    let grads = g.backward(node)?;
    let mut aux = BTreeMap::new();
    for path in [HEAD_W, HEAD_B] {
        let t = grads
            .get(path)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(head[path].shape()));
        aux.insert(path.to_string(), t);
    }
    Ok((loss, grads.into_tree(&model.params), aux))
}

/// Self-supervised proxy: a fraction of each utterance's projected frames is
/// replaced by a learned mask vector and the encoder plus a linear head
/// regress the original frames (mean squared error on masked rows). Returns
/// the final-epoch parameters and the per-epoch mean loss.
pub fn pretrain_base(
    init: &Model,
    frames: &[Tensor],
    config: &PretrainConfig,
) -> Result<PretrainResult> {
    if frames.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    if config.batch_size == 0 || !(config.lr > 0.0) {
        return Err(Error::schema(
            "pretrain",
            "batch_size and lr must be positive",
        ));
    }
    if !(config.mask_fraction > 0.0 && config.mask_fraction <= 1.0) {
        return Err(Error::OutOfRange("mask_fraction", config.mask_fraction));
    }
    let mut model = init.clone();
    let (dm, di) = (model.config.model_dim, model.config.input_dim);
    let mut head_rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, "pretrain_head"));
    let bound = 1.0 / (dm as f32).sqrt();
    let mut head = BTreeMap::new();
    head.insert(
        HEAD_W.to_string(),
        Tensor::from_fn(&[dm, di], |_| head_rng.random_range(-bound..=bound)),
    );
    head.insert(HEAD_B.to_string(), Tensor::zeros(&[di]));

    let hyper = AdamConfig::with_lr(config.lr);
    let mut state = AdamState::new();
    let mut head_state = AdamState::new();
    let mut order: Vec<usize> = (0..frames.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut losses = Vec::with_capacity(config.epochs);

    for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(config.batch_size) {
            // masking decisions drawn sequentially so parallel evaluation
            // cannot change them
            let jobs: Vec<(usize, Vec<usize>)> = batch
                .iter()
                .map(|&i| {
                    (
                        i,
                        masked_rows(frames[i].rows(), config.mask_fraction, &mut rng),
                    )
                })
                .collect();
            let results = par::map(&jobs, |(i, rows)| {
                masked_frame_loss(&model, &head, &frames[*i], rows)
            });
            let mut grads = model.params.zeros_like();
            let mut head_grads: BTreeMap<String, Tensor> = head
                .iter()
                .map(|(k, v)| (k.clone(), Tensor::zeros(v.shape())))
                .collect();
            for r in results {
                let (loss, g, hg) = r?;
                epoch_loss += loss;
                add_into(&mut grads, &g);
                for (k, v) in hg {
                    let acc = head_grads.get_mut(&k).expect("head path");
                    acc.data_mut()
                        .iter_mut()
                        .zip(v.data())
                        .for_each(|(a, b)| *a += b);
                }
            }
            let s = 1.0 / batch.len() as f32;
            scale(&mut grads, s);
            head_grads
                .values_mut()
                .for_each(|t| t.data_mut().iter_mut().for_each(|v| *v *= s));
            adam_step(&mut model.params, &grads, &mut state, &hyper, |_| true)?;
            adam_step_map(&mut head, &head_grads, &mut head_state, &hyper)?;
        }
        losses.push(epoch_loss / frames.len() as f64);
    }
    Ok(PretrainResult { model, losses })
}

#[derive(Clone, Debug)]
pub struct UpstreamResult {
    /// Parameters from the epoch with the lowest validation loss.
    pub best: Model,
    /// 1-based.
    pub best_epoch: usize,
    pub logs: Vec<EpochLog>,
}

impl UpstreamResult {
    pub fn best_val_loss(&self) -> f64 {
        self.logs[self.best_epoch - 1].val_loss
    }
}

/// Full-model CTC fine-tuning on one language; keeps the epoch checkpoint
/// with the lowest validation loss (earliest on ties).
pub fn upstream_finetune(
    base: &Model,
    train: &[Utterance],
    val: &[Utterance],
    config: &TrainConfig,
) -> Result<UpstreamResult> {
    if config.epochs == 0 {
        return Err(Error::schema("upstream.epochs", "must be at least 1"));
    }
    let mut model = base.clone();
    let schedule = vec![Trainable::All; config.epochs];
    let mut best: Option<(usize, f64, Model)> = None;
    let logs = train_ctc(
        &mut model,
        train,
        val,
        &schedule,
        config,
        None,
        None,
        |epoch, log, m| {
            if best.as_ref().is_none_or(|(_, l, _)| log.val_loss < *l) {
                best = Some((epoch, log.val_loss, m.clone()));
            }
        },
    )?;
    let (best_epoch, _, best) = best.expect("at least one epoch");
    Ok(UpstreamResult {
        best,
        best_epoch,
        logs,
    })
}

/// Global L1 subnetwork of an upstream-fine-tuned model.
pub fn derive_subnetwork(model: &Model, sparsity: f64) -> Result<Mask> {
    crate::prune::global_l1_prune(&model.params, sparsity)
}

#[derive(Clone, Debug)]
pub struct DownstreamResult {
    pub model: Model,
    pub logs: Vec<EpochLog>,
    /// Leading epochs run with the encoder frozen.
    pub frozen_epochs: usize,
}

/// Epoch plan of a downstream run: matched runs train fully for
/// `epochs`; unmatched runs first train only the CTC head for one epoch.
pub fn downstream_schedule(epochs: usize, matched: bool) -> Vec<Trainable> {
    let mut s = Vec::with_capacity(epochs + 1);
    if !matched {
        s.push(Trainable::HeadOnly);
    }
    s.extend(std::iter::repeat_n(Trainable::All, epochs));
    s
}

/// Prunes `model` with `mask` and fine-tunes on the downstream language,
/// re-applying the mask after every optimizer step. `config.epochs` is the
/// number of full epochs (10 by default); `matched = false` prepends one
/// frozen-encoder epoch.
pub fn downstream_finetune(
    model: &Model,
    mask: &Mask,
    train: &[Utterance],
    val: &[Utterance],
    config: &TrainConfig,
    matched: bool,
    observer: Option<StepObserver<'_>>,
) -> Result<DownstreamResult> {
    mask.matches(&model.params)?;
    let mut m = model.clone();
    apply_mask_in_place(&mut m.params, mask)?;
    let schedule = downstream_schedule(config.epochs, matched);
    let logs = train_ctc(
        &mut m,
        train,
        val,
        &schedule,
        config,
        Some(mask),
        observer,
        |_, _, _| {},
    )?;
    Ok(DownstreamResult {
        model: m,
        logs,
        frozen_epochs: usize::from(!matched),
    })
}

/// Micro CER of greedy transcripts over `test`.
pub fn evaluate(model: &Model, test: &[Utterance]) -> Result<f64> {
    if test.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let hyps = par::map(test, |u| {
        model.log_probs(&u.frames).map(|lp| greedy_decode(&lp))
    });
    let hyps = hyps
        .into_iter()
        .map(|h| h.map(|l| l.symbols().to_vec()))
        .collect::<Result<Vec<Vec<usize>>>>()?;
    let refs: Vec<Vec<usize>> = test.iter().map(|u| u.text.clone()).collect();
    cer(&refs, &hyps)
}
