//! Independent reference implementations shared by the integration tests.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sublab::prune::{Mask, MaskEntry};
use sublab::{ParameterTree, Tensor};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Collapse a frame-level path: merge repeats, then drop blanks (0).
pub fn collapse(path: &[usize]) -> Vec<usize> {
    let mut out = Vec::new();
    let mut prev = None;
    for &p in path {
        if Some(p) != prev && p != 0 {
            out.push(p);
        }
        prev = Some(p);
    }
    out
}

/// P(target) by enumerating all V^T alignment paths of row-major log-probs.
pub fn brute_force_ctc_prob(log_probs: &[f64], t: usize, v: usize, target: &[usize]) -> f64 {
    let mut total = 0.0;
    let mut path = vec![0usize; t];
    loop {
        if collapse(&path) == target {
            total += path
                .iter()
                .enumerate()
                .map(|(i, &k)| log_probs[i * v + k])
                .sum::<f64>()
                .exp();
        }
        // odometer increment
        let mut i = 0;
        loop {
            if i == t {
                return total;
            }
            path[i] += 1;
            if path[i] < v {
                break;
            }
            path[i] = 0;
            i += 1;
        }
    }
}

/// Row-normalized random log-probabilities.
pub fn random_log_probs<R: Rng>(rng: &mut R, t: usize, v: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(t * v);
    for _ in 0..t {
        let logits: Vec<f64> = (0..v).map(|_| rng.random_range(-3.0..3.0)).collect();
        let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + logits.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
        out.extend(logits.iter().map(|x| x - lse));
    }
    out
}

/// Every sequence over `1..=alphabet` with length at most `max_len`.
pub fn all_strings(alphabet: usize, max_len: usize) -> Vec<Vec<usize>> {
    let mut out = vec![vec![]];
    let mut frontier = vec![vec![]];
    for _ in 0..max_len {
        let mut next = Vec::new();
        for s in &frontier {
            for c in 1..=alphabet {
                let mut n: Vec<usize> = s.clone();
                n.push(c);
                next.push(n);
            }
        }
        out.extend(next.iter().cloned());
        frontier = next;
    }
    out
}

/// Levenshtein distance by plain recursion over the first symbols.
pub fn lev_recursive(a: &[usize], b: &[usize]) -> usize {
    if a.is_empty() {
        return b.len();
    }
    if b.is_empty() {
        return a.len();
    }
    let sub = lev_recursive(&a[1..], &b[1..]) + usize::from(a[0] != b[0]);
    let del = lev_recursive(&a[1..], b) + 1;
    let ins = lev_recursive(a, &b[1..]) + 1;
    sub.min(del).min(ins)
}

/// Random tree with 1-4 prunable encoder matrices plus non-prunable tensors.
/// Values are drawn from a small grid so magnitude ties are common.
pub fn random_tree<R: Rng>(rng: &mut R) -> ParameterTree {
    let mut tree = ParameterTree::new();
    let n = rng.random_range(1..=4);
    for i in 0..n {
        let rows = rng.random_range(1..=6);
        let cols = rng.random_range(1..=6);
        let coarse = rng.random_bool(0.5);
        let t = Tensor::from_fn(&[rows, cols], |_| {
            if coarse {
                rng.random_range(-4i32..=4) as f32 / 4.0
            } else {
                rng.random_range(-1.0f32..1.0)
            }
        });
        tree.insert(format!("encoder/layers/{i}/w/weight"), t)
            .unwrap();
        tree.insert(
            format!("encoder/layers/{i}/w/bias"),
            Tensor::from_fn(&[cols], |_| rng.random_range(-1e-3f32..1e-3)),
        )
        .unwrap();
    }
    tree.insert("ctc_head/weight", Tensor::from_fn(&[3, 2], |_| 1e-6))
        .unwrap();
    tree.insert("feature_proj/weight", Tensor::from_fn(&[2, 3], |_| 1e-6))
        .unwrap();
    tree
}

/// Entries of the prunable tensors in tree order: (path, flat index, value).
pub fn prunable_entries(tree: &ParameterTree) -> Vec<(String, usize, f32)> {
    tree.prunable()
        .flat_map(|(p, t)| {
            t.data()
                .iter()
                .enumerate()
                .map(move |(i, &v)| (p.to_string(), i, v))
        })
        .collect()
}

/// Random mask over fixed shapes with the given keep probability.
pub fn random_mask<R: Rng>(rng: &mut R, shapes: &[(String, Vec<usize>)], keep: f64) -> Mask {
    let mut m = Mask::new();
    for (p, s) in shapes {
        let n = s.iter().product();
        let bits = (0..n).map(|_| rng.random_bool(keep)).collect();
        m.insert(p.clone(), MaskEntry::new(s.clone(), bits).unwrap());
    }
    m
}

/// Mask keeping exactly `survivors` entries chosen from `total` (flat over
/// the shapes in order).
pub fn mask_with_survivors(shapes: &[(String, Vec<usize>)], keep: &[bool]) -> Mask {
    let mut m = Mask::new();
    let mut off = 0;
    for (p, s) in shapes {
        let n: usize = s.iter().product();
        m.insert(
            p.clone(),
            MaskEntry::new(s.clone(), keep[off..off + n].to_vec()).unwrap(),
        );
        off += n;
    }
    m
}

pub fn count_surviving(m: &Mask) -> usize {
    m.iter()
        .map(|(_, e)| e.keep().iter().filter(|&&k| k).count())
        .sum()
}

pub fn both_surviving(a: &Mask, b: &Mask) -> (usize, usize) {
    let mut inter = 0;
    let mut union = 0;
    for ((_, x), (_, y)) in a.iter().zip(b.iter()) {
        for (&p, &q) in x.keep().iter().zip(y.keep()) {
            inter += usize::from(p && q);
            union += usize::from(p || q);
        }
    }
    (inter, union)
}

pub fn tiny_config() -> sublab::nn::EncoderConfig {
    sublab::nn::EncoderConfig {
        num_layers: 1,
        model_dim: 16,
        num_heads: 2,
        ffn_dim: 32,
        input_dim: 8,
        ..Default::default()
    }
}

/// One corpus of `n` utterances per id, drawn from independent languages.
pub fn tiny_corpora(
    ids: &[&str],
    n: usize,
    seed: u64,
) -> std::collections::BTreeMap<String, sublab::synth::Corpus> {
    use sublab::synth::*;
    let params = LanguageParams {
        alphabet_size: 8,
        mean_len: 5.0,
    };
    let frames = FrameParams {
        embedding_scale: 1.0,
        ..FrameParams::default()
    };
    let emb = embedding_table(seed, tiny_config().input_dim, frames.embedding_scale);
    ids.iter()
        .map(|id| {
            let lang = make_language(id, derive_seed(seed, id), None, &params).unwrap();
            let spec = CorpusSpec::uniform(&[id], n);
            let c = build_corpus(&spec, &[lang], &emb, &frames, seed).unwrap();
            (id.to_string(), c)
        })
        .collect()
}

pub struct ScheduleCheck {
    pub epochs_logged: usize,
    pub frozen_epochs: usize,
    /// Steps where a masked weight was non-zero.
    pub mask_violations: usize,
    /// Steps of a frozen epoch where the encoder or feature projection moved.
    pub freeze_violations: usize,
    /// Whether the CTC head moved during the frozen epoch.
    pub head_moved_while_frozen: bool,
    pub steps: usize,
}

/// Upstream-trains a tiny model on `up`, prunes it at 50% and runs the
/// downstream schedule on `down`, watching every optimizer step.
pub fn check_downstream_schedule(
    corpora: &std::collections::BTreeMap<String, sublab::synth::Corpus>,
    up: &str,
    down: &str,
) -> ScheduleCheck {
    use sublab::pipeline::*;
    use sublab::prune::apply_mask;
    use sublab::Region;
    let base = sublab::nn::init_model(tiny_config(), 1).unwrap();
    let cfg = TrainConfig {
        epochs: 2,
        batch_size: 8,
        lr: 1e-3,
        seed: 3,
        freeze_first_epoch: false,
    };
    let c = &corpora[up];
    let upstream = upstream_finetune(&base, &c.train, &c.val, &cfg).unwrap();
    let mask = derive_subnetwork(&upstream.best, 0.5).unwrap();
    let start = apply_mask(&upstream.best.params, &mask).unwrap();
    let matched = up == down;
    let mut check = ScheduleCheck {
        epochs_logged: 0,
        frozen_epochs: 0,
        mask_violations: 0,
        freeze_violations: 0,
        head_moved_while_frozen: false,
        steps: 0,
    };
    let mut observer = |s: &StepInfo<'_>| {
        check.steps += 1;
        let leaked = mask.iter().any(|(p, e)| {
            let w = s.params.get(p).unwrap().data();
            w.iter()
                .zip(e.keep())
                .any(|(&x, &k)| !k && x.to_bits() != 0)
        });
        check.mask_violations += usize::from(leaked);
        if s.trainable == Trainable::HeadOnly {
            let moved = !s.params.region_bitwise_eq(&start, Region::Encoder)
                || !s.params.region_bitwise_eq(&start, Region::FeatureProj);
            check.freeze_violations += usize::from(moved);
            check.head_moved_while_frozen |= !s.params.region_bitwise_eq(&start, Region::CtcHead);
        }
    };
    let d = &corpora[down];
    let dcfg = TrainConfig {
        epochs: DOWNSTREAM_EPOCHS,
        freeze_first_epoch: !matched,
        ..cfg
    };
    let run = downstream_finetune(
        &upstream.best,
        &mask,
        &d.train,
        &d.val,
        &dcfg,
        matched,
        Some(&mut observer),
    )
    .unwrap();
    check.epochs_logged = run.logs.len();
    check.frozen_epochs = run.frozen_epochs;
    check
}
