//! Acceptance criteria, one test each. Every test prints a single
//! `criterion N PASS|FAIL` line before asserting.

mod common;

use common::*;
use sublab::checkpoint::{decode, encode, Checkpoint, Metadata};
use sublab::ctc::{ctc_loss_f64, LabelSequence};
use sublab::metrics::{cer, edit_distance};
use sublab::nn::{grad_check, init_model, EncoderConfig};
use sublab::pipeline::*;
use sublab::prune::{global_l1_prune, intersection_mask, iou, union_mask};
use sublab::report::{downstream_averages_csv, grid_csv, iou_matrix_csv, upstream_averages_csv};
use sublab::{Error, Tensor};

fn verdict(n: usize, name: &str, pass: bool, detail: String) {
    println!(
        "criterion {n:>2} {} {name}: {detail}",
        if pass { "PASS" } else { "FAIL" }
    );
    assert!(pass, "criterion {n} ({name}) failed: {detail}");
}

#[test]
fn criterion_01_gradient_check() {
    let cfg = EncoderConfig {
        num_layers: 1,
        ..EncoderConfig::default()
    };
    let model = init_model(cfg, 0).unwrap();
    let mut r = rng(1);
    let frames = Tensor::from_fn(&[8, cfg.input_dim], |_| {
        rand::Rng::random_range(&mut r, -1.0f32..1.0)
    });
    let target = LabelSequence::new(vec![3, 7, 7, 1], cfg.vocab_size).unwrap();
    let rep = grad_check(&model, &frames, &target, 1e-3).unwrap();
    verdict(
        1,
        "gradient check",
        rep.max_relative_error < 1e-4,
        format!(
            "max relative error {:.3e} over {} entries (worst {}[{}])",
            rep.max_relative_error, rep.entries_checked, rep.worst_path, rep.worst_index
        ),
    );
}

#[test]
fn criterion_02_ctc_oracle() {
    let mut r = rng(2);
    let mut cases = 0;
    let mut worst: f64 = 0.0;
    let mut bad = Vec::new();
    for v in 1..=3 {
        for target in all_strings(v - 1, 3) {
            for t in 1..=6 {
                let lp = random_log_probs(&mut r, t, v);
                let brute = brute_force_ctc_prob(&lp, t, v, &target);
                match ctc_loss_f64(&lp, t, v, &target) {
                    Ok((loss, _)) => {
                        let diff = ((-loss).exp() - brute).abs();
                        worst = worst.max(diff);
                        if diff > 1e-6 {
                            bad.push(format!("T={t} V={v} {target:?}"));
                        }
                    }
                    Err(Error::InfeasibleTarget { .. }) if brute == 0.0 => {}
                    Err(e) => bad.push(format!("T={t} V={v} {target:?}: {e}")),
                }
                cases += 1;
            }
        }
    }
    verdict(
        2,
        "CTC oracle",
        bad.is_empty(),
        format!("{cases} cases, max |p - brute| {worst:.2e}, failures {bad:?}"),
    );
}

#[test]
fn criterion_03_edit_distance_oracle() {
    let strings = all_strings(3, 5);
    let mut mismatches = 0;
    for a in &strings {
        for b in &strings {
            mismatches += usize::from(edit_distance(a, b) != lev_recursive(a, b));
        }
    }
    let c = cer(&[vec![1, 2, 3]], &[vec![1, 2, 4]]).unwrap();
    verdict(
        3,
        "edit distance oracle",
        mismatches == 0 && (c - 33.33).abs() <= 0.01,
        format!(
            "{} pairs, {mismatches} mismatches, cer(abc, abd) = {c:.4}",
            strings.len() * strings.len()
        ),
    );
}

#[test]
fn criterion_04_pruning_exactness() {
    let sparsities: Vec<f64> = (1..=9).map(|i| i as f64 / 10.0).collect();
    let mut failures = Vec::new();
    for seed in 0..100 {
        let tree = random_tree(&mut rng(1000 + seed));
        let entries = prunable_entries(&tree);
        let n = entries.len();
        let mut prev: Option<sublab::prune::Mask> = None;
        for &s in &sparsities {
            let m = global_l1_prune(&tree, s).unwrap();
            let expect = (s * n as f64 + 1e-9).floor() as usize;
            if n - m.surviving() != expect {
                failures.push(format!("tree {seed} s {s}: count"));
            }
            let mut max_pruned = f32::NEG_INFINITY;
            let mut min_kept = f32::INFINITY;
            for (p, i, w) in &entries {
                if m.get(p).unwrap().keep()[*i] {
                    min_kept = min_kept.min(w.abs());
                } else {
                    max_pruned = max_pruned.max(w.abs());
                }
            }
            if max_pruned > min_kept {
                failures.push(format!("tree {seed} s {s}: order"));
            }
            if let Some(lo) = &prev {
                let nested = lo
                    .iter()
                    .zip(m.iter())
                    .all(|((_, a), (_, b))| a.keep().iter().zip(b.keep()).all(|(&x, &y)| x || !y));
                if !nested {
                    failures.push(format!("tree {seed} s {s}: nesting"));
                }
            }
            prev = Some(m);
        }
    }
    verdict(
        4,
        "pruning exactness",
        failures.is_empty(),
        format!("100 trees x 9 sparsities, failures {failures:?}"),
    );
}

#[test]
fn criterion_05_mask_algebra() {
    let mut failures = Vec::new();
    let mut r = rng(5);
    let pairs = 200;
    for k in 0..pairs {
        let tree = random_tree(&mut r);
        let shapes: Vec<(String, Vec<usize>)> = tree
            .prunable()
            .map(|(p, t)| (p.to_string(), t.shape().to_vec()))
            .collect();
        let ka = rand::Rng::random_range(&mut r, 0.1..0.9);
        let kb = rand::Rng::random_range(&mut r, 0.1..0.9);
        let a = random_mask(&mut r, &shapes, ka);
        let b = random_mask(&mut r, &shapes, kb);
        let (inter, union) = both_surviving(&a, &b);
        if union == 0 || count_surviving(&a) == 0 {
            continue;
        }
        if iou(&a, &a).unwrap() != 1.0 {
            failures.push(format!("pair {k}: iou(a, a)"));
        }
        if iou(&a, &b).unwrap() != iou(&b, &a).unwrap() {
            failures.push(format!("pair {k}: symmetry"));
        }
        let u = count_surviving(&union_mask(&a, &b).unwrap());
        let i = count_surviving(&intersection_mask(&a, &b).unwrap());
        if u != union || i != inter || u != count_surviving(&a) + count_surviving(&b) - i {
            failures.push(format!("pair {k}: inclusion-exclusion"));
        }

        // equal density: keep the same number of entries, chosen independently
        let n = a.total();
        let survivors = 1 + k % (n - 1).max(1);
        let pick = |seed: u64| {
            let mut keep = vec![false; n];
            for idx in rand::seq::index::sample(&mut rng(seed), n, survivors.min(n)) {
                keep[idx] = true;
            }
            mask_with_survivors(&shapes, &keep)
        };
        let (c, d) = (pick(2 * k as u64), pick(2 * k as u64 + 1));
        let dens = survivors.min(n) as f64 / n as f64;
        let j = iou(&c, &d).unwrap();
        let direct = count_surviving(&union_mask(&c, &d).unwrap()) as f64 / n as f64;
        if (direct - 2.0 * dens / (1.0 + j)).abs() > 1e-9 {
            failures.push(format!("pair {k}: union density"));
        }
    }
    verdict(
        5,
        "mask algebra",
        failures.is_empty(),
        format!("{pairs} random mask pairs, failures {failures:?}"),
    );
}

#[test]
fn criterion_06_schedule_invariants() {
    let corpora = tiny_corpora(&["a", "b"], 50, 6);
    let matched = check_downstream_schedule(&corpora, "a", "a");
    let unmatched = check_downstream_schedule(&corpora, "a", "b");
    let pass = matched.epochs_logged == 10
        && unmatched.epochs_logged == 11
        && unmatched.frozen_epochs == 1
        && unmatched.freeze_violations == 0
        && matched.mask_violations == 0
        && unmatched.mask_violations == 0;
    verdict(
        6,
        "schedule invariants",
        pass,
        format!(
            "matched {} epochs, unmatched {} epochs ({} frozen), freeze violations {}, \
             non-zero masked weights in {} of {} steps",
            matched.epochs_logged,
            unmatched.epochs_logged,
            unmatched.frozen_epochs,
            unmatched.freeze_violations,
            matched.mask_violations + unmatched.mask_violations,
            matched.steps + unmatched.steps
        ),
    );
}

fn tiny_report(seed: u64) -> Vec<String> {
    let corpora = tiny_corpora(&["a", "b"], 20, seed);
    let base = init_model(tiny_config(), seed).unwrap();
    let cfg = TrainConfig {
        epochs: 1,
        batch_size: 8,
        lr: 1e-3,
        seed: 0,
        freeze_first_epoch: false,
    };
    let inputs = GridInputs {
        base: &base,
        corpora: &corpora,
        upstream: cfg,
        downstream: cfg,
    };
    let langs = vec!["a".to_string(), "b".to_string()];
    let specs = full_grid(&langs, &[0.0, 0.9], &[seed]);
    let (l, s) = required_upstreams(&specs);
    let ups = train_upstreams(&inputs, &l, &s);
    let results = run_grid_with(&inputs, &ups, &specs);
    let masks: Vec<_> = langs
        .iter()
        .map(|id| {
            let up = ups[&(id.clone(), seed)].as_ref().unwrap();
            derive_subnetwork(&up.best, 0.9).unwrap()
        })
        .collect();
    vec![
        grid_csv(&results),
        upstream_averages_csv(&results).0,
        downstream_averages_csv(&results).0,
        iou_matrix_csv(&langs, &masks).unwrap(),
    ]
}

#[test]
fn criterion_10_determinism_and_persistence() {
    let first = tiny_report(10);
    let second = tiny_report(10);
    let reports_equal = first == second;

    let model = init_model(tiny_config(), 10).unwrap();
    let mask = global_l1_prune(&model.params, 0.9).unwrap();
    let ckpt = Checkpoint {
        metadata: Metadata::new(tiny_config(), "upstream", 10),
        params: model.params.clone(),
        mask: Some(mask.clone()),
    };
    let bytes = encode(&ckpt).unwrap();
    let back = decode(&bytes).unwrap();
    let round_trip = back.params.bitwise_eq(&model.params)
        && back.mask.as_ref() == Some(&mask)
        && encode(&back).unwrap() == bytes;
    verdict(
        10,
        "determinism and persistence",
        reports_equal && round_trip,
        format!(
            "{} report files identical: {reports_equal}, checkpoint round trip bitwise: {round_trip}",
            first.len()
        ),
    );
}

fn table_row(upstream: &str, source: MaskSource, s: f64, cers: &[(&str, f64)]) -> Vec<RunResult> {
    cers.iter()
        .map(|(d, c)| RunResult {
            upstream: upstream.into(),
            downstream: (*d).into(),
            mask_source: source.clone(),
            sparsity: s,
            seed: 0,
            cer: Some(*c),
            train_losses: vec![],
            val_losses: vec![],
            checkpoint: None,
            error: None,
        })
        .collect()
}

#[test]
fn criterion_11_table_averages() {
    let own = MaskSource::Own;
    let swapped = MaskSource::Other("es".into());
    let mut results = Vec::new();
    results.extend(table_row(
        "en",
        own.clone(),
        0.7,
        &[("en", 11.74), ("es", 6.61), ("as", 11.53), ("xh", 10.57)],
    ));
    results.extend(table_row(
        "en",
        own.clone(),
        0.9,
        &[("en", 31.79), ("es", 28.51), ("as", 33.31), ("xh", 23.06)],
    ));
    // exchanged-subnetwork rows must not leak into the own-subnetwork average
    results.extend(table_row(
        "en",
        swapped.clone(),
        0.7,
        &[("en", 12.74), ("es", 15.46), ("as", 21.34), ("xh", 21.65)],
    ));
    results.extend(table_row(
        "en",
        swapped,
        0.9,
        &[("en", 44.0), ("es", 28.86), ("as", 34.61), ("xh", 22.77)],
    ));
    let avg = avg_subnetwork_performance(&results, "en", MatchedCells::Include).unwrap();
    let expected = [(0.7, 10.11), (0.9, 29.17)];
    let pass = avg.len() == 2
        && avg
            .iter()
            .zip(expected)
            .all(|((s, a), (es, e))| *s == es && (a - e).abs() <= 0.01);
    verdict(
        11,
        "table averages",
        pass,
        format!("got {avg:?}, published {expected:?}"),
    );
}

// Criteria 7-9 share one experiment: five independent languages, `D` holds
// 60% of the pretraining frames, three seeds.

const LANGS: [&str; 5] = ["a", "b", "c", "d", "e"];
const DOMINANT: &str = "d";
const SEEDS: [u64; 3] = [0, 1, 2];

struct BiasRun {
    results: Vec<RunResult>,
    /// IOU of each upstream mask with the base mask at 90% sparsity.
    base_iou: std::collections::BTreeMap<String, f64>,
}

fn bias_run(seed: u64) -> BiasRun {
    use std::collections::{BTreeMap, BTreeSet};
    use sublab::config::dominant_proportions;
    use sublab::synth::*;

    let params = LanguageParams::default();
    let frames = FrameParams {
        embedding_scale: 1.0,
        noise_sigma: 1.0,
        ..FrameParams::default()
    };
    let cfg = EncoderConfig::default();
    let langs: Vec<LanguageSpec> = LANGS
        .iter()
        .map(|id| make_language(id, derive_seed(seed, id), None, &params).unwrap())
        .collect();
    let emb = embedding_table(
        derive_seed(seed, "embedding"),
        cfg.input_dim,
        frames.embedding_scale,
    );
    let pre_spec = CorpusSpec::new(dominant_proportions(&LANGS, DOMINANT, 0.8), 1000);
    let pre = build_corpus(
        &pre_spec,
        &langs,
        &emb,
        &frames,
        derive_seed(seed, "pretrain"),
    )
    .unwrap();
    let pre_frames: Vec<Tensor> = pre.train.into_iter().map(|u| u.frames).collect();
    let init = init_model(cfg, derive_seed(seed, "init")).unwrap();
    let base = pretrain_base(
        &init,
        &pre_frames,
        &PretrainConfig {
            epochs: 20,
            lr: 1e-3,
            seed: derive_seed(seed, "pretrain-run"),
            ..PretrainConfig::default()
        },
    )
    .unwrap()
    .model;

    let corpora: BTreeMap<String, Corpus> = LANGS
        .iter()
        .map(|id| {
            let spec = CorpusSpec::uniform(&[id], 400);
            let c = build_corpus(
                &spec,
                &langs,
                &emb,
                &frames,
                derive_seed(seed, &format!("finetune/{id}")),
            );
            (id.to_string(), c.unwrap())
        })
        .collect();
    let inputs = GridInputs {
        base: &base,
        corpora: &corpora,
        upstream: TrainConfig {
            epochs: 12,
            lr: 1e-3,
            ..TrainConfig::default()
        },
        downstream: TrainConfig {
            epochs: DOWNSTREAM_EPOCHS,
            lr: 1e-4,
            ..TrainConfig::default()
        },
    };
    // matched cells across the sweep, cross-language cells at 90%
    let specs: Vec<ExperimentSpec> = LANGS
        .iter()
        .flat_map(|u| {
            LANGS.iter().map(move |d| ExperimentSpec {
                upstream: u.to_string(),
                downstream: d.to_string(),
                sparsities: if u == d {
                    vec![0.0, 0.5, 0.9]
                } else {
                    vec![0.9]
                },
                mask_source: MaskSource::Own,
                seeds: vec![seed],
            })
        })
        .collect();
    let ids: BTreeSet<String> = LANGS.iter().map(|s| s.to_string()).collect();
    let ups = train_upstreams(&inputs, &ids, &[seed].into());
    let results = run_grid_with(&inputs, &ups, &specs);
    let base_mask = global_l1_prune(&base.params, 0.9).unwrap();
    let base_iou = ups
        .iter()
        .map(|((id, _), up)| {
            let m = derive_subnetwork(&up.as_ref().unwrap().best, 0.9).unwrap();
            (id.clone(), iou(&m, &base_mask).unwrap())
        })
        .collect();
    BiasRun { results, base_iou }
}

fn bias_runs() -> &'static [BiasRun] {
    static RUNS: std::sync::OnceLock<Vec<BiasRun>> = std::sync::OnceLock::new();
    RUNS.get_or_init(|| SEEDS.iter().map(|&s| bias_run(s)).collect())
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Per language, the median over seeds of `f(run, language)`.
fn per_language_median(f: impl Fn(&BiasRun, &str) -> f64) -> Vec<(String, f64)> {
    LANGS
        .iter()
        .map(|id| {
            (
                id.to_string(),
                median(bias_runs().iter().map(|r| f(r, id)).collect()),
            )
        })
        .collect()
}

fn fmt_pairs(v: &[(String, f64)]) -> String {
    v.iter()
        .map(|(k, x)| format!("{k}={x:.2}"))
        .collect::<Vec<_>>()
        .join(" ")
}

#[test]
fn criterion_07_dominant_subnetwork_transfers_best() {
    let avg = per_language_median(|run, id| {
        let at90: Vec<RunResult> = run
            .results
            .iter()
            .filter(|r| r.sparsity == 0.9)
            .cloned()
            .collect();
        avg_subnetwork_performance(&at90, id, MatchedCells::Exclude).unwrap()[0].1
    });
    let dom = avg.iter().find(|(k, _)| k == DOMINANT).unwrap().1;
    let pass = avg.iter().all(|(k, v)| k == DOMINANT || dom < *v);
    verdict(
        7,
        "dominant subnetwork has the lowest cross-language CER at 90%",
        pass,
        format!("median avg CER {}", fmt_pairs(&avg)),
    );
}

#[test]
fn criterion_08_dominant_subnetwork_overlaps_base_most() {
    let ious = per_language_median(|run, id| run.base_iou[id]);
    let dom = ious.iter().find(|(k, _)| k == DOMINANT).unwrap().1;
    let pass = ious.iter().all(|(k, v)| k == DOMINANT || dom > *v);
    verdict(
        8,
        "dominant subnetwork has the highest IOU with the base at 90%",
        pass,
        format!(
            "median IOU {}",
            ious.iter()
                .map(|(k, x)| format!("{k}={x:.4}"))
                .collect::<Vec<_>>()
                .join(" ")
        ),
    );
}

#[test]
fn criterion_09_sparsity_sweep_shape() {
    // per seed: mean matched CER over languages at each sparsity
    let mean_at = |run: &BiasRun, s: f64| {
        let v: Vec<f64> = run
            .results
            .iter()
            .filter(|r| r.is_matched() && r.sparsity == s)
            .map(|r| r.cer.unwrap())
            .collect();
        v.iter().sum::<f64>() / v.len() as f64
    };
    let runs = bias_runs();
    let gap50 = median(
        runs.iter()
            .map(|r| mean_at(r, 0.5) - mean_at(r, 0.0))
            .collect(),
    );
    let gap90 = median(
        runs.iter()
            .map(|r| mean_at(r, 0.9) - mean_at(r, 0.0))
            .collect(),
    );
    let dense = median(runs.iter().map(|r| mean_at(r, 0.0)).collect());
    verdict(
        9,
        "sparsity sweep shape",
        gap50 <= 5.0 && gap90 > gap50,
        format!("median dense CER {dense:.2}, gap at 50% {gap50:+.2}, gap at 90% {gap90:+.2}"),
    );
}
