//! Synthetic languages and imbalanced multilingual corpora.
//!
//! A language is a first-order Markov chain over a subset of the 26-symbol
//! global alphabet with an explicit END state. Child languages interpolate a
//! parent's transition matrix with a fresh one, which gives a single knob for
//! family resemblance. Utterances turn text into noisy frame runs drawn
//! around a per-symbol embedding.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, Normal};
use serde::{Deserialize, Serialize};

use crate::ctc::LabelSequence;
use crate::error::{Error, Result};
use crate::nn::ALPHABET_SIZE;
use crate::tensor::Tensor;

pub const MIN_TEXT_LEN: usize = 3;
pub const MAX_TEXT_LEN: usize = 40;
const DIRICHLET_CONCENTRATION: f64 = 0.5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LanguageSpec {
    pub id: String,
    /// Sorted global symbol indices in `1..=26`.
    pub alphabet: Vec<usize>,
    pub initial_dist: Vec<f64>,
    /// One row per alphabet symbol; columns are the alphabet followed by END.
    pub transition: Vec<Vec<f64>>,
    pub mean_len: f64,
}

/// Shape parameters for freshly generated languages.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LanguageParams {
    pub alphabet_size: usize,
    pub mean_len: f64,
}

impl Default for LanguageParams {
    fn default() -> Self {
        Self {
            alphabet_size: 14,
            mean_len: 8.0,
        }
    }
}

impl LanguageSpec {
    pub fn validate(&self) -> Result<()> {
        let n = self.alphabet.len();
        if n == 0 {
            return Err(Error::Language(format!("{}: empty alphabet", self.id)));
        }
        if self.alphabet.iter().any(|&s| s == 0 || s > ALPHABET_SIZE) {
            return Err(Error::Language(format!(
                "{}: symbol outside 1..=26",
                self.id
            )));
        }
        if !self.alphabet.windows(2).all(|w| w[0] < w[1]) {
            return Err(Error::Language(format!(
                "{}: alphabet not sorted/unique",
                self.id
            )));
        }
        check_distribution(&self.initial_dist, n, &format!("{} initial_dist", self.id))?;
        if self.transition.len() != n {
            return Err(Error::Language(format!(
                "{}: transition needs {n} rows",
                self.id
            )));
        }
        for (i, row) in self.transition.iter().enumerate() {
            check_distribution(row, n + 1, &format!("{} transition row {i}", self.id))?;
        }
        if !(self.mean_len >= 1.0) {
            return Err(Error::Language(format!("{}: mean_len below 1", self.id)));
        }
        Ok(())
    }

    pub fn end_index(&self) -> usize {
        self.alphabet.len()
    }
}

fn check_distribution(p: &[f64], len: usize, what: &str) -> Result<()> {
    if p.len() != len {
        return Err(Error::Language(format!(
            "{what}: expected {len} entries, got {}",
            p.len()
        )));
    }
    if p.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
        return Err(Error::Language(format!(
            "{what}: negative or non-finite entry"
        )));
    }
    let s: f64 = p.iter().sum();
    if (s - 1.0).abs() > 1e-6 {
        return Err(Error::Language(format!("{what}: sums to {s}")));
    }
    Ok(())
}

fn dirichlet(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let gamma = Gamma::new(DIRICHLET_CONCENTRATION, 1.0).expect("valid gamma");
    loop {
        let draws: Vec<f64> = (0..n).map(|_| gamma.sample(rng)).collect();
        let s: f64 = draws.iter().sum();
        if s > 0.0 && s.is_finite() {
            return draws.into_iter().map(|d| d / s).collect();
        }
    }
}

fn normalize(row: &mut [f64]) {
    let s: f64 = row.iter().sum();
    row.iter_mut().for_each(|v| *v /= s);
}

/// Independent draws for a given alphabet: Dirichlet initial distribution
/// and transition rows whose END column is fixed at `1 / mean_len`.
pub fn fresh_chain(seed: u64, alphabet_len: usize, mean_len: f64) -> (Vec<f64>, Vec<Vec<f64>>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_c4a1_0000_0001);
    let initial = dirichlet(&mut rng, alphabet_len);
    let p_end = 1.0 / mean_len.max(1.0);
    let transition = (0..alphabet_len)
        .map(|_| {
            let mut row: Vec<f64> = dirichlet(&mut rng, alphabet_len)
                .into_iter()
                .map(|p| p * (1.0 - p_end))
                .collect();
            row.push(p_end);
            normalize(&mut row);
            row
        })
        .collect();
    (initial, transition)
}

/// Generates a language. Without a parent the alphabet is a seeded random
/// subset of the global alphabet; with `(parent, alpha)` the alphabet is
/// shared and both distributions are `alpha * parent + (1 - alpha) * fresh`,
/// renormalized row-wise.
pub fn make_language(
    id: &str,
    seed: u64,
    parent: Option<(&LanguageSpec, f64)>,
    params: &LanguageParams,
) -> Result<LanguageSpec> {
    let spec = match parent {
        None => {
            if params.alphabet_size == 0 || params.alphabet_size > ALPHABET_SIZE {
                return Err(Error::Language(format!(
                    "alphabet_size {} outside 1..=26",
                    params.alphabet_size
                )));
            }
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut alphabet: Vec<usize> = sample(&mut rng, ALPHABET_SIZE, params.alphabet_size)
                .into_iter()
                .map(|i| i + 1)
                .collect();
            alphabet.sort_unstable();
            let (initial_dist, transition) = fresh_chain(seed, alphabet.len(), params.mean_len);
            LanguageSpec {
                id: id.to_string(),
                alphabet,
                initial_dist,
                transition,
                mean_len: params.mean_len,
            }
        }
        Some((parent, alpha)) => {
            if !(0.0..=1.0).contains(&alpha) {
                return Err(Error::OutOfRange("alpha", alpha));
            }
            parent.validate()?;
            let (fresh_init, fresh_trans) =
                fresh_chain(seed, parent.alphabet.len(), parent.mean_len);
            let mix = |p: &[f64], f: &[f64]| {
                let mut row: Vec<f64> = p
                    .iter()
                    .zip(f)
                    .map(|(a, b)| alpha * a + (1.0 - alpha) * b)
                    .collect();
                normalize(&mut row);
                row
            };
            let (initial_dist, transition) = if alpha == 1.0 {
                (parent.initial_dist.clone(), parent.transition.clone())
            } else if alpha == 0.0 {
                (fresh_init, fresh_trans)
            } else {
                (
                    mix(&parent.initial_dist, &fresh_init),
                    parent
                        .transition
                        .iter()
                        .zip(&fresh_trans)
                        .map(|(p, f)| mix(p, f))
                        .collect(),
                )
            };
            LanguageSpec {
                id: id.to_string(),
                alphabet: parent.alphabet.clone(),
                initial_dist,
                transition,
                mean_len: parent.mean_len,
            }
        }
    };
    spec.validate()?;
    Ok(spec)
}

fn categorical<R: Rng + ?Sized>(rng: &mut R, weights: &[f64]) -> usize {
    let total: f64 = weights.iter().sum();
    let mut u = rng.random::<f64>() * total;
    for (i, w) in weights.iter().enumerate() {
        if u < *w {
            return i;
        }
        u -= w;
    }
    // rounding leftovers land on the last positive entry
    weights.iter().rposition(|w| *w > 0.0).unwrap_or(0)
}

/// Samples a sentence as global symbol indices. END is suppressed until the
/// minimum length; rows with no non-END mass fall back to a uniform draw
/// over the alphabet.
pub fn sample_text<R: Rng + ?Sized>(spec: &LanguageSpec, rng: &mut R) -> Vec<usize> {
    let end = spec.end_index();
    let mut text = vec![categorical(rng, &spec.initial_dist)];
    while text.len() < MAX_TEXT_LEN {
        let row = &spec.transition[*text.last().expect("non-empty")];
        let next = if text.len() < MIN_TEXT_LEN {
            let body = &row[..end];
            if body.iter().sum::<f64>() > 0.0 {
                categorical(rng, body)
            } else {
                rng.random_range(0..end)
            }
        } else {
            categorical(rng, row)
        };
        if next == end {
            break;
        }
        text.push(next);
    }
    text.into_iter().map(|i| spec.alphabet[i]).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FrameParams {
    /// Element-wise Gaussian noise on every frame.
    pub noise_sigma: f64,
    pub min_repeat: usize,
    pub max_repeat: usize,
    /// Standard deviation of the per-symbol embedding entries.
    pub embedding_scale: f64,
}

impl Default for FrameParams {
    fn default() -> Self {
        Self {
            noise_sigma: 0.1,
            min_repeat: 1,
            max_repeat: 3,
            embedding_scale: 0.1,
        }
    }
}

/// Global `26 x input_dim` symbol embedding, Gaussian with the given scale.
pub fn embedding_table(seed: u64, input_dim: usize, scale: f64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xe3b_ed00_0000_0002);
    let normal = Normal::new(0.0, scale.max(0.0)).expect("valid normal");
    Tensor::from_fn(&[ALPHABET_SIZE, input_dim], |_| {
        normal.sample(&mut rng) as f32
    })
}

/// Each symbol emits `r ~ Uniform{min_repeat..=max_repeat}` frames of
/// `embedding(symbol) + N(0, sigma^2)` noise.
pub fn synth_frames<R: Rng + ?Sized>(
    text: &[usize],
    embedding: &Tensor,
    params: &FrameParams,
    rng: &mut R,
) -> Result<Tensor> {
    if text.is_empty() {
        return Err(Error::EmptyText);
    }
    if params.min_repeat == 0 || params.max_repeat < params.min_repeat {
        return Err(Error::Corpus("invalid frame repeat range".into()));
    }
    let dim = embedding.cols();
    let noise = Normal::new(0.0, params.noise_sigma.max(0.0)).expect("valid normal");
    let mut data = Vec::new();
    let mut rows = 0;
    for &s in text {
        if s == 0 || s > embedding.rows() {
            return Err(Error::InvalidLabel {
                label: s,
                max: embedding.rows(),
            });
        }
        let r = rng.random_range(params.min_repeat..=params.max_repeat);
        let base = embedding.row(s - 1);
        for _ in 0..r {
            data.extend(base.iter().map(|&b| {
                if params.noise_sigma > 0.0 {
                    b + noise.sample(rng) as f32
                } else {
                    b
                }
            }));
            rows += 1;
        }
    }
    Tensor::new(vec![rows, dim], data)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Utterance {
    pub language_id: String,
    pub text: Vec<usize>,
    pub frames: Tensor,
}

impl Utterance {
    pub fn target(&self) -> LabelSequence {
        LabelSequence::from_raw(self.text.clone())
    }
}

pub fn text_to_string(text: &[usize]) -> String {
    text.iter()
        .map(|&s| (b'a' + (s as u8) - 1) as char)
        .collect()
}

pub fn string_to_text(s: &str) -> Result<Vec<usize>> {
    s.bytes()
        .map(|b| match b {
            b'a'..=b'z' => Ok((b - b'a') as usize + 1),
            _ => Err(Error::Corpus(format!("symbol {:?} outside a-z", b as char))),
        })
        .collect()
}

#[derive(Serialize, Deserialize)]
struct UtteranceRecord {
    language_id: String,
    text: String,
    frames: Vec<Vec<f32>>,
}

impl From<&Utterance> for UtteranceRecord {
    fn from(u: &Utterance) -> Self {
        UtteranceRecord {
            language_id: u.language_id.clone(),
            text: text_to_string(&u.text),
            frames: (0..u.frames.rows())
                .map(|i| u.frames.row(i).to_vec())
                .collect(),
        }
    }
}

impl TryFrom<UtteranceRecord> for Utterance {
    type Error = Error;

    fn try_from(r: UtteranceRecord) -> Result<Self> {
        let text = string_to_text(&r.text)?;
        if text.is_empty() {
            return Err(Error::EmptyText);
        }
        Ok(Utterance {
            language_id: r.language_id,
            text,
            frames: Tensor::from_rows(&r.frames)?,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusSpec {
    pub proportions: BTreeMap<String, f64>,
    pub total_utterances: usize,
    #[serde(default = "default_splits")]
    pub splits: [f64; 3],
}

fn default_splits() -> [f64; 3] {
    [0.8, 0.1, 0.1]
}

impl CorpusSpec {
    pub fn new(proportions: BTreeMap<String, f64>, total_utterances: usize) -> Self {
        Self {
            proportions,
            total_utterances,
            splits: default_splits(),
        }
    }

    /// Equal shares over `ids`.
    pub fn uniform<S: AsRef<str>>(ids: &[S], total_utterances: usize) -> Self {
        let p = 1.0 / ids.len() as f64;
        Self::new(
            ids.iter().map(|id| (id.as_ref().to_string(), p)).collect(),
            total_utterances,
        )
    }

    pub fn validate(&self) -> Result<()> {
        if self.proportions.is_empty() {
            return Err(Error::Corpus("proportions: no languages".into()));
        }
        if self.proportions.values().any(|p| !(*p >= 0.0)) {
            return Err(Error::Corpus("proportions: negative share".into()));
        }
        let s: f64 = self.proportions.values().sum();
        if (s - 1.0).abs() > 1e-6 {
            return Err(Error::Corpus(format!(
                "proportions: sum to {s}, expected 1"
            )));
        }
        if self.splits.iter().any(|p| !(*p >= 0.0)) {
            return Err(Error::Corpus("splits: negative fraction".into()));
        }
        let s: f64 = self.splits.iter().sum();
        if (s - 1.0).abs() > 1e-6 {
            return Err(Error::Corpus(format!("splits: sum to {s}, expected 1")));
        }
        Ok(())
    }

    /// Utterances per language: floors of `share * total`, remaining units to
    /// the largest fractional parts (ties to the lexicographically smaller id).
    pub fn counts(&self) -> BTreeMap<String, usize> {
        let ids: Vec<&String> = self.proportions.keys().collect();
        let shares: Vec<f64> = self.proportions.values().copied().collect();
        let counts = largest_remainder(&shares, self.total_utterances);
        ids.into_iter().cloned().zip(counts).collect()
    }
}

/// Apportions `total` units by `shares` (summing to 1); ties in the
/// fractional parts go to the earlier index.
pub fn largest_remainder(shares: &[f64], total: usize) -> Vec<usize> {
    let exact: Vec<f64> = shares.iter().map(|s| s * total as f64).collect();
    let mut counts: Vec<usize> = exact.iter().map(|e| (e + 1e-9).floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..shares.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = exact[a] - counts[a] as f64;
        let fb = exact[b] - counts[b] as f64;
        fb.partial_cmp(&fa).expect("finite shares").then(a.cmp(&b))
    });
    for &i in order.iter().take(total.saturating_sub(assigned)) {
        counts[i] += 1;
    }
    counts
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Corpus {
    pub train: Vec<Utterance>,
    pub val: Vec<Utterance>,
    pub test: Vec<Utterance>,
}

impl Corpus {
    pub fn len(&self) -> usize {
        self.train.len() + self.val.len() + self.test.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Restriction of every split to one language.
    pub fn language(&self, id: &str) -> Corpus {
        let pick = |v: &[Utterance]| v.iter().filter(|u| u.language_id == id).cloned().collect();
        Corpus {
            train: pick(&self.train),
            val: pick(&self.val),
            test: pick(&self.test),
        }
    }
}

/// Stable 64-bit FNV-1a, used to derive per-key seeds.
pub fn stable_hash(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325u64, |h, &b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

pub fn derive_seed(seed: u64, key: &str) -> u64 {
    stable_hash(&[&seed.to_le_bytes()[..], key.as_bytes()].concat())
}

/// Builds the stratified train/val/test corpus. Utterances whose frame run
/// is too short for a CTC alignment of their text have their frames redrawn.
pub fn build_corpus(
    corpus: &CorpusSpec,
    languages: &[LanguageSpec],
    embedding: &Tensor,
    frame_params: &FrameParams,
    seed: u64,
) -> Result<Corpus> {
    corpus.validate()?;
    let by_id: BTreeMap<&str, &LanguageSpec> =
        languages.iter().map(|l| (l.id.as_str(), l)).collect();
    let mut out = Corpus::default();
    for (id, count) in corpus.counts() {
        let spec = by_id
            .get(id.as_str())
            .ok_or_else(|| Error::UnknownLanguage(id.clone()))?;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &id));
        let mut utts = Vec::with_capacity(count);
        for _ in 0..count {
            let text = sample_text(spec, &mut rng);
            let needed = LabelSequence::from_raw(text.clone()).min_frames();
            let frames = loop {
                let f = synth_frames(&text, embedding, frame_params, &mut rng)?;
                if f.rows() >= needed {
                    break f;
                }
            };
            utts.push(Utterance {
                language_id: id.clone(),
                text,
                frames,
            });
        }
        let split = largest_remainder(&corpus.splits, count);
        let mut it = utts.into_iter();
        out.train.extend(it.by_ref().take(split[0]));
        out.val.extend(it.by_ref().take(split[1]));
        out.test.extend(it.take(split[2]));
    }
    Ok(out)
}

pub fn write_jsonl(path: &Path, utterances: &[Utterance]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for u in utterances {
        serde_json::to_writer(&mut w, &UtteranceRecord::from(u))?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_jsonl(path: &Path) -> Result<Vec<Utterance>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: UtteranceRecord = serde_json::from_str(&line)?;
        out.push(Utterance::try_from(rec)?);
    }
    Ok(out)
}

/// Writes `{dir}/train.jsonl`, `val.jsonl` and `test.jsonl`.
pub fn write_corpus(dir: &Path, corpus: &Corpus) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_jsonl(&dir.join("train.jsonl"), &corpus.train)?;
    write_jsonl(&dir.join("val.jsonl"), &corpus.val)?;
    write_jsonl(&dir.join("test.jsonl"), &corpus.test)
}

pub fn read_corpus(dir: &Path) -> Result<Corpus> {
    Ok(Corpus {
        train: read_jsonl(&dir.join("train.jsonl"))?,
        val: read_jsonl(&dir.join("val.jsonl"))?,
        test: read_jsonl(&dir.join("test.jsonl"))?,
    })
}

/// Pretraining shares of the six seen languages, renormalized to sum to one.
pub fn reference_proportions() -> BTreeMap<String, f64> {
    let raw = [
        ("en", 0.159),
        ("de", 0.058),
        ("fr", 0.055),
        ("es", 0.051),
        ("pl", 0.048),
        ("ca", 0.0016),
    ];
    let total: f64 = raw.iter().map(|(_, p)| p).sum();
    raw.iter()
        .map(|(id, p)| (id.to_string(), p / total))
        .collect()
}

/// The default cast: `en` (dominant), `de` (related to `en`), `fr`, `es`,
/// `ca` (related to `es`), `pl`, plus held-out `as` (close to `es`) and `xh`
/// (unrelated).
pub fn default_languages(seed: u64, params: &LanguageParams) -> Result<Vec<LanguageSpec>> {
    let s = |k: &str| derive_seed(seed, k);
    let en = make_language("en", s("en"), None, params)?;
    let de = make_language("de", s("de"), Some((&en, 0.5)), params)?;
    let es = make_language("es", s("es"), None, params)?;
    let fr = make_language("fr", s("fr"), Some((&es, 0.5)), params)?;
    let ca = make_language("ca", s("ca"), Some((&es, 0.7)), params)?;
    let pl = make_language("pl", s("pl"), None, params)?;
    let ast = make_language("as", s("as"), Some((&es, 0.8)), params)?;
    let xh = make_language("xh", s("xh"), Some((&pl, 0.0)), params)?;
    Ok(vec![en, de, fr, es, pl, ca, ast, xh])
}
