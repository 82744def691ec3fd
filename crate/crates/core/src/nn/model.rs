//! Pre-norm transformer encoder with a linear CTC head.
//!
//! Parameter layout:
//!
//! ```text
//! feature_proj/{weight,bias,mask_embedding}
//! encoder/pos_embedding                          [max_len x model_dim]
//! encoder/layers/{i}/norm1/{gain,bias}
//! encoder/layers/{i}/attn/{query,key,value,out}/{weight,bias}
//! encoder/layers/{i}/norm2/{gain,bias}
//! encoder/layers/{i}/ffn/{in,out}/{weight,bias}
//! encoder/final_norm/{gain,bias}
//! ctc_head/{weight,bias}
//! ```

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::ctc::{ctc_loss_f64, LabelSequence};
use crate::error::{Error, Result};
use crate::nn::graph::{Gradients, Graph, NodeId};
use crate::tensor::{ParameterTree, Tensor};

/// Longest supported input, in frames.
pub const MAX_FRAMES: usize = 512;

/// Global alphabet size; the vocabulary adds the blank.
pub const ALPHABET_SIZE: usize = 26;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub num_layers: usize,
    pub model_dim: usize,
    pub num_heads: usize,
    pub ffn_dim: usize,
    pub input_dim: usize,
    pub vocab_size: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            num_layers: 2,
            model_dim: 64,
            num_heads: 4,
            ffn_dim: 128,
            input_dim: 16,
            vocab_size: ALPHABET_SIZE + 1,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("num_layers", self.num_layers),
            ("model_dim", self.model_dim),
            ("num_heads", self.num_heads),
            ("ffn_dim", self.ffn_dim),
            ("input_dim", self.input_dim),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be at least 1")));
        }
        if self.vocab_size < 2 {
            return Err(Error::Config(
                "vocab_size must include blank and one symbol".into(),
            ));
        }
        if !self.model_dim.is_multiple_of(self.num_heads) {
            return Err(Error::Config(format!(
                "model_dim {} not divisible by num_heads {}",
                self.model_dim, self.num_heads
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim / self.num_heads
    }
}

/// Model parameters together with the architecture they instantiate.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: EncoderConfig,
    pub params: ParameterTree,
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], bound: f32) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-bound..=bound))
}

fn linear(
    tree: &mut ParameterTree,
    rng: &mut ChaCha8Rng,
    prefix: &str,
    fan_in: usize,
    fan_out: usize,
) -> Result<()> {
    let bound = 1.0 / (fan_in as f32).sqrt();
    tree.insert(
        format!("{prefix}/weight"),
        uniform(rng, &[fan_in, fan_out], bound),
    )?;
    tree.insert(format!("{prefix}/bias"), Tensor::zeros(&[fan_out]))
}

fn norm(tree: &mut ParameterTree, prefix: &str, dim: usize) -> Result<()> {
    tree.insert(format!("{prefix}/gain"), Tensor::full(&[dim], 1.0))?;
    tree.insert(format!("{prefix}/bias"), Tensor::zeros(&[dim]))
}

/// Seeded initialization: weight matrices uniform in `±1/sqrt(fan_in)`,
/// biases and norm offsets zero, norm gains one.
pub fn init_model(config: EncoderConfig, seed: u64) -> Result<Model> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tree = ParameterTree::new();
    let d = config.model_dim;

    linear(&mut tree, &mut rng, "feature_proj", config.input_dim, d)?;
    let mb = 1.0 / (d as f32).sqrt();
    tree.insert("feature_proj/mask_embedding", uniform(&mut rng, &[d], mb))?;
    tree.insert(
        "encoder/pos_embedding",
        uniform(&mut rng, &[MAX_FRAMES, d], 0.02),
    )?;
    for i in 0..config.num_layers {
        let p = format!("encoder/layers/{i}");
        norm(&mut tree, &format!("{p}/norm1"), d)?;
        for name in ["query", "key", "value", "out"] {
            linear(&mut tree, &mut rng, &format!("{p}/attn/{name}"), d, d)?;
        }
        norm(&mut tree, &format!("{p}/norm2"), d)?;
        linear(
            &mut tree,
            &mut rng,
            &format!("{p}/ffn/in"),
            d,
            config.ffn_dim,
        )?;
        linear(
            &mut tree,
            &mut rng,
            &format!("{p}/ffn/out"),
            config.ffn_dim,
            d,
        )?;
    }
    norm(&mut tree, "encoder/final_norm", d)?;
    linear(&mut tree, &mut rng, "ctc_head", d, config.vocab_size)?;
    Ok(Model {
        config,
        params: tree,
    })
}

fn dense(g: &mut Graph, params: &ParameterTree, x: NodeId, prefix: &str) -> Result<NodeId> {
    let w = g.param_from(params, &format!("{prefix}/weight"))?;
    let b = g.param_from(params, &format!("{prefix}/bias"))?;
    let y = g.matmul(x, w)?;
    g.add_bias(y, b)
}

fn layer_norm(g: &mut Graph, params: &ParameterTree, x: NodeId, prefix: &str) -> Result<NodeId> {
    let gain = g.param_from(params, &format!("{prefix}/gain"))?;
    let bias = g.param_from(params, &format!("{prefix}/bias"))?;
    g.layer_norm(x, gain, bias)
}

/// Records the encoder on `g` and returns the final-normed hidden states
/// (`T x model_dim`). Rows listed in `masked_rows` have their projected
/// features replaced by the learned mask embedding.
pub fn record_encoder(
    cfg: &EncoderConfig,
    p: &ParameterTree,
    g: &mut Graph,
    frames: &Tensor,
    masked_rows: &[usize],
) -> Result<NodeId> {
    let t = frames.rows();
    if frames.rank() != 2 || frames.cols() != cfg.input_dim {
        return Err(Error::Shape(format!(
            "frames {:?} for input_dim {}",
            frames.shape(),
            cfg.input_dim
        )));
    }
    if t > MAX_FRAMES {
        return Err(Error::Shape(format!("{t} frames exceed {MAX_FRAMES}")));
    }
    let x = g.input(frames);
    let mut h = dense(g, p, x, "feature_proj")?;
    if !masked_rows.is_empty() {
        let m = g.param_from(p, "feature_proj/mask_embedding")?;
        h = g.replace_rows(h, m, masked_rows)?;
    }
    let pos = g.param_from(p, "encoder/pos_embedding")?;
    let pos = g.rows(pos, 0, t)?;
    h = g.add(h, pos)?;

    for i in 0..cfg.num_layers {
        let pre = format!("encoder/layers/{i}");
        let a = layer_norm(g, p, h, &format!("{pre}/norm1"))?;
        let q = dense(g, p, a, &format!("{pre}/attn/query"))?;
        let k = dense(g, p, a, &format!("{pre}/attn/key"))?;
        let v = dense(g, p, a, &format!("{pre}/attn/value"))?;
        let att = g.attention(q, k, v, cfg.num_heads)?;
        let o = dense(g, p, att, &format!("{pre}/attn/out"))?;
        h = g.add(h, o)?;

        let f = layer_norm(g, p, h, &format!("{pre}/norm2"))?;
        let f = dense(g, p, f, &format!("{pre}/ffn/in"))?;
        let f = g.gelu(f);
        let f = dense(g, p, f, &format!("{pre}/ffn/out"))?;
        h = g.add(h, f)?;
    }
    layer_norm(g, p, h, "encoder/final_norm")
}

/// Records the full recognizer and returns the unnormalized logits node.
pub fn record_logits(
    cfg: &EncoderConfig,
    p: &ParameterTree,
    g: &mut Graph,
    frames: &Tensor,
) -> Result<NodeId> {
    let h = record_encoder(cfg, p, g, frames, &[])?;
    dense(g, p, h, "ctc_head")
}

impl Model {
    pub fn encode(&self, g: &mut Graph, frames: &Tensor, masked_rows: &[usize]) -> Result<NodeId> {
        record_encoder(&self.config, &self.params, g, frames, masked_rows)
    }

    pub fn logits(&self, g: &mut Graph, frames: &Tensor) -> Result<NodeId> {
        record_logits(&self.config, &self.params, g, frames)
    }

    /// Per-frame unnormalized scores over the vocabulary, `T x vocab_size`.
    pub fn forward(&self, frames: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let out = self.logits(&mut g, frames)?;
        Ok(g.value(out))
    }

    /// Per-frame log-probabilities (log-softmax of the logits).
    pub fn log_probs(&self, frames: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let out = self.logits(&mut g, frames)?;
        let lp = g.log_softmax(out);
        Ok(g.value(lp))
    }

    /// Records logits, log-softmax and the CTC loss; returns the graph and
    /// the scalar loss node ready for [`Graph::backward`].
    pub fn ctc_graph(&self, frames: &Tensor, target: &LabelSequence) -> Result<(Graph, NodeId)> {
        let mut g = Graph::new();
        let logits = self.logits(&mut g, frames)?;
        let lp = g.log_softmax(logits);
        let (t, v) = g.dims(lp);
        let (loss, grad) = ctc_loss_f64(g.value_f64(lp), t, v, target.symbols())?;
        let node = g.loss(lp, loss, grad)?;
        Ok((g, node))
    }

    pub fn ctc_loss(&self, frames: &Tensor, target: &LabelSequence) -> Result<f64> {
        let (g, node) = self.ctc_graph(frames, target)?;
        Ok(g.scalar(node))
    }

    /// CTC loss of one utterance and the gradient tree over every parameter.
    pub fn ctc_loss_and_grads(
        &self,
        frames: &Tensor,
        target: &LabelSequence,
    ) -> Result<(f64, ParameterTree)> {
        let (mut g, node) = self.ctc_graph(frames, target)?;
        let loss = g.scalar(node);
        let grads: Gradients = g.backward(node)?;
        Ok((loss, grads.into_tree(&self.params)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn frames(t: usize, dim: usize) -> Tensor {
        Tensor::from_fn(&[t, dim], |i| ((i * 7 % 13) as f32 - 6.0) / 10.0)
    }

    #[test]
    fn init_is_deterministic() {
        let a = init_model(EncoderConfig::default(), 7).unwrap();
        let b = init_model(EncoderConfig::default(), 7).unwrap();
        let c = init_model(EncoderConfig::default(), 8).unwrap();
        assert!(a.params.bitwise_eq(&b.params));
        assert!(!a.params.bitwise_eq(&c.params));
    }

    #[test]
    fn config_validation() {
        let cfg = EncoderConfig::default();
        assert_eq!(cfg.head_dim(), 16);
        let bad = EncoderConfig {
            model_dim: 65,
            ..cfg
        };
        assert!(matches!(init_model(bad, 0), Err(Error::Config(_))));
        let bad = EncoderConfig {
            num_layers: 0,
            ..cfg
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn init_rules() {
        let m = init_model(EncoderConfig::default(), 1).unwrap();
        let p = &m.params;
        assert!(p
            .get("encoder/layers/0/norm1/gain")
            .unwrap()
            .data()
            .iter()
            .all(|&v| v == 1.0));
        assert!(p
            .get("encoder/layers/1/ffn/in/bias")
            .unwrap()
            .data()
            .iter()
            .all(|&v| v == 0.0));
        let w = p.get("encoder/layers/0/ffn/out/weight").unwrap();
        assert!(w.max_abs() <= 1.0 / (128f32).sqrt());
        assert!(w.max_abs() > 0.0);
    }

    #[test]
    fn forward_shape_and_purity() {
        let m = init_model(EncoderConfig::default(), 3).unwrap();
        let x = frames(5, 16);
        let a = m.forward(&x).unwrap();
        assert_eq!(a.shape(), &[5, 27]);
        let b = m.forward(&x).unwrap();
        assert!(a.bitwise_eq(&b));
        assert!(m.forward(&frames(5, 15)).is_err());
        assert!(m.forward(&frames(MAX_FRAMES + 1, 16)).is_err());
    }

    #[test]
    fn zero_head_gives_zero_logits() {
        let mut m = init_model(EncoderConfig::default(), 3).unwrap();
        for path in ["ctc_head/weight", "ctc_head/bias"] {
            m.params.get_mut(path).unwrap().data_mut().fill(0.0);
        }
        let out = m.forward(&frames(4, 16)).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gradient_tree_covers_all_parameters() {
        let m = init_model(EncoderConfig::default(), 3).unwrap();
        let target = LabelSequence::from_raw(vec![1, 2]);
        let (loss, grads) = m.ctc_loss_and_grads(&frames(4, 16), &target).unwrap();
        assert!(loss.is_finite() && loss > 0.0);
        assert_eq!(grads.len(), m.params.len());
        for ((pa, ta), (pb, tb)) in grads.iter().zip(m.params.iter()) {
            assert_eq!(pa, pb);
            assert_eq!(ta.shape(), tb.shape());
        }
        // unused positions and the mask embedding get no gradient
        let pos = grads.get("encoder/pos_embedding").unwrap();
        assert!(pos.data()[4 * 64..].iter().all(|&v| v == 0.0));
        assert!(grads.get("feature_proj/mask_embedding").unwrap().max_abs() == 0.0);
    }
}
