//! Central-difference verification of reverse-mode gradients.

use crate::ctc::LabelSequence;
use crate::error::{Error, Result};
use crate::nn::graph::{Graph, NodeId};
use crate::nn::model::{record_logits, Model};
use crate::tensor::{ParameterTree, Tensor};

/// Gradients below this magnitude are compared in absolute terms.
pub const RELATIVE_ERROR_FLOOR: f64 = 1e-2;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    pub worst_path: String,
    pub worst_index: usize,
    pub entries_checked: usize,
}

/// `|a - n| / max(|a|, |n|, RELATIVE_ERROR_FLOOR)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(RELATIVE_ERROR_FLOOR)
}

/// Compares the backward pass of `record` against central differences on
/// every entry of every parameter in `params`.
pub fn grad_check_with<F>(
    params: &ParameterTree,
    epsilon: f64,
    record: F,
) -> Result<GradCheckReport>
where
    F: Fn(&ParameterTree, &mut Graph) -> Result<NodeId>,
{
    if !(epsilon > 0.0) || !epsilon.is_finite() {
        return Err(Error::DegenerateStep(epsilon));
    }
    let mut g = Graph::new();
    let loss = record(params, &mut g)?;
    let analytic = g.backward(loss)?.into_tree(params);
    let eval = |p: &ParameterTree| -> Result<f64> {
        let mut g = Graph::new();
        let n = record(p, &mut g)?;
        Ok(g.scalar(n))
    };

    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        worst_path: String::new(),
        worst_index: 0,
        entries_checked: 0,
    };
    let mut probe = params.clone();
    for (path, tensor) in params.iter() {
        let grad: &Tensor = analytic.get(path)?;
        for i in 0..tensor.len() {
            let w = tensor.data()[i];
            let plus = (w as f64 + epsilon) as f32;
            let minus = (w as f64 - epsilon) as f32;
            probe.get_mut(path)?.data_mut()[i] = plus;
            let fp = eval(&probe)?;
            probe.get_mut(path)?.data_mut()[i] = minus;
            let fm = eval(&probe)?;
            probe.get_mut(path)?.data_mut()[i] = w;
            let numeric = (fp - fm) / (plus as f64 - minus as f64);
            let err = relative_error(grad.data()[i] as f64, numeric);
            report.entries_checked += 1;
            if err > report.max_relative_error {
                report.max_relative_error = err;
                report.worst_path = path.to_string();
                report.worst_index = i;
            }
        }
    }
    Ok(report)
}

/// Gradient check of the full recognizer with CTC loss on one example.
pub fn grad_check(
    model: &Model,
    frames: &Tensor,
    target: &LabelSequence,
    epsilon: f64,
) -> Result<GradCheckReport> {
    let config = model.config;
    grad_check_with(&model.params, epsilon, |params, g| {
        let logits = record_logits(&config, params, g, frames)?;
        let lp = g.log_softmax(logits);
        let (t, v) = g.dims(lp);
        let (loss, grad) = crate::ctc::ctc_loss_f64(g.value_f64(lp), t, v, target.symbols())?;
        g.loss(lp, loss, grad)
    })
}
