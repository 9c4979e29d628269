use crate::error::{Error, Result};

use super::graph::{Bindings, Graph, NodeId};
use super::tensor::Tensor;

/// Norms below this count as an exact zero when forming relative errors.
pub const GRAD_ZERO_FLOOR: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckEntry {
    pub name: String,
    pub analytic_norm: f64,
    pub numeric_norm: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub entries: Vec<GradCheckEntry>,
    pub max_rel_error: f64,
}

/// `|a - b| / max(|a|, |b|)`, or 0 when both norms are below the floor.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let na = analytic.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nn = numeric.iter().map(|v| v * v).sum::<f64>().sqrt();
    if na < GRAD_ZERO_FLOOR && nn < GRAD_ZERO_FLOOR {
        return 0.0;
    }
    let diff = analytic
        .iter()
        .zip(numeric)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt();
    diff / na.max(nn)
}

/// Compares reverse-mode gradients of the scalar `output` against central
/// differences with the given step, for every parameter bound in `bindings`
/// that the graph uses.
pub fn finite_diff_check(graph: &mut Graph, output: NodeId, bindings: &Bindings, step: f64) -> Result<GradCheckReport> {
    let value = graph.evaluate(output, bindings)?;
    if value.len() != 1 {
        return Err(Error::Shape("gradient check needs a scalar output".into()));
    }
    let analytic = graph.gradient(output, &Tensor::scalar(1.0))?;

    let mut probe = bindings.clone();
    let mut entries = Vec::new();
    for (name, g) in analytic.iter() {
        let base = bindings.get(name).ok_or_else(|| Error::Unbound(name.clone()))?.clone();
        let mut numeric = vec![0.0; base.len()];
        for (i, slot) in numeric.iter_mut().enumerate() {
            let orig = base.data()[i];
            probe.get_mut(name).expect("cloned").data_mut()[i] = orig + step;
            let fp = graph.evaluate(output, &probe)?.item()?;
            probe.get_mut(name).expect("cloned").data_mut()[i] = orig - step;
            let fm = graph.evaluate(output, &probe)?.item()?;
            probe.get_mut(name).expect("cloned").data_mut()[i] = orig;
            *slot = (fp - fm) / (2.0 * step);
        }
        let rel_error = relative_error(g.data(), &numeric);
        entries.push(GradCheckEntry {
            name: name.clone(),
            analytic_norm: g.norm(),
            numeric_norm: numeric.iter().map(|v| v * v).sum::<f64>().sqrt(),
            rel_error,
        });
    }
    // leave cached values consistent with the caller's bindings
    graph.evaluate(output, bindings)?;
    let max_rel_error = entries.iter().map(|e| e.rel_error).fold(0.0, f64::max);
    Ok(GradCheckReport { entries, max_rel_error })
}
