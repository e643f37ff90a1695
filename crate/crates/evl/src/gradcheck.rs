//! Central-difference verification of analytic gradients.
//!
//! The checker rebuilds nothing: it re-evaluates the recorded graph in f64
//! with single leaf entries displaced by ±h, so the probed function is
//! exactly the one that was differentiated. Per parameter tensor the error
//! is norm-aggregated, `|analytic - central| / (|analytic| + |central| + 1e-8)`
//! with Euclidean norms, and the maximum over parameters is returned.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::graph::{F64Forward, Graph, VarId};

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// Max over checked parameters of the relative error.
    pub max_rel_error: f64,
    /// Relative error per checked parameter name.
    pub per_param: BTreeMap<String, f64>,
}

/// Check every trainable named leaf of the graph produced by `build`.
pub fn grad_check<F>(build: F, h: f64) -> Result<GradCheckReport>
where
    F: Fn() -> Result<(Graph, VarId)>,
{
    grad_check_filtered(build, h, |_| true)
}

/// Check the subset of trainable leaves whose name passes `filter`.
pub fn grad_check_filtered<F, P>(build: F, h: f64, filter: P) -> Result<GradCheckReport>
where
    F: Fn() -> Result<(Graph, VarId)>,
    P: Fn(&str) -> bool,
{
    if !(1e-5..=1e-2).contains(&h) {
        return Err(Error::InvalidParam(format!(
            "finite-difference step {h} outside [1e-5, 1e-2]"
        )));
    }
    let (graph, loss) = build()?;
    if graph.is_stochastic() {
        return Err(Error::Contract(
            "grad_check requires a deterministic function; disable dropout".into(),
        ));
    }
    if !graph.value(loss).is_scalar() {
        return Err(Error::Shape(format!(
            "grad_check loss must be scalar, got {:?}",
            graph.value(loss).shape()
        )));
    }

    let analytic = graph.backward(loss)?;
    let mut forward = F64Forward::new(&graph, loss);

    let mut per_param = BTreeMap::new();
    let mut max_rel = 0.0f64;
    for (name, leaf) in graph.named_leaves() {
        if !filter(&name) {
            continue;
        }
        let n = graph.value(leaf).numel();
        forward.set_probe_leaf(leaf);
        let mut diff_sq = 0.0f64;
        let mut a_sq = 0.0f64;
        let mut c_sq = 0.0f64;
        for entry in 0..n {
            let fp = forward.eval_with_delta(entry, h);
            let fm = forward.eval_with_delta(entry, -h);
            let central = (fp - fm) / (2.0 * h);
            let a = analytic
                .get(&name)
                .map(|g| g.data()[entry] as f64)
                .unwrap_or(0.0);
            diff_sq += (a - central) * (a - central);
            a_sq += a * a;
            c_sq += central * central;
        }
        let rel = diff_sq.sqrt() / (a_sq.sqrt() + c_sq.sqrt() + 1e-8);
        max_rel = max_rel.max(rel);
        per_param.insert(name, rel);
    }

    Ok(GradCheckReport {
        max_rel_error: max_rel,
        per_param,
    })
}
