//! Finite-difference gradient checking.
//!
//! The checker is deliberately independent of the backward pass: it rebuilds
//! the forward graph from scratch for every perturbed input and compares
//! central differences against whatever `backward` accumulated. It is the
//! reference oracle for every differentiable operation in this crate.

use crate::error::{Error, Result};
use crate::tensor::graph::{Graph, TensorId};
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// max |analytic - numeric| / max(|analytic|, |numeric|, 1).
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    /// Position of the worst entry as (leaf index, flat element index).
    pub worst: (usize, usize),
    pub entries_checked: usize,
}

/// Checks d(loss)/d(leaf) for every element of every leaf.
///
/// `build` must construct the loss from the registered leaves and is invoked
/// once per perturbation, so it has to be a pure function of the leaf values.
pub fn check_loss_grads<F>(leaves: &[Tensor], h: f64, build: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[TensorId]) -> Result<TensorId>,
{
    if leaves.is_empty() {
        return Err(Error::Usage("gradient check needs at least one leaf".into()));
    }
    let eval = |values: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let ids: Vec<TensorId> = values.iter().map(|t| g.constant(t.clone())).collect();
        let loss = build(&mut g, &ids)?;
        if g.value(loss).numel() != 1 {
            return Err(Error::Usage("gradient check loss must be scalar".into()));
        }
        Ok(g.value(loss).data()[0])
    };

    // Analytic gradients from one tape.
    let analytic: Vec<Vec<f64>> = {
        let mut g = Graph::new();
        let ids: Vec<TensorId> = leaves
            .iter()
            .map(|t| g.leaf(t.clone().with_grad()))
            .collect();
        let loss = build(&mut g, &ids)?;
        g.backward(loss)?;
        ids.iter()
            .zip(leaves)
            .map(|(&id, t)| g.grad(id).map(|s| s.to_vec()).unwrap_or_else(|| vec![0.0; t.numel()]))
            .collect()
    };

    let mut work: Vec<Tensor> = leaves.to_vec();
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        max_abs_err: 0.0,
        worst: (0, 0),
        entries_checked: 0,
    };
    for li in 0..leaves.len() {
        for ei in 0..leaves[li].numel() {
            let orig = work[li].data()[ei];
            work[li].data_mut()[ei] = orig + h;
            let up = eval(&work)?;
            work[li].data_mut()[ei] = orig - h;
            let down = eval(&work)?;
            work[li].data_mut()[ei] = orig;
            let numeric = (up - down) / (2.0 * h);
            let exact = analytic[li][ei];
            let abs = (exact - numeric).abs();
            let rel = abs / exact.abs().max(numeric.abs()).max(1.0);
            report.entries_checked += 1;
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst = (li, ei);
            }
            report.max_abs_err = report.max_abs_err.max(abs);
        }
    }
    Ok(report)
}
