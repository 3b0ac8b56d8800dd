//! Central-difference gradient checking.

use super::graph::{Graph, NodeId};
use super::params::{GradStore, ParamCategory, ParamStore};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct GroupCheck {
    pub group: String,
    pub category: ParamCategory,
    pub scalars: usize,
    pub max_rel_error: f64,
    /// Largest |analytic| seen in the group, to tell "all zero" apart from "agrees".
    pub max_abs_grad: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub groups: Vec<GroupCheck>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.groups.iter().map(|g| g.max_rel_error).fold(0.0, f64::max)
    }

    pub fn group(&self, name: &str) -> Option<&GroupCheck> {
        self.groups.iter().find(|g| g.group == name)
    }
}

/// `|a - b| / max(|a|, |b|, 1e-8)`
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

fn loss_value<F>(store: &ParamStore, loss_fn: &F) -> Result<f64>
where
    F: Fn(&mut Graph) -> Result<NodeId>,
{
    let mut g = Graph::new(store);
    let root = loss_fn(&mut g)?;
    let v = g.value(root);
    if v.numel() != 1 {
        return Err(Error::NonScalarRoot(v.shape().to_vec()));
    }
    Ok(v.item())
}

/// Compares the graph's analytic gradient against
/// `(loss(θ+eps) - loss(θ-eps)) / 2eps` for every trainable scalar in
/// the selected groups (all groups when `group_names` is `None`).
pub fn finite_diff_check<F>(
    store: &mut ParamStore,
    group_names: Option<&[&str]>,
    eps: f64,
    loss_fn: F,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph) -> Result<NodeId>,
{
    if !(eps > 0.0) {
        return Err(Error::invalid(format!("eps must be positive, got {eps}")));
    }
    let first = loss_value(store, &loss_fn)?;
    let second = loss_value(store, &loss_fn)?;
    if first.to_bits() != second.to_bits() {
        return Err(Error::NonDeterministic { first, second });
    }

    let mut grads = GradStore::new(store);
    {
        let mut g = Graph::new(store);
        let root = loss_fn(&mut g)?;
        g.backward(root, &mut grads)?;
    }

    let selected: Vec<_> = store
        .groups()
        .iter()
        .filter(|grp| group_names.is_none_or(|names| names.contains(&grp.name.as_str())))
        .cloned()
        .collect();

    let mut report = GradCheckReport { groups: Vec::new() };
    for group in selected {
        let mut check = GroupCheck {
            group: group.name.clone(),
            category: group.category,
            scalars: 0,
            max_rel_error: 0.0,
            max_abs_grad: 0.0,
        };
        for &pid in &group.params {
            if !store.is_trainable(pid) {
                continue;
            }
            let analytic = grads.dense(pid, store);
            for i in 0..analytic.numel() {
                let orig = store.value(pid).data()[i];
                store.value_mut(pid).data_mut()[i] = orig + eps;
                let plus = loss_value(store, &loss_fn);
                store.value_mut(pid).data_mut()[i] = orig - eps;
                let minus = loss_value(store, &loss_fn);
                store.value_mut(pid).data_mut()[i] = orig;
                let numeric = (plus? - minus?) / (2.0 * eps);
                let a = analytic.data()[i];
                check.max_rel_error = check.max_rel_error.max(relative_error(a, numeric));
                check.max_abs_grad = check.max_abs_grad.max(a.abs());
                check.scalars += 1;
            }
        }
        report.groups.push(check);
    }
    Ok(report)
}
