//! Losses, the Adam optimizer and the training loop.

use std::ops::ControlFlow;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{
    clip_global_norm, clip_gradient_norm, GradStore, Graph, NodeId, ParamCategory, ParamStore,
};
use crate::data::{make_batches, Example};
use crate::error::{Error, Result};
use crate::eval::{average_runs, evaluate, EvalReport, DEFAULT_TAU};
use crate::model::{JointModel, Pass};
use crate::nn::Dropout;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClipMode {
    /// Each gradient tensor is clipped to the norm bound on its own.
    #[default]
    PerTensor,
    /// All gradients share one scale factor.
    Global,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lambda_l2: f64,
    pub alpha_sc: f64,
    pub learning_rate: f64,
    pub clip_norm: f64,
    pub clip_mode: ClipMode,
    pub dropout_p: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Epochs without validation improvement before stopping; 0 disables.
    pub patience: usize,
    pub seed: u64,
    pub tau: f64,
    pub runs: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda_l2: 0.01,
            alpha_sc: 1.0,
            learning_rate: 0.001,
            clip_norm: 5.0,
            clip_mode: ClipMode::PerTensor,
            dropout_p: 0.5,
            batch_size: 10,
            max_epochs: 50,
            patience: 10,
            seed: 42,
            tau: DEFAULT_TAU,
            runs: 3,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("learning_rate", self.learning_rate >= 0.0),
            ("lambda_l2", self.lambda_l2 >= 0.0),
            ("alpha_sc", self.alpha_sc >= 0.0),
            ("clip_norm", self.clip_norm > 0.0),
            ("batch_size", self.batch_size >= 1),
            ("runs", self.runs >= 1),
            ("tau", self.tau > 0.0 && self.tau < 1.0),
            ("dropout_p", (0.0..1.0).contains(&self.dropout_p)),
        ];
        match positive.iter().find(|(_, ok)| !ok) {
            Some((name, _)) => Err(Error::invalid(format!("training setting `{name}` is out of range"))),
            None => Ok(()),
        }
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        format!("{:x}", Sha256::digest(json))
    }
}

fn targets_len(op: &str, expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(Error::shape(
            if op == "acd" { "acd_loss" } else { "sc_loss" },
            &[expected],
            &[got],
        ));
    }
    Ok(())
}

/// Binary cross-entropy summed over aspects. `y_hat` holds one `[1]` node per aspect.
pub fn acd_loss_graph(g: &mut Graph, y_a: &[u8], y_hat: &[NodeId]) -> Result<NodeId> {
    targets_len("acd", y_a.len(), y_hat.len())?;
    let mut terms = Vec::with_capacity(y_a.len());
    for (&y, &p) in y_a.iter().zip(y_hat) {
        let arg = if y == 1 {
            p
        } else {
            let neg = g.neg(p)?;
            g.add_scalar(neg, 1.0)?
        };
        terms.push(g.log(arg)?);
    }
    let all = g.concat(&terms)?;
    let s = g.sum(all)?;
    g.neg(s)
}

/// Cross-entropy over mentioned aspects only; rows of `y_s` that are all
/// zero are skipped and add nothing.
pub fn sc_loss_graph(g: &mut Graph, y_s: &[Vec<u8>], y_hat: &[NodeId]) -> Result<NodeId> {
    targets_len("sc", y_s.len(), y_hat.len())?;
    let mut terms = Vec::new();
    for (j, (row, &dist)) in y_s.iter().zip(y_hat).enumerate() {
        let total: u32 = row.iter().map(|&v| u32::from(v)).sum();
        if total > 1 {
            return Err(Error::invalid(format!("sentiment target row {j} has {total} hot entries")));
        }
        if let Some(k) = row.iter().position(|&v| v == 1) {
            let p = g.slice(dist, k, k + 1)?;
            terms.push(g.log(p)?);
        }
    }
    if terms.is_empty() {
        return Ok(g.constant(Tensor::scalar(0.0)));
    }
    let all = g.concat(&terms)?;
    let s = g.sum(all)?;
    g.neg(s)
}

/// `lambda * sum(theta^2)` over trainable parameters outside the Bi-LSTM.
pub fn l2_penalty_graph(g: &mut Graph, lambda: f64) -> Result<NodeId> {
    let store = g.store();
    let mut terms = Vec::new();
    for id in store.ids() {
        if store.is_trainable(id) && store.category(id) != ParamCategory::Bilstm {
            let p = g.param(id);
            let sq = g.mul(p, p)?;
            terms.push(g.sum(sq)?);
        }
    }
    let mut total = g.constant(Tensor::scalar(0.0));
    for t in terms {
        total = g.add(total, t)?;
    }
    g.scale(total, lambda)
}

fn value_of(store: &ParamStore, build: impl FnOnce(&mut Graph) -> Result<NodeId>) -> Result<f64> {
    let mut g = Graph::new(store);
    let root = build(&mut g)?;
    Ok(g.value(root).item())
}

pub fn acd_loss(y_a: &[u8], y_hat: &[f64]) -> Result<f64> {
    value_of(&ParamStore::new(), |g| {
        let nodes: Vec<_> = y_hat.iter().map(|&p| g.constant(Tensor::vector(vec![p]))).collect();
        acd_loss_graph(g, y_a, &nodes)
    })
}

pub fn sc_loss(y_s: &[Vec<u8>], y_hat: &[Vec<f64>]) -> Result<f64> {
    value_of(&ParamStore::new(), |g| {
        let nodes: Vec<_> = y_hat.iter().map(|row| g.constant(Tensor::vector(row.clone()))).collect();
        sc_loss_graph(g, y_s, &nodes)
    })
}

pub fn l2_penalty(store: &ParamStore, lambda: f64) -> Result<f64> {
    value_of(store, |g| l2_penalty_graph(g, lambda))
}

/// `L_A + alpha * L_s + penalty`.
pub fn total_loss(acd: f64, sc: f64, penalty: f64, alpha_sc: f64) -> f64 {
    acd + alpha_sc * sc + penalty
}

/// Adam with bias correction.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl AdamState {
    pub fn new(store: &ParamStore) -> Self {
        let zeros: Vec<Tensor> = store.ids().map(|id| Tensor::zeros(store.value(id).shape())).collect();
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn first_moment(&self, index: usize) -> &Tensor {
        &self.m[index]
    }

    pub fn second_moment(&self, index: usize) -> &Tensor {
        &self.v[index]
    }

    /// One update of every trainable parameter. Parameters without a
    /// gradient slot are updated as if their gradient were zero.
    pub fn step(&mut self, store: &mut ParamStore, grads: &GradStore, lr: f64) -> Result<()> {
        if self.m.len() != store.len() {
            return Err(Error::invalid(format!(
                "optimizer tracks {} parameters, store has {}",
                self.m.len(),
                store.len()
            )));
        }
        for id in store.ids() {
            if let Some(gt) = grads.get(id) {
                if gt.shape() != store.value(id).shape() {
                    return Err(Error::shape("adam_step", store.value(id).shape(), gt.shape()));
                }
            }
        }
        self.t += 1;
        let t = self.t as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            if !store.is_trainable(id) {
                continue;
            }
            let i = id.index();
            let grad = grads.get(id).map(Tensor::data);
            let theta = store.value_mut(id).data_mut();
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for k in 0..theta.len() {
                let gk = grad.map_or(0.0, |g| g[k]);
                m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * gk;
                v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * gk * gk;
                let m_hat = m[k] / c1;
                let v_hat = v[k] / c2;
                theta[k] -= lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// Loss components for one example's graph; returns `(total, L_A, L_s)` nodes.
pub fn example_loss(
    g: &mut Graph,
    model: &JointModel,
    ex: &Example,
    alpha_sc: f64,
    pass: Pass,
) -> Result<(NodeId, NodeId, NodeId)> {
    let nodes = model.forward_graph(g, &ex.token_ids, &ex.mask, pass)?;
    let la = acd_loss_graph(g, &ex.y_a, &nodes.y_a)?;
    let ls = sc_loss_graph(g, &ex.y_s, &nodes.y_s)?;
    let weighted = g.scale(ls, alpha_sc)?;
    let total = g.add(la, weighted)?;
    Ok((total, la, ls))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean over steps of (batch-mean example loss + penalty).
    pub loss: f64,
    pub acd_loss: f64,
    pub sc_loss: f64,
    pub penalty: f64,
    pub val_acsa_precision: f64,
    pub val_acsa_recall: f64,
    pub val_acsa_f1: f64,
    pub val_acd_precision: f64,
    pub val_acd_recall: f64,
    pub val_acd_f1: f64,
    pub val_sc_accuracy: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// 1-based epoch whose parameters the model now holds.
    pub best_epoch: usize,
    pub best_val_f1: f64,
    pub best_report: EvalReport,
    pub history: Vec<EpochRecord>,
    pub epochs_run: usize,
}

pub fn train(model: &mut JointModel, train: &[Example], val: &[Example], cfg: &TrainConfig) -> Result<TrainOutcome> {
    train_with_observer(model, train, val, cfg, |_, _| ControlFlow::Continue(()))
}

/// Runs the training loop, calling `observer` after every epoch's
/// validation; returning `Break` ends training after that epoch. On
/// return the model holds the parameters with the best validation ACSA F1.
pub fn train_with_observer<F>(
    model: &mut JointModel,
    train: &[Example],
    val: &[Example],
    cfg: &TrainConfig,
    mut observer: F,
) -> Result<TrainOutcome>
where
    F: FnMut(&EpochRecord, &JointModel) -> ControlFlow<()>,
{
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Data("training set is empty".into()));
    }
    if val.is_empty() {
        return Err(Error::Data("validation set is empty".into()));
    }
    let dropout = Dropout::new(cfg.dropout_p)?;
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    dropout_rng.set_stream(1);
    let mut adam = AdamState::new(model.store());

    let mut best: Option<(usize, f64, EvalReport, Vec<Tensor>)> = None;
    let mut history = Vec::new();
    let mut since_best = 0;

    for epoch in 1..=cfg.max_epochs {
        let shuffle_seed = cfg.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(epoch as u64);
        let batches = make_batches(train, cfg.batch_size, shuffle_seed, true)?;
        let (mut sum_loss, mut sum_la, mut sum_ls, mut sum_pen) = (0.0, 0.0, 0.0, 0.0);

        for batch in &batches {
            let mut grads = GradStore::new(model.store());
            let scale = 1.0 / batch.len() as f64;
            let mut batch_loss = 0.0;
            for &i in &batch.indices {
                let ex = &train[i];
                let mut g = Graph::new(model.store());
                let pass = Pass::Train {
                    dropout,
                    rng: &mut dropout_rng,
                };
                let (total, la, ls) = example_loss(&mut g, model, ex, cfg.alpha_sc, pass)?;
                batch_loss += g.value(total).item();
                sum_la += g.value(la).item();
                sum_ls += g.value(ls).item();
                let root = g.scale(total, scale)?;
                g.backward(root, &mut grads)?;
            }
            let penalty = {
                let mut g = Graph::new(model.store());
                let p = l2_penalty_graph(&mut g, cfg.lambda_l2)?;
                g.backward(p, &mut grads)?;
                g.value(p).item()
            };
            sum_pen += penalty;
            sum_loss += batch_loss * scale + penalty;

            match cfg.clip_mode {
                ClipMode::PerTensor => {
                    for group in model.store().groups() {
                        clip_gradient_norm(&mut grads, group, cfg.clip_norm);
                    }
                }
                ClipMode::Global => clip_global_norm(&mut grads, cfg.clip_norm),
            }
            adam.step(model.store_mut(), &grads, cfg.learning_rate)?;
        }

        let report = evaluate(model, val, cfg.tau)?;
        let n_steps = batches.len() as f64;
        let n_ex = train.len() as f64;
        let record = EpochRecord {
            epoch,
            loss: sum_loss / n_steps,
            acd_loss: sum_la / n_ex,
            sc_loss: sum_ls / n_ex,
            penalty: sum_pen / n_steps,
            val_acsa_precision: report.acsa.precision,
            val_acsa_recall: report.acsa.recall,
            val_acsa_f1: report.acsa.f1,
            val_acd_precision: report.acd.precision,
            val_acd_recall: report.acd.recall,
            val_acd_f1: report.acd.f1,
            val_sc_accuracy: report.sc_accuracy,
        };
        if !record.loss.is_finite() {
            return Err(Error::Diverged {
                epoch,
                loss: record.loss,
            });
        }

        let improved = best.as_ref().is_none_or(|(_, f1, _, _)| report.acsa.f1 > *f1);
        if improved {
            best = Some((epoch, report.acsa.f1, report, model.store().snapshot()));
            since_best = 0;
        } else {
            since_best += 1;
        }
        let flow = observer(&record, model);
        history.push(record);
        if flow.is_break() || (cfg.patience > 0 && since_best >= cfg.patience) {
            break;
        }
    }

    let epochs_run = history.len();
    let Some((best_epoch, best_val_f1, best_report, snapshot)) = best else {
        return Err(Error::invalid("max_epochs must be at least 1"));
    };
    model.store_mut().restore(&snapshot)?;
    Ok(TrainOutcome {
        best_epoch,
        best_val_f1,
        best_report,
        history,
        epochs_run,
    })
}

#[derive(Clone, Debug)]
pub struct RunResult {
    pub seed: u64,
    pub model: JointModel,
    pub outcome: TrainOutcome,
    pub report: EvalReport,
}

#[derive(Clone, Debug)]
pub struct RepeatedOutcome {
    pub runs: Vec<RunResult>,
    pub averaged: EvalReport,
}

/// Trains `cfg.runs` models with seeds `cfg.seed`, `cfg.seed + 1`, ...
/// Each run's best model is scored on `test` (or on `val` when no test
/// set is given) and the reports are averaged.
pub fn run_repeated<F>(
    mut model_factory: F,
    train_set: &[Example],
    val: &[Example],
    test: Option<&[Example]>,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(usize, &EpochRecord),
) -> Result<RepeatedOutcome>
where
    F: FnMut(u64) -> Result<JointModel>,
{
    cfg.validate()?;
    let mut runs = Vec::with_capacity(cfg.runs);
    for r in 0..cfg.runs {
        let seed = cfg.seed.wrapping_add(r as u64);
        let run_cfg = TrainConfig { seed, ..cfg.clone() };
        let mut model = model_factory(seed)?;
        let outcome = train_with_observer(&mut model, train_set, val, &run_cfg, |rec, _| {
            on_epoch(r, rec);
            ControlFlow::Continue(())
        })?;
        let report = evaluate(&model, test.unwrap_or(val), cfg.tau)?;
        runs.push(RunResult {
            seed,
            model,
            outcome,
            report,
        });
    }
    let reports: Vec<EvalReport> = runs.iter().map(|r| r.report.clone()).collect();
    Ok(RepeatedOutcome {
        averaged: average_runs(&reports)?,
        runs,
    })
}
