//! Decoding and metrics: ACSA and ACD micro-F1, gold-aspect sentiment accuracy.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::data::Example;
use crate::error::{Error, Result};
use crate::model::{ForwardOutput, JointModel};

pub const DEFAULT_TAU: f64 = 0.25;

/// Index of the largest value; the first one wins ties.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Decoded {
    /// Aspects with `y_hat_a >= tau`, ascending.
    pub aspects: Vec<usize>,
    /// `(aspect, polarity)` for each detected aspect.
    pub pairs: Vec<(usize, usize)>,
}

pub fn decode(output: &ForwardOutput, tau: f64) -> Decoded {
    let aspects: Vec<usize> = output
        .y_hat_a
        .iter()
        .enumerate()
        .filter(|&(_, &p)| p >= tau)
        .map(|(j, _)| j)
        .collect();
    let pairs = aspects.iter().map(|&j| (j, argmax(&output.y_hat_s[j]))).collect();
    Decoded { aspects, pairs }
}

/// Precision, recall and F1 with their underlying counts.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub predicted: usize,
    pub gold: usize,
    pub correct: usize,
}

impl Prf {
    pub fn from_counts(predicted: usize, gold: usize, correct: usize) -> Self {
        let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        let precision = ratio(correct, predicted);
        let recall = ratio(correct, gold);
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        Self {
            precision,
            recall,
            f1,
            predicted,
            gold,
            correct,
        }
    }
}

/// Micro-averaged scores of predicted set `s` against gold set `g`; 0/0 counts as 0.
pub fn micro_f1<T: Ord>(s: &BTreeSet<T>, g: &BTreeSet<T>) -> Prf {
    Prf::from_counts(s.len(), g.len(), s.intersection(g).count())
}

/// Accuracy of `argmax y_hat_s[j]` over every gold-mentioned `(text, j)`,
/// ignoring detection entirely.
pub fn sc_accuracy(outputs: &[ForwardOutput], gold: &[Example]) -> Result<f64> {
    let (correct, total) = sc_counts(outputs, gold)?;
    if total == 0 {
        return Err(Error::Data("no gold aspect mentions to score sentiment on".into()));
    }
    Ok(correct as f64 / total as f64)
}

fn sc_counts(outputs: &[ForwardOutput], gold: &[Example]) -> Result<(usize, usize)> {
    if outputs.len() != gold.len() {
        return Err(Error::invalid(format!("{} outputs for {} examples", outputs.len(), gold.len())));
    }
    let mut correct = 0;
    let mut total = 0;
    for (out, ex) in outputs.iter().zip(gold) {
        for j in 0..ex.y_a.len() {
            if let Some(k) = ex.gold_polarity(j) {
                total += 1;
                if argmax(&out.y_hat_s[j]) == k {
                    correct += 1;
                }
            }
        }
    }
    Ok((correct, total))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub tau: f64,
    pub examples: usize,
    pub acsa: Prf,
    pub acd: Prf,
    /// `None` when the data has no gold aspect mentions.
    pub sc_accuracy: Option<f64>,
    pub sc_correct: usize,
    pub sc_total: usize,
}

impl EvalReport {
    /// One `key: value` field per line.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "tau: {}", self.tau);
        let _ = writeln!(s, "examples: {}", self.examples);
        for (name, prf) in [("acsa", &self.acsa), ("acd", &self.acd)] {
            let _ = writeln!(s, "{name}_precision: {:.6}", prf.precision);
            let _ = writeln!(s, "{name}_recall: {:.6}", prf.recall);
            let _ = writeln!(s, "{name}_f1: {:.6}", prf.f1);
            let _ = writeln!(s, "{name}_predicted: {}", prf.predicted);
            let _ = writeln!(s, "{name}_gold: {}", prf.gold);
            let _ = writeln!(s, "{name}_correct: {}", prf.correct);
        }
        match self.sc_accuracy {
            Some(a) => {
                let _ = writeln!(s, "sc_accuracy: {a:.6}");
            }
            None => {
                let _ = writeln!(s, "sc_accuracy: n/a");
            }
        }
        let _ = writeln!(s, "sc_correct: {}", self.sc_correct);
        let _ = writeln!(s, "sc_total: {}", self.sc_total);
        s
    }
}

/// Scores precomputed outputs against encoded gold examples.
pub fn evaluate_outputs(outputs: &[ForwardOutput], gold: &[Example], tau: f64) -> Result<EvalReport> {
    if gold.is_empty() {
        return Err(Error::Data("cannot evaluate an empty dataset".into()));
    }
    let (sc_correct, sc_total) = sc_counts(outputs, gold)?;
    let mut pred_acd = BTreeSet::new();
    let mut pred_acsa = BTreeSet::new();
    let mut gold_acd = BTreeSet::new();
    let mut gold_acsa = BTreeSet::new();
    for (t, (out, ex)) in outputs.iter().zip(gold).enumerate() {
        let d = decode(out, tau);
        pred_acd.extend(d.aspects.iter().map(|&j| (t, j)));
        pred_acsa.extend(d.pairs.iter().map(|&(j, k)| (t, j, k)));
        for j in 0..ex.y_a.len() {
            if let Some(k) = ex.gold_polarity(j) {
                gold_acd.insert((t, j));
                gold_acsa.insert((t, j, k));
            }
        }
    }
    Ok(EvalReport {
        tau,
        examples: gold.len(),
        acsa: micro_f1(&pred_acsa, &gold_acsa),
        acd: micro_f1(&pred_acd, &gold_acd),
        sc_accuracy: (sc_total > 0).then(|| sc_correct as f64 / sc_total as f64),
        sc_correct,
        sc_total,
    })
}

/// Evaluation-mode forward over every example, then [`evaluate_outputs`].
pub fn evaluate(model: &JointModel, data: &[Example], tau: f64) -> Result<EvalReport> {
    if data.is_empty() {
        return Err(Error::Data("cannot evaluate an empty dataset".into()));
    }
    let outputs = data
        .iter()
        .map(|ex| model.forward_masked(&ex.token_ids, &ex.mask))
        .collect::<Result<Vec<_>>>()?;
    evaluate_outputs(&outputs, data, tau)
}

/// Arithmetic mean of every rate; counts are summed.
pub fn average_runs(reports: &[EvalReport]) -> Result<EvalReport> {
    let Some(first) = reports.first() else {
        return Err(Error::invalid("cannot average an empty list of reports"));
    };
    if reports.len() == 1 {
        return Ok(first.clone());
    }
    let n = reports.len() as f64;
    let mean = |f: &dyn Fn(&EvalReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
    let sum = |f: &dyn Fn(&EvalReport) -> usize| reports.iter().map(f).sum::<usize>();
    let prf = |pick: &dyn Fn(&EvalReport) -> &Prf| Prf {
        precision: mean(&|r| pick(r).precision),
        recall: mean(&|r| pick(r).recall),
        f1: mean(&|r| pick(r).f1),
        predicted: sum(&|r| pick(r).predicted),
        gold: sum(&|r| pick(r).gold),
        correct: sum(&|r| pick(r).correct),
    };
    let sc = reports.iter().map(|r| r.sc_accuracy).collect::<Option<Vec<f64>>>();
    Ok(EvalReport {
        tau: first.tau,
        examples: sum(&|r| r.examples),
        acsa: prf(&|r| &r.acsa),
        acd: prf(&|r| &r.acd),
        sc_accuracy: sc.map(|v| v.iter().sum::<f64>() / n),
        sc_correct: sum(&|r| r.sc_correct),
        sc_total: sum(&|r| r.sc_total),
    })
}
