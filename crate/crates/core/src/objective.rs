//! Reconstruction and adversarial losses.
//!
//! `J = M + ALPHA * G + C`, where `M` is the mean squared modulus of the
//! complex error, `G` the same quantity for the vertical and horizontal
//! forward differences, and `C` the cross-entropy of the discriminator
//! labelling a reconstruction as real. Every function comes in a scalar form
//! over [`ComplexField`]s and a graph form over `[B, 2, H, W]` tensors.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::optics::ComplexField;
use crate::tensor::kernels::softplus;
use crate::tensor::{Graph, Var};

/// Weight of the gradient term.
pub const ALPHA: f64 = 1000.0;

/// One row of the loss history.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub iteration: u64,
    #[serde(rename = "M")]
    pub m: f64,
    #[serde(rename = "G")]
    pub g: f64,
    #[serde(rename = "C")]
    pub c: f64,
    #[serde(rename = "J")]
    pub j: f64,
}

impl LossReport {
    pub const CSV_HEADER: [&'static str; 5] = ["iteration", "M", "G", "C", "J"];

    pub fn new(iteration: u64, m: f64, g: f64, c: f64) -> Self {
        Self {
            iteration,
            m,
            g,
            c,
            j: combine(m, g, c, ALPHA),
        }
    }
}

/// `m + alpha * g + c`.
pub fn combine(m: f64, g: f64, c: f64, alpha: f64) -> f64 {
    m + alpha * g + c
}

fn check_pair(pred: &ComplexField, actual: &ComplexField) -> Result<()> {
    if pred.shape() != actual.shape() {
        return Err(Error::Shape(format!(
            "loss: prediction {:?} vs target {:?}",
            pred.shape(),
            actual.shape()
        )));
    }
    Ok(())
}

/// Mean over pixels of `|pred - actual|^2`.
pub fn loss_m(pred: &ComplexField, actual: &ComplexField) -> Result<f64> {
    check_pair(pred, actual)?;
    let sum: f64 = (0..pred.len())
        .map(|i| (pred.re[i] - actual.re[i]).powi(2) + (pred.im[i] - actual.im[i]).powi(2))
        .sum();
    Ok(sum / pred.len() as f64)
}

/// Vertical plus horizontal mean squared error of forward differences, taken
/// over the valid region without wraparound.
pub fn loss_g(pred: &ComplexField, actual: &ComplexField) -> Result<f64> {
    check_pair(pred, actual)?;
    let (rows, cols) = pred.shape();
    if rows < 2 || cols < 2 {
        return Err(Error::Shape(format!("loss_g needs at least 2x2, got {rows}x{cols}")));
    }
    let d = |plane: &[f64], other: &[f64], i: usize| plane[i] - other[i];
    let mut vertical = 0.0;
    let mut horizontal = 0.0;
    for (p, a) in [(&pred.re, &actual.re), (&pred.im, &actual.im)] {
        for r in 0..rows {
            for c in 0..cols {
                let here = d(p, a, r * cols + c);
                if r + 1 < rows {
                    vertical += (d(p, a, (r + 1) * cols + c) - here).powi(2);
                }
                if c + 1 < cols {
                    horizontal += (d(p, a, r * cols + c + 1) - here).powi(2);
                }
            }
        }
    }
    Ok(vertical / ((rows - 1) * cols) as f64 + horizontal / (rows * (cols - 1)) as f64)
}

/// Mean cross-entropy of reconstructions labelled real: `softplus(-z)`.
pub fn loss_c(logits_on_pred: &[f64]) -> f64 {
    mean(logits_on_pred.iter().map(|&z| softplus(-z)))
}

/// Discriminator loss: reconstructions labelled fake plus actual fields
/// labelled real.
pub fn loss_d(logits_on_pred: &[f64], logits_on_actual: &[f64]) -> f64 {
    mean(logits_on_pred.iter().map(|&z| softplus(z)))
        + mean(logits_on_actual.iter().map(|&z| softplus(-z)))
}

fn mean(values: impl ExactSizeIterator<Item = f64>) -> f64 {
    let n = values.len();
    if n == 0 {
        return 0.0;
    }
    values.sum::<f64>() / n as f64
}

fn check_graph_pair(g: &Graph, pred: Var, actual: Var) -> Result<(usize, usize, usize)> {
    match *g.shape(pred) {
        [b, 2, h, w] if g.shape(actual) == g.shape(pred) => Ok((b, h, w)),
        _ => Err(Error::Shape(format!(
            "loss: expected matching [B, 2, H, W], got {:?} and {:?}",
            g.shape(pred),
            g.shape(actual)
        ))),
    }
}

/// Graph form of [`loss_m`], averaged over the batch.
pub fn graph_loss_m(g: &mut Graph, pred: Var, actual: Var) -> Result<Var> {
    let (b, h, w) = check_graph_pair(g, pred, actual)?;
    let d = g.sub(pred, actual)?;
    let sq = g.square(d);
    let s = g.sum(sq);
    Ok(g.scale(s, 1.0 / (b * h * w) as f64))
}

/// Graph form of [`loss_g`], averaged over the batch.
pub fn graph_loss_g(g: &mut Graph, pred: Var, actual: Var) -> Result<Var> {
    let (b, h, w) = check_graph_pair(g, pred, actual)?;
    if h < 2 || w < 2 {
        return Err(Error::Shape(format!("loss_g needs at least 2x2, got {h}x{w}")));
    }
    let d = g.sub(pred, actual)?;
    let mut terms = Vec::with_capacity(2);
    for (vertical, count) in [(true, (h - 1) * w), (false, h * (w - 1))] {
        let dd = g.diff(d, vertical)?;
        let sq = g.square(dd);
        let s = g.sum(sq);
        terms.push(g.scale(s, 1.0 / (b * count) as f64));
    }
    g.add(terms[0], terms[1])
}

fn graph_bce(g: &mut Graph, logits: Var, real: bool) -> Var {
    let z = if real { g.scale(logits, -1.0) } else { logits };
    let sp = g.softplus(z);
    g.mean(sp)
}

/// Graph form of [`loss_c`].
pub fn graph_loss_c(g: &mut Graph, logits_on_pred: Var) -> Var {
    graph_bce(g, logits_on_pred, true)
}

/// Graph form of [`loss_d`].
pub fn graph_loss_d(g: &mut Graph, logits_on_pred: Var, logits_on_actual: Var) -> Result<Var> {
    let fake = graph_bce(g, logits_on_pred, false);
    let real = graph_bce(g, logits_on_actual, true);
    g.add(fake, real)
}

/// Graph nodes of the generator objective.
#[derive(Clone, Copy, Debug)]
pub struct ObjectiveVars {
    pub m: Var,
    pub g: Var,
    pub c: Option<Var>,
    pub j: Var,
}

/// Assembles `J = M + alpha * G (+ C)`.
pub fn graph_objective(
    g: &mut Graph,
    pred: Var,
    actual: Var,
    logits_on_pred: Option<Var>,
    alpha: f64,
) -> Result<ObjectiveVars> {
    let m = graph_loss_m(g, pred, actual)?;
    let grad = graph_loss_g(g, pred, actual)?;
    let weighted = g.scale(grad, alpha);
    let mut j = g.add(m, weighted)?;
    let c = logits_on_pred.map(|z| graph_loss_c(g, z));
    if let Some(c) = c {
        j = g.add(j, c)?;
    }
    Ok(ObjectiveVars { m, g: grad, c, j })
}
