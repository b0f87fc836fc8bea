//! Loss functions with hand-derived gradients w.r.t. the embeddings (or
//! activations) they consume.
//!
//! Four losses: the forward-forward goodness loss, the triplet margin
//! loss, the (N+1)-tuplet loss, and softmax cross-entropy for the backprop
//! baseline. Similarity is the squared Euclidean distance throughout.
//! Batch variants reduce by the arithmetic mean, so the learning rate
//! keeps its meaning across batch sizes.

use crate::error::{Error, Result};
use crate::tensor::DenseMatrix;

/// A scalar loss value plus gradients mirroring the input groups.
#[derive(Debug, Clone)]
pub struct LossResult {
    pub value: f64,
    pub grads: Vec<DenseMatrix>,
}

/// Squared L2 norm of an activation vector.
pub fn goodness(f: &[f64]) -> f64 {
    f.iter().map(|v| v * v).sum()
}

/// log(1 + e^x) without overflow.
#[inline]
fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Forward-forward loss on a pair of goodness scores:
/// (softplus(theta - g_pos) + softplus(g_neg - theta)) / 2.
/// Returns (value, d/d_g_pos, d/d_g_neg).
pub fn ff_loss(g_pos: f64, g_neg: f64, theta: f64) -> (f64, f64, f64) {
    let value = 0.5 * (softplus(theta - g_pos) + softplus(g_neg - theta));
    let d_pos = -0.5 * sigmoid(theta - g_pos);
    let d_neg = 0.5 * sigmoid(g_neg - theta);
    (value, d_pos, d_neg)
}

/// Squared Euclidean distance.
pub fn sq_dist(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Dimension {
            op: "sq_dist",
            left: (1, a.len()),
            right: (1, b.len()),
        });
    }
    Ok(a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum())
}

/// Gradients of one triplet term, matching the anchor/positive/negative.
#[derive(Debug, Clone)]
pub struct TripletGrads {
    pub anchor: Vec<f64>,
    pub positive: Vec<f64>,
    pub negative: Vec<f64>,
}

/// max(d(f,f+) - d(f,f-) + alpha, 0) with squared distances.
/// On the hinge boundary (argument exactly 0) all gradients are zero.
pub fn triplet_loss(
    anchor: &[f64],
    positive: &[f64],
    negative: &[f64],
    alpha: f64,
) -> Result<(f64, TripletGrads)> {
    let d_pos = sq_dist(anchor, positive)?;
    let d_neg = sq_dist(anchor, negative)?;
    let arg = d_pos - d_neg + alpha;
    let dim = anchor.len();
    if arg <= 0.0 {
        return Ok((
            0.0,
            TripletGrads {
                anchor: vec![0.0; dim],
                positive: vec![0.0; dim],
                negative: vec![0.0; dim],
            },
        ));
    }
    let mut g = TripletGrads {
        anchor: vec![0.0; dim],
        positive: vec![0.0; dim],
        negative: vec![0.0; dim],
    };
    for i in 0..dim {
        g.anchor[i] = 2.0 * (negative[i] - positive[i]);
        g.positive[i] = 2.0 * (positive[i] - anchor[i]);
        g.negative[i] = 2.0 * (anchor[i] - negative[i]);
    }
    Ok((arg, g))
}

/// Gradients of one tuplet term.
#[derive(Debug, Clone)]
pub struct TupletGrads {
    pub anchor: Vec<f64>,
    pub positive: Vec<f64>,
    pub negatives: Vec<Vec<f64>>,
}

/// log(1 + sum_i exp(d(f,f+) - d(f,f_i^-))), computed in log-sum-exp
/// stable form. Gradients follow the softmax-weighted chain rule.
pub fn tuplet_loss(
    anchor: &[f64],
    positive: &[f64],
    negatives: &[&[f64]],
) -> Result<(f64, TupletGrads)> {
    if negatives.is_empty() {
        return Err(Error::Argument("tuplet loss needs at least one negative".into()));
    }
    let d_pos = sq_dist(anchor, positive)?;
    let mut z = Vec::with_capacity(negatives.len());
    for n in negatives {
        z.push(d_pos - sq_dist(anchor, n)?);
    }
    // L = log(1 + sum exp(z_i)) = m + log(exp(-m) + sum exp(z_i - m))
    let m = z.iter().fold(0.0f64, |a, &b| a.max(b));
    let mut denom = (-m).exp();
    let mut ez = Vec::with_capacity(z.len());
    for &zi in &z {
        let e = (zi - m).exp();
        ez.push(e);
        denom += e;
    }
    let value = m + denom.ln();
    // w_i = exp(z_i) / (1 + sum exp(z_j)) = dL/dz_i
    let w: Vec<f64> = ez.iter().map(|e| e / denom).collect();
    let w_sum: f64 = w.iter().sum();

    let dim = anchor.len();
    let mut g = TupletGrads {
        anchor: vec![0.0; dim],
        positive: vec![0.0; dim],
        negatives: vec![vec![0.0; dim]; negatives.len()],
    };
    for j in 0..dim {
        let ap = anchor[j] - positive[j];
        // d d_pos/d anchor = 2(a - p), d d_pos/d positive = -2(a - p)
        g.anchor[j] += w_sum * 2.0 * ap;
        g.positive[j] = -w_sum * 2.0 * ap;
        for (i, n) in negatives.iter().enumerate() {
            let an = anchor[j] - n[j];
            g.anchor[j] -= w[i] * 2.0 * an;
            g.negatives[i][j] = w[i] * 2.0 * an;
        }
    }
    Ok((value, g))
}

/// Mean softmax cross-entropy over a batch of logits.
/// grads[0] = (softmax - onehot) / B.
pub fn cross_entropy(logits: &DenseMatrix, labels: &[usize]) -> Result<LossResult> {
    if labels.len() != logits.rows() {
        return Err(Error::Argument(format!(
            "{} logit rows but {} labels",
            logits.rows(),
            labels.len()
        )));
    }
    let classes = logits.cols();
    let b = logits.rows() as f64;
    let mut grad = DenseMatrix::zeros(logits.rows(), classes);
    let mut total = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        if y >= classes {
            return Err(Error::Argument(format!(
                "label {y} out of range for {classes} classes"
            )));
        }
        let row = logits.row(i);
        let m = row.iter().fold(f64::NEG_INFINITY, |a, &v| a.max(v));
        let mut denom = 0.0;
        for &v in row {
            denom += (v - m).exp();
        }
        let log_denom = denom.ln() + m;
        total += log_denom - row[y];
        let grow = grad.row_mut(i);
        for (j, &v) in row.iter().enumerate() {
            let p = (v - m).exp() / denom;
            grow[j] = (p - if j == y { 1.0 } else { 0.0 }) / b;
        }
    }
    Ok(LossResult {
        value: total / b,
        grads: vec![grad],
    })
}

/// Batch triplet loss over embedding matrices, mean-reduced.
/// grads = [anchor, positive, negative], each B x d.
pub fn triplet_loss_batch(
    anchors: &DenseMatrix,
    positives: &DenseMatrix,
    negatives: &DenseMatrix,
    alpha: f64,
) -> Result<LossResult> {
    let b = anchors.rows();
    let mut ga = DenseMatrix::zeros(b, anchors.cols());
    let mut gp = DenseMatrix::zeros(b, anchors.cols());
    let mut gn = DenseMatrix::zeros(b, anchors.cols());
    let mut total = 0.0;
    let inv_b = 1.0 / b as f64;
    for k in 0..b {
        let (v, g) = triplet_loss(anchors.row(k), positives.row(k), negatives.row(k), alpha)?;
        total += v;
        for j in 0..anchors.cols() {
            ga.row_mut(k)[j] = g.anchor[j] * inv_b;
            gp.row_mut(k)[j] = g.positive[j] * inv_b;
            gn.row_mut(k)[j] = g.negative[j] * inv_b;
        }
    }
    Ok(LossResult {
        value: total * inv_b,
        grads: vec![ga, gp, gn],
    })
}

/// Batch tuplet loss; `negatives` is anchor-major with `per_anchor` rows
/// per anchor. grads = [anchor, positive, negatives].
pub fn tuplet_loss_batch(
    anchors: &DenseMatrix,
    positives: &DenseMatrix,
    negatives: &DenseMatrix,
    per_anchor: usize,
) -> Result<LossResult> {
    let b = anchors.rows();
    if negatives.rows() != b * per_anchor {
        return Err(Error::Argument(format!(
            "expected {} negative rows, got {}",
            b * per_anchor,
            negatives.rows()
        )));
    }
    let mut ga = DenseMatrix::zeros(b, anchors.cols());
    let mut gp = DenseMatrix::zeros(b, anchors.cols());
    let mut gn = DenseMatrix::zeros(negatives.rows(), anchors.cols());
    let mut total = 0.0;
    let inv_b = 1.0 / b as f64;
    for k in 0..b {
        let negs: Vec<&[f64]> = (0..per_anchor)
            .map(|i| negatives.row(k * per_anchor + i))
            .collect();
        let (v, g) = tuplet_loss(anchors.row(k), positives.row(k), &negs)?;
        total += v;
        for j in 0..anchors.cols() {
            ga.row_mut(k)[j] = g.anchor[j] * inv_b;
            gp.row_mut(k)[j] = g.positive[j] * inv_b;
        }
        for i in 0..per_anchor {
            for j in 0..anchors.cols() {
                gn.row_mut(k * per_anchor + i)[j] = g.negatives[i][j] * inv_b;
            }
        }
    }
    Ok(LossResult {
        value: total * inv_b,
        grads: vec![ga, gp, gn],
    })
}

/// Tuplet loss against a shared reference table (one embedding per class):
/// the positive is the anchor's class row, the negatives are every other
/// row. grads = [anchor (B x d), references (C x d)], where reference
/// gradients accumulate contributions from the whole batch.
pub fn tuplet_loss_against_references(
    anchors: &DenseMatrix,
    references: &DenseMatrix,
    anchor_labels: &[usize],
) -> Result<LossResult> {
    let b = anchors.rows();
    let classes = references.rows();
    if classes < 2 {
        return Err(Error::Argument("need at least 2 reference classes".into()));
    }
    let mut ga = DenseMatrix::zeros(b, anchors.cols());
    let mut gr = DenseMatrix::zeros(classes, references.cols());
    let mut total = 0.0;
    let inv_b = 1.0 / b as f64;
    for (k, &y) in anchor_labels.iter().enumerate() {
        let neg_classes: Vec<usize> = (0..classes).filter(|&c| c != y).collect();
        let negs: Vec<&[f64]> = neg_classes.iter().map(|&c| references.row(c)).collect();
        let (v, g) = tuplet_loss(anchors.row(k), references.row(y), &negs)?;
        total += v;
        for j in 0..anchors.cols() {
            ga.row_mut(k)[j] = g.anchor[j] * inv_b;
            gr.row_mut(y)[j] += g.positive[j] * inv_b;
        }
        for (i, &c) in neg_classes.iter().enumerate() {
            for j in 0..anchors.cols() {
                gr.row_mut(c)[j] += g.negatives[i][j] * inv_b;
            }
        }
    }
    Ok(LossResult {
        value: total * inv_b,
        grads: vec![ga, gr],
    })
}

/// Batch forward-forward loss on positive/negative activation matrices.
/// grads = [d/d_activ_pos, d/d_activ_neg], mean-reduced.
pub fn ff_loss_batch(
    activ_pos: &DenseMatrix,
    activ_neg: &DenseMatrix,
    theta: f64,
) -> Result<LossResult> {
    if activ_pos.shape() != activ_neg.shape() {
        return Err(Error::Dimension {
            op: "ff_loss_batch",
            left: activ_pos.shape(),
            right: activ_neg.shape(),
        });
    }
    let b = activ_pos.rows();
    let inv_b = 1.0 / b as f64;
    let mut gp = DenseMatrix::zeros(b, activ_pos.cols());
    let mut gn = DenseMatrix::zeros(b, activ_pos.cols());
    let mut total = 0.0;
    for k in 0..b {
        let g_pos = goodness(activ_pos.row(k));
        let g_neg = goodness(activ_neg.row(k));
        let (v, d_pos, d_neg) = ff_loss(g_pos, g_neg, theta);
        total += v;
        // dG/da = 2a
        for (o, &a) in gp.row_mut(k).iter_mut().zip(activ_pos.row(k)) {
            *o = d_pos * 2.0 * a * inv_b;
        }
        for (o, &a) in gn.row_mut(k).iter_mut().zip(activ_neg.row(k)) {
            *o = d_neg * 2.0 * a * inv_b;
        }
    }
    Ok(LossResult {
        value: total * inv_b,
        grads: vec![gp, gn],
    })
}
