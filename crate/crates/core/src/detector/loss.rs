//! Multibox training loss: softmax confidence loss over positives and mined
//! negatives plus smooth-L1 localisation loss over positives, divided by the number
//! of positives.

use super::MatchAssignment;
use crate::error::{Error, Result};
use crate::numerics::{Tape, Var};

/// Value, components and gradients of one multibox loss evaluation.
#[derive(Clone, Debug)]
pub struct MultiboxLoss {
    pub total: f64,
    pub loc: f64,
    pub conf: f64,
    pub num_positive: usize,
    pub num_negative: usize,
    pub grad_logits: Vec<f64>,
    pub grad_boxes: Vec<f64>,
}

pub fn smooth_l1(x: f64) -> f64 {
    if x.abs() < 1.0 {
        0.5 * x * x
    } else {
        x.abs() - 0.5
    }
}

fn smooth_l1_grad(x: f64) -> f64 {
    if x.abs() < 1.0 {
        x
    } else {
        x.signum()
    }
}

/// Evaluate the loss for one sample.
///
/// `logits` is `[Q, P+1]` (column 0 is background), `boxes` and `targets` are
/// `[Q, 4K]`. Negatives are the `neg_ratio * max(N, 1)` background anchors with the
/// highest background loss (ties to the lower index). With no positives the divisor
/// is 1 and the localisation term vanishes.
pub fn multibox_loss(
    logits: &[f64],
    boxes: &[f64],
    assignment: &MatchAssignment,
    targets: &[f64],
    num_classes: usize,
    neg_ratio: usize,
) -> Result<MultiboxLoss> {
    let q = assignment.labels.len();
    let c = num_classes + 1;
    if logits.len() != q * c {
        return Err(Error::shape(format!(
            "logits hold {} values, expected {q} anchors x {c} classes",
            logits.len()
        )));
    }
    if q == 0 || boxes.len() != targets.len() || !boxes.len().is_multiple_of(4 * q) {
        return Err(Error::shape(format!(
            "box predictions ({}) and targets ({}) must be [{q}, 4K]",
            boxes.len(),
            targets.len()
        )));
    }
    let width = boxes.len() / q;

    // log-softmax per anchor
    let mut log_probs = vec![0.0; q * c];
    for i in 0..q {
        let row = &logits[i * c..(i + 1) * c];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        for p in 0..c {
            log_probs[i * c + p] = row[p] - lse;
        }
    }

    let num_pos = assignment.num_positive();
    let mut negatives: Vec<usize> = (0..q).filter(|&i| assignment.labels[i].is_none()).collect();
    // highest background loss first, i.e. lowest log-probability of background
    negatives.sort_by(|&a, &b| {
        log_probs[a * c]
            .partial_cmp(&log_probs[b * c])
            .expect("finite logits")
            .then(a.cmp(&b))
    });
    negatives.truncate(neg_ratio * num_pos.max(1));
    let norm = num_pos.max(1) as f64;

    let mut grad_logits = vec![0.0; q * c];
    let mut grad_boxes = vec![0.0; q * width];
    let mut conf = 0.0;
    let mut loc = 0.0;

    let mut add_conf = |i: usize, class: usize, conf: &mut f64| {
        *conf -= log_probs[i * c + class];
        for p in 0..c {
            let prob = log_probs[i * c + p].exp();
            let onehot = if p == class { 1.0 } else { 0.0 };
            grad_logits[i * c + p] = (prob - onehot) / norm;
        }
    };
    for (i, label) in assignment.labels.iter().enumerate() {
        if let Some(m) = label {
            add_conf(i, m.class_id, &mut conf);
            for j in i * width..(i + 1) * width {
                let d = boxes[j] - targets[j];
                loc += smooth_l1(d);
                grad_boxes[j] = smooth_l1_grad(d) / norm;
            }
        }
    }
    for &i in &negatives {
        add_conf(i, 0, &mut conf);
    }

    Ok(MultiboxLoss {
        total: (loc + conf) / norm,
        loc,
        conf,
        num_positive: num_pos,
        num_negative: negatives.len(),
        grad_logits,
        grad_boxes,
    })
}

/// Record the multibox loss on `tape` as a scalar of `logits` and `boxes`.
pub fn multibox_loss_var(
    tape: &mut Tape,
    logits: Var,
    boxes: Var,
    assignment: &MatchAssignment,
    targets: &[f64],
    num_classes: usize,
    neg_ratio: usize,
) -> Result<(Var, MultiboxLoss)> {
    let loss = multibox_loss(
        tape.value(logits).data(),
        tape.value(boxes).data(),
        assignment,
        targets,
        num_classes,
        neg_ratio,
    )?;
    let var = tape.scalar_fn(
        &[logits, boxes],
        loss.total,
        vec![loss.grad_logits.clone(), loss.grad_boxes.clone()],
    )?;
    Ok((var, loss))
}
