//! Stage-2 training objectives: class-weighted cross-entropy and the
//! scene-class affinity terms.
//!
//! Affinity variant (reconstruction of the MonoScene formulation): with
//! softmax probabilities `p_kc` and one-hot targets `y_kc` over labelled
//! voxels,
//!
//! * precision `P_c = sum_k p_kc y_kc / sum_k p_kc`
//! * recall `R_c = sum_k p_kc y_kc / sum_k y_kc`
//! * specificity `S_c = sum_k (1 - p_kc)(1 - y_kc) / sum_k (1 - y_kc)`
//!
//! The semantic term is `-mean_c (ln P_c + ln R_c + ln S_c)` over classes
//! present in the ground truth; a specificity term whose denominator is zero
//! is dropped. The geometric term applies the same three ratios once to the
//! binary non-empty probability `1 - p_k0` against ground-truth occupancy.

use crate::error::{Result, SscError};
use crate::numerics::{Tape, Var};
use crate::scalar::Real;
use crate::voxel::{LabelGrid, EMPTY, IGNORE};

/// Per-class loss weights `w_c` for classes `0..=M`.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassWeights {
    pub weights: Vec<f64>,
}

impl ClassWeights {
    pub fn uniform(num_classes: usize) -> Self {
        ClassWeights {
            weights: vec![1.0; num_classes],
        }
    }

    pub fn num_classes(&self) -> usize {
        self.weights.len()
    }
}

/// Inverse-frequency weights over all labelled voxels of `grids`, scaled to
/// mean 1. A class that never occurs gets frequency `1 / (total + M + 1)`.
pub fn compute_class_weights(grids: &[LabelGrid], num_classes: usize) -> Result<ClassWeights> {
    if grids.is_empty() {
        return Err(SscError::invalid("class weights need at least one grid"));
    }
    let mut counts = vec![0u64; num_classes];
    for g in grids {
        for &l in g.labels() {
            if l == IGNORE {
                continue;
            }
            let c = l as usize;
            if c >= num_classes {
                return Err(SscError::invalid(format!("label {c} outside {num_classes} classes")));
            }
            counts[c] += 1;
        }
    }
    let total: u64 = counts.iter().sum();
    let smoothed = 1.0 / (total as f64 + num_classes as f64);
    let inv: Vec<f64> = counts
        .iter()
        .map(|&n| {
            let freq = if n == 0 { smoothed } else { n as f64 / total as f64 };
            1.0 / freq
        })
        .collect();
    let mean = inv.iter().sum::<f64>() / num_classes as f64;
    Ok(ClassWeights {
        weights: inv.iter().map(|w| w / mean).collect(),
    })
}

/// Flattens `[..., C]` logits to `[K, C]` and checks them against the grid.
fn logits_matrix<T: Real>(tape: &mut Tape<T>, logits: Var, gt: &LabelGrid, num_classes: usize) -> Result<Var> {
    let n = tape.value(logits).len();
    if n != gt.len() * num_classes {
        return Err(SscError::Shape {
            name: "logits".into(),
            expected: vec![gt.len(), num_classes],
            found: tape.shape(logits).to_vec(),
        });
    }
    if tape.value(logits).iter().any(|x| !x.is_finite()) {
        return Err(SscError::NonFinite("logits".into()));
    }
    Ok(tape.reshape(logits, vec![gt.len(), num_classes]))
}

fn checked_labels(gt: &LabelGrid, num_classes: usize) -> Result<Vec<Option<usize>>> {
    gt.labels()
        .iter()
        .map(|&l| match l {
            IGNORE => Ok(None),
            l if (l as usize) < num_classes => Ok(Some(l as usize)),
            l => Err(SscError::invalid(format!("label {l} outside {num_classes} classes"))),
        })
        .collect()
}

/// Class-weighted cross-entropy averaged over labelled voxels.
pub fn semantic_loss<T: Real>(tape: &mut Tape<T>, logits: Var, gt: &LabelGrid, weights: &ClassWeights) -> Result<Var> {
    let c = weights.num_classes();
    let m = logits_matrix(tape, logits, gt, c)?;
    let labels = checked_labels(gt, c)?;
    let w = weights.weights.iter().map(|&x| T::of(x)).collect();
    Ok(tape.weighted_cross_entropy(m, labels, w))
}

fn zero<T: Real>(tape: &mut Tape<T>) -> Var {
    tape.constant_raw(vec![1], vec![T::zero()])
}

/// Sum of `ln` over selected entries of a vector node.
fn sum_log_at<T: Real>(tape: &mut Tape<T>, v: Var, idx: &[usize]) -> Var {
    let n = tape.value(v).len();
    let col = tape.reshape(v, vec![n, 1]);
    let picked = tape.gather_rows(col, idx.to_vec());
    let logs = tape.log(picked);
    tape.sum(logs)
}

/// Probabilities of labelled voxels plus their targets.
fn labelled_probs<T: Real>(tape: &mut Tape<T>, logits: Var, gt: &LabelGrid, c: usize) -> Result<Option<(Var, Vec<usize>)>> {
    let m = logits_matrix(tape, logits, gt, c)?;
    let labels = checked_labels(gt, c)?;
    let rows: Vec<usize> = (0..labels.len()).filter(|&k| labels[k].is_some()).collect();
    if rows.is_empty() {
        return Ok(None);
    }
    let targets = rows.iter().map(|&k| labels[k].unwrap()).collect();
    let sel = tape.gather_rows(m, rows);
    Ok(Some((tape.softmax_rows(sel), targets)))
}

/// Semantic scene-class affinity term.
pub fn semantic_affinity_loss<T: Real>(tape: &mut Tape<T>, logits: Var, gt: &LabelGrid, num_classes: usize) -> Result<Var> {
    let c = num_classes;
    let Some((p, targets)) = labelled_probs(tape, logits, gt, c)? else {
        return Ok(zero(tape));
    };
    let kv = targets.len();
    let mut onehot = vec![T::zero(); kv * c];
    let mut class_count = vec![0usize; c];
    for (k, &y) in targets.iter().enumerate() {
        onehot[k * c + y] = T::one();
        class_count[y] += 1;
    }
    let present: Vec<usize> = (0..c).filter(|&i| class_count[i] > 0).collect();
    let not_onehot: Vec<T> = onehot.iter().map(|&x| T::one() - x).collect();

    let py = tape.mul_const(p, onehot);
    let nom = tape.sum_rows(py);
    let psum = tape.sum_rows(p);
    let precision = tape.div(nom, psum);
    let inv_count = class_count.iter().map(|&n| if n > 0 { T::one() / T::of_usize(n) } else { T::zero() }).collect();
    let recall = tape.mul_const(nom, inv_count);
    // S_c = 1 - sum_k p_kc (1 - y_kc) / (K - n_c); forced to 1 when K == n_c
    let p_neg = tape.mul_const(p, not_onehot);
    let fp = tape.sum_rows(p_neg);
    let coef = class_count
        .iter()
        .map(|&n| if kv > n { -T::one() / T::of_usize(kv - n) } else { T::zero() })
        .collect();
    let scaled = tape.mul_const(fp, coef);
    let specificity = tape.add_scalar(scaled, T::one());

    let lp = sum_log_at(tape, precision, &present);
    let lr = sum_log_at(tape, recall, &present);
    let ls = sum_log_at(tape, specificity, &present);
    let a = tape.add(lp, lr);
    let total = tape.add(a, ls);
    Ok(tape.mul_scalar(total, -T::one() / T::of_usize(present.len())))
}

/// Geometric (empty vs. occupied) scene-class affinity term.
pub fn geometric_affinity_loss<T: Real>(tape: &mut Tape<T>, logits: Var, gt: &LabelGrid, num_classes: usize) -> Result<Var> {
    let c = num_classes;
    let Some((p, targets)) = labelled_probs(tape, logits, gt, c)? else {
        return Ok(zero(tape));
    };
    let kv = targets.len();
    let occ: Vec<T> = targets.iter().map(|&y| if y as u8 != EMPTY { T::one() } else { T::zero() }).collect();
    let n_occ = targets.iter().filter(|&&y| y as u8 != EMPTY).count();
    let mut select = vec![T::zero(); c];
    select[EMPTY as usize] = T::one();
    let sel = tape.constant_raw(vec![c, 1], select);
    let p_empty = tape.matmul(p, sel);
    let p_empty = tape.reshape(p_empty, vec![kv]);
    let neg = tape.mul_scalar(p_empty, -T::one());
    let q = tape.add_scalar(neg, T::one());

    let qt = tape.mul_const(q, occ.clone());
    let nom = tape.sum(qt);
    let qsum = tape.sum(q);
    let mut terms = Vec::new();
    let precision = tape.div(nom, qsum);
    terms.push(tape.log(precision));
    if n_occ > 0 {
        let recall = tape.mul_scalar(nom, T::one() / T::of_usize(n_occ));
        terms.push(tape.log(recall));
    }
    if kv > n_occ {
        let free: Vec<T> = occ.iter().map(|&t| T::one() - t).collect();
        let tn = tape.mul_const(p_empty, free);
        let tn = tape.sum(tn);
        let specificity = tape.mul_scalar(tn, T::one() / T::of_usize(kv - n_occ));
        terms.push(tape.log(specificity));
    }
    let mut total = terms[0];
    for &t in &terms[1..] {
        total = tape.add(total, t);
    }
    Ok(tape.mul_scalar(total, -T::one()))
}

/// Semantic plus geometric affinity, each with unit weight.
pub fn affinity_loss<T: Real>(tape: &mut Tape<T>, logits: Var, gt: &LabelGrid, num_classes: usize) -> Result<Var> {
    let sem = semantic_affinity_loss(tape, logits, gt, num_classes)?;
    let geo = geometric_affinity_loss(tape, logits, gt, num_classes)?;
    Ok(tape.add(sem, geo))
}
