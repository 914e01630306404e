//! Range-stratified completion metrics.
//!
//! A range `r` keeps voxels whose centre lies less than `r` metres ahead of
//! the volume's near face and within `r / 2` of the lateral centre line,
//! over the full height. Both grids are cropped identically; voxels whose
//! ground truth is [`IGNORE`] are skipped.
//!
//! Ratios with a zero denominator (nothing predicted, nothing present) are
//! reported as 1.

use std::fmt::Write as _;

use crate::error::{Result, SscError};
use crate::voxel::{LabelGrid, EMPTY, IGNORE};

/// `(M+1) x (M+1)` confusion counts, indexed `[gt][pred]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Confusion {
    classes: usize,
    counts: Vec<u64>,
}

impl Confusion {
    pub fn new(classes: usize) -> Self {
        Confusion {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn get(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.classes + pred]
    }

    pub fn add(&mut self, gt: usize, pred: usize) {
        self.counts[gt * self.classes + pred] += 1;
    }

    pub fn merge(&mut self, other: &Confusion) {
        assert_eq!(self.classes, other.classes);
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// `(tp, fp, fn)` for occupied-vs-empty.
    pub fn occupancy_counts(&self) -> (u64, u64, u64) {
        let (mut tp, mut fp, mut fneg) = (0, 0, 0);
        for g in 0..self.classes {
            for p in 0..self.classes {
                let n = self.get(g, p);
                match (g != EMPTY as usize, p != EMPTY as usize) {
                    (true, true) => tp += n,
                    (false, true) => fp += n,
                    (true, false) => fneg += n,
                    (false, false) => {}
                }
            }
        }
        (tp, fp, fneg)
    }

    /// `(tp, fp, fn)` for one class.
    pub fn class_counts(&self, c: usize) -> (u64, u64, u64) {
        let tp = self.get(c, c);
        let fp = (0..self.classes).map(|g| self.get(g, c)).sum::<u64>() - tp;
        let fneg = (0..self.classes).map(|p| self.get(c, p)).sum::<u64>() - tp;
        (tp, fp, fneg)
    }
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        1.0
    } else {
        num as f64 / den as f64
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RangeMetrics {
    pub range_m: f64,
    pub iou: f64,
    pub precision: f64,
    pub recall: f64,
    /// IoU of semantic classes `1..=M`; `None` when a class is absent from
    /// both grids within the range.
    pub class_iou: Vec<Option<f64>>,
    pub miou: f64,
}

impl RangeMetrics {
    pub fn from_confusion(range_m: f64, conf: &Confusion) -> Self {
        let (tp, fp, fneg) = conf.occupancy_counts();
        let class_iou: Vec<Option<f64>> = (1..conf.classes())
            .map(|c| {
                let (tp, fp, fneg) = conf.class_counts(c);
                (tp + fp + fneg > 0).then(|| ratio(tp, tp + fp + fneg))
            })
            .collect();
        let present: Vec<f64> = class_iou.iter().flatten().copied().collect();
        let miou = if present.is_empty() {
            1.0
        } else {
            present.iter().sum::<f64>() / present.len() as f64
        };
        RangeMetrics {
            range_m,
            iou: ratio(tp, tp + fp + fneg),
            precision: ratio(tp, tp + fp),
            recall: ratio(tp, tp + fneg),
            class_iou,
            miou,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub ranges: Vec<RangeMetrics>,
}

impl MetricsReport {
    pub fn from_confusions(per_range: &[(f64, Confusion)]) -> Self {
        MetricsReport {
            ranges: per_range.iter().map(|(r, c)| RangeMetrics::from_confusion(*r, c)).collect(),
        }
    }

    /// Whitespace-separated table, one row per range, values in percent.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let nc = self.ranges.first().map_or(0, |r| r.class_iou.len());
        let _ = write!(out, "{:>8} {:>8} {:>9} {:>8} {:>8}", "range_m", "IoU", "precision", "recall", "mIoU");
        for c in 1..=nc {
            let _ = write!(out, " {:>8}", format!("class_{c}"));
        }
        out.push('\n');
        for r in &self.ranges {
            let _ = write!(
                out,
                "{:>8.2} {:>8.2} {:>9.2} {:>8.2} {:>8.2}",
                r.range_m,
                100.0 * r.iou,
                100.0 * r.precision,
                100.0 * r.recall,
                100.0 * r.miou
            );
            for c in &r.class_iou {
                match c {
                    Some(v) => {
                        let _ = write!(out, " {:>8.2}", 100.0 * v);
                    }
                    None => {
                        let _ = write!(out, " {:>8}", "n/a");
                    }
                }
            }
            out.push('\n');
        }
        out
    }
}

/// Voxel membership mask of one range.
pub fn range_mask(dims: [usize; 3], voxel_size: f64, range_m: f64) -> Result<Vec<bool>> {
    let ahead = dims[0] as f64 * voxel_size;
    let lateral = dims[1] as f64 * voxel_size;
    let tol = 1e-9 * voxel_size.max(1.0);
    if !(range_m > 0.0) || range_m > ahead + tol || range_m > lateral + tol {
        return Err(SscError::invalid(format!(
            "range {range_m} m outside the {ahead} x {lateral} m volume"
        )));
    }
    let mut mask = Vec::with_capacity(dims.iter().product());
    for i in 0..dims[0] {
        let x = (i as f64 + 0.5) * voxel_size;
        for j in 0..dims[1] {
            let y = (j as f64 + 0.5) * voxel_size - lateral / 2.0;
            let inside = x < range_m && y.abs() < range_m / 2.0;
            mask.extend(std::iter::repeat_n(inside, dims[2]));
        }
    }
    Ok(mask)
}

/// Confusion matrix per range.
pub fn confusion_by_range(
    pred: &LabelGrid,
    gt: &LabelGrid,
    num_classes: usize,
    ranges: &[f64],
) -> Result<Vec<(f64, Confusion)>> {
    if pred.dims() != gt.dims() {
        return Err(SscError::Shape {
            name: "prediction grid".into(),
            expected: gt.dims().to_vec(),
            found: pred.dims().to_vec(),
        });
    }
    let check = |l: u8, what: &str| -> Result<()> {
        if l != IGNORE && l as usize >= num_classes {
            Err(SscError::invalid(format!("{what} label {l} outside {num_classes} classes")))
        } else {
            Ok(())
        }
    };
    let mut out = Vec::with_capacity(ranges.len());
    for &r in ranges {
        let mask = range_mask(gt.dims(), gt.voxel_size(), r)?;
        let mut conf = Confusion::new(num_classes);
        for ((&g, &p), &inside) in gt.labels().iter().zip(pred.labels()).zip(&mask) {
            check(g, "ground-truth")?;
            check(p, "predicted")?;
            if !inside || g == IGNORE {
                continue;
            }
            let p = if p == IGNORE { EMPTY } else { p };
            conf.add(g as usize, p as usize);
        }
        out.push((r, conf));
    }
    Ok(out)
}

pub fn evaluate(pred: &LabelGrid, gt: &LabelGrid, num_classes: usize, ranges: &[f64]) -> Result<MetricsReport> {
    Ok(MetricsReport::from_confusions(&confusion_by_range(pred, gt, num_classes, ranges)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid(labels: Vec<u8>) -> LabelGrid {
        LabelGrid::new([2, 2, 1], [0.0; 3], 1.0, labels).unwrap()
    }

    #[test]
    fn identity_is_perfect() {
        let g = grid(vec![0, 1, 2, 1]);
        let r = evaluate(&g, &g, 3, &[2.0]).unwrap();
        let m = &r.ranges[0];
        assert_eq!((m.iou, m.precision, m.recall, m.miou), (1.0, 1.0, 1.0, 1.0));
    }

    #[test]
    fn three_vs_three_overlap() {
        // cells a,b,c,d = 0..4; pred {a,b,c}, gt {b,c,d}
        let pred = grid(vec![1, 1, 1, 0]);
        let gt = grid(vec![0, 1, 1, 1]);
        let m = &evaluate(&pred, &gt, 2, &[2.0]).unwrap().ranges[0];
        assert_eq!(m.iou, 0.5);
        assert_eq!(m.precision, 2.0 / 3.0);
        assert_eq!(m.recall, 2.0 / 3.0);
        assert_eq!(m.miou, 0.5);
    }

    #[test]
    fn range_beyond_volume_rejected() {
        let g = grid(vec![0; 4]);
        assert!(evaluate(&g, &g, 2, &[2.5]).is_err());
        assert!(evaluate(&g, &g, 2, &[0.0]).is_err());
    }

    #[test]
    fn swapping_inputs_swaps_precision_and_recall() {
        let a = grid(vec![1, 1, 0, 2]);
        let b = grid(vec![0, 1, 1, 1]);
        let ab = &evaluate(&a, &b, 3, &[2.0]).unwrap().ranges[0];
        let ba = &evaluate(&b, &a, 3, &[2.0]).unwrap().ranges[0];
        assert_eq!(ab.iou, ba.iou);
        assert_eq!(ab.precision, ba.recall);
        assert_eq!(ab.recall, ba.precision);
    }

    #[test]
    fn ignored_voxels_are_skipped() {
        let pred = grid(vec![1, 1, 1, 1]);
        let gt = grid(vec![IGNORE, 1, IGNORE, 1]);
        let m = &evaluate(&pred, &gt, 2, &[2.0]).unwrap().ranges[0];
        assert_eq!((m.iou, m.precision), (1.0, 1.0));
    }

    #[test]
    fn range_mask_crops_ahead_and_lateral() {
        let mask = range_mask([4, 4, 1], 1.0, 2.0).unwrap();
        let kept: Vec<usize> = (0..16).filter(|&i| mask[i]).collect();
        // rows i = 0, 1 and lateral columns j = 1, 2
        assert_eq!(kept, vec![1, 2, 5, 6]);
    }

    #[test]
    fn text_layout() {
        let g = grid(vec![0, 1, 2, 1]);
        let text = evaluate(&g, &g, 4, &[1.0, 2.0]).unwrap().to_text();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 3);
        assert!(lines[0].split_whitespace().eq(["range_m", "IoU", "precision", "recall", "mIoU", "class_1", "class_2", "class_3"]));
        assert!(lines[2].split_whitespace().eq(["2.00", "100.00", "100.00", "100.00", "100.00", "100.00", "100.00", "n/a"]));
    }
}
