//! Binary masks and the RES / REC / GRES scoring protocol.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    h: usize,
    w: usize,
    bits: Vec<bool>,
}

impl Mask {
    pub fn new(h: usize, w: usize, bits: Vec<bool>) -> Result<Self> {
        if h * w != bits.len() || h == 0 || w == 0 {
            return Err(invalid("Mask::new", format!("{h}x{w} mask with {} bits", bits.len())));
        }
        Ok(Self { h, w, bits })
    }

    pub fn empty(h: usize, w: usize) -> Self {
        Self {
            h,
            w,
            bits: vec![false; h * w],
        }
    }

    pub fn from_fn(h: usize, w: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let bits = (0..h * w).map(|i| f(i / w, i % w)).collect();
        Self { h, w, bits }
    }

    /// Foreground where `p > threshold`; `probs` is `(H, W)`.
    pub fn from_probs(probs: &Tensor, threshold: f64) -> Self {
        let (h, w) = hw(probs);
        Self {
            h,
            w,
            bits: probs.data().iter().map(|&p| p > threshold).collect(),
        }
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.bits[y * self.w + x]
    }

    pub fn set(&mut self, y: usize, x: usize, on: bool) {
        self.bits[y * self.w + x] = on;
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.bits.contains(&true)
    }

    pub fn union_with(&mut self, other: &Mask) {
        assert_eq!((self.h, self.w), (other.h, other.w), "mask dims differ");
        for (a, &b) in self.bits.iter_mut().zip(&other.bits) {
            *a |= b;
        }
    }

    /// `(|A ∩ B|, |A ∪ B|)`.
    pub fn overlap(&self, other: &Mask) -> Result<(usize, usize)> {
        if (self.h, self.w) != (other.h, other.w) {
            return Err(invalid(
                "Mask::overlap",
                format!("{}x{} vs {}x{}", self.h, self.w, other.h, other.w),
            ));
        }
        let (mut i, mut u) = (0, 0);
        for (&a, &b) in self.bits.iter().zip(&other.bits) {
            i += (a && b) as usize;
            u += (a || b) as usize;
        }
        Ok((i, u))
    }

    /// Nearest-neighbour resampling at pixel centers.
    pub fn resize_nearest(&self, h: usize, w: usize) -> Mask {
        if (h, w) == (self.h, self.w) {
            return self.clone();
        }
        Mask::from_fn(h, w, |y, x| {
            let sy = ((2 * y + 1) * self.h / (2 * h)).min(self.h - 1);
            let sx = ((2 * x + 1) * self.w / (2 * w)).min(self.w - 1);
            self.get(sy, sx)
        })
    }

    /// 0/1 values as a `(H, W)` tensor.
    pub fn to_tensor(&self) -> Tensor {
        let data = self.bits.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
        Tensor::new(vec![self.h, self.w], data).expect("mask extents are positive")
    }

    /// Tight inclusive box, `None` when empty.
    pub fn bbox(&self) -> Option<BBox> {
        let mut b: Option<BBox> = None;
        for y in 0..self.h {
            for x in 0..self.w {
                if self.get(y, x) {
                    b = Some(match b {
                        None => BBox { x0: x, y0: y, x1: x, y1: y },
                        Some(b) => BBox {
                            x0: b.x0.min(x),
                            y0: b.y0.min(y),
                            x1: b.x1.max(x),
                            y1: b.y1.max(y),
                        },
                    });
                }
            }
        }
        b
    }
}

fn hw(t: &Tensor) -> (usize, usize) {
    match t.dims() {
        [h, w] => (*h, *w),
        d => panic!("expected an (H, W) map, got {d:?}"),
    }
}

/// Inclusive pixel box `(x0, y0)–(x1, y1)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BBox {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl BBox {
    pub fn area(&self) -> usize {
        (self.x1 - self.x0 + 1) * (self.y1 - self.y0 + 1)
    }

    pub fn iou(&self, other: &BBox) -> f64 {
        let x0 = self.x0.max(other.x0);
        let y0 = self.y0.max(other.y0);
        let x1 = self.x1.min(other.x1);
        let y1 = self.y1.min(other.y1);
        let inter = if x0 <= x1 && y0 <= y1 {
            (x1 - x0 + 1) * (y1 - y0 + 1)
        } else {
            0
        };
        inter as f64 / (self.area() + other.area() - inter) as f64
    }
}

pub fn mask_to_bbox(mask: &Mask) -> Option<BBox> {
    mask.bbox()
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalRecord {
    pub pred_mask: Mask,
    pub gt_mask: Mask,
    pub gt_no_target: bool,
    /// Every predicted token was `[REJ]`.
    pub pred_no_target: bool,
}

/// What one record contributes to the dataset scores.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GresScore {
    pub giou: f64,
    /// `(intersection, union)` pixels added to the cIoU sums; `None` when the
    /// record is excluded.
    pub ciou_terms: Option<(usize, usize)>,
}

/// Generalized-RES scoring of one record.
///
/// A correctly rejected empty target scores 1 and is left out of cIoU. A
/// mask predicted for an empty target scores 0 and its pixels count toward
/// the union. Everything else is plain IoU; a record whose prediction and
/// ground truth are both empty scores 1.
pub fn gres_adjust(r: &EvalRecord) -> Result<GresScore> {
    if r.gt_no_target {
        return Ok(if r.pred_no_target {
            GresScore { giou: 1.0, ciou_terms: None }
        } else {
            GresScore { giou: 0.0, ciou_terms: Some((0, r.pred_mask.count())) }
        });
    }
    let (i, u) = r.pred_mask.overlap(&r.gt_mask)?;
    let giou = if u == 0 { 1.0 } else { i as f64 / u as f64 };
    Ok(GresScore { giou, ciou_terms: Some((i, u)) })
}

fn nonempty(records: &[EvalRecord], op: &'static str) -> Result<()> {
    if records.is_empty() {
        Err(invalid(op, "no records"))
    } else {
        Ok(())
    }
}

/// Summed intersections over summed unions; `None` when the union is empty.
pub fn ciou(records: &[EvalRecord]) -> Result<Option<f64>> {
    nonempty(records, "ciou")?;
    let (mut i, mut u) = (0usize, 0usize);
    for r in records {
        if let Some((ri, ru)) = gres_adjust(r)?.ciou_terms {
            i += ri;
            u += ru;
        }
    }
    Ok((u > 0).then(|| i as f64 / u as f64))
}

/// Mean per-record IoU.
pub fn giou(records: &[EvalRecord]) -> Result<f64> {
    nonempty(records, "giou")?;
    let mut total = 0.0;
    for r in records {
        total += gres_adjust(r)?.giou;
    }
    Ok(total / records.len() as f64)
}

/// Share of empty-target records that were rejected; `None` without any.
pub fn n_acc(records: &[EvalRecord]) -> Option<f64> {
    let empty: Vec<&EvalRecord> = records.iter().filter(|r| r.gt_no_target).collect();
    if empty.is_empty() {
        return None;
    }
    let hits = empty.iter().filter(|r| r.pred_no_target).count();
    Some(hits as f64 / empty.len() as f64)
}

/// Fraction of `(predicted, ground truth)` boxes with IoU strictly above 0.5.
/// A missing prediction is a miss.
pub fn prec_at_05(pairs: &[(Option<BBox>, BBox)]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(invalid("prec_at_05", "no box pairs"));
    }
    let hits = pairs
        .iter()
        .filter(|(p, g)| p.is_some_and(|p| p.iou(g) > 0.5))
        .count();
    Ok(hits as f64 / pairs.len() as f64)
}

/// Box pairs of the records that have a target.
pub fn box_pairs(records: &[EvalRecord]) -> Vec<(Option<BBox>, BBox)> {
    records
        .iter()
        .filter(|r| !r.gt_no_target)
        .filter_map(|r| r.gt_mask.bbox().map(|g| (r.pred_mask.bbox(), g)))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ciou: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub giou: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prec05: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_acc: Option<f64>,
}

impl MetricsReport {
    pub fn from_records(records: &[EvalRecord]) -> Result<Self> {
        nonempty(records, "MetricsReport")?;
        let pairs = box_pairs(records);
        Ok(Self {
            ciou: ciou(records)?,
            giou: Some(giou(records)?),
            prec05: if pairs.is_empty() { None } else { Some(prec_at_05(&pairs)?) },
            n_acc: n_acc(records),
        })
    }

    /// Element-wise mean over reports; a key is kept only if every report has it.
    pub fn mean(reports: &[MetricsReport]) -> Option<Self> {
        if reports.is_empty() {
            return None;
        }
        let avg = |f: fn(&MetricsReport) -> Option<f64>| {
            let vals: Option<Vec<f64>> = reports.iter().map(f).collect();
            vals.map(|v| v.iter().sum::<f64>() / v.len() as f64)
        };
        Some(Self {
            ciou: avg(|r| r.ciou),
            giou: avg(|r| r.giou),
            prec05: avg(|r| r.prec05),
            n_acc: avg(|r| r.n_acc),
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}
