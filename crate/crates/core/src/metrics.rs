//! Detection boxes and mean average precision.
//!
//! Protocol: per class and IoU threshold, predictions from all images are
//! sorted by confidence (ties keep input order); each one is matched to the
//! unmatched ground-truth box of the same image with the highest IoU, if that
//! IoU reaches the threshold. AP is the area under the precision envelope
//! (all-point interpolation).

use crate::error::{Error, Result};

pub const NUM_CLASSES: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        Self { x1, y1, x2, y2 }
    }

    pub fn from_center(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        Self::new(cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0)
    }

    pub fn area(&self) -> f64 {
        (self.x2 - self.x1).max(0.0) * (self.y2 - self.y1).max(0.0)
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.x1 + self.x2) / 2.0, (self.y1 + self.y2) / 2.0)
    }

    pub fn is_valid(&self) -> bool {
        [self.x1, self.y1, self.x2, self.y2].iter().all(|v| v.is_finite())
            && self.x1 <= self.x2
            && self.y1 <= self.y2
    }
}

/// Intersection over union; zero when either box has no area.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let (aa, ab) = (a.area(), b.area());
    if aa <= 0.0 || ab <= 0.0 {
        return 0.0;
    }
    let w = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let h = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = w * h;
    inter / (aa + ab - inter)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Detection {
    pub class: usize,
    pub bbox: BBox,
    pub confidence: f64,
}

/// Boxes of one image, in infrared-frame pixels.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct DetectionSet {
    pub items: Vec<Detection>,
}

impl DetectionSet {
    pub fn new(items: Vec<Detection>) -> Self {
        Self { items }
    }

    pub fn validate(&self) -> Result<()> {
        for d in &self.items {
            if !d.bbox.is_valid() {
                return Err(Error::Validation(format!("malformed box {:?}", d.bbox)));
            }
            if !(0.0..=1.0).contains(&d.confidence) {
                return Err(Error::Validation(format!("confidence {} outside [0,1]", d.confidence)));
            }
            if d.class >= NUM_CLASSES {
                return Err(Error::Validation(format!("class {} out of range", d.class)));
            }
        }
        Ok(())
    }
}

/// IoU thresholds 0.50, 0.55, ..., 0.95.
pub fn coco_thresholds() -> Vec<f64> {
    (0..10).map(|i| 0.5 + 0.05 * i as f64).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct MapReport {
    /// mAP at IoU 0.5.
    pub map50: f64,
    /// mAP averaged over all requested thresholds.
    pub map: f64,
    /// Per-class AP at 0.5; `None` for classes absent from both sides.
    pub ap50: Vec<Option<f64>>,
    /// Per-class AP averaged over thresholds.
    pub ap: Vec<Option<f64>>,
}

/// Greedy confidence-ordered matching of one class at one threshold.
/// Returns the true-positive flag of each prediction in ranked order.
pub fn match_class(
    preds: &[(usize, Detection)],
    gts: &[Vec<BBox>],
    threshold: f64,
) -> Vec<bool> {
    let mut order: Vec<usize> = (0..preds.len()).collect();
    order.sort_by(|&a, &b| preds[b].1.confidence.total_cmp(&preds[a].1.confidence));
    let mut taken: Vec<Vec<bool>> = gts.iter().map(|g| vec![false; g.len()]).collect();
    order
        .iter()
        .map(|&i| {
            let (img, det) = &preds[i];
            let mut best: Option<(usize, f64)> = None;
            for (j, gt) in gts[*img].iter().enumerate() {
                if taken[*img][j] {
                    continue;
                }
                let v = iou(&det.bbox, gt);
                if v >= threshold && best.is_none_or(|(_, b)| v > b) {
                    best = Some((j, v));
                }
            }
            match best {
                Some((j, _)) => {
                    taken[*img][j] = true;
                    true
                }
                None => false,
            }
        })
        .collect()
}

/// All-point interpolated AP from ranked true-positive flags.
pub fn average_precision(tp: &[bool], num_gt: usize) -> f64 {
    if num_gt == 0 {
        return 0.0;
    }
    let mut precision = Vec::with_capacity(tp.len());
    let mut recall = Vec::with_capacity(tp.len());
    let mut hits = 0usize;
    for (k, &t) in tp.iter().enumerate() {
        hits += t as usize;
        precision.push(hits as f64 / (k + 1) as f64);
        recall.push(hits as f64 / num_gt as f64);
    }
    for k in (0..precision.len().saturating_sub(1)).rev() {
        precision[k] = precision[k].max(precision[k + 1]);
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (p, r) in precision.iter().zip(&recall) {
        if *r > prev_recall {
            ap += (r - prev_recall) * p;
            prev_recall = *r;
        }
    }
    ap
}

/// Per-class AP at IoU 0.5 and averaged over `thresholds`.
pub fn compute_map(preds: &[DetectionSet], gts: &[DetectionSet], thresholds: &[f64]) -> Result<MapReport> {
    if preds.len() != gts.len() {
        return Err(Error::Validation(format!(
            "{} prediction sets for {} images",
            preds.len(),
            gts.len()
        )));
    }
    if thresholds.is_empty() {
        return Err(Error::Validation("no IoU thresholds".into()));
    }
    for s in preds.iter().chain(gts) {
        s.validate()?;
    }
    let mut ap50 = vec![None; NUM_CLASSES];
    let mut ap = vec![None; NUM_CLASSES];
    for class in 0..NUM_CLASSES {
        let cp: Vec<(usize, Detection)> = preds
            .iter()
            .enumerate()
            .flat_map(|(i, s)| s.items.iter().filter(|d| d.class == class).map(move |d| (i, *d)))
            .collect();
        let cg: Vec<Vec<BBox>> = gts
            .iter()
            .map(|s| s.items.iter().filter(|d| d.class == class).map(|d| d.bbox).collect())
            .collect();
        let num_gt: usize = cg.iter().map(Vec::len).sum();
        if num_gt == 0 && cp.is_empty() {
            continue;
        }
        let per_t: Vec<f64> = thresholds
            .iter()
            .map(|&t| average_precision(&match_class(&cp, &cg, t), num_gt))
            .collect();
        ap[class] = Some(per_t.iter().sum::<f64>() / per_t.len() as f64);
        ap50[class] = Some(average_precision(&match_class(&cp, &cg, 0.5), num_gt));
    }
    let mean = |v: &[Option<f64>]| {
        let xs: Vec<f64> = v.iter().flatten().copied().collect();
        if xs.is_empty() {
            0.0
        } else {
            xs.iter().sum::<f64>() / xs.len() as f64
        }
    };
    Ok(MapReport {
        map50: mean(&ap50),
        map: mean(&ap),
        ap50,
        ap,
    })
}
