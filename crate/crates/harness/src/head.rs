//! Targets, loss and decoding for the centre-heatmap head.
//!
//! Each object puts a Gaussian peak (exactly 1 at its centre cell) on its
//! class channel; the centre cell also regresses `ln(size / stride)` and the
//! sub-cell offset of the true centre. Loss = penalty-reduced focal loss on
//! the heatmap + L1 on size + L1 on offset, all normalised by the object
//! count.

use wmnet_core::autograd::{Graph, Var};
use wmnet_core::metrics::{BBox, Detection, DetectionSet, NUM_CLASSES};
use wmnet_core::tensor::{Real, Tensor};

use crate::error::{Error, Result};
use crate::model::{HEAD_CHANNELS, HEAD_STRIDE};

pub const FOCAL_ALPHA: i32 = 2;
pub const FOCAL_BETA: i32 = 4;
pub const SIZE_WEIGHT: f64 = 1.0;
pub const OFFSET_WEIGHT: f64 = 1.0;
pub const MAX_DETECTIONS: usize = 32;
pub const MIN_SCORE: f64 = 0.01;

#[derive(Clone, Debug, PartialEq)]
pub struct CentreTarget {
    /// Flat cell index `y * width + x`.
    pub cell: usize,
    pub log_size: [f64; 2],
    pub offset: [f64; 2],
}

#[derive(Clone, Debug, PartialEq)]
pub struct Targets {
    pub height: usize,
    pub width: usize,
    /// `height x width x NUM_CLASSES`.
    pub heat: Vec<f64>,
    pub centres: Vec<CentreTarget>,
}

impl Targets {
    pub fn build(gt: &DetectionSet, canvas: usize) -> Result<Self> {
        gt.validate()?;
        let s = HEAD_STRIDE as f64;
        let (height, width) = (canvas / HEAD_STRIDE, canvas / HEAD_STRIDE);
        let mut heat = vec![0.0f64; height * width * NUM_CLASSES];
        let mut centres = Vec::new();
        for d in &gt.items {
            let (cx, cy) = d.bbox.center();
            let (bw, bh) = (d.bbox.x2 - d.bbox.x1, d.bbox.y2 - d.bbox.y1);
            if bw <= 0.0 || bh <= 0.0 {
                continue;
            }
            let (gx, gy) = (cx / s, cy / s);
            let ix = (gx.floor() as usize).min(width - 1);
            let iy = (gy.floor() as usize).min(height - 1);
            let (sx, sy) = ((bw / s / 6.0).max(0.5), (bh / s / 6.0).max(0.5));
            for y in 0..height {
                for x in 0..width {
                    let dx = x as f64 - ix as f64;
                    let dy = y as f64 - iy as f64;
                    let v = (-(dx * dx) / (2.0 * sx * sx) - (dy * dy) / (2.0 * sy * sy)).exp();
                    let slot = &mut heat[(y * width + x) * NUM_CLASSES + d.class];
                    *slot = slot.max(v);
                }
            }
            centres.push(CentreTarget {
                cell: iy * width + ix,
                log_size: [(bw / s).ln(), (bh / s).ln()],
                offset: [gx - ix as f64, gy - iy as f64],
            });
        }
        Ok(Self {
            height,
            width,
            heat,
            centres,
        })
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossParts {
    pub heat: f64,
    pub size: f64,
    pub offset: f64,
}

impl LossParts {
    pub fn total(&self) -> f64 {
        self.heat + SIZE_WEIGHT * self.size + OFFSET_WEIGHT * self.offset
    }
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Loss value and gradient w.r.t. the raw head map, in `f64`.
pub fn loss_and_grad(raw: &[f64], t: &Targets) -> (LossParts, Vec<f64>) {
    let n = t.height * t.width;
    let norm = t.centres.len().max(1) as f64;
    let mut grad = vec![0.0; raw.len()];
    let mut parts = LossParts::default();
    for cell in 0..n {
        for k in 0..NUM_CLASSES {
            let idx = cell * HEAD_CHANNELS + k;
            let x = raw[idx];
            let y = t.heat[cell * NUM_CLASSES + k];
            let p = sigmoid(x);
            let (log_p, log_q) = (-softplus(-x), -softplus(x));
            if y >= 1.0 {
                let q = 1.0 - p;
                parts.heat -= q.powi(FOCAL_ALPHA) * log_p;
                grad[idx] = q * q * (2.0 * p * log_p - q) / norm;
            } else {
                let w = (1.0 - y).powi(FOCAL_BETA);
                parts.heat -= w * p.powi(FOCAL_ALPHA) * log_q;
                grad[idx] = -w * (2.0 * p * p * (1.0 - p) * log_q - p * p * p) / norm;
            }
        }
    }
    parts.heat /= norm;
    for c in &t.centres {
        let base = c.cell * HEAD_CHANNELS;
        for a in 0..2 {
            let ds = raw[base + 3 + a] - c.log_size[a];
            parts.size += ds.abs() / norm;
            grad[base + 3 + a] += SIZE_WEIGHT * ds.signum() / norm;
            let d_o = raw[base + 5 + a] - c.offset[a];
            parts.offset += d_o.abs() / norm;
            grad[base + 5 + a] += OFFSET_WEIGHT * d_o.signum() / norm;
        }
    }
    (parts, grad)
}

/// Scalar detection loss as a graph node.
pub fn detection_loss<T: Real>(g: &Graph<T>, raw: Var, t: &Targets) -> Result<(Var, LossParts)> {
    let v = g.value(raw);
    if v.shape() != [t.height, t.width, HEAD_CHANNELS] {
        return Err(Error::Format(format!(
            "head map {:?} does not match targets {}x{}",
            v.shape(),
            t.height,
            t.width
        )));
    }
    let raw64: Vec<f64> = v.data().iter().map(|x| x.f64()).collect();
    let (parts, grad) = loss_and_grad(&raw64, t);
    let shape = v.shape().to_vec();
    let grad: Vec<T> = grad.into_iter().map(T::c).collect();
    let out = Tensor::new(&[1], vec![T::c(parts.total())])?;
    let node = g.push(
        out,
        &[raw],
        Box::new(move |gy| {
            let s = gy.data()[0];
            vec![Some(Tensor::new(&shape, grad.iter().map(|&v| v * s).collect()).unwrap())]
        }),
    );
    Ok((node, parts))
}

/// Peaks of the sigmoid heatmap (3x3 local maxima), highest first.
pub fn decode<T: Real>(raw: &Tensor<T>, canvas: usize) -> Result<DetectionSet> {
    let (h, w, c) = raw.hwc()?;
    if c != HEAD_CHANNELS {
        return Err(Error::Format(format!("head map has {c} channels")));
    }
    let s = HEAD_STRIDE as f64;
    let at = |y: usize, x: usize, k: usize| raw.data()[(y * w + x) * c + k].f64();
    let mut found = Vec::new();
    for y in 0..h {
        for x in 0..w {
            for k in 0..NUM_CLASSES {
                let v = at(y, x, k);
                let mut peak = true;
                for ny in y.saturating_sub(1)..(y + 2).min(h) {
                    for nx in x.saturating_sub(1)..(x + 2).min(w) {
                        if (ny, nx) != (y, x) && at(ny, nx, k) > v {
                            peak = false;
                        }
                    }
                }
                let score = sigmoid(v);
                if !peak || score < MIN_SCORE {
                    continue;
                }
                let cx = (x as f64 + at(y, x, 5)) * s;
                let cy = (y as f64 + at(y, x, 6)) * s;
                let bw = at(y, x, 3).clamp(-4.0, 4.0).exp() * s;
                let bh = at(y, x, 4).clamp(-4.0, 4.0).exp() * s;
                let b = BBox::from_center(cx, cy, bw, bh);
                let lim = canvas as f64;
                found.push(Detection {
                    class: k,
                    bbox: BBox::new(b.x1.clamp(0.0, lim), b.y1.clamp(0.0, lim), b.x2.clamp(0.0, lim), b.y2.clamp(0.0, lim)),
                    confidence: score.clamp(0.0, 1.0),
                });
            }
        }
    }
    found.sort_by(|a, b| b.confidence.total_cmp(&a.confidence));
    found.truncate(MAX_DETECTIONS);
    Ok(DetectionSet::new(found))
}

/// Head map that decodes exactly to `gt` (confidence ~1); a debug hook for
/// checking the evaluation path end to end.
pub fn encode_ground_truth(gt: &DetectionSet, canvas: usize) -> Result<Tensor<f32>> {
    let t = Targets::build(gt, canvas)?;
    let mut raw = vec![-20.0f32; t.height * t.width * HEAD_CHANNELS];
    for (d, c) in gt.items.iter().zip(&t.centres) {
        let base = c.cell * HEAD_CHANNELS;
        raw[base + d.class] = 20.0;
        raw[base + 3] = c.log_size[0] as f32;
        raw[base + 4] = c.log_size[1] as f32;
        raw[base + 5] = c.offset[0] as f32;
        raw[base + 6] = c.offset[1] as f32;
    }
    Ok(Tensor::new(&[t.height, t.width, HEAD_CHANNELS], raw)?)
}
