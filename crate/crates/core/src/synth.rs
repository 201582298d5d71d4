//! Synthetic misaligned RGB/infrared pairs.
//!
//! One scene is rendered twice. The infrared image is the reference: objects
//! are flat warm silhouettes on a cool background and ground truth lives in
//! its frame. The RGB image is coloured and textured, and is corrupted with
//! the three misalignment types: a spatial offset, a resolution discrepancy
//! (rendered small then resized back up) and per-object modality deficiency.
//! Optional low-light degradation scales and noises the RGB image.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autograd::Graph;
use crate::error::{Error, Result};
use crate::metrics::{BBox, Detection, DetectionSet, NUM_CLASSES};
use crate::tensor::{FeatureMap, Tensor};

pub const MIN_CANVAS: usize = 8;
pub const MAX_OBJECTS: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MisalignmentSpec {
    /// RGB displacement relative to infrared, pixels.
    pub offset_x: f64,
    pub offset_y: f64,
    /// RGB-to-infrared linear resolution ratio.
    pub resolution_ratio: f64,
    /// Per-object probability of being visible in one modality only.
    pub deficiency_prob: f64,
    pub noise_sigma: f64,
    pub illumination_gain: f64,
}

impl Default for MisalignmentSpec {
    fn default() -> Self {
        Self::neutral()
    }
}

impl MisalignmentSpec {
    pub fn neutral() -> Self {
        Self {
            offset_x: 0.0,
            offset_y: 0.0,
            resolution_ratio: 1.0,
            deficiency_prob: 0.0,
            noise_sigma: 0.0,
            illumination_gain: 1.0,
        }
    }

    /// 5 px offset, 0.75 resolution ratio, 0.2 deficiency.
    pub fn heavy() -> Self {
        Self {
            offset_x: 5.0,
            resolution_ratio: 0.75,
            deficiency_prob: 0.2,
            ..Self::neutral()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let all = [
            self.offset_x,
            self.offset_y,
            self.resolution_ratio,
            self.deficiency_prob,
            self.noise_sigma,
            self.illumination_gain,
        ];
        if all.iter().any(|v| !v.is_finite()) {
            return Err(Error::Validation("misalignment spec has non-finite values".into()));
        }
        if self.resolution_ratio <= 0.0 {
            return Err(Error::Validation("resolution_ratio must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.deficiency_prob) {
            return Err(Error::Validation("deficiency_prob must lie in [0,1]".into()));
        }
        if self.noise_sigma < 0.0 || self.illumination_gain < 0.0 {
            return Err(Error::Validation("degradation parameters must be non-negative".into()));
        }
        Ok(())
    }

    /// Sets one `key=value` field. Returns `false` for keys this spec does
    /// not own so that callers can layer their own keys on the same file.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        let slot = match key {
            "offset_x" => &mut self.offset_x,
            "offset_y" => &mut self.offset_y,
            "resolution_ratio" => &mut self.resolution_ratio,
            "deficiency_prob" => &mut self.deficiency_prob,
            "noise_sigma" => &mut self.noise_sigma,
            "illumination_gain" => &mut self.illumination_gain,
            _ => return Ok(false),
        };
        *slot = value
            .trim()
            .parse()
            .map_err(|_| Error::Config(format!("{key}: cannot parse {value:?} as a number")))?;
        Ok(true)
    }

    pub fn to_kv(&self) -> String {
        format!(
            "offset_x={}\noffset_y={}\nresolution_ratio={}\ndeficiency_prob={}\nnoise_sigma={}\nillumination_gain={}\n",
            self.offset_x,
            self.offset_y,
            self.resolution_ratio,
            self.deficiency_prob,
            self.noise_sigma,
            self.illumination_gain
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Visibility {
    Both,
    RgbOnly,
    IrOnly,
}

impl Visibility {
    pub fn in_rgb(self) -> bool {
        self != Self::IrOnly
    }
    pub fn in_ir(self) -> bool {
        self != Self::RgbOnly
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneObject {
    /// 0: small upright ellipse, 1: large filled box, 2: thin outlined box.
    pub class: usize,
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
    /// Turned by 90 degrees (width and height swapped).
    pub rotated: bool,
    pub thermal: f64,
    pub colour: [f64; 3],
    pub texture_seed: u64,
    pub visibility: Visibility,
}

impl SceneObject {
    pub fn bbox(&self) -> BBox {
        BBox::from_center(self.cx, self.cy, self.w, self.h)
    }

    /// Whether the scene point `(x, y)` is covered.
    pub fn contains(&self, x: f64, y: f64) -> bool {
        let (dx, dy) = (x - self.cx, y - self.cy);
        let (hw, hh) = (self.w / 2.0, self.h / 2.0);
        match self.class {
            0 => (dx / hw).powi(2) + (dy / hh).powi(2) <= 1.0,
            1 => dx.abs() <= hw && dy.abs() <= hh,
            _ => {
                let inside = dx.abs() <= hw && dy.abs() <= hh;
                let core = dx.abs() < hw - 1.5 && dy.abs() < hh - 1.5;
                inside && !core
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub canvas: usize,
    pub objects: Vec<SceneObject>,
}

/// A rendered pair with ground truth in the infrared frame.
#[derive(Clone, Debug)]
pub struct SyntheticPair {
    /// `canvas x canvas x 3`, values in [0, 1].
    pub rgb: FeatureMap,
    /// `canvas x canvas x 1`, values in [0, 1].
    pub ir: FeatureMap,
    pub gt: DetectionSet,
    pub scene: Scene,
}

/// Deterministic for a fixed `(seed, spec, canvas)`.
pub fn generate_pair(seed: u64, spec: &MisalignmentSpec, canvas: usize) -> Result<SyntheticPair> {
    spec.validate()?;
    if canvas < MIN_CANVAS {
        return Err(Error::Validation(format!(
            "canvas of {canvas} px is below the {MIN_CANVAS} px minimum"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scene = sample_scene(&mut rng, spec, canvas);
    let ir = render_ir(&mut rng, &scene);
    let rgb = render_rgb(&mut rng, &scene, spec)?;
    let gt = DetectionSet::new(
        scene
            .objects
            .iter()
            .map(|o| Detection {
                class: o.class,
                bbox: clamp_box(o.bbox(), canvas as f64),
                confidence: 1.0,
            })
            .collect(),
    );
    Ok(SyntheticPair { rgb, ir, gt, scene })
}

fn clamp_box(b: BBox, size: f64) -> BBox {
    BBox::new(
        b.x1.clamp(0.0, size),
        b.y1.clamp(0.0, size),
        b.x2.clamp(0.0, size),
        b.y2.clamp(0.0, size),
    )
}

fn sample_scene(rng: &mut ChaCha8Rng, spec: &MisalignmentSpec, canvas: usize) -> Scene {
    let s = canvas as f64 / 64.0;
    let count = rng.gen_range(1..=MAX_OBJECTS);
    let mut objects: Vec<SceneObject> = Vec::new();
    for _ in 0..count {
        let class = rng.gen_range(0..NUM_CLASSES);
        let (mut w, mut h) = match class {
            0 => (rng.gen_range(4.0..6.5), rng.gen_range(9.0..13.0)),
            1 => (rng.gen_range(12.0..18.0), rng.gen_range(8.0..11.0)),
            _ => (rng.gen_range(8.0..11.0), rng.gen_range(5.0..6.0)),
        };
        let rotated = class != 0 && rng.gen_bool(0.5);
        if rotated {
            std::mem::swap(&mut w, &mut h);
        }
        let (w, h) = ((w * s).max(3.0), (h * s).max(3.0));
        let colour_base = [[0.85, 0.3, 0.25], [0.25, 0.4, 0.85], [0.3, 0.8, 0.3]][class];
        let colour = colour_base.map(|c: f64| (c + rng.gen_range(-0.12..0.12)).clamp(0.0, 1.0));
        let thermal = rng.gen_range(0.55..0.95);
        let texture_seed = rng.gen();
        let deficient = rng.gen_bool(spec.deficiency_prob);
        let rgb_side = rng.gen_bool(0.5);
        let visibility = match (deficient, rgb_side) {
            (false, _) => Visibility::Both,
            (true, true) => Visibility::RgbOnly,
            (true, false) => Visibility::IrOnly,
        };
        // rejection sampling for a free spot with a small gap
        for _ in 0..50 {
            let margin_x = w / 2.0 + 1.0;
            let margin_y = h / 2.0 + 1.0;
            if canvas as f64 <= 2.0 * margin_x || canvas as f64 <= 2.0 * margin_y {
                break;
            }
            let cx = rng.gen_range(margin_x..canvas as f64 - margin_x);
            let cy = rng.gen_range(margin_y..canvas as f64 - margin_y);
            let cand = BBox::from_center(cx, cy, w + 4.0, h + 4.0);
            let free = objects.iter().all(|o| {
                let b = o.bbox();
                cand.x2 <= b.x1 || b.x2 <= cand.x1 || cand.y2 <= b.y1 || b.y2 <= cand.y1
            });
            if free {
                objects.push(SceneObject {
                    class,
                    cx,
                    cy,
                    w,
                    h,
                    rotated,
                    thermal,
                    colour,
                    texture_seed,
                    visibility,
                });
                break;
            }
        }
    }
    Scene { canvas, objects }
}

/// Smooth background `base + amp * ramp` along a random direction.
fn gradient(rng: &mut ChaCha8Rng, n: usize) -> impl Fn(usize, usize) -> f64 {
    let theta: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
    let (c, s) = (theta.cos(), theta.sin());
    let n = n as f64;
    move |i, j| ((j as f64 / n - 0.5) * c + (i as f64 / n - 0.5) * s) + 0.5
}

/// Thermal blur (pixels); thermal sensors resolve edges less sharply than RGB.
const IR_BLUR_SIGMA: f64 = 1.0;
const IR_NOISE_SIGMA: f64 = 0.04;

fn render_ir(rng: &mut ChaCha8Rng, scene: &Scene) -> FeatureMap {
    let n = scene.canvas;
    let scale = n as f64 / 64.0;
    let ramp = gradient(rng, n);
    let base = rng.gen_range(0.1..0.25);
    // warm background sources (pipes, sunlit ground) with no visible object
    let hot: Vec<(BBox, bool, f64)> = (0..2)
        .map(|_| {
            let w = rng.gen_range(4.0..12.0) * scale;
            let h = rng.gen_range(4.0..12.0) * scale;
            let cx = rng.gen_range(0.0..n as f64);
            let cy = rng.gen_range(0.0..n as f64);
            (BBox::from_center(cx, cy, w, h), rng.gen_bool(0.5), rng.gen_range(0.5..0.9))
        })
        .collect();
    let mut sharp = vec![0f64; n * n];
    for i in 0..n {
        for j in 0..n {
            let (x, y) = (j as f64 + 0.5, i as f64 + 0.5);
            let mut v = base + 0.1 * ramp(i, j);
            for (b, round, t) in &hot {
                let inside = if *round {
                    let (cx, cy) = ((b.x1 + b.x2) / 2.0, (b.y1 + b.y2) / 2.0);
                    let (rx, ry) = ((b.x2 - b.x1) / 2.0, (b.y2 - b.y1) / 2.0);
                    ((x - cx) / rx).powi(2) + ((y - cy) / ry).powi(2) <= 1.0
                } else {
                    x >= b.x1 && x <= b.x2 && y >= b.y1 && y <= b.y2
                };
                if inside {
                    v = *t;
                }
            }
            for o in scene.objects.iter().filter(|o| o.visibility.in_ir()) {
                if o.contains(x, y) {
                    v = o.thermal;
                }
            }
            sharp[i * n + j] = v;
        }
    }
    let blurred = gaussian_blur(&sharp, n, IR_BLUR_SIGMA * scale.max(0.5));
    let noise = Normal::new(0.0, IR_NOISE_SIGMA).unwrap();
    let data = blurred.iter().map(|&v| (v + noise.sample(rng)).clamp(0.0, 1.0) as f32).collect();
    Tensor::new(&[n, n, 1], data).unwrap()
}

/// Separable Gaussian blur of a square single-channel image, edges clamped.
fn gaussian_blur(img: &[f64], n: usize, sigma: f64) -> Vec<f64> {
    let r = (3.0 * sigma).ceil() as isize;
    let k: Vec<f64> = (-r..=r).map(|d| (-((d * d) as f64) / (2.0 * sigma * sigma)).exp()).collect();
    let norm: f64 = k.iter().sum();
    let at = |v: isize| v.clamp(0, n as isize - 1) as usize;
    let mut tmp = vec![0f64; n * n];
    for i in 0..n {
        for j in 0..n {
            tmp[i * n + j] = (-r..=r).map(|d| k[(d + r) as usize] * img[i * n + at(j as isize + d)]).sum::<f64>() / norm;
        }
    }
    let mut out = vec![0f64; n * n];
    for i in 0..n {
        for j in 0..n {
            out[i * n + j] = (-r..=r).map(|d| k[(d + r) as usize] * tmp[at(i as isize + d) * n + j]).sum::<f64>() / norm;
        }
    }
    out
}

fn render_rgb(rng: &mut ChaCha8Rng, scene: &Scene, spec: &MisalignmentSpec) -> Result<FeatureMap> {
    let n = scene.canvas;
    let m = ((n as f64 * spec.resolution_ratio).round() as usize).max(1);
    let step = n as f64 / m as f64;
    let ramp = gradient(rng, m);
    let base: [f64; 3] = [rng.gen_range(0.3..0.6), rng.gen_range(0.3..0.6), rng.gen_range(0.3..0.6)];
    // distractors: coloured patches that have no thermal signature
    let clutter: Vec<(BBox, [f64; 3])> = (0..2)
        .map(|_| {
            let w = rng.gen_range(3.0..8.0);
            let h = rng.gen_range(3.0..8.0);
            let cx = rng.gen_range(0.0..n as f64);
            let cy = rng.gen_range(0.0..n as f64);
            let col = [rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0)];
            (BBox::from_center(cx, cy, w, h), col)
        })
        .collect();
    let texture = Normal::new(0.0, 0.03).unwrap();
    let mut data = vec![0f32; m * m * 3];
    for i in 0..m {
        for j in 0..m {
            // scene point seen by this RGB pixel
            let x = (j as f64 + 0.5) * step - spec.offset_x;
            let y = (i as f64 + 0.5) * step - spec.offset_y;
            let mut px = base.map(|b| b + 0.15 * (ramp(i, j) - 0.5));
            for (b, col) in &clutter {
                if x >= b.x1 && x <= b.x2 && y >= b.y1 && y <= b.y2 {
                    px = *col;
                }
            }
            for o in scene.objects.iter().filter(|o| o.visibility.in_rgb()) {
                if o.contains(x, y) {
                    let mut t = ChaCha8Rng::seed_from_u64(o.texture_seed ^ ((i * m + j) as u64));
                    let jitter: f64 = t.gen_range(-0.06..0.06);
                    px = o.colour.map(|c| c + jitter);
                }
            }
            for (k, v) in px.iter().enumerate() {
                data[(i * m + j) * 3 + k] = (v + texture.sample(rng)) as f32;
            }
        }
    }
    let mut img = Tensor::new(&[m, m, 3], data)?;
    if m != n {
        let g = Graph::<f32>::new();
        let r = g.resize_bilinear(g.constant(img), n, n)?;
        img = (*g.value(r)).clone();
    }
    let noise = Normal::new(0.0, spec.noise_sigma.max(0.0)).unwrap();
    let gain = spec.illumination_gain;
    let out: Vec<f32> = img
        .data()
        .iter()
        .map(|&v| {
            let n = if spec.noise_sigma > 0.0 { noise.sample(rng) } else { 0.0 };
            (gain * v as f64 + n).clamp(0.0, 1.0) as f32
        })
        .collect();
    Tensor::new(&[n, n, 3], out)
}

/// Pixel mask of one object as drawn in the infrared (`rgb == false`) or
/// RGB (`rgb == true`) image, before resampling and noise.
pub fn object_mask(obj: &SceneObject, spec: &MisalignmentSpec, canvas: usize, rgb: bool) -> Vec<bool> {
    let (dx, dy) = if rgb { (spec.offset_x, spec.offset_y) } else { (0.0, 0.0) };
    let mut mask = vec![false; canvas * canvas];
    for i in 0..canvas {
        for j in 0..canvas {
            mask[i * canvas + j] = obj.contains(j as f64 + 0.5 - dx, i as f64 + 0.5 - dy);
        }
    }
    mask
}
