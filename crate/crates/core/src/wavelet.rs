//! Single-level orthonormal 2D Haar transform on `H x W x C` maps.
//!
//! For each 2x2 block `[[a, b], [c, d]]` (top row first):
//!
//! ```text
//! ll = (a + b + c + d) / 2    lh = (a + b - c - d) / 2
//! hl = (a - b + c - d) / 2    hh = (a - b - c + d) / 2
//! ```
//!
//! The stacked layout places the four subbands as contiguous channel blocks
//! `[LL | LH | HL | HH]`, each `C` channels wide.

use crate::error::{shape_err, Error, Result};
use crate::tensor::{FeatureMap, Real};

/// The four subbands of one decomposition level, all `(H/2) x (W/2) x C`.
#[derive(Clone, Debug, PartialEq)]
pub struct SubbandSet<T = f32> {
    pub ll: FeatureMap<T>,
    pub lh: FeatureMap<T>,
    pub hl: FeatureMap<T>,
    pub hh: FeatureMap<T>,
    /// Size of the map that was transformed, before any even-padding.
    pub source_height: usize,
    pub source_width: usize,
}

impl<T: Real> SubbandSet<T> {
    /// Wraps four subbands; the source size is taken as exactly twice theirs.
    pub fn new(
        ll: FeatureMap<T>,
        lh: FeatureMap<T>,
        hl: FeatureMap<T>,
        hh: FeatureMap<T>,
    ) -> Result<Self> {
        let shape = ll.hwc()?;
        for (name, b) in [("lh", &lh), ("hl", &hl), ("hh", &hh)] {
            if b.shape() != ll.shape() {
                return shape_err(
                    "SubbandSet::new",
                    format!("{name} is {:?}, ll is {:?}", b.shape(), ll.shape()),
                );
            }
        }
        Ok(Self {
            ll,
            lh,
            hl,
            hh,
            source_height: 2 * shape.0,
            source_width: 2 * shape.1,
        })
    }

    pub fn energy(&self) -> T {
        self.ll.sum_sq() + self.lh.sum_sq() + self.hl.sum_sq() + self.hh.sum_sq()
    }

    /// Rebuilds a set from a `[LL | LH | HL | HH]` stacked map.
    pub fn from_stacked(stacked: &FeatureMap<T>) -> Result<Self> {
        let (h, w, c4) = stacked.hwc()?;
        if c4 % 4 != 0 {
            return Err(Error::Validation(format!(
                "stacked channel count {c4} is not divisible by 4"
            )));
        }
        let c = c4 / 4;
        let block = |k: usize| take_channels(stacked, k * c, c);
        Ok(Self {
            ll: block(0),
            lh: block(1),
            hl: block(2),
            hh: block(3),
            source_height: 2 * h,
            source_width: 2 * w,
        })
    }
}

/// Forward transform. Odd sizes are padded by repeating the last row/column;
/// the original size is kept so [`idwt2`] can crop it back.
pub fn dwt2<T: Real>(x: &FeatureMap<T>) -> Result<SubbandSet<T>> {
    let (h, w, _) = x.hwc()?;
    x.check_finite()?;
    let padded;
    let src = if h % 2 == 1 || w % 2 == 1 {
        padded = pad_to_even(x)?;
        &padded
    } else {
        x
    };
    let mut set = SubbandSet::from_stacked(&haar_forward_stacked(src)?)?;
    set.source_height = h;
    set.source_width = w;
    Ok(set)
}

/// Inverse transform, cropped back to the recorded source size.
pub fn idwt2<T: Real>(s: &SubbandSet<T>) -> Result<FeatureMap<T>> {
    let (h, w, _) = s.ll.hwc()?;
    for (name, b) in [("lh", &s.lh), ("hl", &s.hl), ("hh", &s.hh)] {
        if b.shape() != s.ll.shape() {
            return shape_err(
                "idwt2",
                format!("{name} is {:?}, ll is {:?}", b.shape(), s.ll.shape()),
            );
        }
    }
    let full = haar_inverse_stacked(&stack_subbands(s))?;
    if s.source_height > 2 * h || s.source_width > 2 * w {
        return shape_err(
            "idwt2",
            format!(
                "recorded source {}x{} exceeds reconstructed {}x{}",
                s.source_height,
                s.source_width,
                2 * h,
                2 * w
            ),
        );
    }
    if s.source_height == 2 * h && s.source_width == 2 * w {
        Ok(full)
    } else {
        crop(&full, s.source_height, s.source_width)
    }
}

/// Concatenates the subbands along channels as `[LL | LH | HL | HH]`.
pub fn stack_subbands<T: Real>(s: &SubbandSet<T>) -> FeatureMap<T> {
    concat_channels(&[&s.ll, &s.lh, &s.hl, &s.hh])
}

/// Splits a `4C`-channel stacked map into `(LL, [LH | HL | HH])`.
pub fn split_stacked<T: Real>(x: &FeatureMap<T>) -> Result<(FeatureMap<T>, FeatureMap<T>)> {
    let (_, _, c4) = x.hwc()?;
    if c4 % 4 != 0 {
        return Err(Error::Validation(format!(
            "stacked channel count {c4} is not divisible by 4"
        )));
    }
    let c = c4 / 4;
    Ok((take_channels(x, 0, c), take_channels(x, c, 3 * c)))
}

/// Haar analysis of an even-sized map straight into stacked layout.
pub fn haar_forward_stacked<T: Real>(x: &FeatureMap<T>) -> Result<FeatureMap<T>> {
    let (h, w, c) = x.hwc()?;
    if h % 2 != 0 || w % 2 != 0 {
        return shape_err("haar_forward", format!("odd size {h}x{w}"));
    }
    let (oh, ow) = (h / 2, w / 2);
    let half = T::c(0.5);
    let src = x.data();
    let mut out = vec![T::zero(); oh * ow * 4 * c];
    for oy in 0..oh {
        for ox in 0..ow {
            let r0 = ((2 * oy) * w + 2 * ox) * c;
            let r1 = ((2 * oy + 1) * w + 2 * ox) * c;
            let o = (oy * ow + ox) * 4 * c;
            for ch in 0..c {
                let a = src[r0 + ch];
                let b = src[r0 + c + ch];
                let cc = src[r1 + ch];
                let d = src[r1 + c + ch];
                out[o + ch] = (a + b + cc + d) * half;
                out[o + c + ch] = (a + b - cc - d) * half;
                out[o + 2 * c + ch] = (a - b + cc - d) * half;
                out[o + 3 * c + ch] = (a - b - cc + d) * half;
            }
        }
    }
    FeatureMap::new(&[oh, ow, 4 * c], out)
}

/// Haar synthesis from stacked layout; the exact inverse (and adjoint) of
/// [`haar_forward_stacked`].
pub fn haar_inverse_stacked<T: Real>(s: &FeatureMap<T>) -> Result<FeatureMap<T>> {
    let (h, w, c4) = s.hwc()?;
    if c4 % 4 != 0 {
        return Err(Error::Validation(format!(
            "stacked channel count {c4} is not divisible by 4"
        )));
    }
    let c = c4 / 4;
    let (oh, ow) = (2 * h, 2 * w);
    let half = T::c(0.5);
    let src = s.data();
    let mut out = vec![T::zero(); oh * ow * c];
    for y in 0..h {
        for x in 0..w {
            let i = (y * w + x) * c4;
            let r0 = ((2 * y) * ow + 2 * x) * c;
            let r1 = ((2 * y + 1) * ow + 2 * x) * c;
            for ch in 0..c {
                let ll = src[i + ch];
                let lh = src[i + c + ch];
                let hl = src[i + 2 * c + ch];
                let hh = src[i + 3 * c + ch];
                out[r0 + ch] = (ll + lh + hl + hh) * half;
                out[r0 + c + ch] = (ll + lh - hl - hh) * half;
                out[r1 + ch] = (ll - lh + hl - hh) * half;
                out[r1 + c + ch] = (ll - lh - hl + hh) * half;
            }
        }
    }
    FeatureMap::new(&[oh, ow, c], out)
}

/// Repeats the last row and/or column so both sides are even.
pub fn pad_to_even<T: Real>(x: &FeatureMap<T>) -> Result<FeatureMap<T>> {
    let (h, w, c) = x.hwc()?;
    let (ph, pw) = (h + h % 2, w + w % 2);
    let mut out = Vec::with_capacity(ph * pw * c);
    for y in 0..ph {
        let sy = y.min(h - 1);
        for xx in 0..pw {
            let sx = xx.min(w - 1);
            let i = (sy * w + sx) * c;
            out.extend_from_slice(&x.data()[i..i + c]);
        }
    }
    FeatureMap::new(&[ph, pw, c], out)
}

/// Top-left `height x width` window.
pub fn crop<T: Real>(x: &FeatureMap<T>, height: usize, width: usize) -> Result<FeatureMap<T>> {
    let (h, w, c) = x.hwc()?;
    if height > h || width > w {
        return shape_err("crop", format!("{height}x{width} from {h}x{w}"));
    }
    let mut out = Vec::with_capacity(height * width * c);
    for y in 0..height {
        let i = y * w * c;
        out.extend_from_slice(&x.data()[i..i + width * c]);
    }
    FeatureMap::new(&[height, width, c], out)
}

pub(crate) fn take_channels<T: Real>(x: &FeatureMap<T>, start: usize, len: usize) -> FeatureMap<T> {
    let c = x.last_dim();
    let positions = x.len() / c;
    let mut out = Vec::with_capacity(positions * len);
    for p in 0..positions {
        out.extend_from_slice(&x.data()[p * c + start..p * c + start + len]);
    }
    let mut shape = x.shape().to_vec();
    *shape.last_mut().unwrap() = len;
    FeatureMap::new(&shape, out).expect("channel slice shape")
}

pub(crate) fn concat_channels<T: Real>(parts: &[&FeatureMap<T>]) -> FeatureMap<T> {
    let positions = parts[0].len() / parts[0].last_dim();
    let total: usize = parts.iter().map(|p| p.last_dim()).sum();
    let mut out = Vec::with_capacity(positions * total);
    for p in 0..positions {
        for part in parts {
            let c = part.last_dim();
            out.extend_from_slice(&part.data()[p * c..(p + 1) * c]);
        }
    }
    let mut shape = parts[0].shape().to_vec();
    *shape.last_mut().unwrap() = total;
    FeatureMap::new(&shape, out).expect("channel concat shape")
}
