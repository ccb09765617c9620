//! Bounding-box and context ROI extraction, and flip augmentation.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

use super::AnnotatedImage;

/// Context boxes are this many times the bounding box, same center.
pub const CONTEXT_FACTOR: f64 = 1.6;

/// Output sizes of the three crops.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RoiGeometry {
    pub bbox: usize,
    pub context: usize,
    pub mask: usize,
}

/// One training/evaluation unit.
#[derive(Debug, Clone, PartialEq)]
pub struct RoiSample<T: Scalar> {
    pub id: String,
    /// `b×b` bounding-box crop.
    pub bbox_roi: Tensor<T>,
    /// `S×S` context crop.
    pub context_roi: Tensor<T>,
    /// `M×M` binary mask over the bounding box.
    pub mask_roi: Tensor<T>,
    pub label: usize,
}

impl<T: Scalar> RoiSample<T> {
    /// Checks extents, intensity range, binary non-empty mask and label.
    pub fn validate(&self, g: &RoiGeometry) -> Result<()> {
        let want = [
            (&self.bbox_roi, g.bbox, "bbox_roi"),
            (&self.context_roi, g.context, "context_roi"),
            (&self.mask_roi, g.mask, "mask_roi"),
        ];
        for (t, n, name) in want {
            if t.shape() != [n, n] {
                return Err(Error::shape(format!("{}: {name} is {:?}, expected {n}×{n}", self.id, t.shape())));
            }
        }
        let in_unit = |t: &Tensor<T>| t.data().iter().all(|v| (0.0..=1.0).contains(&v.as_f64()));
        if !in_unit(&self.bbox_roi) || !in_unit(&self.context_roi) {
            return Err(Error::Contract(format!("{}: ROI intensities outside [0, 1]", self.id)));
        }
        if self.mask_roi.data().iter().any(|&v| v != T::zero() && v != T::one()) {
            return Err(Error::Contract(format!("{}: mask_roi is not binary", self.id)));
        }
        if self.mask_roi.data().iter().all(|&v| v == T::zero()) {
            return Err(Error::Contract(format!("{}: mask_roi is empty", self.id)));
        }
        if self.label > 1 {
            return Err(Error::Contract(format!("{}: label {} is not 0 or 1", self.id, self.label)));
        }
        Ok(())
    }
}

/// Axis-aligned box with integer origin and extents, half-open.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PixelBox {
    pub y0: usize,
    pub x0: usize,
    pub height: usize,
    pub width: usize,
}

/// Tight bounding box of the non-zero pixels of an `H×W` mask.
pub fn bounding_box<T: Scalar>(mask: &Tensor<T>) -> Option<PixelBox> {
    let w = mask.shape()[1];
    let (mut y0, mut x0, mut y1, mut x1) = (usize::MAX, usize::MAX, 0, 0);
    for (i, &v) in mask.data().iter().enumerate() {
        if v != T::zero() {
            let (y, x) = (i / w, i % w);
            y0 = y0.min(y);
            x0 = x0.min(x);
            y1 = y1.max(y + 1);
            x1 = x1.max(x + 1);
        }
    }
    (y0 != usize::MAX).then(|| PixelBox { y0, x0, height: y1 - y0, width: x1 - x0 })
}

/// Context box `(y0, x0, height, width)` in image coordinates: the
/// bounding box scaled about its center. May extend past the image.
pub fn context_box(b: &PixelBox) -> (f64, f64, f64, f64) {
    let (h, w) = (b.height as f64 * CONTEXT_FACTOR, b.width as f64 * CONTEXT_FACTOR);
    let cy = b.y0 as f64 + b.height as f64 / 2.0;
    let cx = b.x0 as f64 + b.width as f64 / 2.0;
    (cy - h / 2.0, cx - w / 2.0, h, w)
}

/// Bilinear sampling of an `out×out` grid over a box given relative to the
/// integer anchor `(ay, ax)`. Coordinates outside the image are clamped,
/// i.e. edges are replicated.
#[allow(clippy::too_many_arguments)]
fn bilinear_crop<T: Scalar>(
    img: &Tensor<T>,
    ay: usize,
    ax: usize,
    oy: f64,
    ox: f64,
    h: f64,
    w: f64,
    out: usize,
) -> Tensor<T> {
    let (ih, iw) = (img.shape()[0] as i64, img.shape()[1] as i64);
    let d = img.data();
    let axis = |anchor: usize, off: f64, len: f64, i: usize| {
        let local = off + (i as f64 + 0.5) * len / out as f64 - 0.5;
        let f = local.floor();
        (anchor as i64 + f as i64, local - f)
    };
    let at = |y: i64, x: i64| d[(y.clamp(0, ih - 1) * iw + x.clamp(0, iw - 1)) as usize].as_f64();
    let mut data = Vec::with_capacity(out * out);
    for i in 0..out {
        let (y, fy) = axis(ay, oy, h, i);
        for j in 0..out {
            let (x, fx) = axis(ax, ox, w, j);
            let top = at(y, x) * (1.0 - fx) + at(y, x + 1) * fx;
            let bottom = at(y + 1, x) * (1.0 - fx) + at(y + 1, x + 1) * fx;
            data.push(T::c(top * (1.0 - fy) + bottom * fy));
        }
    }
    Tensor::new(&[out, out], data).expect("crop extents")
}

/// Center-aligned nearest sampling of a box lying inside the image.
fn nearest_crop<T: Scalar>(img: &Tensor<T>, b: &PixelBox, out: usize) -> Tensor<T> {
    let w = img.shape()[1];
    let mut data = Vec::with_capacity(out * out);
    for i in 0..out {
        let y = b.y0 + (2 * i + 1) * b.height / (2 * out);
        for j in 0..out {
            let x = b.x0 + (2 * j + 1) * b.width / (2 * out);
            data.push(img.data()[y * w + x]);
        }
    }
    Tensor::new(&[out, out], data).expect("crop extents")
}

/// Crops the bounding box (bilinear, `bbox`), the 1.6× context box
/// (bilinear, `context`) and the mask inside the bounding box (nearest,
/// `mask`).
pub fn extract_rois<T: Scalar>(img: &AnnotatedImage<T>, g: &RoiGeometry) -> Result<RoiSample<T>> {
    let b = bounding_box(&img.mask).ok_or_else(|| Error::Contract(format!("{}: mask is empty", img.id)))?;
    let (bh, bw) = (b.height as f64, b.width as f64);
    let bbox_roi = bilinear_crop(&img.image, b.y0, b.x0, 0.0, 0.0, bh, bw, g.bbox);
    // Context offsets are taken relative to the integer bbox origin so a
    // shifted mass reproduces the crop exactly.
    let (ch, cw) = (bh * CONTEXT_FACTOR, bw * CONTEXT_FACTOR);
    let context_roi = bilinear_crop(&img.image, b.y0, b.x0, (bh - ch) / 2.0, (bw - cw) / 2.0, ch, cw, g.context);
    let mask_roi = nearest_crop(&img.mask, &b, g.mask).map(|v| if v != T::zero() { T::one() } else { T::zero() });
    Ok(RoiSample { id: img.id.clone(), bbox_roi, context_roi, mask_roi, label: img.label })
}

/// Bounding-box and context crops of an unannotated image taken to be its
/// own bounding box. Edges are replicated where the context box overhangs.
pub fn whole_image_crops<T: Scalar>(image: &Tensor<T>, g: &RoiGeometry) -> Result<(Tensor<T>, Tensor<T>)> {
    if image.rank() != 2 || image.numel() == 0 {
        return Err(Error::shape(format!("expected a non-empty H×W image, got {:?}", image.shape())));
    }
    let (h, w) = (image.shape()[0] as f64, image.shape()[1] as f64);
    let bbox = bilinear_crop(image, 0, 0, 0.0, 0.0, h, w, g.bbox);
    let (ch, cw) = (h * CONTEXT_FACTOR, w * CONTEXT_FACTOR);
    let context = bilinear_crop(image, 0, 0, (h - ch) / 2.0, (w - cw) / 2.0, ch, cw, g.context);
    Ok((bbox, context))
}

fn flip<T: Scalar>(t: &Tensor<T>, horizontal: bool, vertical: bool) -> Tensor<T> {
    let (h, w) = (t.shape()[0], t.shape()[1]);
    let mut data = Vec::with_capacity(h * w);
    for y in 0..h {
        let sy = if vertical { h - 1 - y } else { y };
        for x in 0..w {
            let sx = if horizontal { w - 1 - x } else { x };
            data.push(t.data()[sy * w + sx]);
        }
    }
    Tensor::new(t.shape(), data).expect("same extents")
}

/// Flips one sample consistently across all three crops.
pub fn flip_sample<T: Scalar>(s: &RoiSample<T>, horizontal: bool, vertical: bool) -> RoiSample<T> {
    RoiSample {
        id: s.id.clone(),
        bbox_roi: flip(&s.bbox_roi, horizontal, vertical),
        context_roi: flip(&s.context_roi, horizontal, vertical),
        mask_roi: flip(&s.mask_roi, horizontal, vertical),
        label: s.label,
    }
}

/// Identity, horizontal, vertical and both flips, ids suffixed
/// `:o`, `:h`, `:v`, `:hv`.
pub fn augment_flips<T: Scalar>(s: &RoiSample<T>) -> Vec<RoiSample<T>> {
    [(false, false, "o"), (true, false, "h"), (false, true, "v"), (true, true, "hv")]
        .into_iter()
        .map(|(h, v, tag)| RoiSample { id: format!("{}:{tag}", s.id), ..flip_sample(s, h, v) })
        .collect()
}
