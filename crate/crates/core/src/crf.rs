//! Dense CRF mean-field inference as a differentiable layer, and the CRF
//! energy terms of the segmentation loss.
//!
//! The pairwise potential between pixels `p` and `q` is
//! `μ(l_p, l_q) · (w_s·k_s(p, q) + w_b·k_b(p, q))` with a spatial Gaussian
//! `k_s` and a bilateral (position + intensity) Gaussian `k_b`. Message
//! passing multiplies the current marginals by the full `N×N` kernel matrix
//! (`O(N²)` per iteration), which is exact and cheap at the field sizes used
//! here (at most a few thousand pixels).

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Clamp applied inside every logarithm of a probability.
pub const PROB_EPS: f64 = 1e-7;

#[derive(Debug, Clone, PartialEq)]
pub struct CrfConfig {
    pub iterations: usize,
    /// Spatial kernel bandwidth, in pixels of a `reference_size` field.
    pub spatial_theta: f64,
    pub bilateral_theta_spatial: f64,
    /// Intensity bandwidth; intensities live in `[0, 1]`.
    pub bilateral_theta_intensity: f64,
    pub w_spatial: f64,
    pub w_bilateral: f64,
    /// Label compatibility `μ(l, l′)`, row = label of the receiving pixel.
    pub compatibility: [[f64; 2]; 2],
    /// Field width at which the spatial bandwidths hold as given.
    pub reference_size: f64,
}

impl Default for CrfConfig {
    fn default() -> Self {
        CrfConfig {
            iterations: 5,
            spatial_theta: 3.0,
            bilateral_theta_spatial: 30.0,
            bilateral_theta_intensity: 0.1,
            w_spatial: 1.0,
            w_bilateral: 1.0,
            compatibility: [[0.0, 1.0], [1.0, 0.0]],
            reference_size: 40.0,
        }
    }
}

impl CrfConfig {
    /// Checks hard constraints; returns soft warnings (non-Potts-like
    /// compatibility) on success.
    pub fn validate(&self) -> Result<Vec<String>> {
        if self.iterations == 0 {
            return Err(Error::config("crf iterations must be >= 1"));
        }
        for (name, v) in [
            ("spatial_theta", self.spatial_theta),
            ("bilateral_theta_spatial", self.bilateral_theta_spatial),
            ("bilateral_theta_intensity", self.bilateral_theta_intensity),
            ("reference_size", self.reference_size),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::config(format!("crf {name} must be > 0, got {v}")));
            }
        }
        if self.w_spatial < 0.0 || self.w_bilateral < 0.0 {
            return Err(Error::config("crf kernel weights must be >= 0"));
        }
        let mut warnings = Vec::new();
        let mu = self.compatibility;
        if mu[0][0] > mu[0][1] || mu[1][1] > mu[1][0] {
            warnings.push(format!(
                "crf compatibility {mu:?} has a diagonal entry above its off-diagonal; inference will not favour agreeing labels"
            ));
        }
        Ok(warnings)
    }

    /// Copy with spatial bandwidths rescaled to a field of `width` pixels.
    pub fn scaled_for(&self, width: usize) -> CrfConfig {
        let f = width as f64 / self.reference_size;
        CrfConfig {
            spatial_theta: self.spatial_theta * f,
            bilateral_theta_spatial: self.bilateral_theta_spatial * f,
            reference_size: width as f64,
            ..self.clone()
        }
    }

    fn message_free(&self) -> bool {
        self.w_spatial == 0.0 && self.w_bilateral == 0.0
    }

    /// Combined kernel weight between two pixels.
    pub fn kernel(&self, p: (usize, usize), q: (usize, usize), ip: f64, iq: f64) -> f64 {
        let dy = p.0 as f64 - q.0 as f64;
        let dx = p.1 as f64 - q.1 as f64;
        let d2 = dy * dy + dx * dx;
        let di = ip - iq;
        let ts = self.spatial_theta;
        let (tb, ti) = (self.bilateral_theta_spatial, self.bilateral_theta_intensity);
        self.w_spatial * (-d2 / (2.0 * ts * ts)).exp()
            + self.w_bilateral * (-d2 / (2.0 * tb * tb) - di * di / (2.0 * ti * ti)).exp()
    }
}

/// Dense `N×N` kernel matrix of an `h×w` intensity field, zero diagonal.
pub fn kernel_matrix<T: Scalar>(image: &[T], h: usize, w: usize, cfg: &CrfConfig) -> Vec<T> {
    let n = h * w;
    let mut k = vec![T::zero(); n * n];
    for i in 0..n {
        let (pi, ii) = ((i / w, i % w), image[i].as_f64());
        for j in (i + 1)..n {
            let v = T::c(cfg.kernel(pi, (j / w, j % w), ii, image[j].as_f64()));
            k[i * n + j] = v;
            k[j * n + i] = v;
        }
    }
    k
}

fn check_prob_field<T: Scalar>(t: &Tensor<T>, what: &str) -> Result<()> {
    let s = t.shape();
    if s.len() != 4 || s[3] != 2 {
        return Err(Error::shape(format!("{what} must be B×H×W×2, got {s:?}")));
    }
    for px in t.data().chunks_exact(2) {
        let (a, b) = (px[0].as_f64(), px[1].as_f64());
        if !(0.0..=1.0).contains(&a) || !(0.0..=1.0).contains(&b) || (a + b - 1.0).abs() > 1e-5 {
            return Err(Error::Contract(format!("{what} pixel ({a}, {b}) is not a distribution")));
        }
    }
    Ok(())
}

macro_rules! prob_field {
    ($(#[$doc:meta])* $name:ident) => {
        $(#[$doc])*
        #[derive(Debug, Clone, PartialEq)]
        pub struct $name<T: Scalar>(Tensor<T>);

        impl<T: Scalar> $name<T> {
            /// Validates a `B×H×W×2` (or `H×W×2`) probability field.
            pub fn new(probs: Tensor<T>) -> Result<Self> {
                let probs = if probs.rank() == 3 {
                    let s = probs.shape().to_vec();
                    probs.into_shape(&[1, s[0], s[1], s[2]])?
                } else {
                    probs
                };
                check_prob_field(&probs, stringify!($name))?;
                Ok(Self(probs))
            }

            /// From a `B×2×H×W` tensor.
            pub fn from_nchw(t: &Tensor<T>) -> Result<Self> {
                Self::new(t.permute(&[0, 2, 3, 1])?)
            }

            pub fn to_nchw(&self) -> Tensor<T> {
                self.0.permute(&[0, 3, 1, 2]).expect("rank 4")
            }

            pub fn tensor(&self) -> &Tensor<T> {
                &self.0
            }

            pub fn into_tensor(self) -> Tensor<T> {
                self.0
            }

            pub fn batch(&self) -> usize {
                self.0.shape()[0]
            }

            pub fn height(&self) -> usize {
                self.0.shape()[1]
            }

            pub fn width(&self) -> usize {
                self.0.shape()[2]
            }

            /// Foreground (label 1) probabilities of sample `n` as `H×W`.
            pub fn foreground(&self, n: usize) -> Tensor<T> {
                let (h, w) = (self.height(), self.width());
                let plane = h * w;
                let data = self.0.data()[n * plane * 2..(n + 1) * plane * 2]
                    .chunks_exact(2)
                    .map(|px| px[1])
                    .collect();
                Tensor::new(&[h, w], data).expect("plane")
            }
        }
    };
}

prob_field!(
    /// Per-pixel class probabilities produced by the U-Net, `B×H×W×2`.
    UnaryField
);
prob_field!(
    /// Per-pixel class probabilities after CRF refinement, `B×H×W×2`.
    SoftMask
);

fn image_planes<T: Scalar>(image: &Tensor<T>, batch: usize, h: usize, w: usize) -> Result<Vec<&[T]>> {
    if image.numel() != batch * h * w {
        return Err(Error::shape(format!("crf image {:?} does not match a {batch}×{h}×{w} field", image.shape())));
    }
    Ok(image.data().chunks_exact(h * w).collect())
}

/// Differentiable mean-field inference.
///
/// `unary` holds `B×2×H×W` probabilities, `image` the `B×H×W` (any shape
/// with that element count) intensities that drive the bilateral kernel.
/// Starting from `Q⁰ = unary`, each step filters `Q` with the pairwise
/// kernels, applies the compatibility transform and renormalises
/// `softmax(ln P − μ·(K Q))` over labels. With both kernel weights zero the
/// message term vanishes and `unary` is returned unchanged.
pub fn mean_field<'t, T: Scalar>(unary: Var<'t, T>, image: &Tensor<T>, cfg: &CrfConfig) -> Result<Var<'t, T>> {
    mean_field_observed(unary, image, cfg, |_, _| {})
}

/// [`mean_field`], calling `observe(iteration, Q)` after every step.
pub fn mean_field_observed<'t, T: Scalar>(
    unary: Var<'t, T>,
    image: &Tensor<T>,
    cfg: &CrfConfig,
    mut observe: impl FnMut(usize, &Tensor<T>),
) -> Result<Var<'t, T>> {
    cfg.validate()?;
    let s = unary.shape();
    if s.len() != 4 || s[1] != 2 {
        return Err(Error::shape(format!("crf unary must be B×2×H×W, got {s:?}")));
    }
    let (batch, h, w) = (s[0], s[2], s[3]);
    let planes = image_planes(image, batch, h, w)?;
    if cfg.message_free() {
        return Ok(unary);
    }
    let n = h * w;
    let tape = unary.tape();
    let mut kernels = Vec::with_capacity(batch * n * n);
    for plane in &planes {
        kernels.extend(kernel_matrix(plane, h, w, cfg));
    }
    let kernels = tape.constant(Tensor::new(&[batch, n, n], kernels)?);
    let mu = cfg.compatibility;
    let mu = tape.constant(Tensor::from_f64(&[1, 2, 2], &[mu[0][0], mu[0][1], mu[1][0], mu[1][1]])?);

    let q0 = unary.reshape(&[batch, 2, n])?;
    let log_unary = q0.ln_clamped(PROB_EPS, 1.0 - PROB_EPS);
    let mut q = q0;
    for it in 0..cfg.iterations {
        let messages = q.bmm(kernels)?;
        let pairwise = mu.bmm(messages)?;
        q = log_unary.sub(pairwise)?.softmax(1)?;
        observe(it, &q.value());
    }
    q.reshape(&[batch, 2, h, w])
}

/// Value-level mean-field inference on a validated unary field.
pub fn mean_field_infer<T: Scalar>(unary: &UnaryField<T>, image: &Tensor<T>, cfg: &CrfConfig) -> Result<SoftMask<T>> {
    let tape = crate::autodiff::Tape::new();
    let u = tape.constant(unary.to_nchw());
    let q = mean_field(u, image, cfg)?;
    SoftMask::from_nchw(&q.value())
}

/// Sum over unordered pixel pairs of `μ(y_p, y_q)·k(f_p, f_q)` for one
/// `h×w` label field.
pub fn pairwise_term<T: Scalar>(labels: &[T], image: &[T], h: usize, w: usize, cfg: &CrfConfig) -> f64 {
    let n = h * w;
    let lab: Vec<usize> = labels.iter().map(|v| usize::from(v.as_f64() >= 0.5)).collect();
    let mut total = 0.0;
    for i in 0..n {
        for j in (i + 1)..n {
            let mu = cfg.compatibility[lab[i]][lab[j]];
            if mu != 0.0 {
                total += mu * cfg.kernel((i / w, i % w), (j / w, j % w), image[i].as_f64(), image[j].as_f64());
            }
        }
    }
    total
}

/// `(Σ ln P(true label), pairwise energy of the labelling)` for one field.
/// Probabilities are clamped to `[ε, 1 − ε]` inside the logarithm.
pub fn crf_energy_terms<T: Scalar>(
    mask_probs: &SoftMask<T>,
    labels: &Tensor<T>,
    image: &Tensor<T>,
    cfg: &CrfConfig,
) -> Result<(f64, f64)> {
    let (h, w) = (mask_probs.height(), mask_probs.width());
    if mask_probs.batch() != 1 || labels.numel() != h * w || image.numel() != h * w {
        return Err(Error::shape(format!(
            "energy terms need one {h}×{w} field; labels {:?}, image {:?}",
            labels.shape(),
            image.shape()
        )));
    }
    let mut unary = 0.0;
    for (px, y) in mask_probs.tensor().data().chunks_exact(2).zip(labels.data()) {
        let p = px[usize::from(y.as_f64() >= 0.5)].as_f64();
        unary += p.clamp(PROB_EPS, 1.0 - PROB_EPS).ln();
    }
    Ok((unary, pairwise_term(labels.data(), image.data(), h, w, cfg)))
}

/// Mean per-pixel cross-entropy of `B×2×H×W` probabilities against
/// `B×1×H×W` binary labels.
pub fn pixel_cross_entropy<'t, T: Scalar>(probs: Var<'t, T>, labels: &Tensor<T>) -> Result<Var<'t, T>> {
    let s = probs.shape();
    if s.len() != 4 || s[1] != 2 || labels.numel() != s[0] * s[2] * s[3] {
        return Err(Error::shape(format!("pixel CE: probs {s:?}, labels {:?}", labels.shape())));
    }
    let plane = s[2] * s[3];
    let mut onehot = vec![T::zero(); s[0] * 2 * plane];
    for (i, y) in labels.data().iter().enumerate() {
        let (n, px) = (i / plane, i % plane);
        let c = usize::from(y.as_f64() >= 0.5);
        onehot[(n * 2 + c) * plane + px] = T::one();
    }
    let onehot = probs.tape().constant(Tensor::new(&s, onehot)?);
    let count = (s[0] * plane) as f64;
    Ok(onehot.mul(probs.ln_clamped(PROB_EPS, 1.0 - PROB_EPS))?.sum_all().scale(-1.0 / count))
}

/// Weighted segmentation loss
/// `(1 − λ)·CE(unet) + λ·CE(crf) + λ·β·pairwise(labels)/N`, averaged over
/// the batch. The pairwise energy is a function of the labels and image
/// only and so contributes no gradient.
pub fn segmentation_loss<'t, T: Scalar>(
    unet_probs: Var<'t, T>,
    crf_probs: Var<'t, T>,
    labels: &Tensor<T>,
    image: &Tensor<T>,
    cfg: &CrfConfig,
    lambda: f64,
    beta: f64,
) -> Result<Var<'t, T>> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::config(format!("segmentation lambda {lambda} outside [0, 1]")));
    }
    let s = unet_probs.shape();
    if crf_probs.shape() != s {
        return Err(Error::shape(format!("unet {s:?} vs crf {:?}", crf_probs.shape())));
    }
    let (batch, h, w) = (s[0], s[2], s[3]);
    let ce_unet = pixel_cross_entropy(unet_probs, labels)?;
    let ce_crf = pixel_cross_entropy(crf_probs, labels)?;
    let pairwise = if lambda * beta != 0.0 {
        let planes = image_planes(image, batch, h, w)?;
        let per_pixel: f64 = labels
            .data()
            .chunks_exact(h * w)
            .zip(planes)
            .map(|(lab, img)| pairwise_term(lab, img, h, w, cfg) / (h * w) as f64)
            .sum();
        per_pixel / batch as f64
    } else {
        0.0
    };
    let reg = unet_probs.tape().constant(Tensor::scalar(T::c(lambda * beta * pairwise)));
    ce_unet.scale(1.0 - lambda).add(ce_crf.scale(lambda))?.add(reg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;

    fn field(h: usize, w: usize, fg: impl Fn(usize, usize) -> f64) -> Tensor<f64> {
        let mut d = Vec::new();
        for y in 0..h {
            for x in 0..w {
                let p = fg(y, x);
                d.extend([1.0 - p, p]);
            }
        }
        Tensor::new(&[1, h, w, 2], d).unwrap()
    }

    #[test]
    fn zero_weights_are_identity() {
        let cfg = CrfConfig { w_spatial: 0.0, w_bilateral: 0.0, ..CrfConfig::default() };
        let u = UnaryField::new(field(4, 5, |y, x| ((y * 5 + x) as f64 * 0.37).fract())).unwrap();
        let img = Tensor::zeros(&[4, 5]);
        let out = mean_field_infer(&u, &img, &cfg).unwrap();
        assert!(out.tensor().bit_eq(u.tensor()));
    }

    #[test]
    fn single_pixel_is_softmax_of_log_unary() {
        let u = UnaryField::new(field(1, 1, |_, _| 0.3)).unwrap();
        let out = mean_field_infer(&u, &Tensor::zeros(&[1, 1]), &CrfConfig::default()).unwrap();
        let (a, b) = (0.7f64.ln(), 0.3f64.ln());
        let expect = b.exp() / (a.exp() + b.exp());
        assert!((out.tensor().data()[1] - expect).abs() < 1e-15);
    }

    #[test]
    fn rejects_mismatched_image() {
        let u = UnaryField::new(field(3, 3, |_, _| 0.5)).unwrap();
        assert!(matches!(mean_field_infer(&u, &Tensor::zeros(&[3, 4]), &CrfConfig::default()), Err(Error::Shape(_))));
    }

    #[test]
    fn validate_flags_non_potts() {
        let mut cfg = CrfConfig::default();
        assert!(cfg.validate().unwrap().is_empty());
        cfg.compatibility = [[2.0, 1.0], [1.0, 0.0]];
        assert_eq!(cfg.validate().unwrap().len(), 1);
        cfg.iterations = 0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn energy_terms_examples() {
        let cfg = CrfConfig::default();
        let labels = Tensor::from_f64(&[2, 2], &[0.0, 1.0, 1.0, 0.0]).unwrap();
        let perfect = SoftMask::new(field(2, 2, |y, x| if (y + x) % 2 == 1 { 1.0 } else { 0.0 })).unwrap();
        let img = Tensor::zeros(&[2, 2]);
        let (u, _) = crf_energy_terms(&perfect, &labels, &img, &cfg).unwrap();
        assert!(u < 0.0 && u > -1e-5);

        let same = Tensor::ones(&[2, 2]);
        let (_, pw) = crf_energy_terms(&perfect, &same, &img, &cfg).unwrap();
        assert_eq!(pw, 0.0);

        let zero = SoftMask::new(field(2, 2, |_, _| 0.0)).unwrap();
        let (u, _) = crf_energy_terms(&zero, &same, &img, &cfg).unwrap();
        assert!(u.is_finite());
    }

    #[test]
    fn lambda_zero_is_plain_unet_cross_entropy() {
        let tape = Tape::<f64>::new();
        let u = UnaryField::new(field(4, 4, |y, x| 0.1 + 0.05 * (y + x) as f64)).unwrap();
        let c = UnaryField::new(field(4, 4, |y, _| 0.2 + 0.1 * y as f64)).unwrap();
        let up = tape.constant(u.to_nchw());
        let cp = tape.constant(c.to_nchw());
        let labels = Tensor::from_f64(
            &[1, 1, 4, 4],
            &[1.0, 0.0, 1.0, 0.0, 0.0, 1.0, 1.0, 0.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 1.0],
        )
        .unwrap();
        let img = Tensor::zeros(&[1, 1, 4, 4]);
        let cfg = CrfConfig::default();
        let l0 = segmentation_loss(up, cp, &labels, &img, &cfg, 0.0, 0.01).unwrap();
        let ce = pixel_cross_entropy(up, &labels).unwrap();
        assert_eq!(l0.value().item().to_bits(), ce.value().item().to_bits());
        assert!(matches!(segmentation_loss(up, cp, &labels, &img, &cfg, 1.5, 0.01), Err(Error::Config(_))));
    }

    #[test]
    fn scaled_for_rescales_spatial_bandwidths_only() {
        let cfg = CrfConfig::default().scaled_for(20);
        assert_eq!(cfg.spatial_theta, 1.5);
        assert_eq!(cfg.bilateral_theta_spatial, 15.0);
        assert_eq!(cfg.bilateral_theta_intensity, 0.1);
    }
}
