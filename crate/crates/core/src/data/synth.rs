//! Synthetic mammogram-like images: a smooth textured background with one
//! bright mass whose outline determines the class. Smooth ellipses are
//! benign (0), spiculated stars malignant (1).

use std::f64::consts::PI;

use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

use super::pgm::quantize16;
use super::AnnotatedImage;

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    /// Square image side in pixels.
    pub size: usize,
    /// Mass radius range as fractions of `size`.
    pub radius: (f64, f64),
    /// Intensity added inside the mass.
    pub contrast: f64,
    /// Standard deviation of the per-pixel noise.
    pub noise: f64,
    /// Width of the soft mass boundary, pixels.
    pub edge: f64,
    /// Star arm amplitude range, relative to the mean radius.
    pub spike_amplitude: (f64, f64),
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            size: 96,
            radius: (0.11, 0.18),
            contrast: 0.35,
            noise: 0.03,
            edge: 1.0,
            spike_amplitude: (0.3, 0.45),
        }
    }
}

/// Polar outline `r(θ)` of a mass.
#[derive(Debug, Clone, Copy)]
enum Outline {
    Ellipse { a: f64, b: f64, angle: f64 },
    Star { r: f64, amplitude: f64, arms: f64, phase: f64 },
}

impl Outline {
    fn radius(&self, theta: f64) -> f64 {
        match *self {
            Outline::Ellipse { a, b, angle } => {
                let t = theta - angle;
                a * b / ((b * t.cos()).powi(2) + (a * t.sin()).powi(2)).sqrt()
            }
            Outline::Star { r, amplitude, arms, phase } => r * (1.0 + amplitude * (arms * theta + phase).cos()),
        }
    }
}

fn background(size: usize, rng: &mut Rng) -> Vec<f64> {
    let level = rng.uniform_range(0.15, 0.3);
    let waves: Vec<(f64, f64, f64, f64)> = (0..3)
        .map(|_| {
            let f = rng.uniform_range(0.5, 2.0) * 2.0 * PI / size as f64;
            let dir = rng.uniform_range(0.0, 2.0 * PI);
            (f * dir.cos(), f * dir.sin(), rng.uniform_range(0.0, 2.0 * PI), rng.uniform_range(0.02, 0.06))
        })
        .collect();
    let mut px = Vec::with_capacity(size * size);
    for y in 0..size {
        for x in 0..size {
            let s: f64 = waves.iter().map(|&(fy, fx, p, a)| a * (fy * y as f64 + fx * x as f64 + p).sin()).sum();
            px.push(level + s);
        }
    }
    px
}

/// One image. `label` selects the outline family.
pub fn synth_image<T: Scalar>(id: &str, label: usize, spec: &SynthSpec, rng: &mut Rng) -> AnnotatedImage<T> {
    let n = spec.size;
    let mut px = background(n, rng);
    let r = rng.uniform_range(spec.radius.0, spec.radius.1) * n as f64;
    let outline = if label == 1 {
        Outline::Star {
            r,
            amplitude: rng.uniform_range(spec.spike_amplitude.0, spec.spike_amplitude.1),
            arms: (5 + rng.below(3)) as f64,
            phase: rng.uniform_range(0.0, 2.0 * PI),
        }
    } else {
        let ratio = rng.uniform_range(0.65, 1.0);
        Outline::Ellipse { a: r, b: r * ratio, angle: rng.uniform_range(0.0, PI) }
    };
    let reach = r * 1.5 + 2.0;
    let margin = reach.min(n as f64 / 2.0 - 1.0);
    let cy = rng.uniform_range(margin, n as f64 - margin);
    let cx = rng.uniform_range(margin, n as f64 - margin);
    let mut mask = vec![0.0; n * n];
    for y in 0..n {
        for x in 0..n {
            let (dy, dx) = (y as f64 + 0.5 - cy, x as f64 + 0.5 - cx);
            let rho = (dy * dy + dx * dx).sqrt();
            let inside = outline.radius(dx.atan2(dy)) - rho;
            px[y * n + x] += spec.contrast / (1.0 + (-inside / spec.edge).exp());
            if inside >= 0.0 {
                mask[y * n + x] = 1.0;
            }
        }
    }
    // The center pixel is always inside the outline.
    mask[(cy as usize) * n + cx as usize] = 1.0;
    for v in &mut px {
        *v += spec.noise * rng.normal();
    }
    AnnotatedImage {
        id: id.to_string(),
        image: Tensor::new(&[n, n], px.into_iter().map(quantize16).collect()).expect("extents"),
        mask: Tensor::new(&[n, n], mask.into_iter().map(T::c).collect()).expect("extents"),
        label,
    }
}

/// `n` images with alternating labels, ids `synth-0000`, `synth-0001`, ….
pub fn synth_dataset<T: Scalar>(n: usize, rng: &Rng, spec: &SynthSpec) -> Vec<AnnotatedImage<T>> {
    (0..n).map(|i| synth_image(&format!("synth-{i:04}"), i % 2, spec, &mut rng.derive(&[i as u64]))).collect()
}

/// Background only: the negative control for segmentation.
pub fn synth_background<T: Scalar>(spec: &SynthSpec, rng: &mut Rng) -> Tensor<T> {
    let px: Vec<T> =
        background(spec.size, rng).into_iter().map(|v| quantize16(v + spec.noise * rng.normal())).collect();
    Tensor::new(&[spec.size, spec.size], px).expect("extents")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_nonempty_and_balanced() {
        let spec = SynthSpec::default();
        let a = synth_dataset::<f32>(20, &Rng::new(7), &spec);
        let b = synth_dataset::<f32>(20, &Rng::new(7), &spec);
        assert_eq!(a, b);
        for img in &a {
            assert!(img.mask.data().contains(&1.0));
            assert!(img.image.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
        assert_eq!(a.iter().filter(|i| i.label == 1).count(), 10);
    }

    #[test]
    fn star_outline_is_more_irregular() {
        let star = Outline::Star { r: 10.0, amplitude: 0.4, arms: 5.0, phase: 0.0 };
        let ell = Outline::Ellipse { a: 10.0, b: 8.0, angle: 0.0 };
        let spread = |o: &Outline| {
            let rs: Vec<f64> = (0..360).map(|k| o.radius(k as f64 * PI / 180.0)).collect();
            rs.iter().cloned().fold(f64::MIN, f64::max) / rs.iter().cloned().fold(f64::MAX, f64::min)
        };
        assert!(spread(&star) > 2.0 && spread(&ell) < 1.3);
    }
}
