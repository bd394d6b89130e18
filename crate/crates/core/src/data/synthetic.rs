use std::f64::consts::PI;

use rand::seq::SliceRandom;
use rand_distr::{Distribution, Normal};

use super::{DataError, Dataset};
use crate::autodiff::{Real, Tensor};
use crate::seed;

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub classes: usize,
    pub samples: usize,
    /// `[C, H, W]`.
    pub image: [usize; 3],
    pub noise: f64,
    pub seed: u64,
}

/// Noiseless image for class `k`: an oriented grating plus a blob whose
/// position rotates with the class. Depends only on `(k, classes, shape)`.
pub fn class_template(k: usize, classes: usize, image: [usize; 3]) -> Vec<f64> {
    let [c, h, w] = image;
    let theta = PI * k as f64 / classes as f64;
    let phi = 2.0 * PI * k as f64 / classes as f64;
    let (cx, cy) = (0.5 + 0.28 * phi.cos(), 0.5 + 0.28 * phi.sin());
    let mut out = Vec::with_capacity(c * h * w);
    for ch in 0..c {
        for i in 0..h {
            let v = (i as f64 + 0.5) / h as f64;
            for j in 0..w {
                let u = (j as f64 + 0.5) / w as f64;
                let grating = (4.0 * PI * (u * theta.cos() + v * theta.sin()) + ch as f64 * PI / 3.0).cos();
                let d2 = (u - cx).powi(2) + (v - cy).powi(2);
                let blob = (-d2 / (2.0 * 0.15 * 0.15)).exp();
                out.push(0.35 + 0.2 * grating + 0.4 * blob);
            }
        }
    }
    out
}

/// Balanced labels (counts differ by at most one) in shuffled order, each
/// image its class template plus Gaussian noise, clipped to `[0, 1]`.
/// Pixels are rounded to f32 so the container round-trips exactly.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Dataset, DataError> {
    let [c, h, w] = spec.image;
    if spec.classes < 2 {
        return Err(DataError::Validation(format!("need at least 2 classes, got {}", spec.classes)));
    }
    if c == 0 || h == 0 || w == 0 {
        return Err(DataError::Validation(format!("image shape {:?} has a zero extent", spec.image)));
    }
    if !(spec.noise >= 0.0 && spec.noise.is_finite()) {
        return Err(DataError::Validation(format!("noise must be finite and non-negative, got {}", spec.noise)));
    }
    let templates: Vec<Vec<f64>> = (0..spec.classes).map(|k| class_template(k, spec.classes, spec.image)).collect();
    let mut rng = seed::rng(spec.seed, &[0xDA7A]);
    let mut labels: Vec<usize> = (0..spec.samples).map(|i| i % spec.classes).collect();
    labels.shuffle(&mut rng);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let per = c * h * w;
    let mut data = Vec::with_capacity(spec.samples * per);
    for &l in &labels {
        for &t in &templates[l] {
            let x = (t + spec.noise * normal.sample(&mut rng)).clamp(0.0, 1.0);
            data.push(x as f32 as Real);
        }
    }
    let images = Tensor::new(vec![spec.samples, c, h, w], data).expect("shape matches data");
    Dataset::new(images, labels, spec.classes)
}
