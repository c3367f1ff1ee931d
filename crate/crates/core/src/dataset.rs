//! Toy image datasets: procedural grayscale shape classes and synthetic
//! Gaussian data.
//!
//! Shapes are drawn with one-pixel soft edges so the class manifolds are
//! smooth; pixel values live in [0, 1], the same range the splat renderer
//! produces, so rendered images and dataset images share one latent space.

use crate::error::{Error, Result};
use crate::rng::{self, stream};
use crate::tensor::{Scalar, Tensor};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ShapeClass {
    Disk = 0,
    Cross = 1,
    Ring = 2,
}

pub const SHAPE_CLASS_NAMES: [&str; 3] = ["disk", "cross", "ring"];

impl ShapeClass {
    pub fn from_name(name: &str) -> Result<Self> {
        match name {
            "disk" => Ok(ShapeClass::Disk),
            "cross" => Ok(ShapeClass::Cross),
            "ring" => Ok(ShapeClass::Ring),
            other => Err(Error::Config(format!(
                "unknown shape class '{other}' (expected disk|cross|ring)"
            ))),
        }
    }

    pub fn label(self) -> usize {
        self as usize
    }
}

/// Labeled images stored row-major as an [n, side·side] tensor.
#[derive(Clone, Debug)]
pub struct LabeledDataset<S: Scalar = f32> {
    side: usize,
    num_classes: usize,
    images: Tensor<S>,
    labels: Vec<usize>,
}

impl<S: Scalar> LabeledDataset<S> {
    pub fn new(side: usize, num_classes: usize, images: Tensor<S>, labels: Vec<usize>) -> Result<Self> {
        if images.shape().len() != 2 || images.shape()[1] != side * side {
            return Err(Error::shape(
                "dataset",
                format!("images {:?} vs side {side}", images.shape()),
            ));
        }
        if images.shape()[0] != labels.len() || labels.is_empty() {
            return Err(Error::contract(format!(
                "dataset needs one label per image, got {} images / {} labels",
                images.shape()[0],
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::contract(format!(
                "label {bad} out of range for {num_classes} classes"
            )));
        }
        Ok(LabeledDataset {
            side,
            num_classes,
            images,
            labels,
        })
    }

    /// Procedural shape dataset: `n_per_class` samples of each of disk,
    /// cross and ring, with jittered centers, sizes and intensities.
    pub fn shapes(n_per_class: usize, side: usize, seed: u64) -> Self {
        let mut r = rng::rng(seed, stream::DATASET);
        let d = side * side;
        let n = 3 * n_per_class;
        let mut data = Vec::with_capacity(n * d);
        let mut labels = Vec::with_capacity(n);
        for class in [ShapeClass::Disk, ShapeClass::Cross, ShapeClass::Ring] {
            for _ in 0..n_per_class {
                let img = draw_shape(class, side, &mut r);
                data.extend(img.iter().map(|&v| S::from_f64(v)));
                labels.push(class.label());
            }
        }
        LabeledDataset {
            side,
            num_classes: 3,
            images: Tensor::new(vec![n, d], data),
            labels,
        }
    }

    /// `n` identical copies of one image, all with label 0. Degenerate set
    /// used to smoke-test that the denoiser can fit *something*.
    pub fn constant(image: &Tensor<S>, side: usize, n: usize) -> Result<Self> {
        if image.len() != side * side {
            return Err(Error::shape(
                "dataset",
                format!("image len {} vs side {side}", image.len()),
            ));
        }
        let mut data = Vec::with_capacity(n * image.len());
        for _ in 0..n {
            data.extend_from_slice(image.data());
        }
        LabeledDataset::new(
            side,
            1,
            Tensor::new(vec![n, image.len()], data),
            vec![0; n],
        )
    }

    /// Isotropic Gaussian data x0 = μ + σ_d·z, all label 0. Pairs with the
    /// closed-form optimal denoiser for calibration tests.
    pub fn gaussian(mu: &Tensor<S>, sigma_d: f64, side: usize, n: usize, seed: u64) -> Result<Self> {
        if mu.len() != side * side {
            return Err(Error::shape(
                "dataset",
                format!("mu len {} vs side {side}", mu.len()),
            ));
        }
        if sigma_d <= 0.0 {
            return Err(Error::Config(format!("sigma_d must be > 0, got {sigma_d}")));
        }
        let mut r = rng::rng(seed, stream::DATASET);
        let d = mu.len();
        let mut data = Vec::with_capacity(n * d);
        let sd = S::from_f64(sigma_d);
        for _ in 0..n {
            let z = rng::randn::<S>(vec![d], &mut r);
            for (m, zv) in mu.data().iter().zip(z.data()) {
                data.push(*m + sd * *zv);
            }
        }
        LabeledDataset::new(side, 1, Tensor::new(vec![n, d], data), vec![0; n])
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn dim(&self) -> usize {
        self.side * self.side
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn image(&self, i: usize) -> &[S] {
        self.images.row(i)
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    /// Uniformly samples a batch of (images [b, d], labels).
    pub fn sample_batch(&self, b: usize, r: &mut ChaCha8Rng) -> (Tensor<S>, Vec<usize>) {
        let d = self.dim();
        let mut data = Vec::with_capacity(b * d);
        let mut labels = Vec::with_capacity(b);
        for _ in 0..b {
            let i = r.random_range(0..self.len());
            data.extend_from_slice(self.image(i));
            labels.push(self.labels[i]);
        }
        (Tensor::new(vec![b, d], data), labels)
    }

    /// Pixel-wise mean over all samples of one class.
    pub fn class_mean(&self, label: usize) -> Result<Tensor<S>> {
        let d = self.dim();
        let mut acc = vec![0.0f64; d];
        let mut count = 0usize;
        for i in 0..self.len() {
            if self.labels[i] == label {
                for (a, v) in acc.iter_mut().zip(self.image(i)) {
                    *a += v.to_f64();
                }
                count += 1;
            }
        }
        if count == 0 {
            return Err(Error::contract(format!("no samples with label {label}")));
        }
        Ok(Tensor::new(
            vec![d],
            acc.into_iter().map(|a| S::from_f64(a / count as f64)).collect(),
        ))
    }
}

/// One jittered sample of a shape class, pixel values in [0, 1].
fn draw_shape(class: ShapeClass, side: usize, r: &mut ChaCha8Rng) -> Vec<f64> {
    let half = side as f64 / 2.0;
    let cx = half + r.random_range(-1.5..1.5);
    let cy = half + r.random_range(-1.5..1.5);
    let size_scale = r.random_range(0.85..1.15);
    let intensity = r.random_range(0.7..1.0);
    let s = side as f64;
    let mut img = vec![0.0; side * side];
    for row in 0..side {
        for col in 0..side {
            let px = col as f64 + 0.5;
            let py = row as f64 + 0.5;
            let dist = ((px - cx).powi(2) + (py - cy).powi(2)).sqrt();
            // Signed distance to the shape boundary, positive inside; the
            // soft edge is one pixel wide.
            let inside = match class {
                ShapeClass::Disk => 0.30 * s * size_scale - dist,
                ShapeClass::Ring => {
                    let outer = 0.36 * s * size_scale - dist;
                    let inner = dist - 0.22 * s * size_scale;
                    outer.min(inner)
                }
                ShapeClass::Cross => {
                    let w = 0.10 * s * size_scale;
                    let horiz = w - (py - cy).abs();
                    let vert = w - (px - cx).abs();
                    horiz.max(vert)
                }
            };
            img[row * side + col] = (inside + 0.5).clamp(0.0, 1.0) * intensity;
        }
    }
    img
}
