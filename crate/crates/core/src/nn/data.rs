//! Labelled image sets, including the synthetic Gaussian-blob task.

use serde::{Deserialize, Serialize};

use crate::error::{config, Result};
use crate::rng::Rng;
use crate::tensor::Tensor3;

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub images: Vec<Tensor3>,
    pub labels: Vec<usize>,
    pub classes: usize,
}

impl Dataset {
    pub fn new(images: Vec<Tensor3>, labels: Vec<usize>, classes: usize) -> Result<Self> {
        if images.len() != labels.len() {
            return config(format!(
                "{} images but {} labels",
                images.len(),
                labels.len()
            ));
        }
        if let Some(l) = labels.iter().find(|l| **l >= classes) {
            return config(format!("label {l} outside {classes} classes"));
        }
        if let Some(first) = images.first() {
            if images.iter().any(|i| i.shape() != first.shape()) {
                return config("images differ in shape");
            }
        }
        Ok(Self {
            images,
            labels,
            classes,
        })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

/// Parameters of the blob task: one Gaussian bump per class, placed on a
/// circle around the image centre, plus white noise and position jitter.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BlobParams {
    pub samples: usize,
    pub classes: usize,
    pub height: usize,
    pub width: usize,
    pub amplitude: f64,
    pub spread: f64,
    pub noise: f64,
    pub jitter: f64,
}

impl Default for BlobParams {
    fn default() -> Self {
        Self {
            samples: 200,
            classes: 3,
            height: 8,
            width: 8,
            amplitude: 1.0,
            spread: 1.2,
            noise: 0.3,
            jitter: 0.8,
        }
    }
}

/// Renders `params.samples` single-channel images; labels cycle through the classes.
pub fn gaussian_blobs(params: &BlobParams, seed: u64) -> Result<Dataset> {
    if params.classes < 2 || params.height == 0 || params.width == 0 {
        return config("blob task needs two classes and a nonempty image");
    }
    let mut rng = Rng::new(seed);
    let cy0 = (params.height as f64 - 1.0) / 2.0;
    let cx0 = (params.width as f64 - 1.0) / 2.0;
    let radius = 0.3 * params.height.min(params.width) as f64;
    let mut images = Vec::with_capacity(params.samples);
    let mut labels = Vec::with_capacity(params.samples);
    for i in 0..params.samples {
        let class = i % params.classes;
        let angle = std::f64::consts::TAU * class as f64 / params.classes as f64;
        let cy = cy0 + radius * angle.sin() + params.jitter * (2.0 * rng.uniform() - 1.0);
        let cx = cx0 + radius * angle.cos() + params.jitter * (2.0 * rng.uniform() - 1.0);
        let two_s2 = 2.0 * params.spread * params.spread;
        let img = Tensor3::from_fn(1, params.height, params.width, |_, y, x| {
            let d2 = (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2);
            params.amplitude * (-d2 / two_s2).exp() + params.noise * rng.normal()
        });
        images.push(img);
        labels.push(class);
    }
    Dataset::new(images, labels, params.classes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn blobs_are_balanced_and_reproducible() {
        let p = BlobParams::default();
        let a = gaussian_blobs(&p, 5).unwrap();
        let b = gaussian_blobs(&p, 5).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 200);
        assert_eq!(a.images[0].shape(), (1, 8, 8));
        for c in 0..3 {
            let n = a.labels.iter().filter(|l| **l == c).count();
            assert!((66..=67).contains(&n));
        }
    }

    #[test]
    fn dataset_validation() {
        assert!(Dataset::new(vec![Tensor3::zeros(1, 2, 2)], vec![3], 3).is_err());
        assert!(Dataset::new(vec![Tensor3::zeros(1, 2, 2)], vec![], 3).is_err());
    }
}
