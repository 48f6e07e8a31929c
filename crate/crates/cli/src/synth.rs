//! Oriented sinusoidal gratings as a stand-in for natural images.
//!
//! The class decides the orientation of the grating; frequency, phase and
//! pixel noise are nuisance factors. Each sample is generated on demand from
//! its own random stream, so sample `i` depends only on the seed and `i`.

use std::f64::consts::PI;

use anyhow::{bail, Context};
use minivit::distill::Dataset;
use minivit::numerics::Tensor;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::config::DataConfig;

pub const MIN_IMAGE_SIZE: usize = 8;
pub const FREQUENCIES: [usize; 3] = [2, 3, 4];

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSample {
    /// `s×s×1`.
    pub image: Tensor<f32>,
    pub label: usize,
}

/// A contiguous window `start..start + len` of the sample stream.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthDataset {
    seed: u64,
    image_size: usize,
    classes: usize,
    noise_sigma: f64,
    start: usize,
    len: usize,
}

/// The first `n` samples of the stream for `seed`.
pub fn synth_dataset(seed: u64, n: usize, s: usize, classes: usize, noise_sigma: f64) -> anyhow::Result<SynthDataset> {
    if classes < 2 {
        bail!("need at least 2 classes, got {classes}");
    }
    if s < MIN_IMAGE_SIZE {
        bail!("image size must be at least {MIN_IMAGE_SIZE}, got {s}");
    }
    if !(noise_sigma.is_finite() && noise_sigma >= 0.0) {
        bail!("noise sigma must be a non-negative number, got {noise_sigma}");
    }
    Ok(SynthDataset {
        seed,
        image_size: s,
        classes,
        noise_sigma,
        start: 0,
        len: n,
    })
}

/// Training split (the first `num_train` samples) and the held-out split
/// that follows it in the same stream.
pub fn train_test_split(cfg: &DataConfig) -> anyhow::Result<(SynthDataset, SynthDataset)> {
    let all = synth_dataset(
        cfg.seed,
        cfg.num_train + cfg.num_test,
        cfg.image_size,
        cfg.classes,
        cfg.noise_sigma,
    )?;
    Ok((all.window(0, cfg.num_train), all.window(cfg.num_train, cfg.num_test)))
}

impl SynthDataset {
    /// `len` samples starting at offset `start` of this window.
    pub fn window(&self, start: usize, len: usize) -> SynthDataset {
        let start = self.start + start.min(self.len);
        let len = len.min(self.start + self.len - start);
        SynthDataset { start, len, ..self.clone() }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Sample at position `index` of this window.
    pub fn sample(&self, index: usize) -> anyhow::Result<SynthSample> {
        if index >= self.len {
            bail!("sample {index} outside a window of {}", self.len);
        }
        self.generate(self.start + index)
    }

    pub fn samples(&self) -> anyhow::Result<Vec<SynthSample>> {
        (0..self.len).map(|i| self.sample(i)).collect()
    }

    fn generate(&self, i: usize) -> anyhow::Result<SynthSample> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(i as u64);
        let label = (rng.next_u64() % self.classes as u64) as usize;
        let freq = FREQUENCIES[(rng.next_u64() % FREQUENCIES.len() as u64) as usize] as f64;
        let phase = rng.random::<f64>() * 2.0 * PI;
        let theta = label as f64 * PI / self.classes as f64;
        let (sin_t, cos_t) = theta.sin_cos();
        let s = self.image_size;
        let noise = Normal::new(0.0, self.noise_sigma).context("noise distribution")?;
        let image = Tensor::from_fn(&[s, s, 1], |k| {
            let (y, x) = ((k / s) as f64, (k % s) as f64);
            let mut v = (2.0 * PI * freq * (x * cos_t + y * sin_t) / s as f64 + phase).sin();
            if self.noise_sigma > 0.0 {
                v += noise.sample(&mut rng);
            }
            v.clamp(-2.0, 2.0) as f32
        })?;
        Ok(SynthSample { image, label })
    }
}

impl Dataset<f32> for SynthDataset {
    fn len(&self) -> usize {
        self.len
    }

    fn get(&self, index: usize) -> minivit::Result<(Tensor<f32>, usize)> {
        self.sample(index)
            .map(|s| (s.image, s.label))
            .map_err(|e| minivit::Error::Usage(e.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_and_index_give_the_same_sample() {
        let d = synth_dataset(3, 10, 16, 4, 0.7).unwrap();
        assert_eq!(d.sample(7).unwrap(), d.sample(7).unwrap());
        assert_ne!(d.sample(7).unwrap().image, d.sample(6).unwrap().image);
        let other = synth_dataset(4, 10, 16, 4, 0.7).unwrap();
        assert_ne!(d.sample(7).unwrap().image, other.sample(7).unwrap().image);
    }

    #[test]
    fn windows_address_the_same_stream() {
        let d = synth_dataset(1, 20, 8, 3, 0.1).unwrap();
        let w = d.window(5, 10);
        assert_eq!(w.len(), 10);
        assert_eq!(w.sample(2).unwrap(), d.sample(7).unwrap());
        assert!(w.sample(10).is_err());
        assert_eq!(d.window(15, 10).len(), 5);
    }

    #[test]
    fn pixels_are_clamped() {
        let d = synth_dataset(0, 5, 8, 2, 5.0).unwrap();
        for i in 0..5 {
            let s = d.sample(i).unwrap();
            assert!(s.image.data().iter().all(|v| (-2.0..=2.0).contains(v)));
            assert!(s.image.data().iter().any(|v| v.abs() == 2.0));
        }
    }

    #[test]
    fn invalid_parameters_are_rejected() {
        assert!(synth_dataset(0, 1, 8, 1, 0.0).is_err());
        assert!(synth_dataset(0, 1, 7, 2, 0.0).is_err());
        assert!(synth_dataset(0, 1, 8, 2, -0.1).is_err());
        assert!(synth_dataset(0, 1, 8, 2, f64::NAN).is_err());
    }
}
