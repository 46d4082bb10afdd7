//! Procedurally generated class-conditional images.
//!
//! Each class owns a smooth random prototype (a few oriented sinusoids per
//! channel); examples are randomly translated, contrast-jittered, noisy copies.
//! Used for tests, demos and whenever the real datasets are not on disk.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::Dataset;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub num_classes: usize,
    pub channels: usize,
    pub size: usize,
    pub dev_examples: usize,
    pub test_examples: usize,
    /// Standard deviation of the additive pixel noise, in `[0, 1]` units.
    pub noise: f64,
    /// Maximum translation in pixels.
    pub max_shift: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            num_classes: 10,
            channels: 3,
            size: 32,
            dev_examples: 2000,
            test_examples: 500,
            noise: 0.2,
            max_shift: 3,
            seed: 0,
        }
    }
}

struct Wave {
    fx: f64,
    fy: f64,
    phase: f64,
    amp: f64,
}

fn prototype(rng: &mut ChaCha8Rng, channels: usize) -> Vec<Vec<Wave>> {
    (0..channels)
        .map(|_| {
            (0..3)
                .map(|_| Wave {
                    fx: rng.random_range(-3.0..3.0),
                    fy: rng.random_range(-3.0..3.0),
                    phase: rng.random_range(0.0..std::f64::consts::TAU),
                    amp: rng.random_range(0.3..1.0),
                })
                .collect()
        })
        .collect()
}

fn render(proto: &[Vec<Wave>], spec: &SyntheticSpec, rng: &mut ChaCha8Rng, out: &mut Vec<u8>) {
    let s = spec.size as f64;
    let shift = spec.max_shift as i64;
    let dx = rng.random_range(-shift..=shift) as f64;
    let dy = rng.random_range(-shift..=shift) as f64;
    let contrast = rng.random_range(0.7..1.3);
    for waves in proto {
        let norm: f64 = waves.iter().map(|w| w.amp).sum();
        for y in 0..spec.size {
            for x in 0..spec.size {
                let (u, v) = ((x as f64 + dx) / s, (y as f64 + dy) / s);
                let mut val = 0.0;
                for w in waves {
                    val += w.amp * (std::f64::consts::TAU * (w.fx * u + w.fy * v) + w.phase).sin();
                }
                let z: f64 = rng.sample(StandardNormal);
                let p = 0.5 + 0.4 * contrast * val / norm + spec.noise * z;
                out.push((p.clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
    }
}

/// Generates `(development, test)` datasets with balanced, interleaved labels.
pub fn generate(spec: &SyntheticSpec) -> Result<(Dataset, Dataset)> {
    if spec.num_classes < 2 || spec.num_classes > 256 || spec.channels == 0 || spec.size == 0 {
        return Err(Error::invalid("synthetic data needs 2..=256 classes, ≥1 channel and a positive size"));
    }
    if spec.dev_examples < 2 || spec.test_examples == 0 {
        return Err(Error::invalid("synthetic data needs at least 2 development and 1 test example"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let protos: Vec<_> = (0..spec.num_classes).map(|_| prototype(&mut rng, spec.channels)).collect();
    let mut make = |name: &str, n: usize| {
        let mut ds = Dataset::empty(name, spec.channels, spec.size, spec.size, spec.num_classes);
        ds.pixels.reserve(n * ds.image_len());
        for i in 0..n {
            let label = i % spec.num_classes;
            render(&protos[label], spec, &mut rng, &mut ds.pixels);
            ds.labels.push(label as u8);
        }
        ds
    };
    let dev = make("synthetic-dev", spec.dev_examples);
    let test = make("synthetic-test", spec.test_examples);
    Ok((dev, test))
}
