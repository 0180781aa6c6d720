//! Synthetic SAR-like target chips for desk-scale experiments.
//!
//! Every class owns a geometric target template: a soft rectangular hull at
//! a class-specific size and orientation, a set of bright point scatterers
//! and a radar shadow. `template_separation` blends each class template with
//! a shared neutral blob, so 0 gives indistinguishable classes and 1 gives
//! fully distinct ones. Each chip re-renders its class template at a small
//! random pose offset and multiplies it by unit-mean gamma speckle with
//! variance `1 / speckle_looks`, then min-max normalizes like ingest does.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use super::chip::{Dataset, ImageChip, CHIP_PIXELS, CHIP_SIZE};
use super::raster::min_max_normalize;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    pub n_classes: usize,
    pub images_per_class: usize,
    pub speckle_looks: f64,
    pub template_separation: f64,
    pub rng_seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_classes: 10,
            images_per_class: 60,
            speckle_looks: 4.0,
            template_separation: 1.0,
            rng_seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_classes == 0 || self.images_per_class == 0 {
            return Err(Error::Config("n_classes and images_per_class must be >= 1".into()));
        }
        if !(self.speckle_looks > 0.0 && self.speckle_looks.is_finite()) {
            return Err(Error::Config(format!("speckle_looks must be > 0, got {}", self.speckle_looks)));
        }
        if !(0.0..=1.0).contains(&self.template_separation) {
            return Err(Error::Config(format!(
                "template_separation must lie in [0, 1], got {}",
                self.template_separation
            )));
        }
        Ok(())
    }

    pub fn class_name(class: usize) -> String {
        format!("synth_{class:02}")
    }
}

fn mix(mut z: u64) -> u64 {
    // splitmix64 finalizer
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[derive(Clone, Debug)]
struct TargetShape {
    length: f64,
    width: f64,
    heading: f64,
    scatterers: Vec<(f64, f64, f64)>,
}

impl TargetShape {
    fn random(rng: &mut impl Rng) -> Self {
        let length = rng.gen_range(18.0..34.0);
        let width = rng.gen_range(8.0..16.0);
        let n = rng.gen_range(3..=7);
        let scatterers = (0..n)
            .map(|_| {
                (
                    rng.gen_range(-0.5..0.5) * length,
                    rng.gen_range(-0.5..0.5) * width,
                    rng.gen_range(0.6..1.0),
                )
            })
            .collect();
        TargetShape {
            length,
            width,
            heading: rng.gen_range(0.0..PI),
            scatterers,
        }
    }
}

fn soft_step(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

const CLUTTER: f64 = 0.1;

/// Per-chip pose perturbation.
#[derive(Clone, Copy, Debug, Default)]
struct Pose {
    dx: f64,
    dy: f64,
    dheading: f64,
}

fn render(shape: &TargetShape, separation: f64, pose: Pose) -> Vec<f64> {
    let c = (CHIP_SIZE as f64 - 1.0) / 2.0;
    let (cx, cy) = (c + pose.dx, c + pose.dy);
    let (s, co) = (shape.heading + pose.dheading).sin_cos();
    let sigma2 = 2.0 * 1.5f64.powi(2);
    let mut out = Vec::with_capacity(CHIP_PIXELS);
    for y in 0..CHIP_SIZE {
        for x in 0..CHIP_SIZE {
            let (px, py) = (x as f64 - cx, y as f64 - cy);
            let u = px * co + py * s;
            let v = -px * s + py * co;
            let hull = soft_step(shape.length / 2.0 - u.abs()) * soft_step(shape.width / 2.0 - v.abs());
            // shadow cast down-range (towards +y) behind the hull
            let sy = py - shape.width;
            let shadow = soft_step(shape.length / 2.0 - px.abs()) * soft_step(shape.width / 2.0 - sy.abs());
            let glints: f64 = shape
                .scatterers
                .iter()
                .map(|&(su, sv, a)| a * (-((u - su).powi(2) + (v - sv).powi(2)) / sigma2).exp())
                .sum();
            let distinct = 0.35 * hull + glints - 0.08 * shadow * (1.0 - hull);
            let neutral = 0.6 * (-(px * px + py * py) / (2.0 * 8.0f64.powi(2))).exp();
            out.push(CLUTTER + separation * distinct + (1.0 - separation) * neutral);
        }
    }
    out
}

/// A rendered chip before normalization.
#[derive(Clone, Debug)]
pub struct SyntheticSample {
    /// Noise-free template at this chip's pose.
    pub template: Vec<f64>,
    /// Template multiplied by speckle.
    pub intensity: Vec<f64>,
}

/// Deterministic generator; every chip depends only on `(seed, class, index)`.
pub struct SynthGenerator {
    config: SynthConfig,
    shapes: Vec<TargetShape>,
    speckle: Gamma<f64>,
}

impl SynthGenerator {
    pub fn new(config: SynthConfig) -> Result<Self> {
        config.validate()?;
        let shapes = (0..config.n_classes)
            .map(|c| {
                let mut rng = ChaCha8Rng::seed_from_u64(mix(config.rng_seed ^ mix(c as u64 + 1)));
                TargetShape::random(&mut rng)
            })
            .collect();
        let looks = config.speckle_looks;
        let speckle = Gamma::new(looks, 1.0 / looks).map_err(|e| Error::Config(e.to_string()))?;
        Ok(SynthGenerator {
            config,
            shapes,
            speckle,
        })
    }

    pub fn render(&self, class: usize, index: usize) -> SyntheticSample {
        let seed = mix(self.config.rng_seed ^ mix(((class as u64) << 32) ^ index as u64 ^ 0xa5a5));
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pose = Pose {
            dx: rng.gen_range(-3.0..3.0),
            dy: rng.gen_range(-3.0..3.0),
            dheading: rng.gen_range(-0.15..0.15),
        };
        let template = render(&self.shapes[class], self.config.template_separation, pose);
        let intensity = template.iter().map(|&t| t * self.speckle.sample(&mut rng)).collect();
        SyntheticSample { template, intensity }
    }

    pub fn chip(&self, class: usize, index: usize) -> Result<ImageChip> {
        let sample = self.render(class, index);
        let source = format!("synth/{}/{index:04}", SynthConfig::class_name(class));
        match min_max_normalize(&sample.intensity) {
            Some(p) => ImageChip::new(p, class, source),
            None => {
                let mut chip = ImageChip::new(vec![0.0; CHIP_PIXELS], class, source)?;
                chip.degenerate_range = true;
                Ok(chip)
            }
        }
    }
}

/// Generate the full synthetic dataset described by `config`.
pub fn generate_synthetic(config: &SynthConfig) -> Result<Dataset> {
    let generator = SynthGenerator::new(config.clone())?;
    let classes = (0..config.n_classes).map(SynthConfig::class_name).collect();
    let mut dataset = Dataset::new(classes);
    for class in 0..config.n_classes {
        for index in 0..config.images_per_class {
            dataset.insert(generator.chip(class, index)?)?;
        }
    }
    Ok(dataset)
}
