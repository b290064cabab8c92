//! Seeded synthetic cross-domain benchmark.
//!
//! Each class is a Gaussian cluster around `common + separation * u_c`, where
//! `common` is shared by every object class (so classes are fine-grained) and
//! `u_c` is a class direction. Every sample also carries a "style" nuisance
//! drawn in a fixed low-dimensional subspace and a small isotropic noise.
//! Target-domain samples are then mapped through one rigid random rotation.
//! Backgrounds mix hard negatives (`common` plus style, no class direction)
//! with unstructured clutter.
//!
//! Objects are laid out three per image in non-overlapping slots, so queries
//! carry boxes for detection evaluation.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{dot, norm, Tensor};
use crate::boxes::Rect;
use crate::episode::Episode;
use crate::error::{Error, Result};
use crate::pack::{FeaturePack, FeatureRecord, Role};
use crate::rng;

const SLOTS_PER_IMAGE: usize = 3;
const SLOT_WIDTH: f64 = 200.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub n_classes: usize,
    pub instances_per_class: usize,
    pub n_background: usize,
    pub dim: usize,
    pub seed: u64,
    /// Length of each class offset from the shared object direction.
    pub class_separation: f64,
    pub style_dim: usize,
    /// Per-coordinate std of the style nuisance.
    pub style_scale: f64,
    /// Per-coordinate std of the isotropic noise.
    pub noise_scale: f64,
    pub hard_background_fraction: f64,
    /// Apply the target-domain rotation.
    pub rotate: bool,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_classes: 5,
            instances_per_class: 40,
            n_background: 600,
            dim: 64,
            seed: 0,
            class_separation: 0.6,
            style_dim: 2,
            style_scale: 1.0,
            noise_scale: 0.05,
            hard_background_fraction: 0.0,
            rotate: true,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_classes == 0 || self.dim == 0 || self.instances_per_class == 0 {
            return Err(Error::Config("synth needs classes, instances and a positive dim".into()));
        }
        if self.style_dim > self.dim {
            return Err(Error::Config(format!("style_dim {} exceeds dim {}", self.style_dim, self.dim)));
        }
        if !(0.0..=1.0).contains(&self.hard_background_fraction) {
            return Err(Error::Config("hard_background_fraction outside [0, 1]".into()));
        }
        for (name, v) in [
            ("class_separation", self.class_separation),
            ("style_scale", self.style_scale),
            ("noise_scale", self.noise_scale),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Config(format!("{name} must be finite and nonnegative")));
            }
        }
        Ok(())
    }
}

fn gaussian(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

fn unit(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    loop {
        let v = gaussian(rng, n);
        let l = norm(&v);
        if l > 1e-8 {
            return v.into_iter().map(|x| x / l).collect();
        }
    }
}

/// Orthonormal rows by Gram-Schmidt on Gaussian draws (rows of a Haar-ish rotation).
fn orthonormal_rows(rng: &mut ChaCha8Rng, rows: usize, dim: usize) -> Vec<Vec<f64>> {
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(rows);
    while basis.len() < rows {
        let mut v = gaussian(rng, dim);
        for b in &basis {
            let p = dot(&v, b);
            v.iter_mut().zip(b).for_each(|(x, y)| *x -= p * y);
        }
        let l = norm(&v);
        if l > 1e-6 {
            basis.push(v.into_iter().map(|x| x / l).collect());
        }
    }
    basis
}

struct Generator {
    common: Vec<f64>,
    class_dirs: Vec<Vec<f64>>,
    style_basis: Vec<Vec<f64>>,
    rotation: Option<Vec<Vec<f64>>>,
}

impl Generator {
    fn new(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Self {
        let common = unit(rng, cfg.dim);
        let class_dirs = (0..cfg.n_classes).map(|_| unit(rng, cfg.dim)).collect();
        let style_basis = orthonormal_rows(rng, cfg.style_dim, cfg.dim);
        let rotation = cfg.rotate.then(|| orthonormal_rows(rng, cfg.dim, cfg.dim));
        Self {
            common,
            class_dirs,
            style_basis,
            rotation,
        }
    }

    fn sample(&self, cfg: &SynthConfig, rng: &mut ChaCha8Rng, class: Option<usize>) -> Vec<f32> {
        let mut v = self.common.clone();
        if let Some(c) = class {
            v.iter_mut()
                .zip(&self.class_dirs[c])
                .for_each(|(x, d)| *x += cfg.class_separation * d);
        }
        for b in &self.style_basis {
            let a: f64 = StandardNormal.sample(rng);
            v.iter_mut().zip(b).for_each(|(x, y)| *x += cfg.style_scale * a * y);
        }
        for x in v.iter_mut() {
            let e: f64 = StandardNormal.sample(rng);
            *x += cfg.noise_scale * e;
        }
        self.finish(v)
    }

    fn clutter(&self, rng: &mut ChaCha8Rng, dim: usize) -> Vec<f32> {
        self.finish(gaussian(rng, dim))
    }

    fn finish(&self, v: Vec<f64>) -> Vec<f32> {
        let v = match &self.rotation {
            Some(r) => r.iter().map(|row| dot(row, &v)).collect(),
            None => v,
        };
        v.into_iter().map(|x| x as f32).collect()
    }
}

fn slot_box(rng: &mut ChaCha8Rng, slot: usize) -> Rect {
    let x0 = slot as f64 * SLOT_WIDTH;
    let w = rng.gen_range(60.0..150.0);
    let h = rng.gen_range(60.0..150.0);
    let x = x0 + rng.gen_range(10.0..(SLOT_WIDTH - 10.0 - w));
    let y = rng.gen_range(10.0..(200.0 - h));
    Rect::new(x, y, x + w, y + h)
}

/// Generates the benchmark pack. Object records are interleaved across classes
/// before being packed into images, so each image mixes classes.
pub fn synth_pack(cfg: &SynthConfig) -> Result<FeaturePack> {
    cfg.validate()?;
    let mut rng = rng::stream(cfg.seed, rng::STREAM_SYNTH);
    let gen = Generator::new(cfg, &mut rng);
    let mut records = Vec::with_capacity(cfg.n_classes * cfg.instances_per_class + cfg.n_background);
    let mut slot = 0usize;
    for _ in 0..cfg.instances_per_class {
        for c in 0..cfg.n_classes {
            let image = format!("t{:05}", slot / SLOTS_PER_IMAGE);
            let bbox = slot_box(&mut rng, slot % SLOTS_PER_IMAGE);
            let raw = gen.sample(cfg, &mut rng, Some(c));
            records.push(FeatureRecord::new(Role::Object(c), image, Some(bbox), raw));
            slot += 1;
        }
    }
    let n_hard = (cfg.n_background as f64 * cfg.hard_background_fraction).round() as usize;
    for b in 0..cfg.n_background {
        let raw = if b < n_hard {
            gen.sample(cfg, &mut rng, None)
        } else {
            gen.clutter(&mut rng, cfg.dim)
        };
        records.push(FeatureRecord::new(Role::Background, format!("bg{:05}", b), None, raw));
    }
    let names = (0..cfg.n_classes).map(|c| format!("synth-{c}")).collect();
    FeaturePack::new(
        format!("synth-{}", cfg.seed),
        cfg.dim,
        names,
        records,
        cfg.n_background == 0,
    )
}

/// Replaces the last support instance of `class` with a mislabeled sample:
/// a unit vector on the far side of `donor`'s prototype, pushed away from
/// `class`. The other rows of `class` are left as drawn.
pub fn plant_outlier(episode: &mut Episode, class: usize, donor: usize) -> Result<usize> {
    let n = episode.n_way();
    if class >= n || donor >= n || class == donor {
        return Err(Error::Config(format!("invalid outlier classes {class} / {donor} for {n}-way episode")));
    }
    let mean = |c: usize| -> Vec<f64> {
        let rows = &episode.support[c];
        let mut m = vec![0.0; episode.dim];
        for r in rows {
            m.iter_mut().zip(&r.embedding).for_each(|(a, b)| *a += b / rows.len() as f64);
        }
        m
    };
    let (own, other) = (mean(class), mean(donor));
    let mut v: Vec<f64> = other.iter().zip(&own).map(|(o, s)| o + 0.5 * (o - s)).collect();
    let l = norm(&v);
    if l == 0.0 {
        return Err(Error::contract("degenerate outlier direction"));
    }
    v.iter_mut().for_each(|x| *x /= l);
    let k = episode.support[class].len();
    episode.support[class][k - 1].embedding = v;
    Ok(k - 1)
}

/// Mean pairwise cosine similarity between the rows of `m`.
pub fn mean_pairwise_cosine(m: &Tensor) -> f64 {
    let n = m.rows();
    if n < 2 {
        return 0.0;
    }
    let mut total = 0.0;
    for i in 0..n {
        for j in (i + 1)..n {
            let (a, b) = (m.row_slice(i), m.row_slice(j));
            total += dot(a, b) / (norm(a) * norm(b));
        }
    }
    total / (n * (n - 1) / 2) as f64
}
