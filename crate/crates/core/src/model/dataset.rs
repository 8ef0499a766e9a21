//! Deterministic synthetic scenes of striped rectangles.
//!
//! Each class is a (hue, pattern) pair. Classes in one super-category share a
//! hue and differ only in stripe pattern, so within-group confusion is the
//! easy mistake and cross-group confusion the hard one. Objects sit in
//! distinct quadrants of the image, on an even-pixel grid.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr_normal::standard_normal;
use serde::{Deserialize, Serialize};

use super::config::ModelConfig;
use crate::autodiff::Tensor;
use crate::error::{Error, Result};

/// A named group of class ids (1-based).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SuperCategory {
    pub name: String,
    pub classes: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSpec {
    pub train_images: usize,
    pub val_images: usize,
    pub image_size: usize,
    /// C, classes numbered 1..=C.
    pub num_classes: usize,
    pub super_categories: Vec<SuperCategory>,
    pub min_objects: usize,
    pub max_objects: usize,
    /// Standard deviation of additive Gaussian pixel noise.
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec {
            train_images: 2000,
            val_images: 400,
            image_size: 32,
            num_classes: 8,
            super_categories: vec![
                SuperCategory {
                    name: "red".into(),
                    classes: vec![1, 2],
                },
                SuperCategory {
                    name: "green".into(),
                    classes: vec![3, 4, 5],
                },
                SuperCategory {
                    name: "blue".into(),
                    classes: vec![6, 7, 8],
                },
            ],
            min_objects: 1,
            max_objects: 4,
            noise_sigma: 0.03,
            seed: 1,
        }
    }
}

/// Ground-truth object: class id in 1..=C and normalised (cx, cy, w, h).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Object {
    pub class: usize,
    pub bbox: [f64; 4],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    /// `[size, size, 3]`, row-major.
    pub image: Tensor,
    pub objects: Vec<Object>,
}

pub type Split = Vec<Sample>;

/// Stripe pattern that distinguishes classes sharing a hue.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Pattern {
    Solid,
    Horizontal,
    Vertical,
    Checker,
}

const PATTERNS: [Pattern; 4] = [
    Pattern::Solid,
    Pattern::Horizontal,
    Pattern::Vertical,
    Pattern::Checker,
];

const HUES: [[f64; 3]; 6] = [
    [0.95, 0.25, 0.2],
    [0.25, 0.9, 0.3],
    [0.3, 0.35, 0.95],
    [0.95, 0.85, 0.2],
    [0.85, 0.3, 0.9],
    [0.2, 0.85, 0.9],
];

pub const BACKGROUND: f64 = 0.1;
const STRIPE_DIM: f64 = 0.45;

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.num_classes == 0 {
            return fail("num_classes must be positive".into());
        }
        let mut seen = vec![false; self.num_classes + 1];
        for sc in &self.super_categories {
            if sc.classes.len() > PATTERNS.len() {
                return fail(format!("super-category `{}` has more than {} classes", sc.name, PATTERNS.len()));
            }
            for &c in &sc.classes {
                if c == 0 || c > self.num_classes || seen[c] {
                    return fail(format!("super-categories must partition 1..={}", self.num_classes));
                }
                seen[c] = true;
            }
        }
        if !seen[1..].iter().all(|&s| s) || self.super_categories.len() > HUES.len() {
            return fail(format!("super-categories must partition 1..={}", self.num_classes));
        }
        if self.min_objects == 0 || self.min_objects > self.max_objects || self.max_objects > 4 {
            return fail("objects per image must satisfy 1 <= min <= max <= 4".into());
        }
        if self.image_size < 16 || self.image_size % 4 != 0 {
            return fail("image_size must be a multiple of 4 and at least 16".into());
        }
        if !(self.noise_sigma >= 0.0) {
            return fail("noise_sigma must be non-negative".into());
        }
        Ok(())
    }

    /// Checks the dataset can be consumed by a model with `cfg`.
    pub fn check_model(&self, cfg: &ModelConfig) -> Result<()> {
        if cfg.queries < self.max_objects {
            return Err(Error::config(format!(
                "K = {} queries cannot cover {} objects per image",
                cfg.queries, self.max_objects
            )));
        }
        if cfg.image_size != self.image_size || cfg.num_classes != self.num_classes {
            return Err(Error::config("dataset and model disagree on image size or class count"));
        }
        Ok(())
    }

    pub fn super_category(&self, name: &str) -> Option<&SuperCategory> {
        self.super_categories.iter().find(|s| s.name == name)
    }

    /// (hue, pattern) of a class.
    pub fn appearance(&self, class: usize) -> ([f64; 3], Pattern) {
        for (gi, sc) in self.super_categories.iter().enumerate() {
            if let Some(pi) = sc.classes.iter().position(|&c| c == class) {
                return (HUES[gi], PATTERNS[pi]);
            }
        }
        unreachable!("validated spec covers every class")
    }
}

mod rand_distr_normal {
    use rand::Rng;

    /// Box-Muller standard normal draw.
    pub fn standard_normal<R: Rng>(rng: &mut R) -> f64 {
        let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
        let u2: f64 = rng.gen::<f64>();
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    }
}

fn pattern_on(p: Pattern, x: usize, y: usize) -> bool {
    match p {
        Pattern::Solid => true,
        Pattern::Horizontal => y % 2 == 0,
        Pattern::Vertical => x % 2 == 0,
        Pattern::Checker => (x / 2 + y / 2) % 2 == 0,
    }
}

fn render(spec: &DatasetSpec, rng: &mut ChaCha8Rng) -> Sample {
    let s = spec.image_size;
    let half = s / 2;
    let n_obj = rng.gen_range(spec.min_objects..=spec.max_objects);
    let mut quads = [0usize, 1, 2, 3];
    quads.shuffle(rng);
    let mut quads = quads[..n_obj].to_vec();
    quads.sort_unstable();

    let mut img = vec![BACKGROUND; s * s * 3];
    let mut objects = Vec::with_capacity(n_obj);
    for q in quads {
        let (ox, oy) = ((q % 2) * half, (q / 2) * half);
        // Even sizes between half/2 and half, even offsets that fit.
        let sizes: Vec<usize> = (half / 2..=half).step_by(2).collect();
        let w = *sizes.choose(rng).expect("non-empty");
        let h = *sizes.choose(rng).expect("non-empty");
        let x0 = ox + 2 * rng.gen_range(0..=(half - w) / 2);
        let y0 = oy + 2 * rng.gen_range(0..=(half - h) / 2);
        let class = rng.gen_range(1..=spec.num_classes);
        let (hue, pat) = spec.appearance(class);
        for y in y0..y0 + h {
            for x in x0..x0 + w {
                let k = if pattern_on(pat, x - x0, y - y0) { 1.0 } else { STRIPE_DIM };
                for c in 0..3 {
                    img[(y * s + x) * 3 + c] = hue[c] * k;
                }
            }
        }
        let sf = s as f64;
        objects.push(Object {
            class,
            bbox: [
                (x0 as f64 + w as f64 / 2.0) / sf,
                (y0 as f64 + h as f64 / 2.0) / sf,
                w as f64 / sf,
                h as f64 / sf,
            ],
        });
    }
    if spec.noise_sigma > 0.0 {
        for v in img.iter_mut() {
            *v += spec.noise_sigma * standard_normal(rng);
        }
    }
    Sample {
        image: Tensor::from_vec(&[s, s, 3], img),
        objects,
    }
}

/// Generates `(train, val)` splits; a pure function of the spec.
pub fn gen_dataset(spec: &DatasetSpec) -> Result<(Split, Split)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let train = (0..spec.train_images).map(|_| render(spec, &mut rng)).collect();
    let val = (0..spec.val_images).map(|_| render(spec, &mut rng)).collect();
    Ok((train, val))
}
