//! Procedurally rendered shape benchmark with easy, medium and hard OOD suites.
//!
//! ID classes are shape families drawn over a two-colour gradient with pixel
//! noise. Medium OOD uses held-out families with the same texture, easy OOD is
//! near-constant or smooth, and hard OOD is a collage of high-frequency patches.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const ID_FAMILIES: [Shape; 4] = [Shape::Disk, Shape::Square, Shape::Triangle, Shape::Cross];
const HELD_OUT_FAMILIES: [Shape; 2] = [Shape::Ring, Shape::TwoBars];
const PIXEL_NOISE: f64 = 0.02;
const EASY_NOISE: f64 = 0.005;
const MIN_CONTRAST: f64 = 0.3;
const BACKGROUND_SPREAD: f64 = 0.2;
const SUPERSAMPLE: usize = 3;
const PATCH: usize = 8;
const HARD_DITHER: f64 = 0.2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchmarkSpec {
    pub image_size: usize,
    pub channels: usize,
    pub num_classes: usize,
    pub train_per_class: usize,
    pub val_per_class: usize,
    pub test_per_class: usize,
    pub ood_per_suite: usize,
}

impl Default for BenchmarkSpec {
    fn default() -> Self {
        BenchmarkSpec {
            image_size: 32,
            channels: 3,
            num_classes: 4,
            train_per_class: 500,
            val_per_class: 100,
            test_per_class: 250,
            ood_per_suite: 1000,
        }
    }
}

impl BenchmarkSpec {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.image_size < PATCH || self.image_size % PATCH != 0 {
            return fail(format!("image_size must be a positive multiple of {PATCH}, got {}", self.image_size));
        }
        if self.channels != 1 && self.channels != 3 {
            return fail(format!("channels must be 1 or 3, got {}", self.channels));
        }
        if self.num_classes < 2 || self.num_classes > ID_FAMILIES.len() {
            return fail(format!("num_classes must be in 2..={}, got {}", ID_FAMILIES.len(), self.num_classes));
        }
        if self.train_per_class == 0 || self.val_per_class == 0 || self.test_per_class == 0 || self.ood_per_suite == 0 {
            return fail("every split needs at least one sample".into());
        }
        Ok(())
    }
}

/// Generated splits; images are `[N, C, H, W]` `u8`.
#[derive(Debug, Clone, PartialEq)]
pub struct Benchmark {
    pub train_x: Tensor<u8>,
    pub train_y: Vec<usize>,
    pub val_x: Tensor<u8>,
    pub val_y: Vec<usize>,
    pub test_x: Tensor<u8>,
    pub test_y: Vec<usize>,
    pub ood_easy: Tensor<u8>,
    pub ood_medium: Tensor<u8>,
    pub ood_hard: Tensor<u8>,
}

impl Benchmark {
    pub fn ood_suites(&self) -> [(&'static str, &Tensor<u8>); 3] {
        [("easy", &self.ood_easy), ("medium", &self.ood_medium), ("hard", &self.ood_hard)]
    }
}

pub fn to_unit(t: &Tensor<u8>) -> Tensor<f32> {
    t.map(|v| v as f32 / 255.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Shape {
    Disk,
    Square,
    Triangle,
    Cross,
    Ring,
    TwoBars,
}

impl Shape {
    /// Membership of a point in shape-local coordinates (unit circumradius).
    fn contains(self, x: f64, y: f64) -> bool {
        match self {
            Shape::Disk => x * x + y * y <= 1.0,
            Shape::Square => x.abs().max(y.abs()) <= 0.75,
            Shape::Triangle => (0..3).all(|k| {
                let a = PI / 2.0 + 2.0 * PI * k as f64 / 3.0;
                x * a.cos() + y * a.sin() <= 0.5
            }),
            Shape::Cross => (x.abs() <= 0.3 && y.abs() <= 1.0) || (y.abs() <= 0.3 && x.abs() <= 1.0),
            Shape::Ring => (0.55..=1.0).contains(&(x * x + y * y).sqrt()),
            Shape::TwoBars => y.abs() <= 0.9 && (0.3..=0.7).contains(&x.abs()),
        }
    }
}

fn random_color(rng: &mut impl Rng, channels: usize) -> Vec<f64> {
    (0..channels).map(|_| rng.random::<f64>()).collect()
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

struct Renderer {
    s: usize,
    c: usize,
}

impl Renderer {
    /// Linear gradient between two colours along a random direction, `[C, H, W]`.
    fn gradient(&self, rng: &mut impl Rng, c0: &[f64], c1: &[f64]) -> Vec<f64> {
        let a = rng.random_range(0.0..2.0 * PI);
        let (dx, dy) = (a.cos(), a.sin());
        let half = (self.s as f64 - 1.0) / 2.0;
        let span = half * (dx.abs() + dy.abs()).max(1e-9);
        let mut out = vec![0.0; self.c * self.s * self.s];
        for i in 0..self.s {
            for j in 0..self.s {
                let t = 0.5 + 0.5 * ((j as f64 - half) * dx + (i as f64 - half) * dy) / span;
                for ch in 0..self.c {
                    out[(ch * self.s + i) * self.s + j] = c0[ch] + (c1[ch] - c0[ch]) * t;
                }
            }
        }
        out
    }

    fn shape_image(&self, rng: &mut impl Rng, shape: Shape, noise: &Normal<f64>) -> Vec<u8> {
        let c0 = random_color(rng, self.c);
        let c1: Vec<f64> = c0
            .iter()
            .map(|&v| (v + rng.random_range(-BACKGROUND_SPREAD..BACKGROUND_SPREAD)).clamp(0.0, 1.0))
            .collect();
        let mut img = self.gradient(rng, &c0, &c1);
        let bg = mean(&c0.iter().zip(&c1).map(|(a, b)| 0.5 * (a + b)).collect::<Vec<_>>());
        let fg = loop {
            let f = random_color(rng, self.c);
            if (mean(&f) - bg).abs() >= MIN_CONTRAST {
                break f;
            }
        };
        let s = self.s as f64;
        let radius = s * rng.random_range(0.25..0.4);
        let cx = s / 2.0 + rng.random_range(-0.12..0.12) * s;
        let cy = s / 2.0 + rng.random_range(-0.12..0.12) * s;
        let rot = rng.random_range(0.0..2.0 * PI);
        let (sin, cos) = rot.sin_cos();
        let n = SUPERSAMPLE as f64;
        for i in 0..self.s {
            for j in 0..self.s {
                let mut hits = 0;
                for si in 0..SUPERSAMPLE {
                    for sj in 0..SUPERSAMPLE {
                        let px = j as f64 + (sj as f64 + 0.5) / n - cx;
                        let py = i as f64 + (si as f64 + 0.5) / n - cy;
                        let (lx, ly) = ((cos * px + sin * py) / radius, (-sin * px + cos * py) / radius);
                        hits += shape.contains(lx, ly) as usize;
                    }
                }
                let cover = hits as f64 / (n * n);
                for ch in 0..self.c {
                    let v = &mut img[(ch * self.s + i) * self.s + j];
                    *v += (fg[ch] - *v) * cover;
                }
            }
        }
        img.iter().map(|&v| quantize(v + noise.sample(rng))).collect()
    }

    fn easy_image(&self, rng: &mut impl Rng) -> Vec<u8> {
        if rng.random_bool(0.5) {
            let color = random_color(rng, self.c);
            let noise = Normal::new(0.0, EASY_NOISE).expect("positive sigma");
            (0..self.c * self.s * self.s)
                .map(|k| quantize(color[k / (self.s * self.s)] + noise.sample(rng)))
                .collect()
        } else {
            let c0 = random_color(rng, self.c);
            let c1 = random_color(rng, self.c);
            self.gradient(rng, &c0, &c1).into_iter().map(quantize).collect()
        }
    }

    fn hard_image(&self, rng: &mut impl Rng) -> Vec<u8> {
        let mut img = vec![0.0; self.c * self.s * self.s];
        let tiles = self.s / PATCH;
        for ti in 0..tiles {
            for tj in 0..tiles {
                let kind = rng.random_range(0..4);
                let a = random_color(rng, self.c);
                let b = random_color(rng, self.c);
                let horizontal = rng.random_bool(0.5);
                for i in 0..PATCH {
                    for j in 0..PATCH {
                        let (y, x) = (ti * PATCH + i, tj * PATCH + j);
                        let salt = rng.random_bool(0.5);
                        for ch in 0..self.c {
                            let v = match kind {
                                0 => rng.random::<f64>(),
                                1 => if (i + j) % 2 == 0 { a[ch] } else { b[ch] },
                                2 => {
                                    let k = if horizontal { i } else { j };
                                    if k % 2 == 0 { a[ch] } else { b[ch] }
                                }
                                _ => if salt { a[ch] } else { rng.random::<f64>() },
                            };
                            // Structured patches carry dither so they stay incompressible.
                            let dither = if kind == 0 { 0.0 } else { rng.random_range(-HARD_DITHER..HARD_DITHER) };
                            img[(ch * self.s + y) * self.s + x] = v + dither;
                        }
                    }
                }
            }
        }
        img.into_iter().map(quantize).collect()
    }
}

fn stack(s: usize, c: usize, images: Vec<Vec<u8>>) -> Tensor<u8> {
    let n = images.len();
    Tensor::new(vec![n, c, s, s], images.concat()).expect("consistent image sizes")
}

fn split(
    r: &Renderer,
    rng: &mut impl Rng,
    noise: &Normal<f64>,
    k: usize,
    per_class: usize,
) -> (Tensor<u8>, Vec<usize>) {
    let labels: Vec<usize> = (0..k * per_class).map(|i| i % k).collect();
    let images = labels.iter().map(|&y| r.shape_image(rng, ID_FAMILIES[y], noise)).collect();
    (stack(r.s, r.c, images), labels)
}

/// Generates every split from independent streams of one seed.
pub fn generate_benchmark(seed: u64, spec: &BenchmarkSpec) -> Result<Benchmark> {
    spec.validate()?;
    let r = Renderer { s: spec.image_size, c: spec.channels };
    let noise = Normal::new(0.0, PIXEL_NOISE).expect("positive sigma");
    let stream = |id: u64| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(id);
        rng
    };
    let k = spec.num_classes;
    let (train_x, train_y) = split(&r, &mut stream(1), &noise, k, spec.train_per_class);
    let (val_x, val_y) = split(&r, &mut stream(2), &noise, k, spec.val_per_class);
    let (test_x, test_y) = split(&r, &mut stream(3), &noise, k, spec.test_per_class);
    let n = spec.ood_per_suite;
    let mut rng = stream(4);
    let ood_easy = stack(r.s, r.c, (0..n).map(|_| r.easy_image(&mut rng)).collect());
    let mut rng = stream(5);
    let ood_medium = stack(
        r.s,
        r.c,
        (0..n)
            .map(|i| r.shape_image(&mut rng, HELD_OUT_FAMILIES[i % HELD_OUT_FAMILIES.len()], &noise))
            .collect(),
    );
    let mut rng = stream(6);
    let ood_hard = stack(r.s, r.c, (0..n).map(|_| r.hard_image(&mut rng)).collect());
    Ok(Benchmark {
        train_x,
        train_y,
        val_x,
        val_y,
        test_x,
        test_y,
        ood_easy,
        ood_medium,
        ood_hard,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::complexity::complexities;

    fn small() -> BenchmarkSpec {
        BenchmarkSpec {
            train_per_class: 20,
            val_per_class: 5,
            test_per_class: 30,
            ood_per_suite: 60,
            ..BenchmarkSpec::default()
        }
    }

    #[test]
    fn same_seed_is_bit_identical() {
        let a = generate_benchmark(11, &small()).unwrap();
        assert_eq!(a, generate_benchmark(11, &small()).unwrap());
        assert_ne!(a.train_x, generate_benchmark(12, &small()).unwrap().train_x);
    }

    #[test]
    fn shapes_and_labels() {
        let b = generate_benchmark(1, &small()).unwrap();
        assert_eq!(b.train_x.shape(), &[80, 3, 32, 32]);
        assert_eq!(b.val_x.shape(), &[20, 3, 32, 32]);
        assert_eq!(b.ood_hard.shape(), &[60, 3, 32, 32]);
        for y in 0..4 {
            assert_eq!(b.train_y.iter().filter(|&&v| v == y).count(), 20);
        }
    }

    #[test]
    fn splits_share_no_images() {
        let b = generate_benchmark(5, &small()).unwrap();
        let mut seen = std::collections::HashSet::new();
        for t in [&b.train_x, &b.val_x, &b.test_x, &b.ood_easy, &b.ood_medium, &b.ood_hard] {
            for i in 0..t.batch() {
                assert!(seen.insert(t.item_slice(i).to_vec()));
            }
        }
    }

    #[test]
    fn mean_complexity_orders_easy_id_hard() {
        let b = generate_benchmark(3, &small()).unwrap();
        let m = |t: &Tensor<u8>| mean(&complexities(&to_unit(t)).unwrap());
        let (easy, id, hard) = (m(&b.ood_easy), m(&b.test_x), m(&b.ood_hard));
        assert!(easy < id && id < hard, "easy {easy} id {id} hard {hard}");
    }

    #[test]
    fn rejects_invalid_spec() {
        for bad in [
            BenchmarkSpec { image_size: 12, ..small() },
            BenchmarkSpec { channels: 2, ..small() },
            BenchmarkSpec { num_classes: 5, ..small() },
            BenchmarkSpec { test_per_class: 0, ..small() },
        ] {
            assert!(matches!(generate_benchmark(0, &bad), Err(Error::Config(_))));
        }
    }

    #[test]
    fn shape_membership() {
        assert!(Shape::Disk.contains(0.0, 0.0));
        assert!(!Shape::Ring.contains(0.0, 0.0));
        assert!(Shape::Ring.contains(0.8, 0.0));
        assert!(!Shape::TwoBars.contains(0.0, 0.0));
        assert!(Shape::Triangle.contains(0.0, 0.0) && !Shape::Triangle.contains(0.0, 0.6));
        assert!(Shape::Cross.contains(0.9, 0.0) && !Shape::Cross.contains(0.6, 0.6));
    }
}
