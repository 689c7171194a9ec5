//! Synthetic RGB-D plates with analytic nutrition labels.
//!
//! Each scene holds 1–3 superellipse domes `h = H·(1 − |dx/a|^p − |dy/b|^p)`
//! on a flat plate. Colour encodes the food class; height only shows up in
//! the depth image, so mass cannot be recovered from RGB alone.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{depth_path, rgb_path, write_depth, write_rgb};
use crate::decoder::NUM_NUTRIENTS;
use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Food classes with RGB colour and per-gram `[kcal, fat, carb, protein]`.
pub const CLASSES: [FoodClass; 4] = [
    FoodClass {
        name: "red",
        color: [0.80, 0.15, 0.10],
        per_gram: [2.5, 0.15, 0.02, 0.26],
    },
    FoodClass {
        name: "yellow",
        color: [0.90, 0.80, 0.20],
        per_gram: [1.3, 0.03, 0.28, 0.04],
    },
    FoodClass {
        name: "green",
        color: [0.20, 0.70, 0.20],
        per_gram: [0.4, 0.05, 0.07, 0.03],
    },
    FoodClass {
        name: "brown",
        color: [0.50, 0.30, 0.10],
        per_gram: [3.2, 0.12, 0.35, 0.08],
    },
];

const PLATE_COLOR: [f64; 3] = [0.90, 0.90, 0.88];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FoodClass {
    pub name: &'static str,
    pub color: [f64; 3],
    pub per_gram: [f64; 4],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    /// Side of the square images written to disk.
    pub image_size: usize,
    pub max_blobs: usize,
    /// Camera-to-plate distance (cm).
    pub camera_distance: f64,
    /// Distance mapped to depth value 1.0 (cm).
    pub depth_range: f64,
    /// Plate area covered by one pixel (cm²).
    pub pixel_area: f64,
    /// g/cm³
    pub density: f64,
    pub height_range: (f64, f64),
    /// Semi-axis range in pixels.
    pub axis_range: (f64, f64),
    pub exponent_range: (f64, f64),
    /// Blobs stay this many pixels clear of the border.
    pub margin: f64,
    pub plate_noise: f64,
    pub test_fraction: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            image_size: 68,
            max_blobs: 3,
            camera_distance: 40.0,
            depth_range: 50.0,
            pixel_area: 0.5,
            density: 1.0,
            height_range: (1.0, 4.0),
            axis_range: (6.0, 14.0),
            exponent_range: (1.5, 4.0),
            margin: 3.0,
            plate_noise: 0.02,
            test_fraction: 0.2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Blob {
    pub class: usize,
    pub cx: f64,
    pub cy: f64,
    pub a: f64,
    pub b: f64,
    pub exponent: f64,
    pub height: f64,
    pub tint: [f64; 3],
}

impl Blob {
    /// Height at pixel centre `(x + 0.5, y + 0.5)`; zero outside the blob.
    pub fn height_at(&self, x: usize, y: usize) -> f64 {
        let dx = ((x as f64 + 0.5 - self.cx) / self.a).abs();
        let dy = ((y as f64 + 0.5 - self.cy) / self.b).abs();
        let u = dx.powf(self.exponent) + dy.powf(self.exponent);
        if u < 1.0 {
            self.height * (1.0 - u)
        } else {
            0.0
        }
    }

    fn bbox(&self) -> (f64, f64, f64, f64) {
        (self.cx - self.a, self.cx + self.a, self.cy - self.b, self.cy + self.b)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub blobs: Vec<Blob>,
    pub rgb: Tensor,
    pub depth: Tensor,
    /// `[size, size]` food height in cm.
    pub heights: Tensor,
    pub label: [f64; NUM_NUTRIENTS],
}

/// Rounds through the 4-decimal text form used in `metadata.csv`, so labels
/// survive a write/read cycle bit-exactly.
pub fn canonical_label(v: f64) -> f64 {
    format!("{v:.4}").parse().expect("formatted float parses")
}

/// Label of a set of blobs under `config`, before text rounding.
pub fn analytic_label(blobs: &[Blob], config: &SynthConfig) -> [f64; NUM_NUTRIENTS] {
    let n = config.image_size;
    let mut class_height = [0.0; CLASSES.len()];
    for y in 0..n {
        for x in 0..n {
            // blobs never overlap; take the tallest for robustness
            let top = blobs
                .iter()
                .map(|b| (b.height_at(x, y), b.class))
                .fold((0.0, 0), |acc, v| if v.0 > acc.0 { v } else { acc });
            class_height[top.1] += top.0;
        }
    }
    let mut label = [0.0; NUM_NUTRIENTS];
    for (c, h) in class_height.iter().enumerate() {
        let grams = config.density * config.pixel_area * h;
        let k = CLASSES[c].per_gram;
        label[0] += k[0] * grams;
        label[1] += grams;
        label[2] += k[1] * grams;
        label[3] += k[2] * grams;
        label[4] += k[3] * grams;
    }
    label
}

/// Renders `blobs`; `rng` only drives plate noise.
pub fn render(blobs: &[Blob], config: &SynthConfig, rng: &mut ChaCha8Rng) -> Scene {
    let n = config.image_size;
    let mut rgb = Tensor::zeros(&[n, n, 3]);
    let mut depth = Tensor::zeros(&[n, n, 1]);
    let mut heights = Tensor::zeros(&[n, n]);
    for y in 0..n {
        for x in 0..n {
            let top = blobs
                .iter()
                .map(|b| (b.height_at(x, y), Some(b)))
                .fold((0.0, None), |acc, v| if v.0 > acc.0 { v } else { acc });
            let noise: f64 = rng.gen_range(-config.plate_noise..=config.plate_noise);
            let color = match top.1 {
                Some(b) => std::array::from_fn(|k| CLASSES[b.class].color[k] + b.tint[k]),
                None => PLATE_COLOR.map(|c| c + noise),
            };
            for k in 0..3 {
                rgb.data_mut()[(y * n + x) * 3 + k] = color[k].clamp(0.0, 1.0);
            }
            heights.data_mut()[y * n + x] = top.0;
            depth.data_mut()[y * n + x] = ((config.camera_distance - top.0) / config.depth_range).clamp(0.0, 1.0);
        }
    }
    Scene {
        label: analytic_label(blobs, config),
        blobs: blobs.to_vec(),
        rgb,
        depth,
        heights,
    }
}

fn sample_blobs(config: &SynthConfig, rng: &mut ChaCha8Rng) -> Vec<Blob> {
    let count = rng.gen_range(1..=config.max_blobs.max(1));
    let size = config.image_size as f64;
    let mut blobs: Vec<Blob> = Vec::with_capacity(count);
    let max_axis = config.axis_range.1.min(size / 2.0 - config.margin - 1.0);
    let min_axis = config.axis_range.0.min(max_axis);
    for _ in 0..count {
        for _attempt in 0..50 {
            let a = rng.gen_range(min_axis..=max_axis);
            let b = rng.gen_range(min_axis..=max_axis);
            let blob = Blob {
                class: rng.gen_range(0..CLASSES.len()),
                cx: rng.gen_range(a + config.margin..=size - a - config.margin),
                cy: rng.gen_range(b + config.margin..=size - b - config.margin),
                a,
                b,
                exponent: rng.gen_range(config.exponent_range.0..=config.exponent_range.1),
                height: rng.gen_range(config.height_range.0..=config.height_range.1),
                tint: std::array::from_fn(|_| rng.gen_range(-0.05..=0.05)),
            };
            let (x0, x1, y0, y1) = blob.bbox();
            let clear = blobs.iter().all(|o| {
                let (ox0, ox1, oy0, oy1) = o.bbox();
                x1 < ox0 || ox1 < x0 || y1 < oy0 || oy1 < y0
            });
            if clear {
                blobs.push(blob);
                break;
            }
        }
    }
    blobs
}

/// One random scene; deterministic in `rng`.
pub fn random_scene(config: &SynthConfig, rng: &mut ChaCha8Rng) -> Scene {
    let blobs = sample_blobs(config, rng);
    render(&blobs, config, rng)
}

pub fn dish_id(i: usize) -> String {
    format!("dish_{i:04}")
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SynthSummary {
    pub n: usize,
    pub train: usize,
    pub test: usize,
    pub label_min: [f64; NUM_NUTRIENTS],
    pub label_max: [f64; NUM_NUTRIENTS],
}

/// Writes `n` scenes under `out` in the dataset layout. The last
/// `round(n · test_fraction)` dishes form the test split.
pub fn synth_generate(n: usize, seed: u64, config: &SynthConfig, out: &Path) -> Result<SynthSummary> {
    if n == 0 {
        return Err(Error::config("synthetic dataset size must be at least 1"));
    }
    if config.image_size < 8 || !(0.0..1.0).contains(&config.test_fraction) {
        return Err(Error::config("synth image_size must be ≥ 8 and test_fraction in [0, 1)"));
    }
    fs::create_dir_all(out.join("images"))?;
    fs::create_dir_all(out.join("splits"))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut meta = String::from("dish_id,calories,mass,fat,carb,protein\n");
    let mut label_min = [f64::INFINITY; NUM_NUTRIENTS];
    let mut label_max = [f64::NEG_INFINITY; NUM_NUTRIENTS];
    let n_test = ((n as f64) * config.test_fraction).round() as usize;
    let n_train = n - n_test;
    let (mut train, mut test) = (String::new(), String::new());
    for i in 0..n {
        let scene = random_scene(config, &mut rng);
        let id = dish_id(i);
        write_rgb(&rgb_path(out, &id), &scene.rgb)?;
        write_depth(&depth_path(out, &id), &scene.depth)?;
        let label = scene.label.map(canonical_label);
        write!(meta, "{id}").expect("string write");
        for j in 0..NUM_NUTRIENTS {
            write!(meta, ",{:.4}", label[j]).expect("string write");
            label_min[j] = label_min[j].min(label[j]);
            label_max[j] = label_max[j].max(label[j]);
        }
        meta.push('\n');
        let split = if i < n_train { &mut train } else { &mut test };
        split.push_str(&id);
        split.push('\n');
    }
    fs::write(out.join("metadata.csv"), meta)?;
    fs::write(out.join("splits/train.txt"), train)?;
    fs::write(out.join("splits/test.txt"), test)?;
    Ok(SynthSummary {
        n,
        train: n_train,
        test: n_test,
        label_min,
        label_max,
    })
}

#[cfg(test)]
mod tests {
    use std::f64::consts::PI;

    use super::*;
    use crate::data::{load_dataset, Split};

    fn dome(height: f64, a: f64, b: f64) -> Blob {
        Blob {
            class: 0,
            cx: 34.0,
            cy: 34.0,
            a,
            b,
            exponent: 2.0,
            height,
            tint: [0.0; 3],
        }
    }

    #[test]
    fn single_dome_matches_closed_form_volume() {
        let config = SynthConfig::default();
        let blob = dome(2.0, 14.0, 10.0);
        let label = analytic_label(&[blob], &config);
        // elliptic paraboloid: V = H·π·a·b / 2 (pixel units)
        let expect_mass = config.density * config.pixel_area * 2.0 * PI * 14.0 * 10.0 / 2.0;
        assert!((label[1] - expect_mass).abs() / expect_mass < 5e-3, "{} vs {expect_mass}", label[1]);
        let k = CLASSES[0].per_gram;
        assert_eq!(label[0], k[0] * label[1]);
        assert_eq!(label[4], k[3] * label[1]);
    }

    #[test]
    fn doubling_height_doubles_mass_and_keeps_rgb() {
        let config = SynthConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let blobs = sample_blobs(&config, &mut rng);
        let tall: Vec<Blob> = blobs.iter().map(|b| Blob { height: 2.0 * b.height, ..*b }).collect();
        let s1 = render(&blobs, &config, &mut ChaCha8Rng::seed_from_u64(9));
        let s2 = render(&tall, &config, &mut ChaCha8Rng::seed_from_u64(9));
        assert_eq!(s1.rgb, s2.rgb);
        assert_ne!(s1.depth, s2.depth);
        for j in 0..NUM_NUTRIENTS {
            assert_eq!(s2.label[j], 2.0 * s1.label[j]);
        }
    }

    #[test]
    fn nutrients_are_not_proportional() {
        for i in 0..4 {
            for j in i + 1..4 {
                let (a, b) = (CLASSES[i].per_gram, CLASSES[j].per_gram);
                let ratios: Vec<f64> = (0..4).map(|k| a[k] / b[k]).collect();
                assert!(ratios.windows(2).any(|w| (w[0] - w[1]).abs() > 1e-6));
            }
        }
    }

    #[test]
    fn generate_is_deterministic_and_round_trips() {
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        let config = SynthConfig::default();
        let s1 = synth_generate(6, 7, &config, d1.path()).unwrap();
        let s2 = synth_generate(6, 7, &config, d2.path()).unwrap();
        assert_eq!(s1, s2);
        assert_eq!((s1.train, s1.test), (5, 1));
        for rel in ["metadata.csv", "splits/train.txt", "images/dish_0003_rgb.png", "images/dish_0003_depth.png"] {
            assert_eq!(fs::read(d1.path().join(rel)).unwrap(), fs::read(d2.path().join(rel)).unwrap());
        }

        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let scenes: Vec<Scene> = (0..6).map(|_| random_scene(&config, &mut rng)).collect();
        let train = load_dataset(d1.path(), Split::Train).unwrap();
        for (s, scene) in train.iter().zip(&scenes) {
            assert_eq!(s.label, scene.label.map(canonical_label));
            assert!(s.input.rgb.max_abs_diff(&scene.rgb) <= 0.5 / 255.0 + 1e-12);
            assert!(s.input.depth.max_abs_diff(&scene.depth) <= 0.5 / 65535.0 + 1e-12);
        }
        assert!(synth_generate(0, 1, &config, d1.path()).is_err());
    }
}
