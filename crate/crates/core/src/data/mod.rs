//! Dataset layout, loading, augmentation and the synthetic generator.
//!
//! ```text
//! root/metadata.csv            dish_id,calories,mass,fat,carb,protein
//! root/images/{id}_rgb.png     8-bit RGB
//! root/images/{id}_depth.png   16-bit grayscale
//! root/splits/{train,test}.txt one dish id per line
//! ```

pub mod augment;
pub mod synth;

use std::collections::{HashMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::decoder::NUM_NUTRIENTS;
use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub use augment::{augment, preprocess, AugmentPolicy};
pub use synth::{synth_generate, SynthConfig, SynthSummary};

pub const METADATA_HEADER: [&str; 6] = ["dish_id", "calories", "mass", "fat", "carb", "protein"];

/// RGB `[H, W, 3]` in `[0, 1]` and depth `[H, W, 1]` in `[0, 1]`
/// (normalized after preprocessing).
#[derive(Debug, Clone, PartialEq)]
pub struct InputPair {
    pub rgb: Tensor,
    pub depth: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub dish_id: String,
    pub input: InputPair,
    pub label: [f64; NUM_NUTRIENTS],
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn file_name(self) -> &'static str {
        match self {
            Split::Train => "train.txt",
            Split::Test => "test.txt",
        }
    }
}

pub fn rgb_path(root: &Path, dish_id: &str) -> PathBuf {
    root.join("images").join(format!("{dish_id}_rgb.png"))
}

pub fn depth_path(root: &Path, dish_id: &str) -> PathBuf {
    root.join("images").join(format!("{dish_id}_depth.png"))
}

/// Parses `metadata.csv` into `dish_id -> label`, in file order.
pub fn read_metadata(path: &Path) -> Result<Vec<(String, [f64; NUM_NUTRIENTS])>> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_path(path)?;
    let header: Vec<String> = reader.headers()?.iter().map(|h| h.trim().to_string()).collect();
    if header != METADATA_HEADER {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            line: 1,
            msg: format!("expected header {}, got {}", METADATA_HEADER.join(","), header.join(",")),
        });
    }
    let mut rows = Vec::new();
    let mut seen = HashSet::new();
    for (i, record) in reader.records().enumerate() {
        let line = i + 2;
        let parse_err = |msg: String| Error::Parse {
            path: path.to_path_buf(),
            line,
            msg,
        };
        let record = record.map_err(|e| parse_err(e.to_string()))?;
        if record.len() != METADATA_HEADER.len() {
            return Err(parse_err(format!("expected 6 fields, got {}", record.len())));
        }
        let id = record[0].trim().to_string();
        if id.is_empty() {
            return Err(parse_err("empty dish_id".into()));
        }
        let mut label = [0.0f64; NUM_NUTRIENTS];
        for (j, slot) in label.iter_mut().enumerate() {
            let field = record[j + 1].trim();
            *slot = field
                .parse()
                .map_err(|_| parse_err(format!("column {} is not a number: '{field}'", METADATA_HEADER[j + 1])))?;
            if !slot.is_finite() {
                return Err(parse_err(format!("column {} is not finite", METADATA_HEADER[j + 1])));
            }
            if *slot < 0.0 {
                return Err(Error::Data(format!(
                    "{}:{line}: negative {} for dish {id}",
                    path.display(),
                    METADATA_HEADER[j + 1]
                )));
            }
        }
        if !seen.insert(id.clone()) {
            return Err(parse_err(format!("duplicate dish_id {id}")));
        }
        rows.push((id, label));
    }
    Ok(rows)
}

fn read_split(root: &Path, split: Split) -> Result<Vec<String>> {
    let path = root.join("splits").join(split.file_name());
    let text = fs::read_to_string(&path)?;
    Ok(text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(String::from)
        .collect())
}

/// Checks that no dish id appears in both splits or twice in one split.
pub fn check_split_integrity(train: &[String], test: &[String]) -> Result<()> {
    for (name, ids) in [("train", train), ("test", test)] {
        let mut seen = HashSet::new();
        for id in ids {
            if !seen.insert(id) {
                return Err(Error::Integrity(format!("dish {id} listed twice in {name} split")));
            }
        }
    }
    let train: HashSet<&String> = train.iter().collect();
    if let Some(id) = test.iter().find(|id| train.contains(id)) {
        return Err(Error::Integrity(format!("dish {id} appears in both train and test splits")));
    }
    Ok(())
}

pub fn read_rgb(path: &Path) -> Result<Tensor> {
    let img = image::open(path)?.to_rgb8();
    let (w, h) = img.dimensions();
    let data = img.into_raw().into_iter().map(|v| v as f64 / 255.0).collect();
    Tensor::new(vec![h as usize, w as usize, 3], data)
}

pub fn read_depth(path: &Path) -> Result<Tensor> {
    let img = image::open(path)?.to_luma16();
    let (w, h) = img.dimensions();
    let data = img.into_raw().into_iter().map(|v| v as f64 / 65535.0).collect();
    Tensor::new(vec![h as usize, w as usize, 1], data)
}

pub fn write_rgb(path: &Path, rgb: &Tensor) -> Result<()> {
    let [h, w, 3] = rgb.shape()[..] else {
        return Err(Error::dim(format!("rgb image must be [H, W, 3], got {:?}", rgb.shape())));
    };
    let bytes = rgb.data().iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    let img = image::RgbImage::from_raw(w as u32, h as u32, bytes).expect("buffer matches dims");
    img.save_with_format(path, image::ImageFormat::Png)?;
    Ok(())
}

pub fn write_depth(path: &Path, depth: &Tensor) -> Result<()> {
    let [h, w, 1] = depth.shape()[..] else {
        return Err(Error::dim(format!("depth image must be [H, W, 1], got {:?}", depth.shape())));
    };
    let px = depth.data().iter().map(|v| (v.clamp(0.0, 1.0) * 65535.0).round() as u16).collect();
    let img: image::ImageBuffer<image::Luma<u16>, Vec<u16>> =
        image::ImageBuffer::from_raw(w as u32, h as u32, px).expect("buffer matches dims");
    img.save_with_format(path, image::ImageFormat::Png)?;
    Ok(())
}

/// Loads every sample of `split`, with raw (un-normalized) images.
pub fn load_dataset(root: &Path, split: Split) -> Result<Vec<Sample>> {
    let train = read_split(root, Split::Train)?;
    let test = read_split(root, Split::Test)?;
    check_split_integrity(&train, &test)?;
    let labels: HashMap<String, [f64; NUM_NUTRIENTS]> = read_metadata(&root.join("metadata.csv"))?.into_iter().collect();
    let ids = match split {
        Split::Train => train,
        Split::Test => test,
    };
    ids.into_iter()
        .map(|dish_id| {
            let label = *labels
                .get(&dish_id)
                .ok_or_else(|| Error::Data(format!("dish {dish_id} is listed in a split but missing from metadata.csv")))?;
            let load = |p: PathBuf, f: fn(&Path) -> Result<Tensor>| {
                if !p.is_file() {
                    return Err(Error::MissingImage {
                        dish_id: dish_id.clone(),
                        path: p,
                    });
                }
                f(&p)
            };
            let rgb = load(rgb_path(root, &dish_id), read_rgb)?;
            let depth = load(depth_path(root, &dish_id), read_depth)?;
            if rgb.shape()[..2] != depth.shape()[..2] {
                return Err(Error::Data(format!(
                    "dish {dish_id}: rgb {:?} and depth {:?} sizes differ",
                    rgb.shape(),
                    depth.shape()
                )));
            }
            Ok(Sample {
                dish_id,
                input: InputPair { rgb, depth },
                label,
            })
        })
        .collect()
}
