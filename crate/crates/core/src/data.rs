//! Labelled image sets: a seeded synthetic generator and a directory loader.

use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::arch::CutoutSet;
use crate::error::{HlfpError, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
}

/// Images of identical shape with 1-based labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub split: Split,
    pub num_classes: usize,
    /// (channels, height, width)
    pub image_shape: [usize; 3],
    pixels: Vec<f32>,
    labels: Vec<usize>,
}

impl Dataset {
    pub fn new(
        split: Split,
        num_classes: usize,
        image_shape: [usize; 3],
        pixels: Vec<f32>,
        labels: Vec<usize>,
    ) -> Result<Self> {
        let per: usize = image_shape.iter().product();
        if per == 0 || pixels.len() != per * labels.len() {
            return Err(HlfpError::Dataset(format!(
                "{} values for {} images of shape {image_shape:?}",
                pixels.len(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l == 0 || l > num_classes) {
            return Err(HlfpError::Dataset(format!("label {bad} outside 1..={num_classes}")));
        }
        Ok(Dataset {
            split,
            num_classes,
            image_shape,
            pixels,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn image(&self, i: usize) -> &[f32] {
        let per: usize = self.image_shape.iter().product();
        &self.pixels[i * per..(i + 1) * per]
    }

    /// Stacks the images at `indices` into `[B, C, H, W]`.
    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        let mut data = Vec::with_capacity(indices.len() * self.image(0).len());
        for &i in indices {
            data.extend_from_slice(self.image(i));
        }
        let [c, h, w] = self.image_shape;
        Ok((
            Tensor::new(vec![indices.len(), c, h, w], data)?,
            indices.iter().map(|&i| self.labels[i]).collect(),
        ))
    }

    /// Only the samples whose label is in `classes`.
    pub fn restrict(&self, classes: &CutoutSet) -> Dataset {
        let keep: Vec<usize> = (0..self.len()).filter(|&i| classes.contains(self.labels[i])).collect();
        let mut pixels = Vec::new();
        for &i in &keep {
            pixels.extend_from_slice(self.image(i));
        }
        Dataset {
            split: self.split,
            num_classes: self.num_classes,
            image_shape: self.image_shape,
            pixels,
            labels: keep.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    /// Bytes of every pixel and label, for determinism checks.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.pixels.len() * 4 + self.labels.len() * 8);
        for v in &self.pixels {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for &l in &self.labels {
            out.extend_from_slice(&(l as u64).to_le_bytes());
        }
        out
    }
}

/// Parameters of the synthetic generator, written `synthetic:k,n,size,seed`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub num_classes: usize,
    pub per_class: usize,
    pub image_size: usize,
    pub seed: u64,
}

impl FromStr for SyntheticSpec {
    type Err = HlfpError;

    fn from_str(s: &str) -> Result<Self> {
        let body = s
            .strip_prefix("synthetic:")
            .ok_or_else(|| HlfpError::InvalidArgument(format!("`{s}` is not a synthetic:k,n,size,seed spec")))?;
        let parts: Vec<&str> = body.split(',').map(str::trim).collect();
        let num = |i: usize| -> Result<u64> {
            parts
                .get(i)
                .and_then(|p| p.parse().ok())
                .ok_or_else(|| HlfpError::InvalidArgument(format!("`{s}`: expected synthetic:k,n,size,seed")))
        };
        if parts.len() != 4 {
            return Err(HlfpError::InvalidArgument(format!(
                "`{s}`: expected synthetic:k,n,size,seed"
            )));
        }
        Ok(SyntheticSpec {
            num_classes: num(0)? as usize,
            per_class: num(1)? as usize,
            image_size: num(2)? as usize,
            seed: num(3)?,
        })
    }
}

impl SyntheticSpec {
    /// The split with its own derived seed; train and val never share samples.
    pub fn generate(&self, split: Split) -> Result<Dataset> {
        let seed = match split {
            Split::Train => self.seed,
            Split::Val => self.seed ^ 0x9e37_79b9_7f4a_7c15,
        };
        let mut ds = gen_synthetic(self.num_classes, self.per_class, self.image_size, seed)?;
        ds.split = split;
        Ok(ds)
    }
}

pub const MIN_SYNTHETIC_SIZE: usize = 16;

#[derive(Clone, Copy)]
enum Shape {
    Disc,
    Square,
    Triangle,
    Cross,
    Ring,
    Diamond,
}

const SHAPES: [Shape; 6] = [
    Shape::Disc,
    Shape::Square,
    Shape::Triangle,
    Shape::Cross,
    Shape::Ring,
    Shape::Diamond,
];

impl Shape {
    /// Whether the offset `(dx, dy)`, in units of the radius, is inside the shape.
    fn covers(self, dx: f32, dy: f32) -> bool {
        let r2 = dx * dx + dy * dy;
        match self {
            Shape::Disc => r2 <= 1.0,
            Shape::Square => dx.abs() <= 0.8 && dy.abs() <= 0.8,
            Shape::Triangle => dy <= 0.8 && dy >= -1.0 + 2.0 * dx.abs(),
            Shape::Cross => (dx.abs() <= 0.3 && dy.abs() <= 1.0) || (dy.abs() <= 0.3 && dx.abs() <= 1.0),
            Shape::Ring => (0.45..=1.0).contains(&r2),
            Shape::Diamond => dx.abs() + dy.abs() <= 1.0,
        }
    }
}

/// Fully saturated RGB at `hue` in [0, 1), scaled to [-1, 1].
fn hue_rgb(hue: f32) -> [f32; 3] {
    let h = hue * 6.0;
    let x = 1.0 - (h % 2.0 - 1.0).abs();
    let (r, g, b) = match h as usize {
        0 => (1.0, x, 0.0),
        1 => (x, 1.0, 0.0),
        2 => (0.0, 1.0, x),
        3 => (0.0, x, 1.0),
        4 => (x, 0.0, 1.0),
        _ => (1.0, 0.0, x),
    };
    [2.0 * r - 1.0, 2.0 * g - 1.0, 2.0 * b - 1.0]
}

/// `n_per_class` RGB images per class: a class-specific colored shape on a
/// noisy background, with jittered position, size and color. Identical
/// arguments always produce identical data.
pub fn gen_synthetic(k: usize, n_per_class: usize, image_size: usize, seed: u64) -> Result<Dataset> {
    if k < 2 {
        return Err(HlfpError::InvalidArgument(
            "the synthetic generator needs at least 2 classes".into(),
        ));
    }
    if n_per_class == 0 {
        return Err(HlfpError::InvalidArgument("need at least one sample per class".into()));
    }
    if image_size < MIN_SYNTHETIC_SIZE {
        return Err(HlfpError::InvalidArgument(format!(
            "image size {image_size} is too small for the shapes (minimum {MIN_SYNTHETIC_SIZE})"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0f32, 0.15).expect("valid deviation");
    let s = image_size;
    let mut pixels = Vec::with_capacity(k * n_per_class * 3 * s * s);
    let mut labels = Vec::with_capacity(k * n_per_class);
    // sample order interleaves classes: 1, 2, ..., k, 1, 2, ...
    for _ in 0..n_per_class {
        for class in 1..=k {
            let c = class - 1;
            let shape = SHAPES[c % SHAPES.len()];
            let hue = (c as f32 / k as f32 + rng.random_range(-0.15..0.15) / k as f32).rem_euclid(1.0);
            let color = hue_rgb(hue);
            let radius = s as f32 * rng.random_range(0.22..0.32);
            let cx = s as f32 / 2.0 + rng.random_range(-0.12..0.12) * s as f32;
            let cy = s as f32 / 2.0 + rng.random_range(-0.12..0.12) * s as f32;
            let background = rng.random_range(-0.3..0.3);
            let mut img = vec![0f32; 3 * s * s];
            for y in 0..s {
                for x in 0..s {
                    let dx = (x as f32 + 0.5 - cx) / radius;
                    let dy = (y as f32 + 0.5 - cy) / radius;
                    let inside = shape.covers(dx, dy);
                    for ch in 0..3 {
                        let base = if inside { color[ch] * 0.8 } else { background };
                        img[(ch * s + y) * s + x] = base + noise.sample(&mut rng);
                    }
                }
            }
            pixels.extend_from_slice(&img);
            labels.push(class);
        }
    }
    Dataset::new(Split::Train, k, [3, s, s], pixels, labels)
}

const IMAGE_EXTENSIONS: [&str; 5] = ["png", "ppm", "pgm", "pnm", "pbm"];

fn list_dir(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| HlfpError::io(dir, e))?
        .map(|e| e.map(|e| e.path()).map_err(|e| HlfpError::io(dir, e)))
        .collect::<Result<_>>()?;
    out.sort();
    Ok(out)
}

fn class_dirs(root: &Path) -> Result<Vec<PathBuf>> {
    Ok(list_dir(root)?.into_iter().filter(|p| p.is_dir()).collect())
}

fn image_files(dir: &Path) -> Result<Vec<PathBuf>> {
    Ok(list_dir(dir)?
        .into_iter()
        .filter(|p| {
            p.extension()
                .and_then(|e| e.to_str())
                .is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
        })
        .collect())
}

/// RGB image resized to `size`, channels-first, scaled to [-1, 1].
fn load_image(path: &Path, size: (usize, usize)) -> Result<Vec<f32>> {
    let img = image::open(path)?.to_rgb8();
    let img = if (img.width() as usize, img.height() as usize) == (size.1, size.0) {
        img
    } else {
        image::imageops::resize(
            &img,
            size.1 as u32,
            size.0 as u32,
            image::imageops::FilterType::Triangle,
        )
    };
    let (h, w) = size;
    let mut out = vec![0f32; 3 * h * w];
    for (x, y, px) in img.enumerate_pixels() {
        for ch in 0..3 {
            out[(ch * h + y as usize) * w + x as usize] = px[ch] as f32 / 127.5 - 1.0;
        }
    }
    Ok(out)
}

/// Loads `root/<class>/*.png|ppm|...` or, when present, `root/train/<class>/`
/// and `root/val/<class>/`. Class folders are sorted by name and numbered from
/// one. Without explicit splits every fifth file of a class (in name order)
/// goes to validation. Images are resized to `size` (height, width).
pub fn load_image_dir(root: &Path, size: (usize, usize)) -> Result<(Dataset, Dataset)> {
    let (train_root, val_root) = (root.join("train"), root.join("val"));
    let explicit = train_root.is_dir() && val_root.is_dir();
    let classes = class_dirs(if explicit { &train_root } else { root })?;
    if classes.len() < 2 {
        return Err(HlfpError::Dataset(format!(
            "{} has fewer than two class folders",
            root.display()
        )));
    }
    let names: Vec<_> = classes
        .iter()
        .map(|p| p.file_name().expect("dir name").to_owned())
        .collect();
    let k = names.len();
    let mut sets = [(Vec::new(), Vec::new()), (Vec::new(), Vec::new())];
    for (label, name) in names.iter().enumerate() {
        let files: Vec<(usize, PathBuf)> = if explicit {
            let v = val_root.join(name);
            if !v.is_dir() {
                return Err(HlfpError::Dataset(format!("{} is missing", v.display())));
            }
            let mut f: Vec<_> = image_files(&train_root.join(name))?
                .into_iter()
                .map(|p| (0, p))
                .collect();
            f.extend(image_files(&v)?.into_iter().map(|p| (1, p)));
            f
        } else {
            image_files(&root.join(name))?
                .into_iter()
                .enumerate()
                .map(|(i, p)| (usize::from(i % 5 == 4), p))
                .collect()
        };
        if files.is_empty() {
            return Err(HlfpError::Dataset(format!("class folder {:?} has no images", name)));
        }
        for (split, path) in files {
            sets[split].0.extend(load_image(&path, size)?);
            sets[split].1.push(label + 1);
        }
    }
    let [train, val] = sets;
    let shape = [3, size.0, size.1];
    Ok((
        Dataset::new(Split::Train, k, shape, train.0, train.1)?,
        Dataset::new(Split::Val, k, shape, val.0, val.1)?,
    ))
}
