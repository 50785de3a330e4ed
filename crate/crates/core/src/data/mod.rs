//! Segmentation samples: loading from PPM/PGM folders, resizing,
//! train/validation splitting and synthetic generation.

pub mod pnm;
pub mod synth;

use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::nn::resize_bilinear;
use crate::rng::{SeededRng, Stream};
use crate::tensor::Tensor;
use pnm::Raster;

pub use synth::{synth_blobs, synth_blobs_with_shapes, Ellipse, SynthSample};

#[derive(Debug, Clone, PartialEq)]
pub struct SegmentationSample {
    pub id: String,
    /// `(3, H, W)` in `[0, 1]`.
    pub image: Tensor<f32>,
    /// `(1, H, W)` in `{0, 1}`.
    pub mask: Tensor<f32>,
}

impl SegmentationSample {
    pub fn new(id: impl Into<String>, image: Tensor<f32>, mask: Tensor<f32>) -> Result<Self> {
        let (is, ms) = (image.shape(), mask.shape());
        if is.len() != 3 || is[0] != 3 || ms.len() != 3 || ms[0] != 1 || is[1..] != ms[1..] {
            return Err(Error::shape("sample", is, ms));
        }
        if mask.data().iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::InvalidArgument("mask values must be 0 or 1".into()));
        }
        Ok(Self {
            id: id.into(),
            image,
            mask,
        })
    }

    pub fn size(&self) -> (usize, usize) {
        (self.image.shape()[1], self.image.shape()[2])
    }
}

/// Source index for output position `i` under nearest-neighbour resizing
/// with half-pixel centers.
fn nearest_index(i: usize, in_len: usize, out_len: usize) -> usize {
    (((2 * i + 1) * in_len) / (2 * out_len)).min(in_len - 1)
}

/// Nearest-neighbour resize of a `(1, H, W)` mask, thresholded at 0.5.
pub fn resize_mask(mask: &Tensor<f32>, out_h: usize, out_w: usize) -> Result<Tensor<f32>> {
    let s = mask.shape();
    if s.len() != 3 || s[0] != 1 {
        return Err(Error::invalid("resize_mask", format!("expected (1,H,W), got {s:?}")));
    }
    let (h, w) = (s[1], s[2]);
    let mut out = Vec::with_capacity(out_h * out_w);
    for y in 0..out_h {
        let sy = nearest_index(y, h, out_h);
        for x in 0..out_w {
            let v = mask.data()[sy * w + nearest_index(x, w, out_w)];
            out.push(if v >= 0.5 { 1.0 } else { 0.0 });
        }
    }
    Tensor::new(&[1, out_h, out_w], out)
}

/// Bilinear resize of a `(C, H, W)` image.
pub fn resize_image(image: &Tensor<f32>, out_h: usize, out_w: usize) -> Result<Tensor<f32>> {
    let s = image.shape().to_vec();
    if s.len() != 3 {
        return Err(Error::invalid("resize_image", format!("expected (C,H,W), got {s:?}")));
    }
    if (s[1], s[2]) == (out_h, out_w) {
        return Ok(image.clone());
    }
    resize_bilinear(&image.reshape(&[1, s[0], s[1], s[2]])?, out_h, out_w)?.reshape(&[s[0], out_h, out_w])
}

pub fn image_from_raster(r: &Raster) -> Result<Tensor<f32>> {
    if r.channels != 3 {
        return Err(Error::InvalidArgument("image raster must have 3 channels".into()));
    }
    let plane = r.width * r.height;
    let mut data = vec![0.0f32; 3 * plane];
    for (i, px) in r.pixels.chunks_exact(3).enumerate() {
        for c in 0..3 {
            data[c * plane + i] = f32::from(px[c]) / 255.0;
        }
    }
    Tensor::new(&[3, r.height, r.width], data)
}

pub fn mask_from_raster(r: &Raster) -> Result<Tensor<f32>> {
    if r.channels != 1 {
        return Err(Error::InvalidArgument("mask raster must have 1 channel".into()));
    }
    let data = r
        .pixels
        .iter()
        .map(|&v| if f32::from(v) / 255.0 >= 0.5 { 1.0 } else { 0.0 })
        .collect();
    Tensor::new(&[1, r.height, r.width], data)
}

fn to_byte(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn image_to_raster(image: &Tensor<f32>) -> Result<Raster> {
    let s = image.shape();
    if s.len() != 3 || s[0] != 3 {
        return Err(Error::invalid("image_to_raster", format!("expected (3,H,W), got {s:?}")));
    }
    let plane = s[1] * s[2];
    let d = image.data();
    let pixels = (0..plane)
        .flat_map(|i| (0..3).map(move |c| to_byte(d[c * plane + i])))
        .collect();
    Raster::new(s[2], s[1], 3, pixels)
}

pub fn mask_to_raster(mask: &Tensor<f32>) -> Result<Raster> {
    let s = mask.shape();
    if s.len() != 3 || s[0] != 1 {
        return Err(Error::invalid("mask_to_raster", format!("expected (1,H,W), got {s:?}")));
    }
    Raster::new(s[2], s[1], 1, mask.data().iter().map(|&v| to_byte(v)).collect())
}

/// Loads every `<id>.ppm` in `images_dir` with its `<id>.pgm` mask from
/// `masks_dir`, resized to `target` `(H, W)` and sorted by id.
pub fn load_folder(images_dir: &Path, masks_dir: &Path, target: (usize, usize)) -> Result<Vec<SegmentationSample>> {
    let entries = std::fs::read_dir(images_dir).map_err(|e| Error::io(images_dir, e))?;
    let mut ids = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(images_dir, e))?.path();
        if path.extension().is_some_and(|e| e == "ppm") {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                ids.push(stem.to_string());
            }
        }
    }
    ids.sort();
    let (h, w) = target;
    ids.into_iter()
        .map(|id| {
            let mask_path = masks_dir.join(format!("{id}.pgm"));
            if !mask_path.is_file() {
                return Err(Error::MissingMask(mask_path));
            }
            let image = image_from_raster(&pnm::read(&images_dir.join(format!("{id}.ppm")))?)?;
            let mask = mask_from_raster(&pnm::read(&mask_path)?)?;
            SegmentationSample::new(id, resize_image(&image, h, w)?, resize_mask(&mask, h, w)?)
        })
        .collect()
}

/// `root/images/<id>.ppm` and `root/masks/<id>.pgm`.
pub fn load_dataset(root: &Path, target: (usize, usize)) -> Result<Vec<SegmentationSample>> {
    load_folder(&root.join("images"), &root.join("masks"), target)
}

/// Writes samples in the layout read by [`load_dataset`].
pub fn save_dataset(root: &Path, samples: &[SegmentationSample]) -> Result<()> {
    let (images, masks) = (root.join("images"), root.join("masks"));
    for dir in [&images, &masks] {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    for s in samples {
        pnm::write(&images.join(format!("{}.ppm", s.id)), &image_to_raster(&s.image)?)?;
        pnm::write(&masks.join(format!("{}.pgm", s.id)), &mask_to_raster(&s.mask)?)?;
    }
    Ok(())
}

/// Train/validation proportion, `train : val`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SplitRatio {
    pub train: usize,
    pub val: usize,
}

impl Default for SplitRatio {
    fn default() -> Self {
        Self { train: 8, val: 2 }
    }
}

impl std::fmt::Display for SplitRatio {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}:{}", self.train, self.val)
    }
}

impl std::str::FromStr for SplitRatio {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("invalid split ratio `{s}`; expected e.g. 8:2"));
        let (a, b) = s.split_once(':').ok_or_else(bad)?;
        let r = Self {
            train: a.trim().parse().map_err(|_| bad())?,
            val: b.trim().parse().map_err(|_| bad())?,
        };
        if r.train == 0 || r.val == 0 {
            return Err(bad());
        }
        Ok(r)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetSplit {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub ratio: SplitRatio,
    pub seed: u64,
}

impl DatasetSplit {
    /// Hex SHA-256 over both id lists.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for (tag, ids) in [("train", &self.train), ("val", &self.val)] {
            h.update(tag.as_bytes());
            for id in ids {
                h.update((id.len() as u64).to_le_bytes());
                h.update(id.as_bytes());
            }
        }
        hex(&h.finalize())
    }

    /// Samples of each side, in split order.
    pub fn select<'a>(&self, samples: &'a [SegmentationSample]) -> Result<(Vec<&'a SegmentationSample>, Vec<&'a SegmentationSample>)> {
        let find = |id: &String| {
            samples
                .iter()
                .find(|s| &s.id == id)
                .ok_or_else(|| Error::InvalidArgument(format!("split id `{id}` not in dataset")))
        };
        Ok((
            self.train.iter().map(find).collect::<Result<_>>()?,
            self.val.iter().map(find).collect::<Result<_>>()?,
        ))
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Sorts ids, shuffles them with the seed, and puts the first
/// `⌊n·train/(train+val)⌋` into the training side.
pub fn split(ids: &[String], ratio: SplitRatio, seed: u64) -> Result<DatasetSplit> {
    let n = ids.len();
    if n < 2 {
        return Err(Error::TooFewSamples { needed: 2, got: n });
    }
    let mut order = ids.to_vec();
    order.sort();
    SeededRng::new(seed, Stream::Split).shuffle(&mut order);
    let n_train = (n * ratio.train / (ratio.train + ratio.val)).clamp(1, n - 1);
    let val = order.split_off(n_train);
    Ok(DatasetSplit {
        train: order,
        val,
        ratio,
        seed,
    })
}

/// [`split`] over the ids of `samples`.
pub fn split_samples(samples: &[SegmentationSample], ratio: SplitRatio, seed: u64) -> Result<DatasetSplit> {
    let ids: Vec<String> = samples.iter().map(|s| s.id.clone()).collect();
    split(&ids, ratio, seed)
}
