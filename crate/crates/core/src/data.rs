//! Datasets, synthetic noise, augmentation and batching.
//!
//! Every loader produces pixels in `[0, 1]` laid out as `[N, C, H, W]`.
//!
//! Supported inputs:
//!
//! * IDX files (the MNIST family), optionally gzip-compressed.
//! * Raw blobs: little-endian `u32` count, C, H, W, then `u8` pixels, one
//!   image after another, each stored channel-planar (`C × H × W`).
//! * Directories of PNG/JPEG files, read in file-name order.
//! * Uniform and smoothed uniform noise.

use std::fs;
use std::io::Read;
use std::path::Path;

use flate2::read::GzDecoder;
use image::imageops::{self, FilterType};
use image::{ImageBuffer, Luma};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, ParseError, Result};
use crate::tensor::Tensor;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub name: String,
    /// `[N, C, H, W]`, values in `[0, 1]`.
    pub images: Tensor,
    pub labels: Option<Vec<usize>>,
}

impl Dataset {
    pub fn new(
        name: impl Into<String>,
        images: Tensor,
        labels: Option<Vec<usize>>,
    ) -> Result<Self> {
        if images.rank() != 4 {
            return Err(Error::dim("dataset images", images.shape(), &[0, 0, 0, 0]));
        }
        if let Some(l) = &labels {
            if l.len() != images.batch() {
                return Err(ParseError::CountMismatch {
                    images: images.batch(),
                    labels: l.len(),
                }
                .into());
            }
        }
        if let Some(v) = images.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Contract(format!("pixel value {v} outside [0, 1]")));
        }
        Ok(Dataset {
            name: name.into(),
            images,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.images.batch()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `[C, H, W]`.
    pub fn item_shape(&self) -> [usize; 3] {
        let s = self.images.shape();
        [s[1], s[2], s[3]]
    }

    /// The first `n` samples (or all of them).
    pub fn take(&self, n: usize) -> Result<Dataset> {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        self.subset(&idx)
    }

    pub fn subset(&self, indices: &[usize]) -> Result<Dataset> {
        Ok(Dataset {
            name: self.name.clone(),
            images: self.images.select(indices)?,
            labels: self
                .labels
                .as_ref()
                .map(|l| indices.iter().map(|&i| l[i]).collect()),
        })
    }

    /// Concatenates datasets with equal item shapes; labels are kept only
    /// if every part has them.
    pub fn concat(name: &str, parts: &[Dataset]) -> Result<Dataset> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Contract("nothing to concatenate".into()))?;
        let mut data = Vec::new();
        let mut labels = Some(Vec::new());
        for p in parts {
            if p.item_shape() != first.item_shape() {
                return Err(Error::dim("concat", &p.item_shape(), &first.item_shape()));
            }
            data.extend_from_slice(p.images.data());
            labels = match (labels, &p.labels) {
                (Some(mut acc), Some(l)) => {
                    acc.extend_from_slice(l);
                    Some(acc)
                }
                _ => None,
            };
        }
        let [c, h, w] = first.item_shape();
        let n = data.len() / (c * h * w);
        Dataset::new(name, Tensor::new(vec![n, c, h, w], data)?, labels)
    }
}

fn read_maybe_gz(path: &Path) -> Result<Vec<u8>> {
    let raw = fs::read(path).map_err(|e| Error::io(path, e))?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(raw.as_slice())
            .read_to_end(&mut out)
            .map_err(|e| Error::io(path, e))?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn be_u32(bytes: &[u8], at: usize, what: &'static str) -> Result<u32, ParseError> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes(b.try_into().expect("4 bytes")))
        .ok_or(ParseError::Truncated {
            what,
            expected: at + 4,
            actual: bytes.len(),
        })
}

fn check_magic(found: u32, expected: u32, what: &'static str) -> Result<(), ParseError> {
    if found != expected {
        return Err(ParseError::BadMagic {
            what,
            expected: format!("{expected:#010x}"),
            found: format!("{found:#010x}"),
        });
    }
    Ok(())
}

/// Decodes an IDX image file (`[N, 1, H, W]`, bytes scaled by 1/255).
pub fn decode_idx_images(bytes: &[u8]) -> Result<Tensor> {
    const WHAT: &str = "IDX images";
    check_magic(be_u32(bytes, 0, WHAT)?, IDX_IMAGES_MAGIC, WHAT)?;
    let n = be_u32(bytes, 4, WHAT)? as usize;
    let h = be_u32(bytes, 8, WHAT)? as usize;
    let w = be_u32(bytes, 12, WHAT)? as usize;
    let expected = 16 + n * h * w;
    if bytes.len() != expected {
        return Err(ParseError::Truncated {
            what: WHAT,
            expected,
            actual: bytes.len(),
        }
        .into());
    }
    let data = bytes[16..].iter().map(|&b| b as f32 / 255.0).collect();
    Tensor::new(vec![n, 1, h, w], data)
}

pub fn decode_idx_labels(bytes: &[u8]) -> Result<Vec<usize>> {
    const WHAT: &str = "IDX labels";
    check_magic(be_u32(bytes, 0, WHAT)?, IDX_LABELS_MAGIC, WHAT)?;
    let n = be_u32(bytes, 4, WHAT)? as usize;
    if bytes.len() != 8 + n {
        return Err(ParseError::Truncated {
            what: WHAT,
            expected: 8 + n,
            actual: bytes.len(),
        }
        .into());
    }
    Ok(bytes[8..].iter().map(|&b| b as usize).collect())
}

/// Loads IDX images and optional labels; `.gz` files are detected by content.
pub fn load_idx(images: &Path, labels: Option<&Path>) -> Result<Dataset> {
    let imgs = decode_idx_images(&read_maybe_gz(images)?)?;
    let labels = labels
        .map(|p| read_maybe_gz(p).and_then(|b| decode_idx_labels(&b)))
        .transpose()?;
    if let Some(l) = &labels {
        if l.len() != imgs.batch() {
            return Err(ParseError::CountMismatch {
                images: imgs.batch(),
                labels: l.len(),
            }
            .into());
        }
    }
    Dataset::new(file_stem(images), imgs, labels)
}

fn file_stem(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default()
}

pub fn decode_rgb_blob(bytes: &[u8]) -> Result<Tensor> {
    const WHAT: &str = "image blob";
    let header = |i: usize| -> Result<usize, ParseError> {
        bytes
            .get(i * 4..i * 4 + 4)
            .map(|b| u32::from_le_bytes(b.try_into().expect("4 bytes")) as usize)
            .ok_or(ParseError::Truncated {
                what: WHAT,
                expected: 16,
                actual: bytes.len(),
            })
    };
    let (n, c, h, w) = (header(0)?, header(1)?, header(2)?, header(3)?);
    let expected = 16 + n * c * h * w;
    if bytes.len() != expected {
        return Err(ParseError::Truncated {
            what: WHAT,
            expected,
            actual: bytes.len(),
        }
        .into());
    }
    let data = bytes[16..].iter().map(|&b| b as f32 / 255.0).collect();
    Tensor::new(vec![n, c, h, w], data)
}

/// Pixels are rounded to the nearest of 256 levels.
pub fn encode_rgb_blob(images: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + images.len());
    for &d in images.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    out.extend(
        images
            .data()
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8),
    );
    out
}

pub fn load_rgb_blob(path: &Path) -> Result<Dataset> {
    let bytes = read_maybe_gz(path)?;
    Dataset::new(file_stem(path), decode_rgb_blob(&bytes)?, None)
}

/// Loads every PNG/JPEG file of a directory, converted to `[C, H, W]`
/// (`C` is 1 or 3) by center-cropping to a square and bilinear resizing.
pub fn load_image_dir(dir: &Path, shape: [usize; 3]) -> Result<Dataset> {
    let [c, h, w] = shape;
    if c != 1 && c != 3 {
        return Err(Error::Config(format!(
            "image directories need 1 or 3 channels, got {c}"
        )));
    }
    let mut files: Vec<_> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .and_then(|e| e.to_str())
                .is_some_and(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "jpg" | "jpeg"))
        })
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::Config(format!(
            "no PNG/JPEG files in {}",
            dir.display()
        )));
    }
    let mut data = Vec::with_capacity(files.len() * c * h * w);
    for f in &files {
        let img = image::open(f).map_err(|e| ParseError::Malformed {
            what: "image file",
            detail: format!("{}: {e}", f.display()),
        })?;
        let rgb = img.to_rgb8();
        let side = rgb.width().min(rgb.height());
        let cropped = imageops::crop_imm(
            &rgb,
            (rgb.width() - side) / 2,
            (rgb.height() - side) / 2,
            side,
            side,
        )
        .to_image();
        let resized = imageops::resize(&cropped, w as u32, h as u32, FilterType::Triangle);
        let px = |x: u32, y: u32, ch: usize| resized.get_pixel(x, y).0[ch] as f32 / 255.0;
        if c == 3 {
            for ch in 0..3 {
                for y in 0..h as u32 {
                    for x in 0..w as u32 {
                        data.push(px(x, y, ch));
                    }
                }
            }
        } else {
            for y in 0..h as u32 {
                for x in 0..w as u32 {
                    data.push(luminance(px(x, y, 0), px(x, y, 1), px(x, y, 2)));
                }
            }
        }
    }
    Dataset::new(
        file_stem(dir),
        Tensor::new(vec![files.len(), c, h, w], data)?,
        None,
    )
}

fn luminance(r: f32, g: f32, b: f32) -> f32 {
    (0.299 * r + 0.587 * g + 0.114 * b).clamp(0.0, 1.0)
}

/// Converts images to `[C, H, W]`: RGB to gray by luminance when `C` is 1,
/// gray to RGB by replication when `C` is 3, then center-crop to a square
/// and bilinear resize when the spatial size differs.
pub fn conform(ds: &Dataset, shape: [usize; 3]) -> Result<Dataset> {
    let [c, h, w] = shape;
    let [sc, sh, sw] = ds.item_shape();
    if [sc, sh, sw] == shape {
        return Ok(ds.clone());
    }
    if !matches!((sc, c), (1, 1) | (3, 3) | (3, 1) | (1, 3)) {
        return Err(Error::Config(format!(
            "cannot convert {sc} channels to {c}"
        )));
    }
    let mut out = Vec::with_capacity(ds.len() * c * h * w);
    let plane = sh * sw;
    for i in 0..ds.len() {
        let img = ds.images.row(i);
        let planes: Vec<Vec<f32>> = match (sc, c) {
            (3, 1) => vec![(0..plane)
                .map(|p| luminance(img[p], img[plane + p], img[2 * plane + p]))
                .collect()],
            (1, 3) => vec![img.to_vec(); 3],
            _ => img.chunks_exact(plane).map(<[f32]>::to_vec).collect(),
        };
        for p in planes {
            out.extend(resize_plane(&p, sh, sw, h, w));
        }
    }
    Dataset::new(
        ds.name.clone(),
        Tensor::new(vec![ds.len(), c, h, w], out)?,
        ds.labels.clone(),
    )
}

fn resize_plane(p: &[f32], sh: usize, sw: usize, h: usize, w: usize) -> Vec<f32> {
    if (sh, sw) == (h, w) {
        return p.to_vec();
    }
    let buf: ImageBuffer<Luma<f32>, Vec<f32>> =
        ImageBuffer::from_raw(sw as u32, sh as u32, p.to_vec()).expect("plane size matches");
    let side = sw.min(sh) as u32;
    let cropped = imageops::crop_imm(
        &buf,
        (sw as u32 - side) / 2,
        (sh as u32 - side) / 2,
        side,
        side,
    )
    .to_image();
    imageops::resize(&cropped, w as u32, h as u32, FilterType::Triangle)
        .into_raw()
        .into_iter()
        .map(|v| v.clamp(0.0, 1.0))
        .collect()
}

/// I.i.d. uniform `[0, 1)` pixels.
pub fn uniform_noise(count: usize, shape: [usize; 3], seed: u64) -> Result<Dataset> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = count * shape.iter().product::<usize>();
    let data = (0..n).map(|_| rng.random::<f32>()).collect();
    let [c, h, w] = shape;
    Dataset::new("uniform", Tensor::new(vec![count, c, h, w], data)?, None)
}

pub const SMOOTH_SIGMA_RANGE: (f32, f32) = (1.0, 2.5);

/// Index into `[0, n)` with half-sample symmetric reflection
/// (`d c b a | a b c d | d c b a`).
fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let period = 2 * n;
    let m = i.rem_euclid(period);
    (if m < n { m } else { period - 1 - m }) as usize
}

fn gaussian_kernel(sigma: f32) -> Vec<f32> {
    let radius = (3.0 * sigma).ceil() as isize;
    let raw: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * (sigma as f64).powi(2))).exp())
        .collect();
    let total: f64 = raw.iter().sum();
    raw.iter().map(|v| (v / total) as f32).collect()
}

/// Separable Gaussian blur of one `h × w` plane with reflect padding.
pub fn gaussian_blur(plane: &[f32], h: usize, w: usize, sigma: f32) -> Vec<f32> {
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as isize;
    let mut tmp = vec![0.0f32; h * w];
    for y in 0..h {
        for x in 0..w {
            tmp[y * w + x] = k
                .iter()
                .enumerate()
                .map(|(j, &kv)| kv * plane[y * w + reflect(x as isize + j as isize - r, w)])
                .sum();
        }
    }
    let mut out = vec![0.0f32; h * w];
    for y in 0..h {
        for x in 0..w {
            out[y * w + x] = k
                .iter()
                .enumerate()
                .map(|(j, &kv)| kv * tmp[reflect(y as isize + j as isize - r, h) * w + x])
                .sum();
        }
    }
    out
}

/// Min-max rescales an image in place; `None` if it is constant.
fn rescale(img: &mut [f32]) -> Option<()> {
    let lo = img.iter().copied().fold(f32::INFINITY, f32::min);
    let hi = img.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    if !(hi > lo) {
        return None;
    }
    for v in img.iter_mut() {
        *v = ((*v - lo) / (hi - lo)).clamp(0.0, 1.0);
    }
    Some(())
}

/// One smoothed-noise image with a fixed σ (see [`smooth_noise`]).
pub fn smooth_noise_image(shape: [usize; 3], sigma: f32, rng: &mut ChaCha8Rng) -> Vec<f32> {
    let [c, h, w] = shape;
    loop {
        let mut img = Vec::with_capacity(c * h * w);
        for _ in 0..c {
            let plane: Vec<f32> = (0..h * w).map(|_| rng.random::<f32>()).collect();
            img.extend(gaussian_blur(&plane, h, w, sigma));
        }
        if rescale(&mut img).is_some() {
            return img;
        }
    }
}

/// Uniform noise blurred with σ ~ U[1, 2.5] (kernel radius ⌈3σ⌉) and
/// rescaled so each image spans exactly `[0, 1]`.
pub fn smooth_noise(count: usize, shape: [usize; 3], seed: u64) -> Result<Dataset> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = Vec::with_capacity(count * shape.iter().product::<usize>());
    for _ in 0..count {
        let sigma = rng.random_range(SMOOTH_SIGMA_RANGE.0..=SMOOTH_SIGMA_RANGE.1);
        data.extend(smooth_noise_image(shape, sigma, &mut rng));
    }
    let [c, h, w] = shape;
    Dataset::new("smooth", Tensor::new(vec![count, c, h, w], data)?, None)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AugmentConfig {
    pub crop_pad: usize,
    pub hflip: bool,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            crop_pad: 4,
            hflip: false,
        }
    }
}

/// Zero-pads `[C, H, W]` by `pad` and crops back at offset `(oy, ox)`,
/// each in `[0, 2·pad]`. Offset `(pad, pad)` is the identity.
pub fn crop_at(img: &[f32], shape: [usize; 3], pad: usize, oy: usize, ox: usize) -> Vec<f32> {
    let [c, h, w] = shape;
    let mut out = vec![0.0f32; c * h * w];
    for ch in 0..c {
        for y in 0..h {
            let sy = (y + oy) as isize - pad as isize;
            if sy < 0 || sy >= h as isize {
                continue;
            }
            for x in 0..w {
                let sx = (x + ox) as isize - pad as isize;
                if sx >= 0 && sx < w as isize {
                    out[(ch * h + y) * w + x] = img[(ch * h + sy as usize) * w + sx as usize];
                }
            }
        }
    }
    out
}

pub fn hflip(img: &[f32], shape: [usize; 3]) -> Vec<f32> {
    let [_, _, w] = shape;
    img.chunks_exact(w)
        .flat_map(|row| row.iter().rev().copied())
        .collect()
}

/// Random crop (and optional flip with probability 0.5) of one image.
pub fn augment(
    img: &[f32],
    shape: [usize; 3],
    config: AugmentConfig,
    rng: &mut ChaCha8Rng,
) -> Vec<f32> {
    let p = config.crop_pad;
    let (oy, ox) = (rng.random_range(0..=2 * p), rng.random_range(0..=2 * p));
    let out = crop_at(img, shape, p, oy, ox);
    if config.hflip && rng.random_bool(0.5) {
        hflip(&out, shape)
    } else {
        out
    }
}

/// Augments every image of a `[B, C, H, W]` batch.
pub fn augment_batch(
    batch: &Tensor,
    config: AugmentConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Tensor> {
    let s = batch.shape();
    let shape = [s[1], s[2], s[3]];
    let mut data = Vec::with_capacity(batch.len());
    for b in 0..batch.batch() {
        data.extend(augment(batch.row(b), shape, config, rng));
    }
    Tensor::new(s.to_vec(), data)
}

/// One training batch: `B` labelled in-samples and the same number of
/// out-samples.
#[derive(Clone, Debug, PartialEq)]
pub struct MixedBatch {
    pub in_images: Tensor,
    pub in_labels: Vec<usize>,
    pub out_images: Tensor,
}

/// Produces index batches. The in-distribution is reshuffled every epoch
/// and visited once per epoch; the last batch of an epoch holds the
/// remainder when `B` does not divide its size, with both halves equally
/// large. Out-samples are drawn without replacement across epochs and
/// reshuffled only when exhausted. The two orders use separate random
/// streams, so the in-distribution order does not depend on the
/// out-distribution size.
#[derive(Clone, Debug)]
pub struct Batcher {
    in_len: usize,
    out_len: usize,
    batch: usize,
    in_rng: ChaCha8Rng,
    out_rng: ChaCha8Rng,
    out_order: Vec<usize>,
    out_pos: usize,
}

impl Batcher {
    pub fn new(in_len: usize, out_len: usize, batch: usize, seed: u64) -> Result<Self> {
        if in_len == 0 || out_len == 0 || batch == 0 {
            return Err(Error::Config(
                "batcher needs non-empty datasets and a positive batch size".into(),
            ));
        }
        Ok(Batcher {
            in_len,
            out_len,
            batch,
            in_rng: ChaCha8Rng::seed_from_u64(seed),
            out_rng: ChaCha8Rng::seed_from_u64(seed ^ 0x6f75_745f_6f72_6472),
            out_order: Vec::new(),
            out_pos: 0,
        })
    }

    fn next_out(&mut self) -> usize {
        if self.out_pos == self.out_order.len() {
            self.out_order = (0..self.out_len).collect();
            self.out_order.shuffle(&mut self.out_rng);
            self.out_pos = 0;
        }
        self.out_pos += 1;
        self.out_order[self.out_pos - 1]
    }

    /// Index pairs `(in, out)` for every batch of the next epoch.
    pub fn epoch(&mut self) -> Vec<(Vec<usize>, Vec<usize>)> {
        let mut order: Vec<usize> = (0..self.in_len).collect();
        order.shuffle(&mut self.in_rng);
        order
            .chunks(self.batch)
            .map(|chunk| {
                let out = (0..chunk.len()).map(|_| self.next_out()).collect();
                (chunk.to_vec(), out)
            })
            .collect()
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.in_len.div_ceil(self.batch)
    }
}

/// Gathers a [`MixedBatch`] from index lists.
pub fn assemble(
    in_ds: &Dataset,
    out_ds: &Dataset,
    in_idx: &[usize],
    out_idx: &[usize],
) -> Result<MixedBatch> {
    let labels = in_ds
        .labels
        .as_ref()
        .ok_or_else(|| Error::Config(format!("in-distribution {} has no labels", in_ds.name)))?;
    Ok(MixedBatch {
        in_images: in_ds.images.select(in_idx)?,
        in_labels: in_idx.iter().map(|&i| labels[i]).collect(),
        out_images: out_ds.images.select(out_idx)?,
    })
}

/// Loads a dataset from a source string:
///
/// * `idx:IMAGES` or `idx:IMAGES,LABELS`
/// * `rgb:PATH` (raw blob)
/// * `dir:PATH` (PNG/JPEG directory)
/// * `uniform:COUNT`, `smooth:COUNT` (noise, seeded by `seed`)
///
/// The result is converted to `shape` with [`conform`].
pub fn load_source(source: &str, shape: [usize; 3], seed: u64) -> Result<Dataset> {
    let (kind, arg) = source
        .split_once(':')
        .ok_or_else(|| Error::Config(format!("dataset source {source:?} lacks a kind prefix")))?;
    let count = || -> Result<usize> {
        arg.parse()
            .map_err(|_| Error::Config(format!("bad sample count in {source:?}")))
    };
    let ds = match kind {
        "idx" => {
            let (imgs, labels) = match arg.split_once(',') {
                Some((i, l)) => (i, Some(Path::new(l))),
                None => (arg, None),
            };
            load_idx(Path::new(imgs), labels)?
        }
        "rgb" => load_rgb_blob(Path::new(arg))?,
        "dir" => return load_image_dir(Path::new(arg), shape),
        "uniform" => uniform_noise(count()?, shape, seed)?,
        "smooth" => smooth_noise(count()?, shape, seed)?,
        other => return Err(Error::Config(format!("unknown dataset kind {other:?}"))),
    };
    conform(&ds, shape)
}

/// Checks that the files named by a source string exist.
pub fn source_paths_exist(source: &str) -> Result<()> {
    let (kind, arg) = source
        .split_once(':')
        .ok_or_else(|| Error::Config(format!("dataset source {source:?} lacks a kind prefix")))?;
    let paths: Vec<&str> = match kind {
        "idx" => arg.split(',').collect(),
        "rgb" | "dir" => vec![arg],
        "uniform" | "smooth" => vec![],
        other => return Err(Error::Config(format!("unknown dataset kind {other:?}"))),
    };
    for p in paths {
        if !Path::new(p).exists() {
            return Err(Error::io(
                p,
                std::io::Error::from(std::io::ErrorKind::NotFound),
            ));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn idx_images(n: u32, h: u32, w: u32, pixels: &[u8]) -> Vec<u8> {
        let mut b = Vec::new();
        for v in [IDX_IMAGES_MAGIC, n, h, w] {
            b.extend_from_slice(&v.to_be_bytes());
        }
        b.extend_from_slice(pixels);
        b
    }

    #[test]
    fn full_byte_is_one() {
        let t = decode_idx_images(&idx_images(1, 1, 2, &[255, 0])).unwrap();
        assert_eq!(t.data(), &[1.0, 0.0]);
    }

    #[test]
    fn bad_idx_magic() {
        let mut b = idx_images(1, 1, 1, &[0]);
        b[3] = 0x01;
        assert!(matches!(
            decode_idx_images(&b),
            Err(Error::Parse(ParseError::BadMagic { .. }))
        ));
    }

    #[test]
    fn truncated_blob() {
        let mut b = encode_rgb_blob(&Tensor::full(&[2, 3, 2, 2], 0.5));
        b.pop();
        assert!(matches!(
            decode_rgb_blob(&b),
            Err(Error::Parse(ParseError::Truncated { .. }))
        ));
    }

    #[test]
    fn blob_round_trip() {
        let t = Tensor::new(vec![1, 3, 1, 2], vec![0.0, 1.0, 0.2, 0.4, 0.6, 0.8]).unwrap();
        let back = decode_rgb_blob(&encode_rgb_blob(&t)).unwrap();
        for (a, b) in back.data().iter().zip(t.data()) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-7);
        }
    }

    #[test]
    fn reflect_indices() {
        let got: Vec<usize> = (-3..7).map(|i| reflect(i, 4)).collect();
        assert_eq!(got, vec![2, 1, 0, 0, 1, 2, 3, 3, 2, 1]);
    }

    #[test]
    fn blur_preserves_constant() {
        let out = gaussian_blur(&[0.3; 25], 5, 5, 1.5);
        assert!(out.iter().all(|v| (v - 0.3).abs() < 1e-6));
    }

    #[test]
    fn center_offset_is_identity() {
        let img: Vec<f32> = (0..2 * 5 * 6).map(|i| i as f32 / 60.0).collect();
        assert_eq!(crop_at(&img, [2, 5, 6], 4, 4, 4), img);
        assert_eq!(hflip(&hflip(&img, [2, 5, 6]), [2, 5, 6]), img);
    }

    #[test]
    fn luminance_conversion() {
        let rgb = Dataset::new(
            "c",
            Tensor::new(vec![1, 3, 1, 1], vec![1.0, 0.0, 0.0]).unwrap(),
            None,
        )
        .unwrap();
        let gray = conform(&rgb, [1, 1, 1]).unwrap();
        assert!((gray.images.data()[0] - 0.299).abs() < 1e-6);
    }

    #[test]
    fn batcher_last_batch_has_equal_halves() {
        let mut b = Batcher::new(10, 7, 4, 0).unwrap();
        let epoch = b.epoch();
        assert_eq!(epoch.len(), 3);
        assert_eq!(epoch[2].0.len(), 2);
        assert_eq!(epoch[2].1.len(), 2);
    }

    #[test]
    fn unknown_source_kind() {
        assert!(matches!(
            load_source("foo:bar", [1, 2, 2], 0),
            Err(Error::Config(_))
        ));
    }
}
