//! Image ingestion, pyramid construction, and seeded batching.
//!
//! Real images come in as PNGs, get center-cropped square, nearest-neighbor
//! resized to the target resolution, and normalized to [-1, 1]. At train
//! time each sampled batch is downscaled into an image pyramid that serves
//! as the generator input, while the same images are the real samples for
//! the discriminator and the reconstruction targets.

pub mod toy;

use std::path::{Path, PathBuf};

use image::RgbImage;
use thiserror::Error;

use crate::backend::{ResizeDir, SeededRng, Shape, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("no .png files in {0}")]
    EmptyDir(PathBuf),
    #[error("no decodable images in {0}")]
    NoDecodable(PathBuf),
    #[error("failed to read {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("failed to decode image: {0}")]
    Decode(#[from] image::ImageError),
    #[error("{what} must be a power of two, got {value}")]
    NotPowerOfTwo { what: &'static str, value: usize },
    #[error("lowest_res {lowest} must be at most target_res {target} / 2")]
    PyramidTooShallow { lowest: usize, target: usize },
    #[error("expected a {expected}x{expected} image tensor, got shape {got}")]
    WrongResolution { expected: usize, got: String },
    #[error("dataset needs at least one item")]
    Empty,
    #[error("batch size {batch} invalid for dataset of {len} items")]
    BadBatchSize { batch: usize, len: usize },
    #[error("pyramid items disagree: {0}")]
    Inconsistent(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub fn is_power_of_two(v: usize) -> bool {
    v != 0 && v & (v - 1) == 0
}

/// Map a byte pixel linearly onto [-1, 1].
pub fn normalize_pixel(b: u8) -> f32 {
    b as f32 * (2.0 / 255.0) - 1.0
}

/// Clamp to [-1, 1] and invert `normalize_pixel`. Round-trips every byte.
pub fn denormalize_pixel(v: f32) -> u8 {
    ((v.clamp(-1.0, 1.0) + 1.0) * (255.0 / 2.0)).round() as u8
}

/// Decode + crop + resize + normalize one image into a (1, 3, res, res)
/// tensor. Grayscale inputs are replicated to three channels. Decode limits
/// are capped so a hostile file cannot demand absurd allocations.
pub fn decode_image_bytes(bytes: &[u8], target_res: usize) -> Result<Tensor, DataError> {
    let mut reader = image::ImageReader::new(std::io::Cursor::new(bytes))
        .with_guessed_format()
        .map_err(|source| DataError::Io { path: PathBuf::from("<memory>"), source })?;
    let mut limits = image::Limits::default();
    limits.max_image_width = Some(1 << 14);
    limits.max_image_height = Some(1 << 14);
    reader.limits(limits);
    let img = reader.decode()?.to_rgb8();
    let img = crop_resize(&img, target_res);
    Ok(image_to_tensor(&img))
}

fn crop_resize(img: &RgbImage, target: usize) -> RgbImage {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let side = w.min(h);
    let x0 = (w - side) / 2;
    let y0 = (h - side) / 2;
    let mut out = RgbImage::new(target as u32, target as u32);
    for y in 0..target {
        let sy = y0 + (y * 2 + 1) * side / (target * 2);
        for x in 0..target {
            let sx = x0 + (x * 2 + 1) * side / (target * 2);
            out.put_pixel(x as u32, y as u32, *img.get_pixel(sx as u32, sy as u32));
        }
    }
    out
}

/// (1, 3, H, W) normalized tensor from an RGB image.
pub fn image_to_tensor(img: &RgbImage) -> Tensor {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = vec![0.0f32; 3 * h * w];
    for y in 0..h {
        for x in 0..w {
            let p = img.get_pixel(x as u32, y as u32);
            for c in 0..3 {
                data[(c * h + y) * w + x] = normalize_pixel(p.0[c]);
            }
        }
    }
    Tensor::from_vec(Shape::new(1, 3, h, w), data).expect("sized buffer")
}

/// Denormalize one batch item of a (B, 3, H, W) tensor back to an image.
pub fn tensor_to_image(t: &Tensor, batch_index: usize) -> Result<RgbImage, DataError> {
    let s = t.shape();
    if s.channels != 3 || batch_index >= s.batch {
        return Err(DataError::Inconsistent(format!(
            "cannot render batch item {batch_index} of {s} as an RGB image"
        )));
    }
    let data = t.to_vec();
    let mut img = RgbImage::new(s.width as u32, s.height as u32);
    for y in 0..s.height {
        for x in 0..s.width {
            let mut px = [0u8; 3];
            for (c, v) in px.iter_mut().enumerate() {
                *v = denormalize_pixel(data[s.at(batch_index, c, y, x)]);
            }
            img.put_pixel(x as u32, y as u32, image::Rgb(px));
        }
    }
    Ok(img)
}

/// Load every decodable PNG under `path` as a dataset item at `target_res`.
/// Undecodable files are skipped with a warning on stderr.
pub fn load_image_dir(path: &Path, target_res: usize) -> Result<Dataset, DataError> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(path)
        .map_err(|source| DataError::Io { path: path.to_path_buf(), source })?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .and_then(|e| e.to_str())
                .is_some_and(|e| e.eq_ignore_ascii_case("png"))
        })
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(DataError::EmptyDir(path.to_path_buf()));
    }
    let mut items = Vec::with_capacity(files.len());
    for file in &files {
        let bytes = match std::fs::read(file) {
            Ok(b) => b,
            Err(err) => {
                eprintln!("warning: skipping {}: {err}", file.display());
                continue;
            }
        };
        match decode_image_bytes(&bytes, target_res) {
            Ok(t) => items.push(t),
            Err(err) => eprintln!("warning: skipping {}: {err}", file.display()),
        }
    }
    if items.is_empty() {
        return Err(DataError::NoDecodable(path.to_path_buf()));
    }
    Dataset::new(items, target_res)
}

/// In-memory image collection at one resolution.
pub struct Dataset {
    target_res: usize,
    items: Vec<Tensor>,
}

impl Dataset {
    pub fn new(items: Vec<Tensor>, target_res: usize) -> Result<Self, DataError> {
        if items.is_empty() {
            return Err(DataError::Empty);
        }
        let expected = Shape::new(1, 3, target_res, target_res);
        for item in &items {
            if item.shape() != expected {
                return Err(DataError::WrongResolution {
                    expected: target_res,
                    got: item.shape().to_string(),
                });
            }
        }
        Ok(Self { target_res, items })
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn target_res(&self) -> usize {
        self.target_res
    }

    pub fn item(&self, index: usize) -> &Tensor {
        &self.items[index]
    }

    /// Split off the last `count` items as a held-out set.
    pub fn split_tail(mut self, count: usize) -> Result<(Dataset, Dataset), DataError> {
        if count == 0 || count >= self.items.len() {
            return Err(DataError::BadBatchSize { batch: count, len: self.items.len() });
        }
        let tail = self.items.split_off(self.items.len() - count);
        let res = self.target_res;
        Ok((Dataset::new(self.items, res)?, Dataset::new(tail, res)?))
    }
}

/// Progressive nearest-neighbor downscales of one image: levels at
/// lowest_res, 2*lowest_res, ..., target_res/2, plus the source when known.
pub struct ImagePyramid {
    levels: Vec<Tensor>,
    source_hr: Option<Tensor>,
}

impl ImagePyramid {
    pub fn levels(&self) -> &[Tensor] {
        &self.levels
    }

    pub fn source_hr(&self) -> Option<&Tensor> {
        self.source_hr.as_ref()
    }

    /// Wrap an image that is already at the lowest resolution, with no
    /// higher-resolution ground truth (refining a small input directly).
    pub fn from_lowest_only(image: Tensor) -> Result<Self, DataError> {
        let s = image.shape();
        if s.batch != 1 || s.channels != 3 || s.height != s.width {
            return Err(DataError::WrongResolution { expected: s.height, got: s.to_string() });
        }
        if !is_power_of_two(s.height) {
            return Err(DataError::NotPowerOfTwo { what: "image resolution", value: s.height });
        }
        Ok(Self { levels: vec![image], source_hr: None })
    }
}

/// Build the pyramid for one (1, 3, R, R) image by repeated x2 nearest
/// neighbor downsampling.
pub fn make_pyramid(image: &Tensor, lowest_res: usize) -> Result<ImagePyramid, DataError> {
    let s = image.shape();
    if s.batch != 1 || s.channels != 3 || s.height != s.width {
        return Err(DataError::WrongResolution { expected: s.height, got: s.to_string() });
    }
    let (levels, _) = downscale_ladder(image, lowest_res)?;
    Ok(ImagePyramid { levels, source_hr: Some(image.clone()) })
}

fn downscale_ladder(hr: &Tensor, lowest_res: usize) -> Result<(Vec<Tensor>, usize), DataError> {
    let target = hr.shape().height;
    if !is_power_of_two(target) {
        return Err(DataError::NotPowerOfTwo { what: "target_res", value: target });
    }
    if !is_power_of_two(lowest_res) {
        return Err(DataError::NotPowerOfTwo { what: "lowest_res", value: lowest_res });
    }
    if lowest_res > target / 2 {
        return Err(DataError::PyramidTooShallow { lowest: lowest_res, target });
    }
    let mut levels = Vec::new();
    let mut cur = hr.clone();
    let mut res = target;
    while res > lowest_res {
        cur = cur.resize_nearest(2, ResizeDir::Down)?;
        res /= 2;
        levels.push(cur.clone());
    }
    levels.reverse();
    Ok((levels, target))
}

/// A stacked batch of pyramids: one tensor per level, lowest first, plus the
/// stacked source images when available.
pub struct PyramidBatch {
    lowest_res: usize,
    target_res: usize,
    levels: Vec<Tensor>,
    hr: Option<Tensor>,
}

impl PyramidBatch {
    /// Downscale a (B, 3, R, R) batch into its pyramid.
    pub fn from_hr(hr: &Tensor, lowest_res: usize) -> Result<Self, DataError> {
        let s = hr.shape();
        if s.channels != 3 || s.height != s.width {
            return Err(DataError::WrongResolution { expected: s.height, got: s.to_string() });
        }
        let (levels, target_res) = downscale_ladder(hr, lowest_res)?;
        Ok(Self { lowest_res, target_res, levels, hr: Some(hr.clone()) })
    }

    /// Stack single-image pyramids with identical structure.
    pub fn from_pyramids(pyramids: &[ImagePyramid]) -> Result<Self, DataError> {
        let first = pyramids.first().ok_or(DataError::Empty)?;
        let level_count = first.levels.len();
        let with_hr = first.source_hr.is_some();
        for p in pyramids {
            if p.levels.len() != level_count || p.source_hr.is_some() != with_hr {
                return Err(DataError::Inconsistent("mixed pyramid structures".into()));
            }
        }
        let mut levels = Vec::with_capacity(level_count);
        for li in 0..level_count {
            let slice: Vec<&Tensor> = pyramids.iter().map(|p| &p.levels[li]).collect();
            levels.push(stack_batch(&slice)?);
        }
        let hr = if with_hr {
            let slice: Vec<&Tensor> =
                pyramids.iter().map(|p| p.source_hr.as_ref().expect("checked")).collect();
            Some(stack_batch(&slice)?)
        } else {
            None
        };
        let lowest_res = levels[0].shape().height;
        let target_res = match &hr {
            Some(t) => t.shape().height,
            None => levels.last().expect("non-empty").shape().height * 2,
        };
        Ok(Self { lowest_res, target_res, levels, hr })
    }

    pub fn batch(&self) -> usize {
        self.levels[0].shape().batch
    }

    pub fn lowest_res(&self) -> usize {
        self.lowest_res
    }

    pub fn target_res(&self) -> usize {
        self.target_res
    }

    pub fn levels(&self) -> &[Tensor] {
        &self.levels
    }

    pub fn hr(&self) -> Option<&Tensor> {
        self.hr.as_ref()
    }

    /// The stacked images at `res`, whether that is a downscaled level or
    /// the source resolution.
    pub fn at_res(&self, res: usize) -> Option<&Tensor> {
        if res == self.target_res {
            return self.hr.as_ref();
        }
        self.levels.iter().find(|t| t.shape().height == res)
    }
}

/// Concatenate (1, C, H, W) tensors along the batch axis.
pub fn stack_batch(items: &[&Tensor]) -> Result<Tensor, DataError> {
    let first = items.first().ok_or(DataError::Empty)?;
    let s = first.shape();
    let mut data = Vec::with_capacity(s.numel() * items.len());
    let mut batch = 0;
    for item in items {
        let is = item.shape();
        if (is.channels, is.height, is.width) != (s.channels, s.height, s.width) {
            return Err(DataError::Inconsistent(format!("cannot stack {is} with {s}")));
        }
        data.extend_from_slice(&item.to_vec());
        batch += is.batch;
    }
    Ok(Tensor::from_vec(Shape::new(batch, s.channels, s.height, s.width), data)?)
}

/// The deterministic visit order for (seed, epoch).
pub fn epoch_permutation(len: usize, seed: u64, epoch: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..len).collect();
    let mut rng = SeededRng::from_seed_and_stream(seed, epoch.wrapping_add(1));
    rng.shuffle(&mut order);
    order
}

/// Batches of stacked pyramids for one epoch. The permutation depends only
/// on (seed, epoch); the final partial batch is dropped.
pub struct BatchIter<'a> {
    dataset: &'a Dataset,
    lowest_res: usize,
    batch_size: usize,
    order: Vec<usize>,
    cursor: usize,
}

pub fn batch_iter(
    dataset: &Dataset,
    batch_size: usize,
    seed: u64,
    epoch: u64,
    lowest_res: usize,
) -> Result<BatchIter<'_>, DataError> {
    if batch_size == 0 || batch_size > dataset.len() {
        return Err(DataError::BadBatchSize { batch: batch_size, len: dataset.len() });
    }
    Ok(BatchIter {
        dataset,
        lowest_res,
        batch_size,
        order: epoch_permutation(dataset.len(), seed, epoch),
        cursor: 0,
    })
}

impl BatchIter<'_> {
    pub fn batches_per_epoch(&self) -> usize {
        self.dataset.len() / self.batch_size
    }
}

impl Iterator for BatchIter<'_> {
    type Item = Result<PyramidBatch, DataError>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.cursor + self.batch_size > self.order.len() {
            return None; // remainder dropped
        }
        let ids = &self.order[self.cursor..self.cursor + self.batch_size];
        self.cursor += self.batch_size;
        let items: Vec<&Tensor> = ids.iter().map(|&i| self.dataset.item(i)).collect();
        Some(
            stack_batch(&items)
                .and_then(|hr| PyramidBatch::from_hr(&hr, self.lowest_res)),
        )
    }
}
