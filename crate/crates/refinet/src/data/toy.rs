//! Procedural toy images: a smooth radial gradient between two random
//! colors plus one to three random solid rectangles. Deterministic per
//! (seed, index), any resolution, values quantized to the byte grid so that
//! the in-memory set matches a PNG round trip exactly.

use std::path::{Path, PathBuf};

use super::{denormalize_pixel, normalize_pixel, DataError, Dataset};
use crate::backend::{SeededRng, Shape, Tensor};

pub fn toy_image(res: usize, seed: u64, index: u64) -> Tensor {
    let mut rng = SeededRng::from_seed_and_stream(seed, index.wrapping_mul(2).wrapping_add(1));
    let cx = rng.next_f64() * res as f64;
    let cy = rng.next_f64() * res as f64;
    let c0: [f64; 3] = [rng.uniform(-1.0, 1.0), rng.uniform(-1.0, 1.0), rng.uniform(-1.0, 1.0)];
    let c1: [f64; 3] = [rng.uniform(-1.0, 1.0), rng.uniform(-1.0, 1.0), rng.uniform(-1.0, 1.0)];
    let max_dist = (2.0 * (res as f64) * (res as f64)).sqrt();

    let mut data = vec![0.0f32; 3 * res * res];
    for y in 0..res {
        for x in 0..res {
            let d = ((x as f64 - cx).powi(2) + (y as f64 - cy).powi(2)).sqrt() / max_dist;
            for c in 0..3 {
                data[(c * res + y) * res + x] = (c0[c] + (c1[c] - c0[c]) * d) as f32;
            }
        }
    }

    let rects = 1 + rng.below(3);
    for _ in 0..rects {
        let x0 = rng.below(res as u64) as usize;
        let y0 = rng.below(res as u64) as usize;
        let x1 = x0 + 1 + rng.below((res - x0) as u64) as usize;
        let y1 = y0 + 1 + rng.below((res - y0) as u64) as usize;
        let color: [f32; 3] = [
            rng.uniform(-1.0, 1.0),
            rng.uniform(-1.0, 1.0),
            rng.uniform(-1.0, 1.0),
        ];
        for y in y0..y1 {
            for x in x0..x1 {
                for c in 0..3 {
                    data[(c * res + y) * res + x] = color[c];
                }
            }
        }
    }

    // snap to the 256-level grid
    for v in &mut data {
        *v = normalize_pixel(denormalize_pixel(*v));
    }
    Tensor::from_vec(Shape::new(1, 3, res, res), data).expect("sized buffer")
}

pub fn toy_dataset(count: usize, res: usize, seed: u64) -> Result<Dataset, DataError> {
    let items = (0..count as u64).map(|i| toy_image(res, seed, i)).collect();
    Dataset::new(items, res)
}

/// Materialize the toy set as PNG files, one per index.
pub fn write_toy_pngs(
    dir: &Path,
    count: usize,
    res: usize,
    seed: u64,
) -> Result<Vec<PathBuf>, DataError> {
    std::fs::create_dir_all(dir).map_err(|source| DataError::Io { path: dir.into(), source })?;
    let mut paths = Vec::with_capacity(count);
    for i in 0..count as u64 {
        let img = super::tensor_to_image(&toy_image(res, seed, i), 0)?;
        let path = dir.join(format!("toy_{i:04}.png"));
        img.save(&path)?;
        paths.push(path);
    }
    Ok(paths)
}
