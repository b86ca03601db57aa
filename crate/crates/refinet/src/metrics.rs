//! Local evaluation of a trained refiner: pixel similarity between refined
//! outputs and their sources, reported per image as L1 and PSNR alongside
//! the refined PNGs. Deterministic given a checkpoint and an input directory.

use std::io::Write;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::backend::{ResizeDir, Tensor, TensorError};
use crate::data::{self, DataError};
use crate::models::{ModelError, ModelGraph, ModelInput};
use crate::training::TrainState;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("eval io on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("image {path} is {got}, but the checkpoint expects {expected} pixels square")]
    WrongResolution { path: PathBuf, expected: usize, got: String },
    #[error("the model is not a generator")]
    NotAGenerator,
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Peak signal-to-noise ratio over the [-1, 1] dynamic range (peak 2.0), in
/// decibels. Identical inputs give +infinity.
pub fn psnr(a: &Tensor, b: &Tensor) -> Result<f64, TensorError> {
    if a.shape() != b.shape() {
        return Err(TensorError::ShapeMismatch {
            op: "psnr",
            detail: format!("{} vs {}", a.shape(), b.shape()),
        });
    }
    let av = a.to_vec();
    let bv = b.to_vec();
    let mse = av
        .iter()
        .zip(&bv)
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum::<f64>()
        / av.len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (4.0 / mse).log10())
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalRecord {
    pub id: String,
    pub l1_hr: f32,
    pub l1_input_up: f32,
    pub psnr_hr: f64,
    pub variant: String,
}

impl EvalRecord {
    pub const CSV_HEADER: &'static str = "id,l1_hr,l1_input_up,psnr_hr,variant";

    pub fn csv_row(&self) -> String {
        let psnr = if self.psnr_hr.is_infinite() {
            "inf".to_string()
        } else {
            format!("{}", self.psnr_hr)
        };
        format!("{},{},{},{psnr},{}", self.id, self.l1_hr, self.l1_input_up, self.variant)
    }
}

/// Build the pyramid an input image supports and refine it. Inputs at the
/// generator's target resolution are downscaled per the injection mask; an
/// input already at the lowest resolution is accepted directly when the
/// model consumes nothing above it.
pub fn refine_image(generator: &ModelGraph, image: &Tensor) -> Result<Tensor, EvalError> {
    let cfg = generator.generator_config().ok_or(EvalError::NotAGenerator)?;
    let s = image.shape();
    let pyramid = if s.height == cfg.target_res && s.width == cfg.target_res {
        data::make_pyramid(image, cfg.lowest_res)?
    } else if s.height == cfg.lowest_res && s.width == cfg.lowest_res && cfg.needs_only_lowest() {
        data::ImagePyramid::from_lowest_only(image.clone())?
    } else {
        return Err(EvalError::WrongResolution {
            path: PathBuf::new(),
            expected: cfg.target_res,
            got: s.to_string(),
        });
    };
    let batch = data::PyramidBatch::from_pyramids(std::slice::from_ref(&pyramid))?;
    Ok(generator.forward(ModelInput::Pyramid(&batch))?)
}

/// Refine every PNG under `input_dir` with the checkpoint's generator,
/// write `<id>_refined.png` files plus an `eval.csv` similarity table under
/// `output_dir`, and return the records in input order.
pub fn evaluate(
    state: &TrainState,
    input_dir: &Path,
    output_dir: &Path,
) -> Result<Vec<EvalRecord>, EvalError> {
    let cfg = state
        .generator
        .generator_config()
        .ok_or(EvalError::NotAGenerator)?
        .clone();
    let files = png_files(input_dir)?;
    if files.is_empty() {
        return Err(DataError::EmptyDir(input_dir.to_path_buf()).into());
    }

    // Refine everything before writing anything, so one bad input cannot
    // leave a partial output directory behind.
    let mut records = Vec::with_capacity(files.len());
    let mut outputs = Vec::with_capacity(files.len());
    for file in &files {
        let bytes = std::fs::read(file)
            .map_err(|source| EvalError::Io { path: file.clone(), source })?;
        let img = image::load_from_memory(&bytes).map_err(DataError::from)?.to_rgb8();
        if img.width() as usize != cfg.target_res || img.height() as usize != cfg.target_res {
            return Err(EvalError::WrongResolution {
                path: file.clone(),
                expected: cfg.target_res,
                got: format!("{}x{}", img.width(), img.height()),
            });
        }
        let hr = data::image_to_tensor(&img);
        let pyramid = data::make_pyramid(&hr, cfg.lowest_res)?;
        let batch = data::PyramidBatch::from_pyramids(std::slice::from_ref(&pyramid))?;
        let refined = state.generator.forward(ModelInput::Pyramid(&batch))?;

        let l1_hr = refined.l1_mean(&hr)?.item()?;
        let up_factor = cfg.target_res / cfg.lowest_res;
        let lowest_up = pyramid.levels()[0].resize_nearest(up_factor, ResizeDir::Up)?;
        let l1_input_up = refined.l1_mean(&lowest_up)?.item()?;
        let psnr_hr = psnr(&refined, &hr)?;

        let id = file
            .file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or("image")
            .to_string();
        outputs.push((format!("{id}_refined.png"), refined));
        records.push(EvalRecord {
            id,
            l1_hr,
            l1_input_up,
            psnr_hr,
            variant: cfg.variant.to_string(),
        });
    }

    std::fs::create_dir_all(output_dir)
        .map_err(|source| EvalError::Io { path: output_dir.into(), source })?;
    for (name, refined) in &outputs {
        write_png_atomic(refined, &output_dir.join(name))?;
    }

    let csv_path = output_dir.join("eval.csv");
    let mut body = String::from(EvalRecord::CSV_HEADER);
    for r in &records {
        body.push('\n');
        body.push_str(&r.csv_row());
    }
    body.push('\n');
    let tmp = crate::training::checkpoint::staging_path(&csv_path);
    let write = |path: &Path| -> std::io::Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(body.as_bytes())
    };
    write(&tmp).map_err(|source| EvalError::Io { path: csv_path.clone(), source })?;
    std::fs::rename(&tmp, &csv_path)
        .map_err(|source| EvalError::Io { path: csv_path.clone(), source })?;
    Ok(records)
}

/// Sorted PNG paths under a directory.
pub fn png_files(dir: &Path) -> Result<Vec<PathBuf>, EvalError> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|source| EvalError::Io { path: dir.into(), source })?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .and_then(|e| e.to_str())
                .is_some_and(|e| e.eq_ignore_ascii_case("png"))
        })
        .collect();
    files.sort();
    Ok(files)
}

/// Denormalize one refined batch item and save it, staged then renamed.
pub fn write_png_atomic(tensor: &Tensor, path: &Path) -> Result<(), EvalError> {
    let img = data::tensor_to_image(tensor, 0)?;
    let tmp = crate::training::checkpoint::staging_path(path);
    img.save_with_format(&tmp, image::ImageFormat::Png)
        .map_err(DataError::from)?;
    std::fs::rename(&tmp, path)
        .map_err(|source| EvalError::Io { path: path.into(), source })?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::Shape;

    #[test]
    fn psnr_identical_is_infinite() {
        let a = crate::data::toy::toy_image(16, 1, 0);
        assert!(psnr(&a, &a).unwrap().is_infinite());
    }

    #[test]
    fn psnr_constant_offset_closed_form() {
        let a = Tensor::zeros(Shape::new(1, 3, 4, 4));
        let b = Tensor::full(Shape::new(1, 3, 4, 4), 0.2);
        let v = psnr(&a, &b).unwrap();
        assert!((v - 20.0).abs() < 1e-4, "got {v}");
    }

    #[test]
    fn psnr_symmetric_and_decreasing_in_noise() {
        let a = crate::data::toy::toy_image(16, 2, 1);
        let mut prev = f64::INFINITY;
        for amp in [0.05f32, 0.1, 0.2] {
            let noisy = Tensor::from_vec(
                a.shape(),
                a.to_vec()
                    .iter()
                    .enumerate()
                    .map(|(i, &v)| v + amp * if i % 2 == 0 { 1.0 } else { -1.0 })
                    .collect(),
            )
            .unwrap();
            let p = psnr(&a, &noisy).unwrap();
            let q = psnr(&noisy, &a).unwrap();
            assert_eq!(p, q);
            assert!(p < prev, "{p} not below {prev} at amp {amp}");
            prev = p;
        }
    }

    #[test]
    fn psnr_rejects_shape_mismatch() {
        let a = Tensor::<f32>::zeros(Shape::new(1, 3, 4, 4));
        let b = Tensor::<f32>::zeros(Shape::new(1, 3, 8, 8));
        assert!(psnr(&a, &b).is_err());
    }

    #[test]
    fn csv_row_uses_inf_sentinel() {
        let r = EvalRecord {
            id: "x".into(),
            l1_hr: 0.0,
            l1_input_up: 0.1,
            psnr_hr: f64::INFINITY,
            variant: "C".into(),
        };
        assert_eq!(r.csv_row(), "x,0,0.1,inf,C");
    }
}
