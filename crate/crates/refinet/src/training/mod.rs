//! The training loop: simultaneous discriminator/generator updates from one
//! shared forward pass, the k equilibrium dynamics, CSV metrics, and
//! checkpointing.

pub mod checkpoint;

use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{AdamParams, AdamState, SeededRng, TensorError};
use crate::data::{epoch_permutation, stack_batch, DataError, Dataset, PyramidBatch};
use crate::losses::{
    self, convergence_measure, LossError, LossReport, LossWeights,
};
use crate::models::{
    build_discriminator, build_generator, DiscriminatorConfig, GeneratorConfig, ModelError,
    ModelGraph, ModelInput, Variant,
};

pub use checkpoint::{
    checkpoint_bytes, load_checkpoint, parse_checkpoint, save_checkpoint, CheckpointError,
};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("non-finite loss at step {step}: {detail}")]
    NonFinite { step: u64, detail: String },
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("training batch carries no source images")]
    BatchWithoutSource,
    #[error("failed to write {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

/// Everything one run needs. All fields have workable defaults; resolutions
/// stay within the 8..=64 range this toolkit targets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub weights: LossWeights,
    pub lr: f64,
    pub batch_size: usize,
    pub total_steps: u64,
    pub seed: u64,
    pub target_res: usize,
    pub lowest_res: usize,
    pub variant: Variant,
    pub base_filters: usize,
    pub embedding_dim: usize,
    pub convs_per_block: usize,
    pub injection_mask: Option<Vec<bool>>,
    pub checkpoint_every: u64,
    pub log_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            weights: LossWeights::default(),
            lr: 1e-3,
            batch_size: 25,
            total_steps: 1000,
            seed: 0,
            target_res: 32,
            lowest_res: 8,
            variant: Variant::B,
            base_filters: 16,
            embedding_dim: 64,
            convs_per_block: 2,
            injection_mask: None,
            checkpoint_every: 500,
            log_every: 1,
        }
    }
}

pub const MAX_TARGET_RES: usize = 64;

impl TrainConfig {
    pub fn discriminator_config(&self) -> DiscriminatorConfig {
        DiscriminatorConfig {
            target_res: self.target_res,
            base_filters: self.base_filters,
            embedding_dim: self.embedding_dim,
            convs_per_block: self.convs_per_block,
        }
    }

    pub fn generator_config(&self) -> GeneratorConfig {
        GeneratorConfig {
            variant: self.variant,
            target_res: self.target_res,
            base_filters: self.base_filters,
            lowest_res: self.lowest_res,
            convs_per_block: self.convs_per_block,
            injection_mask: self.injection_mask.clone(),
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        self.weights.validate()?;
        let bad = |msg: String| Err(TrainError::InvalidConfig(msg));
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if self.total_steps == 0 {
            return bad("total_steps must be at least 1".into());
        }
        if self.checkpoint_every == 0 || self.log_every == 0 {
            return bad("checkpoint_every and log_every must be at least 1".into());
        }
        if self.target_res > MAX_TARGET_RES {
            return bad(format!(
                "target_res {} exceeds the supported maximum {MAX_TARGET_RES}",
                self.target_res
            ));
        }
        // keeps the worst configurable build at desk scale, which also
        // bounds what a hostile checkpoint can make the loader allocate
        if self.base_filters > 128 || self.embedding_dim > 512 || self.convs_per_block > 4 {
            return bad("model widths out of supported range".into());
        }
        if self.batch_size > 4096 {
            return bad(format!("batch_size {} out of supported range", self.batch_size));
        }
        self.discriminator_config().validate()?;
        self.generator_config().validate()?;
        Ok(())
    }
}

/// Live state of one training run.
#[derive(Debug)]
pub struct TrainState {
    pub config: TrainConfig,
    pub step: u64,
    pub k_t: f32,
    pub discriminator: ModelGraph,
    pub generator: ModelGraph,
    pub adam_d: AdamState,
    pub adam_g: AdamState,
    pub rng: SeededRng,
}

impl TrainState {
    pub fn new(config: TrainConfig) -> Result<Self, TrainError> {
        config.validate()?;
        let mut rng = SeededRng::new(config.seed);
        let discriminator = build_discriminator(&config.discriminator_config(), &mut rng)?;
        let generator = build_generator(&config.generator_config(), &mut rng)?;
        let adam = AdamParams::with_lr(config.lr);
        let adam_d = AdamState::new(adam, &discriminator.param_tensors());
        let adam_g = AdamState::new(adam, &generator.param_tensors());
        Ok(Self { config, step: 0, k_t: 0.0, discriminator, generator, adam_d, adam_g, rng })
    }
}

/// One simultaneous update: forward G on the pyramids, forward D on the real
/// batch and on G's output, form both objectives from those shared values,
/// push each loss's gradients only into its own network, then apply both
/// Adam steps and move k.
pub fn train_step(state: &mut TrainState, batch: &PyramidBatch) -> Result<LossReport, TrainError> {
    let x = batch.hr().ok_or(TrainError::BatchWithoutSource)?;
    let weights = state.config.weights;
    let step = state.step + 1;

    let g_out = state.generator.forward(ModelInput::Pyramid(batch))?;
    let d_real = state.discriminator.forward(ModelInput::Image(x))?;
    let d_fake = state.discriminator.forward(ModelInput::Image(&g_out))?;

    let l_gan_x = losses::loss_gan(x, &d_real)?;
    let l_gan_gz = losses::loss_gan(&g_out, &d_fake)?;
    let l_rcn = losses::reconstruction_loss(x, &g_out)?;
    let l_d = losses::discriminator_loss(&l_gan_x, &l_gan_gz, state.k_t)?;
    let l_g = losses::generator_loss(&l_gan_gz, &l_rcn, weights.lambda_r)?;

    let report = LossReport {
        step,
        l_gan_x: l_gan_x.item()?,
        l_gan_gz: l_gan_gz.item()?,
        l_rcn: l_rcn.item()?,
        l_d: l_d.item()?,
        l_g: l_g.item()?,
        k_t: state.k_t,
        m: 0.0,
    };
    let report = LossReport {
        m: convergence_measure(weights.gamma, report.l_gan_x, report.l_gan_gz),
        ..report
    };
    if !report.all_finite() {
        return Err(TrainError::NonFinite {
            step,
            detail: format!(
                "L_gan_x={} L_gan_gz={} L_rcn={} L_D={} L_G={}",
                report.l_gan_x, report.l_gan_gz, report.l_rcn, report.l_d, report.l_g
            ),
        });
    }

    // Both backward passes run before either optimizer touches a parameter,
    // so the two updates see the same forward values.
    let d_params = state.discriminator.param_tensors();
    let g_params = state.generator.param_tensors();
    l_d.backward_for(Some(&d_params))?;
    l_g.backward_for(Some(&g_params))?;
    state
        .adam_d
        .step(&d_params, |i| state.discriminator.params()[i].name.clone())?;
    state
        .adam_g
        .step(&g_params, |i| state.generator.params()[i].name.clone())?;
    state.discriminator.zero_grads();
    state.generator.zero_grads();

    state.k_t = losses::update_k(state.k_t, &weights, report.l_gan_x, report.l_gan_gz);
    state.step = step;
    Ok(report)
}

pub struct TrainOutputs {
    pub log_path: PathBuf,
    pub final_checkpoint: PathBuf,
    pub state: TrainState,
    /// The rows that were logged, in order.
    pub reports: Vec<LossReport>,
}

pub fn train(config: TrainConfig, dataset: &Dataset, out_dir: &Path) -> Result<TrainOutputs, TrainError> {
    let state = TrainState::new(config)?;
    train_from(state, dataset, out_dir)
}

/// Run (or continue) a training state up to its configured total_steps,
/// writing the CSV log and scheduled checkpoints under `out_dir`.
pub fn train_from(
    mut state: TrainState,
    dataset: &Dataset,
    out_dir: &Path,
) -> Result<TrainOutputs, TrainError> {
    let cfg = state.config.clone();
    if dataset.target_res() != cfg.target_res {
        return Err(TrainError::InvalidConfig(format!(
            "dataset is at {} but the config wants {}",
            dataset.target_res(),
            cfg.target_res
        )));
    }
    if cfg.batch_size > dataset.len() {
        return Err(DataError::BadBatchSize { batch: cfg.batch_size, len: dataset.len() }.into());
    }
    std::fs::create_dir_all(out_dir)
        .map_err(|source| TrainError::Io { path: out_dir.into(), source })?;

    let log_path = out_dir.join("train_log.csv");
    let log_file = std::fs::File::create(&log_path)
        .map_err(|source| TrainError::Io { path: log_path.clone(), source })?;
    let mut log = std::io::BufWriter::new(log_file);
    let io_err =
        |source: std::io::Error| TrainError::Io { path: log_path.clone(), source };
    writeln!(log, "{}", LossReport::CSV_HEADER).map_err(&io_err)?;

    let batches_per_epoch = (dataset.len() / cfg.batch_size) as u64;
    let mut cached_perm: Option<(u64, Vec<usize>)> = None;
    let mut reports = Vec::new();

    while state.step < cfg.total_steps {
        let epoch = state.step / batches_per_epoch;
        let slot = (state.step % batches_per_epoch) as usize;
        if cached_perm.as_ref().map(|(e, _)| *e) != Some(epoch) {
            cached_perm = Some((epoch, epoch_permutation(dataset.len(), cfg.seed, epoch)));
        }
        let perm = &cached_perm.as_ref().expect("just filled").1;
        let ids = &perm[slot * cfg.batch_size..(slot + 1) * cfg.batch_size];
        let items: Vec<_> = ids.iter().map(|&i| dataset.item(i)).collect();
        let hr = stack_batch(&items)?;
        let batch = PyramidBatch::from_hr(&hr, cfg.lowest_res)?;

        let report = train_step(&mut state, &batch)?;
        if report.step % cfg.log_every == 0 {
            writeln!(log, "{}", report.csv_row()).map_err(&io_err)?;
            log.flush().map_err(&io_err)?;
            reports.push(report);
        }
        if report.step % cfg.checkpoint_every == 0 {
            let path = out_dir.join(format!("checkpoint_{:06}.rfnt", report.step));
            save_checkpoint(&state, &path)?;
        }
    }
    log.flush().map_err(&io_err)?;

    let final_checkpoint = out_dir.join("checkpoint_final.rfnt");
    save_checkpoint(&state, &final_checkpoint)?;
    Ok(TrainOutputs { log_path, final_checkpoint, state, reports })
}
