//! The discriminator autoencoder and the refiner generator variants.
//!
//! Discriminator: 3x3 conv + ELU blocks, filter widths growing by the base
//! width per encoder block, nearest-neighbor x2 resizes between blocks, a
//! fully-connected bottleneck, and a constant-width decoder back to RGB.
//!
//! Generator: the decoder design with constant filters, fed by the lowest
//! pyramid level instead of noise. After each x2 upsample a pyramid image at
//! the new resolution may be concatenated onto the features ("injection"),
//! with the following conv fusing the extra three channels back down. The
//! variants differ only in which levels are injected: A uses the lowest
//! input alone (most freedom to repaint), C injects every level (most
//! faithful to the input), B sits between.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{ResizeDir, SeededRng, Shape, Tensor, TensorError};
use crate::data::{is_power_of_two, PyramidBatch};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("input resolution {got} does not match the model's {expected}")]
    WrongResolution { expected: usize, got: usize },
    #[error("pyramid level at {res} required by the injection mask is missing")]
    MissingPyramidLevel { res: usize },
    #[error("{kind:?} model cannot consume this input")]
    WrongInput { kind: ModelKind },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub const IMAGE_CHANNELS: usize = 3;
/// Encoder blocks bottom out at this side length before the bottleneck.
pub const ENCODER_FLOOR: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Variant {
    A,
    B,
    C,
}

impl Variant {
    /// Default injection mask over the level ladder (lowest..=target). Slot
    /// zero is the generator's entry input and is always enabled.
    pub fn default_mask(&self, level_count: usize) -> Vec<bool> {
        (0..level_count)
            .map(|i| match self {
                Variant::A => i == 0,
                Variant::B => i % 2 == 0,
                Variant::C => true,
            })
            .collect()
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Variant::A => "A",
            Variant::B => "B",
            Variant::C => "C",
        })
    }
}

impl std::str::FromStr for Variant {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "A" | "a" => Ok(Variant::A),
            "B" | "b" => Ok(Variant::B),
            "C" | "c" => Ok(Variant::C),
            other => Err(format!("unknown variant `{other}` (expected A, B or C)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DiscriminatorConfig {
    pub target_res: usize,
    pub base_filters: usize,
    pub embedding_dim: usize,
    pub convs_per_block: usize,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        Self { target_res: 32, base_filters: 16, embedding_dim: 64, convs_per_block: 2 }
    }
}

impl DiscriminatorConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if !is_power_of_two(self.target_res) || self.target_res < ENCODER_FLOOR {
            return Err(ModelError::InvalidConfig(format!(
                "target_res must be a power of two >= {ENCODER_FLOOR}, got {}",
                self.target_res
            )));
        }
        for (name, v) in [
            ("base_filters", self.base_filters),
            ("embedding_dim", self.embedding_dim),
            ("convs_per_block", self.convs_per_block),
        ] {
            if v == 0 {
                return Err(ModelError::InvalidConfig(format!("{name} must be positive")));
            }
        }
        Ok(())
    }

    /// Number of encoder (and decoder) blocks: one per resolution from
    /// target_res down to the 8x8 floor.
    pub fn block_count(&self) -> usize {
        (self.target_res / ENCODER_FLOOR).ilog2() as usize + 1
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub variant: Variant,
    pub target_res: usize,
    pub base_filters: usize,
    pub lowest_res: usize,
    pub convs_per_block: usize,
    /// Override for the per-level injection mask (lowest..=target). None
    /// means the variant's default wiring.
    pub injection_mask: Option<Vec<bool>>,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            variant: Variant::B,
            target_res: 32,
            base_filters: 16,
            lowest_res: 8,
            convs_per_block: 2,
            injection_mask: None,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if !is_power_of_two(self.target_res) || !is_power_of_two(self.lowest_res) {
            return Err(ModelError::InvalidConfig(format!(
                "resolutions must be powers of two, got target {} lowest {}",
                self.target_res, self.lowest_res
            )));
        }
        if self.lowest_res > self.target_res / 2 {
            return Err(ModelError::InvalidConfig(format!(
                "lowest_res {} must be at most target_res {} / 2",
                self.lowest_res, self.target_res
            )));
        }
        if self.base_filters == 0 || self.convs_per_block == 0 {
            return Err(ModelError::InvalidConfig(
                "base_filters and convs_per_block must be positive".into(),
            ));
        }
        let mask = self.mask();
        if mask.len() != self.level_count() {
            return Err(ModelError::InvalidConfig(format!(
                "injection mask has {} entries, expected one per level ({})",
                mask.len(),
                self.level_count()
            )));
        }
        if !mask[0] {
            return Err(ModelError::InvalidConfig(
                "the lowest level is the generator input and must stay enabled".into(),
            ));
        }
        Ok(())
    }

    /// Resolutions lowest..=target, one per x2 step.
    pub fn level_count(&self) -> usize {
        (self.target_res / self.lowest_res).ilog2() as usize + 1
    }

    pub fn level_res(&self, index: usize) -> usize {
        self.lowest_res << index
    }

    /// Effective injection mask (override or variant default).
    pub fn mask(&self) -> Vec<bool> {
        self.injection_mask
            .clone()
            .unwrap_or_else(|| self.variant.default_mask(self.level_count()))
    }

    pub fn enabled_injections(&self) -> usize {
        self.mask().iter().filter(|&&m| m).count()
    }

    /// True when the model consumes only the lowest level, so an input at
    /// that resolution can be refined without any higher-quality source.
    pub fn needs_only_lowest(&self) -> bool {
        self.mask().iter().skip(1).all(|&m| !m)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum ModelConfig {
    Discriminator(DiscriminatorConfig),
    Generator(GeneratorConfig),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelKind {
    Discriminator,
    Generator,
}

#[derive(Debug, Clone)]
enum Layer {
    /// 3x3 conv by parameter index, optionally followed by ELU.
    Conv { weight: usize, bias: usize, elu: bool },
    Downsample,
    Upsample,
    Flatten,
    Dense { weight: usize, bias: usize },
    Unflatten { channels: usize, side: usize },
    /// Concatenate the pyramid image at this level onto the features.
    Inject { level: usize },
}

#[derive(Debug)]
pub struct Param {
    pub name: String,
    pub tensor: Tensor,
}

/// A built network: the layer program plus its named parameters.
#[derive(Debug)]
pub struct ModelGraph {
    kind: ModelKind,
    config: ModelConfig,
    layers: Vec<Layer>,
    params: Vec<Param>,
}

pub enum ModelInput<'a> {
    Image(&'a Tensor),
    Pyramid(&'a PyramidBatch),
}

fn init_conv(
    params: &mut Vec<Param>,
    rng: &mut SeededRng,
    name_prefix: &str,
    in_ch: usize,
    out_ch: usize,
) -> (usize, usize) {
    let fan_in = in_ch * 9;
    let bound = (1.0 / fan_in as f64).sqrt();
    let w: Vec<f32> = (0..out_ch * in_ch * 9).map(|_| rng.uniform(-bound, bound)).collect();
    let weight = Tensor::parameter(Shape::new(out_ch, in_ch, 3, 3), w).expect("sized init");
    let bias = Tensor::parameter(Shape::new(1, out_ch, 1, 1), vec![0.0; out_ch])
        .expect("sized init");
    params.push(Param { name: format!("{name_prefix}.weight"), tensor: weight });
    params.push(Param { name: format!("{name_prefix}.bias"), tensor: bias });
    (params.len() - 2, params.len() - 1)
}

fn init_dense(
    params: &mut Vec<Param>,
    rng: &mut SeededRng,
    name_prefix: &str,
    in_dim: usize,
    out_dim: usize,
) -> (usize, usize) {
    let bound = (1.0 / in_dim as f64).sqrt();
    let w: Vec<f32> = (0..out_dim * in_dim).map(|_| rng.uniform(-bound, bound)).collect();
    let weight = Tensor::parameter(Shape::new(1, 1, out_dim, in_dim), w).expect("sized init");
    let bias = Tensor::parameter(Shape::new(1, out_dim, 1, 1), vec![0.0; out_dim])
        .expect("sized init");
    params.push(Param { name: format!("{name_prefix}.weight"), tensor: weight });
    params.push(Param { name: format!("{name_prefix}.bias"), tensor: bias });
    (params.len() - 2, params.len() - 1)
}

/// Encoder: entry conv to the base width, then blocks at k*base filters for
/// block k with a x2 downsample after each block until the 8x8 floor.
/// Bottleneck: flatten -> embedding -> flatten back to base-width 8x8 maps.
/// Decoder: constant-width blocks with x2 upsamples back to target_res,
/// then a linear conv to RGB.
pub fn build_discriminator(
    cfg: &DiscriminatorConfig,
    rng: &mut SeededRng,
) -> Result<ModelGraph, ModelError> {
    cfg.validate()?;
    let n = cfg.base_filters;
    let blocks = cfg.block_count();
    let mut layers = Vec::new();
    let mut params = Vec::new();

    let (w, b) = init_conv(&mut params, rng, "disc_enc.0.0", IMAGE_CHANNELS, n);
    layers.push(Layer::Conv { weight: w, bias: b, elu: false });

    let mut cur = n;
    for k in 1..=blocks {
        let width = k * n;
        for l in 0..cfg.convs_per_block {
            let (w, b) =
                init_conv(&mut params, rng, &format!("disc_enc.{k}.{l}"), cur, width);
            layers.push(Layer::Conv { weight: w, bias: b, elu: true });
            cur = width;
        }
        if k < blocks {
            layers.push(Layer::Downsample);
        }
    }

    let flat = ENCODER_FLOOR * ENCODER_FLOOR * cur;
    let embedded = ENCODER_FLOOR * ENCODER_FLOOR * n;
    layers.push(Layer::Flatten);
    let (w, b) = init_dense(&mut params, rng, "disc_fc.0.0", flat, cfg.embedding_dim);
    layers.push(Layer::Dense { weight: w, bias: b });
    let (w, b) = init_dense(&mut params, rng, "disc_fc.0.1", cfg.embedding_dim, embedded);
    layers.push(Layer::Dense { weight: w, bias: b });
    layers.push(Layer::Unflatten { channels: n, side: ENCODER_FLOOR });

    for k in 1..=blocks {
        for l in 0..cfg.convs_per_block {
            let (w, b) = init_conv(&mut params, rng, &format!("disc_dec.{k}.{l}"), n, n);
            layers.push(Layer::Conv { weight: w, bias: b, elu: true });
        }
        if k < blocks {
            layers.push(Layer::Upsample);
        }
    }

    let (w, b) = init_conv(&mut params, rng, "disc_out.0.0", n, IMAGE_CHANNELS);
    layers.push(Layer::Conv { weight: w, bias: b, elu: false });

    Ok(ModelGraph {
        kind: ModelKind::Discriminator,
        config: ModelConfig::Discriminator(cfg.clone()),
        layers,
        params,
    })
}

/// Entry conv on the lowest pyramid level, then per level: a constant-width
/// conv+ELU block and a x2 upsample, concatenating the pyramid image after
/// any upsample whose new resolution is enabled in the injection mask. The
/// conv right after an injection maps the extra image channels back to the
/// base width. Linear conv to RGB at target_res.
pub fn build_generator(
    cfg: &GeneratorConfig,
    rng: &mut SeededRng,
) -> Result<ModelGraph, ModelError> {
    cfg.validate()?;
    let n = cfg.base_filters;
    let mask = cfg.mask();
    let mut layers = Vec::new();
    let mut params = Vec::new();

    let (w, b) = init_conv(&mut params, rng, "gen.0.0", IMAGE_CHANNELS, n);
    layers.push(Layer::Conv { weight: w, bias: b, elu: false });

    for (li, &inject) in mask.iter().enumerate() {
        let mut cur = n;
        if li > 0 {
            layers.push(Layer::Upsample);
            if inject {
                layers.push(Layer::Inject { level: li });
                cur = n + IMAGE_CHANNELS;
            }
        }
        for l in 0..cfg.convs_per_block {
            let (w, b) =
                init_conv(&mut params, rng, &format!("gen.{}.{l}", li + 1), cur, n);
            layers.push(Layer::Conv { weight: w, bias: b, elu: true });
            cur = n;
        }
    }

    let (w, b) = init_conv(&mut params, rng, "gen_out.0.0", n, IMAGE_CHANNELS);
    layers.push(Layer::Conv { weight: w, bias: b, elu: false });

    Ok(ModelGraph {
        kind: ModelKind::Generator,
        config: ModelConfig::Generator(cfg.clone()),
        layers,
        params,
    })
}

impl ModelGraph {
    pub fn kind(&self) -> ModelKind {
        self.kind
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn discriminator_config(&self) -> Option<&DiscriminatorConfig> {
        match &self.config {
            ModelConfig::Discriminator(c) => Some(c),
            ModelConfig::Generator(_) => None,
        }
    }

    pub fn generator_config(&self) -> Option<&GeneratorConfig> {
        match &self.config {
            ModelConfig::Generator(c) => Some(c),
            ModelConfig::Discriminator(_) => None,
        }
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn param_tensors(&self) -> Vec<Tensor> {
        self.params.iter().map(|p| p.tensor.clone()).collect()
    }

    pub fn param_by_name(&self, name: &str) -> Option<&Tensor> {
        self.params.iter().find(|p| p.name == name).map(|p| &p.tensor)
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.tensor.numel()).sum()
    }

    pub fn zero_grads(&self) {
        for p in &self.params {
            p.tensor.zero_grad();
        }
    }

    pub fn forward(&self, input: ModelInput<'_>) -> Result<Tensor, ModelError> {
        let (mut x, pyramid) = match (self.kind, input) {
            (ModelKind::Discriminator, ModelInput::Image(t)) => {
                let cfg = self.discriminator_config().expect("kind matches config");
                let s = t.shape();
                if s.height != cfg.target_res || s.width != cfg.target_res {
                    return Err(ModelError::WrongResolution {
                        expected: cfg.target_res,
                        got: s.height,
                    });
                }
                if s.channels != IMAGE_CHANNELS {
                    return Err(ModelError::WrongResolution {
                        expected: IMAGE_CHANNELS,
                        got: s.channels,
                    });
                }
                (t.clone(), None)
            }
            (ModelKind::Generator, ModelInput::Pyramid(p)) => {
                let cfg = self.generator_config().expect("kind matches config");
                let entry = p
                    .at_res(cfg.lowest_res)
                    .ok_or(ModelError::MissingPyramidLevel { res: cfg.lowest_res })?;
                if entry.shape().height != cfg.lowest_res {
                    return Err(ModelError::WrongResolution {
                        expected: cfg.lowest_res,
                        got: entry.shape().height,
                    });
                }
                (entry.clone(), Some(p))
            }
            (kind, _) => return Err(ModelError::WrongInput { kind }),
        };

        for layer in &self.layers {
            x = match layer {
                Layer::Conv { weight, bias, elu } => {
                    let y = x.conv3x3(&self.params[*weight].tensor, &self.params[*bias].tensor)?;
                    if *elu {
                        y.elu()
                    } else {
                        y
                    }
                }
                Layer::Downsample => x.resize_nearest(2, ResizeDir::Down)?,
                Layer::Upsample => x.resize_nearest(2, ResizeDir::Up)?,
                Layer::Flatten => x.flatten(),
                Layer::Dense { weight, bias } => {
                    x.fully_connected(&self.params[*weight].tensor, &self.params[*bias].tensor)?
                }
                Layer::Unflatten { channels, side } => {
                    x.reshape(Shape::new(x.shape().batch, *channels, *side, *side))?
                }
                Layer::Inject { level } => {
                    let cfg = self.generator_config().expect("inject is generator-only");
                    let res = cfg.level_res(*level);
                    let pyr = pyramid.expect("generator forward carries a pyramid");
                    let img =
                        pyr.at_res(res).ok_or(ModelError::MissingPyramidLevel { res })?;
                    if img.shape().batch != x.shape().batch {
                        return Err(ModelError::WrongResolution {
                            expected: x.shape().batch,
                            got: img.shape().batch,
                        });
                    }
                    x.concat_channels(img)?
                }
            };
        }
        Ok(x)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rng() -> SeededRng {
        SeededRng::new(0)
    }

    #[test]
    fn minimal_discriminator_is_one_block() {
        let cfg = DiscriminatorConfig {
            target_res: 8,
            base_filters: 4,
            embedding_dim: 8,
            convs_per_block: 2,
        };
        let model = build_discriminator(&cfg, &mut rng()).unwrap();
        assert_eq!(cfg.block_count(), 1);
        // bottleneck 8*8*4 -> 8 -> 8*8*4
        let fc0 = model.param_by_name("disc_fc.0.0.weight").unwrap();
        assert_eq!(fc0.shape(), Shape::new(1, 1, 8, 256));
        let fc1 = model.param_by_name("disc_fc.0.1.weight").unwrap();
        assert_eq!(fc1.shape(), Shape::new(1, 1, 256, 8));

        let x = Tensor::zeros(Shape::new(2, 3, 8, 8));
        let y = model.forward(ModelInput::Image(&x)).unwrap();
        assert_eq!(y.shape(), x.shape());
    }

    #[test]
    fn encoder_filter_widths_grow_linearly() {
        let cfg = DiscriminatorConfig {
            target_res: 32,
            base_filters: 64,
            embedding_dim: 64,
            convs_per_block: 2,
        };
        let model = build_discriminator(&cfg, &mut rng()).unwrap();
        for (block, width) in [(1usize, 64usize), (2, 128), (3, 192)] {
            let w = model
                .param_by_name(&format!("disc_enc.{block}.0.weight"))
                .unwrap();
            assert_eq!(w.shape().batch, width, "block {block}");
        }
    }

    #[test]
    fn rejects_non_power_of_two() {
        let cfg = DiscriminatorConfig { target_res: 24, ..Default::default() };
        assert!(matches!(
            build_discriminator(&cfg, &mut rng()),
            Err(ModelError::InvalidConfig(_))
        ));
    }

    #[test]
    fn variant_masks() {
        // ladder 8..=32 has three levels
        assert_eq!(Variant::A.default_mask(3), vec![true, false, false]);
        assert_eq!(Variant::B.default_mask(3), vec![true, false, true]);
        assert_eq!(Variant::C.default_mask(3), vec![true, true, true]);
    }

    #[test]
    fn variant_a_minimal_generator() {
        let cfg = GeneratorConfig {
            variant: Variant::A,
            target_res: 16,
            base_filters: 4,
            lowest_res: 8,
            convs_per_block: 2,
            injection_mask: None,
        };
        let model = build_generator(&cfg, &mut rng()).unwrap();
        assert_eq!(cfg.enabled_injections(), 1);
        assert!(cfg.needs_only_lowest());

        let img = crate::data::toy::toy_image(16, 1, 0);
        let pyr = crate::data::PyramidBatch::from_hr(&img, 8).unwrap();
        let y = model.forward(ModelInput::Pyramid(&pyr)).unwrap();
        assert_eq!(y.shape(), Shape::new(1, 3, 16, 16));
    }

    #[test]
    fn variant_c_injects_every_level() {
        let cfg = GeneratorConfig {
            variant: Variant::C,
            target_res: 32,
            base_filters: 4,
            lowest_res: 8,
            convs_per_block: 2,
            injection_mask: None,
        };
        assert_eq!(cfg.enabled_injections(), 3);
        let model = build_generator(&cfg, &mut rng()).unwrap();
        let img = crate::data::toy::toy_image(32, 1, 0);
        let pyr = crate::data::PyramidBatch::from_hr(&img, 8).unwrap();
        let y = model.forward(ModelInput::Pyramid(&pyr)).unwrap();
        assert_eq!(y.shape(), Shape::new(1, 3, 32, 32));
    }

    #[test]
    fn injection_needs_its_pyramid_level() {
        let cfg = GeneratorConfig {
            variant: Variant::C,
            target_res: 32,
            base_filters: 4,
            lowest_res: 8,
            convs_per_block: 1,
            injection_mask: None,
        };
        let model = build_generator(&cfg, &mut rng()).unwrap();
        // a lowest-only pyramid lacks the 16 and 32 images variant C wants
        let img = crate::data::toy::toy_image(8, 1, 0);
        let pyr = crate::data::ImagePyramid::from_lowest_only(img).unwrap();
        let batch = crate::data::PyramidBatch::from_pyramids(&[pyr]).unwrap();
        assert!(matches!(
            model.forward(ModelInput::Pyramid(&batch)),
            Err(ModelError::MissingPyramidLevel { .. })
        ));
    }

    #[test]
    fn mask_must_keep_lowest_enabled() {
        let cfg = GeneratorConfig {
            injection_mask: Some(vec![false, true, true]),
            ..Default::default()
        };
        assert!(matches!(cfg.validate(), Err(ModelError::InvalidConfig(_))));
    }

    #[test]
    fn same_seed_same_parameters() {
        let cfg = DiscriminatorConfig::default();
        let a = build_discriminator(&cfg, &mut SeededRng::new(9)).unwrap();
        let b = build_discriminator(&cfg, &mut SeededRng::new(9)).unwrap();
        for (pa, pb) in a.params().iter().zip(b.params()) {
            assert_eq!(pa.name, pb.name);
            assert_eq!(pa.tensor.to_vec(), pb.tensor.to_vec());
        }
    }

    #[test]
    fn wrong_kind_of_input_is_rejected() {
        let disc = build_discriminator(&DiscriminatorConfig::default(), &mut rng()).unwrap();
        let img = crate::data::toy::toy_image(32, 1, 0);
        let pyr = crate::data::PyramidBatch::from_hr(&img, 8).unwrap();
        assert!(matches!(
            disc.forward(ModelInput::Pyramid(&pyr)),
            Err(ModelError::WrongInput { .. })
        ));
        let x = Tensor::zeros(Shape::new(1, 3, 16, 16));
        assert!(matches!(
            disc.forward(ModelInput::Image(&x)),
            Err(ModelError::WrongResolution { .. })
        ));
    }
}
