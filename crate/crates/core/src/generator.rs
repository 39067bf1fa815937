//! Compete-free generator.
//!
//! `c` is projected to a 4x4 seed map and added to a learned constant; after the
//! first upsampling block the trunk receives `sigmoid(mask(c)) * project(z)`.
//! The `Concat` input block is the plain InfoGAN-style stem used for ablations.

use candle_core::{DType, Device, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::latent::{CodeBatch, LatentCode, NoiseVector};
use crate::nn::{
    leaky_relu, normal_var, sigmoid, upsample_bilinear2, BatchNorm2d, BnStats, Conv2d, ConvSpec,
    Linear, Mode, INIT_STD,
};
use crate::rng::SeededRng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum InputBlock {
    #[default]
    CompeteFree,
    /// `(c, z)` concatenated into a transposed-convolution stem; no constant, no mask.
    Concat,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub d: usize,
    pub n_z: usize,
    pub img_size: usize,
    pub img_channels: usize,
    /// Channel width at each resolution from 4x4 up to `img_size`; the first
    /// entry is the seed map width.
    pub channel_schedule: Vec<usize>,
    pub input_block: InputBlock,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            d: 10,
            n_z: 100,
            img_size: 64,
            img_channels: 3,
            channel_schedule: vec![512, 256, 256, 128, 64],
            input_block: InputBlock::CompeteFree,
        }
    }
}

impl GeneratorConfig {
    pub fn seed_channels(&self) -> usize {
        self.channel_schedule[0]
    }

    /// Channel width of the 8x8 map where noise is injected.
    pub fn injection_channels(&self) -> usize {
        self.channel_schedule[1]
    }

    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.n_z == 0 {
            return invalid("generator needs d >= 1 and n_z >= 1");
        }
        if !self.img_size.is_power_of_two() || self.img_size < 16 {
            return invalid(format!("img_size {} must be a power of two >= 16", self.img_size));
        }
        if self.img_channels != 1 && self.img_channels != 3 {
            return invalid("img_channels must be 1 or 3");
        }
        let levels = self.img_size.trailing_zeros() as usize - 1;
        if self.channel_schedule.len() != levels {
            return invalid(format!(
                "channel_schedule has {} entries, img_size {} needs {levels}",
                self.channel_schedule.len(),
                self.img_size
            ));
        }
        if self.channel_schedule.contains(&0) {
            return invalid("channel widths must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
enum Stem {
    CompeteFree {
        /// Transposed-conv weight `(d, C, 4, 4)` applied to `c` as a 1x1 map.
        seed_projection: Var,
        seed_bias: Var,
        learned_constant: Var,
        mask_projection: Linear,
        z_projection: Linear,
    },
    Concat {
        weight: Var,
        bias: Var,
    },
}

#[derive(Debug, Clone)]
struct UpBlock {
    conv: Conv2d,
    bn: BatchNorm2d,
}

#[derive(Debug, Clone)]
pub struct Generator {
    config: GeneratorConfig,
    stem: Stem,
    blocks: Vec<UpBlock>,
    to_image: Conv2d,
}

/// Project a `(B, k)` input through a 4x4 transposed conv on a 1x1 map.
fn project_seed(x: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (k, ch, kh, kw) = weight.dims4()?;
    let b = x.dims2()?.0;
    let y = x
        .matmul(&weight.reshape((k, ch * kh * kw))?)?
        .reshape((b, ch, kh, kw))?;
    Ok(y.broadcast_add(&bias.reshape((1, ch, 1, 1))?)?)
}

impl Generator {
    pub fn new(config: GeneratorConfig, rng: &mut SeededRng, dtype: DType, device: &Device) -> Result<Self> {
        config.validate()?;
        let seed_ch = config.seed_channels();
        let inj_ch = config.injection_channels();
        let stem = match config.input_block {
            InputBlock::CompeteFree => Stem::CompeteFree {
                seed_projection: normal_var(&[config.d, seed_ch, 4, 4], INIT_STD, rng, dtype, device)?,
                seed_bias: Var::zeros(seed_ch, dtype, device)?,
                learned_constant: normal_var(&[1, seed_ch, 4, 4], INIT_STD, rng, dtype, device)?,
                mask_projection: Linear::new("g.mask", config.d, inj_ch, rng, dtype, device)?,
                z_projection: Linear::new("g.zproj", config.n_z, inj_ch * 64, rng, dtype, device)?,
            },
            InputBlock::Concat => Stem::Concat {
                weight: normal_var(
                    &[config.d + config.n_z, seed_ch, 4, 4],
                    INIT_STD,
                    rng,
                    dtype,
                    device,
                )?,
                bias: Var::zeros(seed_ch, dtype, device)?,
            },
        };
        let mut blocks = Vec::new();
        for (k, pair) in config.channel_schedule.windows(2).enumerate() {
            blocks.push(UpBlock {
                conv: Conv2d::new(format!("g.block{k}.conv"), ConvSpec::new(pair[0], pair[1], 3), rng, dtype, device)?,
                bn: BatchNorm2d::new(format!("g.block{k}.bn"), pair[1], dtype, device)?,
            });
        }
        let last = *config.channel_schedule.last().unwrap();
        let to_image = Conv2d::new(
            "g.to_image",
            ConvSpec::new(last, config.img_channels, 3),
            rng,
            dtype,
            device,
        )?;
        Ok(Self {
            config,
            stem,
            blocks,
            to_image,
        })
    }

    pub fn config(&self) -> &GeneratorConfig {
        &self.config
    }

    pub fn dtype(&self) -> DType {
        self.to_image.weight().dtype()
    }

    pub fn device(&self) -> &Device {
        self.to_image.weight().device()
    }

    pub fn learned_constant(&self) -> Option<&Var> {
        match &self.stem {
            Stem::CompeteFree { learned_constant, .. } => Some(learned_constant),
            Stem::Concat { .. } => None,
        }
    }

    pub fn seed_projection(&self) -> Option<&Var> {
        match &self.stem {
            Stem::CompeteFree { seed_projection, .. } => Some(seed_projection),
            Stem::Concat { .. } => None,
        }
    }

    pub fn mask_projection(&self) -> Option<&Linear> {
        match &self.stem {
            Stem::CompeteFree { mask_projection, .. } => Some(mask_projection),
            Stem::Concat { .. } => None,
        }
    }

    /// Trunk convolution weights, one per upsampling block.
    pub fn trunk_weight_shapes(&self) -> Vec<Vec<usize>> {
        self.blocks.iter().map(|b| b.conv.weight().dims().to_vec()).collect()
    }

    /// Attention mask `(B, C)` at the injection level, in `(0, 1)`.
    pub fn mask(&self, c: &Tensor) -> Result<Option<Tensor>> {
        match &self.stem {
            Stem::CompeteFree { mask_projection, .. } => Ok(Some(sigmoid(&mask_projection.forward(c)?)?)),
            Stem::Concat { .. } => Ok(None),
        }
    }

    fn check_inputs(&self, c: &Tensor, z: &Tensor) -> Result<()> {
        let (bc, d) = c.dims2()?;
        let (bz, n_z) = z.dims2()?;
        if bc != bz {
            return invalid(format!("batch size mismatch: c has {bc}, z has {bz}"));
        }
        if d != self.config.d || n_z != self.config.n_z {
            return invalid(format!(
                "expected c:(B,{}) z:(B,{}), got c:(B,{d}) z:(B,{n_z})",
                self.config.d, self.config.n_z
            ));
        }
        Ok(())
    }

    fn forward_impl(
        &self,
        c: &Tensor,
        z: &Tensor,
        mode: Mode,
        mut sink: Option<&mut Vec<BnStats>>,
    ) -> Result<Tensor> {
        self.check_inputs(c, z)?;
        let b = c.dims2()?.0;
        let mut h = match &self.stem {
            Stem::CompeteFree {
                seed_projection,
                seed_bias,
                learned_constant,
                ..
            } => project_seed(c, seed_projection.as_tensor(), seed_bias.as_tensor())?
                .broadcast_add(learned_constant.as_tensor())?,
            Stem::Concat { weight, bias } => {
                let cz = Tensor::cat(&[c, z], 1)?;
                project_seed(&cz, weight.as_tensor(), bias.as_tensor())?
            }
        };
        for (k, block) in self.blocks.iter().enumerate() {
            h = block.conv.forward(&h)?;
            h = block.bn.forward(&h, mode, sink.as_deref_mut())?;
            h = upsample_bilinear2(&leaky_relu(&h, 0.1)?)?;
            if k == 0 {
                if let Stem::CompeteFree {
                    mask_projection,
                    z_projection,
                    ..
                } = &self.stem
                {
                    let ch = self.config.injection_channels();
                    let mask = sigmoid(&mask_projection.forward(c)?)?.reshape((b, ch, 1, 1))?;
                    let zf = z_projection.forward(z)?.reshape((b, ch, 8, 8))?;
                    h = (h + zf.broadcast_mul(&mask)?)?;
                }
            }
        }
        Ok(sigmoid(&self.to_image.forward(&h)?)?)
    }

    /// Images `(B, C, S, S)` in `[0, 1]`. `c: (B, d)`, `z: (B, n_z)`.
    pub fn forward(&self, c: &Tensor, z: &Tensor, mode: Mode) -> Result<Tensor> {
        self.forward_impl(c, z, mode, None)
    }

    /// Training forward pass that also updates batch-norm running statistics.
    pub fn forward_tracked(&mut self, c: &Tensor, z: &Tensor) -> Result<Tensor> {
        let mut stats = Vec::new();
        let out = self.forward_impl(c, z, Mode::Train, Some(&mut stats))?;
        for (block, s) in self.blocks.iter_mut().zip(&stats) {
            block.bn.commit(s)?;
        }
        Ok(out)
    }

    pub fn generate(&self, codes: &CodeBatch, noise: &[NoiseVector], mode: Mode) -> Result<Tensor> {
        if codes.len() != noise.len() {
            return invalid(format!(
                "batch size mismatch: {} codes, {} noise vectors",
                codes.len(),
                noise.len()
            ));
        }
        let c = codes.to_tensor(self.dtype(), self.device())?;
        let z = crate::latent::noise_batch_tensor(noise, self.dtype(), self.device())?;
        self.forward(&c, &z, mode)
    }

    /// One image per value, sweeping entry `dim` of `base` with everything else fixed.
    pub fn latent_traversal(
        &self,
        base: &LatentCode,
        z: &NoiseVector,
        dim: usize,
        values: &[f64],
    ) -> Result<Vec<Tensor>> {
        if dim >= self.config.d {
            return invalid(format!("traversal dim {dim} out of range for d={}", self.config.d));
        }
        if let Some(v) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return invalid(format!("traversal value {v} outside [0, 1]"));
        }
        if values.is_empty() {
            return Ok(vec![]);
        }
        let codes = values
            .iter()
            .map(|&v| base.with_entry(dim, v))
            .collect::<Result<Vec<_>>>()?;
        let batch = CodeBatch::from_codes(codes)?;
        let noise = vec![z.clone(); values.len()];
        let images = self.generate(&batch, &noise, Mode::Eval)?;
        (0..values.len())
            .map(|k| Ok(images.get(k)?))
            .collect()
    }

    pub fn params(&self) -> Vec<(String, Var)> {
        let mut out = match &self.stem {
            Stem::CompeteFree {
                seed_projection,
                seed_bias,
                learned_constant,
                mask_projection,
                z_projection,
            } => {
                let mut v = vec![
                    ("g.seed.weight".to_string(), seed_projection.clone()),
                    ("g.seed.bias".to_string(), seed_bias.clone()),
                    ("g.learned_constant".to_string(), learned_constant.clone()),
                ];
                v.extend(mask_projection.params());
                v.extend(z_projection.params());
                v
            }
            Stem::Concat { weight, bias } => vec![
                ("g.stem.weight".to_string(), weight.clone()),
                ("g.stem.bias".to_string(), bias.clone()),
            ],
        };
        for b in &self.blocks {
            out.extend(b.conv.params());
            out.extend(b.bn.params());
        }
        out.extend(self.to_image.params());
        out
    }

    pub fn buffers(&self) -> Vec<(String, Tensor)> {
        self.blocks.iter().flat_map(|b| b.bn.buffers()).collect()
    }

    pub fn set_buffer(&mut self, key: &str, value: Tensor) -> Result<bool> {
        for b in &mut self.blocks {
            if b.bn.set_buffer(key, value.clone())? {
                return Ok(true);
            }
        }
        Ok(false)
    }
}

/// Anything that renders images from `(c, z)`; used by the metrics.
pub trait ImageGenerator {
    fn code_dim(&self) -> usize;
    fn noise_dim(&self) -> usize;
    fn dtype(&self) -> DType;
    fn device(&self) -> Device;
    /// Deterministic evaluation-mode rendering.
    fn render(&self, c: &Tensor, z: &Tensor) -> Result<Tensor>;
}

impl ImageGenerator for Generator {
    fn code_dim(&self) -> usize {
        self.config.d
    }

    fn noise_dim(&self) -> usize {
        self.config.n_z
    }

    fn dtype(&self) -> DType {
        Generator::dtype(self)
    }

    fn device(&self) -> Device {
        Generator::device(self).clone()
    }

    fn render(&self, c: &Tensor, z: &Tensor) -> Result<Tensor> {
        self.forward(c, z, Mode::Eval)
    }
}
