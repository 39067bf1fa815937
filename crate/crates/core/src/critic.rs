//! Discriminator with a realness head and the grouped feature extractor Q.
//!
//! Q branches off the shared trunk after `q_branch_level` downsampling blocks.
//! Its first two layers are grouped convolutions with exactly `d` groups, so
//! each output channel (and each predicted code dimension) sees only its own
//! slice of the projected trunk features.

use candle_core::{DType, Device, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::nn::{avg_pool2, leaky_relu, sigmoid, BatchNorm2d, BnStats, Conv2d, ConvSpec, GroupedLinear, Mode};
use crate::rng::SeededRng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum QMode {
    #[default]
    Deterministic,
    Probabilistic,
}

impl std::str::FromStr for QMode {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "det" | "deterministic" => Ok(QMode::Deterministic),
            "prob" | "probabilistic" => Ok(QMode::Probabilistic),
            _ => invalid(format!("unknown q mode '{s}' (expected det or prob)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CriticConfig {
    pub d: usize,
    pub img_size: usize,
    pub img_channels: usize,
    /// Width of the 1x1 stem followed by one entry per downsampling block.
    pub trunk_channels: Vec<usize>,
    /// Number of downsampling blocks shared between D and Q.
    pub q_branch_level: usize,
    pub q_mode: QMode,
    pub spectral_norm: bool,
}

impl Default for CriticConfig {
    fn default() -> Self {
        Self {
            d: 10,
            img_size: 64,
            img_channels: 3,
            trunk_channels: vec![64, 128, 256, 256, 512],
            q_branch_level: 2,
            q_mode: QMode::Deterministic,
            spectral_norm: true,
        }
    }
}

impl CriticConfig {
    /// Spatial size of the trunk features Q reads.
    pub fn branch_size(&self) -> usize {
        self.img_size >> self.q_branch_level
    }

    /// Q's projection width: the multiple of `d` nearest to the trunk width.
    pub fn q_width(&self) -> usize {
        let c = self.trunk_channels[self.q_branch_level];
        let groups = ((c as f64 / self.d as f64).round() as usize).max(1);
        groups * self.d
    }

    pub fn validate(&self) -> Result<()> {
        if self.d == 0 {
            return invalid("critic needs d >= 1");
        }
        if !self.img_size.is_power_of_two() || self.img_size < 16 {
            return invalid(format!("img_size {} must be a power of two >= 16", self.img_size));
        }
        if self.img_channels != 1 && self.img_channels != 3 {
            return invalid("img_channels must be 1 or 3");
        }
        if self.trunk_channels.contains(&0) {
            return invalid("trunk widths must be positive");
        }
        let blocks = self.img_size.trailing_zeros() as usize - 2;
        if self.trunk_channels.len() != blocks + 1 {
            return invalid(format!(
                "trunk_channels has {} entries, img_size {} needs {}",
                self.trunk_channels.len(),
                self.img_size,
                blocks + 1
            ));
        }
        if self.q_branch_level == 0 || self.q_branch_level > blocks {
            return invalid(format!(
                "q_branch_level {} must be in 1..={blocks}",
                self.q_branch_level
            ));
        }
        if self.branch_size() < 8 {
            return invalid(format!(
                "Q branch input is {0}x{0}; needs at least 8x8",
                self.branch_size()
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct DownBlock {
    conv: Conv2d,
    bn: BatchNorm2d,
}

/// Q output for a batch.
#[derive(Debug, Clone)]
pub enum QPrediction {
    Deterministic { logits: Tensor },
    Probabilistic { mu_logits: Tensor, log_sigma: Tensor },
}

pub const SIGMA_MIN: f64 = 1e-3;
pub const SIGMA_MAX: f64 = 10.0;

impl QPrediction {
    pub fn mode(&self) -> QMode {
        match self {
            QPrediction::Deterministic { .. } => QMode::Deterministic,
            QPrediction::Probabilistic { .. } => QMode::Probabilistic,
        }
    }

    /// Pre-sigmoid logits: `c_hat` logits or `mu` logits.
    pub fn logits(&self) -> &Tensor {
        match self {
            QPrediction::Deterministic { logits } => logits,
            QPrediction::Probabilistic { mu_logits, .. } => mu_logits,
        }
    }

    /// `c_hat` (deterministic) or `mu` (probabilistic), both in `[0, 1]`.
    pub fn code(&self) -> Result<Tensor> {
        sigmoid(self.logits())
    }

    pub fn sigma(&self) -> Result<Option<Tensor>> {
        match self {
            QPrediction::Deterministic { .. } => Ok(None),
            QPrediction::Probabilistic { log_sigma, .. } => {
                Ok(Some(log_sigma.exp()?.clamp(SIGMA_MIN, SIGMA_MAX)?))
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct Critic {
    config: CriticConfig,
    stem: Conv2d,
    blocks: Vec<DownBlock>,
    realness: Conv2d,
    q_proj: Conv2d,
    q_group1: Conv2d,
    q_group2: Conv2d,
    q_head: GroupedLinear,
}

/// Trunk activations: at the Q branch point and at the top of D.
#[derive(Debug, Clone)]
pub struct TrunkFeatures {
    pub branch: Tensor,
    pub top: Tensor,
}

impl Critic {
    pub fn new(config: CriticConfig, rng: &mut SeededRng, dtype: DType, device: &Device) -> Result<Self> {
        config.validate()?;
        let sn = config.spectral_norm;
        let tc = &config.trunk_channels;
        let stem = Conv2d::new(
            "d.stem",
            ConvSpec::new(config.img_channels, tc[0], 1).spectral_norm(sn),
            rng,
            dtype,
            device,
        )?;
        let mut blocks = Vec::new();
        for (k, pair) in tc.windows(2).enumerate() {
            blocks.push(DownBlock {
                conv: Conv2d::new(
                    format!("d.block{k}.conv"),
                    ConvSpec::new(pair[0], pair[1], 3).spectral_norm(sn),
                    rng,
                    dtype,
                    device,
                )?,
                bn: BatchNorm2d::new(format!("d.block{k}.bn"), pair[1], dtype, device)?,
            });
        }
        let realness = Conv2d::new(
            "d.realness",
            ConvSpec::new(*tc.last().unwrap(), 1, 4).padding(0).spectral_norm(sn),
            rng,
            dtype,
            device,
        )?;
        let d = config.d;
        let width = config.q_width();
        let q_proj = Conv2d::new(
            "q.proj",
            ConvSpec::new(tc[config.q_branch_level], width, 1).spectral_norm(sn),
            rng,
            dtype,
            device,
        )?;
        let q_group1 = Conv2d::new(
            "q.group1",
            ConvSpec::new(width, d, 3).groups(d).spectral_norm(sn),
            rng,
            dtype,
            device,
        )?;
        let q_group2 = Conv2d::new(
            "q.group2",
            ConvSpec::new(d, d, 4).stride(2).padding(1).groups(d).spectral_norm(sn),
            rng,
            dtype,
            device,
        )?;
        let head_features = (config.branch_size() / 8).pow(2);
        let outputs = match config.q_mode {
            QMode::Deterministic => 1,
            QMode::Probabilistic => 2,
        };
        let q_head = GroupedLinear::new("q.head", d, head_features, outputs, rng, dtype, device)?;
        Ok(Self {
            config,
            stem,
            blocks,
            realness,
            q_proj,
            q_group1,
            q_group2,
            q_head,
        })
    }

    pub fn config(&self) -> &CriticConfig {
        &self.config
    }

    pub fn dtype(&self) -> DType {
        self.stem.weight().dtype()
    }

    pub fn device(&self) -> &Device {
        self.stem.weight().device()
    }

    pub fn trunk_weight_shapes(&self) -> Vec<Vec<usize>> {
        let mut v = vec![self.stem.weight().dims().to_vec()];
        v.extend(self.blocks.iter().map(|b| b.conv.weight().dims().to_vec()));
        v.push(self.realness.weight().dims().to_vec());
        v
    }

    pub fn grouped_layers(&self) -> [&Conv2d; 2] {
        [&self.q_group1, &self.q_group2]
    }

    pub fn q_head(&self) -> &GroupedLinear {
        &self.q_head
    }

    /// Every spectrally normalized convolution.
    pub fn convs(&self) -> Vec<&Conv2d> {
        let mut v = vec![&self.stem];
        v.extend(self.blocks.iter().map(|b| &b.conv));
        v.extend([&self.realness, &self.q_proj, &self.q_group1, &self.q_group2]);
        v
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        let (_, c, h, w) = x.dims4()?;
        let s = self.config.img_size;
        if c != self.config.img_channels || h != s || w != s {
            return invalid(format!(
                "critic expects (B, {}, {s}, {s}), got {:?}",
                self.config.img_channels,
                x.dims()
            ));
        }
        Ok(())
    }

    fn trunk_impl(&self, x: &Tensor, mode: Mode, mut sink: Option<&mut Vec<BnStats>>) -> Result<TrunkFeatures> {
        self.check_input(x)?;
        let mut h = self.stem.forward(x)?;
        let mut branch = None;
        for (k, block) in self.blocks.iter().enumerate() {
            h = block.conv.forward(&h)?;
            h = block.bn.forward(&h, mode, sink.as_deref_mut())?;
            h = avg_pool2(&leaky_relu(&h, 0.1)?)?;
            if k + 1 == self.config.q_branch_level {
                branch = Some(h.clone());
            }
        }
        Ok(TrunkFeatures {
            branch: branch.expect("q_branch_level validated"),
            top: h,
        })
    }

    pub fn trunk(&self, x: &Tensor, mode: Mode) -> Result<TrunkFeatures> {
        self.trunk_impl(x, mode, None)
    }

    pub fn realness_head(&self, features: &TrunkFeatures) -> Result<Tensor> {
        let s = self.realness.forward(&features.top)?;
        Ok(s.flatten_all()?)
    }

    pub fn q_head_forward(&self, features: &TrunkFeatures) -> Result<QPrediction> {
        let d = self.config.d;
        let h = self.q_proj.forward(&features.branch)?;
        let h = avg_pool2(&leaky_relu(&self.q_group1.forward(&h)?, 0.1)?)?;
        let h = avg_pool2(&leaky_relu(&self.q_group2.forward(&h)?, 0.1)?)?;
        let b = h.dims4()?.0;
        let out = self.q_head.forward(&h.reshape((b, d, ()))?)?;
        Ok(match self.config.q_mode {
            QMode::Deterministic => QPrediction::Deterministic {
                logits: out.squeeze(2)?,
            },
            QMode::Probabilistic => QPrediction::Probabilistic {
                mu_logits: out.narrow(2, 0, 1)?.squeeze(2)?,
                log_sigma: out.narrow(2, 1, 1)?.squeeze(2)?,
            },
        })
    }

    /// Raw realness scores `(B,)`; no output nonlinearity.
    pub fn discriminate(&self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        self.realness_head(&self.trunk(x, mode)?)
    }

    /// Training-mode discriminator pass that updates trunk batch-norm statistics.
    pub fn discriminate_tracked(&mut self, x: &Tensor) -> Result<Tensor> {
        let mut stats = Vec::new();
        let f = self.trunk_impl(x, Mode::Train, Some(&mut stats))?;
        for (block, s) in self.blocks.iter_mut().zip(&stats) {
            block.bn.commit(s)?;
        }
        self.realness_head(&f)
    }

    pub fn extract_code(&self, x: &Tensor, mode: Mode) -> Result<QPrediction> {
        self.q_head_forward(&self.trunk(x, mode)?)
    }

    /// Realness scores and Q prediction from one shared trunk pass.
    pub fn forward_both(&self, x: &Tensor, mode: Mode) -> Result<(Tensor, QPrediction)> {
        let f = self.trunk(x, mode)?;
        Ok((self.realness_head(&f)?, self.q_head_forward(&f)?))
    }

    /// One power-iteration step on the layers used by the realness path.
    pub fn power_iterate_d(&mut self) -> Result<()> {
        self.stem.power_iterate()?;
        for b in &mut self.blocks {
            b.conv.power_iterate()?;
        }
        self.realness.power_iterate()
    }

    /// One power-iteration step on the Q-exclusive layers.
    pub fn power_iterate_q(&mut self) -> Result<()> {
        self.q_proj.power_iterate()?;
        self.q_group1.power_iterate()?;
        self.q_group2.power_iterate()
    }

    /// Per-layer kernel matrices `(d, in/d * k * k)` of the grouped Q layers.
    pub fn q_grouped_kernels(&self) -> Result<Vec<Tensor>> {
        self.grouped_layers()
            .iter()
            .map(|l| l.weight_matrix())
            .collect()
    }

    /// Same kernels as plain vectors: `[layer][group][element]`.
    pub fn q_grouped_kernel_vectors(&self) -> Result<Vec<Vec<Vec<f64>>>> {
        self.q_grouped_kernels()?
            .iter()
            .map(|t| Ok(t.to_dtype(DType::F64)?.to_vec2::<f64>()?))
            .collect()
    }

    /// Shared trunk (stem and the blocks Q reads from).
    pub fn trunk_params(&self) -> Vec<(String, Var)> {
        let mut v = self.stem.params();
        for b in &self.blocks[..self.config.q_branch_level] {
            v.extend(b.conv.params());
            v.extend(b.bn.params());
        }
        v
    }

    /// Blocks above the branch point plus the realness head.
    pub fn realness_exclusive_params(&self) -> Vec<(String, Var)> {
        let mut v = Vec::new();
        for b in &self.blocks[self.config.q_branch_level..] {
            v.extend(b.conv.params());
            v.extend(b.bn.params());
        }
        v.extend(self.realness.params());
        v
    }

    /// Everything the D update touches.
    pub fn d_params(&self) -> Vec<(String, Var)> {
        let mut v = self.trunk_params();
        v.extend(self.realness_exclusive_params());
        v
    }

    pub fn q_exclusive_params(&self) -> Vec<(String, Var)> {
        let mut v = self.q_proj.params();
        v.extend(self.q_group1.params());
        v.extend(self.q_group2.params());
        v.extend(self.q_head.params());
        v
    }

    pub fn params(&self) -> Vec<(String, Var)> {
        let mut v = self.d_params();
        v.extend(self.q_exclusive_params());
        v
    }

    pub fn buffers(&self) -> Vec<(String, Tensor)> {
        let mut v = Vec::new();
        for c in self.convs() {
            v.extend(c.buffers());
        }
        for b in &self.blocks {
            v.extend(b.bn.buffers());
        }
        v
    }

    pub fn set_buffer(&mut self, key: &str, value: Tensor) -> Result<bool> {
        let convs: Vec<&mut Conv2d> = {
            let mut v: Vec<&mut Conv2d> = vec![&mut self.stem];
            for b in self.blocks.iter_mut() {
                v.push(&mut b.conv);
            }
            v.extend([
                &mut self.realness,
                &mut self.q_proj,
                &mut self.q_group1,
                &mut self.q_group2,
            ]);
            v
        };
        for c in convs {
            if c.set_buffer(key, value.clone())? {
                return Ok(true);
            }
        }
        for b in &mut self.blocks {
            if b.bn.set_buffer(key, value.clone())? {
                return Ok(true);
            }
        }
        Ok(false)
    }
}
