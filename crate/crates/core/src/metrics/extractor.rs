use std::collections::HashMap;
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::data::{BatchIterator, FactorDataset};
use crate::error::{invalid, Error, Result};
use crate::nn::{avg_pool2, leaky_relu, Conv2d, ConvSpec, Linear};
use crate::objectives::log_softmax;
use crate::optim::{Adam, AdamConfig};
use crate::rng::seeded;

/// A fixed map from images `(B, C, S, S)` to features `(B, F)`.
pub trait FeatureExtractor {
    fn name(&self) -> String;
    fn feature_dim(&self) -> usize;
    fn features(&self, images: &Tensor) -> Result<Tensor>;
}

/// Flattens images; features are raw pixels.
#[derive(Debug, Clone, Copy)]
pub struct IdentityExtractor {
    pub channels: usize,
    pub size: usize,
}

impl FeatureExtractor for IdentityExtractor {
    fn name(&self) -> String {
        "identity".into()
    }

    fn feature_dim(&self) -> usize {
        self.channels * self.size * self.size
    }

    fn features(&self, images: &Tensor) -> Result<Tensor> {
        let b = images.dims()[0];
        let x = images.reshape((b, ()))?;
        if x.dims()[1] != self.feature_dim() {
            return invalid(format!(
                "identity extractor expects {} values per image, got {}",
                self.feature_dim(),
                x.dims()[1]
            ));
        }
        Ok(x)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ExtractorMeta {
    channels: usize,
    size: usize,
    widths: Vec<usize>,
    factor_sizes: Vec<usize>,
    factor_names: Vec<String>,
    train_accuracy: Vec<f64>,
}

/// Small convolutional factor classifier; its last feature map is the perceptual feature.
#[derive(Debug, Clone)]
pub struct ConvExtractor {
    meta: ExtractorMeta,
    convs: Vec<Conv2d>,
    head: Linear,
}

/// Training settings for [`ConvExtractor::train`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExtractorTraining {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for ExtractorTraining {
    fn default() -> Self {
        Self {
            steps: 400,
            batch_size: 64,
            learning_rate: 1e-3,
            seed: 0,
        }
    }
}

impl ConvExtractor {
    fn build(meta: ExtractorMeta, seed: u64) -> Result<Self> {
        if meta.size < 8 || !meta.size.is_power_of_two() {
            return invalid("extractor input size must be a power of two >= 8");
        }
        let mut rng = seeded(seed);
        let mut convs = Vec::new();
        let mut c_in = meta.channels;
        for (k, &w) in meta.widths.iter().enumerate() {
            convs.push(Conv2d::new(format!("v.conv{k}"), ConvSpec::new(c_in, w, 3), &mut rng, DType::F32, &Device::Cpu)?);
            c_in = w;
        }
        let spatial = meta.size >> meta.widths.len();
        if spatial == 0 {
            return invalid("too many extractor layers for the input size");
        }
        let feat = c_in * spatial * spatial;
        let classes: usize = meta.factor_sizes.iter().sum();
        let head = Linear::new("v.head", feat, classes, &mut rng, DType::F32, &Device::Cpu)?;
        Ok(Self { meta, convs, head })
    }

    fn params(&self) -> Vec<(String, candle_core::Var)> {
        let mut v: Vec<_> = self.convs.iter().flat_map(|c| c.params()).collect();
        v.extend(self.head.params());
        v
    }

    pub fn factor_names(&self) -> &[String] {
        &self.meta.factor_names
    }

    /// Per-factor accuracy on a held-out draw at the end of training.
    pub fn train_accuracy(&self) -> &[f64] {
        &self.meta.train_accuracy
    }

    fn logits(&self, features: &Tensor) -> Result<Tensor> {
        self.head.forward(features)
    }

    /// Trains a per-factor classifier on `dataset`.
    pub fn train(dataset: &FactorDataset, options: ExtractorTraining) -> Result<Self> {
        let meta = ExtractorMeta {
            channels: dataset.channels(),
            size: dataset.img_size(),
            widths: vec![16, 32, 32],
            factor_sizes: dataset.factor_sizes().to_vec(),
            factor_names: dataset.factor_names().to_vec(),
            train_accuracy: vec![],
        };
        let mut model = Self::build(meta, options.seed)?;
        let mut adam = Adam::new(AdamConfig {
            lr: options.learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        })?;
        let batch = options.batch_size.min(dataset.len());
        let mut it = BatchIterator::new(dataset.len(), batch, true, options.seed)?;
        let params = model.params();
        for step in 0..options.steps {
            let idx = it.next_batch();
            let x = dataset.batch_tensor(&idx, DType::F32, &Device::Cpu)?;
            let logits = model.logits(&model.features(&x)?)?;
            let loss = model.class_loss(&logits, dataset, &idx)?;
            let grads = loss.backward()?;
            adam.step(&params, &grads)?;
            if step % 100 == 0 {
                log::debug!("extractor step {step}: loss {:.4}", loss.to_scalar::<f32>()?);
            }
        }
        let probe: Vec<usize> = rand::seq::index::sample(&mut seeded(options.seed ^ 0x5eed), dataset.len(), dataset.len().min(512)).into_vec();
        model.meta.train_accuracy = model.accuracy(dataset, &probe)?;
        Ok(model)
    }

    fn class_loss(&self, logits: &Tensor, dataset: &FactorDataset, idx: &[usize]) -> Result<Tensor> {
        let b = idx.len();
        let mut offset = 0;
        let mut total: Option<Tensor> = None;
        for (f, &k) in self.meta.factor_sizes.iter().enumerate() {
            let mut target = vec![0f32; b * k];
            for (row, &i) in idx.iter().enumerate() {
                target[row * k + dataset.factor_classes(i)[f] as usize] = 1.0;
            }
            let target = Tensor::from_vec(target, (b, k), &Device::Cpu)?;
            let lp = log_softmax(&logits.narrow(1, offset, k)?)?;
            let ce = (lp * target)?.sum(1)?.mean_all()?.neg()?;
            total = Some(match total {
                None => ce,
                Some(t) => (t + ce)?,
            });
            offset += k;
        }
        total.ok_or_else(|| Error::InvalidArgument("dataset has no factors".into()))
    }

    fn accuracy(&self, dataset: &FactorDataset, idx: &[usize]) -> Result<Vec<f64>> {
        let x = dataset.batch_tensor(idx, DType::F32, &Device::Cpu)?;
        let logits = self.logits(&self.features(&x)?)?;
        let mut out = Vec::new();
        let mut offset = 0;
        for (f, &k) in self.meta.factor_sizes.iter().enumerate() {
            let pred = logits.narrow(1, offset, k)?.argmax(1)?.to_vec1::<u32>()?;
            let hits = pred
                .iter()
                .zip(idx)
                .filter(|(p, &i)| **p == dataset.factor_classes(i)[f])
                .count();
            out.push(hits as f64 / idx.len() as f64);
            offset += k;
        }
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let tensors: HashMap<String, Tensor> = self
            .params()
            .into_iter()
            .map(|(k, v)| (k, v.as_tensor().clone()))
            .collect();
        candle_core::safetensors::save(&tensors, path)?;
        std::fs::write(path.with_extension("json"), serde_json::to_string_pretty(&self.meta)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let meta: ExtractorMeta = serde_json::from_str(&std::fs::read_to_string(path.with_extension("json"))?)?;
        let model = Self::build(meta, 0)?;
        let tensors = candle_core::safetensors::load(path, &Device::Cpu)?;
        for (name, var) in model.params() {
            let t = tensors
                .get(&name)
                .ok_or_else(|| Error::Format(format!("extractor file lacks '{name}'")))?;
            var.set(t)?;
        }
        Ok(model)
    }
}

impl FeatureExtractor for ConvExtractor {
    fn name(&self) -> String {
        format!("conv{:?}", self.meta.widths)
    }

    fn feature_dim(&self) -> usize {
        let s = self.meta.size >> self.meta.widths.len();
        self.meta.widths.last().copied().unwrap_or(self.meta.channels) * s * s
    }

    fn features(&self, images: &Tensor) -> Result<Tensor> {
        let (b, c, h, w) = images.dims4()?;
        if c != self.meta.channels || h != self.meta.size || w != self.meta.size {
            return invalid(format!(
                "extractor expects (B, {}, {s}, {s}), got {:?}",
                self.meta.channels,
                images.dims(),
                s = self.meta.size
            ));
        }
        let mut x = images.to_dtype(DType::F32)?;
        for conv in &self.convs {
            x = avg_pool2(&leaky_relu(&conv.forward(&x)?, 0.1)?)?;
        }
        Ok(x.reshape((b, ()))?)
    }
}
