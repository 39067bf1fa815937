//! The training loop: discriminator update, adversarial generator update,
//! then a joint generator and Q update on the code-reconstruction objective.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::checkpoint::{checkpoint_path, save_checkpoint};
use crate::config::TrainConfig;
use crate::critic::Critic;
use crate::data::{BatchIterator, FactorDataset};
use crate::error::{invalid, Error, Result};
use crate::generator::Generator;
use crate::latent::{noise_tensor, CodeBatch, CodeKind, SamplingSchedule};
use crate::metrics::q_cosine_report;
use crate::nn::{scalar, Mode};
use crate::objectives::{g_adv_loss, hinge_d_loss, orthogonal_reg, total_mi_objective, LossWeights};
use crate::optim::Adam;
use crate::rng::{normal_vec, substream, SeededRng};

/// Offset mixed into the seed for the data-order stream.
pub(crate) const DATA_SEED_SALT: u64 = 0x9e37_79b9_7f4a_7c15;

/// `sigma0 * max(0, 1 - iteration / anneal_end)`; zero once annealing ends.
pub fn instance_noise_sigma(config: &TrainConfig, iteration: u64) -> Result<f64> {
    if iteration == 0 {
        return invalid("iterations are 1-based");
    }
    let end = config.anneal_end();
    if end == 0 {
        return Ok(0.0);
    }
    Ok(config.instance_noise_sigma0 * (1.0 - iteration as f64 / end as f64).max(0.0))
}

/// One logged training iteration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub iteration: u64,
    pub kind: CodeKind,
    pub loss_d: f64,
    pub loss_g: f64,
    pub loss_mi_cont: f64,
    pub loss_ce: Option<f64>,
    pub ortho_reg: f64,
    pub q_cosine: f64,
    pub sigma_t: f64,
}

pub const CSV_HEADER: &str = "iteration,kind,loss_d,loss_g,loss_mi_cont,loss_ce,ortho_reg,q_cosine,sigma_t";

impl StepLog {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.iteration,
            self.kind.as_str(),
            self.loss_d,
            self.loss_g,
            self.loss_mi_cont,
            self.loss_ce.map(|v| v.to_string()).unwrap_or_default(),
            self.ortho_reg,
            self.q_cosine,
            self.sigma_t
        )
    }

    pub fn is_finite(&self) -> bool {
        [self.loss_d, self.loss_g, self.loss_mi_cont, self.ortho_reg, self.q_cosine]
            .iter()
            .chain(self.loss_ce.iter())
            .all(|v| v.is_finite())
    }
}

/// Everything needed to continue training bit-for-bit.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub(crate) config: TrainConfig,
    pub(crate) iteration: u64,
    pub(crate) generator: Generator,
    pub(crate) critic: Critic,
    pub(crate) opt_d: Adam,
    pub(crate) opt_gq: Adam,
    pub(crate) rng: SeededRng,
    pub(crate) data: BatchIterator,
    pub(crate) data_len: usize,
    schedule: SamplingSchedule,
    weights: LossWeights,
}

fn finite(t: &Tensor, iteration: u64, what: &str) -> Result<f64> {
    let v = scalar(t)?;
    if !v.is_finite() {
        return Err(Error::NonFinite {
            iteration,
            detail: format!("{what} = {v}"),
            snapshot: None,
        });
    }
    Ok(v)
}

impl TrainState {
    /// Fresh models and optimizers for a dataset of `data_len` images.
    pub fn new(config: TrainConfig, data_len: usize) -> Result<Self> {
        config.validate()?;
        let dev = Device::Cpu;
        let generator = Generator::new(config.generator_config(), &mut substream(config.seed, 0), DType::F32, &dev)?;
        let critic = Critic::new(config.critic_config(), &mut substream(config.seed, 1), DType::F32, &dev)?;
        let data = BatchIterator::new(data_len, config.batch_size, true, config.seed ^ DATA_SEED_SALT)?;
        Self::assemble(
            config.clone(),
            0,
            generator,
            critic,
            Adam::new(config.adam())?,
            Adam::new(config.adam())?,
            substream(config.seed, 2),
            data,
            data_len,
        )
    }

    #[allow(clippy::too_many_arguments)]
    pub(crate) fn assemble(
        config: TrainConfig,
        iteration: u64,
        generator: Generator,
        critic: Critic,
        opt_d: Adam,
        opt_gq: Adam,
        rng: SeededRng,
        data: BatchIterator,
        data_len: usize,
    ) -> Result<Self> {
        Ok(Self {
            schedule: config.schedule()?,
            weights: config.loss_weights(),
            config,
            iteration,
            generator,
            critic,
            opt_d,
            opt_gq,
            rng,
            data,
            data_len,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn iteration(&self) -> u64 {
        self.iteration
    }

    /// Moves the stopping point of a resumed run. The noise anneal end is
    /// already fixed in the stored config and does not move.
    pub fn extend_to(&mut self, iterations: u64) -> Result<()> {
        if iterations < self.iteration {
            return invalid(format!("cannot stop at {iterations}, state is at {}", self.iteration));
        }
        if self.config.anneal_end_iter.is_none() {
            self.config.anneal_end_iter = Some(self.config.anneal_end());
        }
        self.config.iterations = iterations;
        Ok(())
    }

    pub fn generator(&self) -> &Generator {
        &self.generator
    }

    pub fn critic(&self) -> &Critic {
        &self.critic
    }

    pub fn generator_mut(&mut self) -> &mut Generator {
        &mut self.generator
    }

    pub fn critic_mut(&mut self) -> &mut Critic {
        &mut self.critic
    }

    /// Parameters updated by the code-reconstruction step.
    pub fn mi_params(&self) -> Vec<(String, Var)> {
        let mut p = self.generator.params();
        p.extend(self.critic.q_exclusive_params());
        if self.config.mi_updates_trunk {
            p.extend(self.critic.trunk_params());
        }
        p
    }

    fn gaussian_like(&mut self, x: &Tensor, sigma: f64) -> Result<Tensor> {
        let n = x.elem_count();
        let noise = Tensor::from_vec(normal_vec(&mut self.rng, n), x.shape(), x.device())?.to_dtype(x.dtype())?;
        Ok((noise * sigma)?)
    }

    fn noisy(&mut self, x: &Tensor, sigma: f64) -> Result<Tensor> {
        if sigma == 0.0 {
            return Ok(x.clone());
        }
        let n = self.gaussian_like(x, sigma)?;
        Ok((x + n)?)
    }

    /// Draws the next real minibatch from `dataset`.
    pub fn next_real_batch(&mut self, dataset: &FactorDataset) -> Result<Tensor> {
        if dataset.len() != self.data_len {
            return invalid(format!(
                "state was built for {} images, dataset has {}",
                self.data_len,
                dataset.len()
            ));
        }
        let idx = self.data.next_batch();
        dataset.batch_tensor(&idx, DType::F32, &Device::Cpu)
    }

    /// One full iteration on `real` (B images in `[0, 1]`).
    pub fn train_step(&mut self, real: &Tensor) -> Result<StepLog> {
        let i = self.iteration + 1;
        let cfg = self.config.clone();
        let b = cfg.batch_size;
        let expected = [b, cfg.img_channels, cfg.img_size, cfg.img_size];
        if real.dims() != expected {
            return invalid(format!("real batch must be {expected:?}, got {:?}", real.dims()));
        }
        let real = real.to_dtype(DType::F32)?;
        let kind = self.schedule.kind_at(i);
        let codes = CodeBatch::sample(kind, cfg.d, b, &mut self.rng)?;
        let c = codes.to_tensor(DType::F32, &Device::Cpu)?;
        let z = noise_tensor(b, cfg.n_z, &mut self.rng, DType::F32, &Device::Cpu)?;
        let sigma_t = instance_noise_sigma(&cfg, i)?;

        // Discriminator.
        self.critic.power_iterate_d()?;
        let fake = self.generator.forward(&c, &z, Mode::Train)?.detach();
        let real_n = self.noisy(&real, sigma_t)?;
        let fake_n = self.noisy(&fake, sigma_t)?;
        let scores = self.critic.discriminate_tracked(&Tensor::cat(&[&real_n, &fake_n], 0)?)?;
        let loss_d = hinge_d_loss(&scores.narrow(0, 0, b)?, &scores.narrow(0, b, b)?)?;
        let loss_d_v = finite(&loss_d, i, "loss_d")?;
        let grads = loss_d.backward()?;
        self.opt_d.step(&self.critic.d_params(), &grads)?;

        // Generator, adversarial.
        let fake = self.generator.forward_tracked(&c, &z)?;
        let fake_n = self.noisy(&fake, sigma_t)?;
        let loss_g = g_adv_loss(&self.critic.discriminate(&fake_n, Mode::Train)?)?;
        let loss_g_v = finite(&loss_g, i, "loss_g")?;
        let grads = loss_g.backward()?;
        self.opt_gq.step(&self.generator.params(), &grads)?;

        // Generator and Q, code reconstruction.
        self.critic.power_iterate_q()?;
        let fake = self.generator.forward(&c, &z, Mode::Train)?;
        let pred = self.critic.extract_code(&fake, Mode::Train)?;
        let terms = total_mi_objective(&pred, &codes, &self.weights)?;
        let mut total = terms.total.clone();
        let ortho_v = if self.weights.ortho_weight > 0.0 {
            let reg = orthogonal_reg(&self.critic.q_grouped_kernels()?, cfg.ortho_sign)?;
            let v = finite(&reg, i, "ortho_reg")?;
            total = (total + reg.affine(self.weights.ortho_weight, 0.0)?)?;
            v
        } else {
            let k = self.critic.q_grouped_kernels()?;
            scalar(&orthogonal_reg(&k, cfg.ortho_sign)?.detach())?
        };
        let mi_v = finite(&terms.mi, i, "loss_mi")?;
        let ce_v = match &terms.ce {
            Some(ce) => Some(finite(ce, i, "loss_ce")?),
            None => None,
        };
        finite(&total, i, "loss_mi_total")?;
        let grads = total.backward()?;
        self.opt_gq.step(&self.mi_params(), &grads)?;

        self.iteration = i;
        Ok(StepLog {
            iteration: i,
            kind,
            loss_d: loss_d_v,
            loss_g: loss_g_v,
            loss_mi_cont: mi_v,
            loss_ce: ce_v,
            ortho_reg: ortho_v,
            q_cosine: q_cosine_report(&self.critic)?,
            sigma_t,
        })
    }

    /// Fetches a real batch and runs [`TrainState::train_step`].
    pub fn step_on(&mut self, dataset: &FactorDataset) -> Result<StepLog> {
        let real = self.next_real_batch(dataset)?;
        self.train_step(&real)
    }
}

/// Paths inside a run directory.
#[derive(Debug, Clone)]
pub struct RunLayout {
    pub root: PathBuf,
}

impl RunLayout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn config_echo(&self) -> PathBuf {
        self.root.join("config.toml")
    }

    pub fn metrics_csv(&self) -> PathBuf {
        self.root.join("metrics.csv")
    }

    pub fn checkpoints(&self) -> PathBuf {
        self.root.join("checkpoints")
    }

    pub fn traversals(&self) -> PathBuf {
        self.root.join("traversals")
    }

    pub fn reports(&self) -> PathBuf {
        self.root.join("reports")
    }

    pub fn create(&self) -> Result<()> {
        for d in [self.root.clone(), self.checkpoints(), self.traversals(), self.reports()] {
            fs::create_dir_all(d)?;
        }
        Ok(())
    }
}

/// Result of [`train`].
#[derive(Debug, Clone)]
pub struct TrainSummary {
    pub final_checkpoint: PathBuf,
    pub logs: Vec<StepLog>,
}

/// Runs `state` up to `config.iterations`, logging and snapshotting into `run`.
/// A non-finite loss saves a diagnostic snapshot and returns [`Error::NonFinite`].
pub fn train(state: &mut TrainState, dataset: &FactorDataset, run: &RunLayout) -> Result<TrainSummary> {
    run.create()?;
    fs::write(run.config_echo(), state.config.to_toml()?)?;
    let csv_path = run.metrics_csv();
    let fresh = fs::metadata(&csv_path).map(|m| m.len() == 0).unwrap_or(true);
    let mut csv = OpenOptions::new().create(true).append(true).open(&csv_path)?;
    if fresh {
        writeln!(csv, "{CSV_HEADER}")?;
    }
    let cfg = state.config.clone();
    let mut logs = Vec::new();
    let mut last_saved = None;
    while state.iteration < cfg.iterations {
        let log = match state.step_on(dataset) {
            Ok(l) => l,
            Err(Error::NonFinite { iteration, detail, .. }) => {
                let path = run.checkpoints().join(format!("diverged-{iteration:08}.safetensors"));
                save_checkpoint(state, &path)?;
                csv.flush()?;
                return Err(Error::NonFinite {
                    iteration,
                    detail,
                    snapshot: Some(path),
                });
            }
            Err(e) => {
                csv.flush()?;
                return Err(e);
            }
        };
        if log.iteration % cfg.log_every == 0 || log.iteration == cfg.iterations {
            writeln!(csv, "{}", log.csv_row())?;
            log::info!(
                "iter {} [{}] d={:.4} g={:.4} mi={:.4} ortho={:.4}",
                log.iteration,
                log.kind.as_str(),
                log.loss_d,
                log.loss_g,
                log.loss_mi_cont,
                log.ortho_reg
            );
        }
        let i = log.iteration;
        logs.push(log);
        if i % cfg.snapshot_every == 0 || i == cfg.iterations {
            csv.flush()?;
            let path = checkpoint_path(&run.checkpoints(), i);
            save_checkpoint(state, &path)?;
            last_saved = Some(path);
        }
    }
    csv.flush()?;
    let final_checkpoint = match last_saved {
        Some(p) => p,
        None => {
            let p = checkpoint_path(&run.checkpoints(), state.iteration);
            save_checkpoint(state, &p)?;
            p
        }
    };
    Ok(TrainSummary { final_checkpoint, logs })
}

/// Convenience for tests and examples: state plus loop in one call.
pub fn train_fresh(config: TrainConfig, dataset: &FactorDataset, run: &Path) -> Result<TrainSummary> {
    let mut state = TrainState::new(config, dataset.len())?;
    train(&mut state, dataset, &RunLayout::new(run))
}
