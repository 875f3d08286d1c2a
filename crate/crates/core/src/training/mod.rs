//! Losses, optimisation and checkpointing for the separation network.

pub mod checkpoint;
pub mod loss;
pub mod optim;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub use checkpoint::{Checkpoint, Stored};
pub use loss::{
    best_permutation, estimates_to_waveforms, loss_mc, loss_tf, loss_wav, permutations, pit_loss,
    LossReport,
};
pub use optim::{clip_grad_norm, AdamW, PlateauSchedule};

use crate::config::KvConfig;
use crate::error::{invalid, Error, Result};
use crate::model::{HeadMode, ModelConfig, Params, TfCorrNet};
use crate::stft::{stft, ComplexSpectrogram, StftConfig, Waveform};
use crate::tensor::{Graph, Real, Tensor};

/// A mixture with its per-source training targets (`M`-channel direct-path images).
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub mixture: Waveform<f64>,
    pub targets: Vec<Waveform<f64>>,
}

impl Example {
    pub fn len(&self) -> usize {
        self.mixture.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mixture.is_empty()
    }

    /// Samples `[start, start + len)` of the mixture and every target.
    pub fn crop(&self, start: usize, len: usize) -> Self {
        Self {
            mixture: self.mixture.window(start as isize, len),
            targets: self
                .targets
                .iter()
                .map(|t| t.window(start as isize, len))
                .collect(),
        }
    }
}

/// Network-ready tensors for one example.
pub struct PreparedExample<T> {
    pub mixture: ComplexSpectrogram<T>,
    /// `(K, T, F, 2, M_out)`.
    pub target_spec: Tensor<T>,
    /// `(K, M_out, N)`.
    pub target_wav: Tensor<T>,
    /// Gain applied to unit reference-mic RMS.
    pub gain: f64,
}

/// Scale to unit reference RMS, transform, and lay targets out like the model's estimates.
pub fn prepare_example<T: Real>(
    cfg: &ModelConfig,
    stft_cfg: StftConfig,
    ex: &Example,
) -> Result<PreparedExample<T>> {
    if ex.targets.len() != cfg.sources {
        return Err(invalid(
            "prepare_example",
            format!("{} targets for {} sources", ex.targets.len(), cfg.sources),
        ));
    }
    let rms = ex.mixture.rms(0);
    let gain = if rms > 1e-9 { 1.0 / rms } else { 1.0 };
    let mixture = stft(&ex.mixture.scaled(gain).cast::<T>(), stft_cfg)?;
    let outputs: Vec<usize> = match cfg.head_mode {
        HeadMode::Mimo => (0..cfg.outputs()).collect(),
        HeadMode::Miso => vec![0],
    };
    let n = ex.mixture.len();
    let (nt, nf, mo, k) = (mixture.frames(), mixture.bins(), outputs.len(), cfg.sources);
    let mut spec = vec![T::zero(); k * nt * nf * 2 * mo];
    let mut wav = Vec::with_capacity(k * mo * n);
    for (ki, target) in ex.targets.iter().enumerate() {
        if target.len() != n || target.channels() <= *outputs.last().expect("outputs") {
            return Err(invalid(
                "prepare_example",
                "target geometry does not match the mixture",
            ));
        }
        let t = target.select_channels(&outputs).scaled(gain).cast::<T>();
        let s = stft(&t, stft_cfg)?;
        for o in 0..mo {
            for ti in 0..nt {
                for f in 0..nf {
                    let c = s.get(o, ti, f);
                    let base = (((ki * nt + ti) * nf + f) * 2) * mo;
                    spec[base + o] = c.re;
                    spec[base + mo + o] = c.im;
                }
            }
        }
        wav.extend_from_slice(t.data());
    }
    Ok(PreparedExample {
        mixture,
        target_spec: Tensor::new(&[k, nt, nf, 2, mo], spec)?,
        target_wav: Tensor::new(&[k, mo, n], wav)?,
        gain,
    })
}

/// Loss of one prepared example with `params` bound as trainable leaves in `g`.
pub fn example_loss<T: Real>(
    model: &TfCorrNet<T>,
    g: &mut Graph<T>,
    bound: &crate::model::Bound<T>,
    ex: &PreparedExample<T>,
) -> Result<(crate::tensor::Var, LossReport)> {
    let input = model.prepare(&ex.mixture)?;
    let y = model.forward(g, bound, &input)?;
    let n = ex.target_wav.shape()[2];
    let yw = estimates_to_waveforms(g, y, ex.mixture.config(), n)?;
    pit_loss(g, y, yw, &ex.target_spec, &ex.target_wav)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub steps: usize,
    pub batch: usize,
    pub seed: u64,
    /// Random crop length in samples; `None` trains on whole examples.
    pub crop: Option<usize>,
    pub clip_norm: f64,
    /// Validate (and step the plateau schedule) every this many steps; 0 disables.
    pub validate_every: usize,
    pub stft: StftConfig,
    pub sample_rate: u32,
    /// Worker threads for batch gradients; 0 uses every core.
    pub threads: usize,
}

impl TrainConfig {
    pub fn desk(stft: StftConfig, sample_rate: u32) -> Self {
        Self {
            lr: 1e-3,
            weight_decay: 1e-2,
            steps: 1000,
            batch: 1,
            seed: 0,
            crop: None,
            clip_norm: 5.0,
            validate_every: 0,
            stft,
            sample_rate,
            threads: 1,
        }
    }

    pub fn write_kv(&self, kv: &mut KvConfig) {
        kv.set("lr", self.lr);
        kv.set("weight_decay", self.weight_decay);
        kv.set("steps", self.steps);
        kv.set("batch", self.batch);
        kv.set("seed", self.seed);
        kv.set("crop", self.crop.unwrap_or(0));
        kv.set("clip_norm", self.clip_norm);
        kv.set("validate_every", self.validate_every);
        kv.set("n_fft", self.stft.n_fft());
        kv.set("hop", self.stft.hop());
        kv.set("sample_rate", self.sample_rate);
        // threads is a runtime knob and stays out of checkpoints
    }

    /// Absent keys fall back to [`TrainConfig::desk`] at 8 kHz, `n_fft = 128`.
    pub fn from_kv(kv: &KvConfig) -> Result<Self> {
        let n_fft = kv.get_or("n_fft", 128)?;
        let hop = kv.get_or("hop", n_fft / 2)?;
        let sample_rate = kv.get_or("sample_rate", 8000)?;
        let d = Self::desk(StftConfig::new(n_fft, hop)?, sample_rate);
        let crop: usize = kv.get_or("crop", 0)?;
        Ok(Self {
            lr: kv.get_or("lr", d.lr)?,
            weight_decay: kv.get_or("weight_decay", d.weight_decay)?,
            steps: kv.get_or("steps", d.steps)?,
            batch: kv.get_or("batch", d.batch)?,
            seed: kv.get_or("seed", d.seed)?,
            crop: (crop > 0).then_some(crop),
            clip_norm: kv.get_or("clip_norm", d.clip_norm)?,
            validate_every: kv.get_or("validate_every", d.validate_every)?,
            threads: kv.get_or("threads", d.threads)?,
            ..d
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepReport {
    pub step: u64,
    pub loss: f64,
    pub grad_norm: f64,
    pub lr: f64,
}

/// Model, optimizer and schedule state.
#[derive(Debug, Clone)]
pub struct Trainer<T> {
    pub model: TfCorrNet<T>,
    pub cfg: TrainConfig,
    opt: AdamW<T>,
    schedule: PlateauSchedule,
}

impl<T: Real> Trainer<T> {
    pub fn new(model: TfCorrNet<T>, cfg: TrainConfig) -> Self {
        let opt = AdamW::for_params(cfg.lr, cfg.weight_decay, model.params().tensors());
        let schedule = PlateauSchedule::new(cfg.lr);
        Self {
            model,
            cfg,
            opt,
            schedule,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.opt.step_count()
    }

    pub fn lr(&self) -> f64 {
        self.opt.lr
    }

    /// Gradients and loss of one example.
    fn example_gradients(&self, ex: &PreparedExample<T>) -> Result<(Vec<Tensor<T>>, f64)> {
        let mut g = Graph::new();
        let bound = self.model.params().bind(&mut g, true);
        let (l, report) = example_loss(&self.model, &mut g, &bound, ex)?;
        g.backward(l)?;
        Ok((bound.grads(&g), report.total))
    }

    /// Parameter gradients of the mean loss over `batch`, with the mean loss.
    /// Examples run on `cfg.threads` threads; the sum is taken in batch order,
    /// so the result does not depend on the thread count.
    pub fn gradients(&self, batch: &[PreparedExample<T>]) -> Result<(Vec<Tensor<T>>, f64)> {
        let per = crate::par::map(batch, crate::par::resolve(self.cfg.threads), |ex| self.example_gradients(ex));
        let mut acc: Option<Vec<Tensor<T>>> = None;
        let mut loss = 0.0;
        for r in per {
            let (grads, l) = r?;
            loss += l;
            acc = Some(match acc {
                None => grads,
                Some(a) => a
                    .into_iter()
                    .zip(grads)
                    .map(|(a, b)| {
                        let d = a.data().iter().zip(b.data()).map(|(&x, &y)| x + y).collect();
                        Tensor::new(a.shape(), d)
                    })
                    .collect::<Result<_>>()?,
            });
        }
        let n = batch.len().max(1) as f64;
        let grads = acc
            .ok_or_else(|| invalid("train_step", "empty batch"))?
            .into_iter()
            .map(|g| g.map(|v| v * T::of(1.0 / n)))
            .collect();
        Ok((grads, loss / n))
    }

    /// Sample a batch (seeded by the step index), backpropagate and update.
    pub fn train_step(&mut self, data: &[Example]) -> Result<StepReport> {
        if data.is_empty() {
            return Err(invalid("train_step", "no training examples"));
        }
        let step = self.opt.step_count();
        let mut rng =
            ChaCha8Rng::seed_from_u64(self.cfg.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ step);
        let mut batch = Vec::with_capacity(self.cfg.batch);
        for _ in 0..self.cfg.batch {
            let ex = &data[rng.random_range(0..data.len())];
            let ex = match self.cfg.crop {
                Some(len) if len < ex.len() => ex.crop(rng.random_range(0..=ex.len() - len), len),
                _ => ex.clone(),
            };
            batch.push(prepare_example(self.model.config(), self.cfg.stft, &ex)?);
        }
        let (mut grads, loss) = self.gradients(&batch)?;
        let grad_norm = clip_grad_norm(&mut grads, self.cfg.clip_norm);
        let mut params: Vec<Tensor<T>> = self.model.params().tensors().to_vec();
        self.opt.update(&mut params, &grads)?;
        let store = self.model.params_mut();
        for (i, p) in params.into_iter().enumerate() {
            store.set(i, p)?;
        }
        Ok(StepReport {
            step: self.opt.step_count(),
            loss,
            grad_norm,
            lr: self.opt.lr,
        })
    }

    /// Mean loss over whole examples, without gradients.
    pub fn evaluate_loss(&self, data: &[Example]) -> Result<f64> {
        let mut total = 0.0;
        for ex in data {
            let p = prepare_example(self.model.config(), self.cfg.stft, ex)?;
            let mut g = Graph::new();
            let bound = self.model.params().bind(&mut g, false);
            total += example_loss(&self.model, &mut g, &bound, &p)?.1.total;
        }
        Ok(total / data.len().max(1) as f64)
    }

    /// Train for the configured number of steps, validating periodically.
    pub fn fit(
        &mut self,
        train: &[Example],
        val: &[Example],
        mut on_step: impl FnMut(&StepReport, Option<f64>),
    ) -> Result<()> {
        while (self.opt.step_count() as usize) < self.cfg.steps {
            let report = self.train_step(train)?;
            let mut val_loss = None;
            if self.cfg.validate_every > 0
                && report.step as usize % self.cfg.validate_every == 0
                && !val.is_empty()
            {
                let v = self.evaluate_loss(val)?;
                self.opt.lr = self.schedule.observe(v);
                val_loss = Some(v);
            }
            on_step(&report, val_loss);
        }
        Ok(())
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut config = KvConfig::new();
        self.model.config().write_kv(&mut config);
        self.cfg.write_kv(&mut config);
        config.set("step", self.opt.step_count());
        config.set("current_lr", self.opt.lr);
        config.set("schedule_best", self.schedule.best);
        config.set("schedule_bad", self.schedule.bad);
        let mut ck = Checkpoint {
            config,
            entries: Vec::new(),
        };
        let params = self.model.params();
        let (m, v) = self.opt.moments();
        for (i, name) in params.names().iter().enumerate() {
            ck.entries
                .push((format!("param/{name}"), Stored::of(&params.tensors()[i])));
        }
        for (i, name) in params.names().iter().enumerate() {
            ck.entries
                .push((format!("adam.m/{name}"), Stored::of(&m[i])));
            ck.entries
                .push((format!("adam.v/{name}"), Stored::of(&v[i])));
        }
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let model = load_model::<T>(ck)?;
        let cfg = TrainConfig::from_kv(&ck.config)?;
        let mut t = Self::new(model, cfg);
        let names = t.model.params().names().to_vec();
        let fetch = |prefix: &str| -> Result<Vec<Tensor<T>>> {
            names
                .iter()
                .map(|n| {
                    ck.get(&format!("{prefix}/{n}"))
                        .map(Stored::to)
                        .ok_or_else(|| Error::Checkpoint(format!("missing {prefix}/{n}")))
                })
                .collect()
        };
        let step = ck.config.get_or("step", 0u64)?;
        t.opt.restore(step, fetch("adam.m")?, fetch("adam.v")?)?;
        t.opt.lr = ck.config.get_or("current_lr", t.cfg.lr)?;
        t.schedule.lr = t.opt.lr;
        t.schedule.best = ck.config.get_or("schedule_best", f64::INFINITY)?;
        t.schedule.bad = ck.config.get_or("schedule_bad", 0)?;
        Ok(t)
    }
}

/// Rebuild a model from the `param/` entries of a checkpoint.
pub fn load_model<T: Real>(ck: &Checkpoint) -> Result<TfCorrNet<T>> {
    let cfg = ModelConfig::from_kv(&ck.config)?;
    let mut params = Params::new();
    for (name, t) in &ck.entries {
        if let Some(n) = name.strip_prefix("param/") {
            params.insert(n, t.to())?;
        }
    }
    TfCorrNet::from_params(cfg, params)
}

/// Checkpoint holding only model parameters and configuration.
pub fn model_checkpoint<T: Real>(model: &TfCorrNet<T>, extra: &KvConfig) -> Checkpoint {
    let mut config = extra.clone();
    model.config().write_kv(&mut config);
    Checkpoint {
        config,
        entries: model
            .params()
            .names()
            .iter()
            .zip(model.params().tensors())
            .map(|(n, t)| (format!("param/{n}"), Stored::of(t)))
            .collect(),
    }
}
