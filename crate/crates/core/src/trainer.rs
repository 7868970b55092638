//! Minimising the conditional noise-prediction objective: per item, draw a
//! uniform timestep and Gaussian noise, noise the clean image in closed
//! form and regress the denoiser's output onto the injected noise.

use std::collections::VecDeque;
use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use glyphdiff_substrate::{Float, Graph, ParamSet, Tensor, Var};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, CheckpointHeader, RngState};
use crate::conditioning::ConditioningMode;
use crate::denoiser::Denoiser;
use crate::font::Font;
use crate::image::GrayImage;
use crate::manifest::{Manifest, Split};
use crate::par::{self, Execution};
use crate::sampler::gaussian;
use crate::schedule::{NoiseSchedule, ScheduleConfig};
use crate::vocab::TokenSeq;
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr: f64,
    pub steps: u64,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Write a checkpoint every this many steps (0: only at the end).
    pub checkpoint_every: u64,
    /// Exponential moving average of the weights, if set.
    pub ema_decay: Option<f64>,
    /// Length of the running-loss window.
    pub loss_window: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 16,
            lr: 1e-4,
            steps: 5000,
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            checkpoint_every: 1000,
            ema_decay: None,
            loss_window: 100,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("train.batch_size", "must be at least 1"));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::config(
                "train.lr",
                format!("{} must be finite and non-negative", self.lr),
            ));
        }
        if self.steps == 0 {
            return Err(Error::config("train.steps", "must be at least 1"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::config(
                "train.beta1",
                "moment decays must lie in [0, 1)",
            ));
        }
        if !(self.adam_eps > 0.0) {
            return Err(Error::config("train.adam_eps", "must be positive"));
        }
        if let Some(d) = self.ema_decay {
            if !(0.0..1.0).contains(&d) {
                return Err(Error::config(
                    "train.ema_decay",
                    format!("{d} outside [0, 1)"),
                ));
            }
        }
        if self.loss_window == 0 {
            return Err(Error::config("train.loss_window", "must be at least 1"));
        }
        Ok(())
    }
}

/// One training item with its conditioning already rendered.
#[derive(Clone, Debug)]
pub struct Example {
    pub x0: Tensor<f32>,
    pub printed: Tensor<f32>,
    pub tokens: TokenSeq,
    pub writer: usize,
}

impl Example {
    pub fn new(
        x0: &GrayImage,
        text: &str,
        writer: usize,
        denoiser: &Denoiser,
        mode: ConditioningMode,
        font: &Font,
    ) -> Result<Self> {
        let cfg = denoiser.config();
        if x0.canvas() != cfg.canvas {
            return Err(Error::Contract(format!(
                "image is {}x{}, model canvas is {}x{}",
                x0.width(),
                x0.height(),
                cfg.canvas.width,
                cfg.canvas.height
            )));
        }
        if writer >= cfg.n_styles {
            return Err(Error::WriterOutOfRange {
                id: writer,
                n_styles: cfg.n_styles,
            });
        }
        Ok(Self {
            x0: x0.to_tensor(),
            printed: mode.printed(text, cfg.canvas, font)?.to_tensor(),
            tokens: cfg.vocab.tokenize(text)?,
            writer,
        })
    }
}

/// Training examples from the train split of a manifest whose images live in `dir`.
pub fn examples_from_manifest(
    manifest: &Manifest,
    dir: &Path,
    denoiser: &Denoiser,
    mode: ConditioningMode,
    font: &Font,
    exec: Execution,
) -> Result<Vec<Example>> {
    if manifest.canvas != denoiser.config().canvas {
        return Err(Error::config(
            "model.canvas",
            format!(
                "model canvas {:?} differs from manifest canvas {:?}",
                denoiser.config().canvas,
                manifest.canvas
            ),
        ));
    }
    let train = manifest.with_records(
        manifest
            .records
            .iter()
            .filter(|r| r.split == Split::Train)
            .cloned()
            .collect(),
    );
    let indices: Vec<usize> = (0..manifest.records.len())
        .filter(|&i| manifest.records[i].split == Split::Train)
        .collect();
    let images = train.load_images(dir, exec)?;
    let mut out = Vec::with_capacity(images.len());
    for ((img, r), &index) in images.iter().zip(&train.records).zip(&indices) {
        out.push(
            Example::new(img, &r.text, r.style_id, denoiser, mode, font).map_err(|e| {
                Error::Ingest {
                    index,
                    message: e.to_string(),
                }
            })?,
        );
    }
    if out.is_empty() {
        return Err(Error::Contract("manifest has no training records".into()));
    }
    Ok(out)
}

/// The random draws for one item of a batch.
#[derive(Clone, Debug)]
pub struct Noised<T> {
    pub t: usize,
    pub eps: Tensor<T>,
    pub x_t: Tensor<T>,
}

/// Draw `t ~ U{1..T}` and `eps ~ N(0, I)` for `x0` and form `x_t`.
pub fn noise_item<T: Float, R: Rng>(
    x0: &Tensor<T>,
    sched: &NoiseSchedule,
    rng: &mut R,
) -> Result<Noised<T>> {
    let t = rng.gen_range(1..=sched.steps());
    let eps = gaussian(x0.shape(), rng);
    let x_t = sched.forward_marginal(x0, t, &eps)?;
    Ok(Noised { t, eps, x_t })
}

/// Batch loss with an arbitrary noise predictor: the mean over items of the
/// mean squared error between the drawn noise and `eps_model`'s estimate.
pub fn loss_on_batch<R, F>(
    batch: &[Example],
    sched: &NoiseSchedule,
    rng: &mut R,
    eps_model: F,
) -> Result<f64>
where
    R: Rng,
    F: Fn(&Example, &Noised<f32>) -> Result<Tensor<f32>>,
{
    if batch.is_empty() {
        return Err(Error::Contract("empty batch".into()));
    }
    let mut total = 0.0;
    for ex in batch {
        let n = noise_item(&ex.x0, sched, rng)?;
        let pred = eps_model(ex, &n)?;
        if pred.shape() != n.eps.shape() {
            return Err(Error::Contract(format!(
                "prediction {:?} vs noise {:?}",
                pred.shape(),
                n.eps.shape()
            )));
        }
        let se: f64 = pred
            .data()
            .iter()
            .zip(n.eps.data())
            .map(|(&a, &b)| ((a - b) as f64).powi(2))
            .sum();
        total += se / pred.numel() as f64;
    }
    Ok(total / batch.len() as f64)
}

/// Record the per-item loss `mse(eps_theta(x_t, t, c), eps)` on `g`.
#[allow(clippy::too_many_arguments)]
pub fn item_loss<T: Float>(
    g: &mut Graph<'_, T>,
    denoiser: &Denoiser,
    x_t: &Tensor<T>,
    printed: &Tensor<T>,
    tokens: &TokenSeq,
    writer: usize,
    t: usize,
    eps: &Tensor<T>,
) -> Result<Var> {
    let xv = g.constant(x_t.clone());
    let cv = g.constant(printed.clone());
    let text = denoiser.encode_text(g, tokens)?;
    let pred = denoiser.forward(g, xv, cv, t, Some(writer), text, &tokens.key_mask(), None)?;
    let target = g.constant(eps.clone());
    Ok(g.mse(pred, target)?)
}

/// Adam moments.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub m: ParamSet<f32>,
    pub v: ParamSet<f32>,
}

impl Adam {
    pub fn new(params: &ParamSet<f32>) -> Self {
        Self {
            m: params.zeros_like(),
            v: params.zeros_like(),
        }
    }

    /// Update `params` in place; `step` is the 1-based update count.
    pub fn update(
        &mut self,
        params: &mut ParamSet<f32>,
        grads: &ParamSet<f32>,
        cfg: &TrainConfig,
        step: u64,
    ) {
        let (b1, b2) = (cfg.beta1, cfg.beta2);
        let c1 = 1.0 - b1.powf(step as f64);
        let c2 = 1.0 - b2.powf(step as f64);
        let lr = cfg.lr as f32;
        let (b1, b2, c1, c2, eps) = (
            b1 as f32,
            b2 as f32,
            c1 as f32,
            c2 as f32,
            cfg.adam_eps as f32,
        );
        for i in 0..params.len() {
            let g = grads.get_index(i).expect("same layout").1.data();
            let m = self.m.values_mut_at(i);
            for (m, &g) in m.iter_mut().zip(g) {
                *m = b1 * *m + (1.0 - b1) * g;
            }
            let v = self.v.values_mut_at(i);
            for (v, &g) in v.iter_mut().zip(g) {
                *v = b2 * *v + (1.0 - b2) * g * g;
            }
            let (m, v) = (
                self.m.get_index(i).unwrap().1.data(),
                self.v.get_index(i).unwrap().1.data(),
            );
            let update: Vec<f32> = m
                .iter()
                .zip(v)
                .map(|(&m, &v)| lr * (m / c1) / ((v / c2).sqrt() + eps))
                .collect();
            for (p, u) in params.values_mut_at(i).iter_mut().zip(update) {
                *p -= u;
            }
        }
    }
}

/// Everything that evolves during training.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub params: ParamSet<f32>,
    pub adam: Adam,
    pub ema: Option<ParamSet<f32>>,
    pub step: u64,
    pub rng: ChaCha8Rng,
    pub window: VecDeque<f64>,
}

impl TrainState {
    pub fn window_mean(&self) -> Option<f64> {
        (!self.window.is_empty())
            .then(|| self.window.iter().sum::<f64>() / self.window.len() as f64)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossRow {
    pub step: u64,
    pub loss: f64,
    pub wall_ms: u64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub final_checkpoint: PathBuf,
    pub history: Vec<LossRow>,
    pub state: TrainState,
}

/// Owns the data, model description and configuration of one training run.
pub struct Trainer {
    pub denoiser: Denoiser,
    pub schedule_config: ScheduleConfig,
    pub schedule: NoiseSchedule,
    pub config: TrainConfig,
    pub mode: ConditioningMode,
    pub data: Vec<Example>,
    pub exec: Execution,
}

impl Trainer {
    pub fn new(
        denoiser: Denoiser,
        schedule_config: ScheduleConfig,
        config: TrainConfig,
        mode: ConditioningMode,
        data: Vec<Example>,
        exec: Execution,
    ) -> Result<Self> {
        config.validate()?;
        if data.is_empty() {
            return Err(Error::Contract("no training examples".into()));
        }
        Ok(Self {
            schedule: schedule_config.build()?,
            denoiser,
            schedule_config,
            config,
            mode,
            data,
            exec,
        })
    }

    pub fn initial_state(&self) -> Result<TrainState> {
        let params = self.denoiser.init::<f32>(self.config.seed)?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        rng.set_stream(u64::MAX);
        Ok(TrainState {
            adam: Adam::new(&params),
            ema: self.config.ema_decay.map(|_| params.clone()),
            params,
            step: 0,
            rng,
            window: VecDeque::new(),
        })
    }

    /// Example order of `epoch`: a permutation keyed by `(seed, epoch)`.
    pub fn epoch_order(&self, epoch: u64) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.data.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        rng.set_stream(epoch);
        order.shuffle(&mut rng);
        order
    }

    /// Examples used by the update that follows `step` completed updates.
    pub fn batch_indices(&self, step: u64) -> Vec<usize> {
        let n = self.data.len() as u64;
        let b = self.config.batch_size as u64;
        let mut out = Vec::with_capacity(b as usize);
        let mut cached: Option<(u64, Vec<usize>)> = None;
        for pos in step * b..(step + 1) * b {
            let epoch = pos / n;
            if cached.as_ref().is_none_or(|(e, _)| *e != epoch) {
                cached = Some((epoch, self.epoch_order(epoch)));
            }
            out.push(cached.as_ref().unwrap().1[(pos % n) as usize]);
        }
        out
    }

    /// Batch loss and mean parameter gradient at `params` for given draws.
    pub fn loss_and_grads(
        &self,
        params: &ParamSet<f32>,
        items: &[(usize, Noised<f32>)],
    ) -> Result<(f64, ParamSet<f32>)> {
        let results = par::try_map(self.exec, items, |(i, n)| {
            let ex = &self.data[*i];
            let mut g = Graph::with_params(params);
            let loss = item_loss(
                &mut g,
                &self.denoiser,
                &n.x_t,
                &ex.printed,
                &ex.tokens,
                ex.writer,
                n.t,
                &n.eps,
            )?;
            let value = g.value(loss).item()?;
            let grads = g.backward(loss)?.param_grads(params);
            Ok::<_, Error>((value, grads))
        })?;
        let mut total = 0.0f64;
        let mut sum = params.zeros_like();
        for (v, g) in &results {
            total += *v as f64;
            sum.accumulate(g)?;
        }
        let b = results.len() as f32;
        sum.scale(1.0 / b);
        Ok((total / results.len() as f64, sum))
    }

    /// One optimizer update; returns the batch loss.
    pub fn step(&self, state: &mut TrainState) -> Result<f64> {
        let next = state.step + 1;
        let idx = self.batch_indices(state.step);
        let mut items = Vec::with_capacity(idx.len());
        for i in idx {
            items.push((
                i,
                noise_item(&self.data[i].x0, &self.schedule, &mut state.rng)?,
            ));
        }
        let (loss, grads) = match self.loss_and_grads(&state.params, &items) {
            Ok(r) => r,
            Err(Error::Numeric(glyphdiff_substrate::Error::NonFinite { .. })) => {
                return Err(Error::NonFiniteLoss { step: next })
            }
            Err(e) => return Err(e),
        };
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss { step: next });
        }
        state
            .adam
            .update(&mut state.params, &grads, &self.config, next);
        if let (Some(ema), Some(d)) = (state.ema.as_mut(), self.config.ema_decay) {
            let d = d as f32;
            for i in 0..ema.len() {
                let p = state.params.get_index(i).unwrap().1.data();
                for (e, &p) in ema.values_mut_at(i).iter_mut().zip(p) {
                    *e = d * *e + (1.0 - d) * p;
                }
            }
        }
        state.step = next;
        state.window.push_back(loss);
        while state.window.len() > self.config.loss_window {
            state.window.pop_front();
        }
        Ok(loss)
    }

    pub fn checkpoint(&self, state: &TrainState) -> Checkpoint {
        Checkpoint {
            header: CheckpointHeader {
                model: self.denoiser.config().clone(),
                schedule: self.schedule_config,
                train: self.config.clone(),
                conditioning: self.mode,
                step: state.step,
                rng: RngState::capture(&state.rng),
                loss_window: state.window.iter().copied().collect(),
            },
            params: state.params.clone(),
            adam_m: Some(state.adam.m.clone()),
            adam_v: Some(state.adam.v.clone()),
            ema: state.ema.clone(),
        }
    }

    /// Rebuild the training state stored in a checkpoint written by a run
    /// with the same configuration.
    pub fn resume_state(&self, ckpt: &Checkpoint) -> Result<TrainState> {
        let h = &ckpt.header;
        if h.model != *self.denoiser.config()
            || h.schedule != self.schedule_config
            || h.conditioning != self.mode
        {
            return Err(Error::config(
                "resume",
                "checkpoint was written by a different model configuration",
            ));
        }
        let (Some(m), Some(v)) = (ckpt.adam_m.clone(), ckpt.adam_v.clone()) else {
            return Err(Error::config("resume", "checkpoint has no optimizer state"));
        };
        if self.config.ema_decay.is_some() != ckpt.ema.is_some() {
            return Err(Error::config(
                "train.ema_decay",
                "EMA setting differs from the checkpoint",
            ));
        }
        Ok(TrainState {
            params: ckpt.params.clone(),
            adam: Adam { m, v },
            ema: ckpt.ema.clone(),
            step: h.step,
            rng: h.rng.restore()?,
            window: h.loss_window.iter().copied().collect(),
        })
    }

    /// Train until `config.steps`, writing `step-N.gdif` checkpoints and
    /// appending `step,loss,wall_ms` rows to `loss.csv` in `out_dir`.
    pub fn run(
        &self,
        mut state: TrainState,
        out_dir: &Path,
        mut observe: impl FnMut(&LossRow),
    ) -> Result<TrainOutcome> {
        std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
        let csv_path = out_dir.join("loss.csv");
        let fresh = state.step == 0 || !csv_path.exists();
        let mut csv = OpenOptions::new()
            .create(true)
            .write(true)
            .append(!fresh)
            .truncate(fresh)
            .open(&csv_path)
            .map_err(|e| Error::io(&csv_path, e))?;
        if fresh {
            writeln!(csv, "step,loss,wall_ms").map_err(|e| Error::io(&csv_path, e))?;
        }
        let start = Instant::now();
        let mut history = Vec::new();
        let mut last = None;
        while state.step < self.config.steps {
            let loss = self.step(&mut state)?;
            let row = LossRow {
                step: state.step,
                loss,
                wall_ms: start.elapsed().as_millis() as u64,
            };
            writeln!(csv, "{},{},{}", row.step, row.loss, row.wall_ms)
                .map_err(|e| Error::io(&csv_path, e))?;
            observe(&row);
            history.push(row);
            let every = self.config.checkpoint_every;
            if (every > 0 && state.step.is_multiple_of(every)) || state.step == self.config.steps {
                let path = out_dir.join(format!("step-{}.gdif", state.step));
                self.checkpoint(&state).save(&path)?;
                last = Some(path);
            }
        }
        let final_checkpoint = match last {
            Some(p) => p,
            None => {
                let path = out_dir.join(format!("step-{}.gdif", state.step));
                self.checkpoint(&state).save(&path)?;
                path
            }
        };
        Ok(TrainOutcome {
            final_checkpoint,
            history,
            state,
        })
    }
}
