//! The T-step acquisition loop with shared weights, its training objective
//! and the training/evaluation drivers.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::ad::{DrawForward, SsimParams, Tape, Var};
use crate::baselines::{equispaced_mask, random_mask, spectrum_mask};
use crate::error::{arg_err, Error, Result};
use crate::forward::{
    acceleration, apply_mask_on_tape, kspace_on_tape, low_freq_mask, to_kspace, zero_fill_on_tape, AccelSpec,
    Mask, SamplingMode,
};
use crate::metrics::{self, ImageMetrics};
use crate::optim::{AdamConfig, AdamState};
use crate::params::{ParamVars, Params};
use crate::phantom::{Dataset, Split};
use crate::recon::Reconstructor;
use crate::sampler::{binarize, mask_acquired, normalize_heatmap, Policy, PolicyInput, SamplerConfig, StepDraw};
use crate::seed;
use crate::tensor::{Real, Tensor};
use crate::unet::LEVELS;

/// How the sampling pattern of an episode is produced.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    /// Policy network fed with the current measurements and reconstruction.
    Sequential,
    /// Same network fed with fixed noise, one acquisition round.
    NonSequential,
    /// Free learnable scores, one acquisition round.
    Static,
    /// Uniformly random pattern per episode; only the reconstructor learns.
    Random,
    /// Fixed equidistant lines.
    Equispaced,
    /// Fixed top-power pattern of the training spectrum.
    Spectrum,
}

impl Method {
    pub fn has_sampler_params(self) -> bool {
        matches!(self, Method::Sequential | Method::NonSequential | Method::Static)
    }

    /// Acquisition rounds after the pre-selection.
    pub fn rounds(self, steps: usize) -> usize {
        match self {
            Method::Sequential => steps,
            _ => 1,
        }
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        serde_json::from_value(serde_json::Value::String(s.to_string()))
            .map_err(|_| arg_err("method", format!("unknown method `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub method: Method,
    pub mode: SamplingMode,
    pub extent: usize,
    pub accel: f64,
    pub steps: usize,
    pub epochs: usize,
    pub lr: f64,
    pub lr_halving_period: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub eval_seed: u64,
    /// Train sampler and reconstructor jointly; when false the
    /// reconstructor is first trained on random masks and then frozen.
    pub codesign: bool,
    pub recon_widths: [usize; LEVELS],
    pub sampler: SamplerConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            method: Method::Sequential,
            mode: SamplingMode::Point,
            extent: 64,
            accel: 4.0,
            steps: 4,
            epochs: 50,
            lr: 1e-3,
            lr_halving_period: 10,
            batch_size: 8,
            seed: 0,
            eval_seed: 1234,
            codesign: true,
            recon_widths: [16, 32, 64, 128],
            sampler: SamplerConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.lr_halving_period == 0 {
            return Err(arg_err("config", "epochs, batch_size and lr_halving_period must be positive"));
        }
        if !(self.lr > 0.0) {
            return Err(arg_err("config", "learning rate must be positive"));
        }
        if self.method == Method::Equispaced && self.mode != SamplingMode::Line {
            return Err(arg_err("config", "equispaced sampling needs line mode"));
        }
        self.spec()?;
        Ok(())
    }

    /// Budget split used by episodes of this method.
    pub fn spec(&self) -> Result<AccelSpec> {
        AccelSpec::new(self.mode, self.extent, self.extent, self.accel, self.method.rounds(self.steps))
    }

    /// Learning rate of `epoch` (halved every `lr_halving_period` epochs).
    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.lr * 0.5f64.powi((epoch / self.lr_halving_period) as i32)
    }
}

const FIXED_MASK: &str = "mask.fixed";
const NOISE_MEASURED: &str = "noise.y_hat";
const NOISE_PREDICTED: &str = "noise.y_tilde";
const STATIC_SCORES: &str = "static.scores";
/// Entries under these prefixes never receive gradients.
const CONSTANT_PREFIXES: [&str; 2] = ["mask.", "noise."];

/// Network structure of a configured method plus its parameters.
#[derive(Clone, Debug)]
pub struct Model {
    pub method: Method,
    pub spec: AccelSpec,
    pub recon: Reconstructor,
    pub policy: Option<Policy>,
    pub ste_slope: f64,
    pub static_gain: f64,
    pub params: Params<f32>,
    frozen: Vec<String>,
}

impl Model {
    fn skeleton(cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let spec = cfg.spec()?;
        let policy = match cfg.method {
            Method::Sequential | Method::NonSequential => Some(Policy::new(cfg.mode, cfg.extent, &cfg.sampler)?),
            _ => None,
        };
        Ok(Self {
            method: cfg.method,
            spec,
            recon: Reconstructor::new(cfg.recon_widths)?,
            policy,
            ste_slope: cfg.sampler.ste_slope,
            static_gain: cfg.sampler.static_gain,
            params: Params::new(),
            frozen: Vec::new(),
        })
    }

    /// Freshly initialised model; `ds` supplies the training spectrum for
    /// [`Method::Spectrum`].
    pub fn new(cfg: &TrainConfig, ds: &Dataset) -> Result<Self> {
        let mut m = Self::skeleton(cfg)?;
        let mut rng = seed::stream(cfg.seed, &[0x1417]);
        m.recon.init_params(&mut m.params, &mut rng);
        if let Some(p) = &m.policy {
            p.init_params(&mut m.params, &mut rng);
        }
        let spec = m.spec;
        let layout = |mask: &Mask| mask.to_tensor::<f32>();
        match cfg.method {
            Method::Static => {
                let shape = Mask::empty(spec.mode, spec.rows, spec.cols).to_tensor::<f32>().shape().to_vec();
                m.params.init_uniform(STATIC_SCORES, &shape, 100, &mut rng);
            }
            Method::NonSequential => {
                let mut noise = seed::stream(cfg.seed, &[0x7015e]);
                for name in [NOISE_MEASURED, NOISE_PREDICTED] {
                    m.params.init_uniform(name, &[2, spec.rows, spec.cols], 1, &mut noise);
                }
            }
            Method::Equispaced => m.params.insert(FIXED_MASK, layout(&equispaced_mask(&spec)?)),
            Method::Spectrum => {
                let train: Vec<_> = ds.indices(Split::Train).into_iter().map(|i| ds.image(i).clone()).collect();
                m.params.insert(FIXED_MASK, layout(&spectrum_mask(&train, &spec)?));
            }
            Method::Sequential | Method::Random => {}
        }
        Ok(m)
    }

    /// Rebuilds a model from stored parameters, checking that every tensor
    /// the architecture needs is present with the right shape.
    pub fn from_params(cfg: &TrainConfig, params: Params<f32>) -> Result<Self> {
        let mut m = Self::skeleton(cfg)?;
        let mut expected = Params::<f32>::new();
        let mut rng = seed::stream(0, &[]);
        m.recon.init_params(&mut expected, &mut rng);
        if let Some(p) = &m.policy {
            p.init_params(&mut expected, &mut rng);
        }
        let spec = m.spec;
        let layout = Mask::empty(spec.mode, spec.rows, spec.cols).to_tensor::<f32>().shape().to_vec();
        match cfg.method {
            Method::Static => expected.insert(STATIC_SCORES, Tensor::zeros(&layout)),
            Method::NonSequential => {
                for name in [NOISE_MEASURED, NOISE_PREDICTED] {
                    expected.insert(name, Tensor::zeros(&[2, spec.rows, spec.cols]));
                }
            }
            Method::Equispaced | Method::Spectrum => expected.insert(FIXED_MASK, Tensor::zeros(&layout)),
            Method::Sequential | Method::Random => {}
        }
        for (name, t) in expected.iter() {
            match params.get(name) {
                Some(p) if p.shape() == t.shape() => {}
                _ => return Err(arg_err("model", format!("checkpoint lacks `{name}` of shape {:?}", t.shape()))),
            }
        }
        m.params = params;
        Ok(m)
    }

    /// Excludes parameters under `prefix` from training.
    pub fn freeze(&mut self, prefix: &str) {
        self.frozen.push(format!("{prefix}."));
    }

    pub fn is_trainable(&self, name: &str) -> bool {
        !CONSTANT_PREFIXES.iter().any(|p| name.starts_with(p)) && !self.frozen.iter().any(|p| name.starts_with(p.as_str()))
    }

    /// Registers the parameters on `tape` once; every step reuses the handles.
    pub fn register<T: Real>(&self, tape: &Tape<T>, params: &Params<T>, with_grad: bool) -> Result<ParamVars> {
        params.register(tape, |n| with_grad && self.is_trainable(n))
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct EpisodeOptions {
    /// Use the sigmoid surrogate as the forward value of each draw and
    /// accept the first noise sample (smooth in all inputs; gradient checks).
    pub relaxed: bool,
}

/// Record of acquisition round `t` (`t = 0` is the pre-selection).
#[derive(Clone, Debug)]
pub struct StepRecord<T> {
    pub mask: Mask,
    pub y_hat: Tensor<T>,
    pub x_hat: Tensor<T>,
    pub x_tilde: Option<Tensor<T>>,
    /// Masked heatmap used to draw the next round.
    pub heatmap: Option<Tensor<T>>,
    pub retries: usize,
    pub fallback: bool,
}

#[derive(Clone, Debug, Default)]
pub struct EpisodeTrace<T> {
    pub steps: Vec<StepRecord<T>>,
    pub loss: Option<f64>,
}

impl<T> EpisodeTrace<T> {
    pub fn final_mask(&self) -> &Mask {
        &self.steps.last().expect("episode has steps").mask
    }
}

pub struct Episode<T> {
    /// Final reconstruction `[H, W]`.
    pub output: Var,
    pub trace: EpisodeTrace<T>,
}

fn mask_of<T: Real>(tape: &Tape<T>, m: Var, spec: &AccelSpec) -> Result<Mask> {
    Mask::from_values(spec.mode, spec.rows, spec.cols, &tape.value(m))
}

/// Runs one acquisition episode on `x` (`[H, W]`).
pub fn run_episode<T: Real, R: Rng>(
    tape: &Tape<T>,
    model: &Model,
    vars: &ParamVars,
    x: &Tensor<T>,
    rng: &mut R,
    opts: EpisodeOptions,
) -> Result<Episode<T>> {
    let spec = &model.spec;
    if x.shape() != [spec.rows, spec.cols] {
        return Err(arg_err(
            "run_episode",
            format!("image {:?} vs configured {}x{}", x.shape(), spec.rows, spec.cols),
        ));
    }
    let y = tape.constant(to_kspace(x)?)?;
    let mut steps = Vec::new();

    let record = |tape: &Tape<T>, m: Var, y_hat: Var, x_hat: Var, x_tilde: Option<Var>| -> Result<StepRecord<T>> {
        Ok(StepRecord {
            mask: mask_of(tape, m, spec)?,
            y_hat: tape.value(y_hat).clone(),
            x_hat: tape.value(x_hat).clone(),
            x_tilde: x_tilde.map(|v| tape.value(v).clone()),
            heatmap: None,
            retries: 0,
            fallback: false,
        })
    };

    if !model.method.has_sampler_params() {
        let mask = match model.method {
            Method::Random => random_mask(spec, rng)?,
            _ => Mask::from_values(spec.mode, spec.rows, spec.cols, &*tape.value(vars.get(FIXED_MASK)?))?,
        };
        let m = tape.constant(mask.to_tensor())?;
        let y_hat = apply_mask_on_tape(tape, y, m, spec.mode)?;
        let x_hat = zero_fill_on_tape(tape, y_hat)?;
        let out = model.recon.forward(tape, vars, x_hat)?;
        steps.push(record(tape, m, y_hat, x_hat, Some(out))?);
        return Ok(Episode {
            output: out,
            trace: EpisodeTrace { steps, loss: None },
        });
    }

    let mut m = tape.constant(low_freq_mask(spec)?.to_tensor())?;
    for &budget in &spec.step_budgets() {
        let y_hat = apply_mask_on_tape(tape, y, m, spec.mode)?;
        let x_hat = zero_fill_on_tape(tape, y_hat)?;
        let (raw, x_tilde) = match model.method {
            Method::Sequential => {
                let x_tilde = model.recon.forward(tape, vars, x_hat)?;
                let y_tilde = kspace_on_tape(tape, x_tilde)?;
                let policy = model.policy.as_ref().expect("sequential model has a policy");
                let raw = policy.forward(tape, vars, &PolicyInput { y_hat, y_tilde, mask: m })?;
                (raw, Some(x_tilde))
            }
            Method::NonSequential => {
                let policy = model.policy.as_ref().expect("non-sequential model has a policy");
                let inp = PolicyInput {
                    y_hat: vars.get(NOISE_MEASURED)?,
                    y_tilde: vars.get(NOISE_PREDICTED)?,
                    mask: m,
                };
                (policy.forward(tape, vars, &inp)?, None)
            }
            Method::Static => (tape.scale(vars.get(STATIC_SCORES)?, model.static_gain)?, None),
            _ => unreachable!("mask-only methods handled above"),
        };
        let mut rec = record(tape, m, y_hat, x_hat, x_tilde)?;
        let eligible: Vec<bool> = tape.value(m).data().iter().map(|&v| v <= T::c(0.5)).collect();
        let n_elig = eligible.iter().filter(|&&e| e).count();
        if n_elig < budget {
            return Err(Error::Budget(format!("{budget} samples requested, {n_elig} left")));
        }
        let p = normalize_heatmap(tape, raw, &eligible, budget as f64 / n_elig as f64)?;
        let p = mask_acquired(tape, p, m)?;
        let pv = tape.value(p).data().to_vec();
        let draw = if opts.relaxed {
            StepDraw {
                u: (0..pv.len()).map(|_| T::c(1.0 - rng.gen::<f64>())).collect(),
                delta: vec![false; pv.len()],
                retries: 0,
                fallback: false,
            }
        } else {
            binarize(&pv, &eligible, budget, rng)?
        };
        let forward = if opts.relaxed { DrawForward::Relaxed } else { DrawForward::Hard(&draw.delta) };
        rec.heatmap = Some(tape.value(p).clone());
        rec.retries = draw.retries;
        rec.fallback = draw.fallback;
        steps.push(rec);
        m = tape.straight_through(p, m, &draw.u, &eligible, model.ste_slope, forward)?;
    }
    let y_hat = apply_mask_on_tape(tape, y, m, spec.mode)?;
    let x_hat = zero_fill_on_tape(tape, y_hat)?;
    let out = model.recon.forward(tape, vars, x_hat)?;
    steps.push(record(tape, m, y_hat, x_hat, Some(out))?);
    Ok(Episode {
        output: out,
        trace: EpisodeTrace { steps, loss: None },
    })
}

/// `1 − SSIM(x̃_T, x)`; stored on the trace as well.
pub fn loss<T: Real>(tape: &Tape<T>, episode: &mut Episode<T>, x: &Tensor<T>) -> Result<Var> {
    let s = tape.ssim(episode.output, x, &SsimParams::default())?;
    let l = tape.affine(s, -1.0, 1.0)?;
    episode.trace.loss = Some(tape.value(l).item().f64());
    Ok(l)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_ssim: f64,
    pub lr: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    /// Validation SSIM of the untrained model.
    pub initial_val_ssim: f64,
    pub epochs: Vec<EpochLog>,
    pub best_epoch: usize,
    pub best_val_ssim: f64,
}

impl TrainLog {
    pub fn to_json_lines(&self) -> String {
        self.epochs
            .iter()
            .map(|e| serde_json::to_string(e).expect("log entry serialises") + "\n")
            .collect()
    }
}

/// Gradient of the episode loss for one image.
pub fn episode_gradients<R: Rng>(
    model: &Model,
    x: &Tensor<f32>,
    rng: &mut R,
) -> Result<(f64, Params<f32>)> {
    let tape = Tape::new();
    let vars = model.register(&tape, &model.params, true)?;
    let mut ep = run_episode(&tape, model, &vars, x, rng, EpisodeOptions::default())?;
    let l = loss(&tape, &mut ep, x)?;
    let grads = tape.backward(l)?;
    let g = model.params.collect_grads(&vars, &grads, &tape);
    Ok((ep.trace.loss.expect("loss recorded"), g))
}

/// Trains `model` in place and keeps the parameters with the best
/// validation SSIM.
pub fn train(model: &mut Model, cfg: &TrainConfig, ds: &Dataset) -> Result<TrainLog> {
    train_with(model, cfg, ds, |_| {})
}

pub fn train_with(
    model: &mut Model,
    cfg: &TrainConfig,
    ds: &Dataset,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainLog> {
    cfg.validate()?;
    let train_idx = ds.indices(Split::Train);
    let val_idx = ds.indices(Split::Val);
    if train_idx.is_empty() || val_idx.is_empty() {
        return Err(arg_err("train", "train and validation splits must be non-empty"));
    }
    let mut adam = AdamState::new(
        AdamConfig {
            lr: cfg.lr,
            ..AdamConfig::default()
        },
        &model.params,
    );
    let val_ssim = |m: &Model| -> Result<f64> {
        let ev = evaluate_indices(m, ds, &val_idx, cfg.eval_seed)?;
        Ok(ev.metrics.iter().map(|r| r.ssim).sum::<f64>() / ev.metrics.len() as f64)
    };
    let mut log = TrainLog {
        initial_val_ssim: val_ssim(model)?,
        ..TrainLog::default()
    };
    log.best_val_ssim = f64::NEG_INFINITY;
    let mut best = model.params.clone();
    for epoch in 0..cfg.epochs {
        let lr = cfg.lr_at(epoch);
        adam.set_lr(lr);
        let mut order = train_idx.clone();
        order.shuffle(&mut seed::stream(cfg.seed, &[2, epoch as u64]));
        let mut total = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let mut acc = Params::<f32>::new();
            for &i in batch {
                let mut rng = seed::stream(cfg.seed, &[1, epoch as u64, i as u64]);
                let (l, g) = episode_gradients(model, ds.image(i), &mut rng)?;
                total += l;
                acc.accumulate(&g)?;
            }
            acc.scale(1.0 / batch.len() as f64);
            if !acc.is_finite() {
                return Err(Error::NonFinite { op: "gradient" });
            }
            adam.step_params(&mut model.params, &acc)?;
            if !model.params.is_finite() {
                return Err(Error::NonFinite { op: "adam_step" });
            }
        }
        let v = val_ssim(model)?;
        let entry = EpochLog {
            epoch,
            train_loss: total / order.len() as f64,
            val_ssim: v,
            lr,
        };
        on_epoch(&entry);
        log.epochs.push(entry);
        if v > log.best_val_ssim {
            log.best_val_ssim = v;
            log.best_epoch = epoch;
            best = model.params.clone();
        }
    }
    model.params = best;
    Ok(log)
}

/// Builds and trains the model described by `cfg`. With `codesign` off the
/// reconstructor is first trained on random masks and then frozen.
pub fn train_model(cfg: &TrainConfig, ds: &Dataset) -> Result<(Model, TrainLog)> {
    if !cfg.codesign && cfg.method.has_sampler_params() {
        let pre_cfg = TrainConfig {
            method: Method::Random,
            codesign: true,
            ..cfg.clone()
        };
        let (pre, _) = train_model(&pre_cfg, ds)?;
        return crate::baselines::codesign_off_train(cfg, ds, &pre);
    }
    let mut model = Model::new(cfg, ds)?;
    let log = train(&mut model, cfg, ds)?;
    Ok((model, log))
}

#[derive(Clone, Debug, Default)]
pub struct Evaluation {
    pub metrics: Vec<ImageMetrics>,
    pub masks: Vec<Mask>,
}

/// Allowed acceleration window `α·(1 ± 2/B)`.
pub fn acceleration_window(spec: &AccelSpec) -> (f64, f64) {
    let slack = 2.0 / spec.budget() as f64;
    (spec.accel * (1.0 - slack), spec.accel * (1.0 + slack))
}

/// Evaluates one image with the sampler noise seeded by `(eval_seed, index)`.
pub fn evaluate_image(model: &Model, x: &Tensor<f32>, index: usize, eval_seed: u64) -> Result<(ImageMetrics, Mask, Tensor<f32>)> {
    let tape = Tape::new();
    let vars = model.register(&tape, &model.params, false)?;
    let mut rng = seed::stream(eval_seed, &[index as u64]);
    let ep = run_episode(&tape, model, &vars, x, &mut rng, EpisodeOptions::default())?;
    let out = tape.value(ep.output).clone();
    let mask = ep.trace.final_mask().clone();
    let alpha = acceleration(&mask)?;
    let (lo, hi) = acceleration_window(&model.spec);
    if alpha < lo || alpha > hi {
        return Err(Error::Budget(format!(
            "image {index}: acceleration {alpha} outside [{lo}, {hi}]"
        )));
    }
    let m = ImageMetrics {
        index,
        ssim: metrics::ssim(&out, x)?,
        psnr: metrics::psnr(&out, x)?,
        acceleration: alpha,
    };
    Ok((m, mask, out))
}

pub fn evaluate_indices(model: &Model, ds: &Dataset, indices: &[usize], eval_seed: u64) -> Result<Evaluation> {
    let mut ev = Evaluation::default();
    for &i in indices {
        let (m, mask, _) = evaluate_image(model, ds.image(i), i, eval_seed)?;
        ev.metrics.push(m);
        ev.masks.push(mask);
    }
    Ok(ev)
}

/// Per-image metrics over one split.
pub fn evaluate(model: &Model, ds: &Dataset, split: Split, eval_seed: u64) -> Result<Evaluation> {
    evaluate_indices(model, ds, &ds.indices(split), eval_seed)
}

/// Metrics over a plain image list, indexed by position.
pub fn evaluate_images(model: &Model, images: &[Tensor<f32>], eval_seed: u64) -> Result<Evaluation> {
    let mut ev = Evaluation::default();
    for (i, x) in images.iter().enumerate() {
        let (m, mask, _) = evaluate_image(model, x, i, eval_seed)?;
        ev.metrics.push(m);
        ev.masks.push(mask);
    }
    Ok(ev)
}
