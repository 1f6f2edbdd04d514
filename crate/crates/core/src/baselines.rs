//! Hand-designed sampling patterns and wrappers for the learned baselines.

use rand::seq::index::sample;
use rand::Rng;

use crate::error::{arg_err, Error, Result};
use crate::forward::{low_freq_mask, to_kspace, AccelSpec, Mask, SamplingMode};
use crate::params::Params;
use crate::phantom::Dataset;
use crate::pipeline::{train_model, Method, Model, TrainConfig, TrainLog};
use crate::recon::Reconstructor;
use crate::tensor::{Real, Tensor};

/// Low-frequency pre-selection plus `B − B_lf` further indices drawn
/// uniformly without replacement.
pub fn random_mask<R: Rng>(spec: &AccelSpec, rng: &mut R) -> Result<Mask> {
    let mut m = low_freq_mask(spec)?;
    let free: Vec<usize> = (0..m.k()).filter(|&i| !m.get(i)).collect();
    let need = spec.budget() - m.count();
    if need > free.len() {
        return Err(Error::Budget(format!("{need} samples requested, {} free", free.len())));
    }
    for j in sample(rng, free.len(), need).into_iter() {
        m.set(free[j], true);
    }
    Ok(m)
}

/// Line mode only: the centre lines plus lines spaced `K / B` apart around
/// DC. A line that lands on an already selected column moves outward to
/// the nearest free one.
pub fn equispaced_mask(spec: &AccelSpec) -> Result<Mask> {
    if spec.mode != SamplingMode::Line {
        return Err(arg_err("equispaced_mask", "only defined for line sampling"));
    }
    let mut m = low_freq_mask(spec)?;
    let k = spec.k() as i64;
    let dc = (spec.cols / 2) as i64;
    let stride = k as f64 / spec.budget() as f64;
    let mut need = spec.budget() - m.count();
    let mut step = 0i64;
    while need > 0 {
        // 0, +1, −1, +2, −2, ...
        let j = if step == 0 {
            0
        } else if step % 2 == 1 {
            (step + 1) / 2
        } else {
            -step / 2
        };
        step += 1;
        let target = dc + (j as f64 * stride).round() as i64;
        if target < 0 || target >= k {
            if step > 4 * k {
                return Err(Error::Budget("could not place equispaced lines".into()));
            }
            continue;
        }
        let dir = if j < 0 { -1 } else { 1 };
        let mut c = target;
        while c >= 0 && c < k && m.get(c as usize) {
            c += dir;
        }
        if c < 0 || c >= k {
            // no room outward, search inward instead
            c = target;
            while c >= 0 && c < k && m.get(c as usize) {
                c -= dir;
            }
        }
        if c >= 0 && c < k && !m.get(c as usize) {
            m.set(c as usize, true);
            need -= 1;
        }
        if step > 4 * k && need > 0 {
            return Err(Error::Budget("could not place equispaced lines".into()));
        }
    }
    Ok(m)
}

/// Mean power spectrum `|F(x)|²` over `images`, `[H, W]`.
pub fn mean_power<T: Real>(images: &[Tensor<T>]) -> Result<Tensor<f64>> {
    let first = images.first().ok_or_else(|| arg_err("spectrum_mask", "empty training set"))?;
    let (h, w) = (first.shape()[0], first.shape()[1]);
    let mut acc = vec![0.0; h * w];
    for img in images {
        let y = to_kspace(&img.cast::<f64>())?;
        let (re, im) = y.data().split_at(h * w);
        for i in 0..h * w {
            acc[i] += re[i] * re[i] + im[i] * im[i];
        }
    }
    let n = images.len() as f64;
    Tensor::new(&[h, w], acc.into_iter().map(|v| v / n).collect())
}

/// Low-frequency pre-selection, then the highest-power remaining indices of
/// the training-set mean spectrum (column sums in line mode).
pub fn spectrum_mask<T: Real>(images: &[Tensor<T>], spec: &AccelSpec) -> Result<Mask> {
    let power = mean_power(images)?;
    if power.shape() != [spec.rows, spec.cols] {
        return Err(arg_err("spectrum_mask", "training images do not match the grid"));
    }
    let score: Vec<f64> = match spec.mode {
        SamplingMode::Point => power.data().to_vec(),
        SamplingMode::Line => (0..spec.cols)
            .map(|c| (0..spec.rows).map(|r| power.data()[r * spec.cols + c]).sum())
            .collect(),
    };
    let mut m = low_freq_mask(spec)?;
    let mut free: Vec<usize> = (0..m.k()).filter(|&i| !m.get(i)).collect();
    free.sort_by(|&a, &b| score[b].total_cmp(&score[a]).then(a.cmp(&b)));
    let need = spec.budget() - m.count();
    for &i in free.iter().take(need) {
        m.set(i, true);
    }
    Ok(m)
}

/// Input-independent learned sampling distribution trained jointly with a
/// reconstructor.
pub fn loupe_style_train(cfg: &TrainConfig, ds: &Dataset) -> Result<(Model, TrainLog)> {
    train_model(&TrainConfig { method: Method::Static, ..cfg.clone() }, ds)
}

/// Sequential architecture fed with fixed noise instead of measurements,
/// drawing its mask in one shot.
pub fn nonseq_variant_train(cfg: &TrainConfig, ds: &Dataset) -> Result<(Model, TrainLog)> {
    train_model(&TrainConfig { method: Method::NonSequential, ..cfg.clone() }, ds)
}

/// Trains only the sampler of `cfg` against a frozen reconstructor taken
/// from `pretrained` (normally a model trained on random masks).
pub fn codesign_off_train(cfg: &TrainConfig, ds: &Dataset, pretrained: &Model) -> Result<(Model, TrainLog)> {
    let recon: Params<f32> = pretrained.params.subset(&format!("{}.", Reconstructor::PREFIX));
    let mut model = Model::new(cfg, ds)?;
    if recon.len() != model.params.subset(&format!("{}.", Reconstructor::PREFIX)).len() {
        return Err(arg_err("codesign_off", "pretrained reconstructor has a different architecture"));
    }
    for (name, t) in recon.iter() {
        match model.params.get_mut(name) {
            Some(slot) if slot.shape() == t.shape() => *slot = t.clone(),
            _ => return Err(arg_err("codesign_off", format!("parameter `{name}` does not fit"))),
        }
    }
    model.freeze(Reconstructor::PREFIX);
    let log = crate::pipeline::train(&mut model, cfg, ds)?;
    Ok((model, log))
}
