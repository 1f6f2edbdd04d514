//! Sampling policy: score networks, heatmap normalisation, removal of
//! acquired indices and exact-budget stochastic binarisation with a
//! straight-through gradient.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::ad::{DrawForward, Tape, Var};
use crate::error::{arg_err, shape_err, Error, Result};
use crate::forward::SamplingMode;
use crate::params::{ParamVars, Params};
use crate::tensor::{Real, Tensor};
use crate::unet::{UNet, UNetConfig, LEVELS};

pub const MAX_DRAW_ATTEMPTS: usize = 200;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerConfig {
    /// Hidden width of the line-mode MLP.
    pub mlp_hidden: usize,
    /// Number of linear layers of the line-mode MLP.
    pub mlp_layers: usize,
    /// Encoder widths of the point-mode UNet.
    pub unet_widths: [usize; LEVELS],
    /// Slope `k` of the surrogate `σ(k·(p − u))`.
    pub ste_slope: f64,
    /// Fixed multiplier on the free scores of the static baseline, so that
    /// Adam steps move them at a useful rate.
    pub static_gain: f64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            mlp_hidden: 256,
            mlp_layers: 5,
            unet_widths: [16, 32, 64, 128],
            ste_slope: 5.0,
            static_gain: 10.0,
        }
    }
}

/// Policy inputs for one step: measured k-space `ŷ`, k-space of the current
/// reconstruction `ỹ` (both `[2, H, W]`) and the mask in `[K]`/`[H, W]` layout.
#[derive(Clone, Copy, Debug)]
pub struct PolicyInput {
    pub y_hat: Var,
    pub y_tilde: Var,
    pub mask: Var,
}

#[derive(Clone, Debug)]
pub enum Policy {
    /// MLP over per-column magnitude features.
    Line { cols: usize, hidden: usize, layers: usize },
    /// UNet over the stacked complex inputs and the mask.
    Point { net: UNet },
}

impl Policy {
    pub const PREFIX: &'static str = "policy";

    pub fn new(mode: SamplingMode, cols: usize, cfg: &SamplerConfig) -> Result<Self> {
        match mode {
            SamplingMode::Line => {
                if cfg.mlp_layers < 2 || cfg.mlp_hidden == 0 {
                    return Err(arg_err("policy", "line policy needs >= 2 layers and a positive width"));
                }
                Ok(Policy::Line {
                    cols,
                    hidden: cfg.mlp_hidden,
                    layers: cfg.mlp_layers,
                })
            }
            SamplingMode::Point => Ok(Policy::Point {
                net: UNet::new(Self::PREFIX, UNetConfig::new(5, 1, cfg.unet_widths))?,
            }),
        }
    }

    pub fn mode(&self) -> SamplingMode {
        match self {
            Policy::Line { .. } => SamplingMode::Line,
            Policy::Point { .. } => SamplingMode::Point,
        }
    }

    fn layer_dims(cols: usize, hidden: usize, layers: usize) -> Vec<(usize, usize)> {
        (0..layers)
            .map(|i| {
                let din = if i == 0 { 3 * cols } else { hidden };
                let dout = if i + 1 == layers { cols } else { hidden };
                (din, dout)
            })
            .collect()
    }

    pub fn init_params<T: Real, R: Rng>(&self, params: &mut Params<T>, rng: &mut R) {
        match self {
            Policy::Line { cols, hidden, layers } => {
                for (i, (din, dout)) in Self::layer_dims(*cols, *hidden, *layers).into_iter().enumerate() {
                    params.init_uniform(&format!("{}.fc{i}.weight", Self::PREFIX), &[din, dout], din, rng);
                    params.init_uniform(&format!("{}.fc{i}.bias", Self::PREFIX), &[dout], din, rng);
                }
            }
            Policy::Point { net } => net.init_params(params, rng),
        }
    }

    /// Raw scores in mask layout (`[W]` or `[H, W]`).
    pub fn forward<T: Real>(&self, tape: &Tape<T>, vars: &ParamVars, inp: &PolicyInput) -> Result<Var> {
        let ys = tape.shape(inp.y_hat);
        let [2, h, w] = ys[..] else {
            return Err(shape_err("policy", format!("expected [2, H, W] k-space, got {ys:?}")));
        };
        if tape.shape(inp.y_tilde) != ys {
            return Err(shape_err("policy", "measured and predicted k-space differ in shape"));
        }
        match self {
            Policy::Line { cols, hidden, layers } => {
                if w != *cols || tape.shape(inp.mask) != [w] {
                    return Err(shape_err(
                        "policy",
                        format!("line policy for {cols} columns got {h}x{w}, mask {:?}", tape.shape(inp.mask)),
                    ));
                }
                let column_feature = |y: Var| -> Result<Var> {
                    let m = tape.cabs(y)?;
                    let m = tape.mean_rows(m)?;
                    let m = tape.log1p(m)?;
                    tape.reshape(m, &[1, 1, 1, w])
                };
                let a = column_feature(inp.y_hat)?;
                let b = column_feature(inp.y_tilde)?;
                let m = tape.reshape(inp.mask, &[1, 1, 1, w])?;
                let mut z = tape.concat_channels(&[a, b, m])?;
                z = tape.reshape(z, &[3 * w])?;
                for i in 0..*layers {
                    let wt = vars.get(&format!("{}.fc{i}.weight", Self::PREFIX))?;
                    let bs = vars.get(&format!("{}.fc{i}.bias", Self::PREFIX))?;
                    z = tape.linear(z, wt, bs)?;
                    if i + 1 < *layers {
                        z = tape.relu(z)?;
                    }
                }
                let _ = hidden;
                Ok(z)
            }
            Policy::Point { net } => {
                if tape.shape(inp.mask) != [h, w] {
                    return Err(shape_err("policy", format!("mask {:?} vs {h}x{w}", tape.shape(inp.mask))));
                }
                let a = tape.signed_log1p(inp.y_hat)?;
                let a = tape.reshape(a, &[1, 2, h, w])?;
                let b = tape.signed_log1p(inp.y_tilde)?;
                let b = tape.reshape(b, &[1, 2, h, w])?;
                let m = tape.reshape(inp.mask, &[1, 1, h, w])?;
                let z = tape.concat_channels(&[a, b, m])?;
                let s = net.forward(tape, vars, z)?;
                tape.reshape(s, &[h, w])
            }
        }
    }
}

fn eligible_tensor<T: Real>(eligible: &[bool], shape: &[usize]) -> Result<Tensor<T>> {
    Tensor::new(
        shape,
        eligible.iter().map(|&e| if e { T::one() } else { T::zero() }).collect(),
    )
}

/// Softplus, division by the maximum and rescaling so that the mean over
/// `eligible` indices equals `target`. Ineligible entries are zero.
pub fn normalize_heatmap<T: Real>(tape: &Tape<T>, raw: Var, eligible: &[bool], target: f64) -> Result<Var> {
    if !(target > 0.0 && target < 1.0) {
        return Err(arg_err("normalize_heatmap", format!("target mean {target} outside (0, 1)")));
    }
    let shape = tape.shape(raw);
    if eligible.len() != shape.iter().product::<usize>() {
        return Err(shape_err("normalize_heatmap", "eligibility length differs from scores"));
    }
    let n_elig = eligible.iter().filter(|&&e| e).count();
    if n_elig == 0 {
        return Err(Error::Budget("no eligible indices left".into()));
    }
    let elig = eligible_tensor::<T>(eligible, &shape)?;
    let p = tape.softplus(raw)?;
    let p = tape.mul_const(p, &elig)?;
    let pmax = tape.max(p)?;
    if tape.value(pmax).item() <= T::min_positive_value() {
        let flat = elig.map(|e| e * T::c(target));
        return tape.constant(flat);
    }
    let p = tape.div_scalar(p, pmax)?;
    let total = tape.sum(p)?;
    let mean = tape.scale(total, 1.0 / n_elig as f64)?;
    let mv = tape.value(mean).item().f64();
    let p = if mv >= target {
        let t = tape.constant(Tensor::scalar(T::c(target)))?;
        let ratio = tape.div_scalar(t, mean)?;
        tape.mul_scalar(p, ratio)?
    } else {
        let q = tape.affine(p, -1.0, 1.0)?;
        let om = tape.affine(mean, -1.0, 1.0)?;
        let q = tape.div_scalar(q, om)?;
        tape.affine(q, -(1.0 - target), 1.0)?
    };
    tape.mul_const(p, &elig)
}

/// `p ⊙ (1 − M_prev)`.
pub fn mask_acquired<T: Real>(tape: &Tape<T>, p: Var, m_prev: Var) -> Result<Var> {
    let keep = tape.affine(m_prev, -1.0, 1.0)?;
    tape.mul(p, keep)
}

/// Noise and binary increment of one acquisition step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepDraw<T> {
    pub u: Vec<T>,
    pub delta: Vec<bool>,
    /// Redraws needed before acceptance (the fallback counts as a full run).
    pub retries: usize,
    pub fallback: bool,
}

impl<T> StepDraw<T> {
    pub fn count(&self) -> usize {
        self.delta.iter().filter(|&&d| d).count()
    }
}

/// Thresholds fresh uniform noise `U ∈ (0, 1]` against `p` until exactly
/// `s` eligible indices satisfy `U ≤ p`, redrawing up to
/// [`MAX_DRAW_ATTEMPTS`] times, then falls back to the top `s` entries of
/// `p` with random tie-breaking.
pub fn binarize<T: Real, R: Rng>(p: &[T], eligible: &[bool], s: usize, rng: &mut R) -> Result<StepDraw<T>> {
    if p.len() != eligible.len() {
        return Err(shape_err("binarize", "heatmap and eligibility lengths differ"));
    }
    if s == 0 {
        return Err(Error::Budget("per-step budget must be >= 1".into()));
    }
    let n_elig = eligible.iter().filter(|&&e| e).count();
    if n_elig < s {
        return Err(Error::Budget(format!("{s} samples requested but only {n_elig} indices left")));
    }
    let mut u = vec![T::zero(); p.len()];
    for attempt in 0..MAX_DRAW_ATTEMPTS {
        for e in u.iter_mut() {
            *e = T::c(1.0 - rng.gen::<f64>());
        }
        let delta: Vec<bool> = (0..p.len()).map(|i| eligible[i] && u[i] <= p[i]).collect();
        if delta.iter().filter(|&&d| d).count() == s {
            return Ok(StepDraw {
                u,
                delta,
                retries: attempt,
                fallback: false,
            });
        }
    }
    let mut order: Vec<(usize, u64)> = (0..p.len())
        .filter(|&i| eligible[i])
        .map(|i| (i, rng.gen::<u64>()))
        .collect();
    order.shuffle(rng);
    order.sort_by(|a, b| {
        p[b.0]
            .partial_cmp(&p[a.0])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.1.cmp(&b.1))
    });
    let mut delta = vec![false; p.len()];
    for &(i, _) in order.iter().take(s) {
        delta[i] = true;
    }
    Ok(StepDraw {
        u,
        delta,
        retries: MAX_DRAW_ATTEMPTS,
        fallback: true,
    })
}

/// Records `M_t = M_{t−1} + ΔM` with the straight-through surrogate.
pub fn acquire<T: Real>(
    tape: &Tape<T>,
    p: Var,
    m_prev: Var,
    draw: &StepDraw<T>,
    eligible: &[bool],
    slope: f64,
) -> Result<Var> {
    tape.straight_through(p, m_prev, &draw.u, eligible, slope, DrawForward::Hard(&draw.delta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn deterministic_heatmap_is_selected() {
        let mut p = vec![0.0f64; 10];
        for i in [1, 4, 7] {
            p[i] = 1.0;
        }
        let elig = vec![true; 10];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let d = binarize(&p, &elig, 3, &mut rng).unwrap();
        assert_eq!(d.delta.iter().enumerate().filter(|(_, &b)| b).map(|(i, _)| i).collect::<Vec<_>>(), vec![1, 4, 7]);
        assert_eq!(d.retries, 0);
    }

    #[test]
    fn infeasible_budget_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(binarize(&[0.5f64, 0.5], &[true, false], 2, &mut rng).is_err());
    }

    #[test]
    fn fallback_takes_top_entries() {
        // all-zero heatmap never yields a hit; the top-S fallback still picks S
        let p = vec![0.0f64; 6];
        let elig = vec![true, true, false, true, true, true];
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let d = binarize(&p, &elig, 2, &mut rng).unwrap();
        assert!(d.fallback);
        assert_eq!(d.count(), 2);
        assert!(!d.delta[2]);
    }
}
