//! Finite-difference check over every differentiable operator plus small
//! end-to-end episodes, as a table for the command line and the tests.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::ad::{grad_check, grad_check_smooth, DrawForward, GradCheckOptions, SsimParams, Tape, Var};
use crate::error::Result;
use crate::forward::SamplingMode;
use crate::params::ParamVars;
use crate::phantom::{generate_phantom, Dataset, PhantomSpec};
use crate::pipeline::{loss, run_episode, EpisodeOptions, Method, Model, TrainConfig};
use crate::sampler::{mask_acquired, normalize_heatmap, Policy, PolicyInput, SamplerConfig};
use crate::seed;
use crate::tensor::Tensor;

/// Pass threshold on the relative error.
pub const TOLERANCE: f64 = 1e-4;

#[derive(Clone, Debug, Serialize)]
pub struct SuiteRow {
    pub name: String,
    pub seeds: usize,
    pub max_rel_err: f64,
    pub checked: usize,
    /// Coordinates skipped because both sides of the stencil hit a kink.
    pub crossed_kink: usize,
}

impl SuiteRow {
    pub fn passed(&self) -> bool {
        self.max_rel_err < TOLERANCE && self.checked > 0 && self.crossed_kink * 10 <= self.checked
    }
}

type OpFn = Box<dyn Fn(&Tape<f64>, &[Var]) -> Result<Var>>;

struct Case {
    name: &'static str,
    shapes: Vec<Vec<usize>>,
    range: (f64, f64),
    f: OpFn,
}

fn case(name: &'static str, shapes: &[&[usize]], range: (f64, f64), f: impl Fn(&Tape<f64>, &[Var]) -> Result<Var> + 'static) -> Case {
    Case {
        name,
        shapes: shapes.iter().map(|s| s.to_vec()).collect(),
        range,
        f: Box::new(f),
    }
}

fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(lo..hi)).collect()).expect("shape")
}

/// Scalarises `v` with fixed random weights so every output coordinate
/// contributes.
fn weighted_sum(t: &Tape<f64>, v: Var, seed: u64) -> Result<Var> {
    let shape = t.shape(v);
    let w = rand_tensor(&shape, &mut ChaCha8Rng::seed_from_u64(seed ^ 0xabcd), -1.0, 1.0);
    let p = t.mul_const(v, &w)?;
    t.sum(p)
}

fn scalar(t: &Tape<f64>, v: Var) -> Result<Var> {
    t.reshape(v, &[])
}

fn operator_cases() -> Vec<Case> {
    let u1 = (-1.0, 1.0);
    vec![
        case("add", &[&[3, 4], &[3, 4]], u1, |t, v| t.add(v[0], v[1])),
        case("sub", &[&[3, 4], &[3, 4]], u1, |t, v| t.sub(v[0], v[1])),
        case("mul", &[&[3, 4], &[3, 4]], u1, |t, v| t.mul(v[0], v[1])),
        case("affine", &[&[5]], u1, |t, v| t.affine(v[0], -2.5, 0.3)),
        case("div_scalar", &[&[5], &[1]], (0.5, 2.0), |t, v| t.div_scalar(v[0], scalar(t, v[1])?)),
        case("mul_scalar", &[&[5], &[1]], u1, |t, v| t.mul_scalar(v[0], scalar(t, v[1])?)),
        case("sum", &[&[3, 3]], u1, |t, v| t.sum(v[0])),
        case("mean", &[&[3, 3]], u1, |t, v| t.mean(v[0])),
        case("max", &[&[10]], u1, |t, v| t.max(v[0])),
        case("reshape", &[&[2, 3]], u1, |t, v| t.reshape(v[0], &[3, 2])),
        case("relu", &[&[20]], u1, |t, v| t.relu(v[0])),
        case("softplus", &[&[20]], (-4.0, 4.0), |t, v| t.softplus(v[0])),
        case("sigmoid", &[&[20]], (-4.0, 4.0), |t, v| t.sigmoid(v[0])),
        case("log1p", &[&[20]], (0.0, 3.0), |t, v| t.log1p(v[0])),
        case("signed_log1p", &[&[20]], (-3.0, 3.0), |t, v| t.signed_log1p(v[0])),
        case("linear", &[&[2, 3], &[3, 4], &[4]], u1, |t, v| t.linear(v[0], v[1], v[2])),
        case("conv2d", &[&[1, 2, 6, 6], &[3, 2, 3, 3]], u1, |t, v| t.conv2d(v[0], v[1], 1, 1)),
        case("conv2d_strided", &[&[2, 2, 6, 6], &[2, 2, 3, 3]], u1, |t, v| t.conv2d(v[0], v[1], 2, 1)),
        case("channel_bias", &[&[2, 3, 2, 2], &[3]], u1, |t, v| t.channel_bias(v[0], v[1])),
        case("instance_norm", &[&[1, 2, 4, 4]], u1, |t, v| t.instance_norm(v[0], 1e-5)),
        case("upsample2x", &[&[1, 2, 3, 3]], u1, |t, v| t.upsample2x(v[0])),
        case("avgpool2x", &[&[1, 2, 4, 4]], u1, |t, v| t.avgpool2x(v[0])),
        case("concat_channels", &[&[1, 1, 2, 2], &[1, 2, 2, 2]], u1, |t, v| t.concat_channels(&[v[0], v[1]])),
        case("fft2", &[&[2, 8, 4]], u1, |t, v| t.fft2(v[0])),
        case("ifft2", &[&[1, 2, 4, 8]], u1, |t, v| t.ifft2(v[0])),
        case("fftshift", &[&[2, 4, 4]], u1, |t, v| t.fftshift(v[0], false)),
        case("ifftshift", &[&[2, 4, 4]], u1, |t, v| t.fftshift(v[0], true)),
        case("cabs", &[&[2, 4, 4]], u1, |t, v| t.cabs(v[0])),
        case("mean_rows", &[&[3, 5]], u1, |t, v| t.mean_rows(v[0])),
        case("expand_rows", &[&[5]], u1, |t, v| t.expand_rows(v[0], 3)),
        case("mask_complex", &[&[2, 4, 4], &[4, 4]], u1, |t, v| t.mask_complex(v[0], v[1])),
        case("percentile_abs", &[&[2, 4, 4]], u1, |t, v| t.percentile_abs(v[0], 99.0)),
    ]
}

fn row(name: &str) -> SuiteRow {
    SuiteRow {
        name: name.to_string(),
        seeds: 0,
        max_rel_err: 0.0,
        checked: 0,
        crossed_kink: 0,
    }
}

/// Elementary operators, the SSIM loss, the straight-through draw and one
/// line-policy step, each over `seeds`.
pub fn operator_suite(seeds: &[u64]) -> Result<Vec<SuiteRow>> {
    let opts = GradCheckOptions::default();
    let mut rows = Vec::new();
    for c in operator_cases() {
        let mut r = row(c.name);
        for &s in seeds {
            let mut rng = ChaCha8Rng::seed_from_u64(s);
            let inputs: Vec<_> = c.shapes.iter().map(|sh| rand_tensor(sh, &mut rng, c.range.0, c.range.1)).collect();
            let err = grad_check(|t, v| weighted_sum(t, (c.f)(t, v)?, s), &inputs, &opts)?;
            r.max_rel_err = r.max_rel_err.max(err);
            r.checked += inputs.iter().map(Tensor::len).sum::<usize>();
            r.seeds += 1;
        }
        rows.push(r);
    }

    let mut ssim = row("ssim");
    let mut ste = row("straight_through");
    for &s in seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(s);
        let target = rand_tensor(&[8, 8], &mut rng, 0.0, 1.0);
        let x = rand_tensor(&[8, 8], &mut rng, 0.0, 1.0);
        let err = grad_check(|t, v| t.ssim(v[0], &target, &SsimParams::default()), &[x], &opts)?;
        ssim.max_rel_err = ssim.max_rel_err.max(err);
        ssim.checked += 64;
        ssim.seeds += 1;

        let u: Vec<f64> = (0..12).map(|_| 1.0 - rng.gen::<f64>()).collect();
        let elig: Vec<bool> = (0..12).map(|i| i % 3 != 0).collect();
        let p = rand_tensor(&[12], &mut rng, 0.0, 1.0);
        let m = rand_tensor(&[12], &mut rng, 0.0, 1.0);
        let err = grad_check(
            |t, v| {
                let d = t.straight_through(v[0], v[1], &u, &elig, 5.0, DrawForward::Relaxed)?;
                weighted_sum(t, d, s)
            },
            &[p, m],
            &opts,
        )?;
        ste.max_rel_err = ste.max_rel_err.max(err);
        ste.checked += 24;
        ste.seeds += 1;
    }
    rows.push(ssim);
    rows.push(ste);
    rows.push(policy_step_row(seeds)?);
    Ok(rows)
}

/// Line policy → normalise → mask → relaxed draw, w.r.t. the policy weights.
fn policy_step_row(seeds: &[u64]) -> Result<SuiteRow> {
    let cfg = SamplerConfig {
        mlp_hidden: 6,
        mlp_layers: 3,
        ..SamplerConfig::default()
    };
    let n = 8;
    let pol = Policy::new(SamplingMode::Line, n, &cfg)?;
    let mut r = row("policy_step");
    for &s in seeds {
        let mut params = crate::params::Params::<f64>::new();
        pol.init_params(&mut params, &mut ChaCha8Rng::seed_from_u64(s));
        let names: Vec<String> = params.names().map(str::to_string).collect();
        let inputs: Vec<Tensor<f64>> = params.iter().map(|(_, t)| t.clone()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(s ^ 0x51);
        let y_hat = rand_tensor(&[2, n, n], &mut rng, -0.5, 0.5);
        let y_tilde = rand_tensor(&[2, n, n], &mut rng, -0.5, 0.5);
        let prev = vec![0.0, 0.0, 0.0, 1.0, 1.0, 0.0, 0.0, 0.0];
        let elig: Vec<bool> = prev.iter().map(|&v| v == 0.0).collect();
        let u: Vec<f64> = (0..n).map(|_| rng.gen()).collect();
        let rep = grad_check_smooth(
            |tape, vars| {
                let pv = ParamVars::from_pairs(names.iter().cloned().zip(vars.iter().copied()));
                let mask = tape.constant(Tensor::new(&[n], prev.clone())?)?;
                let inp = PolicyInput {
                    y_hat: tape.constant(y_hat.clone())?,
                    y_tilde: tape.constant(y_tilde.clone())?,
                    mask,
                };
                let raw = pol.forward(tape, &pv, &inp)?;
                let p = normalize_heatmap(tape, raw, &elig, 2.0 / 6.0)?;
                let p = mask_acquired(tape, p, mask)?;
                let m = tape.straight_through(p, mask, &u, &elig, 5.0, DrawForward::Relaxed)?;
                weighted_sum(tape, m, s)
            },
            &inputs,
            &GradCheckOptions {
                seed: s,
                max_coords: Some(20),
                ..GradCheckOptions::default()
            },
        )?;
        r.max_rel_err = r.max_rel_err.max(rep.max_rel_err);
        r.checked += rep.checked;
        r.crossed_kink += rep.crossed_kink;
        r.seeds += 1;
    }
    Ok(r)
}

/// Configuration of the 16×16 end-to-end check: two sampling rounds,
/// width-2 networks.
pub fn tiny_episode_config(mode: SamplingMode) -> TrainConfig {
    TrainConfig {
        method: Method::Sequential,
        mode,
        extent: 16,
        accel: 4.0,
        steps: 2,
        recon_widths: [2, 2, 2, 2],
        sampler: SamplerConfig {
            mlp_hidden: 8,
            mlp_layers: 3,
            unet_widths: [2, 2, 2, 2],
            ..SamplerConfig::default()
        },
        ..TrainConfig::default()
    }
}

/// Loss of a full relaxed episode w.r.t. every parameter tensor
/// (`coords_per_tensor` sampled coordinates each).
pub fn episode_row(mode: SamplingMode, seeds: &[u64], coords_per_tensor: usize) -> Result<SuiteRow> {
    let cfg = tiny_episode_config(mode);
    let model = Model::new(&cfg, &Dataset::new(cfg.extent, Vec::new(), Vec::new())?)?;
    let params = model.params.cast::<f64>();
    let names: Vec<String> = params.names().map(str::to_string).collect();
    let inputs: Vec<Tensor<f64>> = params.iter().map(|(_, t)| t.clone()).collect();
    let pspec = PhantomSpec {
        extent: cfg.extent,
        ..PhantomSpec::default()
    };
    let mut r = row(&format!("episode_{mode}"));
    for &s in seeds {
        let x: Tensor<f64> = generate_phantom(&pspec, &mut seed::stream(s, &[0xe9]))?.cast();
        let rep = grad_check_smooth(
            |tape, vars| {
                let pv = ParamVars::from_pairs(names.iter().cloned().zip(vars.iter().copied()));
                let mut rng = ChaCha8Rng::seed_from_u64(s);
                let mut ep = run_episode(tape, &model, &pv, &x, &mut rng, EpisodeOptions { relaxed: true })?;
                loss(tape, &mut ep, &x)
            },
            &inputs,
            &GradCheckOptions {
                seed: s,
                max_coords: Some(coords_per_tensor),
                ..GradCheckOptions::default()
            },
        )?;
        r.max_rel_err = r.max_rel_err.max(rep.max_rel_err);
        r.checked += rep.checked;
        r.crossed_kink += rep.crossed_kink;
        r.seeds += 1;
    }
    Ok(r)
}

/// Operators plus point and line episodes.
pub fn full_suite(seeds: &[u64]) -> Result<Vec<SuiteRow>> {
    let mut rows = operator_suite(seeds)?;
    for mode in [SamplingMode::Point, SamplingMode::Line] {
        rows.push(episode_row(mode, seeds, 3)?);
    }
    Ok(rows)
}
