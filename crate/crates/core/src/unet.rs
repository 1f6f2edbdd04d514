//! Four-level encoder/decoder with skip connections.
//!
//! Every block is `(conv3×3 → instance norm → ReLU) × 2` without conv bias.
//! The encoder runs blocks at `H, H/2, H/4, H/8` with 2×2 average pooling
//! between them and after the last one; the decoder upsamples, concatenates
//! the mirrored encoder output and runs a block, four times. A 1×1
//! convolution with bias maps to the output channels.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::ad::{Tape, Var};
use crate::error::{arg_err, shape_err, Result};
use crate::params::{ParamVars, Params};
use crate::tensor::Real;

pub const LEVELS: usize = 4;
const NORM_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UNetConfig {
    pub in_channels: usize,
    pub out_channels: usize,
    /// Channel width of each encoder level.
    pub widths: [usize; LEVELS],
}

impl UNetConfig {
    pub fn new(in_channels: usize, out_channels: usize, widths: [usize; LEVELS]) -> Self {
        Self {
            in_channels,
            out_channels,
            widths,
        }
    }

    /// Smallest spatial extent the network accepts.
    pub fn min_extent() -> usize {
        1 << LEVELS
    }
}

#[derive(Clone, Debug)]
pub struct UNet {
    prefix: String,
    cfg: UNetConfig,
}

fn conv_name(prefix: &str, block: &str, j: usize) -> String {
    format!("{prefix}.{block}.conv{j}")
}

impl UNet {
    pub fn new(prefix: impl Into<String>, cfg: UNetConfig) -> Result<Self> {
        if cfg.in_channels == 0 || cfg.out_channels == 0 || cfg.widths.contains(&0) {
            return Err(arg_err("unet", "channel counts must be positive"));
        }
        Ok(Self {
            prefix: prefix.into(),
            cfg,
        })
    }

    pub fn config(&self) -> &UNetConfig {
        &self.cfg
    }

    pub fn prefix(&self) -> &str {
        &self.prefix
    }

    /// `(name, in, out)` of each block in evaluation order.
    fn blocks(&self) -> Vec<(String, usize, usize)> {
        let w = self.cfg.widths;
        let mut out = Vec::with_capacity(2 * LEVELS);
        let mut cin = self.cfg.in_channels;
        for (i, &wi) in w.iter().enumerate() {
            out.push((format!("down{i}"), cin, wi));
            cin = wi;
        }
        // decoder level i consumes the upsampled previous output and encoder level 3-i
        let mut prev = w[LEVELS - 1];
        for i in 0..LEVELS {
            let skip = w[LEVELS - 1 - i];
            let target = if i + 1 < LEVELS { w[LEVELS - 2 - i] } else { w[0] };
            out.push((format!("up{i}"), prev + skip, target));
            prev = target;
        }
        out
    }

    pub fn init_params<T: Real, R: Rng>(&self, params: &mut Params<T>, rng: &mut R) {
        for (block, cin, cout) in self.blocks() {
            params.init_uniform(&conv_name(&self.prefix, &block, 0), &[cout, cin, 3, 3], cin * 9, rng);
            params.init_uniform(&conv_name(&self.prefix, &block, 1), &[cout, cout, 3, 3], cout * 9, rng);
        }
        let w0 = self.cfg.widths[0];
        params.init_uniform(
            &format!("{}.out.weight", self.prefix),
            &[self.cfg.out_channels, w0, 1, 1],
            w0,
            rng,
        );
        params.init_uniform(&format!("{}.out.bias", self.prefix), &[self.cfg.out_channels], w0, rng);
    }

    fn block<T: Real>(&self, tape: &Tape<T>, vars: &ParamVars, x: Var, name: &str) -> Result<Var> {
        let mut h = x;
        for j in 0..2 {
            let k = vars.get(&conv_name(&self.prefix, name, j))?;
            h = tape.conv2d(h, k, 1, 1)?;
            h = tape.instance_norm(h, NORM_EPS)?;
            h = tape.relu(h)?;
        }
        Ok(h)
    }

    /// `x: [N, C_in, H, W]` with `H, W` divisible by 16 → `[N, C_out, H, W]`.
    pub fn forward<T: Real>(&self, tape: &Tape<T>, vars: &ParamVars, x: Var) -> Result<Var> {
        let shape = tape.shape(x);
        let [_, c, h, w] = shape[..] else {
            return Err(shape_err("unet", format!("expected [N, C, H, W], got {shape:?}")));
        };
        if c != self.cfg.in_channels {
            return Err(shape_err(
                "unet",
                format!("expected {} input channels, got {c}", self.cfg.in_channels),
            ));
        }
        let m = UNetConfig::min_extent();
        if h < m || w < m || h % m != 0 || w % m != 0 {
            return Err(arg_err("unet", format!("extents {h}x{w} do not allow {LEVELS} halvings")));
        }
        let mut skips = Vec::with_capacity(LEVELS);
        let mut h_ = x;
        for i in 0..LEVELS {
            let d = self.block(tape, vars, h_, &format!("down{i}"))?;
            skips.push(d);
            h_ = tape.avgpool2x(d)?;
        }
        for i in 0..LEVELS {
            let up = tape.upsample2x(h_)?;
            let cat = tape.concat_channels(&[up, skips[LEVELS - 1 - i]])?;
            h_ = self.block(tape, vars, cat, &format!("up{i}"))?;
        }
        let k = vars.get(&format!("{}.out.weight", self.prefix))?;
        let b = vars.get(&format!("{}.out.bias", self.prefix))?;
        let y = tape.conv2d(h_, k, 1, 0)?;
        tape.channel_bias(y, b)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn shapes_and_param_count() {
        let net = UNet::new("u", UNetConfig::new(2, 1, [4, 8, 8, 16])).unwrap();
        let mut p = Params::<f64>::new();
        net.init_params(&mut p, &mut ChaCha8Rng::seed_from_u64(0));
        assert_eq!(p.len(), 2 * 2 * LEVELS + 2);
        assert_eq!(p.get("u.up0.conv0").unwrap().shape(), &[8, 32, 3, 3]);
        assert_eq!(p.get("u.up3.conv0").unwrap().shape(), &[4, 8, 3, 3]);
        let t = Tape::new();
        let vars = p.register(&t, |_| true).unwrap();
        let x = t.constant(Tensor::zeros(&[1, 2, 16, 32])).unwrap();
        let y = net.forward(&t, &vars, x).unwrap();
        assert_eq!(t.shape(y), vec![1, 1, 16, 32]);
        let small = t.constant(Tensor::zeros(&[1, 2, 8, 8])).unwrap();
        assert!(net.forward(&t, &vars, small).is_err());
    }
}
