//! Image-domain reconstructor: complex zero-filled image in, real image out.

use rand::Rng;

use crate::ad::{Tape, Var};
use crate::error::{arg_err, shape_err, Result};
use crate::params::{ParamVars, Params};
use crate::tensor::Real;
use crate::unet::{UNet, UNetConfig, LEVELS};

/// Percentile of `|x̂|` used to bring inputs to unit scale.
pub const SCALE_PERCENTILE: f64 = 99.0;
const SCALE_EPS: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct Reconstructor {
    net: UNet,
}

impl Reconstructor {
    pub const PREFIX: &'static str = "recon";

    pub fn new(widths: [usize; LEVELS]) -> Result<Self> {
        Ok(Self {
            net: UNet::new(Self::PREFIX, UNetConfig::new(2, 1, widths))?,
        })
    }

    pub fn net(&self) -> &UNet {
        &self.net
    }

    pub fn init_params<T: Real, R: Rng>(&self, params: &mut Params<T>, rng: &mut R) {
        self.net.init_params(params, rng);
    }

    /// `x̂: [2, H, W]` → `[H, W]`. The input is divided by its 99th
    /// percentile magnitude and the output multiplied back.
    pub fn forward<T: Real>(&self, tape: &Tape<T>, vars: &ParamVars, x_hat: Var) -> Result<Var> {
        let shape = tape.shape(x_hat);
        let [2, h, w] = shape[..] else {
            return Err(shape_err("reconstruct", format!("expected [2, H, W], got {shape:?}")));
        };
        let m = UNetConfig::min_extent();
        if h < m || w < m {
            return Err(arg_err("reconstruct", format!("extents {h}x{w} below {m}")));
        }
        let scale = tape.percentile_abs(x_hat, SCALE_PERCENTILE)?;
        let scale = tape.affine(scale, 1.0, SCALE_EPS)?;
        let x = tape.div_scalar(x_hat, scale)?;
        let x = tape.reshape(x, &[1, 2, h, w])?;
        let y = self.net.forward(tape, vars, x)?;
        let y = tape.mul_scalar(y, scale)?;
        tape.reshape(y, &[h, w])
    }
}
