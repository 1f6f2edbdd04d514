//! k-space measurement model: centred unitary Fourier transform, binary
//! sampling masks, zero-filled reconstruction and budget accounting.
//!
//! Complex grids are `[2, H, W]` tensors (real plane, imaginary plane) with
//! the DC term at `(H/2, W/2)`.

use serde::{Deserialize, Serialize};

use crate::ad::fft;
use crate::ad::{Tape, Var};
use crate::error::{arg_err, shape_err, Error, Result};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SamplingMode {
    /// Whole vertical lines (columns) of k-space.
    Line,
    /// Individual k-space points.
    Point,
}

impl std::fmt::Display for SamplingMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            SamplingMode::Line => f.write_str("line"),
            SamplingMode::Point => f.write_str("point"),
        }
    }
}

impl std::str::FromStr for SamplingMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "line" => Ok(Self::Line),
            "point" => Ok(Self::Point),
            other => Err(arg_err("mode", format!("unknown sampling mode `{other}`"))),
        }
    }
}

/// Binary sampling pattern over the `K` selectable indices (`K = W` lines or
/// `K = H·W` points).
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Mask {
    mode: SamplingMode,
    rows: usize,
    cols: usize,
    bits: Vec<bool>,
}

impl Mask {
    pub fn empty(mode: SamplingMode, rows: usize, cols: usize) -> Self {
        let k = match mode {
            SamplingMode::Line => cols,
            SamplingMode::Point => rows * cols,
        };
        Self {
            mode,
            rows,
            cols,
            bits: vec![false; k],
        }
    }

    pub fn full(mode: SamplingMode, rows: usize, cols: usize) -> Self {
        let mut m = Self::empty(mode, rows, cols);
        m.bits.fill(true);
        m
    }

    pub fn from_bits(mode: SamplingMode, rows: usize, cols: usize, bits: Vec<bool>) -> Result<Self> {
        let m = Self::empty(mode, rows, cols);
        if bits.len() != m.bits.len() {
            return Err(shape_err(
                "mask",
                format!("{mode} mask over {rows}x{cols} needs {} entries, got {}", m.bits.len(), bits.len()),
            ));
        }
        Ok(Self { bits, ..m })
    }

    /// Reads a 0/1 valued tensor laid out like [`Mask::to_tensor`].
    pub fn from_values<T: Real>(mode: SamplingMode, rows: usize, cols: usize, values: &Tensor<T>) -> Result<Self> {
        let half = T::c(0.5);
        Self::from_bits(mode, rows, cols, values.data().iter().map(|&v| v > half).collect())
    }

    pub fn mode(&self) -> SamplingMode {
        self.mode
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    /// Number of selectable indices `K`.
    pub fn k(&self) -> usize {
        self.bits.len()
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn get(&self, i: usize) -> bool {
        self.bits[i]
    }

    pub fn set(&mut self, i: usize, on: bool) {
        self.bits[i] = on;
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    /// Points sampled in the 2D realisation.
    pub fn sampled_points(&self) -> usize {
        match self.mode {
            SamplingMode::Line => self.count() * self.rows,
            SamplingMode::Point => self.count(),
        }
    }

    pub fn indices(&self) -> Vec<usize> {
        self.bits
            .iter()
            .enumerate()
            .filter_map(|(i, &b)| b.then_some(i))
            .collect()
    }

    pub fn contains(&self, other: &Mask) -> bool {
        self.bits.len() == other.bits.len() && self.bits.iter().zip(&other.bits).all(|(&a, &b)| a || !b)
    }

    pub fn union(&self, other: &Mask) -> Result<Mask> {
        self.check_compatible(other)?;
        let bits = self.bits.iter().zip(&other.bits).map(|(&a, &b)| a || b).collect();
        Ok(Mask { bits, ..self.clone() })
    }

    pub fn difference(&self, other: &Mask) -> Result<Mask> {
        self.check_compatible(other)?;
        let bits = self.bits.iter().zip(&other.bits).map(|(&a, &b)| a && !b).collect();
        Ok(Mask { bits, ..self.clone() })
    }

    fn check_compatible(&self, other: &Mask) -> Result<()> {
        if self.mode != other.mode || self.rows != other.rows || self.cols != other.cols {
            return Err(shape_err("mask", "masks differ in mode or extents"));
        }
        Ok(())
    }

    /// `[K]` (line) or `[H, W]` (point) tensor of 0/1 values.
    pub fn to_tensor<T: Real>(&self) -> Tensor<T> {
        let data = self.bits.iter().map(|&b| if b { T::one() } else { T::zero() }).collect();
        let shape = match self.mode {
            SamplingMode::Line => vec![self.cols],
            SamplingMode::Point => vec![self.rows, self.cols],
        };
        Tensor::new(&shape, data).expect("mask shape")
    }

    /// `[H, W]` realisation; line masks are constant along columns.
    pub fn realize<T: Real>(&self) -> Tensor<T> {
        match self.mode {
            SamplingMode::Point => self.to_tensor(),
            SamplingMode::Line => {
                let mut data = Vec::with_capacity(self.rows * self.cols);
                for _ in 0..self.rows {
                    data.extend(self.bits.iter().map(|&b| if b { T::one() } else { T::zero() }));
                }
                Tensor::new(&[self.rows, self.cols], data).expect("mask shape")
            }
        }
    }
}

/// Acceleration factor and its budget split.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AccelSpec {
    pub mode: SamplingMode,
    pub rows: usize,
    pub cols: usize,
    pub accel: f64,
    pub steps: usize,
}

impl AccelSpec {
    pub fn new(mode: SamplingMode, rows: usize, cols: usize, accel: f64, steps: usize) -> Result<Self> {
        let spec = Self {
            mode,
            rows,
            cols,
            accel,
            steps,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn with_steps(&self, steps: usize) -> Result<Self> {
        Self::new(self.mode, self.rows, self.cols, self.accel, steps)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.accel >= 1.0) {
            return Err(Error::Budget(format!("acceleration {} must be >= 1", self.accel)));
        }
        if self.steps == 0 {
            return Err(Error::Budget("step count must be >= 1".into()));
        }
        if self.low_freq_budget() == 0 {
            return Err(Error::Budget("low-frequency budget rounds to zero".into()));
        }
        if self.budget() > self.k() {
            return Err(Error::Budget("budget exceeds index count".into()));
        }
        if (self.budget() - self.low_freq_budget()) / self.steps == 0 {
            return Err(Error::Budget(format!(
                "{} learned samples cannot be split over {} steps",
                self.budget() - self.low_freq_budget(),
                self.steps
            )));
        }
        Ok(())
    }

    pub fn k(&self) -> usize {
        match self.mode {
            SamplingMode::Line => self.cols,
            SamplingMode::Point => self.rows * self.cols,
        }
    }

    /// Total budget `B = round(K / α)`.
    pub fn budget(&self) -> usize {
        (self.k() as f64 / self.accel).round() as usize
    }

    /// Pre-selected centre budget `round(B / 8)`.
    pub fn low_freq_budget(&self) -> usize {
        (self.budget() as f64 / 8.0).round() as usize
    }

    /// Per-step budgets: equal split, remainder on the last step.
    pub fn step_budgets(&self) -> Vec<usize> {
        let learned = self.budget() - self.low_freq_budget();
        let s = learned / self.steps;
        let mut v = vec![s; self.steps];
        *v.last_mut().expect("steps >= 1") += learned - s * self.steps;
        v
    }
}

fn real_to_complex<T: Real>(x: &Tensor<T>) -> Result<(Tensor<T>, usize, usize)> {
    if x.rank() != 2 {
        return Err(shape_err("to_kspace", format!("expected [H, W] image, got {:?}", x.shape())));
    }
    let (h, w) = (x.shape()[0], x.shape()[1]);
    if !h.is_power_of_two() || !w.is_power_of_two() {
        return Err(arg_err("to_kspace", format!("extents {h}x{w} are not powers of two")));
    }
    let mut data = x.data().to_vec();
    data.extend(std::iter::repeat(T::zero()).take(h * w));
    Ok((Tensor::new(&[2, h, w], data)?, h, w))
}

fn check_grid<T: Real>(y: &Tensor<T>, op: &'static str) -> Result<(usize, usize)> {
    match y.shape() {
        [2, h, w] if h.is_power_of_two() && w.is_power_of_two() => Ok((*h, *w)),
        s => Err(shape_err(op, format!("expected [2, H, W] power-of-two grid, got {s:?}"))),
    }
}

/// Centred unitary k-space `y = F(x)` of a real `[H, W]` image.
pub fn to_kspace<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (mut c, h, w) = real_to_complex(x)?;
    fft::fft_2d_blocks(c.data_mut(), h, w, false);
    Tensor::new(&[2, h, w], fft::roll_planes(c.data(), h, w, h / 2, w / 2))
}

/// Complex image `F⁻¹(y)` of a centred k-space grid.
pub fn to_image<T: Real>(y: &Tensor<T>) -> Result<Tensor<T>> {
    let (h, w) = check_grid(y, "to_image")?;
    let mut d = fft::roll_planes(y.data(), h, w, h - h / 2, w - w / 2);
    fft::fft_2d_blocks(&mut d, h, w, true);
    Tensor::new(&[2, h, w], d)
}

/// `M ⊙ y` on both channels.
pub fn apply_mask<T: Real>(y: &Tensor<T>, m: &Mask) -> Result<Tensor<T>> {
    let (h, w) = check_grid(y, "apply_mask")?;
    if m.rows() != h || m.cols() != w {
        return Err(shape_err(
            "apply_mask",
            format!("mask over {}x{} vs grid {h}x{w}", m.rows(), m.cols()),
        ));
    }
    let r = m.realize::<T>();
    let mut out = y.clone();
    for plane in out.data_mut().chunks_mut(h * w) {
        for (e, &mm) in plane.iter_mut().zip(r.data()) {
            *e *= mm;
        }
    }
    Ok(out)
}

/// Zero-filled complex image `F⁻¹(ŷ)`.
pub fn zero_fill<T: Real>(y_hat: &Tensor<T>) -> Result<Tensor<T>> {
    to_image(y_hat)
}

/// Pixelwise magnitude of a `[2, H, W]` grid.
pub fn magnitude<T: Real>(c: &Tensor<T>) -> Result<Tensor<T>> {
    let (h, w) = match c.shape() {
        [2, h, w] => (*h, *w),
        s => return Err(shape_err("magnitude", format!("expected [2, H, W], got {s:?}"))),
    };
    let (re, im) = c.data().split_at(h * w);
    Tensor::new(&[h, w], re.iter().zip(im).map(|(&a, &b)| (a * a + b * b).sqrt()).collect())
}

/// `α = K / ΣM`.
pub fn acceleration(m: &Mask) -> Result<f64> {
    match m.count() {
        0 => Err(Error::EmptyMask),
        n => Ok(m.k() as f64 / n as f64),
    }
}

/// Offset of index `i` from the DC position along an axis of length `n`.
fn offset(i: usize, n: usize) -> i64 {
    i as i64 - (n / 2) as i64
}

/// Centre pre-selection of exactly `B_lf` indices.
///
/// Line mode takes the columns closest to DC (ties go to negative
/// frequencies). Point mode grows the largest odd-sided square around DC
/// and completes it ring by ring, adding conjugate-symmetric pairs so the
/// pattern is invariant under 180° rotation about DC except for at most one
/// unpaired point.
pub fn low_freq_mask(spec: &AccelSpec) -> Result<Mask> {
    spec.validate()?;
    let need = spec.low_freq_budget();
    if need > spec.k() {
        return Err(Error::Budget(format!("low-frequency budget {need} exceeds K = {}", spec.k())));
    }
    let mut mask = Mask::empty(spec.mode, spec.rows, spec.cols);
    match spec.mode {
        SamplingMode::Line => {
            let mut cols: Vec<usize> = (0..spec.cols).collect();
            cols.sort_by_key(|&c| {
                let o = offset(c, spec.cols);
                (o.abs(), o > 0)
            });
            for &c in cols.iter().take(need) {
                mask.set(c, true);
            }
        }
        SamplingMode::Point => {
            let (h, w) = (spec.rows, spec.cols);
            let mut pts: Vec<(i64, i64)> = (0..h)
                .flat_map(|r| (0..w).map(move |c| (offset(r, h), offset(c, w))))
                .collect();
            let key = |&(dr, dc): &(i64, i64)| {
                let cheb = dr.abs().max(dc.abs());
                let e2 = dr * dr + dc * dc;
                // canonical angle of the conjugate pair in [0, π)
                let mut a = (dr as f64).atan2(dc as f64);
                if a < 0.0 {
                    a += std::f64::consts::PI;
                }
                if a >= std::f64::consts::PI - 1e-12 {
                    a = 0.0;
                }
                (cheb, e2, (a * 1e9) as i64, dr, dc)
            };
            pts.sort_by_key(key);
            let idx = |(dr, dc): (i64, i64)| -> Option<usize> {
                let r = dr + (h / 2) as i64;
                let c = dc + (w / 2) as i64;
                (r >= 0 && r < h as i64 && c >= 0 && c < w as i64).then(|| r as usize * w + c as usize)
            };
            let mut taken = 0;
            for &(dr, dc) in &pts {
                if taken == need {
                    break;
                }
                let i = idx((dr, dc)).expect("grid point");
                if mask.get(i) {
                    continue;
                }
                let partner = idx((-dr, -dc)).filter(|&j| j != i);
                match partner {
                    Some(j) if need - taken >= 2 => {
                        mask.set(i, true);
                        mask.set(j, true);
                        taken += 2;
                    }
                    _ => {
                        mask.set(i, true);
                        taken += 1;
                    }
                }
            }
        }
    }
    Ok(mask)
}

/// Tape version of [`to_kspace`] for a real `[H, W]` image node.
pub fn kspace_on_tape<T: Real>(tape: &Tape<T>, x: Var) -> Result<Var> {
    let shape = tape.shape(x);
    let [h, w] = shape[..] else {
        return Err(shape_err("to_kspace", format!("expected [H, W], got {shape:?}")));
    };
    let re = tape.reshape(x, &[1, 1, h, w])?;
    let im = tape.constant(Tensor::zeros(&[1, 1, h, w]))?;
    let c = tape.concat_channels(&[re, im])?;
    let c = tape.reshape(c, &[2, h, w])?;
    let y = tape.fft2(c)?;
    tape.fftshift(y, false)
}

/// Tape version of [`zero_fill`].
pub fn zero_fill_on_tape<T: Real>(tape: &Tape<T>, y_hat: Var) -> Result<Var> {
    let y = tape.fftshift(y_hat, true)?;
    tape.ifft2(y)
}

/// `ŷ = M ⊙ y` where `mask` is a `[K]` (line) or `[H, W]` (point) node.
pub fn apply_mask_on_tape<T: Real>(tape: &Tape<T>, y: Var, mask: Var, mode: SamplingMode) -> Result<Var> {
    let m2d = match mode {
        SamplingMode::Point => mask,
        SamplingMode::Line => {
            let rows = tape.shape(y)[1];
            tape.expand_rows(mask, rows)?
        }
    };
    tape.mask_complex(y, m2d)
}
