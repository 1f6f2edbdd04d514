//! Windowed SSIM with a uniform box window, following the fastMRI loss
//! conventions (sample covariance normalisation, valid windows only).

use crate::tensor::Real;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SsimParams {
    pub window: usize,
    pub k1: f64,
    pub k2: f64,
}

impl Default for SsimParams {
    fn default() -> Self {
        Self {
            window: 7,
            k1: 0.01,
            k2: 0.03,
        }
    }
}

/// Per-window partial derivatives of the local SSIM w.r.t. the local means
/// `E[x]`, `E[x²]` and `E[xy]`, kept for the backward pass.
#[derive(Clone, Debug)]
pub(crate) struct SsimPlaneAux<T> {
    d_ux: Vec<T>,
    d_uxx: Vec<T>,
    d_uxy: Vec<T>,
}

/// Box mean over every valid `win×win` window (separable).
fn box_mean<T: Real>(src: &[T], h: usize, w: usize, win: usize) -> Vec<T> {
    let (ho, wo) = (h - win + 1, w - win + 1);
    let mut rows = vec![T::zero(); h * wo];
    for r in 0..h {
        let line = &src[r * w..(r + 1) * w];
        for c in 0..wo {
            rows[r * wo + c] = line[c..c + win].iter().copied().sum();
        }
    }
    let norm = T::c(1.0 / (win * win) as f64);
    let mut out = vec![T::zero(); ho * wo];
    for r in 0..ho {
        for c in 0..wo {
            let mut s = T::zero();
            for k in 0..win {
                s += rows[(r + k) * wo + c];
            }
            out[r * wo + c] = s * norm;
        }
    }
    out
}

/// Adjoint of [`box_mean`]: scatters window values back onto pixels.
fn box_mean_adjoint<T: Real>(src: &[T], h: usize, w: usize, win: usize) -> Vec<T> {
    let (ho, wo) = (h - win + 1, w - win + 1);
    let norm = T::c(1.0 / (win * win) as f64);
    let mut cols = vec![T::zero(); h * wo];
    for r in 0..ho {
        for c in 0..wo {
            let v = src[r * wo + c] * norm;
            for k in 0..win {
                cols[(r + k) * wo + c] += v;
            }
        }
    }
    let mut out = vec![T::zero(); h * w];
    for r in 0..h {
        for c in 0..wo {
            let v = cols[r * wo + c];
            for k in 0..win {
                out[r * w + c + k] += v;
            }
        }
    }
    out
}

/// Mean local SSIM of one plane plus the aux data for [`plane_backward`].
pub(crate) fn plane_forward<T: Real>(
    x: &[T],
    y: &[T],
    h: usize,
    w: usize,
    data_range: T,
    p: &SsimParams,
) -> (T, SsimPlaneAux<T>) {
    let win = p.window;
    let np = (win * win) as f64;
    let cov_norm = T::c(np / (np - 1.0));
    let c1 = (T::c(p.k1) * data_range).powi(2);
    let c2 = (T::c(p.k2) * data_range).powi(2);
    let two = T::c(2.0);

    let xx: Vec<T> = x.iter().map(|&v| v * v).collect();
    let yy: Vec<T> = y.iter().map(|&v| v * v).collect();
    let xy: Vec<T> = x.iter().zip(y).map(|(&a, &b)| a * b).collect();
    let ux = box_mean(x, h, w, win);
    let uy = box_mean(y, h, w, win);
    let uxx = box_mean(&xx, h, w, win);
    let uyy = box_mean(&yy, h, w, win);
    let uxy = box_mean(&xy, h, w, win);

    let n = ux.len();
    let mut d_ux = vec![T::zero(); n];
    let mut d_uxx = vec![T::zero(); n];
    let mut d_uxy = vec![T::zero(); n];
    let mut total = T::zero();
    let inv_n = T::c(1.0 / n as f64);
    for i in 0..n {
        let (mx, my) = (ux[i], uy[i]);
        let vx = cov_norm * (uxx[i] - mx * mx);
        let vy = cov_norm * (uyy[i] - my * my);
        let vxy = cov_norm * (uxy[i] - mx * my);
        let a1 = two * mx * my + c1;
        let a2 = two * vxy + c2;
        let b1 = mx * mx + my * my + c1;
        let b2 = vx + vy + c2;
        let s = (a1 * a2) / (b1 * b2);
        total += s;

        let ds_a1 = a2 / (b1 * b2);
        let ds_a2 = a1 / (b1 * b2);
        let ds_b1 = -s / b1;
        let ds_b2 = -s / b2;
        d_ux[i] = (ds_a1 * two * my - ds_a2 * two * cov_norm * my + ds_b1 * two * mx
            - ds_b2 * two * cov_norm * mx)
            * inv_n;
        d_uxx[i] = ds_b2 * cov_norm * inv_n;
        d_uxy[i] = ds_a2 * two * cov_norm * inv_n;
    }
    (total / T::c(n as f64), SsimPlaneAux { d_ux, d_uxx, d_uxy })
}

/// Gradient of the plane's mean SSIM w.r.t. `x`, scaled by `upstream`.
pub(crate) fn plane_backward<T: Real>(
    x: &[T],
    y: &[T],
    h: usize,
    w: usize,
    aux: &SsimPlaneAux<T>,
    win: usize,
    upstream: T,
) -> Vec<T> {
    let gux = box_mean_adjoint(&aux.d_ux, h, w, win);
    let guxx = box_mean_adjoint(&aux.d_uxx, h, w, win);
    let guxy = box_mean_adjoint(&aux.d_uxy, h, w, win);
    let two = T::c(2.0);
    (0..h * w)
        .map(|i| upstream * (gux[i] + two * x[i] * guxx[i] + y[i] * guxy[i]))
        .collect()
}
