//! Radix-2 complex FFT on split real/imaginary planes.

use crate::tensor::Real;

/// In-place unnormalized iterative Cooley-Tukey transform of length `n = re.len()`.
/// `inverse` flips the twiddle sign only; scaling is left to the caller.
pub(crate) fn fft_1d<T: Real>(re: &mut [T], im: &mut [T], inverse: bool) {
    let n = re.len();
    debug_assert!(n.is_power_of_two());
    debug_assert_eq!(im.len(), n);
    if n <= 1 {
        return;
    }
    let bits = n.trailing_zeros();
    for i in 0..n {
        let j = i.reverse_bits() >> (usize::BITS - bits);
        if j > i {
            re.swap(i, j);
            im.swap(i, j);
        }
    }
    let sign = if inverse { 1.0 } else { -1.0 };
    let mut len = 2;
    while len <= n {
        let half = len / 2;
        let step = sign * 2.0 * std::f64::consts::PI / len as f64;
        for k in 0..half {
            let (s, c) = (step * k as f64).sin_cos();
            let (wr, wi) = (T::c(c), T::c(s));
            let mut start = 0;
            while start < n {
                let a = start + k;
                let b = a + half;
                let tr = re[b] * wr - im[b] * wi;
                let ti = re[b] * wi + im[b] * wr;
                re[b] = re[a] - tr;
                im[b] = im[a] - ti;
                re[a] += tr;
                im[a] += ti;
                start += len;
            }
        }
        len <<= 1;
    }
}

/// Orthonormal 2D transform of an `h×w` plane pair in place.
pub(crate) fn fft_2d<T: Real>(re: &mut [T], im: &mut [T], h: usize, w: usize, inverse: bool) {
    for r in 0..h {
        fft_1d(&mut re[r * w..(r + 1) * w], &mut im[r * w..(r + 1) * w], inverse);
    }
    let mut cr = vec![T::zero(); h];
    let mut ci = vec![T::zero(); h];
    for c in 0..w {
        for r in 0..h {
            cr[r] = re[r * w + c];
            ci[r] = im[r * w + c];
        }
        fft_1d(&mut cr, &mut ci, inverse);
        for r in 0..h {
            re[r * w + c] = cr[r];
            im[r * w + c] = ci[r];
        }
    }
    let scale = T::c(1.0 / ((h * w) as f64).sqrt());
    for v in re.iter_mut().chain(im.iter_mut()) {
        *v *= scale;
    }
}

/// Applies [`fft_2d`] to every `[2, h, w]` block of a contiguous buffer.
pub(crate) fn fft_2d_blocks<T: Real>(data: &mut [T], h: usize, w: usize, inverse: bool) {
    let plane = h * w;
    for block in data.chunks_mut(2 * plane) {
        let (re, im) = block.split_at_mut(plane);
        fft_2d(re, im, h, w, inverse);
    }
}

/// Cyclic shift of every `h×w` plane by `(dy, dx)`.
pub(crate) fn roll_planes<T: Real>(data: &[T], h: usize, w: usize, dy: usize, dx: usize) -> Vec<T> {
    let plane = h * w;
    let mut out = vec![T::zero(); data.len()];
    for (src, dst) in data.chunks(plane).zip(out.chunks_mut(plane)) {
        for r in 0..h {
            let rr = (r + dy) % h;
            for c in 0..w {
                dst[rr * w + (c + dx) % w] = src[r * w + c];
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_dft(re: &[f64], im: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let n = re.len();
        let mut or = vec![0.0; n];
        let mut oi = vec![0.0; n];
        for k in 0..n {
            for t in 0..n {
                let a = -2.0 * std::f64::consts::PI * (k * t) as f64 / n as f64;
                or[k] += re[t] * a.cos() - im[t] * a.sin();
                oi[k] += re[t] * a.sin() + im[t] * a.cos();
            }
        }
        (or, oi)
    }

    #[test]
    fn matches_naive_dft() {
        let re: Vec<f64> = (0..16).map(|i| ((i * 7 % 5) as f64) - 1.3).collect();
        let im: Vec<f64> = (0..16).map(|i| ((i * 3 % 4) as f64) * 0.25).collect();
        let (er, ei) = naive_dft(&re, &im);
        let (mut r, mut i) = (re.clone(), im.clone());
        fft_1d(&mut r, &mut i, false);
        for k in 0..16 {
            assert!((r[k] - er[k]).abs() < 1e-10);
            assert!((i[k] - ei[k]).abs() < 1e-10);
        }
    }

    #[test]
    fn roll_round_trip() {
        let d: Vec<f64> = (0..32).map(f64::from).collect();
        let r = roll_planes(&d, 4, 8, 2, 4);
        assert_eq!(roll_planes(&r, 4, 8, 2, 4), d);
    }
}
