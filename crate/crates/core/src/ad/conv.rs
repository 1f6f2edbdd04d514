//! im2col convolution kernels backed by GEMM.

use crate::tensor::{gemm, Real, Tensor};

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    fn patch(&self) -> usize {
        self.cin * self.k * self.k
    }

    fn out_plane(&self) -> usize {
        self.ho * self.wo
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }
}

fn im2col<T: Real>(x: &[T], g: &ConvGeom, col: &mut [T]) {
    let (h, w, k, s, p) = (g.h as isize, g.w as isize, g.k, g.stride as isize, g.pad as isize);
    let plane = g.out_plane();
    for c in 0..g.cin {
        let xc = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let dst = &mut col[row * plane..(row + 1) * plane];
                for oi in 0..g.ho {
                    let ii = oi as isize * s + ki as isize - p;
                    let drow = &mut dst[oi * g.wo..(oi + 1) * g.wo];
                    if ii < 0 || ii >= h {
                        drow.fill(T::zero());
                        continue;
                    }
                    let src = &xc[ii as usize * g.w..(ii as usize + 1) * g.w];
                    for (oj, d) in drow.iter_mut().enumerate() {
                        let jj = oj as isize * s + kj as isize - p;
                        *d = if jj < 0 || jj >= w {
                            T::zero()
                        } else {
                            src[jj as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im<T: Real>(col: &[T], g: &ConvGeom, gx: &mut [T]) {
    let (h, w, k, s, p) = (g.h as isize, g.w as isize, g.k, g.stride as isize, g.pad as isize);
    let plane = g.out_plane();
    for c in 0..g.cin {
        let gxc = &mut gx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let src = &col[row * plane..(row + 1) * plane];
                for oi in 0..g.ho {
                    let ii = oi as isize * s + ki as isize - p;
                    if ii < 0 || ii >= h {
                        continue;
                    }
                    let dst = &mut gxc[ii as usize * g.w..(ii as usize + 1) * g.w];
                    for (oj, &v) in src[oi * g.wo..(oi + 1) * g.wo].iter().enumerate() {
                        let jj = oj as isize * s + kj as isize - p;
                        if jj >= 0 && jj < w {
                            dst[jj as usize] += v;
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn forward<T: Real>(x: &Tensor<T>, kernel: &Tensor<T>, g: &ConvGeom) -> Tensor<T> {
    let plane = g.out_plane();
    let mut out = vec![T::zero(); g.n * g.cout * plane];
    let mut col = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![T::zero(); g.patch() * plane]
    };
    let in_sz = g.cin * g.h * g.w;
    for b in 0..g.n {
        let xb = &x.data()[b * in_sz..(b + 1) * in_sz];
        let ob = &mut out[b * g.cout * plane..(b + 1) * g.cout * plane];
        if g.is_pointwise() {
            gemm(false, false, g.cout, g.patch(), plane, kernel.data(), xb, T::zero(), ob);
        } else {
            im2col(xb, g, &mut col);
            gemm(false, false, g.cout, g.patch(), plane, kernel.data(), &col, T::zero(), ob);
        }
    }
    Tensor::new(&[g.n, g.cout, g.ho, g.wo], out).expect("conv output shape")
}

/// Returns `(grad_input, grad_kernel)`, each only when requested.
pub(crate) fn backward<T: Real>(
    x: &Tensor<T>,
    kernel: &Tensor<T>,
    grad_out: &Tensor<T>,
    g: &ConvGeom,
    need_input: bool,
    need_kernel: bool,
) -> (Option<Tensor<T>>, Option<Tensor<T>>) {
    let plane = g.out_plane();
    let in_sz = g.cin * g.h * g.w;
    let mut gx = need_input.then(|| vec![T::zero(); g.n * in_sz]);
    let mut gk = need_kernel.then(|| vec![T::zero(); kernel.len()]);
    let mut col = vec![T::zero(); g.patch() * plane];
    for b in 0..g.n {
        let xb = &x.data()[b * in_sz..(b + 1) * in_sz];
        let gob = &grad_out.data()[b * g.cout * plane..(b + 1) * g.cout * plane];
        if let Some(gk) = gk.as_mut() {
            if g.is_pointwise() {
                gemm(false, true, g.cout, plane, g.patch(), gob, xb, T::one(), gk);
            } else {
                im2col(xb, g, &mut col);
                gemm(false, true, g.cout, plane, g.patch(), gob, &col, T::one(), gk);
            }
        }
        if let Some(gx) = gx.as_mut() {
            let gxb = &mut gx[b * in_sz..(b + 1) * in_sz];
            if g.is_pointwise() {
                gemm(true, false, g.patch(), g.cout, plane, kernel.data(), gob, T::one(), gxb);
            } else {
                gemm(true, false, g.patch(), g.cout, plane, kernel.data(), gob, T::zero(), &mut col);
                col2im(&col, g, gxb);
            }
        }
    }
    (
        gx.map(|d| Tensor::new(x.shape(), d).expect("conv grad input")),
        gk.map(|d| Tensor::new(kernel.shape(), d).expect("conv grad kernel")),
    )
}
