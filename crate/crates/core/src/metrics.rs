//! Image quality metrics, paired method comparison and orientation probes.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal, StudentsT};

use crate::ad::ssim::{self, SsimParams};
use crate::error::{arg_err, shape_err, Error, Result};
use crate::tensor::{Real, Tensor};

/// Mean windowed SSIM of `x` against `target` (data range = max of target).
pub fn ssim<T: Real>(x: &Tensor<T>, target: &Tensor<T>) -> Result<f64> {
    if x.shape() != target.shape() || x.rank() != 2 {
        return Err(shape_err("ssim", format!("{:?} vs {:?}", x.shape(), target.shape())));
    }
    let (h, w) = (x.shape()[0], x.shape()[1]);
    let p = SsimParams::default();
    if h < p.window || w < p.window {
        return Err(arg_err("ssim", "image smaller than window"));
    }
    let xs: Vec<f64> = x.data().iter().map(|v| v.f64()).collect();
    let ys: Vec<f64> = target.data().iter().map(|v| v.f64()).collect();
    let range = ys.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(range > 0.0) {
        return Err(arg_err("ssim", "data range (target maximum) must be > 0"));
    }
    Ok(ssim::plane_forward(&xs, &ys, h, w, range, &p).0)
}

/// PSNR in dB with the target maximum as peak; identical images give `+∞`.
pub fn psnr<T: Real>(x: &Tensor<T>, target: &Tensor<T>) -> Result<f64> {
    if x.shape() != target.shape() {
        return Err(shape_err("psnr", format!("{:?} vs {:?}", x.shape(), target.shape())));
    }
    let peak = target.max().f64();
    let mse = x
        .data()
        .iter()
        .zip(target.data())
        .map(|(a, b)| (a.f64() - b.f64()).powi(2))
        .sum::<f64>()
        / x.len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (peak * peak / mse).log10())
}

/// Per-image evaluation record.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageMetrics {
    pub index: usize,
    pub ssim: f64,
    pub psnr: f64,
    pub acceleration: f64,
}

pub fn write_metrics_csv<W: Write>(w: &mut W, rows: &[ImageMetrics]) -> Result<()> {
    writeln!(w, "index,ssim,psnr,acceleration")?;
    for r in rows {
        writeln!(w, "{},{},{},{}", r.index, r.ssim, r.psnr, r.acceleration)?;
    }
    Ok(())
}

pub fn read_metrics_csv<R: BufRead>(r: R) -> Result<Vec<ImageMetrics>> {
    let mut lines = r.lines();
    match lines.next().transpose()? {
        Some(h) if h.trim() == "index,ssim,psnr,acceleration" => {}
        _ => return Err(Error::Format("metrics CSV header missing".into())),
    }
    let mut out = Vec::new();
    for (n, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let bad = || Error::Format(format!("metrics CSV row {}: `{line}`", n + 2));
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 4 {
            return Err(bad());
        }
        out.push(ImageMetrics {
            index: f[0].trim().parse().map_err(|_| bad())?,
            ssim: f[1].trim().parse().map_err(|_| bad())?,
            psnr: f[2].trim().parse().map_err(|_| bad())?,
            acceleration: f[3].trim().parse().map_err(|_| bad())?,
        });
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub std: f64,
}

impl Summary {
    pub fn of(v: &[f64]) -> Self {
        let n = v.len() as f64;
        let mean = v.iter().sum::<f64>() / n;
        let std = if v.len() > 1 {
            (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Self { mean, std }
    }
}

/// Paired comparison of method A against method B.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub a: Vec<f64>,
    pub b: Vec<f64>,
    pub summary_a: Summary,
    pub summary_b: Summary,
    /// Share of images where A beats B, ties counting one half.
    pub percent_a_better: f64,
    pub t_statistic: f64,
    pub p_value: f64,
}

/// Samples above which the p-value uses the normal approximation.
pub const NORMAL_APPROX_ABOVE: usize = 30;

/// Paired t-test on `a − b` with a two-sided p-value.
pub fn paired_t_test(a: &[f64], b: &[f64]) -> Result<(f64, f64)> {
    if a.len() != b.len() {
        return Err(shape_err("compare", format!("{} vs {} paired values", a.len(), b.len())));
    }
    let n = a.len();
    if n < 2 {
        return Err(arg_err("compare", "need at least two pairs"));
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let s = Summary::of(&d);
    if s.std == 0.0 {
        return Ok(if s.mean == 0.0 {
            (0.0, 1.0)
        } else {
            (s.mean.signum() * f64::INFINITY, 0.0)
        });
    }
    let t = s.mean / (s.std / (n as f64).sqrt());
    let tail = if n > NORMAL_APPROX_ABOVE {
        1.0 - Normal::new(0.0, 1.0).expect("standard normal").cdf(t.abs())
    } else {
        let dist = StudentsT::new(0.0, 1.0, (n - 1) as f64).expect("dof > 0");
        1.0 - dist.cdf(t.abs())
    };
    Ok((t, (2.0 * tail).min(1.0)))
}

pub fn compare(a: &[f64], b: &[f64]) -> Result<ComparisonReport> {
    let (t, p) = paired_t_test(a, b)?;
    let wins: f64 = a
        .iter()
        .zip(b)
        .map(|(x, y)| {
            if x > y {
                1.0
            } else if x == y {
                0.5
            } else {
                0.0
            }
        })
        .sum();
    Ok(ComparisonReport {
        a: a.to_vec(),
        b: b.to_vec(),
        summary_a: Summary::of(a),
        summary_b: Summary::of(b),
        percent_a_better: 100.0 * wins / a.len() as f64,
        t_statistic: t,
        p_value: p,
    })
}

impl ComparisonReport {
    /// One header line and one value line.
    pub fn write_csv<W: Write>(&self, w: &mut W) -> Result<()> {
        writeln!(w, "n,mean_a,std_a,mean_b,std_b,percent_a_better,t_statistic,p_value")?;
        writeln!(
            w,
            "{},{},{},{},{},{},{},{}",
            self.a.len(),
            self.summary_a.mean,
            self.summary_a.std,
            self.summary_b.mean,
            self.summary_b.std,
            self.percent_a_better,
            self.t_statistic,
            self.p_value
        )?;
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Bin {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
}

/// Equal-width histogram over `[lo, hi]`; values outside are clamped into
/// the edge bins.
pub fn histogram(values: &[f64], bins: usize, lo: f64, hi: f64) -> Result<Vec<Bin>> {
    if bins == 0 || !(hi > lo) {
        return Err(arg_err("histogram", "need bins >= 1 and hi > lo"));
    }
    let width = (hi - lo) / bins as f64;
    let mut out: Vec<Bin> = (0..bins)
        .map(|i| Bin {
            lo: lo + i as f64 * width,
            hi: lo + (i + 1) as f64 * width,
            count: 0,
        })
        .collect();
    for &v in values {
        let i = (((v - lo) / width).floor().max(0.0) as usize).min(bins - 1);
        out[i].count += 1;
    }
    Ok(out)
}

pub fn write_histogram_csv<W: Write>(w: &mut W, bins: &[Bin]) -> Result<()> {
    writeln!(w, "lo,hi,count")?;
    for b in bins {
        writeln!(w, "{},{},{}", b.lo, b.hi, b.count)?;
    }
    Ok(())
}

/// Dominant direction of a weighted point cloud on a centred frequency grid.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Axis {
    /// Orientation in `[0, π)`, counter-clockwise from the `+x` (column) axis.
    pub angle: f64,
    /// `(λ₁ − λ₂) / (λ₁ + λ₂)` of the second-moment matrix.
    pub anisotropy: f64,
}

/// Principal axis of the second moments of `weights` (`[H, W]`, row-major)
/// about the DC position `(H/2, W/2)`, with rows increasing downwards.
pub fn principal_axis(weights: &[f64], h: usize, w: usize) -> Result<Axis> {
    if weights.len() != h * w {
        return Err(shape_err("principal_axis", "weights do not match extents"));
    }
    let (mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0);
    for r in 0..h {
        let fy = (h / 2) as f64 - r as f64;
        for c in 0..w {
            let fx = c as f64 - (w / 2) as f64;
            let m = weights[r * w + c];
            sxx += m * fx * fx;
            syy += m * fy * fy;
            sxy += m * fx * fy;
        }
    }
    let tr = sxx + syy;
    if !(tr > 0.0) {
        return Err(arg_err("principal_axis", "no weight away from DC"));
    }
    let mut angle = 0.5 * (2.0 * sxy).atan2(sxx - syy);
    if angle < 0.0 {
        angle += std::f64::consts::PI;
    }
    let gap = ((sxx - syy).powi(2) + 4.0 * sxy * sxy).sqrt();
    Ok(Axis {
        angle,
        anisotropy: gap / tr,
    })
}

/// Principal axis of the power spectrum `|F(x)|²` of a real image.
pub fn spectrum_axis<T: Real>(image: &Tensor<T>) -> Result<Axis> {
    let y = crate::forward::to_kspace(&image.cast::<f64>())?;
    let (h, w) = (image.shape()[0], image.shape()[1]);
    let (re, im) = y.data().split_at(h * w);
    let power: Vec<f64> = re.iter().zip(im).map(|(a, b)| a * a + b * b).collect();
    principal_axis(&power, h, w)
}

/// Signed difference of two axial angles folded into `(−π/2, π/2]`.
pub fn axial_difference(a: f64, b: f64) -> f64 {
    let pi = std::f64::consts::PI;
    let mut d = (a - b) % pi;
    if d > pi / 2.0 {
        d -= pi;
    } else if d <= -pi / 2.0 {
        d += pi;
    }
    d
}

fn circular_mean(a: &[f64]) -> f64 {
    let s: f64 = a.iter().map(|v| v.sin()).sum();
    let c: f64 = a.iter().map(|v| v.cos()).sum();
    s.atan2(c)
}

/// Circular correlation of two samples of axial angles (period π),
/// computed on doubled angles. Returns 0 when either sample has no spread.
pub fn axial_correlation(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(shape_err("axial_correlation", "need equal-length non-empty samples"));
    }
    let a2: Vec<f64> = a.iter().map(|v| 2.0 * v).collect();
    let b2: Vec<f64> = b.iter().map(|v| 2.0 * v).collect();
    let (ma, mb) = (circular_mean(&a2), circular_mean(&b2));
    let (mut num, mut da, mut db) = (0.0, 0.0, 0.0);
    for (x, y) in a2.iter().zip(&b2) {
        let (sa, sb) = ((x - ma).sin(), (y - mb).sin());
        num += sa * sb;
        da += sa * sa;
        db += sb * sb;
    }
    if da <= 1e-12 || db <= 1e-12 {
        return Ok(0.0);
    }
    Ok(num / (da * db).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn psnr_sentinel_and_value() {
        let x = Tensor::<f64>::from_f64(&[2, 2], &[1.0, 0.0, 0.0, 0.0]).unwrap();
        assert_eq!(psnr(&x, &x).unwrap(), f64::INFINITY);
        let y = Tensor::from_f64(&[2, 2], &[0.9, 0.0, 0.0, 0.0]).unwrap();
        // mse = 0.01 / 4
        assert!((psnr(&y, &x).unwrap() - 10.0 * (4.0f64 / 0.01).log10()).abs() < 1e-12);
    }

    #[test]
    fn metrics_csv_round_trip() {
        let rows = vec![
            ImageMetrics {
                index: 3,
                ssim: 0.91,
                psnr: f64::INFINITY,
                acceleration: 4.0,
            },
            ImageMetrics {
                index: 7,
                ssim: -0.25,
                psnr: 21.5,
                acceleration: 3.996,
            },
        ];
        let mut buf = Vec::new();
        write_metrics_csv(&mut buf, &rows).unwrap();
        assert_eq!(read_metrics_csv(&buf[..]).unwrap(), rows);
        assert!(read_metrics_csv(&b"a,b\n"[..]).is_err());
    }

    #[test]
    fn histogram_counts() {
        let h = histogram(&[0.0, 0.1, 0.5, 0.99, 2.0, -1.0], 4, 0.0, 1.0).unwrap();
        assert_eq!(h.iter().map(|b| b.count).collect::<Vec<_>>(), vec![3, 0, 1, 2]);
    }

    #[test]
    fn axis_of_line_weights() {
        let (h, w) = (16, 16);
        let mut m = vec![0.0; h * w];
        // horizontal line through DC
        for c in 0..w {
            m[8 * w + c] = 1.0;
        }
        let a = principal_axis(&m, h, w).unwrap();
        assert!(a.angle.abs() < 1e-12 || (a.angle - std::f64::consts::PI).abs() < 1e-12);
        let mut d = vec![0.0; h * w];
        for i in 0..16 {
            d[i * w + i] = 1.0;
        }
        // main diagonal runs down-right, i.e. at -45° which is 135° axially
        let a = principal_axis(&d, h, w).unwrap();
        assert!((a.angle - 0.75 * std::f64::consts::PI).abs() < 1e-12);
        assert!(axial_difference(0.1, std::f64::consts::PI - 0.1).abs() - 0.2 < 1e-12);
    }

    #[test]
    fn axial_correlation_extremes() {
        let a: Vec<f64> = (0..50).map(|i| i as f64 * 0.06).collect();
        assert!((axial_correlation(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        let shifted: Vec<f64> = a.iter().map(|v| v + 1.0).collect();
        assert!((axial_correlation(&a, &shifted).unwrap() - 1.0).abs() < 1e-12);
        let flat = vec![0.3; 50];
        assert_eq!(axial_correlation(&a, &flat).unwrap(), 0.0);
    }
}
