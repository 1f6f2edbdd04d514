use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use seqmri::forward::{
    acceleration, apply_mask, low_freq_mask, magnitude, to_image, to_kspace, zero_fill, AccelSpec, Mask,
    SamplingMode,
};
use seqmri::Tensor;

fn random_image(n: usize, seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::new(&[n, n], (0..n * n).map(|_| rng.gen::<f64>()).collect()).unwrap()
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Direct O(N^4) centred unitary DFT.
fn dft_oracle(x: &Tensor<f64>) -> Vec<f64> {
    let n = x.shape()[0];
    let mut out = vec![0.0; 2 * n * n];
    for u in 0..n {
        for v in 0..n {
            let (fu, fv) = (u as f64 - (n / 2) as f64, v as f64 - (n / 2) as f64);
            let (mut re, mut im) = (0.0, 0.0);
            for r in 0..n {
                for c in 0..n {
                    let ph = -2.0 * std::f64::consts::PI * (fu * r as f64 + fv * c as f64) / n as f64;
                    re += x.data()[r * n + c] * ph.cos();
                    im += x.data()[r * n + c] * ph.sin();
                }
            }
            out[u * n + v] = re / n as f64;
            out[n * n + u * n + v] = im / n as f64;
        }
    }
    out
}

#[test]
fn kspace_matches_direct_dft() {
    let x = random_image(8, 3);
    let y = to_kspace(&x).unwrap();
    assert!(max_abs_diff(y.data(), &dft_oracle(&x)) < 1e-12);
}

#[test]
fn constant_image_has_dc_only_spectrum() {
    let n = 16;
    let y = to_kspace(&Tensor::<f64>::full(&[n, n], 0.5)).unwrap();
    let dc = (n / 2) * n + n / 2;
    for (i, v) in y.data().iter().enumerate() {
        if i == dc {
            assert!((v - 0.5 * n as f64).abs() < 1e-12);
        } else {
            assert!(v.abs() < 1e-12, "index {i}: {v}");
        }
    }
}

#[test]
fn real_input_gives_hermitian_spectrum() {
    let n = 16;
    let y = to_kspace(&random_image(n, 9)).unwrap();
    let d = y.data();
    for r in 1..n {
        for c in 1..n {
            let (rr, cc) = (n - r, n - c);
            assert!((d[r * n + c] - d[rr * n + cc]).abs() < 1e-10);
            assert!((d[n * n + r * n + c] + d[n * n + rr * n + cc]).abs() < 1e-10);
        }
    }
}

#[test]
fn full_mask_reproduces_image() {
    let x = random_image(32, 4);
    let m = Mask::full(SamplingMode::Point, 32, 32);
    let xh = zero_fill(&apply_mask(&to_kspace(&x).unwrap(), &m).unwrap()).unwrap();
    assert!(max_abs_diff(magnitude(&xh).unwrap().data(), x.data()) < 1e-8);
}

#[test]
fn mask_extremes_and_idempotence() {
    let n = 16;
    let y = to_kspace(&random_image(n, 5)).unwrap();
    let full = apply_mask(&y, &Mask::full(SamplingMode::Line, n, n)).unwrap();
    assert_eq!(full.data(), y.data());
    let none = apply_mask(&y, &Mask::empty(SamplingMode::Point, n, n)).unwrap();
    assert!(none.data().iter().all(|&v| v == 0.0));
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let m = Mask::from_bits(SamplingMode::Point, n, n, (0..n * n).map(|_| rng.gen_bool(0.3)).collect()).unwrap();
    let once = apply_mask(&y, &m).unwrap();
    let twice = apply_mask(&once, &m).unwrap();
    assert_eq!(once.data(), twice.data());
    for i in 0..n * n {
        if m.get(i) {
            assert_eq!(once.data()[i], y.data()[i]);
            assert_eq!(once.data()[n * n + i], y.data()[n * n + i]);
        }
    }
}

#[test]
fn dc_only_mask_of_constant_image_is_constant() {
    let n = 16;
    let y = to_kspace(&Tensor::<f64>::full(&[n, n], 0.3)).unwrap();
    let mut m = Mask::empty(SamplingMode::Point, n, n);
    m.set((n / 2) * n + n / 2, true);
    let xh = zero_fill(&apply_mask(&y, &m).unwrap()).unwrap();
    let (re, im) = xh.data().split_at(n * n);
    assert!(re.iter().all(|v| (v - 0.3).abs() < 1e-12));
    assert!(im.iter().all(|v| v.abs() < 1e-12));
}

#[test]
fn line_mask_is_constant_along_columns() {
    let mut m = Mask::empty(SamplingMode::Line, 8, 8);
    m.set(3, true);
    let r = m.realize::<f64>();
    for row in 0..8 {
        for col in 0..8 {
            assert_eq!(r.data()[row * 8 + col], if col == 3 { 1.0 } else { 0.0 });
        }
    }
}

#[test]
fn acceleration_examples() {
    let mut m = Mask::empty(SamplingMode::Point, 64, 64);
    for i in 0..1024 {
        m.set(i * 4, true);
    }
    assert_eq!(acceleration(&m).unwrap(), 4.0);
    assert_eq!(acceleration(&Mask::full(SamplingMode::Point, 64, 64)).unwrap(), 1.0);
    let mut l = Mask::empty(SamplingMode::Line, 64, 64);
    for c in 0..16 {
        l.set(c * 4, true);
    }
    assert_eq!(acceleration(&l).unwrap(), 4.0);
    assert!(acceleration(&Mask::empty(SamplingMode::Line, 64, 64)).is_err());
}

#[test]
fn budget_arithmetic() {
    let p = AccelSpec::new(SamplingMode::Point, 64, 64, 4.0, 4).unwrap();
    assert_eq!((p.budget(), p.low_freq_budget()), (1024, 128));
    assert_eq!(p.step_budgets(), vec![224; 4]);
    let p3 = p.with_steps(3).unwrap();
    assert_eq!(p3.step_budgets(), vec![298, 298, 300]);
    let l = AccelSpec::new(SamplingMode::Line, 64, 64, 4.0, 2).unwrap();
    assert_eq!((l.budget(), l.low_freq_budget()), (16, 2));
    assert_eq!(l.step_budgets(), vec![7, 7]);
    assert!(AccelSpec::new(SamplingMode::Line, 64, 64, 4.0, 15).is_err());
    assert!(AccelSpec::new(SamplingMode::Point, 64, 64, 0.5, 1).is_err());
}

#[test]
fn low_freq_point_pattern() {
    let spec = AccelSpec::new(SamplingMode::Point, 64, 64, 4.0, 4).unwrap();
    let m = low_freq_mask(&spec).unwrap();
    assert_eq!(m.count(), 128);
    // 11x11 centred square is fully inside
    for r in 27..=37 {
        for c in 27..=37 {
            assert!(m.get(r * 64 + c), "({r},{c}) missing");
        }
    }
    let mut unpaired = 0;
    for r in 0..64usize {
        for c in 0..64usize {
            if m.get(r * 64 + c) {
                let (rr, cc) = (64 - r, 64 - c);
                if rr >= 64 || cc >= 64 || !m.get(rr * 64 + cc) {
                    unpaired += 1;
                }
            }
        }
    }
    assert!(unpaired <= 1, "{unpaired} points lack a conjugate partner");
}

#[test]
fn low_freq_line_pattern() {
    let spec = AccelSpec::new(SamplingMode::Line, 64, 64, 4.0, 1).unwrap();
    let m = low_freq_mask(&spec).unwrap();
    assert_eq!(m.indices(), vec![31, 32]);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn round_trip_and_parseval(seed in any::<u64>(), log_n in 2usize..6) {
        let n = 1 << log_n;
        let x = random_image(n, seed);
        let y = to_kspace(&x).unwrap();
        let back = to_image(&y).unwrap();
        let (re, im) = back.data().split_at(n * n);
        prop_assert!(max_abs_diff(re, x.data()) < 1e-10);
        prop_assert!(im.iter().all(|v| v.abs() < 1e-10));
        let ex: f64 = x.data().iter().map(|v| v * v).sum();
        let ey: f64 = y.data().iter().map(|v| v * v).sum();
        prop_assert!((ex - ey).abs() < 1e-10 * ex.max(1.0));
    }

    #[test]
    fn zero_fill_is_linear_and_unitary(seed in any::<u64>(), a in -3.0f64..3.0) {
        let n = 16;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut grid = || Tensor::new(&[2, n, n], (0..2 * n * n).map(|_| rng.gen::<f64>() - 0.5).collect()).unwrap();
        let (y1, y2) = (grid(), grid());
        let comb = Tensor::new(&[2, n, n], y1.data().iter().zip(y2.data()).map(|(p, q)| a * p + q).collect()).unwrap();
        let lhs = zero_fill(&comb).unwrap();
        let (z1, z2) = (zero_fill(&y1).unwrap(), zero_fill(&y2).unwrap());
        let rhs: Vec<f64> = z1.data().iter().zip(z2.data()).map(|(p, q)| a * p + q).collect();
        prop_assert!(max_abs_diff(lhs.data(), &rhs) < 1e-10);
        let e = |t: &Tensor<f64>| t.data().iter().map(|v| v * v).sum::<f64>();
        prop_assert!((e(&z1) - e(&y1)).abs() < 1e-10);
    }

    #[test]
    fn low_freq_budget_is_exact(accel in 1.5f64..12.0, steps in 1usize..5, point in any::<bool>()) {
        let mode = if point { SamplingMode::Point } else { SamplingMode::Line };
        if let Ok(spec) = AccelSpec::new(mode, 32, 32, accel, steps) {
            let m = low_freq_mask(&spec).unwrap();
            prop_assert_eq!(m.count(), spec.low_freq_budget());
            prop_assert_eq!(spec.low_freq_budget() + spec.step_budgets().iter().sum::<usize>(), spec.budget());
        }
    }
}
