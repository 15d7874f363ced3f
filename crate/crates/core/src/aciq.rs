//! Analytical clipping (ACIQ) under a Gaussian weight model.
//!
//! The clip threshold `alpha` is the root of the derivative of the expected
//! clipping-plus-rounding error with respect to `alpha`:
//!
//! ```text
//! f(alpha) = alpha (1 - erf(alpha / (sqrt(2) sigma)))
//!          - 2 sigma / sqrt(2 pi) exp(-alpha^2 / (2 sigma^2))
//!          + 2 alpha / (3 * 2^(2k))
//! ```
//!
//! `f` is negative near zero, positive for large `alpha`, and homogeneous of
//! degree one in `(alpha, sigma)`, so the root scales linearly with `sigma`.
//! It is found by bisection on `[1e-6 sigma, 20 sigma]`.

use serde::{Deserialize, Serialize};

use crate::error::{PtqError, Result};
use crate::quant::{self, check_finite, Bits, Method, QuantParams, QuantizedTensor, Tensor};

pub const BRACKET_LO: f64 = 1e-6;
pub const BRACKET_HI: f64 = 20.0;
pub const MAX_ITERATIONS: u32 = 200;
/// Default bracket-width tolerance, relative to sigma.
pub const DEFAULT_REL_TOL: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClipSolution {
    pub alpha: f64,
    pub sigma: f64,
    pub bits: Bits,
    /// `|f(alpha)|` at the returned root.
    pub residual: f64,
    pub iterations: u32,
    /// Final bracket; `f(lo) <= 0 <= f(hi)`.
    pub bracket: (f64, f64),
}

/// Population standard deviation, two-pass.
pub fn estimate_sigma(x: &[f32]) -> Result<f64> {
    if x.len() < 2 {
        return Err(PtqError::InvalidArgument(format!(
            "sigma needs at least 2 elements, got {}",
            x.len()
        )));
    }
    let n = x.len() as f64;
    let mean = x.iter().map(|&v| v as f64).sum::<f64>() / n;
    let var = x
        .iter()
        .map(|&v| {
            let d = v as f64 - mean;
            d * d
        })
        .sum::<f64>()
        / n;
    Ok(var.sqrt())
}

pub fn aciq_objective_derivative(alpha: f64, sigma: f64, bits: Bits) -> Result<f64> {
    if !(alpha > 0.0 && sigma > 0.0) {
        return Err(PtqError::InvalidArgument(format!(
            "alpha and sigma must be positive, got alpha={alpha}, sigma={sigma}"
        )));
    }
    Ok(objective(alpha, sigma, bits))
}

fn objective(alpha: f64, sigma: f64, bits: Bits) -> f64 {
    use std::f64::consts::{PI, SQRT_2};
    let clip = alpha * (1.0 - libm::erf(alpha / (SQRT_2 * sigma)));
    let density = 2.0 * sigma / (2.0 * PI).sqrt() * (-alpha * alpha / (2.0 * sigma * sigma)).exp();
    let rounding = 2.0 * alpha / (3.0 * 4f64.powi(bits.get() as i32));
    clip - density + rounding
}

pub fn solve_alpha(sigma: f64, bits: Bits) -> Result<ClipSolution> {
    solve_alpha_with_tol(sigma, bits, DEFAULT_REL_TOL * sigma)
}

/// Bisection stops once the bracket is narrower than `tol` or after
/// [`MAX_ITERATIONS`] halvings.
pub fn solve_alpha_with_tol(sigma: f64, bits: Bits, tol: f64) -> Result<ClipSolution> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(PtqError::InvalidArgument(format!("sigma must be positive, got {sigma}")));
    }
    if !(tol > 0.0) {
        return Err(PtqError::InvalidArgument(format!("tolerance must be positive, got {tol}")));
    }
    let (mut lo, mut hi) = (BRACKET_LO * sigma, BRACKET_HI * sigma);
    let (f_lo, f_hi) = (objective(lo, sigma, bits), objective(hi, sigma, bits));
    if !(f_lo < 0.0 && f_hi > 0.0) {
        return Err(PtqError::NoSignChange { lo, hi, f_lo, f_hi });
    }
    let mut iterations = 0;
    while hi - lo > tol && iterations < MAX_ITERATIONS {
        let mid = 0.5 * (lo + hi);
        let f_mid = objective(mid, sigma, bits);
        if f_mid == 0.0 {
            lo = mid;
            hi = mid;
        } else if f_mid < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
        iterations += 1;
    }
    let alpha = 0.5 * (lo + hi);
    Ok(ClipSolution {
        alpha,
        sigma,
        bits,
        residual: objective(alpha, sigma, bits).abs(),
        iterations,
        bracket: (lo, hi),
    })
}

/// Clip to `[-alpha, alpha]`, then quantize with step `alpha / (2^(k-1) - 1)`.
///
/// A constant tensor has no spread to model; it is quantized with plain LQ
/// and the result carries `Method::Lq`.
pub fn quantize_aciq(x: &Tensor, bits: Bits) -> Result<QuantizedTensor> {
    check_finite(&x.data)?;
    let sigma = estimate_sigma(&x.data)?;
    if sigma == 0.0 {
        return quant::quantize_lq(x, bits);
    }
    let clip = solve_alpha(sigma, bits)?;
    let alpha = clip.alpha;
    let step = quant::compute_step(alpha, bits)?;
    let clipped: Vec<f64> = x.data.iter().map(|&v| (v as f64).clamp(-alpha, alpha)).collect();
    Ok(QuantizedTensor {
        name: String::new(),
        codes: quant::quantize_with_step(&clipped, step, bits),
        shape: x.shape.clone(),
        params: QuantParams {
            bits,
            step,
            clip_alpha: Some(alpha as f32),
        },
        method: Method::Aciq,
        original_shape: x.shape.clone(),
        split_map: None,
        clip: Some(clip),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quant::{dequantize, mse, quantize_lq, quantize_with_step};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn bits(k: u32) -> Bits {
        Bits::new(k).unwrap()
    }

    fn gaussian(seed: u64, n: usize) -> Vec<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| rng.sample::<f32, _>(StandardNormal)).collect()
    }

    #[test]
    fn sigma_examples() {
        assert_eq!(estimate_sigma(&[-1.0, 1.0]).unwrap(), 1.0);
        assert_eq!(estimate_sigma(&[3.5; 10]).unwrap(), 0.0);
        assert!(estimate_sigma(&[1.0]).is_err());
        let s = estimate_sigma(&gaussian(11, 1_000_000)).unwrap();
        assert!((s - 1.0).abs() < 0.01, "{s}");
    }

    #[test]
    fn erf_accuracy() {
        // reference values of erf to 16 digits
        for (x, want) in [
            (0.1, 0.1124629160182849),
            (0.5, 0.5204998778130465),
            (1.0, 0.8427007929497149),
            (2.0, 0.9953222650189527),
            (3.5, 0.9999992569016276),
        ] {
            assert!((libm::erf(x) - want).abs() < 1e-7);
        }
    }

    #[test]
    fn objective_signs() {
        for k in 2..=8 {
            let f0 = aciq_objective_derivative(1e-9, 1.0, bits(k)).unwrap();
            assert!(f0 < 0.0);
            assert!((f0 + 2.0 / (2.0 * std::f64::consts::PI).sqrt()).abs() < 1e-6);
        }
        assert!(aciq_objective_derivative(40.0, 1.0, bits(4)).unwrap() > 0.0);
        assert!(aciq_objective_derivative(0.0, 1.0, bits(4)).is_err());
        assert!(aciq_objective_derivative(1.0, -1.0, bits(4)).is_err());
    }

    #[test]
    fn objective_is_homogeneous() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let a = rng.random_range(0.01..10.0);
            let s = rng.random_range(0.1..5.0);
            let k = bits(rng.random_range(2..=8));
            let f = aciq_objective_derivative(a, s, k).unwrap();
            for c in [0.5, 2.0, 10.0] {
                let g = aciq_objective_derivative(c * a, c * s, k).unwrap();
                assert!((g - c * f).abs() <= 1e-12 * (1.0 + c * f.abs()), "{g} vs {}", c * f);
            }
        }
    }

    #[test]
    fn root_is_bracketed() {
        for k in 2..=8 {
            let sol = solve_alpha(1.0, bits(k)).unwrap();
            assert!(sol.residual <= 1e-8, "k={k} residual {}", sol.residual);
            assert!(sol.alpha > 0.0 && sol.alpha <= 20.0);
            let (lo, hi) = sol.bracket;
            assert!(objective(lo, 1.0, bits(k)) <= 0.0 && objective(hi, 1.0, bits(k)) >= 0.0);
            assert!(sol.iterations <= MAX_ITERATIONS);
        }
    }

    #[test]
    fn alpha_scales_with_sigma() {
        for k in [2, 4, 8] {
            let base = solve_alpha(1.0, bits(k)).unwrap().alpha;
            for c in [0.1, 3.0, 100.0] {
                let a = solve_alpha(c, bits(k)).unwrap().alpha;
                assert!(((a - c * base) / (c * base)).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn alpha_increases_with_bits() {
        let alphas: Vec<f64> = (2..=8).map(|k| solve_alpha(1.0, bits(k)).unwrap().alpha).collect();
        assert!(alphas.windows(2).all(|w| w[0] < w[1]), "{alphas:?}");
    }

    #[test]
    fn solver_errors() {
        assert!(solve_alpha(0.0, bits(4)).is_err());
        assert!(solve_alpha_with_tol(1.0, bits(4), 0.0).is_err());
    }

    #[test]
    fn clipping_beats_plain_lq_on_outlier() {
        let mut x = gaussian(5, 4096);
        x[17] = 50.0;
        let t = Tensor::from_vec(x);
        let lq = mse(&t.data, &dequantize(&quantize_lq(&t, bits(3)).unwrap()).data).unwrap();
        let aq = mse(&t.data, &dequantize(&quantize_aciq(&t, bits(3)).unwrap()).data).unwrap();
        assert!(aq < lq, "{aq} >= {lq}");
    }

    #[test]
    fn no_clipping_when_range_fits() {
        // alpha* ~ 3.77 sigma at k=8, well above max|x| of this tensor
        let t = Tensor::from_vec(vec![-1.0, -0.4, 0.0, 0.3, 1.0]);
        let q = quantize_aciq(&t, bits(8)).unwrap();
        let alpha = q.params.clip_alpha.unwrap();
        assert!(alpha > 1.0);
        assert_eq!(q.codes, quantize_with_step(&t.data, q.params.step, bits(8)));
        let back = dequantize(&q).data;
        for (x, y) in t.data.iter().zip(&back) {
            assert!((x - y).abs() <= q.params.step / 2.0);
        }
    }

    #[test]
    fn clipped_error_decomposition() {
        let mut x = gaussian(9, 2000);
        x[0] = 9.0;
        x[1] = -7.5;
        let t = Tensor::from_vec(x);
        let q = quantize_aciq(&t, bits(4)).unwrap();
        let alpha = q.params.clip_alpha.unwrap() as f64;
        let half = q.params.step as f64 / 2.0 + 1e-6;
        for (&v, &r) in t.data.iter().zip(&dequantize(&q).data) {
            let (v, err) = (v as f64, (v - r).abs() as f64);
            if v.abs() <= alpha {
                assert!(err <= half);
            } else {
                assert!(err <= v.abs() - alpha + half);
            }
        }
    }

    #[test]
    fn constant_tensor_falls_back() {
        let q = quantize_aciq(&Tensor::from_vec(vec![0.25; 8]), bits(4)).unwrap();
        assert_eq!(q.method, Method::Lq);
        assert!(dequantize(&q).data.iter().all(|&v| (v - 0.25).abs() < 1e-6));
    }
}
