//! Symmetric linear quantization onto a signed grid of `2^k - 1` levels.
//!
//! Codes live in `[-(2^(k-1) - 1), 2^(k-1) - 1]`, the step is
//! `max|x| / (2^(k-1) - 1)` and dequantization is `code * step`. Rounding is
//! half away from zero so that negating the input negates the codes.
//!
//! The stored f32 step keeps only `24 - (k - 1)` significant bits. Every
//! `code * step` product is then exact in f32: dequantized values sit exactly
//! on the grid, and re-quantizing them recovers the same step and codes.

use serde::{Deserialize, Serialize};

use crate::error::{PtqError, Result};
use crate::ocs::SplitMap;

/// Quantization bit width, `2..=8`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "u32", into = "u32")]
pub struct Bits(u8);

impl Bits {
    pub const MIN: u32 = 2;
    pub const MAX: u32 = 8;

    pub fn new(bits: u32) -> Result<Self> {
        if (Self::MIN..=Self::MAX).contains(&bits) {
            Ok(Bits(bits as u8))
        } else {
            Err(PtqError::BitsOutOfRange(bits))
        }
    }

    pub fn get(self) -> u32 {
        self.0 as u32
    }

    /// Largest code magnitude, `2^(k-1) - 1`.
    pub fn max_code(self) -> i32 {
        (1 << (self.0 - 1)) - 1
    }

    /// Number of grid levels, `2^k - 1`.
    pub fn levels(self) -> u32 {
        (1u32 << self.0) - 1
    }
}

impl TryFrom<u32> for Bits {
    type Error = PtqError;
    fn try_from(v: u32) -> Result<Self> {
        Bits::new(v)
    }
}

impl From<Bits> for u32 {
    fn from(b: Bits) -> u32 {
        b.get()
    }
}

impl std::fmt::Display for Bits {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        self.0.fmt(f)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Lq,
    Aciq,
    OcsNaive,
    OcsQa,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Lq, Method::Aciq, Method::OcsNaive, Method::OcsQa];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Lq => "lq",
            Method::Aciq => "aciq",
            Method::OcsNaive => "ocs_naive",
            Method::OcsQa => "ocs_qa",
        }
    }

    pub fn is_ocs(self) -> bool {
        matches!(self, Method::OcsNaive | Method::OcsQa)
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Method {
    type Err = PtqError;
    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| PtqError::InvalidArgument(format!("unknown method {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuantParams {
    pub bits: Bits,
    pub step: f32,
    /// Present only when the range came from ACIQ clipping.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub clip_alpha: Option<f32>,
}

impl QuantParams {
    pub fn scheme(&self) -> &'static str {
        "symmetric"
    }
}

/// A dense float tensor with a row-major shape.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(PtqError::ShapeMismatch(format!(
                "shape {shape:?} holds {n} elements, data has {}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn from_vec(data: Vec<f32>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedTensor {
    pub name: String,
    pub codes: Vec<i8>,
    /// Shape of `codes`; differs from `original_shape` only after OCS.
    pub shape: Vec<usize>,
    pub params: QuantParams,
    pub method: Method,
    pub original_shape: Vec<usize>,
    pub split_map: Option<SplitMap>,
    pub clip: Option<crate::aciq::ClipSolution>,
}

impl QuantizedTensor {
    pub fn with_name(mut self, name: impl Into<String>) -> Self {
        self.name = name.into();
        self
    }

    /// Checks the code range and shape bookkeeping.
    pub fn validate(&self) -> Result<()> {
        let n: usize = self.shape.iter().product();
        if n != self.codes.len() {
            return Err(PtqError::ShapeMismatch(format!(
                "codes shape {:?} vs {} codes",
                self.shape,
                self.codes.len()
            )));
        }
        let q = self.params.bits.max_code();
        if let Some(i) = self.codes.iter().position(|&c| (c as i32).abs() > q) {
            return Err(PtqError::InvalidArgument(format!(
                "code {} at {i} outside +/-{q}",
                self.codes[i]
            )));
        }
        if !self.method.is_ocs() && (self.split_map.is_some() || self.shape != self.original_shape) {
            return Err(PtqError::InconsistentSplitMap(
                "non-OCS tensor carries a split".into(),
            ));
        }
        Ok(())
    }
}

fn significant_bits(bits: Bits) -> u32 {
    24 - (bits.get() - 1)
}

/// Rounds a positive finite f64 to an f32 with `sig` significant bits.
fn round_to_significant(x: f64, sig: u32) -> f32 {
    if x == 0.0 || !x.is_finite() {
        return x as f32;
    }
    let exp = x.abs().log2().floor() as i32;
    let scale = 2f64.powi(sig as i32 - 1 - exp);
    let r = (x * scale).round() / scale;
    r as f32
}

/// Grid step for a symmetric range `[-max_abs, max_abs]` at `bits`.
pub fn compute_step(max_abs: f64, bits: Bits) -> Result<f32> {
    if !(max_abs.is_finite() && max_abs >= 0.0) {
        return Err(PtqError::InvalidArgument(format!(
            "max_abs must be finite and non-negative, got {max_abs}"
        )));
    }
    Ok(round_to_significant(
        max_abs / bits.max_code() as f64,
        significant_bits(bits),
    ))
}

pub(crate) fn check_finite<T: Copy + Into<f64>>(x: &[T]) -> Result<()> {
    match x.iter().position(|&v| !v.into().is_finite()) {
        Some(index) => Err(PtqError::NonFinite { index }),
        None => Ok(()),
    }
}

pub(crate) fn max_abs<T: Copy + Into<f64>>(x: &[T]) -> f64 {
    x.iter().fold(0.0f64, |m, &v| m.max(v.into().abs()))
}

/// Rounds `x / step` half away from zero and clamps to the grid.
pub fn quantize_with_step<T: Copy + Into<f64>>(x: &[T], step: f32, bits: Bits) -> Vec<i8> {
    if step == 0.0 {
        return vec![0; x.len()];
    }
    let q = bits.max_code() as f64;
    let step = step as f64;
    x.iter()
        .map(|&v| (v.into() / step).round().clamp(-q, q) as i8)
        .collect()
}

pub fn quantize_lq(x: &Tensor, bits: Bits) -> Result<QuantizedTensor> {
    check_finite(&x.data)?;
    let step = compute_step(max_abs(&x.data), bits)?;
    Ok(QuantizedTensor {
        name: String::new(),
        codes: quantize_with_step(&x.data, step, bits),
        shape: x.shape.clone(),
        params: QuantParams {
            bits,
            step,
            clip_alpha: None,
        },
        method: Method::Lq,
        original_shape: x.shape.clone(),
        split_map: None,
        clip: None,
    })
}

pub fn dequantize_codes(codes: &[i8], step: f32) -> Vec<f32> {
    codes.iter().map(|&c| c as f32 * step).collect()
}

/// `codes * step` at the codes' shape; OCS tensors come back expanded.
pub fn dequantize(q: &QuantizedTensor) -> Tensor {
    Tensor {
        shape: q.shape.clone(),
        data: dequantize_codes(&q.codes, q.params.step),
    }
}

pub fn mse(a: &[f32], b: &[f32]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(PtqError::ShapeMismatch(format!(
            "{} vs {} elements",
            a.len(),
            b.len()
        )));
    }
    if a.is_empty() {
        return Ok(0.0);
    }
    let sum: f64 = a
        .iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum();
    Ok(sum / a.len() as f64)
}

pub fn mean_square(x: &[f32]) -> f64 {
    if x.is_empty() {
        return 0.0;
    }
    x.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>() / x.len() as f64
}

/// `10 log10(E[x^2] / mse)`; `+inf` when the reconstruction is exact.
pub fn sqnr_db(x: &[f32], x_hat: &[f32]) -> Result<f64> {
    let err = mse(x, x_hat)?;
    Ok(sqnr_from(mean_square(x), err))
}

pub(crate) fn sqnr_from(signal_power: f64, err: f64) -> f64 {
    if err == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (signal_power / err).log10()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn bits(k: u32) -> Bits {
        Bits::new(k).unwrap()
    }

    fn gaussian(seed: u64, n: usize) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_vec((0..n).map(|_| rng.sample::<f32, _>(StandardNormal)).collect())
    }

    fn rel(a: f64, b: f64) -> f64 {
        ((a - b) / b).abs()
    }

    #[test]
    fn bits_range() {
        assert!(Bits::new(1).is_err());
        assert!(Bits::new(9).is_err());
        assert_eq!(bits(3).max_code(), 3);
        assert_eq!(bits(8).max_code(), 127);
        assert_eq!(bits(2).levels(), 3);
    }

    #[test]
    fn step_examples() {
        assert!(rel(compute_step(1.0, bits(3)).unwrap() as f64, 1.0 / 3.0) < 2f64.powi(-17));
        assert_eq!(compute_step(0.0, bits(8)).unwrap(), 0.0);
        let s = compute_step(2.55, bits(8)).unwrap() as f64;
        assert!(rel(s, 2.55 / 127.0) < 2f64.powi(-17));
        assert!((s - 0.0200787).abs() < 1e-7);
    }

    #[test]
    fn step_products_are_exact() {
        for k in 2..=8 {
            let b = bits(k);
            let s = compute_step(0.7318, b).unwrap();
            for c in -b.max_code()..=b.max_code() {
                let p = c as f32 * s;
                assert_eq!(p as f64, c as f64 * s as f64);
            }
        }
    }

    #[test]
    fn lq_examples() {
        let q = quantize_lq(&Tensor::from_vec(vec![-1.0, 0.0, 1.0]), bits(3)).unwrap();
        assert_eq!(q.codes, vec![-3, 0, 3]);
        assert!(rel(q.params.step as f64, 1.0 / 3.0) < 1e-6);
        let back = dequantize(&q).data;
        assert!(back.iter().zip([-1.0, 0.0, 1.0]).all(|(a, b)| (a - b).abs() < 1e-6));

        let q = quantize_lq(&Tensor::from_vec(vec![0.1, -0.24, 0.5]), bits(3)).unwrap();
        assert_eq!(q.codes, vec![1, -1, 3]);
        assert!(rel(q.params.step as f64, 1.0 / 6.0) < 1e-6);
    }

    #[test]
    fn zero_tensor() {
        for k in 2..=8 {
            let q = quantize_lq(&Tensor::from_vec(vec![0.0; 5]), bits(k)).unwrap();
            assert_eq!(q.params.step, 0.0);
            assert!(q.codes.iter().all(|&c| c == 0));
            assert!(dequantize(&q).data.iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn rejects_non_finite() {
        let t = Tensor::from_vec(vec![1.0, f32::NAN]);
        assert!(matches!(quantize_lq(&t, bits(4)), Err(PtqError::NonFinite { index: 1 })));
        let t = Tensor::from_vec(vec![f32::INFINITY]);
        assert!(quantize_lq(&t, bits(4)).is_err());
    }

    #[test]
    fn half_away_from_zero() {
        // step 1 at k=3 with max 3: 0.5 -> 1, -0.5 -> -1, 2.5 -> 3
        let q = quantize_lq(&Tensor::from_vec(vec![3.0, 0.5, -0.5, 2.5, -1.5]), bits(3)).unwrap();
        assert_eq!(q.params.step, 1.0);
        assert_eq!(q.codes, vec![3, 1, -1, 3, -2]);
    }

    #[test]
    fn mse_examples() {
        assert_eq!(mse(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert_eq!(mse(&[1.0, 1.0], &[0.0, 2.0]).unwrap(), 1.0);
        assert!(mse(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn sqnr_examples() {
        // E[x^2] = 1, mse = 0.01
        let x = [1.0f32, -1.0];
        let xh = [0.9f32, -0.9];
        assert!((sqnr_db(&x, &xh).unwrap() - 20.0).abs() < 1e-4);
        assert_eq!(sqnr_db(&x, &x).unwrap(), f64::INFINITY);
    }

    #[test]
    fn sqnr_grows_with_bits() {
        for seed in 0..20 {
            let x = gaussian(seed, 4096);
            let s8 = sqnr_db(&x.data, &dequantize(&quantize_lq(&x, bits(8)).unwrap()).data).unwrap();
            let s4 = sqnr_db(&x.data, &dequantize(&quantize_lq(&x, bits(4)).unwrap()).data).unwrap();
            assert!(s8 > s4, "seed {seed}: {s8} <= {s4}");
        }
    }

    #[test]
    fn uniform_noise_floor() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = Tensor::from_vec((0..1_000_000).map(|_| rng.random_range(-1.0f32..=1.0)).collect());
        let q = quantize_lq(&x, bits(8)).unwrap();
        let err = mse(&x.data, &dequantize(&q).data).unwrap();
        let step = q.params.step as f64;
        assert!(rel(err, step * step / 12.0) < 0.05, "{err} vs {}", step * step / 12.0);
    }

    #[test]
    fn mse_monotone_in_bits_on_average() {
        let mut means = [0.0f64; 9];
        for seed in 0..30 {
            let x = gaussian(100 + seed, 2048);
            for k in 2..=8 {
                means[k as usize] += mse(&x.data, &dequantize(&quantize_lq(&x, bits(k)).unwrap()).data).unwrap();
            }
        }
        for k in 2..8 {
            assert!(means[k] >= means[k + 1], "k={k}");
        }
    }

    #[test]
    fn validate_catches_bad_codes() {
        let mut q = quantize_lq(&Tensor::from_vec(vec![1.0, -1.0]), bits(2)).unwrap();
        q.validate().unwrap();
        q.codes[0] = 2;
        assert!(q.validate().is_err());
    }
}
