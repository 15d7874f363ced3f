//! Synthetic linear stacks with planted outlier channels, forward evaluation,
//! method/bit sweeps and aggregate trend checks.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cost::{self, AceOptions, LayerSpec, ModelManifest, WeightBits};
use crate::error::{PtqError, Result};
use crate::linalg::{relative_error, Matrix};
use crate::pipeline::{dequantize_archive, quantize_archive, QuantPolicy};
use crate::quant::{Bits, Method};
use crate::store::{Archive, TensorRecord};

/// Stream reserved for the input batch; layer `i` uses stream `i`.
const INPUT_STREAM: u64 = u64::MAX;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    /// `(in, out)` per layer; weights are stored `[in, out]` so `Y = X W`.
    pub layer_dims: Vec<(usize, usize)>,
    pub weight_sigma: f64,
    pub outlier_channels_per_layer: usize,
    pub outlier_scale: f64,
    pub seed: u64,
    #[serde(default = "default_input_rows")]
    pub input_rows: usize,
    #[serde(default = "default_ocs_ratio")]
    pub ocs_ratio: f64,
}

fn default_input_rows() -> usize {
    32
}

fn default_ocs_ratio() -> f64 {
    crate::ocs::DEFAULT_RATIO
}

impl SyntheticSpec {
    /// Two 256-wide layers, one input channel per layer scaled by 10.
    pub fn heavy_outlier() -> Self {
        SyntheticSpec {
            layer_dims: vec![(256, 256); 2],
            weight_sigma: 0.02,
            outlier_channels_per_layer: 1,
            outlier_scale: 10.0,
            seed: 0,
            input_rows: default_input_rows(),
            ocs_ratio: default_ocs_ratio(),
        }
    }

    /// A single 64x64 Gaussian layer without outliers.
    pub fn gaussian() -> Self {
        SyntheticSpec {
            layer_dims: vec![(64, 64)],
            weight_sigma: 0.02,
            outlier_channels_per_layer: 0,
            outlier_scale: 1.0,
            seed: 0,
            input_rows: default_input_rows(),
            ocs_ratio: default_ocs_ratio(),
        }
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        SyntheticSpec { seed, ..self.clone() }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(PtqError::InvalidArgument(msg));
        if self.layer_dims.is_empty() {
            return bad("spec has no layers".into());
        }
        for (i, &(din, dout)) in self.layer_dims.iter().enumerate() {
            if din == 0 || dout == 0 {
                return bad(format!("layer {i} has a zero dimension"));
            }
            if self.outlier_channels_per_layer > din {
                return bad(format!(
                    "layer {i}: {} outlier channels exceed {din} input channels",
                    self.outlier_channels_per_layer
                ));
            }
        }
        for (i, w) in self.layer_dims.windows(2).enumerate() {
            if w[0].1 != w[1].0 {
                return bad(format!(
                    "layer {i} outputs {} but layer {} takes {}",
                    w[0].1,
                    i + 1,
                    w[1].0
                ));
            }
        }
        if !(self.weight_sigma > 0.0 && self.weight_sigma.is_finite()) {
            return bad(format!("weight sigma must be positive, got {}", self.weight_sigma));
        }
        if !(self.outlier_scale > 0.0 && self.outlier_scale.is_finite()) {
            return bad(format!("outlier scale must be positive, got {}", self.outlier_scale));
        }
        if self.input_rows == 0 {
            return bad("input_rows must be >= 1".into());
        }
        if !(0.0..=1.0).contains(&self.ocs_ratio) {
            return bad(format!("ocs ratio must lie in [0, 1], got {}", self.ocs_ratio));
        }
        Ok(())
    }

    pub fn layer_name(i: usize) -> String {
        format!("layer{i}.weight")
    }

    pub fn manifest(&self) -> ModelManifest {
        ModelManifest {
            config_name: "synthetic".into(),
            layers: self
                .layer_dims
                .iter()
                .enumerate()
                .map(|(i, &(din, dout))| LayerSpec::matmul(Self::layer_name(i), din as u64, dout as u64, false, true))
                .collect(),
            attention_blocks: vec![],
        }
    }

    fn stream(&self, stream: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(stream);
        rng
    }
}

/// Planted outlier channels (input rows of `W`) per layer.
pub fn outlier_channels(spec: &SyntheticSpec) -> Vec<Vec<usize>> {
    (0..spec.layer_dims.len())
        .map(|i| {
            let mut rng = spec.stream(i as u64);
            let mut picked = sample(&mut rng, spec.layer_dims[i].0, spec.outlier_channels_per_layer).into_vec();
            picked.sort_unstable();
            picked
        })
        .collect()
}

pub fn gen_synthetic_model(spec: &SyntheticSpec) -> Result<Archive> {
    spec.validate()?;
    let planted = outlier_channels(spec);
    let mut records = Vec::with_capacity(spec.layer_dims.len());
    for (i, &(din, dout)) in spec.layer_dims.iter().enumerate() {
        let mut rng = spec.stream(i as u64);
        // Skip the draws used to pick the outlier channels.
        let _ = sample(&mut rng, din, spec.outlier_channels_per_layer);
        let mut data: Vec<f32> = (0..din * dout)
            .map(|_| (rng.sample::<f64, _>(StandardNormal) * spec.weight_sigma) as f32)
            .collect();
        for &c in &planted[i] {
            for v in &mut data[c * dout..(c + 1) * dout] {
                *v = (*v as f64 * spec.outlier_scale) as f32;
            }
        }
        records.push(TensorRecord::f32(SyntheticSpec::layer_name(i), &[din, dout], data)?);
    }
    let metadata = serde_json::to_string(spec)?;
    Archive::new(records, metadata)
}

/// Seeded `N(0, 1)` batch of `input_rows x in_dim`.
pub fn gen_input(spec: &SyntheticSpec) -> Result<Matrix> {
    spec.validate()?;
    let cols = spec.layer_dims[0].0;
    let mut rng = spec.stream(INPUT_STREAM);
    let data = (0..spec.input_rows * cols)
        .map(|_| rng.sample::<f32, _>(StandardNormal))
        .collect();
    Matrix::new(spec.input_rows, cols, data)
}

/// Applies the archive's rank-2 float tensors in order with ReLU between
/// layers and identity after the last.
pub fn forward(weights: &Archive, x: &Matrix) -> Result<Matrix> {
    let mut h = x.clone();
    let n = weights.records.len();
    for (i, rec) in weights.records.iter().enumerate() {
        let data = rec
            .data
            .as_f32()
            .ok_or_else(|| PtqError::ShapeMismatch(format!("layer {:?} is {}, expected float32", rec.name, rec.dtype().name())))?;
        let shape = rec.shape_usize();
        if shape.len() != 2 {
            return Err(PtqError::ShapeMismatch(format!("layer {:?} has shape {:?}", rec.name, shape)));
        }
        let w = Matrix::new(shape[0], shape[1], data.to_vec())?;
        h = h.matmul(&w).map_err(|e| e.in_tensor(&rec.name))?;
        if i + 1 < n {
            h.relu_in_place();
        }
    }
    Ok(h)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub method: Method,
    pub bits: u32,
    pub seed: u64,
    /// Mean over layers of the per-layer weight MSE.
    pub weight_mse: f64,
    pub output_rel_err: f64,
    pub size_bits: f64,
    pub ace: u128,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepResult {
    pub rows: Vec<SweepRow>,
    pub seeds: Vec<u64>,
}

impl SweepResult {
    pub const CSV_HEADER: &'static str = "method,bits,seed,weight_mse,output_rel_err,size_bits,ace";

    pub fn to_csv(&self) -> String {
        let mut out = format!("{}\n", Self::CSV_HEADER);
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                r.method, r.bits, r.seed, r.weight_mse, r.output_rel_err, r.size_bits, r.ace
            ));
        }
        out
    }

    /// Mean of `f` over seeds for each `(method, bits)` cell.
    pub fn cell_means(&self, f: impl Fn(&SweepRow) -> f64) -> BTreeMap<(Method, u32), (f64, usize)> {
        let mut acc: BTreeMap<(Method, u32), (f64, usize)> = BTreeMap::new();
        for r in &self.rows {
            let e = acc.entry((r.method, r.bits)).or_default();
            e.0 += f(r);
            e.1 += 1;
        }
        acc.into_iter().map(|(k, (s, n))| (k, (s / n as f64, n))).collect()
    }
}

fn check_sweep_bits(b: u32) -> Result<()> {
    if b == 32 {
        Ok(())
    } else {
        Bits::new(b).map(|_| ())
    }
}

fn sweep_cell(
    spec: &SyntheticSpec,
    model: &Archive,
    input: &Matrix,
    reference: &Matrix,
    method: Method,
    bits: u32,
) -> Result<SweepRow> {
    let manifest = spec.manifest();
    let opts = AceOptions {
        seq_len: spec.input_rows as u64,
        ..AceOptions::default()
    };
    let none = BTreeSet::new();
    let (weight_mse, output_rel_err, weight_bits, ratio) = if bits == 32 {
        (0.0, 0.0, WeightBits::Uniform(32), 0.0)
    } else {
        let mut policy = QuantPolicy::new(method, Bits::new(bits)?);
        policy.ocs_ratio = spec.ocs_ratio;
        policy.skip_patterns.clear();
        policy.min_elements = 0;
        let (q, report) = quantize_archive(model, &policy)?;
        let d = dequantize_archive(&q)?;
        let y = forward(&d, input)?;
        let ratio = if method.is_ocs() { spec.ocs_ratio } else { 0.0 };
        (
            report.mean_mse,
            relative_error(&y.data, &reference.data)?,
            WeightBits::Quantized(bits),
            ratio,
        )
    };
    Ok(SweepRow {
        method,
        bits,
        seed: spec.seed,
        weight_mse,
        output_rel_err,
        size_bits: cost::model_size(&manifest, bits, ratio, &none)?.total_bits,
        ace: cost::ace(&manifest, &weight_bits, opts)?.ace_total,
    })
}

/// Runs every `(method, bits, seed)` cell; seeds are `spec.seed .. spec.seed + seeds`.
/// `bits == 32` is the unquantized control. Rows are ordered by method and
/// bits as listed, then by seed.
pub fn method_sweep(spec: &SyntheticSpec, methods: &[Method], bits_list: &[u32], seeds: usize) -> Result<SweepResult> {
    if methods.is_empty() || bits_list.is_empty() || seeds == 0 {
        return Err(PtqError::InvalidArgument("sweep needs at least one method, bit width and seed".into()));
    }
    spec.validate()?;
    for &b in bits_list {
        check_sweep_bits(b)?;
    }
    let seed_list: Vec<u64> = (0..seeds as u64).map(|s| spec.seed.wrapping_add(s)).collect();
    let per_seed: Vec<Vec<(usize, usize, SweepRow)>> = seed_list
        .par_iter()
        .map(|&seed| -> Result<_> {
            let s = spec.with_seed(seed);
            let model = gen_synthetic_model(&s)?;
            let input = gen_input(&s)?;
            let reference = forward(&model, &input)?;
            let mut rows = Vec::with_capacity(methods.len() * bits_list.len());
            for (mi, &m) in methods.iter().enumerate() {
                for (bi, &b) in bits_list.iter().enumerate() {
                    rows.push((mi, bi, sweep_cell(&s, &model, &input, &reference, m, b)?));
                }
            }
            Ok(rows)
        })
        .collect::<Result<_>>()?;
    let mut keyed: Vec<(usize, usize, SweepRow)> = per_seed.into_iter().flatten().collect();
    keyed.sort_by_key(|(mi, bi, r)| (*mi, *bi, r.seed));
    Ok(SweepResult {
        rows: keyed.into_iter().map(|(_, _, r)| r).collect(),
        seeds: seed_list,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BitTrend {
    pub bits: u32,
    pub seeds: usize,
    pub lq_mse: f64,
    pub aciq_mse: f64,
    pub ocs_mse: f64,
    /// Methods from lowest to highest mean weight MSE.
    pub observed_order: Vec<Method>,
    /// `aciq - ocs`; non-negative when OCS <= ACIQ.
    pub ocs_vs_aciq_margin: f64,
    /// `lq - aciq`; non-negative when ACIQ <= LQ.
    pub aciq_vs_lq_margin: f64,
    /// `lq - max(aciq, ocs)`; positive when LQ is strictly worst.
    pub lq_worst_margin: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Verdict {
    pub holds: bool,
    /// Smallest margin across bit widths (negative when violated).
    pub margin: f64,
    pub seeds: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrendVerdict {
    /// No quantized rows at 4 bits or fewer: nothing to check.
    pub vacuous: bool,
    pub ocs_method: Option<Method>,
    pub per_bits: Vec<BitTrend>,
    /// OCS <= ACIQ <= LQ at every k <= 4.
    pub ordering: Verdict,
    /// LQ strictly worst at every k <= 4.
    pub lq_worst: Verdict,
}

impl TrendVerdict {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("verdict serializes")
    }
}

pub const TREND_BITS: [u32; 3] = [2, 3, 4];

/// Aggregate mean weight-MSE checks at k <= 4. The OCS arm is `ocs_qa` when
/// present, otherwise `ocs_naive`.
pub fn trend_check(result: &SweepResult) -> Result<TrendVerdict> {
    let means = result.cell_means(|r| r.weight_mse);
    let low: BTreeSet<u32> = result.rows.iter().map(|r| r.bits).filter(|&b| b <= 4).collect();
    if low.is_empty() {
        return Ok(TrendVerdict {
            vacuous: true,
            ocs_method: None,
            per_bits: vec![],
            ordering: Verdict {
                holds: true,
                margin: 0.0,
                seeds: 0,
            },
            lq_worst: Verdict {
                holds: true,
                margin: 0.0,
                seeds: 0,
            },
        });
    }
    let has = |m: Method| TREND_BITS.iter().all(|&b| means.contains_key(&(m, b)));
    let ocs = [Method::OcsQa, Method::OcsNaive].into_iter().find(|&m| has(m));
    let (true, true, Some(ocs)) = (has(Method::Lq), has(Method::Aciq), ocs) else {
        return Err(PtqError::InsufficientCoverage(
            "trend check needs lq, aciq and an ocs method at 2, 3 and 4 bits".into(),
        ));
    };
    let mut per_bits = Vec::new();
    for &b in &TREND_BITS {
        let (lq, n) = means[&(Method::Lq, b)];
        let (aciq, _) = means[&(Method::Aciq, b)];
        let (o, _) = means[&(ocs, b)];
        let mut order = vec![(Method::Lq, lq), (Method::Aciq, aciq), (ocs, o)];
        order.sort_by(|a, b| a.1.total_cmp(&b.1));
        per_bits.push(BitTrend {
            bits: b,
            seeds: n,
            lq_mse: lq,
            aciq_mse: aciq,
            ocs_mse: o,
            observed_order: order.into_iter().map(|(m, _)| m).collect(),
            ocs_vs_aciq_margin: aciq - o,
            aciq_vs_lq_margin: lq - aciq,
            lq_worst_margin: lq - aciq.max(o),
        });
    }
    let seeds = per_bits.iter().map(|t| t.seeds).min().unwrap_or(0);
    let ordering_margin = per_bits
        .iter()
        .map(|t| t.ocs_vs_aciq_margin.min(t.aciq_vs_lq_margin))
        .fold(f64::INFINITY, f64::min);
    let worst_margin = per_bits.iter().map(|t| t.lq_worst_margin).fold(f64::INFINITY, f64::min);
    Ok(TrendVerdict {
        vacuous: false,
        ocs_method: Some(ocs),
        per_bits,
        ordering: Verdict {
            holds: ordering_margin >= 0.0,
            margin: ordering_margin,
            seeds,
        },
        lq_worst: Verdict {
            holds: worst_margin > 0.0,
            margin: worst_margin,
            seeds,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ocs::{select_outlier_channel, ChannelMatrix};
    use crate::quant::Tensor;
    use crate::store::write_archive;

    fn small() -> SyntheticSpec {
        SyntheticSpec {
            layer_dims: vec![(64, 48), (48, 32)],
            ..SyntheticSpec::heavy_outlier()
        }
    }

    #[test]
    fn spec_validation() {
        assert!(SyntheticSpec::heavy_outlier().validate().is_ok());
        let mut s = small();
        s.layer_dims = vec![(64, 48), (32, 16)];
        assert!(gen_synthetic_model(&s).is_err());
        let mut s = small();
        s.outlier_channels_per_layer = 49;
        assert!(s.validate().is_err());
        let mut s = small();
        s.layer_dims.clear();
        assert!(s.validate().is_err());
    }

    #[test]
    fn generation_is_deterministic() {
        let a = write_archive(&gen_synthetic_model(&small()).unwrap()).unwrap();
        let b = write_archive(&gen_synthetic_model(&small()).unwrap()).unwrap();
        assert_eq!(a, b);
        let c = write_archive(&gen_synthetic_model(&small().with_seed(1)).unwrap()).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn layers_use_distinct_streams() {
        let mut s = small();
        s.layer_dims = vec![(32, 32), (32, 32)];
        let m = gen_synthetic_model(&s).unwrap();
        assert_ne!(m.records[0].data, m.records[1].data);
    }

    #[test]
    fn planted_channel_is_found() {
        for seed in 0..100 {
            let s = SyntheticSpec::heavy_outlier().with_seed(seed);
            let m = gen_synthetic_model(&s).unwrap();
            let planted = outlier_channels(&s);
            for (rec, chans) in m.records.iter().zip(&planted) {
                let t = Tensor::new(rec.shape_usize(), rec.data.as_f32().unwrap().to_vec()).unwrap();
                let idx = select_outlier_channel(&ChannelMatrix::from_tensor(&t).unwrap()).unwrap();
                assert!(chans.contains(&idx), "seed {seed}");
            }
        }
    }

    #[test]
    fn gaussian_tail() {
        let mut over = 0;
        for seed in 0..100 {
            let s = SyntheticSpec::gaussian().with_seed(seed);
            let m = gen_synthetic_model(&s).unwrap();
            let max = m.records[0].data.as_f32().unwrap().iter().fold(0.0f32, |a, v| a.max(v.abs()));
            if max as f64 > 6.0 * s.weight_sigma {
                over += 1;
            }
        }
        assert!(over <= 1, "{over}");
    }

    #[test]
    fn forward_identity_and_zero() {
        let s = SyntheticSpec {
            layer_dims: vec![(8, 5)],
            ..SyntheticSpec::gaussian()
        };
        let m = gen_synthetic_model(&s).unwrap();
        let y = forward(&m, &Matrix::identity(8)).unwrap();
        assert_eq!(y.data, m.records[0].data.as_f32().unwrap());
        let z = forward(&gen_synthetic_model(&small()).unwrap(), &Matrix::zeros(3, 64)).unwrap();
        assert!(z.data.iter().all(|&v| v == 0.0));
        assert!(forward(&m, &Matrix::zeros(2, 7)).is_err());
    }

    #[test]
    fn control_rows_are_exact() {
        let r = method_sweep(&small(), &[Method::Lq, Method::OcsQa], &[32], 3).unwrap();
        assert_eq!(r.rows.len(), 6);
        assert!(r.rows.iter().all(|row| row.weight_mse == 0.0 && row.output_rel_err == 0.0));
        let v = trend_check(&r).unwrap();
        assert!(v.vacuous && v.ordering.holds && v.lq_worst.holds);
    }

    #[test]
    fn sweep_ordering_and_reproducibility() {
        let methods = [Method::Lq, Method::Aciq, Method::OcsQa];
        let a = method_sweep(&small(), &methods, &[8, 3], 4).unwrap();
        let b = method_sweep(&small(), &methods, &[8, 3], 4).unwrap();
        assert_eq!(a, b);
        let keys: Vec<(Method, u32, u64)> = a.rows.iter().map(|r| (r.method, r.bits, r.seed)).collect();
        assert_eq!(keys[0], (Method::Lq, 8, 0));
        assert_eq!(keys[4], (Method::Lq, 3, 0));
        assert_eq!(keys[23], (Method::OcsQa, 3, 3));
        assert_eq!(a.to_csv().lines().count(), 25);
    }

    #[test]
    fn sizes_by_method() {
        let s = small();
        let r = method_sweep(&s, &[Method::Lq, Method::OcsQa], &[8, 6, 4], 1).unwrap();
        let weights: f64 = s.layer_dims.iter().map(|&(a, b)| (a * b) as f64).sum();
        for b in [8u32, 6, 4] {
            let lq = r.rows.iter().find(|x| x.method == Method::Lq && x.bits == b).unwrap();
            let ocs = r.rows.iter().find(|x| x.method == Method::OcsQa && x.bits == b).unwrap();
            assert!((ocs.size_bits - lq.size_bits - s.ocs_ratio * weights * b as f64).abs() < 1e-6);
        }
        let lq: Vec<f64> = r.rows.iter().filter(|x| x.method == Method::Lq).map(|x| x.size_bits).collect();
        assert!(lq[0] > lq[1] && lq[1] > lq[2]);
    }

    #[test]
    fn partial_coverage_is_an_error() {
        let r = method_sweep(&small(), &[Method::Lq, Method::Aciq], &[3], 1).unwrap();
        assert!(matches!(trend_check(&r), Err(PtqError::InsufficientCoverage(_))));
    }

    #[test]
    fn bad_sweep_arguments() {
        assert!(method_sweep(&small(), &[], &[8], 1).is_err());
        assert!(method_sweep(&small(), &[Method::Lq], &[9], 1).is_err());
        assert!(method_sweep(&small(), &[Method::Lq], &[8], 0).is_err());
    }
}
