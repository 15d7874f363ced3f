//! Outlier channel splitting.
//!
//! For `Y = X W` with `W` of shape `h x d`, an input channel (row of `W`) can
//! be duplicated with its weights halved while the matching column of `X` is
//! duplicated: `[X X] [W/2; W/2] = X W`. Repeating this on the row holding
//! the largest magnitude shrinks the quantization range. The quantization-
//! aware variant offsets the halves by a quarter step, `w/2 - step/4` and
//! `w/2 + step/4`, so the two rounding errors cannot both point the same way.
//!
//! Split matrices are held in f64 so halves (and halves of halves) sum back
//! to the original channel exactly.

use serde::{Deserialize, Serialize};

use crate::error::{PtqError, Result};
use crate::linalg::Matrix;
use crate::quant::{self, check_finite, Bits, Method, QuantParams, QuantizedTensor, Tensor};

pub const DEFAULT_RATIO: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitMode {
    Naive,
    Qa,
}

impl SplitMode {
    pub fn method(self) -> Method {
        match self {
            SplitMode::Naive => Method::OcsNaive,
            SplitMode::Qa => Method::OcsQa,
        }
    }
}

/// Ordered channel duplications. Each event `(source, new)` refers to
/// indices valid when it was applied; `new` is always the then-current end.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitMap {
    pub axis: usize,
    pub mode: SplitMode,
    pub original_channels: usize,
    pub final_channels: usize,
    pub events: Vec<(usize, usize)>,
}

impl SplitMap {
    pub fn empty(channels: usize, mode: SplitMode) -> Self {
        SplitMap {
            axis: 0,
            mode,
            original_channels: channels,
            final_channels: channels,
            events: Vec::new(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.axis != 0 {
            return Err(PtqError::InconsistentSplitMap(format!(
                "only axis 0 is supported, got {}",
                self.axis
            )));
        }
        if self.final_channels != self.original_channels + self.events.len() {
            return Err(PtqError::InconsistentSplitMap(format!(
                "{} + {} events != {} final channels",
                self.original_channels,
                self.events.len(),
                self.final_channels
            )));
        }
        let mut count = self.original_channels;
        for &(src, new) in &self.events {
            if src >= count || new != count {
                return Err(PtqError::InconsistentSplitMap(format!(
                    "event ({src}, {new}) invalid with {count} channels"
                )));
            }
            count += 1;
        }
        Ok(())
    }
}

/// Number of splits for expansion ratio `r` over `h` channels: `ceil(r h)`,
/// ignoring float noise such as `0.01 * 300 = 3.0000000000000004`.
pub fn split_count(ratio: f64, channels: usize) -> usize {
    let x = ratio * channels as f64;
    let nearest = x.round();
    if (x - nearest).abs() < 1e-9 {
        nearest as usize
    } else {
        x.ceil() as usize
    }
}

/// A tensor viewed as `channels` rows of `width` elements along axis 0.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelMatrix {
    pub channels: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl ChannelMatrix {
    pub fn new(channels: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if channels * width != data.len() {
            return Err(PtqError::ShapeMismatch(format!(
                "{channels} channels of {width} from {} elements",
                data.len()
            )));
        }
        Ok(ChannelMatrix {
            channels,
            width,
            data,
        })
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let Some((&channels, rest)) = t.shape.split_first() else {
            return Err(PtqError::ShapeMismatch("scalar tensor has no channel axis".into()));
        };
        let width = rest.iter().product();
        Self::new(channels, width, t.data.iter().map(|&v| v as f64).collect())
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let width = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != width) {
            return Err(PtqError::ShapeMismatch("ragged rows".into()));
        }
        Self::new(rows.len(), width, rows.concat())
    }

    pub fn channel(&self, i: usize) -> &[f64] {
        &self.data[i * self.width..(i + 1) * self.width]
    }

    fn check(&self, idx: usize) -> Result<()> {
        if idx < self.channels {
            Ok(())
        } else {
            Err(PtqError::ChannelOutOfRange {
                index: idx,
                channels: self.channels,
            })
        }
    }

    fn channel_max(&self, i: usize) -> f64 {
        self.channel(i).iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }

    pub fn max_abs(&self) -> f64 {
        quant::max_abs(&self.data)
    }

    /// Matrix view as f32 (exact for naive splits of f32 data).
    pub fn to_matrix(&self) -> Matrix {
        Matrix {
            rows: self.channels,
            cols: self.width,
            data: self.data.iter().map(|&v| v as f32).collect(),
        }
    }

    fn push_channel(&mut self, values: Vec<f64>) -> usize {
        self.data.extend(values);
        self.channels += 1;
        self.channels - 1
    }
}

fn argmax_lowest(maxima: &[f64]) -> usize {
    let mut best = 0;
    for (i, &m) in maxima.iter().enumerate() {
        if m > maxima[best] {
            best = i;
        }
    }
    best
}

/// Channel whose largest magnitude is largest; ties go to the lowest index.
pub fn select_outlier_channel(w: &ChannelMatrix) -> Result<usize> {
    if w.channels == 0 || w.width == 0 {
        return Err(PtqError::InvalidArgument("empty tensor has no outlier channel".into()));
    }
    let maxima: Vec<f64> = (0..w.channels).map(|i| w.channel_max(i)).collect();
    Ok(argmax_lowest(&maxima))
}

/// Halves channel `idx` in place and appends the other half. Returns the new
/// channel's index.
pub fn split_channel_naive(w: &mut ChannelMatrix, idx: usize) -> Result<usize> {
    w.check(idx)?;
    let half: Vec<f64> = w.channel(idx).iter().map(|v| v * 0.5).collect();
    w.data[idx * w.width..(idx + 1) * w.width].copy_from_slice(&half);
    Ok(w.push_channel(half))
}

/// Quantization-aware split: `idx` becomes `w/2 - step/4`, the appended
/// channel `w/2 + step/4`.
pub fn split_channel_qa(w: &mut ChannelMatrix, idx: usize, step: f64) -> Result<usize> {
    w.check(idx)?;
    if !(step > 0.0 && step.is_finite()) {
        return Err(PtqError::InvalidArgument(format!("split step must be positive, got {step}")));
    }
    let quarter = step * 0.25;
    let width = w.width;
    let mut upper = Vec::with_capacity(width);
    for v in &mut w.data[idx * width..(idx + 1) * width] {
        let half = *v * 0.5;
        *v = half - quarter;
        upper.push(half + quarter);
    }
    Ok(w.push_channel(upper))
}

fn expand_naive(w: &ChannelMatrix, splits: usize) -> (ChannelMatrix, Vec<(usize, usize)>) {
    let mut out = w.clone();
    let mut maxima: Vec<f64> = (0..w.channels).map(|i| w.channel_max(i)).collect();
    let mut events = Vec::with_capacity(splits);
    for _ in 0..splits {
        let src = argmax_lowest(&maxima);
        let new = split_channel_naive(&mut out, src).expect("selected channel is in range");
        maxima[src] *= 0.5;
        maxima.push(maxima[src]);
        events.push((src, new));
    }
    (out, events)
}

/// Performs `ceil(ratio * h)` greedy splits, re-selecting the outlier after
/// each one.
///
/// In QA mode the event sequence comes from a naive pass; the quarter-step
/// offsets use the step implied by that pass's range, and the caller
/// recomputes the final step from the returned matrix.
pub fn ocs_expand(
    w: &ChannelMatrix,
    ratio: f64,
    bits: Bits,
    mode: SplitMode,
) -> Result<(ChannelMatrix, SplitMap)> {
    if !(ratio >= 0.0 && ratio.is_finite()) {
        return Err(PtqError::InvalidArgument(format!("expansion ratio must be >= 0, got {ratio}")));
    }
    if w.channels == 0 {
        return Err(PtqError::InvalidArgument("tensor has no input channels".into()));
    }
    let splits = split_count(ratio, w.channels);
    let (naive, events) = expand_naive(w, splits);
    let expanded = match mode {
        SplitMode::Naive => naive,
        SplitMode::Qa => {
            let provisional = quant::compute_step(naive.max_abs(), bits)? as f64;
            if provisional == 0.0 {
                naive
            } else {
                let mut out = w.clone();
                for &(src, _) in &events {
                    split_channel_qa(&mut out, src, provisional)?;
                }
                out
            }
        }
    };
    let map = SplitMap {
        axis: 0,
        mode,
        original_channels: w.channels,
        final_channels: expanded.channels,
        events,
    };
    Ok((expanded, map))
}

/// Splits, then applies symmetric LQ to the expanded tensor.
pub fn quantize_ocs(x: &Tensor, bits: Bits, ratio: f64, mode: SplitMode) -> Result<QuantizedTensor> {
    check_finite(&x.data)?;
    let w = ChannelMatrix::from_tensor(x)?;
    let (expanded, map) = ocs_expand(&w, ratio, bits, mode)?;
    let step = quant::compute_step(expanded.max_abs(), bits)?;
    let mut shape = x.shape.clone();
    shape[0] = expanded.channels;
    Ok(QuantizedTensor {
        name: String::new(),
        codes: quant::quantize_with_step(&expanded.data, step, bits),
        shape,
        params: QuantParams {
            bits,
            step,
            clip_alpha: None,
        },
        method: mode.method(),
        original_shape: x.shape.clone(),
        split_map: Some(map),
        clip: None,
    })
}

/// Sums each split channel back into its source, last event first.
pub fn fold_channels(m: &ChannelMatrix, map: &SplitMap) -> Result<ChannelMatrix> {
    map.validate()?;
    if m.channels != map.final_channels {
        return Err(PtqError::InconsistentSplitMap(format!(
            "tensor has {} channels, map expects {}",
            m.channels, map.final_channels
        )));
    }
    let mut out = m.clone();
    let width = out.width;
    for &(src, new) in map.events.iter().rev() {
        let tail = out.data.split_off(new * width);
        for (dst, v) in out.data[src * width..(src + 1) * width].iter_mut().zip(tail) {
            *dst += v;
        }
        out.channels -= 1;
    }
    Ok(out)
}

/// Dequantizes and folds an OCS tensor back to its original shape.
pub fn fold(q: &QuantizedTensor) -> Result<Tensor> {
    let map = q
        .split_map
        .as_ref()
        .ok_or_else(|| PtqError::InconsistentSplitMap("tensor has no split map".into()))?;
    if q.shape.first() != Some(&map.final_channels)
        || q.original_shape.first() != Some(&map.original_channels)
        || q.shape[1..] != q.original_shape[1..]
    {
        return Err(PtqError::InconsistentSplitMap(format!(
            "codes shape {:?} / original shape {:?} do not match the map",
            q.shape, q.original_shape
        )));
    }
    let step = q.params.step as f64;
    let m = ChannelMatrix::new(
        q.shape[0],
        q.shape[1..].iter().product(),
        q.codes.iter().map(|&c| c as f64 * step).collect(),
    )?;
    let folded = fold_channels(&m, map)?;
    Tensor::new(
        q.original_shape.clone(),
        folded.data.into_iter().map(|v| v as f32).collect(),
    )
}

/// Duplicates input columns in event order so that
/// `expand_inputs(x) * expanded_w == x * w`.
pub fn expand_inputs(x: &Matrix, map: &SplitMap) -> Result<Matrix> {
    map.validate()?;
    if x.cols != map.original_channels {
        return Err(PtqError::ShapeMismatch(format!(
            "input has {} columns, map expects {}",
            x.cols, map.original_channels
        )));
    }
    let cols = map.final_channels;
    let mut data = Vec::with_capacity(x.rows * cols);
    for r in 0..x.rows {
        let start = data.len();
        data.extend_from_slice(x.row(r));
        for &(src, _) in &map.events {
            let v = data[start + src];
            data.push(v);
        }
    }
    Matrix::new(x.rows, cols, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quant::{dequantize, quantize_lq};

    fn cm(rows: &[&[f64]]) -> ChannelMatrix {
        ChannelMatrix::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    fn bits(k: u32) -> Bits {
        Bits::new(k).unwrap()
    }

    #[test]
    fn select_examples() {
        assert_eq!(select_outlier_channel(&cm(&[&[1.0, 1.0], &[5.0, 0.0], &[2.0, 2.0]])).unwrap(), 1);
        assert_eq!(select_outlier_channel(&cm(&[&[1.0, -3.0], &[1.0, -3.0]])).unwrap(), 0);
        assert_eq!(select_outlier_channel(&cm(&[&[1.0, -3.0], &[3.0, 0.0]])).unwrap(), 0);
        assert!(select_outlier_channel(&ChannelMatrix::new(0, 0, vec![]).unwrap()).is_err());
    }

    #[test]
    fn naive_split_halves() {
        let mut w = cm(&[&[4.0, 2.0]]);
        assert_eq!(split_channel_naive(&mut w, 0).unwrap(), 1);
        assert_eq!(w, cm(&[&[2.0, 1.0], &[2.0, 1.0]]));
        assert!(split_channel_naive(&mut w, 5).is_err());
    }

    #[test]
    fn double_split_sums_back() {
        let mut w = cm(&[&[3.0, -1.5], &[0.1, 0.2]]);
        split_channel_naive(&mut w, 0).unwrap();
        split_channel_naive(&mut w, 0).unwrap();
        assert_eq!(w.channels, 4);
        let sum: Vec<f64> = (0..2).map(|j| w.channel(0)[j] + w.channel(2)[j] + w.channel(3)[j]).collect();
        assert_eq!(sum, vec![3.0, -1.5]);
    }

    #[test]
    fn qa_split_example() {
        let mut w = cm(&[&[1.0]]);
        split_channel_qa(&mut w, 0, 1.0).unwrap();
        assert_eq!(w.data, vec![0.25, 0.75]);
        assert!(split_channel_qa(&mut w, 0, 0.0).is_err());
        assert!(split_channel_qa(&mut w, 0, -1.0).is_err());
        assert!(split_channel_qa(&mut w, 9, 1.0).is_err());
    }

    #[test]
    fn split_counts() {
        assert_eq!(split_count(0.0, 100), 0);
        assert_eq!(split_count(0.01, 100), 1);
        assert_eq!(split_count(0.01, 300), 3);
        assert_eq!(split_count(0.01, 301), 4);
        assert_eq!(split_count(0.01, 768), 8);
    }

    #[test]
    fn zero_ratio_is_identity() {
        let w = cm(&[&[1.0, -2.0], &[0.5, 9.0]]);
        for mode in [SplitMode::Naive, SplitMode::Qa] {
            let (e, map) = ocs_expand(&w, 0.0, bits(4), mode).unwrap();
            assert_eq!(e, w);
            assert!(map.events.is_empty());
            assert_eq!(map.final_channels, 2);
        }
    }

    #[test]
    fn resplits_dominant_channel() {
        // channel 1 is 16x larger than the rest: every split should land on
        // one of its descendants
        let w = cm(&[&[1.0, 0.5], &[16.0, -8.0], &[0.7, 1.0], &[0.2, 0.3]]);
        let (e, map) = ocs_expand(&w, 0.75, bits(4), SplitMode::Naive).unwrap();
        assert_eq!(map.events, vec![(1, 4), (1, 5), (4, 6)]);
        assert_eq!(e.max_abs(), 4.0);
        assert_eq!(fold_channels(&e, &map).unwrap(), w);
    }

    #[test]
    fn qa_expand_preserves_sum() {
        let w = cm(&[&[1.0, 0.5], &[16.0, -8.0], &[0.7, 1.0]]);
        let (e, map) = ocs_expand(&w, 0.5, bits(3), SplitMode::Qa).unwrap();
        assert_eq!(map.events, vec![(1, 3), (1, 4)]);
        assert_eq!(fold_channels(&e, &map).unwrap(), w);
    }

    #[test]
    fn zero_ratio_quantize_matches_lq() {
        let t = Tensor::new(vec![2, 3], vec![0.1, -0.7, 2.0, 0.3, 0.0, -1.1]).unwrap();
        let q = quantize_ocs(&t, bits(4), 0.0, SplitMode::Naive).unwrap();
        let lq = quantize_lq(&t, bits(4)).unwrap();
        assert_eq!(q.codes, lq.codes);
        assert_eq!(fold(&q).unwrap(), dequantize(&lq));
    }

    #[test]
    fn fold_requires_map() {
        let t = Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert!(fold(&quantize_lq(&t, bits(4)).unwrap()).is_err());
        let mut q = quantize_ocs(&t, bits(4), 0.5, SplitMode::Naive).unwrap();
        q.shape[0] = 2;
        assert!(fold(&q).is_err());
    }

    #[test]
    fn expand_inputs_duplicates_columns() {
        let x = Matrix::new(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(expand_inputs(&x, &SplitMap::empty(2, SplitMode::Naive)).unwrap(), x);
        let map = SplitMap {
            axis: 0,
            mode: SplitMode::Naive,
            original_channels: 2,
            final_channels: 3,
            events: vec![(1, 2)],
        };
        assert_eq!(expand_inputs(&x, &map).unwrap().data, vec![1.0, 2.0, 2.0, 3.0, 4.0, 4.0]);
        let wrong = Matrix::new(1, 3, vec![0.0; 3]).unwrap();
        assert!(expand_inputs(&wrong, &map).is_err());
    }

    #[test]
    fn map_validation() {
        let mut map = SplitMap::empty(3, SplitMode::Qa);
        map.events.push((0, 3));
        assert!(map.validate().is_err());
        map.final_channels = 4;
        map.validate().unwrap();
        map.events[0] = (4, 3);
        assert!(map.validate().is_err());
    }

    #[test]
    fn codes_stay_on_grid_after_split() {
        let t = Tensor::new(vec![3, 2], vec![0.1, -9.0, 0.4, 0.2, -0.3, 0.5]).unwrap();
        for mode in [SplitMode::Naive, SplitMode::Qa] {
            let q = quantize_ocs(&t, bits(3), 0.5, mode).unwrap();
            q.validate().unwrap();
            assert_eq!(q.shape, vec![5, 2]);
            let back = fold(&q).unwrap();
            assert_eq!(back.shape, t.shape);
            let step = q.params.step as f64;
            for v in dequantize(&q).data {
                assert_eq!((v as f64 / step).fract(), 0.0);
            }
        }
    }
}
