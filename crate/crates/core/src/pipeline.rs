//! Model-level quantization over an archive.
//!
//! Each float32 tensor is classified exactly once: skipped by name pattern,
//! ineligible (rank < 2 or fewer than `min_elements` elements), or quantized.
//! Quantized tensors are stored as int8 records named `<name>.codes`; their
//! parameters live in the archive metadata (JSON, see [`QuantizedMetadata`]).

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::aciq;
use crate::error::{PtqError, Result};
use crate::ocs::{self, SplitMap, SplitMode};
use crate::quant::{self, Bits, Method, QuantParams, QuantizedTensor, Tensor};
use crate::store::{Archive, DType, TensorData, TensorRecord};

pub const CODES_SUFFIX: &str = ".codes";
pub const METADATA_FORMAT: &str = "ptq-quantized";
pub const DEFAULT_MIN_ELEMENTS: usize = 1024;
pub const DEFAULT_SKIP_PATTERNS: [&str; 3] = ["*classifier*", "*cls*", "*head*"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantPolicy {
    pub method: Method,
    pub bits: Bits,
    pub ocs_ratio: f64,
    pub skip_patterns: Vec<String>,
    pub min_elements: usize,
}

impl QuantPolicy {
    pub fn new(method: Method, bits: Bits) -> Self {
        QuantPolicy {
            method,
            bits,
            ocs_ratio: ocs::DEFAULT_RATIO,
            skip_patterns: DEFAULT_SKIP_PATTERNS.iter().map(|s| s.to_string()).collect(),
            min_elements: DEFAULT_MIN_ELEMENTS,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.ocs_ratio) {
            return Err(PtqError::InvalidArgument(format!(
                "ocs ratio must lie in [0, 1], got {}",
                self.ocs_ratio
            )));
        }
        for p in &self.skip_patterns {
            glob::Pattern::new(p)
                .map_err(|e| PtqError::InvalidArgument(format!("bad skip pattern {p:?}: {e}")))?;
        }
        Ok(())
    }

    fn is_skipped(&self, name: &str) -> bool {
        self.skip_patterns
            .iter()
            .filter_map(|p| glob::Pattern::new(p).ok())
            .any(|p| p.matches(name))
    }

    pub fn classify(&self, rec: &TensorRecord) -> Status {
        if self.is_skipped(&rec.name) {
            Status::Skipped
        } else if rec.dtype() != DType::F32 || rec.shape.len() < 2 || rec.data.len() < self.min_elements {
            Status::Ineligible
        } else {
            Status::Quantized
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Quantized,
    Skipped,
    Ineligible,
}

impl Status {
    pub fn as_str(self) -> &'static str {
        match self {
            Status::Quantized => "quantized",
            Status::Skipped => "skipped",
            Status::Ineligible => "ineligible",
        }
    }
}

/// Per-tensor entry of the quantized archive's metadata document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorMeta {
    pub name: String,
    pub status: Status,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub codes: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub method: Option<Method>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scheme: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub params: Option<QuantParams>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub residual: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub iterations: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split_map: Option<SplitMap>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub original_shape: Option<Vec<u64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantizedMetadata {
    pub format: String,
    pub version: u32,
    pub policy: QuantPolicy,
    pub source_metadata: String,
    pub tensors: Vec<TensorMeta>,
}

impl QuantizedMetadata {
    pub fn parse(text: &str) -> Result<Self> {
        let meta: QuantizedMetadata =
            serde_json::from_str(text).map_err(|e| PtqError::Metadata(format!("not a quantized archive: {e}")))?;
        if meta.format != METADATA_FORMAT || meta.version != 1 {
            return Err(PtqError::Metadata(format!(
                "unsupported metadata format {:?} v{}",
                meta.format, meta.version
            )));
        }
        Ok(meta)
    }
}

mod inf_as_string {
    use serde::Serializer;

    pub fn serialize<S: Serializer>(v: &Option<f64>, s: S) -> Result<S::Ok, S::Error> {
        match v {
            Some(x) if x.is_infinite() => s.serialize_str(if *x > 0.0 { "inf" } else { "-inf" }),
            Some(x) => s.serialize_f64(*x),
            None => s.serialize_none(),
        }
    }
}

pub(crate) fn fmt_opt<T: std::fmt::Display>(v: &Option<T>) -> String {
    v.as_ref().map(|x| x.to_string()).unwrap_or_default()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReportEntry {
    pub name: String,
    pub status: Status,
    pub method: Option<Method>,
    pub bits: Option<u32>,
    pub step: Option<f32>,
    pub clip_alpha: Option<f32>,
    pub sigma: Option<f64>,
    pub split_count: Option<usize>,
    pub mse: Option<f64>,
    #[serde(serialize_with = "inf_as_string::serialize")]
    pub sqnr_db: Option<f64>,
    pub element_count: u64,
    /// Elements actually stored, including OCS duplicates.
    pub stored_elements: u64,
    pub stored_bits_per_element: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Report {
    pub policy: QuantPolicy,
    pub entries: Vec<ReportEntry>,
    pub quantization_ratio: f64,
    pub size_bits: f64,
    pub baseline_bits: f64,
    pub reduction_factor: f64,
    pub mean_mse: f64,
    pub warnings: Vec<String>,
}

impl Report {
    pub const CSV_HEADER: &'static str =
        "name,status,method,bits,step,clip_alpha,split_count,mse,sqnr_db,element_count";

    fn from_entries(policy: QuantPolicy, entries: Vec<ReportEntry>, warnings: Vec<String>) -> Self {
        let total: u64 = entries.iter().map(|e| e.element_count).sum();
        let quantized: Vec<&ReportEntry> = entries.iter().filter(|e| e.status == Status::Quantized).collect();
        let q_elems: u64 = quantized.iter().map(|e| e.element_count).sum();
        let size_bits: f64 = entries
            .iter()
            .map(|e| {
                let step = if e.status == Status::Quantized { 32.0 } else { 0.0 };
                e.stored_elements as f64 * e.stored_bits_per_element as f64 + step
            })
            .sum();
        let baseline_bits: f64 = entries
            .iter()
            .map(|e| {
                let bits = if e.status == Status::Quantized { 32 } else { e.stored_bits_per_element };
                e.element_count as f64 * bits as f64
            })
            .sum();
        let mean_mse = if quantized.is_empty() {
            0.0
        } else {
            quantized.iter().filter_map(|e| e.mse).sum::<f64>() / quantized.len() as f64
        };
        Report {
            policy,
            entries,
            quantization_ratio: if total == 0 { 0.0 } else { q_elems as f64 / total as f64 },
            size_bits,
            baseline_bits,
            reduction_factor: if size_bits > 0.0 { baseline_bits / size_bits } else { 1.0 },
            mean_mse,
            warnings,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(Self::CSV_HEADER);
        out.push('\n');
        for e in &self.entries {
            let sqnr = match e.sqnr_db {
                Some(v) if v.is_infinite() => "inf".to_string(),
                v => fmt_opt(&v),
            };
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{}\n",
                e.name,
                e.status.as_str(),
                fmt_opt(&e.method),
                fmt_opt(&e.bits),
                fmt_opt(&e.step),
                fmt_opt(&e.clip_alpha),
                fmt_opt(&e.split_count),
                fmt_opt(&e.mse),
                sqnr,
                e.element_count
            ));
        }
        out
    }
}

fn quantize_tensor(t: &Tensor, policy: &QuantPolicy) -> Result<QuantizedTensor> {
    match policy.method {
        Method::Lq => quant::quantize_lq(t, policy.bits),
        Method::Aciq => aciq::quantize_aciq(t, policy.bits),
        Method::OcsNaive => ocs::quantize_ocs(t, policy.bits, policy.ocs_ratio, SplitMode::Naive),
        Method::OcsQa => ocs::quantize_ocs(t, policy.bits, policy.ocs_ratio, SplitMode::Qa),
    }
}

/// Float reconstruction at the original shape.
pub fn reconstruct(q: &QuantizedTensor) -> Result<Tensor> {
    if q.split_map.is_some() {
        ocs::fold(q)
    } else {
        Ok(quant::dequantize(q))
    }
}

struct Processed {
    records: Vec<TensorRecord>,
    meta: TensorMeta,
    entry: ReportEntry,
    warning: Option<String>,
}

fn passthrough(rec: &TensorRecord, status: Status) -> Processed {
    let n = rec.data.len() as u64;
    Processed {
        records: vec![rec.clone()],
        meta: TensorMeta {
            name: rec.name.clone(),
            status,
            codes: None,
            method: None,
            scheme: None,
            params: None,
            sigma: None,
            residual: None,
            iterations: None,
            split_map: None,
            original_shape: None,
        },
        entry: ReportEntry {
            name: rec.name.clone(),
            status,
            method: None,
            bits: None,
            step: None,
            clip_alpha: None,
            sigma: None,
            split_count: None,
            mse: None,
            sqnr_db: None,
            element_count: n,
            stored_elements: n,
            stored_bits_per_element: rec.dtype().size_bytes() as u32 * 8,
        },
        warning: None,
    }
}

fn process(rec: &TensorRecord, policy: &QuantPolicy) -> Result<Processed> {
    let status = policy.classify(rec);
    if status != Status::Quantized {
        return Ok(passthrough(rec, status));
    }
    let data = rec.data.as_f32().expect("classified as float32");
    let t = Tensor::new(rec.shape_usize(), data.to_vec())?;
    let q = quantize_tensor(&t, policy)?.with_name(&rec.name);
    q.validate()?;
    let back = reconstruct(&q)?;
    let mse = quant::mse(&t.data, &back.data)?;
    let sqnr = quant::sqnr_from(quant::mean_square(&t.data), mse);
    let warning = (q.method != policy.method).then(|| {
        format!(
            "{}: constant tensor, {} fell back to {}",
            rec.name, policy.method, q.method
        )
    });
    let codes_name = format!("{}{}", rec.name, CODES_SUFFIX);
    let codes = TensorRecord::new(
        codes_name.clone(),
        q.shape.iter().map(|&d| d as u64).collect(),
        TensorData::I8(q.codes.clone()),
    )?;
    let n = t.data.len() as u64;
    Ok(Processed {
        records: vec![codes],
        meta: TensorMeta {
            name: rec.name.clone(),
            status,
            codes: Some(codes_name),
            method: Some(q.method),
            scheme: Some(q.params.scheme().to_string()),
            params: Some(q.params),
            sigma: q.clip.map(|c| c.sigma),
            residual: q.clip.map(|c| c.residual),
            iterations: q.clip.map(|c| c.iterations),
            split_map: q.split_map.clone(),
            original_shape: Some(rec.shape.clone()),
        },
        entry: ReportEntry {
            name: rec.name.clone(),
            status,
            method: Some(q.method),
            bits: Some(q.params.bits.get()),
            step: Some(q.params.step),
            clip_alpha: q.params.clip_alpha,
            sigma: q.clip.map(|c| c.sigma),
            split_count: q.split_map.as_ref().map(|m| m.events.len()),
            mse: Some(mse),
            sqnr_db: Some(sqnr),
            element_count: n,
            stored_elements: q.codes.len() as u64,
            stored_bits_per_element: q.params.bits.get(),
        },
        warning,
    })
}

/// Quantizes every eligible tensor. Any tensor failure aborts the whole run.
pub fn quantize_archive(archive: &Archive, policy: &QuantPolicy) -> Result<(Archive, Report)> {
    policy.validate()?;
    archive.validate()?;
    let processed: Vec<Processed> = archive
        .records
        .par_iter()
        .map(|rec| process(rec, policy).map_err(|e| e.in_tensor(&rec.name)))
        .collect::<Result<_>>()?;

    let mut records = Vec::new();
    let mut metas = Vec::new();
    let mut entries = Vec::new();
    let mut warnings = Vec::new();
    for p in processed {
        records.extend(p.records);
        metas.push(p.meta);
        entries.push(p.entry);
        warnings.extend(p.warning);
    }
    let metadata = QuantizedMetadata {
        format: METADATA_FORMAT.into(),
        version: 1,
        policy: policy.clone(),
        source_metadata: archive.metadata.clone(),
        tensors: metas,
    };
    let out = Archive::new(records, serde_json::to_string_pretty(&metadata)?)?;
    Ok((out, Report::from_entries(policy.clone(), entries, warnings)))
}

/// Rebuilds a quantized tensor from its codes record and metadata entry.
pub fn load_quantized(archive: &Archive, meta: &TensorMeta) -> Result<QuantizedTensor> {
    let missing = |what: &str| PtqError::Metadata(format!("tensor {:?} lacks {what}", meta.name));
    let codes_name = meta.codes.as_deref().ok_or_else(|| missing("codes"))?;
    let params = meta.params.ok_or_else(|| missing("params"))?;
    let method = meta.method.ok_or_else(|| missing("method"))?;
    let original_shape = meta.original_shape.as_ref().ok_or_else(|| missing("original_shape"))?;
    let rec = archive.get(codes_name)?;
    let codes = rec
        .data
        .as_i8()
        .ok_or_else(|| PtqError::Metadata(format!("{codes_name:?} is {}, expected int8", rec.dtype().name())))?;
    let q = QuantizedTensor {
        name: meta.name.clone(),
        codes: codes.to_vec(),
        shape: rec.shape_usize(),
        params,
        method,
        original_shape: original_shape.iter().map(|&d| d as usize).collect(),
        split_map: meta.split_map.clone(),
        clip: None,
    };
    q.validate().map_err(|e| e.in_tensor(&meta.name))?;
    Ok(q)
}

/// Replaces each quantized tensor by its float reconstruction (folded back
/// to the original shape for OCS). The source metadata is restored.
pub fn dequantize_archive(qarchive: &Archive) -> Result<Archive> {
    let meta = QuantizedMetadata::parse(&qarchive.metadata)?;
    let records = meta
        .tensors
        .par_iter()
        .map(|tm| -> Result<TensorRecord> {
            match tm.status {
                Status::Quantized => {
                    let q = load_quantized(qarchive, tm)?;
                    let t = reconstruct(&q).map_err(|e| e.in_tensor(&tm.name))?;
                    TensorRecord::f32(tm.name.clone(), &t.shape, t.data)
                }
                _ => qarchive.get(&tm.name).cloned(),
            }
        })
        .collect::<Result<Vec<_>>>()?;
    Archive::new(records, meta.source_metadata)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CompareRow {
    pub name: String,
    pub mse: f64,
    #[serde(serialize_with = "inf_as_string::serialize")]
    pub sqnr_db: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CompareTable {
    pub rows: Vec<CompareRow>,
    pub mean_mse: f64,
    /// Mean over tensors with finite SQNR.
    pub mean_sqnr_db: Option<f64>,
}

impl CompareTable {
    pub const CSV_HEADER: &'static str = "name,mse,sqnr_db";

    pub fn to_csv(&self) -> String {
        let mut out = format!("{}\n", Self::CSV_HEADER);
        for r in &self.rows {
            let sqnr = match r.sqnr_db {
                Some(v) if v.is_infinite() => "inf".to_string(),
                v => fmt_opt(&v),
            };
            out.push_str(&format!("{},{},{}\n", r.name, r.mse, sqnr));
        }
        out
    }
}

/// Per-tensor MSE and SQNR of `b` against reference `a`.
pub fn compare_archives(a: &Archive, b: &Archive) -> Result<CompareTable> {
    if a.records.len() != b.records.len() {
        return Err(PtqError::ShapeMismatch(format!(
            "archives hold {} and {} tensors",
            a.records.len(),
            b.records.len()
        )));
    }
    let mut rows = Vec::with_capacity(a.records.len());
    for ra in &a.records {
        let rb = b.get(&ra.name)?;
        if ra.shape != rb.shape {
            return Err(PtqError::ShapeMismatch(format!(
                "tensor {:?}: {:?} vs {:?}",
                ra.name, ra.shape, rb.shape
            )));
        }
        let (xa, xb) = (ra.data.to_f64(), rb.data.to_f64());
        let n = xa.len().max(1) as f64;
        let mse = xa.iter().zip(&xb).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / n;
        let power = xa.iter().map(|x| x * x).sum::<f64>() / n;
        rows.push(CompareRow {
            name: ra.name.clone(),
            mse,
            sqnr_db: Some(quant::sqnr_from(power, mse)),
        });
    }
    let mean_mse = if rows.is_empty() {
        0.0
    } else {
        rows.iter().map(|r| r.mse).sum::<f64>() / rows.len() as f64
    };
    let finite: Vec<f64> = rows.iter().filter_map(|r| r.sqnr_db).filter(|v| v.is_finite()).collect();
    let mean_sqnr_db = (!finite.is_empty()).then(|| finite.iter().sum::<f64>() / finite.len() as f64);
    Ok(CompareTable {
        rows,
        mean_mse,
        mean_sqnr_db,
    })
}
