//! Inference-cost and model-size accounting over layer manifests.
//!
//! ACE (arithmetic computation effort) sums `n_ij * i * j` over groups of
//! multiply-accumulates between `i`-bit weights and `j`-bit activations.
//! A matmul layer `h x d` applied to `l` rows contributes `l * h * d` MACs;
//! embedding lookups contribute none.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{PtqError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    Matmul,
    Embedding,
    Other,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub name: String,
    pub kind: LayerKind,
    pub in_dim: u64,
    pub out_dim: u64,
    /// Defaults to `in_dim * out_dim` when omitted from a manifest file.
    #[serde(default)]
    pub weight_param_count: Option<u64>,
    #[serde(default)]
    pub bias_param_count: u64,
    pub quantize_flag: bool,
}

impl LayerSpec {
    pub fn matmul(name: impl Into<String>, in_dim: u64, out_dim: u64, bias: bool, quantize: bool) -> Self {
        LayerSpec {
            name: name.into(),
            kind: LayerKind::Matmul,
            in_dim,
            out_dim,
            weight_param_count: Some(in_dim * out_dim),
            bias_param_count: if bias { out_dim } else { 0 },
            quantize_flag: quantize,
        }
    }

    pub fn embedding(name: impl Into<String>, rows: u64, dim: u64, quantize: bool) -> Self {
        LayerSpec {
            name: name.into(),
            kind: LayerKind::Embedding,
            in_dim: rows,
            out_dim: dim,
            weight_param_count: Some(rows * dim),
            bias_param_count: 0,
            quantize_flag: quantize,
        }
    }

    /// Layer normalization: a scale and a shift vector, never quantized.
    pub fn layer_norm(name: impl Into<String>, dim: u64) -> Self {
        LayerSpec {
            name: name.into(),
            kind: LayerKind::Other,
            in_dim: dim,
            out_dim: dim,
            weight_param_count: Some(dim),
            bias_param_count: dim,
            quantize_flag: false,
        }
    }

    pub fn weights(&self) -> u64 {
        self.weight_param_count.unwrap_or(self.in_dim * self.out_dim)
    }

    pub fn params(&self) -> u64 {
        self.weights() + self.bias_param_count
    }

    fn quantized_under(&self, skip: &BTreeSet<String>) -> bool {
        self.quantize_flag && !skip.contains(&self.name)
    }
}

/// Activation-by-activation products inside self-attention (`Q K^T` and
/// `softmax * V`), each `l * l * hidden` MACs.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttentionBlock {
    pub name: String,
    pub hidden: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelManifest {
    pub config_name: String,
    pub layers: Vec<LayerSpec>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub attention_blocks: Vec<AttentionBlock>,
}

impl ModelManifest {
    pub fn total_params(&self) -> u64 {
        self.layers.iter().map(LayerSpec::params).sum()
    }

    pub fn validate(&self) -> Result<()> {
        let mut names = BTreeSet::new();
        for l in &self.layers {
            if !names.insert(l.name.as_str()) {
                return Err(PtqError::DuplicateName(l.name.clone()));
            }
            if l.kind == LayerKind::Matmul && l.weights() != l.in_dim * l.out_dim {
                return Err(PtqError::InvalidArgument(format!(
                    "matmul layer {:?}: weight count {} != {} x {}",
                    l.name,
                    l.weights(),
                    l.in_dim,
                    l.out_dim
                )));
            }
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let m: ModelManifest = serde_json::from_str(text)?;
        m.validate()?;
        Ok(m)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes")
    }
}

/// Bit widths of matmul weights for ACE.
#[derive(Debug, Clone, PartialEq)]
pub enum WeightBits {
    /// Every matmul layer at this width.
    Uniform(u32),
    /// Quantized layers at this width, the rest at 32 bits.
    Quantized(u32),
    /// Explicit widths; quantized layers must be listed, others default to 32.
    PerLayer(BTreeMap<String, u32>),
}

impl WeightBits {
    fn for_layer(&self, layer: &LayerSpec) -> Result<u32> {
        let bits = match self {
            WeightBits::Uniform(b) => *b,
            WeightBits::Quantized(b) => {
                if layer.quantize_flag {
                    *b
                } else {
                    32
                }
            }
            WeightBits::PerLayer(map) => match map.get(&layer.name) {
                Some(&b) => b,
                None if layer.quantize_flag => return Err(PtqError::MissingBits(layer.name.clone())),
                None => 32,
            },
        };
        check_ace_bits(bits)?;
        Ok(bits)
    }
}

fn check_ace_bits(bits: u32) -> Result<()> {
    if (1..=32).contains(&bits) {
        Ok(())
    } else {
        Err(PtqError::InvalidArgument(format!("bit width {bits} outside 1..=32")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AceOptions {
    pub act_bits: u32,
    pub seq_len: u64,
    pub include_attention_products: bool,
}

impl Default for AceOptions {
    fn default() -> Self {
        AceOptions {
            act_bits: 32,
            seq_len: 128,
            include_attention_products: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AceReport {
    pub ace_total: u128,
    pub mac_total: u128,
    /// MAC counts keyed by `(weight_bits, act_bits)`.
    pub groups: BTreeMap<(u32, u32), u128>,
    pub per_layer: Vec<(String, u128)>,
}

pub fn ace(manifest: &ModelManifest, weight_bits: &WeightBits, opts: AceOptions) -> Result<AceReport> {
    check_ace_bits(opts.act_bits)?;
    if opts.seq_len == 0 {
        return Err(PtqError::InvalidArgument("sequence length must be >= 1".into()));
    }
    let l = opts.seq_len as u128;
    let j = opts.act_bits;
    let mut groups: BTreeMap<(u32, u32), u128> = BTreeMap::new();
    let mut per_layer = Vec::new();
    for layer in &manifest.layers {
        if layer.kind != LayerKind::Matmul {
            continue;
        }
        let i = weight_bits.for_layer(layer)?;
        let macs = l * layer.in_dim as u128 * layer.out_dim as u128;
        *groups.entry((i, j)).or_default() += macs;
        per_layer.push((layer.name.clone(), macs * i as u128 * j as u128));
    }
    if opts.include_attention_products {
        for block in &manifest.attention_blocks {
            let macs = 2 * l * l * block.hidden as u128;
            *groups.entry((j, j)).or_default() += macs;
            per_layer.push((block.name.clone(), macs * j as u128 * j as u128));
        }
    }
    let ace_total = groups.iter().map(|(&(i, j), &n)| n * i as u128 * j as u128).sum();
    let mac_total = groups.values().sum();
    Ok(AceReport {
        ace_total,
        mac_total,
        groups,
        per_layer,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SizeReport {
    pub quantized_bits: f64,
    pub skipped_bits: f64,
    pub step_bits: f64,
    pub total_bits: f64,
    pub baseline_bits: f64,
    pub reduction_factor: f64,
}

/// Analytic size with quantized weights at `bits` (inflated by `ocs_ratio`),
/// everything else at 32 bits and one 32-bit step per quantized tensor.
/// `bits == 32` means nothing is quantized.
pub fn model_size(manifest: &ModelManifest, bits: u32, ocs_ratio: f64, skip: &BTreeSet<String>) -> Result<SizeReport> {
    let quantizing = match bits {
        2..=8 => true,
        32 => false,
        b => return Err(PtqError::BitsOutOfRange(b)),
    };
    if !(ocs_ratio >= 0.0 && ocs_ratio.is_finite()) {
        return Err(PtqError::InvalidArgument(format!("ocs ratio must be >= 0, got {ocs_ratio}")));
    }
    let (mut quantized, mut skipped, mut steps) = (0.0f64, 0.0f64, 0.0f64);
    for layer in &manifest.layers {
        if quantizing && layer.quantized_under(skip) {
            quantized += layer.weights() as f64 * bits as f64 * (1.0 + ocs_ratio);
            skipped += layer.bias_param_count as f64 * 32.0;
            steps += 32.0;
        } else {
            skipped += layer.params() as f64 * 32.0;
        }
    }
    let total = quantized + skipped + steps;
    let baseline = manifest.total_params() as f64 * 32.0;
    Ok(SizeReport {
        quantized_bits: quantized,
        skipped_bits: skipped,
        step_bits: steps,
        total_bits: total,
        baseline_bits: baseline,
        reduction_factor: if total > 0.0 { baseline / total } else { 1.0 },
    })
}

/// Quantized weights over all parameters (weights and biases).
pub fn quantization_ratio(manifest: &ModelManifest, skip: &BTreeSet<String>) -> Result<f64> {
    let total = manifest.total_params();
    if manifest.layers.is_empty() || total == 0 {
        return Err(PtqError::InvalidArgument("empty manifest".into()));
    }
    let quantized: u64 = manifest
        .layers
        .iter()
        .filter(|l| l.quantized_under(skip))
        .map(LayerSpec::weights)
        .sum();
    Ok(quantized as f64 / total as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BertConfig {
    Tiny,
    Mini,
    Small,
    Medium,
    Base,
    Large,
}

impl BertConfig {
    pub const ALL: [BertConfig; 6] = [
        BertConfig::Tiny,
        BertConfig::Mini,
        BertConfig::Small,
        BertConfig::Medium,
        BertConfig::Base,
        BertConfig::Large,
    ];

    /// `(encoder layers, hidden size)`.
    pub fn dims(self) -> (u64, u64) {
        match self {
            BertConfig::Tiny => (2, 128),
            BertConfig::Mini => (4, 256),
            BertConfig::Small => (4, 512),
            BertConfig::Medium => (8, 512),
            BertConfig::Base => (12, 768),
            BertConfig::Large => (24, 1024),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            BertConfig::Tiny => "tiny",
            BertConfig::Mini => "mini",
            BertConfig::Small => "small",
            BertConfig::Medium => "medium",
            BertConfig::Base => "base",
            BertConfig::Large => "large",
        }
    }
}

impl std::str::FromStr for BertConfig {
    type Err = PtqError;
    fn from_str(s: &str) -> Result<Self> {
        BertConfig::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| PtqError::InvalidArgument(format!("unknown BERT config {s:?}")))
    }
}

pub const BERT_VOCAB: u64 = 30522;
pub const BERT_MAX_POSITIONS: u64 = 512;
pub const BERT_TYPE_VOCAB: u64 = 2;
pub const BERT_NUM_LABELS: u64 = 2;
pub const CLASSIFIER_LAYER: &str = "classifier";

/// Standard BERT inventory with the weight-only policy: embeddings and every
/// 2-D linear weight quantized except the classifier; biases and
/// normalization parameters kept at full precision.
pub fn gen_bert_manifest(config: BertConfig) -> ModelManifest {
    let (n_layers, h) = config.dims();
    let ffn = 4 * h;
    let mut layers = vec![
        LayerSpec::embedding("embeddings.word_embeddings", BERT_VOCAB, h, true),
        LayerSpec::embedding("embeddings.position_embeddings", BERT_MAX_POSITIONS, h, true),
        LayerSpec::embedding("embeddings.token_type_embeddings", BERT_TYPE_VOCAB, h, true),
        LayerSpec::layer_norm("embeddings.LayerNorm", h),
    ];
    let mut attention_blocks = Vec::new();
    for i in 0..n_layers {
        let p = format!("encoder.layer.{i}");
        for proj in ["query", "key", "value"] {
            layers.push(LayerSpec::matmul(format!("{p}.attention.self.{proj}"), h, h, true, true));
        }
        layers.push(LayerSpec::matmul(format!("{p}.attention.output.dense"), h, h, true, true));
        layers.push(LayerSpec::layer_norm(format!("{p}.attention.output.LayerNorm"), h));
        layers.push(LayerSpec::matmul(format!("{p}.intermediate.dense"), h, ffn, true, true));
        layers.push(LayerSpec::matmul(format!("{p}.output.dense"), ffn, h, true, true));
        layers.push(LayerSpec::layer_norm(format!("{p}.output.LayerNorm"), h));
        attention_blocks.push(AttentionBlock {
            name: format!("{p}.attention.scores"),
            hidden: h,
        });
    }
    layers.push(LayerSpec::matmul("pooler.dense", h, h, true, true));
    layers.push(LayerSpec::matmul(CLASSIFIER_LAYER, h, BERT_NUM_LABELS, true, false));
    ModelManifest {
        config_name: format!("bert-{}", config.name()),
        layers,
        attention_blocks,
    }
}

/// Everything the CLI prints for one configuration and bit width.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CostReport {
    pub config: String,
    pub bits: u32,
    pub act_bits: u32,
    pub seq_len: u64,
    pub ace_total: u128,
    pub mac_total: u128,
    pub model_size_bits: f64,
    pub size_reduction_factor: f64,
    pub quantization_ratio: f64,
}

impl CostReport {
    pub const CSV_HEADER: &'static str = "config,bits,size_bits,ace,ratio";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{}",
            self.config, self.bits, self.model_size_bits, self.ace_total, self.quantization_ratio
        )
    }
}

/// ACE plus size for `bits` (32 = unquantized) on quantized layers.
pub fn cost_report(
    manifest: &ModelManifest,
    bits: u32,
    ocs_ratio: f64,
    skip: &BTreeSet<String>,
    opts: AceOptions,
) -> Result<CostReport> {
    let mut effective = manifest.clone();
    for l in &mut effective.layers {
        l.quantize_flag = l.quantized_under(skip);
    }
    let ace_bits = if bits == 32 {
        WeightBits::Uniform(32)
    } else {
        WeightBits::Quantized(bits)
    };
    let a = ace(&effective, &ace_bits, opts)?;
    let size = model_size(manifest, bits, ocs_ratio, skip)?;
    let ratio = if bits == 32 { 0.0 } else { quantization_ratio(manifest, skip)? };
    Ok(CostReport {
        config: manifest.config_name.clone(),
        bits,
        act_bits: opts.act_bits,
        seq_len: opts.seq_len,
        ace_total: a.ace_total,
        mac_total: a.mac_total,
        model_size_bits: size.total_bits,
        size_reduction_factor: size.reduction_factor,
        quantization_ratio: ratio,
    })
}
