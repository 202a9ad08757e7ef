//! Evaluation: perplexity over a byte corpus, parameter/HBM accounting,
//! adapter-norm analysis, and the CSV emitters for all of the above.
//!
//! CSV conventions: '.' as the decimal separator, '\n' line endings, and a
//! header row on every table.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{
    build_forward, bytes_to_tokens, ForwardSpec, LoraAdapters, ModelConfig, TargetKind,
    TransformerWeights,
};
use crate::tape::Tape;
use crate::tensor::Scalar;

// ─── perplexity ──────────────────────────────────────────────────────────

/// Perplexity of `spec` on a byte corpus: `exp` of the mean next-token
/// negative log-likelihood over consecutive non-overlapping windows of
/// `seq_len` tokens. A trailing partial window still contributes as long as
/// it holds at least one prediction (two tokens).
pub fn perplexity_spec<S: Scalar>(
    spec: &ForwardSpec<'_, S>,
    corpus: &[u8],
    seq_len: usize,
) -> Result<f64> {
    if corpus.is_empty() {
        return Err(Error::Config("empty evaluation corpus".to_string()));
    }
    if seq_len < 2 {
        return Err(Error::Config("eval seq_len must be >= 2".to_string()));
    }
    if seq_len > spec.cfg.max_seq {
        return Err(Error::Config(format!(
            "eval seq_len {} exceeds model max_seq {}",
            seq_len, spec.cfg.max_seq
        )));
    }
    let tokens = bytes_to_tokens(corpus);
    if tokens.len() < 2 {
        return Err(Error::Config("corpus must tokenize to at least 2 tokens".to_string()));
    }
    let mut total_nll = 0.0f64;
    let mut total_targets = 0usize;
    for window in tokens.chunks(seq_len) {
        if window.len() < 2 {
            continue; // a lone trailing token has nothing to predict
        }
        let mut tape = Tape::new();
        let vars = build_forward(&mut tape, spec, &window[..window.len() - 1])?;
        let loss = tape.cross_entropy(vars.logits, &window[1..])?;
        let nll = tape.scalar_value(loss)?.as_f64();
        total_nll += nll * (window.len() - 1) as f64;
        total_targets += window.len() - 1;
    }
    let mean = total_nll / total_targets as f64;
    if !mean.is_finite() {
        return Err(Error::NonFinite("perplexity is not finite".to_string()));
    }
    Ok(mean.exp())
}

/// Perplexity of `weights` (optionally with adapters applied densely).
pub fn perplexity(
    cfg: &ModelConfig,
    weights: &TransformerWeights<f32>,
    adapters: Option<&LoraAdapters<f32>>,
    corpus: &[u8],
    seq_len: usize,
) -> Result<f64> {
    let mut spec = ForwardSpec::inference(cfg, weights);
    if let Some(a) = adapters {
        spec = spec.with_adapters(a);
    }
    perplexity_spec(&spec, corpus, seq_len)
}

// ─── accounting ──────────────────────────────────────────────────────────

/// Round half-up to two decimals (the convention behind every printed
/// reduction/HBM figure).
pub fn round_half_up2(x: f64) -> f64 {
    (x * 100.0 + 0.5).floor() / 100.0
}

/// One accounting row: how many parameters survive pruning, what they cost
/// at the given precision, and the headline reduction ratio.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AccountingRow {
    pub orig_params: u64,
    pub pruned_params: u64,
    pub bits_per_param: u32,
    /// 16-bit-equivalent parameter count: `pruned_params · bits / 16`.
    pub effective_params: u64,
    /// `orig_params / effective_params`, rounded half-up to 2 decimals.
    pub reduction_ratio: f64,
    /// `pruned_params · (bits/8) / 2³⁰`, rounded half-up to 2 decimals.
    pub hbm_gib: f64,
}

pub fn accounting(orig_params: u64, pruned_params: u64, bits_per_param: u32) -> Result<AccountingRow> {
    if orig_params == 0 || pruned_params == 0 {
        return Err(Error::Config("parameter counts must be positive".to_string()));
    }
    if bits_per_param != 16 && bits_per_param != 4 {
        return Err(Error::Config(format!("bits_per_param must be 16 or 4, got {bits_per_param}")));
    }
    let effective_params = (pruned_params as u128 * bits_per_param as u128 / 16) as u64;
    let reduction_ratio = round_half_up2(orig_params as f64 / effective_params as f64);
    let hbm_gib =
        round_half_up2(pruned_params as f64 * (bits_per_param as f64 / 8.0) / (1u64 << 30) as f64);
    Ok(AccountingRow {
        orig_params,
        pruned_params,
        bits_per_param,
        effective_params,
        reduction_ratio,
        hbm_gib,
    })
}

// ─── adapter norm analysis ───────────────────────────────────────────────

/// L2 norm of one attention head's slice of a materialized adapter delta.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadNormRow {
    pub layer: usize,
    pub target: TargetKind,
    pub head: usize,
    pub norm: f64,
}

/// Mean row/column L2 norm of one MLP target's delta, zero rows/columns
/// excluded from the average.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpNormRow {
    pub layer: usize,
    pub target: TargetKind,
    pub mean_norm: f64,
    /// True when every row/column was identically zero (mean reported as 0).
    pub all_zero: bool,
}

fn block_norm(data: &[f32], cols: usize, r0: usize, r1: usize, c0: usize, c1: usize) -> f64 {
    let mut acc = 0.0f64;
    for r in r0..r1 {
        for c in c0..c1 {
            let v = data[r * cols + c] as f64;
            acc += v * v;
        }
    }
    acc.sqrt()
}

/// Per-head L2 norms of the materialized deltas of all attention targets.
/// Heads slice the output rows for q/k/v and the input columns for o; the
/// per-layer head count follows from the delta shape (compact models
/// simply report fewer heads).
pub fn head_norms(cfg: &ModelConfig, adapters: &LoraAdapters<f32>) -> Result<Vec<HeadNormRow>> {
    let hd = cfg.head_dim();
    let scaling = adapters.scaling();
    let mut rows = Vec::new();
    for (target, ad) in &adapters.map {
        if !target.kind.is_attention() {
            continue;
        }
        let layer = target.layer.expect("attention targets are per-layer");
        let delta = ad.delta(scaling)?;
        let (head_dim_extent, is_rows) = match target.kind {
            TargetKind::O => (delta.cols(), false),
            _ => (delta.rows(), true),
        };
        if head_dim_extent % hd != 0 {
            return Err(Error::shape(
                "head_norms",
                format!(
                    "{}: extent {head_dim_extent} not divisible by head_dim {hd}",
                    target.weight_name()
                ),
            ));
        }
        for h in 0..head_dim_extent / hd {
            let norm = if is_rows {
                block_norm(delta.data(), delta.cols(), h * hd, (h + 1) * hd, 0, delta.cols())
            } else {
                block_norm(delta.data(), delta.cols(), 0, delta.rows(), h * hd, (h + 1) * hd)
            };
            rows.push(HeadNormRow { layer, target: target.kind, head: h, norm });
        }
    }
    Ok(rows)
}

/// Per-layer mean L2 norms of the MLP targets' deltas: row norms for
/// up/gate, column norms for down, identically-zero rows/columns excluded
/// from the mean.
pub fn mlp_layer_norms(adapters: &LoraAdapters<f32>) -> Result<Vec<MlpNormRow>> {
    let scaling = adapters.scaling();
    let mut out = Vec::new();
    for (target, ad) in &adapters.map {
        if !target.kind.is_mlp() {
            continue;
        }
        let layer = target.layer.expect("mlp targets are per-layer");
        let delta = ad.delta(scaling)?;
        let (r, c) = (delta.rows(), delta.cols());
        let norms: Vec<f64> = if target.kind == TargetKind::Down {
            (0..c).map(|j| block_norm(delta.data(), c, 0, r, j, j + 1)).collect()
        } else {
            (0..r).map(|i| block_norm(delta.data(), c, i, i + 1, 0, c)).collect()
        };
        let live: Vec<f64> = norms.into_iter().filter(|&n| n > 0.0).collect();
        let all_zero = live.is_empty();
        let mean_norm = if all_zero { 0.0 } else { live.iter().sum::<f64>() / live.len() as f64 };
        out.push(MlpNormRow { layer, target: target.kind, mean_norm, all_zero });
    }
    Ok(out)
}

// ─── CSV emitters ────────────────────────────────────────────────────────

/// Two-column series, e.g. loss traces (`step,loss`) or ppl traces
/// (`step,ppl`).
pub fn series_csv(value_header: &str, values: &[f64]) -> String {
    let mut s = format!("step,{value_header}\n");
    for (i, v) in values.iter().enumerate() {
        s.push_str(&format!("{i},{v}\n"));
    }
    s
}

/// Unified norm table: attention heads carry their index, MLP rows say
/// `na`.
pub fn norms_csv(heads: &[HeadNormRow], mlps: &[MlpNormRow]) -> String {
    let mut s = String::from("layer,target,head_or_na,norm\n");
    for r in heads {
        s.push_str(&format!("{},{},{},{}\n", r.layer, r.target.token(), r.head, r.norm));
    }
    for r in mlps {
        s.push_str(&format!("{},{},na,{}\n", r.layer, r.target.token(), r.mean_norm));
    }
    s
}

pub fn accounting_csv(rows: &[AccountingRow]) -> String {
    let mut s =
        String::from("orig_params,pruned_params,bits_per_param,effective_params,reduction,hbm_gib\n");
    for r in rows {
        s.push_str(&format!(
            "{},{},{},{},{:.2},{:.2}\n",
            r.orig_params, r.pruned_params, r.bits_per_param, r.effective_params, r.reduction_ratio,
            r.hbm_gib
        ));
    }
    s
}

/// Side-by-side comparison of labeled ppl traces on one step grid: one row
/// per arm with its trace and final value, then one row per non-baseline
/// arm with its per-step difference against the first (baseline) arm.
pub fn ablation_report(runs: &[(String, Vec<f64>)]) -> Result<String> {
    if runs.len() < 2 {
        return Err(Error::Config("ablation report needs at least two arms".to_string()));
    }
    let steps = runs[0].1.len();
    if steps == 0 {
        return Err(Error::Config("ablation traces must be non-empty".to_string()));
    }
    for (label, trace) in runs {
        if trace.len() != steps {
            return Err(Error::Config(format!(
                "trace '{label}' has {} points, expected {steps} (mismatched step grids)",
                trace.len()
            )));
        }
    }
    let mut s = String::from("label");
    for i in 0..steps {
        s.push_str(&format!(",ppl_{i}"));
    }
    s.push_str(",final\n");
    for (label, trace) in runs {
        s.push_str(label);
        for v in trace {
            s.push_str(&format!(",{v}"));
        }
        s.push_str(&format!(",{}\n", trace[steps - 1]));
    }
    let (base_label, base) = &runs[0];
    for (label, trace) in &runs[1..] {
        s.push_str(&format!("delta({label}-{base_label})"));
        for (v, b) in trace.iter().zip(base) {
            s.push_str(&format!(",{}", v - b));
        }
        s.push_str(&format!(",{}\n", trace[steps - 1] - base[steps - 1]));
    }
    Ok(s)
}
