//! Pruning: masks, structured plans, compaction and its inverse.
//!
//! Two families of artifacts describe what was pruned:
//!
//! - A [`MaskSet`] holds one 0/1 tensor per named weight (all-ones for
//!   tensors the strategy never touches: embed, gains, lm_head). Masked
//!   models keep their full geometry with zeros at pruned coordinates.
//! - A [`StructuredPlan`] lists the retained attention heads and MLP
//!   channels per layer. Plans can be lowered to masks ([`plan_to_masks`])
//!   or used to [`compact`] a model to physically smaller matrices; the two
//!   routes agree exactly (scattering the compact weights back reproduces
//!   the masked weights bit-for-bit).
//!
//! Coupling rules for structured pruning: head `h` owns rows
//! `h·head_dim..(h+1)·head_dim` of wq/wk/wv and the same columns of wo;
//! channel `c` owns row `c` of w_up/w_gate and column `c` of w_down. The
//! residual width (embed, gains, lm_head, the d_model side of projections)
//! is never pruned.
//!
//! Selection tie-breaks are pinned so every strategy is a pure function of
//! its inputs: unstructured ties prune the lowest flat index first,
//! semi-structured ties retain the lower in-group index, and structured
//! gradient ties remove the lower group index first.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{
    build_forward, ForwardSpec, ModelConfig, TargetId, TargetKind, TrainScope, TransformerWeights,
};
use crate::tape::Tape;
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PruneStrategy {
    /// Random structured: drop heads/channels uniformly at random.
    Rand,
    /// Gradient-importance structured: drop the lowest `Σ|w·∂L/∂w|` groups.
    Stru,
    /// Semi-structured n:m magnitude pruning along the input dimension.
    Semi,
    /// Unstructured global-per-tensor magnitude pruning.
    Unst,
}

impl PruneStrategy {
    pub fn token(&self) -> &'static str {
        match self {
            PruneStrategy::Rand => "rand",
            PruneStrategy::Stru => "stru",
            PruneStrategy::Semi => "semi",
            PruneStrategy::Unst => "unst",
        }
    }

    pub fn parse(s: &str) -> Result<PruneStrategy> {
        match s {
            "rand" => Ok(PruneStrategy::Rand),
            "stru" => Ok(PruneStrategy::Stru),
            "semi" => Ok(PruneStrategy::Semi),
            "unst" => Ok(PruneStrategy::Unst),
            _ => Err(Error::Config(format!("unknown prune strategy {s:?}"))),
        }
    }

    pub fn is_structured(&self) -> bool {
        matches!(self, PruneStrategy::Rand | PruneStrategy::Stru)
    }
}

// ─── masks ──────────────────────────────────────────────────────────────

/// One 0/1 mask per named weight tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskSet {
    pub masks: BTreeMap<String, Tensor<f32>>,
}

impl MaskSet {
    /// All-ones masks matching `w` (nothing pruned).
    pub fn all_ones<S: Scalar>(w: &TransformerWeights<S>) -> MaskSet {
        let masks = w
            .named()
            .into_iter()
            .map(|(name, t)| (name, Tensor::filled(t.shape().to_vec(), 1.0f32)))
            .collect();
        MaskSet { masks }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<f32>> {
        self.masks.get(name)
    }

    /// Checks the set covers exactly the named tensors of `w`, with matching
    /// shapes and strictly 0/1 entries.
    pub fn validate_against<S: Scalar>(&self, w: &TransformerWeights<S>) -> Result<()> {
        let named = w.named();
        if named.len() != self.masks.len() {
            return Err(Error::Consistency(format!(
                "mask set covers {} tensors, model has {}",
                self.masks.len(),
                named.len()
            )));
        }
        for (name, t) in named {
            let m = self
                .masks
                .get(&name)
                .ok_or_else(|| Error::Consistency(format!("mask set lacks entry for {name}")))?;
            if m.shape() != t.shape() {
                return Err(Error::shape(
                    "mask_set",
                    format!("{name}: mask {:?} vs weight {:?}", m.shape(), t.shape()),
                ));
            }
            check_binary(m, &name)?;
        }
        Ok(())
    }

    /// Number of retained (mask = 1) parameters over matrix weights, with
    /// gains counted only when requested.
    pub fn retained_params(&self, include_gains: bool) -> u64 {
        self.masks
            .iter()
            .filter(|(name, _)| include_gains || !name.ends_with("gain"))
            .map(|(_, m)| m.data().iter().filter(|&&v| v == 1.0).count() as u64)
            .sum()
    }

    /// Masks at the forward-pass scalar type.
    pub fn cast<S: Scalar>(&self) -> BTreeMap<String, Tensor<S>> {
        self.masks.iter().map(|(k, v)| (k.clone(), v.cast())).collect()
    }
}

fn check_binary(m: &Tensor<f32>, name: &str) -> Result<()> {
    if m.data().iter().any(|&v| v != 0.0 && v != 1.0) {
        return Err(Error::Consistency(format!("mask {name} contains non-binary entries")));
    }
    Ok(())
}

fn check_ratio(ratio: f64) -> Result<()> {
    if !ratio.is_finite() || !(0.0..1.0).contains(&ratio) {
        return Err(Error::Config(format!("prune ratio must lie in [0, 1), got {ratio}")));
    }
    Ok(())
}

/// Unstructured magnitude mask: prunes the `⌊ratio·numel⌋` smallest-|w|
/// entries of one tensor; ties prune the lowest flat index first.
pub fn gen_mask_unstructured(w: &Tensor<f32>, ratio: f64) -> Result<Tensor<f32>> {
    check_ratio(ratio)?;
    let numel = w.numel();
    let prune_count = (ratio * numel as f64).floor() as usize;
    let mut order: Vec<usize> = (0..numel).collect();
    order.sort_by(|&i, &j| {
        w.data()[i]
            .abs()
            .partial_cmp(&w.data()[j].abs())
            .expect("finite weights")
            .then(i.cmp(&j))
    });
    let mut mask = Tensor::filled(w.shape().to_vec(), 1.0f32);
    for &i in order.iter().take(prune_count) {
        mask.data_mut()[i] = 0.0;
    }
    Ok(mask)
}

/// Semi-structured n:m mask: within every group of `m` consecutive entries
/// along the input dimension (i.e. within a row), retain the `n` largest by
/// |w|; ties retain the lower in-group index.
pub fn gen_mask_semi(w: &Tensor<f32>, n: usize, m: usize) -> Result<Tensor<f32>> {
    let (_, cols) = w.require_matrix("gen_mask_semi")?;
    if n == 0 || m == 0 || n > m {
        return Err(Error::Config(format!("semi pattern {n}:{m} requires 1 <= n <= m")));
    }
    if cols % m != 0 {
        return Err(Error::Config(format!(
            "semi pattern {n}:{m} needs the input dim ({cols}) divisible by m"
        )));
    }
    let mut mask = Tensor::zeros(w.shape().to_vec());
    let rows = w.rows();
    for r in 0..rows {
        for g in 0..cols / m {
            let base = r * cols + g * m;
            let mut idx: Vec<usize> = (0..m).collect();
            idx.sort_by(|&i, &j| {
                w.data()[base + j]
                    .abs()
                    .partial_cmp(&w.data()[base + i].abs())
                    .expect("finite weights")
                    .then(i.cmp(&j))
            });
            for &i in idx.iter().take(n) {
                mask.data_mut()[base + i] = 1.0;
            }
        }
    }
    Ok(mask)
}

/// The seven per-layer projection matrices are the pruning surface for the
/// non-structured strategies; everything else keeps an all-ones mask.
fn layer_matrix_names(n_layers: usize) -> Vec<String> {
    let mut out = Vec::new();
    for l in 0..n_layers {
        for f in ["wq", "wk", "wv", "wo", "w_up", "w_gate", "w_down"] {
            out.push(format!("layers.{l}.{f}"));
        }
    }
    out
}

/// Unstructured mask set over every per-layer projection, each tensor pruned
/// independently at `ratio`.
pub fn gen_mask_set_unstructured(
    w: &TransformerWeights<f32>,
    ratio: f64,
) -> Result<MaskSet> {
    check_ratio(ratio)?;
    let mut set = MaskSet::all_ones(w);
    for name in layer_matrix_names(w.layers.len()) {
        let t = w
            .get(&name)
            .ok_or_else(|| Error::MissingArtifact(format!("model lacks tensor {name}")))?;
        set.masks.insert(name, gen_mask_unstructured(t, ratio)?);
    }
    Ok(set)
}

/// Semi-structured n:m mask set over every per-layer projection.
pub fn gen_mask_set_semi(w: &TransformerWeights<f32>, n: usize, m: usize) -> Result<MaskSet> {
    let mut set = MaskSet::all_ones(w);
    for name in layer_matrix_names(w.layers.len()) {
        let t = w
            .get(&name)
            .ok_or_else(|| Error::MissingArtifact(format!("model lacks tensor {name}")))?;
        set.masks.insert(name, gen_mask_semi(t, n, m)?);
    }
    Ok(set)
}

/// Elementwise `w ∘ m` after validating the mask is binary and shape-equal.
pub fn apply_mask(w: &Tensor<f32>, m: &Tensor<f32>) -> Result<Tensor<f32>> {
    check_binary(m, "mask")?;
    w.zip_map(m, "apply_mask", |a, b| a * b)
}

/// Masks every named tensor of the model.
pub fn apply_mask_set(
    w: &TransformerWeights<f32>,
    set: &MaskSet,
) -> Result<TransformerWeights<f32>> {
    set.validate_against(w)?;
    let mut out = w.clone();
    for (name, t) in out.named_mut() {
        *t = apply_mask(t, set.get(&name).expect("validated cover"))?;
    }
    Ok(out)
}

// ─── structured plans ───────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerPlan {
    /// Retained head indices, ascending.
    pub retained_heads: Vec<usize>,
    /// Retained MLP channel indices, ascending.
    pub retained_channels: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StructuredPlan {
    pub strategy: PruneStrategy,
    pub ratio: f64,
    pub seed: u64,
    /// Per-layer retention, indexed by layer; protected layers retain all.
    pub layers: Vec<LayerPlan>,
    /// Layer indices exempt from pruning.
    pub protected: Vec<usize>,
}

impl StructuredPlan {
    pub fn validate(&self, cfg: &ModelConfig) -> Result<()> {
        if self.layers.len() != cfg.n_layers {
            return Err(Error::Consistency(format!(
                "plan covers {} layers, model has {}",
                self.layers.len(),
                cfg.n_layers
            )));
        }
        for (l, lp) in self.layers.iter().enumerate() {
            check_indices("retained_heads", l, &lp.retained_heads, cfg.n_heads)?;
            check_indices("retained_channels", l, &lp.retained_channels, cfg.d_ff)?;
        }
        for &p in &self.protected {
            if p >= cfg.n_layers {
                return Err(Error::Consistency(format!("protected layer {p} out of range")));
            }
            let lp = &self.layers[p];
            if lp.retained_heads.len() != cfg.n_heads || lp.retained_channels.len() != cfg.d_ff {
                return Err(Error::Consistency(format!("protected layer {p} is pruned by the plan")));
            }
        }
        Ok(())
    }

    /// Matrix parameters of the compacted model this plan produces.
    pub fn retained_param_count(&self, cfg: &ModelConfig, include_gains: bool) -> u64 {
        let d = cfg.d_model as u64;
        let hd = cfg.head_dim() as u64;
        let mut total = (cfg.vocab as u64) * d * 2; // embed + lm_head
        for lp in &self.layers {
            let attn_width = lp.retained_heads.len() as u64 * hd;
            let ff = lp.retained_channels.len() as u64;
            total += 4 * attn_width * d; // wq, wk, wv rows + wo columns
            total += 3 * ff * d; // w_up, w_gate rows + w_down columns
            if include_gains {
                total += 2 * d;
            }
        }
        if include_gains {
            total += d;
        }
        total
    }

    /// Retained row indices of the named weight under this plan; `None`
    /// means the full row range is kept.
    pub fn retained_rows(&self, cfg: &ModelConfig, target: &TargetId) -> Option<Vec<usize>> {
        let l = target.layer?;
        let lp = &self.layers[l];
        match target.kind {
            TargetKind::Q | TargetKind::K | TargetKind::V => {
                Some(expand_heads(&lp.retained_heads, cfg.head_dim()))
            }
            TargetKind::Up | TargetKind::Gate => Some(lp.retained_channels.clone()),
            _ => None,
        }
    }

    /// Retained column indices of the named weight under this plan; `None`
    /// means the full column range is kept.
    pub fn retained_cols(&self, cfg: &ModelConfig, target: &TargetId) -> Option<Vec<usize>> {
        let l = target.layer?;
        let lp = &self.layers[l];
        match target.kind {
            TargetKind::O => Some(expand_heads(&lp.retained_heads, cfg.head_dim())),
            TargetKind::Down => Some(lp.retained_channels.clone()),
            _ => None,
        }
    }
}

fn check_indices(what: &str, layer: usize, idx: &[usize], bound: usize) -> Result<()> {
    if idx.is_empty() {
        return Err(Error::Consistency(format!("layer {layer}: {what} is empty")));
    }
    for w in idx.windows(2) {
        if w[0] >= w[1] {
            return Err(Error::Consistency(format!(
                "layer {layer}: {what} not strictly ascending"
            )));
        }
    }
    if *idx.last().expect("non-empty") >= bound {
        return Err(Error::Consistency(format!(
            "layer {layer}: {what} index {} out of range {bound}",
            idx.last().expect("non-empty")
        )));
    }
    Ok(())
}

fn expand_heads(heads: &[usize], head_dim: usize) -> Vec<usize> {
    heads.iter().flat_map(|&h| h * head_dim..(h + 1) * head_dim).collect()
}

fn protected_set(cfg: &ModelConfig, first: usize, last: usize) -> Result<Vec<usize>> {
    if first + last > cfg.n_layers {
        return Err(Error::Config(format!(
            "protected layers ({first} first + {last} last) exceed n_layers {}",
            cfg.n_layers
        )));
    }
    let mut p: Vec<usize> = (0..first).collect();
    p.extend(cfg.n_layers - last..cfg.n_layers);
    Ok(p)
}

fn removal_counts(cfg: &ModelConfig, ratio: f64) -> Result<(usize, usize)> {
    check_ratio(ratio)?;
    let heads_removed = (ratio * cfg.n_heads as f64).floor() as usize;
    let channels_removed = (ratio * cfg.d_ff as f64).floor() as usize;
    if heads_removed >= cfg.n_heads || channels_removed >= cfg.d_ff {
        return Err(Error::Config(format!(
            "ratio {ratio} leaves no heads or channels in a layer"
        )));
    }
    Ok((heads_removed, channels_removed))
}

fn full_layer_plan(cfg: &ModelConfig) -> LayerPlan {
    LayerPlan {
        retained_heads: (0..cfg.n_heads).collect(),
        retained_channels: (0..cfg.d_ff).collect(),
    }
}

/// Random structured plan: every unprotected layer loses `⌊ratio·n_heads⌋`
/// heads and `⌊ratio·d_ff⌋` channels, drawn uniformly from a ChaCha8 stream
/// seeded with `seed`.
pub fn gen_plan_structured_random(
    cfg: &ModelConfig,
    ratio: f64,
    protected_first: usize,
    protected_last: usize,
    seed: u64,
) -> Result<StructuredPlan> {
    cfg.validate()?;
    let protected = protected_set(cfg, protected_first, protected_last)?;
    let (heads_removed, channels_removed) = removal_counts(cfg, ratio)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut layers = Vec::with_capacity(cfg.n_layers);
    for l in 0..cfg.n_layers {
        if protected.contains(&l) {
            layers.push(full_layer_plan(cfg));
            continue;
        }
        let removed_heads = rand::seq::index::sample(&mut rng, cfg.n_heads, heads_removed).into_vec();
        let removed_channels =
            rand::seq::index::sample(&mut rng, cfg.d_ff, channels_removed).into_vec();
        layers.push(LayerPlan {
            retained_heads: retain_excluding(cfg.n_heads, &removed_heads),
            retained_channels: retain_excluding(cfg.d_ff, &removed_channels),
        });
    }
    let plan =
        StructuredPlan { strategy: PruneStrategy::Rand, ratio, seed, layers, protected };
    plan.validate(cfg)?;
    Ok(plan)
}

fn retain_excluding(n: usize, removed: &[usize]) -> Vec<usize> {
    let removed: std::collections::BTreeSet<usize> = removed.iter().copied().collect();
    (0..n).filter(|i| !removed.contains(i)).collect()
}

/// Gradient-importance structured plan. One forward/backward over the
/// calibration windows scores every coupled group by `Σ|w · ∂L/∂w|`; the
/// lowest-scoring `⌊ratio·n⌋` groups of each unprotected layer are removed
/// (ties remove the lower group index first).
pub fn gen_plan_structured_gradient(
    cfg: &ModelConfig,
    weights: &TransformerWeights<f32>,
    calib: &[Vec<usize>],
    ratio: f64,
    protected_first: usize,
    protected_last: usize,
) -> Result<StructuredPlan> {
    cfg.validate()?;
    let protected = protected_set(cfg, protected_first, protected_last)?;
    let (heads_removed, channels_removed) = removal_counts(cfg, ratio)?;
    if calib.is_empty() || calib.iter().any(|w| w.len() < 2) {
        return Err(Error::Config(
            "gradient plan needs a non-empty calibration batch of windows with >= 2 tokens".to_string(),
        ));
    }

    // Accumulate dL/dw summed over calibration windows.
    let mut grad_acc: BTreeMap<String, Tensor<f32>> = weights
        .named()
        .into_iter()
        .map(|(name, t)| (name, Tensor::zeros(t.shape().to_vec())))
        .collect();
    for window in calib {
        let mut tape = Tape::new();
        let spec = ForwardSpec::inference(cfg, weights).trainable(TrainScope::Base);
        let vars = build_forward(&mut tape, &spec, &window[..window.len() - 1])?;
        let loss = tape.cross_entropy(vars.logits, &window[1..])?;
        if !tape.scalar_value(loss)?.is_finite() {
            return Err(Error::NonFinite("calibration loss".to_string()));
        }
        let grads = tape.backward(loss)?;
        for (name, var) in &vars.weights {
            if let Some(g) = grads.get(*var) {
                let acc = grad_acc.get_mut(name).expect("named cover");
                let acc_new = acc.zip_map(g, "grad_acc", |a, b| a + b)?;
                *acc = acc_new;
            }
        }
    }

    // Score |w ∘ g| summed over each coupled group.
    let hd = cfg.head_dim();
    let score_block = |w: &Tensor<f32>, g: &Tensor<f32>, rows: std::ops::Range<usize>, by_rows: bool| -> f64 {
        let (r, c) = (w.rows(), w.cols());
        let mut acc = 0.0f64;
        if by_rows {
            for i in rows {
                for j in 0..c {
                    acc += (w.at(i, j) * g.at(i, j)).abs() as f64;
                }
            }
        } else {
            for i in 0..r {
                for j in rows.clone() {
                    acc += (w.at(i, j) * g.at(i, j)).abs() as f64;
                }
            }
        }
        acc
    };

    let mut layers = Vec::with_capacity(cfg.n_layers);
    let mut total_importance = 0.0f64;
    for l in 0..cfg.n_layers {
        if protected.contains(&l) {
            layers.push(full_layer_plan(cfg));
            continue;
        }
        let lw = &weights.layers[l];
        let gq = &grad_acc[&format!("layers.{l}.wq")];
        let gk = &grad_acc[&format!("layers.{l}.wk")];
        let gv = &grad_acc[&format!("layers.{l}.wv")];
        let go = &grad_acc[&format!("layers.{l}.wo")];
        let gu = &grad_acc[&format!("layers.{l}.w_up")];
        let gg = &grad_acc[&format!("layers.{l}.w_gate")];
        let gd = &grad_acc[&format!("layers.{l}.w_down")];

        let head_scores: Vec<f64> = (0..cfg.n_heads)
            .map(|h| {
                let rows = h * hd..(h + 1) * hd;
                score_block(&lw.wq, gq, rows.clone(), true)
                    + score_block(&lw.wk, gk, rows.clone(), true)
                    + score_block(&lw.wv, gv, rows.clone(), true)
                    + score_block(&lw.wo, go, rows, false)
            })
            .collect();
        let channel_scores: Vec<f64> = (0..cfg.d_ff)
            .map(|c| {
                score_block(&lw.w_up, gu, c..c + 1, true)
                    + score_block(&lw.w_gate, gg, c..c + 1, true)
                    + score_block(&lw.w_down, gd, c..c + 1, false)
            })
            .collect();
        total_importance += head_scores.iter().sum::<f64>() + channel_scores.iter().sum::<f64>();

        layers.push(LayerPlan {
            retained_heads: retain_top(&head_scores, heads_removed),
            retained_channels: retain_top(&channel_scores, channels_removed),
        });
    }
    if cfg.n_layers > protected.len() && total_importance == 0.0 {
        return Err(Error::Consistency(
            "all-zero gradient importance: calibration is degenerate for this model".to_string(),
        ));
    }

    let plan = StructuredPlan { strategy: PruneStrategy::Stru, ratio, seed: 0, layers, protected };
    plan.validate(cfg)?;
    Ok(plan)
}

/// Remove the `k` lowest-scoring groups; ties remove the lower index first.
fn retain_top(scores: &[f64], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&i, &j| scores[i].partial_cmp(&scores[j]).expect("finite scores").then(i.cmp(&j)));
    let removed: std::collections::BTreeSet<usize> = order.into_iter().take(k).collect();
    (0..scores.len()).filter(|i| !removed.contains(i)).collect()
}

/// Lower a structured plan to a full mask set (all-ones over untouched
/// tensors, zeroed head rows/columns and channel rows/columns elsewhere).
pub fn plan_to_masks(cfg: &ModelConfig, plan: &StructuredPlan) -> Result<MaskSet> {
    cfg.validate()?;
    plan.validate(cfg)?;
    let d = cfg.d_model;
    let hd = cfg.head_dim();
    let mut masks: BTreeMap<String, Tensor<f32>> = BTreeMap::new();
    masks.insert("embed".to_string(), Tensor::filled(vec![cfg.vocab, d], 1.0));
    masks.insert("lm_head".to_string(), Tensor::filled(vec![cfg.vocab, d], 1.0));
    masks.insert("final_gain".to_string(), Tensor::filled(vec![d], 1.0));
    for (l, lp) in plan.layers.iter().enumerate() {
        let head_rows = expand_heads(&lp.retained_heads, hd);
        let attn_row_mask = rows_mask(cfg.n_heads * hd, d, &head_rows);
        masks.insert(format!("layers.{l}.wq"), attn_row_mask.clone());
        masks.insert(format!("layers.{l}.wk"), attn_row_mask.clone());
        masks.insert(format!("layers.{l}.wv"), attn_row_mask);
        masks.insert(format!("layers.{l}.wo"), cols_mask(d, cfg.n_heads * hd, &head_rows));
        let ff_row_mask = rows_mask(cfg.d_ff, d, &lp.retained_channels);
        masks.insert(format!("layers.{l}.w_up"), ff_row_mask.clone());
        masks.insert(format!("layers.{l}.w_gate"), ff_row_mask);
        masks.insert(format!("layers.{l}.w_down"), cols_mask(d, cfg.d_ff, &lp.retained_channels));
        masks.insert(format!("layers.{l}.attn_gain"), Tensor::filled(vec![d], 1.0));
        masks.insert(format!("layers.{l}.mlp_gain"), Tensor::filled(vec![d], 1.0));
    }
    Ok(MaskSet { masks })
}

fn rows_mask(rows: usize, cols: usize, retained: &[usize]) -> Tensor<f32> {
    let mut m = Tensor::zeros(vec![rows, cols]);
    for &r in retained {
        for j in 0..cols {
            m.set(r, j, 1.0);
        }
    }
    m
}

fn cols_mask(rows: usize, cols: usize, retained: &[usize]) -> Tensor<f32> {
    let mut m = Tensor::zeros(vec![rows, cols]);
    for i in 0..rows {
        for &c in retained {
            m.set(i, c, 1.0);
        }
    }
    m
}

fn take_rows(t: &Tensor<f32>, rows: &[usize]) -> Result<Tensor<f32>> {
    let (_, c) = t.require_matrix("take_rows")?;
    let mut data = Vec::with_capacity(rows.len() * c);
    for &r in rows {
        data.extend_from_slice(t.row(r));
    }
    Tensor::matrix(rows.len(), c, data)
}

fn take_cols(t: &Tensor<f32>, cols: &[usize]) -> Result<Tensor<f32>> {
    let (r, _) = t.require_matrix("take_cols")?;
    let mut data = Vec::with_capacity(r * cols.len());
    for i in 0..r {
        for &c in cols {
            data.push(t.at(i, c));
        }
    }
    Tensor::matrix(r, cols.len(), data)
}

/// Physically shrink a full-shape model per the plan: retained head rows of
/// wq/wk/wv, retained head columns of wo, retained channel rows of
/// w_up/w_gate, retained channel columns of w_down. Everything else is
/// copied unchanged, so protected layers come out bit-identical.
pub fn compact(
    cfg: &ModelConfig,
    w: &TransformerWeights<f32>,
    plan: &StructuredPlan,
) -> Result<TransformerWeights<f32>> {
    plan.validate(cfg)?;
    if w.layers.len() != cfg.n_layers {
        return Err(Error::shape(
            "compact",
            format!("{} layer weight sets vs n_layers {}", w.layers.len(), cfg.n_layers),
        ));
    }
    let hd = cfg.head_dim();
    let mut out = w.clone();
    for (l, lp) in plan.layers.iter().enumerate() {
        let head_rows = expand_heads(&lp.retained_heads, hd);
        let src = &w.layers[l];
        let expect_attn = cfg.n_heads * hd;
        if src.wq.rows() != expect_attn || src.w_up.rows() != cfg.d_ff {
            return Err(Error::shape(
                "compact",
                format!("layer {l} is not full-shaped; compact expects the original geometry"),
            ));
        }
        let dst = &mut out.layers[l];
        dst.wq = take_rows(&src.wq, &head_rows)?;
        dst.wk = take_rows(&src.wk, &head_rows)?;
        dst.wv = take_rows(&src.wv, &head_rows)?;
        dst.wo = take_cols(&src.wo, &head_rows)?;
        dst.w_up = take_rows(&src.w_up, &lp.retained_channels)?;
        dst.w_gate = take_rows(&src.w_gate, &lp.retained_channels)?;
        dst.w_down = take_cols(&src.w_down, &lp.retained_channels)?;
    }
    Ok(out)
}

/// Inverse of [`compact`]: scatter compact weights back to the original
/// geometry with zeros at pruned coordinates.
pub fn scatter_compact(
    cfg: &ModelConfig,
    compacted: &TransformerWeights<f32>,
    plan: &StructuredPlan,
) -> Result<TransformerWeights<f32>> {
    plan.validate(cfg)?;
    let hd = cfg.head_dim();
    let d = cfg.d_model;
    let mut out = compacted.clone();
    for (l, lp) in plan.layers.iter().enumerate() {
        let head_rows = expand_heads(&lp.retained_heads, hd);
        let src = &compacted.layers[l];
        if src.wq.rows() != head_rows.len() || src.w_up.rows() != lp.retained_channels.len() {
            return Err(Error::shape(
                "scatter_compact",
                format!("layer {l} does not match the plan's compact geometry"),
            ));
        }
        let dst = &mut out.layers[l];
        dst.wq = scatter_rows(&src.wq, cfg.n_heads * hd, &head_rows)?;
        dst.wk = scatter_rows(&src.wk, cfg.n_heads * hd, &head_rows)?;
        dst.wv = scatter_rows(&src.wv, cfg.n_heads * hd, &head_rows)?;
        dst.wo = scatter_cols(&src.wo, cfg.n_heads * hd, &head_rows)?;
        dst.w_up = scatter_rows(&src.w_up, cfg.d_ff, &lp.retained_channels)?;
        dst.w_gate = scatter_rows(&src.w_gate, cfg.d_ff, &lp.retained_channels)?;
        dst.w_down = scatter_cols(&src.w_down, cfg.d_ff, &lp.retained_channels)?;
        debug_assert_eq!(dst.w_down.cols(), cfg.d_ff);
        debug_assert_eq!(dst.wo.rows(), d);
    }
    Ok(out)
}

pub(crate) fn scatter_rows(t: &Tensor<f32>, full_rows: usize, rows: &[usize]) -> Result<Tensor<f32>> {
    let (r, c) = t.require_matrix("scatter_rows")?;
    if r != rows.len() {
        return Err(Error::shape("scatter_rows", format!("{r} rows vs {} indices", rows.len())));
    }
    let mut out = Tensor::zeros(vec![full_rows, c]);
    for (i, &dst) in rows.iter().enumerate() {
        out.data_mut()[dst * c..(dst + 1) * c].copy_from_slice(t.row(i));
    }
    Ok(out)
}

pub(crate) fn scatter_cols(t: &Tensor<f32>, full_cols: usize, cols: &[usize]) -> Result<Tensor<f32>> {
    let (r, c) = t.require_matrix("scatter_cols")?;
    if c != cols.len() {
        return Err(Error::shape("scatter_cols", format!("{c} cols vs {} indices", cols.len())));
    }
    let mut out = Tensor::zeros(vec![r, full_cols]);
    for i in 0..r {
        for (j, &dst) in cols.iter().enumerate() {
            out.set(i, dst, t.at(i, j));
        }
    }
    Ok(out)
}
