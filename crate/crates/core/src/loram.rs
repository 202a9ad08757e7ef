//! Training stages: alignment pretraining, LoRA fine-tuning on a frozen
//! (pruned / quantized) base, adapter recovery, merge, and the end-to-end
//! pipeline.
//!
//! Determinism contract: every stage is a pure function of (config, inputs,
//! seed). Batch gradients are accumulated one sequence at a time and divided
//! by `batch_size` once, so the `micro_batch` setting never changes the
//! arithmetic — it is validated (must divide `batch_size`) but exists only
//! as a scheduling knob.
//!
//! Masked training contract: when a mask set is supplied, alignment zeroes
//! the gradient at pruned coordinates before every optimizer step (Adam
//! moments then stay at zero there, so pruned weights never regrow), and
//! LoRA fine-tuning in `masked` delta mode pins the applied delta — and
//! therefore its gradient — to zero at pruned coordinates.

use serde::{Deserialize, Serialize};

use crate::adam::{Adam, AdamParams};
use crate::corpus;
use crate::error::{Error, Result};
use crate::model::{
    build_forward, bytes_to_tokens, init_adapters, DeltaMaskMode, ForwardSpec, LoraAdapters,
    ModelConfig, TrainScope, TransformerWeights,
};
use crate::prune::{
    self, apply_mask_set, compact, gen_mask_set_semi, gen_mask_set_unstructured,
    gen_plan_structured_gradient, gen_plan_structured_random, MaskSet, PruneStrategy,
    StructuredPlan,
};
use crate::quant::{dequantize_model, quantize_model, Codebook, QuantizedModel};
use crate::tape::Tape;
use crate::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

// ─── training configuration ─────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    /// Scheduling granularity; must divide `batch_size`. Results are
    /// independent of it by construction.
    pub micro_batch: usize,
    pub seq_len: usize,
    pub steps: usize,
    pub seed: u64,
    pub delta_mask_mode: DeltaMaskMode,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-3,
            batch_size: 8,
            micro_batch: 8,
            seq_len: 48,
            steps: 100,
            seed: 0,
            delta_mask_mode: DeltaMaskMode::Masked,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.micro_batch == 0 {
            return Err(Error::Config("batch_size and micro_batch must be >= 1".to_string()));
        }
        if self.batch_size % self.micro_batch != 0 {
            return Err(Error::Config(format!(
                "micro_batch {} must divide batch_size {}",
                self.micro_batch, self.batch_size
            )));
        }
        if self.seq_len < 2 {
            return Err(Error::Config("seq_len must be >= 2 (one input, one target)".to_string()));
        }
        self.adam_params().validate()
    }

    pub fn adam_params(&self) -> AdamParams {
        AdamParams { lr: self.lr, beta1: self.beta1, beta2: self.beta2, eps: self.eps }
    }
}

/// Tokenize a byte corpus and check it can yield training windows.
fn corpus_tokens(corpus: &[u8], seq_len: usize) -> Result<Vec<usize>> {
    if corpus.is_empty() {
        return Err(Error::Config("empty training corpus".to_string()));
    }
    if corpus.len() < seq_len {
        return Err(Error::Config(format!(
            "corpus of {} bytes is shorter than seq_len {}",
            corpus.len(),
            seq_len
        )));
    }
    Ok(bytes_to_tokens(corpus))
}

fn sample_window<'t>(rng: &mut ChaCha8Rng, tokens: &'t [usize], seq_len: usize) -> &'t [usize] {
    let start = rng.gen_range(0..=tokens.len() - seq_len);
    &tokens[start..start + seq_len]
}

// ─── alignment (continued pretraining) ──────────────────────────────────

/// Full-parameter language-model training of `weights` on `corpus`. With a
/// mask set, pruned coordinates are zeroed in the weights up front and their
/// gradients suppressed every step, so they remain exactly zero throughout.
/// Returns the per-step mean loss trace. Optimizer state is local to the
/// call and discarded afterwards.
pub fn align_pretrain(
    cfg: &ModelConfig,
    weights: &mut TransformerWeights<f32>,
    masks: Option<&MaskSet>,
    corpus: &[u8],
    tc: &TrainConfig,
) -> Result<Vec<f64>> {
    cfg.validate()?;
    tc.validate()?;
    if tc.seq_len > cfg.max_seq {
        return Err(Error::Config(format!(
            "seq_len {} exceeds model max_seq {}",
            tc.seq_len, cfg.max_seq
        )));
    }
    if let Some(set) = masks {
        set.validate_against(weights)?;
        *weights = apply_mask_set(weights, set)?;
    }
    let tokens = corpus_tokens(corpus, tc.seq_len)?;
    let mut rng = ChaCha8Rng::seed_from_u64(tc.seed);
    let mut opt: Adam<f32> = Adam::new(tc.adam_params())?;
    let mut trace = Vec::with_capacity(tc.steps);

    for step in 0..tc.steps {
        let names: Vec<String> = weights.named().iter().map(|(n, _)| n.clone()).collect();
        let mut grad_sum: Vec<Tensor<f32>> =
            weights.named().iter().map(|(_, t)| Tensor::zeros(t.shape().to_vec())).collect();
        let mut loss_sum = 0.0f64;

        for _ in 0..tc.batch_size {
            let window = sample_window(&mut rng, &tokens, tc.seq_len);
            let mut tape = Tape::new();
            let spec = ForwardSpec::inference(cfg, weights).trainable(TrainScope::Base);
            let vars = build_forward(&mut tape, &spec, &window[..window.len() - 1])?;
            let loss = tape.cross_entropy(vars.logits, &window[1..])?;
            loss_sum += tape.scalar_value(loss)? as f64;
            let grads = tape.backward(loss)?;
            for (i, (_, var)) in vars.weights.iter().enumerate() {
                if let Some(g) = grads.get(*var) {
                    grad_sum[i] = grad_sum[i].zip_map(g, "batch_accum", |a, b| a + b)?;
                }
            }
        }

        let mean_loss = loss_sum / tc.batch_size as f64;
        if !mean_loss.is_finite() {
            return Err(Error::NonFinite(format!("alignment loss at step {step}")));
        }
        trace.push(mean_loss);

        let inv_b = 1.0 / tc.batch_size as f32;
        for (i, g) in grad_sum.iter_mut().enumerate() {
            *g = g.map(|v| v * inv_b);
            if let Some(set) = masks {
                if let Some(m) = set.get(&names[i]) {
                    *g = g.zip_map(m, "mask_grad", |gv, mv| gv * mv)?;
                }
            }
        }
        let mut named_mut = weights.named_mut();
        let mut params: Vec<&mut Tensor<f32>> =
            named_mut.iter_mut().map(|(_, t)| &mut **t).collect();
        let grad_refs: Vec<&Tensor<f32>> = grad_sum.iter().collect();
        opt.step(&mut params, &grad_refs)?;
    }
    Ok(trace)
}

// ─── LoRA fine-tuning on a frozen base ──────────────────────────────────

/// The frozen base the adapters train against. A quantized base is
/// dequantized per forward pass; its packed codes are never touched.
pub enum BaseModel<'a> {
    Plain(&'a TransformerWeights<f32>),
    Quantized(&'a QuantizedModel),
}

impl<'a> BaseModel<'a> {
    fn materialize(&self) -> Result<std::borrow::Cow<'a, TransformerWeights<f32>>> {
        match self {
            BaseModel::Plain(w) => Ok(std::borrow::Cow::Borrowed(*w)),
            BaseModel::Quantized(q) => Ok(std::borrow::Cow::Owned(dequantize_model(q)?)),
        }
    }
}

/// Adapter-only training against a frozen base. Returns the per-step mean
/// loss trace; `adapters` is updated in place.
pub fn train_lora(
    cfg: &ModelConfig,
    base: &BaseModel<'_>,
    adapters: &mut LoraAdapters<f32>,
    masks: Option<&MaskSet>,
    corpus: &[u8],
    tc: &TrainConfig,
) -> Result<Vec<f64>> {
    cfg.validate()?;
    tc.validate()?;
    if tc.seq_len > cfg.max_seq {
        return Err(Error::Config(format!(
            "seq_len {} exceeds model max_seq {}",
            tc.seq_len, cfg.max_seq
        )));
    }
    let tokens = corpus_tokens(corpus, tc.seq_len)?;
    let mask_map = masks.map(|set| set.cast::<f32>());
    let mut rng = ChaCha8Rng::seed_from_u64(tc.seed);
    let mut opt: Adam<f32> = Adam::new(tc.adam_params())?;
    let mut trace = Vec::with_capacity(tc.steps);

    for step in 0..tc.steps {
        let mut grad_sum: Vec<Tensor<f32>> = adapters
            .map
            .values()
            .flat_map(|ad| [Tensor::zeros(ad.a.shape().to_vec()), Tensor::zeros(ad.b.shape().to_vec())])
            .collect();
        let mut loss_sum = 0.0f64;

        for _ in 0..tc.batch_size {
            let window = sample_window(&mut rng, &tokens, tc.seq_len);
            let base_w = base.materialize()?;
            let mut spec = ForwardSpec::inference(cfg, &base_w)
                .with_adapters(adapters)
                .trainable(TrainScope::Adapters);
            if let Some(m) = &mask_map {
                spec = spec.with_masks(m, tc.delta_mask_mode).trainable(TrainScope::Adapters);
            }
            let mut tape = Tape::new();
            let vars = build_forward(&mut tape, &spec, &window[..window.len() - 1])?;
            let loss = tape.cross_entropy(vars.logits, &window[1..])?;
            loss_sum += tape.scalar_value(loss)? as f64;
            let grads = tape.backward(loss)?;
            for (i, (_, a_var, b_var)) in vars.adapters.iter().enumerate() {
                if let Some(g) = grads.get(*a_var) {
                    grad_sum[2 * i] = grad_sum[2 * i].zip_map(g, "batch_accum", |x, y| x + y)?;
                }
                if let Some(g) = grads.get(*b_var) {
                    grad_sum[2 * i + 1] =
                        grad_sum[2 * i + 1].zip_map(g, "batch_accum", |x, y| x + y)?;
                }
            }
        }

        let mean_loss = loss_sum / tc.batch_size as f64;
        if !mean_loss.is_finite() {
            return Err(Error::NonFinite(format!("fine-tuning loss at step {step}")));
        }
        trace.push(mean_loss);

        let inv_b = 1.0 / tc.batch_size as f32;
        for g in grad_sum.iter_mut() {
            *g = g.map(|v| v * inv_b);
        }
        let mut params: Vec<&mut Tensor<f32>> = adapters
            .map
            .values_mut()
            .flat_map(|ad| [&mut ad.a, &mut ad.b])
            .collect();
        let grad_refs: Vec<&Tensor<f32>> = grad_sum.iter().collect();
        opt.step(&mut params, &grad_refs)?;
    }
    Ok(trace)
}

// ─── recovery and merge ─────────────────────────────────────────────────

/// Recover adapters trained on a compacted model to the original geometry:
/// B rows scatter to the retained output coordinates, A columns to the
/// retained input coordinates, zeros elsewhere. Without a plan (the
/// non-structured strategies keep full geometry) recovery is the identity.
pub fn recover(
    cfg: &ModelConfig,
    adapters: &LoraAdapters<f32>,
    plan: Option<&StructuredPlan>,
) -> Result<LoraAdapters<f32>> {
    let Some(plan) = plan else { return Ok(adapters.clone()) };
    cfg.validate()?;
    plan.validate(cfg)?;
    let mut out = adapters.clone();
    for (target, ad) in out.map.iter_mut() {
        let (full_out, full_in) = full_dims(cfg, target.kind);
        if let Some(rows) = plan.retained_rows(cfg, target) {
            if ad.b.rows() != rows.len() {
                return Err(Error::shape(
                    "recover",
                    format!(
                        "{}: adapter B has {} rows, plan retains {}",
                        target.weight_name(),
                        ad.b.rows(),
                        rows.len()
                    ),
                ));
            }
            ad.b = prune::scatter_rows(&ad.b, full_out, &rows)?;
        } else if ad.b.rows() != full_out {
            return Err(Error::shape(
                "recover",
                format!("{}: adapter B has {} rows, expected {full_out}", target.weight_name(), ad.b.rows()),
            ));
        }
        if let Some(cols) = plan.retained_cols(cfg, target) {
            if ad.a.cols() != cols.len() {
                return Err(Error::shape(
                    "recover",
                    format!(
                        "{}: adapter A has {} cols, plan retains {}",
                        target.weight_name(),
                        ad.a.cols(),
                        cols.len()
                    ),
                ));
            }
            ad.a = prune::scatter_cols(&ad.a, full_in, &cols)?;
        } else if ad.a.cols() != full_in {
            return Err(Error::shape(
                "recover",
                format!("{}: adapter A has {} cols, expected {full_in}", target.weight_name(), ad.a.cols()),
            ));
        }
    }
    Ok(out)
}

/// Full (out, in) dimensions of a target's weight under `cfg`.
fn full_dims(cfg: &ModelConfig, kind: crate::model::TargetKind) -> (usize, usize) {
    use crate::model::TargetKind::*;
    match kind {
        Q | K | V | O => (cfg.d_model, cfg.d_model),
        Up | Gate => (cfg.d_ff, cfg.d_model),
        Down => (cfg.d_model, cfg.d_ff),
        LmHead => (cfg.vocab, cfg.d_model),
    }
}

/// Merge adapters into a model: `W ← W + s·B·A` per target, with the delta
/// additionally mask-pinned when it was trained in `masked` mode. Weight
/// bits are preserved exactly wherever the applied delta is zero: the
/// addition is skipped there rather than adding a floating-point zero.
pub fn merge(
    original: &TransformerWeights<f32>,
    adapters: &LoraAdapters<f32>,
    masks: Option<&MaskSet>,
    mode: DeltaMaskMode,
) -> Result<TransformerWeights<f32>> {
    let mut out = original.clone();
    let scaling = adapters.scaling();
    for (target, ad) in &adapters.map {
        let name = target.weight_name();
        let mut delta = ad.delta(scaling)?;
        if mode == DeltaMaskMode::Masked {
            if let Some(m) = masks.and_then(|s| s.get(&name)) {
                delta = delta.zip_map(m, "merge_mask", |d, mv| d * mv)?;
            }
        }
        let named = out.named_mut();
        let (_, w) = named
            .into_iter()
            .find(|(n, _)| n == &name)
            .ok_or_else(|| Error::MissingArtifact(format!("model lacks tensor {name}")))?;
        if w.shape() != delta.shape() {
            return Err(Error::shape(
                "merge",
                format!("{name}: weight {:?} vs delta {:?}", w.shape(), delta.shape()),
            ));
        }
        for (wv, dv) in w.data_mut().iter_mut().zip(delta.data()) {
            if *dv != 0.0 {
                *wv += *dv;
            }
        }
    }
    Ok(out)
}

// ─── pipeline ───────────────────────────────────────────────────────────

/// Which stages of the train-small/serve-big loop run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StageFlags {
    pub prune: bool,
    pub align: bool,
    pub quant: bool,
    pub recover: bool,
}

impl Default for StageFlags {
    fn default() -> Self {
        StageFlags { prune: true, align: true, quant: true, recover: true }
    }
}

impl StageFlags {
    pub fn validate(&self) -> Result<()> {
        if self.align && !self.prune {
            return Err(Error::Config(
                "stage align requires stage prune (continued pretraining heals a pruned model)"
                    .to_string(),
            ));
        }
        if self.recover && !self.prune {
            return Err(Error::Config("stage recover requires stage prune".to_string()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PruneConfig {
    pub strategy: PruneStrategy,
    pub ratio: f64,
    pub semi_n: usize,
    pub semi_m: usize,
    pub protected_first: usize,
    pub protected_last: usize,
    pub seed: u64,
    /// Calibration windows drawn from the general corpus for the gradient
    /// strategy.
    pub calib_windows: usize,
}

impl Default for PruneConfig {
    fn default() -> Self {
        PruneConfig {
            strategy: PruneStrategy::Stru,
            ratio: 0.5,
            semi_n: 4,
            semi_m: 8,
            protected_first: 1,
            protected_last: 1,
            seed: 0,
            calib_windows: 8,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QuantConfig {
    pub block_size: usize,
    pub codebook: Codebook,
}

impl Default for QuantConfig {
    fn default() -> Self {
        QuantConfig { block_size: crate::quant::DEFAULT_BLOCK_SIZE, codebook: Codebook::Nf4 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub model: ModelConfig,
    pub stages: StageFlags,
    pub prune: PruneConfig,
    pub align: TrainConfig,
    pub sft: TrainConfig,
    pub quant: QuantConfig,
}

/// Everything the pipeline produces. `merged` is absent when a structurally
/// pruned run skips recovery (the compact adapters do not fit the original
/// geometry).
pub struct PipelineArtifacts {
    pub plan: Option<StructuredPlan>,
    pub masks: Option<MaskSet>,
    /// The frozen f32 base the adapters trained against (pruned and, when
    /// enabled, aligned) — before quantization.
    pub training_base: TransformerWeights<f32>,
    pub quantized: Option<QuantizedModel>,
    pub adapters: LoraAdapters<f32>,
    pub recovered: LoraAdapters<f32>,
    pub merged: Option<TransformerWeights<f32>>,
    pub align_trace: Vec<f64>,
    pub sft_trace: Vec<f64>,
}

/// Run the configured stages end to end, starting from `base`:
/// prune → align → quantize → LoRA-train → recover → merge.
pub fn run_pipeline(
    pc: &PipelineConfig,
    base: &TransformerWeights<f32>,
    general: &[u8],
    task: &[u8],
) -> Result<PipelineArtifacts> {
    pc.model.validate()?;
    pc.stages.validate()?;
    let cfg = &pc.model;

    // Stage P: choose what to remove and build the training base.
    let mut plan = None;
    let mut masks = None;
    let mut training_base = base.clone();
    if pc.stages.prune {
        match pc.prune.strategy {
            PruneStrategy::Rand => {
                let p = gen_plan_structured_random(
                    cfg,
                    pc.prune.ratio,
                    pc.prune.protected_first,
                    pc.prune.protected_last,
                    pc.prune.seed,
                )?;
                training_base = compact(cfg, base, &p)?;
                plan = Some(p);
            }
            PruneStrategy::Stru => {
                let calib = calibration_windows(general, pc)?;
                let p = gen_plan_structured_gradient(
                    cfg,
                    base,
                    &calib,
                    pc.prune.ratio,
                    pc.prune.protected_first,
                    pc.prune.protected_last,
                )?;
                training_base = compact(cfg, base, &p)?;
                plan = Some(p);
            }
            PruneStrategy::Semi => {
                let set = gen_mask_set_semi(base, pc.prune.semi_n, pc.prune.semi_m)?;
                training_base = apply_mask_set(base, &set)?;
                masks = Some(set);
            }
            PruneStrategy::Unst => {
                let set = gen_mask_set_unstructured(base, pc.prune.ratio)?;
                training_base = apply_mask_set(base, &set)?;
                masks = Some(set);
            }
        }
    }

    // Stage A: continued pretraining of the pruned base on the general
    // corpus (mask-respecting for the non-structured strategies).
    let mut align_trace = Vec::new();
    if pc.stages.align {
        align_trace = align_pretrain(cfg, &mut training_base, masks.as_ref(), general, &pc.align)?;
    }

    // Stage Q: quantize the training base; adapters then train against the
    // dequantized-per-use weights.
    let mut quantized = None;
    if pc.stages.quant {
        quantized = Some(quantize_model(&training_base, pc.quant.block_size, pc.quant.codebook)?);
    }

    // LoRA fine-tuning on the task corpus.
    let mut adapters = init_adapters(cfg, &training_base)?;
    let base_model = match &quantized {
        Some(q) => BaseModel::Quantized(q),
        None => BaseModel::Plain(&training_base),
    };
    let sft_trace = train_lora(cfg, &base_model, &mut adapters, masks.as_ref(), task, &pc.sft)?;

    // Stage R: recover to the original geometry, then merge.
    let recovered = if pc.stages.recover {
        recover(cfg, &adapters, plan.as_ref())?
    } else {
        adapters.clone()
    };
    let merged = if plan.is_none() || pc.stages.recover {
        Some(merge(base, &recovered, masks.as_ref(), pc.sft.delta_mask_mode)?)
    } else {
        None
    };

    Ok(PipelineArtifacts {
        plan,
        masks,
        training_base,
        quantized,
        adapters,
        recovered,
        merged,
        align_trace,
        sft_trace,
    })
}

fn calibration_windows(general: &[u8], pc: &PipelineConfig) -> Result<Vec<Vec<usize>>> {
    let seq_len = pc.align.seq_len.min(pc.model.max_seq);
    draw_calibration_windows(general, seq_len, pc.prune.calib_windows, pc.prune.seed)
}

/// Deterministic calibration batch for the gradient pruning strategy:
/// `count` windows of `seq_len` tokens drawn from `general` on a stream
/// salted away from the training samplers.
pub fn draw_calibration_windows(
    general: &[u8],
    seq_len: usize,
    count: usize,
    seed: u64,
) -> Result<Vec<Vec<usize>>> {
    if count == 0 {
        return Err(Error::Config("calib_windows must be >= 1 for the stru strategy".to_string()));
    }
    let tokens = corpus_tokens(general, seq_len)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6361_6c69); // "cali"
    Ok((0..count).map(|_| sample_window(&mut rng, &tokens, seq_len).to_vec()).collect())
}

/// Convenience corpus pair used by tests and the CLI defaults.
pub fn default_corpora(seed: u64, general_bytes: usize, task_lines: usize) -> (Vec<u8>, Vec<u8>) {
    (corpus::synth_general(seed, general_bytes), corpus::synth_task(seed, task_lines))
}
