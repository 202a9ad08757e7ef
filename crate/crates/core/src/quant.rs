//! 4-bit block quantization with absmax scaling.
//!
//! Tensors are flattened row-major and split into fixed-size blocks (the
//! last block may be partial). Each block stores one f32 scale (its absolute
//! maximum) and one 4-bit code per element: the normalized value `x/scale`
//! is rounded to the nearest codebook level, ties resolving to the smaller
//! code index. Codes are packed two per byte, element `2i` in the low
//! nibble. A block's absmax element always round-trips exactly (its
//! normalized value is ±1, which both codebooks contain), and re-quantizing
//! a dequantized tensor reproduces the codes byte-for-byte.
//!
//! Codebooks:
//! - `nf4`: 16 quantiles of the standard normal, normalized to [−1, 1].
//!   The levels are frozen below from the construction with tail mass
//!   δ = 1/32: negative side `Φ⁻¹(linspace(δ, ½, 8))`, positive side
//!   `Φ⁻¹(linspace(½, 1−δ, 9))`, shared zero deduplicated, both sides
//!   divided by `Φ⁻¹(1−δ)`. Code 7 is exactly 0.
//! - `int4sym`: the 15 uniform levels `(i−7)/7`, code 7 exactly 0. Code 15
//!   is an unused slot: it decodes defensively to 1.0 but the encoder never
//!   emits it (the tie with code 14 resolves downward).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{LayerWeights, TransformerWeights};
use crate::tensor::Tensor;

/// Frozen nf4 levels (ascending; index = 4-bit code).
pub const NF4_LEVELS: [f64; 16] = [
    -1.0,
    -0.6934942158972338,
    -0.5225630031519742,
    -0.3928681828332967,
    -0.2829017987223386,
    -0.18374971476613733,
    -0.09053941965284125,
    0.0,
    0.07913367682724462,
    0.16003506363109202,
    0.24476626163283044,
    0.33611869925919735,
    0.4384771794588117,
    0.5600152558523455,
    0.7202957465571399,
    1.0,
];

/// Largest distance between adjacent nf4 levels (between codes 0 and 1);
/// bounds the per-element quantization error at `scale · gap / 2`.
pub const NF4_MAX_GAP: f64 = 0.3065057841027662;

/// Uniform symmetric levels `(i−7)/7` with the unused 16th slot pinned to 1.
pub const INT4SYM_LEVELS: [f64; 16] = [
    -1.0,
    -6.0 / 7.0,
    -5.0 / 7.0,
    -4.0 / 7.0,
    -3.0 / 7.0,
    -2.0 / 7.0,
    -1.0 / 7.0,
    0.0,
    1.0 / 7.0,
    2.0 / 7.0,
    3.0 / 7.0,
    4.0 / 7.0,
    5.0 / 7.0,
    6.0 / 7.0,
    1.0,
    1.0,
];

pub const DEFAULT_BLOCK_SIZE: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Codebook {
    #[default]
    Nf4,
    Int4Sym,
}

impl Codebook {
    pub fn levels(&self) -> &'static [f64; 16] {
        match self {
            Codebook::Nf4 => &NF4_LEVELS,
            Codebook::Int4Sym => &INT4SYM_LEVELS,
        }
    }

    pub fn token(&self) -> &'static str {
        match self {
            Codebook::Nf4 => "nf4",
            Codebook::Int4Sym => "int4sym",
        }
    }

    pub fn parse(s: &str) -> Result<Codebook> {
        match s {
            "nf4" => Ok(Codebook::Nf4),
            "int4sym" => Ok(Codebook::Int4Sym),
            _ => Err(Error::Config(format!("unknown codebook {s:?}"))),
        }
    }
}

/// Nearest level index; ties pick the smaller code.
fn nearest_code(levels: &[f64; 16], x: f64) -> u8 {
    let mut best = 0u8;
    let mut best_dist = f64::INFINITY;
    for (i, &lv) in levels.iter().enumerate() {
        let d = (x - lv).abs();
        if d < best_dist {
            best_dist = d;
            best = i as u8;
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedTensor {
    pub shape: Vec<usize>,
    pub block_size: usize,
    pub codebook: Codebook,
    /// Packed codes, `⌈numel/2⌉` bytes; element `2i` in the low nibble.
    pub codes: Vec<u8>,
    /// Per-block absmax, `⌈numel/block_size⌉` entries.
    pub scales: Vec<f32>,
}

impl QuantizedTensor {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn validate(&self) -> Result<()> {
        if self.block_size == 0 {
            return Err(Error::Config("block_size must be >= 1".to_string()));
        }
        let numel = self.numel();
        if self.codes.len() != numel.div_ceil(2) {
            return Err(Error::Consistency(format!(
                "quantized tensor holds {} code bytes, expected {}",
                self.codes.len(),
                numel.div_ceil(2)
            )));
        }
        if self.scales.len() != numel.div_ceil(self.block_size) {
            return Err(Error::Consistency(format!(
                "quantized tensor holds {} scales, expected {}",
                self.scales.len(),
                numel.div_ceil(self.block_size)
            )));
        }
        if self.scales.iter().any(|s| !s.is_finite() || *s < 0.0) {
            return Err(Error::Consistency("quantized scales must be finite and >= 0".to_string()));
        }
        Ok(())
    }

    pub fn code_at(&self, i: usize) -> u8 {
        let byte = self.codes[i / 2];
        if i % 2 == 0 {
            byte & 0x0F
        } else {
            byte >> 4
        }
    }
}

/// Quantize one tensor. Fails on non-finite inputs or a zero block size.
pub fn quantize(t: &Tensor<f32>, block_size: usize, codebook: Codebook) -> Result<QuantizedTensor> {
    if block_size == 0 {
        return Err(Error::Config("block_size must be >= 1".to_string()));
    }
    if !t.is_finite_all() {
        return Err(Error::NonFinite("quantize".to_string()));
    }
    let levels = codebook.levels();
    let data = t.data();
    let numel = data.len();
    let mut codes = vec![0u8; numel.div_ceil(2)];
    let mut scales = Vec::with_capacity(numel.div_ceil(block_size));
    for (b, block) in data.chunks(block_size).enumerate() {
        let absmax = block.iter().fold(0.0f32, |acc, &v| acc.max(v.abs()));
        scales.push(absmax);
        for (j, &v) in block.iter().enumerate() {
            let norm = if absmax == 0.0 { 0.0 } else { (v / absmax) as f64 };
            let code = nearest_code(levels, norm);
            let i = b * block_size + j;
            if i % 2 == 0 {
                codes[i / 2] |= code;
            } else {
                codes[i / 2] |= code << 4;
            }
        }
    }
    let out = QuantizedTensor { shape: t.shape().to_vec(), block_size, codebook, codes, scales };
    out.validate()?;
    Ok(out)
}

/// Reconstruct `scale · level[code]` per element.
pub fn dequantize(q: &QuantizedTensor) -> Result<Tensor<f32>> {
    q.validate()?;
    let levels = q.codebook.levels();
    let numel = q.numel();
    let mut data = Vec::with_capacity(numel);
    for i in 0..numel {
        let scale = q.scales[i / q.block_size];
        data.push(scale * levels[q.code_at(i) as usize] as f32);
    }
    Tensor::new(q.shape.to_vec(), data)
}

// ─── whole-model quantization ───────────────────────────────────────────

/// A model with every weight matrix quantized; gains stay f32.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedLayer {
    pub wq: QuantizedTensor,
    pub wk: QuantizedTensor,
    pub wv: QuantizedTensor,
    pub wo: QuantizedTensor,
    pub w_up: QuantizedTensor,
    pub w_gate: QuantizedTensor,
    pub w_down: QuantizedTensor,
    pub attn_gain: Tensor<f32>,
    pub mlp_gain: Tensor<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedModel {
    pub block_size: usize,
    pub codebook: Codebook,
    pub embed: QuantizedTensor,
    pub layers: Vec<QuantizedLayer>,
    pub final_gain: Tensor<f32>,
    pub lm_head: QuantizedTensor,
}

impl QuantizedModel {
    /// Canonical (name, tensor) listing of the quantized matrices, matching
    /// [`TransformerWeights::named`] minus the gains.
    pub fn named_quantized(&self) -> Vec<(String, &QuantizedTensor)> {
        let mut out = vec![("embed".to_string(), &self.embed)];
        for (l, lw) in self.layers.iter().enumerate() {
            out.push((format!("layers.{l}.wq"), &lw.wq));
            out.push((format!("layers.{l}.wk"), &lw.wk));
            out.push((format!("layers.{l}.wv"), &lw.wv));
            out.push((format!("layers.{l}.wo"), &lw.wo));
            out.push((format!("layers.{l}.w_up"), &lw.w_up));
            out.push((format!("layers.{l}.w_gate"), &lw.w_gate));
            out.push((format!("layers.{l}.w_down"), &lw.w_down));
        }
        out.push(("lm_head".to_string(), &self.lm_head));
        out
    }

    pub fn named_gains(&self) -> Vec<(String, &Tensor<f32>)> {
        let mut out = Vec::new();
        for (l, lw) in self.layers.iter().enumerate() {
            out.push((format!("layers.{l}.attn_gain"), &lw.attn_gain));
            out.push((format!("layers.{l}.mlp_gain"), &lw.mlp_gain));
        }
        out.push(("final_gain".to_string(), &self.final_gain));
        out
    }
}

pub fn quantize_model(
    w: &TransformerWeights<f32>,
    block_size: usize,
    codebook: Codebook,
) -> Result<QuantizedModel> {
    let q = |t: &Tensor<f32>| quantize(t, block_size, codebook);
    Ok(QuantizedModel {
        block_size,
        codebook,
        embed: q(&w.embed)?,
        layers: w
            .layers
            .iter()
            .map(|lw| {
                Ok(QuantizedLayer {
                    wq: q(&lw.wq)?,
                    wk: q(&lw.wk)?,
                    wv: q(&lw.wv)?,
                    wo: q(&lw.wo)?,
                    w_up: q(&lw.w_up)?,
                    w_gate: q(&lw.w_gate)?,
                    w_down: q(&lw.w_down)?,
                    attn_gain: lw.attn_gain.clone(),
                    mlp_gain: lw.mlp_gain.clone(),
                })
            })
            .collect::<Result<Vec<_>>>()?,
        final_gain: w.final_gain.clone(),
        lm_head: q(&w.lm_head)?,
    })
}

/// Materialize f32 weights from a quantized model. Training against a
/// quantized base calls this per forward pass; the packed codes are the
/// ground truth and never change.
pub fn dequantize_model(q: &QuantizedModel) -> Result<TransformerWeights<f32>> {
    Ok(TransformerWeights {
        embed: dequantize(&q.embed)?,
        layers: q
            .layers
            .iter()
            .map(|lw| {
                Ok(LayerWeights {
                    wq: dequantize(&lw.wq)?,
                    wk: dequantize(&lw.wk)?,
                    wv: dequantize(&lw.wv)?,
                    wo: dequantize(&lw.wo)?,
                    w_up: dequantize(&lw.w_up)?,
                    w_gate: dequantize(&lw.w_gate)?,
                    w_down: dequantize(&lw.w_down)?,
                    attn_gain: lw.attn_gain.clone(),
                    mlp_gain: lw.mlp_gain.clone(),
                })
            })
            .collect::<Result<Vec<_>>>()?,
        final_gain: q.final_gain.clone(),
        lm_head: dequantize(&q.lm_head)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn nf4_codebook_matches_normal_quantile_oracle() {
        // Recompute the construction from the inverse normal CDF.
        use statrs::distribution::{ContinuousCDF, Normal};
        let n = Normal::new(0.0, 1.0).unwrap();
        let delta = 1.0 / 32.0;
        let norm = n.inverse_cdf(1.0 - delta);
        let mut levels = Vec::new();
        for i in 0..8 {
            let p = delta + (0.5 - delta) * i as f64 / 7.0;
            levels.push(n.inverse_cdf(p) / norm);
        }
        for i in 1..9 {
            let p = 0.5 + (0.5 - delta) * i as f64 / 8.0;
            levels.push(n.inverse_cdf(p) / norm);
        }
        assert_eq!(levels.len(), 16);
        for (frozen, recomputed) in NF4_LEVELS.iter().zip(&levels) {
            assert!(
                (frozen - recomputed).abs() < 1e-8,
                "frozen {frozen} vs oracle {recomputed}"
            );
        }
        // Structural anchors hold exactly.
        assert_eq!(NF4_LEVELS[0], -1.0);
        assert_eq!(NF4_LEVELS[7], 0.0);
        assert_eq!(NF4_LEVELS[15], 1.0);
        for w in NF4_LEVELS.windows(2) {
            assert!(w[0] < w[1], "levels must ascend");
        }
        let max_gap = NF4_LEVELS.windows(2).map(|w| w[1] - w[0]).fold(0.0, f64::max);
        assert!((max_gap - NF4_MAX_GAP).abs() < 1e-15);
    }

    #[test]
    fn int4sym_levels_are_sevenths() {
        for i in 0..15 {
            assert!((INT4SYM_LEVELS[i] - (i as f64 - 7.0) / 7.0).abs() < 1e-15);
        }
        assert_eq!(INT4SYM_LEVELS[14], 1.0);
        assert_eq!(INT4SYM_LEVELS[15], 1.0, "unused slot decodes to the endpoint");
    }

    #[test]
    fn encoder_never_emits_the_unused_int4sym_slot() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let t = Tensor::vector((0..512).map(|_| rng.gen_range(-2.0f32..2.0)).collect());
        let q = quantize(&t, 64, Codebook::Int4Sym).unwrap();
        for i in 0..t.numel() {
            assert_ne!(q.code_at(i), 15);
        }
    }

    #[test]
    fn packing_is_little_nibble_first() {
        // Values chosen to hit codes 3 and 12 of int4sym: levels (i−7)/7.
        let t = Tensor::vector(vec![-4.0f32 / 7.0, 5.0 / 7.0, 1.0]);
        let q = quantize(&t, 64, Codebook::Int4Sym).unwrap();
        assert_eq!(q.code_at(0), 3);
        assert_eq!(q.code_at(1), 12);
        assert_eq!(q.code_at(2), 14);
        assert_eq!(q.codes, vec![0xC3, 0x0E], "low nibble is the even element");
    }

    #[test]
    fn absmax_element_round_trips_exactly() {
        let t = Tensor::vector(vec![0.3f32, -0.75, 0.1, 0.2]);
        let q = quantize(&t, 4, Codebook::Nf4).unwrap();
        let back = dequantize(&q).unwrap();
        assert_eq!(back.data()[1], -0.75, "absmax must be exact");
        let q = quantize(&t, 4, Codebook::Int4Sym).unwrap();
        let back = dequantize(&q).unwrap();
        assert_eq!(back.data()[1], -0.75);
    }

    #[test]
    fn zero_blocks_round_trip_to_zero() {
        let t = Tensor::zeros(vec![3, 10]);
        for cb in [Codebook::Nf4, Codebook::Int4Sym] {
            let q = quantize(&t, 4, cb).unwrap();
            assert!(q.scales.iter().all(|&s| s == 0.0));
            let back = dequantize(&q).unwrap();
            assert!(back.data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn error_stays_within_half_max_gap_per_block() {
        for seed in 0..25u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let t = Tensor::vector((0..300).map(|_| rng.gen_range(-3.0f32..3.0)).collect());
            let q = quantize(&t, 64, Codebook::Nf4).unwrap();
            let back = dequantize(&q).unwrap();
            for (i, (&x, &y)) in t.data().iter().zip(back.data()).enumerate() {
                let scale = q.scales[i / 64] as f64;
                let bound = scale * NF4_MAX_GAP / 2.0 + 1e-6;
                assert!(
                    ((x - y) as f64).abs() <= bound,
                    "seed {seed} elem {i}: |{x} - {y}| > {bound}"
                );
            }
        }
    }

    #[test]
    fn requantization_is_idempotent() {
        for seed in 0..10u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
            let t = Tensor::matrix(7, 13, (0..91).map(|_| rng.gen_range(-1.0f32..1.0)).collect())
                .unwrap();
            for cb in [Codebook::Nf4, Codebook::Int4Sym] {
                let q1 = quantize(&t, 16, cb).unwrap();
                let q2 = quantize(&dequantize(&q1).unwrap(), 16, cb).unwrap();
                assert_eq!(q1.codes, q2.codes, "codes must be byte-identical");
                assert_eq!(q1.scales, q2.scales);
            }
        }
    }

    #[test]
    fn odd_length_and_partial_blocks_are_handled() {
        let t = Tensor::vector(vec![0.5f32, -0.25, 0.125, 1.0, -1.0]);
        let q = quantize(&t, 2, Codebook::Nf4).unwrap();
        assert_eq!(q.codes.len(), 3);
        assert_eq!(q.scales.len(), 3, "⌈5/2⌉ blocks");
        assert_eq!(q.codes[2] >> 4, 0, "trailing nibble stays clear");
        let back = dequantize(&q).unwrap();
        assert_eq!(back.numel(), 5);
        assert_eq!(back.data()[3], 1.0);
        assert_eq!(back.data()[4], -1.0);
    }

    #[test]
    fn quantize_rejects_bad_inputs() {
        let t = Tensor::vector(vec![1.0f32]);
        assert!(quantize(&t, 0, Codebook::Nf4).is_err());
        let bad = Tensor::vector(vec![f32::NAN]);
        assert!(matches!(quantize(&bad, 4, Codebook::Nf4), Err(Error::NonFinite(_))));
    }

    #[test]
    fn model_quantization_keeps_gains_exact() {
        let cfg = crate::model::ModelConfig {
            n_layers: 2,
            d_model: 8,
            n_heads: 2,
            d_ff: 16,
            vocab: 11,
            ..crate::model::ModelConfig::default()
        };
        let w = crate::model::init_model(&cfg).unwrap();
        let q = quantize_model(&w, 16, Codebook::Nf4).unwrap();
        let back = dequantize_model(&q).unwrap();
        assert_eq!(back.final_gain, w.final_gain);
        assert_eq!(back.layers[0].attn_gain, w.layers[0].attn_gain);
        assert_eq!(back.embed.shape(), w.embed.shape());
        // Weight error bounded per block.
        let max_err = w.embed.max_abs_diff(&back.embed);
        let max_scale = q.embed.scales.iter().fold(0.0f32, |a, &b| a.max(b)) as f64;
        assert!(max_err <= max_scale * NF4_MAX_GAP / 2.0 + 1e-6);
    }
}
