//! The tiny transformer: configuration, parameters, and the named-tensor
//! registry shared by the optimizer, checkpointing, and gradient checks.
//!
//! Sequence tokens are produced by a shared input projection over four
//! concatenated conditioning channels — the embedded code of the coarser
//! scale at the matching cell, the embedded code of the predecessor block's
//! rank-mate, and the position embeddings of both cells — with learned
//! constants standing in where a predecessor does not exist. The first
//! sequence slot carries the class embedding, which also drives per-layer
//! conditioned layer norms.

mod backward;
mod forward;

pub use backward::backward;
pub use forward::{
    build_inputs, forward_train, loss_from_logits, ForwardTrace, SequenceMeta, Source,
};
pub(crate) use forward::{embed_token_row, gelu, layer_norm_row, linear, modulate_row, softmax_row};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::resample::TokenGrid;
use crate::rope::{self, MixLogits, PosEmbedTable, RopeSplit};
use crate::scalar::Scalar;
use crate::schedule::{make_schedule, RatioTag, ScaleSchedule};
use crate::tensor::Mat;

/// Architecture hyperparameters. Desk-scale defaults keep every tensor small
/// enough for exact finite-difference validation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Transformer layer count.
    pub layers: usize,
    /// Residual stream width D.
    pub dim: usize,
    /// Attention head count; head width is `dim / heads`.
    pub heads: usize,
    /// Token vocabulary size.
    pub vocab: usize,
    /// Number of class labels (an extra null class is appended internally).
    pub classes: usize,
    /// Width of raw token embeddings before the unfold MLP.
    pub embed_dim: usize,
    /// Hidden width of each MLP block as a multiple of `dim`.
    pub mlp_factor: usize,
    /// Number of leading layers whose keys mix in the predecessor rotation.
    pub mix_layers: usize,
    /// Scale progression.
    pub ratio: RatioTag,
    /// Final grid side.
    pub side: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            layers: 4,
            dim: 128,
            heads: 4,
            vocab: 16,
            classes: 4,
            embed_dim: 16,
            mlp_factor: 4,
            mix_layers: 2,
            ratio: RatioTag::X2,
            side: 16,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0
            || self.dim == 0
            || self.heads == 0
            || self.embed_dim == 0
            || self.mlp_factor == 0
            || self.side == 0
        {
            return Err(Error::invalid_argument("all model dimensions must be positive"));
        }
        if self.vocab < 2 {
            return Err(Error::invalid_argument("vocabulary must hold at least 2 tokens"));
        }
        if self.classes == 0 {
            return Err(Error::invalid_argument("at least one class is required"));
        }
        if self.dim % self.heads != 0 {
            return Err(Error::invalid_argument(format!(
                "width {} not divisible by {} heads",
                self.dim, self.heads
            )));
        }
        if (self.dim / self.heads) % 2 != 0 {
            return Err(Error::invalid_argument(format!(
                "head width {} must be even for rotary pairs",
                self.dim / self.heads
            )));
        }
        if self.mix_layers > self.layers {
            return Err(Error::invalid_argument(format!(
                "mix_layers {} exceeds layer count {}",
                self.mix_layers, self.layers
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    pub fn mlp_dim(&self) -> usize {
        self.dim * self.mlp_factor
    }

    /// Class-embedding row used for unconditional (null-class) inputs.
    pub fn null_class(&self) -> usize {
        self.classes
    }

    pub fn schedule(&self) -> Result<ScaleSchedule> {
        make_schedule(self.ratio, self.side)
    }

    pub fn rope_split(&self) -> Result<RopeSplit> {
        RopeSplit::new(self.head_dim())
    }
}

/// Weights of one transformer layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams<F> {
    pub wq: Mat<F>,
    pub wk: Mat<F>,
    pub wv: Mat<F>,
    pub wo: Mat<F>,
    /// Class embedding → per-sublayer norm modulation (scale₁, shift₁,
    /// scale₂, shift₂), each of width `dim`.
    pub w_ada: Mat<F>,
    pub b_ada: Mat<F>,
    pub fc1: Mat<F>,
    pub b_fc1: Mat<F>,
    pub fc2: Mat<F>,
    pub b_fc2: Mat<F>,
}

/// Every learned tensor of the model.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<F> {
    pub config: ModelConfig,
    /// Scale sides implied by the config (kept for table shapes).
    pub sizes: Vec<usize>,
    /// Raw token embeddings, `vocab × embed_dim`.
    pub embed: Mat<F>,
    /// Unfold MLP lifting raw embeddings to the model width.
    pub unfold_w1: Mat<F>,
    pub unfold_b1: Mat<F>,
    pub unfold_w2: Mat<F>,
    pub unfold_b2: Mat<F>,
    /// Input projection over the four concatenated conditioning channels.
    pub w_proj: Mat<F>,
    pub b_proj: Mat<F>,
    /// Class embeddings, `(classes + 1) × dim`; the last row is the null class.
    pub class_embed: Mat<F>,
    /// Learned position embeddings per (scale, cell).
    pub pos: PosEmbedTable<F>,
    /// Learned start constants standing in for a missing predecessor block.
    pub z0: Mat<F>,
    pub pos0: Mat<F>,
    /// Rotary pair split and learned frequencies (shared across layers/heads).
    pub rope_split: RopeSplit,
    pub rope_freqs: Mat<F>,
    /// Key-rotation mixing logits for the first `mix_layers` layers.
    pub mix: MixLogits<F>,
    pub layers: Vec<LayerParams<F>>,
    /// Class embedding → final-norm modulation (scale, shift).
    pub final_ada_w: Mat<F>,
    pub final_ada_b: Mat<F>,
    /// Output head, `dim × vocab`, zero-initialized so the initial softmax
    /// is exactly uniform.
    pub head: Mat<F>,
}

fn normal<F: Scalar>(rng: &mut ChaCha8Rng, sigma: f64) -> F {
    // Box-Muller on open-interval uniforms.
    let u1: f64 = 1.0 - rng.random::<f64>();
    let u2: f64 = rng.random::<f64>();
    F::from_f64(sigma * (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos())
}

fn fill_normal<F: Scalar>(rng: &mut ChaCha8Rng, mat: &mut Mat<F>, sigma: f64) {
    for v in &mut mat.data {
        *v = normal(rng, sigma);
    }
}

impl<F: Scalar> ModelParams<F> {
    /// Allocate all tensors with zeros (shapes only).
    pub fn zeros(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let schedule = config.schedule()?;
        let sizes = schedule.sizes.clone();
        let d = config.dim;
        let split = config.rope_split()?;
        let layers = (0..config.layers)
            .map(|_| LayerParams {
                wq: Mat::zeros(d, d),
                wk: Mat::zeros(d, d),
                wv: Mat::zeros(d, d),
                wo: Mat::zeros(d, d),
                w_ada: Mat::zeros(d, 4 * d),
                b_ada: Mat::zeros(1, 4 * d),
                fc1: Mat::zeros(d, config.mlp_dim()),
                b_fc1: Mat::zeros(1, config.mlp_dim()),
                fc2: Mat::zeros(config.mlp_dim(), d),
                b_fc2: Mat::zeros(1, d),
            })
            .collect();
        Ok(ModelParams {
            sizes: sizes.clone(),
            embed: Mat::zeros(config.vocab, config.embed_dim),
            unfold_w1: Mat::zeros(config.embed_dim, d),
            unfold_b1: Mat::zeros(1, d),
            unfold_w2: Mat::zeros(d, d),
            unfold_b2: Mat::zeros(1, d),
            w_proj: Mat::zeros(4 * d, d),
            b_proj: Mat::zeros(1, d),
            class_embed: Mat::zeros(config.classes + 1, d),
            pos: PosEmbedTable::zeros(&sizes, d),
            z0: Mat::zeros(1, d),
            pos0: Mat::zeros(1, d),
            rope_split: split,
            rope_freqs: Mat::zeros(1, split.n_pairs()),
            mix: MixLogits::zeros(config.mix_layers, config.heads),
            layers,
            final_ada_w: Mat::zeros(d, 2 * d),
            final_ada_b: Mat::zeros(1, 2 * d),
            head: Mat::zeros(d, config.vocab),
            config: config.clone(),
        })
    }

    /// Seeded initialization. Embeddings and in-projections draw from a
    /// normal with σ = 0.02; residual out-projections are scaled down by
    /// √(2L); the output head, norm modulations, and mixing logits start at
    /// zero; rotary frequencies start on their geometric grid.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        let mut params = Self::zeros(config)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let sigma = 0.02;
        let residual_sigma = sigma / ((2 * config.layers) as f64).sqrt();

        fill_normal(&mut rng, &mut params.embed, sigma);
        fill_normal(&mut rng, &mut params.unfold_w1, sigma);
        fill_normal(&mut rng, &mut params.unfold_w2, sigma);
        fill_normal(&mut rng, &mut params.w_proj, sigma);
        fill_normal(&mut rng, &mut params.class_embed, sigma);
        for table in &mut params.pos.tables {
            fill_normal(&mut rng, table, sigma);
        }
        fill_normal(&mut rng, &mut params.z0, sigma);
        fill_normal(&mut rng, &mut params.pos0, sigma);
        for layer in &mut params.layers {
            fill_normal(&mut rng, &mut layer.wq, sigma);
            fill_normal(&mut rng, &mut layer.wk, sigma);
            fill_normal(&mut rng, &mut layer.wv, sigma);
            fill_normal(&mut rng, &mut layer.wo, residual_sigma);
            fill_normal(&mut rng, &mut layer.fc1, sigma);
            fill_normal(&mut rng, &mut layer.fc2, residual_sigma);
        }

        let max_scale = params.sizes.len().saturating_sub(1);
        let freqs: Vec<F> = rope::init_frequencies(
            &params.rope_split,
            config.side.saturating_sub(1),
            config.side.saturating_sub(1),
            max_scale,
        );
        params.rope_freqs = Mat::from_vec(1, freqs.len(), freqs);
        Ok(params)
    }

    /// Named references to every tensor, in a fixed deterministic order.
    pub fn tensors(&self) -> Vec<(String, &Mat<F>)> {
        let mut out: Vec<(String, &Mat<F>)> = vec![
            ("embed".into(), &self.embed),
            ("unfold_w1".into(), &self.unfold_w1),
            ("unfold_b1".into(), &self.unfold_b1),
            ("unfold_w2".into(), &self.unfold_w2),
            ("unfold_b2".into(), &self.unfold_b2),
            ("w_proj".into(), &self.w_proj),
            ("b_proj".into(), &self.b_proj),
            ("class_embed".into(), &self.class_embed),
            ("z0".into(), &self.z0),
            ("pos0".into(), &self.pos0),
            ("rope_freqs".into(), &self.rope_freqs),
            ("mix_logits".into(), &self.mix.logits),
        ];
        for (s, table) in self.pos.tables.iter().enumerate() {
            out.push((format!("pos_table.{}", s), table));
        }
        for (l, layer) in self.layers.iter().enumerate() {
            out.push((format!("layer.{}.wq", l), &layer.wq));
            out.push((format!("layer.{}.wk", l), &layer.wk));
            out.push((format!("layer.{}.wv", l), &layer.wv));
            out.push((format!("layer.{}.wo", l), &layer.wo));
            out.push((format!("layer.{}.w_ada", l), &layer.w_ada));
            out.push((format!("layer.{}.b_ada", l), &layer.b_ada));
            out.push((format!("layer.{}.fc1", l), &layer.fc1));
            out.push((format!("layer.{}.b_fc1", l), &layer.b_fc1));
            out.push((format!("layer.{}.fc2", l), &layer.fc2));
            out.push((format!("layer.{}.b_fc2", l), &layer.b_fc2));
        }
        out.push(("final_ada_w".into(), &self.final_ada_w));
        out.push(("final_ada_b".into(), &self.final_ada_b));
        out.push(("head".into(), &self.head));
        out
    }

    /// Mutable counterpart of [`tensors`](Self::tensors), same order.
    pub fn tensors_mut(&mut self) -> Vec<(String, &mut Mat<F>)> {
        let mut out: Vec<(String, &mut Mat<F>)> = vec![
            ("embed".into(), &mut self.embed),
            ("unfold_w1".into(), &mut self.unfold_w1),
            ("unfold_b1".into(), &mut self.unfold_b1),
            ("unfold_w2".into(), &mut self.unfold_w2),
            ("unfold_b2".into(), &mut self.unfold_b2),
            ("w_proj".into(), &mut self.w_proj),
            ("b_proj".into(), &mut self.b_proj),
            ("class_embed".into(), &mut self.class_embed),
            ("z0".into(), &mut self.z0),
            ("pos0".into(), &mut self.pos0),
            ("rope_freqs".into(), &mut self.rope_freqs),
            ("mix_logits".into(), &mut self.mix.logits),
        ];
        for (s, table) in self.pos.tables.iter_mut().enumerate() {
            out.push((format!("pos_table.{}", s), table));
        }
        for (l, layer) in self.layers.iter_mut().enumerate() {
            out.push((format!("layer.{}.wq", l), &mut layer.wq));
            out.push((format!("layer.{}.wk", l), &mut layer.wk));
            out.push((format!("layer.{}.wv", l), &mut layer.wv));
            out.push((format!("layer.{}.wo", l), &mut layer.wo));
            out.push((format!("layer.{}.w_ada", l), &mut layer.w_ada));
            out.push((format!("layer.{}.b_ada", l), &mut layer.b_ada));
            out.push((format!("layer.{}.fc1", l), &mut layer.fc1));
            out.push((format!("layer.{}.b_fc1", l), &mut layer.b_fc1));
            out.push((format!("layer.{}.fc2", l), &mut layer.fc2));
            out.push((format!("layer.{}.b_fc2", l), &mut layer.b_fc2));
        }
        out.push(("final_ada_w".into(), &mut self.final_ada_w));
        out.push(("final_ada_b".into(), &mut self.final_ada_b));
        out.push(("head".into(), &mut self.head));
        out
    }

    /// Add seeded normal noise to every tensor, including the ones that
    /// normally start at zero (head, norm modulations, mixing logits).
    /// Gradient checks call this so that no parameter block vacuously
    /// passes just because its downstream activations vanish.
    pub fn randomize_all(&mut self, seed: u64, sigma: f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for (_, t) in self.tensors_mut() {
            for v in &mut t.data {
                *v += normal::<F>(&mut rng, sigma);
            }
        }
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.data.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors().iter().all(|(_, t)| t.iter_finite())
    }
}

/// One teacher-forced training example: a class label and the ground-truth
/// token grid of every scale.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrainingBatch {
    /// Class label; `config.null_class()` marks the unconditional case.
    pub label: usize,
    /// Token grids per scale, coarse to fine, matching the schedule sides.
    pub grids: Vec<TokenGrid>,
}

impl TrainingBatch {
    pub fn validate(&self, config: &ModelConfig, sizes: &[usize]) -> Result<()> {
        if self.label > config.classes {
            return Err(Error::invalid_argument(format!(
                "label {} out of range (classes {} + null)",
                self.label, config.classes
            )));
        }
        if self.grids.len() != sizes.len() {
            return Err(Error::invalid_state(format!(
                "expected {} scale grids, got {}",
                sizes.len(),
                self.grids.len()
            )));
        }
        for (grid, &side) in self.grids.iter().zip(sizes) {
            if grid.side != side {
                return Err(Error::invalid_state(format!(
                    "grid side {} does not match scale side {}",
                    grid.side, side
                )));
            }
            if grid.tokens.iter().any(|&t| t >= config.vocab) {
                return Err(Error::invalid_argument("token outside vocabulary"));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            layers: 2,
            dim: 16,
            heads: 2,
            vocab: 4,
            classes: 2,
            embed_dim: 6,
            mlp_factor: 2,
            mix_layers: 1,
            ratio: RatioTag::X2,
            side: 4,
        }
    }

    #[test]
    fn config_validation() {
        assert!(ModelConfig::default().validate().is_ok());
        let mut bad = tiny_config();
        bad.heads = 3;
        assert!(bad.validate().is_err());
        let mut odd_head = tiny_config();
        odd_head.dim = 10;
        odd_head.heads = 2; // head width 5 is odd
        assert!(odd_head.validate().is_err());
        let mut tiny_vocab = tiny_config();
        tiny_vocab.vocab = 1;
        assert!(tiny_vocab.validate().is_err());
        let mut bad_mix = tiny_config();
        bad_mix.mix_layers = 3;
        assert!(bad_mix.validate().is_err());
    }

    #[test]
    fn init_is_seeded_and_finite() {
        let config = tiny_config();
        let a: ModelParams<f64> = ModelParams::init(&config, 9).unwrap();
        let b: ModelParams<f64> = ModelParams::init(&config, 9).unwrap();
        let c: ModelParams<f64> = ModelParams::init(&config, 10).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert!(a.all_finite());
        // Zero-initialized tensors.
        assert!(a.head.data.iter().all(|&v| v == 0.0));
        assert!(a.layers[0].w_ada.data.iter().all(|&v| v == 0.0));
        assert!(a.mix.logits.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn registry_names_are_unique_and_aligned() {
        let config = tiny_config();
        let mut params: ModelParams<f64> = ModelParams::init(&config, 1).unwrap();
        let names: Vec<String> = params.tensors().into_iter().map(|(n, _)| n).collect();
        let mut dedup = names.clone();
        dedup.sort();
        dedup.dedup();
        assert_eq!(dedup.len(), names.len(), "duplicate tensor names");
        let mut_names: Vec<String> = params.tensors_mut().into_iter().map(|(n, _)| n).collect();
        assert_eq!(names, mut_names, "visit orders diverge");
        assert!(params.num_params() > 0);
    }

    #[test]
    fn batch_validation() {
        let config = tiny_config();
        let sizes = config.schedule().unwrap().sizes;
        let grids: Vec<TokenGrid> =
            sizes.iter().map(|&s| TokenGrid::filled(s, 1)).collect();
        let batch = TrainingBatch { label: 0, grids: grids.clone() };
        batch.validate(&config, &sizes).unwrap();

        let null = TrainingBatch { label: config.null_class(), grids: grids.clone() };
        null.validate(&config, &sizes).unwrap();

        let bad_label = TrainingBatch { label: 5, grids: grids.clone() };
        assert!(bad_label.validate(&config, &sizes).is_err());

        let mut bad_token = TrainingBatch { label: 0, grids };
        bad_token.grids[0].tokens[0] = 99;
        assert!(bad_token.validate(&config, &sizes).is_err());
    }
}
