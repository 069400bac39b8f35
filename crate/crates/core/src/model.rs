//! Weights of the dual/single-stream diffusion transformer, their naming,
//! initialization and parameter accounting. The forward pass lives in
//! [`crate::forward`].

use std::collections::BTreeSet;
use std::ops::Range;

use mmdc_tensor::NdArray;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{BlockKind, ModelConfig};
use crate::error::{Error, Result};

const INIT_STD: f64 = 0.02;

/// Names of a stream's arrays, in storage order.
pub const STREAM_PARAM_NAMES: [&str; 14] = [
    "attn.wq", "attn.bq", "attn.wk", "attn.bk", "attn.wv", "attn.bv", "attn.wo", "attn.bo", "mlp.w1", "mlp.b1",
    "mlp.w2", "mlp.b2", "ada.w", "ada.b",
];

/// One stream's attention, MLP and AdaLN modulation weights.
///
/// `ada_w` maps the conditioning vector to six `d_model` chunks, in order:
/// attention shift, scale, gate, then MLP shift, scale, gate.
#[derive(Clone, Debug, PartialEq)]
pub struct StreamWeights {
    pub wq: NdArray,
    pub bq: NdArray,
    pub wk: NdArray,
    pub bk: NdArray,
    pub wv: NdArray,
    pub bv: NdArray,
    pub wo: NdArray,
    pub bo: NdArray,
    pub w1: NdArray,
    pub b1: NdArray,
    pub w2: NdArray,
    pub b2: NdArray,
    pub ada_w: NdArray,
    pub ada_b: NdArray,
}

impl StreamWeights {
    pub fn init(cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Self {
        let (d, h) = (cfg.d_model, cfg.mlp_hidden);
        let mat = |rows, cols, rng: &mut ChaCha8Rng| NdArray::randn(&[rows, cols], INIT_STD, rng);
        let wq = mat(d, d, rng);
        let wk = mat(d, d, rng);
        let wv = mat(d, d, rng);
        let wo = mat(d, d, rng);
        let w1 = mat(d, h, rng);
        let w2 = mat(h, d, rng);
        Self {
            wq,
            bq: NdArray::zeros(&[d]),
            wk,
            bk: NdArray::zeros(&[d]),
            wv,
            bv: NdArray::zeros(&[d]),
            wo,
            bo: NdArray::zeros(&[d]),
            w1,
            b1: NdArray::zeros(&[h]),
            w2,
            b2: NdArray::zeros(&[d]),
            // Zero modulation: every gate starts at 0, so each block is the
            // identity until trained.
            ada_w: NdArray::zeros(&[d, 6 * d]),
            ada_b: NdArray::zeros(&[6 * d]),
        }
    }

    /// Redraws the MLP weights as at initialization.
    pub fn reinit_mlp(&mut self, cfg: &ModelConfig, rng: &mut ChaCha8Rng) {
        let (d, h) = (cfg.d_model, cfg.mlp_hidden);
        self.w1 = NdArray::randn(&[d, h], INIT_STD, rng);
        self.b1 = NdArray::zeros(&[h]);
        self.w2 = NdArray::randn(&[h, d], INIT_STD, rng);
        self.b2 = NdArray::zeros(&[d]);
    }

    pub fn arrays(&self) -> [&NdArray; 14] {
        [
            &self.wq,
            &self.bq,
            &self.wk,
            &self.bk,
            &self.wv,
            &self.bv,
            &self.wo,
            &self.bo,
            &self.w1,
            &self.b1,
            &self.w2,
            &self.b2,
            &self.ada_w,
            &self.ada_b,
        ]
    }

    pub fn arrays_mut(&mut self) -> [&mut NdArray; 14] {
        [
            &mut self.wq,
            &mut self.bq,
            &mut self.wk,
            &mut self.bk,
            &mut self.wv,
            &mut self.bv,
            &mut self.wo,
            &mut self.bo,
            &mut self.w1,
            &mut self.b1,
            &mut self.w2,
            &mut self.b2,
            &mut self.ada_w,
            &mut self.ada_b,
        ]
    }

    /// The four attention projection matrices (q, k, v, out).
    pub fn projections(&self) -> [&NdArray; 4] {
        [&self.wq, &self.wk, &self.wv, &self.wo]
    }

    pub fn numel(&self) -> usize {
        self.arrays().iter().map(|a| a.numel()).sum()
    }

    /// Closed-form parameter count of one stream.
    pub fn count(cfg: &ModelConfig) -> usize {
        let (d, h) = (cfg.d_model, cfg.mlp_hidden);
        let attn = 4 * (d * d + d);
        let mlp = d * h + h + h * d + d;
        let ada = d * 6 * d + 6 * d;
        attn + mlp + ada
    }

    fn check_shapes(&self, cfg: &ModelConfig, prefix: &str) -> Result<()> {
        let fresh = Self::shape_template(cfg);
        for ((name, have), want) in STREAM_PARAM_NAMES.iter().zip(self.arrays()).zip(fresh) {
            if have.shape() != want.as_slice() {
                return Err(Error::invalid(format!(
                    "{prefix}.{name}: expected shape {want:?}, got {:?}",
                    have.shape()
                )));
            }
        }
        Ok(())
    }

    fn shape_template(cfg: &ModelConfig) -> [Vec<usize>; 14] {
        let (d, h) = (cfg.d_model, cfg.mlp_hidden);
        [
            vec![d, d],
            vec![d],
            vec![d, d],
            vec![d],
            vec![d, d],
            vec![d],
            vec![d, d],
            vec![d],
            vec![d, h],
            vec![h],
            vec![h, d],
            vec![d],
            vec![d, 6 * d],
            vec![6 * d],
        ]
    }
}

#[allow(clippy::large_enum_variant)]
#[derive(Clone, Debug, PartialEq)]
pub enum Block {
    /// Separate text and image weights; attention runs over both streams jointly.
    Dual { text: StreamWeights, image: StreamWeights },
    /// One weight set applied to the fused text+image sequence.
    Single { shared: StreamWeights },
}

impl Block {
    pub fn kind(&self) -> BlockKind {
        match self {
            Block::Dual { .. } => BlockKind::Dual,
            Block::Single { .. } => BlockKind::Single,
        }
    }

    /// `(stream tag, weights)` pairs; tags are `txt`, `img` or `shared`.
    pub fn streams(&self) -> Vec<(&'static str, &StreamWeights)> {
        match self {
            Block::Dual { text, image } => vec![("txt", text), ("img", image)],
            Block::Single { shared } => vec![("shared", shared)],
        }
    }

    pub fn streams_mut(&mut self) -> Vec<(&'static str, &mut StreamWeights)> {
        match self {
            Block::Dual { text, image } => vec![("txt", text), ("img", image)],
            Block::Single { shared } => vec![("shared", shared)],
        }
    }

    pub fn numel(&self) -> usize {
        self.streams().iter().map(|(_, s)| s.numel()).sum()
    }
}

/// Input embeddings: patch projection, token table, per-stream positions and
/// the timestep MLP.
#[derive(Clone, Debug, PartialEq)]
pub struct Embeddings {
    pub patch_w: NdArray,
    pub patch_b: NdArray,
    pub image_pos: NdArray,
    pub token: NdArray,
    pub text_pos: NdArray,
    pub time_w1: NdArray,
    pub time_b1: NdArray,
    pub time_w2: NdArray,
    pub time_b2: NdArray,
}

pub const EMBED_PARAM_NAMES: [&str; 9] = [
    "patch.w",
    "patch.b",
    "image_pos",
    "token",
    "text_pos",
    "time.w1",
    "time.b1",
    "time.w2",
    "time.b2",
];

impl Embeddings {
    fn init(cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Self {
        let d = cfg.d_model;
        let patch_w = NdArray::randn(&[cfg.patch_dim(), d], INIT_STD, rng);
        let image_pos = NdArray::randn(&[cfg.n_patches(), d], INIT_STD, rng);
        let token = NdArray::randn(&[cfg.text_vocab, d], INIT_STD, rng);
        let text_pos = NdArray::randn(&[cfg.text_len, d], INIT_STD, rng);
        let time_w1 = NdArray::randn(&[cfg.timestep_dim, d], INIT_STD, rng);
        let time_w2 = NdArray::randn(&[d, d], INIT_STD, rng);
        Self {
            patch_w,
            patch_b: NdArray::zeros(&[d]),
            image_pos,
            token,
            text_pos,
            time_w1,
            time_b1: NdArray::zeros(&[d]),
            time_w2,
            time_b2: NdArray::zeros(&[d]),
        }
    }

    pub fn arrays(&self) -> [&NdArray; 9] {
        [
            &self.patch_w,
            &self.patch_b,
            &self.image_pos,
            &self.token,
            &self.text_pos,
            &self.time_w1,
            &self.time_b1,
            &self.time_w2,
            &self.time_b2,
        ]
    }

    pub fn arrays_mut(&mut self) -> [&mut NdArray; 9] {
        [
            &mut self.patch_w,
            &mut self.patch_b,
            &mut self.image_pos,
            &mut self.token,
            &mut self.text_pos,
            &mut self.time_w1,
            &mut self.time_b1,
            &mut self.time_w2,
            &mut self.time_b2,
        ]
    }

    pub fn count(cfg: &ModelConfig) -> usize {
        let d = cfg.d_model;
        cfg.patch_dim() * d
            + d
            + cfg.n_patches() * d
            + cfg.text_vocab * d
            + cfg.text_len * d
            + cfg.timestep_dim * d
            + d
            + d * d
            + d
    }
}

/// Output head: affine layer norm followed by a linear map to patch pixels.
#[derive(Clone, Debug, PartialEq)]
pub struct Head {
    pub norm_g: NdArray,
    pub norm_b: NdArray,
    pub w: NdArray,
    pub b: NdArray,
}

pub const HEAD_PARAM_NAMES: [&str; 4] = ["norm.g", "norm.b", "w", "b"];

impl Head {
    fn init(cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Self {
        let d = cfg.d_model;
        Self {
            norm_g: NdArray::full(&[d], 1.0),
            norm_b: NdArray::zeros(&[d]),
            w: NdArray::randn(&[d, cfg.patch_dim()], INIT_STD, rng),
            b: NdArray::zeros(&[cfg.patch_dim()]),
        }
    }

    pub fn arrays(&self) -> [&NdArray; 4] {
        [&self.norm_g, &self.norm_b, &self.w, &self.b]
    }

    pub fn arrays_mut(&mut self) -> [&mut NdArray; 4] {
        [&mut self.norm_g, &mut self.norm_b, &mut self.w, &mut self.b]
    }

    pub fn count(cfg: &ModelConfig) -> usize {
        2 * cfg.d_model + cfg.d_model * cfg.patch_dim() + cfg.patch_dim()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub embed: Embeddings,
    pub blocks: Vec<Block>,
    pub head: Head,
}

/// Which parameters receive gradients in a training pass.
#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub struct Trainable {
    /// Embeddings and output head.
    pub embeddings: bool,
    pub blocks: BTreeSet<usize>,
}

impl Trainable {
    pub fn frozen() -> Self {
        Self::default()
    }

    pub fn all(depth: usize) -> Self {
        Self {
            embeddings: true,
            blocks: (0..depth).collect(),
        }
    }

    /// Only the listed blocks; embeddings and head stay frozen.
    pub fn blocks(blocks: impl IntoIterator<Item = usize>) -> Self {
        Self {
            embeddings: false,
            blocks: blocks.into_iter().collect(),
        }
    }

    /// Everything except the listed blocks.
    pub fn all_except(depth: usize, frozen: &BTreeSet<usize>) -> Self {
        Self {
            embeddings: true,
            blocks: (0..depth).filter(|l| !frozen.contains(l)).collect(),
        }
    }

    pub fn embeddings(&self) -> bool {
        self.embeddings
    }

    pub fn block(&self, layer: usize) -> bool {
        self.blocks.contains(&layer)
    }

    /// Whether the parameter called `name` (as produced by
    /// [`Model::named_params`]) is selected.
    pub fn selects(&self, name: &str) -> bool {
        match name.strip_prefix("blocks.") {
            Some(rest) => rest
                .split('.')
                .next()
                .and_then(|i| i.parse().ok())
                .is_some_and(|i| self.block(i)),
            None => self.embeddings,
        }
    }
}

/// Exact parameter counts.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamCount {
    pub embeddings: usize,
    pub head: usize,
    /// One stream's attention + MLP + modulation.
    pub stream: usize,
    pub dual_block: usize,
    pub single_block: usize,
    pub per_block: Vec<usize>,
    /// Sum over transformer blocks only.
    pub backbone: usize,
    pub total: usize,
}

impl ParamCount {
    /// Counts implied by a configuration, without materializing weights.
    pub fn for_config(cfg: &ModelConfig) -> Self {
        let stream = StreamWeights::count(cfg);
        let per_block: Vec<usize> = cfg
            .layout
            .kinds()
            .iter()
            .map(|k| match k {
                BlockKind::Dual => 2 * stream,
                BlockKind::Single => stream,
            })
            .collect();
        let backbone = per_block.iter().sum();
        let embeddings = Embeddings::count(cfg);
        let head = Head::count(cfg);
        Self {
            embeddings,
            head,
            stream,
            dual_block: 2 * stream,
            single_block: stream,
            per_block,
            backbone,
            total: embeddings + head + backbone,
        }
    }
}

impl Model {
    /// Seeded initialization. Arrays are drawn from one stream in canonical
    /// parameter order: embeddings, blocks, head.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let embed = Embeddings::init(config, &mut rng);
        let blocks = config
            .layout
            .kinds()
            .iter()
            .map(|kind| match kind {
                BlockKind::Dual => Block::Dual {
                    text: StreamWeights::init(config, &mut rng),
                    image: StreamWeights::init(config, &mut rng),
                },
                BlockKind::Single => Block::Single {
                    shared: StreamWeights::init(config, &mut rng),
                },
            })
            .collect();
        let head = Head::init(config, &mut rng);
        Ok(Self {
            config: config.clone(),
            embed,
            blocks,
            head,
        })
    }

    /// Assembles a model from parts, checking every shape against `config`.
    pub fn from_parts(config: ModelConfig, embed: Embeddings, blocks: Vec<Block>, head: Head) -> Result<Self> {
        config.validate()?;
        let m = Self {
            config,
            embed,
            blocks,
            head,
        };
        m.check()?;
        Ok(m)
    }

    /// Verifies that blocks match the layout and every array has its configured shape.
    pub fn check(&self) -> Result<()> {
        let cfg = &self.config;
        if self.blocks.len() != cfg.depth {
            return Err(Error::invalid(format!(
                "model has {} blocks but config depth is {}",
                self.blocks.len(),
                cfg.depth
            )));
        }
        for (i, b) in self.blocks.iter().enumerate() {
            if b.kind() != cfg.layout.kind(i) {
                return Err(Error::invalid(format!(
                    "block {i} is {:?} but layout says {:?}",
                    b.kind(),
                    cfg.layout.kind(i)
                )));
            }
            for (tag, s) in b.streams() {
                s.check_shapes(cfg, &format!("blocks.{i}.{tag}"))?;
            }
        }
        let template = Model::init(cfg, 0)?;
        for ((name, have), want) in self.named_params().iter().zip(template.named_params()) {
            if have.shape() != want.1.shape() {
                return Err(Error::invalid(format!(
                    "{name}: expected shape {:?}, got {:?}",
                    want.1.shape(),
                    have.shape()
                )));
            }
        }
        Ok(())
    }

    pub fn depth(&self) -> usize {
        self.blocks.len()
    }

    /// Every parameter with its hierarchical name, in canonical order.
    pub fn named_params(&self) -> Vec<(String, &NdArray)> {
        let mut out = Vec::new();
        for (n, a) in EMBED_PARAM_NAMES.iter().zip(self.embed.arrays()) {
            out.push((format!("embed.{n}"), a));
        }
        for (i, b) in self.blocks.iter().enumerate() {
            for (tag, s) in b.streams() {
                for (n, a) in STREAM_PARAM_NAMES.iter().zip(s.arrays()) {
                    out.push((format!("blocks.{i}.{tag}.{n}"), a));
                }
            }
        }
        for (n, a) in HEAD_PARAM_NAMES.iter().zip(self.head.arrays()) {
            out.push((format!("head.{n}"), a));
        }
        out
    }

    pub fn named_params_mut(&mut self) -> Vec<(String, &mut NdArray)> {
        let mut out = Vec::new();
        for (n, a) in EMBED_PARAM_NAMES.iter().zip(self.embed.arrays_mut()) {
            out.push((format!("embed.{n}"), a));
        }
        for (i, b) in self.blocks.iter_mut().enumerate() {
            for (tag, s) in b.streams_mut() {
                for (n, a) in STREAM_PARAM_NAMES.iter().zip(s.arrays_mut()) {
                    out.push((format!("blocks.{i}.{tag}.{n}"), a));
                }
            }
        }
        for (n, a) in HEAD_PARAM_NAMES.iter().zip(self.head.arrays_mut()) {
            out.push((format!("head.{n}"), a));
        }
        out
    }

    /// Counts obtained by walking the actual arrays.
    pub fn parameter_count(&self) -> ParamCount {
        let per_block: Vec<usize> = self.blocks.iter().map(Block::numel).collect();
        let embeddings = self.embed.arrays().iter().map(|a| a.numel()).sum();
        let head = self.head.arrays().iter().map(|a| a.numel()).sum();
        let backbone = per_block.iter().sum();
        let stream = StreamWeights::count(&self.config);
        ParamCount {
            embeddings,
            head,
            stream,
            dual_block: 2 * stream,
            single_block: stream,
            per_block,
            backbone,
            total: embeddings + head + backbone,
        }
    }

    /// Deep copies of the blocks in `layers`.
    pub fn clone_subrange(&self, layers: Range<usize>) -> Result<Vec<Block>> {
        if layers.start > layers.end || layers.end > self.depth() {
            return Err(Error::invalid(format!(
                "layer range {layers:?} out of bounds for depth {}",
                self.depth()
            )));
        }
        Ok(self.blocks[layers].to_vec())
    }

    pub fn is_finite(&self) -> bool {
        self.named_params().iter().all(|(_, a)| a.is_finite())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::StreamLayout;

    #[test]
    fn same_seed_gives_identical_weights() {
        let cfg = ModelConfig::default();
        assert_eq!(Model::init(&cfg, 7).unwrap(), Model::init(&cfg, 7).unwrap());
        assert_ne!(Model::init(&cfg, 7).unwrap(), Model::init(&cfg, 8).unwrap());
    }

    #[test]
    fn default_parameter_count_matches_hand_count() {
        // d=64, mlp=256, patch 4x4x3=48, 16 patches, vocab 32, 6 tokens, tdim 64
        let attn = 4 * (64 * 64 + 64);
        let mlp = 64 * 256 + 256 + 256 * 64 + 64;
        let ada = 64 * 384 + 384;
        assert_eq!(attn + mlp + ada, 74_688);
        let block = 2 * 74_688;
        let embed = 48 * 64 + 64 + 16 * 64 + 32 * 64 + 6 * 64 + 64 * 64 + 64 + 64 * 64 + 64;
        let head = 2 * 64 + 64 * 48 + 48;
        let m = Model::init(&ModelConfig::default(), 0).unwrap();
        let c = m.parameter_count();
        assert_eq!(c.per_block, vec![block; 12]);
        assert_eq!(c.embeddings, embed);
        assert_eq!(c.head, head);
        assert_eq!(c.total, 12 * block + embed + head);
        assert_eq!(c, ParamCount::for_config(&m.config));
        let walked: usize = m.named_params().iter().map(|(_, a)| a.numel()).sum();
        assert_eq!(walked, c.total);
    }

    #[test]
    fn single_block_is_dual_minus_one_stream() {
        let c = ParamCount::for_config(&ModelConfig::default());
        assert_eq!(c.single_block, c.dual_block - c.stream);
        assert!(c.dual_block > c.single_block);
    }

    #[test]
    fn totals_are_ordered_by_architecture() {
        let base = ModelConfig::default();
        let t12 = ParamCount::for_config(&base).total;
        let t6 = ParamCount::for_config(&base.with_layout(StreamLayout::all_dual(6))).total;
        let hybrid = ParamCount::for_config(&base.with_layout(StreamLayout::hybrid(2, 4))).total;
        assert!(t12 > t6 && t6 > hybrid);
    }

    #[test]
    fn parameter_names_are_unique_and_hierarchical() {
        let cfg = ModelConfig::default().with_layout(StreamLayout::hybrid(1, 2));
        let m = Model::init(&cfg, 0).unwrap();
        let names: Vec<String> = m.named_params().into_iter().map(|(n, _)| n).collect();
        let unique: BTreeSet<&String> = names.iter().collect();
        assert_eq!(unique.len(), names.len());
        assert!(names.contains(&"blocks.0.img.attn.wq".to_string()));
        assert!(names.contains(&"blocks.2.shared.mlp.w1".to_string()));
    }

    #[test]
    fn clone_subrange_is_a_deep_copy() {
        let m = Model::init(&ModelConfig::default(), 1).unwrap();
        let mut copy = m.clone_subrange(0..2).unwrap();
        assert_eq!(copy[..], m.blocks[0..2]);
        if let Block::Dual { image, .. } = &mut copy[0] {
            image.wq.data_mut()[0] += 1.0;
        }
        assert_ne!(copy[0], m.blocks[0]);
        assert_eq!(m, Model::init(&ModelConfig::default(), 1).unwrap());
        assert!(m.clone_subrange(3..13).is_err());
    }

    #[test]
    fn from_parts_rejects_kind_mismatch() {
        let m = Model::init(&ModelConfig::default(), 0).unwrap();
        let cfg = m.config.with_layout(StreamLayout::hybrid(11, 1));
        assert!(Model::from_parts(cfg, m.embed, m.blocks, m.head).is_err());
    }
}
