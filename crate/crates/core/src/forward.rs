//! Forward pass on a tape: patch/token embedding, joint-attention dual
//! blocks, fused single blocks, layer ablation and hidden-state tracing.

use mmdc_tensor::{NdArray, Scalar, Tape, Var};

use crate::config::{BlockKind, ModelConfig};
use crate::error::{Error, Result};
use crate::model::{Block, Model, StreamWeights, Trainable, EMBED_PARAM_NAMES, HEAD_PARAM_NAMES, STREAM_PARAM_NAMES};

const LN_EPS: f64 = 1e-6;

/// A batch of model inputs. Images are `[B, H, W, C]`, tokens are `B * text_len` ids.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelInput {
    pub z_t: NdArray,
    pub t: Vec<usize>,
    pub tokens: Vec<usize>,
}

impl ModelInput {
    pub fn batch(&self) -> usize {
        self.t.len()
    }

    pub fn validate(&self, cfg: &ModelConfig) -> Result<()> {
        let b = self.batch();
        let want = [b, cfg.image_size, cfg.image_size, cfg.channels];
        if self.z_t.shape() != want {
            return Err(Error::invalid(format!(
                "image batch has shape {:?}, expected {want:?}",
                self.z_t.shape()
            )));
        }
        if let Some(&t) = self.t.iter().find(|&&t| t < 1 || t > cfg.timesteps) {
            return Err(Error::invalid(format!("timestep {t} outside [1, {}]", cfg.timesteps)));
        }
        if self.tokens.len() != b * cfg.text_len {
            return Err(Error::invalid(format!(
                "expected {} token ids ({b} x {}), got {}",
                b * cfg.text_len,
                cfg.text_len,
                self.tokens.len()
            )));
        }
        if let Some(&id) = self.tokens.iter().find(|&&id| id >= cfg.text_vocab) {
            return Err(Error::invalid(format!(
                "token id {id} out of range for vocabulary of {}",
                cfg.text_vocab
            )));
        }
        Ok(())
    }

    /// Rows `range` of the batch.
    pub fn slice(&self, range: std::ops::Range<usize>, text_len: usize) -> Self {
        let per = self.z_t.numel() / self.batch().max(1);
        let mut shape = self.z_t.shape().to_vec();
        shape[0] = range.len();
        let data = self.z_t.data()[range.start * per..range.end * per].to_vec();
        Self {
            z_t: NdArray::new(shape, data).expect("slice of a valid batch"),
            t: self.t[range.clone()].to_vec(),
            tokens: self.tokens[range.start * text_len..range.end * text_len].to_vec(),
        }
    }
}

/// Per-layer skip bits: a set bit replaces the block with the identity.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AblationMask(Vec<bool>);

impl AblationMask {
    pub fn none(depth: usize) -> Self {
        Self(vec![false; depth])
    }

    pub fn single(depth: usize, layer: usize) -> Self {
        let mut m = Self::none(depth);
        m.0[layer] = true;
        m
    }

    pub fn from_bits(bits: Vec<bool>) -> Self {
        Self(bits)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn is_masked(&self, layer: usize) -> bool {
        self.0[layer]
    }

    pub fn count(&self) -> usize {
        self.0.iter().filter(|b| **b).count()
    }
}

/// Residual-stream state between blocks.
#[derive(Clone, Debug, PartialEq)]
pub enum Hidden<V> {
    /// Separate streams, `[B, text_len, D]` and `[B, n_patches, D]`.
    Dual { text: V, image: V },
    /// Concat(text, image) along the sequence axis, `[B, text_len + n_patches, D]`.
    Fused(V),
}

impl<V> Hidden<V> {
    pub fn map<U>(&self, mut f: impl FnMut(&V) -> U) -> Hidden<U> {
        match self {
            Hidden::Dual { text, image } => Hidden::Dual {
                text: f(text),
                image: f(image),
            },
            Hidden::Fused(x) => Hidden::Fused(f(x)),
        }
    }

    pub fn kind(&self) -> BlockKind {
        match self {
            Hidden::Dual { .. } => BlockKind::Dual,
            Hidden::Fused(_) => BlockKind::Single,
        }
    }
}

/// A stored per-layer state.
pub type LayerState = Hidden<NdArray>;

impl LayerState {
    /// Concat(text, image) along the sequence axis; a fused state is returned as is.
    pub fn fused(&self) -> NdArray {
        match self {
            Hidden::Fused(x) => x.clone(),
            Hidden::Dual { text, image } => concat_seq(text, image),
        }
    }

    /// Slices `rows` of the batch.
    pub fn batch_slice(&self, rows: std::ops::Range<usize>) -> Self {
        self.map(|a| {
            let per = a.numel() / a.shape()[0];
            let mut shape = a.shape().to_vec();
            shape[0] = rows.len();
            NdArray::new(shape, a.data()[rows.start * per..rows.end * per].to_vec()).expect("slice of a valid state")
        })
    }
}

fn concat_seq(text: &NdArray, image: &NdArray) -> NdArray {
    let (b, lt, d) = (text.shape()[0], text.shape()[1], text.shape()[2]);
    let li = image.shape()[1];
    let mut data = Vec::with_capacity(b * (lt + li) * d);
    for s in 0..b {
        data.extend_from_slice(&text.data()[s * lt * d..(s + 1) * lt * d]);
        data.extend_from_slice(&image.data()[s * li * d..(s + 1) * li * d]);
    }
    NdArray::new(vec![b, lt + li, d], data).expect("concat of valid states")
}

/// Post-block hidden states, keyed by layer index in increasing order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct HiddenTrace {
    pub layers: Vec<(usize, LayerState)>,
}

impl HiddenTrace {
    pub fn get(&self, layer: usize) -> Option<&LayerState> {
        self.layers.iter().find(|(l, _)| *l == layer).map(|(_, s)| s)
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }
}

// ---- image layout helpers ---------------------------------------------------

/// `[B, H, W, C]` to `[B, n_patches, p*p*C]`; patches in row-major grid order,
/// pixels within a patch ordered (dy, dx, c).
pub fn patchify(cfg: &ModelConfig, img: &NdArray) -> Result<NdArray> {
    let (s, p, c) = (cfg.image_size, cfg.patch_size, cfg.channels);
    let sh = img.shape();
    if sh.len() != 4 || sh[1] != s || sh[2] != s || sh[3] != c {
        return Err(Error::invalid(format!(
            "patchify expects [B, {s}, {s}, {c}], got {sh:?}"
        )));
    }
    let (b, g, pd) = (sh[0], cfg.grid(), cfg.patch_dim());
    let src = img.data();
    let mut out = vec![0.0f32; img.numel()];
    for n in 0..b {
        for py in 0..g {
            for px in 0..g {
                let dst0 = (n * g * g + py * g + px) * pd;
                for dy in 0..p {
                    let row = ((n * s + py * p + dy) * s + px * p) * c;
                    let dst = dst0 + dy * p * c;
                    out[dst..dst + p * c].copy_from_slice(&src[row..row + p * c]);
                }
            }
        }
    }
    Ok(NdArray::new(vec![b, g * g, pd], out)?)
}

/// Inverse of [`patchify`].
pub fn unpatchify(cfg: &ModelConfig, patches: &NdArray) -> Result<NdArray> {
    let (s, p, c) = (cfg.image_size, cfg.patch_size, cfg.channels);
    let (g, pd) = (cfg.grid(), cfg.patch_dim());
    let sh = patches.shape();
    if sh.len() != 3 || sh[1] != g * g || sh[2] != pd {
        return Err(Error::invalid(format!(
            "unpatchify expects [B, {}, {pd}], got {sh:?}",
            g * g
        )));
    }
    let b = sh[0];
    let src = patches.data();
    let mut out = vec![0.0f32; patches.numel()];
    for n in 0..b {
        for py in 0..g {
            for px in 0..g {
                let src0 = (n * g * g + py * g + px) * pd;
                for dy in 0..p {
                    let row = ((n * s + py * p + dy) * s + px * p) * c;
                    let from = src0 + dy * p * c;
                    out[row..row + p * c].copy_from_slice(&src[from..from + p * c]);
                }
            }
        }
    }
    Ok(NdArray::new(vec![b, s, s, c], out)?)
}

/// Sinusoidal features `[cos(t f_i), sin(t f_i)]`, `f_i = 10000^(-i/half)`.
pub fn timestep_features(t: &[usize], dim: usize) -> NdArray {
    let half = dim / 2;
    let mut data = Vec::with_capacity(t.len() * dim);
    for &step in t {
        let row: Vec<f64> = (0..half)
            .map(|i| step as f64 * (-(10000f64.ln()) * i as f64 / half as f64).exp())
            .collect();
        data.extend(row.iter().map(|a| a.cos() as f32));
        data.extend(row.iter().map(|a| a.sin() as f32));
    }
    NdArray::new(vec![t.len(), dim], data).expect("consistent shape")
}

// ---- parameters bound to a tape --------------------------------------------

pub struct StreamVars([Var; 14]);

impl StreamVars {
    fn bind<T: Scalar>(tape: &mut Tape<T>, prefix: &str, w: &StreamWeights, trainable: bool) -> Self {
        let vars: Vec<Var> = STREAM_PARAM_NAMES
            .iter()
            .zip(w.arrays())
            .map(|(n, a)| tape.param(&format!("{prefix}.{n}"), a, trainable))
            .collect();
        Self(vars.try_into().expect("14 stream arrays"))
    }

    fn q(&self) -> (Var, Var) {
        (self.0[0], self.0[1])
    }
    fn k(&self) -> (Var, Var) {
        (self.0[2], self.0[3])
    }
    fn v(&self) -> (Var, Var) {
        (self.0[4], self.0[5])
    }
    fn out(&self) -> (Var, Var) {
        (self.0[6], self.0[7])
    }
    fn mlp_in(&self) -> (Var, Var) {
        (self.0[8], self.0[9])
    }
    fn mlp_out(&self) -> (Var, Var) {
        (self.0[10], self.0[11])
    }
    fn ada(&self) -> (Var, Var) {
        (self.0[12], self.0[13])
    }
}

pub enum BlockVars {
    Dual { text: StreamVars, image: StreamVars },
    Single { shared: StreamVars },
}

impl BlockVars {
    pub fn bind<T: Scalar>(tape: &mut Tape<T>, layer: usize, block: &Block, trainable: bool) -> Self {
        match block {
            Block::Dual { text, image } => BlockVars::Dual {
                text: StreamVars::bind(tape, &format!("blocks.{layer}.txt"), text, trainable),
                image: StreamVars::bind(tape, &format!("blocks.{layer}.img"), image, trainable),
            },
            Block::Single { shared } => BlockVars::Single {
                shared: StreamVars::bind(tape, &format!("blocks.{layer}.shared"), shared, trainable),
            },
        }
    }
}

pub struct EmbedVars([Var; 9]);

impl EmbedVars {
    pub fn bind<T: Scalar>(tape: &mut Tape<T>, model: &Model, trainable: bool) -> Self {
        let vars: Vec<Var> = EMBED_PARAM_NAMES
            .iter()
            .zip(model.embed.arrays())
            .map(|(n, a)| tape.param(&format!("embed.{n}"), a, trainable))
            .collect();
        Self(vars.try_into().expect("9 embedding arrays"))
    }
}

pub struct HeadVars([Var; 4]);

impl HeadVars {
    pub fn bind<T: Scalar>(tape: &mut Tape<T>, model: &Model, trainable: bool) -> Self {
        let vars: Vec<Var> = HEAD_PARAM_NAMES
            .iter()
            .zip(model.head.arrays())
            .map(|(n, a)| tape.param(&format!("head.{n}"), a, trainable))
            .collect();
        Self(vars.try_into().expect("4 head arrays"))
    }
}

// ---- graph pieces -----------------------------------------------------------

fn linear<T: Scalar>(tape: &mut Tape<T>, x: Var, (w, b): (Var, Var)) -> Result<Var> {
    let y = tape.matmul(x, w)?;
    Ok(tape.add_broadcast(y, b)?)
}

/// Conditioning vector `silu(MLP(sinusoid(t)))`, shape `[B, D]`.
pub fn conditioning<T: Scalar>(tape: &mut Tape<T>, cfg: &ModelConfig, e: &EmbedVars, t: &[usize]) -> Result<Var> {
    let feats = tape.constant(timestep_features(t, cfg.timestep_dim).cast());
    let h = linear(tape, feats, (e.0[5], e.0[6]))?;
    let h = tape.silu(h)?;
    let c = linear(tape, h, (e.0[7], e.0[8]))?;
    Ok(tape.silu(c)?)
}

/// Embedded input streams (before any block).
pub fn embed_input<T: Scalar>(
    tape: &mut Tape<T>,
    cfg: &ModelConfig,
    e: &EmbedVars,
    input: &ModelInput,
) -> Result<Hidden<Var>> {
    let b = input.batch();
    let patches = tape.constant(patchify(cfg, &input.z_t)?.cast());
    let image = linear(tape, patches, (e.0[0], e.0[1]))?;
    let image = tape.add_broadcast(image, e.0[2])?;
    let text = tape.gather(e.0[3], &input.tokens, &[b, cfg.text_len])?;
    let text = tape.add_broadcast(text, e.0[4])?;
    Ok(Hidden::Dual { text, image })
}

fn modulation<T: Scalar>(tape: &mut Tape<T>, cfg: &ModelConfig, s: &StreamVars, cond: Var) -> Result<Vec<Var>> {
    let m = linear(tape, cond, s.ada())?;
    Ok(tape.split(m, 1, &[cfg.d_model; 6])?)
}

fn pre_norm<T: Scalar>(tape: &mut Tape<T>, x: Var, shift: Var, scale: Var) -> Result<Var> {
    let n = tape.layernorm(x, LN_EPS)?;
    Ok(tape.modulate(n, shift, scale)?)
}

fn mlp_residual<T: Scalar>(tape: &mut Tape<T>, x: Var, s: &StreamVars, m: &[Var]) -> Result<Var> {
    let h = pre_norm(tape, x, m[3], m[4])?;
    let h = linear(tape, h, s.mlp_in())?;
    let h = tape.gelu(h)?;
    let y = linear(tape, h, s.mlp_out())?;
    Ok(tape.gated_residual(x, m[5], y)?)
}

fn fuse<T: Scalar>(tape: &mut Tape<T>, state: Hidden<Var>) -> Result<Var> {
    Ok(match state {
        Hidden::Dual { text, image } => tape.concat(&[text, image], 1)?,
        Hidden::Fused(x) => x,
    })
}

/// One block applied to `state`. A dual state entering a single block is
/// fused as Concat(text, image) first.
pub fn block_forward<T: Scalar>(
    tape: &mut Tape<T>,
    cfg: &ModelConfig,
    block: &BlockVars,
    state: Hidden<Var>,
    cond: Var,
) -> Result<Hidden<Var>> {
    match block {
        BlockVars::Dual { text: st, image: si } => {
            let Hidden::Dual { text: xt, image: xi } = state else {
                return Err(Error::invalid("dual block received a fused state"));
            };
            let mt = modulation(tape, cfg, st, cond)?;
            let mi = modulation(tape, cfg, si, cond)?;
            let nt = pre_norm(tape, xt, mt[0], mt[1])?;
            let ni = pre_norm(tape, xi, mi[0], mi[1])?;
            let mut joint = Vec::with_capacity(3);
            for proj in [StreamVars::q, StreamVars::k, StreamVars::v] {
                let a = linear(tape, nt, proj(st))?;
                let b = linear(tape, ni, proj(si))?;
                joint.push(tape.concat(&[a, b], 1)?);
            }
            let att = tape.attention(joint[0], joint[1], joint[2], cfg.n_heads)?;
            let parts = tape.split(att, 1, &[cfg.text_len, cfg.n_patches()])?;
            let ot = linear(tape, parts[0], st.out())?;
            let oi = linear(tape, parts[1], si.out())?;
            let xt = tape.gated_residual(xt, mt[2], ot)?;
            let xi = tape.gated_residual(xi, mi[2], oi)?;
            let text = mlp_residual(tape, xt, st, &mt)?;
            let image = mlp_residual(tape, xi, si, &mi)?;
            Ok(Hidden::Dual { text, image })
        }
        BlockVars::Single { shared: s } => {
            let x = fuse(tape, state)?;
            let m = modulation(tape, cfg, s, cond)?;
            let n = pre_norm(tape, x, m[0], m[1])?;
            let q = linear(tape, n, s.q())?;
            let k = linear(tape, n, s.k())?;
            let v = linear(tape, n, s.v())?;
            let att = tape.attention(q, k, v, cfg.n_heads)?;
            let o = linear(tape, att, s.out())?;
            let x = tape.gated_residual(x, m[2], o)?;
            Ok(Hidden::Fused(mlp_residual(tape, x, s, &m)?))
        }
    }
}

/// Noise prediction in patch space, `[B, n_patches, patch_dim]`, from image tokens.
pub fn head_forward<T: Scalar>(
    tape: &mut Tape<T>,
    cfg: &ModelConfig,
    h: &HeadVars,
    state: &Hidden<Var>,
) -> Result<Var> {
    let image = match state {
        Hidden::Dual { image, .. } => *image,
        Hidden::Fused(x) => tape.narrow(*x, 1, cfg.text_len, cfg.n_patches())?,
    };
    let n = tape.layernorm(image, LN_EPS)?;
    let n = tape.mul_broadcast(n, h.0[0])?;
    let n = tape.add_broadcast(n, h.0[1])?;
    linear(tape, n, (h.0[2], h.0[3]))
}

/// Everything a tape forward produces.
pub struct Pass {
    /// Noise prediction, `[B, n_patches, patch_dim]`.
    pub eps: Var,
    pub cond: Var,
    /// Embedded input state.
    pub input: Hidden<Var>,
    /// State after each layer (identity for masked layers).
    pub states: Vec<Hidden<Var>>,
}

impl Model {
    /// Full forward on `tape`. Parameters selected by `trainable` are
    /// registered for gradients.
    pub fn forward_tape<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        input: &ModelInput,
        mask: Option<&AblationMask>,
        trainable: &Trainable,
    ) -> Result<Pass> {
        let cfg = &self.config;
        input.validate(cfg)?;
        if let Some(m) = mask {
            if m.len() != self.depth() {
                return Err(Error::invalid(format!(
                    "ablation mask has {} entries, model depth is {}",
                    m.len(),
                    self.depth()
                )));
            }
        }
        let e = EmbedVars::bind(tape, self, trainable.embeddings());
        let cond = conditioning(tape, cfg, &e, &input.t)?;
        let start = embed_input(tape, cfg, &e, input)?;
        let mut state = start.clone();
        let mut states = Vec::with_capacity(self.depth());
        for (l, block) in self.blocks.iter().enumerate() {
            if mask.is_some_and(|m| m.is_masked(l)) {
                // Identity residual: the block is skipped. Entering the
                // single-stream region still fuses, which only relays values.
                if block.kind() == BlockKind::Single {
                    state = Hidden::Fused(fuse(tape, state)?);
                }
            } else {
                let vars = BlockVars::bind(tape, l, block, trainable.block(l));
                state = block_forward(tape, cfg, &vars, state, cond)?;
            }
            states.push(state.clone());
        }
        let h = HeadVars::bind(tape, self, trainable.embeddings());
        let eps = head_forward(tape, cfg, &h, &state)?;
        Ok(Pass {
            eps,
            cond,
            input: start,
            states,
        })
    }

    /// Runs layers `from..depth` and the head on an existing state.
    pub fn replay_from<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        state: Hidden<Var>,
        cond: Var,
        from: usize,
        trainable: &Trainable,
    ) -> Result<Var> {
        let mut state = state;
        for l in from..self.depth() {
            let vars = BlockVars::bind(tape, l, &self.blocks[l], trainable.block(l));
            state = block_forward(tape, &self.config, &vars, state, cond)?;
        }
        let h = HeadVars::bind(tape, self, trainable.embeddings());
        head_forward(tape, &self.config, &h, &state)
    }

    /// Inference forward. Returns the image-shaped noise prediction and,
    /// when `trace` is set, the state after every layer.
    pub fn forward(
        &self,
        input: &ModelInput,
        mask: Option<&AblationMask>,
        trace: bool,
    ) -> Result<(NdArray, Option<HiddenTrace>)> {
        let mut tape = Tape::<f32>::no_grad();
        let pass = self.forward_tape(&mut tape, input, mask, &Trainable::frozen())?;
        let eps = unpatchify(&self.config, tape.value(pass.eps))?;
        let trace = trace.then(|| HiddenTrace {
            layers: pass
                .states
                .iter()
                .enumerate()
                .map(|(l, s)| (l, s.map(|v| tape.value(*v).clone())))
                .collect(),
        });
        Ok((eps, trace))
    }

    /// Embedded input state (what layer 0 receives), without running blocks.
    pub fn embed_state(&self, input: &ModelInput) -> Result<LayerState> {
        input.validate(&self.config)?;
        let mut tape = Tape::<f32>::no_grad();
        let e = EmbedVars::bind(&mut tape, self, false);
        let s = embed_input(&mut tape, &self.config, &e, input)?;
        Ok(s.map(|v| tape.value(*v).clone()))
    }

    /// States after the requested layers only. Blocks past the deepest
    /// requested layer are not evaluated.
    pub fn capture_hidden(&self, input: &ModelInput, layers: &[usize]) -> Result<HiddenTrace> {
        if let Some(&bad) = layers.iter().find(|&&l| l >= self.depth()) {
            return Err(Error::invalid(format!(
                "layer {bad} out of range for depth {}",
                self.depth()
            )));
        }
        let Some(&last) = layers.iter().max() else {
            return Ok(HiddenTrace::default());
        };
        input.validate(&self.config)?;
        let mut tape = Tape::<f32>::no_grad();
        let e = EmbedVars::bind(&mut tape, self, false);
        let cond = conditioning(&mut tape, &self.config, &e, &input.t)?;
        let mut state = embed_input(&mut tape, &self.config, &e, input)?;
        let mut out = Vec::new();
        for l in 0..=last {
            let vars = BlockVars::bind(&mut tape, l, &self.blocks[l], false);
            state = block_forward(&mut tape, &self.config, &vars, state, cond)?;
            if layers.contains(&l) {
                out.push((l, state.map(|v| tape.value(*v).clone())));
            }
        }
        Ok(HiddenTrace { layers: out })
    }
}
