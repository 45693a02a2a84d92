//! The denoising network: a small non-autoregressive encoder-decoder
//! transformer mapping a noised latent sequence (plus conditioning source
//! tokens, per-token diffusion times, and an optional self-conditioning
//! estimate) to a prediction of the clean latent. Also hosts the length
//! prediction head over the pooled encoder output.
//!
//! The forward pass is expressed on the autodiff graph so that exact
//! gradients of any scalar loss are available for every parameter,
//! including the embedding codebook. Inference helpers run the same graph
//! and discard it.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::tensor::Tensor;
use crate::vocab::{EmbeddingCodebook, PAD};

/// Reference trajectory length used to scale diffusion times into the
/// sinusoidal feature range.
pub const TIME_FEATURE_SCALE: f64 = 2000.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DenoiserConfig {
    pub enc_layers: usize,
    pub dec_layers: usize,
    /// Transformer width.
    pub model_dim: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    /// Latent (embedding codebook) dimension.
    pub latent_dim: usize,
    pub max_len: usize,
    pub vocab: usize,
}

impl DenoiserConfig {
    pub fn tiny(vocab: usize, max_len: usize) -> Self {
        DenoiserConfig {
            enc_layers: 2,
            dec_layers: 2,
            model_dim: 64,
            heads: 2,
            ffn_dim: 128,
            latent_dim: 16,
            max_len,
            vocab,
        }
    }

    /// Small enough for exhaustive finite-difference checks.
    pub fn micro(vocab: usize, max_len: usize) -> Self {
        DenoiserConfig {
            enc_layers: 1,
            dec_layers: 1,
            model_dim: 8,
            heads: 2,
            ffn_dim: 16,
            latent_dim: 4,
            max_len,
            vocab,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.model_dim == 0
            || self.heads == 0
            || self.ffn_dim == 0
            || self.latent_dim == 0
            || self.max_len == 0
            || self.vocab == 0
            || self.enc_layers == 0
            || self.dec_layers == 0
        {
            return Err(Error::Config("all denoiser dimensions must be positive".into()));
        }
        if !self.model_dim.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "model width {} not divisible by {} heads",
                self.model_dim, self.heads
            )));
        }
        Ok(())
    }
}

/// Names and tensors of every trainable parameter, addressed by index.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamSet {
    fn new() -> Self {
        ParamSet {
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }

    fn push(&mut self, name: String, t: Tensor) -> usize {
        self.names.push(name);
        self.tensors.push(t);
        self.tensors.len() - 1
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn name(&self, i: usize) -> &str {
        &self.names[i]
    }

    pub fn tensor(&self, i: usize) -> &Tensor {
        &self.tensors[i]
    }

    pub fn tensor_mut(&mut self, i: usize) -> &mut Tensor {
        &mut self.tensors[i]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(|s| s.as_str()).zip(self.tensors.iter())
    }

    pub fn scalar_count(&self) -> usize {
        self.tensors.iter().map(|t| t.data().len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(|t| t.is_finite())
    }
}

#[derive(Debug, Clone, Copy)]
struct AttnIds {
    wq: usize,
    bq: usize,
    wk: usize,
    bk: usize,
    wv: usize,
    bv: usize,
    wo: usize,
    bo: usize,
}

#[derive(Debug, Clone, Copy)]
struct FfnIds {
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
}

#[derive(Debug, Clone, Copy)]
struct NormIds {
    gain: usize,
    bias: usize,
}

#[derive(Debug, Clone)]
struct EncLayerIds {
    norm1: NormIds,
    attn: AttnIds,
    norm2: NormIds,
    ffn: FfnIds,
}

#[derive(Debug, Clone)]
struct DecLayerIds {
    norm1: NormIds,
    self_attn: AttnIds,
    norm2: NormIds,
    cross_attn: AttnIds,
    norm3: NormIds,
    ffn: FfnIds,
}

#[derive(Debug, Clone)]
struct Layout {
    codebook: usize,
    src_embed: usize,
    enc: Vec<EncLayerIds>,
    enc_norm: NormIds,
    dec: Vec<DecLayerIds>,
    dec_norm: NormIds,
    in_proj_w: usize,
    in_proj_b: usize,
    time_w: usize,
    time_b: usize,
    out_w: usize,
    out_b: usize,
    len_w: usize,
    len_b: usize,
}

/// All trainable state of the denoiser, including the embedding codebook.
#[derive(Debug, Clone)]
pub struct DenoiserState {
    pub config: DenoiserConfig,
    params: ParamSet,
    layout: Layout,
}

fn gaussian_fan_in(rng: &mut impl Rng, rows: usize, cols: usize, fan_in: usize) -> Tensor {
    let std = 1.0 / (fan_in as f64).sqrt();
    Tensor::from_fn(rows, cols, |_, _| {
        let g: f64 = rng.sample(StandardNormal);
        g * std
    })
}

impl DenoiserState {
    /// Gaussian fan-in initialization; biases zero, norm gains one.
    pub fn init(config: DenoiserConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        config.validate()?;
        let d = config.model_dim;
        let h = config.latent_dim;
        let mut p = ParamSet::new();

        let codebook = p.push(
            "codebook".into(),
            EmbeddingCodebook::init(config.vocab, h, rng).table().clone(),
        );
        let src_embed = p.push("src_embed".into(), gaussian_fan_in(rng, config.vocab, d, d));

        fn norm(p: &mut ParamSet, d: usize, name: &str) -> NormIds {
            NormIds {
                gain: p.push(format!("{name}.gain"), Tensor::from_fn(1, d, |_, _| 1.0)),
                bias: p.push(format!("{name}.bias"), Tensor::zeros(1, d)),
            }
        }
        fn attn(p: &mut ParamSet, rng: &mut ChaCha8Rng, d: usize, name: &str) -> AttnIds {
            AttnIds {
                wq: p.push(format!("{name}.wq"), gaussian_fan_in(rng, d, d, d)),
                bq: p.push(format!("{name}.bq"), Tensor::zeros(1, d)),
                wk: p.push(format!("{name}.wk"), gaussian_fan_in(rng, d, d, d)),
                bk: p.push(format!("{name}.bk"), Tensor::zeros(1, d)),
                wv: p.push(format!("{name}.wv"), gaussian_fan_in(rng, d, d, d)),
                bv: p.push(format!("{name}.bv"), Tensor::zeros(1, d)),
                wo: p.push(format!("{name}.wo"), gaussian_fan_in(rng, d, d, d)),
                bo: p.push(format!("{name}.bo"), Tensor::zeros(1, d)),
            }
        }
        fn ffn(p: &mut ParamSet, rng: &mut ChaCha8Rng, d: usize, f: usize, name: &str) -> FfnIds {
            FfnIds {
                w1: p.push(format!("{name}.w1"), gaussian_fan_in(rng, d, f, d)),
                b1: p.push(format!("{name}.b1"), Tensor::zeros(1, f)),
                w2: p.push(format!("{name}.w2"), gaussian_fan_in(rng, f, d, f)),
                b2: p.push(format!("{name}.b2"), Tensor::zeros(1, d)),
            }
        }

        let enc = (0..config.enc_layers)
            .map(|i| EncLayerIds {
                norm1: norm(&mut p, d, &format!("enc.{i}.norm1")),
                attn: attn(&mut p, rng, d, &format!("enc.{i}.attn")),
                norm2: norm(&mut p, d, &format!("enc.{i}.norm2")),
                ffn: ffn(&mut p, rng, d, config.ffn_dim, &format!("enc.{i}.ffn")),
            })
            .collect();
        let enc_norm = norm(&mut p, d, "enc.norm");

        let dec = (0..config.dec_layers)
            .map(|i| DecLayerIds {
                norm1: norm(&mut p, d, &format!("dec.{i}.norm1")),
                self_attn: attn(&mut p, rng, d, &format!("dec.{i}.self_attn")),
                norm2: norm(&mut p, d, &format!("dec.{i}.norm2")),
                cross_attn: attn(&mut p, rng, d, &format!("dec.{i}.cross_attn")),
                norm3: norm(&mut p, d, &format!("dec.{i}.norm3")),
                ffn: ffn(&mut p, rng, d, config.ffn_dim, &format!("dec.{i}.ffn")),
            })
            .collect();
        let dec_norm = norm(&mut p, d, "dec.norm");

        let in_proj_w = p.push("in_proj.w".into(), gaussian_fan_in(rng, 2 * h, d, 2 * h));
        let in_proj_b = p.push("in_proj.b".into(), Tensor::zeros(1, d));
        let time_w = p.push("time.w".into(), gaussian_fan_in(rng, d, d, d));
        let time_b = p.push("time.b".into(), Tensor::zeros(1, d));
        let out_w = p.push("out.w".into(), gaussian_fan_in(rng, d, h, d));
        let out_b = p.push("out.b".into(), Tensor::zeros(1, h));
        let len_w = p.push("len.w".into(), gaussian_fan_in(rng, d, config.max_len, d));
        let len_b = p.push("len.b".into(), Tensor::zeros(1, config.max_len));

        let layout = Layout {
            codebook,
            src_embed,
            enc,
            enc_norm,
            dec,
            dec_norm,
            in_proj_w,
            in_proj_b,
            time_w,
            time_b,
            out_w,
            out_b,
            len_w,
            len_b,
        };
        Ok(DenoiserState {
            config,
            params: p,
            layout,
        })
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn codebook(&self) -> EmbeddingCodebook {
        EmbeddingCodebook::from_table(self.params.tensor(self.layout.codebook).clone())
    }

    pub fn codebook_param(&self) -> usize {
        self.layout.codebook
    }

    /// Zero the self-conditioning half of the input projection, making the
    /// network provably insensitive to the condition. Test-and-diagnostics
    /// constructor for the collapse checks.
    pub fn make_self_cond_insensitive(&mut self) {
        let h = self.config.latent_dim;
        let w = self.params.tensor_mut(self.layout.in_proj_w);
        for r in h..2 * h {
            for v in w.row_mut(r) {
                *v = 0.0;
            }
        }
    }

    /// Zero the output head so every prediction is the zero latent.
    /// Test-and-diagnostics constructor.
    pub fn zero_output_projection(&mut self) {
        let (w, b) = (self.layout.out_w, self.layout.out_b);
        self.params.tensor_mut(w).scale_in_place(0.0);
        self.params.tensor_mut(b).scale_in_place(0.0);
    }

    /// Replace the embedding codebook table.
    pub fn set_codebook(&mut self, table: Tensor) {
        assert_eq!(
            table.shape(),
            (self.config.vocab, self.config.latent_dim),
            "codebook shape mismatch"
        );
        *self.params.tensor_mut(self.layout.codebook) = table;
    }

    /// FNV-style hash of all parameter bytes; used to assert no-mutation
    /// contracts in tests.
    pub fn param_hash(&self) -> u64 {
        let mut h: u64 = 0xcbf29ce484222325;
        for (_, t) in self.params.iter() {
            for v in t.data() {
                for b in v.to_le_bytes() {
                    h ^= b as u64;
                    h = h.wrapping_mul(0x100000001b3);
                }
            }
        }
        h
    }
}

/// One denoiser evaluation being assembled on a graph. Parameter leaves are
/// memoized so the two passes of a self-conditioned step share them (their
/// gradients accumulate).
pub struct ForwardPass<'a> {
    pub graph: &'a mut Graph,
    param_nodes: Vec<Option<NodeId>>,
}

/// Per-example dropout state drawn from a caller-owned stream; `None`
/// disables dropout (inference and gradient checks).
pub struct DropoutCtx<'r> {
    pub prob: f64,
    pub rng: &'r mut ChaCha8Rng,
}

impl<'a> ForwardPass<'a> {
    pub fn new(graph: &'a mut Graph, state: &DenoiserState) -> Self {
        ForwardPass {
            graph,
            param_nodes: vec![None; state.params.len()],
        }
    }

    /// Insert (or reuse) the graph leaf for parameter `id`.
    pub fn param(&mut self, state: &DenoiserState, id: usize) -> NodeId {
        if let Some(n) = self.param_nodes[id] {
            return n;
        }
        let n = self.graph.param(state.params.tensor(id).clone(), id);
        self.param_nodes[id] = Some(n);
        n
    }

    pub fn codebook_node(&mut self, state: &DenoiserState) -> NodeId {
        self.param(state, state.layout.codebook)
    }

    fn linear(&mut self, state: &DenoiserState, x: NodeId, w: usize, b: usize) -> NodeId {
        let wn = self.param(state, w);
        let bn = self.param(state, b);
        let y = self.graph.matmul(x, wn);
        self.graph.add_row(y, bn)
    }

    fn layer_norm(&mut self, state: &DenoiserState, x: NodeId, ids: NormIds) -> NodeId {
        let g = self.param(state, ids.gain);
        let b = self.param(state, ids.bias);
        self.graph.layer_norm(x, g, b)
    }

    fn dropout(&mut self, x: NodeId, ctx: &mut Option<DropoutCtx>) -> NodeId {
        let Some(ctx) = ctx.as_mut() else {
            return x;
        };
        if ctx.prob <= 0.0 {
            return x;
        }
        let shape = self.graph.value(x).shape();
        let keep = 1.0 - ctx.prob;
        let mask = Tensor::from_fn(shape.0, shape.1, |_, _| {
            if ctx.rng.random::<f64>() < keep {
                1.0 / keep
            } else {
                0.0
            }
        });
        let m = self.graph.constant(mask);
        self.graph.mul_elem(x, m)
    }

    fn attention(
        &mut self,
        state: &DenoiserState,
        q_in: NodeId,
        kv_in: NodeId,
        mask_bias: Option<&Tensor>,
        ids: AttnIds,
    ) -> NodeId {
        let heads = state.config.heads;
        let dk = state.config.model_dim / heads;
        let q = self.linear(state, q_in, ids.wq, ids.bq);
        let k = self.linear(state, kv_in, ids.wk, ids.bk);
        let v = self.linear(state, kv_in, ids.wv, ids.bv);
        let mask_node = mask_bias.map(|m| self.graph.constant(m.clone()));
        let mut merged: Option<NodeId> = None;
        for h in 0..heads {
            let qh = self.graph.slice_cols(q, h * dk, dk);
            let kh = self.graph.slice_cols(k, h * dk, dk);
            let vh = self.graph.slice_cols(v, h * dk, dk);
            let scores = self.graph.matmul_nt(qh, kh);
            let scores = self.graph.scale(scores, 1.0 / (dk as f64).sqrt());
            let scores = match mask_node {
                Some(m) => self.graph.add(scores, m),
                None => scores,
            };
            let attn = self.graph.softmax_rows(scores);
            let oh = self.graph.matmul(attn, vh);
            merged = Some(match merged {
                Some(acc) => self.graph.concat_cols(acc, oh),
                None => oh,
            });
        }
        self.linear(state, merged.unwrap(), ids.wo, ids.bo)
    }

    fn ffn(
        &mut self,
        state: &DenoiserState,
        x: NodeId,
        ids: FfnIds,
        ctx: &mut Option<DropoutCtx>,
    ) -> NodeId {
        let mid = self.linear(state, x, ids.w1, ids.b1);
        let mid = self.graph.gelu(mid);
        let mid = self.dropout(mid, ctx);
        self.linear(state, mid, ids.w2, ids.b2)
    }

    /// Encode the conditioning sequence. Padding positions are masked out of
    /// attention (as keys) and pooling. Returns the encoder output node, the
    /// additive key bias (0 for real, -1e30 for pad), and the keep flags.
    pub fn encode(
        &mut self,
        state: &DenoiserState,
        source: &[usize],
        ctx: &mut Option<DropoutCtx>,
    ) -> Result<(NodeId, Vec<f64>, Vec<bool>)> {
        if source.is_empty() {
            return Err(Error::ShapeMismatch("empty conditioning sequence".into()));
        }
        for &id in source {
            if id >= state.config.vocab {
                return Err(Error::TokenOutOfRange {
                    id,
                    vocab: state.config.vocab,
                });
            }
        }
        let d = state.config.model_dim;
        let keep: Vec<bool> = source.iter().map(|&id| id != PAD).collect();
        let key_bias: Vec<f64> = keep.iter().map(|&k| if k { 0.0 } else { -1e30 }).collect();

        let table = self.param(state, state.layout.src_embed);
        let mut h = self.graph.gather(table, source);
        let pos = self.graph.constant(positional_encoding(source.len(), d));
        h = self.graph.add(h, pos);
        h = self.dropout(h, ctx);

        let self_mask = mask_matrix(source.len(), &key_bias);
        let layers = state.layout.enc.clone();
        for layer in &layers {
            let normed = self.layer_norm(state, h, layer.norm1);
            let a = self.attention(state, normed, normed, Some(&self_mask), layer.attn);
            let a = self.dropout(a, ctx);
            h = self.graph.add(h, a);
            let normed = self.layer_norm(state, h, layer.norm2);
            let f = self.ffn(state, normed, layer.ffn, ctx);
            let f = self.dropout(f, ctx);
            h = self.graph.add(h, f);
        }
        let out = self.layer_norm(state, h, state.layout.enc_norm);
        Ok((out, key_bias, keep))
    }

    /// Decode: predict the clean latent from the noised latent node,
    /// per-token times, self-conditioning node, and the encoder output.
    #[allow(clippy::too_many_arguments)]
    pub fn decode(
        &mut self,
        state: &DenoiserState,
        z_in: NodeId,
        times: &[f64],
        self_cond: NodeId,
        enc_out: NodeId,
        enc_key_bias: &[f64],
        ctx: &mut Option<DropoutCtx>,
    ) -> Result<NodeId> {
        let d = state.config.model_dim;
        let l = self.graph.value(z_in).rows();
        if self.graph.value(self_cond).shape() != (l, state.config.latent_dim) {
            return Err(Error::ShapeMismatch(format!(
                "self-conditioning input {:?}, expected ({l}, {})",
                self.graph.value(self_cond).shape(),
                state.config.latent_dim
            )));
        }
        if times.len() != l {
            return Err(Error::ShapeMismatch(format!(
                "{} diffusion times for {l} target positions",
                times.len()
            )));
        }

        let joined = self.graph.concat_cols(z_in, self_cond);
        let mut x = self.linear(state, joined, state.layout.in_proj_w, state.layout.in_proj_b);
        let tf = self.graph.constant(time_features(times, d));
        let tf = self.linear(state, tf, state.layout.time_w, state.layout.time_b);
        x = self.graph.add(x, tf);
        let pos = self.graph.constant(positional_encoding(l, d));
        x = self.graph.add(x, pos);
        x = self.dropout(x, ctx);

        let cross_mask = mask_matrix(l, enc_key_bias);
        let layers = state.layout.dec.clone();
        for layer in &layers {
            let normed = self.layer_norm(state, x, layer.norm1);
            // Bidirectional self-attention: all target positions attend.
            let a = self.attention(state, normed, normed, None, layer.self_attn);
            let a = self.dropout(a, ctx);
            x = self.graph.add(x, a);
            let normed = self.layer_norm(state, x, layer.norm2);
            let a = self.attention(state, normed, enc_out, Some(&cross_mask), layer.cross_attn);
            let a = self.dropout(a, ctx);
            x = self.graph.add(x, a);
            let normed = self.layer_norm(state, x, layer.norm3);
            let f = self.ffn(state, normed, layer.ffn, ctx);
            let f = self.dropout(f, ctx);
            x = self.graph.add(x, f);
        }
        let x = self.layer_norm(state, x, state.layout.dec_norm);
        Ok(self.linear(state, x, state.layout.out_w, state.layout.out_b))
    }

    /// Length scores over candidate lengths 1..=max_len from the masked
    /// mean-pooled encoder output. Index i scores length i+1.
    pub fn length_logits(
        &mut self,
        state: &DenoiserState,
        enc_out: NodeId,
        keep: &[bool],
    ) -> NodeId {
        let pooled = self.graph.mean_rows(enc_out, keep);
        self.linear(state, pooled, state.layout.len_w, state.layout.len_b)
    }
}

fn mask_matrix(rows: usize, key_bias: &[f64]) -> Tensor {
    Tensor::from_fn(rows, key_bias.len(), |_, c| key_bias[c])
}

/// Standard sinusoidal features over positions 0..len.
fn positional_encoding(len: usize, dim: usize) -> Tensor {
    sinusoid(&(0..len).map(|p| p as f64).collect::<Vec<_>>(), dim)
}

/// Sinusoidal features of the scaled diffusion time t * 2000.
fn time_features(times: &[f64], dim: usize) -> Tensor {
    let scaled: Vec<f64> = times.iter().map(|t| t * TIME_FEATURE_SCALE).collect();
    sinusoid(&scaled, dim)
}

fn sinusoid(positions: &[f64], dim: usize) -> Tensor {
    Tensor::from_fn(positions.len(), dim, |r, c| {
        let i = (c / 2) as f64;
        let rate = (10000.0f64).powf(-2.0 * i / dim as f64);
        let angle = positions[r] * rate;
        if c % 2 == 0 {
            angle.sin()
        } else {
            angle.cos()
        }
    })
}

/// Run the denoiser as a pure function: D(z_in, t, self_cond, source).
/// `self_cond` of None means the all-zeros condition.
pub fn denoise(
    state: &DenoiserState,
    z_in: &Tensor,
    times: &[f64],
    self_cond: Option<&Tensor>,
    source: &[usize],
) -> Result<Tensor> {
    if !state.params.all_finite() {
        return Err(Error::Numeric("denoiser parameters are not finite".into()));
    }
    if z_in.cols() != state.config.latent_dim {
        return Err(Error::ShapeMismatch(format!(
            "latent width {} vs configured {}",
            z_in.cols(),
            state.config.latent_dim
        )));
    }
    let mut graph = Graph::new();
    let mut fp = ForwardPass::new(&mut graph, state);
    let (enc, key_bias, _) = fp.encode(state, source, &mut None)?;
    let z = fp.graph.constant(z_in.clone());
    let sc = match self_cond {
        Some(t) => {
            if t.shape() != z_in.shape() {
                return Err(Error::ShapeMismatch(format!(
                    "self-conditioning {:?} vs latent {:?}",
                    t.shape(),
                    z_in.shape()
                )));
            }
            fp.graph.constant(t.clone())
        }
        None => fp.graph.constant(Tensor::zeros(z_in.rows(), z_in.cols())),
    };
    let out = fp.decode(state, z, times, sc, enc, &key_bias, &mut None)?;
    Ok(graph.value(out).clone())
}

/// Pure length-score evaluation.
pub fn length_logits(state: &DenoiserState, source: &[usize]) -> Result<Tensor> {
    let mut graph = Graph::new();
    let mut fp = ForwardPass::new(&mut graph, state);
    let (enc, _, keep) = fp.encode(state, source, &mut None)?;
    let node = fp.length_logits(state, enc, &keep);
    Ok(graph.value(node).clone())
}

/// Top-k candidate lengths by score, best first; ties break toward the
/// shorter length.
pub fn top_lengths(logits: &Tensor, k: usize) -> Vec<usize> {
    let mut scored: Vec<(usize, f64)> = logits
        .row(0)
        .iter()
        .enumerate()
        .map(|(i, &s)| (i + 1, s))
        .collect();
    scored.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    scored.into_iter().take(k).map(|(l, _)| l).collect()
}
