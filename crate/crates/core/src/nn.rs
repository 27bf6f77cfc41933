//! Transformer and graph-convolution building blocks.
//!
//! All layers are plain parameter bundles over [`Tensor`]s; construction is
//! deterministic given a seed and forward passes record onto the ambient
//! differentiation graph. Post-norm residual wiring throughout: every
//! sub-layer computes `LayerNorm(sublayer(x) + x)`.

use std::cell::RefCell;

use crate::error::{TensorError, TensorResult};
use crate::rng::CounterRng;
use crate::tensor::{concat_cols, Mask, Tensor};

pub const LAYER_NORM_EPS: f64 = 1e-6;

/// Xavier/Glorot-uniform weight matrix.
pub fn xavier(rows: usize, cols: usize, rng: &mut CounterRng) -> Tensor {
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    let data = (0..rows * cols)
        .map(|_| (rng.uniform() * 2.0 - 1.0) * limit)
        .collect();
    Tensor::param(data, &[rows, cols]).expect("xavier shape")
}

/// Dropout context threaded through forward passes; `eval` disables dropout.
pub struct ForwardCtx<'a> {
    dropout: f64,
    rng: Option<&'a RefCell<CounterRng>>,
}

impl<'a> ForwardCtx<'a> {
    pub fn eval() -> ForwardCtx<'static> {
        ForwardCtx {
            dropout: 0.0,
            rng: None,
        }
    }

    pub fn train(dropout: f64, rng: &'a RefCell<CounterRng>) -> ForwardCtx<'a> {
        ForwardCtx {
            dropout,
            rng: Some(rng),
        }
    }

    pub fn apply(&self, x: Tensor) -> TensorResult<Tensor> {
        match self.rng {
            Some(rng) if self.dropout > 0.0 => x.dropout(self.dropout, &mut rng.borrow_mut()),
            _ => Ok(x),
        }
    }
}

// ── Layer norm ───────────────────────────────────────────────────────

pub struct LayerNormParams {
    pub gain: Tensor,
    pub bias: Tensor,
}

impl LayerNormParams {
    pub fn init(d: usize) -> Self {
        LayerNormParams {
            gain: Tensor::param(vec![1.0; d], &[1, d]).expect("ln gain"),
            bias: Tensor::param(vec![0.0; d], &[1, d]).expect("ln bias"),
        }
    }

    pub fn forward(&self, x: &Tensor) -> TensorResult<Tensor> {
        x.layer_norm(&self.gain, &self.bias, LAYER_NORM_EPS)
    }

    pub fn collect(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        out.push((format!("{prefix}.gain"), self.gain.clone()));
        out.push((format!("{prefix}.bias"), self.bias.clone()));
    }
}

// ── Multi-head attention ─────────────────────────────────────────────

/// Scaled dot-product multi-head attention with d x d projections for
/// query, key, value, and output.
pub struct AttentionLayer {
    pub num_heads: usize,
    pub head_dim: usize,
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub wo: Tensor,
}

impl AttentionLayer {
    pub fn init(d: usize, num_heads: usize, rng: &mut CounterRng) -> Self {
        assert!(num_heads > 0 && d % num_heads == 0, "d must divide into heads");
        AttentionLayer {
            num_heads,
            head_dim: d / num_heads,
            wq: xavier(d, d, rng),
            wk: xavier(d, d, rng),
            wv: xavier(d, d, rng),
            wo: xavier(d, d, rng),
        }
    }

    /// Identity projections; used by tests to expose the raw attention math.
    pub fn identity(d: usize, num_heads: usize) -> Self {
        let eye = || {
            let mut data = vec![0.0; d * d];
            for i in 0..d {
                data[i * d + i] = 1.0;
            }
            Tensor::param(data, &[d, d]).expect("identity")
        };
        AttentionLayer {
            num_heads,
            head_dim: d / num_heads,
            wq: eye(),
            wk: eye(),
            wv: eye(),
            wo: eye(),
        }
    }

    pub fn collect(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        out.push((format!("{prefix}.wq"), self.wq.clone()));
        out.push((format!("{prefix}.wk"), self.wk.clone()));
        out.push((format!("{prefix}.wv"), self.wv.clone()));
        out.push((format!("{prefix}.wo"), self.wo.clone()));
    }
}

/// `softmax(Q Kᵀ / sqrt(d_h)) V` per head, heads concatenated and
/// output-projected. `mask` is q x k with `true` marking attendable keys.
pub fn multi_head_attention(
    layer: &AttentionLayer,
    query: &Tensor,
    key: &Tensor,
    value: &Tensor,
    mask: Option<&Mask>,
) -> TensorResult<Tensor> {
    let d = layer.num_heads * layer.head_dim;
    if query.cols() != d || key.cols() != d || value.cols() != d {
        return Err(TensorError::Dimension(format!(
            "attention width mismatch: q {:?}, k {:?}, v {:?}, expected width {d}",
            query.shape(),
            key.shape(),
            value.shape()
        )));
    }
    if key.rows() != value.rows() {
        return Err(TensorError::Dimension(format!(
            "attention memory mismatch: {} keys vs {} values",
            key.rows(),
            value.rows()
        )));
    }
    let q = query.matmul(&layer.wq)?;
    let k = key.matmul(&layer.wk)?;
    let v = value.matmul(&layer.wv)?;
    let scale = 1.0 / (layer.head_dim as f64).sqrt();

    let mut heads = Vec::with_capacity(layer.num_heads);
    for h in 0..layer.num_heads {
        let lo = h * layer.head_dim;
        let hi = lo + layer.head_dim;
        let qh = q.slice_cols(lo, hi)?;
        let kh = k.slice_cols(lo, hi)?;
        let vh = v.slice_cols(lo, hi)?;
        let scores = qh.matmul_nt(&kh)?.mul_scalar(scale);
        let probs = scores.softmax(1, mask)?;
        heads.push(probs.matmul(&vh)?);
    }
    let mut concat = heads[0].clone();
    for h in &heads[1..] {
        concat = concat_cols(&concat, h)?;
    }
    concat.matmul(&layer.wo)
}

// ── Feed-forward ─────────────────────────────────────────────────────

pub struct FeedForward {
    pub w1: Tensor,
    pub w2: Tensor,
}

impl FeedForward {
    pub fn init(d: usize, d_ff: usize, rng: &mut CounterRng) -> Self {
        FeedForward {
            w1: xavier(d, d_ff, rng),
            w2: xavier(d_ff, d, rng),
        }
    }

    pub fn forward(&self, x: &Tensor) -> TensorResult<Tensor> {
        x.matmul(&self.w1)?.relu().matmul(&self.w2)
    }

    pub fn collect(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        out.push((format!("{prefix}.w1"), self.w1.clone()));
        out.push((format!("{prefix}.w2"), self.w2.clone()));
    }
}

// ── Positional encoding ──────────────────────────────────────────────

/// Fixed sinusoidal positional table; deterministic and parameter-free.
pub struct PositionalEncoding {
    pub max_len: usize,
    pub d: usize,
    table: Vec<f64>,
}

impl PositionalEncoding {
    pub fn new(max_len: usize, d: usize) -> Self {
        let mut table = vec![0.0; max_len * d];
        for pos in 0..max_len {
            for i in 0..d / 2 {
                let angle = pos as f64 / 10000f64.powf(2.0 * i as f64 / d as f64);
                table[pos * d + 2 * i] = angle.sin();
                if 2 * i + 1 < d {
                    table[pos * d + 2 * i + 1] = angle.cos();
                }
            }
        }
        PositionalEncoding { max_len, d, table }
    }

    /// Constant [t, d] block for positions 0..t.
    pub fn slice(&self, t: usize) -> TensorResult<Tensor> {
        if t > self.max_len {
            return Err(TensorError::Contract(format!(
                "sequence length {t} exceeds positional table ({})",
                self.max_len
            )));
        }
        Tensor::from_vec(self.table[..t * self.d].to_vec(), &[t, self.d])
    }
}

// ── Encoder ──────────────────────────────────────────────────────────

pub struct EncoderLayer {
    pub self_attn: AttentionLayer,
    pub ln_self: LayerNormParams,
    pub ffn: FeedForward,
    pub ln_ffn: LayerNormParams,
}

impl EncoderLayer {
    pub fn init(d: usize, num_heads: usize, d_ff: usize, rng: &mut CounterRng) -> Self {
        EncoderLayer {
            self_attn: AttentionLayer::init(d, num_heads, rng),
            ln_self: LayerNormParams::init(d),
            ffn: FeedForward::init(d, d_ff, rng),
            ln_ffn: LayerNormParams::init(d),
        }
    }

    pub fn forward(
        &self,
        x: &Tensor,
        mask: Option<&Mask>,
        ctx: &ForwardCtx,
    ) -> TensorResult<Tensor> {
        let attn = multi_head_attention(&self.self_attn, x, x, x, mask)?;
        let h = self.ln_self.forward(&ctx.apply(attn)?.add(x)?)?;
        let ff = self.ffn.forward(&h)?;
        self.ln_ffn.forward(&ctx.apply(ff)?.add(&h)?)
    }

    pub fn collect(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        self.self_attn.collect(&format!("{prefix}.self_attn"), out);
        self.ln_self.collect(&format!("{prefix}.ln_self"), out);
        self.ffn.collect(&format!("{prefix}.ffn"), out);
        self.ln_ffn.collect(&format!("{prefix}.ln_ffn"), out);
    }
}

/// Token embedding + positional encoding + a stack of encoder layers. The
/// embedding handle is shared with the rest of the model.
pub struct EncoderStack {
    pub embedding: Tensor,
    pub pos: PositionalEncoding,
    pub layers: Vec<EncoderLayer>,
    pub d: usize,
}

impl EncoderStack {
    pub fn new(
        embedding: Tensor,
        d: usize,
        num_layers: usize,
        num_heads: usize,
        d_ff: usize,
        max_len: usize,
        rng: &mut CounterRng,
    ) -> Self {
        let layers = (0..num_layers)
            .map(|_| EncoderLayer::init(d, num_heads, d_ff, rng))
            .collect();
        EncoderStack {
            embedding,
            pos: PositionalEncoding::new(max_len, d),
            layers,
            d,
        }
    }

    /// Embed `token_ids`, add positions, and run the stack. `valid` marks
    /// non-PAD positions; when present, padded keys receive no attention.
    pub fn encode(
        &self,
        token_ids: &[usize],
        valid: Option<&[bool]>,
        ctx: &ForwardCtx,
    ) -> TensorResult<Tensor> {
        if token_ids.is_empty() {
            return Err(TensorError::Contract("encode: empty input sequence".into()));
        }
        let t = token_ids.len();
        let mask = valid.map(|v| {
            assert_eq!(v.len(), t, "validity mask length");
            Mask::from_valid_keys(t, v)
        });
        let emb = self
            .embedding
            .gather_rows(token_ids)?
            .mul_scalar((self.d as f64).sqrt());
        let mut h = ctx.apply(emb.add(&self.pos.slice(t)?)?)?;
        for layer in &self.layers {
            h = layer.forward(&h, mask.as_ref(), ctx)?;
        }
        Ok(h)
    }

    pub fn collect(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        for (i, layer) in self.layers.iter().enumerate() {
            layer.collect(&format!("{prefix}.layer{i}"), out);
        }
    }
}

// ── Decoder layer ────────────────────────────────────────────────────

/// Self-attention and feed-forward halves of a decoder layer; the memory
/// (cross-attention) sub-layer is supplied by the caller so the same wiring
/// serves both the vanilla and the multi-source decoder.
pub struct DecoderLayerParams {
    pub self_attn: AttentionLayer,
    pub ln_self: LayerNormParams,
    pub ffn: FeedForward,
    pub ln_ffn: LayerNormParams,
}

impl DecoderLayerParams {
    pub fn init(d: usize, num_heads: usize, d_ff: usize, rng: &mut CounterRng) -> Self {
        DecoderLayerParams {
            self_attn: AttentionLayer::init(d, num_heads, rng),
            ln_self: LayerNormParams::init(d),
            ffn: FeedForward::init(d, d_ff, rng),
            ln_ffn: LayerNormParams::init(d),
        }
    }

    pub fn collect(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        self.self_attn.collect(&format!("{prefix}.self_attn"), out);
        self.ln_self.collect(&format!("{prefix}.ln_self"), out);
        self.ffn.collect(&format!("{prefix}.ffn"), out);
        self.ln_ffn.collect(&format!("{prefix}.ln_ffn"), out);
    }
}

/// One decoder layer: causally masked self-attention, then the caller's
/// memory sub-layer (which must include its own residual + norm), then
/// feed-forward, each with residual + layer norm.
pub fn decoder_layer<F>(
    params: &DecoderLayerParams,
    h_in: &Tensor,
    memory_attend: F,
    ctx: &ForwardCtx,
) -> TensorResult<Tensor>
where
    F: FnOnce(&Tensor) -> TensorResult<Tensor>,
{
    let t = h_in.rows();
    let causal = Mask::causal(t);
    let attn = multi_head_attention(&params.self_attn, h_in, h_in, h_in, Some(&causal))?;
    let h_self = params.ln_self.forward(&ctx.apply(attn)?.add(h_in)?)?;
    let h_cross = memory_attend(&h_self)?;
    let ff = params.ffn.forward(&h_cross)?;
    params.ln_ffn.forward(&ctx.apply(ff)?.add(&h_cross)?)
}

// ── Graph convolution ────────────────────────────────────────────────

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Tanh,
    Linear,
}

impl Activation {
    fn apply(&self, x: Tensor) -> Tensor {
        match self {
            Activation::Relu => x.relu(),
            Activation::Tanh => x.tanh(),
            Activation::Linear => x,
        }
    }
}

/// Single graph-convolution layer `sigma(Ã H W)` over a pre-normalized
/// adjacency Ã.
pub struct GcnLayer {
    pub weight: Tensor,
    pub activation: Activation,
}

impl GcnLayer {
    pub fn init(d_in: usize, d_out: usize, activation: Activation, rng: &mut CounterRng) -> Self {
        GcnLayer {
            weight: xavier(d_in, d_out, rng),
            activation,
        }
    }

    pub fn collect(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        out.push((format!("{prefix}.weight"), self.weight.clone()));
    }
}

/// Symmetric normalization with self-loops: Ã = D̂^{-1/2} (A + I) D̂^{-1/2}.
/// `adjacency` is a row-major |V| x |V| {0,1} matrix.
pub fn normalize_adjacency(adjacency: &[f64], n: usize) -> TensorResult<Tensor> {
    if adjacency.len() != n * n {
        return Err(TensorError::Dimension(format!(
            "adjacency length {} is not {n}x{n}",
            adjacency.len()
        )));
    }
    let mut with_loops = adjacency.to_vec();
    for i in 0..n {
        with_loops[i * n + i] += 1.0;
    }
    let mut inv_sqrt_deg = vec![0.0; n];
    for i in 0..n {
        let deg: f64 = with_loops[i * n..(i + 1) * n].iter().sum();
        inv_sqrt_deg[i] = 1.0 / deg.sqrt();
    }
    for i in 0..n {
        for j in 0..n {
            with_loops[i * n + j] *= inv_sqrt_deg[i] * inv_sqrt_deg[j];
        }
    }
    Tensor::from_vec(with_loops, &[n, n])
}

/// `sigma(Ã H W)` where `adj_norm` comes from [`normalize_adjacency`].
pub fn gcn_forward(layer: &GcnLayer, h: &Tensor, adj_norm: &Tensor) -> TensorResult<Tensor> {
    if adj_norm.rows() != h.rows() || adj_norm.cols() != h.rows() {
        return Err(TensorError::Dimension(format!(
            "gcn: adjacency {:?} does not match {} nodes",
            adj_norm.shape(),
            h.rows()
        )));
    }
    let propagated = adj_norm.matmul(h)?.matmul(&layer.weight)?;
    Ok(layer.activation.apply(propagated))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{backward, grad_check};

    fn rng() -> CounterRng {
        CounterRng::new(99)
    }

    #[test]
    fn attention_over_single_item_returns_value_row() {
        let d = 4;
        let layer = AttentionLayer::identity(d, 2);
        let q = Tensor::from_vec(vec![0.3, -0.2, 0.9, 0.1], &[1, d]).unwrap();
        let v = Tensor::from_vec(vec![1.0, 2.0, 3.0, 4.0], &[1, d]).unwrap();
        let out = multi_head_attention(&layer, &q, &q, &v, None).unwrap();
        for (o, want) in out.to_vec().iter().zip(v.to_vec()) {
            assert!((o - want).abs() < 1e-12);
        }
    }

    #[test]
    fn attention_uniform_keys_average_values() {
        let d = 4;
        let layer = AttentionLayer::identity(d, 1);
        let q = Tensor::from_vec(vec![0.5; d], &[1, d]).unwrap();
        let k = Tensor::from_vec(vec![1.0; 3 * d], &[3, d]).unwrap();
        let v = Tensor::from_vec(
            vec![3.0, 0.0, 0.0, 0.0, 0.0, 6.0, 0.0, 0.0, 0.0, 0.0, 9.0, 0.0],
            &[3, d],
        )
        .unwrap();
        let out = multi_head_attention(&layer, &q, &k, &v, None).unwrap().to_vec();
        assert!((out[0] - 1.0).abs() < 1e-12);
        assert!((out[1] - 2.0).abs() < 1e-12);
        assert!((out[2] - 3.0).abs() < 1e-12);
        assert!(out[3].abs() < 1e-12);
    }

    #[test]
    fn attention_matches_step_by_step_oracle() {
        let d = 6;
        let heads = 2;
        let mut r = rng();
        let layer = AttentionLayer::init(d, heads, &mut r);
        let q = Tensor::randn(&[3, d], 1.0, &mut r);
        let m = Tensor::randn(&[4, d], 1.0, &mut r);
        let out = multi_head_attention(&layer, &q, &m, &m, None).unwrap();

        // Oracle: explicit scores -> softmax -> weighted sum per head.
        let qp = q.matmul(&layer.wq).unwrap().to_vec();
        let kp = m.matmul(&layer.wk).unwrap().to_vec();
        let vp = m.matmul(&layer.wv).unwrap().to_vec();
        let hd = d / heads;
        let mut concat = vec![0.0; 3 * d];
        for h in 0..heads {
            for i in 0..3 {
                let mut scores = [0.0; 4];
                for (j, s) in scores.iter_mut().enumerate() {
                    let mut dot = 0.0;
                    for p in 0..hd {
                        dot += qp[i * d + h * hd + p] * kp[j * d + h * hd + p];
                    }
                    *s = dot / (hd as f64).sqrt();
                }
                let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
                let denom: f64 = exps.iter().sum();
                for p in 0..hd {
                    let mut acc = 0.0;
                    for (j, e) in exps.iter().enumerate() {
                        acc += e / denom * vp[j * d + h * hd + p];
                    }
                    concat[i * d + h * hd + p] = acc;
                }
            }
        }
        let concat_t = Tensor::from_vec(concat, &[3, d]).unwrap();
        let want = concat_t.matmul(&layer.wo).unwrap().to_vec();
        for (a, b) in out.to_vec().iter().zip(&want) {
            assert!((a - b).abs() < 1e-10, "{a} vs {b}");
        }
    }

    #[test]
    fn encode_shape_is_len_by_hidden() {
        let mut r = rng();
        let d = 300;
        let emb = Tensor::randn(&[50, d], 0.02, &mut r);
        let stack = EncoderStack::new(emb, d, 2, 2, 4 * d, 64, &mut r);
        let out = stack
            .encode(&[1, 2, 3, 4, 5, 6, 7], None, &ForwardCtx::eval())
            .unwrap();
        assert_eq!(out.shape(), &[7, 300]);
    }

    #[test]
    fn encode_rejects_empty_context_and_uses_positions() {
        let mut r = rng();
        let d = 8;
        let emb = Tensor::randn(&[10, d], 0.5, &mut r);
        let stack = EncoderStack::new(emb, d, 1, 2, 16, 32, &mut r);
        assert!(matches!(
            stack.encode(&[], None, &ForwardCtx::eval()),
            Err(TensorError::Contract(_))
        ));

        let a = stack.encode(&[1, 2, 3], None, &ForwardCtx::eval()).unwrap();
        let b = stack.encode(&[3, 2, 1], None, &ForwardCtx::eval()).unwrap();
        let delta: f64 = a
            .to_vec()
            .iter()
            .zip(b.to_vec())
            .map(|(x, y)| (x - y).abs())
            .sum();
        assert!(delta > 1e-6, "permuting inputs must change outputs");

        let c = stack.encode(&[1, 2, 3], None, &ForwardCtx::eval()).unwrap();
        assert_eq!(a.to_vec(), c.to_vec(), "identical contexts encode identically");
    }

    #[test]
    fn encode_ignores_pad_keys() {
        let mut r = rng();
        let d = 8;
        let emb = Tensor::param(
            (0..10 * d).map(|_| r.normal() * 0.5).collect(),
            &[10, d],
        )
        .unwrap();
        let stack = EncoderStack::new(emb.clone(), d, 2, 2, 16, 32, &mut r);
        let valid = vec![true, true, false];
        let before = stack
            .encode(&[1, 2, 0], Some(&valid), &ForwardCtx::eval())
            .unwrap();
        // Change the PAD token's embedding row and re-encode.
        let mut table = emb.to_vec();
        for v in table[0..d].iter_mut() {
            *v += 3.5;
        }
        emb.set_data(&table);
        let after = stack
            .encode(&[1, 2, 0], Some(&valid), &ForwardCtx::eval())
            .unwrap();
        let (bd, ad) = (before.to_vec(), after.to_vec());
        for i in 0..2 * d {
            assert_eq!(bd[i], ad[i], "non-PAD output changed at {i}");
        }
    }

    #[test]
    fn decoder_layer_causal_mask_blocks_future() {
        let mut r = rng();
        let d = 8;
        let params = DecoderLayerParams::init(d, 2, 16, &mut r);
        let x = Tensor::randn(&[4, d], 1.0, &mut r);
        let run = |x: &Tensor| {
            decoder_layer(&params, x, |h| Ok(h.clone()), &ForwardCtx::eval())
                .unwrap()
                .to_vec()
        };
        let base = run(&x);
        let mut perturbed = x.to_vec();
        for v in perturbed[3 * d..].iter_mut() {
            *v += 1.0;
        }
        let px = Tensor::from_vec(perturbed, &[4, d]).unwrap();
        let out = run(&px);
        for i in 0..3 * d {
            assert_eq!(base[i], out[i], "row before perturbed position changed");
        }
        assert!(base[3 * d..] != out[3 * d..]);
    }

    #[test]
    fn decoder_layer_single_token_and_oracle() {
        let mut r = rng();
        let d = 6;
        let params = DecoderLayerParams::init(d, 2, 12, &mut r);
        let x = Tensor::randn(&[1, d], 1.0, &mut r);
        let mem = Tensor::randn(&[3, d], 1.0, &mut r);
        let cross = AttentionLayer::init(d, 2, &mut r);
        let ln_cross = LayerNormParams::init(d);
        let out = decoder_layer(
            &params,
            &x,
            |h| {
                let a = multi_head_attention(&cross, h, &mem, &mem, None)?;
                ln_cross.forward(&a.add(h)?)
            },
            &ForwardCtx::eval(),
        )
        .unwrap();
        assert_eq!(out.shape(), &[1, d]);

        // Composed-sub-layer oracle on a 3-token input.
        let x3 = Tensor::randn(&[3, d], 1.0, &mut r);
        let got = decoder_layer(
            &params,
            &x3,
            |h| {
                let a = multi_head_attention(&cross, h, &mem, &mem, None)?;
                ln_cross.forward(&a.add(h)?)
            },
            &ForwardCtx::eval(),
        )
        .unwrap();
        let causal = Mask::causal(3);
        let s = multi_head_attention(&params.self_attn, &x3, &x3, &x3, Some(&causal)).unwrap();
        let h1 = params.ln_self.forward(&s.add(&x3).unwrap()).unwrap();
        let c = multi_head_attention(&cross, &h1, &mem, &mem, None).unwrap();
        let h2 = ln_cross.forward(&c.add(&h1).unwrap()).unwrap();
        let f = params.ffn.forward(&h2).unwrap();
        let want = params.ln_ffn.forward(&f.add(&h2).unwrap()).unwrap();
        for (a, b) in got.to_vec().iter().zip(want.to_vec()) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn gcn_no_edges_identity_weight_is_identity() {
        let n = 3;
        let d = 3;
        let mut w = vec![0.0; d * d];
        for i in 0..d {
            w[i * d + i] = 1.0;
        }
        let layer = GcnLayer {
            weight: Tensor::param(w, &[d, d]).unwrap(),
            activation: Activation::Linear,
        };
        let h = Tensor::from_vec(
            vec![1.0, 2.0, 3.0, -1.0, 0.5, 2.0, 4.0, -2.0, 0.0],
            &[n, d],
        )
        .unwrap();
        let adj = normalize_adjacency(&vec![0.0; n * n], n).unwrap();
        let out = gcn_forward(&layer, &h, &adj).unwrap();
        for (a, b) in out.to_vec().iter().zip(h.to_vec()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn gcn_path_graph_matches_hand_computation() {
        // Path 0-1-2. Degrees with self-loops: 2, 3, 2.
        let n = 3;
        let mut a = vec![0.0; 9];
        a[1] = 1.0;
        a[3] = 1.0;
        a[5] = 1.0;
        a[7] = 1.0;
        let adj = normalize_adjacency(&a, n).unwrap().to_vec();
        let s6 = 1.0 / 6.0_f64.sqrt();
        let want = [0.5, s6, 0.0, s6, 1.0 / 3.0, s6, 0.0, s6, 0.5];
        for (g, w) in adj.iter().zip(want) {
            assert!((g - w).abs() < 1e-12);
        }

        // One feature per node, unit weight: output = Ã h.
        let layer = GcnLayer {
            weight: Tensor::param(vec![1.0], &[1, 1]).unwrap(),
            activation: Activation::Linear,
        };
        let h = Tensor::from_vec(vec![1.0, 2.0, 4.0], &[3, 1]).unwrap();
        let adj_t = normalize_adjacency(&a, n).unwrap();
        let out = gcn_forward(&layer, &h, &adj_t).unwrap().to_vec();
        let hand = [
            0.5 * 1.0 + s6 * 2.0,
            s6 * 1.0 + 2.0 / 3.0 + s6 * 4.0,
            s6 * 2.0 + 0.5 * 4.0,
        ];
        for (g, w) in out.iter().zip(hand) {
            assert!((g - w).abs() < 1e-12);
        }
    }

    #[test]
    fn gcn_permutation_equivariance() {
        let mut r = rng();
        let n = 5;
        let d_in = 4;
        let d_out = 3;
        let layer = GcnLayer::init(d_in, d_out, Activation::Relu, &mut r);
        let mut a = vec![0.0; n * n];
        for &(i, j) in &[(0usize, 1usize), (1, 2), (2, 3), (3, 4), (0, 4)] {
            a[i * n + j] = 1.0;
            a[j * n + i] = 1.0;
        }
        let h: Vec<f64> = (0..n * d_in).map(|_| r.normal()).collect();
        let perm = [2usize, 0, 4, 1, 3]; // new index -> old index

        let adj = normalize_adjacency(&a, n).unwrap();
        let ht = Tensor::from_vec(h.clone(), &[n, d_in]).unwrap();
        let out = gcn_forward(&layer, &ht, &adj).unwrap().to_vec();

        let mut pa = vec![0.0; n * n];
        let mut ph = vec![0.0; n * d_in];
        for i in 0..n {
            for j in 0..n {
                pa[i * n + j] = a[perm[i] * n + perm[j]];
            }
            ph[i * d_in..(i + 1) * d_in]
                .copy_from_slice(&h[perm[i] * d_in..(perm[i] + 1) * d_in]);
        }
        let padj = normalize_adjacency(&pa, n).unwrap();
        let pht = Tensor::from_vec(ph, &[n, d_in]).unwrap();
        let pout = gcn_forward(&layer, &pht, &padj).unwrap().to_vec();
        for i in 0..n {
            for j in 0..d_out {
                assert!(
                    (pout[i * d_out + j] - out[perm[i] * d_out + j]).abs() < 1e-12,
                    "equivariance violated at ({i},{j})"
                );
            }
        }
    }

    #[test]
    fn layers_pass_grad_check() {
        let mut r = rng();
        let d = 6;

        // Attention gradient w.r.t. the query projection.
        let q = Tensor::randn(&[3, d], 1.0, &mut r);
        let mem = Tensor::randn(&[4, d], 1.0, &mut r);
        let layer = AttentionLayer::init(d, 2, &mut r);
        let err = grad_check(
            |wq| {
                let probe = AttentionLayer {
                    num_heads: layer.num_heads,
                    head_dim: layer.head_dim,
                    wq: wq.clone(),
                    wk: layer.wk.clone(),
                    wv: layer.wv.clone(),
                    wo: layer.wo.clone(),
                };
                let out = multi_head_attention(&probe, &q, &mem, &mem, None).unwrap();
                out.mul(&out).unwrap().sum_all()
            },
            &layer.wq,
            1e-5,
        );
        assert!(err < 1e-4, "attention wq grad err {err}");

        // Full encoder layer gradient w.r.t. the input embedding table.
        let emb = Tensor::param((0..8 * d).map(|_| r.normal() * 0.5).collect(), &[8, d]).unwrap();
        let stack = EncoderStack::new(emb.clone(), d, 1, 2, 12, 16, &mut r);
        let err = grad_check(
            |_| {
                let out = stack.encode(&[1, 3, 5], None, &ForwardCtx::eval()).unwrap();
                out.mul(&out).unwrap().sum_all()
            },
            &emb,
            1e-5,
        );
        assert!(err < 1e-4, "encoder grad err {err}");

        // GCN gradient w.r.t. its weight.
        let gcn = GcnLayer::init(4, 3, Activation::Tanh, &mut r);
        let h = Tensor::randn(&[5, 4], 1.0, &mut r);
        let mut a = vec![0.0; 25];
        a[1] = 1.0;
        a[5] = 1.0;
        a[12] = 0.0;
        a[7] = 1.0;
        a[11] = 1.0;
        let adj = normalize_adjacency(&a, 5).unwrap();
        let err = grad_check(
            |w| {
                let probe = GcnLayer {
                    weight: w.clone(),
                    activation: gcn.activation,
                };
                let out = gcn_forward(&probe, &h, &adj).unwrap();
                out.mul(&out).unwrap().sum_all()
            },
            &gcn.weight,
            1e-5,
        );
        assert!(err < 1e-4, "gcn grad err {err}");
    }

    #[test]
    fn dropout_disabled_under_eval_ctx() {
        let mut r = rng();
        let x = Tensor::randn(&[3, 4], 1.0, &mut r);
        let ctx = ForwardCtx::eval();
        let y = ctx.apply(x.clone()).unwrap();
        assert_eq!(x.to_vec(), y.to_vec());

        let cell = RefCell::new(CounterRng::new(1));
        let tctx = ForwardCtx::train(0.5, &cell);
        let z = tctx.apply(x.clone()).unwrap();
        let zeros = z.to_vec().iter().filter(|v| **v == 0.0).count();
        assert!(zeros > 0, "train-mode dropout should zero some entries");
    }

    #[test]
    fn encoder_params_backward_reaches_all() {
        let mut r = rng();
        let d = 6;
        let emb = Tensor::param((0..8 * d).map(|_| r.normal() * 0.5).collect(), &[8, d]).unwrap();
        let stack = EncoderStack::new(emb.clone(), d, 2, 2, 12, 16, &mut r);
        let out = stack.encode(&[1, 2], None, &ForwardCtx::eval()).unwrap();
        backward(&out.mul(&out).unwrap().sum_all()).unwrap();
        let mut params = vec![("embedding".to_string(), emb)];
        stack.collect("encoder", &mut params);
        for (name, p) in params {
            assert!(p.grad().is_some(), "{name} received no gradient");
        }
    }
}
