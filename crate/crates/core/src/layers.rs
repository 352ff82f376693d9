//! Neural sublayers: embeddings, causal multi-head attention with an optional
//! learned locality bias, and the position-wise feed-forward block.
//!
//! Activations for a batch of `B` sequences of length `n` are laid out as
//! `[B*n, d]` row-major tensors; attention scores are `[B, n, n]`.

use std::collections::HashMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numerics::{ParamId, ParamStore, Tape, Tensor, Var};

/// One forward pass: a fresh tape bound to a parameter store, plus the
/// dropout state. Each parameter is recorded on the tape at most once.
pub struct Forward<'a> {
    pub tape: Tape,
    store: &'a ParamStore,
    dropout: Option<(f64, ChaCha8Rng)>,
    bound: HashMap<ParamId, Var>,
}

impl<'a> Forward<'a> {
    /// Evaluation mode: dropout disabled.
    pub fn eval(store: &'a ParamStore) -> Self {
        Self {
            tape: Tape::new(),
            store,
            dropout: None,
            bound: HashMap::new(),
        }
    }

    /// Training mode with inverted dropout at `rate`.
    pub fn train(store: &'a ParamStore, rate: f64, rng: ChaCha8Rng) -> Self {
        Self {
            tape: Tape::new(),
            store,
            dropout: (rate > 0.0).then_some((rate, rng)),
            bound: HashMap::new(),
        }
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.bound.get(&id) {
            return v;
        }
        let v = self.tape.param(self.store, id);
        self.bound.insert(id, v);
        v
    }

    pub fn dropout(&mut self, x: Var) -> Result<Var> {
        let Some((rate, rng)) = &mut self.dropout else {
            return Ok(x);
        };
        let keep = 1.0 / (1.0 - *rate);
        let n = self.tape.value(x).numel();
        let mask: Vec<f64> = (0..n)
            .map(|_| if rng.random::<f64>() < *rate { 0.0 } else { keep })
            .collect();
        Ok(self.tape.mul_const(x, mask)?)
    }

    pub fn into_tape(self) -> Tape {
        self.tape
    }
}

fn init(store: &mut ParamStore, name: String, shape: &[usize], std: f64, rng: &mut ChaCha8Rng) -> ParamId {
    store.add(name, Tensor::randn(shape, std, rng))
}

/// Token embedding table; row 0 is the padding token.
#[derive(Debug, Clone)]
pub struct EmbeddingTable {
    pub table: ParamId,
    pub vocab: usize,
    pub d: usize,
}

impl EmbeddingTable {
    pub fn new(store: &mut ParamStore, name: &str, vocab: usize, d: usize, std: f64, rng: &mut ChaCha8Rng) -> Self {
        Self {
            table: init(store, name.to_string(), &[vocab, d], std, rng),
            vocab,
            d,
        }
    }

    pub fn lookup(&self, fwd: &mut Forward, ids: &[usize]) -> Result<Var> {
        if let Some(&bad) = ids.iter().find(|&&i| i >= self.vocab) {
            return Err(Error::UnknownId {
                what: "embedding",
                id: bad,
                size: self.vocab,
            });
        }
        let t = fwd.param(self.table);
        Ok(fwd.tape.gather_rows(t, ids)?)
    }
}

/// Learned absolute position embeddings, one row per position.
#[derive(Debug, Clone)]
pub struct PositionTable {
    pub table: ParamId,
    pub n: usize,
}

impl PositionTable {
    pub fn new(store: &mut ParamStore, name: &str, n: usize, d: usize, std: f64, rng: &mut ChaCha8Rng) -> Self {
        Self {
            table: init(store, name.to_string(), &[n, d], std, rng),
            n,
        }
    }

    /// Position rows for `batch` consecutive sequences: `[batch*n, d]`.
    pub fn tiled(&self, fwd: &mut Forward, batch: usize) -> Result<Var> {
        let ids: Vec<usize> = (0..batch).flat_map(|_| 0..self.n).collect();
        let t = fwd.param(self.table);
        Ok(fwd.tape.gather_rows(t, &ids)?)
    }
}

/// `emb[ids[t]] + pos[t]` for every position of every sequence in `ids`
/// (`ids.len()` must be a multiple of the position table length).
pub fn embed_sequence(fwd: &mut Forward, ids: &[usize], emb: &EmbeddingTable, pos: &PositionTable) -> Result<Var> {
    if ids.is_empty() || ids.len() % pos.n != 0 {
        return Err(Error::Config(format!(
            "{} ids do not form sequences of length {}",
            ids.len(),
            pos.n
        )));
    }
    let e = emb.lookup(fwd, ids)?;
    let p = pos.tiled(fwd, ids.len() / pos.n)?;
    Ok(fwd.tape.add(e, p)?)
}

/// Relative-distance embeddings indexed by `n + i - j` (0-based) for causal
/// pairs `j <= i`; rows below `n` are never read.
#[derive(Debug, Clone)]
pub struct DistanceTable {
    pub table: ParamId,
    pub n: usize,
    pub width: usize,
}

impl DistanceTable {
    pub fn new(store: &mut ParamStore, name: &str, n: usize, width: usize, std: f64, rng: &mut ChaCha8Rng) -> Self {
        Self {
            table: init(store, name.to_string(), &[2 * n, width], std, rng),
            n,
            width,
        }
    }
}

#[derive(Debug, Clone)]
pub struct LocalMaskParams {
    /// `[d/M, 1]`
    pub w_l: ParamId,
    /// `[1]`
    pub b_l: ParamId,
}

#[derive(Debug, Clone)]
pub struct HeadParams {
    pub w_q: ParamId,
    pub w_k: ParamId,
    pub w_v: ParamId,
    pub local: Option<LocalMaskParams>,
}

#[derive(Debug, Clone)]
pub struct AttentionParams {
    pub heads: Vec<HeadParams>,
    pub w_o: ParamId,
    pub d: usize,
}

impl AttentionParams {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        d: usize,
        num_heads: usize,
        with_local_mask: bool,
        std: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if num_heads == 0 || d % num_heads != 0 {
            return Err(Error::Config(format!("{num_heads} heads do not divide d={d}")));
        }
        let dh = d / num_heads;
        let mut heads = Vec::with_capacity(num_heads);
        for m in 0..num_heads {
            let w_q = init(store, format!("{prefix}.head{m}.w_q"), &[d, dh], std, rng);
            let w_k = init(store, format!("{prefix}.head{m}.w_k"), &[d, dh], std, rng);
            let w_v = init(store, format!("{prefix}.head{m}.w_v"), &[d, dh], std, rng);
            let local = with_local_mask.then(|| LocalMaskParams {
                w_l: init(store, format!("{prefix}.head{m}.w_l"), &[dh, 1], std, rng),
                b_l: store.add(format!("{prefix}.head{m}.b_l"), Tensor::zeros(&[1])),
            });
            heads.push(HeadParams { w_q, w_k, w_v, local });
        }
        let w_o = init(store, format!("{prefix}.w_o"), &[d, d], std, rng);
        Ok(Self { heads, w_o, d })
    }

    pub fn head_dim(&self) -> usize {
        self.d / self.heads.len()
    }
}

/// Shape of the current batch plus which key positions are padding.
#[derive(Debug, Clone, Copy)]
pub struct BatchLayout<'p> {
    pub batch: usize,
    pub n: usize,
    /// `batch*n` flags, true at padding positions.
    pub pad: &'p [bool],
}

impl BatchLayout<'_> {
    /// Attention entries that must stay at `-inf`: future keys and padding keys.
    pub fn forbidden(&self) -> Vec<bool> {
        let n = self.n;
        let mut mask = Vec::with_capacity(self.batch * n * n);
        for s in 0..self.batch {
            for i in 0..n {
                for j in 0..n {
                    mask.push(j > i || self.pad[s * n + j]);
                }
            }
        }
        mask
    }
}

/// Output of [`causal_attention`]: the projected result and the post-softmax
/// weights of each head (`[B, n, n]`, before dropout).
pub struct AttentionOutput {
    pub out: Var,
    pub weights: Vec<Var>,
}

/// `(q + k + d) · w_l + b_l` for one query/key pair of one head.
pub fn local_mask_logit(query: &[f64], key: &[f64], distance: &[f64], w_l: &[f64], b_l: f64) -> f64 {
    query
        .iter()
        .zip(key)
        .zip(distance)
        .zip(w_l)
        .map(|(((q, k), d), w)| (q + k + d) * w)
        .sum::<f64>()
        + b_l
}

/// Multi-head directional self-attention over `h` (`[B*n, d]`).
///
/// Scores are `Q_i·K_j / sqrt(d/M)` for allowed pairs; with the local mask the
/// learned term `ln θ_ij` is added before the softmax. Future and padding keys
/// stay at `-inf` in every case.
pub fn causal_attention(
    fwd: &mut Forward,
    h: Var,
    params: &AttentionParams,
    layout: BatchLayout,
    use_local_mask: bool,
    distances: Option<&DistanceTable>,
) -> Result<AttentionOutput> {
    let (batch, n) = (layout.batch, layout.n);
    if fwd.tape.shape(h) != [batch * n, params.d] {
        return Err(Error::Config(format!(
            "attention input {:?} does not match batch {batch}×{n}×{}",
            fwd.tape.shape(h),
            params.d
        )));
    }
    if use_local_mask {
        if distances.is_none() || params.heads.iter().any(|hp| hp.local.is_none()) {
            return Err(Error::Config("local mask enabled without its parameters".into()));
        }
    }
    let dh = params.head_dim();
    let forbidden = layout.forbidden();
    let scale = 1.0 / (dh as f64).sqrt();

    let mut outputs = Vec::with_capacity(params.heads.len());
    let mut weights = Vec::with_capacity(params.heads.len());
    for (m, hp) in params.heads.iter().enumerate() {
        let (wq, wk, wv) = (fwd.param(hp.w_q), fwd.param(hp.w_k), fwd.param(hp.w_v));
        let tape = &mut fwd.tape;
        let q = tape.matmul(h, wq)?;
        let k = tape.matmul(h, wk)?;
        let v = tape.matmul(h, wv)?;
        let q3 = tape.reshape(q, &[batch, n, dh])?;
        let k3 = tape.reshape(k, &[batch, n, dh])?;
        let v3 = tape.reshape(v, &[batch, n, dh])?;
        let raw = tape.batch_matmul(q3, k3, true)?;
        let mut scores = tape.scale(raw, scale)?;

        if use_local_mask {
            let local = hp.local.as_ref().expect("checked above");
            let dist = distances.expect("checked above");
            let (wl, bl, table) = (fwd.param(local.w_l), fwd.param(local.b_l), fwd.param(dist.table));
            let tape = &mut fwd.tape;
            // The bias is linear in q, k and d, so each projects onto w_l separately.
            let ql = tape.matmul(q, wl)?;
            let kl = tape.matmul(k, wl)?;
            let rows = if dist.width == dh {
                table
            } else {
                tape.slice_lastdim(table, m * dh, (m + 1) * dh)?
            };
            let dl = tape.matmul(rows, wl)?;
            let bias = tape.pairwise_bias(ql, kl, dl, bl, batch, n)?;
            scores = tape.add(scores, bias)?;
        }

        let tape = &mut fwd.tape;
        let masked = tape.masked_fill(scores, forbidden.clone(), f64::NEG_INFINITY)?;
        let attn = tape.softmax_lastdim(masked)?;
        weights.push(attn);
        let dropped = fwd.dropout(attn)?;
        let tape = &mut fwd.tape;
        let o = tape.batch_matmul(dropped, v3, false)?;
        outputs.push(tape.reshape(o, &[batch * n, dh])?);
    }
    let wo = fwd.param(params.w_o);
    let tape = &mut fwd.tape;
    let cat = tape.concat_lastdim(&outputs)?;
    let out = tape.matmul(cat, wo)?;
    Ok(AttentionOutput { out, weights })
}

#[derive(Debug, Clone)]
pub struct FfnParams {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

impl FfnParams {
    pub fn new(store: &mut ParamStore, prefix: &str, d: usize, d_ff: usize, std: f64, rng: &mut ChaCha8Rng) -> Self {
        Self {
            w1: init(store, format!("{prefix}.w1"), &[d, d_ff], std, rng),
            b1: store.add(format!("{prefix}.b1"), Tensor::zeros(&[d_ff])),
            w2: init(store, format!("{prefix}.w2"), &[d_ff, d], std, rng),
            b2: store.add(format!("{prefix}.b2"), Tensor::zeros(&[d])),
        }
    }
}

/// Row-wise `ReLU(h·W1 + b1)·W2 + b2`.
pub fn pointwise_ffn(fwd: &mut Forward, h: Var, p: &FfnParams) -> Result<Var> {
    let (w1, b1, w2, b2) = (fwd.param(p.w1), fwd.param(p.b1), fwd.param(p.w2), fwd.param(p.b2));
    let tape = &mut fwd.tape;
    let a = tape.matmul(h, w1)?;
    let a = tape.add_row(a, b1)?;
    let a = tape.relu(a)?;
    let a = fwd.dropout(a)?;
    let tape = &mut fwd.tape;
    let o = tape.matmul(a, w2)?;
    Ok(tape.add_row(o, b2)?)
}

#[derive(Debug, Clone)]
pub struct LayerNormParams {
    pub gain: ParamId,
    pub bias: ParamId,
    pub eps: f64,
}

impl LayerNormParams {
    pub fn new(store: &mut ParamStore, prefix: &str, d: usize, eps: f64) -> Self {
        Self {
            gain: store.add(format!("{prefix}.gain"), Tensor::filled(&[d], 1.0)),
            bias: store.add(format!("{prefix}.bias"), Tensor::zeros(&[d])),
            eps,
        }
    }

    pub fn apply(&self, fwd: &mut Forward, x: Var) -> Result<Var> {
        let (g, b) = (fwd.param(self.gain), fwd.param(self.bias));
        Ok(fwd.tape.layer_norm(x, g, b, self.eps)?)
    }
}
