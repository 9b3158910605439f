//! Transformer encoder with manual back-propagation.
//!
//! ```text
//! x = LN(tok[id] + pos[t] + seg[s])
//! per layer:  h1 = LN(x + Attn(x));  x = LN(h1 + W2·gelu(W1·h1))
//! cls = x[0];  p = softmax(cls·Wc + bc)
//! ```
//!
//! With `pre_norm` each sub-layer sees `LN(x)` and adds to an unnormalized
//! residual stream, and the embedding norm is applied to the final output.
//!
//! All parameters live in one flat `Vec<f64>`; [`ParamLayout`] names the
//! ranges. Gradients use the same layout.

use std::ops::Range;

use rand::Rng;
use rayon::prelude::*;

use super::vocab::{Vocab, SEP_ID};
use super::{EncoderConfig, EncoderError};
use crate::augment::seeded_rng;
use crate::entry::{serialize_single, tokenize, DataEntry, TokenSeq, SEP};

const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub wq: Range<usize>,
    pub bq: Range<usize>,
    pub wk: Range<usize>,
    pub bk: Range<usize>,
    pub wv: Range<usize>,
    pub bv: Range<usize>,
    pub wo: Range<usize>,
    pub bo: Range<usize>,
    pub ln1_g: Range<usize>,
    pub ln1_b: Range<usize>,
    pub w1: Range<usize>,
    pub b1: Range<usize>,
    pub w2: Range<usize>,
    pub b2: Range<usize>,
    pub ln2_g: Range<usize>,
    pub ln2_b: Range<usize>,
}

/// Named ranges into the flat parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamLayout {
    pub tok: Range<usize>,
    pub pos: Range<usize>,
    pub seg: Range<usize>,
    pub emb_ln_g: Range<usize>,
    pub emb_ln_b: Range<usize>,
    pub layers: Vec<LayerParams>,
    pub head_w: Range<usize>,
    pub head_b: Range<usize>,
    pub total: usize,
}

impl ParamLayout {
    pub fn new(cfg: &EncoderConfig) -> Self {
        let d = cfg.embed_dim;
        let f = cfg.ffn_dim;
        let mut next = 0usize;
        let mut take = |n: usize| {
            let r = next..next + n;
            next += n;
            r
        };
        let tok = take(cfg.vocab_size * d);
        let pos = take(cfg.max_seq_len * d);
        let seg = take(2 * d);
        let emb_ln_g = take(d);
        let emb_ln_b = take(d);
        let layers = (0..cfg.num_layers)
            .map(|_| LayerParams {
                wq: take(d * d),
                bq: take(d),
                wk: take(d * d),
                bk: take(d),
                wv: take(d * d),
                bv: take(d),
                wo: take(d * d),
                bo: take(d),
                ln1_g: take(d),
                ln1_b: take(d),
                w1: take(d * f),
                b1: take(f),
                w2: take(f * d),
                b2: take(d),
                ln2_g: take(d),
                ln2_b: take(d),
            })
            .collect();
        let head_w = take(d * 2);
        let head_b = take(2);
        ParamLayout {
            tok,
            pos,
            seg,
            emb_ln_g,
            emb_ln_b,
            layers,
            head_w,
            head_b,
            total: next,
        }
    }

    /// (range, is-a-bias-or-layernorm) for every tensor; used for init.
    fn tensors(&self) -> Vec<(Range<usize>, Init)> {
        let mut v = vec![
            (self.tok.clone(), Init::Uniform),
            (self.pos.clone(), Init::Uniform),
            (self.seg.clone(), Init::Uniform),
            (self.emb_ln_g.clone(), Init::One),
            (self.emb_ln_b.clone(), Init::Zero),
        ];
        for l in &self.layers {
            v.extend([
                (l.wq.clone(), Init::Uniform),
                (l.bq.clone(), Init::Zero),
                (l.wk.clone(), Init::Uniform),
                (l.bk.clone(), Init::Zero),
                (l.wv.clone(), Init::Uniform),
                (l.bv.clone(), Init::Zero),
                (l.wo.clone(), Init::Uniform),
                (l.bo.clone(), Init::Zero),
                (l.ln1_g.clone(), Init::One),
                (l.ln1_b.clone(), Init::Zero),
                (l.w1.clone(), Init::Uniform),
                (l.b1.clone(), Init::Zero),
                (l.w2.clone(), Init::Uniform),
                (l.b2.clone(), Init::Zero),
                (l.ln2_g.clone(), Init::One),
                (l.ln2_b.clone(), Init::Zero),
            ]);
        }
        v.push((self.head_w.clone(), Init::Uniform));
        v.push((self.head_b.clone(), Init::Zero));
        v
    }
}

#[derive(Clone, Copy)]
enum Init {
    Uniform,
    Zero,
    One,
}

// ---- dense helpers (row-major) -------------------------------------------

/// out(m×n) = a(m×k) · b(k×n) + bias
fn linear(a: &[f64], m: usize, k: usize, b: &[f64], bias: &[f64], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        row.copy_from_slice(bias);
        for p in 0..k {
            let av = a[i * k + p];
            let brow = &b[p * n..(p + 1) * n];
            for (o, bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

/// Back-propagates `y = x·w + b`: accumulates dw, db and returns dx.
fn linear_backward(
    x: &[f64],
    m: usize,
    k: usize,
    w: &[f64],
    dy: &[f64],
    n: usize,
    dw: &mut [f64],
    db: &mut [f64],
) -> Vec<f64> {
    for i in 0..m {
        let dyrow = &dy[i * n..(i + 1) * n];
        for (g, d) in db.iter_mut().zip(dyrow) {
            *g += d;
        }
        for p in 0..k {
            let xv = x[i * k + p];
            let dwrow = &mut dw[p * n..(p + 1) * n];
            for (g, d) in dwrow.iter_mut().zip(dyrow) {
                *g += xv * d;
            }
        }
    }
    let mut dx = vec![0.0; m * k];
    for i in 0..m {
        let dyrow = &dy[i * n..(i + 1) * n];
        for p in 0..k {
            let wrow = &w[p * n..(p + 1) * n];
            dx[i * k + p] = wrow.iter().zip(dyrow).map(|(a, b)| a * b).sum();
        }
    }
    dx
}

struct LnCache {
    xhat: Vec<f64>,
    inv_std: Vec<f64>,
}

fn layer_norm(x: &[f64], rows: usize, d: usize, g: &[f64], b: &[f64]) -> (Vec<f64>, LnCache) {
    let mut y = vec![0.0; rows * d];
    let mut xhat = vec![0.0; rows * d];
    let mut inv_std = vec![0.0; rows];
    for r in 0..rows {
        let row = &x[r * d..(r + 1) * d];
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let is = 1.0 / (var + LN_EPS).sqrt();
        inv_std[r] = is;
        for c in 0..d {
            let xh = (row[c] - mean) * is;
            xhat[r * d + c] = xh;
            y[r * d + c] = g[c] * xh + b[c];
        }
    }
    (y, LnCache { xhat, inv_std })
}

fn layer_norm_backward(
    dy: &[f64],
    rows: usize,
    d: usize,
    g: &[f64],
    cache: &LnCache,
    dg: &mut [f64],
    db: &mut [f64],
) -> Vec<f64> {
    let mut dx = vec![0.0; rows * d];
    let mut dxhat = vec![0.0; d];
    for r in 0..rows {
        let xh = &cache.xhat[r * d..(r + 1) * d];
        let dyr = &dy[r * d..(r + 1) * d];
        for c in 0..d {
            dg[c] += dyr[c] * xh[c];
            db[c] += dyr[c];
            dxhat[c] = dyr[c] * g[c];
        }
        let mean_d = dxhat.iter().sum::<f64>() / d as f64;
        let mean_dx = dxhat.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / d as f64;
        for c in 0..d {
            dx[r * d + c] = cache.inv_std[r] * (dxhat[c] - mean_d - xh[c] * mean_dx);
        }
    }
    dx
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

/// Numerically stable softmax over a slice, in place.
pub(crate) fn softmax_in_place(v: &mut [f64]) {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in v.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in v.iter_mut() {
        *x /= sum;
    }
}

fn dropout_mask<R: Rng + ?Sized>(n: usize, rate: f64, rng: Option<&mut R>) -> Option<Vec<f64>> {
    let rng = rng?;
    if rate <= 0.0 {
        return None;
    }
    let keep = 1.0 / (1.0 - rate);
    Some((0..n).map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep }).collect())
}

fn apply_mask(x: &mut [f64], mask: &Option<Vec<f64>>) {
    if let Some(m) = mask {
        for (v, k) in x.iter_mut().zip(m) {
            *v *= k;
        }
    }
}

struct AttnOut {
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
    attn: Vec<f64>,
    ctx: Vec<f64>,
    attn_out: Vec<f64>,
    drop_attn: Option<Vec<f64>>,
}

struct LayerCache {
    /// What Q, K and V were computed from.
    attn_in: Vec<f64>,
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
    attn: Vec<f64>,
    ctx: Vec<f64>,
    drop_attn: Option<Vec<f64>>,
    ln1: LnCache,
    /// What the first FFN projection was applied to.
    ffn_in: Vec<f64>,
    f1: Vec<f64>,
    g: Vec<f64>,
    drop_ffn: Option<Vec<f64>>,
    ln2: LnCache,
}

/// Everything the backward pass needs from one forward pass.
pub struct ForwardCache {
    ids: Vec<u32>,
    segments: Vec<usize>,
    emb_ln: LnCache,
    drop_emb: Option<Vec<f64>>,
    layers: Vec<LayerCache>,
    output: Vec<f64>,
}

impl ForwardCache {
    pub fn cls(&self, d: usize) -> &[f64] {
        &self.output[..d]
    }

    /// Attention probabilities per layer, laid out `[head][query][key]`.
    pub fn attention(&self) -> Vec<&[f64]> {
        self.layers.iter().map(|l| l.attn.as_slice()).collect()
    }
}

/// Eval-mode forward output.
#[derive(Debug, Clone, PartialEq)]
pub struct Forward {
    pub seq_len: usize,
    pub dim: usize,
    /// `seq_len × dim`, row-major.
    pub reps: Vec<f64>,
    pub cls: Vec<f64>,
}

/// Segment ids: 0 up to and including the first `[SEP]`, 1 afterwards.
fn segments(ids: &[u32]) -> Vec<usize> {
    let mut seg = 0;
    ids.iter()
        .map(|&id| {
            let s = seg;
            if id == SEP_ID {
                seg = 1;
            }
            s
        })
        .collect()
}

/// Token embeddings, Transformer layers and the two-way classifier head.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderModel {
    config: EncoderConfig,
    layout: ParamLayout,
    vocab: Vocab,
    params: Vec<f64>,
}

impl EncoderModel {
    /// Seeded initialization: weights uniform in ±`init_range`, biases zero,
    /// layer-norm gains one.
    pub fn new(config: EncoderConfig, vocab: Vocab, seed: u64) -> Result<Self, EncoderError> {
        let mut config = config;
        config.vocab_size = vocab.len();
        config.validate()?;
        let layout = ParamLayout::new(&config);
        let mut params = vec![0.0; layout.total];
        let mut rng = seeded_rng(seed);
        for (r, init) in layout.tensors() {
            for p in &mut params[r] {
                *p = match init {
                    Init::Uniform => rng.random_range(-config.init_range..=config.init_range),
                    Init::Zero => 0.0,
                    Init::One => 1.0,
                };
            }
        }
        Ok(EncoderModel {
            config,
            layout,
            vocab,
            params,
        })
    }

    pub fn from_parts(config: EncoderConfig, vocab: Vocab, params: Vec<f64>) -> Result<Self, EncoderError> {
        config.validate()?;
        if config.vocab_size != vocab.len() {
            return Err(EncoderError::Shape(format!(
                "config vocab_size {} but vocabulary has {} tokens",
                config.vocab_size,
                vocab.len()
            )));
        }
        let layout = ParamLayout::new(&config);
        if params.len() != layout.total {
            return Err(EncoderError::Shape(format!(
                "expected {} parameters, got {}",
                layout.total,
                params.len()
            )));
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(EncoderError::NonFiniteParameters);
        }
        Ok(EncoderModel {
            config,
            layout,
            vocab,
            params,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn encode_tokens(&self, seq: &TokenSeq) -> Vec<u32> {
        self.vocab.encode(seq)
    }

    fn check_input(&self, ids: &[u32]) -> Result<(), EncoderError> {
        if ids.is_empty() {
            return Err(EncoderError::EmptySequence);
        }
        if ids.len() > self.config.max_seq_len {
            return Err(EncoderError::SequenceTooLong {
                len: ids.len(),
                max: self.config.max_seq_len,
            });
        }
        if let Some(&bad) = ids.iter().find(|&&id| id as usize >= self.config.vocab_size) {
            return Err(EncoderError::TokenOutOfRange {
                id: bad,
                vocab_size: self.config.vocab_size,
            });
        }
        Ok(())
    }

    /// Deterministic forward pass with dropout off.
    pub fn forward(&self, ids: &[u32]) -> Result<Forward, EncoderError> {
        let cache = self.forward_cached::<rand_chacha::ChaCha8Rng>(ids, None)?;
        let d = self.config.embed_dim;
        Ok(Forward {
            seq_len: ids.len(),
            dim: d,
            cls: cache.output[..d].to_vec(),
            reps: cache.output,
        })
    }

    /// Forward pass keeping the intermediates. Dropout is active iff an RNG is given.
    pub fn forward_cached<R: Rng + ?Sized>(&self, ids: &[u32], mut rng: Option<&mut R>) -> Result<ForwardCache, EncoderError> {
        self.check_input(ids)?;
        let t = ids.len();
        let d = self.config.embed_dim;
        let rate = self.config.dropout;
        let pre = self.config.pre_norm;
        let p = &self.params;
        let lay = &self.layout;

        let segs = segments(ids);
        let mut x0 = vec![0.0; t * d];
        for (i, (&id, &s)) in ids.iter().zip(&segs).enumerate() {
            let tok = &p[lay.tok.start + id as usize * d..][..d];
            let pos = &p[lay.pos.start + i * d..][..d];
            let seg = &p[lay.seg.start + s * d..][..d];
            for c in 0..d {
                x0[i * d + c] = tok[c] + pos[c] + seg[c];
            }
        }
        let emb_g = &p[lay.emb_ln_g.clone()];
        let emb_b = &p[lay.emb_ln_b.clone()];
        let (mut x, mut emb_ln) = if pre {
            (x0, None)
        } else {
            let (y, c) = layer_norm(&x0, t, d, emb_g, emb_b);
            (y, Some(c))
        };
        let drop_emb = dropout_mask(t * d, rate, rng.as_deref_mut());
        apply_mask(&mut x, &drop_emb);

        let mut layers = Vec::with_capacity(lay.layers.len());
        for lp in &lay.layers {
            // Post-norm: h1 = LN1(x + attn(x)), out = LN2(h1 + ffn(h1)).
            // Pre-norm:  h1 = x + attn(LN1(x)), out = h1 + ffn(LN2(h1)).
            let (attn_in, ln1_pre) = if pre {
                let (y, c) = layer_norm(&x, t, d, &p[lp.ln1_g.clone()], &p[lp.ln1_b.clone()]);
                (y, Some(c))
            } else {
                (x.clone(), None)
            };
            let mut sub = self.attention_forward(lp, &attn_in, t);
            sub.drop_attn = dropout_mask(t * d, rate, rng.as_deref_mut());
            apply_mask(&mut sub.attn_out, &sub.drop_attn);
            let r1: Vec<f64> = x.iter().zip(&sub.attn_out).map(|(a, b)| a + b).collect();
            let (h1, ln1) = match ln1_pre {
                Some(c) => (r1, c),
                None => layer_norm(&r1, t, d, &p[lp.ln1_g.clone()], &p[lp.ln1_b.clone()]),
            };

            let (ffn_in, ln2_pre) = if pre {
                let (y, c) = layer_norm(&h1, t, d, &p[lp.ln2_g.clone()], &p[lp.ln2_b.clone()]);
                (y, Some(c))
            } else {
                (h1.clone(), None)
            };
            let f1 = linear(&ffn_in, t, d, &p[lp.w1.clone()], &p[lp.b1.clone()], self.config.ffn_dim);
            let g: Vec<f64> = f1.iter().map(|&z| gelu(z)).collect();
            let mut f2 = linear(&g, t, self.config.ffn_dim, &p[lp.w2.clone()], &p[lp.b2.clone()], d);
            let drop_ffn = dropout_mask(t * d, rate, rng.as_deref_mut());
            apply_mask(&mut f2, &drop_ffn);
            let r2: Vec<f64> = h1.iter().zip(&f2).map(|(a, b)| a + b).collect();
            let (out, ln2) = match ln2_pre {
                Some(c) => (r2, c),
                None => layer_norm(&r2, t, d, &p[lp.ln2_g.clone()], &p[lp.ln2_b.clone()]),
            };

            x = out;
            layers.push(LayerCache {
                attn_in,
                q: sub.q,
                k: sub.k,
                v: sub.v,
                attn: sub.attn,
                ctx: sub.ctx,
                drop_attn: sub.drop_attn,
                ln1,
                ffn_in,
                f1,
                g,
                drop_ffn,
                ln2,
            });
        }
        if pre {
            let (y, c) = layer_norm(&x, t, d, emb_g, emb_b);
            x = y;
            emb_ln = Some(c);
        }
        Ok(ForwardCache {
            ids: ids.to_vec(),
            segments: segs,
            emb_ln: emb_ln.expect("embedding norm is always computed"),
            drop_emb,
            layers,
            output: x,
        })
    }

    fn attention_forward(&self, lp: &LayerParams, x: &[f64], t: usize) -> AttnOut {
        let d = self.config.embed_dim;
        let h = self.config.num_heads;
        let dh = d / h;
        let scale = 1.0 / (dh as f64).sqrt();
        let p = &self.params;
        let q = linear(x, t, d, &p[lp.wq.clone()], &p[lp.bq.clone()], d);
        let k = linear(x, t, d, &p[lp.wk.clone()], &p[lp.bk.clone()], d);
        let v = linear(x, t, d, &p[lp.wv.clone()], &p[lp.bv.clone()], d);
        let mut attn = vec![0.0; h * t * t];
        let mut ctx = vec![0.0; t * d];
        for head in 0..h {
            let off = head * dh;
            for i in 0..t {
                let row = &mut attn[(head * t + i) * t..][..t];
                let qi = &q[i * d + off..][..dh];
                for (j, s) in row.iter_mut().enumerate() {
                    let kj = &k[j * d + off..][..dh];
                    *s = qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() * scale;
                }
                softmax_in_place(row);
                let ci = &mut ctx[i * d + off..][..dh];
                for (j, a) in row.iter().enumerate() {
                    let vj = &v[j * d + off..][..dh];
                    for (c, vv) in ci.iter_mut().zip(vj) {
                        *c += a * vv;
                    }
                }
            }
        }
        let attn_out = linear(&ctx, t, d, &p[lp.wo.clone()], &p[lp.bo.clone()], d);
        AttnOut {
            q,
            k,
            v,
            attn,
            ctx,
            attn_out,
            drop_attn: None,
        }
    }

    /// Gradient through `attn_out = Wo·ctx + bo` back to the attention input.
    fn attention_backward(&self, lp: &LayerParams, lc: &LayerCache, dout: &[f64], t: usize, grads: &mut [f64]) -> Vec<f64> {
        let d = self.config.embed_dim;
        let h = self.config.num_heads;
        let dh = d / h;
        let scale = 1.0 / (dh as f64).sqrt();
        let p = &self.params;
        let (gwo, gbo) = split_two(grads, &lp.wo, &lp.bo);
        let dctx = linear_backward(&lc.ctx, t, d, &p[lp.wo.clone()], dout, d, gwo, gbo);

        let mut dq = vec![0.0; t * d];
        let mut dk = vec![0.0; t * d];
        let mut dv = vec![0.0; t * d];
        let mut da = vec![0.0; t];
        for head in 0..h {
            let off = head * dh;
            for i in 0..t {
                let a = &lc.attn[(head * t + i) * t..][..t];
                let dci = &dctx[i * d + off..][..dh];
                for j in 0..t {
                    let vj = &lc.v[j * d + off..][..dh];
                    da[j] = dci.iter().zip(vj).map(|(x, y)| x * y).sum();
                    let dvj = &mut dv[j * d + off..][..dh];
                    for (g, c) in dvj.iter_mut().zip(dci) {
                        *g += a[j] * c;
                    }
                }
                let dot: f64 = a.iter().zip(&da).map(|(x, y)| x * y).sum();
                for j in 0..t {
                    let ds = a[j] * (da[j] - dot) * scale;
                    let kj = &lc.k[j * d + off..][..dh];
                    let qi = &lc.q[i * d + off..][..dh];
                    let dqi = &mut dq[i * d + off..][..dh];
                    for (g, kk) in dqi.iter_mut().zip(kj) {
                        *g += ds * kk;
                    }
                    let dkj = &mut dk[j * d + off..][..dh];
                    for (g, qq) in dkj.iter_mut().zip(qi) {
                        *g += ds * qq;
                    }
                }
            }
        }
        let mut dx = vec![0.0; t * d];
        for (w, b, dy) in [(&lp.wq, &lp.bq, &dq), (&lp.wk, &lp.bk, &dk), (&lp.wv, &lp.bv, &dv)] {
            let (gw, gb) = split_two(grads, w, b);
            let dxi = linear_backward(&lc.attn_in, t, d, &p[w.clone()], dy, d, gw, gb);
            for (a, b) in dx.iter_mut().zip(&dxi) {
                *a += b;
            }
        }
        dx
    }

    /// Gradient through `W2·gelu(W1·in + b1) + b2` back to its input.
    fn ffn_backward(&self, lp: &LayerParams, lc: &LayerCache, dout: &[f64], t: usize, grads: &mut [f64]) -> Vec<f64> {
        let d = self.config.embed_dim;
        let f = self.config.ffn_dim;
        let p = &self.params;
        let (gw2, gb2) = split_two(grads, &lp.w2, &lp.b2);
        let mut dgel = linear_backward(&lc.g, t, f, &p[lp.w2.clone()], dout, d, gw2, gb2);
        for (dg, &z) in dgel.iter_mut().zip(&lc.f1) {
            *dg *= gelu_grad(z);
        }
        let (gw1, gb1) = split_two(grads, &lp.w1, &lp.b1);
        linear_backward(&lc.ffn_in, t, d, &p[lp.w1.clone()], &dgel, f, gw1, gb1)
    }

    /// Accumulates into `grads` the gradient of a loss whose derivative with
    /// respect to the `[CLS]` output is `dcls`.
    pub fn backward(&self, cache: &ForwardCache, dcls: &[f64], grads: &mut [f64]) {
        let t = cache.ids.len();
        let d = self.config.embed_dim;
        let pre = self.config.pre_norm;
        let p = &self.params;
        let lay = &self.layout;

        let mut dx = vec![0.0; t * d];
        dx[..d].copy_from_slice(dcls);
        if pre {
            let (ge, be) = split_two(grads, &lay.emb_ln_g, &lay.emb_ln_b);
            dx = layer_norm_backward(&dx, t, d, &p[lay.emb_ln_g.clone()], &cache.emb_ln, ge, be);
        }

        let add = |a: &mut Vec<f64>, b: &[f64]| a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        for (lp, lc) in lay.layers.iter().zip(&cache.layers).rev() {
            // dx arrives as the gradient of the layer output.
            let dh1 = if pre {
                let mut dr = dx.clone();
                apply_mask(&mut dr, &lc.drop_ffn);
                let dffn_in = self.ffn_backward(lp, lc, &dr, t, grads);
                let (g2, b2) = split_two(grads, &lp.ln2_g, &lp.ln2_b);
                let mut dh1 = dx;
                add(&mut dh1, &layer_norm_backward(&dffn_in, t, d, &p[lp.ln2_g.clone()], &lc.ln2, g2, b2));
                dh1
            } else {
                let (g2, b2) = split_two(grads, &lp.ln2_g, &lp.ln2_b);
                let dr2 = layer_norm_backward(&dx, t, d, &p[lp.ln2_g.clone()], &lc.ln2, g2, b2);
                let mut masked = dr2.clone();
                apply_mask(&mut masked, &lc.drop_ffn);
                let mut dh1 = dr2;
                add(&mut dh1, &self.ffn_backward(lp, lc, &masked, t, grads));
                dh1
            };
            dx = if pre {
                let mut dr = dh1.clone();
                apply_mask(&mut dr, &lc.drop_attn);
                let dattn_in = self.attention_backward(lp, lc, &dr, t, grads);
                let (g1, b1) = split_two(grads, &lp.ln1_g, &lp.ln1_b);
                let mut dxin = dh1;
                add(&mut dxin, &layer_norm_backward(&dattn_in, t, d, &p[lp.ln1_g.clone()], &lc.ln1, g1, b1));
                dxin
            } else {
                let (g1, b1) = split_two(grads, &lp.ln1_g, &lp.ln1_b);
                let dr1 = layer_norm_backward(&dh1, t, d, &p[lp.ln1_g.clone()], &lc.ln1, g1, b1);
                let mut masked = dr1.clone();
                apply_mask(&mut masked, &lc.drop_attn);
                let mut dxin = dr1;
                add(&mut dxin, &self.attention_backward(lp, lc, &masked, t, grads));
                dxin
            };
        }

        apply_mask(&mut dx, &cache.drop_emb);
        let dx0 = if pre {
            dx
        } else {
            let (ge, be) = split_two(grads, &lay.emb_ln_g, &lay.emb_ln_b);
            layer_norm_backward(&dx, t, d, &p[lay.emb_ln_g.clone()], &cache.emb_ln, ge, be)
        };
        for (i, (&id, &s)) in cache.ids.iter().zip(&cache.segments).enumerate() {
            let row = &dx0[i * d..(i + 1) * d];
            for (base, idx) in [(lay.tok.start, id as usize), (lay.pos.start, i), (lay.seg.start, s)] {
                for (g, v) in grads[base + idx * d..][..d].iter_mut().zip(row) {
                    *g += v;
                }
            }
        }
    }

    pub fn logits(&self, cls: &[f64]) -> [f64; 2] {
        let d = self.config.embed_dim;
        let w = &self.params[self.layout.head_w.clone()];
        let b = &self.params[self.layout.head_b.clone()];
        let mut out = [b[0], b[1]];
        for c in 0..d {
            out[0] += cls[c] * w[c * 2];
            out[1] += cls[c] * w[c * 2 + 1];
        }
        out
    }

    /// `(p_nomatch, p_match)` for a `[CLS]` representation.
    pub fn classify(&self, cls: &[f64]) -> [f64; 2] {
        softmax2(self.logits(cls))
    }

    /// Cross-entropy of `label` given `cls`; accumulates head gradients and
    /// returns `(loss, dloss/dcls)`.
    pub fn head_backward(&self, cls: &[f64], label: usize, grads: &mut [f64]) -> (f64, Vec<f64>) {
        let d = self.config.embed_dim;
        let logits = self.logits(cls);
        let max = logits[0].max(logits[1]);
        let lse = max + ((logits[0] - max).exp() + (logits[1] - max).exp()).ln();
        let loss = lse - logits[label];
        let probs = softmax2(logits);
        let dlog = [probs[0] - (label == 0) as u8 as f64, probs[1] - (label == 1) as u8 as f64];
        let w = &self.params[self.layout.head_w.clone()];
        let mut dcls = vec![0.0; d];
        for c in 0..d {
            grads[self.layout.head_w.start + c * 2] += cls[c] * dlog[0];
            grads[self.layout.head_w.start + c * 2 + 1] += cls[c] * dlog[1];
            dcls[c] = w[c * 2] * dlog[0] + w[c * 2 + 1] * dlog[1];
        }
        grads[self.layout.head_b.start] += dlog[0];
        grads[self.layout.head_b.start + 1] += dlog[1];
        (loss, dcls)
    }

    /// Loss of one labeled sequence with dropout off.
    pub fn loss(&self, ids: &[u32], label: usize) -> Result<f64, EncoderError> {
        let fwd = self.forward(ids)?;
        let logits = self.logits(&fwd.cls);
        let max = logits[0].max(logits[1]);
        Ok(max + ((logits[0] - max).exp() + (logits[1] - max).exp()).ln() - logits[label])
    }

    /// Loss and full analytic gradient with dropout off.
    pub fn loss_and_grad(&self, ids: &[u32], label: usize) -> Result<(f64, Vec<f64>), EncoderError> {
        let cache = self.forward_cached::<rand_chacha::ChaCha8Rng>(ids, None)?;
        let mut grads = vec![0.0; self.params.len()];
        let (loss, dcls) = self.head_backward(cache.cls(self.config.embed_dim), label, &mut grads);
        self.backward(&cache, &dcls, &mut grads);
        Ok((loss, grads))
    }

    pub fn predict_proba(&self, ids: &[u32]) -> Result<[f64; 2], EncoderError> {
        Ok(self.classify(&self.forward(ids)?.cls))
    }

    /// Class probabilities for many sequences, computed in parallel.
    pub fn predict_batch(&self, seqs: &[Vec<u32>]) -> Result<Vec<[f64; 2]>, EncoderError> {
        seqs.par_iter().map(|ids| self.predict_proba(ids)).collect()
    }

    /// `[CLS]` vector of a single record serialized as `[CLS] … [SEP]`.
    pub fn encode_record(&self, e: &DataEntry) -> Result<Vec<f64>, EncoderError> {
        let ids = self.encode_tokens(&tokenize(&serialize_single(e)));
        Ok(self.forward(&ids)?.cls)
    }

    /// Like [`Self::encode_record`] but cuts overlong records to fit, keeping the final `[SEP]`.
    pub fn encode_record_truncated(&self, e: &DataEntry) -> Result<Vec<f64>, EncoderError> {
        let mut ids = self.encode_tokens(&tokenize(&serialize_single(e)));
        let max = self.config.max_seq_len;
        if ids.len() > max {
            ids.truncate(max - 1);
            ids.push(self.vocab.id(SEP));
        }
        Ok(self.forward(&ids)?.cls)
    }
}

fn softmax2(l: [f64; 2]) -> [f64; 2] {
    let mut v = l;
    softmax_in_place(&mut v);
    v
}

/// Two disjoint mutable sub-slices of the gradient buffer.
fn split_two<'a>(g: &'a mut [f64], a: &Range<usize>, b: &Range<usize>) -> (&'a mut [f64], &'a mut [f64]) {
    debug_assert!(a.end <= b.start);
    let (lo, hi) = g.split_at_mut(b.start);
    (&mut lo[a.clone()], &mut hi[..b.len()])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::entry::tokenize;

    fn tiny(d: usize, layers: usize) -> EncoderModel {
        let seq = tokenize("[CLS] [COL] title [VAL] sharp calculator el1192bl [SEP] [COL] title [VAL] new sharp printing [SEP]");
        let vocab = Vocab::build([&seq]);
        let cfg = EncoderConfig {
            embed_dim: d,
            num_layers: layers,
            num_heads: 2,
            ffn_dim: 2 * d,
            max_seq_len: 32,
            dropout: 0.0,
            ..EncoderConfig::default()
        };
        EncoderModel::new(cfg, vocab, 17).unwrap()
    }

    fn ids(m: &EncoderModel, s: &str) -> Vec<u32> {
        m.encode_tokens(&tokenize(s))
    }

    #[test]
    fn attention_rows_sum_to_one() {
        let m = tiny(8, 2);
        let x = ids(&m, "[CLS] [COL] title [VAL] sharp [SEP] [COL] title [VAL] new sharp [SEP]");
        let cache = m.forward_cached::<rand_chacha::ChaCha8Rng>(&x, None).unwrap();
        for a in cache.attention() {
            for row in a.chunks(x.len()) {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_head_gives_even_odds() {
        let mut m = tiny(8, 1);
        let r = m.layout().head_w.start..m.layout().head_b.end;
        m.params_mut()[r].fill(0.0);
        let x = ids(&m, "[CLS] [COL] title [VAL] sharp [SEP] [SEP]");
        assert_eq!(m.predict_proba(&x).unwrap(), [0.5, 0.5]);
    }

    #[test]
    fn forward_is_deterministic_and_sized() {
        let m = tiny(8, 2);
        let x = ids(&m, "[CLS] [COL] title [VAL] sharp [SEP] [SEP]");
        let a = m.forward(&x).unwrap();
        let b = m.forward(&x).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.cls.len(), 8);
        assert_eq!(a.reps.len(), x.len() * 8);
        assert_eq!(&a.reps[..8], a.cls.as_slice());
    }

    #[test]
    fn forward_rejects_bad_input() {
        let m = tiny(8, 1);
        assert!(matches!(m.forward(&vec![1; 33]), Err(EncoderError::SequenceTooLong { len: 33, max: 32 })));
        assert!(matches!(m.forward(&[1, 999]), Err(EncoderError::TokenOutOfRange { id: 999, .. })));
        assert!(matches!(m.forward(&[]), Err(EncoderError::EmptySequence)));
    }

    #[test]
    fn tied_positions_make_cls_permutation_invariant() {
        let mut m = tiny(8, 1);
        let d = 8;
        let pos = m.layout().pos.clone();
        let first: Vec<f64> = m.params()[pos.start..pos.start + d].to_vec();
        for row in m.params_mut()[pos].chunks_mut(d) {
            row.copy_from_slice(&first);
        }
        let seg = m.layout().seg.clone();
        let s0: Vec<f64> = m.params()[seg.start..seg.start + d].to_vec();
        m.params_mut()[seg.start + d..seg.end].copy_from_slice(&s0);

        let a = ids(&m, "[CLS] [COL] title [VAL] sharp calculator [SEP] [SEP]");
        let b = ids(&m, "[CLS] [COL] title [VAL] calculator sharp [SEP] [SEP]");
        let ca = m.forward(&a).unwrap().cls;
        let cb = m.forward(&b).unwrap().cls;
        for (x, y) in ca.iter().zip(&cb) {
            assert!((x - y).abs() < 1e-12);
        }
        // changing content does change it
        let c = ids(&m, "[CLS] [COL] title [VAL] calculator printing [SEP] [SEP]");
        let cc = m.forward(&c).unwrap().cls;
        assert!(ca.iter().zip(&cc).any(|(x, y)| (x - y).abs() > 1e-6));
    }

    #[test]
    fn untied_positions_see_order() {
        let m = tiny(8, 1);
        let a = ids(&m, "[CLS] [COL] title [VAL] sharp calculator [SEP] [SEP]");
        let b = ids(&m, "[CLS] [COL] title [VAL] calculator sharp [SEP] [SEP]");
        assert_ne!(m.forward(&a).unwrap().cls, m.forward(&b).unwrap().cls);
    }

    #[test]
    fn classify_softmax_values() {
        let mut m = tiny(8, 1);
        let r = m.layout().head_w.clone();
        m.params_mut()[r].fill(0.0);
        let b = m.layout().head_b.start;
        m.params_mut()[b] = 0.0;
        m.params_mut()[b + 1] = 3f64.ln();
        let p = m.classify(&[0.3; 8]);
        assert!((p[0] - 0.25).abs() < 1e-15 && (p[1] - 0.75).abs() < 1e-15);
        m.params_mut()[b] += 100.0;
        m.params_mut()[b + 1] += 100.0;
        let q = m.classify(&[0.3; 8]);
        assert!((q[0] - 0.25).abs() < 1e-12 && (q[1] - 0.75).abs() < 1e-12);
        assert!((q[0] + q[1] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn segments_split_at_first_sep() {
        assert_eq!(segments(&[1, 5, 2, 6, 2]), [0, 0, 0, 1, 1]);
        assert_eq!(segments(&[1, 5, 2]), [0, 0, 0]);
    }

    #[test]
    fn dropout_changes_training_forward_only() {
        let mut m = tiny(8, 1);
        m.config.dropout = 0.5;
        let x = ids(&m, "[CLS] [COL] title [VAL] sharp calculator [SEP] [SEP]");
        let eval = m.forward(&x).unwrap().cls;
        let mut rng = seeded_rng(1);
        let train = m.forward_cached(&x, Some(&mut rng)).unwrap();
        assert_ne!(train.cls(8), eval.as_slice());
        assert_eq!(m.forward(&x).unwrap().cls, eval);
    }
}
