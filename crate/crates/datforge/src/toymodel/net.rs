//! Forward, loss, backward, and greedy decoding for the toy transformer.
//!
//! Everything is generic over the working scalar: `f32` stores activations
//! and effective weights in single precision (with f64 accumulation inside
//! every reduction), `f64` runs the whole network in double precision for
//! gradient testing. Arithmetic is always carried out in f64 and rounded to
//! the working scalar at each store, which for f32 coincides with ordinary
//! single-precision add/mul.

use std::collections::BTreeMap;

use rayon::prelude::*;

use crate::adapters::{AdapterBundle, LoraPair};
use crate::error::{Error, Result};
use crate::tensor::Tensor2;
use crate::toymodel::{
    target_name, BaseModel, ExactSum, ModelConfig, Precision, TargetKind, TokenSequence,
};

const LN_EPS: f64 = 1e-5;
/// Sequences per gradient-accumulation chunk. Chunks are reduced in order,
/// so results do not depend on thread count.
const GRAD_CHUNK: usize = 8;

pub trait Scalar: Copy + Send + Sync + std::fmt::Debug + 'static {
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
}

impl Scalar for f32 {
    #[inline(always)]
    fn from_f64(v: f64) -> f32 {
        v as f32
    }
    #[inline(always)]
    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    #[inline(always)]
    fn from_f64(v: f64) -> f64 {
        v
    }
    #[inline(always)]
    fn to_f64(self) -> f64 {
        self
    }
}

/// Effective weight storage: borrowed base slices (f32 mode only) or owned,
/// possibly adapter-shifted, matrices.
enum MS<'a, S: Scalar> {
    Borrowed(&'a [S]),
    Owned(Vec<S>),
}

impl<'a, S: Scalar> MS<'a, S> {
    #[inline(always)]
    fn as_slice(&self) -> &[S] {
        match self {
            MS::Borrowed(s) => s,
            MS::Owned(v) => v,
        }
    }
}

struct EffMat<'a, S: Scalar> {
    ms: MS<'a, S>,
    rows: usize,
    cols: usize,
}

impl<'a, S: Scalar> EffMat<'a, S> {
    #[inline(always)]
    fn row(&self, i: usize) -> &[S] {
        &self.ms.as_slice()[i * self.cols..(i + 1) * self.cols]
    }
}

struct EffLayer<'a, S: Scalar> {
    ln1_g: MS<'a, S>,
    ln1_b: MS<'a, S>,
    wq: EffMat<'a, S>,
    wk: EffMat<'a, S>,
    wv: EffMat<'a, S>,
    wo: EffMat<'a, S>,
    ln2_g: MS<'a, S>,
    ln2_b: MS<'a, S>,
    w1: EffMat<'a, S>,
    w2: EffMat<'a, S>,
}

struct Eff<'a, S: Scalar> {
    cfg: &'a ModelConfig,
    tok: EffMat<'a, S>,
    pos: EffMat<'a, S>,
    layers: Vec<EffLayer<'a, S>>,
    lnf_g: MS<'a, S>,
    lnf_b: MS<'a, S>,
    wout: EffMat<'a, S>,
}

/// `W + (alpha/r) * B * A` with the product accumulated in f64 and the sum
/// rounded once to the working scalar.
fn adapted_mat<S: Scalar>(w: &Tensor2, pair: &LoraPair, alpha: f32) -> Vec<S> {
    let r = pair.rank();
    let scale = alpha as f64 / r as f64;
    let mut out = Vec::with_capacity(w.data.len());
    for i in 0..w.rows {
        let brow = pair.b.row(i);
        for j in 0..w.cols {
            let mut acc = 0.0f64;
            for t in 0..r {
                acc += brow[t] as f64 * pair.a.get(t, j) as f64;
            }
            out.push(S::from_f64(w.get(i, j) as f64 + scale * acc));
        }
    }
    out
}

fn owned_mat<S: Scalar>(w: &Tensor2) -> Vec<S> {
    w.data.iter().map(|&v| S::from_f64(v as f64)).collect()
}

fn owned_vec<S: Scalar>(v: &[f32]) -> Vec<S> {
    v.iter().map(|&x| S::from_f64(x as f64)).collect()
}

fn build_f32<'a>(base: &'a BaseModel, bundle: Option<&AdapterBundle>) -> Result<Eff<'a, f32>> {
    if let Some(b) = bundle {
        base.check_bundle(b)?;
    }
    let mat = |layer: usize, kind: TargetKind| -> EffMat<'a, f32> {
        let w = base.target_matrix(layer, kind);
        let ms = match bundle.and_then(|b| b.pairs.get(&target_name(layer, kind))) {
            Some(pair) => MS::Owned(adapted_mat::<f32>(w, pair, bundle.unwrap().meta.alpha)),
            None => MS::Borrowed(w.data.as_slice()),
        };
        EffMat {
            ms,
            rows: w.rows,
            cols: w.cols,
        }
    };
    let plain = |w: &'a Tensor2| EffMat {
        ms: MS::Borrowed(w.data.as_slice()),
        rows: w.rows,
        cols: w.cols,
    };
    let layers = (0..base.cfg.n_layers)
        .map(|l| EffLayer {
            ln1_g: MS::Borrowed(&base.layers[l].ln1.gain),
            ln1_b: MS::Borrowed(&base.layers[l].ln1.bias),
            wq: mat(l, TargetKind::Wq),
            wk: mat(l, TargetKind::Wk),
            wv: mat(l, TargetKind::Wv),
            wo: mat(l, TargetKind::Wo),
            ln2_g: MS::Borrowed(&base.layers[l].ln2.gain),
            ln2_b: MS::Borrowed(&base.layers[l].ln2.bias),
            w1: mat(l, TargetKind::W1),
            w2: mat(l, TargetKind::W2),
        })
        .collect();
    Ok(Eff {
        cfg: &base.cfg,
        tok: plain(&base.tok_emb),
        pos: plain(&base.pos_emb),
        layers,
        lnf_g: MS::Borrowed(&base.ln_f.gain),
        lnf_b: MS::Borrowed(&base.ln_f.bias),
        wout: plain(&base.w_out),
    })
}

fn build_f64<'a>(base: &'a BaseModel, bundle: Option<&AdapterBundle>) -> Result<Eff<'a, f64>> {
    if let Some(b) = bundle {
        base.check_bundle(b)?;
    }
    let mat = |layer: usize, kind: TargetKind| -> EffMat<'a, f64> {
        let w = base.target_matrix(layer, kind);
        let ms = match bundle.and_then(|b| b.pairs.get(&target_name(layer, kind))) {
            Some(pair) => MS::Owned(adapted_mat::<f64>(w, pair, bundle.unwrap().meta.alpha)),
            None => MS::Owned(owned_mat::<f64>(w)),
        };
        EffMat {
            ms,
            rows: w.rows,
            cols: w.cols,
        }
    };
    let plain = |w: &Tensor2| EffMat {
        ms: MS::Owned(owned_mat::<f64>(w)),
        rows: w.rows,
        cols: w.cols,
    };
    let layers = (0..base.cfg.n_layers)
        .map(|l| EffLayer {
            ln1_g: MS::Owned(owned_vec(&base.layers[l].ln1.gain)),
            ln1_b: MS::Owned(owned_vec(&base.layers[l].ln1.bias)),
            wq: mat(l, TargetKind::Wq),
            wk: mat(l, TargetKind::Wk),
            wv: mat(l, TargetKind::Wv),
            wo: mat(l, TargetKind::Wo),
            ln2_g: MS::Owned(owned_vec(&base.layers[l].ln2.gain)),
            ln2_b: MS::Owned(owned_vec(&base.layers[l].ln2.bias)),
            w1: mat(l, TargetKind::W1),
            w2: mat(l, TargetKind::W2),
        })
        .collect();
    Ok(Eff {
        cfg: &base.cfg,
        tok: plain(&base.tok_emb),
        pos: plain(&base.pos_emb),
        layers,
        lnf_g: MS::Owned(owned_vec(&base.ln_f.gain)),
        lnf_b: MS::Owned(owned_vec(&base.ln_f.bias)),
        wout: plain(&base.w_out),
    })
}

#[inline]
fn dot_s<S: Scalar>(a: &[S], b: &[S]) -> f64 {
    let mut acc = 0.0f64;
    for (x, y) in a.iter().zip(b.iter()) {
        acc += x.to_f64() * y.to_f64();
    }
    acc
}

/// `out[i] = W.row(i) . x`, rounded to the working scalar.
fn matvec<S: Scalar>(w: &EffMat<S>, x: &[S], out: &mut [S]) {
    for i in 0..w.rows {
        out[i] = S::from_f64(dot_s(w.row(i), x));
    }
}

/// `out[j] += sum_i W[i][j] * dy[i]` (transposed matvec, f64 accumulation).
fn matvec_t_acc<S: Scalar>(w: &EffMat<S>, dy: &[f64], out: &mut [f64]) {
    for i in 0..w.rows {
        let c = dy[i];
        if c == 0.0 {
            continue;
        }
        let row = w.row(i);
        for j in 0..w.cols {
            out[j] += row[j].to_f64() * c;
        }
    }
}

/// `g[i][j] += dy[i] * x[j]` into a flat f64 gradient matrix.
fn outer_acc<S: Scalar>(g: &mut [f64], dy: &[f64], x: &[S], cols: usize) {
    for (i, &c) in dy.iter().enumerate() {
        if c == 0.0 {
            continue;
        }
        let grow = &mut g[i * cols..(i + 1) * cols];
        for (gj, xj) in grow.iter_mut().zip(x.iter()) {
            *gj += c * xj.to_f64();
        }
    }
}

struct LnTrace<S> {
    xhat: Vec<S>,
    inv_std: Vec<f64>,
}

fn layer_norm_fwd<S: Scalar>(x: &[S], g: &[S], b: &[S], d: usize) -> (Vec<S>, LnTrace<S>) {
    let t_len = x.len() / d;
    let mut y = Vec::with_capacity(x.len());
    let mut xhat = Vec::with_capacity(x.len());
    let mut inv_std = Vec::with_capacity(t_len);
    for t in 0..t_len {
        let xt = &x[t * d..(t + 1) * d];
        let mut mean = 0.0f64;
        for v in xt {
            mean += v.to_f64();
        }
        mean /= d as f64;
        let mut var = 0.0f64;
        for v in xt {
            let c = v.to_f64() - mean;
            var += c * c;
        }
        var /= d as f64;
        let inv = 1.0 / (var + LN_EPS).sqrt();
        inv_std.push(inv);
        for j in 0..d {
            let xh = S::from_f64((xt[j].to_f64() - mean) * inv);
            xhat.push(xh);
            y.push(S::from_f64(g[j].to_f64() * xh.to_f64() + b[j].to_f64()));
        }
    }
    (y, LnTrace { xhat, inv_std })
}

/// Backward of layernorm for one position. Writes `dx` (assign), optionally
/// accumulates parameter gradients.
#[allow(clippy::too_many_arguments)]
fn ln_backward_pos<S: Scalar>(
    dy: &[f64],
    xhat: &[S],
    inv_std: f64,
    g: &[S],
    dx: &mut [f64],
    mut dg: Option<&mut [f64]>,
    mut db: Option<&mut [f64]>,
) {
    let d = dy.len();
    let mut mean_t = 0.0f64;
    let mut mean_tx = 0.0f64;
    for j in 0..d {
        let t = dy[j] * g[j].to_f64();
        mean_t += t;
        mean_tx += t * xhat[j].to_f64();
    }
    mean_t /= d as f64;
    mean_tx /= d as f64;
    for j in 0..d {
        let t = dy[j] * g[j].to_f64();
        dx[j] = inv_std * (t - mean_t - xhat[j].to_f64() * mean_tx);
        if let Some(dg) = dg.as_deref_mut() {
            dg[j] += dy[j] * xhat[j].to_f64();
        }
        if let Some(db) = db.as_deref_mut() {
            db[j] += dy[j];
        }
    }
}

struct LayerTrace<S> {
    h1: Vec<S>,
    ln1: LnTrace<S>,
    q: Vec<S>,
    k: Vec<S>,
    v: Vec<S>,
    attn: Vec<S>,
    ctx: Vec<S>,
    h2: Vec<S>,
    ln2: LnTrace<S>,
    u: Vec<S>,
}

struct Trace<S> {
    layers: Vec<LayerTrace<S>>,
    lnf: LnTrace<S>,
    hf: Vec<S>,
}

fn check_ids(cfg: &ModelConfig, ids: &[u32]) -> Result<()> {
    if ids.is_empty() {
        return Err(Error::EmptyInput("empty token sequence".into()));
    }
    if ids.len() > cfg.max_seq {
        return Err(Error::SequenceTooLong {
            len: ids.len(),
            max_seq: cfg.max_seq,
        });
    }
    if let Some(&bad) = ids.iter().find(|&&t| t as usize >= cfg.vocab_size) {
        return Err(Error::Validation(format!(
            "token id {bad} out of range for vocab {}",
            cfg.vocab_size
        )));
    }
    Ok(())
}

/// Run the network. Returns flattened `T x V` logits and, when requested,
/// the activation trace needed for backward.
fn forward_seq<S: Scalar>(
    eff: &Eff<S>,
    ids: &[u32],
    want_trace: bool,
) -> Result<(Vec<S>, Option<Trace<S>>)> {
    check_ids(eff.cfg, ids)?;
    let t_len = ids.len();
    let d = eff.cfg.d_model;
    let scale = 1.0 / (d as f64).sqrt();

    let mut x: Vec<S> = Vec::with_capacity(t_len * d);
    for (t, &id) in ids.iter().enumerate() {
        let tok = eff.tok.row(id as usize);
        let pos = eff.pos.row(t);
        for j in 0..d {
            x.push(S::from_f64(tok[j].to_f64() + pos[j].to_f64()));
        }
    }

    let mut layer_traces = Vec::new();
    for layer in &eff.layers {
        // Attention block.
        let (h1, ln1) = layer_norm_fwd(&x, layer.ln1_g.as_slice(), layer.ln1_b.as_slice(), d);
        let mut q = vec![S::from_f64(0.0); t_len * d];
        let mut k = vec![S::from_f64(0.0); t_len * d];
        let mut v = vec![S::from_f64(0.0); t_len * d];
        for t in 0..t_len {
            let h = &h1[t * d..(t + 1) * d];
            matvec(&layer.wq, h, &mut q[t * d..(t + 1) * d]);
            matvec(&layer.wk, h, &mut k[t * d..(t + 1) * d]);
            matvec(&layer.wv, h, &mut v[t * d..(t + 1) * d]);
        }
        let mut attn = vec![S::from_f64(0.0); t_len * t_len];
        let mut ctx = vec![S::from_f64(0.0); t_len * d];
        let mut scores = vec![0.0f64; t_len];
        for t in 0..t_len {
            let qt = &q[t * d..(t + 1) * d];
            let mut m = f64::NEG_INFINITY;
            for (i, s) in scores.iter_mut().enumerate().take(t + 1) {
                *s = dot_s(qt, &k[i * d..(i + 1) * d]) * scale;
                if *s > m {
                    m = *s;
                }
            }
            let mut z = 0.0f64;
            for s in scores.iter().take(t + 1) {
                z += (s - m).exp();
            }
            for i in 0..=t {
                attn[t * t_len + i] = S::from_f64((scores[i] - m).exp() / z);
            }
            for j in 0..d {
                let mut acc = 0.0f64;
                for i in 0..=t {
                    acc += attn[t * t_len + i].to_f64() * v[i * d + j].to_f64();
                }
                ctx[t * d + j] = S::from_f64(acc);
            }
        }
        for t in 0..t_len {
            let ct = &ctx[t * d..(t + 1) * d];
            for i in 0..d {
                let o = dot_s(layer.wo.row(i), ct);
                let xi = &mut x[t * d + i];
                *xi = S::from_f64(xi.to_f64() + o);
            }
        }

        // MLP block.
        let (h2, ln2) = layer_norm_fwd(&x, layer.ln2_g.as_slice(), layer.ln2_b.as_slice(), d);
        let dh = 4 * d;
        let mut u = vec![S::from_f64(0.0); t_len * dh];
        for t in 0..t_len {
            matvec(
                &layer.w1,
                &h2[t * d..(t + 1) * d],
                &mut u[t * dh..(t + 1) * dh],
            );
        }
        let mut r = vec![S::from_f64(0.0); dh];
        for t in 0..t_len {
            for j in 0..dh {
                let uv = u[t * dh + j].to_f64();
                r[j] = S::from_f64(if uv > 0.0 { uv } else { 0.0 });
            }
            for i in 0..d {
                let o = dot_s(layer.w2.row(i), &r);
                let xi = &mut x[t * d + i];
                *xi = S::from_f64(xi.to_f64() + o);
            }
        }

        if want_trace {
            layer_traces.push(LayerTrace {
                h1,
                ln1,
                q,
                k,
                v,
                attn,
                ctx,
                h2,
                ln2,
                u,
            });
        }
    }

    let (hf, lnf) = layer_norm_fwd(&x, eff.lnf_g.as_slice(), eff.lnf_b.as_slice(), d);
    let vocab = eff.cfg.vocab_size;
    let mut logits = vec![S::from_f64(0.0); t_len * vocab];
    for t in 0..t_len {
        matvec(
            &eff.wout,
            &hf[t * d..(t + 1) * d],
            &mut logits[t * vocab..(t + 1) * vocab],
        );
    }
    let trace = want_trace.then_some(Trace {
        layers: layer_traces,
        lnf,
        hf,
    });
    Ok((logits, trace))
}

/// Cross-entropy over the predicted positions of one sequence: the summed
/// loss (not yet normalized) and the number of predicted tokens.
fn seq_loss<S: Scalar>(logits: &[S], seq: &TokenSequence, vocab: usize) -> (f64, usize) {
    let mut sum = 0.0f64;
    let mut count = 0usize;
    for qpos in seq.loss_start..seq.ids.len() {
        let row = &logits[(qpos - 1) * vocab..qpos * vocab];
        let mut m = f64::NEG_INFINITY;
        for v in row {
            let v = v.to_f64();
            if v > m {
                m = v;
            }
        }
        let mut z = 0.0f64;
        for v in row {
            z += (v.to_f64() - m).exp();
        }
        let lse = m + z.ln();
        sum += lse - row[seq.ids[qpos] as usize].to_f64();
        count += 1;
    }
    (sum, count)
}

/// f64 gradient accumulators in canonical parameter order.
struct LayerGrads {
    ln1_g: Vec<f64>,
    ln1_b: Vec<f64>,
    wq: Vec<f64>,
    wk: Vec<f64>,
    wv: Vec<f64>,
    wo: Vec<f64>,
    ln2_g: Vec<f64>,
    ln2_b: Vec<f64>,
    w1: Vec<f64>,
    w2: Vec<f64>,
}

struct FullGrads {
    tok: Vec<f64>,
    pos: Vec<f64>,
    layers: Vec<LayerGrads>,
    lnf_g: Vec<f64>,
    lnf_b: Vec<f64>,
    wout: Vec<f64>,
}

impl FullGrads {
    fn zeros(cfg: &ModelConfig) -> FullGrads {
        let d = cfg.d_model;
        FullGrads {
            tok: vec![0.0; cfg.vocab_size * d],
            pos: vec![0.0; cfg.max_seq * d],
            layers: (0..cfg.n_layers)
                .map(|_| LayerGrads {
                    ln1_g: vec![0.0; d],
                    ln1_b: vec![0.0; d],
                    wq: vec![0.0; d * d],
                    wk: vec![0.0; d * d],
                    wv: vec![0.0; d * d],
                    wo: vec![0.0; d * d],
                    ln2_g: vec![0.0; d],
                    ln2_b: vec![0.0; d],
                    w1: vec![0.0; 4 * d * d],
                    w2: vec![0.0; 4 * d * d],
                })
                .collect(),
            lnf_g: vec![0.0; d],
            lnf_b: vec![0.0; d],
            wout: vec![0.0; cfg.vocab_size * d],
        }
    }

    fn add(&mut self, other: &FullGrads) {
        fn addv(a: &mut [f64], b: &[f64]) {
            for (x, y) in a.iter_mut().zip(b.iter()) {
                *x += y;
            }
        }
        addv(&mut self.tok, &other.tok);
        addv(&mut self.pos, &other.pos);
        for (a, b) in self.layers.iter_mut().zip(other.layers.iter()) {
            addv(&mut a.ln1_g, &b.ln1_g);
            addv(&mut a.ln1_b, &b.ln1_b);
            addv(&mut a.wq, &b.wq);
            addv(&mut a.wk, &b.wk);
            addv(&mut a.wv, &b.wv);
            addv(&mut a.wo, &b.wo);
            addv(&mut a.ln2_g, &b.ln2_g);
            addv(&mut a.ln2_b, &b.ln2_b);
            addv(&mut a.w1, &b.w1);
            addv(&mut a.w2, &b.w2);
        }
        addv(&mut self.lnf_g, &other.lnf_g);
        addv(&mut self.lnf_b, &other.lnf_b);
        addv(&mut self.wout, &other.wout);
    }

    fn mat(&mut self, layer: usize, kind: TargetKind) -> &mut Vec<f64> {
        let l = &mut self.layers[layer];
        match kind {
            TargetKind::Wq => &mut l.wq,
            TargetKind::Wk => &mut l.wk,
            TargetKind::Wv => &mut l.wv,
            TargetKind::Wo => &mut l.wo,
            TargetKind::W1 => &mut l.w1,
            TargetKind::W2 => &mut l.w2,
        }
    }

    /// Flatten to f32 in canonical order, scaling by `1/n`.
    fn to_flat(&self, n: f64) -> Vec<f32> {
        let inv = 1.0 / n;
        let mut out = Vec::new();
        let mut push = |v: &[f64]| out.extend(v.iter().map(|&g| (g * inv) as f32));
        push(&self.tok);
        push(&self.pos);
        for l in &self.layers {
            push(&l.ln1_g);
            push(&l.ln1_b);
            push(&l.wq);
            push(&l.wk);
            push(&l.wv);
            push(&l.wo);
            push(&l.ln2_g);
            push(&l.ln2_b);
            push(&l.w1);
            push(&l.w2);
        }
        push(&self.lnf_g);
        push(&self.lnf_b);
        push(&self.wout);
        out
    }
}

#[derive(Clone)]
struct GradFlags {
    /// Accumulate embedding / layernorm / output-head gradients.
    full: bool,
    /// Per layer, which of the six weight slots need dW.
    targeted: Vec<[bool; 6]>,
}

impl GradFlags {
    fn full(cfg: &ModelConfig) -> GradFlags {
        GradFlags {
            full: true,
            targeted: vec![[true; 6]; cfg.n_layers],
        }
    }

    fn for_bundle(cfg: &ModelConfig, bundle: &AdapterBundle) -> GradFlags {
        let mut targeted = vec![[false; 6]; cfg.n_layers];
        for name in bundle.pairs.keys() {
            if let Some((layer, kind)) = super::parse_target(name) {
                targeted[layer][kind_index(kind)] = true;
            }
        }
        GradFlags {
            full: false,
            targeted,
        }
    }
}

fn kind_index(kind: TargetKind) -> usize {
    match kind {
        TargetKind::Wq => 0,
        TargetKind::Wk => 1,
        TargetKind::Wv => 2,
        TargetKind::Wo => 3,
        TargetKind::W1 => 4,
        TargetKind::W2 => 5,
    }
}

/// Backward pass for one sequence. Accumulates unscaled parameter gradients
/// into `grads` and returns the summed loss and predicted-token count.
fn backward_seq<S: Scalar>(
    eff: &Eff<S>,
    seq: &TokenSequence,
    logits: &[S],
    trace: &Trace<S>,
    grads: &mut FullGrads,
    flags: &GradFlags,
) -> (f64, usize) {
    let ids = &seq.ids;
    let t_len = ids.len();
    let d = eff.cfg.d_model;
    let vocab = eff.cfg.vocab_size;
    let scale = 1.0 / (d as f64).sqrt();

    // Loss + dlogits. Only rows loss_start-1 .. t_len-1 predict anything.
    let (loss, count) = seq_loss(logits, seq, vocab);
    let first_row = seq.loss_start - 1;
    let mut dlog = vec![0.0f64; t_len * vocab];
    for qpos in seq.loss_start..t_len {
        let row = &logits[(qpos - 1) * vocab..qpos * vocab];
        let mut m = f64::NEG_INFINITY;
        for v in row {
            let v = v.to_f64();
            if v > m {
                m = v;
            }
        }
        let mut z = 0.0f64;
        for v in row {
            z += (v.to_f64() - m).exp();
        }
        let drow = &mut dlog[(qpos - 1) * vocab..qpos * vocab];
        for j in 0..vocab {
            drow[j] += (row[j].to_f64() - m).exp() / z;
        }
        drow[seq.ids[qpos] as usize] -= 1.0;
    }

    // Output head and final layernorm. Predicted logits sit in rows
    // first_row ..= t_len-2; every other row carries zero gradient.
    let mut dx = vec![0.0f64; t_len * d];
    {
        let mut dhf = vec![0.0f64; d];
        let mut dxt = vec![0.0f64; d];
        for t in first_row..t_len - 1 {
            let drow = &dlog[t * vocab..(t + 1) * vocab];
            let hft = &trace.hf[t * d..(t + 1) * d];
            if flags.full {
                outer_acc(&mut grads.wout, drow, hft, d);
            }
            dhf.iter_mut().for_each(|v| *v = 0.0);
            matvec_t_acc(&eff.wout, drow, &mut dhf);
            let (dg, db) = if flags.full {
                (
                    Some(grads.lnf_g.as_mut_slice()),
                    Some(grads.lnf_b.as_mut_slice()),
                )
            } else {
                (None, None)
            };
            ln_backward_pos(
                &dhf,
                &trace.lnf.xhat[t * d..(t + 1) * d],
                trace.lnf.inv_std[t],
                eff.lnf_g.as_slice(),
                &mut dxt,
                dg,
                db,
            );
            dx[t * d..(t + 1) * d].copy_from_slice(&dxt);
        }
    }

    // Layers in reverse.
    let dh = 4 * d;
    let mut dr = vec![0.0f64; dh];
    let mut du = vec![0.0f64; dh];
    let mut dvec = vec![0.0f64; d];
    let mut dxt = vec![0.0f64; d];
    let mut dmt = vec![0.0f64; d];
    let mut qt = vec![0.0f64; d];
    let mut r = vec![S::from_f64(0.0); dh];
    for (li, layer) in eff.layers.iter().enumerate().rev() {
        let tr = &trace.layers[li];
        let want = &flags.targeted[li];

        // MLP backward: dOut = dx at x_out; residual passes dx through.
        for t in 0..t_len {
            dmt.copy_from_slice(&dx[t * d..(t + 1) * d]);
            let ut = &tr.u[t * dh..(t + 1) * dh];
            for j in 0..dh {
                let uv = ut[j].to_f64();
                r[j] = S::from_f64(if uv > 0.0 { uv } else { 0.0 });
            }
            if flags.full || want[kind_index(TargetKind::W2)] {
                outer_acc(grads.mat(li, TargetKind::W2), &dmt, &r, dh);
            }
            dr.iter_mut().for_each(|v| *v = 0.0);
            matvec_t_acc(&layer.w2, &dmt, &mut dr);
            for j in 0..dh {
                du[j] = if ut[j].to_f64() > 0.0 { dr[j] } else { 0.0 };
            }
            let h2t = &tr.h2[t * d..(t + 1) * d];
            if flags.full || want[kind_index(TargetKind::W1)] {
                outer_acc(grads.mat(li, TargetKind::W1), &du, h2t, d);
            }
            dvec.iter_mut().for_each(|v| *v = 0.0);
            matvec_t_acc(&layer.w1, &du, &mut dvec);
            let (dg, db) = if flags.full {
                let lg = &mut grads.layers[li];
                (Some(&mut lg.ln2_g[..]), Some(&mut lg.ln2_b[..]))
            } else {
                (None, None)
            };
            ln_backward_pos(
                &dvec,
                &tr.ln2.xhat[t * d..(t + 1) * d],
                tr.ln2.inv_std[t],
                layer.ln2_g.as_slice(),
                &mut dxt,
                dg,
                db,
            );
            for j in 0..d {
                dx[t * d + j] += dxt[j];
            }
        }

        // Attention backward.
        let mut dctx = vec![0.0f64; t_len * d];
        for t in 0..t_len {
            dmt.copy_from_slice(&dx[t * d..(t + 1) * d]);
            let ctxt = &tr.ctx[t * d..(t + 1) * d];
            if flags.full || want[kind_index(TargetKind::Wo)] {
                outer_acc(grads.mat(li, TargetKind::Wo), &dmt, ctxt, d);
            }
            matvec_t_acc(&layer.wo, &dmt, &mut dctx[t * d..(t + 1) * d]);
        }
        let mut dq = vec![0.0f64; t_len * d];
        let mut dk = vec![0.0f64; t_len * d];
        let mut dv = vec![0.0f64; t_len * d];
        let mut dalpha = vec![0.0f64; t_len];
        for t in 0..t_len {
            let dctxt = &dctx[t * d..(t + 1) * d];
            let arow = &tr.attn[t * t_len..(t + 1) * t_len];
            for i in 0..=t {
                let a = arow[i].to_f64();
                let vi = &tr.v[i * d..(i + 1) * d];
                let mut da = 0.0f64;
                for j in 0..d {
                    dv[i * d + j] += a * dctxt[j];
                    da += vi[j].to_f64() * dctxt[j];
                }
                dalpha[i] = da;
            }
            let mut sumad = 0.0f64;
            for i in 0..=t {
                sumad += arow[i].to_f64() * dalpha[i];
            }
            for (dst, src) in qt.iter_mut().zip(&tr.q[t * d..(t + 1) * d]) {
                *dst = src.to_f64();
            }
            for i in 0..=t {
                let ds = arow[i].to_f64() * (dalpha[i] - sumad) * scale;
                if ds == 0.0 {
                    continue;
                }
                let ki = &tr.k[i * d..(i + 1) * d];
                for j in 0..d {
                    dq[t * d + j] += ds * ki[j].to_f64();
                    dk[i * d + j] += ds * qt[j];
                }
            }
        }
        for t in 0..t_len {
            let h1t = &tr.h1[t * d..(t + 1) * d];
            let dqt = &dq[t * d..(t + 1) * d];
            let dkt = &dk[t * d..(t + 1) * d];
            let dvt = &dv[t * d..(t + 1) * d];
            if flags.full || want[kind_index(TargetKind::Wq)] {
                outer_acc(grads.mat(li, TargetKind::Wq), dqt, h1t, d);
            }
            if flags.full || want[kind_index(TargetKind::Wk)] {
                outer_acc(grads.mat(li, TargetKind::Wk), dkt, h1t, d);
            }
            if flags.full || want[kind_index(TargetKind::Wv)] {
                outer_acc(grads.mat(li, TargetKind::Wv), dvt, h1t, d);
            }
            dvec.iter_mut().for_each(|v| *v = 0.0);
            matvec_t_acc(&layer.wq, dqt, &mut dvec);
            matvec_t_acc(&layer.wk, dkt, &mut dvec);
            matvec_t_acc(&layer.wv, dvt, &mut dvec);
            let (dg, db) = if flags.full {
                let lg = &mut grads.layers[li];
                (Some(&mut lg.ln1_g[..]), Some(&mut lg.ln1_b[..]))
            } else {
                (None, None)
            };
            ln_backward_pos(
                &dvec,
                &tr.ln1.xhat[t * d..(t + 1) * d],
                tr.ln1.inv_std[t],
                layer.ln1_g.as_slice(),
                &mut dxt,
                dg,
                db,
            );
            for j in 0..d {
                dx[t * d + j] += dxt[j];
            }
        }
    }

    // Embeddings.
    if flags.full {
        for (t, &id) in ids.iter().enumerate() {
            let dxt = &dx[t * d..(t + 1) * d];
            let trow = &mut grads.tok[id as usize * d..(id as usize + 1) * d];
            for j in 0..d {
                trow[j] += dxt[j];
            }
            let prow = &mut grads.pos[t * d..(t + 1) * d];
            for j in 0..d {
                prow[j] += dxt[j];
            }
        }
    }

    (loss, count)
}

fn validate_batch(cfg: &ModelConfig, batch: &[TokenSequence]) -> Result<()> {
    if batch.is_empty() {
        return Err(Error::EmptyInput("empty batch".into()));
    }
    for seq in batch {
        check_ids(cfg, &seq.ids)?;
        if seq.loss_start == 0 {
            return Err(Error::Validation(
                "loss_start must be at least 1 (position 0 has no predictor)".into(),
            ));
        }
        if seq.target_count() == 0 {
            return Err(Error::NoTargetTokens);
        }
    }
    Ok(())
}

/// Forward+backward over a batch. Per-sequence losses are reduced with exact
/// summation in batch order; gradients accumulate per chunk in f64 and chunks
/// fold in order, so the result is independent of thread count.
fn batch_grads<S: Scalar>(
    eff: &Eff<S>,
    batch: &[TokenSequence],
    flags: &GradFlags,
    parallel: bool,
) -> Result<(f64, usize, FullGrads)> {
    validate_batch(eff.cfg, batch)?;
    let run_chunk = |chunk: &[TokenSequence]| -> Result<(Vec<(f64, usize)>, FullGrads)> {
        let mut grads = FullGrads::zeros(eff.cfg);
        let mut losses = Vec::with_capacity(chunk.len());
        for seq in chunk {
            let (logits, trace) = forward_seq(eff, &seq.ids, true)?;
            let trace = trace.expect("trace requested");
            losses.push(backward_seq(eff, seq, &logits, &trace, &mut grads, flags));
        }
        Ok((losses, grads))
    };
    let chunks: Vec<(Vec<(f64, usize)>, FullGrads)> = if parallel {
        batch
            .par_chunks(GRAD_CHUNK)
            .map(run_chunk)
            .collect::<Result<_>>()?
    } else {
        batch
            .chunks(GRAD_CHUNK)
            .map(run_chunk)
            .collect::<Result<_>>()?
    };
    let mut total = FullGrads::zeros(eff.cfg);
    let mut sum = ExactSum::new();
    let mut n_targets = 0usize;
    for (losses, grads) in &chunks {
        total.add(grads);
        for (loss, count) in losses {
            sum.add(*loss);
            n_targets += count;
        }
    }
    Ok((sum.value() / n_targets as f64, n_targets, total))
}

/// Per-target low-rank factor gradients, keyed like the bundle's pairs.
#[derive(Debug, Clone)]
pub struct AdapterGradients {
    pub pairs: BTreeMap<String, (Vec<f32>, Vec<f32>)>,
}

impl AdapterGradients {
    /// Flatten in sorted-target order, A entries then B entries per target —
    /// the same layout as a flattened bundle.
    pub fn flatten(&self) -> Vec<f32> {
        let mut out = Vec::new();
        for (da, db) in self.pairs.values() {
            out.extend_from_slice(da);
            out.extend_from_slice(db);
        }
        out
    }
}

/// Mean loss and gradients of the low-rank factors for a frozen base.
/// `dA = (alpha/r) * B^T dW`, `dB = (alpha/r) * dW A^T`.
pub fn adapter_grads(
    base: &BaseModel,
    bundle: &AdapterBundle,
    batch: &[TokenSequence],
) -> Result<(f64, AdapterGradients)> {
    match base.cfg.precision {
        Precision::F32 => {
            let eff = build_f32(base, Some(bundle))?;
            adapter_grads_impl(&eff, bundle, batch)
        }
        Precision::F64 => {
            let eff = build_f64(base, Some(bundle))?;
            adapter_grads_impl(&eff, bundle, batch)
        }
    }
}

fn adapter_grads_impl<S: Scalar>(
    eff: &Eff<S>,
    bundle: &AdapterBundle,
    batch: &[TokenSequence],
) -> Result<(f64, AdapterGradients)> {
    let flags = GradFlags::for_bundle(eff.cfg, bundle);
    let (mean_loss, n_targets, mut grads) = batch_grads(eff, batch, &flags, false)?;
    let inv_n = 1.0 / n_targets as f64;
    let lora_scale = bundle.meta.alpha as f64 / bundle.meta.rank as f64;
    let mut pairs = BTreeMap::new();
    for (name, pair) in &bundle.pairs {
        let (layer, kind) = super::parse_target(name).expect("validated target");
        let dw = grads.mat(layer, kind);
        let (d_out, d_in, r) = (pair.d_out(), pair.d_in(), pair.rank());
        // dA[t][j] = scale * sum_i B[i][t] * dW[i][j]
        let mut da = vec![0.0f64; r * d_in];
        for i in 0..d_out {
            let brow = pair.b.row(i);
            let dwrow = &dw[i * d_in..(i + 1) * d_in];
            for t in 0..r {
                let bt = brow[t] as f64;
                if bt == 0.0 {
                    continue;
                }
                let darow = &mut da[t * d_in..(t + 1) * d_in];
                for j in 0..d_in {
                    darow[j] += bt * dwrow[j];
                }
            }
        }
        // dB[i][t] = scale * sum_j dW[i][j] * A[t][j]
        let mut db = vec![0.0f64; d_out * r];
        for i in 0..d_out {
            let dwrow = &dw[i * d_in..(i + 1) * d_in];
            for t in 0..r {
                let arow = pair.a.row(t);
                let mut acc = 0.0f64;
                for j in 0..d_in {
                    acc += dwrow[j] * arow[j] as f64;
                }
                db[i * r + t] = acc;
            }
        }
        let sc = lora_scale * inv_n;
        pairs.insert(
            name.clone(),
            (
                da.iter().map(|&g| (g * sc) as f32).collect(),
                db.iter().map(|&g| (g * sc) as f32).collect(),
            ),
        );
    }
    Ok((mean_loss, AdapterGradients { pairs }))
}

/// Mean loss and full-parameter gradients, flattened in canonical order.
/// With `parallel`, sequences are processed in fixed-size chunks on the
/// rayon pool; reduction order is fixed, so the output stays deterministic.
pub fn base_grads(
    base: &BaseModel,
    batch: &[TokenSequence],
    parallel: bool,
) -> Result<(f64, Vec<f32>)> {
    match base.cfg.precision {
        Precision::F32 => {
            let eff = build_f32(base, None)?;
            let flags = GradFlags::full(eff.cfg);
            let (loss, n, grads) = batch_grads(&eff, batch, &flags, parallel)?;
            Ok((loss, grads.to_flat(n as f64)))
        }
        Precision::F64 => {
            let eff = build_f64(base, None)?;
            let flags = GradFlags::full(eff.cfg);
            let (loss, n, grads) = batch_grads(&eff, batch, &flags, parallel)?;
            Ok((loss, grads.to_flat(n as f64)))
        }
    }
}

/// FNV-1a hash of the ReLU activation pattern (one bit per hidden unit per
/// position per sequence). Gradient checks evaluate this at both perturbed
/// points and reject finite-difference probes whose pattern changes: the
/// difference quotient across a ReLU kink does not estimate either one-sided
/// derivative, so such probes measure nothing about backward correctness.
pub fn relu_signature(
    base: &BaseModel,
    adapter: Option<&AdapterBundle>,
    batch: &[TokenSequence],
) -> Result<u64> {
    fn sig<S: Scalar>(eff: &Eff<S>, batch: &[TokenSequence]) -> Result<u64> {
        let mut h: u64 = 0xcbf29ce484222325;
        for seq in batch {
            let (_, trace) = forward_seq(eff, &seq.ids, true)?;
            let trace = trace.expect("trace requested");
            for layer in &trace.layers {
                for u in &layer.u {
                    h ^= (u.to_f64() > 0.0) as u64;
                    h = h.wrapping_mul(0x100000001b3);
                }
            }
        }
        Ok(h)
    }
    match base.cfg.precision {
        Precision::F32 => sig(&build_f32(base, adapter)?, batch),
        Precision::F64 => sig(&build_f64(base, adapter)?, batch),
    }
}

fn argmax_lowest<S: Scalar>(row: &[S]) -> usize {
    let mut best = f64::NEG_INFINITY;
    let mut arg = 0usize;
    for (j, v) in row.iter().enumerate() {
        let v = v.to_f64();
        if v > best {
            best = v;
            arg = j;
        }
    }
    arg
}

enum Inner<'a> {
    F32(Eff<'a, f32>),
    F64(Eff<'a, f64>),
}

/// A base model with an optional adapter folded in, ready for repeated
/// forward passes. Building it validates the bundle against the base
/// (fingerprint, target names, shapes) and materialises the shifted weights
/// once, so decoding does not pay the adapter cost per call.
pub struct Prepared<'a> {
    inner: Inner<'a>,
}

impl<'a> Prepared<'a> {
    pub fn new(base: &'a BaseModel, adapter: Option<&AdapterBundle>) -> Result<Prepared<'a>> {
        base.cfg.validate()?;
        let inner = match base.cfg.precision {
            Precision::F32 => Inner::F32(build_f32(base, adapter)?),
            Precision::F64 => Inner::F64(build_f64(base, adapter)?),
        };
        Ok(Prepared { inner })
    }

    pub fn config(&self) -> &ModelConfig {
        match &self.inner {
            Inner::F32(e) => e.cfg,
            Inner::F64(e) => e.cfg,
        }
    }

    /// Logits for every position, `T x V`, in f32.
    pub fn forward(&self, ids: &[u32]) -> Result<Tensor2> {
        let vocab = self.config().vocab_size;
        let data: Vec<f32> = match &self.inner {
            Inner::F32(eff) => forward_seq(eff, ids, false)?.0,
            Inner::F64(eff) => forward_seq(eff, ids, false)?
                .0
                .into_iter()
                .map(|v| v as f32)
                .collect(),
        };
        Tensor2::from_vec(ids.len(), vocab, data)
    }

    /// Mean cross-entropy over the predicted tokens of the batch. The total
    /// is divided by the number of predicted tokens across all sequences,
    /// using exact summation, so duplicating the batch reproduces the value
    /// bit for bit.
    pub fn loss(&self, batch: &[TokenSequence]) -> Result<f64> {
        validate_batch(self.config(), batch)?;
        let vocab = self.config().vocab_size;
        let mut sum = ExactSum::new();
        let mut n = 0usize;
        for seq in batch {
            let (loss, count) = match &self.inner {
                Inner::F32(eff) => {
                    let (logits, _) = forward_seq(eff, &seq.ids, false)?;
                    seq_loss(&logits, seq, vocab)
                }
                Inner::F64(eff) => {
                    let (logits, _) = forward_seq(eff, &seq.ids, false)?;
                    seq_loss(&logits, seq, vocab)
                }
            };
            sum.add(loss);
            n += count;
        }
        Ok(sum.value() / n as f64)
    }

    /// Greedy decoding: starting from the prefix, repeatedly append the
    /// argmax token (ties take the lowest id) until EOS, `max_new` appended
    /// tokens, or the context limit. Returns the full sequence — prefix plus
    /// generated tokens, including EOS when it was decoded. `max_new = 0`
    /// returns the prefix unchanged.
    pub fn greedy_decode(&self, prefix: &[u32], max_new: usize, eos: u32) -> Result<Vec<u32>> {
        let cfg = self.config();
        if prefix.is_empty() {
            return Err(Error::EmptyInput("empty decode prefix".into()));
        }
        if prefix.len() > cfg.max_seq {
            return Err(Error::SequenceTooLong {
                len: prefix.len(),
                max_seq: cfg.max_seq,
            });
        }
        let mut seq = prefix.to_vec();
        let mut emitted = 0usize;
        while emitted < max_new && seq.len() <= cfg.max_seq {
            let next = match &self.inner {
                Inner::F32(eff) => {
                    let (logits, _) = forward_seq(eff, &seq, false)?;
                    argmax_lowest(&logits[(seq.len() - 1) * cfg.vocab_size..])
                }
                Inner::F64(eff) => {
                    let (logits, _) = forward_seq(eff, &seq, false)?;
                    argmax_lowest(&logits[(seq.len() - 1) * cfg.vocab_size..])
                }
            } as u32;
            seq.push(next);
            emitted += 1;
            if next == eos {
                break;
            }
        }
        Ok(seq)
    }
}
