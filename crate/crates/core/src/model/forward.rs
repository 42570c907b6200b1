use ndarray::{s, Array1, Array2, ArrayView2, Axis};

use super::mask::{build_lookahead_mask, AttentionMask};
use super::{LayerNorm, Linear, ModelParams};
use crate::error::{Error, Result};

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput {
    pub boundary_logits: Vec<f64>,
    pub boundary_probs: Vec<f64>,
    /// `len x aux_vocab`.
    pub aux_logits: Array2<f64>,
}

/// One training sequence: token ids, a 0/1 boundary label per token and
/// `(position, class)` auxiliary targets.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainExample {
    pub ids: Vec<u32>,
    pub boundary_labels: Vec<f64>,
    pub aux_targets: Vec<(usize, usize)>,
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn gelu(u: f64) -> f64 {
    0.5 * u * (1.0 + (GELU_C * (u + 0.044715 * u * u * u)).tanh())
}

fn gelu_grad(u: f64) -> f64 {
    let t = (GELU_C * (u + 0.044715 * u * u * u)).tanh();
    0.5 * (1.0 + t) + 0.5 * u * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * u * u)
}

impl Linear {
    pub(crate) fn apply(&self, x: &Array2<f64>) -> Array2<f64> {
        let mut y = x.dot(&self.weight.t()) + &self.bias;
        if let Some(l) = &self.lora {
            y.scaled_add(l.scale(), &x.dot(&l.a.t()).dot(&l.b.t()));
        }
        y
    }

    /// Accumulates parameter gradients into `g` and returns the input gradient.
    fn backward(&self, x: &Array2<f64>, dy: &Array2<f64>, g: &mut Linear) -> Array2<f64> {
        g.weight += &dy.t().dot(x);
        g.bias += &dy.sum_axis(Axis(0)).insert_axis(Axis(0));
        let mut dx = dy.dot(&self.weight);
        if let (Some(l), Some(gl)) = (&self.lora, g.lora.as_mut()) {
            let s = l.scale();
            let u = x.dot(&l.a.t());
            gl.b.scaled_add(s, &dy.t().dot(&u));
            let du = dy.dot(&l.b) * s;
            gl.a += &du.t().dot(x);
            dx += &du.dot(&l.a);
        }
        dx
    }
}

struct NormCache {
    xhat: Array2<f64>,
    inv_std: Array1<f64>,
}

impl LayerNorm {
    fn apply(&self, x: &Array2<f64>) -> (Array2<f64>, NormCache) {
        let n = x.ncols() as f64;
        let mean = x.sum_axis(Axis(1)) / n;
        let centered = x - &mean.view().insert_axis(Axis(1));
        let var = centered.mapv(|v| v * v).sum_axis(Axis(1)) / n;
        let inv_std = var.mapv(|v| 1.0 / (v + LN_EPS).sqrt());
        let xhat = centered * inv_std.view().insert_axis(Axis(1));
        let y = &xhat * &self.gain + &self.bias;
        (y, NormCache { xhat, inv_std })
    }

    fn backward(&self, cache: &NormCache, dy: &Array2<f64>, g: &mut LayerNorm) -> Array2<f64> {
        g.gain += &(dy * &cache.xhat).sum_axis(Axis(0)).insert_axis(Axis(0));
        g.bias += &dy.sum_axis(Axis(0)).insert_axis(Axis(0));
        let dxhat = dy * &self.gain;
        let n = dy.ncols() as f64;
        let mean_d = dxhat.sum_axis(Axis(1)) / n;
        let mean_dx = (&dxhat * &cache.xhat).sum_axis(Axis(1)) / n;
        let mut dx = dxhat
            - mean_d.view().insert_axis(Axis(1))
            - &(&cache.xhat * &mean_dx.view().insert_axis(Axis(1)));
        dx *= &cache.inv_std.view().insert_axis(Axis(1));
        dx
    }
}

struct LayerCache {
    ln1: NormCache,
    h1: Array2<f64>,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    /// Attention probabilities per head, `len x len`.
    probs: Vec<Array2<f64>>,
    ctx: Array2<f64>,
    ln2: NormCache,
    h2: Array2<f64>,
    pre_act: Array2<f64>,
    act: Array2<f64>,
}

pub(crate) struct Cache {
    layers: Vec<LayerCache>,
    ln_f: NormCache,
    hf: Array2<f64>,
}

impl Cache {
    #[cfg(test)]
    pub(crate) fn attention(&self, layer: usize, head: usize) -> &Array2<f64> {
        &self.layers[layer].probs[head]
    }
}

/// Masked softmax attention for one head.
fn attend(
    q: ArrayView2<f64>,
    k: ArrayView2<f64>,
    v: ArrayView2<f64>,
    mask: &AttentionMask,
) -> (Array2<f64>, Array2<f64>) {
    let scale = 1.0 / (q.ncols() as f64).sqrt();
    let mut p = q.dot(&k.t()) * scale;
    for (i, mut row) in p.axis_iter_mut(Axis(0)).enumerate() {
        let lim = mask.row_limit(i);
        let max = row
            .slice(s![..lim])
            .fold(f64::NEG_INFINITY, |m, &x| m.max(x));
        let mut sum = 0.0;
        for (j, x) in row.iter_mut().enumerate() {
            if j < lim {
                *x = (*x - max).exp();
                sum += *x;
            } else {
                *x = 0.0;
            }
        }
        row.mapv_inplace(|x| x / sum);
    }
    let ctx = p.dot(&v);
    (p, ctx)
}

fn check_ids(params: &ModelParams, ids: &[u32]) -> Result<()> {
    let cfg = &params.config;
    if ids.len() > cfg.max_context {
        return Err(Error::ContextOverflow {
            len: ids.len(),
            max: cfg.max_context,
        });
    }
    if let Some(&bad) = ids.iter().find(|&&id| id as usize >= cfg.vocab_size) {
        return Err(Error::TokenOutOfRange {
            id: bad as usize,
            vocab: cfg.vocab_size,
        });
    }
    Ok(())
}

pub(crate) fn forward_cached(params: &ModelParams, ids: &[u32]) -> Result<(ForwardOutput, Cache)> {
    check_ids(params, ids)?;
    let cfg = &params.config;
    let t = ids.len();
    let dh = cfg.head_dim();
    let mask = build_lookahead_mask(t, cfg.lookahead_per_layer);

    let mut x = Array2::zeros((t, cfg.dim));
    for (i, &id) in ids.iter().enumerate() {
        let mut row = x.row_mut(i);
        row += &params.tok_emb.row(id as usize);
        row += &params.pos_emb.row(i);
    }

    let mut caches = Vec::with_capacity(params.layers.len());
    for layer in &params.layers {
        let (h1, ln1) = layer.ln1.apply(&x);
        let q = layer.query.apply(&h1);
        let k = layer.key.apply(&h1);
        let v = layer.value.apply(&h1);
        let mut ctx = Array2::zeros((t, cfg.dim));
        let mut probs = Vec::with_capacity(cfg.n_heads);
        for h in 0..cfg.n_heads {
            let cols = s![.., h * dh..(h + 1) * dh];
            let (p, c) = attend(q.slice(cols), k.slice(cols), v.slice(cols), &mask);
            ctx.slice_mut(cols).assign(&c);
            probs.push(p);
        }
        x += &layer.output.apply(&ctx);

        let (h2, ln2) = layer.ln2.apply(&x);
        let pre_act = layer.ffn_in.apply(&h2);
        let act = pre_act.mapv(gelu);
        x += &layer.ffn_out.apply(&act);
        caches.push(LayerCache {
            ln1,
            h1,
            q,
            k,
            v,
            probs,
            ctx,
            ln2,
            h2,
            pre_act,
            act,
        });
    }

    let (hf, ln_f) = params.ln_f.apply(&x);
    let boundary_logits: Vec<f64> = params.boundary_head.apply(&hf).column(0).to_vec();
    let aux_logits = params.aux_head.apply(&hf);
    let out = ForwardOutput {
        boundary_probs: boundary_logits.iter().map(|&z| sigmoid(z)).collect(),
        boundary_logits,
        aux_logits,
    };
    Ok((
        out,
        Cache {
            layers: caches,
            ln_f,
            hf,
        },
    ))
}

/// Boundary probability and auxiliary logits for every token.
pub fn forward(params: &ModelParams, ids: &[u32]) -> Result<ForwardOutput> {
    forward_cached(params, ids).map(|(out, _)| out)
}

fn backward(
    params: &ModelParams,
    ids: &[u32],
    cache: &Cache,
    d_boundary: &Array2<f64>,
    d_aux: &Array2<f64>,
    grads: &mut ModelParams,
) {
    let cfg = &params.config;
    let t = ids.len();
    let dh = cfg.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();

    let mut dhf = params
        .boundary_head
        .backward(&cache.hf, d_boundary, &mut grads.boundary_head);
    dhf += &params
        .aux_head
        .backward(&cache.hf, d_aux, &mut grads.aux_head);
    let mut dx = params.ln_f.backward(&cache.ln_f, &dhf, &mut grads.ln_f);

    for (li, layer) in params.layers.iter().enumerate().rev() {
        let c = &cache.layers[li];
        let g = &mut grads.layers[li];

        let dact = layer.ffn_out.backward(&c.act, &dx, &mut g.ffn_out);
        let dpre = dact * &c.pre_act.mapv(gelu_grad);
        let dh2 = layer.ffn_in.backward(&c.h2, &dpre, &mut g.ffn_in);
        dx += &layer.ln2.backward(&c.ln2, &dh2, &mut g.ln2);

        let dctx = layer.output.backward(&c.ctx, &dx, &mut g.output);
        let mut dq = Array2::zeros((t, cfg.dim));
        let mut dk = Array2::zeros((t, cfg.dim));
        let mut dv = Array2::zeros((t, cfg.dim));
        for h in 0..cfg.n_heads {
            let cols = s![.., h * dh..(h + 1) * dh];
            let p = &c.probs[h];
            let dctx_h = dctx.slice(cols);
            dv.slice_mut(cols).assign(&p.t().dot(&dctx_h));
            let dp = dctx_h.dot(&c.v.slice(cols).t());
            let row_dot = (&dp * p).sum_axis(Axis(1));
            let ds = (dp - &row_dot.insert_axis(Axis(1))) * p * scale;
            dq.slice_mut(cols).assign(&ds.dot(&c.k.slice(cols)));
            dk.slice_mut(cols).assign(&ds.t().dot(&c.q.slice(cols)));
        }
        let mut dh1 = layer.query.backward(&c.h1, &dq, &mut g.query);
        dh1 += &layer.key.backward(&c.h1, &dk, &mut g.key);
        dh1 += &layer.value.backward(&c.h1, &dv, &mut g.value);
        dx += &layer.ln1.backward(&c.ln1, &dh1, &mut g.ln1);
    }

    for (i, &id) in ids.iter().enumerate() {
        let row = dx.row(i);
        let mut te = grads.tok_emb.row_mut(id as usize);
        te += &row;
        let mut pe = grads.pos_emb.row_mut(i);
        pe += &row;
    }
}

fn log_sum_exp(row: ndarray::ArrayView1<f64>) -> f64 {
    let max = row.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
    max + row.iter().map(|&x| (x - max).exp()).sum::<f64>().ln()
}

struct Normalizers {
    tokens: f64,
    aux: f64,
}

fn normalizers(batch: &[TrainExample]) -> Normalizers {
    Normalizers {
        tokens: batch.iter().map(|e| e.ids.len()).sum::<usize>().max(1) as f64,
        aux: batch
            .iter()
            .map(|e| e.aux_targets.len())
            .sum::<usize>()
            .max(1) as f64,
    }
}

fn example_loss(
    out: &ForwardOutput,
    ex: &TrainExample,
    aux_weight: f64,
    norm: &Normalizers,
) -> f64 {
    let bce: f64 = out
        .boundary_logits
        .iter()
        .zip(&ex.boundary_labels)
        .map(|(&z, &y)| softplus(z) - y * z)
        .sum();
    let ce: f64 = ex
        .aux_targets
        .iter()
        .map(|&(pos, class)| {
            let row = out.aux_logits.row(pos);
            log_sum_exp(row) - row[class]
        })
        .sum();
    bce / norm.tokens + aux_weight * ce / norm.aux
}

fn check_example(params: &ModelParams, ex: &TrainExample) -> Result<()> {
    if ex.boundary_labels.len() != ex.ids.len() {
        return Err(Error::Input(
            "boundary labels do not match the token count".into(),
        ));
    }
    for &(pos, class) in &ex.aux_targets {
        if pos >= ex.ids.len() || class >= params.config.aux_vocab {
            return Err(Error::Input(format!(
                "aux target ({pos}, {class}) out of range"
            )));
        }
    }
    Ok(())
}

/// Mean boundary cross-entropy over all tokens of the batch plus
/// `aux_weight` times the mean auxiliary cross-entropy over aux targets.
pub fn loss(params: &ModelParams, batch: &[TrainExample], aux_weight: f64) -> Result<f64> {
    let norm = normalizers(batch);
    let mut total = 0.0;
    for ex in batch {
        check_example(params, ex)?;
        let out = forward(params, &ex.ids)?;
        total += example_loss(&out, ex, aux_weight, &norm);
    }
    Ok(total)
}

/// Loss and its gradient with respect to every tensor in `params`.
pub fn loss_and_grad(
    params: &ModelParams,
    batch: &[TrainExample],
    aux_weight: f64,
) -> Result<(f64, ModelParams)> {
    let norm = normalizers(batch);
    let mut grads = params.zeros_like();
    let mut total = 0.0;
    for ex in batch {
        check_example(params, ex)?;
        if ex.ids.is_empty() {
            continue;
        }
        let (out, cache) = forward_cached(params, &ex.ids)?;
        total += example_loss(&out, ex, aux_weight, &norm);

        let t = ex.ids.len();
        let mut d_boundary = Array2::zeros((t, 1));
        for (i, (&z, &y)) in out
            .boundary_logits
            .iter()
            .zip(&ex.boundary_labels)
            .enumerate()
        {
            d_boundary[[i, 0]] = (sigmoid(z) - y) / norm.tokens;
        }
        let mut d_aux = Array2::zeros(out.aux_logits.raw_dim());
        for &(pos, class) in &ex.aux_targets {
            let row = out.aux_logits.row(pos);
            let lse = log_sum_exp(row);
            let w = aux_weight / norm.aux;
            for (j, &z) in row.iter().enumerate() {
                d_aux[[pos, j]] += w * ((z - lse).exp() - if j == class { 1.0 } else { 0.0 });
            }
        }
        backward(params, &ex.ids, &cache, &d_boundary, &d_aux, &mut grads);
    }
    Ok((total, grads))
}
