//! Dense multi-head self-attention over every token of the clip.

use rand::Rng;

use super::TokenVolume;
use crate::error::{Error, Result};
use crate::params::{join, Parameters};
use crate::tensor::{linear_backward, linear_forward, matmul_into, matmul_tn_into, softmax_backward_into, softmax_in_place, LinearParams, Tensor};

/// Projections of the dense baseline. The key projection carries no bias:
/// a key bias shifts every score of a row by the same amount, which the
/// row softmax removes.
#[derive(Debug, Clone, PartialEq)]
pub struct GlobalParams {
    pub q: LinearParams,
    pub k_weight: Tensor,
    pub v: LinearParams,
    pub o: LinearParams,
}

impl GlobalParams {
    pub fn init<R: Rng + ?Sized>(channels: usize, rng: &mut R) -> Self {
        Self {
            q: LinearParams::init(channels, channels, rng),
            k_weight: LinearParams::init(channels, channels, rng).weight,
            v: LinearParams::init(channels, channels, rng),
            o: LinearParams::init(channels, channels, rng),
        }
    }

    pub fn identity(channels: usize) -> Self {
        Self {
            q: LinearParams::identity(channels),
            k_weight: Tensor::identity(channels),
            v: LinearParams::identity(channels),
            o: LinearParams::identity(channels),
        }
    }

    pub(crate) fn key(&self) -> LinearParams {
        let out = self.k_weight.shape()[0];
        LinearParams {
            weight: self.k_weight.clone(),
            bias: Tensor::zeros(&[out]),
        }
    }

    fn check(&self, channels: usize, heads: usize) -> Result<()> {
        if heads == 0 || !channels.is_multiple_of(heads) {
            return Err(Error::config(format!("channels {channels} not divisible by heads {heads}")));
        }
        let square = |t: &Tensor| t.shape() == [channels, channels];
        if !(square(&self.q.weight) && square(&self.k_weight) && square(&self.v.weight) && square(&self.o.weight)) {
            return Err(Error::config(format!("global attention projections must be [{channels}, {channels}]")));
        }
        Ok(())
    }
}

impl Parameters for GlobalParams {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        self.q.visit(&join(prefix, "q"), f);
        f(&join(prefix, "k.weight"), &self.k_weight);
        self.v.visit(&join(prefix, "v"), f);
        self.o.visit(&join(prefix, "o"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.q.visit_mut(&join(prefix, "q"), f);
        f(&join(prefix, "k.weight"), &mut self.k_weight);
        self.v.visit_mut(&join(prefix, "v"), f);
        self.o.visit_mut(&join(prefix, "o"), f);
    }
}

struct Saved {
    x: TokenVolume,
    heads: usize,
    /// Per head, `[N, dh]` contiguous.
    q: Vec<Vec<f64>>,
    k: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    /// Per head, softmax probabilities `[N, N]`.
    probs: Vec<Vec<f64>>,
    mixed: Tensor,
}

#[derive(Default)]
pub struct GlobalTape(Option<Box<Saved>>);

impl GlobalTape {
    pub fn is_empty(&self) -> bool {
        self.0.is_none()
    }
}

fn split_heads(t: &Tensor, n: usize, c: usize, heads: usize) -> Vec<Vec<f64>> {
    let dh = c / heads;
    (0..heads)
        .map(|h| {
            let mut out = Vec::with_capacity(n * dh);
            for i in 0..n {
                out.extend_from_slice(&t.data()[i * c + h * dh..i * c + (h + 1) * dh]);
            }
            out
        })
        .collect()
}

fn merge_heads(parts: &[Vec<f64>], n: usize, c: usize, shape: &[usize]) -> Result<Tensor> {
    let heads = parts.len();
    let dh = c / heads;
    let mut out = vec![0.0; n * c];
    for (h, part) in parts.iter().enumerate() {
        for i in 0..n {
            out[i * c + h * dh..i * c + (h + 1) * dh].copy_from_slice(&part[i * dh..(i + 1) * dh]);
        }
    }
    Tensor::new(shape.to_vec(), out)
}

fn transpose(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = a[i * cols + j];
        }
    }
    out
}

fn forward_impl(x: &TokenVolume, params: &GlobalParams, heads: usize) -> Result<(TokenVolume, Saved)> {
    let c = x.channels();
    params.check(c, heads)?;
    let n = x.tokens();
    let dh = c / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let q = split_heads(&linear_forward(x.tensor(), &params.q)?, n, c, heads);
    let k = split_heads(&linear_forward(x.tensor(), &params.key())?, n, c, heads);
    let v = split_heads(&linear_forward(x.tensor(), &params.v)?, n, c, heads);
    let mut probs = Vec::with_capacity(heads);
    let mut mixed_heads = Vec::with_capacity(heads);
    for h in 0..heads {
        let kt = transpose(&k[h], n, dh);
        let mut p = vec![0.0; n * n];
        matmul_into(&q[h], &kt, &mut p, n, dh, n);
        for row in p.chunks_exact_mut(n) {
            for s in row.iter_mut() {
                *s *= scale;
            }
            softmax_in_place(row);
        }
        let mut mixed = vec![0.0; n * dh];
        matmul_into(&p, &v[h], &mut mixed, n, n, dh);
        probs.push(p);
        mixed_heads.push(mixed);
    }
    let mixed = merge_heads(&mixed_heads, n, c, x.tensor().shape())?;
    let out = TokenVolume::from_tensor(linear_forward(&mixed, &params.o)?)?;
    Ok((
        out,
        Saved {
            x: x.clone(),
            heads,
            q,
            k,
            v,
            probs,
            mixed,
        },
    ))
}

pub fn global_attention_forward(x: &TokenVolume, params: &GlobalParams, heads: usize) -> Result<TokenVolume> {
    Ok(forward_impl(x, params, heads)?.0)
}

pub fn global_attention_forward_saved(x: &TokenVolume, params: &GlobalParams, heads: usize) -> Result<(TokenVolume, GlobalTape)> {
    let (out, saved) = forward_impl(x, params, heads)?;
    Ok((out, GlobalTape(Some(Box::new(saved)))))
}

/// Returns `(dx, parameter gradients)`.
pub fn global_attention_backward(upstream: &TokenVolume, tape: &GlobalTape, params: &GlobalParams) -> Result<(TokenVolume, GlobalParams)> {
    let s = tape
        .0
        .as_deref()
        .ok_or_else(|| Error::State("global_attention_backward called without saved activations".into()))?;
    upstream.same_shape(&s.x, "global_attention_backward")?;
    let n = s.x.tokens();
    let c = s.x.channels();
    let heads = s.heads;
    let dh = c / heads;
    let scale = 1.0 / (dh as f64).sqrt();

    let (d_mixed, grad_o) = linear_backward(&s.mixed, &params.o, upstream.tensor())?;
    let d_mixed = split_heads(&d_mixed, n, c, heads);
    let mut dq_heads = Vec::with_capacity(heads);
    let mut dk_heads = Vec::with_capacity(heads);
    let mut dv_heads = Vec::with_capacity(heads);
    let mut d_scores = vec![0.0; n];
    for h in 0..heads {
        let p = &s.probs[h];
        let dout = &d_mixed[h];
        // dP = dOut · Vᵀ
        let vt = transpose(&s.v[h], n, dh);
        let mut dp = vec![0.0; n * n];
        matmul_into(dout, &vt, &mut dp, n, dh, n);
        // dV = Pᵀ · dOut
        let mut dv = vec![0.0; n * dh];
        matmul_tn_into(p, dout, &mut dv, n, n, dh);
        // dS = softmax'(dP) · scale
        let mut ds = vec![0.0; n * n];
        for i in 0..n {
            softmax_backward_into(&p[i * n..(i + 1) * n], &dp[i * n..(i + 1) * n], &mut d_scores);
            for (d, &g) in ds[i * n..(i + 1) * n].iter_mut().zip(&d_scores) {
                *d = g * scale;
            }
        }
        let mut dq = vec![0.0; n * dh];
        matmul_into(&ds, &s.k[h], &mut dq, n, n, dh);
        let mut dk = vec![0.0; n * dh];
        matmul_tn_into(&ds, &s.q[h], &mut dk, n, n, dh);
        dq_heads.push(dq);
        dk_heads.push(dk);
        dv_heads.push(dv);
    }
    let shape = s.x.tensor().shape();
    let dq = merge_heads(&dq_heads, n, c, shape)?;
    let dk = merge_heads(&dk_heads, n, c, shape)?;
    let dv = merge_heads(&dv_heads, n, c, shape)?;
    let (mut dx, grad_q) = linear_backward(s.x.tensor(), &params.q, &dq)?;
    let (dx_k, grad_k) = linear_backward(s.x.tensor(), &params.key(), &dk)?;
    let (dx_v, grad_v) = linear_backward(s.x.tensor(), &params.v, &dv)?;
    dx.add_assign(&dx_k)?;
    dx.add_assign(&dx_v)?;
    Ok((
        TokenVolume::from_tensor(dx)?,
        GlobalParams {
            q: grad_q,
            k_weight: grad_k.weight,
            v: grad_v,
            o: grad_o,
        },
    ))
}
