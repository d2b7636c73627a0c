//! Loop-by-loop reference implementations. They share no indexing or
//! reduction code with the optimized kernels and count every
//! multiply-accumulate they perform.

use super::{Boundary, EmimConfig, EmimParams, GlobalParams, Sampling, TokenVolume};
use crate::error::{Error, Result};
use crate::tensor::{gelu, LinearParams};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct MacCounter {
    pub projections: u64,
    pub affinity: u64,
    pub aggregation: u64,
    pub motion: u64,
}

impl MacCounter {
    pub fn total(&self) -> u64 {
        self.projections + self.affinity + self.aggregation + self.motion
    }
}

fn dot(a: &[f64], b: &[f64], counter: &mut u64) -> f64 {
    let mut s = 0.0;
    for i in 0..a.len() {
        s += a[i] * b[i];
        *counter += 1;
    }
    s
}

fn linear(tokens: &[Vec<f64>], p: &LinearParams, counter: &mut u64) -> Vec<Vec<f64>> {
    let (out_dim, in_dim) = (p.out_dim(), p.in_dim());
    tokens
        .iter()
        .map(|x| {
            (0..out_dim)
                .map(|o| {
                    let w = &p.weight.data()[o * in_dim..(o + 1) * in_dim];
                    dot(w, x, counter) + p.bias.data()[o]
                })
                .collect()
        })
        .collect()
}

fn softmax(row: &[f64]) -> Vec<f64> {
    let m = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.iter().map(|v| v / z).collect()
}

fn tokens_of(x: &TokenVolume) -> Vec<Vec<f64>> {
    (0..x.tokens()).map(|i| x.flat_token(i).to_vec()).collect()
}

/// `(frame, x, y)` of window slot `(a, b)` for the query `(t, x, y)`, or
/// `None` for a padded slot.
fn naive_source(vol: &TokenVolume, cfg: &EmimConfig, t: usize, x: usize, y: usize, a: usize, b: usize) -> Option<usize> {
    let (tt, hh, ww) = (vol.frames() as i64, vol.height() as i64, vol.width() as i64);
    let p = cfg.radius as i64;
    let mut st = t as i64 + cfg.interval as i64;
    if st > tt - 1 {
        st = t as i64;
    }
    let (cx, cy) = match cfg.sampling {
        Sampling::Sliding => (x as i64, y as i64),
        Sampling::NonSliding => (hh / 2, ww / 2),
    };
    let mut sx = cx + a as i64 - p;
    let mut sy = cy + b as i64 - p;
    let outside = sx < 0 || sx >= hh || sy < 0 || sy >= ww;
    if outside {
        match cfg.boundary {
            Boundary::PadConstant => return None,
            Boundary::ClampEdge => {
                sx = sx.max(0).min(hh - 1);
                sy = sy.max(0).min(ww - 1);
            }
        }
    }
    Some(((st * hh + sx) * ww + sy) as usize)
}

/// Raw affinity rows, indexed `[head][query][slot]`.
pub fn affinity(q: &TokenVolume, k: &TokenVolume, bias: &[f64], cfg: &EmimConfig, counter: &mut MacCounter) -> Vec<Vec<Vec<f64>>> {
    let side = 2 * cfg.radius + 1;
    let c = q.channels();
    let dh = c / cfg.heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let pad = vec![cfg.pad_value; dh];
    let mut out = vec![Vec::new(); cfg.heads];
    for (h, rows) in out.iter_mut().enumerate() {
        for t in 0..q.frames() {
            for x in 0..q.height() {
                for y in 0..q.width() {
                    let qv = &q.token(t, x, y)[h * dh..(h + 1) * dh];
                    let mut row = Vec::with_capacity(side * side);
                    for a in 0..side {
                        for b in 0..side {
                            let kv = match naive_source(k, cfg, t, x, y, a, b) {
                                Some(i) => &k.flat_token(i)[h * dh..(h + 1) * dh],
                                None => &pad[..],
                            };
                            let mut score = dot(qv, kv, &mut counter.affinity) * scale;
                            if cfg.bias_enabled {
                                score += bias[(h * side + a) * side + b];
                            }
                            row.push(score);
                        }
                    }
                    rows.push(row);
                }
            }
        }
    }
    out
}

/// Reference forward of the windowed layer.
pub fn emim_forward(x: &TokenVolume, params: &EmimParams, cfg: &EmimConfig, counter: &mut MacCounter) -> Result<TokenVolume> {
    cfg.validate(x.dims())?;
    let c = x.channels();
    let dh = c / cfg.heads;
    let side = 2 * cfg.radius + 1;
    let tokens = tokens_of(x);
    let to_vol = |t: Vec<Vec<f64>>| TokenVolume::new(x.dims(), t.concat());
    let q = to_vol(linear(&tokens, &params.q, &mut counter.projections))?;
    let k = to_vol(linear(&tokens, &params.k, &mut counter.projections))?;
    let v = to_vol(linear(&tokens, &params.v, &mut counter.projections))?;
    let raw = affinity(&q, &k, params.rel_bias.table.data(), cfg, counter);
    let pad = vec![cfg.pad_value; dh];

    let mut combined = vec![vec![0.0; c]; x.tokens()];
    let mut qi = 0;
    for t in 0..x.frames() {
        for xx in 0..x.height() {
            for y in 0..x.width() {
                for h in 0..cfg.heads {
                    let probs = softmax(&raw[h][qi]);
                    for a in 0..side {
                        for b in 0..side {
                            let vv = match naive_source(&v, cfg, t, xx, y, a, b) {
                                Some(i) => &v.flat_token(i)[h * dh..(h + 1) * dh],
                                None => &pad[..],
                            };
                            for ch in 0..dh {
                                combined[qi][h * dh + ch] += probs[a * side + b] * vv[ch];
                                counter.aggregation += 1;
                            }
                        }
                    }
                    if let Some(mlp) = &params.motion {
                        let hidden = linear(&[raw[h][qi].clone()], &mlp.fc1, &mut counter.motion);
                        let act: Vec<f64> = hidden[0].iter().map(|&z| gelu(z)).collect();
                        let m = linear(&[act], &mlp.fc2, &mut counter.motion);
                        if m[0].len() != dh {
                            return Err(Error::config("motion MLP output does not match the head dimension"));
                        }
                        for ch in 0..dh {
                            combined[qi][h * dh + ch] += m[0][ch];
                        }
                    }
                }
                qi += 1;
            }
        }
    }
    let out = linear(&combined, &params.o, &mut counter.projections);
    to_vol(out)
}

/// Reference forward of dense multi-head attention, one `N×N` loop per head.
pub fn global_forward(x: &TokenVolume, params: &GlobalParams, heads: usize, counter: &mut MacCounter) -> Result<TokenVolume> {
    let c = x.channels();
    if heads == 0 || !c.is_multiple_of(heads) {
        return Err(Error::config("channels not divisible by heads"));
    }
    let dh = c / heads;
    let n = x.tokens();
    let scale = 1.0 / (dh as f64).sqrt();
    let tokens = tokens_of(x);
    let q = linear(&tokens, &params.q, &mut counter.projections);
    let k = linear(&tokens, &params.key(), &mut counter.projections);
    let v = linear(&tokens, &params.v, &mut counter.projections);
    let mut mixed = vec![vec![0.0; c]; n];
    for h in 0..heads {
        let r = h * dh..(h + 1) * dh;
        for i in 0..n {
            let scores: Vec<f64> = (0..n)
                .map(|j| dot(&q[i][r.clone()], &k[j][r.clone()], &mut counter.affinity) * scale)
                .collect();
            let probs = softmax(&scores);
            for j in 0..n {
                for ch in 0..dh {
                    mixed[i][h * dh + ch] += probs[j] * v[j][h * dh + ch];
                    counter.aggregation += 1;
                }
            }
        }
    }
    let out = linear(&mixed, &params.o, &mut counter.projections);
    TokenVolume::new(x.dims(), out.concat())
}
