//! Tape-free step-at-a-time decoding with per-sequence key/value caches.
//!
//! Numerically this follows the same operation order as the tape forward,
//! so outputs agree with a full re-forward to rounding.

use super::{Model, StackIds};
use crate::encoder::PackedStudyBatch;
use crate::error::{Error, Result};
use crate::numerics::kernels::{dot, gelu, gemm, layer_norm_row, Layout};

struct CrossCache {
    /// Per layer `(keys, values)`, each `[valid_len, d]`.
    layers: Vec<(Vec<f64>, Vec<f64>)>,
    len: usize,
}

struct SeqCache {
    study: usize,
    len: usize,
    keys: Vec<Vec<f64>>,
    values: Vec<Vec<f64>>,
}

pub struct StackRunner<'m> {
    model: &'m Model,
    ids: &'m StackIds,
    cross: Vec<CrossCache>,
    seqs: Vec<SeqCache>,
}

fn matmul(rows: usize, x: &[f64], w: &[f64], k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * n];
    gemm(
        rows,
        k,
        n,
        x,
        Layout::row_major(k),
        w,
        Layout::row_major(n),
        0.0,
        &mut out,
    );
    out
}

/// Softmax-weighted sum over `len` cached keys for one head; same order as the tape op.
fn attend(
    q: &[f64],
    keys: &[f64],
    values: &[f64],
    len: usize,
    d: usize,
    off: usize,
    scale: f64,
    out: &mut [f64],
) {
    let dh = q.len();
    let mut p = vec![0.0; len];
    let mut max = f64::NEG_INFINITY;
    for (j, pj) in p.iter_mut().enumerate() {
        *pj = dot(q, &keys[j * d + off..][..dh]) * scale;
        max = max.max(*pj);
    }
    let mut total = 0.0;
    for pj in &mut p {
        *pj = (*pj - max).exp();
        total += *pj;
    }
    for (j, pj) in p.iter_mut().enumerate() {
        *pj /= total;
        for (o, v) in out.iter_mut().zip(&values[j * d + off..][..dh]) {
            *o += *pj * v;
        }
    }
}

impl<'m> StackRunner<'m> {
    /// Precomputes cross-attention keys and values for every study in `packed`.
    pub fn new(model: &'m Model, ids: &'m StackIds, packed: &PackedStudyBatch) -> Self {
        let d = model.cfg.d_model;
        let s = &model.store;
        let cross = (0..packed.batch())
            .map(|i| {
                let len = packed.valid_len(i);
                let mem = packed.study_tokens(i);
                let layers = ids
                    .blocks
                    .iter()
                    .map(|b| {
                        (
                            matmul(len, mem, s.get(b.ck).data(), d, d),
                            matmul(len, mem, s.get(b.cv).data(), d, d),
                        )
                    })
                    .collect();
                CrossCache { layers, len }
            })
            .collect();
        Self {
            model,
            ids,
            cross,
            seqs: Vec::new(),
        }
    }

    /// Starts an empty sequence attending to `study`; returns its handle.
    pub fn add_sequence(&mut self, study: usize) -> usize {
        assert!(
            study < self.cross.len(),
            "study {study} not in packed batch"
        );
        let layers = self.ids.blocks.len();
        self.seqs.push(SeqCache {
            study,
            len: 0,
            keys: vec![Vec::new(); layers],
            values: vec![Vec::new(); layers],
        });
        self.seqs.len() - 1
    }

    pub fn seq_len(&self, seq: usize) -> usize {
        self.seqs[seq].len
    }

    pub fn out_dim(&self) -> usize {
        self.ids.out_dim(&self.model.store)
    }

    /// Feeds one token to each listed sequence; returns `[items, out_dim]` outputs
    /// for the new positions.
    pub fn step(&mut self, items: &[(usize, usize)]) -> Result<Vec<f64>> {
        let cfg = &self.model.cfg;
        let s = &self.model.store;
        let (d, a) = (cfg.d_model, items.len());
        let (heads, dh) = (cfg.heads, cfg.d_model / cfg.heads);
        let scale = 1.0 / (dh as f64).sqrt();
        let tok = s.get(self.ids.tok).data();
        let pos = s.get(self.ids.pos).data();

        let mut x = vec![0.0; a * d];
        for (r, &(seq, token)) in items.iter().enumerate() {
            let p = self.seqs[seq].len;
            if p >= cfg.max_len {
                return Err(Error::Length {
                    len: p + 1,
                    max: cfg.max_len,
                });
            }
            if token >= cfg.vocab_size {
                return Err(Error::Shape(format!(
                    "token {token} outside vocabulary of {}",
                    cfg.vocab_size
                )));
            }
            for c in 0..d {
                x[r * d + c] = tok[token * d + c] + pos[p * d + c];
            }
        }

        let mut h = vec![0.0; a * d];
        let mut xhat = vec![0.0; d];
        let norm = |x: &[f64], h: &mut [f64], xhat: &mut [f64], g: &[f64], b: &[f64]| {
            for (xr, hr) in x.chunks(d).zip(h.chunks_mut(d)) {
                layer_norm_row(xr, g, b, xhat, hr);
            }
        };
        for (l, blk) in self.ids.blocks.iter().enumerate() {
            norm(
                &x,
                &mut h,
                &mut xhat,
                s.get(blk.ln1.0).data(),
                s.get(blk.ln1.1).data(),
            );
            let q = matmul(a, &h, s.get(blk.wq).data(), d, d);
            let k = matmul(a, &h, s.get(blk.wk).data(), d, d);
            let v = matmul(a, &h, s.get(blk.wv).data(), d, d);
            let mut o = vec![0.0; a * d];
            for (r, &(seq, _)) in items.iter().enumerate() {
                let cache = &mut self.seqs[seq];
                cache.keys[l].extend_from_slice(&k[r * d..][..d]);
                cache.values[l].extend_from_slice(&v[r * d..][..d]);
                let len = cache.len + 1;
                for hi in 0..heads {
                    let off = hi * dh;
                    attend(
                        &q[r * d + off..][..dh],
                        &cache.keys[l],
                        &cache.values[l],
                        len,
                        d,
                        off,
                        scale,
                        &mut o[r * d + off..][..dh],
                    );
                }
            }
            let o = matmul(a, &o, s.get(blk.wo).data(), d, d);
            x.iter_mut().zip(&o).for_each(|(x, o)| *x += o);

            norm(
                &x,
                &mut h,
                &mut xhat,
                s.get(blk.ln2.0).data(),
                s.get(blk.ln2.1).data(),
            );
            let q = matmul(a, &h, s.get(blk.cq).data(), d, d);
            let mut o = vec![0.0; a * d];
            for (r, &(seq, _)) in items.iter().enumerate() {
                let cc = &self.cross[self.seqs[seq].study];
                let (ck, cv) = &cc.layers[l];
                for hi in 0..heads {
                    let off = hi * dh;
                    attend(
                        &q[r * d + off..][..dh],
                        ck,
                        cv,
                        cc.len,
                        d,
                        off,
                        scale,
                        &mut o[r * d + off..][..dh],
                    );
                }
            }
            let o = matmul(a, &o, s.get(blk.co).data(), d, d);
            x.iter_mut().zip(&o).for_each(|(x, o)| *x += o);

            norm(
                &x,
                &mut h,
                &mut xhat,
                s.get(blk.ln3.0).data(),
                s.get(blk.ln3.1).data(),
            );
            let f = s.get(blk.f1).shape()[1];
            let mut u = matmul(a, &h, s.get(blk.f1).data(), d, f);
            let b1 = s.get(blk.fb1).data();
            for row in u.chunks_mut(f) {
                for (v, b) in row.iter_mut().zip(b1) {
                    *v = gelu(*v + b);
                }
            }
            let o = matmul(a, &u, s.get(blk.f2).data(), f, d);
            let b2 = s.get(blk.fb2).data();
            for (xr, or) in x.chunks_mut(d).zip(o.chunks(d)) {
                for ((x, o), b) in xr.iter_mut().zip(or).zip(b2) {
                    *x += o + b;
                }
            }
        }
        for &(seq, _) in items {
            self.seqs[seq].len += 1;
        }
        norm(
            &x,
            &mut h,
            &mut xhat,
            s.get(self.ids.lnf.0).data(),
            s.get(self.ids.lnf.1).data(),
        );
        let n = self.out_dim();
        let mut out = matmul(a, &h, s.get(self.ids.head).data(), d, n);
        if let Some(hb) = self.ids.head_bias {
            let hb = s.get(hb).data();
            for row in out.chunks_mut(n) {
                row.iter_mut().zip(hb).for_each(|(o, b)| *o += b);
            }
        }
        Ok(out)
    }
}
