//! Transformer building blocks with explicit forward caches and backward passes.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::params::{Init, ParamId, ParamSet};
use super::tensor::{dot, matmul, matmul_nt, matmul_tn, matmul_tn_acc, softmax_in_place, vecmat, Mat};
use crate::scalar::Scalar;

const LN_EPS: f64 = 1e-6;

/// Dropout settings for one forward pass. Dropout is active only with an RNG.
pub struct Ctx<'r> {
    pub dropout: f64,
    pub rng: Option<&'r mut ChaCha8Rng>,
}

impl<'r> Ctx<'r> {
    pub fn inference() -> Self {
        Ctx {
            dropout: 0.0,
            rng: None,
        }
    }

    pub fn training(dropout: f64, rng: &'r mut ChaCha8Rng) -> Self {
        Ctx {
            dropout,
            rng: Some(rng),
        }
    }

    /// Inverted-dropout mask, or `None` when dropout is off.
    pub fn mask<T: Scalar>(&mut self, len: usize) -> Option<Vec<T>> {
        let p = self.dropout;
        let rng = self.rng.as_mut()?;
        if p <= 0.0 {
            return None;
        }
        let keep = T::from_f64_lossy(1.0 / (1.0 - p));
        Some(
            (0..len)
                .map(|_| if rng.gen::<f64>() < p { T::zero() } else { keep })
                .collect(),
        )
    }
}

pub fn apply_mask<T: Scalar>(m: &mut Mat<T>, mask: &Option<Vec<T>>) {
    if let Some(mask) = mask {
        for (v, &k) in m.data.iter_mut().zip(mask) {
            *v *= k;
        }
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new<T: Scalar>(ps: &mut ParamSet<T>, rng: &mut ChaCha8Rng, name: &str, input: usize, output: usize) -> Self {
        Linear {
            w: ps.add(format!("{name}.weight"), input, output, Init::Xavier, rng),
            b: ps.add(format!("{name}.bias"), 1, output, Init::Zeros, rng),
        }
    }

    pub fn forward<T: Scalar>(&self, p: &ParamSet<T>, x: &Mat<T>) -> Mat<T> {
        let mut y = matmul(x, p.get(self.w));
        let b = p.get(self.b);
        for i in 0..y.rows {
            for (v, &bv) in y.row_mut(i).iter_mut().zip(&b.data) {
                *v += bv;
            }
        }
        y
    }

    pub fn forward_row<T: Scalar>(&self, p: &ParamSet<T>, x: &[T]) -> Vec<T> {
        let w = p.get(self.w);
        let mut out = vec![T::zero(); w.cols];
        vecmat(x, w, &mut out);
        for (v, &bv) in out.iter_mut().zip(&p.get(self.b).data) {
            *v += bv;
        }
        out
    }

    /// Accumulates parameter gradients and returns the input gradient.
    pub fn backward<T: Scalar>(&self, p: &ParamSet<T>, g: &mut ParamSet<T>, x: &Mat<T>, dy: &Mat<T>) -> Mat<T> {
        matmul_tn_acc(g.get_mut(self.w), x, dy);
        let gb = g.get_mut(self.b);
        for i in 0..dy.rows {
            for (acc, &d) in gb.data.iter_mut().zip(dy.row(i)) {
                *acc += d;
            }
        }
        matmul_nt(dy, p.get(self.w))
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

pub struct LayerNormCache<T> {
    xhat: Mat<T>,
    inv_std: Vec<T>,
}

impl LayerNorm {
    pub fn new<T: Scalar>(ps: &mut ParamSet<T>, rng: &mut ChaCha8Rng, name: &str, width: usize) -> Self {
        LayerNorm {
            gain: ps.add(format!("{name}.gain"), 1, width, Init::Ones, rng),
            bias: ps.add(format!("{name}.bias"), 1, width, Init::Zeros, rng),
        }
    }

    fn normalize_row<T: Scalar>(x: &[T], out: &mut [T]) -> T {
        let n = T::from_usize_lossy(x.len());
        let mean = x.iter().copied().sum::<T>() / n;
        let var = x.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
        let inv_std = T::one() / (var + T::from_f64_lossy(LN_EPS)).sqrt();
        for (o, &v) in out.iter_mut().zip(x) {
            *o = (v - mean) * inv_std;
        }
        inv_std
    }

    pub fn forward<T: Scalar>(&self, p: &ParamSet<T>, x: &Mat<T>) -> (Mat<T>, LayerNormCache<T>) {
        let mut xhat = x.zeros_like();
        let mut inv_std = Vec::with_capacity(x.rows);
        for i in 0..x.rows {
            inv_std.push(Self::normalize_row(x.row(i), xhat.row_mut(i)));
        }
        let mut y = xhat.clone();
        self.affine(p, &mut y);
        (y, LayerNormCache { xhat, inv_std })
    }

    pub fn forward_row<T: Scalar>(&self, p: &ParamSet<T>, x: &[T]) -> Vec<T> {
        let mut y = vec![T::zero(); x.len()];
        Self::normalize_row(x, &mut y);
        let (g, b) = (p.get(self.gain), p.get(self.bias));
        for ((v, &gv), &bv) in y.iter_mut().zip(&g.data).zip(&b.data) {
            *v = *v * gv + bv;
        }
        y
    }

    fn affine<T: Scalar>(&self, p: &ParamSet<T>, y: &mut Mat<T>) {
        let (g, b) = (p.get(self.gain), p.get(self.bias));
        for i in 0..y.rows {
            for ((v, &gv), &bv) in y.row_mut(i).iter_mut().zip(&g.data).zip(&b.data) {
                *v = *v * gv + bv;
            }
        }
    }

    pub fn backward<T: Scalar>(
        &self,
        p: &ParamSet<T>,
        g: &mut ParamSet<T>,
        cache: &LayerNormCache<T>,
        dy: &Mat<T>,
    ) -> Mat<T> {
        let gain = p.get(self.gain).data.clone();
        let n = T::from_usize_lossy(dy.cols);
        let mut dx = dy.zeros_like();
        {
            let gg = g.get_mut(self.gain);
            for i in 0..dy.rows {
                for ((acc, &d), &xh) in gg.data.iter_mut().zip(dy.row(i)).zip(cache.xhat.row(i)) {
                    *acc += d * xh;
                }
            }
        }
        {
            let gb = g.get_mut(self.bias);
            for i in 0..dy.rows {
                for (acc, &d) in gb.data.iter_mut().zip(dy.row(i)) {
                    *acc += d;
                }
            }
        }
        let mut dxhat = vec![T::zero(); dy.cols];
        for i in 0..dy.rows {
            for ((dh, &d), &gv) in dxhat.iter_mut().zip(dy.row(i)).zip(&gain) {
                *dh = d * gv;
            }
            let xh = cache.xhat.row(i);
            let sum_d: T = dxhat.iter().copied().sum();
            let sum_dx: T = dot(&dxhat, xh);
            let k = cache.inv_std[i] / n;
            for ((o, &dh), &x) in dx.row_mut(i).iter_mut().zip(&dxhat).zip(xh) {
                *o = k * (n * dh - sum_d - x * sum_dx);
            }
        }
        dx
    }
}

#[derive(Debug, Clone)]
pub struct Attention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
}

pub struct AttentionCache<T> {
    xq: Mat<T>,
    xkv: Mat<T>,
    q: Mat<T>,
    k: Mat<T>,
    v: Mat<T>,
    /// Per head: softmax probabilities and the post-dropout probabilities.
    probs: Vec<(Mat<T>, Mat<T>)>,
    masks: Vec<Option<Vec<T>>>,
    concat: Mat<T>,
}

impl Attention {
    pub fn new<T: Scalar>(ps: &mut ParamSet<T>, rng: &mut ChaCha8Rng, name: &str, width: usize, heads: usize) -> Self {
        Attention {
            q: Linear::new(ps, rng, &format!("{name}.query"), width, width),
            k: Linear::new(ps, rng, &format!("{name}.key"), width, width),
            v: Linear::new(ps, rng, &format!("{name}.value"), width, width),
            o: Linear::new(ps, rng, &format!("{name}.output"), width, width),
            heads,
        }
    }

    fn head_dim<T: Scalar>(&self, p: &ParamSet<T>) -> usize {
        p.get(self.q.w).cols / self.heads
    }

    pub fn forward<T: Scalar>(
        &self,
        p: &ParamSet<T>,
        xq: &Mat<T>,
        xkv: &Mat<T>,
        causal: bool,
        ctx: &mut Ctx,
    ) -> (Mat<T>, AttentionCache<T>) {
        let q = self.q.forward(p, xq);
        let k = self.k.forward(p, xkv);
        let v = self.v.forward(p, xkv);
        let dh = self.head_dim(p);
        let scale = T::one() / T::from_usize_lossy(dh).sqrt();
        let mut concat = Mat::zeros(xq.rows, q.cols);
        let mut probs = Vec::with_capacity(self.heads);
        let mut masks = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (qh, kh, vh) = (q.columns(h * dh, dh), k.columns(h * dh, dh), v.columns(h * dh, dh));
            let mut s = matmul_nt(&qh, &kh);
            for i in 0..s.rows {
                let row = s.row_mut(i);
                for (j, val) in row.iter_mut().enumerate() {
                    *val = if causal && j > i {
                        T::neg_infinity()
                    } else {
                        *val * scale
                    };
                }
                softmax_in_place(row);
            }
            let mask = ctx.mask::<T>(s.len());
            let mut pd = s.clone();
            apply_mask(&mut pd, &mask);
            concat.add_columns(h * dh, &matmul(&pd, &vh));
            probs.push((s, pd));
            masks.push(mask);
        }
        let out = self.o.forward(p, &concat);
        let cache = AttentionCache {
            xq: xq.clone(),
            xkv: xkv.clone(),
            q,
            k,
            v,
            probs,
            masks,
            concat,
        };
        (out, cache)
    }

    /// Returns (d_xq, d_xkv).
    pub fn backward<T: Scalar>(
        &self,
        p: &ParamSet<T>,
        g: &mut ParamSet<T>,
        c: &AttentionCache<T>,
        dout: &Mat<T>,
    ) -> (Mat<T>, Mat<T>) {
        let dconcat = self.o.backward(p, g, &c.concat, dout);
        let dh = self.head_dim(p);
        let scale = T::one() / T::from_usize_lossy(dh).sqrt();
        let mut dq = c.q.zeros_like();
        let mut dk = c.k.zeros_like();
        let mut dv = c.v.zeros_like();
        for h in 0..self.heads {
            let (qh, kh, vh) = (
                c.q.columns(h * dh, dh),
                c.k.columns(h * dh, dh),
                c.v.columns(h * dh, dh),
            );
            let (probs, pd) = &c.probs[h];
            let doh = dconcat.columns(h * dh, dh);
            dv.add_columns(h * dh, &matmul_tn(pd, &doh));
            let mut dp = matmul_nt(&doh, &vh);
            apply_mask(&mut dp, &c.masks[h]);
            for i in 0..dp.rows {
                let pr = probs.row(i);
                let inner = dot(dp.row(i), pr);
                for (d, &pv) in dp.row_mut(i).iter_mut().zip(pr) {
                    *d = pv * (*d - inner) * scale;
                }
            }
            dq.add_columns(h * dh, &matmul(&dp, &kh));
            dk.add_columns(h * dh, &matmul_tn(&dp, &qh));
        }
        let dxq = self.q.backward(p, g, &c.xq, &dq);
        let mut dxkv = self.k.backward(p, g, &c.xkv, &dk);
        dxkv.add_assign(&self.v.backward(p, g, &c.xkv, &dv));
        (dxq, dxkv)
    }

    /// Single-query attention against cached keys/values (rows of `keys`/`values`).
    pub fn attend_row<T: Scalar>(&self, p: &ParamSet<T>, q: &[T], keys: &[T], values: &[T]) -> Vec<T> {
        let width = q.len();
        let dh = width / self.heads;
        let n = keys.len() / width;
        let scale = T::one() / T::from_usize_lossy(dh).sqrt();
        let mut concat = vec![T::zero(); width];
        let mut scores = vec![T::zero(); n];
        for h in 0..self.heads {
            let qh = &q[h * dh..(h + 1) * dh];
            for (j, s) in scores.iter_mut().enumerate() {
                *s = dot(qh, &keys[j * width + h * dh..j * width + (h + 1) * dh]) * scale;
            }
            softmax_in_place(&mut scores);
            let out = &mut concat[h * dh..(h + 1) * dh];
            for (j, &w) in scores.iter().enumerate() {
                for (o, &v) in out
                    .iter_mut()
                    .zip(&values[j * width + h * dh..j * width + (h + 1) * dh])
                {
                    *o += w * v;
                }
            }
        }
        self.o.forward_row(p, &concat)
    }
}

#[derive(Debug, Clone)]
pub struct FeedForward {
    pub l1: Linear,
    pub l2: Linear,
}

pub struct FeedForwardCache<T> {
    x: Mat<T>,
    pre: Mat<T>,
    hidden: Mat<T>,
    mask: Option<Vec<T>>,
}

impl FeedForward {
    pub fn new<T: Scalar>(ps: &mut ParamSet<T>, rng: &mut ChaCha8Rng, name: &str, width: usize, hidden: usize) -> Self {
        FeedForward {
            l1: Linear::new(ps, rng, &format!("{name}.ff1"), width, hidden),
            l2: Linear::new(ps, rng, &format!("{name}.ff2"), hidden, width),
        }
    }

    pub fn forward<T: Scalar>(&self, p: &ParamSet<T>, x: &Mat<T>, ctx: &mut Ctx) -> (Mat<T>, FeedForwardCache<T>) {
        let pre = self.l1.forward(p, x);
        let mut hidden = pre.clone();
        hidden.data.iter_mut().for_each(|v| *v = v.max(T::zero()));
        let mask = ctx.mask::<T>(hidden.len());
        apply_mask(&mut hidden, &mask);
        let out = self.l2.forward(p, &hidden);
        (
            out,
            FeedForwardCache {
                x: x.clone(),
                pre,
                hidden,
                mask,
            },
        )
    }

    pub fn forward_row<T: Scalar>(&self, p: &ParamSet<T>, x: &[T]) -> Vec<T> {
        let mut h = self.l1.forward_row(p, x);
        h.iter_mut().for_each(|v| *v = v.max(T::zero()));
        self.l2.forward_row(p, &h)
    }

    pub fn backward<T: Scalar>(
        &self,
        p: &ParamSet<T>,
        g: &mut ParamSet<T>,
        c: &FeedForwardCache<T>,
        dout: &Mat<T>,
    ) -> Mat<T> {
        let mut dh = self.l2.backward(p, g, &c.hidden, dout);
        apply_mask(&mut dh, &c.mask);
        for (d, &pre) in dh.data.iter_mut().zip(&c.pre.data) {
            if pre <= T::zero() {
                *d = T::zero();
            }
        }
        self.l1.backward(p, g, &c.x, &dh)
    }
}
