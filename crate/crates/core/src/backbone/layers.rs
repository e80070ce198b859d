//! Pre-norm transformer block with hand-derived backward pass.

use crate::scalar::Real;
use crate::tensor::Mat;

const LN_EPS: f64 = 1e-6;

/// Parameters of one pre-norm transformer block. Vectors are stored as `1 × n` matrices.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockParams<S> {
    pub ln1_g: Mat<S>,
    pub ln1_b: Mat<S>,
    /// `[d, 3d]`, columns ordered query | key | value.
    pub qkv_w: Mat<S>,
    pub qkv_b: Mat<S>,
    pub attn_out_w: Mat<S>,
    pub attn_out_b: Mat<S>,
    pub ln2_g: Mat<S>,
    pub ln2_b: Mat<S>,
    pub fc1_w: Mat<S>,
    pub fc1_b: Mat<S>,
    pub fc2_w: Mat<S>,
    pub fc2_b: Mat<S>,
}

impl<S: Real> BlockParams<S> {
    pub fn zeros(width: usize, hidden: usize) -> Self {
        Self {
            ln1_g: Mat::zeros(1, width),
            ln1_b: Mat::zeros(1, width),
            qkv_w: Mat::zeros(width, 3 * width),
            qkv_b: Mat::zeros(1, 3 * width),
            attn_out_w: Mat::zeros(width, width),
            attn_out_b: Mat::zeros(1, width),
            ln2_g: Mat::zeros(1, width),
            ln2_b: Mat::zeros(1, width),
            fc1_w: Mat::zeros(width, hidden),
            fc1_b: Mat::zeros(1, hidden),
            fc2_w: Mat::zeros(hidden, width),
            fc2_b: Mat::zeros(1, width),
        }
    }

    pub fn width(&self) -> usize {
        self.ln1_g.cols()
    }

    pub(crate) fn tensors(&self) -> [(&'static str, &Mat<S>); 12] {
        [
            ("ln1_g", &self.ln1_g),
            ("ln1_b", &self.ln1_b),
            ("qkv_w", &self.qkv_w),
            ("qkv_b", &self.qkv_b),
            ("attn_out_w", &self.attn_out_w),
            ("attn_out_b", &self.attn_out_b),
            ("ln2_g", &self.ln2_g),
            ("ln2_b", &self.ln2_b),
            ("fc1_w", &self.fc1_w),
            ("fc1_b", &self.fc1_b),
            ("fc2_w", &self.fc2_w),
            ("fc2_b", &self.fc2_b),
        ]
    }

    pub(crate) fn tensors_mut(&mut self) -> [(&'static str, &mut Mat<S>); 12] {
        [
            ("ln1_g", &mut self.ln1_g),
            ("ln1_b", &mut self.ln1_b),
            ("qkv_w", &mut self.qkv_w),
            ("qkv_b", &mut self.qkv_b),
            ("attn_out_w", &mut self.attn_out_w),
            ("attn_out_b", &mut self.attn_out_b),
            ("ln2_g", &mut self.ln2_g),
            ("ln2_b", &mut self.ln2_b),
            ("fc1_w", &mut self.fc1_w),
            ("fc1_b", &mut self.fc1_b),
            ("fc2_w", &mut self.fc2_w),
            ("fc2_b", &mut self.fc2_b),
        ]
    }
}

// ---- primitives ---------------------------------------------------------

pub(crate) fn linear<S: Real>(x: &Mat<S>, w: &Mat<S>, b: &Mat<S>) -> Mat<S> {
    let mut y = x.matmul(w);
    y.add_row_broadcast(b.row(0));
    y
}

/// Accumulates weight/bias gradients and returns `dx`.
pub(crate) fn linear_backward<S: Real>(
    x: &Mat<S>,
    w: &Mat<S>,
    dy: &Mat<S>,
    dw: &mut Mat<S>,
    db: &mut Mat<S>,
) -> Mat<S> {
    dw.add_assign(&x.t_matmul(dy));
    for (g, s) in db.row_mut(0).iter_mut().zip(dy.col_sums()) {
        *g += s;
    }
    dy.matmul_t(w)
}

pub(crate) struct LayerNormCache<S> {
    xhat: Mat<S>,
    inv_std: Vec<S>,
}

pub(crate) fn layer_norm<S: Real>(x: &Mat<S>, g: &Mat<S>, b: &Mat<S>) -> (Mat<S>, LayerNormCache<S>) {
    let (n, d) = x.shape();
    let df = S::count(d);
    let eps = S::lit(LN_EPS);
    let mut xhat = Mat::zeros(n, d);
    let mut y = Mat::zeros(n, d);
    let mut inv_std = Vec::with_capacity(n);
    for i in 0..n {
        let row = x.row(i);
        let mean = row.iter().copied().sum::<S>() / df;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() / df;
        let is = S::one() / (var + eps).sqrt();
        inv_std.push(is);
        for j in 0..d {
            let h = (row[j] - mean) * is;
            xhat[(i, j)] = h;
            y[(i, j)] = h * g[(0, j)] + b[(0, j)];
        }
    }
    (y, LayerNormCache { xhat, inv_std })
}

pub(crate) fn layer_norm_backward<S: Real>(
    cache: &LayerNormCache<S>,
    g: &Mat<S>,
    dy: &Mat<S>,
    dg: &mut Mat<S>,
    db: &mut Mat<S>,
) -> Mat<S> {
    let (n, d) = dy.shape();
    let df = S::count(d);
    let mut dx = Mat::zeros(n, d);
    let mut dxhat = vec![S::zero(); d];
    for i in 0..n {
        let xh = cache.xhat.row(i);
        let dyr = dy.row(i);
        let mut mean_dxhat = S::zero();
        let mut mean_dxhat_xhat = S::zero();
        for j in 0..d {
            dg[(0, j)] += dyr[j] * xh[j];
            db[(0, j)] += dyr[j];
            dxhat[j] = dyr[j] * g[(0, j)];
            mean_dxhat += dxhat[j];
            mean_dxhat_xhat += dxhat[j] * xh[j];
        }
        mean_dxhat /= df;
        mean_dxhat_xhat /= df;
        let is = cache.inv_std[i];
        for j in 0..d {
            dx[(i, j)] = is * (dxhat[j] - mean_dxhat - xh[j] * mean_dxhat_xhat);
        }
    }
    dx
}

fn gelu_parts<S: Real>(x: S) -> (S, S) {
    // tanh approximation
    let c = S::lit((2.0 / std::f64::consts::PI).sqrt());
    let a = S::lit(0.044715);
    let half = S::lit(0.5);
    let inner = c * (x + a * x * x * x);
    let t = inner.tanh();
    let y = half * x * (S::one() + t);
    let dy = half * (S::one() + t) + half * x * (S::one() - t * t) * c * (S::one() + S::lit(3.0) * a * x * x);
    (y, dy)
}

pub fn gelu<S: Real>(x: S) -> S {
    gelu_parts(x).0
}

// ---- attention ----------------------------------------------------------

pub(crate) struct AttentionCache<S> {
    qkv: Mat<S>,
    /// Per-head row-softmax attention weights `[n, n]`.
    probs: Vec<Mat<S>>,
    concat: Mat<S>,
}

fn head_slice<S: Real>(qkv: &Mat<S>, which: usize, head: usize, hd: usize, d: usize) -> Mat<S> {
    let n = qkv.rows();
    let mut out = Mat::zeros(n, hd);
    let off = which * d + head * hd;
    for i in 0..n {
        out.row_mut(i).copy_from_slice(&qkv.row(i)[off..off + hd]);
    }
    out
}

pub(crate) fn attention<S: Real>(x: &Mat<S>, p: &BlockParams<S>, n_heads: usize) -> (Mat<S>, AttentionCache<S>) {
    let (n, d) = x.shape();
    let hd = d / n_heads;
    let scale = S::one() / S::count(hd).sqrt();
    let qkv = linear(x, &p.qkv_w, &p.qkv_b);
    let mut concat = Mat::zeros(n, d);
    let mut probs = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let q = head_slice(&qkv, 0, h, hd, d);
        let k = head_slice(&qkv, 1, h, hd, d);
        let v = head_slice(&qkv, 2, h, hd, d);
        let mut a = q.matmul_t(&k);
        for i in 0..n {
            let row = a.row_mut(i);
            let max = row.iter().fold(S::neg_infinity(), |m, &z| m.max(z * scale));
            let mut total = S::zero();
            for z in row.iter_mut() {
                *z = (*z * scale - max).exp();
                total += *z;
            }
            for z in row.iter_mut() {
                *z /= total;
            }
        }
        let o = a.matmul(&v);
        for i in 0..n {
            concat.row_mut(i)[h * hd..(h + 1) * hd].copy_from_slice(o.row(i));
        }
        probs.push(a);
    }
    let y = linear(&concat, &p.attn_out_w, &p.attn_out_b);
    (y, AttentionCache { qkv, probs, concat })
}

pub(crate) fn attention_backward<S: Real>(
    x: &Mat<S>,
    cache: &AttentionCache<S>,
    p: &BlockParams<S>,
    dy: &Mat<S>,
    g: &mut BlockParams<S>,
) -> Mat<S> {
    let (n, d) = x.shape();
    let n_heads = cache.probs.len();
    let hd = d / n_heads;
    let scale = S::one() / S::count(hd).sqrt();
    let d_concat = linear_backward(&cache.concat, &p.attn_out_w, dy, &mut g.attn_out_w, &mut g.attn_out_b);
    let mut d_qkv = Mat::zeros(n, 3 * d);
    for (h, a) in cache.probs.iter().enumerate() {
        let q = head_slice(&cache.qkv, 0, h, hd, d);
        let k = head_slice(&cache.qkv, 1, h, hd, d);
        let v = head_slice(&cache.qkv, 2, h, hd, d);
        let mut d_o = Mat::zeros(n, hd);
        for i in 0..n {
            d_o.row_mut(i).copy_from_slice(&d_concat.row(i)[h * hd..(h + 1) * hd]);
        }
        let d_a = d_o.matmul_t(&v);
        let d_v = a.t_matmul(&d_o);
        let mut d_scores = Mat::zeros(n, n);
        for i in 0..n {
            let ar = a.row(i);
            let dar = d_a.row(i);
            let inner = crate::tensor::dot(ar, dar);
            for j in 0..n {
                d_scores[(i, j)] = ar[j] * (dar[j] - inner) * scale;
            }
        }
        let d_q = d_scores.matmul(&k);
        let d_k = d_scores.t_matmul(&q);
        for i in 0..n {
            let row = d_qkv.row_mut(i);
            row[h * hd..(h + 1) * hd].copy_from_slice(d_q.row(i));
            row[d + h * hd..d + (h + 1) * hd].copy_from_slice(d_k.row(i));
            row[2 * d + h * hd..2 * d + (h + 1) * hd].copy_from_slice(d_v.row(i));
        }
    }
    linear_backward(x, &p.qkv_w, &d_qkv, &mut g.qkv_w, &mut g.qkv_b)
}

// ---- block --------------------------------------------------------------

pub(crate) struct BlockCache<S> {
    x: Mat<S>,
    ln1: LayerNormCache<S>,
    ln1_out: Mat<S>,
    attn: AttentionCache<S>,
    ln2: LayerNormCache<S>,
    ln2_out: Mat<S>,
    fc1_pre: Mat<S>,
    fc1_act: Mat<S>,
}

pub(crate) fn block_forward<S: Real>(x: &Mat<S>, p: &BlockParams<S>, n_heads: usize) -> (Mat<S>, BlockCache<S>) {
    let (ln1_out, ln1) = layer_norm(x, &p.ln1_g, &p.ln1_b);
    let (attn_out, attn) = attention(&ln1_out, p, n_heads);
    let h = x.add(&attn_out);
    let (ln2_out, ln2) = layer_norm(&h, &p.ln2_g, &p.ln2_b);
    let fc1_pre = linear(&ln2_out, &p.fc1_w, &p.fc1_b);
    let fc1_act = fc1_pre.map(gelu);
    let mlp_out = linear(&fc1_act, &p.fc2_w, &p.fc2_b);
    let y = h.add(&mlp_out);
    (y, BlockCache { x: x.clone(), ln1, ln1_out, attn, ln2, ln2_out, fc1_pre, fc1_act })
}

pub(crate) fn block_backward<S: Real>(
    cache: &BlockCache<S>,
    p: &BlockParams<S>,
    dy: &Mat<S>,
    g: &mut BlockParams<S>,
) -> Mat<S> {
    let d_act = linear_backward(&cache.fc1_act, &p.fc2_w, dy, &mut g.fc2_w, &mut g.fc2_b);
    let mut d_pre = d_act;
    for (d, &z) in d_pre.as_mut_slice().iter_mut().zip(cache.fc1_pre.as_slice()) {
        *d *= gelu_parts(z).1;
    }
    let d_ln2 = linear_backward(&cache.ln2_out, &p.fc1_w, &d_pre, &mut g.fc1_w, &mut g.fc1_b);
    let mut dh = layer_norm_backward(&cache.ln2, &p.ln2_g, &d_ln2, &mut g.ln2_g, &mut g.ln2_b);
    dh.add_assign(dy);
    let d_ln1 = attention_backward(&cache.ln1_out, &cache.attn, p, &dh, g);
    let mut dx = layer_norm_backward(&cache.ln1, &p.ln1_g, &d_ln1, &mut g.ln1_g, &mut g.ln1_b);
    dx.add_assign(&dh);
    debug_assert_eq!(dx.shape(), cache.x.shape());
    dx
}

/// Runs a stack of blocks, keeping caches for the backward pass.
pub(crate) fn stack_forward<S: Real>(
    x: &Mat<S>,
    blocks: &[BlockParams<S>],
    n_heads: usize,
) -> (Mat<S>, Vec<BlockCache<S>>) {
    let mut caches = Vec::with_capacity(blocks.len());
    let mut cur = x.clone();
    for b in blocks {
        let (y, c) = block_forward(&cur, b, n_heads);
        caches.push(c);
        cur = y;
    }
    (cur, caches)
}

pub(crate) fn stack_backward<S: Real>(
    caches: &[BlockCache<S>],
    blocks: &[BlockParams<S>],
    dy: &Mat<S>,
    grads: &mut [BlockParams<S>],
) -> Mat<S> {
    let mut d = dy.clone();
    for ((c, b), g) in caches.iter().zip(blocks).zip(grads.iter_mut()).rev() {
        d = block_backward(c, b, &d, g);
    }
    d
}
