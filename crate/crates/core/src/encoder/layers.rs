//! Forward/backward primitives on row-major `(rows, features)` matrices.

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array1, Array2, ArrayView2, ArrayViewMut2, Axis, Zip};

use super::params::{Ffn, Head, LayerNorm, Linear};
use super::Scalar;

pub(crate) fn linear_fwd<T: Scalar>(l: &Linear<T>, x: &ArrayView2<T>) -> Array2<T> {
    let mut y = x.dot(&l.weight);
    if let Some(b) = &l.bias {
        y += b;
    }
    y
}

/// Accumulates weight/bias gradients into `g` and returns `dL/dx` when asked.
pub(crate) fn linear_bwd<T: Scalar>(
    l: &Linear<T>,
    x: &ArrayView2<T>,
    dy: &ArrayView2<T>,
    g: &mut Linear<T>,
    want_dx: bool,
) -> Option<Array2<T>> {
    general_mat_mul(T::one(), &x.t(), dy, T::one(), &mut g.weight);
    if let Some(gb) = &mut g.bias {
        *gb += &dy.sum_axis(Axis(0));
    }
    want_dx.then(|| dy.dot(&l.weight.t()))
}

pub(crate) struct LnCache<T> {
    xhat: Array2<T>,
    inv_std: Array1<T>,
}

pub(crate) fn layer_norm_fwd<T: Scalar>(
    ln: &LayerNorm<T>,
    x: &ArrayView2<T>,
    eps: T,
) -> (Array2<T>, LnCache<T>) {
    let (n, d) = x.dim();
    let inv_d = T::one() / T::of(d as f64);
    let mut xhat = Array2::zeros((n, d));
    let mut inv_std = Array1::zeros(n);
    for ((row, mut out), is) in x.outer_iter().zip(xhat.outer_iter_mut()).zip(inv_std.iter_mut()) {
        let mean = row.sum() * inv_d;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
        let r = T::one() / (var + eps).sqrt();
        *is = r;
        Zip::from(&mut out).and(&row).for_each(|o, &v| *o = (v - mean) * r);
    }
    let y = &xhat * &ln.gamma + &ln.beta;
    (y, LnCache { xhat, inv_std })
}

pub(crate) fn layer_norm_bwd<T: Scalar>(
    ln: &LayerNorm<T>,
    cache: &LnCache<T>,
    dy: &ArrayView2<T>,
    g: &mut LayerNorm<T>,
) -> Array2<T> {
    let d = dy.ncols();
    let inv_d = T::one() / T::of(d as f64);
    g.gamma += &(dy * &cache.xhat).sum_axis(Axis(0));
    g.beta += &dy.sum_axis(Axis(0));
    let dxhat = dy * &ln.gamma;
    let mut dx = Array2::zeros(dy.raw_dim());
    for (((dxh, xh), mut out), &r) in dxhat
        .outer_iter()
        .zip(cache.xhat.outer_iter())
        .zip(dx.outer_iter_mut())
        .zip(cache.inv_std.iter())
    {
        let m1 = dxh.sum() * inv_d;
        let m2 = Zip::from(&dxh).and(&xh).fold(T::zero(), |a, &p, &q| a + p * q) * inv_d;
        Zip::from(&mut out)
            .and(&dxh)
            .and(&xh)
            .for_each(|o, &p, &q| *o = r * (p - m1 - q * m2));
    }
    dx
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

#[inline]
pub(crate) fn gelu<T: Scalar>(x: T) -> T {
    let c = T::of(GELU_C);
    let a = T::of(GELU_A);
    let half = T::of(0.5);
    half * x * (T::one() + (c * (x + a * x * x * x)).tanh())
}

#[inline]
pub(crate) fn gelu_grad<T: Scalar>(x: T) -> T {
    let c = T::of(GELU_C);
    let a = T::of(GELU_A);
    let half = T::of(0.5);
    let t = (c * (x + a * x * x * x)).tanh();
    half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + T::of(3.0) * a * x * x)
}

#[inline]
fn sigmoid<T: Scalar>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

#[inline]
fn silu<T: Scalar>(x: T) -> T {
    x * sigmoid(x)
}

#[inline]
fn silu_grad<T: Scalar>(x: T) -> T {
    let s = sigmoid(x);
    s * (T::one() + x * (T::one() - s))
}

pub(crate) enum FfnCache<T> {
    Mlp { pre: Array2<T>, act: Array2<T> },
    SwiGlu { gate: Array2<T>, up: Array2<T>, hidden: Array2<T> },
}

pub(crate) fn ffn_fwd<T: Scalar>(f: &Ffn<T>, x: &ArrayView2<T>) -> (Array2<T>, FfnCache<T>) {
    match f {
        Ffn::Mlp { fc1, fc2 } => {
            let pre = linear_fwd(fc1, x);
            let act = pre.mapv(gelu);
            let y = linear_fwd(fc2, &act.view());
            (y, FfnCache::Mlp { pre, act })
        }
        Ffn::SwiGlu { gate, up, down } => {
            let g = linear_fwd(gate, x);
            let u = linear_fwd(up, x);
            let mut hidden = g.mapv(silu);
            hidden *= &u;
            let y = linear_fwd(down, &hidden.view());
            (y, FfnCache::SwiGlu { gate: g, up: u, hidden })
        }
    }
}

pub(crate) fn ffn_bwd<T: Scalar>(
    f: &Ffn<T>,
    x: &ArrayView2<T>,
    cache: &FfnCache<T>,
    dy: &ArrayView2<T>,
    g: &mut Ffn<T>,
) -> Array2<T> {
    match (f, cache, g) {
        (Ffn::Mlp { fc1, fc2 }, FfnCache::Mlp { pre, act }, Ffn::Mlp { fc1: g1, fc2: g2 }) => {
            let mut dact = linear_bwd(fc2, &act.view(), dy, g2, true).unwrap();
            Zip::from(&mut dact).and(pre).for_each(|d, &p| *d = *d * gelu_grad(p));
            linear_bwd(fc1, x, &dact.view(), g1, true).unwrap()
        }
        (
            Ffn::SwiGlu { gate, up, down },
            FfnCache::SwiGlu { gate: gp, up: u, hidden },
            Ffn::SwiGlu { gate: gg, up: gu, down: gd },
        ) => {
            let dh = linear_bwd(down, &hidden.view(), dy, gd, true).unwrap();
            let mut dgate = dh.clone();
            Zip::from(&mut dgate)
                .and(u)
                .and(gp)
                .for_each(|d, &uv, &gv| *d = *d * uv * silu_grad(gv));
            let mut dup = dh;
            Zip::from(&mut dup).and(gp).for_each(|d, &gv| *d = *d * silu(gv));
            let mut dx = linear_bwd(gate, x, &dgate.view(), gg, true).unwrap();
            dx += &linear_bwd(up, x, &dup.view(), gu, true).unwrap();
            dx
        }
        _ => unreachable!("gradient accumulator does not match the model's FFN type"),
    }
}

/// Softmax over each row, in place.
pub(crate) fn softmax_rows<T: Scalar>(mut m: ArrayViewMut2<T>) {
    for mut row in m.outer_iter_mut() {
        let mx = row.fold(T::neg_infinity(), |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - mx).exp());
        let s = row.sum();
        row.mapv_inplace(|v| v / s);
    }
}

pub(crate) struct AttnCache<T> {
    /// Attention probabilities per `(image, head)`, each `(tokens, tokens)`.
    probs: Vec<Array2<T>>,
}

/// Multi-head self-attention core on packed `qkv = [q | k | v]` rows for
/// `batch` sequences of `tokens` rows each. Returns the concatenated head
/// outputs (before the output projection).
pub(crate) fn attention_fwd<T: Scalar>(
    qkv: &Array2<T>,
    batch: usize,
    tokens: usize,
    heads: usize,
) -> (Array2<T>, AttnCache<T>) {
    let d = qkv.ncols() / 3;
    let dh = d / heads;
    let scale = T::one() / T::of(dh as f64).sqrt();
    let mut out = Array2::zeros((batch * tokens, d));
    let mut probs = Vec::with_capacity(batch * heads);
    for b in 0..batch {
        let rows = b * tokens..(b + 1) * tokens;
        for h in 0..heads {
            let q = qkv.slice(s![rows.clone(), h * dh..(h + 1) * dh]);
            let k = qkv.slice(s![rows.clone(), d + h * dh..d + (h + 1) * dh]);
            let v = qkv.slice(s![rows.clone(), 2 * d + h * dh..2 * d + (h + 1) * dh]);
            let mut a = Array2::zeros((tokens, tokens));
            general_mat_mul(scale, &q, &k.t(), T::zero(), &mut a);
            softmax_rows(a.view_mut());
            let mut o = out.slice_mut(s![rows.clone(), h * dh..(h + 1) * dh]);
            general_mat_mul(T::one(), &a, &v, T::zero(), &mut o);
            probs.push(a);
        }
    }
    (out, AttnCache { probs })
}

pub(crate) fn attention_bwd<T: Scalar>(
    qkv: &Array2<T>,
    cache: &AttnCache<T>,
    dout: &ArrayView2<T>,
    batch: usize,
    tokens: usize,
    heads: usize,
) -> Array2<T> {
    let d = qkv.ncols() / 3;
    let dh = d / heads;
    let scale = T::one() / T::of(dh as f64).sqrt();
    let mut dqkv = Array2::zeros(qkv.raw_dim());
    let mut da = Array2::zeros((tokens, tokens));
    for b in 0..batch {
        let rows = b * tokens..(b + 1) * tokens;
        for h in 0..heads {
            let a = &cache.probs[b * heads + h];
            let q = qkv.slice(s![rows.clone(), h * dh..(h + 1) * dh]);
            let k = qkv.slice(s![rows.clone(), d + h * dh..d + (h + 1) * dh]);
            let v = qkv.slice(s![rows.clone(), 2 * d + h * dh..2 * d + (h + 1) * dh]);
            let dout_h = dout.slice(s![rows.clone(), h * dh..(h + 1) * dh]);

            general_mat_mul(T::one(), &dout_h, &v.t(), T::zero(), &mut da);
            {
                let mut dv = dqkv.slice_mut(s![rows.clone(), 2 * d + h * dh..2 * d + (h + 1) * dh]);
                general_mat_mul(T::one(), &a.t(), &dout_h, T::zero(), &mut dv);
            }
            // softmax backward: dS = A ⊙ (dA − rowsum(dA ⊙ A))
            for (mut dr, ar) in da.outer_iter_mut().zip(a.outer_iter()) {
                let dot = Zip::from(&dr).and(&ar).fold(T::zero(), |acc, &x, &y| acc + x * y);
                Zip::from(&mut dr).and(&ar).for_each(|x, &y| *x = y * (*x - dot));
            }
            {
                let mut dq = dqkv.slice_mut(s![rows.clone(), h * dh..(h + 1) * dh]);
                general_mat_mul(scale, &da, &k, T::zero(), &mut dq);
            }
            let mut dk = dqkv.slice_mut(s![rows.clone(), d + h * dh..d + (h + 1) * dh]);
            general_mat_mul(scale, &da.t(), &q, T::zero(), &mut dk);
        }
    }
    dqkv
}

pub(crate) struct HeadCache<T> {
    x: Array2<T>,
    pre: Array2<T>,
    act: Array2<T>,
    norms: Array1<T>,
    unit: Array2<T>,
    protos: Array2<T>,
    proto_norms: Array1<T>,
}

const NORM_EPS: f64 = 1e-12;

/// Returns the prototype logits for rows of `x`.
pub(crate) fn head_fwd<T: Scalar>(head: &Head<T>, x: Array2<T>) -> (Array2<T>, HeadCache<T>) {
    let pre = linear_fwd(&head.fc1, &x.view());
    let act = pre.mapv(gelu);
    let bottleneck = linear_fwd(&head.fc2, &act.view());
    let eps = T::of(NORM_EPS);
    let norms = bottleneck.map_axis(Axis(1), |r| r.dot(&r).sqrt().max(eps));
    let unit = &bottleneck / &norms.view().insert_axis(Axis(1));
    let proto_norms = head.prototypes.map_axis(Axis(0), |c| c.dot(&c).sqrt().max(eps));
    let protos = &head.prototypes / &proto_norms.view().insert_axis(Axis(0));
    let logits = unit.dot(&protos);
    (
        logits,
        HeadCache {
            x,
            pre,
            act,
            norms,
            unit,
            protos,
            proto_norms,
        },
    )
}

pub(crate) fn head_bwd<T: Scalar>(
    head: &Head<T>,
    cache: &HeadCache<T>,
    dlogits: &ArrayView2<T>,
    g: &mut Head<T>,
) -> Array2<T> {
    // weight-normalized prototypes: w = v/|v|, dv = (dw − w (w·dw)) / |v|
    let dw = cache.unit.t().dot(dlogits);
    for (((mut gv, w), dwc), &n) in g
        .prototypes
        .axis_iter_mut(Axis(1))
        .zip(cache.protos.axis_iter(Axis(1)))
        .zip(dw.axis_iter(Axis(1)))
        .zip(cache.proto_norms.iter())
    {
        let proj = w.dot(&dwc);
        Zip::from(&mut gv)
            .and(&w)
            .and(&dwc)
            .for_each(|g, &wi, &di| *g += (di - wi * proj) / n);
    }
    let du = dlogits.dot(&cache.protos.t());
    let eps = T::of(NORM_EPS);
    let mut dh = Array2::zeros(du.raw_dim());
    for (((mut out, d), u), &n) in dh
        .outer_iter_mut()
        .zip(du.outer_iter())
        .zip(cache.unit.outer_iter())
        .zip(cache.norms.iter())
    {
        if n > eps {
            let proj = u.dot(&d);
            Zip::from(&mut out).and(&d).and(&u).for_each(|o, &di, &ui| *o = (di - ui * proj) / n);
        } else {
            Zip::from(&mut out).and(&d).for_each(|o, &di| *o = di / n);
        }
    }
    let mut dact = linear_bwd(&head.fc2, &cache.act.view(), &dh.view(), &mut g.fc2, true).unwrap();
    Zip::from(&mut dact).and(&cache.pre).for_each(|d, &p| *d = *d * gelu_grad(p));
    linear_bwd(&head.fc1, &cache.x.view(), &dact.view(), &mut g.fc1, true).unwrap()
}
