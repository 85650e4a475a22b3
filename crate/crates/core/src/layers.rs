//! Parameterized building blocks shared by the text encoder and the backbone.

use rand::Rng;

use crate::error::{shape_err, Result};
use crate::scalar::Scalar;
use crate::tensor::{Graph, ParamStore, Tensor, Var};

/// Adds `name.w` `[in, out]` (and `name.b` when `bias`) with LeCun-normal weights.
pub fn init_linear<S: Scalar>(
    p: &mut ParamStore<S>,
    name: &str,
    fan_in: usize,
    fan_out: usize,
    bias: bool,
    rng: &mut impl Rng,
) {
    p.init_normal(&format!("{name}.w"), &[fan_in, fan_out], 1.0 / (fan_in as f64).sqrt(), rng);
    if bias {
        p.init_zeros(&format!("{name}.b"), &[fan_out]);
    }
}

pub fn init_layer_norm<S: Scalar>(p: &mut ParamStore<S>, name: &str, dim: usize) {
    p.init_ones(&format!("{name}.g"), &[dim]);
    p.init_zeros(&format!("{name}.b"), &[dim]);
}

/// `x · name.w (+ name.b)`; the bias is used when present in the store.
pub fn linear<'g, S: Scalar>(g: &'g Graph<S>, p: &ParamStore<S>, name: &str, x: Var<'g, S>) -> Result<Var<'g, S>> {
    let w = g.param(p, &format!("{name}.w"))?;
    let bias = format!("{name}.b");
    let b = if p.contains(&bias) { Some(g.param(p, &bias)?) } else { None };
    x.linear(w, b)
}

/// Layer norm over the last axis with learned gain and shift.
pub fn layer_norm<'g, S: Scalar>(g: &'g Graph<S>, p: &ParamStore<S>, name: &str, x: Var<'g, S>) -> Result<Var<'g, S>> {
    let gain = g.param(p, &format!("{name}.g"))?;
    let shift = g.param(p, &format!("{name}.b"))?;
    x.layer_norm(1e-5)?.mul(gain)?.add(shift)
}

/// `[B, L, H·dh]` to `[B, H, L, dh]`.
pub fn split_heads<'g, S: Scalar>(x: Var<'g, S>, heads: usize) -> Result<Var<'g, S>> {
    let s = x.shape();
    let &[b, l, d] = s.as_slice() else {
        return Err(shape_err!("split_heads expects [B, L, D], got {s:?}"));
    };
    if d % heads != 0 {
        return Err(shape_err!("width {d} not divisible by {heads} heads"));
    }
    x.reshape(&[b, l, heads, d / heads])?.permute(&[0, 2, 1, 3])
}

/// `[B, H, L, dh]` to `[B, L, H·dh]`.
pub fn merge_heads<S: Scalar>(x: Var<'_, S>) -> Result<Var<'_, S>> {
    let s = x.shape();
    let &[b, h, l, dh] = s.as_slice() else {
        return Err(shape_err!("merge_heads expects [B, H, L, dh], got {s:?}"));
    };
    x.permute(&[0, 2, 1, 3])?.reshape(&[b, l, h * dh])
}

/// Softmax attention weights `[B, H, Lq, Lk]` for `[B, H, L, dh]` queries and keys,
/// scaled by `1/√dh`. `key_bias` is an additive `[B, 1, 1, Lk]` constant.
pub fn attention_weights<'g, S: Scalar>(
    q: Var<'g, S>,
    k: Var<'g, S>,
    key_bias: Option<&Tensor<S>>,
) -> Result<Var<'g, S>> {
    let qs = q.shape();
    let ks = k.shape();
    let &[b, h, lq, dh] = qs.as_slice() else {
        return Err(shape_err!("queries must be [B, H, L, dh], got {qs:?}"));
    };
    let lk = ks[2];
    let q3 = q.reshape(&[b * h, lq, dh])?;
    let k3 = k.reshape(&[b * h, lk, dh])?;
    let mut scores = q3
        .bmm(k3, true)?
        .scale(1.0 / (dh as f64).sqrt())
        .reshape(&[b, h, lq, lk])?;
    if let Some(bias) = key_bias {
        scores = scores.add(q.graph().constant(bias.clone()))?;
    }
    scores.softmax(3)
}

/// Weighted sum of `[B, H, Lk, dh]` values by `[B, H, Lq, Lk]` weights.
pub fn attend<'g, S: Scalar>(weights: Var<'g, S>, v: Var<'g, S>) -> Result<Var<'g, S>> {
    let ws = weights.shape();
    let vs = v.shape();
    let (b, h, lq, lk, dh) = (ws[0], ws[1], ws[2], ws[3], vs[3]);
    weights
        .reshape(&[b * h, lq, lk])?
        .bmm(v.reshape(&[b * h, lk, dh])?, false)?
        .reshape(&[b, h, lq, dh])
}

/// Position-wise feed-forward `w2(gelu(w1 x))`.
pub fn feed_forward<'g, S: Scalar>(g: &'g Graph<S>, p: &ParamStore<S>, name: &str, x: Var<'g, S>) -> Result<Var<'g, S>> {
    let h = linear(g, p, &format!("{name}.w1"), x)?.gelu();
    linear(g, p, &format!("{name}.w2"), h)
}

pub fn init_feed_forward<S: Scalar>(p: &mut ParamStore<S>, name: &str, dim: usize, hidden: usize, rng: &mut impl Rng) {
    init_linear(p, &format!("{name}.w1"), dim, hidden, true, rng);
    init_linear(p, &format!("{name}.w2"), hidden, dim, true, rng);
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn heads_roundtrip() {
        let g = Graph::<f64>::new();
        let data: Vec<f64> = (0..2 * 3 * 8).map(|v| v as f64).collect();
        let x = g.leaf(Tensor::new(&[2, 3, 8], data).unwrap());
        let y = merge_heads(split_heads(x, 4).unwrap()).unwrap();
        assert_eq!(*y.value(), *x.value());
    }

    #[test]
    fn single_key_attention_returns_value() {
        let g = Graph::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut p = ParamStore::new();
        p.init_normal("q", &[1, 2, 1, 4], 1.0, &mut rng);
        p.init_normal("k", &[1, 2, 1, 4], 1.0, &mut rng);
        p.init_normal("v", &[1, 2, 1, 4], 1.0, &mut rng);
        let (q, k, v) = (g.param(&p, "q").unwrap(), g.param(&p, "k").unwrap(), g.param(&p, "v").unwrap());
        let w = attention_weights(q, k, None).unwrap();
        assert!(w.value().data().iter().all(|&x| x == 1.0));
        assert_eq!(*attend(w, v).unwrap().value(), *v.value());
    }

    #[test]
    fn key_bias_excludes_keys() {
        let g = Graph::<f64>::new();
        let q = g.leaf(Tensor::ones(&[1, 1, 1, 2]));
        let k = g.leaf(Tensor::from_f64(&[1, 1, 2, 2], &[1., 0., 5., 5.]).unwrap());
        let bias = Tensor::from_f64(&[1, 1, 1, 2], &[0.0, -1e9]).unwrap();
        let w = attention_weights(q, k, Some(&bias)).unwrap();
        assert_eq!(w.value().data(), &[1.0, 0.0]);
    }
}
