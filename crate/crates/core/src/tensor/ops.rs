//! Elementwise, broadcasting, shape and reduction ops.

use std::sync::Arc;

use super::{numel, strides, Tensor, Var};
use crate::error::{shape_err, Result};
use crate::scalar::Scalar;

pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let r = a.len().max(b.len());
    let mut out = vec![0; r];
    for i in 0..r {
        let da = if i + a.len() >= r { a[i + a.len() - r] } else { 1 };
        let db = if i + b.len() >= r { b[i + b.len() - r] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return Err(shape_err!("cannot broadcast {a:?} with {b:?}")),
        };
    }
    Ok(out)
}

/// Strides of `src` viewed at `out` extents, zero along broadcast axes.
fn broadcast_strides(src: &[usize], out: &[usize]) -> Vec<usize> {
    let s = strides(src);
    let off = out.len() - src.len();
    (0..out.len())
        .map(|i| {
            if i < off || src[i - off] == 1 {
                0
            } else {
                s[i - off]
            }
        })
        .collect()
}

/// Visits every output position of a broadcast with the matching source offsets.
fn for_each_broadcast(shape: &[usize], sa: &[usize], sb: &[usize], mut f: impl FnMut(usize, usize)) {
    let n = numel(shape);
    if n == 0 {
        return;
    }
    if shape.is_empty() {
        f(0, 0);
        return;
    }
    let r = shape.len();
    let last = shape[r - 1];
    let (al, bl) = (sa[r - 1], sb[r - 1]);
    let mut idx = vec![0usize; r - 1];
    let (mut oa, mut ob) = (0usize, 0usize);
    for _ in 0..n / last {
        for j in 0..last {
            f(oa + j * al, ob + j * bl);
        }
        for d in (0..r - 1).rev() {
            idx[d] += 1;
            oa += sa[d];
            ob += sb[d];
            if idx[d] < shape[d] {
                break;
            }
            oa -= sa[d] * shape[d];
            ob -= sb[d] * shape[d];
            idx[d] = 0;
        }
    }
}

fn zip_broadcast<S: Scalar>(
    a: &Tensor<S>,
    b: &Tensor<S>,
    out_shape: &[usize],
    f: impl Fn(S, S) -> S,
) -> Tensor<S> {
    if a.shape() == b.shape() {
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
        return Tensor::new(out_shape, data).expect("same-shape zip");
    }
    let sa = broadcast_strides(a.shape(), out_shape);
    let sb = broadcast_strides(b.shape(), out_shape);
    let (ad, bd) = (a.data(), b.data());
    let mut data = Vec::with_capacity(numel(out_shape));
    for_each_broadcast(out_shape, &sa, &sb, |ia, ib| data.push(f(ad[ia], bd[ib])));
    Tensor::new(out_shape, data).expect("broadcast zip")
}

/// Sums a full-extent gradient down to a broadcast source shape.
fn reduce_to<S: Scalar>(g: Tensor<S>, target: &[usize]) -> Tensor<S> {
    if g.shape() == target {
        return g;
    }
    let out_shape = g.shape().to_vec();
    let st = broadcast_strides(target, &out_shape);
    let zeros = vec![0; out_shape.len()];
    let mut acc = vec![S::zero(); numel(target)];
    let gd = g.data();
    let mut k = 0;
    for_each_broadcast(&out_shape, &st, &zeros, |it, _| {
        acc[it] += gd[k];
        k += 1;
    });
    Tensor::new(target, acc).expect("reduce_to")
}

enum Binary {
    Add,
    Sub,
    Mul,
}

impl<'g, S: Scalar> Var<'g, S> {
    fn binary(self, other: Var<'g, S>, kind: Binary) -> Result<Var<'g, S>> {
        let (a, b) = (self.value(), other.value());
        let shape = broadcast_shape(a.shape(), b.shape())?;
        let out = match kind {
            Binary::Add => zip_broadcast(&a, &b, &shape, |x, y| x + y),
            Binary::Sub => zip_broadcast(&a, &b, &shape, |x, y| x - y),
            Binary::Mul => zip_broadcast(&a, &b, &shape, |x, y| x * y),
        };
        let (sa, sb) = (a.shape().to_vec(), b.shape().to_vec());
        let backward: super::graph::BackwardFn<S> = match kind {
            Binary::Add => Box::new(move |g, need| {
                vec![
                    need[0].then(|| reduce_to(g.clone(), &sa)),
                    need[1].then(|| reduce_to(g.clone(), &sb)),
                ]
            }),
            Binary::Sub => Box::new(move |g, need| {
                vec![
                    need[0].then(|| reduce_to(g.clone(), &sa)),
                    need[1].then(|| {
                        let neg = Tensor::new(g.shape(), g.data().iter().map(|&x| -x).collect())
                            .expect("neg");
                        reduce_to(neg, &sb)
                    }),
                ]
            }),
            Binary::Mul => Box::new(move |g, need| {
                let shape = g.shape().to_vec();
                vec![
                    need[0].then(|| reduce_to(zip_broadcast(g, &b, &shape, |x, y| x * y), &sa)),
                    need[1].then(|| reduce_to(zip_broadcast(g, &a, &shape, |x, y| x * y), &sb)),
                ]
            }),
        };
        Ok(self.graph.push(out, &[self, other], backward))
    }

    /// Broadcasting addition.
    pub fn add(self, other: Var<'g, S>) -> Result<Var<'g, S>> {
        self.binary(other, Binary::Add)
    }

    pub fn sub(self, other: Var<'g, S>) -> Result<Var<'g, S>> {
        self.binary(other, Binary::Sub)
    }

    /// Broadcasting elementwise product.
    pub fn mul(self, other: Var<'g, S>) -> Result<Var<'g, S>> {
        self.binary(other, Binary::Mul)
    }

    /// `alpha * x + beta`.
    pub fn affine(self, alpha: f64, beta: f64) -> Var<'g, S> {
        let (al, be) = (S::of(alpha), S::of(beta));
        let x = self.value();
        let out = Tensor::new(x.shape(), x.data().iter().map(|&v| al * v + be).collect())
            .expect("affine");
        self.graph.push(
            out,
            &[self],
            Box::new(move |g, _| {
                vec![Some(
                    Tensor::new(g.shape(), g.data().iter().map(|&v| al * v).collect())
                        .expect("affine grad"),
                )]
            }),
        )
    }

    pub fn scale(self, alpha: f64) -> Var<'g, S> {
        self.affine(alpha, 0.0)
    }

    pub fn add_scalar(self, beta: f64) -> Var<'g, S> {
        self.affine(1.0, beta)
    }

    pub fn square(self) -> Var<'g, S> {
        self.map(|x| x * x, |x, _| x + x)
    }

    /// Elementwise map with derivative `df(x, y)` where `y = f(x)`.
    pub(crate) fn map(
        self,
        f: impl Fn(S) -> S,
        df: impl Fn(S, S) -> S + 'static,
    ) -> Var<'g, S> {
        let x = self.value();
        let y = Arc::new(
            Tensor::new(x.shape(), x.data().iter().map(|&v| f(v)).collect()).expect("map"),
        );
        let yc = Arc::clone(&y);
        self.graph.push_arc(
            y,
            &[self],
            Box::new(move |g, _| {
                let d = g
                    .data()
                    .iter()
                    .zip(x.data().iter().zip(yc.data()))
                    .map(|(&gv, (&xv, &yv))| gv * df(xv, yv))
                    .collect();
                vec![Some(Tensor::new(g.shape(), d).expect("map grad"))]
            }),
        )
    }

    /// `x · sigmoid(x)`.
    pub fn silu(self) -> Var<'g, S> {
        self.map(
            |x| x / (S::one() + (-x).exp()),
            |x, _| {
                let s = S::one() / (S::one() + (-x).exp());
                s * (S::one() + x * (S::one() - s))
            },
        )
    }

    /// GELU, tanh approximation.
    pub fn gelu(self) -> Var<'g, S> {
        let c = S::of((2.0 / std::f64::consts::PI).sqrt());
        let k = S::of(0.044715);
        let half = S::of(0.5);
        let three = S::of(3.0);
        self.map(
            move |x| half * x * (S::one() + (c * (x + k * x * x * x)).tanh()),
            move |x, _| {
                let t = (c * (x + k * x * x * x)).tanh();
                half * (S::one() + t) + half * x * (S::one() - t * t) * c * (S::one() + three * k * x * x)
            },
        )
    }

    pub fn sigmoid(self) -> Var<'g, S> {
        self.map(
            |x| S::one() / (S::one() + (-x).exp()),
            |_, y| y * (S::one() - y),
        )
    }

    pub fn tanh(self) -> Var<'g, S> {
        self.map(|x| x.tanh(), |_, y| S::one() - y * y)
    }

    pub fn exp(self) -> Var<'g, S> {
        self.map(|x| x.exp(), |_, y| y)
    }

    /// Copy of the value with no gradient path (stop-gradient).
    pub fn detach(self) -> Var<'g, S> {
        self.graph.constant((*self.value()).clone())
    }

    /// Forward value of `quantized`; gradient flows to `self` unchanged (straight-through).
    pub fn straight_through(self, quantized: Var<'g, S>) -> Result<Var<'g, S>> {
        let (z, q) = (self.value(), quantized.value());
        if z.shape() != q.shape() {
            return Err(shape_err!(
                "straight-through shapes differ: {:?} vs {:?}",
                z.shape(),
                q.shape()
            ));
        }
        Ok(self.graph.push(
            (*q).clone(),
            &[self, quantized],
            Box::new(|g, need| vec![need[0].then(|| g.clone()), None]),
        ))
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'g, S>> {
        let x = self.value();
        let src = x.shape().to_vec();
        let out = (*x).clone().reshape(shape)?;
        Ok(self.graph.push(
            out,
            &[self],
            Box::new(move |g, _| vec![Some(g.clone().reshape(&src).expect("reshape grad"))]),
        ))
    }

    /// Reorders axes: output axis `i` is input axis `axes[i]`.
    pub fn permute(self, axes: &[usize]) -> Result<Var<'g, S>> {
        let x = self.value();
        let r = x.rank();
        let mut seen = vec![false; r];
        if axes.len() != r || axes.iter().any(|&a| a >= r || std::mem::replace(&mut seen[a], true)) {
            return Err(shape_err!("invalid permutation {axes:?} for rank {r}"));
        }
        let out = permute_tensor(&x, axes);
        let mut inverse = vec![0; r];
        for (i, &a) in axes.iter().enumerate() {
            inverse[a] = i;
        }
        Ok(self.graph.push(
            out,
            &[self],
            Box::new(move |g, _| vec![Some(permute_tensor(g, &inverse))]),
        ))
    }

    /// Swaps two axes.
    pub fn transpose(self, a: usize, b: usize) -> Result<Var<'g, S>> {
        let r = self.value().rank();
        if a >= r || b >= r {
            return Err(shape_err!("transpose axes ({a}, {b}) out of range for rank {r}"));
        }
        let mut axes: Vec<usize> = (0..r).collect();
        axes.swap(a, b);
        self.permute(&axes)
    }

    /// Contiguous slice `[start, start + len)` along `axis`.
    pub fn narrow(self, axis: usize, start: usize, len: usize) -> Result<Var<'g, S>> {
        let x = self.value();
        let shape = x.shape().to_vec();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(shape_err!(
                "narrow(axis={axis}, start={start}, len={len}) out of range for {shape:?}"
            ));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let full = shape[axis];
        let mut out_shape = shape.clone();
        out_shape[axis] = len;
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * full + start) * inner;
            data.extend_from_slice(&x.data()[base..base + len * inner]);
        }
        let out = Tensor::new(&out_shape, data)?;
        Ok(self.graph.push(
            out,
            &[self],
            Box::new(move |g, _| {
                let mut d = vec![S::zero(); outer * full * inner];
                for o in 0..outer {
                    let base = (o * full + start) * inner;
                    d[base..base + len * inner]
                        .copy_from_slice(&g.data()[o * len * inner..(o + 1) * len * inner]);
                }
                vec![Some(Tensor::new(&shape, d).expect("narrow grad"))]
            }),
        ))
    }

    /// Sum of all elements.
    pub fn sum(self) -> Var<'g, S> {
        let x = self.value();
        let shape = x.shape().to_vec();
        let total = x.data().iter().copied().sum::<S>();
        self.graph.push(
            Tensor::scalar(total),
            &[self],
            Box::new(move |g, _| vec![Some(Tensor::full(&shape, g.item()))]),
        )
    }

    /// Mean of all elements.
    pub fn mean(self) -> Var<'g, S> {
        let n = self.value().numel().max(1);
        self.sum().scale(1.0 / n as f64)
    }

    /// Sum along one axis, keeping it with extent 1.
    pub fn sum_axis(self, axis: usize) -> Result<Var<'g, S>> {
        let x = self.value();
        let shape = x.shape().to_vec();
        if axis >= shape.len() {
            return Err(shape_err!("sum_axis({axis}) out of range for {shape:?}"));
        }
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let mut out_shape = shape.clone();
        out_shape[axis] = 1;
        let mut data = vec![S::zero(); outer * inner];
        for o in 0..outer {
            for l in 0..len {
                let src = &x.data()[(o * len + l) * inner..(o * len + l + 1) * inner];
                for (d, &s) in data[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *d += s;
                }
            }
        }
        let out = Tensor::new(&out_shape, data)?;
        Ok(self.graph.push(
            out,
            &[self],
            Box::new(move |g, _| {
                let zero = Tensor::zeros(&shape);
                vec![Some(zip_broadcast(&zero, g, &shape, |_, y| y))]
            }),
        ))
    }
}

/// Concatenates along `axis`; all other extents must agree.
pub fn concat<'g, S: Scalar>(parts: &[Var<'g, S>], axis: usize) -> Result<Var<'g, S>> {
    let first = parts
        .first()
        .ok_or_else(|| shape_err!("concat of zero tensors"))?;
    let values: Vec<_> = parts.iter().map(|p| p.value()).collect();
    let base = values[0].shape().to_vec();
    if axis >= base.len() {
        return Err(shape_err!("concat axis {axis} out of range for {base:?}"));
    }
    for v in &values {
        let s = v.shape();
        if s.len() != base.len()
            || s.iter()
                .zip(&base)
                .enumerate()
                .any(|(i, (a, b))| i != axis && a != b)
        {
            return Err(shape_err!("concat extents disagree: {:?} vs {:?}", base, s));
        }
    }
    let outer: usize = base[..axis].iter().product();
    let inner: usize = base[axis + 1..].iter().product();
    let lens: Vec<usize> = values.iter().map(|v| v.shape()[axis]).collect();
    let total: usize = lens.iter().sum();
    let mut out_shape = base.clone();
    out_shape[axis] = total;
    let mut data = Vec::with_capacity(outer * total * inner);
    for o in 0..outer {
        for (v, &l) in values.iter().zip(&lens) {
            data.extend_from_slice(&v.data()[o * l * inner..(o + 1) * l * inner]);
        }
    }
    let out = Tensor::new(&out_shape, data)?;
    let shapes: Vec<Vec<usize>> = values.iter().map(|v| v.shape().to_vec()).collect();
    Ok(first.graph.push(
        out,
        parts,
        Box::new(move |g, need| {
            let mut grads: Vec<Vec<S>> = lens
                .iter()
                .map(|&l| Vec::with_capacity(outer * l * inner))
                .collect();
            let gd = g.data();
            let mut off = 0;
            for _ in 0..outer {
                for (gi, &l) in grads.iter_mut().zip(&lens) {
                    gi.extend_from_slice(&gd[off..off + l * inner]);
                    off += l * inner;
                }
            }
            grads
                .into_iter()
                .zip(&shapes)
                .zip(need)
                .map(|((d, s), &n)| n.then(|| Tensor::new(s, d).expect("concat grad")))
                .collect()
        }),
    ))
}

pub(crate) fn permute_tensor<S: Scalar>(x: &Tensor<S>, axes: &[usize]) -> Tensor<S> {
    let shape = x.shape();
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let in_strides = strides(shape);
    let src_strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let zeros = vec![0; out_shape.len()];
    let xd = x.data();
    let mut data = Vec::with_capacity(x.numel());
    for_each_broadcast(&out_shape, &src_strides, &zeros, |i, _| data.push(xd[i]));
    Tensor::new(&out_shape, data).expect("permute")
}

#[cfg(test)]
mod tests {
    use super::super::Graph;
    use super::*;

    #[test]
    fn broadcast_add_and_grad_reduction() {
        let g = Graph::<f64>::new();
        let x = g.leaf(Tensor::from_f64(&[2, 3], &[1., 2., 3., 4., 5., 6.]).unwrap());
        let b = g.leaf(Tensor::from_f64(&[3], &[10., 20., 30.]).unwrap());
        let y = x.add(b).unwrap();
        assert_eq!(y.value().data(), &[11., 22., 33., 14., 25., 36.]);
        let grads = g.backward(y.sum()).unwrap();
        assert_eq!(grads.wrt(b).unwrap().data(), &[2., 2., 2.]);
        assert_eq!(grads.wrt(x).unwrap().data(), &[1.; 6]);
    }

    #[test]
    fn middle_axis_broadcast() {
        let g = Graph::<f64>::new();
        let x = g.leaf(Tensor::from_f64(&[2, 2, 2], &[1., 2., 3., 4., 5., 6., 7., 8.]).unwrap());
        let s = g.leaf(Tensor::from_f64(&[2, 1, 2], &[1., 10., 100., 1000.]).unwrap());
        let y = x.mul(s).unwrap();
        assert_eq!(
            y.value().data(),
            &[1., 20., 3., 40., 500., 6000., 700., 8000.]
        );
        let grads = g.backward(y.sum()).unwrap();
        assert_eq!(grads.wrt(s).unwrap().data(), &[4., 6., 12., 14.]);
    }

    #[test]
    fn incompatible_broadcast_is_rejected() {
        let g = Graph::<f32>::new();
        let a = g.leaf(Tensor::zeros(&[2, 3]));
        let b = g.leaf(Tensor::zeros(&[2]));
        assert!(a.add(b).is_err());
    }

    #[test]
    fn permute_roundtrip_and_values() {
        let g = Graph::<f32>::new();
        let x = g.leaf(Tensor::new(&[2, 3], (0..6).map(|v| v as f32).collect()).unwrap());
        let t = x.transpose(0, 1).unwrap();
        assert_eq!(t.shape(), vec![3, 2]);
        assert_eq!(t.value().data(), &[0., 3., 1., 4., 2., 5.]);
        let back = t.transpose(0, 1).unwrap();
        assert_eq!(back.value().data(), x.value().data());
    }

    #[test]
    fn concat_and_narrow_are_inverse() {
        let g = Graph::<f32>::new();
        let a = g.leaf(Tensor::new(&[2, 1, 2], vec![1., 2., 3., 4.]).unwrap());
        let b = g.leaf(Tensor::new(&[2, 2, 2], vec![5., 6., 7., 8., 9., 10., 11., 12.]).unwrap());
        let c = concat(&[a, b], 1).unwrap();
        assert_eq!(c.shape(), vec![2, 3, 2]);
        assert_eq!(
            c.value().data(),
            &[1., 2., 5., 6., 7., 8., 3., 4., 9., 10., 11., 12.]
        );
        let back = c.narrow(1, 1, 2).unwrap();
        assert_eq!(back.value().data(), b.value().data());
    }

    #[test]
    fn straight_through_passes_gradient_to_input_only() {
        let g = Graph::<f64>::new();
        let z = g.leaf(Tensor::from_f64(&[2], &[0.3, 0.7]).unwrap());
        let q = g.leaf(Tensor::from_f64(&[2], &[0.0, 1.0]).unwrap());
        let y = z.straight_through(q).unwrap();
        assert_eq!(y.value().data(), &[0.0, 1.0]);
        let loss = y.mul(y).unwrap().sum();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.wrt(z).unwrap().data(), &[0.0, 2.0]);
        assert!(grads.wrt(q).is_none());
    }
}
