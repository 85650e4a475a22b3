//! Neural-network primitives with fused backward rules.

use std::sync::Arc;

use super::{Tensor, Var};
use crate::error::{invalid, shape_err, Error, Result};
use crate::scalar::Scalar;

/// Numerically stable softmax of one contiguous row, in place.
pub fn softmax_slice<S: Scalar>(row: &mut [S]) {
    let max = row.iter().copied().fold(S::neg_infinity(), S::max);
    let mut total = S::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

/// `cos`/`sin` tables of shape `[positions.len(), head_dim / 2]` for rotary embeddings.
///
/// Pair `i` at position `p` is rotated by `p · base^(-2i / head_dim)`.
pub fn rope_tables(positions: &[usize], head_dim: usize, base: f64) -> Result<(Vec<f64>, Vec<f64>)> {
    if head_dim % 2 != 0 || head_dim == 0 {
        return Err(invalid!("rotary head dimension must be even and positive, got {head_dim}"));
    }
    let half = head_dim / 2;
    let mut cos = Vec::with_capacity(positions.len() * half);
    let mut sin = Vec::with_capacity(positions.len() * half);
    for &p in positions {
        for i in 0..half {
            let theta = p as f64 * base.powf(-2.0 * i as f64 / head_dim as f64);
            cos.push(theta.cos());
            sin.push(theta.sin());
        }
    }
    Ok((cos, sin))
}

fn rotate_pairs<S: Scalar>(x: &[S], cos: &[S], sin: &[S], seq: usize, dim: usize, inverse: bool) -> Vec<S> {
    let half = dim / 2;
    let mut out = vec![S::zero(); x.len()];
    for (row, (src, dst)) in x.chunks_exact(dim).zip(out.chunks_exact_mut(dim)).enumerate() {
        let p = row % seq;
        for i in 0..half {
            let (c, s) = (cos[p * half + i], sin[p * half + i]);
            let s = if inverse { -s } else { s };
            let (a, b) = (src[2 * i], src[2 * i + 1]);
            dst[2 * i] = a * c - b * s;
            dst[2 * i + 1] = a * s + b * c;
        }
    }
    out
}

fn check_finite<S: Scalar>(t: &Tensor<S>, what: &str) -> Result<()> {
    if t.all_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite(format!("{what} input contains NaN or infinity")))
    }
}

impl<'g, S: Scalar> Var<'g, S> {
    /// Softmax along `axis`, computed with max-subtraction.
    pub fn softmax(self, axis: usize) -> Result<Var<'g, S>> {
        let x = self.value();
        let shape = x.shape().to_vec();
        if axis >= shape.len() {
            return Err(shape_err!("softmax axis {axis} out of range for {shape:?}"));
        }
        check_finite(&x, "softmax")?;
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let mut y = x.data().to_vec();
        if inner == 1 {
            for row in y.chunks_exact_mut(len.max(1)) {
                softmax_slice(row);
            }
        } else {
            let mut buf = vec![S::zero(); len];
            for o in 0..outer {
                for i in 0..inner {
                    for l in 0..len {
                        buf[l] = y[(o * len + l) * inner + i];
                    }
                    softmax_slice(&mut buf);
                    for l in 0..len {
                        y[(o * len + l) * inner + i] = buf[l];
                    }
                }
            }
        }
        let y = Arc::new(Tensor::new(&shape, y)?);
        let yc = Arc::clone(&y);
        Ok(self.graph.push_arc(
            y,
            &[self],
            Box::new(move |g, _| {
                let (yd, gd) = (yc.data(), g.data());
                let mut d = vec![S::zero(); yd.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let mut dot = S::zero();
                        for l in 0..len {
                            let k = (o * len + l) * inner + i;
                            dot += gd[k] * yd[k];
                        }
                        for l in 0..len {
                            let k = (o * len + l) * inner + i;
                            d[k] = yd[k] * (gd[k] - dot);
                        }
                    }
                }
                vec![Some(Tensor::new(&shape, d).expect("softmax grad"))]
            }),
        ))
    }

    /// Normalization to zero mean and unit variance over the last axis (no affine terms).
    pub fn layer_norm(self, eps: f64) -> Result<Var<'g, S>> {
        let x = self.value();
        let shape = x.shape().to_vec();
        let dim = *shape.last().ok_or_else(|| shape_err!("layer_norm on a scalar"))?;
        let eps = S::of(eps);
        let inv_n = S::one() / S::of(dim as f64);
        let rows = x.numel() / dim.max(1);
        let mut xhat = vec![S::zero(); x.numel()];
        let mut rstd = vec![S::zero(); rows];
        for (r, (src, dst)) in x.data().chunks_exact(dim).zip(xhat.chunks_exact_mut(dim)).enumerate() {
            let mean = src.iter().copied().sum::<S>() * inv_n;
            let var = src.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() * inv_n;
            let rs = S::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for (d, &s) in dst.iter_mut().zip(src) {
                *d = (s - mean) * rs;
            }
        }
        let y = Arc::new(Tensor::new(&shape, xhat)?);
        let yc = Arc::clone(&y);
        Ok(self.graph.push_arc(
            y,
            &[self],
            Box::new(move |g, _| {
                let mut d = vec![S::zero(); g.numel()];
                for (r, ((gr, xr), dr)) in g
                    .data()
                    .chunks_exact(dim)
                    .zip(yc.data().chunks_exact(dim))
                    .zip(d.chunks_exact_mut(dim))
                    .enumerate()
                {
                    let mg = gr.iter().copied().sum::<S>() * inv_n;
                    let mgx = gr.iter().zip(xr).map(|(&a, &b)| a * b).sum::<S>() * inv_n;
                    for ((o, &gv), &xv) in dr.iter_mut().zip(gr).zip(xr) {
                        *o = rstd[r] * (gv - mg - xv * mgx);
                    }
                }
                vec![Some(Tensor::new(&shape, d).expect("layer_norm grad"))]
            }),
        ))
    }

    /// `gain ⊙ x / sqrt(mean(x²) + eps)` over the last axis.
    pub fn rms_norm(self, gain: Var<'g, S>, eps: f64) -> Result<Var<'g, S>> {
        let (x, w) = (self.value(), gain.value());
        let shape = x.shape().to_vec();
        let dim = *shape.last().ok_or_else(|| shape_err!("rms_norm on a scalar"))?;
        if w.shape() != [dim] {
            return Err(shape_err!(
                "rms_norm gain shape {:?} does not match last axis of {:?}",
                w.shape(),
                shape
            ));
        }
        let eps = S::of(eps);
        let inv_n = S::one() / S::of(dim as f64);
        let rows = x.numel() / dim.max(1);
        let mut xn = vec![S::zero(); x.numel()];
        let mut rstd = vec![S::zero(); rows];
        for (r, (src, dst)) in x.data().chunks_exact(dim).zip(xn.chunks_exact_mut(dim)).enumerate() {
            let ms = src.iter().map(|&v| v * v).sum::<S>() * inv_n;
            let rs = S::one() / (ms + eps).sqrt();
            rstd[r] = rs;
            for (d, &s) in dst.iter_mut().zip(src) {
                *d = s * rs;
            }
        }
        let mut y = xn.clone();
        for row in y.chunks_exact_mut(dim) {
            for (v, &gw) in row.iter_mut().zip(w.data()) {
                *v *= gw;
            }
        }
        let out = Tensor::new(&shape, y)?;
        Ok(self.graph.push(
            out,
            &[self, gain],
            Box::new(move |g, need| {
                let wd = w.data();
                let dx = need[0].then(|| {
                    let mut d = vec![S::zero(); g.numel()];
                    for (r, ((gr, xr), dr)) in g
                        .data()
                        .chunks_exact(dim)
                        .zip(xn.chunks_exact(dim))
                        .zip(d.chunks_exact_mut(dim))
                        .enumerate()
                    {
                        let m = gr
                            .iter()
                            .zip(xr)
                            .zip(wd)
                            .map(|((&gv, &xv), &wv)| gv * wv * xv)
                            .sum::<S>()
                            * inv_n;
                        for (((o, &gv), &xv), &wv) in dr.iter_mut().zip(gr).zip(xr).zip(wd) {
                            *o = rstd[r] * (gv * wv - xv * m);
                        }
                    }
                    Tensor::new(&shape, d).expect("rms grad x")
                });
                let dw = need[1].then(|| {
                    let mut d = vec![S::zero(); dim];
                    for (gr, xr) in g.data().chunks_exact(dim).zip(xn.chunks_exact(dim)) {
                        for ((o, &gv), &xv) in d.iter_mut().zip(gr).zip(xr) {
                            *o += gv * xv;
                        }
                    }
                    Tensor::new(&[dim], d).expect("rms grad gain")
                });
                vec![dx, dw]
            }),
        ))
    }

    /// Row lookup `table[ids]` with scatter-add backward; `self` is a `[rows, dim]` table.
    pub fn embedding(self, ids: &[usize]) -> Result<Var<'g, S>> {
        let t = self.value();
        let shape = t.shape().to_vec();
        if shape.len() != 2 {
            return Err(shape_err!("embedding table must be 2-D, got {shape:?}"));
        }
        let (rows, dim) = (shape[0], shape[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= rows) {
            return Err(invalid!("embedding index {bad} out of range for {rows} rows"));
        }
        let mut data = Vec::with_capacity(ids.len() * dim);
        for &i in ids {
            data.extend_from_slice(&t.data()[i * dim..(i + 1) * dim]);
        }
        let out = Tensor::new(&[ids.len(), dim], data)?;
        let ids = ids.to_vec();
        Ok(self.graph.push(
            out,
            &[self],
            Box::new(move |g, _| {
                let mut d = vec![S::zero(); rows * dim];
                for (k, &i) in ids.iter().enumerate() {
                    for (o, &gv) in d[i * dim..(i + 1) * dim]
                        .iter_mut()
                        .zip(&g.data()[k * dim..(k + 1) * dim])
                    {
                        *o += gv;
                    }
                }
                vec![Some(Tensor::new(&shape, d).expect("embedding grad"))]
            }),
        ))
    }

    /// Mean cross-entropy from `[rows, classes]` logits over rows where `mask` is true.
    pub fn cross_entropy_masked(self, targets: &[usize], mask: &[bool]) -> Result<Var<'g, S>> {
        let x = self.value();
        let shape = x.shape().to_vec();
        if shape.len() != 2 || targets.len() != shape[0] || mask.len() != shape[0] {
            return Err(shape_err!(
                "cross_entropy: logits {shape:?} with {} targets and {} mask flags",
                targets.len(),
                mask.len()
            ));
        }
        let classes = shape[1];
        if let Some(&bad) = targets.iter().zip(mask).filter(|(_, &m)| m).map(|(t, _)| t).find(|&&t| t >= classes) {
            return Err(invalid!("target class {bad} out of range for {classes} classes"));
        }
        let count = mask.iter().filter(|&&m| m).count();
        if count == 0 {
            return Err(invalid!("cross_entropy needs at least one masked row"));
        }
        check_finite(&x, "cross_entropy")?;
        let mut total = S::zero();
        let mut probs: Vec<(usize, Vec<S>)> = Vec::with_capacity(count);
        for (r, row) in x.data().chunks_exact(classes).enumerate() {
            if !mask[r] {
                continue;
            }
            let mut p = row.to_vec();
            let max = p.iter().copied().fold(S::neg_infinity(), S::max);
            let lse = p.iter().map(|&v| (v - max).exp()).sum::<S>().ln() + max;
            total += lse - row[targets[r]];
            softmax_slice(&mut p);
            probs.push((r, p));
        }
        let inv = S::one() / S::of(count as f64);
        let targets = targets.to_vec();
        Ok(self.graph.push(
            Tensor::scalar(total * inv),
            &[self],
            Box::new(move |g, _| {
                let scale = g.item() * inv;
                let mut d = vec![S::zero(); shape[0] * classes];
                for (r, p) in &probs {
                    let dst = &mut d[r * classes..(r + 1) * classes];
                    for (o, &pv) in dst.iter_mut().zip(p) {
                        *o = pv * scale;
                    }
                    dst[targets[*r]] -= scale;
                }
                vec![Some(Tensor::new(&shape, d).expect("ce grad"))]
            }),
        ))
    }

    /// Rotary position embedding over `[..., seq, head_dim]`; `positions` has one entry per `seq` row.
    pub fn rope(self, positions: &[usize], base: f64) -> Result<Var<'g, S>> {
        let x = self.value();
        let shape = x.shape().to_vec();
        if shape.len() < 2 {
            return Err(shape_err!("rope needs [..., seq, dim], got {shape:?}"));
        }
        let dim = shape[shape.len() - 1];
        let seq = shape[shape.len() - 2];
        if positions.len() != seq {
            return Err(shape_err!(
                "rope: {} positions for sequence length {seq}",
                positions.len()
            ));
        }
        let (cos, sin) = rope_tables(positions, dim, base)?;
        let cos: Vec<S> = cos.into_iter().map(S::of).collect();
        let sin: Vec<S> = sin.into_iter().map(S::of).collect();
        let out = Tensor::new(&shape, rotate_pairs(x.data(), &cos, &sin, seq, dim, false))?;
        Ok(self.graph.push(
            out,
            &[self],
            Box::new(move |g, _| {
                let d = rotate_pairs(g.data(), &cos, &sin, seq, dim, true);
                vec![Some(Tensor::new(&shape, d).expect("rope grad"))]
            }),
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::super::Graph;
    use super::*;

    #[test]
    fn softmax_symmetric_and_stable() {
        let g = Graph::<f32>::new();
        let x = g.leaf(Tensor::new(&[2], vec![0., 0.]).unwrap());
        assert_eq!(x.softmax(0).unwrap().value().data(), &[0.5, 0.5]);
        let x = g.leaf(Tensor::new(&[2], vec![1000., 0.]).unwrap());
        let y = x.softmax(0).unwrap().value();
        assert_eq!(y.data()[0], 1.0);
        assert_eq!(y.data()[1], 0.0);
    }

    #[test]
    fn softmax_matches_direct_f64_evaluation() {
        let g = Graph::<f32>::new();
        let x = g.leaf(Tensor::new(&[3], vec![1., 2., 3.]).unwrap());
        let y = x.softmax(0).unwrap().value();
        let z: f64 = (1..=3).map(|v| (v as f64).exp()).sum();
        for (i, &v) in y.data().iter().enumerate() {
            let want = ((i + 1) as f64).exp() / z;
            assert!((v as f64 - want).abs() < 1e-7, "{v} vs {want}");
        }
    }

    #[test]
    fn softmax_on_inner_axis() {
        let g = Graph::<f64>::new();
        let x = g.leaf(Tensor::from_f64(&[2, 3], &[0., 1., 2., 3., 4., 5.]).unwrap());
        let y = x.softmax(0).unwrap().value();
        for c in 0..3 {
            let s = y.data()[c] + y.data()[3 + c];
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_rejects_non_finite() {
        let g = Graph::<f32>::new();
        let x = g.leaf(Tensor::new(&[2], vec![f32::NAN, 0.]).unwrap());
        assert!(matches!(x.softmax(0), Err(Error::NonFinite(_))));
    }

    #[test]
    fn rms_norm_direct_formula() {
        let g = Graph::<f64>::new();
        let x = g.leaf(Tensor::from_f64(&[2], &[3., 4.]).unwrap());
        let w = g.leaf(Tensor::ones(&[2]));
        let y = x.rms_norm(w, 0.0).unwrap().value();
        let r = 12.5f64.sqrt();
        assert!((y.data()[0] - 3.0 / r).abs() < 1e-15);
        assert!((y.data()[1] - 4.0 / r).abs() < 1e-15);

        let z = g.leaf(Tensor::zeros(&[4]));
        let w = g.leaf(Tensor::ones(&[4]));
        assert_eq!(z.rms_norm(w, 1e-6).unwrap().value().data(), &[0.0; 4]);
    }

    #[test]
    fn rms_norm_rejects_gain_mismatch() {
        let g = Graph::<f32>::new();
        let x = g.leaf(Tensor::zeros(&[2, 4]));
        let w = g.leaf(Tensor::ones(&[3]));
        assert!(x.rms_norm(w, 1e-6).is_err());
    }

    #[test]
    fn layer_norm_zero_mean_unit_variance() {
        let g = Graph::<f64>::new();
        let x = g.leaf(Tensor::from_f64(&[1, 4], &[1., 2., 3., 10.]).unwrap());
        let y = x.layer_norm(0.0).unwrap().value();
        let mean: f64 = y.data().iter().sum::<f64>() / 4.0;
        let var: f64 = y.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 4.0;
        assert!(mean.abs() < 1e-12 && (var - 1.0).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_uniform_and_confident() {
        let g = Graph::<f64>::new();
        let x = g.leaf(Tensor::zeros(&[3, 256]));
        let ce = x.cross_entropy_masked(&[1, 2, 3], &[true, false, true]).unwrap();
        assert!((ce.item() - 256f64.ln()).abs() < 1e-12);

        let mut logits = vec![0.0; 4];
        logits[2] = 1000.0;
        let x = g.leaf(Tensor::from_f64(&[1, 4], &logits).unwrap());
        assert!(x.cross_entropy_masked(&[2], &[true]).unwrap().item() < 1e-6);

        let x = g.leaf(Tensor::zeros(&[2, 4]));
        assert!(x.cross_entropy_masked(&[0, 0], &[false, false]).is_err());
    }

    #[test]
    fn embedding_scatter_adds() {
        let g = Graph::<f64>::new();
        let t = g.leaf(Tensor::from_f64(&[3, 2], &[0., 1., 2., 3., 4., 5.]).unwrap());
        let e = t.embedding(&[2, 0, 2]).unwrap();
        assert_eq!(e.value().data(), &[4., 5., 0., 1., 4., 5.]);
        let grads = g.backward(e.sum()).unwrap();
        assert_eq!(grads.wrt(t).unwrap().data(), &[1., 1., 0., 0., 2., 2.]);
        assert!(t.embedding(&[3]).is_err());
    }

    #[test]
    fn rope_rejects_odd_dim() {
        assert!(rope_tables(&[0, 1], 3, 10000.0).is_err());
    }
}
