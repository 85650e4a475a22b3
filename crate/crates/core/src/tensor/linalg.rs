use super::{Tensor, Var};
use crate::error::{shape_err, Result};
use crate::scalar::{gemm, Layout, Scalar};

impl<'g, S: Scalar> Var<'g, S> {
    /// `a[..., k] · b[k, n] -> [..., n]`; leading axes of `a` are flattened into rows.
    pub fn matmul(self, rhs: Var<'g, S>) -> Result<Var<'g, S>> {
        let (a, b) = (self.value(), rhs.value());
        let (sa, sb) = (a.shape().to_vec(), b.shape().to_vec());
        if sa.is_empty() || sb.len() != 2 || sa[sa.len() - 1] != sb[0] {
            return Err(shape_err!("matmul: incompatible shapes {sa:?} and {sb:?}"));
        }
        let k = sb[0];
        let n = sb[1];
        let m = a.numel() / k.max(1);
        let mut out_shape = sa.clone();
        *out_shape.last_mut().expect("rank >= 1") = n;
        let mut c = vec![S::zero(); m * n];
        gemm(m, k, n, S::one(), a.data(), Layout::N, b.data(), Layout::N, S::zero(), &mut c);
        let out = Tensor::new(&out_shape, c)?;
        Ok(self.graph.push(
            out,
            &[self, rhs],
            Box::new(move |g, need| {
                let ga = need[0].then(|| {
                    let mut d = vec![S::zero(); m * k];
                    gemm(m, n, k, S::one(), g.data(), Layout::N, b.data(), Layout::T, S::zero(), &mut d);
                    Tensor::new(&sa, d).expect("matmul grad a")
                });
                let gb = need[1].then(|| {
                    let mut d = vec![S::zero(); k * n];
                    gemm(k, m, n, S::one(), a.data(), Layout::T, g.data(), Layout::N, S::zero(), &mut d);
                    Tensor::new(&sb, d).expect("matmul grad b")
                });
                vec![ga, gb]
            }),
        ))
    }

    /// Batched product `a[G, m, k] · b[G, k, n]`, or `a · bᵀ` with `b[G, n, k]` when `transpose_rhs`.
    pub fn bmm(self, rhs: Var<'g, S>, transpose_rhs: bool) -> Result<Var<'g, S>> {
        let (a, b) = (self.value(), rhs.value());
        let (sa, sb) = (a.shape().to_vec(), b.shape().to_vec());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return Err(shape_err!("bmm: incompatible shapes {sa:?} and {sb:?}"));
        }
        let (groups, m, k) = (sa[0], sa[1], sa[2]);
        let (kb, n) = if transpose_rhs { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
        if kb != k {
            return Err(shape_err!(
                "bmm: inner extents differ ({k} vs {kb}) for {sa:?} and {sb:?} (transpose_rhs={transpose_rhs})"
            ));
        }
        let lb = if transpose_rhs { Layout::T } else { Layout::N };
        let mut c = vec![S::zero(); groups * m * n];
        for gi in 0..groups {
            gemm(
                m,
                k,
                n,
                S::one(),
                &a.data()[gi * m * k..],
                Layout::N,
                &b.data()[gi * k * n..],
                lb,
                S::zero(),
                &mut c[gi * m * n..(gi + 1) * m * n],
            );
        }
        let out = Tensor::new(&[groups, m, n], c)?;
        Ok(self.graph.push(
            out,
            &[self, rhs],
            Box::new(move |g, need| {
                let gd = g.data();
                let ga = need[0].then(|| {
                    // dA = G · op(B)ᵀ
                    let mut d = vec![S::zero(); groups * m * k];
                    let lbt = if transpose_rhs { Layout::N } else { Layout::T };
                    for gi in 0..groups {
                        gemm(
                            m,
                            n,
                            k,
                            S::one(),
                            &gd[gi * m * n..],
                            Layout::N,
                            &b.data()[gi * k * n..],
                            lbt,
                            S::zero(),
                            &mut d[gi * m * k..(gi + 1) * m * k],
                        );
                    }
                    Tensor::new(&sa, d).expect("bmm grad a")
                });
                let gb = need[1].then(|| {
                    let mut d = vec![S::zero(); groups * k * n];
                    for gi in 0..groups {
                        let out = &mut d[gi * k * n..(gi + 1) * k * n];
                        if transpose_rhs {
                            // dB[n×k] = Gᵀ · A
                            gemm(n, m, k, S::one(), &gd[gi * m * n..], Layout::T, &a.data()[gi * m * k..], Layout::N, S::zero(), out);
                        } else {
                            // dB[k×n] = Aᵀ · G
                            gemm(k, m, n, S::one(), &a.data()[gi * m * k..], Layout::T, &gd[gi * m * n..], Layout::N, S::zero(), out);
                        }
                    }
                    Tensor::new(&sb, d).expect("bmm grad b")
                });
                vec![ga, gb]
            }),
        ))
    }

    /// `x · w + b` with `w[in, out]` and optional `b[out]`.
    pub fn linear(self, w: Var<'g, S>, b: Option<Var<'g, S>>) -> Result<Var<'g, S>> {
        let y = self.matmul(w)?;
        match b {
            Some(b) => y.add(b),
            None => Ok(y),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::super::Graph;
    use super::*;

    #[test]
    fn identity_times_matrix() {
        let g = Graph::<f32>::new();
        let i = g.leaf(Tensor::new(&[2, 2], vec![1., 0., 0., 1.]).unwrap());
        let m = g.leaf(Tensor::new(&[2, 2], vec![1., 2., 3., 4.]).unwrap());
        assert_eq!(i.matmul(m).unwrap().value().data(), &[1., 2., 3., 4.]);
    }

    #[test]
    fn row_times_column() {
        let g = Graph::<f32>::new();
        let a = g.leaf(Tensor::new(&[1, 2], vec![1., 2.]).unwrap());
        let b = g.leaf(Tensor::new(&[2, 1], vec![3., 4.]).unwrap());
        let c = a.matmul(b).unwrap();
        assert_eq!(c.shape(), vec![1, 1]);
        assert_eq!(c.value().data(), &[11.]);
    }

    #[test]
    fn shape_mismatch_names_both_shapes() {
        let g = Graph::<f32>::new();
        let a = g.leaf(Tensor::zeros(&[2, 3]));
        let b = g.leaf(Tensor::zeros(&[2, 3]));
        let msg = a.matmul(b).unwrap_err().to_string();
        assert!(msg.contains("[2, 3]") && msg.matches("[2, 3]").count() == 2, "{msg}");
    }

    #[test]
    fn grad_of_sum_wrt_lhs_is_row_sums_of_rhs() {
        let g = Graph::<f64>::new();
        let a = g.leaf(Tensor::from_f64(&[2, 2], &[1., 2., 3., 4.]).unwrap());
        let b = g.leaf(Tensor::from_f64(&[2, 3], &[1., 2., 3., 4., 5., 6.]).unwrap());
        let grads = g.backward(a.matmul(b).unwrap().sum()).unwrap();
        // d/da_ij sum(AB) = sum_n b_jn
        assert_eq!(grads.wrt(a).unwrap().data(), &[6., 15., 6., 15.]);
        // d/db_jn = sum_i a_ij
        assert_eq!(grads.wrt(b).unwrap().data(), &[4., 4., 4., 6., 6., 6.]);
    }

    #[test]
    fn bmm_transposed_matches_explicit_transpose() {
        let g = Graph::<f64>::new();
        let a = g.leaf(Tensor::new(&[2, 2, 3], (0..12).map(|v| v as f64 * 0.5).collect()).unwrap());
        let b = g.leaf(Tensor::new(&[2, 4, 3], (0..24).map(|v| (v as f64).sin()).collect()).unwrap());
        let direct = a.bmm(b, true).unwrap();
        let bt = b.permute(&[0, 2, 1]).unwrap();
        let explicit = a.bmm(bt, false).unwrap();
        assert!(direct.value().max_abs_diff(&explicit.value()) < 1e-12);
    }
}
