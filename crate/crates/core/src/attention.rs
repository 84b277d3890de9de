//! Multi-head attention kernels on `[heads, n_tokens, head_dim]` tensors.
//!
//! Two flavours are used by the denoiser:
//!
//! * **linear** (kernelized) attention with feature map `φ(x) = elu(x) + 1`,
//!   evaluated in the associative order `φ(Q)·(φ(K)ᵀ·V)` so the cost grows
//!   linearly with the number of voxels;
//! * **quadratic** softmax attention `softmax(Q·Kᵀ/√d)·V`, used where the token
//!   count is small (the deepest pyramid level).
//!
//! Each kernel has a matching hand-written backward pass that the tape calls.

use crate::error::{Error, Result};
use crate::tensor::{gemm, Scalar, Tensor};

fn check_qkv<T: Scalar>(q: &Tensor<T>, k: &Tensor<T>, v: &Tensor<T>) -> Result<(usize, usize, usize)> {
    if q.shape().len() != 3 || k.shape() != q.shape() || v.shape() != q.shape() {
        return Err(Error::Shape(format!(
            "attention expects matching [heads, tokens, dim] tensors, got q{:?} k{:?} v{:?}",
            q.shape(),
            k.shape(),
            v.shape()
        )));
    }
    let s = q.shape();
    if s[1] == 0 || s[2] == 0 {
        return Err(Error::Shape("attention over an empty token set".into()));
    }
    Ok((s[0], s[1], s[2]))
}

/// `elu(x) + 1`: strictly positive, so the kernelized normaliser never vanishes.
pub fn feature_map<T: Scalar>(x: T) -> T {
    if x > T::zero() {
        x + T::one()
    } else {
        x.exp()
    }
}

fn feature_map_grad<T: Scalar>(x: T) -> T {
    if x > T::zero() {
        T::one()
    } else {
        x.exp()
    }
}

pub fn linear_attention<T: Scalar>(q: &Tensor<T>, k: &Tensor<T>, v: &Tensor<T>) -> Result<Tensor<T>> {
    let (h, n, d) = check_qkv(q, k, v)?;
    let mut out = vec![T::zero(); h * n * d];
    for head in 0..h {
        let range = head * n * d..(head + 1) * n * d;
        let fq: Vec<T> = q.data()[range.clone()].iter().map(|&x| feature_map(x)).collect();
        let fk: Vec<T> = k.data()[range.clone()].iter().map(|&x| feature_map(x)).collect();
        let vh = &v.data()[range.clone()];
        // kv = φ(K)ᵀ V  [d, d];  z = Σ_j φ(k_j)  [d]
        let mut kv = vec![T::zero(); d * d];
        gemm(true, false, d, d, n, T::one(), &fk, vh, T::zero(), &mut kv);
        let z = column_sums(&fk, n, d);
        let o = &mut out[range];
        gemm(false, false, n, d, d, T::one(), &fq, &kv, T::zero(), o);
        for i in 0..n {
            let den: T = (0..d).map(|c| fq[i * d + c] * z[c]).sum();
            for c in 0..d {
                o[i * d + c] /= den;
            }
        }
    }
    Ok(Tensor::new(q.shape().to_vec(), out))
}

/// The same kernelized attention, materialising the full `n×n` weight matrix.
///
/// Quadratic in the token count; kept as the reference the efficient ordering
/// is checked against.
pub fn linear_attention_naive<T: Scalar>(q: &Tensor<T>, k: &Tensor<T>, v: &Tensor<T>) -> Result<Tensor<T>> {
    let (h, n, d) = check_qkv(q, k, v)?;
    let mut out = vec![T::zero(); h * n * d];
    for head in 0..h {
        let base = head * n * d;
        for i in 0..n {
            let mut weights = vec![T::zero(); n];
            for (j, w) in weights.iter_mut().enumerate() {
                *w = (0..d)
                    .map(|c| feature_map(q.data()[base + i * d + c]) * feature_map(k.data()[base + j * d + c]))
                    .sum();
            }
            let total: T = weights.iter().copied().sum();
            for c in 0..d {
                let acc: T = (0..n).map(|j| weights[j] * v.data()[base + j * d + c]).sum();
                out[base + i * d + c] = acc / total;
            }
        }
    }
    Ok(Tensor::new(q.shape().to_vec(), out))
}

fn column_sums<T: Scalar>(m: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut s = vec![T::zero(); cols];
    for r in 0..rows {
        for c in 0..cols {
            s[c] += m[r * cols + c];
        }
    }
    s
}

pub struct AttentionGrads<T> {
    pub dq: Tensor<T>,
    pub dk: Tensor<T>,
    pub dv: Tensor<T>,
}

pub fn linear_attention_backward<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    dout: &Tensor<T>,
) -> Result<AttentionGrads<T>> {
    let (h, n, d) = check_qkv(q, k, v)?;
    let mut dq = vec![T::zero(); h * n * d];
    let mut dk = vec![T::zero(); h * n * d];
    let mut dv = vec![T::zero(); h * n * d];
    for head in 0..h {
        let range = head * n * d..(head + 1) * n * d;
        let qh = &q.data()[range.clone()];
        let kh = &k.data()[range.clone()];
        let vh = &v.data()[range.clone()];
        let go = &dout.data()[range.clone()];
        let fq: Vec<T> = qh.iter().map(|&x| feature_map(x)).collect();
        let fk: Vec<T> = kh.iter().map(|&x| feature_map(x)).collect();
        let mut kv = vec![T::zero(); d * d];
        gemm(true, false, d, d, n, T::one(), &fk, vh, T::zero(), &mut kv);
        let z = column_sums(&fk, n, d);
        let mut num = vec![T::zero(); n * d];
        gemm(false, false, n, d, d, T::one(), &fq, &kv, T::zero(), &mut num);

        // out_i = num_i / den_i
        let mut dnum = vec![T::zero(); n * d];
        let mut dden = vec![T::zero(); n];
        for i in 0..n {
            let den: T = (0..d).map(|c| fq[i * d + c] * z[c]).sum();
            let mut dot = T::zero();
            for c in 0..d {
                dnum[i * d + c] = go[i * d + c] / den;
                dot += go[i * d + c] * num[i * d + c];
            }
            dden[i] = -dot / (den * den);
        }
        // dφq = dnum·kvᵀ + dden ⊗ z
        let mut dfq = vec![T::zero(); n * d];
        gemm(false, true, n, d, d, T::one(), &dnum, &kv, T::zero(), &mut dfq);
        for i in 0..n {
            for c in 0..d {
                dfq[i * d + c] += dden[i] * z[c];
            }
        }
        // dkv = φqᵀ·dnum ; dz = Σ_i dden_i φq_i
        let mut dkv = vec![T::zero(); d * d];
        gemm(true, false, d, d, n, T::one(), &fq, &dnum, T::zero(), &mut dkv);
        let mut dz = vec![T::zero(); d];
        for i in 0..n {
            for c in 0..d {
                dz[c] += dden[i] * fq[i * d + c];
            }
        }
        // dφk = v·dkvᵀ + 1 ⊗ dz ; dv = φk·dkv
        let mut dfk = vec![T::zero(); n * d];
        gemm(false, true, n, d, d, T::one(), vh, &dkv, T::zero(), &mut dfk);
        let dvh = &mut dv[range.clone()];
        gemm(false, false, n, d, d, T::one(), &fk, &dkv, T::zero(), dvh);
        for i in 0..n {
            for c in 0..d {
                let idx = i * d + c;
                dq[head * n * d + idx] = dfq[idx] * feature_map_grad(qh[idx]);
                dk[head * n * d + idx] = (dfk[idx] + dz[c]) * feature_map_grad(kh[idx]);
            }
        }
    }
    let shape = q.shape().to_vec();
    Ok(AttentionGrads {
        dq: Tensor::new(shape.clone(), dq),
        dk: Tensor::new(shape.clone(), dk),
        dv: Tensor::new(shape, dv),
    })
}

/// Row-stochastic attention weights `softmax(Q·Kᵀ/√d)` per head, `[heads, n, n]`.
pub fn softmax_weights<T: Scalar>(q: &Tensor<T>, k: &Tensor<T>) -> Result<Tensor<T>> {
    let (h, n, d) = check_qkv(q, k, k)?;
    let scale = T::one() / T::from_f64(d as f64).sqrt();
    let mut w = vec![T::zero(); h * n * n];
    for head in 0..h {
        let qh = &q.data()[head * n * d..(head + 1) * n * d];
        let kh = &k.data()[head * n * d..(head + 1) * n * d];
        let wh = &mut w[head * n * n..(head + 1) * n * n];
        gemm(false, true, n, n, d, scale, qh, kh, T::zero(), wh);
        for row in wh.chunks_mut(n) {
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut total = T::zero();
            for x in row.iter_mut() {
                *x = (*x - m).exp();
                total += *x;
            }
            for x in row.iter_mut() {
                *x /= total;
            }
        }
    }
    Ok(Tensor::new(vec![h, n, n], w))
}

pub fn quadratic_attention<T: Scalar>(q: &Tensor<T>, k: &Tensor<T>, v: &Tensor<T>) -> Result<Tensor<T>> {
    let (h, n, d) = check_qkv(q, k, v)?;
    let w = softmax_weights(q, k)?;
    let mut out = vec![T::zero(); h * n * d];
    for head in 0..h {
        gemm(
            false,
            false,
            n,
            d,
            n,
            T::one(),
            &w.data()[head * n * n..(head + 1) * n * n],
            &v.data()[head * n * d..(head + 1) * n * d],
            T::zero(),
            &mut out[head * n * d..(head + 1) * n * d],
        );
    }
    Ok(Tensor::new(q.shape().to_vec(), out))
}

pub fn quadratic_attention_backward<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    dout: &Tensor<T>,
) -> Result<AttentionGrads<T>> {
    let (h, n, d) = check_qkv(q, k, v)?;
    let scale = T::one() / T::from_f64(d as f64).sqrt();
    let w = softmax_weights(q, k)?;
    let mut dq = vec![T::zero(); h * n * d];
    let mut dk = vec![T::zero(); h * n * d];
    let mut dv = vec![T::zero(); h * n * d];
    for head in 0..h {
        let r = head * n * d..(head + 1) * n * d;
        let p = &w.data()[head * n * n..(head + 1) * n * n];
        let go = &dout.data()[r.clone()];
        // dV = Pᵀ·dO ; dP = dO·Vᵀ
        gemm(true, false, n, d, n, T::one(), p, go, T::zero(), &mut dv[r.clone()]);
        let mut dp = vec![T::zero(); n * n];
        gemm(false, true, n, n, d, T::one(), go, &v.data()[r.clone()], T::zero(), &mut dp);
        // dS = P ⊙ (dP − rowsum(dP ⊙ P))
        for i in 0..n {
            let row = i * n..(i + 1) * n;
            let s: T = dp[row.clone()].iter().zip(&p[row.clone()]).map(|(&a, &b)| a * b).sum();
            for j in row {
                dp[j] = p[j] * (dp[j] - s);
            }
        }
        gemm(false, false, n, d, n, scale, &dp, &k.data()[r.clone()], T::zero(), &mut dq[r.clone()]);
        gemm(true, false, n, d, n, scale, &dp, &q.data()[r.clone()], T::zero(), &mut dk[r.clone()]);
    }
    let shape = q.shape().to_vec();
    Ok(AttentionGrads {
        dq: Tensor::new(shape.clone(), dq),
        dk: Tensor::new(shape.clone(), dk),
        dv: Tensor::new(shape, dv),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: [usize; 3], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.5..1.5)).collect())
    }

    #[test]
    fn single_token_returns_value() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (q, k, v) = (random([2, 1, 4], &mut rng), random([2, 1, 4], &mut rng), random([2, 1, 4], &mut rng));
        for out in [linear_attention(&q, &k, &v).unwrap(), quadratic_attention(&q, &k, &v).unwrap()] {
            for (a, b) in out.data().iter().zip(v.data()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn uniform_scores_average_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let q = Tensor::full(&[1, 5, 3], 0.3);
        let k = Tensor::full(&[1, 5, 3], -0.7);
        let v = random([1, 5, 3], &mut rng);
        let out = quadratic_attention(&q, &k, &v).unwrap();
        for c in 0..3 {
            let mean: f64 = (0..5).map(|j| v.data()[j * 3 + c]).sum::<f64>() / 5.0;
            for i in 0..5 {
                assert!((out.data()[i * 3 + c] - mean).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let q = Tensor::<f32>::zeros(&[1, 4, 2]);
        let k = Tensor::<f32>::zeros(&[1, 3, 2]);
        assert!(linear_attention(&q, &k, &q).is_err());
        assert!(quadratic_attention(&q, &k, &q).is_err());
    }

    fn check_backward(
        fwd: fn(&Tensor<f64>, &Tensor<f64>, &Tensor<f64>) -> Result<Tensor<f64>>,
        bwd: fn(&Tensor<f64>, &Tensor<f64>, &Tensor<f64>, &Tensor<f64>) -> Result<AttentionGrads<f64>>,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let shape = [2, 6, 3];
        let (q, k, v) = (random(shape, &mut rng), random(shape, &mut rng), random(shape, &mut rng));
        let probe = random(shape, &mut rng);
        let objective = |q: &Tensor<f64>, k: &Tensor<f64>, v: &Tensor<f64>| -> f64 {
            let o = fwd(q, k, v).unwrap();
            o.data().iter().zip(probe.data()).map(|(a, b)| a * b).sum()
        };
        let g = bwd(&q, &k, &v, &probe).unwrap();
        let h = 1e-6;
        for (which, analytic) in [(0, &g.dq), (1, &g.dk), (2, &g.dv)] {
            for idx in 0..q.len() {
                let mut inputs = [q.clone(), k.clone(), v.clone()];
                inputs[which].data_mut()[idx] += h;
                let up = objective(&inputs[0], &inputs[1], &inputs[2]);
                inputs[which].data_mut()[idx] -= 2.0 * h;
                let down = objective(&inputs[0], &inputs[1], &inputs[2]);
                let fd = (up - down) / (2.0 * h);
                let an = analytic.data()[idx];
                assert!((fd - an).abs() <= 1e-6 * (1.0 + fd.abs()), "input {which} idx {idx}: fd {fd} vs {an}");
            }
        }
    }

    #[test]
    fn linear_backward_matches_finite_differences() {
        check_backward(linear_attention, linear_attention_backward);
    }

    #[test]
    fn quadratic_backward_matches_finite_differences() {
        check_backward(quadratic_attention, quadratic_attention_backward);
    }
}
