use super::{softmax_rows, Dense, Gradients, NnError, ParameterSet, Result, Scalar, Tensor};

/// Scaled dot-product self-attention with a fused QKV projection.
///
/// Input and output are `[batch, seq, d_model]`; the QKV row layout is
/// `[q | k | v]`, head `h` owning columns `h*d_head..(h+1)*d_head` of each part.
#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub qkv: Dense,
    pub out: Dense,
    pub d_model: usize,
    pub n_heads: usize,
}

#[derive(Debug, Clone)]
pub struct AttentionCache<T> {
    x: Tensor<T>,
    qkv: Tensor<T>,
    /// `[batch, heads, seq, seq]` attention weights.
    probs: Vec<T>,
    ctx: Tensor<T>,
}

impl<T: Scalar> AttentionCache<T> {
    pub fn probs(&self) -> &[T] {
        &self.probs
    }
}

impl MultiHeadAttention {
    pub fn new<T: Scalar>(
        ps: &mut ParameterSet<T>,
        name: &str,
        d_model: usize,
        n_heads: usize,
        seed: u64,
    ) -> Result<Self> {
        if n_heads == 0 || !d_model.is_multiple_of(n_heads) {
            return Err(NnError::HeadDivisibility { d_model, n_heads });
        }
        Ok(Self {
            qkv: Dense::new(ps, &format!("{name}.qkv"), d_model, 3 * d_model, seed)?,
            out: Dense::new(ps, &format!("{name}.out"), d_model, d_model, seed)?,
            d_model,
            n_heads,
        })
    }

    fn dims<T: Scalar>(&self, x: &Tensor<T>) -> Result<(usize, usize)> {
        match *x.shape() {
            [b, s, d] if d == self.d_model => Ok((b, s)),
            _ => Err(NnError::Shape {
                op: "attention",
                detail: format!(
                    "expected [batch, seq, {}], got {:?}",
                    self.d_model,
                    x.shape()
                ),
            }),
        }
    }

    pub fn forward<T: Scalar>(
        &self,
        ps: &ParameterSet<T>,
        x: &Tensor<T>,
    ) -> Result<(Tensor<T>, AttentionCache<T>)> {
        let (batch, seq) = self.dims(x)?;
        let d = self.d_model;
        let dh = d / self.n_heads;
        let scale = T::from_f64(1.0 / (dh as f64).sqrt());
        let qkv = self.qkv.forward(ps, x)?;
        let q_all = qkv.data();
        let row = 3 * d;

        let mut probs = vec![T::zero(); batch * self.n_heads * seq * seq];
        let mut ctx = vec![T::zero(); batch * seq * d];
        for b in 0..batch {
            let base = b * seq * row;
            for h in 0..self.n_heads {
                let p = &mut probs[(b * self.n_heads + h) * seq * seq..][..seq * seq];
                let (qo, ko, vo) = (h * dh, d + h * dh, 2 * d + h * dh);
                for i in 0..seq {
                    let qi = &q_all[base + i * row + qo..][..dh];
                    for j in 0..seq {
                        let kj = &q_all[base + j * row + ko..][..dh];
                        let mut acc = T::zero();
                        for c in 0..dh {
                            acc += qi[c] * kj[c];
                        }
                        p[i * seq + j] = acc * scale;
                    }
                }
                softmax_rows(p, seq);
                for i in 0..seq {
                    let out = &mut ctx[(b * seq + i) * d + h * dh..][..dh];
                    for j in 0..seq {
                        let w = p[i * seq + j];
                        let vj = &q_all[base + j * row + vo..][..dh];
                        for c in 0..dh {
                            out[c] += w * vj[c];
                        }
                    }
                }
            }
        }
        let ctx = Tensor::new(vec![batch, seq, d], ctx)?;
        let y = self.out.forward(ps, &ctx)?;
        Ok((
            y,
            AttentionCache {
                x: x.clone(),
                qkv,
                probs,
                ctx,
            },
        ))
    }

    pub fn backward<T: Scalar>(
        &self,
        ps: &ParameterSet<T>,
        cache: &AttentionCache<T>,
        dy: &Tensor<T>,
        grads: &mut Gradients<T>,
    ) -> Result<Tensor<T>> {
        let (batch, seq) = self.dims(&cache.x)?;
        let d = self.d_model;
        let dh = d / self.n_heads;
        let scale = T::from_f64(1.0 / (dh as f64).sqrt());
        let row = 3 * d;
        let dctx = self.out.backward(ps, &cache.ctx, dy, grads)?;
        let qkv = cache.qkv.data();
        let dctx = dctx.data();

        let mut dqkv = vec![T::zero(); batch * seq * row];
        let mut dp = vec![T::zero(); seq * seq];
        for b in 0..batch {
            let base = b * seq * row;
            for h in 0..self.n_heads {
                let p = &cache.probs[(b * self.n_heads + h) * seq * seq..][..seq * seq];
                let (qo, ko, vo) = (h * dh, d + h * dh, 2 * d + h * dh);
                // dP = dctx V^T and dV = P^T dctx
                for i in 0..seq {
                    let gi = &dctx[(b * seq + i) * d + h * dh..][..dh];
                    for j in 0..seq {
                        let vj = &qkv[base + j * row + vo..][..dh];
                        let mut acc = T::zero();
                        for c in 0..dh {
                            acc += gi[c] * vj[c];
                        }
                        dp[i * seq + j] = acc;
                        let w = p[i * seq + j];
                        let dv = &mut dqkv[base + j * row + vo..][..dh];
                        for c in 0..dh {
                            dv[c] += w * gi[c];
                        }
                    }
                }
                // softmax backward, then scores = scale * Q K^T
                for i in 0..seq {
                    let pr = &p[i * seq..][..seq];
                    let dr = &mut dp[i * seq..][..seq];
                    let dot: T = pr.iter().zip(dr.iter()).map(|(&a, &g)| a * g).sum();
                    for j in 0..seq {
                        dr[j] = pr[j] * (dr[j] - dot) * scale;
                    }
                }
                for i in 0..seq {
                    for j in 0..seq {
                        let g = dp[i * seq + j];
                        for c in 0..dh {
                            let kj = qkv[base + j * row + ko + c];
                            let qi = qkv[base + i * row + qo + c];
                            dqkv[base + i * row + qo + c] += g * kj;
                            dqkv[base + j * row + ko + c] += g * qi;
                        }
                    }
                }
            }
        }
        let dqkv = Tensor::new(vec![batch, seq, row], dqkv)?;
        self.qkv.backward(ps, &cache.x, &dqkv, grads)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nncore::{fd, Init};

    fn randomize(ps: &mut ParameterSet<f64>, seed: u64, std: f64) {
        let mut src = ParameterSet::<f64>::new();
        for (k, p) in ps.iter_mut().enumerate() {
            let n = p.value.len();
            let id = src
                .init(&format!("r{k}"), vec![n], Init::TruncNormal(std), seed)
                .unwrap();
            p.value.data_mut().copy_from_slice(src.get(id));
        }
    }

    fn rand_tensor(shape: Vec<usize>, seed: u64) -> Tensor<f64> {
        let mut ps = ParameterSet::<f64>::new();
        let id = ps
            .init("x", shape.clone(), Init::TruncNormal(1.0), seed)
            .unwrap();
        Tensor::new(shape, ps.get(id).to_vec()).unwrap()
    }

    #[test]
    fn divisibility_is_enforced() {
        let mut ps = ParameterSet::<f64>::new();
        assert_eq!(
            MultiHeadAttention::new(&mut ps, "a", 10, 3, 0).unwrap_err(),
            NnError::HeadDivisibility {
                d_model: 10,
                n_heads: 3
            }
        );
    }

    #[test]
    fn single_token_returns_projected_value() {
        let mut ps = ParameterSet::<f64>::new();
        let attn = MultiHeadAttention::new(&mut ps, "a", 4, 2, 1).unwrap();
        randomize(&mut ps, 3, 0.5);
        let x = rand_tensor(vec![1, 1, 4], 8);
        let (y, cache) = attn.forward(&ps, &x).unwrap();
        assert!(cache.probs().iter().all(|&p| (p - 1.0).abs() < 1e-15));
        let qkv = attn.qkv.forward(&ps, &x).unwrap();
        let v = Tensor::new(vec![1, 1, 4], qkv.data()[8..12].to_vec()).unwrap();
        let want = attn.out.forward(&ps, &v).unwrap();
        for (a, b) in y.data().iter().zip(want.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn permutation_equivariance() {
        let mut ps = ParameterSet::<f64>::new();
        let attn = MultiHeadAttention::new(&mut ps, "a", 8, 2, 1).unwrap();
        randomize(&mut ps, 4, 0.3);
        let x = rand_tensor(vec![1, 3, 8], 2);
        let perm = [2usize, 0, 1];
        let mut xp = vec![0.0; 24];
        for (dst, &src) in perm.iter().enumerate() {
            xp[dst * 8..dst * 8 + 8].copy_from_slice(&x.data()[src * 8..src * 8 + 8]);
        }
        let xp = Tensor::new(vec![1, 3, 8], xp).unwrap();
        let (y, _) = attn.forward(&ps, &x).unwrap();
        let (yp, _) = attn.forward(&ps, &xp).unwrap();
        for (dst, &src) in perm.iter().enumerate() {
            for c in 0..8 {
                assert!((yp.data()[dst * 8 + c] - y.data()[src * 8 + c]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn attention_rows_sum_to_one() {
        let mut ps = ParameterSet::<f64>::new();
        let attn = MultiHeadAttention::new(&mut ps, "a", 8, 4, 1).unwrap();
        randomize(&mut ps, 6, 1.0);
        let x = rand_tensor(vec![2, 5, 8], 2);
        let (_, cache) = attn.forward(&ps, &x).unwrap();
        for row in cache.probs().chunks_exact(5) {
            assert!(row.iter().all(|&p| p >= 0.0));
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut ps = ParameterSet::<f64>::new();
        let attn = MultiHeadAttention::new(&mut ps, "a", 8, 2, 1).unwrap();
        randomize(&mut ps, 5, 0.4);
        let x = rand_tensor(vec![2, 3, 8], 7);
        let probe = rand_tensor(vec![2, 3, 8], 9);
        let loss = |ps: &ParameterSet<f64>, x: &Tensor<f64>| -> f64 {
            let (y, _) = attn.forward(ps, x).unwrap();
            y.data().iter().zip(probe.data()).map(|(a, b)| a * b).sum()
        };
        let (_, cache) = attn.forward(&ps, &x).unwrap();
        let mut grads = Gradients::for_params(&ps);
        let dx = attn.backward(&ps, &cache, &probe, &mut grads).unwrap();

        let num_x = fd::gradient(x.data(), 1e-5, |xv| {
            loss(&ps, &Tensor::new(vec![2, 3, 8], xv.to_vec()).unwrap())
        });
        assert!(fd::rel_err(dx.data(), &num_x) < 1e-4);
        let num_p = fd::gradient(&ps.flatten_f64(), 1e-5, |pv| {
            let mut q = ps.clone();
            q.assign_flat_f64(pv);
            loss(&q, &x)
        });
        assert!(fd::rel_err(&grads.flatten_f64(&ps), &num_p) < 1e-4);
    }
}
