use super::{
    ensure_finite, matmul, Gradients, Init, NnError, ParamId, ParameterSet, Result, Scalar, Tensor,
};

fn last_dim_check<T: Scalar>(x: &Tensor<T>, want: usize, op: &'static str) -> Result<()> {
    if x.last_dim() != want || x.shape().is_empty() {
        return Err(NnError::Shape {
            op,
            detail: format!("expected trailing dim {want}, got shape {:?}", x.shape()),
        });
    }
    Ok(())
}

fn with_last_dim(shape: &[usize], d: usize) -> Vec<usize> {
    let mut s = shape.to_vec();
    *s.last_mut().expect("non-empty shape") = d;
    s
}

/// Affine map `y = x W + b` over the trailing axis; `W` is `[d_in, d_out]`.
#[derive(Debug, Clone)]
pub struct Dense {
    pub w: ParamId,
    pub b: ParamId,
    pub d_in: usize,
    pub d_out: usize,
}

impl Dense {
    pub fn new<T: Scalar>(
        ps: &mut ParameterSet<T>,
        name: &str,
        d_in: usize,
        d_out: usize,
        seed: u64,
    ) -> Result<Self> {
        Self::with_init(ps, name, d_in, d_out, Init::TruncNormal(0.02), seed)
    }

    pub fn with_init<T: Scalar>(
        ps: &mut ParameterSet<T>,
        name: &str,
        d_in: usize,
        d_out: usize,
        w_init: Init,
        seed: u64,
    ) -> Result<Self> {
        let w = ps.init(&format!("{name}.w"), vec![d_in, d_out], w_init, seed)?;
        let b = ps.init(&format!("{name}.b"), vec![d_out], Init::Zeros, seed)?;
        Ok(Self { w, b, d_in, d_out })
    }

    pub fn forward<T: Scalar>(&self, ps: &ParameterSet<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        last_dim_check(x, self.d_in, "dense")?;
        let rows = x.rows();
        let bias = ps.get(self.b);
        let mut out: Vec<T> = Vec::with_capacity(rows * self.d_out);
        for _ in 0..rows {
            out.extend_from_slice(bias);
        }
        matmul(
            x.data(),
            ps.get(self.w),
            &mut out,
            rows,
            self.d_in,
            self.d_out,
            false,
            false,
            true,
        );
        ensure_finite(&out, "dense")?;
        Tensor::new(with_last_dim(x.shape(), self.d_out), out)
    }

    /// Accumulates `dW`, `db` (when trainable) and returns `dx`.
    pub fn backward<T: Scalar>(
        &self,
        ps: &ParameterSet<T>,
        x: &Tensor<T>,
        dy: &Tensor<T>,
        grads: &mut Gradients<T>,
    ) -> Result<Tensor<T>> {
        last_dim_check(dy, self.d_out, "dense backward")?;
        let rows = x.rows();
        if dy.rows() != rows {
            return Err(NnError::Shape {
                op: "dense backward",
                detail: format!("{rows} input rows vs {} gradient rows", dy.rows()),
            });
        }
        if let Some(gw) = grads.slot_mut(self.w) {
            matmul(
                x.data(),
                dy.data(),
                gw,
                self.d_in,
                rows,
                self.d_out,
                true,
                false,
                true,
            );
        }
        if let Some(gb) = grads.slot_mut(self.b) {
            for row in dy.data().chunks_exact(self.d_out) {
                for (g, &v) in gb.iter_mut().zip(row) {
                    *g += v;
                }
            }
        }
        let mut dx = vec![T::zero(); rows * self.d_in];
        matmul(
            dy.data(),
            ps.get(self.w),
            &mut dx,
            rows,
            self.d_out,
            self.d_in,
            false,
            true,
            false,
        );
        Tensor::new(x.shape().to_vec(), dx)
    }
}

/// Per-row standardization over the trailing axis followed by an affine map.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub d: usize,
    pub eps: f64,
}

#[derive(Debug, Clone)]
pub struct LnCache<T> {
    xhat: Tensor<T>,
    inv_std: Vec<T>,
}

impl<T: Scalar> LnCache<T> {
    /// Standardized input before the affine map.
    pub fn normalized(&self) -> &Tensor<T> {
        &self.xhat
    }
}

impl LayerNorm {
    pub const DEFAULT_EPS: f64 = 1e-5;

    pub fn new<T: Scalar>(
        ps: &mut ParameterSet<T>,
        name: &str,
        d: usize,
        seed: u64,
    ) -> Result<Self> {
        if d < 2 {
            return Err(NnError::Shape {
                op: "layer_norm",
                detail: format!("normalized dimension must be >= 2, got {d}"),
            });
        }
        let gamma = ps.init(&format!("{name}.gamma"), vec![d], Init::Ones, seed)?;
        let beta = ps.init(&format!("{name}.beta"), vec![d], Init::Zeros, seed)?;
        Ok(Self {
            gamma,
            beta,
            d,
            eps: Self::DEFAULT_EPS,
        })
    }

    pub fn forward<T: Scalar>(
        &self,
        ps: &ParameterSet<T>,
        x: &Tensor<T>,
    ) -> Result<(Tensor<T>, LnCache<T>)> {
        last_dim_check(x, self.d, "layer_norm")?;
        let d = self.d;
        let inv_d = T::from_f64(1.0 / d as f64);
        let eps = T::from_f64(self.eps);
        let gamma = ps.get(self.gamma);
        let beta = ps.get(self.beta);
        let rows = x.rows();
        let mut xhat = vec![T::zero(); rows * d];
        let mut out = vec![T::zero(); rows * d];
        let mut inv_std = Vec::with_capacity(rows);
        for ((xr, hr), yr) in x
            .data()
            .chunks_exact(d)
            .zip(xhat.chunks_exact_mut(d))
            .zip(out.chunks_exact_mut(d))
        {
            let mean = xr.iter().copied().sum::<T>() * inv_d;
            let var = xr.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
            let is = T::one() / (var + eps).sqrt();
            inv_std.push(is);
            for j in 0..d {
                hr[j] = (xr[j] - mean) * is;
                yr[j] = gamma[j] * hr[j] + beta[j];
            }
        }
        ensure_finite(&out, "layer_norm")?;
        Ok((
            Tensor::new(x.shape().to_vec(), out)?,
            LnCache {
                xhat: Tensor::new(x.shape().to_vec(), xhat)?,
                inv_std,
            },
        ))
    }

    pub fn backward<T: Scalar>(
        &self,
        ps: &ParameterSet<T>,
        cache: &LnCache<T>,
        dy: &Tensor<T>,
        grads: &mut Gradients<T>,
    ) -> Result<Tensor<T>> {
        last_dim_check(dy, self.d, "layer_norm backward")?;
        let d = self.d;
        let inv_d = T::from_f64(1.0 / d as f64);
        let gamma = ps.get(self.gamma);
        if let Some(gg) = grads.slot_mut(self.gamma) {
            for (dr, hr) in dy
                .data()
                .chunks_exact(d)
                .zip(cache.xhat.data().chunks_exact(d))
            {
                for j in 0..d {
                    gg[j] += dr[j] * hr[j];
                }
            }
        }
        if let Some(gb) = grads.slot_mut(self.beta) {
            for dr in dy.data().chunks_exact(d) {
                for j in 0..d {
                    gb[j] += dr[j];
                }
            }
        }
        let mut dx = vec![T::zero(); dy.len()];
        let mut dxhat = vec![T::zero(); d];
        for (((dr, hr), xr), &is) in dy
            .data()
            .chunks_exact(d)
            .zip(cache.xhat.data().chunks_exact(d))
            .zip(dx.chunks_exact_mut(d))
            .zip(&cache.inv_std)
        {
            let mut mean_g = T::zero();
            let mut mean_gh = T::zero();
            for j in 0..d {
                dxhat[j] = dr[j] * gamma[j];
                mean_g += dxhat[j];
                mean_gh += dxhat[j] * hr[j];
            }
            mean_g *= inv_d;
            mean_gh *= inv_d;
            for j in 0..d {
                xr[j] = is * (dxhat[j] - mean_g - hr[j] * mean_gh);
            }
        }
        Tensor::new(dy.shape().to_vec(), dx)
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

/// Tanh approximation of GELU.
#[inline]
pub fn gelu<T: Scalar>(x: T) -> T {
    let c = T::from_f64(GELU_C);
    let a = T::from_f64(GELU_A);
    let half = T::from_f64(0.5);
    half * x * (T::one() + (c * (x + a * x * x * x)).act_tanh())
}

#[inline]
pub fn gelu_grad<T: Scalar>(x: T) -> T {
    let c = T::from_f64(GELU_C);
    let a = T::from_f64(GELU_A);
    let half = T::from_f64(0.5);
    let three = T::from_f64(3.0);
    let t = (c * (x + a * x * x * x)).act_tanh();
    half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + three * a * x * x)
}

/// `dense -> GELU -> dense`.
#[derive(Debug, Clone)]
pub struct FeedForward {
    pub fc1: Dense,
    pub fc2: Dense,
}

#[derive(Debug, Clone)]
pub struct FfnCache<T> {
    x: Tensor<T>,
    pre: Tensor<T>,
    act: Tensor<T>,
}

impl FeedForward {
    pub fn new<T: Scalar>(
        ps: &mut ParameterSet<T>,
        name: &str,
        d: usize,
        d_ff: usize,
        seed: u64,
    ) -> Result<Self> {
        Ok(Self {
            fc1: Dense::new(ps, &format!("{name}.fc1"), d, d_ff, seed)?,
            fc2: Dense::new(ps, &format!("{name}.fc2"), d_ff, d, seed)?,
        })
    }

    pub fn forward<T: Scalar>(
        &self,
        ps: &ParameterSet<T>,
        x: &Tensor<T>,
    ) -> Result<(Tensor<T>, FfnCache<T>)> {
        let pre = self.fc1.forward(ps, x)?;
        let act = Tensor::new(
            pre.shape().to_vec(),
            pre.data().iter().map(|&v| gelu(v)).collect(),
        )?;
        let y = self.fc2.forward(ps, &act)?;
        Ok((
            y,
            FfnCache {
                x: x.clone(),
                pre,
                act,
            },
        ))
    }

    pub fn backward<T: Scalar>(
        &self,
        ps: &ParameterSet<T>,
        cache: &FfnCache<T>,
        dy: &Tensor<T>,
        grads: &mut Gradients<T>,
    ) -> Result<Tensor<T>> {
        let mut dact = self.fc2.backward(ps, &cache.act, dy, grads)?;
        for (g, &p) in dact.data_mut().iter_mut().zip(cache.pre.data()) {
            *g *= gelu_grad(p);
        }
        self.fc1.backward(ps, &cache.x, &dact, grads)
    }
}
