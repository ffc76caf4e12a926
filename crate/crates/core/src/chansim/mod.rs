//! Clustered-multipath CSI generator.
//!
//! Each environment is a small circular region with a fixed set of scattering
//! clusters (mean departure angle, angular spread, delay, power). A sample is
//! drawn by jittering the cluster angles, drawing Laplacian subpath offsets and
//! fresh complex gains, and summing steering vectors with per-subcarrier delay
//! phases. LOS regions add a Rician dominant path.

mod dataset;
mod io;

pub use dataset::{generate_dataset, generate_datasets, mix_datasets, Dataset, Split};
pub use io::{read_dataset, write_dataset, DATASET_MAGIC, DATASET_VERSION};

use std::f64::consts::PI;

use num_complex::Complex64;
use rand::Rng as _;
use rand_distr::{Distribution, Exp, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::seed::{self, Rng};

#[derive(Debug, Error)]
pub enum ChanSimError {
    #[error("invalid array config: {0}")]
    InvalidArray(String),
    #[error("invalid environment {env_id}: {reason}")]
    InvalidEnvironment { env_id: u32, reason: String },
    #[error("dataset needs at least 10 samples for an 8:1:1 split, got {0}")]
    TooFewSamples(usize),
    #[error("cannot mix datasets: {0}")]
    Mix(String),
    #[error("dataset file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, ChanSimError>;

/// Default region radius in meters.
pub const REGION_RADIUS: f64 = 5.0;
/// Subpaths per cluster.
pub const SUBPATHS_PER_CLUSTER: usize = 10;
/// Mean of the exponential cluster-delay distribution, seconds.
pub const MEAN_CLUSTER_DELAY: f64 = 100e-9;
/// Standard deviation of the per-sample cluster angle jitter, radians (1 degree).
pub const AOD_JITTER_STD: f64 = PI / 180.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArrayConfig {
    pub n_tx: usize,
    pub n_sc: usize,
    pub carrier_freq: f64,
    pub bandwidth: f64,
    pub spacing_over_lambda: f64,
}

impl ArrayConfig {
    /// 8 antennas, 8 subcarriers.
    pub fn desk() -> Self {
        Self {
            n_tx: 8,
            n_sc: 8,
            carrier_freq: 2.655e9,
            bandwidth: 70e6,
            spacing_over_lambda: 0.5,
        }
    }

    /// 32 antennas, 32 subcarriers at 2.655 GHz over 70 MHz.
    pub fn paper() -> Self {
        Self {
            n_tx: 32,
            n_sc: 32,
            ..Self::desk()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_tx == 0 || self.n_sc == 0 {
            return Err(ChanSimError::InvalidArray(format!(
                "n_tx and n_sc must be >= 1 (got {}x{})",
                self.n_tx, self.n_sc
            )));
        }
        if !(self.spacing_over_lambda > 0.0) {
            return Err(ChanSimError::InvalidArray(
                "spacing_over_lambda must be > 0".into(),
            ));
        }
        if !(self.bandwidth > 0.0) {
            return Err(ChanSimError::InvalidArray("bandwidth must be > 0".into()));
        }
        Ok(())
    }

    /// Real dimension of one vectorized sample, `2 * n_tx * n_sc`.
    pub fn real_dim(&self) -> usize {
        2 * self.n_tx * self.n_sc
    }

    /// Baseband frequency of subcarrier `i`, centered on the carrier.
    pub fn subcarrier_freq(&self, i: usize) -> f64 {
        (i as f64 - (self.n_sc as f64 - 1.0) / 2.0) * self.bandwidth / self.n_sc as f64
    }

    /// Largest representable excess delay, `n_sc / bandwidth`.
    pub fn max_delay(&self) -> f64 {
        self.n_sc as f64 / self.bandwidth
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cluster {
    /// Mean angle of departure, radians.
    pub mean_aod: f64,
    /// Laplacian angular spread (standard deviation), radians.
    pub angle_spread: f64,
    /// Excess delay, seconds.
    pub delay: f64,
    /// Linear power share; cluster powers of an environment sum to 1.
    pub power: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvironmentSpec {
    pub env_id: u32,
    pub center: [f64; 2],
    pub radius: f64,
    pub is_los: bool,
    pub n_subpaths: usize,
    pub clusters: Vec<Cluster>,
    /// Rician K factor (linear), present exactly for LOS environments.
    pub rician_k: Option<f64>,
    /// Departure angle of the dominant LOS path.
    pub los_aod: Option<f64>,
    /// Seed of the per-sample stream.
    pub seed: u64,
}

impl EnvironmentSpec {
    pub fn n_clusters(&self) -> usize {
        self.clusters.len()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |reason: &str| ChanSimError::InvalidEnvironment {
            env_id: self.env_id,
            reason: reason.to_string(),
        };
        if !(self.radius > 0.0) {
            return Err(bad("radius must be > 0"));
        }
        if self.clusters.is_empty() {
            return Err(bad("at least one cluster required"));
        }
        if self.n_subpaths == 0 {
            return Err(bad("at least one subpath required"));
        }
        let total: f64 = self.clusters.iter().map(|c| c.power).sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(bad("cluster powers must sum to 1"));
        }
        if self.is_los != self.rician_k.is_some() || self.is_los != self.los_aod.is_some() {
            return Err(bad("is_los must match presence of the Rician component"));
        }
        Ok(())
    }
}

/// Complex channel matrix, `n_tx x n_sc`, stored antenna-major.
#[derive(Debug, Clone, PartialEq)]
pub struct CsiSample {
    pub n_tx: usize,
    pub n_sc: usize,
    pub h: Vec<Complex64>,
}

impl CsiSample {
    pub fn zeros(n_tx: usize, n_sc: usize) -> Self {
        Self {
            n_tx,
            n_sc,
            h: vec![Complex64::new(0.0, 0.0); n_tx * n_sc],
        }
    }

    #[inline]
    pub fn get(&self, tx: usize, sc: usize) -> Complex64 {
        self.h[tx * self.n_sc + sc]
    }

    #[inline]
    pub fn set(&mut self, tx: usize, sc: usize, v: Complex64) {
        self.h[tx * self.n_sc + sc] = v;
    }

    /// Channel vector of subcarrier `sc`.
    pub fn column(&self, sc: usize) -> Vec<Complex64> {
        (0..self.n_tx).map(|tx| self.get(tx, sc)).collect()
    }

    pub fn frobenius_sq(&self) -> f64 {
        self.h.iter().map(|z| z.norm_sqr()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.h.iter().all(|z| z.re.is_finite() && z.im.is_finite())
    }

    pub fn scale(&mut self, factor: f64) {
        for z in &mut self.h {
            *z *= factor;
        }
    }

    /// Rounds every entry to the nearest `f32`, the precision datasets are stored at.
    fn quantize_f32(&mut self) {
        for z in &mut self.h {
            *z = Complex64::new(z.re as f32 as f64, z.im as f32 as f64);
        }
    }
}

/// ULA steering vector, entry `k` is `exp(j 2 pi k (spacing/lambda) sin(theta))`.
pub fn steering_vector(theta: f64, cfg: &ArrayConfig) -> Vec<Complex64> {
    let phase_step = 2.0 * PI * cfg.spacing_over_lambda * theta.sin();
    (0..cfg.n_tx)
        .map(|k| Complex64::from_polar(1.0, phase_step * k as f64))
        .collect()
}

/// A single propagation path.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ray {
    pub gain: Complex64,
    pub aod: f64,
    pub delay: f64,
}

/// Sums steering vectors of `rays` with per-subcarrier delay phases.
pub fn channel_from_rays(rays: &[Ray], cfg: &ArrayConfig) -> CsiSample {
    let mut out = CsiSample::zeros(cfg.n_tx, cfg.n_sc);
    let freqs: Vec<f64> = (0..cfg.n_sc).map(|i| cfg.subcarrier_freq(i)).collect();
    for ray in rays {
        let a = steering_vector(ray.aod, cfg);
        for (sc, &f) in freqs.iter().enumerate() {
            let g = ray.gain * Complex64::from_polar(1.0, -2.0 * PI * f * ray.delay);
            for (tx, &ak) in a.iter().enumerate() {
                out.h[tx * cfg.n_sc + sc] += g * ak;
            }
        }
    }
    out
}

fn laplace(rng: &mut Rng, scale: f64) -> f64 {
    let u: f64 = rng.random::<f64>() - 0.5;
    -scale * u.signum() * (1.0 - 2.0 * u.abs()).max(f64::MIN_POSITIVE).ln()
}

fn std_normal(rng: &mut Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn complex_gaussian(rng: &mut Rng, variance: f64) -> Complex64 {
    let s = (variance / 2.0).sqrt();
    Complex64::new(std_normal(rng) * s, std_normal(rng) * s)
}

/// Draws the geometry and cluster statistics of environment `env_id`.
///
/// Even ids are LOS, odd ids NLOS.
pub fn sample_environment(env_id: u32, cell_radius: f64, rng_seed: u64) -> EnvironmentSpec {
    let mut rng = seed::rng(seed::derive_u64(rng_seed, u64::from(env_id)));
    let is_los = env_id.is_multiple_of(2);

    let r = cell_radius * rng.random::<f64>().sqrt();
    let phi = 2.0 * PI * rng.random::<f64>();
    let center = [r * phi.cos(), r * phi.sin()];

    let n_clusters = if is_los {
        rng.random_range(2..=4)
    } else {
        rng.random_range(3..=6)
    };
    let deg = PI / 180.0;
    let delay_dist = Exp::new(1.0 / MEAN_CLUSTER_DELAY).expect("positive rate");
    let mut clusters: Vec<Cluster> = (0..n_clusters)
        .map(|_| {
            let mean_aod = rng.random_range(-PI / 3.0..PI / 3.0);
            let angle_spread = rng.random_range(1.0 * deg..8.0 * deg);
            let delay: f64 = delay_dist.sample(&mut rng);
            Cluster {
                mean_aod,
                angle_spread,
                delay,
                power: (-delay / MEAN_CLUSTER_DELAY).exp(),
            }
        })
        .collect();
    let total: f64 = clusters.iter().map(|c| c.power).sum();
    for c in &mut clusters {
        c.power /= total;
    }

    let (rician_k, los_aod) = if is_los {
        (
            Some(rng.random_range(3.0..10.0)),
            Some(rng.random_range(-PI / 3.0..PI / 3.0)),
        )
    } else {
        (None, None)
    };

    EnvironmentSpec {
        env_id,
        center,
        radius: REGION_RADIUS,
        is_los,
        n_subpaths: SUBPATHS_PER_CLUSTER,
        clusters,
        rician_k,
        los_aod,
        seed: seed::derive(rng_seed, &format!("samples/{env_id}")),
    }
}

/// Draws the rays of one sample. Expected total path power is 1.
pub fn draw_rays(env: &EnvironmentSpec, cfg: &ArrayConfig, rng: &mut Rng) -> Vec<Ray> {
    let nlos_share = env.rician_k.map_or(1.0, |k| 1.0 / (k + 1.0));
    let max_delay = cfg.max_delay();
    let mut rays = Vec::with_capacity(env.n_clusters() * env.n_subpaths + 1);
    for cluster in &env.clusters {
        let jitter: f64 = AOD_JITTER_STD * std_normal(rng);
        let mean = cluster.mean_aod + jitter;
        let laplace_scale = cluster.angle_spread / std::f64::consts::SQRT_2;
        let sub_power = nlos_share * cluster.power / env.n_subpaths as f64;
        let delay = cluster.delay.min(max_delay);
        for _ in 0..env.n_subpaths {
            rays.push(Ray {
                gain: complex_gaussian(rng, sub_power),
                aod: mean + laplace(rng, laplace_scale),
                delay,
            });
        }
    }
    if let (Some(k), Some(los_aod)) = (env.rician_k, env.los_aod) {
        let phase = 2.0 * PI * rng.random::<f64>();
        let jitter: f64 = AOD_JITTER_STD * std_normal(rng);
        rays.push(Ray {
            gain: Complex64::from_polar((k / (k + 1.0)).sqrt(), phase),
            aod: los_aod + jitter,
            delay: 0.0,
        });
    }
    rays
}

/// One channel realization without power normalization.
pub fn synthesize_channel_raw(
    env: &EnvironmentSpec,
    cfg: &ArrayConfig,
    rng: &mut Rng,
) -> CsiSample {
    channel_from_rays(&draw_rays(env, cfg, rng), cfg)
}

/// One channel realization scaled to `||H||_F^2 = n_tx * n_sc` and rounded to f32 precision.
pub fn synthesize_channel(env: &EnvironmentSpec, cfg: &ArrayConfig, rng: &mut Rng) -> CsiSample {
    loop {
        let mut h = synthesize_channel_raw(env, cfg, rng);
        let energy = h.frobenius_sq();
        if energy > 0.0 && energy.is_finite() {
            h.scale(((cfg.n_tx * cfg.n_sc) as f64 / energy).sqrt());
            h.quantize_f32();
            return h;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn steering_broadside_is_all_ones() {
        let cfg = ArrayConfig::desk();
        for a in steering_vector(0.0, &cfg) {
            assert_abs_diff_eq!(a.re, 1.0, epsilon = 1e-15);
            assert_abs_diff_eq!(a.im, 0.0, epsilon = 1e-15);
        }
    }

    #[test]
    fn steering_endfire_alternates() {
        let cfg = ArrayConfig {
            n_tx: 2,
            ..ArrayConfig::desk()
        };
        let a = steering_vector(PI / 2.0, &cfg);
        assert_abs_diff_eq!(a[0].re, 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(a[1].re, -1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(a[1].im, 0.0, epsilon = 1e-12);
    }

    #[test]
    fn steering_phase_progression() {
        let cfg = ArrayConfig {
            n_tx: 4,
            ..ArrayConfig::desk()
        };
        let theta: f64 = 0.3;
        let a = steering_vector(theta, &cfg);
        for (k, ak) in a.iter().enumerate() {
            // Independent evaluation via Euler's formula.
            let phase = k as f64 * PI * theta.sin();
            assert_abs_diff_eq!(ak.norm(), 1.0, epsilon = 1e-12);
            assert_abs_diff_eq!(ak.re, phase.cos(), epsilon = 1e-12);
            assert_abs_diff_eq!(ak.im, phase.sin(), epsilon = 1e-12);
        }
    }

    #[test]
    fn los_parity_follows_env_id() {
        assert!(!sample_environment(101, 200.0, 1).is_los);
        assert!(sample_environment(102, 200.0, 1).is_los);
        for id in 1..40 {
            let env = sample_environment(id, 200.0, 3);
            env.validate().unwrap();
            let n = env.n_clusters();
            if env.is_los {
                assert!((2..=4).contains(&n));
            } else {
                assert!((3..=6).contains(&n));
            }
            let d = (env.center[0].powi(2) + env.center[1].powi(2)).sqrt();
            assert!(d <= 200.0);
        }
    }

    #[test]
    fn environment_is_deterministic() {
        assert_eq!(
            sample_environment(7, 200.0, 11),
            sample_environment(7, 200.0, 11)
        );
        assert_ne!(
            sample_environment(7, 200.0, 11),
            sample_environment(7, 200.0, 12)
        );
    }

    #[test]
    fn single_path_collapse() {
        let cfg = ArrayConfig::desk();
        let ray = Ray {
            gain: Complex64::new(1.0, 0.0),
            aod: 0.0,
            delay: 0.0,
        };
        let h = channel_from_rays(&[ray], &cfg);
        for z in &h.h {
            assert_abs_diff_eq!(z.re, 1.0, epsilon = 1e-15);
            assert_abs_diff_eq!(z.im, 0.0, epsilon = 1e-15);
        }
    }

    #[test]
    fn zero_delays_give_flat_channel() {
        let cfg = ArrayConfig::desk();
        let mut env = sample_environment(5, 200.0, 2);
        for c in &mut env.clusters {
            c.delay = 0.0;
        }
        let mut rng = seed::rng(9);
        let h = synthesize_channel_raw(&env, &cfg, &mut rng);
        for sc in 1..cfg.n_sc {
            for tx in 0..cfg.n_tx {
                assert_abs_diff_eq!((h.get(tx, sc) - h.get(tx, 0)).norm(), 0.0, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn mean_raw_power_matches_dimension() {
        // Monte-Carlo over 10^4 draws, mixing LOS and NLOS environments.
        let cfg = ArrayConfig::desk();
        let envs: Vec<_> = (1..=4).map(|id| sample_environment(id, 200.0, 5)).collect();
        let mut rng = seed::rng(123);
        let draws = 10_000;
        let mut acc = 0.0;
        for d in 0..draws {
            acc += synthesize_channel_raw(&envs[d % envs.len()], &cfg, &mut rng).frobenius_sq();
        }
        let mean = acc / draws as f64;
        let target = (cfg.n_tx * cfg.n_sc) as f64;
        assert!(
            (mean - target).abs() / target < 0.05,
            "mean energy {mean} vs {target}"
        );
    }

    #[test]
    fn normalized_channel_has_fixed_energy() {
        let cfg = ArrayConfig::desk();
        let env = sample_environment(8, 200.0, 5);
        let mut rng = seed::rng(1);
        for _ in 0..20 {
            let h = synthesize_channel(&env, &cfg, &mut rng);
            assert!(h.is_finite());
            assert_abs_diff_eq!(h.frobenius_sq(), 64.0, epsilon = 1e-4);
        }
    }

    #[test]
    fn synthesis_is_deterministic_given_rng_state() {
        let cfg = ArrayConfig::desk();
        let env = sample_environment(3, 200.0, 5);
        let a = synthesize_channel(&env, &cfg, &mut seed::rng(77));
        let b = synthesize_channel(&env, &cfg, &mut seed::rng(77));
        assert_eq!(a, b);
    }

    #[test]
    fn array_validation() {
        assert!(ArrayConfig::desk().validate().is_ok());
        let bad = ArrayConfig {
            n_tx: 0,
            ..ArrayConfig::desk()
        };
        assert!(bad.validate().is_err());
        let bad = ArrayConfig {
            spacing_over_lambda: 0.0,
            ..ArrayConfig::desk()
        };
        assert!(bad.validate().is_err());
    }
}
