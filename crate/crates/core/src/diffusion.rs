//! Noise schedule, forward marginal, training objective, deterministic
//! sampler step, and an exact Gaussian-oracle denoiser used to verify the
//! sampling machinery end to end.

use ndarray::Array4;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::{Error, Result};

pub type Latent = Array4<f64>;

/// Variance-preserving discrete schedule built from linear betas:
/// `alpha(k)^2 + sigma(k)^2 = 1`, `alpha(0) = 1`, `sigma(0) = 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alpha: Vec<f64>,
    sigma: Vec<f64>,
}

#[derive(serde::Serialize, serde::Deserialize)]
struct ScheduleDump {
    n_steps: usize,
    betas: Vec<f64>,
}

impl NoiseSchedule {
    pub fn make(n_steps: usize, beta_min: f64, beta_max: f64) -> Result<Self> {
        if n_steps == 0 {
            return Err(Error::Argument("schedule needs at least 1 step".into()));
        }
        if !(beta_min > 0.0 && beta_min <= beta_max && beta_max < 1.0) {
            return Err(Error::Argument(format!(
                "betas must satisfy 0 < {beta_min} <= {beta_max} < 1"
            )));
        }
        let betas: Vec<f64> = (0..n_steps)
            .map(|j| {
                if n_steps == 1 {
                    beta_min
                } else {
                    beta_min + (beta_max - beta_min) * j as f64 / (n_steps - 1) as f64
                }
            })
            .collect();
        Ok(Self::from_betas(betas))
    }

    fn from_betas(betas: Vec<f64>) -> Self {
        let n = betas.len();
        let mut alpha = Vec::with_capacity(n + 1);
        let mut sigma = Vec::with_capacity(n + 1);
        alpha.push(1.0);
        sigma.push(0.0);
        let mut alpha_bar = 1.0;
        for &b in &betas {
            alpha_bar *= 1.0 - b;
            alpha.push(alpha_bar.sqrt());
            sigma.push((1.0 - alpha_bar).sqrt());
        }
        NoiseSchedule {
            betas,
            alpha,
            sigma,
        }
    }

    pub fn n_steps(&self) -> usize {
        self.betas.len()
    }

    pub fn alpha(&self, k: usize) -> f64 {
        self.alpha[k]
    }

    pub fn sigma(&self, k: usize) -> f64 {
        self.sigma[k]
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&ScheduleDump {
            n_steps: self.betas.len(),
            betas: self.betas.clone(),
        })
        .expect("schedule serialization cannot fail")
    }

    pub fn from_json(json: &str) -> Result<Self> {
        let dump: ScheduleDump = serde_json::from_str(json)?;
        if dump.betas.len() != dump.n_steps {
            return Err(Error::Format("schedule beta count disagrees with n_steps".into()));
        }
        for &b in &dump.betas {
            if !(b > 0.0 && b < 1.0) {
                return Err(Error::Format(format!("beta {b} outside (0, 1)")));
            }
        }
        Ok(Self::from_betas(dump.betas))
    }
}

/// Behavioral contract for noise predictors: deterministic given inputs,
/// finite outputs, output shape equal to `z`.
pub trait Denoiser: Sync {
    fn predict_noise(&self, z: &Latent, k: usize, i_cond: &Latent, e_cond: &Latent) -> Latent;
}

/// Sample the forward marginal: `x_k = alpha(k) x0 + sigma(k) eps`.
pub fn forward_diffuse(x0: &Latent, k: usize, eps: &Latent, schedule: &NoiseSchedule) -> Result<Latent> {
    if x0.dim() != eps.dim() {
        return Err(Error::Argument(format!(
            "noise shape {:?} does not match data shape {:?}",
            eps.dim(),
            x0.dim()
        )));
    }
    Ok(x0 * schedule.alpha(k) + eps * schedule.sigma(k))
}

/// Draw a standard-normal latent of the given shape.
pub fn sample_noise<R: Rng>(shape: (usize, usize, usize, usize), rng: &mut R) -> Latent {
    Array4::from_shape_simple_fn(shape, || rng.sample(StandardNormal))
}

/// One denoising objective evaluation: draw `k ~ U{1..N}` and standard
/// normal noise, return the mean squared error between predicted and true
/// noise.
pub fn training_loss<R: Rng>(
    denoiser: &dyn Denoiser,
    x0: &Latent,
    i_cond: &Latent,
    e_cond: &Latent,
    schedule: &NoiseSchedule,
    rng: &mut R,
) -> Result<f64> {
    let k = rng.gen_range(1..=schedule.n_steps());
    let eps = sample_noise(x0.dim(), rng);
    let z = forward_diffuse(x0, k, &eps, schedule)?;
    let pred = denoiser.predict_noise(&z, k, i_cond, e_cond);
    if pred.dim() != eps.dim() {
        return Err(Error::Argument("denoiser output shape mismatch".into()));
    }
    let n = eps.len() as f64;
    Ok(pred
        .iter()
        .zip(eps.iter())
        .map(|(&a, &b)| (a - b) * (a - b))
        .sum::<f64>()
        / n)
}

/// Deterministic sampler update:
/// `x0_hat = (z_k - sigma(k) eps_hat) / alpha(k)`,
/// `z_{k-1} = alpha(k-1) x0_hat + sigma(k-1) eps_hat`.
pub fn ddim_step(z: &Latent, eps_hat: &Latent, k: usize, schedule: &NoiseSchedule) -> Result<Latent> {
    if k == 0 {
        return Err(Error::Argument("ddim_step requires k >= 1".into()));
    }
    if z.dim() != eps_hat.dim() {
        return Err(Error::Argument("eps_hat shape mismatch".into()));
    }
    let (a_k, s_k) = (schedule.alpha(k), schedule.sigma(k));
    let (a_p, s_p) = (schedule.alpha(k - 1), schedule.sigma(k - 1));
    let x0_hat = (z - &(eps_hat * s_k)) / a_k;
    Ok(&x0_hat * a_p + eps_hat * s_p)
}

/// Independent Gaussian data distribution used as a verification oracle:
/// per-element mean and positive variance.
#[derive(Debug, Clone)]
pub struct GaussianOracle {
    pub mean: Latent,
    pub var: Latent,
}

impl GaussianOracle {
    pub fn new(mean: Latent, var: Latent) -> Result<Self> {
        if mean.dim() != var.dim() {
            return Err(Error::Argument("oracle mean/var shape mismatch".into()));
        }
        if var.iter().any(|&v| v <= 0.0) {
            return Err(Error::Argument("oracle variance must be positive".into()));
        }
        Ok(GaussianOracle { mean, var })
    }
}

/// Exact noise prediction for Gaussian data: the posterior mean of `x0`
/// given `z_k` under the forward marginal, converted to epsilon form.
pub fn oracle_predict_noise(
    z: &Latent,
    k: usize,
    oracle: &GaussianOracle,
    schedule: &NoiseSchedule,
) -> Result<Latent> {
    if k == 0 {
        return Err(Error::Argument("oracle prediction undefined at k = 0 (sigma = 0)".into()));
    }
    if z.dim() != oracle.mean.dim() {
        return Err(Error::Argument("latent shape does not match oracle".into()));
    }
    let a = schedule.alpha(k);
    let s = schedule.sigma(k);
    let s2 = s * s;
    let mut out = z.clone();
    ndarray::Zip::from(&mut out)
        .and(&oracle.mean)
        .and(&oracle.var)
        .for_each(|o, &mu, &v| {
            let zk = *o;
            let x0_hat = (mu / v + a * zk / s2) / (1.0 / v + a * a / s2);
            *o = (zk - a * x0_hat) / s;
        });
    Ok(out)
}

/// Denoiser adapter over the Gaussian oracle; ignores conditioning.
pub struct OracleDenoiser {
    pub oracle: GaussianOracle,
    pub schedule: NoiseSchedule,
}

impl Denoiser for OracleDenoiser {
    fn predict_noise(&self, z: &Latent, k: usize, _i: &Latent, _e: &Latent) -> Latent {
        oracle_predict_noise(z, k, &self.oracle, &self.schedule)
            .expect("oracle prediction valid for k >= 1")
    }
}
