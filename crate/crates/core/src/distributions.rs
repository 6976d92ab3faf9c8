//! Gaussian and Gamma log-densities and reparameterized samplers on the tape.
//!
//! Log-densities sum over the last axis, so a `[N, L]` input yields `[N, 1]`
//! per-row values and a `[L]` input yields `[1]`.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::autodiff::{Tensor, Var};
use crate::error::{Error, Result};
use crate::special::{gamma_p_da, gamma_p_inv, lgamma, std_gamma_log_pdf};

pub const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

/// Diagonal Gaussian parameterized by mean and log standard deviation.
#[derive(Clone, Copy, Debug)]
pub struct DiagGaussian<'t> {
    pub mu: Var<'t>,
    pub log_sigma: Var<'t>,
}

impl<'t> DiagGaussian<'t> {
    pub fn new(mu: Var<'t>, log_sigma: Var<'t>) -> Result<Self> {
        if mu.shape() != log_sigma.shape() {
            return Err(Error::shape(
                "DiagGaussian",
                &mu.shape(),
                &log_sigma.shape(),
            ));
        }
        Ok(DiagGaussian { mu, log_sigma })
    }
}

/// Concentration/rate pair of a Gamma distribution (rate convention: mean = a/b).
#[derive(Clone, Copy, Debug)]
pub struct GammaParams<'t> {
    pub concentration: Var<'t>,
    pub rate: Var<'t>,
}

impl<'t> GammaParams<'t> {
    pub fn new(concentration: Var<'t>, rate: Var<'t>) -> Result<Self> {
        if concentration.shape() != rate.shape() {
            return Err(Error::shape(
                "GammaParams",
                &concentration.shape(),
                &rate.shape(),
            ));
        }
        Ok(GammaParams {
            concentration,
            rate,
        })
    }

    /// Posterior mean a/b, detached from the tape.
    pub fn mean(&self) -> Tensor {
        let (a, b) = (self.concentration.value(), self.rate.value());
        let data = a.data().iter().zip(b.data()).map(|(a, b)| a / b).collect();
        Tensor::new(a.shape().to_vec(), data).expect("shapes match by construction")
    }
}

fn sum_last(v: Var<'_>) -> Result<Var<'_>> {
    match v.shape().len() {
        0 => Ok(v),
        r => v.sum_axis(r - 1),
    }
}

fn check_last_dim(op: &'static str, a: &[usize], b: &[usize]) -> Result<()> {
    if a.last() != b.last() {
        return Err(Error::shape(op, a, b));
    }
    Ok(())
}

/// Σ_l [−½ log 2π − log σ_l − (x_l − μ_l)² / (2σ_l²)]
pub fn gaussian_log_prob<'t>(x: Var<'t>, d: &DiagGaussian<'t>) -> Result<Var<'t>> {
    check_last_dim("gaussian_log_prob", &x.shape(), &d.mu.shape())?;
    let standardized = x.sub(d.mu)?.mul(d.log_sigma.neg().exp())?;
    let terms = standardized
        .square()
        .scale(-0.5)
        .sub(d.log_sigma)?
        .add_scalar(-HALF_LN_2PI);
    sum_last(terms)
}

pub fn standard_normal_log_prob(x: Var<'_>) -> Result<Var<'_>> {
    sum_last(x.square().scale(-0.5).add_scalar(-HALF_LN_2PI))
}

/// z = μ + σ ⊙ ε with ε ~ N(0, I).
pub fn gaussian_rsample<'t, R: Rng + ?Sized>(d: &DiagGaussian<'t>, rng: &mut R) -> Result<Var<'t>> {
    let shape = d.mu.shape();
    let n = shape.iter().product();
    let eps: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
    let eps = d.mu.tape().constant(Tensor::new(shape, eps)?);
    d.mu.add(d.log_sigma.exp().mul(eps)?)
}

/// Σ_l [½ log(2πe) + log σ_l]
pub fn gaussian_entropy<'t>(d: &DiagGaussian<'t>) -> Result<Var<'t>> {
    sum_last(d.log_sigma.add_scalar(HALF_LN_2PI + 0.5))
}

/// Σ_l [a_l log b_l − lnΓ(a_l) + (a_l − 1) log α_l − b_l α_l]
pub fn gamma_log_prob<'t>(alpha: Var<'t>, g: &GammaParams<'t>) -> Result<Var<'t>> {
    check_last_dim("gamma_log_prob", &alpha.shape(), &g.concentration.shape())?;
    let (a, b) = (g.concentration, g.rate);
    let terms = a
        .mul(b.log()?)?
        .sub(a.lgamma()?)?
        .add(a.add_scalar(-1.0).mul(alpha.log()?)?)?
        .sub(b.mul(alpha)?)?;
    sum_last(terms)
}

/// log N(z; 0, α⁻¹ I) = Σ_l [−½ log 2π + ½ log α_l − ½ α_l z_l²]
pub fn latent_prior_log_prob<'t>(z: Var<'t>, alpha: Var<'t>) -> Result<Var<'t>> {
    check_last_dim("latent_prior_log_prob", &z.shape(), &alpha.shape())?;
    let quad = z.square().mul(alpha)?.scale(-0.5);
    let terms = quad.add(alpha.log()?.scale(0.5))?.add_scalar(-HALF_LN_2PI);
    sum_last(terms)
}

/// How the unit-rate Gamma variate behind an implicit-reparameterized draw is produced.
#[derive(Clone, Copy, Debug)]
pub enum GammaDraw<'a> {
    /// Marsaglia–Tsang rejection sampling.
    Sample,
    /// Inverse CDF at the given uniforms, one per element; deterministic in the parameters.
    Quantile(&'a [f64]),
}

/// Smallest concentration the sampler accepts.
pub const MIN_CONCENTRATION: f64 = 1e-6;

/// Draws from Gamma(a, 1) by Marsaglia–Tsang, boosting a < 1 via Gamma(a + 1)·U^(1/a).
/// Draws that would underflow are returned as `f64::MIN_POSITIVE`.
pub fn sample_std_gamma<R: Rng + ?Sized>(a: f64, rng: &mut R) -> Result<f64> {
    if !(a >= MIN_CONCENTRATION) || !a.is_finite() {
        return Err(Error::domain(
            "gamma sampler",
            format!("concentration {a} out of range"),
        ));
    }
    if a < 1.0 {
        let s = marsaglia_tsang(a + 1.0, rng);
        let u: f64 = 1.0 - rng.random::<f64>();
        let log_s = s.ln() + u.ln() / a;
        if log_s.is_nan() {
            return Err(Error::domain(
                "gamma sampler",
                format!("NaN draw for concentration {a}"),
            ));
        }
        // tiny concentrations put almost all mass below the smallest normal double
        return Ok(log_s.exp().max(f64::MIN_POSITIVE));
    }
    Ok(marsaglia_tsang(a, rng))
}

fn marsaglia_tsang<R: Rng + ?Sized>(a: f64, rng: &mut R) -> f64 {
    let d = a - 1.0 / 3.0;
    let c = 1.0 / (9.0 * d).sqrt();
    loop {
        let x: f64 = rng.sample(StandardNormal);
        let v = 1.0 + c * x;
        if v <= 0.0 {
            continue;
        }
        let v = v * v * v;
        let u: f64 = 1.0 - rng.random::<f64>();
        let x2 = x * x;
        if u < 1.0 - 0.0331 * x2 * x2 || u.ln() < 0.5 * x2 + d * (1.0 - v + v.ln()) {
            return d * v;
        }
    }
}

/// Draws α ~ Gamma(a, b) with implicit reparameterization gradients.
///
/// α = s / b with s ~ Gamma(a, 1). The local derivatives attached to the tape are
/// ∂α/∂b = −α/b and ∂α/∂a = −(∂P/∂a)(a, s) / (b · p(s; a)), where P is the
/// regularized lower incomplete gamma function and p the unit-rate density.
pub fn gamma_implicit_rsample<'t, R: Rng + ?Sized>(
    g: &GammaParams<'t>,
    rng: &mut R,
    draw: GammaDraw<'_>,
) -> Result<Var<'t>> {
    let (a, b) = (g.concentration.value(), g.rate.value());
    if let GammaDraw::Quantile(u) = draw {
        if u.len() != a.numel() {
            return Err(Error::InvalidArgument(format!(
                "{} uniforms supplied for {} Gamma draws",
                u.len(),
                a.numel()
            )));
        }
    }
    let n = a.numel();
    let mut alpha = Vec::with_capacity(n);
    let mut da = Vec::with_capacity(n);
    let mut db = Vec::with_capacity(n);
    for i in 0..n {
        let (ai, bi) = (a.data()[i], b.data()[i]);
        if !(bi > 0.0) || !bi.is_finite() {
            return Err(Error::domain(
                "gamma_implicit_rsample",
                format!("rate {bi} must be positive"),
            ));
        }
        let s = match draw {
            GammaDraw::Sample => sample_std_gamma(ai, rng)?,
            GammaDraw::Quantile(u) => {
                if !(ai >= MIN_CONCENTRATION) {
                    return Err(Error::domain(
                        "gamma sampler",
                        format!("concentration {ai} out of range"),
                    ));
                }
                gamma_p_inv(ai, u[i])?
            }
        };
        let value = s / bi;
        let density = std_gamma_log_pdf(ai, s).exp();
        let ds_da = -gamma_p_da(ai, s)? / density;
        alpha.push(value);
        da.push(ds_da / bi);
        db.push(-value / bi);
    }
    let value = Tensor::new(a.shape().to_vec(), alpha)?;
    if !value.all_finite() || da.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite {
            context: "implicit Gamma draw".into(),
        });
    }
    g.concentration
        .tape()
        .custom_elementwise(value, &[(g.concentration, da), (g.rate, db)])
}

/// Plain-number Gamma log-density, for tests and reporting.
pub fn gamma_log_density(alpha: f64, a: f64, b: f64) -> f64 {
    a * b.ln() - lgamma(a) + (a - 1.0) * alpha.ln() - b * alpha
}
