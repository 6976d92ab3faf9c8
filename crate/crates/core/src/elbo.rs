//! Five-term evidence lower bounds with a global relevance vector.
//!
//! Every term is averaged per datum. The two terms that involve the single
//! batch-level α (its posterior and its hyperprior) are divided by the batch size.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Binding, Tensor, Var};
use crate::config::{FlowAlpha, Variant};
use crate::distributions::{
    gamma_implicit_rsample, gamma_log_prob, gaussian_log_prob, gaussian_rsample,
    latent_prior_log_prob, standard_normal_log_prob, GammaDraw, GammaParams, HALF_LN_2PI,
};
use crate::error::{Error, Result};
use crate::networks::RenModel;

/// Scalar values of the ELBO terms.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ElboBreakdown {
    pub recon: f64,
    pub neg_entropy_q_z: f64,
    pub neg_entropy_q_alpha: f64,
    pub prior_z: f64,
    pub prior_alpha: f64,
    pub total: f64,
}

impl ElboBreakdown {
    /// recon − neg_entropy_q_z − neg_entropy_q_alpha + prior_z + prior_alpha, in that order.
    pub fn signed_sum(&self) -> f64 {
        self.recon - self.neg_entropy_q_z - self.neg_entropy_q_alpha
            + self.prior_z
            + self.prior_alpha
    }
}

/// The ELBO as recorded on a tape, ready for a reverse pass from `total`.
pub struct ElboGraph<'t> {
    pub recon: Var<'t>,
    pub neg_entropy_q_z: Var<'t>,
    pub neg_entropy_q_alpha: Var<'t>,
    pub prior_z: Var<'t>,
    pub prior_alpha: Var<'t>,
    pub total: Var<'t>,
    /// Relevance posterior, when α was inferred rather than fixed.
    pub relevance: Option<GammaParams<'t>>,
    pub z: Var<'t>,
    pub alpha: Var<'t>,
}

impl ElboGraph<'_> {
    pub fn breakdown(&self) -> ElboBreakdown {
        ElboBreakdown {
            recon: self.recon.item(),
            neg_entropy_q_z: self.neg_entropy_q_z.item(),
            neg_entropy_q_alpha: self.neg_entropy_q_alpha.item(),
            prior_z: self.prior_z.item(),
            prior_alpha: self.prior_alpha.item(),
            total: self.total.item(),
        }
    }
}

/// Where the relevance vector comes from.
#[derive(Clone, Copy, Debug)]
pub enum AlphaSource<'a> {
    /// Held fixed (the inner updates use the current point estimate).
    Fixed(&'a [f64]),
    /// Drawn from the relevance posterior of the batch.
    Inferred(GammaDraw<'a>),
}

/// Which latent prior the bound uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LatentPrior {
    /// N(0, α⁻¹ I).
    Ard,
    /// Coupling flow, with α entering per the model's flow_alpha setting.
    Flow,
}

/// Gaussian log-likelihood with scalar scale, averaged over rows.
pub fn recon_log_likelihood<'t>(x: Var<'t>, mean: Var<'t>, log_sigma: Var<'t>) -> Result<Var<'t>> {
    let shape = x.shape();
    let d = shape[shape.len() - 1] as f64;
    let n = shape[0] as f64;
    let sq = x.sub(mean)?.square().sum().scale(1.0 / n);
    let ll = sq
        .mul(log_sigma.scale(-2.0).exp())?
        .scale(-0.5)
        .sub(log_sigma.scale(d))?
        .add_scalar(-d * HALF_LN_2PI);
    Ok(ll)
}

/// Per-row log p(z) under the model's flow prior, given α.
pub fn flow_latent_log_prob<'t>(
    model: &RenModel,
    bind: &Binding<'t, '_>,
    z: Var<'t>,
    alpha: Var<'t>,
) -> Result<Var<'t>> {
    let flow = model
        .flow()
        .ok_or_else(|| Error::InvalidArgument("model has no flow prior".into()))?;
    match model.config().flow_alpha {
        FlowAlpha::Off => {
            let (z0, log_det) = flow.forward(bind, z)?;
            standard_normal_log_prob(z0)?.add(log_det)
        }
        FlowAlpha::Base => {
            let (z0, log_det) = flow.forward(bind, z)?;
            latent_prior_log_prob(z0, alpha)?.add(log_det)
        }
        FlowAlpha::Input => {
            let log_alpha = alpha.log()?;
            let scaled = z.mul(log_alpha.scale(0.5).exp())?;
            let (z0, log_det) = flow.forward(bind, scaled)?;
            standard_normal_log_prob(z0)?
                .add(log_det)?
                .add(log_alpha.sum().scale(0.5))
        }
    }
}

/// Builds the bound on `bind`'s tape for the data batch `x` (`[N, D]`).
///
/// Random draws happen in a fixed order: the N×L Gaussian noise for z, then α.
pub fn elbo<'t, R: Rng + ?Sized>(
    model: &RenModel,
    bind: &Binding<'t, '_>,
    x: &Tensor,
    rng: &mut R,
    prior: LatentPrior,
    alpha: AlphaSource<'_>,
) -> Result<ElboGraph<'t>> {
    let tape = bind.tape();
    let n = x.shape()[0];
    if n == 0 {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let xv = tape.constant(x.clone());
    let q = model.encode(bind, xv)?;
    let z = gaussian_rsample(&q, rng)?;
    let neg_entropy_q_z = gaussian_log_prob(z, &q)?.mean();

    let (mean, log_sigma) = model.decode(bind, z)?;
    let recon = recon_log_likelihood(xv, mean, log_sigma)?;

    let (alpha, relevance) = match alpha {
        AlphaSource::Fixed(values) => {
            if values.len() != model.latent_dim() {
                return Err(Error::shape(
                    "elbo alpha",
                    &[values.len()],
                    &[model.latent_dim()],
                ));
            }
            (tape.constant(Tensor::vector(values.to_vec())), None)
        }
        AlphaSource::Inferred(draw) => {
            if n < 2 {
                return Err(Error::InvalidArgument(format!(
                    "relevance inference needs a batch of at least 2, got {n}"
                )));
            }
            let g = model.infer_relevance(bind, xv, z)?;
            (gamma_implicit_rsample(&g, rng, draw)?, Some(g))
        }
    };

    let prior_z = match prior {
        LatentPrior::Ard => latent_prior_log_prob(z, alpha)?.mean(),
        LatentPrior::Flow => flow_latent_log_prob(model, bind, z, alpha)?.mean(),
    };

    let (neg_entropy_q_alpha, prior_alpha) = match &relevance {
        None => (tape.scalar(0.0), tape.scalar(0.0)),
        Some(g) => {
            let (a0, b0) = model.prior();
            let l = model.latent_dim();
            let hyper = GammaParams::new(
                tape.constant(Tensor::full(vec![l], a0)),
                tape.constant(Tensor::full(vec![l], b0)),
            )?;
            let scale = 1.0 / n as f64;
            (
                gamma_log_prob(alpha, g)?.sum().scale(scale),
                gamma_log_prob(alpha, &hyper)?.sum().scale(scale),
            )
        }
    };

    let total = recon
        .sub(neg_entropy_q_z)?
        .sub(neg_entropy_q_alpha)?
        .add(prior_z)?
        .add(prior_alpha)?;
    Ok(ElboGraph {
        recon,
        neg_entropy_q_z,
        neg_entropy_q_alpha,
        prior_z,
        prior_alpha,
        total,
        relevance,
        z,
        alpha,
    })
}

/// Relevance-encoded bound with the N(0, α⁻¹ I) latent prior.
pub fn elbo_ren_vae<'t, R: Rng + ?Sized>(
    model: &RenModel,
    bind: &Binding<'t, '_>,
    x: &Tensor,
    rng: &mut R,
) -> Result<ElboGraph<'t>> {
    elbo(
        model,
        bind,
        x,
        rng,
        LatentPrior::Ard,
        AlphaSource::Inferred(GammaDraw::Sample),
    )
}

/// Relevance-encoded bound with the flow prior.
pub fn elbo_ren_dpvae<'t, R: Rng + ?Sized>(
    model: &RenModel,
    bind: &Binding<'t, '_>,
    x: &Tensor,
    rng: &mut R,
) -> Result<ElboGraph<'t>> {
    if model.flow().is_none() {
        return Err(Error::InvalidArgument(
            "dpvae bound requires a flow prior".into(),
        ));
    }
    elbo(
        model,
        bind,
        x,
        rng,
        LatentPrior::Flow,
        AlphaSource::Inferred(GammaDraw::Sample),
    )
}

/// The relevance-encoded bound matching the model's variant.
pub fn elbo_ren<'t, R: Rng + ?Sized>(
    model: &RenModel,
    bind: &Binding<'t, '_>,
    x: &Tensor,
    rng: &mut R,
) -> Result<ElboGraph<'t>> {
    match model.flow() {
        Some(_) => elbo_ren_dpvae(model, bind, x, rng),
        None => elbo_ren_vae(model, bind, x, rng),
    }
}

/// Bound with α fixed at the model's current estimate and both α terms zero.
pub fn elbo_plain<'t, R: Rng + ?Sized>(
    model: &RenModel,
    bind: &Binding<'t, '_>,
    x: &Tensor,
    rng: &mut R,
    variant: Variant,
) -> Result<ElboGraph<'t>> {
    let prior = match variant {
        Variant::Vae => LatentPrior::Ard,
        Variant::Dpvae => {
            if model.flow().is_none() {
                return Err(Error::InvalidArgument(
                    "dpvae bound requires a flow prior".into(),
                ));
            }
            LatentPrior::Flow
        }
    };
    let alpha = model.current_alpha.clone();
    elbo(model, bind, x, rng, prior, AlphaSource::Fixed(&alpha))
}
