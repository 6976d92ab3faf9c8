//! Encoder, calibrated decoder, set-input relevance encoder, and their composition.

pub mod checkpoint;
pub mod layers;

use rand::Rng;

use crate::autodiff::{Binding, ParamGroup, ParamId, ParamStore, Tensor, Var};
use crate::config::{Architecture, DatasetFamily, ExperimentConfig, ModelConfig, Variant};
use crate::distributions::{DiagGaussian, GammaParams};
use crate::error::{Error, Result};
use crate::flows::FlowStack;
use crate::rng::SeedTree;
use layers::{Activation, Conv, HeadInit, Mlp};

/// Floor added after the softplus that produces Gamma parameters.
pub const POSITIVE_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug)]
enum Trunk {
    Dense,
    /// Stride-2 convolutions from a `[1, h, w]` image down to `[c, h/2^k, w/2^k]`.
    Conv {
        stages: Vec<Conv>,
        height: usize,
        width: usize,
    },
}

/// q(z|x): maps `[N, D]` data to a diagonal Gaussian over `[N, L]`.
#[derive(Clone, Debug)]
pub struct EncoderNet {
    trunk: Trunk,
    mlp: Mlp,
    latent_dim: usize,
    data_dim: usize,
}

/// p(x|z): maps `[N, L]` latents to `[N, D]` means; the scale is a single learned scalar.
#[derive(Clone, Debug)]
pub struct DecoderNet {
    mlp: Mlp,
    /// Transposed convolutions from `[c, h, w]` feature maps back to one channel.
    deconv: Option<(Vec<Conv>, [usize; 3])>,
    log_sigma: ParamId,
    sigmoid_output: bool,
    data_dim: usize,
}

/// DeepSets relevance encoder: mean-pooled features of (x, z) pairs mapped to Gamma parameters.
#[derive(Clone, Debug)]
pub struct RelevanceEncoder {
    data_features: Mlp,
    latent_features: Mlp,
    head: Mlp,
    latent_dim: usize,
}

impl EncoderNet {
    fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        family: DatasetFamily,
        cfg: &ModelConfig,
        rng: &mut R,
    ) -> Result<Self> {
        let data_dim = family.data_dim();
        let l = cfg.latent_dim;
        let (trunk, flat) = match cfg.architecture {
            Architecture::Mlp => (Trunk::Dense, data_dim),
            Architecture::Conv => {
                let (h, w) = family.image_shape().ok_or_else(|| {
                    Error::InvalidArgument(format!("conv encoder needs image data, not {family}"))
                })?;
                let mut stages = Vec::new();
                let mut ch = 1;
                for (i, &c) in cfg.conv_channels.iter().enumerate() {
                    stages.push(Conv::new(
                        store,
                        &format!("encoder.conv{i}"),
                        ParamGroup::Model,
                        ch,
                        c,
                        4,
                        2,
                        1,
                        false,
                        rng,
                    ));
                    ch = c;
                }
                let f = 1 << cfg.conv_channels.len();
                (
                    Trunk::Conv {
                        stages,
                        height: h,
                        width: w,
                    },
                    ch * (h / f) * (w / f),
                )
            }
        };
        let mut dims = vec![flat];
        dims.extend_from_slice(&cfg.hidden);
        dims.push(2 * l);
        let mlp = Mlp::new(
            store,
            "encoder.mlp",
            ParamGroup::Model,
            &dims,
            Activation::Relu,
            HeadInit::Kaiming,
            rng,
        );
        Ok(EncoderNet {
            trunk,
            mlp,
            latent_dim: l,
            data_dim,
        })
    }

    pub fn forward<'t>(&self, bind: &Binding<'t, '_>, x: Var<'t>) -> Result<DiagGaussian<'t>> {
        let shape = x.shape();
        if shape.len() != 2 || shape[1] != self.data_dim {
            return Err(Error::shape("encode", &shape, &[usize::MAX, self.data_dim]));
        }
        let n = shape[0];
        let features = match &self.trunk {
            Trunk::Dense => x,
            Trunk::Conv {
                stages,
                height,
                width,
            } => {
                let mut h = x.reshape(&[n, 1, *height, *width])?;
                for s in stages {
                    h = s.forward(bind, h)?.relu();
                }
                let flat = h.shape()[1..].iter().product::<usize>();
                h.reshape(&[n, flat])?
            }
        };
        let out = self.mlp.forward(bind, features)?;
        let l = self.latent_dim;
        DiagGaussian::new(out.slice(1, 0, l)?, out.slice(1, l, l)?)
    }
}

impl DecoderNet {
    fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        family: DatasetFamily,
        cfg: &ModelConfig,
        rng: &mut R,
    ) -> Result<Self> {
        let data_dim = family.data_dim();
        let mut dims = vec![cfg.latent_dim];
        dims.extend(cfg.hidden.iter().rev());
        let deconv = match cfg.architecture {
            Architecture::Mlp => {
                dims.push(data_dim);
                None
            }
            Architecture::Conv => {
                let (h, w) = family.image_shape().ok_or_else(|| {
                    Error::InvalidArgument(format!("conv decoder needs image data, not {family}"))
                })?;
                let f = 1 << cfg.conv_channels.len();
                let top = *cfg.conv_channels.last().expect("validated non-empty");
                dims.push(top * (h / f) * (w / f));
                let mut chans: Vec<usize> = cfg.conv_channels.iter().rev().copied().collect();
                chans.push(1);
                let stages = chans
                    .windows(2)
                    .enumerate()
                    .map(|(i, c)| {
                        Conv::new(
                            store,
                            &format!("decoder.deconv{i}"),
                            ParamGroup::Model,
                            c[0],
                            c[1],
                            4,
                            2,
                            1,
                            true,
                            rng,
                        )
                    })
                    .collect();
                Some((stages, [top, h / f, w / f]))
            }
        };
        let mlp = Mlp::new(
            store,
            "decoder.mlp",
            ParamGroup::Model,
            &dims,
            Activation::Relu,
            HeadInit::Kaiming,
            rng,
        );
        let log_sigma = store.register("decoder.log_sigma", ParamGroup::Model, Tensor::scalar(0.0));
        Ok(DecoderNet {
            mlp,
            deconv,
            log_sigma,
            sigmoid_output: family.image_shape().is_some(),
            data_dim,
        })
    }

    /// Returns (mean `[N, D]`, log σ as a rank-0 var).
    pub fn forward<'t>(&self, bind: &Binding<'t, '_>, z: Var<'t>) -> Result<(Var<'t>, Var<'t>)> {
        let n = z.shape()[0];
        let mut h = self.mlp.forward(bind, z)?;
        if let Some((stages, [c, hh, ww])) = &self.deconv {
            h = h.relu().reshape(&[n, *c, *hh, *ww])?;
            for (i, s) in stages.iter().enumerate() {
                h = s.forward(bind, h)?;
                if i + 1 < stages.len() {
                    h = h.relu();
                }
            }
            h = h.reshape(&[n, self.data_dim])?;
        }
        if self.sigmoid_output {
            h = h.sigmoid();
        }
        Ok((h, bind.var(self.log_sigma)))
    }
}

impl RelevanceEncoder {
    fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        data_dim: usize,
        cfg: &ModelConfig,
        rng: &mut R,
    ) -> Self {
        let f = cfg.relevance_features;
        let widths = |input: usize| {
            let mut d = vec![input];
            d.extend_from_slice(&cfg.relevance_hidden);
            d.push(f);
            d
        };
        let g = ParamGroup::Relevance;
        let data_features = Mlp::new(
            store,
            "relevance.data",
            g,
            &widths(data_dim),
            Activation::Relu,
            HeadInit::Kaiming,
            rng,
        );
        let latent_features = Mlp::new(
            store,
            "relevance.latent",
            g,
            &widths(cfg.latent_dim),
            Activation::Relu,
            HeadInit::Kaiming,
            rng,
        );
        let mut head_dims = vec![2 * f];
        head_dims.extend_from_slice(&cfg.relevance_hidden);
        head_dims.push(2 * cfg.latent_dim);
        // a zero head gives a = b = softplus(0) for every input, so the initial mean a/b is 1
        let head = Mlp::new(
            store,
            "relevance.head",
            g,
            &head_dims,
            Activation::Relu,
            HeadInit::Zero,
            rng,
        );
        RelevanceEncoder {
            data_features,
            latent_features,
            head,
            latent_dim: cfg.latent_dim,
        }
    }

    pub fn forward<'t>(
        &self,
        bind: &Binding<'t, '_>,
        x: Var<'t>,
        z: Var<'t>,
    ) -> Result<GammaParams<'t>> {
        let (xs, zs) = (x.shape(), z.shape());
        if xs.len() != 2 || zs.len() != 2 || xs[0] != zs[0] {
            return Err(Error::shape("infer_relevance", &xs, &zs));
        }
        if xs[0] < 2 {
            return Err(Error::InvalidArgument(format!(
                "relevance needs a set of at least 2 samples, got {}",
                xs[0]
            )));
        }
        let fx = self.data_features.forward(bind, x)?.relu();
        let fz = self.latent_features.forward(bind, z)?.relu();
        let pooled = Var::concat(&[fx, fz], 1)?.mean_axis(0)?;
        let raw = self.head.forward(bind, pooled)?;
        let l = self.latent_dim;
        let a = raw
            .slice(1, 0, l)?
            .softplus()
            .add_scalar(POSITIVE_FLOOR)
            .reshape(&[l])?;
        let b = raw
            .slice(1, l, l)?
            .softplus()
            .add_scalar(POSITIVE_FLOOR)
            .reshape(&[l])?;
        GammaParams::new(a, b)
    }
}

/// Encoder, decoder, relevance encoder and optional flow prior over one parameter store.
#[derive(Clone, Debug)]
pub struct RenModel {
    family: DatasetFamily,
    config: ModelConfig,
    params: ParamStore,
    encoder: EncoderNet,
    decoder: DecoderNet,
    relevance: RelevanceEncoder,
    flow: Option<FlowStack>,
    /// Point estimate of the relevance vector used by the inner updates and for reporting.
    pub current_alpha: Vec<f64>,
}

impl RenModel {
    pub fn new<R: Rng + ?Sized>(
        family: DatasetFamily,
        config: &ModelConfig,
        rng: &mut R,
    ) -> Result<Self> {
        let mut errors = Vec::new();
        config.validate(family, &mut errors);
        if !errors.is_empty() {
            return Err(Error::Config(errors));
        }
        let mut params = ParamStore::new();
        let encoder = EncoderNet::new(&mut params, family, config, rng)?;
        let decoder = DecoderNet::new(&mut params, family, config, rng)?;
        let flow = match config.variant {
            Variant::Vae => None,
            Variant::Dpvae => Some(FlowStack::new(
                &mut params,
                "flow",
                config.latent_dim,
                config.flow_blocks,
                &config.flow_hidden,
                config.flow_scale_max,
                HeadInit::Zero,
                rng,
            )?),
        };
        let relevance = RelevanceEncoder::new(&mut params, family.data_dim(), config, rng);
        Ok(RenModel {
            family,
            config: config.clone(),
            params,
            encoder,
            decoder,
            relevance,
            flow,
            current_alpha: vec![1.0; config.latent_dim],
        })
    }

    pub fn family(&self) -> DatasetFamily {
        self.family
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn latent_dim(&self) -> usize {
        self.config.latent_dim
    }

    pub fn data_dim(&self) -> usize {
        self.family.data_dim()
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn flow(&self) -> Option<&FlowStack> {
        self.flow.as_ref()
    }

    pub fn encoder(&self) -> &EncoderNet {
        &self.encoder
    }

    pub fn decoder(&self) -> &DecoderNet {
        &self.decoder
    }

    pub fn relevance(&self) -> &RelevanceEncoder {
        &self.relevance
    }

    /// Fixed hyperprior (concentration, rate).
    pub fn prior(&self) -> (f64, f64) {
        (self.config.prior_concentration, self.config.prior_rate)
    }

    pub fn log_sigma_dec(&self) -> f64 {
        self.params.get(self.decoder.log_sigma).item()
    }

    pub fn log_sigma_dec_id(&self) -> ParamId {
        self.decoder.log_sigma
    }

    pub fn encode<'t>(&self, bind: &Binding<'t, '_>, x: Var<'t>) -> Result<DiagGaussian<'t>> {
        self.encoder.forward(bind, x)
    }

    pub fn decode<'t>(&self, bind: &Binding<'t, '_>, z: Var<'t>) -> Result<(Var<'t>, Var<'t>)> {
        if z.shape().len() != 2 || z.shape()[1] != self.latent_dim() {
            return Err(Error::shape(
                "decode",
                &z.shape(),
                &[usize::MAX, self.latent_dim()],
            ));
        }
        self.decoder.forward(bind, z)
    }

    pub fn infer_relevance<'t>(
        &self,
        bind: &Binding<'t, '_>,
        x: Var<'t>,
        z: Var<'t>,
    ) -> Result<GammaParams<'t>> {
        self.relevance.forward(bind, x, z)
    }
}

/// Builds the model described by an experiment config, initialized from its seed.
pub fn build_model(cfg: &ExperimentConfig) -> Result<RenModel> {
    let mut rng = SeedTree::new(cfg.train.seed).child("init").rng();
    RenModel::new(cfg.dataset.name, &cfg.model, &mut rng)
}
