//! Affine coupling flow g(z) = z₀ used as the learned latent prior.

use rand::Rng;

use crate::autodiff::{Binding, ParamGroup, ParamStore, Tensor, Var};
use crate::distributions::standard_normal_log_prob;
use crate::error::{Error, Result};
use crate::networks::layers::{Activation, HeadInit, Mlp};

/// One affine coupling transform.
///
/// y = b⊙z + (1−b)⊙(z⊙exp(s(b⊙z)) + t(b⊙z)) with s = s_max·tanh(scale_net(b⊙z)).
#[derive(Clone, Debug)]
pub struct CouplingBlock {
    mask: Vec<f64>,
    scale: Mlp,
    translate: Mlp,
    scale_max: f64,
}

#[derive(Clone, Debug)]
pub struct FlowStack {
    blocks: Vec<CouplingBlock>,
    dim: usize,
}

/// Alternating even/odd mask for block `k`.
pub fn coupling_mask(dim: usize, k: usize) -> Vec<f64> {
    (0..dim)
        .map(|i| if (i + k) % 2 == 0 { 1.0 } else { 0.0 })
        .collect()
}

impl CouplingBlock {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        mask: Vec<f64>,
        hidden: &[usize],
        scale_max: f64,
        head: HeadInit,
        rng: &mut R,
    ) -> Self {
        let dim = mask.len();
        let mut dims = vec![dim];
        dims.extend_from_slice(hidden);
        dims.push(dim);
        let scale = Mlp::new(
            store,
            &format!("{name}.scale"),
            ParamGroup::Model,
            &dims,
            Activation::Tanh,
            head,
            rng,
        );
        let translate = Mlp::new(
            store,
            &format!("{name}.translate"),
            ParamGroup::Model,
            &dims,
            Activation::Tanh,
            head,
            rng,
        );
        CouplingBlock {
            mask,
            scale,
            translate,
            scale_max,
        }
    }

    pub fn mask(&self) -> &[f64] {
        &self.mask
    }

    fn conditioners<'t>(
        &self,
        bind: &Binding<'t, '_>,
        masked: Var<'t>,
    ) -> Result<(Var<'t>, Var<'t>)> {
        let s = self
            .scale
            .forward(bind, masked)?
            .tanh()
            .scale(self.scale_max);
        let t = self.translate.forward(bind, masked)?;
        Ok((s, t))
    }

    /// Returns (y, per-row log|det J|) for a `[N, L]` input.
    pub fn forward<'t>(&self, bind: &Binding<'t, '_>, z: Var<'t>) -> Result<(Var<'t>, Var<'t>)> {
        let tape = bind.tape();
        let b = tape.constant(Tensor::vector(self.mask.clone()));
        let nb = tape.constant(Tensor::vector(self.mask.iter().map(|m| 1.0 - m).collect()));
        let masked = z.mul(b)?;
        let (s, t) = self.conditioners(bind, masked)?;
        let moved = z.mul(s.exp())?.add(t)?.mul(nb)?;
        let y = masked.add(moved)?;
        let log_det = s.mul(nb)?.sum_axis(1)?;
        Ok((y, log_det))
    }

    pub fn inverse<'t>(&self, bind: &Binding<'t, '_>, y: Var<'t>) -> Result<Var<'t>> {
        let tape = bind.tape();
        let b = tape.constant(Tensor::vector(self.mask.clone()));
        let nb = tape.constant(Tensor::vector(self.mask.iter().map(|m| 1.0 - m).collect()));
        let masked = y.mul(b)?;
        let (s, t) = self.conditioners(bind, masked)?;
        let moved = y.sub(t)?.mul(s.neg().exp())?.mul(nb)?;
        masked.add(moved)
    }
}

impl FlowStack {
    /// `k` blocks with alternating masks; zero heads start the flow at the identity.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        k: usize,
        hidden: &[usize],
        scale_max: f64,
        head: HeadInit,
        rng: &mut R,
    ) -> Result<Self> {
        if k < 2 {
            return Err(Error::InvalidArgument(format!(
                "a flow needs at least 2 coupling blocks, got {k}"
            )));
        }
        if dim == 0 {
            return Err(Error::InvalidArgument(
                "flow dimension must be positive".into(),
            ));
        }
        let blocks = (0..k)
            .map(|i| {
                CouplingBlock::new(
                    store,
                    &format!("{name}.{i}"),
                    coupling_mask(dim, i),
                    hidden,
                    scale_max,
                    head,
                    rng,
                )
            })
            .collect();
        Ok(FlowStack { blocks, dim })
    }

    pub fn from_blocks(blocks: Vec<CouplingBlock>) -> Result<Self> {
        if blocks.len() < 2 {
            return Err(Error::InvalidArgument(
                "a flow needs at least 2 coupling blocks".into(),
            ));
        }
        let dim = blocks[0].mask.len();
        if blocks.iter().any(|b| b.mask.len() != dim) {
            return Err(Error::InvalidArgument(
                "coupling blocks disagree on dimension".into(),
            ));
        }
        Ok(FlowStack { blocks, dim })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn blocks(&self) -> &[CouplingBlock] {
        &self.blocks
    }

    fn check(&self, z: &Var<'_>) -> Result<()> {
        let shape = z.shape();
        if shape.len() != 2 || shape[1] != self.dim {
            return Err(Error::shape("flow", &shape, &[usize::MAX, self.dim]));
        }
        Ok(())
    }

    /// z ↦ (z₀, log|det ∂z₀/∂z|) with log_det of shape `[N, 1]`.
    pub fn forward<'t>(&self, bind: &Binding<'t, '_>, z: Var<'t>) -> Result<(Var<'t>, Var<'t>)> {
        self.check(&z)?;
        let mut h = z;
        let mut log_det: Option<Var<'t>> = None;
        for block in &self.blocks {
            let (y, ld) = block.forward(bind, h)?;
            h = y;
            log_det = Some(match log_det {
                Some(acc) => acc.add(ld)?,
                None => ld,
            });
        }
        Ok((h, log_det.expect("at least two blocks")))
    }

    pub fn inverse<'t>(&self, bind: &Binding<'t, '_>, z0: Var<'t>) -> Result<Var<'t>> {
        self.check(&z0)?;
        let mut h = z0;
        for block in self.blocks.iter().rev() {
            h = block.inverse(bind, h)?;
        }
        Ok(h)
    }
}

/// log N(g(z); 0, I) + log|det ∂g/∂z| per row.
pub fn flow_prior_log_prob<'t>(
    flow: &FlowStack,
    bind: &Binding<'t, '_>,
    z: Var<'t>,
) -> Result<Var<'t>> {
    let (z0, log_det) = flow.forward(bind, z)?;
    standard_normal_log_prob(z0)?.add(log_det)
}
