#![allow(dead_code)]

pub mod oracle;

use rand::Rng;
use ren_core::rng::SeedTree;
use ren_core::{Tape, Tensor, Var};

pub fn random_tensor(shape: &[usize], lo: f64, hi: f64, seed: u64) -> Tensor {
    let mut rng = SeedTree::new(seed).rng();
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.random_range(lo..hi)).collect(),
    )
    .unwrap()
}

/// Largest relative discrepancy between reverse-mode gradients of `f` and central
/// differences with step `h`, over every element of every input.
///
/// Relative error is |analytic − numeric| / max(|analytic|, |numeric|, floor).
pub fn fd_max_rel_error<F>(inputs: &[Tensor], h: f64, floor: f64, f: F) -> f64
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Var<'t>,
{
    let tape = Tape::new();
    let vars: Vec<Var<'_>> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = f(&tape, &vars);
    let grads = tape.backward(out).unwrap();
    let analytic: Vec<Tensor> = vars.iter().map(|v| grads.wrt(*v)).collect();

    let eval = |perturbed: &[Tensor]| {
        let tape = Tape::new();
        let vars: Vec<Var<'_>> = perturbed.iter().map(|t| tape.constant(t.clone())).collect();
        f(&tape, &vars).item()
    };
    let mut worst = 0.0f64;
    for (k, input) in inputs.iter().enumerate() {
        for i in 0..input.numel() {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[i] += h;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[i] -= h;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h);
            let a = analytic[k].data()[i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(floor);
            worst = worst.max(rel);
        }
    }
    worst
}

/// Pushes values within `margin` of zero out to at least `margin`.
pub fn away_from_zero(t: &Tensor, margin: f64) -> Tensor {
    t.map(|x| {
        if x.abs() >= margin {
            x
        } else if x >= 0.0 {
            x + margin
        } else {
            x - margin
        }
    })
}

/// Fits only the decoder log σ on a frozen batch with frozen latent draws, by Adam at `lr`
/// for `steps` updates. Returns (σ², mean squared residual per coordinate).
pub fn calibrate_log_sigma(
    model: &mut ren_core::RenModel,
    x: &Tensor,
    steps: usize,
    lr: f64,
) -> (f64, f64) {
    use ren_core::elbo::elbo_plain;
    use ren_core::{Adam, ParamGroup, Variant};
    let variant = if model.flow().is_some() {
        Variant::Dpvae
    } else {
        Variant::Vae
    };
    let id = model.log_sigma_dec_id();
    let mut adam = Adam::new();
    let mut z = None;
    for _ in 0..steps {
        let tape = Tape::new();
        let bind = model.params().bind(&tape, |g| g == ParamGroup::Model);
        let g = elbo_plain(model, &bind, x, &mut SeedTree::new(7).rng(), variant).unwrap();
        z.get_or_insert_with(|| g.z.value());
        let grads = tape.backward(g.recon.neg()).unwrap();
        let only: Vec<_> = bind
            .collect(&grads)
            .into_iter()
            .filter(|(p, _)| *p == id)
            .collect();
        drop(bind);
        adam.step(model.params_mut(), only, lr).unwrap();
    }
    let mean = ren_core::metrics::decode_means(model, z.as_ref().unwrap()).unwrap();
    let msr = x
        .data()
        .iter()
        .zip(mean.data())
        .map(|(a, b)| (a - b).powi(2))
        .sum::<f64>()
        / x.numel() as f64;
    ((2.0 * model.log_sigma_dec()).exp(), msr)
}
