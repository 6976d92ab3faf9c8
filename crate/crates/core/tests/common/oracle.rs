//! Straight-line reimplementation of the bounds: plain loops over parameters looked up
//! by name, replaying the library's random stream.

use rand::seq::IndexedRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use ren_core::config::DatasetFamily;
use ren_core::distributions::GammaDraw;
use ren_core::elbo::{elbo, AlphaSource, ElboBreakdown, LatentPrior};
use ren_core::networks::POSITIVE_FLOOR;
use ren_core::rng::{RenRng, SeedTree};
use ren_core::{
    build_model, ExperimentConfig, FlowAlpha, ParamStore, RenModel, Tape, Tensor, Variant,
};

use super::random_tensor;

pub const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

pub type Rows = Vec<Vec<f64>>;

#[derive(Clone, Copy, PartialEq)]
pub enum Act {
    Relu,
    Tanh,
}

pub fn param<'a>(store: &'a ParamStore, name: &str) -> Option<&'a Tensor> {
    store.find(name).map(|id| store.get(id))
}

pub fn dense(store: &ParamStore, prefix: &str, act: Act, x: &Rows) -> Rows {
    let mut h = x.clone();
    let mut i = 0;
    while let Some(w) = param(store, &format!("{prefix}.{i}.weight")) {
        let b = param(store, &format!("{prefix}.{i}.bias")).unwrap();
        let (inp, out) = (w.shape()[0], w.shape()[1]);
        let hidden = param(store, &format!("{prefix}.{}.weight", i + 1)).is_some();
        h = h
            .iter()
            .map(|row| {
                (0..out)
                    .map(|o| {
                        let mut s = b.data()[o];
                        for k in 0..inp {
                            s += row[k] * w.data()[k * out + o];
                        }
                        match (hidden, act) {
                            (false, _) => s,
                            (true, Act::Relu) => s.max(0.0),
                            (true, Act::Tanh) => s.tanh(),
                        }
                    })
                    .collect()
            })
            .collect();
        i += 1;
    }
    h
}

pub fn softplus(x: f64) -> f64 {
    x.exp().ln_1p()
}

/// Lanczos (g = 7, 9 terms) log-gamma for positive arguments.
pub fn oracle_lgamma(x: f64) -> f64 {
    const C: [f64; 9] = [
        0.999_999_999_999_809_9,
        676.520_368_121_885_1,
        -1_259.139_216_722_402_8,
        771.323_428_777_653_1,
        -176.615_029_162_140_6,
        12.507_343_278_686_905,
        -0.138_571_095_265_720_12,
        9.984_369_578_019_572e-6,
        1.505_632_735_149_311_6e-7,
    ];
    if x < 0.5 {
        let pi = std::f64::consts::PI;
        return (pi / (pi * x).sin()).ln() - oracle_lgamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut a = C[0];
    let t = x + 7.5;
    for (i, c) in C.iter().enumerate().skip(1) {
        a += c / (x + i as f64);
    }
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + a.ln()
}

pub fn marsaglia_tsang(a: f64, rng: &mut RenRng) -> f64 {
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
        if u < 1.0 - 0.0331 * x.powi(4) || u.ln() < 0.5 * x * x + d * (1.0 - v + v.ln()) {
            return d * v;
        }
    }
}

pub fn oracle_gamma_draw(a: f64, rng: &mut RenRng) -> f64 {
    if a < 1.0 {
        let s = marsaglia_tsang(a + 1.0, rng);
        let u: f64 = 1.0 - rng.random::<f64>();
        return (s.ln() + u.ln() / a).exp().max(f64::MIN_POSITIVE);
    }
    marsaglia_tsang(a, rng)
}

pub fn gamma_lp(alpha: f64, a: f64, b: f64) -> f64 {
    a * b.ln() - oracle_lgamma(a) + (a - 1.0) * alpha.ln() - b * alpha
}

pub fn oracle_flow(store: &ParamStore, model: &RenModel, z: &[f64]) -> (Vec<f64>, f64) {
    let l = z.len();
    let smax = model.config().flow_scale_max;
    let mut h = z.to_vec();
    let mut log_det = 0.0;
    for k in 0..model.config().flow_blocks {
        let mask: Vec<f64> = (0..l)
            .map(|i| if (i + k) % 2 == 0 { 1.0 } else { 0.0 })
            .collect();
        let masked: Vec<f64> = h.iter().zip(&mask).map(|(v, m)| v * m).collect();
        let s = &dense(
            store,
            &format!("flow.{k}.scale"),
            Act::Tanh,
            &vec![masked.clone()],
        )[0];
        let t = &dense(
            store,
            &format!("flow.{k}.translate"),
            Act::Tanh,
            &vec![masked.clone()],
        )[0];
        for i in 0..l {
            let si = smax * s[i].tanh();
            if mask[i] == 0.0 {
                h[i] = h[i] * si.exp() + t[i];
                log_det += si;
            }
        }
    }
    (h, log_det)
}

/// Reimplements the relevance-encoded bound (or the plain one when `fixed_alpha` is set).
pub fn oracle_elbo(
    model: &RenModel,
    x: &Tensor,
    seed: u64,
    fixed_alpha: Option<&[f64]>,
    prior: LatentPrior,
) -> ElboBreakdown {
    let store = model.params();
    let mut rng = SeedTree::new(seed).rng();
    let (n, d, l) = (x.rows(), x.cols(), model.latent_dim());
    let xs: Rows = (0..n).map(|i| x.row(i).to_vec()).collect();
    let enc = dense(store, "encoder.mlp", Act::Relu, &xs);
    let mut z = vec![vec![0.0; l]; n];
    let mut nqz = 0.0;
    for i in 0..n {
        for j in 0..l {
            let e: f64 = rng.sample(StandardNormal);
            let (mu, ls) = (enc[i][j], enc[i][l + j]);
            z[i][j] = mu + ls.exp() * e;
            let std = (z[i][j] - mu) / ls.exp();
            nqz += -HALF_LN_2PI - ls - 0.5 * std * std;
        }
    }
    nqz /= n as f64;
    let dec = dense(store, "decoder.mlp", Act::Relu, &z);
    let lsd = param(store, "decoder.log_sigma").unwrap().item();
    let mut sq = 0.0;
    for i in 0..n {
        for k in 0..d {
            sq += (xs[i][k] - dec[i][k]).powi(2);
        }
    }
    let recon =
        -0.5 * (sq / n as f64) * (-2.0 * lsd).exp() - d as f64 * lsd - d as f64 * HALF_LN_2PI;

    let (alpha, nqa, pa) = match fixed_alpha {
        Some(a) => (a.to_vec(), 0.0, 0.0),
        None => {
            let fx: Rows = dense(store, "relevance.data", Act::Relu, &xs)
                .into_iter()
                .map(|r| r.into_iter().map(|v| v.max(0.0)).collect())
                .collect();
            let fz: Rows = dense(store, "relevance.latent", Act::Relu, &z)
                .into_iter()
                .map(|r| r.into_iter().map(|v| v.max(0.0)).collect())
                .collect();
            let width = fx[0].len() + fz[0].len();
            let mut pooled = vec![0.0; width];
            for i in 0..n {
                for (k, v) in fx[i].iter().chain(&fz[i]).enumerate() {
                    pooled[k] += v;
                }
            }
            pooled.iter_mut().for_each(|v| *v /= n as f64);
            let raw = &dense(store, "relevance.head", Act::Relu, &vec![pooled])[0];
            let (a0, b0) = model.prior();
            let mut alpha = vec![0.0; l];
            let (mut nqa, mut pa) = (0.0, 0.0);
            for j in 0..l {
                let a = softplus(raw[j]) + POSITIVE_FLOOR;
                let b = softplus(raw[l + j]) + POSITIVE_FLOOR;
                alpha[j] = oracle_gamma_draw(a, &mut rng) / b;
                nqa += gamma_lp(alpha[j], a, b);
                pa += gamma_lp(alpha[j], a0, b0);
            }
            (alpha, nqa / n as f64, pa / n as f64)
        }
    };

    let mut pz = 0.0;
    for zi in &z {
        pz += match prior {
            LatentPrior::Ard => (0..l)
                .map(|j| -HALF_LN_2PI + 0.5 * alpha[j].ln() - 0.5 * alpha[j] * zi[j] * zi[j])
                .sum::<f64>(),
            LatentPrior::Flow => match model.config().flow_alpha {
                FlowAlpha::Off => {
                    let (z0, ld) = oracle_flow(store, model, zi);
                    z0.iter().map(|v| -HALF_LN_2PI - 0.5 * v * v).sum::<f64>() + ld
                }
                FlowAlpha::Base => {
                    let (z0, ld) = oracle_flow(store, model, zi);
                    (0..l)
                        .map(|j| {
                            -HALF_LN_2PI + 0.5 * alpha[j].ln() - 0.5 * alpha[j] * z0[j] * z0[j]
                        })
                        .sum::<f64>()
                        + ld
                }
                FlowAlpha::Input => {
                    let scaled: Vec<f64> = (0..l).map(|j| zi[j] * alpha[j].sqrt()).collect();
                    let (z0, ld) = oracle_flow(store, model, &scaled);
                    z0.iter().map(|v| -HALF_LN_2PI - 0.5 * v * v).sum::<f64>()
                        + ld
                        + 0.5 * alpha.iter().map(|a| a.ln()).sum::<f64>()
                }
            },
        };
    }
    pz /= n as f64;
    ElboBreakdown {
        recon,
        neg_entropy_q_z: nqz,
        neg_entropy_q_alpha: nqa,
        prior_z: pz,
        prior_alpha: pa,
        total: recon - nqz - nqa + pz + pa,
    }
}

pub fn toy_model(variant: Variant, mode: FlowAlpha, seed: u64) -> RenModel {
    let mut cfg = ExperimentConfig::defaults(DatasetFamily::OneMoon);
    cfg.model.variant = variant;
    cfg.model.flow_alpha = mode;
    cfg.train.seed = seed;
    build_model(&cfg).unwrap()
}

/// Gives the zero-initialized heads (flow, relevance) random weights and moves log σ off zero.
pub fn perturb(model: &mut RenModel, seed: u64) {
    let store = model.params_mut();
    let ids: Vec<_> = store.ids().collect();
    for (k, id) in ids.into_iter().enumerate() {
        let name = store.entry(id).name.clone();
        let head = name.starts_with("relevance.head")
            || (name.starts_with("flow.") && name.contains(".2."));
        if head {
            let shape = store.get(id).shape().to_vec();
            *store.get_mut(id) = random_tensor(&shape, -0.4, 0.4, seed + k as u64);
        }
    }
    let id = store.find("decoder.log_sigma").unwrap();
    *store.get_mut(id) = Tensor::scalar(-0.7);
}

pub fn breakdown_via_library(
    model: &RenModel,
    x: &Tensor,
    seed: u64,
    fixed: Option<&[f64]>,
    prior: LatentPrior,
) -> ElboBreakdown {
    let tape = Tape::new();
    let bind = model.params().bind_frozen(&tape);
    let mut rng = SeedTree::new(seed).rng();
    let src = match fixed {
        Some(a) => AlphaSource::Fixed(a),
        None => AlphaSource::Inferred(GammaDraw::Sample),
    };
    elbo(model, &bind, x, &mut rng, prior, src)
        .unwrap()
        .breakdown()
}

/// Sets the relevance head so q(α) is exactly the hyperprior for every input.
pub fn freeze_relevance_at_prior(model: &mut RenModel) {
    let (a0, b0) = model.prior();
    let inv_softplus = |y: f64| (y.exp_m1()).ln();
    let l = model.latent_dim();
    let store = model.params_mut();
    let last = (0..)
        .take_while(|i| store.find(&format!("relevance.head.{i}.weight")).is_some())
        .last()
        .unwrap();
    let w = store
        .find(&format!("relevance.head.{last}.weight"))
        .unwrap();
    store.get_mut(w).data_mut().fill(0.0);
    let b = store.find(&format!("relevance.head.{last}.bias")).unwrap();
    let bias: Vec<f64> = (0..2 * l)
        .map(|k| inv_softplus(if k < l { a0 } else { b0 } - POSITIVE_FLOOR))
        .collect();
    store.get_mut(b).data_mut().copy_from_slice(&bias);
}

pub fn fd_check(
    model: &mut RenModel,
    x: &Tensor,
    u: &[f64],
    frac: f64,
    filter: &dyn Fn(&str) -> bool,
    sel_seed: u64,
) -> f64 {
    let objective = |model: &RenModel| {
        let tape = Tape::new();
        let bind = model.params().bind_frozen(&tape);
        let mut rng = SeedTree::new(31).rng();
        elbo(
            model,
            &bind,
            x,
            &mut rng,
            LatentPrior::Flow,
            AlphaSource::Inferred(GammaDraw::Quantile(u)),
        )
        .unwrap()
        .total
        .item()
    };
    let grads = {
        let tape = Tape::new();
        let bind = model.params().bind_all(&tape);
        let mut rng = SeedTree::new(31).rng();
        let g = elbo(
            model,
            &bind,
            x,
            &mut rng,
            LatentPrior::Flow,
            AlphaSource::Inferred(GammaDraw::Quantile(u)),
        )
        .unwrap();
        let back = tape.backward(g.total).unwrap();
        bind.collect(&back)
    };
    let mut coords = Vec::new();
    for (id, g) in &grads {
        if filter(&model.params().entry(*id).name) {
            for i in 0..g.numel() {
                coords.push((*id, i, g.data()[i]));
            }
        }
    }
    let take = ((coords.len() as f64 * frac).ceil() as usize).max(1);
    let mut rng = SeedTree::new(sel_seed).rng();
    let picked: Vec<_> = coords.choose_multiple(&mut rng, take).cloned().collect();
    let h = 1e-6;
    let mut worst = 0.0f64;
    for (id, i, analytic) in picked {
        let orig = model.params().get(id).data()[i];
        model.params_mut().get_mut(id).data_mut()[i] = orig + h;
        let up = objective(model);
        model.params_mut().get_mut(id).data_mut()[i] = orig - h;
        let down = objective(model);
        model.params_mut().get_mut(id).data_mut()[i] = orig;
        let fd = (up - down) / (2.0 * h);
        worst = worst.max((analytic - fd).abs() / analytic.abs().max(fd.abs()).max(1e-3));
    }
    worst
}
