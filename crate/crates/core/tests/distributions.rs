mod common;

use common::random_tensor;
use proptest::prelude::*;
use rand::Rng;
use ren_core::distributions::{
    gamma_implicit_rsample, gamma_log_density, gamma_log_prob, gaussian_entropy, gaussian_log_prob,
    gaussian_rsample, latent_prior_log_prob, sample_std_gamma, standard_normal_log_prob,
    DiagGaussian, GammaDraw, GammaParams,
};
use ren_core::rng::SeedTree;
use ren_core::special::gamma_p_inv;
use ren_core::{Error, Tape, Tensor};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

fn vec_var<'t>(tape: &'t Tape, v: &[f64]) -> ren_core::Var<'t> {
    tape.constant(Tensor::vector(v.to_vec()))
}

fn gaussian_value(x: &[f64], mu: &[f64], log_sigma: &[f64]) -> f64 {
    let tape = Tape::new();
    let d = DiagGaussian::new(vec_var(&tape, mu), vec_var(&tape, log_sigma)).unwrap();
    gaussian_log_prob(vec_var(&tape, x), &d).unwrap().item()
}

fn gamma_value(alpha: &[f64], a: &[f64], b: &[f64]) -> ren_core::Result<f64> {
    let tape = Tape::new();
    let g = GammaParams::new(vec_var(&tape, a), vec_var(&tape, b))?;
    Ok(gamma_log_prob(vec_var(&tape, alpha), &g)?.item())
}

#[test]
fn gaussian_log_prob_examples() {
    assert!((gaussian_value(&[0.0], &[0.0], &[0.0]) + 0.918_938_533_204_672_7).abs() < 1e-12);
    let ls = [0.3, -1.2];
    let got = gaussian_value(&[0.7, -2.0], &[0.7, -2.0], &ls);
    assert!((got - (-LN_2PI - ls.iter().sum::<f64>())).abs() < 1e-12);
}

#[test]
fn gaussian_log_prob_rejects_dimension_mismatch() {
    let tape = Tape::new();
    let d = DiagGaussian::new(vec_var(&tape, &[0.0, 0.0]), vec_var(&tape, &[0.0, 0.0])).unwrap();
    assert!(matches!(
        gaussian_log_prob(vec_var(&tape, &[1.0]), &d),
        Err(Error::Shape { .. })
    ));
    assert!(DiagGaussian::new(vec_var(&tape, &[0.0]), vec_var(&tape, &[0.0, 1.0])).is_err());
}

#[test]
fn gaussian_density_integrates_to_one_in_three_dimensions() {
    let mu = [0.4, -1.3, 2.2];
    let log_sigma: [f64; 3] = [-0.5, 0.2, 0.7];
    let k = 81;
    let axes: Vec<Vec<f64>> = (0..3)
        .map(|j| {
            let s = log_sigma[j].exp();
            (0..k)
                .map(|i| mu[j] - 10.0 * s + 20.0 * s * i as f64 / (k - 1) as f64)
                .collect()
        })
        .collect();
    let mut rows = Vec::with_capacity(k * k * k * 3);
    for x in &axes[0] {
        for y in &axes[1] {
            for z in &axes[2] {
                rows.extend_from_slice(&[*x, *y, *z]);
            }
        }
    }
    let n = k * k * k;
    let tape = Tape::new();
    let grid = tape.constant(Tensor::new(vec![n, 3], rows).unwrap());
    let d = DiagGaussian::new(
        vec_var(&tape, &mu)
            .reshape(&[1, 3])
            .unwrap()
            .broadcast_to(&[n, 3])
            .unwrap(),
        vec_var(&tape, &log_sigma)
            .reshape(&[1, 3])
            .unwrap()
            .broadcast_to(&[n, 3])
            .unwrap(),
    )
    .unwrap();
    let lp = gaussian_log_prob(grid, &d).unwrap().value();
    let trap_w = |i: usize| if i == 0 || i == k - 1 { 0.5 } else { 1.0 };
    let cell: f64 = (0..3).map(|j| axes[j][1] - axes[j][0]).product();
    let mut total = 0.0;
    for i in 0..k {
        for j in 0..k {
            for l in 0..k {
                total += trap_w(i) * trap_w(j) * trap_w(l) * lp.data()[(i * k + j) * k + l].exp();
            }
        }
    }
    total *= cell;
    assert!((total - 1.0).abs() < 1e-6, "integral {total}");
}

#[test]
fn gaussian_rsample_degenerate_and_deterministic() {
    let tape = Tape::new();
    let d = DiagGaussian::new(
        vec_var(&tape, &[1.5, -2.0]),
        vec_var(&tape, &[-20.0, -20.0]),
    )
    .unwrap();
    let mut rng = SeedTree::new(5).rng();
    let z = gaussian_rsample(&d, &mut rng).unwrap().value();
    assert!((z.data()[0] - 1.5).abs() < 1e-7 && (z.data()[1] + 2.0).abs() < 1e-7);

    let draw = |seed| {
        let tape = Tape::new();
        let d = DiagGaussian::new(vec_var(&tape, &[0.0; 3]), vec_var(&tape, &[0.0; 3])).unwrap();
        gaussian_rsample(&d, &mut SeedTree::new(seed).rng())
            .unwrap()
            .value()
    };
    assert_eq!(draw(11), draw(11));
    assert_ne!(draw(11), draw(12));
}

#[test]
fn gaussian_rsample_mean_gradient_is_one() {
    let n = 10_000;
    let tape = Tape::new();
    let mu = tape.leaf(Tensor::new(vec![1, 2], vec![0.3, -0.8]).unwrap());
    let ls = tape.leaf(Tensor::new(vec![1, 2], vec![0.1, -0.4]).unwrap());
    let d = DiagGaussian::new(
        mu.broadcast_to(&[n, 2]).unwrap(),
        ls.broadcast_to(&[n, 2]).unwrap(),
    )
    .unwrap();
    let z = gaussian_rsample(&d, &mut SeedTree::new(3).rng()).unwrap();
    let mean = z.mean_axis(0).unwrap().sum();
    let grads = tape.backward(mean).unwrap();
    for g in grads.wrt(mu).data() {
        assert!((g - 1.0).abs() < 0.05, "dE[z]/dmu = {g}");
    }
    // E[σε] does not depend on σ; the sample gradient is the mean of σε, near zero
    for g in grads.wrt(ls).data() {
        assert!(g.abs() < 0.05, "dE[z]/dlog_sigma = {g}");
    }
}

#[test]
fn gamma_log_prob_examples() {
    assert!((gamma_value(&[0.5], &[1.0], &[1.0]).unwrap() + 0.5).abs() < 1e-12);
    let expected = 2.0 * 3f64.ln() - 3.0;
    assert!((gamma_value(&[1.0], &[2.0], &[3.0]).unwrap() - expected).abs() < 1e-12);
    assert!((expected + 0.802_775).abs() < 1e-6);
}

#[test]
fn gamma_log_prob_rejects_non_positive_inputs() {
    assert!(matches!(
        gamma_value(&[0.0], &[1.0], &[1.0]),
        Err(Error::Domain { .. })
    ));
    assert!(matches!(
        gamma_value(&[-1.0], &[1.0], &[1.0]),
        Err(Error::Domain { .. })
    ));
    assert!(matches!(
        gamma_value(&[1.0], &[1.0], &[-2.0]),
        Err(Error::Domain { .. })
    ));
    assert!(matches!(
        gamma_value(&[1.0], &[0.0], &[1.0]),
        Err(Error::Domain { .. })
    ));
}

/// ∫ p(α) dα computed as ∫ p(e^u) e^u du, a smooth integrand for every concentration.
fn gamma_integral(a: f64, b: f64) -> f64 {
    let (lo, hi, k) = (-60.0f64, 8.0f64, 40_001);
    let h = (hi - lo) / (k - 1) as f64;
    let alphas: Vec<f64> = (0..k).map(|i| (lo + h * i as f64).exp() / b).collect();
    let tape = Tape::new();
    let g = GammaParams::new(vec_var(&tape, &vec![a; k]), vec_var(&tape, &vec![b; k])).unwrap();
    let lp = gamma_log_prob(
        vec_var(&tape, &alphas).reshape(&[k, 1]).unwrap(),
        &GammaParams {
            concentration: g.concentration.reshape(&[k, 1]).unwrap(),
            rate: g.rate.reshape(&[k, 1]).unwrap(),
        },
    )
    .unwrap()
    .value();
    (0..k)
        .map(|i| {
            let w = if i == 0 || i == k - 1 { 0.5 } else { 1.0 };
            w * (lp.data()[i] + alphas[i].ln()).exp()
        })
        .sum::<f64>()
        * h
}

#[test]
fn gamma_density_integrates_to_one() {
    let mut rng = SeedTree::new(21).rng();
    for _ in 0..8 {
        let a = rng.random_range(0.3..6.0);
        let b = rng.random_range(0.2..5.0);
        let total = gamma_integral(a, b);
        assert!((total - 1.0).abs() < 1e-5, "a={a} b={b} integral {total}");
    }
}

#[test]
fn one_dimensional_gaussian_integrates_to_one() {
    let k = 20_001;
    let xs: Vec<f64> = (0..k)
        .map(|i| -12.0 + 24.0 * i as f64 / (k - 1) as f64)
        .collect();
    let tape = Tape::new();
    let lp = standard_normal_log_prob(tape.constant(Tensor::new(vec![k, 1], xs.clone()).unwrap()))
        .unwrap()
        .value();
    let h = xs[1] - xs[0];
    let total: f64 = lp.data().iter().map(|v| v.exp()).sum::<f64>() * h;
    assert!((total - 1.0).abs() < 1e-5);
}

fn implicit_draw(a: f64, b: f64, u: f64) -> (f64, f64, f64) {
    let tape = Tape::new();
    let av = tape.leaf(Tensor::vector(vec![a]));
    let bv = tape.leaf(Tensor::vector(vec![b]));
    let g = GammaParams::new(av, bv).unwrap();
    let alpha =
        gamma_implicit_rsample(&g, &mut SeedTree::new(0).rng(), GammaDraw::Quantile(&[u])).unwrap();
    let grads = tape.backward(alpha.sum()).unwrap();
    (
        alpha.item(),
        grads.wrt(av).data()[0],
        grads.wrt(bv).data()[0],
    )
}

#[test]
fn implicit_shape_gradient_matches_inverse_cdf_differences() {
    let h = 1e-4;
    for &(a, b) in &[
        (0.05, 1.0),
        (0.5, 2.0),
        (1.0, 1.0),
        (2.7, 0.4),
        (15.0, 3.0),
        (120.0, 10.0),
    ] {
        for &u in &[0.05, 0.3, 0.5, 0.8, 0.97] {
            let (alpha, da, _) = implicit_draw(a, b, u);
            assert!((alpha - gamma_p_inv(a, u).unwrap() / b).abs() <= 1e-12 * alpha.max(1e-300));
            let fd =
                (gamma_p_inv(a + h, u).unwrap() - gamma_p_inv(a - h, u).unwrap()) / (2.0 * h * b);
            let rel = (da - fd).abs() / fd.abs().max(1e-12);
            assert!(
                rel < 1e-3,
                "a={a} b={b} u={u}: implicit {da}, inverse-CDF {fd}"
            );
        }
    }
}

#[test]
fn implicit_sampler_rate_gradient_identity_on_random_draws() {
    let tape = Tape::new();
    let a = tape.leaf(random_tensor(&[64], 0.05, 20.0, 8));
    let b = tape.leaf(random_tensor(&[64], 0.1, 30.0, 9));
    let g = GammaParams::new(a, b).unwrap();
    let alpha = gamma_implicit_rsample(&g, &mut SeedTree::new(4).rng(), GammaDraw::Sample).unwrap();
    let grads = tape.backward(alpha.sum()).unwrap();
    let (av, bv, db) = (alpha.value(), b.value(), grads.wrt(b));
    for i in 0..64 {
        let resid = db.data()[i] * bv.data()[i] + av.data()[i];
        assert!(
            resid.abs() <= 2.0 * f64::EPSILON * av.data()[i],
            "draw {i}: residual {resid:e}"
        );
    }
}

#[test]
fn implicit_sampler_rejects_pathological_concentration() {
    let tape = Tape::new();
    let g = GammaParams::new(vec_var(&tape, &[1e-8]), vec_var(&tape, &[1.0])).unwrap();
    let r = gamma_implicit_rsample(&g, &mut SeedTree::new(0).rng(), GammaDraw::Sample);
    assert!(matches!(r, Err(Error::Domain { .. })));
    let g = GammaParams::new(vec_var(&tape, &[1.0]), vec_var(&tape, &[0.0])).unwrap();
    let r = gamma_implicit_rsample(&g, &mut SeedTree::new(0).rng(), GammaDraw::Sample);
    assert!(matches!(r, Err(Error::Domain { .. })));
}

fn mean_var(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    (
        m,
        xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0),
    )
}

#[test]
fn exponential_draws_have_unit_mean() {
    let n = 100_000;
    let tape = Tape::new();
    let g = GammaParams::new(vec_var(&tape, &vec![1.0; n]), vec_var(&tape, &vec![1.0; n])).unwrap();
    let alpha =
        gamma_implicit_rsample(&g, &mut SeedTree::new(77).rng(), GammaDraw::Sample).unwrap();
    let (m, _) = mean_var(alpha.value().data());
    assert!((m - 1.0).abs() < 0.02, "mean {m}");
}

#[test]
fn gamma_sampler_moments_within_three_standard_errors() {
    let n = 100_000usize;
    let mut rng = SeedTree::new(13).rng();
    for &(a, b) in &[(0.1, 1.0), (0.7, 2.0), (1.0, 0.5), (4.0, 3.0), (50.0, 0.1)] {
        let xs: Vec<f64> = (0..n)
            .map(|_| sample_std_gamma(a, &mut rng).unwrap() / b)
            .collect();
        let (m, v) = mean_var(&xs);
        let (mean, var) = (a / b, a / (b * b));
        // fourth central moment of Gamma: 3a(a+2)/b⁴
        let m4 = 3.0 * a * (a + 2.0) / b.powi(4);
        let se_mean = (var / n as f64).sqrt();
        let se_var = ((m4 - var * var) / n as f64).sqrt();
        assert!(
            (m - mean).abs() < 3.0 * se_mean,
            "a={a} b={b}: mean {m} vs {mean}"
        );
        assert!(
            (v - var).abs() < 3.0 * se_var,
            "a={a} b={b}: var {v} vs {var}"
        );
    }
}

#[test]
fn gaussian_sampler_moments_within_three_standard_errors() {
    let n = 100_000;
    let (mu, ls) = ([0.5, -3.0], [0.0, -1.5]);
    let tape = Tape::new();
    let d = DiagGaussian::new(
        vec_var(&tape, &mu)
            .reshape(&[1, 2])
            .unwrap()
            .broadcast_to(&[n, 2])
            .unwrap(),
        vec_var(&tape, &ls)
            .reshape(&[1, 2])
            .unwrap()
            .broadcast_to(&[n, 2])
            .unwrap(),
    )
    .unwrap();
    let z = gaussian_rsample(&d, &mut SeedTree::new(19).rng())
        .unwrap()
        .value();
    for j in 0..2 {
        let col: Vec<f64> = (0..n).map(|i| z.at(i, j)).collect();
        let (m, v) = mean_var(&col);
        let var = (2.0 * ls[j]).exp();
        assert!(
            (m - mu[j]).abs() < 3.0 * (var / n as f64).sqrt(),
            "mean {m}"
        );
        assert!(
            (v - var).abs() < 3.0 * (2.0 * var * var / n as f64).sqrt(),
            "var {v}"
        );
    }
}

#[test]
fn latent_prior_examples() {
    let tape = Tape::new();
    let z = vec_var(&tape, &[0.0]);
    let got = latent_prior_log_prob(z, vec_var(&tape, &[4.0]))
        .unwrap()
        .item();
    assert!((got - (-0.5 * LN_2PI + 0.5 * 4f64.ln())).abs() < 1e-12);
    let r = latent_prior_log_prob(vec_var(&tape, &[0.0, 1.0]), vec_var(&tape, &[1.0]));
    assert!(matches!(r, Err(Error::Shape { .. })));
}

#[test]
fn gaussian_entropy_examples() {
    let tape = Tape::new();
    let one = DiagGaussian::new(vec_var(&tape, &[0.0]), vec_var(&tape, &[0.0])).unwrap();
    assert!((gaussian_entropy(&one).unwrap().item() - 1.418_938_533_204_672_7).abs() < 1e-12);
    let two = DiagGaussian::new(vec_var(&tape, &[3.0, 1.0]), vec_var(&tape, &[0.0, 0.0])).unwrap();
    assert!((gaussian_entropy(&two).unwrap().item() - (LN_2PI + 1.0)).abs() < 1e-12);
}

#[test]
fn gaussian_entropy_matches_monte_carlo() {
    let n = 100_000;
    let (mu, ls) = ([0.2, -1.0, 3.0], [0.4, -0.9, 0.0]);
    let tape = Tape::new();
    let d = DiagGaussian::new(
        vec_var(&tape, &mu)
            .reshape(&[1, 3])
            .unwrap()
            .broadcast_to(&[n, 3])
            .unwrap(),
        vec_var(&tape, &ls)
            .reshape(&[1, 3])
            .unwrap()
            .broadcast_to(&[n, 3])
            .unwrap(),
    )
    .unwrap();
    let z = gaussian_rsample(&d, &mut SeedTree::new(23).rng()).unwrap();
    let mc = -gaussian_log_prob(z, &d).unwrap().mean().item();
    let one = DiagGaussian::new(vec_var(&tape, &mu), vec_var(&tape, &ls)).unwrap();
    let exact = gaussian_entropy(&one).unwrap().item();
    assert!((mc - exact).abs() < 0.01, "MC {mc} vs closed form {exact}");
}

#[test]
fn batched_log_probs_sum_over_last_axis() {
    let tape = Tape::new();
    let x = tape.constant(random_tensor(&[5, 3], -2.0, 2.0, 1));
    let alpha = tape.constant(random_tensor(&[5, 3], 0.1, 4.0, 2));
    let lp = latent_prior_log_prob(x, alpha).unwrap();
    assert_eq!(lp.shape(), vec![5, 1]);
    let (xv, av) = (x.value(), alpha.value());
    for i in 0..5 {
        let want: f64 = (0..3)
            .map(|j| {
                -0.5 * LN_2PI + 0.5 * av.at(i, j).ln() - 0.5 * av.at(i, j) * xv.at(i, j).powi(2)
            })
            .sum();
        assert!((lp.value().data()[i] - want).abs() < 1e-12);
    }
}

proptest! {
    #[test]
    fn unit_precision_prior_is_standard_normal(z in prop::collection::vec(-6.0f64..6.0, 1..6)) {
        let tape = Tape::new();
        let zv = vec_var(&tape, &z);
        let a = latent_prior_log_prob(zv, vec_var(&tape, &vec![1.0; z.len()])).unwrap().item();
        let b = standard_normal_log_prob(zv).unwrap().item();
        prop_assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn latent_prior_equals_gaussian_with_inverse_root_precision(
        pairs in prop::collection::vec((-5.0f64..5.0, 0.01f64..50.0), 1..6)
    ) {
        let z: Vec<f64> = pairs.iter().map(|p| p.0).collect();
        let alpha: Vec<f64> = pairs.iter().map(|p| p.1).collect();
        let ls: Vec<f64> = alpha.iter().map(|a| -0.5 * a.ln()).collect();
        let tape = Tape::new();
        let prior = latent_prior_log_prob(vec_var(&tape, &z), vec_var(&tape, &alpha)).unwrap().item();
        let gauss = gaussian_value(&z, &vec![0.0; z.len()], &ls);
        prop_assert!((prior - gauss).abs() < 1e-12 * prior.abs().max(1.0));
    }

    #[test]
    fn rate_gradient_identity_holds_exactly(a in 0.01f64..40.0, b in 0.01f64..40.0, u in 0.001f64..0.999) {
        let (alpha, _, db) = implicit_draw(a, b, u);
        // exact up to rounding of the division by b
        prop_assert!((db * b + alpha).abs() <= 2.0 * f64::EPSILON * alpha);
    }

    #[test]
    fn gamma_log_prob_matches_scalar_formula(alpha in 0.001f64..100.0, a in 0.01f64..50.0, b in 0.001f64..50.0) {
        let got = gamma_value(&[alpha], &[a], &[b]).unwrap();
        let want = gamma_log_density(alpha, a, b);
        prop_assert!((got - want).abs() < 1e-10 * want.abs().max(1.0));
    }
}
