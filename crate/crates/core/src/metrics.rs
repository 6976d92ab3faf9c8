//! Evaluation: reconstruction error, explained-variance ranking of latent
//! dimensions, energy distance between sample sets, and ancestral generation.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor};
use crate::config::FlowAlpha;
use crate::error::{Error, Result};
use crate::networks::RenModel;

/// Fraction of total variance that `l_star` dimensions must cover.
pub const EXPLAINED_THRESHOLD: f64 = 0.95;

/// Rows processed per forward pass during evaluation.
const EVAL_CHUNK: usize = 512;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RelevanceReport {
    pub alpha: Vec<f64>,
    /// Original dimension indices, most relevant first.
    pub order: Vec<usize>,
    /// Per-dimension variances in `order`.
    pub variances: Vec<f64>,
    pub explained_ratio: Vec<f64>,
    pub cumulative: Vec<f64>,
    pub l_star: usize,
}

/// Ranks dimensions by prior variance 1/α.
pub fn relevance_report(alpha: &[f64]) -> Result<RelevanceReport> {
    if let Some(a) = alpha.iter().find(|a| !(**a > 0.0 && a.is_finite())) {
        return Err(Error::domain(
            "relevance_report",
            format!("alpha must be positive and finite, got {a}"),
        ));
    }
    let variances: Vec<f64> = alpha.iter().map(|a| 1.0 / a).collect();
    report_from_variances(alpha.to_vec(), &variances)
}

/// Ranks dimensions by the given per-dimension variances (e.g. empirical ones).
pub fn report_from_variances(alpha: Vec<f64>, variances: &[f64]) -> Result<RelevanceReport> {
    if variances.is_empty() {
        return Err(Error::InvalidArgument("no dimensions to rank".into()));
    }
    if let Some(v) = variances.iter().find(|v| !(**v >= 0.0 && v.is_finite())) {
        return Err(Error::domain(
            "relevance_report",
            format!("variance must be finite and non-negative, got {v}"),
        ));
    }
    let mut order: Vec<usize> = (0..variances.len()).collect();
    // stable sort keeps index order among ties
    order.sort_by(|&i, &j| variances[j].total_cmp(&variances[i]));
    let sorted: Vec<f64> = order.iter().map(|&i| variances[i]).collect();
    let total: f64 = sorted.iter().sum();
    if total <= 0.0 {
        return Err(Error::domain("relevance_report", "total variance is zero"));
    }
    let explained_ratio: Vec<f64> = sorted.iter().map(|v| v / total).collect();
    let mut cumulative = Vec::with_capacity(sorted.len());
    let mut acc = 0.0;
    for r in &explained_ratio {
        acc += r;
        cumulative.push(acc);
    }
    let l_star = cumulative
        .iter()
        .position(|&c| c >= EXPLAINED_THRESHOLD)
        .map_or(sorted.len(), |k| k + 1);
    Ok(RelevanceReport {
        alpha,
        order,
        variances: sorted,
        explained_ratio,
        cumulative,
        l_star,
    })
}

/// Encoder means `[N, L]` and posterior standard deviations, without sampling.
pub fn encode_means(model: &RenModel, x: &Tensor) -> Result<(Tensor, Tensor)> {
    let l = model.latent_dim();
    let mut mu = Vec::with_capacity(x.rows() * l);
    let mut sd = Vec::with_capacity(x.rows() * l);
    for chunk in chunks(x.rows()) {
        let tape = Tape::new();
        let bind = model.params().bind_frozen(&tape);
        let q = model.encode(&bind, tape.constant(x.select_rows(&chunk)))?;
        mu.extend_from_slice(q.mu.value().data());
        sd.extend(q.log_sigma.value().data().iter().map(|s| s.exp()));
    }
    Ok((
        Tensor::new(vec![x.rows(), l], mu)?,
        Tensor::new(vec![x.rows(), l], sd)?,
    ))
}

/// Decoder means for latent rows `[N, L]`.
pub fn decode_means(model: &RenModel, z: &Tensor) -> Result<Tensor> {
    let d = model.data_dim();
    let mut out = Vec::with_capacity(z.rows() * d);
    for chunk in chunks(z.rows()) {
        let tape = Tape::new();
        let bind = model.params().bind_frozen(&tape);
        let (mean, _) = model.decode(&bind, tape.constant(z.select_rows(&chunk)))?;
        out.extend_from_slice(mean.value().data());
    }
    Tensor::new(vec![z.rows(), d], out)
}

fn chunks(n: usize) -> Vec<Vec<usize>> {
    (0..n)
        .step_by(EVAL_CHUNK)
        .map(|s| (s..(s + EVAL_CHUNK).min(n)).collect())
        .collect()
}

fn check_data(model: &RenModel, x: &Tensor) -> Result<()> {
    if x.rank() != 2 || x.cols() != model.data_dim() {
        return Err(Error::InvalidArgument(format!(
            "data has shape {:?}, the model expects D = {} columns",
            x.shape(),
            model.data_dim()
        )));
    }
    Ok(())
}

/// Reconstructions through the encoder mean.
pub fn reconstruct(model: &RenModel, x: &Tensor) -> Result<Tensor> {
    check_data(model, x)?;
    let (mu, _) = encode_means(model, x)?;
    decode_means(model, &mu)
}

/// Mean over samples and dimensions of the squared reconstruction error.
pub fn recon_mse(model: &RenModel, x: &Tensor) -> Result<f64> {
    let recon = reconstruct(model, x)?;
    if x.numel() == 0 {
        return Err(Error::InvalidArgument("empty test set".into()));
    }
    let sq: f64 = x
        .data()
        .iter()
        .zip(recon.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    Ok(sq / x.numel() as f64)
}

/// Per-dimension variance of the aggregate posterior: Var(μ) + E[σ²].
pub fn empirical_latent_variance(model: &RenModel, x: &Tensor) -> Result<Vec<f64>> {
    check_data(model, x)?;
    let n = x.rows();
    if n < 2 {
        return Err(Error::InvalidArgument(
            "need at least 2 rows for a variance".into(),
        ));
    }
    let (mu, sd) = encode_means(model, x)?;
    let l = model.latent_dim();
    Ok((0..l)
        .map(|j| {
            let mean = (0..n).map(|i| mu.at(i, j)).sum::<f64>() / n as f64;
            let var = (0..n).map(|i| (mu.at(i, j) - mean).powi(2)).sum::<f64>() / n as f64;
            let noise = (0..n).map(|i| sd.at(i, j).powi(2)).sum::<f64>() / n as f64;
            var + noise
        })
        .collect())
}

/// Per-column variance (1/N normalization).
pub fn column_variances(x: &Tensor) -> Vec<f64> {
    let n = x.rows().max(1) as f64;
    (0..x.cols())
        .map(|j| {
            let mean = (0..x.rows()).map(|i| x.at(i, j)).sum::<f64>() / n;
            (0..x.rows())
                .map(|i| (x.at(i, j) - mean).powi(2))
                .sum::<f64>()
                / n
        })
        .collect()
}

fn mean_pair_distance(a: &Tensor, b: &Tensor, skip_diagonal: bool) -> f64 {
    let mut sum = 0.0;
    for i in 0..a.rows() {
        let ra = a.row(i);
        let mut row_sum = 0.0;
        for j in 0..b.rows() {
            let rb = b.row(j);
            row_sum += ra
                .iter()
                .zip(rb)
                .map(|(p, q)| (p - q) * (p - q))
                .sum::<f64>()
                .sqrt();
        }
        sum += row_sum;
    }
    let pairs = if skip_diagonal {
        a.rows() * (a.rows() - 1)
    } else {
        a.rows() * b.rows()
    };
    sum / pairs as f64
}

/// Energy distance 2·E‖a−b‖ − E‖a−a′‖ − E‖b−b′‖ over all pairs.
///
/// The default V-statistic includes the zero self-pairs, is non-negative and is exactly
/// zero for identical sets; `unbiased` drops them from the within-set averages.
/// Arguments are put in a canonical order first, so the result is exactly symmetric.
pub fn energy_distance(a: &Tensor, b: &Tensor, unbiased: bool) -> Result<f64> {
    if a.rank() != 2 || b.rank() != 2 || a.cols() != b.cols() {
        return Err(Error::shape("energy_distance", a.shape(), b.shape()));
    }
    if a.rows() < 2 || b.rows() < 2 {
        return Err(Error::InvalidArgument(format!(
            "energy distance needs at least 2 samples per set, got {} and {}",
            a.rows(),
            b.rows()
        )));
    }
    let swap = (b.rows(), b.data().len()) < (a.rows(), a.data().len())
        || (b.rows() == a.rows()
            && b.data()
                .iter()
                .zip(a.data())
                .find(|(p, q)| p != q)
                .is_some_and(|(p, q)| p.total_cmp(q).is_lt()));
    let (a, b) = if swap { (b, a) } else { (a, b) };
    let cross = mean_pair_distance(a, b, false);
    let within_a = mean_pair_distance(a, a, unbiased);
    let within_b = mean_pair_distance(b, b, unbiased);
    let d = 2.0 * cross - (within_a + within_b);
    Ok(if unbiased { d } else { d.max(0.0) })
}

/// Latent draws from the generative prior, before decoding.
pub fn generate_latents<R: Rng + ?Sized>(
    model: &RenModel,
    n: usize,
    rng: &mut R,
) -> Result<Tensor> {
    let l = model.latent_dim();
    let alpha = &model.current_alpha;
    if alpha.len() != l || alpha.iter().any(|a| !(*a > 0.0)) {
        return Err(Error::domain(
            "generate",
            format!("invalid current alpha {alpha:?}"),
        ));
    }
    let mut base: Vec<f64> = (0..n * l).map(|_| rng.sample(StandardNormal)).collect();
    let scale_by_alpha = |v: &mut [f64]| {
        for (k, x) in v.iter_mut().enumerate() {
            *x /= alpha[k % l].sqrt();
        }
    };
    let flow = match model.flow() {
        None => {
            scale_by_alpha(&mut base);
            return Tensor::new(vec![n, l], base);
        }
        Some(f) => f,
    };
    let mode = model.config().flow_alpha;
    if mode == FlowAlpha::Base {
        scale_by_alpha(&mut base);
    }
    let z0 = Tensor::new(vec![n, l], base)?;
    let mut out = Vec::with_capacity(n * l);
    for chunk in chunks(n) {
        let tape = Tape::new();
        let bind = model.params().bind_frozen(&tape);
        let z = flow.inverse(&bind, tape.constant(z0.select_rows(&chunk)))?;
        out.extend_from_slice(z.value().data());
    }
    if mode == FlowAlpha::Input {
        scale_by_alpha(&mut out);
    }
    Tensor::new(vec![n, l], out)
}

/// Ancestral samples: latents from the prior, decoded to their means.
pub fn generate<R: Rng + ?Sized>(model: &RenModel, n: usize, rng: &mut R) -> Result<Tensor> {
    let z = generate_latents(model, n, rng)?;
    decode_means(model, &z)
}
