//! Distribution-aware tri-modal contrastive learning.
//!
//! Each modality's token/frame sequence is summarized as a Gaussian (mean,
//! covariance, entropy) and compared with an entropy-augmented 2-Wasserstein
//! (Bures) distance. The contrastive kernel is D' = exp(-D / tau_c): the
//! exponent is negative so that minimizing the loss pulls positives together,
//! which the loss's construction requires.

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};

/// Eigenvalue floor inside the Bures square roots. Shrinkage keeps covariance
/// spectra at or above eps_reg, so this floor is only a safety net and never
/// biases the distance on valid summaries.
const SQRT_CLAMP: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContrastMode {
    /// Gaussian summaries with the Bures distance (the full method).
    Distribution,
    /// Mean vectors with squared Euclidean distance.
    Prototype,
    /// Mean pairwise squared distance between raw frame/token features.
    Feature,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ContrastConfig {
    pub tau_c: f64,
    pub gamma: f64,
    pub theta_pos: f64,
    pub eps_reg: f64,
    pub d_e: usize,
    pub mode: ContrastMode,
}

impl Default for ContrastConfig {
    fn default() -> Self {
        ContrastConfig {
            tau_c: 1.0,
            gamma: 0.1,
            theta_pos: 0.85,
            eps_reg: 1e-4,
            d_e: 64,
            mode: ContrastMode::Distribution,
        }
    }
}

impl ContrastConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau_c > 0.0) {
            return Err(Error::invalid("contrast: tau_c must be positive"));
        }
        if !(self.eps_reg > 0.0) {
            return Err(Error::invalid("contrast: eps_reg must be positive"));
        }
        Ok(())
    }
}

/// Gaussian summary of one sequence, living on a tape so the losses can
/// differentiate through mu and Sigma. The raw sequence is retained for the
/// feature-level ablation mode.
#[derive(Clone, Copy)]
pub struct GaussianSummary {
    pub mu: Var,
    pub sigma: Var,
    pub h: Var,
    pub n: usize,
    pub seq: Var,
}

/// Differential entropy H = 1/2 log((2 pi e)^d det Sigma) via a symmetric
/// log-determinant.
pub fn entropy(tape: &Tape, sigma: Var) -> Result<Var> {
    let shape = tape.shape(sigma);
    if shape.len() != 2 || shape[0] != shape[1] {
        return Err(Error::shape(format!("entropy: Sigma must be square, got {shape:?}")));
    }
    let v = tape.value(sigma);
    let d = shape[0];
    for i in 0..d {
        for j in 0..i {
            if (v[[i, j]] - v[[j, i]]).abs() > 1e-9 {
                return Err(Error::invalid("entropy: Sigma not symmetric"));
            }
        }
    }
    let logdet = tape.logdet_sym(sigma, SQRT_CLAMP);
    let c = d as f64 * (2.0 * std::f64::consts::PI * std::f64::consts::E).ln();
    Ok(tape.scale(tape.add_scalar(logdet, c), 0.5))
}

/// Eq. 13 + 14: mean, biased (1/n) covariance with shrinkage, entropy.
pub fn gaussian_summary(tape: &Tape, seq: Var, eps_reg: f64) -> Result<GaussianSummary> {
    let shape = tape.shape(seq);
    if shape.len() != 2 || shape[0] == 0 {
        return Err(Error::shape(format!("gaussian_summary: expected (n, d), got {shape:?}")));
    }
    let (n, d) = (shape[0], shape[1]);
    let mu = tape.mean_axis(seq, 0); // (d,)
    let centered = tape.sub(seq, tape.reshape(mu, &[1, d]));
    let cov = tape.scale(tape.matmul(tape.transpose2(centered), centered), 1.0 / n as f64);
    let eye = tape.constant((Array2::<f64>::eye(d) * eps_reg).into_dyn());
    let sigma = tape.add(cov, eye);
    let h = entropy(tape, sigma)?;
    Ok(GaussianSummary { mu, sigma, h, n, seq })
}

/// Eq. 15 for the distribution mode: ||mu_a - mu_b||^2
/// + Tr(Sigma_a + Sigma_b - 2 (Sigma_b^1/2 Sigma_a Sigma_b^1/2)^1/2)
/// + gamma (H_a + H_b). Other modes substitute their distances.
pub fn pair_distance(
    tape: &Tape,
    a: &GaussianSummary,
    b: &GaussianSummary,
    cfg: &ContrastConfig,
) -> Result<Var> {
    if tape.shape(a.mu) != tape.shape(b.mu) {
        return Err(Error::shape("pair_distance: dimension mismatch"));
    }
    match cfg.mode {
        ContrastMode::Prototype => Ok(tape.sq_norm(tape.sub(a.mu, b.mu))),
        ContrastMode::Feature => {
            // mean over all frame pairs of the squared distance
            let (na, d) = (a.n, tape.shape(a.mu)[0]);
            let nb = b.n;
            let sa = tape.reshape(a.seq, &[na, 1, d]);
            let sb = tape.reshape(b.seq, &[1, nb, d]);
            let diff = tape.sub(sa, sb);
            Ok(tape.mean_all(tape.sum_axis(tape.square(diff), 2)))
        }
        ContrastMode::Distribution => {
            let mean_term = tape.sq_norm(tape.sub(a.mu, b.mu));
            let sb_half = tape.sym_sqrt(b.sigma, SQRT_CLAMP);
            let inner = tape.matmul(tape.matmul(sb_half, a.sigma), sb_half);
            let cross = tape.trace(tape.sym_sqrt(inner, SQRT_CLAMP));
            let traces = tape.add(tape.trace(a.sigma), tape.trace(b.sigma));
            let bures = tape.sub(tape.add(mean_term, traces), tape.scale(cross, 2.0));
            Ok(tape.add(bures, tape.scale(tape.add(a.h, b.h), cfg.gamma)))
        }
    }
}

fn kernel(tape: &Tape, d: Var, tau_c: f64) -> Var {
    tape.exp(tape.scale(d, -1.0 / tau_c))
}

/// ln sum_j w_j exp(-d_j / tau), with the usual max-shift so the value stays
/// finite for arbitrarily large distances. Zero-weight entries are dropped.
/// The shift is a constant w.r.t. the graph, which leaves gradients exact
/// because log-sum-exp is shift-covariant.
fn log_kernel_sum(tape: &Tape, distances: &[Var], weights: Option<&[f64]>, tau_c: f64) -> Var {
    let entries: Vec<(Var, f64)> = distances
        .iter()
        .enumerate()
        .map(|(j, &d)| (d, weights.map_or(1.0, |w| w[j])))
        .filter(|&(_, w)| w > 0.0)
        .collect();
    debug_assert!(!entries.is_empty(), "log_kernel_sum needs a positive-weight entry");
    let shift = entries
        .iter()
        .map(|&(d, _)| tape.scalar_value(d))
        .fold(f64::INFINITY, f64::min);
    let terms: Vec<Var> = entries
        .iter()
        .map(|&(d, w)| tape.scale(kernel(tape, tape.sub(d, tape.scalar(shift)), tau_c), w))
        .collect();
    tape.add(tape.ln(sum_vars(tape, &terms)), tape.scalar(-shift / tau_c))
}

/// Positive/negative index sets per batch item: j is positive for i iff
/// cos(l^a_i, l^a_j) >= theta_pos. Self-inclusion is guaranteed.
pub fn partition_by_audio_anchor(
    audio_texts: &Array2<f64>,
    theta_pos: f64,
) -> Vec<(Vec<usize>, Vec<usize>)> {
    let b = audio_texts.nrows();
    let norms: Vec<f64> = (0..b)
        .map(|i| audio_texts.row(i).dot(&audio_texts.row(i)).sqrt().max(1e-12))
        .collect();
    (0..b)
        .map(|i| {
            let mut pos = Vec::new();
            let mut neg = Vec::new();
            for j in 0..b {
                let cos = audio_texts.row(i).dot(&audio_texts.row(j)) / (norms[i] * norms[j]);
                if j == i || cos >= theta_pos {
                    pos.push(j);
                } else {
                    neg.push(j);
                }
            }
            (pos, neg)
        })
        .collect()
}

fn sum_vars(tape: &Tape, vars: &[Var]) -> Var {
    let mut acc = vars[0];
    for &v in &vars[1..] {
        acc = tape.add(acc, v);
    }
    acc
}

/// Eq. 16: audio-anchored visual-audio contrast,
/// -(1/B) sum_i log[ sum_P D' / (sum_P D' + sum_N D') ].
pub fn loss_v_a(
    tape: &Tape,
    visual: &[GaussianSummary],
    audio: &[GaussianSummary],
    partitions: &[(Vec<usize>, Vec<usize>)],
    cfg: &ContrastConfig,
) -> Result<Var> {
    cfg.validate()?;
    let b = visual.len();
    if partitions.len() != b {
        return Err(Error::shape("loss_v_a: batch size mismatch"));
    }
    if b < 1 {
        return Err(Error::invalid("loss_v_a: empty batch"));
    }
    if partitions
        .iter()
        .any(|(p, n)| p.iter().chain(n).any(|&j| j >= audio.len()))
    {
        return Err(Error::invalid("loss_v_a: partition index out of range"));
    }
    let mut items = Vec::with_capacity(b);
    for i in 0..b {
        let (pos, neg) = &partitions[i];
        let all_d: Vec<Var> = pos
            .iter()
            .chain(neg.iter())
            .map(|&j| pair_distance(tape, &visual[i], &audio[j], cfg))
            .collect::<Result<_>>()?;
        let lse_pos = log_kernel_sum(tape, &all_d[..pos.len()], None, cfg.tau_c);
        let lse_all = log_kernel_sum(tape, &all_d, None, cfg.tau_c);
        items.push(tape.sub(lse_all, lse_pos));
    }
    Ok(tape.scale(sum_vars(tape, &items), 1.0 / b as f64))
}

/// Eq. 17 pool weights w_k = sqrt(1 - alpha_k) / sum_j sqrt(1 - alpha_j).
pub fn pool_weights(alphas: &[f64]) -> Result<Vec<f64>> {
    if alphas.is_empty() {
        return Err(Error::invalid("pool_weights: empty pool"));
    }
    let raw: Vec<f64> = alphas.iter().map(|&a| (1.0 - a).max(0.0).sqrt()).collect();
    let total: f64 = raw.iter().sum();
    if total < 1e-12 {
        return Err(Error::invalid("pool_weights: all alpha_k = 1, weights undefined"));
    }
    Ok(raw.iter().map(|r| r / total).collect())
}

/// Eq. 17 (and its audio analogue): per-item contrast of a modality summary
/// against its own factual text z (positive) and weighted counterfactual
/// pool (negatives); no cross-batch terms.
pub fn loss_text_contrast(
    tape: &Tape,
    modality: &[GaussianSummary],
    z_texts: &[GaussianSummary],
    pools: &[Vec<GaussianSummary>],
    alphas: &[Vec<f64>],
    cfg: &ContrastConfig,
) -> Result<Var> {
    cfg.validate()?;
    let b = modality.len();
    if z_texts.len() != b || pools.len() != b || alphas.len() != b {
        return Err(Error::shape("loss_text_contrast: batch size mismatch"));
    }
    if b < 1 {
        return Err(Error::invalid("loss_text_contrast: empty batch"));
    }
    let mut items = Vec::with_capacity(b);
    for i in 0..b {
        if pools[i].is_empty() {
            return Err(Error::invalid("loss_text_contrast: empty counterfactual pool"));
        }
        let w = pool_weights(&alphas[i])?;
        let mut all_d = vec![pair_distance(tape, &modality[i], &z_texts[i], cfg)?];
        for cf in &pools[i] {
            all_d.push(pair_distance(tape, &modality[i], cf, cfg)?);
        }
        let mut all_w = vec![1.0];
        all_w.extend_from_slice(&w);
        // -ln(p / (p + sum w_k n_k)) = lse(all) - ln(p)
        let ln_pos = tape.scale(all_d[0], -1.0 / cfg.tau_c);
        let lse_all = log_kernel_sum(tape, &all_d, Some(&all_w), cfg.tau_c);
        items.push(tape.sub(lse_all, ln_pos));
    }
    Ok(tape.scale(sum_vars(tape, &items), 1.0 / b as f64))
}

/// Eq. 17: visual-text contrast.
pub fn loss_v_l(
    tape: &Tape,
    visual: &[GaussianSummary],
    z_texts: &[GaussianSummary],
    pools: &[Vec<GaussianSummary>],
    alphas: &[Vec<f64>],
    cfg: &ContrastConfig,
) -> Result<Var> {
    loss_text_contrast(tape, visual, z_texts, pools, alphas, cfg)
}

/// Audio-text analogue of Eq. 17.
pub fn loss_a_l(
    tape: &Tape,
    audio: &[GaussianSummary],
    z_texts: &[GaussianSummary],
    pools: &[Vec<GaussianSummary>],
    alphas: &[Vec<f64>],
    cfg: &ContrastConfig,
) -> Result<Var> {
    loss_text_contrast(tape, audio, z_texts, pools, alphas, cfg)
}

/// Plain-array summary (mean, covariance, entropy) for callers that do not
/// need gradients.
pub fn summarize_array(seq: &Array2<f64>, eps_reg: f64) -> Result<(Array1<f64>, Array2<f64>, f64)> {
    let tape = Tape::new();
    let s = tape.constant(seq.clone().into_dyn());
    let g = gaussian_summary(&tape, s, eps_reg)?;
    Ok((
        tape.value(g.mu).into_dimensionality().unwrap(),
        tape.value(g.sigma).into_dimensionality().unwrap(),
        tape.scalar_value(g.h),
    ))
}
