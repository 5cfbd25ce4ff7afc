//! Denoising diffusion over field samples.
//!
//! Forward process: F_t(Q) = √ᾱ_t·F(Q) + √(1−ᾱ_t)·ε with ᾱ_t = ∏(1−βᵢ)
//! from a cosine schedule. The reverse loop asks the hypernetwork for θ at
//! each step, evaluates the predicted clean field, and re-noises it to the
//! next (lower) timestep with fresh Gaussian noise. A training curriculum
//! caps the sampled timestep early in training.

use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::fieldgen::{
    direction_sample, distance_sample, filler_field, sample_query_points, FieldKind, FieldMatrix,
    GridSpec, QuerySet,
};
use crate::hypernet::{hypernet_forward, tokenize, HypernetParams};
use crate::mnf::{direction_from_distance, mnf_eval_matrix, SirenParams};
use crate::molio::Conformer;

pub const DEFAULT_SCHEDULE_OFFSET: f64 = 0.008;
const BETA_CLIP: f64 = 0.999;

/// Precomputed noise schedule: β per step and cumulative ᾱ with
/// ᾱ₀ = 1 by definition.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    pub t_max: usize,
    pub offset: f64,
    pub beta: Vec<f64>,
    pub alpha_bar: Vec<f64>,
}

/// Cosine schedule: ᾱ_t = g(t)/g(0) with
/// g(t) = cos²(((t/T + s)/(1 + s))·π/2), β clipped to ≤ 0.999 and ᾱ
/// recomputed as the running product of (1 − β).
pub fn cosine_schedule(t_max: usize, offset: f64) -> NoiseSchedule {
    assert!(t_max >= 1, "schedule horizon must be at least 1");
    assert!(offset > 0.0, "schedule offset must be positive");
    let g = |t: f64| -> f64 {
        let angle = ((t / t_max as f64 + offset) / (1.0 + offset)) * std::f64::consts::FRAC_PI_2;
        angle.cos().powi(2)
    };
    let g0 = g(0.0);
    let mut beta = Vec::with_capacity(t_max);
    let mut alpha_bar = Vec::with_capacity(t_max + 1);
    alpha_bar.push(1.0);
    let mut prev = 1.0;
    let mut running = 1.0;
    for t in 1..=t_max {
        let raw = g(t as f64) / g0;
        let b = (1.0 - raw / prev).min(BETA_CLIP);
        prev = raw;
        beta.push(b);
        running *= 1.0 - b;
        alpha_bar.push(running);
    }
    NoiseSchedule { t_max, offset, beta, alpha_bar }
}

impl NoiseSchedule {
    pub fn validate(&self) -> Result<()> {
        if self.alpha_bar.len() != self.t_max + 1 || self.beta.len() != self.t_max {
            return Err(Error::ShapeMismatch("schedule array lengths".into()));
        }
        if self.alpha_bar[0] != 1.0 {
            return Err(Error::Config("alpha_bar[0] must be exactly 1".into()));
        }
        let mut product = 1.0;
        for t in 1..=self.t_max {
            let b = self.beta[t - 1];
            if !(b > 0.0 && b <= BETA_CLIP) {
                return Err(Error::Config(format!("beta[{t}] = {b} out of (0, {BETA_CLIP}]")));
            }
            if self.alpha_bar[t] >= self.alpha_bar[t - 1] {
                return Err(Error::Config("alpha_bar must be strictly decreasing".into()));
            }
            product *= 1.0 - b;
            if (self.alpha_bar[t] - product).abs() > 1e-12 {
                return Err(Error::Config(format!("alpha_bar[{t}] violates the product identity")));
            }
        }
        Ok(())
    }

    /// Signal-to-noise ratio √ᾱ_t/√(1−ᾱ_t); strictly decreasing in t.
    pub fn snr(&self, t: usize) -> f64 {
        let ab = self.alpha_bar[t];
        (ab / (1.0 - ab)).sqrt()
    }
}

/// A noised field along with the exact Gaussian draw that produced it, so
/// the combination is reconstructable bit-exactly from (clean, t, seed).
#[derive(Clone, Debug)]
pub struct NoisedField {
    pub values: Array2<f64>,
    pub t: usize,
    pub epsilon: Array2<f64>,
    pub seed: u64,
}

/// √ᾱ·clean + √(1−ᾱ)·ε, elementwise. At ᾱ = 1 this returns `clean`
/// bit-for-bit.
pub fn affine_combination(alpha_bar: f64, clean: &Array2<f64>, epsilon: &Array2<f64>) -> Array2<f64> {
    if alpha_bar == 1.0 {
        return clean.clone();
    }
    let signal = alpha_bar.sqrt();
    let noise = (1.0 - alpha_bar).sqrt();
    clean * signal + epsilon * noise
}

fn standard_normal_matrix(shape: (usize, usize), rng: &mut ChaCha8Rng) -> Array2<f64> {
    Array2::from_shape_fn(shape, |_| rng.sample::<f64, _>(StandardNormal))
}

/// Forward-noise a clean field sample to timestep `t` with i.i.d. standard
/// normal noise per scalar entry.
pub fn forward_noise(clean: &Array2<f64>, t: usize, schedule: &NoiseSchedule, seed: u64) -> NoisedField {
    assert!(t <= schedule.t_max, "timestep {t} beyond horizon {}", schedule.t_max);
    let mut rng = crate::rng::stream(seed, "forward-noise", 0);
    let epsilon = standard_normal_matrix(clean.dim(), &mut rng);
    let values = affine_combination(schedule.alpha_bar[t], clean, &epsilon);
    NoisedField { values, t, epsilon, seed }
}

/// Maximum diffusion timestep allowed at a given 1-based epoch: 10 for the
/// first hundred epochs, then growing by one per epoch until the horizon.
pub fn curriculum_cap(epoch: usize, horizon: usize) -> usize {
    assert!(epoch >= 1, "epochs are 1-based");
    if epoch <= 100 {
        10.min(horizon)
    } else {
        (epoch - 90).min(horizon)
    }
}

#[derive(Clone, Debug)]
pub struct TrajectoryStep {
    pub t: usize,
    /// RMS of the field entries entering this step's denoise call.
    pub field_rms: f64,
}

#[derive(Clone, Debug, Default)]
pub struct Trajectory {
    pub steps: Vec<TrajectoryStep>,
}

fn rms(m: &Array2<f64>) -> f64 {
    (m.iter().map(|v| v * v).sum::<f64>() / m.len() as f64).sqrt()
}

/// Evaluate the predicted clean field for re-noising: a distance head is
/// converted to directions via F = −f·∇f when the model conditions on
/// directions; a 3K vector head is used directly.
pub fn predict_clean_field(theta: &SirenParams, q: &QuerySet, kind: FieldKind, k: usize) -> Result<FieldMatrix> {
    match kind {
        FieldKind::Direction => {
            if theta.arch.out_dim == 3 * k {
                let data = mnf_eval_matrix(theta, &q.coord_matrix())?;
                Ok(FieldMatrix { kind, k, data })
            } else if theta.arch.out_dim == k {
                Ok(direction_from_distance(theta, q)?.to_matrix())
            } else {
                Err(Error::ShapeMismatch(format!(
                    "theta out_dim {} incompatible with K={k}",
                    theta.arch.out_dim
                )))
            }
        }
        FieldKind::Distance => {
            if theta.arch.out_dim != k {
                return Err(Error::ShapeMismatch(format!(
                    "theta out_dim {} must equal K={k} for distance re-noising",
                    theta.arch.out_dim
                )));
            }
            let data = mnf_eval_matrix(theta, &q.coord_matrix())?;
            Ok(FieldMatrix { kind, k, data })
        }
    }
}

/// Run the reverse loop from `t_start` down to 1 on a fixed query set.
/// Each step: θ ← H_φ(F_t, Q, t), F̂ ← predicted clean field,
/// F_{t−1} ← √ᾱ_{t−1}·F̂ + √(1−ᾱ_{t−1})·ε with fresh ε. Returns the θ
/// from the final step.
pub fn denoise_from(
    phi: &HypernetParams,
    start: FieldMatrix,
    conditioning: Option<&FieldMatrix>,
    q: &QuerySet,
    t_start: usize,
    schedule: &NoiseSchedule,
    rng: &mut ChaCha8Rng,
) -> Result<(SirenParams, Trajectory)> {
    if t_start == 0 || t_start > schedule.t_max {
        return Err(Error::Config(format!(
            "reverse start {t_start} must lie in 1..={}",
            schedule.t_max
        )));
    }
    let k = phi.config.vocab.k();
    let mut field = start;
    let mut trajectory = Trajectory::default();
    let mut final_theta = None;
    for t in (1..=t_start).rev() {
        trajectory.steps.push(TrajectoryStep { t, field_rms: rms(&field.data) });
        let batch = tokenize(q, &field, conditioning, &phi.config)?;
        let (theta, _) = hypernet_forward(phi, &batch, t)?;
        let clean_hat = predict_clean_field(&theta, q, phi.config.condition_on, k)?;
        let epsilon = standard_normal_matrix(clean_hat.data.dim(), rng);
        let values = affine_combination(schedule.alpha_bar[t - 1], &clean_hat.data, &epsilon);
        if !values.iter().all(|v| v.is_finite()) {
            return Err(Error::Divergence(format!("non-finite field at reverse step t={t}")));
        }
        field = FieldMatrix { kind: field.kind, k, data: values };
        final_theta = Some(theta);
    }
    Ok((final_theta.expect("at least one reverse step"), trajectory))
}

/// Unconditional generation: fix Q once, draw F_T ~ 𝒩(0, I), and run the
/// reverse loop over the full horizon. A conditioning-channel model gets
/// the all-filler conditioning field.
pub fn generate(
    phi: &HypernetParams,
    grid: &GridSpec,
    schedule: &NoiseSchedule,
    seed: u64,
) -> Result<(SirenParams, Trajectory)> {
    let q = sample_query_points(grid, crate::rng::derive(seed, "generate-query", 0));
    let k = phi.config.vocab.k();
    let kind = phi.config.condition_on;
    let mut rng = crate::rng::stream(seed, "generate-noise", 0);
    let data = standard_normal_matrix((q.len(), kind.field_dim(k)), &mut rng);
    let start = FieldMatrix { kind, k, data };
    let conditioning = phi
        .config
        .conditioning_channel
        .then(|| filler_field(&q, k, kind));
    denoise_from(phi, start, conditioning.as_ref(), &q, schedule.t_max, schedule, &mut rng)
}

/// Structure-conditioned generation: the unnoised field of the retained
/// substructure rides along as a conditioning channel on every step.
/// `retained = None` inpaints from a fully masked input (pure filler).
pub fn inpaint(
    phi: &HypernetParams,
    grid: &GridSpec,
    schedule: &NoiseSchedule,
    retained: Option<&Conformer>,
    seed: u64,
) -> Result<(SirenParams, Trajectory)> {
    if !phi.config.conditioning_channel {
        return Err(Error::Config("inpainting requires a conditioning-channel model".into()));
    }
    let q = sample_query_points(grid, crate::rng::derive(seed, "inpaint-query", 0));
    let k = phi.config.vocab.k();
    let kind = phi.config.condition_on;
    let conditioning = match retained {
        Some(c) => match kind {
            FieldKind::Direction => direction_sample(&q, c, &phi.config.vocab).to_matrix(),
            FieldKind::Distance => distance_sample(&q, c, &phi.config.vocab).to_matrix(),
        },
        None => filler_field(&q, k, kind),
    };
    let mut rng = crate::rng::stream(seed, "inpaint-noise", 0);
    let data = standard_normal_matrix((q.len(), kind.field_dim(k)), &mut rng);
    let start = FieldMatrix { kind, k, data };
    denoise_from(phi, start, Some(&conditioning), &q, schedule.t_max, schedule, &mut rng)
}
