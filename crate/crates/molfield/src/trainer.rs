//! Training: L1 objectives on distance or direction predictions, Adam and
//! LAMB optimizers, the curriculum training loop, and distance-stratified
//! loss logging.

use ndarray::{Array1, Array2, Array3};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::diffusion::{curriculum_cap, forward_noise, NoiseSchedule};
use crate::error::{Error, Result};
use crate::fieldgen::{
    filler_field, sample_query_points, DirectionSample, DistanceBin, DistanceSample,
    FieldBuilder, FieldKind, FieldMatrix, GridSpec,
};
use crate::hypernet::{build_forward, tokenize, HypernetConfig, HypernetParams};
use crate::mnf::siren_tape_forward;
use crate::molio::Conformer;
use crate::params::ParamLayout;
use crate::tape::{Tape, Var};

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Adam,
    Lamb,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    /// Mean over points of Σ_k |f_θ − f| on the distance field.
    Dist,
    /// Mean over points of Σ_k ‖F_θ − F‖₁ on the direction field
    /// (ablation head).
    Vec,
}

/// First and second moment accumulators plus the step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl OptimizerState {
    pub fn new(len: usize) -> OptimizerState {
        OptimizerState { m: vec![0.0; len], v: vec![0.0; len], step: 0 }
    }
}

/// One optimizer update in place. Adam uses bias-corrected moments with
/// update −η·m̂/(√v̂ + ε). LAMB rescales the Adam direction per parameter
/// tensor by the trust ratio ‖w‖/‖u‖ (1 when either norm is zero), which
/// requires a layout; without one the whole vector is a single tensor.
pub fn optimizer_step(
    kind: OptimizerKind,
    state: &mut OptimizerState,
    params: &mut [f64],
    grads: &[f64],
    lr: f64,
    layout: Option<&ParamLayout>,
) -> Result<()> {
    if params.len() != state.m.len() || grads.len() != params.len() {
        return Err(Error::ShapeMismatch("optimizer buffers vs parameters".into()));
    }
    if !grads.iter().all(|g| g.is_finite()) {
        return Err(Error::NonFinite("gradients".into()));
    }
    state.step += 1;
    let bc1 = 1.0 - ADAM_BETA1.powi(state.step as i32);
    let bc2 = 1.0 - ADAM_BETA2.powi(state.step as i32);
    let mut direction = vec![0.0; params.len()];
    for i in 0..params.len() {
        state.m[i] = ADAM_BETA1 * state.m[i] + (1.0 - ADAM_BETA1) * grads[i];
        state.v[i] = ADAM_BETA2 * state.v[i] + (1.0 - ADAM_BETA2) * grads[i] * grads[i];
        let m_hat = state.m[i] / bc1;
        let v_hat = state.v[i] / bc2;
        direction[i] = m_hat / (v_hat.sqrt() + ADAM_EPS);
    }
    match kind {
        OptimizerKind::Adam => {
            for i in 0..params.len() {
                params[i] -= lr * direction[i];
            }
        }
        OptimizerKind::Lamb => {
            let ranges: Vec<std::ops::Range<usize>> = match layout {
                Some(layout) => layout.specs().iter().map(|s| s.range()).collect(),
                None => vec![0..params.len()],
            };
            for range in ranges {
                let w_norm: f64 = params[range.clone()].iter().map(|w| w * w).sum::<f64>().sqrt();
                let u_norm: f64 = direction[range.clone()].iter().map(|u| u * u).sum::<f64>().sqrt();
                let trust = if w_norm > 0.0 && u_norm > 0.0 { w_norm / u_norm } else { 1.0 };
                for i in range {
                    params[i] -= lr * trust * direction[i];
                }
            }
        }
    }
    Ok(())
}

/// Mean-over-points L1 loss node: sum of |pred − truth| divided by the
/// row count.
pub fn l1_loss_node(tape: &mut Tape, pred: Var, truth: &Array2<f64>) -> Var {
    assert_eq!(tape.value(pred).dim(), truth.dim(), "loss shape mismatch");
    let n = truth.nrows() as f64;
    let t = tape.leaf(truth.clone());
    let d = tape.sub(pred, t);
    let d = tape.abs(d);
    let s = tape.sum_all(d);
    tape.scale(s, 1.0 / n)
}

/// Per-point error Σ_k |pred − truth| over flattened field rows.
pub fn per_point_abs_error(pred: &Array2<f64>, truth: &Array2<f64>) -> Result<Array1<f64>> {
    if pred.dim() != truth.dim() {
        return Err(Error::ShapeMismatch(format!(
            "per-point error: {:?} vs {:?}",
            pred.dim(),
            truth.dim()
        )));
    }
    let n = pred.nrows();
    let mut out = Array1::zeros(n);
    for j in 0..n {
        out[j] = pred
            .row(j)
            .iter()
            .zip(truth.row(j).iter())
            .map(|(a, b)| (a - b).abs())
            .sum();
    }
    Ok(out)
}

/// L_dist: (1/|Q|)·Σ_q Σ_k |f_θ⁽ᵏ⁾(q) − f⁽ᵏ⁾(q)|.
pub fn loss_dist(pred: &DistanceSample, truth: &DistanceSample) -> Result<f64> {
    let per_point = per_point_abs_error(&pred.values, &truth.values)?;
    Ok(per_point.sum() / per_point.len() as f64)
}

/// L_vec: (1/|Q|)·Σ_q Σ_k ‖F_θ⁽ᵏ⁾(q) − F⁽ᵏ⁾(q)‖₁.
pub fn loss_vec(pred: &Array3<f64>, truth: &DirectionSample) -> Result<f64> {
    if pred.dim() != truth.values.dim() {
        return Err(Error::ShapeMismatch(format!(
            "vector loss: {:?} vs {:?}",
            pred.dim(),
            truth.values.dim()
        )));
    }
    let n = pred.shape()[0] as f64;
    let total: f64 = pred.iter().zip(truth.values.iter()).map(|(a, b)| (a - b).abs()).sum();
    Ok(total / n)
}

/// Split per-point errors into the five distance bins; empty bins report
/// NaN ("absent").
pub fn stratified_from_per_point(errors: &Array1<f64>, bins: &[DistanceBin]) -> [f64; 5] {
    assert_eq!(errors.len(), bins.len(), "bin labels must match points");
    let mut sums = [0.0; 5];
    let mut counts = [0usize; 5];
    for (e, b) in errors.iter().zip(bins.iter()) {
        sums[b.index()] += e;
        counts[b.index()] += 1;
    }
    let mut out = [f64::NAN; 5];
    for i in 0..5 {
        if counts[i] > 0 {
            out[i] = sums[i] / counts[i] as f64;
        }
    }
    out
}

/// L_dist restricted to each distance bin.
pub fn stratified_loss(
    pred: &DistanceSample,
    truth: &DistanceSample,
    bins: &[DistanceBin],
) -> Result<[f64; 5]> {
    let per_point = per_point_abs_error(&pred.values, &truth.values)?;
    Ok(stratified_from_per_point(&per_point, bins))
}

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub steps_per_epoch: usize,
    pub lr: f64,
    pub optimizer: OptimizerKind,
    /// Molecules per optimizer step.
    pub batch: usize,
    pub curriculum: bool,
    /// Keep the query set fixed across steps instead of resampling.
    pub fixed_q: bool,
    pub loss: LossKind,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 100,
            steps_per_epoch: 10,
            lr: 1e-4,
            optimizer: OptimizerKind::Adam,
            batch: 1,
            curriculum: true,
            fixed_q: false,
            loss: LossKind::Dist,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// The full-scale recipe kept as a named preset: LAMB at 1e-2 over
    /// 3500 epochs with 5500 molecules per step.
    pub fn full_preset() -> TrainConfig {
        TrainConfig {
            epochs: 3500,
            steps_per_epoch: 200,
            lr: 1e-2,
            optimizer: OptimizerKind::Lamb,
            batch: 5500,
            curriculum: true,
            fixed_q: false,
            loss: LossKind::Dist,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.steps_per_epoch == 0 || self.batch == 0 {
            return Err(Error::Config("epochs, steps_per_epoch, and batch must be positive".into()));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        Ok(())
    }

    pub fn total_steps(&self) -> usize {
        self.epochs * self.steps_per_epoch
    }
}

/// One logged training step. `t` is the sampled timestep (not part of the
/// CSV schema, but handy for invariants).
#[derive(Clone, Debug)]
pub struct LossRecord {
    pub step: usize,
    pub epoch: usize,
    pub t_cap: usize,
    pub t: usize,
    pub total: f64,
    pub bins: [f64; 5],
}

/// Mutable training state; checkpointable and resumable.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub phi: HypernetParams,
    pub opt: OptimizerState,
    /// Completed optimizer steps.
    pub step: usize,
    pub seed: u64,
    pub rng: ChaCha8Rng,
    pub history: Vec<LossRecord>,
}

impl TrainState {
    pub fn epoch(&self, steps_per_epoch: usize) -> usize {
        self.step / steps_per_epoch + 1
    }
}

/// Fresh state: initialized φ, zero moments, the training RNG stream.
pub fn init_train_state(hcfg: &HypernetConfig, tcfg: &TrainConfig) -> Result<TrainState> {
    tcfg.validate()?;
    let phi = crate::hypernet::init_hypernet(hcfg, crate::rng::derive(tcfg.seed, "phi-init", 0))?;
    let n = phi.flat.len();
    Ok(TrainState {
        phi,
        opt: OptimizerState::new(n),
        step: 0,
        seed: tcfg.seed,
        rng: crate::rng::stream(tcfg.seed, "train", 0),
        history: Vec::new(),
    })
}

fn check_loss_arch(hcfg: &HypernetConfig, loss: LossKind) -> Result<()> {
    let k = hcfg.vocab.k();
    let out = hcfg.target_arch.out_dim;
    match loss {
        LossKind::Dist if out == k => Ok(()),
        LossKind::Vec if out == 3 * k => Ok(()),
        _ => Err(Error::Config(format!(
            "loss {loss:?} incompatible with target out_dim {out} at K={k}"
        ))),
    }
}

/// Run the training loop to `tcfg.total_steps()`, mutating `state` in
/// place. Each step: pick molecules, sample Q, draw t uniformly within
/// the curriculum cap, noise the conditioning-kind field, run the
/// hypernetwork, evaluate the generated field network at Q, take the L1
/// loss against the clean target, and apply one optimizer update.
/// Deterministic for a given config seed.
pub fn train(
    state: &mut TrainState,
    dataset: &[Conformer],
    grid: &GridSpec,
    schedule: &NoiseSchedule,
    tcfg: &TrainConfig,
) -> Result<()> {
    train_with(state, dataset, grid, schedule, tcfg, |_| Ok(()))
}

/// [`train`] with a per-step callback (checkpointing, progress logging).
pub fn train_with<F>(
    state: &mut TrainState,
    dataset: &[Conformer],
    grid: &GridSpec,
    schedule: &NoiseSchedule,
    tcfg: &TrainConfig,
    mut after_step: F,
) -> Result<()>
where
    F: FnMut(&TrainState) -> Result<()>,
{
    tcfg.validate()?;
    schedule.validate()?;
    if dataset.is_empty() {
        return Err(Error::Empty("training dataset".into()));
    }
    let hcfg = state.phi.config.clone();
    hcfg.validate()?;
    check_loss_arch(&hcfg, tcfg.loss)?;
    if grid.n_points() < 5 {
        return Err(Error::Config("grid must sample at least 5 points for stratified bins".into()));
    }

    while state.step < tcfg.total_steps() {
        let epoch = state.step / tcfg.steps_per_epoch + 1;
        let cap = if tcfg.curriculum {
            curriculum_cap(epoch, schedule.t_max)
        } else {
            schedule.t_max
        };

        let mut grad_sum = vec![0.0; state.phi.flat.len()];
        let mut loss_sum = 0.0;
        let mut per_point_all: Vec<f64> = Vec::new();
        let mut min_dist_all: Vec<f64> = Vec::new();
        let mut t_sampled = 0;

        for _ in 0..tcfg.batch {
            let mol = &dataset[state.rng.gen_range(0..dataset.len())];
            let q_seed = if tcfg.fixed_q {
                crate::rng::derive(tcfg.seed, "train-query", 0)
            } else {
                crate::rng::derive(tcfg.seed, "train-query", state.step as u64 + 1)
            };
            let q = sample_query_points(grid, q_seed);
            let builder = FieldBuilder::new(mol, &hcfg.vocab, q.sphere);
            let clean_dist = builder.distance_sample(&q);
            let clean_dir = builder.direction_sample(&q);

            let t = state.rng.gen_range(0..=cap);
            t_sampled = t;
            let clean_cond = match hcfg.condition_on {
                FieldKind::Direction => clean_dir.to_matrix(),
                FieldKind::Distance => clean_dist.to_matrix(),
            };
            let noise_seed: u64 = state.rng.gen();
            let noised = forward_noise(&clean_cond.data, t, schedule, noise_seed);
            let field = FieldMatrix {
                kind: clean_cond.kind,
                k: clean_cond.k,
                data: noised.values,
            };

            // Inpainting-mode training: hold a random unnoised
            // substructure constant in the conditioning channel.
            let conditioning = if hcfg.conditioning_channel {
                let keep_prob: f64 = state.rng.gen();
                let keep: Vec<usize> = (0..mol.len())
                    .filter(|_| state.rng.gen::<f64>() < keep_prob)
                    .collect();
                Some(match mol.subset(&keep) {
                    Some(sub) => {
                        let b = FieldBuilder::new(&sub, &hcfg.vocab, q.sphere);
                        match hcfg.condition_on {
                            FieldKind::Direction => b.direction_sample(&q).to_matrix(),
                            FieldKind::Distance => b.distance_sample(&q).to_matrix(),
                        }
                    }
                    None => filler_field(&q, hcfg.vocab.k(), hcfg.condition_on),
                })
            } else {
                None
            };

            let batch = tokenize(&q, &field, conditioning.as_ref(), &hcfg)?;
            let truth: Array2<f64> = match tcfg.loss {
                LossKind::Dist => clean_dist.values.clone(),
                LossKind::Vec => clean_dir.to_matrix().data,
            };

            let dropout_seed = (hcfg.dropout > 0.0).then(|| state.rng.gen());
            let mut fwd = build_forward(&state.phi, &batch, t, dropout_seed)?;
            let points = fwd.tape.leaf(q.coord_matrix());
            let theta_var = fwd.theta_var();
            let pred = siren_tape_forward(&mut fwd.tape, &hcfg.target_arch, theta_var, points);
            let loss = l1_loss_node(&mut fwd.tape, pred, &truth);
            let loss_value = fwd.tape.scalar(loss);
            if !loss_value.is_finite() {
                return Err(Error::Divergence(format!(
                    "training loss non-finite at step {}",
                    state.step + 1
                )));
            }
            let pred_values = fwd.tape.value(pred).clone();
            let grads = fwd.tape.backward(loss);
            let flat = fwd.param_gradient(&grads)?;
            for (acc, g) in grad_sum.iter_mut().zip(flat.iter()) {
                *acc += g;
            }
            loss_sum += loss_value;

            let per_point = per_point_abs_error(&pred_values, &truth)?;
            per_point_all.extend(per_point.iter().copied());
            for j in 0..clean_dist.n() {
                min_dist_all.push(
                    clean_dist
                        .values
                        .row(j)
                        .iter()
                        .copied()
                        .fold(f64::INFINITY, f64::min),
                );
            }
        }

        let scale = 1.0 / tcfg.batch as f64;
        for g in grad_sum.iter_mut() {
            *g *= scale;
        }
        let layout = hcfg.layout();
        optimizer_step(
            tcfg.optimizer,
            &mut state.opt,
            &mut state.phi.flat,
            &grad_sum,
            tcfg.lr,
            Some(&layout),
        )?;

        let bins = crate::fieldgen::bins_from_min_distances(&min_dist_all);
        let errors = Array1::from_vec(per_point_all);
        let stratified = stratified_from_per_point(&errors, &bins);
        state.step += 1;
        state.history.push(LossRecord {
            step: state.step,
            epoch,
            t_cap: cap,
            t: t_sampled,
            total: loss_sum * scale,
            bins: stratified,
        });
        after_step(state)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::cosine_schedule;
    use crate::fieldgen::assign_distance_bins;
    use crate::fixtures;
    use crate::mnf::{SirenArch, DEFAULT_OMEGA0};

    fn dist(values: Array2<f64>) -> DistanceSample {
        let k = values.ncols();
        DistanceSample { values, present: vec![true; k] }
    }

    #[test]
    fn loss_dist_examples() {
        let truth = dist(Array2::zeros((10, 4)));
        assert_eq!(loss_dist(&truth, &truth).unwrap(), 0.0);

        let pred = dist(Array2::from_elem((10, 4), 0.5));
        assert!((loss_dist(&pred, &truth).unwrap() - 2.0).abs() < 1e-15);

        let pred = dist(Array2::from_shape_vec((1, 2), vec![1.0, 2.0]).unwrap());
        let truth = dist(Array2::from_shape_vec((1, 2), vec![0.0, 4.0]).unwrap());
        assert_eq!(loss_dist(&pred, &truth).unwrap(), 3.0);

        let bad = dist(Array2::zeros((2, 3)));
        assert!(loss_dist(&bad, &truth).is_err());
    }

    #[test]
    fn loss_vec_examples() {
        let truth = DirectionSample { values: Array3::zeros((1, 1, 3)), present: vec![true] };
        let pred = Array3::from_elem((1, 1, 3), 1.0);
        assert_eq!(loss_vec(&pred, &truth).unwrap(), 3.0);
        assert_eq!(loss_vec(&Array3::zeros((1, 1, 3)), &truth).unwrap(), 0.0);
        // linear in the residual
        let double = Array3::from_elem((1, 1, 3), 2.0);
        assert_eq!(loss_vec(&double, &truth).unwrap(), 6.0);
    }

    #[test]
    fn adam_zero_gradient_is_identity() {
        let mut state = OptimizerState::new(4);
        let mut params = vec![1.0, -2.0, 0.5, 3.0];
        let orig = params.clone();
        for _ in 0..10 {
            optimizer_step(OptimizerKind::Adam, &mut state, &mut params, &[0.0; 4], 0.1, None)
                .unwrap();
        }
        assert_eq!(params, orig);
    }

    #[test]
    fn adam_first_step_is_sign_step() {
        let mut state = OptimizerState::new(3);
        let mut params = vec![0.0; 3];
        let grads = [0.5, -2.0, 1e-12];
        optimizer_step(OptimizerKind::Adam, &mut state, &mut params, &grads, 1e-3, None).unwrap();
        for (p, g) in params.iter().zip(grads.iter()) {
            let expect = -1e-3 * g / (g.abs() + ADAM_EPS);
            assert!((p - expect).abs() < 1e-15, "{p} vs {expect}");
        }
    }

    #[test]
    fn lamb_matches_adam_when_trust_ratio_is_one() {
        // First step: direction u ≈ sign(g), so ‖u‖ = √2 for two entries;
        // choose ‖w‖ = √2 to force trust ratio 1.
        let grads = [3.0, -4.0];
        let mut adam_state = OptimizerState::new(2);
        let mut adam_params = vec![1.0, -1.0];
        optimizer_step(OptimizerKind::Adam, &mut adam_state, &mut adam_params, &grads, 0.01, None)
            .unwrap();
        let mut lamb_state = OptimizerState::new(2);
        let mut lamb_params = vec![1.0, -1.0];
        optimizer_step(OptimizerKind::Lamb, &mut lamb_state, &mut lamb_params, &grads, 0.01, None)
            .unwrap();
        for (a, l) in adam_params.iter().zip(lamb_params.iter()) {
            assert!((a - l).abs() < 1e-8, "adam {a} vs lamb {l}");
        }
    }

    #[test]
    fn lamb_trust_ratio_from_zero_weights_is_one() {
        let mut state = OptimizerState::new(2);
        let mut params = vec![0.0, 0.0];
        optimizer_step(OptimizerKind::Lamb, &mut state, &mut params, &[1.0, 1.0], 0.01, None)
            .unwrap();
        // ‖w‖ = 0 → ratio 1 → plain Adam step
        for p in &params {
            assert!((p + 0.01).abs() < 1e-9);
        }
    }

    #[test]
    fn non_finite_gradients_rejected() {
        let mut state = OptimizerState::new(1);
        let mut params = vec![0.0];
        assert!(matches!(
            optimizer_step(OptimizerKind::Adam, &mut state, &mut params, &[f64::NAN], 0.1, None),
            Err(Error::NonFinite(_))
        ));
    }

    #[test]
    fn stratified_loss_uniform_and_localized() {
        let n = 100;
        let mut truth_vals = Array2::zeros((n, 1));
        for j in 0..n {
            truth_vals[[j, 0]] = j as f64 * 0.05;
        }
        let truth = dist(truth_vals.clone());
        let bins = assign_distance_bins(&truth);

        let pred = dist(&truth_vals + 0.5);
        let strat = stratified_loss(&pred, &truth, &bins).unwrap();
        for s in strat {
            assert!((s - 0.5).abs() < 1e-12);
        }

        // error only on the 2% nearest points
        let mut vals = truth_vals.clone();
        vals[[0, 0]] += 1.0;
        vals[[1, 0]] += 1.0;
        let pred = dist(vals);
        let strat = stratified_loss(&pred, &truth, &bins).unwrap();
        assert!(strat[0] > 0.0);
        for s in &strat[1..] {
            assert_eq!(*s, 0.0);
        }
    }

    #[test]
    fn stratified_decomposition_recomposes_total() {
        let mut rng = crate::rng::rng(8);
        use rand::Rng as _;
        for _ in 0..5 {
            let n = 64;
            let k = 3;
            let truth = dist(Array2::from_shape_fn((n, k), |_| rng.gen_range(0.0..5.0)));
            let pred = dist(Array2::from_shape_fn((n, k), |_| rng.gen_range(0.0..5.0)));
            let bins = assign_distance_bins(&truth);
            let total = loss_dist(&pred, &truth).unwrap();
            let strat = stratified_loss(&pred, &truth, &bins).unwrap();
            let mut counts = [0usize; 5];
            for b in &bins {
                counts[b.index()] += 1;
            }
            let recomposed: f64 = (0..5)
                .filter(|&i| counts[i] > 0)
                .map(|i| counts[i] as f64 / n as f64 * strat[i])
                .sum();
            assert!((recomposed - total).abs() < 1e-12, "{recomposed} vs {total}");
        }
    }

    fn micro_setup() -> (Vec<Conformer>, HypernetConfig, GridSpec, NoiseSchedule) {
        let vocab = fixtures::methane_vocab();
        let arch = SirenArch::new(vec![8], vocab.k(), DEFAULT_OMEGA0).unwrap();
        let mut hcfg =
            HypernetConfig::desk(vocab, arch, FieldKind::Direction);
        hcfg.layers = 1;
        hcfg.model_dim = 16;
        hcfg.heads = 2;
        hcfg.pos_enc_dim = 8;
        hcfg.dropout = 0.1;
        let m = fixtures::methane();
        let grid = GridSpec::for_conformer(&m, 1, 8, 2.0);
        let schedule = cosine_schedule(20, crate::diffusion::DEFAULT_SCHEDULE_OFFSET);
        (vec![m], hcfg, grid, schedule)
    }

    #[test]
    fn training_is_deterministic_and_respects_curriculum() {
        let (dataset, hcfg, grid, schedule) = micro_setup();
        let tcfg = TrainConfig {
            epochs: 3,
            steps_per_epoch: 4,
            lr: 1e-3,
            ..Default::default()
        };
        let mut s1 = init_train_state(&hcfg, &tcfg).unwrap();
        train(&mut s1, &dataset, &grid, &schedule, &tcfg).unwrap();
        let mut s2 = init_train_state(&hcfg, &tcfg).unwrap();
        train(&mut s2, &dataset, &grid, &schedule, &tcfg).unwrap();

        assert_eq!(s1.history.len(), 12);
        assert_states_eq(&s1, &s2);
        for rec in &s1.history {
            assert!(rec.t <= rec.t_cap, "sampled t beyond curriculum cap");
            assert_eq!(rec.t_cap, curriculum_cap(rec.epoch, schedule.t_max));
        }
        // losses actually recorded with finite values
        assert!(s1.history.iter().all(|r| r.total.is_finite()));
    }

    fn assert_states_eq(a: &TrainState, b: &TrainState) {
        assert_eq!(a.phi.flat, b.phi.flat);
        assert_eq!(a.step, b.step);
        assert_eq!(a.history.len(), b.history.len());
        for (x, y) in a.history.iter().zip(b.history.iter()) {
            assert_eq!(x.total.to_bits(), y.total.to_bits());
        }
    }

    #[test]
    fn conditioning_channel_training_runs() {
        let (dataset, mut hcfg, grid, schedule) = micro_setup();
        hcfg.conditioning_channel = true;
        let tcfg = TrainConfig { epochs: 1, steps_per_epoch: 3, lr: 1e-3, ..Default::default() };
        let mut state = init_train_state(&hcfg, &tcfg).unwrap();
        train(&mut state, &dataset, &grid, &schedule, &tcfg).unwrap();
        assert_eq!(state.step, 3);
    }

    #[test]
    fn vec_loss_requires_vector_head() {
        let (dataset, hcfg, grid, schedule) = micro_setup();
        let tcfg = TrainConfig { loss: LossKind::Vec, ..Default::default() };
        let mut state = init_train_state(&hcfg, &tcfg).unwrap();
        assert!(train(&mut state, &dataset, &grid, &schedule, &tcfg).is_err());
    }
}
