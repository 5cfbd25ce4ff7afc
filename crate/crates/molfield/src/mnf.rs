//! Molecule neural fields: sinusoidal MLPs over 3D coordinates.
//!
//! One network models one molecule's distance field (K outputs, one per
//! element channel) or, for the vector-output ablation, its direction
//! field (3K outputs). Spatial gradients are exact, and the direction
//! field is recovered from a distance head via F = −f·∇f.

use ndarray::{Array2, Array3};
use rand::Rng;

use crate::error::{Error, Result};
use crate::fieldgen::{distance_sample, sample_query_points, DirectionSample, DistanceSample, GridSpec, QuerySet};
use crate::molio::{AtomTypeVocab, Conformer};
use crate::tape::{Tape, Var};
use crate::trainer::{self, OptimizerKind, OptimizerState};

pub const SIREN_INPUT_DIM: usize = 3;

/// Default first-layer frequency scale for raw Angstrom coordinates.
/// The classic value 30 assumes inputs normalized to [−1, 1]; our fields
/// keep raw coordinates, so the equivalent scale shrinks with the domain
/// radius. 5.0 fits desk-scale molecules (bounding radii of 3–16 Å) well.
pub const DEFAULT_OMEGA0: f64 = 5.0;

/// Architecture descriptor for a sinusoidal field network.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SirenArch {
    pub hidden: Vec<usize>,
    pub out_dim: usize,
    pub omega0: f64,
}

impl SirenArch {
    pub fn new(hidden: Vec<usize>, out_dim: usize, omega0: f64) -> Result<SirenArch> {
        let arch = SirenArch { hidden, out_dim, omega0 };
        arch.validate()?;
        Ok(arch)
    }

    /// Distance head: one scalar per element channel.
    pub fn distance_head(hidden: Vec<usize>, k: usize, omega0: f64) -> Result<SirenArch> {
        SirenArch::new(hidden, k, omega0)
    }

    /// Vector-output ablation head: one 3-vector per element channel.
    pub fn vector_head(hidden: Vec<usize>, k: usize, omega0: f64) -> Result<SirenArch> {
        SirenArch::new(hidden, 3 * k, omega0)
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden.is_empty() {
            return Err(Error::Config("siren arch needs at least one hidden layer".into()));
        }
        if self.hidden.iter().any(|&h| h == 0) || self.out_dim == 0 {
            return Err(Error::Config("siren layer widths must be positive".into()));
        }
        if !(self.omega0.is_finite() && self.omega0 > 0.0) {
            return Err(Error::Config("omega0 must be positive and finite".into()));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        SIREN_INPUT_DIM
    }

    /// [3, hidden…, out]
    pub fn layer_dims(&self) -> Vec<usize> {
        let mut dims = Vec::with_capacity(self.hidden.len() + 2);
        dims.push(SIREN_INPUT_DIM);
        dims.extend_from_slice(&self.hidden);
        dims.push(self.out_dim);
        dims
    }

    /// Tensor shapes in flat order: per layer, weights (out×in) row-major,
    /// then bias (1×out). This layout is shared with the hypernetwork's
    /// weight heads.
    pub fn tensor_shapes(&self) -> Vec<(usize, usize)> {
        let dims = self.layer_dims();
        let mut shapes = Vec::with_capacity(2 * (dims.len() - 1));
        for w in dims.windows(2) {
            shapes.push((w[1], w[0]));
            shapes.push((1, w[1]));
        }
        shapes
    }

    pub fn param_count(&self) -> usize {
        self.tensor_shapes().iter().map(|(r, c)| r * c).sum()
    }
}

/// Flattened parameters of one field network.
#[derive(Clone, Debug, PartialEq)]
pub struct SirenParams {
    pub arch: SirenArch,
    pub flat: Vec<f64>,
}

impl SirenParams {
    pub fn new(arch: SirenArch, flat: Vec<f64>) -> Result<SirenParams> {
        arch.validate()?;
        if flat.len() != arch.param_count() {
            return Err(Error::ShapeMismatch(format!(
                "flat parameter vector has {} entries, arch expects {}",
                flat.len(),
                arch.param_count()
            )));
        }
        if !flat.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("siren parameters".into()));
        }
        Ok(SirenParams { arch, flat })
    }

    /// (weight, bias) matrix views per layer, reconstructed from the flat
    /// vector.
    fn layers(&self) -> Vec<(Array2<f64>, Array2<f64>)> {
        let shapes = self.arch.tensor_shapes();
        let mut out = Vec::with_capacity(shapes.len() / 2);
        let mut offset = 0;
        let mut iter = shapes.iter();
        while let (Some(&(wr, wc)), Some(&(br, bc))) = (iter.next(), iter.next()) {
            let w = Array2::from_shape_vec((wr, wc), self.flat[offset..offset + wr * wc].to_vec())
                .expect("weight shape");
            offset += wr * wc;
            let b = Array2::from_shape_vec((br, bc), self.flat[offset..offset + br * bc].to_vec())
                .expect("bias shape");
            offset += br * bc;
            out.push((w, b));
        }
        out
    }
}

/// Seeded initialization: first layer uniform in ±1/input_dim, deeper
/// layers uniform in ±√(6/fan_in)/ω₀, biases zero.
pub fn siren_init(arch: &SirenArch, seed: u64) -> SirenParams {
    let mut rng = crate::rng::stream(seed, "siren-init", 0);
    let mut flat = Vec::with_capacity(arch.param_count());
    for (layer, shape_pair) in arch.tensor_shapes().chunks(2).enumerate() {
        let (rows, cols) = shape_pair[0];
        let limit = if layer == 0 {
            1.0 / SIREN_INPUT_DIM as f64
        } else {
            (6.0 / cols as f64).sqrt() / arch.omega0
        };
        for _ in 0..rows * cols {
            flat.push(rng.gen_range(-limit..=limit));
        }
        let (brows, bcols) = shape_pair[1];
        flat.extend(std::iter::repeat(0.0).take(brows * bcols));
    }
    SirenParams { arch: arch.clone(), flat }
}

/// Forward pass at raw points (N×3): sin(ω₀·W₁q + b₁) through the first
/// layer, sin(Wᵢ· + bᵢ) through the rest, linear output.
pub fn mnf_eval_matrix(theta: &SirenParams, points: &Array2<f64>) -> Result<Array2<f64>> {
    if !theta.flat.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite("siren parameters".into()));
    }
    assert_eq!(points.ncols(), SIREN_INPUT_DIM, "points must be N×3");
    let layers = theta.layers();
    let last = layers.len() - 1;
    let mut z = points.clone();
    for (l, (w, b)) in layers.iter().enumerate() {
        let mut a = z.dot(&w.t());
        if l == 0 {
            a *= theta.arch.omega0;
        }
        a += &b.row(0);
        z = if l == last { a } else { a.mapv(f64::sin) };
    }
    Ok(z)
}

/// Distance-field evaluation at a query set.
pub fn mnf_eval(theta: &SirenParams, q: &QuerySet) -> Result<DistanceSample> {
    let values = mnf_eval_matrix(theta, &q.coord_matrix())?;
    let k = values.ncols();
    Ok(DistanceSample { values, present: vec![true; k] })
}

/// Exact spatial gradients ∂out/∂q via reverse accumulation through the
/// network, one pass per output channel. Returns N×out×3.
pub fn mnf_spatial_grad_matrix(theta: &SirenParams, points: &Array2<f64>) -> Result<Array3<f64>> {
    if !theta.flat.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite("siren parameters".into()));
    }
    let n = points.nrows();
    let layers = theta.layers();
    let n_sine = layers.len() - 1;

    // Forward, caching cos(pre-activation) of every sine layer.
    let mut cos_cache: Vec<Array2<f64>> = Vec::with_capacity(n_sine);
    let mut z = points.clone();
    for (l, (w, b)) in layers.iter().take(n_sine).enumerate() {
        let mut a = z.dot(&w.t());
        if l == 0 {
            a *= theta.arch.omega0;
        }
        a += &b.row(0);
        cos_cache.push(a.mapv(f64::cos));
        z = a.mapv(f64::sin);
    }

    let (w_out, _) = &layers[n_sine];
    let out_dim = theta.arch.out_dim;
    let mut grads = Array3::zeros((n, out_dim, 3));
    for channel in 0..out_dim {
        // dL/dz_L for the single output channel, identical at every point.
        let mut g = Array2::zeros((n, w_out.ncols()));
        for i in 0..n {
            g.row_mut(i).assign(&w_out.row(channel));
        }
        for l in (0..n_sine).rev() {
            let (w, _) = &layers[l];
            let mut gw = &g * &cos_cache[l];
            if l == 0 {
                gw *= theta.arch.omega0;
            }
            g = gw.dot(w);
        }
        for i in 0..n {
            for ax in 0..3 {
                grads[[i, channel, ax]] = g[[i, ax]];
            }
        }
    }
    Ok(grads)
}

pub fn mnf_spatial_grad(theta: &SirenParams, q: &QuerySet) -> Result<Array3<f64>> {
    mnf_spatial_grad_matrix(theta, &q.coord_matrix())
}

/// Recover the direction field from a distance head: F⁽ᵏ⁾ = −f⁽ᵏ⁾·∇f⁽ᵏ⁾.
pub fn direction_from_distance(theta: &SirenParams, q: &QuerySet) -> Result<DirectionSample> {
    let coords = q.coord_matrix();
    let f = mnf_eval_matrix(theta, &coords)?;
    let grad = mnf_spatial_grad_matrix(theta, &coords)?;
    let (n, k) = f.dim();
    let mut values = Array3::zeros((n, k, 3));
    for j in 0..n {
        for ch in 0..k {
            for ax in 0..3 {
                values[[j, ch, ax]] = -f[[j, ch]] * grad[[j, ch, ax]];
            }
        }
    }
    Ok(DirectionSample { values, present: vec![true; k] })
}

/// Record the SIREN forward pass on a tape, with the flat parameter
/// vector as a differentiable 1×P node. Used both for direct fits and for
/// backpropagating through hypernetwork-generated parameters.
pub fn siren_tape_forward(tape: &mut Tape, arch: &SirenArch, theta: Var, points: Var) -> Var {
    assert_eq!(tape.value(theta).dim(), (1, arch.param_count()), "theta node shape");
    let shapes = arch.tensor_shapes();
    let last_layer = shapes.len() / 2 - 1;
    let mut offset = 0;
    let mut z = points;
    for (layer, pair) in shapes.chunks(2).enumerate() {
        let (wr, wc) = pair[0];
        let w_flat = tape.slice_cols(theta, offset, wr * wc);
        offset += wr * wc;
        let w = tape.reshape(w_flat, wr, wc);
        let wt = tape.transpose(w);
        let (br, bc) = pair[1];
        let b = tape.slice_cols(theta, offset, br * bc);
        offset += br * bc;

        let mut a = tape.matmul(z, wt);
        if layer == 0 {
            a = tape.scale(a, arch.omega0);
        }
        a = tape.add_row(a, b);
        z = if layer == last_layer { a } else { tape.sin(a) };
    }
    z
}

#[derive(Clone, Debug)]
pub struct FitOptions {
    pub steps: usize,
    pub lr: f64,
    /// Cosine-decay the learning rate to zero over the run.
    pub cosine_decay: bool,
    pub seed: u64,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions { steps: 2000, lr: 1e-2, cosine_decay: true, seed: 0 }
    }
}

#[derive(Debug)]
pub struct FitResult {
    pub params: SirenParams,
    pub final_loss: f64,
    pub loss_history: Vec<f64>,
}

/// Fit a distance-head field directly to one molecule by gradient
/// descent on the mean absolute error, resampling query points every
/// step. Deterministic per seed.
pub fn fit_mnf(
    conformer: &Conformer,
    vocab: &AtomTypeVocab,
    grid: &GridSpec,
    arch: &SirenArch,
    opts: &FitOptions,
) -> Result<FitResult> {
    if opts.steps == 0 {
        return Err(Error::Config("fit requires at least one step".into()));
    }
    if arch.out_dim != vocab.k() {
        return Err(Error::ShapeMismatch(format!(
            "arch out_dim {} vs vocabulary K {}",
            arch.out_dim,
            vocab.k()
        )));
    }
    let mut theta = siren_init(arch, opts.seed);
    let mut opt = OptimizerState::new(theta.flat.len());
    let mut history = Vec::with_capacity(opts.steps);

    for step in 0..opts.steps {
        let qseed = crate::rng::derive(opts.seed, "fit-query", step as u64);
        let q = sample_query_points(grid, qseed);
        let truth = distance_sample(&q, conformer, vocab);

        let mut tape = Tape::new();
        let theta_var = tape.leaf(Array2::from_shape_vec((1, theta.flat.len()), theta.flat.clone()).unwrap());
        let points_var = tape.leaf(q.coord_matrix());
        let pred = siren_tape_forward(&mut tape, arch, theta_var, points_var);
        let loss = trainer::l1_loss_node(&mut tape, pred, &truth.values);
        let loss_value = tape.scalar(loss);
        if !loss_value.is_finite() {
            return Err(Error::Divergence(format!("fit loss non-finite at step {step}")));
        }
        history.push(loss_value);

        let grads = tape.backward(loss);
        let g = grads.get_or_zeros(theta_var, (1, theta.flat.len()));
        let g_slice: Vec<f64> = g.iter().copied().collect();
        let lr = if opts.cosine_decay {
            let progress = step as f64 / opts.steps as f64;
            opts.lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
        } else {
            opts.lr
        };
        trainer::optimizer_step(
            OptimizerKind::Adam,
            &mut opt,
            &mut theta.flat,
            &g_slice,
            lr,
            None,
        )?;
    }
    let final_loss = *history.last().expect("at least one step");
    Ok(FitResult { params: theta, final_loss, loss_history: history })
}
