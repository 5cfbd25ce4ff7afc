//! Transformer hypernetwork: maps (noised field at Q, Q, timestep t,
//! optional conditioning field) to the parameters θ of a molecule neural
//! field, with exact parameter gradients and an activation tap for
//! feature extraction.
//!
//! Tokens are query points: a learned positional encoding of the
//! coordinates concatenated with the (noised) field row, embedded to the
//! model width, summed with a sinusoidal timestep embedding, then passed
//! through pre-norm self-attention blocks. Token states are mean-pooled
//! and per-tensor linear heads emit θ in the flat SIREN layout.

use ndarray::{Array1, Array2};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::fieldgen::{FieldKind, FieldMatrix, QuerySet};
use crate::mnf::{SirenArch, SirenParams};
use crate::molio::AtomTypeVocab;
use crate::numeric::{stable_mean_rows, stable_mean_rows_subset};
use crate::params::ParamLayout;
use crate::tape::{Tape, Var};

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct HypernetConfig {
    pub layers: usize,
    pub model_dim: usize,
    pub heads: usize,
    pub pos_enc_dim: usize,
    pub dropout: f64,
    pub condition_on: FieldKind,
    /// When set, every token carries a second, unnoised field channel
    /// holding the retained substructure (inpainting mode).
    pub conditioning_channel: bool,
    /// 1-indexed transformer layer whose activations feed feature
    /// extraction; defaults to the central layer ⌈L/2⌉.
    pub tap_layer: Option<usize>,
    pub vocab: AtomTypeVocab,
    pub target_arch: SirenArch,
}

impl HypernetConfig {
    /// Desk-scale defaults: 4 layers, width 64, 4 heads, dropout 0.1.
    pub fn desk(vocab: AtomTypeVocab, target_arch: SirenArch, condition_on: FieldKind) -> Self {
        HypernetConfig {
            layers: 4,
            model_dim: 64,
            heads: 4,
            pos_enc_dim: 32,
            dropout: 0.1,
            condition_on,
            conditioning_channel: false,
            tap_layer: None,
            vocab,
            target_arch,
        }
    }

    /// Full-scale preset: 26 layers at a width that lands near 52M
    /// parameters. Not the default; desk hardware wants [`Self::desk`].
    pub fn large(vocab: AtomTypeVocab, target_arch: SirenArch, condition_on: FieldKind) -> Self {
        HypernetConfig {
            layers: 26,
            model_dim: 416,
            heads: 8,
            pos_enc_dim: 64,
            dropout: 0.1,
            condition_on,
            conditioning_channel: false,
            tap_layer: None,
            vocab,
            target_arch,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 {
            return Err(Error::Config("hypernet needs at least one layer".into()));
        }
        if self.model_dim == 0 || self.model_dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "model_dim {} must be a positive multiple of heads {}",
                self.model_dim, self.heads
            )));
        }
        if self.model_dim % 2 != 0 {
            return Err(Error::Config("model_dim must be even for the timestep embedding".into()));
        }
        if self.pos_enc_dim == 0 {
            return Err(Error::Config("pos_enc_dim must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config("dropout must be in [0, 1)".into()));
        }
        if let Some(tap) = self.tap_layer {
            if tap == 0 || tap > self.layers {
                return Err(Error::Config(format!("tap layer {tap} out of range 1..={}", self.layers)));
            }
        }
        self.target_arch.validate()?;
        let k = self.vocab.k();
        if self.target_arch.out_dim != k && self.target_arch.out_dim != 3 * k {
            return Err(Error::Config(format!(
                "target arch out_dim {} must be K={k} (distance head) or 3K={}",
                self.target_arch.out_dim,
                3 * k
            )));
        }
        Ok(())
    }

    /// Width of one field row: 3K under direction conditioning, K under
    /// distance conditioning.
    pub fn field_dim(&self) -> usize {
        self.condition_on.field_dim(self.vocab.k())
    }

    /// Token width after positional encoding: pos_enc_dim + field_dim,
    /// plus field_dim again when the conditioning channel is on.
    pub fn token_width(&self) -> usize {
        self.pos_enc_dim + self.field_dim() * if self.conditioning_channel { 2 } else { 1 }
    }

    /// Resolved 1-indexed tap layer.
    pub fn tap(&self) -> usize {
        self.tap_layer.unwrap_or(self.layers.div_ceil(2))
    }

    /// Named tensor layout of φ.
    pub fn layout(&self) -> ParamLayout {
        let d = self.model_dim;
        let pe = self.pos_enc_dim;
        let mut b = ParamLayout::builder();
        b.tensor("posenc.w1", pe, 3);
        b.tensor("posenc.b1", 1, pe);
        b.tensor("posenc.w2", pe, pe);
        b.tensor("posenc.b2", 1, pe);
        b.tensor("embed.w", d, self.token_width());
        b.tensor("embed.b", 1, d);
        for l in 0..self.layers {
            b.tensor(format!("block{l}.ln1.gamma"), 1, d);
            b.tensor(format!("block{l}.ln1.beta"), 1, d);
            for proj in ["q", "k", "v", "o"] {
                b.tensor(format!("block{l}.attn.w{proj}"), d, d);
                b.tensor(format!("block{l}.attn.b{proj}"), 1, d);
            }
            b.tensor(format!("block{l}.ln2.gamma"), 1, d);
            b.tensor(format!("block{l}.ln2.beta"), 1, d);
            b.tensor(format!("block{l}.mlp.w1"), 4 * d, d);
            b.tensor(format!("block{l}.mlp.b1"), 1, 4 * d);
            b.tensor(format!("block{l}.mlp.w2"), d, 4 * d);
            b.tensor(format!("block{l}.mlp.b2"), 1, d);
        }
        for (j, (rows, cols)) in self.target_arch.tensor_shapes().iter().enumerate() {
            b.tensor(format!("head{j}.w"), rows * cols, d);
            b.tensor(format!("head{j}.b"), 1, rows * cols);
        }
        b.finish()
    }
}

/// Hypernetwork parameters φ as one flat vector in layout order.
#[derive(Clone, Debug, PartialEq)]
pub struct HypernetParams {
    pub config: HypernetConfig,
    pub flat: Vec<f64>,
}

impl HypernetParams {
    pub fn new(config: HypernetConfig, flat: Vec<f64>) -> Result<HypernetParams> {
        config.validate()?;
        let expect = config.layout().total();
        if flat.len() != expect {
            return Err(Error::ShapeMismatch(format!(
                "hypernet flat vector has {} entries, layout expects {expect}",
                flat.len()
            )));
        }
        if !flat.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("hypernet parameters".into()));
        }
        Ok(HypernetParams { config, flat })
    }

    pub fn layout(&self) -> ParamLayout {
        self.config.layout()
    }
}

/// Seeded initialization: Xavier-uniform matrices, zero biases, unit
/// layer-norm scales.
pub fn init_hypernet(config: &HypernetConfig, seed: u64) -> Result<HypernetParams> {
    config.validate()?;
    let layout = config.layout();
    let mut rng = crate::rng::stream(seed, "hypernet-init", 0);
    let mut flat = vec![0.0; layout.total()];
    for spec in layout.specs() {
        if spec.name.ends_with(".gamma") {
            flat[spec.range()].fill(1.0);
        } else if spec.rows > 1 {
            // matrices: rows = fan_out, cols = fan_in
            let limit = (6.0 / (spec.rows + spec.cols) as f64).sqrt();
            for slot in &mut flat[spec.range()] {
                *slot = rng.gen_range(-limit..=limit);
            }
        }
        // remaining vectors (biases, beta) stay zero
    }
    HypernetParams::new(config.clone(), flat)
}

/// A hypernetwork that ignores its inputs and always emits `theta`: every
/// weight is zero and the head biases carry θ*. Useful as a constant
/// oracle when testing the sampling and reconstruction pipeline.
pub fn constant_hypernet(config: &HypernetConfig, theta: &SirenParams) -> Result<HypernetParams> {
    if theta.arch != config.target_arch {
        return Err(Error::ShapeMismatch("constant hypernet arch mismatch".into()));
    }
    let layout = config.layout();
    let mut flat = vec![0.0; layout.total()];
    let mut offset = 0;
    for (j, (rows, cols)) in config.target_arch.tensor_shapes().iter().enumerate() {
        let idx = layout.index_of(&format!("head{j}.b")).expect("head bias");
        let spec = layout.spec(idx);
        let len = rows * cols;
        flat[spec.range()].copy_from_slice(&theta.flat[offset..offset + len]);
        offset += len;
    }
    HypernetParams::new(config.clone(), flat)
}

/// Raw per-token inputs before any learned map. The positional encoding
/// is part of φ and is applied on the tape so it receives gradients.
#[derive(Clone, Debug)]
pub struct TokenBatch {
    pub coords: Array2<f64>,
    pub field: Array2<f64>,
    pub conditioning: Option<Array2<f64>>,
    pub cells: Vec<usize>,
    pub n_cells: usize,
}

impl TokenBatch {
    pub fn n(&self) -> usize {
        self.coords.nrows()
    }

    /// Permute tokens (rows and cell labels together); the pooled θ and
    /// global features are invariant under this.
    pub fn permuted(&self, perm: &[usize]) -> TokenBatch {
        assert_eq!(perm.len(), self.n());
        let take = |m: &Array2<f64>| {
            let mut out = Array2::zeros(m.dim());
            for (i, &p) in perm.iter().enumerate() {
                out.row_mut(i).assign(&m.row(p));
            }
            out
        };
        TokenBatch {
            coords: take(&self.coords),
            field: take(&self.field),
            conditioning: self.conditioning.as_ref().map(take),
            cells: perm.iter().map(|&p| self.cells[p]).collect(),
            n_cells: self.n_cells,
        }
    }
}

/// Assemble the token batch for one (query set, field) pair.
pub fn tokenize(
    q: &QuerySet,
    field: &FieldMatrix,
    conditioning: Option<&FieldMatrix>,
    config: &HypernetConfig,
) -> Result<TokenBatch> {
    if field.kind != config.condition_on {
        return Err(Error::Config(format!(
            "field kind {:?} does not match conditioning kind {:?}",
            field.kind, config.condition_on
        )));
    }
    if field.n() != q.len() {
        return Err(Error::ShapeMismatch(format!(
            "field has {} rows but the query set has {} points",
            field.n(),
            q.len()
        )));
    }
    if field.field_dim() != config.field_dim() {
        return Err(Error::ShapeMismatch(format!(
            "field width {} vs configured {}",
            field.field_dim(),
            config.field_dim()
        )));
    }
    if config.conditioning_channel != conditioning.is_some() {
        return Err(Error::Config(
            "conditioning field must be present exactly when the conditioning channel is on".into(),
        ));
    }
    let conditioning = match conditioning {
        None => None,
        Some(c) => {
            if c.kind != field.kind || c.data.dim() != field.data.dim() {
                return Err(Error::ShapeMismatch("conditioning field shape/kind mismatch".into()));
            }
            Some(c.data.clone())
        }
    };
    Ok(TokenBatch {
        coords: q.coord_matrix(),
        field: field.data.clone(),
        conditioning,
        cells: q.cell_index.clone(),
        n_cells: q.n_cells(),
    })
}

/// Sinusoidal timestep features: [sin(t·ωᵢ) … cos(t·ωᵢ) …] with
/// geometric frequencies ωᵢ = 10000^(−2i/dim). `dim` must be even.
pub fn timestep_embedding(t: usize, dim: usize) -> Array1<f64> {
    assert!(dim % 2 == 0 && dim > 0, "timestep embedding needs even dim");
    let half = dim / 2;
    let mut emb = Array1::zeros(dim);
    for i in 0..half {
        let omega = 10_000.0_f64.powf(-2.0 * i as f64 / dim as f64);
        let arg = t as f64 * omega;
        emb[i] = arg.sin();
        emb[half + i] = arg.cos();
    }
    emb
}

/// One recorded forward pass; exposes the tape so callers can append a
/// loss and backpropagate into φ.
pub struct HypernetForward {
    pub tape: Tape,
    theta: Var,
    param_vars: Vec<Var>,
    block_outputs: Vec<Var>,
    layout: ParamLayout,
    target_arch: SirenArch,
    tap: usize,
}

impl HypernetForward {
    pub fn theta_var(&self) -> Var {
        self.theta
    }

    pub fn theta_params(&self) -> Result<SirenParams> {
        let flat: Vec<f64> = self.tape.value(self.theta).iter().copied().collect();
        SirenParams::new(self.target_arch.clone(), flat)
    }

    /// Post-block token activations, one N×d matrix per layer.
    pub fn activations(&self) -> Activations {
        Activations {
            per_layer: self.block_outputs.iter().map(|&v| self.tape.value(v).clone()).collect(),
            tap_layer: self.tap,
        }
    }

    /// Backpropagate a scalar loss node into the flat φ gradient.
    /// Entries of φ that do not influence the loss get exact zeros.
    pub fn param_gradient(&self, grads: &crate::tape::Gradients) -> Result<Vec<f64>> {
        let mut flat = vec![0.0; self.layout.total()];
        for (idx, spec) in self.layout.specs().iter().enumerate() {
            if let Some(g) = grads.get(self.param_vars[idx]) {
                if !g.iter().all(|v| v.is_finite()) {
                    return Err(Error::NonFinite(format!("gradient of {}", spec.name)));
                }
                for (slot, v) in flat[spec.range()].iter_mut().zip(g.iter()) {
                    *slot = *v;
                }
            }
        }
        Ok(flat)
    }
}

/// Per-layer token activations from a forward pass.
#[derive(Clone, Debug)]
pub struct Activations {
    pub per_layer: Vec<Array2<f64>>,
    /// 1-indexed tap layer used by feature extraction.
    pub tap_layer: usize,
}

/// Features taken at the tap layer: raw per-token states plus exact
/// per-cell and global means.
#[derive(Clone, Debug)]
pub struct CentralActivation {
    pub per_token: Array2<f64>,
    pub per_cell: Array2<f64>,
    pub global: Array1<f64>,
}

/// Tap the central activation (layer ⌈L/2⌉ unless configured otherwise)
/// and pool it. Pooling uses a fixed value-sorted reduction, so it is
/// bit-identical under token permutation.
pub fn extract_central_activation(
    activations: &Activations,
    cells: &[usize],
    n_cells: usize,
) -> CentralActivation {
    let tap = activations.tap_layer;
    assert!(tap >= 1 && tap <= activations.per_layer.len(), "tap layer out of range");
    let per_token = activations.per_layer[tap - 1].clone();
    assert_eq!(per_token.nrows(), cells.len(), "cell labels must match tokens");
    let global = stable_mean_rows(&per_token);
    let d = per_token.ncols();
    let mut per_cell = Array2::zeros((n_cells, d));
    for cell in 0..n_cells {
        let members: Vec<usize> =
            (0..cells.len()).filter(|&i| cells[i] == cell).collect();
        if !members.is_empty() {
            per_cell.row_mut(cell).assign(&stable_mean_rows_subset(&per_token, &members));
        }
    }
    CentralActivation { per_token, per_cell, global }
}

/// Record the full forward pass on a fresh tape. `dropout_seed` enables
/// dropout (training mode); `None` runs deterministically.
pub fn build_forward(
    phi: &HypernetParams,
    batch: &TokenBatch,
    t: usize,
    dropout_seed: Option<u64>,
) -> Result<HypernetForward> {
    let cfg = &phi.config;
    cfg.validate()?;
    let layout = cfg.layout();
    if batch.field.ncols() != cfg.field_dim() {
        return Err(Error::ShapeMismatch("token batch field width vs config".into()));
    }
    if cfg.conditioning_channel != batch.conditioning.is_some() {
        return Err(Error::Config("token batch conditioning does not match config".into()));
    }
    let n = batch.n();
    let d = cfg.model_dim;
    let heads = cfg.heads;
    let dh = d / heads;

    let mut tape = Tape::new();
    let param_vars: Vec<Var> = (0..layout.specs().len())
        .map(|i| tape.leaf(layout.tensor(&phi.flat, i)))
        .collect();
    let var = |name: &str| -> Var {
        param_vars[layout.index_of(name).expect("layout name")]
    };

    let mut dropout_rng: Option<ChaCha8Rng> =
        dropout_seed.map(|s| crate::rng::stream(s, "dropout", 0));
    let mut apply_dropout = |tape: &mut Tape, x: Var| -> Var {
        match (&mut dropout_rng, cfg.dropout > 0.0) {
            (Some(rng), true) => {
                let keep = 1.0 - cfg.dropout;
                let shape = tape.value(x).dim();
                let mask = Array2::from_shape_fn(shape, |_| {
                    if rng.gen::<f64>() < keep {
                        1.0 / keep
                    } else {
                        0.0
                    }
                });
                tape.mul_const(x, mask)
            }
            _ => x,
        }
    };

    let coords = tape.leaf(batch.coords.clone());

    // Learned positional encoding: two affine layers with a GELU between.
    let pw1 = tape.transpose(var("posenc.w1"));
    let mut pos = tape.matmul(coords, pw1);
    pos = tape.add_row(pos, var("posenc.b1"));
    pos = tape.gelu(pos);
    let pw2 = tape.transpose(var("posenc.w2"));
    pos = tape.matmul(pos, pw2);
    pos = tape.add_row(pos, var("posenc.b2"));

    let field = tape.leaf(batch.field.clone());
    let mut parts = vec![pos, field];
    if let Some(cond) = &batch.conditioning {
        parts.push(tape.leaf(cond.clone()));
    }
    let tokens = tape.concat_cols(&parts);

    let ew = tape.transpose(var("embed.w"));
    let mut x = tape.matmul(tokens, ew);
    x = tape.add_row(x, var("embed.b"));

    let t_emb = timestep_embedding(t, d)
        .into_shape_with_order((1, d))
        .expect("row vector");
    let t_leaf = tape.leaf(t_emb);
    x = tape.add_row(x, t_leaf);

    let scale = 1.0 / (dh as f64).sqrt();
    let mut block_outputs = Vec::with_capacity(cfg.layers);
    for l in 0..cfg.layers {
        let name = |part: &str| format!("block{l}.{part}");

        // Pre-norm self-attention sublayer.
        let normed = tape.layer_norm(x, var(&name("ln1.gamma")), var(&name("ln1.beta")));
        let wq_t = {
            let w = var(&name("attn.wq"));
            tape.transpose(w)
        };
        let mut q = tape.matmul(normed, wq_t);
        q = tape.add_row(q, var(&name("attn.bq")));
        let wk_t = {
            let w = var(&name("attn.wk"));
            tape.transpose(w)
        };
        let mut k = tape.matmul(normed, wk_t);
        k = tape.add_row(k, var(&name("attn.bk")));
        let wv_t = {
            let w = var(&name("attn.wv"));
            tape.transpose(w)
        };
        let mut v = tape.matmul(normed, wv_t);
        v = tape.add_row(v, var(&name("attn.bv")));

        let mut head_outputs = Vec::with_capacity(heads);
        for h in 0..heads {
            let qh = tape.slice_cols(q, h * dh, dh);
            let kh = tape.slice_cols(k, h * dh, dh);
            let vh = tape.slice_cols(v, h * dh, dh);
            let kt = tape.transpose(kh);
            let mut scores = tape.matmul(qh, kt);
            scores = tape.scale(scores, scale);
            let probs = tape.softmax_rows(scores);
            head_outputs.push(tape.matmul(probs, vh));
        }
        let concat = tape.concat_cols(&head_outputs);
        let wo_t = {
            let w = var(&name("attn.wo"));
            tape.transpose(w)
        };
        let mut attn = tape.matmul(concat, wo_t);
        attn = tape.add_row(attn, var(&name("attn.bo")));
        attn = apply_dropout(&mut tape, attn);
        x = tape.add(x, attn);

        // Pre-norm MLP sublayer.
        let normed2 = tape.layer_norm(x, var(&name("ln2.gamma")), var(&name("ln2.beta")));
        let w1_t = {
            let w = var(&name("mlp.w1"));
            tape.transpose(w)
        };
        let mut m = tape.matmul(normed2, w1_t);
        m = tape.add_row(m, var(&name("mlp.b1")));
        m = tape.gelu(m);
        let w2_t = {
            let w = var(&name("mlp.w2"));
            tape.transpose(w)
        };
        m = tape.matmul(m, w2_t);
        m = tape.add_row(m, var(&name("mlp.b2")));
        m = apply_dropout(&mut tape, m);
        x = tape.add(x, m);

        if !tape.value(x).iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite(format!("hypernet block {l} output")));
        }
        block_outputs.push(x);
    }

    let pooled = tape.mean_rows(x);
    let n_tensors = cfg.target_arch.tensor_shapes().len();
    let mut theta_parts = Vec::with_capacity(n_tensors);
    for j in 0..n_tensors {
        let hw = var(&format!("head{j}.w"));
        let hwt = tape.transpose(hw);
        let mut part = tape.matmul(pooled, hwt);
        part = tape.add_row(part, var(&format!("head{j}.b")));
        theta_parts.push(part);
    }
    let theta = tape.concat_cols(&theta_parts);
    if !tape.value(theta).iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite("hypernet output theta".into()));
    }
    debug_assert_eq!(tape.value(theta).dim(), (1, cfg.target_arch.param_count()));
    let _ = n;

    Ok(HypernetForward {
        tape,
        theta,
        param_vars,
        block_outputs,
        layout,
        target_arch: cfg.target_arch.clone(),
        tap: cfg.tap(),
    })
}

/// Deterministic forward pass (dropout off): θ plus per-layer activations.
pub fn hypernet_forward(
    phi: &HypernetParams,
    batch: &TokenBatch,
    t: usize,
) -> Result<(SirenParams, Activations)> {
    let fwd = build_forward(phi, batch, t, None)?;
    Ok((fwd.theta_params()?, fwd.activations()))
}

/// Exact reverse-mode gradient of a scalar loss with respect to every
/// entry of φ. The loss is built by the caller from the θ node, typically
/// through the inner field network evaluation.
pub fn hypernet_grad<F>(
    phi: &HypernetParams,
    batch: &TokenBatch,
    t: usize,
    loss_fn: F,
) -> Result<(f64, Vec<f64>)>
where
    F: FnOnce(&mut Tape, Var) -> Var,
{
    let mut fwd = build_forward(phi, batch, t, None)?;
    let theta = fwd.theta_var();
    let loss = loss_fn(&mut fwd.tape, theta);
    let loss_value = fwd.tape.scalar(loss);
    if !loss_value.is_finite() {
        return Err(Error::Divergence("hypernet loss is non-finite".into()));
    }
    let grads = fwd.tape.backward(loss);
    let flat = fwd.param_gradient(&grads)?;
    Ok((loss_value, flat))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fieldgen::{direction_sample, sample_query_points, GridSpec};
    use crate::fixtures;
    use crate::mnf::DEFAULT_OMEGA0;

    fn tiny_config(conditioning: bool) -> HypernetConfig {
        let vocab = fixtures::methane_vocab();
        let arch = SirenArch::new(vec![8], vocab.k(), DEFAULT_OMEGA0).unwrap();
        HypernetConfig {
            layers: 2,
            model_dim: 16,
            heads: 2,
            pos_enc_dim: 8,
            dropout: 0.0,
            condition_on: FieldKind::Direction,
            conditioning_channel: conditioning,
            tap_layer: None,
            vocab,
            target_arch: arch,
        }
    }

    fn tiny_batch(cfg: &HypernetConfig, seed: u64) -> TokenBatch {
        let m = fixtures::methane();
        let grid = GridSpec::for_conformer(&m, 1, 8, 2.0);
        let q = sample_query_points(&grid, seed);
        let field = direction_sample(&q, &m, &cfg.vocab).to_matrix();
        let cond = if cfg.conditioning_channel { Some(field.clone()) } else { None };
        tokenize(&q, &field, cond.as_ref(), cfg).unwrap()
    }

    #[test]
    fn token_width_bookkeeping() {
        let m = fixtures::methane();
        let vocab = fixtures::methane_vocab(); // K = 2
        let arch = SirenArch::new(vec![8], 2, DEFAULT_OMEGA0).unwrap();
        let mut cfg = HypernetConfig::desk(vocab, arch, FieldKind::Direction);
        let grid = GridSpec::for_conformer(&m, 2, 3, 2.0);
        let q = sample_query_points(&grid, 1);
        let field = direction_sample(&q, &m, &cfg.vocab).to_matrix();

        let batch = tokenize(&q, &field, None, &cfg).unwrap();
        assert_eq!(batch.n(), 24);
        assert_eq!(cfg.token_width(), cfg.pos_enc_dim + 6);

        cfg.conditioning_channel = true;
        assert_eq!(cfg.token_width(), cfg.pos_enc_dim + 12);
        let batch = tokenize(&q, &field, Some(&field), &cfg).unwrap();
        assert_eq!(batch.conditioning.as_ref().unwrap().ncols(), 6);

        // conditioning presence must match the config
        assert!(tokenize(&q, &field, None, &cfg).is_err());
        cfg.conditioning_channel = false;
        assert!(tokenize(&q, &field, Some(&field), &cfg).is_err());
    }

    #[test]
    fn timestep_embedding_properties() {
        let z = timestep_embedding(0, 64);
        for i in 0..32 {
            assert_eq!(z[i], 0.0);
            assert_eq!(z[32 + i], 1.0);
        }
        // norm bounded by √dim
        for t in [1, 10, 999] {
            let e = timestep_embedding(t, 64);
            let norm = e.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!(norm <= 8.0 + 1e-12);
        }
    }

    #[test]
    fn timestep_embeddings_distinct_over_horizon() {
        let dim = 64;
        let embs: Vec<Array1<f64>> = (0..=1000).map(|t| timestep_embedding(t, dim)).collect();
        for a in 0..embs.len() {
            for b in (a + 1)..embs.len() {
                let max_diff = embs[a]
                    .iter()
                    .zip(embs[b].iter())
                    .map(|(x, y)| (x - y).abs())
                    .fold(0.0_f64, f64::max);
                assert!(max_diff > 1e-9, "timesteps {a} and {b} collide");
            }
        }
    }

    #[test]
    fn theta_sizing_and_determinism() {
        let cfg = tiny_config(false);
        let phi = init_hypernet(&cfg, 4).unwrap();
        let batch = tiny_batch(&cfg, 7);
        let (theta, acts) = hypernet_forward(&phi, &batch, 3).unwrap();
        assert_eq!(theta.flat.len(), cfg.target_arch.param_count());
        assert_eq!(acts.per_layer.len(), cfg.layers);
        assert_eq!(acts.tap_layer, 1); // ceil(2/2)

        let (theta2, _) = hypernet_forward(&phi, &batch, 3).unwrap();
        assert_eq!(theta.flat, theta2.flat);
    }

    #[test]
    fn tap_layer_defaults() {
        let mut cfg = tiny_config(false);
        cfg.layers = 26;
        assert_eq!(cfg.tap(), 13);
        cfg.layers = 4;
        assert_eq!(cfg.tap(), 2);
        cfg.tap_layer = Some(3);
        assert_eq!(cfg.tap(), 3);
    }

    #[test]
    fn token_permutation_leaves_theta_unchanged() {
        let cfg = tiny_config(false);
        let phi = init_hypernet(&cfg, 11).unwrap();
        let batch = tiny_batch(&cfg, 2);
        let n = batch.n();
        let perm: Vec<usize> = (0..n).rev().collect();
        let shuffled = batch.permuted(&perm);
        let (a, _) = hypernet_forward(&phi, &batch, 5).unwrap();
        let (b, _) = hypernet_forward(&phi, &shuffled, 5).unwrap();
        for (x, y) in a.flat.iter().zip(b.flat.iter()) {
            assert!((x - y).abs() <= 1e-9 * x.abs().max(1.0), "{x} vs {y}");
        }
    }

    #[test]
    fn global_feature_permutation_invariant_exactly() {
        let cfg = tiny_config(false);
        let phi = init_hypernet(&cfg, 11).unwrap();
        let batch = tiny_batch(&cfg, 2);
        let (_, acts) = hypernet_forward(&phi, &batch, 0).unwrap();
        let feat = extract_central_activation(&acts, &batch.cells, batch.n_cells);

        // Permuting the tap-layer activations and pooling again gives the
        // identical global vector, bit for bit.
        let n = batch.n();
        let perm: Vec<usize> = (1..n).chain(std::iter::once(0)).collect();
        let mut permuted = acts.clone();
        let src = permuted.per_layer[acts.tap_layer - 1].clone();
        for (i, &p) in perm.iter().enumerate() {
            permuted.per_layer[acts.tap_layer - 1]
                .row_mut(i)
                .assign(&src.row(p));
        }
        let cells_perm: Vec<usize> = perm.iter().map(|&p| batch.cells[p]).collect();
        let feat2 = extract_central_activation(&permuted, &cells_perm, batch.n_cells);
        assert_eq!(
            feat.global.as_slice().unwrap(),
            feat2.global.as_slice().unwrap()
        );
        assert_eq!(
            feat.per_cell.as_slice().unwrap(),
            feat2.per_cell.as_slice().unwrap()
        );
    }

    #[test]
    fn identical_tokens_make_per_cell_equal_global() {
        let cfg = tiny_config(false);
        let acts = Activations {
            per_layer: vec![Array2::from_elem((8, cfg.model_dim), 0.75); cfg.layers],
            tap_layer: 1,
        };
        let cells = vec![0, 0, 1, 1, 2, 2, 3, 3];
        let feat = extract_central_activation(&acts, &cells, 4);
        for cell in 0..4 {
            for j in 0..cfg.model_dim {
                assert_eq!(feat.per_cell[[cell, j]], feat.global[j]);
            }
        }
    }

    #[test]
    fn directional_gradient_matches_finite_difference() {
        use rand::Rng;
        // Three tiny random configs, N = 8 tokens each.
        for (trial, conditioning) in [(0u64, false), (1, true), (2, false)] {
            let mut cfg = tiny_config(conditioning);
            if trial == 2 {
                cfg.condition_on = FieldKind::Distance;
                cfg.heads = 4;
            }
            let phi = init_hypernet(&cfg, 20 + trial).unwrap();
            let m = fixtures::methane();
            let grid = GridSpec::for_conformer(&m, 1, 8, 2.0);
            let q = sample_query_points(&grid, trial);
            let field = match cfg.condition_on {
                FieldKind::Direction => direction_sample(&q, &m, &cfg.vocab).to_matrix(),
                FieldKind::Distance => {
                    crate::fieldgen::distance_sample(&q, &m, &cfg.vocab).to_matrix()
                }
            };
            let cond = cfg.conditioning_channel.then(|| field.clone());
            let batch = tokenize(&q, &field, cond.as_ref(), &cfg).unwrap();

            let truth = crate::fieldgen::distance_sample(&q, &m, &cfg.vocab).values;
            let points = q.coord_matrix();
            let arch = cfg.target_arch.clone();
            let loss_builder = |tape: &mut Tape, theta: Var| {
                let pts = tape.leaf(points.clone());
                let pred = crate::mnf::siren_tape_forward(tape, &arch, theta, pts);
                crate::trainer::l1_loss_node(tape, pred, &truth)
            };

            let (loss0, grad) = hypernet_grad(&phi, &batch, 2, loss_builder).unwrap();
            assert!(loss0.is_finite());

            let mut rng = crate::rng::rng(100 + trial);
            let dir: Vec<f64> = (0..phi.flat.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let norm: f64 = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
            let dir: Vec<f64> = dir.iter().map(|v| v / norm).collect();

            let h = 1e-5;
            let eval = |delta: f64| {
                let mut flat = phi.flat.clone();
                for (w, d) in flat.iter_mut().zip(dir.iter()) {
                    *w += delta * d;
                }
                let shifted = HypernetParams::new(cfg.clone(), flat).unwrap();
                let loss_builder = |tape: &mut Tape, theta: Var| {
                    let pts = tape.leaf(points.clone());
                    let pred = crate::mnf::siren_tape_forward(tape, &cfg.target_arch, theta, pts);
                    crate::trainer::l1_loss_node(tape, pred, &truth)
                };
                hypernet_grad(&shifted, &batch, 2, loss_builder).unwrap().0
            };
            let fd = (eval(h) - eval(-h)) / (2.0 * h);
            let analytic: f64 = grad.iter().zip(dir.iter()).map(|(g, d)| g * d).sum();
            let rel = (fd - analytic).abs() / fd.abs().max(1e-9);
            assert!(rel < 1e-3, "trial {trial}: fd {fd} vs exact {analytic} (rel {rel})");
        }
    }

    #[test]
    fn unused_head_rows_get_exact_zero_gradients() {
        // Loss reads every θ entry except the final output bias; the rows
        // of that head must receive exactly zero gradient.
        let cfg = tiny_config(false);
        let phi = init_hypernet(&cfg, 30).unwrap();
        let batch = tiny_batch(&cfg, 3);
        let total = cfg.target_arch.param_count();
        let last_bias = cfg.target_arch.out_dim;
        let (_, grad) = hypernet_grad(&phi, &batch, 1, |tape, theta| {
            let head = tape.slice_cols(theta, 0, total - last_bias);
            let head = tape.abs(head);
            tape.sum_all(head)
        })
        .unwrap();
        let layout = cfg.layout();
        let n_tensors = cfg.target_arch.tensor_shapes().len();
        let bias_head_w = layout.index_of(&format!("head{}.w", n_tensors - 1)).unwrap();
        let bias_head_b = layout.index_of(&format!("head{}.b", n_tensors - 1)).unwrap();
        for idx in [bias_head_w, bias_head_b] {
            let spec = layout.spec(idx);
            assert!(grad[spec.range()].iter().all(|g| *g == 0.0), "{} not zero", spec.name);
        }
        // ...while earlier heads do receive gradient.
        let spec0 = layout.spec(layout.index_of("head0.w").unwrap());
        assert!(grad[spec0.range()].iter().any(|g| *g != 0.0));
    }

    #[test]
    fn zero_loss_construction_gives_zero_gradient() {
        let cfg = tiny_config(false);
        let phi = init_hypernet(&cfg, 40).unwrap();
        let batch = tiny_batch(&cfg, 5);
        // loss = mean |θ − θ| = 0 identically
        let (loss, grad) = hypernet_grad(&phi, &batch, 0, |tape, theta| {
            let other = {
                let v = tape.value(theta).clone();
                tape.leaf(v)
            };
            let d = tape.sub(theta, other);
            let d = tape.abs(d);
            tape.sum_all(d)
        })
        .unwrap();
        assert_eq!(loss, 0.0);
        assert!(grad.iter().all(|g| *g == 0.0));
    }

    #[test]
    fn dropout_changes_training_forward_but_not_eval() {
        let mut cfg = tiny_config(false);
        cfg.dropout = 0.5;
        let phi = init_hypernet(&cfg, 50).unwrap();
        let batch = tiny_batch(&cfg, 6);
        let a = build_forward(&phi, &batch, 1, Some(1)).unwrap();
        let b = build_forward(&phi, &batch, 1, Some(2)).unwrap();
        let c = build_forward(&phi, &batch, 1, None).unwrap();
        let d = build_forward(&phi, &batch, 1, None).unwrap();
        let av: Vec<f64> = a.tape.value(a.theta_var()).iter().copied().collect();
        let bv: Vec<f64> = b.tape.value(b.theta_var()).iter().copied().collect();
        let cv: Vec<f64> = c.tape.value(c.theta_var()).iter().copied().collect();
        let dv: Vec<f64> = d.tape.value(d.theta_var()).iter().copied().collect();
        assert_ne!(av, bv);
        assert_eq!(cv, dv);
    }
}
