//! Discrete molecules from learned fields: gradient descent to distance
//! minima, greedy clustering into atom candidates, covalent-radius bond
//! perception, valence metrics, and element-aware RMSD alignment.

use ndarray::{Array2, Array3};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::fieldgen::{filler_values, FieldBuilder};
use crate::geom::{self, Sphere, Vec3};
use crate::mnf::{mnf_eval_matrix, mnf_spatial_grad_matrix, SirenParams};
use crate::molio::{Atom, AtomTypeVocab, Conformer, Element};

#[derive(Clone, Debug, PartialEq)]
pub struct ReconstructParams {
    /// Random seeds descended per channel.
    pub n_seeds: usize,
    /// Step factor λ in q ← q + λ·F(q).
    pub step_factor: f64,
    /// Convergence threshold on |F(q)| in Å.
    pub tol: f64,
    pub max_iter: usize,
    /// Candidates with mean field value above this are discarded.
    pub exist_threshold: f64,
    pub cluster_radius: f64,
    pub min_cluster: usize,
    /// Keep only minima within this fraction of the sphere radius;
    /// filler-channel minima sit on the sphere surface and fall outside.
    pub interior_fraction: f64,
}

impl Default for ReconstructParams {
    fn default() -> Self {
        ReconstructParams {
            n_seeds: 4096,
            step_factor: 0.5,
            tol: 1e-3,
            max_iter: 500,
            exist_threshold: 0.5,
            cluster_radius: 0.3,
            min_cluster: 3,
            interior_fraction: 0.9,
        }
    }
}

impl ReconstructParams {
    pub fn validate(&self) -> Result<()> {
        let positive = self.n_seeds > 0
            && self.step_factor > 0.0
            && self.tol > 0.0
            && self.max_iter > 0
            && self.exist_threshold > 0.0
            && self.cluster_radius > 0.0
            && self.min_cluster > 0
            && self.interior_fraction > 0.0;
        if !positive || self.step_factor > 1.0 || self.interior_fraction >= 1.0 {
            return Err(Error::Config("reconstruction parameters out of range".into()));
        }
        Ok(())
    }
}

/// Anything that evaluates a K-channel distance field and its spatial
/// gradient. Implemented by generated network parameters and by the exact
/// analytic field of a known molecule (the reconstruction oracle).
pub trait DistanceField {
    fn channels(&self) -> usize;
    fn eval(&self, points: &Array2<f64>) -> Result<Array2<f64>>;
    fn spatial_grad(&self, points: &Array2<f64>) -> Result<Array3<f64>>;
}

impl DistanceField for SirenParams {
    fn channels(&self) -> usize {
        self.arch.out_dim
    }

    fn eval(&self, points: &Array2<f64>) -> Result<Array2<f64>> {
        mnf_eval_matrix(self, points)
    }

    fn spatial_grad(&self, points: &Array2<f64>) -> Result<Array3<f64>> {
        mnf_spatial_grad_matrix(self, points)
    }
}

/// Exact nearest-atom distance field of a molecule, with filler channels
/// for absent elements. Gradients are the analytic unit vectors away from
/// the nearest atom.
pub struct AnalyticField {
    builder: FieldBuilder,
    sphere: Sphere,
    k: usize,
}

impl AnalyticField {
    pub fn new(conformer: &Conformer, vocab: &AtomTypeVocab, sphere: Sphere) -> AnalyticField {
        AnalyticField {
            builder: FieldBuilder::new(conformer, vocab, sphere),
            sphere,
            k: vocab.k(),
        }
    }
}

impl DistanceField for AnalyticField {
    fn channels(&self) -> usize {
        self.k
    }

    fn eval(&self, points: &Array2<f64>) -> Result<Array2<f64>> {
        let n = points.nrows();
        let mut out = Array2::zeros((n, self.k));
        for j in 0..n {
            let q = [points[[j, 0]], points[[j, 1]], points[[j, 2]]];
            for ch in 0..self.k {
                out[[j, ch]] = match self.builder.nearest(q, ch) {
                    Some((_, d)) => d,
                    None => filler_values(q, self.sphere.center, self.sphere.radius).1,
                };
            }
        }
        Ok(out)
    }

    fn spatial_grad(&self, points: &Array2<f64>) -> Result<Array3<f64>> {
        let n = points.nrows();
        let mut out = Array3::zeros((n, self.k, 3));
        for j in 0..n {
            let q = [points[[j, 0]], points[[j, 1]], points[[j, 2]]];
            for ch in 0..self.k {
                let grad = match self.builder.nearest(q, ch) {
                    Some((atom, d)) => {
                        if d == 0.0 {
                            [0.0; 3]
                        } else {
                            geom::scale(geom::sub(q, atom), 1.0 / d)
                        }
                    }
                    None => {
                        let rel = geom::sub(q, self.sphere.center);
                        let r = geom::norm(rel);
                        let unit = if r == 0.0 { [1.0, 0.0, 0.0] } else { geom::scale(rel, 1.0 / r) };
                        // f = |R − r|: gradient flips sign at the surface
                        if r <= self.sphere.radius {
                            geom::scale(unit, -1.0)
                        } else {
                            unit
                        }
                    }
                };
                for ax in 0..3 {
                    out[[j, ch, ax]] = grad[ax];
                }
            }
        }
        Ok(out)
    }
}

/// A descended seed that reached |F| < tol.
#[derive(Clone, Copy, Debug)]
pub struct ConvergedPoint {
    pub seed_index: usize,
    pub position: Vec3,
    /// Field value at the converged point.
    pub f: f64,
}

#[derive(Clone, Debug)]
pub struct DescentReport {
    pub converged: Vec<ConvergedPoint>,
    pub dropped: usize,
    pub iterations: usize,
}

fn uniform_in_sphere(sphere: Sphere, n: usize, seed: u64) -> Vec<Vec3> {
    let mut rng = crate::rng::stream(seed, "descent-seeds", 0);
    (0..n)
        .map(|_| {
            let mut dir = [0.0; 3];
            loop {
                for d in dir.iter_mut() {
                    *d = rng.sample::<f64, _>(StandardNormal);
                }
                if geom::norm(dir) > 1e-12 {
                    break;
                }
            }
            let unit = geom::scale(dir, 1.0 / geom::norm(dir));
            let radius = sphere.radius * rng.gen::<f64>().cbrt();
            geom::add(sphere.center, geom::scale(unit, radius))
        })
        .collect()
}

/// Iterate q ← q + λ·F⁽ᵏ⁾(q) with F = −f·∇f from uniform seeds in the
/// sphere until |F| < tol or the iteration budget runs out. Non-converged
/// seeds are dropped and counted.
pub fn descend_to_minima(
    field: &dyn DistanceField,
    channel: usize,
    sphere: Sphere,
    params: &ReconstructParams,
    seed: u64,
) -> Result<DescentReport> {
    params.validate()?;
    assert!(channel < field.channels(), "channel out of range");
    let mut active: Vec<(usize, Vec3)> = uniform_in_sphere(sphere, params.n_seeds, seed)
        .into_iter()
        .enumerate()
        .collect();
    let mut converged = Vec::new();
    let mut iterations = 0;

    while !active.is_empty() && iterations < params.max_iter {
        iterations += 1;
        let mut points = Array2::zeros((active.len(), 3));
        for (row, (_, p)) in active.iter().enumerate() {
            for ax in 0..3 {
                points[[row, ax]] = p[ax];
            }
        }
        let f = field.eval(&points)?;
        let grad = field.spatial_grad(&points)?;
        let mut still_active = Vec::with_capacity(active.len());
        for (row, (idx, p)) in active.iter().enumerate() {
            let fv = f[[row, channel]];
            let step = [
                -fv * grad[[row, channel, 0]],
                -fv * grad[[row, channel, 1]],
                -fv * grad[[row, channel, 2]],
            ];
            if !geom::all_finite(step) {
                continue; // diverged seed: drop
            }
            if geom::norm(step) < params.tol {
                converged.push(ConvergedPoint { seed_index: *idx, position: *p, f: fv });
            } else {
                still_active.push((*idx, geom::add(*p, geom::scale(step, params.step_factor))));
            }
        }
        active = still_active;
    }
    Ok(DescentReport { converged, dropped: active.len(), iterations })
}

/// An atom candidate produced by clustering converged descent points.
#[derive(Clone, Debug)]
pub struct AtomCandidate {
    pub position: Vec3,
    pub mean_f: f64,
    pub population: usize,
}

/// Greedy radius clustering in descending population order: repeatedly
/// take the point whose radius ball holds the most remaining points,
/// cluster that ball, and remove it. Clusters below the minimum size or
/// above the existence threshold are discarded.
pub fn cluster_points(points: &[ConvergedPoint], params: &ReconstructParams) -> Vec<AtomCandidate> {
    let n = points.len();
    if n == 0 {
        return Vec::new();
    }
    let r2 = params.cluster_radius * params.cluster_radius;
    let mut neighbors: Vec<Vec<u32>> = vec![Vec::new(); n];
    for i in 0..n {
        for j in (i + 1)..n {
            if geom::dist2(points[i].position, points[j].position) <= r2 {
                neighbors[i].push(j as u32);
                neighbors[j].push(i as u32);
            }
        }
    }
    let mut alive = vec![true; n];
    let mut count: Vec<usize> = neighbors.iter().map(|nb| nb.len() + 1).collect();
    let mut candidates = Vec::new();

    loop {
        let mut best: Option<usize> = None;
        for i in 0..n {
            if alive[i] {
                let better = match best {
                    None => true,
                    Some(b) => count[i] > count[b],
                };
                if better {
                    best = Some(i);
                }
            }
        }
        let Some(center) = best else { break };
        let mut members: Vec<usize> = vec![center];
        members.extend(neighbors[center].iter().map(|&j| j as usize).filter(|&j| alive[j]));
        let mut mean = [0.0; 3];
        let mut mean_f = 0.0;
        for &mi in &members {
            mean = geom::add(mean, points[mi].position);
            mean_f += points[mi].f;
            alive[mi] = false;
            for &nb in &neighbors[mi] {
                count[nb as usize] = count[nb as usize].saturating_sub(1);
            }
        }
        let population = members.len();
        let mean = geom::scale(mean, 1.0 / population as f64);
        mean_f /= population as f64;
        if population >= params.min_cluster && mean_f <= params.exist_threshold {
            candidates.push(AtomCandidate { position: mean, mean_f, population });
        }
    }
    candidates
}

/// Recover a discrete molecule from a distance field: per channel,
/// descend, cluster, and keep interior candidates as atoms of that
/// element.
pub fn field_to_conformer(
    field: &dyn DistanceField,
    vocab: &AtomTypeVocab,
    sphere: Sphere,
    params: &ReconstructParams,
    seed: u64,
) -> Result<Conformer> {
    if field.channels() != vocab.k() {
        return Err(Error::ShapeMismatch(format!(
            "field has {} channels, vocabulary has {}",
            field.channels(),
            vocab.k()
        )));
    }
    let mut atoms = Vec::new();
    for (ch, &element) in vocab.elements().iter().enumerate() {
        let chan_seed = crate::rng::derive(seed, "reconstruct-channel", ch as u64);
        let report = descend_to_minima(field, ch, sphere, params, chan_seed)?;
        let keep_radius = params.interior_fraction * sphere.radius;
        for cand in cluster_points(&report.converged, params) {
            if geom::dist(cand.position, sphere.center) <= keep_radius {
                atoms.push(Atom { element, position: cand.position });
            }
        }
    }
    if atoms.is_empty() {
        return Err(Error::Empty("no atoms recovered from the field".into()));
    }
    Conformer::new(atoms, "reconstructed")
}

/// Covalent radius in Å.
pub fn covalent_radius(e: Element) -> f64 {
    match e {
        Element::C => 0.76,
        Element::H => 0.31,
        Element::O => 0.66,
        Element::N => 0.71,
        Element::F => 0.57,
        Element::S => 1.05,
        Element::Cl => 1.02,
        Element::Br => 1.20,
    }
}

/// Bond-length tolerance against the covalent-radius sum.
pub const BOND_TOLERANCE: f64 = 1.2;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Bond {
    pub i: usize,
    pub j: usize,
    pub order: u8,
}

#[derive(Clone, Debug)]
pub struct MoleculeGraph {
    pub conformer: Conformer,
    pub bonds: Vec<Bond>,
}

/// Upper length cutoffs (triple, double) in Å for C/N/O pairs; shorter
/// bonds get higher orders. Everything else is a single bond.
fn order_cutoffs(a: Element, b: Element) -> Option<(Option<f64>, f64)> {
    use Element::{C, N, O};
    let pair = if a <= b { (a, b) } else { (b, a) };
    match pair {
        (C, C) => Some((Some(1.27), 1.44)),
        (C, O) => Some((Some(1.18), 1.33)),
        (C, N) => Some((Some(1.225), 1.38)),
        (O, N) => Some((Some(1.135), 1.305)),
        (O, O) => Some((None, 1.345)),
        (N, N) => Some((Some(1.175), 1.35)),
        _ => None,
    }
}

/// Distance-based bond perception: bond when the pair distance is within
/// 1.2 × the covalent-radius sum; order from pairwise length tables for
/// C/N/O pairs, otherwise 1.
pub fn infer_bonds(conformer: &Conformer) -> MoleculeGraph {
    let atoms = conformer.atoms();
    let mut bonds = Vec::new();
    for i in 0..atoms.len() {
        for j in (i + 1)..atoms.len() {
            let d = geom::dist(atoms[i].position, atoms[j].position);
            let cutoff = BOND_TOLERANCE
                * (covalent_radius(atoms[i].element) + covalent_radius(atoms[j].element));
            if d > cutoff {
                continue;
            }
            let order = match order_cutoffs(atoms[i].element, atoms[j].element) {
                Some((triple, double)) => {
                    if triple.is_some_and(|t| d <= t) {
                        3
                    } else if d <= double {
                        2
                    } else {
                        1
                    }
                }
                None => 1,
            };
            bonds.push(Bond { i, j, order });
        }
    }
    MoleculeGraph { conformer: conformer.clone(), bonds }
}

fn allowed_valences(e: Element) -> &'static [u8] {
    match e {
        Element::H | Element::F | Element::Cl | Element::Br => &[1],
        Element::C => &[4],
        Element::N => &[3],
        Element::O => &[2],
        Element::S => &[2, 4, 6],
    }
}

fn max_valence(e: Element) -> u8 {
    *allowed_valences(e).iter().max().expect("nonempty")
}

/// Valence-based quality metrics, in percent.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize)]
pub struct StabilityReport {
    pub atom_stable: f64,
    pub mol_stable: f64,
    pub valid: f64,
}

/// Atom stability: fraction of atoms whose summed bond order matches an
/// allowed valence. Molecule stability: fraction of molecules with every
/// atom correct. Validity: connected, no valence above the element
/// maximum, and no interatomic distance below 0.5 Å.
pub fn stability_metrics(graphs: &[MoleculeGraph]) -> Result<StabilityReport> {
    if graphs.is_empty() {
        return Err(Error::Empty("no molecules to score".into()));
    }
    let mut atoms_total = 0usize;
    let mut atoms_ok = 0usize;
    let mut mols_ok = 0usize;
    let mut valid = 0usize;
    for g in graphs {
        let n = g.conformer.len();
        let mut valence = vec![0u32; n];
        for b in &g.bonds {
            valence[b.i] += b.order as u32;
            valence[b.j] += b.order as u32;
        }
        let mut all_ok = true;
        let mut over_max = false;
        for (atom, &v) in g.conformer.atoms().iter().zip(valence.iter()) {
            let ok = allowed_valences(atom.element).iter().any(|&a| a as u32 == v);
            atoms_total += 1;
            if ok {
                atoms_ok += 1;
            } else {
                all_ok = false;
            }
            if v > max_valence(atom.element) as u32 {
                over_max = true;
            }
        }
        if all_ok {
            mols_ok += 1;
        }

        let connected = {
            let mut adj = vec![Vec::new(); n];
            for b in &g.bonds {
                adj[b.i].push(b.j);
                adj[b.j].push(b.i);
            }
            let mut seen = vec![false; n];
            let mut stack = vec![0usize];
            seen[0] = true;
            while let Some(i) = stack.pop() {
                for &j in &adj[i] {
                    if !seen[j] {
                        seen[j] = true;
                        stack.push(j);
                    }
                }
            }
            seen.iter().all(|&s| s)
        };
        let mut min_dist = f64::INFINITY;
        for i in 0..n {
            for j in (i + 1)..n {
                min_dist = min_dist.min(geom::dist(
                    g.conformer.atoms()[i].position,
                    g.conformer.atoms()[j].position,
                ));
            }
        }
        if connected && !over_max && (n < 2 || min_dist >= 0.5) {
            valid += 1;
        }
    }
    let n_mols = graphs.len() as f64;
    Ok(StabilityReport {
        atom_stable: 100.0 * atoms_ok as f64 / atoms_total as f64,
        mol_stable: 100.0 * mols_ok as f64 / n_mols,
        valid: 100.0 * valid as f64 / n_mols,
    })
}

/// Minimum-cost assignment (Hungarian algorithm, O(n³)) on a square cost
/// matrix; returns the column assigned to each row.
pub fn hungarian(cost: &Array2<f64>) -> Vec<usize> {
    let n = cost.nrows();
    assert_eq!(cost.ncols(), n, "cost matrix must be square");
    let mut u = vec![0.0_f64; n + 1];
    let mut v = vec![0.0_f64; n + 1];
    let mut assigned_row = vec![0usize; n + 1]; // column -> row (1-based)
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        assigned_row[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = assigned_row[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost[[i0 - 1, j - 1]] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[assigned_row[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if assigned_row[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            assigned_row[j0] = assigned_row[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut result = vec![0usize; n];
    for j in 1..=n {
        if assigned_row[j] > 0 {
            result[assigned_row[j] - 1] = j - 1;
        }
    }
    result
}

/// Element-aware optimal-assignment RMSD after Kabsch alignment.
/// Returns an error when the element multisets differ.
pub fn kabsch_rmsd(a: &Conformer, b: &Conformer) -> Result<f64> {
    let mut pairs: Vec<(Vec3, Vec3)> = Vec::with_capacity(a.len());
    for element in Element::ALL {
        let pa: Vec<Vec3> = a.atoms_of(element).map(|(_, p)| p).collect();
        let pb: Vec<Vec3> = b.atoms_of(element).map(|(_, p)| p).collect();
        if pa.len() != pb.len() {
            return Err(Error::ShapeMismatch(format!(
                "element {element}: {} vs {} atoms",
                pa.len(),
                pb.len()
            )));
        }
        if pa.is_empty() {
            continue;
        }
        let n = pa.len();
        let cost = Array2::from_shape_fn((n, n), |(i, j)| geom::dist2(pa[i], pb[j]));
        let assign = hungarian(&cost);
        for (i, &j) in assign.iter().enumerate() {
            pairs.push((pa[i], pb[j]));
        }
    }
    if pairs.is_empty() {
        return Err(Error::Empty("no atoms to align".into()));
    }
    Ok(aligned_rmsd(&pairs))
}

fn aligned_rmsd(pairs: &[(Vec3, Vec3)]) -> f64 {
    use nalgebra::{Matrix3, Vector3};
    let n = pairs.len() as f64;
    let mut ca = [0.0; 3];
    let mut cb = [0.0; 3];
    for (pa, pb) in pairs {
        ca = geom::add(ca, *pa);
        cb = geom::add(cb, *pb);
    }
    ca = geom::scale(ca, 1.0 / n);
    cb = geom::scale(cb, 1.0 / n);

    let mut h = Matrix3::<f64>::zeros();
    for (pa, pb) in pairs {
        let x = Vector3::new(pa[0] - ca[0], pa[1] - ca[1], pa[2] - ca[2]);
        let y = Vector3::new(pb[0] - cb[0], pb[1] - cb[1], pb[2] - cb[2]);
        h += x * y.transpose();
    }
    let svd = h.svd(true, true);
    let u = svd.u.expect("svd u");
    let vt = svd.v_t.expect("svd vt");
    let d = (vt.transpose() * u.transpose()).determinant().signum();
    let correction = Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, d));
    let rot = vt.transpose() * correction * u.transpose();

    let mut ss = 0.0;
    for (pa, pb) in pairs {
        let x = Vector3::new(pa[0] - ca[0], pa[1] - ca[1], pa[2] - ca[2]);
        let y = Vector3::new(pb[0] - cb[0], pb[1] - cb[1], pb[2] - cb[2]);
        let r = rot * x - y;
        ss += r.norm_squared();
    }
    (ss / n).sqrt()
}
