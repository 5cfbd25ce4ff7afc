//! Ground-truth field construction.
//!
//! A molecule with atom set 𝒜 induces, per element channel k, a direction
//! field F⁽ᵏ⁾(q) = a_nearest − q over the atoms of that element, and a
//! distance field f⁽ᵏ⁾(q) = ‖a_nearest − q‖. Channels for elements absent
//! from the molecule are filled with outward-pointing vectors anchored to
//! the bounding sphere, so every molecule yields a dense K-channel field.
//! Query points are sampled uniformly within the cells of a c×c×c grid.

mod kdtree;

use ndarray::{Array2, Array3};
use rand::Rng;

use crate::error::{Error, Result};
use crate::geom::{self, Sphere, Vec3};
use crate::molio::{AtomTypeVocab, Conformer, Element};

use kdtree::KdTree;

/// Atom count above which a channel switches from brute-force scans to a
/// kd-tree. Both backends implement the same lowest-index tie-break and
/// must agree exactly.
const TREE_THRESHOLD: usize = 64;

/// Uniform c×c×c sampling grid over a bounding box that encloses the
/// molecule's bounding sphere.
#[derive(Clone, Debug, PartialEq)]
pub struct GridSpec {
    pub cells_per_axis: usize,
    pub points_per_cell: usize,
    pub bbox_min: Vec3,
    pub bbox_max: Vec3,
    pub sphere: Sphere,
}

impl GridSpec {
    /// Grid for a single conformer: the bounding sphere of the molecule
    /// (max atom distance from the centroid, plus `margin`) and the cube
    /// that exactly encloses it.
    pub fn for_conformer(
        conformer: &Conformer,
        cells_per_axis: usize,
        points_per_cell: usize,
        margin: f64,
    ) -> GridSpec {
        let center = conformer.centroid();
        let radius = conformer.bounding_radius(margin);
        Self::around(Sphere { center, radius }, cells_per_axis, points_per_cell)
    }

    /// Shared grid for a dataset: one sphere enclosing every molecule.
    pub fn for_dataset(
        dataset: &[Conformer],
        cells_per_axis: usize,
        points_per_cell: usize,
        margin: f64,
    ) -> Result<GridSpec> {
        if dataset.is_empty() {
            return Err(Error::Empty("dataset has no conformers".into()));
        }
        let mut center = [0.0; 3];
        let mut total = 0usize;
        for c in dataset {
            for a in c.atoms() {
                center = geom::add(center, a.position);
                total += 1;
            }
        }
        center = geom::scale(center, 1.0 / total as f64);
        let mut max = 0.0_f64;
        for c in dataset {
            for a in c.atoms() {
                max = max.max(geom::dist(a.position, center));
            }
        }
        Ok(Self::around(
            Sphere { center, radius: max + margin },
            cells_per_axis,
            points_per_cell,
        ))
    }

    pub fn around(sphere: Sphere, cells_per_axis: usize, points_per_cell: usize) -> GridSpec {
        assert!(cells_per_axis >= 1 && points_per_cell >= 1);
        assert!(sphere.radius > 0.0);
        let r = sphere.radius;
        GridSpec {
            cells_per_axis,
            points_per_cell,
            bbox_min: geom::sub(sphere.center, [r, r, r]),
            bbox_max: geom::add(sphere.center, [r, r, r]),
            sphere,
        }
    }

    pub fn n_cells(&self) -> usize {
        self.cells_per_axis.pow(3)
    }

    /// Total query count N = m·c³.
    pub fn n_points(&self) -> usize {
        self.points_per_cell * self.n_cells()
    }

    /// Axis-aligned bounds of one cell; the index runs x-major.
    pub fn cell_bounds(&self, cell: usize) -> (Vec3, Vec3) {
        let c = self.cells_per_axis;
        assert!(cell < self.n_cells());
        let iz = cell % c;
        let iy = (cell / c) % c;
        let ix = cell / (c * c);
        let idx = [ix, iy, iz];
        let mut lo = [0.0; 3];
        let mut hi = [0.0; 3];
        for ax in 0..3 {
            let width = (self.bbox_max[ax] - self.bbox_min[ax]) / c as f64;
            lo[ax] = self.bbox_min[ax] + idx[ax] as f64 * width;
            hi[ax] = lo[ax] + width;
        }
        (lo, hi)
    }

    pub fn validate(&self) -> Result<()> {
        for ax in 0..3 {
            if self.bbox_min[ax] > self.sphere.center[ax] - self.sphere.radius
                || self.bbox_max[ax] < self.sphere.center[ax] + self.sphere.radius
            {
                return Err(Error::Config("grid bbox does not enclose the sphere".into()));
            }
        }
        Ok(())
    }
}

/// Query points drawn from a grid, with their cell labels.
#[derive(Clone, Debug)]
pub struct QuerySet {
    pub points: Vec<Vec3>,
    pub cell_index: Vec<usize>,
    pub seed: u64,
    pub sphere: Sphere,
    pub cells_per_axis: usize,
}

impl QuerySet {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn n_cells(&self) -> usize {
        self.cells_per_axis.pow(3)
    }

    /// Points as an N×3 matrix for network evaluation.
    pub fn coord_matrix(&self) -> Array2<f64> {
        let mut m = Array2::zeros((self.points.len(), 3));
        for (i, p) in self.points.iter().enumerate() {
            for ax in 0..3 {
                m[[i, ax]] = p[ax];
            }
        }
        m
    }
}

/// Draw exactly `m` points uniformly inside each grid cell.
/// Deterministic for a given seed.
pub fn sample_query_points(grid: &GridSpec, seed: u64) -> QuerySet {
    let mut rng = crate::rng::rng(seed);
    let n = grid.n_points();
    let mut points = Vec::with_capacity(n);
    let mut cell_index = Vec::with_capacity(n);
    for cell in 0..grid.n_cells() {
        let (lo, hi) = grid.cell_bounds(cell);
        for _ in 0..grid.points_per_cell {
            let mut p = [0.0; 3];
            for ax in 0..3 {
                let u: f64 = rng.gen();
                p[ax] = lo[ax] + u * (hi[ax] - lo[ax]);
            }
            points.push(p);
            cell_index.push(cell);
        }
    }
    QuerySet {
        points,
        cell_index,
        seed,
        sphere: grid.sphere,
        cells_per_axis: grid.cells_per_axis,
    }
}

/// Which representation of the field a matrix carries.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FieldKind {
    Direction,
    Distance,
}

impl FieldKind {
    /// Width of the per-point feature row: 3K for directions, K for distances.
    pub fn field_dim(self, k: usize) -> usize {
        match self {
            FieldKind::Direction => 3 * k,
            FieldKind::Distance => k,
        }
    }
}

/// N×K×3 direction values; channel k points to the nearest atom of
/// element k (or along the filler field when the element is absent).
#[derive(Clone, Debug)]
pub struct DirectionSample {
    pub values: Array3<f64>,
    pub present: Vec<bool>,
}

/// N×K nonnegative distance values.
#[derive(Clone, Debug)]
pub struct DistanceSample {
    pub values: Array2<f64>,
    pub present: Vec<bool>,
}

impl DirectionSample {
    pub fn n(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn k(&self) -> usize {
        self.values.shape()[1]
    }

    /// Flatten to N×3K with per-row layout [k₀xyz, k₁xyz, …].
    pub fn to_matrix(&self) -> FieldMatrix {
        let n = self.n();
        let k = self.k();
        let data = self
            .values
            .to_owned()
            .into_shape_with_order((n, 3 * k))
            .expect("contiguous direction sample");
        FieldMatrix { kind: FieldKind::Direction, k, data }
    }
}

impl DistanceSample {
    pub fn n(&self) -> usize {
        self.values.nrows()
    }

    pub fn k(&self) -> usize {
        self.values.ncols()
    }

    pub fn to_matrix(&self) -> FieldMatrix {
        FieldMatrix { kind: FieldKind::Distance, k: self.k(), data: self.values.clone() }
    }
}

/// A field evaluated at N query points, flattened to an N×field_dim
/// matrix; the common currency between noising, tokenization, and losses.
#[derive(Clone, Debug)]
pub struct FieldMatrix {
    pub kind: FieldKind,
    pub k: usize,
    pub data: Array2<f64>,
}

impl FieldMatrix {
    pub fn n(&self) -> usize {
        self.data.nrows()
    }

    pub fn field_dim(&self) -> usize {
        self.data.ncols()
    }
}

/// Position and distance of the nearest atom of `element`, or `None` when
/// the molecule has no atom of that element. Ties resolve to the lowest
/// atom index.
pub fn nearest_atom(q: Vec3, conformer: &Conformer, element: Element) -> Option<(Vec3, f64)> {
    let mut best: Option<(Vec3, usize, f64)> = None;
    for (idx, pos) in conformer.atoms_of(element) {
        let d2 = geom::dist2(q, pos);
        let replace = match best {
            None => true,
            Some((_, bi, bd2)) => d2 < bd2 || (d2 == bd2 && idx < bi),
        };
        if replace {
            best = Some((pos, idx, d2));
        }
    }
    best.map(|(pos, _, d2)| (pos, d2.sqrt()))
}

/// Filler channel for absent elements: the virtual nearest atom is the
/// closest bounding-sphere point on the ray from the centroid through q,
/// so direction and distance stay consistent (|F| = f). At the exact
/// center the ray direction is pinned to (1,0,0).
pub fn filler_values(q: Vec3, center: Vec3, radius: f64) -> (Vec3, f64) {
    let rel = geom::sub(q, center);
    let r = geom::norm(rel);
    let unit = if r == 0.0 { [1.0, 0.0, 0.0] } else { geom::scale(rel, 1.0 / r) };
    let direction = geom::scale(unit, radius - r);
    (direction, (radius - r).abs())
}

/// Per-channel nearest-atom index for one molecule against one vocabulary.
pub struct FieldBuilder {
    channels: Vec<Channel>,
    sphere: Sphere,
}

enum Channel {
    Absent,
    Brute(Vec<(Vec3, usize)>),
    Tree(KdTree),
}

impl FieldBuilder {
    pub fn new(conformer: &Conformer, vocab: &AtomTypeVocab, sphere: Sphere) -> FieldBuilder {
        let channels = vocab
            .elements()
            .iter()
            .map(|&e| {
                let atoms: Vec<(Vec3, usize)> = conformer.atoms_of(e).map(|(i, p)| (p, i)).collect();
                if atoms.is_empty() {
                    Channel::Absent
                } else if atoms.len() < TREE_THRESHOLD {
                    Channel::Brute(atoms)
                } else {
                    Channel::Tree(KdTree::build(atoms))
                }
            })
            .collect();
        FieldBuilder { channels, sphere }
    }

    pub fn k(&self) -> usize {
        self.channels.len()
    }

    pub fn present(&self) -> Vec<bool> {
        self.channels.iter().map(|c| !matches!(c, Channel::Absent)).collect()
    }

    /// Nearest atom of channel `k`, or `None` for an absent channel.
    pub fn nearest(&self, q: Vec3, k: usize) -> Option<(Vec3, f64)> {
        match &self.channels[k] {
            Channel::Absent => None,
            Channel::Brute(atoms) => {
                let mut best: Option<(Vec3, usize, f64)> = None;
                for &(pos, idx) in atoms {
                    let d2 = geom::dist2(q, pos);
                    let replace = match best {
                        None => true,
                        Some((_, bi, bd2)) => d2 < bd2 || (d2 == bd2 && idx < bi),
                    };
                    if replace {
                        best = Some((pos, idx, d2));
                    }
                }
                best.map(|(pos, _, d2)| (pos, d2.sqrt()))
            }
            Channel::Tree(tree) => tree.nearest(q).map(|(pos, _, d2)| (pos, d2.sqrt())),
        }
    }

    pub fn direction_sample(&self, q: &QuerySet) -> DirectionSample {
        let n = q.len();
        let k = self.k();
        let mut values = Array3::zeros((n, k, 3));
        for (j, &point) in q.points.iter().enumerate() {
            for ch in 0..k {
                let dir = match self.nearest(point, ch) {
                    Some((atom, _)) => geom::sub(atom, point),
                    None => filler_values(point, self.sphere.center, self.sphere.radius).0,
                };
                for ax in 0..3 {
                    values[[j, ch, ax]] = dir[ax];
                }
            }
        }
        DirectionSample { values, present: self.present() }
    }

    pub fn distance_sample(&self, q: &QuerySet) -> DistanceSample {
        let n = q.len();
        let k = self.k();
        let mut values = Array2::zeros((n, k));
        for (j, &point) in q.points.iter().enumerate() {
            for ch in 0..k {
                values[[j, ch]] = match self.nearest(point, ch) {
                    Some((_, d)) => d,
                    None => filler_values(point, self.sphere.center, self.sphere.radius).1,
                };
            }
        }
        DistanceSample { values, present: self.present() }
    }
}

/// Direction field of `conformer` at the query set; absent channels get
/// filler values anchored to the query set's sphere.
pub fn direction_sample(q: &QuerySet, conformer: &Conformer, vocab: &AtomTypeVocab) -> DirectionSample {
    FieldBuilder::new(conformer, vocab, q.sphere).direction_sample(q)
}

/// Distance field of `conformer` at the query set.
pub fn distance_sample(q: &QuerySet, conformer: &Conformer, vocab: &AtomTypeVocab) -> DistanceSample {
    FieldBuilder::new(conformer, vocab, q.sphere).distance_sample(q)
}

/// Pure filler field on every channel (the conditioning input for a fully
/// masked molecule).
pub fn filler_field(q: &QuerySet, k: usize, kind: FieldKind) -> FieldMatrix {
    let n = q.len();
    match kind {
        FieldKind::Direction => {
            let mut data = Array2::zeros((n, 3 * k));
            for (j, &p) in q.points.iter().enumerate() {
                let (dir, _) = filler_values(p, q.sphere.center, q.sphere.radius);
                for ch in 0..k {
                    for ax in 0..3 {
                        data[[j, 3 * ch + ax]] = dir[ax];
                    }
                }
            }
            FieldMatrix { kind, k, data }
        }
        FieldKind::Distance => {
            let mut data = Array2::zeros((n, k));
            for (j, &p) in q.points.iter().enumerate() {
                let (_, d) = filler_values(p, q.sphere.center, q.sphere.radius);
                for ch in 0..k {
                    data[[j, ch]] = d;
                }
            }
            FieldMatrix { kind, k, data }
        }
    }
}

/// The two smallest distances from `q` to atoms of `element`, used to
/// detect proximity to a Voronoi boundary.
pub fn nearest_two_distances(
    conformer: &Conformer,
    element: Element,
    q: Vec3,
) -> Option<(f64, Option<f64>)> {
    let mut d1 = f64::INFINITY;
    let mut d2 = f64::INFINITY;
    let mut found = false;
    for (_, pos) in conformer.atoms_of(element) {
        found = true;
        let d = geom::dist(q, pos);
        if d < d1 {
            d2 = d1;
            d1 = d;
        } else if d < d2 {
            d2 = d;
        }
    }
    if !found {
        return None;
    }
    Some((d1, if d2.is_finite() { Some(d2) } else { None }))
}

/// Distance-stratified bins over a batch of query points.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DistanceBin {
    VeryClose,
    Close,
    Medium,
    Far,
    VeryFar,
}

impl DistanceBin {
    pub const ALL: [DistanceBin; 5] = [
        DistanceBin::VeryClose,
        DistanceBin::Close,
        DistanceBin::Medium,
        DistanceBin::Far,
        DistanceBin::VeryFar,
    ];

    pub const LABELS: [&'static str; 5] = ["very_close", "close", "medium", "far", "very_far"];

    pub fn index(self) -> usize {
        match self {
            DistanceBin::VeryClose => 0,
            DistanceBin::Close => 1,
            DistanceBin::Medium => 2,
            DistanceBin::Far => 3,
            DistanceBin::VeryFar => 4,
        }
    }
}

/// Percentile boundaries of the five bins, in percent.
const BIN_BOUNDS: [usize; 6] = [0, 2, 33, 66, 98, 100];

/// Label each point by the percentile rank of its minimum-across-channels
/// distance. Boundaries are lower-inclusive, upper-exclusive except the
/// last bin; ties share the rank of their first occurrence, so equal
/// values always land in the lower bin.
pub fn assign_distance_bins(sample: &DistanceSample) -> Vec<DistanceBin> {
    let min_dist: Vec<f64> = (0..sample.n())
        .map(|j| sample.values.row(j).iter().copied().fold(f64::INFINITY, f64::min))
        .collect();
    bins_from_min_distances(&min_dist)
}

/// Bin labels from precomputed per-point minimum distances (used when a
/// batch spans several molecules).
pub fn bins_from_min_distances(min_dist: &[f64]) -> Vec<DistanceBin> {
    let n = min_dist.len();
    assert!(n >= 5, "need at least 5 points to stratify into 5 bins");
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_unstable_by(|&a, &b| min_dist[a].total_cmp(&min_dist[b]));

    let mut ranks = vec![0usize; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && min_dist[order[j + 1]] == min_dist[order[i]] {
            j += 1;
        }
        for &p in &order[i..=j] {
            ranks[p] = i;
        }
        i = j + 1;
    }

    ranks
        .into_iter()
        .map(|rank| {
            let p = 100 * rank;
            let mut bin = 4;
            for b in 0..4 {
                if p < n * BIN_BOUNDS[b + 1] {
                    bin = b;
                    break;
                }
            }
            DistanceBin::ALL[bin]
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures;
    use crate::molio::Atom;
    use rand::Rng;

    fn single_carbon(at: Vec3) -> Conformer {
        Conformer::new(vec![Atom { element: Element::C, position: at }], "c").unwrap()
    }

    fn query_at(points: Vec<Vec3>, sphere: Sphere) -> QuerySet {
        let cell_index = vec![0; points.len()];
        QuerySet { points, cell_index, seed: 0, sphere, cells_per_axis: 1 }
    }

    #[test]
    fn nearest_atom_basic_and_tie_break() {
        let c = single_carbon([1.0, 2.0, 3.0]);
        let (pos, d) = nearest_atom([1.0, 2.0, 3.0], &c, Element::C).unwrap();
        assert_eq!(pos, [1.0, 2.0, 3.0]);
        assert_eq!(d, 0.0);

        let two = Conformer::new(
            vec![
                Atom { element: Element::C, position: [0.0; 3] },
                Atom { element: Element::C, position: [4.0, 0.0, 0.0] },
            ],
            "two",
        )
        .unwrap();
        let (pos, d) = nearest_atom([1.0, 0.0, 0.0], &two, Element::C).unwrap();
        assert_eq!(pos, [0.0; 3]);
        assert!((d - 1.0).abs() < 1e-15);

        // Equidistant: the lower atom index wins. Verified against both
        // candidates by hand: |q-a0| = |q-a1| = 2.
        let (pos, d) = nearest_atom([2.0, 0.0, 0.0], &two, Element::C).unwrap();
        assert_eq!(pos, [0.0; 3]);
        assert_eq!(d, 2.0);

        assert!(nearest_atom([0.0; 3], &two, Element::N).is_none());
    }

    #[test]
    fn filler_geometry() {
        let (dir, dist) = filler_values([2.0, 0.0, 0.0], [0.0; 3], 5.0);
        assert_eq!(dir, [3.0, 0.0, 0.0]);
        assert_eq!(dist, 3.0);

        let (dir, dist) = filler_values([5.0, 0.0, 0.0], [0.0; 3], 5.0);
        assert_eq!(dir, [0.0, 0.0, 0.0]);
        assert_eq!(dist, 0.0);

        let (dir, dist) = filler_values([0.0; 3], [0.0; 3], 5.0);
        assert_eq!(dir, [5.0, 0.0, 0.0]);
        assert_eq!(dist, 5.0);
    }

    #[test]
    fn direction_sample_present_and_filler_channels() {
        let c = single_carbon([0.0; 3]);
        let vocab = AtomTypeVocab::new(vec![Element::C, Element::N]).unwrap();
        let sphere = Sphere { center: [0.0; 3], radius: 5.0 };
        let q = query_at(vec![[1.0, 0.0, 0.0]], sphere);
        let ds = direction_sample(&q, &c, &vocab);
        assert_eq!(ds.present, vec![true, false]);
        assert_eq!(
            [ds.values[[0, 0, 0]], ds.values[[0, 0, 1]], ds.values[[0, 0, 2]]],
            [-1.0, 0.0, 0.0]
        );
        // N channel: filler pointing outward to the sphere.
        assert_eq!(
            [ds.values[[0, 1, 0]], ds.values[[0, 1, 1]], ds.values[[0, 1, 2]]],
            [4.0, 0.0, 0.0]
        );
    }

    #[test]
    fn direction_translation_equivariance() {
        let m = fixtures::methane();
        let vocab = fixtures::methane_vocab();
        let grid = GridSpec::for_conformer(&m, 2, 3, 2.0);
        let q = sample_query_points(&grid, 9);
        let base = direction_sample(&q, &m, &vocab);

        let v = [1.0, -2.0, 0.5];
        let shifted = m.translated(v);
        let moved_points: Vec<Vec3> = q.points.iter().map(|&p| geom::add(p, v)).collect();
        let q2 = QuerySet {
            points: moved_points,
            cell_index: q.cell_index.clone(),
            seed: q.seed,
            sphere: Sphere { center: geom::add(q.sphere.center, v), radius: q.sphere.radius },
            cells_per_axis: q.cells_per_axis,
        };
        let moved = direction_sample(&q2, &shifted, &vocab);
        for (a, b) in base.values.iter().zip(moved.values.iter()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn samples_match_brute_force_oracle_on_random_conformers() {
        let mut rng = crate::rng::rng(42);
        let vocab = AtomTypeVocab::full();
        for trial in 0..5 {
            let m = fixtures::random_molecule(trial as u64 + 100, 3 + trial * 4);
            let grid = GridSpec::for_conformer(&m, 2, 4, 2.0);
            let q = sample_query_points(&grid, rng.gen());
            let dirs = direction_sample(&q, &m, &vocab);
            let dists = distance_sample(&q, &m, &vocab);
            for (j, &point) in q.points.iter().enumerate() {
                for (ch, &e) in vocab.elements().iter().enumerate() {
                    match nearest_atom(point, &m, e) {
                        Some((atom, d)) => {
                            assert!((dists.values[[j, ch]] - d).abs() < 1e-12);
                            let want = geom::sub(atom, point);
                            for ax in 0..3 {
                                assert!((dirs.values[[j, ch, ax]] - want[ax]).abs() < 1e-12);
                            }
                        }
                        None => {
                            let (fd, fdist) =
                                filler_values(point, q.sphere.center, q.sphere.radius);
                            assert!((dists.values[[j, ch]] - fdist).abs() < 1e-12);
                            for ax in 0..3 {
                                assert!((dirs.values[[j, ch, ax]] - fd[ax]).abs() < 1e-12);
                            }
                        }
                    }
                }
            }
            // |direction| equals distance elementwise.
            for j in 0..q.len() {
                for ch in 0..vocab.k() {
                    let v = [
                        dirs.values[[j, ch, 0]],
                        dirs.values[[j, ch, 1]],
                        dirs.values[[j, ch, 2]],
                    ];
                    assert!((geom::norm(v) - dists.values[[j, ch]]).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn tree_and_brute_backends_agree_exactly() {
        // 200 atoms of one element forces the kd-tree path; compare with
        // a hand-rolled brute scan under the same tie rule.
        let mut rng = crate::rng::rng(7);
        let atoms: Vec<Atom> = (0..200)
            .map(|_| Atom {
                element: Element::C,
                position: [
                    rng.gen_range(-4i64..=4) as f64 * 0.5,
                    rng.gen_range(-4i64..=4) as f64 * 0.5,
                    rng.gen_range(-4i64..=4) as f64 * 0.5,
                ],
            })
            .collect();
        // Deduplicate identical coordinates to satisfy the conformer invariant.
        let mut seen: Vec<Vec3> = Vec::new();
        let atoms: Vec<Atom> = atoms
            .into_iter()
            .filter(|a| {
                if seen.contains(&a.position) {
                    false
                } else {
                    seen.push(a.position);
                    true
                }
            })
            .collect();
        let n_atoms = atoms.len();
        assert!(n_atoms >= TREE_THRESHOLD, "fixture must exercise the tree path");
        let m = Conformer::new(atoms, "blob").unwrap();
        let sphere = Sphere { center: m.centroid(), radius: m.bounding_radius(2.0) };
        let builder = FieldBuilder::new(&m, &AtomTypeVocab::ca_trace(), sphere);
        for _ in 0..200 {
            let q = [
                rng.gen_range(-5i64..=5) as f64 * 0.5,
                rng.gen_range(-5i64..=5) as f64 * 0.5,
                rng.gen_range(-5i64..=5) as f64 * 0.5,
            ];
            let tree = builder.nearest(q, 0).unwrap();
            let brute = nearest_atom(q, &m, Element::C).unwrap();
            assert_eq!(tree.0, brute.0);
            assert_eq!(tree.1.to_bits(), brute.1.to_bits());
        }
    }

    #[test]
    fn query_sampling_shape_determinism_and_bounds() {
        let m = fixtures::methane();
        let grid = GridSpec::for_conformer(&m, 2, 3, 2.0);
        grid.validate().unwrap();
        let q = sample_query_points(&grid, 5);
        assert_eq!(q.len(), 24);
        for (j, &p) in q.points.iter().enumerate() {
            let (lo, hi) = grid.cell_bounds(q.cell_index[j]);
            for ax in 0..3 {
                assert!(p[ax] >= lo[ax] && p[ax] <= hi[ax]);
            }
        }
        let q2 = sample_query_points(&grid, 5);
        assert_eq!(q.points, q2.points);
        let q3 = sample_query_points(&grid, 6);
        assert_ne!(q.points, q3.points);
    }

    #[test]
    fn cell_means_approach_cell_centers() {
        let m = fixtures::methane();
        let grid = GridSpec::for_conformer(&m, 2, 10_000, 2.0);
        let q = sample_query_points(&grid, 3);
        let width = (grid.bbox_max[0] - grid.bbox_min[0]) / 2.0;
        for cell in 0..grid.n_cells() {
            let (lo, hi) = grid.cell_bounds(cell);
            let center = [(lo[0] + hi[0]) / 2.0, (lo[1] + hi[1]) / 2.0, (lo[2] + hi[2]) / 2.0];
            let mut mean = [0.0; 3];
            let mut count = 0;
            for (j, &p) in q.points.iter().enumerate() {
                if q.cell_index[j] == cell {
                    mean = geom::add(mean, p);
                    count += 1;
                }
            }
            assert_eq!(count, 10_000);
            mean = geom::scale(mean, 1.0 / count as f64);
            for ax in 0..3 {
                assert!(
                    (mean[ax] - center[ax]).abs() < 0.05 * width,
                    "cell {cell} mean {mean:?} vs center {center:?}"
                );
            }
        }
    }

    #[test]
    fn bins_match_counting_oracle_at_100_distinct() {
        // 100 distinct distances; sizes forced by the boundary convention.
        let mut values = Array2::zeros((100, 1));
        for j in 0..100 {
            values[[j, 0]] = (j as f64) * 0.1 + 0.05;
        }
        let sample = DistanceSample { values, present: vec![true] };
        let bins = assign_distance_bins(&sample);
        let mut counts = [0usize; 5];
        for b in &bins {
            counts[b.index()] += 1;
        }
        assert_eq!(counts, [2, 31, 33, 32, 2]);
        // Sorting by distance sorts by bin label.
        for j in 1..100 {
            assert!(bins[j].index() >= bins[j - 1].index());
        }
    }

    #[test]
    fn bins_all_equal_collapse_to_very_close() {
        let values = Array2::from_elem((10, 2), 1.5);
        let sample = DistanceSample { values, present: vec![true, true] };
        let bins = assign_distance_bins(&sample);
        assert!(bins.iter().all(|b| *b == DistanceBin::VeryClose));
    }

    #[test]
    fn gradient_identity_on_ground_truth() {
        // ∇q ½f² = q − a_nearest away from Voronoi boundaries, checked by
        // central finite differences of the analytic distance field.
        let m = fixtures::random_molecule(3, 9);
        let vocab = AtomTypeVocab::full();
        let grid = GridSpec::for_conformer(&m, 2, 16, 2.0);
        let q = sample_query_points(&grid, 17);
        let h = 1e-5;
        let mut checked = 0;
        for &point in &q.points {
            for (&e, ch) in vocab.elements().iter().zip(0..) {
                let Some((atom, d)) = nearest_atom(point, &m, e) else { continue };
                let _ = ch;
                if d < 1e-3 {
                    continue;
                }
                if let Some((d1, Some(d2))) = nearest_two_distances(&m, e, point) {
                    if (d2 - d1) / 2.0 < 0.1 {
                        continue; // too close to a Voronoi boundary
                    }
                }
                let want = geom::sub(point, atom); // q − a
                for ax in 0..3 {
                    let mut plus = point;
                    plus[ax] += h;
                    let mut minus = point;
                    minus[ax] -= h;
                    let fp = nearest_atom(plus, &m, e).unwrap().1;
                    let fm = nearest_atom(minus, &m, e).unwrap().1;
                    let grad = (0.5 * fp * fp - 0.5 * fm * fm) / (2.0 * h);
                    assert!(
                        (grad - want[ax]).abs() <= 1e-6 * want[ax].abs().max(1.0),
                        "axis {ax}: fd {grad} vs analytic {}",
                        want[ax]
                    );
                }
                checked += 1;
            }
        }
        assert!(checked > 50, "expected many interior checks, got {checked}");
    }
}
