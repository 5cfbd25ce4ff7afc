//! Synthetic molecules for tests, demos, and the acceptance suite.

use rand::Rng;

use crate::geom::{self, Vec3};
use crate::molio::{Atom, AtomTypeVocab, Conformer, Element};

/// Methane: carbon at the origin, four hydrogens on tetrahedral axes at
/// 1.09 Å. The hydrogen shell is symmetric, so the centroid sits on the
/// carbon.
pub fn methane() -> Conformer {
    let r = 1.09 / 3.0_f64.sqrt();
    let dirs = [[1.0, 1.0, 1.0], [1.0, -1.0, -1.0], [-1.0, 1.0, -1.0], [-1.0, -1.0, 1.0]];
    let mut atoms = vec![Atom { element: Element::C, position: [0.0; 3] }];
    for d in dirs {
        atoms.push(Atom { element: Element::H, position: geom::scale(d, r) });
    }
    Conformer::new(atoms, "methane").unwrap()
}

/// Two-channel vocabulary matching methane's composition.
pub fn methane_vocab() -> AtomTypeVocab {
    AtomTypeVocab::new(vec![Element::C, Element::H]).unwrap()
}

const ELEMENT_POOL: [Element; 13] = [
    Element::C,
    Element::C,
    Element::C,
    Element::C,
    Element::H,
    Element::H,
    Element::H,
    Element::O,
    Element::N,
    Element::F,
    Element::S,
    Element::Cl,
    Element::Br,
];

/// Random blob of atoms with pairwise separation of at least 1.2 Å,
/// packed inside a ball sized to the atom count. Geometry only; these are
/// not chemically sensible molecules.
pub fn random_molecule(seed: u64, n_atoms: usize) -> Conformer {
    assert!(n_atoms >= 1);
    let mut rng = crate::rng::stream(seed, "fixture-molecule", 0);
    let radius = 1.4 * (n_atoms as f64).cbrt() + 1.0;
    let mut atoms: Vec<Atom> = Vec::with_capacity(n_atoms);
    while atoms.len() < n_atoms {
        let p: Vec3 = [
            rng.gen_range(-radius..radius),
            rng.gen_range(-radius..radius),
            rng.gen_range(-radius..radius),
        ];
        if geom::norm(p) > radius {
            continue;
        }
        if atoms.iter().any(|a| geom::dist(a.position, p) < 1.2) {
            continue;
        }
        let element = ELEMENT_POOL[rng.gen_range(0..ELEMENT_POOL.len())];
        atoms.push(Atom { element, position: p });
    }
    Conformer::new(atoms, format!("random-{seed}-{n_atoms}")).unwrap()
}

/// Ten fixture molecules spanning 3 to 21 atoms.
pub fn fixture_set() -> Vec<Conformer> {
    (0..10)
        .map(|i| random_molecule(1000 + i as u64, 3 + 2 * i))
        .collect()
}

/// Synthetic alpha-carbon trace: a compact helix with consecutive-point
/// spacing close to the 3.8 Å CA-CA distance, centered at the origin.
pub fn ca_trace(n_points: usize) -> Conformer {
    assert!(n_points >= 2);
    let radius = 6.0;
    let step_angle = std::f64::consts::PI * 2.0 / 10.0; // ten points per turn
    let chord = 2.0 * radius * (step_angle / 2.0).sin();
    let rise = (3.8_f64 * 3.8 - chord * chord).sqrt();
    let z0 = rise * (n_points as f64 - 1.0) / 2.0;
    let atoms = (0..n_points)
        .map(|i| {
            let theta = step_angle * i as f64;
            Atom {
                element: Element::C,
                position: [radius * theta.cos(), radius * theta.sin(), rise * i as f64 - z0],
            }
        })
        .collect();
    Conformer::new(atoms, format!("ca-trace-{n_points}")).unwrap()
}

/// Small dataset with varying heavy-atom counts, for embedding and
/// property-prediction checks.
pub fn toy_dataset(count: usize, seed: u64) -> Vec<Conformer> {
    let mut rng = crate::rng::stream(seed, "fixture-dataset", 0);
    (0..count)
        .map(|i| {
            let n = rng.gen_range(3..=12);
            random_molecule(seed.wrapping_add(7919 * (i as u64 + 1)), n)
        })
        .collect()
}

/// Count of non-hydrogen atoms; a cheap synthetic regression label.
pub fn heavy_atom_count(c: &Conformer) -> usize {
    c.atoms().iter().filter(|a| a.element.is_heavy()).count()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn methane_geometry() {
        let m = methane();
        assert_eq!(m.len(), 5);
        for h in &m.atoms()[1..] {
            assert!((geom::norm(h.position) - 1.09).abs() < 1e-12);
        }
    }

    #[test]
    fn random_molecules_respect_separation() {
        let m = random_molecule(5, 21);
        assert_eq!(m.len(), 21);
        for (i, a) in m.atoms().iter().enumerate() {
            for b in &m.atoms()[..i] {
                assert!(geom::dist(a.position, b.position) >= 1.2);
            }
        }
    }

    #[test]
    fn ca_trace_spacing_near_3_8() {
        let t = ca_trace(30);
        for w in t.atoms().windows(2) {
            let d = geom::dist(w[0].position, w[1].position);
            assert!((d - 3.8).abs() < 1e-9, "spacing {d}");
        }
        // Compact enough that every point sits well inside 0.9·R of the
        // default bounding sphere.
        let c = t.centroid();
        let r = t.bounding_radius(2.0);
        for a in t.atoms() {
            assert!(geom::dist(a.position, c) < 0.9 * r);
        }
    }

    #[test]
    fn fixture_set_sizes() {
        let set = fixture_set();
        assert_eq!(set.len(), 10);
        assert_eq!(set[0].len(), 3);
        assert_eq!(set[9].len(), 21);
    }
}
