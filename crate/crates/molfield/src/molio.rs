//! Molecule ingestion: element vocabulary, conformers, XYZ text files,
//! and basic geometry (centroid, bounding radius).
//!
//! Alpha-carbon traces reuse the same machinery: an XYZ file whose atoms
//! are all labeled `C`, used with a single-channel vocabulary.

use crate::error::{Error, Result};
use crate::geom::{self, Vec3};

/// Default margin added around the farthest atom when computing the
/// bounding-sphere radius, leaving room for filler-channel geometry.
pub const DEFAULT_MARGIN: f64 = 2.0;

/// The supported element set, in fixed vocabulary order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Element {
    C,
    H,
    O,
    N,
    F,
    S,
    Cl,
    Br,
}

impl Element {
    pub const ALL: [Element; 8] = [
        Element::C,
        Element::H,
        Element::O,
        Element::N,
        Element::F,
        Element::S,
        Element::Cl,
        Element::Br,
    ];

    pub fn symbol(self) -> &'static str {
        match self {
            Element::C => "C",
            Element::H => "H",
            Element::O => "O",
            Element::N => "N",
            Element::F => "F",
            Element::S => "S",
            Element::Cl => "Cl",
            Element::Br => "Br",
        }
    }

    /// Case-sensitive symbol lookup.
    pub fn from_symbol(s: &str) -> Option<Element> {
        Element::ALL.iter().copied().find(|e| e.symbol() == s)
    }

    /// True for everything except hydrogen.
    pub fn is_heavy(self) -> bool {
        self != Element::H
    }
}

impl std::fmt::Display for Element {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.symbol())
    }
}

impl serde::Serialize for Element {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        serializer.serialize_str(self.symbol())
    }
}

impl<'de> serde::Deserialize<'de> for Element {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        Element::from_symbol(&s)
            .ok_or_else(|| serde::de::Error::custom(format!("unknown element symbol {s:?}")))
    }
}

/// Ordered set of atom types; channel `k` of every field corresponds to
/// `elements()[k]`.
#[derive(Clone, Debug, PartialEq, Eq, serde::Serialize)]
#[serde(transparent)]
pub struct AtomTypeVocab {
    elements: Vec<Element>,
}

impl<'de> serde::Deserialize<'de> for AtomTypeVocab {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let elements = Vec::<Element>::deserialize(deserializer)?;
        AtomTypeVocab::new(elements).map_err(serde::de::Error::custom)
    }
}

impl AtomTypeVocab {
    pub fn new(elements: Vec<Element>) -> Result<Self> {
        if elements.is_empty() {
            return Err(Error::Config("vocabulary must contain at least one element".into()));
        }
        for (i, e) in elements.iter().enumerate() {
            if elements[..i].contains(e) {
                return Err(Error::Config(format!("duplicate element {e} in vocabulary")));
            }
        }
        Ok(Self { elements })
    }

    /// All eight supported elements in fixed order.
    pub fn full() -> Self {
        Self { elements: Element::ALL.to_vec() }
    }

    /// Single-channel carbon vocabulary for alpha-carbon traces.
    pub fn ca_trace() -> Self {
        Self { elements: vec![Element::C] }
    }

    pub fn from_symbols<S: AsRef<str>>(symbols: &[S]) -> Result<Self> {
        let mut elements = Vec::with_capacity(symbols.len());
        for s in symbols {
            let sym = s.as_ref();
            let e = Element::from_symbol(sym)
                .ok_or_else(|| Error::Config(format!("unknown element symbol {sym:?} in vocabulary")))?;
            elements.push(e);
        }
        Self::new(elements)
    }

    /// Channel count K.
    pub fn k(&self) -> usize {
        self.elements.len()
    }

    pub fn elements(&self) -> &[Element] {
        &self.elements
    }

    /// Position of `element` in the vocabulary, if present.
    pub fn index_of(&self, element: Element) -> Option<usize> {
        self.elements.iter().position(|&e| e == element)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Atom {
    pub element: Element,
    pub position: Vec3,
}

/// A molecule as an ordered list of atoms with 3D coordinates in Angstrom.
#[derive(Clone, Debug, PartialEq)]
pub struct Conformer {
    atoms: Vec<Atom>,
    name: String,
}

impl Conformer {
    /// Validates: at least one atom, finite coordinates, and no two atoms
    /// at identical coordinates.
    pub fn new(atoms: Vec<Atom>, name: impl Into<String>) -> Result<Self> {
        if atoms.is_empty() {
            return Err(Error::InvalidMolecule("conformer has no atoms".into()));
        }
        for (i, a) in atoms.iter().enumerate() {
            if !geom::all_finite(a.position) {
                return Err(Error::InvalidMolecule(format!("atom {i} has non-finite coordinates")));
            }
            for (j, b) in atoms[..i].iter().enumerate() {
                if a.position == b.position {
                    return Err(Error::InvalidMolecule(format!(
                        "atoms {j} and {i} share identical coordinates"
                    )));
                }
            }
        }
        Ok(Self { atoms, name: name.into() })
    }

    pub fn atoms(&self) -> &[Atom] {
        &self.atoms
    }

    pub fn len(&self) -> usize {
        self.atoms.len()
    }

    pub fn is_empty(&self) -> bool {
        false // a valid conformer always has at least one atom
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    /// Unweighted mean of atom positions.
    pub fn centroid(&self) -> Vec3 {
        let mut c = [0.0; 3];
        for a in &self.atoms {
            c = geom::add(c, a.position);
        }
        geom::scale(c, 1.0 / self.atoms.len() as f64)
    }

    /// Max distance from the centroid to any atom, plus `margin`.
    pub fn bounding_radius(&self, margin: f64) -> f64 {
        assert!(margin >= 0.0, "margin must be nonnegative");
        let c = self.centroid();
        let max = self
            .atoms
            .iter()
            .map(|a| geom::dist(a.position, c))
            .fold(0.0_f64, f64::max);
        max + margin
    }

    pub fn translated(&self, v: Vec3) -> Conformer {
        let atoms = self
            .atoms
            .iter()
            .map(|a| Atom { element: a.element, position: geom::add(a.position, v) })
            .collect();
        Conformer { atoms, name: self.name.clone() }
    }

    /// Atoms of one element, with their original indices.
    pub fn atoms_of(&self, element: Element) -> impl Iterator<Item = (usize, Vec3)> + '_ {
        self.atoms
            .iter()
            .enumerate()
            .filter(move |(_, a)| a.element == element)
            .map(|(i, a)| (i, a.position))
    }

    /// Keep only the atoms at the given indices (order preserved).
    /// Returns `None` when the selection is empty.
    pub fn subset(&self, keep: &[usize]) -> Option<Conformer> {
        let atoms: Vec<Atom> = self
            .atoms
            .iter()
            .enumerate()
            .filter(|(i, _)| keep.contains(i))
            .map(|(_, a)| *a)
            .collect();
        if atoms.is_empty() {
            None
        } else {
            Some(Conformer { atoms, name: format!("{}-subset", self.name) })
        }
    }
}

/// Parse XYZ text: line 1 atom count, line 2 comment, then
/// `Symbol x y z` rows. Accepts LF or CRLF. Symbols are case-sensitive.
pub fn parse_xyz(text: &str) -> Result<Conformer> {
    let mut lines = text.lines().enumerate();

    let (count_lineno, count_line) = lines
        .next()
        .ok_or_else(|| Error::Parse { line: 1, msg: "empty file".into() })?;
    let declared: usize = count_line.trim().parse().map_err(|_| Error::Parse {
        line: count_lineno + 1,
        msg: format!("expected atom count, found {:?}", count_line.trim()),
    })?;
    if declared == 0 {
        return Err(Error::Parse { line: 1, msg: "declared atom count is zero".into() });
    }

    let comment = lines
        .next()
        .map(|(_, l)| l.trim().to_string())
        .ok_or_else(|| Error::Parse { line: 2, msg: "missing comment line".into() })?;

    let mut atoms = Vec::with_capacity(declared);
    for (lineno, line) in lines {
        let line_1 = lineno + 1;
        if line.trim().is_empty() {
            continue;
        }
        if atoms.len() == declared {
            return Err(Error::Parse {
                line: line_1,
                msg: format!("more atom rows than the declared count {declared}"),
            });
        }
        let mut fields = line.split_whitespace();
        let symbol = fields.next().ok_or_else(|| Error::Parse {
            line: line_1,
            msg: "missing element symbol".into(),
        })?;
        let element = Element::from_symbol(symbol).ok_or_else(|| Error::UnknownElement {
            line: line_1,
            symbol: symbol.to_string(),
        })?;
        let mut coord = [0.0_f64; 3];
        for (axis, slot) in coord.iter_mut().enumerate() {
            let raw = fields.next().ok_or_else(|| Error::Parse {
                line: line_1,
                msg: format!("missing coordinate {}", ["x", "y", "z"][axis]),
            })?;
            *slot = raw.parse().map_err(|_| Error::Parse {
                line: line_1,
                msg: format!("non-numeric coordinate {raw:?}"),
            })?;
            if !slot.is_finite() {
                return Err(Error::Parse {
                    line: line_1,
                    msg: format!("non-finite coordinate {raw:?}"),
                });
            }
        }
        atoms.push(Atom { element, position: coord });
    }

    if atoms.len() != declared {
        return Err(Error::Parse {
            line: 1,
            msg: format!("declared {declared} atoms but found {}", atoms.len()),
        });
    }
    Conformer::new(atoms, comment)
}

/// Emit XYZ text with coordinates at fixed 6-decimal precision.
pub fn write_xyz(conformer: &Conformer) -> String {
    let mut out = String::new();
    out.push_str(&conformer.len().to_string());
    out.push('\n');
    // Comment must stay a single line for the round trip to hold.
    let name: String = conformer
        .name()
        .chars()
        .map(|c| if c == '\n' || c == '\r' { ' ' } else { c })
        .collect();
    out.push_str(&name);
    out.push('\n');
    for a in conformer.atoms() {
        out.push_str(&format!(
            "{} {:.6} {:.6} {:.6}\n",
            a.element.symbol(),
            a.position[0],
            a.position[1],
            a.position[2]
        ));
    }
    out
}
