//! Seeded random generator of valid molecules. The test corpus is built in
//! the sandbox, so training and acceptance runs draw from this generator
//! instead of an external file. Everything is driven by a ChaCha8 stream:
//! the same seed always produces the same molecules.

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use crate::molgraph::{
    canonical_smiles, parse_smiles, validate_molecule, Atom, Bond, BondOrder, Element, Molecule,
    NeighborRef, Parity, TetrahedralCenter,
};

#[derive(Debug, Clone, Copy)]
pub struct SynthConfig {
    pub min_heavy: usize,
    pub max_heavy: usize,
    /// Probability that a molecule is grown around a benzene-like core.
    pub aromatic_prob: f64,
    /// Probability of attempting an aliphatic ring closure.
    pub ring_prob: f64,
    /// Probability of promoting an eligible single bond to a double bond.
    pub double_bond_prob: f64,
    /// Probability that an eligible carbon becomes a tetrahedral center.
    pub chiral_prob: f64,
}

impl Default for SynthConfig {
    fn default() -> SynthConfig {
        SynthConfig {
            min_heavy: 3,
            max_heavy: 20,
            aromatic_prob: 0.4,
            ring_prob: 0.3,
            double_bond_prob: 0.15,
            chiral_prob: 0.5,
        }
    }
}

/// Heteroatom palette for tree growth, weighted toward carbon.
const GROWTH_ELEMENTS: [(Element, u32); 6] = [
    (Element::C, 70),
    (Element::N, 10),
    (Element::O, 10),
    (Element::F, 4),
    (Element::S, 3),
    (Element::Cl, 3),
];

fn pick_element(rng: &mut ChaCha8Rng) -> Element {
    let total: u32 = GROWTH_ELEMENTS.iter().map(|&(_, w)| w).sum();
    let mut roll = rng.gen_range(0..total);
    for &(e, w) in &GROWTH_ELEMENTS {
        if roll < w {
            return e;
        }
        roll -= w;
    }
    unreachable!()
}

fn max_degree(e: Element) -> usize {
    match e {
        Element::C => 4,
        Element::N | Element::B | Element::P => 3,
        Element::O | Element::S => 2,
        _ => 1,
    }
}

fn plain_atom(element: Element, aromatic: bool) -> Atom {
    Atom {
        element,
        aromatic,
        charge: 0,
        explicit_h: None,
    }
}

/// Generate one molecule. Retries internally until the result parses and
/// validates, so the output is always corpus-grade.
pub fn random_molecule(cfg: &SynthConfig, seed: u64) -> Molecule {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    loop {
        let m = grow(cfg, &mut rng);
        if m.heavy_atom_count() < cfg.min_heavy || m.heavy_atom_count() > cfg.max_heavy {
            continue;
        }
        if !validate_molecule(&m).is_valid() {
            continue;
        }
        // round-trip through the writer to confirm the full pipeline agrees
        let smi = canonical_smiles(&m);
        match parse_smiles(&smi) {
            Ok(back) if validate_molecule(&back).is_valid() => return back,
            _ => continue,
        }
    }
}

/// Canonical SMILES strings for `count` distinct molecules.
pub fn random_corpus(cfg: &SynthConfig, count: usize, seed: u64) -> Vec<String> {
    let mut out = Vec::with_capacity(count);
    let mut seen = std::collections::HashSet::new();
    let mut sub = 0u64;
    while out.len() < count {
        let m = random_molecule(cfg, seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ sub);
        sub += 1;
        let smi = canonical_smiles(&m);
        if seen.insert(smi.clone()) {
            out.push(smi);
        }
    }
    out
}

fn grow(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Molecule {
    let mut m = Molecule::empty();
    let target = rng.gen_range(cfg.min_heavy..=cfg.max_heavy);

    if target >= 6 && rng.gen_bool(cfg.aromatic_prob) {
        aromatic_core(&mut m, rng);
    } else {
        m.atoms.push(plain_atom(pick_element(rng), false));
    }

    // tree growth from random open atoms
    while m.atoms.len() < target {
        let open: Vec<usize> = (0..m.atoms.len())
            .filter(|&i| m.degree(i) < max_degree(m.atoms[i].element))
            .collect();
        let Some(&at) = open.choose(rng) else { break };
        let e = pick_element(rng);
        let idx = m.atoms.len();
        m.atoms.push(plain_atom(e, false));
        m.bonds.push(Bond {
            a: at,
            b: idx,
            order: BondOrder::Single,
            dir: None,
        });
    }

    if rng.gen_bool(cfg.ring_prob) {
        aliphatic_ring_closure(&mut m, rng);
    }
    promote_double_bonds(&mut m, cfg, rng);
    assign_stereo(&mut m, cfg, rng);
    m
}

/// Six-membered aromatic ring; occasionally pyridine-like.
fn aromatic_core(m: &mut Molecule, rng: &mut ChaCha8Rng) {
    let base = m.atoms.len();
    let n_pos: Option<usize> = rng.gen_bool(0.3).then(|| rng.gen_range(0..6));
    for i in 0..6 {
        let element = if n_pos == Some(i) {
            Element::N
        } else {
            Element::C
        };
        m.atoms.push(plain_atom(element, true));
    }
    for i in 0..6 {
        m.bonds.push(Bond {
            a: base + i,
            b: base + (i + 1) % 6,
            order: BondOrder::Aromatic,
            dir: None,
        });
    }
}

/// Close one extra single bond between non-adjacent open aliphatic atoms at
/// graph distance 3..=6, forming a 4- to 7-membered ring.
fn aliphatic_ring_closure(m: &mut Molecule, rng: &mut ChaCha8Rng) {
    let adj = m.adjacency();
    let n = m.atoms.len();
    let open: Vec<usize> = (0..n)
        .filter(|&i| !m.atoms[i].aromatic && m.degree(i) < max_degree(m.atoms[i].element))
        .collect();
    let mut candidates = Vec::new();
    for &a in &open {
        // BFS distances from a
        let mut dist = vec![usize::MAX; n];
        dist[a] = 0;
        let mut queue = std::collections::VecDeque::from([a]);
        while let Some(u) = queue.pop_front() {
            for &(v, _) in &adj[u] {
                if dist[v] == usize::MAX {
                    dist[v] = dist[u] + 1;
                    queue.push_back(v);
                }
            }
        }
        for &b in &open {
            if b > a && (3..=6).contains(&dist[b]) {
                candidates.push((a, b));
            }
        }
    }
    if let Some(&(a, b)) = candidates.choose(rng) {
        m.bonds.push(Bond {
            a,
            b,
            order: BondOrder::Single,
            dir: None,
        });
    }
}

/// Turn some single bonds between under-saturated C/N atoms into doubles.
fn promote_double_bonds(m: &mut Molecule, cfg: &SynthConfig, rng: &mut ChaCha8Rng) {
    for bi in 0..m.bonds.len() {
        let (a, b) = (m.bonds[bi].a, m.bonds[bi].b);
        if m.bonds[bi].order != BondOrder::Single || !rng.gen_bool(cfg.double_bond_prob) {
            continue;
        }
        let ok = |i: usize| {
            let at = &m.atoms[i];
            !at.aromatic
                && matches!(at.element, Element::C | Element::N | Element::O)
                && m.hydrogen_count(i) >= 1
        };
        if ok(a) && ok(b) {
            m.bonds[bi].order = BondOrder::Double;
        }
    }
}

/// Mark eligible carbons as tetrahedral centers with a random parity. A
/// carbon qualifies when all of its single bonds plus at most one implicit
/// hydrogen give exactly four distinct substituents.
fn assign_stereo(m: &mut Molecule, cfg: &SynthConfig, rng: &mut ChaCha8Rng) {
    let adj = m.adjacency();
    for i in 0..m.atoms.len() {
        let at = &m.atoms[i];
        if at.element != Element::C || at.aromatic {
            continue;
        }
        if adj[i].iter().any(|&(_, bi)| m.bonds[bi].order != BondOrder::Single) {
            continue;
        }
        let deg = adj[i].len();
        let h = m.hydrogen_count(i);
        let four = match (deg, h) {
            (4, 0) => true,
            (3, 1) => true,
            _ => false,
        };
        if !four || !rng.gen_bool(cfg.chiral_prob) {
            continue;
        }
        let mut neighbors: Vec<NeighborRef> =
            adj[i].iter().map(|&(j, _)| NeighborRef::Atom(j)).collect();
        if deg == 3 {
            neighbors.insert(1, NeighborRef::ImplicitH);
        }
        let parity = if rng.gen_bool(0.5) {
            Parity::Counterclockwise
        } else {
            Parity::Clockwise
        };
        m.stereocenters.push(TetrahedralCenter {
            atom: i,
            neighbors: [neighbors[0], neighbors[1], neighbors[2], neighbors[3]],
            parity,
        });
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::molgraph::validate;

    #[test]
    fn generated_molecules_are_valid() {
        let cfg = SynthConfig::default();
        for seed in 0..50 {
            let m = random_molecule(&cfg, seed);
            assert!(validate_molecule(&m).is_valid());
            let smi = canonical_smiles(&m);
            assert!(validate(&smi).is_valid(), "invalid SMILES: {smi}");
        }
    }

    #[test]
    fn deterministic_per_seed() {
        let cfg = SynthConfig::default();
        for seed in [0, 7, 99] {
            let a = canonical_smiles(&random_molecule(&cfg, seed));
            let b = canonical_smiles(&random_molecule(&cfg, seed));
            assert_eq!(a, b);
        }
    }

    #[test]
    fn corpus_is_distinct_and_sized() {
        let cfg = SynthConfig::default();
        let corpus = random_corpus(&cfg, 100, 42);
        assert_eq!(corpus.len(), 100);
        let set: std::collections::HashSet<_> = corpus.iter().collect();
        assert_eq!(set.len(), 100);
    }

    #[test]
    fn corpus_contains_chirality_and_aromatics() {
        let cfg = SynthConfig::default();
        let corpus = random_corpus(&cfg, 200, 7);
        let chiral = corpus.iter().filter(|s| s.contains('@')).count();
        let aromatic = corpus.iter().filter(|s| s.contains('c')).count();
        assert!(chiral > 10, "only {chiral} chiral molecules in 200");
        assert!(aromatic > 10, "only {aromatic} aromatic molecules in 200");
    }

    #[test]
    fn heavy_atom_bounds_respected() {
        let cfg = SynthConfig {
            min_heavy: 5,
            max_heavy: 9,
            ..SynthConfig::default()
        };
        for seed in 0..30 {
            let m = random_molecule(&cfg, seed);
            assert!((5..=9).contains(&m.heavy_atom_count()));
        }
    }
}
