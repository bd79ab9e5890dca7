//! Molecular graph data model plus SMILES parsing, writing, validation,
//! canonicalization, randomization, and structure utilities.
//!
//! All types are immutable after construction; every operation here is a
//! pure function and safe to call concurrently.

mod canon;
mod parser;
mod scaffold;
mod valence;
mod writer;

pub use canon::{canonical_smiles, randomized_smiles};
pub use parser::{parse_smiles, GrammarError};
pub use scaffold::murcko_scaffold;
pub use valence::{allowed_valences, kekulize, validate, validate_molecule, Validity, ValidityReason};
pub use writer::write_smiles;

use std::collections::HashMap;

/// Elements accepted by the corpus filter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Element {
    H,
    B,
    C,
    N,
    O,
    F,
    P,
    S,
    Cl,
    Br,
    I,
}

impl Element {
    pub fn symbol(self) -> &'static str {
        match self {
            Element::H => "H",
            Element::B => "B",
            Element::C => "C",
            Element::N => "N",
            Element::O => "O",
            Element::F => "F",
            Element::P => "P",
            Element::S => "S",
            Element::Cl => "Cl",
            Element::Br => "Br",
            Element::I => "I",
        }
    }

    pub fn from_symbol(s: &str) -> Option<Element> {
        Some(match s {
            "H" => Element::H,
            "B" => Element::B,
            "C" => Element::C,
            "N" => Element::N,
            "O" => Element::O,
            "F" => Element::F,
            "P" => Element::P,
            "S" => Element::S,
            "Cl" => Element::Cl,
            "Br" => Element::Br,
            "I" => Element::I,
            _ => return None,
        })
    }

    /// Only these elements may carry the aromatic flag (lowercase tokens).
    pub fn supports_aromatic(self) -> bool {
        matches!(self, Element::C | Element::N | Element::O | Element::S)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum BondOrder {
    Single,
    Double,
    Triple,
    Aromatic,
}

impl BondOrder {
    /// Integer bond-order contribution when summing valence. Aromatic bonds
    /// count 1 here; the extra aromatic double bond is handled separately.
    pub fn order_sum(self) -> u32 {
        match self {
            BondOrder::Single | BondOrder::Aromatic => 1,
            BondOrder::Double => 2,
            BondOrder::Triple => 3,
        }
    }
}

/// Directional single-bond marker, oriented from `Bond::a` to `Bond::b`.
/// `Up` corresponds to "/" written while traversing a -> b.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BondDir {
    Up,
    Down,
}

impl BondDir {
    pub fn flipped(self) -> BondDir {
        match self {
            BondDir::Up => BondDir::Down,
            BondDir::Down => BondDir::Up,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Bond {
    pub a: usize,
    pub b: usize,
    pub order: BondOrder,
    pub dir: Option<BondDir>,
}

impl Bond {
    pub fn other(&self, atom: usize) -> usize {
        if atom == self.a {
            self.b
        } else {
            self.a
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum NeighborRef {
    Atom(usize),
    ImplicitH,
}

/// Tetrahedral parity relative to the listed neighbor order:
/// looking from the first neighbor, the remaining three appear
/// counterclockwise ("@") or clockwise ("@@").
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Parity {
    Counterclockwise,
    Clockwise,
}

impl Parity {
    pub fn flipped(self) -> Parity {
        match self {
            Parity::Counterclockwise => Parity::Clockwise,
            Parity::Clockwise => Parity::Counterclockwise,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TetrahedralCenter {
    pub atom: usize,
    pub neighbors: [NeighborRef; 4],
    pub parity: Parity,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Atom {
    pub element: Element,
    pub aromatic: bool,
    pub charge: i8,
    pub explicit_h: Option<u8>,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Molecule {
    pub atoms: Vec<Atom>,
    pub bonds: Vec<Bond>,
    pub stereocenters: Vec<TetrahedralCenter>,
}

impl Molecule {
    /// Zero-atom molecule used as the empty-scaffold sentinel.
    pub fn empty() -> Molecule {
        Molecule::default()
    }

    pub fn is_empty(&self) -> bool {
        self.atoms.is_empty()
    }

    pub fn heavy_atom_count(&self) -> usize {
        self.atoms.iter().filter(|a| a.element != Element::H).count()
    }

    /// Adjacency list: per atom, (neighbor index, bond index) pairs in bond order.
    pub fn adjacency(&self) -> Vec<Vec<(usize, usize)>> {
        let mut adj = vec![Vec::new(); self.atoms.len()];
        for (bi, b) in self.bonds.iter().enumerate() {
            adj[b.a].push((b.b, bi));
            adj[b.b].push((b.a, bi));
        }
        adj
    }

    pub fn degree(&self, atom: usize) -> usize {
        self.bonds.iter().filter(|b| b.a == atom || b.b == atom).count()
    }

    /// Hydrogen count of an atom: the bracket-specified count when present,
    /// otherwise the implicit fill up to the smallest allowed valence.
    pub fn hydrogen_count(&self, atom: usize) -> u32 {
        if let Some(h) = self.atoms[atom].explicit_h {
            return h as u32;
        }
        let a = &self.atoms[atom];
        let mut order_sum: u32 = self
            .bonds
            .iter()
            .filter(|b| b.a == atom || b.b == atom)
            .map(|b| b.order.order_sum())
            .sum();
        if a.aromatic {
            // one aromatic double bond shared with the ring system
            order_sum += 1;
        }
        allowed_valences(a.element, a.charge)
            .iter()
            .copied()
            .filter(|&v| v >= order_sum)
            .map(|v| v - order_sum)
            .next()
            .unwrap_or(0)
    }

    pub fn stereocenter_on(&self, atom: usize) -> Option<&TetrahedralCenter> {
        self.stereocenters.iter().find(|c| c.atom == atom)
    }

    /// Connected components as sorted atom-index lists, ordered by smallest index.
    pub fn components(&self) -> Vec<Vec<usize>> {
        let n = self.atoms.len();
        let adj = self.adjacency();
        let mut seen = vec![false; n];
        let mut comps = Vec::new();
        for start in 0..n {
            if seen[start] {
                continue;
            }
            let mut comp = vec![start];
            seen[start] = true;
            let mut stack = vec![start];
            while let Some(u) = stack.pop() {
                for &(v, _) in &adj[u] {
                    if !seen[v] {
                        seen[v] = true;
                        comp.push(v);
                        stack.push(v);
                    }
                }
            }
            comp.sort_unstable();
            comps.push(comp);
        }
        comps
    }

    /// Induced subgraph on `keep` (sorted atom indices), with atoms renumbered.
    /// Stereocenters referencing removed atoms are dropped.
    pub fn subgraph(&self, keep: &[usize]) -> Molecule {
        let mut remap: HashMap<usize, usize> = HashMap::new();
        for (new, &old) in keep.iter().enumerate() {
            remap.insert(old, new);
        }
        let atoms = keep.iter().map(|&i| self.atoms[i].clone()).collect();
        let bonds = self
            .bonds
            .iter()
            .filter(|b| remap.contains_key(&b.a) && remap.contains_key(&b.b))
            .map(|b| Bond {
                a: remap[&b.a],
                b: remap[&b.b],
                order: b.order,
                dir: b.dir,
            })
            .collect();
        let stereocenters = self
            .stereocenters
            .iter()
            .filter(|c| {
                remap.contains_key(&c.atom)
                    && c.neighbors.iter().all(|r| match r {
                        NeighborRef::Atom(i) => remap.contains_key(i),
                        NeighborRef::ImplicitH => true,
                    })
            })
            .map(|c| TetrahedralCenter {
                atom: remap[&c.atom],
                neighbors: {
                    let mut refs = c.neighbors;
                    for r in refs.iter_mut() {
                        if let NeighborRef::Atom(i) = r {
                            *i = remap[i];
                        }
                    }
                    refs
                },
                parity: c.parity,
            })
            .collect();
        Molecule {
            atoms,
            bonds,
            stereocenters,
        }
    }
}

/// Parity (true = odd) of the permutation taking `from` to `to`.
/// Both slices must hold the same 4 distinct references.
pub fn permutation_is_odd(from: &[NeighborRef; 4], to: &[NeighborRef; 4]) -> bool {
    let mut perm = [0usize; 4];
    for (i, r) in from.iter().enumerate() {
        perm[i] = to
            .iter()
            .position(|t| t == r)
            .expect("neighbor sets must match");
    }
    let mut swaps = 0;
    let mut p = perm;
    for i in 0..4 {
        while p[i] != i {
            let j = p[i];
            p.swap(i, j);
            swaps += 1;
        }
    }
    swaps % 2 == 1
}

/// Keep only the connected component with the most heavy atoms; ties broken
/// by canonical-string order.
pub fn strip_fragments(m: &Molecule) -> Molecule {
    let comps = m.components();
    if comps.len() <= 1 {
        return m.clone();
    }
    let mut best: Option<(usize, String, Molecule)> = None;
    for comp in &comps {
        let sub = m.subgraph(comp);
        let heavy = sub.heavy_atom_count();
        let key = canonical_smiles(&sub);
        let better = match &best {
            None => true,
            Some((bh, bk, _)) => heavy > *bh || (heavy == *bh && key < *bk),
        };
        if better {
            best = Some((heavy, key, sub));
        }
    }
    best.expect("non-empty molecule").2
}

/// Corpus filter: 3..=50 heavy atoms. Element membership is guaranteed by
/// the parser, which rejects anything outside the allowed set.
pub fn passes_corpus_filter(m: &Molecule) -> bool {
    let h = m.heavy_atom_count();
    (3..=50).contains(&h)
}

/// Graph isomorphism respecting element, charge, aromaticity, hydrogen
/// count, bond order, and tetrahedral parity. Test oracle: independent of
/// the canonicalization path.
pub fn stereo_isomorphic(a: &Molecule, b: &Molecule) -> bool {
    if a.atoms.len() != b.atoms.len()
        || a.bonds.len() != b.bonds.len()
        || a.stereocenters.len() != b.stereocenters.len()
    {
        return false;
    }
    let n = a.atoms.len();
    if n == 0 {
        return true;
    }
    let la = wl_labels(a);
    let lb = wl_labels(b);
    {
        let mut sa = la.clone();
        let mut sb = lb.clone();
        sa.sort_unstable();
        sb.sort_unstable();
        if sa != sb {
            return false;
        }
    }
    let adj_a = a.adjacency();
    let adj_b = b.adjacency();
    let mut mapping = vec![usize::MAX; n];
    let mut used = vec![false; n];
    // match by increasing rarity of label to prune early
    let mut order: Vec<usize> = (0..n).collect();
    let mut freq: HashMap<u64, usize> = HashMap::new();
    for &l in &la {
        *freq.entry(l).or_insert(0) += 1;
    }
    order.sort_by_key(|&i| (freq[&la[i]], i));

    fn backtrack(
        pos: usize,
        order: &[usize],
        a: &Molecule,
        b: &Molecule,
        adj_a: &[Vec<(usize, usize)>],
        adj_b: &[Vec<(usize, usize)>],
        la: &[u64],
        lb: &[u64],
        mapping: &mut [usize],
        used: &mut [bool],
    ) -> bool {
        if pos == order.len() {
            return stereo_consistent(a, b, mapping);
        }
        let u = order[pos];
        'cand: for v in 0..b.atoms.len() {
            if used[v] || la[u] != lb[v] {
                continue;
            }
            // adjacency consistency with already-mapped atoms
            for &(w, bi) in &adj_a[u] {
                if mapping[w] != usize::MAX {
                    let ok = adj_b[v].iter().any(|&(x, bj)| {
                        x == mapping[w] && b.bonds[bj].order == a.bonds[bi].order
                    });
                    if !ok {
                        continue 'cand;
                    }
                }
            }
            mapping[u] = v;
            used[v] = true;
            if backtrack(pos + 1, order, a, b, adj_a, adj_b, la, lb, mapping, used) {
                return true;
            }
            mapping[u] = usize::MAX;
            used[v] = false;
        }
        false
    }

    backtrack(
        0, &order, a, b, &adj_a, &adj_b, &la, &lb, &mut mapping, &mut used,
    )
}

fn stereo_consistent(a: &Molecule, b: &Molecule, mapping: &[usize]) -> bool {
    for ca in &a.stereocenters {
        let Some(cb) = b.stereocenter_on(mapping[ca.atom]) else {
            return false;
        };
        let mut mapped = ca.neighbors;
        for r in mapped.iter_mut() {
            if let NeighborRef::Atom(i) = r {
                *i = mapping[*i];
            }
        }
        // neighbor sets must agree as sets
        let mut set_a: Vec<NeighborRef> = mapped.to_vec();
        let mut set_b: Vec<NeighborRef> = cb.neighbors.to_vec();
        let key = |r: &NeighborRef| match r {
            NeighborRef::Atom(i) => *i as isize,
            NeighborRef::ImplicitH => -1,
        };
        set_a.sort_by_key(key);
        set_b.sort_by_key(key);
        if set_a != set_b {
            return false;
        }
        let odd = permutation_is_odd(&mapped, &cb.neighbors);
        let expected = if odd { ca.parity.flipped() } else { ca.parity };
        if expected != cb.parity {
            return false;
        }
    }
    true
}

/// Iterated neighborhood labels, comparable across molecules.
fn wl_labels(m: &Molecule) -> Vec<u64> {
    let n = m.atoms.len();
    let adj = m.adjacency();
    let mut labels: Vec<u64> = (0..n)
        .map(|i| {
            let a = &m.atoms[i];
            fnv_hash(&[
                a.element as u64,
                a.aromatic as u64,
                (a.charge as i64 + 16) as u64,
                m.hydrogen_count(i) as u64,
                adj[i].len() as u64,
                m.stereocenter_on(i).is_some() as u64,
            ])
        })
        .collect();
    for _ in 0..n.max(1) {
        let mut next = Vec::with_capacity(n);
        for i in 0..n {
            let mut nbrs: Vec<u64> = adj[i]
                .iter()
                .map(|&(j, bi)| fnv_hash(&[m.bonds[bi].order as u64, labels[j]]))
                .collect();
            nbrs.sort_unstable();
            let mut words = vec![labels[i]];
            words.extend(nbrs);
            next.push(fnv_hash(&words));
        }
        if next == labels {
            break;
        }
        labels = next;
    }
    labels
}

/// 64-bit FNV-1a over a word sequence; deterministic across platforms.
pub(crate) fn fnv_hash(words: &[u64]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &w in words {
        for byte in w.to_le_bytes() {
            h ^= byte as u64;
            h = h.wrapping_mul(0x100000001b3);
        }
    }
    h
}
