//! Canonical atom ranking by iterative refinement of local invariants,
//! with remaining ties broken by exhaustive branch-and-compare on the
//! emitted string. Deterministic and independent of input atom numbering;
//! bit-compatibility with any external toolkit is not a goal.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{write_smiles, Molecule};

/// Deterministic canonical SMILES: equal for all atom numberings of the same
/// stereo-molecule, distinct for distinct molecules (including enantiomers).
pub fn canonical_smiles(m: &Molecule) -> String {
    if m.is_empty() {
        return String::new();
    }
    let comps = m.components();
    if comps.len() == 1 {
        return canonical_fragment(m);
    }
    let mut parts: Vec<String> = comps
        .iter()
        .map(|c| canonical_fragment(&m.subgraph(c)))
        .collect();
    parts.sort();
    parts.join(".")
}

/// SMILES from a seeded uniformly random atom permutation. Parses back to a
/// graph stereo-isomorphic to the input.
pub fn randomized_smiles(m: &Molecule, seed: u64) -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..m.atoms.len()).collect();
    order.shuffle(&mut rng);
    write_smiles(m, &order)
}

fn canonical_fragment(m: &Molecule) -> String {
    let ranks = refine(m, initial_ranks(m));
    search(m, ranks)
}

/// Dense ranks of the initial per-atom invariant.
fn initial_ranks(m: &Molecule) -> Vec<usize> {
    let keys: Vec<(u8, bool, i8, usize, u32, bool)> = (0..m.atoms.len())
        .map(|i| {
            let a = &m.atoms[i];
            (
                a.element as u8,
                a.aromatic,
                a.charge,
                m.degree(i),
                m.hydrogen_count(i),
                m.stereocenter_on(i).is_some(),
            )
        })
        .collect();
    dense_ranks(&keys)
}

/// Refine ranks to a fixpoint: each round re-ranks atoms by
/// (current rank, sorted multiset of (bond order, neighbor rank)).
fn refine(m: &Molecule, mut ranks: Vec<usize>) -> Vec<usize> {
    let adj = m.adjacency();
    let mut classes = class_count(&ranks);
    loop {
        let keys: Vec<(usize, Vec<(u8, usize)>)> = (0..m.atoms.len())
            .map(|i| {
                let mut nbrs: Vec<(u8, usize)> = adj[i]
                    .iter()
                    .map(|&(j, bi)| (m.bonds[bi].order as u8, ranks[j]))
                    .collect();
                nbrs.sort_unstable();
                (ranks[i], nbrs)
            })
            .collect();
        let next = dense_ranks(&keys);
        let next_classes = class_count(&next);
        if next_classes == classes {
            return next;
        }
        classes = next_classes;
        ranks = next;
    }
}

fn class_count(ranks: &[usize]) -> usize {
    let mut sorted = ranks.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    sorted.len()
}

fn dense_ranks<K: Ord + Clone>(keys: &[K]) -> Vec<usize> {
    let mut sorted: Vec<K> = keys.to_vec();
    sorted.sort();
    sorted.dedup();
    keys.iter()
        .map(|k| sorted.binary_search(k).unwrap())
        .collect()
}

/// Branch on the smallest still-tied class, trying every member; keep the
/// lexicographically smallest emitted string.
fn search(m: &Molecule, ranks: Vec<usize>) -> String {
    let n = m.atoms.len();
    if class_count(&ranks) == n {
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by_key(|&i| ranks[i]);
        return write_smiles(m, &order);
    }
    // smallest tied rank value
    let mut counts = vec![0usize; n];
    for &r in &ranks {
        counts[r] += 1;
    }
    let tied_rank = (0..n).find(|&r| counts[r] > 1).expect("a tie exists");
    let members: Vec<usize> = (0..n).filter(|&i| ranks[i] == tied_rank).collect();
    let mut best: Option<String> = None;
    for &a in &members {
        // give `a` priority within its class, then re-refine
        let bumped: Vec<usize> = (0..n)
            .map(|i| ranks[i] * 2 + usize::from(i != a))
            .collect();
        let candidate = search(m, refine(m, dense_ranks(&bumped)));
        if best.as_ref().map_or(true, |b| candidate < *b) {
            best = Some(candidate);
        }
    }
    best.expect("tied class is non-empty")
}
