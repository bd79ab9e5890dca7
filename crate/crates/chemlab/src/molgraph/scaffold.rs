//! Ring-and-linker scaffold: iteratively prune degree <= 1 heavy atoms.
//! Acyclic molecules reduce to the empty scaffold sentinel.

use super::Molecule;

pub fn murcko_scaffold(m: &Molecule) -> Molecule {
    let mut current = m.clone();
    loop {
        let leaves: Vec<usize> = (0..current.atoms.len())
            .filter(|&i| current.degree(i) <= 1)
            .collect();
        if leaves.is_empty() {
            return current;
        }
        let retained: Vec<usize> = (0..current.atoms.len())
            .filter(|i| !leaves.contains(i))
            .collect();
        if retained.is_empty() {
            return Molecule::empty();
        }
        current = current.subgraph(&retained);
    }
}
