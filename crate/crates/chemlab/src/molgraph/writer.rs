//! SMILES writer. A permutation of the atoms drives the DFS traversal, so
//! the same graph can be emitted in any atom order; tetrahedral parity
//! markers are recomputed from the emitted neighbor order.

use super::{BondDir, BondOrder, Element, Molecule, NeighborRef, Parity};

/// Emit a grammatically valid SMILES visiting atoms in the DFS order induced
/// by `order` (a permutation of atom indices; earlier entries have priority).
pub fn write_smiles(m: &Molecule, order: &[usize]) -> String {
    assert_eq!(order.len(), m.atoms.len(), "order must be a permutation");
    if m.atoms.is_empty() {
        return String::new();
    }
    let mut pos = vec![usize::MAX; m.atoms.len()];
    for (p, &a) in order.iter().enumerate() {
        assert!(pos[a] == usize::MAX, "order must be a permutation");
        pos[a] = p;
    }
    let mut comps = m.components();
    comps.sort_by_key(|c| c.iter().map(|&a| pos[a]).min().unwrap());
    let parts: Vec<String> = comps
        .iter()
        .map(|c| write_fragment(m, c, &pos))
        .collect();
    parts.join(".")
}

#[derive(Clone, Copy)]
struct RingItem {
    edge: usize,
    partner: usize,
    opens: bool,
}

struct Writer<'a> {
    m: &'a Molecule,
    children: Vec<Vec<usize>>,
    ring_items: Vec<Vec<RingItem>>,
    digit_of_edge: Vec<Option<u16>>,
    digits_in_use: Vec<bool>,
    out: String,
}

fn write_fragment(m: &Molecule, comp: &[usize], pos: &[usize]) -> String {
    let n = m.atoms.len();
    let adj = m.adjacency();
    let start = *comp.iter().min_by_key(|&&a| pos[a]).unwrap();

    // spanning DFS: tree children per atom and ring closures in discovery order
    let mut visited = vec![false; n];
    let mut bond_used = vec![false; m.bonds.len()];
    let mut children = vec![Vec::new(); n];
    let mut ring_items: Vec<Vec<RingItem>> = vec![Vec::new(); n];
    let mut sorted_adj: Vec<Vec<(usize, usize)>> = adj;
    for list in sorted_adj.iter_mut() {
        list.sort_by_key(|&(v, _)| pos[v]);
    }

    fn dfs(
        u: usize,
        sorted_adj: &[Vec<(usize, usize)>],
        visited: &mut [bool],
        bond_used: &mut [bool],
        children: &mut [Vec<usize>],
        ring_items: &mut [Vec<RingItem>],
    ) {
        visited[u] = true;
        for &(v, bi) in &sorted_adj[u] {
            if bond_used[bi] {
                continue;
            }
            bond_used[bi] = true;
            if !visited[v] {
                children[u].push(v);
                dfs(v, sorted_adj, visited, bond_used, children, ring_items);
            } else {
                // v was emitted earlier: the closure opens at v, closes at u
                ring_items[v].push(RingItem {
                    edge: bi,
                    partner: u,
                    opens: true,
                });
                ring_items[u].push(RingItem {
                    edge: bi,
                    partner: v,
                    opens: false,
                });
            }
        }
    }
    dfs(
        start,
        &sorted_adj,
        &mut visited,
        &mut bond_used,
        &mut children,
        &mut ring_items,
    );

    let mut w = Writer {
        m,

        children,
        ring_items,
        digit_of_edge: vec![None; m.bonds.len()],
        digits_in_use: vec![false; 100],
        out: String::new(),
    };
    w.emit(start, None);
    w.out
}

impl<'a> Writer<'a> {
    fn emit(&mut self, u: usize, parent: Option<usize>) {
        self.atom_token(u, parent);
        // ring-closure digits, in discovery order
        for item in self.ring_items[u].clone() {
            if item.opens {
                let b = &self.m.bonds[item.edge];
                self.out
                    .push_str(&bond_symbol(self.m, item.edge, u, item.partner));
                let digit = self.alloc_digit();
                self.digit_of_edge[item.edge] = Some(digit);
                self.push_digit(digit);
                let _ = b;
            } else {
                let digit = self.digit_of_edge[item.edge].expect("ring opened");
                self.push_digit(digit);
                self.digits_in_use[digit as usize] = false;
            }
        }
        let kids = self.children[u].clone();
        for (i, &v) in kids.iter().enumerate() {
            let bi = self
                .m
                .bonds
                .iter()
                .position(|b| (b.a == u && b.b == v) || (b.a == v && b.b == u))
                .expect("tree edge");
            let last = i + 1 == kids.len();
            if !last {
                self.out.push('(');
            }
            self.out.push_str(&bond_symbol(self.m, bi, u, v));
            self.emit(v, Some(u));
            if !last {
                self.out.push(')');
            }
        }
    }

    fn alloc_digit(&mut self) -> u16 {
        for d in 1..100u16 {
            if !self.digits_in_use[d as usize] {
                self.digits_in_use[d as usize] = true;
                return d;
            }
        }
        panic!("more than 99 simultaneously open rings");
    }

    fn push_digit(&mut self, d: u16) {
        if d < 10 {
            self.out.push_str(&d.to_string());
        } else {
            self.out.push('%');
            self.out.push_str(&format!("{d:02}"));
        }
    }

    fn atom_token(&mut self, u: usize, parent: Option<usize>) {
        let a = &self.m.atoms[u];
        let center = self.m.stereocenter_on(u);
        let needs_bracket = a.explicit_h.is_some()
            || a.charge != 0
            || center.is_some()
            || a.element == Element::H;
        let symbol = if a.aromatic {
            a.element.symbol().to_lowercase()
        } else {
            a.element.symbol().to_string()
        };
        if !needs_bracket {
            self.out.push_str(&symbol);
            return;
        }
        self.out.push('[');
        self.out.push_str(&symbol);
        let h = a.explicit_h.map(u32::from).unwrap_or_else(|| self.m.hydrogen_count(u));
        if let Some(c) = center {
            // written neighbor order: parent, implicit H, ring partners, children
            let mut written: Vec<NeighborRef> = Vec::with_capacity(4);
            if let Some(p) = parent {
                written.push(NeighborRef::Atom(p));
            }
            if c.neighbors.contains(&NeighborRef::ImplicitH) {
                written.push(NeighborRef::ImplicitH);
            }
            for item in &self.ring_items[u] {
                written.push(NeighborRef::Atom(item.partner));
            }
            for &v in &self.children[u] {
                written.push(NeighborRef::Atom(v));
            }
            assert_eq!(written.len(), 4, "stereocenter must have 4 neighbors");
            let written: [NeighborRef; 4] = [written[0], written[1], written[2], written[3]];
            let parity = if super::permutation_is_odd(&c.neighbors, &written) {
                c.parity.flipped()
            } else {
                c.parity
            };
            self.out.push_str(match parity {
                Parity::Counterclockwise => "@",
                Parity::Clockwise => "@@",
            });
        }
        match h {
            0 => {}
            1 => self.out.push('H'),
            n => self.out.push_str(&format!("H{n}")),
        }
        match a.charge {
            0 => {}
            1 => self.out.push('+'),
            -1 => self.out.push('-'),
            c if c > 0 => self.out.push_str(&format!("+{c}")),
            c => self.out.push_str(&format!("-{}", -c)),
        }
        self.out.push(']');
    }
}

/// Bond symbol written while traversing `from -> to`.
fn bond_symbol(m: &Molecule, bond_idx: usize, from: usize, to: usize) -> String {
    let b = &m.bonds[bond_idx];
    debug_assert!((b.a == from && b.b == to) || (b.a == to && b.b == from));
    match b.order {
        BondOrder::Double => "=".to_string(),
        BondOrder::Triple => "#".to_string(),
        BondOrder::Aromatic => String::new(),
        BondOrder::Single => {
            if let Some(dir) = b.dir {
                let oriented = if b.a == from { dir } else { dir.flipped() };
                match oriented {
                    BondDir::Up => "/".to_string(),
                    BondDir::Down => "\\".to_string(),
                }
            } else if m.atoms[from].aromatic && m.atoms[to].aromatic {
                "-".to_string()
            } else {
                String::new()
            }
        }
    }
}
