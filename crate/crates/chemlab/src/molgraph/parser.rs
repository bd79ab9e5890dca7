//! SMILES parser: ring closures, branches, bracket atoms, charges, bond
//! orders, aromatic atoms, tetrahedral parity, and directional bond markers.
//! Grammar errors are reported with a byte offset, never silently fixed.

use std::collections::HashMap;

use thiserror::Error;

use super::{Atom, Bond, BondDir, BondOrder, Element, Molecule, NeighborRef, Parity, TetrahedralCenter};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("SMILES grammar error at byte {offset}: {message}")]
pub struct GrammarError {
    pub offset: usize,
    pub message: String,
}

fn err<T>(offset: usize, message: impl Into<String>) -> Result<T, GrammarError> {
    Err(GrammarError {
        offset,
        message: message.into(),
    })
}

/// Neighbor-order slot of an atom, in SMILES reading order. Ring openings
/// reserve their position until the closing digit supplies the partner.
#[derive(Debug, Clone, Copy)]
enum Slot {
    Filled(NeighborRef),
    PendingRing(u16),
}

#[derive(Debug, Clone, Copy)]
struct PendingBond {
    order: Option<BondOrder>,
    dir: Option<BondDir>,
    offset: usize,
}

struct Parser<'a> {
    bytes: &'a [u8],
    pos: usize,
    atoms: Vec<Atom>,
    bonds: Vec<Bond>,
    // per-atom neighbor order and chiral marker
    slots: Vec<Vec<Slot>>,
    chiral: Vec<Option<Parity>>,
    prev: Option<usize>,
    stack: Vec<Option<usize>>,
    pending: Option<PendingBond>,
    ring_open: HashMap<u16, (usize, Option<PendingBond>, usize)>,
    after_dot: bool,
}

pub fn parse_smiles(s: &str) -> Result<Molecule, GrammarError> {
    if s.is_empty() {
        return err(0, "empty SMILES");
    }
    let mut p = Parser {
        bytes: s.as_bytes(),
        pos: 0,
        atoms: Vec::new(),
        bonds: Vec::new(),
        slots: Vec::new(),
        chiral: Vec::new(),
        prev: None,
        stack: Vec::new(),
        pending: None,
        ring_open: HashMap::new(),
        after_dot: false,
    };
    p.run()?;
    p.finish()
}

impl<'a> Parser<'a> {
    fn peek(&self) -> Option<u8> {
        self.bytes.get(self.pos).copied()
    }

    fn run(&mut self) -> Result<(), GrammarError> {
        while let Some(c) = self.peek() {
            match c {
                b'(' => {
                    if self.prev.is_none() {
                        return err(self.pos, "branch before any atom");
                    }
                    if self.pending.is_some() {
                        return err(self.pos, "bond symbol before '('");
                    }
                    self.stack.push(self.prev);
                    self.pos += 1;
                }
                b')' => {
                    if self.pending.is_some() {
                        return err(self.pos, "dangling bond before ')'");
                    }
                    match self.stack.pop() {
                        Some(p) => self.prev = p,
                        None => return err(self.pos, "unmatched ')'"),
                    }
                    self.pos += 1;
                }
                b'-' | b'=' | b'#' | b'/' | b'\\' | b':' => {
                    if self.pending.is_some() {
                        return err(self.pos, "two consecutive bond symbols");
                    }
                    let (order, dir) = match c {
                        b'-' => (Some(BondOrder::Single), None),
                        b'=' => (Some(BondOrder::Double), None),
                        b'#' => (Some(BondOrder::Triple), None),
                        b':' => (Some(BondOrder::Aromatic), None),
                        b'/' => (Some(BondOrder::Single), Some(BondDir::Up)),
                        b'\\' => (Some(BondOrder::Single), Some(BondDir::Down)),
                        _ => unreachable!(),
                    };
                    self.pending = Some(PendingBond {
                        order,
                        dir,
                        offset: self.pos,
                    });
                    self.pos += 1;
                }
                b'.' => {
                    if self.pending.is_some() {
                        return err(self.pos, "bond symbol before '.'");
                    }
                    if self.prev.is_none() {
                        return err(self.pos, "'.' before any atom");
                    }
                    self.after_dot = true;
                    self.prev = None;
                    self.pos += 1;
                }
                b'1'..=b'9' => {
                    let digit = (c - b'0') as u16;
                    self.pos += 1;
                    self.ring_bond(digit)?;
                }
                b'%' => {
                    let start = self.pos;
                    self.pos += 1;
                    let d1 = self.peek();
                    let d2 = self.bytes.get(self.pos + 1).copied();
                    match (d1, d2) {
                        (Some(a), Some(b)) if a.is_ascii_digit() && b.is_ascii_digit() => {
                            let digit = ((a - b'0') as u16) * 10 + (b - b'0') as u16;
                            self.pos += 2;
                            self.ring_bond(digit)?;
                        }
                        _ => return err(start, "'%' needs two digits"),
                    }
                }
                b'[' => self.bracket_atom()?,
                _ => self.organic_atom()?,
            }
        }
        Ok(())
    }

    fn ring_bond(&mut self, digit: u16) -> Result<(), GrammarError> {
        let here = match self.prev {
            Some(a) => a,
            None => return err(self.pos, "ring closure digit before any atom"),
        };
        let pending = self.pending.take();
        if let Some((other, open_bond, slot_idx)) = self.ring_open.remove(&digit) {
            if other == here {
                return err(self.pos, "ring closure to the same atom");
            }
            if self
                .bonds
                .iter()
                .any(|b| (b.a == other && b.b == here) || (b.a == here && b.b == other))
            {
                return err(self.pos, "duplicate ring bond");
            }
            let order = match (open_bond.and_then(|p| p.order), pending.and_then(|p| p.order)) {
                (Some(a), Some(b)) if a != b => {
                    return err(self.pos, "conflicting ring-bond orders")
                }
                (Some(a), _) => Some(a),
                (None, b) => b,
            };
            let order = order.unwrap_or_else(|| {
                if self.atoms[other].aromatic && self.atoms[here].aromatic {
                    BondOrder::Aromatic
                } else {
                    BondOrder::Single
                }
            });
            // direction: the opening marker reads open -> close; a marker at
            // the closing side reads close -> open and is flipped.
            let dir = open_bond
                .and_then(|p| p.dir)
                .or_else(|| pending.and_then(|p| p.dir.map(BondDir::flipped)));
            self.bonds.push(Bond {
                a: other,
                b: here,
                order,
                dir,
            });
            self.slots[other][slot_idx] = Slot::Filled(NeighborRef::Atom(here));
            self.slots[here].push(Slot::Filled(NeighborRef::Atom(other)));
        } else {
            let slot_idx = self.slots[here].len();
            self.slots[here].push(Slot::PendingRing(digit));
            self.ring_open.insert(digit, (here, pending, slot_idx));
        }
        Ok(())
    }

    fn organic_atom(&mut self) -> Result<(), GrammarError> {
        let start = self.pos;
        let rest = &self.bytes[self.pos..];
        let (element, aromatic, len) = if rest.starts_with(b"Cl") {
            (Element::Cl, false, 2)
        } else if rest.starts_with(b"Br") {
            (Element::Br, false, 2)
        } else {
            let c = rest[0];
            let el = match c {
                b'B' => (Element::B, false),
                b'C' => (Element::C, false),
                b'N' => (Element::N, false),
                b'O' => (Element::O, false),
                b'F' => (Element::F, false),
                b'P' => (Element::P, false),
                b'S' => (Element::S, false),
                b'I' => (Element::I, false),
                b'c' => (Element::C, true),
                b'n' => (Element::N, true),
                b'o' => (Element::O, true),
                b's' => (Element::S, true),
                _ => return err(start, format!("unknown symbol '{}'", c as char)),
            };
            (el.0, el.1, 1)
        };
        self.pos += len;
        self.add_atom(
            Atom {
                element,
                aromatic,
                charge: 0,
                explicit_h: None,
            },
            None,
            start,
        )
    }

    fn bracket_atom(&mut self) -> Result<(), GrammarError> {
        let start = self.pos;
        self.pos += 1; // '['
        let rest = &self.bytes[self.pos..];
        if rest.first().is_some_and(|c| c.is_ascii_digit()) {
            return err(self.pos, "isotopes are not supported");
        }
        // element symbol
        let (element, aromatic, len) = if rest.starts_with(b"Cl") {
            (Element::Cl, false, 2)
        } else if rest.starts_with(b"Br") {
            (Element::Br, false, 2)
        } else {
            match rest.first() {
                Some(b'c') => (Element::C, true, 1),
                Some(b'n') => (Element::N, true, 1),
                Some(b'o') => (Element::O, true, 1),
                Some(b's') => (Element::S, true, 1),
                Some(&c) if c.is_ascii_uppercase() => {
                    match Element::from_symbol(&(c as char).to_string()) {
                        Some(el) => (el, false, 1),
                        None => return err(self.pos, format!("unknown element '{}'", c as char)),
                    }
                }
                _ => return err(self.pos, "expected element in bracket"),
            }
        };
        self.pos += len;
        // chirality
        let mut parity = None;
        if self.peek() == Some(b'@') {
            self.pos += 1;
            if self.peek() == Some(b'@') {
                self.pos += 1;
                parity = Some(Parity::Clockwise);
            } else {
                parity = Some(Parity::Counterclockwise);
            }
        }
        // hydrogen count
        let mut h: u8 = 0;
        if self.peek() == Some(b'H') {
            self.pos += 1;
            h = 1;
            if let Some(c) = self.peek() {
                if c.is_ascii_digit() {
                    h = c - b'0';
                    self.pos += 1;
                }
            }
        }
        // charge
        let mut charge: i8 = 0;
        if let Some(c @ (b'+' | b'-')) = self.peek() {
            let sign: i8 = if c == b'+' { 1 } else { -1 };
            self.pos += 1;
            let mut magnitude: i8 = 1;
            if let Some(d) = self.peek() {
                if d.is_ascii_digit() {
                    magnitude = (d - b'0') as i8;
                    self.pos += 1;
                } else {
                    while self.peek() == Some(c) {
                        magnitude += 1;
                        self.pos += 1;
                    }
                }
            }
            charge = sign * magnitude;
        }
        if self.peek() != Some(b']') {
            return err(self.pos, "expected ']'");
        }
        self.pos += 1;
        if aromatic && !element.supports_aromatic() {
            return err(start, "element cannot be aromatic");
        }
        self.add_atom(
            Atom {
                element,
                aromatic,
                charge,
                explicit_h: Some(h),
            },
            parity,
            start,
        )
    }

    fn add_atom(
        &mut self,
        atom: Atom,
        parity: Option<Parity>,
        offset: usize,
    ) -> Result<(), GrammarError> {
        let idx = self.atoms.len();
        let pending = self.pending.take();
        let mut my_slots = Vec::new();
        match self.prev {
            Some(p) => {
                let order = pending.and_then(|pb| pb.order).unwrap_or_else(|| {
                    if self.atoms[p].aromatic && atom.aromatic {
                        BondOrder::Aromatic
                    } else {
                        BondOrder::Single
                    }
                });
                self.bonds.push(Bond {
                    a: p,
                    b: idx,
                    order,
                    dir: pending.and_then(|pb| pb.dir),
                });
                self.slots[p].push(Slot::Filled(NeighborRef::Atom(idx)));
                my_slots.push(Slot::Filled(NeighborRef::Atom(p)));
            }
            None => {
                if let Some(pb) = pending {
                    return err(pb.offset, "bond symbol without preceding atom");
                }
            }
        }
        // the bracket implicit H takes the neighbor position where it is written
        if parity.is_some() && atom.explicit_h == Some(1) {
            my_slots.push(Slot::Filled(NeighborRef::ImplicitH));
        }
        self.atoms.push(atom);
        self.slots.push(my_slots);
        self.chiral.push(parity);
        self.prev = Some(idx);
        let _ = offset;
        self.after_dot = false;
        Ok(())
    }

    fn finish(self) -> Result<Molecule, GrammarError> {
        if !self.stack.is_empty() {
            return err(self.bytes.len(), "unclosed '('");
        }
        if let Some(pb) = self.pending {
            return err(pb.offset, "dangling bond at end of input");
        }
        if let Some((&digit, _)) = self.ring_open.iter().next() {
            return err(self.bytes.len(), format!("unclosed ring bond {digit}"));
        }
        let mut stereocenters = Vec::new();
        for (i, parity) in self.chiral.iter().enumerate() {
            let Some(parity) = parity else { continue };
            let refs: Vec<NeighborRef> = self.slots[i]
                .iter()
                .map(|s| match s {
                    Slot::Filled(r) => *r,
                    Slot::PendingRing(d) => unreachable!("ring {d} left unclosed"),
                })
                .collect();
            if refs.len() != 4 {
                return err(
                    0,
                    format!(
                        "chiral atom {i} has {} ordered neighbors, expected 4",
                        refs.len()
                    ),
                );
            }
            stereocenters.push(TetrahedralCenter {
                atom: i,
                neighbors: [refs[0], refs[1], refs[2], refs[3]],
                parity: *parity,
            });
        }
        Ok(Molecule {
            atoms: self.atoms,
            bonds: self.bonds,
            stereocenters,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_atom() {
        let m = parse_smiles("C").unwrap();
        assert_eq!(m.atoms.len(), 1);
        assert!(m.bonds.is_empty());
        assert_eq!(m.atoms[0].element, Element::C);
    }

    #[test]
    fn cyclopropane() {
        let m = parse_smiles("C1CC1").unwrap();
        assert_eq!(m.atoms.len(), 3);
        assert_eq!(m.bonds.len(), 3);
        assert!(m.bonds.iter().all(|b| b.order == BondOrder::Single));
    }

    #[test]
    fn alanine_stereocenter_reading_order() {
        let m = parse_smiles("N[C@@H](C)C(=O)O").unwrap();
        assert_eq!(m.stereocenters.len(), 1);
        let c = &m.stereocenters[0];
        assert_eq!(c.atom, 1);
        assert_eq!(c.parity, Parity::Clockwise);
        assert_eq!(
            c.neighbors,
            [
                NeighborRef::Atom(0),
                NeighborRef::ImplicitH,
                NeighborRef::Atom(2),
                NeighborRef::Atom(3),
            ]
        );
    }

    #[test]
    fn charges_and_brackets() {
        let m = parse_smiles("[NH4+]").unwrap();
        assert_eq!(m.atoms[0].charge, 1);
        assert_eq!(m.atoms[0].explicit_h, Some(4));
        let m = parse_smiles("[O-]C").unwrap();
        assert_eq!(m.atoms[0].charge, -1);
        let m = parse_smiles("[N+2]").unwrap();
        assert_eq!(m.atoms[0].charge, 2);
        let m = parse_smiles("[O--]").unwrap();
        assert_eq!(m.atoms[0].charge, -2);
    }

    #[test]
    fn grammar_errors_carry_offsets() {
        assert!(parse_smiles("").is_err());
        assert_eq!(parse_smiles("C1CC").unwrap_err().offset, 4);
        assert!(parse_smiles("C(C").is_err());
        assert!(parse_smiles("C)").is_err());
        assert!(parse_smiles("C=").is_err());
        assert!(parse_smiles("C==C").is_err());
        assert!(parse_smiles("Cx").is_err());
        assert!(parse_smiles("[Zn]").is_err());
        assert!(parse_smiles("[13C]").is_err());
        assert!(parse_smiles("C11").is_err());
        assert!(parse_smiles("C%1").is_err());
    }

    #[test]
    fn aromatic_bond_default() {
        let m = parse_smiles("c1ccccc1").unwrap();
        assert!(m.bonds.iter().all(|b| b.order == BondOrder::Aromatic));
        let m = parse_smiles("c1ccccc1-c1ccccc1").unwrap();
        assert_eq!(
            m.bonds.iter().filter(|b| b.order == BondOrder::Single).count(),
            1
        );
    }

    #[test]
    fn directional_bonds() {
        let m = parse_smiles("F/C=C/F").unwrap();
        let dirs: Vec<_> = m.bonds.iter().filter_map(|b| b.dir).collect();
        assert_eq!(dirs, vec![BondDir::Up, BondDir::Up]);
    }

    #[test]
    fn percent_ring_closure() {
        let m = parse_smiles("C%12CC%12").unwrap();
        assert_eq!(m.bonds.len(), 3);
    }

    #[test]
    fn dot_separates_fragments() {
        let m = parse_smiles("CCO.Cl").unwrap();
        assert_eq!(m.components().len(), 2);
    }

    #[test]
    fn chiral_atom_needs_four_neighbors() {
        assert!(parse_smiles("[C@H](C)C").is_err());
    }
}
