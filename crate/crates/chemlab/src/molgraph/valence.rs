//! Validity: grammar + octet-rule valence, with aromatic systems checked by
//! kekulization (existence of an alternating double-bond assignment found by
//! backtracking over the aromatic subgraph).

use super::{parse_smiles, BondOrder, Element, Molecule};

/// Allowed total valences, shifted by formal charge. B gains a bond per
/// negative charge (borate), C loses one per unit charge of either sign,
/// the rest shift with the charge sign.
pub fn allowed_valences(element: Element, charge: i8) -> Vec<u32> {
    let base: &[i32] = match element {
        Element::H => &[1],
        Element::B => &[3],
        Element::C => &[4],
        Element::N => &[3],
        Element::O => &[2],
        Element::F | Element::Cl | Element::Br | Element::I => &[1],
        Element::P => &[3, 5],
        Element::S => &[2, 4, 6],
    };
    let shift: i32 = match element {
        Element::B => -(charge as i32),
        Element::C => -(charge as i32).abs(),
        _ => charge as i32,
    };
    base.iter()
        .map(|&v| v + shift)
        .filter(|&v| v >= 0)
        .map(|v| v as u32)
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ValidityReason {
    Grammar,
    Valence,
    Kekulization,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Validity {
    Valid,
    Invalid {
        reason: ValidityReason,
        message: String,
    },
}

impl Validity {
    pub fn is_valid(&self) -> bool {
        matches!(self, Validity::Valid)
    }
}

fn invalid(reason: ValidityReason, message: impl Into<String>) -> Validity {
    Validity::Invalid {
        reason,
        message: message.into(),
    }
}

/// Valid iff the grammar parses AND every atom's total bond order (plus
/// implicit H fill and charge adjustment) lies in its allowed valence set.
/// Never panics on any input text.
pub fn validate(s: &str) -> Validity {
    match parse_smiles(s) {
        Ok(m) => validate_molecule(&m),
        Err(e) => invalid(ValidityReason::Grammar, e.to_string()),
    }
}

pub fn validate_molecule(m: &Molecule) -> Validity {
    let doubles = match kekulize(m) {
        Ok(d) => d,
        Err(msg) => return invalid(ValidityReason::Kekulization, msg),
    };
    for (i, atom) in m.atoms.iter().enumerate() {
        let mut order_sum: u32 = 0;
        for (bi, b) in m.bonds.iter().enumerate() {
            if b.a == i || b.b == i {
                order_sum += b.order.order_sum();
                if doubles[bi] {
                    order_sum += 1;
                }
            }
        }
        let allowed = allowed_valences(atom.element, atom.charge);
        let ok = match atom.explicit_h {
            Some(h) => allowed.contains(&(order_sum + h as u32)),
            None => allowed.iter().any(|&v| v >= order_sum),
        };
        if !ok {
            return invalid(
                ValidityReason::Valence,
                format!(
                    "atom {i} ({}) has bond order sum {order_sum} outside valence set {allowed:?}",
                    atom.element.symbol()
                ),
            );
        }
    }
    Validity::Valid
}

/// Assign one double bond to each aromatic atom that requires it. Returns a
/// per-bond flag marking aromatic bonds promoted to double, or a message if
/// no alternating assignment exists.
pub fn kekulize(m: &Molecule) -> Result<Vec<bool>, String> {
    let n = m.atoms.len();
    let aromatic_bonds: Vec<usize> = (0..m.bonds.len())
        .filter(|&bi| m.bonds[bi].order == BondOrder::Aromatic)
        .collect();
    let mut arom_adj: Vec<Vec<usize>> = vec![Vec::new(); n];
    for &bi in &aromatic_bonds {
        let b = &m.bonds[bi];
        arom_adj[b.a].push(bi);
        arom_adj[b.b].push(bi);
    }
    // per-atom double-bond requirement within the aromatic system:
    // None = not aromatic, Some((min, max)) otherwise
    let mut need: Vec<Option<(u8, u8)>> = vec![None; n];
    for (i, atom) in m.atoms.iter().enumerate() {
        if !atom.aromatic {
            continue;
        }
        if arom_adj[i].len() < 2 {
            return Err(format!("aromatic atom {i} is not inside an aromatic ring"));
        }
        let has_exo_double = m.bonds.iter().any(|b| {
            (b.a == i || b.b == i)
                && matches!(b.order, BondOrder::Double | BondOrder::Triple)
        });
        let range = match atom.element {
            Element::C => {
                if has_exo_double {
                    (0, 0)
                } else if atom.charge != 0 {
                    (0, 1)
                } else {
                    (1, 1)
                }
            }
            Element::N => {
                if atom.explicit_h.unwrap_or(0) >= 1 || atom.charge < 0 || has_exo_double {
                    (0, 0)
                } else {
                    (0, 1)
                }
            }
            Element::O | Element::S => {
                if atom.charge > 0 {
                    (0, 1)
                } else {
                    (0, 0)
                }
            }
            other => return Err(format!("element {} cannot be aromatic", other.symbol())),
        };
        need[i] = Some(range);
    }
    let mut doubles = vec![false; m.bonds.len()];
    let mut count = vec![0u8; n];
    if assign(m, &aromatic_bonds, &arom_adj, &need, &mut doubles, &mut count, 0) {
        Ok(doubles)
    } else {
        Err("no alternating double-bond assignment exists".to_string())
    }
}

fn assign(
    m: &Molecule,
    arom_bonds: &[usize],
    arom_adj: &[Vec<usize>],
    need: &[Option<(u8, u8)>],
    doubles: &mut [bool],
    count: &mut [u8],
    _depth: usize,
) -> bool {
    // next unsatisfied atom that still requires a double bond
    let Some(u) = (0..m.atoms.len())
        .find(|&i| matches!(need[i], Some((min, _)) if count[i] < min))
    else {
        return true;
    };
    for &bi in &arom_adj[u] {
        if doubles[bi] {
            continue;
        }
        let b = &m.bonds[bi];
        let v = b.other(u);
        let (_, vmax) = need[v].expect("aromatic neighbor");
        if count[v] >= vmax || count[u] >= 1 {
            continue;
        }
        doubles[bi] = true;
        count[u] += 1;
        count[v] += 1;
        if assign(m, arom_bonds, arom_adj, need, doubles, count, _depth + 1) {
            return true;
        }
        doubles[bi] = false;
        count[u] -= 1;
        count[v] -= 1;
    }
    false
}
