//! Circular (ECFP-style) and hashed-path substructure fingerprints, Tanimoto
//! similarity, and dimension-wise prediction/target agreement ratios.
//!
//! Identifiers are hashed with 64-bit FNV-1a over the serialized invariant
//! tuple and folded modulo the bit width, so fingerprints are deterministic
//! across platforms without a seed.

use thiserror::Error;

use crate::molgraph::{
    fnv_hash, parse_smiles, validate_molecule, Molecule, NeighborRef,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FingerprintConfig {
    pub radius: u32,
    pub width: usize,
}

impl FingerprintConfig {
    pub fn new(radius: u32, width: usize) -> FingerprintConfig {
        assert!(radius <= 3, "radius must be 0..=3");
        assert!(width.is_power_of_two(), "width must be a power of two");
        FingerprintConfig { radius, width }
    }

    /// The property-prediction baseline configuration: R = 2, 2,048 bits.
    pub fn ecfp_default() -> FingerprintConfig {
        FingerprintConfig::new(2, 2048)
    }
}

#[derive(Debug, Clone, Error, PartialEq, Eq)]
pub enum FingerprintError {
    #[error("fingerprint configs do not match")]
    ConfigMismatch,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Fingerprint {
    words: Vec<u64>,
    pub width: usize,
}

impl Fingerprint {
    fn zeros(width: usize) -> Fingerprint {
        Fingerprint {
            words: vec![0; width.div_ceil(64)],
            width,
        }
    }

    fn set(&mut self, bit: usize) {
        self.words[bit / 64] |= 1u64 << (bit % 64);
    }

    pub fn get(&self, bit: usize) -> bool {
        self.words[bit / 64] >> (bit % 64) & 1 == 1
    }

    pub fn count_ones(&self) -> u32 {
        self.words.iter().map(|w| w.count_ones()).sum()
    }

    pub fn set_bits(&self) -> Vec<usize> {
        (0..self.width).filter(|&b| self.get(b)).collect()
    }

    /// Hex dump, most significant word first; one line per fingerprint in files.
    pub fn to_hex(&self) -> String {
        self.words
            .iter()
            .rev()
            .map(|w| format!("{w:016x}"))
            .collect()
    }
}

/// |a AND b| / |a OR b|; 1.0 when both vectors are all-zero.
pub fn tanimoto(a: &Fingerprint, b: &Fingerprint) -> Result<f64, FingerprintError> {
    if a.width != b.width {
        return Err(FingerprintError::ConfigMismatch);
    }
    let mut and = 0u32;
    let mut or = 0u32;
    for (x, y) in a.words.iter().zip(&b.words) {
        and += (x & y).count_ones();
        or += (x | y).count_ones();
    }
    if or == 0 {
        Ok(1.0)
    } else {
        Ok(and as f64 / or as f64)
    }
}

fn ring_flags(m: &Molecule) -> Vec<bool> {
    // an atom is in a ring iff one of its bonds lies on a cycle
    let n = m.atoms.len();
    let mut flags = vec![false; n];
    for skip in 0..m.bonds.len() {
        let b = &m.bonds[skip];
        // endpoints still connected without this bond => bond is cyclic
        let mut seen = vec![false; n];
        let mut stack = vec![b.a];
        seen[b.a] = true;
        while let Some(u) = stack.pop() {
            for (bi, bond) in m.bonds.iter().enumerate() {
                if bi == skip {
                    continue;
                }
                if bond.a == u && !seen[bond.b] {
                    seen[bond.b] = true;
                    stack.push(bond.b);
                } else if bond.b == u && !seen[bond.a] {
                    seen[bond.a] = true;
                    stack.push(bond.a);
                }
            }
        }
        if seen[b.b] {
            flags[b.a] = true;
            flags[b.b] = true;
        }
    }
    flags
}

/// Raw iterated-neighborhood identifiers for all radii 0..=R.
/// At radius >= 2 a renumbering-invariant tetrahedral parity class is folded
/// into the center atom's identifier so enantiomers separate.
fn ecfp_identifiers(m: &Molecule, radius: u32) -> Vec<u64> {
    let n = m.atoms.len();
    let adj = m.adjacency();
    let rings = ring_flags(m);
    let mut ids: Vec<u64> = (0..n)
        .map(|i| {
            let a = &m.atoms[i];
            fnv_hash(&[
                1, // namespace tag: circular identifiers
                a.element as u64,
                (a.charge as i64 + 16) as u64,
                adj[i].len() as u64,
                m.hydrogen_count(i) as u64,
                rings[i] as u64,
            ])
        })
        .collect();
    let mut all = ids.clone();
    for r in 1..=radius {
        let mut next = Vec::with_capacity(n);
        for i in 0..n {
            let mut nbrs: Vec<u64> = adj[i]
                .iter()
                .map(|&(j, bi)| fnv_hash(&[m.bonds[bi].order as u64, ids[j]]))
                .collect();
            nbrs.sort_unstable();
            let mut words = vec![r as u64, ids[i]];
            if r >= 2 {
                words.push(parity_class(m, i, &ids));
            }
            words.extend(nbrs);
            next.push(fnv_hash(&words));
        }
        ids = next;
        all.extend(ids.iter().copied());
    }
    all
}

/// 0 = no center or ambiguous; 1/2 = the two configurations, defined
/// relative to the neighbor order sorted by current identifiers.
fn parity_class(m: &Molecule, atom: usize, ids: &[u64]) -> u64 {
    let Some(c) = m.stereocenter_on(atom) else {
        return 0;
    };
    let key = |r: &NeighborRef| match r {
        NeighborRef::Atom(i) => (1u64, ids[*i]),
        NeighborRef::ImplicitH => (0u64, 0u64),
    };
    let mut sorted = c.neighbors;
    sorted.sort_by_key(key);
    // duplicate identifiers make the orientation ill-defined
    for w in sorted.windows(2) {
        if key(&w[0]) == key(&w[1]) {
            return 0;
        }
    }
    let odd = crate::molgraph::permutation_is_odd(&c.neighbors, &sorted);
    let parity = if odd { c.parity.flipped() } else { c.parity };
    match parity {
        crate::molgraph::Parity::Counterclockwise => 1,
        crate::molgraph::Parity::Clockwise => 2,
    }
}

/// Morgan-style circular fingerprint.
pub fn ecfp(m: &Molecule, cfg: FingerprintConfig) -> Fingerprint {
    let mut fp = Fingerprint::zeros(cfg.width);
    for id in ecfp_identifiers(m, cfg.radius) {
        fp.set((id % cfg.width as u64) as usize);
    }
    fp
}

/// Hashed linear-path keys: all simple paths of up to `max_len` atoms,
/// canonically oriented. Stand-in for the fixed substructure key set in
/// dimension-wise agreement analysis.
pub fn path_keys(m: &Molecule, max_len: usize, width: usize) -> Fingerprint {
    assert!(width.is_power_of_two());
    let n = m.atoms.len();
    let adj = m.adjacency();
    let atom_label = |i: usize| {
        let a = &m.atoms[i];
        fnv_hash(&[
            2, // namespace tag: path keys
            a.element as u64,
            a.aromatic as u64,
            (a.charge as i64 + 16) as u64,
        ])
    };
    let mut fp = Fingerprint::zeros(width);
    let mut path: Vec<usize> = Vec::new();
    let mut labels: Vec<u64> = Vec::new();
    fn extend(
        u: usize,
        max_len: usize,
        m: &Molecule,
        adj: &[Vec<(usize, usize)>],
        atom_label: &dyn Fn(usize) -> u64,
        path: &mut Vec<usize>,
        labels: &mut Vec<u64>,
        fp: &mut Fingerprint,
        width: usize,
    ) {
        path.push(u);
        labels.push(atom_label(u));
        // canonical orientation: emit only if forward reads <= reversed
        let rev: Vec<u64> = labels.iter().rev().copied().collect();
        if *labels <= rev {
            let id = fnv_hash(labels);
            fp.set((id % width as u64) as usize);
        }
        if path.len() < max_len {
            for &(v, bi) in &adj[u] {
                if path.contains(&v) {
                    continue;
                }
                labels.push(fnv_hash(&[3, m.bonds[bi].order as u64]));
                extend(v, max_len, m, adj, atom_label, path, labels, fp, width);
                labels.pop();
            }
        }
        path.pop();
        labels.pop();
    }
    for start in 0..n {
        extend(
            start,
            max_len,
            m,
            &adj,
            &atom_label,
            &mut path,
            &mut labels,
            &mut fp,
            width,
        );
    }
    fp
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum KeyKind {
    Ecfp(FingerprintConfig),
    PathKeys { max_len: usize, width: usize },
}

impl KeyKind {
    pub fn width(&self) -> usize {
        match self {
            KeyKind::Ecfp(cfg) => cfg.width,
            KeyKind::PathKeys { width, .. } => *width,
        }
    }

    pub fn fingerprint(&self, m: &Molecule) -> Fingerprint {
        match self {
            KeyKind::Ecfp(cfg) => ecfp(m, *cfg),
            KeyKind::PathKeys { max_len, width } => path_keys(m, *max_len, *width),
        }
    }
}

/// Per-bit agreement counts between predicted strings and target molecules.
/// Bucket meanings per target bit value:
///   target 0: A invalid, B valid both-0, C valid pred-1
///   target 1: D invalid, E valid pred-0, F valid both-1
#[derive(Debug, Clone)]
pub struct DimensionAgreementTable {
    pub a: Vec<u64>,
    pub b: Vec<u64>,
    pub c: Vec<u64>,
    pub d: Vec<u64>,
    pub e: Vec<u64>,
    pub f: Vec<u64>,
}

impl DimensionAgreementTable {
    pub fn width(&self) -> usize {
        self.a.len()
    }

    /// B / (A + B + C); None when the denominator is zero.
    pub fn ratio0(&self, bit: usize) -> Option<f64> {
        let d = self.a[bit] + self.b[bit] + self.c[bit];
        (d > 0).then(|| self.b[bit] as f64 / d as f64)
    }

    /// F / (D + E + F); None when the denominator is zero.
    pub fn ratio1(&self, bit: usize) -> Option<f64> {
        let d = self.d[bit] + self.e[bit] + self.f[bit];
        (d > 0).then(|| self.f[bit] as f64 / d as f64)
    }

    /// Fraction of molecules whose target bit is 1.
    pub fn target_frequency(&self, bit: usize) -> f64 {
        let ones = self.d[bit] + self.e[bit] + self.f[bit];
        let total = ones + self.a[bit] + self.b[bit] + self.c[bit];
        if total == 0 {
            0.0
        } else {
            ones as f64 / total as f64
        }
    }

    /// CSV with header: bit, A..F, ratio0, ratio1, target frequency.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("bit,a,b,c,d,e,f,ratio0,ratio1,target_frequency\n");
        for bit in 0..self.width() {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{}\n",
                bit,
                self.a[bit],
                self.b[bit],
                self.c[bit],
                self.d[bit],
                self.e[bit],
                self.f[bit],
                self.ratio0(bit).map_or(String::new(), |r| r.to_string()),
                self.ratio1(bit).map_or(String::new(), |r| r.to_string()),
                self.target_frequency(bit),
            ));
        }
        out
    }
}

/// Dimension-wise agreement. Unlike the Tanimoto similarity curve, invalid
/// predictions are counted in the denominators (buckets A and D).
pub fn dimension_agreement(
    pairs: &[(String, Molecule)],
    kind: KeyKind,
) -> DimensionAgreementTable {
    let width = kind.width();
    let mut table = DimensionAgreementTable {
        a: vec![0; width],
        b: vec![0; width],
        c: vec![0; width],
        d: vec![0; width],
        e: vec![0; width],
        f: vec![0; width],
    };
    let rows = crate::par::par_map(pairs, |(pred, target)| {
        let target_fp = kind.fingerprint(target);
        let pred_fp = parse_smiles(pred)
            .ok()
            .filter(|m| validate_molecule(m).is_valid())
            .map(|m| kind.fingerprint(&m));
        (target_fp, pred_fp)
    });
    for (target_fp, pred_fp) in rows {
        for bit in 0..width {
            let t = target_fp.get(bit);
            match &pred_fp {
                None => {
                    if t {
                        table.d[bit] += 1;
                    } else {
                        table.a[bit] += 1;
                    }
                }
                Some(p) => match (t, p.get(bit)) {
                    (false, false) => table.b[bit] += 1,
                    (false, true) => table.c[bit] += 1,
                    (true, false) => table.e[bit] += 1,
                    (true, true) => table.f[bit] += 1,
                },
            }
        }
    }
    table
}
