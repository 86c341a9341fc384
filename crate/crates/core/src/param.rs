//! The two unique parametrisations of the energy function under
//! stationarity and their one-to-one conversion, plus the Ising and
//! independence reference embeddings.
//!
//! Conversions are defined on the torus. Free-boundary models reuse the
//! same phi vector with border terms; beta reporting for free-boundary
//! runs uses the torus conversion table of the same lattice size, stated
//! here as a convention.

use std::collections::HashMap;
use std::sync::{Arc, Mutex, OnceLock};

use crate::configsets::ConfigCatalog;
use crate::error::{Error, Result};
use crate::lattice::{Boundary, LatticeSpec, NodeSet};

/// Per-configuration-class clique potentials.
#[derive(Debug, Clone, PartialEq)]
pub struct PhiVector {
    pub values: Vec<f64>,
}

/// Interaction coefficients of the pseudo-Boolean energy expansion,
/// indexed by the same class ids. Entry 0 is the constant term.
#[derive(Debug, Clone, PartialEq)]
pub struct BetaVector {
    pub values: Vec<f64>,
}

impl PhiVector {
    pub fn zeros(cat: &ConfigCatalog) -> Self {
        PhiVector {
            values: vec![0.0; cat.class_count()],
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

impl BetaVector {
    pub fn zeros(cat: &ConfigCatalog) -> Self {
        BetaVector {
            values: vec![0.0; cat.class_count()],
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

fn check_len(len: usize, cat: &ConfigCatalog, what: &str) -> Result<()> {
    if len != cat.class_count() {
        return Err(Error::validation(format!(
            "{what} has {len} entries but the catalog has {} classes",
            cat.class_count()
        )));
    }
    Ok(())
}

/// Intersection and subset tallies that drive the conversion recursions.
///
/// For each class a, `clique_counts[a]` holds N(a -> mu): the number of
/// maximal cliques whose intersection with a representative of a falls in
/// class mu. `subset_counts[a]` holds M(a -> mu): the number of subsets of
/// the representative in class mu. Every maximal clique contributes one
/// intersection, so the N counts sum to n*m per class.
#[derive(Debug, Clone)]
pub struct ConversionTable {
    pub n: usize,
    pub m: usize,
    clique_counts: Vec<Vec<(usize, u64)>>,
    subset_counts: Vec<Vec<(usize, u64)>>,
    containing: Vec<u64>,
}

impl ConversionTable {
    /// Tallies intersections of each class representative (placed at the
    /// origin) with every maximal clique of the torus, classifying each
    /// intersection in the clique's own frame.
    pub fn build(spec: &LatticeSpec, cat: &ConfigCatalog) -> Result<Self> {
        if spec.boundary != Boundary::Torus {
            return Err(Error::validation(
                "conversion tables are defined for torus lattices only",
            ));
        }
        let tpl = cat.template();
        if tpl.height() > spec.n || tpl.width() > spec.m {
            return Err(Error::validation(format!(
                "template ({}x{}) larger than lattice ({}x{})",
                tpl.height(),
                tpl.width(),
                spec.n,
                spec.m
            )));
        }
        let n = spec.n as i32;
        let m = spec.m as i32;
        let bit_of: HashMap<(i32, i32), usize> = tpl
            .shape()
            .nodes()
            .iter()
            .enumerate()
            .map(|(p, &node)| (node, p))
            .collect();

        let classes = cat.class_count();
        let mut clique_counts = Vec::with_capacity(classes);
        let mut subset_counts = Vec::with_capacity(classes);
        let mut containing = Vec::with_capacity(classes);

        for class in cat.classes() {
            let rep = &class.canonical;
            let mut n_counts: HashMap<usize, u64> = HashMap::new();
            for t in 0..n {
                for u in 0..m {
                    let mut mask = 0usize;
                    for &(i, j) in rep.iter() {
                        let rel = ((i - t).rem_euclid(n), (j - u).rem_euclid(m));
                        if let Some(&bit) = bit_of.get(&rel) {
                            mask |= 1 << bit;
                        }
                    }
                    *n_counts.entry(cat.class_of_mask(mask)).or_insert(0) += 1;
                }
            }
            for (&mu, _) in n_counts.iter() {
                if mu != class.id && cat.classes()[mu].size() >= class.size() && class.size() > 0 {
                    return Err(Error::validation(format!(
                        "lattice {}x{} too small: intersections of class {} wrap ambiguously",
                        spec.n, spec.m, class.id
                    )));
                }
            }
            let own = *n_counts.get(&class.id).unwrap_or(&0);
            debug_assert!(own > 0);

            let rep_nodes = rep.nodes().to_vec();
            let mut m_counts: HashMap<usize, u64> = HashMap::new();
            for mask in 0..(1usize << rep_nodes.len()) {
                let subset: NodeSet = rep_nodes
                    .iter()
                    .enumerate()
                    .filter(|(p, _)| mask >> p & 1 == 1)
                    .map(|(_, &node)| node)
                    .collect();
                *m_counts.entry(cat.classify(&subset)?).or_insert(0) += 1;
            }

            let mut n_vec: Vec<(usize, u64)> = n_counts.into_iter().collect();
            n_vec.sort_unstable();
            let mut m_vec: Vec<(usize, u64)> = m_counts.into_iter().collect();
            m_vec.sort_unstable();
            clique_counts.push(n_vec);
            subset_counts.push(m_vec);
            containing.push(own);
        }

        Ok(ConversionTable {
            n: spec.n,
            m: spec.m,
            clique_counts,
            subset_counts,
            containing,
        })
    }

    pub fn clique_counts(&self, class: usize) -> &[(usize, u64)] {
        &self.clique_counts[class]
    }

    pub fn subset_counts(&self, class: usize) -> &[(usize, u64)] {
        &self.subset_counts[class]
    }

    /// Number of maximal cliques containing the class representative.
    pub fn containing(&self, class: usize) -> u64 {
        self.containing[class]
    }
}

/// Process-wide cache of conversion tables keyed by (template, n, m).
pub fn conversion_table(spec: &LatticeSpec, cat: &ConfigCatalog) -> Result<Arc<ConversionTable>> {
    type Key = (Vec<(i32, i32)>, usize, usize);
    static CACHE: OnceLock<Mutex<HashMap<Key, Arc<ConversionTable>>>> = OnceLock::new();
    let key = (
        cat.template().shape().nodes().to_vec(),
        spec.n,
        spec.m,
    );
    let cache = CACHE.get_or_init(|| Mutex::new(HashMap::new()));
    if let Some(table) = cache.lock().unwrap().get(&key) {
        return Ok(Arc::clone(table));
    }
    let table = Arc::new(ConversionTable::build(spec, cat)?);
    cache
        .lock()
        .unwrap()
        .insert(key, Arc::clone(&table));
    Ok(table)
}

/// Computes phi classes in increasing size order; intersections with
/// non-containing cliques are strictly smaller, so the recursion is
/// well-founded.
pub fn beta_to_phi(beta: &BetaVector, cat: &ConfigCatalog, table: &ConversionTable) -> Result<PhiVector> {
    check_len(beta.len(), cat, "beta vector")?;
    let mut phi = vec![0.0; beta.len()];
    for class in cat.classes() {
        let a = class.id;
        let mut acc = 0.0;
        for &(mu, count) in table.subset_counts(a) {
            acc += count as f64 * beta.values[mu];
        }
        for &(mu, count) in table.clique_counts(a) {
            if mu != a {
                acc -= count as f64 * phi[mu];
            }
        }
        phi[a] = acc / table.containing(a) as f64;
    }
    Ok(PhiVector { values: phi })
}

/// Mirror recursion: beta of each class from the phi vector, with
/// beta(empty) = n*m*phi(empty).
pub fn phi_to_beta(phi: &PhiVector, cat: &ConfigCatalog, table: &ConversionTable) -> Result<BetaVector> {
    check_len(phi.len(), cat, "phi vector")?;
    let mut beta = vec![0.0; phi.len()];
    for class in cat.classes() {
        let a = class.id;
        let mut acc = 0.0;
        for &(mu, count) in table.clique_counts(a) {
            acc += count as f64 * phi.values[mu];
        }
        for &(mu, count) in table.subset_counts(a) {
            if mu != a {
                acc -= count as f64 * beta[mu];
            }
        }
        beta[a] = acc;
    }
    Ok(BetaVector { values: beta })
}

fn require_2x2(cat: &ConfigCatalog, what: &str) -> Result<()> {
    let tpl = cat.template();
    if tpl.height() != 2 || tpl.width() != 2 || tpl.size() != 4 {
        return Err(Error::validation(format!(
            "{what} requires the 2x2 block catalog"
        )));
    }
    Ok(())
}

/// Phi vector of the Ising model with interaction strength omega embedded
/// in the 2x2-template MRF. The free constant is fixed so the three
/// distinct values sum to zero: empty and full configurations get omega,
/// the two diagonals get -omega, everything else 0.
pub fn ising_phi(omega: f64, cat: &ConfigCatalog) -> Result<PhiVector> {
    require_2x2(cat, "ising_phi")?;
    let eta = omega;
    let diag = NodeSet::new(vec![(0, 0), (1, 1)]);
    let anti = NodeSet::new(vec![(0, 1), (1, 0)]);
    let values = cat
        .classes()
        .iter()
        .map(|c| {
            if c.size() == 0 || c.size() == 4 {
                eta
            } else if c.canonical == diag || c.canonical == anti {
                -2.0 * omega + eta
            } else {
                -omega + eta
            }
        })
        .collect();
    Ok(PhiVector { values })
}

/// Phi vector of the i.i.d. Bernoulli(p) model embedded in the
/// 2x2-template MRF: each class takes alpha*|class|/4 + eta with
/// alpha = ln(p/(1-p)) and eta = -alpha/2 so the five distinct values
/// sum to zero.
pub fn independence_phi(p: f64, cat: &ConfigCatalog) -> Result<PhiVector> {
    require_2x2(cat, "independence_phi")?;
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::validation(format!(
            "independence probability must lie in (0,1), got {p}"
        )));
    }
    let alpha = (p / (1.0 - p)).ln();
    let eta = -alpha / 2.0;
    let values = cat
        .classes()
        .iter()
        .map(|c| alpha * c.size() as f64 / 4.0 + eta)
        .collect();
    Ok(PhiVector { values })
}
