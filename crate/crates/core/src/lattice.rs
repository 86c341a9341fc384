//! Lattice geometry: node indexing, torus/free translation and placement
//! of the template maximal clique.

use crate::error::{Error, Result};

/// Boundary handling for the rectangular lattice.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Boundary {
    /// Translations wrap modulo the lattice dimensions, making the field
    /// stationary.
    Torus,
    /// No wrapping; cliques crossing the edge are handled separately as
    /// border cliques.
    Free,
}

impl Boundary {
    pub fn as_str(&self) -> &'static str {
        match self {
            Boundary::Torus => "torus",
            Boundary::Free => "free",
        }
    }
}

impl std::str::FromStr for Boundary {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "torus" => Ok(Boundary::Torus),
            "free" => Ok(Boundary::Free),
            other => Err(Error::parse(format!(
                "unknown boundary mode '{other}' (expected 'torus' or 'free')"
            ))),
        }
    }
}

/// An n-by-m rectangular lattice with a boundary mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LatticeSpec {
    pub n: usize,
    pub m: usize,
    pub boundary: Boundary,
}

impl LatticeSpec {
    pub fn new(n: usize, m: usize, boundary: Boundary) -> Result<Self> {
        if n == 0 || m == 0 {
            return Err(Error::validation(format!(
                "lattice dimensions must be positive (got {n}x{m})"
            )));
        }
        Ok(LatticeSpec { n, m, boundary })
    }

    pub fn torus(n: usize, m: usize) -> Result<Self> {
        Self::new(n, m, Boundary::Torus)
    }

    pub fn free(n: usize, m: usize) -> Result<Self> {
        Self::new(n, m, Boundary::Free)
    }

    pub fn sites(&self) -> usize {
        self.n * self.m
    }

    /// Row-major site index.
    pub fn index(&self, i: usize, j: usize) -> usize {
        i * self.m + j
    }

    pub fn contains(&self, i: i32, j: i32) -> bool {
        i >= 0 && j >= 0 && (i as usize) < self.n && (j as usize) < self.m
    }
}

/// A duplicate-free set of lattice coordinates stored in canonical
/// row-major order, so equality and hashing are structural.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub struct NodeSet {
    nodes: Vec<(i32, i32)>,
}

impl NodeSet {
    pub fn new(mut nodes: Vec<(i32, i32)>) -> Self {
        nodes.sort_unstable();
        nodes.dedup();
        NodeSet { nodes }
    }

    pub fn empty() -> Self {
        NodeSet { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn nodes(&self) -> &[(i32, i32)] {
        &self.nodes
    }

    pub fn iter(&self) -> impl Iterator<Item = &(i32, i32)> {
        self.nodes.iter()
    }

    pub fn contains(&self, node: (i32, i32)) -> bool {
        self.nodes.binary_search(&node).is_ok()
    }

    /// Translation without wrapping; may leave the lattice.
    pub fn shift(&self, t: i32, u: i32) -> NodeSet {
        NodeSet::new(self.nodes.iter().map(|&(i, j)| (i + t, j + u)).collect())
    }

    /// Bounding box (height, width); `None` for the empty set.
    pub fn bounding_box(&self) -> Option<(usize, usize)> {
        if self.nodes.is_empty() {
            return None;
        }
        let (mut imin, mut imax, mut jmin, mut jmax) = (i32::MAX, i32::MIN, i32::MAX, i32::MIN);
        for &(i, j) in &self.nodes {
            imin = imin.min(i);
            imax = imax.max(i);
            jmin = jmin.min(j);
            jmax = jmax.max(j);
        }
        Some(((imax - imin + 1) as usize, (jmax - jmin + 1) as usize))
    }

    /// Translates the set so its bounding box is anchored at (0,0).
    /// The empty set is its own anchored form.
    pub fn anchored(&self) -> NodeSet {
        if self.nodes.is_empty() {
            return NodeSet::empty();
        }
        let imin = self.nodes.iter().map(|&(i, _)| i).min().unwrap();
        let jmin = self.nodes.iter().map(|&(_, j)| j).min().unwrap();
        self.shift(-imin, -jmin)
    }
}

impl FromIterator<(i32, i32)> for NodeSet {
    fn from_iter<T: IntoIterator<Item = (i32, i32)>>(iter: T) -> Self {
        NodeSet::new(iter.into_iter().collect())
    }
}

/// Translates a node set by (t, u): modular wrap on the torus, plain
/// shift (possibly out of the lattice) under free boundaries.
pub fn translate(s: &NodeSet, t: i32, u: i32, spec: &LatticeSpec) -> NodeSet {
    match spec.boundary {
        Boundary::Torus => {
            let n = spec.n as i32;
            let m = spec.m as i32;
            NodeSet::new(
                s.iter()
                    .map(|&(i, j)| ((i + t).rem_euclid(n), (j + u).rem_euclid(m)))
                    .collect(),
            )
        }
        Boundary::Free => s.shift(t, u),
    }
}

/// The template maximal clique: a non-empty node set anchored at (0,0)
/// together with its bounding box.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct TemplateClique {
    shape: NodeSet,
    k: usize,
    l: usize,
}

impl TemplateClique {
    pub fn new(shape: NodeSet) -> Result<Self> {
        if shape.is_empty() {
            return Err(Error::validation("template clique must be non-empty"));
        }
        if shape != shape.anchored() {
            return Err(Error::validation(
                "template clique must be anchored at (0,0)",
            ));
        }
        let (k, l) = shape.bounding_box().unwrap();
        Ok(TemplateClique { shape, k, l })
    }

    /// Full k-by-l block template.
    pub fn block(k: usize, l: usize) -> Result<Self> {
        if k == 0 || l == 0 {
            return Err(Error::validation("block template dimensions must be positive"));
        }
        let nodes = (0..k as i32)
            .flat_map(|i| (0..l as i32).map(move |j| (i, j)))
            .collect();
        TemplateClique::new(NodeSet::new(nodes))
    }

    pub fn shape(&self) -> &NodeSet {
        &self.shape
    }

    pub fn size(&self) -> usize {
        self.shape.len()
    }

    /// Bounding-box height.
    pub fn height(&self) -> usize {
        self.k
    }

    /// Bounding-box width.
    pub fn width(&self) -> usize {
        self.l
    }

    fn check_fits(&self, spec: &LatticeSpec) -> Result<()> {
        if self.k > spec.n || self.l > spec.m {
            return Err(Error::validation(format!(
                "template ({}x{} bounding box) larger than lattice ({}x{})",
                self.k, self.l, spec.n, spec.m
            )));
        }
        Ok(())
    }
}

/// All maximal cliques: one translate per anchor. On the torus there are
/// exactly n*m of them; under free boundaries only translates fully
/// inside the lattice are returned.
pub fn maximal_cliques(spec: &LatticeSpec, tpl: &TemplateClique) -> Result<Vec<NodeSet>> {
    tpl.check_fits(spec)?;
    let mut cliques = Vec::new();
    match spec.boundary {
        Boundary::Torus => {
            for t in 0..spec.n as i32 {
                for u in 0..spec.m as i32 {
                    cliques.push(translate(tpl.shape(), t, u, spec));
                }
            }
        }
        Boundary::Free => {
            for t in 0..=(spec.n - tpl.k) as i32 {
                for u in 0..=(spec.m - tpl.l) as i32 {
                    cliques.push(tpl.shape().shift(t, u));
                }
            }
        }
    }
    Ok(cliques)
}

/// A translate of the template that is partly inside and partly outside
/// a free-boundary lattice, split into the two parts.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BorderClique {
    /// Anchor offset of the translate.
    pub anchor: (i32, i32),
    /// Nodes inside the lattice.
    pub inside: NodeSet,
    /// Nodes outside the lattice, averaged over in the border potential.
    pub outside: NodeSet,
}

impl BorderClique {
    pub fn outside_count(&self) -> usize {
        self.outside.len()
    }
}

/// Enumerates every translate of the template over the embedding
/// super-lattice that intersects the lattice without being contained in
/// it. Anchors range over [-(k-1), n-1] x [-(l-1), m-1]; translates
/// farther out never intersect, so the bound is exact.
pub fn border_cliques(spec: &LatticeSpec, tpl: &TemplateClique) -> Result<Vec<BorderClique>> {
    if spec.boundary != Boundary::Free {
        return Err(Error::validation(
            "border cliques are only defined for free-boundary lattices",
        ));
    }
    tpl.check_fits(spec)?;
    let mut out = Vec::new();
    for t in -(tpl.k as i32 - 1)..=(spec.n as i32 - 1) {
        for u in -(tpl.l as i32 - 1)..=(spec.m as i32 - 1) {
            let nodes = tpl.shape().shift(t, u);
            let (inside, outside): (Vec<_>, Vec<_>) =
                nodes.iter().partition(|&&(i, j)| spec.contains(i, j));
            if !inside.is_empty() && !outside.is_empty() {
                out.push(BorderClique {
                    anchor: (t, u),
                    inside: NodeSet::new(inside),
                    outside: NodeSet::new(outside),
                });
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn torus(n: usize, m: usize) -> LatticeSpec {
        LatticeSpec::torus(n, m).unwrap()
    }

    #[test]
    fn translate_identity() {
        let spec = torus(5, 5);
        let s = NodeSet::new(vec![(0, 0)]);
        assert_eq!(translate(&s, 0, 0, &spec), s);
    }

    #[test]
    fn translate_wraps_on_torus() {
        let spec = torus(4, 6);
        let s = NodeSet::new(vec![(3, 0)]);
        assert_eq!(translate(&s, 1, 0, &spec), NodeSet::new(vec![(0, 0)]));
    }

    #[test]
    fn translate_pair() {
        let spec = torus(5, 5);
        let s = NodeSet::new(vec![(0, 0), (0, 1)]);
        assert_eq!(
            translate(&s, 2, 3, &spec),
            NodeSet::new(vec![(2, 3), (2, 4)])
        );
    }

    #[test]
    fn free_translate_leaves_lattice() {
        let spec = LatticeSpec::free(4, 4).unwrap();
        let s = NodeSet::new(vec![(0, 0)]);
        assert_eq!(translate(&s, -1, 0, &spec), NodeSet::new(vec![(-1, 0)]));
    }

    #[test]
    fn torus_clique_count_is_nm() {
        let spec = torus(4, 4);
        let tpl = TemplateClique::block(2, 2).unwrap();
        assert_eq!(maximal_cliques(&spec, &tpl).unwrap().len(), 16);
    }

    #[test]
    fn free_clique_count() {
        let spec = LatticeSpec::free(4, 4).unwrap();
        let tpl = TemplateClique::block(2, 2).unwrap();
        assert_eq!(maximal_cliques(&spec, &tpl).unwrap().len(), 9);
    }

    #[test]
    fn domino_torus_count() {
        let spec = torus(3, 3);
        let tpl = TemplateClique::block(1, 2).unwrap();
        assert_eq!(maximal_cliques(&spec, &tpl).unwrap().len(), 9);
    }

    #[test]
    fn template_too_large_rejected() {
        let spec = torus(1, 1);
        let tpl = TemplateClique::block(2, 2).unwrap();
        assert!(maximal_cliques(&spec, &tpl).is_err());
    }

    #[test]
    fn every_node_in_template_size_many_cliques() {
        for tpl in [
            TemplateClique::block(2, 2).unwrap(),
            TemplateClique::block(1, 2).unwrap(),
            TemplateClique::new(NodeSet::new(vec![(0, 0), (1, 1)])).unwrap(),
        ] {
            let spec = torus(5, 4);
            let cliques = maximal_cliques(&spec, &tpl).unwrap();
            for i in 0..5 {
                for j in 0..4 {
                    let count = cliques.iter().filter(|c| c.contains((i, j))).count();
                    assert_eq!(count, tpl.size());
                }
            }
        }
    }

    /// Independent enumeration over a generous margin, counting translates
    /// that are partly inside and partly outside the lattice.
    fn border_count_oracle(spec: &LatticeSpec, tpl: &TemplateClique) -> usize {
        let (kk, ll) = (2 * tpl.height() as i32, 2 * tpl.width() as i32);
        let mut count = 0;
        for t in -2 * kk..spec.n as i32 + 2 * kk {
            for u in -2 * ll..spec.m as i32 + 2 * ll {
                let nodes = tpl.shape().shift(t, u);
                let inside = nodes.iter().filter(|&&(i, j)| spec.contains(i, j)).count();
                if inside > 0 && inside < nodes.len() {
                    count += 1;
                }
            }
        }
        count
    }

    #[test]
    fn border_clique_count_matches_oracle() {
        let tpl = TemplateClique::block(2, 2).unwrap();
        for (n, m) in [(4usize, 4usize), (5, 4), (3, 7)] {
            let spec = LatticeSpec::free(n, m).unwrap();
            let got = border_cliques(&spec, &tpl).unwrap().len();
            assert_eq!(got, border_count_oracle(&spec, &tpl));
            // value frozen from the oracle: the boundary ring of translates
            assert_eq!(got, 2 * n + 2 * m);
        }
    }

    #[test]
    fn border_clique_inside_part_above_top_left() {
        let spec = LatticeSpec::free(4, 4).unwrap();
        let tpl = TemplateClique::block(2, 2).unwrap();
        let cliques = border_cliques(&spec, &tpl).unwrap();
        let hang = cliques.iter().find(|b| b.anchor == (-1, 0)).unwrap();
        assert_eq!(hang.inside, NodeSet::new(vec![(0, 0), (0, 1)]));
        assert_eq!(hang.outside_count(), 2);
    }

    #[test]
    fn border_cliques_rejected_on_torus() {
        let spec = torus(4, 4);
        let tpl = TemplateClique::block(2, 2).unwrap();
        assert!(border_cliques(&spec, &tpl).is_err());
    }

    proptest! {
        #[test]
        fn torus_translate_is_a_bijection(
            n in 1usize..9, m in 1usize..9,
            t in -20i32..20, u in -20i32..20,
            raw in proptest::collection::vec((0i32..9, 0i32..9), 0..12),
        ) {
            let spec = torus(n, m);
            let s = NodeSet::new(
                raw.into_iter()
                    .map(|(i, j)| (i % n as i32, j % m as i32))
                    .collect(),
            );
            let round = translate(&translate(&s, t, u, &spec), -t, -u, &spec);
            prop_assert_eq!(round, s);
        }
    }
}
