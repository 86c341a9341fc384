//! Model state and energy evaluation: the partition state z, binary
//! images, covariate fields, and an evaluator that sums clique potentials
//! over torus or free-boundary lattices (with border cliques averaged
//! over their outside completions).

use std::collections::HashMap;
use std::sync::Arc;

use crate::configsets::ConfigCatalog;
use crate::error::{Error, Result};
use crate::lattice::{Boundary, LatticeSpec};
use crate::param::PhiVector;

/// Maximum allowed drift of the sum-to-zero constraint.
pub const SUM_TOLERANCE: f64 = 1e-9;

/// A partition of the configuration classes into groups with shared
/// potential values. Groups are stored canonically (each group sorted,
/// groups ordered by smallest class id) so equal states serialize and
/// hash identically regardless of proposal history.
#[derive(Debug, Clone, PartialEq)]
pub struct PartitionState {
    groups: Vec<Vec<usize>>,
    values: Vec<f64>,
    class_to_group: Vec<usize>,
}

impl PartitionState {
    pub fn new(groups: Vec<Vec<usize>>, values: Vec<f64>, class_count: usize) -> Result<Self> {
        if groups.is_empty() || groups.len() != values.len() {
            return Err(Error::validation(format!(
                "partition has {} groups but {} values",
                groups.len(),
                values.len()
            )));
        }
        let mut class_to_group = vec![usize::MAX; class_count];
        for (g, group) in groups.iter().enumerate() {
            if group.is_empty() {
                return Err(Error::validation("empty groups are not allowed"));
            }
            for &class in group {
                if class >= class_count {
                    return Err(Error::validation(format!(
                        "class id {class} out of range (have {class_count} classes)"
                    )));
                }
                if class_to_group[class] != usize::MAX {
                    return Err(Error::validation(format!(
                        "class id {class} appears in more than one group"
                    )));
                }
                class_to_group[class] = g;
            }
        }
        if class_to_group.iter().any(|&g| g == usize::MAX) {
            return Err(Error::validation("groups do not cover all classes"));
        }
        let sum: f64 = values.iter().sum();
        if sum.abs() > SUM_TOLERANCE {
            return Err(Error::validation(format!(
                "group values must sum to zero (drift {sum:e})"
            )));
        }

        // canonical order: sort within groups, then groups by first member
        let mut paired: Vec<(Vec<usize>, f64)> = groups
            .into_iter()
            .zip(values)
            .map(|(mut g, v)| {
                g.sort_unstable();
                (g, v)
            })
            .collect();
        paired.sort_by_key(|(g, _)| g[0]);
        let (groups, values): (Vec<_>, Vec<_>) = paired.into_iter().unzip();
        for (g, group) in groups.iter().enumerate() {
            for &class in group {
                class_to_group[class] = g;
            }
        }
        Ok(PartitionState {
            groups,
            values,
            class_to_group,
        })
    }

    /// Default initial state: all classes in one group with value zero.
    pub fn single_group(class_count: usize) -> Self {
        PartitionState {
            groups: vec![(0..class_count).collect()],
            values: vec![0.0],
            class_to_group: vec![0; class_count],
        }
    }

    pub fn r(&self) -> usize {
        self.groups.len()
    }

    pub fn class_count(&self) -> usize {
        self.class_to_group.len()
    }

    pub fn groups(&self) -> &[Vec<usize>] {
        &self.groups
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn group_of(&self, class: usize) -> usize {
        self.class_to_group[class]
    }

    /// Expands the r group values to the full per-class phi vector.
    pub fn phi_of(&self) -> PhiVector {
        PhiVector {
            values: self
                .class_to_group
                .iter()
                .map(|&g| self.values[g])
                .collect(),
        }
    }
}

/// An n-by-m lattice of {0,1} values tagged with its boundary mode.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryImage {
    pub spec: LatticeSpec,
    data: Vec<u8>,
}

impl BinaryImage {
    pub fn zeros(spec: LatticeSpec) -> Self {
        BinaryImage {
            spec,
            data: vec![0; spec.sites()],
        }
    }

    pub fn from_data(spec: LatticeSpec, data: Vec<u8>) -> Result<Self> {
        if data.len() != spec.sites() {
            return Err(Error::validation(format!(
                "image data has {} entries for a {}x{} lattice",
                data.len(),
                spec.n,
                spec.m
            )));
        }
        if data.iter().any(|&v| v > 1) {
            return Err(Error::validation("image values must be 0 or 1"));
        }
        Ok(BinaryImage { spec, data })
    }

    #[inline]
    pub fn get(&self, site: usize) -> u8 {
        self.data[site]
    }

    #[inline]
    pub fn set(&mut self, site: usize, value: u8) {
        self.data[site] = value;
    }

    #[inline]
    pub fn flip(&mut self, site: usize) {
        self.data[site] ^= 1;
    }

    pub fn at(&self, i: usize, j: usize) -> u8 {
        self.data[self.spec.index(i, j)]
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn ones(&self) -> usize {
        self.data.iter().map(|&v| v as usize).sum()
    }

    /// Torus translation of the whole image.
    pub fn translated(&self, t: usize, u: usize) -> BinaryImage {
        let (n, m) = (self.spec.n, self.spec.m);
        let mut data = vec![0; n * m];
        for i in 0..n {
            for j in 0..m {
                data[((i + t) % n) * m + (j + u) % m] = self.data[i * m + j];
            }
        }
        BinaryImage {
            spec: self.spec,
            data,
        }
    }
}

/// Per-node covariate vectors y[i,j,k], k = 0..K.
#[derive(Debug, Clone)]
pub struct CovariateField {
    pub n: usize,
    pub m: usize,
    pub k: usize,
    data: Vec<f64>, // site-major: data[site * k + c]
}

impl CovariateField {
    pub fn new(n: usize, m: usize, k: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != n * m * k {
            return Err(Error::validation(format!(
                "covariate data has {} entries, expected {}",
                data.len(),
                n * m * k
            )));
        }
        Ok(CovariateField { n, m, k, data })
    }

    pub fn at(&self, site: usize, covariate: usize) -> f64 {
        self.data[site * self.k + covariate]
    }

    /// Per-site linear term sum_k theta_k * y[site,k].
    pub fn site_field(&self, theta: &[f64]) -> Result<Vec<f64>> {
        if theta.len() != self.k {
            return Err(Error::validation(format!(
                "theta has {} entries for {} covariates",
                theta.len(),
                self.k
            )));
        }
        Ok((0..self.n * self.m)
            .map(|s| {
                (0..self.k)
                    .map(|c| theta[c] * self.data[s * self.k + c])
                    .sum()
            })
            .collect())
    }
}

/// Everything the energy needs besides the image: per-class potentials
/// and the optional per-site covariate term.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub phi: PhiVector,
    pub field: Option<Vec<f64>>,
}

impl ModelParams {
    pub fn plain(phi: PhiVector) -> Self {
        ModelParams { phi, field: None }
    }

    pub fn with_field(phi: PhiVector, field: Vec<f64>) -> Self {
        ModelParams {
            phi,
            field: Some(field),
        }
    }
}

/// Border clique lookup: the inside sites plus, for every inside
/// configuration, the class weights obtained by averaging the full-clique
/// class over all completions of the outside nodes.
#[derive(Debug, Clone)]
struct BorderTable {
    sites: Vec<u32>,
    weights: Vec<Vec<(u16, f64)>>, // indexed by inside bitmask
}

/// Precomputed clique geometry for fast energy sums, single-site deltas
/// and per-class sufficient statistics. Immutable after construction and
/// safe to share across threads.
#[derive(Debug, Clone)]
pub struct EnergyEvaluator {
    spec: LatticeSpec,
    catalog: Arc<ConfigCatalog>,
    /// Interior cliques: template-ordered site indices per clique.
    cliques: Vec<Vec<u32>>,
    /// For each site, (clique index, bit position) memberships.
    site_cliques: Vec<Vec<(u32, u8)>>,
    border: Vec<BorderTable>,
    site_border: Vec<Vec<(u32, u8)>>,
    /// Sites that participate in the model (all of them unless masked).
    active_sites: Vec<u32>,
}

impl EnergyEvaluator {
    pub fn new(spec: LatticeSpec, catalog: Arc<ConfigCatalog>) -> Result<Self> {
        Self::build(spec, catalog, None)
    }

    /// Restricts the model to the observed nodes of an irregular region:
    /// cliques fully inside the observed set are interior; cliques that
    /// partially overlap it are treated as border cliques with the
    /// unobserved and out-of-lattice nodes averaged over.
    pub fn with_mask(
        spec: LatticeSpec,
        catalog: Arc<ConfigCatalog>,
        mask: &[bool],
    ) -> Result<Self> {
        if mask.len() != spec.sites() {
            return Err(Error::validation(format!(
                "mask has {} entries for a {}x{} lattice",
                mask.len(),
                spec.n,
                spec.m
            )));
        }
        if spec.boundary != Boundary::Free {
            return Err(Error::validation(
                "node masks are supported for free-boundary lattices only",
            ));
        }
        Self::build(spec, catalog, Some(mask))
    }

    fn build(spec: LatticeSpec, catalog: Arc<ConfigCatalog>, mask: Option<&[bool]>) -> Result<Self> {
        let tpl = catalog.template();
        if tpl.height() > spec.n || tpl.width() > spec.m {
            return Err(Error::validation(format!(
                "template ({}x{}) larger than lattice ({}x{})",
                tpl.height(),
                tpl.width(),
                spec.n,
                spec.m
            )));
        }
        let observed = |i: i32, j: i32| -> bool {
            spec.contains(i, j)
                && mask.map_or(true, |m| m[spec.index(i as usize, j as usize)])
        };
        let tpl_nodes = tpl.shape().nodes().to_vec();
        let bit_of: HashMap<(i32, i32), usize> = tpl_nodes
            .iter()
            .enumerate()
            .map(|(p, &node)| (node, p))
            .collect();

        let mut cliques: Vec<Vec<u32>> = Vec::new();
        let mut border: Vec<BorderTable> = Vec::new();

        match spec.boundary {
            Boundary::Torus => {
                let (n, m) = (spec.n as i32, spec.m as i32);
                for t in 0..n {
                    for u in 0..m {
                        let sites = tpl_nodes
                            .iter()
                            .map(|&(i, j)| {
                                let r = (i + t).rem_euclid(n) as usize;
                                let c = (j + u).rem_euclid(m) as usize;
                                spec.index(r, c) as u32
                            })
                            .collect();
                        cliques.push(sites);
                    }
                }
            }
            Boundary::Free => {
                // anchors over the embedding super-lattice; split translates
                // into interior / border / excluded by observed coverage
                for t in -(tpl.height() as i32 - 1)..=(spec.n as i32 - 1) {
                    for u in -(tpl.width() as i32 - 1)..=(spec.m as i32 - 1) {
                        let mut inside: Vec<(u32, usize)> = Vec::new(); // (site, template bit)
                        let mut outside_bits: Vec<usize> = Vec::new();
                        for &(i, j) in &tpl_nodes {
                            let (r, c) = (i + t, j + u);
                            let bit = bit_of[&(i, j)];
                            if observed(r, c) {
                                inside.push((spec.index(r as usize, c as usize) as u32, bit));
                            } else {
                                outside_bits.push(bit);
                            }
                        }
                        if inside.is_empty() {
                            continue;
                        }
                        if outside_bits.is_empty() {
                            let mut sites = vec![0u32; tpl_nodes.len()];
                            for &(site, bit) in &inside {
                                sites[bit] = site;
                            }
                            cliques.push(sites);
                        } else {
                            border.push(build_border_table(&catalog, &inside, &outside_bits));
                        }
                    }
                }
            }
        }

        let mut site_cliques = vec![Vec::new(); spec.sites()];
        for (ci, sites) in cliques.iter().enumerate() {
            for (bit, &site) in sites.iter().enumerate() {
                site_cliques[site as usize].push((ci as u32, bit as u8));
            }
        }
        let mut site_border = vec![Vec::new(); spec.sites()];
        for (bi, table) in border.iter().enumerate() {
            for (bit, &site) in table.sites.iter().enumerate() {
                site_border[site as usize].push((bi as u32, bit as u8));
            }
        }
        let active_sites = (0..spec.sites() as u32)
            .filter(|&s| mask.map_or(true, |m| m[s as usize]))
            .collect();

        Ok(EnergyEvaluator {
            spec,
            catalog,
            cliques,
            site_cliques,
            border,
            site_border,
            active_sites,
        })
    }

    pub fn spec(&self) -> &LatticeSpec {
        &self.spec
    }

    pub fn catalog(&self) -> &Arc<ConfigCatalog> {
        &self.catalog
    }

    pub fn interior_clique_count(&self) -> usize {
        self.cliques.len()
    }

    pub fn border_clique_count(&self) -> usize {
        self.border.len()
    }

    /// Sites that participate in the model (everything unless masked).
    pub fn active_sites(&self) -> &[u32] {
        &self.active_sites
    }

    fn check_image(&self, x: &BinaryImage) -> Result<()> {
        if x.spec.n != self.spec.n || x.spec.m != self.spec.m {
            return Err(Error::validation(format!(
                "image is {}x{} but the model lattice is {}x{}",
                x.spec.n, x.spec.m, self.spec.n, self.spec.m
            )));
        }
        Ok(())
    }

    fn check_params(&self, params: &ModelParams) -> Result<()> {
        if params.phi.len() != self.catalog.class_count() {
            return Err(Error::validation(format!(
                "phi vector has {} entries for {} classes",
                params.phi.len(),
                self.catalog.class_count()
            )));
        }
        if let Some(field) = &params.field {
            if field.len() != self.spec.sites() {
                return Err(Error::validation(format!(
                    "covariate field has {} entries for {} sites",
                    field.len(),
                    self.spec.sites()
                )));
            }
        }
        Ok(())
    }

    #[inline]
    fn clique_mask(&self, x: &BinaryImage, sites: &[u32]) -> usize {
        let mut mask = 0usize;
        for (bit, &site) in sites.iter().enumerate() {
            mask |= (x.get(site as usize) as usize) << bit;
        }
        mask
    }

    #[inline]
    fn border_mask(&self, x: &BinaryImage, table: &BorderTable) -> usize {
        let mut mask = 0usize;
        for (bit, &site) in table.sites.iter().enumerate() {
            mask |= (x.get(site as usize) as usize) << bit;
        }
        mask
    }

    /// Total energy U(x): interior clique potentials, border potentials
    /// (free boundary) and the covariate linear term.
    pub fn energy(&self, x: &BinaryImage, params: &ModelParams) -> Result<f64> {
        self.check_image(x)?;
        self.check_params(params)?;
        Ok(self.energy_unchecked(x, params))
    }

    pub fn energy_unchecked(&self, x: &BinaryImage, params: &ModelParams) -> f64 {
        let phi = &params.phi.values;
        let mut total = 0.0;
        for sites in &self.cliques {
            total += phi[self.catalog.class_of_mask(self.clique_mask(x, sites))];
        }
        for table in &self.border {
            let mask = self.border_mask(x, table);
            for &(class, w) in &table.weights[mask] {
                total += w * phi[class as usize];
            }
        }
        if let Some(field) = &params.field {
            for &site in &self.active_sites {
                if x.get(site as usize) == 1 {
                    total += field[site as usize];
                }
            }
        }
        total
    }

    /// U(x with `site` flipped) - U(x), touching only the cliques that
    /// contain the site.
    pub fn delta_flip(&self, x: &BinaryImage, params: &ModelParams, site: usize) -> f64 {
        let phi = &params.phi.values;
        let mut delta = 0.0;
        for &(ci, bit) in &self.site_cliques[site] {
            let mask = self.clique_mask(x, &self.cliques[ci as usize]);
            delta += phi[self.catalog.class_of_mask(mask ^ (1 << bit))]
                - phi[self.catalog.class_of_mask(mask)];
        }
        for &(bi, bit) in &self.site_border[site] {
            let table = &self.border[bi as usize];
            let mask = self.border_mask(x, table);
            for &(class, w) in &table.weights[mask ^ (1 << bit)] {
                delta += w * phi[class as usize];
            }
            for &(class, w) in &table.weights[mask] {
                delta -= w * phi[class as usize];
            }
        }
        if let Some(field) = &params.field {
            delta += if x.get(site) == 1 {
                -field[site]
            } else {
                field[site]
            };
        }
        delta
    }

    /// Per-class sufficient statistics: U(x) = weights(x) . phi plus the
    /// covariate term. Interior cliques contribute unit counts, border
    /// cliques their completion-averaged fractions.
    pub fn class_weights(&self, x: &BinaryImage) -> Vec<f64> {
        let mut weights = vec![0.0; self.catalog.class_count()];
        for sites in &self.cliques {
            weights[self.catalog.class_of_mask(self.clique_mask(x, sites))] += 1.0;
        }
        for table in &self.border {
            let mask = self.border_mask(x, table);
            for &(class, w) in &table.weights[mask] {
                weights[class as usize] += w;
            }
        }
        weights
    }

    /// Covariate part of U(x) for a given per-site field.
    pub fn field_sum(&self, x: &BinaryImage, field: &[f64]) -> f64 {
        self.active_sites
            .iter()
            .filter(|&&s| x.get(s as usize) == 1)
            .map(|&s| field[s as usize])
            .sum()
    }
}

fn build_border_table(
    catalog: &ConfigCatalog,
    inside: &[(u32, usize)],
    outside_bits: &[usize],
) -> BorderTable {
    let inside_len = inside.len();
    let share = 1.0 / (1usize << outside_bits.len()) as f64;
    let mut weights = Vec::with_capacity(1 << inside_len);
    for inside_mask in 0..(1usize << inside_len) {
        let mut base = 0usize;
        for (pos, &(_, bit)) in inside.iter().enumerate() {
            if inside_mask >> pos & 1 == 1 {
                base |= 1 << bit;
            }
        }
        let mut acc: HashMap<u16, f64> = HashMap::new();
        for completion in 0..(1usize << outside_bits.len()) {
            let mut full = base;
            for (pos, &bit) in outside_bits.iter().enumerate() {
                if completion >> pos & 1 == 1 {
                    full |= 1 << bit;
                }
            }
            *acc.entry(catalog.class_of_mask(full) as u16).or_insert(0.0) += share;
        }
        let mut entry: Vec<(u16, f64)> = acc.into_iter().collect();
        entry.sort_unstable_by_key(|&(class, _)| class);
        weights.push(entry);
    }
    BorderTable {
        sites: inside.iter().map(|&(site, _)| site).collect(),
        weights,
    }
}

/// Energy of an image under a partition state. `field` is the per-site
/// covariate term when covariates are present.
pub fn energy(
    evaluator: &EnergyEvaluator,
    x: &BinaryImage,
    z: &PartitionState,
    field: Option<&[f64]>,
) -> Result<f64> {
    let params = ModelParams {
        phi: z.phi_of(),
        field: field.map(|f| f.to_vec()),
    };
    evaluator.energy(x, &params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lattice::{border_cliques, NodeSet, TemplateClique};
    use crate::param::ising_phi;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn catalog(k: usize, l: usize) -> Arc<ConfigCatalog> {
        Arc::new(ConfigCatalog::build(TemplateClique::block(k, l).unwrap()).unwrap())
    }

    fn random_image(spec: LatticeSpec, rng: &mut impl Rng) -> BinaryImage {
        let data = (0..spec.sites()).map(|_| rng.random_range(0..=1)).collect();
        BinaryImage::from_data(spec, data).unwrap()
    }

    #[test]
    fn partition_state_validation() {
        assert!(PartitionState::new(vec![vec![0, 1], vec![2]], vec![1.0, -1.0], 3).is_ok());
        // group values must sum to zero
        assert!(PartitionState::new(vec![vec![0, 1], vec![2]], vec![1.0, -0.5], 3).is_err());
        // no empty groups
        assert!(PartitionState::new(vec![vec![0, 1, 2], vec![]], vec![0.0, 0.0], 3).is_err());
        // must cover all classes
        assert!(PartitionState::new(vec![vec![0, 1]], vec![0.0], 3).is_err());
        // no overlaps
        assert!(PartitionState::new(vec![vec![0, 1], vec![1, 2]], vec![0.5, -0.5], 3).is_err());
    }

    #[test]
    fn partition_state_canonical_order() {
        let a = PartitionState::new(vec![vec![2], vec![1, 0]], vec![0.25, -0.25], 3).unwrap();
        let b = PartitionState::new(vec![vec![0, 1], vec![2]], vec![-0.25, 0.25], 3).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.groups(), &[vec![0, 1], vec![2]]);
    }

    #[test]
    fn phi_of_expands_group_values() {
        let cat = catalog(2, 2);
        // single group: value forced to zero
        let z = PartitionState::single_group(cat.class_count());
        assert!(z.phi_of().values.iter().all(|&v| v == 0.0));

        // the Ising grouping with eta = omega reproduces ising_phi
        let omega = 0.4;
        let groups = vec![vec![0, 10], vec![1, 2, 3, 6, 7, 8, 9], vec![4, 5]];
        let z = PartitionState::new(groups, vec![omega, 0.0, -omega], 11).unwrap();
        assert_eq!(z.phi_of(), ising_phi(omega, &cat).unwrap());

        let z = PartitionState::new(vec![vec![0, 2, 4], vec![1, 3]], vec![0.7, -0.7], 5).unwrap();
        let phi = z.phi_of();
        assert_eq!(phi.values, vec![0.7, -0.7, 0.7, -0.7, 0.7]);
    }

    #[test]
    fn uniform_images_on_torus() {
        let cat = catalog(2, 2);
        let spec = LatticeSpec::torus(4, 5).unwrap();
        let ev = EnergyEvaluator::new(spec, Arc::clone(&cat)).unwrap();
        let phi = ising_phi(0.4, &cat).unwrap();
        let params = ModelParams::plain(phi.clone());

        let zeros = BinaryImage::zeros(spec);
        let got = ev.energy(&zeros, &params).unwrap();
        assert!((got - 20.0 * phi.values[0]).abs() < 1e-12);

        let ones = BinaryImage::from_data(spec, vec![1; 20]).unwrap();
        let got = ev.energy(&ones, &params).unwrap();
        assert!((got - 20.0 * phi.values[10]).abs() < 1e-12);
    }

    /// Naive re-derivation: walk every anchor, collect the on-nodes in the
    /// clique's own frame and classify them from scratch.
    fn naive_energy(
        spec: &LatticeSpec,
        cat: &ConfigCatalog,
        x: &BinaryImage,
        phi: &[f64],
    ) -> f64 {
        let tpl = cat.template();
        let mut total = 0.0;
        let anchors: Vec<(i32, i32)> = match spec.boundary {
            Boundary::Torus => (0..spec.n as i32)
                .flat_map(|t| (0..spec.m as i32).map(move |u| (t, u)))
                .collect(),
            Boundary::Free => (0..=(spec.n - tpl.height()) as i32)
                .flat_map(|t| (0..=(spec.m - tpl.width()) as i32).map(move |u| (t, u)))
                .collect(),
        };
        for (t, u) in anchors {
            let mut on = Vec::new();
            for &(ti, tj) in tpl.shape().nodes() {
                let (mut i, mut j) = (t + ti, u + tj);
                if spec.boundary == Boundary::Torus {
                    i = i.rem_euclid(spec.n as i32);
                    j = j.rem_euclid(spec.m as i32);
                }
                if x.at(i as usize, j as usize) == 1 {
                    on.push((ti, tj));
                }
            }
            total += phi[cat.classify(&NodeSet::new(on)).unwrap()];
        }
        total
    }

    #[test]
    fn energy_matches_naive_oracle_on_torus() {
        let cat = catalog(2, 2);
        let spec = LatticeSpec::torus(4, 4).unwrap();
        let ev = EnergyEvaluator::new(spec, Arc::clone(&cat)).unwrap();
        let phi = ising_phi(0.4, &cat).unwrap();
        let params = ModelParams::plain(phi.clone());
        let mut rng = ChaCha8Rng::seed_from_u64(11);

        // single 2x2 checkerboard block in an otherwise empty image
        let mut x = BinaryImage::zeros(spec);
        x.set(spec.index(1, 1), 1);
        x.set(spec.index(2, 2), 1);
        let want = naive_energy(&spec, &cat, &x, &phi.values);
        assert!((ev.energy(&x, &params).unwrap() - want).abs() < 1e-12);

        for _ in 0..25 {
            let x = random_image(spec, &mut rng);
            let want = naive_energy(&spec, &cat, &x, &phi.values);
            assert!((ev.energy(&x, &params).unwrap() - want).abs() < 1e-10);
        }
    }

    /// Free-boundary oracle straight from the border-clique definition:
    /// average the full-clique potential over outside completions.
    fn naive_free_energy(
        spec: &LatticeSpec,
        cat: &ConfigCatalog,
        x: &BinaryImage,
        phi: &[f64],
    ) -> f64 {
        let mut total = naive_energy(spec, cat, x, phi);
        for bc in border_cliques(spec, cat.template()).unwrap() {
            let on_inside: Vec<(i32, i32)> = bc
                .inside
                .iter()
                .filter(|&&(i, j)| x.at(i as usize, j as usize) == 1)
                .map(|&(i, j)| (i - bc.anchor.0, j - bc.anchor.1))
                .collect();
            let outside: Vec<(i32, i32)> = bc
                .outside
                .iter()
                .map(|&(i, j)| (i - bc.anchor.0, j - bc.anchor.1))
                .collect();
            let completions = 1usize << outside.len();
            let mut avg = 0.0;
            for mask in 0..completions {
                let mut on = on_inside.clone();
                for (p, &node) in outside.iter().enumerate() {
                    if mask >> p & 1 == 1 {
                        on.push(node);
                    }
                }
                avg += phi[cat.classify(&NodeSet::new(on)).unwrap()];
            }
            total += avg / completions as f64;
        }
        total
    }

    #[test]
    fn free_boundary_energy_matches_definition() {
        let cat = catalog(2, 2);
        let spec = LatticeSpec::free(4, 5).unwrap();
        let ev = EnergyEvaluator::new(spec, Arc::clone(&cat)).unwrap();
        assert_eq!(ev.interior_clique_count(), 12);
        assert_eq!(ev.border_clique_count(), 18);
        let phi = ising_phi(0.3, &cat).unwrap();
        let params = ModelParams::plain(phi.clone());
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let x = random_image(spec, &mut rng);
            let want = naive_free_energy(&spec, &cat, &x, &phi.values);
            assert!((ev.energy(&x, &params).unwrap() - want).abs() < 1e-10);
        }
    }

    #[test]
    fn delta_flip_on_empty_image() {
        let cat = catalog(2, 2);
        let spec = LatticeSpec::torus(4, 4).unwrap();
        let ev = EnergyEvaluator::new(spec, Arc::clone(&cat)).unwrap();
        let phi = ising_phi(0.4, &cat).unwrap();
        let params = ModelParams::plain(phi.clone());
        let x = BinaryImage::zeros(spec);
        let want = 4.0 * (phi.values[1] - phi.values[0]);
        let got = ev.delta_flip(&x, &params, spec.index(2, 2));
        assert!((got - want).abs() < 1e-12);
    }

    #[test]
    fn delta_flip_matches_full_recompute() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cat = catalog(2, 2);
        for spec in [
            LatticeSpec::torus(4, 5).unwrap(),
            LatticeSpec::free(5, 4).unwrap(),
        ] {
            let ev = EnergyEvaluator::new(spec, Arc::clone(&cat)).unwrap();
            let phi = PhiVector {
                values: (0..cat.class_count())
                    .map(|_| rng.random_range(-1.0..1.0))
                    .collect(),
            };
            let field: Vec<f64> = (0..spec.sites())
                .map(|_| rng.random_range(-0.5..0.5))
                .collect();
            let params = ModelParams::with_field(phi, field);
            for _ in 0..250 {
                let mut x = random_image(spec, &mut rng);
                let site = rng.random_range(0..spec.sites());
                let before = ev.energy(&x, &params).unwrap();
                let delta = ev.delta_flip(&x, &params, site);
                x.flip(site);
                let after = ev.energy(&x, &params).unwrap();
                assert!((delta - (after - before)).abs() < 1e-10);
                // involution: flipping back sums to zero
                let back = ev.delta_flip(&x, &params, site);
                assert!((delta + back).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn energy_translation_invariant_on_torus() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let cat = catalog(2, 2);
        let spec = LatticeSpec::torus(5, 4).unwrap();
        let ev = EnergyEvaluator::new(spec, Arc::clone(&cat)).unwrap();
        let phi = PhiVector {
            values: (0..cat.class_count())
                .map(|_| rng.random_range(-1.0..1.0))
                .collect(),
        };
        let params = ModelParams::plain(phi);
        for _ in 0..10 {
            let x = random_image(spec, &mut rng);
            let base = ev.energy(&x, &params).unwrap();
            for (t, u) in [(1, 0), (0, 1), (3, 2)] {
                let shifted = x.translated(t, u);
                assert!((ev.energy(&shifted, &params).unwrap() - base).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn interior_on_sets_shift_energy_by_a_constant_under_border_terms() {
        // an on-set far from every edge contributes the same border energy
        // as the empty image, so border terms add a constant
        let cat = catalog(2, 2);
        let spec = LatticeSpec::free(8, 8).unwrap();
        let ev_free = EnergyEvaluator::new(spec, Arc::clone(&cat)).unwrap();
        let phi = ising_phi(0.4, &cat).unwrap();
        let params = ModelParams::plain(phi.clone());

        let interior_only = |x: &BinaryImage| {
            let mut total = 0.0;
            for sites in &ev_free.cliques {
                total += phi.values[ev_free
                    .catalog
                    .class_of_mask(ev_free.clique_mask(x, sites))];
            }
            total
        };

        let mut a = BinaryImage::zeros(spec);
        a.set(spec.index(3, 3), 1);
        a.set(spec.index(3, 4), 1);
        let mut b = BinaryImage::zeros(spec);
        b.set(spec.index(4, 4), 1);

        let with_a = ev_free.energy(&a, &params).unwrap() - interior_only(&a);
        let with_b = ev_free.energy(&b, &params).unwrap() - interior_only(&b);
        assert!((with_a - with_b).abs() < 1e-12);
    }

    #[test]
    fn masked_region_counts_cliques_correctly() {
        let cat = catalog(2, 2);
        let spec = LatticeSpec::free(4, 4).unwrap();
        // mask off the last column: observed region is 4x3
        let mask: Vec<bool> = (0..16).map(|s| s % 4 != 3).collect();
        let ev = EnergyEvaluator::with_mask(spec, Arc::clone(&cat), &mask).unwrap();
        assert_eq!(ev.active_sites().len(), 12);
        // interior cliques of a 4x3 observed block
        assert_eq!(ev.interior_clique_count(), 6);
        // border count matches a 4x3 free lattice
        let small = LatticeSpec::free(4, 3).unwrap();
        let small_ev = EnergyEvaluator::new(small, Arc::clone(&cat)).unwrap();
        assert_eq!(ev.border_clique_count(), small_ev.border_clique_count());

        // energies agree with the 4x3 lattice when the data agree
        let phi = ising_phi(0.25, &cat).unwrap();
        let params = ModelParams::plain(phi);
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        for _ in 0..10 {
            let small_x = random_image(small, &mut rng);
            let mut big = BinaryImage::zeros(spec);
            for i in 0..4 {
                for j in 0..3 {
                    big.set(spec.index(i, j), small_x.at(i, j));
                }
            }
            let a = ev.energy(&big, &params).unwrap();
            let b = small_ev.energy(&small_x, &params).unwrap();
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn dimension_mismatches_are_rejected() {
        let cat = catalog(2, 2);
        let spec = LatticeSpec::torus(4, 4).unwrap();
        let ev = EnergyEvaluator::new(spec, Arc::clone(&cat)).unwrap();
        let other = BinaryImage::zeros(LatticeSpec::torus(5, 4).unwrap());
        let params = ModelParams::plain(ising_phi(0.1, &cat).unwrap());
        assert!(ev.energy(&other, &params).is_err());
        let bad = ModelParams::plain(PhiVector { values: vec![0.0; 3] });
        assert!(ev.energy(&BinaryImage::zeros(spec), &bad).is_err());
    }
}
