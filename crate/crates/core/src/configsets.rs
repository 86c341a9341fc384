//! Configuration sets: the translational-equivalence classes of on-subsets
//! of the template clique. Every subset of a maximal clique carries one
//! potential per class once stationarity is imposed.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::lattice::{NodeSet, TemplateClique};

/// Default cap on template size; enumeration is exponential in |template|.
pub const DEFAULT_TEMPLATE_CAP: usize = 12;

/// One translational-equivalence class of on-subsets of the template.
#[derive(Debug, Clone)]
pub struct ConfigClass {
    /// Dense 0-based id; class 0 is the empty configuration.
    pub id: usize,
    /// Bounding-box-anchored representative (empty set for class 0).
    pub canonical: NodeSet,
    /// All subsets of the template belonging to this class.
    pub members: Vec<NodeSet>,
}

impl ConfigClass {
    pub fn multiplicity(&self) -> usize {
        self.members.len()
    }

    pub fn size(&self) -> usize {
        self.canonical.len()
    }
}

/// The full catalog of configuration classes for one template.
#[derive(Debug, Clone)]
pub struct ConfigCatalog {
    template: TemplateClique,
    classes: Vec<ConfigClass>,
    index: HashMap<NodeSet, usize>,
    /// Class id for each subset of the template encoded as a bitmask over
    /// the template's nodes in row-major order.
    mask_class: Vec<u16>,
}

impl ConfigCatalog {
    pub fn build(template: TemplateClique) -> Result<Self> {
        Self::build_with_cap(template, DEFAULT_TEMPLATE_CAP)
    }

    pub fn build_with_cap(template: TemplateClique, cap: usize) -> Result<Self> {
        let size = template.size();
        if size > cap {
            return Err(Error::cap(format!(
                "template has {size} nodes, above the enumeration cap of {cap}"
            )));
        }
        let nodes = template.shape().nodes().to_vec();
        let total = 1usize << size;

        let mut by_canonical: HashMap<NodeSet, Vec<usize>> = HashMap::new();
        for mask in 0..total {
            let subset: NodeSet = nodes
                .iter()
                .enumerate()
                .filter(|(p, _)| mask >> p & 1 == 1)
                .map(|(_, &node)| node)
                .collect();
            by_canonical.entry(subset.anchored()).or_default().push(mask);
        }

        // Class 0 is the empty configuration; the rest are ordered by
        // (size, row-major lexicographic order of the canonical form) so
        // ids are reproducible across runs.
        let mut canonicals: Vec<NodeSet> = by_canonical.keys().cloned().collect();
        canonicals.sort_by_key(|c| (c.len(), c.clone()));
        debug_assert!(canonicals[0].is_empty());

        let mut classes = Vec::with_capacity(canonicals.len());
        let mut index = HashMap::with_capacity(canonicals.len());
        let mut mask_class = vec![0u16; total];
        for (id, canonical) in canonicals.into_iter().enumerate() {
            let masks = &by_canonical[&canonical];
            for &mask in masks {
                mask_class[mask] = id as u16;
            }
            let members = masks
                .iter()
                .map(|&mask| {
                    nodes
                        .iter()
                        .enumerate()
                        .filter(|(p, _)| mask >> p & 1 == 1)
                        .map(|(_, &node)| node)
                        .collect()
                })
                .collect();
            index.insert(canonical.clone(), id);
            classes.push(ConfigClass {
                id,
                canonical,
                members,
            });
        }

        debug_assert_eq!(
            classes.iter().map(|c| c.multiplicity()).sum::<usize>(),
            total
        );

        Ok(ConfigCatalog {
            template,
            classes,
            index,
            mask_class,
        })
    }

    pub fn template(&self) -> &TemplateClique {
        &self.template
    }

    pub fn classes(&self) -> &[ConfigClass] {
        &self.classes
    }

    pub fn class_count(&self) -> usize {
        self.classes.len()
    }

    /// Class id for an on-set given relative to the clique it sits in.
    pub fn classify(&self, on_set: &NodeSet) -> Result<usize> {
        self.index
            .get(&on_set.anchored())
            .copied()
            .ok_or_else(|| {
                Error::validation(format!(
                    "{:?} is not a subshape of the template", on_set.nodes()
                ))
            })
    }

    /// Class id for a subset of the template encoded as a bitmask over the
    /// template nodes in row-major order.
    #[inline]
    pub fn class_of_mask(&self, mask: usize) -> usize {
        self.mask_class[mask] as usize
    }

    /// Position of a template node in the bitmask encoding.
    pub fn template_bit(&self, node: (i32, i32)) -> Option<usize> {
        self.template.shape().nodes().binary_search(&node).ok()
    }
}
