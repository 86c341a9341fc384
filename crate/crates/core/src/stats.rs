//! Posterior diagnostics: image statistics, the pair-grouping probability
//! matrix, posterior-predictive simulation and beta posterior summaries.

use rand::Rng;

use crate::configsets::ConfigCatalog;
use crate::error::{Error, Result};
use crate::lattice::{Boundary, NodeSet};
use crate::likelihood::gibbs_sample;
use crate::model::{BinaryImage, EnergyEvaluator, ModelParams, PartitionState};
use crate::param::{phi_to_beta, BetaVector, ConversionTable};

/// A scalar image statistic.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum StatisticId {
    /// Number of ones.
    SumOnes,
    /// Vertically adjacent site pairs with equal values.
    EqualVerticalPairs,
    /// Horizontally adjacent site pairs with equal values.
    EqualHorizontalPairs,
    /// Maximal cliques whose exact configuration equals the given on-set
    /// (one fixed orientation, not its equivalence class).
    PatternCount(NodeSet),
}

impl StatisticId {
    pub fn label(&self) -> String {
        match self {
            StatisticId::SumOnes => "sum_ones".into(),
            StatisticId::EqualVerticalPairs => "equal_vertical".into(),
            StatisticId::EqualHorizontalPairs => "equal_horizontal".into(),
            StatisticId::PatternCount(p) => {
                let bits: Vec<String> =
                    p.iter().map(|&(i, j)| format!("{i}.{j}")).collect();
                format!("pattern_{}", if bits.is_empty() { "empty".into() } else { bits.join("_") })
            }
        }
    }
}

/// Evaluates one statistic. Adjacency counts wrap on the torus; pattern
/// counts run over the interior maximal cliques of the image's boundary
/// mode.
pub fn statistic(x: &BinaryImage, cat: &ConfigCatalog, id: &StatisticId) -> Result<i64> {
    let spec = x.spec;
    match id {
        StatisticId::SumOnes => Ok(x.ones() as i64),
        StatisticId::EqualVerticalPairs => {
            let rows = match spec.boundary {
                Boundary::Torus => spec.n,
                Boundary::Free => spec.n - 1,
            };
            let mut count = 0i64;
            for i in 0..rows {
                for j in 0..spec.m {
                    if x.at(i, j) == x.at((i + 1) % spec.n, j) {
                        count += 1;
                    }
                }
            }
            Ok(count)
        }
        StatisticId::EqualHorizontalPairs => {
            let cols = match spec.boundary {
                Boundary::Torus => spec.m,
                Boundary::Free => spec.m - 1,
            };
            let mut count = 0i64;
            for i in 0..spec.n {
                for j in 0..cols {
                    if x.at(i, j) == x.at(i, (j + 1) % spec.m) {
                        count += 1;
                    }
                }
            }
            Ok(count)
        }
        StatisticId::PatternCount(pattern) => {
            let tpl = cat.template();
            let mut mask = 0usize;
            for &node in pattern.iter() {
                match cat.template_bit(node) {
                    Some(bit) => mask |= 1 << bit,
                    None => {
                        return Err(Error::validation(format!(
                            "pattern node {node:?} is not in the template"
                        )))
                    }
                }
            }
            let anchors: Vec<(i32, i32)> = match spec.boundary {
                Boundary::Torus => (0..spec.n as i32)
                    .flat_map(|t| (0..spec.m as i32).map(move |u| (t, u)))
                    .collect(),
                Boundary::Free => (0..=(spec.n - tpl.height()) as i32)
                    .flat_map(|t| {
                        (0..=(spec.m - tpl.width()) as i32).map(move |u| (t, u))
                    })
                    .collect(),
            };
            let nodes = tpl.shape().nodes();
            let mut count = 0i64;
            for (t, u) in anchors {
                let mut got = 0usize;
                for (bit, &(di, dj)) in nodes.iter().enumerate() {
                    let (mut i, mut j) = (t + di, u + dj);
                    if spec.boundary == Boundary::Torus {
                        i = i.rem_euclid(spec.n as i32);
                        j = j.rem_euclid(spec.m as i32);
                    }
                    got |= (x.at(i as usize, j as usize) as usize) << bit;
                }
                if got == mask {
                    count += 1;
                }
            }
            Ok(count)
        }
    }
}

/// Symmetric matrix of empirical probabilities that two configuration
/// sets share a group.
#[derive(Debug, Clone)]
pub struct PairMatrix {
    pub size: usize,
    data: Vec<f64>,
}

impl PairMatrix {
    pub fn at(&self, a: usize, b: usize) -> f64 {
        self.data[a * self.size + b]
    }
}

/// Entry (a, b) is the fraction of states in which classes a and b share
/// a group.
pub fn pair_matrix(states: &[PartitionState]) -> Result<PairMatrix> {
    let first = states
        .first()
        .ok_or_else(|| Error::validation("pair matrix needs at least one state"))?;
    let size = first.class_count();
    let mut data = vec![0.0; size * size];
    for state in states {
        if state.class_count() != size {
            return Err(Error::validation("states use different catalogs"));
        }
        for a in 0..size {
            for b in 0..size {
                if state.group_of(a) == state.group_of(b) {
                    data[a * size + b] += 1.0;
                }
            }
        }
    }
    for v in &mut data {
        *v /= states.len() as f64;
    }
    Ok(PairMatrix { size, data })
}

/// Posterior-predictive sampling: for each retained state, simulate
/// images from the likelihood and evaluate the statistics. Returns one
/// sample vector per statistic.
#[allow(clippy::too_many_arguments)]
pub fn posterior_predictive(
    evaluator: &EnergyEvaluator,
    states: &[(PartitionState, Vec<f64>)],
    covariate_field: Option<&crate::model::CovariateField>,
    statistics: &[StatisticId],
    draws_per_state: usize,
    sweeps: usize,
    rng: &mut impl Rng,
) -> Result<Vec<Vec<f64>>> {
    let mut out = vec![Vec::new(); statistics.len()];
    for (z, theta) in states {
        let field = match covariate_field {
            Some(cov) => Some(cov.site_field(theta)?),
            None => None,
        };
        let params = ModelParams {
            phi: z.phi_of(),
            field,
        };
        for _ in 0..draws_per_state {
            let x = gibbs_sample(evaluator, &params, sweeps, rng);
            for (idx, id) in statistics.iter().enumerate() {
                out[idx].push(statistic(&x, evaluator.catalog(), id)? as f64);
            }
        }
    }
    Ok(out)
}

/// Per-class beta summary: mean and a central credibility interval.
#[derive(Debug, Clone)]
pub struct BetaSummary {
    pub class: usize,
    pub mean: f64,
    pub lower: f64,
    pub upper: f64,
}

/// Converts each state's phi vector with the torus conversion table and
/// summarises the per-class interaction samples with means and central
/// intervals (default mass 0.95).
pub fn beta_posterior(
    states: &[PartitionState],
    cat: &ConfigCatalog,
    table: &ConversionTable,
    mass: f64,
) -> Result<(Vec<BetaSummary>, Vec<BetaVector>)> {
    if states.is_empty() {
        return Err(Error::validation("beta posterior needs at least one state"));
    }
    if !(0.0 < mass && mass < 1.0) {
        return Err(Error::validation("interval mass must lie in (0,1)"));
    }
    let mut samples: Vec<Vec<f64>> = vec![Vec::with_capacity(states.len()); cat.class_count()];
    let mut vectors = Vec::with_capacity(states.len());
    for z in states {
        let beta = phi_to_beta(&z.phi_of(), cat, table)?;
        for (class, &value) in beta.values.iter().enumerate() {
            samples[class].push(value);
        }
        vectors.push(beta);
    }
    let tail = (1.0 - mass) / 2.0;
    let summaries = samples
        .iter()
        .enumerate()
        .map(|(class, sample)| {
            let mut sorted = sample.clone();
            sorted.sort_by(f64::total_cmp);
            let quantile = |q: f64| {
                let pos = q * (sorted.len() - 1) as f64;
                let lo = pos.floor() as usize;
                let hi = pos.ceil() as usize;
                let frac = pos - lo as f64;
                sorted[lo] * (1.0 - frac) + sorted[hi] * frac
            };
            BetaSummary {
                class,
                mean: sample.iter().sum::<f64>() / sample.len() as f64,
                lower: quantile(tail),
                upper: quantile(1.0 - tail),
            }
        })
        .collect();
    Ok((summaries, vectors))
}
