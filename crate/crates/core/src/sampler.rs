//! Reversible-jump MCMC over partition states: a sum-preserving value
//! random walk, a configuration-set move between groups, split/merge
//! jumps that change the number of groups, and a covariate random walk.
//! One iteration applies one proposal of each type in a fixed order.
//!
//! All randomness is drawn from counter-based streams keyed by
//! (step, purpose, tree path), so runs are reproducible from the seed and
//! the depth-1 proposal tree is byte-identical to the sequential driver.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::likelihood::{log_lik_ratio, DataContext, LikelihoodEngine};
use crate::model::{BinaryImage, CovariateField, EnergyEvaluator, ModelParams, PartitionState};
use crate::prior::{log_prior_values, state_prior_r_distribution, PartitionPrior};

/// Algorithmic tuning parameters of the sampler.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SamplerConfig {
    /// Proposal standard deviation for value and split moves.
    pub sigma: f64,
    /// Covariate random-walk standard deviation.
    pub covariate_step: f64,
    /// Standard deviation of the Gaussian prior on covariate parameters.
    pub covariate_prior_sd: f64,
    pub iterations: u64,
    /// Record every `thinning`-th iteration.
    pub thinning: u64,
    pub seed: u64,
    /// Proposal-tree depth; 1 runs the plain sequential chain.
    pub tree_depth: usize,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            sigma: 0.3,
            covariate_step: 0.1,
            covariate_prior_sd: 10.0,
            iterations: 1000,
            thinning: 1,
            seed: 0,
            tree_depth: 1,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma > 0.0) {
            return Err(Error::validation("sigma must be positive"));
        }
        if self.thinning == 0 {
            return Err(Error::validation("thinning must be >= 1"));
        }
        if self.tree_depth == 0 || self.tree_depth > 8 {
            return Err(Error::validation("tree depth must lie in 1..=8"));
        }
        Ok(())
    }
}

/// The kernel types applied within one iteration, in order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum KernelKind {
    Value,
    Move,
    SplitMerge,
    Covariate,
}

impl KernelKind {
    pub fn name(&self) -> &'static str {
        match self {
            KernelKind::Value => "value",
            KernelKind::Move => "move",
            KernelKind::SplitMerge => "split_merge",
            KernelKind::Covariate => "covariate",
        }
    }
}

#[derive(Clone, Copy)]
enum Purpose {
    Proposal = 0,
    Engine = 1,
    Accept = 2,
}

fn stream_rng(seed: u64, step: u64, purpose: Purpose, path: u8) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((step << 10) | ((purpose as u64) << 8) | path as u64);
    rng
}

fn normal_logpdf(x: f64, sd: f64) -> f64 {
    -0.5 * (2.0 * std::f64::consts::PI * sd * sd).ln() - x * x / (2.0 * sd * sd)
}

/// Sum-preserving random walk: add a Gaussian change to one uniformly
/// chosen group value, then subtract the change divided by r from every
/// group. Symmetric, so the log proposal ratio is zero.
pub fn propose_value_walk(
    z: &PartitionState,
    sigma: f64,
    rng: &mut impl Rng,
) -> Result<PartitionState> {
    let r = z.r();
    let eps: f64 = Normal::new(0.0, sigma).unwrap().sample(rng);
    let i = rng.random_range(0..r);
    let shift = eps / r as f64;
    // at r = 1 the change cancels exactly: eps - eps/1 == 0
    let values: Vec<f64> = z
        .values()
        .iter()
        .enumerate()
        .map(|(j, &v)| if j == i { v + (eps - shift) } else { v - shift })
        .collect();
    PartitionState::new(z.groups().to_vec(), values, z.class_count())
}

/// Ordered-pair weights for the move kernel: exp(-(phi_i - phi_j)^2) when
/// i != j and group i holds at least two configuration sets.
fn move_pair_weights(z: &PartitionState) -> (Vec<(usize, usize, f64)>, f64) {
    let mut entries = Vec::new();
    let mut total = 0.0;
    for (i, group) in z.groups().iter().enumerate() {
        if group.len() < 2 {
            continue;
        }
        for j in 0..z.r() {
            if j == i {
                continue;
            }
            let d = z.values()[i] - z.values()[j];
            let w = (-d * d).exp();
            entries.push((i, j, w));
            total += w;
        }
    }
    (entries, total)
}

/// Ordered-pair weights for the merge direction: group i must be a
/// singleton group.
fn merge_pair_weights(z: &PartitionState) -> (Vec<(usize, usize, f64)>, f64) {
    let mut entries = Vec::new();
    let mut total = 0.0;
    for (i, group) in z.groups().iter().enumerate() {
        if group.len() != 1 {
            continue;
        }
        for j in 0..z.r() {
            if j == i {
                continue;
            }
            let d = z.values()[i] - z.values()[j];
            let w = (-d * d).exp();
            entries.push((i, j, w));
            total += w;
        }
    }
    (entries, total)
}

fn sample_pair(
    entries: &[(usize, usize, f64)],
    total: f64,
    rng: &mut impl Rng,
) -> (usize, usize) {
    let mut target = rng.random::<f64>() * total;
    for &(i, j, w) in entries {
        target -= w;
        if target <= 0.0 {
            return (i, j);
        }
    }
    let &(i, j, _) = entries.last().unwrap();
    (i, j)
}

fn pair_prob(entries: &[(usize, usize, f64)], total: f64, i: usize, j: usize) -> f64 {
    entries
        .iter()
        .find(|&&(a, b, _)| a == i && b == j)
        .map(|&(_, _, w)| w / total)
        .unwrap_or(0.0)
}

/// Outcome of the move kernel.
#[derive(Debug, Clone)]
pub struct MoveProposal {
    pub z: PartitionState,
    pub log_proposal_ratio: f64,
    /// The configuration set that changed group.
    pub class: usize,
    /// Donor and target group indices in the old state.
    pub from_group: usize,
    pub to_group: usize,
}

/// Moves one configuration set from a donor group to another group,
/// leaving the values unchanged. Returns `None` when no group holds at
/// least two configuration sets (the kernel is a designated no-op,
/// counted as rejected).
pub fn propose_move(z: &PartitionState, rng: &mut impl Rng) -> Result<Option<MoveProposal>> {
    if z.r() < 2 {
        return Ok(None);
    }
    let (entries, total) = move_pair_weights(z);
    if entries.is_empty() {
        return Ok(None);
    }
    let (i, j) = sample_pair(&entries, total, rng);
    let donor = &z.groups()[i];
    let class = donor[rng.random_range(0..donor.len())];

    let mut groups = z.groups().to_vec();
    groups[i].retain(|&c| c != class);
    groups[j].push(class);
    let z_new = PartitionState::new(groups, z.values().to_vec(), z.class_count())?;

    // reverse path: move the class back from its enlarged group
    let a = z_new.group_of(class);
    let b = z_new.group_of(donor.iter().copied().find(|&c| c != class).unwrap());
    let (rev_entries, rev_total) = move_pair_weights(&z_new);
    let fwd = pair_prob(&entries, total, i, j) / donor.len() as f64;
    let rev = pair_prob(&rev_entries, rev_total, a, b) / z_new.groups()[a].len() as f64;
    Ok(Some(MoveProposal {
        z: z_new,
        log_proposal_ratio: rev.ln() - fwd.ln(),
        class,
        from_group: i,
        to_group: j,
    }))
}

/// Probability of proposing the dimension-increasing direction. Increase
/// is impossible when r equals the number of configuration sets; decrease
/// is only allowed from states with a singleton group. At least one
/// direction is always valid.
fn split_probability(z: &PartitionState) -> f64 {
    if z.r() == z.class_count() {
        0.0
    } else if z.groups().iter().all(|g| g.len() != 1) {
        1.0
    } else {
        0.5
    }
}

/// Outcome of the trans-dimensional kernel.
#[derive(Debug, Clone)]
pub struct SplitMergeProposal {
    pub z: PartitionState,
    pub log_proposal_ratio: f64,
    pub log_jacobian: f64,
    pub was_split: bool,
    /// The configuration set split out into a new group, or the content
    /// of the singleton group that was merged away.
    pub class: usize,
}

/// Split one configuration set out of a group into a new singleton group,
/// or merge a singleton group into another group, with the value updates
/// and Jacobians of the one-to-one transformation between the two
/// directions.
pub fn propose_split_merge(
    z: &PartitionState,
    sigma: f64,
    rng: &mut impl Rng,
) -> Result<SplitMergeProposal> {
    let r = z.r();
    let p_split = split_probability(z);
    let do_split = rng.random::<f64>() < p_split;

    if do_split {
        let big: Vec<usize> = (0..r).filter(|&g| z.groups()[g].len() >= 2).collect();
        let gi = big[rng.random_range(0..big.len())];
        let donor = z.groups()[gi].clone();
        let class = donor[rng.random_range(0..donor.len())];
        let eps: f64 = Normal::new(0.0, sigma).unwrap().sample(rng);
        let phi_i = z.values()[gi];
        let shift = (phi_i + eps) / (r + 1) as f64;

        let mut groups = Vec::with_capacity(r + 1);
        let mut values = Vec::with_capacity(r + 1);
        for (g, group) in z.groups().iter().enumerate() {
            if g == gi {
                groups.push(group.iter().copied().filter(|&c| c != class).collect());
                values.push(phi_i - shift);
            } else {
                groups.push(group.clone());
                values.push(z.values()[g] - shift);
            }
        }
        groups.push(vec![class]);
        values.push(phi_i + eps - shift);
        let z_new = PartitionState::new(groups, values, z.class_count())?;

        let log_fwd = p_split.ln() - (big.len() as f64).ln() - (donor.len() as f64).ln()
            + normal_logpdf(eps, sigma);
        // reverse merge: the new singleton is drawn against the donor rest
        let a = z_new.group_of(class);
        let b = z_new.group_of(donor.iter().copied().find(|&c| c != class).unwrap());
        let (rev_entries, rev_total) = merge_pair_weights(&z_new);
        let p_merge_rev = 1.0 - split_probability(&z_new);
        let log_rev = p_merge_rev.ln() + pair_prob(&rev_entries, rev_total, a, b).ln();

        Ok(SplitMergeProposal {
            z: z_new,
            log_proposal_ratio: log_rev - log_fwd,
            log_jacobian: (r as f64 / (r + 1) as f64).ln(),
            was_split: true,
            class,
        })
    } else {
        let (entries, total) = merge_pair_weights(z);
        debug_assert!(!entries.is_empty());
        let (i, j) = sample_pair(&entries, total, rng);
        let single = z.groups()[i][0];
        let phi_i = z.values()[i];
        let phi_j = z.values()[j];
        let lift = phi_i / (r - 1) as f64;

        let mut groups = Vec::with_capacity(r - 1);
        let mut values = Vec::with_capacity(r - 1);
        for (g, group) in z.groups().iter().enumerate() {
            if g == i {
                continue;
            }
            let mut group = group.clone();
            if g == j {
                group.push(single);
                values.push(phi_j + lift);
            } else {
                values.push(z.values()[g] + lift);
            }
            groups.push(group);
        }
        let z_new = PartitionState::new(groups, values, z.class_count())?;

        let log_fwd = (1.0 - split_probability(z)).ln() + pair_prob(&entries, total, i, j).ln();
        // reverse split: extract `single` from the merged group with the
        // implied Gaussian change
        let merged_size = z.groups()[j].len() + 1;
        let big_rev = z_new.groups().iter().filter(|g| g.len() >= 2).count();
        let eps_implied = phi_i - phi_j;
        let log_rev = split_probability(&z_new).ln()
            - (big_rev as f64).ln()
            - (merged_size as f64).ln()
            + normal_logpdf(eps_implied, sigma);

        Ok(SplitMergeProposal {
            z: z_new,
            log_proposal_ratio: log_rev - log_fwd,
            log_jacobian: (r as f64 / (r - 1) as f64).ln(),
            was_split: false,
            class: single,
        })
    }
}

/// Symmetric Gaussian step on one uniformly chosen covariate coefficient.
pub fn propose_covariate(theta: &[f64], step: f64, rng: &mut impl Rng) -> (Vec<f64>, usize) {
    let k = rng.random_range(0..theta.len());
    let mut out = theta.to_vec();
    out[k] += Normal::new(0.0, step).unwrap().sample(rng);
    (out, k)
}

/// Draws a state from the prior the sampler leaves invariant: r from the
/// grouping mass tilted by the per-r value-density integral, a uniform
/// partition given r, and centred i.i.d. Gaussian group values.
pub fn sample_prior_state(
    prior: &PartitionPrior,
    rng: &mut impl Rng,
) -> Result<PartitionState> {
    let cfg = prior.config();
    let pr = state_prior_r_distribution(prior);
    let mut target = rng.random::<f64>() * pr.iter().sum::<f64>();
    let mut r = cfg.class_count;
    for (idx, p) in pr.iter().enumerate() {
        target -= p;
        if target <= 0.0 {
            r = idx + 1;
            break;
        }
    }
    let groups = crate::prior::sample_uniform_partition(cfg.class_count, r, rng)?;
    let normal = Normal::new(0.0, cfg.sigma_phi).unwrap();
    let raw: Vec<f64> = (0..r).map(|_| normal.sample(rng)).collect();
    let mean = raw.iter().sum::<f64>() / r as f64;
    let values = raw.iter().map(|v| v - mean).collect();
    PartitionState::new(groups, values, cfg.class_count)
}

struct StepProposal {
    z: PartitionState,
    theta: Vec<f64>,
    log_prior_ratio: f64,
    log_proposal_ratio: f64,
    log_jacobian: f64,
    /// false for designated no-ops, which are counted as rejected without
    /// a likelihood evaluation
    evaluate: bool,
}

/// Per-kernel acceptance bookkeeping.
#[derive(Debug, Clone, Copy, Default, Serialize)]
pub struct KernelCounter {
    pub proposed: u64,
    pub accepted: u64,
}

impl KernelCounter {
    pub fn rate(&self) -> f64 {
        if self.proposed == 0 {
            0.0
        } else {
            self.accepted as f64 / self.proposed as f64
        }
    }
}

/// One emitted chain snapshot.
#[derive(Debug, Clone, Serialize)]
pub struct ChainRecord {
    pub iteration: u64,
    pub r: usize,
    pub groups: Vec<Vec<usize>>,
    pub values: Vec<f64>,
    pub theta: Vec<f64>,
    /// U(x|z,theta) plus log prior terms, without the normalising
    /// constant; a surrogate usable for trace diagnostics.
    pub log_posterior: f64,
    /// Acceptance flags of this iteration's kernels, in kernel order.
    pub accepts: Vec<bool>,
}

/// The posterior chain driver.
pub struct Chain<'a> {
    cfg: SamplerConfig,
    engine: LikelihoodEngine,
    prior: PartitionPrior,
    evaluator: &'a EnergyEvaluator,
    data: DataContext,
    covariates: Option<&'a CovariateField>,
    kernels: Vec<KernelKind>,
    z: PartitionState,
    theta: Vec<f64>,
    params: ModelParams,
    log_z: Option<f64>,
    counters: Vec<KernelCounter>,
    iteration_flags: Vec<bool>,
}

impl<'a> Chain<'a> {
    pub fn new(
        evaluator: &'a EnergyEvaluator,
        data: BinaryImage,
        covariates: Option<&'a CovariateField>,
        engine: LikelihoodEngine,
        prior: PartitionPrior,
        cfg: SamplerConfig,
        init: Option<(PartitionState, Vec<f64>)>,
    ) -> Result<Self> {
        cfg.validate()?;
        engine.validate(evaluator, covariates.is_some())?;
        if prior.config().class_count != evaluator.catalog().class_count() {
            return Err(Error::validation(format!(
                "prior is configured for {} classes but the catalog has {}",
                prior.config().class_count,
                evaluator.catalog().class_count()
            )));
        }
        let class_count = evaluator.catalog().class_count();
        let (z, theta) = match init {
            Some((z, theta)) => {
                if z.class_count() != class_count {
                    return Err(Error::validation(
                        "initial state does not match the catalog",
                    ));
                }
                (z, theta)
            }
            None => (
                PartitionState::single_group(class_count),
                vec![0.0; covariates.map_or(0, |c| c.k)],
            ),
        };
        if let Some(cov) = covariates {
            if theta.len() != cov.k {
                return Err(Error::validation(format!(
                    "theta has {} entries for {} covariates",
                    theta.len(),
                    cov.k
                )));
            }
            if cov.n != evaluator.spec().n || cov.m != evaluator.spec().m {
                return Err(Error::validation(
                    "covariate field does not match the lattice",
                ));
            }
        }
        let mut kernels = vec![KernelKind::Value, KernelKind::Move, KernelKind::SplitMerge];
        if covariates.is_some() {
            kernels.push(KernelKind::Covariate);
        }
        let params = ModelParams {
            phi: z.phi_of(),
            field: match covariates {
                Some(cov) => Some(cov.site_field(&theta)?),
                None => None,
            },
        };
        let data = DataContext::new(evaluator, data)?;
        let log_z = engine.log_z(evaluator, &params)?.map(|z| z.0);
        let counters = vec![KernelCounter::default(); kernels.len()];
        let iteration_flags = vec![false; kernels.len()];
        Ok(Chain {
            cfg,
            engine,
            prior,
            evaluator,
            data,
            covariates,
            kernels,
            z,
            theta,
            params,
            log_z,
            counters,
            iteration_flags,
        })
    }

    pub fn kernels(&self) -> &[KernelKind] {
        &self.kernels
    }

    pub fn tree_depth(&self) -> usize {
        self.cfg.tree_depth
    }

    pub fn counters(&self) -> &[KernelCounter] {
        &self.counters
    }

    pub fn state(&self) -> (&PartitionState, &[f64]) {
        (&self.z, &self.theta)
    }

    /// Replaces the observed image, keeping the current parameter state.
    /// Used by successive-conditional validation runs.
    pub fn set_data(&mut self, image: BinaryImage) -> Result<()> {
        self.data = DataContext::new(self.evaluator, image)?;
        Ok(())
    }

    pub fn current_params(&self) -> &ModelParams {
        &self.params
    }

    fn record(&self, iteration: u64) -> ChainRecord {
        let mut log_posterior = self.data.energy(self.evaluator, &self.params)
            + self.prior.log_partition_mass(self.z.r()).unwrap()
            + log_prior_values(self.z.values(), self.prior.config()).unwrap();
        for &t in &self.theta {
            log_posterior += normal_logpdf(t, self.cfg.covariate_prior_sd);
        }
        ChainRecord {
            iteration,
            r: self.z.r(),
            groups: self.z.groups().to_vec(),
            values: self.z.values().to_vec(),
            theta: self.theta.clone(),
            log_posterior,
            accepts: self.iteration_flags.clone(),
        }
    }

    fn make_proposal(&self, kind: KernelKind, z: &PartitionState, theta: &[f64], rng: &mut impl Rng) -> Result<StepProposal> {
        let pcfg = self.prior.config();
        match kind {
            KernelKind::Value => {
                let z_new = propose_value_walk(z, self.cfg.sigma, rng)?;
                let log_prior_ratio = log_prior_values(z_new.values(), pcfg)?
                    - log_prior_values(z.values(), pcfg)?;
                Ok(StepProposal {
                    z: z_new,
                    theta: theta.to_vec(),
                    log_prior_ratio,
                    log_proposal_ratio: 0.0,
                    log_jacobian: 0.0,
                    evaluate: true,
                })
            }
            KernelKind::Move => match propose_move(z, rng)? {
                Some(mv) => Ok(StepProposal {
                    z: mv.z,
                    theta: theta.to_vec(),
                    log_prior_ratio: 0.0,
                    log_proposal_ratio: mv.log_proposal_ratio,
                    log_jacobian: 0.0,
                    evaluate: true,
                }),
                None => Ok(StepProposal {
                    z: z.clone(),
                    theta: theta.to_vec(),
                    log_prior_ratio: 0.0,
                    log_proposal_ratio: 0.0,
                    log_jacobian: 0.0,
                    evaluate: false,
                }),
            },
            KernelKind::SplitMerge => {
                let proposal = propose_split_merge(z, self.cfg.sigma, rng)?;
                let log_prior_ratio = self.prior.log_partition_mass(proposal.z.r())?
                    - self.prior.log_partition_mass(z.r())?
                    + log_prior_values(proposal.z.values(), pcfg)?
                    - log_prior_values(z.values(), pcfg)?;
                Ok(StepProposal {
                    z: proposal.z,
                    theta: theta.to_vec(),
                    log_prior_ratio,
                    log_proposal_ratio: proposal.log_proposal_ratio,
                    log_jacobian: proposal.log_jacobian,
                    evaluate: true,
                })
            }
            KernelKind::Covariate => {
                let (theta_new, coord) = propose_covariate(theta, self.cfg.covariate_step, rng);
                let sd = self.cfg.covariate_prior_sd;
                let log_prior_ratio =
                    normal_logpdf(theta_new[coord], sd) - normal_logpdf(theta[coord], sd);
                Ok(StepProposal {
                    z: z.clone(),
                    theta: theta_new,
                    log_prior_ratio,
                    log_proposal_ratio: 0.0,
                    log_jacobian: 0.0,
                    evaluate: true,
                })
            }
        }
    }

    fn params_for(&self, prop: &StepProposal) -> Result<ModelParams> {
        let field = match self.covariates {
            Some(cov) => Some(cov.site_field(&prop.theta)?),
            None => None,
        };
        Ok(ModelParams {
            phi: prop.z.phi_of(),
            field,
        })
    }

    fn kernel_at(&self, step: u64) -> KernelKind {
        self.kernels[(step % self.kernels.len() as u64) as usize]
    }

    /// One sequential Metropolis-Hastings step. Returns whether the
    /// proposal was accepted.
    fn sequential_step(&mut self, step: u64) -> Result<bool> {
        let kind = self.kernel_at(step);
        let kernel_idx = (step % self.kernels.len() as u64) as usize;
        let seed = self.cfg.seed;
        let mut prop_rng = stream_rng(seed, step, Purpose::Proposal, 0);
        let prop = self.make_proposal(kind, &self.z, &self.theta, &mut prop_rng)?;
        self.counters[kernel_idx].proposed += 1;
        if !prop.evaluate {
            self.iteration_flags[kernel_idx] = false;
            return Ok(false);
        }
        let new_params = self.params_for(&prop)?;
        let mut engine_rng = stream_rng(seed, step, Purpose::Engine, 1);
        let lik = match log_lik_ratio(
            self.engine,
            self.evaluator,
            &self.data,
            &new_params,
            &self.params,
            self.log_z,
            &mut engine_rng,
        ) {
            Ok(v) => v,
            Err(err) => {
                eprintln!("warning: likelihood evaluation failed, rejecting proposal: {err}");
                self.iteration_flags[kernel_idx] = false;
                return Ok(false);
            }
        };
        let log_alpha = lik.0 + prop.log_prior_ratio + prop.log_proposal_ratio + prop.log_jacobian;
        let mut accept_rng = stream_rng(seed, step, Purpose::Accept, 0);
        let accepted = accept_rng.random::<f64>() < log_alpha.exp();
        if accepted {
            self.z = prop.z;
            self.theta = prop.theta;
            self.params = new_params;
            if self.engine.is_exact() {
                self.log_z = lik.1;
            }
            self.counters[kernel_idx].accepted += 1;
        }
        self.iteration_flags[kernel_idx] = accepted;
        Ok(accepted)
    }

    /// Runs the chain sequentially, emitting the initial state and every
    /// `thinning`-th iteration to the sink.
    pub fn run(&mut self, mut sink: impl FnMut(&ChainRecord) -> Result<()>) -> Result<()> {
        sink(&self.record(0))?;
        let k = self.kernels.len() as u64;
        for iteration in 1..=self.cfg.iterations {
            for kernel in 0..k {
                let step = (iteration - 1) * k + kernel;
                self.sequential_step(step)?;
            }
            if iteration % self.cfg.thinning == 0 {
                sink(&self.record(iteration))?;
            }
        }
        Ok(())
    }

    /// Runs one iteration (one proposal of each kernel); used by
    /// successive-conditional validation drivers.
    pub fn run_iteration(&mut self, iteration_index: u64) -> Result<()> {
        let k = self.kernels.len() as u64;
        for kernel in 0..k {
            self.sequential_step(iteration_index * k + kernel)?;
        }
        Ok(())
    }

    /// Runs one iteration through the proposal tree, chunking the kernel
    /// steps at the configured depth.
    pub fn run_tree_iteration(&mut self, iteration_index: u64) -> Result<()> {
        let k = self.kernels.len() as u64;
        let depth = self.cfg.tree_depth as u64;
        let mut step = iteration_index * k;
        let end = step + k;
        while step < end {
            let chunk = depth.min(end - step) as usize;
            self.tree_chunk(step, chunk)?;
            step += chunk as u64;
        }
        Ok(())
    }

    /// Runs the chain with the depth-d proposal tree: proposals are
    /// pre-generated from every reachable node, the candidate-state
    /// likelihood quantities are evaluated in parallel, then the
    /// accept/reject walk follows the realized path. With depth 1 the
    /// records are byte-identical to `run` under the same seed.
    pub fn run_tree(&mut self, mut sink: impl FnMut(&ChainRecord) -> Result<()>) -> Result<()> {
        sink(&self.record(0))?;
        let k = self.kernels.len() as u64;
        let total = self.cfg.iterations * k;
        let depth = self.cfg.tree_depth as u64;
        let mut step = 0u64;
        while step < total {
            let chunk = depth.min(total - step) as usize;
            // tree_chunk fails only before touching the chain state, so the
            // sequential fallback re-runs the same steps exactly once
            let records = match self.tree_chunk(step, chunk) {
                Ok(records) => records,
                Err(err) => {
                    eprintln!("warning: tree evaluation failed, falling back to sequential: {err}");
                    let mut records = Vec::new();
                    for lvl in 0..chunk as u64 {
                        self.sequential_step(step + lvl)?;
                        self.boundary_record(step + lvl, &mut records);
                    }
                    records
                }
            };
            for record in &records {
                sink(record)?;
            }
            step += chunk as u64;
        }
        Ok(())
    }

    fn boundary_record(&self, step: u64, records: &mut Vec<ChainRecord>) {
        let k = self.kernels.len() as u64;
        if (step + 1) % k == 0 {
            let iteration = (step + 1) / k;
            if iteration % self.cfg.thinning == 0 {
                records.push(self.record(iteration));
            }
        }
    }

    /// Prepares, evaluates and walks one proposal tree. Every fallible
    /// operation happens before the first state mutation.
    fn tree_chunk(&mut self, base_step: u64, chunk: usize) -> Result<Vec<ChainRecord>> {
        let seed = self.cfg.seed;
        let nodes = 1usize << chunk;

        // node state per path bitmask; bit l set = proposal at level l accepted
        #[derive(Clone)]
        struct Node {
            z: PartitionState,
            theta: Vec<f64>,
            params: ModelParams,
        }
        let mut states: Vec<Option<Node>> = vec![None; nodes];
        states[0] = Some(Node {
            z: self.z.clone(),
            theta: self.theta.clone(),
            params: self.params.clone(),
        });
        let mut proposals: Vec<Option<StepProposal>> = (0..nodes).map(|_| None).collect();

        for lvl in 0..chunk {
            for path in 0..(1usize << lvl) {
                // a no-op edge collapses the accept child onto the parent,
                // so the parent node is always present
                let parent_idx = resolve_parent(&states, path);
                let parent = states[parent_idx].clone().unwrap();
                let step = base_step + lvl as u64;
                let mut rng = stream_rng(seed, step, Purpose::Proposal, path as u8);
                let prop =
                    self.make_proposal(self.kernel_at(step), &parent.z, &parent.theta, &mut rng)?;
                let child = path | (1 << lvl);
                if prop.evaluate {
                    states[child] = Some(Node {
                        z: prop.z.clone(),
                        theta: prop.theta.clone(),
                        params: self.params_for(&prop)?,
                    });
                }
                proposals[child] = Some(prop);
            }
        }

        // evaluate the likelihood quantity for every new candidate state
        // concurrently: exact engines need one ln Sigma per distinct state,
        // stochastic engines one auxiliary evaluation per edge
        let mut eval_jobs: Vec<usize> = Vec::new();
        for (idx, state) in states.iter().enumerate() {
            if idx != 0 && state.is_some() {
                eval_jobs.push(idx);
            }
        }
        let mut ratios: Vec<Option<(f64, Option<f64>)>> = vec![None; nodes];
        if self.engine.is_exact() {
            // one ln Sigma per distinct new state, ratios assembled after
            let log_zs: Vec<(usize, Result<f64>)> = eval_jobs
                .par_iter()
                .map(|&child| {
                    let node = states[child].as_ref().unwrap();
                    let res = self
                        .engine
                        .log_z(self.evaluator, &node.params)
                        .map(|z| z.unwrap().0);
                    (child, res)
                })
                .collect();
            let mut node_log_z: Vec<Option<f64>> = vec![None; nodes];
            node_log_z[0] = self.log_z;
            for (child, res) in log_zs {
                node_log_z[child] = Some(res?);
            }
            for &child in &eval_jobs {
                let lvl = (usize::BITS - 1 - child.leading_zeros()) as usize;
                let parent_idx = resolve_parent(&states, child ^ (1 << lvl));
                let parent = states[parent_idx].as_ref().unwrap();
                let node = states[child].as_ref().unwrap();
                let ratio = (self.data.energy(self.evaluator, &node.params)
                    - node_log_z[child].unwrap())
                    - (self.data.energy(self.evaluator, &parent.params)
                        - node_log_z[parent_idx].unwrap());
                ratios[child] = Some((ratio, node_log_z[child]));
            }
        } else {
            let lik_results: Vec<(usize, Result<(f64, Option<f64>)>)> = eval_jobs
                .par_iter()
                .map(|&child| {
                    let lvl = (usize::BITS - 1 - child.leading_zeros()) as u64;
                    let step = base_step + lvl;
                    let parent_idx = resolve_parent(&states, child ^ (1 << lvl));
                    let parent = states[parent_idx].as_ref().unwrap();
                    let node = states[child].as_ref().unwrap();
                    let mut rng = stream_rng(seed, step, Purpose::Engine, child as u8);
                    let res = log_lik_ratio(
                        self.engine,
                        self.evaluator,
                        &self.data,
                        &node.params,
                        &parent.params,
                        None,
                        &mut rng,
                    );
                    (child, res)
                })
                .collect();
            for (child, res) in lik_results {
                ratios[child] = Some(res?);
            }
        }

        // sequential accept/reject walk down the realized path
        let mut records = Vec::new();
        let mut path = 0usize;
        for lvl in 0..chunk {
            let step = base_step + lvl as u64;
            let kernel_idx = (step % self.kernels.len() as u64) as usize;
            let child = path | (1 << lvl);
            let prop = proposals[child].as_ref().unwrap();
            self.counters[kernel_idx].proposed += 1;
            let mut accepted = false;
            if prop.evaluate {
                let (lik, new_log_z) = ratios[child].unwrap();
                let log_alpha =
                    lik + prop.log_prior_ratio + prop.log_proposal_ratio + prop.log_jacobian;
                let mut accept_rng = stream_rng(seed, step, Purpose::Accept, path as u8);
                if accept_rng.random::<f64>() < log_alpha.exp() {
                    accepted = true;
                    path = child;
                    if self.engine.is_exact() {
                        self.log_z = new_log_z;
                    }
                }
            }
            self.counters[kernel_idx].accepted += accepted as u64;
            self.iteration_flags[kernel_idx] = accepted;
            // commit the realized state before recording any boundary
            let node_idx = resolve_parent(&states, path);
            let node = states[node_idx].as_ref().unwrap();
            self.z = node.z.clone();
            self.theta = node.theta.clone();
            self.params = node.params.clone();
            self.boundary_record(step, &mut records);
        }
        Ok(records)
    }
}

/// Walks down to the nearest materialised ancestor: no-op edges collapse
/// the accept child onto its parent.
fn resolve_parent<T>(states: &[Option<T>], mut idx: usize) -> usize {
    while states[idx].is_none() {
        debug_assert!(idx != 0);
        // drop the highest set bit: the no-op accept edge points at its parent
        let top = usize::BITS - 1 - idx.leading_zeros();
        idx ^= 1 << top;
    }
    idx
}
