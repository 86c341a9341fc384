//! Log-likelihood and log-likelihood-ratio engines: exact enumeration,
//! column transfer matrix, Gibbs simulation, approximate exchange ratio
//! and pseudo-likelihood.
//!
//! The model density is p(x) = exp{U(x)} / Sigma, where Sigma is the sum
//! of exp{U} over all states. `LogZ` stores ln Sigma, so the exact
//! log-likelihood is U(x) - LogZ.

use rand::Rng;

use crate::error::{Error, Result};
use crate::lattice::Boundary;
use crate::model::{BinaryImage, EnergyEvaluator, ModelParams};

/// Brute-force enumeration cap: number of active sites.
pub const BRUTE_FORCE_MAX_SITES: usize = 26;
/// Transfer-matrix cap: lattice height (state space 2^n).
pub const TRANSFER_MAX_HEIGHT: usize = 16;
/// Default auxiliary-chain sweep budget for the exchange engine.
pub const DEFAULT_EXCHANGE_SWEEPS: usize = 50;

/// Log normalising constant ln Sigma = ln sum_x exp{U(x)}.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogZ(pub f64);

/// Strategy for producing exact or surrogate log-likelihood ratios.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LikelihoodEngine {
    /// Exact enumeration over all 2^sites states.
    BruteForce,
    /// Exact column transfer matrix (torus, template width <= 2,
    /// no covariates).
    Transfer,
    /// Approximate exchange ratio with an auxiliary Gibbs draw of the
    /// given sweep budget.
    Exchange { sweeps: usize },
    /// Difference of log pseudo-likelihoods.
    PseudoLikelihood,
    /// Forces every likelihood ratio to zero; used for prior-only runs
    /// that validate the sampler against the exact prior.
    PriorOnly,
}

impl LikelihoodEngine {
    pub fn is_exact(&self) -> bool {
        matches!(self, LikelihoodEngine::BruteForce | LikelihoodEngine::Transfer)
    }

    pub fn name(&self) -> &'static str {
        match self {
            LikelihoodEngine::BruteForce => "brute-force",
            LikelihoodEngine::Transfer => "transfer",
            LikelihoodEngine::Exchange { .. } => "exchange",
            LikelihoodEngine::PseudoLikelihood => "pseudo-likelihood",
            LikelihoodEngine::PriorOnly => "prior-only",
        }
    }

    /// Checks the engine's size and shape caps against a model.
    pub fn validate(&self, evaluator: &EnergyEvaluator, has_covariates: bool) -> Result<()> {
        match self {
            LikelihoodEngine::BruteForce => {
                let sites = evaluator.active_sites().len();
                if sites > BRUTE_FORCE_MAX_SITES {
                    return Err(Error::cap(format!(
                        "brute-force enumeration needs <= {BRUTE_FORCE_MAX_SITES} sites, got {sites}"
                    )));
                }
            }
            LikelihoodEngine::Transfer => {
                let spec = evaluator.spec();
                if spec.boundary != Boundary::Torus {
                    return Err(Error::validation(
                        "the transfer-matrix engine requires a torus lattice",
                    ));
                }
                if spec.n > TRANSFER_MAX_HEIGHT {
                    return Err(Error::cap(format!(
                        "transfer matrix needs lattice height <= {TRANSFER_MAX_HEIGHT}, got {}",
                        spec.n
                    )));
                }
                if evaluator.catalog().template().width() > 2 {
                    return Err(Error::cap(
                        "transfer matrix supports template width <= 2 only",
                    ));
                }
                if has_covariates {
                    return Err(Error::validation(
                        "the transfer-matrix engine does not support covariates",
                    ));
                }
            }
            LikelihoodEngine::Exchange { sweeps } => {
                if *sweeps == 0 {
                    return Err(Error::validation("exchange sweep budget must be >= 1"));
                }
            }
            LikelihoodEngine::PseudoLikelihood | LikelihoodEngine::PriorOnly => {}
        }
        Ok(())
    }

    /// Exact ln Sigma for the exact engines. Stochastic engines have none.
    pub fn log_z(&self, evaluator: &EnergyEvaluator, params: &ModelParams) -> Result<Option<LogZ>> {
        match self {
            LikelihoodEngine::BruteForce => Ok(Some(log_z_brute(evaluator, params)?)),
            LikelihoodEngine::Transfer => Ok(Some(log_z_transfer(evaluator, params)?)),
            _ => Ok(None),
        }
    }
}

impl std::str::FromStr for LikelihoodEngine {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "brute" | "brute-force" | "bruteforce" | "exact" => Ok(LikelihoodEngine::BruteForce),
            "transfer" => Ok(LikelihoodEngine::Transfer),
            "exchange" => Ok(LikelihoodEngine::Exchange {
                sweeps: DEFAULT_EXCHANGE_SWEEPS,
            }),
            "pseudo" | "pseudo-likelihood" | "pseudolikelihood" => {
                Ok(LikelihoodEngine::PseudoLikelihood)
            }
            "prior-only" | "prioronly" => Ok(LikelihoodEngine::PriorOnly),
            other => Err(Error::parse(format!(
                "unknown likelihood engine '{other}' (expected brute, transfer, exchange or pseudo)"
            ))),
        }
    }
}

/// ln Sigma by log-sum-exp over all states of the active sites, walked in
/// Gray-code order so each step is a single-site energy delta.
pub fn log_z_brute(evaluator: &EnergyEvaluator, params: &ModelParams) -> Result<LogZ> {
    let sites = evaluator.active_sites().to_vec();
    if sites.len() > BRUTE_FORCE_MAX_SITES {
        return Err(Error::cap(format!(
            "brute-force enumeration needs <= {BRUTE_FORCE_MAX_SITES} sites, got {}",
            sites.len()
        )));
    }
    let mut x = BinaryImage::zeros(*evaluator.spec());
    let mut energy = evaluator.energy(&x, params)?;

    // streaming log-sum-exp
    let mut max = energy;
    let mut sum = 1.0f64; // exp(energy - max)
    let total = 1u64 << sites.len();
    for step in 1..total {
        let bit = step.trailing_zeros() as usize;
        let site = sites[bit] as usize;
        energy += evaluator.delta_flip(&x, params, site);
        x.flip(site);
        if energy > max {
            sum = sum * (max - energy).exp() + 1.0;
            max = energy;
        } else {
            sum += (energy - max).exp();
        }
    }
    Ok(LogZ(max + sum.ln()))
}

/// Exact ln Sigma via the trace of the m-th power of the column-to-column
/// transition matrix, in scaled arithmetic. Requires a torus, template
/// width <= 2 and no covariates.
pub fn log_z_transfer(evaluator: &EnergyEvaluator, params: &ModelParams) -> Result<LogZ> {
    LikelihoodEngine::Transfer.validate(evaluator, params.field.is_some())?;
    if params.field.is_some() {
        return Err(Error::validation(
            "the transfer-matrix engine does not support covariates",
        ));
    }
    let spec = *evaluator.spec();
    let cat = evaluator.catalog();
    let tpl = cat.template();
    let phi = &params.phi.values;
    let n = spec.n;
    let m = spec.m;
    let states = 1usize << n;

    // template nodes as (row offset, column offset, mask bit)
    let nodes: Vec<(i32, i32, usize)> = tpl
        .shape()
        .nodes()
        .iter()
        .enumerate()
        .map(|(bit, &(i, j))| (i, j, bit))
        .collect();

    if tpl.width() == 1 {
        // columns decouple: Sigma = (sum_a exp E(a))^m
        let mut max = f64::NEG_INFINITY;
        let mut energies = Vec::with_capacity(states);
        for a in 0..states {
            let mut e = 0.0;
            for row in 0..n {
                let mut mask = 0usize;
                for &(di, _, bit) in &nodes {
                    let r = (row + di as usize) % n;
                    mask |= ((a >> r) & 1) << bit;
                }
                e += phi[cat.class_of_mask(mask)];
            }
            max = max.max(e);
            energies.push(e);
        }
        let sum: f64 = energies.iter().map(|e| (e - max).exp()).sum();
        return Ok(LogZ(m as f64 * (max + sum.ln())));
    }

    // width 2: entry (a, b) collects all cliques anchored in the left
    // column, reading column-0 template nodes from a and column-1 from b
    let mut entries = vec![0.0f64; states * states];
    let mut max_entry = f64::NEG_INFINITY;
    for a in 0..states {
        for b in 0..states {
            let mut e = 0.0;
            for row in 0..n {
                let mut mask = 0usize;
                for &(di, dj, bit) in &nodes {
                    let r = (row + di as usize) % n;
                    let col = if dj == 0 { a } else { b };
                    mask |= ((col >> r) & 1) << bit;
                }
                e += phi[cat.class_of_mask(mask)];
            }
            entries[a * states + b] = e;
            max_entry = max_entry.max(e);
        }
    }
    let t: Vec<f64> = entries.iter().map(|e| (e - max_entry).exp()).collect();
    let log_scale = max_entry;

    // power: P = T^m, renormalising by the max entry after each multiply
    let mut p = t.clone();
    let mut p_scale = log_scale;
    for _ in 1..m {
        let mut next = vec![0.0f64; states * states];
        for a in 0..states {
            for k in 0..states {
                let pak = p[a * states + k];
                if pak == 0.0 {
                    continue;
                }
                let row = &t[k * states..(k + 1) * states];
                let out = &mut next[a * states..(a + 1) * states];
                for b in 0..states {
                    out[b] += pak * row[b];
                }
            }
        }
        let mx = next.iter().cloned().fold(0.0f64, f64::max);
        for v in &mut next {
            *v /= mx;
        }
        p = next;
        p_scale += log_scale + mx.ln();
    }
    let trace: f64 = (0..states).map(|a| p[a * states + a]).sum();
    Ok(LogZ(p_scale + trace.ln()))
}

/// One systematic-scan Gibbs sweep over the active sites.
pub fn gibbs_sweep(
    evaluator: &EnergyEvaluator,
    params: &ModelParams,
    x: &mut BinaryImage,
    rng: &mut impl Rng,
) {
    for &site in evaluator.active_sites() {
        let site = site as usize;
        // ln p(x_site = 1 | rest) - ln p(x_site = 0 | rest)
        let d_on = if x.get(site) == 1 {
            -evaluator.delta_flip(x, params, site)
        } else {
            evaluator.delta_flip(x, params, site)
        };
        let p_on = 1.0 / (1.0 + (-d_on).exp());
        let v = if rng.random::<f64>() < p_on { 1 } else { 0 };
        x.set(site, v);
    }
}

/// Systematic-scan single-site Gibbs from a uniform-random start.
pub fn gibbs_sample(
    evaluator: &EnergyEvaluator,
    params: &ModelParams,
    sweeps: usize,
    rng: &mut impl Rng,
) -> BinaryImage {
    let mut x = BinaryImage::zeros(*evaluator.spec());
    for &site in evaluator.active_sites() {
        if rng.random::<bool>() {
            x.set(site as usize, 1);
        }
    }
    for _ in 0..sweeps {
        gibbs_sweep(evaluator, params, &mut x, rng);
    }
    x
}

/// Exact draw from p(x) by enumerating all states of the active sites.
pub fn sample_exact(
    evaluator: &EnergyEvaluator,
    params: &ModelParams,
    rng: &mut impl Rng,
) -> Result<BinaryImage> {
    let sites = evaluator.active_sites().to_vec();
    if sites.len() > BRUTE_FORCE_MAX_SITES {
        return Err(Error::cap(format!(
            "exact sampling needs <= {BRUTE_FORCE_MAX_SITES} sites, got {}",
            sites.len()
        )));
    }
    let total = 1usize << sites.len();
    let mut energies = Vec::with_capacity(total);
    let mut x = BinaryImage::zeros(*evaluator.spec());
    let mut energy = evaluator.energy(&x, params)?;
    let mut max = energy;
    energies.push(energy);
    for step in 1..total as u64 {
        let bit = step.trailing_zeros() as usize;
        let site = sites[bit] as usize;
        energy += evaluator.delta_flip(&x, params, site);
        x.flip(site);
        max = max.max(energy);
        energies.push(energy);
    }
    let weights: Vec<f64> = energies.iter().map(|e| (e - max).exp()).collect();
    let total_weight: f64 = weights.iter().sum();
    let mut target = rng.random::<f64>() * total_weight;
    let mut chosen = weights.len() - 1;
    for (idx, w) in weights.iter().enumerate() {
        target -= w;
        if target <= 0.0 {
            chosen = idx;
            break;
        }
    }
    // rebuild the Gray-code state for the chosen index
    let gray = (chosen ^ (chosen >> 1)) as u64;
    let mut out = BinaryImage::zeros(*evaluator.spec());
    for (bit, &site) in sites.iter().enumerate() {
        if gray >> bit & 1 == 1 {
            out.set(site as usize, 1);
        }
    }
    Ok(out)
}

/// ln p(x_site | rest): the full-conditional log-probability.
fn site_conditional(evaluator: &EnergyEvaluator, params: &ModelParams, x: &BinaryImage, site: usize) -> f64 {
    let d_on = if x.get(site) == 1 {
        -evaluator.delta_flip(x, params, site)
    } else {
        evaluator.delta_flip(x, params, site)
    };
    let value = x.get(site) as f64;
    // ln p = x*d - ln(1 + e^d), computed stably
    value * d_on - ln_1p_exp(d_on)
}

fn ln_1p_exp(v: f64) -> f64 {
    if v > 35.0 {
        v
    } else if v < -35.0 {
        0.0
    } else {
        v.exp().ln_1p()
    }
}

/// Log pseudo-likelihood: sum over sites of ln p(x_site | neighbours).
pub fn log_pseudo_likelihood(
    evaluator: &EnergyEvaluator,
    x: &BinaryImage,
    params: &ModelParams,
) -> Result<f64> {
    evaluator.energy(x, params)?; // dimension checks
    Ok(evaluator
        .active_sites()
        .iter()
        .map(|&s| site_conditional(evaluator, params, x, s as usize))
        .sum())
}

/// Data-side context reused across ratio evaluations: the observed image
/// and its per-class sufficient statistics.
#[derive(Debug, Clone)]
pub struct DataContext {
    pub image: BinaryImage,
    pub class_weights: Vec<f64>,
}

impl DataContext {
    pub fn new(evaluator: &EnergyEvaluator, image: BinaryImage) -> Result<Self> {
        if image.spec.n != evaluator.spec().n || image.spec.m != evaluator.spec().m {
            return Err(Error::validation(format!(
                "data image is {}x{} but the model lattice is {}x{}",
                image.spec.n,
                image.spec.m,
                evaluator.spec().n,
                evaluator.spec().m
            )));
        }
        let class_weights = evaluator.class_weights(&image);
        Ok(DataContext {
            image,
            class_weights,
        })
    }

    /// U(x | params) from the cached sufficient statistics.
    pub fn energy(&self, evaluator: &EnergyEvaluator, params: &ModelParams) -> f64 {
        let mut u: f64 = self
            .class_weights
            .iter()
            .zip(&params.phi.values)
            .map(|(w, p)| w * p)
            .sum();
        if let Some(field) = &params.field {
            u += evaluator.field_sum(&self.image, field);
        }
        u
    }
}

/// Log-likelihood-ratio of new against old parameters for the observed
/// data. Exact engines return the exact ratio and the new ln Sigma for
/// caching; the exchange engine returns its auxiliary-variable surrogate;
/// pseudo-likelihood returns the difference of log pseudo-likelihoods.
pub fn log_lik_ratio(
    engine: LikelihoodEngine,
    evaluator: &EnergyEvaluator,
    data: &DataContext,
    new: &ModelParams,
    old: &ModelParams,
    old_log_z: Option<f64>,
    rng: &mut impl Rng,
) -> Result<(f64, Option<f64>)> {
    if new == old {
        // all engines cancel exactly at equal parameters
        return Ok((0.0, old_log_z));
    }
    match engine {
        LikelihoodEngine::BruteForce | LikelihoodEngine::Transfer => {
            let log_z = |p: &ModelParams| -> Result<f64> {
                Ok(match engine {
                    LikelihoodEngine::BruteForce => log_z_brute(evaluator, p)?.0,
                    _ => log_z_transfer(evaluator, p)?.0,
                })
            };
            let new_z = log_z(new)?;
            let old_z = match old_log_z {
                Some(v) => v,
                None => log_z(old)?,
            };
            let ratio = (data.energy(evaluator, new) - new_z)
                - (data.energy(evaluator, old) - old_z);
            Ok((ratio, Some(new_z)))
        }
        LikelihoodEngine::Exchange { sweeps } => {
            let w = gibbs_sample(evaluator, new, sweeps, rng);
            let w_weights = evaluator.class_weights(&w);
            let dot = |weights: &[f64], p: &ModelParams| -> f64 {
                let mut u: f64 = weights
                    .iter()
                    .zip(&p.phi.values)
                    .map(|(a, b)| a * b)
                    .sum();
                if let Some(field) = &p.field {
                    u += evaluator.field_sum(&w, field);
                }
                u
            };
            let ratio = data.energy(evaluator, new) - data.energy(evaluator, old)
                + dot(&w_weights, old)
                - dot(&w_weights, new);
            Ok((ratio, None))
        }
        LikelihoodEngine::PseudoLikelihood => {
            let ratio = log_pseudo_likelihood(evaluator, &data.image, new)?
                - log_pseudo_likelihood(evaluator, &data.image, old)?;
            Ok((ratio, None))
        }
        LikelihoodEngine::PriorOnly => Ok((0.0, None)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::configsets::ConfigCatalog;
    use crate::lattice::{LatticeSpec, TemplateClique};
    use crate::param::{independence_phi, ising_phi, PhiVector};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::sync::Arc;

    fn evaluator(n: usize, m: usize, k: usize, l: usize) -> EnergyEvaluator {
        let cat = Arc::new(ConfigCatalog::build(TemplateClique::block(k, l).unwrap()).unwrap());
        EnergyEvaluator::new(LatticeSpec::torus(n, m).unwrap(), cat).unwrap()
    }

    fn random_phi(ev: &EnergyEvaluator, rng: &mut impl rand::Rng) -> PhiVector {
        PhiVector {
            values: (0..ev.catalog().class_count())
                .map(|_| rng.random_range(-1.0..1.0))
                .collect(),
        }
    }

    #[test]
    fn flat_model_log_z_is_sites_ln_two() {
        let ev = evaluator(3, 3, 2, 2);
        let params = ModelParams::plain(PhiVector::zeros(ev.catalog()));
        let got = log_z_brute(&ev, &params).unwrap().0;
        assert!((got - 9.0 * std::f64::consts::LN_2).abs() < 1e-10);
        let got = log_z_transfer(&ev, &params).unwrap().0;
        assert!((got - 9.0 * std::f64::consts::LN_2).abs() < 1e-10);
    }

    #[test]
    fn transfer_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        for (n, m, k, l) in [(4usize, 4usize, 2usize, 2usize), (4, 5, 2, 2), (3, 4, 1, 2), (4, 3, 3, 1)] {
            let ev = evaluator(n, m, k, l);
            let phi = ising_phi(0.4, ev.catalog())
                .ok()
                .unwrap_or_else(|| random_phi(&ev, &mut rng));
            let params = ModelParams::plain(phi);
            let brute = log_z_brute(&ev, &params).unwrap().0;
            let transfer = log_z_transfer(&ev, &params).unwrap().0;
            assert!(
                (brute - transfer).abs() < 1e-10,
                "{n}x{m} {k}x{l}: {brute} vs {transfer}"
            );
            for _ in 0..3 {
                let params = ModelParams::plain(random_phi(&ev, &mut rng));
                let brute = log_z_brute(&ev, &params).unwrap().0;
                let transfer = log_z_transfer(&ev, &params).unwrap().0;
                assert!((brute - transfer).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn transfer_caps_enforced() {
        let ev = evaluator(4, 4, 2, 3);
        let params = ModelParams::plain(PhiVector::zeros(ev.catalog()));
        assert!(log_z_transfer(&ev, &params).is_err());

        let cat = Arc::new(ConfigCatalog::build(TemplateClique::block(2, 2).unwrap()).unwrap());
        let free = EnergyEvaluator::new(LatticeSpec::free(4, 4).unwrap(), cat).unwrap();
        let params = ModelParams::plain(PhiVector::zeros(free.catalog()));
        assert!(log_z_transfer(&free, &params).is_err());
    }

    #[test]
    fn brute_force_cap_enforced() {
        let ev = evaluator(6, 6, 2, 2);
        let params = ModelParams::plain(PhiVector::zeros(ev.catalog()));
        assert!(matches!(
            log_z_brute(&ev, &params),
            Err(crate::error::Error::Cap(_))
        ));
    }

    #[test]
    fn gibbs_flat_model_is_fair_coin() {
        let ev = evaluator(4, 4, 2, 2);
        let params = ModelParams::plain(PhiVector::zeros(ev.catalog()));
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut ones = 0usize;
        let draws = 2000;
        for _ in 0..draws {
            let x = gibbs_sample(&ev, &params, 1, &mut rng);
            ones += x.ones();
        }
        let total = (draws * 16) as f64;
        let mean = ones as f64 / total;
        let se = (0.25f64 / total).sqrt();
        assert!((mean - 0.5).abs() < 4.0 * se, "mean {mean}");
    }

    #[test]
    fn gibbs_independence_mean_matches_p() {
        let ev = evaluator(4, 4, 2, 2);
        let p = 0.3;
        let params = ModelParams::plain(independence_phi(p, ev.catalog()).unwrap());
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut ones = 0usize;
        let draws = 2000;
        for _ in 0..draws {
            let x = gibbs_sample(&ev, &params, 10, &mut rng);
            ones += x.ones();
        }
        let total = (draws * 16) as f64;
        let mean = ones as f64 / total;
        let se = (p * (1.0 - p) / total).sqrt();
        assert!((mean - p).abs() < 3.0 * se, "mean {mean} vs {p}");
    }

    #[test]
    fn gibbs_long_run_matches_exact_distribution() {
        // chi-square against the brute-force distribution on a 3x3 torus
        let ev = evaluator(3, 3, 2, 2);
        let params = ModelParams::plain(ising_phi(0.4, ev.catalog()).unwrap());
        let log_z = log_z_brute(&ev, &params).unwrap().0;

        let mut expected = vec![0.0f64; 512];
        for state in 0..512usize {
            let data: Vec<u8> = (0..9).map(|b| (state >> b & 1) as u8).collect();
            let x = BinaryImage::from_data(*ev.spec(), data).unwrap();
            expected[state] = (ev.energy(&x, &params).unwrap() - log_z).exp();
        }

        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let draws = 20000;
        let mut counts = vec![0usize; 512];
        for _ in 0..draws {
            let x = gibbs_sample(&ev, &params, 200, &mut rng);
            let state: usize = (0..9).map(|b| (x.get(b) as usize) << b).sum();
            counts[state] += 1;
        }
        let mut chi2 = 0.0;
        for s in 0..512 {
            let e = expected[s] * draws as f64;
            let diff = counts[s] as f64 - e;
            chi2 += diff * diff / e;
        }
        // 511 degrees of freedom; 0.999 quantile is ~620
        assert!(chi2 < 620.0, "chi2 {chi2}");
    }

    #[test]
    fn gibbs_detailed_balance_single_site() {
        let ev = evaluator(3, 3, 2, 2);
        let params = ModelParams::plain(ising_phi(0.4, ev.catalog()).unwrap());
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..20 {
            let data: Vec<u8> = (0..9).map(|_| rng.random_range(0..=1)).collect();
            let x = BinaryImage::from_data(*ev.spec(), data).unwrap();
            let site = rng.random_range(0..9);
            let mut y = x.clone();
            y.flip(site);
            // pi(x) P(x -> y) = pi(y) P(y -> x) for the site conditional
            let u_x = ev.energy(&x, &params).unwrap();
            let u_y = ev.energy(&y, &params).unwrap();
            let p_x_to_y = site_conditional(&ev, &params, &y, site).exp();
            let p_y_to_x = site_conditional(&ev, &params, &x, site).exp();
            let lhs = u_x.exp() * p_x_to_y;
            let rhs = u_y.exp() * p_y_to_x;
            assert!((lhs - rhs).abs() <= 1e-12 * lhs.abs().max(rhs.abs()));
        }
    }

    #[test]
    fn exact_sampler_matches_distribution() {
        let ev = evaluator(3, 3, 2, 2);
        let params = ModelParams::plain(ising_phi(0.3, ev.catalog()).unwrap());
        let log_z = log_z_brute(&ev, &params).unwrap().0;
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let draws = 20000;
        let mut counts = vec![0usize; 512];
        for _ in 0..draws {
            let x = sample_exact(&ev, &params, &mut rng).unwrap();
            let state: usize = (0..9).map(|b| (x.get(b) as usize) << b).sum();
            counts[state] += 1;
        }
        let mut chi2 = 0.0;
        for s in 0..512 {
            let data: Vec<u8> = (0..9).map(|b| (s >> b & 1) as u8).collect();
            let x = BinaryImage::from_data(*ev.spec(), data).unwrap();
            let e = (ev.energy(&x, &params).unwrap() - log_z).exp() * draws as f64;
            let diff = counts[s] as f64 - e;
            chi2 += diff * diff / e;
        }
        assert!(chi2 < 620.0, "chi2 {chi2}");
    }

    #[test]
    fn pseudo_likelihood_exact_for_independence() {
        let ev = evaluator(3, 3, 2, 2);
        let p = 0.3;
        let params = ModelParams::plain(independence_phi(p, ev.catalog()).unwrap());
        let log_z = log_z_brute(&ev, &params).unwrap().0;
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..20 {
            let data: Vec<u8> = (0..9).map(|_| rng.random_range(0..=1)).collect();
            let x = BinaryImage::from_data(*ev.spec(), data).unwrap();
            let exact = ev.energy(&x, &params).unwrap() - log_z;
            let pseudo = log_pseudo_likelihood(&ev, &x, &params).unwrap();
            assert!((exact - pseudo).abs() < 1e-10, "{exact} vs {pseudo}");
        }
    }

    #[test]
    fn ratio_zero_and_antisymmetric() {
        let ev = evaluator(4, 4, 2, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let a = ModelParams::plain(random_phi(&ev, &mut rng));
        let b = ModelParams::plain(random_phi(&ev, &mut rng));
        let data = DataContext::new(
            &ev,
            gibbs_sample(&ev, &a, 20, &mut rng),
        )
        .unwrap();

        for engine in [
            LikelihoodEngine::BruteForce,
            LikelihoodEngine::Transfer,
            LikelihoodEngine::Exchange { sweeps: 5 },
            LikelihoodEngine::PseudoLikelihood,
        ] {
            let (zero, _) =
                log_lik_ratio(engine, &ev, &data, &a, &a, None, &mut rng).unwrap();
            assert_eq!(zero, 0.0, "{}", engine.name());
        }

        for engine in [LikelihoodEngine::BruteForce, LikelihoodEngine::Transfer] {
            let (fwd, _) = log_lik_ratio(engine, &ev, &data, &b, &a, None, &mut rng).unwrap();
            let (rev, _) = log_lik_ratio(engine, &ev, &data, &a, &b, None, &mut rng).unwrap();
            assert!((fwd + rev).abs() < 1e-10);
        }
    }

    #[test]
    fn exact_ratio_uses_cached_log_z() {
        let ev = evaluator(4, 4, 2, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let a = ModelParams::plain(random_phi(&ev, &mut rng));
        let b = ModelParams::plain(random_phi(&ev, &mut rng));
        let data = DataContext::new(&ev, gibbs_sample(&ev, &a, 10, &mut rng)).unwrap();
        let a_z = log_z_brute(&ev, &a).unwrap().0;
        let (r1, new_z) =
            log_lik_ratio(LikelihoodEngine::BruteForce, &ev, &data, &b, &a, Some(a_z), &mut rng)
                .unwrap();
        let (r2, _) =
            log_lik_ratio(LikelihoodEngine::BruteForce, &ev, &data, &b, &a, None, &mut rng)
                .unwrap();
        assert!((r1 - r2).abs() < 1e-12);
        assert!((new_z.unwrap() - log_z_brute(&ev, &b).unwrap().0).abs() < 1e-12);
    }
}
