//! The partition prior on groupings of configuration sets and the
//! sum-to-zero Gaussian prior on group values.
//!
//! The grouping prior mixes a uniform-over-partitions component with a
//! uniform-over-r component: p({C_1..C_r}) is proportional to
//! p1^(1-gamma) * p2^gamma, where p1 is constant and
//! p2 = 1 / ((N+1) g(N+1, r)) with g the Stirling number of the second
//! kind. Both components are uniform over partitions given r, so the
//! mixture mass depends on the partition only through r and the exact
//! normaliser is a sum over r.

use num_bigint::{BigInt, BigUint};
use num_traits::{One, Signed, ToPrimitive, Zero};

use crate::error::{Error, Result};
use crate::model::SUM_TOLERANCE;

/// Hyper-parameters of the prior.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PriorConfig {
    /// Mixing weight in [0,1]: 0 is uniform over partitions, 1 uniform
    /// over the number of groups.
    pub gamma: f64,
    /// Standard deviation of the group-value prior.
    pub sigma_phi: f64,
    /// Number of configuration classes being partitioned (N+1).
    pub class_count: usize,
}

impl PriorConfig {
    pub fn new(gamma: f64, sigma_phi: f64, class_count: usize) -> Result<Self> {
        if !(0.0..=1.0).contains(&gamma) {
            return Err(Error::validation(format!(
                "gamma must lie in [0,1], got {gamma}"
            )));
        }
        if !(sigma_phi > 0.0) {
            return Err(Error::validation(format!(
                "sigma_phi must be positive, got {sigma_phi}"
            )));
        }
        if class_count == 0 {
            return Err(Error::validation("class count must be positive"));
        }
        Ok(PriorConfig {
            gamma,
            sigma_phi,
            class_count,
        })
    }
}

/// Stirling number of the second kind via the standard recurrence
/// g(n, r) = r g(n-1, r) + g(n-1, r-1).
pub fn stirling2(n: usize, r: usize) -> Result<BigUint> {
    if r == 0 || r > n {
        return Err(Error::validation(format!(
            "stirling2 needs 1 <= r <= n, got n={n}, r={r}"
        )));
    }
    Ok(stirling_row(n)[r].clone())
}

/// Row n of the Stirling triangle: g(n, 0..=n).
pub fn stirling_row(n: usize) -> Vec<BigUint> {
    let mut row = vec![BigUint::zero(); n + 1];
    row[0] = BigUint::one(); // g(0,0) = 1
    for items in 1..=n {
        let mut next = vec![BigUint::zero(); n + 1];
        for r in 1..=items {
            next[r] = &row[r] * BigUint::from(r) + &row[r - 1];
        }
        row = next;
    }
    row
}

/// Stirling number by the alternating-sum formula
/// g(n, r) = (1/r!) sum_i C(r, i) (-1)^(r-i) i^n. Used as an independent
/// cross-check of the recurrence.
pub fn stirling2_alternating(n: usize, r: usize) -> Result<BigUint> {
    if r == 0 || r > n {
        return Err(Error::validation(format!(
            "stirling2 needs 1 <= r <= n, got n={n}, r={r}"
        )));
    }
    let mut sum = BigInt::zero();
    let mut binom = BigInt::one(); // C(r, 0)
    for i in 0..=r {
        if i > 0 {
            binom = binom * BigInt::from(r - i + 1) / BigInt::from(i);
        }
        let term = binom.clone() * BigInt::from(i).pow(n as u32);
        if (r - i) % 2 == 0 {
            sum += term;
        } else {
            sum -= term;
        }
    }
    let mut factorial = BigInt::one();
    for v in 2..=r {
        factorial *= BigInt::from(v);
    }
    let quotient = &sum / &factorial;
    if &quotient * &factorial != sum || quotient.is_negative() {
        return Err(Error::validation("alternating sum is not divisible by r!"));
    }
    Ok(quotient.to_biguint().unwrap_or_else(|| {
        let (_, mag) = quotient.into_parts();
        mag
    }))
}

/// Natural log of a big integer, good to f64 precision at any size.
pub fn ln_biguint(x: &BigUint) -> f64 {
    if x.is_zero() {
        return f64::NEG_INFINITY;
    }
    let bits = x.bits();
    if bits <= 53 {
        (x.to_u64().unwrap() as f64).ln()
    } else {
        let shift = bits - 53;
        let top = (x >> shift).to_u64().unwrap() as f64;
        top.ln() + shift as f64 * std::f64::consts::LN_2
    }
}

/// Precomputed log masses of the grouping prior for one class count.
#[derive(Debug, Clone)]
pub struct PartitionPrior {
    cfg: PriorConfig,
    /// ln g(N+1, r) for r = 1..=N+1 (index 0 unused).
    ln_stirling: Vec<f64>,
    /// ln of the unnormalised per-partition mass for each r.
    ln_mass: Vec<f64>,
    /// ln sum_r g(N+1, r) * mass(r).
    ln_normaliser: f64,
}

impl PartitionPrior {
    pub fn new(cfg: PriorConfig) -> Self {
        let n = cfg.class_count;
        let row = stirling_row(n);
        let mut ln_stirling = vec![f64::NEG_INFINITY; n + 1];
        let mut ln_mass = vec![f64::NEG_INFINITY; n + 1];
        for r in 1..=n {
            ln_stirling[r] = ln_biguint(&row[r]);
            // p1 contributes a constant, p2 contributes 1/((N+1) g(N+1,r))
            ln_mass[r] = -cfg.gamma * ((n as f64).ln() + ln_stirling[r]);
        }
        let ln_normaliser = log_sum_exp(
            (1..=n)
                .map(|r| ln_stirling[r] + ln_mass[r])
                .collect::<Vec<_>>()
                .as_slice(),
        );
        PartitionPrior {
            cfg,
            ln_stirling,
            ln_mass,
            ln_normaliser,
        }
    }

    pub fn config(&self) -> &PriorConfig {
        &self.cfg
    }

    /// Unnormalised log mass of a partition with r groups; the mass
    /// depends on the partition only through r.
    pub fn log_partition_mass(&self, r: usize) -> Result<f64> {
        if r == 0 || r > self.cfg.class_count {
            return Err(Error::validation(format!(
                "r must lie in 1..={}, got {r}",
                self.cfg.class_count
            )));
        }
        Ok(self.ln_mass[r])
    }

    /// Exact log normaliser of the gamma-mix over all set partitions.
    pub fn log_normaliser(&self) -> f64 {
        self.ln_normaliser
    }

    /// Normalised log prior probability of a grouping.
    pub fn log_prior_partition(&self, groups: &[Vec<usize>]) -> Result<f64> {
        self.validate_partition(groups)?;
        Ok(self.ln_mass[groups.len()] - self.ln_normaliser)
    }

    /// Exact induced distribution of the number of groups.
    pub fn r_distribution(&self) -> Vec<f64> {
        (1..=self.cfg.class_count)
            .map(|r| (self.ln_stirling[r] + self.ln_mass[r] - self.ln_normaliser).exp())
            .collect()
    }

    fn validate_partition(&self, groups: &[Vec<usize>]) -> Result<()> {
        let n = self.cfg.class_count;
        if groups.is_empty() || groups.len() > n {
            return Err(Error::validation(format!(
                "partition must have between 1 and {n} groups"
            )));
        }
        let mut seen = vec![false; n];
        let mut covered = 0usize;
        for group in groups {
            if group.is_empty() {
                return Err(Error::validation("empty groups are not allowed"));
            }
            for &class in group {
                if class >= n || seen[class] {
                    return Err(Error::validation(format!(
                        "invalid partition: class {class} missing or repeated"
                    )));
                }
                seen[class] = true;
                covered += 1;
            }
        }
        if covered != n {
            return Err(Error::validation("partition does not cover all classes"));
        }
        Ok(())
    }

    pub fn ln_stirling(&self, r: usize) -> f64 {
        self.ln_stirling[r]
    }
}

/// Log density of the group values under the sum-to-zero restriction:
/// the unnormalised product of independent zero-mean Gaussians evaluated
/// on the constraint surface. This is the convention the sampler's
/// acceptance ratios pair with the split/merge Jacobians r/(r+1) and
/// r/(r-1); see `log_values_integral` for the induced per-r mass.
pub fn log_prior_values(values: &[f64], cfg: &PriorConfig) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::validation("values must be non-empty"));
    }
    let sum: f64 = values.iter().sum();
    if sum.abs() > SUM_TOLERANCE {
        return Err(Error::validation(format!(
            "group values must sum to zero (drift {sum:e})"
        )));
    }
    let var = cfg.sigma_phi * cfg.sigma_phi;
    let ln_norm = -0.5 * (2.0 * std::f64::consts::PI * var).ln();
    Ok(values
        .iter()
        .map(|v| ln_norm - v * v / (2.0 * var))
        .sum())
}

/// ln of the integral of the unnormalised value density over the
/// sum-to-zero surface of dimension r-1 (Lebesgue measure after dropping
/// one coordinate): -(1/2) ln(2 pi sigma^2) - (1/2) ln r. Together with
/// the grouping mass this gives the exact state prior the sampler leaves
/// invariant.
pub fn log_values_integral(r: usize, cfg: &PriorConfig) -> f64 {
    let var = cfg.sigma_phi * cfg.sigma_phi;
    -0.5 * (2.0 * std::f64::consts::PI * var).ln() - 0.5 * (r as f64).ln()
}

/// Exact distribution of r under the full state prior (grouping mass
/// times the per-r value-density integral), i.e. what a correctly coded
/// sampler reproduces in a prior-only run.
pub fn state_prior_r_distribution(prior: &PartitionPrior) -> Vec<f64> {
    let cfg = prior.config();
    let ln_weights: Vec<f64> = (1..=cfg.class_count)
        .map(|r| {
            prior.ln_stirling(r)
                + prior.log_partition_mass(r).unwrap()
                + log_values_integral(r, cfg)
        })
        .collect();
    let ln_total = log_sum_exp(&ln_weights);
    ln_weights.iter().map(|w| (w - ln_total).exp()).collect()
}

fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Uniform random partition of n items into exactly r non-empty groups,
/// by the Stirling recurrence: item n starts its own group with
/// probability g(n-1, r-1)/g(n, r), otherwise it joins one of the groups
/// of a uniform (n-1, r) partition.
pub fn sample_uniform_partition(
    n: usize,
    r: usize,
    rng: &mut impl rand::Rng,
) -> Result<Vec<Vec<usize>>> {
    if r == 0 || r > n {
        return Err(Error::validation(format!(
            "cannot partition {n} items into {r} groups"
        )));
    }
    // ln g(i, j) for i <= n
    let mut ln_g = vec![vec![f64::NEG_INFINITY; r + 1]; n + 1];
    ln_g[0][0] = 0.0;
    for i in 1..=n {
        for j in 1..=r.min(i) {
            let a = ln_g[i - 1][j] + (j as f64).ln();
            let b = ln_g[i - 1][j - 1];
            ln_g[i][j] = log_sum_exp(&[a, b]);
        }
    }
    // downward pass: does each item start a new block within the items
    // up to and including it?
    let mut starts_block = vec![false; n];
    let mut blocks = r;
    for item in (0..n).rev() {
        let i = item + 1;
        let p_new = if blocks == 0 {
            0.0
        } else {
            (ln_g[i - 1][blocks - 1] - ln_g[i][blocks]).exp()
        };
        if rng.random::<f64>() < p_new {
            starts_block[item] = true;
            blocks -= 1;
        }
    }
    debug_assert_eq!(blocks, 0);
    // forward pass: joins attach uniformly to the blocks formed so far
    let mut groups: Vec<Vec<usize>> = Vec::with_capacity(r);
    for item in 0..n {
        if starts_block[item] {
            groups.push(vec![item]);
        } else {
            let g = rng.random_range(0..groups.len());
            groups[g].push(item);
        }
    }
    debug_assert_eq!(groups.len(), r);
    Ok(groups)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn stirling_small_values() {
        assert_eq!(stirling2(3, 2).unwrap(), BigUint::from(3u32));
        assert_eq!(stirling2(11, 1).unwrap(), BigUint::from(1u32));
        assert_eq!(stirling2(11, 11).unwrap(), BigUint::from(1u32));
        assert_eq!(stirling2(11, 5).unwrap(), BigUint::from(246730u32));
        assert!(stirling2(3, 0).is_err());
        assert!(stirling2(3, 4).is_err());
    }

    #[test]
    fn stirling_row_sums_to_bell() {
        let row = stirling_row(11);
        let bell: BigUint = row.iter().sum();
        assert_eq!(bell, BigUint::from(678570u32));
    }

    #[test]
    fn alternating_sum_agrees_with_recurrence() {
        for n in 1..=20 {
            for r in 1..=n {
                assert_eq!(
                    stirling2(n, r).unwrap(),
                    stirling2_alternating(n, r).unwrap(),
                    "n={n} r={r}"
                );
            }
        }
    }

    #[test]
    fn r_mode_for_eleven_classes() {
        let row = stirling_row(11);
        let bell: BigUint = row.iter().sum();
        let p5 = row[5].to_f64().unwrap() / bell.to_f64().unwrap();
        assert!((p5 - 0.36).abs() < 0.005, "p(r=5) = {p5}");
        let p1 = row[1].to_f64().unwrap() / bell.to_f64().unwrap();
        assert!(p1 < 1e-5);
    }

    #[test]
    fn ln_biguint_handles_huge_numbers() {
        let row = stirling_row(401);
        let ln = ln_biguint(&row[200]);
        assert!(ln.is_finite() && ln > 500.0);
        let small = BigUint::from(123456u32);
        assert!((ln_biguint(&small) - (123456f64).ln()).abs() < 1e-12);
    }

    fn enumerate_partitions(n: usize, mut visit: impl FnMut(&[usize], usize)) {
        // restricted growth strings
        let mut code = vec![0usize; n];
        loop {
            let r = code.iter().cloned().max().unwrap() + 1;
            visit(&code, r);
            // advance
            let mut idx = n - 1;
            loop {
                if idx == 0 {
                    return;
                }
                let cap = code[..idx].iter().cloned().max().unwrap() + 1;
                if code[idx] < cap {
                    code[idx] += 1;
                    for later in code.iter_mut().skip(idx + 1) {
                        *later = 0;
                    }
                    break;
                }
                idx -= 1;
            }
        }
    }

    fn groups_from_code(code: &[usize], r: usize) -> Vec<Vec<usize>> {
        let mut groups = vec![Vec::new(); r];
        for (item, &g) in code.iter().enumerate() {
            groups[g].push(item);
        }
        groups
    }

    #[test]
    fn prior_sums_to_one_for_seven_classes() {
        for gamma in [0.0, 0.5, 1.0] {
            let prior = PartitionPrior::new(PriorConfig::new(gamma, 10.0, 7).unwrap());
            let mut total = 0.0;
            enumerate_partitions(7, |code, r| {
                let groups = groups_from_code(code, r);
                total += prior.log_prior_partition(&groups).unwrap().exp();
            });
            assert!((total - 1.0).abs() < 1e-10, "gamma={gamma}: {total}");
        }
    }

    #[test]
    fn gamma_zero_makes_partitions_equiprobable() {
        let prior = PartitionPrior::new(PriorConfig::new(0.0, 10.0, 11).unwrap());
        let single = prior.log_prior_partition(&[(0..11).collect()]).unwrap();
        let full: Vec<Vec<usize>> = (0..11).map(|c| vec![c]).collect();
        let split = prior.log_prior_partition(&full).unwrap();
        assert!((single - split).abs() < 1e-12);
        // p(r=1) is about 1e-6
        let pr = prior.r_distribution();
        assert!((pr[0] - 1.0 / 678570.0).abs() < 1e-12);
        assert!((pr[4] - 0.36).abs() < 0.005);
    }

    #[test]
    fn gamma_one_makes_r_uniform() {
        let prior = PartitionPrior::new(PriorConfig::new(1.0, 10.0, 11).unwrap());
        let pr = prior.r_distribution();
        for p in &pr {
            assert!((p - 1.0 / 11.0).abs() < 1e-12);
        }
        // p of the single-group partition is 1/11, matching 0.09
        let single = prior
            .log_prior_partition(&[(0..11).collect()])
            .unwrap()
            .exp();
        assert!((single - 1.0 / 11.0).abs() < 1e-12);
    }

    #[test]
    fn invalid_partitions_rejected() {
        let prior = PartitionPrior::new(PriorConfig::new(0.5, 10.0, 4).unwrap());
        assert!(prior.log_prior_partition(&[vec![0, 1, 2]]).is_err());
        assert!(prior
            .log_prior_partition(&[vec![0, 1], vec![1, 2, 3]])
            .is_err());
        assert!(prior
            .log_prior_partition(&[vec![0, 1, 2, 3], vec![]])
            .is_err());
    }

    #[test]
    fn values_prior_examples() {
        let cfg = PriorConfig::new(0.5, 10.0, 11).unwrap();
        let r = 3;
        let zeros = vec![0.0; r];
        let got = log_prior_values(&zeros, &cfg).unwrap();
        let want = -(r as f64) * (cfg.sigma_phi * (2.0 * std::f64::consts::PI).sqrt()).ln();
        assert!((got - want).abs() < 1e-12);

        // scaling up non-zero values strictly decreases the density
        let values = vec![1.0, -0.4, -0.6];
        let smaller = log_prior_values(&values, &cfg).unwrap();
        let scaled: Vec<f64> = values.iter().map(|v| v * 2.0).collect();
        assert!(log_prior_values(&scaled, &cfg).unwrap() < smaller);

        // ratio is the difference of quadratic forms over -2 sigma^2
        let other = vec![0.3, 0.5, -0.8];
        let lhs = log_prior_values(&other, &cfg).unwrap() - smaller;
        let q = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>();
        let rhs = (q(&values) - q(&other)) / (2.0 * cfg.sigma_phi * cfg.sigma_phi);
        assert!((lhs - rhs).abs() < 1e-12);

        // constraint violations error out
        assert!(log_prior_values(&[0.5, 0.2], &cfg).is_err());
    }

    #[test]
    fn uniform_partition_sampler_is_uniform() {
        // all g(4,2) = 7 partitions should be equally likely
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut counts: std::collections::HashMap<Vec<Vec<usize>>, usize> =
            std::collections::HashMap::new();
        let draws = 14000;
        for _ in 0..draws {
            let mut groups = sample_uniform_partition(4, 2, &mut rng).unwrap();
            for g in &mut groups {
                g.sort_unstable();
            }
            groups.sort();
            *counts.entry(groups).or_insert(0) += 1;
        }
        assert_eq!(counts.len(), 7);
        let expected = draws as f64 / 7.0;
        for (partition, count) in counts {
            let z = (count as f64 - expected) / (expected * (1.0 - 1.0 / 7.0)).sqrt();
            assert!(z.abs() < 4.0, "{partition:?}: {count}");
        }
    }

    #[test]
    fn uniform_partition_sampler_respects_r() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for r in 1..=6 {
            let groups = sample_uniform_partition(6, r, &mut rng).unwrap();
            assert_eq!(groups.len(), r);
            let mut all: Vec<usize> = groups.iter().flatten().cloned().collect();
            all.sort_unstable();
            assert_eq!(all, (0..6).collect::<Vec<_>>());
        }
    }
}
