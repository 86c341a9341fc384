//! Shared helpers for integration suites.
#![allow(dead_code)]

/// Batch-means standard error of the mean for an autocorrelated series.
pub fn batch_means_se(series: &[f64]) -> f64 {
    let n = series.len();
    let batches = (n as f64).sqrt() as usize;
    let size = n / batches;
    let used = batches * size;
    let mean = series[..used].iter().sum::<f64>() / used as f64;
    let mut var = 0.0;
    for b in 0..batches {
        let batch = &series[b * size..(b + 1) * size];
        let bm = batch.iter().sum::<f64>() / size as f64;
        var += (bm - mean) * (bm - mean);
    }
    (var / (batches as f64 * (batches as f64 - 1.0))).sqrt()
}

pub fn mean(series: &[f64]) -> f64 {
    series.iter().sum::<f64>() / series.len() as f64
}

/// Standard error of the mean for independent draws.
pub fn iid_se(series: &[f64]) -> f64 {
    let m = mean(series);
    let var = series.iter().map(|v| (v - m) * (v - m)).sum::<f64>()
        / (series.len() as f64 - 1.0);
    (var / series.len() as f64).sqrt()
}

/// Geweke-style two-sample z score: chain side uses batch means, prior
/// side i.i.d. standard errors.
pub fn geweke_z(chain: &[f64], prior: &[f64]) -> f64 {
    let se_chain = batch_means_se(chain);
    let se_prior = iid_se(prior);
    (mean(chain) - mean(prior)) / (se_chain * se_chain + se_prior * se_prior).sqrt()
}

/// Visits every set partition of n items as a restricted growth string
/// together with its group count.
pub fn enumerate_partitions(n: usize, mut visit: impl FnMut(&[usize], usize)) {
    let mut code = vec![0usize; n];
    loop {
        let r = code.iter().cloned().max().unwrap() + 1;
        visit(&code, r);
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

pub fn groups_from_code(code: &[usize], r: usize) -> Vec<Vec<usize>> {
    let mut groups = vec![Vec::new(); r];
    for (item, &g) in code.iter().enumerate() {
        groups[g].push(item);
    }
    groups
}
