//! Independent oracles shared by the integration suites. Nothing here calls
//! the code paths it is used to check.
#![allow(dead_code)]

use blade_core::policy::{LogitTable, PolicyParams};
use rand::Rng;

/// Linear-scan count of values strictly below `r`.
pub fn scan_below(values: &[f64], r: f64) -> usize {
    values.iter().filter(|&&v| v < r).count()
}

/// CDF estimate from the raw counts, written out directly.
pub fn closed_form_cdf(reference: &[f64], group: &[f64], tau: f64, r: f64) -> f64 {
    let n_ref = scan_below(reference, r) as f64;
    let n_batch = scan_below(group, r) as f64;
    (n_ref + tau * n_batch) / (reference.len() as f64 + tau * group.len() as f64)
}

/// Empirical strict CDF of the pooled multiset `reference ++ group`.
pub fn pooled_cdf(reference: &[f64], group: &[f64], r: f64) -> f64 {
    let pooled: Vec<f64> = reference.iter().chain(group).copied().collect();
    scan_below(&pooled, r) as f64 / pooled.len() as f64
}

/// Law of the reward-argmax of `n` i.i.d. draws, by enumerating all
/// `support^n` tuples. Rewards must be distinct.
pub fn brute_force_bon(probs: &[f64], rewards: &[f64], n: u32) -> Vec<f64> {
    let s = probs.len();
    let mut out = vec![0.0; s];
    let mut tuple = vec![0usize; n as usize];
    loop {
        let p: f64 = tuple.iter().map(|&i| probs[i]).product();
        let best = *tuple
            .iter()
            .max_by(|&&a, &&b| rewards[a].partial_cmp(&rewards[b]).unwrap())
            .unwrap();
        out[best] += p;
        // odometer increment
        let mut pos = 0;
        loop {
            if pos == tuple.len() {
                return out;
            }
            tuple[pos] += 1;
            if tuple[pos] < s {
                break;
            }
            tuple[pos] = 0;
            pos += 1;
        }
    }
}

/// Central finite-difference gradient of `f` at `table`.
pub fn fd_gradient(table: &LogitTable, h: f64, mut f: impl FnMut(&LogitTable) -> f64) -> Vec<f64> {
    let mut probe = table.clone();
    (0..table.as_slice().len())
        .map(|i| {
            let x = table.as_slice()[i];
            probe.as_mut_slice()[i] = x + h;
            let up = f(&probe);
            probe.as_mut_slice()[i] = x - h;
            let down = f(&probe);
            probe.as_mut_slice()[i] = x;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Max elementwise relative error, with an absolute floor on the scale.
pub fn max_rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(1e-6))
        .fold(0.0, f64::max)
}

/// Probability of an ordered list under a tempered, masked softmax, computed
/// step by step from the raw logits.
pub fn list_probability(logits: &[f64], list: &[usize], temperature: f64) -> f64 {
    let mut used = vec![false; logits.len()];
    let mut p = 1.0;
    for &item in list {
        let z: f64 = (0..logits.len())
            .filter(|&j| !used[j])
            .map(|j| (logits[j] / temperature).exp())
            .sum();
        p *= (logits[item] / temperature).exp() / z;
        used[item] = true;
    }
    p
}

/// Every ordered list of `k` distinct items out of `n`.
pub fn all_lists(n: usize, k: usize) -> Vec<Vec<usize>> {
    fn rec(n: usize, k: usize, prefix: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if prefix.len() == k {
            out.push(prefix.clone());
            return;
        }
        for i in 0..n {
            if !prefix.contains(&i) {
                prefix.push(i);
                rec(n, k, prefix, out);
                prefix.pop();
            }
        }
    }
    let mut out = Vec::new();
    rec(n, k, &mut Vec::new(), &mut out);
    out
}

/// Expected NDCG@k of a uniformly random list of length `k` over `n_items`:
/// each position holds a target with probability `|targets| / n_items`.
pub fn uniform_expected_ndcg(n_items: usize, n_targets: usize, k: usize) -> f64 {
    let disc = |i: usize| 1.0 / ((i + 2) as f64).log2();
    let hit = n_targets as f64 / n_items as f64;
    let dcg: f64 = (0..k).map(|i| hit * disc(i)).sum();
    let idcg: f64 = (0..k.min(n_targets)).map(disc).sum();
    dcg / idcg
}

/// Random policy with logits in `[-scale, scale]`.
pub fn random_params<R: Rng>(
    rng: &mut R,
    contexts: usize,
    items: usize,
    k: usize,
    scale: f64,
) -> PolicyParams {
    let data = (0..contexts * items)
        .map(|_| rng.gen_range(-scale..scale))
        .collect();
    PolicyParams::from_logits(LogitTable::from_vec(contexts, items, data).unwrap(), k).unwrap()
}

/// `n` random distinct rewards.
pub fn distinct_rewards<R: Rng>(rng: &mut R, n: usize) -> Vec<f64> {
    let mut out: Vec<f64> = Vec::with_capacity(n);
    while out.len() < n {
        let r = (rng.gen_range(-100..100) as f64) / 10.0;
        if !out.contains(&r) {
            out.push(r);
        }
    }
    out
}

/// `n` probabilities that sum to exactly 1 (the last absorbs rounding).
pub fn random_simplex<R: Rng>(rng: &mut R, n: usize) -> Vec<f64> {
    let raw: Vec<f64> = (0..n).map(|_| rng.gen_range(0.05..1.0)).collect();
    let total: f64 = raw.iter().sum();
    let mut p: Vec<f64> = raw.iter().map(|x| x / total).collect();
    let head: f64 = p[..n - 1].iter().sum();
    p[n - 1] = 1.0 - head;
    p
}
