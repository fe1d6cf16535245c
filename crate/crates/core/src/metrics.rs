//! List-wise reward functions.
//!
//! Relevance is binary (an item is relevant iff it is in the context's target
//! set) and NDCG discounts with `log2(i + 1)`. Genre distributions split each
//! item's unit mass equally across its genres, so they always normalize.

use std::fmt;
use std::str::FromStr;

use crate::envsim::{Catalog, UserContext};
use crate::error::{param, Error, Result};
use crate::ItemId;

/// An ordered recommendation list without duplicates.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct RecList(Vec<ItemId>);

impl RecList {
    pub fn new(items: Vec<ItemId>) -> Result<Self> {
        if items.is_empty() {
            return param("recommendation list must not be empty");
        }
        for (i, item) in items.iter().enumerate() {
            if items[..i].contains(item) {
                return param(format!("duplicate item {item} in recommendation list"));
            }
        }
        Ok(Self(items))
    }

    pub fn items(&self) -> &[ItemId] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<ItemId> {
        self.0
    }

    fn check_catalog(&self, catalog: &Catalog) -> Result<()> {
        match self.0.iter().find(|&&i| !catalog.contains(i)) {
            Some(bad) => param(format!("item {bad} is not in the catalog")),
            None => Ok(()),
        }
    }
}

impl std::ops::Deref for RecList {
    type Target = [ItemId];

    fn deref(&self) -> &[ItemId] {
        &self.0
    }
}

fn check_targets(targets: &[ItemId], k: usize) -> Result<()> {
    if targets.is_empty() {
        return param("target set must not be empty");
    }
    if k == 0 {
        return param("cutoff k must be >= 1");
    }
    Ok(())
}

pub fn recall_at_k(list: &[ItemId], targets: &[ItemId], k: usize) -> Result<f64> {
    check_targets(targets, k)?;
    let hits = list.iter().take(k).filter(|i| targets.contains(i)).count();
    Ok(hits as f64 / targets.len() as f64)
}

pub fn ndcg_at_k(list: &[ItemId], targets: &[ItemId], k: usize) -> Result<f64> {
    check_targets(targets, k)?;
    let discount = |pos: usize| 1.0 / ((pos + 2) as f64).log2();
    let dcg: f64 = list
        .iter()
        .take(k)
        .enumerate()
        .filter(|(_, i)| targets.contains(i))
        .map(|(pos, _)| discount(pos))
        .sum();
    let idcg: f64 = (0..k.min(targets.len())).map(discount).sum();
    Ok(dcg / idcg)
}

/// Normalized genre frequencies of a set of items.
#[derive(Debug, Clone, PartialEq)]
pub struct GenreDist {
    pub probs: Vec<f64>,
}

pub fn genre_dist(items: &[ItemId], catalog: &Catalog) -> Result<GenreDist> {
    if items.is_empty() {
        return param("cannot build a genre distribution from an empty item list");
    }
    let mut probs = vec![0.0; catalog.n_genres()];
    for &item in items {
        if !catalog.contains(item) {
            return param(format!("item {item} is not in the catalog"));
        }
        let set = catalog.genres_of(item);
        let share = 1.0 / set.len() as f64;
        for &g in set {
            probs[g] += share;
        }
    }
    let total = items.len() as f64;
    probs.iter_mut().for_each(|p| *p /= total);
    Ok(GenreDist { probs })
}

/// Mean absolute gap between the genre distributions of a list and a history.
/// Lower is fairer.
pub fn mgu(list: &[ItemId], history: &[ItemId], catalog: &Catalog) -> Result<f64> {
    let l = genre_dist(list, catalog)?;
    let h = genre_dist(history, catalog)?;
    Ok(mgu_from_dists(&l, &h))
}

pub fn mgu_from_dists(list: &GenreDist, history: &GenreDist) -> f64 {
    let n = list.probs.len();
    list.probs
        .iter()
        .zip(&history.probs)
        .map(|(a, b)| (a - b).abs())
        .sum::<f64>()
        / n as f64
}

fn jaccard_distance(a: &[usize], b: &[usize]) -> f64 {
    // Both sorted and deduplicated.
    let (mut i, mut j, mut inter) = (0, 0, 0usize);
    while i < a.len() && j < b.len() {
        match a[i].cmp(&b[j]) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                inter += 1;
                i += 1;
                j += 1;
            }
        }
    }
    let union = a.len() + b.len() - inter;
    1.0 - inter as f64 / union as f64
}

/// Intra-list diversity: mean Jaccard genre distance over ordered item pairs.
pub fn ild(list: &[ItemId], catalog: &Catalog) -> Result<f64> {
    let k = list.len();
    if k < 2 {
        return param(format!("ILD needs at least 2 items, got {k}"));
    }
    if let Some(bad) = list.iter().find(|&&i| !catalog.contains(i)) {
        return param(format!("item {bad} is not in the catalog"));
    }
    let mut sum = 0.0;
    for i in 0..k {
        for j in 0..k {
            if i != j {
                sum += jaccard_distance(catalog.genres_of(list[i]), catalog.genres_of(list[j]));
            }
        }
    }
    Ok(sum / (k * (k - 1)) as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RewardKind {
    Recall,
    Ndcg,
    Mgu,
    Ild,
    /// NDCG grounding minus `lambda` times MGU.
    Fair,
    /// NDCG grounding plus `lambda` times ILD.
    Div,
}

impl RewardKind {
    fn name(self) -> &'static str {
        match self {
            RewardKind::Recall => "recall",
            RewardKind::Ndcg => "ndcg",
            RewardKind::Mgu => "mgu",
            RewardKind::Ild => "ild",
            RewardKind::Fair => "fair",
            RewardKind::Div => "div",
        }
    }

    fn uses_cutoff(self) -> bool {
        !matches!(self, RewardKind::Mgu | RewardKind::Ild)
    }

    fn uses_lambda(self) -> bool {
        matches!(self, RewardKind::Fair | RewardKind::Div)
    }
}

/// Declarative list-wise reward.
///
/// String form: `recall@K`, `ndcg@K`, `mgu`, `ild`, `fair@K:lambda=X`,
/// `div@K:lambda=X`. The cutoff of `fair`/`div` applies to the NDCG grounding
/// term. `lambda` defaults to 0 when omitted.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RewardSpec {
    pub kind: RewardKind,
    pub k: usize,
    pub lambda: f64,
}

impl RewardSpec {
    pub fn ndcg(k: usize) -> Self {
        Self {
            kind: RewardKind::Ndcg,
            k,
            lambda: 0.0,
        }
    }

    pub fn recall(k: usize) -> Self {
        Self {
            kind: RewardKind::Recall,
            k,
            lambda: 0.0,
        }
    }

    pub fn fair(k: usize, lambda: f64) -> Self {
        Self {
            kind: RewardKind::Fair,
            k,
            lambda,
        }
    }

    pub fn div(k: usize, lambda: f64) -> Self {
        Self {
            kind: RewardKind::Div,
            k,
            lambda,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.kind.uses_cutoff() && self.k == 0 {
            return param(format!("reward {}: cutoff must be >= 1", self.kind.name()));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return param(format!(
                "reward lambda must be finite and >= 0, got {}",
                self.lambda
            ));
        }
        Ok(())
    }
}

impl fmt::Display for RewardSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.kind.name())?;
        if self.kind.uses_cutoff() {
            write!(f, "@{}", self.k)?;
        }
        if self.kind.uses_lambda() {
            write!(f, ":lambda={}", self.lambda)?;
        }
        Ok(())
    }
}

impl FromStr for RewardSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = |why: &str| Error::Parameter(format!("bad reward spec {s:?}: {why}"));
        let (head, opts) = match s.trim().split_once(':') {
            Some((h, o)) => (h, Some(o)),
            None => (s.trim(), None),
        };
        let (name, k) = match head.split_once('@') {
            Some((n, k)) => (
                n,
                Some(
                    k.parse::<usize>()
                        .map_err(|_| bad("cutoff is not an integer"))?,
                ),
            ),
            None => (head, None),
        };
        let kind = match name.to_ascii_lowercase().as_str() {
            "recall" => RewardKind::Recall,
            "ndcg" => RewardKind::Ndcg,
            "mgu" => RewardKind::Mgu,
            "ild" => RewardKind::Ild,
            "fair" => RewardKind::Fair,
            "div" => RewardKind::Div,
            _ => return Err(bad("unknown reward kind")),
        };
        let k = match (kind.uses_cutoff(), k) {
            (true, Some(k)) => k,
            (true, None) => return Err(bad("missing @cutoff")),
            (false, Some(_)) => return Err(bad("this reward takes no cutoff")),
            (false, None) => 0,
        };
        let mut lambda = 0.0;
        if let Some(opts) = opts {
            if !kind.uses_lambda() {
                return Err(bad("this reward takes no options"));
            }
            for opt in opts.split(',') {
                match opt.trim().split_once('=') {
                    Some(("lambda", v)) => {
                        lambda = v
                            .trim()
                            .parse()
                            .map_err(|_| bad("lambda is not a number"))?
                    }
                    _ => return Err(bad("unknown option")),
                }
            }
        }
        let spec = RewardSpec { kind, k, lambda };
        spec.validate()?;
        Ok(spec)
    }
}

/// Evaluates `spec` on `list` for the given context.
pub fn reward(
    spec: &RewardSpec,
    list: &RecList,
    ctx: &UserContext,
    catalog: &Catalog,
) -> Result<f64> {
    spec.validate()?;
    list.check_catalog(catalog)?;
    let value = match spec.kind {
        RewardKind::Recall => recall_at_k(list, &ctx.targets, spec.k)?,
        RewardKind::Ndcg => ndcg_at_k(list, &ctx.targets, spec.k)?,
        RewardKind::Mgu => mgu(list, &ctx.history, catalog)?,
        RewardKind::Ild => ild(list, catalog)?,
        RewardKind::Fair => {
            ndcg_at_k(list, &ctx.targets, spec.k)? - spec.lambda * mgu(list, &ctx.history, catalog)?
        }
        RewardKind::Div => {
            ndcg_at_k(list, &ctx.targets, spec.k)? + spec.lambda * ild(list, catalog)?
        }
    };
    Ok(value)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn catalog(genres: Vec<Vec<usize>>, n_genres: usize) -> Catalog {
        Catalog::new(n_genres, genres).unwrap()
    }

    #[test]
    fn reclist_rejects_duplicates_and_empty() {
        assert!(RecList::new(vec![]).is_err());
        assert!(RecList::new(vec![1, 2, 1]).is_err());
        assert!(RecList::new(vec![1, 2, 3]).is_ok());
    }

    #[test]
    fn recall_examples() {
        let targets: Vec<ItemId> = (100..110).collect();
        let list = [100, 1, 2, 105, 3, 101];
        assert_eq!(recall_at_k(&list, &targets, 5).unwrap(), 0.2);
        assert_eq!(recall_at_k(&[1, 2, 3], &targets, 3).unwrap(), 0.0);
        assert_eq!(recall_at_k(&[4, 5, 6], &[6, 5, 4], 10).unwrap(), 1.0);
        assert!(recall_at_k(&[1], &[], 1).is_err());
    }

    #[test]
    fn ndcg_examples() {
        assert_eq!(ndcg_at_k(&[7, 1, 2], &[7, 8, 9], 1).unwrap(), 1.0);
        let v = ndcg_at_k(&[1, 2, 7], &[7, 8, 9], 3).unwrap();
        let expected = 0.5 / (1.0 + 1.0 / 3f64.log2() + 0.5);
        assert_eq!(v, expected);
        assert!((v - 0.2346).abs() < 5e-5);
        assert_eq!(ndcg_at_k(&[1, 2, 3], &[7, 8, 9], 3).unwrap(), 0.0);
        assert!(ndcg_at_k(&[1], &[], 3).is_err());
    }

    #[test]
    fn genre_dist_examples() {
        let cat = catalog(vec![vec![0], vec![1], vec![0, 1]], 2);
        assert_eq!(genre_dist(&[0, 1], &cat).unwrap().probs, vec![0.5, 0.5]);
        assert_eq!(genre_dist(&[0, 0], &cat).unwrap().probs, vec![1.0, 0.0]);
        assert_eq!(genre_dist(&[2], &cat).unwrap().probs, vec![0.5, 0.5]);
        assert!(genre_dist(&[], &cat).is_err());
    }

    #[test]
    fn mgu_examples() {
        let cat = catalog(vec![vec![0], vec![1], vec![2]], 3);
        let two = catalog(vec![vec![0], vec![1]], 2);
        assert_eq!(mgu(&[0], &[0, 1], &two).unwrap(), 0.5);
        assert_eq!(mgu(&[0, 1], &[1, 0], &two).unwrap(), 0.0);
        assert_eq!(mgu(&[0], &[1], &cat).unwrap(), 2.0 / 3.0);
        assert!(mgu(&[], &[1], &cat).is_err());
        assert!(mgu(&[0], &[], &cat).is_err());
    }

    #[test]
    fn ild_examples() {
        let cat = catalog(vec![vec![0], vec![0], vec![1], vec![0, 1]], 2);
        assert_eq!(ild(&[0, 1], &cat).unwrap(), 0.0);
        assert_eq!(ild(&[0, 2], &cat).unwrap(), 1.0);
        assert_eq!(ild(&[0, 1, 2], &cat).unwrap(), 4.0 / 6.0);
        assert_eq!(ild(&[0, 3], &cat).unwrap(), 0.5);
        assert!(ild(&[0], &cat).is_err());
    }

    #[test]
    fn composite_rewards() {
        // Two genres; history is balanced, list is all genre 0.
        let cat = catalog(
            vec![vec![0], vec![1], vec![0], vec![0], vec![0], vec![1]],
            2,
        );
        let ctx = UserContext {
            id: 0,
            history: vec![0, 1],
            targets: vec![2, 3],
        };
        let list = RecList::new(vec![2, 4]).unwrap();
        let ndcg = ndcg_at_k(&list, &ctx.targets, 2).unwrap();
        let m = mgu(&list, &ctx.history, &cat).unwrap();
        assert_eq!(m, 0.5);

        let fair0 = reward(&RewardSpec::fair(2, 0.0), &list, &ctx, &cat).unwrap();
        assert_eq!(fair0, ndcg);
        let fair = reward(&RewardSpec::fair(2, 0.5), &list, &ctx, &cat).unwrap();
        assert_eq!(fair, ndcg - 0.25);

        let div_list = RecList::new(vec![2, 5]).unwrap();
        let div = reward(&RewardSpec::div(2, 0.5), &div_list, &ctx, &cat).unwrap();
        let ndcg_div = ndcg_at_k(&div_list, &ctx.targets, 2).unwrap();
        assert_eq!(div, ndcg_div + 0.5);
        assert_eq!(
            reward(&RewardSpec::div(2, 0.0), &div_list, &ctx, &cat).unwrap(),
            ndcg_div
        );
    }

    #[test]
    fn reward_rejects_unknown_items() {
        let cat = catalog(vec![vec![0], vec![1]], 2);
        let ctx = UserContext {
            id: 0,
            history: vec![0],
            targets: vec![1],
        };
        let list = RecList::new(vec![5]).unwrap();
        assert!(reward(&RewardSpec::ndcg(1), &list, &ctx, &cat).is_err());
    }

    #[test]
    fn spec_strings() {
        for s in [
            "ndcg@5",
            "recall@3",
            "fair@5:lambda=0.5",
            "div@5:lambda=0.1",
            "mgu",
            "ild",
        ] {
            let spec: RewardSpec = s.parse().unwrap();
            assert_eq!(spec.to_string(), s);
        }
        let spec: RewardSpec = "fair@5".parse().unwrap();
        assert_eq!(spec.lambda, 0.0);
        for bad in [
            "ndcg",
            "ndcg@x",
            "ndcg@0",
            "foo@3",
            "mgu@3",
            "ndcg@5:lambda=1",
            "fair@5:lambda=-1",
            "fair@5:mu=1",
        ] {
            assert!(bad.parse::<RewardSpec>().is_err(), "{bad}");
        }
    }
}
