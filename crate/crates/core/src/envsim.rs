//! Synthetic recommendation world.
//!
//! A [`Catalog`] assigns genre sets to items. Each [`UserContext`] is built by
//! drawing a latent per-genre preference, scoring every item by the mean
//! preference of its genres plus a little uniform noise, and cutting the
//! resulting ranking into a history slice followed by a disjoint target slice.
//! The latent preference is dropped once the ranking is cut, so every reward
//! downstream is a function of `(list, context, catalog)` alone.
//!
//! # Dataset file
//!
//! JSON lines. The first line is the header
//!
//! ```text
//! {"version":1,"n_items":50,"n_genres":5,"seed":7,"genres":[[0,3],[2],...]}
//! ```
//!
//! and every following line is one context
//!
//! ```text
//! {"id":0,"history":[12,4,...],"targets":[1,9,...]}
//! ```
//!
//! `genres[i]` is the sorted genre set of item `i`; `targets` is stored sorted.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{io_err, param, Error, Result};
use crate::ItemId;

pub const DATASET_VERSION: u32 = 1;

/// Relative magnitude of the ranking noise, as a fraction of the score range.
const RANKING_NOISE: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Catalog {
    n_genres: usize,
    genres: Vec<Vec<usize>>,
}

impl Catalog {
    /// Builds a catalog from explicit genre sets, validating every invariant.
    pub fn new(n_genres: usize, mut genres: Vec<Vec<usize>>) -> Result<Self> {
        if genres.len() < 2 {
            return param(format!(
                "catalog needs at least 2 items, got {}",
                genres.len()
            ));
        }
        if n_genres == 0 {
            return param("catalog needs at least one genre");
        }
        for (item, set) in genres.iter_mut().enumerate() {
            set.sort_unstable();
            set.dedup();
            if set.is_empty() {
                return param(format!("item {item} has no genre"));
            }
            if let Some(&g) = set.iter().find(|&&g| g >= n_genres) {
                return param(format!("item {item} has genre {g} outside [0, {n_genres})"));
            }
        }
        Ok(Self { n_genres, genres })
    }

    pub fn n_items(&self) -> usize {
        self.genres.len()
    }

    pub fn n_genres(&self) -> usize {
        self.n_genres
    }

    /// Sorted genre set of `item`.
    pub fn genres_of(&self, item: ItemId) -> &[usize] {
        &self.genres[item]
    }

    pub fn genres(&self) -> &[Vec<usize>] {
        &self.genres
    }

    pub fn contains(&self, item: ItemId) -> bool {
        item < self.genres.len()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UserContext {
    pub id: usize,
    pub history: Vec<ItemId>,
    /// Ground-truth relevant items, sorted ascending.
    pub targets: Vec<ItemId>,
}

impl UserContext {
    fn validate(&self, catalog: &Catalog) -> Result<()> {
        if self.targets.is_empty() {
            return param(format!("context {} has no targets", self.id));
        }
        if let Some(&bad) = self
            .history
            .iter()
            .chain(&self.targets)
            .find(|&&i| !catalog.contains(i))
        {
            return param(format!("context {} references unknown item {bad}", self.id));
        }
        if self.history.iter().any(|h| self.targets.contains(h)) {
            return param(format!(
                "context {} has overlapping history and targets",
                self.id
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Dataset {
    pub catalog: Catalog,
    pub contexts: Vec<UserContext>,
    pub seed: u64,
}

impl Dataset {
    pub fn n_contexts(&self) -> usize {
        self.contexts.len()
    }

    pub fn n_items(&self) -> usize {
        self.catalog.n_items()
    }
}

pub fn generate_catalog(
    seed: u64,
    n_items: usize,
    n_genres: usize,
    max_genres_per_item: usize,
) -> Result<Catalog> {
    if n_items < 2 {
        return param(format!("n_items must be >= 2, got {n_items}"));
    }
    if n_genres == 0 {
        return param("n_genres must be >= 1");
    }
    if max_genres_per_item == 0 || max_genres_per_item > n_genres {
        return param(format!(
            "max_genres_per_item must be in [1, {n_genres}], got {max_genres_per_item}"
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let genres = (0..n_items)
        .map(|_| {
            let count = rng.gen_range(1..=max_genres_per_item);
            index::sample(&mut rng, n_genres, count).into_vec()
        })
        .collect();
    Catalog::new(n_genres, genres)
}

pub fn generate_contexts(
    catalog: &Catalog,
    seed: u64,
    n_contexts: usize,
    history_len: usize,
    target_len: usize,
) -> Result<Dataset> {
    let n_items = catalog.n_items();
    if target_len == 0 {
        return param("target_len must be >= 1");
    }
    if history_len + target_len > n_items {
        return param(format!(
            "history_len + target_len = {} exceeds catalog size {n_items}",
            history_len + target_len
        ));
    }
    // Distinct stream from the catalog generator even when seeds coincide.
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut contexts = Vec::with_capacity(n_contexts);
    for id in 0..n_contexts {
        let latent_pref: Vec<f64> = (0..catalog.n_genres())
            .map(|_| rng.gen_range(-1.0..1.0))
            .collect();
        let base: Vec<f64> = catalog
            .genres()
            .iter()
            .map(|set| set.iter().map(|&g| latent_pref[g]).sum::<f64>() / set.len() as f64)
            .collect();
        let (lo, hi) = base
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &s| {
                (lo.min(s), hi.max(s))
            });
        let noise = RANKING_NOISE * (hi - lo);
        let scores: Vec<f64> = base.iter().map(|&s| s + noise * rng.gen::<f64>()).collect();

        let mut ranking: Vec<ItemId> = (0..n_items).collect();
        ranking.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));

        let history = ranking[..history_len].to_vec();
        let mut targets = ranking[history_len..history_len + target_len].to_vec();
        targets.sort_unstable();
        contexts.push(UserContext {
            id,
            history,
            targets,
        });
    }
    Ok(Dataset {
        catalog: catalog.clone(),
        contexts,
        seed,
    })
}

#[derive(Serialize, Deserialize)]
struct Header {
    version: u32,
    n_items: usize,
    n_genres: usize,
    seed: u64,
    genres: Vec<Vec<usize>>,
}

pub fn save_dataset(ds: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = fs::File::create(path).map_err(io_err(path))?;
    let mut out = BufWriter::new(file);
    write_dataset(ds, &mut out).map_err(io_err(path))?;
    out.flush().map_err(io_err(path))
}

pub fn write_dataset(ds: &Dataset, out: &mut impl Write) -> std::io::Result<()> {
    let header = Header {
        version: DATASET_VERSION,
        n_items: ds.catalog.n_items(),
        n_genres: ds.catalog.n_genres(),
        seed: ds.seed,
        genres: ds.catalog.genres.clone(),
    };
    serde_json::to_writer(&mut *out, &header)?;
    writeln!(out)?;
    for ctx in &ds.contexts {
        serde_json::to_writer(&mut *out, ctx)?;
        writeln!(out)?;
    }
    Ok(())
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let file = fs::File::open(path).map_err(io_err(path))?;
    read_dataset(BufReader::new(file)).map_err(|e| match e {
        Error::Io { source, .. } => Error::Io {
            path: path.to_path_buf(),
            source,
        },
        other => other,
    })
}

pub fn read_dataset(input: impl BufRead) -> Result<Dataset> {
    let mut lines = input.lines().enumerate();
    let header: Header = match lines.next() {
        Some((_, line)) => {
            let line = line.map_err(io_err(""))?;
            // Check the version before the full schema so newer files fail clearly.
            let raw: serde_json::Value = parse_line(&line, 1)?;
            let version = raw
                .get("version")
                .and_then(|v| v.as_u64())
                .ok_or(Error::Parse {
                    line: 1,
                    message: "header is missing \"version\"".into(),
                })?;
            if version != u64::from(DATASET_VERSION) {
                return Err(Error::Version {
                    found: version as u32,
                    expected: DATASET_VERSION,
                });
            }
            serde_json::from_value(raw).map_err(|e| Error::Parse {
                line: 1,
                message: e.to_string(),
            })?
        }
        None => {
            return Err(Error::Parse {
                line: 1,
                message: "empty file, expected a header record".into(),
            })
        }
    };
    if header.genres.len() != header.n_items {
        return Err(Error::Parse {
            line: 1,
            message: format!(
                "header declares {} items but lists {} genre sets",
                header.n_items,
                header.genres.len()
            ),
        });
    }
    let catalog = Catalog::new(header.n_genres, header.genres).map_err(|e| Error::Parse {
        line: 1,
        message: e.to_string(),
    })?;

    let mut contexts = Vec::new();
    for (idx, line) in lines {
        let line = line.map_err(io_err(""))?;
        if line.trim().is_empty() {
            continue;
        }
        let lineno = idx + 1;
        let ctx: UserContext = parse_line(&line, lineno)?;
        ctx.validate(&catalog).map_err(|e| Error::Parse {
            line: lineno,
            message: e.to_string(),
        })?;
        contexts.push(ctx);
    }
    Ok(Dataset {
        catalog,
        contexts,
        seed: header.seed,
    })
}

fn parse_line<T: serde::de::DeserializeOwned>(line: &str, lineno: usize) -> Result<T> {
    serde_json::from_str(line).map_err(|e| Error::Parse {
        line: lineno,
        message: e.to_string(),
    })
}
