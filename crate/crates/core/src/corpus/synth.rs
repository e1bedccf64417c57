//! Synthetic dual-intent interaction logs.
//!
//! Every user has a fixed inherent vector and, each day, a demand vector
//! drawn from a few recurring demand topics. A click picks the item with the
//! highest `<inherent + demand, item>` utility after Gumbel noise. Search
//! clicks carry a query made of the terms that score highest against the
//! demand vector under a planted term map, so the demand is recoverable from
//! queries in principle.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::{CorpusError, RawRecord, Result, Scenario};

#[derive(Debug, Clone, PartialEq)]
pub struct WorldConfig {
    pub users: usize,
    pub items: usize,
    pub terms: usize,
    pub days: u32,
    pub latent_dim: usize,
    /// Clicks per (user, day) are uniform in `min_clicks..=max_clicks`.
    pub min_clicks: usize,
    pub max_clicks: usize,
    pub p_search: f64,
    /// Gumbel noise scale on item utilities; 0 gives the exact argmax.
    pub noise: f64,
    pub topics: usize,
    pub topics_per_user: usize,
    /// Probability that a day's demand topic repeats the previous day's.
    pub persistence: f64,
    pub inherent_scale: f64,
    pub demand_scale: f64,
    pub demand_jitter: f64,
    pub query_noise: f64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            users: 2000,
            items: 300,
            terms: 50,
            days: 8,
            latent_dim: 8,
            min_clicks: 1,
            max_clicks: 4,
            p_search: 0.6,
            noise: 0.5,
            topics: 12,
            topics_per_user: 6,
            persistence: 0.8,
            inherent_scale: 1.0,
            demand_scale: 1.5,
            demand_jitter: 0.3,
            query_noise: 0.3,
        }
    }
}

macro_rules! world_fields {
    ($m:ident) => {
        $m!(users, usize);
        $m!(items, usize);
        $m!(terms, usize);
        $m!(days, u32);
        $m!(latent_dim, usize);
        $m!(min_clicks, usize);
        $m!(max_clicks, usize);
        $m!(p_search, f64);
        $m!(noise, f64);
        $m!(topics, usize);
        $m!(topics_per_user, usize);
        $m!(persistence, f64);
        $m!(inherent_scale, f64);
        $m!(demand_scale, f64);
        $m!(demand_jitter, f64);
        $m!(query_noise, f64);
    };
}

impl WorldConfig {
    /// `(key, value)` pairs in a fixed order.
    pub fn to_pairs(&self) -> Vec<(String, String)> {
        let mut out = Vec::new();
        macro_rules! push {
            ($f:ident, $t:ty) => {
                out.push((stringify!($f).to_string(), self.$f.to_string()));
            };
        }
        world_fields!(push);
        out
    }

    /// Sets one field from text; returns false for an unknown key.
    pub fn set(&mut self, key: &str, value: &str) -> std::result::Result<bool, String> {
        macro_rules! set {
            ($f:ident, $t:ty) => {
                if key == stringify!($f) {
                    self.$f = value
                        .parse::<$t>()
                        .map_err(|e| format!("world.{key}: {e}"))?;
                    return Ok(true);
                }
            };
        }
        world_fields!(set);
        Ok(false)
    }

    fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(CorpusError::Config(format!("degenerate world: {m}")));
        if self.users == 0 || self.items == 0 || self.terms == 0 || self.days == 0 {
            return bad("users, items, terms and days must be positive");
        }
        if self.latent_dim == 0 || self.topics == 0 || self.topics_per_user == 0 {
            return bad("latent_dim, topics and topics_per_user must be positive");
        }
        if self.min_clicks == 0 || self.min_clicks > self.max_clicks {
            return bad("need 1 <= min_clicks <= max_clicks");
        }
        if !(0.0..=1.0).contains(&self.p_search) || !(0.0..=1.0).contains(&self.persistence) {
            return bad("probabilities must lie in [0, 1]");
        }
        if self.noise < 0.0 || self.query_noise < 0.0 {
            return bad("noise scales must be non-negative");
        }
        Ok(())
    }
}

/// The planted structure behind a synthetic dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticWorld {
    pub config: WorldConfig,
    pub seed: u64,
    pub inherent: Vec<Vec<f64>>,
    /// `demand[user][day]`
    pub demand: Vec<Vec<Vec<f64>>>,
    pub items: Vec<Vec<f64>>,
    pub term_map: Vec<Vec<f64>>,
    pub term_names: Vec<String>,
}

impl SyntheticWorld {
    pub fn manifest(&self) -> String {
        let mut out = String::from("# synthetic world manifest\n");
        out.push_str(&format!("seed={}\n", self.seed));
        for (k, v) in self.config.to_pairs() {
            out.push_str(&format!("world.{k}={v}\n"));
        }
        out
    }

    pub fn write_manifest(&self, path: &Path) -> Result<()> {
        fs::write(path, self.manifest()).map_err(|e| CorpusError::io(path, e))
    }

    /// Reads `seed` and `world.*` keys back from a manifest.
    pub fn read_manifest(path: &Path) -> Result<(WorldConfig, u64)> {
        let text = fs::read_to_string(path).map_err(|e| CorpusError::io(path, e))?;
        let mut cfg = WorldConfig::default();
        let mut seed = None;
        let kv: BTreeMap<_, _> = text
            .lines()
            .filter(|l| !l.starts_with('#') && !l.trim().is_empty())
            .filter_map(|l| l.split_once('='))
            .collect();
        for (k, v) in kv {
            if k == "seed" {
                seed = Some(v.parse().map_err(|e| CorpusError::Config(format!("seed: {e}")))?);
            } else if let Some(field) = k.strip_prefix("world.") {
                if !cfg.set(field, v).map_err(CorpusError::Config)? {
                    return Err(CorpusError::Config(format!("unknown manifest key `{k}`")));
                }
            }
        }
        let seed = seed.ok_or_else(|| CorpusError::Config("manifest without seed".into()))?;
        Ok((cfg, seed))
    }
}

fn normal_vec(rng: &mut ChaCha8Rng, dim: usize, scale: f64) -> Vec<f64> {
    (0..dim)
        .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
        .collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn gumbel(rng: &mut ChaCha8Rng) -> f64 {
    let u: f64 = rng.random_range(f64::MIN_POSITIVE..1.0);
    -(-u.ln()).ln()
}

/// Generates records in chronological order (day, then user).
pub fn synthesize_dataset(config: &WorldConfig, seed: u64) -> Result<(Vec<RawRecord>, SyntheticWorld)> {
    config.validate()?;
    let c = config;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k = c.latent_dim;

    let item_scale = 1.0 / (k as f64).sqrt();
    let items: Vec<_> = (0..c.items).map(|_| normal_vec(&mut rng, k, item_scale)).collect();
    let term_map: Vec<_> = (0..c.terms).map(|_| normal_vec(&mut rng, k, 1.0)).collect();
    let prototypes: Vec<_> = (0..c.topics)
        .map(|_| normal_vec(&mut rng, k, c.demand_scale))
        .collect();
    let inherent: Vec<_> = (0..c.users)
        .map(|_| normal_vec(&mut rng, k, c.inherent_scale))
        .collect();

    let topic_ids: Vec<usize> = (0..c.topics).collect();
    let mut demand = Vec::with_capacity(c.users);
    for _ in 0..c.users {
        let favourites: Vec<usize> = topic_ids
            .choose_multiple(&mut rng, c.topics_per_user.min(c.topics))
            .copied()
            .collect();
        let mut topic = *favourites.choose(&mut rng).expect("non-empty");
        let mut per_day = Vec::with_capacity(c.days as usize);
        for day in 0..c.days {
            if day > 0 && !rng.random_bool(c.persistence) {
                topic = *favourites.choose(&mut rng).expect("non-empty");
            }
            let jitter = normal_vec(&mut rng, k, c.demand_jitter * c.demand_scale);
            per_day.push(prototypes[topic].iter().zip(&jitter).map(|(p, j)| p + j).collect());
        }
        demand.push(per_day);
    }

    let term_names: Vec<String> = (0..c.terms).map(|t| format!("t{t:03}")).collect();
    let mut records = Vec::new();
    for day in 0..c.days {
        for user in 0..c.users {
            let dem: &Vec<f64> = &demand[user][day as usize];
            let intent: Vec<f64> = inherent[user].iter().zip(dem).map(|(a, b)| a + b).collect();
            let clicks = rng.random_range(c.min_clicks..=c.max_clicks);
            for _ in 0..clicks {
                let mut best = (f64::NEG_INFINITY, 0usize);
                for (i, v) in items.iter().enumerate() {
                    let mut s = dot(&intent, v);
                    if c.noise > 0.0 {
                        s += c.noise * gumbel(&mut rng);
                    }
                    if s > best.0 {
                        best = (s, i);
                    }
                }
                let search = rng.random_bool(c.p_search);
                let terms = if search {
                    query_terms(&mut rng, c, &term_map, dem)
                        .into_iter()
                        .map(|t| term_names[t].clone())
                        .collect()
                } else {
                    Vec::new()
                };
                records.push(RawRecord {
                    scenario: if search { Scenario::Search } else { Scenario::Rec },
                    user,
                    item: best.1,
                    day,
                    terms,
                });
            }
        }
    }

    let world = SyntheticWorld {
        config: c.clone(),
        seed,
        inherent,
        demand,
        items,
        term_map,
        term_names,
    };
    Ok((records, world))
}

/// Top-scoring terms for a demand vector; length 1-3 with mean about 1.7.
fn query_terms(rng: &mut ChaCha8Rng, c: &WorldConfig, term_map: &[Vec<f64>], demand: &[f64]) -> Vec<usize> {
    let norm = dot(demand, demand).sqrt().max(1e-12);
    let mut scored: Vec<(f64, usize)> = term_map
        .iter()
        .enumerate()
        .map(|(t, tv)| {
            let mut s = dot(tv, demand) / norm;
            if c.query_noise > 0.0 {
                s += c.query_noise * gumbel(rng);
            }
            (s, t)
        })
        .collect();
    scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    let u: f64 = rng.random();
    let len = if u < 0.45 {
        1
    } else if u < 0.85 {
        2
    } else {
        3
    };
    scored.iter().take(len.min(c.terms)).map(|&(_, t)| t).collect()
}
