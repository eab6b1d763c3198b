use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{stream_seed, Interaction, InteractionLog};
use crate::{Error, Result};

const BASE_TIMESTAMP: i64 = 1_600_000_000;

/// Parameters of the synthetic Markov benchmark.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub users: usize,
    pub items: usize,
    /// Number of most recent items the next-item distribution conditions on.
    pub markov_order: usize,
    pub seed: u64,
    pub min_len: usize,
    pub max_len: usize,
    /// Successors per item in the transition graph.
    pub successors: usize,
    pub zipf_exponent: f64,
    /// Probability mass routed through the successor graph; the rest follows popularity.
    pub follow: f64,
    /// When false an item is never consumed twice by the same user.
    pub allow_repeats: bool,
}

impl SynthConfig {
    pub fn new(users: usize, items: usize, markov_order: usize, seed: u64) -> Self {
        Self {
            users,
            items,
            markov_order,
            seed,
            min_len: 20,
            max_len: 40,
            successors: 3,
            zipf_exponent: 1.0,
            follow: 0.75,
            allow_repeats: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.items < 50 {
            return Err(Error::config(format!("synthetic generator needs at least 50 items, got {}", self.items)));
        }
        if self.markov_order == 0 {
            return Err(Error::config("markov order must be at least 1"));
        }
        if self.min_len < 12 || self.min_len > self.max_len || self.max_len >= self.items {
            return Err(Error::config(format!(
                "sequence lengths {}..={} must satisfy 12 <= min <= max < items",
                self.min_len, self.max_len
            )));
        }
        if self.successors == 0 || self.successors >= self.items {
            return Err(Error::config("successor count must be in 1..items"));
        }
        if !(0.0..=1.0).contains(&self.follow) {
            return Err(Error::config("follow probability must be in [0, 1]"));
        }
        Ok(())
    }
}

/// A seeded item-transition chain with Zipf popularity. Items are indexed
/// `0..items` and exported as `i{index}`; users as `u{index}`.
#[derive(Clone, Debug)]
pub struct SynthGenerator {
    config: SynthConfig,
    popularity: Vec<f64>,
    /// Per item: (successor, weight) with weights summing to one.
    successors: Vec<Vec<(usize, f64)>>,
}

impl SynthGenerator {
    pub fn new(config: SynthConfig) -> Result<Self> {
        config.validate()?;
        let n = config.items;
        let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(config.seed, u64::MAX, 0));
        let ranks = index::sample(&mut rng, n, n);
        let mut popularity = vec![0.0; n];
        for (rank, item) in ranks.iter().enumerate() {
            popularity[item] = 1.0 / ((rank + 1) as f64).powf(config.zipf_exponent);
        }
        let total: f64 = popularity.iter().sum();
        popularity.iter_mut().for_each(|p| *p /= total);

        let successors = (0..n)
            .map(|item| {
                let picks = index::sample(&mut rng, n - 1, config.successors);
                let raw: Vec<f64> = (0..config.successors).map(|_| rng.random_range(0.5..1.5)).collect();
                let sum: f64 = raw.iter().sum();
                picks
                    .iter()
                    .zip(raw)
                    .map(|(p, w)| (if p >= item { p + 1 } else { p }, w / sum))
                    .collect()
            })
            .collect();
        Ok(Self { config, popularity, successors })
    }

    pub fn config(&self) -> &SynthConfig {
        &self.config
    }

    pub fn popularity(&self) -> &[f64] {
        &self.popularity
    }

    /// Next-item distribution given the history so far (most recent last),
    /// before any no-repeat restriction.
    pub fn transition_probs(&self, history: &[usize]) -> Vec<f64> {
        let context = &history[history.len().saturating_sub(self.config.markov_order)..];
        if context.is_empty() {
            return self.popularity.clone();
        }
        let follow = self.config.follow;
        let mut probs: Vec<f64> = self.popularity.iter().map(|p| (1.0 - follow) * p).collect();
        let share = follow / context.len() as f64;
        for &prev in context {
            for &(next, w) in &self.successors[prev] {
                probs[next] += share * w;
            }
        }
        probs
    }

    /// Item indices consumed by one user.
    pub fn user_sequence(&self, user: usize) -> Vec<usize> {
        let cfg = &self.config;
        let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(cfg.seed, user as u64, 0));
        let len = rng.random_range(cfg.min_len..=cfg.max_len);
        let mut seen = vec![false; cfg.items];
        let mut seq = Vec::with_capacity(len);
        while seq.len() < len {
            let mut probs = self.transition_probs(&seq);
            if !cfg.allow_repeats {
                for (p, &s) in probs.iter_mut().zip(&seen) {
                    if s {
                        *p = 0.0;
                    }
                }
            }
            let next = WeightedIndex::new(&probs).expect("popularity keeps every item reachable").sample(&mut rng);
            seen[next] = true;
            seq.push(next);
        }
        seq
    }

    pub fn generate(&self) -> InteractionLog {
        let records = (0..self.config.users)
            .flat_map(|u| {
                self.user_sequence(u).into_iter().enumerate().map(move |(step, item)| Interaction {
                    user: format!("u{u}"),
                    item: format!("i{item}"),
                    timestamp: BASE_TIMESTAMP + 3600 * step as i64 + u as i64,
                })
            })
            .collect();
        InteractionLog { records }
    }
}

/// Seeded synthetic log with default lengths and graph shape.
pub fn synth_generate(users: usize, items: usize, markov_order: usize, seed: u64) -> Result<InteractionLog> {
    Ok(SynthGenerator::new(SynthConfig::new(users, items, markov_order, seed))?.generate())
}
