//! Seeded generator of review datasets whose text and ratings share a
//! latent topic structure.
//!
//! Every user and item belongs to one of `n_topics` topics. A user picks
//! items from its own topic with probability `p_own_topic` and rates them
//! high; other items are rated low. Review bodies mix words from the item's
//! topic, the user's topic and a shared background vocabulary, plus a
//! sentiment word that follows the score.

use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dataset::Review;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub n_users: usize,
    pub n_items: usize,
    pub n_topics: usize,
    pub ratings_per_user: usize,
    pub words_per_review: usize,
    pub words_per_topic: usize,
    pub background_words: usize,
    /// Chance that a rated item shares the user's topic.
    pub p_own_topic: f64,
    /// Chance that a review word comes from the item's topic.
    pub p_item_word: f64,
    /// Chance that a review word comes from the user's topic.
    pub p_user_word: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_users: 120,
            n_items: 80,
            n_topics: 4,
            ratings_per_user: 10,
            words_per_review: 20,
            words_per_topic: 30,
            background_words: 40,
            p_own_topic: 0.7,
            p_item_word: 0.45,
            p_user_word: 0.2,
            seed: 7,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_users == 0 || self.n_items == 0 || self.n_topics == 0 {
            return Err(Error::arg("synthetic dataset needs users, items and topics"));
        }
        if self.n_items < self.n_topics {
            return Err(Error::arg("need at least one item per topic"));
        }
        if self.ratings_per_user == 0 || self.ratings_per_user > self.n_items {
            return Err(Error::arg("ratings_per_user must be in [1, n_items]"));
        }
        if self.words_per_review == 0 || self.words_per_topic == 0 || self.background_words == 0 {
            return Err(Error::arg("word counts must be positive"));
        }
        let probs = [self.p_own_topic, self.p_item_word, self.p_user_word];
        if probs.iter().any(|p| !(0.0..=1.0).contains(p)) || self.p_item_word + self.p_user_word > 1.0 {
            return Err(Error::arg("probabilities must lie in [0, 1] and word mixing must sum to at most 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthDataset {
    pub reviews: Vec<Review>,
    pub user_topics: Vec<usize>,
    pub item_topics: Vec<usize>,
}

const POSITIVE: [&str; 4] = ["great", "love", "excellent", "delicious"];
const NEGATIVE: [&str; 4] = ["awful", "stale", "disappointing", "bland"];
const NEUTRAL: [&str; 2] = ["okay", "average"];

pub fn user_id(i: usize) -> String {
    format!("U{i:05}")
}

pub fn item_id(j: usize) -> String {
    format!("P{j:05}")
}

fn topic_word(topic: usize, w: usize) -> String {
    format!("t{topic}w{w}")
}

pub fn generate(config: &SynthConfig) -> Result<SynthDataset> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    // items are spread evenly so every topic has candidates
    let mut item_topics: Vec<usize> = (0..config.n_items).map(|j| j % config.n_topics).collect();
    item_topics.shuffle(&mut rng);
    let user_topics: Vec<usize> = (0..config.n_users).map(|_| rng.gen_range(0..config.n_topics)).collect();
    let mut by_topic = vec![Vec::new(); config.n_topics];
    for (j, &t) in item_topics.iter().enumerate() {
        by_topic[t].push(j);
    }

    let mut reviews = Vec::with_capacity(config.n_users * config.ratings_per_user);
    let mut clock: i64 = 1_300_000_000;
    for (u, &ut) in user_topics.iter().enumerate() {
        let mut chosen = HashSet::new();
        while chosen.len() < config.ratings_per_user {
            let topic = if rng.gen_bool(config.p_own_topic) { ut } else { rng.gen_range(0..config.n_topics) };
            let open: Vec<usize> = by_topic[topic].iter().copied().filter(|j| !chosen.contains(j)).collect();
            let j = if open.is_empty() {
                // topic exhausted for this user: any unrated item
                let rest: Vec<usize> = (0..config.n_items).filter(|j| !chosen.contains(j)).collect();
                rest[rng.gen_range(0..rest.len())]
            } else {
                open[rng.gen_range(0..open.len())]
            };
            chosen.insert(j);
        }
        let mut items: Vec<usize> = chosen.into_iter().collect();
        items.sort_unstable();
        items.shuffle(&mut rng);
        for j in items {
            let it = item_topics[j];
            let score: f64 = if it == ut {
                if rng.gen_bool(0.85) { rng.gen_range(4..=5) as f64 } else { 3.0 }
            } else if rng.gen_bool(0.8) {
                rng.gen_range(1..=2) as f64
            } else {
                3.0
            };
            let mut words = Vec::with_capacity(config.words_per_review + 1);
            for _ in 0..config.words_per_review {
                let x: f64 = rng.gen();
                let w = if x < config.p_item_word {
                    topic_word(it, rng.gen_range(0..config.words_per_topic))
                } else if x < config.p_item_word + config.p_user_word {
                    topic_word(ut, rng.gen_range(0..config.words_per_topic))
                } else {
                    format!("common{}", rng.gen_range(0..config.background_words))
                };
                words.push(w);
            }
            let sentiment = match score as u8 {
                4 | 5 => POSITIVE[rng.gen_range(0..POSITIVE.len())],
                3 => NEUTRAL[rng.gen_range(0..NEUTRAL.len())],
                _ => NEGATIVE[rng.gen_range(0..NEGATIVE.len())],
            };
            let at = rng.gen_range(0..=words.len());
            words.insert(at, sentiment.to_string());
            clock += rng.gen_range(60..86_400);
            reviews.push(Review {
                product_id: item_id(j),
                user_id: user_id(u),
                profile_name: format!("synthetic user {u}"),
                helpfulness: (0, 0),
                score,
                time: clock,
                summary: format!("{sentiment} item"),
                text: words.join(" ") + ".",
            });
        }
    }
    Ok(SynthDataset { reviews, user_topics, item_topics })
}
