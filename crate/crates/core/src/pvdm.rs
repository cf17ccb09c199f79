//! Distributed-memory paragraph vectors trained with hierarchical softmax.
//!
//! Users and items are embedded jointly: each entity contributes one document
//! (its reviews concatenated in time order) and the document vectors later
//! serve as the prior means of the factorization's latent rows.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::io::{BufRead, Write};
use std::sync::atomic::{AtomicU64, Ordering};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::dataset::{RatingsMatrix, Review};
use crate::error::{Error, Result};
use crate::matrix::{axpy, dot, Matrix};
use crate::textproc::{build_huffman, build_vocab, huffman_from_frequencies, tokenize, HuffmanTree, Vocabulary};

const CHECKPOINT_MAGIC: &str = "parvecmf-pvdm";
const CHECKPOINT_VERSION: u32 = 1;
const INFER_SEED_SALT: u64 = 0x5eed_1f3e_d0c5_0001;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum EntityKind {
    User,
    Item,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct EntityKey {
    pub kind: EntityKind,
    pub id: String,
}

impl EntityKey {
    pub fn user(id: impl Into<String>) -> Self {
        EntityKey { kind: EntityKind::User, id: id.into() }
    }

    pub fn item(id: impl Into<String>) -> Self {
        EntityKey { kind: EntityKind::Item, id: id.into() }
    }

    pub fn parse(s: &str) -> Option<Self> {
        if let Some(id) = s.strip_prefix("user:") {
            Some(Self::user(id))
        } else {
            s.strip_prefix("item:").map(Self::item)
        }
    }
}

impl fmt::Display for EntityKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.kind {
            EntityKind::User => write!(f, "user:{}", self.id),
            EntityKind::Item => write!(f, "item:{}", self.id),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaggedDocument {
    pub tag: EntityKey,
    pub tokens: Vec<String>,
    /// (user, item) index pairs of the reviews that went into `tokens`.
    pub sources: Vec<(usize, usize)>,
}

/// One document per entity: the bodies of its reviews whose (user, item)
/// pair is in `allowed`, concatenated in timestamp order. Entities without
/// such reviews, or whose reviews tokenize to nothing, get no document.
pub fn build_entity_docs(
    reviews: &[Review],
    kind: EntityKind,
    matrix: &RatingsMatrix,
    allowed: &HashSet<(usize, usize)>,
) -> Vec<TaggedDocument> {
    let n = match kind {
        EntityKind::User => matrix.n_users(),
        EntityKind::Item => matrix.n_items(),
    };
    let mut per_entity: Vec<Vec<(i64, usize, (usize, usize))>> = vec![Vec::new(); n];
    for (pos, r) in reviews.iter().enumerate() {
        let (Some(u), Some(i)) = (matrix.user_index(&r.user_id), matrix.item_index(&r.product_id)) else {
            continue;
        };
        if !allowed.contains(&(u, i)) {
            continue;
        }
        let owner = match kind {
            EntityKind::User => u,
            EntityKind::Item => i,
        };
        per_entity[owner].push((r.time, pos, (u, i)));
    }

    let mut docs = Vec::new();
    for (owner, mut list) in per_entity.into_iter().enumerate() {
        if list.is_empty() {
            continue;
        }
        list.sort_by_key(|&(time, pos, _)| (time, pos));
        let mut tokens = Vec::new();
        let mut sources = Vec::with_capacity(list.len());
        for (_, pos, pair) in list {
            tokens.extend(tokenize(&reviews[pos].text));
            sources.push(pair);
        }
        if tokens.is_empty() {
            continue;
        }
        let tag = match kind {
            EntityKind::User => EntityKey::user(&matrix.user_ids()[owner]),
            EntityKind::Item => EntityKey::item(&matrix.item_ids()[owner]),
        };
        docs.push(TaggedDocument { tag, tokens, sources });
    }
    docs
}

#[derive(Debug, Clone, PartialEq)]
pub struct PvConfig {
    pub dim: usize,
    /// Context half-width in tokens.
    pub window: usize,
    pub epochs: usize,
    pub initial_lr: f64,
    pub final_lr: f64,
    pub seed: u64,
    /// 1 = deterministic single-threaded training.
    pub threads: usize,
}

impl Default for PvConfig {
    fn default() -> Self {
        PvConfig { dim: 10, window: 5, epochs: 20, initial_lr: 0.025, final_lr: 1e-4, seed: 1, threads: 1 }
    }
}

impl PvConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(Error::arg("embedding dimension must be at least 1"));
        }
        if self.window == 0 {
            return Err(Error::arg("window must be at least 1"));
        }
        if !(self.final_lr > 0.0 && self.final_lr <= self.initial_lr) {
            return Err(Error::arg(format!(
                "learning rates must satisfy 0 < final ({}) <= initial ({})",
                self.final_lr, self.initial_lr
            )));
        }
        if self.threads == 0 {
            return Err(Error::arg("threads must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingModel {
    pub words: Matrix,
    pub docs: Matrix,
    /// One row per Huffman inner node.
    pub inner: Matrix,
    pub inner_bias: Vec<f64>,
    doc_tags: Vec<EntityKey>,
    doc_index: HashMap<EntityKey, usize>,
    vocab: Vocabulary,
    tree: HuffmanTree,
    config: PvConfig,
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `log σ(x)` without overflow.
#[inline]
fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

/// Gradient of `-log p(word | h)` through the hierarchical softmax.
#[derive(Debug, Clone, PartialEq)]
pub struct HsGradient {
    pub neg_log_prob: f64,
    pub grad_h: Vec<f64>,
    /// (inner node, gradient w.r.t. its parameter row, gradient w.r.t. its bias)
    pub grad_inner: Vec<(usize, Vec<f64>, f64)>,
}

impl EmbeddingModel {
    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn tree(&self) -> &HuffmanTree {
        &self.tree
    }

    pub fn config(&self) -> &PvConfig {
        &self.config
    }

    pub fn dim(&self) -> usize {
        self.config.dim
    }

    pub fn doc_tags(&self) -> &[EntityKey] {
        &self.doc_tags
    }

    pub fn doc_row(&self, tag: &EntityKey) -> Option<usize> {
        self.doc_index.get(tag).copied()
    }

    pub fn doc_vector(&self, tag: &EntityKey) -> Option<&[f64]> {
        self.doc_row(tag).map(|r| self.docs.row(r))
    }

    pub fn word_vector(&self, word: &str) -> Option<&[f64]> {
        self.vocab.index_of(word).map(|w| self.words.row(w))
    }

    fn word_index(&self, word: &str) -> Result<usize> {
        self.vocab
            .index_of(word)
            .ok_or_else(|| Error::Lookup { kind: "word", key: word.to_owned() })
    }

    /// Probability of `word` given hidden vector `h`: the product of
    /// `σ(±(inner·h + bias))` along the word's Huffman path, `+` on bit 0.
    pub fn hs_probability(&self, h: &[f64], word: &str) -> Result<f64> {
        let w = self.word_index(word)?;
        Ok(self
            .tree
            .path(w)
            .iter()
            .zip(self.tree.code(w))
            .map(|(&node, &bit)| {
                let node = node as usize;
                let x = dot(self.inner.row(node), h) + self.inner_bias[node];
                sigmoid(if bit == 0 { x } else { -x })
            })
            .product())
    }

    fn hs_log_prob_index(&self, h: &[f64], w: usize) -> f64 {
        self.tree
            .path(w)
            .iter()
            .zip(self.tree.code(w))
            .map(|(&node, &bit)| {
                let node = node as usize;
                let x = dot(self.inner.row(node), h) + self.inner_bias[node];
                log_sigmoid(if bit == 0 { x } else { -x })
            })
            .sum()
    }

    /// Analytic gradient of `-log p(word | h)`.
    pub fn hs_gradient(&self, h: &[f64], word: &str) -> Result<HsGradient> {
        let w = self.word_index(word)?;
        let mut grad_h = vec![0.0; h.len()];
        let mut grad_inner = Vec::new();
        let mut nll = 0.0;
        for (&node, &bit) in self.tree.path(w).iter().zip(self.tree.code(w)) {
            let node = node as usize;
            let row = self.inner.row(node);
            let x = dot(row, h) + self.inner_bias[node];
            nll -= log_sigmoid(if bit == 0 { x } else { -x });
            // d(log p)/dx at this node
            let g = 1.0 - f64::from(bit) - sigmoid(x);
            axpy(-g, row, &mut grad_h);
            grad_inner.push((node, h.iter().map(|v| -g * v).collect(), -g));
        }
        Ok(HsGradient { neg_log_prob: nll, grad_h, grad_inner })
    }

    /// Averaged hidden vector of a document vector and context words.
    pub fn hidden(&self, doc_vec: &[f64], context: &[&str]) -> Result<Vec<f64>> {
        let mut h = doc_vec.to_vec();
        for w in context {
            axpy(1.0, self.words.row(self.word_index(w)?), &mut h);
        }
        let scale = 1.0 / (1 + context.len()) as f64;
        h.iter_mut().for_each(|v| *v *= scale);
        Ok(h)
    }

    /// `-log p(target | doc_vec, context)` and its gradient w.r.t. `doc_vec`.
    pub fn context_gradient(&self, doc_vec: &[f64], context: &[&str], target: &str) -> Result<(f64, Vec<f64>)> {
        let h = self.hidden(doc_vec, context)?;
        let g = self.hs_gradient(&h, target)?;
        let scale = 1.0 / (1 + context.len()) as f64;
        Ok((g.neg_log_prob, g.grad_h.iter().map(|v| v * scale).collect()))
    }

    /// Mean `-log p` over every position of `docs`, using each document's
    /// trained vector. Documents unknown to the model are an error.
    pub fn corpus_nll(&self, docs: &[TaggedDocument]) -> Result<f64> {
        let window = self.config.window;
        let mut total = 0.0;
        let mut count = 0usize;
        for doc in docs {
            let row = self
                .doc_row(&doc.tag)
                .ok_or_else(|| Error::Lookup { kind: "document", key: doc.tag.to_string() })?;
            let ids = self.encode(&doc.tokens)?;
            let mut h = vec![0.0; self.dim()];
            for t in 0..ids.len() {
                let (lo, hi) = context_bounds(t, ids.len(), window);
                h.copy_from_slice(self.docs.row(row));
                for (c, &w) in ids.iter().enumerate().take(hi).skip(lo) {
                    if c != t {
                        axpy(1.0, self.words.row(w), &mut h);
                    }
                }
                let scale = 1.0 / (hi - lo) as f64;
                h.iter_mut().for_each(|v| *v *= scale);
                total -= self.hs_log_prob_index(&h, ids[t]);
                count += 1;
            }
        }
        Ok(if count == 0 { 0.0 } else { total / count as f64 })
    }

    fn encode(&self, tokens: &[String]) -> Result<Vec<usize>> {
        tokens
            .iter()
            .map(|t| {
                self.vocab
                    .index_of(t)
                    .ok_or_else(|| Error::Training(format!("token `{t}` is not in the vocabulary")))
            })
            .collect()
    }

    /// Fits a fresh document vector to `tokens` with words and inner nodes
    /// frozen. Out-of-vocabulary tokens are dropped.
    pub fn infer(&self, tokens: &[String], steps: usize) -> Result<Vec<f64>> {
        if tokens.is_empty() {
            return Err(Error::Inference("empty token sequence".into()));
        }
        let ids: Vec<usize> = tokens.iter().filter_map(|t| self.vocab.index_of(t)).collect();
        if ids.is_empty() {
            return Err(Error::Inference("no token of the document is in the vocabulary".into()));
        }
        let p = self.dim();
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed ^ INFER_SEED_SALT);
        let mut d = Matrix::uniform(1, p, 0.5 / p as f64, &mut rng).into_vec();

        let total = (steps * ids.len()) as f64;
        let mut done = 0usize;
        let mut h = vec![0.0; p];
        let mut neu1e = vec![0.0; p];
        for _ in 0..steps {
            for t in 0..ids.len() {
                let lr = self.config.initial_lr - (self.config.initial_lr - self.config.final_lr) * done as f64 / total;
                done += 1;
                let (lo, hi) = context_bounds(t, ids.len(), self.config.window);
                h.copy_from_slice(&d);
                for (c, &w) in ids.iter().enumerate().take(hi).skip(lo) {
                    if c != t {
                        axpy(1.0, self.words.row(w), &mut h);
                    }
                }
                let scale = 1.0 / (hi - lo) as f64;
                h.iter_mut().for_each(|v| *v *= scale);
                neu1e.iter_mut().for_each(|v| *v = 0.0);
                let target = ids[t];
                for (&node, &bit) in self.tree.path(target).iter().zip(self.tree.code(target)) {
                    let node = node as usize;
                    let row = self.inner.row(node);
                    let g = (1.0 - f64::from(bit) - sigmoid(dot(row, &h) + self.inner_bias[node])) * lr;
                    axpy(g, row, &mut neu1e);
                }
                axpy(scale, &neu1e, &mut d);
            }
        }
        Ok(d)
    }

    /// Word2vec text layout: `<rows> <dim>` then `token v1 … vp` per row.
    pub fn write_word_vectors<W: Write>(&self, w: W) -> Result<()> {
        write_vectors(w, self.vocab.words().iter().map(String::as_str), &self.words)
    }

    /// Same layout as [`Self::write_word_vectors`], rows tagged `user:ID` / `item:ID`.
    pub fn write_doc_vectors<W: Write>(&self, w: W) -> Result<()> {
        let tags: Vec<String> = self.doc_tags.iter().map(ToString::to_string).collect();
        write_vectors(w, tags.iter().map(String::as_str), &self.docs)
    }

    pub fn save<W: Write>(&self, mut w: W) -> Result<()> {
        let c = &self.config;
        writeln!(w, "{CHECKPOINT_MAGIC} {CHECKPOINT_VERSION}")?;
        writeln!(
            w,
            "config {} {} {} {:?} {:?} {} {}",
            c.dim, c.window, c.epochs, c.initial_lr, c.final_lr, c.seed, c.threads
        )?;
        writeln!(w, "vocab {}", self.vocab.len())?;
        for (word, f) in self.vocab.words().iter().zip(self.vocab.frequencies()) {
            writeln!(w, "{word}\t{f}")?;
        }
        writeln!(w, "tree {}", self.tree.inner_count())?;
        for word in 0..self.tree.len() {
            let code: String = self.tree.code(word).iter().map(|b| if *b == 0 { '0' } else { '1' }).collect();
            writeln!(w, "{code}")?;
        }
        write_block(&mut w, "words", &self.words, None)?;
        let tags: Vec<String> = self.doc_tags.iter().map(ToString::to_string).collect();
        write_block(&mut w, "docs", &self.docs, Some(&tags))?;
        write_block(&mut w, "inner", &self.inner, None)?;
        write!(w, "bias")?;
        for b in &self.inner_bias {
            write!(w, " {b:?}")?;
        }
        writeln!(w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load<R: BufRead>(reader: R) -> Result<Self> {
        let mut lines = reader.lines();
        let mut next = |what: &str| -> Result<String> {
            lines
                .next()
                .transpose()?
                .ok_or_else(|| Error::Format(format!("checkpoint truncated before {what}")))
        };
        let header = next("header")?;
        if header != format!("{CHECKPOINT_MAGIC} {CHECKPOINT_VERSION}") {
            return Err(Error::Format(format!("unsupported embedding checkpoint header `{header}`")));
        }
        let cfg = next("config")?;
        let f: Vec<&str> = cfg.split(' ').collect();
        let bad = |what: &str| Error::Format(format!("bad {what} in embedding checkpoint"));
        if f.len() != 8 || f[0] != "config" {
            return Err(bad("config line"));
        }
        let config = PvConfig {
            dim: f[1].parse().map_err(|_| bad("dim"))?,
            window: f[2].parse().map_err(|_| bad("window"))?,
            epochs: f[3].parse().map_err(|_| bad("epochs"))?,
            initial_lr: f[4].parse().map_err(|_| bad("initial_lr"))?,
            final_lr: f[5].parse().map_err(|_| bad("final_lr"))?,
            seed: f[6].parse().map_err(|_| bad("seed"))?,
            threads: f[7].parse().map_err(|_| bad("threads"))?,
        };

        let n_vocab = counted_section(&next("vocab")?, "vocab")?;
        let mut counts = Vec::with_capacity(n_vocab);
        for _ in 0..n_vocab {
            let line = next("vocabulary entry")?;
            let (word, freq) = line.split_once('\t').ok_or_else(|| bad("vocabulary entry"))?;
            counts.push((word.to_owned(), freq.parse().map_err(|_| bad("frequency"))?));
        }
        let vocab = Vocabulary::from_counts(counts)?;

        let inner_count = counted_section(&next("tree")?, "tree")?;
        let mut codes = Vec::with_capacity(n_vocab);
        for _ in 0..n_vocab {
            codes.push(next("tree code")?);
        }
        let tree = huffman_from_frequencies(vocab.frequencies())?;
        let stored_matches = tree.inner_count() == inner_count
            && codes.iter().enumerate().all(|(w, code)| {
                code.len() == tree.code(w).len()
                    && code.bytes().zip(tree.code(w)).all(|(c, &b)| c == b'0' + b)
            });
        if !stored_matches {
            return Err(Error::Format("stored Huffman codes disagree with the vocabulary".into()));
        }

        let (words, _) = read_block(&mut next, "words", false)?;
        let (docs, tags) = read_block(&mut next, "docs", true)?;
        let (inner, _) = read_block(&mut next, "inner", false)?;
        let bias_line = next("bias")?;
        let inner_bias = bias_line
            .strip_prefix("bias")
            .ok_or_else(|| bad("bias line"))?
            .split_whitespace()
            .map(|v| v.parse().map_err(|_| bad("bias value")))
            .collect::<Result<Vec<f64>>>()?;

        let doc_tags = tags
            .into_iter()
            .map(|t| EntityKey::parse(&t).ok_or_else(|| bad("document tag")))
            .collect::<Result<Vec<_>>>()?;
        let p = config.dim;
        if words.rows() != vocab.len()
            || inner.rows() != tree.inner_count()
            || inner_bias.len() != tree.inner_count()
            || [&words, &docs, &inner].iter().any(|m| m.cols() != p && m.rows() > 0)
        {
            return Err(Error::Format("matrix shapes disagree with the checkpoint header".into()));
        }
        let doc_index = doc_tags.iter().cloned().enumerate().map(|(i, t)| (t, i)).collect();
        Ok(EmbeddingModel { words, docs, inner, inner_bias, doc_tags, doc_index, vocab, tree, config })
    }
}

fn counted_section(line: &str, name: &str) -> Result<usize> {
    line.strip_prefix(name)
        .and_then(|rest| rest.trim().parse().ok())
        .ok_or_else(|| Error::Format(format!("expected `{name} <count>`, got `{line}`")))
}

fn write_vectors<'a, W: Write>(mut w: W, labels: impl Iterator<Item = &'a str>, m: &Matrix) -> Result<()> {
    writeln!(w, "{} {}", m.rows(), m.cols())?;
    for (label, row) in labels.zip(m.iter_rows()) {
        write!(w, "{label}")?;
        for v in row {
            write!(w, " {v}")?;
        }
        writeln!(w)?;
    }
    w.flush()?;
    Ok(())
}

fn write_block<W: Write>(w: &mut W, name: &str, m: &Matrix, labels: Option<&[String]>) -> Result<()> {
    writeln!(w, "{name} {} {}", m.rows(), m.cols())?;
    for (i, row) in m.iter_rows().enumerate() {
        if let Some(labels) = labels {
            write!(w, "{}\t", labels[i])?;
        }
        let mut first = true;
        for v in row {
            if !first {
                write!(w, " ")?;
            }
            first = false;
            write!(w, "{v:?}")?;
        }
        writeln!(w)?;
    }
    Ok(())
}

fn read_block(
    next: &mut impl FnMut(&str) -> Result<String>,
    name: &str,
    labelled: bool,
) -> Result<(Matrix, Vec<String>)> {
    let header = next(name)?;
    let dims: Vec<usize> = header
        .strip_prefix(name)
        .map(|rest| rest.split_whitespace().filter_map(|v| v.parse().ok()).collect())
        .unwrap_or_default();
    let [rows, cols] = dims[..] else {
        return Err(Error::Format(format!("expected `{name} <rows> <cols>`, got `{header}`")));
    };
    let mut data = Vec::with_capacity(rows * cols);
    let mut labels = Vec::new();
    for _ in 0..rows {
        let line = next(name)?;
        let values = if labelled {
            let (label, rest) = line
                .split_once('\t')
                .ok_or_else(|| Error::Format(format!("unlabelled row in {name}")))?;
            labels.push(label.to_owned());
            rest
        } else {
            line.as_str()
        };
        let before = data.len();
        for v in values.split_whitespace() {
            data.push(v.parse::<f64>().map_err(|_| Error::Format(format!("bad number `{v}` in {name}")))?);
        }
        if data.len() - before != cols {
            return Err(Error::Format(format!("row width mismatch in {name}")));
        }
    }
    Ok((Matrix::from_vec(rows, cols, data), labels))
}

/// Half-open range `[lo, hi)` of the window around `t`, clipped to the document.
#[inline]
fn context_bounds(t: usize, len: usize, window: usize) -> (usize, usize) {
    (t.saturating_sub(window), (t + window + 1).min(len))
}

/// Matrix of f64 bit patterns shared between training workers. Updates are
/// relaxed load/store pairs, so concurrent writers may lose updates.
struct SharedMatrix {
    cols: usize,
    cells: Vec<AtomicU64>,
}

impl SharedMatrix {
    fn from_matrix(m: &Matrix) -> Self {
        SharedMatrix { cols: m.cols(), cells: m.as_slice().iter().map(|v| AtomicU64::new(v.to_bits())).collect() }
    }

    fn from_slice(v: &[f64]) -> Self {
        SharedMatrix { cols: 1, cells: v.iter().map(|v| AtomicU64::new(v.to_bits())).collect() }
    }

    #[inline]
    fn load(&self, idx: usize) -> f64 {
        f64::from_bits(self.cells[idx].load(Ordering::Relaxed))
    }

    #[inline]
    fn add(&self, idx: usize, delta: f64) {
        let v = self.load(idx) + delta;
        self.cells[idx].store(v.to_bits(), Ordering::Relaxed);
    }

    #[inline]
    fn load_row(&self, row: usize, out: &mut [f64]) {
        let base = row * self.cols;
        for (k, o) in out.iter_mut().enumerate() {
            *o = self.load(base + k);
        }
    }

    #[inline]
    fn add_row_to(&self, row: usize, scale: f64, out: &mut [f64]) {
        let base = row * self.cols;
        for (k, o) in out.iter_mut().enumerate() {
            *o += scale * self.load(base + k);
        }
    }

    #[inline]
    fn axpy_row(&self, row: usize, alpha: f64, x: &[f64]) {
        let base = row * self.cols;
        for (k, xk) in x.iter().enumerate() {
            self.add(base + k, alpha * xk);
        }
    }

    fn into_matrix(self, rows: usize) -> Matrix {
        let cols = self.cols;
        Matrix::from_vec(rows, cols, self.cells.into_iter().map(|c| f64::from_bits(c.into_inner())).collect())
    }

    fn into_vec(self) -> Vec<f64> {
        self.cells.into_iter().map(|c| f64::from_bits(c.into_inner())).collect()
    }
}

struct Trainer<'a> {
    words: SharedMatrix,
    docs: SharedMatrix,
    inner: SharedMatrix,
    bias: SharedMatrix,
    tree: &'a HuffmanTree,
    encoded: Vec<Vec<usize>>,
    config: &'a PvConfig,
    progress: AtomicU64,
    total_steps: u64,
}

impl Trainer<'_> {
    fn learning_rate(&self, step: u64) -> f64 {
        let c = self.config;
        let frac = (step as f64 / self.total_steps.max(1) as f64).min(1.0);
        (c.initial_lr - (c.initial_lr - c.final_lr) * frac).max(c.final_lr)
    }

    fn train_document(&self, doc: usize, h: &mut [f64], neu1e: &mut [f64], row: &mut [f64]) {
        let ids = &self.encoded[doc];
        let window = self.config.window;
        let step0 = self.progress.fetch_add(ids.len() as u64, Ordering::Relaxed);
        for t in 0..ids.len() {
            let lr = self.learning_rate(step0 + t as u64);
            let (lo, hi) = context_bounds(t, ids.len(), window);
            self.docs.load_row(doc, h);
            for (c, &w) in ids.iter().enumerate().take(hi).skip(lo) {
                if c != t {
                    self.words.add_row_to(w, 1.0, h);
                }
            }
            let scale = 1.0 / (hi - lo) as f64;
            h.iter_mut().for_each(|v| *v *= scale);

            neu1e.iter_mut().for_each(|v| *v = 0.0);
            let target = ids[t];
            for (&node, &bit) in self.tree.path(target).iter().zip(self.tree.code(target)) {
                let node = node as usize;
                self.inner.load_row(node, row);
                let x = dot(row, h) + self.bias.load(node);
                let g = (1.0 - f64::from(bit) - sigmoid(x)) * lr;
                axpy(g, row, neu1e);
                self.inner.axpy_row(node, g, h);
                self.bias.add(node, g);
            }
            // averaging spreads the hidden-layer gradient evenly over its inputs
            self.docs.axpy_row(doc, scale, neu1e);
            for (c, &w) in ids.iter().enumerate().take(hi).skip(lo) {
                if c != t {
                    self.words.axpy_row(w, scale, neu1e);
                }
            }
        }
    }

    fn run_worker(&self, shard: &[usize], seed: u64) {
        let p = self.config.dim;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut order = shard.to_vec();
        let (mut h, mut neu1e, mut row) = (vec![0.0; p], vec![0.0; p], vec![0.0; p]);
        for _ in 0..self.config.epochs {
            order.shuffle(&mut rng);
            for &doc in &order {
                self.train_document(doc, &mut h, &mut neu1e, &mut row);
            }
        }
    }
}

/// Seeded initialization: words, documents and inner nodes uniform in
/// `[-0.5/p, 0.5/p]`, drawn in that order; biases start at zero.
fn initial_parameters(n_words: usize, n_docs: usize, n_inner: usize, config: &PvConfig) -> (Matrix, Matrix, Matrix) {
    let p = config.dim;
    let half = 0.5 / p as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let words = Matrix::uniform(n_words, p, half, &mut rng);
    let docs = Matrix::uniform(n_docs, p, half, &mut rng);
    let inner = Matrix::uniform(n_inner, p, half, &mut rng);
    (words, docs, inner)
}

/// Trains one joint PV-DM model over `docs`.
///
/// With `config.threads == 1` training is deterministic for a fixed seed.
/// More threads shard the documents across workers that update shared
/// parameters without synchronization; such runs are not reproducible.
pub fn train(docs: &[TaggedDocument], vocab: &Vocabulary, tree: &HuffmanTree, config: &PvConfig) -> Result<EmbeddingModel> {
    config.validate()?;
    if tree.len() != vocab.len() {
        return Err(Error::arg("Huffman tree was built for a different vocabulary"));
    }
    let mut doc_index = HashMap::with_capacity(docs.len());
    let mut encoded = Vec::with_capacity(docs.len());
    for (i, doc) in docs.iter().enumerate() {
        if doc_index.insert(doc.tag.clone(), i).is_some() {
            return Err(Error::Training(format!("duplicate document tag {}", doc.tag)));
        }
        let ids = doc
            .tokens
            .iter()
            .map(|t| {
                vocab
                    .index_of(t)
                    .ok_or_else(|| Error::Training(format!("token `{t}` of {} is not in the vocabulary", doc.tag)))
            })
            .collect::<Result<Vec<_>>>()?;
        encoded.push(ids);
    }

    let (words, doc_matrix, inner) = initial_parameters(vocab.len(), docs.len(), tree.inner_count(), config);
    let positions: u64 = encoded.iter().map(|d| d.len() as u64).sum();
    let trainer = Trainer {
        words: SharedMatrix::from_matrix(&words),
        docs: SharedMatrix::from_matrix(&doc_matrix),
        inner: SharedMatrix::from_matrix(&inner),
        bias: SharedMatrix::from_slice(&vec![0.0; tree.inner_count()]),
        tree,
        encoded,
        config,
        progress: AtomicU64::new(0),
        total_steps: positions * config.epochs as u64,
    };

    let all: Vec<usize> = (0..docs.len()).collect();
    if config.threads <= 1 {
        trainer.run_worker(&all, config.seed.wrapping_add(1));
    } else {
        let shards: Vec<Vec<usize>> = (0..config.threads)
            .map(|w| all.iter().copied().filter(|d| d % config.threads == w).collect())
            .collect();
        std::thread::scope(|s| {
            for (w, shard) in shards.iter().enumerate() {
                let trainer = &trainer;
                s.spawn(move || trainer.run_worker(shard, config.seed.wrapping_add(1 + w as u64)));
            }
        });
    }

    let Trainer { words, docs: doc_cells, inner, bias, .. } = trainer;
    let model = EmbeddingModel {
        words: words.into_matrix(vocab.len()),
        docs: doc_cells.into_matrix(docs.len()),
        inner: inner.into_matrix(tree.inner_count()),
        inner_bias: bias.into_vec(),
        doc_tags: docs.iter().map(|d| d.tag.clone()).collect(),
        doc_index,
        vocab: vocab.clone(),
        tree: tree.clone(),
        config: config.clone(),
    };
    if !(model.words.is_finite() && model.docs.is_finite() && model.inner.is_finite())
        || model.inner_bias.iter().any(|b| !b.is_finite())
    {
        return Err(Error::Training("parameters became non-finite; lower the learning rate".into()));
    }
    Ok(model)
}

/// Builds the vocabulary and Huffman tree from `docs` themselves, then trains.
pub fn train_corpus(docs: &[TaggedDocument], config: &PvConfig) -> Result<EmbeddingModel> {
    let token_lists: Vec<&[String]> = docs.iter().map(|d| d.tokens.as_slice()).collect();
    let vocab = build_vocab(&token_lists, 1)?;
    let tree = build_huffman(&vocab)?;
    train(docs, &vocab, &tree, config)
}

/// Prior matrices for the factorization: row `i` of the user matrix is the
/// document vector of user `i`, zero when the model has none (cold users);
/// likewise for items.
pub fn entity_priors(model: Option<&EmbeddingModel>, matrix: &RatingsMatrix, dim: usize) -> (Matrix, Matrix) {
    let mut theta_u = Matrix::zeros(matrix.n_users(), dim);
    let mut theta_v = Matrix::zeros(matrix.n_items(), dim);
    if let Some(model) = model {
        assert_eq!(model.dim(), dim, "embedding width differs from the latent dimension");
        for (i, id) in matrix.user_ids().iter().enumerate() {
            if let Some(v) = model.doc_vector(&EntityKey::user(id.as_str())) {
                theta_u.row_mut(i).copy_from_slice(v);
            }
        }
        for (j, id) in matrix.item_ids().iter().enumerate() {
            if let Some(v) = model.doc_vector(&EntityKey::item(id.as_str())) {
                theta_v.row_mut(j).copy_from_slice(v);
            }
        }
    }
    (theta_u, theta_v)
}
