//! Tokenization, vocabulary and the Huffman coding used by hierarchical softmax.

use std::cmp::Reverse;
use std::collections::{BinaryHeap, HashMap};
use std::io::{BufRead, Write};
use std::sync::OnceLock;

use regex::Regex;

use crate::error::{Error, Result};

fn markup() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"<[^<>]*>|&(?:[A-Za-z][A-Za-z0-9]*|#[0-9]+|#[xX][0-9A-Fa-f]+);").unwrap())
}

fn is_apostrophe(c: char) -> bool {
    c == '\'' || c == '\u{2019}'
}

/// Lowercased word tokens. HTML tags and character entities are dropped,
/// then text is split on anything that is not a letter, a digit or an
/// apostrophe between two word characters.
pub fn tokenize(text: &str) -> Vec<String> {
    let stripped = markup().replace_all(text, " ");
    let lowered = stripped.to_lowercase();
    let chars: Vec<char> = lowered.chars().collect();

    let mut tokens = Vec::new();
    let mut current = String::new();
    for (i, &c) in chars.iter().enumerate() {
        if c.is_alphanumeric() {
            current.push(c);
        } else if is_apostrophe(c)
            && !current.is_empty()
            && chars.get(i + 1).is_some_and(|n| n.is_alphanumeric())
        {
            current.push('\'');
        } else if !current.is_empty() {
            tokens.push(std::mem::take(&mut current));
        }
    }
    if !current.is_empty() {
        tokens.push(current);
    }
    tokens
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Vocabulary {
    words: Vec<String>,
    frequencies: Vec<u64>,
    index: HashMap<String, usize>,
    total_tokens: u64,
}

impl Vocabulary {
    /// Builds a vocabulary directly from `(word, frequency)` pairs in index order.
    pub fn from_counts(counts: Vec<(String, u64)>) -> Result<Self> {
        let mut v = Vocabulary::default();
        for (w, f) in counts {
            if v.index.insert(w.clone(), v.words.len()).is_some() {
                return Err(Error::arg(format!("duplicate vocabulary entry `{w}`")));
            }
            v.words.push(w);
            v.frequencies.push(f);
            v.total_tokens += f;
        }
        Ok(v)
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn index_of(&self, word: &str) -> Option<usize> {
        self.index.get(word).copied()
    }

    pub fn word(&self, i: usize) -> &str {
        &self.words[i]
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn frequency(&self, i: usize) -> u64 {
        self.frequencies[i]
    }

    pub fn frequencies(&self) -> &[u64] {
        &self.frequencies
    }

    pub fn total_tokens(&self) -> u64 {
        self.total_tokens
    }

    /// TSV `token \t index \t frequency`.
    pub fn write_tsv<W: Write>(&self, mut w: W) -> Result<()> {
        for (i, (word, f)) in self.words.iter().zip(&self.frequencies).enumerate() {
            writeln!(w, "{word}\t{i}\t{f}")?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_tsv<R: BufRead>(reader: R) -> Result<Self> {
        let mut counts = Vec::new();
        for (n, line) in reader.lines().enumerate() {
            let line = line?;
            let bad = || Error::Format(format!("vocabulary line {}: `{line}`", n + 1));
            let mut cols = line.split('\t');
            let (Some(word), Some(idx), Some(freq), None) = (cols.next(), cols.next(), cols.next(), cols.next())
            else {
                return Err(bad());
            };
            if idx.parse::<usize>().map_err(|_| bad())? != counts.len() {
                return Err(bad());
            }
            counts.push((word.to_owned(), freq.parse().map_err(|_| bad())?));
        }
        Self::from_counts(counts)
    }
}

/// Counts tokens, drops those seen fewer than `min_count` times and indexes the
/// rest by descending frequency, ties by first appearance.
pub fn build_vocab<D: AsRef<[S]>, S: AsRef<str>>(corpus: &[D], min_count: u64) -> Result<Vocabulary> {
    if min_count < 1 {
        return Err(Error::arg("min_count must be at least 1"));
    }
    let mut first_seen: HashMap<&str, usize> = HashMap::new();
    let mut counts: Vec<(&str, u64)> = Vec::new();
    for doc in corpus {
        for tok in doc.as_ref() {
            let tok = tok.as_ref();
            match first_seen.get(tok) {
                Some(&i) => counts[i].1 += 1,
                None => {
                    first_seen.insert(tok, counts.len());
                    counts.push((tok, 1));
                }
            }
        }
    }
    // stable sort keeps first-appearance order among equal counts
    counts.sort_by_key(|&(_, c)| Reverse(c));
    Vocabulary::from_counts(
        counts
            .into_iter()
            .filter(|&(_, c)| c >= min_count)
            .map(|(w, c)| (w.to_owned(), c))
            .collect(),
    )
}

/// Binary Huffman code over a vocabulary.
///
/// Inner nodes are numbered in creation order, so the root is
/// `inner_count - 1`. Paths list inner nodes from the root down; bit `0`
/// follows the lighter child of a merge.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HuffmanTree {
    codes: Vec<Vec<u8>>,
    paths: Vec<Vec<u32>>,
    inner_count: usize,
}

impl HuffmanTree {
    pub fn code(&self, word: usize) -> &[u8] {
        &self.codes[word]
    }

    pub fn path(&self, word: usize) -> &[u32] {
        &self.paths[word]
    }

    pub fn inner_count(&self) -> usize {
        self.inner_count
    }

    pub fn len(&self) -> usize {
        self.codes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.codes.is_empty()
    }

    /// Σ frequency · code length.
    pub fn weighted_length(&self, frequencies: &[u64]) -> u64 {
        self.codes.iter().zip(frequencies).map(|(c, &f)| f * c.len() as u64).sum()
    }
}

/// Greedy Huffman construction. Ties between equal weights go to the lower
/// node id, where leaves are `0..|V|` and merged nodes follow in creation order.
pub fn build_huffman(vocab: &Vocabulary) -> Result<HuffmanTree> {
    huffman_from_frequencies(vocab.frequencies())
}

pub fn huffman_from_frequencies(frequencies: &[u64]) -> Result<HuffmanTree> {
    let n = frequencies.len();
    if n == 0 {
        return Err(Error::arg("cannot build a Huffman tree over an empty vocabulary"));
    }
    // node ids: leaves 0..n, inner nodes n..2n-1
    let mut parent = vec![0usize; 2 * n - 1];
    let mut bit = vec![0u8; 2 * n - 1];
    let mut heap: BinaryHeap<Reverse<(u64, usize)>> =
        frequencies.iter().enumerate().map(|(i, &f)| Reverse((f, i))).collect();
    let mut next = n;
    while heap.len() > 1 {
        let Reverse((w0, a)) = heap.pop().unwrap();
        let Reverse((w1, b)) = heap.pop().unwrap();
        parent[a] = next;
        parent[b] = next;
        bit[a] = 0;
        bit[b] = 1;
        heap.push(Reverse((w0 + w1, next)));
        next += 1;
    }
    let root = next - 1;

    let mut codes = Vec::with_capacity(n);
    let mut paths = Vec::with_capacity(n);
    for leaf in 0..n {
        let mut code = Vec::new();
        let mut path = Vec::new();
        let mut node = leaf;
        while node != root {
            code.push(bit[node]);
            node = parent[node];
            path.push((node - n) as u32);
        }
        code.reverse();
        path.reverse();
        codes.push(code);
        paths.push(path);
    }
    Ok(HuffmanTree { codes, paths, inner_count: n - 1 })
}
