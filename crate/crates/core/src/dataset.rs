//! Review ingestion, the sparse ratings matrix and cross-validation folds.
//!
//! The input is the SNAP fine-foods dump: blank-line separated blocks of
//! `key: value` lines, one block per review.

use std::collections::hash_map::Entry;
use std::collections::{HashMap, HashSet};
use std::io::{BufRead, Write};

use log::warn;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

const KEY_PRODUCT: &str = "product/productId";
const KEY_USER: &str = "review/userId";
const KEY_PROFILE: &str = "review/profileName";
const KEY_HELPFULNESS: &str = "review/helpfulness";
const KEY_SCORE: &str = "review/score";
const KEY_TIME: &str = "review/time";
const KEY_SUMMARY: &str = "review/summary";
const KEY_TEXT: &str = "review/text";

pub const MIN_SCORE: f64 = 1.0;
pub const MAX_SCORE: f64 = 5.0;

#[derive(Debug, Clone, PartialEq)]
pub struct Review {
    pub product_id: String,
    pub user_id: String,
    pub profile_name: String,
    /// (found useful, total votes)
    pub helpfulness: (u32, u32),
    pub score: f64,
    /// UNIX seconds.
    pub time: i64,
    pub summary: String,
    pub text: String,
}

impl Review {
    /// Checks the hard invariants: non-empty ids and a score on the 5-star scale.
    pub fn validate(&self) -> std::result::Result<(), String> {
        if self.product_id.is_empty() {
            return Err("empty productId".into());
        }
        if self.user_id.is_empty() {
            return Err("empty userId".into());
        }
        if !(MIN_SCORE..=MAX_SCORE).contains(&self.score) {
            return Err(format!("score {} outside [1, 5]", self.score));
        }
        Ok(())
    }

    /// Numerator above denominator. The raw dump contains a handful of these,
    /// so they are counted rather than rejected.
    pub fn helpfulness_inconsistent(&self) -> bool {
        let (useful, total) = self.helpfulness;
        total > 0 && useful > total || total == 0 && useful > 0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum MalformedPolicy {
    FailFast,
    #[default]
    SkipAndCount,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SkippedBlock {
    pub offset: u64,
    pub reason: String,
}

#[derive(Debug, Clone, Default)]
pub struct ParseOutcome {
    pub reviews: Vec<Review>,
    pub skipped: Vec<SkippedBlock>,
    pub helpfulness_anomalies: usize,
}

#[derive(Default)]
struct RawBlock {
    offset: u64,
    fields: Vec<(String, String)>,
    problem: Option<String>,
}

impl RawBlock {
    fn get(&self, key: &str) -> Option<&str> {
        self.fields.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    fn into_review(self) -> std::result::Result<Review, String> {
        if let Some(problem) = self.problem {
            return Err(problem);
        }
        let required = |key: &str| -> std::result::Result<String, String> {
            self.get(key).map(str::to_owned).ok_or_else(|| format!("missing {key}"))
        };
        let product_id = required(KEY_PRODUCT)?;
        let user_id = required(KEY_USER)?;
        let score_raw = required(KEY_SCORE)?;
        let text = required(KEY_TEXT)?;

        let score: f64 = score_raw
            .trim()
            .parse()
            .map_err(|_| format!("unparseable score `{score_raw}`"))?;
        let time = match self.get(KEY_TIME) {
            Some(raw) => raw
                .trim()
                .parse()
                .map_err(|_| format!("unparseable time `{raw}`"))?,
            None => 0,
        };
        let helpfulness = match self.get(KEY_HELPFULNESS) {
            Some(raw) => parse_helpfulness(raw)?,
            None => (0, 0),
        };
        let review = Review {
            product_id,
            user_id,
            profile_name: self.get(KEY_PROFILE).unwrap_or_default().to_owned(),
            helpfulness,
            score,
            time,
            summary: self.get(KEY_SUMMARY).unwrap_or_default().to_owned(),
            text,
        };
        review.validate()?;
        Ok(review)
    }
}

fn parse_helpfulness(raw: &str) -> std::result::Result<(u32, u32), String> {
    let bad = || format!("unparseable helpfulness `{raw}`");
    let (a, b) = raw.trim().split_once('/').ok_or_else(bad)?;
    Ok((a.parse().map_err(|_| bad())?, b.parse().map_err(|_| bad())?))
}

fn is_known_key(key: &str) -> bool {
    matches!(
        key,
        KEY_PRODUCT | KEY_USER | KEY_PROFILE | KEY_HELPFULNESS | KEY_SCORE | KEY_TIME | KEY_SUMMARY | KEY_TEXT
    )
}

/// Parses a SNAP review stream. Invalid UTF-8 is decoded lossily.
///
/// Under [`MalformedPolicy::FailFast`] the first bad block aborts with
/// [`Error::MalformedRecord`]; otherwise bad blocks are skipped, recorded in
/// the outcome and summarized with a warning.
pub fn parse_reviews<R: BufRead>(mut reader: R, policy: MalformedPolicy) -> Result<ParseOutcome> {
    let mut out = ParseOutcome::default();
    let mut block: Option<RawBlock> = None;
    let mut offset = 0u64;
    let mut buf = Vec::new();

    let finish = |block: RawBlock, out: &mut ParseOutcome| -> Result<()> {
        let at = block.offset;
        match block.into_review() {
            Ok(review) => {
                if review.helpfulness_inconsistent() {
                    out.helpfulness_anomalies += 1;
                }
                out.reviews.push(review);
                Ok(())
            }
            Err(reason) => match policy {
                MalformedPolicy::FailFast => Err(Error::MalformedRecord { offset: at, reason }),
                MalformedPolicy::SkipAndCount => {
                    out.skipped.push(SkippedBlock { offset: at, reason });
                    Ok(())
                }
            },
        }
    };

    loop {
        buf.clear();
        let n = reader.read_until(b'\n', &mut buf)?;
        if n == 0 {
            break;
        }
        let line_offset = offset;
        offset += n as u64;
        let line = String::from_utf8_lossy(&buf);
        let line = line.trim_end_matches(['\n', '\r']);

        if line.trim().is_empty() {
            if let Some(b) = block.take() {
                finish(b, &mut out)?;
            }
            continue;
        }

        let current = block.get_or_insert_with(|| RawBlock { offset: line_offset, ..Default::default() });
        match line.split_once(':') {
            Some((key, value)) if is_known_key(key) => {
                let value = value.strip_prefix(' ').unwrap_or(value);
                if current.get(key).is_some() {
                    // two records glued together without a separator
                    current.problem.get_or_insert_with(|| format!("duplicate field {key}"));
                } else {
                    current.fields.push((key.to_owned(), value.to_owned()));
                }
            }
            _ => match current.fields.last_mut() {
                Some((_, value)) => {
                    value.push(' ');
                    value.push_str(line);
                }
                None => {
                    current.problem.get_or_insert_with(|| format!("unrecognized line `{line}`"));
                }
            },
        }
    }
    if let Some(b) = block.take() {
        finish(b, &mut out)?;
    }

    if !out.skipped.is_empty() {
        warn!(
            "skipped {} malformed review block(s); first at byte {}: {}",
            out.skipped.len(),
            out.skipped[0].offset,
            out.skipped[0].reason
        );
    }
    Ok(out)
}

/// Writes reviews back in the canonical block layout. `parse_reviews` on the
/// output yields the same sequence for any review whose fields hold no line
/// breaks.
pub fn write_reviews<W: Write>(reviews: &[Review], mut w: W) -> Result<()> {
    for r in reviews {
        writeln!(w, "{KEY_PRODUCT}: {}", r.product_id)?;
        writeln!(w, "{KEY_USER}: {}", r.user_id)?;
        writeln!(w, "{KEY_PROFILE}: {}", r.profile_name)?;
        writeln!(w, "{KEY_HELPFULNESS}: {}/{}", r.helpfulness.0, r.helpfulness.1)?;
        writeln!(w, "{KEY_SCORE}: {:?}", r.score)?;
        writeln!(w, "{KEY_TIME}: {}", r.time)?;
        writeln!(w, "{KEY_SUMMARY}: {}", r.summary)?;
        writeln!(w, "{KEY_TEXT}: {}", r.text)?;
        writeln!(w)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rating {
    pub user: usize,
    pub item: usize,
    pub score: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DedupPolicy {
    #[default]
    KeepLatest,
    KeepFirst,
    MeanScore,
}

/// Sparse user × item ratings with dense index maps.
#[derive(Debug, Clone, Default)]
pub struct RatingsMatrix {
    entries: Vec<Rating>,
    user_ids: Vec<String>,
    item_ids: Vec<String>,
    user_index: HashMap<String, usize>,
    item_index: HashMap<String, usize>,
}

impl RatingsMatrix {
    /// Builds a matrix from explicit triplets over fixed id tables.
    pub fn from_parts(user_ids: Vec<String>, item_ids: Vec<String>, entries: Vec<Rating>) -> Result<Self> {
        let user_index = index_map(&user_ids, "user")?;
        let item_index = index_map(&item_ids, "item")?;
        let mut seen = HashSet::with_capacity(entries.len());
        for e in &entries {
            if e.user >= user_ids.len() || e.item >= item_ids.len() {
                return Err(Error::arg(format!("entry ({}, {}) out of range", e.user, e.item)));
            }
            if !seen.insert((e.user, e.item)) {
                return Err(Error::arg(format!("duplicate entry ({}, {})", e.user, e.item)));
            }
        }
        Ok(RatingsMatrix { entries, user_ids, item_ids, user_index, item_index })
    }

    /// Same id tables, a subset of the entries.
    pub fn with_entries(&self, entries: Vec<Rating>) -> RatingsMatrix {
        RatingsMatrix {
            entries,
            user_ids: self.user_ids.clone(),
            item_ids: self.item_ids.clone(),
            user_index: self.user_index.clone(),
            item_index: self.item_index.clone(),
        }
    }

    pub fn n_users(&self) -> usize {
        self.user_ids.len()
    }

    pub fn n_items(&self) -> usize {
        self.item_ids.len()
    }

    pub fn entries(&self) -> &[Rating] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn user_ids(&self) -> &[String] {
        &self.user_ids
    }

    pub fn item_ids(&self) -> &[String] {
        &self.item_ids
    }

    pub fn user_index(&self, id: &str) -> Option<usize> {
        self.user_index.get(id).copied()
    }

    pub fn item_index(&self, id: &str) -> Option<usize> {
        self.item_index.get(id).copied()
    }

    /// Observed `(item, score)` lists per user.
    pub fn by_user(&self) -> Vec<Vec<(usize, f64)>> {
        let mut rows = vec![Vec::new(); self.n_users()];
        for e in &self.entries {
            rows[e.user].push((e.item, e.score));
        }
        rows
    }

    /// Observed `(user, score)` lists per item.
    pub fn by_item(&self) -> Vec<Vec<(usize, f64)>> {
        let mut cols = vec![Vec::new(); self.n_items()];
        for e in &self.entries {
            cols[e.item].push((e.user, e.score));
        }
        cols
    }
}

fn index_map(ids: &[String], kind: &str) -> Result<HashMap<String, usize>> {
    let mut map = HashMap::with_capacity(ids.len());
    for (i, id) in ids.iter().enumerate() {
        if map.insert(id.clone(), i).is_some() {
            return Err(Error::arg(format!("duplicate {kind} id `{id}`")));
        }
    }
    Ok(map)
}

fn intern(id: &str, ids: &mut Vec<String>, index: &mut HashMap<String, usize>) -> usize {
    if let Some(&i) = index.get(id) {
        return i;
    }
    let i = ids.len();
    ids.push(id.to_owned());
    index.insert(id.to_owned(), i);
    i
}

/// Materializes the ratings matrix. Ids get dense indices in order of first
/// appearance; repeated (user, item) pairs are collapsed by `dedup`.
pub fn build_matrix(reviews: &[Review], dedup: DedupPolicy) -> Result<RatingsMatrix> {
    struct Acc {
        slot: usize,
        time: i64,
        sum: f64,
        count: u32,
    }

    let mut m = RatingsMatrix::default();
    let mut pairs: HashMap<(usize, usize), Acc> = HashMap::new();
    for (pos, r) in reviews.iter().enumerate() {
        r.validate()
            .map_err(|reason| Error::arg(format!("review #{pos} violates invariants: {reason}")))?;
        let user = intern(&r.user_id, &mut m.user_ids, &mut m.user_index);
        let item = intern(&r.product_id, &mut m.item_ids, &mut m.item_index);
        match pairs.entry((user, item)) {
            Entry::Vacant(v) => {
                v.insert(Acc { slot: m.entries.len(), time: r.time, sum: r.score, count: 1 });
                m.entries.push(Rating { user, item, score: r.score });
            }
            Entry::Occupied(mut o) => {
                let acc = o.get_mut();
                let entry = &mut m.entries[acc.slot];
                match dedup {
                    DedupPolicy::KeepFirst => {}
                    DedupPolicy::KeepLatest => {
                        // ties in time go to the later record in the stream
                        if r.time >= acc.time {
                            acc.time = r.time;
                            entry.score = r.score;
                        }
                    }
                    DedupPolicy::MeanScore => {
                        acc.sum += r.score;
                        acc.count += 1;
                        entry.score = acc.sum / f64::from(acc.count);
                    }
                }
            }
        }
    }
    Ok(m)
}

/// Assignment of every matrix entry to one of `k` folds.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FoldPlan {
    pub k: usize,
    /// Fold label per entry, parallel to [`RatingsMatrix::entries`].
    pub assignment: Vec<usize>,
    pub seed: u64,
}

impl FoldPlan {
    pub fn fold_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.k];
        for &f in &self.assignment {
            sizes[f] += 1;
        }
        sizes
    }

    /// Entries outside `fold`.
    pub fn train_matrix(&self, matrix: &RatingsMatrix, fold: usize) -> RatingsMatrix {
        self.select(matrix, |f| f != fold)
    }

    /// Entries inside `fold`.
    pub fn test_matrix(&self, matrix: &RatingsMatrix, fold: usize) -> RatingsMatrix {
        self.select(matrix, |f| f == fold)
    }

    fn select(&self, matrix: &RatingsMatrix, keep: impl Fn(usize) -> bool) -> RatingsMatrix {
        assert_eq!(self.assignment.len(), matrix.len(), "fold plan built for a different matrix");
        let entries = matrix
            .entries()
            .iter()
            .zip(&self.assignment)
            .filter(|(_, &f)| keep(f))
            .map(|(e, _)| *e)
            .collect();
        matrix.with_entries(entries)
    }

    /// TSV `user_id \t item_id \t score \t fold`, one line per entry.
    pub fn write_tsv<W: Write>(&self, matrix: &RatingsMatrix, mut w: W) -> Result<()> {
        for (e, f) in matrix.entries().iter().zip(&self.assignment) {
            writeln!(w, "{}\t{}\t{:?}\t{}", matrix.user_ids()[e.user], matrix.item_ids()[e.item], e.score, f)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Reads a plan written by [`FoldPlan::write_tsv`] back against `matrix`.
    pub fn read_tsv<R: BufRead>(matrix: &RatingsMatrix, reader: R, seed: u64) -> Result<FoldPlan> {
        let mut slot = HashMap::with_capacity(matrix.len());
        for (pos, e) in matrix.entries().iter().enumerate() {
            slot.insert((e.user, e.item), pos);
        }
        let mut assignment = vec![usize::MAX; matrix.len()];
        let mut k = 0;
        for (lineno, line) in reader.lines().enumerate() {
            let line = line?;
            if line.is_empty() {
                continue;
            }
            let bad = || Error::Format(format!("fold file line {}: `{line}`", lineno + 1));
            let cols: Vec<&str> = line.split('\t').collect();
            if cols.len() != 4 {
                return Err(bad());
            }
            let user = matrix.user_index(cols[0]).ok_or_else(bad)?;
            let item = matrix.item_index(cols[1]).ok_or_else(bad)?;
            let fold: usize = cols[3].parse().map_err(|_| bad())?;
            let pos = *slot.get(&(user, item)).ok_or_else(bad)?;
            assignment[pos] = fold;
            k = k.max(fold + 1);
        }
        if assignment.contains(&usize::MAX) {
            return Err(Error::Format("fold file does not cover every rating".into()));
        }
        Ok(FoldPlan { k, assignment, seed })
    }
}

/// Seeded shuffle of the entries, dealt round-robin into `k` folds.
pub fn split_folds(matrix: &RatingsMatrix, k: usize, seed: u64) -> Result<FoldPlan> {
    if k < 2 {
        return Err(Error::arg(format!("need at least 2 folds, got {k}")));
    }
    if matrix.len() < k {
        return Err(Error::arg(format!("{} ratings cannot fill {k} folds", matrix.len())));
    }
    let mut order: Vec<usize> = (0..matrix.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut assignment = vec![0; matrix.len()];
    for (deal, &pos) in order.iter().enumerate() {
        assignment[pos] = deal % k;
    }
    Ok(FoldPlan { k, assignment, seed })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct DatasetStats {
    pub n_reviews: usize,
    pub n_users: usize,
    pub n_products: usize,
    pub median_words_per_review: usize,
}

impl DatasetStats {
    pub fn write_kv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "reviews = {}", self.n_reviews)?;
        writeln!(w, "users = {}", self.n_users)?;
        writeln!(w, "products = {}", self.n_products)?;
        writeln!(w, "median_words_per_review = {}", self.median_words_per_review)?;
        w.flush()?;
        Ok(())
    }
}

/// Corpus dimensions. The median is the lower central value for even counts.
pub fn stats<F>(reviews: &[Review], tokenizer: F) -> DatasetStats
where
    F: Fn(&str) -> Vec<String>,
{
    let users: HashSet<&str> = reviews.iter().map(|r| r.user_id.as_str()).collect();
    let products: HashSet<&str> = reviews.iter().map(|r| r.product_id.as_str()).collect();
    let mut lengths: Vec<usize> = reviews.iter().map(|r| tokenizer(&r.text).len()).collect();
    let median = if lengths.is_empty() {
        0
    } else {
        let mid = (lengths.len() - 1) / 2;
        *lengths.select_nth_unstable(mid).1
    };
    DatasetStats {
        n_reviews: reviews.len(),
        n_users: users.len(),
        n_products: products.len(),
        median_words_per_review: median,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::textproc::tokenize;

    const BLOCK: &str = "product/productId: B001E4KFG0
review/userId: A3SGXH7AUHU8GW
review/profileName: delmartian
review/helpfulness: 1/1
review/score: 5.0
review/time: 1303862400
review/summary: Good Quality Dog Food
review/text: I have bought several of the Vitality canned dog food products.

";

    fn review(user: &str, item: &str, score: f64, time: i64, text: &str) -> Review {
        Review {
            product_id: item.into(),
            user_id: user.into(),
            profile_name: String::new(),
            helpfulness: (0, 0),
            score,
            time,
            summary: String::new(),
            text: text.into(),
        }
    }

    #[test]
    fn parses_reference_block() {
        let out = parse_reviews(BLOCK.as_bytes(), MalformedPolicy::FailFast).unwrap();
        assert_eq!(out.reviews.len(), 1);
        let r = &out.reviews[0];
        assert_eq!(r.product_id, "B001E4KFG0");
        assert_eq!(r.user_id, "A3SGXH7AUHU8GW");
        assert_eq!(r.profile_name, "delmartian");
        assert_eq!(r.helpfulness, (1, 1));
        assert_eq!(r.score, 5.0);
        assert_eq!(r.time, 1303862400);
        assert_eq!(r.summary, "Good Quality Dog Food");
        assert!(r.text.starts_with("I have bought several"));
    }

    #[test]
    fn empty_stream_is_empty() {
        let out = parse_reviews(&b""[..], MalformedPolicy::FailFast).unwrap();
        assert!(out.reviews.is_empty());
        assert!(out.skipped.is_empty());
    }

    #[test]
    fn missing_score_is_malformed_with_offset() {
        let bad = "product/productId: P2\nreview/userId: U2\nreview/text: hi\n\n";
        let input = format!("{BLOCK}{bad}");
        match parse_reviews(input.as_bytes(), MalformedPolicy::FailFast) {
            Err(Error::MalformedRecord { offset, reason }) => {
                assert_eq!(offset, BLOCK.len() as u64);
                assert!(reason.contains("review/score"), "{reason}");
            }
            other => panic!("expected malformed record, got {other:?}"),
        }
        let out = parse_reviews(input.as_bytes(), MalformedPolicy::SkipAndCount).unwrap();
        assert_eq!(out.reviews.len(), 1);
        assert_eq!(out.skipped.len(), 1);
        assert_eq!(out.skipped[0].offset, BLOCK.len() as u64);
    }

    #[test]
    fn unparseable_score_and_time_are_malformed() {
        for (field, value) in [("review/score", "five"), ("review/time", "yesterday"), ("review/score", "7.0")] {
            let block = BLOCK.replace(
                &format!("{field}: {}", if field == "review/score" { "5.0" } else { "1303862400" }),
                &format!("{field}: {value}"),
            );
            let err = parse_reviews(block.as_bytes(), MalformedPolicy::FailFast).unwrap_err();
            assert!(matches!(err, Error::MalformedRecord { offset: 0, .. }), "{field}={value}: {err}");
        }
    }

    #[test]
    fn zero_helpfulness_is_legal_and_crlf_is_tolerated() {
        let block = BLOCK.replace("1/1", "0/0").replace('\n', "\r\n");
        let out = parse_reviews(block.as_bytes(), MalformedPolicy::FailFast).unwrap();
        assert_eq!(out.reviews[0].helpfulness, (0, 0));
        assert_eq!(out.reviews[0].summary, "Good Quality Dog Food");
    }

    #[test]
    fn invalid_utf8_is_decoded_lossily() {
        let mut bytes = BLOCK.as_bytes().to_vec();
        let at = BLOCK.find("several").unwrap();
        bytes.insert(at, 0xff);
        let out = parse_reviews(&bytes[..], MalformedPolicy::FailFast).unwrap();
        assert!(out.reviews[0].text.contains('\u{fffd}'));
    }

    #[test]
    fn glued_blocks_are_rejected() {
        let glued = BLOCK.trim_end().to_string() + "\n" + BLOCK;
        let err = parse_reviews(glued.as_bytes(), MalformedPolicy::FailFast).unwrap_err();
        assert!(err.to_string().contains("duplicate"), "{err}");
    }

    #[test]
    fn helpfulness_anomaly_is_counted_not_rejected() {
        let block = BLOCK.replace("1/1", "3/2");
        let out = parse_reviews(block.as_bytes(), MalformedPolicy::FailFast).unwrap();
        assert_eq!(out.reviews.len(), 1);
        assert_eq!(out.helpfulness_anomalies, 1);
    }

    #[test]
    fn build_matrix_counts() {
        let reviews = vec![
            review("u1", "i1", 5.0, 1, "a"),
            review("u1", "i2", 3.0, 2, "b"),
            review("u2", "i1", 4.0, 3, "c"),
        ];
        let m = build_matrix(&reviews, DedupPolicy::KeepLatest).unwrap();
        assert_eq!((m.n_users(), m.n_items(), m.len()), (2, 2, 3));
        assert_eq!(m.user_index("u2"), Some(1));
        assert_eq!(m.item_index("i2"), Some(1));
    }

    #[test]
    fn dedup_policies() {
        let reviews = vec![review("u", "i", 2.0, 20, ""), review("u", "i", 4.0, 10, ""), review("u", "i", 3.0, 30, "")];
        let score = |p| build_matrix(&reviews, p).unwrap().entries()[0].score;
        assert_eq!(score(DedupPolicy::KeepLatest), 3.0);
        assert_eq!(score(DedupPolicy::KeepFirst), 2.0);
        assert_eq!(score(DedupPolicy::MeanScore), 3.0);

        let two = vec![review("u", "i", 1.0, 5, ""), review("u", "i", 5.0, 9, "")];
        let m = build_matrix(&two, DedupPolicy::KeepLatest).unwrap();
        assert_eq!(m.len(), 1);
        assert_eq!(m.entries()[0].score, 5.0);
    }

    #[test]
    fn empty_reviews_give_empty_matrix() {
        let m = build_matrix(&[], DedupPolicy::default()).unwrap();
        assert_eq!((m.n_users(), m.n_items(), m.len()), (0, 0, 0));
    }

    fn matrix_with(n: usize) -> RatingsMatrix {
        let reviews: Vec<Review> = (0..n).map(|i| review(&format!("u{i}"), &format!("i{}", i % 3), 4.0, 0, "")).collect();
        build_matrix(&reviews, DedupPolicy::default()).unwrap()
    }

    #[test]
    fn folds_even_split() {
        let plan = split_folds(&matrix_with(10), 5, 7).unwrap();
        assert_eq!(plan.fold_sizes(), vec![2; 5]);
        let mut sizes = split_folds(&matrix_with(11), 5, 7).unwrap().fold_sizes();
        sizes.sort_unstable();
        assert_eq!(sizes, vec![2, 2, 2, 2, 3]);
    }

    #[test]
    fn folds_are_deterministic() {
        let m = matrix_with(40);
        assert_eq!(split_folds(&m, 5, 99).unwrap(), split_folds(&m, 5, 99).unwrap());
        assert_ne!(split_folds(&m, 5, 99).unwrap().assignment, split_folds(&m, 5, 100).unwrap().assignment);
    }

    #[test]
    fn fold_argument_errors() {
        assert!(matches!(split_folds(&matrix_with(10), 1, 0), Err(Error::Argument(_))));
        assert!(matches!(split_folds(&matrix_with(3), 5, 0), Err(Error::Argument(_))));
    }

    #[test]
    fn fold_tsv_round_trip() {
        let m = matrix_with(12);
        let plan = split_folds(&m, 3, 1).unwrap();
        let mut buf = Vec::new();
        plan.write_tsv(&m, &mut buf).unwrap();
        let first = String::from_utf8(buf.clone()).unwrap();
        assert_eq!(first.lines().next().unwrap().split('\t').count(), 4);
        let back = FoldPlan::read_tsv(&m, &buf[..], 1).unwrap();
        assert_eq!(back, plan);
    }

    #[test]
    fn stats_median_and_counts() {
        let words = |n: usize| vec!["w"; n].join(" ");
        let reviews = vec![
            review("u1", "p1", 5.0, 0, &words(2)),
            review("u2", "p1", 5.0, 0, &words(100)),
            review("u1", "p2", 5.0, 0, &words(56)),
        ];
        let s = stats(&reviews, tokenize);
        assert_eq!(s, DatasetStats { n_reviews: 3, n_users: 2, n_products: 2, median_words_per_review: 56 });

        let even = [review("u", "p", 5.0, 0, &words(3)), review("u", "p", 5.0, 0, &words(9))];
        assert_eq!(stats(&even, tokenize).median_words_per_review, 3);
        assert_eq!(stats(&[], tokenize), DatasetStats::default());
    }
}
