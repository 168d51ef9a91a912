//! Interaction ingestion, preprocessing, sequence construction, and the
//! on-disk corpus directory format (vocab.tsv + sequences.jsonl).

use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::error::CoreError;

pub const PAD: usize = 0;
pub const MASK: usize = 1;
pub const RESERVED: usize = 2;

pub const MIN_INTERACTIONS_PER_DOMAIN: usize = 5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Domain {
    X,
    Y,
}

impl Domain {
    pub fn other(self) -> Domain {
        match self {
            Domain::X => Domain::Y,
            Domain::Y => Domain::X,
        }
    }

    pub fn parse(s: &str) -> Option<Domain> {
        match s {
            "X" => Some(Domain::X),
            "Y" => Some(Domain::Y),
            _ => None,
        }
    }

    /// Binary label used by the domain discriminator.
    pub fn label(self) -> f64 {
        match self {
            Domain::X => 1.0,
            Domain::Y => 0.0,
        }
    }
}

impl fmt::Display for Domain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Domain::X => write!(f, "X"),
            Domain::Y => write!(f, "Y"),
        }
    }
}

/// One (user, item, domain, timestamp) event.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct InteractionRecord {
    pub user_id: String,
    pub item_id: String,
    pub domain: Domain,
    pub timestamp: i64,
}

/// Dense item indexing. Index 0 is PAD, 1 is MASK; items follow in
/// first-occurrence order, so indexing is stable across runs on identical
/// input.
#[derive(Clone, Debug, Default)]
pub struct Vocabulary {
    items: Vec<(String, Domain)>,
    index_of: IndexMap<String, usize>,
}

impl Vocabulary {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn intern(&mut self, item_id: &str, domain: Domain) -> usize {
        if let Some(&i) = self.index_of.get(item_id) {
            debug_assert_eq!(self.items[i - RESERVED].1, domain, "item in two domains");
            return i;
        }
        let idx = RESERVED + self.items.len();
        self.items.push((item_id.to_string(), domain));
        self.index_of.insert(item_id.to_string(), idx);
        idx
    }

    pub fn index_of(&self, item_id: &str) -> Option<usize> {
        self.index_of.get(item_id).copied()
    }

    pub fn domain_of(&self, index: usize) -> Domain {
        self.items[index - RESERVED].1
    }

    pub fn item_id(&self, index: usize) -> &str {
        &self.items[index - RESERVED].0
    }

    /// Total table size including reserved tokens.
    pub fn size(&self) -> usize {
        RESERVED + self.items.len()
    }

    pub fn n_items(&self) -> usize {
        self.items.len()
    }

    /// Dense indices of all items belonging to `domain`, ascending.
    pub fn domain_items(&self, domain: Domain) -> Vec<usize> {
        self.items
            .iter()
            .enumerate()
            .filter(|(_, (_, d))| *d == domain)
            .map(|(i, _)| i + RESERVED)
            .collect()
    }
}

/// Leave-one-out markers for one domain sequence: the first `train_end`
/// items are training history, then the validation item, then the test item.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Split {
    pub train_end: usize,
    pub valid_item: usize,
    pub test_item: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UserSequences {
    pub user: String,
    pub seq_x: Vec<usize>,
    pub seq_y: Vec<usize>,
    pub seq_cross: Vec<usize>,
    pub split_x: Split,
    pub split_y: Split,
}

impl UserSequences {
    pub fn seq(&self, domain: Domain) -> &[usize] {
        match domain {
            Domain::X => &self.seq_x,
            Domain::Y => &self.seq_y,
        }
    }

    pub fn split(&self, domain: Domain) -> Split {
        match domain {
            Domain::X => self.split_x,
            Domain::Y => self.split_y,
        }
    }

    /// Training portion of the given domain sequence.
    pub fn train(&self, domain: Domain) -> &[usize] {
        let s = self.seq(domain);
        &s[..self.split(domain).train_end]
    }

    /// Position in `seq_cross` of the k-th (0-based) item of `domain`.
    pub fn cross_position_of_nth(&self, vocab: &Vocabulary, domain: Domain, k: usize) -> usize {
        let mut seen = 0;
        for (p, &item) in self.seq_cross.iter().enumerate() {
            if vocab.domain_of(item) == domain {
                if seen == k {
                    return p;
                }
                seen += 1;
            }
        }
        panic!("domain {domain} has fewer than {k} items in cross sequence");
    }

    /// Cross-sequence prefix strictly before the target domain's validation
    /// item; the Stage-1 training view of the integrated sequence.
    pub fn cross_train(&self, vocab: &Vocabulary, target: Domain) -> &[usize] {
        let p = self.cross_position_of_nth(vocab, target, self.split(target).train_end);
        &self.seq_cross[..p]
    }

    /// Cross-sequence prefix strictly before the target domain's test item.
    pub fn cross_before_test(&self, vocab: &Vocabulary, target: Domain) -> &[usize] {
        let p = self.cross_position_of_nth(vocab, target, self.split(target).train_end + 1);
        &self.seq_cross[..p]
    }
}

#[derive(Clone, Debug, Default)]
pub struct IngestReport {
    pub parsed: usize,
    pub malformed_lines: Vec<usize>,
}

/// Parse a UTF-8 TSV with header `user_id\titem_id\tdomain\ttimestamp`.
/// Valid rows are returned in file order; malformed rows are counted and,
/// when they exceed 10% of all rows, the file is rejected.
pub fn ingest(path: &Path) -> Result<(Vec<InteractionRecord>, IngestReport), CoreError> {
    let file = fs::File::open(path)
        .map_err(|e| CoreError::Data(format!("cannot read {}: {e}", path.display())))?;
    let reader = BufReader::new(file);
    let mut records = Vec::new();
    let mut report = IngestReport::default();
    let mut total_rows = 0usize;
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        if lineno == 0 {
            if !line.is_empty() && line != "user_id\titem_id\tdomain\ttimestamp" {
                return Err(CoreError::Data(format!(
                    "{}: unexpected header {line:?}",
                    path.display()
                )));
            }
            continue;
        }
        if line.is_empty() {
            continue;
        }
        total_rows += 1;
        match parse_row(&line) {
            Some(rec) => {
                records.push(rec);
                report.parsed += 1;
            }
            None => report.malformed_lines.push(lineno + 1),
        }
    }
    if total_rows > 0 && report.malformed_lines.len() * 10 > total_rows {
        let first: Vec<String> = report
            .malformed_lines
            .iter()
            .take(10)
            .map(|l| l.to_string())
            .collect();
        return Err(CoreError::Data(format!(
            "{}: {} of {} rows malformed (>10%); first offending lines: {}",
            path.display(),
            report.malformed_lines.len(),
            total_rows,
            first.join(", ")
        )));
    }
    Ok((records, report))
}

fn parse_row(line: &str) -> Option<InteractionRecord> {
    let mut parts = line.split('\t');
    let user_id = parts.next()?.trim();
    let item_id = parts.next()?.trim();
    let domain = Domain::parse(parts.next()?.trim())?;
    let timestamp: i64 = parts.next()?.trim().parse().ok()?;
    if parts.next().is_some() || user_id.is_empty() || item_id.is_empty() || timestamp < 0 {
        return None;
    }
    Some(InteractionRecord {
        user_id: user_id.to_string(),
        item_id: item_id.to_string(),
        domain,
        timestamp,
    })
}

#[derive(Clone, Debug)]
pub struct Corpus {
    pub vocab: Vocabulary,
    pub users: Vec<UserSequences>,
}

/// Apply the preprocessing pipeline: drop users with fewer than five
/// interactions in either domain, sort per user chronologically (stable in
/// input order on timestamp ties), build the merged cross sequence, and set
/// leave-one-out split markers per domain.
pub fn preprocess(records: &[InteractionRecord]) -> Result<Corpus, CoreError> {
    if records.is_empty() {
        return Err(CoreError::Data("no interaction records to preprocess".into()));
    }
    // group by user in first-appearance order
    let mut by_user: IndexMap<&str, Vec<&InteractionRecord>> = IndexMap::new();
    for rec in records {
        by_user.entry(&rec.user_id).or_default().push(rec);
    }
    let survives = |events: &[&InteractionRecord]| {
        let nx = events.iter().filter(|r| r.domain == Domain::X).count();
        let ny = events.iter().filter(|r| r.domain == Domain::Y).count();
        nx >= MIN_INTERACTIONS_PER_DOMAIN && ny >= MIN_INTERACTIONS_PER_DOMAIN
    };
    let surviving: IndexMap<&str, Vec<&InteractionRecord>> = by_user
        .into_iter()
        .filter(|(_, events)| survives(events))
        .collect();
    if surviving.is_empty() {
        return Err(CoreError::Data(format!(
            "no users survive the >= {MIN_INTERACTIONS_PER_DOMAIN}-interactions-per-domain filter"
        )));
    }
    // vocabulary in first-occurrence order over surviving users' records
    let mut vocab = Vocabulary::new();
    for rec in records {
        if surviving.contains_key(rec.user_id.as_str()) {
            vocab.intern(&rec.item_id, rec.domain);
        }
    }
    let mut users = Vec::with_capacity(surviving.len());
    for (user, mut events) in surviving {
        events.sort_by_key(|r| r.timestamp); // stable: input order breaks ties
        let seq_cross: Vec<usize> = events
            .iter()
            .map(|r| vocab.index_of(&r.item_id).unwrap())
            .collect();
        let filter = |d: Domain| -> Vec<usize> {
            seq_cross
                .iter()
                .copied()
                .filter(|&i| vocab.domain_of(i) == d)
                .collect()
        };
        let seq_x = filter(Domain::X);
        let seq_y = filter(Domain::Y);
        let split_of = |s: &[usize]| Split {
            train_end: s.len() - 2,
            valid_item: s[s.len() - 2],
            test_item: s[s.len() - 1],
        };
        users.push(UserSequences {
            user: user.to_string(),
            split_x: split_of(&seq_x),
            split_y: split_of(&seq_y),
            seq_x,
            seq_y,
            seq_cross,
        });
    }
    Ok(Corpus { vocab, users })
}

/// Keep the most recent `min(|seq|, l)` items, left-padding shorter
/// sequences; the mask marks real positions.
pub fn window(seq: &[usize], l: usize, pad_index: usize) -> (Vec<usize>, Vec<bool>) {
    assert!(l >= 1, "window length must be >= 1");
    let take = seq.len().min(l);
    let mut ids = vec![pad_index; l - take];
    let mut mask = vec![false; l - take];
    ids.extend_from_slice(&seq[seq.len() - take..]);
    mask.extend(std::iter::repeat(true).take(take));
    (ids, mask)
}

/// Like [`window`] but never longer than the sequence itself; avoids
/// spending attention compute on padding when batching is per-sequence.
pub fn window_fit(seq: &[usize], l_max: usize, pad_index: usize) -> (Vec<usize>, Vec<bool>) {
    window(seq, seq.len().clamp(1, l_max), pad_index)
}

#[derive(Clone, Debug, Serialize)]
pub struct DomainStats {
    pub domain: String,
    pub users: usize,
    pub items: usize,
    pub interactions: usize,
    pub avg_len: f64,
    pub density: f64,
}

impl Corpus {
    pub fn stats(&self) -> Vec<DomainStats> {
        [Domain::X, Domain::Y]
            .iter()
            .map(|&d| {
                let items = self.vocab.domain_items(d).len();
                let interactions: usize = self.users.iter().map(|u| u.seq(d).len()).sum();
                let users = self.users.len();
                DomainStats {
                    domain: d.to_string(),
                    users,
                    items,
                    interactions,
                    avg_len: interactions as f64 / users.max(1) as f64,
                    density: interactions as f64 / (users * items).max(1) as f64,
                }
            })
            .collect()
    }

    pub fn save(&self, dir: &Path) -> Result<(), CoreError> {
        fs::create_dir_all(dir)?;
        let mut vocab_out = String::new();
        for i in RESERVED..self.vocab.size() {
            vocab_out.push_str(&format!(
                "{}\t{}\t{}\n",
                i,
                self.vocab.item_id(i),
                self.vocab.domain_of(i)
            ));
        }
        fs::write(dir.join("vocab.tsv"), vocab_out)?;
        let mut f = fs::File::create(dir.join("sequences.jsonl"))?;
        for u in &self.users {
            let v = serde_json::to_value(u)?;
            writeln!(f, "{}", serde_json::to_string(&sorted(v))?)?;
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self, CoreError> {
        let mut vocab = Vocabulary::new();
        for line in fs::read_to_string(dir.join("vocab.tsv"))?.lines() {
            let mut parts = line.split('\t');
            let idx: usize = parts
                .next()
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| CoreError::Data("bad vocab.tsv row".into()))?;
            let item = parts
                .next()
                .ok_or_else(|| CoreError::Data("bad vocab.tsv row".into()))?;
            let domain = parts
                .next()
                .and_then(Domain::parse)
                .ok_or_else(|| CoreError::Data("bad vocab.tsv domain".into()))?;
            let assigned = vocab.intern(item, domain);
            if assigned != idx {
                return Err(CoreError::Data(format!(
                    "vocab.tsv indices not contiguous: expected {assigned}, found {idx}"
                )));
            }
        }
        let mut users = Vec::new();
        for line in fs::read_to_string(dir.join("sequences.jsonl"))?.lines() {
            users.push(serde_json::from_str(line)?);
        }
        Ok(Corpus { vocab, users })
    }
}

fn sorted(v: serde_json::Value) -> serde_json::Value {
    match v {
        serde_json::Value::Object(map) => {
            let m: std::collections::BTreeMap<_, _> =
                map.into_iter().map(|(k, v)| (k, sorted(v))).collect();
            serde_json::to_value(m).unwrap()
        }
        serde_json::Value::Array(items) => {
            serde_json::Value::Array(items.into_iter().map(sorted).collect())
        }
        other => other,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::NamedTempFile;

    fn rec(user: &str, item: &str, d: Domain, ts: i64) -> InteractionRecord {
        InteractionRecord {
            user_id: user.into(),
            item_id: item.into(),
            domain: d,
            timestamp: ts,
        }
    }

    /// A user with enough events in both domains.
    fn full_user(records: &mut Vec<InteractionRecord>, user: &str, base_ts: i64) {
        for i in 0..5 {
            records.push(rec(user, &format!("x{i}"), Domain::X, base_ts + 2 * i as i64));
            records.push(rec(user, &format!("y{i}"), Domain::Y, base_ts + 2 * i as i64 + 1));
        }
    }

    #[test]
    fn ingest_well_formed_tsv() {
        let mut f = NamedTempFile::new().unwrap();
        writeln!(f, "user_id\titem_id\tdomain\ttimestamp").unwrap();
        writeln!(f, "u1\ti1\tX\t10").unwrap();
        writeln!(f, "u1\ti2\tY\t11").unwrap();
        writeln!(f, "u2\ti1\tX\t12").unwrap();
        let (records, report) = ingest(f.path()).unwrap();
        assert_eq!(records.len(), 3);
        assert!(report.malformed_lines.is_empty());
    }

    #[test]
    fn ingest_counts_malformed_rows() {
        let mut f = NamedTempFile::new().unwrap();
        writeln!(f, "user_id\titem_id\tdomain\ttimestamp").unwrap();
        for i in 0..9 {
            writeln!(f, "u1\ti{i}\tX\t{i}").unwrap();
        }
        writeln!(f, "u1\ti9\tX").unwrap(); // missing timestamp
        let (records, report) = ingest(f.path()).unwrap();
        assert_eq!(records.len(), 9);
        assert_eq!(report.malformed_lines.len(), 1);
    }

    #[test]
    fn ingest_rejects_mostly_malformed_file() {
        let mut f = NamedTempFile::new().unwrap();
        writeln!(f, "user_id\titem_id\tdomain\ttimestamp").unwrap();
        writeln!(f, "u1\ti0\tX\t0").unwrap();
        writeln!(f, "garbage").unwrap();
        let err = ingest(f.path()).unwrap_err();
        assert!(err.to_string().contains("malformed"));
    }

    #[test]
    fn ingest_empty_file_is_empty_list() {
        let f = NamedTempFile::new().unwrap();
        let (records, report) = ingest(f.path()).unwrap();
        assert!(records.is_empty());
        assert_eq!(report.parsed, 0);
    }

    #[test]
    fn preprocess_drops_user_below_threshold() {
        let mut records = Vec::new();
        full_user(&mut records, "keep", 0);
        // 5 X-interactions but only 4 Y-interactions
        for i in 0..5 {
            records.push(rec("drop", &format!("x{i}"), Domain::X, 100 + i as i64));
        }
        for i in 0..4 {
            records.push(rec("drop", &format!("y{i}"), Domain::Y, 200 + i as i64));
        }
        let corpus = preprocess(&records).unwrap();
        assert_eq!(corpus.users.len(), 1);
        assert_eq!(corpus.users[0].user, "keep");
    }

    #[test]
    fn preprocess_merge_filter_round_trip() {
        let mut records = Vec::new();
        full_user(&mut records, "u", 0);
        let corpus = preprocess(&records).unwrap();
        let u = &corpus.users[0];
        let filt_x: Vec<usize> = u
            .seq_cross
            .iter()
            .copied()
            .filter(|&i| corpus.vocab.domain_of(i) == Domain::X)
            .collect();
        let filt_y: Vec<usize> = u
            .seq_cross
            .iter()
            .copied()
            .filter(|&i| corpus.vocab.domain_of(i) == Domain::Y)
            .collect();
        assert_eq!(filt_x, u.seq_x);
        assert_eq!(filt_y, u.seq_y);
    }

    #[test]
    fn preprocess_split_markers() {
        let mut records = Vec::new();
        for i in 0..10 {
            records.push(rec("u", &format!("x{i}"), Domain::X, i as i64));
        }
        for i in 0..5 {
            records.push(rec("u", &format!("y{i}"), Domain::Y, 100 + i as i64));
        }
        let corpus = preprocess(&records).unwrap();
        let u = &corpus.users[0];
        assert_eq!(u.split_x.train_end, 8);
        assert_eq!(u.split_x.valid_item, u.seq_x[8]);
        assert_eq!(u.split_x.test_item, u.seq_x[9]);
        assert!(u.split_x.train_end < u.seq_x.len() - 1);
    }

    #[test]
    fn preprocess_stable_on_timestamp_ties() {
        let mut records = Vec::new();
        for i in 0..5 {
            records.push(rec("u", &format!("x{i}"), Domain::X, 0)); // all tied
            records.push(rec("u", &format!("y{i}"), Domain::Y, 0));
        }
        let a = preprocess(&records).unwrap();
        let b = preprocess(&records).unwrap();
        assert_eq!(a.users[0].seq_cross, b.users[0].seq_cross);
        // ties resolved in input order
        assert_eq!(a.vocab.item_id(a.users[0].seq_cross[0]), "x0");
        assert_eq!(a.vocab.item_id(a.users[0].seq_cross[1]), "y0");
    }

    #[test]
    fn preprocess_zero_survivors_is_fatal() {
        let records = vec![rec("u", "i", Domain::X, 0)];
        let err = preprocess(&records).unwrap_err();
        assert!(err.to_string().contains("5"));
    }

    #[test]
    fn window_cases() {
        let (ids, mask) = window(&[2, 3, 4], 3, PAD);
        assert_eq!(ids, vec![2, 3, 4]);
        assert!(mask.iter().all(|&m| m));

        let (ids, _) = window(&[2, 3, 4, 5, 6, 7], 3, PAD);
        assert_eq!(ids, vec![5, 6, 7]);

        let (ids, mask) = window(&[], 4, PAD);
        assert_eq!(ids, vec![PAD; 4]);
        assert!(mask.iter().all(|&m| !m));

        let (ids, mask) = window(&[9], 3, PAD);
        assert_eq!(ids, vec![PAD, PAD, 9]);
        assert_eq!(mask, vec![false, false, true]);
    }

    #[test]
    fn corpus_round_trip_and_determinism() {
        let mut records = Vec::new();
        full_user(&mut records, "u1", 0);
        full_user(&mut records, "u2", 50);
        let corpus = preprocess(&records).unwrap();
        let dir = tempfile::tempdir().unwrap();
        corpus.save(dir.path()).unwrap();
        let bytes1 = std::fs::read(dir.path().join("sequences.jsonl")).unwrap();
        corpus.save(dir.path()).unwrap();
        let bytes2 = std::fs::read(dir.path().join("sequences.jsonl")).unwrap();
        assert_eq!(bytes1, bytes2);
        let loaded = Corpus::load(dir.path()).unwrap();
        assert_eq!(loaded.users, corpus.users);
        assert_eq!(loaded.vocab.size(), corpus.vocab.size());
    }

    #[test]
    fn cross_truncation_excludes_heldout_items() {
        let mut records = Vec::new();
        full_user(&mut records, "u", 0);
        let corpus = preprocess(&records).unwrap();
        let u = &corpus.users[0];
        let train_cross = u.cross_train(&corpus.vocab, Domain::X);
        assert!(!train_cross.contains(&u.split_x.valid_item));
        assert!(!train_cross.contains(&u.split_x.test_item));
        let before_test = u.cross_before_test(&corpus.vocab, Domain::X);
        assert!(before_test.contains(&u.split_x.valid_item));
        assert!(!before_test.contains(&u.split_x.test_item));
    }

    proptest::proptest! {
        #[test]
        fn window_pads_prefix_and_keeps_suffix(
            seq in proptest::collection::vec(2usize..100, 0..40),
            l in 1usize..60,
        ) {
            let (ids, mask) = window(&seq, l, PAD);
            proptest::prop_assert_eq!(ids.len(), l);
            proptest::prop_assert_eq!(mask.len(), l);
            let take = seq.len().min(l);
            for i in 0..l - take {
                proptest::prop_assert_eq!(ids[i], PAD);
                proptest::prop_assert!(!mask[i]);
            }
            for (i, &item) in seq[seq.len() - take..].iter().enumerate() {
                proptest::prop_assert_eq!(ids[l - take + i], item);
                proptest::prop_assert!(mask[l - take + i]);
            }
        }

        #[test]
        fn window_fit_never_pads_nonempty_sequences(
            seq in proptest::collection::vec(2usize..100, 1..40),
            l_max in 1usize..60,
        ) {
            let (ids, mask) = window_fit(&seq, l_max, PAD);
            proptest::prop_assert_eq!(ids.len(), seq.len().min(l_max));
            proptest::prop_assert!(mask.iter().all(|&m| m));
            proptest::prop_assert_eq!(&ids[..], &seq[seq.len() - ids.len()..]);
        }
    }
}
