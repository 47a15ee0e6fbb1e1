//! Interaction logs, leave-one-out splits, history windows and negative sampling.

use std::collections::{HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::calendar::{Timestamp, SECONDS_PER_DAY, SECONDS_PER_HOUR};
use crate::error::{Error, Result};
use crate::model::{Example, HistoryEntry};
use crate::rng;

/// 180 days, the look-back window for evaluation negative timestamps.
pub const EVAL_WINDOW_SECS: i64 = 180 * SECONDS_PER_DAY;
/// Consecutive rejections after which a timestamp sampler gives up.
pub const MAX_REJECTIONS: usize = 1_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Label {
    Positive,
    Negative,
}

impl Label {
    pub fn value(self) -> f64 {
        match self {
            Label::Positive => 1.0,
            Label::Negative => 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Interaction {
    pub user: usize,
    pub item: usize,
    pub timestamp: Timestamp,
    pub label: Label,
}

/// Dense ids in first-appearance order.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Vocab {
    external: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    pub fn get_or_insert(&mut self, key: &str) -> usize {
        if let Some(&id) = self.index.get(key) {
            return id;
        }
        let id = self.external.len();
        self.external.push(key.to_string());
        self.index.insert(key.to_string(), id);
        id
    }

    pub fn get(&self, key: &str) -> Option<usize> {
        self.index.get(key).copied()
    }

    pub fn external(&self, id: usize) -> &str {
        &self.external[id]
    }

    pub fn len(&self) -> usize {
        self.external.len()
    }

    pub fn is_empty(&self) -> bool {
        self.external.is_empty()
    }

    /// Size plus an FNV-1a hash of the ids in dense order.
    pub fn fingerprint(&self) -> String {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for id in &self.external {
            for b in id.bytes().chain(std::iter::once(b'\n')) {
                h ^= u64::from(b);
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        }
        format!("{}:{h:016x}", self.external.len())
    }

    /// One external id per line; the line number is the dense id.
    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        for id in &self.external {
            writeln!(w, "{id}")?;
        }
        Ok(())
    }
}

/// Positive interactions in input order with per-user chronological indexes.
#[derive(Debug, Clone, Default)]
pub struct Dataset {
    users: Vocab,
    items: Vocab,
    interactions: Vec<Interaction>,
    /// Per user, indices into `interactions` sorted by (timestamp, input order).
    sequences: Vec<Vec<usize>>,
    /// Per user, sorted distinct consumed items.
    consumed: Vec<Vec<usize>>,
    /// Sorted timestamps of every (user, item) pair.
    pair_times: HashMap<(usize, usize), Vec<Timestamp>>,
}

impl Dataset {
    /// Builds a dataset from `(user, item, timestamp)` records, assigning ids
    /// in first-appearance order.
    pub fn from_records<'a, I>(records: I) -> Result<Self>
    where
        I: IntoIterator<Item = (&'a str, &'a str, Timestamp)>,
    {
        let mut users = Vocab::default();
        let mut items = Vocab::default();
        let mut interactions = Vec::new();
        for (u, i, t) in records {
            if t < 0 {
                return Err(Error::Input(format!("negative timestamp {t}")));
            }
            interactions.push(Interaction {
                user: users.get_or_insert(u),
                item: items.get_or_insert(i),
                timestamp: t,
                label: Label::Positive,
            });
        }
        Ok(Self::index(users, items, interactions))
    }

    fn index(users: Vocab, items: Vocab, interactions: Vec<Interaction>) -> Self {
        let mut sequences = vec![Vec::new(); users.len()];
        for (k, x) in interactions.iter().enumerate() {
            sequences[x.user].push(k);
        }
        // Stable sort keeps input order among equal timestamps.
        for seq in &mut sequences {
            seq.sort_by_key(|&k| interactions[k].timestamp);
        }
        let mut consumed = vec![Vec::new(); users.len()];
        let mut pair_times: HashMap<(usize, usize), Vec<Timestamp>> = HashMap::new();
        for x in &interactions {
            consumed[x.user].push(x.item);
            pair_times.entry((x.user, x.item)).or_default().push(x.timestamp);
        }
        for c in &mut consumed {
            c.sort_unstable();
            c.dedup();
        }
        for times in pair_times.values_mut() {
            times.sort_unstable();
        }
        Self {
            users,
            items,
            interactions,
            sequences,
            consumed,
            pair_times,
        }
    }

    /// Parses tab-separated `user<TAB>item<TAB>timestamp` lines.
    pub fn parse<R: BufRead>(reader: R) -> Result<Self> {
        let mut rows: Vec<(String, String, Timestamp)> = Vec::new();
        for (n, line) in reader.lines().enumerate() {
            let line = line?;
            let line_no = n + 1;
            let line = line.strip_suffix('\r').unwrap_or(&line);
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 3 {
                return Err(Error::Input(format!(
                    "line {line_no}: expected 3 tab-separated fields, found {}",
                    fields.len()
                )));
            }
            if fields[0].is_empty() || fields[1].is_empty() {
                return Err(Error::Input(format!("line {line_no}: empty id")));
            }
            if !fields[2].bytes().all(|b| b.is_ascii_digit()) || fields[2].is_empty() {
                return Err(Error::Input(format!(
                    "line {line_no}: timestamp '{}' is not a non-negative integer",
                    fields[2]
                )));
            }
            let t: Timestamp = fields[2].parse().map_err(|_| {
                Error::Input(format!("line {line_no}: timestamp '{}' out of range", fields[2]))
            })?;
            rows.push((fields[0].to_string(), fields[1].to_string(), t));
        }
        Self::from_records(rows.iter().map(|(u, i, t)| (u.as_str(), i.as_str(), *t)))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = File::open(path)
            .map_err(|e| Error::Input(format!("cannot open {}: {e}", path.display())))?;
        Self::parse(BufReader::new(file))
    }

    /// Writes interactions back out in input order with external ids.
    pub fn write_tsv<W: Write>(&self, w: &mut W) -> Result<()> {
        for x in &self.interactions {
            writeln!(
                w,
                "{}\t{}\t{}",
                self.users.external(x.user),
                self.items.external(x.item),
                x.timestamp
            )?;
        }
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_tsv(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn users(&self) -> &Vocab {
        &self.users
    }

    pub fn items(&self) -> &Vocab {
        &self.items
    }

    pub fn num_users(&self) -> usize {
        self.users.len()
    }

    pub fn num_items(&self) -> usize {
        self.items.len()
    }

    pub fn len(&self) -> usize {
        self.interactions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.interactions.is_empty()
    }

    pub fn interactions(&self) -> &[Interaction] {
        &self.interactions
    }

    pub fn interaction(&self, k: usize) -> &Interaction {
        &self.interactions[k]
    }

    /// Chronological interaction indices of `u`.
    pub fn sequence(&self, u: usize) -> &[usize] {
        &self.sequences[u]
    }

    pub fn consumed(&self, u: usize) -> &[usize] {
        &self.consumed[u]
    }

    pub fn has_consumed(&self, u: usize, i: usize) -> bool {
        self.consumed[u].binary_search(&i).is_ok()
    }

    /// Sorted timestamps at which `u` interacted with `i`.
    pub fn pair_times(&self, u: usize, i: usize) -> &[Timestamp] {
        self.pair_times.get(&(u, i)).map(Vec::as_slice).unwrap_or(&[])
    }

    /// Time range `(first, last)` of a user's whole sequence.
    pub fn time_range(&self, u: usize) -> Option<(Timestamp, Timestamp)> {
        let seq = &self.sequences[u];
        Some((
            self.interactions[*seq.first()?].timestamp,
            self.interactions[*seq.last()?].timestamp,
        ))
    }

    /// Applies the preprocessing filters until no more records are removed.
    pub fn filter(&self, spec: &FilterSpec) -> Dataset {
        let mut keep: Vec<bool> = vec![true; self.interactions.len()];
        loop {
            let mut user_count = vec![0usize; self.num_users()];
            let mut item_count = vec![0usize; self.num_items()];
            let mut span: Vec<Option<(Timestamp, Timestamp)>> = vec![None; self.num_users()];
            for (x, _) in self.interactions.iter().zip(&keep).filter(|(_, &k)| k) {
                user_count[x.user] += 1;
                item_count[x.item] += 1;
                let s = span[x.user].get_or_insert((x.timestamp, x.timestamp));
                s.0 = s.0.min(x.timestamp);
                s.1 = s.1.max(x.timestamp);
            }
            let min_span = spec.min_history_span_days.map(|d| d as i64 * SECONDS_PER_DAY);
            let mut changed = false;
            for (k, x) in self.interactions.iter().enumerate() {
                if !keep[k] {
                    continue;
                }
                let short_span = match (min_span, span[x.user]) {
                    (Some(m), Some((a, b))) => b - a < m,
                    _ => false,
                };
                if user_count[x.user] < spec.min_user_interactions
                    || item_count[x.item] < spec.min_item_interactions
                    || short_span
                {
                    keep[k] = false;
                    changed = true;
                }
            }
            if !changed {
                break;
            }
        }
        let records: Vec<(&str, &str, Timestamp)> = self
            .interactions
            .iter()
            .zip(&keep)
            .filter(|(_, &k)| k)
            .map(|(x, _)| {
                (
                    self.users.external(x.user),
                    self.items.external(x.item),
                    x.timestamp,
                )
            })
            .collect();
        Dataset::from_records(records).expect("filtered records are already validated")
    }
}

/// Preprocessing thresholds applied at ingest.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct FilterSpec {
    pub min_user_interactions: usize,
    pub min_item_interactions: usize,
    /// Users whose first and last interaction are fewer days apart are dropped.
    pub min_history_span_days: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SplitMode {
    /// Last interaction is the test, second last the validation.
    Standard,
    /// Test and validation are the latest first-time interactions with items
    /// the user consumed at least `min_repeat` times.
    RepeatAware { min_repeat: usize },
}

impl std::fmt::Display for SplitMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            SplitMode::Standard => f.write_str("standard"),
            SplitMode::RepeatAware { min_repeat } => write!(f, "repeat-aware:{min_repeat}"),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct UserSplit {
    /// Training interaction indices, chronological.
    pub train: Vec<usize>,
    pub validation: Option<usize>,
    pub test: Option<usize>,
}

impl UserSplit {
    pub fn is_evaluated(&self) -> bool {
        self.validation.is_some() && self.test.is_some()
    }
}

#[derive(Debug, Clone)]
pub struct Split {
    pub mode: SplitMode,
    users: Vec<UserSplit>,
    /// Users without enough interactions to be evaluated.
    pub dropped: usize,
}

impl Split {
    pub fn new(dataset: &Dataset, mode: SplitMode) -> Self {
        let mut dropped = 0;
        let users = (0..dataset.num_users())
            .map(|u| {
                let seq = dataset.sequence(u);
                let held_out = match mode {
                    SplitMode::Standard if seq.len() >= 3 => Some((seq.len() - 2, seq.len() - 1)),
                    SplitMode::Standard => None,
                    SplitMode::RepeatAware { min_repeat } => {
                        repeat_aware_positions(dataset, seq, min_repeat)
                    }
                };
                match held_out {
                    Some((val_pos, test_pos)) => UserSplit {
                        train: seq[..val_pos].to_vec(),
                        validation: Some(seq[val_pos]),
                        test: Some(seq[test_pos]),
                    },
                    None => {
                        dropped += 1;
                        UserSplit {
                            train: seq.to_vec(),
                            validation: None,
                            test: None,
                        }
                    }
                }
            })
            .collect();
        if dropped > 0 {
            log::info!("{dropped} users lack enough interactions for evaluation under {mode}");
        }
        Self {
            mode,
            users,
            dropped,
        }
    }

    pub fn user(&self, u: usize) -> &UserSplit {
        &self.users[u]
    }

    pub fn num_users(&self) -> usize {
        self.users.len()
    }

    /// Users that have both a validation and a test interaction, ascending.
    pub fn eval_users(&self) -> impl Iterator<Item = usize> + '_ {
        self.users
            .iter()
            .enumerate()
            .filter(|(_, s)| s.is_evaluated())
            .map(|(u, _)| u)
    }

    pub fn train_len(&self) -> usize {
        self.users.iter().map(|s| s.train.len()).sum()
    }
}

/// Positions (in the chronological sequence) of validation and test under
/// the repeat-aware rule.
fn repeat_aware_positions(
    dataset: &Dataset,
    seq: &[usize],
    min_repeat: usize,
) -> Option<(usize, usize)> {
    let mut counts: HashMap<usize, usize> = HashMap::new();
    for &k in seq {
        *counts.entry(dataset.interaction(k).item).or_default() += 1;
    }
    let mut seen = HashSet::new();
    let firsts: Vec<usize> = seq
        .iter()
        .enumerate()
        .filter(|(_, &k)| {
            let item = dataset.interaction(k).item;
            seen.insert(item) && counts[&item] >= min_repeat
        })
        .map(|(pos, _)| pos)
        .collect();
    match firsts.as_slice() {
        [.., val, test] => Some((*val, *test)),
        _ => None,
    }
}

/// Which interactions a history window may draw from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HistoryScope {
    /// Only the user's training interactions.
    Training,
    /// Every interaction of the user.
    All,
}

/// The `l` latest visible interactions of `u` strictly before `t`, most
/// recent first.
pub fn recent_history(
    dataset: &Dataset,
    split: &Split,
    u: usize,
    t: Timestamp,
    l: usize,
    scope: HistoryScope,
) -> Vec<HistoryEntry> {
    let seq = match scope {
        HistoryScope::Training => &split.user(u).train,
        HistoryScope::All => dataset.sequence(u),
    };
    let end = seq.partition_point(|&k| dataset.interaction(k).timestamp < t);
    seq[..end]
        .iter()
        .rev()
        .take(l)
        .map(|&k| {
            let x = dataset.interaction(k);
            HistoryEntry {
                item: x.item,
                timestamp: x.timestamp,
            }
        })
        .collect()
}

/// Uniform item the user never consumed.
pub fn sample_negative_item<R: Rng + ?Sized>(
    dataset: &Dataset,
    u: usize,
    rng: &mut R,
) -> Result<usize> {
    let n = dataset.num_items();
    let consumed = dataset.consumed(u);
    if consumed.len() >= n {
        return Err(Error::Sampling(format!(
            "user '{}' has consumed every item",
            dataset.users().external(u)
        )));
    }
    // Rejection is uniform over the complement; fall back to an explicit
    // complement when it is tiny.
    if consumed.len() * 2 <= n {
        loop {
            let i = rng.gen_range(0..n);
            if consumed.binary_search(&i).is_err() {
                return Ok(i);
            }
        }
    }
    let complement: Vec<usize> = (0..n).filter(|i| consumed.binary_search(i).is_err()).collect();
    Ok(complement[rng.gen_range(0..complement.len())])
}

/// Minimum gap between a negative timestamp and the times it must avoid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Separation {
    Hour,
    /// For datasets without hour resolution.
    Day,
}

impl Separation {
    pub fn seconds(self) -> i64 {
        match self {
            Separation::Hour => SECONDS_PER_HOUR,
            Separation::Day => SECONDS_PER_DAY,
        }
    }
}

impl std::str::FromStr for Separation {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "hour" => Ok(Separation::Hour),
            "day" => Ok(Separation::Day),
            other => Err(Error::Input(format!("unknown separation '{other}'"))),
        }
    }
}

fn too_close(t: Timestamp, others: &[Timestamp], gap: i64) -> bool {
    others.iter().any(|&o| (t - o).abs() < gap)
}

/// Evaluation negative time for `(u, i)` against a positive at `t_pos`:
/// uniform over the 180 days before `t_pos`, at least `separation` away from
/// every time `u` interacted with `i`, from `t_pos` and from `accepted`.
pub fn sample_eval_timestamp<R: Rng + ?Sized>(
    dataset: &Dataset,
    u: usize,
    i: usize,
    t_pos: Timestamp,
    accepted: &[Timestamp],
    separation: Separation,
    rng: &mut R,
) -> Result<Timestamp> {
    let gap = separation.seconds();
    let lo = (t_pos - EVAL_WINDOW_SECS).max(0);
    if lo >= t_pos {
        return Err(infeasible(dataset, u, i));
    }
    let known = if i < dataset.num_items() {
        dataset.pair_times(u, i)
    } else {
        &[]
    };
    for _ in 0..MAX_REJECTIONS {
        let t = rng.gen_range(lo..t_pos);
        if (t_pos - t) < gap || too_close(t, known, gap) || too_close(t, accepted, gap) {
            continue;
        }
        return Ok(t);
    }
    Err(infeasible(dataset, u, i))
}

/// Training negative time: uniform over `[first, last]` of the user's
/// training interactions, at least `separation` from every training-visible
/// interaction of `u` with `i`.
pub fn sample_train_timestamp<R: Rng + ?Sized>(
    dataset: &Dataset,
    split: &Split,
    u: usize,
    i: usize,
    separation: Separation,
    rng: &mut R,
) -> Result<Timestamp> {
    let train = &split.user(u).train;
    let (first, last) = match (train.first(), train.last()) {
        (Some(&a), Some(&b)) => (dataset.interaction(a).timestamp, dataset.interaction(b).timestamp),
        _ => return Err(infeasible(dataset, u, i)),
    };
    let gap = separation.seconds();
    let positives: Vec<Timestamp> = train
        .iter()
        .map(|&k| dataset.interaction(k))
        .filter(|x| x.item == i)
        .map(|x| x.timestamp)
        .collect();
    for _ in 0..MAX_REJECTIONS {
        let t = rng.gen_range(first..=last);
        if !too_close(t, &positives, gap) {
            return Ok(t);
        }
    }
    Err(infeasible(dataset, u, i))
}

fn infeasible(dataset: &Dataset, u: usize, i: usize) -> Error {
    let item = if i < dataset.num_items() {
        dataset.items().external(i).to_string()
    } else {
        i.to_string()
    };
    Error::Sampling(format!(
        "no admissible negative timestamp for user '{}', item '{item}' after {MAX_REJECTIONS} rejections",
        dataset.users().external(u)
    ))
}

#[derive(Debug, Clone)]
pub struct EpochExamples {
    pub examples: Vec<Example>,
    /// Training positives dropped because a sampler was infeasible.
    pub skipped: usize,
}

/// One training epoch: every training positive followed by its three fresh
/// negatives `(u, i⁻, t)`, `(u, i, t⁻)`, `(u, i⁻, t⁻)`, each with the
/// history window at its own timestamp.
///
/// Draws for the k-th positive come from a stream keyed by
/// `(seed, epoch, k)`, so the output does not depend on thread scheduling.
pub fn build_training_epoch(
    dataset: &Dataset,
    split: &Split,
    history_len: usize,
    separation: Separation,
    seed: u64,
    epoch: u64,
) -> EpochExamples {
    let positives: Vec<usize> = (0..split.num_users())
        .flat_map(|u| split.user(u).train.iter().copied())
        .collect();
    let groups: Vec<Option<[Example; 4]>> = positives
        .par_iter()
        .enumerate()
        .map(|(idx, &k)| {
            let mut rng = rng::stream(seed, &[rng::TAG_EPOCH, epoch, idx as u64]);
            let pos = dataset.interaction(k);
            match training_group(dataset, split, pos, history_len, separation, &mut rng) {
                Ok(g) => Some(g),
                Err(e) => {
                    log::debug!("skipping training positive {k}: {e}");
                    None
                }
            }
        })
        .collect();
    let skipped = groups.iter().filter(|g| g.is_none()).count();
    EpochExamples {
        examples: groups.into_iter().flatten().flatten().collect(),
        skipped,
    }
}

fn training_group<R: Rng + ?Sized>(
    dataset: &Dataset,
    split: &Split,
    pos: &Interaction,
    history_len: usize,
    separation: Separation,
    rng: &mut R,
) -> Result<[Example; 4]> {
    let (u, i, t) = (pos.user, pos.item, pos.timestamp);
    let neg_item = sample_negative_item(dataset, u, rng)?;
    let neg_time = sample_train_timestamp(dataset, split, u, i, separation, rng)?;
    let both_item = sample_negative_item(dataset, u, rng)?;
    let both_time = sample_train_timestamp(dataset, split, u, both_item, separation, rng)?;
    let hist = |at| recent_history(dataset, split, u, at, history_len, HistoryScope::Training);
    let example = |item, timestamp, label: Label| Example {
        user: u,
        item,
        timestamp,
        label: label.value(),
        history: hist(timestamp),
    };
    Ok([
        example(i, t, Label::Positive),
        example(neg_item, t, Label::Negative),
        example(i, neg_time, Label::Negative),
        example(both_item, both_time, Label::Negative),
    ])
}
