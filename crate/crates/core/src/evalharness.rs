//! Leave-one-out top-K evaluation in the item and item-timing scenarios.

use std::collections::BTreeMap;
use std::fmt;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::calendar::Timestamp;
use crate::data::{
    recent_history, sample_eval_timestamp, sample_negative_item, Dataset, HistoryScope,
    Separation, Split,
};
use crate::error::{Error, Result};
use crate::model::{HistoryEntry, TimelyRec};
use crate::rng;

/// Negatives drawn per negative set.
pub const NEGATIVES_PER_SET: usize = 100;
pub const CUTOFFS: [usize; 3] = [1, 5, 10];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scenario {
    /// Rank the positive among 100 unseen items at the positive's time.
    Item,
    /// Rank the positive among wrong-item, wrong-time and wrong-both negatives.
    ItemTiming,
}

impl Scenario {
    pub fn negatives(self) -> usize {
        match self {
            Scenario::Item => NEGATIVES_PER_SET,
            Scenario::ItemTiming => 3 * NEGATIVES_PER_SET,
        }
    }

    fn tag(self) -> u64 {
        match self {
            Scenario::Item => 1,
            Scenario::ItemTiming => 2,
        }
    }
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Scenario::Item => "item",
            Scenario::ItemTiming => "item-timing",
        })
    }
}

impl std::str::FromStr for Scenario {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "item" => Ok(Scenario::Item),
            "item-timing" => Ok(Scenario::ItemTiming),
            other => Err(Error::Input(format!("unknown scenario '{other}'"))),
        }
    }
}

/// Which held-out interaction of each user is ranked.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Target {
    Validation,
    Test,
}

impl Target {
    /// Validation sees only training interactions; test sees everything
    /// before the candidate time.
    pub fn history_scope(self) -> HistoryScope {
        match self {
            Target::Validation => HistoryScope::Training,
            Target::Test => HistoryScope::All,
        }
    }

    fn tag(self) -> u64 {
        match self {
            Target::Validation => 1,
            Target::Test => 2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Candidate {
    pub item: usize,
    pub timestamp: Timestamp,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RankingCase {
    pub user: usize,
    pub positive: Candidate,
    /// `(u, i⁻, t)` first, then `(u, i, t⁻)` and `(u, i⁻, t⁻)` for item-timing.
    pub negatives: Vec<Candidate>,
}

impl RankingCase {
    fn build<R: rand::Rng + ?Sized>(
        dataset: &Dataset,
        user: usize,
        positive: Candidate,
        scenario: Scenario,
        separation: Separation,
        rng: &mut R,
    ) -> Result<Self> {
        let mut negatives = Vec::with_capacity(scenario.negatives());
        for _ in 0..NEGATIVES_PER_SET {
            negatives.push(Candidate {
                item: sample_negative_item(dataset, user, rng)?,
                timestamp: positive.timestamp,
            });
        }
        if scenario == Scenario::ItemTiming {
            let mut accepted = Vec::with_capacity(NEGATIVES_PER_SET);
            for _ in 0..NEGATIVES_PER_SET {
                let t = sample_eval_timestamp(
                    dataset,
                    user,
                    positive.item,
                    positive.timestamp,
                    &accepted,
                    separation,
                    rng,
                )?;
                accepted.push(t);
            }
            negatives.extend(accepted.iter().map(|&t| Candidate {
                item: positive.item,
                timestamp: t,
            }));
            accepted.clear();
            for _ in 0..NEGATIVES_PER_SET {
                let item = sample_negative_item(dataset, user, rng)?;
                let t = sample_eval_timestamp(
                    dataset,
                    user,
                    item,
                    positive.timestamp,
                    &accepted,
                    separation,
                    rng,
                )?;
                accepted.push(t);
                negatives.push(Candidate { item, timestamp: t });
            }
        }
        let case = Self {
            user,
            positive,
            negatives,
        };
        case.check(dataset, scenario, separation)?;
        Ok(case)
    }

    /// Re-verifies every sampler constraint on the finished case.
    pub fn check(&self, dataset: &Dataset, scenario: Scenario, separation: Separation) -> Result<()> {
        let fail = |what: &str| {
            Err(Error::Sampling(format!(
                "case for user '{}' violates {what}",
                dataset.users().external(self.user)
            )))
        };
        if self.negatives.len() != scenario.negatives() {
            return fail("the negative count");
        }
        let gap = separation.seconds();
        let t_pos = self.positive.timestamp;
        for (set, chunk) in self.negatives.chunks(NEGATIVES_PER_SET).enumerate() {
            for c in chunk {
                let wrong_item = set != 1;
                if wrong_item && dataset.has_consumed(self.user, c.item) {
                    return fail("the unseen-item constraint");
                }
                if set == 0 {
                    if c.timestamp != t_pos {
                        return fail("the shared timestamp of item negatives");
                    }
                    continue;
                }
                if c.timestamp >= t_pos || t_pos - c.timestamp > crate::data::EVAL_WINDOW_SECS {
                    return fail("the past window");
                }
                if t_pos - c.timestamp < gap
                    || dataset
                        .pair_times(self.user, c.item)
                        .iter()
                        .any(|&p| (p - c.timestamp).abs() < gap)
                {
                    return fail("the timestamp separation");
                }
            }
            if set > 0 {
                let mut ts: Vec<Timestamp> = chunk.iter().map(|c| c.timestamp).collect();
                ts.sort_unstable();
                if ts.windows(2).any(|w| w[1] - w[0] < gap) {
                    return fail("pairwise separation within a negative set");
                }
            }
        }
        Ok(())
    }
}

/// Ranking cases for one (seed, scenario, target), built once and reused so
/// that every model is compared on identical candidates.
#[derive(Debug, Clone, PartialEq)]
pub struct CaseSet {
    pub scenario: Scenario,
    pub target: Target,
    pub seed: u64,
    pub separation: Separation,
    pub cases: Vec<RankingCase>,
}

impl CaseSet {
    pub fn build(
        dataset: &Dataset,
        split: &Split,
        scenario: Scenario,
        target: Target,
        separation: Separation,
        seed: u64,
    ) -> Result<Self> {
        let users: Vec<usize> = split.eval_users().collect();
        let cases = users
            .par_iter()
            .map(|&u| {
                let us = split.user(u);
                let k = match target {
                    Target::Validation => us.validation,
                    Target::Test => us.test,
                }
                .expect("eval users have both held-out interactions");
                let x = dataset.interaction(k);
                let mut rng = rng::stream(
                    seed,
                    &[rng::TAG_EVAL, scenario.tag(), target.tag(), u as u64],
                );
                RankingCase::build(
                    dataset,
                    u,
                    Candidate {
                        item: x.item,
                        timestamp: x.timestamp,
                    },
                    scenario,
                    separation,
                    &mut rng,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            scenario,
            target,
            seed,
            separation,
            cases,
        })
    }

    pub fn len(&self) -> usize {
        self.cases.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cases.is_empty()
    }
}

/// Anything that can score items for a user at a time given a history window.
pub trait Scorer: Sync {
    fn history_len(&self) -> usize;

    fn score_items(
        &self,
        user: usize,
        items: &[usize],
        t: Timestamp,
        history: &[HistoryEntry],
    ) -> Result<Vec<f64>>;
}

/// Ranks by logit, which orders candidates exactly as the probability does
/// wherever the sigmoid is not saturated.
impl Scorer for TimelyRec {
    fn history_len(&self) -> usize {
        self.config().history_len
    }

    fn score_items(
        &self,
        user: usize,
        items: &[usize],
        t: Timestamp,
        history: &[HistoryEntry],
    ) -> Result<Vec<f64>> {
        self.logit_items(user, items, t, history)
    }
}

/// Pessimistic rank: negatives scoring at least as high as the positive
/// count against it.
pub fn rank_positive(score_pos: f64, scores_neg: &[f64]) -> Result<usize> {
    if score_pos.is_nan() || scores_neg.iter().any(|s| s.is_nan()) {
        return Err(Error::Numeric("NaN score in ranking".into()));
    }
    Ok(1 + scores_neg.iter().filter(|&&s| s >= score_pos).count())
}

pub fn hr_at_k(rank: usize, k: usize) -> f64 {
    if rank <= k {
        1.0
    } else {
        0.0
    }
}

pub fn ndcg_at_k(rank: usize, k: usize) -> f64 {
    if rank <= k {
        1.0 / ((rank + 1) as f64).log2()
    } else {
        0.0
    }
}

/// Rank of one case's positive under `scorer`.
pub fn rank_case<S: Scorer + ?Sized>(
    scorer: &S,
    dataset: &Dataset,
    split: &Split,
    target: Target,
    case: &RankingCase,
) -> Result<usize> {
    // Candidates sharing a timestamp share one history window and context.
    let mut groups: BTreeMap<Timestamp, Vec<usize>> = BTreeMap::new();
    groups.entry(case.positive.timestamp).or_default().push(0);
    for (k, c) in case.negatives.iter().enumerate() {
        groups.entry(c.timestamp).or_default().push(k + 1);
    }
    let candidate = |k: usize| {
        if k == 0 {
            case.positive
        } else {
            case.negatives[k - 1]
        }
    };
    let mut scores = vec![0.0; case.negatives.len() + 1];
    for (t, members) in groups {
        let history = recent_history(
            dataset,
            split,
            case.user,
            t,
            scorer.history_len(),
            target.history_scope(),
        );
        let items: Vec<usize> = members.iter().map(|&k| candidate(k).item).collect();
        let s = scorer.score_items(case.user, &items, t, &history)?;
        for (&k, v) in members.iter().zip(s) {
            scores[k] = v;
        }
    }
    rank_positive(scores[0], &scores[1..])
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub scenario: Scenario,
    pub users_evaluated: usize,
    pub seed: u64,
    pub hr: [f64; 3],
    /// NDCG@1 equals HR@1 and is not reported; index 0 is unused.
    pub ndcg: [f64; 3],
    /// Per-case ranks in case order.
    pub ranks: Vec<usize>,
}

impl MetricsReport {
    pub fn from_ranks(scenario: Scenario, seed: u64, ranks: Vec<usize>) -> Self {
        let n = ranks.len().max(1) as f64;
        let mut hr = [0.0; 3];
        let mut ndcg = [0.0; 3];
        for (j, &k) in CUTOFFS.iter().enumerate() {
            hr[j] = ranks.iter().map(|&r| hr_at_k(r, k)).sum::<f64>() / n;
            ndcg[j] = ranks.iter().map(|&r| ndcg_at_k(r, k)).sum::<f64>() / n;
        }
        Self {
            scenario,
            users_evaluated: ranks.len(),
            seed,
            hr,
            ndcg,
            ranks,
        }
    }

    pub fn hr_at(&self, k: usize) -> f64 {
        self.hr[CUTOFFS.iter().position(|&c| c == k).expect("reported cutoff")]
    }

    pub fn ndcg_at(&self, k: usize) -> f64 {
        self.ndcg[CUTOFFS.iter().position(|&c| c == k).expect("reported cutoff")]
    }
}

impl fmt::Display for MetricsReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "scenario={}", self.scenario)?;
        writeln!(f, "users_evaluated={}", self.users_evaluated)?;
        writeln!(f, "seed={}", self.seed)?;
        writeln!(f, "hr@1={:.4}", self.hr[0])?;
        writeln!(f, "hr@5={:.4}", self.hr[1])?;
        writeln!(f, "ndcg@5={:.4}", self.ndcg[1])?;
        writeln!(f, "hr@10={:.4}", self.hr[2])?;
        writeln!(f, "ndcg@10={:.4}", self.ndcg[2])
    }
}

/// Ranks every case in parallel and reduces in case order.
pub fn evaluate<S: Scorer + ?Sized>(
    scorer: &S,
    dataset: &Dataset,
    split: &Split,
    cases: &CaseSet,
) -> Result<MetricsReport> {
    let ranks = cases
        .cases
        .par_iter()
        .map(|c| rank_case(scorer, dataset, split, cases.target, c))
        .collect::<Result<Vec<_>>>()?;
    Ok(MetricsReport::from_ranks(cases.scenario, cases.seed, ranks))
}
