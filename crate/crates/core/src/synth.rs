//! Planted-pattern interaction generator.
//!
//! Each user gets a home cluster of items and, per planted granularity, one
//! or more preferred slots. Every interaction picks a preferred slot
//! uniformly, shifts it by a uniform offset in `[-jitter, jitter]`, and
//! places the event in that slot. Trend events temporarily divert picks to
//! one item with an exponentially decaying probability.

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::calendar::{self, Granularity, Timestamp, SECONDS_PER_DAY, SECONDS_PER_HOUR};
use crate::error::{Error, Result};
use crate::rng;

/// 2020-01-01T00:00:00Z.
pub const DEFAULT_START: Timestamp = 1_577_836_800;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SlotRule {
    /// Draw `count` distinct preferred slots per user.
    Random { count: usize },
    /// Every user prefers the same slot.
    Fixed { slot: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlantedGranularity {
    pub granularity: Granularity,
    pub rule: SlotRule,
    pub jitter: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrendEvent {
    pub item: usize,
    pub onset: Timestamp,
    /// E-folding time of the diversion probability.
    pub decay_secs: i64,
    /// Diversion probability at onset.
    pub peak: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub users: usize,
    pub items: usize,
    pub interactions_per_user: usize,
    /// Items are partitioned into this many clusters; a user draws from one.
    pub clusters: usize,
    pub start: Timestamp,
    pub span_days: i64,
    pub planted: Vec<PlantedGranularity>,
    pub trends: Vec<TrendEvent>,
    pub utc_offset: i64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            users: 200,
            items: 100,
            interactions_per_user: 30,
            clusters: 10,
            start: DEFAULT_START,
            span_days: 365,
            planted: vec![
                PlantedGranularity {
                    granularity: Granularity::Hour,
                    rule: SlotRule::Random { count: 1 },
                    jitter: 1,
                },
                PlantedGranularity {
                    granularity: Granularity::DayOfWeek,
                    rule: SlotRule::Random { count: 1 },
                    jitter: 1,
                },
            ],
            trends: Vec::new(),
            utc_offset: 0,
            seed: 42,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.users == 0 || self.items == 0 || self.interactions_per_user == 0 {
            return Err(Error::Config("users, items and interactions must be positive".into()));
        }
        if self.clusters == 0 || self.clusters > self.items {
            return Err(Error::Config(format!(
                "cluster count {} must be in 1..={}",
                self.clusters, self.items
            )));
        }
        if self.span_days < 7 {
            return Err(Error::Config("span must cover at least one week".into()));
        }
        if self.start + self.utc_offset < 0 {
            return Err(Error::Config("start precedes the epoch".into()));
        }
        for (k, p) in self.planted.iter().enumerate() {
            let g = p.granularity;
            if !matches!(g, Granularity::Hour | Granularity::DayOfWeek) {
                return Err(Error::Config(format!("cannot plant a {g} preference")));
            }
            if self.planted[..k].iter().any(|q| q.granularity == g) {
                return Err(Error::Config(format!("{g} planted twice")));
            }
            if p.jitter > g.max_radius() {
                return Err(Error::Config(format!(
                    "{g} jitter {} exceeds the window bound {}",
                    p.jitter,
                    g.max_radius()
                )));
            }
            match p.rule {
                SlotRule::Random { count: 0 } => {
                    return Err(Error::Config(format!("{g}: zero preferred slots")))
                }
                SlotRule::Random { count } if count > g.slot_count() => {
                    return Err(Error::Config(format!(
                        "{g}: {count} preferred slots but only {} exist",
                        g.slot_count()
                    )))
                }
                SlotRule::Fixed { slot } if slot >= g.slot_count() => {
                    return Err(Error::Config(format!("{g}: slot {slot} out of range")))
                }
                _ => {}
            }
        }
        for t in &self.trends {
            if t.item >= self.items || t.decay_secs <= 0 || !(0.0..=1.0).contains(&t.peak) {
                return Err(Error::Config(format!("invalid trend event {t:?}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserTruth {
    pub user: String,
    pub items: Vec<String>,
    /// Preferred slots per planted granularity.
    pub preferences: Vec<(Granularity, Vec<usize>)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub spec: SyntheticSpec,
    pub users: Vec<UserTruth>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Synthetic {
    /// `(user, item, timestamp)` rows, grouped by user and chronological.
    pub rows: Vec<(String, String, Timestamp)>,
    pub truth: GroundTruth,
}

impl Synthetic {
    pub fn write_tsv<W: Write>(&self, w: &mut W) -> Result<()> {
        for (u, i, t) in &self.rows {
            writeln!(w, "{u}\t{i}\t{t}")?;
        }
        Ok(())
    }

    /// Writes the interaction file and its `.truth.json` sidecar.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_tsv(&mut w)?;
        w.flush()?;
        let truth = serde_json::to_string_pretty(&self.truth)
            .map_err(|e| Error::Input(format!("cannot encode ground truth: {e}")))?;
        std::fs::write(truth_path(path), truth)?;
        Ok(())
    }
}

pub fn truth_path(path: &Path) -> std::path::PathBuf {
    let mut name = path.as_os_str().to_owned();
    name.push(".truth.json");
    name.into()
}

fn item_name(i: usize) -> String {
    format!("i{i}")
}

pub fn generate(spec: &SyntheticSpec) -> Result<Synthetic> {
    spec.validate()?;
    let day0 = (spec.start + spec.utc_offset).div_euclid(SECONDS_PER_DAY);
    let dow0 = calendar::decompose(day0 * SECONDS_PER_DAY, 0)?.day_of_week;
    let mut rows = Vec::with_capacity(spec.users * spec.interactions_per_user);
    let mut users = Vec::with_capacity(spec.users);
    for u in 0..spec.users {
        let mut rng = rng::stream(spec.seed, &[rng::TAG_SYNTH, u as u64]);
        let cluster = rng.gen_range(0..spec.clusters);
        let home: Vec<usize> = (0..spec.items).filter(|i| i % spec.clusters == cluster).collect();
        let preferences: Vec<(Granularity, Vec<usize>)> = spec
            .planted
            .iter()
            .map(|p| {
                let mut slots = match p.rule {
                    SlotRule::Fixed { slot } => vec![slot],
                    SlotRule::Random { count } => {
                        rand::seq::index::sample(&mut rng, p.granularity.slot_count(), count).into_vec()
                    }
                };
                slots.sort_unstable();
                (p.granularity, slots)
            })
            .collect();
        let pick = |g: Granularity, rng: &mut rand_chacha::ChaCha8Rng| -> Option<usize> {
            let k = spec.planted.iter().position(|p| p.granularity == g)?;
            let base = *preferences[k].1.choose(rng).expect("validated non-empty");
            let j = spec.planted[k].jitter as i64;
            Some(calendar::shift_slot(base, rng.gen_range(-j..=j), g))
        };
        let mut user_rows: Vec<Timestamp> = Vec::with_capacity(spec.interactions_per_user);
        let mut user_items = Vec::with_capacity(spec.interactions_per_user);
        for _ in 0..spec.interactions_per_user {
            let day = match pick(Granularity::DayOfWeek, &mut rng) {
                Some(dow) => {
                    let first = (dow as i64 - dow0 as i64).rem_euclid(7);
                    let weeks = (spec.span_days - first + 6) / 7;
                    day0 + first + 7 * rng.gen_range(0..weeks)
                }
                None => day0 + rng.gen_range(0..spec.span_days),
            };
            let hour = match pick(Granularity::Hour, &mut rng) {
                Some(h) => h as i64,
                None => rng.gen_range(0..24),
            };
            let t = day * SECONDS_PER_DAY + hour * SECONDS_PER_HOUR
                + rng.gen_range(0..SECONDS_PER_HOUR)
                - spec.utc_offset;
            let mut item = *home.choose(&mut rng).expect("cluster non-empty");
            for trend in &spec.trends {
                if t >= trend.onset {
                    let p = trend.peak * (-((t - trend.onset) as f64) / trend.decay_secs as f64).exp();
                    if rng.gen_bool(p) {
                        item = trend.item;
                    }
                }
            }
            user_rows.push(t);
            user_items.push(item);
        }
        let mut order: Vec<usize> = (0..user_rows.len()).collect();
        order.sort_by_key(|&k| user_rows[k]);
        let name = format!("u{u}");
        for k in order {
            rows.push((name.clone(), item_name(user_items[k]), user_rows[k]));
        }
        users.push(UserTruth {
            user: name,
            items: home.iter().map(|&i| item_name(i)).collect(),
            preferences,
        });
    }
    Ok(Synthetic {
        rows,
        truth: GroundTruth {
            spec: spec.clone(),
            users,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use statrs::distribution::{ChiSquared, ContinuousCDF};

    fn hour_only(rule: SlotRule, jitter: usize) -> SyntheticSpec {
        SyntheticSpec {
            planted: vec![PlantedGranularity {
                granularity: Granularity::Hour,
                rule,
                jitter,
            }],
            ..SyntheticSpec::default()
        }
    }

    fn slots(s: &Synthetic, g: Granularity) -> Vec<usize> {
        s.rows
            .iter()
            .map(|r| calendar::decompose(r.2, 0).unwrap().slot(g))
            .collect()
    }

    #[test]
    fn zero_jitter_pins_the_hour() {
        let s = generate(&hour_only(SlotRule::Fixed { slot: 8 }, 0)).unwrap();
        assert!(slots(&s, Granularity::Hour).iter().all(|&h| h == 8));
    }

    #[test]
    fn unit_jitter_stays_adjacent() {
        let s = generate(&hour_only(SlotRule::Fixed { slot: 8 }, 1)).unwrap();
        let hs = slots(&s, Granularity::Hour);
        assert!(hs.iter().all(|h| [7, 8, 9].contains(h)));
        for h in [7, 8, 9] {
            assert!(hs.contains(&h));
        }
    }

    #[test]
    fn hour_distribution_matches_plant() {
        let spec = SyntheticSpec {
            users: 100,
            interactions_per_user: 100,
            ..hour_only(SlotRule::Fixed { slot: 23 }, 2)
        };
        let hs = slots(&generate(&spec).unwrap(), Granularity::Hour);
        assert_eq!(hs.len(), 10_000);
        let expected = hs.len() as f64 / 5.0;
        let stat: f64 = [21, 22, 23, 0, 1]
            .iter()
            .map(|&h| {
                let o = hs.iter().filter(|&&x| x == h).count() as f64;
                (o - expected).powi(2) / expected
            })
            .sum();
        assert_eq!(hs.iter().filter(|h| ![21, 22, 23, 0, 1].contains(h)).count(), 0);
        let p = 1.0 - ChiSquared::new(4.0).unwrap().cdf(stat);
        assert!(p > 0.01, "chi2 {stat}, p {p}");
    }

    #[test]
    fn planted_day_of_week_and_truth_agree() {
        let s = generate(&SyntheticSpec::default()).unwrap();
        for (u, truth) in s.truth.users.iter().enumerate() {
            let (_, dows) = &truth.preferences[1];
            let (_, hours) = &truth.preferences[0];
            for (_, item, t) in s.rows.iter().filter(|r| r.0 == format!("u{u}")) {
                let f = calendar::decompose(*t, 0).unwrap();
                let near = |x: usize, set: &[usize], g| {
                    set.iter().any(|&p| (-1..=1).any(|d| calendar::shift_slot(p, d, g) == x))
                };
                assert!(near(f.day_of_week, dows, Granularity::DayOfWeek));
                assert!(near(f.hour, hours, Granularity::Hour));
                assert!(truth.items.contains(item));
                assert!(*t >= DEFAULT_START && *t < DEFAULT_START + 365 * SECONDS_PER_DAY);
            }
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate(&SyntheticSpec::default()).unwrap();
        let b = generate(&SyntheticSpec::default()).unwrap();
        let c = generate(&SyntheticSpec { seed: 1, ..SyntheticSpec::default() }).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.rows, c.rows);
    }

    #[test]
    fn trends_divert_items() {
        let onset = DEFAULT_START + 100 * SECONDS_PER_DAY;
        let spec = SyntheticSpec {
            trends: vec![TrendEvent { item: 1, onset, decay_secs: 30 * SECONDS_PER_DAY, peak: 1.0 }],
            clusters: 2,
            ..SyntheticSpec::default()
        };
        let s = generate(&spec).unwrap();
        let trend_share = |lo: i64, hi: i64| {
            let window: Vec<_> = s.rows.iter().filter(|r| r.2 >= lo && r.2 < hi).collect();
            window.iter().filter(|r| r.1 == "i1").count() as f64 / window.len() as f64
        };
        let before = trend_share(DEFAULT_START, onset);
        let just_after = trend_share(onset, onset + 5 * SECONDS_PER_DAY);
        assert!(just_after > 0.8 && before < 0.2, "{before} {just_after}");
    }

    #[test]
    fn infeasible_specs_rejected() {
        assert!(generate(&hour_only(SlotRule::Random { count: 0 }, 0)).is_err());
        assert!(generate(&hour_only(SlotRule::Fixed { slot: 24 }, 0)).is_err());
        assert!(generate(&hour_only(SlotRule::Fixed { slot: 3 }, 12)).is_err());
        let month = SyntheticSpec {
            planted: vec![PlantedGranularity {
                granularity: Granularity::Month,
                rule: SlotRule::Fixed { slot: 0 },
                jitter: 0,
            }],
            ..SyntheticSpec::default()
        };
        assert!(generate(&month).is_err());
    }

    #[test]
    fn save_writes_sidecar() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("synth.tsv");
        let s = generate(&SyntheticSpec { users: 3, ..SyntheticSpec::default() }).unwrap();
        s.save(&path).unwrap();
        let d = crate::data::Dataset::load(&path).unwrap();
        assert_eq!(d.len(), 90);
        let truth: GroundTruth =
            serde_json::from_str(&std::fs::read_to_string(truth_path(&path)).unwrap()).unwrap();
        assert_eq!(truth, s.truth);
    }
}
