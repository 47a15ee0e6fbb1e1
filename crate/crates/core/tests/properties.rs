use std::collections::HashSet;

use chrono::{Datelike, FixedOffset, TimeZone, Timelike};
use proptest::prelude::*;
use rand::Rng;
use timelyrec::calendar::{decompose, shift_slot, temporal_encoding, Granularity};
use timelyrec::data::{
    recent_history, sample_eval_timestamp, sample_negative_item, Dataset, HistoryScope,
    Separation, Split, SplitMode,
};
use timelyrec::diffcore::{grad_check, ops, Gradients, ParamStore, Tape, Tensor};
use timelyrec::evalharness::{
    evaluate, hr_at_k, ndcg_at_k, rank_positive, CaseSet, Scenario, Scorer, Target,
};
use timelyrec::model::HistoryEntry;
use timelyrec::rng;
use timelyrec::trainer::{train, validate, TrainConfig};
use timelyrec::Error;

const DAY: i64 = 86_400;

fn dataset(rows: &[(usize, usize, i64)]) -> Dataset {
    let named: Vec<(String, String, i64)> = rows
        .iter()
        .map(|&(u, i, t)| (format!("u{u}"), format!("i{i}"), t))
        .collect();
    Dataset::from_records(named.iter().map(|(u, i, t)| (u.as_str(), i.as_str(), *t))).unwrap()
}

fn rows_strategy() -> impl Strategy<Value = Vec<(usize, usize, i64)>> {
    // Coarse times so equal timestamps occur.
    prop::collection::vec((0..6usize, 0..12usize, (0..400i64).prop_map(|h| 1_000_000_000 + h * 3_600)), 1..80)
}

proptest! {
    #[test]
    fn softmax_sums_to_one_and_ignores_shifts(
        v in prop::collection::vec(-30.0..30.0f64, 1..20),
        shift in -50.0..50.0f64,
    ) {
        let s = ops::softmax(&v).unwrap();
        prop_assert!((s.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(s.iter().all(|&x| x > 0.0));
        let shifted: Vec<f64> = v.iter().map(|x| x + shift).collect();
        for (a, b) in s.iter().zip(ops::softmax(&shifted).unwrap()) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn primitive_gradients_match_finite_differences(
        w in prop::collection::vec(-1.0..1.0f64, 12),
        x in prop::collection::vec(-1.0..1.0f64, 4),
        b in prop::collection::vec(-1.0..1.0f64, 3),
    ) {
        let mut store = ParamStore::new();
        let wid = store.insert("w", Tensor::from_vec(&[3, 4], w).unwrap()).unwrap();
        let xid = store.insert("x", Tensor::from_vec(&[4], x).unwrap()).unwrap();
        let bid = store.insert("b", Tensor::from_vec(&[3], b).unwrap()).unwrap();
        let build = |tape: &mut Tape<'_>| {
            let x = tape.param(xid)?;
            let b = tape.param(bid)?;
            let h = tape.matvec(wid, x)?;
            let a = tape.add(h, b)?;
            let s = tape.softmax(a)?;
            let r = tape.relu(a)?;
            let g = tape.sigmoid(a)?;
            let m = tape.mean(&[s, g, b])?;
            let ws = tape.weighted_sum(s, &[b, g, h])?;
            let hd = tape.hadamard(ws, m)?;
            let c = tape.cosine(hd, b)?;
            let cat = tape.concat(&[r, hd])?;
            let cat2 = tape.concat(&[g, a])?;
            let d = tape.dot(cat, cat2)?;
            let e = tape.scale_by(c, d)?;
            let f = tape.affine(e, 0.5, 0.5)?;
            let p = tape.sigmoid(f)?;
            tape.bce(p, 1.0)
        };
        // Keep away from the ReLU kink.
        let a: Vec<f64> = {
            let mut tape = Tape::new(&store);
            let x = tape.param(xid).unwrap();
            let b = tape.param(bid).unwrap();
            let h = tape.matvec(wid, x).unwrap();
            let a = tape.add(h, b).unwrap();
            tape.value(a).to_vec()
        };
        prop_assume!(a.iter().all(|v| v.abs() > 1e-3));
        prop_assume!(ops::norm(store.get(bid).data()) > 1e-3);

        let mut tape = Tape::new(&store);
        let out = build(&mut tape).unwrap();
        let mut grads = Gradients::zeros_like(&store);
        tape.backward(out, 1.0, &mut grads).unwrap();
        let report = grad_check(&store, &grads, 1e-6, |p| {
            let mut t = Tape::new(p);
            let o = build(&mut t)?;
            Ok(t.scalar(o))
        })
        .unwrap();
        let gap = (report.analytic - report.numeric).abs();
        prop_assert!(report.max_rel_error < 1e-5 || gap < 1e-9, "{report:?}");
    }

    #[test]
    fn shift_slot_is_invertible(g in prop::sample::select(Granularity::ALL.to_vec()), seed in 0usize..1000, n in -100i64..100) {
        let slot = seed % g.slot_count();
        let moved = shift_slot(slot, n, g);
        prop_assert!(moved < g.slot_count());
        prop_assert_eq!(shift_slot(moved, -n, g), slot);
        prop_assert_eq!(shift_slot(slot, n + g.slot_count() as i64, g), moved);
    }

    #[test]
    fn temporal_encoding_first_entry_is_periodic(t in 0i64..4_000_000_000) {
        let period = (2.0 * std::f64::consts::PI * 3_600.0).round() as i64;
        let a = temporal_encoding(t, 8);
        let b = temporal_encoding(t + period, 8);
        prop_assert!((a[0] - b[0]).abs() < 1e-3);
        prop_assert!(a.iter().all(|x| x.abs() <= 1.0));
    }

    #[test]
    fn rank_matches_sort_oracle(pos in 0..20u8, neg in prop::collection::vec(0..20u8, 0..300)) {
        let neg: Vec<f64> = neg.into_iter().map(f64::from).collect();
        let pos = f64::from(pos);
        let mut order: Vec<(f64, bool)> = neg.iter().map(|&s| (s, false)).collect();
        order.push((pos, true));
        order.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
        let oracle = order.iter().position(|x| x.1).unwrap() + 1;
        prop_assert_eq!(rank_positive(pos, &neg).unwrap(), oracle);
    }

    #[test]
    fn metrics_are_monotone(rank in 1usize..400, k in 1usize..50) {
        prop_assert!(hr_at_k(rank, k) >= hr_at_k(rank + 1, k));
        prop_assert!(ndcg_at_k(rank, k) >= ndcg_at_k(rank + 1, k));
        prop_assert!(hr_at_k(rank, k) <= hr_at_k(rank, k + 1));
        prop_assert!(ndcg_at_k(rank, k) <= ndcg_at_k(rank, k + 1));
        prop_assert!(ndcg_at_k(rank, k) <= hr_at_k(rank, k));
        prop_assert!((0.0..=1.0).contains(&ndcg_at_k(rank, k)));
    }

    #[test]
    fn splits_partition_each_sequence(rows in rows_strategy(), min_repeat in 1usize..4) {
        let d = dataset(&rows);
        for mode in [SplitMode::Standard, SplitMode::RepeatAware { min_repeat }] {
            let split = Split::new(&d, mode);
            for u in 0..d.num_users() {
                let us = split.user(u);
                let seq = d.sequence(u);
                let mut seen = HashSet::new();
                for &k in &us.train {
                    prop_assert!(seen.insert(k));
                    prop_assert!(seq.contains(&k));
                }
                match (us.validation, us.test) {
                    (Some(v), Some(t)) => {
                        prop_assert!(seen.insert(v) && seen.insert(t));
                        let (tv, tt) = (d.interaction(v).timestamp, d.interaction(t).timestamp);
                        prop_assert!(tv <= tt);
                        prop_assert!(us.train.iter().all(|&k| d.interaction(k).timestamp <= tv));
                        if mode == SplitMode::Standard {
                            prop_assert_eq!(seen.len(), seq.len());
                        }
                    }
                    (None, None) => prop_assert_eq!(us.train.len(), seq.len()),
                    _ => prop_assert!(false, "validation without test"),
                }
            }
        }
    }

    #[test]
    fn history_matches_brute_force(rows in rows_strategy(), probe in 0i64..420, l in 0usize..7) {
        let d = dataset(&rows);
        let split = Split::new(&d, SplitMode::Standard);
        let t = 1_000_000_000 + probe * 3_600;
        for u in 0..d.num_users() {
            for scope in [HistoryScope::All, HistoryScope::Training] {
                let allowed: Vec<usize> = match scope {
                    HistoryScope::All => (0..d.len()).collect(),
                    HistoryScope::Training => split.user(u).train.clone(),
                };
                // Input order of the user's earlier interactions, stably
                // sorted by time, newest first.
                let mut earlier: Vec<usize> = (0..d.len())
                    .filter(|&k| {
                        let x = d.interaction(k);
                        x.user == u && x.timestamp < t && allowed.contains(&k)
                    })
                    .collect();
                earlier.sort_by_key(|&k| d.interaction(k).timestamp);
                let want: Vec<HistoryEntry> = earlier
                    .iter()
                    .rev()
                    .take(l)
                    .map(|&k| HistoryEntry {
                        item: d.interaction(k).item,
                        timestamp: d.interaction(k).timestamp,
                    })
                    .collect();
                prop_assert_eq!(recent_history(&d, &split, u, t, l, scope), want);
            }
        }
    }

    #[test]
    fn eval_timestamps_respect_constraints(
        rows in rows_strategy(),
        pick in 0usize..1000,
        accepted in prop::collection::vec(0i64..4_000, 0..30),
        day in any::<bool>(),
        seed in any::<u64>(),
    ) {
        let d = dataset(&rows);
        let x = d.interaction(pick % d.len()).clone();
        let sep = if day { Separation::Day } else { Separation::Hour };
        let accepted: Vec<i64> = accepted.iter().map(|h| x.timestamp - h * 3_600).collect();
        let item = (pick / 7) % d.num_items();
        let mut r = rng::stream(seed, &[]);
        match sample_eval_timestamp(&d, x.user, item, x.timestamp, &accepted, sep, &mut r) {
            Ok(t) => {
                let gap = sep.seconds();
                prop_assert!(x.timestamp - 180 * DAY <= t && t < x.timestamp);
                prop_assert!(x.timestamp - t >= gap);
                prop_assert!(d.pair_times(x.user, item).iter().all(|p| (p - t).abs() >= gap));
                prop_assert!(accepted.iter().all(|a| (a - t).abs() >= gap));
            }
            Err(e) => prop_assert!(matches!(e, Error::Sampling(_)), "{e}"),
        }
        match sample_negative_item(&d, x.user, &mut r) {
            Ok(i) => prop_assert!(!d.has_consumed(x.user, i)),
            Err(e) => prop_assert!(matches!(e, Error::Sampling(_)), "{e}"),
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn decompose_matches_chrono(t in 0i64..4_102_444_800, quarter_hours in -48i64..=56) {
        let offset = quarter_hours * 900;
        let f = decompose(t, offset).unwrap();
        let tz = FixedOffset::east_opt(offset as i32).unwrap();
        let dt = tz.timestamp_opt(t, 0).unwrap();
        prop_assert_eq!(f.month, dt.month0() as usize);
        prop_assert_eq!(f.day_of_week, dt.weekday().num_days_from_monday() as usize);
        prop_assert_eq!(f.date, dt.day0() as usize);
        prop_assert_eq!(f.hour, dt.hour() as usize);
    }
}

#[test]
fn unconstrained_eval_timestamps_are_uniform() {
    let t0 = 1_600_000_000;
    let d = dataset(&[(0, 0, t0), (1, 1, t0)]);
    let mut r = rng::stream(17, &[]);
    let lo = (t0 - 180 * DAY) as f64;
    let hi = (t0 - 3_600) as f64;
    let mut u: Vec<f64> = (0..10_000)
        .map(|_| {
            let t = sample_eval_timestamp(&d, 0, 1, t0, &[], Separation::Hour, &mut r).unwrap();
            (t as f64 - lo) / (hi - lo)
        })
        .collect();
    u.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = u.len() as f64;
    let ks = u
        .iter()
        .enumerate()
        .map(|(j, &x)| (x - j as f64 / n).abs().max(((j + 1) as f64 / n - x).abs()))
        .fold(0.0, f64::max);
    assert!(ks < 0.02, "KS statistic {ks}");
}

#[test]
fn dropout_preserves_the_mean() {
    let store = ParamStore::new();
    let mut r = rng::stream(3, &[]);
    let mut sum = vec![0.0; 8];
    for _ in 0..10_000 {
        let mut tape = Tape::new(&store);
        let v = tape.input(vec![1.0; 8]).unwrap();
        let out = tape.dropout(v, 0.5, true, &mut r).unwrap();
        for (s, x) in sum.iter_mut().zip(tape.value(out)) {
            *s += x;
        }
    }
    for s in sum {
        assert!((s / 10_000.0 - 1.0).abs() < 0.05);
    }
}

/// Scores every candidate with an independent pseudo-random value.
struct RandomScores;

impl Scorer for RandomScores {
    fn history_len(&self) -> usize {
        0
    }

    fn score_items(
        &self,
        user: usize,
        items: &[usize],
        t: i64,
        _history: &[HistoryEntry],
    ) -> timelyrec::Result<Vec<f64>> {
        Ok(items
            .iter()
            .map(|&i| rng::stream(user as u64, &[i as u64, t as u64]).gen::<f64>())
            .collect())
    }
}

#[test]
fn random_scores_hit_chance_levels() {
    let mut r = rng::stream(8, &[]);
    let rows: Vec<(usize, usize, i64)> = (0..5_000)
        .flat_map(|u| (0..6).map(move |k| (u, k)))
        .map(|(u, _)| (u, r.gen_range(0..100), 1_577_836_800 + r.gen_range(0..730 * DAY)))
        .collect();
    let d = dataset(&rows);
    let split = Split::new(&d, SplitMode::Standard);
    for (scenario, chance, tol) in [(Scenario::Item, 10.0 / 101.0, 0.01), (Scenario::ItemTiming, 10.0 / 301.0, 0.008)] {
        let cases = CaseSet::build(&d, &split, scenario, Target::Test, Separation::Hour, 8).unwrap();
        assert!(cases.len() >= 2_000);
        let hr = evaluate(&RandomScores, &d, &split, &cases).unwrap().hr_at(10);
        assert!((hr - chance).abs() <= tol, "{scenario}: {hr} vs {chance}");
    }
}

#[test]
fn checkpoint_round_trip_preserves_scores_and_validation() {
    let mut r = rng::stream(4, &[]);
    let rows: Vec<(usize, usize, i64)> = (0..20)
        .flat_map(|u| (0..8).map(move |k| (u, k)))
        .map(|(u, _)| (u, r.gen_range(0..15), 1_577_836_800 + r.gen_range(0..200 * DAY)))
        .collect();
    let d = dataset(&rows);
    let split = Split::new(&d, SplitMode::Standard);
    let config = TrainConfig {
        dim: 6,
        hidden: vec![5],
        max_epochs: 2,
        learning_rate: 0.01,
        ..TrainConfig::default()
    };
    let model = train(&d, &split, &config, |_| {}).unwrap().best_model();
    let mut buf = Vec::new();
    model.write_checkpoint(&mut buf, &Default::default()).unwrap();
    let (back, _) = timelyrec::model::TimelyRec::read_checkpoint(&mut buf.as_slice()).unwrap();
    let cases = CaseSet::build(&d, &split, Scenario::ItemTiming, Target::Validation, Separation::Hour, 1).unwrap();
    assert_eq!(
        validate(&model, &d, &split, &cases).unwrap().to_bits(),
        validate(&back, &d, &split, &cases).unwrap().to_bits()
    );
    let h = recent_history(&d, &split, 0, 1_600_000_000, 5, HistoryScope::All);
    assert_eq!(
        model.score(0, 1, 1_600_000_000, &h).unwrap().to_bits(),
        back.score(0, 1, 1_600_000_000, &h).unwrap().to_bits()
    );
}
