//! The TimelyRec scoring function.
//!
//! A timestamp is encoded per user by the multi-aspect time encoder (slot
//! personalization, gradual attention over cyclic slot windows, sigmoid
//! gating across granularities). Recent interactions are summarized by the
//! time-aware history encoder, which weights each history item by how
//! similar its time encoding is to the target's. An MLP over
//! `[user, item(t), time(t), history(t)]` produces the interaction probability.

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::calendar::{self, CalendarFields, Granularity, GranularityConfig, Timestamp};
use crate::diffcore::{Gradients, ParamId, ParamStore, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Which timestamp the temporal encoding of a history item uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HistoryTime {
    /// Each history item is encoded at its own interaction time.
    #[default]
    Interaction,
    /// History items are encoded at the target time.
    Target,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Ablation {
    #[default]
    None,
    /// The time encoder output is replaced by zeros wherever it is consumed
    /// (prediction input and history similarity).
    NoTimeRepr,
    /// Only the prediction input loses the time encoder output; history
    /// similarity still uses it.
    NoTimeInPrediction,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub num_users: usize,
    pub num_items: usize,
    pub dim: usize,
    pub granularities: GranularityConfig,
    /// Maximum number of recent interactions attended to.
    pub history_len: usize,
    /// Hidden layer widths of the prediction MLP.
    pub hidden: Vec<usize>,
    /// Dropout after each hidden layer while training.
    pub dropout: f64,
    /// Fixed UTC offset (seconds) used for calendar decomposition.
    pub utc_offset: i64,
    pub history_time: HistoryTime,
    pub ablation: Ablation,
    pub alpha_init: f64,
}

impl ModelConfig {
    pub fn new(num_users: usize, num_items: usize) -> Self {
        Self {
            num_users,
            num_items,
            dim: 32,
            granularities: GranularityConfig::default(),
            history_len: 5,
            hidden: vec![64, 64],
            dropout: 0.2,
            utc_offset: 0,
            history_time: HistoryTime::Interaction,
            ablation: Ablation::None,
            alpha_init: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(Error::Config("embedding dimension must be positive".into()));
        }
        if self.num_users == 0 || self.num_items == 0 {
            return Err(Error::Config("user and item vocabularies must be non-empty".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if self.hidden.contains(&0) {
            return Err(Error::Config("hidden layer widths must be positive".into()));
        }
        // Re-run the radius checks in case the config was deserialized.
        GranularityConfig::new(self.granularities.windows().iter().copied())?;
        Ok(())
    }
}

/// One past interaction visible to the history encoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct HistoryEntry {
    pub item: usize,
    pub timestamp: Timestamp,
}

#[derive(Debug, Clone)]
struct Layout {
    user: ParamId,
    item: ParamId,
    /// Per enabled granularity: (granularity, radius, slot table, personalization matrix).
    granularities: Vec<(Granularity, usize, ParamId, ParamId)>,
    gate_query: ParamId,
    alpha: ParamId,
    mlp: Vec<(ParamId, ParamId)>,
}

/// Gradual-attention output for one granularity at one timestamp.
#[derive(Debug, Clone, Copy)]
pub struct GradualOut {
    pub repr: Var,
    pub weights: Var,
    pub slot: usize,
}

/// Time encoder output at one timestamp.
#[derive(Debug, Clone)]
pub struct TimeRepr {
    pub repr: Var,
    pub per_granularity: Vec<GradualOut>,
    pub gates: Vec<Var>,
    pub fields: CalendarFields,
}

/// Per-user projections shared by every time encoding of that user, plus
/// the slot-level results already recorded for them on the tape.
#[derive(Debug, Clone)]
pub struct UserQuery {
    pub user: Var,
    personal: Vec<Var>,
    gate: Var,
    /// First cache index of each enabled granularity.
    slot_base: Vec<usize>,
    personalized: RefCell<Vec<Option<Var>>>,
    gradual: RefCell<Vec<Option<GradualOut>>>,
}

/// Everything about `(u, t, history)` that does not depend on the item.
#[derive(Debug, Clone)]
pub struct Context {
    pub user: Var,
    pub time: TimeRepr,
    /// Encoder output as fed to the prediction head (zeros under ablation).
    pub time_input: Var,
    pub history: Var,
    pub similarities: Vec<f64>,
    pub history_entries: Vec<HistoryEntry>,
    pub history_fields: Vec<CalendarFields>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GranularityAttention {
    pub granularity: Granularity,
    pub slot: usize,
    /// Softmax weights for window radius 0..=r.
    pub weights: Vec<f64>,
    /// Weights divided by the target-slot weight (target reads 1.0).
    pub normalized: Vec<f64>,
    pub gate: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HistoryAttention {
    pub item: usize,
    pub timestamp: Timestamp,
    pub fields: CalendarFields,
    pub similarity: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Explanation {
    pub fields: CalendarFields,
    pub granularities: Vec<GranularityAttention>,
    pub history: Vec<HistoryAttention>,
    pub score: f64,
}

/// A labeled example for the loss.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub user: usize,
    pub item: usize,
    pub timestamp: Timestamp,
    pub label: f64,
    pub history: Vec<HistoryEntry>,
}

pub struct TimelyRec {
    config: ModelConfig,
    params: ParamStore,
    layout: Layout,
    zero_norm_guards: AtomicU64,
}

impl Clone for TimelyRec {
    fn clone(&self) -> Self {
        Self {
            config: self.config.clone(),
            params: self.params.clone(),
            layout: self.layout.clone(),
            zero_norm_guards: AtomicU64::new(self.zero_norm_guards.load(Ordering::Relaxed)),
        }
    }
}

impl std::fmt::Debug for TimelyRec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("TimelyRec")
            .field("config", &self.config)
            .field("parameters", &self.params.scalar_count())
            .finish()
    }
}

const CHECKPOINT_MAGIC: &[u8; 4] = b"TLRC";

impl TimelyRec {
    /// Fresh model: embeddings and matrices uniform in `±1/sqrt(fan_in)`,
    /// biases zero, `alpha = alpha_init`.
    pub fn new<R: Rng + ?Sized>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let d = config.dim;
        let bound = 1.0 / (d as f64).sqrt();
        let mut params = ParamStore::new();
        params.insert("user_emb", Tensor::uniform(&[config.num_users, d], bound, rng))?;
        params.insert("item_emb", Tensor::uniform(&[config.num_items, d], bound, rng))?;
        for g in config.granularities.enabled() {
            params.insert(
                format!("slot_emb.{g}"),
                Tensor::uniform(&[g.slot_count(), d], bound, rng),
            )?;
            params.insert(format!("personalize.{g}"), Tensor::uniform(&[d, d], bound, rng))?;
        }
        params.insert("gate_query", Tensor::uniform(&[d, d], bound, rng))?;
        params.insert("alpha", Tensor::scalar(config.alpha_init))?;
        let mut fan_in = 4 * d;
        for (k, &width) in config.hidden.iter().chain(std::iter::once(&1)).enumerate() {
            let b = 1.0 / (fan_in as f64).sqrt();
            params.insert(format!("mlp.{k}.weight"), Tensor::uniform(&[width, fan_in], b, rng))?;
            params.insert(format!("mlp.{k}.bias"), Tensor::zeros(&[width]))?;
            fan_in = width;
        }
        Self::from_parts(config, params)
    }

    /// Binds a parameter store to a config, checking every tensor's shape.
    pub fn from_parts(config: ModelConfig, params: ParamStore) -> Result<Self> {
        config.validate()?;
        let d = config.dim;
        let expect = |name: &str, shape: &[usize]| -> Result<ParamId> {
            let id = params.require(name)?;
            if params.get(id).shape() != shape {
                return Err(Error::Contract(format!(
                    "parameter '{name}' has shape {:?}, expected {shape:?}",
                    params.get(id).shape()
                )));
            }
            Ok(id)
        };
        let user = expect("user_emb", &[config.num_users, d])?;
        let item = expect("item_emb", &[config.num_items, d])?;
        let mut granularities = Vec::new();
        for &(g, r) in config.granularities.windows() {
            let slot = expect(&format!("slot_emb.{g}"), &[g.slot_count(), d])?;
            let personal = expect(&format!("personalize.{g}"), &[d, d])?;
            granularities.push((g, r, slot, personal));
        }
        let gate_query = expect("gate_query", &[d, d])?;
        let alpha = expect("alpha", &[1])?;
        let mut mlp = Vec::new();
        let mut fan_in = 4 * d;
        for (k, &width) in config.hidden.iter().chain(std::iter::once(&1)).enumerate() {
            let w = expect(&format!("mlp.{k}.weight"), &[width, fan_in])?;
            let b = expect(&format!("mlp.{k}.bias"), &[width])?;
            mlp.push((w, b));
            fan_in = width;
        }
        if params.len() != 4 + 2 * granularities.len() + 2 * mlp.len() {
            return Err(Error::Contract("parameter store has unexpected extra tensors".into()));
        }
        Ok(Self {
            config,
            params,
            layout: Layout {
                user,
                item,
                granularities,
                gate_query,
                alpha,
                mlp,
            },
            zero_norm_guards: AtomicU64::new(0),
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn set_params(&mut self, params: ParamStore) -> Result<()> {
        let rebuilt = Self::from_parts(self.config.clone(), params)?;
        self.params = rebuilt.params;
        Ok(())
    }

    pub fn param_id(&self, name: &str) -> Result<ParamId> {
        self.params.require(name)
    }

    /// Number of times a zero-norm vector forced the neutral similarity 0.5.
    pub fn zero_norm_guards(&self) -> u64 {
        self.zero_norm_guards.load(Ordering::Relaxed)
    }

    pub fn alpha(&self) -> f64 {
        self.params.get(self.layout.alpha).data()[0]
    }

    fn check_user(&self, u: usize) -> Result<()> {
        if u >= self.config.num_users {
            return Err(Error::Contract(format!(
                "user {u} outside table of {} users",
                self.config.num_users
            )));
        }
        Ok(())
    }

    fn check_item(&self, i: usize) -> Result<()> {
        if i >= self.config.num_items {
            return Err(Error::Contract(format!(
                "item {i} outside table of {} items",
                self.config.num_items
            )));
        }
        Ok(())
    }

    fn granularity_index(&self, g: Granularity) -> Result<usize> {
        self.layout
            .granularities
            .iter()
            .position(|&(h, ..)| h == g)
            .ok_or_else(|| Error::Contract(format!("granularity {g} is not enabled")))
    }

    pub fn user_query(&self, tape: &mut Tape<'_>, u: usize) -> Result<UserQuery> {
        self.check_user(u)?;
        let user = tape.row(self.layout.user, u)?;
        let personal = self
            .layout
            .granularities
            .iter()
            .map(|&(.., w)| tape.matvec(w, user))
            .collect::<Result<Vec<_>>>()?;
        let gate = tape.matvec(self.layout.gate_query, user)?;
        let mut slot_base = Vec::with_capacity(self.layout.granularities.len());
        let mut total = 0;
        for &(g, ..) in &self.layout.granularities {
            slot_base.push(total);
            total += g.slot_count();
        }
        Ok(UserQuery {
            user,
            personal,
            gate,
            slot_base,
            personalized: RefCell::new(vec![None; total]),
            gradual: RefCell::new(vec![None; total]),
        })
    }

    /// `(W_g U_u) ∘ E_g(slot)`.
    pub fn personalize(
        &self,
        tape: &mut Tape<'_>,
        query: &UserQuery,
        g: Granularity,
        slot: usize,
    ) -> Result<Var> {
        let gi = self.granularity_index(g)?;
        if slot >= g.slot_count() {
            return Err(Error::Contract(format!("slot {slot} out of range for {g}")));
        }
        let key = query.slot_base[gi] + slot;
        if let Some(v) = query.personalized.borrow()[key] {
            return Ok(v);
        }
        let (_, _, table, _) = self.layout.granularities[gi];
        let e = tape.row(table, slot)?;
        let v = tape.hadamard(query.personal[gi], e)?;
        query.personalized.borrow_mut()[key] = Some(v);
        Ok(v)
    }

    /// Attention over the target slot and progressively wider cyclic windows
    /// around it, each window summarized by its mean personalized embedding.
    pub fn gradual_attention(
        &self,
        tape: &mut Tape<'_>,
        query: &UserQuery,
        g: Granularity,
        slot: usize,
    ) -> Result<GradualOut> {
        let gi = self.granularity_index(g)?;
        let radius = self.layout.granularities[gi].1;
        let target = self.personalize(tape, query, g, slot)?;
        let key = query.slot_base[gi] + slot;
        if let Some(out) = query.gradual.borrow()[key] {
            return Ok(out);
        }
        let mut windows = vec![target];
        let mut running = target;
        for j in 1..=radius as i64 {
            let left = self.personalize(tape, query, g, calendar::shift_slot(slot, -j, g))?;
            let right = self.personalize(tape, query, g, calendar::shift_slot(slot, j, g))?;
            running = tape.sum(&[running, left, right])?;
            windows.push(tape.scale(running, 1.0 / (2 * j + 1) as f64)?);
        }
        let logits = windows
            .iter()
            .map(|&w| tape.dot(target, w))
            .collect::<Result<Vec<_>>>()?;
        let logits = tape.concat(&logits)?;
        let logits = tape.scale(logits, 1.0 / (self.config.dim as f64).sqrt())?;
        let weights = tape.softmax(logits)?;
        let repr = tape.weighted_sum(weights, &windows)?;
        let out = GradualOut {
            repr,
            weights,
            slot,
        };
        query.gradual.borrow_mut()[key] = Some(out);
        Ok(out)
    }

    /// Independent sigmoid gates `b_g = σ(W_q U_u · T_g)`; output `Σ b_g T_g`.
    pub fn combine_granularities(
        &self,
        tape: &mut Tape<'_>,
        query: &UserQuery,
        reprs: &[Var],
    ) -> Result<(Var, Vec<Var>)> {
        if reprs.is_empty() {
            return Err(Error::Contract("no granularity representations to combine".into()));
        }
        let mut gated = Vec::with_capacity(reprs.len());
        let mut gates = Vec::with_capacity(reprs.len());
        for &r in reprs {
            let logit = tape.dot(query.gate, r)?;
            let b = tape.sigmoid(logit)?;
            gated.push(tape.scale_by(r, b)?);
            gates.push(b);
        }
        Ok((tape.sum(&gated)?, gates))
    }

    pub fn encode_time(
        &self,
        tape: &mut Tape<'_>,
        query: &UserQuery,
        t: Timestamp,
    ) -> Result<TimeRepr> {
        let fields = calendar::decompose(t, self.config.utc_offset)?;
        let mut per_granularity = Vec::with_capacity(self.layout.granularities.len());
        for &(g, ..) in &self.layout.granularities {
            per_granularity.push(self.gradual_attention(tape, query, g, fields.slot(g))?);
        }
        let reprs: Vec<Var> = per_granularity.iter().map(|o| o.repr).collect();
        let (repr, gates) = self.combine_granularities(tape, query, &reprs)?;
        Ok(TimeRepr {
            repr,
            per_granularity,
            gates,
            fields,
        })
    }

    /// `I_i + α TE(t)`.
    pub fn item_at_time(&self, tape: &mut Tape<'_>, item: usize, t: Timestamp) -> Result<Var> {
        self.check_item(item)?;
        let emb = tape.row(self.layout.item, item)?;
        let te = tape.input(calendar::temporal_encoding(t, self.config.dim))?;
        let alpha = tape.param(self.layout.alpha)?;
        let weighted = tape.scale_by(te, alpha)?;
        tape.add(emb, weighted)
    }

    /// Sums history item representations weighted by `(cos + 1) / 2` between
    /// each history time encoding and the target's. Zero-norm inputs get the
    /// neutral weight 0.5.
    pub fn time_based_attention(
        &self,
        tape: &mut Tape<'_>,
        target: Var,
        entries: &[(Var, Var)],
    ) -> Result<(Var, Vec<f64>)> {
        if entries.is_empty() {
            let zero = tape.input(vec![0.0; self.config.dim])?;
            return Ok((zero, Vec::new()));
        }
        let mut weighted = Vec::with_capacity(entries.len());
        let mut scores = Vec::with_capacity(entries.len());
        for &(time, item) in entries {
            let zero_norm = tape.value(target).iter().all(|&x| x == 0.0)
                || tape.value(time).iter().all(|&x| x == 0.0);
            let c = if zero_norm {
                self.zero_norm_guards.fetch_add(1, Ordering::Relaxed);
                tape.input(vec![0.5])?
            } else {
                let cos = tape.cosine(target, time)?;
                tape.affine(cos, 0.5, 0.5)?
            };
            scores.push(tape.scalar(c));
            weighted.push(tape.scale_by(item, c)?);
        }
        Ok((tape.sum(&weighted)?, scores))
    }

    /// Encodes the target time and history of `u` at `t`. History entries
    /// beyond the configured length are ignored.
    pub fn encode_context(
        &self,
        tape: &mut Tape<'_>,
        u: usize,
        t: Timestamp,
        history: &[HistoryEntry],
    ) -> Result<Context> {
        let query = self.user_query(tape, u)?;
        let time = self.encode_time(tape, &query, t)?;
        let zeros = match self.config.ablation {
            Ablation::None => None,
            _ => Some(tape.input(vec![0.0; self.config.dim])?),
        };
        let similarity_target = match self.config.ablation {
            Ablation::NoTimeRepr => zeros.unwrap_or(time.repr),
            _ => time.repr,
        };
        let time_input = zeros.unwrap_or(time.repr);

        let entries: Vec<HistoryEntry> = history
            .iter()
            .take(self.config.history_len)
            .copied()
            .collect();
        let mut pairs = Vec::with_capacity(entries.len());
        let mut history_fields = Vec::with_capacity(entries.len());
        for e in &entries {
            if e.timestamp >= t {
                return Err(Error::Contract(format!(
                    "history entry at {} does not precede target time {t}",
                    e.timestamp
                )));
            }
            let enc = self.encode_time(tape, &query, e.timestamp)?;
            history_fields.push(enc.fields);
            let hist_time = match self.config.ablation {
                Ablation::NoTimeRepr => zeros.unwrap_or(enc.repr),
                _ => enc.repr,
            };
            let item_time = match self.config.history_time {
                HistoryTime::Interaction => e.timestamp,
                HistoryTime::Target => t,
            };
            let item = self.item_at_time(tape, e.item, item_time)?;
            pairs.push((hist_time, item));
        }
        let (history_repr, similarities) =
            self.time_based_attention(tape, similarity_target, &pairs)?;
        Ok(Context {
            user: query.user,
            time,
            time_input,
            history: history_repr,
            similarities,
            history_entries: entries,
            history_fields,
        })
    }

    /// Prediction head on a prepared context; returns the probability node.
    pub fn score_item<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape<'_>,
        ctx: &Context,
        item: usize,
        t: Timestamp,
        training: bool,
        rng: &mut R,
    ) -> Result<Var> {
        let logit = self.logit_item(tape, ctx, item, t, training, rng)?;
        tape.sigmoid(logit)
    }

    /// The prediction head before the output sigmoid.
    pub fn logit_item<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape<'_>,
        ctx: &Context,
        item: usize,
        t: Timestamp,
        training: bool,
        rng: &mut R,
    ) -> Result<Var> {
        let item_repr = self.item_at_time(tape, item, t)?;
        let mut x = tape.concat(&[ctx.user, item_repr, ctx.time_input, ctx.history])?;
        let last = self.layout.mlp.len() - 1;
        for (k, &(w, b)) in self.layout.mlp.iter().enumerate() {
            let z = tape.matvec(w, x)?;
            let bias = tape.param(b)?;
            x = tape.add(z, bias)?;
            if k < last {
                x = tape.relu(x)?;
                x = tape.dropout(x, self.config.dropout, training, rng)?;
            }
        }
        Ok(x)
    }

    /// Inference-mode probability that `u` interacts with `i` at `t`.
    pub fn score(&self, u: usize, i: usize, t: Timestamp, history: &[HistoryEntry]) -> Result<f64> {
        let mut tape = Tape::new(&self.params);
        let ctx = self.encode_context(&mut tape, u, t, history)?;
        let p = self.score_item(&mut tape, &ctx, i, t, false, &mut NoRng)?;
        Ok(tape.scalar(p))
    }

    /// Inference-mode scores of several items sharing `(u, t, history)`.
    pub fn score_items(
        &self,
        u: usize,
        items: &[usize],
        t: Timestamp,
        history: &[HistoryEntry],
    ) -> Result<Vec<f64>> {
        let mut tape = Tape::new(&self.params);
        let ctx = self.encode_context(&mut tape, u, t, history)?;
        items
            .iter()
            .map(|&i| {
                let p = self.score_item(&mut tape, &ctx, i, t, false, &mut NoRng)?;
                Ok(tape.scalar(p))
            })
            .collect()
    }

    /// Inference-mode logits of several items sharing `(u, t, history)`.
    /// Same order as [`TimelyRec::score_items`] but free of sigmoid
    /// saturation, so confident models do not produce spurious ties.
    pub fn logit_items(
        &self,
        u: usize,
        items: &[usize],
        t: Timestamp,
        history: &[HistoryEntry],
    ) -> Result<Vec<f64>> {
        let mut tape = Tape::new(&self.params);
        let ctx = self.encode_context(&mut tape, u, t, history)?;
        items
            .iter()
            .map(|&i| {
                let z = self.logit_item(&mut tape, &ctx, i, t, false, &mut NoRng)?;
                Ok(tape.scalar(z))
            })
            .collect()
    }

    /// Score plus every attention weight behind it.
    pub fn predict(
        &self,
        u: usize,
        i: usize,
        t: Timestamp,
        history: &[HistoryEntry],
    ) -> Result<(f64, Explanation)> {
        let mut tape = Tape::new(&self.params);
        let ctx = self.encode_context(&mut tape, u, t, history)?;
        let p = self.score_item(&mut tape, &ctx, i, t, false, &mut NoRng)?;
        let score = tape.scalar(p);
        let granularities = self
            .layout
            .granularities
            .iter()
            .zip(&ctx.time.per_granularity)
            .zip(&ctx.time.gates)
            .map(|((&(g, ..), out), &gate)| {
                let weights = tape.value(out.weights).to_vec();
                let normalized = weights.iter().map(|w| w / weights[0]).collect();
                GranularityAttention {
                    granularity: g,
                    slot: out.slot,
                    weights,
                    normalized,
                    gate: tape.scalar(gate),
                }
            })
            .collect();
        let history = ctx
            .history_entries
            .iter()
            .zip(&ctx.history_fields)
            .zip(&ctx.similarities)
            .map(|((e, f), &c)| HistoryAttention {
                item: e.item,
                timestamp: e.timestamp,
                fields: *f,
                similarity: c,
            })
            .collect();
        Ok((
            score,
            Explanation {
                fields: ctx.time.fields,
                granularities,
                history,
                score,
            },
        ))
    }

    /// Records the BCE loss of one example and returns its node.
    pub fn example_loss<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape<'_>,
        example: &Example,
        training: bool,
        rng: &mut R,
    ) -> Result<Var> {
        if example.label != 0.0 && example.label != 1.0 {
            return Err(Error::Contract(format!("label {} is not 0 or 1", example.label)));
        }
        let ctx = self.encode_context(tape, example.user, example.timestamp, &example.history)?;
        let p = self.score_item(tape, &ctx, example.item, example.timestamp, training, rng)?;
        tape.bce(p, example.label)
    }

    /// Mean BCE over `examples` in inference mode, evaluated against `params`
    /// (which must share this model's layout).
    pub fn loss_with(&self, params: &ParamStore, examples: &[Example]) -> Result<f64> {
        if examples.is_empty() {
            return Err(Error::Contract("loss of an empty batch".into()));
        }
        let mut total = 0.0;
        for ex in examples {
            let mut tape = Tape::new(params);
            let l = self.example_loss(&mut tape, ex, false, &mut NoRng)?;
            total += tape.scalar(l);
        }
        Ok(total / examples.len() as f64)
    }

    pub fn loss(&self, examples: &[Example]) -> Result<f64> {
        self.loss_with(&self.params, examples)
    }

    /// Mean loss and its gradient over `examples`. `rng` drives dropout when
    /// `training` is set.
    pub fn loss_and_gradients<R: Rng + ?Sized>(
        &self,
        examples: &[Example],
        training: bool,
        rng: &mut R,
    ) -> Result<(f64, Gradients)> {
        if examples.is_empty() {
            return Err(Error::Contract("loss of an empty batch".into()));
        }
        let mut grads = Gradients::zeros_like(&self.params);
        let seed = 1.0 / examples.len() as f64;
        let mut total = 0.0;
        for ex in examples {
            let mut tape = Tape::new(&self.params);
            let l = self.example_loss(&mut tape, ex, training, rng)?;
            total += tape.scalar(l);
            tape.backward(l, seed, &mut grads)?;
        }
        Ok((total / examples.len() as f64, grads))
    }

    /// Summed (not averaged) loss and gradients, each example scaled by `seed`.
    pub(crate) fn accumulate_gradients<R: Rng + ?Sized>(
        &self,
        examples: &[Example],
        seed: f64,
        training: bool,
        rng: &mut R,
        grads: &mut Gradients,
    ) -> Result<f64> {
        let mut total = 0.0;
        for ex in examples {
            let mut tape = Tape::new(&self.params);
            let l = self.example_loss(&mut tape, ex, training, rng)?;
            total += tape.scalar(l);
            tape.backward(l, seed, grads)?;
        }
        Ok(total)
    }

    pub fn write_checkpoint<W: Write>(
        &self,
        w: &mut W,
        metadata: &BTreeMap<String, String>,
    ) -> Result<()> {
        let header = serde_json::to_vec(&CheckpointHeader {
            config: self.config.clone(),
            metadata: metadata.clone(),
        })
        .map_err(|e| Error::Input(format!("cannot encode checkpoint header: {e}")))?;
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&(header.len() as u32).to_le_bytes())?;
        w.write_all(&header)?;
        self.params.write_to(w)
    }

    pub fn read_checkpoint<R: Read>(r: &mut R) -> Result<(Self, BTreeMap<String, String>)> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::Input("not a model checkpoint (bad magic)".into()));
        }
        let mut len = [0u8; 4];
        r.read_exact(&mut len)?;
        let mut header = vec![0u8; u32::from_le_bytes(len) as usize];
        r.read_exact(&mut header)?;
        let header: CheckpointHeader = serde_json::from_slice(&header)
            .map_err(|e| Error::Input(format!("bad checkpoint header: {e}")))?;
        let params = ParamStore::read_from(r)?;
        Ok((Self::from_parts(header.config, params)?, header.metadata))
    }
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    config: ModelConfig,
    metadata: BTreeMap<String, String>,
}

/// Placeholder RNG for inference paths; dropout never draws from it.
pub(crate) struct NoRng;

impl rand::RngCore for NoRng {
    fn next_u32(&mut self) -> u32 {
        unreachable!("inference must not draw random numbers")
    }
    fn next_u64(&mut self) -> u64 {
        unreachable!("inference must not draw random numbers")
    }
    fn fill_bytes(&mut self, _: &mut [u8]) {
        unreachable!("inference must not draw random numbers")
    }
    fn try_fill_bytes(&mut self, _: &mut [u8]) -> std::result::Result<(), rand::Error> {
        unreachable!("inference must not draw random numbers")
    }
}
