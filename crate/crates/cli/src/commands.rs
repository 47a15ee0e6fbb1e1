use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use timelyrec::calendar::{Granularity, GranularityConfig};
use timelyrec::data::{recent_history, Dataset, FilterSpec, HistoryScope, Separation, Split, SplitMode};
use timelyrec::evalharness::{evaluate, CaseSet, Scenario, Target};
use timelyrec::model::{Ablation, HistoryTime, TimelyRec};
use timelyrec::synth::{self, PlantedGranularity, SlotRule, SyntheticSpec, TrendEvent};
use timelyrec::trainer::{train, TrainConfig};

use crate::explain;

#[derive(Debug, Parser)]
#[command(name = "timelyrec", version, about = "Time-aware recommendation: ingest, train, evaluate, explain, synthesize")]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Parse and filter an interaction file into a dataset artifact.
    Ingest(IngestArgs),
    /// Train a model and write its best-validation checkpoint.
    Train(TrainArgs),
    /// Rank held-out interactions and print top-K metrics.
    Eval(EvalArgs),
    /// Print every attention weight behind one prediction.
    Explain(ExplainArgs),
    /// Generate a planted-pattern interaction file plus ground truth.
    Synth(SynthArgs),
}

#[derive(Debug, Args)]
struct IngestArgs {
    /// Tab-separated `user<TAB>item<TAB>epoch-seconds` file.
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    output: PathBuf,
    #[arg(long, default_value_t = 0)]
    min_user_interactions: usize,
    #[arg(long, default_value_t = 0)]
    min_item_interactions: usize,
    /// Drop users whose first and last interaction are closer than this [default: no filter].
    #[arg(long)]
    min_history_span_days: Option<u64>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum SplitArg {
    Standard,
    RepeatAware,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum SeparationArg {
    Hour,
    Day,
}

impl From<SeparationArg> for Separation {
    fn from(s: SeparationArg) -> Self {
        match s {
            SeparationArg::Hour => Separation::Hour,
            SeparationArg::Day => Separation::Day,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ScenarioArg {
    Item,
    ItemTiming,
}

impl From<ScenarioArg> for Scenario {
    fn from(s: ScenarioArg) -> Self {
        match s {
            ScenarioArg::Item => Scenario::Item,
            ScenarioArg::ItemTiming => Scenario::ItemTiming,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum TargetArg {
    Validation,
    Test,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum AblationArg {
    None,
    NoTimeRepr,
    NoTimeInPrediction,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum HistoryTimeArg {
    Interaction,
    Target,
}

#[derive(Debug, Args)]
struct SplitFlags {
    #[arg(long, value_enum, default_value_t = SplitArg::Standard)]
    split: SplitArg,
    /// Minimum consumption count of qualifying items under repeat-aware splitting.
    #[arg(long, default_value_t = 3)]
    min_repeat: usize,
    /// Minimum gap between a negative timestamp and the times it must avoid.
    #[arg(long, value_enum, default_value_t = SeparationArg::Hour)]
    separation: SeparationArg,
}

impl SplitFlags {
    fn mode(&self) -> SplitMode {
        match self.split {
            SplitArg::Standard => SplitMode::Standard,
            SplitArg::RepeatAware => SplitMode::RepeatAware {
                min_repeat: self.min_repeat,
            },
        }
    }
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Also append the per-epoch log to this file.
    #[arg(long)]
    log: Option<PathBuf>,
    #[command(flatten)]
    split: SplitFlags,
    #[arg(long, default_value_t = 32)]
    dim: usize,
    #[arg(long, default_value_t = 256)]
    batch_size: usize,
    /// Number of recent interactions attended to.
    #[arg(long, default_value_t = 5)]
    history_len: usize,
    /// Enabled granularities.
    #[arg(long, value_delimiter = ',', default_value = "month,day-of-week,date,hour")]
    granularities: Vec<Granularity>,
    #[arg(long, default_value_t = Granularity::Month.default_radius())]
    radius_month: usize,
    #[arg(long, default_value_t = Granularity::DayOfWeek.default_radius())]
    radius_day_of_week: usize,
    #[arg(long, default_value_t = Granularity::Date.default_radius())]
    radius_date: usize,
    #[arg(long, default_value_t = Granularity::Hour.default_radius())]
    radius_hour: usize,
    #[arg(long, default_value_t = 0.001)]
    learning_rate: f64,
    #[arg(long, default_value_t = 0.2)]
    dropout: f64,
    /// Hidden layer widths of the prediction MLP.
    #[arg(long, value_delimiter = ',', default_value = "64,64")]
    hidden: Vec<usize>,
    #[arg(long, default_value_t = 100)]
    max_epochs: usize,
    /// Epochs without validation HR@10 improvement before stopping.
    #[arg(long, default_value_t = 10)]
    patience: usize,
    /// Scenario whose validation HR@10 selects the checkpoint.
    #[arg(long, value_enum, default_value_t = ScenarioArg::Item)]
    selection: ScenarioArg,
    /// Fixed UTC offset in seconds used for calendar fields.
    #[arg(long, default_value_t = 0, allow_hyphen_values = true)]
    utc_offset: i64,
    #[arg(long, value_enum, default_value_t = HistoryTimeArg::Interaction)]
    history_time: HistoryTimeArg,
    #[arg(long, value_enum, default_value_t = AblationArg::None)]
    ablation: AblationArg,
    #[arg(long, default_value_t = 42)]
    seed: u64,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long, value_enum, default_value_t = ScenarioArg::Item)]
    scenario: ScenarioArg,
    #[arg(long, value_enum, default_value_t = TargetArg::Test)]
    target: TargetArg,
    /// Seed of the negative candidates.
    #[arg(long, default_value_t = 42)]
    seed: u64,
}

#[derive(Debug, Args)]
struct ExplainArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    dataset: PathBuf,
    /// External user id.
    #[arg(long)]
    user: String,
    /// External item id.
    #[arg(long)]
    item: String,
    /// Target time in epoch seconds.
    #[arg(long)]
    time: i64,
}

#[derive(Debug, Args)]
struct SynthArgs {
    #[arg(long)]
    output: PathBuf,
    #[arg(long, default_value_t = 200)]
    users: usize,
    #[arg(long, default_value_t = 100)]
    items: usize,
    #[arg(long, default_value_t = 30)]
    interactions_per_user: usize,
    /// Item clusters; each user draws items from one.
    #[arg(long, default_value_t = 10)]
    clusters: usize,
    /// First possible interaction time (epoch seconds).
    #[arg(long, default_value_t = synth::DEFAULT_START)]
    start: i64,
    #[arg(long, default_value_t = 365)]
    span_days: i64,
    /// Granularities with a planted preference (hour, day-of-week).
    #[arg(long, value_delimiter = ',', default_value = "hour,day-of-week")]
    plant: Vec<Granularity>,
    /// Preferred slots drawn per user and planted granularity.
    #[arg(long, default_value_t = 1)]
    preferred_slots: usize,
    /// Give every user this preferred hour instead of a random one [default: random].
    #[arg(long)]
    hour: Option<usize>,
    /// Give every user this preferred day of week, 0 = Monday [default: random].
    #[arg(long)]
    day_of_week: Option<usize>,
    /// Uniform slot jitter around each preferred slot.
    #[arg(long, default_value_t = 1)]
    jitter: usize,
    /// Trend event `item:onset:decay-seconds:peak` (repeatable).
    #[arg(long)]
    trend: Vec<String>,
    #[arg(long, default_value_t = 0, allow_hyphen_values = true)]
    utc_offset: i64,
    #[arg(long, default_value_t = 42)]
    seed: u64,
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Ingest(a) => ingest(a),
        Command::Train(a) => train_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::Explain(a) => explain_cmd(a),
        Command::Synth(a) => synth_cmd(a),
    }
}

fn load_dataset(path: &PathBuf) -> Result<Dataset> {
    Ok(Dataset::load(path).with_context(|| format!("loading {}", path.display()))?)
}

fn ingest(a: IngestArgs) -> Result<()> {
    let raw = load_dataset(&a.input)?;
    let spec = FilterSpec {
        min_user_interactions: a.min_user_interactions,
        min_item_interactions: a.min_item_interactions,
        min_history_span_days: a.min_history_span_days,
    };
    let d = raw.filter(&spec);
    d.save(&a.output)
        .with_context(|| format!("writing {}", a.output.display()))?;
    println!(
        "users={} items={} interactions={} dropped={}",
        d.num_users(),
        d.num_items(),
        d.len(),
        raw.len() - d.len()
    );
    Ok(())
}

const META_SPLIT: &str = "split";
const META_SEPARATION: &str = "separation";
const META_USERS: &str = "user_vocab";
const META_ITEMS: &str = "item_vocab";

fn train_cmd(a: TrainArgs) -> Result<()> {
    let d = load_dataset(&a.dataset)?;
    let mode = a.split.mode();
    let split = Split::new(&d, mode);
    let radius = |g: Granularity| match g {
        Granularity::Month => a.radius_month,
        Granularity::DayOfWeek => a.radius_day_of_week,
        Granularity::Date => a.radius_date,
        Granularity::Hour => a.radius_hour,
    };
    let granularities = GranularityConfig::new(a.granularities.iter().map(|&g| (g, radius(g))))?;
    let config = TrainConfig {
        dim: a.dim,
        batch_size: a.batch_size,
        history_len: a.history_len,
        granularities,
        learning_rate: a.learning_rate,
        dropout: a.dropout,
        hidden: a.hidden.clone(),
        max_epochs: a.max_epochs,
        patience: a.patience,
        seed: a.seed,
        separation: a.split.separation.into(),
        selection: a.selection.into(),
        utc_offset: a.utc_offset,
        history_time: match a.history_time {
            HistoryTimeArg::Interaction => HistoryTime::Interaction,
            HistoryTimeArg::Target => HistoryTime::Target,
        },
        ablation: match a.ablation {
            AblationArg::None => Ablation::None,
            AblationArg::NoTimeRepr => Ablation::NoTimeRepr,
            AblationArg::NoTimeInPrediction => Ablation::NoTimeInPrediction,
        },
    };
    config.model_config(d.num_users(), d.num_items()).validate()?;
    let mut log_file = match &a.log {
        Some(p) => Some(BufWriter::new(
            File::create(p).with_context(|| format!("creating {}", p.display()))?,
        )),
        None => None,
    };
    let mut log_err = None;
    let state = train(&d, &split, &config, |line| {
        println!("{line}");
        if let Some(f) = log_file.as_mut() {
            if let Err(e) = writeln!(f, "{line}") {
                log_err.get_or_insert(e);
            }
        }
    })?;
    if let Some(e) = log_err {
        return Err(e).context("writing training log");
    }
    if let Some(mut f) = log_file {
        f.flush()?;
    }

    let metadata = BTreeMap::from([
        (META_SPLIT.to_string(), serde_json::to_string(&mode)?),
        (
            META_SEPARATION.to_string(),
            serde_json::to_string(&config.separation)?,
        ),
        (META_USERS.to_string(), d.users().fingerprint()),
        (META_ITEMS.to_string(), d.items().fingerprint()),
        ("seed".to_string(), a.seed.to_string()),
        (
            "best_epoch".to_string(),
            state.best_epoch.map_or("none".to_string(), |e| e.to_string()),
        ),
    ]);
    let model = state.best_model();
    let mut w = BufWriter::new(
        File::create(&a.checkpoint)
            .with_context(|| format!("creating {}", a.checkpoint.display()))?,
    );
    model.write_checkpoint(&mut w, &metadata)?;
    w.flush()?;
    match state.best_epoch {
        Some(e) => println!("best_epoch={e} best_val_hr10={:.4}", state.best_val_hr10),
        None => println!("best_epoch=none"),
    }
    Ok(())
}

struct Loaded {
    model: TimelyRec,
    dataset: Dataset,
    split: Split,
    separation: Separation,
}

fn load_pair(checkpoint: &PathBuf, dataset: &PathBuf) -> Result<Loaded> {
    let mut r = BufReader::new(
        File::open(checkpoint).with_context(|| format!("opening {}", checkpoint.display()))?,
    );
    let (model, meta) = TimelyRec::read_checkpoint(&mut r)
        .with_context(|| format!("reading {}", checkpoint.display()))?;
    let d = load_dataset(dataset)?;
    for (key, table, vocab) in [
        (META_USERS, "user_emb", d.users()),
        (META_ITEMS, "item_emb", d.items()),
    ] {
        let expected = meta.get(key).map(String::as_str).unwrap_or("missing");
        let found = vocab.fingerprint();
        if expected != found {
            return Err(timelyrec::Error::Input(format!(
                "vocabulary mismatch for table {table}: checkpoint has {expected}, dataset has {found}"
            ))
            .into());
        }
    }
    let parse = |key: &str| -> Result<String> {
        meta.get(key)
            .cloned()
            .ok_or_else(|| timelyrec::Error::Input(format!("checkpoint lacks '{key}' metadata")).into())
    };
    let mode: SplitMode = serde_json::from_str(&parse(META_SPLIT)?)
        .map_err(|e| timelyrec::Error::Input(format!("bad split metadata: {e}")))?;
    let separation: Separation = serde_json::from_str(&parse(META_SEPARATION)?)
        .map_err(|e| timelyrec::Error::Input(format!("bad separation metadata: {e}")))?;
    let split = Split::new(&d, mode);
    Ok(Loaded {
        model,
        dataset: d,
        split,
        separation,
    })
}

fn eval_cmd(a: EvalArgs) -> Result<()> {
    let l = load_pair(&a.checkpoint, &a.dataset)?;
    let target = match a.target {
        TargetArg::Validation => Target::Validation,
        TargetArg::Test => Target::Test,
    };
    let cases = CaseSet::build(
        &l.dataset,
        &l.split,
        a.scenario.into(),
        target,
        l.separation,
        a.seed,
    )?;
    if cases.is_empty() {
        bail!(timelyrec::Error::Input("no user has held-out interactions".into()));
    }
    let report = evaluate(&l.model, &l.dataset, &l.split, &cases)?;
    print!("{report}");
    Ok(())
}

fn explain_cmd(a: ExplainArgs) -> Result<()> {
    let l = load_pair(&a.checkpoint, &a.dataset)?;
    let u = l
        .dataset
        .users()
        .get(&a.user)
        .ok_or_else(|| timelyrec::Error::Input(format!("unknown user '{}'", a.user)))?;
    let i = l
        .dataset
        .items()
        .get(&a.item)
        .ok_or_else(|| timelyrec::Error::Input(format!("unknown item '{}'", a.item)))?;
    let history = recent_history(
        &l.dataset,
        &l.split,
        u,
        a.time,
        l.model.config().history_len,
        HistoryScope::All,
    );
    let (_, ex) = l.model.predict(u, i, a.time, &history)?;
    print!(
        "{}",
        explain::render(&ex, &a.user, &a.item, a.time, l.dataset.items())
    );
    Ok(())
}

fn parse_trend(s: &str) -> Result<TrendEvent> {
    let parts: Vec<&str> = s.split(':').collect();
    let bad = || timelyrec::Error::Input(format!("trend '{s}' is not item:onset:decay-seconds:peak"));
    if parts.len() != 4 {
        return Err(bad().into());
    }
    Ok(TrendEvent {
        item: parts[0].parse().map_err(|_| bad())?,
        onset: parts[1].parse().map_err(|_| bad())?,
        decay_secs: parts[2].parse().map_err(|_| bad())?,
        peak: parts[3].parse().map_err(|_| bad())?,
    })
}

fn synth_cmd(a: SynthArgs) -> Result<()> {
    let planted = a
        .plant
        .iter()
        .map(|&g| {
            let fixed = match g {
                Granularity::Hour => a.hour,
                Granularity::DayOfWeek => a.day_of_week,
                _ => None,
            };
            PlantedGranularity {
                granularity: g,
                rule: match fixed {
                    Some(slot) => SlotRule::Fixed { slot },
                    None => SlotRule::Random {
                        count: a.preferred_slots,
                    },
                },
                jitter: a.jitter,
            }
        })
        .collect();
    let spec = SyntheticSpec {
        users: a.users,
        items: a.items,
        interactions_per_user: a.interactions_per_user,
        clusters: a.clusters,
        start: a.start,
        span_days: a.span_days,
        planted,
        trends: a.trend.iter().map(|s| parse_trend(s)).collect::<Result<_>>()?,
        utc_offset: a.utc_offset,
        seed: a.seed,
    };
    let s = synth::generate(&spec)?;
    s.save(&a.output)
        .with_context(|| format!("writing {}", a.output.display()))?;
    println!(
        "interactions={} truth={}",
        s.rows.len(),
        synth::truth_path(&a.output).display()
    );
    Ok(())
}
