//! Civil-time decomposition of epoch timestamps into period slots, cyclic slot
//! shifting and the sinusoidal temporal encoding.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Seconds since the Unix epoch.
pub type Timestamp = i64;

pub const SECONDS_PER_HOUR: i64 = 3_600;
pub const SECONDS_PER_DAY: i64 = 86_400;

/// A granularity of period.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Granularity {
    Month,
    DayOfWeek,
    Date,
    Hour,
}

impl Granularity {
    pub const ALL: [Granularity; 4] = [
        Granularity::Month,
        Granularity::DayOfWeek,
        Granularity::Date,
        Granularity::Hour,
    ];

    pub fn slot_count(self) -> usize {
        match self {
            Granularity::Month => 12,
            Granularity::DayOfWeek => 7,
            Granularity::Date => 31,
            Granularity::Hour => 24,
        }
    }

    /// Largest radius whose window does not wrap onto itself.
    pub fn max_radius(self) -> usize {
        (self.slot_count() - 1) / 2
    }

    pub fn default_radius(self) -> usize {
        match self {
            Granularity::Month => 2,
            Granularity::DayOfWeek => 1,
            Granularity::Date => 6,
            Granularity::Hour => 5,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Granularity::Month => "month",
            Granularity::DayOfWeek => "day-of-week",
            Granularity::Date => "date",
            Granularity::Hour => "hour",
        }
    }

    /// Human-readable label of a slot, e.g. `Feb`, `Sun`, `16`, `12 AM`.
    pub fn slot_label(self, slot: usize) -> String {
        const MONTHS: [&str; 12] = [
            "Jan", "Feb", "Mar", "Apr", "May", "Jun", "Jul", "Aug", "Sep", "Oct", "Nov", "Dec",
        ];
        const DAYS: [&str; 7] = ["Mon", "Tue", "Wed", "Thu", "Fri", "Sat", "Sun"];
        match self {
            Granularity::Month => MONTHS[slot % 12].to_string(),
            Granularity::DayOfWeek => DAYS[slot % 7].to_string(),
            Granularity::Date => (slot + 1).to_string(),
            Granularity::Hour => {
                let h = slot % 24;
                let twelve = if h % 12 == 0 { 12 } else { h % 12 };
                format!("{twelve} {}", if h < 12 { "AM" } else { "PM" })
            }
        }
    }
}

impl fmt::Display for Granularity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Granularity {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "month" | "m" => Ok(Granularity::Month),
            "day-of-week" | "dayofweek" | "dow" | "w" => Ok(Granularity::DayOfWeek),
            "date" | "d" => Ok(Granularity::Date),
            "hour" | "h" => Ok(Granularity::Hour),
            other => Err(Error::Input(format!("unknown granularity '{other}'"))),
        }
    }
}

/// A timestamp broken down into slot indices.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct CalendarFields {
    /// 0 = January.
    pub month: usize,
    /// 0 = Monday.
    pub day_of_week: usize,
    /// Day of month minus one.
    pub date: usize,
    pub hour: usize,
}

impl CalendarFields {
    pub fn slot(&self, g: Granularity) -> usize {
        match g {
            Granularity::Month => self.month,
            Granularity::DayOfWeek => self.day_of_week,
            Granularity::Date => self.date,
            Granularity::Hour => self.hour,
        }
    }
}

/// Converts days since 1970-01-01 to a proleptic Gregorian (year, month 1..=12, day 1..=31).
///
/// Eras of 400 years keep the arithmetic in non-negative integers.
fn civil_from_days(days: i64) -> (i64, u32, u32) {
    let z = days + 719_468;
    let era = z.div_euclid(146_097);
    let doe = z.rem_euclid(146_097);
    let yoe = (doe - doe / 1_460 + doe / 36_524 - doe / 146_096) / 365;
    let doy = doe - (365 * yoe + yoe / 4 - yoe / 100);
    let mp = (5 * doy + 2) / 153;
    let day = (doy - (153 * mp + 2) / 5 + 1) as u32;
    let month = if mp < 10 { mp + 3 } else { mp - 9 } as u32;
    let year = yoe + era * 400 + i64::from(month <= 2);
    (year, month, day)
}

/// Decomposes `t + offset` (UTC offset in seconds) into calendar slots.
pub fn decompose(t: Timestamp, offset: i64) -> Result<CalendarFields> {
    let adjusted = t
        .checked_add(offset)
        .ok_or_else(|| Error::Input(format!("timestamp {t} overflows with offset {offset}")))?;
    if adjusted < 0 {
        return Err(Error::Input(format!(
            "timestamp {t} with offset {offset} is before the epoch"
        )));
    }
    let days = adjusted / SECONDS_PER_DAY;
    let secs_of_day = adjusted % SECONDS_PER_DAY;
    let (_, month, day) = civil_from_days(days);
    // 1970-01-01 was a Thursday (3 when Monday = 0).
    let day_of_week = ((days + 3) % 7) as usize;
    Ok(CalendarFields {
        month: (month - 1) as usize,
        day_of_week,
        date: (day - 1) as usize,
        hour: (secs_of_day / SECONDS_PER_HOUR) as usize,
    })
}

/// Cyclic slot shift: `(slot + n) mod slot_count(g)`.
pub fn shift_slot(slot: usize, n: i64, g: Granularity) -> usize {
    let count = g.slot_count() as i64;
    (slot as i64 + n).rem_euclid(count) as usize
}

/// Sinusoidal encoding of the timestamp measured in hours.
pub fn temporal_encoding(t: Timestamp, dim: usize) -> Vec<f64> {
    let hours = t as f64 / SECONDS_PER_HOUR as f64;
    let d = dim as f64;
    (0..dim)
        .map(|j| {
            if j % 2 == 0 {
                (hours / 10_000f64.powf(j as f64 / d)).sin()
            } else {
                (hours / 10_000f64.powf((j - 1) as f64 / d)).cos()
            }
        })
        .collect()
}

/// Which granularities are active and how wide their gradual-attention windows are.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GranularityConfig {
    /// Enabled granularities with their window radius, in canonical order.
    windows: Vec<(Granularity, usize)>,
}

impl Default for GranularityConfig {
    fn default() -> Self {
        Self {
            windows: Granularity::ALL
                .iter()
                .map(|&g| (g, g.default_radius()))
                .collect(),
        }
    }
}

impl GranularityConfig {
    pub fn new(windows: impl IntoIterator<Item = (Granularity, usize)>) -> Result<Self> {
        let mut windows: Vec<(Granularity, usize)> = windows.into_iter().collect();
        windows.sort_by_key(|&(g, _)| g);
        for pair in windows.windows(2) {
            if pair[0].0 == pair[1].0 {
                return Err(Error::Config(format!("granularity {} listed twice", pair[0].0)));
            }
        }
        if windows.is_empty() {
            return Err(Error::Config("at least one granularity must be enabled".into()));
        }
        for &(g, r) in &windows {
            if r > g.max_radius() {
                return Err(Error::Config(format!(
                    "window radius {r} for {g} exceeds the maximum {}",
                    g.max_radius()
                )));
            }
        }
        Ok(Self { windows })
    }

    /// All four granularities with the same radius `r` (clamped to each maximum).
    pub fn uniform_radius(r: usize) -> Self {
        Self {
            windows: Granularity::ALL
                .iter()
                .map(|&g| (g, r.min(g.max_radius())))
                .collect(),
        }
    }

    pub fn windows(&self) -> &[(Granularity, usize)] {
        &self.windows
    }

    pub fn enabled(&self) -> impl Iterator<Item = Granularity> + '_ {
        self.windows.iter().map(|&(g, _)| g)
    }

    pub fn radius(&self, g: Granularity) -> Option<usize> {
        self.windows.iter().find(|&&(h, _)| h == g).map(|&(_, r)| r)
    }

    pub fn is_enabled(&self, g: Granularity) -> bool {
        self.radius(g).is_some()
    }
}
