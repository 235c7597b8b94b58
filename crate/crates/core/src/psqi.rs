//! Pittsburgh Sleep Quality Index scoring and condition dichotomization.
//!
//! Seven component scores (0-3 each) summed into a global score (0-21); lower
//! is better. The bed-partner section is not self-rated and is not modeled.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::ranking::ConditionLabel;

const MINUTES_PER_DAY: u32 = 24 * 60;

/// Wall-clock time of day, serialized as `"HH:MM"`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ClockTime {
    minutes: u32,
}

impl ClockTime {
    pub fn new(hour: u32, minute: u32) -> Result<Self, PsqiError> {
        if hour >= 24 || minute >= 60 {
            return Err(PsqiError::InvalidTime(format!("{hour:02}:{minute:02}")));
        }
        Ok(Self { minutes: hour * 60 + minute })
    }

    pub fn from_minutes(minutes: u32) -> Self {
        Self { minutes: minutes % MINUTES_PER_DAY }
    }

    pub fn minutes_since_midnight(self) -> u32 {
        self.minutes
    }

    /// Minutes from `self` forward to `later`, wrapping past midnight.
    pub fn minutes_until(self, later: ClockTime) -> u32 {
        (later.minutes + MINUTES_PER_DAY - self.minutes) % MINUTES_PER_DAY
    }
}

impl fmt::Display for ClockTime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:02}:{:02}", self.minutes / 60, self.minutes % 60)
    }
}

impl FromStr for ClockTime {
    type Err = PsqiError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || PsqiError::InvalidTime(s.to_string());
        let (h, m) = s.split_once(':').ok_or_else(bad)?;
        if h.is_empty() || h.len() > 2 || m.len() != 2 {
            return Err(bad());
        }
        let h: u32 = h.parse().map_err(|_| bad())?;
        let m: u32 = m.parse().map_err(|_| bad())?;
        ClockTime::new(h, m).map_err(|_| bad())
    }
}

impl Serialize for ClockTime {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for ClockTime {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PsqiError {
    #[error("item `{item}` out of range: {value}")]
    OutOfRange { item: &'static str, value: String },
    #[error("invalid clock time `{0}`")]
    InvalidTime(String),
    #[error("the direct outcome question was not answered")]
    MissingOutcomeAnswer,
}

/// One self-rated questionnaire. Frequency items use
/// 0 = not during the past month .. 3 = three or more times a week.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PsqiResponse {
    pub bedtime: ClockTime,
    pub sleep_latency_minutes: u32,
    pub wake_time: ClockTime,
    pub hours_slept: f64,
    pub cannot_sleep_within_30_minutes: u8,
    pub wake_in_night_or_early_morning: u8,
    pub get_up_for_bathroom: u8,
    pub cannot_breathe_comfortably: u8,
    pub cough_or_snore_loudly: u8,
    pub feel_too_cold: u8,
    pub feel_too_hot: u8,
    pub bad_dreams: u8,
    pub have_pain: u8,
    pub other_reason: u8,
    /// 0 very good .. 3 very bad.
    pub subjective_quality: u8,
    pub sleep_medication: u8,
    pub trouble_staying_awake: u8,
    /// 0 no problem .. 3 a very big problem.
    pub lack_of_enthusiasm: u8,
    /// Answer to the direct outcome question ("Do you sleep well?").
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sleeps_well: Option<bool>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PsqiScore {
    pub components: [u8; 7],
    pub global: u8,
}

impl PsqiScore {
    pub fn from_components(components: [u8; 7]) -> Self {
        Self {
            components,
            global: components.iter().sum(),
        }
    }
}

/// How the binary worker condition is derived from a response.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ConditionRule {
    /// Positive iff the worker answered yes to the direct question.
    #[default]
    DirectQuestion,
    /// Negative iff the global score exceeds `threshold`.
    GlobalThreshold { threshold: u8 },
}

impl PsqiResponse {
    fn categorical_items(&self) -> [(&'static str, u8); 14] {
        [
            ("cannot_sleep_within_30_minutes", self.cannot_sleep_within_30_minutes),
            ("wake_in_night_or_early_morning", self.wake_in_night_or_early_morning),
            ("get_up_for_bathroom", self.get_up_for_bathroom),
            ("cannot_breathe_comfortably", self.cannot_breathe_comfortably),
            ("cough_or_snore_loudly", self.cough_or_snore_loudly),
            ("feel_too_cold", self.feel_too_cold),
            ("feel_too_hot", self.feel_too_hot),
            ("bad_dreams", self.bad_dreams),
            ("have_pain", self.have_pain),
            ("other_reason", self.other_reason),
            ("subjective_quality", self.subjective_quality),
            ("sleep_medication", self.sleep_medication),
            ("trouble_staying_awake", self.trouble_staying_awake),
            ("lack_of_enthusiasm", self.lack_of_enthusiasm),
        ]
    }

    pub fn validate(&self) -> Result<(), PsqiError> {
        for (item, value) in self.categorical_items() {
            if value > 3 {
                return Err(PsqiError::OutOfRange { item, value: value.to_string() });
            }
        }
        if !(self.hours_slept > 0.0 && self.hours_slept < 24.0) {
            return Err(PsqiError::OutOfRange {
                item: "hours_slept",
                value: self.hours_slept.to_string(),
            });
        }
        if self.time_in_bed_minutes() == 0 {
            return Err(PsqiError::OutOfRange {
                item: "wake_time",
                value: format!("{} equals bedtime", self.wake_time),
            });
        }
        Ok(())
    }

    pub fn time_in_bed_minutes(&self) -> u32 {
        self.bedtime.minutes_until(self.wake_time)
    }

    fn disturbance_sum(&self) -> u8 {
        self.wake_in_night_or_early_morning
            + self.get_up_for_bathroom
            + self.cannot_breathe_comfortably
            + self.cough_or_snore_loudly
            + self.feel_too_cold
            + self.feel_too_hot
            + self.bad_dreams
            + self.have_pain
            + self.other_reason
    }

    /// A response whose component scores are exactly `components` (each 0-3).
    ///
    /// Used to synthesize simulated questionnaires for a target score.
    pub fn from_components(components: [u8; 7], sleeps_well: Option<bool>) -> Self {
        let c = components.map(|x| x.min(3));
        let (latency, within_30) = [(10, 0), (20, 0), (45, 1), (90, 3)][c[1] as usize];
        let hours: f64 = [7.5, 6.5, 5.5, 4.5][c[2] as usize];
        let efficiency = [0.90, 0.80, 0.70, 0.55][c[3] as usize];
        let bed = ClockTime::new(23, 0).expect("valid time");
        let in_bed = (hours * 60.0 / efficiency).round() as u32;
        let wake = ClockTime::from_minutes(bed.minutes_since_midnight() + in_bed);
        let mut disturbances = [0u8; 9];
        let mut left = [0u8, 5, 14, 23][c[4] as usize];
        for slot in disturbances.iter_mut() {
            let take = left.min(3);
            *slot = take;
            left -= take;
        }
        let (awake, enthusiasm) = [(0, 0), (1, 0), (2, 1), (3, 3)][c[6] as usize];
        PsqiResponse {
            bedtime: bed,
            sleep_latency_minutes: latency,
            wake_time: wake,
            hours_slept: hours,
            cannot_sleep_within_30_minutes: within_30,
            wake_in_night_or_early_morning: disturbances[0],
            get_up_for_bathroom: disturbances[1],
            cannot_breathe_comfortably: disturbances[2],
            cough_or_snore_loudly: disturbances[3],
            feel_too_cold: disturbances[4],
            feel_too_hot: disturbances[5],
            bad_dreams: disturbances[6],
            have_pain: disturbances[7],
            other_reason: disturbances[8],
            subjective_quality: c[0],
            sleep_medication: c[5],
            trouble_staying_awake: awake,
            lack_of_enthusiasm: enthusiasm,
            sleeps_well,
        }
    }
}

fn latency_points(minutes: u32) -> u8 {
    match minutes {
        0..=15 => 0,
        16..=30 => 1,
        31..=60 => 2,
        _ => 3,
    }
}

/// Maps a 0-6 sum onto 0-3 (0; 1-2; 3-4; 5-6).
fn pair_sum_component(sum: u8) -> u8 {
    match sum {
        0 => 0,
        1..=2 => 1,
        3..=4 => 2,
        _ => 3,
    }
}

pub fn score_psqi(r: &PsqiResponse) -> Result<PsqiScore, PsqiError> {
    r.validate()?;

    let quality = r.subjective_quality;
    let latency = pair_sum_component(latency_points(r.sleep_latency_minutes) + r.cannot_sleep_within_30_minutes);
    let duration = match r.hours_slept {
        h if h >= 7.0 => 0,
        h if h >= 6.0 => 1,
        h if h >= 5.0 => 2,
        _ => 3,
    };
    let efficiency_pct = r.hours_slept * 60.0 / r.time_in_bed_minutes() as f64 * 100.0;
    let efficiency = match efficiency_pct {
        e if e >= 85.0 => 0,
        e if e >= 75.0 => 1,
        e if e >= 65.0 => 2,
        _ => 3,
    };
    let disturbances = match r.disturbance_sum() {
        0 => 0,
        1..=9 => 1,
        10..=18 => 2,
        _ => 3,
    };
    let medication = r.sleep_medication;
    let dysfunction = pair_sum_component(r.trouble_staying_awake + r.lack_of_enthusiasm);

    Ok(PsqiScore::from_components([
        quality,
        latency,
        duration,
        efficiency,
        disturbances,
        medication,
        dysfunction,
    ]))
}

/// Condition from the direct question.
pub fn condition_label(r: &PsqiResponse) -> Result<ConditionLabel, PsqiError> {
    condition_label_with(r, ConditionRule::DirectQuestion)
}

pub fn condition_label_with(r: &PsqiResponse, rule: ConditionRule) -> Result<ConditionLabel, PsqiError> {
    match rule {
        ConditionRule::DirectQuestion => match r.sleeps_well {
            Some(true) => Ok(ConditionLabel::Positive),
            Some(false) => Ok(ConditionLabel::Negative),
            None => Err(PsqiError::MissingOutcomeAnswer),
        },
        ConditionRule::GlobalThreshold { threshold } => {
            if score_psqi(r)?.global > threshold {
                Ok(ConditionLabel::Negative)
            } else {
                Ok(ConditionLabel::Positive)
            }
        }
    }
}
