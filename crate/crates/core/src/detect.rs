//! Daily count aggregation and aberration detection.
//!
//! All five detectors share one baseline: for scored day `t` the baseline is
//! the `window` counts ending `buffer + 1` days before `t`, summarized by its
//! mean `μ_t` and standard deviation `σ_t`. The first `window + buffer` days of
//! a series are warm-up and carry no statistic.
//!
//! | method | statistic |
//! |--------|-----------|
//! | C1, C2 | `(x_t − μ_t) / σ_t` |
//! | C3     | `Σ_{i=t−2..t} max(0, C2_i − 1)` over scored days |
//! | EWMA   | `(z_t − μ_t) / (σ_t·√(ω/(2−ω)))`, `z_t = ω·x_t + (1−ω)·z_{t−1}` |
//! | F_STAT | `mean_{i=t−buffer..t} (x_i − μ_t)² / σ_t²` |
//!
//! When `σ_t = 0` the statistic is `0` if `x_t ≤ μ_t` and `+∞` otherwise.
//! Baseline sums are kept as exact integers while the window slides, so a
//! report costs O(n) regardless of window size.

use std::collections::VecDeque;
use std::fmt;
use std::str::FromStr;

use chrono::{Duration, NaiveDate};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::index::InvertedIndex;

#[derive(Debug, Error, PartialEq)]
pub enum DetectError {
    #[error("date range is inverted: {start} > {end}")]
    InvertedRange { start: NaiveDate, end: NaiveDate },
    #[error("series has {actual} days but at least {required} (window + buffer + 1) are required")]
    TooShort { required: usize, actual: usize },
    #[error("invalid detector parameters: {0}")]
    InvalidParams(String),
    #[error("correlation undefined: {0}")]
    UndefinedCorrelation(&'static str),
}

/// Zero-filled daily counts for one tracked term.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DailySeries {
    pub term: String,
    pub start: NaiveDate,
    pub counts: Vec<u64>,
}

impl DailySeries {
    pub fn new(term: impl Into<String>, start: NaiveDate, counts: Vec<u64>) -> Self {
        DailySeries {
            term: term.into(),
            start,
            counts,
        }
    }

    pub fn date_of(&self, offset: usize) -> NaiveDate {
        self.start + Duration::days(offset as i64)
    }

    pub fn len(&self) -> usize {
        self.counts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.counts.is_empty()
    }
}

/// Counts, per day of `[start, end]`, the tweets whose tokens contain `term`.
pub fn aggregate_daily_counts(
    index: &InvertedIndex,
    term: &str,
    start: NaiveDate,
    end: NaiveDate,
) -> Result<DailySeries, DetectError> {
    if start > end {
        return Err(DetectError::InvertedRange { start, end });
    }
    let term = term.to_lowercase();
    let days = (end - start).num_days() as usize + 1;
    let mut counts = vec![0u64; days];
    for id in index.postings(&term) {
        if let Some(doc) = index.doc(id) {
            let day = doc.day();
            if (start..=end).contains(&day) {
                counts[(day - start).num_days() as usize] += 1;
            }
        }
    }
    Ok(DailySeries::new(term, start, counts))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Method {
    C1,
    C2,
    C3,
    #[serde(rename = "F_STAT")]
    FStat,
    #[serde(rename = "EWMA")]
    Ewma,
}

impl Method {
    pub const ALL: [Method; 5] = [Method::C1, Method::C2, Method::C3, Method::FStat, Method::Ewma];
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::C1 => "C1",
            Method::C2 => "C2",
            Method::C3 => "C3",
            Method::FStat => "F_STAT",
            Method::Ewma => "EWMA",
        })
    }
}

impl FromStr for Method {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_uppercase().as_str() {
            "C1" => Ok(Method::C1),
            "C2" => Ok(Method::C2),
            "C3" => Ok(Method::C3),
            "F_STAT" | "F" | "FSTAT" => Ok(Method::FStat),
            "EWMA" => Ok(Method::Ewma),
            other => Err(format!("unknown detection method `{other}`")),
        }
    }
}

/// Which threshold table to draw defaults from.
///
/// `ControlLimit` compares C1/C2 against the 3σ control limit and C3 against
/// the classical EARS cut of 2. `ListedAlarm` lowers the C2 threshold to 0.2
/// and the C3 threshold to 0.3.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThresholdPreset {
    #[default]
    ControlLimit,
    ListedAlarm,
}

impl ThresholdPreset {
    pub fn threshold(self, method: Method) -> f64 {
        match (self, method) {
            (_, Method::C1) => 3.0,
            (ThresholdPreset::ControlLimit, Method::C2) => 3.0,
            (ThresholdPreset::ListedAlarm, Method::C2) => 0.2,
            (ThresholdPreset::ControlLimit, Method::C3) => 2.0,
            (ThresholdPreset::ListedAlarm, Method::C3) => 0.3,
            (_, Method::FStat) => 0.6,
            (_, Method::Ewma) => 4.0,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SdMode {
    /// Divisor `n − 1`.
    #[default]
    Sample,
    /// Divisor `n`.
    Population,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectorParams {
    pub method: Method,
    pub window: usize,
    pub buffer: usize,
    pub threshold: f64,
    /// EWMA smoothing weight; ignored by the other methods.
    pub omega: f64,
    pub sd_mode: SdMode,
}

pub const DEFAULT_WINDOW: usize = 15;
pub const DEFAULT_BUFFER: usize = 5;
pub const DEFAULT_OMEGA: f64 = 0.24;

impl DetectorParams {
    pub fn new(method: Method) -> Self {
        DetectorParams::with_preset(method, ThresholdPreset::ControlLimit)
    }

    pub fn with_preset(method: Method, preset: ThresholdPreset) -> Self {
        DetectorParams {
            method,
            window: DEFAULT_WINDOW,
            buffer: DEFAULT_BUFFER,
            threshold: preset.threshold(method),
            omega: DEFAULT_OMEGA,
            sd_mode: SdMode::Sample,
        }
    }

    pub fn validate(&self) -> Result<(), DetectError> {
        let min_window = match self.sd_mode {
            SdMode::Sample => 2,
            SdMode::Population => 1,
        };
        if self.window < min_window {
            return Err(DetectError::InvalidParams(format!(
                "window must be at least {min_window}, got {}",
                self.window
            )));
        }
        if self.threshold.is_nan() || self.threshold <= 0.0 {
            return Err(DetectError::InvalidParams(format!(
                "threshold must be positive, got {}",
                self.threshold
            )));
        }
        if !(self.omega > 0.0 && self.omega <= 1.0) {
            return Err(DetectError::InvalidParams(format!(
                "omega must lie in (0, 1], got {}",
                self.omega
            )));
        }
        Ok(())
    }

    /// Number of leading warm-up days without a statistic.
    pub fn warm_up(&self) -> usize {
        self.window + self.buffer
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DayEntry {
    pub date: NaiveDate,
    pub count: u64,
    /// `None` during warm-up; `+∞` marks a zero-variance excess.
    pub statistic: Option<f64>,
    pub alarm: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AlarmReport {
    pub term: String,
    pub method: Method,
    pub threshold: f64,
    pub entries: Vec<DayEntry>,
    pub first_alarm_date: Option<NaiveDate>,
}

fn fmt_stat(v: f64) -> String {
    if v.is_infinite() {
        if v > 0.0 { "inf" } else { "-inf" }.to_string()
    } else {
        v.to_string()
    }
}

impl AlarmReport {
    pub fn alarm_days(&self) -> usize {
        self.entries.iter().filter(|e| e.alarm).count()
    }

    pub fn statistics(&self) -> impl Iterator<Item = Option<f64>> + '_ {
        self.entries.iter().map(|e| e.statistic)
    }

    /// `date,count,statistic,alarm` with an empty statistic during warm-up.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("date,count,statistic,alarm\n");
        for e in &self.entries {
            let stat = e.statistic.map(fmt_stat).unwrap_or_default();
            out.push_str(&format!("{},{},{},{}\n", e.date, e.count, stat, u8::from(e.alarm)));
        }
        out
    }

    /// `term,method,first_alarm_date,n_alarm_days`
    pub fn summary_line(&self) -> String {
        let first = self.first_alarm_date.map(|d| d.to_string()).unwrap_or_default();
        format!("{},{},{},{}", self.term, self.method, first, self.alarm_days())
    }
}

/// Baseline and buffer sums for one scored day, as exact integers.
struct Window {
    n: i128,
    sum: i128,
    sum_sq: i128,
    tail_len: i128,
    tail_sum: i128,
    tail_sum_sq: i128,
}

impl Window {
    fn mean(&self) -> f64 {
        self.sum as f64 / self.n as f64
    }

    /// `n·Σx² − (Σx)²`, i.e. `n²` times the population variance.
    fn spread(&self) -> i128 {
        self.n * self.sum_sq - self.sum * self.sum
    }

    fn divisor(&self, mode: SdMode) -> i128 {
        match mode {
            SdMode::Sample => self.n * (self.n - 1),
            SdMode::Population => self.n * self.n,
        }
    }

    fn sd(&self, mode: SdMode) -> f64 {
        (self.spread() as f64 / self.divisor(mode) as f64).sqrt()
    }

    fn exceeds_mean(&self, x: i128) -> bool {
        self.n * x > self.sum
    }

    fn standardized(&self, x: i128, mode: SdMode) -> f64 {
        if self.spread() == 0 {
            return if self.exceeds_mean(x) { f64::INFINITY } else { 0.0 };
        }
        ((self.n * x - self.sum) as f64 / self.n as f64) / self.sd(mode)
    }

    fn f_stat(&self, x: i128, mode: SdMode) -> f64 {
        let spread = self.spread();
        if spread == 0 {
            return if self.exceeds_mean(x) { f64::INFINITY } else { 0.0 };
        }
        // n²·Σ(x_i − μ)² over the tail, exactly.
        let dev = self.n * self.n * self.tail_sum_sq - 2 * self.n * self.sum * self.tail_sum
            + self.tail_len * self.sum * self.sum;
        (dev as f64 * self.divisor(mode) as f64)
            / ((self.n * self.n * self.tail_len) as f64 * spread as f64)
    }
}

/// Scores every day of `series` with one detector.
pub fn run_detector(series: &DailySeries, params: &DetectorParams) -> Result<AlarmReport, DetectError> {
    params.validate()?;
    let (w, b) = (params.window, params.buffer);
    let first = w + b;
    if series.len() <= first {
        return Err(DetectError::TooShort {
            required: first + 1,
            actual: series.len(),
        });
    }
    let xs: Vec<i128> = series.counts.iter().map(|&c| i128::from(c)).collect();
    let sq = |v: i128| v * v;
    let mut win = Window {
        n: w as i128,
        sum: xs[..w].iter().sum(),
        sum_sq: xs[..w].iter().map(|&x| sq(x)).sum(),
        tail_len: b as i128 + 1,
        tail_sum: xs[first - b..=first].iter().sum(),
        tail_sum_sq: xs[first - b..=first].iter().map(|&x| sq(x)).sum(),
    };
    let mode = params.sd_mode;
    let omega = params.omega;
    let ewma_scale = (omega / (2.0 - omega)).sqrt();
    let mut z = win.mean();
    let mut recent_c2: VecDeque<f64> = VecDeque::with_capacity(3);

    let mut entries = Vec::with_capacity(series.len());
    for (t, &count) in series.counts.iter().enumerate().take(first) {
        entries.push(DayEntry {
            date: series.date_of(t),
            count,
            statistic: None,
            alarm: false,
        });
    }
    let mut first_alarm_date = None;
    for t in first..xs.len() {
        if t > first {
            let (enter, leave) = (xs[t - b - 1], xs[t - b - 1 - w]);
            win.sum += enter - leave;
            win.sum_sq += sq(enter) - sq(leave);
            let (enter, leave) = (xs[t], xs[t - b - 1]);
            win.tail_sum += enter - leave;
            win.tail_sum_sq += sq(enter) - sq(leave);
        }
        let x = xs[t];
        let c2 = win.standardized(x, mode);
        if recent_c2.len() == 3 {
            recent_c2.pop_front();
        }
        recent_c2.push_back(c2);
        let mu = win.mean();
        z = omega * x as f64 + (1.0 - omega) * z;

        let statistic = match params.method {
            Method::C1 | Method::C2 => c2,
            Method::C3 => recent_c2.iter().map(|&c| (c - 1.0).max(0.0)).sum(),
            Method::FStat => win.f_stat(x, mode),
            Method::Ewma => {
                if win.spread() == 0 {
                    if win.exceeds_mean(x) { f64::INFINITY } else { 0.0 }
                } else {
                    (z - mu) / (win.sd(mode) * ewma_scale)
                }
            }
        };
        let alarm = statistic > params.threshold;
        let date = series.date_of(t);
        if alarm && first_alarm_date.is_none() {
            first_alarm_date = Some(date);
        }
        entries.push(DayEntry {
            date,
            count: series.counts[t],
            statistic: Some(statistic),
            alarm,
        });
    }
    Ok(AlarmReport {
        term: series.term.clone(),
        method: params.method,
        threshold: params.threshold,
        entries,
        first_alarm_date,
    })
}

/// Product-moment correlation of two equal-length, non-constant vectors.
pub fn pearson_correlation(a: &[f64], b: &[f64]) -> Result<f64, DetectError> {
    if a.len() != b.len() {
        return Err(DetectError::UndefinedCorrelation("vectors differ in length"));
    }
    if a.len() < 2 {
        return Err(DetectError::UndefinedCorrelation("need at least two points"));
    }
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa == 0.0 || sbb == 0.0 {
        return Err(DetectError::UndefinedCorrelation("constant input"));
    }
    Ok((sab / (saa.sqrt() * sbb.sqrt())).clamp(-1.0, 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Tweet;
    use proptest::prelude::*;

    fn day(d: u32) -> NaiveDate {
        NaiveDate::from_ymd_opt(2011, 5, d).unwrap()
    }

    fn series(counts: Vec<u64>) -> DailySeries {
        DailySeries::new("ehec", day(1), counts)
    }

    fn stats(report: &AlarmReport) -> Vec<Option<f64>> {
        report.statistics().collect()
    }

    #[test]
    fn aggregate_counts() {
        let mk = |id: &str, d: u32, text: &str| Tweet {
            id: id.into(),
            timestamp: day(d).and_hms_opt(12, 0, 0).unwrap().and_utc(),
            user: "u".into(),
            text: text.into(),
        };
        let index = InvertedIndex::build(&[
            mk("a", 20, "EHEC"),
            mk("b", 20, "ehec news"),
            mk("c", 20, "#ehec"),
            mk("d", 21, "ehec"),
            mk("e", 21, "flu"),
        ])
        .unwrap();
        let s = aggregate_daily_counts(&index, "EHEC", day(20), day(21)).unwrap();
        assert_eq!(s.counts, [3, 1]);
        let s = aggregate_daily_counts(&index, "cholera", day(19), day(22)).unwrap();
        assert_eq!(s.counts, [0; 4]);
        let empty = InvertedIndex::default();
        let s = aggregate_daily_counts(&empty, "ehec", day(1), day(3)).unwrap();
        assert_eq!(s.counts, [0; 3]);
        assert!(matches!(
            aggregate_daily_counts(&empty, "ehec", day(3), day(1)),
            Err(DetectError::InvertedRange { .. })
        ));
    }

    #[test]
    fn constant_series_never_alarms() {
        let s = series(vec![2; 30]);
        for method in Method::ALL {
            let r = run_detector(&s, &DetectorParams::new(method)).unwrap();
            assert!(r.entries[20..].iter().all(|e| e.statistic == Some(0.0)), "{method}");
            assert_eq!(r.first_alarm_date, None);
        }
    }

    #[test]
    fn c1_hand_example() {
        let mut counts: Vec<u64> = [1, 2, 3].repeat(5);
        counts.extend([2; 5]);
        counts.push(4);
        let r = run_detector(&series(counts), &DetectorParams::new(Method::C1)).unwrap();
        let sigma = (10.0f64 / 14.0).sqrt();
        let c1 = r.entries[20].statistic.unwrap();
        assert!((c1 - 2.0 / sigma).abs() < 1e-12, "{c1}");
        assert!((c1 - 2.366).abs() < 1e-3);
        assert!(!r.entries[20].alarm);
    }

    #[test]
    fn zero_variance_spike_forces_alarm() {
        let mut counts = vec![0; 20];
        counts.push(5);
        for method in Method::ALL {
            let r = run_detector(&series(counts.clone()), &DetectorParams::new(method)).unwrap();
            assert_eq!(r.entries[20].statistic, Some(f64::INFINITY), "{method}");
            assert_eq!(r.first_alarm_date, Some(day(21)));
        }
    }

    #[test]
    fn warm_up_is_exactly_window_plus_buffer() {
        let s = series((0..40).map(|i| i % 7).collect());
        for method in Method::ALL {
            let r = run_detector(&s, &DetectorParams::new(method)).unwrap();
            let missing = stats(&r).iter().take_while(|v| v.is_none()).count();
            assert_eq!(missing, 20);
            assert!(stats(&r)[20..].iter().all(Option::is_some));
        }
    }

    #[test]
    fn too_short_names_minimum() {
        let err = run_detector(&series(vec![1; 20]), &DetectorParams::new(Method::C1)).unwrap_err();
        assert_eq!(err, DetectError::TooShort { required: 21, actual: 20 });
    }

    #[test]
    fn invalid_params() {
        let mut p = DetectorParams::new(Method::Ewma);
        p.window = 1;
        assert!(p.validate().is_err());
        let mut p = DetectorParams::new(Method::Ewma);
        p.threshold = 0.0;
        assert!(p.validate().is_err());
        let mut p = DetectorParams::new(Method::Ewma);
        p.omega = 1.5;
        assert!(p.validate().is_err());
    }

    #[test]
    fn c3_sums_recent_excess() {
        // Baseline alternates 0/2 so σ > 0; the last three days jump.
        let mut counts: Vec<u64> = [0, 2].repeat(10);
        counts.extend([6, 6, 6]);
        let s = series(counts);
        let c2 = run_detector(&s, &DetectorParams::new(Method::C2)).unwrap();
        let c3 = run_detector(&s, &DetectorParams::new(Method::C3)).unwrap();
        let v: Vec<f64> = c2.entries[20..].iter().map(|e| e.statistic.unwrap()).collect();
        let expect: f64 = v.iter().map(|c| (c - 1.0).max(0.0)).sum();
        assert!((c3.entries[22].statistic.unwrap() - expect).abs() < 1e-12);
        let first = (v[0] - 1.0).max(0.0);
        assert!((c3.entries[20].statistic.unwrap() - first).abs() < 1e-12);
    }

    #[test]
    fn listed_preset_thresholds() {
        assert_eq!(ThresholdPreset::ListedAlarm.threshold(Method::C2), 0.2);
        assert_eq!(ThresholdPreset::ListedAlarm.threshold(Method::C3), 0.3);
        assert_eq!(DetectorParams::new(Method::Ewma).threshold, 4.0);
        assert_eq!(DetectorParams::new(Method::FStat).threshold, 0.6);
        assert_eq!(DetectorParams::new(Method::C3).threshold, 2.0);
    }

    #[test]
    fn csv_and_summary() {
        let mut counts = vec![0; 20];
        counts.push(5);
        let r = run_detector(&series(counts), &DetectorParams::new(Method::C1)).unwrap();
        let csv = r.to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "date,count,statistic,alarm");
        assert_eq!(lines[1], "2011-05-01,0,,0");
        assert_eq!(lines[21], "2011-05-21,5,inf,1");
        assert_eq!(r.summary_line(), "ehec,C1,2011-05-21,1");
    }

    #[test]
    fn pearson_examples() {
        assert!((pearson_correlation(&[1., 2., 3.], &[2., 4., 6.]).unwrap() - 1.0).abs() < 1e-15);
        assert!((pearson_correlation(&[1., 2., 3.], &[6., 4., 2.]).unwrap() + 1.0).abs() < 1e-15);
        let r = pearson_correlation(&[1., 2., 3., 4.], &[1., 3., 2., 4.]).unwrap();
        assert!((r - 0.8).abs() < 1e-12);
        assert!(pearson_correlation(&[1., 1., 1.], &[1., 2., 3.]).is_err());
        assert!(pearson_correlation(&[1.], &[1.]).is_err());
        assert!(pearson_correlation(&[1., 2.], &[1., 2., 3.]).is_err());
    }

    fn arb_counts() -> impl Strategy<Value = Vec<u64>> {
        prop::collection::vec(0u64..20, 21..60)
    }

    proptest! {
        #[test]
        fn c1_shift_invariant(counts in arb_counts(), c in 0u64..50) {
            let shifted: Vec<u64> = counts.iter().map(|x| x + c).collect();
            let a = run_detector(&series(counts), &DetectorParams::new(Method::C1)).unwrap();
            let b = run_detector(&series(shifted), &DetectorParams::new(Method::C1)).unwrap();
            for (x, y) in a.statistics().zip(b.statistics()) {
                match (x, y) {
                    (Some(x), Some(y)) if x.is_finite() => prop_assert!((x - y).abs() < 1e-9),
                    (x, y) => prop_assert_eq!(x, y),
                }
            }
        }

        #[test]
        fn scale_invariant(counts in arb_counts(), k in 1u64..6) {
            let scaled: Vec<u64> = counts.iter().map(|x| x * k).collect();
            for method in [Method::C1, Method::C2, Method::Ewma, Method::FStat] {
                let a = run_detector(&series(counts.clone()), &DetectorParams::new(method)).unwrap();
                let b = run_detector(&series(scaled.clone()), &DetectorParams::new(method)).unwrap();
                for (x, y) in a.statistics().zip(b.statistics()) {
                    match (x, y) {
                        (Some(x), Some(y)) if x.is_finite() => {
                            prop_assert!((x - y).abs() <= 1e-9 * x.abs().max(1.0), "{} {} {}", method, x, y)
                        }
                        (x, y) => prop_assert_eq!(x, y),
                    }
                }
            }
        }

        #[test]
        fn c1_monotone_in_today(base in prop::collection::vec(0u64..20, 20), x in 0u64..30) {
            prop_assume!(base[..15].iter().any(|&v| v != base[0]));
            let mut lo = base.clone();
            lo.push(x);
            let mut hi = base;
            hi.push(x + 1);
            let a = run_detector(&series(lo), &DetectorParams::new(Method::C1)).unwrap();
            let b = run_detector(&series(hi), &DetectorParams::new(Method::C1)).unwrap();
            let (a, b) = (a.entries[20].statistic.unwrap(), b.entries[20].statistic.unwrap());
            prop_assert!(b > a);
        }

        #[test]
        fn alarm_iff_above_threshold(counts in arb_counts()) {
            for method in Method::ALL {
                let p = DetectorParams::new(method);
                let r = run_detector(&series(counts.clone()), &p).unwrap();
                for e in &r.entries {
                    prop_assert_eq!(e.alarm, e.statistic.is_some_and(|s| s > p.threshold));
                }
            }
        }
    }
}
