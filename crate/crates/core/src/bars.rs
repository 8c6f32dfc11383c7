//! Trade ingestion, filtering and aggregation into fixed wall-clock time bars.
//!
//! All firms built from one [`SessionGrid`] share the same `bar_index` to
//! wall-clock mapping, which is what makes cross-firm feature alignment
//! possible. Bars are half-open intervals `[start, start + width)` on the
//! exchange-local clock.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::str::FromStr;
use std::sync::Arc;

use chrono::{
    DateTime, FixedOffset, NaiveDate, NaiveDateTime, NaiveTime, Offset, TimeDelta, TimeZone,
};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// An instant stored as nanoseconds since the Unix epoch together with the
/// UTC offset that was in force at the exchange when the trade printed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Timestamp {
    nanos: i64,
    offset_secs: i32,
}

impl Timestamp {
    pub fn from_datetime<Tz: TimeZone>(dt: &DateTime<Tz>) -> Self {
        Timestamp {
            nanos: dt
                .timestamp_nanos_opt()
                .expect("timestamp within the representable i64 nanosecond range"),
            offset_secs: dt.offset().fix().local_minus_utc(),
        }
    }

    pub fn nanos(&self) -> i64 {
        self.nanos
    }

    pub fn offset_secs(&self) -> i32 {
        self.offset_secs
    }

    /// Exchange-local wall-clock time.
    pub fn local(&self) -> NaiveDateTime {
        let utc = DateTime::from_timestamp_nanos(self.nanos).naive_utc();
        utc + TimeDelta::seconds(self.offset_secs as i64)
    }

    pub fn to_datetime(&self) -> DateTime<FixedOffset> {
        let offset = FixedOffset::east_opt(self.offset_secs).expect("offset validated at parse");
        DateTime::from_timestamp_nanos(self.nanos).with_timezone(&offset)
    }
}

/// Timezone used to localize timestamps that carry no offset.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum TzSpec {
    Fixed(FixedOffset),
    Named(chrono_tz::Tz),
}

impl FromStr for TzSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s.eq_ignore_ascii_case("utc") || s == "Z" {
            return Ok(TzSpec::Fixed(FixedOffset::east_opt(0).expect("zero offset")));
        }
        if s.starts_with('+') || s.starts_with('-') {
            let digits: String = s[1..].chars().filter(|c| c.is_ascii_digit()).collect();
            if digits.len() == 4 {
                let hours: i32 = digits[..2].parse().map_err(|_| bad_tz(s))?;
                let minutes: i32 = digits[2..].parse().map_err(|_| bad_tz(s))?;
                let sign = if s.starts_with('-') { -1 } else { 1 };
                return FixedOffset::east_opt(sign * (hours * 3600 + minutes * 60))
                    .map(TzSpec::Fixed)
                    .ok_or_else(|| bad_tz(s));
            }
            return Err(bad_tz(s));
        }
        s.parse::<chrono_tz::Tz>().map(TzSpec::Named).map_err(|_| bad_tz(s))
    }
}

fn bad_tz(s: &str) -> Error {
    Error::config(format!("unrecognized timezone '{s}'"))
}

impl TzSpec {
    fn localize(&self, naive: NaiveDateTime) -> Option<Timestamp> {
        match self {
            TzSpec::Fixed(off) => off
                .from_local_datetime(&naive)
                .earliest()
                .map(|dt| Timestamp::from_datetime(&dt)),
            TzSpec::Named(tz) => tz
                .from_local_datetime(&naive)
                .earliest()
                .map(|dt| Timestamp::from_datetime(&dt)),
        }
    }
}

/// Parses an ISO-8601 timestamp with offset, or a naive
/// `YYYY-MM-DD HH:MM:SS[.ffffff]` timestamp localized with `tz`.
pub fn parse_timestamp(s: &str, tz: Option<&TzSpec>) -> std::result::Result<Timestamp, String> {
    let s = s.trim();
    if let Ok(dt) = DateTime::parse_from_rfc3339(s) {
        return Ok(Timestamp::from_datetime(&dt));
    }
    for fmt in ["%Y-%m-%d %H:%M:%S%.f%:z", "%Y-%m-%d %H:%M:%S%.f%z"] {
        if let Ok(dt) = DateTime::parse_from_str(s, fmt) {
            return Ok(Timestamp::from_datetime(&dt));
        }
    }
    let naive = ["%Y-%m-%d %H:%M:%S%.f", "%Y-%m-%dT%H:%M:%S%.f"]
        .iter()
        .find_map(|fmt| NaiveDateTime::parse_from_str(s, fmt).ok())
        .ok_or_else(|| format!("unparseable timestamp '{s}'"))?;
    let tz = tz.ok_or_else(|| {
        format!("timestamp '{s}' has no UTC offset and no timezone was supplied")
    })?;
    tz.localize(naive)
        .ok_or_else(|| format!("timestamp '{s}' does not exist in the supplied timezone"))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Trade {
    pub symbol: String,
    pub timestamp: Timestamp,
    pub price: f64,
    pub volume: f64,
    pub correction: Option<String>,
    pub suffix: Option<String>,
}

/// Reads the trade CSV: `symbol,timestamp,price,volume[,corr,suffix]`.
///
/// Blank `corr` or `suffix` cells are treated as absent.
pub fn read_trades<R: Read>(reader: R, tz: Option<&TzSpec>) -> Result<Vec<Trade>> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let names: Vec<&str> = headers.iter().collect();
    let required = ["symbol", "timestamp", "price", "volume"];
    if names.len() < 4 || names[..4] != required {
        return Err(Error::Ingest {
            line: 1,
            message: format!("expected header starting with {}", required.join(",")),
        });
    }
    let corr_col = names.iter().position(|&n| n == "corr");
    let suffix_col = names.iter().position(|&n| n == "suffix");

    let mut trades = Vec::new();
    for record in rdr.records() {
        let record = record?;
        let line = record.position().map(|p| p.line() as usize).unwrap_or(0);
        let field = |i: usize| record.get(i).unwrap_or("");
        let ingest = |message: String| Error::Ingest { line, message };
        let timestamp = parse_timestamp(field(1), tz).map_err(ingest)?;
        let price = field(2)
            .parse::<f64>()
            .map_err(|_| ingest(format!("invalid price '{}'", field(2))))?;
        let volume = field(3)
            .parse::<f64>()
            .map_err(|_| ingest(format!("invalid volume '{}'", field(3))))?;
        let optional = |col: Option<usize>| {
            col.map(field).filter(|v| !v.is_empty()).map(str::to_owned)
        };
        trades.push(Trade {
            symbol: field(0).to_owned(),
            timestamp,
            price,
            volume,
            correction: optional(corr_col),
            suffix: optional(suffix_col),
        });
    }
    Ok(trades)
}

/// Writes trades in the ingestion schema with ISO-8601 offset timestamps.
pub fn write_trades<W: Write>(writer: W, trades: &[Trade]) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(writer);
    wtr.write_record(["symbol", "timestamp", "price", "volume", "corr", "suffix"])?;
    for t in trades {
        wtr.write_record([
            t.symbol.as_str(),
            &t.timestamp.to_datetime().format("%Y-%m-%dT%H:%M:%S%.6f%:z").to_string(),
            &t.price.to_string(),
            &t.volume.to_string(),
            t.correction.as_deref().unwrap_or(""),
            t.suffix.as_deref().unwrap_or(""),
        ])?;
    }
    wtr.flush()?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FilterRules {
    /// Drop trades with price or volume that is not strictly positive.
    pub positive_price_volume: bool,
    /// Drop trades outside `[session_open, session_close)`.
    pub market_hours: bool,
    /// Keep only trades with a blank symbol suffix.
    pub common_shares: bool,
    /// Keep only trades whose correction indicator is `00`.
    pub uncorrected: bool,
    pub session_open: NaiveTime,
    pub session_close: NaiveTime,
}

impl Default for FilterRules {
    fn default() -> Self {
        FilterRules {
            positive_price_volume: true,
            market_hours: true,
            common_shares: true,
            uncorrected: true,
            session_open: NaiveTime::from_hms_opt(9, 30, 0).expect("valid time"),
            session_close: NaiveTime::from_hms_opt(16, 0, 0).expect("valid time"),
        }
    }
}

/// Number of trades removed by each rule. A trade is charged to the first
/// rule (in declaration order) that rejects it.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FilterReport {
    pub input: usize,
    pub kept: usize,
    pub nonpositive: usize,
    pub outside_hours: usize,
    pub suffix: usize,
    pub correction: usize,
}

impl FilterReport {
    pub fn dropped(&self) -> usize {
        self.input - self.kept
    }

    pub fn merge(&mut self, other: &FilterReport) {
        self.input += other.input;
        self.kept += other.kept;
        self.nonpositive += other.nonpositive;
        self.outside_hours += other.outside_hours;
        self.suffix += other.suffix;
        self.correction += other.correction;
    }
}

pub fn filter_trades(
    raw: impl IntoIterator<Item = Trade>,
    rules: &FilterRules,
) -> (Vec<Trade>, FilterReport) {
    let mut report = FilterReport::default();
    let mut kept = Vec::new();
    for trade in raw {
        report.input += 1;
        if rules.positive_price_volume && !(trade.price > 0.0 && trade.volume > 0.0) {
            report.nonpositive += 1;
            continue;
        }
        if rules.market_hours {
            let time = trade.timestamp.local().time();
            if time < rules.session_open || time >= rules.session_close {
                report.outside_hours += 1;
                continue;
            }
        }
        if rules.common_shares && trade.suffix.is_some() {
            report.suffix += 1;
            continue;
        }
        if rules.uncorrected && trade.correction.as_deref().is_some_and(|c| c != "00") {
            report.correction += 1;
            continue;
        }
        kept.push(trade);
    }
    report.kept = kept.len();
    (kept, report)
}

/// Splits trades by symbol; each group is stably sorted by timestamp so
/// equal-timestamp trades keep their input order.
pub fn group_by_symbol(trades: impl IntoIterator<Item = Trade>) -> BTreeMap<String, Vec<Trade>> {
    let mut groups: BTreeMap<String, Vec<Trade>> = BTreeMap::new();
    for t in trades {
        groups.entry(t.symbol.clone()).or_default().push(t);
    }
    for group in groups.values_mut() {
        group.sort_by_key(|t| t.timestamp);
    }
    groups
}

/// The shared calendar of bar slots.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SessionGrid {
    session_open: NaiveTime,
    session_close: NaiveTime,
    bar_seconds: i64,
    drop_first_bar: bool,
    trading_days: Vec<NaiveDate>,
}

impl SessionGrid {
    pub fn new(
        session_open: NaiveTime,
        session_close: NaiveTime,
        bar_width: TimeDelta,
        drop_first_bar: bool,
        trading_days: impl IntoIterator<Item = NaiveDate>,
    ) -> Result<Self> {
        let bar_seconds = bar_width.num_seconds();
        let session = (session_close - session_open).num_seconds();
        if bar_seconds <= 0 || session <= 0 || session % bar_seconds != 0 {
            return Err(Error::config(format!(
                "session {session_open}-{session_close} is not a positive multiple of the {bar_seconds}s bar width"
            )));
        }
        let raw_slots = session / bar_seconds;
        if drop_first_bar && raw_slots < 2 {
            return Err(Error::config("dropping the first bar would leave no slots"));
        }
        let mut days: Vec<NaiveDate> = trading_days.into_iter().collect();
        days.sort();
        days.dedup();
        Ok(SessionGrid { session_open, session_close, bar_seconds, drop_first_bar, trading_days: days })
    }

    /// 09:30-16:00 in 30-minute bars with the opening bar removed.
    pub fn regular(trading_days: impl IntoIterator<Item = NaiveDate>) -> Self {
        SessionGrid::new(
            NaiveTime::from_hms_opt(9, 30, 0).expect("valid time"),
            NaiveTime::from_hms_opt(16, 0, 0).expect("valid time"),
            TimeDelta::minutes(30),
            true,
            trading_days,
        )
        .expect("regular session is a valid grid")
    }

    /// Same session layout over a different set of days.
    pub fn with_days(&self, trading_days: impl IntoIterator<Item = NaiveDate>) -> Self {
        let mut days: Vec<NaiveDate> = trading_days.into_iter().collect();
        days.sort();
        days.dedup();
        SessionGrid { trading_days: days, ..self.clone() }
    }

    pub fn session_open(&self) -> NaiveTime {
        self.session_open
    }

    pub fn session_close(&self) -> NaiveTime {
        self.session_close
    }

    pub fn bar_width(&self) -> TimeDelta {
        TimeDelta::seconds(self.bar_seconds)
    }

    pub fn drop_first_bar(&self) -> bool {
        self.drop_first_bar
    }

    pub fn trading_days(&self) -> &[NaiveDate] {
        &self.trading_days
    }

    pub fn raw_slots_per_day(&self) -> usize {
        ((self.session_close - self.session_open).num_seconds() / self.bar_seconds) as usize
    }

    pub fn slots_per_day(&self) -> usize {
        self.raw_slots_per_day() - usize::from(self.drop_first_bar)
    }

    pub fn len(&self) -> usize {
        self.trading_days.len() * self.slots_per_day()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn first_kept_slot(&self) -> usize {
        usize::from(self.drop_first_bar)
    }

    /// Wall-clock `[start, end)` of a bar.
    pub fn interval(&self, bar_index: usize) -> (NaiveDateTime, NaiveDateTime) {
        let per_day = self.slots_per_day();
        let date = self.trading_days[bar_index / per_day];
        let raw_slot = bar_index % per_day + self.first_kept_slot();
        let start = date.and_time(self.session_open) + TimeDelta::seconds(raw_slot as i64 * self.bar_seconds);
        (start, start + self.bar_width())
    }

    pub fn day_index(&self, date: NaiveDate) -> Option<usize> {
        self.trading_days.binary_search(&date).ok()
    }

    /// Bar index for a local wall-clock instant, `None` when it falls in the
    /// removed opening slot.
    pub fn locate(&self, local: NaiveDateTime) -> Result<Option<usize>> {
        let date = local.date();
        let day = self
            .day_index(date)
            .ok_or_else(|| Error::data(format!("trade on {date} falls outside the trading calendar")))?;
        let time = local.time();
        if time < self.session_open || time >= self.session_close {
            return Err(Error::data(format!("trade at {local} is outside the session")));
        }
        let offset = (time - self.session_open).num_nanoseconds().expect("within a day");
        let raw_slot = (offset / (self.bar_seconds * 1_000_000_000)) as usize;
        if raw_slot < self.first_kept_slot() {
            return Ok(None);
        }
        Ok(Some(day * self.slots_per_day() + raw_slot - self.first_kept_slot()))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TimeBar {
    pub bar_index: usize,
    pub date: NaiveDate,
    pub slot_start: NaiveTime,
    /// `None` for an empty bar that has not been filled.
    pub open: Option<f64>,
    pub close: Option<f64>,
    pub volume: f64,
    pub dollar_volume: f64,
    pub trade_count: u32,
}

impl TimeBar {
    pub fn is_empty(&self) -> bool {
        self.trade_count == 0
    }
}

#[derive(Clone, Debug)]
pub struct BarSeries {
    pub symbol: String,
    pub grid: Arc<SessionGrid>,
    pub bars: Vec<TimeBar>,
}

impl BarSeries {
    pub fn len(&self) -> usize {
        self.bars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bars.is_empty()
    }

    pub fn closes(&self) -> Vec<Option<f64>> {
        self.bars.iter().map(|b| b.close).collect()
    }

    pub fn volumes(&self) -> Vec<f64> {
        self.bars.iter().map(|b| b.volume).collect()
    }

    pub fn dollar_volumes(&self) -> Vec<f64> {
        self.bars.iter().map(|b| b.dollar_volume).collect()
    }

    /// Slot start of every bar, local clock.
    pub fn timestamps(&self) -> Vec<NaiveDateTime> {
        self.bars.iter().map(|b| b.date.and_time(b.slot_start)).collect()
    }
}

fn empty_bars(grid: &SessionGrid) -> Vec<TimeBar> {
    (0..grid.len())
        .map(|bar_index| {
            let (start, _) = grid.interval(bar_index);
            TimeBar {
                bar_index,
                date: start.date(),
                slot_start: start.time(),
                open: None,
                close: None,
                volume: 0.0,
                dollar_volume: 0.0,
                trade_count: 0,
            }
        })
        .collect()
}

/// Aggregates one symbol's time-sorted trades onto `grid`. Trades in the
/// removed opening slot are discarded.
pub fn aggregate(symbol: &str, trades: &[Trade], grid: &Arc<SessionGrid>) -> Result<BarSeries> {
    let mut bars = empty_bars(grid);
    let mut previous: Option<Timestamp> = None;
    for trade in trades {
        if previous.is_some_and(|p| trade.timestamp < p) {
            return Err(Error::data(format!("trades for {symbol} are not sorted by timestamp")));
        }
        previous = Some(trade.timestamp);
        let Some(index) = grid.locate(trade.timestamp.local())? else {
            continue;
        };
        let bar = &mut bars[index];
        if bar.open.is_none() {
            bar.open = Some(trade.price);
        }
        bar.close = Some(trade.price);
        bar.volume += trade.volume;
        bar.dollar_volume += trade.price * trade.volume;
        bar.trade_count += 1;
    }
    Ok(BarSeries { symbol: symbol.to_owned(), grid: Arc::clone(grid), bars })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FillPolicy {
    None,
    #[default]
    ForwardFillClose,
}

/// Applies the empty-bar policy. Forward-filled bars carry the previous
/// close as open and close with zero volume; leading empties stay missing.
pub fn fill_policy(series: &BarSeries, policy: FillPolicy) -> BarSeries {
    let mut out = series.clone();
    if policy == FillPolicy::ForwardFillClose {
        let mut last_close = None;
        for bar in &mut out.bars {
            if bar.is_empty() {
                bar.open = last_close;
                bar.close = last_close;
            } else {
                last_close = bar.close;
            }
        }
    }
    out
}

/// Liquidity screen: share of bars with fewer than `min_trades` trades.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Screening {
    pub sparse_fraction: f64,
    pub passes: bool,
}

/// A firm fails when the sparse share reaches `max_sparse_fraction`.
pub fn screen(series: &BarSeries, min_trades: u32, max_sparse_fraction: f64) -> Screening {
    let sparse = series.bars.iter().filter(|b| b.trade_count < min_trades).count();
    let sparse_fraction = if series.is_empty() { 1.0 } else { sparse as f64 / series.len() as f64 };
    Screening { sparse_fraction, passes: sparse_fraction < max_sparse_fraction }
}

fn opt_cell(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub const BARS_HEADER: [&str; 9] = [
    "symbol",
    "date",
    "slot_start",
    "open",
    "close",
    "volume",
    "dollar_volume",
    "trade_count",
    "is_empty",
];

pub fn write_bars<W: Write>(writer: W, series: &[BarSeries]) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(writer);
    wtr.write_record(BARS_HEADER)?;
    for s in series {
        for b in &s.bars {
            wtr.write_record([
                s.symbol.clone(),
                b.date.to_string(),
                b.slot_start.format("%H:%M").to_string(),
                opt_cell(b.open),
                opt_cell(b.close),
                b.volume.to_string(),
                b.dollar_volume.to_string(),
                b.trade_count.to_string(),
                b.is_empty().to_string(),
            ])?;
        }
    }
    wtr.flush()?;
    Ok(())
}

/// Reads a bars CSV back onto a grid shaped like `template`, whose days are
/// replaced by the dates present in the file.
pub fn read_bars<R: Read>(reader: R, template: &SessionGrid) -> Result<Vec<BarSeries>> {
    let mut rdr = csv::Reader::from_reader(reader);
    let mut rows: BTreeMap<String, Vec<(usize, TimeBar)>> = BTreeMap::new();
    let mut days = Vec::new();
    let mut parsed = Vec::new();
    for record in rdr.records() {
        let record = record?;
        let line = record.position().map(|p| p.line() as usize).unwrap_or(0);
        let ingest = |message: String| Error::Ingest { line, message };
        let get = |i: usize| record.get(i).unwrap_or("");
        let num = |i: usize| -> Result<f64> {
            get(i).parse::<f64>().map_err(|_| ingest(format!("invalid number '{}'", get(i))))
        };
        let opt = |i: usize| -> Result<Option<f64>> {
            if get(i).is_empty() {
                Ok(None)
            } else {
                num(i).map(Some)
            }
        };
        let date = NaiveDate::parse_from_str(get(1), "%Y-%m-%d")
            .map_err(|_| ingest(format!("invalid date '{}'", get(1))))?;
        let slot = NaiveTime::parse_from_str(get(2), "%H:%M")
            .map_err(|_| ingest(format!("invalid slot '{}'", get(2))))?;
        days.push(date);
        parsed.push((
            get(0).to_owned(),
            line,
            TimeBar {
                bar_index: 0,
                date,
                slot_start: slot,
                open: opt(3)?,
                close: opt(4)?,
                volume: num(5)?,
                dollar_volume: num(6)?,
                trade_count: get(7)
                    .parse()
                    .map_err(|_| ingest(format!("invalid trade count '{}'", get(7))))?,
            },
        ));
    }
    let grid = Arc::new(template.with_days(days));
    for (symbol, line, mut bar) in parsed {
        let index = grid
            .locate(bar.date.and_time(bar.slot_start))
            .map_err(|e| Error::Ingest { line, message: e.to_string() })?
            .ok_or_else(|| Error::Ingest { line, message: "bar lies in the removed opening slot".into() })?;
        bar.bar_index = index;
        rows.entry(symbol).or_default().push((index, bar));
    }
    let mut out = Vec::new();
    for (symbol, entries) in rows {
        let mut bars = empty_bars(&grid);
        for (index, bar) in entries {
            bars[index] = bar;
        }
        out.push(BarSeries { symbol, grid: Arc::clone(&grid), bars });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ny() -> TzSpec {
        "America/New_York".parse().unwrap()
    }

    fn trade(ts: &str, price: f64, volume: f64) -> Trade {
        Trade {
            symbol: "AAA".into(),
            timestamp: parse_timestamp(ts, Some(&ny())).unwrap(),
            price,
            volume,
            correction: None,
            suffix: None,
        }
    }

    fn day() -> NaiveDate {
        NaiveDate::from_ymd_opt(2020, 3, 2).unwrap()
    }

    #[test]
    fn regular_grid_has_twelve_slots() {
        let grid = SessionGrid::regular([day()]);
        assert_eq!(grid.raw_slots_per_day(), 13);
        assert_eq!(grid.slots_per_day(), 12);
        let (start, end) = grid.interval(0);
        assert_eq!(start.time(), NaiveTime::from_hms_opt(10, 0, 0).unwrap());
        assert_eq!(end.time(), NaiveTime::from_hms_opt(10, 30, 0).unwrap());
        let (_, last_end) = grid.interval(11);
        assert_eq!(last_end.time(), NaiveTime::from_hms_opt(16, 0, 0).unwrap());
    }

    #[test]
    fn grid_rejects_uneven_session() {
        let err = SessionGrid::new(
            NaiveTime::from_hms_opt(9, 30, 0).unwrap(),
            NaiveTime::from_hms_opt(16, 10, 0).unwrap(),
            TimeDelta::minutes(30),
            true,
            [day()],
        );
        assert!(err.is_err());
    }

    #[test]
    fn timestamps_parse_with_offset_or_tz() {
        let a = parse_timestamp("2020-03-02T10:05:00-05:00", None).unwrap();
        let b = parse_timestamp("2020-03-02 10:05:00.000000", Some(&ny())).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.local().time(), NaiveTime::from_hms_opt(10, 5, 0).unwrap());
        assert!(parse_timestamp("2020-03-02 10:05:00", None).is_err());
        assert!(parse_timestamp("yesterday", Some(&ny())).is_err());
        let fixed: TzSpec = "-05:00".parse().unwrap();
        assert_eq!(parse_timestamp("2020-03-02 10:05:00", Some(&fixed)).unwrap(), a);
    }

    #[test]
    fn dst_keeps_local_clock() {
        // First trading day after the spring-forward switch.
        let ts = parse_timestamp("2020-03-09 10:05:00", Some(&ny())).unwrap();
        assert_eq!(ts.offset_secs(), -4 * 3600);
        assert_eq!(ts.local().time(), NaiveTime::from_hms_opt(10, 5, 0).unwrap());
    }

    #[test]
    fn filter_drops_negative_volume() {
        let (kept, report) = filter_trades([trade("2020-03-02 10:00:00", 10.0, -100.0)], &FilterRules::default());
        assert!(kept.is_empty());
        assert_eq!(report.nonpositive, 1);
    }

    #[test]
    fn filter_market_hours_inclusive_open_exclusive_close() {
        let trades = vec![
            trade("2020-03-02 09:29:59", 10.0, 1.0),
            trade("2020-03-02 09:30:00", 10.0, 1.0),
            trade("2020-03-02 15:59:59", 10.0, 1.0),
            trade("2020-03-02 16:00:00", 10.0, 1.0),
        ];
        let (kept, report) = filter_trades(trades, &FilterRules::default());
        let times: Vec<String> = kept.iter().map(|t| t.timestamp.local().time().to_string()).collect();
        assert_eq!(times, ["09:30:00", "15:59:59"]);
        assert_eq!(report.outside_hours, 2);
    }

    #[test]
    fn filter_rules_can_be_disabled() {
        let mut t = trade("2020-03-02 08:00:00", -1.0, 1.0);
        t.suffix = Some("PR".into());
        let rules = FilterRules {
            positive_price_volume: false,
            market_hours: false,
            common_shares: false,
            uncorrected: false,
            ..FilterRules::default()
        };
        let (kept, report) = filter_trades([t], &rules);
        assert_eq!(kept.len(), 1);
        assert_eq!(report.dropped(), 0);
    }

    #[test]
    fn ingest_reports_line_numbers() {
        let csv = "symbol,timestamp,price,volume\nAAA,2020-03-02T10:00:00-05:00,10,5\nAAA,not-a-time,10,5\n";
        match read_trades(csv.as_bytes(), None) {
            Err(Error::Ingest { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected ingest error, got {other:?}"),
        }
        let bad_header = "sym,ts,p,v\n";
        assert!(matches!(read_trades(bad_header.as_bytes(), None), Err(Error::Ingest { line: 1, .. })));
    }

    #[test]
    fn singleton_trade_bar() {
        let grid = Arc::new(SessionGrid::regular([day()]));
        let series = aggregate("AAA", &[trade("2020-03-02 10:05:00", 10.0, 5.0)], &grid).unwrap();
        let bar = &series.bars[0];
        assert_eq!(bar.slot_start, NaiveTime::from_hms_opt(10, 0, 0).unwrap());
        assert_eq!((bar.open, bar.close), (Some(10.0), Some(10.0)));
        assert_eq!((bar.volume, bar.dollar_volume, bar.trade_count), (5.0, 50.0, 1));
        assert!(series.bars[1..].iter().all(TimeBar::is_empty));
    }

    #[test]
    fn slot_boundary_is_half_open() {
        let grid = Arc::new(SessionGrid::regular([day()]));
        let series = aggregate("AAA", &[trade("2020-03-02 10:30:00", 10.0, 1.0)], &grid).unwrap();
        assert!(series.bars[0].is_empty());
        assert_eq!(series.bars[1].trade_count, 1);
    }

    #[test]
    fn opening_slot_is_excised() {
        let grid = Arc::new(SessionGrid::regular([day()]));
        let series = aggregate("AAA", &[trade("2020-03-02 09:45:00", 10.0, 1.0)], &grid).unwrap();
        assert_eq!(series.len(), 12);
        assert!(series.bars.iter().all(TimeBar::is_empty));
    }

    #[test]
    fn trade_off_calendar_names_the_date() {
        let grid = Arc::new(SessionGrid::regular([day()]));
        let err = aggregate("AAA", &[trade("2020-03-03 10:05:00", 10.0, 1.0)], &grid).unwrap_err();
        assert!(err.to_string().contains("2020-03-03"), "{err}");
    }

    #[test]
    fn forward_fill_carries_close() {
        let grid = Arc::new(SessionGrid::regular([day()]));
        let series = aggregate(
            "AAA",
            &[trade("2020-03-02 10:35:00", 9.0, 2.0), trade("2020-03-02 11:10:00", 8.0, 3.0)],
            &grid,
        )
        .unwrap();
        let filled = fill_policy(&series, FillPolicy::ForwardFillClose);
        let closes: Vec<Option<f64>> = filled.bars[..5].iter().map(|b| b.close).collect();
        assert_eq!(closes, [None, Some(9.0), Some(8.0), Some(8.0), Some(8.0)]);
        let volumes: Vec<f64> = filled.bars[..5].iter().map(|b| b.volume).collect();
        assert_eq!(volumes, [0.0, 2.0, 3.0, 0.0, 0.0]);
        let untouched = fill_policy(&series, FillPolicy::None);
        assert_eq!(untouched.bars[3].close, None);
    }

    #[test]
    fn screening_threshold() {
        let grid = Arc::new(SessionGrid::regular([day()]));
        let trades: Vec<Trade> = (0..12)
            .flat_map(|slot| {
                let n = if slot < 3 { 1 } else { 5 };
                (0..n).map(move |k| (slot, k))
            })
            .map(|(slot, k)| {
                let minute = 30 * slot + k;
                let ts = format!("2020-03-02 {:02}:{:02}:00", 10 + minute / 60, minute % 60);
                trade(&ts, 10.0, 1.0)
            })
            .collect();
        let series = aggregate("AAA", &trades, &grid).unwrap();
        let s = screen(&series, 5, 0.25);
        assert_eq!(s.sparse_fraction, 0.25);
        assert!(!s.passes);
        assert!(screen(&series, 1, 0.25).passes);
    }

    #[test]
    fn bars_csv_round_trip() {
        let grid = Arc::new(SessionGrid::regular([day()]));
        let series = aggregate("AAA", &[trade("2020-03-02 11:05:00", 10.5, 5.0)], &grid).unwrap();
        let mut buf = Vec::new();
        write_bars(&mut buf, std::slice::from_ref(&series)).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("symbol,date,slot_start,open,close,volume,dollar_volume,trade_count,is_empty\n"));
        assert!(text.contains("AAA,2020-03-02,11:00,10.5,10.5,5,52.5,1,false"));
        let back = read_bars(buf.as_slice(), &grid).unwrap();
        assert_eq!(back[0].bars, series.bars);
    }
}
