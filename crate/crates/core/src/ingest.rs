//! Sensor record ingestion: CSV parsing, fixed-period resampling,
//! chronological splitting and sliding windows for the 1-D predictors.

use std::collections::BTreeMap;

use chrono::{DateTime, SecondsFormat};

use crate::{Error, Result};

/// Column header of the raw reading file.
pub const RECORD_HEADER: &str = "node_id,lat,lon,timestamp,pm25";

/// Two hours, the resampling period used throughout the pipeline.
pub const DEFAULT_PERIOD_SECONDS: i64 = 7200;

/// One raw PM2.5 reading from a sensor node.
#[derive(Debug, Clone, PartialEq)]
pub struct SensorRecord {
    pub node_id: String,
    pub latitude: f64,
    pub longitude: f64,
    /// UTC seconds since the Unix epoch.
    pub timestamp: i64,
    /// Concentration in µg/m³.
    pub pm25: f64,
}

impl SensorRecord {
    pub fn new(node_id: impl Into<String>, latitude: f64, longitude: f64, timestamp: i64, pm25: f64) -> Result<Self> {
        if !latitude.is_finite() || !(-90.0..=90.0).contains(&latitude) {
            return Err(Error::invalid(format!("latitude {latitude} out of range")));
        }
        if !longitude.is_finite() || !(-180.0..=180.0).contains(&longitude) {
            return Err(Error::invalid(format!("longitude {longitude} out of range")));
        }
        if !pm25.is_finite() || pm25 < 0.0 {
            return Err(Error::invalid(format!("pm25 {pm25} must be finite and >= 0")));
        }
        Ok(Self {
            node_id: node_id.into(),
            latitude,
            longitude,
            timestamp,
            pm25,
        })
    }
}

/// Parses reading lines. The header line is optional; line numbers in
/// errors are 1-based physical lines of `text`.
pub fn parse_records(text: &str) -> Result<Vec<SensorRecord>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());

    let mut out = Vec::new();
    for (idx, row) in reader.records().enumerate() {
        let row = row.map_err(|e| Error::Parse {
            line: e.position().map_or(idx + 1, |p| p.line() as usize),
            field: "record",
            message: e.to_string(),
        })?;
        let line = row.position().map_or(idx + 1, |p| p.line() as usize);
        if idx == 0 && row.get(0) == Some("node_id") {
            continue;
        }
        if row.len() != 5 {
            return Err(Error::Parse {
                line,
                field: "record",
                message: format!("expected 5 fields, found {}", row.len()),
            });
        }
        out.push(parse_row(&row, line)?);
    }
    Ok(out)
}

fn parse_row(row: &csv::StringRecord, line: usize) -> Result<SensorRecord> {
    let err = |field: &'static str, message: String| Error::Parse { line, field, message };
    let number = |idx: usize, field: &'static str| -> Result<f64> {
        let raw = &row[idx];
        let v: f64 = raw
            .parse()
            .map_err(|_| err(field, format!("`{raw}` is not a number")))?;
        if !v.is_finite() {
            return Err(err(field, format!("`{raw}` is not finite")));
        }
        Ok(v)
    };

    let node_id = row[0].to_string();
    if node_id.is_empty() {
        return Err(err("node_id", "empty node id".into()));
    }
    let latitude = number(1, "lat")?;
    if !(-90.0..=90.0).contains(&latitude) {
        return Err(err("lat", format!("{latitude} outside [-90, 90]")));
    }
    let longitude = number(2, "lon")?;
    if !(-180.0..=180.0).contains(&longitude) {
        return Err(err("lon", format!("{longitude} outside [-180, 180]")));
    }
    let timestamp = DateTime::parse_from_rfc3339(&row[3])
        .map_err(|e| err("timestamp", format!("`{}`: {e}", &row[3])))?
        .timestamp();
    let pm25 = number(4, "pm25")?;
    if pm25 < 0.0 {
        return Err(err("pm25", format!("negative reading {pm25} rejected")));
    }
    Ok(SensorRecord {
        node_id,
        latitude,
        longitude,
        timestamp,
        pm25,
    })
}

/// Serializes records with the header, in the format `parse_records` reads.
pub fn write_records(records: &[SensorRecord]) -> Result<String> {
    let mut writer = csv::WriterBuilder::new().from_writer(Vec::new());
    writer.write_record(RECORD_HEADER.split(',')).map_err(csv_io)?;
    for r in records {
        let ts = DateTime::from_timestamp(r.timestamp, 0)
            .ok_or_else(|| Error::invalid(format!("timestamp {} out of range", r.timestamp)))?
            .to_rfc3339_opts(SecondsFormat::Secs, true);
        writer
            .write_record([
                r.node_id.clone(),
                r.latitude.to_string(),
                r.longitude.to_string(),
                ts,
                r.pm25.to_string(),
            ])
            .map_err(csv_io)?;
    }
    let bytes = writer.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    String::from_utf8(bytes).map_err(|e| Error::Format(e.to_string()))
}

fn csv_io(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e))
}

/// Groups records by node id, keeping each node's readings in input order.
pub fn group_by_node(records: &[SensorRecord]) -> BTreeMap<String, Vec<SensorRecord>> {
    let mut groups: BTreeMap<String, Vec<SensorRecord>> = BTreeMap::new();
    for r in records {
        groups.entry(r.node_id.clone()).or_default().push(r.clone());
    }
    groups
}

/// A node's readings averaged into fixed-period buckets.
///
/// Bucket `k` covers `[k * period, (k + 1) * period)` in Unix seconds;
/// `values[i]` belongs to bucket `start_bucket + i`, `None` marks a gap.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeSeries {
    pub node_id: String,
    /// (latitude, longitude) in degrees.
    pub position: (f64, f64),
    pub period_seconds: i64,
    pub start_bucket: i64,
    pub values: Vec<Option<f64>>,
}

impl NodeSeries {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// (bucket index, value-or-gap) pairs in increasing bucket order.
    pub fn buckets(&self) -> impl Iterator<Item = (i64, Option<f64>)> + '_ {
        self.values
            .iter()
            .enumerate()
            .map(move |(i, v)| (self.start_bucket + i as i64, *v))
    }

    pub fn end_bucket(&self) -> i64 {
        self.start_bucket + self.values.len() as i64
    }

    /// One record per non-gap bucket, stamped at the bucket start.
    pub fn to_records(&self) -> Vec<SensorRecord> {
        self.buckets()
            .filter_map(|(b, v)| {
                v.map(|pm25| SensorRecord {
                    node_id: self.node_id.clone(),
                    latitude: self.position.0,
                    longitude: self.position.1,
                    timestamp: b * self.period_seconds,
                    pm25,
                })
            })
            .collect()
    }

    /// Re-indexes onto `[start, end)`, padding with gaps.
    pub fn aligned_to(&self, start: i64, end: i64) -> NodeSeries {
        let values = (start..end)
            .map(|b| {
                let i = b - self.start_bucket;
                if i >= 0 && (i as usize) < self.values.len() {
                    self.values[i as usize]
                } else {
                    None
                }
            })
            .collect();
        NodeSeries {
            node_id: self.node_id.clone(),
            position: self.position,
            period_seconds: self.period_seconds,
            start_bucket: start,
            values,
        }
    }
}

/// Averages one node's readings into epoch-anchored buckets of `period`
/// seconds. Empty buckets between the first and last reading become gaps.
pub fn resample_series(records: &[SensorRecord], period: i64) -> Result<NodeSeries> {
    if period <= 0 {
        return Err(Error::invalid(format!("period must be positive, got {period}")));
    }
    let first = records
        .first()
        .ok_or_else(|| Error::invalid("cannot resample an empty record set"))?;
    if let Some(other) = records.iter().find(|r| r.node_id != first.node_id) {
        return Err(Error::invalid(format!(
            "mixed node ids `{}` and `{}` in one series",
            first.node_id, other.node_id
        )));
    }

    let bucket = |r: &SensorRecord| r.timestamp.div_euclid(period);
    let lo = records.iter().map(bucket).min().unwrap_or(0);
    let hi = records.iter().map(bucket).max().unwrap_or(0);
    let len = (hi - lo + 1) as usize;
    let mut sums = vec![0.0; len];
    let mut counts = vec![0usize; len];
    for r in records {
        let i = (bucket(r) - lo) as usize;
        sums[i] += r.pm25;
        counts[i] += 1;
    }
    let values = sums
        .into_iter()
        .zip(counts)
        .map(|(s, n)| (n > 0).then(|| s / n as f64))
        .collect();

    Ok(NodeSeries {
        node_id: first.node_id.clone(),
        position: (first.latitude, first.longitude),
        period_seconds: period,
        start_bucket: lo,
        values,
    })
}

/// Serializes series as `node_id,bucket_index,value` rows, `NA` for gaps.
pub fn write_series(series: &[NodeSeries]) -> String {
    let mut out = String::from("node_id,bucket_index,value\n");
    for s in series {
        for (b, v) in s.buckets() {
            match v {
                Some(v) => out.push_str(&format!("{},{b},{v}\n", s.node_id)),
                None => out.push_str(&format!("{},{b},NA\n", s.node_id)),
            }
        }
    }
    out
}

/// Chronological split: the first `floor(len * train_fraction)` items train,
/// the rest test. Nothing is shuffled.
pub fn split_series<T: Clone>(items: &[T], train_fraction: f64) -> Result<(Vec<T>, Vec<T>)> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::invalid(format!(
            "train fraction must lie in (0, 1), got {train_fraction}"
        )));
    }
    if items.len() < 2 {
        return Err(Error::invalid(format!(
            "need at least 2 items to split, got {}",
            items.len()
        )));
    }
    let cut = (items.len() as f64 * train_fraction).floor() as usize;
    Ok((items[..cut].to_vec(), items[cut..].to_vec()))
}

/// One supervised sample for the 1-D predictors.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowSample {
    pub start_bucket: i64,
    /// `t_in` rows of `channels` values; channel 0 is the target node.
    pub inputs: Vec<Vec<f64>>,
    /// The next `t_out` values of the target node.
    pub target: Vec<f64>,
}

impl WindowSample {
    pub fn channels(&self) -> usize {
        self.inputs.first().map_or(0, Vec::len)
    }
}

/// Number of windows that fit a gap-free series of length `len`.
pub fn window_count(len: usize, t_in: usize, t_out: usize, stride: usize) -> usize {
    let span = t_in + t_out;
    if stride == 0 || len < span {
        0
    } else {
        (len - span) / stride + 1
    }
}

/// Slides a window over `target` (channel 0) and `neighbors` (channels
/// 1..). Windows touching a gap in any channel's input span or the
/// target's forecast span are dropped.
pub fn make_windows(
    target: &NodeSeries,
    neighbors: &[&NodeSeries],
    t_in: usize,
    t_out: usize,
    stride: usize,
) -> Result<Vec<WindowSample>> {
    if t_in == 0 || t_out == 0 || stride == 0 {
        return Err(Error::invalid("t_in, t_out and stride must all be >= 1"));
    }
    for n in neighbors {
        if n.period_seconds != target.period_seconds || n.start_bucket != target.start_bucket || n.len() != target.len()
        {
            return Err(Error::invalid(format!(
                "channel `{}` is not aligned with `{}` (period {}/{}, start {}/{}, len {}/{})",
                n.node_id,
                target.node_id,
                n.period_seconds,
                target.period_seconds,
                n.start_bucket,
                target.start_bucket,
                n.len(),
                target.len()
            )));
        }
    }

    let count = window_count(target.len(), t_in, t_out, stride);
    let mut out = Vec::with_capacity(count);
    'windows: for w in 0..count {
        let s = w * stride;
        let mut inputs = Vec::with_capacity(t_in);
        for t in s..s + t_in {
            let mut row = Vec::with_capacity(1 + neighbors.len());
            for series in std::iter::once(target).chain(neighbors.iter().copied()) {
                match series.values[t] {
                    Some(v) => row.push(v),
                    None => continue 'windows,
                }
            }
            inputs.push(row);
        }
        let mut future = Vec::with_capacity(t_out);
        for t in s + t_in..s + t_in + t_out {
            match target.values[t] {
                Some(v) => future.push(v),
                None => continue 'windows,
            }
        }
        out.push(WindowSample {
            start_bucket: target.start_bucket + s as i64,
            inputs,
            target: future,
        });
    }
    Ok(out)
}

/// Great-circle distance in kilometres.
pub fn haversine_km(a: (f64, f64), b: (f64, f64)) -> f64 {
    const EARTH_RADIUS_KM: f64 = 6371.0088;
    let (lat1, lon1) = (a.0.to_radians(), a.1.to_radians());
    let (lat2, lon2) = (b.0.to_radians(), b.1.to_radians());
    let h = ((lat2 - lat1) / 2.0).sin().powi(2) + lat1.cos() * lat2.cos() * ((lon2 - lon1) / 2.0).sin().powi(2);
    2.0 * EARTH_RADIUS_KM * h.sqrt().min(1.0).asin()
}

/// The `k` nodes closest to `target` by great-circle distance, ties broken
/// by node id. The target itself is never returned.
pub fn nearest_neighbors<'a>(target: &NodeSeries, candidates: &'a [NodeSeries], k: usize) -> Vec<&'a NodeSeries> {
    let mut ranked: Vec<(f64, &NodeSeries)> = candidates
        .iter()
        .filter(|c| c.node_id != target.node_id)
        .map(|c| (haversine_km(target.position, c.position), c))
        .collect();
    ranked.sort_by(|a, b| a.0.total_cmp(&b.0).then_with(|| a.1.node_id.cmp(&b.1.node_id)));
    ranked.into_iter().take(k).map(|(_, c)| c).collect()
}
