//! Episode data model: irregularly sampled channels, timestamped notes, and
//! binary labels, plus event-file ingestion, hours-from-admission windowing,
//! and per-channel normalization.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::Real;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("line {line}: duplicate event (id={id}, channel={channel}, time={time})")]
    DuplicateEvent { line: usize, id: String, channel: String, time: Real },
    #[error("no records")]
    NoRecords,
    #[error("record {0} has no LABEL line")]
    MissingLabel(String),
    #[error("negative hours {0} rejected")]
    NegativeHours(Real),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// One irregularly sampled channel: observation times (hours from admission,
/// strictly increasing) and values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelSeries {
    times: Vec<Real>,
    values: Vec<Real>,
}

impl ChannelSeries {
    pub fn empty() -> Self {
        Self { times: vec![], values: vec![] }
    }

    /// Build from (time, value) pairs in any order; sorts by time and drops
    /// exact duplicate timestamps (keeping the first).
    pub fn from_events(mut events: Vec<(Real, Real)>) -> Self {
        events.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
        let mut times = Vec::with_capacity(events.len());
        let mut values = Vec::with_capacity(events.len());
        for (t, v) in events {
            if times.last() == Some(&t) {
                continue;
            }
            times.push(t);
            values.push(v);
        }
        Self { times, values }
    }

    pub fn times(&self) -> &[Real] {
        &self.times
    }

    pub fn values(&self) -> &[Real] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    /// Keep observations with time <= `hours`.
    pub fn truncated(&self, hours: Real) -> Self {
        let cut = self.times.partition_point(|&t| t <= hours);
        Self { times: self.times[..cut].to_vec(), values: self.values[..cut].to_vec() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum NotePrecision {
    ExactTime,
    DateOnly,
}

/// A clinical note with its availability rule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Note {
    pub text: String,
    pub timestamp: Real,
    pub precision: NotePrecision,
}

impl Note {
    /// Hour from admission at which the note becomes available: the stamped
    /// time for exact-time notes, the end of the stamped day otherwise.
    pub fn available_at(&self) -> Real {
        match self.precision {
            NotePrecision::ExactTime => self.timestamp,
            NotePrecision::DateOnly => 24.0 * ((self.timestamp / 24.0).floor() + 1.0),
        }
    }
}

/// A full data case: channels, notes, admission-time text, binary label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub id: String,
    pub channels: Vec<ChannelSeries>,
    pub notes: Vec<Note>,
    pub admission_text: String,
    pub label: u8,
}

impl EpisodeRecord {
    pub fn observation_count(&self) -> usize {
        self.channels.iter().map(|c| c.len()).sum()
    }

    /// Pooled document for text featurization: admission text first, then
    /// notes ordered by timestamp.
    pub fn pooled_document(&self) -> String {
        let mut parts: Vec<&str> = vec![self.admission_text.as_str()];
        let mut notes: Vec<&Note> = self.notes.iter().collect();
        notes.sort_by(|a, b| a.timestamp.partial_cmp(&b.timestamp).unwrap());
        for n in &notes {
            parts.push(&n.text);
        }
        parts.retain(|p| !p.is_empty());
        parts.join(" ")
    }
}

/// An immutable collection of episodes sharing one channel layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub channel_names: Vec<String>,
    pub records: Vec<EpisodeRecord>,
}

impl Dataset {
    pub fn n(&self) -> usize {
        self.records.len()
    }

    pub fn d(&self) -> usize {
        self.channel_names.len()
    }

    pub fn ids(&self) -> Vec<String> {
        self.records.iter().map(|r| r.id.clone()).collect()
    }

    pub fn subset(&self, ids: &BTreeSet<String>) -> Dataset {
        Dataset {
            channel_names: self.channel_names.clone(),
            records: self.records.iter().filter(|r| ids.contains(&r.id)).cloned().collect(),
        }
    }

    pub fn has_both_classes(&self) -> bool {
        let pos = self.records.iter().any(|r| r.label == 1);
        let neg = self.records.iter().any(|r| r.label == 0);
        pos && neg
    }
}

/// Truncate every channel to `hours` and keep a note iff it is available by
/// then. Admission text and labels are untouched.
pub fn apply_window(dataset: &Dataset, hours: Real) -> Result<Dataset, DataError> {
    if hours < 0.0 {
        return Err(DataError::NegativeHours(hours));
    }
    let records = dataset
        .records
        .iter()
        .map(|r| EpisodeRecord {
            id: r.id.clone(),
            channels: r.channels.iter().map(|c| c.truncated(hours)).collect(),
            notes: r.notes.iter().filter(|n| n.available_at() <= hours).cloned().collect(),
            admission_text: r.admission_text.clone(),
            label: r.label,
        })
        .collect();
    Ok(Dataset { channel_names: dataset.channel_names.clone(), records })
}

/// Per-channel (mean, std) fitted on a training split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub per_channel: Vec<(Real, Real)>,
}

const STD_FLOOR: Real = 1e-6;

pub fn fit_normalizer(train: &Dataset) -> Normalizer {
    let d = train.d();
    let mut per_channel = Vec::with_capacity(d);
    for ch in 0..d {
        let mut count = 0usize;
        let mut sum = 0.0;
        let mut sum_sq = 0.0;
        for r in &train.records {
            for &v in r.channels[ch].values() {
                count += 1;
                sum += v;
                sum_sq += v * v;
            }
        }
        if count == 0 {
            per_channel.push((0.0, 1.0));
        } else {
            let mean = sum / count as Real;
            let var = (sum_sq / count as Real - mean * mean).max(0.0);
            per_channel.push((mean, var.sqrt().max(STD_FLOOR)));
        }
    }
    Normalizer { per_channel }
}

pub fn normalize(dataset: &Dataset, normalizer: &Normalizer) -> Dataset {
    let records = dataset
        .records
        .iter()
        .map(|r| EpisodeRecord {
            id: r.id.clone(),
            channels: r
                .channels
                .iter()
                .zip(&normalizer.per_channel)
                .map(|(c, &(mean, std))| ChannelSeries {
                    times: c.times.clone(),
                    values: c.values.iter().map(|v| (v - mean) / std).collect(),
                })
                .collect(),
            notes: r.notes.clone(),
            admission_text: r.admission_text.clone(),
            label: r.label,
        })
        .collect();
    Dataset { channel_names: dataset.channel_names.clone(), records }
}

#[derive(Default)]
struct RecordBuilder {
    events: BTreeMap<String, Vec<(Real, Real)>>,
    seen: BTreeSet<(String, u64)>,
    notes: Vec<Note>,
    admission_text: String,
    label: Option<u8>,
}

fn parse_float(s: &str, line: usize, what: &str) -> Result<Real, DataError> {
    s.trim().parse::<Real>().map_err(|_| DataError::Parse {
        line,
        msg: format!("invalid {what} {s:?}"),
    })
}

/// Parse the line-oriented event format:
///
/// ```text
/// TS|<id>|<channel>|<hours>|<value>
/// NOTE|<id>|<hours>|<exact|date>|<text...>
/// ADMIT|<id>|<text...>
/// LABEL|<id>|<0|1>
/// ```
pub fn load_records_from<R: BufRead>(reader: R) -> Result<Dataset, DataError> {
    let mut builders: BTreeMap<String, RecordBuilder> = BTreeMap::new();
    let mut order: Vec<String> = Vec::new();
    let mut channel_names: BTreeSet<String> = BTreeSet::new();

    fn builder_for<'a>(
        builders: &'a mut BTreeMap<String, RecordBuilder>,
        order: &mut Vec<String>,
        id: &str,
    ) -> &'a mut RecordBuilder {
        if !builders.contains_key(id) {
            builders.insert(id.to_string(), RecordBuilder::default());
            order.push(id.to_string());
        }
        builders.get_mut(id).unwrap()
    }

    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line?;
        let trimmed = line.trim_end();
        if trimmed.is_empty() {
            continue;
        }
        let kind = trimmed.split('|').next().unwrap();
        match kind {
            "TS" => {
                let parts: Vec<&str> = trimmed.splitn(5, '|').collect();
                if parts.len() != 5 {
                    return Err(DataError::Parse { line: line_no, msg: "TS needs 5 fields".into() });
                }
                let (id, channel) = (parts[1], parts[2]);
                let time = parse_float(parts[3], line_no, "time")?;
                let value = parse_float(parts[4], line_no, "value")?;
                if time < 0.0 {
                    return Err(DataError::Parse { line: line_no, msg: format!("negative time {time}") });
                }
                channel_names.insert(channel.to_string());
                let b = builder_for(&mut builders, &mut order, id);
                let key = (channel.to_string(), time.to_bits());
                if !b.seen.insert(key) {
                    return Err(DataError::DuplicateEvent {
                        line: line_no,
                        id: id.to_string(),
                        channel: channel.to_string(),
                        time,
                    });
                }
                b.events.entry(channel.to_string()).or_default().push((time, value));
            }
            "NOTE" => {
                let parts: Vec<&str> = trimmed.splitn(5, '|').collect();
                if parts.len() != 5 {
                    return Err(DataError::Parse { line: line_no, msg: "NOTE needs 5 fields".into() });
                }
                let id = parts[1];
                let timestamp = parse_float(parts[2], line_no, "time")?;
                if timestamp < 0.0 {
                    return Err(DataError::Parse { line: line_no, msg: format!("negative time {timestamp}") });
                }
                let precision = match parts[3] {
                    "exact" => NotePrecision::ExactTime,
                    "date" => NotePrecision::DateOnly,
                    other => {
                        return Err(DataError::Parse {
                            line: line_no,
                            msg: format!("unknown precision {other:?}"),
                        })
                    }
                };
                builder_for(&mut builders, &mut order, id).notes.push(Note { text: parts[4].to_string(), timestamp, precision });
            }
            "ADMIT" => {
                let parts: Vec<&str> = trimmed.splitn(3, '|').collect();
                if parts.len() != 3 {
                    return Err(DataError::Parse { line: line_no, msg: "ADMIT needs 3 fields".into() });
                }
                builder_for(&mut builders, &mut order, parts[1]).admission_text = parts[2].to_string();
            }
            "LABEL" => {
                let parts: Vec<&str> = trimmed.splitn(3, '|').collect();
                if parts.len() != 3 {
                    return Err(DataError::Parse { line: line_no, msg: "LABEL needs 3 fields".into() });
                }
                let label = match parts[2].trim() {
                    "0" => 0,
                    "1" => 1,
                    other => {
                        return Err(DataError::Parse {
                            line: line_no,
                            msg: format!("label must be 0 or 1, got {other:?}"),
                        })
                    }
                };
                builder_for(&mut builders, &mut order, parts[1]).label = Some(label);
            }
            other => {
                return Err(DataError::Parse {
                    line: line_no,
                    msg: format!("unknown record kind {other:?}"),
                })
            }
        }
    }

    if order.is_empty() {
        return Err(DataError::NoRecords);
    }
    let channel_names: Vec<String> = channel_names.into_iter().collect();
    let mut records = Vec::with_capacity(order.len());
    for id in order {
        let mut b = builders.remove(&id).unwrap();
        let label = b.label.ok_or_else(|| DataError::MissingLabel(id.clone()))?;
        let channels = channel_names
            .iter()
            .map(|name| match b.events.remove(name) {
                Some(events) => ChannelSeries::from_events(events),
                None => ChannelSeries::empty(),
            })
            .collect();
        records.push(EpisodeRecord {
            id,
            channels,
            notes: b.notes,
            admission_text: b.admission_text,
            label,
        });
    }
    Ok(Dataset { channel_names, records })
}

pub fn load_records(path: &Path) -> Result<Dataset, DataError> {
    let f = std::fs::File::open(path)?;
    load_records_from(std::io::BufReader::new(f))
}

pub fn save_records_to<W: Write>(dataset: &Dataset, mut w: W) -> Result<(), DataError> {
    for r in &dataset.records {
        writeln!(w, "ADMIT|{}|{}", r.id, r.admission_text)?;
        writeln!(w, "LABEL|{}|{}", r.id, r.label)?;
        for (name, ch) in dataset.channel_names.iter().zip(&r.channels) {
            for (&t, &v) in ch.times().iter().zip(ch.values()) {
                writeln!(w, "TS|{}|{}|{}|{}", r.id, name, t, v)?;
            }
        }
        for n in &r.notes {
            let precision = match n.precision {
                NotePrecision::ExactTime => "exact",
                NotePrecision::DateOnly => "date",
            };
            writeln!(w, "NOTE|{}|{}|{}|{}", r.id, n.timestamp, precision, n.text)?;
        }
    }
    Ok(())
}

pub fn save_records(dataset: &Dataset, path: &Path) -> Result<(), DataError> {
    let f = std::fs::File::create(path)?;
    save_records_to(dataset, std::io::BufWriter::new(f))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_record_file() -> &'static str {
        "ADMIT|a|chest pain\n\
         LABEL|a|1\n\
         TS|a|hr|1.0|80\n\
         TS|a|hr|0.5|75\n\
         TS|a|spo2|2.0|97\n\
         NOTE|a|7.5|exact|stable overnight\n\
         ADMIT|b|fever\n\
         LABEL|b|0\n\
         TS|b|hr|3.0|90\n\
         NOTE|b|2.0|date|echo report\n"
    }

    #[test]
    fn loads_two_ids_two_channels() {
        let ds = load_records_from(two_record_file().as_bytes()).unwrap();
        assert_eq!(ds.n(), 2);
        assert_eq!(ds.d(), 2);
        assert_eq!(ds.channel_names, vec!["hr", "spo2"]);
    }

    #[test]
    fn out_of_order_events_get_sorted() {
        let ds = load_records_from(two_record_file().as_bytes()).unwrap();
        let hr = &ds.records[0].channels[0];
        assert_eq!(hr.times(), &[0.5, 1.0]);
        assert_eq!(hr.values(), &[75.0, 80.0]);
    }

    #[test]
    fn empty_file_is_no_records() {
        assert!(matches!(load_records_from(&b""[..]), Err(DataError::NoRecords)));
    }

    #[test]
    fn duplicate_event_rejected_with_line() {
        let file = "LABEL|a|0\nTS|a|hr|1.0|80\nTS|a|hr|1.0|81\n";
        match load_records_from(file.as_bytes()) {
            Err(DataError::DuplicateEvent { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected duplicate error, got {other:?}"),
        }
    }

    #[test]
    fn malformed_line_carries_line_number() {
        let file = "LABEL|a|0\nTS|a|hr|not_a_number|80\n";
        match load_records_from(file.as_bytes()) {
            Err(DataError::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn window_zero_keeps_only_admission_text() {
        let ds = load_records_from(two_record_file().as_bytes()).unwrap();
        let w = apply_window(&ds, 0.0).unwrap();
        for r in &w.records {
            assert!(r.channels.iter().all(|c| c.is_empty()));
            assert!(r.notes.is_empty());
            assert!(!r.admission_text.is_empty());
        }
    }

    #[test]
    fn exact_note_respects_cutoff() {
        let ds = load_records_from(two_record_file().as_bytes()).unwrap();
        // exact note at 7.5h: excluded at 6h, included at 12h
        assert!(apply_window(&ds, 6.0).unwrap().records[0].notes.is_empty());
        assert_eq!(apply_window(&ds, 12.0).unwrap().records[0].notes.len(), 1);
    }

    #[test]
    fn date_only_note_available_end_of_day() {
        // day 0 note: end of day is hour 24
        let ds = load_records_from(two_record_file().as_bytes()).unwrap();
        assert!(apply_window(&ds, 18.0).unwrap().records[1].notes.is_empty());
        assert_eq!(apply_window(&ds, 24.0).unwrap().records[1].notes.len(), 1);
    }

    #[test]
    fn negative_window_rejected() {
        let ds = load_records_from(two_record_file().as_bytes()).unwrap();
        assert!(matches!(apply_window(&ds, -1.0), Err(DataError::NegativeHours(_))));
    }

    #[test]
    fn two_point_zscore() {
        let ds = load_records_from(
            "LABEL|a|0\nTS|a|hr|0.0|2\nTS|a|hr|1.0|4\n".as_bytes(),
        )
        .unwrap();
        let norm = fit_normalizer(&ds);
        let out = normalize(&ds, &norm);
        assert_eq!(out.records[0].channels[0].values(), &[-1.0, 1.0]);
    }

    #[test]
    fn constant_channel_hits_std_floor() {
        let ds = load_records_from(
            "LABEL|a|0\nTS|a|hr|0.0|7\nTS|a|hr|1.0|7\n".as_bytes(),
        )
        .unwrap();
        let norm = fit_normalizer(&ds);
        assert_eq!(norm.per_channel[0], (7.0, STD_FLOOR));
        let out = normalize(&ds, &norm);
        assert_eq!(out.records[0].channels[0].values(), &[0.0, 0.0]);
    }

    #[test]
    fn empty_channel_identity_normalizer() {
        let ds = load_records_from(
            "LABEL|a|0\nTS|a|hr|0.0|1\nLABEL|b|1\nTS|b|rr|0.0|5\n".as_bytes(),
        )
        .unwrap();
        let mut only_a = ds.clone();
        only_a.records.truncate(1); // rr channel now empty
        let norm = fit_normalizer(&only_a);
        let rr_idx = ds.channel_names.iter().position(|c| c == "rr").unwrap();
        assert_eq!(norm.per_channel[rr_idx], (0.0, 1.0));
    }

    #[test]
    fn save_load_round_trip() {
        let ds = load_records_from(two_record_file().as_bytes()).unwrap();
        let mut buf = Vec::new();
        save_records_to(&ds, &mut buf).unwrap();
        let back = load_records_from(&buf[..]).unwrap();
        assert_eq!(ds, back);
    }

    #[test]
    fn pooled_document_order() {
        let r = EpisodeRecord {
            id: "a".into(),
            channels: vec![],
            notes: vec![
                Note { text: "later".into(), timestamp: 9.0, precision: NotePrecision::ExactTime },
                Note { text: "earlier".into(), timestamp: 2.0, precision: NotePrecision::ExactTime },
            ],
            admission_text: "admit".into(),
            label: 0,
        };
        assert_eq!(r.pooled_document(), "admit earlier later");
    }
}
