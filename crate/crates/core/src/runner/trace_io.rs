//! Event trace export.
//!
//! CSV has one row per event with columns `time_sec, resource, kind,
//! micro_batch, slot`. JSON holds the same rows under `events` plus the
//! trace totals.

use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::pipeline::{Event, EventKind, EventTrace, Resource, TraceTotals};

use super::config::TraceFormat;

pub const CSV_HEADER: [&str; 5] = ["time_sec", "resource", "kind", "micro_batch", "slot"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub time_sec: f64,
    pub resource: String,
    pub kind: String,
    pub micro_batch: usize,
    pub slot: usize,
}

impl From<&Event> for TraceRow {
    fn from(e: &Event) -> Self {
        Self {
            time_sec: e.time_sec,
            resource: e.resource.label(),
            kind: e.kind.label().to_string(),
            micro_batch: e.micro_batch,
            slot: e.slot,
        }
    }
}

impl TryFrom<TraceRow> for Event {
    type Error = io::Error;

    fn try_from(row: TraceRow) -> io::Result<Self> {
        let bad = |what: &str, v: &str| {
            io::Error::new(io::ErrorKind::InvalidData, format!("unknown {what} {v:?}"))
        };
        Ok(Event {
            time_sec: row.time_sec,
            resource: Resource::parse(&row.resource)
                .ok_or_else(|| bad("resource", &row.resource))?,
            kind: EventKind::parse(&row.kind).ok_or_else(|| bad("kind", &row.kind))?,
            micro_batch: row.micro_batch,
            slot: row.slot,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct JsonTrace {
    events: Vec<TraceRow>,
    totals: TraceTotals,
}

fn to_io(e: csv::Error) -> io::Error {
    io::Error::other(e)
}

pub fn emit_trace(trace: &EventTrace, path: &Path, format: TraceFormat) -> io::Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    match format {
        TraceFormat::Csv => {
            let mut w = csv::WriterBuilder::new()
                .has_headers(false)
                .from_writer(&mut out);
            w.write_record(CSV_HEADER).map_err(to_io)?;
            for e in &trace.events {
                w.serialize(TraceRow::from(e)).map_err(to_io)?;
            }
            w.flush()?;
        }
        TraceFormat::Json => {
            let doc = JsonTrace {
                events: trace.events.iter().map(TraceRow::from).collect(),
                totals: trace.totals.clone(),
            };
            serde_json::to_writer_pretty(&mut out, &doc)?;
            out.write_all(b"\n")?;
        }
    }
    out.flush()
}

/// Reads back the event rows of a CSV trace (totals are not stored).
pub fn read_trace_csv(path: &Path) -> io::Result<Vec<Event>> {
    let mut r = csv::Reader::from_path(path).map_err(to_io)?;
    let header: Vec<String> = r
        .headers()
        .map_err(to_io)?
        .iter()
        .map(String::from)
        .collect();
    if header != CSV_HEADER {
        return Err(io::Error::new(
            io::ErrorKind::InvalidData,
            format!("unexpected header {header:?}"),
        ));
    }
    r.deserialize::<TraceRow>()
        .map(|row| Event::try_from(row.map_err(to_io)?))
        .collect()
}

pub fn read_trace_json(path: &Path) -> io::Result<EventTrace> {
    let doc: JsonTrace = serde_json::from_reader(io::BufReader::new(File::open(path)?))?;
    Ok(EventTrace {
        events: doc
            .events
            .into_iter()
            .map(Event::try_from)
            .collect::<io::Result<_>>()?,
        totals: doc.totals,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> EventTrace {
        EventTrace {
            events: vec![
                Event {
                    time_sec: 0.0,
                    kind: EventKind::SpecStart,
                    resource: Resource::Ssm(1),
                    micro_batch: 0,
                    slot: 1,
                },
                Event {
                    time_sec: 0.1 + 0.2,
                    kind: EventKind::VerifyEnd,
                    resource: Resource::Llm,
                    micro_batch: 1,
                    slot: 1,
                },
            ],
            totals: TraceTotals {
                makespan_sec: 0.1 + 0.2,
                llm_busy_sec: 0.125,
                llm_idle_sec: 0.175,
                accepted_tokens: 9,
                ..TraceTotals::default()
            },
        }
    }

    #[test]
    fn empty_trace_is_header_only() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.csv");
        emit_trace(&EventTrace::default(), &p, TraceFormat::Csv).unwrap();
        assert_eq!(
            std::fs::read_to_string(&p).unwrap(),
            "time_sec,resource,kind,micro_batch,slot\n"
        );
    }

    #[test]
    fn round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let t = sample();
        let j = dir.path().join("t.json");
        emit_trace(&t, &j, TraceFormat::Json).unwrap();
        assert_eq!(read_trace_json(&j).unwrap(), t);
        let c = dir.path().join("t.csv");
        emit_trace(&t, &c, TraceFormat::Csv).unwrap();
        assert_eq!(read_trace_csv(&c).unwrap(), t.events);
    }

    #[test]
    fn unwritable_path_fails() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("missing").join("t.csv");
        assert!(emit_trace(&sample(), &p, TraceFormat::Csv).is_err());
    }
}
