//! Per-task timing events and the breakdown derived from them.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::EngineError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TaskKind {
    #[serde(rename = "FF")]
    Ff,
    #[serde(rename = "BP")]
    Bp,
    #[serde(rename = "COMPRESS")]
    Compress,
    #[serde(rename = "COLLECTIVE")]
    Collective,
    #[serde(rename = "DECODE")]
    Decode,
    #[serde(rename = "UPDATE")]
    Update,
}

impl TaskKind {
    pub fn label(self) -> &'static str {
        match self {
            TaskKind::Ff => "FF",
            TaskKind::Bp => "BP",
            TaskKind::Compress => "COMPRESS",
            TaskKind::Collective => "COLLECTIVE",
            TaskKind::Decode => "DECODE",
            TaskKind::Update => "UPDATE",
        }
    }

    /// Runs on the compute context (everything except collectives).
    pub fn on_compute(self) -> bool {
        self != TaskKind::Collective
    }

    /// Compute work that hides communication.
    fn blocks_comm(self) -> bool {
        matches!(self, TaskKind::Ff | TaskKind::Bp | TaskKind::Compress)
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for TaskKind {
    type Err = EngineError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s {
            "FF" => TaskKind::Ff,
            "BP" => TaskKind::Bp,
            "COMPRESS" => TaskKind::Compress,
            "COLLECTIVE" => TaskKind::Collective,
            "DECODE" => TaskKind::Decode,
            "UPDATE" => TaskKind::Update,
            other => {
                return Err(EngineError::Timeline(format!(
                    "unknown task kind {other:?}"
                )))
            }
        })
    }
}

/// Times are seconds from the start of the iteration (or run).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub worker: usize,
    pub kind: TaskKind,
    pub id: String,
    pub start_s: f64,
    pub end_s: f64,
    /// Data bytes sent; only meaningful for collectives.
    #[serde(default)]
    pub bytes: u64,
}

impl Event {
    pub fn duration(&self) -> f64 {
        self.end_s - self.start_s
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Timeline {
    pub events: Vec<Event>,
}

#[derive(Serialize, Deserialize)]
struct CsvRow {
    worker: usize,
    kind: String,
    id: String,
    start_s: f64,
    end_s: f64,
}

impl Timeline {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, e: Event) {
        self.events.push(e);
    }

    pub fn extend(&mut self, other: Timeline) {
        self.events.extend(other.events);
    }

    /// Copy with every event shifted by `offset` seconds.
    pub fn shifted(&self, offset: f64) -> Timeline {
        Timeline {
            events: self
                .events
                .iter()
                .map(|e| Event {
                    start_s: e.start_s + offset,
                    end_s: e.end_s + offset,
                    ..e.clone()
                })
                .collect(),
        }
    }

    pub fn workers(&self) -> Vec<usize> {
        let mut w: Vec<usize> = self.events.iter().map(|e| e.worker).collect();
        w.sort_unstable();
        w.dedup();
        w
    }

    pub fn span(&self) -> f64 {
        let start = self
            .events
            .iter()
            .map(|e| e.start_s)
            .fold(f64::INFINITY, f64::min);
        let end = self
            .events
            .iter()
            .map(|e| e.end_s)
            .fold(f64::NEG_INFINITY, f64::max);
        if self.events.is_empty() {
            0.0
        } else {
            end - start
        }
    }

    pub fn collective_bytes(&self) -> u64 {
        self.events
            .iter()
            .filter(|e| e.kind == TaskKind::Collective)
            .map(|e| e.bytes)
            .sum()
    }

    /// Header `worker,kind,id,start_s,end_s`.
    pub fn to_csv(&self) -> Result<String, EngineError> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for e in &self.events {
            w.serialize(CsvRow {
                worker: e.worker,
                kind: e.kind.label().to_string(),
                id: e.id.clone(),
                start_s: e.start_s,
                end_s: e.end_s,
            })
            .map_err(|err| EngineError::Timeline(err.to_string()))?;
        }
        let bytes = w
            .into_inner()
            .map_err(|err| EngineError::Timeline(err.to_string()))?;
        String::from_utf8(bytes).map_err(|err| EngineError::Timeline(err.to_string()))
    }

    pub fn from_csv(text: &str) -> Result<Self, EngineError> {
        let mut r = csv::Reader::from_reader(text.as_bytes());
        let mut events = Vec::new();
        for row in r.deserialize::<CsvRow>() {
            let row = row.map_err(|err| EngineError::Timeline(err.to_string()))?;
            events.push(Event {
                worker: row.worker,
                kind: row.kind.parse()?,
                id: row.id,
                start_s: row.start_s,
                end_s: row.end_s,
                bytes: 0,
            });
        }
        Ok(Self { events })
    }

    pub fn to_json(&self) -> Result<String, EngineError> {
        serde_json::to_string_pretty(self).map_err(|err| EngineError::Timeline(err.to_string()))
    }

    pub fn from_json(text: &str) -> Result<Self, EngineError> {
        serde_json::from_str(text).map_err(|err| EngineError::Timeline(err.to_string()))
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Breakdown {
    /// FF + BP.
    pub compute_s: f64,
    /// COMPRESS + DECODE.
    pub compress_s: f64,
    /// Time some collective is in flight while no FF, BP or COMPRESS task
    /// runs.
    pub nonoverlapped_comm_s: f64,
    pub iteration_s: f64,
}

const OVERLAP_SLACK: f64 = 1e-9;

/// Per-worker breakdown averaged over the workers present. Compute-context
/// tasks of one worker must not overlap each other.
pub fn measure_breakdown(timeline: &Timeline) -> Result<Breakdown, EngineError> {
    let workers = timeline.workers();
    if workers.is_empty() {
        return Err(EngineError::Timeline("empty timeline".into()));
    }
    let mut acc = Breakdown::default();
    for &w in &workers {
        let events: Vec<&Event> = timeline.events.iter().filter(|e| e.worker == w).collect();
        let b = worker_breakdown(w, &events)?;
        acc.compute_s += b.compute_s;
        acc.compress_s += b.compress_s;
        acc.nonoverlapped_comm_s += b.nonoverlapped_comm_s;
        acc.iteration_s += b.iteration_s;
    }
    let n = workers.len() as f64;
    Ok(Breakdown {
        compute_s: acc.compute_s / n,
        compress_s: acc.compress_s / n,
        nonoverlapped_comm_s: acc.nonoverlapped_comm_s / n,
        iteration_s: acc.iteration_s / n,
    })
}

fn worker_breakdown(worker: usize, events: &[&Event]) -> Result<Breakdown, EngineError> {
    for e in events {
        if !(e.start_s.is_finite() && e.end_s.is_finite()) || e.end_s < e.start_s {
            return Err(EngineError::Timeline(format!(
                "worker {worker}: event {} {} has invalid interval [{}, {}]",
                e.kind, e.id, e.start_s, e.end_s
            )));
        }
    }
    let mut compute: Vec<&Event> = events
        .iter()
        .copied()
        .filter(|e| e.kind.on_compute())
        .collect();
    compute.sort_by(|a, b| a.start_s.total_cmp(&b.start_s));
    for pair in compute.windows(2) {
        if pair[0].end_s > pair[1].start_s + OVERLAP_SLACK {
            return Err(EngineError::Timeline(format!(
                "worker {worker}: compute tasks {} {} and {} {} overlap",
                pair[0].kind, pair[0].id, pair[1].kind, pair[1].id
            )));
        }
    }
    let sum = |pred: fn(TaskKind) -> bool| -> f64 {
        events
            .iter()
            .filter(|e| pred(e.kind))
            .map(|e| e.duration())
            .sum()
    };
    let comm = merge(events.iter().filter(|e| e.kind == TaskKind::Collective));
    let busy = merge(events.iter().filter(|e| e.kind.blocks_comm()));
    let start = events
        .iter()
        .map(|e| e.start_s)
        .fold(f64::INFINITY, f64::min);
    let end = events
        .iter()
        .map(|e| e.end_s)
        .fold(f64::NEG_INFINITY, f64::max);
    Ok(Breakdown {
        compute_s: sum(|k| matches!(k, TaskKind::Ff | TaskKind::Bp)),
        compress_s: sum(|k| matches!(k, TaskKind::Compress | TaskKind::Decode)),
        nonoverlapped_comm_s: measure(&comm) - intersection(&comm, &busy),
        iteration_s: end - start,
    })
}

/// Disjoint, sorted union of the events' intervals.
fn merge<'a>(events: impl Iterator<Item = &'a &'a Event>) -> Vec<(f64, f64)> {
    let mut iv: Vec<(f64, f64)> = events.map(|e| (e.start_s, e.end_s)).collect();
    iv.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut out: Vec<(f64, f64)> = Vec::new();
    for (s, e) in iv {
        match out.last_mut() {
            Some(last) if s <= last.1 => last.1 = last.1.max(e),
            _ => out.push((s, e)),
        }
    }
    out
}

fn measure(iv: &[(f64, f64)]) -> f64 {
    iv.iter().map(|(s, e)| e - s).sum()
}

fn intersection(a: &[(f64, f64)], b: &[(f64, f64)]) -> f64 {
    let (mut i, mut j, mut total) = (0, 0, 0.0);
    while i < a.len() && j < b.len() {
        let lo = a[i].0.max(b[j].0);
        let hi = a[i].1.min(b[j].1);
        if hi > lo {
            total += hi - lo;
        }
        if a[i].1 < b[j].1 {
            i += 1;
        } else {
            j += 1;
        }
    }
    total
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ev(kind: TaskKind, start: f64, end: f64) -> Event {
        Event {
            worker: 0,
            kind,
            id: String::new(),
            start_s: start,
            end_s: end,
            bytes: 0,
        }
    }

    #[test]
    fn simple_breakdown() {
        let tl = Timeline {
            events: vec![
                ev(TaskKind::Ff, 0.0, 1.0),
                ev(TaskKind::Bp, 1.0, 3.0),
                ev(TaskKind::Compress, 3.0, 3.5),
                ev(TaskKind::Collective, 2.0, 5.0),
                ev(TaskKind::Collective, 4.0, 6.0),
                ev(TaskKind::Decode, 6.0, 6.25),
            ],
        };
        let b = measure_breakdown(&tl).unwrap();
        assert_eq!(b.compute_s, 3.0);
        assert_eq!(b.compress_s, 0.75);
        assert_eq!(b.nonoverlapped_comm_s, 2.5);
        assert_eq!(b.iteration_s, 6.25);
    }

    #[test]
    fn overlapping_compute_is_rejected() {
        let tl = Timeline {
            events: vec![ev(TaskKind::Bp, 0.0, 2.0), ev(TaskKind::Compress, 1.0, 3.0)],
        };
        assert!(matches!(
            measure_breakdown(&tl),
            Err(EngineError::Timeline(_))
        ));
        assert!(measure_breakdown(&Timeline::new()).is_err());
    }

    #[test]
    fn averages_workers() {
        let mut a = ev(TaskKind::Collective, 0.0, 2.0);
        let mut b = ev(TaskKind::Collective, 0.0, 4.0);
        a.worker = 0;
        b.worker = 1;
        let tl = Timeline { events: vec![a, b] };
        assert_eq!(measure_breakdown(&tl).unwrap().nonoverlapped_comm_s, 3.0);
    }

    #[test]
    fn csv_and_json_roundtrip() {
        let tl = Timeline {
            events: vec![ev(TaskKind::Ff, 0.0, 0.5), ev(TaskKind::Update, 0.5, 0.75)],
        };
        let csv = tl.to_csv().unwrap();
        assert!(csv.starts_with("worker,kind,id,start_s,end_s\n"));
        assert!(csv.contains("0,FF,,0.0,0.5"));
        assert_eq!(Timeline::from_csv(&csv).unwrap(), tl);
        assert_eq!(Timeline::from_json(&tl.to_json().unwrap()).unwrap(), tl);
        assert!(Timeline::from_csv("worker,kind,id,start_s,end_s\n0,NOPE,x,0,1\n").is_err());
    }

    // Millisecond sweep: a collective ms counts when no FF/BP/COMPRESS
    // task covers it.
    fn sweep_ms(events: &[Event]) -> f64 {
        let end = events.iter().map(|e| e.end_s).fold(0.0, f64::max);
        let steps = (end * 1000.0).round() as usize;
        let covers = |e: &Event, t: f64| e.start_s <= t && t < e.end_s;
        (0..steps)
            .filter(|&ms| {
                let t = (ms as f64 + 0.5) / 1000.0;
                events
                    .iter()
                    .any(|e| e.kind == TaskKind::Collective && covers(e, t))
                    && !events.iter().any(|e| e.kind.blocks_comm() && covers(e, t))
            })
            .count() as f64
            / 1000.0
    }

    fn synthetic() -> impl Strategy<Value = Vec<Event>> {
        let compute = proptest::collection::vec((0usize..3, 0u32..20, 1u32..30), 1..12);
        let comm = proptest::collection::vec((0u32..400, 1u32..80), 0..10);
        (compute, comm).prop_map(|(compute, comm)| {
            let kinds = [TaskKind::Bp, TaskKind::Compress, TaskKind::Decode];
            let mut t = 0u32;
            let mut out = Vec::new();
            for (k, gap, len) in compute {
                t += gap;
                out.push(ev(kinds[k], t as f64 / 1000.0, (t + len) as f64 / 1000.0));
                t += len;
            }
            for (s, len) in comm {
                out.push(ev(
                    TaskKind::Collective,
                    s as f64 / 1000.0,
                    (s + len) as f64 / 1000.0,
                ));
            }
            out
        })
    }

    proptest! {
        #[test]
        fn matches_millisecond_sweep(events in synthetic()) {
            let tl = Timeline { events: events.clone() };
            let b = measure_breakdown(&tl).unwrap();
            prop_assert!((b.nonoverlapped_comm_s - sweep_ms(&events)).abs() <= 1e-3);
        }
    }
}
