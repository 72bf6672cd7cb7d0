//! Append-only event storage, snapshots and the tabular export.
//!
//! On disk every experiment owns one `<id>.jsonl` file with one JSON object
//! per line, plus an optional `<id>.snapshot.json`. Appends are synced before
//! returning.

use std::collections::HashMap;
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Read, Write};
use std::path::{Path, PathBuf};

use parking_lot::Mutex;
use serde::{Deserialize, Serialize};

use crate::bandit::Reward;
use crate::engine::ExperimentState;
use crate::error::{Error, Result};
use crate::event::{Event, EventRecord};
use crate::policy::PolicyKind;

/// Storage backend for experiment logs. Implementations enforce dense sequences.
pub trait EventStore: Send + Sync {
    /// Append `event`; its sequence must be exactly one past the last stored one.
    fn append_event(&self, experiment_id: &str, event: &EventRecord) -> Result<u64>;

    fn load(&self, experiment_id: &str) -> Result<Vec<EventRecord>>;

    fn last_sequence(&self, experiment_id: &str) -> Result<u64>;

    fn experiment_ids(&self) -> Result<Vec<String>>;
}

fn check_next(experiment_id: &str, last: u64, event: &EventRecord) -> Result<()> {
    if event.sequence != last + 1 {
        return Err(Error::Integrity {
            sequence: event.sequence,
            message: format!(
                "experiment `{experiment_id}` expects sequence {}, got {}",
                last + 1,
                event.sequence
            ),
        });
    }
    Ok(())
}

#[derive(Debug, Default)]
pub struct MemoryStore {
    logs: Mutex<HashMap<String, Vec<EventRecord>>>,
}

impl MemoryStore {
    pub fn new() -> Self {
        Self::default()
    }
}

impl EventStore for MemoryStore {
    fn append_event(&self, experiment_id: &str, event: &EventRecord) -> Result<u64> {
        let mut logs = self.logs.lock();
        let log = logs.entry(experiment_id.to_string()).or_default();
        check_next(experiment_id, log.last().map_or(0, |e| e.sequence), event)?;
        log.push(event.clone());
        Ok(event.sequence)
    }

    fn load(&self, experiment_id: &str) -> Result<Vec<EventRecord>> {
        self.logs
            .lock()
            .get(experiment_id)
            .cloned()
            .ok_or_else(|| Error::NotFound(format!("experiment `{experiment_id}`")))
    }

    fn last_sequence(&self, experiment_id: &str) -> Result<u64> {
        Ok(self
            .logs
            .lock()
            .get(experiment_id)
            .and_then(|l| l.last())
            .map_or(0, |e| e.sequence))
    }

    fn experiment_ids(&self) -> Result<Vec<String>> {
        let mut ids: Vec<String> = self.logs.lock().keys().cloned().collect();
        ids.sort();
        Ok(ids)
    }
}

/// One JSON-lines file per experiment under a data directory.
#[derive(Debug)]
pub struct FileStore {
    dir: PathBuf,
    // experiment id -> (append handle, last sequence)
    open: Mutex<HashMap<String, (File, u64)>>,
}

impl FileStore {
    pub fn open(dir: impl Into<PathBuf>) -> Result<Self> {
        let dir = dir.into();
        fs::create_dir_all(&dir)?;
        Ok(FileStore {
            dir,
            open: Mutex::new(HashMap::new()),
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn log_path(&self, experiment_id: &str) -> PathBuf {
        self.dir.join(format!("{experiment_id}.jsonl"))
    }

    pub fn snapshot_path(&self, experiment_id: &str) -> PathBuf {
        self.dir.join(format!("{experiment_id}.snapshot.json"))
    }

    pub fn write_snapshot(&self, snapshot: &Snapshot) -> Result<()> {
        snapshot.write_to(&self.snapshot_path(&snapshot.experiment_id))
    }

    pub fn load_snapshot(&self, experiment_id: &str) -> Result<Option<Snapshot>> {
        let path = self.snapshot_path(experiment_id);
        if !path.exists() {
            return Ok(None);
        }
        Snapshot::read_from(&path).map(Some)
    }

    fn validate_id(experiment_id: &str) -> Result<()> {
        let ok = !experiment_id.is_empty()
            && experiment_id
                .chars()
                .all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_');
        if ok {
            Ok(())
        } else {
            Err(Error::invalid(format!("experiment id `{experiment_id}` is not a safe file name")))
        }
    }
}

impl EventStore for FileStore {
    fn append_event(&self, experiment_id: &str, event: &EventRecord) -> Result<u64> {
        Self::validate_id(experiment_id)?;
        let mut open = self.open.lock();
        if !open.contains_key(experiment_id) {
            let path = self.log_path(experiment_id);
            let last = if path.exists() {
                repair_torn_tail(&path)?;
                read_log_file(&path)?.last().map_or(0, |e| e.sequence)
            } else {
                0
            };
            let file = OpenOptions::new().create(true).append(true).open(&path)?;
            open.insert(experiment_id.to_string(), (file, last));
        }
        let (file, last) = open.get_mut(experiment_id).expect("inserted above");
        check_next(experiment_id, *last, event)?;
        let mut line = serde_json::to_vec(event).map_err(|e| Error::Parse(e.to_string()))?;
        line.push(b'\n');
        file.write_all(&line)?;
        file.sync_data()?;
        *last = event.sequence;
        Ok(event.sequence)
    }

    fn load(&self, experiment_id: &str) -> Result<Vec<EventRecord>> {
        Self::validate_id(experiment_id)?;
        let path = self.log_path(experiment_id);
        if !path.exists() {
            return Err(Error::NotFound(format!("experiment `{experiment_id}`")));
        }
        read_log_file(&path)
    }

    fn last_sequence(&self, experiment_id: &str) -> Result<u64> {
        if let Some((_, last)) = self.open.lock().get(experiment_id) {
            return Ok(*last);
        }
        match self.load(experiment_id) {
            Ok(events) => Ok(events.last().map_or(0, |e| e.sequence)),
            Err(Error::NotFound(_)) => Ok(0),
            Err(e) => Err(e),
        }
    }

    fn experiment_ids(&self) -> Result<Vec<String>> {
        let mut ids = Vec::new();
        for entry in fs::read_dir(&self.dir)? {
            let name = entry?.file_name();
            if let Some(id) = name.to_str().and_then(|n| n.strip_suffix(".jsonl")) {
                ids.push(id.to_string());
            }
        }
        ids.sort();
        Ok(ids)
    }
}

/// Read a log file. A final line without a trailing newline is a torn write
/// from an interrupted append and is ignored.
pub fn read_log_file(path: &Path) -> Result<Vec<EventRecord>> {
    let mut bytes = Vec::new();
    File::open(path)?.read_to_end(&mut bytes)?;
    bytes.truncate(complete_prefix(&bytes));
    parse_log(&bytes[..])
}

fn complete_prefix(bytes: &[u8]) -> usize {
    bytes.iter().rposition(|&b| b == b'\n').map_or(0, |i| i + 1)
}

/// Cut a torn final line off before the writer starts appending again.
fn repair_torn_tail(path: &Path) -> Result<()> {
    let bytes = fs::read(path)?;
    let complete = complete_prefix(&bytes);
    if complete < bytes.len() {
        let f = OpenOptions::new().write(true).open(path)?;
        f.set_len(complete as u64)?;
        f.sync_all()?;
    }
    Ok(())
}

/// Parse JSON lines into records and check that sequences are dense from 1.
pub fn parse_log<R: Read>(reader: R) -> Result<Vec<EventRecord>> {
    let mut out: Vec<EventRecord> = Vec::new();
    for (lineno, line) in BufReader::new(reader).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let expected = out.last().map_or(1, |e| e.sequence + 1);
        let rec: EventRecord = serde_json::from_str(&line).map_err(|e| Error::Integrity {
            sequence: expected,
            message: format!("line {}: {e}", lineno + 1),
        })?;
        if rec.sequence != expected {
            return Err(Error::Integrity {
                sequence: rec.sequence,
                message: format!("line {}: expected sequence {expected}", lineno + 1),
            });
        }
        out.push(rec);
    }
    Ok(out)
}

pub fn write_log<W: Write>(mut w: W, events: &[EventRecord]) -> Result<()> {
    for e in events {
        serde_json::to_writer(&mut w, e).map_err(|e| Error::Parse(e.to_string()))?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

/// Rebuild an experiment from its ordered event stream.
pub fn replay(events: &[EventRecord]) -> Result<ExperimentState> {
    ExperimentState::replay(events)
}

/// Serialized state as of a given sequence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Snapshot {
    pub experiment_id: String,
    pub as_of_sequence: u64,
    pub state: ExperimentState,
}

impl Snapshot {
    pub fn of(state: &ExperimentState) -> Self {
        Snapshot {
            experiment_id: state.experiment_id.clone(),
            as_of_sequence: state.last_sequence,
            state: state.clone(),
        }
    }

    pub fn write_to(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("json.tmp");
        {
            let mut f = File::create(&tmp)?;
            serde_json::to_writer_pretty(&mut f, self).map_err(|e| Error::Parse(e.to_string()))?;
            f.write_all(b"\n")?;
            f.sync_all()?;
        }
        fs::rename(tmp, path)?;
        Ok(())
    }

    pub fn read_from(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| Error::Parse(format!("{}: {e}", path.display())))
    }

    /// Replay `events` up to `as_of_sequence` and compare with the stored state.
    pub fn verify(&self, events: &[EventRecord]) -> Result<Verification> {
        let upto: Vec<EventRecord> = events
            .iter()
            .take_while(|e| e.sequence <= self.as_of_sequence)
            .cloned()
            .collect();
        if upto.last().map(|e| e.sequence) != Some(self.as_of_sequence) {
            return Ok(Verification::Mismatch {
                field: "as_of_sequence".into(),
                detail: format!(
                    "log ends at sequence {} before the snapshot's {}",
                    upto.last().map_or(0, |e| e.sequence),
                    self.as_of_sequence
                ),
            });
        }
        let rebuilt = ExperimentState::replay(&upto)?;
        Ok(match first_divergence(&self.state, &rebuilt) {
            None => Verification::Match,
            Some((field, detail)) => Verification::Mismatch { field, detail },
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Verification {
    Match,
    Mismatch { field: String, detail: String },
}

/// First top-level field where two states differ, with both renderings.
pub fn first_divergence(expected: &ExperimentState, actual: &ExperimentState) -> Option<(String, String)> {
    if expected == actual {
        return None;
    }
    let a = serde_json::to_value(expected).ok()?;
    let b = serde_json::to_value(actual).ok()?;
    let (a, b) = (a.as_object()?, b.as_object()?);
    for (key, va) in a {
        let vb = b.get(key);
        if vb != Some(va) {
            return Some((
                key.clone(),
                format!(
                    "snapshot has {}, replay has {}",
                    truncate(&va.to_string()),
                    truncate(&vb.map(|v| v.to_string()).unwrap_or_default())
                ),
            ));
        }
    }
    Some(("state".into(), "states differ".into()))
}

fn truncate(s: &str) -> String {
    const MAX: usize = 200;
    if s.len() <= MAX {
        s.to_string()
    } else {
        format!("{}...", &s[..s.floor_char_boundary(MAX)])
    }
}

/// One exported assignment.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExportRow {
    pub sequence: u64,
    pub participant_id: String,
    pub policy: PolicyKind,
    pub arm: usize,
    pub reward: Option<Reward>,
}

/// One row per `Assigned` event, with its reward when one was recorded.
pub fn export_table(events: &[EventRecord]) -> Vec<ExportRow> {
    let mut rows = Vec::new();
    let mut by_assignment: HashMap<u64, usize> = HashMap::new();
    for e in events {
        match &e.event {
            Event::Assigned {
                assignment_id,
                participant_id,
                policy,
                arm,
                ..
            } => {
                by_assignment.insert(*assignment_id, rows.len());
                rows.push(ExportRow {
                    sequence: e.sequence,
                    participant_id: participant_id.clone(),
                    policy: *policy,
                    arm: *arm,
                    reward: None,
                });
            }
            Event::Rewarded {
                assignment_id, reward, ..
            } => {
                if let Some(&i) = by_assignment.get(assignment_id) {
                    rows[i].reward = Some(*reward);
                }
            }
            _ => {}
        }
    }
    rows
}

pub const CSV_HEADER: [&str; 5] = ["sequence", "participant_id", "policy", "arm", "reward"];

pub fn write_csv<W: Write>(w: W, rows: &[ExportRow]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(CSV_HEADER).map_err(csv_err)?;
    for r in rows {
        let reward = r.reward.map(|v| v.as_u8().to_string()).unwrap_or_default();
        out.write_record([
            r.sequence.to_string().as_str(),
            r.participant_id.as_str(),
            r.policy.name(),
            r.arm.to_string().as_str(),
            reward.as_str(),
        ])
        .map_err(csv_err)?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_csv<R: Read>(r: R) -> Result<Vec<ExportRow>> {
    let mut rdr = csv::Reader::from_reader(r);
    let header = rdr.headers().map_err(csv_err)?.clone();
    if header.iter().ne(CSV_HEADER.iter().copied()) {
        return Err(Error::Parse(format!(
            "expected header `{}`, found `{}`",
            CSV_HEADER.join(","),
            header.iter().collect::<Vec<_>>().join(",")
        )));
    }
    let mut rows = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(csv_err)?;
        let line = i + 2;
        let field = |k: usize| rec.get(k).unwrap_or("");
        let bad = |what: &str| Error::Parse(format!("line {line}: invalid {what}"));
        let reward = match field(4) {
            "" => None,
            "0" => Some(Reward::Failure),
            "1" => Some(Reward::Success),
            _ => return Err(bad("reward")),
        };
        rows.push(ExportRow {
            sequence: field(0).parse().map_err(|_| bad("sequence"))?,
            participant_id: field(1).to_string(),
            policy: field(2).parse().map_err(|_| bad("policy"))?,
            arm: field(3).parse().map_err(|_| bad("arm"))?,
            reward,
        });
    }
    Ok(rows)
}

fn csv_err(e: csv::Error) -> Error {
    Error::Parse(e.to_string())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::{ExperimentConfig, OperatorAction};
    use crate::policy::ThompsonConfig;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn created(id: &str) -> (ExperimentState, EventRecord) {
        ExperimentState::create(
            id,
            ExperimentConfig::new("t", &["a", "b"], 0.5, ThompsonConfig { burn_in: 0, batch_size: 2, priors: vec![] }),
        )
        .unwrap()
    }

    fn ev(seq: u64) -> EventRecord {
        EventRecord {
            sequence: seq,
            timestamp_ms: 0,
            event: Event::BatchFlushed { rewards: 1 },
        }
    }

    #[test]
    fn first_append_is_sequence_one() {
        let store = MemoryStore::new();
        let (_, rec) = created("e1");
        assert_eq!(store.append_event("e1", &rec).unwrap(), 1);
    }

    #[test]
    fn gaps_and_duplicates_are_integrity_errors() {
        let dir = tempfile::tempdir().unwrap();
        let store = FileStore::open(dir.path()).unwrap();
        for s in 1..=3 {
            store.append_event("e", &ev(s)).unwrap();
        }
        assert!(matches!(store.append_event("e", &ev(5)), Err(Error::Integrity { sequence: 5, .. })));
        assert!(matches!(store.append_event("e", &ev(3)), Err(Error::Integrity { .. })));
        assert_eq!(store.last_sequence("e").unwrap(), 3);

        let mem = MemoryStore::new();
        mem.append_event("e", &ev(1)).unwrap();
        assert!(mem.append_event("e", &ev(1)).is_err());
    }

    #[test]
    fn reopen_after_append_sees_event_once() {
        let dir = tempfile::tempdir().unwrap();
        {
            let store = FileStore::open(dir.path()).unwrap();
            let (_, rec) = created("e");
            store.append_event("e", &rec).unwrap();
            // dropped without any shutdown step
        }
        let store = FileStore::open(dir.path()).unwrap();
        let events = store.load("e").unwrap();
        assert_eq!(events.len(), 1);
        assert_eq!(store.experiment_ids().unwrap(), vec!["e".to_string()]);
        assert_eq!(store.append_event("e", &ev(2)).unwrap(), 2);
    }

    #[test]
    fn torn_tail_is_dropped_on_open() {
        let dir = tempfile::tempdir().unwrap();
        let store = FileStore::open(dir.path()).unwrap();
        let (_, rec) = created("e");
        store.append_event("e", &rec).unwrap();
        drop(store);
        let path = dir.path().join("e.jsonl");
        let mut f = OpenOptions::new().append(true).open(&path).unwrap();
        f.write_all(br#"{"sequence":2,"kind":"Batch"#).unwrap();
        drop(f);
        let store = FileStore::open(dir.path()).unwrap();
        assert_eq!(store.load("e").unwrap().len(), 1);
        assert_eq!(store.append_event("e", &ev(2)).unwrap(), 2);
        assert_eq!(store.load("e").unwrap().len(), 2);
    }

    #[test]
    fn corrupt_line_reports_sequence() {
        let text = format!(
            "{}\nnot json\n",
            serde_json::to_string(&created("e").1).unwrap()
        );
        match parse_log(text.as_bytes()) {
            Err(Error::Integrity { sequence, .. }) => assert_eq!(sequence, 2),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn unsafe_ids_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let store = FileStore::open(dir.path()).unwrap();
        assert!(store.append_event("../x", &ev(1)).is_err());
    }

    fn live_log() -> (ExperimentState, Vec<EventRecord>) {
        let (mut s, rec) = created("e");
        let mut log = vec![rec];
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for i in 0..3 {
            log.extend(s.assign(&format!("p{i}"), &mut rng).unwrap().events);
        }
        log.extend(s.record_reward(1, Reward::Success).unwrap());
        log.extend(s.record_reward(3, Reward::Failure).unwrap());
        log.push(s.apply_operator_action(OperatorAction::AdoptArm { arm: 0 }).unwrap());
        (s, log)
    }

    #[test]
    fn replay_fresh_state_has_priors() {
        let (s, rec) = created("e");
        let r = replay(&[rec]).unwrap();
        assert_eq!(r, s);
        assert!(r.committed.iter().all(|p| p.alpha() == 1.0 && p.beta() == 1.0));
    }

    #[test]
    fn replay_first_worked_example_counts() {
        let (mut live, rec) = ExperimentState::create(
            "t1",
            ExperimentConfig::new("", &["c1", "c2"], 0.0, ThompsonConfig { burn_in: 1000, batch_size: 1, priors: vec![] }),
        )
        .unwrap();
        let mut log = vec![rec];
        log.push(live.apply_operator_action(OperatorAction::AdoptArm { arm: 0 }).unwrap());
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for i in 0..10u64 {
            let a = live.assign(&format!("s{i}"), &mut rng).unwrap();
            log.extend(a.events);
            log.extend(live.record_reward(a.record.assignment_id, Reward::from(i < 4)).unwrap());
        }
        let r = replay(&log).unwrap();
        assert_eq!((r.committed[0].alpha(), r.committed[0].beta()), (5.0, 7.0));
        assert_eq!(r, live);
    }

    #[test]
    fn replay_of_serialized_log_matches() {
        let (live, log) = live_log();
        let mut buf = Vec::new();
        write_log(&mut buf, &log).unwrap();
        let parsed = parse_log(&buf[..]).unwrap();
        assert_eq!(parsed, log);
        assert_eq!(replay(&parsed).unwrap(), replay(&log).unwrap());
        assert_eq!(replay(&log).unwrap(), live);
    }

    #[test]
    fn replay_rejects_malformed_events() {
        let (_, mut log) = live_log();
        // Tamper: point a reward at a different arm.
        for e in log.iter_mut() {
            if let Event::Rewarded { arm, .. } = &mut e.event {
                *arm = 1 - *arm;
                break;
            }
        }
        let seq = log.iter().find(|e| matches!(e.event, Event::Rewarded { .. })).unwrap().sequence;
        match replay(&log) {
            Err(Error::Replay { sequence, .. }) => assert_eq!(sequence, seq),
            other => panic!("{other:?}"),
        }
        assert!(matches!(replay(&[]), Err(Error::Replay { .. })));
        assert!(matches!(replay(&[ev(1)]), Err(Error::Replay { sequence: 1, .. })));
    }

    #[test]
    fn export_rows_and_csv() {
        let (_, log) = live_log();
        let rows = export_table(&log);
        assert_eq!(rows.len(), 3);
        assert_eq!(rows.iter().filter(|r| r.reward.is_some()).count(), 2);
        let mut buf = Vec::new();
        write_csv(&mut buf, &rows).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("sequence,participant_id,policy,arm,reward\n"));
        assert!(text.lines().nth(2).unwrap().ends_with(','));
        let back = read_csv(&buf[..]).unwrap();
        assert_eq!(back, rows);
        let mut again = Vec::new();
        write_csv(&mut again, &back).unwrap();
        assert_eq!(again, buf);
    }

    #[test]
    fn csv_rejects_bad_header() {
        assert!(read_csv("a,b\n1,2\n".as_bytes()).is_err());
        assert!(read_csv("sequence,participant_id,policy,arm,reward\n2,p,UR,0,7\n".as_bytes()).is_err());
    }

    #[test]
    fn snapshot_verification() {
        let dir = tempfile::tempdir().unwrap();
        let store = FileStore::open(dir.path()).unwrap();
        let (live, log) = live_log();
        let snap = Snapshot::of(&live);
        store.write_snapshot(&snap).unwrap();
        let loaded = store.load_snapshot("e").unwrap().unwrap();
        assert_eq!(loaded, snap);
        assert_eq!(loaded.verify(&log).unwrap(), Verification::Match);

        let mut tampered = snap.clone();
        tampered.state.committed[0].successes += 1;
        assert!(matches!(tampered.verify(&log).unwrap(), Verification::Mismatch { ref field, .. } if field == "committed"));
        assert_eq!(store.load_snapshot("missing").unwrap(), None);
    }
}
