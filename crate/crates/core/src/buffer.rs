//! Persistent episode buffer.
//!
//! Store directory layout:
//!
//! - `episodes.log`: append-only, one entry per line:
//!   `CRC32(hex, 8 chars) TAB JSON NEWLINE`, where the checksum covers the JSON
//!   bytes and the JSON is either `{"episode":{...}}` or `{"label":{...}}`.
//! - `episodes.idx`: sidecar index, fully rebuildable from the log. First line
//!   is `{"v":1,"log_len":N}`, then one JSON object per episode. When the
//!   recorded `log_len` is shorter than the log, only the tail is rescanned;
//!   when the index is missing or unreadable, the whole log is rescanned.
//! - `episodes.lock`: held exclusively by the single writer.
//!
//! Readers work on an immutable snapshot of the index, so lookups proceed
//! while a write is in progress.

use std::collections::HashMap;
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, RwLock};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::encoding::{EpisodeCatalog, EpisodeId};
use crate::gridworld::{Action, EpisodeRecord, Observation};

const LOG_FILE: &str = "episodes.log";
const INDEX_FILE: &str = "episodes.idx";
const LOCK_FILE: &str = "episodes.lock";
const INDEX_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum BufferError {
    #[error("episode {0} not found")]
    NotFound(EpisodeId),
    #[error("corrupt record: {0}")]
    CorruptRecord(String),
    #[error("range {start}..{end} invalid for episode of length {len}")]
    Range { start: usize, end: usize, len: usize },
    #[error("store at {0} is locked by another writer")]
    Locked(PathBuf),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndexEntry {
    pub offset: u64,
    pub length: u64,
    pub total_return: f64,
    pub skill_level: u64,
    pub episode_len: usize,
    pub labeled_count: u64,
    pub flagged: bool,
}

/// In-memory index over the stored episodes.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct BufferIndex {
    entries: HashMap<EpisodeId, IndexEntry>,
    /// Sorted by (skill_level, total_return, id).
    ordering: Vec<EpisodeId>,
}

impl BufferIndex {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: &EpisodeId) -> Option<&IndexEntry> {
        self.entries.get(id)
    }

    pub fn contains(&self, id: &EpisodeId) -> bool {
        self.entries.contains_key(id)
    }

    /// Episode ids ordered by skill level, then total return.
    pub fn ordering(&self) -> &[EpisodeId] {
        &self.ordering
    }

    pub fn iter(&self) -> impl Iterator<Item = (&EpisodeId, &IndexEntry)> {
        self.ordering.iter().map(|id| (id, &self.entries[id]))
    }

    fn sort_key<'a>(&'a self, id: &'a EpisodeId) -> (u64, f64, &'a EpisodeId) {
        let e = &self.entries[id];
        (e.skill_level, e.total_return, id)
    }

    fn insert(&mut self, id: EpisodeId, entry: IndexEntry) {
        let key = (entry.skill_level, entry.total_return);
        let pos = self.ordering.partition_point(|other| {
            let (s, r, oid) = self.sort_key(other);
            (s, r)
                .partial_cmp(&key)
                .map(|o| o.then_with(|| oid.cmp(&id)))
                .is_some_and(|o| o.is_lt())
        });
        self.ordering.insert(pos, id.clone());
        self.entries.insert(id, entry);
    }

    fn rebuild_ordering(&mut self) {
        let mut ids: Vec<EpisodeId> = self.entries.keys().cloned().collect();
        ids.sort_by(|a, b| {
            let (sa, ra, _) = self.sort_key(a);
            let (sb, rb, _) = self.sort_key(b);
            sa.cmp(&sb).then(ra.total_cmp(&rb)).then_with(|| a.cmp(b))
        });
        self.ordering = ids;
    }

    pub fn is_sorted(&self) -> bool {
        self.ordering.windows(2).all(|w| {
            let (sa, ra, _) = self.sort_key(&w[0]);
            let (sb, rb, _) = self.sort_key(&w[1]);
            (sa, ra) <= (sb, rb)
        })
    }
}

impl EpisodeCatalog for BufferIndex {
    fn episode_len(&self, id: &EpisodeId) -> Option<usize> {
        self.entries.get(id).map(|e| e.episode_len)
    }
}

/// Contiguous sub-range of an episode. `states` has one more element than `actions`.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentView {
    pub start: usize,
    pub end: usize,
    pub states: Vec<Observation>,
    pub actions: Vec<Action>,
    pub gt_rewards: Vec<f64>,
}

impl SegmentView {
    pub fn of(ep: &EpisodeRecord, start: usize, end: usize) -> Result<Self, BufferError> {
        let len = ep.len();
        if start >= end || end > len {
            return Err(BufferError::Range { start, end, len });
        }
        Ok(SegmentView {
            start,
            end,
            states: ep.states[start..=end].to_vec(),
            actions: ep.actions[start..end].to_vec(),
            gt_rewards: ep.gt_rewards[start..end].to_vec(),
        })
    }

    pub fn gt_return(&self) -> f64 {
        self.gt_rewards.iter().sum()
    }
}

/// Anything that can hand out stored episodes.
pub trait EpisodeSource: EpisodeCatalog {
    fn fetch(&self, id: &EpisodeId) -> Result<EpisodeRecord, BufferError>;
}

impl EpisodeCatalog for HashMap<EpisodeId, EpisodeRecord> {
    fn episode_len(&self, id: &EpisodeId) -> Option<usize> {
        self.get(id).map(EpisodeRecord::len)
    }
}

impl EpisodeSource for HashMap<EpisodeId, EpisodeRecord> {
    fn fetch(&self, id: &EpisodeId) -> Result<EpisodeRecord, BufferError> {
        self.get(id).cloned().ok_or_else(|| BufferError::NotFound(id.clone()))
    }
}

#[derive(Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum LogEntry {
    Episode(EpisodeRecord),
    Label { id: EpisodeId },
}

#[derive(Serialize, Deserialize)]
struct IndexHeader {
    v: u32,
    log_len: u64,
}

#[derive(Serialize, Deserialize)]
struct IndexLine {
    id: EpisodeId,
    #[serde(flatten)]
    entry: IndexEntry,
}

fn encode_line(entry: &LogEntry) -> Vec<u8> {
    let json = serde_json::to_string(entry).expect("log entries serialize");
    let crc = crc32fast::hash(json.as_bytes());
    format!("{crc:08x}\t{json}\n").into_bytes()
}

fn decode_line(line: &[u8]) -> Result<LogEntry, BufferError> {
    let line = line.strip_suffix(b"\n").ok_or_else(|| {
        BufferError::CorruptRecord("unterminated line".into())
    })?;
    if line.len() < 9 || line[8] != b'\t' {
        return Err(BufferError::CorruptRecord("missing checksum field".into()));
    }
    let crc = std::str::from_utf8(&line[..8])
        .ok()
        .and_then(|s| u32::from_str_radix(s, 16).ok())
        .ok_or_else(|| BufferError::CorruptRecord("bad checksum field".into()))?;
    let json = &line[9..];
    if crc32fast::hash(json) != crc {
        return Err(BufferError::CorruptRecord("checksum mismatch".into()));
    }
    serde_json::from_slice(json).map_err(|e| BufferError::CorruptRecord(e.to_string()))
}

/// Reads every intact episode of a store directory without taking the
/// writer lock, for offline use next to a running writer. Stops at the first
/// torn or corrupt line.
pub fn read_episodes(dir: impl AsRef<Path>) -> Result<HashMap<EpisodeId, EpisodeRecord>, BufferError> {
    let path = dir.as_ref().join(LOG_FILE);
    let bytes = fs::read(&path)?;
    let mut out = HashMap::new();
    for line in bytes.split_inclusive(|&b| b == b'\n') {
        match decode_line(line) {
            Ok(LogEntry::Episode(ep)) => {
                out.entry(ep.id.clone()).or_insert(ep);
            }
            Ok(LogEntry::Label { .. }) => {}
            Err(e) => {
                log::warn!("stopping read of {} early: {e}", path.display());
                break;
            }
        }
    }
    Ok(out)
}

struct Writer {
    log: File,
    log_len: u64,
    index_dirty: bool,
    _lock: File,
}

/// Append-only episode store. One writer, many readers.
pub struct EpisodeStore {
    dir: PathBuf,
    writer: Mutex<Writer>,
    reader: Mutex<File>,
    index: RwLock<Arc<BufferIndex>>,
}

impl EpisodeStore {
    /// Opens (or creates) the store in `dir`.
    pub fn open(dir: impl AsRef<Path>) -> Result<Self, BufferError> {
        let dir = dir.as_ref().to_path_buf();
        fs::create_dir_all(&dir)?;
        let lock = OpenOptions::new()
            .create(true)
            .truncate(false)
            .write(true)
            .open(dir.join(LOCK_FILE))?;
        match lock.try_lock() {
            Ok(()) => {}
            Err(fs::TryLockError::WouldBlock) => return Err(BufferError::Locked(dir)),
            Err(fs::TryLockError::Error(e)) => return Err(e.into()),
        }
        let log_path = dir.join(LOG_FILE);
        let mut log = OpenOptions::new()
            .create(true)
            .read(true)
            .append(true)
            .open(&log_path)?;

        let (mut index, from) = match Self::load_index(&dir) {
            Some((idx, len)) if len <= log.metadata()?.len() => (idx, len),
            _ => (BufferIndex::default(), 0),
        };
        let good_len = Self::scan_into(&mut log, from, &mut index)?;
        if good_len < log.metadata()?.len() {
            log::warn!(
                "truncating torn tail of {} at byte {good_len}",
                log_path.display()
            );
            log.set_len(good_len)?;
        }
        let dirty = from != good_len;
        let reader = File::open(&log_path)?;
        let store = EpisodeStore {
            dir,
            writer: Mutex::new(Writer {
                log,
                log_len: good_len,
                index_dirty: dirty,
                _lock: lock,
            }),
            reader: Mutex::new(reader),
            index: RwLock::new(Arc::new(index)),
        };
        store.sync_index()?;
        Ok(store)
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    fn load_index(dir: &Path) -> Option<(BufferIndex, u64)> {
        let file = File::open(dir.join(INDEX_FILE)).ok()?;
        let mut lines = BufReader::new(file).lines();
        let header: IndexHeader = serde_json::from_str(&lines.next()?.ok()?).ok()?;
        if header.v != INDEX_VERSION {
            return None;
        }
        let mut index = BufferIndex::default();
        for line in lines {
            let l: IndexLine = serde_json::from_str(&line.ok()?).ok()?;
            index.entries.insert(l.id, l.entry);
        }
        index.rebuild_ordering();
        Some((index, header.log_len))
    }

    /// Applies log entries from byte `from` onward. Returns the end of the last intact entry.
    fn scan_into(log: &mut File, from: u64, index: &mut BufferIndex) -> Result<u64, BufferError> {
        log.seek(SeekFrom::Start(from))?;
        let mut reader = BufReader::new(&*log);
        let mut offset = from;
        let mut buf = Vec::new();
        loop {
            buf.clear();
            let n = reader.read_until(b'\n', &mut buf)?;
            if n == 0 {
                break;
            }
            let entry = match decode_line(&buf) {
                Ok(e) => e,
                Err(e) => {
                    log::warn!("stopping log scan at byte {offset}: {e}");
                    break;
                }
            };
            match entry {
                LogEntry::Episode(ep) => {
                    if !index.contains(&ep.id) {
                        index.insert(
                            ep.id.clone(),
                            IndexEntry {
                                offset,
                                length: n as u64,
                                total_return: ep.total_return,
                                skill_level: ep.id.skill_level,
                                episode_len: ep.len(),
                                labeled_count: 0,
                                flagged: false,
                            },
                        );
                    }
                }
                LogEntry::Label { id } => {
                    if let Some(e) = index.entries.get_mut(&id) {
                        e.labeled_count += 1;
                    }
                }
            }
            offset += n as u64;
        }
        Ok(offset)
    }

    /// Current index snapshot.
    pub fn snapshot(&self) -> Arc<BufferIndex> {
        self.index.read().expect("index lock poisoned").clone()
    }

    pub fn len(&self) -> usize {
        self.snapshot().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Appends new episodes; already-stored ids are skipped with a warning.
    /// Returns the number of episodes actually added.
    pub fn ingest(&self, episodes: &[EpisodeRecord]) -> Result<usize, BufferError> {
        let mut w = self.writer.lock().expect("writer lock poisoned");
        let mut index = (*self.snapshot()).clone();
        let mut bytes = Vec::new();
        let mut added = 0;
        for ep in episodes {
            ep.check(None)
                .map_err(|m| BufferError::CorruptRecord(format!("{}: {m}", ep.id)))?;
            if index.contains(&ep.id) {
                log::warn!("episode {} already stored; skipping", ep.id);
                continue;
            }
            let line = encode_line(&LogEntry::Episode(ep.clone()));
            index.insert(
                ep.id.clone(),
                IndexEntry {
                    offset: w.log_len + bytes.len() as u64,
                    length: line.len() as u64,
                    total_return: ep.total_return,
                    skill_level: ep.id.skill_level,
                    episode_len: ep.len(),
                    labeled_count: 0,
                    flagged: false,
                },
            );
            bytes.extend_from_slice(&line);
            added += 1;
        }
        if added > 0 {
            w.log.write_all(&bytes)?;
            w.log.flush()?;
            w.log_len += bytes.len() as u64;
            *self.index.write().expect("index lock poisoned") = Arc::new(index);
            self.write_index(&mut w)?;
        }
        Ok(added)
    }

    /// Reads one episode back from the log.
    pub fn fetch(&self, id: &EpisodeId) -> Result<EpisodeRecord, BufferError> {
        let snap = self.snapshot();
        let entry = snap.get(id).ok_or_else(|| BufferError::NotFound(id.clone()))?;
        let mut buf = vec![0; entry.length as usize];
        {
            let mut r = self.reader.lock().expect("reader lock poisoned");
            r.seek(SeekFrom::Start(entry.offset))?;
            r.read_exact(&mut buf)?;
        }
        match decode_line(&buf)? {
            LogEntry::Episode(ep) if &ep.id == id => Ok(ep),
            _ => Err(BufferError::CorruptRecord(format!(
                "index entry for {id} points at a different record"
            ))),
        }
    }

    pub fn slice(&self, id: &EpisodeId, start: usize, end: usize) -> Result<SegmentView, BufferError> {
        SegmentView::of(&self.fetch(id)?, start, end)
    }

    /// Records one more label on an episode and returns the new count.
    pub fn mark_labeled(&self, id: &EpisodeId) -> Result<u64, BufferError> {
        let mut w = self.writer.lock().expect("writer lock poisoned");
        let mut index = (*self.snapshot()).clone();
        let entry = index
            .entries
            .get_mut(id)
            .ok_or_else(|| BufferError::NotFound(id.clone()))?;
        let line = encode_line(&LogEntry::Label { id: id.clone() });
        w.log.write_all(&line)?;
        w.log.flush()?;
        w.log_len += line.len() as u64;
        entry.labeled_count += 1;
        let count = entry.labeled_count;
        *self.index.write().expect("index lock poisoned") = Arc::new(index);
        w.index_dirty = true;
        Ok(count)
    }

    /// Sets the in-memory highlight flag. Flags live in the sidecar index only.
    pub fn set_flagged(&self, id: &EpisodeId, flagged: bool) -> Result<(), BufferError> {
        let mut w = self.writer.lock().expect("writer lock poisoned");
        let mut index = (*self.snapshot()).clone();
        index
            .entries
            .get_mut(id)
            .ok_or_else(|| BufferError::NotFound(id.clone()))?
            .flagged = flagged;
        *self.index.write().expect("index lock poisoned") = Arc::new(index);
        w.index_dirty = true;
        Ok(())
    }

    /// Sequential scan of every stored episode in log order.
    pub fn scan(&self) -> Result<Vec<EpisodeRecord>, BufferError> {
        let w = self.writer.lock().expect("writer lock poisoned");
        let mut file = File::open(self.dir.join(LOG_FILE))?;
        let mut bytes = Vec::new();
        (&mut file).take(w.log_len).read_to_end(&mut bytes)?;
        drop(w);
        let mut out = Vec::new();
        for line in bytes.split_inclusive(|&b| b == b'\n') {
            if let LogEntry::Episode(ep) = decode_line(line)? {
                out.push(ep);
            }
        }
        Ok(out)
    }

    /// Writes the sidecar index if it is stale.
    pub fn sync_index(&self) -> Result<(), BufferError> {
        let mut w = self.writer.lock().expect("writer lock poisoned");
        if w.index_dirty {
            self.write_index(&mut w)?;
        }
        Ok(())
    }

    fn write_index(&self, w: &mut Writer) -> Result<(), BufferError> {
        let snap = self.snapshot();
        let mut out = serde_json::to_string(&IndexHeader {
            v: INDEX_VERSION,
            log_len: w.log_len,
        })
        .expect("header serializes");
        out.push('\n');
        for (id, entry) in snap.iter() {
            let line = IndexLine {
                id: id.clone(),
                entry: entry.clone(),
            };
            out.push_str(&serde_json::to_string(&line).expect("index line serializes"));
            out.push('\n');
        }
        let tmp = self.dir.join(format!("{INDEX_FILE}.tmp"));
        fs::write(&tmp, out)?;
        fs::rename(&tmp, self.dir.join(INDEX_FILE))?;
        w.index_dirty = false;
        Ok(())
    }
}

impl Drop for EpisodeStore {
    fn drop(&mut self) {
        if let Err(e) = self.sync_index() {
            log::warn!("failed to write episode index: {e}");
        }
    }
}

impl EpisodeCatalog for EpisodeStore {
    fn episode_len(&self, id: &EpisodeId) -> Option<usize> {
        self.snapshot().episode_len(id)
    }
}

impl EpisodeSource for EpisodeStore {
    fn fetch(&self, id: &EpisodeId) -> Result<EpisodeRecord, BufferError> {
        EpisodeStore::fetch(self, id)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gridworld::{rollout_policy, value_iteration, GridSpec, PolicyKind};

    fn episodes(n: usize, eps: f64) -> Vec<EpisodeRecord> {
        let spec = GridSpec::default_8x8();
        let vt = value_iteration(&spec, 1e-9);
        rollout_policy(&spec, &vt, PolicyKind::Epsilon { epsilon: eps }, n, 7)
    }

    #[test]
    fn missing_id_is_not_found() {
        let dir = tempfile::tempdir().unwrap();
        let store = EpisodeStore::open(dir.path()).unwrap();
        let id = EpisodeId::new("x", "y", 0, 0, 0);
        assert!(matches!(store.fetch(&id), Err(BufferError::NotFound(_))));
        assert!(matches!(store.mark_labeled(&id), Err(BufferError::NotFound(_))));
    }

    #[test]
    fn slice_bounds() {
        let dir = tempfile::tempdir().unwrap();
        let store = EpisodeStore::open(dir.path()).unwrap();
        let eps = episodes(1, 0.3);
        store.ingest(&eps).unwrap();
        let id = &eps[0].id;
        let n = eps[0].len();
        let full = store.slice(id, 0, n).unwrap();
        assert_eq!(full.actions, eps[0].actions);
        assert_eq!(full.states, eps[0].states);
        assert_eq!(store.slice(id, 0, 1).unwrap().actions.len(), 1);
        assert!(matches!(store.slice(id, 2, 2), Err(BufferError::Range { .. })));
        assert!(matches!(store.slice(id, 0, n + 1), Err(BufferError::Range { .. })));
    }

    #[test]
    fn corrupt_episode_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let store = EpisodeStore::open(dir.path()).unwrap();
        let mut eps = episodes(1, 0.3);
        eps[0].total_return += 1.0;
        assert!(matches!(store.ingest(&eps), Err(BufferError::CorruptRecord(_))));
        assert_eq!(store.len(), 0);
    }

    #[test]
    fn second_writer_is_locked_out() {
        let dir = tempfile::tempdir().unwrap();
        let _store = EpisodeStore::open(dir.path()).unwrap();
        assert!(matches!(EpisodeStore::open(dir.path()), Err(BufferError::Locked(_))));
    }

    #[test]
    fn torn_tail_is_truncated_on_open() {
        let dir = tempfile::tempdir().unwrap();
        let eps = episodes(3, 0.3);
        {
            let store = EpisodeStore::open(dir.path()).unwrap();
            store.ingest(&eps).unwrap();
        }
        let log = dir.path().join(LOG_FILE);
        let mut f = OpenOptions::new().append(true).open(&log).unwrap();
        f.write_all(b"0000abcd\t{\"episode\":").unwrap();
        drop(f);
        fs::remove_file(dir.path().join(INDEX_FILE)).unwrap();
        let store = EpisodeStore::open(dir.path()).unwrap();
        assert_eq!(store.len(), 3);
        assert_eq!(store.fetch(&eps[2].id).unwrap(), eps[2]);
        store.ingest(&episodes(4, 0.3)[3..]).unwrap();
        assert_eq!(store.scan().unwrap().len(), 4);
    }
}
