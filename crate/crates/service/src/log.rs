//! Append-only experiment log: one serialized feedback record per line.
//!
//! Every record is written with a single `write_all` of `line + "\n"` while
//! holding the writer lock, so a crash can only leave a torn final line.
//! Opening the log drops such a tail.

use std::fs::{File, OpenOptions};
use std::io::{Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use feedback_core::encoding::{parse_feedback, serialize_feedback, StandardizedFeedback};

use crate::error::ServiceError;

struct Writer {
    file: File,
    len: u64,
    lines: u64,
}

pub struct FeedbackLog {
    path: PathBuf,
    writer: Mutex<Writer>,
}

impl FeedbackLog {
    /// Opens or creates the log, returning it with every complete record.
    pub fn open(path: impl AsRef<Path>) -> Result<(Self, Vec<StandardizedFeedback>), ServiceError> {
        let path = path.as_ref().to_path_buf();
        let mut file = OpenOptions::new()
            .create(true)
            .read(true)
            .append(true)
            .open(&path)?;
        let mut bytes = Vec::new();
        file.read_to_end(&mut bytes)?;
        let good = bytes.iter().rposition(|&b| b == b'\n').map_or(0, |i| i + 1);
        if good < bytes.len() {
            log::warn!("dropping torn tail of {} at byte {good}", path.display());
            file.set_len(good as u64)?;
            file.seek(SeekFrom::End(0))?;
        }
        let records = parse_lines(&bytes[..good])?;
        let writer = Writer {
            file,
            len: good as u64,
            lines: records.len() as u64,
        };
        Ok((
            FeedbackLog {
                path,
                writer: Mutex::new(writer),
            },
            records,
        ))
    }

    /// Appends one record as a single write.
    pub fn append(&self, fb: &StandardizedFeedback) -> Result<(), ServiceError> {
        let mut line = serialize_feedback(fb)?;
        line.push('\n');
        let mut w = self.writer.lock().expect("log writer poisoned");
        w.file.write_all(line.as_bytes())?;
        w.file.flush()?;
        w.len += line.len() as u64;
        w.lines += 1;
        Ok(())
    }

    /// Current length in bytes and records.
    pub fn size(&self) -> (u64, u64) {
        let w = self.writer.lock().expect("log writer poisoned");
        (w.len, w.lines)
    }

    /// Byte-exact copy of the first `len` bytes (the whole log when `None`).
    pub fn read_bytes(&self, len: Option<u64>) -> Result<Vec<u8>, ServiceError> {
        let len = len.unwrap_or_else(|| self.size().0);
        let mut out = Vec::with_capacity(len as usize);
        File::open(&self.path)?.take(len).read_to_end(&mut out)?;
        Ok(out)
    }

    /// Records in the first `len` bytes.
    pub fn read_records(
        &self,
        len: Option<u64>,
    ) -> Result<Vec<StandardizedFeedback>, ServiceError> {
        parse_lines(&self.read_bytes(len)?)
    }
}

fn parse_lines(bytes: &[u8]) -> Result<Vec<StandardizedFeedback>, ServiceError> {
    let text = std::str::from_utf8(bytes)
        .map_err(|e| ServiceError::Corrupt(format!("log is not UTF-8: {e}")))?;
    text.lines()
        .enumerate()
        .map(|(i, l)| {
            parse_feedback(l).map_err(|e| ServiceError::Corrupt(format!("log line {}: {e}", i + 1)))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use feedback_core::encoding::*;

    fn record(id: u64) -> StandardizedFeedback {
        StandardizedFeedback {
            feedback_id: id,
            targets: vec![Target::all()],
            type_tag: FeedbackTypeTag::new(
                Intention::Evaluate,
                Relation::Absolute,
                Granularity::Entire,
            ),
            content: FeedbackContent::Evaluation {
                score: 0.25,
                feature_mask: None,
            },
            meta: FeedbackMeta::default(),
        }
    }

    #[test]
    fn reopen_returns_records() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("feedback.log");
        {
            let (log, recs) = FeedbackLog::open(&p).unwrap();
            assert!(recs.is_empty());
            for i in 0..5 {
                log.append(&record(i)).unwrap();
            }
            assert_eq!(log.size().1, 5);
        }
        let (_, recs) = FeedbackLog::open(&p).unwrap();
        assert_eq!(recs, (0..5).map(record).collect::<Vec<_>>());
    }

    #[test]
    fn torn_tail_is_dropped() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("feedback.log");
        {
            let (log, _) = FeedbackLog::open(&p).unwrap();
            log.append(&record(0)).unwrap();
            log.append(&record(1)).unwrap();
        }
        let full = std::fs::read(&p).unwrap();
        std::fs::write(&p, &full[..full.len() - 7]).unwrap();
        let (log, recs) = FeedbackLog::open(&p).unwrap();
        assert_eq!(recs.len(), 1);
        log.append(&record(2)).unwrap();
        let (_, recs) = FeedbackLog::open(&p).unwrap();
        assert_eq!(
            recs.iter().map(|r| r.feedback_id).collect::<Vec<_>>(),
            vec![0, 2]
        );
    }
}
