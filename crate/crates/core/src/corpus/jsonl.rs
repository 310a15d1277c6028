use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{QAItem, RawItem, RejectReason, Stage};
use crate::error::{Error, Result};
use crate::io::write_atomic;

type Rejections = Vec<(String, RejectReason)>;

/// One line of an ingestion file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RawRecord {
    #[serde(default)]
    pub id: Option<String>,
    pub question: String,
    pub answer: String,
    #[serde(default)]
    pub rationale: Option<Vec<String>>,
    #[serde(default)]
    pub stage: Option<Stage>,
}

/// Ingested items plus per-line rejections. Lines that are not UTF-8 are
/// rejected as `invalid_utf8`; lines that are not a record are `malformed`.
/// Items without an id are named `line-<n>` (1-based).
pub fn read_raw_items(path: &Path) -> Result<(Vec<RawItem>, Rejections)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut items = Vec::new();
    let mut rejected = Vec::new();
    for (n, line) in bytes.split(|&b| b == b'\n').enumerate() {
        let fallback = format!("line-{}", n + 1);
        if line.iter().all(u8::is_ascii_whitespace) {
            continue;
        }
        let Ok(text) = std::str::from_utf8(line) else {
            rejected.push((fallback, RejectReason::InvalidUtf8));
            continue;
        };
        match serde_json::from_str::<RawRecord>(text) {
            Ok(r) => items.push(RawItem {
                id: r.id.unwrap_or(fallback),
                question: r.question.into_bytes(),
                answer: r.answer.into_bytes(),
                rationale: r.rationale,
                stage: r.stage,
            }),
            Err(_) => rejected.push((fallback, RejectReason::Malformed)),
        }
    }
    Ok((items, rejected))
}

pub fn write_items(path: &Path, items: &[QAItem]) -> Result<()> {
    let mut out = Vec::new();
    for it in items {
        serde_json::to_writer(&mut out, it).map_err(|e| Error::parse(path, e))?;
        out.push(b'\n');
    }
    write_atomic(path, &out)
}

/// Strict reader for files this crate wrote.
pub fn read_items(path: &Path) -> Result<Vec<QAItem>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, l)| serde_json::from_str(l).map_err(|e| Error::parse(path, format!("line {}: {e}", n + 1))))
        .collect()
}

/// CSV with header `id,reason`.
pub fn write_rejections(path: &Path, rejected: &[(String, RejectReason)]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let csv_err = |e: csv::Error| Error::parse(path, e);
    w.write_record(["id", "reason"]).map_err(csv_err)?;
    for (id, reason) in rejected {
        w.write_record([id.as_str(), reason.code()]).map_err(csv_err)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::parse(path, e))?;
    write_atomic(path, &bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ingestion_sorts_good_and_bad_lines() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("raw.jsonl");
        let mut body = Vec::new();
        body.extend_from_slice(b"{\"question\":\"Is 2 > 1?\",\"answer\":\"Yes\"}\n");
        body.extend_from_slice(b"not json\n\n");
        body.extend_from_slice(b"{\"id\":\"x\",\"question\":\"\xff\",\"answer\":\"a\"}\n");
        body.extend_from_slice(b"{\"id\":\"r\",\"question\":\"q\",\"answer\":\"a\",\"rationale\":[\"s1\"]}");
        fs::write(&p, body).unwrap();
        let (items, rejected) = read_raw_items(&p).unwrap();
        assert_eq!(items.len(), 2);
        assert_eq!(items[0].id, "line-1");
        assert_eq!(items[1].rationale.as_deref(), Some(&["s1".to_string()][..]));
        assert_eq!(
            rejected,
            vec![("line-2".to_string(), RejectReason::Malformed), ("line-4".to_string(), RejectReason::InvalidUtf8)]
        );
    }

    #[test]
    fn items_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("sub/items.jsonl");
        let items = crate::corpus::generate_synthetic(Stage::Basic, 5, 1);
        write_items(&p, &items).unwrap();
        assert_eq!(read_items(&p).unwrap(), items);
    }

    #[test]
    fn rejection_log_is_csv() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("rej.csv");
        write_rejections(&p, &[("a,b".into(), RejectReason::TooLong)]).unwrap();
        assert_eq!(fs::read_to_string(&p).unwrap(), "id,reason\n\"a,b\",too_long\n");
    }

    #[test]
    fn missing_file_reports_path() {
        let err = read_items(Path::new("/nonexistent/items.jsonl")).unwrap_err();
        assert!(err.to_string().contains("/nonexistent/items.jsonl"));
    }
}
