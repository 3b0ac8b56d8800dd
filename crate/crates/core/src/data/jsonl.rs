use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Opinion, RawReview};
use crate::error::{Error, Result};

#[derive(Deserialize)]
#[serde(untagged)]
enum OpinionRecord {
    Pair(String, String),
    Named { category: String, polarity: String },
}

#[derive(Deserialize)]
struct Record {
    id: Option<serde_json::Value>,
    text: String,
    #[serde(default)]
    opinions: Vec<OpinionRecord>,
}

#[derive(Serialize)]
struct OutRecord<'a> {
    id: &'a str,
    text: &'a str,
    opinions: Vec<(&'a str, &'a str)>,
}

pub fn parse_jsonl(path: impl AsRef<Path>) -> Result<Vec<RawReview>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_jsonl_str(&text, path)
}

/// One review per line: `{"id": .., "text": .., "opinions": [[category, polarity], ..]}`.
/// Opinions may also be written as `{"category": .., "polarity": ..}` objects.
/// A missing id defaults to the 1-based line number.
pub fn parse_jsonl_str(text: &str, origin: &Path) -> Result<Vec<RawReview>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let at_line = |message: String| Error::ParseLine {
            path: origin.to_path_buf(),
            line: i + 1,
            message,
        };
        let rec: Record = serde_json::from_str(line).map_err(|e| at_line(e.to_string()))?;
        let id = match rec.id {
            None | Some(serde_json::Value::Null) => (i + 1).to_string(),
            Some(serde_json::Value::String(s)) => s,
            Some(other) => other.to_string(),
        };
        let opinions = rec
            .opinions
            .into_iter()
            .map(|o| match o {
                OpinionRecord::Pair(c, p) | OpinionRecord::Named { category: c, polarity: p } => Opinion {
                    category: c.trim().to_string(),
                    polarity: p.trim().to_string(),
                },
            })
            .collect();
        out.push(RawReview::new(id, rec.text, opinions).map_err(|e| at_line(e.to_string()))?);
    }
    Ok(out)
}

pub fn write_jsonl(path: impl AsRef<Path>, reviews: &[RawReview]) -> Result<()> {
    let path = path.as_ref();
    let mut buf = Vec::new();
    for r in reviews {
        let rec = OutRecord {
            id: &r.id,
            text: &r.text,
            opinions: r
                .opinions
                .iter()
                .map(|o| (o.category.as_str(), o.polarity.as_str()))
                .collect(),
        };
        serde_json::to_writer(&mut buf, &rec).map_err(|e| Error::Data(e.to_string()))?;
        buf.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    std::fs::write(path, buf).map_err(|e| Error::io(path, e))
}
