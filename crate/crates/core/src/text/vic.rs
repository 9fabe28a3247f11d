use std::collections::HashSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{json_records, read_file, DataError, Loaded};

/// Stance of an investment write-up.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Position {
    Long,
    Short,
}

impl Position {
    pub fn as_str(self) -> &'static str {
        match self {
            Position::Long => "long",
            Position::Short => "short",
        }
    }
}

/// A domain-corpus document. Documents with a position also take part in
/// the long/short auxiliary task.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusDocument {
    pub doc_id: String,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub position: Option<Position>,
}

impl CorpusDocument {
    pub fn is_auxiliary(&self) -> bool {
        self.position.is_some()
    }
}

fn validate(index: usize, value: serde_json::Value) -> Result<CorpusDocument, DataError> {
    let obj = value
        .as_object()
        .ok_or_else(|| DataError::invalid(index, "record is not an object"))?;
    let field = |name: &str| -> Result<String, DataError> {
        obj.get(name)
            .and_then(|v| v.as_str())
            .map(str::to_string)
            .ok_or_else(|| DataError::invalid(index, format!("missing string field {name:?}")))
    };
    let doc_id = field("doc_id")?;
    let text = field("text")?;
    let position = match obj.get("position") {
        None | Some(serde_json::Value::Null) => None,
        Some(serde_json::Value::String(s)) if s == "long" => Some(Position::Long),
        Some(serde_json::Value::String(s)) if s == "short" => Some(Position::Short),
        Some(other) => {
            return Err(DataError::invalid(
                index,
                format!("position {other} is not \"long\" or \"short\""),
            ))
        }
    };
    Ok(CorpusDocument {
        doc_id,
        text,
        position,
    })
}

/// Parses VIC-style JSON-lines. Duplicate `doc_id`s count as invalid
/// records.
pub fn parse_vic(text: &str, strict: bool) -> Result<Loaded<CorpusDocument>, DataError> {
    let mut out = Loaded::default();
    let mut seen = HashSet::new();
    let records = json_records(text)?;
    if records.is_empty() {
        log::warn!("VIC input holds no records");
    }
    for (index, rec) in records.into_iter().enumerate() {
        let res = rec
            .map_err(|e| DataError::invalid(index, e))
            .and_then(|v| validate(index, v))
            .and_then(|d| {
                if seen.contains(&d.doc_id) {
                    Err(DataError::invalid(
                        index,
                        format!("duplicate doc_id {:?}", d.doc_id),
                    ))
                } else {
                    Ok(d)
                }
            });
        match res {
            Ok(d) => {
                seen.insert(d.doc_id.clone());
                out.records.push(d);
            }
            Err(e) if strict => return Err(e),
            Err(e) => {
                log::warn!("skipping VIC {e}");
                out.skipped.push((index, e.to_string()));
            }
        }
    }
    Ok(out)
}

pub fn load_vic(path: &Path, strict: bool) -> Result<Loaded<CorpusDocument>, DataError> {
    parse_vic(&read_file(path)?, strict)
}

/// Plain-text corpus: one document per non-blank line.
pub fn load_text_corpus(path: &Path) -> Result<Vec<String>, DataError> {
    Ok(read_file(path)?
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(String::from)
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn position_flags_auxiliary_docs() {
        let text = "{\"doc_id\":\"d1\",\"text\":\"buy\",\"position\":\"long\"}\n{\"doc_id\":\"d2\",\"text\":\"meh\"}\n";
        let got = parse_vic(text, true).unwrap().records;
        assert!(got[0].is_auxiliary());
        assert_eq!(got[0].position, Some(Position::Long));
        assert!(!got[1].is_auxiliary());
    }

    #[test]
    fn bad_position_rejected() {
        let text = "{\"doc_id\":\"d1\",\"text\":\"x\",\"position\":\"neutral\"}";
        assert!(parse_vic(text, true).is_err());
        let lenient = parse_vic(text, false).unwrap();
        assert!(lenient.records.is_empty());
        assert_eq!(lenient.skipped.len(), 1);
    }

    #[test]
    fn duplicate_doc_id_is_an_error() {
        let text = "{\"doc_id\":\"d1\",\"text\":\"x\"}\n{\"doc_id\":\"d1\",\"text\":\"y\"}";
        match parse_vic(text, true) {
            Err(DataError::Validation { index, reason }) => {
                assert_eq!(index, 1);
                assert!(reason.contains("duplicate"));
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn serializes_without_absent_position() {
        let d = CorpusDocument {
            doc_id: "a".into(),
            text: "t".into(),
            position: None,
        };
        assert_eq!(
            serde_json::to_string(&d).unwrap(),
            r#"{"doc_id":"a","text":"t"}"#
        );
    }
}
