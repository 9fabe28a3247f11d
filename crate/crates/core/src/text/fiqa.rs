use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{json_records, read_file, tokenize, DataError, Loaded, EOS};

/// The four coarse FiQA aspect labels.
pub const ASPECT_L1_LABELS: [&str; 4] = ["Corporate", "Economy", "Market", "Stock"];

/// Mapping from each fine (level 2) aspect to its coarse (level 1) parent.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct AspectHierarchy {
    parent: BTreeMap<String, String>,
}

impl AspectHierarchy {
    pub fn new(parent: BTreeMap<String, String>) -> Result<Self, DataError> {
        if parent.is_empty() {
            return Err(DataError::InvalidArgument("empty aspect hierarchy".into()));
        }
        for (l2, l1) in &parent {
            if !ASPECT_L1_LABELS.contains(&l1.as_str()) {
                return Err(DataError::InvalidArgument(format!(
                    "aspect {l2:?} has parent {l1:?}, expected one of {ASPECT_L1_LABELS:?}"
                )));
            }
        }
        Ok(Self { parent })
    }

    pub fn from_json(text: &str) -> Result<Self, DataError> {
        let parent: BTreeMap<String, String> = serde_json::from_str(text)
            .map_err(|e| DataError::InvalidArgument(format!("aspect hierarchy: {e}")))?;
        Self::new(parent)
    }

    pub fn load(path: &Path) -> Result<Self, DataError> {
        Self::from_json(&read_file(path)?)
    }

    pub fn parent(&self, l2: &str) -> Option<&str> {
        self.parent.get(l2).map(String::as_str)
    }

    /// Level 2 labels in sorted order.
    pub fn level2_labels(&self) -> Vec<String> {
        self.parent.keys().cloned().collect()
    }

    pub fn level1_labels(&self) -> Vec<String> {
        ASPECT_L1_LABELS.iter().map(|s| s.to_string()).collect()
    }
}

/// One FiQA record: a headline or post with a target entity, its aspect
/// pair, and a sentiment score in [-1, 1].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabeledExample {
    pub sentence: String,
    pub snippet: String,
    pub target: String,
    pub aspect_l1: String,
    pub aspect_l2: String,
    pub sentiment: f64,
}

/// Which text field feeds the model.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputField {
    #[default]
    Sentence,
    Snippet,
}

impl LabeledExample {
    /// Model input: tokens of the chosen field, `<eos>`, then the target.
    pub fn model_tokens(&self, field: InputField) -> Vec<String> {
        let text = match field {
            InputField::Sentence => &self.sentence,
            InputField::Snippet if !self.snippet.is_empty() => &self.snippet,
            InputField::Snippet => &self.sentence,
        };
        let mut toks = tokenize(text);
        toks.push(EOS.to_string());
        toks.extend(tokenize(&self.target));
        toks
    }
}

#[derive(Deserialize)]
#[serde(untagged)]
enum OneOrMany {
    One(String),
    Many(Vec<String>),
}

impl OneOrMany {
    fn into_vec(self) -> Vec<String> {
        match self {
            OneOrMany::One(s) => vec![s],
            OneOrMany::Many(v) => v,
        }
    }
}

#[derive(Deserialize)]
struct RawRecord {
    sentence: String,
    #[serde(default)]
    snippet: Option<String>,
    target: String,
    aspect_l1: OneOrMany,
    aspect_l2: OneOrMany,
    sentiment: f64,
}

/// Returns the example and the number of extra aspect pairs dropped.
fn validate(
    index: usize,
    value: serde_json::Value,
    hierarchy: &AspectHierarchy,
) -> Result<(LabeledExample, usize), DataError> {
    let raw: RawRecord =
        serde_json::from_value(value).map_err(|e| DataError::invalid(index, e.to_string()))?;
    if !(raw.sentiment.is_finite() && (-1.0..=1.0).contains(&raw.sentiment)) {
        return Err(DataError::invalid(
            index,
            format!("sentiment {} outside [-1, 1]", raw.sentiment),
        ));
    }
    let l1 = raw.aspect_l1.into_vec();
    let l2 = raw.aspect_l2.into_vec();
    let (Some(a1), Some(a2)) = (l1.first(), l2.first()) else {
        return Err(DataError::invalid(index, "missing aspect label"));
    };
    if !ASPECT_L1_LABELS.contains(&a1.as_str()) {
        return Err(DataError::invalid(
            index,
            format!("unknown aspect_l1 {a1:?}; declared {ASPECT_L1_LABELS:?}"),
        ));
    }
    match hierarchy.parent(a2) {
        None => {
            return Err(DataError::invalid(
                index,
                format!("unknown aspect_l2 {a2:?}"),
            ))
        }
        Some(p) if p != a1 => {
            return Err(DataError::invalid(
                index,
                format!("aspect_l2 {a2:?} belongs to {p:?}, not {a1:?}"),
            ))
        }
        Some(_) => {}
    }
    let dropped = l1.len().max(l2.len()) - 1;
    Ok((
        LabeledExample {
            sentence: raw.sentence,
            snippet: raw.snippet.unwrap_or_default(),
            target: raw.target,
            aspect_l1: a1.clone(),
            aspect_l2: a2.clone(),
            sentiment: raw.sentiment,
        },
        dropped,
    ))
}

/// Parses FiQA records from a JSON array or JSON-lines text.
///
/// In strict mode the first invalid record aborts the load; otherwise it is
/// skipped with a warning. Multilabel records keep their first aspect pair.
pub fn parse_fiqa(
    text: &str,
    hierarchy: &AspectHierarchy,
    strict: bool,
) -> Result<Loaded<LabeledExample>, DataError> {
    let mut out = Loaded::default();
    let records = json_records(text)?;
    if records.is_empty() {
        log::warn!("FiQA input holds no records");
    }
    for (index, rec) in records.into_iter().enumerate() {
        let res = rec
            .map_err(|e| DataError::invalid(index, e))
            .and_then(|v| validate(index, v, hierarchy));
        match res {
            Ok((ex, dropped)) => {
                out.multilabel_dropped += dropped;
                out.records.push(ex);
            }
            Err(e) if strict => return Err(e),
            Err(e) => {
                log::warn!("skipping FiQA {e}");
                out.skipped.push((index, e.to_string()));
            }
        }
    }
    if out.multilabel_dropped > 0 {
        log::info!(
            "dropped {} extra aspect pairs from multilabel records",
            out.multilabel_dropped
        );
    }
    Ok(out)
}

pub fn load_fiqa(
    path: &Path,
    hierarchy: &AspectHierarchy,
    strict: bool,
) -> Result<Loaded<LabeledExample>, DataError> {
    parse_fiqa(&read_file(path)?, hierarchy, strict)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn hierarchy() -> AspectHierarchy {
        AspectHierarchy::from_json(
            r#"{"Risks":"Corporate","Volatility":"Market","Coverage":"Stock"}"#,
        )
        .unwrap()
    }

    const TABLE_RECORD: &str = r#"{"sentence":"easyJet expects resilient demand to withstand security fears.","snippet":"resilient demand","target":"easyJet","aspect_l1":"Corporate","aspect_l2":"Risks","sentiment":0.165}"#;

    #[test]
    fn table_record_parses() {
        let got = parse_fiqa(TABLE_RECORD, &hierarchy(), true).unwrap();
        let ex = &got.records[0];
        assert_eq!(
            ex.sentence,
            "easyJet expects resilient demand to withstand security fears."
        );
        assert_eq!(ex.aspect_l1, "Corporate");
        assert_eq!(ex.aspect_l2, "Risks");
        assert_eq!(ex.sentiment, 0.165);
        assert_eq!(ex.target, "easyJet");
        let toks = ex.model_tokens(InputField::Sentence);
        assert_eq!(toks[toks.len() - 2..], ["<eos>", "easyjet"]);
    }

    #[test]
    fn array_form_and_optional_snippet() {
        let text = r#"[{"sentence":"s","target":"t","aspect_l1":"Stock","aspect_l2":"Coverage","sentiment":-1}]"#;
        let got = parse_fiqa(text, &hierarchy(), true).unwrap();
        assert_eq!(got.records[0].snippet, "");
        assert_eq!(got.records[0].sentiment, -1.0);
    }

    #[test]
    fn out_of_range_sentiment_rejected_with_index() {
        let bad = TABLE_RECORD.replace("0.165", "1.5");
        let text = format!("{TABLE_RECORD}\n{bad}\n");
        match parse_fiqa(&text, &hierarchy(), true) {
            Err(DataError::Validation { index, reason }) => {
                assert_eq!(index, 1);
                assert!(reason.contains("sentiment"));
            }
            other => panic!("{other:?}"),
        }
        let lenient = parse_fiqa(&text, &hierarchy(), false).unwrap();
        assert_eq!(lenient.records.len(), 1);
        assert_eq!(lenient.skipped[0].0, 1);
    }

    #[test]
    fn unknown_and_inconsistent_aspects_rejected() {
        let unknown = TABLE_RECORD.replace("\"Risks\"", "\"Weather\"");
        assert!(parse_fiqa(&unknown, &hierarchy(), true).is_err());
        let wrong_parent = TABLE_RECORD.replace("\"Risks\"", "\"Volatility\"");
        assert!(parse_fiqa(&wrong_parent, &hierarchy(), true).is_err());
        let bad_l1 = TABLE_RECORD.replace("\"Corporate\"", "\"Weather\"");
        assert!(parse_fiqa(&bad_l1, &hierarchy(), true).is_err());
    }

    #[test]
    fn multilabel_keeps_first_pair() {
        let text = r#"{"sentence":"s","target":"t","aspect_l1":["Corporate","Market"],"aspect_l2":["Risks","Volatility"],"sentiment":0.2}"#;
        let got = parse_fiqa(text, &hierarchy(), true).unwrap();
        assert_eq!(got.records[0].aspect_l2, "Risks");
        assert_eq!(got.multilabel_dropped, 1);
    }

    #[test]
    fn empty_file_is_empty() {
        assert!(parse_fiqa("", &hierarchy(), true)
            .unwrap()
            .records
            .is_empty());
        assert!(parse_fiqa("\n\n", &hierarchy(), true)
            .unwrap()
            .records
            .is_empty());
    }

    #[test]
    fn hierarchy_parents_must_be_level1() {
        assert!(AspectHierarchy::from_json(r#"{"Risks":"Weather"}"#).is_err());
    }

    fn record(sentiment: f64, l1: &str, l2: &str) -> String {
        serde_json::json!({
            "sentence": "s", "target": "t", "aspect_l1": l1, "aspect_l2": l2, "sentiment": sentiment
        })
        .to_string()
    }

    proptest! {
        #[test]
        fn accepted_records_satisfy_invariants(
            s in -3.0f64..3.0,
            l1 in prop::sample::select(vec!["Corporate", "Market", "Stock", "Economy", "Bogus"]),
            l2 in prop::sample::select(vec!["Risks", "Volatility", "Coverage", "Bogus"]),
        ) {
            let h = hierarchy();
            let res = parse_fiqa(&record(s, l1, l2), &h, true);
            let valid = (-1.0..=1.0).contains(&s) && h.parent(l2) == Some(l1);
            prop_assert_eq!(res.is_ok(), valid);
            if let Ok(got) = res {
                let ex = &got.records[0];
                prop_assert!((-1.0..=1.0).contains(&ex.sentiment));
                prop_assert_eq!(h.parent(&ex.aspect_l2), Some(ex.aspect_l1.as_str()));
            }
        }
    }
}
