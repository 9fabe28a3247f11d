//! Seeded synthetic corpora and labelled tasks. They stand in for the real
//! datasets in tests, diagnostics and the end-to-end demo.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use crate::text::{
    CorpusDocument, DataError, LabelSet, Position, TaskExample, TaskTarget, ASPECT_L1_LABELS,
};

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// A short cycle of fixed sentences repeated until the stream, counting one
/// `<eos>` per document, holds `n_tokens` tokens.
pub fn memorizable_corpus(n_tokens: usize, seed: u64) -> Vec<Vec<String>> {
    let mut r = rng(seed);
    let words: Vec<String> = (0..16).map(|i| format!("m{i}")).collect();
    let sentences: Vec<Vec<String>> = (0..6)
        .map(|s| {
            let len = r.gen_range(5..=9);
            // A distinct opening word tells the sentences apart.
            let mut toks = vec![format!("start{s}")];
            toks.extend((1..len).map(|_| words.choose(&mut r).unwrap().clone()));
            toks
        })
        .collect();
    let mut docs = Vec::new();
    let mut used = 0;
    for s in sentences.iter().cycle() {
        if used >= n_tokens {
            break;
        }
        let room = n_tokens - used;
        if room < 2 {
            break;
        }
        let take = s.len().min(room - 1);
        docs.push(s[..take].to_vec());
        used += take + 1;
    }
    docs
}

/// Token world with `n_topics` topics. A sentence draws most of its words
/// from one topic and the rest from shared filler words.
#[derive(Clone, Debug)]
struct Topics {
    n_topics: usize,
    words_per_topic: usize,
    fillers: usize,
}

impl Topics {
    fn topic_word(&self, k: usize, i: usize) -> String {
        format!("t{k}w{i}")
    }

    fn sentence<R: Rng>(&self, k: usize, skew: f64, extra: &[String], r: &mut R) -> Vec<String> {
        let len = r.gen_range(6..=10);
        (0..len)
            .map(|_| {
                let u: f64 = r.gen();
                if u < 0.2 {
                    format!("f{}", r.gen_range(0..self.fillers))
                } else if !extra.is_empty() && u < 0.3 {
                    extra.choose(r).unwrap().clone()
                } else {
                    // skew > 1 concentrates mass on the low word indices
                    let x: f64 = r.gen::<f64>().powf(skew);
                    let i =
                        ((x * self.words_per_topic as f64) as usize).min(self.words_per_topic - 1);
                    self.topic_word(k, i)
                }
            })
            .collect()
    }
}

/// Two LM corpora over shared topic structure plus a small labelled task in
/// the second domain. The label is the sentence topic.
#[derive(Clone, Debug)]
pub struct TransferTask {
    /// General-domain corpus for LM pretraining.
    pub general: Vec<Vec<String>>,
    /// Target-domain corpus for LM fine-tuning.
    pub domain: Vec<Vec<String>>,
    pub train: Vec<TaskExample>,
    pub valid: Vec<TaskExample>,
    pub labels: LabelSet,
}

pub fn transfer_task(seed: u64, n_train: usize, n_valid: usize) -> TransferTask {
    let mut r = rng(seed);
    let world = Topics {
        n_topics: 4,
        words_per_topic: 12,
        fillers: 6,
    };
    let domain_words: Vec<Vec<String>> = (0..world.n_topics)
        .map(|k| (0..3).map(|i| format!("t{k}d{i}")).collect())
        .collect();
    let general = (0..240)
        .map(|i| world.sentence(i % world.n_topics, 1.0, &[], &mut r))
        .collect();
    let domain = (0..160)
        .map(|i| {
            let k = i % world.n_topics;
            world.sentence(k, 1.6, &domain_words[k], &mut r)
        })
        .collect();
    let example = |r: &mut ChaCha8Rng| {
        let k = r.gen_range(0..world.n_topics);
        TaskExample {
            tokens: world.sentence(k, 1.6, &domain_words[k], r),
            target: TaskTarget::Class(format!("topic{k}")),
        }
    };
    let train = (0..n_train).map(|_| example(&mut r)).collect();
    let valid = (0..n_valid).map(|_| example(&mut r)).collect();
    let labels = LabelSet::new((0..world.n_topics).map(|k| format!("topic{k}"))).expect("distinct");
    TransferTask {
        general,
        domain,
        train,
        valid,
        labels,
    }
}

/// Coarse and fine labelled sets over one token world: 4 coarse classes,
/// each split into 3 fine classes.
#[derive(Clone, Debug)]
pub struct HierarchicalTask {
    pub coarse_train: Vec<TaskExample>,
    pub coarse_valid: Vec<TaskExample>,
    pub coarse_labels: LabelSet,
    pub fine_train: Vec<TaskExample>,
    pub fine_valid: Vec<TaskExample>,
    pub fine_labels: LabelSet,
}

pub const N_COARSE: usize = 4;
pub const FINE_PER_COARSE: usize = 3;

fn hierarchical_sentence<R: Rng>(fine: usize, r: &mut R) -> Vec<String> {
    let coarse = fine / FINE_PER_COARSE;
    let len = r.gen_range(6..=9);
    (0..len)
        .map(|_| {
            let u: f64 = r.gen();
            if u < 0.25 {
                format!("f{}", r.gen_range(0..6))
            } else if u < 0.55 {
                format!("g{fine}m{}", r.gen_range(0..3))
            } else {
                format!("c{coarse}w{}", r.gen_range(0..8))
            }
        })
        .collect()
}

pub fn hierarchical_task(
    seed: u64,
    n_coarse_train: usize,
    n_fine_train: usize,
    n_valid: usize,
) -> HierarchicalTask {
    let mut r = rng(seed);
    let n_fine = N_COARSE * FINE_PER_COARSE;
    let draw = |n: usize, coarse: bool, r: &mut ChaCha8Rng| -> Vec<TaskExample> {
        (0..n)
            .map(|_| {
                let fine = r.gen_range(0..n_fine);
                let label = if coarse {
                    format!("coarse{}", fine / FINE_PER_COARSE)
                } else {
                    format!("fine{fine}")
                };
                TaskExample {
                    tokens: hierarchical_sentence(fine, r),
                    target: TaskTarget::Class(label),
                }
            })
            .collect()
    };
    let coarse_train = draw(n_coarse_train, true, &mut r);
    let coarse_valid = draw(n_valid, true, &mut r);
    let fine_train = draw(n_fine_train, false, &mut r);
    let fine_valid = draw(n_valid, false, &mut r);
    HierarchicalTask {
        coarse_train,
        coarse_valid,
        coarse_labels: LabelSet::new((0..N_COARSE).map(|c| format!("coarse{c}")))
            .expect("distinct"),
        fine_train,
        fine_valid,
        fine_labels: LabelSet::new((0..n_fine).map(|f| format!("fine{f}"))).expect("distinct"),
    }
}

const FINE_ASPECTS: [(&str, &str); 12] = [
    ("Appointment", "Corporate"),
    ("Legal", "Corporate"),
    ("Risks", "Corporate"),
    ("Central Banks", "Economy"),
    ("Currency", "Economy"),
    ("Trade", "Economy"),
    ("Conditions", "Market"),
    ("Volatility", "Market"),
    ("Regulation", "Market"),
    ("Coverage", "Stock"),
    ("Price Action", "Stock"),
    ("Technical Analysis", "Stock"),
];

const ENTITIES: [&str; 8] = [
    "Acme", "Borealis", "Cobalt", "Dynamo", "Everline", "Fjord", "Granite", "Helix",
];
const POSITIVE: [&str; 5] = ["surges", "beats", "upgrade", "strong", "rally"];
const NEGATIVE: [&str; 5] = ["slumps", "misses", "downgrade", "weak", "selloff"];

fn aspect_words(aspect: &str) -> Vec<String> {
    let stem: String = aspect
        .to_lowercase()
        .chars()
        .filter(|c| c.is_alphanumeric())
        .collect();
    (0..3).map(|i| format!("{stem}{i}")).collect()
}

/// A sentence about `entity` under one aspect, and its sentiment in [-1, 1].
fn finance_sentence<R: Rng>(entity: &str, aspect: usize, r: &mut R) -> (String, f64) {
    let words = aspect_words(FINE_ASPECTS[aspect].0);
    let mut toks = vec![entity.to_string()];
    let (mut pos, mut neg) = (0usize, 0usize);
    for _ in 0..r.gen_range(5..=9) {
        let u: f64 = r.gen();
        if u < 0.4 {
            toks.push(words.choose(r).unwrap().clone());
        } else if u < 0.55 {
            toks.push(POSITIVE.choose(r).unwrap().to_string());
            pos += 1;
        } else if u < 0.7 {
            toks.push(NEGATIVE.choose(r).unwrap().to_string());
            neg += 1;
        } else {
            toks.push(
                ["the", "shares", "after", "on", "and", "its"]
                    .choose(r)
                    .unwrap()
                    .to_string(),
            );
        }
    }
    let total = (pos + neg).max(1) as f64;
    let s = ((pos as f64 - neg as f64) / total * 0.9 * 1000.0).round() / 1000.0;
    (format!("{}.", toks.join(" ")), s)
}

/// Writes a miniature end-to-end dataset into `dir`: `general.txt` (plain
/// corpus), `vic.jsonl` (domain write-ups, half with a position),
/// `hierarchy.json`, and `fiqa_train.jsonl` / `fiqa_valid.jsonl`.
pub fn write_demo_files(dir: &Path, seed: u64, n_fiqa: usize) -> Result<(), DataError> {
    let io = |path: &Path| {
        let path = path.to_path_buf();
        move |source| DataError::Io { path, source }
    };
    std::fs::create_dir_all(dir).map_err(io(dir))?;
    let mut r = rng(seed);

    let mut general = String::new();
    for _ in 0..300 {
        let e = ENTITIES.choose(&mut r).unwrap();
        let a = r.gen_range(0..FINE_ASPECTS.len());
        general.push_str(&finance_sentence(e, a, &mut r).0);
        general.push('\n');
    }
    let p = dir.join("general.txt");
    std::fs::write(&p, general).map_err(io(&p))?;

    let mut vic = String::new();
    for i in 0..120 {
        let e = ENTITIES.choose(&mut r).unwrap();
        let parts: Vec<(String, f64)> = (0..3)
            .map(|_| finance_sentence(e, r.gen_range(0..FINE_ASPECTS.len()), &mut r))
            .collect();
        let mood: f64 = parts.iter().map(|p| p.1).sum();
        let text: Vec<&str> = parts.iter().map(|p| p.0.as_str()).collect();
        let position = (i % 2 == 0).then_some({
            if mood >= 0.0 {
                Position::Long
            } else {
                Position::Short
            }
        });
        let doc = CorpusDocument {
            doc_id: format!("vic-{i:04}"),
            text: text.join(" "),
            position,
        };
        vic.push_str(&serde_json::to_string(&doc).expect("serializable"));
        vic.push('\n');
    }
    let p = dir.join("vic.jsonl");
    std::fs::write(&p, vic).map_err(io(&p))?;

    let hierarchy: BTreeMap<&str, &str> = FINE_ASPECTS.iter().copied().collect();
    let p = dir.join("hierarchy.json");
    std::fs::write(
        &p,
        serde_json::to_string_pretty(&hierarchy).expect("serializable"),
    )
    .map_err(io(&p))?;

    let n_valid = (n_fiqa / 4).max(1);
    for (name, n) in [("fiqa_train.jsonl", n_fiqa), ("fiqa_valid.jsonl", n_valid)] {
        let mut out = String::new();
        for _ in 0..n {
            let e = ENTITIES.choose(&mut r).unwrap();
            let a = r.gen_range(0..FINE_ASPECTS.len());
            let (sentence, sentiment) = finance_sentence(e, a, &mut r);
            let rec = json!({
                "sentence": sentence,
                "target": e,
                "aspect_l1": FINE_ASPECTS[a].1,
                "aspect_l2": FINE_ASPECTS[a].0,
                "sentiment": sentiment,
            });
            out.push_str(&rec.to_string());
            out.push('\n');
        }
        let p = dir.join(name);
        std::fs::write(&p, out).map_err(io(&p))?;
    }
    debug_assert!(FINE_ASPECTS
        .iter()
        .all(|(_, l1)| ASPECT_L1_LABELS.contains(l1)));
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::text::{load_fiqa, load_vic, AspectHierarchy};

    #[test]
    fn memorizable_corpus_has_exact_length() {
        let docs = memorizable_corpus(500, 3);
        let n: usize = docs.iter().map(|d| d.len() + 1).sum();
        assert_eq!(n, 500);
        assert_eq!(docs, memorizable_corpus(500, 3));
    }

    #[test]
    fn hierarchical_labels_nest() {
        let t = hierarchical_task(1, 10, 10, 10);
        assert_eq!(t.coarse_labels.len(), 4);
        assert_eq!(t.fine_labels.len(), 12);
        for ex in &t.fine_train {
            let TaskTarget::Class(label) = &ex.target else {
                panic!()
            };
            let fine: usize = label[4..].parse().unwrap();
            let coarse = fine / FINE_PER_COARSE;
            assert!(ex
                .tokens
                .iter()
                .any(|t| t.starts_with(&format!("g{fine}m"))
                    || t.starts_with(&format!("c{coarse}w"))));
        }
    }

    #[test]
    fn demo_files_load() {
        let dir = tempfile::tempdir().unwrap();
        write_demo_files(dir.path(), 5, 40).unwrap();
        let h = AspectHierarchy::load(&dir.path().join("hierarchy.json")).unwrap();
        let fiqa = load_fiqa(&dir.path().join("fiqa_train.jsonl"), &h, true).unwrap();
        assert_eq!(fiqa.records.len(), 40);
        let vic = load_vic(&dir.path().join("vic.jsonl"), true).unwrap();
        assert_eq!(vic.records.len(), 120);
        assert_eq!(vic.records.iter().filter(|d| d.is_auxiliary()).count(), 60);
    }
}
