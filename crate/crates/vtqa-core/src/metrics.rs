//! Scoring: overall exact match, per-type macro token-F1, and yes/no
//! accuracy through a normalization dictionary.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::io::BufRead;
use std::path::Path;

use serde::{Deserialize, Deserializer, Serialize};
use unicode_normalization::UnicodeNormalization;

use crate::data::Example;
use crate::error::{Error, RecordIssue, Result};

/// Answer category: yes/no, extracted from text, or generated.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AnswerType {
    #[serde(rename = "YN")]
    Yn,
    E,
    G,
}

impl fmt::Display for AnswerType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AnswerType::Yn => write!(f, "YN"),
            AnswerType::E => write!(f, "E"),
            AnswerType::G => write!(f, "G"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum YesNo {
    Yes,
    No,
}

impl fmt::Display for YesNo {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            YesNo::Yes => write!(f, "yes"),
            YesNo::No => write!(f, "no"),
        }
    }
}

fn is_cjk(c: char) -> bool {
    matches!(u32::from(c),
        0x3400..=0x4DBF      // CJK extension A
        | 0x4E00..=0x9FFF    // CJK unified ideographs
        | 0xF900..=0xFAFF    // CJK compatibility ideographs
        | 0x20000..=0x2FA1F  // extensions B..F, supplement
    )
}

// NFKC folds full-width ASCII forms first, so ASCII punctuation plus the
// general/CJK punctuation blocks covers the rest.
fn is_stripped_punct(c: char) -> bool {
    c.is_ascii_punctuation()
        || matches!(u32::from(c), 0x2000..=0x206F | 0x3001..=0x303F | 0xFF01..=0xFF65)
        || c == '·'
}

/// NFKC fold, lowercase, strip punctuation, then tokenize: contiguous
/// non-CJK runs split on whitespace and every CJK codepoint stands alone.
pub fn normalize_answer(s: &str) -> Vec<String> {
    let folded: String = s.nfkc().collect::<String>().to_lowercase();
    let mut tokens = Vec::new();
    let mut current = String::new();
    for c in folded.chars() {
        if is_stripped_punct(c) {
            continue;
        }
        if c.is_whitespace() {
            if !current.is_empty() {
                tokens.push(std::mem::take(&mut current));
            }
        } else if is_cjk(c) {
            if !current.is_empty() {
                tokens.push(std::mem::take(&mut current));
            }
            tokens.push(c.to_string());
        } else {
            current.push(c);
        }
    }
    if !current.is_empty() {
        tokens.push(current);
    }
    tokens
}

/// Canonical string form used as a dictionary / answer-vocabulary key.
pub fn normalize_key(s: &str) -> String {
    normalize_answer(s).join(" ")
}

/// Maps normalized answer phrases to yes or no.
#[derive(Clone, Debug, Default)]
pub struct YnDictionary {
    map: HashMap<String, YesNo>,
}

impl YnDictionary {
    /// Built-in entries; real deployments extend these from a file.
    pub fn seed() -> Self {
        let mut map = HashMap::new();
        for phrase in ["yes", "是", "是的", "可以", "对", "有"] {
            map.insert(normalize_key(phrase), YesNo::Yes);
        }
        for phrase in ["no", "不", "不是", "不可以", "没有", "不对"] {
            map.insert(normalize_key(phrase), YesNo::No);
        }
        YnDictionary { map }
    }

    /// Seed entries extended (and overridden) by a file when given.
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let mut dict = Self::seed();
        if let Some(path) = path {
            let file = std::fs::File::open(path)?;
            dict.extend_from_reader(std::io::BufReader::new(file))?;
        }
        Ok(dict)
    }

    /// Parse `phrase<TAB>yes|no` lines; `#` starts a comment.
    pub fn extend_from_reader(&mut self, reader: impl BufRead) -> Result<()> {
        let mut file_entries: HashMap<String, YesNo> = HashMap::new();
        for (lineno, line) in reader.lines().enumerate() {
            let line = line?;
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (phrase, label) = line.split_once('\t').ok_or_else(|| {
                Error::format(format!("yn dictionary line {}: expected phrase<TAB>yes|no", lineno + 1))
            })?;
            let value = match label.trim() {
                "yes" => YesNo::Yes,
                "no" => YesNo::No,
                other => {
                    return Err(Error::format(format!(
                        "yn dictionary line {}: label `{other}` is not yes|no",
                        lineno + 1
                    )))
                }
            };
            let key = normalize_key(phrase);
            if let Some(prev) = file_entries.insert(key.clone(), value) {
                if prev != value {
                    return Err(Error::format(format!(
                        "yn dictionary maps `{phrase}` to both yes and no"
                    )));
                }
            }
        }
        self.map.extend(file_entries);
        Ok(())
    }

    pub fn lookup(&self, answer: &str) -> Option<YesNo> {
        self.map.get(&normalize_key(answer)).copied()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }
}

/// Dictionary lookup after normalization; `None` means unknown.
pub fn yn_map(answer: &str, dict: &YnDictionary) -> Option<YesNo> {
    dict.lookup(answer)
}

/// Exact match under the protocol: token-identical normalized strings for
/// E/G, dictionary-mapped equality against the gold label for YN.
pub fn exact_match(
    pred: &str,
    gold: &str,
    ty: AnswerType,
    gold_yes_or_no: Option<YesNo>,
    dict: &YnDictionary,
) -> Result<bool> {
    match ty {
        AnswerType::Yn => {
            let label = gold_yes_or_no.ok_or_else(|| {
                Error::contract(format!("YN gold answer `{gold}` is missing its yes_or_no label"))
            })?;
            Ok(yn_map(pred, dict) == Some(label))
        }
        AnswerType::E | AnswerType::G => Ok(normalize_answer(pred) == normalize_answer(gold)),
    }
}

/// Bag-of-tokens F1 over normalized multisets. Both empty scores 1,
/// exactly one empty scores 0.
pub fn token_f1(pred: &str, gold: &str) -> f64 {
    let p = normalize_answer(pred);
    let g = normalize_answer(gold);
    if p.is_empty() && g.is_empty() {
        return 1.0;
    }
    if p.is_empty() || g.is_empty() {
        return 0.0;
    }
    let mut gold_counts: HashMap<&str, usize> = HashMap::new();
    for tok in &g {
        *gold_counts.entry(tok.as_str()).or_insert(0) += 1;
    }
    let mut common = 0usize;
    for tok in &p {
        if let Some(c) = gold_counts.get_mut(tok.as_str()) {
            if *c > 0 {
                *c -= 1;
                common += 1;
            }
        }
    }
    if common == 0 {
        return 0.0;
    }
    let precision = common as f64 / p.len() as f64;
    let recall = common as f64 / g.len() as f64;
    2.0 * precision * recall / (precision + recall)
}

/// qid -> predicted answer string.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
#[serde(transparent)]
pub struct PredictionSet(BTreeMap<String, String>);

impl PredictionSet {
    pub fn new() -> Self {
        PredictionSet(BTreeMap::new())
    }

    /// Duplicate qids are a contract error.
    pub fn insert(&mut self, qid: impl Into<String>, answer: impl Into<String>) -> Result<()> {
        let qid = qid.into();
        if self.0.contains_key(&qid) {
            return Err(Error::contract(format!("duplicate qid `{qid}` in predictions")));
        }
        self.0.insert(qid, answer.into());
        Ok(())
    }

    pub fn get(&self, qid: &str) -> Option<&str> {
        self.0.get(qid).map(|s| s.as_str())
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &str)> {
        self.0.iter().map(|(k, v)| (k.as_str(), v.as_str()))
    }

    pub fn contains(&self, qid: &str) -> bool {
        self.0.contains_key(qid)
    }
}

// Hand-rolled so duplicate keys in a prediction file are rejected instead of
// silently keeping the last one.
impl<'de> Deserialize<'de> for PredictionSet {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        struct V;
        impl<'de> serde::de::Visitor<'de> for V {
            type Value = PredictionSet;

            fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
                write!(f, "a map of qid to answer string")
            }

            fn visit_map<A: serde::de::MapAccess<'de>>(
                self,
                mut access: A,
            ) -> std::result::Result<Self::Value, A::Error> {
                let mut out = PredictionSet::new();
                while let Some((k, v)) = access.next_entry::<String, String>()? {
                    out.insert(k, v).map_err(serde::de::Error::custom)?;
                }
                Ok(out)
            }
        }
        deserializer.deserialize_map(V)
    }
}

/// Per-type example counts.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TypeCounts {
    pub yn: usize,
    pub e: usize,
    pub g: usize,
    pub total: usize,
}

/// Aggregate scores in the four reported columns.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    pub em: f64,
    pub yn_acc: Option<f64>,
    pub e_f1: Option<f64>,
    pub g_f1: Option<f64>,
    pub counts: TypeCounts,
    /// Gold qids with no prediction (scored as wrong).
    pub missing_predictions: usize,
    /// Predicted qids absent from the gold set (ignored).
    pub extra_predictions: usize,
}

impl fmt::Display for ScoreReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fn cell(v: Option<f64>) -> String {
            match v {
                Some(x) => format!("{x:.4}"),
                None => "-".to_string(),
            }
        }
        writeln!(f, "EM\tYN-Acc\tE-F1\tG-F1")?;
        write!(
            f,
            "{:.4}\t{}\t{}\t{}",
            self.em,
            cell(self.yn_acc),
            cell(self.e_f1),
            cell(self.g_f1)
        )
    }
}

/// Score a prediction set against gold examples.
///
/// Overall EM averages over every example; YN accuracy over the YN subset;
/// E-F1 / G-F1 are macro averages (mean of per-example F1) over their
/// subsets. Gold qids without a prediction count as wrong.
pub fn score_predictions(
    preds: &PredictionSet,
    gold: &[Example],
    dict: &YnDictionary,
) -> Result<ScoreReport> {
    if gold.is_empty() {
        return Err(Error::contract("score_predictions: empty gold set"));
    }
    let mut seen: HashMap<&str, ()> = HashMap::new();
    let mut issues = Vec::new();
    for ex in gold {
        if seen.insert(&ex.qid, ()).is_some() {
            issues.push(RecordIssue {
                record: ex.qid.clone(),
                field: "qid".to_string(),
                message: "duplicate qid in gold set".to_string(),
            });
        }
    }
    if !issues.is_empty() {
        return Err(Error::Validation(issues));
    }

    let mut em_hits = 0usize;
    let mut counts = TypeCounts::default();
    let mut yn_hits = 0usize;
    let mut e_f1_sum = 0.0;
    let mut g_f1_sum = 0.0;
    let mut missing = 0usize;

    for ex in gold {
        counts.total += 1;
        let pred = match preds.get(&ex.qid) {
            Some(p) => p,
            None => {
                missing += 1;
                ""
            }
        };
        let em = exact_match(pred, &ex.answer, ex.answer_type, ex.yes_or_no, dict)?;
        if em {
            em_hits += 1;
        }
        match ex.answer_type {
            AnswerType::Yn => {
                counts.yn += 1;
                if em {
                    yn_hits += 1;
                }
            }
            AnswerType::E => {
                counts.e += 1;
                e_f1_sum += token_f1(pred, &ex.answer);
            }
            AnswerType::G => {
                counts.g += 1;
                g_f1_sum += token_f1(pred, &ex.answer);
            }
        }
    }

    let extra = preds.iter().filter(|(qid, _)| !gold.iter().any(|g| g.qid == *qid)).count();

    Ok(ScoreReport {
        em: em_hits as f64 / counts.total as f64,
        yn_acc: (counts.yn > 0).then(|| yn_hits as f64 / counts.yn as f64),
        e_f1: (counts.e > 0).then(|| e_f1_sum / counts.e as f64),
        g_f1: (counts.g > 0).then(|| g_f1_sum / counts.g as f64),
        counts,
        missing_predictions: missing,
        extra_predictions: extra,
    })
}
