//! Evaluation protocol: eval-set manifests, the recognition and
//! multiple-choice tracks, polarity parsing and report emission.

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{PlvmError, Result};
use crate::image::Image;

pub const EVAL_VERSION: &str = "plvm-eval-v1";
/// Question used for every recognition pair.
pub const RECOGNITION_QUESTION: &str = "Is ⟨sks⟩ in this photo?";
pub const CHOICE_LETTERS: [char; 4] = ['A', 'B', 'C', 'D'];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnswerPolarity {
    Positive,
    Negative,
    Unknown,
}

/// Positive iff the first word is exactly "Yes", negative iff "No"; a word
/// may be followed by punctuation. Anything else is unknown.
pub fn parse_polarity(answer: &str) -> AnswerPolarity {
    let t = answer.trim_start();
    let word: String = t.chars().take_while(|c| c.is_alphanumeric()).collect();
    let rest = &t[word.len()..];
    let boundary = rest
        .chars()
        .next()
        .is_none_or(|c| c.is_whitespace() || (c.is_ascii_punctuation() && c != '\'' && c != '-'));
    match (word.as_str(), boundary) {
        ("Yes", true) => AnswerPolarity::Positive,
        ("No", true) => AnswerPolarity::Negative,
        _ => AnswerPolarity::Unknown,
    }
}

/// First standalone choice letter (`B`, `B.`, `(B)`, `B)`), if any.
pub fn extract_choice(response: &str) -> Option<char> {
    response
        .split(|c: char| c.is_whitespace())
        .map(|w| w.trim_matches(|c: char| matches!(c, '(' | ')' | '.' | ',' | ':' | ';' | '!' | '?' | '"' | '\'')))
        .find_map(|w| {
            let mut cs = w.chars();
            match (cs.next(), cs.next()) {
                (Some(c), None) if CHOICE_LETTERS.contains(&c) => Some(c),
                _ => None,
            }
        })
}

/// Half-away-from-zero rounding to one decimal, as printed in tables.
pub fn round1(x: f64) -> f64 {
    (x * 10.0).round() / 10.0
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecognitionMetrics {
    pub pos: f64,
    pub neg: f64,
    pub mean: f64,
}

impl RecognitionMetrics {
    /// Percentages; mean is `(pos + neg) / 2` exactly.
    pub fn new(pos: f64, neg: f64) -> Self {
        Self {
            pos,
            neg,
            mean: (pos + neg) / 2.0,
        }
    }

    pub fn from_counts(pos_correct: usize, pos_total: usize, neg_correct: usize, neg_total: usize) -> Self {
        let pct = |c: usize, t: usize| if t == 0 { 0.0 } else { 100.0 * c as f64 / t as f64 };
        Self::new(pct(pos_correct, pos_total), pct(neg_correct, neg_total))
    }

    pub fn is_consistent(&self) -> bool {
        self.mean == (self.pos + self.neg) / 2.0 && [self.pos, self.neg, self.mean].iter().all(|v| (0.0..=100.0).contains(v))
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalIdentity {
    pub identity_id: String,
    pub reference: PathBuf,
    pub queries: Vec<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalPair {
    pub reference_identity: String,
    pub query: PathBuf,
    pub query_identity: String,
}

impl EvalPair {
    pub fn is_positive(&self) -> bool {
        self.reference_identity == self.query_identity
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Track {
    Text,
    Visual,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChoiceQuestion {
    pub track: Track,
    pub identity_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub query: Option<PathBuf>,
    /// Uses the `⟨sks⟩` placeholder for the identity.
    pub question: String,
    pub choices: Vec<String>,
    /// Gold letter.
    pub answer: char,
}

impl ChoiceQuestion {
    pub fn validate(&self) -> Result<()> {
        let n = self.choices.len();
        let idx = CHOICE_LETTERS.iter().position(|&c| c == self.answer);
        if !(2..=CHOICE_LETTERS.len()).contains(&n) || idx.is_none_or(|i| i >= n) {
            return Err(PlvmError::Manifest(format!(
                "malformed choice set for {:?}: {n} choices, gold {}",
                self.question, self.answer
            )));
        }
        if self.track == Track::Visual && self.query.is_none() {
            return Err(PlvmError::Manifest("visual question without a query image".into()));
        }
        Ok(())
    }

    /// Question text followed by lettered choices.
    pub fn prompt(&self, concept_name: &str) -> String {
        let mut s = self.question.replace(crate::prompting::PLACEHOLDER, concept_name);
        for (l, c) in CHOICE_LETTERS.iter().zip(&self.choices) {
            let _ = write!(s, " {l}. {c}");
        }
        s.push_str(" Answer with the letter.");
        s
    }
}

/// One JSON-lines record of an eval-set manifest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "record", rename_all = "snake_case")]
pub enum EvalRecord {
    Header {
        version: String,
    },
    Identity {
        identity_id: String,
    },
    Image {
        identity_id: String,
        role: ImageRole,
        path: PathBuf,
    },
    Pair(EvalPair),
    Question(ChoiceQuestion),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ImageRole {
    Reference,
    Query,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSet {
    /// Directory image paths are relative to.
    pub root: PathBuf,
    pub identities: Vec<EvalIdentity>,
    pub pairs: Vec<EvalPair>,
    pub questions: Vec<ChoiceQuestion>,
}

impl EvalSet {
    pub fn identity_count(&self) -> usize {
        self.identities.len()
    }

    /// References plus queries.
    pub fn image_count(&self) -> usize {
        self.identities.iter().map(|i| 1 + i.queries.len()).sum()
    }

    pub fn identity(&self, id: &str) -> Option<&EvalIdentity> {
        self.identities.iter().find(|i| i.identity_id == id)
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        self.root.join(p)
    }

    pub fn from_records(root: PathBuf, records: Vec<EvalRecord>) -> Result<Self> {
        let mut order: Vec<String> = Vec::new();
        let mut refs: BTreeMap<String, PathBuf> = BTreeMap::new();
        let mut queries: BTreeMap<String, Vec<PathBuf>> = BTreeMap::new();
        let mut pairs = Vec::new();
        let mut questions = Vec::new();
        for r in records {
            match r {
                EvalRecord::Header { version } => {
                    if version != EVAL_VERSION {
                        return Err(PlvmError::Manifest(format!("unsupported eval manifest version `{version}`")));
                    }
                }
                EvalRecord::Identity { identity_id } => {
                    if order.contains(&identity_id) {
                        return Err(PlvmError::Manifest(format!("duplicate identity `{identity_id}`")));
                    }
                    order.push(identity_id);
                }
                EvalRecord::Image { identity_id, role, path } => match role {
                    ImageRole::Reference => {
                        if refs.insert(identity_id.clone(), path).is_some() {
                            return Err(PlvmError::Manifest(format!(
                                "identity `{identity_id}` has more than one reference image"
                            )));
                        }
                    }
                    ImageRole::Query => queries.entry(identity_id).or_default().push(path),
                },
                EvalRecord::Pair(p) => pairs.push(p),
                EvalRecord::Question(q) => {
                    q.validate()?;
                    questions.push(q);
                }
            }
        }
        let known: HashSet<&String> = order.iter().collect();
        for id in refs.keys().chain(queries.keys()) {
            if !known.contains(id) {
                return Err(PlvmError::Manifest(format!("image for undeclared identity `{id}`")));
            }
        }
        let mut identities = Vec::new();
        for id in &order {
            let reference = refs
                .remove(id)
                .ok_or_else(|| PlvmError::Manifest(format!("identity `{id}` has no reference image")))?;
            let qs = queries.remove(id).unwrap_or_default();
            if qs.is_empty() {
                return Err(PlvmError::Manifest(format!("identity `{id}` has no query images")));
            }
            identities.push(EvalIdentity {
                identity_id: id.clone(),
                reference,
                queries: qs,
            });
        }
        for p in &pairs {
            for id in [&p.reference_identity, &p.query_identity] {
                if !known.contains(id) {
                    return Err(PlvmError::Manifest(format!("pair names unknown identity `{id}`")));
                }
            }
        }
        for q in &questions {
            if !known.contains(&q.identity_id) {
                return Err(PlvmError::Manifest(format!("question names unknown identity `{}`", q.identity_id)));
            }
        }
        Ok(Self {
            root,
            identities,
            pairs,
            questions,
        })
    }

    pub fn to_records(&self) -> Vec<EvalRecord> {
        let mut out = vec![EvalRecord::Header {
            version: EVAL_VERSION.into(),
        }];
        for i in &self.identities {
            out.push(EvalRecord::Identity {
                identity_id: i.identity_id.clone(),
            });
            out.push(EvalRecord::Image {
                identity_id: i.identity_id.clone(),
                role: ImageRole::Reference,
                path: i.reference.clone(),
            });
            for q in &i.queries {
                out.push(EvalRecord::Image {
                    identity_id: i.identity_id.clone(),
                    role: ImageRole::Query,
                    path: q.clone(),
                });
            }
        }
        out.extend(self.pairs.iter().cloned().map(EvalRecord::Pair));
        out.extend(self.questions.iter().cloned().map(EvalRecord::Question));
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut s = String::new();
        for r in self.to_records() {
            s.push_str(&serde_json::to_string(&r)?);
            s.push('\n');
        }
        std::fs::write(path, s).map_err(|e| PlvmError::io(path, e))
    }
}

/// Reads and validates a manifest; image paths resolve against its directory.
pub fn load_eval_set(path: &Path) -> Result<EvalSet> {
    let f = std::fs::File::open(path).map_err(|e| PlvmError::io(path, e))?;
    let mut records = Vec::new();
    for (n, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| PlvmError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        records.push(
            serde_json::from_str(&line)
                .map_err(|e| PlvmError::Manifest(format!("{}:{}: {e}", path.display(), n + 1)))?,
        );
    }
    let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let set = EvalSet::from_records(root, records)?;
    for i in &set.identities {
        for p in std::iter::once(&i.reference).chain(&i.queries) {
            let full = set.resolve(p);
            if !full.exists() {
                return Err(PlvmError::Manifest(format!("image {} does not exist", full.display())));
            }
        }
    }
    Ok(set)
}

/// A model under evaluation.
pub trait ModelEndpoint {
    /// Makes `name` refer to the identity shown in `reference`.
    fn register(&mut self, name: &str, reference: &Image) -> Result<()>;

    /// One chat turn about the named concept.
    fn ask(&mut self, concept: &str, question: &str, query: Option<&Image>) -> Result<String>;
}

/// Concept name used for an identity on the endpoint.
pub fn concept_name(identity_id: &str) -> String {
    let clean: String = identity_id
        .chars()
        .map(|c| {
            let c = c.to_ascii_lowercase();
            if c.is_ascii_lowercase() || c.is_ascii_digit() {
                c
            } else {
                '_'
            }
        })
        .collect();
    format!("⟨{clean}⟩")
}

fn load_image(set: &EvalSet, p: &Path) -> Result<Image> {
    Image::load(&set.resolve(p))
}

fn register_all(endpoint: &mut dyn ModelEndpoint, set: &EvalSet, needed: &HashSet<&str>) -> Result<()> {
    for i in &set.identities {
        if needed.contains(i.identity_id.as_str()) {
            endpoint.register(&concept_name(&i.identity_id), &load_image(set, &i.reference)?)?;
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecognitionResult {
    pub overall: RecognitionMetrics,
    pub per_identity: BTreeMap<String, RecognitionMetrics>,
    pub failures: usize,
}

/// Asks the recognition question for every listed pair. Endpoint failures
/// and unparseable answers count as incorrect.
pub fn run_recognition(endpoint: &mut dyn ModelEndpoint, set: &EvalSet) -> Result<RecognitionResult> {
    let needed: HashSet<&str> = set.pairs.iter().map(|p| p.reference_identity.as_str()).collect();
    register_all(endpoint, set, &needed)?;
    // identity → [pos correct, pos total, neg correct, neg total]
    let mut counts: BTreeMap<String, [usize; 4]> = BTreeMap::new();
    let mut failures = 0;
    for pair in &set.pairs {
        let name = concept_name(&pair.reference_identity);
        let question = RECOGNITION_QUESTION.replace(crate::prompting::PLACEHOLDER, &name);
        let polarity = match load_image(set, &pair.query).and_then(|img| endpoint.ask(&name, &question, Some(&img))) {
            Ok(answer) => parse_polarity(&answer),
            Err(e) => {
                warn!("recognition pair {pair:?} failed: {e}");
                failures += 1;
                AnswerPolarity::Unknown
            }
        };
        let c = counts.entry(pair.reference_identity.clone()).or_default();
        if pair.is_positive() {
            c[1] += 1;
            c[0] += (polarity == AnswerPolarity::Positive) as usize;
        } else {
            c[3] += 1;
            c[2] += (polarity == AnswerPolarity::Negative) as usize;
        }
    }
    let total = counts.values().fold([0; 4], |mut a, c| {
        (0..4).for_each(|i| a[i] += c[i]);
        a
    });
    Ok(RecognitionResult {
        overall: RecognitionMetrics::from_counts(total[0], total[1], total[2], total[3]),
        per_identity: counts
            .into_iter()
            .map(|(k, c)| (k, RecognitionMetrics::from_counts(c[0], c[1], c[2], c[3])))
            .collect(),
        failures,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChoiceResult {
    pub correct: usize,
    pub total: usize,
    /// Percentage.
    pub accuracy: f64,
}

/// Multiple-choice accuracy; the text track never sends the query image.
pub fn run_multiple_choice(
    endpoint: &mut dyn ModelEndpoint,
    set: &EvalSet,
    questions: &[ChoiceQuestion],
    with_query_image: bool,
) -> Result<ChoiceResult> {
    for q in questions {
        q.validate()?;
    }
    let needed: HashSet<&str> = questions.iter().map(|q| q.identity_id.as_str()).collect();
    register_all(endpoint, set, &needed)?;
    let mut correct = 0;
    for q in questions {
        let name = concept_name(&q.identity_id);
        let image = match (&q.query, with_query_image) {
            (Some(p), true) => Some(load_image(set, p)?),
            _ => None,
        };
        match endpoint.ask(&name, &q.prompt(&name), image.as_ref()) {
            Ok(r) => correct += (extract_choice(&r) == Some(q.answer)) as usize,
            Err(e) => warn!("question {:?} failed: {e}", q.question),
        }
    }
    let total = questions.len();
    Ok(ChoiceResult {
        correct,
        total,
        accuracy: if total == 0 { 0.0 } else { 100.0 * correct as f64 / total as f64 },
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub recognition: RecognitionMetrics,
    pub text_only_accuracy: Option<f64>,
    pub visual_accuracy: Option<f64>,
    pub per_identity: BTreeMap<String, RecognitionMetrics>,
    pub config: serde_json::Value,
}

impl EvalReport {
    /// Results table with one decimal per column.
    pub fn table(&self) -> String {
        let cell = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{:.1}", round1(x)));
        let r = &self.recognition;
        let mut s = String::new();
        let _ = writeln!(s, "| {:<10} | {:>5} | {:>5} | {:>5} | {:>5} | {:>6} |", "", "Pos", "Neg", "Mean", "Text", "Visual");
        let _ = writeln!(s, "|{:-<12}|{:->7}|{:->7}|{:->7}|{:->7}|{:->8}|", "", "", "", "", "", "");
        let _ = writeln!(
            s,
            "| {:<10} | {:>5} | {:>5} | {:>5} | {:>5} | {:>6} |",
            "overall",
            cell(Some(r.pos)),
            cell(Some(r.neg)),
            cell(Some(r.mean)),
            cell(self.text_only_accuracy),
            cell(self.visual_accuracy)
        );
        for (id, m) in &self.per_identity {
            let _ = writeln!(
                s,
                "| {:<10} | {:>5} | {:>5} | {:>5} | {:>5} | {:>6} |",
                id,
                cell(Some(m.pos)),
                cell(Some(m.neg)),
                cell(Some(m.mean)),
                "",
                ""
            );
        }
        s
    }

    pub fn validate(&self) -> Result<()> {
        std::iter::once(&self.recognition)
            .chain(self.per_identity.values())
            .all(RecognitionMetrics::is_consistent)
            .then_some(())
            .ok_or_else(|| PlvmError::Manifest("report mean does not equal (pos + neg) / 2".into()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| PlvmError::io(path, e))?;
        let r: Self = serde_json::from_slice(&bytes)?;
        r.validate()?;
        Ok(r)
    }
}

/// Writes the JSON report to `path` and the table next to it (`.txt`).
pub fn emit_report(report: &EvalReport, path: &Path) -> Result<()> {
    report.validate()?;
    let json = serde_json::to_string_pretty(report)?;
    std::fs::write(path, json + "\n").map_err(|e| PlvmError::io(path, e))?;
    let table = path.with_extension("txt");
    std::fs::write(&table, report.table()).map_err(|e| PlvmError::io(&table, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn polarity_rule() {
        assert_eq!(parse_polarity("Yes, ⟨sks⟩ is in this photo."), AnswerPolarity::Positive);
        assert_eq!(parse_polarity("No, ⟨sks⟩ is not in this photo."), AnswerPolarity::Negative);
        assert_eq!(parse_polarity("I cannot determine that."), AnswerPolarity::Unknown);
        assert_eq!(parse_polarity("  Yes"), AnswerPolarity::Positive);
        assert_eq!(parse_polarity("No."), AnswerPolarity::Negative);
        assert_eq!(parse_polarity("Not sure"), AnswerPolarity::Unknown);
        assert_eq!(parse_polarity("Yesterday"), AnswerPolarity::Unknown);
        assert_eq!(parse_polarity("yes"), AnswerPolarity::Unknown);
        assert_eq!(parse_polarity(""), AnswerPolarity::Unknown);
    }

    #[test]
    fn reported_means() {
        let a = RecognitionMetrics::new(89.5, 82.1);
        assert_eq!(a.mean, (89.5 + 82.1) / 2.0);
        assert_eq!(round1(a.mean), 85.8);
        let b = RecognitionMetrics::new(45.7, 97.8);
        assert_eq!(b.mean, 71.75);
        assert_eq!(round1(b.mean), 71.8);
        assert_eq!(format!("{:.1}", round1(b.mean)), "71.8");
        assert_eq!(round1(0.25), 0.3);
    }

    #[test]
    fn all_unknown_scores_zero() {
        let m = RecognitionMetrics::from_counts(0, 10, 0, 7);
        assert_eq!((m.pos, m.neg, m.mean), (0.0, 0.0, 0.0));
    }

    #[test]
    fn choice_extraction() {
        assert_eq!(extract_choice("B"), Some('B'));
        assert_eq!(extract_choice("Answer: (C)."), Some('C'));
        assert_eq!(extract_choice("A. black"), Some('A'));
        assert_eq!(extract_choice("black hair"), None);
        assert_eq!(extract_choice("E"), None);
    }

    #[test]
    fn malformed_choice_sets() {
        let q = ChoiceQuestion {
            track: Track::Text,
            identity_id: "a".into(),
            query: None,
            question: "What is ⟨sks⟩'s hair color?".into(),
            choices: vec!["black".into()],
            answer: 'A',
        };
        assert!(q.validate().is_err());
        let q2 = ChoiceQuestion {
            choices: vec!["black".into(), "brown".into()],
            answer: 'C',
            ..q.clone()
        };
        assert!(q2.validate().is_err());
        let ok = ChoiceQuestion { answer: 'B', ..q2 };
        ok.validate().unwrap();
        assert_eq!(
            ok.prompt("⟨x⟩"),
            "What is ⟨x⟩'s hair color? A. black B. brown Answer with the letter."
        );
    }

    #[test]
    fn concept_names_are_valid() {
        assert_eq!(concept_name("Id-7"), "⟨id_7⟩");
        assert!(crate::backbone::tokenizer::is_concept_name(&concept_name("Billie Eilish")));
    }
}
