//! Dataset persistence: SQuAD v1.1 reading and writing, majority-vote
//! consolidation, title-stratified splitting and export of collected data.
//!
//! All character offsets are Unicode code-point offsets.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::adversary::Prediction;
use crate::analysis::ComprehensionLabel;
use crate::engine::EngineState;
use crate::metrics::{self, MatchScore};

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("malformed SQuAD JSON: {0}")]
    MalformedJson(String),
    #[error("answer offset mismatch for question {qa_id}: {detail}")]
    OffsetMismatch { qa_id: String, detail: String },
    #[error("passage {0} has an empty context")]
    EmptyContext(String),
    #[error("duplicate {kind} id {id}")]
    DuplicateId { kind: &'static str, id: String },
    #[error("{split} question {question_id} has not passed answerability validation")]
    UnvalidatedDevTest { split: Split, question_id: String },
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// Number of code points in `text`.
pub fn char_len(text: &str) -> usize {
    text.chars().count()
}

/// Code-point slice `[start, end)` of `text`, or `None` when out of range.
pub fn char_slice(text: &str, start: usize, end: usize) -> Option<&str> {
    if start > end {
        return None;
    }
    let mut indices = text.char_indices().map(|(i, _)| i).chain(std::iter::once(text.len()));
    let begin = indices.by_ref().nth(start)?;
    let finish = if end == start {
        begin
    } else {
        indices.nth(end - start - 1)?
    };
    Some(&text[begin..finish])
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Dev, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Test => "test",
        }
    }

    /// Dev and test questions must pass answerability validation.
    pub fn requires_validation(self) -> bool {
        !matches!(self, Split::Train)
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train" => Ok(Split::Train),
            "dev" | "validation" => Ok(Split::Dev),
            "test" => Ok(Split::Test),
            other => Err(format!("unknown split `{other}` (expected train, dev or test)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Passage {
    pub id: String,
    pub title: String,
    pub text: String,
}

/// Answer region inside a passage.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Span {
    pub char_start: usize,
    pub char_end: usize,
    pub text: String,
}

impl Span {
    /// Builds a span from code-point offsets, checking `0 ≤ start < end ≤ |text|`.
    pub fn from_offsets(passage_text: &str, char_start: usize, char_end: usize) -> Option<Span> {
        if char_start >= char_end {
            return None;
        }
        char_slice(passage_text, char_start, char_end).map(|t| Span {
            char_start,
            char_end,
            text: t.to_owned(),
        })
    }

    pub fn is_valid_in(&self, passage_text: &str) -> bool {
        self.char_start < self.char_end
            && char_slice(passage_text, self.char_start, self.char_end) == Some(self.text.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuestionStatus {
    Retained,
    Discarded,
    DroppedUnanswerable,
}

/// One validator's answer to a collected question.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationAssignment {
    pub question_id: String,
    pub validator_id: String,
    pub answer_span: Span,
    #[serde(rename = "match")]
    pub matched: bool,
}

/// A question that beat the model in the loop.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuestionRecord {
    pub id: String,
    pub hit_id: String,
    pub passage_id: String,
    pub worker_id: String,
    pub adversary_id: String,
    pub text: String,
    pub gold: Span,
    pub model_answer_at_collection: Prediction,
    pub collection_score: MatchScore,
    pub status: QuestionStatus,
    pub split: Split,
    #[serde(default)]
    pub labels: Vec<ComprehensionLabel>,
    #[serde(default)]
    pub validations: Vec<ValidationAssignment>,
    /// `None` until answerability has been decided.
    #[serde(default)]
    pub answerable: Option<bool>,
}

/// A question with its reference answers, as found in a SQuAD file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QaRecord {
    pub id: String,
    pub passage_id: String,
    pub question: String,
    pub answers: Vec<Span>,
}

impl QaRecord {
    /// The single gold answer of a consolidated question.
    pub fn gold(&self) -> Option<&Span> {
        self.answers.first()
    }
}

/// Passages plus questions, the in-memory form of a SQuAD file.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Dataset {
    pub passages: Vec<Passage>,
    pub questions: Vec<QaRecord>,
}

impl Dataset {
    pub fn passage(&self, id: &str) -> Option<&Passage> {
        self.passages.iter().find(|p| p.id == id)
    }

    pub fn passage_index(&self) -> HashMap<&str, &Passage> {
        self.passages.iter().map(|p| (p.id.as_str(), p)).collect()
    }

    /// Reduces every question to exactly one majority-vote gold answer.
    pub fn consolidated(&self) -> Dataset {
        Dataset {
            passages: self.passages.clone(),
            questions: self
                .questions
                .iter()
                .map(|q| QaRecord {
                    answers: consolidate_majority(&q.answers).into_iter().collect(),
                    ..q.clone()
                })
                .collect(),
        }
    }

    /// Order produced by a write/read cycle: passages grouped by title in
    /// first-appearance order, questions grouped by passage.
    pub fn canonical(&self) -> Dataset {
        let mut title_order: Vec<&str> = Vec::new();
        for p in &self.passages {
            if !title_order.contains(&p.title.as_str()) {
                title_order.push(&p.title);
            }
        }
        let mut passages = Vec::with_capacity(self.passages.len());
        for title in title_order {
            passages.extend(self.passages.iter().filter(|p| p.title == title).cloned());
        }
        let mut questions = Vec::with_capacity(self.questions.len());
        for p in &passages {
            questions.extend(self.questions.iter().filter(|q| q.passage_id == p.id).cloned());
        }
        Dataset { passages, questions }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct SquadAnswer {
    text: String,
    answer_start: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct SquadQa {
    id: String,
    question: String,
    answers: Vec<SquadAnswer>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct SquadParagraph {
    /// Not part of the original format; written so passage ids survive a round trip.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    id: Option<String>,
    context: String,
    qas: Vec<SquadQa>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct SquadArticle {
    title: String,
    paragraphs: Vec<SquadParagraph>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct SquadFile {
    #[serde(default = "default_version")]
    version: String,
    data: Vec<SquadArticle>,
}

fn default_version() -> String {
    "1.1".to_owned()
}

/// Parses and validates a SQuAD v1.1 document.
///
/// Paragraphs without an explicit `id` get `"{article}-{paragraph}"`.
pub fn parse_squad(json: &str) -> Result<Dataset, StoreError> {
    let file: SquadFile =
        serde_json::from_str(json).map_err(|e| StoreError::MalformedJson(e.to_string()))?;
    let mut dataset = Dataset::default();
    let mut passage_ids = HashSet::new();
    let mut qa_ids = HashSet::new();
    for (ai, article) in file.data.into_iter().enumerate() {
        for (pi, paragraph) in article.paragraphs.into_iter().enumerate() {
            let passage_id = paragraph.id.unwrap_or_else(|| format!("{ai}-{pi}"));
            if paragraph.context.is_empty() {
                return Err(StoreError::EmptyContext(passage_id));
            }
            if !passage_ids.insert(passage_id.clone()) {
                return Err(StoreError::DuplicateId {
                    kind: "passage",
                    id: passage_id,
                });
            }
            for qa in paragraph.qas {
                if !qa_ids.insert(qa.id.clone()) {
                    return Err(StoreError::DuplicateId {
                        kind: "question",
                        id: qa.id,
                    });
                }
                let mut answers = Vec::with_capacity(qa.answers.len());
                for answer in qa.answers {
                    let end = answer.answer_start + char_len(&answer.text);
                    let span = Span {
                        char_start: answer.answer_start,
                        char_end: end,
                        text: answer.text,
                    };
                    if !span.is_valid_in(&paragraph.context) {
                        let found = char_slice(&paragraph.context, span.char_start, span.char_end);
                        return Err(StoreError::OffsetMismatch {
                            qa_id: qa.id,
                            detail: match found {
                                Some(f) => format!(
                                    "answer_start {} locates {:?}, expected {:?}",
                                    span.char_start, f, span.text
                                ),
                                None => format!(
                                    "answer {:?} at {} is empty or exceeds the context",
                                    span.text, span.char_start
                                ),
                            },
                        });
                    }
                    answers.push(span);
                }
                dataset.questions.push(QaRecord {
                    id: qa.id,
                    passage_id: passage_id.clone(),
                    question: qa.question,
                    answers,
                });
            }
            dataset.passages.push(Passage {
                id: passage_id,
                title: article.title.clone(),
                text: paragraph.context,
            });
        }
    }
    Ok(dataset)
}

pub fn import_squad(path: &Path) -> Result<Dataset, StoreError> {
    let json = fs::read_to_string(path).map_err(|source| StoreError::Io {
        path: path.to_owned(),
        source,
    })?;
    parse_squad(&json)
}

/// Serializes a dataset as SQuAD v1.1 JSON. Output is deterministic.
pub fn to_squad_json(dataset: &Dataset) -> String {
    let mut articles: Vec<SquadArticle> = Vec::new();
    let mut by_passage: HashMap<&str, Vec<&QaRecord>> = HashMap::new();
    for q in &dataset.questions {
        by_passage.entry(q.passage_id.as_str()).or_default().push(q);
    }
    for passage in &dataset.passages {
        let qas = by_passage
            .get(passage.id.as_str())
            .map(|qs| {
                qs.iter()
                    .map(|q| SquadQa {
                        id: q.id.clone(),
                        question: q.question.clone(),
                        answers: q
                            .answers
                            .iter()
                            .map(|a| SquadAnswer {
                                text: a.text.clone(),
                                answer_start: a.char_start,
                            })
                            .collect(),
                    })
                    .collect()
            })
            .unwrap_or_default();
        let paragraph = SquadParagraph {
            id: Some(passage.id.clone()),
            context: passage.text.clone(),
            qas,
        };
        match articles.iter_mut().find(|a| a.title == passage.title) {
            Some(article) => article.paragraphs.push(paragraph),
            None => articles.push(SquadArticle {
                title: passage.title.clone(),
                paragraphs: vec![paragraph],
            }),
        }
    }
    let file = SquadFile {
        version: default_version(),
        data: articles,
    };
    serde_json::to_string_pretty(&file).expect("SQuAD structures always serialize")
}

/// Picks the most frequent answer (by normalized text); ties go to the answer
/// whose group appeared first. The returned span is one of the inputs verbatim.
pub fn consolidate_majority(answers: &[Span]) -> Option<Span> {
    let mut groups: Vec<(String, usize, usize)> = Vec::new(); // key, count, first index
    for (i, a) in answers.iter().enumerate() {
        let key = metrics::normalize(&a.text).joined();
        match groups.iter_mut().find(|(k, _, _)| *k == key) {
            Some(g) => g.1 += 1,
            None => groups.push((key, 1, i)),
        }
    }
    let mut best: Option<&(String, usize, usize)> = None;
    for g in &groups {
        if best.is_none_or(|b| g.1 > b.1) {
            best = Some(g);
        }
    }
    best.map(|(_, _, first)| answers[*first].clone())
}

fn title_rank(seed: u64, title: &str) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(title.as_bytes());
    h.finalize().into()
}

/// Splits a dataset into two parts so that every title lands wholly in one
/// part and part A holds roughly `ratio` of the questions.
///
/// Titles are ordered by a seeded hash and assigned greedily to whichever part
/// keeps part A closest to its target; single-title moves and pairwise swaps
/// then reduce the remaining imbalance. Titles without questions weigh as one.
pub fn split_stratified(dataset: &Dataset, ratio: f64, seed: u64) -> (Dataset, Dataset) {
    assert!(ratio > 0.0 && ratio < 1.0, "ratio must be within (0, 1)");
    let mut weights: BTreeMap<&str, i64> = BTreeMap::new();
    let passage_title: HashMap<&str, &str> = dataset
        .passages
        .iter()
        .map(|p| (p.id.as_str(), p.title.as_str()))
        .collect();
    for p in &dataset.passages {
        weights.entry(p.title.as_str()).or_insert(0);
    }
    for q in &dataset.questions {
        if let Some(t) = passage_title.get(q.passage_id.as_str()) {
            *weights.entry(t).or_insert(0) += 1;
        }
    }
    let mut titles: Vec<(&str, i64)> = weights.into_iter().map(|(t, w)| (t, w.max(1))).collect();
    titles.sort_by_cached_key(|(t, _)| title_rank(seed, t));

    let total: i64 = titles.iter().map(|(_, w)| w).sum();
    let target = ratio * total as f64;
    let err = |a: i64| (a as f64 - target).abs();

    let mut in_a = vec![false; titles.len()];
    let mut a_weight = 0i64;
    let mut assigned = 0i64;
    for (i, (_, w)) in titles.iter().enumerate() {
        assigned += w;
        let running_target = ratio * assigned as f64;
        let with = ((a_weight + w) as f64 - running_target).abs();
        let without = (a_weight as f64 - running_target).abs();
        if with <= without {
            in_a[i] = true;
            a_weight += w;
        }
    }

    // local improvement: best single move or swap until no gain
    loop {
        let current = err(a_weight);
        let mut best: Option<(f64, usize, Option<usize>)> = None;
        for i in 0..titles.len() {
            let wi = titles[i].1;
            let moved = if in_a[i] { a_weight - wi } else { a_weight + wi };
            if err(moved) + 1e-9 < best.map_or(current, |b| b.0) {
                best = Some((err(moved), i, None));
            }
            if in_a[i] {
                for j in 0..titles.len() {
                    if !in_a[j] {
                        let swapped = a_weight - wi + titles[j].1;
                        if err(swapped) + 1e-9 < best.map_or(current, |b| b.0) {
                            best = Some((err(swapped), i, Some(j)));
                        }
                    }
                }
            }
        }
        let Some((_, i, j)) = best else { break };
        a_weight += if in_a[i] { -titles[i].1 } else { titles[i].1 };
        in_a[i] = !in_a[i];
        if let Some(j) = j {
            a_weight += titles[j].1;
            in_a[j] = true;
        }
    }

    let a_titles: HashSet<&str> = titles
        .iter()
        .zip(&in_a)
        .filter(|(_, a)| **a)
        .map(|((t, _), _)| *t)
        .collect();
    let mut part_a = Dataset::default();
    let mut part_b = Dataset::default();
    for p in &dataset.passages {
        let part = if a_titles.contains(p.title.as_str()) {
            &mut part_a
        } else {
            &mut part_b
        };
        part.passages.push(p.clone());
    }
    let a_passages: HashSet<&str> = part_a.passages.iter().map(|p| p.id.as_str()).collect();
    for q in &dataset.questions {
        if a_passages.contains(q.passage_id.as_str()) {
            part_a.questions.push(q.clone());
        } else {
            part_b.questions.push(q.clone());
        }
    }
    (part_a, part_b)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub file: String,
    pub passages: usize,
    pub qas: usize,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub name: String,
    pub adversary_id: String,
    pub splits: BTreeMap<Split, SplitManifest>,
}

#[derive(Debug, Clone)]
pub struct ExportRequest {
    pub name: String,
    pub splits: Vec<Split>,
    /// Restrict to questions collected against this adversary.
    pub adversary_id: Option<String>,
}

/// Files of an export, keyed by file name, plus the manifest.
#[derive(Debug, Clone, PartialEq)]
pub struct ExportBundle {
    pub files: BTreeMap<String, Vec<u8>>,
    pub manifest: DatasetManifest,
    pub datasets: BTreeMap<Split, Dataset>,
}

impl ExportBundle {
    pub fn manifest_file_name(&self) -> String {
        format!("{}-manifest.json", self.manifest.name)
    }

    pub fn manifest_json(&self) -> String {
        serde_json::to_string_pretty(&self.manifest).expect("manifest serializes")
    }

    /// Writes every split file and the manifest into `dir`.
    pub fn write_to(&self, dir: &Path) -> Result<Vec<PathBuf>, StoreError> {
        let io = |path: &Path| {
            let path = path.to_owned();
            move |source| StoreError::Io { path, source }
        };
        fs::create_dir_all(dir).map_err(io(dir))?;
        let mut written = Vec::new();
        for (name, bytes) in &self.files {
            let path = dir.join(name);
            fs::write(&path, bytes).map_err(io(&path))?;
            written.push(path);
        }
        let path = dir.join(self.manifest_file_name());
        fs::write(&path, self.manifest_json()).map_err(io(&path))?;
        written.push(path);
        Ok(written)
    }
}

/// Whether a question may appear in any export at all.
pub fn is_exportable(state: &EngineState, q: &QuestionRecord) -> bool {
    q.status == QuestionStatus::Retained
        && !q.collection_score.model_win
        && state
            .workers
            .get(&q.worker_id)
            .is_some_and(|w| !w.is_excluded())
}

/// Materializes SQuAD files for the requested splits of a collection.
///
/// Only retained questions from workers in good standing are written; dev and
/// test questions must additionally have passed answerability validation.
pub fn export_dataset(state: &EngineState, request: &ExportRequest) -> Result<ExportBundle, StoreError> {
    let mut files = BTreeMap::new();
    let mut splits = BTreeMap::new();
    let mut datasets = BTreeMap::new();
    let mut adversaries = BTreeSet::new();
    let wanted: BTreeSet<Split> = request.splits.iter().copied().collect();

    for split in wanted {
        let mut questions: Vec<&QuestionRecord> = state
            .questions
            .values()
            .filter(|q| q.split == split)
            .filter(|q| request.adversary_id.as_ref().is_none_or(|a| *a == q.adversary_id))
            .filter(|q| is_exportable(state, q))
            .collect();
        if split.requires_validation() {
            if let Some(q) = questions.iter().find(|q| q.answerable != Some(true)) {
                return Err(StoreError::UnvalidatedDevTest {
                    split,
                    question_id: q.id.clone(),
                });
            }
        }
        questions.sort_by(|a, b| a.id.cmp(&b.id));

        let used: BTreeSet<&str> = questions.iter().map(|q| q.passage_id.as_str()).collect();
        let mut passages: Vec<Passage> = used
            .iter()
            .filter_map(|id| state.passages.get(*id).map(|e| e.passage.clone()))
            .collect();
        passages.sort_by(|a, b| a.title.cmp(&b.title).then_with(|| a.id.cmp(&b.id)));

        let dataset = Dataset {
            passages,
            questions: questions
                .iter()
                .map(|q| {
                    adversaries.insert(q.adversary_id.clone());
                    QaRecord {
                        id: q.id.clone(),
                        passage_id: q.passage_id.clone(),
                        question: q.text.clone(),
                        answers: vec![q.gold.clone()],
                    }
                })
                .collect(),
        }
        .canonical();

        let bytes = to_squad_json(&dataset).into_bytes();
        let file = format!("{}-{}.json", request.name, split);
        splits.insert(
            split,
            SplitManifest {
                file: file.clone(),
                passages: dataset.passages.len(),
                qas: dataset.questions.len(),
                sha256: hex::encode(Sha256::digest(&bytes)),
            },
        );
        files.insert(file, bytes);
        datasets.insert(split, dataset);
    }

    let adversary_id = match (&request.adversary_id, adversaries.len()) {
        (Some(a), _) => a.clone(),
        (None, 1) => adversaries.into_iter().next().unwrap_or_default(),
        (None, 0) => String::new(),
        (None, _) => "mixed".to_owned(),
    };
    Ok(ExportBundle {
        files,
        manifest: DatasetManifest {
            name: request.name.clone(),
            adversary_id,
            splits,
        },
        datasets,
    })
}
