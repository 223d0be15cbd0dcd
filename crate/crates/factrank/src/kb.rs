//! Knowledge-base storage: triple ingest, subject lookup and the inverted
//! word index over entity names.
//!
//! File formats (all UTF-8, one record per line):
//! - triples: `subject-id <TAB> predicate-id <TAB> object-id`
//! - names: `entity-id <TAB> name`
//! - questions: `subject-id <TAB> predicate-id <TAB> object-id <TAB> question text`
//!
//! Malformed lines are skipped and recorded in an [`IngestReport`]; ingest is
//! deterministic for byte-identical inputs. After construction the
//! [`KnowledgeBase`] and [`NameIndex`] are immutable and safe to share across
//! threads.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use crate::error::{Error, Result};
use crate::text;

/// One (subject, predicate, object) assertion. Fields are offsets into the
/// owning [`KnowledgeBase`] catalogs; fact identity is positional, so
/// duplicate input triples stay duplicated.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Fact {
    pub subject: u32,
    pub predicate: u32,
    pub object: u32,
}

#[derive(Debug, Clone)]
pub struct Entity {
    pub id: String,
    /// Lowercased surface name; `None` for ids that only ever appear inside
    /// triples. Nameless entities are excluded from linking.
    pub name: Option<String>,
    /// Interned word ids of the tokenized name (empty when nameless).
    pub tokens: Vec<u32>,
}

#[derive(Debug, Clone)]
pub struct Predicate {
    pub id: String,
    /// Tokens of the predicate path under the shared normalizer.
    pub tokens: Vec<String>,
}

/// Where a malformed line came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IngestSource {
    Triples,
    Names,
    Questions,
}

#[derive(Debug, Clone)]
pub struct IngestError {
    pub source: IngestSource,
    /// 1-based line number.
    pub line: usize,
    pub message: String,
}

#[derive(Debug, Default, Clone)]
pub struct IngestReport {
    pub entities: usize,
    pub named_entities: usize,
    pub predicates: usize,
    pub facts: usize,
    pub errors: Vec<IngestError>,
}

/// In-memory triple store with interned entity-name words and a CSR
/// subject → facts index.
pub struct KnowledgeBase {
    entities: Vec<Entity>,
    entity_lookup: HashMap<String, u32>,
    predicates: Vec<Predicate>,
    predicate_lookup: HashMap<String, u32>,
    words: Vec<String>,
    word_lookup: HashMap<String, u32>,
    facts: Vec<Fact>,
    // facts grouped by subject, ingest order preserved within each group
    subject_offsets: Vec<u32>,
    subject_postings: Vec<u32>,
}

impl KnowledgeBase {
    /// Ingest triples and names from line streams.
    ///
    /// Names are read first so entity offsets follow names-file order;
    /// subject/object ids seen only in triples are appended as nameless
    /// entities. Malformed lines are skipped and recorded in the report.
    pub fn ingest(triples: impl BufRead, names: impl BufRead) -> Result<(Self, IngestReport)> {
        let mut kb = KnowledgeBase {
            entities: Vec::new(),
            entity_lookup: HashMap::new(),
            predicates: Vec::new(),
            predicate_lookup: HashMap::new(),
            words: Vec::new(),
            word_lookup: HashMap::new(),
            facts: Vec::new(),
            subject_offsets: Vec::new(),
            subject_postings: Vec::new(),
        };
        let mut report = IngestReport::default();

        for (line_no, line) in names.lines().enumerate() {
            let line = line?;
            if line.is_empty() {
                continue;
            }
            match line.split_once('\t') {
                Some((id, name)) if !id.is_empty() && !name.is_empty() => {
                    kb.add_named_entity(id, name, line_no + 1, &mut report);
                }
                _ => report.errors.push(IngestError {
                    source: IngestSource::Names,
                    line: line_no + 1,
                    message: format!("expected two tab-separated fields, got: {line:?}"),
                }),
            }
        }

        for (line_no, line) in triples.lines().enumerate() {
            let line = line?;
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 3 || fields.iter().any(|f| f.is_empty()) {
                report.errors.push(IngestError {
                    source: IngestSource::Triples,
                    line: line_no + 1,
                    message: format!("expected three tab-separated fields, got: {line:?}"),
                });
                continue;
            }
            let subject = kb.entity_or_nameless(fields[0]);
            let predicate = kb.predicate_or_insert(fields[1]);
            let object = kb.entity_or_nameless(fields[2]);
            kb.facts.push(Fact {
                subject,
                predicate,
                object,
            });
        }

        kb.build_subject_index();

        report.entities = kb.entities.len();
        report.named_entities = kb.entities.iter().filter(|e| e.name.is_some()).count();
        report.predicates = kb.predicates.len();
        report.facts = kb.facts.len();
        Ok((kb, report))
    }

    pub fn ingest_files(triples: &Path, names: &Path) -> Result<(Self, IngestReport)> {
        let t = BufReader::new(File::open(triples).map_err(|e| Error::io(triples, e))?);
        let n = BufReader::new(File::open(names).map_err(|e| Error::io(names, e))?);
        Self::ingest(t, n)
    }

    fn add_named_entity(&mut self, id: &str, name: &str, line: usize, report: &mut IngestReport) {
        if let Some(&offset) = self.entity_lookup.get(id) {
            if self.entities[offset as usize].name.is_some() {
                // first name wins, later duplicates are recorded, not applied
                report.errors.push(IngestError {
                    source: IngestSource::Names,
                    line,
                    message: format!("duplicate name for entity {id:?}"),
                });
                return;
            }
            let lower = text::lowercase(name);
            let tokens = self.intern_tokens(&lower);
            let ent = &mut self.entities[offset as usize];
            ent.tokens = tokens;
            ent.name = Some(lower);
            return;
        }
        let lower = text::lowercase(name);
        let tokens = self.intern_tokens(&lower);
        let offset = self.entities.len() as u32;
        self.entities.push(Entity {
            id: id.to_string(),
            name: Some(lower),
            tokens,
        });
        self.entity_lookup.insert(id.to_string(), offset);
    }

    fn intern_tokens(&mut self, lower_name: &str) -> Vec<u32> {
        text::token_spans(lower_name)
            .into_iter()
            .map(|span| {
                let tok = &lower_name[span];
                if let Some(&w) = self.word_lookup.get(tok) {
                    w
                } else {
                    let w = self.words.len() as u32;
                    self.words.push(tok.to_string());
                    self.word_lookup.insert(tok.to_string(), w);
                    w
                }
            })
            .collect()
    }

    fn entity_or_nameless(&mut self, id: &str) -> u32 {
        if let Some(&offset) = self.entity_lookup.get(id) {
            return offset;
        }
        let offset = self.entities.len() as u32;
        self.entities.push(Entity {
            id: id.to_string(),
            name: None,
            tokens: Vec::new(),
        });
        self.entity_lookup.insert(id.to_string(), offset);
        offset
    }

    fn predicate_or_insert(&mut self, id: &str) -> u32 {
        if let Some(&offset) = self.predicate_lookup.get(id) {
            return offset;
        }
        let offset = self.predicates.len() as u32;
        self.predicates.push(Predicate {
            id: id.to_string(),
            tokens: text::tokenize(id),
        });
        self.predicate_lookup.insert(id.to_string(), offset);
        offset
    }

    fn build_subject_index(&mut self) {
        let mut counts = vec![0u32; self.entities.len() + 1];
        for fact in &self.facts {
            counts[fact.subject as usize + 1] += 1;
        }
        for i in 1..counts.len() {
            counts[i] += counts[i - 1];
        }
        self.subject_offsets = counts.clone();
        self.subject_postings = vec![0u32; self.facts.len()];
        let mut cursor = counts;
        for (fact_idx, fact) in self.facts.iter().enumerate() {
            let c = &mut cursor[fact.subject as usize];
            self.subject_postings[*c as usize] = fact_idx as u32;
            *c += 1;
        }
    }

    pub fn entity_count(&self) -> usize {
        self.entities.len()
    }

    pub fn predicate_count(&self) -> usize {
        self.predicates.len()
    }

    pub fn fact_count(&self) -> usize {
        self.facts.len()
    }

    pub fn entity(&self, offset: u32) -> &Entity {
        &self.entities[offset as usize]
    }

    pub fn entities(&self) -> &[Entity] {
        &self.entities
    }

    pub fn entity_offset(&self, id: &str) -> Option<u32> {
        self.entity_lookup.get(id).copied()
    }

    pub fn predicate(&self, offset: u32) -> &Predicate {
        &self.predicates[offset as usize]
    }

    pub fn predicates(&self) -> &[Predicate] {
        &self.predicates
    }

    pub fn predicate_offset(&self, id: &str) -> Option<u32> {
        self.predicate_lookup.get(id).copied()
    }

    pub fn fact(&self, idx: u32) -> &Fact {
        &self.facts[idx as usize]
    }

    pub fn facts(&self) -> &[Fact] {
        &self.facts
    }

    /// Interned word id for an entity-name token, if any name contains it.
    pub fn word_id(&self, token: &str) -> Option<u32> {
        self.word_lookup.get(token).copied()
    }

    pub fn word(&self, id: u32) -> &str {
        &self.words[id as usize]
    }

    /// Fact indices whose subject is the given entity, in ingest order.
    pub fn facts_of_subject(&self, entity: u32) -> &[u32] {
        let lo = self.subject_offsets[entity as usize] as usize;
        let hi = self.subject_offsets[entity as usize + 1] as usize;
        &self.subject_postings[lo..hi]
    }

    /// Facts whose subject has the given id; unknown ids yield an empty list.
    pub fn facts_by_subject(&self, entity_id: &str) -> Vec<&Fact> {
        match self.entity_offset(entity_id) {
            Some(offset) => self
                .facts_of_subject(offset)
                .iter()
                .map(|&i| self.fact(i))
                .collect(),
            None => Vec::new(),
        }
    }
}

/// Inverted index: entity-name word → sorted, duplicate-free entity offsets.
pub struct NameIndex {
    postings: HashMap<u32, Vec<u32>>,
}

/// Build the inverted word index over entity names. Deterministic and
/// idempotent; nameless entities contribute no postings.
pub fn build_name_index(kb: &KnowledgeBase) -> NameIndex {
    let mut postings: HashMap<u32, Vec<u32>> = HashMap::new();
    for (offset, entity) in kb.entities().iter().enumerate() {
        let mut seen = entity.tokens.clone();
        seen.sort_unstable();
        seen.dedup();
        for w in seen {
            postings.entry(w).or_default().push(offset as u32);
        }
    }
    // entities were visited in ascending offset order, so lists are sorted
    NameIndex { postings }
}

impl NameIndex {
    /// Entity offsets whose name contains the word (empty if none).
    pub fn entities_with_word(&self, kb: &KnowledgeBase, word: &str) -> &[u32] {
        kb.word_id(word)
            .and_then(|w| self.postings.get(&w))
            .map(|v| v.as_slice())
            .unwrap_or(&[])
    }

    pub fn posting(&self, word_id: u32) -> &[u32] {
        self.postings
            .get(&word_id)
            .map(|v| v.as_slice())
            .unwrap_or(&[])
    }

    pub fn word_count(&self) -> usize {
        self.postings.len()
    }

    /// Total number of postings across all words.
    pub fn posting_total(&self) -> usize {
        self.postings.values().map(|v| v.len()).sum()
    }
}

/// One labeled question: gold fact plus the question text.
#[derive(Debug, Clone)]
pub struct Question {
    /// 1-based line number in the questions file.
    pub id: u32,
    pub subject: String,
    pub predicate: String,
    pub object: String,
    pub text: String,
}

/// Read a questions file (four tab-separated fields; the question text may
/// itself contain tabs). Malformed lines are skipped and reported.
pub fn read_questions(reader: impl BufRead) -> Result<(Vec<Question>, Vec<IngestError>)> {
    let mut questions = Vec::new();
    let mut errors = Vec::new();
    for (line_no, line) in reader.lines().enumerate() {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.splitn(4, '\t').collect();
        if fields.len() != 4 || fields.iter().any(|f| f.is_empty()) {
            errors.push(IngestError {
                source: IngestSource::Questions,
                line: line_no + 1,
                message: format!("expected four tab-separated fields, got: {line:?}"),
            });
            continue;
        }
        questions.push(Question {
            id: (line_no + 1) as u32,
            subject: fields[0].to_string(),
            predicate: fields[1].to_string(),
            object: fields[2].to_string(),
            text: fields[3].to_string(),
        });
    }
    Ok((questions, errors))
}

pub fn read_questions_file(path: &Path) -> Result<(Vec<Question>, Vec<IngestError>)> {
    let f = BufReader::new(File::open(path).map_err(|e| Error::io(path, e))?);
    read_questions(f)
}
