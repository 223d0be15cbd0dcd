//! Evaluation harness: linker coverage, end-to-end question-answering
//! accuracy, and the relation-classification subtask.
//!
//! Reports carry exact numerator/denominator counts; the displayed value is
//! always their quotient, formatted as a percentage with one decimal.

use std::collections::HashMap;
use std::io::{BufRead, Write};

use crate::error::{Error, Result};
use crate::kb::{KnowledgeBase, Question};
use crate::linker::{self, QuestionContext};
use crate::pipeline::{MatchModel, RcExample, ScoreCaches};

/// One evaluation result. `value()` is exactly `numerator / denominator`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EvalReport {
    pub metric: String,
    pub n: Option<usize>,
    pub numerator: u64,
    pub denominator: u64,
    /// Free-form echo of the configuration that produced the report.
    pub config: String,
}

impl EvalReport {
    pub fn new(metric: &str, n: Option<usize>, numerator: u64, denominator: u64, config: &str) -> Self {
        EvalReport {
            metric: metric.to_string(),
            n,
            numerator,
            denominator,
            config: config.to_string(),
        }
    }

    pub fn value(&self) -> f64 {
        if self.denominator == 0 {
            0.0
        } else {
            self.numerator as f64 / self.denominator as f64
        }
    }

    /// Percentage with one decimal, matching the usual table formatting.
    pub fn percent(&self) -> String {
        format!("{:.1}", self.value() * 100.0)
    }

    /// Machine-readable key-value block (one `key=value` per line, blank
    /// line terminated).
    pub fn to_kv(&self) -> String {
        let mut s = String::new();
        s.push_str(&format!("metric={}\n", self.metric));
        if let Some(n) = self.n {
            s.push_str(&format!("n={n}\n"));
        }
        s.push_str(&format!("numerator={}\n", self.numerator));
        s.push_str(&format!("denominator={}\n", self.denominator));
        s.push_str(&format!("config={}\n", self.config));
        s.push('\n');
        s
    }

    /// Parse one key-value block produced by [`EvalReport::to_kv`].
    pub fn from_kv(block: &str) -> Result<Self> {
        let mut map = HashMap::new();
        for line in block.lines() {
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::InvalidInput(format!("bad report line {line:?}")))?;
            map.insert(k.to_string(), v.to_string());
        }
        let get = |k: &str| {
            map.get(k)
                .cloned()
                .ok_or_else(|| Error::InvalidInput(format!("report misses key {k:?}")))
        };
        Ok(EvalReport {
            metric: get("metric")?,
            n: match map.get("n") {
                Some(v) => Some(
                    v.parse()
                        .map_err(|_| Error::InvalidInput("bad n in report".into()))?,
                ),
                None => None,
            },
            numerator: get("numerator")?
                .parse()
                .map_err(|_| Error::InvalidInput("bad numerator in report".into()))?,
            denominator: get("denominator")?
                .parse()
                .map_err(|_| Error::InvalidInput("bad denominator in report".into()))?,
            config: get("config")?,
        })
    }
}

impl std::fmt::Display for EvalReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self.n {
            Some(n) => write!(
                f,
                "{}@{n}: {} ({}/{})",
                self.metric, self.percent(), self.numerator, self.denominator
            ),
            None => write!(
                f,
                "{}: {} ({}/{})",
                self.metric, self.percent(), self.numerator, self.denominator
            ),
        }
    }
}

/// Fraction of questions whose gold subject appears among the top-n linked
/// candidates, for each requested n. `lists` holds ranked entity ids keyed
/// by question id (the linking-export format); questions without a list
/// count as uncovered.
pub fn coverage_at_n(
    questions: &[Question],
    lists: &[(u32, Vec<(String, f64)>)],
    n_values: &[usize],
) -> Vec<EvalReport> {
    let by_id: HashMap<u32, &Vec<(String, f64)>> = lists.iter().map(|(q, l)| (*q, l)).collect();
    n_values
        .iter()
        .map(|&n| {
            let covered = questions
                .iter()
                .filter(|q| {
                    by_id
                        .get(&q.id)
                        .is_some_and(|l| l.iter().take(n).any(|(id, _)| *id == q.subject))
                })
                .count() as u64;
            EvalReport::new(
                "coverage",
                Some(n),
                covered,
                questions.len() as u64,
                "gold subject among top-n linked candidates",
            )
        })
        .collect()
}

/// Fraction of questions whose prediction matches the gold subject AND
/// predicate. Questions without a prediction count as wrong (and are
/// returned for warning).
pub fn qa_accuracy(
    questions: &[Question],
    predictions: &[(u32, String, String, f64)],
) -> (EvalReport, Vec<u32>) {
    let by_id: HashMap<u32, (&str, &str)> = predictions
        .iter()
        .map(|(q, s, p, _)| (*q, (s.as_str(), p.as_str())))
        .collect();
    let mut correct = 0u64;
    let mut missing = Vec::new();
    for q in questions {
        match by_id.get(&q.id) {
            Some((s, p)) => {
                if *s == q.subject && *p == q.predicate {
                    correct += 1;
                }
            }
            None => missing.push(q.id),
        }
    }
    let report = EvalReport::new(
        "accuracy",
        None,
        correct,
        questions.len() as u64,
        "prediction matches gold subject and predicate",
    );
    (report, missing)
}

/// Statistics of relation-classification dataset construction.
#[derive(Debug, Default, Clone)]
pub struct RcBuildStats {
    pub kept: usize,
    /// Gold subject or predicate not resolvable in the catalog.
    pub unresolvable: usize,
    /// Gold subject has exactly one predicate, so no negatives exist.
    pub single_predicate: usize,
    /// No mention span could be projected for the gold entity.
    pub no_mention: usize,
}

/// Convert questions into relation-classification examples: the pattern
/// (gold mention replaced by the entity slot) labeled with the gold
/// predicate, negatives being all other predicates of the gold subject.
/// Questions whose subject has a single predicate are dropped.
pub fn build_rc_dataset(questions: &[Question], kb: &KnowledgeBase) -> (Vec<RcExample>, RcBuildStats) {
    let mut out = Vec::new();
    let mut stats = RcBuildStats::default();
    for q in questions {
        let (Some(subject), Some(gold)) = (
            kb.entity_offset(&q.subject),
            kb.predicate_offset(&q.predicate),
        ) else {
            stats.unresolvable += 1;
            log::debug!("rc: question {} has unresolvable gold ids", q.id);
            continue;
        };
        let mut predicates: Vec<u32> = kb
            .facts_of_subject(subject)
            .iter()
            .map(|&f| kb.fact(f).predicate)
            .collect();
        predicates.sort_unstable();
        predicates.dedup();
        let negatives: Vec<u32> = predicates.iter().copied().filter(|&p| p != gold).collect();
        if negatives.is_empty() {
            stats.single_predicate += 1;
            continue;
        }
        let ctx = QuestionContext::new(&q.text, kb);
        let Some(span) = linker::project_gold_mention(&ctx, kb, subject) else {
            stats.no_mention += 1;
            log::debug!("rc: question {} has no projectable mention", q.id);
            continue;
        };
        out.push(RcExample {
            question: q.id,
            pattern: ctx.pattern(&span),
            gold,
            negatives,
        });
        stats.kept += 1;
    }
    (out, stats)
}

/// Fraction of examples where the gold predicate attains the strict maximum
/// `m_r` among gold and negatives; ties count as wrong.
pub fn rc_accuracy(set: &[RcExample], model: &MatchModel, kb: &KnowledgeBase) -> Result<EvalReport> {
    let mut caches = ScoreCaches::new();
    let mut correct = 0u64;
    for ex in set {
        let gold = caches.m_r(model, kb, ex.gold, &ex.pattern)?;
        let mut strict = true;
        for &neg in &ex.negatives {
            let score = caches.m_r(model, kb, neg, &ex.pattern)?;
            if score >= gold {
                strict = false;
                break;
            }
        }
        if strict {
            correct += 1;
        }
    }
    Ok(EvalReport::new(
        "rc-accuracy",
        None,
        correct,
        set.len() as u64,
        &format!("pooling mode {}", model.matcher.cfg.mode.label()),
    ))
}

/// Write relation-classification examples as TSV: question id, pattern
/// tokens space-joined, gold predicate id, comma-joined negative ids.
pub fn write_rc_examples(w: &mut impl Write, set: &[RcExample], kb: &KnowledgeBase) -> Result<()> {
    for ex in set {
        let negs: Vec<&str> = ex.negatives.iter().map(|&p| kb.predicate(p).id.as_str()).collect();
        writeln!(
            w,
            "{}\t{}\t{}\t{}",
            ex.question,
            ex.pattern.join(" "),
            kb.predicate(ex.gold).id,
            negs.join(",")
        )?;
    }
    Ok(())
}

pub fn read_rc_examples(r: impl BufRead, kb: &KnowledgeBase) -> Result<Vec<RcExample>> {
    let mut out = Vec::new();
    for line in r.lines() {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 4 {
            return Err(Error::InvalidInput(format!("bad rc line {line:?}")));
        }
        let question = fields[0]
            .parse()
            .map_err(|_| Error::InvalidInput(format!("bad question id in {line:?}")))?;
        let pattern: Vec<String> = fields[1].split(' ').map(String::from).collect();
        let lookup = |id: &str| {
            kb.predicate_offset(id)
                .ok_or_else(|| Error::InvalidInput(format!("unknown predicate {id:?}")))
        };
        let gold = lookup(fields[2])?;
        let negatives = fields[3]
            .split(',')
            .filter(|s| !s.is_empty())
            .map(lookup)
            .collect::<Result<Vec<u32>>>()?;
        out.push(RcExample {
            question,
            pattern,
            gold,
            negatives,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kb::KnowledgeBase;
    use std::io::Cursor;

    fn q(id: u32, subject: &str, predicate: &str, text: &str) -> Question {
        Question {
            id,
            subject: subject.into(),
            predicate: predicate.into(),
            object: "o".into(),
            text: text.into(),
        }
    }

    #[test]
    fn report_value_is_exact_fraction_and_roundtrips() {
        let r = EvalReport::new("coverage", Some(20), 81, 100, "test");
        assert_eq!(r.value(), 0.81);
        assert_eq!(r.percent(), "81.0");
        let back = EvalReport::from_kv(&r.to_kv()).unwrap();
        assert_eq!(back, r);
        assert_eq!(back.value(), back.numerator as f64 / back.denominator as f64);
    }

    #[test]
    fn coverage_counts_and_monotonicity() {
        let questions = vec![q(1, "e1", "p", "x"), q(2, "e2", "p", "y"), q(3, "e9", "p", "z")];
        let lists = vec![
            (1u32, vec![("e5".to_string(), 0.9), ("e1".to_string(), 0.8)]),
            (2u32, vec![("e2".to_string(), 0.7)]),
            // question 3 has no list
        ];
        let reports = coverage_at_n(&questions, &lists, &[1, 2, 5]);
        assert_eq!(reports[0].numerator, 1); // only e2 at rank 1
        assert_eq!(reports[1].numerator, 2);
        assert_eq!(reports[2].numerator, 2);
        // nondecreasing in n
        for w in reports.windows(2) {
            assert!(w[0].numerator <= w[1].numerator);
        }
        assert_eq!(reports[0].denominator, 3);
    }

    #[test]
    fn qa_accuracy_counts_missing_as_wrong() {
        let questions = vec![q(1, "e1", "p1", "x"), q(2, "e2", "p2", "y")];
        let preds = vec![(1u32, "e1".to_string(), "p1".to_string(), 1.0)];
        let (report, missing) = qa_accuracy(&questions, &preds);
        assert_eq!(report.numerator, 1);
        assert_eq!(report.denominator, 2);
        assert_eq!(missing, vec![2]);
        // all-correct case
        let preds = vec![
            (1u32, "e1".to_string(), "p1".to_string(), 1.0),
            (2u32, "e2".to_string(), "p2".to_string(), 1.0),
        ];
        let (report, missing) = qa_accuracy(&questions, &preds);
        assert_eq!(report.value(), 1.0);
        assert!(missing.is_empty());
    }

    #[test]
    fn qa_accuracy_requires_both_ids() {
        let questions = vec![q(1, "e1", "p1", "x")];
        let preds = vec![(1u32, "e1".to_string(), "p9".to_string(), 1.0)];
        let (report, _) = qa_accuracy(&questions, &preds);
        assert_eq!(report.numerator, 0);
    }

    fn toy_kb() -> KnowledgeBase {
        let names = "e1\talpha road\ne2\tbeta hill\n";
        let triples = "e1\tp1\te2\ne1\tp2\te2\ne2\tp1\te1\n";
        KnowledgeBase::ingest(Cursor::new(triples), Cursor::new(names))
            .unwrap()
            .0
    }

    #[test]
    fn rc_dataset_negatives_match_subject_predicates() {
        let kb = toy_kb();
        let questions = vec![
            q(1, "e1", "p1", "where does alpha road go"),
            // e2 has a single predicate: dropped
            q(2, "e2", "p1", "where is beta hill"),
            // unresolvable subject: dropped
            q(3, "zzz", "p1", "where is nothing"),
        ];
        let (set, stats) = build_rc_dataset(&questions, &kb);
        assert_eq!(set.len(), 1);
        assert_eq!(stats.kept, 1);
        assert_eq!(stats.single_predicate, 1);
        assert_eq!(stats.unresolvable, 1);
        let ex = &set[0];
        assert_eq!(kb.predicate(ex.gold).id, "p1");
        assert_eq!(ex.negatives.len(), 1);
        assert_eq!(kb.predicate(ex.negatives[0]).id, "p2");
        assert!(!ex.negatives.contains(&ex.gold));
        assert!(ex.pattern.contains(&"<e>".to_string()));
    }

    #[test]
    fn rc_examples_roundtrip() {
        let kb = toy_kb();
        let questions = vec![q(1, "e1", "p1", "where does alpha road go")];
        let (set, _) = build_rc_dataset(&questions, &kb);
        let mut buf = Vec::new();
        write_rc_examples(&mut buf, &set, &kb).unwrap();
        let back = read_rc_examples(Cursor::new(buf), &kb).unwrap();
        assert_eq!(back.len(), set.len());
        assert_eq!(back[0].pattern, set[0].pattern);
        assert_eq!(back[0].gold, set[0].gold);
        assert_eq!(back[0].negatives, set[0].negatives);
    }
}
