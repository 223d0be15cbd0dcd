//! Entity linking over the name index.
//!
//! Candidates are retrieved by question words (passive) or mention words
//! (active), then scored by three surface factors derived from the longest
//! consecutive common subsequence (LCCS) between question and entity name:
//!
//! - `a`: fraction of the question covered by the LCCS,
//! - `b`: fraction of the entity name covered by the LCCS,
//! - `c`: how close the LCCS ends to the end of the question,
//!
//! combined as `s_e = alpha*a + beta*b + (1-alpha-beta)*c`. Each passive
//! candidate also yields a `(mention, pattern)` pair by extending the LCCS
//! span to the entity's length; active linking reuses one externally
//! supplied mention span for the whole question.


use std::io::{BufRead, Write};
use std::ops::Range;

use crate::error::Result;
use crate::kb::{KnowledgeBase, NameIndex, Question};
use crate::text;

/// Maximal common contiguous run between two sequences.
///
/// Offsets are inclusive/exclusive; `q_end - q_start == e_end - e_start`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LccsSpan {
    pub q_start: usize,
    pub q_end: usize,
    pub e_start: usize,
    pub e_end: usize,
}

impl LccsSpan {
    pub fn len(&self) -> usize {
        self.q_end - self.q_start
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Longest consecutive common subsequence of two token sequences.
///
/// Among runs of maximal length, the one ending rightmost in `q` wins, and
/// for equal question positions the one starting earliest in `e`. Returns
/// `None` iff the sequences share no token.
pub fn lccs<T: PartialEq>(q: &[T], e: &[T]) -> Option<LccsSpan> {
    if q.is_empty() || e.is_empty() {
        return None;
    }
    // run[j] = length of the common run ending at q[i], e[j]
    let mut run = vec![0usize; e.len()];
    let mut best: Option<LccsSpan> = None;
    for i in 0..q.len() {
        // sweep j right-to-left so run[j-1] still holds the previous row
        for j in (0..e.len()).rev() {
            if q[i] == e[j] {
                run[j] = if j == 0 { 1 } else { run[j - 1] + 1 };
                let cand = LccsSpan {
                    q_start: i + 1 - run[j],
                    q_end: i + 1,
                    e_start: j + 1 - run[j],
                    e_end: j + 1,
                };
                let better = match &best {
                    None => true,
                    Some(b) => {
                        cand.len() > b.len()
                            || (cand.len() == b.len() && cand.q_end > b.q_end)
                            || (cand.len() == b.len()
                                && cand.q_end == b.q_end
                                && cand.e_start < b.e_start)
                    }
                };
                if better {
                    best = Some(cand);
                }
            } else {
                run[j] = 0;
            }
        }
    }
    best
}

/// Word-level LCCS; alias of [`lccs`] fixing the token type.
pub fn lccs_words(q_tokens: &[&str], e_tokens: &[&str]) -> Option<LccsSpan> {
    lccs(q_tokens, e_tokens)
}

/// Character-level LCCS over lowercased strings. Offsets are char indices.
pub fn lccs_chars(q_text: &str, e_text: &str) -> Option<LccsSpan> {
    let q: Vec<char> = q_text.chars().collect();
    let e: Vec<char> = e_text.chars().collect();
    lccs(&q, &e)
}

/// Linker weights and retrieval limits.
#[derive(Debug, Clone)]
pub struct LinkerConfig {
    pub alpha: f64,
    pub beta: f64,
    pub top_n: usize,
    /// Words whose posting lists exceed this length are skipped during
    /// retrieval (the skip is logged). `None` means unlimited.
    pub max_posting_len: Option<usize>,
}

impl Default for LinkerConfig {
    fn default() -> Self {
        LinkerConfig {
            alpha: 0.6,
            beta: 0.3,
            top_n: 20,
            max_posting_len: None,
        }
    }
}

impl LinkerConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = (0.0..=1.0).contains(&self.alpha)
            && (0.0..=1.0).contains(&self.beta)
            && self.alpha + self.beta <= 1.0 + 1e-9
            && self.top_n > 0;
        if ok {
            Ok(())
        } else {
            Err(crate::error::Error::Config(format!(
                "linker weights must satisfy 0 <= alpha, beta and alpha+beta <= 1, top_n > 0; \
                 got alpha={}, beta={}, top_n={}",
                self.alpha, self.beta, self.top_n
            )))
        }
    }
}

/// LCCS factors and combined score for one question/entity pair.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredMatch {
    pub lccs: LccsSpan,
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub s_e: f64,
    /// True when the word-level LCCS was empty and the factors were computed
    /// from the character-level fallback (lengths in characters).
    pub char_level: bool,
}

fn combine(span: LccsSpan, q_len: usize, e_len: usize, cfg: &LinkerConfig, char_level: bool) -> ScoredMatch {
    let a = span.len() as f64 / q_len as f64;
    let b = span.len() as f64 / e_len as f64;
    // 1-based position of the last matched element; exclusive end equals it
    let c = span.q_end as f64 / q_len as f64;
    let s_e = cfg.alpha * a + cfg.beta * b + (1.0 - cfg.alpha - cfg.beta) * c;
    ScoredMatch {
        lccs: span,
        a,
        b,
        c,
        s_e,
        char_level,
    }
}

/// Score an entity against a question at word level. `None` when the two
/// share no token.
pub fn score_entity<T: PartialEq>(q_tokens: &[T], e_tokens: &[T], cfg: &LinkerConfig) -> Option<ScoredMatch> {
    let span = lccs(q_tokens, e_tokens)?;
    Some(combine(span, q_tokens.len(), e_tokens.len(), cfg, false))
}

/// Character-level fallback scoring, used when the word-level LCCS is empty.
/// Factors are computed with lengths in characters.
pub fn score_entity_chars(q_text: &str, e_text: &str, cfg: &LinkerConfig) -> Option<ScoredMatch> {
    let span = lccs_chars(q_text, e_text)?;
    Some(combine(
        span,
        q_text.chars().count(),
        e_text.chars().count(),
        cfg,
        true,
    ))
}

/// Tokenized question with byte spans back into the lowercased text and
/// interned word ids for fast LCCS against catalog names.
pub struct QuestionContext {
    pub lower: String,
    pub spans: Vec<Range<usize>>,
    pub tokens: Vec<String>,
    word_ids: Vec<u32>,
}

/// Sentinel for question words that appear in no entity name. It never
/// equals an interned id, so it cannot take part in a word-level LCCS.
const UNKNOWN_WORD: u32 = u32::MAX;

impl QuestionContext {
    pub fn new(q_text: &str, kb: &KnowledgeBase) -> Self {
        let lower = text::lowercase(q_text);
        let spans = text::token_spans(&lower);
        let tokens: Vec<String> = spans.iter().map(|r| lower[r.clone()].to_string()).collect();
        let word_ids = tokens
            .iter()
            .map(|t| kb.word_id(t).unwrap_or(UNKNOWN_WORD))
            .collect();
        QuestionContext {
            lower,
            spans,
            tokens,
            word_ids,
        }
    }

    /// Raw (lowercased) surface form of a token range, punctuation included.
    pub fn surface(&self, range: &Range<usize>) -> String {
        if range.start >= range.end {
            return String::new();
        }
        let lo = self.spans[range.start].start;
        let hi = self.spans[range.end - 1].end;
        self.lower[lo..hi].to_string()
    }

    /// Question tokens with the mention range replaced by the entity slot.
    pub fn pattern(&self, mention: &Range<usize>) -> Vec<String> {
        let mut out = Vec::with_capacity(self.tokens.len() + 1 - mention.len().min(self.tokens.len()));
        out.extend(self.tokens[..mention.start].iter().cloned());
        out.push(text::ENTITY_SLOT.to_string());
        out.extend(self.tokens[mention.end..].iter().cloned());
        out
    }
}

/// One ranked linking candidate with its derived `(mention, pattern)` pair.
#[derive(Debug, Clone)]
pub struct EntityCandidate {
    /// Offset into the knowledge-base entity catalog.
    pub entity: u32,
    pub score: ScoredMatch,
    /// Token range of the mention in the question.
    pub mention_span: Range<usize>,
    /// Raw surface form of the mention (lowercased question substring).
    pub mention: String,
    /// Question tokens with the mention replaced by `<e>`.
    pub pattern: Vec<String>,
}

/// Mention detection for a scored candidate: extend the word-level LCCS by
/// the entity tokens flanking it, clamped to the question; for char-level
/// matches, expand to whitespace and snap to whole tokens.
///
/// Returns `None` when the char-level span covers no token (the candidate is
/// then dropped from linking output).
pub fn detect_mention_passive(
    ctx: &QuestionContext,
    score: &ScoredMatch,
    e_token_len: usize,
) -> Option<Range<usize>> {
    if !score.char_level {
        let l = score.lccs.e_start;
        let r = e_token_len - score.lccs.e_end;
        let start = score.lccs.q_start.saturating_sub(l);
        let end = (score.lccs.q_end + r).min(ctx.tokens.len());
        return Some(start..end);
    }
    // char-level: spans are char offsets into ctx.lower
    let chars: Vec<(usize, char)> = ctx.lower.char_indices().collect();
    if chars.is_empty() {
        return None;
    }
    let mut lo = score.lccs.q_start;
    let mut hi = score.lccs.q_end; // exclusive char index
    while lo > 0 && !chars[lo - 1].1.is_whitespace() {
        lo -= 1;
    }
    while hi < chars.len() && !chars[hi].1.is_whitespace() {
        hi += 1;
    }
    let byte_lo = chars[lo].0;
    let byte_hi = if hi == chars.len() {
        ctx.lower.len()
    } else {
        chars[hi].0
    };
    // snap to the tokens overlapping the expanded byte range
    let mut t_start = None;
    let mut t_end = 0;
    for (i, span) in ctx.spans.iter().enumerate() {
        if span.start < byte_hi && span.end > byte_lo {
            if t_start.is_none() {
                t_start = Some(i);
            }
            t_end = i + 1;
        }
    }
    t_start.map(|s| s..t_end)
}

/// Score one entity against the question, word level first, character level
/// as fallback.
fn score_against(ctx: &QuestionContext, kb: &KnowledgeBase, entity: u32, cfg: &LinkerConfig) -> Option<ScoredMatch> {
    let ent = kb.entity(entity);
    if let Some(m) = score_entity(&ctx.word_ids, &ent.tokens, cfg) {
        return Some(m);
    }
    let name = ent.name.as_deref()?;
    score_entity_chars(&ctx.lower, name, cfg)
}

/// Candidate offsets retrieved by the given question tokens: the union of
/// posting lists, sorted and deduplicated.
fn retrieve(tokens: &[String], kb: &KnowledgeBase, idx: &NameIndex, cfg: &LinkerConfig) -> Vec<u32> {
    let mut seen_words: Vec<&str> = tokens.iter().map(|t| t.as_str()).collect();
    seen_words.sort_unstable();
    seen_words.dedup();
    let mut out: Vec<u32> = Vec::new();
    for word in seen_words {
        let posting = idx.entities_with_word(kb, word);
        if let Some(cap) = cfg.max_posting_len {
            if posting.len() > cap {
                log::debug!(
                    "skipping word {word:?}: posting length {} exceeds cap {cap}",
                    posting.len()
                );
                continue;
            }
        }
        out.extend_from_slice(posting);
    }
    out.sort_unstable();
    out.dedup();
    out
}

fn rank(kb: &KnowledgeBase, mut scored: Vec<(u32, ScoredMatch)>, top_n: usize) -> Vec<(u32, ScoredMatch)> {
    scored.sort_by(|x, y| {
        y.1.s_e
            .partial_cmp(&x.1.s_e)
            .expect("linker scores are finite")
            .then_with(|| kb.entity(x.0).id.cmp(&kb.entity(y.0).id))
    });
    scored.truncate(top_n);
    scored
}

/// Passive linking: retrieve by all question words, score, rank, and derive
/// a `(mention, pattern)` pair per candidate.
pub fn link_passive(q_text: &str, kb: &KnowledgeBase, idx: &NameIndex, cfg: &LinkerConfig) -> Vec<EntityCandidate> {
    let ctx = QuestionContext::new(q_text, kb);
    link_passive_ctx(&ctx, kb, idx, cfg)
}

pub fn link_passive_ctx(
    ctx: &QuestionContext,
    kb: &KnowledgeBase,
    idx: &NameIndex,
    cfg: &LinkerConfig,
) -> Vec<EntityCandidate> {
    let scored: Vec<(u32, ScoredMatch)> = retrieve(&ctx.tokens, kb, idx, cfg)
        .into_iter()
        .filter_map(|e| score_against(ctx, kb, e, cfg).map(|m| (e, m)))
        .collect();
    rank(kb, scored, cfg.top_n)
        .into_iter()
        .filter_map(|(entity, score)| {
            let e_len = kb.entity(entity).tokens.len();
            let span = detect_mention_passive(ctx, &score, e_len)?;
            let mention = ctx.surface(&span);
            if mention.is_empty() {
                return None;
            }
            let pattern = ctx.pattern(&span);
            Some(EntityCandidate {
                entity,
                score,
                mention_span: span,
                mention,
                pattern,
            })
        })
        .collect()
}

/// Active linking: retrieval is restricted to the words of an externally
/// supplied mention span, scoring is identical to passive (factors against
/// the full question), and the single `(mention, pattern)` pair is reused
/// for every candidate.
pub fn link_active(
    q_text: &str,
    mention: Range<usize>,
    kb: &KnowledgeBase,
    idx: &NameIndex,
    cfg: &LinkerConfig,
) -> Vec<EntityCandidate> {
    let ctx = QuestionContext::new(q_text, kb);
    link_active_ctx(&ctx, mention, kb, idx, cfg)
}

pub fn link_active_ctx(
    ctx: &QuestionContext,
    mention: Range<usize>,
    kb: &KnowledgeBase,
    idx: &NameIndex,
    cfg: &LinkerConfig,
) -> Vec<EntityCandidate> {
    if mention.start >= mention.end || mention.end > ctx.tokens.len() {
        return Vec::new();
    }
    let mention_tokens: Vec<String> = ctx.tokens[mention.clone()].to_vec();
    let scored: Vec<(u32, ScoredMatch)> = retrieve(&mention_tokens, kb, idx, cfg)
        .into_iter()
        .filter_map(|e| score_against(ctx, kb, e, cfg).map(|m| (e, m)))
        .collect();
    let mention_text = ctx.surface(&mention);
    let pattern = ctx.pattern(&mention);
    rank(kb, scored, cfg.top_n)
        .into_iter()
        .map(|(entity, score)| EntityCandidate {
            entity,
            score,
            mention_span: mention.clone(),
            mention: mention_text.clone(),
            pattern: pattern.clone(),
        })
        .collect()
}

/// Project a gold entity onto the question: the rightmost verbatim
/// occurrence of the full name, falling back to the passive detector.
pub fn project_gold_mention(ctx: &QuestionContext, kb: &KnowledgeBase, entity: u32) -> Option<Range<usize>> {
    let ent = kb.entity(entity);
    if !ent.tokens.is_empty() && ctx.word_ids.len() >= ent.tokens.len() {
        let n = ent.tokens.len();
        for start in (0..=ctx.word_ids.len() - n).rev() {
            if ctx.word_ids[start..start + n] == ent.tokens[..] {
                return Some(start..start + n);
            }
        }
    }
    let cfg = LinkerConfig::default();
    let score = score_against(ctx, kb, entity, &cfg)?;
    detect_mention_passive(ctx, &score, ent.tokens.len())
}

// ---------------------------------------------------------------------------
// Weight tuning
// ---------------------------------------------------------------------------

/// Which factor to remove when tuning ablated scores. The surviving weights
/// are re-tuned under the constraint that the removed factor's weight is 0.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Ablation {
    None,
    DropA,
    DropB,
    DropC,
}

#[derive(Debug, Clone)]
pub struct TuneResult {
    pub alpha: f64,
    pub beta: f64,
    /// Top-N coverage achieved on the tuning set at the returned weights.
    pub coverage: f64,
    pub points_evaluated: usize,
}

struct TuneQuestion {
    /// (entity offset, a, b, c) for every retrieved candidate.
    factors: Vec<(u32, f64, f64, f64)>,
    gold: Option<u32>,
}

/// Grid-search `alpha, beta` on a labeled dev set, maximizing top-N
/// coverage. The grid is `{0, grid_step, ..., 1}^2` restricted to
/// `alpha + beta <= 1` (and to the ablation constraint, if any); ties break
/// toward smaller `alpha`, then smaller `beta`. An empty dev set returns the
/// default weights.
pub fn tune_weights(
    dev: &[Question],
    kb: &KnowledgeBase,
    idx: &NameIndex,
    cfg: &LinkerConfig,
    grid_step: f64,
    ablation: Ablation,
) -> TuneResult {
    let defaults = LinkerConfig::default();
    if dev.is_empty() {
        return TuneResult {
            alpha: defaults.alpha,
            beta: defaults.beta,
            coverage: 0.0,
            points_evaluated: 0,
        };
    }
    // factors are weight-independent, so retrieve and factor once
    let prepared: Vec<TuneQuestion> = dev
        .iter()
        .map(|q| {
            let ctx = QuestionContext::new(&q.text, kb);
            let factors = retrieve(&ctx.tokens, kb, idx, cfg)
                .into_iter()
                .filter_map(|e| score_against(&ctx, kb, e, cfg).map(|m| (e, m.a, m.b, m.c)))
                .collect();
            TuneQuestion {
                factors,
                gold: kb.entity_offset(&q.subject),
            }
        })
        .collect();

    let n = (1.0 / grid_step).round().max(1.0) as usize;
    let mut best: Option<(f64, f64, f64)> = None; // (coverage, alpha, beta)
    let mut points = 0usize;
    let consider = |ia: usize, ib: usize, best: &mut Option<(f64, f64, f64)>, points: &mut usize| {
        let alpha = ia as f64 / n as f64;
        let beta = ib as f64 / n as f64;
        let cov = grid_coverage(&prepared, kb, alpha, beta, cfg.top_n);
        *points += 1;
        if best.as_ref().map_or(true, |(c, _, _)| cov > *c) {
            *best = Some((cov, alpha, beta));
        }
    };
    match ablation {
        Ablation::None => {
            for ia in 0..=n {
                for ib in 0..=(n - ia) {
                    consider(ia, ib, &mut best, &mut points);
                }
            }
        }
        Ablation::DropA => {
            for ib in 0..=n {
                consider(0, ib, &mut best, &mut points);
            }
        }
        Ablation::DropB => {
            for ia in 0..=n {
                consider(ia, 0, &mut best, &mut points);
            }
        }
        Ablation::DropC => {
            for ia in 0..=n {
                consider(ia, n - ia, &mut best, &mut points);
            }
        }
    }
    let (coverage, alpha, beta) = best.expect("grid is nonempty");
    TuneResult {
        alpha,
        beta,
        coverage,
        points_evaluated: points,
    }
}

fn grid_coverage(prepared: &[TuneQuestion], kb: &KnowledgeBase, alpha: f64, beta: f64, top_n: usize) -> f64 {
    let gamma = 1.0 - alpha - beta;
    let mut covered = 0usize;
    for q in prepared {
        let Some(gold) = q.gold else { continue };
        let Some(&(_, ga, gb, gc)) = q.factors.iter().find(|(e, _, _, _)| *e == gold) else {
            continue;
        };
        let g_score = alpha * ga + beta * gb + gamma * gc;
        let gold_id = &kb.entity(gold).id;
        // gold is in the top N iff fewer than N candidates rank above it
        let better = q
            .factors
            .iter()
            .filter(|(e, a, b, c)| {
                if *e == gold {
                    return false;
                }
                let s = alpha * a + beta * b + gamma * c;
                s > g_score || (s == g_score && kb.entity(*e).id < *gold_id)
            })
            .count();
        if better < top_n {
            covered += 1;
        }
    }
    covered as f64 / prepared.len() as f64
}

// ---------------------------------------------------------------------------
// Linking-results export
// ---------------------------------------------------------------------------

/// Write one export line per question: the question id, then the top-N
/// `entity-id:s_e` entries, tab separated.
pub fn write_linking_line(
    w: &mut impl Write,
    question_id: u32,
    candidates: &[EntityCandidate],
    kb: &KnowledgeBase,
) -> Result<()> {
    write!(w, "{question_id}")?;
    for cand in candidates {
        write!(w, "\t{}:{:.6}", kb.entity(cand.entity).id, cand.score.s_e)?;
    }
    writeln!(w)?;
    Ok(())
}

/// Parse a linking-results export file back into `(question id, ranked
/// (entity-id, s_e) list)` records.
pub fn read_linking_file(r: impl BufRead) -> Result<Vec<(u32, Vec<(String, f64)>)>> {
    let mut out = Vec::new();
    for line in r.lines() {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let mut fields = line.split('\t');
        let qid: u32 = fields
            .next()
            .and_then(|f| f.parse().ok())
            .ok_or_else(|| crate::error::Error::InvalidInput(format!("bad linking line: {line:?}")))?;
        let mut entries = Vec::new();
        for field in fields {
            let (id, score) = field.rsplit_once(':').ok_or_else(|| {
                crate::error::Error::InvalidInput(format!("bad linking entry: {field:?}"))
            })?;
            let score: f64 = score.parse().map_err(|_| {
                crate::error::Error::InvalidInput(format!("bad linking score: {field:?}"))
            })?;
            entries.push((id.to_string(), score));
        }
        out.push((qid, entries));
    }
    Ok(out)
}
