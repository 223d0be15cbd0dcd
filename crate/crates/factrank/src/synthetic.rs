//! Deterministic desk-scale corpus generation: a synthetic knowledge base
//! plus templated questions with known gold facts.
//!
//! Every entity name carries a unique anchor word, so the passive linker
//! retrieves the gold entity for every generated question. Some names start
//! with a dotted abbreviation ("k.r. valo") that questions render without
//! dots ("kr valo"), exercising the character-level match; each predicate
//! owns a disjoint set of keywords spread over several paraphrase
//! templates, so the word matcher has a learnable signal.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct SyntheticSpec {
    pub entities: usize,
    pub predicates: usize,
    pub templates_per_predicate: usize,
    pub train_questions: usize,
    pub dev_questions: usize,
    pub test_questions: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            entities: 100,
            predicates: 12,
            templates_per_predicate: 3,
            train_questions: 500,
            dev_questions: 0,
            test_questions: 100,
            seed: 7,
        }
    }
}

/// File contents of a generated corpus (knowledge base plus question
/// splits). Identical specs produce byte-identical corpora.
#[derive(Debug, Clone)]
pub struct SyntheticCorpus {
    pub triples: String,
    pub names: String,
    pub train: String,
    pub dev: String,
    pub test: String,
}

const SYLLABLES: [&str; 20] = [
    "ba", "ce", "di", "fo", "gu", "ha", "ke", "li", "mo", "nu", "pa", "re", "si", "to", "vu",
    "wa", "ze", "ko", "ru", "ta",
];

fn word(i: usize, len: usize) -> String {
    let mut s = String::new();
    let mut x = i;
    for k in 0..len {
        s.push_str(SYLLABLES[(x + 7 * k) % SYLLABLES.len()]);
        x /= SYLLABLES.len();
    }
    s
}

struct GenEntity {
    id: String,
    name: String,
    /// Question-side rendering of the name (dots dropped from the
    /// abbreviation), used for half of the mentions.
    noisy_mention: Option<String>,
}

/// Generate the corpus described by `spec`.
pub fn gen_synthetic(spec: &SyntheticSpec) -> SyntheticCorpus {
    assert!(spec.entities >= 2, "need at least two entities");
    assert!(spec.predicates >= 1, "need at least one predicate");
    assert!(spec.templates_per_predicate >= 1);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    // disjoint word pools: anchors are unique per entity, keywords unique
    // per predicate, fillers shared
    let anchor = |i: usize| format!("{}q{}", word(i, 2), i);
    let keyword = |p: usize, k: usize| format!("{}k{}{}", word(p, 2), p, k);
    let fillers: Vec<String> = (0..24).map(|i| word(7 * i + 3, 2)).collect();

    let mut entities = Vec::with_capacity(spec.entities);
    for i in 0..spec.entities {
        let mut tokens: Vec<String> = Vec::new();
        let mut abbrev: Option<(String, String)> = None;
        if rng.random_range(0..100) < 30 {
            // dotted two-letter abbreviation, rendered without dots in questions
            let a = (b'a' + rng.random_range(0..26u8)) as char;
            let b = (b'a' + rng.random_range(0..26u8)) as char;
            abbrev = Some((format!("{a}.{b}."), format!("{a}{b}")));
        }
        for _ in 0..rng.random_range(0..3u8) {
            tokens.push(fillers[rng.random_range(0..fillers.len())].clone());
        }
        tokens.truncate(2);
        tokens.push(anchor(i));
        let (name, noisy) = match abbrev {
            Some((dotted, plain)) => {
                let mut name_tokens = vec![dotted];
                name_tokens.extend(tokens.iter().cloned());
                let mut noisy_tokens = vec![plain];
                noisy_tokens.extend(tokens.iter().cloned());
                (name_tokens.join(" "), Some(noisy_tokens.join(" ")))
            }
            None => (tokens.join(" "), None),
        };
        entities.push(GenEntity {
            id: format!("e{i:04}"),
            name,
            noisy_mention: noisy,
        });
    }

    let predicate_ids: Vec<String> = (0..spec.predicates)
        .map(|p| format!("/syn/rel/{}_{}", keyword(p, 0), keyword(p, 1)))
        .collect();

    // templates: the keyword slots are per-predicate, the scaffolding words
    // are shared and non-discriminative
    let render = |p: usize, t: usize, mention: &str| -> String {
        let shape: &[&str] = match t % 6 {
            0 => &["what", "{k0}", "does", "{e}", "{k1}"],
            1 => &["which", "{k2}", "is", "{e}", "known", "for"],
            2 => &["tell", "me", "the", "{k3}", "of", "{e}"],
            3 => &["name", "the", "{k0}", "that", "{e}", "{k1}"],
            4 => &["what", "is", "the", "{k2}", "{k3}", "of", "{e}"],
            _ => &["find", "the", "{k1}", "for", "{e}"],
        };
        shape
            .iter()
            .map(|w| match *w {
                "{e}" => mention.to_string(),
                "{k0}" => keyword(p, 2),
                "{k1}" => keyword(p, 3),
                "{k2}" => keyword(p, 4),
                "{k3}" => keyword(p, 5),
                other => other.to_string(),
            })
            .collect::<Vec<String>>()
            .join(" ")
    };

    // facts: each entity gets 3..=min(8, predicates) distinct predicates
    let mut triples = String::new();
    let mut facts: Vec<(usize, usize, usize)> = Vec::new();
    for (i, e) in entities.iter().enumerate() {
        let hi = spec.predicates.min(8);
        let lo = 3.min(hi);
        let k = rng.random_range(lo..=hi).max(1);
        let mut preds: Vec<usize> = (0..spec.predicates).collect();
        for s in 0..k.min(preds.len()) {
            let j = rng.random_range(s..preds.len());
            preds.swap(s, j);
        }
        preds.truncate(k);
        for &p in &preds {
            let mut obj = rng.random_range(0..spec.entities);
            if obj == i {
                obj = (obj + 1) % spec.entities;
            }
            writeln!(triples, "{}\t{}\t{}", e.id, predicate_ids[p], entities[obj].id).unwrap();
            facts.push((i, p, obj));
        }
    }

    let mut names = String::new();
    for e in &entities {
        writeln!(names, "{}\t{}", e.id, e.name).unwrap();
    }

    let gen_questions = |count: usize, rng: &mut ChaCha8Rng| -> String {
        let mut out = String::new();
        for _ in 0..count {
            let (s, p, o) = facts[rng.random_range(0..facts.len())];
            let t = rng.random_range(0..spec.templates_per_predicate);
            let e = &entities[s];
            let mention = match (&e.noisy_mention, rng.random_range(0..2u8)) {
                (Some(noisy), 0) => noisy.clone(),
                _ => e.name.clone(),
            };
            let q = render(p, t, &mention);
            writeln!(out, "{}\t{}\t{}\t{}", e.id, predicate_ids[p], entities[o].id, q).unwrap();
        }
        out
    };

    let train = gen_questions(spec.train_questions, &mut rng);
    let dev = gen_questions(spec.dev_questions, &mut rng);
    let test = gen_questions(spec.test_questions, &mut rng);

    SyntheticCorpus {
        triples,
        names,
        train,
        dev,
        test,
    }
}

/// Standard file names used by [`write_corpus`].
pub const TRIPLES_FILE: &str = "kb.triples.tsv";
pub const NAMES_FILE: &str = "kb.names.tsv";
pub const TRAIN_FILE: &str = "questions.train.tsv";
pub const DEV_FILE: &str = "questions.dev.tsv";
pub const TEST_FILE: &str = "questions.test.tsv";

/// Write the corpus files into a directory.
pub fn write_corpus(corpus: &SyntheticCorpus, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (name, data) in [
        (TRIPLES_FILE, &corpus.triples),
        (NAMES_FILE, &corpus.names),
        (TRAIN_FILE, &corpus.train),
        (DEV_FILE, &corpus.dev),
        (TEST_FILE, &corpus.test),
    ] {
        let path = dir.join(name);
        fs::write(&path, data).map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}
