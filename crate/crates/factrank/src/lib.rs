//! factrank: single-relation question answering over a knowledge base of
//! (subject, predicate, object) facts.
//!
//! A question is answered in two stages. An unsupervised entity linker
//! retrieves and ranks subject candidates by surface overlap (longest
//! consecutive common subsequence factors), producing a `(mention, pattern)`
//! pair per candidate. A two-tower neural matcher then ranks all facts of the
//! candidate subjects: a character-level CNN scores entity-name/mention
//! similarity and a word-level CNN with attentive maxpooling scores
//! predicate/pattern similarity. The fact with the best combined score
//! `s_t = m_e + m_r + s_e` answers the question.
//!
//! See the crate examples for runnable walkthroughs of each stage.

pub mod error;
pub mod eval;
pub mod kb;
pub mod linker;
pub mod matchers;
pub mod pipeline;
pub mod synthetic;
pub mod tensor;
pub mod text;
pub mod vocab;

pub use error::{Error, Result};
