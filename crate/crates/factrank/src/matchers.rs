//! The two matching networks: a character-level CNN scoring entity-name /
//! mention similarity (`m_e`) and a word-level CNN scoring predicate /
//! pattern similarity (`m_r`), with a choice of pattern pooling: plain
//! row-wise maxpooling (TMP), attentive maxpooling (AMP), and three one-way
//! attention baselines.
//!
//! Each matcher runs two weight-sharing towers (embedding → wide tanh
//! convolution → pooling); the match score is the cosine of the two tower
//! outputs. The predicate tower pools by row max for TMP/AMP/HABCNN and by
//! row mean for ABCNN/APCNN.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::graph::{Graph, NodeId};
use crate::tensor::matrix::{Matrix, Scalar};
use crate::tensor::ops;
use crate::tensor::param::{init_bound, ParamId, ParamSet};
use crate::text;
use crate::vocab::Vocab;

/// How the pattern feature map is pooled into a vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PoolingMode {
    /// Traditional row-wise maxpooling; ignores the predicate.
    Tmp,
    /// Attentive maxpooling: predicate-guided decay selects coordinates,
    /// whose original feature values form the output.
    Amp,
    /// One-way ABCNN: mean-pooled predicate, cosine attention, attention-
    /// weighted average of the n-gram representations.
    OwaAbcnn,
    /// One-way HABCNN: max-pooled predicate, cosine attention, row max over
    /// the top-k most similar n-gram columns.
    OwaHabcnn { top_k: usize },
    /// One-way APCNN: like ABCNN with a bilinear tanh attention form.
    OwaApcnn,
}

impl PoolingMode {
    pub fn label(&self) -> String {
        match self {
            PoolingMode::Tmp => "tmp".into(),
            PoolingMode::Amp => "amp".into(),
            PoolingMode::OwaAbcnn => "owa-abcnn".into(),
            PoolingMode::OwaHabcnn { top_k } => format!("owa-habcnn:{top_k}"),
            PoolingMode::OwaApcnn => "owa-apcnn".into(),
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        let s = s.trim().to_lowercase();
        if let Some(k) = s.strip_prefix("owa-habcnn:") {
            let top_k: usize = k
                .parse()
                .map_err(|_| Error::Config(format!("bad top-k in pooling mode {s:?}")))?;
            if top_k == 0 {
                return Err(Error::Config("owa-habcnn top-k must be at least 1".into()));
            }
            return Ok(PoolingMode::OwaHabcnn { top_k });
        }
        match s.as_str() {
            "tmp" => Ok(PoolingMode::Tmp),
            "amp" => Ok(PoolingMode::Amp),
            "owa-abcnn" => Ok(PoolingMode::OwaAbcnn),
            "owa-habcnn" => Ok(PoolingMode::OwaHabcnn { top_k: 3 }),
            "owa-apcnn" => Ok(PoolingMode::OwaApcnn),
            _ => Err(Error::Config(format!("unknown pooling mode {s:?}"))),
        }
    }

    fn predicate_pools_by_mean(&self) -> bool {
        matches!(self, PoolingMode::OwaAbcnn | PoolingMode::OwaApcnn)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct MatcherConfig {
    pub d_word: usize,
    pub d_char: usize,
    pub char_width: usize,
    pub word_width: usize,
    pub mode: PoolingMode,
}

impl Default for MatcherConfig {
    fn default() -> Self {
        MatcherConfig {
            d_word: 500,
            d_char: 100,
            char_width: 3,
            word_width: 3,
            mode: PoolingMode::Amp,
        }
    }
}

/// Parameter handles for both matchers. Within each matcher the two towers
/// share one convolution weight set; there is no sharing across the char and
/// word granularities.
#[derive(Debug, Clone)]
pub struct MatcherParams {
    pub char_embed: ParamId,
    pub char_w: ParamId,
    pub char_b: ParamId,
    pub word_embed: ParamId,
    pub word_w: ParamId,
    pub word_b: ParamId,
    /// Bilinear attention form; present only for APCNN, the one mode with
    /// extra parameters.
    pub bilinear: Option<ParamId>,
    pub cfg: MatcherConfig,
}

pub const PARAM_CHAR_EMBED: &str = "char_embed";
pub const PARAM_CHAR_W: &str = "char_conv_w";
pub const PARAM_CHAR_B: &str = "char_conv_b";
pub const PARAM_WORD_EMBED: &str = "word_embed";
pub const PARAM_WORD_W: &str = "word_conv_w";
pub const PARAM_WORD_B: &str = "word_conv_b";
pub const PARAM_BILINEAR: &str = "bilinear_u";

const EMBED_INIT_BOUND: f64 = 0.01;

impl MatcherParams {
    /// Allocate and randomly initialize all parameters: embeddings uniform
    /// in ±0.01, convolution weights uniform in ±sqrt(1/fan_in), biases
    /// zero. Convolution weights carry the diversity-penalty flag.
    pub fn init<T: Scalar>(
        params: &mut ParamSet<T>,
        cfg: MatcherConfig,
        char_vocab_len: usize,
        word_vocab_len: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let mut ce = Matrix::zeros(cfg.d_char, char_vocab_len);
        ce.fill_uniform(rng, EMBED_INIT_BOUND);
        let char_embed = params.add(PARAM_CHAR_EMBED, ce, false);
        let mut cw = Matrix::zeros(cfg.d_char, cfg.char_width * cfg.d_char);
        cw.fill_uniform(rng, init_bound(cfg.char_width * cfg.d_char));
        let char_w = params.add(PARAM_CHAR_W, cw, true);
        let char_b = params.add(PARAM_CHAR_B, Matrix::zeros(cfg.d_char, 1), false);
        let mut we = Matrix::zeros(cfg.d_word, word_vocab_len);
        we.fill_uniform(rng, EMBED_INIT_BOUND);
        let word_embed = params.add(PARAM_WORD_EMBED, we, false);
        let mut ww = Matrix::zeros(cfg.d_word, cfg.word_width * cfg.d_word);
        ww.fill_uniform(rng, init_bound(cfg.word_width * cfg.d_word));
        let word_w = params.add(PARAM_WORD_W, ww, true);
        let word_b = params.add(PARAM_WORD_B, Matrix::zeros(cfg.d_word, 1), false);
        let bilinear = if matches!(cfg.mode, PoolingMode::OwaApcnn) {
            let mut u = Matrix::zeros(cfg.d_word, cfg.d_word);
            u.fill_uniform(rng, init_bound(cfg.d_word));
            Some(params.add(PARAM_BILINEAR, u, false))
        } else {
            None
        };
        MatcherParams {
            char_embed,
            char_w,
            char_b,
            word_embed,
            word_w,
            word_b,
            bilinear,
            cfg,
        }
    }

    /// Re-attach handles to a loaded parameter set by name.
    pub fn from_loaded<T: Scalar>(params: &ParamSet<T>, cfg: MatcherConfig) -> Result<Self> {
        let find = |name: &str| {
            params
                .by_name(name)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter {name:?}")))
        };
        let bilinear = if matches!(cfg.mode, PoolingMode::OwaApcnn) {
            Some(find(PARAM_BILINEAR)?)
        } else {
            params.by_name(PARAM_BILINEAR)
        };
        Ok(MatcherParams {
            char_embed: find(PARAM_CHAR_EMBED)?,
            char_w: find(PARAM_CHAR_W)?,
            char_b: find(PARAM_CHAR_B)?,
            word_embed: find(PARAM_WORD_EMBED)?,
            word_w: find(PARAM_WORD_W)?,
            word_b: find(PARAM_WORD_B)?,
            bilinear,
            cfg,
        })
    }
}

/// Map pattern tokens through the word vocabulary, insisting on exactly one
/// entity slot.
pub fn pattern_ids<S: AsRef<str>>(tokens: &[S], vocab: &Vocab) -> Result<Vec<usize>> {
    let slots = tokens
        .iter()
        .filter(|t| t.as_ref() == text::ENTITY_SLOT)
        .count();
    if slots != 1 {
        return Err(Error::InvalidInput(format!(
            "pattern must contain exactly one {:?} token, found {slots}",
            text::ENTITY_SLOT
        )));
    }
    Ok(vocab.word_ids(tokens))
}

// ---------------------------------------------------------------------------
// Graph builders (training path)
// ---------------------------------------------------------------------------

/// Character tower: embed → conv → row max. Errors on an empty sequence.
pub fn char_tower_graph<T: Scalar>(
    g: &mut Graph<T>,
    params: &ParamSet<T>,
    mp: &MatcherParams,
    char_ids: &[usize],
) -> Result<NodeId> {
    if char_ids.is_empty() {
        return Err(Error::InvalidInput("char tower input is empty".into()));
    }
    let e = g.embed(params, mp.char_embed, char_ids);
    let f = g.conv_tanh(params, mp.char_w, mp.char_b, e, mp.cfg.char_width);
    Ok(g.max_rows(f))
}

/// Entity/mention match score `m_e` as a graph node.
pub fn char_match_graph<T: Scalar>(
    g: &mut Graph<T>,
    params: &ParamSet<T>,
    mp: &MatcherParams,
    entity_ids: &[usize],
    mention_ids: &[usize],
) -> Result<NodeId> {
    let e = char_tower_graph(g, params, mp, entity_ids)?;
    let m = char_tower_graph(g, params, mp, mention_ids)?;
    Ok(g.cosine(e, m))
}

/// Predicate/pattern match score `m_r` as a graph node, under the matcher's
/// pooling mode.
pub fn word_match_graph<T: Scalar>(
    g: &mut Graph<T>,
    params: &ParamSet<T>,
    mp: &MatcherParams,
    predicate_ids: &[usize],
    pattern_ids: &[usize],
) -> Result<NodeId> {
    if predicate_ids.is_empty() || pattern_ids.is_empty() {
        return Err(Error::InvalidInput("word tower input is empty".into()));
    }
    let pe = g.embed(params, mp.word_embed, predicate_ids);
    let pf = g.conv_tanh(params, mp.word_w, mp.word_b, pe, mp.cfg.word_width);
    let vp = if mp.cfg.mode.predicate_pools_by_mean() {
        g.mean_rows(pf)
    } else {
        g.max_rows(pf)
    };
    let qe = g.embed(params, mp.word_embed, pattern_ids);
    let fmap = g.conv_tanh(params, mp.word_w, mp.word_b, qe, mp.cfg.word_width);
    let pattern_vec = match mp.cfg.mode {
        PoolingMode::Tmp => g.max_rows(fmap),
        PoolingMode::Amp => g.attentive_maxpool(fmap, vp),
        PoolingMode::OwaAbcnn => {
            let w = g.col_cosines(fmap, vp);
            g.weighted_mean_cols(fmap, w)
        }
        PoolingMode::OwaHabcnn { top_k } => {
            let w = g.col_cosines(fmap, vp);
            g.topk_max_rows(fmap, w, top_k)
        }
        PoolingMode::OwaApcnn => {
            let u = mp
                .bilinear
                .expect("APCNN mode requires the bilinear parameter");
            let w = g.bilinear_tanh_scores(params, vp, u, fmap);
            g.weighted_mean_cols(fmap, w)
        }
    };
    Ok(g.cosine(vp, pattern_vec))
}

// ---------------------------------------------------------------------------
// Pure forward path (inference over frozen parameters)
// ---------------------------------------------------------------------------

/// Pooled character tower output.
pub fn char_tower_pooled<T: Scalar>(params: &ParamSet<T>, mp: &MatcherParams, char_ids: &[usize]) -> Result<Vec<T>> {
    if char_ids.is_empty() {
        return Err(Error::InvalidInput("char tower input is empty".into()));
    }
    let e = ops::embed(params.value(mp.char_embed), char_ids);
    let f = ops::conv_tanh(
        params.value(mp.char_w),
        params.value(mp.char_b),
        &e,
        mp.cfg.char_width,
    );
    Ok(ops::max_rows(&f).0)
}

/// Pattern (or predicate) feature map from word ids.
pub fn word_feature_map<T: Scalar>(params: &ParamSet<T>, mp: &MatcherParams, word_ids: &[usize]) -> Result<Matrix<T>> {
    if word_ids.is_empty() {
        return Err(Error::InvalidInput("word tower input is empty".into()));
    }
    let e = ops::embed(params.value(mp.word_embed), word_ids);
    Ok(ops::conv_tanh(
        params.value(mp.word_w),
        params.value(mp.word_b),
        &e,
        mp.cfg.word_width,
    ))
}

/// Predicate vector under the matcher's pooling mode (row max or row mean).
pub fn predicate_vector<T: Scalar>(params: &ParamSet<T>, mp: &MatcherParams, predicate_ids: &[usize]) -> Result<Vec<T>> {
    let f = word_feature_map(params, mp, predicate_ids)?;
    Ok(if mp.cfg.mode.predicate_pools_by_mean() {
        ops::mean_rows(&f)
    } else {
        ops::max_rows(&f).0
    })
}

/// Per-column attention weights of the one-way baselines; HABCNN also
/// reports the selected top-k column set. `k` larger than the column count
/// selects every column.
pub fn owa_attention_weights<T: Scalar>(
    params: &ParamSet<T>,
    mp: &MatcherParams,
    fmap: &Matrix<T>,
    v_p: &[T],
    mode: PoolingMode,
) -> Result<(Vec<T>, Option<Vec<usize>>)> {
    match mode {
        PoolingMode::OwaAbcnn => Ok((ops::col_cosines(fmap, v_p), None)),
        PoolingMode::OwaHabcnn { top_k } => {
            let w = ops::col_cosines(fmap, v_p);
            let cols = ops::top_k_columns(&w, top_k);
            Ok((w, Some(cols)))
        }
        PoolingMode::OwaApcnn => {
            let u = mp
                .bilinear
                .ok_or_else(|| Error::Config("APCNN mode requires the bilinear parameter".into()))?;
            Ok((ops::bilinear_tanh_scores(v_p, params.value(u), fmap), None))
        }
        _ => Err(Error::Config(format!(
            "attention weights are defined for the OWA baselines, not {:?}",
            mode.label()
        ))),
    }
}

/// Pattern vector from a precomputed feature map under the given mode.
pub fn pattern_vector<T: Scalar>(
    params: &ParamSet<T>,
    mp: &MatcherParams,
    fmap: &Matrix<T>,
    v_p: &[T],
) -> Result<Vec<T>> {
    Ok(match mp.cfg.mode {
        PoolingMode::Tmp => ops::max_rows(fmap).0,
        PoolingMode::Amp => ops::attentive_maxpool(fmap, v_p).0,
        PoolingMode::OwaAbcnn => {
            let w = ops::col_cosines(fmap, v_p);
            ops::weighted_mean_cols(fmap, &w).0
        }
        PoolingMode::OwaHabcnn { top_k } => {
            let w = ops::col_cosines(fmap, v_p);
            let cols = ops::top_k_columns(&w, top_k);
            ops::max_rows_over(fmap, &cols).0
        }
        PoolingMode::OwaApcnn => {
            let u = mp
                .bilinear
                .ok_or_else(|| Error::Config("APCNN mode requires the bilinear parameter".into()))?;
            let w = ops::bilinear_tanh_scores(v_p, params.value(u), fmap);
            ops::weighted_mean_cols(fmap, &w).0
        }
    })
}

/// Entity/mention match over lowercased strings (inference convenience).
pub fn char_match<T: Scalar>(
    params: &ParamSet<T>,
    mp: &MatcherParams,
    char_vocab: &Vocab,
    entity_name: &str,
    mention: &str,
) -> Result<T> {
    if entity_name.is_empty() || mention.is_empty() {
        return Err(Error::InvalidInput(
            "char match requires nonempty entity and mention strings".into(),
        ));
    }
    let e = char_tower_pooled(params, mp, &char_vocab.char_ids(entity_name))?;
    let m = char_tower_pooled(params, mp, &char_vocab.char_ids(mention))?;
    Ok(ops::cosine(&e, &m))
}

/// Predicate/pattern match over token sequences (inference convenience).
pub fn word_match<T: Scalar, S: AsRef<str>>(
    params: &ParamSet<T>,
    mp: &MatcherParams,
    word_vocab: &Vocab,
    predicate_tokens: &[S],
    pattern_tokens: &[S],
) -> Result<T> {
    if predicate_tokens.is_empty() {
        return Err(Error::InvalidInput("predicate has no tokens".into()));
    }
    let pred = word_vocab.word_ids(predicate_tokens);
    let pat = pattern_ids(pattern_tokens, word_vocab)?;
    let vp = predicate_vector(params, mp, &pred)?;
    let f = word_feature_map(params, mp, &pat)?;
    let pv = pattern_vector(params, mp, &f, &vp)?;
    Ok(ops::cosine(&vp, &pv))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_setup(mode: PoolingMode, seed: u64) -> (ParamSet<f64>, MatcherParams, Vocab, Vocab) {
        let cfg = MatcherConfig {
            d_word: 6,
            d_char: 4,
            char_width: 3,
            word_width: 2,
            mode,
        };
        let char_vocab = Vocab::build("abcdefghijklmnopqrstuvwxyz .0123456789".chars().map(String::from));
        let word_vocab = Vocab::build(
            ["<e>", "what", "major", "cities", "does", "run", "through", "location", "city", "born"]
                .iter()
                .copied(),
        );
        let mut params = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mp = MatcherParams::init(&mut params, cfg, char_vocab.len(), word_vocab.len(), &mut rng);
        (params, mp, char_vocab, word_vocab)
    }

    #[test]
    fn identical_strings_match_near_one() {
        let (params, mp, cv, _) = small_setup(PoolingMode::Amp, 1);
        let m_e: f64 = char_match(&params, &mp, &cv, "u.s. route 2", "u.s. route 2").unwrap();
        assert!(m_e > 0.999, "m_e = {m_e}");
    }

    #[test]
    fn char_match_is_symmetric_and_deterministic() {
        let (params, mp, cv, _) = small_setup(PoolingMode::Amp, 2);
        let ab: f64 = char_match(&params, &mp, &cv, "u.s. route 2", "us route 2").unwrap();
        let ba: f64 = char_match(&params, &mp, &cv, "us route 2", "u.s. route 2").unwrap();
        assert_eq!(ab, ba);
        let (params2, mp2, cv2, _) = small_setup(PoolingMode::Amp, 2);
        let again: f64 = char_match(&params2, &mp2, &cv2, "u.s. route 2", "us route 2").unwrap();
        assert_eq!(ab, again);
    }

    #[test]
    fn char_match_rejects_empty_strings() {
        let (params, mp, cv, _) = small_setup(PoolingMode::Amp, 3);
        assert!(char_match::<f64>(&params, &mp, &cv, "", "x").is_err());
        assert!(char_match::<f64>(&params, &mp, &cv, "x", "").is_err());
    }

    #[test]
    fn pattern_requires_entity_slot() {
        let (_, _, _, wv) = small_setup(PoolingMode::Amp, 4);
        let ok = ["what", "<e>", "born"].map(String::from);
        assert!(pattern_ids(&ok, &wv).is_ok());
        let missing = ["what", "born"].map(String::from);
        assert!(pattern_ids(&missing, &wv).is_err());
        let doubled = ["<e>", "<e>"].map(String::from);
        assert!(pattern_ids(&doubled, &wv).is_err());
    }

    #[test]
    fn tmp_pattern_vector_is_predicate_independent() {
        let (params, mp, _, wv) = small_setup(PoolingMode::Tmp, 5);
        let pat = pattern_ids(&["what", "<e>", "born"].map(String::from), &wv).unwrap();
        let f = word_feature_map(&params, &mp, &pat).unwrap();
        let vp1 = predicate_vector(&params, &mp, &wv.word_ids(&["location", "city"])).unwrap();
        let vp2 = predicate_vector(&params, &mp, &wv.word_ids(&["born"])).unwrap();
        let p1 = pattern_vector(&params, &mp, &f, &vp1).unwrap();
        let p2 = pattern_vector(&params, &mp, &f, &vp2).unwrap();
        assert_eq!(p1, p2);
    }

    #[test]
    fn amp_dominated_by_tmp_componentwise() {
        let (params, mp, _, wv) = small_setup(PoolingMode::Amp, 6);
        let pat = pattern_ids(
            &["what", "major", "cities", "does", "<e>", "run", "through"].map(String::from),
            &wv,
        )
        .unwrap();
        let f = word_feature_map(&params, &mp, &pat).unwrap();
        let vp = predicate_vector(&params, &mp, &wv.word_ids(&["location", "major", "cities"])).unwrap();
        let amp = pattern_vector(&params, &mp, &f, &vp).unwrap();
        let (tmp, _) = ops::max_rows(&f);
        for (a, t) in amp.iter().zip(&tmp) {
            assert!(a <= t);
            // membership: the AMP component is some entry of its row
        }
        for (r, a) in amp.iter().enumerate() {
            assert!(f.row(r).iter().any(|v| v == a));
        }
    }

    #[test]
    fn habcnn_with_full_k_equals_tmp() {
        let (params, mut mp, _, wv) = small_setup(PoolingMode::OwaHabcnn { top_k: 3 }, 7);
        let pat = pattern_ids(&["what", "<e>", "born"].map(String::from), &wv).unwrap();
        let f = word_feature_map(&params, &mp, &pat).unwrap();
        let vp = predicate_vector(&params, &mp, &wv.word_ids(&["born"])).unwrap();
        mp.cfg.mode = PoolingMode::OwaHabcnn { top_k: f.cols() };
        let pooled = pattern_vector(&params, &mp, &f, &vp).unwrap();
        let (tmp, _) = ops::max_rows(&f);
        assert_eq!(pooled, tmp);
        // k beyond the column count behaves like k = m
        mp.cfg.mode = PoolingMode::OwaHabcnn { top_k: f.cols() + 10 };
        assert_eq!(pattern_vector(&params, &mp, &f, &vp).unwrap(), tmp);
    }

    #[test]
    fn abcnn_weights_are_cosines_and_apcnn_adds_parameters() {
        let (params, mp, _, wv) = small_setup(PoolingMode::OwaAbcnn, 8);
        assert!(mp.bilinear.is_none());
        let pat = pattern_ids(&["what", "<e>", "born"].map(String::from), &wv).unwrap();
        let f = word_feature_map(&params, &mp, &pat).unwrap();
        let vp = predicate_vector(&params, &mp, &wv.word_ids(&["born"])).unwrap();
        let (w, cols) = owa_attention_weights(&params, &mp, &f, &vp, PoolingMode::OwaAbcnn).unwrap();
        assert!(cols.is_none());
        assert_eq!(w, ops::col_cosines(&f, &vp));

        let (params, mp, _, _) = small_setup(PoolingMode::OwaApcnn, 8);
        assert!(mp.bilinear.is_some());
        let (w2, _) = owa_attention_weights(&params, &mp, &f, &vp, PoolingMode::OwaApcnn).unwrap();
        assert!(w2.iter().all(|v| v.abs() < 1.0)); // tanh range
    }

    #[test]
    fn word_match_graph_agrees_with_pure_forward() {
        for mode in [
            PoolingMode::Tmp,
            PoolingMode::Amp,
            PoolingMode::OwaAbcnn,
            PoolingMode::OwaHabcnn { top_k: 2 },
            PoolingMode::OwaApcnn,
        ] {
            let (params, mp, _, wv) = small_setup(mode, 9);
            let pred = wv.word_ids(&["location", "city"]);
            let pat = pattern_ids(&["what", "<e>", "born"].map(String::from), &wv).unwrap();
            let mut g = Graph::new();
            let node = word_match_graph(&mut g, &params, &mp, &pred, &pat).unwrap();
            let via_graph = g.scalar(node);
            let via_pure: f64 =
                word_match(&params, &mp, &wv, &["location", "city"], &["what", "<e>", "born"]).unwrap();
            assert_eq!(via_graph, via_pure, "mode {:?}", mode.label());
        }
    }

    #[test]
    fn mode_labels_roundtrip() {
        for mode in [
            PoolingMode::Tmp,
            PoolingMode::Amp,
            PoolingMode::OwaAbcnn,
            PoolingMode::OwaHabcnn { top_k: 5 },
            PoolingMode::OwaApcnn,
        ] {
            assert_eq!(PoolingMode::parse(&mode.label()).unwrap(), mode);
        }
        assert!(PoolingMode::parse("bogus").is_err());
    }
}
