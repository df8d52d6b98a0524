//! Text featurization: tokenization, vocabulary, TF-IDF, word-embedding
//! loading, sentence-embedding sequences, and zero-padded token matrices.

use std::collections::{HashMap, HashSet};
use std::io::BufRead;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::{Real, Tensor};

#[derive(Debug, Error)]
pub enum TextError {
    #[error("empty corpus")]
    EmptyCorpus,
    #[error("line {line}: embedding width {got} does not match {expected}")]
    WidthMismatch { line: usize, got: usize, expected: usize },
    #[error("line {line}: malformed embedding entry")]
    Malformed { line: usize },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Fixed English stop-word list shipped with the artifact.
pub const STOP_WORDS: &[&str] = &[
    "a", "about", "above", "after", "again", "against", "all", "am", "an", "and", "any", "are",
    "as", "at", "be", "because", "been", "before", "being", "below", "between", "both", "but",
    "by", "can", "could", "did", "do", "does", "doing", "down", "during", "each", "few", "for",
    "from", "further", "had", "has", "have", "having", "he", "her", "here", "hers", "herself",
    "him", "himself", "his", "how", "i", "if", "in", "into", "is", "it", "its", "itself", "just",
    "me", "more", "most", "my", "myself", "no", "nor", "not", "now", "of", "off", "on", "once",
    "only", "or", "other", "our", "ours", "ourselves", "out", "over", "own", "same", "she",
    "should", "so", "some", "such", "than", "that", "the", "their", "theirs", "them",
    "themselves", "then", "there", "these", "they", "this", "those", "through", "to", "too",
    "under", "until", "up", "very", "was", "we", "were", "what", "when", "where", "which",
    "while", "who", "whom", "why", "will", "with", "you", "your", "yours", "yourself",
    "yourselves",
];

fn stop_set() -> &'static HashSet<&'static str> {
    use std::sync::OnceLock;
    static SET: OnceLock<HashSet<&'static str>> = OnceLock::new();
    SET.get_or_init(|| STOP_WORDS.iter().copied().collect())
}

/// Lowercased maximal alphanumeric runs, stop words removed.
pub fn tokenize(text: &str) -> Vec<String> {
    let stops = stop_set();
    let mut tokens = Vec::new();
    let mut current = String::new();
    for ch in text.chars() {
        if ch.is_alphanumeric() {
            current.extend(ch.to_lowercase());
        } else if !current.is_empty() {
            if !stops.contains(current.as_str()) {
                tokens.push(std::mem::take(&mut current));
            } else {
                current.clear();
            }
        }
    }
    if !current.is_empty() && !stops.contains(current.as_str()) {
        tokens.push(current);
    }
    tokens
}

/// Sentences split on `.` `!` `?` and newlines, each tokenized; empty
/// sentences are dropped.
pub fn split_sentences(text: &str) -> Vec<Vec<String>> {
    text.split(['.', '!', '?', '\n'])
        .map(tokenize)
        .filter(|s| !s.is_empty())
        .collect()
}

/// Token list capped at the most frequent words, with document frequencies
/// and corpus unigram probabilities.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Vocabulary {
    tokens: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, usize>,
    doc_freq: Vec<usize>,
    unigram_p: Vec<Real>,
    n_docs: usize,
}

impl Vocabulary {
    pub fn size(&self) -> usize {
        self.tokens.len()
    }

    pub fn n_docs(&self) -> usize {
        self.n_docs
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn index_of(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn doc_freq(&self, idx: usize) -> usize {
        self.doc_freq[idx]
    }

    /// Corpus unigram probability; 0 for out-of-vocabulary tokens.
    pub fn unigram_p(&self, token: &str) -> Real {
        self.index_of(token).map(|i| self.unigram_p[i]).unwrap_or(0.0)
    }

    /// Rebuild the token index after deserialization.
    pub fn rebuild_index(&mut self) {
        self.index = self
            .tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
    }
}

/// Rank tokens by total corpus frequency (ties lexicographically) and keep
/// the top `cap`.
pub fn fit_vocabulary(corpus: &[Vec<String>], cap: usize) -> Result<Vocabulary, TextError> {
    if corpus.is_empty() {
        return Err(TextError::EmptyCorpus);
    }
    let mut freq: HashMap<&str, usize> = HashMap::new();
    let mut doc_freq: HashMap<&str, usize> = HashMap::new();
    for doc in corpus {
        let mut seen: HashSet<&str> = HashSet::new();
        for token in doc {
            *freq.entry(token).or_insert(0) += 1;
            if seen.insert(token) {
                *doc_freq.entry(token).or_insert(0) += 1;
            }
        }
    }
    let mut ranked: Vec<(&str, usize)> = freq.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
    ranked.truncate(cap);
    let total: usize = ranked.iter().map(|(_, c)| c).sum();
    let tokens: Vec<String> = ranked.iter().map(|(t, _)| t.to_string()).collect();
    let unigram_p = ranked.iter().map(|&(_, c)| c as Real / total as Real).collect();
    let doc_freq = ranked.iter().map(|&(t, _)| doc_freq[t]).collect();
    let mut vocab = Vocabulary {
        tokens,
        index: HashMap::new(),
        doc_freq,
        unigram_p,
        n_docs: corpus.len(),
    };
    vocab.rebuild_index();
    Ok(vocab)
}

/// TF-IDF model: vocabulary plus an aligned idf vector,
/// `idf_t = ln((1+N)/(1+df_t)) + 1`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TfIdfModel {
    pub vocabulary: Vocabulary,
    pub idf: Vec<Real>,
}

pub fn tfidf_fit(corpus: &[Vec<String>], cap: usize) -> Result<TfIdfModel, TextError> {
    let vocabulary = fit_vocabulary(corpus, cap)?;
    let n = vocabulary.n_docs() as Real;
    let idf = (0..vocabulary.size())
        .map(|i| ((1.0 + n) / (1.0 + vocabulary.doc_freq(i) as Real)).ln() + 1.0)
        .collect();
    Ok(TfIdfModel { vocabulary, idf })
}

/// Raw-count tf times idf, L2-normalized; an all-zero vector stays zero.
pub fn tfidf_transform(model: &TfIdfModel, document: &[String]) -> Tensor {
    let mut v = vec![0.0; model.vocabulary.size()];
    for token in document {
        if let Some(i) = model.vocabulary.index_of(token) {
            v[i] += 1.0;
        }
    }
    for (x, idf) in v.iter_mut().zip(&model.idf) {
        *x *= idf;
    }
    let norm: Real = v.iter().map(|x| x * x).sum::<Real>().sqrt();
    if norm > 0.0 {
        for x in v.iter_mut() {
            *x /= norm;
        }
    }
    Tensor::vector(v)
}

impl TfIdfModel {
    pub fn save_json<W: std::io::Write>(&self, w: W) -> Result<(), std::io::Error> {
        serde_json::to_writer(w, self).map_err(std::io::Error::other)
    }

    pub fn load_json<R: std::io::Read>(r: R) -> Result<Self, std::io::Error> {
        let mut model: TfIdfModel = serde_json::from_reader(r).map_err(std::io::Error::other)?;
        model.vocabulary.rebuild_index();
        Ok(model)
    }
}

/// Token to fixed-width vector table; out-of-vocabulary lookups are explicit
/// misses, never silent zeros.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EmbeddingTable {
    width: usize,
    map: HashMap<String, Vec<Real>>,
}

impl EmbeddingTable {
    pub fn from_entries(entries: Vec<(String, Vec<Real>)>) -> Result<Self, TextError> {
        let width = entries.first().map(|(_, v)| v.len()).unwrap_or(0);
        let mut map = HashMap::with_capacity(entries.len());
        for (line, (token, vec)) in entries.into_iter().enumerate() {
            if vec.len() != width {
                return Err(TextError::WidthMismatch {
                    line: line + 1,
                    got: vec.len(),
                    expected: width,
                });
            }
            map.insert(token, vec);
        }
        Ok(Self { width, map })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn get(&self, token: &str) -> Option<&[Real]> {
        self.map.get(token).map(|v| v.as_slice())
    }
}

/// Load a whitespace-separated `token v1 ... vE` embedding file. Duplicate
/// tokens keep the last occurrence (a warning goes to stderr).
pub fn load_embedding_table_from<R: BufRead>(reader: R) -> Result<EmbeddingTable, TextError> {
    let mut width: Option<usize> = None;
    let mut map: HashMap<String, Vec<Real>> = HashMap::new();
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let mut parts = line.split_whitespace();
        let token = parts.next().ok_or(TextError::Malformed { line: line_no })?.to_string();
        let values: Vec<Real> = parts
            .map(|p| p.parse::<Real>().map_err(|_| TextError::Malformed { line: line_no }))
            .collect::<Result<_, _>>()?;
        if values.is_empty() {
            return Err(TextError::Malformed { line: line_no });
        }
        match width {
            None => width = Some(values.len()),
            Some(w) if w != values.len() => {
                return Err(TextError::WidthMismatch { line: line_no, got: values.len(), expected: w })
            }
            _ => {}
        }
        if map.insert(token.clone(), values).is_some() {
            eprintln!("warning: duplicate embedding for {token:?} at line {line_no}; last occurrence wins");
        }
    }
    Ok(EmbeddingTable { width: width.unwrap_or(0), map })
}

pub fn load_embedding_table(path: &Path) -> Result<EmbeddingTable, TextError> {
    let f = std::fs::File::open(path)?;
    load_embedding_table_from(std::io::BufReader::new(f))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SentenceMode {
    Unweighted,
    /// Unigram-probability weighting `a / (a + p(w))` with `a = 1e-3`.
    Weighted,
}

const SIF_A: Real = 1e-3;

/// One row per sentence with at least one in-table word, in document order.
/// Tokens absent from the table are skipped; sentences with none are dropped.
pub fn embed_sentences(
    sentences: &[Vec<String>],
    table: &EmbeddingTable,
    mode: SentenceMode,
    unigram: Option<&Vocabulary>,
) -> Tensor {
    let e = table.width();
    let mut rows: Vec<Real> = Vec::new();
    let mut n_rows = 0;
    for sentence in sentences {
        let mut acc = vec![0.0; e];
        let mut count = 0usize;
        for token in sentence {
            let Some(vec) = table.get(token) else { continue };
            let weight = match mode {
                SentenceMode::Unweighted => 1.0,
                SentenceMode::Weighted => {
                    let p = unigram.map(|v| v.unigram_p(token)).unwrap_or(0.0);
                    SIF_A / (SIF_A + p)
                }
            };
            for (a, &x) in acc.iter_mut().zip(vec) {
                *a += weight * x;
            }
            count += 1;
        }
        if count == 0 {
            continue;
        }
        for a in acc.iter_mut() {
            *a /= count as Real;
        }
        rows.extend(acc);
        n_rows += 1;
    }
    Tensor::new(vec![n_rows, e], rows).unwrap()
}

/// `l_max x E` matrix of in-table word vectors in document order, zero-padded;
/// longer documents are truncated with a warning to stderr.
pub fn tokens_to_matrix(document: &[String], table: &EmbeddingTable, l_max: usize) -> Tensor {
    let e = table.width();
    let mut data = vec![0.0; l_max * e];
    let mut row = 0usize;
    for token in document {
        let Some(vec) = table.get(token) else { continue };
        if row == l_max {
            eprintln!("warning: document truncated to {l_max} embedded tokens");
            break;
        }
        data[row * e..(row + 1) * e].copy_from_slice(vec);
        row += 1;
    }
    Tensor::new(vec![l_max, e], data).unwrap()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn docs(texts: &[&str]) -> Vec<Vec<String>> {
        texts.iter().map(|t| tokenize(t)).collect()
    }

    #[test]
    fn tokenize_rules() {
        assert_eq!(tokenize("HR 120"), vec!["hr", "120"]);
        assert_eq!(tokenize(""), Vec::<String>::new());
        assert_eq!(tokenize("No fever"), vec!["fever"]);
    }

    #[test]
    fn sentence_split_drops_stop_words() {
        let s = split_sentences("Chest pain. No fever!");
        assert_eq!(s, vec![vec!["chest", "pain"], vec!["fever"]]);
    }

    #[test]
    fn vocabulary_cap_keeps_most_frequent() {
        let corpus = docs(&["apple apple banana", "apple cherry"]);
        let v = fit_vocabulary(&corpus, 2).unwrap();
        assert_eq!(v.tokens(), &["apple", "banana"]); // banana beats cherry lexicographically
    }

    #[test]
    fn frequency_tie_breaks_lexicographically() {
        let corpus = docs(&["zebra apple"]);
        let v = fit_vocabulary(&corpus, 1).unwrap();
        assert_eq!(v.tokens(), &["apple"]);
    }

    #[test]
    fn unigram_probabilities_sum_to_one() {
        let corpus = docs(&["apple apple banana cherry", "banana date"]);
        let v = fit_vocabulary(&corpus, 3).unwrap();
        let total: Real = v.tokens().iter().map(|t| v.unigram_p(t)).sum();
        assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn empty_corpus_rejected() {
        assert!(matches!(fit_vocabulary(&[], 10), Err(TextError::EmptyCorpus)));
    }

    #[test]
    fn idf_is_one_for_ubiquitous_terms() {
        let corpus = docs(&["apple pie", "apple tart", "apple cake"]);
        let m = tfidf_fit(&corpus, 10).unwrap();
        let i = m.vocabulary.index_of("apple").unwrap();
        assert!((m.idf[i] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn two_doc_corpus_closed_form() {
        // corpus {"a b", "b c"} with single-letter tokens not stop-listed:
        // use x/y/z stand-ins since "a" is a stop word
        let corpus = docs(&["xx yy", "yy zz"]);
        let m = tfidf_fit(&corpus, 10).unwrap();
        let idf_shared = 1.0; // df = N
        let idf_rare = (3.0 / 2.0f64).ln() + 1.0;
        let v = tfidf_transform(&m, &tokenize("xx yy"));
        let ix = m.vocabulary.index_of("xx").unwrap();
        let iy = m.vocabulary.index_of("yy").unwrap();
        let iz = m.vocabulary.index_of("zz").unwrap();
        let norm = (idf_rare * idf_rare + idf_shared * idf_shared).sqrt();
        assert!((v.data()[ix] - idf_rare / norm).abs() < 1e-12);
        assert!((v.data()[iy] - idf_shared / norm).abs() < 1e-12);
        assert_eq!(v.data()[iz], 0.0);
    }

    #[test]
    fn empty_document_is_zero_vector() {
        let m = tfidf_fit(&docs(&["xx yy"]), 10).unwrap();
        let v = tfidf_transform(&m, &[]);
        assert!(v.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn transform_is_unit_norm_or_zero() {
        let m = tfidf_fit(&docs(&["xx yy zz", "yy zz qq"]), 10).unwrap();
        let v = tfidf_transform(&m, &tokenize("xx zz zz"));
        let norm: Real = v.data().iter().map(|x| x * x).sum::<Real>().sqrt();
        assert!((norm - 1.0).abs() < 1e-12);
    }

    #[test]
    fn doubled_document_transforms_identically() {
        let m = tfidf_fit(&docs(&["xx yy zz", "yy zz qq"]), 10).unwrap();
        let doc = tokenize("xx zz zz yy");
        let doubled: Vec<String> = doc.iter().chain(doc.iter()).cloned().collect();
        let a = tfidf_transform(&m, &doc);
        let b = tfidf_transform(&m, &doubled);
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn tfidf_model_json_round_trip() {
        let m = tfidf_fit(&docs(&["xx yy zz", "yy zz qq"]), 10).unwrap();
        let mut buf = Vec::new();
        m.save_json(&mut buf).unwrap();
        let back = TfIdfModel::load_json(&buf[..]).unwrap();
        assert_eq!(m.idf, back.idf);
        assert_eq!(m.vocabulary.tokens(), back.vocabulary.tokens());
        assert_eq!(back.vocabulary.index_of("yy"), m.vocabulary.index_of("yy"));
    }

    fn fixture_table() -> EmbeddingTable {
        load_embedding_table_from(
            "alpha 1.0 0.0 0.0 2.0\nbeta 0.0 1.0 0.0 -1.0\n".as_bytes(),
        )
        .unwrap()
    }

    #[test]
    fn embedding_fixture_loads() {
        let t = fixture_table();
        assert_eq!(t.len(), 2);
        assert_eq!(t.width(), 4);
        assert_eq!(t.get("alpha"), Some(&[1.0, 0.0, 0.0, 2.0][..]));
    }

    #[test]
    fn absent_token_is_explicit_miss() {
        assert!(fixture_table().get("gamma").is_none());
    }

    #[test]
    fn inconsistent_width_rejected_with_line() {
        let res = load_embedding_table_from("alpha 1.0 2.0\nbeta 1.0\n".as_bytes());
        match res {
            Err(TextError::WidthMismatch { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected width mismatch, got {other:?}"),
        }
    }

    #[test]
    fn duplicate_token_last_wins() {
        let t = load_embedding_table_from("x 1.0\nx 2.0\n".as_bytes()).unwrap();
        assert_eq!(t.get("x"), Some(&[2.0][..]));
    }

    #[test]
    fn single_word_sentence_is_its_vector() {
        let t = fixture_table();
        let s = embed_sentences(
            &[vec!["alpha".to_string()]],
            &t,
            SentenceMode::Unweighted,
            None,
        );
        assert_eq!(s.shape(), &[1, 4]);
        assert_eq!(s.data(), &[1.0, 0.0, 0.0, 2.0]);
    }

    #[test]
    fn uniform_probs_make_weighted_a_scalar_multiple() {
        let t = fixture_table();
        let corpus = docs(&["alpha beta", "beta alpha"]);
        let vocab = fit_vocabulary(&corpus, 10).unwrap();
        let sentences = vec![vec!["alpha".to_string(), "beta".to_string()]];
        let unweighted = embed_sentences(&sentences, &t, SentenceMode::Unweighted, None);
        let weighted = embed_sentences(&sentences, &t, SentenceMode::Weighted, Some(&vocab));
        // p uniform = 0.5 each, so every weight is a/(a+0.5)
        let k = SIF_A / (SIF_A + 0.5);
        for (w, u) in weighted.data().iter().zip(unweighted.data()) {
            assert!((w - k * u).abs() < 1e-12);
        }
    }

    #[test]
    fn weighted_three_word_formula_oracle() {
        let t = load_embedding_table_from(
            "p 1.0 0.0\nq 0.0 1.0\nr 1.0 1.0\n".as_bytes(),
        )
        .unwrap();
        let corpus = docs(&["p p p q r", "p q r r"]);
        let vocab = fit_vocabulary(&corpus, 10).unwrap();
        let sentence = vec!["p".to_string(), "q".to_string(), "r".to_string()];
        let got = embed_sentences(&[sentence.clone()], &t, SentenceMode::Weighted, Some(&vocab));
        // direct scalar-weighted sum oracle
        let mut expect = [0.0; 2];
        for w in &sentence {
            let weight = SIF_A / (SIF_A + vocab.unigram_p(w));
            for (i, &x) in t.get(w).unwrap().iter().enumerate() {
                expect[i] += weight * x;
            }
        }
        for e in expect.iter_mut() {
            *e /= 3.0;
        }
        assert!((got.data()[0] - expect[0]).abs() < 1e-12);
        assert!((got.data()[1] - expect[1]).abs() < 1e-12);
    }

    #[test]
    fn no_in_table_sentence_dropped() {
        let t = fixture_table();
        let s = embed_sentences(
            &[vec!["missing".to_string()], vec!["alpha".to_string()]],
            &t,
            SentenceMode::Unweighted,
            None,
        );
        assert_eq!(s.shape(), &[1, 4]);
    }

    #[test]
    fn token_matrix_pads_with_zeros() {
        let t = fixture_table();
        let doc = vec!["alpha".to_string(), "beta".to_string()];
        let m = tokens_to_matrix(&doc, &t, 5);
        assert_eq!(m.shape(), &[5, 4]);
        assert_eq!(&m.data()[0..4], &[1.0, 0.0, 0.0, 2.0]);
        assert_eq!(&m.data()[4..8], &[0.0, 1.0, 0.0, -1.0]);
        assert!(m.data()[8..].iter().all(|&x| x == 0.0));
    }

    #[test]
    fn empty_document_matrix_is_all_zero() {
        let m = tokens_to_matrix(&[], &fixture_table(), 3);
        assert!(m.data().iter().all(|&x| x == 0.0));
    }
}
