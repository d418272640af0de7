//! Subword vocabulary and MeKB sequence serialization.
//!
//! The vocabulary is trained from entity titles by greedy frequency-based
//! merges: start from single characters (word-internal ones carry the
//! `##` continuation marker), repeatedly merge the most frequent adjacent
//! pair. Tokenization is greedy longest-match within each whitespace
//! word. A user's MeKB serializes as the title tokens of its entries in
//! descending score order, each entity followed by `[SEP]`, truncated and
//! padded to a fixed length.

use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use thiserror::Error;

use crate::kgstore::KnowledgeGraph;
use crate::mekb::MeKb;
use crate::text::normalize;

pub const PAD_ID: u32 = 0;
pub const UNK_ID: u32 = 1;
pub const SEP_ID: u32 = 2;
pub const MASK_ID: u32 = 3;

pub const SPECIAL_TOKENS: [&str; 4] = ["[PAD]", "[UNK]", "[SEP]", "[MASK]"];

/// Marker prefix on word-internal pieces.
pub const CONTINUATION: &str = "##";

/// Words longer than this fall back to per-character pieces.
const MAX_WORD_CHARS: usize = 64;

#[derive(Debug, Error)]
pub enum VocabError {
    #[error("cannot train a vocabulary from an empty corpus")]
    EmptyCorpus,
    #[error("vocab size {requested} is too small: alphabet needs {required} entries")]
    VocabTooSmall { requested: usize, required: usize },
    #[error("duplicate token {0:?}")]
    DuplicateToken(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {msg}")]
    Format { path: String, msg: String },
}

/// An indexed subword inventory. Indices 0–3 are the special tokens.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocab {
    fn from_token_list(tokens: Vec<String>) -> Result<Vocab, VocabError> {
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, tok) in tokens.iter().enumerate() {
            if index.insert(tok.clone(), i as u32).is_some() {
                return Err(VocabError::DuplicateToken(tok.clone()));
            }
        }
        Ok(Vocab { tokens, index })
    }

    /// Builds a vocabulary from explicit pieces (specials are prepended).
    pub fn with_pieces(pieces: impl IntoIterator<Item = String>) -> Result<Vocab, VocabError> {
        let mut tokens: Vec<String> = SPECIAL_TOKENS.iter().map(|s| s.to_string()).collect();
        tokens.extend(pieces);
        Vocab::from_token_list(tokens)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false // specials are always present
    }

    pub fn token(&self, id: u32) -> &str {
        &self.tokens[id as usize]
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    /// Greedy longest-match tokenization of one title. Characters absent
    /// from the vocabulary become `[UNK]`; words longer than
    /// `MAX_WORD_CHARS` are split per character first.
    pub fn tokenize(&self, title: &str) -> Vec<u32> {
        let mut ids = Vec::new();
        for word in normalize(title).split(' ') {
            if word.is_empty() {
                continue;
            }
            let chars: Vec<char> = word.chars().collect();
            if chars.len() > MAX_WORD_CHARS {
                for (p, c) in chars.iter().enumerate() {
                    let piece = if p == 0 {
                        c.to_string()
                    } else {
                        format!("{CONTINUATION}{c}")
                    };
                    ids.push(self.id(&piece).unwrap_or(UNK_ID));
                }
                continue;
            }
            let mut p = 0;
            while p < chars.len() {
                let mut matched = false;
                for len in (1..=chars.len() - p).rev() {
                    let mut piece = String::new();
                    if p > 0 {
                        piece.push_str(CONTINUATION);
                    }
                    piece.extend(&chars[p..p + len]);
                    if let Some(id) = self.id(&piece) {
                        ids.push(id);
                        p += len;
                        matched = true;
                        break;
                    }
                }
                if !matched {
                    ids.push(UNK_ID);
                    p += 1;
                }
            }
        }
        ids
    }

    /// Inverse of [`Vocab::tokenize`] on in-vocab titles: concatenate
    /// pieces, stripping continuation markers; a piece without the marker
    /// starts a new word.
    pub fn detokenize(&self, ids: &[u32]) -> String {
        let mut out = String::new();
        for &id in ids {
            let tok = self.token(id);
            match tok.strip_prefix(CONTINUATION) {
                Some(rest) => out.push_str(rest),
                None => {
                    if !out.is_empty() {
                        out.push(' ');
                    }
                    out.push_str(tok);
                }
            }
        }
        out
    }

    /// One token per line; the line number is the token id.
    pub fn save(&self, path: &Path) -> Result<(), VocabError> {
        let io_err = |e| VocabError::Io { path: path.display().to_string(), source: e };
        let mut w = BufWriter::new(File::create(path).map_err(io_err)?);
        let io_err = |e| VocabError::Io { path: path.display().to_string(), source: e };
        for tok in &self.tokens {
            writeln!(w, "{tok}").map_err(io_err)?;
        }
        w.flush().map_err(io_err)
    }

    pub fn load(path: &Path) -> Result<Vocab, VocabError> {
        let name = path.display().to_string();
        let file = File::open(path).map_err(|e| VocabError::Io { path: name.clone(), source: e })?;
        let tokens: Vec<String> = BufReader::new(file)
            .lines()
            .collect::<Result<_, _>>()
            .map_err(|e| VocabError::Io { path: name.clone(), source: e })?;
        if tokens.len() < SPECIAL_TOKENS.len()
            || tokens[..SPECIAL_TOKENS.len()] != SPECIAL_TOKENS.map(str::to_string)
        {
            return Err(VocabError::Format {
                path: name,
                msg: "first four lines must be the special tokens".to_string(),
            });
        }
        Vocab::from_token_list(tokens)
    }
}

/// Trains a subword vocabulary of exactly `vocab_size` entries (specials
/// included) unless the corpus runs out of mergeable pairs first.
///
/// Deterministic procedure: split titles into whitespace words, seed the
/// inventory with every word-initial character and every `##`-marked
/// internal character, then repeatedly merge the highest-frequency
/// adjacent pair (ties go to the lexicographically smallest pair).
pub fn train_vocab(
    titles: impl IntoIterator<Item = impl AsRef<str>>,
    vocab_size: usize,
) -> Result<Vocab, VocabError> {
    let mut word_freq: BTreeMap<String, u64> = BTreeMap::new();
    for title in titles {
        for word in normalize(title.as_ref()).split(' ') {
            if !word.is_empty() {
                *word_freq.entry(word.to_string()).or_insert(0) += 1;
            }
        }
    }
    if word_freq.is_empty() {
        return Err(VocabError::EmptyCorpus);
    }

    // seed: per-word symbol sequences and their alphabet
    let mut words: Vec<(Vec<String>, u64)> = Vec::with_capacity(word_freq.len());
    let mut alphabet: BTreeMap<String, ()> = BTreeMap::new();
    for (word, freq) in word_freq {
        let mut symbols = Vec::new();
        for (p, c) in word.chars().enumerate() {
            let sym = if p == 0 {
                c.to_string()
            } else {
                format!("{CONTINUATION}{c}")
            };
            alphabet.entry(sym.clone()).or_insert(());
            symbols.push(sym);
        }
        words.push((symbols, freq));
    }

    let required = SPECIAL_TOKENS.len() + alphabet.len();
    if vocab_size < required {
        return Err(VocabError::VocabTooSmall { requested: vocab_size, required });
    }

    let mut tokens: Vec<String> = SPECIAL_TOKENS.iter().map(|s| s.to_string()).collect();
    tokens.extend(alphabet.into_keys());
    let mut known: std::collections::HashSet<String> = tokens.iter().cloned().collect();

    while tokens.len() < vocab_size {
        // count adjacent pairs; BTreeMap iteration makes the max with
        // strict-greater selection the lexicographically smallest tie
        let mut pair_freq: BTreeMap<(String, String), u64> = BTreeMap::new();
        for (symbols, freq) in &words {
            for pair in symbols.windows(2) {
                *pair_freq
                    .entry((pair[0].clone(), pair[1].clone()))
                    .or_insert(0) += freq;
            }
        }
        let Some((best_pair, _)) = pair_freq
            .iter()
            .fold(None::<(&(String, String), u64)>, |best, (pair, &freq)| match best {
                Some((_, bf)) if bf >= freq => best,
                _ => Some((pair, freq)),
            })
        else {
            break; // nothing left to merge
        };
        let best_pair = best_pair.clone();
        let merged = format!(
            "{}{}",
            best_pair.0,
            best_pair.1.strip_prefix(CONTINUATION).unwrap_or(&best_pair.1)
        );

        for (symbols, _) in &mut words {
            let mut rewritten = Vec::with_capacity(symbols.len());
            let mut i = 0;
            while i < symbols.len() {
                if i + 1 < symbols.len()
                    && symbols[i] == best_pair.0
                    && symbols[i + 1] == best_pair.1
                {
                    rewritten.push(merged.clone());
                    i += 2;
                } else {
                    rewritten.push(symbols[i].clone());
                    i += 1;
                }
            }
            *symbols = rewritten;
        }

        if known.insert(merged.clone()) {
            tokens.push(merged);
        }
    }

    Vocab::from_token_list(tokens)
}

/// A fixed-length encoder input: token ids and the parallel 0/1
/// attention mask (1 exactly on non-PAD positions; PAD only as a suffix).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSequence {
    pub ids: Vec<u32>,
    pub attention_mask: Vec<u8>,
}

impl TokenSequence {
    /// Number of masked-in positions.
    pub fn active_len(&self) -> usize {
        self.attention_mask.iter().filter(|&&m| m == 1).count()
    }

    pub fn is_all_padding(&self) -> bool {
        self.attention_mask.iter().all(|&m| m == 0)
    }
}

/// Serializes a MeKB: for each entry in descending-score order, the
/// entity title's tokens followed by `[SEP]`, hard-truncated at `n_max`
/// (mid-entity truncation allowed) and padded with `[PAD]`. An empty
/// MeKB yields an all-PAD sequence with an all-zero mask; callers must
/// exclude such users from training.
pub fn build_sequence(mekb: &MeKb, kg: &KnowledgeGraph, vocab: &Vocab, n_max: usize) -> TokenSequence {
    assert!(n_max > 0, "n_max must be positive");
    let mut ids = Vec::with_capacity(n_max);
    'outer: for entry in &mekb.entries {
        let Some(entity) = kg.get(&entry.entity_id) else {
            continue;
        };
        for id in vocab.tokenize(&entity.title).into_iter().chain([SEP_ID]) {
            ids.push(id);
            if ids.len() == n_max {
                break 'outer;
            }
        }
    }
    let active = ids.len();
    ids.resize(n_max, PAD_ID);
    let mut attention_mask = vec![1u8; active];
    attention_mask.resize(n_max, 0);
    TokenSequence { ids, attention_mask }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kgstore::{Entity, EntitySource};
    use crate::mekb::InterestEntry;
    use proptest::prelude::*;

    fn kg_with_titles(pairs: &[(&str, &str)]) -> KnowledgeGraph {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("e.tsv");
        let mut content = String::new();
        for (id, title) in pairs {
            content.push_str(&format!("{id}\t{title}\n"));
        }
        std::fs::write(&path, content).unwrap();
        crate::kgstore::load_kg(&path, None).unwrap().0
    }

    fn mekb_of(entries: &[(&str, f64)]) -> MeKb {
        MeKb {
            user_id: "u".to_string(),
            entries: entries
                .iter()
                .map(|(id, score)| InterestEntry {
                    entity_id: id.to_string(),
                    raw_count: 1,
                    tf: 1.0,
                    idf: 1.0,
                    score: *score,
                })
                .collect(),
        }
    }

    #[test]
    fn merge_trace_on_a_tiny_corpus() {
        // "aaa" -> symbols [a, ##a, ##a]; alphabet {##a, a}.
        // size 6: no merges, vocab = specials + alphabet
        let v = train_vocab(["aaa"], 6).unwrap();
        assert_eq!(v.len(), 6);
        assert_eq!(v.token(4), "##a");
        assert_eq!(v.token(5), "a");
        // size 7: pairs (a,##a) and (##a,##a) tie at freq 1; the
        // lexicographically smaller (##a,##a) merges into ##aa
        let v = train_vocab(["aaa"], 7).unwrap();
        assert_eq!(v.token(6), "##aa");
        // size 8: word is now [a, ##aa]; merging yields aaa
        let v = train_vocab(["aaa"], 8).unwrap();
        assert_eq!(v.token(7), "aaa");
    }

    #[test]
    fn empty_corpus_is_an_error() {
        assert!(matches!(
            train_vocab(Vec::<String>::new(), 10),
            Err(VocabError::EmptyCorpus)
        ));
        assert!(matches!(train_vocab(["   "], 10), Err(VocabError::EmptyCorpus)));
    }

    #[test]
    fn vocab_size_below_alphabet_is_an_error() {
        // alphabet of "aaa" is {a, ##a}: 4 specials + 2 = 6 required
        assert!(matches!(
            train_vocab(["aaa"], 5),
            Err(VocabError::VocabTooSmall { requested: 5, required: 6 })
        ));
    }

    #[test]
    fn trained_vocab_has_exactly_the_requested_size() {
        // 100 distinct multi-char words give plenty of merge material
        let titles: Vec<String> = (0..100)
            .map(|i| format!("word{i:02}piece entry{i:02}thing"))
            .collect();
        let v = train_vocab(&titles, 200).unwrap();
        assert_eq!(v.len(), 200);
    }

    #[test]
    fn single_token_title_maps_to_its_index() {
        let v = Vocab::with_pieces(["hello".to_string()]).unwrap();
        assert_eq!(v.tokenize("hello"), vec![4]);
        assert_eq!(v.tokenize("Hello"), vec![4]); // normparity
    }

    #[test]
    fn unseen_character_becomes_unk() {
        let v = Vocab::with_pieces(["a".to_string()]).unwrap();
        assert_eq!(v.tokenize("☂"), vec![UNK_ID]);
        assert_eq!(v.tokenize("a☂a"), vec![4, UNK_ID, UNK_ID]); // ##a unseen too
    }

    #[test]
    fn greedy_longest_match_hand_trace() {
        let v = Vocab::with_pieces(["a", "##a", "##aa"].map(str::to_string)).unwrap();
        let ids = v.tokenize("aaaa");
        let pieces: Vec<&str> = ids.iter().map(|&i| v.token(i)).collect();
        assert_eq!(pieces, vec!["a", "##aa", "##a"]);
    }

    #[test]
    fn very_long_words_fall_back_to_characters() {
        let v = Vocab::with_pieces(["a", "##a", "##aa"].map(str::to_string)).unwrap();
        let long_word: String = std::iter::repeat('a').take(65).collect();
        let ids = v.tokenize(&long_word);
        assert_eq!(ids.len(), 65);
        assert!(ids.iter().skip(1).all(|&i| v.token(i) == "##a"));
    }

    #[test]
    fn sequence_pads_and_masks() {
        let kg = kg_with_titles(&[("Q1", "hello")]);
        let v = Vocab::with_pieces(["hello".to_string()]).unwrap();
        let seq = build_sequence(&mekb_of(&[("Q1", 1.0)]), &kg, &v, 4);
        assert_eq!(seq.ids, vec![4, SEP_ID, PAD_ID, PAD_ID]);
        assert_eq!(seq.attention_mask, vec![1, 1, 0, 0]);
    }

    #[test]
    fn sequence_truncates_at_n_max() {
        let kg = kg_with_titles(&[("Q1", "aaaa aaaa aaaa")]);
        let v = Vocab::with_pieces(["a", "##a"].map(str::to_string)).unwrap();
        let seq = build_sequence(&mekb_of(&[("Q1", 1.0)]), &kg, &v, 5);
        assert_eq!(seq.ids.len(), 5);
        assert_eq!(seq.attention_mask, vec![1; 5]);
    }

    #[test]
    fn entries_serialize_in_score_order() {
        let kg = kg_with_titles(&[("Qa", "first"), ("Qb", "second")]);
        let v = Vocab::with_pieces(["first", "second"].map(str::to_string)).unwrap();
        let seq = build_sequence(&mekb_of(&[("Qb", 0.6), ("Qa", 0.4)]), &kg, &v, 6);
        let pieces: Vec<&str> = seq.ids.iter().map(|&i| v.token(i)).collect();
        assert_eq!(pieces, vec!["second", "[SEP]", "first", "[SEP]", "[PAD]", "[PAD]"]);
    }

    #[test]
    fn sequence_depends_only_on_entry_order() {
        let kg = kg_with_titles(&[("Qa", "first"), ("Qb", "second")]);
        let v = Vocab::with_pieces(["first", "second"].map(str::to_string)).unwrap();
        let a = build_sequence(&mekb_of(&[("Qa", 0.9), ("Qb", 0.1)]), &kg, &v, 6);
        let b = build_sequence(&mekb_of(&[("Qa", 0.51), ("Qb", 0.49)]), &kg, &v, 6);
        assert_eq!(a, b);
    }

    #[test]
    fn empty_mekb_yields_all_padding() {
        let kg = KnowledgeGraph::new();
        let v = Vocab::with_pieces(["a".to_string()]).unwrap();
        let seq = build_sequence(&mekb_of(&[]), &kg, &v, 3);
        assert!(seq.is_all_padding());
        assert_eq!(seq.ids, vec![PAD_ID; 3]);
    }

    #[test]
    fn vocab_file_round_trips() {
        let titles: Vec<String> = (0..20).map(|i| format!("title number{i}")).collect();
        let v = train_vocab(&titles, 40).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vocab.txt");
        v.save(&path).unwrap();
        assert_eq!(Vocab::load(&path).unwrap(), v);
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("[PAD]\n[UNK]\n[SEP]\n[MASK]\n"));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        /// Tokenize-then-detokenize is the identity on corpus titles
        /// (every character is in the trained vocabulary).
        #[test]
        fn detokenize_inverts_tokenize(
            titles in proptest::collection::vec("[a-e]{1,8}( [a-e]{1,8}){0,2}", 1..12),
            extra in 0usize..40,
        ) {
            let alphabet: std::collections::BTreeSet<char> =
                titles.iter().flat_map(|t| t.chars()).filter(|c| *c != ' ').collect();
            let min = SPECIAL_TOKENS.len() + alphabet.len() * 2; // upper bound on seed size
            let v = train_vocab(&titles, min + extra).unwrap();
            for t in &titles {
                let norm = normalize(t);
                prop_assert_eq!(v.detokenize(&v.tokenize(t)), norm);
            }
        }

        /// Mask is 1 exactly on non-PAD prefix positions.
        #[test]
        fn mask_agrees_with_padding(n_entries in 0usize..5, n_max in 1usize..20) {
            let kg = kg_with_titles(&[("Q0", "aa bb"), ("Q1", "ccc"), ("Q2", "dd"), ("Q3", "e f g"), ("Q4", "hh")]);
            let v = train_vocab(["aa bb", "ccc", "dd", "e f g", "hh"], 30).unwrap();
            let entries: Vec<(String, f64)> = (0..n_entries)
                .map(|i| (format!("Q{i}"), 1.0 / (i + 1) as f64))
                .collect();
            let entries_ref: Vec<(&str, f64)> =
                entries.iter().map(|(s, f)| (s.as_str(), *f)).collect();
            let seq = build_sequence(&mekb_of(&entries_ref), &kg, &v, n_max);
            prop_assert_eq!(seq.ids.len(), n_max);
            prop_assert_eq!(seq.attention_mask.len(), n_max);
            let mut seen_pad = false;
            for (id, m) in seq.ids.iter().zip(&seq.attention_mask) {
                if *m == 0 {
                    seen_pad = true;
                    prop_assert_eq!(*id, PAD_ID);
                } else {
                    prop_assert!(!seen_pad, "PAD must be a suffix");
                }
            }
        }
    }
}
