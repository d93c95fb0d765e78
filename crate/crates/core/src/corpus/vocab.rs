//! Subword vocabulary: pair-frequency merging to learn it, greedy
//! longest-match to apply it.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const CLS: usize = 2;
pub const SEP: usize = 3;
pub const MASK: usize = 4;
pub const ENT: usize = 5;
pub const HD: usize = 6;
pub const TL: usize = 7;

pub const RESERVED: [&str; 8] = [
    "[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]", "[ENT]", "[HD]", "[TL]",
];

/// Prefix marking a piece that continues the previous one inside a word.
pub const CONTINUATION: &str = "##";

/// A whitespace- and punctuation-delimited word with its char span.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Word<'a> {
    pub text: &'a str,
    pub start: usize,
    pub end: usize,
}

fn is_punct(c: char) -> bool {
    c.is_ascii_punctuation() || (!c.is_alphanumeric() && !c.is_whitespace() && !c.is_control())
}

/// Splits on whitespace; every punctuation char becomes a word of its own.
/// Spans are in chars.
pub fn split_words(text: &str) -> Vec<Word<'_>> {
    let mut words = Vec::new();
    // (byte, char) start of the word being read
    let mut open: Option<(usize, usize)> = None;
    let mut char_idx = 0;
    for (byte, ch) in text.char_indices() {
        let breaks = ch.is_whitespace() || is_punct(ch);
        if breaks {
            if let Some((b, c)) = open.take() {
                words.push(Word {
                    text: &text[b..byte],
                    start: c,
                    end: char_idx,
                });
            }
            if !ch.is_whitespace() {
                words.push(Word {
                    text: &text[byte..byte + ch.len_utf8()],
                    start: char_idx,
                    end: char_idx + 1,
                });
            }
        } else if open.is_none() {
            open = Some((byte, char_idx));
        }
        char_idx += 1;
    }
    if let Some((b, c)) = open {
        words.push(Word {
            text: &text[b..],
            start: c,
            end: char_idx,
        });
    }
    words
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SubwordVocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

/// One segmented piece: vocabulary id and char span in the source text.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Piece {
    pub id: usize,
    pub start: usize,
    pub end: usize,
}

impl SubwordVocab {
    /// Vocabulary holding only the reserved tokens.
    pub fn reserved_only() -> Self {
        Self::from_tokens(RESERVED.iter().map(|s| s.to_string()).collect())
            .expect("reserved tokens are distinct")
    }

    /// Builds from a full token list; the first eight entries must be the
    /// reserved tokens in their fixed order.
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < RESERVED.len()
            || tokens.iter().zip(RESERVED).any(|(t, r)| t != r)
        {
            return Err(Error::format("vocab", "reserved tokens missing or out of order"));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() || index.insert(t.clone(), i).is_some() {
                return Err(Error::format(
                    format!("vocab:{}", i + 1),
                    format!("empty or duplicate token {t:?}"),
                ));
            }
        }
        Ok(SubwordVocab { tokens, index })
    }

    /// Learns pieces from `texts` by repeatedly merging the most frequent
    /// adjacent pair until the vocabulary holds `target_size` entries or no
    /// pair is left. Ties break toward the lexicographically smaller pair.
    pub fn learn<S: AsRef<str>>(texts: &[S], target_size: usize) -> Self {
        let mut word_counts: BTreeMap<String, usize> = BTreeMap::new();
        for t in texts {
            for w in split_words(t.as_ref()) {
                *word_counts.entry(w.text.to_owned()).or_default() += 1;
            }
        }
        let mut words: Vec<(Vec<String>, usize)> = word_counts
            .into_iter()
            .map(|(w, n)| {
                let pieces = w
                    .chars()
                    .enumerate()
                    .map(|(i, c)| {
                        if i == 0 {
                            c.to_string()
                        } else {
                            format!("{CONTINUATION}{c}")
                        }
                    })
                    .collect();
                (pieces, n)
            })
            .collect();

        let mut vocab = Self::reserved_only();
        let mut alphabet: Vec<String> = words.iter().flat_map(|(p, _)| p.clone()).collect();
        alphabet.sort();
        alphabet.dedup();
        for a in alphabet {
            vocab.push(a);
        }

        while vocab.len() < target_size {
            let mut pairs: BTreeMap<(&str, &str), usize> = BTreeMap::new();
            for (pieces, n) in &words {
                for w in pieces.windows(2) {
                    *pairs.entry((&w[0], &w[1])).or_default() += n;
                }
            }
            // Highest count; BTreeMap order makes the first maximum the
            // lexicographically smallest pair.
            let Some(((a, b), _)) = pairs
                .iter()
                .fold(None::<(&(&str, &str), usize)>, |best, (k, &v)| match best {
                    Some((_, bv)) if bv >= v => best,
                    _ => Some((k, v)),
                })
            else {
                break;
            };
            let (a, b) = (a.to_string(), b.to_string());
            let merged = format!("{a}{}", b.trim_start_matches(CONTINUATION));
            for (pieces, _) in &mut words {
                let mut i = 0;
                while i + 1 < pieces.len() {
                    if pieces[i] == a && pieces[i + 1] == b {
                        pieces[i] = merged.clone();
                        pieces.remove(i + 1);
                    }
                    i += 1;
                }
            }
            vocab.push(merged);
        }
        vocab
    }

    fn push(&mut self, token: String) {
        if !self.index.contains_key(&token) {
            self.index.insert(token.clone(), self.tokens.len());
            self.tokens.push(token);
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn is_reserved(id: usize) -> bool {
        id < RESERVED.len()
    }

    pub fn is_continuation(&self, id: usize) -> bool {
        self.token(id)
            .is_some_and(|t| t.starts_with(CONTINUATION) && t.len() > CONTINUATION.len())
    }

    /// Greedy longest-match segmentation of one word. Characters with no
    /// matching piece become single-char `[UNK]` pieces.
    pub fn segment_word(&self, word: &str, char_offset: usize) -> Vec<Piece> {
        let chars: Vec<char> = word.chars().collect();
        let mut out = Vec::new();
        let mut pos = 0;
        let mut buf = String::new();
        while pos < chars.len() {
            let mut found = None;
            for end in (pos + 1..=chars.len()).rev() {
                buf.clear();
                if pos > 0 {
                    buf.push_str(CONTINUATION);
                }
                buf.extend(&chars[pos..end]);
                if let Some(id) = self.id(&buf) {
                    found = Some((id, end));
                    break;
                }
            }
            let (id, end) = found.unwrap_or((UNK, pos + 1));
            out.push(Piece {
                id,
                start: char_offset + pos,
                end: char_offset + end,
            });
            pos = end;
        }
        out
    }

    pub fn tokenize(&self, text: &str) -> Vec<Piece> {
        split_words(text)
            .into_iter()
            .flat_map(|w| self.segment_word(w.text, w.start))
            .collect()
    }

    pub fn to_lines(&self) -> String {
        let mut s = String::new();
        for t in &self.tokens {
            s.push_str(t);
            s.push('\n');
        }
        s
    }

    pub fn parse_lines(text: &str) -> Result<Self> {
        Self::from_tokens(text.lines().map(str::to_owned).collect())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_lines(&text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn vocab_of(words: &[&str]) -> SubwordVocab {
        let mut v = SubwordVocab::reserved_only();
        for w in words {
            v.push(w.to_string());
        }
        v
    }

    #[test]
    fn empty_input_gives_no_tokens() {
        assert!(SubwordVocab::reserved_only().tokenize("").is_empty());
    }

    #[test]
    fn single_word_is_one_token() {
        let v = vocab_of(&["hello"]);
        let p = v.tokenize("  hello ");
        assert_eq!(
            p,
            vec![Piece {
                id: 8,
                start: 2,
                end: 7
            }]
        );
    }

    #[test]
    fn longest_match_with_continuations() {
        let v = vocab_of(&["un", "##happ", "##happi", "##ness", "##y", "u"]);
        let ids: Vec<&str> = v
            .tokenize("unhappiness")
            .iter()
            .map(|p| v.token(p.id).unwrap())
            .collect();
        assert_eq!(ids, ["un", "##happi", "##ness"]);
    }

    #[test]
    fn unknown_chars_fall_back_per_char() {
        let v = vocab_of(&["a", "##b"]);
        let p = v.tokenize("abx!");
        let ids: Vec<usize> = p.iter().map(|p| p.id).collect();
        assert_eq!(ids, vec![8, 9, UNK, UNK]);
        assert_eq!((p[2].start, p[2].end), (2, 3));
        assert_eq!((p[3].start, p[3].end), (3, 4));
    }

    #[test]
    fn punctuation_splits_words() {
        let w: Vec<&str> = split_words("a,b  c.").iter().map(|w| w.text).collect();
        assert_eq!(w, ["a", ",", "b", "c", "."]);
    }

    #[test]
    fn learning_merges_frequent_pairs_first() {
        let v = SubwordVocab::learn(&["ab ab ab cd"], 8 + 4 + 1);
        // alphabet a, ##b, c, ##d then the most frequent pair.
        assert_eq!(v.token(12), Some("ab"));
        let v = SubwordVocab::learn(&["ab cd"], 8 + 4 + 1);
        // tie: ("a", "##b") < ("c", "##d").
        assert_eq!(v.token(12), Some("ab"));
    }

    #[test]
    fn learning_is_deterministic_and_round_trips() {
        let text = ["the cat sat on the mat", "the hat is flat"];
        let a = SubwordVocab::learn(&text, 40);
        let b = SubwordVocab::learn(&text, 40);
        assert_eq!(a, b);
        assert_eq!(SubwordVocab::parse_lines(&a.to_lines()).unwrap(), a);
    }

    #[test]
    fn load_rejects_missing_reserved() {
        assert!(SubwordVocab::parse_lines("[PAD]\nfoo\n").is_err());
    }

    /// Reference segmentation: at each position try every piece in the
    /// vocabulary and keep the longest that matches.
    fn oracle_segment(v: &SubwordVocab, word: &str) -> Vec<String> {
        let chars: Vec<char> = word.chars().collect();
        let mut out = Vec::new();
        let mut pos = 0;
        while pos < chars.len() {
            let rest: String = chars[pos..].iter().collect();
            let mut best: Option<(usize, &str)> = None;
            for t in v.tokens().iter().skip(RESERVED.len()) {
                let surface = if pos == 0 {
                    if t.starts_with(CONTINUATION) {
                        continue;
                    }
                    t.as_str()
                } else {
                    match t.strip_prefix(CONTINUATION) {
                        Some(s) if !s.is_empty() => s,
                        _ => continue,
                    }
                };
                if rest.starts_with(surface) {
                    let n = surface.chars().count();
                    if best.is_none_or(|(m, _)| n > m) {
                        best = Some((n, t.as_str()));
                    }
                }
            }
            match best {
                Some((n, t)) => {
                    out.push(t.to_owned());
                    pos += n;
                }
                None => {
                    out.push("[UNK]".to_owned());
                    pos += 1;
                }
            }
        }
        out
    }

    #[test]
    fn unhappiness_matches_reference_loop() {
        let corpus = [
            "unhappy happiness unkind kindness sadness happy unhappily",
            "the happiest unhappiness in a kind land",
        ];
        for size in [20, 40, 60, 90] {
            let v = SubwordVocab::learn(&corpus, size);
            let got: Vec<String> = v
                .tokenize("unhappiness")
                .iter()
                .map(|p| v.token(p.id).unwrap().to_owned())
                .collect();
            assert_eq!(got, oracle_segment(&v, "unhappiness"), "size {size}");
        }
    }

    proptest! {
        #[test]
        fn spans_cover_non_space_chars(text in "[a-e ,.]{0,40}", size in 8usize..40) {
            let v = SubwordVocab::learn(&["abc abd cde e, a."], size);
            let chars: Vec<char> = text.chars().collect();
            let pieces = v.tokenize(&text);
            let covered: String = pieces.iter().flat_map(|p| chars[p.start..p.end].iter()).collect();
            let expected: String = text.chars().filter(|c| !c.is_whitespace()).collect();
            prop_assert_eq!(&covered, &expected);
            let surface: String = pieces
                .iter()
                .map(|p| {
                    if p.id == UNK {
                        chars[p.start..p.end].iter().collect()
                    } else {
                        v.token(p.id).unwrap().trim_start_matches(CONTINUATION).to_owned()
                    }
                })
                .collect();
            prop_assert_eq!(surface, expected);
        }

        #[test]
        fn segmentation_matches_oracle(word in "[a-f]{1,12}", size in 8usize..50) {
            let v = SubwordVocab::learn(&["abc abd fed cafe bead dab face", "deaf bad cab"], size);
            let got: Vec<String> = v
                .segment_word(&word, 0)
                .iter()
                .map(|p| v.token(p.id).unwrap().to_owned())
                .collect();
            prop_assert_eq!(got, oracle_segment(&v, &word));
        }
    }
}
