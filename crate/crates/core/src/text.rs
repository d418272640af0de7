//! Text normalization shared by the alias table, the linker, and the
//! tokenizer.
//!
//! All mention and title comparisons go through [`normalize`]: Unicode
//! NFKC, lowercase, internal whitespace collapsed to single spaces,
//! leading/trailing whitespace trimmed. Matching the same rule everywhere
//! keeps linking reproducible across corpora.

use unicode_normalization::UnicodeNormalization;

/// Canonical surface form: NFKC, lowercased, whitespace-collapsed, trimmed.
pub fn normalize(s: &str) -> String {
    let folded: String = s.nfkc().collect::<String>().to_lowercase();
    let mut out = String::with_capacity(folded.len());
    let mut pending_space = false;
    for c in folded.chars() {
        if c.is_whitespace() {
            pending_space = !out.is_empty();
        } else {
            if pending_space {
                out.push(' ');
                pending_space = false;
            }
            out.push(c);
        }
    }
    out
}

/// True for characters that belong to a word in whitespace-separated
/// scripts. CJK ideographs and kana are excluded: those scripts carry no
/// word boundaries, so boundary checks must not apply to them.
pub fn is_word_char(c: char) -> bool {
    c.is_alphanumeric() && !is_cjk(c)
}

fn is_cjk(c: char) -> bool {
    matches!(c,
        '\u{3040}'..='\u{30FF}'   // hiragana + katakana
        | '\u{3400}'..='\u{4DBF}' // CJK extension A
        | '\u{4E00}'..='\u{9FFF}' // CJK unified ideographs
        | '\u{AC00}'..='\u{D7AF}' // hangul syllables
        | '\u{F900}'..='\u{FAFF}' // CJK compatibility ideographs
    )
}
