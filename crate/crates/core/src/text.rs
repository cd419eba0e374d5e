//! Tokenization shared by the lexicon, hashing embedder and theme modules.

use unicode_segmentation::UnicodeSegmentation;

/// Lowercased Unicode word tokens.
pub fn tokenize(text: &str) -> Vec<String> {
    text.unicode_words().map(|w| w.to_lowercase()).collect()
}

/// Rough sentence count: runs of terminal punctuation close a sentence, and
/// trailing text without punctuation counts as one more.
pub fn sentence_count(text: &str) -> usize {
    let mut count = 0;
    let mut pending = false;
    let mut in_terminator = false;
    for ch in text.chars() {
        if matches!(ch, '.' | '!' | '?' | '\u{2026}') {
            if pending && !in_terminator {
                count += 1;
            }
            in_terminator = true;
            pending = false;
        } else {
            in_terminator = false;
            if !ch.is_whitespace() {
                pending = true;
            }
        }
    }
    if pending {
        count += 1;
    }
    count
}

/// Common English function words dropped before keyword extraction.
pub const STOPWORDS: &[&str] = &[
    "a", "about", "after", "again", "all", "also", "am", "an", "and", "any", "are", "as", "at",
    "be", "because", "been", "before", "being", "but", "by", "can", "could", "did", "do", "does",
    "doing", "don't", "for", "from", "had", "has", "have", "having", "he", "her", "here", "hers",
    "him", "his", "how", "i", "i'm", "if", "in", "into", "is", "it", "it's", "its", "just", "me",
    "more", "my", "no", "not", "now", "of", "on", "one", "only", "or", "other", "our", "out",
    "over", "really", "she", "so", "some", "than", "that", "that's", "the", "their", "them",
    "then", "there", "these", "they", "this", "those", "to", "too", "up", "us", "very", "was",
    "we", "were", "what", "when", "where", "which", "while", "who", "why", "will", "with",
    "would", "you", "you're", "your",
];

pub fn is_stopword(token: &str) -> bool {
    STOPWORDS.binary_search(&token).is_ok()
}

/// Tokens with stopwords and pure numbers removed.
pub fn content_tokens(text: &str) -> Vec<String> {
    tokenize(text)
        .into_iter()
        .filter(|t| !is_stopword(t) && !t.chars().all(|c| c.is_ascii_digit()))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tokenizes_and_lowercases() {
        assert_eq!(tokenize("I feel Watched."), vec!["i", "feel", "watched"]);
        assert!(tokenize("   ").is_empty());
    }

    #[test]
    fn stopword_list_is_sorted() {
        let mut sorted = STOPWORDS.to_vec();
        sorted.sort_unstable();
        assert_eq!(sorted, STOPWORDS);
    }

    #[test]
    fn counts_sentences() {
        assert_eq!(sentence_count("One. Two! Three?"), 3);
        assert_eq!(sentence_count("No punctuation here"), 1);
        assert_eq!(sentence_count("Wait... what?! ok"), 3);
        assert_eq!(sentence_count(""), 0);
    }
}
