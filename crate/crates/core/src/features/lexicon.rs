//! Category lexicons in the `%`-delimited dictionary format.
//!
//! ```text
//! %
//! 1    affect
//! 2    threat
//! %
//! feel*    1
//! watch*    2
//! afraid    1    2
//! ```
//!
//! The block between the first two `%` lines maps numeric ids to category
//! names; category order in that block fixes feature order. Every following
//! line is a pattern and the ids it belongs to; fields are separated by any
//! whitespace (tabs by convention). A trailing `*` makes the
//! pattern a prefix match. Patterns are matched against lowercased tokens.

use std::collections::{BTreeSet, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::FeatureError;
use crate::text::tokenize;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Category {
    pub name: String,
    pub patterns: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct Lexicon {
    categories: Vec<Category>,
    exact: HashMap<String, Vec<usize>>,
    prefix: HashMap<String, Vec<usize>>,
    max_prefix_len: usize,
}

/// Raw per-category match counts for one text; the proportion is `matches / tokens`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LexiconCounts {
    pub matches: Vec<usize>,
    pub tokens: usize,
}

impl LexiconCounts {
    pub fn zeros(n: usize) -> Self {
        LexiconCounts { matches: vec![0; n], tokens: 0 }
    }

    pub fn add(&mut self, other: &LexiconCounts) {
        for (a, b) in self.matches.iter_mut().zip(&other.matches) {
            *a += b;
        }
        self.tokens += other.tokens;
    }

    pub fn proportions(&self) -> Vec<f64> {
        if self.tokens == 0 {
            return vec![0.0; self.matches.len()];
        }
        self.matches.iter().map(|&m| m as f64 / self.tokens as f64).collect()
    }
}

impl Lexicon {
    pub fn new(categories: Vec<Category>) -> Result<Self, FeatureError> {
        if categories.is_empty() {
            return Err(FeatureError::Lexicon("lexicon needs at least one category".into()));
        }
        let mut names = BTreeSet::new();
        for c in &categories {
            if !names.insert(c.name.as_str()) {
                return Err(FeatureError::Lexicon(format!("duplicate category {:?}", c.name)));
            }
        }
        let mut exact: HashMap<String, Vec<usize>> = HashMap::new();
        let mut prefix: HashMap<String, Vec<usize>> = HashMap::new();
        let mut max_prefix_len = 0;
        for (idx, c) in categories.iter().enumerate() {
            for p in &c.patterns {
                let p = p.to_lowercase();
                let (table, key) = match p.strip_suffix('*') {
                    Some(stem) => {
                        max_prefix_len = max_prefix_len.max(stem.chars().count());
                        (&mut prefix, stem.to_string())
                    }
                    None => (&mut exact, p),
                };
                let ids = table.entry(key).or_default();
                if !ids.contains(&idx) {
                    ids.push(idx);
                }
            }
        }
        Ok(Lexicon { categories, exact, prefix, max_prefix_len })
    }

    pub fn categories(&self) -> &[Category] {
        &self.categories
    }

    pub fn len(&self) -> usize {
        self.categories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.categories.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.categories.iter().map(|c| c.name.as_str())
    }

    pub fn load(path: &Path) -> Result<Self, FeatureError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| FeatureError::Lexicon(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self, FeatureError> {
        let mut lines = text.lines().map(str::trim).filter(|l| !l.is_empty());
        if lines.next() != Some("%") {
            return Err(FeatureError::Lexicon("lexicon must start with a '%' line".into()));
        }
        let mut ids: Vec<(String, usize)> = Vec::new();
        let mut categories: Vec<Category> = Vec::new();
        let mut closed = false;
        for line in lines.by_ref() {
            if line == "%" {
                closed = true;
                break;
            }
            let mut parts = line.split_whitespace();
            let (Some(id), Some(name)) = (parts.next(), parts.next()) else {
                return Err(FeatureError::Lexicon(format!("bad category line {line:?}")));
            };
            if ids.iter().any(|(i, _)| i == id) {
                return Err(FeatureError::Lexicon(format!("duplicate category id {id}")));
            }
            ids.push((id.to_string(), categories.len()));
            categories.push(Category { name: name.to_string(), patterns: Vec::new() });
        }
        if !closed {
            return Err(FeatureError::Lexicon("unterminated category block".into()));
        }
        for line in lines {
            let mut parts = line.split_whitespace();
            let pattern = parts.next().expect("non-empty line").to_lowercase();
            for id in parts {
                let Some((_, idx)) = ids.iter().find(|(i, _)| i == id) else {
                    return Err(FeatureError::Lexicon(format!("pattern {pattern:?} refers to unknown id {id}")));
                };
                categories[*idx].patterns.push(pattern.clone());
            }
        }
        Self::new(categories)
    }

    /// Serialize back to the dictionary format with ids 1..=n in category order.
    pub fn to_dic(&self) -> String {
        let mut out = String::from("%\n");
        for (i, c) in self.categories.iter().enumerate() {
            out.push_str(&format!("{}\t{}\n", i + 1, c.name));
        }
        out.push_str("%\n");
        let mut by_pattern: Vec<(&str, Vec<usize>)> = Vec::new();
        for (i, c) in self.categories.iter().enumerate() {
            for p in &c.patterns {
                match by_pattern.iter_mut().find(|(q, _)| *q == p) {
                    Some((_, ids)) => ids.push(i + 1),
                    None => by_pattern.push((p, vec![i + 1])),
                }
            }
        }
        for (p, ids) in by_pattern {
            out.push_str(p);
            for id in ids {
                out.push_str(&format!("\t{id}"));
            }
            out.push('\n');
        }
        out
    }

    fn categories_of(&self, token: &str, hits: &mut Vec<usize>) {
        hits.clear();
        if let Some(ids) = self.exact.get(token) {
            hits.extend(ids);
        }
        if !self.prefix.is_empty() {
            for (n, (end, _)) in token.char_indices().skip(1).chain([(token.len(), ' ')]).enumerate() {
                if n >= self.max_prefix_len {
                    break;
                }
                if let Some(ids) = self.prefix.get(&token[..end]) {
                    hits.extend(ids);
                }
            }
            // `*` alone matches every token
            if let Some(ids) = self.prefix.get("") {
                hits.extend(ids);
            }
        }
        hits.sort_unstable();
        hits.dedup();
    }

    pub fn counts(&self, text: &str) -> LexiconCounts {
        let tokens = tokenize(text);
        let mut counts = LexiconCounts::zeros(self.len());
        counts.tokens = tokens.len();
        let mut hits = Vec::new();
        for t in &tokens {
            self.categories_of(t, &mut hits);
            for &c in &hits {
                counts.matches[c] += 1;
            }
        }
        counts
    }
}

/// Per-category share of tokens matching that category; all zeros for empty text.
pub fn lexicon_scores(text: &str, lexicon: &Lexicon) -> Vec<f64> {
    lexicon.counts(text).proportions()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_cat() -> Lexicon {
        Lexicon::parse("%\n1\taffect\n2\tthreat\n%\nfeel*\t1\nwatch*\t2\n").unwrap()
    }

    #[test]
    fn proportions_over_tokens() {
        let v = lexicon_scores("I feel watched", &two_cat());
        assert_eq!(v, vec![1.0 / 3.0, 1.0 / 3.0]);
    }

    #[test]
    fn empty_and_unmatched_text() {
        assert_eq!(lexicon_scores("", &two_cat()), vec![0.0, 0.0]);
        let c = two_cat().counts("nothing relevant here");
        assert_eq!(c.tokens, 3);
        assert_eq!(c.proportions(), vec![0.0, 0.0]);
    }

    #[test]
    fn prefix_and_exact_matching() {
        let lex = Lexicon::parse("%\n1 a\n2 b\n%\nfear 1\nfear* 2\nx* 1 2\n").unwrap();
        assert_eq!(lex.counts("fear").matches, vec![1, 1]);
        assert_eq!(lex.counts("fearful").matches, vec![0, 1]);
        assert_eq!(lex.counts("fea").matches, vec![0, 0]);
        // a token counts once per category even when several patterns match
        assert_eq!(lex.counts("xfear").matches, vec![1, 1]);
    }

    #[test]
    fn multibyte_prefixes() {
        let lex = Lexicon::parse("%\n1 a\n%\nnaïv* 1\n").unwrap();
        assert_eq!(lex.counts("Naïveté naive").matches, vec![1]);
    }

    #[test]
    fn round_trips_through_dic_format() {
        let lex = Lexicon::parse("%\n10 affect\n3 threat\n%\nfeel* 10\nafraid 10 3\n").unwrap();
        assert_eq!(lex.names().collect::<Vec<_>>(), ["affect", "threat"]);
        let again = Lexicon::parse(&lex.to_dic()).unwrap();
        assert_eq!(again.categories(), lex.categories());
    }

    #[test]
    fn rejects_malformed_files() {
        assert!(Lexicon::parse("1 a\n%\n").is_err());
        assert!(Lexicon::parse("%\n1 a\n").is_err());
        assert!(Lexicon::parse("%\n1 a\n1 b\n%\n").is_err());
        assert!(Lexicon::parse("%\n1 a\n2 a\n%\n").is_err());
        assert!(Lexicon::parse("%\n1 a\n%\nword 7\n").is_err());
        assert!(Lexicon::parse("%\n%\n").is_err());
    }
}
