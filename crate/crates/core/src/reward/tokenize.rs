use regex::Regex;
use serde::{Deserialize, Serialize};

use super::RewardError;

/// Splits rationale text into countable tokens.
pub trait Tokenizer: Send + Sync {
    fn tokenize<'a>(&self, text: &'a str) -> Vec<&'a str>;

    fn count(&self, text: &str) -> usize {
        self.tokenize(text).len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TokenizerId {
    #[default]
    WhitespacePunct,
    /// Every match of a user-supplied regex is one token.
    Custom,
}

/// Maximal alphanumeric runs, plus every other non-whitespace character as
/// a token of its own.
#[derive(Debug, Clone, Copy, Default)]
pub struct WhitespacePunct;

impl Tokenizer for WhitespacePunct {
    fn tokenize<'a>(&self, text: &'a str) -> Vec<&'a str> {
        let mut out = Vec::new();
        let mut word_start: Option<usize> = None;
        for (i, ch) in text.char_indices() {
            if ch.is_alphanumeric() {
                word_start.get_or_insert(i);
                continue;
            }
            if let Some(s) = word_start.take() {
                out.push(&text[s..i]);
            }
            if !ch.is_whitespace() {
                out.push(&text[i..i + ch.len_utf8()]);
            }
        }
        if let Some(s) = word_start {
            out.push(&text[s..]);
        }
        out
    }

    fn count(&self, text: &str) -> usize {
        let mut n = 0;
        let mut in_word = false;
        for ch in text.chars() {
            if ch.is_alphanumeric() {
                if !in_word {
                    n += 1;
                    in_word = true;
                }
            } else {
                in_word = false;
                if !ch.is_whitespace() {
                    n += 1;
                }
            }
        }
        n
    }
}

#[derive(Debug, Clone)]
pub struct PatternTokenizer {
    re: Regex,
}

impl PatternTokenizer {
    pub fn new(pattern: &str) -> Result<Self, RewardError> {
        let re = Regex::new(pattern)
            .map_err(|e| RewardError::InvalidConfig(format!("token pattern: {e}")))?;
        if re.is_match("") {
            return Err(RewardError::InvalidConfig(
                "token pattern must not match the empty string".into(),
            ));
        }
        Ok(PatternTokenizer { re })
    }
}

impl Tokenizer for PatternTokenizer {
    fn tokenize<'a>(&self, text: &'a str) -> Vec<&'a str> {
        self.re.find_iter(text).map(|m| m.as_str()).collect()
    }
}

pub fn count_tokens(text: &str, tokenizer: &dyn Tokenizer) -> usize {
    tokenizer.count(text)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn whitespace_punct_examples() {
        let t = WhitespacePunct;
        assert_eq!(t.count(""), 0);
        assert_eq!(t.count("the red car."), 4);
        assert_eq!(t.tokenize("the red car."), vec!["the", "red", "car", "."]);
        assert_eq!(t.tokenize("x1,y2 ;; z"), vec!["x1", ",", "y2", ";", ";", "z"]);
        assert_eq!(t.count("  \n\t "), 0);
        assert_eq!(t.tokenize("café—ok"), vec!["café", "—", "ok"]);
    }

    #[test]
    fn twenty_three_token_rationale() {
        // 19 words and 4 punctuation marks
        let s = "The red mug, left of the laptop, is the target; it is the only red object on the desk.";
        let words = s.split(|c: char| !c.is_alphanumeric()).filter(|w| !w.is_empty()).count();
        let punct = s.chars().filter(|c| !c.is_alphanumeric() && !c.is_whitespace()).count();
        assert_eq!(words + punct, 23);
        assert_eq!(count_tokens(s, &WhitespacePunct), 23);
    }

    #[test]
    fn pattern_tokenizer() {
        let t = PatternTokenizer::new(r"\S+").unwrap();
        assert_eq!(t.count("the red car."), 3);
        assert!(PatternTokenizer::new("a*").is_err());
        assert!(PatternTokenizer::new("(").is_err());
    }

    proptest! {
        #[test]
        fn count_matches_tokenize(s in "\\PC{0,60}") {
            prop_assert_eq!(WhitespacePunct.count(&s), WhitespacePunct.tokenize(&s).len());
        }
    }
}
