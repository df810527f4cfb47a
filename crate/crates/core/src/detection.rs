//! Keyword extraction: ask the model for the N keywords answering
//! when/where/who/what/how/why, parse them, and degrade to title-token
//! keywords when the model keeps coming up short.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{KeywordSet, NewsArticle};
use crate::llm::{Gateway, GatewayError, StageTag};
use crate::prompt::{ArticleFields, DEFAULT_TRUNCATE_CHARS};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DetectionConfig {
    pub n_keywords: usize,
    /// Character budget for the body and joined tweets in the prompt.
    pub truncate_chars: usize,
}

impl Default for DetectionConfig {
    fn default() -> Self {
        DetectionConfig {
            n_keywords: 5,
            truncate_chars: DEFAULT_TRUNCATE_CHARS,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum DetectionError {
    #[error("model produced only {found} usable keyword(s)")]
    KeywordShortfall { found: usize },
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error("article has no usable tokens to fall back on")]
    NoKeywords,
}

pub fn render_detection_prompt(article: &NewsArticle, config: &DetectionConfig) -> String {
    let n = config.n_keywords;
    let document = ArticleFields::new(article, config.truncate_chars).document();
    format!(
        "As a news keyword extractor, your task is to extract the {n} most important keywords \
         from a given news text. The keywords should include when, where, who, what, how and \
         why the news happened. Please give me the {n} keywords only. My first suggestion \
         request is {document}."
    )
}

/// Splits a completion on newlines and commas, cleans list markers and
/// quotes, and returns the first `n_keywords` items.
pub fn parse_keywords(raw: &str, config: &DetectionConfig) -> Result<Vec<String>, DetectionError> {
    let items = candidate_keywords(raw);
    if items.len() < config.n_keywords {
        return Err(DetectionError::KeywordShortfall { found: items.len() });
    }
    Ok(items.into_iter().take(config.n_keywords).collect())
}

fn candidate_keywords(raw: &str) -> Vec<String> {
    raw.split(['\n', ','])
        .map(clean_item)
        .filter(|s| !s.is_empty())
        .collect()
}

/// Strips list numbering, bullets and surrounding quotes until nothing
/// changes, so cleaning is idempotent.
fn clean_item(item: &str) -> String {
    let mut s = item.trim();
    loop {
        let before = s;
        s = strip_list_marker(s).trim();
        s = strip_quotes(s).trim();
        if s == before {
            return s.to_string();
        }
    }
}

fn strip_list_marker(s: &str) -> &str {
    if let Some(rest) = s.strip_prefix(['-', '*', '•']) {
        if rest.starts_with(char::is_whitespace) {
            return rest;
        }
        return s;
    }
    let digits = s.bytes().take_while(u8::is_ascii_digit).count();
    if digits > 0 {
        let rest = &s[digits..];
        if let Some(after) = rest.strip_prefix(['.', ')']) {
            if after.starts_with(char::is_whitespace) {
                return after;
            }
        }
    }
    s
}

fn strip_quotes(s: &str) -> &str {
    const PAIRS: [(char, char); 5] = [('"', '"'), ('\'', '\''), ('`', '`'), ('“', '”'), ('‘', '’')];
    for (open, close) in PAIRS {
        if s.len() >= open.len_utf8() + close.len_utf8() && s.starts_with(open) && s.ends_with(close) {
            return &s[open.len_utf8()..s.len() - close.len_utf8()];
        }
    }
    s
}

/// Result of [`detect`]: the keywords plus everything the trace needs.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DetectionOutcome {
    pub keywords: KeywordSet,
    /// Every raw completion, verbatim, one per attempt.
    pub raw_outputs: Vec<String>,
    /// Set when the keyword list was padded from article tokens.
    pub fallback: Option<String>,
}

/// render, complete, parse; one retry on shortfall, then pad from the title
/// (and body, if needed) by token frequency.
pub fn detect(
    article: &NewsArticle,
    config: &DetectionConfig,
    gateway: &Gateway,
) -> Result<DetectionOutcome, DetectionError> {
    let prompt = render_detection_prompt(article, config);
    let mut raw_outputs = Vec::new();
    let mut best: Vec<String> = Vec::new();
    for _ in 0..2 {
        let response = gateway.complete_prompt(StageTag::Detection, prompt.clone())?;
        let parsed = parse_keywords(&response.text, config);
        raw_outputs.push(response.text);
        match parsed {
            Ok(keywords) => {
                return Ok(DetectionOutcome {
                    keywords: KeywordSet::new(&article.id, keywords),
                    raw_outputs,
                    fallback: None,
                })
            }
            Err(_) => {
                let candidates = candidate_keywords(raw_outputs.last().unwrap());
                if candidates.len() >= best.len() {
                    best = candidates;
                }
            }
        }
    }
    let found = best.len();
    let keywords = pad_keywords(best, article, config.n_keywords);
    if keywords.is_empty() {
        return Err(DetectionError::NoKeywords);
    }
    let fallback = format!(
        "keyword shortfall: model gave {found} of {} keyword(s) twice; padded to {} from article tokens",
        config.n_keywords,
        keywords.len()
    );
    Ok(DetectionOutcome {
        keywords: KeywordSet::new(&article.id, keywords),
        raw_outputs,
        fallback: Some(fallback),
    })
}

/// Appends the most frequent non-stopword title tokens, then body tokens,
/// until `n` keywords exist.
pub fn pad_keywords(mut keywords: Vec<String>, article: &NewsArticle, n: usize) -> Vec<String> {
    keywords.truncate(n);
    let mut taken: Vec<String> = keywords.iter().map(|k| k.to_lowercase()).collect();
    for source in [&article.title, &article.body] {
        for token in ranked_tokens(source) {
            if keywords.len() >= n {
                return keywords;
            }
            let lower = token.to_lowercase();
            if !taken.contains(&lower) {
                taken.push(lower);
                keywords.push(token);
            }
        }
    }
    keywords
}

/// Non-stopword tokens by descending case-insensitive frequency; ties keep
/// first-occurrence order. Each token keeps the casing it first appeared with.
fn ranked_tokens(text: &str) -> Vec<String> {
    let mut counts: HashMap<String, (usize, usize, String)> = HashMap::new();
    let tokens = text
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| t.chars().count() >= 2);
    for (pos, token) in tokens.enumerate() {
        let lower = token.to_lowercase();
        if STOPWORDS.contains(&lower.as_str()) {
            continue;
        }
        counts
            .entry(lower)
            .and_modify(|e| e.0 += 1)
            .or_insert((1, pos, token.to_string()));
    }
    let mut ranked: Vec<_> = counts.into_values().collect();
    ranked.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
    ranked.into_iter().map(|(_, _, t)| t).collect()
}

const STOPWORDS: &[&str] = &[
    "a", "about", "above", "after", "again", "against", "all", "am", "an", "and", "any", "are",
    "as", "at", "be", "because", "been", "before", "being", "below", "between", "both", "but",
    "by", "can", "could", "did", "do", "does", "doing", "down", "during", "each", "few", "for",
    "from", "further", "had", "has", "have", "having", "he", "her", "here", "hers", "herself",
    "him", "himself", "his", "how", "if", "in", "into", "is", "it", "its", "itself", "just", "me",
    "more", "most", "my", "myself", "no", "nor", "not", "now", "of", "off", "on", "once", "only",
    "or", "other", "our", "ours", "ourselves", "out", "over", "own", "said", "same", "says", "she",
    "should", "so", "some", "such", "than", "that", "the", "their", "theirs", "them",
    "themselves", "then", "there", "these", "they", "this", "those", "through", "to", "too",
    "under", "until", "up", "very", "was", "we", "were", "what", "when", "where", "which",
    "while", "who", "whom", "why", "will", "with", "would", "you", "your", "yours", "yourself",
    "yourselves",
];
