//! Rendering helpers shared by every prompt builder.

use crate::domain::NewsArticle;

/// Default per-field character budget for body and joined tweets.
pub const DEFAULT_TRUNCATE_CHARS: usize = 2000;

/// An article's prompt fields after truncation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ArticleFields {
    pub title: String,
    pub body: String,
    pub tweets: String,
    /// Names of the fields that were cut to the budget.
    pub truncated: Vec<&'static str>,
}

impl ArticleFields {
    /// Body and joined tweets are each cut to `budget` characters.
    pub fn new(article: &NewsArticle, budget: usize) -> Self {
        let mut truncated = Vec::new();
        let (body, cut) = truncate_chars(&article.body, budget);
        if cut {
            truncated.push("text");
        }
        let joined = article.joined_tweets();
        let (tweets, cut) = truncate_chars(&joined, budget);
        if cut {
            truncated.push("tweet");
        }
        ArticleFields {
            title: article.title.clone(),
            body: body.to_string(),
            tweets: tweets.to_string(),
            truncated,
        }
    }

    /// `news title: …, news text: …, news tweet: …` with every slot present.
    pub fn block(&self) -> String {
        format!(
            "news title: {}, news text: {}, news tweet: {}",
            self.title, self.body, self.tweets
        )
    }

    /// Like [`ArticleFields::block`] but drops the tweet slot when there are
    /// no tweets.
    pub fn document(&self) -> String {
        if self.tweets.is_empty() {
            format!("news title: {}, news text: {}", self.title, self.body)
        } else {
            self.block()
        }
    }
}

/// First `max_chars` characters of `s`, and whether anything was cut.
pub fn truncate_chars(s: &str, max_chars: usize) -> (&str, bool) {
    match s.char_indices().nth(max_chars) {
        Some((idx, _)) => (&s[..idx], true),
        None => (s, false),
    }
}

/// Closes a slot value that ends a template sentence: appends `.` unless the
/// value already ends in terminal punctuation.
pub fn end_sentence(value: &str) -> String {
    let trimmed = value.trim_end();
    if trimmed.ends_with(['.', '!', '?']) {
        trimmed.to_string()
    } else {
        format!("{trimmed}.")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn truncation_counts_characters_not_bytes() {
        assert_eq!(truncate_chars("héllo", 2), ("hé", true));
        assert_eq!(truncate_chars("abc", 3), ("abc", false));
        assert_eq!(truncate_chars("", 0), ("", false));
    }

    #[test]
    fn fields_record_truncation() {
        let a = NewsArticle::new("x", "T", "abcdef").with_tweets(["12", "34"]);
        let f = ArticleFields::new(&a, 4);
        assert_eq!(f.body, "abcd");
        assert_eq!(f.tweets, "12; ");
        assert_eq!(f.truncated, vec!["text", "tweet"]);
        let g = ArticleFields::new(&a, 100);
        assert!(g.truncated.is_empty());
        assert_eq!(g.block(), "news title: T, news text: abcdef, news tweet: 12; 34");
    }

    #[test]
    fn document_omits_empty_tweets() {
        let f = ArticleFields::new(&NewsArticle::new("x", "T", "B"), 100);
        assert_eq!(f.document(), "news title: T, news text: B");
        assert_eq!(f.block(), "news title: T, news text: B, news tweet: ");
    }

    #[test]
    fn sentence_end() {
        assert_eq!(end_sentence("abc"), "abc.");
        assert_eq!(end_sentence("abc."), "abc.");
        assert_eq!(end_sentence("really?  "), "really?");
        assert_eq!(end_sentence(""), ".");
    }
}
