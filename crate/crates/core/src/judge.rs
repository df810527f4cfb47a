//! Inside and outside judges and the verdict parser they share with the
//! determination stage.

use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{Evidence, Judgement, Label, NewsArticle, Perspective};
use crate::inside::Demonstrations;
use crate::llm::{Gateway, GatewayError, StageTag};
use crate::prompt::{end_sentence, ArticleFields, DEFAULT_TRUNCATE_CHARS};

/// Slot text used when outside investigation found nothing.
pub const NO_EVIDENCE_TEXT: &str = "No additional information was retrieved.";

const TASK_INTRO: &str = "I need your assistance in evaluating the authenticity of a news article. \
I will provide you the news article and additional information about this news.";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JudgeConfig {
    /// Character budget applied to each body and joined-tweet field.
    pub truncate_chars: usize,
    pub retry_on_unparseable: bool,
}

impl Default for JudgeConfig {
    fn default() -> Self {
        JudgeConfig {
            truncate_chars: DEFAULT_TRUNCATE_CHARS,
            retry_on_unparseable: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum JudgeError {
    #[error("no verdict phrase found in model output")]
    UnparseableVerdict,
    #[error("model output unparseable on both attempts")]
    DoubleUnparseable { raw_outputs: Vec<String> },
    #[error("no inside demonstrations")]
    NoDemonstrations,
    #[error(transparent)]
    Gateway(#[from] GatewayError),
}

/// A rendered prompt plus the article fields that had to be truncated.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RenderedPrompt {
    pub text: String,
    pub truncated: Vec<String>,
}

fn verdict_phrase(label: Label) -> String {
    format!("[This is {label} news]")
}

/// Inside-judge prompt: instruction, interleaved demonstrations, then the
/// target article with an empty output slot.
pub fn render_inside_prompt(
    article: &NewsArticle,
    demos: &Demonstrations,
    config: &JudgeConfig,
) -> Result<RenderedPrompt, JudgeError> {
    if demos.is_empty() {
        return Err(JudgeError::NoDemonstrations);
    }
    let mut truncated = Vec::new();
    let mut text = format!(
        "{TASK_INTRO} You have to answer that [This is fake news] or [This is real news] in the \
         first sentence of your output and give your explanation about [target news].\n\n\
         I will give you some examples of news. Your answer after [output] should be consistent \
         with the following examples:\n\n"
    );
    for (i, demo) in demos.interleaved().into_iter().enumerate() {
        let fields = ArticleFields::new(&demo.article, config.truncate_chars);
        truncated.extend(fields.truncated.iter().map(|f| format!("example {}: {f}", demo.article.id)));
        text.push_str(&format!(
            "[example {}]:\n[input news]: [{}]\n[output]: {}\n\n",
            i + 1,
            fields.block(),
            verdict_phrase(demo.label)
        ));
    }
    let target = ArticleFields::new(article, config.truncate_chars);
    truncated.extend(target.truncated.iter().map(|f| format!("target: {f}")));
    text.push_str(&format!("[target news]:\n[input news]: [{}]\n[output]:", target.block()));
    Ok(RenderedPrompt { text, truncated })
}

/// Outside-judge prompt: instruction, the article, then the evidence.
pub fn render_outside_prompt(article: &NewsArticle, evidence: &Evidence, config: &JudgeConfig) -> RenderedPrompt {
    let fields = ArticleFields::new(article, config.truncate_chars);
    let info = if evidence.is_empty() {
        NO_EVIDENCE_TEXT
    } else {
        evidence.snippet.as_str()
    };
    let text = format!(
        "{TASK_INTRO} Please analyze the following news and give your decision. The first \
         sentence of your [Decision] must be [This is fake news] or [This is real news].\n\n\
         The news article is: {}\n\n\
         The additional information is: {}\n\n\
         [Decision]:",
        end_sentence(&fields.block()),
        end_sentence(info)
    );
    RenderedPrompt {
        text,
        truncated: fields.truncated.iter().map(|f| format!("target: {f}")).collect(),
    }
}

fn verdict_regex() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(r"(?i)\[?\s*\bthis\s+is\s+(fake|real)\s+news\b\s*\]?[.:,;!]?").expect("valid regex")
    })
}

/// Finds the earliest "this is fake/real news" phrase (case-insensitive,
/// brackets optional). The explanation is the text with that marker removed.
pub fn parse_verdict(raw: &str) -> Result<(Label, String), JudgeError> {
    let m = verdict_regex()
        .captures(raw)
        .ok_or(JudgeError::UnparseableVerdict)?;
    let label = if m[1].eq_ignore_ascii_case("fake") {
        Label::Fake
    } else {
        Label::Real
    };
    let whole = m.get(0).expect("group 0");
    let explanation = format!("{} {}", raw[..whole.start()].trim(), raw[whole.end()..].trim());
    Ok((label, explanation.trim().to_string()))
}

/// Calls the model with `prompt`, parsing the verdict; one retry with the
/// same prompt when the output is unparseable.
fn judge_with_retry(
    prompt: &str,
    stage: StageTag,
    perspective: Perspective,
    gateway: &Gateway,
    config: &JudgeConfig,
) -> Result<Judgement, JudgeError> {
    let attempts = if config.retry_on_unparseable { 2 } else { 1 };
    let mut raw_outputs = Vec::new();
    for _ in 0..attempts {
        let response = gateway.complete_prompt(stage, prompt)?;
        if let Ok((verdict, explanation)) = parse_verdict(&response.text) {
            return Ok(Judgement {
                verdict,
                explanation,
                perspective,
                raw_model_output: response.text,
            });
        }
        raw_outputs.push(response.text);
    }
    if attempts == 1 {
        Err(JudgeError::UnparseableVerdict)
    } else {
        Err(JudgeError::DoubleUnparseable { raw_outputs })
    }
}

pub fn inside_judge(
    article: &NewsArticle,
    demos: &Demonstrations,
    gateway: &Gateway,
    config: &JudgeConfig,
) -> Result<Judgement, JudgeError> {
    let prompt = render_inside_prompt(article, demos, config)?;
    judge_with_retry(&prompt.text, StageTag::InsideJudge, Perspective::Inside, gateway, config)
}

pub fn outside_judge(
    article: &NewsArticle,
    evidence: &Evidence,
    gateway: &Gateway,
    config: &JudgeConfig,
) -> Result<Judgement, JudgeError> {
    let prompt = render_outside_prompt(article, evidence, config);
    judge_with_retry(&prompt.text, StageTag::OutsideJudge, Perspective::Outside, gateway, config)
}
