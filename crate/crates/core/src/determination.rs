//! Final decision: agreement short-circuit, otherwise one selector call over
//! both views; single-perspective fallback when a judge is missing.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{DecidedBy, Judgement, Label, NewsArticle, Perspective, Verdict};
use crate::judge::{parse_verdict, JudgeConfig};
use crate::llm::{Gateway, StageTag};
use crate::prompt::{end_sentence, ArticleFields};

/// Which judgement wins when the selector cannot resolve a conflict.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ConflictFallback {
    #[default]
    Outside,
    Inside,
}

impl std::str::FromStr for ConflictFallback {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "outside" => Ok(ConflictFallback::Outside),
            "inside" => Ok(ConflictFallback::Inside),
            other => Err(format!("expected \"outside\" or \"inside\", got {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum DeterminationError {
    #[error("neither judge produced a verdict")]
    NoJudgements,
}

/// A verdict plus the stage error to record when the selector failed.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DeterminationOutcome {
    pub verdict: Verdict,
    pub stage_error: Option<String>,
}

pub fn render_determination_prompt(
    article: &NewsArticle,
    inside: &Judgement,
    outside: &Judgement,
    config: &JudgeConfig,
) -> String {
    let fields = ArticleFields::new(article, config.truncate_chars);
    format!(
        "I need your assistance in evaluating the authenticity of a news article. This news \
         article include news title, news text and news tweet.\n\n\
         The news article is: {}\n\n\
         There are two different views on this news article.\n\n\
         Some people believe that [This is {} news], their explanation is: {}\n\n\
         Others believe that [This is {} news], their explanation is: {}\n\n\
         Please judge their opinion and give your decision. The first sentence after \
         [Explanation] must be [This is fake news] or [This is real news], and then give your \
         explanation.\n\n\
         [Explanation]:",
        end_sentence(&fields.block()),
        inside.verdict,
        end_sentence(&inside.explanation),
        outside.verdict,
        end_sentence(&outside.explanation),
    )
}

pub fn determine(
    article: &NewsArticle,
    inside: Option<&Judgement>,
    outside: Option<&Judgement>,
    gateway: &Gateway,
    fallback: ConflictFallback,
    config: &JudgeConfig,
) -> Result<DeterminationOutcome, DeterminationError> {
    let single = |label: Label, stage_error: Option<String>| DeterminationOutcome {
        verdict: Verdict {
            final_label: label,
            decided_by: DecidedBy::SinglePerspectiveFallback,
            raw_model_output: None,
        },
        stage_error,
    };
    let (inside, outside) = match (inside, outside) {
        (None, None) => return Err(DeterminationError::NoJudgements),
        (Some(j), None) | (None, Some(j)) => return Ok(single(j.verdict, None)),
        (Some(i), Some(o)) => (i, o),
    };
    debug_assert_eq!(inside.perspective, Perspective::Inside);
    debug_assert_eq!(outside.perspective, Perspective::Outside);
    if inside.verdict == outside.verdict {
        return Ok(DeterminationOutcome {
            verdict: Verdict {
                final_label: inside.verdict,
                decided_by: DecidedBy::Agreement,
                raw_model_output: None,
            },
            stage_error: None,
        });
    }

    let prompt = render_determination_prompt(article, inside, outside, config);
    let attempts = if config.retry_on_unparseable { 2 } else { 1 };
    let mut failure = String::new();
    for _ in 0..attempts {
        match gateway.complete_prompt(StageTag::Determination, prompt.clone()) {
            Ok(response) => match parse_verdict(&response.text) {
                Ok((label, _)) => {
                    return Ok(DeterminationOutcome {
                        verdict: Verdict {
                            final_label: label,
                            decided_by: DecidedBy::DeterminationSelector,
                            raw_model_output: Some(response.text),
                        },
                        stage_error: None,
                    })
                }
                Err(e) => failure = e.to_string(),
            },
            Err(e) => {
                failure = e.to_string();
                break;
            }
        }
    }
    let (preferred, name) = match fallback {
        ConflictFallback::Outside => (outside, "outside"),
        ConflictFallback::Inside => (inside, "inside"),
    };
    Ok(single(
        preferred.verdict,
        Some(format!("determination selector failed ({failure}); used {name} judgement")),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::llm::{MockBackend, MockFixture, RetryPolicy};
    use std::sync::Arc;
    use std::time::Duration;

    fn j(label: Label, p: Perspective, why: &str) -> Judgement {
        Judgement {
            verdict: label,
            explanation: why.into(),
            perspective: p,
            raw_model_output: String::new(),
        }
    }

    fn gateway(fixtures: Vec<MockFixture>) -> Gateway {
        Gateway::new(Arc::new(MockBackend::new(fixtures))).with_retry(RetryPolicy {
            limit: 0,
            base_backoff: Duration::ZERO,
        })
    }

    fn article() -> NewsArticle {
        NewsArticle::new("a", "T", "B")
    }

    fn run(gw: &Gateway, i: Option<Label>, o: Option<Label>) -> Result<DeterminationOutcome, DeterminationError> {
        let ij = i.map(|l| j(l, Perspective::Inside, "in"));
        let oj = o.map(|l| j(l, Perspective::Outside, "out"));
        determine(&article(), ij.as_ref(), oj.as_ref(), gw, ConflictFallback::Outside, &JudgeConfig::default())
    }

    #[test]
    fn prompt_orders_inside_then_outside() {
        let p = render_determination_prompt(
            &article(),
            &j(Label::Fake, Perspective::Inside, "inside reason"),
            &j(Label::Real, Perspective::Outside, "outside reason."),
            &JudgeConfig::default(),
        );
        let some = p.find("Some people believe that [This is fake news], their explanation is: inside reason.").unwrap();
        let others = p.find("Others believe that [This is real news], their explanation is: outside reason.\n").unwrap();
        assert!(some < others);
        assert!(p.ends_with("\n\n[Explanation]:"));
    }

    #[test]
    fn prompt_with_empty_explanation_keeps_template() {
        let p = render_determination_prompt(
            &article(),
            &j(Label::Fake, Perspective::Inside, ""),
            &j(Label::Real, Perspective::Outside, "x"),
            &JudgeConfig::default(),
        );
        assert!(p.contains("Some people believe that [This is fake news], their explanation is: .\n"));
    }

    #[test]
    fn agreement_makes_no_call() {
        let gw = gateway(vec![]);
        let out = run(&gw, Some(Label::Fake), Some(Label::Fake)).unwrap();
        assert_eq!(out.verdict.final_label, Label::Fake);
        assert_eq!(out.verdict.decided_by, DecidedBy::Agreement);
        assert_eq!(gw.ledger_snapshot().determination.requests, 0);
    }

    #[test]
    fn conflict_calls_selector_once() {
        let gw = gateway(vec![MockFixture::fallback(StageTag::Determination, "[This is fake news] inside wins")]);
        let out = run(&gw, Some(Label::Fake), Some(Label::Real)).unwrap();
        assert_eq!(out.verdict.final_label, Label::Fake);
        assert_eq!(out.verdict.decided_by, DecidedBy::DeterminationSelector);
        assert_eq!(out.verdict.raw_model_output.as_deref(), Some("[This is fake news] inside wins"));
        assert_eq!(gw.ledger_snapshot().determination.requests, 1);
    }

    #[test]
    fn single_perspective() {
        let gw = gateway(vec![]);
        let out = run(&gw, None, Some(Label::Real)).unwrap();
        assert_eq!(out.verdict.final_label, Label::Real);
        assert_eq!(out.verdict.decided_by, DecidedBy::SinglePerspectiveFallback);
        let out = run(&gw, Some(Label::Fake), None).unwrap();
        assert_eq!(out.verdict.final_label, Label::Fake);
        assert_eq!(run(&gw, None, None), Err(DeterminationError::NoJudgements));
    }

    #[test]
    fn unparseable_selector_falls_back_to_preferred() {
        let gw = gateway(vec![MockFixture::fallback(StageTag::Determination, "unsure")]);
        let out = run(&gw, Some(Label::Fake), Some(Label::Real)).unwrap();
        assert_eq!(out.verdict.final_label, Label::Real);
        assert_eq!(out.verdict.decided_by, DecidedBy::SinglePerspectiveFallback);
        assert!(out.stage_error.unwrap().contains("used outside judgement"));
        assert_eq!(gw.ledger_snapshot().determination.requests, 2);

        let ij = j(Label::Fake, Perspective::Inside, "");
        let oj = j(Label::Real, Perspective::Outside, "");
        let out = determine(&article(), Some(&ij), Some(&oj), &gw, ConflictFallback::Inside, &JudgeConfig::default()).unwrap();
        assert_eq!(out.verdict.final_label, Label::Fake);
    }

    #[test]
    fn selector_transport_failure_falls_back() {
        let gw = gateway(vec![MockFixture::failing(StageTag::Determination, "transport")]);
        let out = run(&gw, Some(Label::Real), Some(Label::Fake)).unwrap();
        assert_eq!(out.verdict.final_label, Label::Fake);
        assert!(out.stage_error.is_some());
    }

    #[test]
    fn agreement_is_never_inverted() {
        for label in Label::ALL {
            let gw = gateway(vec![MockFixture::fallback(StageTag::Determination, "[This is fake news]")]);
            let out = run(&gw, Some(label), Some(label)).unwrap();
            assert_eq!(out.verdict.final_label, label);
        }
    }

    #[test]
    fn fallback_parsing() {
        assert_eq!("Inside".parse::<ConflictFallback>(), Ok(ConflictFallback::Inside));
        assert!("both".parse::<ConflictFallback>().is_err());
    }
}
