//! Four-way description judging through an external chat-completion endpoint.

use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::EvalError;

/// Judge prompt with four `{}` slots, one per assistant.
pub const JUDGE_TEMPLATE: &str = "You are required to score the performance of four AI assistants in describing a given image. You should pay extra attention to the hallucination, which refers to the part of descriptions that are inconsistent with the image content, such as claiming the existence of something not present in the image or describing incorrectly in terms of the counts, positions, or colors of objects in the image. Please rate the responses of the assistants on a scale of 1 to 10, where a higher score indicates better performance, according to the following criteria:

1: Correctness: whether the response is accurate with respect to the image content. Responses with fewer hallucinations should be given higher scores.
2: Detailedness: whether the response is rich in necessary details. Note that hallucinated descriptions should not count as necessary details.

Please output the scores for each criterion, containing only four values indicating the scores for Assistant 1, 2, 3 and 4, respectively. The four scores are separated by a space. Following the scores, please provide an explanation of your evaluation, avoiding any potential bias and ensuring that the order in which the responses were presented does not affect your judgment.

[Assistant 1]
{}
[End of Assistant 1]

[Assistant 2]
{}
[End of Assistant 2]

[Assistant 3]
{}
[End of Assistant 3]

[Assistant 4]
{}
[End of Assistant 4]

Output format:
Correctness: <Scores of the four answers>
Reason:

Detailedness: <Scores of the four answers>
Reason:";

pub const ASSISTANTS: usize = 4;
/// Stands in for a missing assistant response.
pub const EMPTY_SLOT: &str = "(no response)";
pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(30);

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct JudgeScore {
    pub correctness: [f64; ASSISTANTS],
    pub detailedness: [f64; ASSISTANTS],
}

/// Fills the template slots in order. Fewer than four descriptions are padded
/// with [`EMPTY_SLOT`].
pub fn render_judge_prompt(descriptions: &[&str]) -> Result<String, EvalError> {
    if descriptions.len() > ASSISTANTS {
        return Err(EvalError::JudgeConfig(format!(
            "at most {ASSISTANTS} descriptions, got {}",
            descriptions.len()
        )));
    }
    let mut parts = JUDGE_TEMPLATE.split("{}");
    let mut out = parts.next().expect("template has text").to_string();
    for (i, rest) in parts.enumerate() {
        out.push_str(descriptions.get(i).copied().unwrap_or(EMPTY_SLOT));
        out.push_str(rest);
    }
    Ok(out)
}

fn parse_scores(raw: &str, key: &str) -> Result<[f64; ASSISTANTS], EvalError> {
    let fail = |reason: String| EvalError::JudgeParse {
        raw: raw.to_string(),
        reason,
    };
    let prefix = format!("{key}:");
    let line = raw
        .lines()
        .map(str::trim)
        .find(|l| l.starts_with(&prefix))
        .ok_or_else(|| fail(format!("no {key} line")))?;
    let vals: Vec<f64> = line[prefix.len()..]
        .split_whitespace()
        .map(|t| t.parse::<f64>().map_err(|_| fail(format!("bad {key} score {t:?}"))))
        .collect::<Result<_, _>>()?;
    if vals.len() != ASSISTANTS {
        return Err(fail(format!("{key}: expected {ASSISTANTS} scores, got {}", vals.len())));
    }
    for v in &vals {
        if !(0.0..=10.0).contains(v) || (v * 2.0).fract() != 0.0 {
            return Err(fail(format!("{key} score {v} is not a half-step value in [0, 10]")));
        }
    }
    Ok([vals[0], vals[1], vals[2], vals[3]])
}

/// Reads the "Correctness:" and "Detailedness:" score lines of a reply.
pub fn parse_judge_reply(raw: &str) -> Result<JudgeScore, EvalError> {
    Ok(JudgeScore {
        correctness: parse_scores(raw, "Correctness")?,
        detailedness: parse_scores(raw, "Detailedness")?,
    })
}

/// Blocking HTTP client for the judge endpoint.
#[derive(Debug, Clone)]
pub struct JudgeClient {
    pub endpoint: String,
    pub token: Option<String>,
    pub model: Option<String>,
    pub timeout: Duration,
}

impl JudgeClient {
    /// Reads `JUDGE_ENDPOINT` and, if present, `JUDGE_TOKEN`.
    pub fn from_env() -> Result<Self, EvalError> {
        let endpoint = std::env::var("JUDGE_ENDPOINT")
            .map_err(|_| EvalError::JudgeConfig("JUDGE_ENDPOINT is not set".into()))?;
        Ok(Self {
            endpoint,
            token: std::env::var("JUDGE_TOKEN").ok(),
            model: None,
            timeout: DEFAULT_TIMEOUT,
        })
    }

    pub fn request_body(&self, prompt: &str) -> serde_json::Value {
        let mut body = serde_json::json!({
            "messages": [{"role": "user", "content": prompt}],
        });
        if let Some(m) = &self.model {
            body["model"] = serde_json::Value::String(m.clone());
        }
        body
    }

    /// Sends the rendered prompt and parses the reply. The reply text is taken
    /// from `choices[0].message.content` when the body is a chat-completion
    /// response, otherwise the body is used as is.
    pub fn judge(&self, descriptions: &[&str]) -> Result<JudgeScore, EvalError> {
        let prompt = render_judge_prompt(descriptions)?;
        let client = reqwest::blocking::Client::builder()
            .timeout(self.timeout)
            .build()
            .map_err(|e| EvalError::JudgeTransport(e.to_string()))?;
        let mut req = client.post(&self.endpoint).json(&self.request_body(&prompt));
        if let Some(t) = &self.token {
            req = req.bearer_auth(t);
        }
        let resp = req.send().map_err(|e| EvalError::JudgeTransport(e.to_string()))?;
        let status = resp.status();
        let text = resp.text().map_err(|e| EvalError::JudgeTransport(e.to_string()))?;
        if !status.is_success() {
            return Err(EvalError::JudgeTransport(format!("HTTP {status}: {text}")));
        }
        let content = serde_json::from_str::<serde_json::Value>(&text)
            .ok()
            .and_then(|v| {
                v.pointer("/choices/0/message/content")
                    .and_then(|c| c.as_str())
                    .map(str::to_string)
            })
            .unwrap_or(text);
        parse_judge_reply(&content)
    }
}
