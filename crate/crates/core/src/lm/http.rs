//! OpenAI-compatible HTTP backend.
//!
//! Scoring uses a completions call with `echo` and `logprobs` and sums the
//! token log-probabilities of the continuation span. The span is located by
//! mapping the condition's character length onto the returned token offsets;
//! a boundary that falls inside a token is a hard error, never approximated.

use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::{GenerateRequest, LmBackend, LmError, ScoreRequest, ScoreResult};

#[derive(Debug, Clone)]
pub struct HttpConfig {
    /// Base URL, e.g. `http://127.0.0.1:8080/v1`.
    pub base_url: String,
    pub model: String,
    pub token: Option<String>,
    pub timeout: Duration,
    pub completions_path: String,
    pub chat_path: String,
}

impl HttpConfig {
    pub fn new(base_url: impl Into<String>, model: impl Into<String>) -> Self {
        Self {
            base_url: base_url.into(),
            model: model.into(),
            token: None,
            timeout: Duration::from_secs(60),
            completions_path: "/completions".into(),
            chat_path: "/chat/completions".into(),
        }
    }

    pub fn with_token(mut self, token: Option<String>) -> Self {
        self.token = token;
        self
    }

    fn url(&self, path: &str) -> String {
        format!("{}{}", self.base_url.trim_end_matches('/'), path)
    }
}

pub struct HttpBackend {
    config: HttpConfig,
    client: reqwest::blocking::Client,
}

#[derive(Serialize)]
struct CompletionsBody<'a> {
    model: &'a str,
    prompt: &'a str,
    max_tokens: usize,
    temperature: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    logprobs: Option<u32>,
    #[serde(skip_serializing_if = "Option::is_none")]
    echo: Option<bool>,
}

#[derive(Deserialize)]
struct CompletionsResponse {
    choices: Vec<CompletionsChoice>,
}

#[derive(Deserialize)]
struct CompletionsChoice {
    #[serde(default)]
    logprobs: Option<LogProbs>,
}

#[derive(Deserialize)]
struct LogProbs {
    tokens: Vec<String>,
    token_logprobs: Vec<Option<f64>>,
    text_offset: Vec<usize>,
}

#[derive(Serialize)]
struct ChatBody<'a> {
    model: &'a str,
    messages: Vec<ChatMessage<'a>>,
    max_tokens: usize,
    temperature: f64,
}

#[derive(Serialize)]
struct ChatMessage<'a> {
    role: &'a str,
    content: &'a str,
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<ChatChoice>,
}

#[derive(Deserialize)]
struct ChatChoice {
    #[serde(default)]
    message: Option<ChatMessageOwned>,
    #[serde(default)]
    text: Option<String>,
}

#[derive(Deserialize)]
struct ChatMessageOwned {
    content: String,
}

impl HttpBackend {
    pub fn new(config: HttpConfig) -> Result<Self, LmError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(config.timeout)
            .build()
            .map_err(|e| LmError::Backend(format!("client build failed: {e}")))?;
        Ok(Self { config, client })
    }

    fn post<B: Serialize, R: for<'de> Deserialize<'de>>(&self, url: &str, body: &B) -> Result<R, LmError> {
        let mut req = self.client.post(url).json(body);
        if let Some(token) = &self.config.token {
            req = req.bearer_auth(token);
        }
        let resp = req
            .send()
            .map_err(|e| LmError::Transport(format!("POST {url}: {e}")))?;
        let status = resp.status();
        if !status.is_success() {
            let text = resp.text().unwrap_or_default();
            return Err(LmError::Backend(format!("{url} returned {status}: {text}")));
        }
        resp.json::<R>()
            .map_err(|e| LmError::Backend(format!("{url}: bad response body: {e}")))
    }
}

/// Sum continuation-span log-probs given echoed per-token offsets.
/// `boundary` is the condition length in characters. Exposed for tests.
pub fn sum_continuation_logprobs(
    tokens: &[String],
    token_logprobs: &[Option<f64>],
    text_offset: &[usize],
    boundary: usize,
) -> Result<ScoreResult, LmError> {
    if tokens.len() != token_logprobs.len() || tokens.len() != text_offset.len() {
        return Err(LmError::Backend(format!(
            "logprob arrays disagree: {} tokens, {} logprobs, {} offsets",
            tokens.len(),
            token_logprobs.len(),
            text_offset.len()
        )));
    }
    let start = match text_offset.iter().position(|&off| off >= boundary) {
        Some(idx) if text_offset[idx] == boundary => idx,
        Some(idx) => {
            return Err(LmError::BoundaryMisaligned(format!(
                "condition ends at char {boundary} but nearest token starts at {}",
                text_offset[idx]
            )));
        }
        None => {
            return Err(LmError::BoundaryMisaligned(format!(
                "no token at or after char {boundary}; echo span too short"
            )));
        }
    };
    let mut log_prob = 0.0f64;
    let mut token_count = 0usize;
    for (i, lp) in token_logprobs.iter().enumerate().skip(start) {
        match lp {
            Some(v) if v.is_finite() => {
                log_prob += v;
                token_count += 1;
            }
            Some(v) => {
                return Err(LmError::Backend(format!("non-finite logprob {v} for token {i}")));
            }
            None => {
                return Err(LmError::BoundaryMisaligned(format!(
                    "token {i} in continuation span has no logprob"
                )));
            }
        }
    }
    if token_count == 0 {
        return Err(LmError::BoundaryMisaligned(
            "continuation span contains no tokens".into(),
        ));
    }
    Ok(ScoreResult { log_prob, token_count })
}

impl LmBackend for HttpBackend {
    fn score(&self, req: &ScoreRequest) -> Result<ScoreResult, LmError> {
        let transcript = req.transcript();
        let body = CompletionsBody {
            model: &self.config.model,
            prompt: &transcript,
            max_tokens: 0,
            temperature: 0.0,
            logprobs: Some(1),
            echo: Some(true),
        };
        let url = self.config.url(&self.config.completions_path);
        let resp: CompletionsResponse = self.post(&url, &body)?;
        let choice = resp
            .choices
            .into_iter()
            .next()
            .ok_or_else(|| LmError::Backend("completions response has no choices".into()))?;
        let logprobs = choice
            .logprobs
            .ok_or_else(|| LmError::Backend("completions response has no logprobs".into()))?;
        let boundary = req.condition.chars().count();
        sum_continuation_logprobs(
            &logprobs.tokens,
            &logprobs.token_logprobs,
            &logprobs.text_offset,
            boundary,
        )
    }

    fn generate(&self, req: &GenerateRequest) -> Result<String, LmError> {
        let body = ChatBody {
            model: &self.config.model,
            messages: vec![ChatMessage {
                role: "user",
                content: &req.prompt,
            }],
            max_tokens: req.max_tokens,
            temperature: req.temperature,
        };
        let url = self.config.url(&self.config.chat_path);
        let resp: ChatResponse = self.post(&url, &body)?;
        let choice = resp
            .choices
            .into_iter()
            .next()
            .ok_or_else(|| LmError::Backend("chat response has no choices".into()))?;
        if let Some(message) = choice.message {
            return Ok(message.content);
        }
        if let Some(text) = choice.text {
            return Ok(text);
        }
        Err(LmError::Backend("chat choice has neither message nor text".into()))
    }

    fn ping(&self) -> Result<(), LmError> {
        let url = self.config.url("");
        // any HTTP response at all counts as reachable
        self.client
            .get(&url)
            .send()
            .map(|_| ())
            .map_err(|e| LmError::Transport(format!("GET {url}: {e}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn owned(tokens: &[&str]) -> Vec<String> {
        tokens.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn sums_exactly_the_continuation_span() {
        // transcript "ab cd": condition "ab ", continuation "cd"
        let got = sum_continuation_logprobs(
            &owned(&["ab", " ", "cd"]),
            &[None, Some(-0.5), Some(-1.25)],
            &[0, 2, 3],
            3,
        )
        .unwrap();
        assert_eq!(got.log_prob, -1.25);
        assert_eq!(got.token_count, 1);
    }

    #[test]
    fn echoed_logprob_sum_matches_manual_sum() {
        let got = sum_continuation_logprobs(
            &owned(&["cond", "x", "y", "z"]),
            &[None, Some(-0.5), Some(-1.0), Some(-0.25)],
            &[0, 4, 5, 6],
            4,
        )
        .unwrap();
        assert_eq!(got.log_prob, -1.75);
        assert_eq!(got.token_count, 3);
    }

    #[test]
    fn straddling_token_is_a_hard_error() {
        // token "bc" spans chars 1..3; boundary 2 falls inside it
        let err = sum_continuation_logprobs(
            &owned(&["a", "bc", "d"]),
            &[None, Some(-0.5), Some(-0.5)],
            &[0, 1, 3],
            2,
        )
        .unwrap_err();
        assert!(matches!(err, LmError::BoundaryMisaligned(_)));
    }

    #[test]
    fn missing_logprob_in_span_is_a_hard_error() {
        let err = sum_continuation_logprobs(
            &owned(&["a", "b"]),
            &[Some(-0.1), None],
            &[0, 1],
            1,
        )
        .unwrap_err();
        assert!(matches!(err, LmError::BoundaryMisaligned(_)));
    }
}
