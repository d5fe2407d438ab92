//! Chat-completion client for live models.
//!
//! Confidence uses a two-call self-evaluation protocol: the first call
//! produces an answer, the second asks whether that answer is correct and
//! reads the probability mass on the token `True` from the returned logprobs.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Condvar, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use tracing::warn;

use super::{answer_entropy, Solver, SolverError, SolverResponse};
use crate::config::{ModelScale, StageKind, StageSpec};
use crate::roles;
use crate::types::{Label, Query};

/// Environment variable holding the bearer token for the endpoint.
pub const API_KEY_ENV: &str = "CASCADEFER_API_KEY";

const ATTEMPTS: usize = 3;
const SINGLE_SYSTEM_PROMPT: &str = "You are a careful expert answering multiple-choice questions.";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EndpointConfig {
    /// Base URL; requests go to `{base_url}/chat/completions`.
    pub base_url: String,
    pub model_base: String,
    pub model_large: String,
    #[serde(skip)]
    pub api_key: Option<String>,
    pub temperature: f64,
    pub max_tokens: u32,
    pub top_logprobs: u32,
    pub max_in_flight: usize,
    pub timeout_secs: u64,
}

impl Default for EndpointConfig {
    fn default() -> Self {
        EndpointConfig {
            base_url: "http://127.0.0.1:8000/v1".into(),
            model_base: "base".into(),
            model_large: "large".into(),
            api_key: None,
            temperature: 0.0,
            max_tokens: 512,
            top_logprobs: 5,
            max_in_flight: 8,
            timeout_secs: 60,
        }
    }
}

impl EndpointConfig {
    pub fn with_env_key(mut self) -> Self {
        if let Ok(k) = std::env::var(API_KEY_ENV) {
            if !k.is_empty() {
                self.api_key = Some(k);
            }
        }
        self
    }

    fn model(&self, scale: ModelScale) -> &str {
        match scale {
            ModelScale::Base => &self.model_base,
            ModelScale::Large => &self.model_large,
        }
    }
}

/// Extracts the answer from completion text: the last parenthesized or
/// standalone uppercase letter that is one of `choices`.
pub fn parse_answer(text: &str, choices: &[Label]) -> Option<Label> {
    let chars: Vec<char> = text.chars().collect();
    let mut found = None;
    for (i, &c) in chars.iter().enumerate() {
        let Some(label) = Label::from_char(c) else {
            continue;
        };
        if !choices.contains(&label) {
            continue;
        }
        let before = i.checked_sub(1).map(|p| chars[p]);
        let after = chars.get(i + 1).copied();
        let isolated = |n: Option<char>| n.is_none_or(|n| !n.is_alphanumeric());
        if isolated(before) && isolated(after) {
            found = Some(label);
        }
    }
    found
}

/// Probability mass on `True` in the first generated token's logprobs.
pub fn extract_p_true(response: &Value) -> Result<f64, SolverError> {
    let first = response
        .pointer("/choices/0/logprobs/content/0")
        .ok_or_else(|| {
            SolverError::MissingProbability("response carries no token logprobs".into())
        })?;
    let is_true = |t: &Value| {
        t.as_str()
            .is_some_and(|s| s.trim().eq_ignore_ascii_case("true"))
    };
    let candidates: Vec<&Value> = match first.get("top_logprobs").and_then(Value::as_array) {
        Some(top) if !top.is_empty() => top.iter().collect(),
        _ => vec![first],
    };
    let mut mass = 0.0;
    for c in candidates {
        let lp = c
            .get("logprob")
            .and_then(Value::as_f64)
            .ok_or_else(|| SolverError::MissingProbability("token entry without logprob".into()))?;
        if c.get("token").is_some_and(is_true) {
            mass += lp.exp();
        }
    }
    Ok(mass)
}

fn usage(response: &Value) -> (u64, u64) {
    let get = |k: &str| {
        response
            .pointer(&format!("/usage/{k}"))
            .and_then(Value::as_u64)
            .unwrap_or(0)
    };
    (get("prompt_tokens"), get("completion_tokens"))
}

struct InFlight {
    limit: usize,
    active: Mutex<usize>,
    freed: Condvar,
}

struct Permit<'a>(&'a InFlight);

impl InFlight {
    fn acquire(&self) -> Permit<'_> {
        let mut active = self.active.lock().unwrap_or_else(|e| e.into_inner());
        while *active >= self.limit {
            active = self.freed.wait(active).unwrap_or_else(|e| e.into_inner());
        }
        *active += 1;
        Permit(self)
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.0.active.lock().unwrap_or_else(|e| e.into_inner()) -= 1;
        self.0.freed.notify_one();
    }
}

pub struct RemoteBackend {
    config: EndpointConfig,
    agent: ureq::Agent,
    in_flight: InFlight,
    clamped: AtomicU64,
}

impl RemoteBackend {
    pub fn new(config: EndpointConfig) -> Self {
        let agent = ureq::Agent::new_with_config(
            ureq::Agent::config_builder()
                .timeout_global(Some(Duration::from_secs(config.timeout_secs)))
                .http_status_as_error(false)
                .build(),
        );
        RemoteBackend {
            in_flight: InFlight {
                limit: config.max_in_flight.max(1),
                active: Mutex::new(0),
                freed: Condvar::new(),
            },
            config,
            agent,
            clamped: AtomicU64::new(0),
        }
    }

    /// Number of confidence values that fell outside `[0, 1]` and were clamped.
    pub fn clamped_count(&self) -> u64 {
        self.clamped.load(Ordering::Relaxed)
    }

    fn post(&self, body: &Value) -> Result<Value, SolverError> {
        let url = format!(
            "{}/chat/completions",
            self.config.base_url.trim_end_matches('/')
        );
        let _permit = self.in_flight.acquire();
        let mut last = String::new();
        for _ in 0..ATTEMPTS {
            let mut req = self.agent.post(&url);
            if let Some(key) = &self.config.api_key {
                req = req.header("Authorization", &format!("Bearer {key}"));
            }
            match req.send_json(body) {
                Ok(mut resp) => {
                    let status = resp.status().as_u16();
                    if status >= 500 {
                        last = format!("HTTP {status}");
                        continue;
                    }
                    if status >= 400 {
                        let text = resp.body_mut().read_to_string().unwrap_or_default();
                        return Err(SolverError::InvalidResponse(format!(
                            "HTTP {status}: {text}"
                        )));
                    }
                    return resp
                        .body_mut()
                        .read_json::<Value>()
                        .map_err(|e| SolverError::InvalidResponse(e.to_string()));
                }
                Err(e) => last = e.to_string(),
            }
        }
        Err(SolverError::Network(last))
    }

    fn user_prompt(query: &Query) -> String {
        let letters: Vec<String> = query.choices.iter().map(Label::to_string).collect();
        format!(
            "{}\n\nValid choices: {}.\nThink briefly, then state the final answer as a single letter in parentheses, e.g. ({}).",
            query.prompt,
            letters.join(", "),
            letters.first().map(String::as_str).unwrap_or("A"),
        )
    }

    /// Answer call followed by the self-evaluation call.
    pub fn remote_solve(
        &self,
        query: &Query,
        scale: ModelScale,
        role_prompt: &str,
    ) -> Result<SolverResponse, SolverError> {
        let model = self.config.model(scale);
        let mut messages = vec![
            json!({"role": "system", "content": role_prompt}),
            json!({"role": "user", "content": Self::user_prompt(query)}),
        ];
        let first = self.post(&json!({
            "model": model,
            "messages": messages,
            "temperature": self.config.temperature,
            "max_tokens": self.config.max_tokens,
        }))?;
        let text = first
            .pointer("/choices/0/message/content")
            .and_then(Value::as_str)
            .ok_or_else(|| {
                SolverError::InvalidResponse("completion has no message content".into())
            })?
            .to_string();
        let answer = parse_answer(&text, &query.choices)
            .ok_or_else(|| SolverError::UnparseableAnswer(text.clone()))?;

        messages.push(json!({"role": "assistant", "content": text}));
        messages.push(json!({
            "role": "user",
            "content": format!("Is the proposed answer ({answer}) correct? Reply with exactly one word: True or False."),
        }));
        let second = self.post(&json!({
            "model": model,
            "messages": messages,
            "temperature": self.config.temperature,
            "max_tokens": 1,
            "logprobs": true,
            "top_logprobs": self.config.top_logprobs,
        }))?;
        let p_true = extract_p_true(&second)?;
        let raw_confidence = if (0.0..=1.0).contains(&p_true) {
            p_true
        } else {
            self.clamped.fetch_add(1, Ordering::Relaxed);
            warn!(query = %query.id, p_true, "self-evaluation probability outside [0, 1]; clamping");
            if p_true.is_nan() {
                0.0
            } else {
                p_true.clamp(0.0, 1.0)
            }
        };

        let (in1, out1) = usage(&first);
        let (in2, out2) = usage(&second);
        Ok(SolverResponse {
            answer,
            raw_confidence,
            input_tokens: in1 + in2,
            output_tokens: out1 + out2,
            raw_uncertainty: answer_entropy(raw_confidence, query.choices.len()),
        })
    }
}

impl Solver for RemoteBackend {
    fn solve(
        &self,
        query: &Query,
        stage: &StageSpec,
        role_index: usize,
    ) -> Result<SolverResponse, SolverError> {
        let scale = stage.scale.ok_or_else(|| {
            SolverError::Config(format!("stage {} has no model scale", stage.index))
        })?;
        let prompt = match stage.kind {
            StageKind::Multi => {
                let role = stage.roles.get(role_index).ok_or_else(|| {
                    SolverError::Config(format!("stage {} has no role {role_index}", stage.index))
                })?;
                roles::system_prompt(role)
            }
            _ => SINGLE_SYSTEM_PROMPT.to_string(),
        };
        self.remote_solve(query, scale, &prompt)
    }

    fn concurrent_agents(&self) -> bool {
        true
    }
}
