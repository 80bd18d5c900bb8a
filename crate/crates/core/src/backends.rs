//! Generation backends and prompt templates.
//!
//! Two backend kinds sit behind [`Generator`]: an HTTP client speaking the
//! chat-completions JSON protocol, and the deterministic testbed mock
//! ([`crate::testbed::MockGenerator`]).

use std::collections::BTreeMap;
use std::sync::{Arc, Condvar, Mutex};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

use crate::domain::{AgentSpec, DecodingParams};
use crate::seed;
use crate::testbed::{LandscapeConfig, MockGenerator};

pub const QUESTION: &str = "{question}";
pub const PRIOR_RESPONSE: &str = "{prior_response}";
pub const PRIOR_RESPONSES_JOINED: &str = "{prior_responses_joined}";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemplateMode {
    Fresh,
    RefineOne,
    AggregateMany,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptTemplate {
    #[serde(default)]
    pub name: String,
    pub body: String,
    pub mode: TemplateMode,
    /// Separator between priors in `{prior_responses_joined}`.
    #[serde(default = "default_separator")]
    pub separator: String,
}

fn default_separator() -> String {
    "\n---\n".to_string()
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TemplateError {
    #[error("template `{name}` ({mode:?}) expects {expected} prior response(s), got {got}")]
    Arity {
        name: String,
        mode: TemplateMode,
        expected: &'static str,
        got: usize,
    },
    #[error("template `{name}`: {reason}")]
    Invalid { name: String, reason: String },
}

impl PromptTemplate {
    pub fn new(name: impl Into<String>, mode: TemplateMode, body: impl Into<String>) -> Result<Self, TemplateError> {
        let t = Self {
            name: name.into(),
            body: body.into(),
            mode,
            separator: default_separator(),
        };
        t.validate()?;
        Ok(t)
    }

    pub fn default_fresh() -> Self {
        Self::new("fresh", TemplateMode::Fresh, "{question}").expect("built-in template")
    }

    pub fn default_refine() -> Self {
        Self::new(
            "refine",
            TemplateMode::RefineOne,
            "Here is a question and an earlier answer to it. Write an improved answer.\n\n\
             Question:\n{question}\n\nEarlier answer:\n{prior_response}\n\nImproved answer:",
        )
        .expect("built-in template")
    }

    pub fn default_aggregate() -> Self {
        Self::new(
            "aggregate",
            TemplateMode::AggregateMany,
            "Several assistants answered the question below. Read their answers critically and \
             write a single answer that is better than each of them.\n\n\
             Answers:\n{prior_responses_joined}\n\nQuestion:\n{question}\n\nAnswer:",
        )
        .expect("built-in template")
    }

    pub fn validate(&self) -> Result<(), TemplateError> {
        let has = |p: &str| self.body.contains(p);
        let fail = |reason: &str| {
            Err(TemplateError::Invalid {
                name: self.name.clone(),
                reason: reason.to_string(),
            })
        };
        if !has(QUESTION) {
            return fail("body must contain {question}");
        }
        match self.mode {
            TemplateMode::Fresh if has(PRIOR_RESPONSE) || has(PRIOR_RESPONSES_JOINED) => {
                fail("fresh templates take no prior responses")
            }
            TemplateMode::RefineOne if !has(PRIOR_RESPONSE) => fail("refine_one templates need {prior_response}"),
            TemplateMode::RefineOne if has(PRIOR_RESPONSES_JOINED) => {
                fail("refine_one templates cannot use {prior_responses_joined}")
            }
            TemplateMode::AggregateMany if !has(PRIOR_RESPONSES_JOINED) => {
                fail("aggregate_many templates need {prior_responses_joined}")
            }
            TemplateMode::AggregateMany if has(PRIOR_RESPONSE) => {
                fail("aggregate_many templates cannot use {prior_response}")
            }
            _ => Ok(()),
        }
    }
}

/// Substitutes every placeholder of `t` in a single left-to-right pass, so
/// placeholder-like text inside the question or priors is never expanded.
pub fn render_prompt(t: &PromptTemplate, question: &str, priors: &[&str]) -> Result<String, TemplateError> {
    let arity_ok = match t.mode {
        TemplateMode::Fresh => priors.is_empty(),
        TemplateMode::RefineOne => priors.len() == 1,
        TemplateMode::AggregateMany => !priors.is_empty(),
    };
    if !arity_ok {
        return Err(TemplateError::Arity {
            name: t.name.clone(),
            mode: t.mode,
            expected: match t.mode {
                TemplateMode::Fresh => "0",
                TemplateMode::RefineOne => "exactly 1",
                TemplateMode::AggregateMany => "at least 1",
            },
            got: priors.len(),
        });
    }

    let joined;
    let mut subs: Vec<(&str, &str)> = vec![(QUESTION, question)];
    match t.mode {
        TemplateMode::Fresh => {}
        TemplateMode::RefineOne => subs.push((PRIOR_RESPONSE, priors[0])),
        TemplateMode::AggregateMany => {
            joined = priors.join(&t.separator);
            subs.push((PRIOR_RESPONSES_JOINED, &joined));
        }
    }

    let mut out = String::with_capacity(t.body.len() + question.len());
    let mut rest = t.body.as_str();
    'scan: while !rest.is_empty() {
        if rest.starts_with('{') {
            for (key, value) in &subs {
                if let Some(tail) = rest.strip_prefix(key) {
                    out.push_str(value);
                    rest = tail;
                    continue 'scan;
                }
            }
        }
        let ch = rest.chars().next().expect("nonempty");
        out.push(ch);
        rest = &rest[ch.len_utf8()..];
    }
    Ok(out)
}

/// Resolved templates for one run.
#[derive(Debug, Clone, PartialEq)]
pub struct Templates {
    pub fresh: PromptTemplate,
    pub refine_one: PromptTemplate,
    pub aggregate_many: PromptTemplate,
}

impl Default for Templates {
    fn default() -> Self {
        Self {
            fresh: PromptTemplate::default_fresh(),
            refine_one: PromptTemplate::default_refine(),
            aggregate_many: PromptTemplate::default_aggregate(),
        }
    }
}

/// Template selection as written in the config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TemplateConfig {
    pub fresh: String,
    pub refine_one: String,
    pub aggregate_many: String,
    pub library: BTreeMap<String, PromptTemplate>,
}

impl Default for TemplateConfig {
    fn default() -> Self {
        Self {
            fresh: "fresh".into(),
            refine_one: "refine".into(),
            aggregate_many: "aggregate".into(),
            library: BTreeMap::new(),
        }
    }
}

impl TemplateConfig {
    /// Looks a template up by name: the config's library first, then the built-ins.
    pub fn lookup(&self, name: &str) -> Option<PromptTemplate> {
        if let Some(t) = self.library.get(name) {
            let mut t = t.clone();
            if t.name.is_empty() {
                t.name = name.to_string();
            }
            return Some(t);
        }
        match name {
            "fresh" => Some(PromptTemplate::default_fresh()),
            "refine" => Some(PromptTemplate::default_refine()),
            "aggregate" => Some(PromptTemplate::default_aggregate()),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationRecord {
    pub text: String,
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
    pub agent_id: String,
    pub latency_ms: f64,
    pub attempt: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    HttpChat,
    Mock,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendDescriptor {
    pub kind: BackendKind,
    #[serde(default)]
    pub endpoint_url: Option<String>,
    #[serde(default)]
    pub auth_env_var: Option<String>,
    /// For mocks: the landscape table to read agent parameters from (`"testbed"`).
    #[serde(default)]
    pub mock_params_ref: Option<String>,
    #[serde(default = "default_retry_limit")]
    pub retry_limit: u32,
    #[serde(default = "default_timeout_ms")]
    pub timeout_ms: u64,
}

pub(crate) fn default_retry_limit() -> u32 {
    2
}

pub(crate) fn default_timeout_ms() -> u64 {
    120_000
}

impl BackendDescriptor {
    pub fn mock() -> Self {
        Self {
            kind: BackendKind::Mock,
            endpoint_url: None,
            auth_env_var: None,
            mock_params_ref: Some("testbed".into()),
            retry_limit: default_retry_limit(),
            timeout_ms: default_timeout_ms(),
        }
    }

    pub fn http_chat(endpoint_url: impl Into<String>) -> Self {
        Self {
            kind: BackendKind::HttpChat,
            endpoint_url: Some(endpoint_url.into()),
            auth_env_var: None,
            mock_params_ref: None,
            retry_limit: default_retry_limit(),
            timeout_ms: default_timeout_ms(),
        }
    }

    /// Checks the per-kind required fields.
    pub fn check(&self) -> Result<(), String> {
        match self.kind {
            BackendKind::HttpChat if self.endpoint_url.as_deref().is_none_or(str::is_empty) => {
                Err("http_chat backends require endpoint_url".into())
            }
            BackendKind::Mock if self.mock_params_ref.as_deref().is_none_or(str::is_empty) => {
                Err("mock backends require mock_params_ref".into())
            }
            _ if self.timeout_ms == 0 => Err("timeout_ms must be positive".into()),
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BackendError {
    #[error("backend for agent `{agent_id}` unavailable after {attempts} attempt(s): {last_error}")]
    Unavailable {
        agent_id: String,
        attempts: u32,
        last_error: String,
    },
    #[error("backend for agent `{agent_id}` returned an empty completion")]
    EmptyCompletion { agent_id: String },
    #[error("backend for agent `{agent_id}` rejected the request: {reason}")]
    Rejected { agent_id: String, reason: String },
    #[error("mock backend cannot serve agent `{agent_id}`: {reason}")]
    Mock { agent_id: String, reason: String },
    #[error("invalid backend descriptor: {0}")]
    Descriptor(String),
}

/// Anything that turns a rendered prompt into one completion.
pub trait Generator: Send + Sync {
    fn generate(
        &self,
        agent: &AgentSpec,
        rendered_prompt: &str,
        d: &DecodingParams,
    ) -> Result<GenerationRecord, BackendError>;
}

/// Counting semaphore bounding simultaneous network calls.
#[derive(Debug)]
pub struct Throttle {
    permits: Mutex<usize>,
    freed: Condvar,
}

pub struct Permit<'a>(&'a Throttle);

impl Throttle {
    pub fn new(max_concurrency: usize) -> Arc<Self> {
        Arc::new(Self {
            permits: Mutex::new(max_concurrency.max(1)),
            freed: Condvar::new(),
        })
    }

    pub fn acquire(&self) -> Permit<'_> {
        let mut free = self.permits.lock().unwrap_or_else(|e| e.into_inner());
        while *free == 0 {
            free = self.freed.wait(free).unwrap_or_else(|e| e.into_inner());
        }
        *free -= 1;
        Permit(self)
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        let mut free = self.0.permits.lock().unwrap_or_else(|e| e.into_inner());
        *free += 1;
        self.0.freed.notify_one();
    }
}

pub(crate) fn whitespace_tokens(s: &str) -> u64 {
    s.split_whitespace().count() as u64
}

/// Chat-completions client.
pub struct HttpChatBackend {
    endpoint_url: String,
    auth_env_var: Option<String>,
    retry_limit: u32,
    agent: ureq::Agent,
    throttle: Arc<Throttle>,
}

enum CallError {
    /// Worth another attempt.
    Transient(String),
    Fatal(BackendError),
}

impl HttpChatBackend {
    pub fn new(desc: &BackendDescriptor, throttle: Arc<Throttle>) -> Result<Self, BackendError> {
        desc.check().map_err(BackendError::Descriptor)?;
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_millis(desc.timeout_ms)))
            .http_status_as_error(false)
            .build()
            .new_agent();
        Ok(Self {
            endpoint_url: desc.endpoint_url.clone().unwrap_or_default(),
            auth_env_var: desc.auth_env_var.clone(),
            retry_limit: desc.retry_limit,
            agent,
            throttle,
        })
    }

    fn call_once(
        &self,
        agent: &AgentSpec,
        prompt: &str,
        d: &DecodingParams,
    ) -> Result<(String, Option<(u64, u64)>), CallError> {
        let body = json!({
            "model": agent.model_name(),
            "messages": [{"role": "user", "content": prompt}],
            "temperature": d.temperature,
            "top_p": d.top_p,
            "max_tokens": d.max_tokens,
            "seed": d.seed,
        });
        let mut request = self.agent.post(&self.endpoint_url);
        if let Some(var) = &self.auth_env_var {
            if let Ok(token) = std::env::var(var) {
                request = request.header("Authorization", &format!("Bearer {token}"));
            }
        }
        let _permit = self.throttle.acquire();
        let mut response = request
            .send_json(&body)
            .map_err(|e| CallError::Transient(e.to_string()))?;
        let status = response.status().as_u16();
        if status == 429 || status >= 500 {
            return Err(CallError::Transient(format!("HTTP {status}")));
        }
        if status >= 400 {
            let text = response.body_mut().read_to_string().unwrap_or_default();
            return Err(CallError::Fatal(BackendError::Rejected {
                agent_id: agent.agent_id.clone(),
                reason: format!("HTTP {status}: {text}"),
            }));
        }
        let payload: serde_json::Value = response
            .body_mut()
            .read_json()
            .map_err(|e| CallError::Transient(format!("unreadable response body: {e}")))?;
        let text = payload
            .pointer("/choices/0/message/content")
            .and_then(|v| v.as_str())
            .unwrap_or_default()
            .to_string();
        let usage = match (
            payload.pointer("/usage/prompt_tokens").and_then(|v| v.as_u64()),
            payload.pointer("/usage/completion_tokens").and_then(|v| v.as_u64()),
        ) {
            (Some(p), Some(c)) => Some((p, c)),
            _ => None,
        };
        Ok((text, usage))
    }
}

impl Generator for HttpChatBackend {
    fn generate(
        &self,
        agent: &AgentSpec,
        rendered_prompt: &str,
        d: &DecodingParams,
    ) -> Result<GenerationRecord, BackendError> {
        let mut last_error = String::new();
        let attempts = self.retry_limit + 1;
        for attempt in 1..=attempts {
            let call = d.with_seed(seed::attempt_seed(d.seed, attempt));
            let started = Instant::now();
            match self.call_once(agent, rendered_prompt, &call) {
                Ok((text, usage)) => {
                    if text.trim().is_empty() {
                        return Err(BackendError::EmptyCompletion {
                            agent_id: agent.agent_id.clone(),
                        });
                    }
                    let (prompt_tokens, completion_tokens) =
                        usage.unwrap_or_else(|| (whitespace_tokens(rendered_prompt), whitespace_tokens(&text)));
                    return Ok(GenerationRecord {
                        text,
                        prompt_tokens,
                        completion_tokens,
                        agent_id: agent.agent_id.clone(),
                        latency_ms: started.elapsed().as_secs_f64() * 1e3,
                        attempt,
                    });
                }
                Err(CallError::Fatal(e)) => return Err(e),
                Err(CallError::Transient(e)) => last_error = e,
            }
        }
        Err(BackendError::Unavailable {
            agent_id: agent.agent_id.clone(),
            attempts,
            last_error,
        })
    }
}

/// Builds the generator behind a descriptor.
pub fn build_generator(
    desc: &BackendDescriptor,
    landscape: Option<&LandscapeConfig>,
    throttle: Arc<Throttle>,
) -> Result<Arc<dyn Generator>, BackendError> {
    desc.check().map_err(BackendError::Descriptor)?;
    match desc.kind {
        BackendKind::HttpChat => Ok(Arc::new(HttpChatBackend::new(desc, throttle)?)),
        BackendKind::Mock => {
            let landscape = landscape.ok_or_else(|| {
                BackendError::Descriptor(format!(
                    "mock_params_ref `{}` does not resolve to a testbed table",
                    desc.mock_params_ref.as_deref().unwrap_or_default()
                ))
            })?;
            Ok(Arc::new(MockGenerator::new(landscape.clone())))
        }
    }
}

/// One-shot generation through a descriptor.
pub fn generate(
    b: &BackendDescriptor,
    landscape: Option<&LandscapeConfig>,
    agent: &AgentSpec,
    rendered_prompt: &str,
    d: &DecodingParams,
) -> Result<GenerationRecord, BackendError> {
    build_generator(b, landscape, Throttle::new(1))?.generate(agent, rendered_prompt, d)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn fresh_template_substitutes_question() {
        let t = PromptTemplate::new("q", TemplateMode::Fresh, "Q: {question}").unwrap();
        assert_eq!(render_prompt(&t, "hi", &[]).unwrap(), "Q: hi");
    }

    #[test]
    fn refine_template_requires_one_prior() {
        let t = PromptTemplate::default_refine();
        assert!(matches!(
            render_prompt(&t, "hi", &[]),
            Err(TemplateError::Arity { got: 0, .. })
        ));
        assert!(matches!(
            render_prompt(&t, "hi", &["a", "b"]),
            Err(TemplateError::Arity { got: 2, .. })
        ));
        let out = render_prompt(&t, "hi", &["old"]).unwrap();
        assert!(out.contains("hi") && out.contains("old"));
    }

    #[test]
    fn aggregate_requires_some_prior() {
        let t = PromptTemplate::default_aggregate();
        assert!(render_prompt(&t, "hi", &[]).is_err());
    }

    #[test]
    fn placeholders_in_inputs_are_not_expanded() {
        let t = PromptTemplate::new("r", TemplateMode::RefineOne, "{question}|{prior_response}").unwrap();
        let out = render_prompt(&t, "{prior_response}", &["{question}"]).unwrap();
        assert_eq!(out, "{prior_response}|{question}");
    }

    #[test]
    fn template_validation_by_mode() {
        assert!(PromptTemplate::new("f", TemplateMode::Fresh, "{question} {prior_response}").is_err());
        assert!(PromptTemplate::new("r", TemplateMode::RefineOne, "{question}").is_err());
        assert!(PromptTemplate::new("a", TemplateMode::AggregateMany, "{question} {prior_response}").is_err());
        assert!(PromptTemplate::new("a", TemplateMode::AggregateMany, "{prior_responses_joined}").is_err());
        assert!(PromptTemplate::new("a", TemplateMode::AggregateMany, "{question}{prior_responses_joined}").is_ok());
    }

    #[test]
    fn descriptor_requirements() {
        let mut http = BackendDescriptor::http_chat("");
        assert!(http.check().is_err());
        http.endpoint_url = Some("http://localhost:1".into());
        assert!(http.check().is_ok());
        let mut mock = BackendDescriptor::mock();
        assert!(mock.check().is_ok());
        mock.mock_params_ref = None;
        assert!(mock.check().is_err());
    }

    #[test]
    fn throttle_bounds_concurrency() {
        use std::sync::atomic::{AtomicUsize, Ordering};
        let throttle = Throttle::new(2);
        let active = AtomicUsize::new(0);
        let peak = AtomicUsize::new(0);
        std::thread::scope(|s| {
            for _ in 0..8 {
                s.spawn(|| {
                    let _p = throttle.acquire();
                    let now = active.fetch_add(1, Ordering::SeqCst) + 1;
                    peak.fetch_max(now, Ordering::SeqCst);
                    std::thread::sleep(Duration::from_millis(5));
                    active.fetch_sub(1, Ordering::SeqCst);
                });
            }
        });
        assert!(peak.load(Ordering::SeqCst) <= 2);
    }

    proptest! {
        // Containment oracle: every prior appears, in order, and the question verbatim.
        #[test]
        fn aggregate_contains_priors_in_order(
            question in "[a-z ?]{1,20}",
            priors in proptest::collection::vec("[A-Za-z0-9 ]{1,12}", 1..6),
        ) {
            let t = PromptTemplate::default_aggregate();
            let refs: Vec<&str> = priors.iter().map(String::as_str).collect();
            let out = render_prompt(&t, &question, &refs).unwrap();
            prop_assert!(out.contains(&question));
            let mut from = 0;
            for p in &priors {
                let at = out[from..].find(p.as_str());
                prop_assert!(at.is_some());
                from += at.unwrap() + p.len();
            }
            prop_assert!(out.contains(&priors.join("\n---\n")));
        }
    }
}
