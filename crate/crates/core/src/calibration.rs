//! Language-model calibration of a prior distribution.
//!
//! The prior is rendered into a prompt together with the agent and free-text
//! context. A parseable answer replaces the prior (optionally blended); any
//! failure falls back to the prior, so [`calibrate`] never errors.

use alloc::borrow::ToOwned;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt::Write;
use core::sync::atomic::{AtomicUsize, Ordering};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::preference::PreferenceDistribution;
use crate::retrieval::QueryAgent;
use crate::schema::ChoiceCategorySet;

/// Marker for the machine-readable copy of the prior inside a prompt.
pub const PRIOR_JSON_PREFIX: &str = "prior_json: ";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenerationParams {
    pub model: String,
    pub temperature: f64,
    pub top_p: f64,
    pub top_k: u32,
    pub repeat_penalty: f64,
    pub think: bool,
}

impl Default for GenerationParams {
    fn default() -> Self {
        Self {
            model: "qwen3:8b".to_owned(),
            temperature: 0.6,
            top_p: 0.95,
            top_k: 20,
            repeat_penalty: 1.0,
            think: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ProviderError {
    #[error("transport error: {0}")]
    Transport(String),
    #[error("request timed out")]
    Timeout,
    #[error("provider returned status {0}")]
    Status(u16),
    #[error("invalid provider response: {0}")]
    InvalidResponse(String),
    #[error("provider unavailable: {0}")]
    Unavailable(String),
}

pub trait LlmProvider: Send + Sync {
    fn id(&self) -> &str;
    fn complete(&self, prompt: &str, params: &GenerationParams) -> Result<String, ProviderError>;
}

impl<P: LlmProvider + ?Sized> LlmProvider for &P {
    fn id(&self) -> &str {
        (**self).id()
    }

    fn complete(&self, prompt: &str, params: &GenerationParams) -> Result<String, ProviderError> {
        (**self).complete(prompt, params)
    }
}

/// Echoes the prior carried in the prompt, making calibration a no-op.
#[derive(Debug, Clone, Copy, Default)]
pub struct IdentityLlm;

impl LlmProvider for IdentityLlm {
    fn id(&self) -> &str {
        "mock-identity"
    }

    fn complete(&self, prompt: &str, _: &GenerationParams) -> Result<String, ProviderError> {
        prompt
            .lines()
            .find_map(|l| l.strip_prefix(PRIOR_JSON_PREFIX))
            .map(str::to_owned)
            .ok_or_else(|| ProviderError::InvalidResponse("prompt carries no prior".into()))
    }
}

/// Returns the same text for every prompt.
#[derive(Debug, Clone)]
pub struct FixedLlm(pub String);

impl LlmProvider for FixedLlm {
    fn id(&self) -> &str {
        "mock-fixed"
    }

    fn complete(&self, _: &str, _: &GenerationParams) -> Result<String, ProviderError> {
        Ok(self.0.clone())
    }
}

/// Cycles through a list of responses.
#[derive(Debug)]
pub struct ScriptedLlm {
    responses: Vec<Result<String, ProviderError>>,
    next: AtomicUsize,
}

impl ScriptedLlm {
    pub fn new(responses: Vec<Result<String, ProviderError>>) -> Self {
        assert!(!responses.is_empty(), "scripted provider needs a response");
        Self { responses, next: AtomicUsize::new(0) }
    }

    pub fn calls(&self) -> usize {
        self.next.load(Ordering::SeqCst)
    }
}

impl LlmProvider for ScriptedLlm {
    fn id(&self) -> &str {
        "mock-scripted"
    }

    fn complete(&self, _: &str, _: &GenerationParams) -> Result<String, ProviderError> {
        let i = self.next.fetch_add(1, Ordering::SeqCst);
        self.responses[i % self.responses.len()].clone()
    }
}

/// Always fails.
#[derive(Debug, Clone)]
pub struct FailingLlm(pub ProviderError);

impl LlmProvider for FailingLlm {
    fn id(&self) -> &str {
        "mock-failing"
    }

    fn complete(&self, _: &str, _: &GenerationParams) -> Result<String, ProviderError> {
        Err(self.0.clone())
    }
}

pub fn build_prompt(agent: &QueryAgent, prior: &PreferenceDistribution, context: &str) -> String {
    let set = prior.choice_set();
    let mut p = String::new();
    p.push_str("You simulate the travel decision of one person.\n");
    let _ = writeln!(p, "Profile: {}", agent.profile.to_text());
    let _ = writeln!(p, "Trip: purpose {}, starting at hour {}.", agent.desire.trip_purpose, agent.desire.start_time);
    let context = context.trim();
    let _ = writeln!(p, "Context: {}", if context.is_empty() { "none" } else { context });
    let _ = writeln!(p, "Choice: {}. Probabilities observed among similar people:", set.name());
    for (opt, prob) in prior.iter() {
        let _ = writeln!(p, "- {opt}: {prob:.3}");
    }
    let _ = writeln!(
        p,
        "Refine these probabilities for this person and context. Answer with a single JSON object \
         mapping each of the {} option keys to a probability, and nothing else.",
        set.len()
    );
    let _ = writeln!(p, "{PRIOR_JSON_PREFIX}{}", prior.to_json());
    p
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ParseFailure {
    #[error("no JSON object found in response")]
    NoObject,
    #[error("unknown option {0:?}")]
    UnknownKey(String),
    #[error("value for {0:?} is not a number")]
    NotANumber(String),
    #[error("all probabilities are zero")]
    AllZero,
}

fn first_json_object(raw: &str) -> Option<serde_json::Map<String, Value>> {
    raw.match_indices('{').find_map(|(i, _)| {
        let mut stream = serde_json::Deserializer::from_str(&raw[i..]).into_iter::<Value>();
        match stream.next() {
            Some(Ok(Value::Object(map))) => Some(map),
            _ => None,
        }
    })
}

pub fn parse_response(raw: &str, choice_set: &ChoiceCategorySet) -> Result<PreferenceDistribution, ParseFailure> {
    let map = first_json_object(raw).ok_or(ParseFailure::NoObject)?;
    let mut values = vec![0.0; choice_set.len()];
    for (key, value) in &map {
        let index = choice_set.index_of(key).ok_or_else(|| ParseFailure::UnknownKey(key.clone()))?;
        let v = value.as_f64().ok_or_else(|| ParseFailure::NotANumber(key.clone()))?;
        values[index] = v.max(0.0);
    }
    let total: f64 = values.iter().sum();
    if !total.is_finite() || total <= 0.0 {
        return Err(ParseFailure::AllZero);
    }
    // already-normalized answers are kept bit-exact
    if (total - 1.0).abs() > 1e-12 {
        values.iter_mut().for_each(|v| *v /= total);
    }
    PreferenceDistribution::new(choice_set.clone(), values).map_err(|_| ParseFailure::AllZero)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CalibrationSource {
    LlmAccepted,
    FallbackPrior,
    DegenerateUniform,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationResult {
    pub posterior: PreferenceDistribution,
    pub source: CalibrationSource,
    pub raw_response: String,
}

/// Calibrates with the LLM answer replacing the prior.
pub fn calibrate(
    agent: &QueryAgent,
    prior: &PreferenceDistribution,
    context: &str,
    provider: &dyn LlmProvider,
    params: &GenerationParams,
) -> CalibrationResult {
    calibrate_blended(agent, prior, context, provider, params, 1.0)
}

/// `posterior = λ·answer + (1-λ)·prior`; failures keep the prior.
pub fn calibrate_blended(
    agent: &QueryAgent,
    prior: &PreferenceDistribution,
    context: &str,
    provider: &dyn LlmProvider,
    params: &GenerationParams,
    lambda: f64,
) -> CalibrationResult {
    let prompt = build_prompt(agent, prior, context);
    let fallback = |raw_response: String| CalibrationResult {
        posterior: prior.clone(),
        source: if prior.is_degenerate() {
            CalibrationSource::DegenerateUniform
        } else {
            CalibrationSource::FallbackPrior
        },
        raw_response,
    };
    let raw = match provider.complete(&prompt, params) {
        Ok(raw) => raw,
        Err(e) => return fallback(format!("error: {e}")),
    };
    match parse_response(&raw, prior.choice_set()) {
        Ok(answer) => CalibrationResult {
            posterior: answer.blend(prior, lambda.clamp(0.0, 1.0)),
            source: CalibrationSource::LlmAccepted,
            raw_response: raw,
        },
        Err(_) => fallback(raw),
    }
}

impl core::fmt::Display for CalibrationSource {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        f.write_str(match self {
            Self::LlmAccepted => "llm_accepted",
            Self::FallbackPrior => "fallback_prior",
            Self::DegenerateUniform => "degenerate_uniform",
        })
    }
}
