//! Chat providers, prompt builders, response parsing and the bridge loop.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::{Path, PathBuf};
use std::sync::{Arc, OnceLock};
use std::time::Duration;

use regex::Regex;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::archive::{Archive, Experiment};
use crate::atlas::RoutingOutcome;
use crate::composer::{fit_target, ComposeError, ComposerConfig};
use crate::evaluator::sign;
use crate::representation::{build_feature, Embedder, EmbedError, FeatureMatrix, FeatureVector, TextItem, TransportError};

pub const BRIDGE_TEMPLATE: &str = include_str!("../assets/bridge_prompt.txt");
pub const RECONCILE_TEMPLATE: &str = include_str!("../assets/reconcile_prompt.txt");

pub const BRIDGE_SLOTS: [&str; 4] = ["{IV}", "{DV}", "{literature}", "{listofknown}"];
pub const RECONCILE_SLOTS: [&str; 2] = ["{Predicted result based on composition}", "{Results of contributing experiments}"];

/// Substituted for an empty avoid-duplication list.
pub const EMPTY_LIST_MARKER: &str = "(none)";
pub const CHAT_KEY_ENV: &str = "EXATLAS_CHAT_KEY";
pub const DEFAULT_CHAT_ENDPOINT: &str = "http://127.0.0.1:8080/v1/chat/completions";
pub const DEFAULT_BRIDGE_MODEL: &str = "deepseek-r1";
pub const DEFAULT_RECONCILE_MODEL: &str = "o3";
pub const DEFAULT_MAX_ROUNDS: usize = 3;

#[derive(Debug, Error)]
pub enum GenError {
    #[error("chat transport: {message}")]
    Transport { message: String, retryable: bool },
    #[error("no scripted response for prompt hash {0}")]
    NoScript(String),
    #[error("transcript {path}:{line}: {message}")]
    Transcript { path: String, line: usize, message: String },
    #[error("malformed response: {0}")]
    Malformed(String),
    #[error("response contains no proposals")]
    EmptyResponse,
    #[error("bridge prompt needs at least one literature item")]
    EmptyLiterature,
    #[error("{0:?} is not a conflict outcome")]
    NotConflict(String),
    #[error("no effect for contributing experiment {0:?}")]
    MissingSource(String),
    #[error("{0:?} is composable; bridging needs a gap target")]
    NotGap(String),
    #[error("unknown experiment {0:?}")]
    UnknownTarget(String),
    #[error("max_rounds must be at least 1")]
    Rounds,
    #[error(transparent)]
    Compose(#[from] ComposeError),
    #[error(transparent)]
    Embed(#[from] EmbedError),
    #[error("audit log: {0}")]
    Io(#[from] std::io::Error),
}

impl GenError {
    fn is_retryable(&self) -> bool {
        matches!(self, Self::Transport { retryable: true, .. })
    }
}

impl From<TransportError> for GenError {
    fn from(e: TransportError) -> Self {
        Self::Transport {
            message: e.message,
            retryable: e.retryable,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub prompt: String,
    pub temperature: f64,
}

impl ChatRequest {
    pub fn new(prompt: String) -> Self {
        Self { prompt, temperature: 0.0 }
    }

    pub fn hash(&self) -> String {
        prompt_hash(&self.prompt)
    }
}

/// Hex SHA-256 of the prompt text.
pub fn prompt_hash(prompt: &str) -> String {
    hex::encode(Sha256::digest(prompt.as_bytes()))
}

pub trait ChatProvider: Send + Sync {
    fn complete(&self, request: &ChatRequest) -> Result<String, GenError>;
}

/// One line of a scripted transcript.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TranscriptRecord {
    pub prompt_hash: String,
    pub response: String,
}

/// Replays stored responses keyed by prompt hash.
#[derive(Debug, Clone, Default)]
pub struct ScriptedStub {
    responses: HashMap<String, String>,
}

impl ScriptedStub {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_response(mut self, prompt: &str, response: impl Into<String>) -> Self {
        self.responses.insert(prompt_hash(prompt), response.into());
        self
    }

    pub fn from_records(records: impl IntoIterator<Item = TranscriptRecord>) -> Self {
        Self {
            responses: records.into_iter().map(|r| (r.prompt_hash, r.response)).collect(),
        }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, GenError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)?;
        let mut records = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let rec: TranscriptRecord = serde_json::from_str(line).map_err(|e| GenError::Transcript {
                path: path.display().to_string(),
                line: i + 1,
                message: e.to_string(),
            })?;
            records.push(rec);
        }
        Ok(Self::from_records(records))
    }

    pub fn len(&self) -> usize {
        self.responses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.responses.is_empty()
    }
}

impl ChatProvider for ScriptedStub {
    fn complete(&self, request: &ChatRequest) -> Result<String, GenError> {
        let h = request.hash();
        self.responses.get(&h).cloned().ok_or(GenError::NoScript(h))
    }
}

pub fn write_transcript(path: impl AsRef<Path>, records: &[TranscriptRecord]) -> Result<(), GenError> {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r).map_err(|e| GenError::Malformed(e.to_string()))?);
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ChatConfig {
    pub endpoint: String,
    pub model: String,
    /// Environment variable holding the API key.
    pub api_key_env: String,
    pub temperature: f64,
    pub max_retries: u32,
    pub backoff_ms: u64,
    pub timeout_secs: u64,
}

impl Default for ChatConfig {
    fn default() -> Self {
        Self {
            endpoint: DEFAULT_CHAT_ENDPOINT.to_string(),
            model: DEFAULT_BRIDGE_MODEL.to_string(),
            api_key_env: CHAT_KEY_ENV.to_string(),
            temperature: 0.0,
            max_retries: 3,
            backoff_ms: 1000,
            timeout_secs: 300,
        }
    }
}

/// Sends one chat completion body and returns the parsed JSON reply.
pub trait ChatTransport: Send + Sync {
    fn post(&self, body: &serde_json::Value) -> Result<serde_json::Value, TransportError>;
}

pub struct HttpChatTransport {
    endpoint: String,
    api_key: Option<String>,
    timeout: Duration,
}

impl HttpChatTransport {
    pub fn new(endpoint: impl Into<String>, api_key: Option<String>, timeout: Duration) -> Self {
        Self {
            endpoint: endpoint.into(),
            api_key,
            timeout,
        }
    }
}

impl ChatTransport for HttpChatTransport {
    fn post(&self, body: &serde_json::Value) -> Result<serde_json::Value, TransportError> {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(self.timeout))
            .http_status_as_error(false)
            .build()
            .into();
        let mut req = agent.post(&self.endpoint);
        if let Some(key) = &self.api_key {
            req = req.header("Authorization", &format!("Bearer {key}"));
        }
        let mut resp = req.send_json(body).map_err(|e| TransportError {
            message: e.to_string(),
            retryable: true,
        })?;
        let status = resp.status().as_u16();
        if status != 200 {
            let text = resp.body_mut().read_to_string().unwrap_or_default();
            return Err(TransportError {
                message: format!("HTTP {status}: {text}"),
                retryable: status == 429 || status >= 500,
            });
        }
        resp.body_mut().read_json().map_err(|e| TransportError {
            message: format!("bad response body: {e}"),
            retryable: false,
        })
    }
}

/// OpenAI-compatible chat completions client with retry and backoff.
pub struct RemoteChat {
    config: ChatConfig,
    transport: Arc<dyn ChatTransport>,
}

impl RemoteChat {
    pub fn new(config: ChatConfig, transport: Arc<dyn ChatTransport>) -> Self {
        Self { config, transport }
    }

    pub fn http(config: ChatConfig) -> Self {
        let key = std::env::var(&config.api_key_env).ok();
        let transport = HttpChatTransport::new(config.endpoint.clone(), key, Duration::from_secs(config.timeout_secs));
        Self::new(config, Arc::new(transport))
    }
}

fn extract_content(reply: &serde_json::Value) -> Result<String, GenError> {
    reply
        .pointer("/choices/0/message/content")
        .and_then(|c| c.as_str())
        .map(str::to_string)
        .ok_or_else(|| GenError::Malformed("reply has no choices[0].message.content".into()))
}

impl ChatProvider for RemoteChat {
    fn complete(&self, request: &ChatRequest) -> Result<String, GenError> {
        let body = serde_json::json!({
            "model": self.config.model,
            "temperature": request.temperature,
            "messages": [{ "role": "user", "content": request.prompt }],
        });
        let mut attempt = 0;
        loop {
            let result = self.transport.post(&body).map_err(GenError::from).and_then(|r| extract_content(&r));
            match result {
                Err(e) if e.is_retryable() && attempt < self.config.max_retries => {
                    let delay = self.config.backoff_ms.saturating_mul(1 << attempt.min(16));
                    log::warn!("chat request failed ({e}); retry {} in {delay} ms", attempt + 1);
                    std::thread::sleep(Duration::from_millis(delay));
                    attempt += 1;
                }
                other => return other,
            }
        }
    }
}

/// Writes every prompt and response to `dir/<prompt hash>.json`.
pub struct Audited<P> {
    inner: P,
    dir: PathBuf,
}

impl<P: ChatProvider> Audited<P> {
    pub fn new(inner: P, dir: impl Into<PathBuf>) -> Result<Self, GenError> {
        let dir = dir.into();
        std::fs::create_dir_all(&dir)?;
        Ok(Self { inner, dir })
    }
}

impl<P: ChatProvider> ChatProvider for Audited<P> {
    fn complete(&self, request: &ChatRequest) -> Result<String, GenError> {
        let result = self.inner.complete(request);
        let h = request.hash();
        let record = serde_json::json!({
            "prompt_hash": h,
            "prompt": request.prompt,
            "temperature": request.temperature,
            "response": result.as_ref().ok(),
            "error": result.as_ref().err().map(|e| e.to_string()),
        });
        let mut text = serde_json::to_string_pretty(&record).map_err(|e| GenError::Malformed(e.to_string()))?;
        text.push('\n');
        std::fs::write(self.dir.join(format!("{h}.json")), text)?;
        result
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ChatProviderChoice {
    RemoteService(ChatConfig),
    ScriptedStub { transcript: PathBuf },
}

impl ChatProviderChoice {
    pub fn build(&self) -> Result<Box<dyn ChatProvider>, GenError> {
        Ok(match self {
            Self::RemoteService(cfg) => Box::new(RemoteChat::http(cfg.clone())),
            Self::ScriptedStub { transcript } => Box::new(ScriptedStub::load(transcript)?),
        })
    }
}

impl ChatProvider for Box<dyn ChatProvider> {
    fn complete(&self, request: &ChatRequest) -> Result<String, GenError> {
        (**self).complete(request)
    }
}

/// Replaces each slot in one left-to-right pass, so substituted text is
/// never rescanned for slots.
pub fn fill_template(template: &str, values: &[(&str, &str)]) -> String {
    let mut out = String::with_capacity(template.len());
    let mut rest = template;
    loop {
        let next = values
            .iter()
            .filter_map(|(slot, v)| rest.find(slot).map(|pos| (pos, *slot, *v)))
            .min_by_key(|(pos, _, _)| *pos);
        match next {
            Some((pos, slot, value)) => {
                out.push_str(&rest[..pos]);
                out.push_str(value);
                rest = &rest[pos + slot.len()..];
            }
            None => {
                out.push_str(rest);
                return out;
            }
        }
    }
}

fn sign_word(x: f64) -> &'static str {
    match sign(x) {
        1 => "positive",
        -1 => "negative",
        _ => "null",
    }
}

// ---------------------------------------------------------------------------
// Enrichment

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Enrichment {
    pub treatment: String,
    pub outcome: String,
}

pub fn build_enrichment_request(exp: &Experiment) -> ChatRequest {
    let context = if exp.context_text.trim().is_empty() {
        "(no context provided; restate the variables as given)"
    } else {
        exp.context_text.trim()
    };
    let prompt = format!(
        "Rewrite the treatment and the outcome of the experiment below as short, \
context-aware descriptions that state who is treated, where, and what is measured. \
Use only information present in the context.\n\n\
[Treatment]: {}\n[Outcome]: {}\n[Context]: {}\n\n\
Answer with exactly two lines:\nTreatment: <enriched treatment>\nOutcome: <enriched outcome>",
        exp.treatment_text.trim(),
        exp.outcome_text.trim(),
        context
    );
    ChatRequest::new(prompt)
}

pub fn parse_enrichment_response(text: &str) -> Result<Enrichment, GenError> {
    let field = |name: &str| {
        text.lines().find_map(|line| {
            let line = line.trim().trim_start_matches(['*', '-', ' ']);
            let (key, value) = line.split_once(':')?;
            (key.trim_matches(['*', ' ']).eq_ignore_ascii_case(name))
                .then(|| value.trim().trim_matches('*').trim().to_string())
                .filter(|v| !v.is_empty())
        })
    };
    match (field("treatment"), field("outcome")) {
        (Some(treatment), Some(outcome)) => Ok(Enrichment { treatment, outcome }),
        (None, _) => Err(GenError::Malformed("missing Treatment line".into())),
        (_, None) => Err(GenError::Malformed("missing Outcome line".into())),
    }
}

pub fn enrich(exp: &Experiment, provider: &dyn ChatProvider) -> Result<Experiment, GenError> {
    let response = provider.complete(&build_enrichment_request(exp))?;
    let e = parse_enrichment_response(&response)?;
    Ok(exp.clone().with_enrichment(e.treatment, e.outcome))
}

// ---------------------------------------------------------------------------
// Reconciliation

fn finding(exp: &Experiment) -> String {
    format!(
        "How does {} impact {}? Observed effect {:+.4} ({})",
        exp.treatment_text.trim(),
        exp.outcome_text.trim(),
        exp.effect_size,
        sign_word(exp.effect_size)
    )
}

/// Fills the reconciliation template for a Conflict outcome. Sources are
/// listed by descending weight.
pub fn build_reconciliation_prompt(
    target: &Experiment,
    conflict: &RoutingOutcome,
    sources: &[Experiment],
) -> Result<ChatRequest, GenError> {
    let RoutingOutcome::Conflict { source_weights, composed_effect, .. } = conflict else {
        return Err(GenError::NotConflict(conflict.target_id().to_string()));
    };
    let by_id: BTreeMap<&str, &Experiment> = sources.iter().map(|e| (e.id.as_str(), e)).collect();
    let mut contributors: Vec<(&String, &f64)> = source_weights.iter().filter(|(_, w)| **w > 0.0).collect();
    contributors.sort_by(|a, b| b.1.total_cmp(a.1).then_with(|| a.0.cmp(b.0)));
    let mut lines = Vec::with_capacity(contributors.len());
    for (id, w) in contributors {
        let exp = by_id.get(id.as_str()).ok_or_else(|| GenError::MissingSource(id.clone()))?;
        lines.push(format!("- {}; composition weight {:.3}", finding(exp), w));
    }
    let predicted = format!(
        "{}. Composing the prior experiments predicts {:+.4} ({}).",
        finding(target),
        composed_effect,
        sign_word(*composed_effect)
    );
    let prior = lines.join("\n");
    let prompt = fill_template(
        RECONCILE_TEMPLATE,
        &[(RECONCILE_SLOTS[0], predicted.as_str()), (RECONCILE_SLOTS[1], prior.as_str())],
    );
    Ok(ChatRequest::new(prompt))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Reconciliation {
    pub target_id: String,
    pub prompt_hash: String,
    /// Q1 answered Yes.
    pub needed: bool,
    pub response: String,
}

fn yes_no() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?i)\b(yes|no)\b").expect("static regex"))
}

/// Reads the Q1 answer: the first standalone "yes" or "no", looked for
/// after a "Q1" marker when one is present.
pub fn parse_consistency_answer(response: &str) -> Result<bool, GenError> {
    let after_q1 = response
        .find("Q1")
        .map(|i| &response[i..])
        .and_then(|s| s.find(['?', ':']).map(|j| &s[j..]));
    after_q1
        .and_then(|s| yes_no().captures(s))
        .or_else(|| yes_no().captures(response))
        .map(|c| c[1].eq_ignore_ascii_case("yes"))
        .ok_or_else(|| GenError::Malformed("no Yes/No answer to Q1".into()))
}

pub fn reconcile(
    target: &Experiment,
    conflict: &RoutingOutcome,
    sources: &[Experiment],
    provider: &dyn ChatProvider,
) -> Result<Reconciliation, GenError> {
    let request = build_reconciliation_prompt(target, conflict, sources)?;
    let response = provider.complete(&request)?;
    Ok(Reconciliation {
        target_id: target.id.clone(),
        prompt_hash: request.hash(),
        needed: parse_consistency_answer(&response)?,
        response,
    })
}

// ---------------------------------------------------------------------------
// Bridge proposals

/// Literature entry for the bridge prompt.
pub fn literature_entry(exp: &Experiment) -> String {
    format!(
        "How does {} impact {}? (observed: {})",
        exp.treatment_text.trim(),
        exp.outcome_text.trim(),
        sign_word(exp.effect_size)
    )
}

pub fn build_bridge_prompt(target: &Experiment, literature: &[Experiment], known: &[String]) -> Result<ChatRequest, GenError> {
    if literature.is_empty() {
        return Err(GenError::EmptyLiterature);
    }
    let lit: Vec<String> = literature.iter().map(literature_entry).collect();
    let lit = lit.join("; ");
    let known = if known.is_empty() {
        EMPTY_LIST_MARKER.to_string()
    } else {
        known.join("; ")
    };
    let prompt = fill_template(
        BRIDGE_TEMPLATE,
        &[
            (BRIDGE_SLOTS[0], target.treatment_text.trim()),
            (BRIDGE_SLOTS[1], target.outcome_text.trim()),
            (BRIDGE_SLOTS[2], lit.as_str()),
            (BRIDGE_SLOTS[3], known.as_str()),
        ],
    );
    Ok(ChatRequest::new(prompt))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BridgeProposal {
    pub text: String,
    pub round: usize,
    pub parsed_treatment: String,
    pub parsed_outcome: String,
    /// Feature-pool id; absent when the proposal could not be embedded.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub node_id: Option<String>,
}

fn relation() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(
            r"(?is)^\s*(.+?)\s+(?:(?:positively|negatively|significantly|directly|indirectly)\s+)?(?:impacts|affects|influences|increases|decreases|reduces|improves|raises|lowers|boosts|enhances|impairs|undermines|predicts|promotes|inhibits|strengthens|weakens)\s+(.+?)[.\s]*$",
        )
        .expect("static regex")
    })
}

fn clean_fragment(s: &str) -> String {
    let s = s.trim();
    let s = s.trim_start_matches(|c: char| c.is_ascii_digit() || c == '.' || c == ')' || c == '-' || c.is_whitespace());
    s.replace("**", "").trim().to_string()
}

/// Splits on `;`, trims, drops empties. Treatment and outcome come from
/// the "A impacts B" form, or the whole fragment goes into both.
pub fn parse_bridge_response(text: &str, round: usize) -> Result<Vec<BridgeProposal>, GenError> {
    let proposals: Vec<BridgeProposal> = text
        .split(';')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|fragment| {
            let cleaned = clean_fragment(fragment);
            let (t, o) = match relation().captures(&cleaned) {
                Some(c) => (c[1].trim().to_string(), c[2].trim().to_string()),
                None => (cleaned.clone(), cleaned.clone()),
            };
            BridgeProposal {
                text: fragment.to_string(),
                round,
                parsed_treatment: if t.is_empty() { fragment.to_string() } else { t },
                parsed_outcome: if o.is_empty() { fragment.to_string() } else { o },
                node_id: None,
            }
        })
        .collect();
    if proposals.is_empty() {
        return Err(GenError::EmptyResponse);
    }
    Ok(proposals)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BridgeConfig {
    pub composer: ComposerConfig,
    pub max_rounds: usize,
    pub literature_size: usize,
    pub temperature: f64,
}

impl Default for BridgeConfig {
    fn default() -> Self {
        Self {
            composer: ComposerConfig::default(),
            max_rounds: DEFAULT_MAX_ROUNDS,
            literature_size: crate::atlas::DEFAULT_GAP_NEIGHBORS,
            temperature: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BridgeResult {
    pub target_id: String,
    pub rounds_run: usize,
    pub proposals: Vec<BridgeProposal>,
    pub final_composable: bool,
    pub rho_trace: Vec<f64>,
    /// Round 0 first, then one entry per round.
    pub isolated_ratio_trace: Vec<f64>,
}

/// Real features plus flagged hypothetical nodes that carry no effect.
pub struct BridgePool<'a> {
    pub archive: &'a Archive,
    pub features: &'a FeatureMatrix,
    pub hypothetical: BTreeMap<String, FeatureVector>,
}

impl<'a> BridgePool<'a> {
    pub fn new(archive: &'a Archive, features: &'a FeatureMatrix) -> Self {
        Self {
            archive,
            features,
            hypothetical: BTreeMap::new(),
        }
    }

    pub fn is_hypothetical(&self, id: &str) -> bool {
        self.hypothetical.contains_key(id)
    }

    fn real(&self, id: &str) -> Result<&'a FeatureVector, GenError> {
        self.features.get(id).ok_or_else(|| GenError::UnknownTarget(id.to_string()))
    }

    fn pool_without<'s>(&'s self, id: &'s str, with_hypothetical: bool) -> impl Iterator<Item = (&'s str, &'s FeatureVector)> + 's {
        let real = self
            .archive
            .ids()
            .filter(move |other| *other != id)
            .filter_map(|other| self.features.get(other).map(|x| (other, x)));
        let hyp = self
            .hypothetical
            .iter()
            .filter(move |_| with_hypothetical)
            .map(|(k, v)| (k.as_str(), v));
        real.chain(hyp)
    }

    /// Normalized residual and positive-weight sources for one real target.
    pub fn fit(&self, id: &str, cfg: &ComposerConfig, with_hypothetical: bool) -> Result<(f64, Vec<String>, Vec<String>), GenError> {
        let x = self.real(id)?;
        let fit = fit_target(id, x, self.pool_without(id, with_hypothetical), cfg)?;
        let sources = fit
            .weight_map()
            .into_iter()
            .filter(|(_, w)| *w > 0.0)
            .map(|(k, _)| k)
            .collect();
        Ok((fit.normalized_residual, sources, fit.neighborhood.candidate_ids))
    }

    /// Fraction of real experiments that neither compose as a target nor
    /// receive positive weight in another real target's composition.
    pub fn isolated_ratio(&self, cfg: &ComposerConfig) -> Result<f64, GenError> {
        use rayon::prelude::*;
        let ids: Vec<&str> = self.archive.ids().collect();
        if ids.is_empty() {
            return Ok(0.0);
        }
        let fits: Vec<(f64, Vec<String>)> = ids
            .par_iter()
            .map(|id| self.fit(id, cfg, true).map(|(rho, src, _)| (rho, src)))
            .collect::<Result<_, _>>()?;
        let contributors: BTreeSet<&str> = fits.iter().flat_map(|(_, s)| s.iter().map(String::as_str)).collect();
        let isolated = ids
            .iter()
            .zip(&fits)
            .filter(|(id, (rho, _))| *rho > cfg.lambda && !contributors.contains(**id))
            .count();
        Ok(isolated as f64 / ids.len() as f64)
    }
}

/// Proposes bridge experiments until the target composes or `max_rounds`
/// is reached. Proposals enter the feature pool as hypothetical nodes and
/// only change geometry.
pub fn bridge_loop(
    target_id: &str,
    archive: &Archive,
    features: &FeatureMatrix,
    embedder: &dyn Embedder,
    provider: &dyn ChatProvider,
    cfg: &BridgeConfig,
) -> Result<BridgeResult, GenError> {
    if cfg.max_rounds == 0 {
        return Err(GenError::Rounds);
    }
    cfg.composer.validate()?;
    let target = archive.get(target_id).ok_or_else(|| GenError::UnknownTarget(target_id.to_string()))?;
    let mut pool = BridgePool::new(archive, features);
    let (rho0, _, neighbors) = pool.fit(target_id, &cfg.composer, false)?;
    if rho0 <= cfg.composer.lambda {
        return Err(GenError::NotGap(target_id.to_string()));
    }
    let literature: Vec<Experiment> = neighbors
        .iter()
        .take(cfg.literature_size.max(1))
        .filter_map(|id| archive.get(id).cloned())
        .collect();
    let mut known: Vec<String> = literature.iter().map(literature_entry).collect();
    let mut proposals = Vec::new();
    let mut rho_trace = vec![rho0];
    let mut trace = vec![pool.isolated_ratio(&cfg.composer)?];
    let mut composable = false;
    let mut rounds_run = 0;
    for round in 1..=cfg.max_rounds {
        rounds_run = round;
        let mut request = build_bridge_prompt(target, &literature, &known)?;
        request.temperature = cfg.temperature;
        let response = provider.complete(&request)?;
        let parsed = parse_bridge_response(&response, round)?;
        for (k, mut p) in parsed.into_iter().enumerate() {
            let node = format!("{target_id}::bridge-{round}-{}", k + 1);
            let t = TextItem::new(format!("{node}/treatment"), p.parsed_treatment.clone());
            let o = TextItem::new(format!("{node}/outcome"), p.parsed_outcome.clone());
            let embedded = embedder
                .embed(&t)
                .and_then(|t| embedder.embed(&o).and_then(|o| build_feature(&t, &o)));
            match embedded {
                Ok(x) => {
                    pool.hypothetical.insert(node.clone(), x);
                    p.node_id = Some(node);
                }
                Err(e) => log::warn!("dropping bridge proposal {node:?}: {e}"),
            }
            known.push(p.text.clone());
            proposals.push(p);
        }
        let (rho, _, _) = pool.fit(target_id, &cfg.composer, true)?;
        rho_trace.push(rho);
        trace.push(pool.isolated_ratio(&cfg.composer)?);
        if rho <= cfg.composer.lambda {
            composable = true;
            break;
        }
    }
    Ok(BridgeResult {
        target_id: target_id.to_string(),
        rounds_run,
        proposals,
        final_composable: composable,
        rho_trace,
        isolated_ratio_trace: trace,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn templates_contain_their_slots_once() {
        for slot in BRIDGE_SLOTS {
            assert_eq!(BRIDGE_TEMPLATE.matches(slot).count(), 1, "{slot}");
        }
        for slot in RECONCILE_SLOTS {
            assert_eq!(RECONCILE_TEMPLATE.matches(slot).count(), 1, "{slot}");
        }
        assert!(!BRIDGE_TEMPLATE.ends_with('\n'));
    }

    #[test]
    fn fill_does_not_rescan_values() {
        let out = fill_template("{A}-{B}", &[("{A}", "{B}"), ("{B}", "x")]);
        assert_eq!(out, "{B}-x");
        assert_eq!(fill_template(BRIDGE_TEMPLATE, &[]), BRIDGE_TEMPLATE);
    }

    #[test]
    fn split_examples() {
        let p = parse_bridge_response("A increases B; C reduces D", 1).unwrap();
        assert_eq!(p.len(), 2);
        assert_eq!((p[0].parsed_treatment.as_str(), p[0].parsed_outcome.as_str()), ("A", "B"));
        assert_eq!((p[1].parsed_treatment.as_str(), p[1].parsed_outcome.as_str()), ("C", "D"));
        assert_eq!(parse_bridge_response("single proposal", 2).unwrap().len(), 1);
        let trailing = parse_bridge_response("A impacts B;  ", 1).unwrap();
        assert_eq!(trailing.len(), 1);
        assert!(matches!(parse_bridge_response(" ; ;", 1), Err(GenError::EmptyResponse)));
    }

    #[test]
    fn relation_pattern_and_fallback() {
        let p = parse_bridge_response("**Team autonomy positively impacts employee creativity.**", 1).unwrap();
        assert_eq!(p[0].parsed_treatment, "Team autonomy");
        assert_eq!(p[0].parsed_outcome, "employee creativity");
        let p = parse_bridge_response("a loosely specified idea", 1).unwrap();
        assert_eq!(p[0].parsed_treatment, "a loosely specified idea");
        assert_eq!(p[0].parsed_outcome, "a loosely specified idea");
    }

    fn target() -> Experiment {
        Experiment::new("t", "goal setting", "effort", 0.7)
    }

    #[test]
    fn bridge_prompt_substitution() {
        let lit = vec![
            Experiment::new("a", "feedback", "effort", 0.4),
            Experiment::new("b", "pay", "effort", -0.2),
        ];
        let req = build_bridge_prompt(&target(), &lit, &[]).unwrap();
        assert!(req.prompt.contains("\"How does goal setting impact effort?\""));
        assert!(req.prompt.contains(
            "\"How does feedback impact effort? (observed: positive); How does pay impact effort? (observed: negative)\""
        ));
        assert!(req.prompt.contains(&format!("\"{EMPTY_LIST_MARKER}\"")));
        let known = vec!["Praise increases effort".to_string()];
        let req = build_bridge_prompt(&target(), &lit, &known).unwrap();
        assert!(req.prompt.contains("\"Praise increases effort\""));
        assert!(matches!(build_bridge_prompt(&target(), &[], &[]), Err(GenError::EmptyLiterature)));
    }

    fn conflict(sources: &[(&str, f64)]) -> RoutingOutcome {
        RoutingOutcome::Conflict {
            target_id: "t".into(),
            source_weights: sources.iter().map(|(k, w)| (k.to_string(), *w)).collect(),
            composed_effect: -0.3,
            observed_effect: 0.7,
            relaxed: false,
        }
    }

    #[test]
    fn reconciliation_prompt_lists_sources() {
        let sources = vec![
            Experiment::new("a", "feedback", "effort", -0.4),
            Experiment::new("b", "pay", "effort", -0.2),
            Experiment::new("c", "praise", "effort", 0.1),
        ];
        let req = build_reconciliation_prompt(&target(), &conflict(&[("a", 0.2), ("b", 0.5), ("c", 0.3)]), &sources).unwrap();
        for s in ["feedback", "pay", "praise", "- Q1 - Consistency check:", "- Q2: If Yes"] {
            assert!(req.prompt.contains(s), "{s}");
        }
        assert!(req.prompt.find("pay").unwrap() < req.prompt.find("praise").unwrap());
        assert!(matches!(
            build_reconciliation_prompt(&target(), &conflict(&[("zz", 1.0)]), &sources),
            Err(GenError::MissingSource(_))
        ));
        let link = RoutingOutcome::Link { target_id: "t".into(), source_weights: BTreeMap::new() };
        assert!(matches!(build_reconciliation_prompt(&target(), &link, &sources), Err(GenError::NotConflict(_))));
    }

    #[test]
    fn consistency_answers() {
        assert!(!parse_consistency_answer("Q1: No.").unwrap());
        assert!(parse_consistency_answer("Q1 - Consistency check: Yes\nQ2: ...").unwrap());
        assert!(!parse_consistency_answer("No, they are consistent.").unwrap());
        assert!(parse_consistency_answer("it depends").is_err());
    }

    #[test]
    fn stub_replays_by_hash() {
        let sources = vec![Experiment::new("a", "feedback", "effort", -0.4)];
        let c = conflict(&[("a", 1.0)]);
        let prompt = build_reconciliation_prompt(&target(), &c, &sources).unwrap().prompt;
        let stub = ScriptedStub::new().with_response(&prompt, "Q1: No");
        let r = reconcile(&target(), &c, &sources, &stub).unwrap();
        assert!(!r.needed);
        assert_eq!(r.prompt_hash, prompt_hash(&prompt));
        let missing = ScriptedStub::new().complete(&ChatRequest::new("x".into()));
        assert!(matches!(missing, Err(GenError::NoScript(_))));
    }

    #[test]
    fn enrichment_round_trip() {
        let exp = Experiment::new("e", "creativity training", "creativity", 0.5).with_context("Employees of a large firm.");
        let req = build_enrichment_request(&exp);
        assert!(req.prompt.contains("Employees of a large firm."));
        let stub = ScriptedStub::new().with_response(
            &req.prompt,
            "Treatment: creativity training for employees\nOutcome: employee creativity in the organization",
        );
        let enriched = enrich(&exp, &stub).unwrap();
        assert_eq!(enriched.enriched_outcome.as_deref(), Some("employee creativity in the organization"));
        assert!(parse_enrichment_response("Treatment: x").is_err());
        let bare = Experiment::new("e", "t", "o", 0.0);
        assert!(build_enrichment_request(&bare).prompt.contains("restate the variables"));
    }

    struct Flaky {
        calls: std::sync::atomic::AtomicUsize,
    }

    impl ChatTransport for Flaky {
        fn post(&self, _: &serde_json::Value) -> Result<serde_json::Value, TransportError> {
            let n = self.calls.fetch_add(1, std::sync::atomic::Ordering::SeqCst);
            if n < 2 {
                return Err(TransportError { message: "busy".into(), retryable: true });
            }
            Ok(serde_json::json!({"choices": [{"message": {"content": "ok"}}]}))
        }
    }

    #[test]
    fn remote_chat_retries() {
        let transport = Arc::new(Flaky { calls: 0.into() });
        let cfg = ChatConfig { backoff_ms: 1, ..ChatConfig::default() };
        let chat = RemoteChat::new(cfg, transport.clone());
        assert_eq!(chat.complete(&ChatRequest::new("p".into())).unwrap(), "ok");
        assert_eq!(transport.calls.load(std::sync::atomic::Ordering::SeqCst), 3);
    }

    #[test]
    fn audit_log_written() {
        let dir = tempfile::tempdir().unwrap();
        let stub = ScriptedStub::new().with_response("hello", "world");
        let audited = Audited::new(stub, dir.path().join("audit")).unwrap();
        audited.complete(&ChatRequest::new("hello".into())).unwrap();
        let file = dir.path().join("audit").join(format!("{}.json", prompt_hash("hello")));
        let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(file).unwrap()).unwrap();
        assert_eq!(v["response"], "world");
    }
}
