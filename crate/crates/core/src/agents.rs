//! Prompt templates, chat providers (scripted and live HTTP) and parsers for
//! every agent reply format used by the workflow.

use std::collections::{HashMap, VecDeque};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::{Mutex, OnceLock};
use std::time::Duration;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::motiondata::{four_part_partition, standard_layout, MotionSequence, Part, JOINT_COUNT, JOINT_NAMES};
use crate::spamgen::{GenError, TextEmbedder};

#[derive(Debug, Error)]
pub enum AgentError {
    #[error("template `{template}` has unbound placeholder `{{{name}}}`")]
    Unbound { template: String, name: String },
    #[error("unknown template `{0}`")]
    UnknownTemplate(String),
    #[error("message content must not be empty")]
    EmptyMessage,
    #[error("transcript exhausted at a `{0}` request")]
    Exhausted(String),
    #[error("transcript expects a `{expected}` request but got `{got}`")]
    Mismatch { expected: String, got: String },
    #[error("transcript: {0}")]
    Transcript(String),
    #[error("provider failed after {attempts} attempt(s): {msg}")]
    Provider { attempts: u32, msg: String },
    #[error("cannot parse {what} (line {line}): {msg}")]
    Parse {
        what: &'static str,
        line: usize,
        msg: String,
    },
    #[error("empty reply to `{0}`")]
    EmptyReply(String),
    #[error("I/O error on {path}: {msg}")]
    Io { path: PathBuf, msg: String },
}

fn parse_err(what: &'static str, line: usize, msg: impl Into<String>) -> AgentError {
    AgentError::Parse {
        what,
        line,
        msg: msg.into(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: Role,
    pub content: String,
}

impl ChatMessage {
    pub fn new(role: Role, content: impl Into<String>) -> Result<Self, AgentError> {
        let content = content.into();
        if content.trim().is_empty() {
            return Err(AgentError::EmptyMessage);
        }
        Ok(Self { role, content })
    }

    pub fn user(content: impl Into<String>) -> Result<Self, AgentError> {
        Self::new(Role::User, content)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplate {
    pub id: &'static str,
    pub body: &'static str,
}

pub const REWRITE: &str = "rewrite";
pub const SEGMENT: &str = "segment";
pub const BASE_MOTION: &str = "base_motion";
pub const LOCAL_EDITS: &str = "local_edits";
pub const SEGMENT_ATTRIBUTES: &str = "segment_attributes";
pub const TRAJECTORY: &str = "trajectory";
pub const BODYPART_LINES: &str = "bodypart_lines";
pub const COMPARE: &str = "compare";
pub const CAPTION: &str = "caption";

const TEMPLATES: [PromptTemplate; 9] = [
    PromptTemplate {
        id: REWRITE,
        body: include_str!("../assets/prompts/rewrite.txt"),
    },
    PromptTemplate {
        id: SEGMENT,
        body: include_str!("../assets/prompts/segment.txt"),
    },
    PromptTemplate {
        id: BASE_MOTION,
        body: include_str!("../assets/prompts/base_motion.txt"),
    },
    PromptTemplate {
        id: LOCAL_EDITS,
        body: include_str!("../assets/prompts/local_edits.txt"),
    },
    PromptTemplate {
        id: SEGMENT_ATTRIBUTES,
        body: include_str!("../assets/prompts/segment_attributes.txt"),
    },
    PromptTemplate {
        id: TRAJECTORY,
        body: include_str!("../assets/prompts/trajectory.txt"),
    },
    PromptTemplate {
        id: BODYPART_LINES,
        body: include_str!("../assets/prompts/bodypart_lines.txt"),
    },
    PromptTemplate {
        id: COMPARE,
        body: include_str!("../assets/prompts/compare.txt"),
    },
    PromptTemplate {
        id: CAPTION,
        body: include_str!("../assets/prompts/caption.txt"),
    },
];

const DEFAULT_VOCABULARY: &str = include_str!("../assets/prompts/vocabulary.txt");

pub fn template(id: &str) -> Result<&'static PromptTemplate, AgentError> {
    TEMPLATES
        .iter()
        .find(|t| t.id == id)
        .ok_or_else(|| AgentError::UnknownTemplate(id.to_string()))
}

pub fn template_ids() -> impl Iterator<Item = &'static str> {
    TEMPLATES.iter().map(|t| t.id)
}

fn placeholder_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\{([A-Za-z_][A-Za-z0-9_]*)\}").expect("valid pattern"))
}

/// Names of the `{name}` placeholders in `body`, in order of first use.
pub fn placeholders(body: &str) -> Vec<String> {
    let mut out: Vec<String> = Vec::new();
    for c in placeholder_re().captures_iter(body) {
        let n = c[1].to_string();
        if !out.contains(&n) {
            out.push(n);
        }
    }
    out
}

/// Single-pass literal substitution of `{name}` placeholders. Text inside
/// bindings is never rescanned.
pub fn render_template(tpl: &PromptTemplate, bindings: &[(&str, &str)]) -> Result<String, AgentError> {
    let mut out = String::with_capacity(tpl.body.len());
    let mut last = 0;
    for c in placeholder_re().captures_iter(tpl.body) {
        let m = c.get(0).expect("whole match");
        let name = &c[1];
        let value = bindings
            .iter()
            .rev()
            .find(|(k, _)| *k == name)
            .map(|(_, v)| *v)
            .ok_or_else(|| AgentError::Unbound {
                template: tpl.id.to_string(),
                name: name.to_string(),
            })?;
        out.push_str(&tpl.body[last..m.start()]);
        out.push_str(value);
        last = m.end();
    }
    out.push_str(&tpl.body[last..]);
    Ok(out)
}

/// Words of a vocabulary file: one per line, `#` comments and blanks skipped.
pub fn parse_vocabulary(text: &str) -> Vec<String> {
    text.lines()
        .map(|l| l.split('#').next().unwrap_or("").trim())
        .filter(|l| !l.is_empty())
        .map(str::to_string)
        .collect()
}

pub fn default_vocabulary() -> Vec<String> {
    parse_vocabulary(DEFAULT_VOCABULARY)
}

pub fn load_vocabulary(path: &Path) -> Result<Vec<String>, AgentError> {
    let text = fs::read_to_string(path).map_err(|e| AgentError::Io {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })?;
    Ok(parse_vocabulary(&text))
}

/// `'a', 'b', ...` as written inside the word list of the rewrite prompt.
pub fn format_words_list(words: &[String]) -> String {
    words.iter().map(|w| format!("'{w}'")).collect::<Vec<_>>().join(", ")
}

// Providers ---------------------------------------------------------------

#[derive(Debug, Clone, Copy)]
pub struct ChatRequest<'a> {
    pub template_id: &'a str,
    pub messages: &'a [ChatMessage],
    /// Segment the request belongs to, if any; scripted transcripts may keep
    /// a separate queue per segment.
    pub segment: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChatReply {
    pub text: String,
    pub attempts: u32,
}

pub trait ChatProvider: Send + Sync {
    fn chat(&self, req: &ChatRequest<'_>) -> Result<ChatReply, AgentError>;
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TranscriptEntry {
    pub template_id: String,
    pub reply: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub segment: Option<usize>,
}

/// Replays a recorded transcript. Entries tagged with a segment form that
/// segment's queue; untagged entries form a shared queue used by requests
/// without a segment and by segments whose own queue is empty.
#[derive(Debug)]
pub struct ScriptedProvider {
    entries: Vec<TranscriptEntry>,
    queues: Mutex<HashMap<Option<usize>, VecDeque<usize>>>,
}

impl ScriptedProvider {
    pub fn new(entries: Vec<TranscriptEntry>) -> Self {
        let mut queues: HashMap<Option<usize>, VecDeque<usize>> = HashMap::new();
        for (i, e) in entries.iter().enumerate() {
            queues.entry(e.segment).or_default().push_back(i);
        }
        Self {
            entries,
            queues: Mutex::new(queues),
        }
    }

    pub fn from_json(text: &str) -> Result<Self, AgentError> {
        let entries: Vec<TranscriptEntry> =
            serde_json::from_str(text).map_err(|e| AgentError::Transcript(e.to_string()))?;
        Ok(Self::new(entries))
    }

    pub fn load(path: &Path) -> Result<Self, AgentError> {
        let text = fs::read_to_string(path).map_err(|e| AgentError::Io {
            path: path.to_path_buf(),
            msg: e.to_string(),
        })?;
        Self::from_json(&text)
    }

    pub fn remaining(&self) -> usize {
        self.queues.lock().expect("queue lock").values().map(VecDeque::len).sum()
    }
}

impl ChatProvider for ScriptedProvider {
    fn chat(&self, req: &ChatRequest<'_>) -> Result<ChatReply, AgentError> {
        let mut queues = self.queues.lock().expect("queue lock");
        let key = match req.segment {
            Some(s) if queues.get(&Some(s)).is_some_and(|q| !q.is_empty()) => Some(s),
            _ => None,
        };
        let queue = queues
            .get_mut(&key)
            .filter(|q| !q.is_empty())
            .ok_or_else(|| AgentError::Exhausted(req.template_id.to_string()))?;
        let entry = &self.entries[*queue.front().expect("non-empty")];
        if entry.template_id != req.template_id {
            return Err(AgentError::Mismatch {
                expected: entry.template_id.clone(),
                got: req.template_id.to_string(),
            });
        }
        queue.pop_front();
        Ok(ChatReply {
            text: entry.reply.clone(),
            attempts: 1,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LiveConfig {
    pub endpoint: String,
    pub model: String,
    #[serde(default = "default_key_env")]
    pub api_key_env: String,
    #[serde(default = "default_timeout_ms")]
    pub timeout_ms: u64,
    #[serde(default = "default_retries")]
    pub max_retries: u32,
    #[serde(default = "default_backoff_ms")]
    pub backoff_ms: u64,
}

fn default_key_env() -> String {
    "COMA_API_KEY".into()
}
fn default_timeout_ms() -> u64 {
    60_000
}
fn default_retries() -> u32 {
    3
}
fn default_backoff_ms() -> u64 {
    500
}

/// Either a live endpoint or a transcript file, never both.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProviderConfig {
    Live(LiveConfig),
    Scripted { transcript: PathBuf },
}

impl ProviderConfig {
    pub fn build(&self) -> Result<Box<dyn ChatProvider>, AgentError> {
        Ok(match self {
            ProviderConfig::Live(c) => Box::new(LiveProvider::new(c.clone())?),
            ProviderConfig::Scripted { transcript } => Box::new(ScriptedProvider::load(transcript)?),
        })
    }
}

/// Chat-completions style HTTP client with exponential backoff.
pub struct LiveProvider {
    cfg: LiveConfig,
    client: reqwest::blocking::Client,
}

#[derive(Serialize)]
struct WireRequest<'a> {
    model: &'a str,
    messages: &'a [ChatMessage],
}

impl LiveProvider {
    pub fn new(cfg: LiveConfig) -> Result<Self, AgentError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_millis(cfg.timeout_ms))
            .build()
            .map_err(|e| AgentError::Provider {
                attempts: 0,
                msg: e.to_string(),
            })?;
        Ok(Self { cfg, client })
    }

    fn attempt(&self, messages: &[ChatMessage]) -> Result<String, (bool, String)> {
        let mut rb = self.client.post(&self.cfg.endpoint).json(&WireRequest {
            model: &self.cfg.model,
            messages,
        });
        if let Ok(key) = std::env::var(&self.cfg.api_key_env) {
            rb = rb.bearer_auth(key);
        }
        let resp = rb.send().map_err(|e| (true, e.to_string()))?;
        let status = resp.status();
        if !status.is_success() {
            let retry = status.is_server_error() || status.as_u16() == 429;
            return Err((retry, format!("HTTP {status}")));
        }
        let v: serde_json::Value = resp.json().map_err(|e| (false, format!("bad JSON body: {e}")))?;
        v.pointer("/choices/0/message/content")
            .or_else(|| v.pointer("/choices/0/text"))
            .and_then(|c| c.as_str())
            .map(str::to_string)
            .ok_or((false, "response has no choices[0] content".to_string()))
    }
}

impl ChatProvider for LiveProvider {
    fn chat(&self, req: &ChatRequest<'_>) -> Result<ChatReply, AgentError> {
        let mut attempts = 0;
        loop {
            attempts += 1;
            match self.attempt(req.messages) {
                Ok(text) => return Ok(ChatReply { text, attempts }),
                Err((retry, msg)) => {
                    if !retry || attempts > self.cfg.max_retries {
                        return Err(AgentError::Provider { attempts, msg });
                    }
                    log::warn!("chat attempt {attempts} failed: {msg}; retrying");
                    std::thread::sleep(Duration::from_millis(self.cfg.backoff_ms << (attempts - 1).min(16)));
                }
            }
        }
    }
}

/// Embeddings over HTTP: posts `{model, input}` and reads
/// `data[0].embedding`. An empty text is the unconditional prompt.
pub struct HttpEmbedder {
    cfg: LiveConfig,
    dim: usize,
    client: reqwest::blocking::Client,
}

impl HttpEmbedder {
    pub fn new(cfg: LiveConfig, dim: usize) -> Result<Self, AgentError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_millis(cfg.timeout_ms))
            .build()
            .map_err(|e| AgentError::Provider {
                attempts: 0,
                msg: e.to_string(),
            })?;
        Ok(Self { cfg, dim, client })
    }
}

impl TextEmbedder for HttpEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, text: &str) -> Result<Option<Vec<f32>>, GenError> {
        if text.trim().is_empty() {
            return Ok(None);
        }
        let mut rb = self
            .client
            .post(&self.cfg.endpoint)
            .json(&serde_json::json!({"model": self.cfg.model, "input": text}));
        if let Ok(key) = std::env::var(&self.cfg.api_key_env) {
            rb = rb.bearer_auth(key);
        }
        let fail = |m: String| GenError::Embed(m);
        let v: serde_json::Value = rb
            .send()
            .and_then(|r| r.error_for_status())
            .map_err(|e| fail(e.to_string()))?
            .json()
            .map_err(|e| fail(e.to_string()))?;
        let arr = v
            .pointer("/data/0/embedding")
            .and_then(|e| e.as_array())
            .ok_or_else(|| fail("response has no data[0].embedding".into()))?;
        let out: Vec<f32> = arr.iter().filter_map(|x| x.as_f64()).map(|x| x as f32).collect();
        if out.len() != self.dim || out.len() != arr.len() {
            return Err(fail(format!("expected {} numbers, got {}", self.dim, arr.len())));
        }
        Ok(Some(out))
    }
}

// Reply parsers -----------------------------------------------------------

/// Whitespace as matched by `\s` and `str.strip()` in Python.
fn py_space(c: char) -> bool {
    c.is_whitespace() || ('\x1c'..='\x1f').contains(&c)
}

fn py_strip(s: &str) -> &str {
    s.trim_matches(py_space)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepPrompt {
    pub prompt: String,
    pub original_prompt: String,
}

fn step_label_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    // `\d` is Unicode Nd here, as in Python `re` on str patterns.
    RE.get_or_init(|| Regex::new(r"\Astep\d+:").expect("valid pattern"))
}

/// Temporal steps of a segmentation reply. Reproduces
/// `re.findall(r'(?m)^step\d+:\s*(.*?)(?=(\nstep\d+:)|$)', s.strip(), re.DOTALL)`
/// followed by stripping and dropping empty captures: since `$` matches
/// before every newline in multiline mode, each capture runs from after the
/// label's whitespace to the end of that line.
pub fn parse_steps(reply: &str, original_prompt: &str) -> Result<Vec<StepPrompt>, AgentError> {
    let s = py_strip(reply);
    let mut out = Vec::new();
    let mut pos = 0;
    while pos < s.len() {
        let at_line_start = pos == 0 || s.as_bytes()[pos - 1] == b'\n';
        let label = if at_line_start {
            step_label_re().find(&s[pos..])
        } else {
            None
        };
        let Some(label) = label else {
            // Advance one character.
            pos += s[pos..].chars().next().map_or(1, char::len_utf8);
            continue;
        };
        let mut start = pos + label.end();
        while let Some(c) = s[start..].chars().next().filter(|&c| py_space(c)) {
            start += c.len_utf8();
        }
        let end = s[start..].find('\n').map_or(s.len(), |i| start + i);
        let desc = py_strip(&s[start..end]);
        if !desc.is_empty() {
            out.push(StepPrompt {
                prompt: desc.to_string(),
                original_prompt: original_prompt.to_string(),
            });
        }
        // The lookahead does not consume; an empty match cannot occur here.
        pos = end.max(pos + 1);
    }
    if out.is_empty() {
        return Err(parse_err("steps", 0, "no `stepN:` lines found"));
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Limb {
    LeftArm,
    RightArm,
    LeftLeg,
    RightLeg,
}

impl Limb {
    pub const ALL: [Limb; 4] = [Limb::LeftArm, Limb::RightArm, Limb::LeftLeg, Limb::RightLeg];

    pub fn label(self) -> &'static str {
        match self {
            Limb::LeftArm => "left arm",
            Limb::RightArm => "right arm",
            Limb::LeftLeg => "left leg",
            Limb::RightLeg => "right leg",
        }
    }

    pub fn part(self) -> Part {
        match self {
            Limb::LeftArm => Part::LU,
            Limb::RightArm => Part::RU,
            Limb::LeftLeg => Part::LL,
            Limb::RightLeg => Part::RL,
        }
    }

    fn from_label(s: &str) -> Option<Limb> {
        let norm = s.trim().to_lowercase().replace(['_', '-'], " ");
        Limb::ALL.into_iter().find(|l| l.label() == norm.split_whitespace().collect::<Vec<_>>().join(" "))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LocalEdit {
    pub limb: Limb,
    pub description: Option<String>,
}

fn is_none_word(s: &str) -> bool {
    let t = s
        .trim()
        .trim_matches(|c: char| matches!(c, '"' | '\'' | '[' | ']' | '.' | '*' | '“' | '”'))
        .trim();
    t.eq_ignore_ascii_case("none") || t.is_empty()
}

fn line_of(text: &str, byte: usize) -> usize {
    text[..byte.min(text.len())].matches('\n').count() + 1
}

/// Four local edits from the tagged JSON array, in limb order
/// left arm, right arm, left leg, right leg.
pub fn parse_local_edits(reply: &str) -> Result<[LocalEdit; 4], AgentError> {
    const OPEN: &str = "<LOCAL_EDITS_JSON>";
    const CLOSE: &str = "</LOCAL_EDITS_JSON>";
    let what = "local edits";
    let open = reply
        .find(OPEN)
        .ok_or_else(|| parse_err(what, 0, format!("missing {OPEN} tag")))?;
    let body_start = open + OPEN.len();
    let close = reply[body_start..]
        .find(CLOSE)
        .map(|i| body_start + i)
        .ok_or_else(|| parse_err(what, line_of(reply, open), format!("missing {CLOSE} tag")))?;
    let body = &reply[body_start..close];
    let v: serde_json::Value = serde_json::from_str(body).map_err(|e| {
        parse_err(what, line_of(reply, body_start) + e.line().saturating_sub(1), e.to_string())
    })?;
    let arr = v
        .as_array()
        .ok_or_else(|| parse_err(what, line_of(reply, body_start), "expected a JSON array"))?;
    let mut slots: [Option<LocalEdit>; 4] = Default::default();
    for (i, item) in arr.iter().enumerate() {
        let obj = item
            .as_object()
            .ok_or_else(|| parse_err(what, 0, format!("entry {i} is not an object")))?;
        let part = obj
            .get("body part")
            .or_else(|| obj.get("body_part"))
            .and_then(|p| p.as_str())
            .ok_or_else(|| parse_err(what, 0, format!("entry {i} has no string \"body part\"")))?;
        let limb =
            Limb::from_label(part).ok_or_else(|| parse_err(what, 0, format!("entry {i}: unknown body part `{part}`")))?;
        let desc = match obj.get("description") {
            Some(serde_json::Value::String(s)) => (!is_none_word(s)).then(|| s.trim().to_string()),
            Some(serde_json::Value::Null) => None,
            _ => return Err(parse_err(what, 0, format!("entry {i} has no string \"description\""))),
        };
        let slot = &mut slots[Limb::ALL.iter().position(|l| *l == limb).expect("limb")];
        if slot.is_some() {
            return Err(parse_err(what, 0, format!("`{}` appears twice", limb.label())));
        }
        *slot = Some(LocalEdit {
            limb,
            description: desc,
        });
    }
    let mut missing = Vec::new();
    for (i, s) in slots.iter().enumerate() {
        if s.is_none() {
            missing.push(Limb::ALL[i].label());
        }
    }
    if !missing.is_empty() {
        return Err(parse_err(what, 0, format!("missing {}", missing.join(", "))));
    }
    Ok(slots.map(|s| s.expect("checked")))
}

/// Value after `label:` if `line` starts with it (case-insensitive),
/// tolerating list bullets and bold markers around the label.
fn labeled<'a>(line: &'a str, label: &str) -> Option<&'a str> {
    let t = line.trim_start().trim_start_matches(['-', '*', '#', ' ', '\t']);
    let head = t.get(..label.len())?;
    if !head.eq_ignore_ascii_case(label) {
        return None;
    }
    let rest = t[label.len()..].trim_start_matches('*').trim_start();
    let rest = rest.strip_prefix(':')?;
    Some(rest.trim_start_matches('*').trim())
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct BodyPartLines {
    pub right_arm: String,
    pub left_arm: String,
    pub right_leg: String,
    pub left_leg: String,
}

/// The four labelled lines of a body-part description reply; unlabelled
/// lines are ignored and a repeated label keeps its last value with a
/// warning.
pub fn parse_bodypart_lines(reply: &str) -> Result<(BodyPartLines, Vec<String>), AgentError> {
    const LABELS: [&str; 4] = ["Right arm", "Left arm", "Right leg", "Left leg"];
    let mut vals: [Option<String>; 4] = Default::default();
    let mut warnings = Vec::new();
    for (n, line) in reply.lines().enumerate() {
        for (k, label) in LABELS.iter().enumerate() {
            if let Some(v) = labeled(line, label) {
                if vals[k].is_some() {
                    warnings.push(format!("line {}: duplicate `{label}:`, keeping the last", n + 1));
                }
                vals[k] = Some(v.to_string());
            }
        }
    }
    let missing: Vec<&str> = LABELS
        .iter()
        .zip(&vals)
        .filter(|(_, v)| v.is_none())
        .map(|(l, _)| *l)
        .collect();
    if !missing.is_empty() {
        return Err(parse_err("body-part lines", 0, format!("missing {}", missing.join(", "))));
    }
    let [ra, la, rl, ll] = vals.map(|v| v.expect("checked"));
    Ok((
        BodyPartLines {
            right_arm: ra,
            left_arm: la,
            right_leg: rl,
            left_leg: ll,
        },
        warnings,
    ))
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct CorrectionInstruction {
    pub left_arm: Option<String>,
    pub right_arm: Option<String>,
    pub lower_body: Option<String>,
}

impl CorrectionInstruction {
    pub fn is_empty(&self) -> bool {
        self.left_arm.is_none() && self.right_arm.is_none() && self.lower_body.is_none()
    }

    /// Body-part edits implied by the instruction, in field order.
    pub fn edits(&self) -> Vec<(Vec<Part>, String)> {
        let mut out = Vec::new();
        if let Some(t) = &self.left_arm {
            out.push((vec![Part::LU], t.clone()));
        }
        if let Some(t) = &self.right_arm {
            out.push((vec![Part::RU], t.clone()));
        }
        if let Some(t) = &self.lower_body {
            out.push((vec![Part::LL, Part::RL], t.clone()));
        }
        out
    }
}

/// Reviewer instruction: three labelled lines, `None` meaning no change.
/// A missing label counts as `None`; all three missing is an error.
pub fn parse_correction(reply: &str) -> Result<CorrectionInstruction, AgentError> {
    const LABELS: [&str; 3] = ["Left arm", "Right arm", "Lower body"];
    let mut vals: [Option<Option<String>>; 3] = Default::default();
    for line in reply.lines() {
        for (k, label) in LABELS.iter().enumerate() {
            if let Some(v) = labeled(line, label) {
                vals[k] = Some((!is_none_word(v)).then(|| v.trim_matches('"').trim().to_string()));
            }
        }
    }
    if vals.iter().all(Option::is_none) {
        return Err(parse_err(
            "correction",
            0,
            "none of `Left arm:`, `Right arm:`, `Lower body:` present",
        ));
    }
    let [left_arm, right_arm, lower_body] = vals.map(Option::flatten);
    Ok(CorrectionInstruction {
        left_arm,
        right_arm,
        lower_body,
    })
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SegmentAttributes {
    pub traj: Option<String>,
    pub duration_s: Option<f64>,
}

/// `Trajectory:` and `Duration:` lines; the number may carry a unit suffix.
pub fn parse_segment_attributes(reply: &str) -> Result<SegmentAttributes, AgentError> {
    let what = "segment attributes";
    let mut traj = None;
    let mut duration = None;
    let mut seen = false;
    for (n, line) in reply.lines().enumerate() {
        if let Some(v) = labeled(line, "Trajectory") {
            seen = true;
            traj = (!is_none_word(v)).then(|| v.trim_matches('"').trim().to_string());
        } else if let Some(v) = labeled(line, "Duration") {
            seen = true;
            let num: String = v
                .trim()
                .chars()
                .take_while(|c| c.is_ascii_digit() || *c == '.')
                .collect();
            let d: f64 = num
                .parse()
                .map_err(|_| parse_err(what, n + 1, format!("duration `{v}` is not a number")))?;
            if !(d.is_finite() && d > 0.0) {
                return Err(parse_err(what, n + 1, "duration must be positive"));
            }
            duration = Some(d);
        }
    }
    if !seen {
        return Err(parse_err(what, 0, "no `Trajectory:` or `Duration:` line"));
    }
    Ok(SegmentAttributes {
        traj,
        duration_s: duration,
    })
}

/// Base-motion reply: the first non-empty line, with an optional
/// `Base Motion:` label removed.
pub fn parse_base_motion(reply: &str) -> Result<String, AgentError> {
    let line = reply
        .lines()
        .map(str::trim)
        .find(|l| !l.is_empty())
        .ok_or_else(|| parse_err("base motion", 0, "empty reply"))?;
    let text = labeled(line, "Base Motion").unwrap_or(line).trim().trim_matches('"').trim();
    if text.is_empty() {
        return Err(parse_err("base motion", 1, "empty description"));
    }
    Ok(text.to_string())
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RewriteOutcome {
    pub text: String,
    /// True when no line started with "A person" and the whole reply is used.
    pub fallback: bool,
}

/// The last line that starts with "A person", after removing list markers
/// and an `Output:` label; otherwise the whole trimmed reply.
pub fn extract_rewrite(reply: &str) -> Result<RewriteOutcome, AgentError> {
    let whole = reply.trim();
    if whole.is_empty() {
        return Err(AgentError::EmptyReply(REWRITE.into()));
    }
    let found = reply
        .lines()
        .filter_map(|l| {
            let t = l.trim().trim_start_matches(['-', '*', ' ']);
            let t = labeled(t, "Output").unwrap_or(t).trim();
            t.starts_with("A person").then_some(t)
        })
        .next_back();
    Ok(match found {
        Some(t) => RewriteOutcome {
            text: t.to_string(),
            fallback: false,
        },
        None => RewriteOutcome {
            text: whole.to_string(),
            fallback: true,
        },
    })
}

pub fn rewrite(
    prompt: &str,
    llm: &dyn ChatProvider,
    vocabulary: &[String],
) -> Result<(RewriteOutcome, ChatReply), AgentError> {
    let words = format_words_list(vocabulary);
    let text = render_template(template(REWRITE)?, &[("input_prompt", prompt), ("words_list", &words)])?;
    let msgs = [ChatMessage::user(text)?];
    let reply = llm.chat(&ChatRequest {
        template_id: REWRITE,
        messages: &msgs,
        segment: None,
    })?;
    let out = extract_rewrite(&reply.text)?;
    if out.fallback {
        log::warn!("rewrite reply has no line starting with \"A person\"; using the whole reply");
    }
    Ok((out, reply))
}

/// One temporal segment with its decomposed prompts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanSegment {
    pub prompt: String,
    pub original_prompt: String,
    pub base: String,
    pub local_edits: [LocalEdit; 4],
    pub traj: Option<String>,
    pub duration_s: Option<f64>,
}

impl PlanSegment {
    pub fn has_edits(&self) -> bool {
        self.local_edits.iter().any(|e| e.description.is_some())
    }
}

// Review artifact ---------------------------------------------------------

/// Colour group of each joint: 0..=3 for joints owned by one part (LU, RU,
/// LL, RL), 4 for the shared torso and 5 for the shared pelvis.
pub fn joint_color_ids() -> [u8; JOINT_COUNT] {
    let scheme = four_part_partition(&standard_layout());
    let mut out = [0u8; JOINT_COUNT];
    for (j, name) in JOINT_NAMES.iter().enumerate() {
        let parts = scheme.parts_of_joint(name);
        out[j] = match parts.as_slice() {
            [p] => p.index() as u8,
            [Part::LU, Part::RU] => 4,
            _ => 5,
        };
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReviewArtifact {
    pub fps: f32,
    pub joint_names: Vec<String>,
    pub joint_colors: Vec<u8>,
    /// `frames[t][j] = [x, y, z]`.
    pub frames: Vec<Vec<[f32; 3]>>,
}

/// Joint positions of every frame: the root at its height above the origin,
/// other joints from the position block.
pub fn joint_trace(m: &MotionSequence) -> Vec<Vec<[f32; 3]>> {
    let layout = standard_layout();
    (0..m.len())
        .map(|t| {
            let f = m.frame(t);
            (0..JOINT_COUNT)
                .map(|j| match layout.position_indices(j) {
                    Some(r) => [f[r.start], f[r.start + 1], f[r.start + 2]],
                    None => [0.0, f[layout.root_height.start], 0.0],
                })
                .collect()
        })
        .collect()
}

pub fn render_for_review(m: &MotionSequence, path: &Path) -> Result<ReviewArtifact, AgentError> {
    let art = ReviewArtifact {
        fps: m.fps,
        joint_names: JOINT_NAMES.iter().map(|s| s.to_string()).collect(),
        joint_colors: joint_color_ids().to_vec(),
        frames: joint_trace(m),
    };
    let io = |e: std::io::Error| AgentError::Io {
        path: path.to_path_buf(),
        msg: e.to_string(),
    };
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(io)?;
    }
    let json = serde_json::to_string(&art).expect("artifact serializes");
    fs::write(path, json).map_err(io)?;
    Ok(art)
}

pub fn read_review(path: &Path) -> Result<ReviewArtifact, AgentError> {
    let text = fs::read_to_string(path).map_err(|e| AgentError::Io {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })?;
    serde_json::from_str(&text).map_err(|e| parse_err("review artifact", e.line(), e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tpl(body: &'static str) -> PromptTemplate {
        PromptTemplate { id: "t", body }
    }

    #[test]
    fn render_substitutes_literally() {
        assert_eq!(render_template(&tpl("A {x}"), &[("x", "dog")]).unwrap(), "A dog");
        assert!(matches!(
            render_template(&tpl("say {input_prompt}"), &[]),
            Err(AgentError::Unbound { .. })
        ));
        assert_eq!(
            render_template(&tpl("<{a}>"), &[("a", "{b} {{c}}")]).unwrap(),
            "<{b} {{c}}>"
        );
        // Braces that are not placeholders are kept.
        assert_eq!(render_template(&tpl("{\n}{ x }"), &[]).unwrap(), "{\n}{ x }");
    }

    #[test]
    fn all_templates_render() {
        for id in template_ids() {
            let t = template(id).unwrap();
            let names = placeholders(t.body);
            assert!(!names.is_empty(), "{id}");
            let binds: Vec<(&str, &str)> = names.iter().map(|n| (n.as_str(), "VALUE")).collect();
            let out = render_template(t, &binds).unwrap();
            assert!(out.contains("VALUE") && !out.contains("{input_prompt}"));
        }
        assert_eq!(placeholders(template(SEGMENT).unwrap().body), vec!["original_action", "input_prompt"]);
        assert!(template("nope").is_err());
        assert!(default_vocabulary().contains(&"limping".to_string()));
    }

    #[test]
    fn scripted_replays_in_order() {
        let p = ScriptedProvider::new(vec![
            TranscriptEntry {
                template_id: "a".into(),
                reply: "r1".into(),
                segment: None,
            },
            TranscriptEntry {
                template_id: "a".into(),
                reply: "r2".into(),
                segment: None,
            },
        ]);
        let m = [ChatMessage::user("hi").unwrap()];
        let req = ChatRequest {
            template_id: "a",
            messages: &m,
            segment: None,
        };
        assert_eq!(p.chat(&req).unwrap().text, "r1");
        assert!(matches!(
            p.chat(&ChatRequest { template_id: "b", ..req }),
            Err(AgentError::Mismatch { .. })
        ));
        assert_eq!(p.chat(&req).unwrap().text, "r2");
        assert!(matches!(p.chat(&req), Err(AgentError::Exhausted(_))));
    }

    #[test]
    fn scripted_segment_queues() {
        let p = ScriptedProvider::from_json(
            r#"[{"template_id":"a","reply":"s1","segment":1},{"template_id":"a","reply":"g"},{"template_id":"a","reply":"s0","segment":0}]"#,
        )
        .unwrap();
        let m = [ChatMessage::user("hi").unwrap()];
        let req = |s| ChatRequest {
            template_id: "a",
            messages: &m,
            segment: s,
        };
        assert_eq!(p.chat(&req(Some(0))).unwrap().text, "s0");
        assert_eq!(p.chat(&req(Some(0))).unwrap().text, "g");
        assert_eq!(p.chat(&req(Some(1))).unwrap().text, "s1");
        assert_eq!(p.remaining(), 0);
    }

    #[test]
    fn empty_messages_rejected() {
        assert!(ChatMessage::user("  ").is_err());
    }

    #[test]
    fn rewrite_extraction() {
        let r = "Reasoning 1: ...\nOutput: A person walks in a hurry, with arms swinging faster";
        let o = extract_rewrite(r).unwrap();
        assert_eq!(o.text, "A person walks in a hurry, with arms swinging faster");
        assert!(!o.fallback);
        let o = extract_rewrite("Someone runs.").unwrap();
        assert!(o.fallback);
        assert_eq!(o.text, "Someone runs.");
        assert!(extract_rewrite("  \n").is_err());
        let o = extract_rewrite("- **Output**: A person jumps.").unwrap();
        assert_eq!(o.text, "A person jumps.");
    }

    #[test]
    fn steps_examples() {
        let s = parse_steps("step1: The man runs.\nstep2: The man kneels.", "orig").unwrap();
        assert_eq!(s.len(), 2);
        assert_eq!(s[1].prompt, "The man kneels.");
        assert_eq!(s[0].original_prompt, "orig");
        assert_eq!(parse_steps("step1: A\nstepX: B", "").unwrap().len(), 1);
        assert!(parse_steps("the man runs", "").is_err());
    }

    const TEMPLATE_EDITS_EXAMPLE: &str = r#"<LOCAL_EDITS_JSON>
[
  {
    "body part": "left arm",
    "description": "[specific movement or 'none']"
  },
  {
    "body part": "right arm",
    "description": "[specific movement or 'none']"
  },
  {
    "body part": "left leg",
    "description": "[specific movement or 'none']"
  },
  {
    "body part": "right leg",
    "description": "[specific movement or 'none']"
  }
]
</LOCAL_EDITS_JSON>"#;

    #[test]
    fn local_edits_parse() {
        let e = parse_local_edits(TEMPLATE_EDITS_EXAMPLE).unwrap();
        assert!(e.iter().all(|x| x.description.is_some()));
        let r = r#"Sure. <LOCAL_EDITS_JSON>[
 {"body part": "right leg", "description": "None"},
 {"body part": "left arm", "description": "A person's left arm extends forward"},
 {"body part": "Right Arm", "description": "none"},
 {"body part": "left leg", "description": "NONE"}]</LOCAL_EDITS_JSON>"#;
        let e = parse_local_edits(r).unwrap();
        assert_eq!(e[0].limb, Limb::LeftArm);
        assert_eq!(e[0].description.as_deref(), Some("A person's left arm extends forward"));
        assert!(e[1..].iter().all(|x| x.description.is_none()));
        let three = r#"<LOCAL_EDITS_JSON>[{"body part":"left arm","description":"x"},{"body part":"right arm","description":"x"},{"body part":"left leg","description":"x"}]</LOCAL_EDITS_JSON>"#;
        assert!(parse_local_edits(three).is_err());
    }

    #[test]
    fn bodypart_lines_parse() {
        let r = "Here you go.\nLeft arm: waves.\nRight arm: rests.\nRight leg: steps.\nLeft leg: steps back.\nLeft arm: waves twice.";
        let (b, w) = parse_bodypart_lines(r).unwrap();
        assert_eq!(b.left_arm, "waves twice.");
        assert_eq!(b.right_leg, "steps.");
        assert_eq!(w.len(), 1);
        assert!(parse_bodypart_lines("Left arm: a\nRight arm: b\nLeft leg: c").is_err());
    }

    #[test]
    fn correction_parse() {
        let c = parse_correction("Left arm: None\nRight arm: \"None\"\nLower body: None").unwrap();
        assert!(c.is_empty());
        let c = parse_correction("Left arm:   None\nRight arm:  None\nLower body: a person kneels down").unwrap();
        assert_eq!(c.lower_body.as_deref(), Some("a person kneels down"));
        assert_eq!(c.edits(), vec![(vec![Part::LL, Part::RL], "a person kneels down".to_string())]);
        assert!(parse_correction("all good").is_err());
    }

    #[test]
    fn attributes_parse() {
        let a = parse_segment_attributes("Trajectory: straight line\nDuration: 3.5 seconds").unwrap();
        assert_eq!(a.traj.as_deref(), Some("straight line"));
        assert_eq!(a.duration_s, Some(3.5));
        let a = parse_segment_attributes("Trajectory: None").unwrap();
        assert_eq!(a, SegmentAttributes::default());
        assert!(parse_segment_attributes("Duration: soon").is_err());
        assert!(parse_segment_attributes("hello").is_err());
    }

    #[test]
    fn base_motion_parse() {
        assert_eq!(parse_base_motion("\nBase Motion: A person runs quickly.\n").unwrap(), "A person runs quickly.");
        assert!(parse_base_motion("  ").is_err());
    }

    #[test]
    fn review_artifact_round_trip() {
        let m = crate::motiondata::synthetic_motion(2, 4).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r/review.json");
        let art = render_for_review(&m, &path).unwrap();
        assert_eq!(art.frames.len(), 4);
        assert!(art.frames.iter().all(|f| f.len() == 22));
        let wrist = JOINT_NAMES.iter().position(|n| *n == "left_wrist").unwrap();
        assert_eq!(art.joint_colors[wrist], Part::LU.index() as u8);
        assert_eq!(art.joint_colors[0], 5);
        assert_eq!(art.joint_colors[JOINT_NAMES.iter().position(|n| *n == "neck").unwrap()], 4);
        assert_eq!(read_review(&path).unwrap(), art);
        let lw = standard_layout().position_indices(wrist).unwrap();
        assert_eq!(art.frames[3][wrist][1], m.get(3, lw.start + 1));
    }

    #[derive(Deserialize)]
    struct StepCase {
        name: String,
        input: String,
        expected: Option<Vec<String>>,
    }

    /// Expected outputs were produced by Python's `re.findall` with the
    /// reference pattern, so this pins regex-compatible behaviour.
    #[test]
    fn steps_match_python_corpus() {
        let cases: Vec<StepCase> =
            serde_json::from_str(include_str!("../tests/data/parse_steps_corpus.json")).unwrap();
        assert_eq!(cases.len(), 20);
        for c in cases {
            let got = parse_steps(&c.input, "o").ok().map(|v| v.into_iter().map(|s| s.prompt).collect::<Vec<_>>());
            assert_eq!(got, c.expected, "case {}", c.name);
        }
    }

    #[test]
    fn malformed_local_edits_are_located_errors() {
        let good = [
            r#"{"body part":"left arm","description":"x"}"#,
            r#"{"body part":"right arm","description":"none"}"#,
            r#"{"body part":"left leg","description":"none"}"#,
            r#"{"body part":"right leg","description":"none"}"#,
        ];
        let wrap = |body: String| format!("<LOCAL_EDITS_JSON>{body}</LOCAL_EDITS_JSON>");
        let bad = [
            good.join(","),
            format!("[{}", good.join(",")),
            format!("[{}]", good[..3].join(",")),
            format!("[{},{}]", good.join(","), good[0]),
            format!("[{}]", good.join(",")).replace("left arm", "tail"),
            format!("[{}]", good.join(",")).replace(r#""body part""#, r#""part""#),
            format!("[{}]", good.join(",")).replace(r#""description":"x""#, r#""description":3"#),
            "[1,2,3,4]".to_string(),
            "{}".to_string(),
            String::new(),
        ];
        for (i, b) in bad.iter().enumerate() {
            let e = parse_local_edits(&wrap(b.clone()));
            assert!(matches!(e, Err(AgentError::Parse { .. })), "variant {i}: {e:?}");
        }
        let full = format!("[{}]", good.join(","));
        assert!(parse_local_edits(&full).is_err(), "missing tags");
        assert!(parse_local_edits(&format!("<LOCAL_EDITS_JSON>{full}")).is_err(), "missing close tag");
        let e = parse_local_edits(&wrap(format!("\n[\n{},\n]", good.join(",\n")))).unwrap_err();
        match e {
            AgentError::Parse { line, .. } => assert!(line >= 2, "line {line}"),
            other => panic!("{other:?}"),
        }
        assert!(parse_local_edits(&wrap(full)).is_ok());
    }

    #[test]
    fn malformed_corrections() {
        let bad = [
            "",
            "Looks fine to me.",
            "LeftArm: raise",
            "Left arm raise higher",
            "Upper body: None",
            "Left leg: bend",
            "Right-arm - wave",
            "arm: none",
            "Lower: kneel",
            "Body: None\nArms: None",
        ];
        for (i, b) in bad.iter().enumerate() {
            assert!(matches!(parse_correction(b), Err(AgentError::Parse { .. })), "variant {i}");
        }
        let c = parse_correction("- **Right arm**: raise it higher\nnotes").unwrap();
        assert_eq!(c.right_arm.as_deref(), Some("raise it higher"));
        assert_eq!(c.left_arm, None);
    }

    /// One-shot HTTP server answering each connection with the next canned
    /// response; returns the bound URL.
    fn stub_server(responses: Vec<(u16, String)>) -> (String, std::thread::JoinHandle<Vec<String>>) {
        use std::io::{BufRead, BufReader, Read, Write};
        let listener = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
        let url = format!("http://{}/v1/chat", listener.local_addr().unwrap());
        let h = std::thread::spawn(move || {
            let mut bodies = Vec::new();
            for (status, body) in responses {
                let (stream, _) = listener.accept().unwrap();
                let mut r = BufReader::new(stream);
                let mut len = 0usize;
                let mut auth = String::new();
                loop {
                    let mut line = String::new();
                    r.read_line(&mut line).unwrap();
                    let l = line.to_ascii_lowercase();
                    if let Some(v) = l.strip_prefix("content-length:") {
                        len = v.trim().parse().unwrap();
                    }
                    if l.starts_with("authorization:") {
                        auth = line.trim().to_string();
                    }
                    if line == "\r\n" || line.is_empty() {
                        break;
                    }
                }
                let mut buf = vec![0; len];
                r.read_exact(&mut buf).unwrap();
                bodies.push(format!("{auth}|{}", String::from_utf8(buf).unwrap()));
                let mut s = r.into_inner();
                write!(
                    s,
                    "HTTP/1.1 {status} X\r\ncontent-type: application/json\r\ncontent-length: {}\r\nconnection: close\r\n\r\n{body}",
                    body.len()
                )
                .unwrap();
            }
            bodies
        });
        (url, h)
    }

    fn live_cfg(url: String, key_env: &str) -> LiveConfig {
        LiveConfig {
            endpoint: url,
            model: "m".into(),
            api_key_env: key_env.into(),
            timeout_ms: 5000,
            max_retries: 2,
            backoff_ms: 1,
        }
    }

    #[test]
    fn live_provider_retries_then_succeeds() {
        let ok = r#"{"choices":[{"message":{"role":"assistant","content":"A person walks."}}]}"#;
        let (url, h) = stub_server(vec![(503, "{}".into()), (200, ok.into())]);
        std::env::set_var("COMA_TEST_KEY_A", "sekret");
        let p = LiveProvider::new(live_cfg(url, "COMA_TEST_KEY_A")).unwrap();
        let msgs = [ChatMessage::user("hello").unwrap()];
        let r = p
            .chat(&ChatRequest {
                template_id: REWRITE,
                messages: &msgs,
                segment: None,
            })
            .unwrap();
        assert_eq!(r.text, "A person walks.");
        assert_eq!(r.attempts, 2);
        let bodies = h.join().unwrap();
        assert!(bodies[1].contains("Bearer sekret"));
        let body: serde_json::Value = serde_json::from_str(bodies[1].split_once('|').unwrap().1).unwrap();
        assert_eq!(body["model"], "m");
        assert_eq!(body["messages"][0]["role"], "user");
        assert_eq!(body["messages"][0]["content"], "hello");
    }

    #[test]
    fn live_provider_gives_up() {
        let (url, h) = stub_server(vec![(500, "{}".into()), (500, "{}".into()), (500, "{}".into())]);
        let p = LiveProvider::new(live_cfg(url, "COMA_TEST_KEY_UNSET")).unwrap();
        let msgs = [ChatMessage::user("hello").unwrap()];
        let e = p
            .chat(&ChatRequest {
                template_id: REWRITE,
                messages: &msgs,
                segment: None,
            })
            .unwrap_err();
        assert!(matches!(e, AgentError::Provider { attempts: 3, .. }), "{e:?}");
        h.join().unwrap();
        let (url, h) = stub_server(vec![(400, "{}".into())]);
        let p = LiveProvider::new(live_cfg(url, "COMA_TEST_KEY_UNSET")).unwrap();
        let e = p
            .chat(&ChatRequest {
                template_id: REWRITE,
                messages: &msgs,
                segment: None,
            })
            .unwrap_err();
        assert!(matches!(e, AgentError::Provider { attempts: 1, .. }), "client errors are not retried");
        h.join().unwrap();
    }

    #[test]
    fn http_embedder_reads_vector() {
        let (url, h) = stub_server(vec![(200, r#"{"data":[{"embedding":[0.5,-1.0,2.0]}]}"#.into())]);
        let e = HttpEmbedder::new(live_cfg(url, "COMA_TEST_KEY_UNSET"), 3).unwrap();
        assert_eq!(e.embed("").unwrap(), None);
        assert_eq!(e.embed("walk").unwrap(), Some(vec![0.5, -1.0, 2.0]));
        h.join().unwrap();
    }
}
