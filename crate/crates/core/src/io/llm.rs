//! Optional chat-completion client that asks a language model for semantic
//! neighbors of each class name.
//!
//! Wire contract: `POST endpoint` with a bearer token and body
//! `{"model": .., "messages": [{"role": "user", "content": ..}]}`; the reply
//! text is `choices[0].message.content`, expected to hold a Python-style
//! dictionary `{'class': ['term', ...], ...}`.

use std::cell::{Cell, RefCell};
use std::collections::{HashSet, VecDeque};
use std::path::{Path, PathBuf};
use std::time::Duration;

use indexmap::IndexMap;
use log::warn;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::prompting::NeighborSet;

pub const DEFAULT_TOKEN_ENV: &str = "SEPT_LLM_TOKEN";
pub const MAX_ATTEMPTS: usize = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LlmClientConfig {
    pub endpoint: Option<String>,
    pub model: String,
    /// Name of the environment variable holding the bearer token.
    pub token_env: String,
    pub timeout_secs: u64,
    /// When set, neighbors are read from this file and no request is made.
    pub offline_fixture: Option<PathBuf>,
    pub cache_dir: Option<PathBuf>,
}

impl Default for LlmClientConfig {
    fn default() -> Self {
        Self {
            endpoint: None,
            model: "gpt-4o".into(),
            token_env: DEFAULT_TOKEN_ENV.into(),
            timeout_secs: 60,
            offline_fixture: None,
            cache_dir: None,
        }
    }
}

impl LlmClientConfig {
    pub fn is_offline(&self) -> bool {
        self.offline_fixture.is_some()
    }

    pub fn validate(&self) -> Result<()> {
        if self.is_offline() {
            return Ok(());
        }
        if self.endpoint.as_deref().is_none_or(|e| e.trim().is_empty()) {
            return Err(Error::Config("online neighbor generation needs an endpoint (or an offline fixture)".into()));
        }
        if std::env::var(&self.token_env).map_or(true, |t| t.is_empty()) {
            return Err(Error::Config(format!("environment variable {} holding the API token is not set", self.token_env)));
        }
        if self.timeout_secs == 0 {
            return Err(Error::Config("request timeout must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: String,
    pub content: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub model: String,
    pub messages: Vec<ChatMessage>,
}

/// Sends one chat request and returns the reply text.
pub trait ChatTransport {
    fn send(&self, request: &ChatRequest) -> Result<String>;
}

/// Blocking HTTPS transport.
pub struct HttpTransport {
    client: reqwest::blocking::Client,
    endpoint: String,
    token: String,
}

impl HttpTransport {
    pub fn from_config(config: &LlmClientConfig) -> Result<Self> {
        config.validate()?;
        let endpoint = config.endpoint.clone().unwrap_or_default();
        let token = std::env::var(&config.token_env).unwrap_or_default();
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(config.timeout_secs))
            .build()
            .map_err(|e| Error::Network(e.to_string()))?;
        Ok(Self { client, endpoint, token })
    }
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<Choice>,
}

#[derive(Deserialize)]
struct Choice {
    message: ChatMessage,
}

impl ChatTransport for HttpTransport {
    fn send(&self, request: &ChatRequest) -> Result<String> {
        let resp = self
            .client
            .post(&self.endpoint)
            .bearer_auth(&self.token)
            .json(request)
            .send()
            .map_err(|e| Error::Network(e.to_string()))?;
        let status = resp.status();
        let body = resp.text().map_err(|e| Error::Network(e.to_string()))?;
        if !status.is_success() {
            return Err(Error::Network(format!("HTTP {status}: {body}")));
        }
        let parsed: ChatResponse =
            serde_json::from_str(&body).map_err(|e| Error::Parse { message: format!("unexpected response shape: {e}"), raw: Some(body.clone()) })?;
        parsed
            .choices
            .into_iter()
            .next()
            .map(|c| c.message.content)
            .ok_or_else(|| Error::Parse { message: "response has no choices".into(), raw: Some(body) })
    }
}

/// Scripted transport for tests: replays queued replies and counts calls.
#[derive(Default)]
pub struct MockTransport {
    replies: RefCell<VecDeque<Result<String>>>,
    calls: Cell<usize>,
    last_request: RefCell<Option<ChatRequest>>,
}

impl MockTransport {
    pub fn new(replies: Vec<Result<String>>) -> Self {
        Self { replies: RefCell::new(replies.into()), ..Default::default() }
    }

    pub fn calls(&self) -> usize {
        self.calls.get()
    }

    pub fn last_request(&self) -> Option<ChatRequest> {
        self.last_request.borrow().clone()
    }
}

impl ChatTransport for MockTransport {
    fn send(&self, request: &ChatRequest) -> Result<String> {
        self.calls.set(self.calls.get() + 1);
        *self.last_request.borrow_mut() = Some(request.clone());
        self.replies.borrow_mut().pop_front().unwrap_or_else(|| Err(Error::Network("no scripted reply left".into())))
    }
}

/// Instruction text sent to the model.
pub fn neighbor_prompt(class_names: &[String], n: usize) -> String {
    let list = class_names.iter().map(|c| format!("'{c}'")).collect::<Vec<_>>().join(", ");
    format!(
        "Below is the label set of an audio classification dataset: [{list}].\n\n\
         For every label, propose exactly {n} related words or short phrases that a listener might use \
         to describe that kind of sound. Focus on acoustic character, typical sources and listening context.\n\
         Rules:\n\
         - Terms for one label should not overlap with the terms proposed for any other label.\n\
         - Within a label, cover different facets rather than repeating near-synonyms.\n\
         - Never use any of the other labels from the list as a term.\n\n\
         Think about what the labels have in common first, then answer with only a Python dictionary \
         of the form {{'label': ['term 1', 'term 2', ...], ...}} using the labels exactly as given."
    )
}

pub fn build_request(class_names: &[String], n: usize, model: &str) -> ChatRequest {
    ChatRequest { model: model.to_string(), messages: vec![ChatMessage { role: "user".into(), content: neighbor_prompt(class_names, n) }] }
}

/// Cache key over the ordered class list and the model id.
pub fn cache_key(class_names: &[String], model: &str) -> String {
    let mut h = Sha256::new();
    for c in class_names {
        h.update(c.as_bytes());
        h.update([0u8]);
    }
    let classes = hex::encode(h.finalize());
    let model: String = model.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '.' { c } else { '_' }).collect();
    format!("{}-{model}", &classes[..16])
}

/// Generates (or loads) `n` neighbors per class.
///
/// Offline mode returns the fixture as written. Otherwise a cached reply for
/// the same classes and model is reused; a fresh request is retried on network
/// errors up to three times. Unparseable replies are saved next to the cache
/// (or in the system temp directory) and reported with that path.
pub fn generate_neighbors(class_names: &[String], config: &LlmClientConfig, n: usize, transport: &dyn ChatTransport) -> Result<NeighborSet> {
    if n == 0 {
        return Err(Error::Config("neighbor count must be positive".into()));
    }
    if let Some(path) = &config.offline_fixture {
        return load_neighbors(path);
    }
    let key = cache_key(class_names, &config.model);
    let cache_file = config.cache_dir.as_ref().map(|d| d.join(format!("{key}.json")));
    if let Some(f) = cache_file.as_ref().filter(|f| f.exists()) {
        return load_neighbors(f);
    }
    let request = build_request(class_names, n, &config.model);
    let mut last = None;
    let mut reply = None;
    for attempt in 1..=MAX_ATTEMPTS {
        match transport.send(&request) {
            Ok(text) => {
                reply = Some(text);
                break;
            }
            Err(e @ Error::Network(_)) => {
                warn!("neighbor request attempt {attempt}/{MAX_ATTEMPTS} failed: {e}");
                last = Some(e);
            }
            Err(e) => return Err(e),
        }
    }
    let text = match reply {
        Some(t) => t,
        None => return Err(last.unwrap_or_else(|| Error::Network("no attempt made".into()))),
    };
    let set = match parse_reply(&text, class_names, n) {
        Ok(s) => s,
        Err(message) => {
            let dir = config.cache_dir.clone().unwrap_or_else(std::env::temp_dir);
            let raw_path = dir.join(format!("{key}.raw.txt"));
            std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            std::fs::write(&raw_path, &text).map_err(|e| Error::io(&raw_path, e))?;
            return Err(Error::Parse { message, raw: Some(raw_path.display().to_string()) });
        }
    };
    if let Some(f) = &cache_file {
        if let Some(dir) = f.parent() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        std::fs::write(f, serde_json::to_string_pretty(&set)? + "\n").map_err(|e| Error::io(f, e))?;
    }
    Ok(set)
}

pub fn load_neighbors(path: &Path) -> Result<NeighborSet> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(Error::from)
}

/// Extracts the dictionary from a reply and checks it against the class list.
pub fn parse_reply(text: &str, class_names: &[String], n: usize) -> std::result::Result<NeighborSet, String> {
    let start = text.find('{').ok_or("reply contains no '{'")?;
    let dict = PyDictParser { chars: text[start..].chars().collect(), pos: 0 }.dict()?;
    let norm = |s: &str| s.trim().to_lowercase();
    let banned: HashSet<String> = class_names.iter().map(|c| norm(c)).collect();
    let mut out = IndexMap::new();
    for class in class_names {
        let terms = dict
            .iter()
            .find(|(k, _)| norm(k) == norm(class))
            .map(|(_, v)| v)
            .ok_or_else(|| format!("reply has no entry for class '{class}'"))?;
        if terms.len() < n {
            return Err(format!("class '{class}' has {} terms, expected {n}", terms.len()));
        }
        let terms: Vec<String> = terms.iter().take(n).cloned().collect();
        if let Some(bad) = terms.iter().find(|t| norm(t) != norm(class) && banned.contains(&norm(t))) {
            return Err(format!("neighbor '{bad}' of class '{class}' is another class name"));
        }
        out.insert(class.clone(), terms);
    }
    NeighborSet::with_len(out, n).map_err(|e| e.to_string())
}

/// Minimal reader for `{'key': ['a', "b", bare words], ...}`.
struct PyDictParser {
    chars: Vec<char>,
    pos: usize,
}

impl PyDictParser {
    fn skip_ws(&mut self) {
        while self.chars.get(self.pos).is_some_and(|c| c.is_whitespace()) {
            self.pos += 1;
        }
    }

    fn peek(&mut self) -> Option<char> {
        self.skip_ws();
        self.chars.get(self.pos).copied()
    }

    fn expect(&mut self, c: char) -> std::result::Result<(), String> {
        match self.peek() {
            Some(x) if x == c => {
                self.pos += 1;
                Ok(())
            }
            other => Err(format!("expected '{c}' at offset {}, found {other:?}", self.pos)),
        }
    }

    fn string(&mut self) -> std::result::Result<String, String> {
        match self.peek() {
            Some(q @ ('\'' | '"')) => {
                self.pos += 1;
                let mut s = String::new();
                loop {
                    match self.chars.get(self.pos).copied() {
                        None => return Err("unterminated string".into()),
                        Some('\\') => {
                            if let Some(&c) = self.chars.get(self.pos + 1) {
                                s.push(c);
                            }
                            self.pos += 2;
                        }
                        Some(c) if c == q => {
                            self.pos += 1;
                            return Ok(s);
                        }
                        Some(c) => {
                            s.push(c);
                            self.pos += 1;
                        }
                    }
                }
            }
            Some(_) => {
                let begin = self.pos;
                while self.chars.get(self.pos).is_some_and(|c| !matches!(c, ',' | ']' | ':' | '}' | '\n')) {
                    self.pos += 1;
                }
                let s: String = self.chars[begin..self.pos].iter().collect();
                let s = s.trim().to_string();
                if s.is_empty() {
                    Err(format!("empty item at offset {begin}"))
                } else {
                    Ok(s)
                }
            }
            None => Err("unexpected end of reply".into()),
        }
    }

    fn list(&mut self) -> std::result::Result<Vec<String>, String> {
        self.expect('[')?;
        let mut items = Vec::new();
        loop {
            match self.peek() {
                Some(']') => {
                    self.pos += 1;
                    return Ok(items);
                }
                Some(',') => self.pos += 1,
                _ => items.push(self.string()?),
            }
        }
    }

    fn dict(mut self) -> std::result::Result<Vec<(String, Vec<String>)>, String> {
        self.expect('{')?;
        let mut entries = Vec::new();
        loop {
            match self.peek() {
                Some('}') => return Ok(entries),
                Some(',') => self.pos += 1,
                _ => {
                    let key = self.string()?;
                    self.expect(':')?;
                    entries.push((key, self.list()?));
                }
            }
        }
    }
}
