//! Scripted backend for offline runs and tests.
//!
//! Rules are checked in registration order and the first match answers.
//! Unmatched requests get the default reply. Embeddings are derived from a
//! hash of the text, so they are deterministic across runs.

use std::collections::HashMap;
use std::fmt;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex, RwLock};
use std::time::Duration;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use super::{cache_key, Backend, BackendError, ChatRequest, MockRuleConfig, MockSettings, Role};

type Predicate = Arc<dyn Fn(&ChatRequest) -> bool + Send + Sync>;
type Responder = Arc<dyn Fn(&ChatRequest) -> String + Send + Sync>;

#[derive(Clone)]
pub enum Matcher {
    Any,
    /// Any message contains the substring.
    Contains(String),
    SystemContains(String),
    /// The last user message contains the substring.
    UserContains(String),
    Model(String),
    All(Vec<Matcher>),
    Custom(Predicate),
}

impl Matcher {
    pub fn contains(s: impl Into<String>) -> Self {
        Matcher::Contains(s.into())
    }

    pub fn system_contains(s: impl Into<String>) -> Self {
        Matcher::SystemContains(s.into())
    }

    pub fn user_contains(s: impl Into<String>) -> Self {
        Matcher::UserContains(s.into())
    }

    pub fn custom(f: impl Fn(&ChatRequest) -> bool + Send + Sync + 'static) -> Self {
        Matcher::Custom(Arc::new(f))
    }

    pub fn matches(&self, req: &ChatRequest) -> bool {
        match self {
            Matcher::Any => true,
            Matcher::Contains(s) => req.messages.iter().any(|m| m.content.contains(s.as_str())),
            Matcher::SystemContains(s) => req
                .messages
                .iter()
                .any(|m| m.role == Role::System && m.content.contains(s.as_str())),
            Matcher::UserContains(s) => req.last_user_text().contains(s.as_str()),
            Matcher::Model(m) => req.model == *m,
            Matcher::All(ms) => ms.iter().all(|m| m.matches(req)),
            Matcher::Custom(f) => f(req),
        }
    }
}

impl fmt::Debug for Matcher {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Matcher::Any => write!(f, "Any"),
            Matcher::Contains(s) => write!(f, "Contains({s:?})"),
            Matcher::SystemContains(s) => write!(f, "SystemContains({s:?})"),
            Matcher::UserContains(s) => write!(f, "UserContains({s:?})"),
            Matcher::Model(s) => write!(f, "Model({s:?})"),
            Matcher::All(ms) => f.debug_tuple("All").field(ms).finish(),
            Matcher::Custom(_) => write!(f, "Custom(..)"),
        }
    }
}

#[derive(Clone)]
pub enum MockReply {
    Text(String),
    Dynamic(Responder),
    Transient,
    Timeout,
    Auth,
    Fatal,
}

impl MockReply {
    pub fn text(s: impl Into<String>) -> Self {
        MockReply::Text(s.into())
    }

    /// Parses the config form: `!transient`, `!timeout`, `!auth`, `!fatal`
    /// or literal text.
    pub fn parse(s: &str) -> Self {
        match s {
            "!transient" => MockReply::Transient,
            "!timeout" => MockReply::Timeout,
            "!auth" => MockReply::Auth,
            "!fatal" => MockReply::Fatal,
            other => MockReply::Text(other.to_string()),
        }
    }

    fn answer(&self, req: &ChatRequest) -> Result<String, BackendError> {
        match self {
            MockReply::Text(s) => Ok(s.clone()),
            MockReply::Dynamic(f) => Ok(f(req)),
            MockReply::Transient => Err(BackendError::Transient("scripted transient failure".into())),
            MockReply::Timeout => Err(BackendError::Timeout),
            MockReply::Auth => Err(BackendError::Auth("scripted auth failure".into())),
            MockReply::Fatal => Err(BackendError::Fatal("scripted failure".into())),
        }
    }
}

impl From<&str> for MockReply {
    fn from(s: &str) -> Self {
        MockReply::text(s)
    }
}

impl From<String> for MockReply {
    fn from(s: String) -> Self {
        MockReply::Text(s)
    }
}

struct Rule {
    matcher: Matcher,
    replies: Vec<MockReply>,
    cursor: AtomicUsize,
}

impl Rule {
    fn next_reply(&self) -> &MockReply {
        let i = self.cursor.fetch_add(1, Ordering::SeqCst);
        &self.replies[i.min(self.replies.len() - 1)]
    }
}

pub struct MockBackend {
    rules: RwLock<Vec<Rule>>,
    default: MockReply,
    embedding_dim: usize,
    embeddings: HashMap<String, Vec<f64>>,
    jitter: Option<(Duration, u64)>,
    calls: AtomicUsize,
    embedded: AtomicUsize,
    log: Mutex<Vec<ChatRequest>>,
}

impl fmt::Debug for MockBackend {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("MockBackend")
            .field("rules", &self.rules.read().unwrap().len())
            .field("calls", &self.calls())
            .finish()
    }
}

#[derive(Default)]
pub struct MockBuilder {
    rules: Vec<Rule>,
    default: Option<MockReply>,
    embedding_dim: Option<usize>,
    embeddings: HashMap<String, Vec<f64>>,
    jitter: Option<(Duration, u64)>,
}

impl MockBuilder {
    pub fn on(mut self, matcher: Matcher, reply: impl Into<MockReply>) -> Self {
        self.rules.push(Rule {
            matcher,
            replies: vec![reply.into()],
            cursor: AtomicUsize::new(0),
        });
        self
    }

    /// Replies served in order on successive matches; the last repeats.
    pub fn on_sequence(mut self, matcher: Matcher, replies: Vec<MockReply>) -> Self {
        assert!(!replies.is_empty(), "reply sequence must be non-empty");
        self.rules.push(Rule {
            matcher,
            replies,
            cursor: AtomicUsize::new(0),
        });
        self
    }

    pub fn respond_with(
        self,
        matcher: Matcher,
        f: impl Fn(&ChatRequest) -> String + Send + Sync + 'static,
    ) -> Self {
        self.on(matcher, MockReply::Dynamic(Arc::new(f)))
    }

    pub fn default_reply(mut self, reply: impl Into<MockReply>) -> Self {
        self.default = Some(reply.into());
        self
    }

    pub fn embedding_dim(mut self, dim: usize) -> Self {
        self.embedding_dim = Some(dim);
        self
    }

    /// Fixed embedding for a text; others are hash-derived.
    pub fn embedding(mut self, text: impl Into<String>, v: Vec<f64>) -> Self {
        self.embeddings.insert(text.into(), v);
        self
    }

    /// Sleeps a per-request pseudo-random time in `[0, max)` before
    /// answering. The delay depends only on the request and the seed.
    pub fn latency_jitter(mut self, max: Duration, seed: u64) -> Self {
        self.jitter = Some((max, seed));
        self
    }

    pub fn build(self) -> MockBackend {
        MockBackend {
            rules: RwLock::new(self.rules),
            default: self.default.unwrap_or_else(|| MockReply::text("Neutral")),
            embedding_dim: self.embedding_dim.unwrap_or(32),
            embeddings: self.embeddings,
            jitter: self.jitter,
            calls: AtomicUsize::new(0),
            embedded: AtomicUsize::new(0),
            log: Mutex::new(Vec::new()),
        }
    }
}

fn matcher_from_config(rule: &MockRuleConfig) -> Matcher {
    let mut parts = Vec::new();
    if let Some(s) = &rule.contains {
        parts.push(Matcher::contains(s.clone()));
    }
    if let Some(s) = &rule.system_contains {
        parts.push(Matcher::system_contains(s.clone()));
    }
    if let Some(s) = &rule.user_contains {
        parts.push(Matcher::user_contains(s.clone()));
    }
    if let Some(s) = &rule.model {
        parts.push(Matcher::Model(s.clone()));
    }
    match parts.len() {
        0 => Matcher::Any,
        1 => parts.pop().unwrap(),
        _ => Matcher::All(parts),
    }
}

impl MockBackend {
    pub fn builder() -> MockBuilder {
        MockBuilder::default()
    }

    pub fn from_settings(s: MockSettings) -> Self {
        let mut b = MockBackend::builder()
            .default_reply(MockReply::parse(&s.default))
            .embedding_dim(s.embedding_dim);
        if s.latency_ms > 0 {
            b = b.latency_jitter(Duration::from_millis(s.latency_ms), s.seed);
        }
        for rule in &s.rules {
            let mut replies: Vec<MockReply> = rule.replies.iter().map(|r| MockReply::parse(r)).collect();
            if let Some(r) = &rule.reply {
                replies.insert(0, MockReply::parse(r));
            }
            if replies.is_empty() {
                replies.push(MockReply::parse(&s.default));
            }
            b = b.on_sequence(matcher_from_config(rule), replies);
        }
        b.build()
    }

    /// Appends rules after construction; earlier rules keep precedence.
    pub fn register(&self, script: Vec<(Matcher, MockReply)>) {
        let mut rules = self.rules.write().unwrap();
        rules.extend(script.into_iter().map(|(matcher, reply)| Rule {
            matcher,
            replies: vec![reply],
            cursor: AtomicUsize::new(0),
        }));
    }

    /// Chat attempts received, failures included.
    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }

    /// Texts embedded by the provider (cache hits excluded).
    pub fn embedded_texts(&self) -> usize {
        self.embedded.load(Ordering::SeqCst)
    }

    pub fn requests(&self) -> Vec<ChatRequest> {
        self.log.lock().unwrap().clone()
    }

    pub fn reset_counters(&self) {
        self.calls.store(0, Ordering::SeqCst);
        self.embedded.store(0, Ordering::SeqCst);
        self.log.lock().unwrap().clear();
    }

    fn hashed_embedding(&self, text: &str) -> Vec<f64> {
        let digest = Sha256::digest(text.as_bytes());
        let mut seed = [0u8; 32];
        seed.copy_from_slice(&digest);
        let mut rng = ChaCha8Rng::from_seed(seed);
        (0..self.embedding_dim).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }
}

impl Backend for MockBackend {
    fn chat(&self, req: &ChatRequest) -> Result<String, BackendError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        self.log.lock().unwrap().push(req.clone());
        if let Some((max, seed)) = self.jitter {
            let key = cache_key(req);
            let h = u64::from_str_radix(&key[..16], 16).unwrap_or(0) ^ seed;
            let micros = max.as_micros().max(1) as u64;
            std::thread::sleep(Duration::from_micros(h % micros));
        }
        let rules = self.rules.read().unwrap();
        match rules.iter().find(|r| r.matcher.matches(req)) {
            Some(rule) => rule.next_reply().answer(req),
            None => self.default.answer(req),
        }
    }

    fn embed(&self, _model: &str, texts: &[String]) -> Result<Vec<Vec<f64>>, BackendError> {
        self.embedded.fetch_add(texts.len(), Ordering::SeqCst);
        Ok(texts
            .iter()
            .map(|t| {
                self.embeddings
                    .get(t)
                    .cloned()
                    .unwrap_or_else(|| self.hashed_embedding(t))
            })
            .collect())
    }
}
