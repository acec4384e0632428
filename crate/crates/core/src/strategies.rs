//! Single-model prompting strategies: zero-shot, zero-shot with explanation
//! (ZSE), ZSE with a correction pass (ZSEC), few-shot, and the fine-tuned
//! model's inference format.
//!
//! Every strategy degrades a malformed final answer to a flagged `Neutral`
//! prediction rather than failing.

use std::collections::HashMap;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::dataset::{Dataset, PredictionFile, RunManifest};
use crate::gateway::{parallel_map, ChatMessage, Gateway, GatewayError, GatewayStats};
use crate::knn::{EmbeddingIndex, EmbeddingVector};
use crate::label::{parse_explained_output, parse_label, EmotionLabel, Instance, ModelId, Prediction};
use crate::prompts::{self, templates_checksum, TemplateId};

#[derive(Debug, Error)]
pub enum StrategyError {
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Template(#[from] prompts::TemplateError),
}

impl StrategyError {
    /// Errors that should abort a whole run instead of degrading one instance.
    pub fn is_fatal(&self) -> bool {
        match self {
            StrategyError::Config(_) | StrategyError::Template(_) => true,
            StrategyError::Gateway(g) => matches!(g, GatewayError::AuthFailure(_) | GatewayError::Config(_)),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum StrategyKind {
    ZeroShot,
    Zse,
    Zsec,
    FewShot,
    Finetuned,
}

impl StrategyKind {
    pub fn name(self) -> &'static str {
        match self {
            StrategyKind::ZeroShot => "zero-shot",
            StrategyKind::Zse => "zse",
            StrategyKind::Zsec => "zsec",
            StrategyKind::FewShot => "few-shot",
            StrategyKind::Finetuned => "finetuned",
        }
    }
}

/// Which first-stage labels ZSEC sends to the second model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum CorrectionScope {
    All,
    #[default]
    Neutral,
    None,
}

impl CorrectionScope {
    pub fn covers(self, label: EmotionLabel) -> bool {
        match self {
            CorrectionScope::All => true,
            CorrectionScope::Neutral => label == EmotionLabel::Neutral,
            CorrectionScope::None => false,
        }
    }
}

#[derive(Clone)]
pub enum ExampleSelector {
    /// Uniform sample without replacement, seeded per instance.
    Random { seed: u64 },
    /// Nearest training tweets by embedding, nearest first.
    Knn {
        index: Arc<EmbeddingIndex>,
        queries: Arc<HashMap<String, EmbeddingVector>>,
    },
}

impl std::fmt::Debug for ExampleSelector {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ExampleSelector::Random { seed } => write!(f, "Random {{ seed: {seed} }}"),
            ExampleSelector::Knn { index, queries } => {
                write!(f, "Knn {{ index: {}, queries: {} }}", index.len(), queries.len())
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct FewShotConfig {
    pub selector: ExampleSelector,
    pub examples: usize,
    pub train: Arc<Dataset>,
}

pub const DEFAULT_FEW_SHOT_EXAMPLES: usize = 6;

#[derive(Debug, Clone)]
pub struct StrategyConfig {
    pub kind: StrategyKind,
    pub model_id: ModelId,
    pub gateway: Arc<Gateway>,
    pub correction_scope: CorrectionScope,
    /// Second model for ZSEC; the primary gateway when absent.
    pub second_gateway: Option<Arc<Gateway>>,
    pub few_shot: Option<FewShotConfig>,
    pub seed: u64,
}

impl StrategyConfig {
    pub fn new(kind: StrategyKind, model_id: ModelId, gateway: Arc<Gateway>) -> Self {
        StrategyConfig {
            kind,
            model_id,
            gateway,
            correction_scope: CorrectionScope::default(),
            second_gateway: None,
            few_shot: None,
            seed: 0,
        }
    }

    pub fn with_correction(mut self, scope: CorrectionScope, second: Option<Arc<Gateway>>) -> Self {
        self.correction_scope = scope;
        self.second_gateway = second;
        self
    }

    pub fn with_few_shot(mut self, fs: FewShotConfig) -> Self {
        self.few_shot = Some(fs);
        self
    }

    fn second(&self) -> &Arc<Gateway> {
        self.second_gateway.as_ref().unwrap_or(&self.gateway)
    }

    /// Checks everything that would otherwise fail identically per instance.
    pub fn validate(&self, d: Option<&Dataset>) -> Result<(), StrategyError> {
        if self.kind != StrategyKind::FewShot {
            return Ok(());
        }
        let fs = self
            .few_shot
            .as_ref()
            .ok_or_else(|| StrategyError::Config("few-shot needs an example selector".into()))?;
        if fs.examples == 0 {
            return Err(StrategyError::Config("few-shot example count must be >= 1".into()));
        }
        match &fs.selector {
            ExampleSelector::Random { .. } => {
                let labeled = fs.train.instances.iter().filter(|i| i.gold.is_some()).count();
                if labeled == 0 {
                    return Err(StrategyError::Config("few-shot training set has no labeled instances".into()));
                }
            }
            ExampleSelector::Knn { index, queries } => {
                if index.is_empty() {
                    return Err(StrategyError::Config("few-shot KNN index is empty".into()));
                }
                if let Some(missing) = d.and_then(|d| d.instances.iter().find(|i| !queries.contains_key(&i.id))) {
                    return Err(StrategyError::Config(format!(
                        "no query embedding for instance {:?}",
                        missing.id
                    )));
                }
            }
        }
        Ok(())
    }
}

/// One classified instance plus non-fatal flags raised on the way.
#[derive(Debug, Clone, PartialEq)]
pub struct Classified {
    pub prediction: Prediction,
    pub flags: u32,
}

impl Classified {
    fn clean(prediction: Prediction) -> Self {
        Classified { prediction, flags: 0 }
    }
}

pub fn finetuned_messages(text: &str) -> Result<Vec<ChatMessage>, StrategyError> {
    Ok(vec![
        ChatMessage::system(prompts::render(TemplateId::FinetuneSystem, &[])?),
        ChatMessage::user(text),
    ])
}

pub fn zero_shot_messages(text: &str) -> Result<Vec<ChatMessage>, StrategyError> {
    Ok(vec![
        ChatMessage::system(prompts::render(TemplateId::ZeroShotSystem, &[])?),
        ChatMessage::user(prompts::render(TemplateId::ZeroShotUser, &[("tweet_text", text)])?),
    ])
}

/// Zero-shot frame with one user/assistant pair per example before the query.
pub fn few_shot_messages(examples: &[(&str, EmotionLabel)], text: &str) -> Result<Vec<ChatMessage>, StrategyError> {
    let mut msgs = vec![ChatMessage::system(prompts::render(TemplateId::ZeroShotSystem, &[])?)];
    for (ex_text, label) in examples {
        msgs.push(ChatMessage::user(prompts::render(
            TemplateId::ZeroShotUser,
            &[("tweet_text", ex_text)],
        )?));
        msgs.push(ChatMessage::assistant(prompts::render(
            TemplateId::FewShotAssistant,
            &[("label", label.canonical_text())],
        )?));
    }
    msgs.push(ChatMessage::user(prompts::render(TemplateId::ZeroShotUser, &[("tweet_text", text)])?));
    Ok(msgs)
}

pub fn zse_messages(text: &str) -> Result<Vec<ChatMessage>, StrategyError> {
    Ok(vec![
        ChatMessage::system(prompts::render(TemplateId::ZseSystem, &[])?),
        ChatMessage::user(prompts::render(TemplateId::ZseUser, &[("tweet", text)])?),
    ])
}

pub fn zse_correction_messages(text: &str, first: EmotionLabel) -> Result<Vec<ChatMessage>, StrategyError> {
    Ok(vec![
        ChatMessage::system(prompts::render(
            TemplateId::ZseCorrectionSystem,
            &[("emotion", first.canonical_text())],
        )?),
        ChatMessage::user(prompts::render(TemplateId::ZseUser, &[("tweet", text)])?),
    ])
}

fn single_label(inst: &Instance, cfg: &StrategyConfig, msgs: Vec<ChatMessage>) -> Result<Classified, StrategyError> {
    let raw = cfg.gateway.complete(&cfg.gateway.request(msgs))?;
    let p = match parse_label(&raw) {
        Ok(l) => Prediction::labeled(&inst.id, l, cfg.model_id.clone(), raw),
        Err(_) => Prediction::fallback(&inst.id, cfg.model_id.clone(), raw),
    };
    Ok(Classified::clean(p))
}

pub fn zero_shot_classify(inst: &Instance, cfg: &StrategyConfig) -> Result<Classified, StrategyError> {
    single_label(inst, cfg, zero_shot_messages(&inst.text)?)
}

pub fn finetuned_classify(inst: &Instance, cfg: &StrategyConfig) -> Result<Classified, StrategyError> {
    single_label(inst, cfg, finetuned_messages(&inst.text)?)
}

pub fn zse_classify(inst: &Instance, cfg: &StrategyConfig) -> Result<Classified, StrategyError> {
    let raw = cfg.gateway.complete(&cfg.gateway.request(zse_messages(&inst.text)?))?;
    let p = match parse_explained_output(&raw) {
        Ok((expl, l)) => Prediction::labeled(&inst.id, l, cfg.model_id.clone(), raw).with_explanation(expl),
        Err(_) => Prediction::fallback(&inst.id, cfg.model_id.clone(), raw),
    };
    Ok(Classified::clean(p))
}

pub const STAGE_SEPARATOR: &str = "\n--- first stage ---\n";

/// ZSE, then (when the scope covers the first label) a second model confirms
/// or replaces the label. A malformed second answer keeps the first result
/// and raises a flag.
pub fn zsec_classify(inst: &Instance, cfg: &StrategyConfig) -> Result<Classified, StrategyError> {
    let first = zse_classify(inst, cfg)?.prediction;
    if !cfg.correction_scope.covers(first.label) {
        return Ok(Classified::clean(first));
    }
    let second = cfg.second();
    let raw = second.complete(&second.request(zse_correction_messages(&inst.text, first.label)?))?;
    let combined_raw = format!("{raw}{STAGE_SEPARATOR}{}", first.raw_output);
    match parse_explained_output(&raw) {
        Ok((expl, label)) => Ok(Classified::clean(
            Prediction::labeled(&inst.id, label, cfg.model_id.clone(), combined_raw).with_explanation(expl),
        )),
        Err(_) => {
            let mut kept = first;
            kept.raw_output = combined_raw;
            Ok(Classified {
                prediction: kept,
                flags: 1,
            })
        }
    }
}

fn instance_seed(seed: u64, id: &str) -> u64 {
    let d = Sha256::digest(id.as_bytes());
    seed ^ u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
}

/// The (text, label) examples shown before `inst`.
pub fn select_examples<'a>(inst: &Instance, fs: &'a FewShotConfig) -> Result<Vec<(&'a str, EmotionLabel)>, StrategyError> {
    match &fs.selector {
        ExampleSelector::Random { seed } => {
            let pool: Vec<(&str, EmotionLabel)> = fs
                .train
                .instances
                .iter()
                .filter(|t| t.id != inst.id)
                .filter_map(|t| t.gold.map(|g| (t.text.as_str(), g)))
                .collect();
            if pool.is_empty() {
                return Err(StrategyError::Config("few-shot training set has no labeled instances".into()));
            }
            let mut rng = ChaCha8Rng::seed_from_u64(instance_seed(*seed, &inst.id));
            Ok(pool.choose_multiple(&mut rng, fs.examples.min(pool.len())).copied().collect())
        }
        ExampleSelector::Knn { index, queries } => {
            let q = queries
                .get(&inst.id)
                .ok_or_else(|| StrategyError::Config(format!("no query embedding for instance {:?}", inst.id)))?;
            let texts = fs.train.by_id();
            let k = (fs.examples + 1).min(index.len());
            let ranked = index
                .neighbors(q, k)
                .map_err(|e| StrategyError::Config(e.to_string()))?;
            ranked
                .into_iter()
                .filter(|n| n.id != inst.id)
                .take(fs.examples)
                .map(|n| {
                    let t = texts.get(n.id).ok_or_else(|| {
                        StrategyError::Config(format!("index id {:?} not in the training set", n.id))
                    })?;
                    Ok((t.text.as_str(), n.label))
                })
                .collect()
        }
    }
}

pub fn few_shot_classify(inst: &Instance, cfg: &StrategyConfig) -> Result<Classified, StrategyError> {
    let fs = cfg
        .few_shot
        .as_ref()
        .ok_or_else(|| StrategyError::Config("few-shot needs an example selector".into()))?;
    let examples = select_examples(inst, fs)?;
    single_label(inst, cfg, few_shot_messages(&examples, &inst.text)?)
}

pub fn classify(inst: &Instance, cfg: &StrategyConfig) -> Result<Classified, StrategyError> {
    match cfg.kind {
        StrategyKind::ZeroShot => zero_shot_classify(inst, cfg),
        StrategyKind::Zse => zse_classify(inst, cfg),
        StrategyKind::Zsec => zsec_classify(inst, cfg),
        StrategyKind::FewShot => few_shot_classify(inst, cfg),
        StrategyKind::Finetuned => finetuned_classify(inst, cfg),
    }
}

/// Snapshot of the counters of a set of distinct gateways.
pub(crate) struct StatsProbe {
    gateways: Vec<Arc<Gateway>>,
    before: Vec<GatewayStats>,
}

impl StatsProbe {
    pub(crate) fn new<'a>(gws: impl IntoIterator<Item = &'a Arc<Gateway>>) -> Self {
        let mut gateways: Vec<Arc<Gateway>> = Vec::new();
        for g in gws {
            if !gateways.iter().any(|x| Arc::ptr_eq(x, g)) {
                gateways.push(g.clone());
            }
        }
        let before = gateways.iter().map(|g| g.stats()).collect();
        StatsProbe { gateways, before }
    }

    /// (backend calls, cache hits) since construction.
    pub(crate) fn delta(&self) -> (u64, u64) {
        self.gateways
            .iter()
            .zip(&self.before)
            .map(|(g, b)| {
                let now = g.stats();
                (now.backend_calls - b.backend_calls, now.cache_hits - b.cache_hits)
            })
            .fold((0, 0), |acc, x| (acc.0 + x.0, acc.1 + x.1))
    }
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub predictions: PredictionFile,
    pub manifest: RunManifest,
}

/// Classifies every instance with the configured strategy. Instances run
/// concurrently under the gateway's in-flight bound; output follows dataset
/// order. Per-instance gateway failures become flagged Neutral fallbacks.
pub fn run_strategy(d: &Dataset, cfg: &StrategyConfig) -> Result<RunOutput, StrategyError> {
    cfg.validate(Some(d))?;
    let mut manifest = RunManifest::new(cfg.kind.name(), cfg.model_id.as_str(), cfg.seed);
    let probe = StatsProbe::new([&cfg.gateway].into_iter().chain(cfg.second_gateway.as_ref()));

    let results = parallel_map(&d.instances, cfg.gateway.max_in_flight(), |inst| classify(inst, cfg));
    let mut preds = Vec::with_capacity(results.len());
    let mut flags = 0u64;
    for (inst, r) in d.instances.iter().zip(results) {
        match r {
            Ok(c) => {
                flags += u64::from(c.flags);
                preds.push(c.prediction);
            }
            Err(e) if e.is_fatal() => return Err(e),
            Err(e) => preds.push(Prediction::fallback(&inst.id, cfg.model_id.clone(), format!("error: {e}"))),
        }
    }
    let predictions = PredictionFile::new(cfg.model_id.clone(), preds)
        .map_err(|e| StrategyError::Config(e.to_string()))?;

    let (calls, hits) = probe.delta();
    manifest.backend_model = cfg.gateway.model().to_string();
    manifest.temperature = cfg.gateway.temperature();
    manifest.max_tokens = cfg.gateway.max_tokens();
    manifest.counts.instances = d.len() as u64;
    manifest.counts.backend_calls = calls;
    manifest.counts.cache_hits = hits;
    manifest.counts.fallbacks = predictions.fallback_count() as u64;
    manifest.counts.flags = flags;
    manifest.prompt_checksum = Some(templates_checksum());
    manifest.settings = strategy_settings(cfg);
    manifest.finish();
    Ok(RunOutput { predictions, manifest })
}

fn strategy_settings(cfg: &StrategyConfig) -> serde_json::Value {
    let mut v = serde_json::json!({ "strategy": cfg.kind.name() });
    if cfg.kind == StrategyKind::Zsec {
        v["correction_scope"] = serde_json::to_value(cfg.correction_scope).expect("serializable");
        v["second_model"] = cfg.second().model().into();
    }
    if let Some(fs) = &cfg.few_shot {
        v["examples"] = fs.examples.into();
        v["selector"] = match &fs.selector {
            ExampleSelector::Random { seed } => serde_json::json!({ "kind": "random", "seed": seed }),
            ExampleSelector::Knn { index, .. } => serde_json::json!({
                "kind": "knn",
                "embedding_model": index.model_id(),
                "dim": index.dim(),
                "truncated_from": index.entries()[0].vector.truncated_from,
            }),
        };
    }
    v
}
