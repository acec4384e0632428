//! Agentic workflows.
//!
//! MIAWF adjudicates between two prior models' labels, optionally for more
//! rounds against the stronger source. MBCAWF asks five per-emotion yes/no
//! classifiers, then adjudicates among positives or rechecks the all-negative
//! case.

use std::collections::HashMap;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{write_atomic, DataError, Dataset, PredictionFile, RunManifest};
use crate::gateway::{parallel_map, ChatMessage, Gateway, GatewayError};
use crate::label::{join_labels, parse_label, parse_yes_no, EmotionLabel, Instance, ModelId, Prediction};
use crate::prompts::{self, templates_checksum, TemplateId};
use crate::strategies::StatsProbe;

#[derive(Debug, Error)]
pub enum WorkflowError {
    #[error("instance ids differ between {a} and {b}")]
    IdMismatch { a: String, b: String },
    #[error("instance {0:?} is not in the dataset")]
    UnknownInstance(String),
    #[error("no dev score for {0:?}; needed when iterations >= 2")]
    MissingDevScore(String),
    #[error("iterations must be >= 1")]
    NoIterations,
    #[error("adjudication needs at least two distinct candidates")]
    TooFewCandidates,
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Template(#[from] prompts::TemplateError),
    #[error(transparent)]
    Data(#[from] DataError),
}

impl WorkflowError {
    fn is_fatal(&self) -> bool {
        match self {
            WorkflowError::Gateway(g) => matches!(g, GatewayError::AuthFailure(_) | GatewayError::Config(_)),
            _ => true,
        }
    }
}

#[derive(Debug, Clone)]
pub struct WorkflowConfig {
    pub gateway: Arc<Gateway>,
    /// Model id written into output prediction files.
    pub model_id: ModelId,
    /// Ask the adjudicator even when both MIAWF candidates agree.
    pub call_on_identical: bool,
    pub seed: u64,
}

impl WorkflowConfig {
    pub fn new(gateway: Arc<Gateway>, model_id: ModelId) -> Self {
        WorkflowConfig {
            gateway,
            model_id,
            call_on_identical: false,
            seed: 0,
        }
    }
}

/// Candidates for one adjudication, deduplicated in first-seen order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AdjudicationTask<'a> {
    pub instance: &'a Instance,
    pub candidates: Vec<EmotionLabel>,
    pub sources: Vec<String>,
}

impl<'a> AdjudicationTask<'a> {
    pub fn new(instance: &'a Instance, labels: &[EmotionLabel], sources: Vec<String>) -> Self {
        let mut candidates = Vec::new();
        for &l in labels {
            if !candidates.contains(&l) {
                candidates.push(l);
            }
        }
        AdjudicationTask {
            instance,
            candidates,
            sources,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub candidates: Vec<EmotionLabel>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub answer: Option<String>,
    pub decision: String,
    pub calls: u32,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub flagged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkflowTrace {
    pub instance_id: String,
    pub workflow: String,
    pub stages: Vec<StageRecord>,
    pub calls: u32,
    pub label: EmotionLabel,
    pub flags: u32,
}

impl WorkflowTrace {
    fn new(instance_id: &str, workflow: &str) -> Self {
        WorkflowTrace {
            instance_id: instance_id.to_string(),
            workflow: workflow.to_string(),
            stages: Vec::new(),
            calls: 0,
            label: EmotionLabel::Neutral,
            flags: 0,
        }
    }

    fn push(&mut self, stage: StageRecord) {
        self.calls += stage.calls;
        self.flags += u32::from(stage.flagged);
        self.stages.push(stage);
    }

    /// Plain-text digest of stage answers, stored as the prediction's raw output.
    fn summary(&self) -> String {
        self.stages
            .iter()
            .map(|s| match &s.answer {
                Some(a) => format!("{}={}", s.stage, a.trim()),
                None => format!("{}={}", s.stage, s.decision),
            })
            .collect::<Vec<_>>()
            .join("\n")
    }
}

pub fn render_traces(traces: &[WorkflowTrace]) -> String {
    let mut out = String::new();
    for t in traces {
        out.push_str(&serde_json::to_string(t).expect("trace serializes"));
        out.push('\n');
    }
    out
}

pub fn write_traces(traces: &[WorkflowTrace], path: impl AsRef<Path>) -> Result<(), DataError> {
    write_atomic(path.as_ref(), render_traces(traces).as_bytes())
}

pub fn read_traces(path: impl AsRef<Path>) -> Result<Vec<WorkflowTrace>, DataError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| DataError::Row {
                path: path.to_path_buf(),
                row: i + 1,
                message: e.to_string(),
            })
        })
        .collect()
}

pub fn miawf_messages(tweet: &str, first: EmotionLabel, second: EmotionLabel) -> Result<Vec<ChatMessage>, WorkflowError> {
    Ok(vec![
        ChatMessage::system(prompts::render(
            TemplateId::MiawfSystem,
            &[("emotion1", first.canonical_text()), ("emotion2", second.canonical_text())],
        )?),
        ChatMessage::user(tweet),
    ])
}

pub fn binary_messages(tweet: &str, emotion: EmotionLabel) -> Result<Vec<ChatMessage>, WorkflowError> {
    Ok(vec![
        ChatMessage::system(prompts::render(TemplateId::BinarySystem, &[("emotion", emotion.canonical_text())])?),
        ChatMessage::user(tweet),
    ])
}

pub fn neutral_check_messages(tweet: &str) -> Result<Vec<ChatMessage>, WorkflowError> {
    let emotions = join_labels(&EmotionLabel::NON_NEUTRAL);
    Ok(vec![
        ChatMessage::system(prompts::render(TemplateId::NeutralCheckSystem, &[("emotions", &emotions)])?),
        ChatMessage::user(tweet),
    ])
}

/// The candidate list is rendered in canonical label order regardless of
/// the order given.
pub fn pick_messages(tweet: &str, candidates: &[EmotionLabel]) -> Result<Vec<ChatMessage>, WorkflowError> {
    let mut sorted = candidates.to_vec();
    sorted.sort();
    sorted.dedup();
    let emotions = join_labels(&sorted);
    Ok(vec![
        ChatMessage::system(prompts::render(TemplateId::PickSystem, &[("emotions", &emotions)])?),
        ChatMessage::user(tweet),
    ])
}

/// Two-way adjudication. Agreeing candidates skip the call unless
/// `call_on_identical` is set; an answer outside the pair keeps candidate 1.
pub fn miawf_adjudicate(task: &AdjudicationTask<'_>, cfg: &WorkflowConfig) -> Result<(EmotionLabel, StageRecord), WorkflowError> {
    let (first, second) = match task.candidates.as_slice() {
        [a] => (*a, *a),
        [a, b] => (*a, *b),
        _ => return Err(WorkflowError::TooFewCandidates),
    };
    let candidates = vec![first, second];
    if first == second && !cfg.call_on_identical {
        return Ok((
            first,
            StageRecord {
                stage: "adjudicate".into(),
                candidates,
                answer: None,
                decision: first.to_string(),
                calls: 0,
                flagged: false,
            },
        ));
    }
    let gw = &cfg.gateway;
    let raw = gw.complete(&gw.request(miawf_messages(&task.instance.text, first, second)?))?;
    let (label, flagged) = match parse_label(&raw) {
        Ok(l) if l == first || l == second => (l, false),
        _ => (first, true),
    };
    Ok((
        label,
        StageRecord {
            stage: "adjudicate".into(),
            candidates,
            answer: Some(raw),
            decision: label.to_string(),
            calls: 1,
            flagged,
        },
    ))
}

/// Pick one of several labels. An off-menu or unparseable answer falls back
/// to the first candidate as given.
pub fn adjudicate_among(
    inst: &Instance,
    candidates: &[EmotionLabel],
    gw: &Gateway,
) -> Result<(EmotionLabel, StageRecord), WorkflowError> {
    let task = AdjudicationTask::new(inst, candidates, Vec::new());
    if task.candidates.len() < 2 {
        return Err(WorkflowError::TooFewCandidates);
    }
    let raw = gw.complete(&gw.request(pick_messages(&inst.text, &task.candidates)?))?;
    let (label, flagged) = match parse_label(&raw) {
        Ok(l) if task.candidates.contains(&l) => (l, false),
        _ => (task.candidates[0], true),
    };
    Ok((
        label,
        StageRecord {
            stage: "pick".into(),
            candidates: task.candidates,
            answer: Some(raw),
            decision: label.to_string(),
            calls: 1,
            flagged,
        },
    ))
}

pub fn mbcawf_classify(inst: &Instance, cfg: &WorkflowConfig) -> Result<(Prediction, WorkflowTrace), WorkflowError> {
    let gw = &cfg.gateway;
    let mut trace = WorkflowTrace::new(&inst.id, "mbcawf");
    let mut positives = Vec::new();
    for emotion in EmotionLabel::NON_NEUTRAL {
        let raw = gw.complete(&gw.request(binary_messages(&inst.text, emotion)?))?;
        let (yes, flagged) = match parse_yes_no(&raw) {
            Ok(b) => (b, false),
            Err(_) => (false, true),
        };
        if yes {
            positives.push(emotion);
        }
        trace.push(StageRecord {
            stage: format!("binary:{emotion}"),
            candidates: Vec::new(),
            answer: Some(raw),
            decision: if yes { "yes" } else { "no" }.into(),
            calls: 1,
            flagged,
        });
    }

    let mut fallback = false;
    let label = match positives.as_slice() {
        [only] => *only,
        [] => {
            let raw = gw.complete(&gw.request(neutral_check_messages(&inst.text)?))?;
            let parsed = parse_label(&raw);
            fallback = parsed.is_err();
            let label = parsed.unwrap_or(EmotionLabel::Neutral);
            trace.push(StageRecord {
                stage: "neutral_check".into(),
                candidates: Vec::new(),
                answer: Some(raw),
                decision: label.to_string(),
                calls: 1,
                flagged: fallback,
            });
            label
        }
        many => {
            let (label, stage) = adjudicate_among(inst, many, gw)?;
            trace.push(stage);
            label
        }
    };
    trace.label = label;
    let raw = trace.summary();
    let pred = if fallback {
        Prediction::fallback(&inst.id, cfg.model_id.clone(), raw)
    } else {
        Prediction::labeled(&inst.id, label, cfg.model_id.clone(), raw)
    };
    Ok((pred, trace))
}

#[derive(Debug, Clone)]
pub struct WorkflowOutput {
    pub predictions: PredictionFile,
    pub traces: Vec<WorkflowTrace>,
    pub manifest: RunManifest,
}

fn finish_manifest(
    mut manifest: RunManifest,
    cfg: &WorkflowConfig,
    probe: &StatsProbe,
    predictions: &PredictionFile,
    traces: &[WorkflowTrace],
    settings: serde_json::Value,
) -> RunManifest {
    let (calls, hits) = probe.delta();
    manifest.backend_model = cfg.gateway.model().to_string();
    manifest.temperature = cfg.gateway.temperature();
    manifest.max_tokens = cfg.gateway.max_tokens();
    manifest.counts.instances = predictions.len() as u64;
    manifest.counts.backend_calls = calls;
    manifest.counts.cache_hits = hits;
    manifest.counts.fallbacks = predictions.fallback_count() as u64;
    manifest.counts.flags = traces.iter().map(|t| u64::from(t.flags)).sum();
    manifest.prompt_checksum = Some(templates_checksum());
    manifest.settings = settings;
    manifest.finish();
    manifest
}

fn error_trace(id: &str, workflow: &str, e: &WorkflowError) -> WorkflowTrace {
    let mut t = WorkflowTrace::new(id, workflow);
    t.push(StageRecord {
        stage: "error".into(),
        candidates: Vec::new(),
        answer: Some(e.to_string()),
        decision: EmotionLabel::Neutral.to_string(),
        calls: 0,
        flagged: true,
    });
    t
}

pub fn mbcawf_run(d: &Dataset, cfg: &WorkflowConfig) -> Result<WorkflowOutput, WorkflowError> {
    let manifest = RunManifest::new("mbcawf", cfg.model_id.as_str(), cfg.seed);
    let probe = StatsProbe::new([&cfg.gateway]);
    let results = parallel_map(&d.instances, cfg.gateway.max_in_flight(), |i| mbcawf_classify(i, cfg));
    let mut preds = Vec::with_capacity(d.len());
    let mut traces = Vec::with_capacity(d.len());
    for (inst, r) in d.instances.iter().zip(results) {
        match r {
            Ok((p, t)) => {
                preds.push(p);
                traces.push(t);
            }
            Err(e) if e.is_fatal() => return Err(e),
            Err(e) => {
                preds.push(Prediction::fallback(&inst.id, cfg.model_id.clone(), format!("error: {e}")));
                traces.push(error_trace(&inst.id, "mbcawf", &e));
            }
        }
    }
    let predictions = PredictionFile::new(cfg.model_id.clone(), preds)?;
    let manifest = finish_manifest(
        manifest,
        cfg,
        &probe,
        &predictions,
        &traces,
        serde_json::json!({ "workflow": "mbcawf" }),
    );
    Ok(WorkflowOutput {
        predictions,
        traces,
        manifest,
    })
}

fn same_ids(a: &PredictionFile, b: &PredictionFile) -> bool {
    let mut x = a.ids();
    let mut y = b.ids();
    x.sort_unstable();
    y.sort_unstable();
    x == y
}

/// The partner for rounds 2 and later: the source with the higher dev F1,
/// A on a tie.
pub fn stronger_source<'a>(
    a: &'a PredictionFile,
    b: &'a PredictionFile,
    dev_scores: &HashMap<String, f64>,
) -> Result<&'a PredictionFile, WorkflowError> {
    let score = |pf: &PredictionFile| {
        dev_scores
            .get(pf.model_id.as_str())
            .copied()
            .ok_or_else(|| WorkflowError::MissingDevScore(pf.model_id.to_string()))
    };
    let (sa, sb) = (score(a)?, score(b)?);
    Ok(if sb > sa { b } else { a })
}

/// Round 1 adjudicates A against B; each later round adjudicates the
/// previous round's labels against the stronger source. Output follows A's
/// instance order.
pub fn miawf_run(
    d: &Dataset,
    a: &PredictionFile,
    b: &PredictionFile,
    cfg: &WorkflowConfig,
    iterations: usize,
    dev_scores: &HashMap<String, f64>,
) -> Result<WorkflowOutput, WorkflowError> {
    if iterations == 0 {
        return Err(WorkflowError::NoIterations);
    }
    if !same_ids(a, b) {
        return Err(WorkflowError::IdMismatch {
            a: a.model_id.to_string(),
            b: b.model_id.to_string(),
        });
    }
    let partner = if iterations >= 2 { Some(stronger_source(a, b, dev_scores)?) } else { None };
    let texts = d.by_id();
    let insts: Vec<&Instance> = a
        .predictions
        .iter()
        .map(|p| {
            texts
                .get(p.instance_id.as_str())
                .copied()
                .ok_or_else(|| WorkflowError::UnknownInstance(p.instance_id.clone()))
        })
        .collect::<Result<_, _>>()?;

    let manifest = RunManifest::new("miawf", cfg.model_id.as_str(), cfg.seed);
    let probe = StatsProbe::new([&cfg.gateway]);
    let b_labels = b.label_map();
    let partner_labels = partner.map(|p| p.label_map());

    let results = parallel_map(&insts, cfg.gateway.max_in_flight(), |inst| {
        let mut trace = WorkflowTrace::new(&inst.id, "miawf");
        let mut current = a.label_map()[inst.id.as_str()];
        let mut last_raw = String::new();
        for round in 1..=iterations {
            let (other, sources) = match (round, &partner_labels) {
                (1, _) => (b_labels[inst.id.as_str()], vec![a.model_id.to_string(), b.model_id.to_string()]),
                (_, Some(p)) => (
                    p[inst.id.as_str()],
                    vec![format!("round{}", round - 1), partner.expect("partner").model_id.to_string()],
                ),
                _ => unreachable!("partner is resolved when iterations >= 2"),
            };
            let task = AdjudicationTask::new(inst, &[current, other], sources);
            let (label, mut stage) = miawf_adjudicate(&task, cfg)?;
            stage.stage = format!("round{round}");
            if let Some(r) = &stage.answer {
                last_raw = r.clone();
            }
            trace.push(stage);
            current = label;
        }
        trace.label = current;
        let pred = Prediction::labeled(&inst.id, current, cfg.model_id.clone(), last_raw);
        Ok::<_, WorkflowError>((pred, trace))
    });

    let mut preds = Vec::with_capacity(insts.len());
    let mut traces = Vec::with_capacity(insts.len());
    for (inst, r) in insts.iter().zip(results) {
        match r {
            Ok((p, t)) => {
                preds.push(p);
                traces.push(t);
            }
            Err(e) if e.is_fatal() => return Err(e),
            Err(e) => {
                preds.push(Prediction::fallback(&inst.id, cfg.model_id.clone(), format!("error: {e}")));
                traces.push(error_trace(&inst.id, "miawf", &e));
            }
        }
    }
    let predictions = PredictionFile::new(cfg.model_id.clone(), preds)?;
    let settings = serde_json::json!({
        "workflow": "miawf",
        "iterations": iterations,
        "source_a": a.model_id.as_str(),
        "source_b": b.model_id.as_str(),
        "partner": partner.map(|p| p.model_id.to_string()),
        "dev_scores": dev_scores,
        "call_on_identical": cfg.call_on_identical,
    });
    let manifest = finish_manifest(manifest, cfg, &probe, &predictions, &traces, settings);
    Ok(WorkflowOutput {
        predictions,
        traces,
        manifest,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::{BackendConfig, Matcher, MockBackend};
    use EmotionLabel::*;

    fn cfg(mock: MockBackend) -> (WorkflowConfig, Arc<MockBackend>) {
        let mock = Arc::new(mock);
        let mut c = BackendConfig::mock("mock");
        c.retry.backoff_ms = 0;
        let gw = Arc::new(Gateway::with_backend(mock.clone(), &c).unwrap());
        (WorkflowConfig::new(gw, ModelId::new("wf").unwrap()), mock)
    }

    fn binaries(yes: &[EmotionLabel]) -> crate::gateway::MockBuilder {
        let mut b = MockBackend::builder();
        for e in EmotionLabel::NON_NEUTRAL {
            let reply = if yes.contains(&e) { "yes" } else { "no" };
            b = b.on(Matcher::system_contains(format!("detecting '{e}' emotion")), reply);
        }
        b
    }

    #[test]
    fn adjudicate_identical_skips_call() {
        let (c, mock) = cfg(MockBackend::builder().default_reply("Joy").build());
        let inst = Instance::new("1", "t");
        let task = AdjudicationTask::new(&inst, &[Anger, Anger], vec![]);
        let (l, s) = miawf_adjudicate(&task, &c).unwrap();
        assert_eq!((l, s.calls, mock.calls()), (Anger, 0, 0));

        let mut c2 = c.clone();
        c2.call_on_identical = true;
        let (l, s) = miawf_adjudicate(&task, &c2).unwrap();
        // off-menu answer keeps candidate 1
        assert_eq!((l, s.calls, s.flagged), (Anger, 1, true));
    }

    #[test]
    fn adjudicate_scripted_and_off_menu() {
        let inst = Instance::new("1", "t");
        let task = AdjudicationTask::new(&inst, &[Joy, Neutral], vec![]);
        let (c, mock) = cfg(MockBackend::builder().default_reply("Neutral").build());
        assert_eq!(miawf_adjudicate(&task, &c).unwrap().0, Neutral);
        let sys = &mock.requests()[0].messages[0].content;
        assert!(sys.contains("\"Joy\" and \"Neutral\""));
        let (c, _) = cfg(MockBackend::builder().default_reply("Fear").build());
        let (l, s) = miawf_adjudicate(&task, &c).unwrap();
        assert_eq!((l, s.flagged), (Joy, true));
    }

    #[test]
    fn adjudicate_among_rules() {
        let inst = Instance::new("1", "t");
        let (c, mock) = cfg(MockBackend::builder().default_reply("Neutral").build());
        let (l, s) = adjudicate_among(&inst, &[Fear, Sadness, Anger], &c.gateway).unwrap();
        assert_eq!((l, s.flagged), (Fear, true));
        assert!(mock.requests()[0].messages[0]
            .content
            .contains("Pick one emotion from Anger, Fear, Sadness that"));
        let (c, _) = cfg(MockBackend::builder().default_reply("Joy").build());
        assert_eq!(adjudicate_among(&inst, &[Joy, Anger], &c.gateway).unwrap().0, Joy);
        assert!(matches!(
            adjudicate_among(&inst, &[Joy, Joy], &c.gateway),
            Err(WorkflowError::TooFewCandidates)
        ));
    }

    #[test]
    fn mbcawf_single_positive() {
        let (c, mock) = cfg(binaries(&[Joy]).build());
        let (p, t) = mbcawf_classify(&Instance::new("1", "t"), &c).unwrap();
        assert_eq!((p.label, t.calls, mock.calls()), (Joy, 5, 5));
        assert!(t.stages.iter().all(|s| s.stage.starts_with("binary:")));
        let order: Vec<_> = t.stages.iter().map(|s| s.stage.as_str()).collect();
        assert_eq!(order, ["binary:Love", "binary:Joy", "binary:Anger", "binary:Fear", "binary:Sadness"]);
    }

    #[test]
    fn mbcawf_multiple_positives() {
        let (c, mock) = cfg(binaries(&[Joy, Anger])
            .on(Matcher::system_contains("choosing emotions"), "Anger")
            .build());
        let (p, t) = mbcawf_classify(&Instance::new("1", "t"), &c).unwrap();
        assert_eq!((p.label, t.calls, mock.calls()), (Anger, 6, 6));
        assert_eq!(t.stages[5].candidates, vec![Joy, Anger]);
    }

    #[test]
    fn mbcawf_none_positive() {
        let (c, _) = cfg(binaries(&[])
            .on(Matcher::system_contains("checking emotion"), "Anger")
            .build());
        let (p, t) = mbcawf_classify(&Instance::new("1", "t"), &c).unwrap();
        assert_eq!((p.label, t.calls), (Anger, 6));

        let (c, _) = cfg(binaries(&[])
            .on(Matcher::system_contains("checking emotion"), "Neutral")
            .build());
        let (p, _) = mbcawf_classify(&Instance::new("1", "t"), &c).unwrap();
        assert_eq!((p.label, p.fallback_applied()), (Neutral, false));

        let (c, _) = cfg(binaries(&[])
            .on(Matcher::system_contains("checking emotion"), "no idea")
            .build());
        let (p, t) = mbcawf_classify(&Instance::new("1", "t"), &c).unwrap();
        assert_eq!((p.label, p.fallback_applied(), t.flags), (Neutral, true, 1));
    }

    #[test]
    fn mbcawf_unparseable_binary_is_no() {
        let (c, _) = cfg(MockBackend::builder()
            .on(Matcher::system_contains("detecting 'Love'"), "maybe")
            .on(Matcher::system_contains("detecting 'Fear'"), "yes")
            .on(Matcher::system_contains("detecting"), "no")
            .build());
        let (p, t) = mbcawf_classify(&Instance::new("1", "t"), &c).unwrap();
        assert_eq!((p.label, t.calls, t.flags), (Fear, 5, 1));
    }

    fn pf(model: &str, labels: &[EmotionLabel]) -> PredictionFile {
        let m = ModelId::new(model).unwrap();
        PredictionFile::new(
            m.clone(),
            labels
                .iter()
                .enumerate()
                .map(|(i, l)| Prediction::labeled(i.to_string(), *l, m.clone(), l.to_string()))
                .collect(),
        )
        .unwrap()
    }

    fn data(n: usize) -> Dataset {
        Dataset::from_instances((0..n).map(|i| Instance::new(i.to_string(), format!("tweet {i}"))).collect()).unwrap()
    }

    #[test]
    fn miawf_identity_zero_calls() {
        let labels = [Joy, Anger, Neutral, Love];
        let a = pf("a", &labels);
        let b = pf("b", &labels);
        let (c, mock) = cfg(MockBackend::builder().default_reply("Fear").build());
        let scores = HashMap::from([("a".to_string(), 0.5), ("b".to_string(), 0.6)]);
        let out = miawf_run(&data(4), &a, &b, &c, 3, &scores).unwrap();
        assert_eq!(out.predictions.labels(), labels);
        assert_eq!(mock.calls(), 0);
        assert_eq!(out.manifest.counts.backend_calls, 0);
    }

    #[test]
    fn miawf_single_round_prefers_emotion2() {
        let a = pf("a", &[Joy, Anger, Neutral]);
        let b = pf("b", &[Joy, Fear, Sadness]);
        let (c, _) = cfg(MockBackend::builder()
            .respond_with(Matcher::Any, |req| {
                req.system_text().split('"').nth(3).unwrap_or("Neutral").to_string()
            })
            .build());
        let out = miawf_run(&data(3), &a, &b, &c, 1, &HashMap::new()).unwrap();
        assert_eq!(out.predictions.labels(), vec![Joy, Fear, Sadness]);
    }

    #[test]
    fn miawf_second_round_pairs_with_stronger_source() {
        let a = pf("a", &[Joy]);
        let b = pf("b", &[Anger]);
        let (c, mock) = cfg(MockBackend::builder().default_reply("Joy").build());
        let scores = HashMap::from([("a".to_string(), 0.55), ("b".to_string(), 0.57)]);
        let out = miawf_run(&data(1), &a, &b, &c, 2, &scores).unwrap();
        // round 1: (Joy, Anger) -> Joy; round 2: (Joy, B=Anger)
        let reqs = mock.requests();
        assert_eq!(reqs.len(), 2);
        assert!(reqs[1].messages[0].content.contains("\"Joy\" and \"Anger\""));
        assert_eq!(out.traces[0].stages.len(), 2);
        assert_eq!(out.traces[0].stages[1].candidates, vec![Joy, Anger]);
        assert_eq!(out.manifest.settings["partner"], "b");
    }

    #[test]
    fn miawf_preconditions() {
        let a = pf("a", &[Joy, Joy]);
        let b = pf("b", &[Joy]);
        let (c, _) = cfg(MockBackend::builder().build());
        assert!(matches!(
            miawf_run(&data(2), &a, &b, &c, 1, &HashMap::new()),
            Err(WorkflowError::IdMismatch { .. })
        ));
        let b = pf("b", &[Joy, Anger]);
        assert!(matches!(
            miawf_run(&data(2), &a, &b, &c, 2, &HashMap::new()),
            Err(WorkflowError::MissingDevScore(_))
        ));
        assert!(matches!(
            miawf_run(&data(2), &a, &b, &c, 0, &HashMap::new()),
            Err(WorkflowError::NoIterations)
        ));
    }

    #[test]
    fn traces_round_trip_and_counts_sum() {
        let (c, _) = cfg(binaries(&[Joy, Love])
            .on(Matcher::system_contains("choosing emotions"), "Love")
            .build());
        let out = mbcawf_run(&data(3), &c).unwrap();
        for t in &out.traces {
            assert_eq!(t.calls, t.stages.iter().map(|s| s.calls).sum::<u32>());
        }
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.jsonl");
        write_traces(&out.traces, &path).unwrap();
        assert_eq!(read_traces(&path).unwrap(), out.traces);
        assert_eq!(out.manifest.counts.backend_calls, 18);
    }
}
