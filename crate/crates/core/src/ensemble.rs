//! Ensembles over prediction files: unweighted voting, weighted voting, and
//! LLM adjudication among the distinct member labels. Ensembles may be
//! members of other ensembles.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{DataError, Dataset, PredictionFile};
use crate::gateway::{parallel_map, Gateway};
use crate::label::{EmotionLabel, ModelId, Prediction};
use crate::workflows::{adjudicate_among, WorkflowError};

#[derive(Debug, Error)]
pub enum EnsembleError {
    #[error("ensemble {0:?} needs at least two members")]
    TooFewMembers(String),
    #[error("member {member:?} covers a different instance set than {first:?}")]
    IdMismatch { first: String, member: String },
    #[error("weighted ensemble has no weight for member {0:?}")]
    MissingWeight(String),
    #[error("invalid weight {weight} for {member:?}")]
    BadWeight { member: String, weight: f64 },
    #[error("all member weights are zero")]
    ZeroWeights,
    #[error("ensemble {0:?} uses llm_adjudicated mode but no adjudicator is configured")]
    NoAdjudicator(String),
    #[error("instance {0:?} is not in the dataset")]
    UnknownInstance(String),
    #[error("ensemble cycle: {0}")]
    Cycle(String),
    #[error("unknown ensemble {0:?}")]
    UnknownEnsemble(String),
    #[error("duplicate ensemble name {0:?}")]
    DuplicateName(String),
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Workflow(#[from] WorkflowError),
    #[error(transparent)]
    Data(#[from] DataError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
#[value(rename_all = "snake_case")]
pub enum VoteMode {
    Unweighted,
    Weighted,
    LlmAdjudicated,
}

impl VoteMode {
    pub fn name(self) -> &'static str {
        match self {
            VoteMode::Unweighted => "unweighted",
            VoteMode::Weighted => "weighted",
            VoteMode::LlmAdjudicated => "llm_adjudicated",
        }
    }

    /// Human-readable tie rule, recorded in run manifests.
    pub fn tie_rule(self) -> &'static str {
        match self {
            VoteMode::Unweighted => "tied labels resolved to the one predicted by the earliest member",
            VoteMode::Weighted => {
                "tied labels resolved to the one predicted by the highest-weight member, then the earliest"
            }
            VoteMode::LlmAdjudicated => {
                "distinct labels in canonical order; off-menu adjudicator answers take the first"
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnsembleSpec {
    pub name: String,
    pub mode: VoteMode,
    /// Prediction-file paths or names of other ensembles.
    pub members: Vec<String>,
    /// Keyed by member model id.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub weights: BTreeMap<String, f64>,
    /// Backend config path for llm_adjudicated mode.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub adjudicator: Option<String>,
}

impl EnsembleSpec {
    pub fn new(name: impl Into<String>, mode: VoteMode, members: Vec<String>) -> Self {
        EnsembleSpec {
            name: name.into(),
            mode,
            members,
            weights: BTreeMap::new(),
            adjudicator: None,
        }
    }

    pub fn validate(&self) -> Result<(), EnsembleError> {
        if self.members.len() < 2 {
            return Err(EnsembleError::TooFewMembers(self.name.clone()));
        }
        for (m, &w) in &self.weights {
            if !w.is_finite() || w < 0.0 {
                return Err(EnsembleError::BadWeight {
                    member: m.clone(),
                    weight: w,
                });
            }
        }
        Ok(())
    }
}

/// Accumulated score per label for one instance.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct VoteTally {
    pub scores: [f64; 6],
}

impl VoteTally {
    pub fn add(&mut self, l: EmotionLabel, w: f64) {
        self.scores[l.index()] += w;
    }

    pub fn score(&self, l: EmotionLabel) -> f64 {
        self.scores[l.index()]
    }

    pub fn max(&self) -> f64 {
        self.scores.iter().copied().fold(0.0, f64::max)
    }

    /// Labels whose score equals the maximum, within a relative tolerance.
    pub fn leaders(&self) -> Vec<EmotionLabel> {
        let m = self.max();
        EmotionLabel::ALL
            .into_iter()
            .filter(|l| {
                let s = self.score(*l);
                s > 0.0 && approx_eq(s, m)
            })
            .collect()
    }

    fn summary(&self) -> String {
        EmotionLabel::ALL
            .into_iter()
            .filter(|l| self.score(*l) > 0.0)
            .map(|l| format!("{l}={}", self.score(l)))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

fn approx_eq(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-9 * a.abs().max(b.abs())
}

fn check_ids(files: &[&PredictionFile]) -> Result<(), EnsembleError> {
    let mut first: Vec<&str> = files[0].ids();
    first.sort_unstable();
    for f in &files[1..] {
        let mut ids = f.ids();
        ids.sort_unstable();
        if ids != first {
            return Err(EnsembleError::IdMismatch {
                first: files[0].model_id.to_string(),
                member: f.model_id.to_string(),
            });
        }
    }
    Ok(())
}

fn member_weights(spec: &EnsembleSpec, files: &[&PredictionFile]) -> Result<Vec<f64>, EnsembleError> {
    if spec.mode != VoteMode::Weighted {
        return Ok(vec![1.0; files.len()]);
    }
    let w: Vec<f64> = files
        .iter()
        .map(|f| {
            spec.weights
                .get(f.model_id.as_str())
                .copied()
                .ok_or_else(|| EnsembleError::MissingWeight(f.model_id.to_string()))
        })
        .collect::<Result<_, _>>()?;
    if w.iter().all(|&x| x == 0.0) {
        return Err(EnsembleError::ZeroWeights);
    }
    Ok(w)
}

/// Member precedence for tie-breaking: highest weight first, then spec order.
fn precedence(weights: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| weights[b].total_cmp(&weights[a]).then(a.cmp(&b)));
    order
}

fn ensemble_model_id(spec: &EnsembleSpec) -> Result<ModelId, EnsembleError> {
    ModelId::new(spec.name.clone()).map_err(|_| EnsembleError::Config("ensemble name is empty".into()))
}

/// Unweighted or weighted voting. Output follows the first member's order.
pub fn vote(spec: &EnsembleSpec, files: &[&PredictionFile]) -> Result<PredictionFile, EnsembleError> {
    spec.validate()?;
    if files.len() < 2 {
        return Err(EnsembleError::TooFewMembers(spec.name.clone()));
    }
    if spec.mode == VoteMode::LlmAdjudicated {
        return Err(EnsembleError::NoAdjudicator(spec.name.clone()));
    }
    check_ids(files)?;
    let weights = member_weights(spec, files)?;
    let order = precedence(&weights);
    let maps: Vec<HashMap<&str, EmotionLabel>> = files.iter().map(|f| f.label_map()).collect();
    let model_id = ensemble_model_id(spec)?;

    let preds = files[0]
        .predictions
        .iter()
        .map(|p| {
            let id = p.instance_id.as_str();
            let votes: Vec<EmotionLabel> = maps.iter().map(|m| m[id]).collect();
            let mut tally = VoteTally::default();
            for (l, w) in votes.iter().zip(&weights) {
                tally.add(*l, *w);
            }
            let leaders = tally.leaders();
            let winner = if leaders.len() == 1 {
                leaders[0]
            } else {
                order
                    .iter()
                    .map(|&i| votes[i])
                    .find(|l| leaders.contains(l))
                    .expect("some member voted for a leading label")
            };
            Prediction::labeled(id, winner, model_id.clone(), tally.summary())
        })
        .collect();
    Ok(PredictionFile::new(model_id, preds)?)
}

/// Per instance, a single distinct member label passes through; otherwise
/// the adjudicator picks among the distinct labels.
pub fn llm_adjudicated_vote(
    spec: &EnsembleSpec,
    files: &[&PredictionFile],
    d: &Dataset,
    gw: &Gateway,
) -> Result<PredictionFile, EnsembleError> {
    spec.validate()?;
    if files.len() < 2 {
        return Err(EnsembleError::TooFewMembers(spec.name.clone()));
    }
    check_ids(files)?;
    let maps: Vec<HashMap<&str, EmotionLabel>> = files.iter().map(|f| f.label_map()).collect();
    let texts = d.by_id();
    let model_id = ensemble_model_id(spec)?;

    let ids: Vec<&str> = files[0].ids();
    let results = parallel_map(&ids, gw.max_in_flight(), |&id| -> Result<Prediction, EnsembleError> {
        let mut distinct: Vec<EmotionLabel> = maps.iter().map(|m| m[id]).collect();
        distinct.sort();
        distinct.dedup();
        if let [only] = distinct.as_slice() {
            return Ok(Prediction::labeled(id, *only, model_id.clone(), ""));
        }
        let inst = texts
            .get(id)
            .ok_or_else(|| EnsembleError::UnknownInstance(id.to_string()))?;
        let (label, stage) = adjudicate_among(inst, &distinct, gw)?;
        Ok(Prediction::labeled(id, label, model_id.clone(), stage.answer.unwrap_or_default()))
    });
    let preds = results.into_iter().collect::<Result<Vec<_>, _>>()?;
    Ok(PredictionFile::new(model_id, preds)?)
}

/// What an llm_adjudicated ensemble needs at run time.
#[derive(Clone, Copy)]
pub struct Adjudication<'a> {
    pub dataset: &'a Dataset,
    pub gateway: &'a Gateway,
}

pub fn run_ensemble(
    spec: &EnsembleSpec,
    files: &[&PredictionFile],
    adj: Option<&Adjudication<'_>>,
) -> Result<PredictionFile, EnsembleError> {
    match (spec.mode, adj) {
        (VoteMode::LlmAdjudicated, Some(a)) => llm_adjudicated_vote(spec, files, a.dataset, a.gateway),
        (VoteMode::LlmAdjudicated, None) => Err(EnsembleError::NoAdjudicator(spec.name.clone())),
        _ => vote(spec, files),
    }
}

/// A set of ensemble specs, as read from a TOML file with `[[ensemble]]`
/// tables and an optional `root`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnsembleConfig {
    #[serde(default)]
    pub root: Option<String>,
    #[serde(rename = "ensemble")]
    pub ensembles: Vec<EnsembleSpec>,
}

impl EnsembleConfig {
    pub fn from_toml_str(s: &str) -> Result<Self, EnsembleError> {
        let cfg: EnsembleConfig = toml::from_str(s).map_err(|e| EnsembleError::Config(e.to_string()))?;
        if cfg.ensembles.is_empty() {
            return Err(EnsembleError::Config("no [[ensemble]] tables".into()));
        }
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, EnsembleError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| EnsembleError::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    /// The explicit root, else the last ensemble listed.
    pub fn root_name(&self) -> &str {
        self.root
            .as_deref()
            .unwrap_or_else(|| &self.ensembles.last().expect("non-empty").name)
    }
}

#[derive(Debug, Clone)]
pub struct Composition {
    pub output: PredictionFile,
    /// Ensembles in the order they were evaluated; the root is last.
    pub order: Vec<String>,
    pub outputs: HashMap<String, PredictionFile>,
}

/// Evaluates `root` after every ensemble it depends on. Members naming
/// another spec are ensembles; anything else is passed to `load`.
pub fn compose<'a>(
    specs: &[EnsembleSpec],
    root: &str,
    mut load: impl FnMut(&str) -> Result<PredictionFile, EnsembleError>,
    mut adjudicator: impl FnMut(&EnsembleSpec) -> Result<Option<Adjudication<'a>>, EnsembleError>,
) -> Result<Composition, EnsembleError> {
    let mut by_name: HashMap<&str, &EnsembleSpec> = HashMap::new();
    for s in specs {
        s.validate()?;
        if by_name.insert(&s.name, s).is_some() {
            return Err(EnsembleError::DuplicateName(s.name.clone()));
        }
    }
    if !by_name.contains_key(root) {
        return Err(EnsembleError::UnknownEnsemble(root.to_string()));
    }

    // Topological order by depth-first search, reporting the first cycle.
    #[derive(Clone, Copy, PartialEq)]
    enum Mark {
        Visiting,
        Done,
    }
    fn visit<'a>(
        name: &'a str,
        by_name: &HashMap<&'a str, &'a EnsembleSpec>,
        marks: &mut HashMap<&'a str, Mark>,
        stack: &mut Vec<&'a str>,
        order: &mut Vec<&'a str>,
    ) -> Result<(), EnsembleError> {
        match marks.get(name) {
            Some(Mark::Done) => return Ok(()),
            Some(Mark::Visiting) => {
                let start = stack.iter().position(|n| *n == name).unwrap_or(0);
                let mut cyc: Vec<&str> = stack[start..].to_vec();
                cyc.push(name);
                return Err(EnsembleError::Cycle(cyc.join(" -> ")));
            }
            None => {}
        }
        marks.insert(name, Mark::Visiting);
        stack.push(name);
        for m in &by_name[name].members {
            if let Some((k, _)) = by_name.get_key_value(m.as_str()) {
                visit(k, by_name, marks, stack, order)?;
            }
        }
        stack.pop();
        marks.insert(name, Mark::Done);
        order.push(name);
        Ok(())
    }
    let mut order = Vec::new();
    visit(root, &by_name, &mut HashMap::new(), &mut Vec::new(), &mut order)?;

    let mut files: HashMap<String, PredictionFile> = HashMap::new();
    let mut outputs: HashMap<String, PredictionFile> = HashMap::new();
    for name in &order {
        let spec = by_name[name];
        for m in &spec.members {
            if !by_name.contains_key(m.as_str()) && !files.contains_key(m) {
                files.insert(m.clone(), load(m)?);
            }
        }
        let members: Vec<&PredictionFile> = spec
            .members
            .iter()
            .map(|m| outputs.get(m).or_else(|| files.get(m)).expect("member resolved"))
            .collect();
        let adj = if spec.mode == VoteMode::LlmAdjudicated { adjudicator(spec)? } else { None };
        let out = run_ensemble(spec, &members, adj.as_ref())?;
        outputs.insert(name.to_string(), out);
    }
    Ok(Composition {
        output: outputs[root].clone(),
        order: order.iter().map(|s| s.to_string()).collect(),
        outputs,
    })
}
