//! Stage functions chaining the analytics modules, their artifacts, and the
//! closed loop over the simulator.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::cluster::{
    annotate_cluster, assign_outcome_labels, select_k_elbow, AnnotatedCluster, ClusterOutcome, LabelMode,
};
use crate::correct::{self, AugmentedPrompt, CorrectionInput, CorrectiveStatement};
use crate::error::{Error, Result};
use crate::features::{
    self, build_feature_matrix, canonicalize_values, elicit_feature_classes, elicitation_samples,
    extract_feature_values, CanonOptions, Elicitation, Extraction, FeatureMatrix, FeatureValueSet, LabeledSpans,
};
use crate::gateway::{digest, Gateway};
use crate::ingest::{filter_valid_runs, AgentSpec, Rejection, TrajectoryLog};
use crate::sim::{self, EvalReport, SimAgentSpec, SimRun};
use crate::tree::{feature_importance, filter_nodes, train_tree, NodeFilter, TreeParams};
use crate::workflow::{answer_instances, build_dfg_with, final_instances, segment_instances, WorkflowView};
use crate::{DecisionTree, Importance, TOOL_VERSION};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub n_runs: usize,
    pub k_max: usize,
    pub drop_threshold: f64,
    pub min_cluster_frac: f64,
    pub sample_per_cluster: usize,
    pub annotation_sample: usize,
    pub importance_threshold: f64,
    pub max_depth: usize,
    pub min_leaf: usize,
    pub seed: u64,
    pub answer_node: Option<String>,
    pub min_edge_freq: usize,
    pub temperature: f64,
    pub max_tokens: u32,
    pub max_in_flight: usize,
    /// Also distill node input texts and feed them to elicitation and extraction.
    #[serde(skip_serializing_if = "std::ops::Not::not")]
    pub distill_inputs: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            n_runs: 100,
            k_max: 10,
            drop_threshold: 0.1,
            min_cluster_frac: 0.05,
            sample_per_cluster: 20,
            annotation_sample: 3,
            importance_threshold: 0.1,
            max_depth: 5,
            min_leaf: 2,
            seed: 42,
            answer_node: None,
            min_edge_freq: 1,
            temperature: 0.0,
            max_tokens: 1024,
            max_in_flight: 4,
            distill_inputs: false,
        }
    }
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let c: PipelineConfig = toml::from_str(text)?;
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("n_runs", self.n_runs),
            ("k_max", self.k_max),
            ("sample_per_cluster", self.sample_per_cluster),
            ("annotation_sample", self.annotation_sample),
            ("max_depth", self.max_depth),
            ("min_leaf", self.min_leaf),
            ("min_edge_freq", self.min_edge_freq),
            ("max_in_flight", self.max_in_flight),
            ("max_tokens", self.max_tokens as usize),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::InvalidArgument(format!("{name} must be positive")));
            }
        }
        let fractions = [
            ("drop_threshold", self.drop_threshold),
            ("min_cluster_frac", self.min_cluster_frac),
            ("importance_threshold", self.importance_threshold),
        ];
        for (name, v) in fractions {
            if !(v > 0.0 && v < 1.0) {
                return Err(Error::InvalidArgument(format!("{name} = {v} outside (0, 1)")));
            }
        }
        if !(0.0..=1.0).contains(&self.temperature) {
            return Err(Error::InvalidArgument(format!("temperature {} outside [0, 1]", self.temperature)));
        }
        Ok(())
    }

    /// sha256 of the canonical JSON form.
    pub fn digest(&self) -> String {
        digest(&serde_json::to_string(self).expect("config serializes"))
    }

    fn tree_params(&self) -> TreeParams {
        TreeParams {
            max_depth: self.max_depth,
            min_leaf: self.min_leaf,
        }
    }

    fn canon(&self) -> CanonOptions {
        CanonOptions {
            k_max: self.k_max,
            drop_threshold: self.drop_threshold,
            seed: self.seed,
        }
    }
}

/// On-disk wrapper of every stage artifact.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Envelope<T> {
    pub stage: String,
    pub tool_version: String,
    pub config_digest: String,
    pub body: T,
}

impl<T: Serialize> Envelope<T> {
    pub fn new(stage: &str, cfg: &PipelineConfig, body: T) -> Self {
        Envelope {
            stage: stage.to_string(),
            tool_version: TOOL_VERSION.to_string(),
            config_digest: cfg.digest(),
            body,
        }
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("artifact serializes");
        s.push('\n');
        s
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IngestArtifact {
    pub log: TrajectoryLog,
    pub rejected: Vec<Rejection>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WorkflowArtifact {
    pub view: WorkflowView,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterArtifact {
    pub answer_node: String,
    /// Distilled answer text per run id.
    pub texts: BTreeMap<String, String>,
    pub curve: Vec<(usize, f64)>,
    pub k: usize,
    pub clusters: Vec<AnnotatedCluster>,
    pub distill_provenance: Vec<String>,
}

impl ClusterArtifact {
    /// Cluster index of every clustered run.
    pub fn run_clusters(&self) -> BTreeMap<&str, usize> {
        self.clusters
            .iter()
            .flat_map(|c| c.members.iter().map(move |m| (m.as_str(), c.index)))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelArtifact {
    pub clusters: Vec<AnnotatedCluster>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeFeatures {
    pub extractions: Vec<Extraction>,
    pub value_sets: Vec<FeatureValueSet>,
    pub matrix: FeatureMatrix,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureArtifact {
    pub elicitation: Elicitation,
    pub nodes: BTreeMap<String, NodeFeatures>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeTree {
    pub tree: DecisionTree,
    pub rules: String,
    pub importance: Importance,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreeArtifact {
    pub nodes: BTreeMap<String, NodeTree>,
    pub filter: NodeFilter,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrectionArtifact {
    pub statements: Vec<CorrectiveStatement>,
    pub augmented: BTreeMap<String, AugmentedPrompt>,
    pub spec: AgentSpec,
    /// `(node, reason)` for included nodes that produced no statements.
    pub skipped: Vec<(String, String)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Artifacts {
    pub ingest: IngestArtifact,
    pub workflow: WorkflowArtifact,
    pub clusters: ClusterArtifact,
    pub labels: LabelArtifact,
    pub features: FeatureArtifact,
    pub tree: TreeArtifact,
    pub correction: CorrectionArtifact,
}

pub const STAGE_INGEST: &str = "ingest";
pub const STAGE_MINE: &str = "mine";
pub const STAGE_CLUSTER: &str = "cluster";
pub const STAGE_LABEL: &str = "label";
pub const STAGE_FEATURES: &str = "features";
pub const STAGE_TREE: &str = "tree";
pub const STAGE_CORRECT: &str = "correct";

/// Applies the answer-node choice and drops invalid runs.
pub fn stage_ingest(mut log: TrajectoryLog, cfg: &PipelineConfig) -> Result<IngestArtifact> {
    let run = || -> Result<IngestArtifact> {
        if log.runs.is_empty() {
            return Err(Error::NoRuns);
        }
        if let Some(node) = &cfg.answer_node {
            log.set_answer_node(node);
        } else if log.answer_node.is_empty() {
            if let Some(node) = log.majority_last_node() {
                log.set_answer_node(&node);
            }
        }
        let (log, rejected) = filter_valid_runs(log);
        for r in &rejected {
            log::info!("run {} rejected: {}", r.run_id, r.reason);
        }
        if log.runs.is_empty() {
            return Err(Error::NoRuns);
        }
        Ok(IngestArtifact { log, rejected })
    };
    run().map_err(|e| e.in_stage(STAGE_INGEST))
}

pub fn stage_workflow(ing: &IngestArtifact, cfg: &PipelineConfig) -> Result<WorkflowArtifact> {
    build_dfg_with(&ing.log, cfg.min_edge_freq)
        .map(|view| WorkflowArtifact { view })
        .map_err(|e| e.in_stage(STAGE_MINE))
}

/// Distills, embeds, clusters and annotates the answer-node outputs.
pub fn stage_cluster(
    ing: &IngestArtifact,
    wf: &WorkflowArtifact,
    cfg: &PipelineConfig,
    gateway: &Gateway,
) -> Result<ClusterArtifact> {
    let run = || -> Result<ClusterArtifact> {
        let segments = segment_instances(&wf.view, &ing.log)?;
        let answers = answer_instances(&segments, &wf.view, &ing.log);
        if answers.is_empty() {
            return Err(Error::NoRuns);
        }
        let raw: Vec<String> = answers.iter().map(|a| a.output_text.clone()).collect();
        let distinct: Vec<String> = raw.iter().cloned().collect::<BTreeSet<_>>().into_iter().collect();
        let distilled: Vec<Result<(String, String)>> =
            gateway.map_bounded(&distinct, |t| features::distill(t, gateway));
        let mut by_raw: BTreeMap<&str, String> = BTreeMap::new();
        let mut provenance = Vec::new();
        for (t, d) in distinct.iter().zip(distilled) {
            let (s, r) = d?;
            by_raw.insert(t.as_str(), s);
            provenance.push(r);
        }
        let texts: BTreeMap<String, String> = answers
            .iter()
            .map(|a| (a.run_id.clone(), by_raw[a.output_text.as_str()].clone()))
            .collect();
        let ids: Vec<&String> = texts.keys().collect();
        let ordered: Vec<String> = ids.iter().map(|id| texts[*id].clone()).collect();
        let vectors = gateway.embed_batch(&ordered)?;
        let k_max = cfg.k_max.min(vectors.len());
        let sel = select_k_elbow::<f64, _>(&vectors, k_max, cfg.drop_threshold, cfg.seed)?;
        let mut members: Vec<Vec<(String, String)>> = vec![Vec::new(); sel.k];
        for ((id, text), &a) in ids.iter().zip(&ordered).zip(&sel.result.assignments) {
            members[a].push(((*id).clone(), text.clone()));
        }
        // Largest cluster first, ties by smallest member id.
        members.retain(|m| !m.is_empty());
        members.sort_by(|a, b| b.len().cmp(&a.len()).then_with(|| a[0].0.cmp(&b[0].0)));
        let annotated = gateway.map_bounded(&members, |m| annotate_cluster(m, cfg.annotation_sample, gateway));
        let mut clusters = Vec::with_capacity(members.len());
        for (index, (m, ann)) in members.iter().zip(annotated).enumerate() {
            let (annotation, sample_texts, reference) = ann?;
            clusters.push(AnnotatedCluster {
                index,
                size: m.len(),
                annotation,
                sample_texts,
                outcome: ClusterOutcome::Unlabeled,
                members: m.iter().map(|(id, _)| id.clone()).collect(),
                provenance: reference,
            });
        }
        Ok(ClusterArtifact {
            answer_node: wf.view.answer_node.clone(),
            texts,
            curve: sel.curve,
            k: clusters.len(),
            clusters,
            distill_provenance: provenance,
        })
    };
    run().map_err(|e| e.in_stage(STAGE_CLUSTER))
}

pub fn stage_label(cl: &ClusterArtifact, mode: LabelMode<'_>) -> Result<LabelArtifact> {
    assign_outcome_labels(cl.clusters.clone(), mode)
        .map(|clusters| LabelArtifact { clusters })
        .map_err(|e| e.in_stage(STAGE_LABEL))
}

fn significant<'a>(clusters: &'a [AnnotatedCluster], cfg: &PipelineConfig) -> Vec<&'a AnnotatedCluster> {
    let total: usize = clusters.iter().map(|c| c.size).sum();
    clusters
        .iter()
        .filter(|c| !c.is_negligible(total, cfg.min_cluster_frac))
        .collect()
}

/// Fails unless some non-negligible cluster is labeled good.
pub fn check_comparative_basis(labels: &LabelArtifact, cfg: &PipelineConfig) -> Result<()> {
    let sig = significant(&labels.clusters, cfg);
    if sig.iter().any(|c| c.outcome == ClusterOutcome::Good) {
        return Ok(());
    }
    let runs: usize = labels.clusters.iter().map(|c| c.size).sum();
    let dominant = labels.clusters.iter().map(|c| c.size).max().unwrap_or(0);
    Err(Error::NoComparativeBasis(format!(
        "no successful cluster among {} significant clusters ({runs} runs, largest cluster {dominant}); \
         every trajectory failed, so there is nothing to contrast the failures with",
        sig.len()
    )))
}

/// Elicits feature classes, extracts spans for every node, canonicalizes
/// values and builds one matrix per node.
pub fn stage_features(
    ing: &IngestArtifact,
    wf: &WorkflowArtifact,
    cl: &ClusterArtifact,
    labels: &LabelArtifact,
    cfg: &PipelineConfig,
    gateway: &Gateway,
) -> Result<FeatureArtifact> {
    let run = || -> Result<FeatureArtifact> {
        check_comparative_basis(labels, cfg)?;
        let run_cluster = cl.run_clusters();
        let segments = segment_instances(&wf.view, &ing.log)?;
        let inputs = if cfg.distill_inputs {
            distilled_inputs(&segments, &wf.view, gateway)?
        } else {
            BTreeMap::new()
        };
        let with_input = |input: &str, text: &str| match inputs.get(input) {
            Some(d) => format!("Input: {d}\nOutput: {text}"),
            None => text.to_string(),
        };
        let mut texts = cl.texts.clone();
        for inst in final_instances(&segments, &cl.answer_node) {
            if let Some(t) = texts.get_mut(&inst.run_id) {
                *t = with_input(&inst.input_text, t);
            }
        }
        let samples = elicitation_samples(&labels.clusters, &texts, cfg.sample_per_cluster, cfg.min_cluster_frac);
        let elicitation = elicit_feature_classes(&samples, gateway)?;
        let mut nodes = BTreeMap::new();
        for node in &wf.view.nodes {
            let mut rows: Vec<(String, usize, String)> = Vec::new();
            for inst in final_instances(&segments, node) {
                let Some(&label) = run_cluster.get(inst.run_id.as_str()) else { continue };
                let text = if *node == cl.answer_node {
                    texts[&inst.run_id].clone()
                } else {
                    with_input(&inst.input_text, &inst.output_text)
                };
                rows.push((inst.run_id.clone(), label, text));
            }
            if rows.is_empty() {
                continue;
            }
            let distinct: Vec<String> = rows.iter().map(|r| r.2.clone()).collect::<BTreeSet<_>>().into_iter().collect();
            let results = gateway.map_bounded(&distinct, |t| {
                extract_feature_values(node, t, &elicitation.classes, gateway)
            });
            let mut by_text: BTreeMap<&str, Extraction> = BTreeMap::new();
            for (t, r) in distinct.iter().zip(results) {
                by_text.insert(t.as_str(), r?);
            }
            let extractions: Vec<Extraction> = rows
                .iter()
                .map(|(id, _, t)| Extraction {
                    row_id: id.clone(),
                    ..by_text[t.as_str()].clone()
                })
                .collect();
            let mut value_sets = Vec::with_capacity(elicitation.classes.len());
            for class in &elicitation.classes {
                let spans: Vec<Option<String>> = extractions.iter().map(|e| e.spans[&class.name].clone()).collect();
                value_sets.push(canonicalize_values(class, &spans, cfg.canon(), gateway)?);
            }
            let labeled: Vec<LabeledSpans> = rows
                .iter()
                .zip(&extractions)
                .map(|((id, label, _), e)| LabeledSpans {
                    row_id: id.clone(),
                    label: *label,
                    spans: e.spans.clone(),
                })
                .collect();
            let matrix = build_feature_matrix(node, &labeled, &value_sets);
            nodes.insert(
                node.clone(),
                NodeFeatures {
                    extractions,
                    value_sets,
                    matrix,
                },
            );
        }
        Ok(FeatureArtifact { elicitation, nodes })
    };
    run().map_err(|e| e.in_stage(STAGE_FEATURES))
}

/// Distilled form of every distinct input text seen by a final node instance.
fn distilled_inputs(
    segments: &crate::workflow::Segments,
    view: &WorkflowView,
    gateway: &Gateway,
) -> Result<BTreeMap<String, String>> {
    let distinct: Vec<String> = view
        .nodes
        .iter()
        .flat_map(|n| final_instances(segments, n))
        .map(|i| i.input_text.clone())
        .filter(|t| !t.trim().is_empty())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let results = gateway.map_bounded(&distinct, |t| features::distill(t, gateway));
    distinct
        .into_iter()
        .zip(results)
        .map(|(t, r)| r.map(|(d, _)| (t, d)))
        .collect()
}

pub fn stage_tree(feat: &FeatureArtifact, cfg: &PipelineConfig) -> Result<TreeArtifact> {
    let run = || -> Result<TreeArtifact> {
        let mut nodes = BTreeMap::new();
        for (node, nf) in &feat.nodes {
            let tree: DecisionTree = train_tree(&nf.matrix, cfg.tree_params())?;
            let importance = feature_importance(&tree, &nf.matrix);
            let rules = tree.rules(&nf.matrix.column_names());
            nodes.insert(node.clone(), NodeTree { tree, rules, importance });
        }
        let reports: BTreeMap<String, Importance> =
            nodes.iter().map(|(k, v)| (k.clone(), v.importance.clone())).collect();
        let filter = filter_nodes(&reports, cfg.importance_threshold);
        Ok(TreeArtifact { nodes, filter })
    };
    run().map_err(|e| e.in_stage(STAGE_TREE))
}

/// Derives statements for every node that passed the filter and injects them.
/// With no significant bad cluster there is nothing to fix and the spec passes through.
pub fn stage_correct(
    ing: &IngestArtifact,
    labels: &LabelArtifact,
    feat: &FeatureArtifact,
    tree: &TreeArtifact,
    cfg: &PipelineConfig,
    gateway: &Gateway,
) -> Result<CorrectionArtifact> {
    let run = || -> Result<CorrectionArtifact> {
        let spec = AgentSpec {
            user_prompt: ing.log.user_prompt.clone(),
            answer_node: Some(ing.log.answer_node.clone()),
            prompts: ing.log.agent_spec.clone(),
        };
        let sig = significant(&labels.clusters, cfg);
        let success: Vec<AnnotatedCluster> = sig
            .iter()
            .filter(|c| c.outcome == ClusterOutcome::Good)
            .map(|c| (*c).clone())
            .collect();
        let mut skipped = Vec::new();
        let mut targets: Vec<&str> = Vec::new();
        if sig.iter().any(|c| c.outcome == ClusterOutcome::Bad) {
            for node in &tree.filter.included {
                if spec.prompts.contains_key(node) {
                    targets.push(node);
                } else {
                    log::warn!("node {node} has no system prompt; skipped");
                    skipped.push((node.clone(), "no system prompt in the agent spec".to_string()));
                }
            }
        } else {
            log::info!("no significant failure cluster; nothing to correct");
        }
        let derived = gateway.map_bounded(&targets, |node| {
            let input = CorrectionInput {
                node_name: node,
                system_prompt: correct::strip_injection(&spec.prompts[*node]),
                classes: &feat.elicitation.classes,
                importance: &tree.nodes[*node].importance,
                rules: &tree.nodes[*node].rules,
                success: &success,
                threshold: cfg.importance_threshold,
            };
            correct::derive_corrective(&input, gateway)
        });
        let mut statements = Vec::new();
        let mut per_node: BTreeMap<String, Vec<String>> = BTreeMap::new();
        for (node, d) in targets.iter().zip(derived) {
            let list = d?;
            if list.is_empty() {
                skipped.push((node.to_string(), "empty statement list".to_string()));
                continue;
            }
            per_node.insert(node.to_string(), list.iter().map(|s| s.text.clone()).collect());
            statements.extend(list);
        }
        let augmented = correct::inject(&spec, &per_node)?;
        let new_spec = correct::apply(&spec, &augmented);
        Ok(CorrectionArtifact {
            statements,
            augmented,
            spec: new_spec,
            skipped,
        })
    };
    run().map_err(|e| e.in_stage(STAGE_CORRECT))
}

/// Every stage after ingestion, with `mode` deciding the cluster outcomes.
pub fn analyze(log: TrajectoryLog, mode: LabelMode<'_>, cfg: &PipelineConfig, gateway: &Gateway) -> Result<Artifacts> {
    cfg.validate()?;
    let ingest = stage_ingest(log, cfg)?;
    let workflow = stage_workflow(&ingest, cfg)?;
    let clusters = stage_cluster(&ingest, &workflow, cfg, gateway)?;
    let labels = stage_label(&clusters, mode)?;
    let features = stage_features(&ingest, &workflow, &clusters, &labels, cfg, gateway)?;
    let tree = stage_tree(&features, cfg)?;
    let correction = stage_correct(&ingest, &labels, &features, &tree, cfg, gateway)?;
    Ok(Artifacts {
        ingest,
        workflow,
        clusters,
        labels,
        features,
        tree,
        correction,
    })
}

/// Human-readable summary of features, importances, rules and statements per node.
pub fn correction_report(feat: &FeatureArtifact, tree: &TreeArtifact, corr: &CorrectionArtifact) -> String {
    let mut out = String::from("# Correction report\n\n## Feature classes\n");
    for c in &feat.elicitation.classes {
        let _ = writeln!(out, "- {}: {}", c.name, c.description);
    }
    for (name, reason) in &feat.elicitation.dropped {
        let _ = writeln!(out, "- (dropped) {name}: {reason}");
    }
    for (node, nt) in &tree.nodes {
        let _ = writeln!(out, "\n## Node {node}\n");
        if nt.importance.uninformative {
            let _ = writeln!(out, "importance: uninformative (no split)");
        } else {
            let _ = writeln!(out, "importance:");
            for (class, v) in nt.importance.ranked_classes() {
                let _ = writeln!(out, "  {class}: {v:.3}");
            }
        }
        let _ = writeln!(out, "rules:");
        for l in nt.rules.lines() {
            let _ = writeln!(out, "  {l}");
        }
        if let Some((_, reason)) = tree.filter.excluded.iter().find(|(n, _)| n == node) {
            let _ = writeln!(out, "excluded: {reason}");
        }
        let st: Vec<&CorrectiveStatement> = corr.statements.iter().filter(|s| &s.node_name == node).collect();
        if !st.is_empty() {
            let _ = writeln!(out, "statements:");
            for (i, s) in st.iter().enumerate() {
                let _ = writeln!(out, "  {}. {} [{}]", i + 1, s.text, s.provenance);
            }
        }
        if let Some((_, reason)) = corr.skipped.iter().find(|(n, _)| n == node) {
            let _ = writeln!(out, "skipped: {reason}");
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoopReport {
    pub scenario: String,
    pub seed: u64,
    pub n_pre: usize,
    pub n_post: usize,
    pub pre_accuracy: f64,
    pub post_accuracy: f64,
    pub delta: f64,
    pub statements: Vec<String>,
    pub scenario_digest: String,
    pub config_digest: String,
}

impl LoopReport {
    /// Accuracy table in percent with the change in percentage points.
    pub fn table(&self) -> String {
        let task = format!("{}_{}", &self.scenario_digest[..7], self.seed);
        let mut out = format!(
            "{:<24} {:<12} {:>8} {:>9} {:>8}\n",
            "Agent", "Task ID", "Pre", "Post", "Delta"
        );
        let _ = writeln!(
            out,
            "{:<24} {:<12} {:>8.1} {:>9.1} {:>+8.1}",
            self.scenario,
            task,
            self.pre_accuracy * 100.0,
            self.post_accuracy * 100.0,
            self.delta * 100.0
        );
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoopOutcome {
    pub pre: EvalReport,
    pub post: EvalReport,
    pub artifacts: Artifacts,
    pub report: LoopReport,
}

/// Simulate, analyze with ground-truth labels, inject, and re-simulate on fresh run indices.
pub fn closed_loop(
    spec: &SimAgentSpec,
    n_pre: usize,
    n_post: usize,
    cfg: &PipelineConfig,
    gateway: &Gateway,
) -> Result<LoopOutcome> {
    closed_loop_with(spec, n_pre, n_post, cfg, gateway, |runs| Ok(sim::to_log(spec, runs)))
}

/// [`closed_loop`] with `prepare` turning the simulated runs into the analyzed log.
pub fn closed_loop_with(
    spec: &SimAgentSpec,
    n_pre: usize,
    n_post: usize,
    cfg: &PipelineConfig,
    gateway: &Gateway,
    prepare: impl FnOnce(&[SimRun]) -> Result<TrajectoryLog>,
) -> Result<LoopOutcome> {
    if n_pre == 0 || n_post == 0 {
        return Err(Error::InvalidArgument("closed loop needs at least one run per phase".into()));
    }
    let pre_runs = sim::simulate(spec, 0, n_pre)?;
    let pre = sim::report_of(spec, &pre_runs);
    let log = prepare(&pre_runs)?;
    let labels = pre.labels();
    let artifacts = analyze(log, LabelMode::Oracle(&labels), cfg, gateway)?;
    let mut agent = artifacts.correction.spec.clone();
    agent.answer_node = spec.agent.answer_node.clone();
    agent.user_prompt = spec.agent.user_prompt.clone();
    let corrected = spec.with_agent(agent);
    let post = sim::evaluate_range(&corrected, n_pre as u64, n_post)?;
    let report = LoopReport {
        scenario: if spec.name.is_empty() { "scenario".into() } else { spec.name.clone() },
        seed: spec.seed,
        n_pre,
        n_post,
        pre_accuracy: pre.accuracy,
        post_accuracy: post.accuracy,
        delta: post.accuracy - pre.accuracy,
        statements: artifacts.correction.statements.iter().map(|s| s.text.clone()).collect(),
        scenario_digest: spec.digest(),
        config_digest: cfg.digest(),
    };
    Ok(LoopOutcome {
        pre,
        post,
        artifacts,
        report,
    })
}
