//! `mentor`: staged command-line driver for the analytics pipeline.

mod provider;
mod workdir;

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use amap::cluster::{label_interactively, AnnotatedCluster, LabelMode, RunLabel};
use amap::gateway::{journal_summary, Gateway};
use amap::ingest::{parse_files, AgentSpec, Dialect, TrajectoryLog};
use amap::pipeline::{self as pl, *};
use amap::sim::{self, scenarios, EvalReport, SimAgentSpec, SimRun};
use clap::{Args, Parser, Subcommand};

use provider::GatewayArgs;
use workdir::{CliError, CliResult, Workdir, CONFIG_FILE};

const LOG_FILE: &str = "trajectories.jsonl";
const SPEC_FILE: &str = "agent.toml";
const CORRECTED_SPEC_FILE: &str = "agent.corrected.toml";
const ORACLE_FILE: &str = "oracle-labels.json";

#[derive(Debug, Parser)]
#[command(name = "mentor", version, about = "Analyze agent trajectories and derive corrective prompt statements")]
struct Cli {
    /// Directory holding the stage artifacts.
    #[arg(long, global = true, default_value = "mentor-work")]
    workdir: PathBuf,
    #[command(flatten)]
    config: ConfigArgs,
    #[command(flatten)]
    gateway: GatewayArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Args)]
struct ConfigArgs {
    /// Pipeline configuration file (TOML); defaults to <workdir>/config.toml when present.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Seed for clustering and the simulator [default: 42].
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Largest k tried by the elbow search [default: 10].
    #[arg(long, global = true)]
    k_max: Option<usize>,
    /// Relative WCSS drop below which the elbow stops [default: 0.1].
    #[arg(long, global = true)]
    drop_threshold: Option<f64>,
    /// Clusters smaller than this share of runs are negligible [default: 0.05].
    #[arg(long, global = true)]
    min_cluster_frac: Option<f64>,
    /// Texts per cluster shown to feature elicitation [default: 20].
    #[arg(long, global = true)]
    sample_per_cluster: Option<usize>,
    /// Texts per cluster shown to the annotator [default: 3].
    #[arg(long, global = true)]
    annotation_sample: Option<usize>,
    /// Minimum max class importance for a node to be corrected [default: 0.1].
    #[arg(long, global = true)]
    importance_threshold: Option<f64>,
    /// Decision tree depth limit [default: 5].
    #[arg(long, global = true)]
    max_depth: Option<usize>,
    /// Minimum rows per tree leaf [default: 2].
    #[arg(long, global = true)]
    min_leaf: Option<usize>,
    /// Node producing the final answer; defaults to the majority last node.
    #[arg(long, global = true)]
    answer_node: Option<String>,
    /// Drop workflow edges seen fewer times [default: 1].
    #[arg(long, global = true)]
    min_edge_freq: Option<usize>,
    /// Concurrent chat calls [default: 4].
    #[arg(long, global = true)]
    max_in_flight: Option<usize>,
    /// Sampling temperature for analytic chat calls [default: 0].
    #[arg(long, global = true)]
    temperature: Option<f64>,
    /// Completion token limit [default: 1024].
    #[arg(long, global = true)]
    max_tokens: Option<u32>,
    /// Also distill node inputs before feature elicitation and extraction.
    #[arg(long, global = true)]
    distill_inputs: bool,
}

impl ConfigArgs {
    fn resolve(&self, wd: &Workdir) -> CliResult<PipelineConfig> {
        let stored = wd.path(CONFIG_FILE);
        let mut cfg = match &self.config {
            Some(p) => PipelineConfig::from_toml(&read(p)?)?,
            None if stored.exists() => PipelineConfig::from_toml(&read(&stored)?)?,
            None => PipelineConfig::default(),
        };
        macro_rules! set {
            ($($f:ident),*) => { $( if let Some(v) = self.$f.clone() { cfg.$f = v; } )* };
        }
        set!(seed, k_max, drop_threshold, min_cluster_frac, sample_per_cluster, annotation_sample,
             importance_threshold, max_depth, min_leaf, min_edge_freq, max_in_flight, temperature, max_tokens);
        if let Some(a) = &self.answer_node {
            cfg.answer_node = Some(a.clone());
        }
        cfg.distill_inputs |= self.distill_inputs;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, Args)]
struct ScenarioArgs {
    /// Bundled scenario name or path to a scenario TOML file.
    #[arg(long, default_value = "access-control")]
    scenario: String,
    #[arg(long)]
    p_conj: Option<f64>,
    #[arg(long)]
    residual_error: Option<f64>,
    #[arg(long)]
    truncation_rate: Option<f64>,
}

impl ScenarioArgs {
    fn load(&self, seed: Option<u64>) -> CliResult<SimAgentSpec> {
        let mut spec = if Path::new(&self.scenario).is_file() {
            SimAgentSpec::from_toml(&read(Path::new(&self.scenario))?)?
        } else {
            scenarios::builtin(&self.scenario)?
        };
        if let Some(s) = seed {
            spec.seed = s;
        }
        if let Some(p) = self.p_conj {
            spec.p_conj = p;
        }
        if let Some(r) = self.residual_error {
            spec.residual_error = r;
        }
        if let Some(t) = self.truncation_rate {
            spec.truncation_rate = t;
        }
        spec.validate()?;
        Ok(spec)
    }
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Parse trajectory logs, keep valid runs, and store the pipeline config.
    Ingest {
        /// Trajectory log files.
        #[arg(required = true)]
        paths: Vec<PathBuf>,
        /// Log format: `canonical` (JSON lines) or `node-blocks`.
        #[arg(long, default_value = "canonical")]
        dialect: Dialect,
        /// Agent spec (TOML) with the node system prompts.
        #[arg(long)]
        spec: Option<PathBuf>,
    },
    /// Build the workflow view.
    Mine,
    /// Distill, embed, cluster and annotate answer-node outputs.
    Cluster,
    /// Mark clusters as good or bad.
    Label {
        /// Index of the cluster showing the desired outcome.
        #[arg(long, conflicts_with = "oracle_labels")]
        good_cluster: Option<usize>,
        /// JSON map of run id to "success" / "failure".
        #[arg(long)]
        oracle_labels: Option<PathBuf>,
    },
    /// Elicit feature classes and build per-node feature matrices.
    Features,
    /// Train per-node decision trees and rank feature importance.
    Tree,
    /// Derive corrective statements and write the augmented agent spec.
    Correct,
    /// Run the simulator and report accuracy.
    Evaluate {
        #[command(flatten)]
        scenario: ScenarioArgs,
        /// Agent spec replacing the scenario's prompts (for example agent.corrected.toml).
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long, default_value_t = 100)]
        runs: usize,
        #[arg(long, default_value_t = 0)]
        start: u64,
    },
    /// Simulate, analyze, correct and re-evaluate in one go.
    Loop {
        #[command(flatten)]
        scenario: ScenarioArgs,
        #[arg(long, default_value_t = 100)]
        pre: usize,
        #[arg(long, default_value_t = 100)]
        post: usize,
    },
    /// Write simulated trajectories, the agent spec and ground-truth labels.
    Sim {
        #[command(flatten)]
        scenario: ScenarioArgs,
        #[arg(long, default_value_t = 100)]
        runs: usize,
        #[arg(long, default_value_t = 0)]
        start: u64,
    },
}

fn read(p: &Path) -> CliResult<String> {
    std::fs::read_to_string(p).map_err(|e| CliError::Usage(format!("cannot read {}: {e}", p.display())))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn run(cli: &Cli) -> CliResult<()> {
    let wd = Workdir::new(&cli.workdir);
    let cfg = cli.config.resolve(&wd)?;
    match &cli.command {
        Command::Ingest { paths, dialect, spec } => {
            let files = paths
                .iter()
                .map(|p| Ok((p.clone(), std::fs::read(p).map_err(|e| CliError::Usage(format!("cannot read {}: {e}", p.display())))?, *dialect)))
                .collect::<CliResult<Vec<_>>>()?;
            let agent = spec.as_ref().map(|p| AgentSpec::from_toml(&read(p)?).map_err(CliError::from)).transpose()?;
            let log = load_log(&files, agent.as_ref())?;
            let ing = stage_ingest(log, &cfg)?;
            write_config(&wd, &cfg)?;
            write_ingest(&wd, &cfg, &ing)?;
            println!(
                "ingested {} valid runs ({} events), {} rejected; answer node {}",
                ing.log.runs.len(),
                ing.log.event_count(),
                ing.rejected.len(),
                ing.log.answer_node
            );
        }
        Command::Mine => {
            let ing: IngestArtifact = wd.read_artifact(STAGE_INGEST, &cfg)?;
            let wf = stage_workflow(&ing, &cfg)?;
            write_workflow(&wd, &cfg, &wf)?;
            print!("{}", wf.view.to_edge_list());
        }
        Command::Cluster => {
            let ing: IngestArtifact = wd.read_artifact(STAGE_INGEST, &cfg)?;
            let wf: WorkflowArtifact = wd.read_artifact(STAGE_MINE, &cfg)?;
            let gw = cli.gateway.build(&cfg)?;
            let cl = stage_cluster(&ing, &wf, &cfg, &gw);
            cli.gateway.finish(&gw)?;
            let cl = cl?;
            write_clusters(&wd, &cfg, &cl)?;
            print!("{}", clusters_report(&cl));
        }
        Command::Label {
            good_cluster,
            oracle_labels,
        } => {
            let cl: ClusterArtifact = wd.read_artifact(STAGE_CLUSTER, &cfg)?;
            let labels = match (good_cluster, oracle_labels) {
                (Some(g), _) => stage_label(&cl, LabelMode::GoodCluster(*g))?,
                (None, Some(p)) => {
                    let map: BTreeMap<String, RunLabel> =
                        serde_json::from_str(&read(p)?).map_err(amap::Error::from)?;
                    stage_label(&cl, LabelMode::Oracle(&map))?
                }
                (None, None) => {
                    let stdin = std::io::stdin();
                    let mut input = stdin.lock();
                    let mut out = std::io::stdout();
                    LabelArtifact {
                        clusters: label_interactively(cl.clusters.clone(), &mut input, &mut out)
                            .map_err(|e| e.in_stage(STAGE_LABEL))?,
                    }
                }
            };
            write_labels(&wd, &cfg, &labels)?;
            print!("{}", labels_report(&labels.clusters));
        }
        Command::Features => {
            let ing: IngestArtifact = wd.read_artifact(STAGE_INGEST, &cfg)?;
            let wf: WorkflowArtifact = wd.read_artifact(STAGE_MINE, &cfg)?;
            let cl: ClusterArtifact = wd.read_artifact(STAGE_CLUSTER, &cfg)?;
            let lab: LabelArtifact = wd.read_artifact(STAGE_LABEL, &cfg)?;
            let gw = cli.gateway.build(&cfg)?;
            let feat = stage_features(&ing, &wf, &cl, &lab, &cfg, &gw);
            cli.gateway.finish(&gw)?;
            let feat = feat?;
            write_features(&wd, &cfg, &feat)?;
            for c in &feat.elicitation.classes {
                println!("{}: {}", c.name, c.description);
            }
        }
        Command::Tree => {
            let feat: FeatureArtifact = wd.read_artifact(STAGE_FEATURES, &cfg)?;
            let tree = stage_tree(&feat, &cfg)?;
            write_tree(&wd, &cfg, &tree)?;
            print!("{}", tree_report(&tree));
        }
        Command::Correct => {
            let ing: IngestArtifact = wd.read_artifact(STAGE_INGEST, &cfg)?;
            let lab: LabelArtifact = wd.read_artifact(STAGE_LABEL, &cfg)?;
            let feat: FeatureArtifact = wd.read_artifact(STAGE_FEATURES, &cfg)?;
            let tree: TreeArtifact = wd.read_artifact(STAGE_TREE, &cfg)?;
            let gw = cli.gateway.build(&cfg)?;
            let corr = stage_correct(&ing, &lab, &feat, &tree, &cfg, &gw);
            cli.gateway.finish(&gw)?;
            let corr = corr?;
            write_correction(&wd, &cfg, &feat, &tree, &corr)?;
            print_statements(&corr);
        }
        Command::Evaluate {
            scenario,
            spec,
            runs,
            start,
        } => {
            let mut sim_spec = scenario.load(cli.config.seed)?;
            if let Some(p) = spec {
                let mut agent = AgentSpec::from_toml(&read(p)?)?;
                agent.answer_node = agent.answer_node.or(sim_spec.agent.answer_node.clone());
                sim_spec = sim_spec.with_agent(agent);
                sim_spec.validate()?;
            }
            let report = sim::evaluate_range(&sim_spec, *start, *runs)?;
            wd.write_json("eval.json", &report)?;
            println!(
                "{}: {}/{} successful runs, accuracy {:.3}{}",
                label_of(&sim_spec),
                report.successes,
                report.n_runs,
                report.accuracy,
                if sim_spec.is_corrected() { " (corrected prompt)" } else { "" }
            );
        }
        Command::Sim { scenario, runs, start } => {
            let spec = scenario.load(cli.config.seed)?;
            let sim_runs = sim::simulate(&spec, *start, *runs)?;
            write_sim(&wd, &spec, &sim_runs)?;
            let report = sim::report_of(&spec, &sim_runs);
            wd.write_json("sim-report.json", &report)?;
            println!(
                "simulated {} runs of {} (seed {}): accuracy {:.3}; wrote {}",
                report.n_runs,
                label_of(&spec),
                spec.seed,
                report.accuracy,
                wd.path(LOG_FILE).display()
            );
        }
        Command::Loop { scenario, pre, post } => {
            let spec = scenario.load(cli.config.seed)?;
            let gw = cli.gateway.build(&cfg)?;
            let out = run_loop(&wd, &spec, *pre, *post, &cfg, &gw);
            cli.gateway.finish(&gw)?;
            let out = out?;
            print!("{}", out.report.table());
            print_statements(&out.artifacts.correction);
            let summary = journal_summary(&gw.journal());
            let calls: Vec<String> = summary.iter().map(|(k, v)| format!("{k}={v}")).collect();
            log::info!("chat calls: {}", calls.join(" "));
        }
    }
    Ok(())
}

fn label_of(spec: &SimAgentSpec) -> &str {
    if spec.name.is_empty() {
        "scenario"
    } else {
        &spec.name
    }
}

/// Parses log files keyed by file name, then attaches the agent spec.
fn load_log(files: &[(PathBuf, Vec<u8>, Dialect)], spec: Option<&AgentSpec>) -> CliResult<TrajectoryLog> {
    let mut keyed = Vec::with_capacity(files.len());
    for (p, bytes, d) in files {
        let name = p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_else(|| p.display().to_string());
        let key = if keyed.iter().any(|(k, _, _): &(String, Vec<u8>, Dialect)| *k == name) {
            p.display().to_string()
        } else {
            name
        };
        keyed.push((key, bytes.clone(), *d));
    }
    let mut log = parse_files(&keyed).map_err(|e| e.in_stage(STAGE_INGEST))?;
    if let Some(s) = spec {
        log.attach_spec(s);
    }
    Ok(log)
}

fn write_config(wd: &Workdir, cfg: &PipelineConfig) -> CliResult<()> {
    wd.write(CONFIG_FILE, &toml::to_string(cfg).map_err(amap::Error::from)?)
}

fn write_sim(wd: &Workdir, spec: &SimAgentSpec, runs: &[SimRun]) -> CliResult<()> {
    let log = sim::to_log(spec, runs);
    wd.write(LOG_FILE, &log.to_canonical())?;
    wd.write(SPEC_FILE, &spec.agent.to_toml()?)?;
    let labels: BTreeMap<&str, RunLabel> = runs.iter().map(|r| (r.run.run_id.as_str(), r.outcome)).collect();
    wd.write_json(ORACLE_FILE, &labels)
}

fn write_ingest(wd: &Workdir, cfg: &PipelineConfig, ing: &IngestArtifact) -> CliResult<()> {
    wd.write_artifact(STAGE_INGEST, cfg, ing)?;
    let mut s = format!(
        "runs: {}\nevents: {}\nanswer node: {}\nrejected: {}\n",
        ing.log.runs.len(),
        ing.log.event_count(),
        ing.log.answer_node,
        ing.rejected.len()
    );
    for r in &ing.rejected {
        let _ = writeln!(s, "  {}: {}", r.run_id, r.reason);
    }
    wd.write("ingest.txt", &s)
}

fn write_workflow(wd: &Workdir, cfg: &PipelineConfig, wf: &WorkflowArtifact) -> CliResult<()> {
    wd.write_artifact(STAGE_MINE, cfg, wf)?;
    wd.write("workflow.txt", &wf.view.to_edge_list())?;
    wd.write("workflow.dot", &wf.view.to_dot())
}

fn clusters_report(cl: &ClusterArtifact) -> String {
    let mut s = String::from("elbow curve:\n");
    for (k, w) in &cl.curve {
        let _ = writeln!(s, "  k={k}: wcss={w:.6}");
    }
    let _ = writeln!(s, "chosen k: {}", cl.k);
    s.push_str(&labels_report(&cl.clusters));
    s
}

fn labels_report(clusters: &[AnnotatedCluster]) -> String {
    let mut s = String::new();
    for c in clusters {
        let _ = writeln!(
            s,
            "cluster {}: \"{}\" [{} samples] {}",
            c.index,
            c.annotation,
            c.size,
            serde_json::to_value(c.outcome).ok().and_then(|v| v.as_str().map(str::to_string)).unwrap_or_default()
        );
    }
    s
}

fn write_clusters(wd: &Workdir, cfg: &PipelineConfig, cl: &ClusterArtifact) -> CliResult<()> {
    wd.write_artifact(STAGE_CLUSTER, cfg, cl)?;
    wd.write("clusters.txt", &clusters_report(cl))
}

fn write_labels(wd: &Workdir, cfg: &PipelineConfig, lab: &LabelArtifact) -> CliResult<()> {
    wd.write_artifact(STAGE_LABEL, cfg, lab)?;
    wd.write("labels.txt", &labels_report(&lab.clusters))
}

fn write_features(wd: &Workdir, cfg: &PipelineConfig, feat: &FeatureArtifact) -> CliResult<()> {
    wd.write_artifact(STAGE_FEATURES, cfg, feat)?;
    for (node, nf) in &feat.nodes {
        wd.write(&format!("features/{node}.csv"), &nf.matrix.to_csv())?;
    }
    Ok(())
}

fn tree_report(tree: &TreeArtifact) -> String {
    let mut s = String::new();
    for (node, nt) in &tree.nodes {
        let _ = writeln!(s, "{node}:");
        for (class, v) in nt.importance.ranked_classes() {
            let _ = writeln!(s, "  {class}: {v:.3}");
        }
    }
    let _ = writeln!(s, "included: {}", tree.filter.included.join(", "));
    for (n, r) in &tree.filter.excluded {
        let _ = writeln!(s, "excluded {n}: {r}");
    }
    s
}

fn write_tree(wd: &Workdir, cfg: &PipelineConfig, tree: &TreeArtifact) -> CliResult<()> {
    wd.write_artifact(STAGE_TREE, cfg, tree)?;
    let mut s = tree_report(tree);
    for (node, nt) in &tree.nodes {
        let _ = write!(s, "\n{node} rules:\n{}", nt.rules);
    }
    wd.write("tree.txt", &s)
}

fn write_correction(
    wd: &Workdir,
    cfg: &PipelineConfig,
    feat: &FeatureArtifact,
    tree: &TreeArtifact,
    corr: &CorrectionArtifact,
) -> CliResult<()> {
    wd.write_artifact(STAGE_CORRECT, cfg, corr)?;
    wd.write("correction.md", &pl::correction_report(feat, tree, corr))?;
    wd.write(CORRECTED_SPEC_FILE, &corr.spec.to_toml()?)
}

fn print_statements(corr: &CorrectionArtifact) {
    if corr.statements.is_empty() {
        println!("no corrective statements");
    }
    for s in &corr.statements {
        println!("[{}] {}", s.node_name, s.text);
    }
}

fn run_loop(
    wd: &Workdir,
    spec: &SimAgentSpec,
    n_pre: usize,
    n_post: usize,
    cfg: &PipelineConfig,
    gw: &Gateway,
) -> CliResult<LoopOutcome> {
    write_config(wd, cfg)?;
    let mut staged: Option<CliError> = None;
    let result = closed_loop_with(spec, n_pre, n_post, cfg, gw, |runs| {
        // Same path as `mentor sim` followed by `mentor ingest`.
        let written = write_sim(wd, spec, runs).and_then(|()| {
            let bytes = std::fs::read(wd.path(LOG_FILE))?;
            let agent = AgentSpec::from_toml(&read(&wd.path(SPEC_FILE))?)?;
            load_log(&[(PathBuf::from(LOG_FILE), bytes, Dialect::Canonical)], Some(&agent))
        });
        written.map_err(|e| match e {
            CliError::Core(c) => c,
            other => {
                let msg = other.to_string();
                staged = Some(other);
                amap::Error::InvalidArgument(msg)
            }
        })
    });
    if let Some(e) = staged {
        return Err(e);
    }
    let out = result?;
    let a = &out.artifacts;
    write_ingest(wd, cfg, &a.ingest)?;
    write_workflow(wd, cfg, &a.workflow)?;
    write_clusters(wd, cfg, &a.clusters)?;
    write_labels(wd, cfg, &a.labels)?;
    write_features(wd, cfg, &a.features)?;
    write_tree(wd, cfg, &a.tree)?;
    write_correction(wd, cfg, &a.features, &a.tree, &a.correction)?;
    write_eval(wd, "eval-pre.json", &out.pre)?;
    write_eval(wd, "eval-post.json", &out.post)?;
    wd.write_json("loop-report.json", &out.report)?;
    let mut text = out.report.table();
    text.push('\n');
    text.push_str(&pl::correction_report(&a.features, &a.tree, &a.correction));
    wd.write("report.txt", &text)?;
    Ok(out)
}

fn write_eval(wd: &Workdir, name: &str, r: &EvalReport) -> CliResult<()> {
    wd.write_json(name, r)
}
