//! Seeded simulator of the access-control agent and its evaluator.
//!
//! Each run `i` draws from `ChaCha8Rng::seed_from_u64(seed)` on stream `i`,
//! so any run can be regenerated alone. Per run the draws are taken in this
//! order: truncation, interpretation, checker choice, answer template,
//! residual error.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cluster::RunLabel;
use crate::correct::strip_injection;
use crate::error::{Error, Result};
use crate::gateway::digest;
use crate::ingest::{AgentSpec, Run, TaskEvent, TrajectoryLog};

pub const ORCHESTRATOR: &str = "orchestration_agent";
pub const UNAUTHORIZED_CHECKER: &str = "unauthorized_agent";
pub const UNTRUSTED_CHECKER: &str = "untrusted_agent";

/// Share of allow (resp. reject) answers rendered with the first template.
pub const PRIMARY_TEMPLATE_WEIGHT: f64 = 0.7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct UserRecord {
    pub authorized: bool,
    pub trusted: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimAgentSpec {
    #[serde(default)]
    pub name: String,
    pub agent: AgentSpec,
    pub users: BTreeMap<String, UserRecord>,
    pub test_user: String,
    /// Probability that the unmodified prompt is read conjunctively.
    pub p_conj: f64,
    /// Probability that a corrected prompt is still read conjunctively.
    #[serde(default)]
    pub residual_error: f64,
    /// Probability that a run stops before the final answer.
    #[serde(default)]
    pub truncation_rate: f64,
    pub seed: u64,
}

impl SimAgentSpec {
    pub fn from_toml(text: &str) -> Result<Self> {
        let spec: SimAgentSpec = toml::from_str(text)?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, p) in [
            ("p_conj", self.p_conj),
            ("residual_error", self.residual_error),
            ("truncation_rate", self.truncation_rate),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::InvalidArgument(format!("{name} = {p} outside [0, 1]")));
            }
        }
        for node in [ORCHESTRATOR, UNAUTHORIZED_CHECKER, UNTRUSTED_CHECKER] {
            if !self.agent.prompts.contains_key(node) {
                return Err(Error::InvalidArgument(format!("scenario lacks a prompt for {node}")));
            }
        }
        Ok(())
    }

    pub fn with_agent(&self, agent: AgentSpec) -> Self {
        SimAgentSpec {
            agent,
            ..self.clone()
        }
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        SimAgentSpec { seed, ..self.clone() }
    }

    pub fn digest(&self) -> String {
        digest(&serde_json::to_string(self).expect("spec serializes"))
    }

    pub fn is_corrected(&self) -> bool {
        self.agent
            .prompts
            .get(ORCHESTRATOR)
            .is_some_and(|p| has_disjunctive_statement(p))
    }
}

/// True when the injected block of `prompt` carries a statement that refuses on either condition.
pub fn has_disjunctive_statement(prompt: &str) -> bool {
    let injected = prompt[strip_injection(prompt).len()..].to_lowercase();
    injected.lines().any(|l| {
        let words: Vec<&str> = l.split(|c: char| !c.is_ascii_alphanumeric()).filter(|w| !w.is_empty()).collect();
        words.contains(&"either")
            && words
                .iter()
                .any(|w| w.starts_with("refus") || w.starts_with("reject") || w.starts_with("deny") || w.starts_with("denie"))
    })
}

/// Uniform draws of one run, in consumption order.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RunDraws {
    pub truncation: f64,
    pub interpretation: f64,
    pub checker: f64,
    pub template: f64,
    pub residual: f64,
}

pub fn draws(seed: u64, run_index: u64) -> RunDraws {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(run_index);
    RunDraws {
        truncation: rng.gen(),
        interpretation: rng.gen(),
        checker: rng.gen(),
        template: rng.gen(),
        residual: rng.gen(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimRun {
    pub run_index: u64,
    pub run: Run,
    pub outcome: RunLabel,
    pub conjunctive: bool,
    pub truncated: bool,
}

fn run_id(seed: u64, i: u64) -> String {
    digest(&format!("{seed}:{i}"))[..32].to_string()
}

fn task_id(seed: u64, i: u64, pos: usize) -> String {
    digest(&format!("{seed}:{i}:{pos}"))[..16].to_string()
}

fn checker_text(checker: &str, user: &str, rec: UserRecord) -> String {
    let (list, member) = if checker == UNAUTHORIZED_CHECKER {
        ("unauthorized", !rec.authorized)
    } else {
        ("untrusted", !rec.trusted)
    };
    if member {
        format!("Yes, {user} is on the {list} users list.")
    } else {
        format!("{user} is not on the {list} users list.")
    }
}

fn answer_text(reject: bool, primary: bool, user: &str, rec: UserRecord) -> String {
    let failing = if !rec.trusted { "untrusted" } else { "unauthorized" };
    match (reject, primary) {
        (false, true) => format!(
            "Yes, the user **{user}** is allowed to proceed. {user} is on the untrusted users list but **not** on the unauthorized list, so there is no reason to reject her. She can continue to use the service."
        ),
        (false, false) => format!(
            "Access granted: {user} is allowed because users are rejected only when they are both unauthorized and untrusted."
        ),
        (true, true) => format!(
            "I'm sorry, but I cannot process this request because {user} is on the {failing} users list."
        ),
        (true, false) => format!(
            "Apologies, the request is declined: {failing} users are rejected even when authorized."
        ),
    }
}

/// Generates run `run_index` of the scenario with its ground-truth outcome.
pub fn run_sim_agent(spec: &SimAgentSpec, run_index: u64) -> Result<SimRun> {
    let user = spec.test_user.as_str();
    let rec = *spec
        .users
        .get(user)
        .ok_or_else(|| Error::UnknownUser(user.to_string()))?;
    let d = draws(spec.seed, run_index);
    let truncated = d.truncation < spec.truncation_rate;
    let conjunctive = if spec.is_corrected() {
        d.residual < spec.residual_error
    } else {
        d.interpretation < spec.p_conj
    };
    let expected_reject = !rec.authorized || !rec.trusted;
    let reject = if conjunctive {
        !rec.authorized && !rec.trusted
    } else {
        expected_reject
    };
    let checker = if d.checker < 0.5 {
        UNAUTHORIZED_CHECKER
    } else {
        UNTRUSTED_CHECKER
    };
    let primary = d.template < PRIMARY_TEMPLATE_WEIGHT;

    let id = run_id(spec.seed, run_index);
    let list = if checker == UNAUTHORIZED_CHECKER { "unauthorized" } else { "untrusted" };
    let check = checker_text(checker, user, rec);
    let mut steps = vec![
        (
            ORCHESTRATOR,
            spec.agent.user_prompt.clone(),
            format!("Checking whether {user} may use the service."),
        ),
        (checker, format!("Is {user} on the {list} users list?"), check.clone()),
    ];
    if !truncated {
        steps.push((ORCHESTRATOR, check, answer_text(reject, primary, user, rec)));
    }
    let events = steps
        .into_iter()
        .enumerate()
        .map(|(pos, (node, input, output))| TaskEvent {
            run_id: id.clone(),
            task_id: task_id(spec.seed, run_index, pos),
            node_name: node.to_string(),
            timestamp: run_index * 1000 + pos as u64,
            input_text: input,
            output_text: output,
            payload: BTreeMap::new(),
            incomplete: false,
        })
        .collect();
    let outcome = if !truncated && reject == expected_reject {
        RunLabel::Success
    } else {
        RunLabel::Failure
    };
    Ok(SimRun {
        run_index,
        run: Run {
            run_id: id,
            events,
            terminal: !truncated,
        },
        outcome,
        conjunctive,
        truncated,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunOutcome {
    pub run_index: u64,
    pub run_id: String,
    pub outcome: RunLabel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n_runs: usize,
    pub successes: usize,
    pub accuracy: f64,
    pub outcomes: Vec<RunOutcome>,
    pub config_digest: String,
}

impl EvalReport {
    pub fn labels(&self) -> BTreeMap<String, RunLabel> {
        self.outcomes.iter().map(|o| (o.run_id.clone(), o.outcome)).collect()
    }
}

/// Runs `start..start + n_runs` and returns their trajectories and outcomes.
pub fn simulate(spec: &SimAgentSpec, start: u64, n_runs: usize) -> Result<Vec<SimRun>> {
    (start..start + n_runs as u64).map(|i| run_sim_agent(spec, i)).collect()
}

pub fn evaluate(spec: &SimAgentSpec, n_runs: usize) -> Result<EvalReport> {
    evaluate_range(spec, 0, n_runs)
}

pub fn evaluate_range(spec: &SimAgentSpec, start: u64, n_runs: usize) -> Result<EvalReport> {
    if n_runs == 0 {
        return Err(Error::InvalidArgument("evaluation needs at least one run".into()));
    }
    Ok(report_of(spec, &simulate(spec, start, n_runs)?))
}

pub fn report_of(spec: &SimAgentSpec, runs: &[SimRun]) -> EvalReport {
    let outcomes: Vec<RunOutcome> = runs
        .iter()
        .map(|r| RunOutcome {
            run_index: r.run_index,
            run_id: r.run.run_id.clone(),
            outcome: r.outcome,
        })
        .collect();
    let successes = outcomes.iter().filter(|o| o.outcome == RunLabel::Success).count();
    EvalReport {
        n_runs: outcomes.len(),
        successes,
        accuracy: if outcomes.is_empty() { 0.0 } else { successes as f64 / outcomes.len() as f64 },
        outcomes,
        config_digest: spec.digest(),
    }
}

/// Trajectory log of simulated runs with the scenario's agent spec attached.
pub fn to_log(spec: &SimAgentSpec, runs: &[SimRun]) -> TrajectoryLog {
    let mut log = TrajectoryLog {
        runs: runs.iter().map(|r| r.run.clone()).collect(),
        ..Default::default()
    };
    log.attach_spec(&spec.agent);
    if log.answer_node.is_empty() {
        log.set_answer_node(ORCHESTRATOR);
    }
    log
}

pub mod scenarios {
    //! Bundled scenario files.

    use super::SimAgentSpec;
    use crate::error::{Error, Result};

    pub const ACCESS_CONTROL: &str = include_str!("../scenarios/access-control.toml");
    pub const ACCESS_CONTROL_CORRECTED: &str = include_str!("../scenarios/access-control-corrected.toml");
    pub const ACCESS_CONTROL_ALL_FAIL: &str = include_str!("../scenarios/access-control-all-fail.toml");

    pub const NAMES: [&str; 3] = ["access-control", "access-control-corrected", "access-control-all-fail"];

    pub fn builtin(name: &str) -> Result<SimAgentSpec> {
        let text = match name {
            "access-control" => ACCESS_CONTROL,
            "access-control-corrected" => ACCESS_CONTROL_CORRECTED,
            "access-control-all-fail" => ACCESS_CONTROL_ALL_FAIL,
            other => {
                return Err(Error::InvalidArgument(format!(
                    "unknown scenario {other} (bundled: {})",
                    NAMES.join(", ")
                )))
            }
        };
        SimAgentSpec::from_toml(text)
    }
}
