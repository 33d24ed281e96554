use amap::gateway::{Gateway, ScriptedResponder};
use amap::ingest::{filter_valid_runs, parse_files, parse_log, Dialect, REASON_EMPTY_TERMINAL, REASON_NO_ANSWER};
use amap::pipeline::{closed_loop, PipelineConfig};
use amap::sim::scenarios;
use amap::workflow::{answer_instances, build_dfg, final_instances, segment_instances, GatewayKind};

const BLOCKS: &str = r#"
checker_a: {
    "run_id": "r1",
    "task_id": "t11",
    "text_analyzed": "Dana is not on the first list."
},
checker_b: {
    "run_id": "r1",
    "task_id": "t12",
    "text_analyzed": "Dana is on the second list."
},
front: {
    "run_id": "r1",
    "task_id": "t13",
    "text_analyzed": "Dana may not continue."
}
front: {
    "run_id": "r2",
    "task_id": "t20",
    "text_analyzed": "Checking Dana."
},
checker_a: {
    "run_id": "r2",
    "task_id": "t21",
    "text_analyzed": "Dana is on the first list."
},
front: {
    "run_id": "r2",
    "task_id": "t22",
    "text_analyzed": "Dana may continue."
}
"#;

#[test]
fn node_blocks_ingest_and_mine() {
    let log = parse_log(BLOCKS.as_bytes(), Dialect::NodeBlocks).unwrap();
    assert_eq!(log.runs.len(), 2);
    assert_eq!(log.answer_node, "front");
    assert_eq!(log.runs[0].events[1].output_text, "Dana is on the second list.");
    assert!(log.runs.iter().all(|r| r.terminal));

    let view = build_dfg(&log).unwrap();
    let edges: Vec<(&str, &str, usize)> = view.edges.iter().map(|e| (e.from.as_str(), e.to.as_str(), e.count)).collect();
    assert_eq!(
        edges,
        [("checker_a", "checker_b", 1), ("checker_a", "front", 1), ("checker_b", "front", 1), ("front", "checker_a", 1)]
    );
    // r1 visits both successors of checker_a back to back, so it is no exclusive choice.
    assert_eq!(view.gateways["checker_a"], GatewayKind::None);
    assert!(view.xor_splits().is_empty());
    assert_eq!(view.gateways["front"], GatewayKind::None);

    let seg = segment_instances(&view, &log).unwrap();
    assert_eq!(seg["front"].iter().map(|i| i.ordinal).collect::<Vec<_>>(), [0, 0, 1]);
    let answers = answer_instances(&seg, &view, &log);
    assert_eq!(answers.len(), 2);
    assert_eq!(answers[1].output_text, "Dana may continue.");
    assert_eq!(answers[1].ordinal, 1);
    assert_eq!(final_instances(&seg, "checker_a").len(), 2);
}

#[test]
fn canonical_and_node_blocks_files_share_one_log() {
    let canonical = concat!(
        r#"{"run_id":"r3","task_id":"t30","node":"checker_b","ts":1,"input":"q","output":"Dana is on the second list."}"#,
        "\n",
        r#"{"run_id":"r3","task_id":"t31","node":"front","ts":2,"input":"q","output":"Dana may not continue."}"#,
        "\n"
    );
    let log = parse_files(&[
        ("blocks.log".into(), BLOCKS.as_bytes().to_vec(), Dialect::NodeBlocks),
        ("more.jsonl".into(), canonical.as_bytes().to_vec(), Dialect::Canonical),
    ])
    .unwrap();
    assert_eq!(log.runs.len(), 3);
    assert_eq!(log.source_files, ["blocks.log", "more.jsonl"]);
    assert_eq!(log.event_count(), 8);
}

#[test]
fn truncated_runs_are_dropped_with_reasons() {
    let mut spec = scenarios::builtin("access-control").unwrap();
    spec.truncation_rate = 0.0;
    let runs = amap::sim::simulate(&spec, 0, 100).unwrap();
    let mut log = amap::sim::to_log(&spec, &runs);
    log.runs[10].events.pop();
    log.runs[20].events.pop();
    log.runs[30].events.last_mut().unwrap().output_text.clear();
    log.set_answer_node("orchestration_agent");
    let (valid, rejected) = filter_valid_runs(log);
    assert_eq!(valid.runs.len(), 97);
    let reasons: Vec<&str> = rejected.iter().map(|r| r.reason.as_str()).collect();
    assert_eq!(reasons.iter().filter(|r| **r == REASON_NO_ANSWER).count(), 2);
    assert_eq!(reasons.iter().filter(|r| **r == REASON_EMPTY_TERMINAL).count(), 1);

    let view = build_dfg(&valid).unwrap();
    let seg = segment_instances(&view, &valid).unwrap();
    assert_eq!(answer_instances(&seg, &view, &valid).len(), 97);
}

#[test]
fn closed_loop_never_lowers_accuracy() {
    for seed in [3u64, 11] {
        let mut spec = scenarios::builtin("access-control").unwrap();
        spec.seed = seed;
        let gw = Gateway::new(ScriptedResponder);
        let out = closed_loop(&spec, 60, 60, &PipelineConfig::default(), &gw).unwrap();
        assert!(out.post.accuracy >= out.pre.accuracy, "seed {seed}: {:?}", out.report);
        assert_eq!(out.post.accuracy, 1.0);
        assert!(!out.report.statements.is_empty());
        let again = closed_loop(&spec, 60, 60, &PipelineConfig::default(), &Gateway::new(ScriptedResponder)).unwrap();
        assert_eq!(again.report, out.report);
    }
}

#[test]
fn input_distillation_is_opt_in() {
    let default = PipelineConfig::default();
    assert!(!serde_json::to_string(&default).unwrap().contains("distill_inputs"));
    let cfg = PipelineConfig { distill_inputs: true, ..default.clone() };
    assert_ne!(cfg.digest(), default.digest());

    let spec = scenarios::builtin("access-control").unwrap();
    let out = closed_loop(&spec, 60, 60, &cfg, &Gateway::new(ScriptedResponder)).unwrap();
    assert!(out.post.accuracy >= out.pre.accuracy);
    assert!(!out.report.statements.is_empty());
}
