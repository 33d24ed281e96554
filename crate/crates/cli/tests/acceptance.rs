//! End-to-end acceptance gate. Runs every criterion, prints one line each and
//! exits non-zero if any of them fails.

#![allow(clippy::type_complexity, clippy::needless_range_loop)]

use std::collections::{BTreeMap, BTreeSet};
use std::panic::{self, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::time::{Duration, Instant};

use amap::cluster::{kmeans, select_k_elbow};
use amap::features::{build_feature_matrix, Column, FeatureMatrix, FeatureValueSet, LabeledSpans, NONE_VALUE};
use amap::ingest::{parse_log, Dialect};
use amap::tree::{feature_importance, train_tree, TreeNode, TreeParams};
use amap::workflow::{build_dfg, GatewayKind};
use proptest::prelude::*;
use proptest::test_runner::{Config, TestCaseError, TestRunner};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde_json::Value;

type Outcome = Result<String, String>;

fn main() {
    let criteria: Vec<(&str, Duration, fn() -> Outcome)> = vec![
        ("k-means oracle equivalence", Duration::from_secs(5), kmeans_oracle),
        ("elbow recovery", Duration::from_secs(10), elbow_recovery),
        ("gini tree oracle", Duration::from_secs(1), tree_oracle),
        ("workflow recovery", Duration::from_secs(2), workflow_recovery),
        ("feature-matrix invariants", Duration::from_secs(10), matrix_invariants),
        ("closed-loop reproduction", Duration::from_secs(60), closed_loop),
        ("degenerate input", Duration::from_secs(5), degenerate_input),
        ("replay determinism", Duration::from_secs(60), replay_determinism),
    ];
    panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    for (i, (name, budget, f)) in criteria.into_iter().enumerate() {
        let start = Instant::now();
        let res = panic::catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        let took = start.elapsed();
        let res = match res {
            Ok(d) if took > budget => Err(format!("{d}; over budget {:.1} s", budget.as_secs_f64())),
            r => r,
        };
        let (tag, detail) = match &res {
            Ok(d) => ("PASS", d),
            Err(d) => {
                failed += 1;
                ("FAIL", d)
            }
        };
        println!("{tag} [{}] {name} ({:.2} s): {detail}", i + 1, took.as_secs_f64());
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
    println!("all acceptance criteria passed");
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

// 1. k-means against the exhaustive partition optimum.

fn partition_wcss(points: &[[f64; 2]], assign: &[usize], k: usize) -> f64 {
    let mut sum = vec![[0.0; 2]; k];
    let mut n = vec![0usize; k];
    for (p, &a) in points.iter().zip(assign) {
        sum[a][0] += p[0];
        sum[a][1] += p[1];
        n[a] += 1;
    }
    points
        .iter()
        .zip(assign)
        .map(|(p, &a)| {
            let c = [sum[a][0] / n[a] as f64, sum[a][1] / n[a] as f64];
            (p[0] - c[0]).powi(2) + (p[1] - c[1]).powi(2)
        })
        .sum()
}

fn exhaustive_optimum(points: &[[f64; 2]], k: usize) -> f64 {
    let n = points.len();
    let mut assign = vec![0usize; n];
    let mut best = f64::INFINITY;
    for mut code in 0..k.pow(n as u32) {
        for a in assign.iter_mut() {
            *a = code % k;
            code /= k;
        }
        best = best.min(partition_wcss(points, &assign, k));
    }
    best
}

fn kmeans_oracle() -> Outcome {
    let mut worst: f64 = 0.0;
    for inst in 0..50u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + inst);
        let n = rng.gen_range(1..=8usize);
        let k = rng.gen_range(1..=n.min(3));
        let mut points: Vec<[f64; 2]> = Vec::with_capacity(n);
        for _ in 0..n {
            if !points.is_empty() && rng.gen_bool(0.2) {
                let p = points[rng.gen_range(0..points.len())];
                points.push(p);
            } else {
                points.push([rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)]);
            }
        }
        let got = kmeans(&points, k, inst).map_err(|e| e.to_string())?.wcss;
        let opt = exhaustive_optimum(&points, k);
        ensure(got <= 1.01 * opt + 1e-12, || {
            format!("instance {inst} (n={n}, k={k}): wcss {got} vs optimum {opt}")
        })?;
        if opt > 1e-12 {
            worst = worst.max(got / opt);
        }
    }
    Ok(format!("50 instances, worst ratio {worst:.6}"))
}

// 2. Elbow recovery on planted clusters.

fn planted(seed: u64, dim: usize) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centers: Vec<Vec<f64>> = Vec::new();
    while centers.len() < 3 {
        let c: Vec<f64> = (0..dim).map(|_| rng.gen_range(-15.0..15.0)).collect();
        let far = centers
            .iter()
            .all(|o| o.iter().zip(&c).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt() >= 10.0);
        if far {
            centers.push(c);
        }
    }
    let mut points: Vec<Vec<f64>> = centers
        .iter()
        .flat_map(|c| {
            (0..20)
                .map(|_| c.iter().map(|x| x + rng.sample::<f64, _>(StandardNormal)).collect())
                .collect::<Vec<_>>()
        })
        .collect();
    points.shuffle(&mut rng);
    points
}

fn elbow_hits(dim: usize) -> Result<usize, String> {
    let mut hits = 0;
    for seed in 0..100u64 {
        let pts = planted(seed, dim);
        let sel = select_k_elbow(&pts, 10, 0.1, seed).map_err(|e| e.to_string())?;
        hits += usize::from(sel.k == 3);
    }
    Ok(hits)
}

fn elbow_recovery() -> Outcome {
    const DIM: usize = 8;
    let hits = elbow_hits(DIM)?;
    ensure(hits >= 95, || format!("k = 3 on {hits}/100 seeds (dim {DIM})"))?;
    Ok(format!("k = 3 on {hits}/100 seeds (dim {DIM}, separation/spread 10)"))
}

// 3. Decision tree against an exact-arithmetic greedy oracle.

enum Oracle {
    Split {
        column: usize,
        samples: usize,
        gini: f64,
        gain: f64,
        left: Box<Oracle>,
        right: Box<Oracle>,
    },
    Leaf {
        counts: BTreeMap<usize, usize>,
        predicted: usize,
        samples: usize,
    },
}

fn counts_of(labels: &[usize], idx: &[usize]) -> BTreeMap<usize, usize> {
    let mut m = BTreeMap::new();
    for &i in idx {
        *m.entry(labels[i]).or_insert(0) += 1;
    }
    m
}

fn sum_sq(idx: &[usize], labels: &[usize]) -> i128 {
    counts_of(labels, idx).values().map(|&c| (c * c) as i128).sum()
}

/// n * gain as an exact fraction `(num, den)`.
fn scaled_gain(p: &[usize], l: &[usize], r: &[usize], labels: &[usize]) -> (i128, i128) {
    let (n, nl, nr) = (p.len() as i128, l.len() as i128, r.len() as i128);
    let num = sum_sq(l, labels) * nr * n + sum_sq(r, labels) * nl * n - sum_sq(p, labels) * nl * nr;
    (num, nl * nr * n)
}

fn oracle_gini(idx: &[usize], labels: &[usize]) -> f64 {
    let n = idx.len() as f64;
    1.0 - counts_of(labels, idx).values().map(|&c| (c as f64 / n).powi(2)).sum::<f64>()
}

fn oracle_grow(rows: &[Vec<u8>], labels: &[usize], idx: &[usize], depth: usize, max_depth: usize, min_leaf: usize) -> Oracle {
    let counts = counts_of(labels, idx);
    let leaf = || {
        let best = counts.values().max().copied().unwrap_or(0);
        Oracle::Leaf {
            predicted: counts.iter().find(|(_, &c)| c == best).map(|(&l, _)| l).unwrap_or(0),
            counts: counts.clone(),
            samples: idx.len(),
        }
    };
    if depth >= max_depth || counts.len() <= 1 || idx.len() < 2 * min_leaf {
        return leaf();
    }
    let mut best: Option<(usize, (i128, i128), Vec<usize>, Vec<usize>)> = None;
    for col in 0..rows[0].len() {
        let (r, l): (Vec<usize>, Vec<usize>) = idx.iter().partition(|&&i| rows[i][col] == 1);
        if l.len() < min_leaf.max(1) || r.len() < min_leaf.max(1) {
            continue;
        }
        let g = scaled_gain(idx, &l, &r, labels);
        if g.0 <= 0 {
            continue;
        }
        let better = match &best {
            None => true,
            Some((_, b, _, _)) => g.0 * b.1 > b.0 * g.1,
        };
        if better {
            best = Some((col, g, l, r));
        }
    }
    match best {
        None => leaf(),
        Some((column, (num, den), l, r)) => Oracle::Split {
            column,
            samples: idx.len(),
            gini: oracle_gini(idx, labels),
            gain: num as f64 / den as f64 / idx.len() as f64,
            left: Box::new(oracle_grow(rows, labels, &l, depth + 1, max_depth, min_leaf)),
            right: Box::new(oracle_grow(rows, labels, &r, depth + 1, max_depth, min_leaf)),
        },
    }
}

fn compare(o: &Oracle, t: &TreeNode<f64>, path: &str) -> Result<(), String> {
    match (o, t) {
        (
            Oracle::Split {
                column,
                samples,
                gini,
                gain,
                left,
                right,
            },
            TreeNode::Internal {
                column: tc,
                samples: ts,
                gini: tg,
                weighted_gain: tw,
                left: tl,
                right: tr,
            },
        ) => {
            ensure(column == tc && samples == ts, || {
                format!("{path}: oracle splits column {column} on {samples} rows, tree column {tc} on {ts}")
            })?;
            ensure((gini - tg).abs() < 1e-12 && (gain - tw).abs() < 1e-12, || {
                format!("{path}: gini/gain {gini}/{gain} vs {tg}/{tw}")
            })?;
            compare(left, tl, &format!("{path}L"))?;
            compare(right, tr, &format!("{path}R"))
        }
        (
            Oracle::Leaf {
                counts,
                predicted,
                samples,
            },
            TreeNode::Leaf {
                class_counts,
                predicted: tp,
                samples: ts,
                ..
            },
        ) => ensure(counts == class_counts && predicted == tp && samples == ts, || {
            format!("{path}: leaf {counts:?}->{predicted} vs {class_counts:?}->{tp}")
        }),
        _ => Err(format!("{path}: node kinds differ")),
    }
}

fn oracle_importance(o: &Oracle, total: usize, acc: &mut [f64]) {
    if let Oracle::Split {
        column,
        samples,
        gain,
        left,
        right,
        ..
    } = o
    {
        acc[*column] += *samples as f64 / total as f64 * gain;
        oracle_importance(left, total, acc);
        oracle_importance(right, total, acc);
    }
}

fn tree_cases() -> Vec<(Vec<Vec<u8>>, Vec<usize>, TreeParams)> {
    let default = TreeParams::default();
    let mut cases = vec![
        // column 1 separates perfectly
        (vec![vec![0, 0], vec![1, 0], vec![0, 1], vec![1, 1]], vec![0, 0, 1, 1], TreeParams { min_leaf: 1, ..default }),
        // duplicate columns
        (vec![vec![1, 1, 0], vec![1, 1, 1], vec![0, 0, 1], vec![0, 0, 0]], vec![2, 2, 0, 0], default),
        // two splits needed
        (
            vec![vec![1, 0], vec![1, 0], vec![0, 1], vec![0, 1], vec![0, 0], vec![0, 0]],
            vec![0, 0, 1, 1, 2, 2],
            default,
        ),
        // single label
        (vec![vec![1], vec![0], vec![1]], vec![3, 3, 3], default),
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    while cases.len() < 20 {
        let n = rng.gen_range(2..=8);
        let w = rng.gen_range(1..=4);
        let l = rng.gen_range(2..=3);
        let rows = (0..n).map(|_| (0..w).map(|_| rng.gen_range(0..=1u8)).collect()).collect();
        let labels = (0..n).map(|_| rng.gen_range(0..l)).collect();
        let params = TreeParams {
            max_depth: rng.gen_range(1..=5),
            min_leaf: rng.gen_range(1..=2),
        };
        cases.push((rows, labels, params));
    }
    cases
}

fn tree_oracle() -> Outcome {
    let mut splits = 0;
    for (ci, (rows, labels, params)) in tree_cases().into_iter().enumerate() {
        let width = rows[0].len();
        let matrix = FeatureMatrix {
            node_name: format!("case{ci}"),
            columns: (0..width)
                .map(|j| Column {
                    class: format!("f{j}"),
                    value: "yes".into(),
                })
                .collect(),
            row_ids: (0..rows.len()).map(|i| format!("r{i}")).collect(),
            row_labels: labels.clone(),
            rows: rows.clone(),
            flagged: Vec::new(),
        };
        let tree: TreeNode<f64> = train_tree(&matrix, params).map_err(|e| e.to_string())?;
        let idx: Vec<usize> = (0..rows.len()).collect();
        let oracle = oracle_grow(&rows, &labels, &idx, 0, params.max_depth, params.min_leaf);
        compare(&oracle, &tree, &format!("case {ci} root"))?;
        let report = feature_importance(&tree, &matrix);
        let mut expect = vec![0.0; width];
        oracle_importance(&oracle, rows.len(), &mut expect);
        let raw: f64 = expect.iter().sum();
        if tree.is_leaf() {
            ensure(report.uninformative && report.column_importances.iter().all(|&c| c == 0.0), || {
                format!("case {ci}: leaf tree not reported uninformative")
            })?;
            continue;
        }
        splits += 1;
        let sum: f64 = report.column_importances.iter().sum();
        ensure((sum - 1.0).abs() <= 1e-9, || format!("case {ci}: importances sum to {sum}"))?;
        for (j, (&got, &e)) in report.column_importances.iter().zip(&expect).enumerate() {
            ensure((got - e / raw).abs() <= 1e-9, || {
                format!("case {ci}: column {j} importance {got} vs {}", e / raw)
            })?;
        }
    }
    Ok(format!("20 matrices match node-for-node, {splits} with splits sum to 1"))
}

// 4. Workflow recovery from generator models.

enum Proc {
    Act(&'static str),
    Seq(Vec<Proc>),
    Xor(Vec<Proc>),
    /// body (redo body)*
    Loop(Box<Proc>, Box<Proc>),
}

use Proc::{Act, Seq, Xor};

fn looped(body: Proc, redo: Proc) -> Proc {
    Proc::Loop(Box::new(body), Box::new(redo))
}

impl Proc {
    fn emit(&self, rng: &mut ChaCha8Rng, out: &mut Vec<&'static str>) {
        match self {
            Act(a) => out.push(a),
            Seq(ps) => ps.iter().for_each(|p| p.emit(rng, out)),
            Xor(ps) => ps[rng.gen_range(0..ps.len())].emit(rng, out),
            Proc::Loop(body, redo) => {
                body.emit(rng, out);
                let mut n = 0;
                while n < 3 && rng.gen_bool(0.4) {
                    redo.emit(rng, out);
                    body.emit(rng, out);
                    n += 1;
                }
            }
        }
    }
}

struct Model {
    name: &'static str,
    process: Proc,
    edges: Vec<(&'static str, &'static str)>,
    xor: Vec<&'static str>,
    answer: Option<&'static str>,
}

fn models() -> Vec<Model> {
    vec![
        Model {
            name: "access-control",
            process: Seq(vec![
                Act("orchestration_agent"),
                Xor(vec![Act("unauthorized_agent"), Act("untrusted_agent")]),
                Act("orchestration_agent"),
            ]),
            edges: vec![
                ("orchestration_agent", "unauthorized_agent"),
                ("orchestration_agent", "untrusted_agent"),
                ("unauthorized_agent", "orchestration_agent"),
                ("untrusted_agent", "orchestration_agent"),
            ],
            xor: vec!["orchestration_agent"],
            answer: Some("orchestration_agent"),
        },
        Model {
            name: "sequence",
            process: Seq(vec![Act("a"), Act("b"), Act("c")]),
            edges: vec![("a", "b"), ("b", "c")],
            xor: vec![],
            answer: Some("c"),
        },
        Model {
            name: "diamond",
            process: Seq(vec![Act("a"), Xor(vec![Act("b"), Act("c")]), Act("d")]),
            edges: vec![("a", "b"), ("a", "c"), ("b", "d"), ("c", "d")],
            xor: vec!["a"],
            answer: Some("d"),
        },
        Model {
            name: "three-way",
            process: Seq(vec![Act("a"), Xor(vec![Act("b"), Act("c"), Act("e")]), Act("d")]),
            edges: vec![("a", "b"), ("a", "c"), ("a", "e"), ("b", "d"), ("c", "d"), ("e", "d")],
            xor: vec!["a"],
            answer: Some("d"),
        },
        Model {
            name: "two-choices",
            process: Seq(vec![
                Act("a"),
                Xor(vec![Act("b"), Act("c")]),
                Act("d"),
                Xor(vec![Act("e"), Act("f")]),
            ]),
            edges: vec![("a", "b"), ("a", "c"), ("b", "d"), ("c", "d"), ("d", "e"), ("d", "f")],
            xor: vec!["a", "d"],
            answer: None,
        },
        Model {
            name: "rework-loop",
            process: Seq(vec![Act("a"), looped(Seq(vec![Act("b"), Act("c")]), Act("d")), Act("e")]),
            edges: vec![("a", "b"), ("b", "c"), ("c", "d"), ("c", "e"), ("d", "b")],
            xor: vec!["c"],
            answer: Some("e"),
        },
        Model {
            name: "choice-then-loop",
            process: Seq(vec![
                Act("a"),
                Xor(vec![Act("b"), Act("c")]),
                looped(Act("d"), Act("e")),
                Act("f"),
            ]),
            edges: vec![("a", "b"), ("a", "c"), ("b", "d"), ("c", "d"), ("d", "e"), ("d", "f"), ("e", "d")],
            xor: vec!["a", "d"],
            answer: Some("f"),
        },
        Model {
            name: "nested-choice",
            process: Seq(vec![
                Act("a"),
                Xor(vec![Seq(vec![Act("b"), Xor(vec![Act("c"), Act("d")])]), Act("e")]),
                Act("f"),
            ]),
            edges: vec![("a", "b"), ("a", "e"), ("b", "c"), ("b", "d"), ("c", "f"), ("d", "f"), ("e", "f")],
            xor: vec!["a", "b"],
            answer: Some("f"),
        },
        Model {
            name: "hub-three-workers",
            process: Seq(vec![Act("hub"), Xor(vec![Act("x"), Act("y"), Act("z")]), Act("hub")]),
            edges: vec![("hub", "x"), ("hub", "y"), ("hub", "z"), ("x", "hub"), ("y", "hub"), ("z", "hub")],
            xor: vec!["hub"],
            answer: Some("hub"),
        },
        Model {
            name: "loop-with-choice",
            process: Seq(vec![Act("a"), looped(Act("b"), Xor(vec![Act("c"), Act("d")])), Act("e")]),
            edges: vec![("a", "b"), ("b", "c"), ("b", "d"), ("b", "e"), ("c", "b"), ("d", "b")],
            xor: vec!["b"],
            answer: Some("e"),
        },
    ]
}

fn permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![Vec::new()];
    }
    let mut out = Vec::new();
    for p in permutations(n - 1) {
        for i in 0..=p.len() {
            let mut q = p.clone();
            q.insert(i, n - 1);
            out.push(q);
        }
    }
    out
}

fn workflow_recovery() -> Outcome {
    let mut checked = Vec::new();
    for (mi, m) in models().into_iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(500 + mi as u64);
        let expected_nodes: Vec<&str> = m
            .edges
            .iter()
            .flat_map(|&(a, b)| [a, b])
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        ensure(expected_nodes.len() <= 6 && m.xor.len() <= 2, || format!("{}: model too large", m.name))?;
        // Opaque node names so a match needs a real isomorphism.
        let mut opaque: Vec<String> = (0..expected_nodes.len()).map(|i| format!("agent_{i}")).collect();
        opaque.shuffle(&mut rng);
        let rename: BTreeMap<&str, &str> = expected_nodes.iter().copied().zip(opaque.iter().map(String::as_str)).collect();

        let mut lines = String::new();
        let mut transitions = 0;
        for r in 0..60 {
            let mut trace = Vec::new();
            m.process.emit(&mut rng, &mut trace);
            transitions += trace.len() - 1;
            for (pos, node) in trace.iter().enumerate() {
                let rec = serde_json::json!({
                    "run_id": format!("{}-{r:03}", m.name),
                    "task_id": format!("t{pos}"),
                    "node": rename[node],
                    "ts": pos,
                    "input": format!("input {pos}"),
                    "output": format!("output of {}", rename[node]),
                });
                lines.push_str(&rec.to_string());
                lines.push('\n');
            }
        }
        let log = parse_log(lines.as_bytes(), Dialect::Canonical).map_err(|e| e.to_string())?;
        let view = build_dfg(&log).map_err(|e| e.to_string())?;
        ensure(view.edges.iter().map(|e| e.count).sum::<usize>() == transitions, || {
            format!("{}: edge counts do not add up to {transitions}", m.name)
        })?;
        let mined_nodes: Vec<&str> = view.nodes.iter().map(String::as_str).collect();
        let mined_edges: BTreeSet<(&str, &str)> = view.edges.iter().map(|e| (e.from.as_str(), e.to.as_str())).collect();
        let mined_xor: BTreeSet<&str> = view
            .gateways
            .iter()
            .filter(|(_, &k)| k == GatewayKind::XorSplit)
            .map(|(n, _)| n.as_str())
            .collect();
        let iso = mined_nodes.len() == expected_nodes.len()
            && permutations(expected_nodes.len()).into_iter().any(|perm| {
                let f = |n: &str| mined_nodes[perm[expected_nodes.iter().position(|&e| e == n).unwrap()]];
                let edges: BTreeSet<(&str, &str)> = m.edges.iter().map(|&(a, b)| (f(a), f(b))).collect();
                let xor: BTreeSet<&str> = m.xor.iter().map(|&n| f(n)).collect();
                edges == mined_edges && xor == mined_xor && m.answer.is_none_or(|a| f(a) == view.answer_node)
            });
        ensure(iso, || format!("{}: mined graph {:?} is not isomorphic", m.name, view.to_edge_list()))?;
        checked.push(m.name);
    }
    Ok(format!("{} models isomorphic ({})", checked.len(), checked.join(", ")))
}

// 5. Feature-matrix invariants.

#[derive(Debug, Clone)]
struct MatrixCase {
    /// (value count, spans per value) per class.
    classes: Vec<(usize, usize)>,
    /// (label, per-class choice) per row; choice is (kind, pick, shout).
    rows: Vec<(usize, Vec<(u8, u16, bool)>)>,
}

fn matrix_case() -> impl Strategy<Value = MatrixCase> {
    (
        prop::collection::vec((1usize..=4, 1usize..=3), 1..=4),
        prop::collection::vec((0usize..4, prop::collection::vec((0u8..3, any::<u16>(), any::<bool>()), 4)), 1..=12),
    )
        .prop_map(|(classes, rows)| MatrixCase { classes, rows })
}

fn value_sets(case: &MatrixCase) -> Vec<FeatureValueSet> {
    case.classes
        .iter()
        .enumerate()
        .map(|(c, &(nv, ns))| {
            let mut values: Vec<String> = (0..nv).map(|v| format!("value {v}")).collect();
            values.push(NONE_VALUE.into());
            let span_to_value = (0..nv)
                .flat_map(|v| (0..ns).map(move |s| (format!("class {c} span {v} {s}"), format!("value {v}"))))
                .collect();
            FeatureValueSet {
                class: format!("class {c}"),
                values,
                span_to_value,
                provenance: Vec::new(),
            }
        })
        .collect()
}

/// Rows plus the value each class cell should carry.
fn labeled_rows(case: &MatrixCase) -> (Vec<LabeledSpans>, Vec<Vec<String>>, BTreeSet<String>) {
    let mut rows = Vec::new();
    let mut expect = Vec::new();
    let mut flagged = BTreeSet::new();
    for (ri, (label, choices)) in case.rows.iter().enumerate() {
        let row_id = format!("run-{ri:02}");
        let mut spans = BTreeMap::new();
        let mut want = Vec::new();
        for (c, &(nv, ns)) in case.classes.iter().enumerate() {
            let (kind, pick, shout) = choices[c];
            let (span, value) = match kind {
                0 => (None, NONE_VALUE.to_string()),
                1 => {
                    let v = pick as usize % nv;
                    let s = format!("class {c} span {v} {}", pick as usize % ns);
                    let s = if shout { format!("  {}\t", s.to_uppercase().replace(' ', "   ")) } else { s };
                    (Some(s), format!("value {v}"))
                }
                _ => {
                    flagged.insert(row_id.clone());
                    (Some(format!("unseen phrase {pick}")), NONE_VALUE.to_string())
                }
            };
            spans.insert(format!("class {c}"), span);
            want.push(value);
        }
        rows.push(LabeledSpans {
            row_id,
            label: *label,
            spans,
        });
        expect.push(want);
    }
    (rows, expect, flagged)
}

fn check_matrix(case: &MatrixCase) -> Result<(), TestCaseError> {
    let sets = value_sets(case);
    let (rows, expect, flagged) = labeled_rows(case);
    let m = build_feature_matrix("node", &rows, &sets);
    prop_assert_eq!(&m, &build_feature_matrix("node", &rows, &sets));

    let width: usize = sets.iter().map(|s| s.values.len()).sum();
    prop_assert_eq!(m.columns.len(), width);
    let names: BTreeSet<String> = m.column_names().into_iter().collect();
    prop_assert_eq!(names.len(), width);
    prop_assert_eq!(m.rows.len(), rows.len());
    prop_assert_eq!(&m.row_labels, &rows.iter().map(|r| r.label).collect::<Vec<_>>());
    prop_assert_eq!(m.flagged.iter().cloned().collect::<BTreeSet<_>>(), flagged);

    for (ri, bits) in m.rows.iter().enumerate() {
        prop_assert_eq!(bits.len(), width);
        for (ci, set) in sets.iter().enumerate() {
            let cols: Vec<usize> = (0..width).filter(|&j| m.columns[j].class == set.class).collect();
            let hot: Vec<usize> = cols.iter().copied().filter(|&j| bits[j] == 1).collect();
            prop_assert_eq!(hot.len(), 1, "row {} class {}", ri, set.class);
            prop_assert_eq!(&m.columns[hot[0]].value, &expect[ri][ci]);
        }
        prop_assert!(bits.iter().all(|&b| b <= 1));
    }
    Ok(())
}

fn matrix_invariants() -> Outcome {
    let cases = 2000;
    let mut runner = TestRunner::new(Config {
        cases,
        failure_persistence: None,
        ..Config::default()
    });
    runner.run(&matrix_case(), |case| check_matrix(&case)).map_err(|e| e.to_string())?;
    Ok(format!("{cases} generated cases"))
}

// 6-8. The CLI binary on the bundled scenario.

fn mentor(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mentor"))
        .arg("--workdir")
        .arg(dir)
        .args(args)
        .env_remove("MENTOR_CHAT_MODEL")
        .env_remove("MENTOR_EMBED_MODEL")
        .env_remove("MENTOR_API_BASE")
        .env_remove("MENTOR_API_KEY")
        .output()
        .expect("mentor binary runs")
}

fn mentor_ok(dir: &Path, args: &[&str]) -> Result<String, String> {
    let out = mentor(dir, args);
    if out.status.success() {
        Ok(String::from_utf8_lossy(&out.stdout).into_owned())
    } else {
        Err(format!(
            "mentor {} exited {:?}: {}",
            args.join(" "),
            out.status.code(),
            String::from_utf8_lossy(&out.stderr).trim()
        ))
    }
}

fn read_json(path: PathBuf) -> Result<Value, String> {
    let text = std::fs::read_to_string(&path).map_err(|e| format!("{}: {e}", path.display()))?;
    serde_json::from_str(&text).map_err(|e| format!("{}: {e}", path.display()))
}

fn num(v: &Value, key: &str) -> Result<f64, String> {
    v[key].as_f64().ok_or_else(|| format!("missing {key}"))
}

/// Per run: truncation, interpretation, checker, template, residual.
fn replay_draws(seed: u64, run: u64) -> [f64; 5] {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(run);
    [rng.gen(), rng.gen(), rng.gen(), rng.gen(), rng.gen()]
}

/// Trudy is authorized but untrusted: only the either-condition reading refuses her.
fn oracle_pre(seed: u64, n: u64) -> f64 {
    let ok = (0..n).filter(|&i| replay_draws(seed, i)[1] >= 0.5).count();
    ok as f64 / n as f64
}

/// Corrected prompt: a run only fails when the residual draw slips under `residual`.
fn oracle_post(seed: u64, start: u64, n: u64, residual: f64) -> f64 {
    let ok = (start..start + n).filter(|&i| replay_draws(seed, i)[4] >= residual).count();
    ok as f64 / n as f64
}

fn closed_loop() -> Outcome {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let wd = tmp.path().join("loop");
    mentor_ok(&wd, &["loop", "--scenario", "access-control", "--seed", "42", "--pre", "100", "--post", "100"])?;
    let rep = read_json(wd.join("loop-report.json"))?;
    let (pre, post, delta) = (num(&rep, "pre_accuracy")?, num(&rep, "post_accuracy")?, num(&rep, "delta")?);
    let want_pre = oracle_pre(42, 100);
    ensure((pre - want_pre).abs() < 1e-12, || format!("pre {pre} vs replay oracle {want_pre}"))?;
    ensure(post == 1.0, || format!("post {post}"))?;
    ensure(delta >= 0.4, || format!("delta {delta}"))?;

    let corrected = wd.join("agent.corrected.toml");
    let corrected = corrected.to_str().ok_or("non-utf8 path")?;
    let (mut pres, mut posts) = (Vec::new(), Vec::new());
    for seed in 0..20u64 {
        let s = seed.to_string();
        let ed = tmp.path().join(format!("eval-{seed}"));
        mentor_ok(&ed, &["evaluate", "--scenario", "access-control", "--seed", &s, "--runs", "100"])?;
        let p = num(&read_json(ed.join("eval.json"))?, "accuracy")?;
        let want = oracle_pre(seed, 100);
        ensure((p - want).abs() < 1e-12, || format!("seed {seed}: pre {p} vs oracle {want}"))?;
        pres.push(p);
        mentor_ok(
            &ed,
            &[
                "evaluate", "--scenario", "access-control", "--spec", corrected, "--residual-error", "0.13", "--seed", &s,
                "--start", "100", "--runs", "100",
            ],
        )?;
        let q = num(&read_json(ed.join("eval.json"))?, "accuracy")?;
        let want = oracle_post(seed, 100, 100, 0.13);
        ensure((q - want).abs() < 1e-12, || format!("seed {seed}: residual post {q} vs oracle {want}"))?;
        posts.push(q);
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let range = |v: &[f64]| {
        (
            v.iter().copied().fold(f64::INFINITY, f64::min),
            v.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        )
    };
    let (mp, mq) = (mean(&pres), mean(&posts));
    let ((plo, phi), (qlo, qhi)) = (range(&pres), range(&posts));
    ensure((mp - 0.50).abs() <= 0.12, || format!("mean pre over 20 seeds {mp:.3}"))?;
    ensure((mq - 0.87).abs() <= 0.07, || format!("mean residual post over 20 seeds {mq:.3}"))?;
    Ok(format!(
        "pre {pre:.2} = oracle, post {post:.2}, delta {delta:+.2}; 20 seeds: pre mean {mp:.3} [{plo:.2}, {phi:.2}], \
         residual 0.13 post mean {mq:.3} [{qlo:.2}, {qhi:.2}]"
    ))
}

fn degenerate_input() -> Outcome {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let out = mentor(tmp.path(), &["loop", "--scenario", "access-control-all-fail"]);
    let stderr = String::from_utf8_lossy(&out.stderr);
    ensure(out.status.code() == Some(2), || format!("exit {:?}: {}", out.status.code(), stderr.trim()))?;
    ensure(stderr.contains("no comparative basis"), || format!("stderr: {}", stderr.trim()))?;
    for f in ["correct.json", "agent.corrected.toml", "correction.md"] {
        ensure(!tmp.path().join(f).exists(), || format!("{f} written despite abort"))?;
    }
    Ok(format!("exit 2: {}", stderr.lines().last().unwrap_or("").trim()))
}

fn tree_files(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir).expect("readable workdir") {
            let p = entry.expect("dir entry").path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let bytes = std::fs::read(&p).expect("readable file");
                out.insert(p.strip_prefix(root).expect("under root").to_path_buf(), bytes);
            }
        }
    }
    out
}

fn replay_determinism() -> Outcome {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    let out_a = mentor_ok(&a, &["loop"])?;
    let out_b = mentor_ok(&b, &["loop"])?;
    ensure(out_a == out_b, || "stdout differs".into())?;
    let (fa, fb) = (tree_files(&a), tree_files(&b));
    ensure(fa.keys().eq(fb.keys()), || "file sets differ".into())?;
    let differing: Vec<String> = fa
        .iter()
        .filter(|(k, v)| fb.get(*k) != Some(v))
        .map(|(k, _)| k.display().to_string())
        .collect();
    ensure(differing.is_empty(), || format!("differing files: {}", differing.join(", ")))?;
    Ok(format!("{} files byte-identical", fa.len()))
}
