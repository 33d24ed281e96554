//! k-means clustering with elbow model selection, LLM cluster annotation and
//! good/bad outcome labelling.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gateway::{ChatRequest, Gateway, Stage};
use crate::prompts;
use crate::scalar::{squared_distance, Scalar};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct ClusteringResult<T: Scalar> {
    pub k: usize,
    /// Cluster index per input point, aligned with the input order.
    pub assignments: Vec<usize>,
    pub centroids: Vec<Vec<T>>,
    pub wcss: T,
    pub seed: u64,
}

impl<T: Scalar> ClusteringResult<T> {
    pub fn sizes(&self) -> Vec<usize> {
        let mut s = vec![0; self.k];
        for &a in &self.assignments {
            s[a] += 1;
        }
        s
    }

    /// Members of each cluster as point indices.
    pub fn members(&self) -> Vec<Vec<usize>> {
        let mut m = vec![Vec::new(); self.k];
        for (i, &a) in self.assignments.iter().enumerate() {
            m[a].push(i);
        }
        m
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KMeansOptions {
    pub max_iter: usize,
    /// Independent k-means++ restarts; the lowest WCSS wins.
    pub n_init: usize,
}

impl Default for KMeansOptions {
    fn default() -> Self {
        KMeansOptions {
            max_iter: 300,
            n_init: 10,
        }
    }
}

/// Within-cluster sum of squared distances for a given assignment.
pub fn wcss<T: Scalar, P: AsRef<[T]>>(points: &[P], assignments: &[usize], centroids: &[Vec<T>]) -> T {
    points
        .iter()
        .zip(assignments)
        .map(|(p, &a)| squared_distance(p.as_ref(), &centroids[a]))
        .sum()
}

fn nearest<T: Scalar>(p: &[T], centroids: &[Vec<T>]) -> (usize, T) {
    let mut best = (0, squared_distance(p, &centroids[0]));
    for (j, c) in centroids.iter().enumerate().skip(1) {
        let d = squared_distance(p, c);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

fn means<T: Scalar>(points: &[&[T]], assignments: &[usize], k: usize, previous: &[Vec<T>]) -> Vec<Vec<T>> {
    let dim = points[0].len();
    let mut sums = vec![vec![T::zero(); dim]; k];
    let mut counts = vec![0usize; k];
    for (p, &a) in points.iter().zip(assignments) {
        counts[a] += 1;
        for (s, &x) in sums[a].iter_mut().zip(p.iter()) {
            *s = *s + x;
        }
    }
    sums.into_iter()
        .zip(counts)
        .enumerate()
        .map(|(j, (s, c))| {
            if c == 0 {
                previous[j].clone()
            } else {
                let n = T::count(c);
                s.into_iter().map(|x| x / n).collect()
            }
        })
        .collect()
}

/// Moves, for each empty cluster, the point farthest from its own centroid
/// (taken from clusters with more than one member, lowest index on ties).
fn repair_empty<T: Scalar>(points: &[&[T]], assignments: &mut [usize], centroids: &[Vec<T>], k: usize) {
    loop {
        let mut sizes = vec![0usize; k];
        for &a in assignments.iter() {
            sizes[a] += 1;
        }
        let Some(empty) = sizes.iter().position(|&s| s == 0) else {
            return;
        };
        let mut pick: Option<(usize, T)> = None;
        for (i, p) in points.iter().enumerate() {
            if sizes[assignments[i]] < 2 {
                continue;
            }
            let d = squared_distance(p, &centroids[assignments[i]]);
            if pick.is_none_or(|(_, bd)| d > bd) {
                pick = Some((i, d));
            }
        }
        match pick {
            Some((i, _)) => assignments[i] = empty,
            None => return,
        }
    }
}

/// Lloyd iterations until the assignment is stable or the WCSS stops
/// decreasing; the latter guards against rounding-driven oscillation
/// between tied assignments of duplicate points.
fn lloyd<T: Scalar>(points: &[&[T]], mut centroids: Vec<Vec<T>>, max_iter: usize) -> (Vec<usize>, Vec<Vec<T>>) {
    let k = centroids.len();
    let mut assignments: Vec<usize> = Vec::new();
    let mut current = T::infinity();
    for _ in 0..max_iter.max(1) {
        let mut next: Vec<usize> = points.iter().map(|p| nearest(p, &centroids).0).collect();
        repair_empty(points, &mut next, &centroids, k);
        if next == assignments {
            break;
        }
        let updated = means(points, &next, k, &centroids);
        let w = wcss(points, &next, &updated);
        if w >= current {
            break;
        }
        current = w;
        assignments = next;
        centroids = updated;
    }
    (assignments, centroids)
}

fn plusplus<T: Scalar>(points: &[&[T]], k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<T>> {
    let n = points.len();
    let mut centroids = vec![points[rng.gen_range(0..n)].to_vec()];
    let mut d2: Vec<f64> = points
        .iter()
        .map(|p| squared_distance(p, &centroids[0]).as_f64())
        .collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let idx = if total > 0.0 {
            let mut r = rng.gen::<f64>() * total;
            let mut chosen = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                if w > 0.0 && r < w {
                    chosen = i;
                    break;
                }
                r -= w;
            }
            chosen
        } else {
            rng.gen_range(0..n)
        };
        centroids.push(points[idx].to_vec());
        for (i, p) in points.iter().enumerate() {
            let d = squared_distance(p, centroids.last().unwrap()).as_f64();
            if d < d2[i] {
                d2[i] = d;
            }
        }
    }
    centroids
}

fn restart_seed(seed: u64, restart: u64) -> u64 {
    // splitmix64 step
    let mut z = seed.wrapping_add(restart.wrapping_add(1).wrapping_mul(0x9E3779B97F4A7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}

fn check_points<T: Scalar, P: AsRef<[T]>>(points: &[P], k: usize) -> Result<Vec<&[T]>> {
    if k == 0 {
        return Err(Error::InvalidArgument("k must be at least 1".into()));
    }
    if k > points.len() {
        return Err(Error::InvalidArgument(format!(
            "k = {k} exceeds the number of points ({})",
            points.len()
        )));
    }
    let refs: Vec<&[T]> = points.iter().map(|p| p.as_ref()).collect();
    let dim = refs[0].len();
    if refs.iter().any(|p| p.len() != dim) {
        return Err(Error::InvalidArgument("points differ in dimension".into()));
    }
    Ok(refs)
}

pub fn kmeans<T: Scalar, P: AsRef<[T]>>(points: &[P], k: usize, seed: u64) -> Result<ClusteringResult<T>> {
    kmeans_with(points, k, seed, &KMeansOptions::default())
}

/// Lloyd's algorithm from k-means++ seeds, best of `n_init` restarts.
///
/// Deterministic for a fixed seed; distance ties go to the lowest centroid index.
pub fn kmeans_with<T: Scalar, P: AsRef<[T]>>(
    points: &[P],
    k: usize,
    seed: u64,
    opts: &KMeansOptions,
) -> Result<ClusteringResult<T>> {
    let refs = check_points(points, k)?;
    let mut best: Option<ClusteringResult<T>> = None;
    for r in 0..opts.n_init.max(1) as u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(restart_seed(seed, r));
        let init = plusplus(&refs, k, &mut rng);
        let cand = finish(&refs, init, opts.max_iter, seed);
        if best.as_ref().is_none_or(|b| cand.wcss < b.wcss) {
            best = Some(cand);
        }
    }
    Ok(best.expect("at least one restart"))
}

fn finish<T: Scalar>(refs: &[&[T]], init: Vec<Vec<T>>, max_iter: usize, seed: u64) -> ClusteringResult<T> {
    let (assignments, centroids) = lloyd(refs, init, max_iter);
    let w = wcss(refs, &assignments, &centroids);
    ClusteringResult {
        k: centroids.len(),
        assignments,
        centroids,
        wcss: w,
        seed,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct ElbowSelection<T: Scalar> {
    pub k: usize,
    /// `(k, wcss)` for k = 1..=k_max.
    pub curve: Vec<(usize, T)>,
    pub result: ClusteringResult<T>,
}

/// Evaluates k = 1..=k_max and returns the smallest k whose relative WCSS
/// drop to k+1 is below `drop_threshold` (or whose WCSS is already zero).
///
/// Each k also tries a warm start from the k-1 solution plus the farthest
/// point, so the curve is non-increasing.
pub fn select_k_elbow<T: Scalar, P: AsRef<[T]>>(
    points: &[P],
    k_max: usize,
    drop_threshold: f64,
    seed: u64,
) -> Result<ElbowSelection<T>> {
    select_k_elbow_with(points, k_max, drop_threshold, seed, &KMeansOptions::default())
}

pub fn select_k_elbow_with<T: Scalar, P: AsRef<[T]>>(
    points: &[P],
    k_max: usize,
    drop_threshold: f64,
    seed: u64,
    opts: &KMeansOptions,
) -> Result<ElbowSelection<T>> {
    if points.is_empty() {
        return Err(Error::InvalidArgument("elbow selection needs at least one point".into()));
    }
    if !(drop_threshold > 0.0 && drop_threshold < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "drop threshold {drop_threshold} outside (0, 1)"
        )));
    }
    let refs = check_points(points, k_max)?;
    let mut results: Vec<ClusteringResult<T>> = Vec::with_capacity(k_max);
    for k in 1..=k_max {
        let mut cand = kmeans_with(points, k, seed, opts)?;
        if let Some(prev) = results.last() {
            let mut init = prev.centroids.clone();
            let far = refs
                .iter()
                .enumerate()
                .map(|(i, p)| (i, nearest(p, &init).1))
                .fold((0, T::neg_infinity()), |b, c| if c.1 > b.1 { c } else { b })
                .0;
            init.push(refs[far].to_vec());
            let warm = finish(&refs, init, opts.max_iter, seed);
            if warm.wcss < cand.wcss {
                cand = warm;
            }
        }
        results.push(cand);
    }
    let curve: Vec<(usize, T)> = results.iter().map(|r| (r.k, r.wcss)).collect();
    let tiny = T::lit(1e-12);
    let mut chosen = k_max;
    for i in 0..k_max - 1 {
        let w = curve[i].1;
        if w <= tiny {
            chosen = i + 1;
            break;
        }
        let drop = (w - curve[i + 1].1) / w;
        if drop < T::lit(drop_threshold) {
            chosen = i + 1;
            break;
        }
    }
    let result = results.swap_remove(chosen - 1);
    Ok(ElbowSelection {
        k: chosen,
        curve,
        result,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClusterOutcome {
    Good,
    Bad,
    Unlabeled,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RunLabel {
    Success,
    Failure,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotatedCluster {
    pub index: usize,
    pub size: usize,
    pub annotation: String,
    pub sample_texts: Vec<String>,
    pub outcome: ClusterOutcome,
    /// Member run ids, sorted.
    pub members: Vec<String>,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub provenance: String,
}

impl AnnotatedCluster {
    pub fn is_negligible(&self, total: usize, min_frac: f64) -> bool {
        total == 0 || (self.size as f64 / total as f64) < min_frac
    }
}

/// Labels a cluster from at most `sample` members, taken in ascending run-id order.
///
/// `members` pairs run ids with texts. Returns the annotation, the sampled texts and the journal reference.
pub fn annotate_cluster(
    members: &[(String, String)],
    sample: usize,
    gateway: &Gateway,
) -> Result<(String, Vec<String>, String)> {
    if members.is_empty() {
        return Err(Error::InvalidArgument("cannot annotate an empty cluster".into()));
    }
    let mut sorted: Vec<&(String, String)> = members.iter().collect();
    sorted.sort_by(|a, b| a.0.cmp(&b.0));
    let samples: Vec<String> = sorted
        .iter()
        .take(sample.max(1))
        .map(|(_, t)| t.clone())
        .collect();
    let refs: Vec<&str> = samples.iter().map(String::as_str).collect();
    let (resp, reference) = gateway.chat_ref(&ChatRequest::new(Stage::Annotate, prompts::annotate(&refs)))?;
    let label = resp
        .lines()
        .map(|l| l.trim().trim_matches('"').trim())
        .find(|l| !l.is_empty())
        .unwrap_or("")
        .to_string();
    if label.is_empty() {
        return Err(Error::EmptyCompletion(Stage::Annotate.to_string()));
    }
    Ok((label, samples, reference))
}

pub enum LabelMode<'a> {
    /// Operator picked the good cluster by index.
    GoodCluster(usize),
    /// Strict majority of successful member runs; ties are bad.
    Oracle(&'a BTreeMap<String, RunLabel>),
}

pub fn assign_outcome_labels(
    mut clusters: Vec<AnnotatedCluster>,
    mode: LabelMode<'_>,
) -> Result<Vec<AnnotatedCluster>> {
    match mode {
        LabelMode::GoodCluster(good) => {
            if !clusters.iter().any(|c| c.index == good) {
                return Err(Error::InvalidArgument(format!(
                    "cluster {good} does not exist ({} clusters)",
                    clusters.len()
                )));
            }
            for c in &mut clusters {
                c.outcome = if c.index == good {
                    ClusterOutcome::Good
                } else {
                    ClusterOutcome::Bad
                };
            }
        }
        LabelMode::Oracle(labels) => {
            for c in &mut clusters {
                let mut success = 0usize;
                for run in &c.members {
                    match labels.get(run) {
                        Some(RunLabel::Success) => success += 1,
                        Some(RunLabel::Failure) => {}
                        None => return Err(Error::MissingLabel(run.clone())),
                    }
                }
                c.outcome = if 2 * success > c.members.len() {
                    ClusterOutcome::Good
                } else {
                    ClusterOutcome::Bad
                };
            }
        }
    }
    Ok(clusters)
}

/// Terminal labelling: shows annotations and sizes, reads the good cluster index.
/// Invalid or out-of-range answers re-prompt; end of input is an error.
pub fn label_interactively<R: BufRead, W: Write>(
    clusters: Vec<AnnotatedCluster>,
    input: &mut R,
    output: &mut W,
) -> Result<Vec<AnnotatedCluster>> {
    writeln!(output, "Answer-node clusters:")?;
    for c in &clusters {
        writeln!(output, "  cluster {}: \"{}\" [{} samples]", c.index, c.annotation, c.size)?;
    }
    loop {
        write!(output, "Which cluster shows the desired outcome? ")?;
        output.flush()?;
        let mut line = String::new();
        if input.read_line(&mut line)? == 0 {
            return Err(Error::InvalidArgument("no cluster selected".into()));
        }
        match line.trim().parse::<usize>() {
            Ok(i) if clusters.iter().any(|c| c.index == i) => {
                return assign_outcome_labels(clusters, LabelMode::GoodCluster(i));
            }
            _ => writeln!(output, "  please enter one of the cluster indices above")?,
        }
    }
}
