//! The benchmark scoring pipeline: brute-force cosine 1-NN prediction,
//! leave-one-out grouping for novel-label tasks, macro-F1, and the CPS
//! summary score.
//!
//! Search is exact: every query row is compared against every reference row.
//! Cosine similarities are computed from f32 values with f64 accumulators;
//! queries are scored in parallel and ties break to the lowest reference row
//! index, so parallel and sequential runs are bit-identical.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{EvalMode, MetadataRecord, TaskSpec};
use crate::error::{Error, Result};

/// Row-major N x d matrix of f32 embeddings with row ids, optional labels,
/// and cached L2 norms.
#[derive(Clone, Debug)]
pub struct EmbeddingMatrix {
    pub dim: usize,
    pub data: Vec<f32>,
    pub row_ids: Vec<String>,
    pub labels: Option<Vec<String>>,
    norms: Vec<f64>,
}

impl EmbeddingMatrix {
    pub fn new(
        dim: usize,
        data: Vec<f32>,
        row_ids: Vec<String>,
        labels: Option<Vec<String>>,
    ) -> Result<Self> {
        if dim == 0 || data.len() != row_ids.len() * dim {
            return Err(Error::Dimension {
                op: "EmbeddingMatrix",
                lhs: vec![data.len()],
                rhs: vec![row_ids.len(), dim],
            });
        }
        if let Some(l) = &labels {
            if l.len() != row_ids.len() {
                return Err(Error::Dimension {
                    op: "EmbeddingMatrix labels",
                    lhs: vec![l.len()],
                    rhs: vec![row_ids.len()],
                });
            }
        }
        {
            let mut sorted = row_ids.clone();
            sorted.sort_unstable();
            sorted.dedup();
            if sorted.len() != row_ids.len() {
                return Err(Error::contract("EmbeddingMatrix row ids must be unique"));
            }
        }
        let norms: Vec<f64> = data
            .chunks_exact(dim)
            .map(|row| row.iter().map(|&v| v as f64 * v as f64).sum::<f64>().sqrt())
            .collect();
        Ok(EmbeddingMatrix {
            dim,
            data,
            row_ids,
            labels,
            norms,
        })
    }

    pub fn len(&self) -> usize {
        self.row_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.row_ids.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    fn check_norms(&self, role: &str) -> Result<()> {
        let offending: Vec<&str> = self
            .norms
            .iter()
            .zip(&self.row_ids)
            .filter(|(&n, _)| n == 0.0 || !n.is_finite())
            .map(|(_, id)| id.as_str())
            .collect();
        if offending.is_empty() {
            Ok(())
        } else {
            Err(Error::ZeroNorm {
                op: "cosine search",
                detail: format!("{role} rows: {}", offending.join(", ")),
            })
        }
    }
}

fn cosine(a: &[f32], na: f64, b: &[f32], nb: f64) -> f64 {
    let mut dot = 0.0f64;
    for (x, y) in a.iter().zip(b) {
        dot += *x as f64 * *y as f64;
    }
    dot / (na * nb)
}

/// Index of the maximum-cosine reference row for each query row; ties break
/// to the lowest reference index.
pub fn knn_argmax(
    reference: &EmbeddingMatrix,
    queries: &EmbeddingMatrix,
    parallel: bool,
) -> Result<Vec<usize>> {
    if reference.is_empty() {
        return Err(Error::contract("knn: empty reference"));
    }
    if reference.dim != queries.dim {
        return Err(Error::Dimension {
            op: "knn",
            lhs: vec![reference.dim],
            rhs: vec![queries.dim],
        });
    }
    reference.check_norms("reference")?;
    queries.check_norms("query")?;
    let one = |qi: usize| -> usize {
        let q = queries.row(qi);
        let nq = queries.norms[qi];
        let mut best = (f64::NEG_INFINITY, 0usize);
        for ri in 0..reference.len() {
            let sim = cosine(q, nq, reference.row(ri), reference.norms[ri]);
            if sim > best.0 {
                best = (sim, ri);
            }
        }
        best.1
    };
    Ok(if parallel {
        (0..queries.len()).into_par_iter().map(one).collect()
    } else {
        (0..queries.len()).map(one).collect()
    })
}

/// 1-NN label prediction: each query takes the label of its maximum-cosine
/// reference row.
pub fn knn_predict(reference: &EmbeddingMatrix, queries: &EmbeddingMatrix) -> Result<Vec<String>> {
    let labels = reference
        .labels
        .as_ref()
        .ok_or_else(|| Error::contract("knn_predict: reference has no labels"))?;
    let idx = knn_argmax(reference, queries, true)?;
    Ok(idx.into_iter().map(|i| labels[i].clone()).collect())
}

/// Leak instrumentation of a leave-one-out run: every query/reference pair
/// whose rows share a held-out group would be a collision.
#[derive(Debug, Default, Clone, Copy)]
pub struct LeakReport {
    pub collisions: usize,
    pub reference_rows_checked: usize,
}

/// Leave-one-out prediction for novel-label tasks. Test rows are grouped by
/// `groups`; each group's queries are scored against the train rows plus the
/// test rows of all *other* groups (with their labels). Held-out labels never
/// enter their own reference set, which the returned [`LeakReport`] proves.
pub fn leave_one_out_predict(
    train: &EmbeddingMatrix,
    test: &EmbeddingMatrix,
    groups: &BTreeMap<String, String>,
) -> Result<(Vec<String>, LeakReport)> {
    let test_labels = test
        .labels
        .as_ref()
        .ok_or_else(|| Error::contract("leave_one_out: test rows need labels"))?;
    let train_labels = train
        .labels
        .as_ref()
        .ok_or_else(|| Error::contract("leave_one_out: train rows need labels"))?;
    if train.dim != test.dim {
        return Err(Error::Dimension {
            op: "leave_one_out",
            lhs: vec![train.dim],
            rhs: vec![test.dim],
        });
    }
    let mut group_of = Vec::with_capacity(test.len());
    for id in &test.row_ids {
        let g = groups
            .get(id)
            .ok_or_else(|| Error::contract(format!("row {id} has no group key")))?;
        group_of.push(g.clone());
    }
    let mut group_names: Vec<String> = group_of.clone();
    group_names.sort_unstable();
    group_names.dedup();
    if group_names.is_empty() {
        return Err(Error::contract("leave_one_out: no groups"));
    }

    let mut predictions = vec![String::new(); test.len()];
    let mut leak = LeakReport::default();
    for g in &group_names {
        let query_rows: Vec<usize> = (0..test.len()).filter(|&i| &group_of[i] == g).collect();
        let other_rows: Vec<usize> = (0..test.len()).filter(|&i| &group_of[i] != g).collect();

        // reference = train rows + other-group test rows
        let mut ref_data =
            Vec::with_capacity((train.len() + other_rows.len()) * train.dim);
        let mut ref_ids = Vec::with_capacity(train.len() + other_rows.len());
        let mut ref_labels = Vec::with_capacity(train.len() + other_rows.len());
        let mut ref_group: Vec<Option<&str>> = Vec::with_capacity(train.len() + other_rows.len());
        ref_data.extend_from_slice(&train.data);
        ref_ids.extend(train.row_ids.iter().cloned());
        ref_labels.extend(train_labels.iter().cloned());
        ref_group.extend(std::iter::repeat(None).take(train.len()));
        for &i in &other_rows {
            ref_data.extend_from_slice(test.row(i));
            ref_ids.push(test.row_ids[i].clone());
            ref_labels.push(test_labels[i].clone());
            ref_group.push(Some(group_of[i].as_str()));
        }
        let reference = EmbeddingMatrix::new(train.dim, ref_data, ref_ids, Some(ref_labels))?;

        // instrumentation: no reference row may carry the held-out group
        for rg in &ref_group {
            leak.reference_rows_checked += 1;
            if rg == &Some(g.as_str()) {
                leak.collisions += 1;
            }
        }

        let mut q_data = Vec::with_capacity(query_rows.len() * test.dim);
        let mut q_ids = Vec::with_capacity(query_rows.len());
        for &i in &query_rows {
            q_data.extend_from_slice(test.row(i));
            q_ids.push(test.row_ids[i].clone());
        }
        let queries = EmbeddingMatrix::new(test.dim, q_data, q_ids, None)?;
        let pred = knn_predict(&reference, &queries)?;
        for (&row, label) in query_rows.iter().zip(pred) {
            predictions[row] = label;
        }
    }
    Ok((predictions, leak))
}

/// Per-class F1 scores and their unweighted mean.
///
/// Classes are those present in `truth`, or the provided universe. A class
/// with no predicted positives has precision 0; a 0/0 F1 is 0.
pub fn f1_scores(
    pred: &[String],
    truth: &[String],
    class_universe: Option<&[String]>,
) -> Result<(f64, BTreeMap<String, f64>, BTreeMap<String, usize>)> {
    if pred.len() != truth.len() {
        return Err(Error::Dimension {
            op: "macro_f1",
            lhs: vec![pred.len()],
            rhs: vec![truth.len()],
        });
    }
    if truth.is_empty() {
        return Err(Error::contract("macro_f1: empty truth"));
    }
    let classes: Vec<String> = match class_universe {
        Some(u) => {
            let mut v = u.to_vec();
            v.sort_unstable();
            v.dedup();
            v
        }
        None => {
            let mut v: Vec<String> = truth.to_vec();
            v.sort_unstable();
            v.dedup();
            v
        }
    };
    let mut per_class = BTreeMap::new();
    let mut support = BTreeMap::new();
    let mut sum = 0.0f64;
    for class in &classes {
        let mut tp = 0usize;
        let mut fp = 0usize;
        let mut fn_ = 0usize;
        let mut sup = 0usize;
        for (p, t) in pred.iter().zip(truth) {
            let pc = p == class;
            let tc = t == class;
            if tc {
                sup += 1;
            }
            match (pc, tc) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fn_ += 1,
                (false, false) => {}
            }
        }
        let precision = if tp + fp > 0 {
            tp as f64 / (tp + fp) as f64
        } else {
            0.0
        };
        let recall = if tp + fn_ > 0 {
            tp as f64 / (tp + fn_) as f64
        } else {
            0.0
        };
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        per_class.insert(class.clone(), f1);
        support.insert(class.clone(), sup);
        sum += f1;
    }
    Ok((sum / classes.len() as f64, per_class, support))
}

/// Unweighted mean of per-class F1 over classes present in the truth.
pub fn macro_f1(pred: &[String], truth: &[String]) -> Result<f64> {
    f1_scores(pred, truth, None).map(|(m, _, _)| m)
}

/// The six generalization tasks and their fixed CPS weights.
pub const CPS_WEIGHTS: [(&str, f64); 6] = [
    ("W2", 1.0 / 3.0),
    ("H2", 1.0 / 6.0),
    ("H3", 1.0 / 6.0),
    ("C2", 1.0 / 9.0),
    ("C3", 1.0 / 9.0),
    ("C4", 1.0 / 9.0),
];

/// CPS = W2/3 + (H2 + H3)/6 + (C2 + C3 + C4)/9.
pub fn cps(scores: &BTreeMap<String, f64>) -> Result<f64> {
    let mut total = 0.0;
    for (task, weight) in CPS_WEIGHTS {
        let s = scores
            .get(task)
            .ok_or_else(|| Error::contract(format!("cps: missing task {task}")))?;
        if !(0.0..=1.0).contains(s) {
            return Err(Error::contract(format!("cps: task {task} score {s} outside [0,1]")));
        }
        total += weight * s;
    }
    Ok(total)
}

/// Embeddings for a whole corpus, keyed by image id. Dimensions may differ
/// across datasets (the channel-replication baseline concatenates per-channel
/// features), so matrices are assembled per comparison.
#[derive(Default, Clone)]
pub struct EmbeddingStore {
    vectors: BTreeMap<String, Vec<f32>>,
}

impl EmbeddingStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, image_id: impl Into<String>, v: Vec<f32>) {
        self.vectors.insert(image_id.into(), v);
    }

    pub fn get(&self, id: &str) -> Option<&Vec<f32>> {
        self.vectors.get(id)
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Vec<f32>)> {
        self.vectors.iter()
    }

    /// Assemble a labeled matrix for the given records.
    fn matrix(
        &self,
        records: &[&MetadataRecord],
        with_labels: bool,
    ) -> Result<EmbeddingMatrix> {
        let first = records
            .first()
            .ok_or_else(|| Error::contract("empty record set"))?;
        let dim = self
            .get(&first.image_id)
            .ok_or_else(|| Error::contract(format!("no embedding for {}", first.image_id)))?
            .len();
        let mut data = Vec::with_capacity(records.len() * dim);
        let mut ids = Vec::with_capacity(records.len());
        let mut labels = Vec::with_capacity(records.len());
        for r in records {
            let v = self
                .get(&r.image_id)
                .ok_or_else(|| Error::contract(format!("no embedding for {}", r.image_id)))?;
            if v.len() != dim {
                return Err(Error::Dimension {
                    op: "EmbeddingStore::matrix",
                    lhs: vec![v.len()],
                    rhs: vec![dim],
                });
            }
            data.extend_from_slice(v);
            ids.push(r.image_id.clone());
            labels.push(r.label.clone());
        }
        EmbeddingMatrix::new(dim, data, ids, with_labels.then_some(labels))
    }
}

/// Scores of one evaluation run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsReport {
    /// task id -> macro F1
    pub per_task_f1: BTreeMap<String, f64>,
    /// task id -> class -> F1
    pub per_class_f1: BTreeMap<String, BTreeMap<String, f64>>,
    /// task id -> class -> support
    pub counts: BTreeMap<String, BTreeMap<String, usize>>,
    pub cps: f64,
    /// leak instrumentation totals over all leave-one-out tasks
    pub leak_collisions: usize,
}

impl MetricsReport {
    /// The report's CPS must always be recomputable from its per-task scores.
    pub fn verify_cps(&self) -> Result<()> {
        let recomputed = cps(&self.per_task_f1)?;
        if recomputed != self.cps {
            return Err(Error::contract(format!(
                "cps {} does not match per-task recomputation {recomputed}",
                self.cps
            )));
        }
        Ok(())
    }
}

/// Options for [`evaluate_all`].
#[derive(Debug, Clone, Copy, Default)]
pub struct EvalOptions {
    /// Average per-class F1 over the task's full declared label universe
    /// (classes absent from truth score 0) instead of truth-present classes.
    pub all_classes: bool,
}

/// Score every task: reference-train tasks via 1-NN against the train split
/// of the task's dataset; leave-one-out tasks via grouped search. Returns
/// per-task and per-class F1 plus CPS.
pub fn evaluate_all(
    store: &EmbeddingStore,
    metadata: &[MetadataRecord],
    specs: &[TaskSpec],
    opts: EvalOptions,
) -> Result<MetricsReport> {
    let mut per_task_f1 = BTreeMap::new();
    let mut per_class_f1 = BTreeMap::new();
    let mut counts = BTreeMap::new();
    let mut leak_total = 0usize;

    for spec in specs {
        let queries: Vec<&MetadataRecord> = metadata
            .iter()
            .filter(|r| r.split == spec.task_id)
            .collect();
        if queries.is_empty() {
            return Err(Error::contract(format!(
                "no rows for task split {}",
                spec.task_id
            )));
        }
        let train: Vec<&MetadataRecord> = metadata
            .iter()
            .filter(|r| r.split == "train" && r.dataset == spec.dataset)
            .collect();
        if train.is_empty() {
            return Err(Error::contract(format!(
                "no train rows for dataset {}",
                spec.dataset
            )));
        }
        let truth: Vec<String> = queries.iter().map(|r| r.label.clone()).collect();
        let pred = match spec.eval_mode {
            EvalMode::ReferenceTrain => {
                let reference = store.matrix(&train, true)?;
                let query_matrix = store.matrix(&queries, false)?;
                knn_predict(&reference, &query_matrix)?
            }
            EvalMode::LeaveOneOut => {
                let key = spec.group_key.ok_or_else(|| {
                    Error::contract(format!("task {} lacks a group key", spec.task_id))
                })?;
                let groups: BTreeMap<String, String> = queries
                    .iter()
                    .map(|r| (r.image_id.clone(), r.annotation(key).to_string()))
                    .collect();
                for (id, g) in &groups {
                    if g.is_empty() {
                        return Err(Error::contract(format!(
                            "row {id} missing group key {}",
                            key.name()
                        )));
                    }
                }
                let train_matrix = store.matrix(&train, true)?;
                let test_matrix = store.matrix(&queries, true)?;
                let (pred, leak) = leave_one_out_predict(&train_matrix, &test_matrix, &groups)?;
                leak_total += leak.collisions;
                pred
            }
        };
        let universe: Option<Vec<String>> = opts.all_classes.then(|| {
            let mut u: Vec<String> = metadata
                .iter()
                .filter(|r| r.dataset == spec.dataset)
                .map(|r| r.label.clone())
                .collect();
            u.sort_unstable();
            u.dedup();
            u
        });
        let (f1, by_class, support) = f1_scores(&pred, &truth, universe.as_deref())?;
        per_task_f1.insert(spec.task_id.clone(), f1);
        per_class_f1.insert(spec.task_id.clone(), by_class);
        counts.insert(spec.task_id.clone(), support);
    }

    let cps_value = cps(&per_task_f1)?;
    Ok(MetricsReport {
        per_task_f1,
        per_class_f1,
        counts,
        cps: cps_value,
        leak_collisions: leak_total,
    })
}

pub const EMBEDDING_MAGIC: &[u8; 4] = b"CEMB";
const EMBEDDING_VERSION: u32 = 1;

/// Write one embedding file (`CEMB` header, version, N, d, N*d f32 LE) and a
/// sibling CSV mapping row index to image id.
pub fn write_embeddings(path: &Path, ids: &[String], dim: usize, data: &[f32]) -> Result<()> {
    if data.len() != ids.len() * dim {
        return Err(Error::Dimension {
            op: "write_embeddings",
            lhs: vec![data.len()],
            rhs: vec![ids.len(), dim],
        });
    }
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    f.write_all(EMBEDDING_MAGIC)?;
    f.write_all(&EMBEDDING_VERSION.to_le_bytes())?;
    f.write_all(&(ids.len() as u32).to_le_bytes())?;
    f.write_all(&(dim as u32).to_le_bytes())?;
    for v in data {
        f.write_all(&v.to_le_bytes())?;
    }
    f.flush()?;
    let mut wtr = csv::Writer::from_path(sibling_csv(path))?;
    wtr.write_record(["row", "image_id"])?;
    for (i, id) in ids.iter().enumerate() {
        wtr.write_record([i.to_string().as_str(), id])?;
    }
    wtr.flush()?;
    Ok(())
}

pub fn sibling_csv(path: &Path) -> std::path::PathBuf {
    path.with_extension("rows.csv")
}

/// Read a `CEMB` file and its sibling CSV into an id -> vector store.
pub fn read_embeddings(path: &Path) -> Result<EmbeddingStore> {
    let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 4];
    f.read_exact(&mut magic)?;
    if &magic != EMBEDDING_MAGIC {
        return Err(Error::format(format!(
            "bad embeddings magic {magic:?} in {}",
            path.display()
        )));
    }
    let mut u32buf = [0u8; 4];
    f.read_exact(&mut u32buf)?;
    let version = u32::from_le_bytes(u32buf);
    if version != EMBEDDING_VERSION {
        return Err(Error::format(format!("unsupported embeddings version {version}")));
    }
    f.read_exact(&mut u32buf)?;
    let n = u32::from_le_bytes(u32buf) as usize;
    f.read_exact(&mut u32buf)?;
    let dim = u32::from_le_bytes(u32buf) as usize;
    let mut payload = vec![0u8; n * dim * 4];
    f.read_exact(&mut payload)?;
    let values: Vec<f32> = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();

    let mut rdr = csv::ReaderBuilder::new().from_path(sibling_csv(path))?;
    let mut ids = vec![String::new(); n];
    for row in rdr.records() {
        let row = row?;
        let idx: usize = row[0]
            .parse()
            .map_err(|_| Error::format(format!("bad row index {:?}", &row[0])))?;
        if idx >= n {
            return Err(Error::format(format!("row index {idx} out of range 0..{n}")));
        }
        ids[idx] = row[1].to_string();
    }
    let mut store = EmbeddingStore::new();
    for (i, id) in ids.into_iter().enumerate() {
        if id.is_empty() {
            return Err(Error::format(format!("row {i} missing image id")));
        }
        store.insert(id, values[i * dim..(i + 1) * dim].to_vec());
    }
    Ok(store)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_matrix(n: usize, d: usize, seed: u64, labels: Option<usize>) -> EmbeddingMatrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data: Vec<f32> = (0..n * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let ids: Vec<String> = (0..n).map(|i| format!("r{seed}_{i}")).collect();
        let labels = labels.map(|k| (0..n).map(|i| format!("class{}", i % k)).collect());
        EmbeddingMatrix::new(d, data, ids, labels).unwrap()
    }

    /// Exhaustive double-loop oracle with naive f64 cosine.
    fn exhaustive_argmax(reference: &EmbeddingMatrix, queries: &EmbeddingMatrix) -> Vec<usize> {
        let mut out = Vec::new();
        for qi in 0..queries.len() {
            let q = queries.row(qi);
            let mut best = (f64::NEG_INFINITY, 0usize);
            for ri in 0..reference.len() {
                let r = reference.row(ri);
                let mut dot = 0.0f64;
                let mut nq = 0.0f64;
                let mut nr = 0.0f64;
                for (a, b) in q.iter().zip(r) {
                    dot += *a as f64 * *b as f64;
                    nq += *a as f64 * *a as f64;
                    nr += *b as f64 * *b as f64;
                }
                let sim = dot / (nq.sqrt() * nr.sqrt());
                if sim > best.0 {
                    best = (sim, ri);
                }
            }
            out.push(best.1);
        }
        out
    }

    #[test]
    fn query_equal_to_reference_row_gets_its_label() {
        let reference = rand_matrix(20, 8, 1, Some(4));
        let q_row = reference.row(7).to_vec();
        let queries = EmbeddingMatrix::new(8, q_row, vec!["q".into()], None).unwrap();
        let pred = knn_predict(&reference, &queries).unwrap();
        assert_eq!(pred[0], reference.labels.as_ref().unwrap()[7]);
    }

    #[test]
    fn prediction_is_scale_invariant() {
        let reference = rand_matrix(30, 6, 2, Some(3));
        let queries = rand_matrix(10, 6, 3, None);
        let scaled = EmbeddingMatrix::new(
            6,
            queries.data.iter().map(|v| v * 12.5).collect(),
            queries.row_ids.clone(),
            None,
        )
        .unwrap();
        assert_eq!(
            knn_predict(&reference, &queries).unwrap(),
            knn_predict(&reference, &scaled).unwrap()
        );
    }

    #[test]
    fn knn_matches_exhaustive_oracle_on_200x50x16() {
        let reference = rand_matrix(200, 16, 4, Some(5));
        let queries = rand_matrix(50, 16, 5, None);
        let got = knn_argmax(&reference, &queries, true).unwrap();
        let want = exhaustive_argmax(&reference, &queries);
        assert_eq!(got, want);
    }

    #[test]
    fn parallel_equals_sequential_bitwise() {
        let reference = rand_matrix(150, 12, 6, Some(4));
        let queries = rand_matrix(64, 12, 7, None);
        let par = knn_argmax(&reference, &queries, true).unwrap();
        let seq = knn_argmax(&reference, &queries, false).unwrap();
        assert_eq!(par, seq);
    }

    #[test]
    fn ties_break_to_the_lowest_reference_index() {
        // rows 1 and 3 are identical; query equals them
        let data = vec![
            1.0f32, 0.0, //
            0.5, 0.5, //
            0.0, 1.0, //
            0.5, 0.5,
        ];
        let reference = EmbeddingMatrix::new(
            2,
            data,
            vec!["a".into(), "b".into(), "c".into(), "d".into()],
            Some(vec!["A".into(), "B".into(), "C".into(), "D".into()]),
        )
        .unwrap();
        let queries = EmbeddingMatrix::new(2, vec![0.5, 0.5], vec!["q".into()], None).unwrap();
        assert_eq!(knn_predict(&reference, &queries).unwrap(), vec!["B"]);
    }

    #[test]
    fn zero_norm_rows_are_reported_with_ids() {
        let data = vec![1.0f32, 0.0, 0.0, 0.0];
        let reference = EmbeddingMatrix::new(
            2,
            data,
            vec!["ok".into(), "dead".into()],
            Some(vec!["A".into(), "B".into()]),
        )
        .unwrap();
        let queries = EmbeddingMatrix::new(2, vec![1.0, 0.0], vec!["q".into()], None).unwrap();
        let err = knn_predict(&reference, &queries).unwrap_err();
        assert!(err.to_string().contains("dead"), "{err}");
    }

    #[test]
    fn isometry_leaves_predictions_unchanged() {
        let reference = rand_matrix(80, 16, 8, Some(4));
        let queries = rand_matrix(25, 16, 9, None);
        let before = knn_argmax(&reference, &queries, true).unwrap();

        // random rotation as a product of Givens rotations, exactly orthogonal
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let rotations: Vec<(usize, usize, f64)> = (0..100)
            .map(|_| {
                let i = rng.gen_range(0..16);
                let mut j = rng.gen_range(0..15);
                if j >= i {
                    j += 1;
                }
                (i, j, rng.gen_range(0.0..std::f64::consts::TAU))
            })
            .collect();
        let rotate = |m: &EmbeddingMatrix| -> EmbeddingMatrix {
            let mut data: Vec<f64> = m.data.iter().map(|&v| v as f64).collect();
            for row in 0..m.len() {
                for &(i, j, theta) in &rotations {
                    let (s, c) = theta.sin_cos();
                    let a = data[row * 16 + i];
                    let b = data[row * 16 + j];
                    data[row * 16 + i] = c * a - s * b;
                    data[row * 16 + j] = s * a + c * b;
                }
            }
            EmbeddingMatrix::new(
                16,
                data.into_iter().map(|v| v as f32).collect(),
                m.row_ids.clone(),
                m.labels.clone(),
            )
            .unwrap()
        };
        let after = knn_argmax(&rotate(&reference), &rotate(&queries), true).unwrap();
        // cosine is preserved to f32 rounding; allow no index changes
        assert_eq!(before, after);
    }

    #[test]
    fn macro_f1_hand_example_and_edges() {
        let pred: Vec<String> = ["A", "A", "B"].iter().map(|s| s.to_string()).collect();
        let truth: Vec<String> = ["A", "B", "B"].iter().map(|s| s.to_string()).collect();
        let f1 = macro_f1(&pred, &truth).unwrap();
        assert!((f1 - 2.0 / 3.0).abs() < 1e-15);

        let perfect = macro_f1(&truth, &truth).unwrap();
        assert_eq!(perfect, 1.0);

        let absent: Vec<String> = vec!["Z".into(); 3];
        assert_eq!(macro_f1(&absent, &truth).unwrap(), 0.0);

        assert!(macro_f1(&pred, &truth[..2].to_vec()).is_err());
    }

    #[test]
    fn macro_f1_matches_confusion_matrix_oracle_on_500_vectors() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..500 {
            let n = rng.gen_range(1..40);
            let k = rng.gen_range(1..6);
            let pred: Vec<String> = (0..n).map(|_| format!("c{}", rng.gen_range(0..k))).collect();
            let truth: Vec<String> = (0..n).map(|_| format!("c{}", rng.gen_range(0..k))).collect();
            let got = macro_f1(&pred, &truth).unwrap();

            // independent confusion-matrix route
            let mut classes: Vec<&String> = truth.iter().collect();
            classes.sort();
            classes.dedup();
            let mut sum = 0.0;
            for class in &classes {
                let tp = pred
                    .iter()
                    .zip(&truth)
                    .filter(|(p, t)| p == class && t == class)
                    .count() as f64;
                let fp = pred
                    .iter()
                    .zip(&truth)
                    .filter(|(p, t)| p == class && t != class)
                    .count() as f64;
                let fn_ = pred
                    .iter()
                    .zip(&truth)
                    .filter(|(p, t)| p != class && t == class)
                    .count() as f64;
                let precision = if tp + fp > 0.0 { tp / (tp + fp) } else { 0.0 };
                let recall = if tp + fn_ > 0.0 { tp / (tp + fn_) } else { 0.0 };
                sum += if precision + recall > 0.0 {
                    2.0 * precision * recall / (precision + recall)
                } else {
                    0.0
                };
            }
            let want = sum / classes.len() as f64;
            assert_eq!(got, want);
        }
    }

    #[test]
    fn all_classes_mode_penalizes_absent_classes() {
        let pred: Vec<String> = vec!["A".into(), "A".into()];
        let truth: Vec<String> = vec!["A".into(), "A".into()];
        let universe: Vec<String> = vec!["A".into(), "B".into()];
        let (m, _, _) = f1_scores(&pred, &truth, Some(&universe)).unwrap();
        assert_eq!(m, 0.5);
    }

    #[test]
    fn cps_reproduces_published_fixtures() {
        let fixed: BTreeMap<String, f64> = [
            ("W2", 0.861),
            ("H2", 0.932),
            ("H3", 0.551),
            ("C2", 0.484),
            ("C3", 0.123),
            ("C4", 0.112),
        ]
        .iter()
        .map(|(k, v)| (k.to_string(), *v))
        .collect();
        assert!((cps(&fixed).unwrap() - 0.614).abs() <= 0.0005);

        let target: BTreeMap<String, f64> = [
            ("W2", 0.843),
            ("H2", 0.925),
            ("H3", 0.594),
            ("C2", 0.512),
            ("C3", 0.174),
            ("C4", 0.107),
        ]
        .iter()
        .map(|(k, v)| (k.to_string(), *v))
        .collect();
        assert!((cps(&target).unwrap() - 0.622).abs() <= 0.0005);

        let ones: BTreeMap<String, f64> =
            CPS_WEIGHTS.iter().map(|(k, _)| (k.to_string(), 1.0)).collect();
        assert!((cps(&ones).unwrap() - 1.0).abs() < 1e-12);

        let mut missing = ones.clone();
        missing.remove("C4");
        let err = cps(&missing).unwrap_err();
        assert!(err.to_string().contains("C4"));
    }

    #[test]
    fn leave_one_out_two_singleton_groups_match_each_other() {
        // train carries an unrelated label; two test rows share embedding+label
        let train = EmbeddingMatrix::new(
            2,
            vec![0.0, 1.0],
            vec!["t0".into()],
            Some(vec!["other".into()]),
        )
        .unwrap();
        let test = EmbeddingMatrix::new(
            2,
            vec![1.0, 0.0, 1.0, 0.0],
            vec!["a".into(), "b".into()],
            Some(vec!["L".into(), "L".into()]),
        )
        .unwrap();
        let groups: BTreeMap<String, String> = [("a", "g1"), ("b", "g2")]
            .iter()
            .map(|(k, v)| (k.to_string(), v.to_string()))
            .collect();
        let (pred, leak) = leave_one_out_predict(&train, &test, &groups).unwrap();
        assert_eq!(pred, vec!["L", "L"]);
        assert_eq!(leak.collisions, 0);
    }

    #[test]
    fn leave_one_out_single_group_with_novel_labels_scores_zero() {
        let train = EmbeddingMatrix::new(
            2,
            vec![0.0, 1.0, 0.3, 0.7],
            vec!["t0".into(), "t1".into()],
            Some(vec!["old1".into(), "old2".into()]),
        )
        .unwrap();
        let test = EmbeddingMatrix::new(
            2,
            vec![1.0, 0.0, 0.9, 0.1],
            vec!["a".into(), "b".into()],
            Some(vec!["novel".into(), "novel".into()]),
        )
        .unwrap();
        let groups: BTreeMap<String, String> = [("a", "g"), ("b", "g")]
            .iter()
            .map(|(k, v)| (k.to_string(), v.to_string()))
            .collect();
        let (pred, _) = leave_one_out_predict(&train, &test, &groups).unwrap();
        let truth: Vec<String> = vec!["novel".into(), "novel".into()];
        assert_eq!(macro_f1(&pred, &truth).unwrap(), 0.0);
    }

    #[test]
    fn leave_one_out_matches_per_group_exhaustive_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let train = rand_matrix(40, 8, 14, Some(3));
        let n_test = 30;
        let test = rand_matrix(n_test, 8, 15, Some(4));
        let group_names = ["ga", "gb", "gc"];
        let groups: BTreeMap<String, String> = test
            .row_ids
            .iter()
            .map(|id| (id.clone(), group_names[rng.gen_range(0..3)].to_string()))
            .collect();
        let (pred, leak) = leave_one_out_predict(&train, &test, &groups).unwrap();
        assert_eq!(leak.collisions, 0);

        // oracle: rebuild reference per group with plain loops
        let test_labels = test.labels.as_ref().unwrap();
        let train_labels = train.labels.as_ref().unwrap();
        for qi in 0..n_test {
            let qg = &groups[&test.row_ids[qi]];
            let mut cands: Vec<(Vec<f32>, String)> = Vec::new();
            for ri in 0..train.len() {
                cands.push((train.row(ri).to_vec(), train_labels[ri].clone()));
            }
            for ti in 0..n_test {
                if &groups[&test.row_ids[ti]] != qg {
                    cands.push((test.row(ti).to_vec(), test_labels[ti].clone()));
                }
            }
            let q = test.row(qi);
            let mut best = (f64::NEG_INFINITY, 0usize);
            for (ci, (c, _)) in cands.iter().enumerate() {
                let mut dot = 0.0f64;
                let mut nq = 0.0f64;
                let mut nc = 0.0f64;
                for (a, b) in q.iter().zip(c) {
                    dot += *a as f64 * *b as f64;
                    nq += *a as f64 * *a as f64;
                    nc += *b as f64 * *b as f64;
                }
                let sim = dot / (nq.sqrt() * nc.sqrt());
                if sim > best.0 {
                    best = (sim, ci);
                }
            }
            assert_eq!(pred[qi], cands[best.1].1, "query {qi}");
        }
    }

    #[test]
    fn embeddings_file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("e.cemb");
        let ids: Vec<String> = (0..5).map(|i| format!("img{i}")).collect();
        let data: Vec<f32> = (0..20).map(|i| i as f32 * 0.25).collect();
        write_embeddings(&path, &ids, 4, &data).unwrap();
        let store = read_embeddings(&path).unwrap();
        assert_eq!(store.len(), 5);
        assert_eq!(store.get("img3").unwrap(), &data[12..16].to_vec());
    }

    #[test]
    fn search_throughput_stays_above_floor() {
        let reference = rand_matrix(2000, 64, 20, Some(5));
        let queries = rand_matrix(500, 64, 21, None);
        let start = std::time::Instant::now();
        let _ = knn_argmax(&reference, &queries, true).unwrap();
        let elapsed = start.elapsed().as_secs_f64();
        let rate = (2000.0 * 500.0 * 64.0) / elapsed;
        // very conservative floor for any CI hardware
        assert!(rate >= 2.0e7, "brute-force rate {rate:.2e} units/s");
    }
}
