//! Supervised contrastive comparison losses over labeled embedding batches.
//!
//! Two instantiations share one kernel: an RoI-level loss whose queries are
//! ground-truth (plus augmented) embeddings and whose keys are foreground RoI
//! embeddings, and a class-level loss whose queries are the current batch and
//! whose keys come from the historical memory bank. Similarities are cosine,
//! computed on unit-normalized copies inside the loss; the inner sum over
//! positives is deliberately not normalized by the positive count (a config
//! switch restores the normalized variant for comparison).

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};

use crate::error::{Error, Result};

/// Row-major batch of `N` embeddings of uniform dimension `D` with per-row
/// class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledEmbeddingBatch {
    embeddings: Array2<f64>,
    labels: Vec<usize>,
}

impl LabeledEmbeddingBatch {
    pub fn new(embeddings: Array2<f64>, labels: Vec<usize>) -> Result<Self> {
        if embeddings.nrows() != labels.len() {
            return Err(Error::DimensionMismatch {
                expected: embeddings.nrows(),
                got: labels.len(),
            });
        }
        if embeddings.iter().any(|v| !v.is_finite()) {
            return Err(Error::Validation(
                "embedding batch contains non-finite values".into(),
            ));
        }
        Ok(Self { embeddings, labels })
    }

    pub fn empty(dim: usize) -> Self {
        Self {
            embeddings: Array2::zeros((0, dim)),
            labels: Vec::new(),
        }
    }

    pub fn from_rows(rows: &[(Vec<f64>, usize)]) -> Result<Self> {
        let dim = rows.first().map_or(0, |(v, _)| v.len());
        let mut data = Vec::with_capacity(rows.len() * dim);
        let mut labels = Vec::with_capacity(rows.len());
        for (v, label) in rows {
            if v.len() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    got: v.len(),
                });
            }
            data.extend_from_slice(v);
            labels.push(*label);
        }
        let embeddings = Array2::from_shape_vec((rows.len(), dim), data)
            .expect("shape follows from construction");
        Self::new(embeddings, labels)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.embeddings.ncols()
    }

    pub fn embeddings(&self) -> ArrayView2<'_, f64> {
        self.embeddings.view()
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn row(&self, i: usize) -> ArrayView1<'_, f64> {
        self.embeddings.row(i)
    }

    /// Concatenate two batches of equal dimension.
    pub fn concat(&self, other: &Self) -> Result<Self> {
        if self.is_empty() {
            return Ok(other.clone());
        }
        if other.is_empty() {
            return Ok(self.clone());
        }
        if self.dim() != other.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                got: other.dim(),
            });
        }
        let embeddings = ndarray::concatenate(
            Axis(0),
            &[self.embeddings.view(), other.embeddings.view()],
        )
        .expect("dimensions checked");
        let mut labels = self.labels.clone();
        labels.extend_from_slice(&other.labels);
        Self::new(embeddings, labels)
    }
}

/// Cosine similarity; errors on a zero-norm input.
pub fn cosine_sim(a: ArrayView1<'_, f64>, b: ArrayView1<'_, f64>) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch {
            expected: a.len(),
            got: b.len(),
        });
    }
    let na = a.dot(&a).sqrt();
    let nb = b.dot(&b).sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::UndefinedSimilarity);
    }
    Ok(a.dot(&b) / (na * nb))
}

/// Loss value together with gradients w.r.t. the raw (un-normalized) query
/// and key embeddings.
#[derive(Debug, Clone)]
pub struct ContrastOutput {
    pub loss: f64,
    pub grad_queries: Array2<f64>,
    pub grad_keys: Array2<f64>,
}

fn normalize_rows(x: ArrayView2<'_, f64>) -> Result<(Array2<f64>, Array1<f64>)> {
    let mut out = x.to_owned();
    let mut norms = Array1::zeros(x.nrows());
    for (i, mut row) in out.axis_iter_mut(Axis(0)).enumerate() {
        let n = row.dot(&row).sqrt();
        if n == 0.0 {
            return Err(Error::UndefinedSimilarity);
        }
        row.mapv_inplace(|v| v / n);
        norms[i] = n;
    }
    Ok((out, norms))
}

/// Supervised contrastive loss of `queries` against `keys` at temperature
/// `tau`, with analytic gradients.
///
/// For each query `j` and each same-label key `i+`, accumulates
/// `-log( exp(sim(j, i+)/tau) / sum_i exp(sim(j, i)/tau) )`, scales the total
/// by `1/|queries|`. Queries without a positive key contribute zero. With
/// `normalize_positives` the inner sum is additionally divided by the number
/// of positives (the conventional SupCon form; off by default).
///
/// Errors: empty key set, non-positive `tau`, zero-norm rows, dimension
/// mismatch. An empty query batch is allowed and yields zero loss.
pub fn supervised_contrast_loss(
    queries: &LabeledEmbeddingBatch,
    keys: &LabeledEmbeddingBatch,
    tau: f64,
    normalize_positives: bool,
) -> Result<ContrastOutput> {
    if keys.is_empty() {
        return Err(Error::EmptyComparison);
    }
    if !(tau > 0.0) {
        return Err(Error::Config(format!(
            "temperature must be positive, got {tau}"
        )));
    }
    if queries.dim() != keys.dim() && !queries.is_empty() {
        return Err(Error::DimensionMismatch {
            expected: keys.dim(),
            got: queries.dim(),
        });
    }
    let n_q = queries.len();
    let n_k = keys.len();
    if n_q == 0 {
        return Ok(ContrastOutput {
            loss: 0.0,
            grad_queries: Array2::zeros((0, keys.dim())),
            grad_keys: Array2::zeros(keys.embeddings().dim()),
        });
    }

    let (u, q_norms) = normalize_rows(queries.embeddings())?; // n_q x d
    let (v, k_norms) = normalize_rows(keys.embeddings())?; // n_k x d

    // Cosine similarity matrix and row-stable softmax over keys.
    let sims = u.dot(&v.t()); // n_q x n_k
    let scaled = sims.mapv(|s| s / tau);
    let mut softmax = Array2::zeros((n_q, n_k));
    let mut lse = Array1::zeros(n_q);
    for (j, row) in scaled.axis_iter(Axis(0)).enumerate() {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for &s in row {
            z += (s - m).exp();
        }
        lse[j] = m + z.ln();
        for (i, &s) in row.iter().enumerate() {
            softmax[[j, i]] = (s - m).exp() / z;
        }
    }

    let mut loss = 0.0;
    // d(loss)/d(sims), with the per-query weighting folded in.
    let mut g_sim = Array2::<f64>::zeros((n_q, n_k));
    let inv_nq = 1.0 / n_q as f64;
    for j in 0..n_q {
        let positives: Vec<usize> = (0..n_k)
            .filter(|&i| keys.labels()[i] == queries.labels()[j])
            .collect();
        let p = positives.len();
        if p == 0 {
            continue; // no positive keys: skip convention
        }
        let w = if normalize_positives {
            inv_nq / p as f64
        } else {
            inv_nq
        };
        for &i in &positives {
            loss += w * (lse[j] - scaled[[j, i]]);
            g_sim[[j, i]] -= w / tau;
        }
        let scale = w * p as f64 / tau;
        for i in 0..n_k {
            g_sim[[j, i]] += scale * softmax[[j, i]];
        }
    }

    // Backprop through cosine: s = u.v with u = q/|q| gives
    // dL/dq_j = (r_j - (u_j . r_j) u_j) / |q_j| where r = G V.
    let r = g_sim.dot(&v); // n_q x d
    let mut grad_queries = Array2::zeros((n_q, queries.dim()));
    for j in 0..n_q {
        let uj = u.row(j);
        let rj = r.row(j);
        let proj = uj.dot(&rj);
        let inv = 1.0 / q_norms[j];
        for d in 0..queries.dim() {
            grad_queries[[j, d]] = (rj[d] - proj * uj[d]) * inv;
        }
    }
    let c = g_sim.t().dot(&u); // n_k x d
    let mut grad_keys = Array2::zeros((n_k, keys.dim()));
    for i in 0..n_k {
        let vi = v.row(i);
        let ci = c.row(i);
        let proj = vi.dot(&ci);
        let inv = 1.0 / k_norms[i];
        for d in 0..keys.dim() {
            grad_keys[[i, d]] = (ci[d] - proj * vi[d]) * inv;
        }
    }

    Ok(ContrastOutput {
        loss,
        grad_queries,
        grad_keys,
    })
}

/// RoI-level comparison: ground-truth plus augmented embeddings as queries,
/// foreground RoI embeddings as keys. An empty side is a skip (zero loss),
/// which happens whenever background filtering leaves no RoIs.
pub fn roi_contrast_loss(
    gt_and_aug: &LabeledEmbeddingBatch,
    rois: &LabeledEmbeddingBatch,
    tau_roi: f64,
    normalize_positives: bool,
) -> Result<Option<ContrastOutput>> {
    if rois.is_empty() || gt_and_aug.is_empty() {
        return Ok(None);
    }
    supervised_contrast_loss(gt_and_aug, rois, tau_roi, normalize_positives).map(Some)
}

/// Class-level comparison: current foreground class embeddings as queries,
/// a memory-bank view as keys. An empty bank view is a skip (zero loss),
/// which is the warm-up behavior.
pub fn cls_contrast_loss(
    current: &LabeledEmbeddingBatch,
    memory_view: &LabeledEmbeddingBatch,
    tau_cls: f64,
    normalize_positives: bool,
) -> Result<Option<ContrastOutput>> {
    if memory_view.is_empty() || current.is_empty() {
        return Ok(None);
    }
    supervised_contrast_loss(current, memory_view, tau_cls, normalize_positives).map(Some)
}
