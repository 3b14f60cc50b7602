//! Attention-based communication: query/key encoding, the normalized
//! general-attention matching score, softmax weighting, infrastructure
//! selection, feature fusion, and surrogate training of the attention
//! matrix against oracle selection labels.

use std::io::{Read, Write};

use ndarray::{Array1, Array2, Zip};
use thiserror::Error;

use crate::rng::{derive_seed, SeededRng};
use crate::tensor::{read_matrices, write_matrix, PseudoImage, TensorError};

pub const DEFAULT_QUERY_DIM: usize = 16;
pub const DEFAULT_KEY_DIM: usize = 128;

#[derive(Debug, Error)]
pub enum AttentionError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("empty score set")]
    Empty,
    #[error("degenerate input: zero-norm projected query or key")]
    Degenerate,
    #[error("bad attention state file: {0}")]
    State(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Compact vehicle-side summary broadcast to infrastructures.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryVector(pub Array1<f64>);

/// Infrastructure-side summary; never leaves the infrastructure.
#[derive(Debug, Clone, PartialEq)]
pub struct KeyVector(pub Array1<f64>);

/// Learnable `M_mu x M_psi` coupling between queries and keys.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMatrix(pub Array2<f64>);

impl QueryVector {
    pub fn dim(&self) -> usize {
        self.0.len()
    }
}

impl KeyVector {
    pub fn dim(&self) -> usize {
        self.0.len()
    }
}

impl AttentionMatrix {
    /// Entries drawn i.i.d. standard normal from a seeded stream.
    pub fn seeded(query_dim: usize, key_dim: usize, seed: u64) -> Self {
        let mut rng = SeededRng::new(derive_seed(seed, "attention", 0));
        Self(Array2::from_shape_fn((query_dim, key_dim), |_| rng.normal()))
    }

    pub fn query_dim(&self) -> usize {
        self.0.nrows()
    }

    pub fn key_dim(&self) -> usize {
        self.0.ncols()
    }
}

fn pool_and_project(image: &PseudoImage, projection: &Array2<f64>) -> Result<Array1<f64>, AttentionError> {
    if projection.ncols() != image.channels() {
        return Err(AttentionError::Dimension(format!(
            "projection expects {} channels, image has {}",
            projection.ncols(),
            image.channels()
        )));
    }
    let pooled = Array1::from(image.channel_means());
    Ok(projection.dot(&pooled))
}

/// Spatial mean-pool followed by an `M_mu x C` projection.
pub fn encode_query(image: &PseudoImage, projection: &Array2<f64>) -> Result<QueryVector, AttentionError> {
    pool_and_project(image, projection).map(QueryVector)
}

/// Spatial mean-pool followed by an `M_psi x C` projection.
pub fn encode_key(image: &PseudoImage, projection: &Array2<f64>) -> Result<KeyVector, AttentionError> {
    pool_and_project(image, projection).map(KeyVector)
}

/// A matching score; `degenerate` marks a zero-norm input whose score was
/// defined as 0.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MatchScore {
    pub value: f64,
    pub degenerate: bool,
}

fn check_dims(query: &QueryVector, key: &KeyVector, w: &AttentionMatrix) -> Result<(), AttentionError> {
    if query.dim() != w.query_dim() || key.dim() != w.key_dim() {
        return Err(AttentionError::Dimension(format!(
            "query {} / key {} against attention matrix {}x{}",
            query.dim(),
            key.dim(),
            w.query_dim(),
            w.key_dim()
        )));
    }
    Ok(())
}

/// `(mu^T W psi) / (||mu^T W|| ||psi||)`: cosine between the projected
/// query and the key.
pub fn matching_score(query: &QueryVector, key: &KeyVector, w: &AttentionMatrix) -> Result<MatchScore, AttentionError> {
    check_dims(query, key, w)?;
    let u = w.0.t().dot(&query.0);
    let (nu, nk) = (norm(&u), norm(&key.0));
    if nu == 0.0 || nk == 0.0 || !nu.is_finite() || !nk.is_finite() {
        return Ok(MatchScore { value: 0.0, degenerate: true });
    }
    let t = (u.dot(&key.0) / (nu * nk)).clamp(-1.0, 1.0);
    Ok(MatchScore { value: t, degenerate: false })
}

fn norm(v: &Array1<f64>) -> f64 {
    v.dot(v).sqrt()
}

/// Raw matching scores of the responding infrastructures and their softmax.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreSet {
    pub ids: Vec<usize>,
    pub raw: Vec<f64>,
    pub normalized: Vec<f64>,
}

impl ScoreSet {
    pub fn len(&self) -> usize {
        self.raw.len()
    }

    pub fn is_empty(&self) -> bool {
        self.raw.is_empty()
    }

    /// Softmax weight of infrastructure `id`, if it responded.
    pub fn weight_of(&self, id: usize) -> Option<f64> {
        self.ids.iter().position(|&i| i == id).map(|k| self.normalized[k])
    }
}

/// Numerically stable softmax (max-subtracted).
pub fn softmax(raw: &[f64]) -> Vec<f64> {
    let m = raw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = raw.iter().map(|&t| (t - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

/// Softmax over infrastructures `0..N`.
pub fn normalize_scores(raw: &[f64]) -> Result<ScoreSet, AttentionError> {
    normalize_scores_with_ids(raw, (0..raw.len()).collect())
}

pub fn normalize_scores_with_ids(raw: &[f64], ids: Vec<usize>) -> Result<ScoreSet, AttentionError> {
    if raw.is_empty() {
        return Err(AttentionError::Empty);
    }
    if ids.len() != raw.len() {
        return Err(AttentionError::Dimension(format!("{} ids for {} scores", ids.len(), raw.len())));
    }
    if raw.iter().any(|t| !t.is_finite()) {
        return Err(AttentionError::Dimension("non-finite raw score".into()));
    }
    Ok(ScoreSet { ids, raw: raw.to_vec(), normalized: softmax(raw) })
}

/// Argmax over raw scores; ties go to the lowest id.
pub fn select_infrastructure(scores: &ScoreSet) -> Result<usize, AttentionError> {
    argmax_lowest(&scores.raw, &scores.ids).ok_or(AttentionError::Empty)
}

fn argmax_lowest(values: &[f64], ids: &[usize]) -> Option<usize> {
    let mut best: Option<(f64, usize)> = None;
    for (&v, &id) in values.iter().zip(ids) {
        best = match best {
            Some((bv, bid)) if v < bv || (v == bv && id > bid) => Some((bv, bid)),
            _ => Some((v, id)),
        };
    }
    best.map(|(_, id)| id)
}

/// Every entry scaled by `weight`.
pub fn refine_feature(image: &PseudoImage, weight: f64) -> PseudoImage {
    let w = weight as f32;
    PseudoImage::from_array(image.data.mapv(|v| v * w))
}

/// `[local, selected_refined]` along channels.
pub fn fuse_inference(local: &PseudoImage, selected_refined: &PseudoImage) -> Result<PseudoImage, AttentionError> {
    local.concat(selected_refined).map_err(AttentionError::from)
}

/// `[local, sum_i w_i * infra_i]` with `w` the normalized scores.
pub fn fuse_training(local: &PseudoImage, infra_images: &[PseudoImage], scores: &ScoreSet) -> Result<PseudoImage, AttentionError> {
    if infra_images.len() != scores.len() {
        return Err(AttentionError::Dimension(format!(
            "{} infrastructure images for {} scores",
            infra_images.len(),
            scores.len()
        )));
    }
    let mut acc = PseudoImage::zeros(local.channels(), local.height(), local.width());
    for (img, &w) in infra_images.iter().zip(&scores.normalized) {
        if img.dims() != local.dims() {
            return Err(AttentionError::Dimension(format!("image {:?} against local {:?}", img.dims(), local.dims())));
        }
        let w = w as f32;
        Zip::from(&mut acc.data).and(&img.data).for_each(|a, &v| *a += w * v);
    }
    fuse_inference(local, &acc)
}

/// Analytic gradient of the matching score with respect to the attention
/// matrix: `mu (x) (psi / (|u| |psi|) - t u / |u|^2)` with `u = W^T mu`.
pub fn score_gradient(query: &QueryVector, key: &KeyVector, w: &AttentionMatrix) -> Result<Array2<f64>, AttentionError> {
    check_dims(query, key, w)?;
    let u = w.0.t().dot(&query.0);
    let (nu, nk) = (norm(&u), norm(&key.0));
    if nu == 0.0 || nk == 0.0 {
        return Err(AttentionError::Degenerate);
    }
    let t = u.dot(&key.0) / (nu * nk);
    let dt_du = &key.0 / (nu * nk) - &(&u * (t / (nu * nu)));
    let mu = query.0.view().insert_axis(ndarray::Axis(1));
    let g = dt_du.view().insert_axis(ndarray::Axis(0));
    Ok(mu.dot(&g))
}

/// One surrogate training example: the vehicle query, the keys of all
/// infrastructures, and the index of the infrastructure that should be
/// selected.
#[derive(Debug, Clone, PartialEq)]
pub struct SelectionExample {
    pub query: QueryVector,
    pub keys: Vec<KeyVector>,
    pub best: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub matrix: AttentionMatrix,
    /// Mean cross-entropy at the start of each epoch.
    pub losses: Vec<f64>,
}

fn example_scores(ex: &SelectionExample, w: &AttentionMatrix) -> Result<Vec<f64>, AttentionError> {
    ex.keys.iter().map(|k| matching_score(&ex.query, k, w).map(|s| s.value)).collect()
}

/// Mean cross-entropy between the softmax of the matching scores and the
/// one-hot labels.
pub fn selection_loss(dataset: &[SelectionExample], w: &AttentionMatrix) -> Result<f64, AttentionError> {
    if dataset.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for ex in dataset {
        let t = example_scores(ex, w)?;
        let p = softmax(&t);
        total -= p[ex.best].max(f64::MIN_POSITIVE).ln();
    }
    Ok(total / dataset.len() as f64)
}

/// Fraction of examples whose argmax selection equals the label.
pub fn selection_accuracy(dataset: &[SelectionExample], w: &AttentionMatrix) -> Result<f64, AttentionError> {
    if dataset.is_empty() {
        return Ok(0.0);
    }
    let mut hits = 0usize;
    for ex in dataset {
        let t = example_scores(ex, w)?;
        let ids: Vec<usize> = (0..t.len()).collect();
        if argmax_lowest(&t, &ids) == Some(ex.best) {
            hits += 1;
        }
    }
    Ok(hits as f64 / dataset.len() as f64)
}

/// Full-batch gradient descent on the mean selection cross-entropy.
///
/// `dL/dt_i = softmax(t)_i - [i == best]`, chained through
/// [`score_gradient`]. Keys or queries with zero norm contribute nothing.
pub fn train_attention(
    dataset: &[SelectionExample],
    w0: &AttentionMatrix,
    lr: f64,
    epochs: usize,
) -> Result<TrainOutcome, AttentionError> {
    if !(lr > 0.0) {
        return Err(AttentionError::Dimension(format!("learning rate must be positive, got {lr}")));
    }
    for ex in dataset {
        if ex.best >= ex.keys.len() {
            return Err(AttentionError::Dimension(format!("label {} with {} keys", ex.best, ex.keys.len())));
        }
    }
    let mut w = w0.clone();
    let mut losses = Vec::with_capacity(epochs);
    let n = dataset.len().max(1) as f64;
    for _ in 0..epochs {
        let mut grad = Array2::<f64>::zeros(w.0.dim());
        let mut loss = 0.0;
        for ex in dataset {
            let t = example_scores(ex, &w)?;
            let p = softmax(&t);
            loss -= p[ex.best].max(f64::MIN_POSITIVE).ln();
            for (i, key) in ex.keys.iter().enumerate() {
                let coeff = p[i] - if i == ex.best { 1.0 } else { 0.0 };
                match score_gradient(&ex.query, key, &w) {
                    Ok(g) => grad.scaled_add(coeff, &g),
                    Err(AttentionError::Degenerate) => {}
                    Err(e) => return Err(e),
                }
            }
        }
        losses.push(loss / n);
        w.0.scaled_add(-lr / n, &grad);
    }
    Ok(TrainOutcome { matrix: w, losses })
}

/// Query/key projections plus the attention matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionState {
    /// `M_mu x C`
    pub query_proj: Array2<f64>,
    /// `M_psi x C`
    pub key_proj: Array2<f64>,
    pub matrix: AttentionMatrix,
}

impl AttentionState {
    /// Gaussian projections scaled by `1/sqrt(C)` and a standard normal
    /// attention matrix, all from sub-streams of `seed`.
    pub fn seeded(channels: usize, query_dim: usize, key_dim: usize, seed: u64) -> Self {
        let scale = 1.0 / (channels.max(1) as f64).sqrt();
        let mut rq = SeededRng::new(derive_seed(seed, "query-proj", 0));
        let mut rk = SeededRng::new(derive_seed(seed, "key-proj", 0));
        Self {
            query_proj: Array2::from_shape_fn((query_dim, channels), |_| scale * rq.normal()),
            key_proj: Array2::from_shape_fn((key_dim, channels), |_| scale * rk.normal()),
            matrix: AttentionMatrix::seeded(query_dim, key_dim, seed),
        }
    }

    pub fn query_dim(&self) -> usize {
        self.query_proj.nrows()
    }

    pub fn query(&self, image: &PseudoImage) -> Result<QueryVector, AttentionError> {
        encode_query(image, &self.query_proj)
    }

    pub fn key(&self, image: &PseudoImage) -> Result<KeyVector, AttentionError> {
        encode_key(image, &self.key_proj)
    }

    /// Three tensor records: query projection, key projection, matrix.
    pub fn write_to<W: Write>(&self, mut w: W) -> Result<(), AttentionError> {
        write_matrix(&mut w, &self.query_proj).map_err(TensorError::from)?;
        write_matrix(&mut w, &self.key_proj).map_err(TensorError::from)?;
        write_matrix(&mut w, &self.matrix.0).map_err(TensorError::from)?;
        Ok(())
    }

    pub fn read_from<R: Read>(r: R) -> Result<Self, AttentionError> {
        let mut m = read_matrices(r)?;
        if m.len() != 3 {
            return Err(AttentionError::State(format!("expected 3 tensor records, found {}", m.len())));
        }
        let matrix = m.pop().unwrap();
        let key_proj = m.pop().unwrap();
        let query_proj = m.pop().unwrap();
        if query_proj.ncols() != key_proj.ncols()
            || matrix.nrows() != query_proj.nrows()
            || matrix.ncols() != key_proj.nrows()
        {
            return Err(AttentionError::State("inconsistent tensor shapes".into()));
        }
        Ok(Self { query_proj, key_proj, matrix: AttentionMatrix(matrix) })
    }

    /// The same state after an `f32` save/load round trip.
    pub fn quantized(&self) -> Self {
        let q = |m: &Array2<f64>| m.mapv(|v| v as f32 as f64);
        Self {
            query_proj: q(&self.query_proj),
            key_proj: q(&self.key_proj),
            matrix: AttentionMatrix(q(&self.matrix.0)),
        }
    }
}
