//! Gaussian density over L2-normalized embeddings and Mahalanobis scoring,
//! plus a k-nearest-neighbour alternative.

use std::io::{Read as _, Write as _};
use std::path::Path;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::augment::PositivePolicy;
use crate::encoder::{embed_with_ids, Depth, Encoder};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::rng::{self, Rng};

pub const DEFAULT_EPSILON: f64 = 1e-3;
const MAGIC: &[u8; 8] = b"COFTADDM";

/// Unit-norm copy of `v`.
pub fn normalize(v: &[f64]) -> Result<Vec<f64>> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if !norm.is_finite() {
        return Err(Error::Numerical("non-finite embedding".into()));
    }
    if norm == 0.0 {
        return Err(Error::ZeroNorm { row: 0 });
    }
    Ok(v.iter().map(|x| x / norm).collect())
}

fn normalize_rows(rows: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    rows.iter()
        .enumerate()
        .map(|(i, r)| {
            normalize(r).map_err(|e| match e {
                Error::ZeroNorm { .. } => Error::ZeroNorm { row: i },
                e => e,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScorerKind {
    Gaussian,
    Knn,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRecord {
    pub sample_id: String,
    pub raw_score: f64,
    pub percentile: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DensityHeader {
    pub dim: usize,
    pub epsilon: f64,
    pub n_fit: usize,
    /// Hash of the encoder configuration the fit embeddings came from.
    pub encoder_config_hash: Option<String>,
}

/// Gaussian fit `N(μ, Σ + εI)` to normalized embeddings. The normalized fit
/// vectors are kept for the kNN scorer.
#[derive(Debug, Clone)]
pub struct DensityModel {
    mu: DVector<f64>,
    sigma: DMatrix<f64>,
    epsilon: f64,
    factor: Cholesky<f64, Dyn>,
    fit_vectors: Vec<Vec<f64>>,
    pub encoder_config_hash: Option<String>,
}

impl DensityModel {
    /// Fits mean and biased (`1/N`) covariance of the normalized rows, then
    /// adds `epsilon` to the diagonal.
    pub fn fit(rows: &[Vec<f64>], epsilon: f64) -> Result<Self> {
        if !(epsilon > 0.0 && epsilon.is_finite()) {
            return Err(Error::Domain(format!("epsilon must be positive, got {epsilon}")));
        }
        if rows.len() < 2 {
            return Err(Error::DegenerateInput(format!(
                "covariance needs at least 2 fit vectors, got {}",
                rows.len()
            )));
        }
        let dim = rows[0].len();
        if dim == 0 || rows.iter().any(|r| r.len() != dim) {
            return Err(Error::Contract("fit vectors must share a positive dimension".into()));
        }
        let unit = normalize_rows(rows)?;
        let n = unit.len() as f64;
        let mut mu = DVector::zeros(dim);
        for r in &unit {
            mu += DVector::from_column_slice(r);
        }
        mu /= n;
        let mut sigma = DMatrix::zeros(dim, dim);
        for r in &unit {
            let d = DVector::from_column_slice(r) - &mu;
            sigma.ger(1.0, &d, &d, 1.0);
        }
        sigma /= n;
        for i in 0..dim {
            sigma[(i, i)] += epsilon;
        }
        Self::from_parts(mu, sigma, epsilon, unit, None)
    }

    fn from_parts(
        mu: DVector<f64>,
        sigma: DMatrix<f64>,
        epsilon: f64,
        fit_vectors: Vec<Vec<f64>>,
        encoder_config_hash: Option<String>,
    ) -> Result<Self> {
        if mu.iter().chain(sigma.iter()).any(|v| !v.is_finite()) {
            return Err(Error::Numerical("density parameters are not finite".into()));
        }
        let factor = Cholesky::new(sigma.clone())
            .ok_or_else(|| Error::Numerical("covariance is not positive definite".into()))?;
        Ok(Self {
            mu,
            sigma,
            epsilon,
            factor,
            fit_vectors,
            encoder_config_hash,
        })
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    pub fn n_fit(&self) -> usize {
        self.fit_vectors.len()
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn mu(&self) -> &DVector<f64> {
        &self.mu
    }

    /// Covariance including the `εI` term.
    pub fn sigma(&self) -> &DMatrix<f64> {
        &self.sigma
    }

    pub fn fit_vectors(&self) -> &[Vec<f64>] {
        &self.fit_vectors
    }

    fn check_dim(&self, v: &[f64]) -> Result<()> {
        if v.len() != self.dim() {
            return Err(Error::Contract(format!(
                "embedding has dimension {}, model expects {}",
                v.len(),
                self.dim()
            )));
        }
        Ok(())
    }

    /// Mahalanobis distance of `normalize(v)` from `μ`, via a triangular solve
    /// against the Cholesky factor.
    pub fn score_embedding(&self, v: &[f64]) -> Result<f64> {
        self.check_dim(v)?;
        let d = DVector::from_vec(normalize(v)?) - &self.mu;
        let y = self
            .factor
            .l_dirty()
            .solve_lower_triangular(&d)
            .ok_or_else(|| Error::Numerical("singular covariance factor".into()))?;
        Ok(y.norm())
    }

    pub fn score_knn(&self, v: &[f64], k: usize) -> Result<f64> {
        self.check_dim(v)?;
        knn_score(&self.fit_vectors, v, k)
    }

    pub fn score(&self, v: &[f64], scorer: ScorerKind, k: usize) -> Result<f64> {
        match scorer {
            ScorerKind::Gaussian => self.score_embedding(v),
            ScorerKind::Knn => self.score_knn(v, k),
        }
    }

    pub fn header(&self) -> DensityHeader {
        DensityHeader {
            dim: self.dim(),
            epsilon: self.epsilon,
            n_fit: self.n_fit(),
            encoder_config_hash: self.encoder_config_hash.clone(),
        }
    }

    /// Writes the model as magic bytes, a length-prefixed JSON header, then
    /// little-endian `f64` blobs: `μ` (D), `Σ` row-major (D×D) and the fit
    /// vectors row-major (N×D).
    pub fn save(&self, path: &Path) -> Result<()> {
        let header = serde_json::to_vec(&self.header())?;
        let d = self.dim();
        let mut buf = Vec::with_capacity(16 + header.len() + 8 * (d + d * d + self.n_fit() * d));
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&(header.len() as u64).to_le_bytes());
        buf.extend_from_slice(&header);
        let mut put = |x: f64| buf.extend_from_slice(&x.to_le_bytes());
        self.mu.iter().for_each(|x| put(*x));
        for i in 0..d {
            for j in 0..d {
                put(self.sigma[(i, j)]);
            }
        }
        self.fit_vectors.iter().flatten().for_each(|x| put(*x));
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&buf).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        let bad = |why: &str| Error::Data(format!("{}: {why}", path.display()));
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(bad("not a density model file"));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let body = bytes.get(16 + hlen..).ok_or_else(|| bad("truncated header"))?;
        let header: DensityHeader = serde_json::from_slice(&bytes[16..16 + hlen])?;
        let d = header.dim;
        let expected = 8 * (d + d * d + header.n_fit * d);
        if body.len() != expected {
            return Err(bad(&format!("expected {expected} payload bytes, found {}", body.len())));
        }
        let vals: Vec<f64> = body
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let mu = DVector::from_column_slice(&vals[..d]);
        let sigma = DMatrix::from_row_slice(d, d, &vals[d..d + d * d]);
        let fit = vals[d + d * d..].chunks_exact(d.max(1)).map(<[f64]>::to_vec).collect();
        Self::from_parts(mu, sigma, header.epsilon, fit, header.encoder_config_hash)
    }
}

fn image_key(img: &Image) -> u64 {
    let mut h = Sha256::new();
    h.update((img.channels() as u64).to_le_bytes());
    h.update((img.height() as u64).to_le_bytes());
    h.update((img.width() as u64).to_le_bytes());
    for v in img.data() {
        h.update(v.to_le_bytes());
    }
    u64::from_le_bytes(h.finalize()[..8].try_into().expect("8 bytes"))
}

/// Fits the density to `n_a` positively augmented copies of every few-shot
/// image, embedded at backbone depth.
///
/// Each copy's augmentation stream is keyed by the image content and the copy
/// index, so the fit does not depend on the order of `fewshot`.
pub fn fit_density<E: Encoder + ?Sized>(
    encoder: &E,
    fewshot: &[Image],
    pos: &PositivePolicy,
    n_a: usize,
    epsilon: f64,
    rng: &mut Rng,
) -> Result<DensityModel> {
    use rand::Rng as _;
    if fewshot.is_empty() {
        return Err(Error::Data("no few-shot images to fit the density".into()));
    }
    let seed: u64 = rng.random();
    let mut augmented = Vec::with_capacity(fewshot.len() * n_a);
    for img in fewshot {
        let key = image_key(img);
        for copy in 0..n_a {
            let mut r = rng::stream(seed ^ key, "fit-augment", copy as u64);
            augmented.push(pos.apply(img, &mut r));
        }
    }
    let ids = (0..augmented.len()).map(|i| i.to_string()).collect();
    let emb = embed_with_ids(encoder, &augmented, Depth::Backbone, ids)?;
    let mut model = DensityModel::fit(&emb.vectors, epsilon)?;
    model.encoder_config_hash = Some(crate::encoder::checkpoint::config_hash(encoder.config()));
    Ok(model)
}

/// Scores un-augmented images in input order.
pub fn score_images<E: Encoder + ?Sized>(
    model: &DensityModel,
    encoder: &E,
    images: &[Image],
    ids: &[String],
    scorer: ScorerKind,
    k: usize,
) -> Result<Vec<ScoreRecord>> {
    if images.len() != ids.len() {
        return Err(Error::Contract("one id per image required".into()));
    }
    if images.is_empty() {
        return Ok(Vec::new());
    }
    let emb = embed_with_ids(encoder, images, Depth::Backbone, ids.to_vec())?;
    emb.vectors
        .iter()
        .zip(ids)
        .map(|(v, id)| {
            Ok(ScoreRecord {
                sample_id: id.clone(),
                raw_score: model.score(v, scorer, k)?,
                percentile: None,
            })
        })
        .collect()
}

/// Mean Euclidean distance from `normalize(v)` to its `k` nearest normalized
/// training rows.
pub fn knn_score(train: &[Vec<f64>], v: &[f64], k: usize) -> Result<f64> {
    if k == 0 || k > train.len() {
        return Err(Error::Domain(format!("k = {k} outside 1..={}", train.len())));
    }
    let q = normalize(v)?;
    let mut dists: Vec<f64> = train
        .iter()
        .map(|row| {
            let r = normalize(row)?;
            if r.len() != q.len() {
                return Err(Error::Contract("kNN dimension mismatch".into()));
            }
            Ok(r.iter().zip(&q).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt())
        })
        .collect::<Result<_>>()?;
    dists.select_nth_unstable_by(k - 1, f64::total_cmp);
    let mut nearest = dists[..k].to_vec();
    nearest.sort_by(f64::total_cmp);
    Ok(nearest.iter().sum::<f64>() / k as f64)
}

/// Midrank of each score divided by the list length: `(rank − ½)/N` with
/// ties sharing their average rank.
pub fn percentile_normalize(scores: &[f64]) -> Vec<f64> {
    let n = scores.len();
    let ranks = crate::eval::midranks(scores);
    ranks.iter().map(|r| (r - 0.5) / n as f64).collect()
}

/// Fills `percentile` of each record relative to the whole set.
pub fn attach_percentiles(records: &mut [ScoreRecord]) {
    let raw: Vec<f64> = records.iter().map(|r| r.raw_score).collect();
    for (r, p) in records.iter_mut().zip(percentile_normalize(&raw)) {
        r.percentile = Some(p);
    }
}
