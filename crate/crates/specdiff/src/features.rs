//! Stage 2: frozen-model feature extraction.
//!
//! A labeled pixel becomes a feature vector by noising its patch to a chosen
//! timestep, running the frozen denoiser, bilinearly upsampling one decoder
//! tap back to patch resolution, and keeping the center pixel's channel
//! vector. A (timestep, tap) list concatenates such vectors in list order.
//!
//! Noise is keyed by (sample index, timestep, tap), never by list position,
//! so reordering the pair list permutes column blocks without changing a
//! single byte inside them.

use ndarray::{Array2, Array3, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diffmath::{self, VarianceSchedule};
use crate::error::{Error, Result};
use crate::hsio::{self, LabeledCube, Patch, SampleSplit};
use crate::nn::denoiser::Denoiser;
use crate::nn::ops;
use crate::store::{self, NpzReader, NpzWriter};

pub const REPO_SCHEMA: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TapSpec {
    /// (timestep, decoder tap index) pairs, concatenated in this order.
    pub pairs: Vec<(usize, usize)>,
    /// Seed for the injected noise; per-sample streams derive from it.
    pub seed: u64,
}

impl TapSpec {
    pub fn validate(&self, t_max: usize, n_taps: usize) -> Result<()> {
        if self.pairs.is_empty() {
            return Err(Error::invalid("TapSpec needs at least one (t, f) pair"));
        }
        for &(t, f) in &self.pairs {
            if t == 0 || t > t_max {
                return Err(Error::invalid(format!(
                    "timestep {t} outside schedule range [1, {t_max}]"
                )));
            }
            if f >= n_taps {
                return Err(Error::invalid(format!(
                    "feature index {f} outside available taps 0..{n_taps}"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepoProvenance {
    pub checkpoint_id: String,
    pub pairs: Vec<(usize, usize)>,
    pub noise_seed: u64,
    pub patch_size: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PcaTransform {
    pub mean: Vec<f64>,
    /// Orthonormal rows, one per retained component, shape [k, L].
    pub components: Array2<f64>,
    /// Fraction of total variance per component, non-increasing.
    pub explained_ratio: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "mode", content = "value")]
pub enum PcaSpec {
    Components(usize),
    VarianceFraction(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureRepository {
    /// One row per sample: train rows first, then test rows.
    pub vectors: Array2<f64>,
    /// 1-based class per row, aligned with `vectors`.
    pub labels: Vec<u32>,
    pub n_train: usize,
    pub provenance: RepoProvenance,
    /// Present when `vectors` live in a PCA basis; holds the full transform
    /// so the projection is invertible and reusable.
    pub pca: Option<PcaTransform>,
}

impl FeatureRepository {
    pub fn n_samples(&self) -> usize {
        self.vectors.nrows()
    }

    pub fn feature_dim(&self) -> usize {
        self.vectors.ncols()
    }

    pub fn train_vectors(&self) -> ArrayView2<'_, f64> {
        self.vectors.slice(ndarray::s![..self.n_train, ..])
    }

    pub fn test_vectors(&self) -> ArrayView2<'_, f64> {
        self.vectors.slice(ndarray::s![self.n_train.., ..])
    }

    pub fn train_labels(&self) -> &[u32] {
        &self.labels[..self.n_train]
    }

    pub fn test_labels(&self) -> &[u32] {
        &self.labels[self.n_train..]
    }
}

/// Bilinear resize of a channel-last [h, w, c] map to [p, p, c].
pub fn upsample_tap(tap: &Array3<f64>, p: usize) -> Array3<f64> {
    let cf = tap.view().permuted_axes([2, 0, 1]).as_standard_layout().to_owned();
    let up = ops::resize_bilinear(&cf, p, p);
    up.view().permuted_axes([1, 2, 0]).as_standard_layout().to_owned()
}

/// Noise the patch to timestep t, run the frozen model, and return decoder
/// tap f brought back to patch resolution. Pure in all arguments.
pub fn extract_timestep_features(
    model: &Denoiser,
    s: &VarianceSchedule,
    patch: &Patch,
    t: usize,
    f: usize,
    eps: &Array3<f64>,
) -> Result<Array3<f64>> {
    if f >= model.cfg.n_taps() {
        return Err(Error::invalid(format!(
            "feature index {f} outside available taps 0..{}",
            model.cfg.n_taps()
        )));
    }
    let x_t = diffmath::forward_noise(s, &patch.values, t, eps)?;
    let out = model.predict_noise(&x_t, t, true)?;
    Ok(upsample_tap(&out.taps[f], model.cfg.patch_size))
}

/// The channel vector at the patch center, floor convention for even sizes.
pub fn center_vector(feat: &Array3<f64>) -> Vec<f64> {
    let (h, w, _) = feat.dim();
    feat.index_axis(Axis(0), h / 2)
        .index_axis(Axis(0), w / 2)
        .to_vec()
}

fn noise_for(seed: u64, sample: usize, t: usize, f: usize, shape: (usize, usize, usize)) -> Array3<f64> {
    let label = format!("noise:{sample}:t{t}:f{f}");
    let mut rng = ChaCha8Rng::seed_from_u64(store::derive_seed(seed, &label));
    Array3::from_shape_fn(shape, |_| rng.sample::<f64, _>(StandardNormal))
}

/// Walk the split (train rows first, then test), extract per-pair center
/// vectors, and concatenate them in pair order. Parallel over samples with
/// writes at fixed row indices, so worker count never shows in the output.
pub fn build_repository(
    model: &Denoiser,
    s: &VarianceSchedule,
    cube: &LabeledCube,
    split: &SampleSplit,
    tapspec: &TapSpec,
    p: usize,
    checkpoint_id: &str,
) -> Result<FeatureRepository> {
    if model.cfg.in_channels != cube.bands() {
        return Err(Error::invalid(format!(
            "checkpoint expects {} channels but the cube has {} bands",
            model.cfg.in_channels,
            cube.bands()
        )));
    }
    if model.cfg.patch_size != p {
        return Err(Error::invalid(format!(
            "requested patch size {p} but the checkpoint was trained at {}",
            model.cfg.patch_size
        )));
    }
    tapspec.validate(s.t_max(), model.cfg.n_taps())?;

    let samples: Vec<(usize, usize, u32)> = split
        .train
        .iter()
        .chain(split.test.iter())
        .copied()
        .collect();
    let l_total: usize = tapspec
        .pairs
        .iter()
        .map(|&(_, f)| model.cfg.tap_channels(f))
        .sum();
    let bands = cube.bands();

    let rows: Vec<Vec<f64>> = samples
        .par_iter()
        .enumerate()
        .map(|(i, &(r, c, _))| -> Result<Vec<f64>> {
            let patch = hsio::extract_patch(cube, (r, c), p)?;
            let mut row = Vec::with_capacity(l_total);
            for &(t, f) in &tapspec.pairs {
                let eps = noise_for(tapspec.seed, i, t, f, (p, p, bands));
                let feat = extract_timestep_features(model, s, &patch, t, f, &eps)?;
                row.extend(center_vector(&feat));
            }
            Ok(row)
        })
        .collect::<Result<_>>()?;

    let mut vectors = Array2::zeros((samples.len(), l_total));
    for (i, row) in rows.iter().enumerate() {
        for (j, &v) in row.iter().enumerate() {
            vectors[[i, j]] = v;
        }
    }
    if vectors.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric(
            "feature repository contains non-finite values".into(),
        ));
    }
    Ok(FeatureRepository {
        vectors,
        labels: samples.iter().map(|&(_, _, k)| k).collect(),
        n_train: split.train.len(),
        provenance: RepoProvenance {
            checkpoint_id: checkpoint_id.to_string(),
            pairs: tapspec.pairs.clone(),
            noise_seed: tapspec.seed,
            patch_size: p,
        },
        pca: None,
    })
}

/// Principal axes of the training vectors via thin SVD of the centered
/// matrix. Component signs are canonicalized (largest-magnitude coefficient
/// positive) so fits are reproducible across numerically equivalent paths.
pub fn pca_fit(train: ArrayView2<'_, f64>, spec: &PcaSpec) -> Result<PcaTransform> {
    let (n, l) = train.dim();
    if n < 2 {
        return Err(Error::invalid(format!(
            "PCA needs at least 2 training vectors, got {n}"
        )));
    }
    let mut mean = vec![0.0; l];
    for row in train.rows() {
        for (m, v) in mean.iter_mut().zip(row.iter()) {
            *m += v;
        }
    }
    for m in mean.iter_mut() {
        *m /= n as f64;
    }
    let mut centered = nalgebra::DMatrix::<f64>::zeros(n, l);
    for i in 0..n {
        for j in 0..l {
            centered[(i, j)] = train[[i, j]] - mean[j];
        }
    }
    let svd = centered.svd(false, true);
    let v_t = svd
        .v_t
        .ok_or_else(|| Error::Numeric("SVD did not produce right singular vectors".into()))?;
    let sv = svd.singular_values;
    let total: f64 = sv.iter().map(|s| s * s).sum();
    if total == 0.0 {
        return Err(Error::invalid("PCA on constant data: total variance is zero"));
    }
    let tol = sv[0] * (n.max(l) as f64) * f64::EPSILON;
    let rank = sv.iter().filter(|&&s| s > tol).count();

    let k = match *spec {
        PcaSpec::Components(k) => {
            if k == 0 {
                return Err(Error::invalid("component count must be at least 1"));
            }
            if k > rank {
                return Err(Error::invalid(format!(
                    "{k} components requested but the training data attains rank {rank}"
                )));
            }
            k
        }
        PcaSpec::VarianceFraction(frac) => {
            if !(frac > 0.0 && frac <= 1.0) {
                return Err(Error::invalid(format!(
                    "variance fraction must lie in (0, 1], got {frac}"
                )));
            }
            let mut acc = 0.0;
            let mut k = rank;
            for (i, s) in sv.iter().take(rank).enumerate() {
                acc += s * s / total;
                if acc >= frac - 1e-12 {
                    k = i + 1;
                    break;
                }
            }
            k
        }
    };

    let mut components = Array2::zeros((k, l));
    for i in 0..k {
        for j in 0..l {
            components[[i, j]] = v_t[(i, j)];
        }
    }
    for mut row in components.rows_mut() {
        let (mut best, mut best_abs) = (0, 0.0);
        for (j, &v) in row.iter().enumerate() {
            if v.abs() > best_abs {
                best_abs = v.abs();
                best = j;
            }
        }
        if row[best] < 0.0 {
            row.mapv_inplace(|v| -v);
        }
    }
    let explained_ratio: Vec<f64> = sv.iter().take(k).map(|s| s * s / total).collect();
    Ok(PcaTransform {
        mean,
        components,
        explained_ratio,
    })
}

/// Project a repository into the fitted basis. Labels, split boundary, and
/// provenance carry over; the transform travels with the result.
pub fn pca_apply(t: &PcaTransform, repo: &FeatureRepository) -> Result<FeatureRepository> {
    let l = t.mean.len();
    if repo.feature_dim() != l {
        return Err(Error::shape(format!(
            "transform was fit on {l}-dimensional vectors, repository has {}",
            repo.feature_dim()
        )));
    }
    let mut centered = repo.vectors.clone();
    for mut row in centered.rows_mut() {
        for (v, m) in row.iter_mut().zip(t.mean.iter()) {
            *v -= m;
        }
    }
    let projected = centered.dot(&t.components.t());
    Ok(FeatureRepository {
        vectors: projected,
        labels: repo.labels.clone(),
        n_train: repo.n_train,
        provenance: repo.provenance.clone(),
        pca: Some(t.clone()),
    })
}

/// Back-projection from the PCA basis; exact when every component was kept.
pub fn pca_inverse(t: &PcaTransform, projected: &Array2<f64>) -> Result<Array2<f64>> {
    if projected.ncols() != t.components.nrows() {
        return Err(Error::shape(format!(
            "projected vectors have {} columns, transform holds {} components",
            projected.ncols(),
            t.components.nrows()
        )));
    }
    let mut back = projected.dot(&t.components);
    for mut row in back.rows_mut() {
        for (v, m) in row.iter_mut().zip(t.mean.iter()) {
            *v += m;
        }
    }
    Ok(back)
}

/// m timesteps spread over [1, T] as an arithmetic sequence starting at 1.
pub fn equal_interval_timesteps(m: usize, t_max: usize) -> Result<Vec<usize>> {
    if m == 0 {
        return Err(Error::invalid("need at least one timestep"));
    }
    if t_max == 0 {
        return Err(Error::invalid("schedule length must be positive"));
    }
    if m == 1 {
        return Ok(vec![1]);
    }
    let step = (t_max - 1) / (m - 1);
    Ok((0..m).map(|i| 1 + i * step).collect())
}

/// Between-class over within-class scatter of the rows, a scalar check that
/// features separate the labels at all.
pub fn fisher_ratio(vectors: ArrayView2<'_, f64>, labels: &[u32]) -> f64 {
    use std::collections::BTreeMap;
    let (n, l) = vectors.dim();
    assert_eq!(n, labels.len());
    let mut by_class: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for (i, &k) in labels.iter().enumerate() {
        by_class.entry(k).or_default().push(i);
    }
    let mut global = vec![0.0; l];
    for row in vectors.rows() {
        for (g, v) in global.iter_mut().zip(row.iter()) {
            *g += v / n as f64;
        }
    }
    let mut between = 0.0;
    let mut within = 0.0;
    for idx in by_class.values() {
        let nc = idx.len() as f64;
        let mut mu = vec![0.0; l];
        for &i in idx {
            for (m, v) in mu.iter_mut().zip(vectors.row(i).iter()) {
                *m += v / nc;
            }
        }
        between += nc / n as f64
            * mu.iter()
                .zip(global.iter())
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>();
        for &i in idx {
            within += vectors
                .row(i)
                .iter()
                .zip(mu.iter())
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                / n as f64;
        }
    }
    between / within
}

#[derive(Debug, Serialize, Deserialize)]
struct RepoManifest {
    schema_version: u32,
    checkpoint_id: String,
    pairs: Vec<(usize, usize)>,
    noise_seed: u64,
    patch_size: usize,
    n_train: usize,
    pca_components: Option<usize>,
}

pub fn save_repository(repo: &FeatureRepository, path: &std::path::Path) -> Result<()> {
    let manifest = RepoManifest {
        schema_version: REPO_SCHEMA,
        checkpoint_id: repo.provenance.checkpoint_id.clone(),
        pairs: repo.provenance.pairs.clone(),
        noise_seed: repo.provenance.noise_seed,
        patch_size: repo.provenance.patch_size,
        n_train: repo.n_train,
        pca_components: repo.pca.as_ref().map(|t| t.components.nrows()),
    };
    let mut w = NpzWriter::create(path)?;
    w.add_raw("manifest.json", store::to_json_text(&manifest)?.as_bytes())?;
    let (n, l) = repo.vectors.dim();
    w.add_f64(
        "vectors",
        &[n, l],
        repo.vectors.as_slice().expect("vectors are contiguous"),
    )?;
    w.add_u32("labels", &[n], &repo.labels)?;
    if let Some(t) = &repo.pca {
        let (k, lf) = t.components.dim();
        w.add_f64("pca.mean", &[lf], &t.mean)?;
        w.add_f64(
            "pca.components",
            &[k, lf],
            t.components.as_slice().expect("components are contiguous"),
        )?;
        w.add_f64("pca.explained", &[k], &t.explained_ratio)?;
    }
    w.finish()
}

pub fn load_repository(path: &std::path::Path) -> Result<FeatureRepository> {
    let mut r = NpzReader::open(path)?;
    let manifest: RepoManifest = serde_json::from_slice(&r.raw("manifest.json")?)
        .map_err(|e| Error::container(format!("repository manifest does not parse: {e}")))?;
    if manifest.schema_version != REPO_SCHEMA {
        return Err(Error::container(format!(
            "repository schema version {} unsupported; this build reads version {}",
            manifest.schema_version, REPO_SCHEMA
        )));
    }
    let (vshape, vdata) = r.f64("vectors")?;
    if vshape.len() != 2 {
        return Err(Error::shape(format!(
            "vectors entry must be 2-D, found shape {vshape:?}"
        )));
    }
    let vectors = Array2::from_shape_vec((vshape[0], vshape[1]), vdata)
        .map_err(|e| Error::shape(e.to_string()))?;
    let (lshape, labels) = r.u32("labels")?;
    if lshape != vec![vshape[0]] {
        return Err(Error::shape(format!(
            "labels shape {lshape:?} does not match {} vectors",
            vshape[0]
        )));
    }
    if manifest.n_train > vshape[0] {
        return Err(Error::container(format!(
            "manifest claims {} training rows but only {} rows exist",
            manifest.n_train, vshape[0]
        )));
    }
    let pca = if let Some(k) = manifest.pca_components {
        let (_, mean) = r.f64("pca.mean")?;
        let (cshape, cdata) = r.f64("pca.components")?;
        if cshape.len() != 2 || cshape[0] != k || cshape[1] != mean.len() {
            return Err(Error::shape(format!(
                "pca.components shape {cshape:?} inconsistent with {k} components over {} features",
                mean.len()
            )));
        }
        let (_, explained) = r.f64("pca.explained")?;
        Some(PcaTransform {
            mean,
            components: Array2::from_shape_vec((cshape[0], cshape[1]), cdata)
                .map_err(|e| Error::shape(e.to_string()))?,
            explained_ratio: explained,
        })
    } else {
        None
    };
    Ok(FeatureRepository {
        vectors,
        labels,
        n_train: manifest.n_train,
        provenance: RepoProvenance {
            checkpoint_id: manifest.checkpoint_id,
            pairs: manifest.pairs,
            noise_seed: manifest.noise_seed,
            patch_size: manifest.patch_size,
        },
        pca,
    })
}
