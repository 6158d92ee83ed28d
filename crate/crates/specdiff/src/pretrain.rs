//! Stage 1: unsupervised noise-prediction training on randomly cropped
//! patches, and the checkpoint container that carries the frozen weights
//! into feature extraction.
//!
//! Every source of randomness (patch positions, timestep draws, injected
//! noise, weight init) runs on its own stream derived from the config seed,
//! and all draws happen on the coordinating thread before the batch fans
//! out to workers. Per-sample gradients come back in sample order and are
//! summed sequentially, so the resulting bytes do not depend on worker
//! count.

use std::path::Path;

use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diffmath::{self, ScheduleParams};
use crate::error::{Error, Result};
use crate::hsio::{self, LabeledCube, NormalizeMode};
use crate::nn::adam::Adam;
use crate::nn::denoiser::{build_denoiser, layout_for, Denoiser, DenoiserConfig};
use crate::store::{self, NpzReader, NpzWriter};

pub const CHECKPOINT_SCHEMA: u32 = 1;

fn default_steps() -> usize {
    30_000
}
fn default_batch() -> usize {
    128
}
fn default_lr() -> f64 {
    1e-4
}
fn default_patch() -> usize {
    32
}
fn default_log_every() -> usize {
    100
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    #[serde(default = "default_steps")]
    pub steps: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default = "default_patch")]
    pub patch_size: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub schedule: ScheduleParams,
    #[serde(default = "default_log_every")]
    pub log_every: usize,
    /// 0 disables periodic snapshots; the final checkpoint always exists.
    #[serde(default)]
    pub checkpoint_every: usize,
    /// Provenance only: how the training cube was normalized. Recorded in
    /// the checkpoint so downstream stages can refuse mismatched inputs.
    #[serde(default)]
    pub normalization: NormalizeMode,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            steps: default_steps(),
            batch_size: default_batch(),
            learning_rate: default_lr(),
            patch_size: default_patch(),
            seed: 0,
            schedule: ScheduleParams::default(),
            log_every: default_log_every(),
            checkpoint_every: 0,
            normalization: NormalizeMode::default(),
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::invalid("steps must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be at least 1"));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::invalid(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub schema_version: u32,
    /// Container tag; classifier checkpoints reuse the container with their
    /// own tag, so loaders can reject the wrong artifact kind early.
    pub kind: String,
    pub denoiser: DenoiserConfig,
    pub schedule: ScheduleParams,
    pub steps: u64,
    pub seed: u64,
    pub in_channels: usize,
    pub normalization: NormalizeMode,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub manifest: CheckpointManifest,
    pub params: Vec<f64>,
}

impl Checkpoint {
    /// Rebuild the frozen model this checkpoint describes.
    pub fn instantiate(&self) -> Result<Denoiser> {
        self.manifest.denoiser.validate()?;
        let layout = layout_for(&self.manifest.denoiser);
        if layout.total() != self.params.len() {
            return Err(Error::Checkpoint(format!(
                "parameter vector holds {} values but the manifest config needs {}",
                self.params.len(),
                layout.total()
            )));
        }
        Ok(Denoiser {
            cfg: self.manifest.denoiser.clone(),
            layout,
            params: self.params.clone(),
        })
    }

    /// Like `instantiate`, but the caller states the config it expects.
    pub fn instantiate_as(&self, expect: &DenoiserConfig) -> Result<Denoiser> {
        if &self.manifest.denoiser != expect {
            return Err(Error::Checkpoint(format!(
                "checkpoint was trained with {:?}, caller expects {:?}",
                self.manifest.denoiser, expect
            )));
        }
        self.instantiate()
    }
}

pub enum TrainEvent<'a> {
    /// Emitted every `log_every` steps with that step's batch loss.
    Log { step: u64, loss: f64 },
    /// Emitted every `checkpoint_every` steps with a full snapshot.
    Snapshot {
        step: u64,
        checkpoint: &'a Checkpoint,
    },
}

pub struct PretrainOutcome {
    pub checkpoint: Checkpoint,
    /// (step, batch loss) for every optimizer step, in order.
    pub trace: Vec<(u64, f64)>,
}

pub fn pretrain(
    cube: &LabeledCube,
    dcfg: &DenoiserConfig,
    cfg: &PretrainConfig,
) -> Result<PretrainOutcome> {
    pretrain_observed(cube, dcfg, cfg, |_| Ok(()))
}

pub fn pretrain_observed(
    cube: &LabeledCube,
    dcfg: &DenoiserConfig,
    cfg: &PretrainConfig,
    mut observe: impl FnMut(TrainEvent<'_>) -> Result<()>,
) -> Result<PretrainOutcome> {
    cfg.validate()?;
    dcfg.validate()?;
    if dcfg.patch_size != cfg.patch_size {
        return Err(Error::Config(format!(
            "pretrain patch_size {} disagrees with denoiser patch_size {}",
            cfg.patch_size, dcfg.patch_size
        )));
    }
    if dcfg.in_channels != cube.bands() {
        return Err(Error::Config(format!(
            "denoiser expects {} channels but the cube has {} bands",
            dcfg.in_channels,
            cube.bands()
        )));
    }
    let schedule = cfg.schedule.build()?;
    let t_max = schedule.t_max();
    let p = cfg.patch_size;
    let bands = cube.bands();

    let mut model = build_denoiser(dcfg, store::derive_seed(cfg.seed, "pretrain/init"))?;
    let mut opt = Adam::new(cfg.learning_rate, model.param_count());
    let mut pos_rng =
        ChaCha8Rng::seed_from_u64(store::derive_seed(cfg.seed, "pretrain/positions"));
    let mut t_rng = ChaCha8Rng::seed_from_u64(store::derive_seed(cfg.seed, "pretrain/timesteps"));
    let mut eps_rng = ChaCha8Rng::seed_from_u64(store::derive_seed(cfg.seed, "pretrain/noise"));

    let mut trace = Vec::with_capacity(cfg.steps);
    let mut last_finite = f64::NAN;
    for step in 1..=cfg.steps as u64 {
        let positions =
            hsio::sample_patch_positions(cube.height(), cube.width(), cfg.batch_size, &mut pos_rng);
        let mut batch = Vec::with_capacity(cfg.batch_size);
        for coord in positions {
            let patch = hsio::extract_patch(cube, coord, p)?;
            let t = t_rng.random_range(1..=t_max);
            let eps = Array3::from_shape_fn((p, p, bands), |_| {
                eps_rng.sample::<f64, _>(StandardNormal)
            });
            let x_t = diffmath::forward_noise(&schedule, &patch.values, t, &eps)?;
            batch.push((x_t, t, eps));
        }

        let results: Vec<(f64, Vec<f64>)> = batch
            .par_iter()
            .map(|(x_t, t, eps)| model.loss_and_grad(x_t, *t, eps))
            .collect::<Result<_>>()?;

        let inv = 1.0 / cfg.batch_size as f64;
        let mut loss = 0.0;
        let mut grad = vec![0.0; model.param_count()];
        for (l, g) in &results {
            loss += l * inv;
            for (acc, v) in grad.iter_mut().zip(g.iter()) {
                *acc += v * inv;
            }
        }
        if !loss.is_finite() {
            return Err(Error::Numeric(format!(
                "batch loss diverged at step {step}; last finite loss was {last_finite}"
            )));
        }
        last_finite = loss;
        opt.step(&mut model.params, &grad);
        trace.push((step, loss));

        if cfg.log_every > 0 && step % cfg.log_every as u64 == 0 {
            observe(TrainEvent::Log { step, loss })?;
        }
        if cfg.checkpoint_every > 0 && step % cfg.checkpoint_every as u64 == 0 {
            let snapshot = assemble(dcfg, cfg, step, &model);
            observe(TrainEvent::Snapshot {
                step,
                checkpoint: &snapshot,
            })?;
        }
    }

    let steps = cfg.steps as u64;
    Ok(PretrainOutcome {
        checkpoint: assemble(dcfg, cfg, steps, &model),
        trace,
    })
}

fn assemble(dcfg: &DenoiserConfig, cfg: &PretrainConfig, steps: u64, model: &Denoiser) -> Checkpoint {
    Checkpoint {
        manifest: CheckpointManifest {
            schema_version: CHECKPOINT_SCHEMA,
            kind: "denoiser".into(),
            denoiser: dcfg.clone(),
            schedule: cfg.schedule.clone(),
            steps,
            seed: cfg.seed,
            in_channels: dcfg.in_channels,
            normalization: cfg.normalization,
        },
        params: model.params.clone(),
    }
}

/// One archive: `manifest.json` plus one named array per parameter tensor.
pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    let layout = layout_for(&ckpt.manifest.denoiser);
    if layout.total() != ckpt.params.len() {
        return Err(Error::Checkpoint(format!(
            "cannot save: {} parameter values for a layout of {}",
            ckpt.params.len(),
            layout.total()
        )));
    }
    let mut w = NpzWriter::create(path)?;
    w.add_raw("manifest.json", store::to_json_text(&ckpt.manifest)?.as_bytes())?;
    for spec in layout.specs() {
        w.add_f64(
            &spec.name,
            &spec.shape,
            &ckpt.params[spec.offset..spec.offset + spec.len()],
        )?;
    }
    w.finish()
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mut r = NpzReader::open(path)?;
    let raw = r.raw("manifest.json")?;
    let manifest: CheckpointManifest = serde_json::from_slice(&raw)
        .map_err(|e| Error::Checkpoint(format!("manifest does not parse: {e}")))?;
    if manifest.schema_version != CHECKPOINT_SCHEMA {
        return Err(Error::Checkpoint(format!(
            "checkpoint schema version {} unsupported; this build reads version {}",
            manifest.schema_version, CHECKPOINT_SCHEMA
        )));
    }
    if manifest.kind != "denoiser" {
        return Err(Error::Checkpoint(format!(
            "expected a denoiser checkpoint, found kind \"{}\"",
            manifest.kind
        )));
    }
    manifest.denoiser.validate()?;
    let layout = layout_for(&manifest.denoiser);
    let mut params = vec![0.0; layout.total()];
    for spec in layout.specs() {
        let (shape, data) = r.f64(&spec.name)?;
        if shape != spec.shape {
            return Err(Error::Checkpoint(format!(
                "tensor {} has shape {:?}, manifest config implies {:?}",
                spec.name, shape, spec.shape
            )));
        }
        params[spec.offset..spec.offset + spec.len()].copy_from_slice(&data);
    }
    let expected: std::collections::BTreeSet<String> = layout
        .specs()
        .iter()
        .map(|s| s.name.clone())
        .chain(std::iter::once("manifest.json".to_string()))
        .collect();
    let extra: Vec<String> = r
        .names()
        .into_iter()
        .filter(|n| !expected.contains(n))
        .collect();
    if !extra.is_empty() {
        return Err(Error::Checkpoint(format!(
            "checkpoint holds tensors the manifest config does not name: {extra:?}"
        )));
    }
    Ok(Checkpoint { manifest, params })
}

/// Short content id for provenance records: leading hex of the file digest.
pub fn checkpoint_id(path: &Path) -> Result<String> {
    Ok(store::sha256_file_hex(path)?[..12].to_string())
}

/// Loss trace as `step,loss` lines.
pub fn trace_text(trace: &[(u64, f64)]) -> String {
    let mut out = String::with_capacity(trace.len() * 24);
    for (step, loss) in trace {
        out.push_str(&format!("{step},{loss}\n"));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hsio::SyntheticSpec;

    fn small_cube() -> LabeledCube {
        hsio::make_synthetic(&SyntheticSpec {
            height: 24,
            width: 24,
            bands: 4,
            n_classes: 3,
            seed: 11,
        })
        .unwrap()
    }

    fn tiny_dcfg() -> DenoiserConfig {
        DenoiserConfig {
            in_channels: 4,
            base_width: 4,
            depth: 3,
            time_embed_dim: 8,
            patch_size: 8,
        }
    }

    fn quick_cfg(steps: usize) -> PretrainConfig {
        PretrainConfig {
            steps,
            batch_size: 4,
            learning_rate: 1e-3,
            patch_size: 8,
            seed: 5,
            schedule: ScheduleParams {
                t_max: 50,
                ..ScheduleParams::default()
            },
            log_every: 0,
            checkpoint_every: 0,
            normalization: NormalizeMode::PerBandMinMax,
        }
    }

    #[test]
    fn single_step_yields_single_record() {
        let cube = small_cube();
        let out = pretrain(&cube, &tiny_dcfg(), &quick_cfg(1)).unwrap();
        assert_eq!(out.trace.len(), 1);
        assert_eq!(out.trace[0].0, 1);
        assert_eq!(out.checkpoint.manifest.steps, 1);
        assert!(out.trace[0].1.is_finite());
    }

    #[test]
    fn same_seed_reproduces_trace_and_weights() {
        let cube = small_cube();
        let a = pretrain(&cube, &tiny_dcfg(), &quick_cfg(5)).unwrap();
        let b = pretrain(&cube, &tiny_dcfg(), &quick_cfg(5)).unwrap();
        assert_eq!(a.trace, b.trace);
        assert_eq!(a.checkpoint.params, b.checkpoint.params);
        let mut other = quick_cfg(5);
        other.seed = 6;
        let c = pretrain(&cube, &tiny_dcfg(), &other).unwrap();
        assert_ne!(a.trace, c.trace);
    }

    #[test]
    fn loss_descends_from_the_zero_prediction_baseline() {
        // The zero-initialized head starts exactly at the predict-zero
        // baseline, the mean square of the injected noise.
        let cube = small_cube();
        let out = pretrain(&cube, &tiny_dcfg(), &quick_cfg(150)).unwrap();
        let first: f64 = out.trace[..5].iter().map(|(_, l)| l).sum::<f64>() / 5.0;
        let last: f64 = out.trace[120..].iter().map(|(_, l)| l).sum::<f64>() / 30.0;
        assert!(
            (first - 1.0).abs() < 0.35,
            "initial loss {first} should sit near the noise variance"
        );
        assert!(last < first, "no descent: first {first}, last {last}");
    }

    #[test]
    fn divergence_reports_step_and_last_finite_loss() {
        let cube = small_cube();
        let mut cfg = quick_cfg(40);
        // Group norm keeps merely-huge weights finite; overflow needs a step
        // size whose squares exceed the f64 range.
        cfg.learning_rate = 1e200;
        let err = match pretrain(&cube, &tiny_dcfg(), &cfg) {
            Err(e) => e.to_string(),
            Ok(_) => panic!("expected divergence"),
        };
        assert!(err.contains("step"), "{err}");
    }

    #[test]
    fn bad_configs_are_rejected() {
        let cube = small_cube();
        let mut cfg = quick_cfg(1);
        cfg.steps = 0;
        assert!(pretrain(&cube, &tiny_dcfg(), &cfg).is_err());
        let mut cfg = quick_cfg(1);
        cfg.batch_size = 0;
        assert!(pretrain(&cube, &tiny_dcfg(), &cfg).is_err());
        let mut cfg = quick_cfg(1);
        cfg.learning_rate = 0.0;
        assert!(pretrain(&cube, &tiny_dcfg(), &cfg).is_err());
        let mut cfg = quick_cfg(1);
        cfg.patch_size = 16; // disagrees with the denoiser config
        assert!(pretrain(&cube, &tiny_dcfg(), &cfg).is_err());
        let mut dcfg = tiny_dcfg();
        dcfg.in_channels = 7; // cube has 4 bands
        assert!(pretrain(&cube, &dcfg, &quick_cfg(1)).is_err());
    }

    #[test]
    fn observer_sees_logs_and_snapshots() {
        let cube = small_cube();
        let mut cfg = quick_cfg(12);
        cfg.log_every = 4;
        cfg.checkpoint_every = 5;
        let mut logs = Vec::new();
        let mut snaps = Vec::new();
        pretrain_observed(&cube, &tiny_dcfg(), &cfg, |ev| {
            match ev {
                TrainEvent::Log { step, .. } => logs.push(step),
                TrainEvent::Snapshot { step, checkpoint } => {
                    assert_eq!(checkpoint.manifest.steps, step);
                    snaps.push(step);
                }
            }
            Ok(())
        })
        .unwrap();
        assert_eq!(logs, vec![4, 8, 12]);
        assert_eq!(snaps, vec![5, 10]);
    }

    #[test]
    fn checkpoint_round_trips_bitwise() {
        let cube = small_cube();
        let out = pretrain(&cube, &tiny_dcfg(), &quick_cfg(3)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.npz");
        save_checkpoint(&out.checkpoint, &path).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(back.manifest, out.checkpoint.manifest);
        assert_eq!(back.params, out.checkpoint.params);
        assert_eq!(checkpoint_id(&path).unwrap().len(), 12);
    }

    #[test]
    fn loaded_model_replays_validation_loss_exactly() {
        let cube = small_cube();
        let out = pretrain(&cube, &tiny_dcfg(), &quick_cfg(10)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.npz");
        save_checkpoint(&out.checkpoint, &path).unwrap();
        let loaded = load_checkpoint(&path).unwrap().instantiate().unwrap();
        let direct = out.checkpoint.instantiate().unwrap();

        let schedule = quick_cfg(10).schedule.build().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let mut total_a = 0.0;
        let mut total_b = 0.0;
        for coord in hsio::sample_patch_positions(24, 24, 6, &mut rng) {
            let patch = hsio::extract_patch(&cube, coord, 8).unwrap();
            let eps = Array3::from_shape_fn((8, 8, 4), |_| rng.sample::<f64, _>(StandardNormal));
            let t = rng.random_range(1..=50);
            let x_t = diffmath::forward_noise(&schedule, &patch.values, t, &eps).unwrap();
            let pa = direct.predict_noise(&x_t, t, false).unwrap().eps_pred;
            let pb = loaded.predict_noise(&x_t, t, false).unwrap().eps_pred;
            total_a += diffmath::diffusion_loss(&eps, &pa).unwrap();
            total_b += diffmath::diffusion_loss(&eps, &pb).unwrap();
        }
        assert_eq!(total_a.to_bits(), total_b.to_bits());
        assert!((total_a / 6.0) < 2.0);
    }

    #[test]
    fn schema_and_kind_mismatches_are_named() {
        let cube = small_cube();
        let out = pretrain(&cube, &tiny_dcfg(), &quick_cfg(1)).unwrap();
        let dir = tempfile::tempdir().unwrap();

        let mut hacked = out.checkpoint.clone();
        hacked.manifest.schema_version = 9;
        let p1 = dir.path().join("v9.npz");
        save_checkpoint(&hacked, &p1).unwrap();
        let err = load_checkpoint(&p1).unwrap_err().to_string();
        assert!(err.contains('9') && err.contains('1'), "{err}");

        let mut wrong_kind = out.checkpoint.clone();
        wrong_kind.manifest.kind = "classifier".into();
        let p2 = dir.path().join("kind.npz");
        save_checkpoint(&wrong_kind, &p2).unwrap();
        let err = load_checkpoint(&p2).unwrap_err().to_string();
        assert!(err.contains("classifier"), "{err}");
    }

    #[test]
    fn missing_tensor_is_listed() {
        let cube = small_cube();
        let out = pretrain(&cube, &tiny_dcfg(), &quick_cfg(1)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let full = dir.path().join("full.npz");
        save_checkpoint(&out.checkpoint, &full).unwrap();

        // Copy all entries except one tensor.
        let mut r = NpzReader::open(&full).unwrap();
        let names = r.names();
        let drop = "mid.conv1.w";
        assert!(names.iter().any(|n| n == drop));
        let partial = dir.path().join("partial.npz");
        let mut w = NpzWriter::create(&partial).unwrap();
        for name in names.iter().filter(|n| n.as_str() != drop) {
            let bytes = r.raw(name).unwrap();
            w.add_raw(name, &bytes).unwrap();
        }
        w.finish().unwrap();
        let err = load_checkpoint(&partial).unwrap_err().to_string();
        assert!(err.contains("mid.conv1.w"), "{err}");
    }

    #[test]
    fn depth_edit_invalidates_tensor_set() {
        let cube = small_cube();
        let out = pretrain(&cube, &tiny_dcfg(), &quick_cfg(1)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let full = dir.path().join("full.npz");
        save_checkpoint(&out.checkpoint, &full).unwrap();

        // Rewrite the manifest claiming depth 2; stored tensors no longer
        // match the implied layout.
        let mut r = NpzReader::open(&full).unwrap();
        let mut manifest: CheckpointManifest =
            serde_json::from_slice(&r.raw("manifest.json").unwrap()).unwrap();
        manifest.denoiser.depth = 2;
        let hacked = dir.path().join("hacked.npz");
        let mut w = NpzWriter::create(&hacked).unwrap();
        w.add_raw(
            "manifest.json",
            store::to_json_text(&manifest).unwrap().as_bytes(),
        )
        .unwrap();
        for name in r.names().into_iter().filter(|n| n != "manifest.json") {
            let bytes = r.raw(&name).unwrap();
            w.add_raw(&name, &bytes).unwrap();
        }
        w.finish().unwrap();
        assert!(load_checkpoint(&hacked).is_err());

        // A caller that states its expected config is also refused.
        let loaded = load_checkpoint(&full).unwrap();
        let mut expect = tiny_dcfg();
        expect.depth = 2;
        assert!(loaded.instantiate_as(&expect).is_err());
        assert!(loaded.instantiate_as(&tiny_dcfg()).is_ok());
    }

    #[test]
    fn trace_text_is_step_comma_loss() {
        let text = trace_text(&[(1, 0.5), (2, 0.25)]);
        assert_eq!(text, "1,0.5\n2,0.25\n");
    }
}
