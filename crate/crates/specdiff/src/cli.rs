//! Pipeline orchestration behind the `specdiff` binary: a declarative TOML
//! run config, one output directory per run, and resumable stages keyed by
//! content hashes.
//!
//! Stage seeds all derive from the single master seed with fixed labels, so
//! a stage rerun in isolation, inside `run-all`, or inside an ablation cell
//! produces identical bytes. Nothing here reads entropy from the
//! environment; the only environment overrides are SPECDIFF_OUT (output
//! directory) and SPECDIFF_THREADS (worker count), never hyperparameters.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::classifier::{self, ClassifierConfig, TrainConfig};
use crate::error::{Error, Result};
use crate::evalkit;
use crate::features::{self, FeatureRepository, PcaSpec, TapSpec};
use crate::hsio::{self, LabeledCube, NormalizeMode, SampleSplit, SplitSpec, SyntheticSpec};
use crate::nn::denoiser::DenoiserConfig;
use crate::pretrain::{self, PretrainConfig};
use crate::store::{self, StageKeys};

pub const FILE_MANIFEST: &str = "manifest.json";
pub const FILE_NORMALIZED: &str = "normalized.npz";
pub const FILE_CLASSES: &str = "normalized.classes.txt";
pub const FILE_SPLIT: &str = "split.txt";
pub const FILE_CHECKPOINT: &str = "checkpoint.npz";
pub const FILE_LOSS_TRACE: &str = "loss_trace.csv";
pub const FILE_FEATURES: &str = "features.npz";
pub const FILE_CLASSIFIER: &str = "classifier.npz";
pub const FILE_TRAIN_STATS: &str = "train_stats.csv";
pub const FILE_REPORT_TEXT: &str = "report.txt";
pub const FILE_REPORT_JSON: &str = "report.json";
pub const FILE_MAP: &str = "map.png";
pub const FILE_TRUTH: &str = "truth.png";
pub const FILE_ABLATION_TABLE: &str = "ablation.txt";
pub const FILE_ABLATION_CSV: &str = "ablation.csv";
pub const FILE_ABLATION_JSON: &str = "ablation.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSection {
    /// Container with the 3-D "data" entry.
    pub data: PathBuf,
    /// Container with the 2-D "labels" entry; defaults to the data container.
    #[serde(default)]
    pub labels: Option<PathBuf>,
    #[serde(default)]
    pub normalization: NormalizeMode,
}

/// Exactly one of the two fields must be set.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSection {
    #[serde(default)]
    pub per_class_counts: Option<Vec<usize>>,
    #[serde(default)]
    pub fraction: Option<f64>,
}

impl SplitSection {
    pub fn to_spec(&self) -> Result<SplitSpec> {
        match (&self.per_class_counts, self.fraction) {
            (Some(counts), None) => {
                if counts.is_empty() {
                    return Err(Error::Config(
                        "split.per_class_counts must not be empty".into(),
                    ));
                }
                Ok(SplitSpec::PerClassCounts(counts.clone()))
            }
            (None, Some(f)) => {
                if !(f > 0.0 && f <= 1.0) {
                    return Err(Error::Config(format!(
                        "split.fraction is {f}, expected a value in (0, 1]"
                    )));
                }
                Ok(SplitSpec::Fraction(f))
            }
            (None, None) => Err(Error::Config(
                "split needs either per_class_counts or fraction".into(),
            )),
            (Some(_), Some(_)) => Err(Error::Config(
                "split.per_class_counts and split.fraction are mutually exclusive".into(),
            )),
        }
    }
}

/// Denoiser architecture. Input channels always come from the cube and the
/// patch size from the pretrain section, so neither can contradict the data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DenoiserSection {
    pub base_width: usize,
    pub depth: usize,
    pub time_embed_dim: usize,
}

impl Default for DenoiserSection {
    fn default() -> Self {
        // Inherit the module's own serde defaults rather than restating them.
        let d: DenoiserConfig =
            serde_json::from_str("{\"in_channels\": 1}").expect("defaults deserialize");
        DenoiserSection {
            base_width: d.base_width,
            depth: d.depth,
            time_embed_dim: d.time_embed_dim,
        }
    }
}

impl DenoiserSection {
    pub fn to_config(&self, in_channels: usize, patch_size: usize) -> DenoiserConfig {
        DenoiserConfig {
            in_channels,
            base_width: self.base_width,
            depth: self.depth,
            time_embed_dim: self.time_embed_dim,
            patch_size,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeatureSection {
    /// (timestep, decoder tap) pairs, concatenated in order.
    pub pairs: Vec<(usize, usize)>,
    #[serde(default)]
    pub pca: Option<PcaSpec>,
}

/// One run, declaratively. Relative paths resolve against the config file's
/// directory; `--seed` and `--out` override master_seed and out_dir. Stage
/// seed fields inside the nested sections are ignored: every stage seed
/// derives from master_seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub name: String,
    pub out_dir: PathBuf,
    #[serde(default)]
    pub master_seed: u64,
    pub dataset: DatasetSection,
    #[serde(default)]
    pub split: SplitSection,
    #[serde(default)]
    pub denoiser: DenoiserSection,
    #[serde(default)]
    pub pretrain: PretrainConfig,
    pub features: FeatureSection,
    pub classifier: ClassifierConfig,
    #[serde(default)]
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg: RunConfig = toml::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.resolve_paths(path.parent().unwrap_or(Path::new(".")));
        cfg.validate()?;
        Ok(cfg)
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.dataset.data);
        if let Some(labels) = &mut self.dataset.labels {
            fix(labels);
        }
        fix(&mut self.out_dir);
    }

    /// Structural checks with field-level messages. Dataset file existence
    /// is checked by the stages that read them, so configs for runs whose
    /// inputs are generated later still validate.
    pub fn validate(&self) -> Result<()> {
        if self.name.is_empty() {
            return Err(Error::Config("name must not be empty".into()));
        }
        if self.out_dir.as_os_str().is_empty() {
            return Err(Error::Config("out_dir must not be empty".into()));
        }
        self.split.to_spec()?;
        let section = |field: &str, e: Error| Error::Config(format!("{field}: {e}"));
        self.pretrain
            .validate()
            .map_err(|e| section("pretrain", e))?;
        self.denoiser
            .to_config(1, self.pretrain.patch_size)
            .validate()
            .map_err(|e| section("denoiser", e))?;
        self.classifier
            .validate()
            .map_err(|e| section("classifier", e))?;
        self.train.validate().map_err(|e| section("train", e))?;

        if self.features.pairs.is_empty() {
            return Err(Error::Config(
                "features.pairs needs at least one [timestep, tap] entry".into(),
            ));
        }
        for (i, &(t, f)) in self.features.pairs.iter().enumerate() {
            if t == 0 || t > self.pretrain.schedule.t_max {
                return Err(Error::Config(format!(
                    "features.pairs[{i}]: timestep {t} outside 1..={}",
                    self.pretrain.schedule.t_max
                )));
            }
            if f >= self.denoiser.depth {
                return Err(Error::Config(format!(
                    "features.pairs[{i}]: tap {f} does not exist in a depth-{} denoiser",
                    self.denoiser.depth
                )));
            }
        }
        match self.features.pca {
            Some(PcaSpec::Components(0)) => {
                return Err(Error::Config(
                    "features.pca: component count must be at least 1".into(),
                ))
            }
            Some(PcaSpec::VarianceFraction(v)) if !(v > 0.0 && v <= 1.0) => {
                return Err(Error::Config(format!(
                    "features.pca: variance fraction {v} outside (0, 1]"
                )))
            }
            _ => {}
        }
        Ok(())
    }
}

/// Write the deterministic synthetic benchmark cube (plus its class-name
/// sidecar) to a container. Same spec, same bytes.
pub fn write_synthetic_cube(spec: &SyntheticSpec, out: &Path) -> Result<()> {
    let cube = hsio::make_synthetic(spec)?;
    if let Some(parent) = out.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    hsio::save_cube(&cube, out)?;
    std::fs::write(
        out.with_extension("classes.txt"),
        cube.class_names.join("\n") + "\n",
    )?;
    Ok(())
}

/// Executes pipeline stages against one run directory. Each stage records a
/// content key in the run manifest; a rerun whose key matches and whose
/// outputs still exist is skipped unless forced.
pub struct Runner {
    pub cfg: RunConfig,
    pub dir: PathBuf,
    force: bool,
    /// Config path as the user wrote it, echoed in "run this first" hints.
    hint: String,
}

impl Runner {
    pub fn new(cfg: RunConfig) -> Runner {
        let dir = cfg.out_dir.clone();
        Runner {
            cfg,
            dir,
            force: false,
            hint: "<config>".into(),
        }
    }

    pub fn with_force(mut self, force: bool) -> Runner {
        self.force = force;
        self
    }

    pub fn with_hint(mut self, hint: String) -> Runner {
        self.hint = hint;
        self
    }

    fn seed(&self, stage: &str) -> u64 {
        store::derive_seed(self.cfg.master_seed, stage)
    }

    /// Absolute location of a named artifact in the run directory.
    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    fn manifest(&self) -> StageKeys {
        store::load_json(&self.path(FILE_MANIFEST)).unwrap_or_default()
    }

    fn record(&self, stage: &str, key: &str) -> Result<()> {
        let mut m = self.manifest();
        m.insert(stage.to_string(), key.to_string());
        store::save_json(&self.path(FILE_MANIFEST), &m)
    }

    fn fresh(&self, stage: &str, key: &str, outputs: &[&str]) -> bool {
        if self.force {
            return false;
        }
        self.manifest().get(stage).is_some_and(|k| k == key)
            && outputs.iter().all(|name| self.path(name).exists())
    }

    fn skip_line(&self, stage: &str) {
        println!("[{stage}] up to date, skipping (--force reruns)");
    }

    fn require(&self, name: &str, what: &str, producer: &str) -> Result<PathBuf> {
        let p = self.path(name);
        if p.exists() {
            Ok(p)
        } else {
            Err(Error::Missing(format!(
                "no {what} at {}; run `specdiff {producer} --config {}` first",
                p.display(),
                self.hint
            )))
        }
    }

    fn labels_path(&self) -> PathBuf {
        self.cfg
            .dataset
            .labels
            .clone()
            .unwrap_or_else(|| self.cfg.dataset.data.clone())
    }

    fn split_of(&self, cube: &LabeledCube) -> Result<SampleSplit> {
        hsio::split_samples(cube, &self.cfg.split.to_spec()?, self.seed("split"))
    }

    fn class_names(&self) -> Vec<String> {
        std::fs::read_to_string(self.path(FILE_CLASSES))
            .map(|t| t.lines().map(str::to_string).collect())
            .unwrap_or_default()
    }

    fn key_of(parts: &[(&str, String)]) -> String {
        let joined: String = parts
            .iter()
            .map(|(k, v)| format!("{k}={v};"))
            .collect();
        store::sha256_hex(joined.as_bytes())
    }

    fn json_of<T: Serialize>(v: &T) -> String {
        serde_json::to_string(v).expect("config types serialize")
    }

    /// Load, sanity-check, normalize, and split the dataset.
    pub fn ingest(&self) -> Result<()> {
        std::fs::create_dir_all(&self.dir)?;
        let data = self.cfg.dataset.data.clone();
        let labels = self.labels_path();
        if !data.exists() {
            return Err(Error::Missing(format!(
                "dataset container {} does not exist; for a synthetic cube run \
                 `specdiff make-synthetic --out {}`",
                data.display(),
                data.display()
            )));
        }
        if !labels.exists() {
            return Err(Error::Missing(format!(
                "label container {} does not exist",
                labels.display()
            )));
        }
        let key = Self::key_of(&[
            ("stage", "ingest/v1".into()),
            ("data", store::sha256_file_hex(&data)?),
            ("labels", store::sha256_file_hex(&labels)?),
            ("normalization", self.cfg.dataset.normalization.to_string()),
            ("split", Self::json_of(&self.cfg.split)),
            ("split_seed", self.seed("split").to_string()),
            ("n_classes", self.cfg.classifier.n_classes.to_string()),
        ]);
        let outputs = [FILE_NORMALIZED, FILE_SPLIT, FILE_CLASSES];
        if self.fresh("ingest", &key, &outputs) {
            self.skip_line("ingest");
            return Ok(());
        }

        let cube = hsio::load_cube(&data, &labels)?;
        if cube.n_classes() != self.cfg.classifier.n_classes {
            return Err(Error::Config(format!(
                "classifier.n_classes is {} but the dataset has {} classes",
                self.cfg.classifier.n_classes,
                cube.n_classes()
            )));
        }
        let cube = hsio::normalize(cube, self.cfg.dataset.normalization)?;
        let split = self.split_of(&cube)?;
        hsio::save_cube(&cube, &self.path(FILE_NORMALIZED))?;
        std::fs::write(self.path(FILE_SPLIT), split.to_audit_text())?;
        std::fs::write(
            self.path(FILE_CLASSES),
            cube.class_names.join("\n") + "\n",
        )?;
        self.record("ingest", &key)?;
        println!(
            "[ingest] {}x{}x{} cube, {} classes; {} train / {} test",
            cube.height(),
            cube.width(),
            cube.bands(),
            cube.n_classes(),
            split.train.len(),
            split.test.len()
        );
        Ok(())
    }

    /// Noise-prediction training on the normalized cube.
    pub fn pretrain(&self) -> Result<()> {
        std::fs::create_dir_all(&self.dir)?;
        let norm = self.require(FILE_NORMALIZED, "ingested cube", "ingest")?;
        let mut pcfg = self.cfg.pretrain.clone();
        pcfg.seed = self.seed("pretrain");
        pcfg.normalization = self.cfg.dataset.normalization;
        let key = Self::key_of(&[
            ("stage", "pretrain/v1".into()),
            ("cube", store::sha256_file_hex(&norm)?),
            ("denoiser", Self::json_of(&self.cfg.denoiser)),
            ("pretrain", Self::json_of(&pcfg)),
        ]);
        let outputs = [FILE_CHECKPOINT, FILE_LOSS_TRACE];
        if self.fresh("pretrain", &key, &outputs) {
            self.skip_line("pretrain");
            return Ok(());
        }

        let cube = hsio::load_cube(&norm, &norm)?;
        let dcfg = self
            .cfg
            .denoiser
            .to_config(cube.bands(), pcfg.patch_size);
        let out = pretrain::pretrain(&cube, &dcfg, &pcfg)?;
        pretrain::save_checkpoint(&out.checkpoint, &self.path(FILE_CHECKPOINT))?;
        std::fs::write(self.path(FILE_LOSS_TRACE), pretrain::trace_text(&out.trace))?;
        self.record("pretrain", &key)?;
        let last = out.trace.last().map(|&(_, l)| l).unwrap_or(f64::NAN);
        println!(
            "[pretrain] {} steps, {} params, final batch loss {last:.4}",
            pcfg.steps,
            out.checkpoint.params.len()
        );
        Ok(())
    }

    fn extract_repository(
        &self,
        cube: &LabeledCube,
        split: &SampleSplit,
        ckpt: &pretrain::Checkpoint,
        ckpt_id: &str,
        pairs: &[(usize, usize)],
    ) -> Result<FeatureRepository> {
        let model = ckpt.instantiate()?;
        let schedule = ckpt.manifest.schedule.build()?;
        let tapspec = TapSpec {
            pairs: pairs.to_vec(),
            seed: self.seed("features"),
        };
        let mut repo = features::build_repository(
            &model,
            &schedule,
            cube,
            split,
            &tapspec,
            model.cfg.patch_size,
            ckpt_id,
        )?;
        if let Some(pca) = &self.cfg.features.pca {
            let transform = features::pca_fit(repo.train_vectors(), pca)?;
            repo = features::pca_apply(&transform, &repo)?;
        }
        Ok(repo)
    }

    /// Frozen-decoder feature extraction into the per-pixel repository.
    pub fn extract(&self) -> Result<()> {
        std::fs::create_dir_all(&self.dir)?;
        let ckpt_path = self.require(FILE_CHECKPOINT, "pretraining checkpoint", "pretrain")?;
        let norm = self.require(FILE_NORMALIZED, "ingested cube", "ingest")?;
        let key = Self::key_of(&[
            ("stage", "extract/v1".into()),
            ("checkpoint", store::sha256_file_hex(&ckpt_path)?),
            ("cube", store::sha256_file_hex(&norm)?),
            ("pairs", format!("{:?}", self.cfg.features.pairs)),
            ("noise_seed", self.seed("features").to_string()),
            ("pca", Self::json_of(&self.cfg.features.pca)),
            ("split", Self::json_of(&self.cfg.split)),
            ("split_seed", self.seed("split").to_string()),
        ]);
        if self.fresh("extract", &key, &[FILE_FEATURES]) {
            self.skip_line("extract");
            return Ok(());
        }

        let cube = hsio::load_cube(&norm, &norm)?;
        let split = self.split_of(&cube)?;
        let ckpt = pretrain::load_checkpoint(&ckpt_path)?;
        let ckpt_id = pretrain::checkpoint_id(&ckpt_path)?;
        let repo =
            self.extract_repository(&cube, &split, &ckpt, &ckpt_id, &self.cfg.features.pairs)?;
        features::save_repository(&repo, &self.path(FILE_FEATURES))?;
        self.record("extract", &key)?;
        println!(
            "[extract] {} samples x {} features from checkpoint {ckpt_id}",
            repo.n_samples(),
            repo.feature_dim()
        );
        Ok(())
    }

    fn stage_classifier_cfg(&self) -> ClassifierConfig {
        let mut c = self.cfg.classifier.clone();
        c.seed = self.seed("classifier-init");
        c
    }

    fn stage_train_cfg(&self) -> TrainConfig {
        let mut t = self.cfg.train.clone();
        t.seed = self.seed("train");
        t
    }

    /// Supervised training on the frozen features.
    pub fn train(&self) -> Result<()> {
        std::fs::create_dir_all(&self.dir)?;
        let feat = self.require(FILE_FEATURES, "feature repository", "extract")?;
        let ccfg = self.stage_classifier_cfg();
        let tcfg = self.stage_train_cfg();
        let key = Self::key_of(&[
            ("stage", "train/v1".into()),
            ("features", store::sha256_file_hex(&feat)?),
            ("classifier", Self::json_of(&ccfg)),
            ("train", Self::json_of(&tcfg)),
        ]);
        let outputs = [FILE_CLASSIFIER, FILE_TRAIN_STATS];
        if self.fresh("train", &key, &outputs) {
            self.skip_line("train");
            return Ok(());
        }

        let repo = features::load_repository(&feat)?;
        let (model, stats) = classifier::train_classifier(&repo, &ccfg, &tcfg)?;
        classifier::save_classifier(
            &model,
            tcfg.epochs as u64,
            tcfg.seed,
            &self.path(FILE_CLASSIFIER),
        )?;
        std::fs::write(self.path(FILE_TRAIN_STATS), classifier::stats_text(&stats))?;
        self.record("train", &key)?;
        match stats.last() {
            Some(s) => println!(
                "[train] {} epochs, loss {:.4}, train accuracy {:.4}",
                stats.len(),
                s.loss,
                s.accuracy
            ),
            None => println!("[train] 0 epochs, saved the initial model"),
        }
        Ok(())
    }

    /// Score the held-out rows and write both report forms.
    pub fn evaluate(&self) -> Result<()> {
        std::fs::create_dir_all(&self.dir)?;
        let model_path = self.require(FILE_CLASSIFIER, "trained classifier", "train")?;
        let feat = self.require(FILE_FEATURES, "feature repository", "extract")?;
        let key = Self::key_of(&[
            ("stage", "evaluate/v1".into()),
            ("classifier", store::sha256_file_hex(&model_path)?),
            ("features", store::sha256_file_hex(&feat)?),
            ("classes", self.class_names().join("|")),
        ]);
        let outputs = [FILE_REPORT_TEXT, FILE_REPORT_JSON];
        if self.fresh("evaluate", &key, &outputs) {
            self.skip_line("evaluate");
            return Ok(());
        }

        let (model, _) = classifier::load_classifier(&model_path)?;
        let repo = features::load_repository(&feat)?;
        let report = score_repository(&model, &repo)?;
        let names = self.class_names();
        std::fs::write(
            self.path(FILE_REPORT_TEXT),
            evalkit::report_text(&report, &names),
        )?;
        std::fs::write(
            self.path(FILE_REPORT_JSON),
            evalkit::report_json(&report, &names)?,
        )?;
        self.record("evaluate", &key)?;
        println!(
            "[evaluate] OA {:.4}  AA {:.4}  kappa {:.4} on {} test samples",
            report.oa, report.aa, report.kappa, report.n_test
        );
        Ok(())
    }

    /// Paint predictions and ground truth over the scene.
    pub fn render_map(&self) -> Result<()> {
        std::fs::create_dir_all(&self.dir)?;
        let model_path = self.require(FILE_CLASSIFIER, "trained classifier", "train")?;
        let feat = self.require(FILE_FEATURES, "feature repository", "extract")?;
        let norm = self.require(FILE_NORMALIZED, "ingested cube", "ingest")?;
        let key = Self::key_of(&[
            ("stage", "render-map/v1".into()),
            ("classifier", store::sha256_file_hex(&model_path)?),
            ("features", store::sha256_file_hex(&feat)?),
            ("cube", store::sha256_file_hex(&norm)?),
            ("split", Self::json_of(&self.cfg.split)),
            ("split_seed", self.seed("split").to_string()),
        ]);
        let outputs = [FILE_MAP, FILE_TRUTH];
        if self.fresh("render-map", &key, &outputs) {
            self.skip_line("render-map");
            return Ok(());
        }

        let cube = hsio::load_cube(&norm, &norm)?;
        let split = self.split_of(&cube)?;
        let (model, _) = classifier::load_classifier(&model_path)?;
        let repo = features::load_repository(&feat)?;
        let coords: Vec<(usize, usize, u32)> = split
            .train
            .iter()
            .chain(split.test.iter())
            .copied()
            .collect();
        if coords.len() != repo.n_samples() {
            return Err(Error::invalid(format!(
                "feature repository holds {} samples but the split has {}; \
                 rerun `specdiff extract --config {}` to refresh it",
                repo.n_samples(),
                coords.len(),
                self.hint
            )));
        }
        for (i, &(_, _, class)) in coords.iter().enumerate() {
            if repo.labels[i] != class {
                return Err(Error::invalid(format!(
                    "feature repository row {i} is labeled {} but the split says {class}; \
                     rerun `specdiff extract --config {}` to refresh it",
                    repo.labels[i], self.hint
                )));
            }
        }
        let preds = classifier::predict(&model, &repo)?;
        let shape = (cube.height(), cube.width());
        let pred_pixels: Vec<(usize, usize, u32)> = coords
            .iter()
            .zip(&preds)
            .map(|(&(r, c, _), &p)| (r, c, p))
            .collect();
        evalkit::render_map(shape, &pred_pixels, &evalkit::PALETTE_V1, &self.path(FILE_MAP))?;
        evalkit::render_map(shape, &coords, &evalkit::PALETTE_V1, &self.path(FILE_TRUTH))?;
        self.record("render-map", &key)?;
        println!(
            "[render-map] {}x{} scene, {} labeled pixels painted",
            shape.0,
            shape.1,
            coords.len()
        );
        Ok(())
    }

    /// The whole pipeline in dependency order.
    pub fn run_all(&self) -> Result<()> {
        self.ingest()?;
        self.pretrain()?;
        self.extract()?;
        self.train()?;
        self.evaluate()?;
        self.render_map()
    }

    /// Sweep (timestep, tap, training fraction) cells. Every cell runs the
    /// extract-train-evaluate pipeline with the run's own stage seeds, so a
    /// cell that matches the config reproduces the direct run bit for bit.
    /// Cell failures land in the table and the sweep keeps going.
    pub fn ablate(
        &self,
        timesteps: &[usize],
        taps: &[usize],
        fractions: &[f64],
    ) -> Result<Vec<evalkit::AblationCell>> {
        std::fs::create_dir_all(&self.dir)?;
        let ckpt_path = self.require(FILE_CHECKPOINT, "pretraining checkpoint", "pretrain")?;
        let norm = self.require(FILE_NORMALIZED, "ingested cube", "ingest")?;
        if timesteps.is_empty() || taps.is_empty() || fractions.is_empty() {
            return Err(Error::invalid(
                "ablation needs at least one timestep, tap, and fraction",
            ));
        }
        let key = Self::key_of(&[
            ("stage", "ablate/v1".into()),
            ("checkpoint", store::sha256_file_hex(&ckpt_path)?),
            ("cube", store::sha256_file_hex(&norm)?),
            ("grid", format!("{timesteps:?}|{taps:?}|{fractions:?}")),
            ("noise_seed", self.seed("features").to_string()),
            ("pca", Self::json_of(&self.cfg.features.pca)),
            ("split", Self::json_of(&self.cfg.split)),
            ("split_seed", self.seed("split").to_string()),
            ("classifier", Self::json_of(&self.stage_classifier_cfg())),
            ("train", Self::json_of(&self.stage_train_cfg())),
        ]);
        let outputs = [FILE_ABLATION_TABLE, FILE_ABLATION_CSV, FILE_ABLATION_JSON];
        if self.fresh("ablate", &key, &outputs) {
            self.skip_line("ablate");
            return store::load_json(&self.path(FILE_ABLATION_JSON));
        }

        let cube = hsio::load_cube(&norm, &norm)?;
        let split = self.split_of(&cube)?;
        let ckpt = pretrain::load_checkpoint(&ckpt_path)?;
        let ckpt_id = pretrain::checkpoint_id(&ckpt_path)?;
        let ccfg = self.stage_classifier_cfg();
        let tcfg = self.stage_train_cfg();

        let mut repos: BTreeMap<(usize, usize), FeatureRepository> = BTreeMap::new();
        let cells = evalkit::ablate(timesteps, taps, fractions, |t, f, fraction| {
            if !repos.contains_key(&(t, f)) {
                let repo =
                    self.extract_repository(&cube, &split, &ckpt, &ckpt_id, &[(t, f)])?;
                repos.insert((t, f), repo);
            }
            let repo = subsample_train(
                &repos[&(t, f)],
                fraction,
                store::derive_seed(
                    self.cfg.master_seed,
                    &format!("ablate-subsample:{t}:{f}:{:016x}", fraction.to_bits()),
                ),
            )?;
            let (model, _) = classifier::train_classifier(&repo, &ccfg, &tcfg)?;
            let report = score_repository(&model, &repo)?;
            println!(
                "[ablate] t={t} f={f} fraction={fraction:.2}: OA {:.4} kappa {:.4}",
                report.oa, report.kappa
            );
            Ok((report.oa, report.aa, report.kappa))
        });

        std::fs::write(
            self.path(FILE_ABLATION_TABLE),
            evalkit::ablation_table(&cells),
        )?;
        std::fs::write(self.path(FILE_ABLATION_CSV), evalkit::ablation_rows(&cells))?;
        store::save_json(&self.path(FILE_ABLATION_JSON), &cells)?;
        self.record("ablate", &key)?;
        let failed = cells
            .iter()
            .filter(|c| matches!(c.outcome, evalkit::CellOutcome::Failed { .. }))
            .count();
        println!("[ablate] {} cells, {failed} failed", cells.len());
        Ok(cells)
    }
}

/// Predict every row and score the held-out tail against its labels.
fn score_repository(
    model: &classifier::Classifier,
    repo: &FeatureRepository,
) -> Result<evalkit::EvalReport> {
    let preds = classifier::predict(model, repo)?;
    evalkit::evaluate(
        repo.test_labels(),
        &preds[repo.n_train..],
        model.cfg.n_classes,
    )
}

/// Per-class random subset of the training rows; test rows pass through.
/// fraction 1.0 is the identity, so the degenerate ablation cell sees the
/// exact repository a direct run sees.
fn subsample_train(repo: &FeatureRepository, fraction: f64, seed: u64) -> Result<FeatureRepository> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::invalid(format!(
            "training fraction {fraction} outside (0, 1]"
        )));
    }
    if fraction == 1.0 {
        return Ok(repo.clone());
    }
    let mut by_class: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for (i, &label) in repo.labels[..repo.n_train].iter().enumerate() {
        by_class.entry(label).or_default().push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut keep = Vec::new();
    for rows in by_class.into_values() {
        let k = ((fraction * rows.len() as f64).ceil() as usize).clamp(1, rows.len());
        let mut rows = rows;
        rows.shuffle(&mut rng);
        rows.truncate(k);
        keep.extend(rows);
    }
    keep.sort_unstable();

    let n_test = repo.n_samples() - repo.n_train;
    let mut vectors = ndarray::Array2::zeros((keep.len() + n_test, repo.feature_dim()));
    let mut labels = Vec::with_capacity(keep.len() + n_test);
    for (dst, &src) in keep.iter().enumerate() {
        vectors.row_mut(dst).assign(&repo.vectors.row(src));
        labels.push(repo.labels[src]);
    }
    for (offset, src) in (repo.n_train..repo.n_samples()).enumerate() {
        vectors.row_mut(keep.len() + offset).assign(&repo.vectors.row(src));
        labels.push(repo.labels[src]);
    }
    Ok(FeatureRepository {
        vectors,
        labels,
        n_train: keep.len(),
        provenance: repo.provenance.clone(),
        pca: repo.pca.clone(),
    })
}

#[derive(Parser)]
#[command(
    name = "specdiff",
    version,
    about = "Diffusion-pretrained feature extraction and transformer classification \
             for hyperspectral cubes"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Args)]
struct StageArgs {
    /// Run config (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Rerun the stage even when its outputs are up to date.
    #[arg(long)]
    force: bool,
    /// Override the config's master seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the config's output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct AblateArgs {
    #[command(flatten)]
    stage: StageArgs,
    /// Diffusion timesteps to probe.
    #[arg(long, value_delimiter = ',', default_values_t = [5, 10, 100, 200, 400])]
    timesteps: Vec<usize>,
    /// Decoder taps to probe.
    #[arg(long, value_delimiter = ',', default_values_t = [0, 1, 2])]
    taps: Vec<usize>,
    /// Training-set fractions to probe.
    #[arg(long, value_delimiter = ',', default_values_t = [1.0])]
    fractions: Vec<f64>,
}

#[derive(Args)]
struct SynthArgs {
    /// Container path to write.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    #[arg(long, default_value_t = 48)]
    height: usize,
    #[arg(long, default_value_t = 48)]
    width: usize,
    #[arg(long, default_value_t = 8)]
    bands: usize,
    #[arg(long, default_value_t = 4)]
    classes: usize,
}

#[derive(Subcommand)]
enum Command {
    /// Load, normalize, and split the dataset.
    Ingest(StageArgs),
    /// Train the noise-prediction network on unlabeled patches.
    Pretrain(StageArgs),
    /// Build the per-pixel feature repository from the frozen checkpoint.
    Extract(StageArgs),
    /// Train the transformer classifier on extracted features.
    Train(StageArgs),
    /// Score held-out samples and write reports.
    Evaluate(StageArgs),
    /// Render prediction and ground-truth maps.
    RenderMap(StageArgs),
    /// Sweep timesteps, taps, and training fractions.
    Ablate(AblateArgs),
    /// All pipeline stages in order.
    RunAll(StageArgs),
    /// Write the deterministic synthetic benchmark cube.
    MakeSynthetic(SynthArgs),
}

fn runner_for(args: &StageArgs) -> Result<Runner> {
    let mut cfg = RunConfig::load(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.master_seed = seed;
    }
    let out = args
        .out
        .clone()
        .or_else(|| std::env::var_os("SPECDIFF_OUT").map(PathBuf::from));
    if let Some(out) = out {
        cfg.out_dir = out;
    }
    Ok(Runner::new(cfg)
        .with_force(args.force)
        .with_hint(args.config.display().to_string()))
}

fn apply_thread_override() -> Result<()> {
    let Ok(raw) = std::env::var("SPECDIFF_THREADS") else {
        return Ok(());
    };
    let n: usize = raw.parse().map_err(|_| {
        Error::invalid(format!(
            "SPECDIFF_THREADS must be a positive integer, got {raw:?}"
        ))
    })?;
    if n == 0 {
        return Err(Error::invalid("SPECDIFF_THREADS must be at least 1"));
    }
    // A pool may already exist (library callers); that pool wins.
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

fn dispatch() -> Result<()> {
    apply_thread_override()?;
    match Cli::parse().cmd {
        Command::Ingest(a) => runner_for(&a)?.ingest(),
        Command::Pretrain(a) => runner_for(&a)?.pretrain(),
        Command::Extract(a) => runner_for(&a)?.extract(),
        Command::Train(a) => runner_for(&a)?.train(),
        Command::Evaluate(a) => runner_for(&a)?.evaluate(),
        Command::RenderMap(a) => runner_for(&a)?.render_map(),
        Command::Ablate(a) => {
            runner_for(&a.stage)?
                .ablate(&a.timesteps, &a.taps, &a.fractions)
                .map(|_| ())
        }
        Command::RunAll(a) => runner_for(&a)?.run_all(),
        Command::MakeSynthetic(a) => write_synthetic_cube(
            &SyntheticSpec {
                height: a.height,
                width: a.width,
                bands: a.bands,
                n_classes: a.classes,
                seed: a.seed,
            },
            &a.out,
        ),
    }
}

/// Binary entry point: zero iff every requested stage succeeded.
pub fn run() -> std::process::ExitCode {
    match dispatch() {
        Ok(()) => std::process::ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            std::process::ExitCode::FAILURE
        }
    }
}
