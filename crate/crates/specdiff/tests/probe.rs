//! Scratch diagnostic, not part of the suite. Delete before shipping.

use specdiff::classifier::{self, ClassifierConfig, TrainConfig};
use specdiff::evalkit;
use specdiff::features::{build_repository, fisher_ratio, pca_apply, pca_fit, PcaSpec, TapSpec};
use specdiff::hsio::{make_synthetic, normalize, split_samples, NormalizeMode, SplitSpec,
    SyntheticSpec};
use specdiff::nn::denoiser::DenoiserConfig;
use specdiff::pretrain::{self, PretrainConfig};
use std::time::Instant;

#[test]
fn probe_example_configs() {
    let cube = normalize(
        make_synthetic(&SyntheticSpec::default()).unwrap(),
        NormalizeMode::PerBandMinMax,
    )
    .unwrap();
    let split = split_samples(&cube, &SplitSpec::Fraction(0.1), 7).unwrap();

    // Candidate for extract_features.rs: 100 steps, batch 8.
    let dcfg = DenoiserConfig {
        in_channels: cube.bands(),
        base_width: 32,
        depth: 3,
        time_embed_dim: 16,
        patch_size: 8,
    };
    let t0 = Instant::now();
    let pcfg = PretrainConfig {
        steps: 100,
        batch_size: 8,
        learning_rate: 1e-3,
        patch_size: 8,
        seed: 7,
        ..PretrainConfig::default()
    };
    let ckpt = pretrain::pretrain(&cube, &dcfg, &pcfg).unwrap().checkpoint;
    let model = ckpt.instantiate().unwrap();
    let schedule = ckpt.manifest.schedule.build().unwrap();
    let repo = build_repository(
        &model,
        &schedule,
        &cube,
        &split,
        &TapSpec { pairs: vec![(5, 1)], seed: 99 },
        8,
        "probe",
    )
    .unwrap();
    let fisher = fisher_ratio(repo.train_vectors(), repo.train_labels());
    let transform = pca_fit(repo.train_vectors(), &PcaSpec::Components(8)).unwrap();
    let reduced = pca_apply(&transform, &repo).unwrap();
    let fisher_pca = fisher_ratio(reduced.train_vectors(), reduced.train_labels());
    println!(
        "[extract-cand] {:.1}s fisher {fisher:.3} pca8 {fisher_pca:.3}",
        t0.elapsed().as_secs_f64()
    );

    // Candidate for train_and_evaluate.rs: short pretrain, then PCA-8 features.
    let t0 = Instant::now();
    let pcfg = PretrainConfig {
        steps: 100,
        batch_size: 8,
        learning_rate: 1e-3,
        patch_size: 8,
        seed: 7,
        ..PretrainConfig::default()
    };
    let ckpt = pretrain::pretrain(&cube, &dcfg, &pcfg).unwrap().checkpoint;
    let model = ckpt.instantiate().unwrap();
    let repo = build_repository(
        &model,
        &ckpt.manifest.schedule.build().unwrap(),
        &cube,
        &split,
        &TapSpec { pairs: vec![(5, 1)], seed: 99 },
        8,
        "probe",
    )
    .unwrap();
    let transform = pca_fit(repo.train_vectors(), &PcaSpec::Components(8)).unwrap();
    let mut repo = pca_apply(&transform, &repo).unwrap();
    let gstd = {
        let n = repo.vectors.len() as f64;
        let m = repo.vectors.sum() / n;
        (repo.vectors.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n).sqrt()
    };
    repo.vectors.mapv_inplace(|v| v / gstd);
    let ccfg = ClassifierConfig {
        group_size: 4,
        embed_dim: 16,
        depth: 2,
        heads: 2,
        mlp_ratio: 2.0,
        dropout: 0.1,
        seed: 3,
        ..ClassifierConfig::with_classes(cube.n_classes())
    };
    let tcfg = TrainConfig {
        epochs: 60,
        batch_size: 32,
        learning_rate: 1e-2,
        seed: 3,
    };
    let lo = repo.vectors.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = repo.vectors.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let amean = repo.vectors.iter().map(|v| v.abs()).sum::<f64>() / repo.vectors.len() as f64;
    println!("[train-cand] features in [{lo:.3}, {hi:.3}], abs mean {amean:.3}");
    let n = repo.vectors.nrows() as f64;
    let mut stds: Vec<f64> = (0..repo.vectors.ncols())
        .map(|j| {
            let col = repo.vectors.column(j);
            let m = col.sum() / n;
            (col.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n).sqrt()
        })
        .collect();
    stds.sort_by(f64::total_cmp);
    println!(
        "  channel stds: min {:.2e} p25 {:.2e} med {:.2e} p75 {:.2e} max {:.2e}",
        stds[0],
        stds[stds.len() / 4],
        stds[stds.len() / 2],
        stds[3 * stds.len() / 4],
        stds[stds.len() - 1]
    );
    let (model, stats) = classifier::train_classifier(&repo, &ccfg, &tcfg).unwrap();
    let preds = classifier::predict(&model, &repo).unwrap();
    let report =
        evalkit::evaluate(repo.test_labels(), &preds[repo.n_train..], ccfg.n_classes).unwrap();
    for e in [0, 4, 9, 29, 59] {
        println!("  epoch {} loss {:.4} acc {:.4}", stats[e].epoch, stats[e].loss, stats[e].accuracy);
    }
    println!(
        "[train-cand] {:.1}s train-acc {:.4} OA {:.4} kappa {:.4}",
        t0.elapsed().as_secs_f64(),
        stats.last().unwrap().accuracy,
        report.oa,
        report.kappa
    );
}

#[test]
fn probe_ablate_bitwise() {
    use specdiff::cli::{RunConfig, Runner};
    use specdiff::evalkit::CellOutcome;

    let tmp = tempfile::tempdir().unwrap();
    let cube = specdiff::hsio::make_synthetic(&SyntheticSpec {
        height: 12,
        width: 12,
        bands: 4,
        n_classes: 3,
        seed: 5,
        ..SyntheticSpec::default()
    })
    .unwrap();
    let cube_path = tmp.path().join("cube.npz");
    specdiff::hsio::save_cube(&cube, &cube_path).unwrap();

    let toml_text = format!(
        r#"
name = "probe-ablate"
out_dir = "{}"
master_seed = 17

[dataset]
data = "{}"
labels = "{}"

[split]
fraction = 0.3

[denoiser]
base_width = 8
depth = 3
time_embed_dim = 8

[pretrain]
steps = 40
batch_size = 4
learning_rate = 1e-3
patch_size = 8

[features]
pairs = [[5, 1]]

[classifier]
n_classes = 3
group_size = 4
embed_dim = 8
depth = 2
heads = 2
mlp_ratio = 2.0
dropout = 0.1

[train]
epochs = 8
batch_size = 16
learning_rate = 1e-3
"#,
        tmp.path().join("run").display(),
        cube_path.display(),
        cube_path.display()
    );
    let cfg: RunConfig = toml::from_str(&toml_text).unwrap();
    cfg.validate().unwrap();
    let runner = Runner::new(cfg);
    runner.run_all().unwrap();

    let report: serde_json::Value = serde_json::from_str(
        &std::fs::read_to_string(runner.path(specdiff::cli::FILE_REPORT_JSON)).unwrap(),
    )
    .unwrap();
    let (oa, aa, kappa) = (
        report["oa"].as_f64().unwrap(),
        report["aa"].as_f64().unwrap(),
        report["kappa"].as_f64().unwrap(),
    );

    let cells = runner.ablate(&[5, 100], &[0, 1, 2], &[1.0]).unwrap();
    println!("{}", evalkit::ablation_table(&cells));
    for cell in &cells {
        if let CellOutcome::Ok { oa: co, aa: ca, kappa: ck } = &cell.outcome {
            if cell.timestep == 5 && cell.feature_index == 1 {
                println!(
                    "direct ({oa}, {aa}, {kappa})\ncell   ({co}, {ca}, {ck})\nbitwise {}",
                    (*co == oa) && (*ca == aa) && (*ck == kappa)
                );
            }
        } else {
            println!("cell t={} f={} FAILED: {:?}", cell.timestep, cell.feature_index, cell.outcome);
        }
    }
}

#[test]
fn probe_c7_full() {
    use specdiff::cli::{write_synthetic_cube, RunConfig, Runner, FILE_REPORT_JSON};
    use specdiff::evalkit::CellOutcome;
    use std::path::PathBuf;

    let base = PathBuf::from("/tmp/probe-c7");
    std::fs::create_dir_all(&base).unwrap();
    let mut cfg = RunConfig::load(std::path::Path::new("/root/crate/profiles/synthetic.toml")).unwrap();
    cfg.dataset.data = base.join("synthetic.npz");
    cfg.out_dir = base.join("run");
    if !cfg.dataset.data.exists() {
        write_synthetic_cube(&SyntheticSpec::default(), &cfg.dataset.data).unwrap();
    }
    let runner = Runner::new(cfg);
    runner.run_all().unwrap();

    let report: serde_json::Value = serde_json::from_str(
        &std::fs::read_to_string(runner.path(FILE_REPORT_JSON)).unwrap(),
    )
    .unwrap();
    let (oa, aa, kappa) = (
        report["oa"].as_f64().unwrap(),
        report["aa"].as_f64().unwrap(),
        report["kappa"].as_f64().unwrap(),
    );
    println!("direct run: OA {oa} AA {aa} kappa {kappa}");

    let cells = runner.ablate(&[5, 100], &[0, 1, 2], &[1.0]).unwrap();
    for cell in &cells {
        match &cell.outcome {
            CellOutcome::Ok { oa: co, aa: ca, kappa: ck } => {
                println!(
                    "cell t={} f={}: OA {co} AA {ca} kappa {ck}{}",
                    cell.timestep,
                    cell.feature_index,
                    if cell.timestep == 5 && cell.feature_index == 1 {
                        format!("  bitwise={}", (*co == oa) && (*ca == aa) && (*ck == kappa))
                    } else {
                        String::new()
                    }
                );
            }
            CellOutcome::Failed { error } => {
                println!("cell t={} f={} FAILED: {error}", cell.timestep, cell.feature_index);
            }
        }
    }
}
