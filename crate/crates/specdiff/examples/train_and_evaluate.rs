//! The supervised stage end to end: extract features with a frozen
//! denoiser, project them with PCA, train the transformer classifier on the
//! train rows, and score the held-out rows with the standard remote-sensing
//! metrics.

use specdiff::classifier::{self, ClassifierConfig, TrainConfig};
use specdiff::evalkit;
use specdiff::features::{build_repository, pca_apply, pca_fit, PcaSpec, TapSpec};
use specdiff::hsio::{make_synthetic, normalize, split_samples, NormalizeMode, SplitSpec,
    SyntheticSpec};
use specdiff::nn::denoiser::DenoiserConfig;
use specdiff::pretrain::{self, PretrainConfig};

fn main() -> specdiff::Result<()> {
    let cube = normalize(
        make_synthetic(&SyntheticSpec::default())?,
        NormalizeMode::PerBandMinMax,
    )?;
    let split = split_samples(&cube, &SplitSpec::Fraction(0.1), 7)?;

    let dcfg = DenoiserConfig {
        in_channels: cube.bands(),
        base_width: 32,
        depth: 3,
        time_embed_dim: 16,
        patch_size: 8,
    };
    let pcfg = PretrainConfig {
        steps: 100,
        batch_size: 8,
        learning_rate: 1e-3,
        patch_size: 8,
        seed: 7,
        ..PretrainConfig::default()
    };
    println!("pretraining {} steps...", pcfg.steps);
    let ckpt = pretrain::pretrain(&cube, &dcfg, &pcfg)?.checkpoint;
    let repo = build_repository(
        &ckpt.instantiate()?,
        &ckpt.manifest.schedule.build()?,
        &cube,
        &split,
        &TapSpec { pairs: vec![(5, 1)], seed: 99 },
        8,
        "example",
    )?;

    // A briefly pretrained decoder emits features whose variation across
    // samples is orders of magnitude below the transformer's embedding
    // scale. PCA drops the constant directions; the rescale puts the
    // surviving variation at unit standard deviation.
    let transform = pca_fit(repo.train_vectors(), &PcaSpec::Components(8))?;
    let mut repo = pca_apply(&transform, &repo)?;
    let spread = {
        let n = repo.vectors.len() as f64;
        let mean = repo.vectors.sum() / n;
        (repo.vectors.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt()
    };
    repo.vectors.mapv_inplace(|v| v / spread);

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
    println!(
        "training {} epochs on {} samples x {} features...",
        tcfg.epochs,
        repo.n_train,
        repo.feature_dim()
    );
    let (model, stats) = classifier::train_classifier(&repo, &ccfg, &tcfg)?;
    let last = stats.last().expect("at least one epoch");
    println!(
        "final epoch: loss {:.4}, train accuracy {:.4}",
        last.loss, last.accuracy
    );

    let preds = classifier::predict(&model, &repo)?;
    let report = evalkit::evaluate(
        repo.test_labels(),
        &preds[repo.n_train..],
        ccfg.n_classes,
    )?;
    let names: Vec<String> = cube.class_names.clone();
    print!("\n{}", evalkit::report_text(&report, &names));
    Ok(())
}
