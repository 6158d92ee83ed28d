//! From frozen checkpoint to feature repository: tap a decoder stage at a
//! small timestep for every labeled pixel, check how well the classes
//! separate, and optionally compress with PCA.

use specdiff::features::{
    build_repository, fisher_ratio, pca_apply, pca_fit, PcaSpec, TapSpec,
};
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
    let model = ckpt.instantiate()?;
    let schedule = ckpt.manifest.schedule.build()?;

    // Tap 1 is the middle decoder stage of this depth-3 net; probe it at a
    // small timestep where the input is barely perturbed.
    let tapspec = TapSpec {
        pairs: vec![(5, 1)],
        seed: 99,
    };
    let repo = build_repository(&model, &schedule, &cube, &split, &tapspec, 8, "example")?;
    println!(
        "repository: {} samples x {} features ({} train rows first)",
        repo.n_samples(),
        repo.feature_dim(),
        repo.n_train
    );
    println!(
        "between/within class scatter on train rows: {:.3}",
        fisher_ratio(repo.train_vectors(), repo.train_labels())
    );

    let transform = pca_fit(repo.train_vectors(), &PcaSpec::Components(8))?;
    let reduced = pca_apply(&transform, &repo)?;
    println!(
        "after PCA: {} features, scatter {:.3}",
        reduced.feature_dim(),
        fisher_ratio(reduced.train_vectors(), reduced.train_labels())
    );
    Ok(())
}
