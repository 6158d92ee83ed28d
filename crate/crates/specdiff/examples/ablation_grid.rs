//! Sweep the (timestep, decoder tap) grid on a small run and print the
//! grouped table. Cells share one checkpoint; each one re-extracts features
//! for its own coordinates and trains a fresh classifier.

use std::path::PathBuf;

use specdiff::cli::{self, RunConfig, Runner};
use specdiff::hsio::SyntheticSpec;

fn main() -> specdiff::Result<()> {
    let dir = std::env::temp_dir().join("specdiff-examples/ablation_grid");
    std::fs::create_dir_all(&dir)?;
    let data = dir.join("cube.npz");
    cli::write_synthetic_cube(&SyntheticSpec::default(), &data)?;

    let toml = format!(
        r#"
        name = "ablation-demo"
        out_dir = "{out}"
        master_seed = 7

        [dataset]
        data = "{data}"

        [split]
        fraction = 0.1

        [denoiser]
        base_width = 8
        depth = 2
        time_embed_dim = 16

        [pretrain]
        steps = 300
        batch_size = 16
        learning_rate = 1e-3
        patch_size = 8

        [features]
        pairs = [[5, 1]]

        [classifier]
        n_classes = 4
        group_size = 4
        embed_dim = 16
        depth = 2
        heads = 2
        mlp_ratio = 2.0
        dropout = 0.0

        [train]
        epochs = 30
        batch_size = 32
        learning_rate = 1e-2
        "#,
        out = dir.join("run").display(),
        data = data.display(),
    );
    let cfg: RunConfig = toml::from_str(&toml).expect("inline config parses");
    cfg.validate()?;

    let runner = Runner::new(cfg);
    runner.ingest()?;
    runner.pretrain()?;
    runner.ablate(&[5, 100], &[0, 1], &[1.0, 0.5])?;

    let table: PathBuf = runner.dir.join(cli::FILE_ABLATION_TABLE);
    print!("\n{}", std::fs::read_to_string(table)?);
    println!("full outputs under {}", runner.dir.display());
    Ok(())
}
