//! Everything behind `specdiff run-all`, driven from a config: ingest,
//! pretrain, extract, train, evaluate, render. Run it twice and watch every
//! stage skip; outputs are reproducible down to the byte.

use specdiff::cli::{self, RunConfig, Runner};
use specdiff::hsio::SyntheticSpec;

fn main() -> specdiff::Result<()> {
    let dir = std::env::temp_dir().join("specdiff-examples/full_pipeline");
    std::fs::create_dir_all(&dir)?;
    let data = dir.join("cube.npz");
    cli::write_synthetic_cube(&SyntheticSpec::default(), &data)?;

    let toml = format!(
        r#"
        name = "pipeline-demo"
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
        steps = 400
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
        dropout = 0.1

        [train]
        epochs = 60
        batch_size = 32
        learning_rate = 1e-2
        "#,
        out = dir.join("run").display(),
        data = data.display(),
    );
    let cfg: RunConfig = toml::from_str(&toml).expect("inline config parses");
    cfg.validate()?;

    let runner = Runner::new(cfg);
    runner.run_all()?;

    print!(
        "\n{}",
        std::fs::read_to_string(runner.dir.join(cli::FILE_REPORT_TEXT))?
    );
    println!("\nartifacts:");
    let mut names: Vec<_> = std::fs::read_dir(&runner.dir)?
        .filter_map(|e| e.ok())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .collect();
    names.sort();
    for name in names {
        println!("  {}", runner.dir.join(name).display());
    }
    Ok(())
}
