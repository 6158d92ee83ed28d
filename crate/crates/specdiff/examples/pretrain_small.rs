//! A small noise-prediction run: train a tiny U-Net on random crops of the
//! synthetic cube, watch the loss fall from its ~1.0 starting point, and
//! round-trip the checkpoint container.

use specdiff::hsio::{make_synthetic, normalize, NormalizeMode, SyntheticSpec};
use specdiff::nn::denoiser::DenoiserConfig;
use specdiff::pretrain::{self, PretrainConfig};

fn main() -> specdiff::Result<()> {
    let cube = normalize(
        make_synthetic(&SyntheticSpec::default())?,
        NormalizeMode::PerBandMinMax,
    )?;

    let dcfg = DenoiserConfig {
        in_channels: cube.bands(),
        base_width: 8,
        depth: 2,
        time_embed_dim: 16,
        patch_size: 8,
    };
    let pcfg = PretrainConfig {
        steps: 300,
        batch_size: 16,
        learning_rate: 1e-3,
        patch_size: 8,
        seed: 7,
        ..PretrainConfig::default()
    };

    println!("training {} steps on {} bands...", pcfg.steps, cube.bands());
    let out = pretrain::pretrain(&cube, &dcfg, &pcfg)?;
    let first: f64 = out.trace[..20].iter().map(|&(_, l)| l).sum::<f64>() / 20.0;
    let last: f64 =
        out.trace[out.trace.len() - 20..].iter().map(|&(_, l)| l).sum::<f64>() / 20.0;
    println!("mean batch loss: first 20 steps {first:.4}, last 20 steps {last:.4}");

    let dir = std::env::temp_dir().join("specdiff-examples/pretrain_small");
    std::fs::create_dir_all(&dir)?;
    let path = dir.join("checkpoint.npz");
    pretrain::save_checkpoint(&out.checkpoint, &path)?;
    let reloaded = pretrain::load_checkpoint(&path)?;
    println!(
        "checkpoint {} at {}: {} params, reload identical: {}",
        pretrain::checkpoint_id(&path)?,
        path.display(),
        reloaded.params.len(),
        reloaded == out.checkpoint
    );
    Ok(())
}
