//! How the classifier turns a flat feature vector into tokens, and what the
//! positional embedding buys: with it the model sees channel order, without
//! it the class scores are permutation-invariant.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use specdiff::classifier::{build_classifier, ClassifierConfig, SkipFusion};

fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&v| (v - m).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.iter().map(|&e| e / z).collect()
}

fn max_drift(x: &[f64], y: &[f64]) -> f64 {
    x.iter()
        .zip(y)
        .map(|(p, q)| (p - q).abs())
        .fold(0.0f64, f64::max)
}

fn main() -> specdiff::Result<()> {
    let feature_dim = 24;
    let cfg = ClassifierConfig {
        group_size: 4,
        embed_dim: 16,
        depth: 2,
        heads: 2,
        mlp_ratio: 2.0,
        dropout: 0.0,
        seed: 5,
        ..ClassifierConfig::with_classes(3)
    };

    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let vector: Vec<f64> = (0..feature_dim).map(|_| rng.sample(StandardNormal)).collect();
    // The same channels with the groups in reverse order.
    let reversed: Vec<f64> = vector.chunks(4).rev().flatten().copied().collect();

    // Channel groups of 4 over 24 features: 6 content tokens plus cls.
    let model = build_classifier(&cfg, feature_dim)?;
    let tokens = model.tokenize(&vector)?;
    println!(
        "token matrix: {:?} (content groups + cls row)",
        tokens.tokens.dim()
    );

    let probs = softmax(&model.logits(&vector)?);
    println!(
        "class probabilities {probs:.4?}, sum {:.12}",
        probs.iter().sum::<f64>()
    );

    println!(
        "position-aware model, group-reversed input: logit drift {:.3}",
        max_drift(&model.logits(&vector)?, &model.logits(&reversed)?)
    );

    let blind_cfg = ClassifierConfig {
        pos_embed: false,
        skip_fusion: SkipFusion::Off,
        ..cfg
    };
    let blind = build_classifier(&blind_cfg, feature_dim)?;
    println!(
        "position-blind model, group-reversed input: logit drift {:.3e}",
        max_drift(&blind.logits(&vector)?, &blind.logits(&reversed)?)
    );
    Ok(())
}
