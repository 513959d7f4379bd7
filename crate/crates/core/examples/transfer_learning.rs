//! Pretrains a Deep-AMTFL network on source classes, then retrains only a fresh last layer for
//! unseen target classes with every other layer frozen.
//!
//! `cargo run --release --example transfer_learning`

use amtfl::datasets::one_vs_all;
use amtfl::harness::{overall_metric, transfer_learn, TransferSpec, THRESHOLD};
use amtfl::losses::LossConfig;
use amtfl::objectives::{init_params, Activation, Hyperparams, InitSpec, ModelParams, ObjectiveId};
use amtfl::optimizers::{train, OptimizerSpec, Schedule, TrainConfig};
use amtfl::Mat;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// Gaussian blobs around random centres; returns rows and integer class labels.
fn blobs(rng: &mut ChaCha8Rng, centres: &Mat, per_class: usize) -> (Mat, Vec<usize>) {
    let (c, d) = centres.shape();
    let mut x = Mat::zeros(c * per_class, d);
    let mut labels = Vec::with_capacity(c * per_class);
    for i in 0..c * per_class {
        let class = i % c;
        for j in 0..d {
            let noise: f64 = StandardNormal.sample(rng);
            x.set(i, j, centres.get(class, j) + 0.8 * noise);
        }
        labels.push(class);
    }
    (x, labels)
}

fn main() -> amtfl::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let d = 20;
    let all_centres = Mat::from_fn(8, d, |_, _| StandardNormal.sample(&mut rng));
    let source_centres = Mat::from_fn(5, d, |i, j| all_centres.get(i, j));
    let target_centres = Mat::from_fn(3, d, |i, j| all_centres.get(5 + i, j));

    let (xs, ys) = blobs(&mut rng, &source_centres, 60);
    let source = one_vs_all("source", &xs, &ys, 5)?;
    let hp = Hyperparams { alpha: 0.1, gamma: 1e-4, lambda: 1e-4, mu: 1e-4, k: 16, ..Default::default() };
    let spec = InitSpec { objective: ObjectiveId::DeepAmtfl, d, tasks: 5, k: 16, hidden: vec![32, 16], recon_bias: true };
    let init = init_params(&spec, 0.1, &mut rng);
    let cfg = TrainConfig {
        objective: ObjectiveId::DeepAmtfl,
        loss: LossConfig::logistic(),
        hp: hp.clone(),
        optimizer: OptimizerSpec::adam(),
        schedule: Schedule::constant(0.01),
        max_steps: 400,
        batch_size: 100,
        seed: 1,
        eval_every: None,
        frozen: vec![],
    };
    let pre = train(init, &source, None, &cfg)?;
    println!("source error {:.2}% (decision threshold {THRESHOLD})", overall_metric(&pre.params, &source, &hp)?);
    let ModelParams::Deep(pretrained) = pre.params else { unreachable!() };

    let (xt, yt) = blobs(&mut rng, &target_centres, 20);
    let (xe, ye) = blobs(&mut rng, &target_centres, 40);
    let target = one_vs_all("target", &xt, &yt, 3)?;
    let eval = one_vs_all("target-test", &xe, &ye, 3)?;
    let tspec = TransferSpec {
        optimizer: OptimizerSpec::adam(),
        schedule: Schedule::constant(0.02),
        max_steps: 300,
        batch_size: 60,
        mu: 1e-4,
        init_std: 0.01,
        seed: 2,
        hidden_activation: Activation::Relu,
    };
    let out = transfer_learn(&pretrained, &target, Some(&eval), &tspec)?;
    let frozen_ok = out.params.layers[..pretrained.depth() - 1] == pretrained.layers[..pretrained.depth() - 1];
    println!("target test error {:.2}% with frozen layers unchanged: {frozen_ok}", out.metric);
    Ok(())
}
