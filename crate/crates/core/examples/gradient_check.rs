//! Central finite differences against the analytic (sub)gradient of every objective.
//!
//! `cargo run --release --example gradient_check`

use amtfl::datasets::{MultiTaskDataset, TaskDataset, TaskKind};
use amtfl::losses::LossConfig;
use amtfl::objectives::{gradient, init_params, objective, Hyperparams, InitSpec, ModelParams, ObjectiveId};
use amtfl::Mat;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

fn main() -> amtfl::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (d, k, t, n) = (5, 3, 4, 10);
    let mut normal = |r, c| Mat::from_fn(r, c, |_, _| StandardNormal.sample(&mut rng));
    let tasks = (0..t)
        .map(|i| TaskDataset::new(format!("t{i}"), normal(n, d), normal(n, 1), TaskKind::Regression))
        .collect::<amtfl::Result<Vec<_>>>()?;
    let data = MultiTaskDataset::new("toy", tasks)?;
    let cfg = LossConfig::squared().with_delta(0.1);
    let hp = Hyperparams { alpha: 0.3, gamma: 0.2, lambda: 0.1, mu: 0.05, l1_bases: 0.02, k, ..Default::default() };

    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for obj in ObjectiveId::ALL {
        let spec = InitSpec { objective: obj, d, tasks: t, k, hidden: vec![], recon_bias: true };
        let params = init_params(&spec, 0.5, &mut rng);
        let analytic = gradient(obj, &params, &data, &cfg, &hp)?;
        let f = |p: &ModelParams| objective(obj, p, &data, &cfg, &hp).expect("shapes fixed");
        let h = 1e-5;
        let mut worst = 0.0f64;
        let mut probe = params.clone();
        let names = params.tensor_names();
        for (ti, g) in analytic.tensors().into_iter().enumerate() {
            for idx in 0..g.data().len() {
                // the diagonal of B is structurally zero
                if names[ti] == "B" && idx / g.cols() == idx % g.cols() {
                    continue;
                }
                let orig = params.tensors()[ti].data()[idx];
                probe.tensors_mut()[ti].data_mut()[idx] = orig + h;
                let up = f(&probe);
                probe.tensors_mut()[ti].data_mut()[idx] = orig - h;
                let down = f(&probe);
                probe.tensors_mut()[ti].data_mut()[idx] = orig;
                let fd = (up - down) / (2.0 * h);
                let rel = (fd - g.data()[idx]).abs() / fd.abs().max(g.data()[idx].abs()).max(1e-4);
                worst = worst.max(rel);
            }
        }
        println!("{:<11} {:>5} parameters  max relative error {worst:.2e}", obj.as_str(), params.num_parameters());
    }
    Ok(())
}
