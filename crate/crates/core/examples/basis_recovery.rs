//! How well does each model recover the true task parameters? Compares the learned `LS`
//! (or `W`) with the generating `W_true` on one synthetic split.
//!
//! `cargo run --release --example basis_recovery`

use std::path::Path;

use amtfl::cli::CliConfig;
use amtfl::harness::{grid_search, DataSource};
use amtfl::synthetic::generate;

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb).max(f64::MIN_POSITIVE)
}

fn main() -> amtfl::Result<()> {
    let config = Path::new(env!("CARGO_MANIFEST_DIR")).join("configs/synthetic_benchmark.json");
    let cfg = CliConfig::load(&config, None)?;
    let exp = cfg.experiment.as_ref().expect("experiment block");
    let DataSource::Synthetic(spec) = &exp.data else { unreachable!("synthetic config") };
    let (truth, split) = generate(spec, 0)?;
    let ids: Vec<String> = truth.tasks.iter().map(|t| t.id.clone()).collect();

    println!("cosine(learned w_t, true w_t) per task");
    print!("{:<11}", "");
    for id in &ids {
        print!(" {id:>6}");
    }
    println!();
    for model in &exp.models {
        let run = grid_search(model, &split, 0)?.best;
        let Some(w) = run.params.task_matrix() else { continue };
        print!("{:<11}", model.label());
        for t in 0..ids.len() {
            print!(" {:>6.3}", cosine(&w.col(t), &truth.w_true.col(t)));
        }
        println!();
    }
    Ok(())
}
