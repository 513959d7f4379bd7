//! Trains AMTFL on one synthetic split and prints the task-to-task transfer matrix `AS`
//! as a heat map of absolute values, rows being sources.
//!
//! `cargo run --release --example transfer_matrix`

use std::path::Path;

use amtfl::cli::CliConfig;
use amtfl::harness::{asymmetry_ratio, grid_search, load_split};

fn main() -> amtfl::Result<()> {
    let config = Path::new(env!("CARGO_MANIFEST_DIR")).join("configs/synthetic_benchmark.json");
    let cfg = CliConfig::load(&config, None)?;
    let exp = cfg.experiment.as_ref().expect("experiment block");
    let model = exp.models.iter().find(|m| m.label() == "amtfl").expect("amtfl model");
    let split = load_split(exp, 0)?;
    let best = grid_search(model, &split, 0)?.best;
    let m = best.params.transfer_matrix().expect("amtfl has AS");
    let ids = split.train.task_ids();
    let groups = split.train.groups.clone().unwrap_or_default();

    let max = m.data().iter().fold(0.0f64, |a, v| a.max(v.abs()));
    let shades = [' ', '.', ':', '-', '=', '+', '*', '#', '%', '@'];
    println!("|AS| (row = source, column = target), max {max:.3}");
    print!("{:>7} ", "");
    for id in &ids {
        print!("{}", id.chars().last().unwrap_or(' '));
    }
    println!();
    for (s, id) in ids.iter().enumerate() {
        let row: String = (0..ids.len())
            .map(|t| shades[((m.get(s, t).abs() / max) * 9.0).round() as usize])
            .collect();
        println!("{id:>7} {row}");
    }
    if let Some(r) = asymmetry_ratio(&m, &groups) {
        println!("hard→easy / easy→hard = {r:.3}");
    }
    Ok(())
}
