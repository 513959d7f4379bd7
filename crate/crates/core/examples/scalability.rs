//! Parameter counts and per-step training time of AMTL and AMTFL as the task count grows.
//!
//! `cargo run --release --example scalability [max_steps]`

use std::path::Path;

use amtfl::cli::CliConfig;
use amtfl::harness::{amtfl_parameter_count, amtl_parameter_count, scalability_sweep};

fn main() -> amtfl::Result<()> {
    let config = Path::new(env!("CARGO_MANIFEST_DIR")).join("configs/scalability.json");
    let mut sc = CliConfig::load(&config, None)?.scalability.expect("scalability block");
    // a short budget is enough to see the trend
    let steps = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(300);
    for m in &mut sc.models {
        m.max_steps = steps;
    }
    sc.repeats = 1;

    let rows = scalability_sweep(&sc)?;
    println!("{:>4} {:>8} {:>8} {:>8} {:>12}", "T", "model", "params", "rmse", "ms/step");
    for r in &rows {
        println!(
            "{:>4} {:>8} {:>8} {:>8.4} {:>12.4}",
            r.tasks, r.model, r.parameter_count, r.test_metric, r.seconds_per_step * 1e3
        );
    }
    let d = sc.synthetic.d;
    println!("\nformula: AMTL dT+T², AMTFL dk+2kT (d={d}, k=6)");
    for t in [12, 120, 1200] {
        println!("T={t:<5} {:>8} vs {:>6}", amtl_parameter_count(d, t), amtfl_parameter_count(d, 6, t));
    }
    Ok(())
}
