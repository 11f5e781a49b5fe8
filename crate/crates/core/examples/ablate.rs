//! Run one ablation suite at a reduced toy budget and print the ranked table.
//!
//! cargo run --release --example ablate -- [topology|wide_width|wdib_parts|wdib_count] [steps]

use fiwhn::evaluation::{ablate, AblationBudget, AblationSuite};
use fiwhn::training::TrainConfig;

fn main() -> fiwhn::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let name = args.get(1).map(String::as_str).unwrap_or("topology");
    let steps: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(40);
    let Some(suite) = AblationSuite::ALL.into_iter().find(|s| s.name() == name) else {
        eprintln!("unknown suite `{name}`");
        std::process::exit(2);
    };
    let defaults = AblationBudget::default();
    let budget = AblationBudget {
        train: TrainConfig {
            steps_per_epoch: steps,
            ..defaults.train.clone()
        },
        ..defaults
    };
    let table = ablate(suite, &budget)?;
    print!("{}", table.to_text());
    Ok(())
}
