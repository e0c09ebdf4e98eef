//! Desk-scale versions of the two experiments.
//!
//! ```text
//! cargo run --release -p umc-core --example experiments -- one [steps]
//! cargo run --release -p umc-core --example experiments -- two [steps]
//! ```
//!
//! `one` trains the denoise+segment UMC over a σ × connectivity grid and
//! prints a `mIoU (PSNRdB)` table; `two` trains each output group on clean
//! images and prints fine-class accuracy, mIoU and parameter count.

use umc::model::TINY_FILTERS;
use umc::train::{experiment_one, experiment_two, ExperimentTwoRow, Group};
use umc::{gen_synthetic, Connectivity, DataConfig, Result, TrainConfig};

fn main() -> Result<()> {
    let mut args = std::env::args().skip(1);
    let which = args.next().unwrap_or_else(|| "one".into());
    let steps = args.next().map(|s| s.parse().expect("steps must be an integer")).unwrap_or(300);
    let tc = TrainConfig {
        max_steps: Some(steps),
        batch_size: 16,
        seed: 1,
        ..TrainConfig::default()
    };
    let train_cfg = DataConfig::new(40, 64, 6, 3, 1, 0.0);
    let eval_cfg = DataConfig::new(10, 64, 6, 3, 2, 0.0);
    match which.as_str() {
        "one" => {
            let table = experiment_one(
                &[15.0, 30.0],
                &Connectivity::ALL,
                &train_cfg,
                &eval_cfg,
                &TINY_FILTERS,
                &tc,
            )?;
            print!("{}", table.to_csv());
        }
        "two" => {
            let train_set = gen_synthetic(&train_cfg)?;
            let eval_set = gen_synthetic(&eval_cfg)?;
            println!("{}", ExperimentTwoRow::CSV_HEADER);
            for group in Group::ALL {
                let modes: &[Connectivity] = if group == Group::FCls { &[Connectivity::SharedEncoder] } else { &Connectivity::ALL };
                for &c in modes {
                    let row = experiment_two(group, c, &train_set, &eval_set, &TINY_FILTERS, &tc)?;
                    println!("{}", row.csv_row());
                }
            }
        }
        other => eprintln!("unknown experiment '{other}' (expected one or two)"),
    }
    Ok(())
}
