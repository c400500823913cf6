//! Semi-supervised toy run: `cargo run --release --example toy -- [labelled] [steps] [modes]`.

use std::time::Instant;

use sentvae::config::Mode;
use sentvae::experiment::{ToyConfig, ToyTask};

fn main() -> anyhow::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let labelled: usize = args.first().map_or(Ok(200), |s| s.parse())?;
    let mut config = ToyConfig::default();
    if let Some(s) = args.get(1) {
        config.steps = s.parse()?;
    }
    let modes = args.get(2).map_or("fsc,joint", String::as_str);
    let t = Instant::now();
    let task = ToyTask::prepare(config)?;
    eprintln!("prepared in {:.1?}", t.elapsed());
    for mode in modes.split(',') {
        let mode = match mode {
            "fsc" => Mode::FscOnly,
            "joint" => Mode::Joint,
            _ => Mode::AscOnly,
        };
        let t = Instant::now();
        let r = task.run(mode, labelled, 1, |m| {
            if m.step % 500 == 0 {
                eprintln!("{}", m.to_tsv());
            }
        })?;
        println!(
            "{mode:?} labelled={labelled} time={:.1?}\n{}",
            t.elapsed(),
            r.rouge.table()
        );
    }
    Ok(())
}
