//! Runs the synthetic domain-shift experiment for several seeds and prints
//! direct-transfer and adapted MeanR, optionally with the ablation rows.
//!
//! Usage: `shift_experiment CONFIG.json [SEEDS] [--ablate]`

use std::time::Instant;

use satret::config::RunConfig;
use satret::eval::evaluate;
use satret::pipeline::{adapt_target, pretrain_source, run_ablation, synthetic_domains};

fn main() -> satret::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let Some(path) = args.get(1) else {
        eprintln!("usage: shift_experiment CONFIG.json [SEEDS] [--ablate]");
        std::process::exit(2);
    };
    let base = RunConfig::load(path)?;
    let seeds: u64 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(5);
    let ablate = args.iter().any(|a| a == "--ablate");
    let start = Instant::now();
    let mut deltas = Vec::new();
    let mut row_sums = [0.0; 4];
    let mut full_max = 0;
    for seed in 0..seeds {
        let cfg = RunConfig { seed, ..base.clone() };
        let domains = synthetic_domains(&cfg)?;
        let pre = pretrain_source(&cfg, &domains.source, None)?;
        let src = evaluate(&pre.model, &domains.source.test)?.mean_recall;
        if ablate {
            let rep = run_ablation(&cfg, &pre.model, &domains)?;
            let rows: Vec<String> = rep
                .rows
                .iter()
                .map(|r| format!("{}={:.2}", r.label, r.recall.mean_recall))
                .collect();
            println!(
                "seed {seed}: src {src:.2} direct {:.2} {} full_max={} [{:.0?}]",
                rep.direct.mean_recall,
                rows.join(" "),
                rep.full_is_max,
                start.elapsed()
            );
            deltas.push(rep.rows[0].recall.mean_recall - rep.direct.mean_recall);
            for (acc, r) in row_sums.iter_mut().zip(&rep.rows) {
                *acc += r.recall.mean_recall / seeds as f64;
            }
            full_max += usize::from(rep.full_is_max);
        } else {
            let (out, rep) = adapt_target(&cfg, &pre.model, &domains, cfg.toggles, None)?;
            println!(
                "seed {seed}: src {src:.2} (ep {}) direct {:.2} adapted {:.2} delta {:+.2} (ep {}) [{:.0?}]",
                pre.selected_epoch,
                rep.direct.mean_recall,
                rep.adapted.mean_recall,
                rep.delta_mean_recall,
                out.selected_epoch,
                start.elapsed()
            );
            deltas.push(rep.delta_mean_recall);
        }
    }
    if ablate {
        println!("row means {row_sums:.2?} full max on {full_max}/{seeds}");
    }
    println!(
        "mean delta {:.2} in {:.1?}",
        deltas.iter().sum::<f64>() / deltas.len() as f64,
        start.elapsed()
    );
    Ok(())
}
