//! Mean test accuracy per aggregation mode on a mixed-homophily federation.
//!
//! Usage: cargo run --release --example ablation -- [seeds] [rounds] [gamma]

use fedsim_core::csbm::{generate_csbm, CsbmParams};
use fedsim_core::fedrun::{run_federation, AggregationMode, FedConfig};
use fedsim_core::graph::adjusted_homophily;

fn main() -> fedsim_core::Result<()> {
    let args: Vec<f64> = std::env::args()
        .skip(1)
        .filter_map(|a| a.parse().ok())
        .collect();
    let seeds = args.first().copied().unwrap_or(5.0) as u64;
    let rounds = args.get(1).copied().unwrap_or(100.0) as usize;
    let gamma = args.get(2).copied().unwrap_or(1.0);

    for seed in 0..seeds {
        let graphs: Vec<_> = (0..6u64)
            .map(|m| {
                let (p_in, p_out) = if m < 3 {
                    (0.0533, 0.0133)
                } else {
                    (0.0233, 0.0433)
                };
                generate_csbm(&CsbmParams {
                    n: 300,
                    c: 2,
                    d: 8,
                    p_in,
                    p_out,
                    mu: 1.0,
                    sigma_f: 1.5,
                    seed: seed * 100 + m,
                })
            })
            .collect::<Result<_, _>>()?;
        let h: Vec<String> = graphs
            .iter()
            .map(|g| format!("{:+.2}", adjusted_homophily(g).unwrap()))
            .collect();
        print!("seed {seed} h_adj [{}]", h.join(" "));
        for mode in AggregationMode::ALL {
            let mut cfg = FedConfig::new(6, rounds, mode, seed);
            cfg.gamma = gamma;
            let out = run_federation(&cfg, graphs.clone())?;
            print!("  {:?}={:.4}", mode, out.report.mean_test);
        }
        println!();
    }
    Ok(())
}
