//! Runs the two-layer MAC-NGD convergence harness and prints, per seed,
//! how often the contraction bound held.

use macgrad::convergence::{run_seed, HarnessConfig};

fn main() -> macgrad::Result<()> {
    let cfg = HarnessConfig::default();
    println!(
        "m={} n={} d={} rho={} eta_mult={}",
        cfg.m, cfg.n, cfg.d, cfg.rho, cfg.eta_mult
    );
    for seed in 0..cfg.seeds {
        let run = run_seed(&cfg, seed)?;
        let r = &run.report;
        println!(
            "seed {seed}: eta={:.3e} lambda_gamma={:.4} factor={:.6} bound-ok={:.1}% monotone={:.1}% drift-ok={} C={:.3} residual {:.4} -> {:.4}",
            run.eta,
            run.lambda_gamma,
            r.factor,
            100.0 * r.ratio_ok_fraction,
            100.0 * r.monotone_fraction,
            r.drift_ok,
            r.jacobian_c,
            run.trace.residual[0],
            run.trace.residual.last().unwrap(),
        );
        for v in &r.violations {
            println!("  flagged: {v}");
        }
    }
    Ok(())
}
