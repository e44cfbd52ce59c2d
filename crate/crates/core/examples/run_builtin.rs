//! Run one of the built-in experiments and print a convergence summary.
//!
//! Usage: `run_builtin <name> [t_end]`

use adobs_core::experiments::{builtin, builtin_names};

fn main() {
    let mut args = std::env::args().skip(1);
    let name = args.next().unwrap_or_else(|| {
        eprintln!("usage: run_builtin <name> [t_end]; names: {:?}", builtin_names());
        std::process::exit(2);
    });
    let mut cfg = builtin(&name).unwrap_or_else(|| {
        eprintln!("unknown experiment `{name}`; names: {:?}", builtin_names());
        std::process::exit(2);
    });
    let mut pin = false;
    for arg in args {
        if arg == "--pin" {
            pin = true;
        } else {
            cfg.grid.t_end = arg.parse().expect("t_end must be a number");
        }
    }
    if pin {
        // freeze the box parameters at their true values
        let probe = cfg.build().expect("config should build");
        cfg.observer.lambda_init = Some(probe.spec.lambda_true().to_vec());
        cfg.observer.gamma = 0.0;
    }

    let exp = cfg.build().expect("config should build");
    let started = std::time::Instant::now();
    let result = exp.run().expect("run should succeed");
    let elapsed = started.elapsed();

    let theta_true = exp.spec.theta_true();
    let lambda_true = exp.spec.lambda_true();
    let traj = &result.trajectory;
    let last = traj.times.len() - 1;
    println!("experiment      : {name}");
    println!("wall time       : {:.2?}", elapsed);
    println!("records         : {}", traj.times.len());
    println!("final t         : {}", traj.times[last]);
    println!("theta_true      : {theta_true:?}");
    println!("theta_hat       : {:?}", traj.theta_hat[last]);
    let rel: Vec<f64> = traj.theta_hat[last]
        .iter()
        .zip(theta_true)
        .map(|(e, t)| if *t != 0.0 { (e - t).abs() / t.abs() } else { e.abs() })
        .collect();
    println!("theta rel err   : {rel:?}");
    println!("lambda_true     : {lambda_true:?}");
    println!("lambda_hat      : {:?}", traj.lambda_hat[last]);
    let rel: Vec<f64> = traj.lambda_hat[last]
        .iter()
        .zip(lambda_true)
        .map(|(e, t)| if *t != 0.0 { (e - t).abs() / t.abs() } else { e.abs() })
        .collect();
    println!("lambda rel err  : {rel:?}");
    println!("tail mean e_dz  : {:e}", result.tail.e_deadzone_mean);
    println!("tail lambda TV  : {:?}", result.tail.lambda_total_variation);
    println!("theta err norm  : {:e}", result.tail.theta_error_norm);
    println!("conv theta 5%   : {:?}", result.convergence.theta_within_5pct);
    println!("conv theta 10%  : {:?}", result.convergence.theta_within_10pct);
    println!("conv lambda 10% : {:?}", result.convergence.lambda_within_10pct);
    println!("delta_phi       : {:e}", result.diagnostics.delta_phi);
    println!("delta_xi        : {:e}", result.diagnostics.delta_xi);
    println!("delta_total     : {:e}", result.diagnostics.delta_total);
    println!("max torus drift : {:e}", result.diagnostics.max_torus_drift);
}
