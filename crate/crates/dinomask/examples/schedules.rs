//! Prints the training schedules: linear learning-rate warmup into cosine
//! decay, cosine weight decay, and the cosine teacher-EMA momentum ramp.
//!
//!     cargo run --example schedules

use dinomask::config::RunConfig;

fn main() {
    let cfg = RunConfig::desk();
    let total = 1000u64;
    let sch = cfg.schedules(total);

    println!("batch {} -> peak lr {:.2e} (base {} x batch/256)", cfg.batch_size, sch.peak_lr, cfg.base_lr);
    println!("warmup {} steps of {}\n", sch.warmup_steps, total);
    println!("{:>6} {:>12} {:>10} {:>10}", "step", "lr", "wd", "lambda");
    for t in (0..=total).step_by(100) {
        println!(
            "{t:>6} {:>12.4e} {:>10.4} {:>10.6}",
            sch.lr_at(t),
            sch.wd_at(t),
            sch.ema_lambda_at(t)
        );
    }

    // The endpoints are exact by construction, not approximations.
    assert_eq!(sch.ema_lambda_at(0), 0.996);
    assert_eq!(sch.ema_lambda_at(total), 1.0);
    assert_eq!(sch.wd_at(0), 0.04);
    assert_eq!(sch.wd_at(total), 0.4);
    println!("\nendpoints: lambda 0.996 -> 1.0, wd 0.04 -> 0.4 (exact)");
}
