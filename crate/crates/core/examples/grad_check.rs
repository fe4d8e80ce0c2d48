//! Central-difference check of every differentiable op.
//!
//! cargo run --example grad_check -- [instances] [seed]

use std::time::Instant;

use vizgen::verify::verification_suite;

fn main() -> vizgen::Result<()> {
    let mut args = std::env::args().skip(1);
    let instances = args.next().map_or(20, |a| a.parse().expect("instances"));
    let seed = args.next().map_or(0, |a| a.parse().expect("seed"));
    let start = Instant::now();
    for check in verification_suite(instances, seed)? {
        println!(
            "{:<24} max relative error {:.2e} over {} coordinates ({} skipped at kinks)",
            check.op, check.max_error, check.coordinates, check.skipped
        );
    }
    println!("{:.1}s", start.elapsed().as_secs_f64());
    Ok(())
}
