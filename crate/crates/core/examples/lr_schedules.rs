//! Samples the trapezoid and cosine learning-rate schedules.
//!
//! cargo run --example lr_schedules -- [steps]

use mor::train::schedule::LrSchedule;

fn main() -> mor::Result<()> {
    let steps: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(1000);
    let trapezoid = LrSchedule::Trapezoid {
        warmup: steps / 20,
        plateau_end: steps - steps / 5,
        cooldown: steps / 5,
        peak: 3e-3,
    };
    let cosine = LrSchedule::Cosine {
        peak: 3e-3,
        min: 3e-4,
        steps,
    };
    println!("step,trapezoid,cosine");
    for t in (0..steps).step_by((steps / 20).max(1)) {
        println!("{t},{:.6e},{:.6e}", trapezoid.rate(t)?, cosine.rate(t)?);
    }
    Ok(())
}
