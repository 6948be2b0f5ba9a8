//! Prints the learning-rate and τ schedules of a config and shows the EMA
//! teacher converging on a frozen student.
//!
//! `cargo run --example teacher_schedules -- [config]`

use eat_core::bootstrap::ema_update;
use eat_core::numerics::{ParamSet, Tensor};
use eat_core::pipeline::config::TrainConfig;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let cfg = match std::env::args().nth(1) {
        Some(p) => TrainConfig::load(p.as_ref())?,
        None => TrainConfig::default(),
    };
    let (lr, tau) = (cfg.lr_schedule(), cfg.tau());
    println!("{:>8} {:>12} {:>10}", "step", "lr", "τ");
    for i in 0..=10 {
        let step = cfg.steps * i / 10;
        println!("{step:>8} {:>12.4e} {:>10.6}", lr.lr_at(step), tau.tau_at(step));
    }

    let student: ParamSet = [("w".to_string(), Tensor::from_fn(vec![4], |i| i as f64))].into_iter().collect();
    let mut teacher: ParamSet = [("teacher.w".to_string(), Tensor::zeros(vec![4]))].into_iter().collect();
    let t = 0.9;
    for k in 1..=50u32 {
        ema_update(&mut teacher, &student, "teacher.", t)?;
        if [1, 10, 50].contains(&k) {
            let got = teacher.get("teacher.w").unwrap().data()[3];
            println!("τ={t} after {k:>2} updates: teacher {got:.6}, closed form {:.6}", 3.0 * (1.0 - t.powi(k as i32)));
        }
    }
    Ok(())
}
