//! Checks the analytic gradient of the full pre-training loss against central
//! finite differences on a two-layer model.
//!
//! `cargo run --example gradient_check -- [clones]`

use eat_core::encoder::{EncoderConfig, Mode};
use eat_core::error::EatError;
use eat_core::masking::{make_clone_set, BlockShape};
use eat_core::model::{init_student, pretrain_loss, ClipInput, ModelConfig, Teacher};
use eat_core::numerics::{finite_difference_check, Tensor};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let clones: usize = std::env::args().nth(1).map(|s| s.parse()).transpose()?.unwrap_or(1);
    let cfg = ModelConfig {
        patch_size: 4,
        encoder: EncoderConfig {
            layers: 2,
            embed_dim: 16,
            heads: 2,
            mlp_ratio: 2.0,
            droppath_rate: 0.0,
            dropout: 0.0,
        },
        decoder_layers: 2,
        decoder_kernel: 3,
    };
    let mut student = init_student(&cfg, 1)?;
    // Freshly initialized weights are small enough that many gradients vanish.
    for (k, (_, t)) in student.iter_mut().enumerate() {
        let noise = Tensor::from_fn(t.shape().to_vec(), |i| (((i + 3 * k) * 7919) % 101) as f64 / 250.0 - 0.2);
        *t = t.add(&noise)?;
    }
    let values = Tensor::from_fn(vec![16, 16], |i| (i as f64 * 0.37).sin());
    let target = Teacher::from_student(&student).targets(&cfg, &values)?;
    let clip = ClipInput::new(&values, cfg.patch_size)?;
    let plans = make_clone_set(clip.grid, 0.5, &[BlockShape::new(2, 2)], clones, 3)?.clones;
    let started = std::time::Instant::now();
    for lambda in [0.0, 1.0] {
        let report = finite_difference_check(
            |tape, b| Ok::<_, EatError>(pretrain_loss(tape, b, &cfg, &clip, &target, &plans, lambda, Mode::Eval)?.total),
            &student,
            1e-5,
        )?;
        println!(
            "λ={lambda}: {} coordinates, max relative error {:.2e} at {:?}",
            report.coordinates, report.max_rel_error, report.worst
        );
    }
    println!("{:.1} s", started.elapsed().as_secs_f64());
    Ok(())
}
