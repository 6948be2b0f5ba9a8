//! Teacher targets and the utterance-frame objective.
//!
//! Both loss terms are mean squared errors normalized by element count.

use serde::{Deserialize, Serialize};

use crate::error::{EatError, Result};
use crate::numerics::{standardize, Tape, Tensor, Var};

/// Variance floor of the per-position target standardization.
pub const TARGET_EPS: f64 = 1e-10;

/// Layer-averaged teacher target and its mean over patches.
#[derive(Debug, Clone, PartialEq)]
pub struct TeacherTarget {
    /// `[P, E]`
    pub y_a: Tensor,
    /// `[1, E]`
    pub y_bar: Tensor,
}

/// Zero mean and unit variance over channels, per position, with no affine.
pub fn standardize_layer(h: &Tensor) -> Result<Tensor> {
    h.dims2("standardize_layer")?;
    Ok(standardize(h, 1, TARGET_EPS)?)
}

/// Averages the standardized block outputs. All layers must share one shape.
pub fn build_targets(layers: &[Tensor]) -> Result<TeacherTarget> {
    let first = layers
        .first()
        .ok_or_else(|| EatError::Invalid("no teacher layers to build targets from".into()))?;
    let (p, e) = first.dims2("build_targets")?;
    let mut acc = Tensor::zeros(vec![p, e]);
    for l in layers {
        acc.add_assign(&standardize_layer(l)?)?;
    }
    let y_a = acc.scale(1.0 / layers.len() as f64);
    let mut bar = vec![0.0; e];
    for r in 0..p {
        for (b, v) in bar.iter_mut().zip(y_a.row(r)) {
            *b += v;
        }
    }
    let y_bar = Tensor::new(vec![1, e], bar.into_iter().map(|b| b / p as f64).collect())?;
    Ok(TeacherTarget { y_a, y_bar })
}

/// `mean((c' − ȳ)²)` over the E channels.
pub fn utterance_loss(tape: &mut Tape, c_prime: Var, y_bar: &Tensor) -> Result<Var> {
    let t = tape.constant(y_bar.clone());
    Ok(tape.mse(c_prime, t)?)
}

/// `mean((X_o − Y_o)²)` over all masked entries; zero when nothing is masked.
pub fn frame_loss(tape: &mut Tape, x_o: Var, y_o: &Tensor) -> Result<Var> {
    let t = tape.constant(y_o.clone());
    Ok(tape.mse(x_o, t)?)
}

/// Tape handles of one objective evaluation.
#[derive(Debug, Clone, Copy)]
pub struct UfoVars {
    pub l_u: Var,
    pub l_f: Var,
    pub total: Var,
    pub lambda: f64,
}

impl UfoVars {
    pub fn values(&self, tape: &Tape) -> UfoLoss {
        UfoLoss {
            l_u: tape.value(self.l_u).item(),
            l_f: tape.value(self.l_f).item(),
            lambda: self.lambda,
            l_ufo: tape.value(self.total).item(),
        }
    }
}

/// Scalar values of the objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UfoLoss {
    pub l_u: f64,
    pub l_f: f64,
    pub lambda: f64,
    pub l_ufo: f64,
}

/// Combines the two terms as `L_f + λ·L_u`. At `λ = 0` the total is the frame
/// loss node itself.
pub fn combine(tape: &mut Tape, l_u: Var, l_f: Var, lambda: f64) -> Result<UfoVars> {
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(EatError::Config(format!("utterance weight must be finite and ≥ 0, got {lambda}")));
    }
    let total = if lambda == 0.0 {
        l_f
    } else {
        let weighted = tape.scale(l_u, lambda);
        tape.add(l_f, weighted)?
    };
    Ok(UfoVars { l_u, l_f, total, lambda })
}

pub fn ufo(tape: &mut Tape, c_prime: Var, y_bar: &Tensor, x_o: Var, y_o: &Tensor, lambda: f64) -> Result<UfoVars> {
    let l_u = utterance_loss(tape, c_prime, y_bar)?;
    let l_f = frame_loss(tape, x_o, y_o)?;
    combine(tape, l_u, l_f, lambda)
}

/// Mean of per-clone totals, summed in clone order.
pub fn multi_clone_loss(tape: &mut Tape, per_clone: &[UfoVars]) -> Result<Var> {
    let (first, rest) = per_clone
        .split_first()
        .ok_or_else(|| EatError::Invalid("no clone losses to average".into()))?;
    if rest.is_empty() {
        return Ok(first.total);
    }
    let mut acc = first.total;
    for c in rest {
        acc = tape.add(acc, c.total)?;
    }
    Ok(tape.scale(acc, 1.0 / per_clone.len() as f64))
}

/// Component-wise mean of reported losses.
pub fn mean_loss(losses: &[UfoLoss]) -> Result<UfoLoss> {
    let first = losses
        .first()
        .ok_or_else(|| EatError::Invalid("no losses to average".into()))?;
    let n = losses.len() as f64;
    let sum = |f: fn(&UfoLoss) -> f64| losses.iter().map(f).sum::<f64>() / n;
    Ok(UfoLoss {
        l_u: sum(|l| l.l_u),
        l_f: sum(|l| l.l_f),
        lambda: first.lambda,
        l_ufo: sum(|l| l.l_ufo),
    })
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn random(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
        Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-1.0..1.0) * scale)
    }

    /// Independent oracle: two-pass per-row standardization, then a plain average.
    fn oracle(layers: &[Tensor]) -> Tensor {
        let (p, e) = layers[0].dims2("oracle").unwrap();
        let mut out = vec![0.0; p * e];
        for l in layers {
            for r in 0..p {
                let row = l.row(r);
                let mean = row.iter().sum::<f64>() / e as f64;
                let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / e as f64;
                for c in 0..e {
                    out[r * e + c] += (row[c] - mean) / (var + TARGET_EPS).sqrt() / layers.len() as f64;
                }
            }
        }
        Tensor::new(vec![p, e], out).unwrap()
    }

    #[test]
    fn targets_match_recomputation() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..20 {
            let layers: Vec<Tensor> = (0..3).map(|l| random(&mut rng, &[7, 5], 1.0 + l as f64 * 3.0)).collect();
            let t = build_targets(&layers).unwrap();
            assert!(t.y_a.max_abs_diff(&oracle(&layers)).unwrap() < 1e-12);
            for c in 0..5 {
                let col = (0..7).map(|r| t.y_a.get(&[r, c])).sum::<f64>() / 7.0;
                assert!((t.y_bar.get(&[0, c]) - col).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn single_and_repeated_layers() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let h = random(&mut rng, &[4, 6], 2.0);
        let s = standardize_layer(&h).unwrap();
        assert_eq!(build_targets(&[h.clone()]).unwrap().y_a, s);
        let twice = build_targets(&[h.clone(), h]).unwrap().y_a;
        assert!(twice.max_abs_diff(&s).unwrap() < 1e-15);
        assert!(build_targets(&[]).is_err());
    }

    #[test]
    fn standardized_rows_have_zero_mean_unit_variance() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let s = standardize_layer(&random(&mut rng, &[10, 16], 5.0)).unwrap();
        for r in 0..10 {
            let row = s.row(r);
            let mean = row.iter().sum::<f64>() / 16.0;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 16.0;
            assert!(mean.abs() < 1e-7);
            assert!((var - 1.0).abs() < 1e-6);
        }
    }

    fn losses(c: &[f64], ybar: &[f64], x: &[f64], y: &[f64], e: usize, lambda: f64) -> UfoLoss {
        let mut tape = Tape::new();
        let cv = tape.constant(Tensor::new(vec![1, e], c.to_vec()).unwrap());
        let xv = tape.constant(Tensor::new(vec![x.len() / e, e], x.to_vec()).unwrap());
        let u = ufo(
            &mut tape,
            cv,
            &Tensor::new(vec![1, e], ybar.to_vec()).unwrap(),
            xv,
            &Tensor::new(vec![y.len() / e, e], y.to_vec()).unwrap(),
            lambda,
        )
        .unwrap();
        u.values(&tape)
    }

    #[test]
    fn hand_values() {
        let l = losses(&[1.0, 0.0], &[0.0, 0.0], &[3.0, 4.0], &[0.0, 0.0], 2, 1.0);
        assert_eq!(l.l_u, 0.5);
        assert_eq!(l.l_f, 12.5);
        assert_eq!(l.l_ufo, 13.0);
        let doubled = losses(&[2.0, 0.0], &[0.0, 0.0], &[3.0, 4.0, 3.0, 4.0], &[0.0; 4], 2, 1.0);
        assert_eq!(doubled.l_u, 4.0 * l.l_u);
        assert_eq!(doubled.l_f, l.l_f);
        let perfect = losses(&[0.3, 0.1], &[0.3, 0.1], &[1.0, 2.0], &[1.0, 2.0], 2, 1.0);
        assert_eq!((perfect.l_u, perfect.l_f), (0.0, 0.0));
        let empty = losses(&[0.3, 0.1], &[0.0, 0.0], &[], &[], 2, 10.0);
        assert_eq!(empty.l_f, 0.0);
    }

    #[test]
    fn lambda_zero_is_the_frame_loss_node() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::scalar(2.0));
        let b = tape.constant(Tensor::scalar(3.0));
        let u = combine(&mut tape, a, b, 0.0).unwrap();
        assert_eq!(u.total, b);
        assert!(combine(&mut tape, a, b, -1.0).is_err());
    }

    #[test]
    fn clone_mean() {
        let mut tape = Tape::new();
        let mk = |tape: &mut Tape, u: f64, f: f64| {
            let (a, b) = (tape.constant(Tensor::scalar(u)), tape.constant(Tensor::scalar(f)));
            combine(tape, a, b, 1.0).unwrap()
        };
        let one = mk(&mut tape, 0.5, 2.0);
        let single = multi_clone_loss(&mut tape, &[one]).unwrap();
        assert_eq!(single, one.total);
        let same = multi_clone_loss(&mut tape, &[one; 16]).unwrap();
        assert!((tape.value(same).item() - 2.5).abs() < 1e-15);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let parts: Vec<UfoVars> = (0..16)
            .map(|_| {
                let (u, f) = (rng.random::<f64>(), rng.random::<f64>());
                mk(&mut tape, u, f)
            })
            .collect();
        let m = multi_clone_loss(&mut tape, &parts).unwrap();
        let hand = parts.iter().map(|p| tape.value(p.total).item()).sum::<f64>() / 16.0;
        assert!((tape.value(m).item() - hand).abs() < 1e-12);
        assert!(multi_clone_loss(&mut tape, &[]).is_err());
    }

    proptest! {
        #[test]
        fn decomposition_is_exact(lambda in prop::sample::select(vec![0.0, 0.01, 1.0, 10.0]), seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let c: Vec<f64> = (0..4).map(|_| rng.random_range(-2.0..2.0)).collect();
            let yb: Vec<f64> = (0..4).map(|_| rng.random_range(-2.0..2.0)).collect();
            let x: Vec<f64> = (0..12).map(|_| rng.random_range(-2.0..2.0)).collect();
            let y: Vec<f64> = (0..12).map(|_| rng.random_range(-2.0..2.0)).collect();
            let l = losses(&c, &yb, &x, &y, 4, lambda);
            prop_assert!(l.l_u >= 0.0 && l.l_f >= 0.0);
            prop_assert!((l.l_ufo - (l.l_f + lambda * l.l_u)).abs() <= 1e-12);
        }
    }
}
