//! Finite-difference gradient checking (f64 only).
//!
//! Central differences with step `h` have truncation error O(h²) and roundoff
//! O(ε/h); at `h = 1e-5` on f64 both sit far below the tolerances used by the
//! checks, so any disagreement is a real backward-pass bug. Relative error is
//! floored at `1e-4` in the denominator: below that magnitude the comparison
//! degrades gracefully into an absolute one instead of amplifying FD noise.

use crate::error::Result;
use crate::tensor::Tensor;

/// Step used by every finite-difference check in the crate.
pub const FD_STEP: f64 = 1e-5;

/// Relative error with a magnitude floor.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / (a.abs().max(b.abs())).max(1e-4)
}

/// Central-difference gradient of scalar `f` w.r.t. every element of every
/// input tensor. `f` is re-evaluated on perturbed copies; it must be a pure
/// function of its inputs.
pub fn central_diff(
    f: &mut dyn FnMut(&[Tensor<f64>]) -> Result<f64>,
    inputs: &[Tensor<f64>],
    h: f64,
) -> Result<Vec<Tensor<f64>>> {
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    let mut grads = Vec::with_capacity(inputs.len());
    for ti in 0..inputs.len() {
        let mut g = Tensor::zeros(inputs[ti].shape().to_vec());
        for ei in 0..inputs[ti].numel() {
            let orig = work[ti].data()[ei];
            work[ti].data_mut()[ei] = orig + h;
            let plus = f(&work)?;
            work[ti].data_mut()[ei] = orig - h;
            let minus = f(&work)?;
            work[ti].data_mut()[ei] = orig;
            g.data_mut()[ei] = (plus - minus) / (2.0 * h);
        }
        grads.push(g);
    }
    Ok(grads)
}

/// Worst relative error across paired tensors. `analytic[i]` may be `None`
/// when no gradient flows to that input; the numeric gradient must then be
/// (numerically) zero.
pub fn max_rel_err(analytic: &[Option<&Tensor<f64>>], numeric: &[Tensor<f64>]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    let mut worst = 0.0f64;
    for (a, n) in analytic.iter().zip(numeric) {
        match a {
            Some(a) => {
                assert_eq!(a.shape(), n.shape());
                for (&av, &nv) in a.data().iter().zip(n.data()) {
                    worst = worst.max(rel_err(av, nv));
                }
            }
            None => {
                for &nv in n.data() {
                    worst = worst.max(rel_err(0.0, nv));
                }
            }
        }
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tape::{Tape, Var};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const SEEDS: u64 = 20;
    const TOL: f64 = 1e-6;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor<f64> {
        let numel = shape.iter().product();
        Tensor::new(shape, (0..numel).map(|_| rng.gen_range(-1.5..1.5)).collect()).unwrap()
    }

    /// Reduce a matrix output to a scalar through a fixed random weighting so
    /// the upstream gradient exercises every element independently.
    fn weighted_loss(tape: &mut Tape<f64>, out: Var, weights: &Tensor<f64>) -> Result<Var> {
        let w = tape.constant(weights.clone())?;
        let prod = tape.hadamard(out, w)?;
        tape.sum(prod)
    }

    /// Runs one op builder through analytic-vs-FD comparison over many seeds.
    /// The builder receives the tape and the parameter leaves and returns the
    /// op output to be reduced.
    fn check_op(
        name: &str,
        shapes: &[Vec<usize>],
        out_shape_of: &dyn Fn(&[Tensor<f64>]) -> Vec<usize>,
        build: &dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
    ) {
        for seed in 0..SEEDS {
            let mut rng = ChaCha8Rng::seed_from_u64(0xC0FFEE ^ seed);
            let inputs: Vec<Tensor<f64>> =
                shapes.iter().map(|s| rand_tensor(&mut rng, s.clone())).collect();
            let wshape = out_shape_of(&inputs);
            let weights = rand_tensor(&mut rng, wshape);

            let run = |ins: &[Tensor<f64>]| -> Result<(Tape<f64>, Vec<Var>, Var)> {
                let mut tape = Tape::checked();
                let vars: Vec<Var> =
                    ins.iter().map(|t| tape.param(t.clone())).collect::<Result<_>>()?;
                let out = build(&mut tape, &vars)?;
                let loss = if tape.value(out).numel() == 1 {
                    out
                } else {
                    weighted_loss(&mut tape, out, &weights)?
                };
                Ok((tape, vars, loss))
            };

            let (mut tape, vars, loss) = run(&inputs).unwrap();
            let grads = tape.backward(loss).unwrap();
            let analytic: Vec<Option<&Tensor<f64>>> = vars.iter().map(|&v| grads.get(v)).collect();

            let mut f = |ins: &[Tensor<f64>]| -> Result<f64> {
                let (tape, _, loss) = run(ins)?;
                tape.scalar_value(loss)
            };
            let numeric = central_diff(&mut f, &inputs, FD_STEP).unwrap();
            let err = max_rel_err(&analytic, &numeric);
            assert!(err <= TOL, "{name}: seed {seed} rel err {err:.3e}");
        }
    }

    #[test]
    fn fd_matmul() {
        check_op(
            "matmul",
            &[vec![5, 7], vec![7, 3]],
            &|_| vec![5, 3],
            &|t, v| t.matmul(v[0], v[1]),
        );
    }

    #[test]
    fn fd_hadamard() {
        check_op(
            "hadamard",
            &[vec![4, 3], vec![4, 3]],
            &|_| vec![4, 3],
            &|t, v| t.hadamard(v[0], v[1]),
        );
    }

    #[test]
    fn fd_add_sub_scale() {
        check_op("add", &[vec![3, 4], vec![3, 4]], &|_| vec![3, 4], &|t, v| t.add(v[0], v[1]));
        check_op("sub", &[vec![3, 4], vec![3, 4]], &|_| vec![3, 4], &|t, v| t.sub(v[0], v[1]));
        check_op("scale", &[vec![3, 4]], &|_| vec![3, 4], &|t, v| t.scale(v[0], -0.7));
    }

    #[test]
    fn fd_silu() {
        check_op("silu", &[vec![4, 5]], &|_| vec![4, 5], &|t, v| t.silu(v[0]));
    }

    #[test]
    fn fd_mul_broadcast_rows() {
        check_op(
            "mul_broadcast_rows",
            &[vec![4, 6], vec![6]],
            &|_| vec![4, 6],
            &|t, v| t.mul_broadcast_rows(v[0], v[1]),
        );
    }

    #[test]
    fn fd_rmsnorm() {
        check_op(
            "rmsnorm",
            &[vec![3, 5], vec![5]],
            &|_| vec![3, 5],
            &|t, v| t.rmsnorm(v[0], v[1], 1e-5),
        );
    }

    #[test]
    fn fd_transpose_slice_concat() {
        check_op("transpose", &[vec![3, 4]], &|_| vec![4, 3], &|t, v| t.transpose(v[0]));
        check_op(
            "slice_cols",
            &[vec![3, 6]],
            &|_| vec![3, 3],
            &|t, v| t.slice_cols(v[0], 2, 3),
        );
        check_op(
            "concat_cols",
            &[vec![3, 2], vec![3, 4]],
            &|_| vec![3, 6],
            &|t, v| t.concat_cols(&[v[0], v[1]]),
        );
    }

    #[test]
    fn fd_gather_rows() {
        check_op(
            "gather_rows",
            &[vec![5, 3]],
            &|_| vec![4, 3],
            &|t, v| t.gather_rows(v[0], &[1, 4, 1, 0]),
        );
    }

    #[test]
    fn fd_softmax_causal() {
        check_op(
            "softmax_causal",
            &[vec![5, 5]],
            &|_| vec![5, 5],
            &|t, v| t.softmax_causal(v[0]),
        );
    }

    #[test]
    fn fd_cross_entropy() {
        check_op(
            "cross_entropy",
            &[vec![4, 6]],
            &|_| vec![1],
            &|t, v| t.cross_entropy(v[0], &[3, 0, 5, 2]),
        );
    }

    #[test]
    fn fd_composite_chain() {
        // silu(A·B) ∘ C through rmsnorm: exercises accumulation through a
        // multi-op graph rather than single ops in isolation.
        check_op(
            "composite",
            &[vec![3, 4], vec![4, 5], vec![3, 5], vec![5]],
            &|_| vec![3, 5],
            &|t, v| {
                let mm = t.matmul(v[0], v[1])?;
                let act = t.silu(mm)?;
                let had = t.hadamard(act, v[2])?;
                t.rmsnorm(had, v[3], 1e-5)
            },
        );
    }

    #[test]
    fn rel_err_floors_small_magnitudes() {
        assert_eq!(rel_err(0.0, 0.0), 0.0);
        // Below the floor the comparison is absolute against 1e-4.
        assert!((rel_err(0.0, 1e-8) - 1e-4).abs() < 1e-12);
        assert!((rel_err(2.0, 1.0) - 0.5).abs() < 1e-12);
    }
}
