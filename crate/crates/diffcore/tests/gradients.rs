use irpatch_diffcore::{finite_diff_check, DiffError, Tape, Tensor, Var, DEFAULT_EPS};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const TOL: f64 = 1e-4;
const INSTANCES: usize = 20;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

/// Values bounded away from zero so kinked ops are probed off their kink.
fn rand_off_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| {
        let m = rng.gen_range(0.05..1.0);
        if rng.gen_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

/// Random linear read-out so every output coordinate gets a distinct weight.
fn weighted_sum(tape: &mut Tape, v: Var, seed: u64) -> Result<Var, DiffError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = tape.shape(v).to_vec();
    let w = tape.constant(rand_tensor(&mut rng, &shape));
    let p = tape.mul(v, w)?;
    tape.reduce_sum(p)
}

fn check_op<G, F>(name: &str, mut gen: G, f: F)
where
    G: FnMut(&mut ChaCha8Rng) -> Tensor,
    F: Fn(&mut Tape, Var, &Tensor) -> Result<Var, DiffError> + Copy,
{
    let mut rng = ChaCha8Rng::seed_from_u64(0xD1FF);
    for inst in 0..INSTANCES {
        let x = gen(&mut rng);
        let aux = rand_tensor(&mut rng, x.shape());
        let report = finite_diff_check(
            |tape, v| {
                let y = f(tape, v, &aux)?;
                weighted_sum(tape, y, inst as u64)
            },
            &x,
            DEFAULT_EPS,
        )
        .unwrap_or_else(|e| panic!("{name} instance {inst}: {e}"));
        assert!(
            report.max_rel_error <= TOL,
            "{name} instance {inst}: error {} at {}",
            report.max_rel_error,
            report.worst_index
        );
    }
}

#[test]
fn elementwise_ops_match_finite_differences() {
    let shape = [3, 4];
    check_op(
        "add",
        |r| rand_tensor(r, &shape),
        |t, x, aux| {
            let c = t.leaf(aux.clone());
            t.add(x, c)
        },
    );
    check_op(
        "sub",
        |r| rand_tensor(r, &shape),
        |t, x, aux| {
            let c = t.leaf(aux.clone());
            t.sub(c, x)
        },
    );
    check_op(
        "mul",
        |r| rand_tensor(r, &shape),
        |t, x, aux| {
            let c = t.leaf(aux.clone());
            t.mul(x, c)
        },
    );
    check_op(
        "scalar-mul",
        |r| rand_tensor(r, &shape),
        |t, x, _| t.scalar_mul(x, -2.5),
    );
    check_op(
        "leaky-relu",
        |r| rand_off_zero(r, &shape),
        |t, x, _| t.leaky_relu(x, 0.1),
    );
    check_op("sigmoid", |r| rand_tensor(r, &shape), |t, x, _| t.sigmoid(x));
    check_op("exp", |r| rand_tensor(r, &shape), |t, x, _| t.exp(x));
    check_op(
        "log",
        |r| Tensor::from_fn(&shape, |_| r.gen_range(0.2..2.0)),
        |t, x, _| t.log(x),
    );
    check_op("clamp", |r| rand_off_zero(r, &shape), |t, x, _| t.clamp(x, -0.5, 0.5));
    check_op(
        "bce",
        |r| rand_tensor(r, &shape),
        |t, x, aux| {
            let target = aux.data().iter().map(|v| (v + 1.0) / 2.0).collect();
            t.bce_with_logits(x, target)
        },
    );
    check_op(
        "smooth-l1",
        |r| rand_tensor(r, &shape),
        |t, x, aux| t.smooth_l1(x, aux.data().iter().map(|v| v * 3.0).collect(), 1.0),
    );
}

#[test]
fn structural_ops_match_finite_differences() {
    check_op(
        "matmul",
        |r| rand_tensor(r, &[3, 4]),
        |t, x, _| {
            let b = t.constant(Tensor::from_fn(&[4, 2], |i| (i as f64 * 0.7).sin()));
            let y = t.matmul(x, b)?;
            // Also differentiate through the right operand.
            let c = t.constant(Tensor::from_fn(&[2, 3], |i| (i as f64 * 0.3).cos()));
            let z = t.matmul(c, x)?;
            let zs = t.reduce_sum(z)?;
            let ys = t.reduce_sum(y)?;
            t.add(ys, zs)
        },
    );
    check_op(
        "softmax-axis0",
        |r| rand_tensor(r, &[2, 3, 3]),
        |t, x, _| t.softmax(x, 0),
    );
    check_op(
        "softmax-axis2",
        |r| rand_tensor(r, &[2, 3, 3]),
        |t, x, _| t.softmax(x, 2),
    );
    check_op("reduce-mean", |r| rand_tensor(r, &[5]), |t, x, _| t.reduce_mean(x));
    check_op("reduce-sum", |r| rand_tensor(r, &[2, 2]), |t, x, _| t.reduce_sum(x));
    check_op("max-over-axis", |r| rand_tensor(r, &[3, 5]), |t, x, _| t.max_axis(x, 1));
    check_op(
        "concat",
        |r| rand_tensor(r, &[2, 3]),
        |t, x, aux| {
            let c = t.constant(aux.clone());
            t.concat(&[x, c, x], 1)
        },
    );
    check_op("reshape", |r| rand_tensor(r, &[2, 6]), |t, x, _| t.reshape(x, &[3, 4]));
    check_op(
        "gather",
        |r| rand_tensor(r, &[4]),
        |t, x, _| t.gather(x, vec![Some(3), None, Some(0), Some(3), Some(1)], &[5]),
    );
    check_op(
        "paste",
        |r| rand_tensor(r, &[5, 6]),
        |t, x, aux| {
            let patch = t.constant(Tensor::from_fn(&[2, 3], |i| aux.data()[i]));
            let pasted = t.paste(x, patch, 1, 2)?;
            // And the patch side of the op.
            let p2 = t.reshape(x, &[5, 6])?;
            let small = t.gather(p2, (0..6).map(Some).collect(), &[2, 3])?;
            let base = t.constant(Tensor::zeros(&[5, 6]));
            let other = t.paste(base, small, 3, 3)?;
            t.add(pasted, other)
        },
    );
    check_op(
        "bilinear-sample",
        |r| rand_tensor(r, &[5, 5]),
        |t, x, aux| {
            let pts: Vec<(f64, f64)> = aux
                .data()
                .chunks_exact(2)
                .map(|c| (2.0 + 2.6 * c[0] + 0.013, 2.0 + 2.6 * c[1] + 0.029))
                .collect();
            let n = pts.len();
            t.bilinear_sample(x, &pts, &[n])
        },
    );
}

#[test]
fn conv2d_matches_finite_differences() {
    for (stride, pad, k) in [(1, 0, 1), (1, 1, 3), (2, 1, 3)] {
        check_op(
            "conv2d-input",
            |r| rand_tensor(r, &[2, 5, 6]),
            |t, x, _| {
                let w = t.constant(Tensor::from_fn(&[3, 2, k, k], |i| ((i * 7 % 11) as f64 - 5.0) * 0.1));
                let b = t.constant(Tensor::new([3], vec![0.1, -0.2, 0.3]).unwrap());
                t.conv2d(x, w, Some(b), stride, pad)
            },
        );
        check_op(
            "conv2d-weight",
            |r| rand_tensor(r, &[3, 2, k, k]),
            |t, w, _| {
                let x = t.constant(Tensor::from_fn(&[2, 5, 6], |i| (i as f64 * 0.31).sin()));
                t.conv2d(x, w, None, stride, pad)
            },
        );
        check_op(
            "conv2d-bias",
            |r| rand_tensor(r, &[3]),
            |t, b, _| {
                let x = t.constant(Tensor::from_fn(&[2, 5, 6], |i| (i as f64 * 0.31).sin()));
                let w = t.constant(Tensor::from_fn(&[3, 2, k, k], |i| (i as f64 * 0.17).cos()));
                t.conv2d(x, w, Some(b), stride, pad)
            },
        );
    }
}

#[test]
fn forward_examples() {
    let mut t = Tape::new();
    let img = t.constant(Tensor::from_fn(&[1, 3, 3], |i| i as f64));
    let w = t.constant(Tensor::new([1, 1, 1, 1], vec![1.0]).unwrap());
    let y = t.conv2d(img, w, None, 1, 0).unwrap();
    assert_eq!(t.value(y).data(), t.value(img).data());

    let z = t.constant(Tensor::scalar(0.0));
    let s = t.sigmoid(z).unwrap();
    assert_eq!(t.value(s).item(), 0.5);

    let a = t.constant(Tensor::new([2], vec![0.7, 0.7]).unwrap());
    let sm = t.softmax(a, 0).unwrap();
    assert_eq!(t.value(sm).data(), &[0.5, 0.5]);
}

#[test]
fn backward_examples() {
    let mut t = Tape::new();
    let x = t.leaf(Tensor::new([3], vec![1.0, 2.0, 3.0]).unwrap());
    let sq = t.mul(x, x).unwrap();
    let root = t.reduce_sum(sq).unwrap();
    let g = t.backward(root).unwrap();
    assert_eq!(g.get(x).unwrap().data(), &[2.0, 4.0, 6.0]);

    let mut t = Tape::new();
    let w = t.leaf(Tensor::scalar(0.0));
    let s = t.sigmoid(w).unwrap();
    let g = t.backward(s).unwrap();
    assert_eq!(g.get(w).unwrap().item(), 0.25);
}

#[test]
fn errors_are_reported() {
    let mut t = Tape::new();
    let a = t.leaf(Tensor::zeros(&[2, 3]));
    let b = t.leaf(Tensor::zeros(&[3, 2]));
    match t.add(a, b) {
        Err(DiffError::ShapeMismatch { op, detail }) => {
            assert_eq!(op, "add");
            assert!(detail.contains("[2, 3]") && detail.contains("[3, 2]"));
        }
        other => panic!("expected shape mismatch, got {other:?}"),
    }
    assert!(t.matmul(a, a).is_err());
    assert!(matches!(t.log(a), Err(DiffError::Domain { op: "log", .. })));
    assert!(matches!(t.backward(a), Err(DiffError::NonScalarRoot { .. })));
    let big = t.constant(Tensor::scalar(1000.0));
    assert!(matches!(t.exp(big), Err(DiffError::NonFinite { .. })));
}

#[test]
fn fan_out_accumulates() {
    // y = x*x + 3x consumed twice vs the fused derivative 2x + 3.
    let xs = [0.3, -1.2, 2.0];
    let mut t = Tape::new();
    let x = t.leaf(Tensor::new([3], xs.to_vec()).unwrap());
    let sq = t.mul(x, x).unwrap();
    let lin = t.scalar_mul(x, 3.0).unwrap();
    let y = t.add(sq, lin).unwrap();
    let root = t.reduce_sum(y).unwrap();
    let g = t.backward(root).unwrap();
    for (gi, xi) in g.get(x).unwrap().data().iter().zip(xs) {
        assert!((gi - (2.0 * xi + 3.0)).abs() < 1e-15);
    }
}

#[test]
fn constants_get_no_gradient() {
    let mut t = Tape::new();
    let c = t.constant(Tensor::scalar(2.0));
    let x = t.leaf(Tensor::scalar(3.0));
    let y = t.mul(c, x).unwrap();
    let g = t.backward(y).unwrap();
    assert!(g.get(c).is_none());
    assert_eq!(g.get(x).unwrap().item(), 2.0);
}

#[test]
fn linear_function_checks_exactly() {
    // Dyadic inputs and step keep every perturbed sum exactly representable.
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = Tensor::from_fn(&[4, 4], |_| rng.gen_range(-1024i32..1024) as f64 / 1024.0);
    let r = finite_diff_check(|t, v| t.reduce_sum(v), &x, 2f64.powi(-17)).unwrap();
    assert!(r.max_rel_error < 1e-12, "{}", r.max_rel_error);

    // With the default step, only rounding separates the two.
    let x = rand_tensor(&mut rng, &[4, 4]);
    let r = finite_diff_check(|t, v| t.reduce_sum(v), &x, DEFAULT_EPS).unwrap();
    assert!(r.max_rel_error < 1e-9, "{}", r.max_rel_error);
}

#[test]
fn hard_threshold_is_flagged() {
    let x = Tensor::new([3], vec![0.2, 0.5, 0.9]).unwrap();
    let res = finite_diff_check(
        |t, v| {
            let h = t.threshold(v, 0.5)?;
            t.reduce_sum(h)
        },
        &x,
        DEFAULT_EPS,
    );
    assert!(matches!(res, Err(DiffError::NonDifferentiable { .. })));
}

fn small_net(seed: u64) -> (Vec<f64>, Vec<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut t = Tape::new();
    let x = t.leaf(rand_tensor(&mut rng, &[1, 8, 8]));
    let w = t.leaf(rand_tensor(&mut rng, &[4, 1, 3, 3]));
    let h = t.conv2d(x, w, None, 2, 1).unwrap();
    let a = t.leaky_relu(h, 0.1).unwrap();
    let s = t.sigmoid(a).unwrap();
    let m = t.max_axis(s, 0).unwrap();
    let root = t.reduce_mean(m).unwrap();
    let g = t.backward(root).unwrap();
    let mut fwd = t.value(s).data().to_vec();
    fwd.push(t.value(root).item());
    let mut grads = g.get(x).unwrap().data().to_vec();
    grads.extend_from_slice(g.get(w).unwrap().data());
    (fwd, grads)
}

#[test]
fn repeated_runs_are_bit_identical() {
    let (f1, g1) = small_net(11);
    let (f2, g2) = small_net(11);
    assert_eq!(
        f1.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
        f2.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
    );
    assert_eq!(
        g1.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
        g2.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
    );
}

mod props {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn softmax_rows_sum_to_one(v in prop::collection::vec(-30.0f64..30.0, 6)) {
            let mut t = Tape::new();
            let x = t.constant(Tensor::new([2, 3], v).unwrap());
            let s = t.softmax(x, 0).unwrap();
            let d = t.value(s).data();
            for c in 0..3 {
                prop_assert!((d[c] + d[3 + c] - 1.0).abs() < 1e-12);
            }
        }

        #[test]
        fn forward_values_stay_finite(v in prop::collection::vec(-50.0f64..50.0, 9)) {
            let mut t = Tape::new();
            let x = t.constant(Tensor::new([1, 3, 3], v).unwrap());
            let w = t.constant(Tensor::full(&[2, 1, 3, 3], 0.5));
            let c = t.conv2d(x, w, None, 1, 1).unwrap();
            let s = t.sigmoid(c).unwrap();
            let sm = t.softmax(s, 0).unwrap();
            let l = t.log(sm).unwrap();
            prop_assert!(t.value(l).all_finite());
        }
    }
}
