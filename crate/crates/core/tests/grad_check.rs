//! Central finite-difference checks for every differentiable op, in f64.

use tunelab_core::rng::stream;
use tunelab_core::{Tape, Tensor, Var};

const FD_STEP: f64 = 1e-5;
const REL_TOL: f64 = 1e-4;

/// Compare analytic gradients of `build` (which must end in a scalar) against
/// central finite differences over every element of every leaf.
fn check_grads(
    name: &str,
    leaves: &[Tensor<f64>],
    build: impl Fn(&mut Tape<f64>, &[Var]) -> Var,
) {
    let eval = |inputs: &[Tensor<f64>]| -> f64 {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs
            .iter()
            .map(|t| tape.leaf(t.clone()).unwrap())
            .collect();
        let root = build(&mut tape, &vars);
        tape.value(root).item()
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = leaves
        .iter()
        .map(|t| tape.leaf(t.clone()).unwrap())
        .collect();
    let root = build(&mut tape, &vars);
    let grads = tape.backward(root).unwrap();

    for (li, leaf) in leaves.iter().enumerate() {
        let analytic = grads.grad(vars[li]);
        for ei in 0..leaf.len() {
            let mut plus = leaves.to_vec();
            plus[li].data_mut()[ei] += FD_STEP;
            let mut minus = leaves.to_vec();
            minus[li].data_mut()[ei] -= FD_STEP;
            let fd = (eval(&plus) - eval(&minus)) / (2.0 * FD_STEP);
            let an = analytic.data()[ei];
            let denom = an.abs().max(fd.abs()).max(1e-6);
            let rel = (an - fd).abs() / denom;
            assert!(
                rel < REL_TOL,
                "{name}: leaf {li} elem {ei}: analytic {an} vs fd {fd} (rel {rel:.2e})"
            );
        }
    }
}

fn rand_tensor(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = stream(seed, "grad-check");
    Tensor::randn(shape, 0.8, &mut rng)
}

#[test]
fn grad_matmul() {
    check_grads(
        "matmul",
        &[rand_tensor(&[3, 4], 1), rand_tensor(&[4, 2], 2)],
        |tape, vs| {
            let y = tape.matmul(vs[0], vs[1]).unwrap();
            tape.sum(y).unwrap()
        },
    );
}

#[test]
fn grad_matmul_nt() {
    check_grads(
        "matmul_nt",
        &[rand_tensor(&[3, 4], 3), rand_tensor(&[2, 4], 4)],
        |tape, vs| {
            let y = tape.matmul_nt(vs[0], vs[1]).unwrap();
            tape.sum(y).unwrap()
        },
    );
}

#[test]
fn grad_batch_matmul() {
    check_grads(
        "batch_matmul",
        &[rand_tensor(&[2, 3, 4], 5), rand_tensor(&[2, 4, 2], 6)],
        |tape, vs| {
            let y = tape.batch_matmul(vs[0], vs[1]).unwrap();
            tape.sum(y).unwrap()
        },
    );
}

#[test]
fn grad_batch_matmul_nt() {
    check_grads(
        "batch_matmul_nt",
        &[rand_tensor(&[2, 3, 4], 7), rand_tensor(&[2, 5, 4], 8)],
        |tape, vs| {
            let y = tape.batch_matmul_nt(vs[0], vs[1]).unwrap();
            tape.sum(y).unwrap()
        },
    );
}

#[test]
fn grad_add_mul_scale() {
    check_grads(
        "add_mul_scale",
        &[rand_tensor(&[2, 3], 9), rand_tensor(&[2, 3], 10)],
        |tape, vs| {
            let a = tape.add(vs[0], vs[1]).unwrap();
            let m = tape.mul(a, vs[0]).unwrap();
            let s = tape.scale(m, 0.37).unwrap();
            tape.sum(s).unwrap()
        },
    );
}

#[test]
fn grad_silu() {
    check_grads("silu", &[rand_tensor(&[3, 3], 11)], |tape, vs| {
        let y = tape.silu(vs[0]).unwrap();
        tape.sum(y).unwrap()
    });
}

#[test]
fn grad_rms_norm() {
    check_grads(
        "rms_norm",
        &[rand_tensor(&[3, 4], 12), rand_tensor(&[4], 13)],
        |tape, vs| {
            let y = tape.rms_norm(vs[0], vs[1], 1e-6).unwrap();
            // weight the outputs unevenly so row couplings are exercised
            let w = tape
                .constant(
                    Tensor::new(
                        vec![3, 4],
                        (0..12).map(|i| 0.1 * i as f64 - 0.4).collect(),
                    )
                    .unwrap(),
                )
                .unwrap();
            let y = tape.mul(y, w).unwrap();
            tape.sum(y).unwrap()
        },
    );
}

#[test]
fn grad_gather() {
    check_grads("gather", &[rand_tensor(&[5, 3], 14)], |tape, vs| {
        let y = tape.gather(vs[0], &[1, 4, 1, 0]).unwrap();
        tape.sum(y).unwrap()
    });
}

#[test]
fn grad_reshape_swap_middle() {
    check_grads(
        "reshape_swap_middle",
        &[rand_tensor(&[2, 2, 3, 2], 15)],
        |tape, vs| {
            let y = tape.swap_middle(vs[0]).unwrap();
            let y = tape.reshape(y, vec![2 * 3, 2 * 2]).unwrap();
            let w = tape
                .constant(
                    Tensor::new(
                        vec![6, 4],
                        (0..24).map(|i| (i as f64).sin()).collect(),
                    )
                    .unwrap(),
                )
                .unwrap();
            let y = tape.mul(y, w).unwrap();
            tape.sum(y).unwrap()
        },
    );
}

#[test]
fn grad_row_softmax() {
    check_grads("row_softmax", &[rand_tensor(&[3, 5], 16)], |tape, vs| {
        let p = tape.row_softmax(vs[0]).unwrap();
        let w = tape
            .constant(
                Tensor::new(vec![3, 5], (0..15).map(|i| (i as f64) * 0.2).collect())
                    .unwrap(),
            )
            .unwrap();
        let y = tape.mul(p, w).unwrap();
        tape.sum(y).unwrap()
    });
}

#[test]
fn grad_causal_softmax() {
    check_grads(
        "causal_softmax",
        &[rand_tensor(&[2, 4, 4], 17)],
        |tape, vs| {
            let p = tape.causal_softmax(vs[0]).unwrap();
            let w = tape
                .constant(
                    Tensor::new(
                        vec![2, 4, 4],
                        (0..32).map(|i| (i as f64) * 0.1 - 1.0).collect(),
                    )
                    .unwrap(),
                )
                .unwrap();
            let y = tape.mul(p, w).unwrap();
            tape.sum(y).unwrap()
        },
    );
}

#[test]
fn grad_masked_cross_entropy() {
    check_grads(
        "masked_cross_entropy",
        &[rand_tensor(&[4, 6], 18)],
        |tape, vs| {
            tape.masked_cross_entropy(vs[0], &[2, 0, 5, 1], &[true, false, true, true])
                .unwrap()
        },
    );
}

#[test]
fn grad_masked_kl_adapter_side() {
    let base = rand_tensor(&[3, 5], 19);
    check_grads("masked_kl", &[rand_tensor(&[3, 5], 20)], |tape, vs| {
        let b = tape.constant(base.clone()).unwrap();
        tape.masked_kl(vs[0], b, &[true, true, false]).unwrap()
    });
}

#[test]
fn grad_masked_kl_both_sides() {
    check_grads(
        "masked_kl_both",
        &[rand_tensor(&[2, 4], 21), rand_tensor(&[2, 4], 22)],
        |tape, vs| tape.masked_kl(vs[0], vs[1], &[true, true]).unwrap(),
    );
}

#[test]
fn grad_dropout_fixed_mask() {
    // Dropout draws its mask from the stream at op creation; replaying the
    // same stream yields the same mask, so finite differences are valid.
    check_grads("dropout", &[rand_tensor(&[4, 4], 23)], |tape, vs| {
        let mut rng = stream(99, "dropout-test");
        let y = tape.dropout(vs[0], 0.5, &mut rng).unwrap();
        tape.sum(y).unwrap()
    });
}
