//! Dense 2-D arrays with reverse-mode differentiation.
//!
//! The [`Tape`] records every primitive op during a forward pass and
//! replays adjoints in one reverse sweep. Everything is f64; there is no
//! broadcasting beyond the explicit row/column ops.

mod gradcheck;
mod tape;
mod tensor;

pub use gradcheck::grad_check;
pub use tape::{Gradients, NodeId, Tape, UNIT_NORM_EPS};
pub use tensor::Tensor;

#[cfg(test)]
mod proptests {
    use super::*;
    use proptest::prelude::*;

    fn finite_row(len: usize) -> impl Strategy<Value = Vec<f64>> {
        proptest::collection::vec(-30.0..30.0f64, len)
    }

    proptest! {
        #[test]
        fn softmax_rows_sum_to_one(row in finite_row(6)) {
            let mut tape = Tape::new();
            let x = tape.input(Tensor::row_vector(&row));
            let y = tape.softmax_rows(x);
            let sum: f64 = tape.value(y).data().iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-9);
        }

        #[test]
        fn log_softmax_matches_log_of_softmax(row in finite_row(5)) {
            let mut tape = Tape::new();
            let x = tape.input(Tensor::row_vector(&row));
            let s = tape.softmax_rows(x);
            let ls = tape.log_softmax_rows(x);
            for (a, b) in tape.value(ls).data().iter().zip(tape.value(s).data()) {
                prop_assert!((a - b.ln()).abs() < 1e-9);
            }
        }

        #[test]
        fn logsumexp_shift_invariant(row in finite_row(5), c in -20.0..20.0f64) {
            let mut tape = Tape::new();
            let x = tape.input(Tensor::row_vector(&row));
            let shifted: Vec<f64> = row.iter().map(|v| v + c).collect();
            let xs = tape.input(Tensor::row_vector(&shifted));
            let a = tape.logsumexp_rows(x);
            let b = tape.logsumexp_rows(xs);
            prop_assert!((tape.value(b).item() - tape.value(a).item() - c).abs() < 1e-9);
        }

        #[test]
        fn unit_normalize_norm_is_zero_or_one(row in finite_row(7)) {
            let mut tape = Tape::new();
            let x = tape.input(Tensor::row_vector(&row));
            let u = tape.unit_normalize(x);
            let norm = tape.value(u).l2_norm();
            prop_assert!(norm.abs() < 1e-12 || (norm - 1.0).abs() < 1e-12);
        }

        #[test]
        fn primitive_grads_match_finite_differences(
            a in finite_row(6),
            b in finite_row(6),
        ) {
            // exercise a chain of primitives through a downstream scalar
            let scale = 0.05; // keep values small so tanh/sigmoid stay smooth
            let pa = Tensor::row_vector(&a.iter().map(|v| v * scale).collect::<Vec<_>>());
            let pb = Tensor::from_vec(3, 2, b.iter().map(|v| v * scale).collect());
            let err = grad_check(
                |tape, ids| {
                    let bt = tape.transpose(ids[1]);
                    let m = tape.matmul(ids[1], bt);
                    let s = tape.softmax_rows(m);
                    let lse = tape.logsumexp_rows(s);
                    let t = tape.tanh(ids[0]);
                    let u = tape.unit_normalize(t);
                    let part = tape.sum_all(u);
                    let part2 = tape.sum_all(lse);
                    tape.add(part, part2)
                },
                &[pa, pb],
                1e-5,
            );
            prop_assert!(err <= 1e-6, "grad error {}", err);
        }
    }
}
