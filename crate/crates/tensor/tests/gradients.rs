use proptest::prelude::*;
use protgo_tensor::check::{central_difference, max_relative_error};
use protgo_tensor::{Tape, Tensor};

/// Layer-normed affine map followed by a masked cross-entropy, the shape of
/// computation an encoder head performs.
fn head_loss(tape: &mut Tape, x: &[f64], w: &[f64], grads: bool) -> (f64, Option<Vec<f64>>) {
    let x = tape.constant(Tensor::new(vec![3, 4], x.to_vec()).unwrap());
    let w = Tensor::new(vec![4, 5], w.to_vec()).unwrap();
    let w = tape.leaf(w.with_requires_grad(grads));
    let gamma = tape.constant(Tensor::new(vec![4], vec![1.0, 0.5, 2.0, 1.5]).unwrap());
    let beta = tape.constant(Tensor::new(vec![4], vec![0.1, 0.0, -0.2, 0.3]).unwrap());
    let h = tape.layer_norm(x, gamma, beta, 1e-12).unwrap();
    let logits = tape.matmul(h, w).unwrap();
    let loss = tape.row_nll(logits, &[(0, 2), (2, 4)]).unwrap();
    let value = tape.value(loss).item().unwrap();
    if !grads {
        return (value, None);
    }
    tape.backward(loss).unwrap();
    (value, tape.grad(w).map(<[f64]>::to_vec))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn backward_matches_finite_differences(
        x in prop::collection::vec(-2.0f64..2.0, 12),
        w in prop::collection::vec(-1.0f64..1.0, 20),
    ) {
        let (_, analytic) = head_loss(&mut Tape::new(), &x, &w, true);
        let numeric = central_difference(|w| head_loss(&mut Tape::new(), &x, w, false).0, &w, 1e-5);
        let err = max_relative_error(&analytic.unwrap(), &numeric);
        prop_assert!(err < 1e-5, "relative error {}", err);
    }
}
