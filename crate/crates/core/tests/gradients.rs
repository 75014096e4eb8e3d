mod common;

use common::{composite_checks, elementary_checks, ELEMENTARY_TOL};

#[test]
fn elementary_ops_match_finite_differences() {
    for c in elementary_checks() {
        assert_eq!(c.tol, ELEMENTARY_TOL);
        assert!(c.passed(), "{}: relative error {:.3e} >= {:.0e}", c.name, c.worst, c.tol);
    }
}

#[test]
fn composite_losses_match_finite_differences() {
    let checks = composite_checks();
    assert!(checks.len() >= 12);
    for c in checks {
        assert!(c.passed(), "{}: relative error {:.3e} >= {:.0e}", c.name, c.worst, c.tol);
    }
}

struct WrongBackward;

impl tabdistill::tensor::CustomOp for WrongBackward {
    fn name(&self) -> &'static str {
        "wrong_square"
    }

    fn backward(&self, inputs: &[&tabdistill::tensor::Tensor], _: &tabdistill::tensor::Tensor, grad: &tabdistill::tensor::Tensor) -> Vec<tabdistill::tensor::Tensor> {
        // true derivative is 2x; report 3x
        let x = inputs[0];
        let d = x.data().iter().zip(grad.data()).map(|(x, g)| 3.0 * x * g).collect();
        vec![tabdistill::tensor::Tensor::new(x.rows(), x.cols(), d).unwrap()]
    }
}

#[test]
fn oracle_flags_a_wrong_derivative() {
    use tabdistill::tensor::{Tape, Tensor};
    let x = Tensor::row(vec![0.5, -1.0, 2.0]);
    let build = |inputs: &[Tensor]| {
        let mut tape = Tape::new();
        let v = tape.param(inputs[0].clone());
        let out = inputs[0].map(|a| a * a);
        let y = tape.custom(Box::new(WrongBackward), &[v], out);
        let l = tape.sum(y);
        (tape, l, vec![v])
    };
    let e = common::relative_error(&[x], &build);
    // |3x - 2x| / |3x|
    assert!((e - 1.0 / 3.0).abs() < 1e-6, "{e}");
}
