use super::{NodeId, NumError, Tape, Tensor};

/// Max relative error between the tape gradient of `f` at `x` and a central
/// finite difference: |analytic - numeric| / (|analytic| + |numeric| + 1e-12).
pub fn finite_difference_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64, NumError>
where
    F: Fn(&mut Tape, NodeId) -> Result<NodeId, NumError>,
{
    assert!(eps > 0.0, "eps must be positive");

    let mut tape = Tape::new();
    let xid = tape.leaf(x.clone());
    let loss = f(&mut tape, xid)?;
    let mut grads = tape.backward(loss)?;
    let analytic = grads.take(xid, &tape);

    let eval = |t: &Tensor| -> Result<f64, NumError> {
        let mut tape = Tape::new();
        let id = tape.constant(t.clone());
        let out = f(&mut tape, id)?;
        Ok(tape.value(out).scalar_value())
    };

    let mut max_err = 0.0f64;
    for i in 0..x.numel() {
        let mut xp = x.clone();
        xp.data_mut()[i] += eps;
        let mut xm = x.clone();
        xm.data_mut()[i] -= eps;
        let numeric = (eval(&xp)? - eval(&xm)?) / (2.0 * eps);
        let a = analytic.data()[i];
        let err = (a - numeric).abs() / (a.abs() + numeric.abs() + 1e-12);
        max_err = max_err.max(err);
    }
    Ok(max_err)
}
