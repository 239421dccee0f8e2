//! Central finite-difference utilities for validating gradients.
//!
//! These helpers never touch the tape: they only re-evaluate a closure, so
//! they can serve as an independent oracle for anything differentiable.

/// Central-difference gradient of `f` at `x` with step `h`.
pub fn finite_diff_gradient(f: impl Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut xp = x.to_vec();
    let mut out = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = xp[i];
        xp[i] = orig + h;
        let fp = f(&xp);
        xp[i] = orig - h;
        let fm = f(&xp);
        xp[i] = orig;
        out.push((fp - fm) / (2.0 * h));
    }
    out
}

/// Largest elementwise mismatch between `got` and `want` measured as
/// `|got - want| / max(1, |want|)`, i.e. absolute for small values and
/// relative for large ones.
pub fn max_mismatch(got: &[f64], want: &[f64]) -> f64 {
    assert_eq!(got.len(), want.len());
    got.iter()
        .zip(want)
        .map(|(g, w)| (g - w).abs() / w.abs().max(1.0))
        .fold(0.0, f64::max)
}

/// Asserts agreement within `tol` under the [`max_mismatch`] measure.
pub fn assert_close(got: &[f64], want: &[f64], tol: f64, what: &str) {
    let m = max_mismatch(got, want);
    assert!(
        m <= tol,
        "{what}: max mismatch {m:.3e} exceeds tolerance {tol:.1e}"
    );
}
