//! Central finite-difference verification of analytic gradients.
//!
//! Used by the test suites to certify every loss gradient against a
//! numerical oracle in `f64`.

use ndarray::ArrayD;

/// Outcome of a successful gradient check.
#[derive(Debug, Clone, Copy)]
pub struct GradCheckReport {
    /// Number of elements compared across all tensors.
    pub checked: usize,
    /// Worst relative error seen.
    pub max_rel_err: f64,
}

/// Compare `analytic` gradients of `f` at `inputs` against central finite
/// differences with the given `step`.
///
/// Relative error uses `max(|analytic|, |numeric|, 1e-6)` as denominator and
/// must stay below `tol` for every element checked. Tensors larger than
/// `max_per_tensor` are subsampled on a deterministic stride.
pub fn check_gradients(
    inputs: &[ArrayD<f64>],
    analytic: &[ArrayD<f64>],
    f: impl Fn(&[ArrayD<f64>]) -> f64,
    step: f64,
    tol: f64,
    max_per_tensor: usize,
) -> Result<GradCheckReport, String> {
    assert_eq!(inputs.len(), analytic.len());
    assert!(step > 0.0 && tol > 0.0 && max_per_tensor > 0);
    let mut checked = 0usize;
    let mut max_rel = 0.0f64;
    let mut worst: Option<String> = None;
    for (t, (input, grad)) in inputs.iter().zip(analytic.iter()).enumerate() {
        assert_eq!(
            input.shape(),
            grad.shape(),
            "gradient shape mismatch on tensor {t}"
        );
        let len = input.len();
        let stride = len.div_ceil(max_per_tensor).max(1);
        let grad_s = grad.as_slice().expect("standard layout");
        for k in (0..len).step_by(stride) {
            let mut plus = inputs.to_vec();
            plus[t].as_slice_mut().expect("standard layout")[k] += step;
            let mut minus = inputs.to_vec();
            minus[t].as_slice_mut().expect("standard layout")[k] -= step;
            let numeric = (f(&plus) - f(&minus)) / (2.0 * step);
            let a = grad_s[k];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
            checked += 1;
            if rel > max_rel {
                max_rel = rel;
                worst = Some(format!(
                    "tensor {t} element {k}: analytic {a:.9e}, numeric {numeric:.9e}, rel {rel:.3e}"
                ));
            }
        }
    }
    if max_rel > tol {
        Err(format!(
            "gradient check failed (tol {tol:.1e}): {}",
            worst.unwrap_or_default()
        ))
    } else {
        Ok(GradCheckReport { checked, max_rel_err: max_rel })
    }
}
