//! Task loss, Fisher discriminability losses with trainable class centers,
//! and the entropy-minimization regularizer.
//!
//! The Fisher loss scores a feature batch by its within-class scatter trace
//! `tr(Sw) = sum_j ||h_j - c_{y_j}||^2` (mini-batch sum) and the between-class
//! scatter trace `tr(Sb) = sum_k ||c_k - cbar||^2` (all K classes, no batch
//! dependence), where the class centers `c_k` are trainable parameters and
//! `cbar` is their mean. Two instantiations:
//!
//! - trace ratio:      `tr(Sw) / tr(Sb)`
//! - trace difference: `tr(Sw) - lambda_b * tr(Sb)` (lambda_b = 1 recovers
//!   the maximum margin criterion)
//!
//! Gradients are the exact closed forms of these expressions; note that
//! `d tr(Sb) / d c_k = 2 (c_k - cbar)` because the chain-rule terms through
//! `cbar` cancel across classes.

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::rng::{Dist, SeededRng};

/// Denominator guard for the trace-ratio form.
pub const TRACE_RATIO_EPS: f64 = 1e-8;

/// Trainable class centers, one row per class.
#[derive(Debug, Clone)]
pub struct Centers {
    per_class: Matrix, // K x p
}

impl Centers {
    /// Standard-normal initialization keeps `tr(Sb)` away from zero at step 0.
    pub fn init(classes: usize, feature_dim: usize, rng: &mut SeededRng) -> Result<Self> {
        if classes < 2 {
            return Err(Error::InvalidParameter(format!(
                "need at least 2 classes, got {classes}"
            )));
        }
        if feature_dim == 0 {
            return Err(Error::InvalidParameter("feature dim must be >= 1".into()));
        }
        let per_class = rng.draw(classes, feature_dim, Dist::Normal { mean: 0.0, std: 1.0 })?;
        Ok(Centers { per_class })
    }

    pub fn from_matrix(per_class: Matrix) -> Result<Self> {
        if per_class.rows() < 2 || per_class.cols() == 0 {
            return Err(Error::InvalidParameter(format!(
                "centers must be at least 2x1, got {}",
                per_class.shape()
            )));
        }
        Ok(Centers { per_class })
    }

    pub fn classes(&self) -> usize {
        self.per_class.rows()
    }

    pub fn feature_dim(&self) -> usize {
        self.per_class.cols()
    }

    pub fn matrix(&self) -> &Matrix {
        &self.per_class
    }

    pub fn matrix_mut(&mut self) -> &mut Matrix {
        &mut self.per_class
    }

    /// Global center `cbar = mean_k c_k`, derived on demand.
    pub fn global(&self) -> Vec<f64> {
        let k = self.classes() as f64;
        let mut g = vec![0.0; self.feature_dim()];
        for r in 0..self.classes() {
            for (gi, &v) in g.iter_mut().zip(self.per_class.row(r)) {
                *gi += v;
            }
        }
        for gi in &mut g {
            *gi /= k;
        }
        g
    }
}

/// Which Fisher instantiation to use. `lambda_b` exists only for the
/// trace-difference form.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum FisherForm {
    TraceRatio,
    TraceDifference { lambda_b: f64 },
}

impl FisherForm {
    fn validate(&self) -> Result<()> {
        if let FisherForm::TraceDifference { lambda_b } = self {
            if *lambda_b < 0.0 || !lambda_b.is_finite() {
                return Err(Error::InvalidParameter(format!(
                    "lambda_b must be finite and >= 0, got {lambda_b}"
                )));
            }
        }
        Ok(())
    }
}

/// Row-wise stable softmax.
pub fn softmax(logits: &Matrix) -> Matrix {
    let mut out = logits.clone();
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    out
}

/// Backward through a row-wise softmax: given `s = softmax(z)` and
/// `dL/ds`, returns `dL/dz = s .* (g - (g . s))` per row.
pub fn softmax_backward(probs: &Matrix, grad_probs: &Matrix) -> Matrix {
    debug_assert_eq!(probs.rows(), grad_probs.rows());
    debug_assert_eq!(probs.cols(), grad_probs.cols());
    let mut out = Matrix::zeros(probs.rows(), probs.cols());
    for r in 0..probs.rows() {
        let s = probs.row(r);
        let g = grad_probs.row(r);
        let dot: f64 = s.iter().zip(g).map(|(&si, &gi)| si * gi).sum();
        for (o, (&si, &gi)) in out.row_mut(r).iter_mut().zip(s.iter().zip(g)) {
            *o = si * (gi - dot);
        }
    }
    out
}

fn check_labels(labels: &[usize], rows: usize, classes: usize) -> Result<()> {
    if labels.len() != rows {
        return Err(Error::DimensionMismatch {
            op: "labels",
            left: format!("{rows} rows"),
            right: format!("{} labels", labels.len()),
        });
    }
    for &y in labels {
        if y >= classes {
            return Err(Error::LabelOutOfRange { label: y, classes });
        }
    }
    Ok(())
}

/// Mean softmax cross-entropy over the batch and its gradient w.r.t. logits.
pub fn cross_entropy(logits: &Matrix, labels: &[usize]) -> Result<(f64, Matrix)> {
    if logits.rows() == 0 {
        return Err(Error::EmptyInput("cross_entropy on an empty batch"));
    }
    check_labels(labels, logits.rows(), logits.cols())?;
    let m = logits.rows() as f64;
    let probs = softmax(logits);
    let mut loss = 0.0;
    let mut grad = probs.clone();
    for (r, &y) in labels.iter().enumerate() {
        // log p directly from shifted logits would be marginally more stable,
        // but probs stay comfortably positive at these scales.
        loss -= probs.get(r, y).max(f64::MIN_POSITIVE).ln();
        let g = grad.row_mut(r);
        g[y] -= 1.0;
        for v in g.iter_mut() {
            *v /= m;
        }
    }
    Ok((loss / m, grad))
}

/// Mini-batch scatter traces `(tr_Sw, tr_Sb)`.
///
/// `tr_Sw` sums over batch members only; `tr_Sb` sums over all K classes
/// whether or not they appear in this batch.
pub fn scatter_traces(h: &Matrix, labels: &[usize], centers: &Centers) -> Result<(f64, f64)> {
    if h.rows() == 0 {
        return Err(Error::EmptyInput("scatter_traces on an empty batch"));
    }
    if h.cols() != centers.feature_dim() {
        return Err(Error::DimensionMismatch {
            op: "scatter_traces",
            left: h.shape(),
            right: centers.matrix().shape(),
        });
    }
    check_labels(labels, h.rows(), centers.classes())?;

    let mut tr_sw = 0.0;
    for (r, &y) in labels.iter().enumerate() {
        let c = centers.matrix().row(y);
        for (&hv, &cv) in h.row(r).iter().zip(c) {
            let d = hv - cv;
            tr_sw += d * d;
        }
    }

    let global = centers.global();
    let mut tr_sb = 0.0;
    for k in 0..centers.classes() {
        for (&cv, &gv) in centers.matrix().row(k).iter().zip(&global) {
            let d = cv - gv;
            tr_sb += d * d;
        }
    }
    Ok((tr_sw, tr_sb))
}

/// Scalar Fisher loss for the chosen form.
pub fn fisher_loss(h: &Matrix, labels: &[usize], centers: &Centers, form: FisherForm) -> Result<f64> {
    form.validate()?;
    let (tr_sw, tr_sb) = scatter_traces(h, labels, centers)?;
    match form {
        FisherForm::TraceRatio => {
            if tr_sb <= TRACE_RATIO_EPS {
                return Err(Error::DegenerateCenters {
                    tr_sb,
                    eps: TRACE_RATIO_EPS,
                });
            }
            Ok(tr_sw / tr_sb)
        }
        FisherForm::TraceDifference { lambda_b } => Ok(tr_sw - lambda_b * tr_sb),
    }
}

/// Analytic gradients of [`fisher_loss`] w.r.t. the feature batch and the
/// centers: `(grad_h: m x p, grad_centers: K x p)`.
pub fn fisher_grads(
    h: &Matrix,
    labels: &[usize],
    centers: &Centers,
    form: FisherForm,
) -> Result<(Matrix, Matrix)> {
    form.validate()?;
    let (tr_sw, tr_sb) = scatter_traces(h, labels, centers)?;
    let k = centers.classes();
    let p = centers.feature_dim();
    let global = centers.global();

    // Raw pieces shared by both forms:
    //   d tr_Sw / d h_j = 2 (h_j - c_{y_j})
    //   d tr_Sw / d c_k = sum_j 2 I(y_j = k) (c_k - h_j)
    //   d tr_Sb / d c_k = 2 (c_k - cbar)
    let mut grad_h_sw = Matrix::zeros(h.rows(), p);
    let mut grad_c_sw = Matrix::zeros(k, p);
    for (r, &y) in labels.iter().enumerate() {
        let c = centers.matrix().row(y);
        for j in 0..p {
            let d = 2.0 * (h.get(r, j) - c[j]);
            grad_h_sw.set(r, j, d);
            grad_c_sw.set(y, j, grad_c_sw.get(y, j) - d);
        }
    }
    let mut grad_c_sb = Matrix::zeros(k, p);
    for ki in 0..k {
        for j in 0..p {
            grad_c_sb.set(ki, j, 2.0 * (centers.matrix().get(ki, j) - global[j]));
        }
    }

    match form {
        FisherForm::TraceDifference { lambda_b } => {
            let mut grad_c = grad_c_sw;
            grad_c.axpy(-lambda_b, &grad_c_sb)?;
            Ok((grad_h_sw, grad_c))
        }
        FisherForm::TraceRatio => {
            if tr_sb <= TRACE_RATIO_EPS {
                return Err(Error::DegenerateCenters {
                    tr_sb,
                    eps: TRACE_RATIO_EPS,
                });
            }
            let grad_h = grad_h_sw.scale(1.0 / tr_sb);
            let mut grad_c = grad_c_sw.scale(1.0 / tr_sb);
            grad_c.axpy(-tr_sw / (tr_sb * tr_sb), &grad_c_sb)?;
            Ok((grad_h, grad_c))
        }
    }
}

/// Entropy regularizer over a batch of predicted class distributions:
/// `Omega = -sum_j sum_k p_jk log p_jk` (summed over the batch, `0 log 0 = 0`)
/// and its gradient w.r.t. the probabilities.
pub fn entropy_reg(probs: &Matrix) -> Result<(f64, Matrix)> {
    if probs.rows() == 0 {
        return Err(Error::EmptyInput("entropy_reg on an empty batch"));
    }
    for r in 0..probs.rows() {
        let row = probs.row(r);
        if row.iter().any(|&p| p < 0.0) {
            return Err(Error::InvalidParameter(format!(
                "negative probability in row {r}"
            )));
        }
        let sum: f64 = row.iter().sum();
        if (sum - 1.0).abs() > 1e-6 {
            return Err(Error::NotNormalized { row: r, sum });
        }
    }
    let mut omega = 0.0;
    let mut grad = Matrix::zeros(probs.rows(), probs.cols());
    for r in 0..probs.rows() {
        for c in 0..probs.cols() {
            let p = probs.get(r, c);
            if p > 0.0 {
                omega -= p * p.ln();
                grad.set(r, c, -(p.ln() + 1.0));
            }
        }
    }
    Ok((omega, grad))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn running_example() -> (Matrix, Vec<usize>, Centers) {
        // K=2, p=1, centers (0, 2); batch h = (0.5 class 0, 2.5 class 1).
        let h = Matrix::from_vec(2, 1, vec![0.5, 2.5]).unwrap();
        let labels = vec![0, 1];
        let centers =
            Centers::from_matrix(Matrix::from_vec(2, 1, vec![0.0, 2.0]).unwrap()).unwrap();
        (h, labels, centers)
    }

    #[test]
    fn cross_entropy_uniform_logits() {
        let logits = Matrix::zeros(1, 2);
        let (loss, _) = cross_entropy(&logits, &[1]).unwrap();
        assert!((loss - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_saturated_margin() {
        let logits = Matrix::from_vec(1, 2, vec![30.0, 0.0]).unwrap();
        let (loss, _) = cross_entropy(&logits, &[0]).unwrap();
        assert!(loss < 1e-9);
    }

    #[test]
    fn cross_entropy_hand_value() {
        // p0 = e / (e + 1), loss = -ln p0.
        let logits = Matrix::from_vec(1, 2, vec![1.0, 0.0]).unwrap();
        let (loss, grad) = cross_entropy(&logits, &[0]).unwrap();
        let p0 = std::f64::consts::E / (std::f64::consts::E + 1.0);
        assert!((loss - (-p0.ln())).abs() < 1e-12);
        assert!((loss - 0.3133).abs() < 1e-4);
        assert!((grad.get(0, 0) - (p0 - 1.0)).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_label_out_of_range() {
        let logits = Matrix::zeros(1, 2);
        assert!(matches!(
            cross_entropy(&logits, &[2]),
            Err(Error::LabelOutOfRange { .. })
        ));
    }

    #[test]
    fn scatter_traces_hand_example() {
        let (h, labels, centers) = running_example();
        let (tr_sw, tr_sb) = scatter_traces(&h, &labels, &centers).unwrap();
        assert!((tr_sw - 0.5).abs() < 1e-12);
        assert!((tr_sb - 2.0).abs() < 1e-12);
    }

    #[test]
    fn scatter_traces_zero_cases() {
        // Every feature exactly on its center -> tr_Sw = 0.
        let h = Matrix::from_vec(2, 1, vec![0.0, 2.0]).unwrap();
        let centers =
            Centers::from_matrix(Matrix::from_vec(2, 1, vec![0.0, 2.0]).unwrap()).unwrap();
        let (tr_sw, _) = scatter_traces(&h, &[0, 1], &centers).unwrap();
        assert_eq!(tr_sw, 0.0);

        // All centers equal -> tr_Sb = 0.
        let same = Centers::from_matrix(Matrix::from_vec(2, 1, vec![1.0, 1.0]).unwrap()).unwrap();
        let (_, tr_sb) = scatter_traces(&h, &[0, 1], &same).unwrap();
        assert_eq!(tr_sb, 0.0);
    }

    #[test]
    fn scatter_traces_label_without_center() {
        let (h, _, centers) = running_example();
        assert!(matches!(
            scatter_traces(&h, &[0, 5], &centers),
            Err(Error::LabelOutOfRange { .. })
        ));
    }

    #[test]
    fn fisher_loss_values() {
        let (h, labels, centers) = running_example();
        let tr = fisher_loss(&h, &labels, &centers, FisherForm::TraceRatio).unwrap();
        assert!((tr - 0.25).abs() < 1e-12);

        let td = fisher_loss(
            &h,
            &labels,
            &centers,
            FisherForm::TraceDifference { lambda_b: 1.0 },
        )
        .unwrap();
        assert!((td - (-1.5)).abs() < 1e-12);

        // lambda_b = 0 strips the between-class penalty entirely.
        let sw_only = fisher_loss(
            &h,
            &labels,
            &centers,
            FisherForm::TraceDifference { lambda_b: 0.0 },
        )
        .unwrap();
        assert_eq!(sw_only, 0.5);
    }

    #[test]
    fn trace_difference_with_unit_lambda_is_mmc_exactly() {
        let (h, labels, centers) = running_example();
        let (tr_sw, tr_sb) = scatter_traces(&h, &labels, &centers).unwrap();
        let td = fisher_loss(
            &h,
            &labels,
            &centers,
            FisherForm::TraceDifference { lambda_b: 1.0 },
        )
        .unwrap();
        assert_eq!(td, tr_sw - tr_sb);
    }

    #[test]
    fn trace_ratio_degenerate_centers_error() {
        let h = Matrix::from_vec(1, 1, vec![0.5]).unwrap();
        let centers = Centers::from_matrix(Matrix::from_vec(2, 1, vec![1.0, 1.0]).unwrap()).unwrap();
        assert!(matches!(
            fisher_loss(&h, &[0], &centers, FisherForm::TraceRatio),
            Err(Error::DegenerateCenters { .. })
        ));
    }

    #[test]
    fn fisher_grads_running_example() {
        let (h, labels, centers) = running_example();

        // Trace difference, lambda_b = 1: grad_h for h=0.5 (class 0, c0=0) is
        // 2 * 0.5 = 1; grad_c0 = 2(c0 - h0) - 2*lambda_b*(c0 - cbar)
        //                      = -1 - 2*(-1) = +1.
        let (gh, gc) = fisher_grads(
            &h,
            &labels,
            &centers,
            FisherForm::TraceDifference { lambda_b: 1.0 },
        )
        .unwrap();
        assert!((gh.get(0, 0) - 1.0).abs() < 1e-12);
        assert!((gc.get(0, 0) - 1.0).abs() < 1e-12);

        // Trace ratio: grad_h = 2*0.5 / tr_Sb = 0.5.
        let (gh, _) = fisher_grads(&h, &labels, &centers, FisherForm::TraceRatio).unwrap();
        assert!((gh.get(0, 0) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn fisher_grad_h_zero_at_centers() {
        // Batch sitting exactly on its centers: the within-class pull is zero.
        let h = Matrix::from_vec(2, 2, vec![1.0, 0.0, -1.0, 0.0]).unwrap();
        let centers = Centers::from_matrix(
            Matrix::from_vec(2, 2, vec![1.0, 0.0, -1.0, 0.0]).unwrap(),
        )
        .unwrap();
        let (gh, _) = fisher_grads(
            &h,
            &[0, 1],
            &centers,
            FisherForm::TraceDifference { lambda_b: 1.0 },
        )
        .unwrap();
        assert!(gh.data().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn translation_invariance_of_traces() {
        let (h, labels, centers) = running_example();
        let (sw0, sb0) = scatter_traces(&h, &labels, &centers).unwrap();
        let shift = 3.7;
        let h2 = h.map(|x| x + shift);
        let centers2 =
            Centers::from_matrix(centers.matrix().map(|x| x + shift)).unwrap();
        let (sw1, sb1) = scatter_traces(&h2, &labels, &centers2).unwrap();
        assert!((sw0 - sw1).abs() < 1e-9);
        assert!((sb0 - sb1).abs() < 1e-9);
    }

    #[test]
    fn entropy_examples() {
        // One-hot rows have zero entropy.
        let onehot = Matrix::from_vec(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let (omega, _) = entropy_reg(&onehot).unwrap();
        assert_eq!(omega, 0.0);

        // Uniform row: ln 2 per row.
        let uniform = Matrix::from_vec(1, 2, vec![0.5, 0.5]).unwrap();
        let (omega, _) = entropy_reg(&uniform).unwrap();
        assert!((omega - std::f64::consts::LN_2).abs() < 1e-12);

        // Hand value for (0.9, 0.1).
        let row = Matrix::from_vec(1, 2, vec![0.9, 0.1]).unwrap();
        let (omega, _) = entropy_reg(&row).unwrap();
        assert!((omega - 0.3251).abs() < 1e-4);
    }

    #[test]
    fn entropy_rejects_unnormalized_rows() {
        let bad = Matrix::from_vec(1, 2, vec![0.7, 0.1]).unwrap();
        assert!(matches!(
            entropy_reg(&bad),
            Err(Error::NotNormalized { row: 0, .. })
        ));
    }

    #[test]
    fn entropy_maximized_at_uniform() {
        let mut rng = crate::rng::SeededRng::new(17);
        let k = 4;
        let (uniform_omega, _) =
            entropy_reg(&Matrix::from_vec(1, k, vec![1.0 / k as f64; k]).unwrap()).unwrap();
        for _ in 0..50 {
            let logits = rng
                .draw(1, k, Dist::Normal { mean: 0.0, std: 2.0 })
                .unwrap();
            let probs = softmax(&logits);
            let (omega, _) = entropy_reg(&probs).unwrap();
            assert!(omega <= uniform_omega + 1e-12);
        }
        assert!((uniform_omega - (k as f64).ln()).abs() < 1e-12);
    }
}
