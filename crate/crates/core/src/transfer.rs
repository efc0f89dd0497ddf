//! Transfer criteria measuring the discrepancy between source and target
//! feature batches: multi-kernel MMD, CORAL, and the domain adversarial loss.

use crate::error::{Error, Result};
use crate::losses::softmax;
use crate::matrix::Matrix;

/// Standard deviations of the default 19-kernel RBF bank.
pub const DEFAULT_RBF_SIGMAS: [f64; 19] = [
    1e-6, 1e-5, 1e-4, 1e-3, 1e-2, 1e-1, 1.0, 5.0, 10.0, 15.0, 20.0, 25.0, 30.0, 35.0, 100.0, 1e3,
    1e4, 1e5, 1e6,
];

/// A mixture of RBF kernels `kappa(x, y) = sum_b w_b exp(-||x-y||^2 / (2 sigma_b^2))`.
#[derive(Debug, Clone)]
pub struct KernelBank {
    sigmas: Vec<f64>,
    weights: Vec<f64>,
}

impl KernelBank {
    pub fn new(sigmas: Vec<f64>, weights: Vec<f64>) -> Result<Self> {
        if sigmas.is_empty() {
            return Err(Error::EmptyInput("kernel bank needs at least one sigma"));
        }
        if sigmas.len() != weights.len() {
            return Err(Error::DimensionMismatch {
                op: "kernel_bank",
                left: format!("{} sigmas", sigmas.len()),
                right: format!("{} weights", weights.len()),
            });
        }
        if sigmas.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::InvalidParameter("all kernel sigmas must be > 0".into()));
        }
        if weights.iter().any(|&w| w < 0.0) {
            return Err(Error::InvalidParameter("kernel weights must be nonnegative".into()));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidParameter(format!(
                "kernel weights must sum to 1, got {total}"
            )));
        }
        Ok(KernelBank { sigmas, weights })
    }

    pub fn equal_weights(sigmas: Vec<f64>) -> Result<Self> {
        let n = sigmas.len();
        if n == 0 {
            return Err(Error::EmptyInput("kernel bank needs at least one sigma"));
        }
        let w = 1.0 / n as f64;
        let mut weights = vec![w; n];
        // Nudge the last weight so the sum is exactly 1 in floating point.
        let partial: f64 = weights[..n - 1].iter().sum();
        weights[n - 1] = 1.0 - partial;
        KernelBank::new(sigmas, weights)
    }

    pub fn single(sigma: f64) -> Result<Self> {
        KernelBank::new(vec![sigma], vec![1.0])
    }

    pub fn sigmas(&self) -> &[f64] {
        &self.sigmas
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }
}

impl Default for KernelBank {
    fn default() -> Self {
        KernelBank::equal_weights(DEFAULT_RBF_SIGMAS.to_vec()).expect("static bank is valid")
    }
}

/// Feature batches of the two domains (source rows first by convention
/// elsewhere; here they are kept separate).
#[derive(Debug, Clone, Copy)]
pub struct DomainBatch<'a> {
    pub source: &'a Matrix,
    pub target: &'a Matrix,
}

impl<'a> DomainBatch<'a> {
    pub fn new(source: &'a Matrix, target: &'a Matrix) -> Result<Self> {
        if source.rows() == 0 || target.rows() == 0 {
            return Err(Error::EmptyInput("both domain batches must be nonempty"));
        }
        if source.cols() != target.cols() {
            return Err(Error::DimensionMismatch {
                op: "domain_batch",
                left: source.shape(),
                right: target.shape(),
            });
        }
        Ok(DomainBatch { source, target })
    }
}

/// Which MMD estimator to use. The biased V-statistic keeps the i = j
/// diagonal terms; the unbiased variant drops them.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MmdEstimator {
    Biased,
    Unbiased,
}

/// Pairwise squared distances via the Gram expansion
/// `||a_i - b_j||^2 = ||a_i||^2 + ||b_j||^2 - 2 a_i . b_j`, clamped at zero.
fn pairwise_sq_dists(a: &Matrix, b: &Matrix) -> Matrix {
    let row_sq = |m: &Matrix| -> Vec<f64> {
        (0..m.rows())
            .map(|r| m.row(r).iter().map(|x| x * x).sum())
            .collect()
    };
    let na = row_sq(a);
    let nb = row_sq(b);
    let gram = a.matmul_nt(b).expect("width checked by DomainBatch");
    let mut out = Matrix::zeros(a.rows(), b.rows());
    for i in 0..a.rows() {
        for j in 0..b.rows() {
            out.set(i, j, (na[i] + nb[j] - 2.0 * gram.get(i, j)).max(0.0));
        }
    }
    out
}

/// Mixed kernel values and the radial factor `sum_b w_b k_b / sigma_b^2`
/// needed by the gradient.
fn kernel_and_radial(sq: &Matrix, bank: &KernelBank) -> (Matrix, Matrix) {
    let mut kernel = Matrix::zeros(sq.rows(), sq.cols());
    let mut radial = Matrix::zeros(sq.rows(), sq.cols());
    for (&sigma, &w) in bank.sigmas().iter().zip(bank.weights()) {
        let inv_two_sq = 1.0 / (2.0 * sigma * sigma);
        for i in 0..sq.rows() {
            for j in 0..sq.cols() {
                let k = (-sq.get(i, j) * inv_two_sq).exp();
                kernel.set(i, j, kernel.get(i, j) + w * k);
                radial.set(i, j, radial.get(i, j) + w * k * (2.0 * inv_two_sq));
            }
        }
    }
    (kernel, radial)
}

/// Multi-kernel MMD between the two domains, with gradients w.r.t. both
/// feature batches. Defaults to the biased V-statistic printed in the
/// formula: `(1/ns^2) sum k(s,s) + (1/nt^2) sum k(t,t) - (2/(ns nt)) sum k(s,t)`.
pub fn mmd(batch: DomainBatch, bank: &KernelBank) -> Result<(f64, Matrix, Matrix)> {
    mmd_estimator(batch, bank, MmdEstimator::Biased)
}

pub fn mmd_estimator(
    batch: DomainBatch,
    bank: &KernelBank,
    estimator: MmdEstimator,
) -> Result<(f64, Matrix, Matrix)> {
    let hs = batch.source;
    let ht = batch.target;
    let ns = hs.rows();
    let nt = ht.rows();
    if estimator == MmdEstimator::Unbiased && (ns < 2 || nt < 2) {
        return Err(Error::InsufficientSamples {
            need: 2,
            got: ns.min(nt),
        });
    }

    let sq_ss = pairwise_sq_dists(hs, hs);
    let sq_tt = pairwise_sq_dists(ht, ht);
    let sq_st = pairwise_sq_dists(hs, ht);
    let (k_ss, r_ss) = kernel_and_radial(&sq_ss, bank);
    let (k_tt, r_tt) = kernel_and_radial(&sq_tt, bank);
    let (k_st, r_st) = kernel_and_radial(&sq_st, bank);

    let skip_diag = estimator == MmdEstimator::Unbiased;
    let sum_within = |k: &Matrix| -> f64 {
        let mut s = 0.0;
        for i in 0..k.rows() {
            for j in 0..k.cols() {
                if skip_diag && i == j {
                    continue;
                }
                s += k.get(i, j);
            }
        }
        s
    };
    let (ws, wt) = match estimator {
        MmdEstimator::Biased => (1.0 / (ns * ns) as f64, 1.0 / (nt * nt) as f64),
        MmdEstimator::Unbiased => (1.0 / (ns * (ns - 1)) as f64, 1.0 / (nt * (nt - 1)) as f64),
    };
    let wc = 2.0 / (ns * nt) as f64;
    let cross: f64 = k_st.data().iter().sum();
    let loss = ws * sum_within(&k_ss) + wt * sum_within(&k_tt) - wc * cross;

    // d kappa(x, y) / dx = -(radial factor) * (x - y); within-domain sums pick
    // up the symmetric factor 2 because each point appears as both arguments.
    let p = hs.cols();
    let mut grad_hs = Matrix::zeros(ns, p);
    for i in 0..ns {
        for j in 0..ns {
            if i == j {
                continue; // diagonal kernel is constant 1, zero gradient
            }
            let r = 2.0 * ws * r_ss.get(i, j);
            for d in 0..p {
                let diff = hs.get(i, d) - hs.get(j, d);
                grad_hs.set(i, d, grad_hs.get(i, d) - r * diff);
            }
        }
        for j in 0..nt {
            let r = wc * r_st.get(i, j);
            for d in 0..p {
                let diff = hs.get(i, d) - ht.get(j, d);
                grad_hs.set(i, d, grad_hs.get(i, d) + r * diff);
            }
        }
    }
    let mut grad_ht = Matrix::zeros(nt, p);
    for i in 0..nt {
        for j in 0..nt {
            if i == j {
                continue;
            }
            let r = 2.0 * wt * r_tt.get(i, j);
            for d in 0..p {
                let diff = ht.get(i, d) - ht.get(j, d);
                grad_ht.set(i, d, grad_ht.get(i, d) - r * diff);
            }
        }
        for j in 0..ns {
            let r = wc * r_st.get(j, i);
            for d in 0..p {
                let diff = ht.get(i, d) - hs.get(j, d);
                grad_ht.set(i, d, grad_ht.get(i, d) + r * diff);
            }
        }
    }
    Ok((loss, grad_hs, grad_ht))
}

/// Unbiased empirical covariance: mean-center rows, then `H^T H / (n - 1)`.
pub fn covariance(h: &Matrix) -> Result<Matrix> {
    if h.rows() < 2 {
        return Err(Error::InsufficientSamples {
            need: 2,
            got: h.rows(),
        });
    }
    let centered = center_rows(h);
    let mut cov = centered.matmul_tn(&centered)?;
    let inv = 1.0 / (h.rows() as f64 - 1.0);
    for v in cov.data_mut() {
        *v *= inv;
    }
    Ok(cov)
}

fn center_rows(h: &Matrix) -> Matrix {
    let mu = h.col_mean().expect("nonempty checked by caller");
    let mut out = h.clone();
    for r in 0..out.rows() {
        for (v, &m) in out.row_mut(r).iter_mut().zip(mu.data()) {
            *v -= m;
        }
    }
    out
}

/// CORAL loss `||C_s - C_t||_F^2 / (4 p^2)` with gradients through the
/// covariance computation of both batches.
pub fn coral(batch: DomainBatch) -> Result<(f64, Matrix, Matrix)> {
    let p = batch.source.cols();
    let c_s = covariance(batch.source)?;
    let c_t = covariance(batch.target)?;
    let diff = c_s.sub(&c_t)?;
    let denom = 4.0 * (p * p) as f64;
    let loss = diff.data().iter().map(|x| x * x).sum::<f64>() / denom;

    // dL/dC_s = diff / (2 p^2); through C = Hc^T Hc / (n-1) and the row
    // centering, the batch gradient is the re-centered Hc * diff term.
    let grad_for = |h: &Matrix, sign: f64| -> Result<Matrix> {
        let n = h.rows() as f64;
        let centered = center_rows(h);
        let scale = sign / ((n - 1.0) * (p * p) as f64);
        let g = centered.matmul(&diff)?.scale(scale);
        Ok(center_rows(&g))
    };
    let grad_hs = grad_for(batch.source, 1.0)?;
    let grad_ht = grad_for(batch.target, -1.0)?;
    Ok((loss, grad_hs, grad_ht))
}

/// Domain-classification loss, averaged per domain:
/// `(1/ns) sum_source ce_j + (1/nt) sum_target ce_j`, with its gradient
/// w.r.t. the discriminator logits. Labels: 0 = source, 1 = target.
pub fn domain_adv_loss(d_logits: &Matrix, d_labels: &[usize]) -> Result<(f64, Matrix)> {
    if d_logits.rows() == 0 {
        return Err(Error::EmptyInput("domain_adv_loss on an empty batch"));
    }
    if d_logits.cols() != 2 {
        return Err(Error::DimensionMismatch {
            op: "domain_adv_loss",
            left: d_logits.shape(),
            right: "m x 2 logits".into(),
        });
    }
    if d_labels.len() != d_logits.rows() {
        return Err(Error::DimensionMismatch {
            op: "domain_adv_loss",
            left: format!("{} rows", d_logits.rows()),
            right: format!("{} labels", d_labels.len()),
        });
    }
    for &d in d_labels {
        if d > 1 {
            return Err(Error::LabelOutOfRange { label: d, classes: 2 });
        }
    }
    let ns = d_labels.iter().filter(|&&d| d == 0).count();
    let nt = d_labels.len() - ns;
    if ns == 0 {
        return Err(Error::DomainMissing("source"));
    }
    if nt == 0 {
        return Err(Error::DomainMissing("target"));
    }

    let probs = softmax(d_logits);
    let mut loss = 0.0;
    let mut grad = probs;
    for (r, &d) in d_labels.iter().enumerate() {
        let inv = 1.0 / if d == 0 { ns as f64 } else { nt as f64 };
        loss -= grad.get(r, d).max(f64::MIN_POSITIVE).ln() * inv;
        let row = grad.row_mut(r);
        row[d] -= 1.0;
        for v in row.iter_mut() {
            *v *= inv;
        }
    }
    Ok((loss, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{Dist, SeededRng};

    fn mat(rows: usize, cols: usize, data: &[f64]) -> Matrix {
        Matrix::from_vec(rows, cols, data.to_vec()).unwrap()
    }

    #[test]
    fn default_bank_has_19_kernels() {
        let bank = KernelBank::default();
        assert_eq!(bank.sigmas().len(), 19);
        let total: f64 = bank.weights().iter().sum();
        assert!((total - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn bank_rejects_bad_parameters() {
        assert!(KernelBank::new(vec![0.0], vec![1.0]).is_err());
        assert!(KernelBank::new(vec![1.0], vec![0.5]).is_err());
        assert!(KernelBank::new(vec![1.0, 2.0], vec![1.0]).is_err());
    }

    #[test]
    fn mmd_identical_batches_is_zero() {
        let h = mat(3, 2, &[0.1, -0.4, 1.2, 0.3, -0.7, 0.9]);
        let batch = DomainBatch::new(&h, &h).unwrap();
        let (loss, _, _) = mmd(batch, &KernelBank::default()).unwrap();
        assert!(loss.abs() < 1e-12);
    }

    #[test]
    fn mmd_single_kernel_hand_value() {
        // 1-D, sigma = 1, h_s = {0}, h_t = {2}: 1 + 1 - 2 exp(-2).
        let hs = mat(1, 1, &[0.0]);
        let ht = mat(1, 1, &[2.0]);
        let bank = KernelBank::single(1.0).unwrap();
        let (loss, _, _) = mmd(DomainBatch::new(&hs, &ht).unwrap(), &bank).unwrap();
        let expect = 2.0 - 2.0 * (-2.0f64).exp();
        assert!((loss - expect).abs() < 1e-12);
        assert!((loss - 1.7293).abs() < 1e-4);
    }

    #[test]
    fn mmd_is_symmetric_in_the_domains() {
        let mut rng = SeededRng::new(21);
        let norm = Dist::Normal { mean: 0.0, std: 1.0 };
        let a = rng.draw(4, 3, norm).unwrap();
        let b = rng.draw(6, 3, norm).unwrap();
        let bank = KernelBank::default();
        let (ab, _, _) = mmd(DomainBatch::new(&a, &b).unwrap(), &bank).unwrap();
        let (ba, _, _) = mmd(DomainBatch::new(&b, &a).unwrap(), &bank).unwrap();
        assert!((ab - ba).abs() < 1e-14);
    }

    #[test]
    fn mmd_nonnegative_on_random_batches() {
        let mut rng = SeededRng::new(33);
        let bank = KernelBank::default();
        for _ in 0..30 {
            let norm = Dist::Normal { mean: 0.0, std: 2.0 };
            let a = rng.draw(5, 3, norm).unwrap();
            let b = rng.draw(7, 3, norm).unwrap();
            let (loss, _, _) = mmd(DomainBatch::new(&a, &b).unwrap(), &bank).unwrap();
            assert!(loss >= -1e-12);
        }
    }

    #[test]
    fn unbiased_mmd_gradients_match_finite_differences() {
        let mut rng = SeededRng::new(6);
        let norm = Dist::Normal { mean: 0.0, std: 1.0 };
        let hs = rng.draw(4, 2, norm).unwrap();
        let ht = rng.draw(5, 2, norm).unwrap();
        let bank = KernelBank::single(1.0).unwrap();
        let (_, ghs, _) = mmd_estimator(
            DomainBatch::new(&hs, &ht).unwrap(),
            &bank,
            MmdEstimator::Unbiased,
        )
        .unwrap();
        let step = 1e-5;
        for idx in 0..hs.data().len() {
            let mut plus = hs.clone();
            plus.data_mut()[idx] += step;
            let mut minus = hs.clone();
            minus.data_mut()[idx] -= step;
            let lp = mmd_estimator(
                DomainBatch::new(&plus, &ht).unwrap(),
                &bank,
                MmdEstimator::Unbiased,
            )
            .unwrap()
            .0;
            let lm = mmd_estimator(
                DomainBatch::new(&minus, &ht).unwrap(),
                &bank,
                MmdEstimator::Unbiased,
            )
            .unwrap()
            .0;
            let numeric = (lp - lm) / (2.0 * step);
            let analytic = ghs.data()[idx];
            let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-3);
            assert!(rel < 1e-5, "entry {idx}: {analytic} vs {numeric}");
        }
        // Unbiased estimator needs two samples per domain.
        let single = Matrix::from_vec(1, 2, vec![0.0, 0.0]).unwrap();
        assert!(matches!(
            mmd_estimator(
                DomainBatch::new(&single, &ht).unwrap(),
                &bank,
                MmdEstimator::Unbiased
            ),
            Err(Error::InsufficientSamples { .. })
        ));
    }

    #[test]
    fn mmd_rejects_empty_batches() {
        let a = Matrix::zeros(0, 2);
        let b = Matrix::zeros(3, 2);
        assert!(matches!(
            DomainBatch::new(&a, &b),
            Err(Error::EmptyInput(_))
        ));
    }

    #[test]
    fn covariance_hand_values() {
        // 1-D samples {0, 2}: mean 1, unbiased variance 2.
        let h = mat(2, 1, &[0.0, 2.0]);
        let c = covariance(&h).unwrap();
        assert_eq!(c.data(), &[2.0]);

        let constant = mat(3, 2, &[1.0, -2.0, 1.0, -2.0, 1.0, -2.0]);
        let c = covariance(&constant).unwrap();
        assert!(c.data().iter().all(|&x| x == 0.0));

        assert!(matches!(
            covariance(&mat(1, 1, &[3.0])),
            Err(Error::InsufficientSamples { .. })
        ));
    }

    #[test]
    fn coral_identical_batches_and_hand_value() {
        let h = mat(3, 2, &[0.0, 1.0, 2.0, -1.0, 0.5, 0.5]);
        let (loss, _, _) = coral(DomainBatch::new(&h, &h).unwrap()).unwrap();
        assert_eq!(loss, 0.0);

        // p = 1: C_s = [[2]], C_t = [[0]] -> (1/4) * 4 = 1.
        let hs = mat(2, 1, &[0.0, 2.0]);
        let ht = mat(2, 1, &[1.0, 1.0]);
        let (loss, _, _) = coral(DomainBatch::new(&hs, &ht).unwrap()).unwrap();
        assert!((loss - 1.0).abs() < 1e-12);
    }

    #[test]
    fn coral_symmetric_under_domain_swap() {
        let mut rng = SeededRng::new(4);
        let norm = Dist::Normal { mean: 0.0, std: 1.0 };
        let a = rng.draw(5, 3, norm).unwrap();
        let b = rng.draw(6, 3, norm).unwrap();
        let (ab, _, _) = coral(DomainBatch::new(&a, &b).unwrap()).unwrap();
        let (ba, _, _) = coral(DomainBatch::new(&b, &a).unwrap()).unwrap();
        assert!((ab - ba).abs() < 1e-14);
    }

    #[test]
    fn coral_invariant_under_shared_rotation() {
        let mut rng = SeededRng::new(12);
        let norm = Dist::Normal { mean: 0.0, std: 1.0 };
        let a = rng.draw(8, 2, norm).unwrap();
        let b = rng.draw(9, 2, norm).unwrap();
        let theta: f64 = 0.83;
        let rot = mat(2, 2, &[theta.cos(), -theta.sin(), theta.sin(), theta.cos()]);
        let ar = a.matmul(&rot).unwrap();
        let br = b.matmul(&rot).unwrap();
        let (before, _, _) = coral(DomainBatch::new(&a, &b).unwrap()).unwrap();
        let (after, _, _) = coral(DomainBatch::new(&ar, &br).unwrap()).unwrap();
        assert!((before - after).abs() < 1e-9);
    }

    #[test]
    fn adv_loss_hand_values() {
        // Saturated correct logits -> near-zero loss.
        let logits = mat(2, 2, &[40.0, 0.0, 0.0, 40.0]);
        let (loss, _) = domain_adv_loss(&logits, &[0, 1]).unwrap();
        assert!(loss < 1e-9);

        // Uniform logits -> ln 2 per domain-averaged term.
        let logits = Matrix::zeros(2, 2);
        let (loss, _) = domain_adv_loss(&logits, &[0, 1]).unwrap();
        assert!((loss - 2.0 * std::f64::consts::LN_2).abs() < 1e-12);

        // probs (0.9 correct, 0.7 correct): -ln 0.9 - ln 0.7.
        let l1 = (0.9f64 / 0.1).ln();
        let l2 = (0.7f64 / 0.3).ln();
        let logits = mat(2, 2, &[l1, 0.0, 0.0, l2]);
        let (loss, _) = domain_adv_loss(&logits, &[0, 1]).unwrap();
        let expect = -(0.9f64.ln()) - 0.7f64.ln();
        assert!((loss - expect).abs() < 1e-12);
        assert!((loss - 0.4620).abs() < 1e-4);
    }

    #[test]
    fn adv_loss_needs_both_domains() {
        let logits = Matrix::zeros(2, 2);
        assert!(matches!(
            domain_adv_loss(&logits, &[0, 0]),
            Err(Error::DomainMissing("target"))
        ));
        assert!(matches!(
            domain_adv_loss(&logits, &[1, 1]),
            Err(Error::DomainMissing("source"))
        ));
    }

    #[test]
    fn adv_loss_decreases_with_margin() {
        let mut last = f64::INFINITY;
        for step in 0..20 {
            let margin = step as f64 * 0.5;
            let logits = mat(2, 2, &[margin, 0.0, 0.0, margin]);
            let (loss, _) = domain_adv_loss(&logits, &[0, 1]).unwrap();
            assert!(loss < last);
            last = loss;
        }
    }
}
