//! Distributional checks on the synthetic generators.

use fisherda::data::gen_two_moons_shift;
use fisherda::{Matrix, SeededRng};

/// Energy statistic `2 E d(x, y) - E d(x, x') - E d(y, y')` between two
/// samples; near zero when the distributions match.
fn energy_statistic(a: &Matrix, b: &Matrix) -> f64 {
    let dist = |x: &[f64], y: &[f64]| -> f64 {
        x.iter()
            .zip(y)
            .map(|(&u, &v)| (u - v) * (u - v))
            .sum::<f64>()
            .sqrt()
    };
    let mean_cross = |p: &Matrix, q: &Matrix| -> f64 {
        let mut s = 0.0;
        for i in 0..p.rows() {
            for j in 0..q.rows() {
                s += dist(p.row(i), q.row(j));
            }
        }
        s / (p.rows() * q.rows()) as f64
    };
    2.0 * mean_cross(a, b) - mean_cross(a, a) - mean_cross(b, b)
}

#[test]
fn zero_rotation_gives_identically_distributed_domains() {
    let mut rng = SeededRng::new(12);
    let (src, tgt) = gen_two_moons_shift(250, 0.0, 0.1, &mut rng).unwrap();
    let observed = energy_statistic(src.features(), tgt.features());

    // Threshold from resampling: energy statistics between fresh draws of
    // the same distribution.
    let mut resampled = Vec::new();
    for seed in 100..110 {
        let mut rng = SeededRng::new(seed);
        let (a, _) = gen_two_moons_shift(250, 0.0, 0.1, &mut rng).unwrap();
        let (b, _) = gen_two_moons_shift(250, 0.0, 0.1, &mut rng).unwrap();
        resampled.push(energy_statistic(a.features(), b.features()));
    }
    let threshold = 2.0 * resampled.iter().cloned().fold(f64::MIN, f64::max).abs();
    assert!(
        observed.abs() <= threshold,
        "energy statistic {observed} above same-distribution threshold {threshold}"
    );

    // A real shift is clearly visible by the same statistic.
    let mut rng = SeededRng::new(12);
    let (src, tgt) = gen_two_moons_shift(250, 90.0, 0.1, &mut rng).unwrap();
    let shifted = energy_statistic(src.features(), tgt.features());
    assert!(shifted > threshold * 5.0);
}

#[test]
fn rotating_source_matches_generating_rotated_target() {
    // Per-class means of a rotation-30 target match the hand-rotated
    // per-class means of a rotation-0 target within 3-sigma CLT bounds.
    let n = 4000;
    let deg: f64 = 30.0;
    let mut rng_a = SeededRng::new(40);
    let (_, t_rot) = gen_two_moons_shift(n, deg, 0.1, &mut rng_a).unwrap();
    let mut rng_b = SeededRng::new(41);
    let (_, t_flat) = gen_two_moons_shift(n, 0.0, 0.1, &mut rng_b).unwrap();

    let class_stats = |x: &Matrix, labels: &[usize], class: usize| -> ([f64; 2], [f64; 2], f64) {
        let rows: Vec<usize> = (0..x.rows()).filter(|&r| labels[r] == class).collect();
        let mut mean = [0.0; 2];
        for &r in &rows {
            mean[0] += x.get(r, 0);
            mean[1] += x.get(r, 1);
        }
        mean[0] /= rows.len() as f64;
        mean[1] /= rows.len() as f64;
        let mut var = [0.0; 2];
        for &r in &rows {
            var[0] += (x.get(r, 0) - mean[0]).powi(2);
            var[1] += (x.get(r, 1) - mean[1]).powi(2);
        }
        var[0] /= rows.len() as f64;
        var[1] /= rows.len() as f64;
        (mean, var, rows.len() as f64)
    };

    let rad = deg.to_radians();
    let (sin, cos) = rad.sin_cos();
    let labels_rot = t_rot.labels().unwrap().to_vec();
    let labels_flat = t_flat.labels().unwrap().to_vec();
    for class in 0..2 {
        let (m_rot, v_rot, n_rot) = class_stats(t_rot.features(), &labels_rot, class);
        let (m_flat, v_flat, n_flat) = class_stats(t_flat.features(), &labels_flat, class);
        let expected = [
            m_flat[0] * cos - m_flat[1] * sin,
            m_flat[0] * sin + m_flat[1] * cos,
        ];
        // Var of a rotated coordinate is bounded by the larger coordinate
        // variance, which keeps the bound conservative.
        let v_flat_max = v_flat[0].max(v_flat[1]);
        for d in 0..2 {
            let sigma = (v_rot[d] / n_rot + v_flat_max / n_flat).sqrt();
            let tol = 3.0 * sigma.max(1e-3);
            assert!(
                (m_rot[d] - expected[d]).abs() < tol,
                "class {class} dim {d}: {} vs {} (tol {tol})",
                m_rot[d],
                expected[d]
            );
        }
    }
}
