//! Finite-difference verification of every analytic gradient in the crate:
//! network backward, both Fisher forms (features and centers), MMD, CORAL,
//! the entropy regularizer, the domain classification loss, and the fully
//! assembled composite objective under each transfer criterion.
//!
//! Each component reports its maximum relative error against central
//! differences (step 1e-5) over a batch of randomized shape configurations.
//! Probes are resampled away from relu kinks, where a two-sided difference
//! quotient does not estimate the subgradient the backward pass uses.

use crate::config::{ExperimentConfig, FisherKind, TransferKind};
use crate::data::Batch;
use crate::error::Result;
use crate::harness::{composite_eval, composite_step, Model, Objective, StepGrads};
use crate::losses::{
    entropy_reg, fisher_grads, fisher_loss, softmax, softmax_backward, Centers, FisherForm,
};
use crate::matrix::Matrix;
use crate::network::{Activation, NetworkStack};
use crate::rng::{Dist, SeededRng};
use crate::transfer::{coral, domain_adv_loss, mmd, DomainBatch, KernelBank};

/// Pass threshold on the maximum relative error.
pub const TOLERANCE: f64 = 1e-5;
/// Central-difference step.
pub const FD_STEP: f64 = 1e-5;

/// Entries smaller than this are compared absolutely (scaled by the floor)
/// so that finite-difference noise on near-zero gradients does not register
/// as relative error.
const REL_FLOOR: f64 = 1e-3;

#[derive(Debug, Clone)]
pub struct ComponentReport {
    pub name: &'static str,
    pub max_rel_err: f64,
    pub configs: usize,
}

impl ComponentReport {
    pub fn pass(&self) -> bool {
        self.max_rel_err < TOLERANCE
    }
}

#[derive(Debug, Clone)]
pub struct GradcheckReport {
    pub components: Vec<ComponentReport>,
}

impl GradcheckReport {
    pub fn all_pass(&self) -> bool {
        self.components.iter().all(ComponentReport::pass)
    }

    pub fn total_configs(&self) -> usize {
        self.components.iter().map(|c| c.configs).sum()
    }

    /// One line per component, plus a summary line.
    pub fn render(&self) -> String {
        let mut out = String::new();
        for c in &self.components {
            out.push_str(&format!(
                "{:<24} configs={:<3} max_rel_err={:.3e}  {}\n",
                c.name,
                c.configs,
                c.max_rel_err,
                if c.pass() { "PASS" } else { "FAIL" }
            ));
        }
        out.push_str(&format!(
            "gradcheck: {} components, {} configurations, tolerance {:.0e}: {}\n",
            self.components.len(),
            self.total_configs(),
            TOLERANCE,
            if self.all_pass() { "PASS" } else { "FAIL" }
        ));
        out
    }
}

fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

fn max_rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| rel_err(a, n))
        .fold(0.0, f64::max)
}

/// Flips the sign of the largest-magnitude entry (mutation fixture).
fn corrupt_grads(v: &mut [f64]) {
    if let Some(i) = (0..v.len()).max_by(|&a, &b| v[a].abs().total_cmp(&v[b].abs())) {
        v[i] = -v[i] - 1.0;
    }
}

pub fn run_gradcheck(seed: u64) -> Result<GradcheckReport> {
    run_gradcheck_with(seed, None)
}

/// `corrupt` names a component whose analytic gradient gets deliberately
/// damaged; used by tests to prove the suite flags wrong gradients.
pub fn run_gradcheck_with(seed: u64, corrupt: Option<&str>) -> Result<GradcheckReport> {
    let c = |name: &str| corrupt == Some(name);
    let components = vec![
        check_network(seed, c("network_backward"))?,
        check_fisher(seed, FisherKind::TraceDifference, c("fisher_trace_difference"))?,
        check_fisher(seed, FisherKind::TraceRatio, c("fisher_trace_ratio"))?,
        check_mmd(seed, c("mmd"))?,
        check_coral(seed, c("coral"))?,
        check_entropy(seed, c("entropy_reg"))?,
        check_domain_adv(seed, c("domain_adversarial"))?,
        check_composite(seed, TransferKind::Mmd, "composite_mmd", c("composite_mmd"))?,
        check_composite(seed, TransferKind::Coral, "composite_coral", c("composite_coral"))?,
        check_composite(
            seed,
            TransferKind::Adversarial,
            "composite_adversarial",
            c("composite_adversarial"),
        )?,
    ];
    Ok(GradcheckReport { components })
}

fn central_diff(mut f: impl FnMut(f64) -> Result<f64>) -> Result<f64> {
    let plus = f(FD_STEP)?;
    let minus = f(-FD_STEP)?;
    Ok((plus - minus) / (2.0 * FD_STEP))
}

fn check_network(seed: u64, corrupt: bool) -> Result<ComponentReport> {
    let mut rng = SeededRng::new(seed ^ 0x6e65_7477);
    let norm = Dist::Normal { mean: 0.0, std: 1.0 };
    let mut worst: f64 = 0.0;
    let mut configs = 0;
    for &width in &[2usize, 8, 16] {
        for &depth in &[1usize, 2, 3] {
            for &act in &[Activation::Relu, Activation::Identity] {
                let dims = vec![width; depth + 1];
                let acts = vec![act; depth];
                let mut net = NetworkStack::new(&dims, &acts, &mut rng)?;
                let m = 5;
                let mut x = rng.draw(m, width, norm)?;
                if act == Activation::Relu {
                    for _ in 0..20 {
                        if net.min_abs_relu_preact(&x)? > 1e-4 {
                            break;
                        }
                        x = rng.draw(m, width, norm)?;
                    }
                }
                let upstream = rng.draw(m, width, norm)?;
                let scalar = |net: &NetworkStack, x: &Matrix| -> Result<f64> {
                    let out = net.infer(x)?;
                    Ok(out
                        .data()
                        .iter()
                        .zip(upstream.data())
                        .map(|(&o, &g)| o * g)
                        .sum())
                };

                net.forward(&x)?;
                let (input_grad, grads) = net.backward(&upstream)?;
                let mut analytic = Vec::new();
                let mut numeric = Vec::new();
                for (li, lg) in grads.layers.iter().enumerate() {
                    for idx in 0..lg.weight.data().len() {
                        analytic.push(lg.weight.data()[idx]);
                        numeric.push(central_diff(|eps| {
                            let orig = net.layers()[li].weight().data()[idx];
                            net.layers_mut()[li].weight.data_mut()[idx] = orig + eps;
                            let v = scalar(&net, &x);
                            net.layers_mut()[li].weight.data_mut()[idx] = orig;
                            v
                        })?);
                    }
                    for idx in 0..lg.bias.len() {
                        analytic.push(lg.bias[idx]);
                        numeric.push(central_diff(|eps| {
                            let orig = net.layers()[li].bias()[idx];
                            net.layers_mut()[li].bias[idx] = orig + eps;
                            let v = scalar(&net, &x);
                            net.layers_mut()[li].bias[idx] = orig;
                            v
                        })?);
                    }
                }
                for idx in 0..x.data().len() {
                    analytic.push(input_grad.data()[idx]);
                    numeric.push(central_diff(|eps| {
                        let mut xp = x.clone();
                        xp.data_mut()[idx] += eps;
                        scalar(&net, &xp)
                    })?);
                }
                if corrupt && configs == 0 {
                    corrupt_grads(&mut analytic);
                }
                worst = worst.max(max_rel_err(&analytic, &numeric));
                configs += 1;
            }
        }
    }
    Ok(ComponentReport {
        name: "network_backward",
        max_rel_err: worst,
        configs,
    })
}

fn check_fisher(seed: u64, kind: FisherKind, corrupt: bool) -> Result<ComponentReport> {
    let mut rng = SeededRng::new(seed ^ 0x6669_7368);
    let norm = Dist::Normal { mean: 0.0, std: 1.0 };
    let shapes = [
        (2usize, 3usize, 6usize),
        (2, 3, 36),
        (2, 8, 6),
        (2, 8, 36),
        (5, 3, 6),
        (5, 3, 36),
        (5, 8, 6),
        (5, 8, 36),
    ];
    let lambdas: &[f64] = match kind {
        FisherKind::TraceDifference => &[0.5, 1.0, 5.0],
        _ => &[f64::NAN], // placeholder, unused for trace ratio
    };
    let mut worst: f64 = 0.0;
    let mut configs = 0;
    for &(k, p, m) in &shapes {
        for &lambda_b in lambdas {
            let form = match kind {
                FisherKind::TraceDifference => FisherForm::TraceDifference { lambda_b },
                _ => FisherForm::TraceRatio,
            };
            let h = rng.draw(m, p, norm)?;
            let mut centers = Centers::from_matrix(rng.draw(k, p, norm)?)?;
            let labels: Vec<usize> = (0..m).map(|j| j % k).collect();

            let (gh, gc) = fisher_grads(&h, &labels, &centers, form)?;
            let mut analytic: Vec<f64> = gh.data().to_vec();
            analytic.extend_from_slice(gc.data());
            let mut numeric = Vec::with_capacity(analytic.len());
            for idx in 0..h.data().len() {
                numeric.push(central_diff(|eps| {
                    let mut hp = h.clone();
                    hp.data_mut()[idx] += eps;
                    fisher_loss(&hp, &labels, &centers, form)
                })?);
            }
            for idx in 0..centers.matrix().data().len() {
                numeric.push(central_diff(|eps| {
                    let orig = centers.matrix().data()[idx];
                    centers.matrix_mut().data_mut()[idx] = orig + eps;
                    let v = fisher_loss(&h, &labels, &centers, form);
                    centers.matrix_mut().data_mut()[idx] = orig;
                    v
                })?);
            }
            if corrupt && configs == 0 {
                corrupt_grads(&mut analytic);
            }
            worst = worst.max(max_rel_err(&analytic, &numeric));
            configs += 1;
            if kind == FisherKind::TraceRatio {
                break; // no lambda_b sweep
            }
        }
    }
    Ok(ComponentReport {
        name: match kind {
            FisherKind::TraceDifference => "fisher_trace_difference",
            _ => "fisher_trace_ratio",
        },
        max_rel_err: worst,
        configs,
    })
}

fn check_mmd(seed: u64, corrupt: bool) -> Result<ComponentReport> {
    let mut rng = SeededRng::new(seed ^ 0x6d6d_6400);
    let norm = Dist::Normal { mean: 0.0, std: 1.5 };
    let default_bank = KernelBank::default();
    let single = KernelBank::single(1.0)?;
    let wide = KernelBank::single(5.0)?;
    let banks: [&KernelBank; 5] = [&default_bank, &single, &wide, &default_bank, &single];
    let mut worst: f64 = 0.0;
    let mut configs = 0;
    for (i, bank) in banks.iter().enumerate() {
        let ns = 2 + rng.next_below(9); // up to 10
        let nt = 2 + rng.next_below(9);
        let p = 1 + rng.next_below(4);
        let hs = rng.draw(ns, p, norm)?;
        let ht = rng.draw(nt, p, norm)?;
        let (_, ghs, ght) = mmd(DomainBatch::new(&hs, &ht)?, bank)?;
        let mut analytic: Vec<f64> = ghs.data().to_vec();
        analytic.extend_from_slice(ght.data());
        let mut numeric = Vec::with_capacity(analytic.len());
        for idx in 0..hs.data().len() {
            numeric.push(central_diff(|eps| {
                let mut hp = hs.clone();
                hp.data_mut()[idx] += eps;
                Ok(mmd(DomainBatch::new(&hp, &ht)?, bank)?.0)
            })?);
        }
        for idx in 0..ht.data().len() {
            numeric.push(central_diff(|eps| {
                let mut hp = ht.clone();
                hp.data_mut()[idx] += eps;
                Ok(mmd(DomainBatch::new(&hs, &hp)?, bank)?.0)
            })?);
        }
        if corrupt && i == 0 {
            corrupt_grads(&mut analytic);
        }
        worst = worst.max(max_rel_err(&analytic, &numeric));
        configs += 1;
    }
    Ok(ComponentReport {
        name: "mmd",
        max_rel_err: worst,
        configs,
    })
}

fn check_coral(seed: u64, corrupt: bool) -> Result<ComponentReport> {
    let mut rng = SeededRng::new(seed ^ 0x636f_7261);
    let norm = Dist::Normal { mean: 0.0, std: 1.5 };
    let mut worst: f64 = 0.0;
    let mut configs = 0;
    for i in 0..5 {
        let ns = 3 + rng.next_below(8);
        let nt = 3 + rng.next_below(8);
        let p = 1 + rng.next_below(4);
        let hs = rng.draw(ns, p, norm)?;
        let ht = rng.draw(nt, p, norm)?;
        let (_, ghs, ght) = coral(DomainBatch::new(&hs, &ht)?)?;
        let mut analytic: Vec<f64> = ghs.data().to_vec();
        analytic.extend_from_slice(ght.data());
        let mut numeric = Vec::with_capacity(analytic.len());
        for idx in 0..hs.data().len() {
            numeric.push(central_diff(|eps| {
                let mut hp = hs.clone();
                hp.data_mut()[idx] += eps;
                Ok(coral(DomainBatch::new(&hp, &ht)?)?.0)
            })?);
        }
        for idx in 0..ht.data().len() {
            numeric.push(central_diff(|eps| {
                let mut hp = ht.clone();
                hp.data_mut()[idx] += eps;
                Ok(coral(DomainBatch::new(&hs, &hp)?)?.0)
            })?);
        }
        if corrupt && i == 0 {
            corrupt_grads(&mut analytic);
        }
        worst = worst.max(max_rel_err(&analytic, &numeric));
        configs += 1;
    }
    Ok(ComponentReport {
        name: "coral",
        max_rel_err: worst,
        configs,
    })
}

/// Entropy gradients are exercised through the softmax composition, the same
/// chain the training objective uses; probability-space perturbations would
/// leave the simplex.
fn check_entropy(seed: u64, corrupt: bool) -> Result<ComponentReport> {
    let mut rng = SeededRng::new(seed ^ 0x656e_7472);
    let norm = Dist::Normal { mean: 0.0, std: 2.0 };
    let mut worst: f64 = 0.0;
    let mut configs = 0;
    for (i, &k) in [2usize, 3, 5, 2, 5].iter().enumerate() {
        let m = 6;
        let z = rng.draw(m, k, norm)?;
        let probs = softmax(&z);
        let (_, g_probs) = entropy_reg(&probs)?;
        let g_logits = softmax_backward(&probs, &g_probs);
        let mut analytic = g_logits.data().to_vec();
        let mut numeric = Vec::with_capacity(analytic.len());
        for idx in 0..z.data().len() {
            numeric.push(central_diff(|eps| {
                let mut zp = z.clone();
                zp.data_mut()[idx] += eps;
                Ok(entropy_reg(&softmax(&zp))?.0)
            })?);
        }
        if corrupt && i == 0 {
            corrupt_grads(&mut analytic);
        }
        worst = worst.max(max_rel_err(&analytic, &numeric));
        configs += 1;
    }
    Ok(ComponentReport {
        name: "entropy_reg",
        max_rel_err: worst,
        configs,
    })
}

fn check_domain_adv(seed: u64, corrupt: bool) -> Result<ComponentReport> {
    let mut rng = SeededRng::new(seed ^ 0x6164_7600);
    let norm = Dist::Normal { mean: 0.0, std: 1.5 };
    let mut worst: f64 = 0.0;
    let mut configs = 0;
    for i in 0..5 {
        let ns = 2 + rng.next_below(5);
        let nt = 2 + rng.next_below(5);
        let logits = rng.draw(ns + nt, 2, norm)?;
        let labels: Vec<usize> = (0..ns + nt).map(|r| usize::from(r >= ns)).collect();
        let (_, grad) = domain_adv_loss(&logits, &labels)?;
        let mut analytic = grad.data().to_vec();
        let mut numeric = Vec::with_capacity(analytic.len());
        for idx in 0..logits.data().len() {
            numeric.push(central_diff(|eps| {
                let mut lp = logits.clone();
                lp.data_mut()[idx] += eps;
                Ok(domain_adv_loss(&lp, &labels)?.0)
            })?);
        }
        if corrupt && i == 0 {
            corrupt_grads(&mut analytic);
        }
        worst = worst.max(max_rel_err(&analytic, &numeric));
        configs += 1;
    }
    Ok(ComponentReport {
        name: "domain_adversarial",
        max_rel_err: worst,
        configs,
    })
}

#[derive(Clone, Copy, PartialEq)]
enum Piece {
    Feature,
    Predictor,
    Discriminator,
    Centers,
}

#[derive(Clone, Copy)]
struct ParamId {
    piece: Piece,
    layer: usize,
    weight: bool,
    idx: usize,
}

fn enumerate_params(model: &Model) -> Vec<ParamId> {
    let mut ids = Vec::new();
    let mut net = |piece: Piece, n: &NetworkStack| {
        for (layer, l) in n.layers().iter().enumerate() {
            for idx in 0..l.weight().data().len() {
                ids.push(ParamId {
                    piece,
                    layer,
                    weight: true,
                    idx,
                });
            }
            for idx in 0..l.bias().len() {
                ids.push(ParamId {
                    piece,
                    layer,
                    weight: false,
                    idx,
                });
            }
        }
    };
    net(Piece::Feature, &model.feature);
    net(Piece::Predictor, &model.predictor);
    if let Some(d) = &model.discriminator {
        net(Piece::Discriminator, d);
    }
    if let Some(c) = &model.centers {
        for idx in 0..c.matrix().data().len() {
            ids.push(ParamId {
                piece: Piece::Centers,
                layer: 0,
                weight: true,
                idx,
            });
        }
    }
    ids
}

fn param_mut(model: &mut Model, id: ParamId) -> &mut f64 {
    match id.piece {
        Piece::Centers => {
            &mut model
                .centers
                .as_mut()
                .expect("centers present")
                .matrix_mut()
                .data_mut()[id.idx]
        }
        _ => {
            let net = match id.piece {
                Piece::Feature => &mut model.feature,
                Piece::Predictor => &mut model.predictor,
                Piece::Discriminator => {
                    model.discriminator.as_mut().expect("discriminator present")
                }
                Piece::Centers => unreachable!(),
            };
            let layer = &mut net.layers_mut()[id.layer];
            if id.weight {
                &mut layer.weight.data_mut()[id.idx]
            } else {
                &mut layer.bias[id.idx]
            }
        }
    }
}

fn grad_of(grads: &StepGrads, id: ParamId) -> f64 {
    match id.piece {
        Piece::Feature => {
            let l = &grads.feature.layers[id.layer];
            if id.weight {
                l.weight.data()[id.idx]
            } else {
                l.bias[id.idx]
            }
        }
        Piece::Predictor => {
            let l = &grads.predictor.layers[id.layer];
            if id.weight {
                l.weight.data()[id.idx]
            } else {
                l.bias[id.idx]
            }
        }
        Piece::Discriminator => {
            let l = &grads.discriminator.as_ref().expect("disc grads").layers[id.layer];
            if id.weight {
                l.weight.data()[id.idx]
            } else {
                l.bias[id.idx]
            }
        }
        Piece::Centers => grads.centers.as_ref().expect("center grads").data()[id.idx],
    }
}

/// Checks the assembled objective end to end. Feature, predictor, and center
/// gradients are compared against differences of the feature-side scalar;
/// discriminator gradients against its own classification loss.
fn check_composite(
    seed: u64,
    transfer: TransferKind,
    name: &'static str,
    corrupt: bool,
) -> Result<ComponentReport> {
    let cfg = ExperimentConfig {
        transfer,
        fisher: match transfer {
            TransferKind::Coral => FisherKind::TraceRatio,
            _ => FisherKind::TraceDifference,
        },
        lambda0: 0.05,
        lambda_b: 0.5,
        lambda1: 0.1,
        lambda2: 0.7,
        classes: 3,
        feature_hidden: vec![6],
        feature_dim: 4,
        disc_hidden: vec![5],
        ..ExperimentConfig::default()
    };

    let mut rng = SeededRng::new(seed ^ 0x636f_6d70);
    let norm = Dist::Normal { mean: 0.0, std: 1.0 };
    let d_in = 3;
    let mut model = Model::build(&cfg, d_in, &mut rng)?;
    let obj = Objective::from_config(&cfg);
    let lambda2_eff = 0.8;

    let m = 6;
    let mut batch = Batch {
        x_s: rng.draw(m, d_in, norm)?,
        y_s: (0..m).map(|j| j % cfg.classes).collect(),
        x_t: rng.draw(m, d_in, norm)?,
    };
    // Stay clear of relu kinks in the feature net and the discriminator.
    for _ in 0..20 {
        let x_all = Matrix::vstack(&batch.x_s, &batch.x_t)?;
        let mut min = model.feature.min_abs_relu_preact(&x_all)?;
        if let Some(d) = &model.discriminator {
            let h_all = model.feature.infer(&x_all)?;
            min = min.min(d.min_abs_relu_preact(&h_all)?);
        }
        if min > 1e-4 {
            break;
        }
        batch.x_s = rng.draw(m, d_in, norm)?;
        batch.x_t = rng.draw(m, d_in, norm)?;
    }

    let (_, grads) = composite_step(&mut model.clone(), &batch, &obj, lambda2_eff)?;
    let ids = enumerate_params(&model);
    let mut analytic: Vec<f64> = ids.iter().map(|&id| grad_of(&grads, id)).collect();
    let mut numeric = Vec::with_capacity(ids.len());
    for &id in &ids {
        numeric.push(central_diff(|eps| {
            let orig = *param_mut(&mut model, id);
            *param_mut(&mut model, id) = orig + eps;
            let (_, total, adv) = composite_eval(&model, &batch, &obj, lambda2_eff)?;
            *param_mut(&mut model, id) = orig;
            Ok(match id.piece {
                Piece::Discriminator => adv.expect("adversarial scalar"),
                _ => total,
            })
        })?);
    }
    if corrupt {
        corrupt_grads(&mut analytic);
    }
    Ok(ComponentReport {
        name,
        max_rel_err: max_rel_err(&analytic, &numeric),
        configs: 1,
    })
}
