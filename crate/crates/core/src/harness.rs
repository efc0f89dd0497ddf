//! Experiment orchestration: composes the four-term objective, runs the
//! mini-batch training loop with its schedules and early stopping, evaluates
//! accuracies, and exports run artifacts.
//!
//! The composite objective per step is
//! `L_task(source) + lambda0 * L_fisher(source features)
//!  + lambda1 * Omega(target predictions) + lambda2 * L_transfer(both)`.
//! Source and target half-batches travel through the feature extractor as one
//! stacked batch so a single forward/backward pair serves all four terms. For
//! the adversarial criterion the discriminator minimizes its own
//! classification loss while the feature extractor receives the reversed,
//! `lambda2`-scaled gradient.

use std::io::BufRead;
use std::path::Path;

use crate::config::{DatasetKind, ExperimentConfig, TransferKind};
use crate::data::{
    gen_blob_shift, gen_two_moons_shift, load_csv, Batch, BatchSampler, DomainDataset, DomainTag,
    Standardizer,
};
use crate::error::{Error, Result};
use crate::losses::{
    cross_entropy, entropy_reg, fisher_grads, fisher_loss, scatter_traces, softmax,
    softmax_backward, Centers, FisherForm,
};
use crate::matrix::Matrix;
use crate::network::{grad_reverse, Activation, NetworkStack, ParamGrads};
use crate::optim::{AdvSchedule, EarlyStopper, LrSchedule, Sgd, StopDecision};
use crate::rng::SeededRng;
use crate::transfer::{
    coral, domain_adv_loss, mmd_estimator, DomainBatch, KernelBank, MmdEstimator,
};

/// Rows used for the fixed loss probe recorded at each evaluation step.
const PROBE_ROWS: usize = 128;

/// The trainable pieces of one run.
#[derive(Debug, Clone)]
pub struct Model {
    pub feature: NetworkStack,
    pub predictor: NetworkStack,
    pub discriminator: Option<NetworkStack>,
    pub centers: Option<Centers>,
}

impl Model {
    /// Builds the architecture from the config; consumes `rng` draws in a
    /// fixed order (feature, predictor, discriminator, centers).
    pub fn build(cfg: &ExperimentConfig, input_dim: usize, rng: &mut SeededRng) -> Result<Model> {
        let mut dims = vec![input_dim];
        dims.extend_from_slice(&cfg.feature_hidden);
        dims.push(cfg.feature_dim);
        let mut acts = vec![Activation::Relu; cfg.feature_hidden.len()];
        acts.push(Activation::Identity); // linear bottleneck
        let feature = NetworkStack::new(&dims, &acts, rng)?;

        let predictor = NetworkStack::new(
            &[cfg.feature_dim, cfg.classes],
            &[Activation::Identity],
            rng,
        )?;

        let discriminator = if cfg.transfer == TransferKind::Adversarial {
            let mut dims = vec![cfg.feature_dim];
            dims.extend_from_slice(&cfg.disc_hidden);
            dims.push(2);
            let mut acts = vec![Activation::Relu; cfg.disc_hidden.len()];
            acts.push(Activation::Identity);
            Some(NetworkStack::new(&dims, &acts, rng)?)
        } else {
            None
        };

        let centers = if cfg.fisher_form().is_some() {
            Some(Centers::init(cfg.classes, cfg.feature_dim, rng)?)
        } else {
            None
        };

        Ok(Model {
            feature,
            predictor,
            discriminator,
            centers,
        })
    }
}

/// The objective weights and criterion plumbing for one step.
pub(crate) struct Objective {
    pub transfer: TransferKind,
    pub fisher: Option<FisherForm>,
    pub lambda0: f64,
    pub lambda1: f64,
    pub entropy_both: bool,
    pub bank: KernelBank,
    pub mmd_estimator: MmdEstimator,
}

impl Objective {
    pub fn from_config(cfg: &ExperimentConfig) -> Objective {
        Objective {
            transfer: cfg.transfer,
            fisher: cfg.fisher_form(),
            lambda0: cfg.lambda0,
            lambda1: cfg.lambda1,
            entropy_both: cfg.entropy_both,
            bank: KernelBank::default(),
            mmd_estimator: if cfg.mmd_unbiased {
                MmdEstimator::Unbiased
            } else {
                MmdEstimator::Biased
            },
        }
    }
}

/// Loss values of one step; transfer is the raw criterion value.
#[derive(Debug, Clone, Copy)]
pub struct StepLosses {
    pub task: f64,
    pub fisher: f64,
    pub transfer: f64,
    pub entropy: f64,
    pub tr_sw: f64,
    pub tr_sb: f64,
}

/// Gradients of one step, one bucket per trainable piece.
pub struct StepGrads {
    pub feature: ParamGrads,
    pub predictor: ParamGrads,
    pub discriminator: Option<ParamGrads>,
    pub centers: Option<Matrix>,
}

/// Forward/backward over one half/half batch, accumulating all four loss
/// terms into a single gradient set. `lambda2_eff` is the scheduled transfer
/// weight at the current training progress.
pub(crate) fn composite_step(
    model: &mut Model,
    batch: &Batch,
    obj: &Objective,
    lambda2_eff: f64,
) -> Result<(StepLosses, StepGrads)> {
    let m_s = batch.x_s.rows();
    let m_t = batch.x_t.rows();
    let x_all = Matrix::vstack(&batch.x_s, &batch.x_t)?;
    let h_all = model.feature.forward(&x_all)?;
    let h_s = h_all.slice_rows(0, m_s);
    let h_t = h_all.slice_rows(m_s, m_s + m_t);

    let logits_all = model.predictor.forward(&h_all)?;
    let logits_s = logits_all.slice_rows(0, m_s);
    let logits_t = logits_all.slice_rows(m_s, m_s + m_t);
    let classes = logits_all.cols();

    // Task term on the labeled source half.
    let (task, g_logits_s) = cross_entropy(&logits_s, &batch.y_s)?;
    let mut g_logits = Matrix::zeros(m_s + m_t, classes);
    for r in 0..m_s {
        g_logits.row_mut(r).copy_from_slice(g_logits_s.row(r));
    }

    // Entropy term on target predictions (optionally both domains).
    let probs_t = softmax(&logits_t);
    let (mut entropy, g_probs_t) = entropy_reg(&probs_t)?;
    if obj.lambda1 > 0.0 {
        let g_logits_t = softmax_backward(&probs_t, &g_probs_t);
        for r in 0..m_t {
            for (dst, &g) in g_logits.row_mut(m_s + r).iter_mut().zip(g_logits_t.row(r)) {
                *dst += obj.lambda1 * g;
            }
        }
    }
    if obj.entropy_both {
        let probs_s = softmax(&logits_s);
        let (omega_s, g_probs_s) = entropy_reg(&probs_s)?;
        entropy += omega_s;
        if obj.lambda1 > 0.0 {
            let g_logits_s_ent = softmax_backward(&probs_s, &g_probs_s);
            for r in 0..m_s {
                for (dst, &g) in g_logits.row_mut(r).iter_mut().zip(g_logits_s_ent.row(r)) {
                    *dst += obj.lambda1 * g;
                }
            }
        }
    }

    // Fisher term on source features only; the target center assignment is
    // unknown by problem definition.
    let (fisher, tr_sw, tr_sb, fisher_grad_h, fisher_grad_c) = match (&obj.fisher, &model.centers)
    {
        (Some(form), Some(centers)) => {
            let (tr_sw, tr_sb) = scatter_traces(&h_s, &batch.y_s, centers)?;
            let value = fisher_loss(&h_s, &batch.y_s, centers, *form)?;
            let (gh, gc) = fisher_grads(&h_s, &batch.y_s, centers, *form)?;
            (value, tr_sw, tr_sb, Some(gh), Some(gc))
        }
        _ => (f64::NAN, f64::NAN, f64::NAN, None, None),
    };

    // Transfer term.
    let mut g_h_extra = Matrix::zeros(m_s + m_t, h_all.cols());
    let mut disc_grads = None;
    let transfer = match obj.transfer {
        TransferKind::None => f64::NAN,
        TransferKind::Mmd | TransferKind::Coral => {
            let db = DomainBatch::new(&h_s, &h_t)?;
            let (value, g_hs, g_ht) = if obj.transfer == TransferKind::Mmd {
                mmd_estimator(db, &obj.bank, obj.mmd_estimator)?
            } else {
                coral(db)?
            };
            for r in 0..m_s {
                for (dst, &g) in g_h_extra.row_mut(r).iter_mut().zip(g_hs.row(r)) {
                    *dst += lambda2_eff * g;
                }
            }
            for r in 0..m_t {
                for (dst, &g) in g_h_extra.row_mut(m_s + r).iter_mut().zip(g_ht.row(r)) {
                    *dst += lambda2_eff * g;
                }
            }
            value
        }
        TransferKind::Adversarial => {
            let disc = model
                .discriminator
                .as_mut()
                .expect("adversarial model carries a discriminator");
            let d_logits = disc.forward(&h_all)?;
            let d_labels: Vec<usize> = (0..m_s + m_t).map(|r| usize::from(r >= m_s)).collect();
            let (l_adv, g_d_logits) = domain_adv_loss(&d_logits, &d_labels)?;
            let (g_h_from_d, dg) = disc.backward(&g_d_logits)?;
            // Reversal: the feature extractor climbs the discriminator loss.
            g_h_extra = g_h_extra.add(&grad_reverse(&g_h_from_d, lambda2_eff)?)?;
            disc_grads = Some(dg);
            l_adv
        }
    };

    // Pull everything back through predictor and feature extractor.
    let (g_h_from_y, predictor_grads) = model.predictor.backward(&g_logits)?;
    let mut g_h = g_h_from_y.add(&g_h_extra)?;
    if let Some(gh_fisher) = &fisher_grad_h {
        for r in 0..m_s {
            for (dst, &g) in g_h.row_mut(r).iter_mut().zip(gh_fisher.row(r)) {
                *dst += obj.lambda0 * g;
            }
        }
    }
    let (_, feature_grads) = model.feature.backward(&g_h)?;
    let centers_grad = fisher_grad_c.map(|gc| gc.scale(obj.lambda0));

    Ok((
        StepLosses {
            task,
            fisher,
            transfer,
            entropy,
            tr_sw,
            tr_sb,
        },
        StepGrads {
            feature: feature_grads,
            predictor: predictor_grads,
            discriminator: disc_grads,
            centers: centers_grad,
        },
    ))
}

/// Loss values only, via the non-caching forward path. Returns the
/// feature-side composite scalar (for the adversarial criterion the transfer
/// term enters as `-lambda2 * l_adv`, matching what gradient reversal
/// optimizes with the discriminator frozen) and, for adversarial configs, the
/// discriminator's own loss.
pub(crate) fn composite_eval(
    model: &Model,
    batch: &Batch,
    obj: &Objective,
    lambda2_eff: f64,
) -> Result<(StepLosses, f64, Option<f64>)> {
    let m_s = batch.x_s.rows();
    let m_t = batch.x_t.rows();
    let x_all = Matrix::vstack(&batch.x_s, &batch.x_t)?;
    let h_all = model.feature.infer(&x_all)?;
    let h_s = h_all.slice_rows(0, m_s);
    let h_t = h_all.slice_rows(m_s, m_s + m_t);
    let logits_all = model.predictor.infer(&h_all)?;
    let logits_s = logits_all.slice_rows(0, m_s);
    let logits_t = logits_all.slice_rows(m_s, m_s + m_t);

    let (task, _) = cross_entropy(&logits_s, &batch.y_s)?;
    let (mut entropy, _) = entropy_reg(&softmax(&logits_t))?;
    if obj.entropy_both {
        entropy += entropy_reg(&softmax(&logits_s))?.0;
    }

    let (fisher, tr_sw, tr_sb) = match (&obj.fisher, &model.centers) {
        (Some(form), Some(centers)) => {
            let (tr_sw, tr_sb) = scatter_traces(&h_s, &batch.y_s, centers)?;
            (fisher_loss(&h_s, &batch.y_s, centers, *form)?, tr_sw, tr_sb)
        }
        _ => (f64::NAN, f64::NAN, f64::NAN),
    };

    let mut adv = None;
    let transfer = match obj.transfer {
        TransferKind::None => f64::NAN,
        TransferKind::Mmd => {
            mmd_estimator(DomainBatch::new(&h_s, &h_t)?, &obj.bank, obj.mmd_estimator)?.0
        }
        TransferKind::Coral => coral(DomainBatch::new(&h_s, &h_t)?)?.0,
        TransferKind::Adversarial => {
            let disc = model
                .discriminator
                .as_ref()
                .expect("adversarial model carries a discriminator");
            let d_logits = disc.infer(&h_all)?;
            let d_labels: Vec<usize> = (0..m_s + m_t).map(|r| usize::from(r >= m_s)).collect();
            let (l_adv, _) = domain_adv_loss(&d_logits, &d_labels)?;
            adv = Some(l_adv);
            l_adv
        }
    };

    let mut total = task;
    if fisher.is_finite() {
        total += obj.lambda0 * fisher;
    }
    total += obj.lambda1 * entropy;
    match obj.transfer {
        TransferKind::None => {}
        TransferKind::Adversarial => total -= lambda2_eff * transfer,
        _ => total += lambda2_eff * transfer,
    }

    Ok((
        StepLosses {
            task,
            fisher,
            transfer,
            entropy,
            tr_sw,
            tr_sb,
        },
        total,
        adv,
    ))
}

/// Velocity buffers, shape-congruent with the model.
pub(crate) struct Velocities {
    feature: ParamGrads,
    predictor: ParamGrads,
    discriminator: Option<ParamGrads>,
    centers: Option<Matrix>,
}

impl Velocities {
    pub(crate) fn zeros_like(model: &Model) -> Velocities {
        Velocities {
            feature: ParamGrads::zeros_like(&model.feature),
            predictor: ParamGrads::zeros_like(&model.predictor),
            discriminator: model.discriminator.as_ref().map(ParamGrads::zeros_like),
            centers: model
                .centers
                .as_ref()
                .map(|c| Matrix::zeros(c.classes(), c.feature_dim())),
        }
    }
}

/// One SGD update over every parameter group. The bottleneck (last feature
/// layer), predictor, discriminator, and centers carry the boosted rate.
pub(crate) fn apply_sgd(
    model: &mut Model,
    grads: &StepGrads,
    vels: &mut Velocities,
    sgd: &Sgd,
    lr: f64,
    boost: f64,
) -> Result<()> {
    let step_net = |net: &mut NetworkStack,
                    g: &ParamGrads,
                    v: &mut ParamGrads,
                    boost_all: bool|
     -> Result<()> {
        let count = net.layer_count();
        for (i, layer) in net.layers_mut().iter_mut().enumerate() {
            let mult = if boost_all || i + 1 == count { boost } else { 1.0 };
            sgd.step(
                layer.weight.data_mut(),
                g.layers[i].weight.data(),
                v.layers[i].weight.data_mut(),
                lr,
                mult,
            )?;
            sgd.step(
                &mut layer.bias,
                &g.layers[i].bias,
                &mut v.layers[i].bias,
                lr,
                mult,
            )?;
        }
        Ok(())
    };
    step_net(&mut model.feature, &grads.feature, &mut vels.feature, false)?;
    step_net(
        &mut model.predictor,
        &grads.predictor,
        &mut vels.predictor,
        true,
    )?;
    if let (Some(disc), Some(g), Some(v)) = (
        model.discriminator.as_mut(),
        grads.discriminator.as_ref(),
        vels.discriminator.as_mut(),
    ) {
        step_net(disc, g, v, true)?;
    }
    if let (Some(centers), Some(g), Some(v)) = (
        model.centers.as_mut(),
        grads.centers.as_ref(),
        vels.centers.as_mut(),
    ) {
        sgd.step(
            centers.matrix_mut().data_mut(),
            g.data(),
            v.data_mut(),
            lr,
            boost,
        )?;
    }
    Ok(())
}

/// Fraction of argmax-correct predictions; ties break toward the lowest
/// class index. The dataset's features must already be in model space.
pub fn evaluate(
    feature: &NetworkStack,
    predictor: &NetworkStack,
    ds: &DomainDataset,
) -> Result<f64> {
    if ds.is_empty() {
        return Err(Error::EmptyInput("evaluate on an empty dataset"));
    }
    let labels = ds
        .labels()
        .ok_or(Error::MissingLabels("evaluate needs labels"))?;
    let h = feature.infer(ds.features())?;
    let logits = predictor.infer(&h)?;
    let mut correct = 0usize;
    for (r, &y) in labels.iter().enumerate() {
        if argmax(logits.row(r)) == y {
            correct += 1;
        }
    }
    Ok(correct as f64 / labels.len() as f64)
}

pub(crate) fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopReason {
    Budget,
    EarlyStop,
}

impl StopReason {
    pub fn as_str(&self) -> &'static str {
        match self {
            StopReason::Budget => "budget",
            StopReason::EarlyStop => "early_stop",
        }
    }
}

/// One evaluation record. Loss terms come from a fixed probe batch; the
/// accuracies from the held-out source split and the full target set.
#[derive(Debug, Clone, Copy)]
pub struct EvalRecord {
    pub batch: usize,
    pub task: f64,
    pub fisher: f64,
    pub transfer: f64,
    pub entropy: f64,
    pub tr_sw: f64,
    pub tr_sb: f64,
    pub source_acc: f64,
    pub target_acc: f64,
}

#[derive(Debug, Clone)]
pub struct RunReport {
    pub records: Vec<EvalRecord>,
    pub stop_reason: StopReason,
    pub batches_run: usize,
    pub final_source_acc: f64,
    pub final_target_acc: f64,
}

/// A trained model plus the source-fit input standardizer, everything the
/// `eval` entry point needs.
#[derive(Debug, Clone)]
pub struct TrainedModel {
    pub model: Model,
    pub standardizer: Standardizer,
}

pub struct TrainOutcome {
    pub report: RunReport,
    pub trained: TrainedModel,
}

/// Generates or loads the configured dataset pair.
pub fn prepare_data(
    cfg: &ExperimentConfig,
    rng: &mut SeededRng,
) -> Result<(DomainDataset, DomainDataset)> {
    let (source, target) = match cfg.dataset {
        DatasetKind::Moons => {
            gen_two_moons_shift(cfg.n_per_domain, cfg.rotation_deg, cfg.noise_sigma, rng)?
        }
        DatasetKind::Blobs => gen_blob_shift(cfg.classes, cfg.n_per_domain, &cfg.blob_shift, rng)?,
        DatasetKind::Csv => {
            let source = load_csv(Path::new(&cfg.source_csv), true, DomainTag::Source)?;
            let target = load_csv(
                Path::new(&cfg.target_csv),
                cfg.target_labeled,
                DomainTag::Target,
            )?;
            if source.dim() != target.dim() {
                return Err(Error::DimensionMismatch {
                    op: "csv_domains",
                    left: format!("source dim {}", source.dim()),
                    right: format!("target dim {}", target.dim()),
                });
            }
            (source, target)
        }
    };
    source.validate_labels(cfg.classes)?;
    target.validate_labels(cfg.classes)?;
    Ok((source, target))
}

/// Full run: generate data per the config, then train.
pub fn run_train(cfg: &ExperimentConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let mut master = SeededRng::new(cfg.seed);
    let mut data_rng = master.fork();
    let (source, target) = prepare_data(cfg, &mut data_rng)?;
    train_inner(cfg, &source, &target, master)
}

/// Train on caller-provided datasets (same RNG discipline as [`run_train`],
/// with the data stream left unused).
pub fn run_train_with_data(
    cfg: &ExperimentConfig,
    source: &DomainDataset,
    target: &DomainDataset,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let mut master = SeededRng::new(cfg.seed);
    let _ = master.fork();
    train_inner(cfg, source, target, master)
}

fn train_inner(
    cfg: &ExperimentConfig,
    source: &DomainDataset,
    target: &DomainDataset,
    mut master: SeededRng,
) -> Result<TrainOutcome> {
    let mut subsample_rng = master.fork();
    let mut net_rng = master.fork();
    let sampler_rng = master.fork();
    let mut split_rng = master.fork();

    // Optional source subsampling for data-efficiency runs.
    let source = if cfg.source_fraction < 1.0 {
        let mut idx: Vec<usize> = (0..source.len()).collect();
        subsample_rng.shuffle(&mut idx);
        let keep =
            ((source.len() as f64 * cfg.source_fraction).round() as usize).clamp(2, source.len());
        source.subset(&idx[..keep])
    } else {
        source.clone()
    };

    // Standardize on source statistics only; target statistics must not leak.
    let standardizer = Standardizer::fit(source.features())?;
    let source = source.with_features(standardizer.transform(source.features())?)?;
    let (val, train) = source.split(cfg.val_fraction, &mut split_rng)?;
    // The training path sees target features only; labels stay behind for
    // the evaluator below.
    let target_features = standardizer.transform(target.features())?;
    let target_eval = if target.has_labels() {
        Some(target.with_features(target_features.clone())?)
    } else {
        None
    };

    let half = cfg.batch_size / 2;
    if train.len() < half || target_features.rows() < half {
        return Err(Error::Config(format!(
            "half batch {} exceeds available data ({} train source / {} target)",
            half,
            train.len(),
            target_features.rows()
        )));
    }

    let mut model = Model::build(cfg, source.dim(), &mut net_rng)?;
    let mut vels = Velocities::zeros_like(&model);
    let obj = Objective::from_config(cfg);
    let sgd = Sgd {
        momentum: cfg.momentum,
        weight_decay: cfg.weight_decay,
    };
    let lr_sched = LrSchedule::new(cfg.lr0, cfg.lr_omega, cfg.lr_rho)?;
    let adv_sched = AdvSchedule::new(cfg.lambda2, cfg.adv_gamma)?;
    let mut stopper = EarlyStopper::new((cfg.patience / cfg.eval_every).max(1))?;
    let mut sampler =
        BatchSampler::new(cfg.batch_size, train.len(), target_features.rows(), sampler_rng)?;

    // Fixed probe batch for the recorded loss values.
    let probe = {
        let rows_s = train.len().min(PROBE_ROWS);
        let rows_t = target_features.rows().min(PROBE_ROWS);
        let idx_s: Vec<usize> = (0..rows_s).collect();
        let y_all = train
            .labels()
            .ok_or(Error::MissingLabels("source training labels"))?;
        Batch {
            x_s: train.features().gather_rows(&idx_s),
            y_s: idx_s.iter().map(|&i| y_all[i]).collect(),
            x_t: target_features.slice_rows(0, rows_t),
        }
    };

    let mut records: Vec<EvalRecord> = Vec::new();
    let mut stop_reason = StopReason::Budget;
    let mut batches_run = 0usize;

    let record_eval = |model: &Model,
                       records: &mut Vec<EvalRecord>,
                       batch_index: usize,
                       lambda2_eff: f64|
     -> Result<EvalRecord> {
        let (losses, _, _) = composite_eval(model, &probe, &obj, lambda2_eff)?;
        let source_acc = evaluate(&model.feature, &model.predictor, &val)?;
        let target_acc = match &target_eval {
            Some(ds) => evaluate(&model.feature, &model.predictor, ds)?,
            None => f64::NAN,
        };
        let rec = EvalRecord {
            batch: batch_index,
            task: losses.task,
            fisher: losses.fisher,
            transfer: losses.transfer,
            entropy: losses.entropy,
            tr_sw: losses.tr_sw,
            tr_sb: losses.tr_sb,
            source_acc,
            target_acc,
        };
        records.push(rec);
        Ok(rec)
    };

    for b in 0..cfg.max_batches {
        let p = b as f64 / cfg.max_batches as f64;
        let lr = lr_sched.lr_at(p)?;
        let lambda2_eff = match cfg.transfer {
            TransferKind::Adversarial => adv_sched.lambda2_at(p)?,
            TransferKind::None => 0.0,
            _ => cfg.lambda2,
        };
        if b == 0 {
            record_eval(&model, &mut records, 0, lambda2_eff)?;
        }
        let batch = sampler.next_batch(&train, &target_features)?;
        let (_, grads) = composite_step(&mut model, &batch, &obj, lambda2_eff)?;
        apply_sgd(&mut model, &grads, &mut vels, &sgd, lr, cfg.lr_boost)?;
        batches_run = b + 1;

        if (b + 1) % cfg.eval_every == 0 {
            let rec = record_eval(&model, &mut records, b + 1, lambda2_eff)?;
            if stopper.update(rec.source_acc, true)? == StopDecision::Stop {
                stop_reason = StopReason::EarlyStop;
                break;
            }
        }
    }

    let (final_source_acc, final_target_acc) = match records.last() {
        Some(r) => (r.source_acc, r.target_acc),
        None => (f64::NAN, f64::NAN),
    };
    Ok(TrainOutcome {
        report: RunReport {
            records,
            stop_reason,
            batches_run,
            final_source_acc,
            final_target_acc,
        },
        trained: TrainedModel {
            model,
            standardizer,
        },
    })
}

impl TrainedModel {
    /// Class predictions for raw (unstandardized) inputs.
    pub fn predict(&self, raw_x: &Matrix) -> Result<Vec<usize>> {
        let x = self.standardizer.transform(raw_x)?;
        let h = self.model.feature.infer(&x)?;
        let logits = self.model.predictor.infer(&h)?;
        Ok((0..logits.rows()).map(|r| argmax(logits.row(r))).collect())
    }

    /// Latent features for raw inputs.
    pub fn embed(&self, raw_x: &Matrix) -> Result<Matrix> {
        let x = self.standardizer.transform(raw_x)?;
        self.model.feature.infer(&x)
    }

    /// Accuracy on a raw labeled dataset.
    pub fn evaluate_raw(&self, ds: &DomainDataset) -> Result<f64> {
        let std = ds.with_features(self.standardizer.transform(ds.features())?)?;
        evaluate(&self.model.feature, &self.model.predictor, &std)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        out.push_str("fisherda snapshot v1\n");
        out.push_str(&format!(
            "has_discriminator {}\n",
            usize::from(self.model.discriminator.is_some())
        ));
        out.push_str(&format!(
            "has_centers {}\n",
            usize::from(self.model.centers.is_some())
        ));
        let vec_line = |name: &str, v: &[f64]| -> String {
            let vals: Vec<String> = v.iter().map(f64::to_string).collect();
            format!("vec {} {}\n{}\n", name, v.len(), vals.join(" "))
        };
        out.push_str(&vec_line("mean", self.standardizer.means()));
        out.push_str(&vec_line("std", self.standardizer.stds()));
        let mut buf = Vec::new();
        self.model.feature.write_snapshot(&mut buf, "feature")?;
        self.model.predictor.write_snapshot(&mut buf, "predictor")?;
        if let Some(disc) = &self.model.discriminator {
            disc.write_snapshot(&mut buf, "discriminator")?;
        }
        out.push_str(&String::from_utf8(buf).expect("snapshot text is utf8"));
        if let Some(centers) = &self.model.centers {
            let m = centers.matrix();
            out.push_str(&format!("matrix centers {} {}\n", m.rows(), m.cols()));
            for r in 0..m.rows() {
                let vals: Vec<String> = m.row(r).iter().map(f64::to_string).collect();
                out.push_str(&vals.join(" "));
                out.push('\n');
            }
        }
        out.push_str("end\n");
        write_atomic(path, out.as_bytes())
    }

    pub fn load(path: &Path) -> Result<TrainedModel> {
        let file =
            std::fs::File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        let mut lines = std::io::BufReader::new(file).lines();
        let bad = |msg: &str| Error::Snapshot(msg.to_string());
        let mut next_line = || -> Result<String> {
            lines
                .next()
                .ok_or_else(|| bad("unexpected end of snapshot"))?
                .map_err(|e| Error::io(path.display().to_string(), e))
        };
        if next_line()? != "fisherda snapshot v1" {
            return Err(bad("unrecognized snapshot header"));
        }
        let flag = |line: String, name: &str| -> Result<bool> {
            let parts: Vec<&str> = line.split_whitespace().collect();
            if parts.len() != 2 || parts[0] != name {
                return Err(bad(&format!("expected '{name} 0|1'")));
            }
            Ok(parts[1] == "1")
        };
        let has_disc = flag(next_line()?, "has_discriminator")?;
        let has_centers = flag(next_line()?, "has_centers")?;
        let mut read_vec = |name: &str| -> Result<Vec<f64>> {
            let header = next_line()?;
            let parts: Vec<&str> = header.split_whitespace().collect();
            if parts.len() != 3 || parts[0] != "vec" || parts[1] != name {
                return Err(bad(&format!("expected 'vec {name} <len>'")));
            }
            let len: usize = parts[2].parse().map_err(|_| bad("bad vec length"))?;
            let data = next_line()?;
            let vals: std::result::Result<Vec<f64>, _> =
                data.split_whitespace().map(str::parse).collect();
            let vals = vals.map_err(|_| bad("non-numeric vec entry"))?;
            if vals.len() != len {
                return Err(bad("vec length mismatch"));
            }
            Ok(vals)
        };
        let means = read_vec("mean")?;
        let stds = read_vec("std")?;
        let standardizer = Standardizer::from_parts(means, stds)?;

        // The remaining sections are consumed through a fresh line cursor.
        let mut rest = Vec::new();
        while let Ok(line) = next_line() {
            if line == "end" {
                break;
            }
            rest.push(line);
        }
        let joined = rest.join("\n");
        let mut cursor = std::io::BufReader::new(joined.as_bytes()).lines();
        let (name, feature) = NetworkStack::read_snapshot(&mut cursor)?;
        if name != "feature" {
            return Err(bad("expected feature network first"));
        }
        let (name, predictor) = NetworkStack::read_snapshot(&mut cursor)?;
        if name != "predictor" {
            return Err(bad("expected predictor network second"));
        }
        let discriminator = if has_disc {
            let (name, d) = NetworkStack::read_snapshot(&mut cursor)?;
            if name != "discriminator" {
                return Err(bad("expected discriminator network"));
            }
            Some(d)
        } else {
            None
        };
        let centers = if has_centers {
            let header = cursor
                .next()
                .ok_or_else(|| bad("missing centers header"))?
                .map_err(|e| Error::io(path.display().to_string(), e))?;
            let parts: Vec<&str> = header.split_whitespace().collect();
            if parts.len() != 4 || parts[0] != "matrix" || parts[1] != "centers" {
                return Err(bad("expected 'matrix centers <k> <p>'"));
            }
            let k: usize = parts[2].parse().map_err(|_| bad("bad centers rows"))?;
            let p: usize = parts[3].parse().map_err(|_| bad("bad centers cols"))?;
            let mut data = Vec::with_capacity(k * p);
            for _ in 0..k {
                let line = cursor
                    .next()
                    .ok_or_else(|| bad("missing centers row"))?
                    .map_err(|e| Error::io(path.display().to_string(), e))?;
                let vals: std::result::Result<Vec<f64>, _> =
                    line.split_whitespace().map(str::parse).collect();
                let vals = vals.map_err(|_| bad("non-numeric centers entry"))?;
                if vals.len() != p {
                    return Err(bad("centers row width mismatch"));
                }
                data.extend(vals);
            }
            Some(Centers::from_matrix(Matrix::from_vec(k, p, data)?)?)
        } else {
            None
        };

        Ok(TrainedModel {
            model: Model {
                feature,
                predictor,
                discriminator,
                centers,
            },
            standardizer,
        })
    }
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(tmp.display().to_string(), e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path.display().to_string(), e))
}

/// Feature vectors plus bookkeeping columns for the embeddings export.
pub struct EmbeddingExport {
    pub features: Matrix,
    pub domain: Vec<u8>,
    pub label: Vec<i64>,
    pub pred: Vec<usize>,
}

/// Embeds both (raw) datasets with the trained model; target rows follow
/// source rows. Missing labels export as -1.
pub fn compute_embeddings(
    trained: &TrainedModel,
    source: &DomainDataset,
    target: &DomainDataset,
) -> Result<EmbeddingExport> {
    let mut features: Option<Matrix> = None;
    let mut domain = Vec::new();
    let mut label = Vec::new();
    let mut pred = Vec::new();
    for ds in [source, target] {
        let h = trained.embed(ds.features())?;
        let preds = trained.predict(ds.features())?;
        features = Some(match features {
            None => h,
            Some(prev) => Matrix::vstack(&prev, &h)?,
        });
        let tag = match ds.domain() {
            DomainTag::Source => 0u8,
            DomainTag::Target => 1u8,
        };
        domain.extend(std::iter::repeat_n(tag, ds.len()));
        match ds.labels() {
            Some(ys) => label.extend(ys.iter().map(|&y| y as i64)),
            None => label.extend(std::iter::repeat_n(-1i64, ds.len())),
        }
        pred.extend(preds);
    }
    Ok(EmbeddingExport {
        features: features.expect("two nonempty datasets"),
        domain,
        label,
        pred,
    })
}

/// Writes `metrics.csv`, `embeddings.csv`, and `config.echo` into `out_dir`.
/// Each file is written to a temporary name and renamed into place.
pub fn export(
    report: &RunReport,
    embeddings: &EmbeddingExport,
    cfg: &ExperimentConfig,
    out_dir: &Path,
) -> Result<()> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir.display().to_string(), e))?;

    let mut metrics = String::from(
        "batch,task_loss,fisher_loss,transfer_loss,entropy,tr_sw,tr_sb,source_acc,target_acc\n",
    );
    for r in &report.records {
        metrics.push_str(&format!(
            "{},{},{},{},{},{},{},{},{}\n",
            r.batch, r.task, r.fisher, r.transfer, r.entropy, r.tr_sw, r.tr_sb, r.source_acc,
            r.target_acc
        ));
    }
    write_atomic(&out_dir.join("metrics.csv"), metrics.as_bytes())?;

    let p = embeddings.features.cols();
    let mut emb = String::new();
    for i in 0..p {
        emb.push_str(&format!("h{i},"));
    }
    emb.push_str("domain,label,pred\n");
    for r in 0..embeddings.features.rows() {
        for v in embeddings.features.row(r) {
            emb.push_str(&format!("{v},"));
        }
        emb.push_str(&format!(
            "{},{},{}\n",
            embeddings.domain[r], embeddings.label[r], embeddings.pred[r]
        ));
    }
    write_atomic(&out_dir.join("embeddings.csv"), emb.as_bytes())?;

    write_atomic(&out_dir.join("config.echo"), cfg.echo().as_bytes())
}
