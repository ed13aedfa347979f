//! The two-term joint loss, the triangular cyclical learning-rate schedule,
//! sequential stagewise training with early stopping, and a finite-difference
//! gradient check.

use ndarray::Array1;
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::geometry::{
    generate_landmark_heatmap, interpupil_distance, warp_image_to, Heatmap, SimilarityTransform,
};
use crate::network::{
    accumulate_grads, compose_stage_output, connection_backward, connection_layer, stage_backward,
    ModelState, StageGrads, StageInputView, StageOutput, StageParams,
};
use crate::types::{EmotionLabel, Frame, GrayImage, LandmarkSet, TrainConfig, NUM_LANDMARKS};

/// Floor applied to probabilities before taking logs, keeping the
/// cross-entropy finite on saturated softmax outputs.
pub const LOG_CLAMP: f64 = 1e-12;

/// The two raw loss terms and their weighted combination.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    /// ||S - S*|| over all 136 coordinates, divided by the inter-pupil
    /// distance of the ground truth. Unweighted.
    pub landmark_term: f64,
    /// Cross-entropy of the predicted distribution against the one-hot
    /// label, in nats. Unweighted.
    pub emotion_term: f64,
    /// alpha * landmark_term + beta * emotion_term.
    pub total: f64,
}

/// Joint loss over a predicted shape and emotion distribution.
///
/// Both shapes must live in the same frame; the distribution length must
/// match the label's scheme. Fails when the ground truth has a zero
/// inter-pupil distance.
pub fn joint_loss(
    pred: &LandmarkSet,
    gt: &LandmarkSet,
    probs: &crate::types::EmotionDistribution,
    label: &EmotionLabel,
    cfg: &TrainConfig,
) -> Result<LossBreakdown> {
    if pred.frame() != gt.frame() {
        return Err(Error::Validation(format!(
            "predicted shape is in the {:?} frame but ground truth is in {:?}",
            pred.frame(),
            gt.frame()
        )));
    }
    if probs.len() != label.scheme().num_classes() {
        return Err(Error::Validation(format!(
            "distribution over {} classes does not match {:?}-scheme label",
            probs.len(),
            label.scheme()
        )));
    }
    let d = interpupil_distance(gt)?;
    let norm = shape_distance(&pred.to_flat(), &gt.to_flat());
    let landmark_term = norm / d;
    let emotion_term = -probs.probs()[label.class_id()].max(LOG_CLAMP).ln();
    Ok(LossBreakdown {
        landmark_term,
        emotion_term,
        total: cfg.alpha * landmark_term + cfg.beta * emotion_term,
    })
}

fn shape_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Triangular cyclical learning-rate schedule.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LrSchedule {
    pub base_lr: f64,
    pub max_lr: f64,
    /// Iterations per half-cycle.
    pub step_size: usize,
}

impl LrSchedule {
    pub fn new(base_lr: f64, max_lr: f64, step_size: usize) -> Result<Self> {
        if base_lr >= max_lr {
            return Err(Error::Config(format!(
                "base_lr {base_lr} must be below max_lr {max_lr}"
            )));
        }
        if step_size < 1 {
            return Err(Error::Config("step_size must be at least 1".into()));
        }
        Ok(Self {
            base_lr,
            max_lr,
            step_size,
        })
    }
}

/// Learning rate at an iteration: rises linearly from base to max over
/// `step_size` iterations, falls back linearly over the next `step_size`,
/// and repeats.
pub fn cyclical_lr(iteration: usize, sched: &LrSchedule) -> f64 {
    let period = 2 * sched.step_size;
    let x = iteration % period;
    let frac = if x <= sched.step_size {
        x as f64 / sched.step_size as f64
    } else {
        (period - x) as f64 / sched.step_size as f64
    };
    sched.base_lr + (sched.max_lr - sched.base_lr) * frac
}

/// One preprocessed training sample.
#[derive(Debug, Clone)]
pub struct TrainSample {
    pub image: GrayImage,
    /// Ground-truth landmarks in the image frame.
    pub landmarks: LandmarkSet,
    pub label: EmotionLabel,
}

/// One row of the per-epoch training log.
#[derive(Debug, Clone, Copy)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Optimizer iterations completed so far.
    pub iteration: usize,
    /// Learning rate of the last step in the epoch.
    pub lr: f64,
    pub train_total: f64,
    pub train_landmark: f64,
    pub train_emotion: f64,
    pub val_total: f64,
    pub val_accuracy: f64,
}

/// Training log of a single stage.
#[derive(Debug, Clone)]
pub struct StageTrainLog {
    pub stage: usize,
    pub records: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_total: f64,
    pub stopped_early: bool,
}

impl StageTrainLog {
    /// Writes the log as CSV with the columns
    /// `epoch,iteration,lr,train_total,train_landmark,train_emotion,val_total,val_accuracy`.
    pub fn write_csv<W: std::io::Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(
            w,
            "epoch,iteration,lr,train_total,train_landmark,train_emotion,val_total,val_accuracy"
        )?;
        for r in &self.records {
            writeln!(
                w,
                "{},{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}",
                r.epoch,
                r.iteration,
                r.lr,
                r.train_total,
                r.train_landmark,
                r.train_emotion,
                r.val_total,
                r.val_accuracy
            )?;
        }
        Ok(())
    }
}

/// Frozen per-sample inputs of the stage being trained. Everything here
/// depends only on earlier (frozen) stages, so it is computed once.
struct SampleCtx {
    warped: GrayImage,
    heatmap: Heatmap,
    transform: SimilarityTransform,
    inverse: SimilarityTransform,
    /// T(S_prev): the canonical-frame base the landmark delta adds to.
    base_flat: Vec<f64>,
    prev_features: Option<Vec<f64>>,
    gt_flat: Vec<f64>,
    interpupil: f64,
    label_id: usize,
}

fn build_contexts(
    model: &ModelState,
    stage_idx: usize,
    samples: &[TrainSample],
    cfg: &TrainConfig,
) -> Result<Vec<SampleCtx>> {
    let size = model.arch.input_size;
    let mut ctxs = Vec::with_capacity(samples.len());
    for sample in samples {
        if sample.label.scheme() != cfg.emotion_scheme {
            return Err(Error::Validation(format!(
                "sample labelled in the {:?} scheme but the run uses {:?}",
                sample.label.scheme(),
                cfg.emotion_scheme
            )));
        }
        let mut shape = model.initial_shape(sample.image.height(), sample.image.width());
        let mut prev_features: Option<Vec<f64>> = None;
        for s in 0..stage_idx {
            let stage = &model.stages[s];
            let (input, transform) =
                model.stage_input(&sample.image, &shape, stage, prev_features.as_deref())?;
            let output = stage.forward(&input)?;
            shape = compose_stage_output(&shape, &output.landmark_delta, &transform)?;
            prev_features = Some(output.shared_features);
        }
        let transform = SimilarityTransform::estimate(&shape, &model.canonical_shape)?;
        let warped = warp_image_to(&sample.image, &transform, size, size)?;
        let aligned = transform.apply(&shape).with_frame(Frame::Canonical);
        let heatmap = generate_landmark_heatmap(&aligned, size);
        let interpupil = interpupil_distance(&sample.landmarks)?;
        ctxs.push(SampleCtx {
            warped,
            heatmap,
            inverse: transform.inverse()?,
            base_flat: aligned.to_flat(),
            transform,
            prev_features,
            gt_flat: sample.landmarks.to_flat(),
            interpupil,
            label_id: sample.label.class_id(),
        });
    }
    Ok(ctxs)
}

/// Composes a canonical-frame base and delta back into the image frame.
fn compose_from_base(base: &[f64], delta: &[f64], inverse: &SimilarityTransform) -> Vec<f64> {
    let mut out = Vec::with_capacity(base.len());
    for i in 0..base.len() / 2 {
        let p = inverse.apply_point(crate::types::Point::new(
            base[2 * i] + delta[2 * i],
            base[2 * i + 1] + delta[2 * i + 1],
        ));
        out.push(p.x);
        out.push(p.y);
    }
    out
}

/// Loss of one stage output plus its gradients with respect to the landmark
/// delta and the emotion logits.
fn loss_and_gradients(
    ctx: &SampleCtx,
    output: &StageOutput,
    alpha: f64,
    beta: f64,
) -> (LossBreakdown, Array1<f64>, Array1<f64>) {
    let composed = compose_from_base(&ctx.base_flat, &output.landmark_delta, &ctx.inverse);
    let diff: Vec<f64> = composed
        .iter()
        .zip(&ctx.gt_flat)
        .map(|(a, b)| a - b)
        .collect();
    let norm = diff.iter().map(|v| v * v).sum::<f64>().sqrt();
    let landmark_term = norm / ctx.interpupil;

    // d||v||/dv = v/||v||, mapped through the linear part of T^-1: for T
    // with scale s and rotation theta the transpose of that linear map is
    // R(theta)/s.
    let mut d_delta = Array1::zeros(2 * NUM_LANDMARKS);
    if norm > 1e-12 && alpha != 0.0 {
        let factor = alpha / (ctx.interpupil * norm);
        let (sin, cos) = ctx.transform.rotation.sin_cos();
        let inv_s = 1.0 / ctx.transform.scale;
        for i in 0..NUM_LANDMARKS {
            let gx = factor * diff[2 * i];
            let gy = factor * diff[2 * i + 1];
            d_delta[2 * i] = inv_s * (cos * gx - sin * gy);
            d_delta[2 * i + 1] = inv_s * (sin * gx + cos * gy);
        }
    }

    let logits = &output.emotion_logits;
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&v| (v - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    let probs: Vec<f64> = exps.iter().map(|e| e / z).collect();
    let emotion_term = -probs[ctx.label_id].max(LOG_CLAMP).ln();
    let d_logits = Array1::from_shape_fn(probs.len(), |c| {
        beta * (probs[c] - if c == ctx.label_id { 1.0 } else { 0.0 })
    });

    (
        LossBreakdown {
            landmark_term,
            emotion_term,
            total: alpha * landmark_term + beta * emotion_term,
        },
        d_delta,
        d_logits,
    )
}

/// Evaluation-mode forward pass of one stage over a prepared context. The
/// feature image is recomputed from the current connection weights.
fn stage_eval(stage: &StageParams, model: &ModelState, ctx: &SampleCtx) -> Result<StageOutput> {
    let feature_image = match (&stage.connection, &ctx.prev_features) {
        (Some(conn), Some(feats)) => Some(connection_layer(conn, feats, &model.arch)?),
        _ => None,
    };
    let view = StageInputView {
        warped_image: &ctx.warped,
        heatmap: &ctx.heatmap,
        feature_image: feature_image.as_ref(),
    };
    Ok(stage.forward_view(view, None)?.0)
}

fn sgd_step(
    params: &mut StageParams,
    grads: &StageGrads,
    velocity: &mut StageParams,
    lr: f64,
    momentum: f64,
) {
    let g = grads.tensors();
    let mut p = params.tensors_mut();
    let mut v = velocity.tensors_mut();
    for ((pt, gt), vt) in p.iter_mut().zip(g).zip(v.iter_mut()) {
        for i in 0..pt.len() {
            vt[i] = momentum * vt[i] + gt[i];
            pt[i] -= lr * vt[i];
        }
    }
}

/// Trains one stage by mini-batch momentum SGD on the joint loss under the
/// cyclical schedule, holding every other stage fixed.
///
/// Training stops when the validation total loss has not improved by at
/// least `cfg.min_delta` for `cfg.patience` consecutive epochs, or after
/// `cfg.epochs` epochs. The stage is left at the parameters of its best
/// validation epoch.
pub fn train_stage(
    model: &mut ModelState,
    stage_idx: usize,
    train: &[TrainSample],
    val: &[TrainSample],
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<StageTrainLog> {
    cfg.validate()?;
    if stage_idx >= model.stages.len() {
        return Err(Error::Config(format!(
            "stage index {} out of range for a {}-stage model",
            stage_idx,
            model.stages.len()
        )));
    }
    if train.is_empty() || val.is_empty() {
        return Err(Error::Config(
            "training and validation sets must be non-empty".into(),
        ));
    }
    if model.scheme != cfg.emotion_scheme {
        return Err(Error::Validation(format!(
            "model uses the {:?} scheme but the config says {:?}",
            model.scheme, cfg.emotion_scheme
        )));
    }

    let train_ctx = build_contexts(model, stage_idx, train, cfg)?;
    let val_ctx = build_contexts(model, stage_idx, val, cfg)?;

    let batches_per_epoch = train.len().div_ceil(cfg.batch_size);
    let step_size = if cfg.step_size == 0 {
        2 * batches_per_epoch
    } else {
        cfg.step_size
    };
    let sched = LrSchedule::new(cfg.base_lr, cfg.max_lr, step_size)?;

    let mut velocity = model.stages[stage_idx].zeros_like();
    let mut iteration = 0usize;
    let mut records = Vec::new();
    let mut best: Option<(f64, usize, StageParams)> = None;
    let mut patience_used = 0usize;
    let mut stopped_early = false;
    let mut indices: Vec<usize> = (0..train.len()).collect();

    for epoch in 0..cfg.epochs {
        indices.shuffle(rng);
        let mut sum_total = 0.0;
        let mut sum_landmark = 0.0;
        let mut sum_emotion = 0.0;
        let mut last_lr = cyclical_lr(iteration, &sched);

        for batch in indices.chunks(cfg.batch_size) {
            let mut grads = model.stages[stage_idx].zeros_like();
            {
                let stage = &model.stages[stage_idx];
                for &i in batch {
                    let ctx = &train_ctx[i];
                    let feature_image = match (&stage.connection, &ctx.prev_features) {
                        (Some(conn), Some(feats)) => {
                            Some(connection_layer(conn, feats, &model.arch)?)
                        }
                        _ => None,
                    };
                    let view = StageInputView {
                        warped_image: &ctx.warped,
                        heatmap: &ctx.heatmap,
                        feature_image: feature_image.as_ref(),
                    };
                    let (output, trace) = stage.forward_view(view, Some((cfg.dropout_p, rng)))?;
                    let (bd, d_delta, d_logits) =
                        loss_and_gradients(ctx, &output, cfg.alpha, cfg.beta);
                    if !bd.total.is_finite() {
                        return Err(Error::Divergence { iteration });
                    }
                    sum_total += bd.total;
                    sum_landmark += bd.landmark_term;
                    sum_emotion += bd.emotion_term;

                    let (g, d_combined) = stage_backward(stage, &trace, &d_delta, &d_logits);
                    accumulate_grads(&mut grads, &g, 1.0);
                    if let (Some(_), Some(feats)) = (&stage.connection, &ctx.prev_features) {
                        let g_conn = connection_backward(&d_combined, feats, &model.arch);
                        let acc = grads.connection.as_mut().expect("connection grads present");
                        acc.weight += &g_conn.weight;
                        acc.bias += &g_conn.bias;
                    }
                }
            }
            let scale = 1.0 / batch.len() as f64;
            for t in grads.tensors_mut() {
                for v in t {
                    *v *= scale;
                }
            }
            last_lr = cyclical_lr(iteration, &sched);
            sgd_step(
                &mut model.stages[stage_idx],
                &grads,
                &mut velocity,
                last_lr,
                cfg.momentum,
            );
            iteration += 1;
        }

        // Validation in evaluation mode.
        let mut val_total = 0.0;
        let mut correct = 0usize;
        for ctx in &val_ctx {
            let output = stage_eval(&model.stages[stage_idx], model, ctx)?;
            let (bd, _, _) = loss_and_gradients(ctx, &output, cfg.alpha, cfg.beta);
            val_total += bd.total;
            let pred = output
                .emotion_logits
                .iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| {
                    if v > bv {
                        (i, v)
                    } else {
                        (bi, bv)
                    }
                })
                .0;
            if pred == ctx.label_id {
                correct += 1;
            }
        }
        let val_total = val_total / val_ctx.len() as f64;
        let val_accuracy = correct as f64 / val_ctx.len() as f64;

        let n = train_ctx.len() as f64;
        records.push(EpochRecord {
            epoch,
            iteration,
            lr: last_lr,
            train_total: sum_total / n,
            train_landmark: sum_landmark / n,
            train_emotion: sum_emotion / n,
            val_total,
            val_accuracy,
        });

        let improved = best
            .as_ref()
            .is_none_or(|(b, _, _)| *b - val_total >= cfg.min_delta);
        if improved {
            best = Some((val_total, epoch, model.stages[stage_idx].clone()));
            patience_used = 0;
        } else {
            patience_used += 1;
            if patience_used >= cfg.patience {
                stopped_early = true;
                break;
            }
        }
    }

    let (best_val_total, best_epoch, best_params) = best.expect("at least one epoch ran");
    model.stages[stage_idx] = best_params;
    Ok(StageTrainLog {
        stage: stage_idx,
        records,
        best_epoch,
        best_val_total,
        stopped_early,
    })
}

/// Trains all stages sequentially, each until its own early stop, and
/// returns the per-stage logs.
pub fn train_model(
    model: &mut ModelState,
    train: &[TrainSample],
    val: &[TrainSample],
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<StageTrainLog>> {
    (0..model.stages.len())
        .map(|s| train_stage(model, s, train, val, cfg, rng))
        .collect()
}

/// Compares the analytic gradient of the joint loss against central finite
/// differences over `num_params` randomly chosen parameters of one stage,
/// returning the largest relative error.
///
/// The check runs in evaluation mode (no dropout), so the loss is a smooth
/// deterministic function of the parameters almost everywhere. Note that a
/// freshly initialized model has all-zero biases, which parks entire dead
/// activation patches exactly on the ReLU kink where one-sided derivatives
/// differ; give the model non-zero biases (or a few training steps) before
/// checking it.
pub fn numerical_gradient_check(
    model: &ModelState,
    stage_idx: usize,
    sample: &TrainSample,
    cfg: &TrainConfig,
    epsilon: f64,
    num_params: usize,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    if stage_idx >= model.stages.len() {
        return Err(Error::Config(format!(
            "stage index {} out of range for a {}-stage model",
            stage_idx,
            model.stages.len()
        )));
    }
    let ctx = build_contexts(model, stage_idx, std::slice::from_ref(sample), cfg)?
        .pop()
        .expect("one context");

    // Analytic gradients.
    let stage = &model.stages[stage_idx];
    let feature_image = match (&stage.connection, &ctx.prev_features) {
        (Some(conn), Some(feats)) => Some(connection_layer(conn, feats, &model.arch)?),
        _ => None,
    };
    let view = StageInputView {
        warped_image: &ctx.warped,
        heatmap: &ctx.heatmap,
        feature_image: feature_image.as_ref(),
    };
    let (output, trace) = stage.forward_view(view, None)?;
    let (_, d_delta, d_logits) = loss_and_gradients(&ctx, &output, cfg.alpha, cfg.beta);
    let (mut grads, d_combined) = stage_backward(stage, &trace, &d_delta, &d_logits);
    if let (Some(_), Some(feats)) = (&stage.connection, &ctx.prev_features) {
        let g_conn = connection_backward(&d_combined, feats, &model.arch);
        let acc = grads.connection.as_mut().expect("connection grads present");
        acc.weight += &g_conn.weight;
        acc.bias += &g_conn.bias;
    }

    let mut work = stage.clone();
    let total: usize = work.tensors().iter().map(|t| t.len()).sum();
    let picks = rand::seq::index::sample(rng, total, num_params.min(total));

    let loss_of = |stage: &StageParams| -> Result<f64> {
        let feature_image = match (&stage.connection, &ctx.prev_features) {
            (Some(conn), Some(feats)) => Some(connection_layer(conn, feats, &model.arch)?),
            _ => None,
        };
        let view = StageInputView {
            warped_image: &ctx.warped,
            heatmap: &ctx.heatmap,
            feature_image: feature_image.as_ref(),
        };
        let (output, _) = stage.forward_view(view, None)?;
        let (bd, _, _) = loss_and_gradients(&ctx, &output, cfg.alpha, cfg.beta);
        Ok(bd.total)
    };

    let mut max_rel = 0.0f64;
    for flat_idx in picks {
        let (tensor_idx, offset) = locate(&work, flat_idx);
        let analytic = grads.tensors()[tensor_idx][offset];

        let original = work.tensors()[tensor_idx][offset];
        work.tensors_mut()[tensor_idx][offset] = original + epsilon;
        let plus = loss_of(&work)?;
        work.tensors_mut()[tensor_idx][offset] = original - epsilon;
        let minus = loss_of(&work)?;
        work.tensors_mut()[tensor_idx][offset] = original;

        let fd = (plus - minus) / (2.0 * epsilon);
        let denom = analytic.abs().max(fd.abs());
        let rel = if denom < 1e-8 {
            0.0
        } else {
            (analytic - fd).abs() / denom
        };
        if rel > max_rel {
            max_rel = rel;
        }
    }
    Ok(max_rel)
}

fn locate(params: &StageParams, mut flat_idx: usize) -> (usize, usize) {
    for (t, slice) in params.tensors().iter().enumerate() {
        if flat_idx < slice.len() {
            return (t, flat_idx);
        }
        flat_idx -= slice.len();
    }
    unreachable!("flat index beyond parameter count")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::ArchConfig;
    use crate::types::{EmotionDistribution, EmotionScheme, Point};
    use approx::assert_relative_eq;
    use ndarray::Array2;
    use rand::prelude::*;

    fn eyes_apart_shape(offset: f64) -> LandmarkSet {
        let pts = (0..NUM_LANDMARKS)
            .map(|i| {
                if crate::types::LEFT_EYE.contains(&i) {
                    Point::new(offset, 0.0)
                } else if crate::types::RIGHT_EYE.contains(&i) {
                    Point::new(2.0 + offset, 0.0)
                } else {
                    Point::new(1.0 + offset, 3.0)
                }
            })
            .collect();
        LandmarkSet::new(pts, Frame::Image).unwrap()
    }

    fn default_cfg() -> TrainConfig {
        TrainConfig {
            emotion_scheme: EmotionScheme::Three,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn joint_loss_worked_example() {
        // ||S - S*|| = 2 with inter-pupil distance 2, one-hot on the true
        // class with p = 0.5: total = 0.4 * 1 + 0.6 * ln 2.
        let gt = eyes_apart_shape(0.0);
        let mut flat = gt.to_flat();
        flat[9] += 2.0; // single coordinate moved by 2 => norm 2
        let pred = LandmarkSet::from_flat(&flat, Frame::Image).unwrap();
        let probs = EmotionDistribution::new(vec![0.5, 0.25, 0.25]).unwrap();
        let label = EmotionLabel::new(0, EmotionScheme::Three).unwrap();
        let bd = joint_loss(&pred, &gt, &probs, &label, &default_cfg()).unwrap();
        assert_relative_eq!(bd.landmark_term, 1.0, epsilon = 1e-12);
        assert_relative_eq!(bd.emotion_term, std::f64::consts::LN_2, epsilon = 1e-12);
        assert_relative_eq!(
            bd.total,
            0.4 + 0.6 * std::f64::consts::LN_2,
            epsilon = 1e-12
        );
        assert!((bd.total - 0.8159).abs() < 1e-4);
    }

    #[test]
    fn joint_loss_vanishes_on_perfect_prediction() {
        let gt = eyes_apart_shape(0.0);
        let probs = EmotionDistribution::new(vec![1.0, 0.0, 0.0]).unwrap();
        let label = EmotionLabel::new(0, EmotionScheme::Three).unwrap();
        let bd = joint_loss(&gt, &gt, &probs, &label, &default_cfg()).unwrap();
        assert_eq!(bd.landmark_term, 0.0);
        // -ln(max(1, clamp)) == 0
        assert_eq!(bd.total, 0.0);
    }

    #[test]
    fn joint_loss_rejects_scheme_mismatch_and_zero_interpupil() {
        let gt = eyes_apart_shape(0.0);
        let probs = EmotionDistribution::new(vec![0.5, 0.25, 0.25]).unwrap();
        let seven = EmotionLabel::new(0, EmotionScheme::Seven).unwrap();
        assert!(joint_loss(&gt, &gt, &probs, &seven, &default_cfg()).is_err());

        let degenerate =
            LandmarkSet::new(vec![Point::new(5.0, 5.0); NUM_LANDMARKS], Frame::Image).unwrap();
        let label = EmotionLabel::new(0, EmotionScheme::Three).unwrap();
        assert!(joint_loss(&degenerate, &degenerate, &probs, &label, &default_cfg()).is_err());
    }

    #[test]
    fn joint_loss_decomposes_linearly_in_the_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..200 {
            let gt = {
                let pts = (0..NUM_LANDMARKS)
                    .map(|_| Point::new(rng.random_range(0.0..200.0), rng.random_range(0.0..200.0)))
                    .collect();
                LandmarkSet::new(pts, Frame::Image).unwrap()
            };
            let pred = {
                let pts = gt
                    .points()
                    .iter()
                    .map(|p| {
                        Point::new(
                            p.x + rng.random_range(-5.0..5.0),
                            p.y + rng.random_range(-5.0..5.0),
                        )
                    })
                    .collect();
                LandmarkSet::new(pts, Frame::Image).unwrap()
            };
            let raw: Vec<f64> = (0..3).map(|_| rng.random_range(0.01..1.0)).collect();
            let sum: f64 = raw.iter().sum();
            let probs =
                EmotionDistribution::new(raw.into_iter().map(|v| v / sum).collect()).unwrap();
            let label = EmotionLabel::new(rng.random_range(0..3), EmotionScheme::Three).unwrap();

            let mut cfg = default_cfg();
            cfg.alpha = rng.random_range(0.0..2.0);
            cfg.beta = rng.random_range(0.01..2.0);
            let bd = joint_loss(&pred, &gt, &probs, &label, &cfg).unwrap();

            let mut lm_only = cfg.clone();
            lm_only.alpha = 1.0;
            lm_only.beta = 0.0;
            let mut em_only = cfg.clone();
            em_only.alpha = 0.0;
            em_only.beta = 1.0;
            let lm = joint_loss(&pred, &gt, &probs, &label, &lm_only).unwrap();
            let em = joint_loss(&pred, &gt, &probs, &label, &em_only).unwrap();
            let recomposed = cfg.alpha * lm.landmark_term + cfg.beta * em.emotion_term;
            assert!((bd.total - recomposed).abs() < 1e-9);
            assert!(bd.total >= 0.0);
        }
    }

    #[test]
    fn landmark_term_is_similarity_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let cfg = default_cfg();
        for _ in 0..50 {
            let gt = {
                let pts = (0..NUM_LANDMARKS)
                    .map(|_| Point::new(rng.random_range(0.0..100.0), rng.random_range(0.0..100.0)))
                    .collect();
                LandmarkSet::new(pts, Frame::Image).unwrap()
            };
            let pred = {
                let pts = gt
                    .points()
                    .iter()
                    .map(|p| {
                        Point::new(
                            p.x + rng.random_range(-3.0..3.0),
                            p.y + rng.random_range(-3.0..3.0),
                        )
                    })
                    .collect();
                LandmarkSet::new(pts, Frame::Image).unwrap()
            };
            let probs = EmotionDistribution::new(vec![1.0, 0.0, 0.0]).unwrap();
            let label = EmotionLabel::new(0, EmotionScheme::Three).unwrap();
            let t = SimilarityTransform::new(
                rng.random_range(0.2..4.0),
                rng.random_range(-3.0..3.0),
                (rng.random_range(-40.0..40.0), rng.random_range(-40.0..40.0)),
            );
            let a = joint_loss(&pred, &gt, &probs, &label, &cfg).unwrap();
            let b = joint_loss(&t.apply(&pred), &t.apply(&gt), &probs, &label, &cfg).unwrap();
            assert_relative_eq!(a.landmark_term, b.landmark_term, epsilon = 1e-9);
        }
    }

    #[test]
    fn cyclical_lr_hits_the_documented_points() {
        let sched = LrSchedule::new(0.0001, 0.05, 100).unwrap();
        assert_eq!(cyclical_lr(0, &sched), 0.0001);
        assert_eq!(cyclical_lr(100, &sched), 0.05);
        assert_relative_eq!(
            cyclical_lr(50, &sched),
            (0.0001 + 0.05) / 2.0,
            epsilon = 1e-12
        );
        assert_relative_eq!(cyclical_lr(50, &sched), 0.02505, epsilon = 1e-12);
    }

    #[test]
    fn cyclical_lr_is_periodic() {
        let sched = LrSchedule::new(0.001, 0.1, 7).unwrap();
        for i in 0..200 {
            assert_relative_eq!(
                cyclical_lr(i, &sched),
                cyclical_lr(i + 2 * sched.step_size, &sched),
                epsilon = 1e-15
            );
        }
    }

    #[test]
    fn lr_schedule_validates_bounds() {
        assert!(LrSchedule::new(0.1, 0.1, 5).is_err());
        assert!(LrSchedule::new(0.01, 0.1, 0).is_err());
    }

    // -- small end-to-end training helpers ----------------------------------

    fn tiny_model(stages: usize, rng: &mut ChaCha8Rng) -> ModelState {
        let arch = ArchConfig::compact(32, [2, 3, 3, 4], 16);
        let size = arch.input_size as f64;
        let pts = (0..NUM_LANDMARKS)
            .map(|i| {
                let a = i as f64 / NUM_LANDMARKS as f64 * std::f64::consts::TAU;
                Point::new(
                    size / 2.0 + size * 0.3 * a.cos(),
                    size / 2.0 + size * 0.3 * a.sin(),
                )
            })
            .collect();
        let canonical = LandmarkSet::new(pts, Frame::Canonical).unwrap();
        ModelState::new(arch, EmotionScheme::Three, stages, canonical, rng).unwrap()
    }

    /// Moves every bias off the exact ReLU kink that zero initialization
    /// creates in dead activation patches.
    fn randomize_biases(model: &mut ModelState, rng: &mut ChaCha8Rng) {
        for stage in &mut model.stages {
            for conv in &mut stage.convs {
                conv.bias.mapv_inplace(|_| rng.random_range(-0.05..0.05));
            }
            stage
                .fc1
                .bias
                .mapv_inplace(|_| rng.random_range(-0.05..0.05));
        }
    }

    fn tiny_samples(n: usize, rng: &mut ChaCha8Rng) -> Vec<TrainSample> {
        (0..n)
            .map(|i| {
                let image =
                    GrayImage::new(Array2::from_shape_fn((32, 32), |_| rng.random::<f64>()))
                        .unwrap();
                let pts = (0..NUM_LANDMARKS)
                    .map(|k| {
                        let a = k as f64 / NUM_LANDMARKS as f64 * std::f64::consts::TAU;
                        Point::new(
                            16.0 + 9.0 * a.cos() + rng.random_range(-1.0..1.0),
                            16.0 + 9.0 * a.sin() + rng.random_range(-1.0..1.0),
                        )
                    })
                    .collect();
                TrainSample {
                    image,
                    landmarks: LandmarkSet::new(pts, Frame::Image).unwrap(),
                    label: EmotionLabel::new(i % 3, EmotionScheme::Three).unwrap(),
                }
            })
            .collect()
    }

    #[test]
    fn train_stage_rejects_empty_sets() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut model = tiny_model(1, &mut rng);
        let samples = tiny_samples(4, &mut rng);
        let cfg = default_cfg();
        assert!(train_stage(&mut model, 0, &[], &samples, &cfg, &mut rng).is_err());
        assert!(train_stage(&mut model, 0, &samples, &[], &cfg, &mut rng).is_err());
    }

    #[test]
    fn train_stage_leaves_frozen_stages_untouched() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut model = tiny_model(2, &mut rng);
        let samples = tiny_samples(6, &mut rng);
        let checksum = |p: &StageParams| -> f64 { p.tensors().iter().flat_map(|t| t.iter()).sum() };
        let stage0_before = model.stages[0].clone();
        let sum_before = checksum(&stage0_before);

        let mut cfg = default_cfg();
        cfg.epochs = 2;
        cfg.batch_size = 3;
        cfg.base_lr = 0.0001;
        cfg.max_lr = 0.001;
        train_stage(&mut model, 1, &samples, &samples, &cfg, &mut rng).unwrap();

        assert_eq!(model.stages[0], stage0_before);
        assert_eq!(checksum(&model.stages[0]), sum_before);
    }

    #[test]
    fn train_stage_produces_a_log_and_improves_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut model = tiny_model(1, &mut rng);
        let samples = tiny_samples(8, &mut rng);
        let mut cfg = default_cfg();
        cfg.epochs = 15;
        cfg.batch_size = 4;
        cfg.base_lr = 0.0005;
        cfg.max_lr = 0.01;
        cfg.dropout_p = 0.0;
        cfg.patience = 15;
        let log = train_stage(&mut model, 0, &samples, &samples, &cfg, &mut rng).unwrap();
        assert!(!log.records.is_empty());
        let first = log.records.first().unwrap().val_total;
        assert!(
            log.best_val_total < first,
            "no improvement: {first} -> {}",
            log.best_val_total
        );

        // Evaluation of the trained model is deterministic.
        let out1 = model.forward(&samples[0].image).unwrap();
        let out2 = model.forward(&samples[0].image).unwrap();
        assert_eq!(out1[0].0, out2[0].0);
    }

    #[test]
    fn gradient_check_on_tiny_stage() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let mut model = tiny_model(1, &mut rng);
        randomize_biases(&mut model, &mut rng);
        let sample = tiny_samples(1, &mut rng).pop().unwrap();
        let mut cfg = default_cfg();
        cfg.dropout_p = 0.0;
        let err = numerical_gradient_check(&model, 0, &sample, &cfg, 1e-5, 60, &mut rng).unwrap();
        assert!(err < 1e-4, "max relative error {err}");
    }

    #[test]
    fn gradient_check_covers_the_connection_layer() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mut model = tiny_model(2, &mut rng);
        randomize_biases(&mut model, &mut rng);
        let sample = tiny_samples(1, &mut rng).pop().unwrap();
        let mut cfg = default_cfg();
        cfg.dropout_p = 0.0;
        let err = numerical_gradient_check(&model, 1, &sample, &cfg, 1e-5, 60, &mut rng).unwrap();
        assert!(err < 1e-4, "max relative error {err}");
    }

    #[test]
    fn gradient_of_alpha_term_scales_linearly() {
        // Doubling alpha with beta = 0 doubles every landmark-term gradient.
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let model = tiny_model(1, &mut rng);
        let sample = tiny_samples(1, &mut rng).pop().unwrap();
        let cfg = default_cfg();
        let ctx = build_contexts(&model, 0, std::slice::from_ref(&sample), &cfg)
            .unwrap()
            .pop()
            .unwrap();
        let (out, _) = model.stages[0]
            .forward_view(
                StageInputView {
                    warped_image: &ctx.warped,
                    heatmap: &ctx.heatmap,
                    feature_image: None,
                },
                None,
            )
            .unwrap();
        let (_, d1, _) = loss_and_gradients(&ctx, &out, 1.0, 0.0);
        let (_, d2, _) = loss_and_gradients(&ctx, &out, 2.0, 0.0);
        for (a, b) in d1.iter().zip(d2.iter()) {
            assert_relative_eq!(2.0 * a, *b, epsilon = 1e-12);
        }
    }
}
