use super::{
    check_finite, concat_rows, gather_rows, infer_visual, should_eval, should_log, Batcher, EvalMetrics, LossTerms,
    MetricsLog, Result, TrainConfig, TrainError, Trained,
};
use crate::data::{ImageSet, Split, TripletSet};
use crate::losses::{classification_accuracy, cross_entropy, rkd_loss, triplet_accuracy, triplet_loss, RkdWeights, TripletBatch};
use crate::models::{teacher_distill_target, Role, VisualNet};
use crate::tensor::{Optimizer, Session, Tensor, Var};

const EVAL_CHUNK: usize = 256;

/// Training and validation pools of the visual procedures.
#[derive(Clone, Debug)]
pub struct VisualData {
    pub train_triplets: TripletSet,
    pub train_images: ImageSet,
    pub unlabeled: Tensor,
    pub val_triplets: TripletSet,
    pub val_images: ImageSet,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StudentOptions {
    /// Add the relational distillation term.
    pub distill: bool,
    /// Distil on an extra unlabeled batch as well.
    pub unlabeled: bool,
}

impl Default for StudentOptions {
    fn default() -> Self {
        Self { distill: true, unlabeled: true }
    }
}

/// Per-image 80-dim targets from two frozen teachers, aligned with the
/// training pools. Teachers run in eval mode, so each image's target does
/// not depend on its batch.
#[derive(Clone, Debug)]
pub struct DistillTargets {
    pub triplets: [Tensor; 3],
    pub images: Tensor,
    pub unlabeled: Tensor,
}

fn targets_for(t1: &VisualNet, t2: &VisualNet, images: &Tensor) -> Result<Tensor> {
    let (_, f1, a1) = infer_visual(t1, images, EVAL_CHUNK)?;
    let (_, f2, a2) = infer_visual(t2, images, EVAL_CHUNK)?;
    Ok(teacher_distill_target(&f1, &a1, &f2, &a2)?)
}

pub fn distill_targets(t1: &VisualNet, t2: &VisualNet, data: &VisualData) -> Result<DistillTargets> {
    for t in [t1, t2] {
        if t.config.role != Role::Teacher {
            return Err(TrainError::Config("distillation targets need two teacher networks".into()));
        }
    }
    let tr = &data.train_triplets.images;
    Ok(DistillTargets {
        triplets: [targets_for(t1, t2, &tr[0])?, targets_for(t1, t2, &tr[1])?, targets_for(t1, t2, &tr[2])?],
        images: targets_for(t1, t2, &data.train_images.images)?,
        unlabeled: targets_for(t1, t2, &data.unlabeled)?,
    })
}

/// Held-out triplet accuracy on `triplets` and classification accuracy on
/// `images`, in eval mode.
pub fn evaluate_visual(net: &VisualNet, triplets: &TripletSet, images: &ImageSet, split: Split) -> Result<EvalMetrics> {
    let fec: Vec<Tensor> = triplets
        .images
        .iter()
        .map(|t| infer_visual(net, t, EVAL_CHUNK).map(|(_, f, _)| f))
        .collect::<Result<_>>()?;
    let (_, _, logits) = infer_visual(net, &images.images, EVAL_CHUNK)?;
    Ok(EvalMetrics {
        split: Some(split),
        triplet_acc: Some(triplet_accuracy([&fec[0], &fec[1], &fec[2]], &triplets.labels)?),
        class_acc: Some(classification_accuracy(&logits, &images.labels, false)?),
        class_acc_balanced: Some(classification_accuracy(&logits, &images.labels, true)?),
        ..Default::default()
    })
}

struct Samplers {
    triplets: Batcher,
    images: Batcher,
    unlabeled: Batcher,
}

impl Samplers {
    /// One independent stream per source, so enabling or disabling a source
    /// never changes what the others draw.
    fn new(data: &VisualData, seed: u64) -> Result<Self> {
        Ok(Self {
            triplets: Batcher::new(data.train_triplets.len(), seed.wrapping_mul(3))?,
            images: Batcher::new(data.train_images.len(), seed.wrapping_mul(3).wrapping_add(1))?,
            unlabeled: Batcher::new(data.unlabeled.shape()[0], seed.wrapping_mul(3).wrapping_add(2))?,
        })
    }
}

/// Scalar loss terms of one step, each weighted.
struct StepLoss {
    total: Var,
    fec: Var,
    aff: Var,
    distill: Option<Var>,
}

fn visual_step(
    net: &VisualNet,
    s: &mut Session<'_>,
    cfg: &TrainConfig,
    data: &VisualData,
    samplers: &mut Samplers,
    student: Option<(&DistillTargets, StudentOptions)>,
) -> Result<StepLoss> {
    let (bt, bc) = (cfg.batch_triplets, cfg.batch_images);
    let tb = samplers.triplets.next_batch(bt);
    let cb = samplers.images.next_batch(bc);
    let trip = &data.train_triplets;
    let slots: Vec<Tensor> = trip.images.iter().map(|t| gather_rows(t, &tb)).collect();
    let images = concat_rows(&[&slots[0], &slots[1], &slots[2], &gather_rows(&data.train_images.images, &cb)]);
    let x = s.input(images);
    let out = net.forward(s, x)?;

    let mut emb = [out.fec; 3];
    for (k, e) in emb.iter_mut().enumerate() {
        *e = s.tape.narrow(out.fec, 0, k * bt, bt)?;
    }
    let labels = tb.iter().map(|&i| trip.labels[i]).collect();
    let fec = triplet_loss(&mut s.tape, &TripletBatch { images: emb, labels }, cfg.margin)?;
    let logits = s.tape.narrow(out.aff, 0, 3 * bt, bc)?;
    let cls: Vec<usize> = cb.iter().map(|&i| data.train_images.labels[i]).collect();
    let ce = cross_entropy(&mut s.tape, logits, &cls)?;
    let aff = s.tape.scale(ce, cfg.alpha);
    let mut total = s.tape.add(fec, aff)?;

    let mut distill = None;
    if let Some((targets, opts)) = student.filter(|(_, o)| o.distill) {
        let head = out.distill.ok_or_else(|| TrainError::Config("distillation needs a student network".into()))?;
        let w = RkdWeights::default();
        let trip_t: Vec<Tensor> = targets.triplets.iter().map(|t| gather_rows(t, &tb)).collect();
        let trip_t = concat_rows(&[&trip_t[0], &trip_t[1], &trip_t[2]]);
        let d_trip = s.tape.narrow(head, 0, 0, 3 * bt)?;
        let d_cls = s.tape.narrow(head, 0, 3 * bt, bc)?;
        let mut terms = vec![
            rkd_loss(&mut s.tape, d_trip, &trip_t, w)?,
            rkd_loss(&mut s.tape, d_cls, &gather_rows(&targets.images, &cb), w)?,
        ];
        if opts.unlabeled {
            // separate forward so the supervised batch statistics are
            // unaffected by the unlabeled pool
            let ub = samplers.unlabeled.next_batch(cfg.batch_unlabeled);
            let xu = s.input(gather_rows(&data.unlabeled, &ub));
            let ou = net.forward(s, xu)?;
            let du = ou.distill.expect("student has a distill head");
            terms.push(rkd_loss(&mut s.tape, du, &gather_rows(&targets.unlabeled, &ub), w)?);
        }
        let n = terms.len() as f32;
        let mut sum = terms[0];
        for &t in &terms[1..] {
            sum = s.tape.add(sum, t)?;
        }
        let d = s.tape.scale(sum, cfg.distill_weight / n);
        total = s.tape.add(total, d)?;
        distill = Some(d);
    }
    Ok(StepLoss { total, fec, aff, distill })
}

fn train_visual(
    mut net: VisualNet,
    cfg: &TrainConfig,
    data: &VisualData,
    log: &mut MetricsLog,
    run: &str,
    student: Option<(&DistillTargets, StudentOptions)>,
) -> Result<(VisualNet, Trained)> {
    let mut min = vec![("batch_triplets", cfg.batch_triplets, 2), ("batch_images", cfg.batch_images, 2)];
    if student.is_some_and(|(_, o)| o.distill) {
        min = vec![("batch_triplets", cfg.batch_triplets, 1), ("batch_images", cfg.batch_images, 3)];
        if student.is_some_and(|(_, o)| o.unlabeled) {
            min.push(("batch_unlabeled", cfg.batch_unlabeled, 3));
        }
    }
    cfg.validate(&min)?;
    let mut samplers = Samplers::new(data, cfg.seed)?;
    let mut opt = Optimizer::new(cfg.optimizer);
    let mut best: Option<Trained> = None;
    let mut last_loss = 0.0;
    for step in 1..=cfg.steps {
        let mut s = Session::training(&net.store);
        let loss = visual_step(&net, &mut s, cfg, data, &mut samplers, student)?;
        let total = s.tape.item(loss.total);
        check_finite(total, run, step)?;
        let terms = LossTerms {
            total,
            fec: Some(s.tape.item(loss.fec)),
            aff: Some(s.tape.item(loss.aff)),
            distill: loss.distill.map(|d| s.tape.item(d)),
            ccc: None,
        };
        let grads = s.backward(loss.total)?;
        let stats = s.take_stat_updates();
        drop(s);
        opt.step(&mut net.store, &grads)?;
        net.store.apply_stats(stats);
        last_loss = total;

        let eval = if should_eval(step, cfg.eval_every, cfg.steps) {
            Some(evaluate_visual(&net, &data.val_triplets, &data.val_images, Split::Val)?)
        } else {
            None
        };
        if let Some(e) = &eval {
            let score = e.selection_score();
            if best.as_ref().is_none_or(|b| score > b.best_score) {
                best = Some(Trained { store: net.store.clone(), best_step: step, best_score: score, last_step_loss: total });
            }
        }
        let logged = should_log(step, cfg.log_every, cfg.steps).then_some(terms);
        if logged.is_some() || eval.is_some() {
            log.push(run, step, logged, eval)?;
        }
    }
    let mut best = best.expect("the final step is always evaluated");
    best.last_step_loss = last_loss;
    net.store = best.store.clone();
    Ok((net, best))
}

/// Train one teacher: triplet loss on the odd-one-out batch plus `α`-weighted
/// cross-entropy on the classification batch, one shared forward pass.
/// Returns the network restored to its best validation point.
pub fn train_teacher(
    net: VisualNet,
    cfg: &TrainConfig,
    data: &VisualData,
    log: &mut MetricsLog,
    run: &str,
) -> Result<(VisualNet, Trained)> {
    if net.config.role != Role::Teacher {
        return Err(TrainError::Config("train_teacher needs a teacher-role network".into()));
    }
    train_visual(net, cfg, data, log, run, None)
}

/// Train the student: the teacher objective plus, unless disabled, the
/// relational distillation term against precomputed teacher targets.
pub fn train_student(
    net: VisualNet,
    cfg: &TrainConfig,
    data: &VisualData,
    targets: &DistillTargets,
    opts: StudentOptions,
    log: &mut MetricsLog,
    run: &str,
) -> Result<(VisualNet, Trained)> {
    if net.config.role != Role::Student {
        return Err(TrainError::Config("train_student needs a student-role network".into()));
    }
    train_visual(net, cfg, data, log, run, Some((targets, opts)))
}
