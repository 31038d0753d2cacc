//! Losses, the two-phase alternating optimization loop, the learning-rate
//! schedule, and backtranslation with embedding mixup.

use std::path::Path;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::audio::MuLawStream;
use crate::dataset::{segment, Corpus, PreparedClip, Segment};
use crate::error::{Error, Result};
use crate::model::{
    build_condition, build_condition_on_tape, checkpoint_save, classify_singer_on_tape,
    decode_teacher_forced_on_tape, encode, encode_on_tape, generate, mix_embeddings,
    regress_pitch_on_tape, BoundParams, ModelBundle, ParamGroup, Sampling,
};
use crate::nn::{adam_step, AdamConfig, Moments, Tape, Tensor, Var};
use crate::pitch::{downsample_to_latent, upsample_linear, PitchConfig};

#[derive(Clone, Copy, Debug, serde::Serialize, serde::Deserialize, PartialEq)]
#[serde(default)]
pub struct LossWeights {
    pub lambda: f64,
    pub mu: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda: 0.01,
            mu: 0.1,
        }
    }
}

/// Combined objective for the autoencoder phase.
pub fn total_loss(recon: f64, s_loss: f64, p_loss: f64, w: &LossWeights) -> f64 {
    recon - w.lambda * s_loss - w.mu * p_loss
}

/// Objective for the adversary phase; `total + adversary = recon` identically.
pub fn adversary_loss(s_loss: f64, p_loss: f64, w: &LossWeights) -> f64 {
    w.lambda * s_loss + w.mu * p_loss
}

/// Mean softmax cross-entropy of `[n_classes, T]` logits against mu-law
/// target codes, computed by a direct scalar loop.
pub fn recon_loss(logits: &Tensor, targets: &MuLawStream) -> Result<f64> {
    if logits.cols != targets.codes.len() {
        return Err(Error::Argument(format!(
            "{} logit columns vs {} target codes",
            logits.cols,
            targets.codes.len()
        )));
    }
    let mut acc = 0.0;
    for (t, &code) in targets.codes.iter().enumerate() {
        let mut max = f64::NEG_INFINITY;
        for c in 0..logits.rows {
            max = max.max(logits.get(c, t));
        }
        let mut z = 0.0;
        for c in 0..logits.rows {
            z += (logits.get(c, t) - max).exp();
        }
        acc += z.ln() + max - logits.get(code as usize, t);
    }
    Ok(acc / targets.codes.len() as f64)
}

/// Softmax cross-entropy of singer logits against the true id.
pub fn singer_conf_loss(class_logits: &[f64], singer: usize) -> Result<f64> {
    if singer >= class_logits.len() {
        return Err(Error::Argument(format!(
            "singer id {} out of range for {} logits",
            singer,
            class_logits.len()
        )));
    }
    let max = class_logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = class_logits.iter().map(|&l| (l - max).exp()).sum();
    Ok(z.ln() + max - class_logits[singer])
}

/// Mean squared error between prediction and target sequences.
pub fn pitch_reg_loss(pred: &[f64], target: &[f64]) -> Result<f64> {
    if pred.len() != target.len() {
        return Err(Error::Argument(format!(
            "{} predictions vs {} targets",
            pred.len(),
            target.len()
        )));
    }
    let m = pred.len() as f64;
    Ok(pred
        .iter()
        .zip(target)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / m)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossRecord {
    pub step: u64,
    pub lr: f64,
    pub recon: f64,
    pub singer: f64,
    pub pitch: f64,
}

impl LossRecord {
    pub fn total(&self, w: &LossWeights) -> f64 {
        total_loss(self.recon, self.singer, self.pitch, w)
    }

    pub fn adversary(&self, w: &LossWeights) -> f64 {
        adversary_loss(self.singer, self.pitch, w)
    }
}

/// Optimizer state and step bookkeeping for one training run.
pub struct TrainState {
    pub step: u64,
    pub base_lr: f64,
    pub decay: f64,
    pub decay_every: u64,
    pub rng_seed: u64,
    pub adam: AdamConfig,
    pub moments: Vec<Moments>,
    pub loss_log: Vec<LossRecord>,
}

impl TrainState {
    pub fn new(bundle: &ModelBundle, seed: u64, base_lr: f64, decay: f64) -> Self {
        TrainState {
            step: 0,
            base_lr,
            decay,
            decay_every: 1000,
            rng_seed: seed,
            adam: AdamConfig::default(),
            moments: bundle
                .set
                .ids()
                .map(|id| Moments::new(bundle.set.tensor(id).len()))
                .collect(),
            loss_log: Vec::new(),
        }
    }
}

/// Stepped exponential decay: base_lr × decay^floor(step / decay_every).
pub fn lr_at(state: &TrainState) -> f64 {
    state.base_lr * state.decay.powi((state.step / state.decay_every) as i32)
}

/// Which scalar objective to build on the tape.
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum LossKind {
    Recon,
    Singer,
    Pitch,
    Total,
    Adversary,
}

struct SegmentForward {
    recon: Option<Var>,
    singer: Var,
    pitch: Var,
}

/// Forward pass for one segment: encoder, both adversary heads, and (when
/// the reconstruction term is needed) the teacher-forced decoder.
fn forward_segment(
    bundle: &ModelBundle,
    bp: &mut BoundParams,
    tape: &mut Tape,
    seg: &Segment,
    need_decoder: bool,
    dropout_rng: Option<&mut dyn RngCore>,
) -> Result<SegmentForward> {
    if seg.singer_id >= bundle.config.n_singers {
        return Err(Error::Argument(format!(
            "segment labeled singer {} but model has {}",
            seg.singer_id, bundle.config.n_singers
        )));
    }
    let latent = encode_on_tape(bundle, bp, tape, &seg.samples)?;

    let (cls_rng, reg_rng) = match dropout_rng {
        Some(rng) => {
            let a = ChaCha8Rng::seed_from_u64(rng.next_u64());
            let b = ChaCha8Rng::seed_from_u64(rng.next_u64());
            (Some(a), Some(b))
        }
        None => (None, None),
    };
    let mut cls_rng = cls_rng;
    let mut reg_rng = reg_rng;
    let class_logits = classify_singer_on_tape(
        bundle,
        bp,
        tape,
        latent,
        cls_rng.as_mut().map(|r| r as &mut dyn RngCore),
    );
    let singer = tape.softmax_cross_entropy(class_logits, &[seg.singer_id]);

    let preds = regress_pitch_on_tape(
        bundle,
        bp,
        tape,
        latent,
        reg_rng.as_mut().map(|r| r as &mut dyn RngCore),
    );
    let targets = downsample_to_latent(&seg.pitch, bundle.config.latent_stride)?;
    if targets.len() != tape.value(preds).cols {
        return Err(Error::Internal(format!(
            "{} pitch targets vs {} latent frames",
            targets.len(),
            tape.value(preds).cols
        )));
    }
    let pitch = tape.mse(preds, Tensor::row(targets));

    let recon = if need_decoder {
        let audio_len = seg.samples.len();
        let pitch_up = upsample_linear(&seg.pitch, audio_len)?;
        let embeddings = bundle.embeddings_id();
        let emb_leaf = bp.var(&bundle.set, tape, embeddings);
        let emb = tape.select_row(emb_leaf, seg.singer_id);
        let cond = build_condition_on_tape(
            tape,
            latent,
            &pitch_up,
            emb,
            bundle.config.latent_stride,
            audio_len,
        )?;
        let logits = decode_teacher_forced_on_tape(bundle, bp, tape, &seg.codes, cond)?;
        let codes: Vec<usize> = seg.codes.codes.iter().map(|&c| c as usize).collect();
        Some(tape.softmax_cross_entropy(logits, &codes))
    } else {
        None
    };

    Ok(SegmentForward {
        recon,
        singer,
        pitch,
    })
}

/// Eval-mode loss values for one segment.
pub fn losses_for_segment(
    bundle: &ModelBundle,
    seg: &Segment,
) -> Result<(f64, f64, f64)> {
    let mut tape = Tape::new();
    let mut bp = BoundParams::new(&bundle.set);
    let fwd = forward_segment(bundle, &mut bp, &mut tape, seg, true, None)?;
    Ok((
        tape.value(fwd.recon.unwrap()).item(),
        tape.value(fwd.singer).item(),
        tape.value(fwd.pitch).item(),
    ))
}

fn objective_var(
    tape: &mut Tape,
    fwd: &SegmentForward,
    w: &LossWeights,
    kind: LossKind,
) -> Var {
    match kind {
        LossKind::Recon => fwd.recon.expect("recon requested without decoder"),
        LossKind::Singer => fwd.singer,
        LossKind::Pitch => fwd.pitch,
        LossKind::Total => {
            let r = fwd.recon.expect("total loss needs the decoder");
            tape.affine_sum(&[(1.0, r), (-w.lambda, fwd.singer), (-w.mu, fwd.pitch)])
        }
        LossKind::Adversary => {
            tape.affine_sum(&[(w.lambda, fwd.singer), (w.mu, fwd.pitch)])
        }
    }
}

/// Scalar objective value in eval mode (forward only).
pub fn loss_scalar(
    bundle: &ModelBundle,
    seg: &Segment,
    w: &LossWeights,
    kind: LossKind,
) -> Result<f64> {
    let need_decoder = matches!(kind, LossKind::Recon | LossKind::Total);
    let mut tape = Tape::new();
    let mut bp = BoundParams::new(&bundle.set);
    let fwd = forward_segment(bundle, &mut bp, &mut tape, seg, need_decoder, None)?;
    let obj = objective_var(&mut tape, &fwd, w, kind);
    Ok(tape.value(obj).item())
}

/// Analytic gradients of one objective, indexed by param id position;
/// `None` for parameters the objective does not reach.
pub fn loss_gradients(
    bundle: &ModelBundle,
    seg: &Segment,
    w: &LossWeights,
    kind: LossKind,
) -> Result<Vec<Option<Tensor>>> {
    let need_decoder = matches!(kind, LossKind::Recon | LossKind::Total);
    let mut tape = Tape::new();
    let mut bp = BoundParams::new(&bundle.set);
    let fwd = forward_segment(bundle, &mut bp, &mut tape, seg, need_decoder, None)?;
    let obj = objective_var(&mut tape, &fwd, w, kind);
    let grads = tape.backward(obj);
    Ok(bundle
        .set
        .ids()
        .map(|id| bp.bound(id).and_then(|v| grads.get(v).cloned()))
        .collect())
}

/// Max relative error between analytic and central-difference gradients on
/// `n_checks` randomly selected parameter entries.
pub fn max_grad_rel_err(
    bundle: &mut ModelBundle,
    seg: &Segment,
    w: &LossWeights,
    kind: LossKind,
    n_checks: usize,
    seed: u64,
) -> Result<f64> {
    let analytic = loss_gradients(bundle, seg, w, kind)?;
    // entries of parameters the objective actually reaches
    let mut candidates = Vec::new();
    for (pos, id) in bundle.set.ids().enumerate() {
        if analytic[pos].is_some() {
            for i in 0..bundle.set.tensor(id).len() {
                candidates.push((pos, id, i));
            }
        }
    }
    if candidates.is_empty() {
        return Err(Error::Internal("objective reaches no parameters".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..n_checks {
        let &(pos, id, i) = &candidates[rng.gen_range(0..candidates.len())];
        let orig = bundle.set.tensor(id).data[i];
        let a = analytic[pos].as_ref().unwrap().data[i];
        // truncation shrinks with eps, roundoff grows; take the step size
        // that agrees better
        let mut rel = f64::INFINITY;
        for eps in [1e-5, 1e-4] {
            bundle.set.tensor_mut(id).data[i] = orig + eps;
            let hi = loss_scalar(bundle, seg, w, kind)?;
            bundle.set.tensor_mut(id).data[i] = orig - eps;
            let lo = loss_scalar(bundle, seg, w, kind)?;
            bundle.set.tensor_mut(id).data[i] = orig;
            let numeric = (hi - lo) / (2.0 * eps);
            rel = rel.min((a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6));
        }
        worst = worst.max(rel);
    }
    Ok(worst)
}

/// Per-step loss summary (phase-2 values, averaged over the batch).
#[derive(Clone, Copy, Debug)]
pub struct StepLosses {
    pub recon: f64,
    pub singer: f64,
    pub pitch: f64,
}

fn batch_valid(batch: &[Segment], bundle: &ModelBundle) -> Result<()> {
    if batch.is_empty() {
        return Err(Error::Argument("empty batch".into()));
    }
    let len = batch[0].samples.len();
    for seg in batch {
        if seg.samples.len() != len {
            return Err(Error::Argument("batch segments differ in length".into()));
        }
        if seg.singer_id >= bundle.config.n_singers {
            return Err(Error::Argument(format!(
                "singer id {} out of range",
                seg.singer_id
            )));
        }
    }
    Ok(())
}

/// Per-segment gradient/loss bundle produced in parallel, reduced in
/// deterministic index order.
struct SegGrads {
    losses: (f64, f64, f64), // recon (or 0), singer, pitch
    grads: Vec<Option<Tensor>>,
}

fn batch_phase(
    bundle: &ModelBundle,
    batch: &[Segment],
    w: &LossWeights,
    kind: LossKind,
    group: ParamGroup,
    dropout_base: u64,
) -> Result<(StepLosses, Vec<Option<Tensor>>)> {
    let need_decoder = matches!(kind, LossKind::Recon | LossKind::Total);
    let per_seg: Vec<Result<SegGrads>> = batch
        .par_iter()
        .enumerate()
        .map(|(i, seg)| {
            let mut tape = Tape::new();
            let mut bp = BoundParams::new(&bundle.set);
            let mut rng = ChaCha8Rng::seed_from_u64(dropout_base.wrapping_add(i as u64));
            let fwd = forward_segment(
                bundle,
                &mut bp,
                &mut tape,
                seg,
                need_decoder,
                Some(&mut rng),
            )?;
            let obj = objective_var(&mut tape, &fwd, w, kind);
            let grads = tape.backward(obj);
            let collected: Vec<Option<Tensor>> = bundle
                .set
                .ids()
                .map(|id| {
                    if bundle.set.group(id) != group {
                        return None;
                    }
                    bp.bound(id).and_then(|v| grads.get(v).cloned())
                })
                .collect();
            Ok(SegGrads {
                losses: (
                    fwd.recon.map(|r| tape.value(r).item()).unwrap_or(0.0),
                    tape.value(fwd.singer).item(),
                    tape.value(fwd.pitch).item(),
                ),
                grads: collected,
            })
        })
        .collect();

    let n = batch.len() as f64;
    let mut acc: Vec<Option<Tensor>> = vec![None; bundle.set.len()];
    let mut losses = StepLosses {
        recon: 0.0,
        singer: 0.0,
        pitch: 0.0,
    };
    for sg in per_seg {
        let sg = sg?;
        let (r, s, p) = sg.losses;
        if !r.is_finite() || !s.is_finite() || !p.is_finite() {
            return Err(Error::Numerical(format!(
                "non-finite loss in batch: recon={} singer={} pitch={}",
                r, s, p
            )));
        }
        losses.recon += r / n;
        losses.singer += s / n;
        losses.pitch += p / n;
        for (slot, g) in acc.iter_mut().zip(sg.grads) {
            if let Some(g) = g {
                match slot {
                    Some(a) => {
                        for (x, y) in a.data.iter_mut().zip(&g.data) {
                            *x += y;
                        }
                    }
                    None => *slot = Some(g),
                }
            }
        }
    }
    for slot in acc.iter_mut().flatten() {
        for v in &mut slot.data {
            *v /= n;
        }
    }
    Ok((losses, acc))
}

fn apply_grads(
    bundle: &mut ModelBundle,
    state: &mut TrainState,
    grads: &[Option<Tensor>],
    lr: f64,
) {
    let adam = state.adam;
    for (pos, id) in bundle.set.ids().enumerate().collect::<Vec<_>>() {
        if let Some(g) = &grads[pos] {
            adam_step(
                bundle.set.tensor_mut(id),
                g,
                &mut state.moments[pos],
                lr,
                &adam,
            );
        }
    }
}

/// One alternation cycle: phase 1 steps the adversaries on L_ad, phase 2
/// steps encoder/decoder/embeddings on L_total. A non-finite loss in
/// either phase aborts with no net parameter mutation.
pub fn alternating_step(
    bundle: &mut ModelBundle,
    state: &mut TrainState,
    batch: &[Segment],
    w: &LossWeights,
    adversarial: bool,
) -> Result<StepLosses> {
    batch_valid(batch, bundle)?;
    let lr = lr_at(state);
    let seed_base = state
        .rng_seed
        .wrapping_mul(0x9e3779b97f4a7c15)
        .wrapping_add(state.step);

    let mut rollback: Option<Vec<(usize, Tensor, Moments)>> = None;
    if adversarial {
        let (_, adv_grads) = batch_phase(
            bundle,
            batch,
            w,
            LossKind::Adversary,
            ParamGroup::Adversary,
            seed_base,
        )?;
        // snapshot adversary params so a phase-2 failure mutates nothing net
        let snap: Vec<(usize, Tensor, Moments)> = bundle
            .set
            .ids()
            .enumerate()
            .filter(|(_, id)| bundle.set.group(*id) == ParamGroup::Adversary)
            .map(|(pos, id)| (pos, bundle.set.tensor(id).clone(), state.moments[pos].clone()))
            .collect();
        apply_grads(bundle, state, &adv_grads, lr);
        rollback = Some(snap);
    }

    let kind = if adversarial {
        LossKind::Total
    } else {
        LossKind::Recon
    };
    let phase2 = batch_phase(
        bundle,
        batch,
        w,
        kind,
        ParamGroup::Autoencoder,
        seed_base.wrapping_add(usize::MAX as u64 / 2),
    );
    let (losses, ae_grads) = match phase2 {
        Ok(v) => v,
        Err(e) => {
            if let Some(snap) = rollback {
                let ids: Vec<_> = bundle.set.ids().collect();
                for (pos, tensor, moments) in snap {
                    *bundle.set.tensor_mut(ids[pos]) = tensor;
                    state.moments[pos] = moments;
                }
            }
            return Err(e);
        }
    };
    apply_grads(bundle, state, &ae_grads, lr);

    state.loss_log.push(LossRecord {
        step: state.step,
        lr,
        recon: losses.recon,
        singer: losses.singer,
        pitch: losses.pitch,
    });
    state.step += 1;
    Ok(losses)
}

/// Backtranslation with embedding mixup: convert segments using a random
/// blend of two singers' embeddings, then train `inner_steps` batches on
/// reconstructing the original audio conditioned on the true singer, with
/// the reconstruction loss only. Adversary parameters are untouched, and
/// the main step counter does not advance.
pub fn backtranslate_round(
    bundle: &mut ModelBundle,
    state: &mut TrainState,
    pool: &[Segment],
    count: usize,
    inner_steps: usize,
    batch_size: usize,
) -> Result<()> {
    let n_singers = bundle.config.n_singers;
    if n_singers < 2 {
        return Err(Error::Argument(
            "backtranslation needs at least 2 singers".into(),
        ));
    }
    if pool.is_empty() {
        return Err(Error::Argument("empty segment pool".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(
        state
            .rng_seed
            .wrapping_mul(0x2545f4914f6cdd1d)
            .wrapping_add(state.step),
    );
    // (segment index, other singer, mix weight) tuples, drawn up front so
    // generation can run in parallel deterministically
    let draws: Vec<(usize, usize, f64)> = (0..count)
        .map(|_| {
            let si = rng.gen_range(0..pool.len());
            let a = pool[si].singer_id;
            let mut b = rng.gen_range(0..n_singers - 1);
            if b >= a {
                b += 1;
            }
            (si, b, rng.gen::<f64>())
        })
        .collect();

    let generated: Vec<Result<Segment>> = draws
        .par_iter()
        .map(|&(si, other, weight)| {
            let seg = &pool[si];
            let v_a = bundle.lookup_embedding(seg.singer_id)?;
            let v_b = bundle.lookup_embedding(other)?;
            let mixed = mix_embeddings(&v_a, &v_b, weight);
            let latent = encode(bundle, &seg.samples)?;
            let cond = build_condition(&latent, &seg.pitch, &mixed, seg.samples.len())?;
            let stream = generate(bundle, &cond, 0, Sampling::Argmax)?;
            let companded: Vec<f64> = stream
                .codes
                .iter()
                .map(|&c| crate::audio::mulaw_decode_sample(c, crate::audio::MU))
                .collect();
            // train to reconstruct the ORIGINAL codes of singer A from the
            // converted audio, with A's own embedding and pitch
            Ok(Segment {
                samples: companded,
                codes: seg.codes.clone(),
                pitch: seg.pitch.clone(),
                singer_id: seg.singer_id,
                clip_index: seg.clip_index,
                start: seg.start,
            })
        })
        .collect();
    let generated: Vec<Segment> = generated.into_iter().collect::<Result<_>>()?;

    let lr = lr_at(state);
    for step in 0..inner_steps {
        let batch: Vec<Segment> = (0..batch_size)
            .map(|_| generated[rng.gen_range(0..generated.len())].clone())
            .collect();
        let (_, grads) = batch_phase(
            bundle,
            &batch,
            &LossWeights::default(),
            LossKind::Recon,
            ParamGroup::Autoencoder,
            state.rng_seed.wrapping_add(step as u64),
        )?;
        apply_grads(bundle, state, &grads, lr);
    }
    Ok(())
}

/// End-to-end schedule knobs for a training run.
#[derive(Clone, Debug, serde::Serialize, serde::Deserialize, PartialEq)]
#[serde(default)]
pub struct TrainSchedule {
    pub steps: u64,
    /// First step number; nonzero when resuming from a checkpoint.
    pub start_step: u64,
    pub batch_size: usize,
    pub segment_len: usize,
    pub segment_hop: usize,
    pub seed: u64,
    pub base_lr: f64,
    pub lr_decay: f64,
    pub adversarial: bool,
    pub augment: bool,
    /// Fraction of `steps` before backtranslation starts.
    pub warmup_fraction: f64,
    pub backtranslate_every: u64,
    pub backtranslate_count: usize,
    pub backtranslate_inner_steps: usize,
    pub checkpoint_interval: u64,
    /// Steps between stderr progress lines; 0 silences them.
    pub log_every: u64,
}

impl Default for TrainSchedule {
    fn default() -> Self {
        TrainSchedule {
            steps: 30_000,
            start_step: 0,
            batch_size: 4,
            segment_len: 4096,
            segment_hop: 2048,
            seed: 0,
            base_lr: 1e-3,
            lr_decay: 0.98,
            adversarial: true,
            augment: true,
            warmup_fraction: 2.0 / 3.0,
            backtranslate_every: 2000,
            backtranslate_count: 96,
            backtranslate_inner_steps: 24,
            checkpoint_interval: 5000,
            log_every: 0,
        }
    }
}

impl TrainSchedule {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.batch_size == 0 || self.segment_len == 0 {
            return Err(Error::Argument(
                "steps, batch_size, and segment_len must be positive".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.warmup_fraction) {
            return Err(Error::Argument("warmup_fraction must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

/// Metrics CSV with one row per logged step.
pub fn metrics_csv(log: &[LossRecord], w: &LossWeights) -> String {
    let mut out = String::from("step,lr,recon,singer,pitch,total,adversary\n");
    for r in log {
        out.push_str(&format!(
            "{},{:.8e},{:.8e},{:.8e},{:.8e},{:.8e},{:.8e}\n",
            r.step,
            r.lr,
            r.recon,
            r.singer,
            r.pitch,
            r.total(w),
            r.adversary(w)
        ));
    }
    out
}

/// Full training run over a prepared corpus. Checkpoints and the metrics
/// CSV are written under `run_dir` when provided; on a numerical abort the
/// last checkpoint on disk is retained.
pub fn train(
    bundle: &mut ModelBundle,
    prepared: &[PreparedClip],
    sched: &TrainSchedule,
    w: &LossWeights,
    run_dir: Option<&Path>,
) -> Result<TrainState> {
    sched.validate()?;
    if prepared.is_empty() {
        return Err(Error::Argument("empty corpus".into()));
    }
    if sched.start_step >= sched.steps {
        return Err(Error::Argument(format!(
            "start_step {} is not below steps {}",
            sched.start_step, sched.steps
        )));
    }
    let mut state = TrainState::new(bundle, sched.seed, sched.base_lr, sched.lr_decay);
    state.step = sched.start_step;
    let warmup = (sched.steps as f64 * sched.warmup_fraction) as u64;

    let mut epoch: u64 = 0;
    let (mut segs, skipped) = segment(prepared, sched.segment_len, sched.segment_hop, sched.seed)?;
    if segs.is_empty() {
        return Err(Error::Argument(format!(
            "no segments: every clip shorter than {} samples ({} skipped)",
            sched.segment_len, skipped
        )));
    }
    let mut cursor = 0usize;

    let backtranslation_on =
        sched.backtranslate_every > 0 && sched.backtranslate_count > 0 && bundle.config.n_singers >= 2;

    while state.step < sched.steps {
        if cursor + sched.batch_size > segs.len() {
            epoch += 1;
            let (s, _) = segment(
                prepared,
                sched.segment_len,
                sched.segment_hop,
                sched.seed.wrapping_add(epoch),
            )?;
            segs = s;
            cursor = 0;
        }
        let batch = &segs[cursor..cursor + sched.batch_size];
        cursor += sched.batch_size;

        let result = alternating_step(bundle, &mut state, batch, w, sched.adversarial);
        if sched.log_every > 0 && state.step % sched.log_every == 0 {
            if let Some(r) = state.loss_log.last() {
                eprintln!(
                    "step {} lr {:.3e} recon {:.4} singer {:.4} pitch {:.4}",
                    r.step, r.lr, r.recon, r.singer, r.pitch
                );
            }
        }
        if let Err(e) = result {
            if let Some(dir) = run_dir {
                let _ = std::fs::write(
                    dir.join("metrics.csv"),
                    metrics_csv(&state.loss_log, w),
                );
            }
            return Err(e);
        }

        if backtranslation_on
            && state.step > warmup
            && state.step % sched.backtranslate_every == 0
        {
            backtranslate_round(
                bundle,
                &mut state,
                &segs,
                sched.backtranslate_count,
                sched.backtranslate_inner_steps,
                sched.batch_size,
            )?;
        }

        if let Some(dir) = run_dir {
            if sched.checkpoint_interval > 0 && state.step % sched.checkpoint_interval == 0 {
                checkpoint_save(bundle, &dir.join(format!("checkpoint_{}.pnck", state.step)))?;
                std::fs::write(dir.join("metrics.csv"), metrics_csv(&state.loss_log, w))
                    .map_err(|e| Error::io(dir, e))?;
            }
        }
    }

    if let Some(dir) = run_dir {
        checkpoint_save(bundle, &dir.join(format!("checkpoint_{}.pnck", state.step)))?;
        std::fs::write(dir.join("metrics.csv"), metrics_csv(&state.loss_log, w))
            .map_err(|e| Error::io(dir, e))?;
    }
    Ok(state)
}

/// Prepare every clip of a corpus (compand + pitch) with optional
/// ground-truth contours and optional 4-way augmentation.
pub fn prepare_corpus(
    corpus: &Corpus,
    ground_truth: Option<&[crate::pitch::PitchContour]>,
    pitch_cfg: &PitchConfig,
    augment: bool,
) -> Result<Vec<PreparedClip>> {
    use crate::audio::{augment as aug, AugmentMode};
    let mut prepared = Vec::new();
    for (i, entry) in corpus.clips.iter().enumerate() {
        let gt = ground_truth.map(|g| &g[i]);
        prepared.push(crate::dataset::prepare_clip(entry, pitch_cfg, gt)?);
        if augment {
            for mode in [
                AugmentMode::Invert,
                AugmentMode::Reverse,
                AugmentMode::ReverseInvert,
            ] {
                let clip = aug(&entry.clip, mode);
                let variant = crate::dataset::CorpusClip {
                    clip,
                    singer_id: entry.singer_id,
                    clip_id: format!("{}+{:?}", entry.clip_id, mode),
                };
                // ground truth under reversal is the reversed contour;
                // inversion leaves pitch untouched
                let gt_variant = gt.map(|c| {
                    let mut c = c.clone();
                    if matches!(mode, AugmentMode::Reverse | AugmentMode::ReverseInvert) {
                        c.f0.reverse();
                    }
                    c
                });
                prepared.push(crate::dataset::prepare_clip(
                    &variant,
                    pitch_cfg,
                    gt_variant.as_ref(),
                )?);
            }
        }
    }
    Ok(prepared)
}
