//! Recovery after surgery: hidden-state distillation of the layers that stand
//! in for a pruned cluster, alignment of single-stream layers to the dual-stream
//! teacher, and the short full-parameter fine-tune that follows alignment.

use mmdc_tensor::{NdArray, Tape, Var};
use serde::{Deserialize, Serialize};

use crate::compress::{blocks_bit_equal, DistillTarget, HybridPlan, PrunePlan};
use crate::config::BlockKind;
use crate::dataset::Dataset;
use crate::diffusion::{DiffusionBatch, NoiseSchedule};
use crate::error::{Error, Result};
use crate::eval::fixed_batches;
use crate::forward::{block_forward, conditioning, BlockVars, EmbedVars, Hidden, HiddenTrace, LayerState, ModelInput};
use crate::model::{Model, Trainable};
use crate::train::{apply_gradients, global_finetune, BatchSampler, FinetuneOutcome, LossCurve, TrainRunConfig};

/// How a distilled student layer gets its input.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistillMode {
    /// Each trainable layer reads the teacher's state before its cluster.
    #[default]
    TeacherForced,
    /// The student runs its own forward; losses attach to its per-layer outputs.
    EndToEnd,
}

/// Trained student plus per-layer losses on fixed evaluation batches.
pub struct RecoveryOutcome {
    pub model: Model,
    pub curve: LossCurve,
    /// Student layers that were trained.
    pub layers: Vec<usize>,
    /// Per-layer MSE before the first step and after the last.
    pub initial_mse: Vec<f64>,
    pub final_mse: Vec<f64>,
}

impl RecoveryOutcome {
    fn untouched(model: &Model) -> Self {
        Self {
            model: model.clone(),
            curve: LossCurve::default(),
            layers: Vec::new(),
            initial_mse: Vec::new(),
            final_mse: Vec::new(),
        }
    }
}

fn constant_state(tape: &mut Tape<f32>, s: &LayerState) -> Hidden<Var> {
    s.map(|a| tape.constant(a.clone()))
}

/// Sum of per-stream MSEs between a student state and a fixed target.
fn state_mse(tape: &mut Tape<f32>, got: &Hidden<Var>, want: &LayerState) -> Result<Var> {
    Ok(match (got, want) {
        (Hidden::Dual { text, image }, Hidden::Dual { text: wt, image: wi }) => {
            let (wt, wi) = (tape.constant(wt.clone()), tape.constant(wi.clone()));
            let a = tape.mse(*text, wt)?;
            let b = tape.mse(*image, wi)?;
            tape.add(a, b)?
        }
        (Hidden::Fused(x), w) => {
            let w = tape.constant(w.fused());
            tape.mse(*x, w)?
        }
        (Hidden::Dual { .. }, Hidden::Fused(_)) => {
            return Err(Error::invalid("dual student state compared with a fused target"))
        }
    })
}

/// Teacher states the distillation targets read, traced once per batch.
struct TeacherStates {
    embed: LayerState,
    trace: HiddenTrace,
}

impl TeacherStates {
    fn capture(teacher: &Model, input: &ModelInput) -> Result<Self> {
        let (_, trace) = teacher.forward(input, None, true)?;
        Ok(Self {
            embed: teacher.embed_state(input)?,
            trace: trace.expect("traced forward"),
        })
    }

    fn after(&self, layer: Option<usize>) -> &LayerState {
        match layer {
            None => &self.embed,
            Some(l) => self.trace.get(l).expect("layer in trace"),
        }
    }
}

/// One loss node per distillation target.
fn distill_terms(
    tape: &mut Tape<f32>,
    student: &Model,
    input: &ModelInput,
    teacher: &TeacherStates,
    targets: &[DistillTarget],
    mode: DistillMode,
    trainable: &Trainable,
) -> Result<Vec<Var>> {
    let mut terms = Vec::with_capacity(targets.len());
    match mode {
        DistillMode::TeacherForced => {
            let e = EmbedVars::bind(tape, student, false);
            let cond = conditioning(tape, &student.config, &e, &input.t)?;
            for d in targets {
                let s = d.student_layer;
                let vars = BlockVars::bind(tape, s, &student.blocks[s], trainable.block(s));
                let x = constant_state(tape, teacher.after(d.input_layer));
                let y = block_forward(tape, &student.config, &vars, x, cond)?;
                terms.push(state_mse(tape, &y, teacher.after(Some(d.target_layer)))?);
            }
        }
        DistillMode::EndToEnd => {
            let pass = student.forward_tape(tape, input, None, trainable)?;
            for d in targets {
                let got = pass.states[d.student_layer].clone();
                terms.push(state_mse(tape, &got, teacher.after(Some(d.target_layer)))?);
            }
        }
    }
    Ok(terms)
}

fn sum_terms(tape: &mut Tape<f32>, terms: &[Var]) -> Result<Var> {
    let mut total = terms[0];
    for &t in &terms[1..] {
        total = tape.add(total, t)?;
    }
    Ok(total)
}

/// Batch-size weighted mean of per-layer terms over fixed batches.
fn eval_terms(
    batches: &[DiffusionBatch],
    mut per_batch: impl FnMut(&ModelInput) -> Result<Vec<f64>>,
) -> Result<Vec<f64>> {
    let mut acc: Vec<f64> = Vec::new();
    let mut n = 0usize;
    for b in batches {
        let v = per_batch(&b.input())?;
        acc.resize(v.len(), 0.0);
        for (a, x) in acc.iter_mut().zip(v) {
            *a += x * b.len() as f64;
        }
        n += b.len();
    }
    Ok(acc.into_iter().map(|a| a / n.max(1) as f64).collect())
}

fn values(tape: &Tape<f32>, terms: &[Var]) -> Result<Vec<f64>> {
    terms.iter().map(|&t| Ok(tape.value(t).item()? as f64)).collect()
}

/// Per-target distillation MSE of `student` on `batches`.
pub fn distill_layer_mse(
    student: &Model,
    teacher: &Model,
    plan: &PrunePlan,
    batches: &[DiffusionBatch],
    mode: DistillMode,
) -> Result<Vec<f64>> {
    let targets = plan.distill_targets();
    if targets.is_empty() {
        return Ok(Vec::new());
    }
    eval_terms(batches, |input| {
        let states = TeacherStates::capture(teacher, input)?;
        let mut tape = Tape::<f32>::no_grad();
        let terms = distill_terms(&mut tape, student, input, &states, &targets, mode, &Trainable::frozen())?;
        values(&tape, &terms)
    })
}

fn check_prune_pair(student: &Model, teacher: &Model, plan: &PrunePlan) -> Result<()> {
    if teacher.depth() != plan.depth || student.depth() != plan.student_depth() {
        return Err(Error::invalid(format!(
            "plan maps {} layers to {}, got teacher depth {} and student depth {}",
            plan.depth,
            plan.student_depth(),
            teacher.depth(),
            student.depth()
        )));
    }
    if !student.config.layout.is_all_dual() || !teacher.config.layout.is_all_dual() {
        return Err(Error::invalid("targeted distillation expects all-dual models"));
    }
    Ok(())
}

/// Trains the student layers that stand in for non-empty clusters to reproduce
/// the teacher's state at the end of their cluster. All other parameters stay
/// frozen. Per-layer losses are summed over streams and layers.
#[allow(clippy::too_many_arguments)]
pub fn targeted_distill(
    student: &Model,
    teacher: &Model,
    train: &Dataset,
    val: &Dataset,
    schedule: &NoiseSchedule,
    plan: &PrunePlan,
    cfg: &TrainRunConfig,
    mode: DistillMode,
    val_seed: u64,
) -> Result<RecoveryOutcome> {
    cfg.validate("distill")?;
    check_prune_pair(student, teacher, plan)?;
    let targets = plan.distill_targets();
    if targets.is_empty() {
        log::warn!("no pruned clusters; distillation has nothing to train");
        return Ok(RecoveryOutcome::untouched(student));
    }
    let layers: Vec<usize> = targets.iter().map(|d| d.student_layer).collect();
    let trainable = Trainable::blocks(layers.iter().copied());
    let names: Vec<String> = layers.iter().map(|l| format!("layer{l}")).collect();
    let eval_batches = fixed_batches(val, schedule, val_seed)?;
    let initial_mse = distill_layer_mse(student, teacher, plan, &eval_batches, mode)?;

    let mut model = student.clone();
    let mut curve = LossCurve::default();
    curve.push(0, vec![], Some(initial_mse.iter().sum()));
    let mut opt = cfg.optimizer();
    let mut sampler = BatchSampler::new(train.len(), cfg.seed);
    for step in 1..=cfg.steps {
        let idx = sampler.next(cfg.batch_size);
        let (x0, tokens) = train.batch(&idx);
        let input = DiffusionBatch::sample(schedule, x0, tokens, cfg.timestep_power, sampler.rng())?.input();
        let states = TeacherStates::capture(teacher, &input)?;
        let mut tape = Tape::<f32>::new();
        let terms = distill_terms(&mut tape, &model, &input, &states, &targets, mode, &trainable)?;
        let total = sum_terms(&mut tape, &terms)?;
        let row = values(&tape, &terms)?;
        let mut grads = tape.backward(total)?;
        drop(tape);
        apply_gradients(&mut model, &mut opt, &mut grads, &trainable)?;

        let val = (step == cfg.steps || (cfg.eval_every > 0 && step % cfg.eval_every == 0))
            .then(|| distill_layer_mse(&model, teacher, plan, &eval_batches, mode).map(|v| v.iter().sum()))
            .transpose()?;
        if val.is_some() || step % cfg.log_every == 0 || step == 1 {
            let mut terms: Vec<(String, f64)> = names.iter().cloned().zip(row.iter().copied()).collect();
            terms.push(("total".into(), row.iter().sum()));
            if let Some(v) = val {
                log::info!("distill step {step}: train {:.5} eval {v:.5}", row.iter().sum::<f64>());
            }
            curve.push(step, terms, val);
        }
    }
    let final_mse = distill_layer_mse(&model, teacher, plan, &eval_batches, mode)?;
    Ok(RecoveryOutcome {
        model,
        curve,
        layers,
        initial_mse,
        final_mse,
    })
}

/// Per-single-layer MSE between the student's fused state and
/// Concat(teacher text, teacher image) at the same depth.
fn align_terms(
    tape: &mut Tape<f32>,
    student: &Model,
    input: &ModelInput,
    teacher: &HiddenTrace,
    layers: &[usize],
    trainable: &Trainable,
) -> Result<Vec<Var>> {
    let pass = student.forward_tape(tape, input, None, trainable)?;
    layers
        .iter()
        .map(|&l| state_mse(tape, &pass.states[l], teacher.get(l).expect("layer in trace")))
        .collect()
}

pub fn align_layer_mse(
    student: &Model,
    teacher: &Model,
    n_dual: usize,
    batches: &[DiffusionBatch],
) -> Result<Vec<f64>> {
    let layers: Vec<usize> = (n_dual..student.depth()).collect();
    eval_terms(batches, |input| {
        let trace = teacher.capture_hidden(input, &layers)?;
        let mut tape = Tape::<f32>::no_grad();
        let terms = align_terms(&mut tape, student, input, &trace, &layers, &Trainable::frozen())?;
        values(&tape, &terms)
    })
}

/// Largest absolute difference between the state entering the student's
/// single-stream region and the teacher's state at the same depth.
pub fn bridge_gap(student: &Model, teacher: &Model, n_dual: usize, batches: &[DiffusionBatch]) -> Result<f64> {
    let mut gap = 0.0f64;
    for b in batches {
        let input = b.input();
        let s = student.capture_hidden(&input, &[n_dual - 1])?;
        let t = teacher.capture_hidden(&input, &[n_dual - 1])?;
        let (s, t) = (
            s.get(n_dual - 1).expect("captured"),
            t.get(n_dual - 1).expect("captured"),
        );
        let (s, t): (NdArray, NdArray) = (s.fused(), t.fused());
        for (a, b) in s.data().iter().zip(t.data()) {
            gap = gap.max((a - b).abs() as f64);
        }
    }
    Ok(gap)
}

/// Checks that the student's dual prefix and embeddings are exact copies of
/// the teacher's, so the single-stream region starts from the teacher's state.
pub fn check_anchors(student: &Model, teacher: &Model, plan: &HybridPlan) -> Result<()> {
    if teacher.depth() != plan.depth() || student.depth() != plan.depth() {
        return Err(Error::invalid(format!(
            "hybrid plan has depth {}, teacher {}, student {}",
            plan.depth(),
            teacher.depth(),
            student.depth()
        )));
    }
    let layout = &student.config.layout;
    if layout.n_dual() != plan.n_dual || !teacher.config.layout.is_all_dual() {
        return Err(Error::invalid(format!(
            "expected a {}D+{}S student and an all-dual teacher, got {} and {}",
            plan.n_dual,
            plan.n_single,
            layout.describe(),
            teacher.config.layout.describe()
        )));
    }
    let embed_equal = student
        .embed
        .arrays()
        .iter()
        .zip(teacher.embed.arrays())
        .all(|(a, b)| a.data() == b.data());
    if !embed_equal || !blocks_bit_equal(student, teacher, 0..plan.n_dual) {
        return Err(Error::invalid(
            "anchor layers differ from the teacher; alignment needs exact copies",
        ));
    }
    Ok(())
}

/// Aligns the single-stream layers with the dual-stream teacher. Dual layers,
/// embeddings and head stay frozen; the student runs end to end and each
/// single layer's output is matched to the teacher's concatenated streams.
#[allow(clippy::too_many_arguments)]
pub fn align_hybrid(
    student: &Model,
    teacher: &Model,
    train: &Dataset,
    val: &Dataset,
    schedule: &NoiseSchedule,
    plan: &HybridPlan,
    cfg: &TrainRunConfig,
    val_seed: u64,
) -> Result<RecoveryOutcome> {
    cfg.validate("align")?;
    check_anchors(student, teacher, plan)?;
    let layers: Vec<usize> = (plan.n_dual..student.depth()).collect();
    if layers.is_empty() {
        log::warn!("no single-stream layers; alignment has nothing to train");
        return Ok(RecoveryOutcome::untouched(student));
    }
    debug_assert!(layers.iter().all(|&l| student.blocks[l].kind() == BlockKind::Single));
    let trainable = Trainable::blocks(layers.iter().copied());
    let names: Vec<String> = layers.iter().map(|l| format!("layer{l}")).collect();
    let eval_batches = fixed_batches(val, schedule, val_seed)?;
    let initial_mse = align_layer_mse(student, teacher, plan.n_dual, &eval_batches)?;
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;

    let mut model = student.clone();
    let mut curve = LossCurve::default();
    curve.push(0, vec![], Some(mean(&initial_mse)));
    let mut opt = cfg.optimizer();
    let mut sampler = BatchSampler::new(train.len(), cfg.seed);
    for step in 1..=cfg.steps {
        let idx = sampler.next(cfg.batch_size);
        let (x0, tokens) = train.batch(&idx);
        let input = DiffusionBatch::sample(schedule, x0, tokens, cfg.timestep_power, sampler.rng())?.input();
        let trace = teacher.capture_hidden(&input, &layers)?;
        let mut tape = Tape::<f32>::new();
        let terms = align_terms(&mut tape, &model, &input, &trace, &layers, &trainable)?;
        let total = sum_terms(&mut tape, &terms)?;
        let row = values(&tape, &terms)?;
        let mut grads = tape.backward(total)?;
        drop(tape);
        apply_gradients(&mut model, &mut opt, &mut grads, &trainable)?;

        let val = (step == cfg.steps || (cfg.eval_every > 0 && step % cfg.eval_every == 0))
            .then(|| align_layer_mse(&model, teacher, plan.n_dual, &eval_batches).map(|v| mean(&v)))
            .transpose()?;
        if val.is_some() || step % cfg.log_every == 0 || step == 1 {
            let mut terms: Vec<(String, f64)> = names.iter().cloned().zip(row.iter().copied()).collect();
            terms.push(("total".into(), row.iter().sum()));
            if let Some(v) = val {
                log::info!(
                    "align step {step}: train {:.5} eval mean {v:.5}",
                    row.iter().sum::<f64>()
                );
            }
            curve.push(step, terms, val);
        }
    }
    let final_mse = align_layer_mse(&model, teacher, plan.n_dual, &eval_batches)?;
    Ok(RecoveryOutcome {
        model,
        curve,
        layers,
        initial_mse,
        final_mse,
    })
}

/// Short full-parameter fine-tune on the diffusion loss after alignment. Same
/// loop as [`global_finetune`]; only the budget differs.
pub fn lightweight_finetune(
    model: &Model,
    train: &Dataset,
    val: &Dataset,
    schedule: &NoiseSchedule,
    cfg: &TrainRunConfig,
    val_seed: u64,
) -> Result<FinetuneOutcome> {
    global_finetune(model, train, val, schedule, cfg, val_seed)
}
