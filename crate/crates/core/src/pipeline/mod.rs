//! Teacher fine-tuning and the three-stage pruning run.
//!
//! A run of `N` steps numbers them `1..=N` with training fraction `t = i/N`.
//! Stage 1 (`t < p_s`) only distills, stage 2 (`p_s ≤ t ≤ p_e`) scores and
//! prunes on every step, stage 3 keeps the structure fixed.

mod config;
mod optim;
mod trace;

pub use config::{Mode, RunConfig};
pub use optim::{lr_schedule, AdamW};
pub use trace::{RunTrace, TraceRow};

use rayon::prelude::*;

use crate::autodiff::{GradChannel, Graph};
use crate::data::{batch_iter, gen_synthetic, load_examples, sequential_batches, Dataset, Example};
use crate::distill::{
    backprop_with_separation, build_layer_map, distill_losses, teacher_states, LayerMap,
};
use crate::error::{GrainError, Result};
use crate::model::EncoderModel;
use crate::pruning::{
    apply_struct_reg, heads_importance, prune_pools, prune_to_density, random_scores,
    raw_importance, register_heads, register_units, ImportanceTable, Registry, ScheduleParams,
    UnitKind,
};
use crate::tensor::Scalar;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Metrics {
    pub accuracy: f64,
    /// Mean hard-label cross-entropy.
    pub loss: f64,
    pub examples: usize,
}

/// Accuracy and mean cross-entropy over `examples`, without touching the
/// model. Batches run in parallel and are reduced in order.
pub fn evaluate<S: Scalar>(model: &EncoderModel<S>, examples: &[Example]) -> Result<Metrics> {
    if examples.is_empty() {
        return Err(GrainError::Input("cannot evaluate an empty split".into()));
    }
    let batches = sequential_batches(examples, 64, model.config.max_len);
    let parts: Vec<(usize, f64)> = batches
        .par_iter()
        .map(|b| {
            let logits = model.logits(&b.trimmed())?;
            let mut correct = 0;
            let mut loss = 0.0;
            for (r, &label) in b.labels.iter().enumerate() {
                let row: Vec<f64> = logits.row(r).iter().map(|x| x.as_f64()).collect();
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
                loss += lse - row[label];
                let pred = row
                    .iter()
                    .enumerate()
                    .fold(0, |best, (k, &v)| if v > row[best] { k } else { best });
                correct += usize::from(pred == label);
            }
            Ok((correct, loss))
        })
        .collect::<Result<_>>()?;
    let correct: usize = parts.iter().map(|p| p.0).sum();
    let loss: f64 = parts.iter().map(|p| p.1).sum();
    Ok(Metrics {
        accuracy: correct as f64 / examples.len() as f64,
        loss: loss / examples.len() as f64,
        examples: examples.len(),
    })
}

/// Reads the splits named in the config, or generates the synthetic task.
pub fn load_dataset(cfg: &RunConfig) -> Result<Dataset> {
    let (vocab, classes) = (cfg.model.vocab, cfg.model.classes);
    match (&cfg.train_path, &cfg.dev_path) {
        (Some(train), Some(dev)) => Ok(Dataset {
            train: load_examples(train, vocab, classes)?,
            dev: load_examples(dev, vocab, classes)?,
            vocab,
            classes,
        }),
        (None, None) => gen_synthetic(
            vocab,
            cfg.model.max_len,
            cfg.train_size,
            cfg.dev_size,
            cfg.data_seed,
        ),
        _ => Err(GrainError::Config(
            "train_path and dev_path must be given together".into(),
        )),
    }
}

fn check_dataset<S: Scalar>(model: &EncoderModel<S>, data: &Dataset) -> Result<()> {
    if data.train.is_empty() {
        return Err(GrainError::Input("training split is empty".into()));
    }
    if data.classes != model.config.classes || data.vocab > model.config.vocab {
        return Err(GrainError::Contract(format!(
            "dataset (vocab {}, {} classes) does not fit the model (vocab {}, {} classes)",
            data.vocab, data.classes, model.config.vocab, model.config.classes
        )));
    }
    Ok(())
}

/// Total optimizer steps of a run.
pub fn total_steps(train_examples: usize, batch: usize, epochs: usize) -> usize {
    epochs * train_examples.div_ceil(batch)
}

#[derive(Clone, Debug)]
pub struct TeacherOutcome {
    pub model: EncoderModel<f32>,
    pub dev: Metrics,
    /// Training loss of every step.
    pub losses: Vec<f64>,
}

/// Supervised hard-label training of an unpruned model.
pub fn train_teacher(cfg: &RunConfig, data: &Dataset) -> Result<TeacherOutcome> {
    let mut model = EncoderModel::<f32>::init(cfg.model, cfg.seed)?;
    check_dataset(&model, data)?;
    let steps = total_steps(data.train.len(), cfg.batch_size, cfg.teacher_epochs);
    let mut opt = AdamW::new(cfg.weight_decay);
    let mut losses = Vec::with_capacity(steps);
    let mut step = 0;
    for epoch in 0..cfg.teacher_epochs {
        for batch in batch_iter(
            &data.train,
            cfg.batch_size,
            cfg.model.max_len,
            cfg.seed,
            epoch,
        ) {
            step += 1;
            let batch = batch.trimmed();
            model.zero_grads();
            let mut g = Graph::new();
            let hs = model.forward(&mut g, &batch)?;
            let loss = g.cross_entropy(hs.logits, &batch.labels)?;
            let value = g.value(loss).item().as_f64();
            if !value.is_finite() {
                return Err(GrainError::Run {
                    step,
                    msg: format!("training loss is {value}"),
                });
            }
            g.backward_into(loss, GradChannel::Ce, &mut [&mut model.params])?;
            opt.step(
                &mut model.params,
                lr_schedule(step as f64 / steps as f64, cfg.teacher_lr),
            );
            losses.push(value);
        }
    }
    let dev = evaluate(&model, &data.dev)?;
    Ok(TeacherOutcome { model, dev, losses })
}

#[derive(Clone, Debug)]
pub struct GrainOutcome {
    pub student: EncoderModel<f32>,
    pub layer_map: LayerMap<f32>,
    pub trace: RunTrace,
    pub registry: Registry,
    pub table: ImportanceTable,
    pub dev: Metrics,
    pub steps: usize,
}

fn trace_row<S: Scalar>(
    model: &EncoderModel<S>,
    step: usize,
    t: f64,
    stage: u8,
    target: f64,
    losses: (f64, f64),
    lr: f64,
) -> TraceRow {
    let mut live = [0usize; 2];
    for h in model.blocks.iter().flat_map(|b| b.heads.iter()) {
        live[0] += h.live_queries();
        live[1] += h.live_values();
    }
    TraceRow {
        step,
        t,
        stage,
        target_density: target,
        actual_density: model.model_density(),
        loss_ce: losses.0,
        loss_hidden: losses.1,
        lr,
        live_heads: model.live_heads(),
        live_query: live[0],
        live_value: live[1],
        live_ffn: model.blocks.iter().map(|b| b.live_ffn()).sum(),
    }
}

/// Seed of the random ablation scores at a given step.
fn step_seed(seed: u64, step: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (step as u64)
}

/// Per-mode pruning state carried across steps.
enum Pruner {
    Units,
    Pools {
        heads: Vec<crate::pruning::HeadUnit>,
        head_table: ImportanceTable,
        heads_schedule: ScheduleParams,
        ffn_schedule: ScheduleParams,
    },
}

/// Distills a copy of `teacher` while pruning it to the configured density.
pub fn run_grain(
    cfg: &RunConfig,
    teacher: &EncoderModel<f32>,
    data: &Dataset,
) -> Result<GrainOutcome> {
    cfg.validate()?;
    if teacher.config != cfg.model {
        return Err(GrainError::Contract(format!(
            "teacher geometry {:?} differs from the configured model {:?}",
            teacher.config, cfg.model
        )));
    }
    if !matches!(teacher.embedding, crate::model::Embedding::Full { .. })
        || teacher.count_prunable_params() != cfg.model.prunable_params()
    {
        return Err(GrainError::Contract(
            "teacher must be an unpruned model with a full embedding table".into(),
        ));
    }
    check_dataset(teacher, data)?;

    let mut student = match cfg.mode {
        Mode::GrainNoEf => teacher.clone(),
        _ => teacher.factorize_embedding(cfg.ef_rank)?,
    };
    let mut map = build_layer_map::<f32>(
        student.blocks.len(),
        teacher.blocks.len(),
        cfg.model.hidden,
        cfg.distill.layer_map,
    )?;
    let mut opt_student = AdamW::new(cfg.weight_decay);
    let mut opt_map = AdamW::new(cfg.weight_decay);

    let steps = total_steps(data.train.len(), cfg.batch_size, cfg.epochs);
    let schedule = ScheduleParams::new(cfg.p_s, cfg.p_e, cfg.final_density, steps)?;
    let last_pruning_step = (1..=steps).rev().find(|&i| schedule.is_pruning_step(i));
    let mut registry = register_units(&student);
    let mut table = ImportanceTable::new(registry.len());
    let mut pruner = match cfg.mode {
        Mode::HeadsFfn => {
            let heads = register_heads(&student);
            Pruner::Pools {
                head_table: ImportanceTable::new(heads.len()),
                heads,
                heads_schedule: ScheduleParams {
                    s_f: cfg.heads_density.expect("validated"),
                    ..schedule
                },
                ffn_schedule: ScheduleParams {
                    s_f: cfg.ffn_density.expect("validated"),
                    ..schedule
                },
            }
        }
        _ => Pruner::Units,
    };

    let mut trace = RunTrace::default();
    trace.rows.push(trace_row(
        &student,
        0,
        0.0,
        1,
        1.0,
        (f64::NAN, f64::NAN),
        0.0,
    ));
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        for batch in batch_iter(
            &data.train,
            cfg.batch_size,
            cfg.model.max_len,
            cfg.seed,
            epoch,
        ) {
            step += 1;
            let t = schedule.fraction(step);
            let lr = lr_schedule(t, cfg.lr);
            let batch = batch.trimmed();
            let targets = teacher_states(teacher, &batch)?;
            student.zero_grads();
            map.params.zero_grads();
            let mut g = Graph::new();
            let hs = student.forward(&mut g, &batch)?;
            let rows = batch.token_rows();
            let (l_ce, l_hidden) =
                distill_losses(&mut g, &hs, &targets, &cfg.distill, &map, Some(&rows))?;
            let losses = (
                g.value(l_ce).item().as_f64(),
                g.value(l_hidden).item().as_f64(),
            );
            if !losses.0.is_finite() || !losses.1.is_finite() {
                return Err(GrainError::Run {
                    step,
                    msg: format!("distillation losses are {} and {}", losses.0, losses.1),
                });
            }
            backprop_with_separation(
                &mut g,
                l_ce,
                l_hidden,
                &mut [&mut student.params, &mut map.params],
                cfg.grad_sep,
            )?;
            drop(g);

            let stage = schedule.stage(step);
            let mut target = if stage == 1 { 1.0 } else { cfg.final_density };
            if stage == 2 {
                let is_last = Some(step) == last_pruning_step;
                match &mut pruner {
                    Pruner::Units => {
                        let raw = if cfg.mode == Mode::RandomScore {
                            random_scores(&registry, step_seed(cfg.seed, step))
                        } else {
                            raw_importance(&registry, &student)?
                        };
                        let scores = apply_struct_reg(&raw, &registry, cfg.alpha)?;
                        table.smooth_update(&scores, cfg.beta)?;
                        target = if is_last {
                            cfg.final_density
                        } else {
                            schedule.at_step(step)
                        };
                        prune_to_density(&mut student, &mut registry, &table, target)?;
                    }
                    Pruner::Pools {
                        heads,
                        head_table,
                        heads_schedule,
                        ffn_schedule,
                    } => {
                        let raw = raw_importance(&registry, &student)?;
                        let ffn_only: Vec<f64> = raw
                            .iter()
                            .zip(registry.units())
                            .map(|(&s, u)| if u.kind == UnitKind::Ffn { s } else { 0.0 })
                            .collect();
                        table.smooth_update(&ffn_only, cfg.beta)?;
                        head_table.smooth_update(&heads_importance(heads, &student), cfg.beta)?;
                        let (ht, ft) = if is_last {
                            (heads_schedule.s_f, ffn_schedule.s_f)
                        } else {
                            (heads_schedule.at_step(step), ffn_schedule.at_step(step))
                        };
                        prune_pools(
                            &mut student,
                            heads,
                            head_table,
                            &mut registry,
                            &table,
                            ht,
                            ft,
                        )?;
                        target = crate::pruning::overall_density(&cfg.model, ht, ft);
                    }
                }
            }
            student.mask_gradients();
            opt_student.step(&mut student.params, lr);
            opt_map.step(&mut map.params, lr);
            student.enforce_masks();
            trace
                .rows
                .push(trace_row(&student, step, t, stage, target, losses, lr));
        }
    }
    let dev = evaluate(&student, &data.dev)?;
    Ok(GrainOutcome {
        student,
        layer_map: map,
        trace,
        registry,
        table,
        dev,
        steps,
    })
}
