use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::arc::{encode_canvas, generate_microtask, Equivariance, Family};
use crate::error::Error;
use crate::halting::HaltPolicy;
use crate::model::{LoopVit, LoopVitConfig, Mode};
use crate::tensor::{Tape, Tensor};

fn tiny_cfg() -> LoopVitConfig {
    LoopVitConfig {
        d: 8,
        heads: 2,
        t_train: 2,
        t_max: 4,
        n_task_tokens: 2,
        canvas_h: 10,
        canvas_w: 10,
        ..Default::default()
    }
}

fn train_cfg(steps: usize) -> TrainConfig {
    TrainConfig {
        t_train: 2,
        batch_size: 2,
        steps,
        warmup_steps: 1,
        eval_interval: 2,
        ..Default::default()
    }
}

fn eval_set(family: Family, n: u64) -> Vec<EvalTask> {
    (0..n)
        .map(|s| EvalTask {
            id: format!("{family}-{s}"),
            task: generate_microtask(family, 500 + s),
            equivariance: family.equivariance(),
        })
        .collect()
}

fn run(model: &mut LoopVit<f64>, cfg: &TrainConfig, eval: &[EvalTask]) -> crate::Result<TrainReport> {
    let tasks = (0u64..).map(|s| generate_microtask(Family::MirrorH, s));
    train_offline(model, TrainData { tasks, eval, eval_policy: HaltPolicy::fixed(2) }, cfg, |_| Ok(()))
}

#[test]
fn loss_of_zero_logits_is_log_classes() {
    let cfg = tiny_cfg();
    let task = generate_microtask(Family::Identity, 3);
    let canvas = encode_canvas(&task, 0, &cfg.canvas()).unwrap();
    let zeros = Tensor::<f64>::zeros(&[cfg.tokens(), 11]);
    assert!((offline_loss_value(&zeros, &canvas).unwrap() - 11f64.ln()).abs() < 1e-12);

    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let logits = Tensor::<f64>::from_fn(&[cfg.tokens(), 11], |_| rng.random_range(-3.0..3.0));
    let targets = canvas.target.as_ref().unwrap();
    let mut want = 0.0;
    for (i, &t) in targets.iter().enumerate() {
        let row = logits.row(cfg.n_task_tokens + i);
        let lse = row.iter().map(|x| x.exp()).sum::<f64>().ln();
        want += lse - row[t];
    }
    want /= targets.len() as f64;
    assert!((offline_loss_value(&logits, &canvas).unwrap() - want).abs() < 1e-10);

    let mut unanswered = canvas.clone();
    unanswered.target = None;
    assert!(offline_loss_value(&logits, &unanswered).is_err());
}

#[test]
fn zero_learning_rate_leaves_weights_untouched() {
    let mut model: LoopVit<f64> = LoopVit::new(tiny_cfg(), 1).unwrap();
    let before = model.params.clone();
    let cfg = TrainConfig { learning_rate: 0.0, ..train_cfg(3) };
    run(&mut model, &cfg, &[]).unwrap();
    for ((_, a), (_, b)) in model.params.named().into_iter().zip(before.named()) {
        assert_eq!(a.data(), b.data());
    }
}

#[test]
fn training_is_deterministic_and_reduces_loss() {
    let eval = eval_set(Family::MirrorH, 2);
    let go = || {
        let mut model: LoopVit<f64> = LoopVit::new(tiny_cfg(), 2).unwrap();
        let report = run(&mut model, &TrainConfig { learning_rate: 3e-3, ..train_cfg(30) }, &eval).unwrap();
        (model, report)
    };
    let (a, ra) = go();
    let (b, rb) = go();
    assert_eq!(a.params, b.params);
    assert_eq!(ra, rb);
    assert_eq!(ra.steps_run, 30);
    assert_eq!(ra.log.len(), 15);
    assert!(ra.log.last().unwrap().loss < ra.log[0].loss);
    assert!(ra.log.iter().all(|r| r.schema_version == METRICS_SCHEMA_VERSION));
}

#[test]
fn first_step_embedding_receives_gradient() {
    let mut model: LoopVit<f64> = LoopVit::new(LoopVitConfig { t_train: 4, ..tiny_cfg() }, 3).unwrap();
    let task = generate_microtask(Family::MirrorH, 7);
    let canvas = encode_canvas(&task, 0, &model.config.canvas()).unwrap();
    model.params.zero_grad();
    accumulate_batch(&mut model, &[canvas], 4).unwrap();
    let g = model.params.step_embed.grad().unwrap();
    assert!(g[..8].iter().any(|&x| x != 0.0));
}

#[test]
fn trainer_contracts() {
    let mut model: LoopVit<f64> = LoopVit::new(tiny_cfg(), 4).unwrap();
    let wrong_depth = TrainConfig { t_train: 3, ..train_cfg(1) };
    assert!(matches!(run(&mut model, &wrong_depth, &[]), Err(Error::Config(_))));
    assert!(matches!(run(&mut model, &TrainConfig { batch_size: 0, ..train_cfg(1) }, &[]), Err(Error::Config(_))));

    let stacked_cfg = LoopVitConfig { mode: Mode::Stacked, blocks: 2, ..tiny_cfg() };
    let mut stacked: LoopVit<f64> = LoopVit::new(stacked_cfg, 4).unwrap();
    assert!(matches!(run(&mut stacked, &train_cfg(1), &[]), Err(Error::Contract(_))));

    model.params.head_b.data_mut()[0] = f64::NAN;
    assert!(matches!(run(&mut model, &train_cfg(2), &[]), Err(Error::Divergence { step: 1, .. })));
}

#[test]
fn early_stop_at_target() {
    let eval = eval_set(Family::MirrorH, 1);
    let mut model: LoopVit<f64> = LoopVit::new(tiny_cfg(), 5).unwrap();
    let cfg = TrainConfig { target_exact_match: Some(0.0), ..train_cfg(10) };
    let report = run(&mut model, &cfg, &eval).unwrap();
    assert_eq!(report.steps_run, 2);
    assert_eq!(report.log.len(), 1);
}

#[test]
fn ttt_batch_is_leave_one_out_with_identity_first_view() {
    let cfg = tiny_cfg();
    let task = generate_microtask(Family::MirrorH, 9);
    let ttt = TttConfig { augmentations_per_demo: 3, ..Default::default() };
    let batch = ttt_batch(&task, &ttt, &Equivariance::full(), &cfg.canvas()).unwrap();
    assert_eq!(batch.len(), task.demos.len() * 3);
    for (i, held) in task.demos.iter().enumerate() {
        let direct = &batch[i * 3];
        assert_eq!(direct.input_grid(), held.input);
        let others: Vec<_> = task.demos.iter().enumerate().filter(|&(j, _)| j != i).map(|(_, d)| d.clone()).collect();
        let expect = crate::arc::encode_pair(&others, &held.input, Some(&held.output), &cfg.canvas()).unwrap();
        assert_eq!(direct, &expect);
    }
    let single = crate::arc::TaskInstance::new(task.demos[..1].to_vec(), task.queries.clone()).unwrap();
    let b = ttt_batch(&single, &ttt, &Equivariance::none(), &cfg.canvas()).unwrap();
    assert_eq!(b.len(), 3);
    assert_eq!(b[0].slot_features, crate::arc::encode_pair(&single.demos, &single.demos[0].input, None, &cfg.canvas()).unwrap().slot_features);
}

#[test]
fn ttt_zero_steps_is_identity_and_adaptation_lowers_demo_loss() {
    let mut model: LoopVit<f64> = LoopVit::new(tiny_cfg(), 6).unwrap();
    let task = generate_microtask(Family::ColorSwap, 11);
    let eq = Family::ColorSwap.equivariance();
    let off = TttConfig { adaptation_steps: 0, ..Default::default() };
    assert_eq!(ttt_adapt(&model, &task, &off, &eq).unwrap().params, model.params);

    model.params.zero_grad();
    let before = model.params.clone();
    let cfg = TttConfig { adaptation_steps: 10, learning_rate: 3e-3, ..Default::default() };
    let adapted = ttt_adapt(&model, &task, &cfg, &eq).unwrap();
    assert_eq!(model.params, before);
    let batch = ttt_batch(&task, &cfg, &eq, &model.config.canvas()).unwrap();
    assert!(batch_loss(&adapted, &batch).unwrap() < batch_loss(&model, &batch).unwrap());
}

#[test]
fn evaluation_is_order_independent_with_restored_weights() {
    let model: LoopVit<f64> = LoopVit::new(tiny_cfg(), 7).unwrap();
    let tasks = eval_set(Family::ColorSwap, 3);
    let ttt = TttConfig { adaptation_steps: 2, learning_rate: 1e-2, ..Default::default() };
    let policy = HaltPolicy::fixed(2);
    let fwd = evaluate(&model, &tasks, &policy, 2, Some(&ttt)).unwrap();
    let rev_tasks: Vec<_> = tasks.iter().rev().cloned().collect();
    let rev = evaluate(&model, &rev_tasks, &policy, 2, Some(&ttt)).unwrap();
    let mut r = rev.results.clone();
    r.reverse();
    assert_eq!(fwd.results, r);
}

#[test]
fn more_attempts_never_hurt() {
    let mut model: LoopVit<f64> = LoopVit::new(tiny_cfg(), 8).unwrap();
    run(&mut model, &TrainConfig { learning_rate: 3e-3, ..train_cfg(20) }, &[]).unwrap();
    let tasks = eval_set(Family::Identity, 6);
    let policy = HaltPolicy { tau: 0.5, t_min: 1, t_max: 4 };
    let one = evaluate(&model, &tasks, &policy, 1, None).unwrap();
    let two = evaluate(&model, &tasks, &policy, 2, None).unwrap();
    assert!(two.exact_match >= one.exact_match);
    assert_eq!(one.pixel_accuracy, two.pixel_accuracy);
    assert!(two.avg_executed_steps >= 1.0 && two.avg_executed_steps <= 4.0);
    for (a, b) in one.results.iter().zip(&two.results) {
        if a.correct {
            assert_eq!(b.solved_by, Some(1));
        }
        assert_eq!(a.exit_step, b.exit_step);
    }
}

#[test]
fn pixel_accuracy_cases() {
    use crate::arc::Grid;
    let g = Grid::from_rows(&[[1, 2], [3, 4]]).unwrap();
    assert_eq!(pixel_accuracy(&g, &g), 1.0);
    assert_eq!(pixel_accuracy(&Grid::from_rows(&[[1, 0], [3, 0]]).unwrap(), &g), 0.5);
    assert_eq!(pixel_accuracy(&Grid::filled(1, 1, 1).unwrap(), &g), 0.25);
}

#[test]
fn tape_loss_matches_value_helper() {
    let cfg = tiny_cfg();
    let model: LoopVit<f64> = LoopVit::new(cfg.clone(), 9).unwrap();
    let canvas = encode_canvas(&generate_microtask(Family::Gravity, 2), 0, &cfg.canvas()).unwrap();
    let mut tape = Tape::new();
    let pv = model.params.bind_frozen(&mut tape);
    let logits = forward_logits(&model, &mut tape, &pv, &canvas, 2).unwrap();
    let loss = offline_loss(&mut tape, logits, &canvas).unwrap();
    let direct = offline_loss_value(tape.value(logits), &canvas).unwrap();
    assert_eq!(tape.value(loss).data()[0], direct);
    assert_eq!(batch_loss(&model, std::slice::from_ref(&canvas)).unwrap(), direct);
}
