use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::rope::{rope, RopeTables};
use super::*;
use crate::arc::{encode_canvas, encode_pair, Canvas, Example, Grid, TaskInstance};
use crate::error::Error;
use crate::tensor::{Tape, Tensor, Var};

fn cfg(d: usize, heads: usize, t_train: usize) -> LoopVitConfig {
    LoopVitConfig {
        d,
        heads,
        t_train,
        t_max: t_train.max(1) * 2,
        n_task_tokens: 2,
        canvas_h: 4,
        canvas_w: 5,
        ..Default::default()
    }
}

fn canvas_for(c: &LoopVitConfig, seed: u64) -> Canvas {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut g = || Grid::from_fn(3, 3, |_, _| rng.random_range(0..10)).unwrap();
    let demos = vec![Example { input: g(), output: g() }, Example { input: g(), output: g() }];
    let (q, a) = (g(), g());
    encode_pair(&demos, &q, Some(&a), &c.canvas()).unwrap()
}

fn randomize(model: &mut LoopVit<f64>, seed: u64, scale: f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for t in model.params.values_mut() {
        for x in t.data_mut() {
            *x += rng.random_range(-scale..scale);
        }
    }
}

fn state_of(model: &LoopVit<f64>, canvas: &Canvas, steps: usize) -> Vec<f64> {
    let mut tape = Tape::new();
    let pv = model.params.bind_frozen(&mut tape);
    let layout = model.layout(canvas).unwrap();
    let z0 = model.embed(&mut tape, &pv, canvas).unwrap();
    let (z, _) = model.loop_forward(&mut tape, &pv, z0, steps, &layout, TraceOptions::default()).unwrap();
    tape.value(z).data().to_vec()
}

#[test]
fn embed_locality_and_determinism() {
    let c = cfg(8, 2, 2);
    let model: LoopVit<f64> = LoopVit::new(c.clone(), 1).unwrap();
    let canvas = canvas_for(&c, 2);
    let mut other = canvas.clone();
    let k = c.n_task_tokens + 6;
    other.tokens[k] = (other.tokens[k] + 1) % 10;
    let z0 = |cv: &Canvas| {
        let mut tape = Tape::new();
        let pv = model.params.bind_frozen(&mut tape);
        let z = model.embed(&mut tape, &pv, cv).unwrap();
        tape.value(z).clone()
    };
    let (a, b) = (z0(&canvas), z0(&other));
    assert_eq!(a.shape(), &[c.tokens(), c.d]);
    let differing: Vec<usize> = (0..c.tokens()).filter(|&r| a.row(r) != b.row(r)).collect();
    assert_eq!(differing, vec![k]);
    assert_eq!(z0(&canvas), a);
}

#[test]
fn embed_rejects_mismatched_canvas() {
    let c = cfg(8, 2, 2);
    let model: LoopVit<f64> = LoopVit::new(c.clone(), 1).unwrap();
    let wrong = canvas_for(&LoopVitConfig { canvas_h: 5, ..c.clone() }, 2);
    let mut tape = Tape::new();
    let pv = model.params.bind_frozen(&mut tape);
    assert!(model.embed(&mut tape, &pv, &wrong).is_err());
    let mut bad = canvas_for(&c, 2);
    *bad.tokens.last_mut().unwrap() = 11;
    assert!(matches!(model.embed(&mut tape, &pv, &bad), Err(Error::Dimension { .. })));
}

#[test]
fn step_embedding_clamps() {
    let c = cfg(8, 2, 12);
    let mut model: LoopVit<f64> = LoopVit::new(c, 1).unwrap();
    randomize(&mut model, 3, 1.0);
    assert_eq!(model.step_embedding_values(12).unwrap(), model.step_embedding_values(15).unwrap());
    let e1 = model.step_embedding_values(1).unwrap();
    assert_eq!(e1, model.params.step_embed.row(0));
    assert!(e1.iter().any(|&x| x != 0.0));
    for t in 1..12 {
        assert_ne!(model.step_embedding_values(t).unwrap(), model.step_embedding_values(t + 1).unwrap());
    }
    assert!(matches!(model.step_embedding_values(0), Err(Error::Contract(_))));
}

#[test]
fn head_dim_must_split_into_axes() {
    let bad = LoopVitConfig { d: 12, heads: 2, ..cfg(8, 2, 2) };
    assert!(matches!(LoopVit::<f32>::new(bad, 0), Err(Error::Config(_))));
}

#[test]
fn single_token_attention_is_value_projection() {
    let c = LoopVitConfig {
        n_task_tokens: 0,
        canvas_h: 1,
        canvas_w: 1,
        ..cfg(8, 2, 1)
    };
    let mut model: LoopVit<f64> = LoopVit::new(c.clone(), 4).unwrap();
    randomize(&mut model, 5, 0.5);
    let canvas = encode_pair(&[], &Grid::filled(1, 1, 3).unwrap(), None, &c.canvas()).unwrap();
    let mut tape = Tape::new();
    let pv = model.params.bind_frozen(&mut tape);
    let layout = model.layout(&canvas).unwrap();
    let z = tape.constant(Tensor::from_fn(&[1, 8], |i| i as f64 * 0.1 - 0.3));
    let (out, attn) = model.mhsa(&mut tape, &pv.layers[0], z, &layout).unwrap();
    assert!(tape.attention_probs(attn).unwrap().iter().all(|&p| p == 1.0));
    let v = tape.matmul(z, pv.layers[0].wv).unwrap();
    let want = tape.matmul(v, pv.layers[0].wo).unwrap();
    for (a, b) in tape.value(out).data().iter().zip(tape.value(want).data()) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn mhsa_matches_pairwise_oracle() {
    let c = cfg(16, 2, 1);
    let mut model: LoopVit<f64> = LoopVit::new(c.clone(), 6).unwrap();
    randomize(&mut model, 7, 0.3);
    let canvas = canvas_for(&c, 8);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let m = c.tokens();
    let zt = Tensor::from_fn(&[m, c.d], |_| rng.random_range(-1.0..1.0));
    let mut tape = Tape::new();
    let pv = model.params.bind_frozen(&mut tape);
    let layout = model.layout(&canvas).unwrap();
    let z = tape.constant(zt.clone());
    let (out, _) = model.mhsa(&mut tape, &pv.layers[0], z, &layout).unwrap();

    let l = &model.params.layers[0];
    let proj = |w: &Tensor<f64>| -> Vec<Vec<f64>> {
        (0..m)
            .map(|i| (0..c.d).map(|j| (0..c.d).map(|k| zt.row(i)[k] * w.data()[k * c.d + j]).sum()).collect())
            .collect()
    };
    let (q, k, v) = (proj(&l.wq), proj(&l.wk), proj(&l.wv));
    let dh = c.head_dim();
    let mut concat = vec![vec![0.0; c.d]; m];
    for h in 0..c.heads {
        let sl = |x: &Vec<f64>| x[h * dh..(h + 1) * dh].to_vec();
        let qr: Vec<Vec<f64>> = (0..m).map(|i| rope(&sl(&q[i]), canvas.coords[i], c.rope_base)).collect();
        let kr: Vec<Vec<f64>> = (0..m).map(|i| rope(&sl(&k[i]), canvas.coords[i], c.rope_base)).collect();
        for i in 0..m {
            let scores: Vec<f64> = (0..m)
                .map(|j| qr[i].iter().zip(&kr[j]).map(|(a, b)| a * b).sum::<f64>() / (dh as f64).sqrt())
                .collect();
            let mx = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = scores.iter().map(|s| (s - mx).exp()).collect();
            let z: f64 = e.iter().sum();
            for j in 0..m {
                for t in 0..dh {
                    concat[i][h * dh + t] += e[j] / z * v[j][h * dh + t];
                }
            }
        }
    }
    for i in 0..m {
        for j in 0..c.d {
            let want: f64 = (0..c.d).map(|k| concat[i][k] * l.wo.data()[k * c.d + j]).sum();
            assert!((tape.value(out).row(i)[j] - want).abs() < 1e-10);
        }
    }
}

fn gate_values(model: &LoopVit<f64>, canvas: &Canvas, z: &Tensor<f64>) -> Tensor<f64> {
    let mut tape = Tape::new();
    let pv = model.params.bind_frozen(&mut tape);
    let layout = model.layout(canvas).unwrap();
    let zv = tape.constant(z.clone());
    let g = model.conv_gate(&mut tape, &pv.layers[0], zv, &layout).unwrap();
    tape.value(g).clone()
}

#[test]
fn identity_kernel_reduces_to_plain_glu() {
    let c = cfg(8, 2, 1);
    let mut model: LoopVit<f64> = LoopVit::new(c.clone(), 10).unwrap();
    randomize(&mut model, 11, 0.3);
    let f = c.ffn_inner();
    let l = &mut model.params.layers[0];
    l.dw_kernel = Tensor::from_fn(&[f, 3, 3], |i| if i % 9 == 4 { 1.0 } else { 0.0 });
    l.dw_bias = Tensor::zeros(&[f]);
    let canvas = canvas_for(&c, 12);
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let zt = Tensor::from_fn(&[c.tokens(), c.d], |_| rng.random_range(-1.0..1.0));
    let mut tape = Tape::new();
    let pv = model.params.bind_frozen(&mut tape);
    let layout = model.layout(&canvas).unwrap();
    let z = tape.constant(zt);
    let out = model.convglu(&mut tape, &pv.layers[0], z, &layout).unwrap();
    let l = &pv.layers[0];
    let h = tape.linear(z, l.w1, Some(l.b1)).unwrap();
    let gate = tape.slice_cols(h, 0, f).unwrap();
    let val = tape.slice_cols(h, f, 2 * f).unwrap();
    let act = tape.silu(gate);
    let mixed = tape.mul(act, val).unwrap();
    let plain = tape.linear(mixed, l.w2, Some(l.b2)).unwrap();
    assert_eq!(tape.value(out).data(), tape.value(plain).data());
}

#[test]
fn task_gates_bypass_the_convolution() {
    let c = cfg(8, 2, 1);
    let mut model: LoopVit<f64> = LoopVit::new(c.clone(), 14).unwrap();
    randomize(&mut model, 15, 0.3);
    let canvas = canvas_for(&c, 16);
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let zt = Tensor::from_fn(&[c.tokens(), c.d], |_| rng.random_range(-1.0..1.0));
    let before = gate_values(&model, &canvas, &zt);
    let mut changed = model.clone();
    randomize(&mut changed, 18, 1.0);
    changed.params.layers[0].w1 = model.params.layers[0].w1.clone();
    changed.params.layers[0].b1 = model.params.layers[0].b1.clone();
    let after = gate_values(&changed, &canvas, &zt);
    let n = c.n_task_tokens;
    for r in 0..n {
        assert_eq!(before.row(r), after.row(r));
    }
    assert_ne!(before.row(n), after.row(n));

    // and the gradient of the TASK gate rows w.r.t. the kernel is zero
    let mut tape = Tape::new();
    let pv = model.params.bind(&mut tape);
    let layout = model.layout(&canvas).unwrap();
    let z = tape.constant(zt);
    let g = model.conv_gate(&mut tape, &pv.layers[0], z, &layout).unwrap();
    let task = tape.slice_rows(g, 0, n).unwrap();
    let s = tape.sum(task);
    let grads = tape.backward(s).unwrap();
    assert!(grads.get(pv.layers[0].dw_kernel).unwrap_or(&[]).iter().all(|&x| x == 0.0));
}

#[test]
fn conv_receptive_field_is_three_by_three() {
    let c = cfg(8, 2, 1);
    let mut model: LoopVit<f64> = LoopVit::new(c.clone(), 19).unwrap();
    randomize(&mut model, 20, 0.3);
    let canvas = canvas_for(&c, 21);
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let zt = Tensor::from_fn(&[c.tokens(), c.d], |_| rng.random_range(-1.0..1.0));
    let base = gate_values(&model, &canvas, &zt);
    let n = c.n_task_tokens;
    let (pr, pc) = (2usize, 1usize);
    let mut poked = zt.clone();
    let row = n + pr * c.canvas_w + pc;
    for j in 0..c.d {
        poked.data_mut()[row * c.d + j] += 0.5;
    }
    let after = gate_values(&model, &canvas, &poked);
    for r in 0..c.tokens() {
        let changed = base.row(r) != after.row(r);
        let expect = r >= n && {
            let (i, j) = ((r - n) / c.canvas_w, (r - n) % c.canvas_w);
            i.abs_diff(pr) <= 1 && j.abs_diff(pc) <= 1
        };
        assert_eq!(changed, expect, "token {r}");
    }
}

fn zero_projections(model: &mut LoopVit<f64>) {
    for l in &mut model.params.layers {
        for t in [&mut l.wq, &mut l.wk, &mut l.wv, &mut l.wo, &mut l.w1, &mut l.b1, &mut l.dw_bias, &mut l.w2, &mut l.b2] {
            t.data_mut().iter_mut().for_each(|x| *x = 0.0);
        }
    }
}

#[test]
fn zero_weights_give_pure_residual() {
    let c = cfg(8, 2, 3);
    let mut model: LoopVit<f64> = LoopVit::new(c.clone(), 23).unwrap();
    randomize(&mut model, 24, 0.5);
    zero_projections(&mut model);
    let canvas = canvas_for(&c, 25);
    let mut rng = ChaCha8Rng::seed_from_u64(26);
    let zt = Tensor::from_fn(&[c.tokens(), c.d], |_| rng.random_range(-1.0..1.0));
    let mut tape = Tape::new();
    let pv = model.params.bind_frozen(&mut tape);
    let layout = model.layout(&canvas).unwrap();
    let z = tape.constant(zt.clone());
    let (out, _) = model.layer_forward(&mut tape, &pv.layers[0], z, &layout).unwrap();
    assert_eq!(tape.value(out).data(), zt.data());

    // the loop degenerates to adding each step embedding in turn
    let z0 = model.embed(&mut tape, &pv, &canvas).unwrap();
    let mut want = tape.value(z0).data().to_vec();
    let steps = 5;
    for t in 1..=steps {
        let e = model.step_embedding_values(t).unwrap();
        for (i, w) in want.iter_mut().enumerate() {
            *w += e[i % c.d];
        }
    }
    assert_eq!(state_of(&model, &canvas, steps), want);
}

#[test]
fn layer_is_stable_and_differentiable() {
    let c = cfg(8, 2, 1);
    let mut model: LoopVit<f64> = LoopVit::new(c.clone(), 27).unwrap();
    randomize(&mut model, 28, 0.3);
    let canvas = canvas_for(&c, 29);
    let layout = model.layout(&canvas).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(30);
    let zt = Tensor::from_fn(&[c.tokens(), c.d], |_| rng.random_range(-10.0..10.0)).with_grad();
    let w = Tensor::from_fn(&[c.tokens(), c.d], |_| rng.random_range(-1.0..1.0));
    let loss = |z: &Tensor<f64>| -> (f64, Option<Vec<f64>>) {
        let mut tape = Tape::new();
        let pv = model.params.bind_frozen(&mut tape);
        let zv = tape.leaf(z);
        let (out, _) = model.layer_forward(&mut tape, &pv.layers[0], zv, &layout).unwrap();
        assert!(tape.value(out).all_finite());
        let wv = tape.constant(w.clone());
        let p = tape.mul(out, wv).unwrap();
        let l = tape.sum(p);
        let g = tape.backward(l).unwrap().get(zv).map(|g| g.to_vec());
        (tape.value(l).data()[0], g)
    };
    let (_, g) = loss(&zt);
    let g = g.unwrap();
    let h = 1e-5;
    for idx in (0..zt.numel()).step_by(7) {
        let mut p = zt.clone();
        p.data_mut()[idx] += h;
        let mut m = zt.clone();
        m.data_mut()[idx] -= h;
        let num = (loss(&p).0 - loss(&m).0) / (2.0 * h);
        assert!((num - g[idx]).abs() <= 1e-5 * num.abs().max(1.0), "{idx}: {num} vs {}", g[idx]);
    }
}

#[test]
fn loop_composition_and_base_case() {
    let c = cfg(8, 2, 2);
    let mut model: LoopVit<f64> = LoopVit::new(c.clone(), 31).unwrap();
    randomize(&mut model, 32, 0.2);
    let canvas = canvas_for(&c, 33);
    let mut tape = Tape::new();
    let pv = model.params.bind_frozen(&mut tape);
    let layout = model.layout(&canvas).unwrap();
    let z0 = model.embed(&mut tape, &pv, &canvas).unwrap();
    let e1 = model.step_embedding(&mut tape, &pv, 1).unwrap();
    let zin = tape.add_row(z0, e1).unwrap();
    let (manual, _) = model.trunk(&mut tape, &pv, zin, &layout).unwrap();
    let (one, trace) = model.loop_forward(&mut tape, &pv, z0, 1, &layout, TraceOptions::default()).unwrap();
    assert_eq!(tape.value(one).data(), tape.value(manual).data());
    assert_eq!(trace.len(), 1);
    assert!(trace[0].logits.is_some());

    let (four, _) = model.loop_forward(&mut tape, &pv, z0, 4, &layout, TraceOptions::default()).unwrap();
    let mut z = z0;
    for t in 1..=4 {
        z = model.loop_step(&mut tape, &pv, z, t, &layout, TraceOptions::default()).unwrap().state;
    }
    assert_eq!(tape.value(four).data(), tape.value(z).data());
}

#[test]
fn head_shape_uniformity_and_purity() {
    let c = cfg(8, 2, 2);
    let mut model: LoopVit<f64> = LoopVit::new(c.clone(), 34).unwrap();
    randomize(&mut model, 35, 0.2);
    let canvas = canvas_for(&c, 36);
    let mut tape = Tape::new();
    let pv = model.params.bind_frozen(&mut tape);
    let layout = model.layout(&canvas).unwrap();
    let z0 = model.embed(&mut tape, &pv, &canvas).unwrap();
    let opts = TraceOptions { logits: true, attention: true };
    let (_, trace) = model.loop_forward(&mut tape, &pv, z0, 3, &layout, opts).unwrap();
    for s in &trace {
        let inside = tape.value(s.logits.unwrap()).clone();
        assert_eq!(inside.shape(), &[c.tokens(), c.n_classes]);
        let again = model.head(&mut tape, &pv, s.state).unwrap();
        assert_eq!(tape.value(again), &inside);
        assert_eq!(s.attention.len(), c.blocks);
    }
    let mut zeroed = model.clone();
    zeroed.params.head_w = Tensor::zeros(&[c.d, c.n_classes]);
    zeroed.params.head_b = Tensor::zeros(&[c.n_classes]);
    let logits = zeroed.predict_logits(&canvas, 2).unwrap();
    let probs = crate::halting::image_probs(&logits, c.n_task_tokens).unwrap();
    assert!(probs.iter().all(|&p| (p - 1.0 / 11.0).abs() < 1e-15));
}

#[test]
fn parameter_count_is_independent_of_depth() {
    let c = cfg(8, 2, 2);
    let model: LoopVit<f64> = LoopVit::new(c.clone(), 37).unwrap();
    let canvas = canvas_for(&c, 38);
    let count = model.param_count();
    assert_eq!(count, param_count(&c));
    let before = model.params.clone();
    for t in [1, 2, 8] {
        model.predict_logits(&canvas, t).unwrap();
        assert_eq!(model.param_count(), count);
    }
    assert_eq!(model.params, before);
    let stacked = |l| param_count(&LoopVitConfig { mode: Mode::Stacked, blocks: l, ..c.clone() });
    assert_eq!(stacked(3) - stacked(2), stacked(2) - stacked(1));
}

#[test]
fn stacked_matches_looped_with_copied_weights() {
    let looped_cfg = cfg(8, 2, 3);
    let mut looped: LoopVit<f64> = LoopVit::new(looped_cfg.clone(), 39).unwrap();
    randomize(&mut looped, 40, 0.2);
    looped.params.step_embed = Tensor::zeros(&[3, 8]);
    let canvas = canvas_for(&looped_cfg, 41);
    for l in [1, 3] {
        let sc = LoopVitConfig { mode: Mode::Stacked, blocks: l, ..looped_cfg.clone() };
        let mut params = looped.params.clone();
        params.step_embed = Tensor::zeros(&[0, 8]);
        params.layers = vec![looped.params.layers[0].clone(); l];
        let stacked = LoopVit::from_parts(sc, params).unwrap();
        assert_eq!(stacked.predict_logits(&canvas, 1).unwrap(), looped.predict_logits(&canvas, l).unwrap());
    }
    let mut tape = Tape::new();
    let pv = looped.params.bind_frozen(&mut tape);
    let layout = looped.layout(&canvas).unwrap();
    let z0 = looped.embed(&mut tape, &pv, &canvas).unwrap();
    assert!(looped.stacked_forward(&mut tape, &pv, z0, &layout).is_err());
}

fn model_loss(model: &LoopVit<f64>, canvas: &Canvas, steps: usize) -> f64 {
    let mut tape = Tape::new();
    let pv = model.params.bind_frozen(&mut tape);
    let logits = crate::train::forward_logits(model, &mut tape, &pv, canvas, steps).unwrap();
    let loss = crate::train::offline_loss(&mut tape, logits, canvas).unwrap();
    tape.value(loss).data()[0]
}

#[test]
fn end_to_end_gradient_matches_finite_differences() {
    let c = LoopVitConfig {
        canvas_h: 3,
        canvas_w: 3,
        ..cfg(8, 2, 3)
    };
    let mut model: LoopVit<f64> = LoopVit::new(c.clone(), 42).unwrap();
    randomize(&mut model, 43, 0.3);
    let task = TaskInstance::new(
        vec![Example {
            input: Grid::from_rows(&[[1, 2], [0, 3]]).unwrap(),
            output: Grid::from_rows(&[[2, 1], [3, 0]]).unwrap(),
        }],
        vec![crate::arc::Query {
            input: Grid::from_rows(&[[4, 0], [5, 6]]).unwrap(),
            expected: Some(Grid::from_rows(&[[0, 4, 1], [6, 5, 1]]).unwrap()),
        }],
    )
    .unwrap();
    let canvas = encode_canvas(&task, 0, &c.canvas()).unwrap();
    model.params.zero_grad();
    crate::train::accumulate_batch(&mut model, std::slice::from_ref(&canvas), 3).unwrap();
    let h = 1e-5;
    let n_tensors = model.params.values_mut().len();
    for ti in 0..n_tensors {
        let analytic = model.params.values_mut()[ti].grad().unwrap().to_vec();
        let mut numeric = vec![0.0; analytic.len()];
        for (j, num) in numeric.iter_mut().enumerate() {
            let mut p = model.clone();
            p.params.values_mut()[ti].data_mut()[j] += h;
            let mut m = model.clone();
            m.params.values_mut()[ti].data_mut()[j] -= h;
            *num = (model_loss(&p, &canvas, 3) - model_loss(&m, &canvas, 3)) / (2.0 * h);
        }
        let diff = analytic.iter().zip(&numeric).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let scale = analytic.iter().map(|a| a * a).sum::<f64>().sqrt().max(1e-8);
        assert!(diff / scale < 1e-4, "tensor {ti}: relative error {}", diff / scale);
    }
    // supervision at the last step still reaches the first step embedding
    assert!(model.params.step_embed.grad().unwrap()[..8].iter().any(|&g| g != 0.0));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn embed_shape_follows_config(heads in 1usize..3, dm in 1usize..3, h in 1usize..5, w in 1usize..5, n_task in 0usize..4) {
        let d = heads * 4 * dm;
        let c = LoopVitConfig { d, heads, t_train: 1, n_task_tokens: n_task, canvas_h: h, canvas_w: w, ..Default::default() };
        let model: LoopVit<f32> = LoopVit::new(c.clone(), 0).unwrap();
        let demos = vec![Example { input: Grid::filled(1, 1, 1).unwrap(), output: Grid::filled(1, 1, 2).unwrap() }];
        let canvas = encode_pair(&demos, &Grid::filled(1, 1, 3).unwrap(), None, &c.canvas()).unwrap();
        let mut tape = Tape::new();
        let pv = model.params.bind_frozen(&mut tape);
        let z: Var = model.embed(&mut tape, &pv, &canvas).unwrap();
        prop_assert_eq!(tape.shape(z), &[n_task + h * w, d]);
    }

    #[test]
    fn rope_is_an_isometry_with_relative_scores(
        seed in any::<u64>(), r in 0usize..30, c in 0usize..30, r2 in 0usize..30, c2 in 0usize..30, s in 0usize..30, u in 0usize..30
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let q: Vec<f64> = (0..16).map(|_| rng.random_range(-1.0..1.0)).collect();
        let k: Vec<f64> = (0..16).map(|_| rng.random_range(-1.0..1.0)).collect();
        let norm = |x: &[f64]| x.iter().map(|v| v * v).sum::<f64>().sqrt();
        prop_assert!((norm(&rope(&q, (r, c), 1e4)) - norm(&q)).abs() < 1e-6);
        let dot = |a: Vec<f64>, b: Vec<f64>| a.iter().zip(&b).map(|(x, y)| x * y).sum::<f64>();
        let base = dot(rope(&q, (r, c), 1e4), rope(&k, (r2, c2), 1e4));
        let shifted = dot(rope(&q, (r + s, c + u), 1e4), rope(&k, (r2 + s, c2 + u), 1e4));
        prop_assert!((base - shifted).abs() < 1e-6);
    }
}

#[test]
fn rope_tables_match_per_vector_rotation() {
    let coords = [(0, 0), (2, 3), (5, 1)];
    let t: RopeTables<f64> = RopeTables::new(&coords, 16, 2, 1e4);
    let mut tape = Tape::new();
    let x = Tensor::from_fn(&[3, 16], |i| (i as f64 * 0.37).sin());
    let xv = tape.constant(x.clone());
    let y = tape.rotate_pairs(xv, t.cos.clone(), t.sin.clone()).unwrap();
    for (i, &coord) in coords.iter().enumerate() {
        for h in 0..2 {
            let want = rope(&x.row(i)[h * 8..(h + 1) * 8], coord, 1e4);
            let got = &tape.value(y).row(i)[h * 8..(h + 1) * 8];
            for (a, b) in got.iter().zip(&want) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }
}
