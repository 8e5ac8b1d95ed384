use super::*;
use crate::augment::make_training_batch;
use crate::encoder::ParamKind;
use crate::rng::from_seed;

fn shots(n: usize, side: usize) -> Vec<Image> {
    (0..n)
        .map(|k| {
            Image::from_fn(3, side, side, |c, y, x| {
                let v = ((y * 3 + x * 5 + c * 7 + k * 11) % 17) as f32 / 16.0;
                0.2 + 0.6 * v
            })
        })
        .collect()
}

fn enc() -> EncoderConfig {
    let mut cfg = EncoderConfig::tiny(vec![4, 8], 12);
    cfg.init_seed = 3;
    cfg
}

fn cfg(steps: usize) -> TrainConfig {
    TrainConfig {
        batch_size: 8,
        steps,
        lr: 1e-2,
        ema_beta: 0.9,
        seed: 5,
        ..TrainConfig::default()
    }
}

fn weight_values(net: &OnlineNetwork) -> Vec<(String, Vec<f32>)> {
    net.params()
        .iter()
        .filter(|(_, _, k)| *k == ParamKind::Weight)
        .map(|(n, v, _)| (n.to_string(), v.as_tensor().flatten_all().unwrap().to_vec1().unwrap()))
        .collect()
}

fn all_values<E: Encoder>(net: &E) -> Vec<(String, Vec<f32>)> {
    net.params()
        .iter()
        .map(|(n, v, _)| (n.to_string(), v.as_tensor().flatten_all().unwrap().to_vec1().unwrap()))
        .collect()
}

fn fresh_state(seed: u64) -> TrainState {
    TrainState::new(OnlineNetwork::random(&enc()).unwrap(), seed).unwrap()
}

fn batch(state: &mut TrainState, c: &TrainConfig) -> TrainingBatch {
    next_batch(state, &shots(3, 12), c, &PositivePolicy::natural(), &NegativePolicy::default()).unwrap()
}

#[test]
fn zero_lr_leaves_online_weights_unchanged() {
    let c = TrainConfig { lr: 0.0, ..cfg(1) };
    let mut state = fresh_state(1);
    let before = weight_values(&state.online);
    let b = batch(&mut state, &c);
    training_step(&mut state, &b, &c).unwrap();
    assert_eq!(weight_values(&state.online), before);
    assert_eq!(state.step, 1);
    assert_eq!(state.history.len(), 1);
}

#[test]
fn target_moves_only_by_ema() {
    let c = cfg(1);
    let mut state = fresh_state(2);
    for _ in 0..2 {
        let b = batch(&mut state, &c);
        let target_before = all_values(&state.target);
        training_step(&mut state, &b, &c).unwrap();
        let online_after: BTreeMap<_, _> = all_values(&state.online).into_iter().collect();
        for (name, after) in all_values(&state.target) {
            let pre = &target_before.iter().find(|(n, _)| *n == name).unwrap().1;
            let on = &online_after[&name];
            for i in 0..after.len() {
                let want = c.ema_beta * f64::from(pre[i]) + (1.0 - c.ema_beta) * f64::from(on[i]);
                assert!((f64::from(after[i]) - want).abs() <= 1e-7, "{name}[{i}]");
            }
        }
    }
}

#[test]
fn disabling_np_zeroes_its_term() {
    let c = TrainConfig {
        use_np_loss: false,
        ..cfg(1)
    };
    let mut state = fresh_state(3);
    let b = batch(&mut state, &c);
    let l = training_step(&mut state, &b, &c).unwrap();
    assert_eq!(l.l_np, 0.0);
    assert_eq!(l.l_total, l.l_con + 0.8 * l.l_pp);
}

#[test]
fn training_is_deterministic() {
    let run = || {
        let c = cfg(3);
        train(&shots(3, 12), &c, &enc(), &PositivePolicy::natural(), &NegativePolicy::default())
            .unwrap()
    };
    let (a, b) = (run(), run());
    let bits = |h: &[LossBreakdown]| {
        h.iter()
            .flat_map(|l| [l.l_con, l.l_pp, l.l_np, l.l_total].map(f64::to_bits))
            .collect::<Vec<_>>()
    };
    assert_eq!(bits(&a.history), bits(&b.history));
    assert_eq!(all_values(&a.online), all_values(&b.online));
}

#[test]
fn first_step_contrastive_term_matches_standalone_forward() {
    let c = TrainConfig {
        weights: LossWeights {
            lambda_pp: 0.0,
            lambda_np: 0.0,
        },
        symmetric_contrastive: false,
        ..cfg(1)
    };
    let images = shots(3, 12);
    let mut state = fresh_state(4);
    let b = make_training_batch(
        &images,
        8,
        &PositivePolicy::identity(),
        &NegativePolicy::identity(),
        &mut from_seed(9),
    )
    .unwrap();
    let refs: Vec<&Image> = b.originals.iter().collect();
    let x = state.online.input_tensor(&refs).unwrap();
    let mode = NormMode::Batch { update: false };
    let q = state.online.forward(&x, Depth::Predicted, mode, false).unwrap();
    let z = state.target.forward(&x, Depth::Projected, mode, false).unwrap();
    let expected = losses::scalar(&losses::contrastive_loss(&q, &z).unwrap()).unwrap();
    let l = training_step(&mut state, &b, &c).unwrap();
    assert!((l.l_con - expected).abs() <= 1e-6, "{} vs {expected}", l.l_con);
    assert_eq!(l.l_total, l.l_con);
}

#[test]
fn target_parameters_receive_no_gradient() {
    let c = cfg(1);
    let mut state = fresh_state(6);
    let b = batch(&mut state, &c);
    let (total, _) = batch_losses(&state.online, &state.target, &b, &c).unwrap();
    let grads = total.backward().unwrap();
    for (name, var, _) in state.target.params().iter() {
        assert!(grads.get(var.as_tensor()).is_none(), "{name} has a gradient");
    }
    let with_grad = state
        .online
        .params()
        .weights()
        .filter(|(_, v)| grads.get(v.as_tensor()).is_some())
        .count();
    assert_eq!(with_grad, state.online.params().weights().count());
}

#[test]
fn non_finite_loss_aborts_with_term_dump() {
    let c = cfg(1);
    let mut state = fresh_state(7);
    let name = "predictor.3.bias";
    let w = state.online.params().var(name).unwrap().as_tensor().ones_like().unwrap();
    state.online.params().set(name, &(w * f64::NAN).unwrap()).unwrap();
    let b = batch(&mut state, &c);
    match training_step(&mut state, &b, &c) {
        Err(Error::Numerical(msg)) => {
            assert!(msg.contains("l_con=") && msg.contains("l_pp=") && msg.contains("l_np="));
        }
        other => panic!("expected numerical failure, got {other:?}"),
    }
    assert_eq!(state.step, 0);
}

#[test]
fn empty_few_shot_set_is_rejected() {
    let r = train(&[], &cfg(1), &enc(), &PositivePolicy::natural(), &NegativePolicy::default());
    assert!(matches!(r, Err(Error::Data(_))));
}

#[test]
fn zero_steps_keeps_pretrained_backbone_and_two_steps_log_two_rows() {
    let dir = tempfile::tempdir().unwrap();
    let pre = OnlineNetwork::random(&EncoderConfig {
        init_seed: 77,
        ..enc()
    })
    .unwrap();
    let ckpt = dir.path().join("pre.safetensors");
    pre.params().subset("backbone.").unwrap().save_safetensors(&ckpt).unwrap();
    let mut e = enc();
    e.pretrained_checkpoint = Some(ckpt);

    let out0 = dir.path().join("zero");
    train_to_dir(&shots(2, 12), &cfg(0), &e, &PositivePolicy::natural(), &NegativePolicy::default(), &out0)
        .unwrap();
    let (loaded, meta) = checkpoint::load(&out0).unwrap();
    assert_eq!(meta.steps, 0);
    let backbone = |net: &OnlineNetwork| {
        all_values(net)
            .into_iter()
            .filter(|(n, _)| n.starts_with("backbone."))
            .collect::<Vec<_>>()
    };
    assert_eq!(backbone(&loaded), backbone(&pre));
    assert!(read_train_log(&out0.join(TRAIN_LOG_FILE)).unwrap().is_empty());

    let out2 = dir.path().join("two");
    let state = train_to_dir(
        &shots(2, 12),
        &cfg(2),
        &e,
        &PositivePolicy::natural(),
        &NegativePolicy::default(),
        &out2,
    )
    .unwrap();
    let log = read_train_log(&out2.join(TRAIN_LOG_FILE)).unwrap();
    assert_eq!(log.len(), 2);
    assert_eq!(log, state.history);
    assert!(out2.join(RUN_META_FILE).exists());
}

#[test]
fn adam_first_step_matches_closed_form() {
    // With bias correction the first Adam step moves each weight by
    // lr·g/(|g| + eps'), i.e. almost exactly lr·sign(g).
    let c = TrainConfig {
        lr: 0.01,
        ..cfg(1)
    };
    let mut state = fresh_state(8);
    let b = batch(&mut state, &c);
    let before = weight_values(&state.online);
    let (total, _) = batch_losses(&state.online, &state.target, &b, &c).unwrap();
    let grads = total.backward().unwrap();
    let g: BTreeMap<String, Vec<f32>> = state
        .online
        .params()
        .weights()
        .map(|(n, v)| (n.to_string(), grads.get(v.as_tensor()).unwrap().flatten_all().unwrap().to_vec1().unwrap()))
        .collect();
    state.optimizer.step(&state.online, &grads, &c).unwrap();
    for ((name, after), (_, pre)) in weight_values(&state.online).into_iter().zip(before) {
        for i in 0..pre.len() {
            let gi = f64::from(g[&name][i]);
            let want = f64::from(pre[i]) - c.lr * gi / (gi.abs() + c.adam_eps);
            assert!((f64::from(after[i]) - want).abs() <= 1e-6, "{name}[{i}]");
        }
    }
}

#[test]
fn total_loss_trends_down_on_synthetic_shots() {
    use crate::data::synth::{render_normal, SynthSpec};
    let spec = SynthSpec::default();
    let fewshot: Vec<Image> = (0..5)
        .map(|i| render_normal(&spec, &mut crate::rng::stream(0, "trend", i)))
        .collect();
    let enc = EncoderConfig::tiny(vec![8, 16], 16);
    let c = TrainConfig {
        batch_size: 16,
        steps: 200,
        ..TrainConfig::default()
    };
    let mut totals = Vec::new();
    train_with(&fewshot, &c, &enc, &PositivePolicy::natural(), &NegativePolicy::default(), |_, l| {
        totals.push(l.l_total);
        Ok(())
    })
    .unwrap();
    let windows: Vec<f64> = totals.chunks(50).map(|w| w.iter().sum::<f64>() / w.len() as f64).collect();
    assert_eq!(windows.len(), 4);
    assert!(windows.windows(2).all(|p| p[1] < p[0]), "{windows:?}");
}
