use milsurv_core::gradcheck::small_head_config;
use milsurv_core::heads::{HeadConfig, HeadKind, MilHead};
use milsurv_core::optim::Adam;
use milsurv_core::params::ParamKind;
use milsurv_core::train::{accumulate_slide, slide_loss, train_fold, EarlyStopping, Preset, Sample, TrainConfig};
use milsurv_core::{Gradients, Rng, Tensor};

struct Slide {
    id: String,
    bag: Tensor<f64>,
    bin: usize,
    time: f64,
    censored: bool,
}

fn slides(n: usize, d: usize, signal: f64, rng: &mut Rng) -> Vec<Slide> {
    let direction: Vec<f64> = (0..d).map(|_| rng.normal()).collect();
    let norm = direction.iter().map(|x| x * x).sum::<f64>().sqrt();
    (0..n)
        .map(|i| {
            let risk = rng.normal();
            let m = rng.int_inclusive(3, 9);
            let bag = (0..m * d).map(|k| rng.normal() + signal * risk * direction[k % d] / norm).collect();
            let time = (-rng.uniform().ln()) / (signal * risk).exp() * 30.0;
            let bin = ((time / 10.0) as usize).min(3);
            Slide {
                id: format!("case-{i}"),
                bag: Tensor::new(m, d, bag).unwrap(),
                bin,
                time,
                censored: rng.uniform() < 0.3,
            }
        })
        .collect()
}

fn samples(s: &[Slide]) -> Vec<Sample<'_, f64>> {
    s.iter()
        .map(|s| Sample {
            case_id: &s.id,
            bag: &s.bag,
            bin: s.bin,
            time: s.time,
            censored: s.censored,
        })
        .collect()
}

#[test]
fn accumulated_gradient_equals_gradient_of_mean_loss() {
    for kind in HeadKind::ALL {
        let mut rng = Rng::new(31, 0);
        let head = MilHead::<f64>::new(small_head_config(kind), &mut rng).unwrap();
        let data = slides(32, 16, 1.0, &mut rng);
        let batch = samples(&data);

        let mut accumulated = Gradients::for_params(head.params());
        let mut drop_rng = Rng::new(32, 0);
        for s in &batch {
            accumulate_slide(&head, &mut accumulated, s, 1e-4, 1.0 / 32.0, 1, &mut drop_rng).unwrap();
        }

        let mut tape = head.tape();
        let mut drop_rng = Rng::new(32, 0);
        let mut total = None;
        for s in &batch {
            let x = tape.constant_ref(s.bag);
            let l = slide_loss(&head, &mut tape, x, s.bin, s.censored, 1e-4, true, &mut drop_rng).unwrap();
            total = Some(match total {
                Some(t) => tape.add(t, l).unwrap(),
                None => l,
            });
        }
        let mean = tape.scale(total.unwrap(), 1.0 / 32.0);
        let mut direct = Gradients::for_params(head.params());
        tape.backward(mean, &mut direct).unwrap();

        for id in head.params().ids() {
            for (a, b) in accumulated.get(id).data().iter().zip(direct.get(id).data()) {
                let rel = (a - b).abs() / a.abs().max(b.abs()).max(1e-12);
                assert!(rel < 1e-6 || (a - b).abs() < 1e-15, "{kind} {}: {a} vs {b}", head.params().param(id).name);
            }
        }
    }
}

#[test]
fn l1_term_is_the_sum_of_absolute_weights() {
    let mut rng = Rng::new(40, 0);
    let head = MilHead::<f64>::new(small_head_config(HeadKind::TransMil), &mut rng).unwrap();
    let bag = Tensor::new(5, 16, (0..80).map(|_| rng.normal()).collect()).unwrap();
    let loss_with = |coeff: f64| {
        let mut tape = head.tape();
        let x = tape.constant_ref(&bag);
        let l = slide_loss(&head, &mut tape, x, 1, false, coeff, false, &mut Rng::new(0, 0)).unwrap();
        tape.value(l).item()
    };
    let mut enumerated = 0.0;
    for p in head.params().iter() {
        if p.kind == ParamKind::Weight {
            enumerated += p.value.data().iter().map(|w| w.abs()).sum::<f64>();
        }
    }
    let diff = loss_with(1e-4) - loss_with(0.0);
    assert!((diff - 1e-4 * enumerated).abs() < 1e-12, "{diff} vs {}", 1e-4 * enumerated);
    // Biases, norm parameters and the class token stay out of the penalty.
    assert!(head.params().iter().any(|p| p.kind == ParamKind::Token));
    assert!((head.params().weight_l1() - enumerated).abs() < 1e-9);
}

#[test]
fn early_stopping_trace() {
    for patience in [5, 10] {
        let mut es = EarlyStopping::new(40, patience);
        let mut stopped = None;
        for epoch in 1..=200 {
            let metric = if epoch <= 41 { epoch as f64 / 100.0 } else { 0.3 };
            if es.observe(epoch, metric).1 {
                stopped = Some(epoch);
                break;
            }
        }
        assert_eq!(stopped, Some(41 + patience));
        assert_eq!(es.best(), Some((41, 0.41)));
    }
    // A metric that never improves still runs to the earliest stop epoch.
    let mut es = EarlyStopping::new(40, 10);
    let first_stop = (1..=200).find(|&e| es.observe(e, 0.5).1);
    assert_eq!(first_stop, Some(40));
}

#[test]
fn adam_with_zero_gradient_and_no_decay_keeps_parameters() {
    let mut rng = Rng::new(50, 0);
    let mut head = MilHead::<f64>::new(small_head_config(HeadKind::Abmil), &mut rng).unwrap();
    let before = head.params().clone();
    let grads = Gradients::for_params(head.params());
    let mut adam = Adam::new(head.params(), 1e-3, 0.0);
    for _ in 0..10 {
        adam.step(head.params_mut(), &grads);
    }
    assert_eq!(head.params(), &before);
}

#[test]
fn fold_training_returns_the_best_recorded_epoch() {
    let mut rng = Rng::new(60, 0);
    let data = slides(48, 16, 1.5, &mut rng);
    let all = samples(&data);
    let (train, val) = all.split_at(36);
    let mut config = small_head_config(HeadKind::Mean);
    config.hidden_dim = 16;
    let mut head = MilHead::<f64>::new(config, &mut rng).unwrap();
    let mut cfg = TrainConfig::preset(Preset::Blca).scaled_to(20);
    cfg.learning_rate = 5e-3;
    cfg.grad_accum_steps = 8;
    let out = train_fold(&mut head, train, val, &cfg, &mut Rng::new(61, 0)).unwrap();
    let best = out.log.iter().map(|e| e.val_cindex).fold(f64::NEG_INFINITY, f64::max);
    assert_eq!(out.best_val_cindex, best);
    assert_eq!(out.log[out.best_epoch - 1].val_cindex, best);
    assert!((0.0..=1.0).contains(&best));
    assert_eq!(head.params(), &out.best_params);
    let replay = milsurv_core::train::evaluate(&head, val).unwrap();
    assert_eq!(replay, best);
    assert!(out.stopped_epoch >= cfg.earliest_stop_epoch);
}

#[test]
fn fold_training_is_deterministic() {
    let run = || {
        let mut rng = Rng::new(70, 0);
        let data = slides(24, 16, 1.0, &mut rng);
        let all = samples(&data);
        let mut head = MilHead::<f32>::new(small_head_config(HeadKind::Abmil), &mut rng).unwrap();
        let cast: Vec<Tensor<f32>> = data.iter().map(|s| s.bag.cast()).collect();
        let f32_samples: Vec<Sample<'_, f32>> = all
            .iter()
            .zip(&cast)
            .map(|(s, b)| Sample {
                case_id: s.case_id,
                bag: b,
                bin: s.bin,
                time: s.time,
                censored: s.censored,
            })
            .collect();
        let cfg = TrainConfig::preset(Preset::Luad).scaled_to(5);
        let out = train_fold(&mut head, &f32_samples[..18], &f32_samples[18..], &cfg, &mut Rng::new(71, 0)).unwrap();
        (out.log, out.best_params)
    };
    assert_eq!(run(), run());
}

#[test]
fn non_finite_loss_aborts_with_a_diagnostic() {
    let mut rng = Rng::new(80, 0);
    let mut head = MilHead::<f64>::new(HeadConfig::new(HeadKind::Mean, 4), &mut rng).unwrap();
    let good = Tensor::filled(2, 4, 1.0);
    let bad = Tensor::filled(2, 4, f64::NAN);
    let mk = |id: &'static str, bag: &'static Tensor<f64>, time: f64| Sample {
        case_id: id,
        bag,
        bin: 0,
        time,
        censored: false,
    };
    let good: &'static Tensor<f64> = Box::leak(Box::new(good));
    let bad: &'static Tensor<f64> = Box::leak(Box::new(bad));
    let train = [mk("ok", good, 1.0), mk("broken", bad, 2.0)];
    let val = [mk("v1", good, 1.0), mk("v2", good, 2.0)];
    let mut cfg = TrainConfig::default();
    cfg.grad_accum_steps = 1;
    // The order is shuffled, so the bad slide may come first or second.
    let err = train_fold(&mut head, &train, &val, &cfg, &mut rng).unwrap_err();
    match err {
        milsurv_core::Error::NonFinite { epoch, slide } => {
            assert_eq!(epoch, 1);
            assert_eq!(slide, "broken");
        }
        other => panic!("{other:?}"),
    }
}
