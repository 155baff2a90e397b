use milsurv_core::survival::{concordance_index, nll_loss, risk_score, SurvivalOutput, DEFAULT_EPS};
use milsurv_core::{Error, Gradients, ParamKind, ParamStore, Rng, Tape, Tensor};
use proptest::prelude::*;

/// Direct O(n²) enumeration; `None` when no pair is comparable.
fn brute_force(risks: &[f64], times: &[f64], censored: &[bool]) -> Option<f64> {
    let (mut credit, mut pairs) = (0.0, 0usize);
    for i in 0..risks.len() {
        for j in 0..risks.len() {
            if !censored[i] && times[i] < times[j] {
                pairs += 1;
                if risks[i] > risks[j] {
                    credit += 1.0;
                } else if risks[i] == risks[j] {
                    credit += 0.5;
                }
            }
        }
    }
    (pairs > 0).then(|| credit / pairs as f64)
}

fn nll_by_hand(logits: &[f64], bin: usize, censored: bool) -> f64 {
    let eps = 1e-7;
    let clamp = |x: f64| x.max(eps).min(1.0 - eps);
    let mut hazards = Vec::new();
    for &z in logits {
        hazards.push(1.0 / (1.0 + (-z).exp()));
    }
    let mut surv = Vec::new();
    let mut running = 1.0;
    for h in &hazards {
        running *= 1.0 - h;
        surv.push(running);
    }
    if censored {
        -clamp(surv[bin]).ln()
    } else {
        let before = if bin == 0 { 1.0 } else { clamp(surv[bin - 1]) };
        -(before.ln() + clamp(hazards[bin]).ln())
    }
}

fn nll(logits: &[f64], bin: usize, censored: bool) -> Result<f64, Error> {
    let store = ParamStore::<f64>::new();
    let mut tape = Tape::new(&store);
    let z = tape.constant(Tensor::from_f64(1, logits.len(), logits)?);
    let l = nll_loss(&mut tape, z, bin, censored, DEFAULT_EPS)?;
    Ok(tape.value(l).item())
}

#[test]
fn worked_nll_examples() {
    let a = nll(&[0.0, 0.3, -0.2, 0.1], 0, false).unwrap();
    assert!((a - 2f64.ln()).abs() < 1e-10, "{a}");

    let b = nll(&[-1e3; 4], 3, true).unwrap();
    assert!((b - -(1.0f64 - 1e-7).ln()).abs() < 1e-10, "{b}");

    let logits = [0.2, -0.1, 0.4, 0.0];
    let c = nll(&logits, 2, false).unwrap();
    assert!((c - nll_by_hand(&logits, 2, false)).abs() < 1e-10, "{c}");
}

#[test]
fn nll_rejects_bad_bins() {
    assert!(matches!(nll(&[0.0; 4], 4, false), Err(Error::Contract(_))));
}

#[test]
fn nll_gradient_matches_finite_differences() {
    let mut rng = Rng::new(4, 0);
    for _ in 0..50 {
        let logits: Vec<f64> = (0..4).map(|_| 2.0 * rng.normal()).collect();
        let bin = rng.int_inclusive(0, 3);
        let censored = rng.uniform() < 0.5;
        let mut store = ParamStore::new();
        let id = store.add("z", ParamKind::Weight, Tensor::from_f64(1, 4, &logits).unwrap());
        let mut tape = Tape::new(&store);
        let z = tape.param(id);
        let l = nll_loss(&mut tape, z, bin, censored, DEFAULT_EPS).unwrap();
        let mut g = Gradients::for_params(&store);
        tape.backward(l, &mut g).unwrap();
        for k in 0..4 {
            let h = 1e-6;
            let mut up = logits.clone();
            up[k] += h;
            let mut down = logits.clone();
            down[k] -= h;
            let numeric = (nll_by_hand(&up, bin, censored) - nll_by_hand(&down, bin, censored)) / (2.0 * h);
            let analytic = g.get(id).data()[k];
            let rel = (analytic - numeric).abs() / 1f64.max(analytic.abs()).max(numeric.abs());
            assert!(rel < 1e-6, "{analytic} vs {numeric}");
        }
    }
}

#[test]
fn risk_limits_and_monotonicity() {
    assert!((risk_score(&[-1e3f64; 4]) + 4.0).abs() < 1e-9);
    assert!(risk_score(&[1e3f64; 4]).abs() < 1e-9);
    let base = [0.1f64, -0.4, 0.3, 0.0];
    let mut raised = base;
    raised[1] += 0.1;
    assert!(risk_score(&raised) > risk_score(&base));
    let out = SurvivalOutput::from_logits(&base);
    assert!(out.survival.windows(2).all(|w| w[1] <= w[0]));
}

#[test]
fn concordance_oracle_on_random_instances() {
    let mut rng = Rng::new(2024, 0);
    let mut defined = 0;
    for case in 0..200 {
        let n = rng.int_inclusive(2, 50);
        // Coarse grids force ties in both risks and times.
        let risks: Vec<f64> = (0..n).map(|_| rng.int_inclusive(0, 9) as f64).collect();
        let times: Vec<f64> = (0..n).map(|_| rng.int_inclusive(1, 12) as f64).collect();
        let censor_rate = [0.0, 0.3, 0.7, 1.0][case % 4];
        let censored: Vec<bool> = (0..n).map(|_| rng.uniform() < censor_rate).collect();
        match (brute_force(&risks, &times, &censored), concordance_index(&risks, &times, &censored)) {
            (Some(expected), Ok(got)) => {
                assert_eq!(got, expected, "case {case}");
                defined += 1;
            }
            (None, Err(Error::UndefinedMetric)) => {}
            (e, g) => panic!("case {case}: oracle {e:?} vs {g:?}"),
        }
    }
    assert!(defined > 100);
}

#[test]
fn concordance_examples() {
    let c = |r: &[f64], t: &[f64], e: &[bool]| concordance_index(r, t, e).unwrap();
    assert_eq!(c(&[3.0, 2.0, 1.0], &[1.0, 2.0, 3.0], &[false; 3]), 1.0);
    assert_eq!(c(&[5.0, 5.0], &[1.0, 2.0], &[false; 2]), 0.5);
    let times = [2.0, 4.0, 4.0, 6.0];
    let cens = [false, true, false, false];
    assert_eq!(c(&[4.0, 3.0, 2.0, 1.0], &times, &cens), 1.0);
    assert_eq!(c(&[4.0, 3.0, 1.0, 2.0], &times, &cens), 0.75);
    assert!(matches!(
        concordance_index(&[1.0, 2.0], &[1.0, 2.0], &[true, true]),
        Err(Error::UndefinedMetric)
    ));
}

#[test]
fn random_risks_are_near_one_half() {
    let mut rng = Rng::new(77, 0);
    let n = 1000;
    let risks: Vec<f64> = (0..n).map(|_| rng.normal()).collect();
    let times: Vec<f64> = (0..n).map(|_| rng.uniform_in(0.0, 100.0)).collect();
    let censored: Vec<bool> = (0..n).map(|_| rng.uniform() < 0.45).collect();
    let c = concordance_index(&risks, &times, &censored).unwrap();
    assert!((0.47..=0.53).contains(&c), "{c}");
}

fn cohort() -> impl Strategy<Value = (Vec<f64>, Vec<f64>, Vec<bool>)> {
    (2usize..40).prop_flat_map(|n| {
        (
            prop::collection::vec(-5.0f64..5.0, n),
            prop::collection::vec(0.0f64..100.0, n),
            prop::collection::vec(any::<bool>(), n),
        )
    })
}

proptest! {
    #[test]
    fn invariant_under_increasing_maps((risks, times, cens) in cohort()) {
        let mapped: Vec<f64> = risks.iter().map(|r| (r * 0.7).exp() + 3.0).collect();
        let a = concordance_index(&risks, &times, &cens);
        let b = concordance_index(&mapped, &times, &cens);
        match (a, b) {
            (Ok(a), Ok(b)) => prop_assert_eq!(a, b),
            (Err(_), Err(_)) => {}
            other => prop_assert!(false, "{:?}", other),
        }
    }

    #[test]
    fn negated_risks_complement((risks, times, cens) in cohort()) {
        let neg: Vec<f64> = risks.iter().map(|r| -r).collect();
        if let (Ok(a), Ok(b)) = (concordance_index(&risks, &times, &cens), concordance_index(&neg, &times, &cens)) {
            prop_assert!((a + b - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn uncensored_matches_pair_ordering((risks, times, _c) in cohort()) {
        let cens = vec![false; risks.len()];
        let expected = brute_force(&risks, &times, &cens);
        let got = concordance_index(&risks, &times, &cens).ok();
        prop_assert_eq!(got, expected);
    }

    #[test]
    fn survival_curve_is_a_valid_curve(logits in prop::collection::vec(-20.0f64..20.0, 4)) {
        let out = SurvivalOutput::from_logits(&logits);
        prop_assert!(out.hazards.iter().all(|h| *h >= 0.0 && *h <= 1.0));
        prop_assert!(out.survival.windows(2).all(|w| w[1] <= w[0]));
        prop_assert!(out.risk <= 0.0 && out.risk >= -4.0);
    }
}
