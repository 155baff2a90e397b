use milsurv_core::cohort::{discretize, split_kfold, PatientRecord};
use milsurv_core::{Error, Rng};
use proptest::prelude::*;

fn cohort(n: usize, censored_fraction: f64, rng: &mut Rng) -> Vec<PatientRecord> {
    (0..n)
        .map(|i| PatientRecord::new(format!("TCGA-{i:04}"), rng.uniform_in(0.0, 120.0), rng.uniform() < censored_fraction))
        .collect()
}

fn exact_censored(n: usize, censored: usize) -> Vec<PatientRecord> {
    (0..n)
        .map(|i| PatientRecord::new(format!("p{i}"), (i + 1) as f64, i < censored))
        .collect()
}

#[test]
fn quartile_edges_and_right_open_bins() {
    let mut recs: Vec<PatientRecord> = [10.0, 20.0, 30.0, 40.0, 25.0, 50.0]
        .iter()
        .enumerate()
        .map(|(i, &t)| PatientRecord::new(format!("c{i}"), t, i >= 4))
        .collect();
    let edges = discretize(&mut recs, 4).unwrap();
    assert_eq!(edges.edges, vec![20.0, 30.0, 40.0]);
    let bins: Vec<usize> = recs.iter().map(|r| r.bin.unwrap()).collect();
    assert_eq!(bins, vec![0, 1, 2, 3, 1, 3]);
}

#[test]
fn too_few_distinct_events_is_degenerate() {
    let mut recs = vec![
        PatientRecord::new("a", 5.0, false),
        PatientRecord::new("b", 5.0, false),
        PatientRecord::new("c", 7.0, false),
        PatientRecord::new("d", 9.0, false),
        PatientRecord::new("e", 1.0, true),
    ];
    assert!(matches!(discretize(&mut recs, 4), Err(Error::DegenerateCohort(_))));
}

#[test]
fn fold_sizes_for_cohort_sized_inputs() {
    for (n, censored, sizes) in [
        (373, 168, vec![75, 75, 75, 74, 74]),
        (443, 288, vec![89, 89, 89, 88, 88]),
        (1061, 912, vec![213, 212, 212, 212, 212]),
    ] {
        let recs = exact_censored(n, censored);
        let split = split_kfold(&recs, 5, &mut Rng::new(0, 0)).unwrap();
        assert_eq!(split.fold_sizes(), sizes);
        let overall = censored as f64 / n as f64;
        for f in 0..5 {
            let (train, val) = split.partition(f);
            assert_eq!(train.len() + val.len(), n);
            let c = val.iter().filter(|id| recs.iter().any(|r| r.case_id == **id && r.censored)).count();
            let frac = c as f64 / val.len() as f64;
            assert!((frac - overall).abs() <= 0.10, "n={n} fold {f}: {frac} vs {overall}");
        }
    }
}

#[test]
fn bad_fold_counts_and_duplicates() {
    let recs = exact_censored(4, 1);
    assert!(matches!(split_kfold(&recs, 1, &mut Rng::new(0, 0)), Err(Error::Config(_))));
    assert!(matches!(split_kfold(&recs, 5, &mut Rng::new(0, 0)), Err(Error::Config(_))));
    let mut dup = exact_censored(6, 2);
    dup[5].case_id = dup[0].case_id.clone();
    assert!(matches!(split_kfold(&dup, 2, &mut Rng::new(0, 0)), Err(Error::Ingestion(_))));
}

proptest! {
    #[test]
    fn bins_are_monotone_in_survival_time(seed in any::<u64>(), n in 8usize..200, frac in 0.0f64..0.7) {
        let mut rng = Rng::new(seed, 0);
        let mut recs = cohort(n, frac, &mut rng);
        if discretize(&mut recs, 4).is_ok() {
            for a in &recs {
                for b in &recs {
                    if a.survival_months <= b.survival_months {
                        prop_assert!(a.bin.unwrap() <= b.bin.unwrap());
                    }
                }
                prop_assert!(a.bin.unwrap() < 4);
            }
        }
    }

    #[test]
    fn split_is_a_pure_function_of_cohort_k_and_seed(seed in any::<u64>(), n in 10usize..150, k in 2usize..8) {
        let mut rng = Rng::new(seed ^ 0xabc, 0);
        let recs = cohort(n, 0.5, &mut rng);
        let a = split_kfold(&recs, k, &mut Rng::new(seed, 0)).unwrap();
        let b = split_kfold(&recs, k, &mut Rng::new(seed, 0)).unwrap();
        prop_assert_eq!(&a, &b);
        prop_assert_eq!(a.assignments.len(), n);
        let sizes = a.fold_sizes();
        prop_assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
        for censored in [false, true] {
            let mut per_fold = vec![0usize; k];
            for r in recs.iter().filter(|r| r.censored == censored) {
                per_fold[a.fold_of(&r.case_id).unwrap()] += 1;
            }
            prop_assert!(per_fold.iter().max().unwrap() - per_fold.iter().min().unwrap() <= 1);
        }
    }
}
