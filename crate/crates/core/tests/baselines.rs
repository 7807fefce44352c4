use std::sync::Arc;

use proptest::prelude::*;
use rand::Rng;
use rand_distr::StandardNormal;
use treeavg::baselines::{
    averaged_predict, ewma_weights, loc_fit, ma_weights, oracle_models, stack_fit, OracleModel, TruthFn,
    WeightScheme,
};
use treeavg::causal::{CateModel, CausalTreeOptions, SiteDataset, SubjectRecord};
use treeavg::rng::stream;
use treeavg::simnet::{Design, Grouping, Truth};

fn model(site: usize, f: impl Fn(&[f64]) -> f64 + Send + Sync + 'static) -> OracleModel {
    OracleModel {
        site_id: site,
        n_features: 1,
        tau: Arc::new(f),
    }
}

fn refs(models: &[OracleModel]) -> Vec<&dyn CateModel> {
    models.iter().map(|m| m as &dyn CateModel).collect()
}

fn points(n: usize) -> Vec<Vec<f64>> {
    (0..n).map(|i| vec![-2.0 + 4.0 * i as f64 / (n - 1) as f64]).collect()
}

fn truth(c: f64) -> Truth {
    Truth {
        grouping: Grouping::Discrete,
        c,
        power_c: c,
        design: Design::Experimental,
        u: vec![0.0, 1.0],
    }
}

#[test]
fn loc_on_constant_effect_and_tiny_site() {
    let mut rng = stream(1, &[]);
    let records: Vec<SubjectRecord> = (0..2000)
        .map(|_| {
            let z = rng.random::<bool>();
            let eps: f64 = rng.sample(StandardNormal);
            SubjectRecord {
                x: vec![rng.sample(StandardNormal), rng.sample(StandardNormal)],
                z,
                y: if z { 1.5 } else { -1.5 } + eps,
            }
        })
        .collect();
    let site = SiteDataset::new(1, records.clone());
    let m = loc_fit(&site, None, &CausalTreeOptions::default(), &mut stream(2, &[])).unwrap();
    assert!((m.predict_tau(&[0.0, 0.0]).unwrap() - 3.0).abs() < 0.2);

    let tiny = SiteDataset::new(1, records[..10].to_vec());
    let m = loc_fit(&tiny, None, &CausalTreeOptions::default(), &mut stream(3, &[])).unwrap();
    assert!(m.predict_tau(&[0.0, 0.0]).unwrap().is_finite());
}

#[test]
fn ewma_examples() {
    let xs = vec![vec![0.0]];
    let same = [model(1, |_| 1.0), model(2, |_| 1.0), model(3, |_| 1.0)];
    let w = ewma_weights(&refs(&same), &[0.0], &xs, WeightScheme::Ewma).unwrap();
    assert!(w.values.iter().all(|&v| (v - 1.0 / 3.0).abs() < 1e-15));

    // SSE 0 and ln 3
    let r3 = 3f64.ln().sqrt();
    let two = [model(1, |_| 0.0), model(2, move |_| r3)];
    let w = ewma_weights(&refs(&two), &[0.0], &xs, WeightScheme::Ewma).unwrap();
    assert!((w.values[0] - 0.75).abs() < 1e-12 && (w.values[1] - 0.25).abs() < 1e-12);

    let far = [model(1, |_| 10.0), model(2, |_| 0.0), model(3, |_| 8.0)];
    let w = ewma_weights(&refs(&far), &[0.0], &xs, WeightScheme::EwmaOracle).unwrap();
    assert!((w.values[1] - 1.0).abs() <= 1e-18);
    assert!(w.values.iter().all(|v| v.is_finite()));
    assert!(w.constrained_simplex);
}

#[test]
fn ewma_and_oracle_share_the_code_path() {
    let xs = points(20);
    let models = [model(1, |x| x[0]), model(2, |x| x[0] * 0.5), model(3, |x| -x[0])];
    let reference: Vec<f64> = xs.iter().map(|x| x[0] * 0.8).collect();
    let a = ewma_weights(&refs(&models), &reference, &xs, WeightScheme::Ewma).unwrap();
    let b = ewma_weights(&refs(&models), &reference, &xs, WeightScheme::EwmaOracle).unwrap();
    assert_eq!(a.values, b.values);
    assert_ne!(a.scheme, b.scheme);
}

#[test]
fn stack_recovers_the_matching_column() {
    let xs = points(40);
    let models = [
        model(1, |x| x[0].cos()),
        model(2, |x| x[0] * x[0]),
        model(3, |x| (2.0 * x[0]).sin() + 0.3),
        model(4, |x| x[0].exp() * 0.1),
    ];
    let reference: Vec<f64> = xs.iter().map(|x| models[2].predict_tau(x).unwrap()).collect();
    let w = stack_fit(&refs(&models), &reference, &xs, WeightScheme::Stack).unwrap();
    for (j, v) in w.values.iter().enumerate() {
        let e = if j == 2 { 1.0 } else { 0.0 };
        assert!((v - e).abs() < 1e-6, "{:?}", w.values);
    }
    assert!(!w.constrained_simplex);
    for x in &xs {
        let p = averaged_predict(&w, &refs(&models), x).unwrap();
        assert!((p - models[2].predict_tau(x).unwrap()).abs() < 1e-6);
    }
}

#[test]
fn stack_with_identical_columns_splits_evenly() {
    let xs = points(15);
    let models = [model(1, |x| 1.0 + x[0]), model(2, |x| 1.0 + x[0]), model(3, |x| 1.0 + x[0])];
    let reference: Vec<f64> = xs.iter().map(|x| 2.0 * (1.0 + x[0])).collect();
    let w = stack_fit(&refs(&models), &reference, &xs, WeightScheme::Stack).unwrap();
    for v in &w.values {
        assert!((v - 2.0 / 3.0).abs() < 1e-9, "{:?}", w.values);
    }
    let zero = stack_fit(&refs(&models), &[0.0; 15], &xs, WeightScheme::Stack).unwrap();
    assert!(zero.values.iter().all(|&v| v == 0.0));
}

#[test]
fn averaged_predict_examples() {
    let models = [model(1, |_| 4.0), model(2, |_| 8.0)];
    let mut w = ma_weights(2);
    w.values = vec![0.75, 0.25];
    assert_eq!(averaged_predict(&w, &refs(&models), &[0.0]).unwrap(), 5.0);
    let flat = [model(1, |_| 2.5), model(2, |_| 2.5), model(3, |_| 2.5)];
    assert_eq!(averaged_predict(&ma_weights(3), &refs(&flat), &[0.0]).unwrap(), 2.5);
    assert!(averaged_predict(&ma_weights(3), &refs(&models), &[0.0]).is_err());
}

#[test]
fn oracle_values() {
    let t0 = truth(0.0);
    let t1 = truth(1.0);
    let fns: Vec<TruthFn> = vec![
        Arc::new(move |x: &[f64]| t0.tau(x, 1)),
        Arc::new(move |x: &[f64]| t1.tau(x, 2)),
    ];
    let m = oracle_models(fns, 1);
    assert_eq!(m[0].site_id, 1);
    assert_eq!(m[0].predict_tau(&[2.0]).unwrap(), 2.0);
    assert_eq!(m[0].predict_tau(&[-1.0]).unwrap(), 0.0);
    assert_eq!(m[1].predict_tau(&[1.0]).unwrap(), -1.0);
    assert!(m[1].predict_tau(&[1.0, 2.0]).is_err());
}

proptest! {
    #[test]
    fn ewma_is_permutation_equivariant(
        slopes in prop::collection::vec(-2.0f64..2.0, 2..6),
        seed in any::<u64>(),
    ) {
        let xs = points(10);
        let reference: Vec<f64> = xs.iter().map(|x| 0.7 * x[0]).collect();
        let ms: Vec<OracleModel> = slopes.iter().enumerate().map(|(k, &b)| model(k + 1, move |x| b * x[0])).collect();
        let w = ewma_weights(&refs(&ms), &reference, &xs, WeightScheme::Ewma).unwrap();
        let mut order: Vec<usize> = (0..ms.len()).collect();
        use rand::seq::SliceRandom;
        order.shuffle(&mut stream(seed, &[]));
        let permuted: Vec<OracleModel> = order.iter().map(|&i| ms[i].clone()).collect();
        let wp = ewma_weights(&refs(&permuted), &reference, &xs, WeightScheme::Ewma).unwrap();
        for (pos, &i) in order.iter().enumerate() {
            prop_assert!((wp.values[pos] - w.values[i]).abs() < 1e-15);
        }
        prop_assert!((w.values.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(w.values.iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn stack_reproduces_references_in_the_span(coef in prop::collection::vec(-3.0f64..3.0, 3)) {
        let xs = points(25);
        let models = [model(1, |x| x[0]), model(2, |x| x[0] * x[0]), model(3, |x| x[0].sin())];
        let reference: Vec<f64> = xs
            .iter()
            .map(|x| coef[0] * x[0] + coef[1] * x[0] * x[0] + coef[2] * x[0].sin())
            .collect();
        let w = stack_fit(&refs(&models), &reference, &xs, WeightScheme::StackOracle).unwrap();
        for (x, r) in xs.iter().zip(&reference) {
            let p = averaged_predict(&w, &refs(&models), x).unwrap();
            prop_assert!((p - r).abs() < 1e-8);
        }
    }
}
