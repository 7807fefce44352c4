use proptest::prelude::*;
use rand::Rng;
use rand_distr::StandardNormal;
use sha2::{Digest, Sha256};
use treeavg::causal::{
    fit_causal_forest, fit_causal_tree, CausalForestOptions, CausalTreeOptions, LocalCateModel, Pruning,
    SiteDataset, SubjectRecord,
};
use treeavg::exchange::{export_model, import_model, parse_envelope, ExchangedModel, Exportable};
use treeavg::rng::stream;
use treeavg::simnet::{fit_target_ensemble, Estimator, SimConfig, SiteSizes};
use treeavg::{Error, Execution};

fn site(n: usize, seed: u64) -> SiteDataset {
    let mut rng = stream(seed, &[]);
    let records = (0..n)
        .map(|_| {
            let x: Vec<f64> = (0..4).map(|_| rng.sample(StandardNormal)).collect();
            let z = rng.random::<bool>();
            let eps: f64 = rng.sample(StandardNormal);
            let tau = x[0].max(0.0) + 0.5 * x[1];
            SubjectRecord {
                y: x[2] + if z { tau / 2.0 } else { -tau / 2.0 } + eps,
                x,
                z,
            }
        })
        .collect();
    SiteDataset::new(3, records)
}

fn tree_model(seed: u64) -> LocalCateModel {
    fit_causal_tree(&site(300, seed), None, &CausalTreeOptions::default(), &mut stream(seed, &[1])).unwrap()
}

fn probes(n: usize, width: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = stream(seed, &[]);
    (0..n)
        .map(|_| (0..width).map(|_| rng.random_range(-5.0..5.0)).collect())
        .collect()
}

fn resign(body_lines: impl Iterator<Item = String>) -> String {
    let body: String = body_lines.map(|l| l + "\n").collect();
    format!("{body}digest=sha256:{}\n", hex::encode(Sha256::digest(body.as_bytes())))
}

fn body_of(text: &str) -> impl Iterator<Item = String> + '_ {
    text.lines().filter(|l| !l.starts_with("digest=")).map(str::to_string)
}

#[test]
fn forest_round_trip_through_a_file() {
    let opts = CausalForestOptions {
        n_trees: 30,
        ..CausalForestOptions::default()
    };
    let m = fit_causal_forest(&site(400, 2), None, &opts, &mut stream(3, &[])).unwrap();
    let path = std::env::temp_dir().join(format!("treeavg-forest-{}.model", std::process::id()));
    export_model(&m, &path).unwrap();
    let back = import_model(&path).unwrap();
    std::fs::remove_file(&path).unwrap();
    let ExchangedModel::Local(back) = back else { panic!("local model expected") };
    assert_eq!(back.site_id, 3);
    for x in probes(10_000, 4, 4) {
        let (a, b) = (m.predict_tau(&x).unwrap(), back.predict_tau(&x).unwrap());
        assert!((a - b).abs() <= 1e-12);
    }
}

#[test]
fn ensemble_round_trip() {
    let cfg = SimConfig {
        k: 3,
        n_per_site: SiteSizes::Uniform(80),
        forest_trees: 25,
        ..SimConfig::default()
    };
    for e in [Estimator::Et, Estimator::Ef] {
        let (m, _) = fit_target_ensemble(&cfg, 0, e, Execution::Sequential).unwrap();
        let text = m.envelope();
        let back = parse_envelope(&text).unwrap().into_ensemble().unwrap();
        assert_eq!(back.envelope(), text);
        assert_eq!((back.n_sites, back.n_features, back.n_trees()), (3, 5, m.n_trees()));
        for x in probes(2000, 5, 5) {
            for s in 1..=3 {
                assert_eq!(m.predict_at_site(&x, s).unwrap(), back.predict_at_site(&x, s).unwrap());
            }
        }
    }
}

#[test]
fn tampering_is_caught() {
    let text = tree_model(6).envelope();
    let pos = text.find("value=").unwrap() + 6;
    let mut bytes = text.into_bytes();
    bytes[pos] = if bytes[pos] == b'7' { b'8' } else { b'7' };
    let tampered = String::from_utf8(bytes).unwrap();
    assert!(matches!(parse_envelope(&tampered), Err(Error::DigestMismatch { .. })));
}

#[test]
fn future_versions_are_refused() {
    let text = tree_model(7).envelope();
    let bumped = resign(body_of(&text).map(|l| {
        if l.starts_with("format_version=") {
            "format_version=999".to_string()
        } else {
            l
        }
    }));
    assert!(matches!(parse_envelope(&bumped), Err(Error::UnsupportedVersion(999))));
}

#[test]
fn dangling_internal_node_is_named() {
    let opts = CausalTreeOptions {
        pruning: Pruning::Unpruned,
        ..CausalTreeOptions::default()
    };
    let m = fit_causal_tree(&site(300, 8), None, &opts, &mut stream(8, &[])).unwrap();
    let text = m.envelope();
    let root = m.trees[0].root();
    assert!(!root.is_leaf(), "fixture needs a split");
    let right = format!(" right={}", root.right.unwrap());
    let broken = resign(body_of(&text).map(|l| if l.starts_with("node=0 ") { l.replace(&right, "") } else { l }));
    match parse_envelope(&broken) {
        Err(Error::SchemaError(msg)) => assert!(msg.contains("node 0"), "{msg}"),
        other => panic!("{other:?}"),
    }
}

#[test]
fn sentinel_outcomes_stay_home() {
    let mut data = site(500, 9);
    for r in data.records.iter_mut().step_by(3) {
        r.y = 123456.789;
    }
    let opts = CausalForestOptions {
        n_trees: 20,
        ..CausalForestOptions::default()
    };
    let forest = fit_causal_forest(&data, None, &opts, &mut stream(10, &[])).unwrap();
    let tree = fit_causal_tree(&data, None, &CausalTreeOptions::default(), &mut stream(11, &[])).unwrap();
    for text in [forest.envelope(), tree.envelope()] {
        assert!(!text.contains("123456.789"));
        assert!(!text.contains("123456"));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn export_is_canonical(seed in any::<u64>()) {
        let m = tree_model(seed);
        let text = m.envelope();
        let again = parse_envelope(&text).unwrap();
        prop_assert_eq!(again.envelope(), text.clone());
        let back = again.into_local().unwrap();
        for x in probes(500, 4, seed) {
            prop_assert!((back.predict_tau(&x).unwrap() - m.predict_tau(&x).unwrap()).abs() <= 1e-12);
        }
        prop_assert!(text.ends_with('\n') && !text.contains('\r'));
    }
}
