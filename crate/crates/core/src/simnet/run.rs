use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::config::{LocalKind, PropensitySpec, SimConfig};
use super::metrics::{decision_rule, ipw_value, mse};
use super::world::{generate_world, role, SiteWorld, Truth};
use crate::baselines::{
    averaged_predict, ewma_weights, loc_fit, ma_weights, oracle_models, stack_fit, AveragingWeights, OracleModel,
    TruthFn, WeightScheme,
};
use crate::causal::{
    fit_causal_forest, fit_causal_tree, fit_propensity, CateModel, LocalCateModel, Propensity, SiteDataset,
};
use crate::ensemble::{
    build_augmented, extract_weights, fit_ensemble_forest, fit_ensemble_tree, predict_tau_star, AugmentedDataset,
    EnsembleModel, WeightProfile,
};
use crate::error::{Error, Result};
use crate::exchange::{parse_envelope, Exportable};
use crate::exec::{try_map_indexed, Execution};
use crate::rng::stream;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Estimator {
    Loc,
    Ma,
    Ewma,
    EwmaOracle,
    Stack,
    StackOracle,
    Et,
    EtOracle,
    Ef,
    EfOracle,
}

impl Estimator {
    pub const ALL: [Estimator; 10] = [
        Estimator::Loc,
        Estimator::Ma,
        Estimator::Ewma,
        Estimator::EwmaOracle,
        Estimator::Stack,
        Estimator::StackOracle,
        Estimator::Et,
        Estimator::EtOracle,
        Estimator::Ef,
        Estimator::EfOracle,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Estimator::Loc => "LOC",
            Estimator::Ma => "MA",
            Estimator::Ewma => "EWMA",
            Estimator::EwmaOracle => "EWMA-oracle",
            Estimator::Stack => "STACK",
            Estimator::StackOracle => "STACK-oracle",
            Estimator::Et => "ET",
            Estimator::EtOracle => "ET-oracle",
            Estimator::Ef => "EF",
            Estimator::EfOracle => "EF-oracle",
        }
    }

    /// Whether the estimator averages the fitted site models.
    fn uses_local_models(self) -> bool {
        !matches!(self, Estimator::Loc | Estimator::EtOracle | Estimator::EfOracle)
    }
}

impl fmt::Display for Estimator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Estimator {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Estimator::ALL
            .into_iter()
            .find(|e| e.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::InvalidConfig(format!("unknown estimator `{s}`")))
    }
}

impl TryFrom<String> for Estimator {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Estimator> for String {
    fn from(e: Estimator) -> String {
        e.as_str().to_string()
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunOptions {
    pub execution: Execution,
    /// When set, ET/EF weights are recorded at these `x1` values with the
    /// other features at 0.
    pub weight_grid: Option<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReplicateResult {
    pub replicate_idx: u64,
    pub mse: BTreeMap<Estimator, f64>,
    /// MSE over LOC's MSE; exactly 1 for LOC.
    pub ratio: BTreeMap<Estimator, f64>,
    /// Policy value of treating where the estimate is positive, on the test set.
    pub decision_values: BTreeMap<Estimator, f64>,
    pub weights: BTreeMap<Estimator, Vec<WeightProfile>>,
}

fn site_propensity(cfg: &SimConfig, data: &SiteDataset, truth: &Truth) -> Result<Propensity> {
    Ok(match cfg.propensity_spec {
        PropensitySpec::OracleHalf => truth.propensity(),
        PropensitySpec::LogisticCorrect => Propensity::Logistic(fit_propensity(data, &[0])?),
        PropensitySpec::LogisticMisspecified => {
            let all: Vec<usize> = (0..cfg.d).collect();
            Propensity::Logistic(fit_propensity(data, &all)?)
        }
    })
}

fn fit_local(cfg: &SimConfig, data: &SiteDataset, truth: &Truth, seed: u64, exec: Execution) -> Result<LocalCateModel> {
    let prop = site_propensity(cfg, data, truth)?;
    let mut rng = stream(seed, &[]);
    match cfg.local_kind {
        LocalKind::CausalTree => fit_causal_tree(data, Some(&prop), &cfg.local_tree_options(), &mut rng),
        LocalKind::CausalForest => fit_causal_forest(data, Some(&prop), &cfg.local_forest_options(exec), &mut rng),
    }
}

fn rows(data: &SiteDataset) -> Vec<Vec<f64>> {
    data.records.iter().map(|r| r.x.clone()).collect()
}

struct Stage<'a> {
    cfg: &'a SimConfig,
    world: &'a SiteWorld,
    r: u64,
    exec: Execution,
    test_x: Vec<Vec<f64>>,
    est: SiteDataset,
    est_x: Vec<Vec<f64>>,
}

impl Stage<'_> {
    fn seed(&self, site: usize, role: u64) -> u64 {
        crate::rng::derive_seed(self.cfg.base_seed, &[self.r, site as u64, role])
    }

    fn annotate<T>(&self, what: &str, site: Option<usize>, res: Result<T>) -> Result<T> {
        res.map_err(|e| Error::fit(what, site, self.r, e))
    }

    /// Site models as seen by the target: fitted at home, then passed
    /// through the exchange envelope.
    fn local_models(&self) -> Result<Vec<LocalCateModel>> {
        let train = self.world.target().train_set().expect("target carries a split");
        try_map_indexed(self.cfg.k, self.exec, |i| {
            let site = i + 1;
            let data = if site == 1 { &train } else { &self.world.datasets[i] };
            let fitted = fit_local(self.cfg, data, &self.world.truth, self.seed(site, role::LOCAL), self.exec);
            let fitted = self.annotate("local", Some(site), fitted)?;
            let received = parse_envelope(&fitted.envelope()).and_then(|m| m.into_local());
            self.annotate("exchange", Some(site), received)
        })
    }

    fn predict_all(&self, model: &dyn CateModel) -> Result<Vec<f64>> {
        self.test_x.iter().map(|x| model.predict_tau(x)).collect()
    }

    fn averaged(&self, w: &AveragingWeights, models: &[&dyn CateModel]) -> Result<Vec<f64>> {
        self.test_x.iter().map(|x| averaged_predict(w, models, x)).collect()
    }

    fn augmented(&self, models: &[&dyn CateModel]) -> Result<AugmentedDataset> {
        let sizes: Option<Vec<f64>> = self
            .cfg
            .weighted_by_site_size
            .then(|| (1..=self.cfg.k).map(|k| self.cfg.site_size(k) as f64).collect());
        build_augmented(&self.est, models, sizes.as_deref())
    }

    fn ensemble(&self, aug: &AugmentedDataset, forest: bool, role: u64) -> Result<EnsembleModel> {
        let mut rng = stream(self.seed(1, role), &[]);
        if forest {
            fit_ensemble_forest(aug, &self.cfg.ensemble_forest_options(self.exec), &mut rng)
        } else {
            fit_ensemble_tree(aug, &self.cfg.ensemble_tree_options(), &mut rng)
        }
    }

    fn ensemble_predictions(&self, model: &EnsembleModel) -> Result<Vec<f64>> {
        self.test_x.iter().map(|x| predict_tau_star(model, x)).collect()
    }
}

/// One full pass of the pipeline on replicate `replicate_idx`. LOC is
/// always evaluated since every ratio is relative to it.
pub fn run_replicate(
    cfg: &SimConfig,
    replicate_idx: u64,
    estimators: &[Estimator],
    opts: &RunOptions,
) -> Result<ReplicateResult> {
    let world = generate_world(cfg, replicate_idx)?;
    let r = replicate_idx;
    let est = world.target().estimation_set().expect("target carries a split");
    let stage = Stage {
        cfg,
        world: &world,
        r,
        exec: opts.execution,
        test_x: rows(&world.test),
        est_x: rows(&est),
        est,
    };
    let wanted = |e: Estimator| e == Estimator::Loc || estimators.contains(&e);
    let truth_test: Vec<f64> = stage.test_x.iter().map(|x| world.truth.tau(x, 1)).collect();
    let mut preds: BTreeMap<Estimator, Vec<f64>> = BTreeMap::new();
    let mut weights: BTreeMap<Estimator, Vec<WeightProfile>> = BTreeMap::new();

    let target_prop = stage.annotate("LOC", Some(1), site_propensity(cfg, world.target(), &world.truth))?;
    let loc = loc_fit(
        world.target(),
        Some(&target_prop),
        &cfg.local_tree_options(),
        &mut stream(stage.seed(1, role::LOC), &[]),
    );
    let loc = stage.annotate("LOC", Some(1), loc)?;
    preds.insert(Estimator::Loc, stage.predict_all(&loc)?);

    let oracles = truth_oracles(&world.truth, cfg);
    let true_ref: Vec<f64> = stage.est_x.iter().map(|x| world.truth.tau(x, 1)).collect();

    if estimators.iter().any(|e| e.uses_local_models()) {
        let local = stage.local_models()?;
        let models: Vec<&dyn CateModel> = local.iter().map(|m| m as &dyn CateModel).collect();

        if wanted(Estimator::Ma) {
            preds.insert(Estimator::Ma, stage.averaged(&ma_weights(cfg.k), &models)?);
        }
        let needs_tilde = wanted(Estimator::Ewma) || wanted(Estimator::Stack);
        let tilde_ref: Vec<f64> = if needs_tilde {
            let fitted = fit_local(cfg, &stage.est, &world.truth, stage.seed(1, role::REFERENCE), stage.exec);
            let tilde = stage.annotate("reference", Some(1), fitted)?;
            stage.est_x.iter().map(|x| tilde.predict_tau(x)).collect::<Result<_>>()?
        } else {
            Vec::new()
        };
        let schemes = [
            (Estimator::Ewma, WeightScheme::Ewma, &tilde_ref),
            (Estimator::EwmaOracle, WeightScheme::EwmaOracle, &true_ref),
            (Estimator::Stack, WeightScheme::Stack, &tilde_ref),
            (Estimator::StackOracle, WeightScheme::StackOracle, &true_ref),
        ];
        for (e, scheme, reference) in schemes {
            if !wanted(e) {
                continue;
            }
            let w = match scheme {
                WeightScheme::Stack | WeightScheme::StackOracle => stack_fit(&models, reference, &stage.est_x, scheme),
                _ => ewma_weights(&models, reference, &stage.est_x, scheme),
            };
            let w = stage.annotate(e.as_str(), None, w)?;
            preds.insert(e, stage.averaged(&w, &models)?);
        }

        if wanted(Estimator::Et) || wanted(Estimator::Ef) {
            let aug = stage.annotate("augment", None, stage.augmented(&models))?;
            for (e, forest, role) in [(Estimator::Et, false, role::ET), (Estimator::Ef, true, role::EF)] {
                if wanted(e) {
                    let m = stage.annotate(e.as_str(), None, stage.ensemble(&aug, forest, role))?;
                    preds.insert(e, stage.ensemble_predictions(&m)?);
                    if let Some(grid) = &opts.weight_grid {
                        weights.insert(e, weight_profiles(&m, &aug, grid, cfg.d)?);
                    }
                }
            }
        }
    }

    if wanted(Estimator::EtOracle) || wanted(Estimator::EfOracle) {
        let models: Vec<&dyn CateModel> = oracles.iter().map(|m| m as &dyn CateModel).collect();
        let aug = stage.annotate("augment", None, stage.augmented(&models))?;
        for (e, forest, role) in [
            (Estimator::EtOracle, false, role::ET_ORACLE),
            (Estimator::EfOracle, true, role::EF_ORACLE),
        ] {
            if wanted(e) {
                let m = stage.annotate(e.as_str(), None, stage.ensemble(&aug, forest, role))?;
                preds.insert(e, stage.ensemble_predictions(&m)?);
                if let Some(grid) = &opts.weight_grid {
                    weights.insert(e, weight_profiles(&m, &aug, grid, cfg.d)?);
                }
            }
        }
    }

    let prop = world.truth.propensity();
    let mut mses = BTreeMap::new();
    let mut decision_values = BTreeMap::new();
    for (&e, p) in &preds {
        mses.insert(e, mse(p, &truth_test)?);
        if let Ok(v) = ipw_value(&world.test, &decision_rule(p), &prop) {
            decision_values.insert(e, v);
        }
    }
    let loc_mse = mses[&Estimator::Loc];
    let ratio = mses
        .iter()
        .map(|(&e, &m)| (e, if e == Estimator::Loc { 1.0 } else { m / loc_mse }))
        .collect();
    Ok(ReplicateResult {
        replicate_idx,
        mse: mses,
        ratio,
        decision_values,
        weights,
    })
}

/// The model site `site` would send on replicate `replicate_idx`, fitted
/// exactly as inside [`run_replicate`].
pub fn fit_site_model(cfg: &SimConfig, replicate_idx: u64, site: usize, exec: Execution) -> Result<LocalCateModel> {
    if site == 0 || site > cfg.k {
        return Err(Error::InvalidConfig(format!("site {site} outside 1..={}", cfg.k)));
    }
    let world = generate_world(cfg, replicate_idx)?;
    let train;
    let data = if site == 1 {
        train = world.target().train_set().expect("target carries a split");
        &train
    } else {
        &world.datasets[site - 1]
    };
    let seed = crate::rng::derive_seed(cfg.base_seed, &[replicate_idx, site as u64, role::LOCAL]);
    fit_local(cfg, data, &world.truth, seed, exec).map_err(|e| Error::fit("local", Some(site), replicate_idx, e))
}

/// The target's ensemble on replicate `replicate_idx` together with the
/// augmented data it was fitted on. `estimator` is one of ET, EF and their
/// oracle variants.
pub fn fit_target_ensemble(
    cfg: &SimConfig,
    replicate_idx: u64,
    estimator: Estimator,
    exec: Execution,
) -> Result<(EnsembleModel, AugmentedDataset)> {
    let (forest, oracle, role) = match estimator {
        Estimator::Et => (false, false, role::ET),
        Estimator::Ef => (true, false, role::EF),
        Estimator::EtOracle => (false, true, role::ET_ORACLE),
        Estimator::EfOracle => (true, true, role::EF_ORACLE),
        other => return Err(Error::InvalidConfig(format!("{other} is not an ensemble estimator"))),
    };
    cfg.validate()?;
    let world = generate_world(cfg, replicate_idx)?;
    let est = world.target().estimation_set().expect("target carries a split");
    let stage = Stage {
        cfg,
        world: &world,
        r: replicate_idx,
        exec,
        test_x: Vec::new(),
        est_x: rows(&est),
        est,
    };
    let fitted;
    let oracles;
    let models: Vec<&dyn CateModel> = if oracle {
        oracles = truth_oracles(&world.truth, cfg);
        oracles.iter().map(|m| m as &dyn CateModel).collect()
    } else {
        fitted = stage.local_models()?;
        fitted.iter().map(|m| m as &dyn CateModel).collect()
    };
    let aug = stage.annotate("augment", None, stage.augmented(&models))?;
    let model = stage.annotate(estimator.as_str(), None, stage.ensemble(&aug, forest, role))?;
    Ok((model, aug))
}

fn truth_oracles(truth: &Truth, cfg: &SimConfig) -> Vec<OracleModel> {
    let true_tau: Vec<TruthFn> = (1..=cfg.k)
        .map(|k| {
            let t = truth.clone();
            Arc::new(move |x: &[f64]| t.tau(x, k)) as TruthFn
        })
        .collect();
    oracle_models(true_tau, cfg.d)
}

/// Weights at each `x1` in `grid`, other features held at 0.
pub fn weight_profiles(model: &EnsembleModel, aug: &AugmentedDataset, grid: &[f64], d: usize) -> Result<Vec<WeightProfile>> {
    if d == 0 {
        return Err(Error::EmptyInput);
    }
    grid.iter()
        .map(|&x1| {
            let mut x = vec![0.0; d];
            x[0] = x1;
            extract_weights(model, aug, &x)
        })
        .collect()
}

/// Replicates `0..cfg.replications`, in order.
pub fn run_replicates(cfg: &SimConfig, estimators: &[Estimator], opts: &RunOptions) -> Result<Vec<ReplicateResult>> {
    cfg.validate()?;
    try_map_indexed(cfg.replications, opts.execution, |r| {
        let this = RunOptions {
            weight_grid: if r == 0 { opts.weight_grid.clone() } else { None },
            ..opts.clone()
        };
        run_replicate(cfg, r as u64, estimators, &this)
    })
}
