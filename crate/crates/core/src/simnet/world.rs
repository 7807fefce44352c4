use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;

use super::config::{Design, Grouping, SimConfig};
use crate::causal::{Propensity, PropensityModel, SitePartition, SiteDataset, SubjectRecord};
use crate::error::Result;
use crate::rng::{stream, Stream};

pub(crate) mod role {
    pub const DATA: u64 = 1;
    pub const SPLIT: u64 = 2;
    pub const TEST: u64 = 3;
    pub const GROUPS: u64 = 4;
    pub const LOCAL: u64 = 5;
    pub const LOC: u64 = 6;
    pub const REFERENCE: u64 = 7;
    pub const ET: u64 = 8;
    pub const EF: u64 = 9;
    pub const ET_ORACLE: u64 = 10;
    pub const EF_ORACLE: u64 = 11;
}

/// Ground truth of a world: site effects and the outcome model.
#[derive(Clone, Debug, PartialEq)]
pub struct Truth {
    pub grouping: Grouping,
    pub c: f64,
    pub power_c: f64,
    pub design: Design,
    /// `u[k - 1]` is `U_k`.
    pub u: Vec<f64>,
}

impl Truth {
    fn shift(&self, x: &[f64], site: usize) -> f64 {
        let u = self.u[site - 1];
        let scale = match self.grouping {
            Grouping::Discrete | Grouping::Continuous => self.c * u,
            Grouping::NonlinearPower => u.powf(self.power_c),
        };
        (x[0] - 3.0) * scale
    }

    pub fn tau(&self, x: &[f64], site: usize) -> f64 {
        let base = if x[0] > 0.0 { x[0] } else { 0.0 };
        base + self.shift(x, site)
    }

    pub fn mean(&self, x: &[f64], site: usize) -> f64 {
        0.5 * x[0] + x[1] + x[2] + x[3] + self.shift(x, site)
    }

    pub fn propensity(&self) -> Propensity {
        match self.design {
            Design::Experimental => Propensity::Constant(0.5),
            Design::Observational => Propensity::Logistic(PropensityModel::known(0.0, vec![0], vec![0.6])),
        }
    }

    /// One subject of site `site`.
    pub fn draw(&self, d: usize, site: usize, prop: &Propensity, rng: &mut Stream) -> SubjectRecord {
        let x: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        let e = prop.score(&x);
        let z = rng.random::<f64>() < e;
        let eps: f64 = rng.sample(StandardNormal);
        let zc = if z { 1.0 } else { 0.0 };
        let y = self.mean(&x, site) + (zc - e) * self.tau(&x, site) + eps;
        SubjectRecord { x, z, y }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SiteWorld {
    pub replicate_idx: u64,
    /// `datasets[k - 1]` is site `k`; site 1 carries its train/estimation split.
    pub datasets: Vec<SiteDataset>,
    /// Fresh draw from the target's distribution.
    pub test: SiteDataset,
    pub truth: Truth,
}

impl SiteWorld {
    pub fn u(&self) -> &[f64] {
        &self.truth.u
    }

    pub fn target(&self) -> &SiteDataset {
        &self.datasets[0]
    }
}

pub fn generate_world(cfg: &SimConfig, replicate_idx: u64) -> Result<SiteWorld> {
    cfg.validate()?;
    let seed = cfg.base_seed;
    let r = replicate_idx;
    let u: Vec<f64> = match cfg.grouping {
        Grouping::Discrete => (1..=cfg.k).map(|k| if k % 2 == 0 { 1.0 } else { 0.0 }).collect(),
        Grouping::Continuous => {
            let mut g = stream(seed, &[r, 0, role::GROUPS]);
            (0..cfg.k).map(|_| g.random_range(0.0..1.0)).collect()
        }
        Grouping::NonlinearPower => {
            let mut g = stream(seed, &[r, 0, role::GROUPS]);
            (0..cfg.k).map(|_| g.random_range(0.0..3.0)).collect()
        }
    };
    let truth = Truth {
        grouping: cfg.grouping,
        c: cfg.c,
        power_c: cfg.power_c.unwrap_or(cfg.c),
        design: cfg.design,
        u,
    };
    let prop = truth.propensity();

    let datasets = (1..=cfg.k)
        .map(|k| {
            let mut g = stream(seed, &[r, k as u64, role::DATA]);
            let records = (0..cfg.site_size(k)).map(|_| truth.draw(cfg.d, k, &prop, &mut g)).collect();
            let mut data = SiteDataset::new(k, records);
            if k == 1 {
                let mut order: Vec<usize> = (0..data.len()).collect();
                order.shuffle(&mut stream(seed, &[r, 1, role::SPLIT]));
                let half = data.len() / 2;
                let mut train_idx = order[..half].to_vec();
                let mut estimate_idx = order[half..].to_vec();
                train_idx.sort_unstable();
                estimate_idx.sort_unstable();
                data.split = Some(SitePartition {
                    train_idx,
                    estimate_idx,
                });
            }
            data
        })
        .collect();

    let mut g = stream(seed, &[r, 1, role::TEST]);
    let test = SiteDataset::new(1, (0..cfg.n_test).map(|_| truth.draw(cfg.d, 1, &prop, &mut g)).collect());
    Ok(SiteWorld {
        replicate_idx,
        datasets,
        test,
        truth,
    })
}
