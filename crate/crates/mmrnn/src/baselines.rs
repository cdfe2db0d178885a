//! Comparison systems: imputation preprocessors that regrid sequences to a
//! daily grid, and schedule presets for the two degenerate blends (always-one
//! and always-zero decay weight).

use serde::{Deserialize, Serialize};

use crate::data::{Dataset, GroupSequence, OrderStep};
use crate::decay::{DecaySpec, ScheduleKind};
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::numerics::Vector;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ImputePolicy {
    /// Fill gaps with the global mean order of the training corpus.
    Mean,
    /// Fill gaps with copies of the most recent real order.
    Forward,
    /// Fill gaps with empty orders.
    Zero,
}

/// Mean count vector over all orders in a corpus.
pub fn global_mean_order(ds: &Dataset) -> Result<Vector> {
    let orders = ds.total_orders();
    if orders == 0 {
        return Err(Error::data(
            "cannot take the mean of an empty corpus".to_string(),
        ));
    }
    let mut mean = Vector::zeros(ds.n_items());
    for group in &ds.groups {
        for step in &group.steps {
            mean.add_scaled(1.0, &step.counts);
        }
    }
    mean.scale(1.0 / orders as f64);
    Ok(mean)
}

fn fill_value(policy: ImputePolicy, prev: &Vector, mean: &Vector, n_items: usize) -> Vector {
    match policy {
        ImputePolicy::Mean => mean.clone(),
        ImputePolicy::Forward => prev.clone(),
        ImputePolicy::Zero => Vector::zeros(n_items),
    }
}

/// Expand one sequence to a daily grid: a gap of `delta_t` days becomes
/// `delta_t - 1` synthetic orders followed by the real order, all with
/// delta_t = 1. Real orders keep their values.
pub fn impute_sequence(
    seq: &GroupSequence,
    policy: ImputePolicy,
    mean: &Vector,
    n_items: usize,
) -> Result<GroupSequence> {
    let mut steps: Vec<OrderStep> = Vec::with_capacity(seq.len());
    for (t, step) in seq.steps.iter().enumerate() {
        if t == 0 {
            steps.push(step.clone());
            continue;
        }
        let dt = step.delta_t.ok_or_else(|| {
            Error::State(format!(
                "group {} order {} is missing its gap",
                seq.group_id,
                t + 1
            ))
        })?;
        if dt < 1.0 {
            return Err(Error::data(format!(
                "group {} has a {dt}-day gap; same-day orders cannot be regridded \
                 (merge them first)",
                seq.group_id
            )));
        }
        let gap_days = dt as usize;
        let prev = steps
            .last()
            .expect("first order already pushed")
            .counts
            .clone();
        for _ in 0..gap_days - 1 {
            steps.push(OrderStep {
                delta_t: Some(1.0),
                counts: fill_value(policy, &prev, mean, n_items),
            });
        }
        steps.push(OrderStep {
            delta_t: Some(1.0),
            counts: step.counts.clone(),
        });
    }
    Ok(GroupSequence {
        group_id: seq.group_id.clone(),
        steps,
    })
}

/// Regrid a corpus to daily resolution under `policy`, using `mean` as the
/// fill for the mean policy (pass the training corpus's mean when imputing
/// anything other than the training corpus itself).
pub fn impute_with_mean(
    ds: &Dataset,
    policy: ImputePolicy,
    mean: Option<&Vector>,
) -> Result<Dataset> {
    let owned_mean;
    let mean = match (policy, mean) {
        (ImputePolicy::Mean, Some(m)) => {
            if m.len() != ds.n_items() {
                return Err(Error::Dimension(format!(
                    "mean vector has {} items, corpus has {}",
                    m.len(),
                    ds.n_items()
                )));
            }
            m
        }
        (ImputePolicy::Mean, None) => {
            owned_mean = global_mean_order(ds)?;
            &owned_mean
        }
        _ => {
            owned_mean = Vector::zeros(ds.n_items());
            &owned_mean
        }
    };
    let groups = ds
        .groups
        .iter()
        .map(|g| impute_sequence(g, policy, mean, ds.n_items()))
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        vocab: ds.vocab.clone(),
        groups,
        regridded: true,
    })
}

/// Regrid a corpus using its own global mean for the mean policy.
pub fn impute(ds: &Dataset, policy: ImputePolicy) -> Result<Dataset> {
    impute_with_mean(ds, policy, None)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PresetKind {
    /// Pass the configured schedule through unchanged.
    Mmrnn,
    /// Force the blend weight to 1 on every non-first step (kappa = 0).
    VanillaLstm,
    /// Force the blend weight to 0 on every step.
    Exchangeable,
}

/// Derive a baseline configuration from a base config by replacing the decay
/// schedule.
pub fn preset(kind: PresetKind, base: &ModelConfig) -> ModelConfig {
    let mut config = base.clone();
    config.schedule = match kind {
        PresetKind::Mmrnn => base.schedule,
        PresetKind::VanillaLstm => {
            let t0 = match &base.schedule {
                ScheduleKind::PowerLaw(spec) => spec.t0,
                ScheduleKind::Zero => 1.0,
            };
            ScheduleKind::PowerLaw(DecaySpec { t0, kappa: 0.0 })
        }
        PresetKind::Exchangeable => ScheduleKind::Zero,
    };
    config
}

/// The full comparison-system surface exposed by the CLI.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BaselineKind {
    Mmrnn,
    Lstm,
    Exchangeable,
    ImputeMean,
    ImputeForward,
    ImputeZero,
}

impl BaselineKind {
    pub const ALL: [BaselineKind; 6] = [
        BaselineKind::Mmrnn,
        BaselineKind::Lstm,
        BaselineKind::Exchangeable,
        BaselineKind::ImputeMean,
        BaselineKind::ImputeForward,
        BaselineKind::ImputeZero,
    ];

    pub fn name(self) -> &'static str {
        match self {
            BaselineKind::Mmrnn => "mmrnn",
            BaselineKind::Lstm => "lstm",
            BaselineKind::Exchangeable => "exchangeable",
            BaselineKind::ImputeMean => "impute-mean",
            BaselineKind::ImputeForward => "impute-forward",
            BaselineKind::ImputeZero => "impute-zero",
        }
    }

    pub fn preset_kind(self) -> PresetKind {
        match self {
            BaselineKind::Mmrnn => PresetKind::Mmrnn,
            BaselineKind::Exchangeable => PresetKind::Exchangeable,
            // imputed corpora feed the plain recurrent pipeline
            BaselineKind::Lstm
            | BaselineKind::ImputeMean
            | BaselineKind::ImputeForward
            | BaselineKind::ImputeZero => PresetKind::VanillaLstm,
        }
    }

    pub fn impute_policy(self) -> Option<ImputePolicy> {
        match self {
            BaselineKind::ImputeMean => Some(ImputePolicy::Mean),
            BaselineKind::ImputeForward => Some(ImputePolicy::Forward),
            BaselineKind::ImputeZero => Some(ImputePolicy::Zero),
            _ => None,
        }
    }
}

impl std::str::FromStr for BaselineKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        BaselineKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown baseline {s:?}; expected one of {}",
                    BaselineKind::ALL.map(|k| k.name()).join(", ")
                ))
            })
    }
}

impl std::fmt::Display for BaselineKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}
