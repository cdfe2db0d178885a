//! The alternating MAP optimizer: per-group bias steps, shared-parameter
//! steps via backprop through time, and multiplicative nonnegative updates
//! of the mixing matrix.
//!
//! Each epoch sweeps the groups once (optionally shuffled), steps every
//! group's bias immediately, steps theta on the accumulated gradient, then
//! (topic mode) applies the multiplicative update using softmax outputs
//! cached from that same sweep. The sweep fans out over the parallel map in
//! [`crate::par`] and folds in group order, so results are identical bitwise
//! with and without the `parallel` feature and across thread counts.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, GroupSequence};
use crate::error::{Error, Result};
use crate::model::{
    backward_sequence, data_loss, forward_sequence_cached, full_objective, Mode, ModelState, Theta,
    ThetaGrads, TopicMatrix,
};
use crate::numerics::{Matrix, Vector};
use crate::par;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Step size for the bias and theta gradient steps. Must be >= 0; a
    /// value of exactly 0 freezes every parameter (including the mixing
    /// matrix) and turns training into a pure objective sweep, which is
    /// occasionally useful as a diagnostic.
    pub lr: f64,
    pub epochs: usize,
    /// Seed for the shuffle order (unused when `shuffle` is off).
    pub seed: u64,
    /// Run the multiplicative mixing-matrix update each epoch (topic mode).
    pub update_topics: bool,
    /// Multiplicative updates per epoch.
    pub nmf_inner_iters: usize,
    pub shuffle: bool,
    /// Groups per gradient step for theta; `None` means full batch. Bias
    /// steps are per-group either way.
    pub batch_size: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 0.01,
            epochs: 20,
            seed: 0,
            update_topics: true,
            nmf_inner_iters: 1,
            shuffle: false,
            batch_size: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0) {
            return Err(Error::Config(format!(
                "learning rate must be >= 0, got {}",
                self.lr
            )));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be >= 1".to_string()));
        }
        if self.nmf_inner_iters == 0 {
            return Err(Error::Config("nmf_inner_iters must be >= 1".to_string()));
        }
        if self.batch_size == Some(0) {
            return Err(Error::Config("batch_size must be >= 1".to_string()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochStat {
    /// Full MAP objective (priors + data terms) after the epoch's updates.
    pub objective: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainTrace {
    pub epochs: Vec<EpochStat>,
}

struct GroupCols {
    sigma: Vec<Vector>,
    y_over_n: Vec<Vector>,
}

struct GroupWork {
    theta_grads: ThetaGrads,
    dphi_data: Vector,
    cols: Option<GroupCols>,
}

/// Gradient of the full objective with respect to one group's bias: the
/// data term plus the phi/b prior pull. The group is identified by the
/// sequence's group id.
pub fn phi_gradient(state: &ModelState, seq: &GroupSequence) -> Result<Vector> {
    let idx = state
        .bias_index(&seq.group_id)
        .ok_or_else(|| Error::State(format!("unknown group {}", seq.group_id)))?;
    let bias = &state.group_bias[idx];
    let (preds, tape) = forward_sequence_cached(
        &state.config,
        &state.theta,
        bias,
        state.topics.as_ref(),
        seq,
    )?;
    let (_, mut dphi) = backward_sequence(
        &state.config,
        &state.theta,
        bias,
        state.topics.as_ref(),
        seq,
        &preds,
        &tape,
    )?;
    dphi.add_scaled(1.0 / state.config.phi_prior_var, &bias.phi);
    Ok(dphi)
}

/// One multiplicative update B <- B .* (Y S^T) ./ (B S S^T) with the
/// denominator floored at 1e-10. `sigma` is K x T of cached softmax columns;
/// `y` is V x T of targets scaled to match (columns y_t / n_t). The
/// Frobenius reconstruction error ||Y - B S|| never increases.
pub fn nmf_update_b(b: &Matrix, sigma: &Matrix, y: &Matrix) -> Result<Matrix> {
    const DENOM_FLOOR: f64 = 1e-10;
    if b.data().iter().any(|&x| x < 0.0) {
        return Err(Error::State(
            "mixing matrix has a negative entry".to_string(),
        ));
    }
    if sigma.cols() != y.cols() || b.cols() != sigma.rows() || b.rows() != y.rows() {
        return Err(Error::Dimension(format!(
            "nmf shapes disagree: B {}x{}, sigma {}x{}, Y {}x{}",
            b.rows(),
            b.cols(),
            sigma.rows(),
            sigma.cols(),
            y.rows(),
            y.cols()
        )));
    }
    let sigma_t = sigma.transpose();
    let numerator = y.matmul(&sigma_t)?;
    // associate as (B S) S^T so that Y = B S gives numerator == denominator
    // bitwise and the update is an exact fixed point
    let denominator = b.matmul(sigma)?.matmul(&sigma_t)?;
    let mut out = b.clone();
    for r in 0..out.rows() {
        for c in 0..out.cols() {
            let scale = numerator.get(r, c) / denominator.get(r, c).max(DENOM_FLOOR);
            out.set(r, c, out.get(r, c) * scale);
        }
    }
    if !out.all_finite() {
        return Err(Error::Numerical(
            "mixing matrix update produced a non-finite entry".to_string(),
        ));
    }
    Ok(out)
}

fn check_alignment(state: &ModelState, data: &Dataset) -> Result<()> {
    if data.n_groups() == 0 {
        return Err(Error::data("training set has no groups".to_string()));
    }
    if data.n_items() != state.config.n_items {
        return Err(Error::Dimension(format!(
            "dataset has {} items, model expects {}",
            data.n_items(),
            state.config.n_items
        )));
    }
    if state.group_bias.len() != data.n_groups() {
        return Err(Error::Dimension(format!(
            "model carries {} group biases, dataset has {} groups",
            state.group_bias.len(),
            data.n_groups()
        )));
    }
    for (bias, group) in state.group_bias.iter().zip(&data.groups) {
        if bias.group_id != group.group_id {
            return Err(Error::State(format!(
                "model/dataset group order mismatch: {} vs {}",
                bias.group_id, group.group_id
            )));
        }
    }
    Ok(())
}

/// Run the optimizer for `config.epochs` epochs, mutating `state` in place.
/// Deterministic given the seed, dataset, and initial state.
pub fn train(config: &TrainConfig, state: &mut ModelState, data: &Dataset) -> Result<TrainTrace> {
    train_with_progress(config, state, data, |_, _| {})
}

/// Same as [`train`], invoking `on_epoch(index, stat)` after each epoch.
pub fn train_with_progress(
    config: &TrainConfig,
    state: &mut ModelState,
    data: &Dataset,
    mut on_epoch: impl FnMut(usize, &EpochStat),
) -> Result<TrainTrace> {
    config.validate()?;
    state.validate()?;
    check_alignment(state, data)?;

    let d = data.n_groups();
    let batch = config.batch_size.unwrap_or(d).min(d);
    let stepping = config.lr > 0.0;
    let want_cols = state.config.mode == Mode::Topic && config.update_topics && stepping;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut trace = TrainTrace::default();

    for epoch in 0..config.epochs {
        let started = Instant::now();
        let mut order: Vec<usize> = (0..d).collect();
        if config.shuffle {
            order.shuffle(&mut rng);
        }
        let mut cols: Vec<Option<GroupCols>> = (0..d).map(|_| None).collect();

        for chunk in order.chunks(batch) {
            let works: Vec<Result<GroupWork>> = {
                let mconfig = &state.config;
                let theta = &state.theta;
                let topics = state.topics.as_ref();
                let biases = &state.group_bias;
                par::map_collect(chunk, |&gi| {
                    let seq = &data.groups[gi];
                    let run = || -> Result<GroupWork> {
                        let (preds, tape) =
                            forward_sequence_cached(mconfig, theta, &biases[gi], topics, seq)?;
                        // data_loss doubles as the per-group divergence check
                        data_loss(mconfig, &preds, seq)?;
                        let (theta_grads, dphi_data) = backward_sequence(
                            mconfig,
                            theta,
                            &biases[gi],
                            topics,
                            seq,
                            &preds,
                            &tape,
                        )?;
                        let cols = want_cols.then(|| {
                            let mut sigma = Vec::with_capacity(seq.len());
                            let mut y_over_n = Vec::with_capacity(seq.len());
                            for (pred, step) in preds.iter().zip(&seq.steps) {
                                let n = step.total();
                                if n > 0.0 {
                                    sigma.push(pred.sigma.clone());
                                    let mut y = step.counts.clone();
                                    y.scale(1.0 / n);
                                    y_over_n.push(y);
                                }
                            }
                            GroupCols { sigma, y_over_n }
                        });
                        Ok(GroupWork {
                            theta_grads,
                            dphi_data,
                            cols,
                        })
                    };
                    run().map_err(|e| e.with_context(&format!("group {}", seq.group_id)))
                })
            };

            let mut theta_grads = ThetaGrads::zeros(&state.config);
            for (&gi, work) in chunk.iter().zip(works) {
                let work = work?;
                theta_grads.add(&work.theta_grads);
                if stepping {
                    let bias = &mut state.group_bias[gi];
                    let mut dphi = work.dphi_data;
                    dphi.add_scaled(1.0 / state.config.phi_prior_var, &bias.phi);
                    bias.phi.add_scaled(-config.lr, &dphi);
                    if !bias.phi.all_finite() {
                        return Err(Error::Numerical(format!(
                            "bias for group {} became non-finite",
                            bias.group_id
                        )));
                    }
                }
                cols[gi] = work.cols;
            }

            if stepping {
                // spread the theta prior across batches so one epoch applies
                // exactly one full prior pull regardless of batch size
                let prior = chunk.len() as f64 / (d as f64 * state.config.theta_prior_var);
                theta_grads.cell.dw.add_scaled(prior, &state.theta.cell.w);
                theta_grads.cell.du.add_scaled(prior, &state.theta.cell.u);
                theta_grads.cell.db.add_scaled(prior, &state.theta.cell.b);
                theta_grads.proj.add_scaled(prior, &state.theta.proj);
                let mut store = state.theta.to_param_store();
                Theta::write_grads(&mut store, &theta_grads);
                store.sgd_step(config.lr)?;
                state.theta = Theta::from_param_store(&store)?;
                if !state.theta.all_finite() {
                    return Err(Error::Numerical(
                        "shared parameters became non-finite".to_string(),
                    ));
                }
            }
        }

        if want_cols {
            let t_total: usize = cols
                .iter()
                .map(|c| c.as_ref().map_or(0, |c| c.sigma.len()))
                .sum();
            if t_total > 0 {
                let k = state.config.mix_dim;
                let v = state.config.n_items;
                let mut sigma_mat = Matrix::zeros(k, t_total);
                let mut y_mat = Matrix::zeros(v, t_total);
                let mut col = 0;
                for group_cols in cols.iter().flatten() {
                    for (s, y) in group_cols.sigma.iter().zip(&group_cols.y_over_n) {
                        for r in 0..k {
                            sigma_mat.set(r, col, s[r]);
                        }
                        for r in 0..v {
                            y_mat.set(r, col, y[r]);
                        }
                        col += 1;
                    }
                }
                let mut bmat = state.topics.as_ref().unwrap().matrix().clone();
                for _ in 0..config.nmf_inner_iters {
                    bmat = nmf_update_b(&bmat, &sigma_mat, &y_mat)?;
                }
                state.topics = Some(TopicMatrix::new(bmat)?);
            }
        }

        let objective = full_objective(
            &state.config,
            &state.theta,
            &state.group_bias,
            state.topics.as_ref(),
            data,
        )?;
        let stat = EpochStat {
            objective,
            seconds: started.elapsed().as_secs_f64(),
        };
        on_epoch(epoch, &stat);
        trace.epochs.push(stat);
    }
    Ok(trace)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, OrderStep, SyntheticSpec};
    use crate::decay::{DecaySpec, ScheduleKind};
    use crate::model::{forward_sequence, GroupBias, ModelConfig};
    use crate::numerics::{finite_diff_grad, rel_error, ParamStore};

    fn power_law(t0: f64, kappa: f64) -> ScheduleKind {
        ScheduleKind::PowerLaw(DecaySpec { t0, kappa })
    }

    fn small_corpus(seed: u64) -> Dataset {
        generate_synthetic(&SyntheticSpec {
            groups: 6,
            topics: 2,
            items: 5,
            orders_min: 3,
            orders_max: 5,
            order_size: (2, 6),
            hidden_dim: 3,
            seed,
            ..SyntheticSpec::default()
        })
        .unwrap()
        .0
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        assert!(TrainConfig {
            epochs: 0,
            ..TrainConfig::default()
        }
        .validate()
        .is_err());
        assert!(TrainConfig {
            lr: -0.1,
            ..TrainConfig::default()
        }
        .validate()
        .is_err());
        assert!(TrainConfig {
            batch_size: Some(0),
            ..TrainConfig::default()
        }
        .validate()
        .is_err());
    }

    #[test]
    fn zero_lr_freezes_parameters() {
        let data = small_corpus(1);
        let config = ModelConfig::topic(5, 2, 3, power_law(1.0, 0.3));
        let mut state = ModelState::init(&config, 7, &data).unwrap();
        let before = state.clone();
        let trace = train(
            &TrainConfig {
                lr: 0.0,
                epochs: 1,
                ..TrainConfig::default()
            },
            &mut state,
            &data,
        )
        .unwrap();
        assert_eq!(trace.epochs.len(), 1);
        assert!(trace.epochs[0].objective.is_finite());
        assert_eq!(state, before);
    }

    #[test]
    fn single_order_group_gives_theta_prior_only_step() {
        // one group, one order: rho_1 = 0 blocks every data path into theta,
        // so the epoch's theta step is exactly the prior pull
        let data = Dataset {
            groups: vec![crate::data::GroupSequence {
                group_id: "g".to_string(),
                steps: vec![OrderStep {
                    delta_t: None,
                    counts: Vector::from_vec(vec![2.0, 0.0, 1.0]),
                }],
            }],
            vocab: crate::data::Vocabulary::from_ids(["a", "b", "c"].map(str::to_string)).unwrap(),
            regridded: false,
        };
        let config = ModelConfig::topic(3, 2, 2, power_law(1.0, 0.5));
        let mut state = ModelState::init(&config, 3, &data).unwrap();
        let theta0 = state.theta.clone();
        let phi0 = state.group_bias[0].phi.clone();
        let topics0 = state.topics.clone().unwrap();
        let lr = 0.05;
        train(
            &TrainConfig {
                lr,
                epochs: 1,
                ..TrainConfig::default()
            },
            &mut state,
            &data,
        )
        .unwrap();
        let expect = |x: f64| x - lr * ((1.0 / config.theta_prior_var) * x);
        for (got, want) in state
            .theta
            .cell
            .w
            .data()
            .iter()
            .zip(theta0.cell.w.data().iter().map(|&x| expect(x)))
        {
            assert_eq!(*got, want);
        }
        for (got, want) in state
            .theta
            .proj
            .data()
            .iter()
            .zip(theta0.proj.data().iter().map(|&x| expect(x)))
        {
            assert_eq!(*got, want);
        }
        assert_ne!(state.group_bias[0].phi, phi0);
        assert_ne!(state.topics.unwrap(), topics0);
    }

    #[test]
    fn phi_gradient_blocked_when_rho_is_one() {
        // with kappa = 0 every non-first step has rho = 1, so only the first
        // order's residual reaches phi; the tail of the sequence adds nothing
        let config = ModelConfig::basic(3, 2, power_law(1.0, 0.0));
        let data = small_corpus(3);
        let mut seq = data.groups[0].clone();
        seq.steps.truncate(4);
        let first_only = crate::data::GroupSequence {
            group_id: seq.group_id.clone(),
            steps: seq.steps[..1].to_vec(),
        };
        let mut tiny = Dataset {
            vocab: crate::data::Vocabulary::from_ids(["a", "b", "c"].map(str::to_string)).unwrap(),
            groups: vec![seq.clone()],
            regridded: false,
        };
        // remap counts to 3 items
        for step in &mut tiny.groups[0].steps {
            step.counts = Vector::from_vec(step.counts.as_slice()[..3].to_vec());
            if step.counts.sum() == 0.0 {
                step.counts = Vector::from_vec(vec![1.0, 0.0, 0.0]);
            }
        }
        let mut state = ModelState::init(&config, 5, &tiny).unwrap();
        state.group_bias[0].phi = Vector::from_vec(vec![0.3, -0.2, 0.1]);
        let full = phi_gradient(&state, &tiny.groups[0]).unwrap();
        let mut first = first_only.clone();
        first.steps = tiny.groups[0].steps[..1].to_vec();
        let head = phi_gradient(&state, &first).unwrap();
        for i in 0..3 {
            assert!((full[i] - head[i]).abs() < 1e-15, "component {i}");
        }
    }

    #[test]
    fn phi_gradient_zero_at_optimum_without_prior() {
        // uniform targets, zero bias, huge prior variance: predictions are
        // exact and the prior pull is negligible, so the gradient vanishes
        let mut config = ModelConfig::basic(2, 2, ScheduleKind::Zero);
        config.phi_prior_var = 1e300;
        let data = Dataset {
            vocab: crate::data::Vocabulary::from_ids(["a", "b"].map(str::to_string)).unwrap(),
            groups: vec![crate::data::GroupSequence {
                group_id: "g".to_string(),
                steps: vec![
                    OrderStep {
                        delta_t: None,
                        counts: Vector::from_vec(vec![3.0, 3.0]),
                    },
                    OrderStep {
                        delta_t: Some(2.0),
                        counts: Vector::from_vec(vec![5.0, 5.0]),
                    },
                ],
            }],
            regridded: false,
        };
        let state = ModelState::init(&config, 2, &data).unwrap();
        let grad = phi_gradient(&state, &data.groups[0]).unwrap();
        for i in 0..2 {
            assert_eq!(grad[i], 0.0);
        }
    }

    #[test]
    fn phi_gradient_matches_finite_differences() {
        let data = small_corpus(8);
        let config = ModelConfig::topic(5, 2, 3, power_law(1.0, 0.4));
        let mut state = ModelState::init(&config, 11, &data).unwrap();
        state.group_bias[2].phi = Vector::from_vec(vec![0.4, -0.6]);
        let analytic = phi_gradient(&state, &data.groups[2]).unwrap();

        let mut store = ParamStore::new();
        store.insert_vec("phi", state.group_bias[2].phi.clone());
        let numeric = finite_diff_grad(
            |s| {
                let bias = GroupBias {
                    group_id: data.groups[2].group_id.clone(),
                    phi: s.vec("phi").clone(),
                };
                let preds = forward_sequence(
                    &state.config,
                    &state.theta,
                    &bias,
                    state.topics.as_ref(),
                    &data.groups[2],
                )?;
                let mut obj = data_loss(&state.config, &preds, &data.groups[2])?;
                obj += bias.phi.l2_norm_sq() / (2.0 * state.config.phi_prior_var);
                Ok(obj)
            },
            &store,
            1e-5,
        )
        .unwrap();
        for (a, n) in analytic.iter().zip(&numeric) {
            assert!(rel_error(*a, *n) <= 1e-4, "{a} vs {n}");
        }
    }

    #[test]
    fn nmf_fixed_point_and_nonnegativity() {
        let b = Matrix::from_rows(vec![vec![0.5, 0.1], vec![0.2, 0.7], vec![0.3, 0.2]]).unwrap();
        let sigma =
            Matrix::from_rows(vec![vec![0.9, 0.3, 0.5, 0.2], vec![0.1, 0.7, 0.5, 0.8]]).unwrap();
        let y = b.matmul(&sigma).unwrap();
        let next = nmf_update_b(&b, &sigma, &y).unwrap();
        for (a, e) in next.data().iter().zip(b.data()) {
            assert_eq!(a.to_bits(), e.to_bits());
        }

        let mut neg = b.clone();
        neg.set(0, 0, -0.5);
        assert!(matches!(
            nmf_update_b(&neg, &sigma, &y),
            Err(Error::State(_))
        ));
        assert!(nmf_update_b(&b, &sigma, &Matrix::zeros(3, 3)).is_err());
    }

    #[test]
    fn nmf_error_is_non_increasing() {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let mut b = Matrix::zeros(6, 3);
        for v in b.data_mut() {
            *v = rng.random::<f64>();
        }
        let mut sigma = Matrix::zeros(3, 10);
        for v in sigma.data_mut() {
            *v = rng.random::<f64>();
        }
        let mut y = Matrix::zeros(6, 10);
        for v in y.data_mut() {
            *v = rng.random::<f64>();
        }
        let frob = |b: &Matrix| {
            let mut diff = b.matmul(&sigma).unwrap();
            diff.add_scaled(-1.0, &y);
            diff.frobenius_norm_sq().sqrt()
        };
        let mut err = frob(&b);
        for _ in 0..50 {
            b = nmf_update_b(&b, &sigma, &y).unwrap();
            assert!(b.data().iter().all(|&x| x >= 0.0));
            let next = frob(&b);
            assert!(next <= err + 1e-10, "{next} > {err}");
            err = next;
        }
    }

    #[test]
    fn training_is_deterministic() {
        let data = small_corpus(10);
        let config = ModelConfig::topic(5, 2, 3, power_law(1.0, 0.3));
        let tcfg = TrainConfig {
            epochs: 3,
            shuffle: true,
            seed: 99,
            batch_size: Some(2),
            ..TrainConfig::default()
        };
        let mut a = ModelState::init(&config, 7, &data).unwrap();
        let trace_a = train(&tcfg, &mut a, &data).unwrap();
        let mut b = ModelState::init(&config, 7, &data).unwrap();
        let trace_b = train(&tcfg, &mut b, &data).unwrap();
        assert_eq!(a, b);
        for (x, y) in trace_a.epochs.iter().zip(&trace_b.epochs) {
            assert_eq!(x.objective.to_bits(), y.objective.to_bits());
        }
        let mut c = ModelState::init(&config, 7, &data).unwrap();
        let trace_c = train(
            &TrainConfig {
                seed: 100,
                ..tcfg.clone()
            },
            &mut c,
            &data,
        )
        .unwrap();
        assert_ne!(
            trace_a.epochs.last().unwrap().objective.to_bits(),
            trace_c.epochs.last().unwrap().objective.to_bits()
        );
    }

    #[test]
    fn objective_decreases_on_synthetic_corpus() {
        let data = small_corpus(20);
        let config = ModelConfig::topic(5, 2, 3, power_law(1.0, 0.3));
        let mut state = ModelState::init(&config, 1, &data).unwrap();
        let trace = train(
            &TrainConfig {
                epochs: 8,
                ..TrainConfig::default()
            },
            &mut state,
            &data,
        )
        .unwrap();
        assert!(trace.epochs.iter().all(|e| e.objective.is_finite()));
        assert!(
            trace.epochs.last().unwrap().objective < trace.epochs[0].objective,
            "{:?}",
            trace.epochs
        );
    }

    #[test]
    fn misaligned_state_rejected() {
        let data = small_corpus(30);
        let config = ModelConfig::topic(5, 2, 3, power_law(1.0, 0.3));
        let mut state = ModelState::init(&config, 1, &data).unwrap();
        state.group_bias.swap(0, 1);
        assert!(train(&TrainConfig::default(), &mut state, &data).is_err());
    }
}
