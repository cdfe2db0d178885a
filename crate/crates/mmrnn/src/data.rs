//! Dataset ingestion, preprocessing, and the synthetic corpus generator.
//!
//! Order logs arrive in a long CSV format, one row per (group, order, item)
//! triple. Parsing is total: a file either yields a valid [`Dataset`] or a
//! row-addressed error. Counts are stored as f64 so that regridded
//! (imputation-expanded) corpora, which may contain real-valued or empty
//! orders, share the same representation; strict integer invariants are
//! enforced at ingestion for ordinary corpora.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, Normal};
use serde::{Deserialize, Serialize};

use crate::cells::{CellState, LstmParams};
use crate::decay::{DecaySchedule, ScheduleKind};
use crate::error::{Error, Result};
use crate::numerics::{softmax, Matrix, Vector};

pub const ORDERS_HEADER: &str = "group_id,order_index,days_since_prior,item_id,count";
pub const AISLES_HEADER: &str = "item_id,aisle_id";

/// Default cap on the gap between consecutive orders, in days.
pub const DEFAULT_MAX_GAP_DAYS: f64 = 30.0;

/// Item vocabulary: dense index <-> external id, plus optional aisle ids.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Vocabulary {
    ids: Vec<String>,
    index: HashMap<String, usize>,
    /// aisle id per item index, where known
    aisles: HashMap<usize, String>,
}

impl Vocabulary {
    pub fn new() -> Self {
        Vocabulary::default()
    }

    /// Rebuild a vocabulary from an id list (e.g. from a persisted model).
    /// Duplicate ids are rejected.
    pub fn from_ids<I: IntoIterator<Item = String>>(ids: I) -> Result<Self> {
        let mut vocab = Vocabulary::new();
        for id in ids {
            let before = vocab.len();
            vocab.intern(&id);
            if vocab.len() == before {
                return Err(Error::data(format!("duplicate item id {id:?}")));
            }
        }
        Ok(vocab)
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn intern(&mut self, id: &str) -> usize {
        if let Some(&idx) = self.index.get(id) {
            return idx;
        }
        let idx = self.ids.len();
        self.ids.push(id.to_string());
        self.index.insert(id.to_string(), idx);
        idx
    }

    pub fn get(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    pub fn id(&self, idx: usize) -> &str {
        &self.ids[idx]
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn aisle(&self, idx: usize) -> Option<&str> {
        self.aisles.get(&idx).map(|s| s.as_str())
    }

    pub fn set_aisle(&mut self, idx: usize, aisle: &str) {
        self.aisles.insert(idx, aisle.to_string());
    }
}

/// One order inside a group's sequence. `delta_t` is the gap in days since
/// the previous order; it is absent exactly on the first order.
#[derive(Debug, Clone, PartialEq)]
pub struct OrderStep {
    pub delta_t: Option<f64>,
    pub counts: Vector,
}

impl OrderStep {
    pub fn total(&self) -> f64 {
        self.counts.sum()
    }
}

/// A group's time-stamped sequence of count vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupSequence {
    pub group_id: String,
    pub steps: Vec<OrderStep>,
}

impl GroupSequence {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Dataset {
    pub vocab: Vocabulary,
    pub groups: Vec<GroupSequence>,
    /// True when the corpus has been expanded to a daily grid by an
    /// imputation policy; such corpora may contain empty or real-valued
    /// orders, which ordinary corpora reject.
    pub regridded: bool,
}

impl Dataset {
    pub fn n_items(&self) -> usize {
        self.vocab.len()
    }

    pub fn n_groups(&self) -> usize {
        self.groups.len()
    }

    pub fn total_orders(&self) -> usize {
        self.groups.iter().map(|g| g.len()).sum()
    }

    /// Mean total count per order.
    pub fn mean_order_count(&self) -> f64 {
        let orders = self.total_orders();
        if orders == 0 {
            return 0.0;
        }
        let total: f64 = self
            .groups
            .iter()
            .flat_map(|g| g.steps.iter().map(|s| s.total()))
            .sum();
        total / orders as f64
    }
}

// ---------------------------------------------------------------------------
// CSV ingestion
// ---------------------------------------------------------------------------

struct OrderBuild {
    days: Option<f64>,
    first_row: usize,
    items: HashMap<usize, f64>,
    empty_marker: bool,
}

/// Parse an orders CSV with the default 30-day gap cap.
pub fn load_orders_csv(path: impl AsRef<Path>) -> Result<Dataset> {
    load_orders_csv_with_cap(path, DEFAULT_MAX_GAP_DAYS)
}

pub fn load_orders_csv_with_cap(path: impl AsRef<Path>, max_gap: f64) -> Result<Dataset> {
    let path = path.as_ref();
    let text =
        std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    parse_orders_csv(&text, max_gap)
}

pub fn parse_orders_csv(text: &str, max_gap: f64) -> Result<Dataset> {
    let mut lines = text.lines().enumerate();
    let (_, header) = lines
        .next()
        .ok_or_else(|| Error::data_at(1, "empty file, expected header".to_string()))?;
    if header.trim_end_matches('\r') != ORDERS_HEADER {
        return Err(Error::data_at(
            1,
            format!("bad header {header:?}, expected {ORDERS_HEADER:?}"),
        ));
    }

    let mut vocab = Vocabulary::new();
    let mut group_order: Vec<String> = Vec::new();
    let mut builds: HashMap<String, HashMap<usize, OrderBuild>> = HashMap::new();
    let mut regridded = false;

    for (line_idx, raw) in lines {
        let row = line_idx + 1; // 1-based, header is row 1
        let line = raw.trim_end_matches('\r');
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 5 {
            return Err(Error::data_at(
                row,
                format!("expected 5 fields, found {}", fields.len()),
            ));
        }
        let group_id = fields[0];
        if group_id.is_empty() {
            return Err(Error::data_at(row, "empty group_id".to_string()));
        }
        let order_index: usize = fields[1]
            .parse()
            .map_err(|_| Error::data_at(row, format!("bad order_index {:?}", fields[1])))?;
        if order_index == 0 {
            return Err(Error::data_at(row, "order_index must be >= 1".to_string()));
        }
        let days: Option<f64> = if fields[2].is_empty() {
            None
        } else {
            let d: f64 = fields[2].parse().map_err(|_| {
                Error::data_at(row, format!("bad days_since_prior {:?}", fields[2]))
            })?;
            if !d.is_finite() || d < 0.0 {
                return Err(Error::data_at(
                    row,
                    format!("days_since_prior must be a non-negative number, got {d}"),
                ));
            }
            if d.fract() != 0.0 {
                return Err(Error::data_at(
                    row,
                    format!("days_since_prior must be a whole number of days, got {d}"),
                ));
            }
            if d > max_gap {
                return Err(Error::data_at(
                    row,
                    format!("days_since_prior {d} exceeds the {max_gap}-day cap"),
                ));
            }
            Some(d)
        };
        if order_index == 1 && days.is_some() {
            return Err(Error::data_at(
                row,
                "first order of a group must have an empty days_since_prior".to_string(),
            ));
        }
        if order_index > 1 && days.is_none() {
            return Err(Error::data_at(
                row,
                format!("order_index {order_index} requires days_since_prior"),
            ));
        }
        let count: f64 = fields[4]
            .parse()
            .map_err(|_| Error::data_at(row, format!("bad count {:?}", fields[4])))?;
        if !count.is_finite() || count < 0.0 {
            return Err(Error::data_at(
                row,
                format!("count must be a non-negative number, got {count}"),
            ));
        }
        let item_id = fields[3];
        let is_marker = item_id.is_empty();
        if is_marker && count != 0.0 {
            return Err(Error::data_at(
                row,
                "row with empty item_id must have count 0 (empty-order marker)".to_string(),
            ));
        }
        if !is_marker && count == 0.0 {
            return Err(Error::data_at(
                row,
                "item rows must have count > 0".to_string(),
            ));
        }
        if is_marker || count.fract() != 0.0 {
            // empty orders and real-valued counts only occur in regridded corpora
            regridded = true;
        }

        if !builds.contains_key(group_id) {
            group_order.push(group_id.to_string());
        }
        let orders = builds.entry(group_id.to_string()).or_default();
        let build = orders.entry(order_index).or_insert_with(|| OrderBuild {
            days,
            first_row: row,
            items: HashMap::new(),
            empty_marker: false,
        });
        if build.days != days {
            return Err(Error::data_at(
                row,
                format!("conflicting days_since_prior for group {group_id} order {order_index}"),
            ));
        }
        if is_marker {
            if !build.items.is_empty() || build.empty_marker {
                return Err(Error::data_at(
                    row,
                    "empty-order marker conflicts with other rows for the same order".to_string(),
                ));
            }
            build.empty_marker = true;
        } else {
            if build.empty_marker {
                return Err(Error::data_at(
                    row,
                    "item row conflicts with an empty-order marker for the same order".to_string(),
                ));
            }
            let idx = vocab.intern(item_id);
            if build.items.insert(idx, count).is_some() {
                return Err(Error::data_at(
                    row,
                    format!("duplicate item {item_id} in group {group_id} order {order_index}"),
                ));
            }
        }
    }

    let n_items = vocab.len();
    let mut groups = Vec::with_capacity(group_order.len());
    for group_id in group_order {
        let orders = builds.remove(&group_id).unwrap();
        let t = orders.len();
        let mut steps = Vec::with_capacity(t);
        for idx in 1..=t {
            let build = orders.get(&idx).ok_or_else(|| {
                let max_seen = orders.keys().max().copied().unwrap_or(0);
                Error::data_at(
                    orders.values().map(|b| b.first_row).min().unwrap_or(1),
                    format!(
                        "group {group_id} order indices are not consecutive from 1 \
                         (missing {idx}, saw up to {max_seen})"
                    ),
                )
            })?;
            let mut counts = Vector::zeros(n_items);
            for (&item, &c) in &build.items {
                counts[item] = c;
            }
            steps.push(OrderStep {
                delta_t: build.days,
                counts,
            });
        }
        groups.push(GroupSequence { group_id, steps });
    }

    Ok(Dataset {
        vocab,
        groups,
        regridded,
    })
}

/// Render a value the way the canonical CSV writer does: shortest f64 form,
/// so integral values print with no decimal point.
fn fmt_value(v: f64) -> String {
    format!("{v}")
}

/// Serialize a dataset in canonical order: groups sorted by id, orders by
/// index, items sorted by id. Writing then re-loading then re-writing is
/// byte-stable.
pub fn orders_csv_string(ds: &Dataset) -> String {
    let mut group_refs: Vec<&GroupSequence> = ds.groups.iter().collect();
    group_refs.sort_by(|a, b| a.group_id.cmp(&b.group_id));
    let mut out = String::new();
    out.push_str(ORDERS_HEADER);
    out.push('\n');
    for group in group_refs {
        for (i, step) in group.steps.iter().enumerate() {
            let days = step.delta_t.map(fmt_value).unwrap_or_default();
            let mut items: Vec<(usize, f64)> = step
                .counts
                .iter()
                .enumerate()
                .filter(|(_, &c)| c != 0.0)
                .map(|(idx, &c)| (idx, c))
                .collect();
            if items.is_empty() {
                let _ = writeln!(out, "{},{},{},,0", group.group_id, i + 1, days);
                continue;
            }
            items.sort_by(|a, b| ds.vocab.id(a.0).cmp(ds.vocab.id(b.0)));
            for (idx, c) in items {
                let _ = writeln!(
                    out,
                    "{},{},{},{},{}",
                    group.group_id,
                    i + 1,
                    days,
                    ds.vocab.id(idx),
                    fmt_value(c)
                );
            }
        }
    }
    out
}

pub fn write_orders_csv(ds: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, orders_csv_string(ds))
        .map_err(|e| Error::io(path.display().to_string(), e))
}

/// Load an `item_id,aisle_id` map.
pub fn load_aisle_map(path: impl AsRef<Path>) -> Result<HashMap<String, String>> {
    let path = path.as_ref();
    let text =
        std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut lines = text.lines().enumerate();
    let (_, header) = lines
        .next()
        .ok_or_else(|| Error::data_at(1, "empty file, expected header".to_string()))?;
    if header.trim_end_matches('\r') != AISLES_HEADER {
        return Err(Error::data_at(
            1,
            format!("bad header {header:?}, expected {AISLES_HEADER:?}"),
        ));
    }
    let mut map = HashMap::new();
    for (line_idx, raw) in lines {
        let row = line_idx + 1;
        let line = raw.trim_end_matches('\r');
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 2 {
            return Err(Error::data_at(
                row,
                format!("expected 2 fields, found {}", fields.len()),
            ));
        }
        if fields[0].is_empty() || fields[1].is_empty() {
            return Err(Error::data_at(row, "empty field".to_string()));
        }
        if map
            .insert(fields[0].to_string(), fields[1].to_string())
            .is_some()
        {
            return Err(Error::data_at(
                row,
                format!("duplicate item_id {:?}", fields[0]),
            ));
        }
    }
    Ok(map)
}

// ---------------------------------------------------------------------------
// Preprocessing
// ---------------------------------------------------------------------------

/// Merge items whose corpus-wide total count falls below `threshold` into a
/// synthetic per-aisle item. Per-order total counts are preserved exactly.
pub fn aggregate_rare_items(
    ds: &Dataset,
    threshold: f64,
    item_to_aisle: &HashMap<String, String>,
) -> Result<Dataset> {
    if threshold <= 0.0 {
        return Ok(ds.clone());
    }
    let v = ds.n_items();
    let mut totals = vec![0.0f64; v];
    for group in &ds.groups {
        for step in &group.steps {
            for (idx, &c) in step.counts.iter().enumerate() {
                totals[idx] += c;
            }
        }
    }

    let rare: Vec<bool> = totals.iter().map(|&t| t < threshold).collect();
    if rare.iter().all(|&r| !r) {
        return Ok(ds.clone());
    }

    // surviving items keep their relative order; synthetic aisle items are
    // appended in sorted aisle order
    let mut new_vocab = Vocabulary::new();
    let mut remap: Vec<Option<usize>> = vec![None; v];
    for (idx, &is_rare) in rare.iter().enumerate() {
        if !is_rare {
            let new_idx = new_vocab.intern(ds.vocab.id(idx));
            if let Some(aisle) = ds.vocab.aisle(idx) {
                new_vocab.set_aisle(new_idx, aisle);
            }
            remap[idx] = Some(new_idx);
        }
    }
    let mut aisles_needed: Vec<String> = Vec::new();
    let mut rare_aisle: Vec<Option<String>> = vec![None; v];
    for (idx, &is_rare) in rare.iter().enumerate() {
        if is_rare {
            let id = ds.vocab.id(idx);
            let aisle = item_to_aisle
                .get(id)
                .or_else(|| item_to_aisle.get(ds.vocab.aisle(idx).unwrap_or_default()))
                .cloned()
                .or_else(|| ds.vocab.aisle(idx).map(|s| s.to_string()))
                .ok_or_else(|| Error::data(format!("rare item {id:?} has no aisle mapping")))?;
            if !aisles_needed.contains(&aisle) {
                aisles_needed.push(aisle.clone());
            }
            rare_aisle[idx] = Some(aisle);
        }
    }
    aisles_needed.sort();
    let mut aisle_item: HashMap<String, usize> = HashMap::new();
    for aisle in &aisles_needed {
        let synthetic_id = format!("aisle::{aisle}");
        if new_vocab.get(&synthetic_id).is_some() {
            return Err(Error::data(format!(
                "synthetic aisle item id {synthetic_id:?} collides with a real item"
            )));
        }
        let idx = new_vocab.intern(&synthetic_id);
        new_vocab.set_aisle(idx, aisle);
        aisle_item.insert(aisle.clone(), idx);
    }
    for (idx, aisle) in rare_aisle.iter().enumerate() {
        if let Some(aisle) = aisle {
            remap[idx] = Some(aisle_item[aisle]);
        }
    }

    let new_v = new_vocab.len();
    let groups = ds
        .groups
        .iter()
        .map(|group| {
            let steps = group
                .steps
                .iter()
                .map(|step| {
                    let mut counts = Vector::zeros(new_v);
                    for (idx, &c) in step.counts.iter().enumerate() {
                        if c != 0.0 {
                            counts[remap[idx].unwrap()] += c;
                        }
                    }
                    OrderStep {
                        delta_t: step.delta_t,
                        counts,
                    }
                })
                .collect();
            GroupSequence {
                group_id: group.group_id.clone(),
                steps,
            }
        })
        .collect();

    Ok(Dataset {
        vocab: new_vocab,
        groups,
        regridded: ds.regridded,
    })
}

/// A group's held-out final order together with the gap that preceded it.
#[derive(Debug, Clone, PartialEq)]
pub struct HoldoutOrder {
    pub group_id: String,
    pub delta_t: f64,
    pub counts: Vector,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct SplitReport {
    /// Groups with a single order: no training sequence, excluded from
    /// holdout metrics.
    pub excluded_single_order_groups: usize,
}

/// Remove each group's final order into the holdout set. Holdout entry `i`
/// corresponds to `train.groups[i]`.
pub fn split_holdout_last(ds: &Dataset) -> (Dataset, Vec<HoldoutOrder>, SplitReport) {
    let mut train_groups = Vec::new();
    let mut holdout = Vec::new();
    let mut report = SplitReport::default();
    for group in &ds.groups {
        if group.len() < 2 {
            report.excluded_single_order_groups += 1;
            continue;
        }
        let last = group.steps.last().unwrap();
        holdout.push(HoldoutOrder {
            group_id: group.group_id.clone(),
            delta_t: last.delta_t.expect("non-first order carries a gap"),
            counts: last.counts.clone(),
        });
        train_groups.push(GroupSequence {
            group_id: group.group_id.clone(),
            steps: group.steps[..group.len() - 1].to_vec(),
        });
    }
    (
        Dataset {
            vocab: ds.vocab.clone(),
            groups: train_groups,
            regridded: ds.regridded,
        },
        holdout,
        report,
    )
}

// ---------------------------------------------------------------------------
// Synthetic generator
// ---------------------------------------------------------------------------

/// Parameters of the synthetic corpus generator, which samples the same
/// generative process the topic-mode model is trained to invert.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub groups: usize,
    pub topics: usize,
    pub items: usize,
    pub orders_min: usize,
    pub orders_max: usize,
    /// Probability that a gap is drawn from the short range.
    pub short_weight: f64,
    pub short_gap_days: (u32, u32),
    pub long_gap_days: (u32, u32),
    pub dirichlet_alpha: f64,
    pub phi_variance: f64,
    pub order_size: (usize, usize),
    pub decay: ScheduleKind,
    pub hidden_dim: usize,
    pub lstm_scale: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            groups: 50,
            topics: 5,
            items: 30,
            orders_min: 15,
            orders_max: 25,
            short_weight: 0.7,
            short_gap_days: (1, 3),
            long_gap_days: (20, 30),
            dirichlet_alpha: 0.3,
            phi_variance: 1.0,
            order_size: (5, 15),
            decay: ScheduleKind::PowerLaw(crate::decay::DecaySpec {
                t0: 1.0,
                kappa: 0.3,
            }),
            hidden_dim: 10,
            lstm_scale: 0.5,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    fn validate(&self) -> Result<()> {
        if self.groups == 0 || self.topics == 0 || self.items == 0 || self.hidden_dim == 0 {
            return Err(Error::Config("synthetic sizes must be >= 1".to_string()));
        }
        if self.orders_min == 0 || self.orders_min > self.orders_max {
            return Err(Error::Config(format!(
                "bad orders range [{}, {}]",
                self.orders_min, self.orders_max
            )));
        }
        if !(0.0..=1.0).contains(&self.short_weight) {
            return Err(Error::Config(format!(
                "short_weight must be in [0,1], got {}",
                self.short_weight
            )));
        }
        for (name, (lo, hi)) in [
            ("short_gap_days", self.short_gap_days),
            ("long_gap_days", self.long_gap_days),
        ] {
            if lo == 0 || lo > hi || f64::from(hi) > DEFAULT_MAX_GAP_DAYS {
                return Err(Error::Config(format!(
                    "{name} range ({lo}, {hi}) must satisfy 1 <= lo <= hi <= {DEFAULT_MAX_GAP_DAYS}"
                )));
            }
        }
        if !(self.dirichlet_alpha > 0.0) {
            return Err(Error::Config("dirichlet_alpha must be > 0".to_string()));
        }
        if !(self.phi_variance >= 0.0) {
            return Err(Error::Config("phi_variance must be >= 0".to_string()));
        }
        if self.order_size.0 == 0 || self.order_size.0 > self.order_size.1 {
            return Err(Error::Config(format!(
                "bad order_size range {:?}",
                self.order_size
            )));
        }
        if !(self.lstm_scale >= 0.0) {
            return Err(Error::Config("lstm_scale must be >= 0".to_string()));
        }
        Ok(())
    }
}

/// Everything needed to audit a generated corpus: the sampled topics and
/// biases, plus the per-item expected total counts conditional on the
/// realized mixtures and order sizes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub spec: SyntheticSpec,
    /// Column-normalized topics, items x topics.
    pub topics: Matrix,
    /// One bias vector per group, length `spec.topics`.
    pub group_bias: Vec<Vector>,
    /// Sum over all steps of order_size * mixture distribution.
    pub expected_item_counts: Vector,
}

pub fn write_ground_truth(gt: &GroundTruth, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let text = serde_json::to_string_pretty(gt)
        .map_err(|e| Error::State(format!("ground truth serialization failed: {e}")))?;
    std::fs::write(path, text).map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn load_ground_truth(path: impl AsRef<Path>) -> Result<GroundTruth> {
    let path = path.as_ref();
    let text =
        std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    serde_json::from_str(&text)
        .map_err(|e| Error::data(format!("bad ground truth file {}: {e}", path.display())))
}

fn pad_width(n: usize) -> usize {
    n.saturating_sub(1).to_string().len().max(1)
}

fn sample_dirichlet(rng: &mut ChaCha8Rng, alpha: f64, dim: usize) -> Result<Vector> {
    let gamma = Gamma::new(alpha, 1.0)
        .map_err(|e| Error::Config(format!("bad dirichlet alpha {alpha}: {e}")))?;
    loop {
        let draws: Vec<f64> = (0..dim).map(|_| gamma.sample(rng)).collect();
        let total: f64 = draws.iter().sum();
        if total > 0.0 && total.is_finite() {
            return Ok(Vector::from_vec(
                draws.into_iter().map(|g| g / total).collect(),
            ));
        }
    }
}

fn sample_categorical(rng: &mut ChaCha8Rng, probs: &Vector) -> usize {
    let u: f64 = rng.random::<f64>();
    let mut acc = 0.0;
    for (idx, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return idx;
        }
    }
    probs.len() - 1
}

/// Sample a corpus from the generative model: Dirichlet topics, Gaussian
/// group biases, a randomly initialized recurrent cell, power-law (or
/// forced-zero) decay, and multinomial order draws. Deterministic given the
/// spec's seed.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<(Dataset, GroundTruth)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let v = spec.items;
    let k = spec.topics;

    let mut topics = Matrix::zeros(v, k);
    for col in 0..k {
        let beta = sample_dirichlet(&mut rng, spec.dirichlet_alpha, v)?;
        for row in 0..v {
            topics.set(row, col, beta[row]);
        }
    }

    let mut group_bias = Vec::with_capacity(spec.groups);
    if spec.phi_variance > 0.0 {
        let normal = Normal::new(0.0, spec.phi_variance.sqrt())
            .map_err(|e| Error::Config(format!("bad phi_variance: {e}")))?;
        for _ in 0..spec.groups {
            group_bias.push(Vector::from_vec(
                (0..k).map(|_| normal.sample(&mut rng)).collect(),
            ));
        }
    } else {
        group_bias = vec![Vector::zeros(k); spec.groups];
    }

    let mut cell = LstmParams::init(rng.random::<u64>(), spec.hidden_dim, v, spec.lstm_scale)?;
    cell.boost_forget_bias(1.0);
    let mut proj = Matrix::zeros(k, spec.hidden_dim);
    if spec.lstm_scale > 0.0 {
        for val in proj.data_mut() {
            *val = rng.random_range(-spec.lstm_scale..=spec.lstm_scale);
        }
    }

    let gw = pad_width(spec.groups);
    let iw = pad_width(v);
    let mut vocab = Vocabulary::new();
    for idx in 0..v {
        vocab.intern(&format!("i{idx:0iw$}"));
    }

    let mut groups = Vec::with_capacity(spec.groups);
    let mut expected = Vector::zeros(v);
    for (d, bias) in group_bias.iter().enumerate() {
        let t_d = rng.random_range(spec.orders_min..=spec.orders_max);
        let mut state = CellState::zeros(spec.hidden_dim);
        let mut x = Vector::zeros(v);
        let mut steps = Vec::with_capacity(t_d);
        for t in 0..t_d {
            let delta = if t == 0 {
                None
            } else if rng.random::<f64>() < spec.short_weight {
                Some(f64::from(
                    rng.random_range(spec.short_gap_days.0..=spec.short_gap_days.1),
                ))
            } else {
                Some(f64::from(
                    rng.random_range(spec.long_gap_days.0..=spec.long_gap_days.1),
                ))
            };
            let rho = spec.decay.rho(delta.unwrap_or(0.0), t == 0)?;
            let (next, _) = cell.forward(&x, &state)?;
            state = next;
            let h_proj = proj.matvec(&state.h)?;
            let mut pre = Vector::zeros(k);
            for j in 0..k {
                pre[j] = rho * h_proj[j] + (1.0 - rho) * bias[j];
            }
            let sigma = softmax(&pre)?;
            let mixture = topics.matvec(&sigma)?;
            let n = rng.random_range(spec.order_size.0..=spec.order_size.1);
            let mut counts = Vector::zeros(v);
            for _ in 0..n {
                counts[sample_categorical(&mut rng, &mixture)] += 1.0;
            }
            expected.add_scaled(n as f64, &mixture);
            x = counts.l1_normalized();
            steps.push(OrderStep {
                delta_t: delta,
                counts,
            });
        }
        groups.push(GroupSequence {
            group_id: format!("g{d:0gw$}"),
            steps,
        });
    }

    let dataset = Dataset {
        vocab,
        groups,
        regridded: false,
    };
    let truth = GroundTruth {
        spec: spec.clone(),
        topics,
        group_bias,
        expected_item_counts: expected,
    };
    Ok((dataset, truth))
}
