//! Incremental locally weighted regression.
//!
//! Each [`LwprModel`] predicts one scalar output as the activation-weighted
//! blend of local linear models ("receptive fields"):
//!
//! ```text
//! ŷ(x) = Σ_i w_i · (b_i + β_iᵀ (x − c_i)) / Σ_i w_i,   w_i = exp(−½ (x − c_i)ᵀ D_i (x − c_i))
//! ```
//!
//! Fields are created where no existing field is active enough and are
//! updated only by nearby samples, so training in one region leaves distant
//! fields untouched. Local models are solved by exponentially-forgetting
//! weighted recursive least squares over the augmented input `[1, x − c]`
//! with a small ridge on the slopes. Distance metrics are fixed at creation.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::error::{Error, Result};
use crate::sim::{Input, TrainingPair, CHANNEL_NAMES, INPUT_DIM, OUTPUT_DIM};

const AUG: usize = INPUT_DIM + 1;

/// Activation-based FLOPs per receptive field per prediction.
pub const FLOPS_PER_FIELD: u64 = 25;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LwprConfig {
    /// Create a new field when no field is more active than this.
    pub w_gen: f64,
    /// Fields less active than this are skipped in predictions.
    pub cutoff: f64,
    /// Forgetting factor λ applied to a field's statistics on each update.
    pub forgetting: f64,
    /// Ridge added to the slope block of the local normal equations.
    pub ridge: f64,
    /// Diagonal distance metric given to new fields.
    pub init_metric: [f64; INPUT_DIM],
}

impl Default for LwprConfig {
    fn default() -> Self {
        Self { w_gen: 0.1, cutoff: 1e-8, forgetting: 0.999, ridge: 0.1, init_metric: [1.0; 6] }
    }
}

impl LwprConfig {
    /// Metric whose activation drops to `w_gen` at `fraction` of each
    /// channel's data range.
    pub fn metric_for_ranges(ranges: &[f64; INPUT_DIM], w_gen: f64, fraction: f64) -> [f64; 6] {
        let mut out = [0.0; INPUT_DIM];
        for (o, r) in out.iter_mut().zip(ranges) {
            let radius = (fraction * r).max(1e-9);
            *o = 2.0 * (1.0 / w_gen).ln() / (radius * radius);
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.w_gen > 0.0 && self.w_gen < 1.0) {
            return Err(Error::InvalidParam("w_gen must lie in (0, 1)".into()));
        }
        if !(self.forgetting > 0.0 && self.forgetting <= 1.0) {
            return Err(Error::InvalidParam("forgetting factor must lie in (0, 1]".into()));
        }
        if !(self.cutoff >= 0.0 && self.cutoff < self.w_gen) {
            return Err(Error::InvalidParam("cutoff must lie in [0, w_gen)".into()));
        }
        if !(self.ridge >= 0.0) {
            return Err(Error::InvalidParam("ridge must be non-negative".into()));
        }
        if self.init_metric.iter().any(|m| !(*m > 0.0) || !m.is_finite()) {
            return Err(Error::InvalidParam("metric entries must be positive".into()));
        }
        Ok(())
    }
}

/// Exponentially weighted second moments over the augmented input `[1, x − c]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FieldStats {
    pub xx: [[f64; AUG]; AUG],
    pub xy: [f64; AUG],
    pub weight_sum: f64,
}

impl FieldStats {
    fn zero() -> Self {
        Self { xx: [[0.0; AUG]; AUG], xy: [0.0; AUG], weight_sum: 0.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReceptiveField {
    pub center: Input,
    pub metric_diag: [f64; INPUT_DIM],
    pub linear_coeffs: [f64; INPUT_DIM],
    pub offset: f64,
    pub stats: Box<FieldStats>,
    /// Accumulated activation of the samples this field has absorbed.
    pub activation_count: f64,
}

impl ReceptiveField {
    fn new(center: Input, metric_diag: [f64; INPUT_DIM], y: f64) -> Self {
        let mut stats = FieldStats::zero();
        // The creating sample sits at the center with activation 1.
        stats.xx[0][0] = 1.0;
        stats.xy[0] = y;
        stats.weight_sum = 1.0;
        Self {
            center,
            metric_diag,
            linear_coeffs: [0.0; INPUT_DIM],
            offset: y,
            stats: Box::new(stats),
            activation_count: 1.0,
        }
    }

    fn distance2(&self, x: &Input) -> f64 {
        let mut d = 0.0;
        for j in 0..INPUT_DIM {
            let e = x[j] - self.center[j];
            d += self.metric_diag[j] * e * e;
        }
        d
    }

    /// `exp(−½ (x − c)ᵀ D (x − c))`.
    pub fn activation(&self, x: &Input) -> f64 {
        (-0.5 * self.distance2(x)).exp()
    }

    /// The local linear model evaluated at `x`.
    pub fn local_prediction(&self, x: &Input) -> f64 {
        let mut y = self.offset;
        for j in 0..INPUT_DIM {
            y += self.linear_coeffs[j] * (x[j] - self.center[j]);
        }
        y
    }

    /// Fold one weighted sample into the statistics and re-solve.
    /// Returns false when the local system was singular (coefficients kept).
    fn absorb(&mut self, x: &Input, y: f64, w: f64, forgetting: f64, ridge: f64) -> bool {
        let mut z = [0.0; AUG];
        z[0] = 1.0;
        for j in 0..INPUT_DIM {
            z[j + 1] = x[j] - self.center[j];
        }
        let s = &mut *self.stats;
        for r in 0..AUG {
            for c in r..AUG {
                let v = forgetting * s.xx[r][c] + w * z[r] * z[c];
                s.xx[r][c] = v;
                s.xx[c][r] = v;
            }
            s.xy[r] = forgetting * s.xy[r] + w * z[r] * y;
        }
        s.weight_sum = forgetting * s.weight_sum + w;
        self.activation_count += w;

        let mut a = s.xx;
        for (j, row) in a.iter_mut().enumerate().skip(1) {
            row[j] += ridge;
        }
        match cholesky_solve(a, s.xy) {
            Some(beta) => {
                self.offset = beta[0];
                self.linear_coeffs.copy_from_slice(&beta[1..]);
                true
            }
            None => false,
        }
    }
}

/// Solve `A β = b` for symmetric positive definite `A`.
fn cholesky_solve(a: [[f64; AUG]; AUG], b: [f64; AUG]) -> Option<[f64; AUG]> {
    let mut l = [[0.0; AUG]; AUG];
    for i in 0..AUG {
        for j in 0..=i {
            let mut sum = a[i][j];
            for k in 0..j {
                sum -= l[i][k] * l[j][k];
            }
            if i == j {
                if !(sum > 1e-14 * a[i][i].abs().max(1e-300)) || !sum.is_finite() {
                    return None;
                }
                l[i][i] = sum.sqrt();
            } else {
                l[i][j] = sum / l[j][j];
            }
        }
    }
    let mut y = [0.0; AUG];
    for i in 0..AUG {
        let mut sum = b[i];
        for k in 0..i {
            sum -= l[i][k] * y[k];
        }
        y[i] = sum / l[i][i];
    }
    let mut x = [0.0; AUG];
    for i in (0..AUG).rev() {
        let mut sum = y[i];
        for k in i + 1..AUG {
            sum -= l[k][i] * x[k];
        }
        x[i] = sum / l[i][i];
    }
    x.iter().all(|v| v.is_finite()).then_some(x)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Prediction {
    pub value: f64,
    /// Sum of the activations at or above the cutoff; a confidence proxy.
    pub total_weight: f64,
    /// True when every field was below the cutoff; `value` then comes from
    /// the nearest field alone.
    pub extrapolated: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct UpdateReport {
    pub fields_updated: usize,
    pub field_created: bool,
    /// Fields whose local solve was singular and kept their old coefficients.
    pub singular: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LwprModel {
    fields: Vec<ReceptiveField>,
    config: LwprConfig,
    output_index: usize,
}

impl LwprModel {
    pub fn new(config: LwprConfig, output_index: usize) -> Result<Self> {
        config.validate()?;
        Ok(Self { fields: Vec::new(), config, output_index })
    }

    pub fn config(&self) -> &LwprConfig {
        &self.config
    }

    pub fn output_index(&self) -> usize {
        self.output_index
    }

    pub fn fields(&self) -> &[ReceptiveField] {
        &self.fields
    }

    pub fn num_fields(&self) -> usize {
        self.fields.len()
    }

    /// Insert a fully specified field, e.g. when assembling a model by hand.
    pub fn push_field(&mut self, field: ReceptiveField) -> Result<()> {
        if field.metric_diag.iter().any(|m| !(*m > 0.0)) {
            return Err(Error::InvalidParam("metric entries must be positive".into()));
        }
        self.fields.push(field);
        Ok(())
    }

    /// A field with the given center, metric and constant output.
    pub fn constant_field(center: Input, metric_diag: [f64; INPUT_DIM], value: f64) -> ReceptiveField {
        ReceptiveField::new(center, metric_diag, value)
    }

    /// Fields at or above the cutoff as `(index, activation)`, plus the
    /// index of the nearest field.
    fn active_weights(&self, x: &Input, active: &mut Vec<(usize, f64)>) -> usize {
        active.clear();
        // Beyond this squared distance the activation is certainly below the cutoff.
        let skip_d2 = -2.0 * self.config.cutoff.ln() + 1e-9;
        let mut nearest = 0;
        let mut nearest_d2 = f64::INFINITY;
        for (i, f) in self.fields.iter().enumerate() {
            let d2 = f.distance2(x);
            if d2 < nearest_d2 {
                nearest_d2 = d2;
                nearest = i;
            }
            if d2 > skip_d2 {
                continue;
            }
            let w = (-0.5 * d2).exp();
            if w >= self.config.cutoff {
                active.push((i, w));
            }
        }
        nearest
    }

    fn blend(&self, x: &Input, active: &[(usize, f64)], nearest: usize) -> Prediction {
        let mut num = 0.0;
        let mut den = 0.0;
        for &(i, w) in active {
            num += w * self.fields[i].local_prediction(x);
            den += w;
        }
        if den > 0.0 {
            Prediction { value: num / den, total_weight: den, extrapolated: false }
        } else {
            Prediction { value: self.fields[nearest].local_prediction(x), total_weight: 0.0, extrapolated: true }
        }
    }

    pub fn predict(&self, x: &Input) -> Result<Prediction> {
        if self.fields.is_empty() {
            return Err(Error::Empty("regression model has no receptive fields"));
        }
        let mut active = Vec::new();
        let nearest = self.active_weights(x, &mut active);
        Ok(self.blend(x, &active, nearest))
    }

    /// True when both models have fields at the same places with the same metrics.
    fn same_geometry(&self, other: &Self) -> bool {
        self.fields.len() == other.fields.len()
            && self
                .fields
                .iter()
                .zip(&other.fields)
                .all(|(a, b)| a.center == b.center && a.metric_diag == b.metric_diag)
    }

    pub fn update(&mut self, x: &Input, y: f64) -> Result<UpdateReport> {
        if x.iter().any(|v| !v.is_finite()) || !y.is_finite() {
            return Err(Error::NonFinite("regression sample"));
        }
        let mut report = UpdateReport::default();
        let mut max_w = 0.0f64;
        let cfg = self.config;
        // Beyond this squared distance the activation is certainly at most w_gen.
        let skip_d2 = -2.0 * cfg.w_gen.ln() + 1e-9;
        for f in self.fields.iter_mut() {
            let d2 = f.distance2(x);
            if d2 > skip_d2 {
                continue;
            }
            let w = (-0.5 * d2).exp();
            max_w = max_w.max(w);
            if w > cfg.w_gen {
                report.fields_updated += 1;
                if !f.absorb(x, y, w, cfg.forgetting, cfg.ridge) {
                    report.singular += 1;
                }
            }
        }
        if max_w <= cfg.w_gen {
            self.fields.push(ReceptiveField::new(*x, cfg.init_metric, y));
            report.field_created = true;
        }
        Ok(report)
    }

    /// Shuffled passes over `(input, target)` samples with a fixed seed.
    /// Returns the resulting field count.
    pub fn train_batch(&mut self, data: &[(Input, f64)], epochs: usize, seed: u64) -> Result<usize> {
        if data.is_empty() {
            return Err(Error::Empty("training data"));
        }
        let mut order: Vec<usize> = (0..data.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for _ in 0..epochs {
            order.shuffle(&mut rng);
            for &i in &order {
                self.update(&data[i].0, data[i].1)?;
            }
        }
        Ok(self.fields.len())
    }
}

/// One regression model per target channel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LwprEnsemble {
    models: [LwprModel; OUTPUT_DIM],
    /// All channels place identical fields, so activations can be shared.
    #[serde(default)]
    shared_geometry: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EnsemblePrediction {
    pub values: [f64; OUTPUT_DIM],
    pub min_total_weight: f64,
    pub extrapolated: bool,
}

const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct EnsembleCheckpoint {
    version: u32,
    ensemble: LwprEnsemble,
}

impl LwprEnsemble {
    pub fn new(config: LwprConfig) -> Result<Self> {
        Ok(Self {
            models: [
                LwprModel::new(config, 0)?,
                LwprModel::new(config, 1)?,
                LwprModel::new(config, 2)?,
                LwprModel::new(config, 3)?,
            ],
            shared_geometry: true,
        })
    }

    pub fn from_models(models: [LwprModel; OUTPUT_DIM]) -> Self {
        let shared_geometry = models[1..]
            .iter()
            .all(|m| m.config == models[0].config && m.same_geometry(&models[0]));
        Self { models, shared_geometry }
    }

    pub fn models(&self) -> &[LwprModel; OUTPUT_DIM] {
        &self.models
    }

    pub fn field_counts(&self) -> [usize; OUTPUT_DIM] {
        [
            self.models[0].num_fields(),
            self.models[1].num_fields(),
            self.models[2].num_fields(),
            self.models[3].num_fields(),
        ]
    }

    pub fn predict(&self, x: &Input) -> Result<EnsemblePrediction> {
        let mut values = [0.0; OUTPUT_DIM];
        let mut min_w = f64::INFINITY;
        let mut extrapolated = false;
        if self.shared_geometry && !self.models[0].fields.is_empty() {
            let mut active = Vec::new();
            let nearest = self.models[0].active_weights(x, &mut active);
            for (v, m) in values.iter_mut().zip(&self.models) {
                let p = m.blend(x, &active, nearest);
                *v = p.value;
                min_w = min_w.min(p.total_weight);
                extrapolated |= p.extrapolated;
            }
            return Ok(EnsemblePrediction { values, min_total_weight: min_w, extrapolated });
        }
        for (v, m) in values.iter_mut().zip(&self.models) {
            let p = m.predict(x)?;
            *v = p.value;
            min_w = min_w.min(p.total_weight);
            extrapolated |= p.extrapolated;
        }
        Ok(EnsemblePrediction { values, min_total_weight: min_w, extrapolated })
    }

    pub fn update(&mut self, pair: &TrainingPair) -> Result<[UpdateReport; OUTPUT_DIM]> {
        if !pair.is_finite() {
            return Err(Error::NonFinite("training pair"));
        }
        let mut out = [UpdateReport::default(); OUTPUT_DIM];
        for (c, m) in self.models.iter_mut().enumerate() {
            out[c] = m.update(&pair.x, pair.y[c])?;
        }
        if out.iter().any(|r| r.field_created != out[0].field_created) {
            self.shared_geometry = false;
        }
        Ok(out)
    }

    /// Shuffled epochs over `pairs`, one shared order for all channels.
    pub fn train_batch(&mut self, pairs: &[TrainingPair], epochs: usize, seed: u64) -> Result<[usize; OUTPUT_DIM]> {
        if pairs.is_empty() {
            return Err(Error::Empty("training data"));
        }
        let mut order: Vec<usize> = (0..pairs.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for _ in 0..epochs {
            order.shuffle(&mut rng);
            for &i in &order {
                self.update(&pairs[i])?;
            }
        }
        Ok(self.field_counts())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let ck = EnsembleCheckpoint { version: CHECKPOINT_VERSION, ensemble: self.clone() };
        std::fs::write(path, serde_json::to_vec(&ck)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ck: EnsembleCheckpoint = serde_json::from_slice(&std::fs::read(path)?)?;
        if ck.version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!("unsupported regression checkpoint v{}", ck.version)));
        }
        Ok(ck.ensemble)
    }
}

/// One row of the prediction-cost lower bound.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct FlopRow {
    pub output: String,
    pub fields: u64,
    pub flops: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct FlopBound {
    pub rows: Vec<FlopRow>,
    pub total_fields: u64,
    pub total_flops: u64,
}

/// Lower bound on FLOPs per prediction: 25 per receptive field activation.
pub fn flop_lower_bound_from_counts(counts: &[(String, u64)]) -> FlopBound {
    let rows: Vec<FlopRow> = counts
        .iter()
        .map(|(name, n)| FlopRow { output: name.clone(), fields: *n, flops: FLOPS_PER_FIELD * n })
        .collect();
    let total_fields = rows.iter().map(|r| r.fields).sum();
    FlopBound { total_flops: FLOPS_PER_FIELD * total_fields, total_fields, rows }
}

pub fn flop_lower_bound(ensemble: &LwprEnsemble) -> FlopBound {
    let counts: Vec<(String, u64)> = CHANNEL_NAMES
        .iter()
        .zip(ensemble.field_counts())
        .map(|(n, c)| (n.to_string(), c as u64))
        .collect();
    flop_lower_bound_from_counts(&counts)
}
