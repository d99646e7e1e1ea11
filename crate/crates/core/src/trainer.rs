//! The constrained online update and joint initialization.
//!
//! Every ingested pair is first scored by the current model, then pushed into
//! the local operating set and the regression ensemble. Periodically one step
//! combines the gradient on a real mini-batch (`G_L`) with the gradient on a
//! synthetic mini-batch labelled by the regression ensemble (`G_ID`):
//!
//! ```text
//! θ ← ADAM(θ, α·G_L + G_ID),   α = max { a ∈ [0, 1] : ⟨a·G_L + G_ID, G_ID⟩ ≥ 0 }
//! ```
//!
//! so the step never opposes the system-identification gradient.
//!
//! All learning happens in standardized units; pairs enter and predictions
//! leave in raw units.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::VecDeque;
use std::path::Path;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::gmm::{EmConfig, GmmModel};
use crate::lwpr::{LwprConfig, LwprEnsemble};
use crate::mlp::{adam_step, AdamState, DynamicsNet, MlpParams};
use crate::sim::{Input, Target, TrainingPair, INPUT_DIM, OUTPUT_DIM};
use crate::standardize::Standardizer;

/// Relative slack on the constraint inner product.
pub const CONSTRAINT_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    /// No adaptation: the base network is only evaluated.
    None,
    /// ADAM on the real-batch gradient alone.
    Sgd,
    /// The constrained update.
    Lwpr2,
    /// The regression ensemble itself predicts and adapts; the network is unused.
    LwprOnly,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::None, Method::Sgd, Method::Lwpr2, Method::LwprOnly];

    pub fn name(self) -> &'static str {
        match self {
            Method::None => "base",
            Method::Sgd => "sgd",
            Method::Lwpr2 => "lwpr2",
            Method::LwprOnly => "lwpr-only",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "none" | "base" => Ok(Method::None),
            "sgd" => Ok(Method::Sgd),
            "lwpr2" => Ok(Method::Lwpr2),
            "lwpr-only" | "lwpr" => Ok(Method::LwprOnly),
            other => Err(Error::InvalidParam(format!("unknown method '{other}'"))),
        }
    }

    fn trains_network(self) -> bool {
        matches!(self, Method::Sgd | Method::Lwpr2)
    }

    fn updates_regression(self) -> bool {
        matches!(self, Method::Lwpr2 | Method::LwprOnly)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainerConfig {
    pub method: Method,
    pub lr: f64,
    pub real_batch: usize,
    pub synth_batch: usize,
    pub updates_per_ingest: usize,
    pub ring_capacity: usize,
    pub seed: u64,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        Self {
            method: Method::Lwpr2,
            lr: 1e-4,
            real_batch: 64,
            synth_batch: 64,
            updates_per_ingest: 1,
            ring_capacity: 500,
            seed: 0,
        }
    }
}

impl TrainerConfig {
    /// The more conservative learning rate used when the model drives.
    pub fn active_preset(self) -> Self {
        Self { lr: self.lr / 2.0, ..self }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) {
            return Err(Error::InvalidParam("learning rate must be positive".into()));
        }
        if self.real_batch == 0 || self.synth_batch == 0 || self.updates_per_ingest == 0 {
            return Err(Error::InvalidParam("batch sizes and update interval must be at least 1".into()));
        }
        if !(500..=1000).contains(&self.ring_capacity) {
            return Err(Error::InvalidParam("local set capacity must lie in 500..=1000".into()));
        }
        Ok(())
    }
}

/// Fixed-capacity ring of the most recent pairs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocalOperatingSet {
    capacity: usize,
    pairs: VecDeque<TrainingPair>,
}

impl LocalOperatingSet {
    pub fn new(capacity: usize) -> Self {
        Self { capacity: capacity.max(1), pairs: VecDeque::with_capacity(capacity) }
    }

    pub fn push(&mut self, pair: TrainingPair) {
        if self.pairs.len() == self.capacity {
            self.pairs.pop_front();
        }
        self.pairs.push_back(pair);
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Oldest first.
    pub fn iter(&self) -> impl Iterator<Item = &TrainingPair> {
        self.pairs.iter()
    }

    /// `n` uniform draws with replacement.
    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Vec<TrainingPair> {
        (0..n).map(|_| self.pairs[rng.random_range(0..self.pairs.len())]).collect()
    }
}

/// Dot product with Neumaier-compensated summation.
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut sum = 0.0f64;
    let mut comp = 0.0f64;
    for (x, y) in a.iter().zip(b) {
        let term = x * y;
        let t = sum + term;
        if sum.abs() >= term.abs() {
            comp += (sum - t) + term;
        } else {
            comp += (term - t) + sum;
        }
        sum = t;
    }
    sum + comp
}

/// Largest `a ∈ [0, 1]` with `⟨a·G_L + G_ID, G_ID⟩ ≥ 0`.
pub fn constrained_alpha(g_l: &[f64], g_id: &[f64]) -> f64 {
    assert_eq!(g_l.len(), g_id.len(), "gradient dimensions differ");
    let n = dot(g_id, g_id);
    let d = dot(g_l, g_id);
    if n == 0.0 || d >= 0.0 {
        return 1.0;
    }
    let mut alpha = (n / -d).min(1.0);
    // Guard against rounding pushing the realized inner product below zero.
    for _ in 0..16 {
        if alpha <= 0.0 || combined_inner(alpha, g_l, g_id) >= 0.0 {
            break;
        }
        alpha = alpha.next_down();
    }
    alpha.max(0.0)
}

fn combine(alpha: f64, g_l: &[f64], g_id: &[f64]) -> Vec<f64> {
    g_l.iter().zip(g_id).map(|(l, i)| alpha * l + i).collect()
}

/// `⟨α·G_L + G_ID, G_ID⟩` evaluated on the realized combined vector.
pub fn combined_inner(alpha: f64, g_l: &[f64], g_id: &[f64]) -> f64 {
    dot(&combine(alpha, g_l, g_id), g_id)
}

/// Draw synthetic inputs from the mixture and label them with the regression
/// ensemble; draws the ensemble would only extrapolate are redrawn.
pub fn synth_batch_with<R: Rng + ?Sized>(
    gmm: &GmmModel,
    lwpr: &LwprEnsemble,
    n: usize,
    rng: &mut R,
) -> Result<Vec<TrainingPair>> {
    if n == 0 {
        return Err(Error::InvalidParam("synthetic batch size must be at least 1".into()));
    }
    let limit = 10 * n;
    let mut out = Vec::with_capacity(n);
    let mut attempts = 0;
    while out.len() < n {
        if attempts == limit {
            return Err(Error::SynthExhausted(attempts - out.len(), attempts));
        }
        attempts += 1;
        let x = gmm.sample_one(rng);
        let p = lwpr.predict(&x)?;
        if p.extrapolated {
            continue;
        }
        out.push(TrainingPair { timestamp: 0.0, x, y: p.values, synthetic: true });
    }
    Ok(out)
}

pub fn synth_batch(gmm: &GmmModel, lwpr: &LwprEnsemble, n: usize, seed: u64) -> Result<Vec<TrainingPair>> {
    synth_batch_with(gmm, lwpr, n, &mut ChaCha8Rng::seed_from_u64(seed))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub step: u64,
    /// `None` for the unconstrained baseline.
    pub alpha: Option<f64>,
    pub mse_real: f64,
    pub mse_synth: Option<f64>,
    /// `⟨α·G_L + G_ID, G_ID⟩`.
    pub inner_product: Option<f64>,
    pub g_id_norm2: Option<f64>,
    /// The synthetic batch could not be drawn; no parameters changed.
    pub skipped: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IngestReport {
    /// Prediction made before learning from the pair, raw units.
    pub prediction: Target,
    pub target: Target,
    pub ring_len: usize,
    pub step: Option<StepReport>,
    pub dropped: bool,
}

/// One constrained (or baseline) step on the given batches, standardized units.
pub fn constrained_step(
    params: &mut MlpParams,
    adam: &mut AdamState,
    real: &[TrainingPair],
    synth: Option<&[TrainingPair]>,
    lr: f64,
    step: u64,
) -> Result<StepReport> {
    let (g_l, mse_real) = params.mse_gradient(real)?;
    match synth {
        None => {
            adam_step(params, adam, &g_l, lr)?;
            Ok(StepReport { step, alpha: None, mse_real, mse_synth: None, inner_product: None, g_id_norm2: None, skipped: false })
        }
        Some(s) => {
            let (g_id, mse_synth) = params.mse_gradient(s)?;
            let alpha = constrained_alpha(&g_l, &g_id);
            let g = combine(alpha, &g_l, &g_id);
            let inner = dot(&g, &g_id);
            let n2 = dot(&g_id, &g_id);
            adam_step(params, adam, &g, lr)?;
            Ok(StepReport {
                step,
                alpha: Some(alpha),
                mse_real,
                mse_synth: Some(mse_synth),
                inner_product: Some(inner),
                g_id_norm2: Some(n2),
                skipped: false,
            })
        }
    }
}

/// Online learner owning the network, optimizer, regression ensemble and local set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trainer {
    cfg: TrainerConfig,
    net: Arc<DynamicsNet>,
    adam: AdamState,
    lwpr: LwprEnsemble,
    gmm: Arc<GmmModel>,
    ring: LocalOperatingSet,
    rng: ChaCha8Rng,
    ingests: u64,
    steps: u64,
}

const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct TrainerCheckpoint {
    version: u32,
    trainer: Trainer,
}

impl Trainer {
    pub fn new(cfg: TrainerConfig, init: &InitializedModels) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            cfg,
            net: Arc::new(init.net.clone()),
            adam: AdamState::default(),
            lwpr: init.lwpr.clone(),
            gmm: init.gmm.clone(),
            ring: LocalOperatingSet::new(cfg.ring_capacity),
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
            ingests: 0,
            steps: 0,
        })
    }

    pub fn config(&self) -> &TrainerConfig {
        &self.cfg
    }

    /// Current network; later updates never alter a returned snapshot.
    pub fn snapshot(&self) -> Arc<DynamicsNet> {
        self.net.clone()
    }

    pub fn lwpr(&self) -> &LwprEnsemble {
        &self.lwpr
    }

    pub fn gmm(&self) -> &GmmModel {
        &self.gmm
    }

    pub fn ring(&self) -> &LocalOperatingSet {
        &self.ring
    }

    pub fn scaler(&self) -> &Standardizer {
        &self.net.scaler
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Prediction of the model this method evaluates, raw units.
    pub fn predict(&self, x: &Input) -> Result<Target> {
        match self.cfg.method {
            Method::LwprOnly => {
                let s = &self.net.scaler;
                Ok(s.y_inv(&self.lwpr.predict(&s.x(x))?.values))
            }
            _ => Ok(self.net.predict_raw(x)),
        }
    }

    pub fn ingest(&mut self, pair: &TrainingPair) -> Result<IngestReport> {
        if !pair.is_finite() {
            log::warn!("dropping non-finite pair at t = {}", pair.timestamp);
            return Ok(IngestReport {
                prediction: [f64::NAN; OUTPUT_DIM],
                target: pair.y,
                ring_len: self.ring.len(),
                step: None,
                dropped: true,
            });
        }
        let prediction = self.predict(&pair.x)?;
        let z = self.net.scaler.pair(pair);
        self.ring.push(z);
        if self.cfg.method.updates_regression() {
            self.lwpr.update(&z)?;
        }
        self.ingests += 1;
        let step = if self.cfg.method.trains_network() && self.ingests % self.cfg.updates_per_ingest as u64 == 0 {
            Some(self.update_step()?)
        } else {
            None
        };
        Ok(IngestReport { prediction, target: pair.y, ring_len: self.ring.len(), step, dropped: false })
    }

    /// One update from the current local set.
    pub fn update_step(&mut self) -> Result<StepReport> {
        if self.ring.is_empty() {
            return Err(Error::Empty("local operating set"));
        }
        self.steps += 1;
        let real = self.ring.sample(self.cfg.real_batch, &mut self.rng);
        let synth = match self.cfg.method {
            Method::Lwpr2 => match synth_batch_with(&self.gmm, &self.lwpr, self.cfg.synth_batch, &mut self.rng) {
                Ok(s) => Some(s),
                Err(Error::SynthExhausted(..)) => {
                    log::warn!("step {} skipped: synthetic batch unavailable", self.steps);
                    return Ok(StepReport {
                        step: self.steps,
                        alpha: None,
                        mse_real: f64::NAN,
                        mse_synth: None,
                        inner_product: None,
                        g_id_norm2: None,
                        skipped: true,
                    });
                }
                Err(e) => return Err(e),
            },
            _ => None,
        };
        let net = Arc::make_mut(&mut self.net);
        constrained_step(&mut net.params, &mut self.adam, &real, synth.as_deref(), self.cfg.lr, self.steps)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        Ok(serde_json::to_vec(&TrainerCheckpoint { version: CHECKPOINT_VERSION, trainer: self.clone() })?)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let ck: TrainerCheckpoint = serde_json::from_slice(bytes)?;
        if ck.version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!("unsupported trainer checkpoint v{}", ck.version)));
        }
        ck.trainer.cfg.validate()?;
        Ok(ck.trainer)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InitConfig {
    pub k_min: usize,
    pub k_max: usize,
    pub restarts: usize,
    pub em: EmConfig,
    /// Fit the mixture on at most this many evenly spaced pairs.
    pub gmm_max_points: usize,
    /// Receptive-field radius as a fraction of each standardized input range.
    pub lwpr_radius_frac: f64,
    pub lwpr: LwprConfig,
    pub lwpr_epochs: usize,
    pub net_steps: usize,
    pub lr: f64,
    pub real_batch: usize,
    pub synth_batch: usize,
    /// Train the network jointly against synthetic batches; otherwise plain ADAM.
    pub joint: bool,
    pub seed: u64,
}

impl Default for InitConfig {
    fn default() -> Self {
        Self {
            k_min: 1,
            k_max: 32,
            restarts: 3,
            em: EmConfig::default(),
            gmm_max_points: usize::MAX,
            lwpr_radius_frac: 0.1,
            lwpr: LwprConfig::default(),
            lwpr_epochs: 5,
            net_steps: 20_000,
            lr: 1e-3,
            real_batch: 64,
            synth_batch: 64,
            joint: true,
            seed: 0,
        }
    }
}

/// Everything produced by initialization. The mixture is shared read-only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InitializedModels {
    pub net: DynamicsNet,
    pub gmm: Arc<GmmModel>,
    pub lwpr: LwprEnsemble,
}

const INIT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct InitCheckpoint {
    version: u32,
    models: InitializedModels,
}

impl InitializedModels {
    pub fn save(&self, path: &Path) -> Result<()> {
        let ck = InitCheckpoint { version: INIT_VERSION, models: self.clone() };
        std::fs::write(path, serde_json::to_vec(&ck)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ck: InitCheckpoint = serde_json::from_slice(&std::fs::read(path)?)?;
        if ck.version != INIT_VERSION {
            return Err(Error::Format(format!("unsupported model bundle v{}", ck.version)));
        }
        Ok(ck.models)
    }
}

/// Standardize, fit the mixture, train the regression ensemble, then train
/// the network with the system-identification set standing in for the local set.
pub fn initialize_joint(sysid: &[TrainingPair], cfg: &InitConfig) -> Result<InitializedModels> {
    if sysid.is_empty() {
        return Err(Error::Empty("system identification dataset"));
    }
    if sysid.iter().any(|p| !p.is_finite()) {
        return Err(Error::NonFinite("system identification dataset"));
    }
    let scaler = Standardizer::fit(sysid)?;
    let data: Vec<TrainingPair> = sysid.iter().map(|p| scaler.pair(p)).collect();

    let stride = data.len().div_ceil(cfg.gmm_max_points.max(1)).max(1);
    let gmm_points: Vec<Input> = data.iter().step_by(stride).map(|p| p.x).collect();
    let gmm = GmmModel::select_k(&gmm_points, cfg.k_min, cfg.k_max, cfg.restarts, &cfg.em, cfg.seed)?;
    log::info!("mixture: k = {}, bic = {:.1}", gmm.k(), gmm.bic());

    let mut ranges = [0.0; INPUT_DIM];
    for (j, r) in ranges.iter_mut().enumerate() {
        let (lo, hi) = data.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| (lo.min(p.x[j]), hi.max(p.x[j])));
        *r = hi - lo;
    }
    let lwpr_cfg = LwprConfig {
        init_metric: LwprConfig::metric_for_ranges(&ranges, cfg.lwpr.w_gen, cfg.lwpr_radius_frac),
        ..cfg.lwpr
    };
    let mut lwpr = LwprEnsemble::new(lwpr_cfg)?;
    let counts = lwpr.train_batch(&data, cfg.lwpr_epochs, cfg.seed ^ 0x5eed)?;
    log::info!("regression fields per channel: {counts:?}");

    let mut params = MlpParams::init(cfg.seed);
    let mut adam = AdamState::default();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xada);
    for step in 1..=cfg.net_steps as u64 {
        let real: Vec<TrainingPair> = (0..cfg.real_batch).map(|_| data[rng.random_range(0..data.len())]).collect();
        let synth = if cfg.joint { Some(synth_batch_with(&gmm, &lwpr, cfg.synth_batch, &mut rng)?) } else { None };
        constrained_step(&mut params, &mut adam, &real, synth.as_deref(), cfg.lr, step)?;
    }
    Ok(InitializedModels { net: DynamicsNet { params, scaler }, gmm: Arc::new(gmm), lwpr })
}

/// Squared error of a constant predictor at the target mean, summed over
/// channels in standardized units (the same scale as the training loss).
pub fn constant_predictor_loss(data: &[TrainingPair]) -> f64 {
    let n = data.len() as f64;
    let mut total = 0.0;
    for c in 0..OUTPUT_DIM {
        let mean = data.iter().map(|p| p.y[c]).sum::<f64>() / n;
        total += data.iter().map(|p| (p.y[c] - mean).powi(2)).sum::<f64>() / n;
    }
    total
}
