//! Goal exploration loop: random bootstrap, goal-space and goal sampling,
//! nearest-neighbour parameter selection with mutation, periodic training of
//! the hierarchy, splits and feedback pauses.
//!
//! Every random draw comes from a ChaCha stream keyed by `(seed, purpose,
//! index)`, so a run resumed from a stage boundary replays exactly.

use std::collections::BTreeMap;
use std::sync::mpsc::{Receiver, RecvTimeoutError};
use std::time::{Duration, Instant};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::bc::{AnalyticBc, FeatureKind};
use crate::cppn::{mutate_genome, random_genome, render_init_state, MutationConfig, RenderConfig, SystemParams};
use crate::embedding::{Architecture, TrainConfig, TrainSample};
use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::lenia::{Lenia, UpdateRuleParams, BETA_BOUNDS, KERNEL_RINGS, MU_BOUNDS, RADIUS_BOUNDS, SIGMA_BOUNDS, TIME_BOUNDS};
use crate::metrics::{score_leaves, ClassifierConfig, PatternClass, classify_pattern};
use crate::tree::{child_ids, HolmesTree, PathStep, Side, SplitOutcome, SplitPolicy, ROOT_ID};

pub type InterestScores = BTreeMap<String, f64>;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GuidanceMode {
    #[default]
    NonGuided,
    Guided,
}

/// Where goals live: the learned hierarchy or one fixed analytic space.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GoalSpace {
    #[default]
    Holmes,
    Spectrum,
    Elliptical,
    Statistics,
}

impl GoalSpace {
    pub fn feature_kind(self) -> Option<FeatureKind> {
        match self {
            GoalSpace::Holmes => None,
            GoalSpace::Spectrum => Some(FeatureKind::Spectrum),
            GoalSpace::Elliptical => Some(FeatureKind::Elliptical),
            GoalSpace::Statistics => Some(FeatureKind::Statistics),
        }
    }
}

/// Standard deviations of the Gaussian jitter applied to the update rule.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MutationStd {
    #[serde(rename = "R")]
    pub radius: f64,
    #[serde(rename = "T")]
    pub time_scale: f64,
    pub mu: f64,
    pub sigma: f64,
    pub beta: f64,
}

impl Default for MutationStd {
    fn default() -> Self {
        Self { radius: 0.5, time_scale: 0.5, mu: 0.1, sigma: 0.05, beta: 0.1 }
    }
}

impl MutationStd {
    pub fn zero() -> Self {
        Self { radius: 0.0, time_scale: 0.0, mu: 0.0, sigma: 0.0, beta: 0.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExplorationConfig {
    pub n_total: usize,
    pub n_init: usize,
    /// Runs between training stages once the bootstrap is done.
    pub train_every: usize,
    pub train_epochs: usize,
    pub grid_size: usize,
    pub steps: usize,
    pub seed: u64,
    pub guidance: GuidanceMode,
    pub temperature: f64,
    pub goal_space: GoalSpace,
    /// Half-width added around a single-point goal envelope.
    pub envelope_inflation: f64,
    pub mutation_std: MutationStd,
    pub genome_mutation: MutationConfig,
    pub render: RenderConfig,
    pub architecture: Architecture,
    pub training: TrainConfig,
    pub split_policy: SplitPolicy,
    /// Pause length before prior scores are kept; `None` waits forever.
    pub feedback_timeout_ms: Option<u64>,
    /// Random rollouts used to fit an analytic projection.
    pub reference_size: usize,
    /// Seed of the reference rollouts; shared across runs so their analytic
    /// spaces coincide.
    pub reference_seed: u64,
}

impl Default for ExplorationConfig {
    fn default() -> Self {
        Self {
            n_total: 5000,
            n_init: 1000,
            train_every: 100,
            train_epochs: 100,
            grid_size: 256,
            steps: 200,
            seed: 0,
            guidance: GuidanceMode::NonGuided,
            temperature: 1.0,
            goal_space: GoalSpace::Holmes,
            envelope_inflation: 0.1,
            mutation_std: MutationStd::default(),
            genome_mutation: MutationConfig::default(),
            render: RenderConfig::default(),
            architecture: Architecture::default(),
            training: TrainConfig::default(),
            split_policy: SplitPolicy::default(),
            feedback_timeout_ms: None,
            reference_size: 2000,
            reference_seed: 999,
        }
    }
}

impl ExplorationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_total == 0 || self.n_init == 0 || self.train_every == 0 || self.steps == 0 || self.grid_size == 0 {
            return Err(Error::Config("run counts, steps and grid size must be positive".into()));
        }
        if self.n_init > self.n_total {
            return Err(Error::Config(format!("n_init {} exceeds n_total {}", self.n_init, self.n_total)));
        }
        if !(self.temperature > 0.0) {
            return Err(Error::Config("softmax temperature must be positive".into()));
        }
        if self.goal_space == GoalSpace::Holmes {
            self.architecture.validate()?;
            self.split_policy.validate()?;
            if self.grid_size % self.architecture.input_size != 0 {
                return Err(Error::Config(format!(
                    "grid size {} is not a multiple of the module input size {}",
                    self.grid_size, self.architecture.input_size
                )));
            }
        }
        Ok(())
    }

    /// Whether a training stage closes after `runs_done` runs.
    pub fn is_stage_boundary(&self, runs_done: usize) -> bool {
        runs_done >= self.n_init && (runs_done - self.n_init) % self.train_every == 0
    }

    /// Run count at which stage `stage` (1-based) closes.
    pub fn stage_boundary(&self, stage: usize) -> usize {
        if stage == 0 {
            0
        } else {
            self.n_init + (stage - 1) * self.train_every
        }
    }
}

/// Purposes of the keyed random streams.
#[derive(Clone, Copy)]
#[repr(u64)]
enum Stream {
    Run = 1,
    Train = 2,
    Split = 3,
    Init = 4,
    Reference = 5,
}

fn stream(seed: u64, purpose: Stream, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((purpose as u64) << 48) | index);
    rng
}

/// One explored run as persisted in the history.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Record {
    pub run: usize,
    pub theta: SystemParams,
    pub pattern: String,
    pub path: Vec<String>,
    pub emb: BTreeMap<String, Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fault: Option<String>,
}

impl Record {
    pub fn leaf(&self) -> &str {
        self.path.last().map_or(ROOT_ID, String::as_str)
    }

    pub fn pattern_ref(run: usize) -> String {
        format!("patterns/{run:06}.f32")
    }
}

/// Embedding refresh of one record: new embeddings and, after a split, the
/// extended path.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingDelta {
    pub run: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<Vec<String>>,
    pub emb: BTreeMap<String, Vec<f64>>,
}

/// The exploration memory: records plus the pooled module inputs they were
/// embedded from.
#[derive(Clone, Debug, Default)]
pub struct History {
    records: Vec<Record>,
    inputs: Vec<Grid>,
}

impl History {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn records(&self) -> &[Record] {
        &self.records
    }

    pub fn record(&self, run: usize) -> Result<&Record> {
        self.records.get(run).ok_or(Error::MissingRecord(run))
    }

    pub(crate) fn push(&mut self, record: Record, input: Option<Grid>) -> Result<()> {
        if record.run != self.records.len() {
            return Err(Error::Format(format!("record {} appended at position {}", record.run, self.records.len())));
        }
        self.records.push(record);
        if let Some(i) = input {
            self.inputs.push(i);
        }
        Ok(())
    }

    pub fn apply(&mut self, delta: &EmbeddingDelta) -> Result<()> {
        let rec = self.records.get_mut(delta.run).ok_or(Error::MissingRecord(delta.run))?;
        if let Some(p) = &delta.path {
            rec.path = p.clone();
        }
        rec.emb.extend(delta.emb.iter().map(|(k, v)| (k.clone(), v.clone())));
        Ok(())
    }

    /// Runs whose path ends at `leaf`.
    pub fn members(&self, leaf: &str) -> Vec<usize> {
        self.records.iter().filter(|r| r.leaf() == leaf).map(|r| r.run).collect()
    }

    /// `(run, leaf)` for every record.
    pub fn placements(&self) -> Vec<(usize, String)> {
        self.records.iter().map(|r| (r.run, r.leaf().to_string())).collect()
    }

    /// SHA-256 over the canonical JSON of every record, in order.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for r in &self.records {
            h.update(serde_json::to_vec(r).expect("records serialize"));
            h.update(b"\n");
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Event {
    RunCompleted { run: usize, leaf: String, fault: Option<String> },
    StageTrained { stage: usize, runs_done: usize, reconstruction: BTreeMap<String, f64> },
    SplitOccurred { stage: usize, parent: String, left: String, right: String, populations: [usize; 2] },
    FeedbackRequested { stage: usize, leaves: Vec<String> },
    FeedbackResolved { stage: usize, scores: InterestScores, timed_out: bool },
}

/// Everything a stage boundary commits.
pub struct StageCommit<'a> {
    pub stage: usize,
    pub runs_done: usize,
    pub representation: &'a Representation,
    pub scores: &'a InterestScores,
    pub deltas: &'a [EmbeddingDelta],
    pub history: &'a History,
}

/// Receives the engine's outputs in order.
pub trait ExplorationSink {
    fn on_run(&mut self, _record: &Record, _observation: &Grid) -> Result<()> {
        Ok(())
    }
    fn on_stage(&mut self, _commit: &StageCommit<'_>) -> Result<()> {
        Ok(())
    }
    fn on_event(&mut self, _event: &Event) -> Result<()> {
        Ok(())
    }
    /// The stage about to be committed, shown before a feedback pause so
    /// observers can present the new leaves. Scores are not yet updated.
    fn on_pause(&mut self, _pending: &StageCommit<'_>) -> Result<()> {
        Ok(())
    }
}

impl ExplorationSink for () {}

impl<S: ExplorationSink + ?Sized> ExplorationSink for &mut S {
    fn on_run(&mut self, record: &Record, observation: &Grid) -> Result<()> {
        (**self).on_run(record, observation)
    }
    fn on_stage(&mut self, commit: &StageCommit<'_>) -> Result<()> {
        (**self).on_stage(commit)
    }
    fn on_event(&mut self, event: &Event) -> Result<()> {
        (**self).on_event(event)
    }
    fn on_pause(&mut self, pending: &StageCommit<'_>) -> Result<()> {
        (**self).on_pause(pending)
    }
}

impl<A: ExplorationSink, B: ExplorationSink> ExplorationSink for (A, B) {
    fn on_run(&mut self, record: &Record, observation: &Grid) -> Result<()> {
        self.0.on_run(record, observation)?;
        self.1.on_run(record, observation)
    }
    fn on_stage(&mut self, commit: &StageCommit<'_>) -> Result<()> {
        self.0.on_stage(commit)?;
        self.1.on_stage(commit)
    }
    fn on_event(&mut self, event: &Event) -> Result<()> {
        self.0.on_event(event)?;
        self.1.on_event(event)
    }
    fn on_pause(&mut self, pending: &StageCommit<'_>) -> Result<()> {
        self.0.on_pause(pending)?;
        self.1.on_pause(pending)
    }
}

/// Context handed to a feedback source at a pause.
pub struct FeedbackRequest<'a> {
    pub stage: usize,
    pub leaves: Vec<String>,
    pub placements: Vec<(usize, String)>,
    pub current: &'a InterestScores,
}

/// Outcome of a pause; `None` keeps the previous scores.
pub trait FeedbackSource {
    /// Sees every final pattern, in run order.
    fn observe(&mut self, _run: usize, _observation: &Grid) {}
    fn request(&mut self, req: &FeedbackRequest<'_>) -> Option<InterestScores>;
}

/// Never answers; guided runs keep their prior scores.
#[derive(Clone, Copy, Debug, Default)]
pub struct NoFeedback;

impl FeedbackSource for NoFeedback {
    fn request(&mut self, _req: &FeedbackRequest<'_>) -> Option<InterestScores> {
        None
    }
}

/// Fixed answers keyed by the stage of the pause; stages without an answer
/// keep the previous scores. Keying by stage keeps resumed runs in step.
#[derive(Clone, Debug, Default)]
pub struct ScriptedFeedback {
    answers: BTreeMap<usize, InterestScores>,
    pub requests: Vec<(usize, Vec<String>)>,
}

impl ScriptedFeedback {
    pub fn new(answers: impl IntoIterator<Item = (usize, InterestScores)>) -> Self {
        Self { answers: answers.into_iter().collect(), requests: Vec::new() }
    }
}

impl FeedbackSource for ScriptedFeedback {
    fn request(&mut self, req: &FeedbackRequest<'_>) -> Option<InterestScores> {
        self.requests.push((req.stage, req.leaves.clone()));
        self.answers.get(&req.stage).cloned()
    }
}

/// Evaluator that scores each leaf by how many patterns of its preferred
/// class it holds.
#[derive(Clone, Debug)]
pub struct SimulatedUser {
    pub preference: PatternClass,
    pub classifier: ClassifierConfig,
    classes: BTreeMap<usize, PatternClass>,
    pub interventions: usize,
}

impl SimulatedUser {
    pub fn new(preference: PatternClass) -> Self {
        Self { preference, classifier: ClassifierConfig::default(), classes: BTreeMap::new(), interventions: 0 }
    }

    pub fn classes(&self) -> &BTreeMap<usize, PatternClass> {
        &self.classes
    }
}

impl FeedbackSource for SimulatedUser {
    fn observe(&mut self, run: usize, observation: &Grid) {
        self.classes.insert(run, classify_pattern(observation, &self.classifier));
    }

    fn request(&mut self, req: &FeedbackRequest<'_>) -> Option<InterestScores> {
        self.interventions += 1;
        let placed = req.placements.iter().filter_map(|(run, leaf)| self.classes.get(run).map(|c| (leaf.as_str(), *c)));
        Some(score_leaves(&req.leaves, placed, self.preference))
    }
}

/// Commands arriving from an interactive evaluator.
#[derive(Clone, Debug, PartialEq)]
pub enum FeedbackCommand {
    Score { leaf: String, score: f64 },
    Resume,
}

/// Feedback over a command queue. Scores sent at any time are folded in at
/// the next pause, which ends on `Resume` or after the timeout.
pub struct ChannelFeedback {
    rx: Receiver<FeedbackCommand>,
    timeout: Option<Duration>,
}

impl ChannelFeedback {
    pub fn new(rx: Receiver<FeedbackCommand>, timeout: Option<Duration>) -> Self {
        Self { rx, timeout }
    }
}

impl FeedbackSource for ChannelFeedback {
    fn request(&mut self, req: &FeedbackRequest<'_>) -> Option<InterestScores> {
        let mut scores = InterestScores::new();
        let deadline = self.timeout.map(|t| Instant::now() + t);
        loop {
            let cmd = match deadline {
                None => self.rx.recv().ok(),
                Some(d) => match self.rx.recv_timeout(d.saturating_duration_since(Instant::now())) {
                    Ok(c) => Some(c),
                    Err(RecvTimeoutError::Timeout | RecvTimeoutError::Disconnected) => None,
                },
            };
            match cmd {
                Some(FeedbackCommand::Score { leaf, score }) => {
                    if req.leaves.contains(&leaf) && score >= 0.0 {
                        scores.insert(leaf, score);
                    }
                }
                Some(FeedbackCommand::Resume) | None => break,
            }
        }
        (!scores.is_empty()).then_some(scores)
    }
}

/// The goal-space structure being explored.
#[derive(Clone, Debug)]
pub enum Representation {
    Holmes(HolmesTree),
    /// A fixed analytic space exposed as the single leaf `"0"`.
    Analytic(AnalyticBc),
}

impl Representation {
    pub fn leaves(&self) -> Vec<String> {
        match self {
            Representation::Holmes(t) => t.leaves(),
            Representation::Analytic(_) => vec![ROOT_ID.to_string()],
        }
    }

    pub fn tree(&self) -> Option<&HolmesTree> {
        match self {
            Representation::Holmes(t) => Some(t),
            Representation::Analytic(_) => None,
        }
    }

    /// Routes a final pattern; also returns the pooled module input.
    fn route(&self, o: &Grid) -> Result<(Vec<PathStep>, Option<Grid>)> {
        match self {
            Representation::Holmes(t) => {
                let input = t.input(o)?;
                Ok((t.route_input(&input)?, Some(input)))
            }
            Representation::Analytic(bc) => {
                Ok((vec![PathStep { node: ROOT_ID.to_string(), embedding: bc.describe(o)? }], None))
            }
        }
    }
}

/// Uniform draw from the update-rule box.
pub fn random_rule<R: Rng + ?Sized>(rng: &mut R) -> UpdateRuleParams {
    let mut u = |b: crate::lenia::Bounds| rng.gen_range(b.min..=b.max);
    UpdateRuleParams {
        radius: u(RADIUS_BOUNDS),
        time_scale: u(TIME_BOUNDS),
        mu: u(MU_BOUNDS),
        sigma: u(SIGMA_BOUNDS),
        beta: [u(BETA_BOUNDS), u(BETA_BOUNDS), u(BETA_BOUNDS)],
    }
}

pub fn random_parameters<R: Rng + ?Sized>(rng: &mut R, genome: &MutationConfig, seed: u64) -> SystemParams {
    let rule = random_rule(rng);
    SystemParams { rule, genome: random_genome(rng, genome), seed }
}

/// Gaussian jitter then clamping of each update-rule field, plus a genome
/// mutation.
pub fn mutate_parameters<R: Rng + ?Sized>(
    theta: &SystemParams,
    std: &MutationStd,
    genome: &MutationConfig,
    rng: &mut R,
) -> SystemParams {
    let mut jitter = |v: f64, s: f64, b: crate::lenia::Bounds| {
        if s > 0.0 {
            b.clamp(v + Normal::new(0.0, s).expect("finite std").sample(rng))
        } else {
            v
        }
    };
    let r = &theta.rule;
    let mut beta = [0.0; KERNEL_RINGS];
    let radius = jitter(r.radius, std.radius, RADIUS_BOUNDS);
    let time_scale = jitter(r.time_scale, std.time_scale, TIME_BOUNDS);
    let mu = jitter(r.mu, std.mu, MU_BOUNDS);
    let sigma = jitter(r.sigma, std.sigma, SIGMA_BOUNDS);
    for (b, &v) in beta.iter_mut().zip(&r.beta) {
        *b = jitter(v, std.beta, BETA_BOUNDS);
    }
    SystemParams {
        rule: UpdateRuleParams { radius, time_scale, mu, sigma, beta },
        genome: mutate_genome(&theta.genome, rng, genome),
        seed: theta.seed,
    }
}

/// Renders the initial state and rolls it out. Faults (an all-zero kernel
/// shell or non-finite activations) yield the zero grid and a reason.
pub fn run_system(theta: &SystemParams, size: usize, steps: usize, render: &RenderConfig) -> Result<(Grid, Option<String>)> {
    let init = render_init_state(&theta.genome, size, size, render)?;
    let outcome = Lenia::new(&theta.rule, size, size).and_then(|sim| sim.rollout(&init, steps, None));
    let (mut o, fault) = match outcome {
        Ok(r) => (r.final_state, None),
        Err(e @ (Error::NumericalFault { .. } | Error::Config(_))) => (Grid::zeros(size, size), Some(e.to_string())),
        Err(e) => return Err(e),
    };
    o.quantize_f32();
    Ok((o, fault))
}

/// Leaf drawn uniformly, or with probability ∝ `exp(score/τ)` when guided.
/// Missing scores count as zero.
pub fn sample_goal_space<R: Rng + ?Sized>(
    leaves: &[String],
    scores: &InterestScores,
    mode: GuidanceMode,
    temperature: f64,
    rng: &mut R,
) -> String {
    assert!(!leaves.is_empty(), "goal space sampling needs a leaf");
    match mode {
        GuidanceMode::NonGuided => leaves[rng.gen_range(0..leaves.len())].clone(),
        GuidanceMode::Guided => {
            let logits: Vec<f64> = leaves.iter().map(|l| scores.get(l).copied().unwrap_or(0.0) / temperature).collect();
            let top = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let weights: Vec<f64> = logits.iter().map(|l| (l - top).exp()).collect();
            let total: f64 = weights.iter().sum();
            let mut u = rng.gen::<f64>() * total;
            for (leaf, w) in leaves.iter().zip(&weights) {
                if u < *w {
                    return leaf.clone();
                }
                u -= w;
            }
            leaves[leaves.len() - 1].clone()
        }
    }
}

/// Uniform draw in the bounding box of `points`; a single point's box is
/// widened by `inflation` on each side.
pub fn sample_goal<R: Rng + ?Sized>(points: &[&[f64]], inflation: f64, rng: &mut R) -> Vec<f64> {
    let dim = points[0].len();
    let pad = if points.len() == 1 { inflation } else { 0.0 };
    (0..dim)
        .map(|d| {
            let lo = points.iter().map(|p| p[d]).fold(f64::INFINITY, f64::min) - pad;
            let hi = points.iter().map(|p| p[d]).fold(f64::NEG_INFINITY, f64::max) + pad;
            if hi > lo {
                rng.gen_range(lo..=hi)
            } else {
                lo
            }
        })
        .collect()
}

/// Index of the point nearest to `goal`; the earliest wins ties.
pub fn nearest(points: &[&[f64]], goal: &[f64]) -> usize {
    let mut best = (f64::INFINITY, 0);
    for (i, p) in points.iter().enumerate() {
        let d: f64 = p.iter().zip(goal).map(|(a, b)| (a - b) * (a - b)).sum();
        if d < best.0 {
            best = (d, i);
        }
    }
    best.1
}

pub struct Explorer {
    config: ExplorationConfig,
    repr: Representation,
    history: History,
    scores: InterestScores,
    stage: usize,
}

impl Explorer {
    /// Fresh run. Analytic goal spaces need their fitted projection.
    pub fn new(config: ExplorationConfig, analytic: Option<AnalyticBc>) -> Result<Self> {
        let repr = Self::initial_representation(&config, analytic)?;
        Ok(Self { config, repr, history: History::default(), scores: InterestScores::new(), stage: 0 })
    }

    pub fn initial_representation(config: &ExplorationConfig, analytic: Option<AnalyticBc>) -> Result<Representation> {
        config.validate()?;
        match (config.goal_space.feature_kind(), analytic) {
            (None, _) => {
                let mut rng = stream(config.seed, Stream::Init, 0);
                Ok(Representation::Holmes(HolmesTree::new(config.architecture, &mut rng)?))
            }
            (Some(kind), Some(bc)) if bc.kind() == kind => Ok(Representation::Analytic(bc)),
            (Some(kind), _) => Err(Error::Config(format!("goal space {kind} needs a fitted {kind} projection"))),
        }
    }

    /// Rebuilds an explorer at a committed stage boundary. `observations`
    /// are the stored final patterns, in run order.
    pub fn resume(
        config: ExplorationConfig,
        repr: Representation,
        records: Vec<Record>,
        observations: &[Grid],
        scores: InterestScores,
        stage: usize,
    ) -> Result<Self> {
        config.validate()?;
        if records.len() != observations.len() {
            return Err(Error::Integrity { stage, reason: "record and pattern counts differ".into() });
        }
        if records.len() != config.stage_boundary(stage) {
            return Err(Error::Integrity {
                stage,
                reason: format!("{} records but the stage closes at {}", records.len(), config.stage_boundary(stage)),
            });
        }
        let mut history = History::default();
        for (rec, o) in records.into_iter().zip(observations) {
            let input = match &repr {
                Representation::Holmes(t) => Some(t.input(o)?),
                Representation::Analytic(_) => None,
            };
            history.push(rec, input)?;
        }
        Ok(Self { config, repr, history, scores, stage })
    }

    pub fn config(&self) -> &ExplorationConfig {
        &self.config
    }

    pub fn representation(&self) -> &Representation {
        &self.repr
    }

    pub fn history(&self) -> &History {
        &self.history
    }

    pub fn scores(&self) -> &InterestScores {
        &self.scores
    }

    pub fn stage(&self) -> usize {
        self.stage
    }

    pub fn runs_done(&self) -> usize {
        self.history.len()
    }

    pub fn is_finished(&self) -> bool {
        self.runs_done() >= self.config.n_total
    }

    /// Runs to completion.
    pub fn run(&mut self, sink: &mut dyn ExplorationSink, feedback: &mut dyn FeedbackSource) -> Result<()> {
        self.run_until(self.config.n_total, sink, feedback)
    }

    /// Runs until `runs` records exist (capped at `n_total`).
    pub fn run_until(&mut self, runs: usize, sink: &mut dyn ExplorationSink, feedback: &mut dyn FeedbackSource) -> Result<()> {
        while self.runs_done() < runs.min(self.config.n_total) {
            self.step(sink, feedback)?;
        }
        Ok(())
    }

    /// One exploration run, closing a stage when it lands on a boundary.
    pub fn step(&mut self, sink: &mut dyn ExplorationSink, feedback: &mut dyn FeedbackSource) -> Result<()> {
        let run = self.runs_done();
        if run >= self.config.n_total {
            return Ok(());
        }
        let mut rng = stream(self.config.seed, Stream::Run, run as u64);
        let theta = if run < self.config.n_init {
            random_parameters(&mut rng, &self.config.genome_mutation, self.config.seed)
        } else {
            let source = self.select_source(&mut rng)?;
            mutate_parameters(&self.history.records[source].theta, &self.config.mutation_std, &self.config.genome_mutation, &mut rng)
        };
        let (o, fault) = run_system(&theta, self.config.grid_size, self.config.steps, &self.config.render)?;
        let (path, input) = self.repr.route(&o)?;
        let record = Record {
            run,
            theta,
            pattern: Record::pattern_ref(run),
            path: path.iter().map(|s| s.node.clone()).collect(),
            emb: path.into_iter().map(|s| (s.node, s.embedding)).collect(),
            fault,
        };
        if let Representation::Holmes(t) = &mut self.repr {
            for id in &record.path {
                t.node_mut(id)?.population += 1;
            }
        }
        feedback.observe(run, &o);
        sink.on_run(&record, &o)?;
        sink.on_event(&Event::RunCompleted { run, leaf: record.leaf().to_string(), fault: record.fault.clone() })?;
        self.history.push(record, input)?;
        if self.config.is_stage_boundary(self.runs_done()) {
            self.close_stage(sink, feedback)?;
        }
        Ok(())
    }

    /// Goal-directed choice of the record whose parameters get mutated.
    fn select_source(&self, rng: &mut ChaCha8Rng) -> Result<usize> {
        let mut leaves = self.repr.leaves();
        let members: BTreeMap<String, Vec<usize>> = leaves.iter().map(|l| (l.clone(), self.history.members(l))).collect();
        leaves.retain(|l| !members[l].is_empty());
        if leaves.is_empty() {
            return Err(Error::Degenerate("no leaf holds a reached goal".into()));
        }
        let leaf = sample_goal_space(&leaves, &self.scores, self.config.guidance, self.config.temperature, rng);
        let runs = &members[&leaf];
        let points: Vec<&[f64]> = runs.iter().map(|&r| self.history.records[r].emb[&leaf].as_slice()).collect();
        let goal = sample_goal(&points, self.config.envelope_inflation, rng);
        Ok(runs[nearest(&points, &goal)])
    }

    fn close_stage(&mut self, sink: &mut dyn ExplorationSink, feedback: &mut dyn FeedbackSource) -> Result<()> {
        let stage = self.stage + 1;
        let runs_done = self.runs_done();
        let mut deltas = Vec::new();
        let mut reconstruction = BTreeMap::new();
        let mut split = None;
        if matches!(self.repr, Representation::Holmes(_)) {
            reconstruction = self.train_leaves(stage)?;
            deltas.extend(self.reembed_leaves(reconstruction.keys())?);
            split = self.try_split(stage, &mut deltas)?;
        }
        for d in &deltas {
            self.history.apply(d)?;
        }
        sink.on_event(&Event::StageTrained { stage, runs_done, reconstruction })?;
        if let Some((parent, left, right)) = &split {
            let t = self.repr.tree().expect("splits happen in trees");
            let populations = [t.node(left)?.population, t.node(right)?.population];
            sink.on_event(&Event::SplitOccurred { stage, parent: parent.clone(), left: left.clone(), right: right.clone(), populations })?;
            if self.config.guidance == GuidanceMode::Guided {
                let leaves = self.repr.leaves();
                sink.on_pause(&StageCommit {
                    stage,
                    runs_done,
                    representation: &self.repr,
                    scores: &self.scores,
                    deltas: &deltas,
                    history: &self.history,
                })?;
                sink.on_event(&Event::FeedbackRequested { stage, leaves: leaves.clone() })?;
                let req = FeedbackRequest { stage, leaves, placements: self.history.placements(), current: &self.scores };
                let answer = feedback.request(&req);
                let timed_out = answer.is_none();
                if let Some(s) = answer {
                    self.scores.extend(s);
                }
                sink.on_event(&Event::FeedbackResolved { stage, scores: self.scores.clone(), timed_out })?;
            }
        }
        self.stage = stage;
        sink.on_stage(&StageCommit {
            stage,
            runs_done,
            representation: &self.repr,
            scores: &self.scores,
            deltas: &deltas,
            history: &self.history,
        })
    }

    /// Trains every unfrozen leaf on its routed patterns; returns each
    /// trained leaf's last-epoch reconstruction loss.
    fn train_leaves(&mut self, stage: usize) -> Result<BTreeMap<String, f64>> {
        let Representation::Holmes(tree) = &mut self.repr else {
            return Ok(BTreeMap::new());
        };
        let new_from = self.config.stage_boundary(stage - 1);
        let mut out = BTreeMap::new();
        for (k, leaf) in tree.leaves().into_iter().enumerate() {
            if tree.node(&leaf)?.module.frozen {
                continue;
            }
            let samples: Vec<TrainSample> = self
                .history
                .records
                .iter()
                .filter(|r| r.leaf() == leaf)
                .map(|r| TrainSample { grid: self.history.inputs[r.run].clone(), is_new: r.run >= new_from })
                .collect();
            let mut rng = stream(self.config.seed, Stream::Train, ((stage as u64) << 16) | k as u64);
            let mut module = tree.node(&leaf)?.module.clone();
            let view: &HolmesTree = tree;
            let report = module.train_stage(
                &samples,
                &|g: &Grid| view.parent_trace(&leaf, g),
                self.config.train_epochs,
                &self.config.training,
                &mut rng,
            )?;
            tree.node_mut(&leaf)?.module = module;
            if let Some(rec) = report.final_reconstruction {
                out.insert(leaf, rec);
            }
        }
        Ok(out)
    }

    /// Fresh embeddings at the given (just trained) leaves.
    fn reembed_leaves<'a>(&self, leaves: impl Iterator<Item = &'a String>) -> Result<Vec<EmbeddingDelta>> {
        let Representation::Holmes(tree) = &self.repr else {
            return Ok(Vec::new());
        };
        let mut deltas = Vec::new();
        for leaf in leaves {
            for r in self.history.records.iter().filter(|r| r.leaf() == leaf) {
                let e = tree.embed_at(leaf, &self.history.inputs[r.run])?;
                if r.emb.get(leaf) != Some(&e) {
                    deltas.push(EmbeddingDelta { run: r.run, path: None, emb: BTreeMap::from([(leaf.clone(), e)]) });
                }
            }
        }
        Ok(deltas)
    }

    /// Splits at most one saturated leaf and reprojects its records into
    /// the new children. Returns `(parent, left, right)` on success.
    fn try_split(&mut self, stage: usize, deltas: &mut Vec<EmbeddingDelta>) -> Result<Option<(String, String, String)>> {
        let runs_done = self.runs_done();
        let Representation::Holmes(tree) = &mut self.repr else {
            return Ok(None);
        };
        let policy = self.config.split_policy;
        let Some(id) = tree.split_candidate(&policy, runs_done)? else {
            return Ok(None);
        };
        // Embeddings at the node, with this stage's refresh applied.
        let mut current: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
        for r in self.history.records.iter().filter(|r| r.leaf() == id) {
            current.insert(r.run, r.emb[&id].clone());
        }
        for d in deltas.iter() {
            if let Some(e) = d.emb.get(&id) {
                current.insert(d.run, e.clone());
            }
        }
        let points: Vec<Vec<f64>> = current.values().cloned().collect();
        let mut rng = stream(self.config.seed, Stream::Split, stage as u64);
        let (left, right) = match tree.split(&id, &points, policy.max_splits, &mut rng)? {
            SplitOutcome::Split { left, right, .. } => (left, right),
            SplitOutcome::Degenerate | SplitOutcome::Refused(_) => return Ok(None),
        };
        let boundary = tree.node(&id)?.boundary.clone().expect("split node has a boundary");
        let (l, _) = child_ids(&id);
        debug_assert_eq!(l, left);
        for (run, parent_emb) in current {
            let child = if boundary.side(&parent_emb) == Side::Left { &left } else { &right };
            let e = tree.embed_at(child, &self.history.inputs[run])?;
            tree.node_mut(child)?.population += 1;
            let mut path = self.history.records[run].path.clone();
            path.push(child.clone());
            let delta = deltas.iter_mut().find(|d| d.run == run);
            match delta {
                Some(d) => {
                    d.path = Some(path);
                    d.emb.insert(child.clone(), e);
                }
                None => deltas.push(EmbeddingDelta { run, path: Some(path), emb: BTreeMap::from([(child.clone(), e)]) }),
            }
        }
        deltas.sort_by_key(|d| d.run);
        Ok(Some((id, left, right)))
    }
}

/// Seeded random-exploration rollouts used to fit analytic projections.
pub fn reference_patterns(
    count: usize,
    size: usize,
    steps: usize,
    seed: u64,
    render: &RenderConfig,
    genome: &MutationConfig,
) -> Result<Vec<Grid>> {
    (0..count)
        .map(|i| {
            let mut rng = stream(seed, Stream::Reference, i as u64);
            let theta = random_parameters(&mut rng, genome, seed);
            run_system(&theta, size, steps, render).map(|(o, _)| o)
        })
        .collect()
}

/// Rolls out the configured reference set and fits `kind` on it.
pub fn reference_space(config: &ExplorationConfig, kind: FeatureKind) -> Result<AnalyticBc> {
    let reference = reference_patterns(
        config.reference_size,
        config.grid_size,
        config.steps,
        config.reference_seed,
        &config.render,
        &config.genome_mutation,
    )?;
    fit_analytic(kind, &reference)
}

/// Fits the projection of one analytic space on reference patterns.
pub fn fit_analytic(kind: FeatureKind, reference: &[Grid]) -> Result<AnalyticBc> {
    let fvs = reference.iter().map(|o| crate::bc::feature_vector(kind, o)).collect::<Result<Vec<_>>>()?;
    Ok(AnalyticBc { projection: crate::bc::fit_projection(kind, &fvs)? })
}
