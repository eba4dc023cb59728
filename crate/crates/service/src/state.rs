//! Shared service state, the publishing sink and live engine attachment.

use std::path::{Path, PathBuf};
use std::sync::mpsc::{self, Sender};
use std::sync::{Arc, Mutex, RwLock};
use std::thread::{self, JoinHandle};
use std::time::Duration;

use holmes_core::imgep::{
    ChannelFeedback, Event, ExplorationConfig, ExplorationSink, Explorer, FeedbackCommand, InterestScores, Record, StageCommit,
};
use holmes_core::store::{load_run, resume_run, RunWriter};
use holmes_core::Grid;
use serde::Serialize;
use tokio::sync::broadcast;

use crate::snapshot::Snapshot;

/// Capacity of the event fan-out; subscribers further behind are dropped.
pub const EVENT_BUFFER: usize = 1024;

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct Status {
    pub stage: usize,
    pub runs_done: usize,
    pub paused: bool,
    /// Leaves awaiting scores while paused.
    pub pending_feedback: Option<Vec<String>>,
    pub live: bool,
    pub finished: bool,
    pub scores: InterestScores,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

struct Shared {
    snapshot: Arc<Snapshot>,
    status: Status,
}

pub struct ServiceState {
    dir: PathBuf,
    config: ExplorationConfig,
    shared: RwLock<Shared>,
    events: broadcast::Sender<Arc<str>>,
    commands: Option<Mutex<Sender<FeedbackCommand>>>,
}

impl ServiceState {
    fn new(dir: &Path, config: ExplorationConfig, snapshot: Snapshot, status: Status, commands: Option<Sender<FeedbackCommand>>) -> Arc<Self> {
        let (events, _) = broadcast::channel(EVENT_BUFFER);
        Arc::new(Self {
            dir: dir.to_path_buf(),
            config,
            shared: RwLock::new(Shared { snapshot: Arc::new(snapshot), status }),
            events,
            commands: commands.map(Mutex::new),
        })
    }

    /// Serves a run from disk as of its latest committed stage.
    pub fn open(dir: &Path) -> holmes_core::Result<Arc<Self>> {
        let run = load_run(dir)?;
        let scores = run.checkpoint.as_ref().map(|c| c.scores.clone()).unwrap_or_default();
        let runs = run.committed_runs();
        let snapshot = Snapshot::build(run.stage(), runs, run.tree(), &run.records, &scores);
        let status = Status {
            stage: run.stage(),
            runs_done: runs,
            finished: runs >= run.config.n_total,
            scores,
            ..Status::default()
        };
        Ok(Self::new(dir, run.config, snapshot, status, None))
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn config(&self) -> &ExplorationConfig {
        &self.config
    }

    pub fn snapshot(&self) -> Arc<Snapshot> {
        self.shared.read().expect("state lock").snapshot.clone()
    }

    pub fn status(&self) -> Status {
        self.shared.read().expect("state lock").status.clone()
    }

    pub fn is_live(&self) -> bool {
        self.commands.is_some()
    }

    pub fn subscribe(&self) -> broadcast::Receiver<Arc<str>> {
        self.events.subscribe()
    }

    /// Queues a command for the engine; false when no engine is attached or
    /// it has stopped listening.
    pub fn send(&self, cmd: FeedbackCommand) -> bool {
        self.commands.as_ref().is_some_and(|tx| tx.lock().expect("command lock").send(cmd).is_ok())
    }

    fn update(&self, f: impl FnOnce(&mut Shared)) {
        f(&mut self.shared.write().expect("state lock"));
    }

    fn publish(&self, event: &Event) {
        if let Ok(line) = serde_json::to_string(event) {
            // No subscribers is fine.
            let _ = self.events.send(line.into());
        }
    }
}

/// Mirrors engine progress into the service state and event stream.
pub struct Publisher(pub Arc<ServiceState>);

impl ExplorationSink for Publisher {
    fn on_run(&mut self, record: &Record, _o: &Grid) -> holmes_core::Result<()> {
        self.0.update(|s| s.status.runs_done = record.run + 1);
        Ok(())
    }

    fn on_stage(&mut self, commit: &StageCommit<'_>) -> holmes_core::Result<()> {
        let snapshot =
            Snapshot::from_representation(commit.stage, commit.runs_done, commit.representation, commit.history.records(), commit.scores);
        self.0.update(|s| {
            s.snapshot = Arc::new(snapshot);
            s.status.stage = commit.stage;
            s.status.scores = commit.scores.clone();
        });
        Ok(())
    }

    fn on_pause(&mut self, pending: &StageCommit<'_>) -> holmes_core::Result<()> {
        self.on_stage(pending)
    }

    fn on_event(&mut self, event: &Event) -> holmes_core::Result<()> {
        match event {
            Event::FeedbackRequested { leaves, .. } => self.0.update(|s| {
                s.status.paused = true;
                s.status.pending_feedback = Some(leaves.clone());
            }),
            Event::FeedbackResolved { scores, .. } => self.0.update(|s| {
                s.status.paused = false;
                s.status.pending_feedback = None;
                s.status.scores = scores.clone();
            }),
            _ => {}
        }
        self.0.publish(event);
        Ok(())
    }
}

/// An exploration reopened for live serving, not yet running.
pub struct LiveEngine {
    explorer: Explorer,
    writer: RunWriter,
    feedback: ChannelFeedback,
    state: Arc<ServiceState>,
}

impl LiveEngine {
    /// Runs the exploration to completion on a background thread.
    pub fn spawn(self) -> JoinHandle<holmes_core::Result<()>> {
        let Self { mut explorer, writer, mut feedback, state } = self;
        thread::spawn(move || {
            let mut sink = (writer, Publisher(state.clone()));
            let result = explorer.run(&mut sink, &mut feedback);
            state.update(|s| {
                s.status.finished = result.is_ok();
                s.status.paused = false;
                s.status.error = result.as_ref().err().map(ToString::to_string);
            });
            result
        })
    }
}

/// Reopens the run in `dir` for live serving. Scores and resume commands
/// reach the engine through the returned state once it is spawned.
pub fn attach_live(dir: &Path) -> holmes_core::Result<(Arc<ServiceState>, LiveEngine)> {
    let (explorer, writer) = resume_run(dir)?;
    let (tx, rx) = mpsc::channel();
    let snapshot = Snapshot::from_representation(
        explorer.stage(),
        explorer.runs_done(),
        explorer.representation(),
        explorer.history().records(),
        explorer.scores(),
    );
    let status = Status {
        stage: explorer.stage(),
        runs_done: explorer.runs_done(),
        live: true,
        finished: explorer.is_finished(),
        scores: explorer.scores().clone(),
        ..Status::default()
    };
    let state = ServiceState::new(dir, explorer.config().clone(), snapshot, status, Some(tx));
    let feedback = ChannelFeedback::new(rx, explorer.config().feedback_timeout_ms.map(Duration::from_millis));
    Ok((state.clone(), LiveEngine { explorer, writer, feedback, state }))
}
