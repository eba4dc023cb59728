//! Append-only run directory.
//!
//! ```text
//! config.json
//! bc_<kind>.proj                  analytic goal-space projection, if any
//! history/records.jsonl           one record per run, in run order
//! history/reembed_<stage>.jsonl   embedding refreshes of each stage
//! patterns/<run:06>.f32           final patterns, little-endian f32
//! checkpoints/tree_<stage>.bin    stage commit: node table and scores
//! checkpoints/modules/*.hmod      module blobs referenced by the commits
//! events.jsonl
//! eval/
//! ```
//!
//! A pattern blob is written before its record line, and a stage is
//! committed by atomically renaming its checkpoint into place.

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};

use crate::bc::{AnalyticBc, BcProjection};
use crate::embedding::EmbeddingModule;
use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::imgep::{
    EmbeddingDelta, Event, ExplorationConfig, ExplorationSink, Explorer, InterestScores, Record, Representation, StageCommit,
};
use crate::tree::{Boundary, HolmesTree, Node};

const CONFIG: &str = "config.json";
const RECORDS: &str = "history/records.jsonl";
const EVENTS: &str = "events.jsonl";
const CHECKPOINT_MAGIC: &[u8; 4] = b"HTRE";
const CHECKPOINT_VERSION: u8 = 1;

fn reembed_path(dir: &Path, stage: usize) -> PathBuf {
    dir.join(format!("history/reembed_{stage}.jsonl"))
}

fn checkpoint_path(dir: &Path, stage: usize) -> PathBuf {
    dir.join(format!("checkpoints/tree_{stage}.bin"))
}

pub fn pattern_path(dir: &Path, run: usize) -> PathBuf {
    dir.join(Record::pattern_ref(run))
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    {
        let mut f = File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

fn append_line<T: Serialize>(f: &mut File, value: &T) -> Result<()> {
    let mut line = serde_json::to_vec(value)?;
    line.push(b'\n');
    f.write_all(&line)?;
    Ok(())
}

/// Complete JSON lines of a file; a torn final line is dropped.
fn read_lines<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let mut out = Vec::new();
    let mut reader = BufReader::new(File::open(path)?);
    let mut line = String::new();
    loop {
        line.clear();
        if reader.read_line(&mut line)? == 0 || !line.ends_with('\n') {
            break;
        }
        match serde_json::from_str(line.trim_end()) {
            Ok(v) => out.push(v),
            Err(_) => break,
        }
    }
    Ok(out)
}

/// Rewrites `path` keeping only its first `keep` lines.
fn truncate_lines(path: &Path, keep: usize) -> Result<()> {
    if !path.exists() {
        return Ok(());
    }
    let mut bytes = Vec::new();
    File::open(path)?.read_to_end(&mut bytes)?;
    let cut = bytes
        .iter()
        .enumerate()
        .filter(|(_, &b)| b == b'\n')
        .nth(keep.wrapping_sub(1))
        .map_or(0, |(i, _)| i + 1);
    let cut = if keep == 0 { 0 } else { cut };
    OpenOptions::new().write(true).open(path)?.set_len(cut as u64)?;
    Ok(())
}

#[derive(Serialize, Deserialize)]
struct NodeEntry {
    id: String,
    frozen: bool,
    population: usize,
    split_ineligible: bool,
    has_boundary: bool,
    module: String,
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    stage: usize,
    runs_done: usize,
    events: usize,
    scores: InterestScores,
    nodes: Vec<NodeEntry>,
}

/// Contents of a committed stage.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub stage: usize,
    pub runs_done: usize,
    /// Lines of `events.jsonl` written at commit time.
    pub events: usize,
    pub scores: InterestScores,
    /// `None` for analytic goal spaces.
    pub tree: Option<HolmesTree>,
}

/// Writes a run as the engine produces it.
pub struct RunWriter {
    dir: PathBuf,
    records: File,
    events: File,
    events_written: usize,
}

impl RunWriter {
    /// Starts a new run directory; refuses to overwrite an existing run.
    pub fn create(dir: &Path, config: &ExplorationConfig, analytic: Option<&AnalyticBc>) -> Result<Self> {
        if dir.join(CONFIG).exists() {
            return Err(Error::Config(format!("{} already holds a run", dir.display())));
        }
        for sub in ["history", "patterns", "checkpoints/modules", "eval"] {
            fs::create_dir_all(dir.join(sub))?;
        }
        write_atomic(&dir.join(CONFIG), &serde_json::to_vec_pretty(config)?)?;
        if let Some(bc) = analytic {
            bc.projection.save(dir)?;
        }
        Self::open(dir, 0)
    }

    fn open(dir: &Path, events_written: usize) -> Result<Self> {
        let opts = || {
            let mut o = OpenOptions::new();
            o.create(true).append(true);
            o
        };
        Ok(Self {
            dir: dir.to_path_buf(),
            records: opts().open(dir.join(RECORDS))?,
            events: opts().open(dir.join(EVENTS))?,
            events_written,
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    fn write_modules(&self, stage: usize, tree: &HolmesTree) -> Result<Vec<NodeEntry>> {
        let mut entries = Vec::new();
        for (id, node) in tree.nodes() {
            // Frozen modules never change, so one blob serves every later stage.
            let name = if node.module.frozen { format!("modules/{id}_frozen.hmod") } else { format!("modules/{id}_{stage}.hmod") };
            let path = self.dir.join("checkpoints").join(&name);
            if !(node.module.frozen && path.exists()) {
                let mut buf = Vec::new();
                node.module.write_blob(&mut buf)?;
                write_atomic(&path, &buf)?;
            }
            entries.push(NodeEntry {
                id: id.clone(),
                frozen: node.module.frozen,
                population: node.population,
                split_ineligible: node.split_ineligible,
                has_boundary: node.boundary.is_some(),
                module: name,
            });
        }
        Ok(entries)
    }
}

impl ExplorationSink for RunWriter {
    fn on_run(&mut self, record: &Record, observation: &Grid) -> Result<()> {
        let blob = pattern_path(&self.dir, record.run);
        fs::write(&blob, observation.to_f32_bytes())?;
        append_line(&mut self.records, record)
    }

    fn on_event(&mut self, event: &Event) -> Result<()> {
        append_line(&mut self.events, event)?;
        self.events_written += 1;
        Ok(())
    }

    fn on_stage(&mut self, commit: &StageCommit<'_>) -> Result<()> {
        let mut f = File::create(reembed_path(&self.dir, commit.stage))?;
        for d in commit.deltas {
            append_line(&mut f, d)?;
        }
        f.sync_all()?;
        self.records.sync_data()?;
        self.events.sync_data()?;
        let (nodes, boundaries) = match commit.representation {
            Representation::Holmes(tree) => {
                let b: Vec<Boundary> = tree.nodes().values().filter_map(|n| n.boundary.clone()).collect();
                (self.write_modules(commit.stage, tree)?, b)
            }
            Representation::Analytic(_) => (Vec::new(), Vec::new()),
        };
        let header = serde_json::to_vec(&CheckpointHeader {
            stage: commit.stage,
            runs_done: commit.runs_done,
            events: self.events_written,
            scores: commit.scores.clone(),
            nodes,
        })?;
        let mut buf = Vec::new();
        buf.extend_from_slice(CHECKPOINT_MAGIC);
        buf.push(CHECKPOINT_VERSION);
        buf.write_u32::<LittleEndian>(header.len() as u32)?;
        buf.extend_from_slice(&header);
        for b in boundaries {
            for v in b.left.iter().chain(&b.right) {
                buf.write_f64::<LittleEndian>(*v)?;
            }
        }
        write_atomic(&checkpoint_path(&self.dir, commit.stage), &buf)
    }
}

pub fn load_config(dir: &Path) -> Result<ExplorationConfig> {
    let path = dir.join(CONFIG);
    if !path.exists() {
        return Err(Error::NoRun(dir.to_path_buf()));
    }
    Ok(serde_json::from_slice(&fs::read(path)?)?)
}

/// Stages with a committed checkpoint, ascending.
pub fn committed_stages(dir: &Path) -> Result<Vec<usize>> {
    let cp = dir.join("checkpoints");
    if !cp.exists() {
        return Ok(Vec::new());
    }
    let mut stages: Vec<usize> = fs::read_dir(cp)?
        .filter_map(|e| e.ok())
        .filter_map(|e| {
            let name = e.file_name().into_string().ok()?;
            name.strip_prefix("tree_")?.strip_suffix(".bin")?.parse().ok()
        })
        .collect();
    stages.sort_unstable();
    Ok(stages)
}

pub fn read_checkpoint(dir: &Path, config: &ExplorationConfig, stage: usize) -> Result<Checkpoint> {
    let bytes = fs::read(checkpoint_path(dir, stage))?;
    let bad = |reason: &str| Error::Integrity { stage, reason: reason.to_string() };
    if bytes.len() < 9 || &bytes[..4] != CHECKPOINT_MAGIC || bytes[4] != CHECKPOINT_VERSION {
        return Err(bad("not a tree checkpoint"));
    }
    let mut r = &bytes[5..];
    let len = r.read_u32::<LittleEndian>()? as usize;
    if r.len() < len {
        return Err(bad("truncated header"));
    }
    let header: CheckpointHeader = serde_json::from_slice(&r[..len])?;
    r = &r[len..];
    if header.stage != stage {
        return Err(bad("stage number disagrees with the file name"));
    }
    let tree = if config.goal_space.feature_kind().is_none() {
        let dim = config.architecture.latent_dim;
        let mut nodes = BTreeMap::new();
        for e in &header.nodes {
            let file = File::open(dir.join("checkpoints").join(&e.module))?;
            let module = EmbeddingModule::read_blob(BufReader::new(file))?;
            if module.frozen != e.frozen {
                return Err(bad(&format!("module of node {} has the wrong freeze flag", e.id)));
            }
            let boundary = if e.has_boundary {
                let mut read = || (0..dim).map(|_| r.read_f64::<LittleEndian>()).collect::<std::io::Result<Vec<f64>>>();
                let left = read().map_err(|_| bad("truncated boundary table"))?;
                let right = read().map_err(|_| bad("truncated boundary table"))?;
                Some(Boundary { left, right })
            } else {
                None
            };
            nodes.insert(e.id.clone(), Node { module, boundary, population: e.population, split_ineligible: e.split_ineligible });
        }
        Some(HolmesTree::from_parts(config.architecture, nodes).map_err(|e| bad(&e.to_string()))?)
    } else {
        None
    };
    Ok(Checkpoint { stage, runs_done: header.runs_done, events: header.events, scores: header.scores, tree })
}

pub fn read_deltas(dir: &Path, stage: usize) -> Result<Vec<EmbeddingDelta>> {
    read_lines(&reembed_path(dir, stage))
}

pub fn read_events(dir: &Path) -> Result<Vec<Event>> {
    read_lines(&dir.join(EVENTS))
}

pub fn load_pattern(dir: &Path, size: usize, run: usize) -> Result<Grid> {
    let path = pattern_path(dir, run);
    if !path.exists() {
        return Err(Error::MissingRecord(run));
    }
    Grid::from_f32_bytes(size, size, &fs::read(path)?)
}

pub fn load_projection(dir: &Path, config: &ExplorationConfig) -> Result<Option<AnalyticBc>> {
    match config.goal_space.feature_kind() {
        None => Ok(None),
        Some(kind) => Ok(Some(AnalyticBc { projection: BcProjection::load(dir, kind)? })),
    }
}

/// In-memory view of a run directory.
#[derive(Clone, Debug)]
pub struct LoadedRun {
    pub config: ExplorationConfig,
    /// Every complete record, with the refreshes of committed stages applied.
    pub records: Vec<Record>,
    /// Latest committed stage, if any.
    pub checkpoint: Option<Checkpoint>,
}

impl LoadedRun {
    pub fn committed_runs(&self) -> usize {
        self.checkpoint.as_ref().map_or(0, |c| c.runs_done)
    }

    pub fn stage(&self) -> usize {
        self.checkpoint.as_ref().map_or(0, |c| c.stage)
    }

    pub fn tree(&self) -> Option<&HolmesTree> {
        self.checkpoint.as_ref().and_then(|c| c.tree.as_ref())
    }

    pub fn pattern(&self, dir: &Path, run: usize) -> Result<Grid> {
        if run >= self.records.len() {
            return Err(Error::MissingRecord(run));
        }
        load_pattern(dir, self.config.grid_size, run)
    }
}

pub fn load_run(dir: &Path) -> Result<LoadedRun> {
    let config = load_config(dir)?;
    let mut records: Vec<Record> = read_lines(&dir.join(RECORDS))?;
    for (i, r) in records.iter().enumerate() {
        if r.run != i {
            return Err(Error::Format(format!("line {i} holds run {}", r.run)));
        }
    }
    // A record whose blob is missing was never committed.
    if let Some(missing) = records.iter().position(|r| !dir.join(&r.pattern).exists()) {
        records.truncate(missing);
    }
    let stage = committed_stages(dir)?.last().copied();
    let checkpoint = stage.map(|s| read_checkpoint(dir, &config, s)).transpose()?;
    if let Some(cp) = &checkpoint {
        if cp.runs_done > records.len() {
            return Err(Error::Integrity {
                stage: cp.stage,
                reason: format!("checkpoint covers {} runs but only {} records exist", cp.runs_done, records.len()),
            });
        }
        for s in 1..=cp.stage {
            for d in read_deltas(dir, s)? {
                let rec = records.get_mut(d.run).ok_or(Error::Integrity {
                    stage: s,
                    reason: format!("refresh of missing run {}", d.run),
                })?;
                if let Some(p) = d.path {
                    rec.path = p;
                }
                rec.emb.extend(d.emb);
            }
        }
    }
    Ok(LoadedRun { config, records, checkpoint })
}

/// Reopens a run at its latest committed stage. Anything written after that
/// commit is discarded so the continuation replays it exactly.
pub fn resume_run(dir: &Path) -> Result<(Explorer, RunWriter)> {
    let loaded = load_run(dir)?;
    let analytic = load_projection(dir, &loaded.config)?;
    let (stage, runs, events, scores, repr) = match loaded.checkpoint {
        Some(cp) => {
            let repr = match (cp.tree, analytic) {
                (Some(t), _) => Representation::Holmes(t),
                (None, Some(bc)) => Representation::Analytic(bc),
                (None, None) => return Err(Error::Integrity { stage: cp.stage, reason: "no goal space".into() }),
            };
            (cp.stage, cp.runs_done, cp.events, cp.scores, repr)
        }
        None => (0, 0, 0, InterestScores::new(), Explorer::initial_representation(&loaded.config, analytic)?),
    };
    let mut records = loaded.records;
    for r in records.len()..usize::MAX {
        if !pattern_path(dir, r).exists() {
            break;
        }
        fs::remove_file(pattern_path(dir, r))?;
    }
    for r in runs..records.len() {
        let p = pattern_path(dir, r);
        if p.exists() {
            fs::remove_file(p)?;
        }
    }
    records.truncate(runs);
    truncate_lines(&dir.join(RECORDS), runs)?;
    truncate_lines(&dir.join(EVENTS), events)?;
    for s in committed_stages(dir)?.into_iter().filter(|&s| s > stage) {
        fs::remove_file(checkpoint_path(dir, s))?;
    }
    let mut s = stage + 1;
    while reembed_path(dir, s).exists() {
        fs::remove_file(reembed_path(dir, s))?;
        s += 1;
    }
    let observations =
        (0..runs).map(|r| load_pattern(dir, loaded.config.grid_size, r)).collect::<Result<Vec<_>>>()?;
    let explorer = Explorer::resume(loaded.config, repr, records, &observations, scores, stage)?;
    Ok((explorer, RunWriter::open(dir, events)?))
}

/// Writes the final pattern of `run` as an 8-bit grayscale PNG.
pub fn export_png(dir: &Path, run: usize, out: &Path) -> Result<()> {
    let config = load_config(dir)?;
    load_pattern(dir, config.grid_size, run)?.write_png(out)
}

/// Convenience writer for evaluation outputs under `eval/`.
pub fn eval_writer(dir: &Path, name: &str) -> Result<BufWriter<File>> {
    fs::create_dir_all(dir.join("eval"))?;
    Ok(BufWriter::new(File::create(dir.join("eval").join(name))?))
}
