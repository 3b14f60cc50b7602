//! Experiment runner: configuration, the per-frame pipeline that ties scene
//! generation, pillar encoding, communication policies and evaluation
//! together, and the commands behind the `coopdet` binary.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attention::{selection_accuracy, train_attention, AttentionError, AttentionState, SelectionExample};
use crate::eval::{ap_table, bandwidth_table, evaluate_policy, map_table, Bucket, EvalError, FrameResult, PolicyEval};
use crate::netsim::{run_policy, write_trace_log, FrameFeatures, LinkModel, NetError, Policy, RunOptions, LEDGER_CSV_HEADER};
use crate::pillars::{PillarEncoder, PillarError, PillarGrid, SPointNetWeights};
use crate::rng::derive_seed;
use crate::scenegen::{generate_scene, oracle_best_infrastructure, oracle_detect, Dataset, OracleParams, SceneConfig, SceneError, SceneFrame};

/// Failure of an experiment command. Usage errors exit with 1, data errors
/// with 2.
#[derive(Debug, Error)]
pub enum Error {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Data(String),
}

impl Error {
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Usage(_) => 1,
            Error::Data(_) => 2,
        }
    }
}

impl From<SceneError> for Error {
    fn from(e: SceneError) -> Self {
        match e {
            SceneError::Config(m) => Error::Usage(format!("scene config: {m}")),
            other => Error::Data(other.to_string()),
        }
    }
}

impl From<NetError> for Error {
    fn from(e: NetError) -> Self {
        match e {
            NetError::UnknownPolicy(_) | NetError::Link(_) => Error::Usage(e.to_string()),
            other => Error::Data(other.to_string()),
        }
    }
}

impl From<AttentionError> for Error {
    fn from(e: AttentionError) -> Self {
        Error::Data(e.to_string())
    }
}

impl From<PillarError> for Error {
    fn from(e: PillarError) -> Self {
        Error::Usage(format!("grid: {e}"))
    }
}

impl From<EvalError> for Error {
    fn from(e: EvalError) -> Self {
        Error::Usage(e.to_string())
    }
}

fn io_err(path: &Path, e: std::io::Error) -> Error {
    Error::Data(format!("{}: {e}", path.display()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSection {
    /// Scene preset; ignored when a `[scene]` table is present.
    pub scenario: String,
    pub frames: usize,
    pub seed: u64,
    pub output: String,
    pub policies: Vec<String>,
    pub iou_threshold: f64,
    /// Seeds averaged for the random-selection expectation.
    pub rand_select_seeds: Vec<u64>,
}

impl Default for RunSection {
    fn default() -> Self {
        Self {
            scenario: "roundabout".into(),
            frames: 100,
            seed: 1,
            output: "out".into(),
            policies: Policy::NAMES.iter().map(|s| s.to_string()).collect(),
            iou_threshold: 0.7,
            rand_select_seeds: vec![1, 2, 3, 4, 5],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridSection {
    pub x_range: [f64; 2],
    pub y_range: [f64; 2],
    pub z_range: [f64; 2],
    pub pillar_size: [f64; 2],
    pub omega: usize,
    pub channels: usize,
    pub weight_seed: u64,
}

impl Default for GridSection {
    fn default() -> Self {
        Self {
            x_range: [-40.32, 40.32],
            y_range: [-35.84, 35.84],
            z_range: [-3.0, 1.0],
            pillar_size: [0.56, 0.56],
            omega: 100,
            channels: 64,
            weight_seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttentionSection {
    pub query_dim: usize,
    pub key_dim: usize,
    pub seed: u64,
    pub learning_rate: f64,
    pub epochs: usize,
    /// Saved state used by Learn2com; defaults to `attention.bin` in the
    /// dataset directory.
    pub state: Option<String>,
}

impl Default for AttentionSection {
    fn default() -> Self {
        Self { query_dim: 16, key_dim: 128, seed: 0, learning_rate: 300.0, epochs: 200, state: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OracleSection {
    pub tau: u32,
    pub noise: f64,
    pub kappa: f64,
}

impl Default for OracleSection {
    fn default() -> Self {
        let d = OracleParams::default();
        Self { tau: d.tau, noise: d.noise, kappa: d.kappa }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LinkSection {
    /// Bytes per second.
    pub capacity: f64,
    pub latency: f64,
    pub loss: f64,
}

impl Default for LinkSection {
    fn default() -> Self {
        let d = LinkModel::default();
        Self { capacity: d.capacity, latency: d.latency, loss: d.loss }
    }
}

/// Everything one experiment needs. Every section is optional in the file.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub run: RunSection,
    pub grid: GridSection,
    pub attention: AttentionSection,
    pub oracle: OracleSection,
    pub link: LinkSection,
    pub scene: Option<SceneConfig>,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, Error> {
        let c: Self = toml::from_str(text).map_err(|e| Error::Usage(format!("config: {e}")))?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self, Error> {
        let text = fs::read_to_string(path).map_err(|e| Error::Usage(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), Error> {
        self.scene_config()?.validate()?;
        self.encoder()?;
        self.links(0)?;
        for p in &self.run.policies {
            Policy::canonical_name(p)?;
        }
        let r = &self.run;
        if !(r.iou_threshold > 0.0 && r.iou_threshold <= 1.0) {
            return Err(Error::Usage(format!("iou_threshold {} outside (0, 1]", r.iou_threshold)));
        }
        if r.rand_select_seeds.is_empty() {
            return Err(Error::Usage("rand_select_seeds must not be empty".into()));
        }
        let a = &self.attention;
        if a.query_dim == 0 || a.key_dim == 0 || !(a.learning_rate > 0.0) {
            return Err(Error::Usage("attention dimensions and learning rate must be positive".into()));
        }
        if self.oracle.tau == 0 || !(self.oracle.noise >= 0.0) || !(self.oracle.kappa > 0.0) {
            return Err(Error::Usage("oracle needs tau >= 1, noise >= 0, kappa > 0".into()));
        }
        Ok(())
    }

    pub fn scene_config(&self) -> Result<SceneConfig, Error> {
        match &self.scene {
            Some(s) => Ok(s.clone()),
            None => SceneConfig::preset(&self.run.scenario).ok_or_else(|| {
                Error::Usage(format!(
                    "unknown scenario {:?}; valid names: roundabout, t_junction, occlusion_heavy",
                    self.run.scenario
                ))
            }),
        }
    }

    pub fn grid(&self) -> Result<PillarGrid, Error> {
        let g = &self.grid;
        Ok(PillarGrid::new(
            (g.x_range[0], g.x_range[1]),
            (g.y_range[0], g.y_range[1]),
            (g.z_range[0], g.z_range[1]),
            g.pillar_size[0],
            g.pillar_size[1],
            g.z_range[1] - g.z_range[0],
        )?)
    }

    pub fn encoder(&self) -> Result<PillarEncoder, Error> {
        if self.grid.omega == 0 || self.grid.channels == 0 {
            return Err(Error::Usage("omega and channels must be positive".into()));
        }
        Ok(PillarEncoder::new(
            self.grid()?,
            self.grid.omega,
            SPointNetWeights::seeded(self.grid.channels, self.grid.weight_seed),
        ))
    }

    pub fn links(&self, n: usize) -> Result<Vec<LinkModel>, Error> {
        let l = LinkModel::new(self.link.capacity, self.link.latency, self.link.loss)?;
        Ok(vec![l; n])
    }

    pub fn oracle(&self) -> OracleParams {
        OracleParams { tau: self.oracle.tau, noise: self.oracle.noise, kappa: self.oracle.kappa }
    }

    pub fn initial_attention(&self) -> AttentionState {
        AttentionState::seeded(self.grid.channels, self.attention.query_dim, self.attention.key_dim, self.attention.seed)
    }
}

/// Query, keys and oracle label of one frame; `None` without
/// infrastructure.
pub fn selection_example(frame: &SceneFrame, features: &FrameFeatures, state: &AttentionState, tau: u32) -> Result<Option<SelectionExample>, Error> {
    let Some(best) = oracle_best_infrastructure(frame, tau) else {
        return Ok(None);
    };
    let query = state.query(&features.vehicle)?;
    let keys = features.infrastructures.iter().map(|img| state.key(img)).collect::<Result<Vec<_>, _>>()?;
    Ok(Some(SelectionExample { query, keys, best }))
}

/// Selection examples for `frames`, encoded in parallel.
pub fn selection_dataset(frames: &[SceneFrame], encoder: &PillarEncoder, state: &AttentionState, tau: u32) -> Result<Vec<SelectionExample>, Error> {
    let out: Vec<Option<SelectionExample>> = frames
        .par_iter()
        .map(|f| {
            let feats = FrameFeatures::compute(f, encoder)?;
            selection_example(f, &feats, state, tau)
        })
        .collect::<Result<_, Error>>()?;
    Ok(out.into_iter().flatten().collect())
}

/// One policy's per-frame outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyRun {
    pub policy: String,
    pub results: Vec<FrameResult>,
    /// Counted bytes per frame.
    pub bytes: Vec<u64>,
    /// Participating infrastructures per frame.
    pub participants: Vec<Vec<usize>>,
    /// Ledger rows `frame,policy,kind,bytes,KB`.
    pub ledger_csv: String,
}

impl PolicyRun {
    pub fn mean_bytes(&self) -> f64 {
        if self.bytes.is_empty() {
            0.0
        } else {
            self.bytes.iter().sum::<u64>() as f64 / self.bytes.len() as f64
        }
    }

    pub fn evaluate(&self, iou_threshold: f64) -> Result<PolicyEval, Error> {
        Ok(evaluate_policy(&self.policy, &self.results, self.mean_bytes(), iou_threshold)?)
    }
}

/// Result, counted bytes, participants and ledger rows of one policy on one
/// frame.
type PolicyFrame = (FrameResult, u64, Vec<usize>, String);

/// Encodes each frame once and runs every policy on it. Frames are
/// processed in parallel; outputs keep frame order.
pub fn run_policies(
    frames: &[SceneFrame],
    encoder: &PillarEncoder,
    policies: &[Policy],
    links: &[LinkModel],
    oracle: &OracleParams,
) -> Result<Vec<PolicyRun>, Error> {
    let per_frame: Vec<Vec<PolicyFrame>> = frames
        .par_iter()
        .map(|frame| {
            let feats = FrameFeatures::compute(frame, encoder)?;
            let gt = frame.ground_truth();
            let links = &links[..frame.n_infrastructures().min(links.len())];
            policies
                .iter()
                .map(|p| {
                    let out = run_policy(&feats, p, links, RunOptions::default())?;
                    let dets = oracle_detect(frame, &out.sensors(), oracle, derive_seed(frame.seed, "oracle", 0));
                    let csv = out.ledger.csv_rows(frame.id, p.name());
                    Ok((FrameResult { detections: dets, ground_truth: gt.clone() }, out.ledger.counted_bytes(), out.participants, csv))
                })
                .collect::<Result<Vec<_>, Error>>()
        })
        .collect::<Result<_, Error>>()?;
    let mut runs: Vec<PolicyRun> = policies
        .iter()
        .map(|p| PolicyRun { policy: p.name().to_string(), results: Vec::new(), bytes: Vec::new(), participants: Vec::new(), ledger_csv: String::new() })
        .collect();
    for frame in per_frame {
        for (run, (res, bytes, parts, csv)) in runs.iter_mut().zip(frame) {
            run.results.push(res);
            run.bytes.push(bytes);
            run.participants.push(parts);
            run.ledger_csv.push_str(&csv);
        }
    }
    Ok(runs)
}

/// Policies named in `names`, with Learn2com bound to `state`.
pub fn build_policies(names: &[String], state: Option<&AttentionState>, rand_seed: u64) -> Result<Vec<Policy>, Error> {
    names
        .iter()
        .map(|n| {
            Ok(match Policy::canonical_name(n)? {
                "LocVehicle" => Policy::LocVehicle,
                "RandSelect" => Policy::RandSelect { seed: rand_seed },
                "CombAll" => Policy::CombAll,
                _ => Policy::Learn2com(Box::new(
                    state
                        .ok_or_else(|| Error::Data("Learn2com needs a trained attention state (run train-attention first)".into()))?
                        .clone(),
                )),
            })
        })
        .collect()
}

/// Evaluation of every requested policy plus the local-only baseline.
#[derive(Debug, Clone, PartialEq)]
pub struct Comparison {
    pub evals: Vec<PolicyEval>,
    pub baseline: PolicyEval,
    /// Random selection averaged over seeds: mAP per bucket.
    pub rand_select_expectation: Option<Vec<(Bucket, Option<f64>)>>,
    pub runs: Vec<PolicyRun>,
}

/// Runs the requested policies on `frames`; random selection is also
/// repeated over `config.run.rand_select_seeds` for its expectation.
pub fn compare(frames: &[SceneFrame], config: &ExperimentConfig, state: Option<&AttentionState>) -> Result<Comparison, Error> {
    let encoder = config.encoder()?;
    let n_links = frames.iter().map(|f| f.n_infrastructures()).max().unwrap_or(0);
    let links = config.links(n_links)?;
    let oracle = config.oracle();
    let seeds = &config.run.rand_select_seeds;
    let mut names = config.run.policies.clone();
    let has_loc = names.iter().any(|n| n.eq_ignore_ascii_case("LocVehicle"));
    if !has_loc {
        names.insert(0, "LocVehicle".into());
    }
    let mut policies = build_policies(&names, state, seeds[0])?;
    let wants_rand = policies.iter().any(|p| matches!(p, Policy::RandSelect { .. }));
    let extra_seeds: Vec<u64> = if wants_rand { seeds[1..].to_vec() } else { Vec::new() };
    let n_main = policies.len();
    policies.extend(extra_seeds.iter().map(|&seed| Policy::RandSelect { seed }));
    let mut runs = run_policies(frames, &encoder, &policies, &links, &oracle)?;
    let extra = runs.split_off(n_main);
    let thr = config.run.iou_threshold;
    let mut evals = runs.iter().map(|r| r.evaluate(thr)).collect::<Result<Vec<_>, _>>()?;
    let loc_idx = evals.iter().position(|e| e.policy == "LocVehicle").expect("baseline present");
    let baseline = evals[loc_idx].clone();
    let rand_select_expectation = if wants_rand {
        let mut all: Vec<PolicyEval> = vec![evals.iter().find(|e| e.policy == "RandSelect").unwrap().clone()];
        for r in &extra {
            all.push(r.evaluate(thr)?);
        }
        Some(
            Bucket::ALL
                .iter()
                .map(|&b| {
                    let v: Vec<f64> = all.iter().filter_map(|e| e.map_of(b)).collect();
                    (b, (v.len() == all.len()).then(|| v.iter().sum::<f64>() / v.len() as f64))
                })
                .collect(),
        )
    } else {
        None
    };
    if !has_loc {
        evals.remove(loc_idx);
        runs.remove(loc_idx);
    }
    Ok(Comparison { evals, baseline, rand_select_expectation, runs })
}

impl Comparison {
    pub fn eval_of(&self, policy: &str) -> Option<&PolicyEval> {
        self.evals.iter().find(|e| e.policy == policy)
    }

    /// Report files as `(file name, contents)`.
    pub fn report_files(&self) -> Vec<(&'static str, String)> {
        let mut ledger = String::from(LEDGER_CSV_HEADER);
        for r in &self.runs {
            ledger.push_str(&r.ledger_csv);
        }
        let mut expectation = String::from("difficulty,mAP\n");
        if let Some(e) = &self.rand_select_expectation {
            for (b, v) in e {
                let _ = writeln!(expectation, "{},{}", b.name(), v.map_or("NA".to_string(), |x| format!("{:.2}", 100.0 * x)));
            }
        }
        vec![
            ("ap.csv", ap_table(&self.evals)),
            ("map.csv", map_table(&self.evals)),
            ("plot_data.csv", map_table(&self.evals)),
            ("bandwidth.csv", bandwidth_table(&self.evals, &self.baseline, Bucket::All)),
            ("ledger.csv", ledger),
            ("randselect_expectation.csv", expectation),
        ]
    }
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), Error> {
    fs::write(path, contents).map_err(|e| io_err(path, e))
}

fn create_dir(path: &Path) -> Result<(), Error> {
    fs::create_dir_all(path).map_err(|e| io_err(path, e))
}

/// Generates `config.run.frames` frames into `out`, with oracle labels in
/// `labels.txt`.
pub fn cmd_generate(config: &ExperimentConfig, out: &Path) -> Result<String, Error> {
    let scene = config.scene_config()?;
    let frames = generate_scene(&scene, config.run.frames, config.run.seed)?;
    create_dir(out)?;
    let splits = Dataset::write(out, &scene, config.run.seed, &frames)?;
    write_file(&out.join("experiment.toml"), config.to_toml())?;
    let mut labels = String::new();
    for f in &frames {
        if let Some(b) = oracle_best_infrastructure(f, config.oracle.tau) {
            let _ = writeln!(labels, "{} {b}", f.id);
        }
    }
    write_file(&out.join("labels.txt"), labels)?;
    Ok(format!(
        "wrote {} frames of {} to {} (train {}, val {}, test {})\n",
        frames.len(),
        scene.name,
        out.display(),
        splits.train.len(),
        splits.val.len(),
        splits.test.len()
    ))
}

fn read_labels(root: &Path) -> Result<Vec<(u32, usize)>, Error> {
    let path = root.join("labels.txt");
    let text = fs::read_to_string(&path).map_err(|e| Error::Data(format!("missing oracle labels: {}: {e}", path.display())))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let mut it = l.split_whitespace();
            let id = it.next().and_then(|v| v.parse().ok());
            let best = it.next().and_then(|v| v.parse().ok());
            id.zip(best).ok_or_else(|| Error::Data(format!("{}: bad label line {l:?}", path.display())))
        })
        .collect()
}

fn read_frames(root: &Path, ids: &[u32]) -> Result<Vec<SceneFrame>, Error> {
    ids.par_iter().map(|&id| Dataset::read_frame(root, id).map_err(Error::from)).collect()
}

/// Frames of a dataset split whose oracle label is known, with labels.
fn labelled_examples(root: &Path, split: &str, encoder: &PillarEncoder, state: &AttentionState) -> Result<Vec<SelectionExample>, Error> {
    let labels = read_labels(root)?;
    let ids = Dataset::read_split(root, split)?;
    let wanted: Vec<(u32, usize)> = labels.into_iter().filter(|(id, _)| ids.contains(id)).collect();
    let frame_ids: Vec<u32> = wanted.iter().map(|w| w.0).collect();
    let frames = read_frames(root, &frame_ids)?;
    frames
        .par_iter()
        .zip(&wanted)
        .map(|(f, &(_, best))| {
            let feats = FrameFeatures::compute(f, encoder)?;
            if best >= feats.infrastructures.len() {
                return Err(Error::Data(format!("frame {}: label {best} out of range", f.id)));
            }
            let query = state.query(&feats.vehicle)?;
            let keys = feats.infrastructures.iter().map(|i| state.key(i)).collect::<Result<Vec<_>, _>>()?;
            Ok(SelectionExample { query, keys, best })
        })
        .collect()
}

pub fn state_path(config: &ExperimentConfig, dataset: &Path) -> PathBuf {
    config.attention.state.as_ref().map_or_else(|| dataset.join("attention.bin"), PathBuf::from)
}

/// Trains the attention matrix on the train split; writes the state and a
/// per-epoch loss file and reports validation accuracy.
pub fn cmd_train_attention(config: &ExperimentConfig, dataset: &Path) -> Result<String, Error> {
    let encoder = config.encoder()?;
    let init = config.initial_attention();
    let train = labelled_examples(dataset, "train", &encoder, &init)?;
    let val = labelled_examples(dataset, "val", &encoder, &init)?;
    if train.is_empty() {
        return Err(Error::Data("no labelled training frames".into()));
    }
    let outcome = train_attention(&train, &init.matrix, config.attention.learning_rate, config.attention.epochs)?;
    let state = AttentionState { matrix: outcome.matrix.clone(), ..init };
    let path = state_path(config, dataset);
    let mut buf = Vec::new();
    state.write_to(&mut buf)?;
    write_file(&path, buf)?;
    let mut losses = String::from("epoch,loss\n");
    for (e, l) in outcome.losses.iter().enumerate() {
        let _ = writeln!(losses, "{},{l}", e + 1);
    }
    write_file(&dataset.join("attention_loss.csv"), losses)?;
    let train_acc = selection_accuracy(&train, &state.matrix)?;
    let val_acc = selection_accuracy(&val, &state.matrix)?;
    write_file(
        &dataset.join("attention_accuracy.csv"),
        format!("split,examples,accuracy\ntrain,{},{train_acc}\nval,{},{val_acc}\n", train.len(), val.len()),
    )?;
    Ok(format!(
        "trained {} epochs on {} frames; train accuracy {:.4}, val accuracy {:.4} ({} frames); state {}\n",
        config.attention.epochs,
        train.len(),
        train_acc,
        val_acc,
        val.len(),
        path.display()
    ))
}

pub fn load_state(path: &Path) -> Result<AttentionState, Error> {
    let f = fs::File::open(path).map_err(|e| Error::Data(format!("attention state {}: {e}", path.display())))?;
    Ok(AttentionState::read_from(std::io::BufReader::new(f))?)
}

/// Evaluates the requested policies on the test split and writes the
/// report tables into `out`.
pub fn cmd_compare(config: &ExperimentConfig, dataset: &Path, out: &Path) -> Result<String, Error> {
    let wants_learned = config.run.policies.iter().any(|p| Policy::canonical_name(p) == Ok("Learn2com"));
    let state = if wants_learned { Some(load_state(&state_path(config, dataset))?) } else { None };
    let ids = Dataset::read_split(dataset, "test")?;
    let frames = read_frames(dataset, &ids)?;
    let cmp = compare(&frames, config, state.as_ref())?;
    create_dir(out)?;
    let mut summary = String::new();
    for (name, body) in cmp.report_files() {
        write_file(&out.join(name), &body)?;
        if name == "bandwidth.csv" || name == "map.csv" {
            summary.push_str(&crate::eval::render_text_table(&body));
            summary.push('\n');
        }
    }
    Ok(summary)
}

/// Runs one frame under each requested policy, writes a message trace per
/// policy into `out`, and returns the ledgers as text.
pub fn cmd_inspect(config: &ExperimentConfig, dataset: &Path, frame_id: u32, out: &Path) -> Result<String, Error> {
    let wants_learned = config.run.policies.iter().any(|p| Policy::canonical_name(p) == Ok("Learn2com"));
    let state = if wants_learned { Some(load_state(&state_path(config, dataset))?) } else { None };
    let frame = Dataset::read_frame(dataset, frame_id)?;
    let encoder = config.encoder()?;
    let links = config.links(frame.n_infrastructures())?;
    let feats = FrameFeatures::compute(&frame, &encoder)?;
    let policies = build_policies(&config.run.policies, state.as_ref(), config.run.rand_select_seeds[0])?;
    create_dir(out)?;
    let mut s = format!(
        "frame {} ({} objects, {} infrastructures)\n{}",
        frame.id,
        frame.objects.len(),
        frame.n_infrastructures(),
        LEDGER_CSV_HEADER
    );
    for p in &policies {
        let o = run_policy(&feats, p, &links, RunOptions { record_messages: true })?;
        let path = out.join(format!("trace_{:06}_{}.bin", frame.id, p.name()));
        let mut buf = Vec::new();
        write_trace_log(&mut buf, &o.messages).map_err(|e| io_err(&path, e))?;
        write_file(&path, buf)?;
        s.push_str(&o.ledger.csv_rows(frame.id, p.name()));
        let latency = crate::netsim::frame_latency(&o.ledger, &links)?;
        let _ = writeln!(
            s,
            "# {}: counted {} bytes, gross {} bytes, latency {:.6} s, participants {:?}",
            p.name(),
            o.ledger.counted_bytes(),
            o.ledger.gross_bytes(),
            latency,
            o.participants
        );
    }
    Ok(s)
}
