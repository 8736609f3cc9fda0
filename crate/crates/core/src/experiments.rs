//! Analysis pipelines over a directory of checkpoints.
//!
//! Every pipeline evaluates representations on one fixed probe set and
//! returns a [`Table`]: a `#` provenance line carrying the run and probe
//! fingerprints, a header row, then data rows.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::maml::{
    adapted_query_loss, inner_adapt, list_checkpoints, read_checkpoint, Checkpoint, ConvLearner,
    MamlConfig,
};
use crate::mds::{classical_mds, Embedding};
use crate::models::{representations, Layer, NetConfig};
use crate::params::{Fnv, ParamSet};
use crate::repsim::{linear_cka, rdm, rsa_dissimilarity, Rdm, RdmMetric};
use crate::tasks::{Episode, TaskSource};
use crate::tensor::Tensor;

/// Which parameters a test-task representation is taken from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// The meta-learned parameters themselves (task independent).
    PreFinetune,
    /// Parameters after `adapt_steps` inner steps on each test task.
    PostFinetune,
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::PreFinetune => "pre_finetune",
            Mode::PostFinetune => "post_finetune",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentSpec {
    /// Defaults to `<out_dir>/checkpoints`.
    pub checkpoint_dir: Option<PathBuf>,
    pub probe_seed: u64,
    /// Query images per class in the probe task.
    pub probe_query: usize,
    pub layers: Vec<Layer>,
    pub metric: RdmMetric,
    pub modes: Vec<Mode>,
    /// Test tasks averaged over in `to-init` and adaptation profiles.
    pub n_tasks: usize,
    /// Inner steps taken before post-finetune representations and accuracies.
    pub adapt_steps: usize,
    /// Inner-step marks of the fine-tuning trace; sorted, starting at 0.
    pub inner_marks: Vec<usize>,
    pub max_inner_steps: usize,
    pub trace_tasks: usize,
    pub trace_checkpoints: usize,
    pub accuracy_tasks: usize,
    /// Held-out images used as the probe of the supervised baseline.
    pub baseline_probe: usize,
}

impl Default for ExperimentSpec {
    fn default() -> Self {
        ExperimentSpec {
            checkpoint_dir: None,
            probe_seed: 0,
            probe_query: 10,
            layers: Layer::all().to_vec(),
            metric: RdmMetric::Euclidean,
            modes: vec![Mode::PreFinetune, Mode::PostFinetune],
            n_tasks: 50,
            adapt_steps: 5,
            inner_marks: vec![0, 1, 5, 10],
            max_inner_steps: 10,
            trace_tasks: 4,
            trace_checkpoints: 5,
            accuracy_tasks: 100,
            baseline_probe: 50,
        }
    }
}

impl ExperimentSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Invalid(m));
        if self.layers.is_empty() {
            return bad("experiment needs at least one layer".into());
        }
        if self.inner_marks.first() != Some(&0) || self.inner_marks.windows(2).any(|w| w[0] >= w[1])
        {
            return bad(format!(
                "inner marks must start at 0 and increase strictly, got {:?}",
                self.inner_marks
            ));
        }
        if let Some(&m) = self
            .inner_marks
            .last()
            .filter(|&&m| m > self.max_inner_steps)
        {
            return bad(format!(
                "inner mark {m} exceeds max_inner_steps = {}",
                self.max_inner_steps
            ));
        }
        if self.n_tasks == 0
            || self.trace_tasks == 0
            || self.accuracy_tasks == 0
            || self.trace_checkpoints == 0
        {
            return bad("task and checkpoint counts must be positive".into());
        }
        if self.probe_query == 0 || self.baseline_probe < 3 {
            return bad("probe sets need at least 3 images".into());
        }
        Ok(())
    }
}

/// A CSV document with one provenance comment line.
#[derive(Clone, Debug, PartialEq)]
pub struct Table {
    pub provenance: String,
    pub header: String,
    pub rows: Vec<String>,
}

impl Table {
    fn new(provenance: &str, header: &str) -> Table {
        Table {
            provenance: provenance.to_string(),
            header: header.to_string(),
            rows: Vec::new(),
        }
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        write_text(path.as_ref(), &self.to_string())
    }
}

impl fmt::Display for Table {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "# {}", self.provenance)?;
        writeln!(f, "{}", self.header)?;
        for r in &self.rows {
            writeln!(f, "{r}")?;
        }
        Ok(())
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn tensor_fingerprint(t: &Tensor) -> u64 {
    let mut h = Fnv::new();
    for &e in t.shape() {
        h.write(&(e as u64).to_le_bytes());
    }
    for v in t.data() {
        h.write(&v.to_bits().to_le_bytes());
    }
    h.finish()
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Load every checkpoint in `dir`, sorted by step.
pub fn load_checkpoints(dir: impl AsRef<Path>) -> Result<Vec<Checkpoint>> {
    let dir = dir.as_ref();
    let found = list_checkpoints(dir)?;
    if found.is_empty() {
        return Err(Error::format(
            dir,
            format!(
                "no checkpoints (expected files like {})",
                Checkpoint::file_name(0)
            ),
        ));
    }
    found.iter().map(|(_, p)| read_checkpoint(p)).collect()
}

fn run_fingerprint(checkpoints: &[Checkpoint]) -> u64 {
    let mut h = Fnv::new();
    for c in checkpoints {
        h.write(&c.fingerprint.to_le_bytes());
    }
    h.finish()
}

/// Checkpoints of one meta-training run plus everything needed to probe
/// them.
pub struct Study {
    pub net: NetConfig,
    pub inner_lr: f64,
    pub source: TaskSource,
    pub spec: ExperimentSpec,
    learner: ConvLearner,
    checkpoints: Vec<Checkpoint>,
    probe: Tensor,
    provenance: String,
}

impl Study {
    pub fn new(
        checkpoints: Vec<Checkpoint>,
        net: &NetConfig,
        maml: &MamlConfig,
        source: TaskSource,
        spec: &ExperimentSpec,
    ) -> Result<Study> {
        spec.validate()?;
        if checkpoints.is_empty() {
            return Err(Error::Invalid("study needs at least one checkpoint".into()));
        }
        let probe = source
            .probe_task(spec.probe_seed, spec.probe_query)?
            .query_x;
        let mut h = Fnv::new();
        for part in [
            serde_json::to_string(spec).expect("serializable"),
            serde_json::to_string(net).expect("serializable"),
            maml.inner_lr.to_string(),
            maml.adapt_norm.to_string(),
            source.describe(),
        ] {
            h.write(part.as_bytes());
            h.write(&[0]);
        }
        let provenance = format!(
            "run={:016x} config={:016x} probe={:016x}",
            run_fingerprint(&checkpoints),
            h.finish(),
            tensor_fingerprint(&probe)
        );
        Ok(Study {
            net: net.clone(),
            inner_lr: maml.inner_lr,
            source,
            spec: spec.clone(),
            learner: ConvLearner {
                net: net.clone(),
                adapt_norm: maml.adapt_norm,
            },
            checkpoints,
            probe,
            provenance,
        })
    }

    pub fn open(
        dir: impl AsRef<Path>,
        net: &NetConfig,
        maml: &MamlConfig,
        source: TaskSource,
        spec: &ExperimentSpec,
    ) -> Result<Study> {
        Study::new(load_checkpoints(dir)?, net, maml, source, spec)
    }

    pub fn steps(&self) -> Vec<u64> {
        self.checkpoints.iter().map(|c| c.step).collect()
    }

    pub fn probe(&self) -> &Tensor {
        &self.probe
    }

    pub fn provenance(&self) -> &str {
        &self.provenance
    }

    fn checkpoint(&self, step: u64) -> Result<&Checkpoint> {
        self.checkpoints
            .iter()
            .find(|c| c.step == step)
            .ok_or_else(|| {
                Error::Invalid(format!(
                    "no checkpoint for step {step} ({})",
                    Checkpoint::file_name(step)
                ))
            })
    }

    /// RDMs of the configured layers on the probe set.
    pub fn rdms(&self, params: &ParamSet) -> Result<Vec<Rdm>> {
        let reps = representations(params, &self.probe, &self.net)?;
        self.spec
            .layers
            .iter()
            .map(|&layer| {
                let (_, rep) = reps
                    .iter()
                    .find(|(l, _)| *l == layer)
                    .expect("every layer present");
                rdm(rep, self.spec.metric)
            })
            .collect()
    }

    fn test_tasks(&self, n: usize) -> Result<Vec<Episode>> {
        (0..n as u64).map(|j| self.source.eval_episode(j)).collect()
    }

    /// Parameters after each mark in `marks` (mark 0 is `params` itself).
    fn adapted_at(
        &self,
        params: &ParamSet,
        task: &Episode,
        marks: &[usize],
    ) -> Result<Vec<ParamSet>> {
        let max = marks.iter().copied().max().unwrap_or(0);
        let trajectory = if max > 0 {
            inner_adapt(&self.learner, params, task, self.inner_lr, max)?.1
        } else {
            Vec::new()
        };
        Ok(marks
            .iter()
            .map(|&m| {
                if m == 0 {
                    params.clone()
                } else {
                    trajectory[m - 1].clone()
                }
            })
            .collect())
    }

    /// Mean RSA dissimilarity between θ at `step` and the parameters after
    /// each of `marks` inner steps, over the first `n_tasks` test tasks.
    /// Entry `[layer][mark]`.
    pub fn adaptation_dissim(&self, step: u64, marks: &[usize]) -> Result<Vec<Vec<f64>>> {
        let theta = &self.checkpoint(step)?.params;
        let base = self.rdms(theta)?;
        let tasks = self.test_tasks(self.spec.n_tasks)?;
        let per_task: Vec<Vec<Vec<f64>>> = tasks
            .par_iter()
            .map(|task| {
                self.adapted_at(theta, task, marks)?
                    .iter()
                    .map(|p| {
                        let rdms = self.rdms(p)?;
                        base.iter()
                            .zip(&rdms)
                            .map(|(a, b)| rsa_dissimilarity(a, b))
                            .collect()
                    })
                    .collect::<Result<Vec<Vec<f64>>>>()
            })
            .collect::<Result<_>>()?;
        let n = per_task.len() as f64;
        Ok((0..self.spec.layers.len())
            .map(|l| {
                (0..marks.len())
                    .map(|m| per_task.iter().map(|t| t[m][l]).sum::<f64>() / n)
                    .collect()
            })
            .collect())
    }
}

/// Dissimilarity of every checkpoint's representations to the step-0
/// checkpoint. Rows: `step,layer,mode,dissim_mean,dissim_std,n_tasks`.
pub fn exp_dissim_to_init(study: &Study) -> Result<Table> {
    let init = study
        .checkpoints
        .iter()
        .find(|c| c.step == 0)
        .ok_or_else(|| {
            Error::Invalid(format!(
                "missing step-0 checkpoint ({})",
                Checkpoint::file_name(0)
            ))
        })?;
    let init_rdms = study.rdms(&init.params)?;
    let spec = &study.spec;
    let post = spec.modes.contains(&Mode::PostFinetune);
    let tasks = if post {
        study.test_tasks(spec.n_tasks)?
    } else {
        Vec::new()
    };

    // dissimilarities per checkpoint: pre-finetune per layer, post-finetune per task and layer
    let per_ckpt: Vec<(Vec<f64>, Vec<Vec<f64>>)> = study
        .checkpoints
        .iter()
        .map(|c| {
            let pre = study
                .rdms(&c.params)?
                .iter()
                .zip(&init_rdms)
                .map(|(a, b)| rsa_dissimilarity(b, a))
                .collect::<Result<Vec<f64>>>()?;
            let post = tasks
                .par_iter()
                .map(|task| {
                    let phi = study
                        .adapted_at(&c.params, task, &[spec.adapt_steps])?
                        .remove(0);
                    study
                        .rdms(&phi)?
                        .iter()
                        .zip(&init_rdms)
                        .map(|(a, b)| rsa_dissimilarity(b, a))
                        .collect::<Result<Vec<f64>>>()
                })
                .collect::<Result<Vec<_>>>()?;
            Ok((pre, post))
        })
        .collect::<Result<_>>()?;

    let mut table = Table::new(
        &study.provenance,
        "step,layer,mode,dissim_mean,dissim_std,n_tasks",
    );
    for (c, (pre, post)) in study.checkpoints.iter().zip(&per_ckpt) {
        for (li, layer) in spec.layers.iter().enumerate() {
            for &mode in &spec.modes {
                let (values, n) = match mode {
                    Mode::PreFinetune => (vec![pre[li]], 1),
                    Mode::PostFinetune => {
                        (post.iter().map(|t| t[li]).collect::<Vec<_>>(), post.len())
                    }
                };
                let (mean, std) = mean_std(&values);
                table
                    .rows
                    .push(format!("{},{layer},{mode},{mean},{std},{n}", c.step));
            }
        }
    }
    Ok(table)
}

/// Spacing of the checkpoint grid: the smallest positive step.
pub fn checkpoint_spacing(steps: &[u64]) -> Option<u64> {
    steps.iter().copied().filter(|&s| s > 0).min()
}

/// RSA dissimilarity between checkpoints `delta` steps apart (step 0
/// excluded). Rows: `step,layer,dissim`.
pub fn exp_training_drift(study: &Study, delta: u64) -> Result<Table> {
    let steps: Vec<u64> = study.steps().into_iter().filter(|&s| s > 0).collect();
    let spacing = checkpoint_spacing(&steps)
        .ok_or_else(|| Error::Invalid("drift needs checkpoints after step 0".into()))?;
    if !delta.is_multiple_of(spacing) {
        return Err(Error::Invalid(format!(
            "delta {delta} is not a multiple of the checkpoint spacing {spacing}"
        )));
    }
    let pairs: Vec<(u64, u64)> = steps
        .iter()
        .filter(|&&t| t >= delta && steps.contains(&(t - delta)))
        .map(|&t| (t - delta, t))
        .collect();
    if pairs.is_empty() {
        return Err(Error::Invalid(format!(
            "no checkpoint pairs are {delta} steps apart"
        )));
    }
    let rdms: Vec<(u64, Vec<Rdm>)> = steps
        .par_iter()
        .map(|&s| Ok((s, study.rdms(&study.checkpoint(s)?.params)?)))
        .collect::<Result<_>>()?;
    let lookup = |s: u64| &rdms.iter().find(|(t, _)| *t == s).expect("step listed").1;
    let mut table = Table::new(&study.provenance, "step,layer,dissim");
    for (a, b) in pairs {
        for ((layer, ra), rb) in study.spec.layers.iter().zip(lookup(a)).zip(lookup(b)) {
            table
                .rows
                .push(format!("{b},{layer},{}", rsa_dissimilarity(ra, rb)?));
        }
    }
    Ok(table)
}

/// Representation-level comparison of supervised checkpoints against
/// step 0. Rows: `step,layer,rsa_dissim,cka_sim`.
pub fn exp_supervised_baseline(
    checkpoints: &[Checkpoint],
    net: &NetConfig,
    probe: &Tensor,
    spec: &ExperimentSpec,
) -> Result<Table> {
    spec.validate()?;
    let init = checkpoints.iter().find(|c| c.step == 0).ok_or_else(|| {
        Error::Invalid(format!(
            "missing step-0 checkpoint ({})",
            Checkpoint::file_name(0)
        ))
    })?;
    let reps = |params: &ParamSet| -> Result<Vec<Tensor>> {
        let all = representations(params, probe, net)?;
        Ok(spec
            .layers
            .iter()
            .map(|&layer| {
                all.iter()
                    .find(|(l, _)| *l == layer)
                    .expect("present")
                    .1
                    .clone()
            })
            .collect())
    };
    let init_reps = reps(&init.params)?;
    let init_rdms = init_reps
        .iter()
        .map(|r| rdm(r, spec.metric))
        .collect::<Result<Vec<_>>>()?;
    let provenance = format!(
        "run={:016x} config={:016x} probe={:016x}",
        run_fingerprint(checkpoints),
        {
            let mut h = Fnv::new();
            h.write(
                serde_json::to_string(spec)
                    .expect("serializable")
                    .as_bytes(),
            );
            h.write(serde_json::to_string(net).expect("serializable").as_bytes());
            h.finish()
        },
        tensor_fingerprint(probe)
    );
    let rows: Vec<Vec<String>> = checkpoints
        .par_iter()
        .map(|c| {
            let current = reps(&c.params)?;
            spec.layers
                .iter()
                .enumerate()
                .map(|(i, layer)| {
                    let d = rsa_dissimilarity(&init_rdms[i], &rdm(&current[i], spec.metric)?)?;
                    let cka = linear_cka(&init_reps[i], &current[i])?;
                    Ok(format!("{},{layer},{d},{cka}", c.step))
                })
                .collect()
        })
        .collect::<Result<_>>()?;
    let mut table = Table::new(&provenance, "step,layer,rsa_dissim,cka_sim");
    table.rows = rows.into_iter().flatten().collect();
    Ok(table)
}

/// Label of one point in the fine-tuning trace.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TracePoint {
    pub step: u64,
    /// `None` for the un-adapted point shared by all tasks.
    pub task: Option<usize>,
    pub inner_step: usize,
}

/// Second-order dissimilarities and their 2-D embedding for one layer.
#[derive(Clone, Debug)]
pub struct TraceLayer {
    pub layer: Layer,
    pub matrix: Rdm,
    pub embedding: Embedding,
}

#[derive(Clone, Debug)]
pub struct Trace {
    pub points: Vec<TracePoint>,
    pub layers: Vec<TraceLayer>,
    pub provenance: String,
}

/// `count` checkpoints evenly spread over the positive steps.
pub fn select_evenly(steps: &[u64], count: usize) -> Vec<u64> {
    let positive: Vec<u64> = steps.iter().copied().filter(|&s| s > 0).collect();
    if positive.len() <= count {
        return positive;
    }
    let len = positive.len() as f64;
    (1..=count)
        .map(|i| positive[((i as f64 * len / count as f64).round() as usize).max(1) - 1])
        .collect()
}

/// Representations of a few fixed tasks along their inner loops at
/// several checkpoints, compared pairwise and embedded with MDS.
pub fn exp_finetune_trace(study: &Study) -> Result<Trace> {
    let spec = &study.spec;
    let selected = select_evenly(&study.steps(), spec.trace_checkpoints);
    if selected.is_empty() {
        return Err(Error::Invalid(
            "trace needs checkpoints after step 0".into(),
        ));
    }
    let tasks = study.test_tasks(spec.trace_tasks)?;
    let marks = &spec.inner_marks;

    let mut jobs: Vec<(TracePoint, Option<(u64, usize)>)> = Vec::new();
    for &step in &selected {
        jobs.push((
            TracePoint {
                step,
                task: None,
                inner_step: 0,
            },
            None,
        ));
        for t in 0..tasks.len() {
            for &m in marks.iter().filter(|&&m| m > 0) {
                jobs.push((
                    TracePoint {
                        step,
                        task: Some(t),
                        inner_step: m,
                    },
                    Some((step, t)),
                ));
            }
        }
    }

    // one adaptation per (checkpoint, task) supplies every mark
    let adaptations: Vec<((u64, usize), Vec<ParamSet>)> = selected
        .iter()
        .flat_map(|&s| (0..tasks.len()).map(move |t| (s, t)))
        .collect::<Vec<_>>()
        .par_iter()
        .map(|&(s, t)| {
            Ok((
                (s, t),
                study.adapted_at(&study.checkpoint(s)?.params, &tasks[t], marks)?,
            ))
        })
        .collect::<Result<_>>()?;
    let rdms: Vec<Vec<Rdm>> = jobs
        .par_iter()
        .map(|(point, key)| {
            let params = match key {
                None => &study.checkpoint(point.step)?.params,
                Some(key) => {
                    let (_, path) = adaptations.iter().find(|(k, _)| k == key).expect("adapted");
                    let idx = marks
                        .iter()
                        .position(|&m| m == point.inner_step)
                        .expect("mark");
                    &path[idx]
                }
            };
            study.rdms(params)
        })
        .collect::<Result<_>>()?;

    let n = jobs.len();
    let layers = spec
        .layers
        .iter()
        .enumerate()
        .map(|(li, &layer)| {
            let lower: Vec<Vec<f64>> = (0..n)
                .into_par_iter()
                .map(|i| {
                    (0..i)
                        .map(|j| rsa_dissimilarity(&rdms[i][li], &rdms[j][li]))
                        .collect()
                })
                .collect::<Result<_>>()?;
            let mut entries = vec![0.0; n * n];
            for (i, row) in lower.iter().enumerate() {
                for (j, &v) in row.iter().enumerate() {
                    entries[i * n + j] = v;
                    entries[j * n + i] = v;
                }
            }
            let matrix = Rdm::from_matrix(n, entries)?;
            let embedding = classical_mds(&matrix, 2)?;
            Ok(TraceLayer {
                layer,
                matrix,
                embedding,
            })
        })
        .collect::<Result<_>>()?;
    Ok(Trace {
        points: jobs.into_iter().map(|(p, _)| p).collect(),
        layers,
        provenance: study.provenance.clone(),
    })
}

impl Trace {
    fn task_label(p: &TracePoint) -> String {
        p.task.map_or_else(|| "all".to_string(), |t| t.to_string())
    }

    /// Cross-RDM of one layer with a `point_id` column.
    pub fn matrix_table(&self, layer: &TraceLayer) -> Table {
        let n = self.points.len();
        let ids: Vec<String> = (0..n).map(|i| i.to_string()).collect();
        let mut table = Table::new(&self.provenance, &format!("point_id,{}", ids.join(",")));
        for i in 0..n {
            let cells: Vec<String> = (0..n).map(|j| layer.matrix.get(i, j).to_string()).collect();
            table.rows.push(format!("{i},{}", cells.join(",")));
        }
        table
    }

    /// Rows: `point_id,step,task,inner_step,x,y`.
    pub fn coords_table(&self, layer: &TraceLayer) -> Table {
        let mut table = Table::new(&self.provenance, "point_id,step,task,inner_step,x,y");
        let c = layer.embedding.coords.data();
        for (i, p) in self.points.iter().enumerate() {
            table.rows.push(format!(
                "{i},{},{},{},{},{}",
                p.step,
                Self::task_label(p),
                p.inner_step,
                c[2 * i],
                c[2 * i + 1]
            ));
        }
        table
    }

    /// Write `trace_<layer>_matrix.csv`, `trace_<layer>_coords.csv` and
    /// `trace_<layer>_mds.json` for every layer.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
        let dir = dir.as_ref();
        let mut paths = Vec::new();
        for layer in &self.layers {
            let m = dir.join(format!("trace_{}_matrix.csv", layer.layer));
            self.matrix_table(layer).write(&m)?;
            let c = dir.join(format!("trace_{}_coords.csv", layer.layer));
            self.coords_table(layer).write(&c)?;
            let j = dir.join(format!("trace_{}_mds.json", layer.layer));
            write_text(&j, &layer.embedding.sidecar_json())?;
            paths.extend([m, c, j]);
        }
        Ok(paths)
    }
}

/// Post-adaptation query accuracy per checkpoint for the fixed trace tasks
/// and the mean over `accuracy_tasks` test tasks. Rows:
/// `step,task_id,accuracy`.
pub fn exp_accuracy_curve(study: &Study) -> Result<Table> {
    let spec = &study.spec;
    let n = spec.accuracy_tasks.max(spec.trace_tasks);
    let tasks = study.test_tasks(n)?;
    let mut table = Table::new(&study.provenance, "step,task_id,accuracy");
    for c in &study.checkpoints {
        let accs: Vec<f64> = tasks
            .par_iter()
            .map(|t| {
                adapted_query_loss(
                    &study.learner,
                    &c.params,
                    t,
                    study.inner_lr,
                    spec.adapt_steps,
                )
                .map(|(_, acc)| acc.expect("episodes report accuracy"))
            })
            .collect::<Result<_>>()?;
        for (t, a) in accs.iter().take(spec.trace_tasks).enumerate() {
            table.rows.push(format!("{},{t},{a}", c.step));
        }
        let avg = accs[..spec.accuracy_tasks].iter().sum::<f64>() / spec.accuracy_tasks as f64;
        table.rows.push(format!("{},avg,{avg}", c.step));
    }
    Ok(table)
}
