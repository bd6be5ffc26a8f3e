//! Synthetic benchmark generation.
//!
//! A regression task is a frozen random function: either a fully-connected
//! network whose representation layers are drawn from a wide Gaussian and
//! whose head is drawn from a narrow one, or a random sinusoid. Tasks are
//! organized into finite pools (a fixed, index-stable list) or infinite
//! sources (a fresh task per draw), and episodes pair uniformly sampled
//! inputs with exact task outputs.

use std::borrow::Cow;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::diffnet::{forward, unflatten, Activation, NetParams, NetSpec};
use crate::error::{Error, Result};
use crate::rng::{derive_seed, rng_from};

/// Default training episode sizes.
pub const DEFAULT_N_SUPPORT: usize = 5;
pub const DEFAULT_N_QUERY: usize = 15;

/// Parameters of the two-Gaussian benchmark family: representation layers
/// drawn from N(mu1, sigma1²), the final layer from N(mu2, sigma2²).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkParams {
    pub mu1: f64,
    pub sigma1: f64,
    pub mu2: f64,
    pub sigma2: f64,
    pub target_spec: NetSpec,
    pub input_low: f64,
    pub input_high: f64,
}

impl Default for BenchmarkParams {
    fn default() -> Self {
        BenchmarkParams {
            mu1: 0.0,
            sigma1: 1.0,
            mu2: 0.0,
            sigma2: 1.0,
            target_spec: NetSpec::new(vec![1, 40, 40, 40, 1], Activation::ReLU, false).unwrap(),
            input_low: -1.0,
            input_high: 1.0,
        }
    }
}

impl BenchmarkParams {
    pub fn validate(&self) -> Result<()> {
        if self.sigma1 < 0.0 || self.sigma2 < 0.0 {
            return Err(Error::InvalidConfig("sigma1 and sigma2 must be >= 0".into()));
        }
        if !(self.input_low < self.input_high) {
            return Err(Error::InvalidConfig(format!(
                "input range [{}, {}] is empty",
                self.input_low, self.input_high
            )));
        }
        if self.target_spec.use_batchnorm {
            return Err(Error::InvalidConfig(
                "target functions are frozen networks; batchnorm is not meaningful there".into(),
            ));
        }
        Ok(())
    }

    /// The construction wants the representation spread to dominate the head
    /// spread; returns false (a diagnostic, not an error) when it does not.
    pub fn sigma_ordering_ok(&self) -> bool {
        self.sigma1 > self.sigma2
    }

    pub fn input_range(&self) -> (f64, f64) {
        (self.input_low, self.input_high)
    }
}

/// A frozen sampled network defining one regression task.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetFunction {
    pub task_id: u64,
    pub spec: NetSpec,
    pub params: NetParams,
    pub seed: u64,
}

impl TargetFunction {
    pub fn evaluate(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        Ok(forward(&self.spec, &self.params, x, None)?.0)
    }
}

/// Amplitude/phase/input ranges for the sinusoid family.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SinusoidParams {
    pub amp_min: f64,
    pub amp_max: f64,
    pub phase_min: f64,
    pub phase_max: f64,
    pub input_low: f64,
    pub input_high: f64,
}

impl Default for SinusoidParams {
    fn default() -> Self {
        SinusoidParams {
            amp_min: 0.1,
            amp_max: 5.0,
            phase_min: 0.0,
            phase_max: std::f64::consts::PI,
            input_low: -5.0,
            input_high: 5.0,
        }
    }
}

impl SinusoidParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.amp_min > 0.0) {
            return Err(Error::InvalidConfig("amplitude minimum must be > 0".into()));
        }
        if self.amp_min > self.amp_max
            || self.phase_min > self.phase_max
            || !(self.input_low < self.input_high)
        {
            return Err(Error::InvalidConfig("empty sinusoid parameter range".into()));
        }
        Ok(())
    }

    pub fn input_range(&self) -> (f64, f64) {
        (self.input_low, self.input_high)
    }
}

/// One sampled sinusoid task: y = A·sin(x + φ).
#[derive(Debug, Clone, PartialEq)]
pub struct SinusoidTask {
    pub task_id: u64,
    pub amplitude: f64,
    pub phase: f64,
    pub seed: u64,
}

impl SinusoidTask {
    pub fn evaluate(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if x.ncols() != 1 {
            return Err(Error::dims("sinusoid input columns", 1usize, x.ncols()));
        }
        Ok(x.map(|v| self.amplitude * (v + self.phase).sin()))
    }
}

/// A regression task of either family.
#[derive(Debug, Clone, PartialEq)]
pub enum Task {
    Net(TargetFunction),
    Sinusoid(SinusoidTask),
}

impl Task {
    pub fn task_id(&self) -> u64 {
        match self {
            Task::Net(t) => t.task_id,
            Task::Sinusoid(t) => t.task_id,
        }
    }

    pub fn input_dim(&self) -> usize {
        match self {
            Task::Net(t) => t.spec.input_dim(),
            Task::Sinusoid(_) => 1,
        }
    }

    pub fn output_dim(&self) -> usize {
        match self {
            Task::Net(t) => t.spec.output_dim(),
            Task::Sinusoid(_) => 1,
        }
    }

    pub fn evaluate(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        match self {
            Task::Net(t) => t.evaluate(x),
            Task::Sinusoid(t) => t.evaluate(x),
        }
    }

    /// Flat parameter vector for persistence (network weights, or [A, φ]).
    fn flat_params(&self) -> Vec<f64> {
        match self {
            Task::Net(t) => t.params.flatten().as_slice().to_vec(),
            Task::Sinusoid(t) => vec![t.amplitude, t.phase],
        }
    }

    fn seed(&self) -> u64 {
        match self {
            Task::Net(t) => t.seed,
            Task::Sinusoid(t) => t.seed,
        }
    }
}

/// Which family a pool draws from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "lowercase")]
pub enum TaskDistribution {
    Synthetic(BenchmarkParams),
    Sinusoid(SinusoidParams),
}

impl TaskDistribution {
    pub fn validate(&self) -> Result<()> {
        match self {
            TaskDistribution::Synthetic(b) => b.validate(),
            TaskDistribution::Sinusoid(s) => s.validate(),
        }
    }

    pub fn input_range(&self) -> (f64, f64) {
        match self {
            TaskDistribution::Synthetic(b) => b.input_range(),
            TaskDistribution::Sinusoid(s) => s.input_range(),
        }
    }

    pub fn input_dim(&self) -> usize {
        match self {
            TaskDistribution::Synthetic(b) => b.target_spec.input_dim(),
            TaskDistribution::Sinusoid(_) => 1,
        }
    }

    pub fn output_dim(&self) -> usize {
        match self {
            TaskDistribution::Synthetic(b) => b.target_spec.output_dim(),
            TaskDistribution::Sinusoid(_) => 1,
        }
    }

    fn sample(&self, task_id: u64, seed: u64) -> Task {
        match self {
            TaskDistribution::Synthetic(b) => {
                let mut t = sample_task(b, seed);
                t.task_id = task_id;
                Task::Net(t)
            }
            TaskDistribution::Sinusoid(s) => {
                let mut t = sample_sinusoid_task(s, seed);
                t.task_id = task_id;
                Task::Sinusoid(t)
            }
        }
    }
}

/// A fixed, index-stable task list or an unbounded task source.
#[derive(Debug, Clone)]
pub enum TaskPool {
    Finite {
        dist: TaskDistribution,
        tasks: Vec<Task>,
        seed: u64,
    },
    Infinite {
        dist: TaskDistribution,
        stream_seed: u64,
    },
}

impl TaskPool {
    pub fn dist(&self) -> &TaskDistribution {
        match self {
            TaskPool::Finite { dist, .. } => dist,
            TaskPool::Infinite { dist, .. } => dist,
        }
    }

    pub fn len(&self) -> Option<usize> {
        match self {
            TaskPool::Finite { tasks, .. } => Some(tasks.len()),
            TaskPool::Infinite { .. } => None,
        }
    }

    pub fn is_finite(&self) -> bool {
        matches!(self, TaskPool::Finite { .. })
    }

    pub fn tasks(&self) -> Option<&[Task]> {
        match self {
            TaskPool::Finite { tasks, .. } => Some(tasks),
            TaskPool::Infinite { .. } => None,
        }
    }
}

/// Samples one target function: every parameter of layers 1..L-1 from
/// N(mu1, sigma1²), every parameter of layer L from N(mu2, sigma2²).
pub fn sample_task(bench: &BenchmarkParams, seed: u64) -> TargetFunction {
    let spec = &bench.target_spec;
    let mut rng = rng_from(seed);
    let rep = Normal::new(bench.mu1, bench.sigma1).expect("validated sigma");
    let head = Normal::new(bench.mu2, bench.sigma2).expect("validated sigma");

    let layers = spec.layer_count();
    let mut weights = Vec::with_capacity(layers);
    let mut biases = Vec::with_capacity(layers);
    for l in 0..layers {
        let dist = if l == layers - 1 { &head } else { &rep };
        let (d_in, d_out) = (spec.layer_widths[l], spec.layer_widths[l + 1]);
        let mut w = DMatrix::zeros(d_out, d_in);
        for r in 0..d_out {
            for c in 0..d_in {
                w[(r, c)] = dist.sample(&mut rng);
            }
        }
        let b = nalgebra::DVector::from_fn(d_out, |_, _| dist.sample(&mut rng));
        weights.push(w);
        biases.push(b);
    }
    TargetFunction {
        task_id: 0,
        spec: spec.clone(),
        params: NetParams { weights, biases },
        seed,
    }
}

/// Samples one sinusoid task with A ~ U[amp range], φ ~ U[phase range].
pub fn sample_sinusoid_task(sp: &SinusoidParams, seed: u64) -> SinusoidTask {
    let mut rng = rng_from(seed);
    let amplitude = if sp.amp_min == sp.amp_max {
        sp.amp_min
    } else {
        rng.random_range(sp.amp_min..sp.amp_max)
    };
    let phase = if sp.phase_min == sp.phase_max {
        sp.phase_min
    } else {
        rng.random_range(sp.phase_min..sp.phase_max)
    };
    SinusoidTask {
        task_id: 0,
        amplitude,
        phase,
        seed,
    }
}

/// Builds an index-stable finite pool of `n_tasks` tasks with per-task
/// derived seeds; `task_id` equals the index.
pub fn build_finite_pool(dist: &TaskDistribution, n_tasks: usize, seed: u64) -> Result<TaskPool> {
    dist.validate()?;
    if n_tasks == 0 {
        return Err(Error::InvalidConfig("finite pool needs n_tasks >= 1".into()));
    }
    let tasks = (0..n_tasks)
        .map(|i| dist.sample(i as u64, derive_seed(seed, i as u64)))
        .collect();
    Ok(TaskPool::Finite {
        dist: dist.clone(),
        tasks,
        seed,
    })
}

/// An unbounded task source; every draw is a fresh function.
pub fn infinite_pool(dist: &TaskDistribution, stream_seed: u64) -> Result<TaskPool> {
    dist.validate()?;
    Ok(TaskPool::Infinite {
        dist: dist.clone(),
        stream_seed,
    })
}

/// Draws the next task: a uniform pick for finite pools, a freshly sampled
/// (never re-materialized) task for infinite ones. The RNG carries the
/// stream state.
pub fn next_task<'p, R: Rng>(pool: &'p TaskPool, rng: &mut R) -> Cow<'p, Task> {
    match pool {
        TaskPool::Finite { tasks, .. } => {
            let i = rng.random_range(0..tasks.len());
            Cow::Borrowed(&tasks[i])
        }
        TaskPool::Infinite { dist, stream_seed } => {
            let draw = rng.next_u64();
            let task_seed = derive_seed(*stream_seed, draw);
            Cow::Owned(dist.sample(draw, task_seed))
        }
    }
}

/// Support and query sets drawn from one task.
#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub support_x: DMatrix<f64>,
    pub support_y: DMatrix<f64>,
    pub query_x: DMatrix<f64>,
    pub query_y: DMatrix<f64>,
    pub task_id: u64,
}

/// Samples an episode: inputs i.i.d. uniform over `input_range`, outputs
/// computed exactly by the task; support and query are independent draws.
pub fn sample_episode(
    task: &Task,
    n_support: usize,
    n_query: usize,
    input_range: (f64, f64),
    seed: u64,
) -> Result<Episode> {
    if n_support == 0 || n_query == 0 {
        return Err(Error::InvalidConfig(
            "episodes need n_support >= 1 and n_query >= 1".into(),
        ));
    }
    let (lo, hi) = input_range;
    if !(lo < hi) {
        return Err(Error::InvalidConfig("empty episode input range".into()));
    }
    let d = task.input_dim();
    let mut rng = rng_from(seed);
    let support_x = DMatrix::from_fn(n_support, d, |_, _| rng.random_range(lo..hi));
    let query_x = DMatrix::from_fn(n_query, d, |_, _| rng.random_range(lo..hi));
    let support_y = task.evaluate(&support_x)?;
    let query_y = task.evaluate(&query_x)?;
    Ok(Episode {
        support_x,
        support_y,
        query_x,
        query_y,
        task_id: task.task_id(),
    })
}

// ---------------------------------------------------------------------------
// Pool persistence: versioned header + little-endian f64 parameter blocks.
// ---------------------------------------------------------------------------

const POOL_MAGIC: &[u8; 8] = b"MLABPOOL";
const POOL_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct PoolHeader {
    version: u32,
    dist: TaskDistribution,
    n_tasks: usize,
    pool_seed: u64,
    task_seeds: Vec<u64>,
    params_per_task: usize,
}

/// Writes a finite pool: magic, version, JSON header, then per-task flat
/// parameter vectors as little-endian 64-bit floats.
pub fn write_pool(pool: &TaskPool, path: &Path) -> Result<()> {
    let (dist, tasks, seed) = match pool {
        TaskPool::Finite { dist, tasks, seed } => (dist, tasks, *seed),
        TaskPool::Infinite { .. } => {
            return Err(Error::InvalidConfig(
                "only finite pools can be persisted".into(),
            ))
        }
    };
    let params_per_task = tasks[0].flat_params().len();
    let header = PoolHeader {
        version: POOL_VERSION,
        dist: dist.clone(),
        n_tasks: tasks.len(),
        pool_seed: seed,
        task_seeds: tasks.iter().map(|t| t.seed()).collect(),
        params_per_task,
    };
    let header_json = serde_json::to_vec(&header).map_err(|e| Error::Format {
        what: "pool header",
        detail: e.to_string(),
    })?;

    let mut out = Vec::new();
    out.extend_from_slice(POOL_MAGIC);
    out.extend_from_slice(&POOL_VERSION.to_le_bytes());
    out.extend_from_slice(&(header_json.len() as u64).to_le_bytes());
    out.extend_from_slice(&header_json);
    for t in tasks {
        let flat = t.flat_params();
        debug_assert_eq!(flat.len(), params_per_task);
        for v in flat {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut f = fs::File::create(path)?;
    f.write_all(&out)?;
    Ok(())
}

/// Reads a pool written by [`write_pool`]; parameters are restored bit-exactly
/// from the written bytes.
pub fn read_pool(path: &Path) -> Result<TaskPool> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    let fail = |detail: &str| Error::Format {
        what: "pool file",
        detail: detail.to_string(),
    };
    if bytes.len() < 20 || &bytes[..8] != POOL_MAGIC {
        return Err(fail("bad magic"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != POOL_VERSION {
        return Err(fail(&format!("unsupported version {version}")));
    }
    let header_len = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
    if bytes.len() < 20 + header_len {
        return Err(fail("truncated header"));
    }
    let header: PoolHeader = serde_json::from_slice(&bytes[20..20 + header_len])
        .map_err(|e| fail(&format!("header: {e}")))?;
    header.dist.validate()?;

    let body = &bytes[20 + header_len..];
    let expect = header.n_tasks * header.params_per_task * 8;
    if body.len() != expect {
        return Err(fail(&format!("body size {} != expected {expect}", body.len())));
    }

    let mut tasks = Vec::with_capacity(header.n_tasks);
    for i in 0..header.n_tasks {
        let mut flat = Vec::with_capacity(header.params_per_task);
        for j in 0..header.params_per_task {
            let off = (i * header.params_per_task + j) * 8;
            flat.push(f64::from_le_bytes(body[off..off + 8].try_into().unwrap()));
        }
        let seed = header.task_seeds.get(i).copied().unwrap_or(0);
        let task = match &header.dist {
            TaskDistribution::Synthetic(b) => {
                let fv = nalgebra::DVector::from_vec(flat);
                let params = unflatten(&b.target_spec, &fv)?;
                Task::Net(TargetFunction {
                    task_id: i as u64,
                    spec: b.target_spec.clone(),
                    params,
                    seed,
                })
            }
            TaskDistribution::Sinusoid(_) => {
                if flat.len() != 2 {
                    return Err(fail("sinusoid tasks carry 2 parameters"));
                }
                Task::Sinusoid(SinusoidTask {
                    task_id: i as u64,
                    amplitude: flat[0],
                    phase: flat[1],
                    seed,
                })
            }
        };
        tasks.push(task);
    }
    Ok(TaskPool::Finite {
        dist: header.dist,
        tasks,
        seed: header.pool_seed,
    })
}
