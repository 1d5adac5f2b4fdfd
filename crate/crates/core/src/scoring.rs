//! Per-parameter saliency scores for a single weight matrix.
//!
//! A linear layer `W` (`out x in`) is a complete bipartite graph from input
//! nodes `l` to output nodes `r`. Given the calibration norm `n[l]` of each
//! input node, the flow score of edge `(r, l)` is
//!
//! ```text
//! s_in[l]  = n[l] * mean_r |W[r, l]|          (signal emitted by l)
//! s_out[r] = mean_l n[l] * |W[r, l]|          (signal received by r)
//! score    = s_in[l] * |W[r, l]| * s_out[r]
//! ```
//!
//! Every criterion here yields nonnegative values so one descending top-k
//! serves all of them.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::MatrixView;

/// Saliency criterion.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Criterion {
    Multiflow,
    Magnitude,
    Lamp,
    L2norm,
    MultiflowEdgeOnly,
    MultiflowNodesOnly,
    Random,
    /// Gradient-based; produced only by the toy benchmark.
    Snip,
}

impl Criterion {
    pub const ALL: [Criterion; 8] = [
        Criterion::Multiflow,
        Criterion::Magnitude,
        Criterion::Lamp,
        Criterion::L2norm,
        Criterion::MultiflowEdgeOnly,
        Criterion::MultiflowNodesOnly,
        Criterion::Random,
        Criterion::Snip,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Criterion::Multiflow => "multiflow",
            Criterion::Magnitude => "magnitude",
            Criterion::Lamp => "lamp",
            Criterion::L2norm => "l2norm",
            Criterion::MultiflowEdgeOnly => "multiflow_edge_only",
            Criterion::MultiflowNodesOnly => "multiflow_nodes_only",
            Criterion::Random => "random",
            Criterion::Snip => "snip",
        }
    }

    /// Whether scoring requires activation statistics.
    pub fn needs_stats(self) -> bool {
        matches!(self, Criterion::Multiflow | Criterion::MultiflowNodesOnly)
    }
}

impl fmt::Display for Criterion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Criterion {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Criterion::ALL
            .into_iter()
            .find(|c| c.as_str() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown criterion '{s}'")))
    }
}

/// Scores for one layer under one criterion, row-major `rows x cols`.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMatrix {
    pub layer: String,
    pub criterion: Criterion,
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<f32>,
    pub rng_seed: Option<u64>,
}

impl ScoreMatrix {
    fn new(criterion: Criterion, rows: usize, cols: usize, values: Vec<f32>) -> Self {
        Self {
            layer: String::new(),
            criterion,
            rows,
            cols,
            values,
            rng_seed: None,
        }
    }

    pub fn named(mut self, layer: impl Into<String>) -> Self {
        self.layer = layer.into();
        self
    }

    pub fn get(&self, r: usize, c: usize) -> f32 {
        self.values[r * self.cols + c]
    }
}

/// Input- and output-node saliencies of one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeSaliencies {
    pub s_in: Vec<f32>,
    pub s_out: Vec<f32>,
}

fn check_inputs(w: &MatrixView<'_>, norms: &[f32]) -> Result<()> {
    if norms.len() != w.cols() {
        return Err(Error::ShapeMismatch {
            name: "<layer>".into(),
            detail: format!("{} norms for {} input nodes", norms.len(), w.cols()),
        });
    }
    w.ensure_finite("weights")?;
    if norms.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(Error::NonFinite("activation norms".into()));
    }
    Ok(())
}

// Node saliencies in f64; the norm factor of the input-node sum is hoisted.
fn node_saliencies_f64(w: &MatrixView<'_>, norms: &[f32]) -> (Vec<f64>, Vec<f64>) {
    let (rows, cols) = (w.rows(), w.cols());
    let mut col_abs = vec![0.0f64; cols];
    let mut s_out = vec![0.0f64; rows];
    for (r, out) in s_out.iter_mut().enumerate() {
        let mut acc = 0.0f64;
        for ((c, &x), &n) in col_abs.iter_mut().zip(w.row(r)).zip(norms) {
            let a = f64::from(x.abs());
            *c += a;
            acc += f64::from(n) * a;
        }
        *out = acc / cols as f64;
    }
    let s_in = col_abs
        .iter()
        .zip(norms)
        .map(|(&c, &n)| f64::from(n) * c / rows as f64)
        .collect();
    (s_in, s_out)
}

pub fn node_saliencies(w: MatrixView<'_>, norms: &[f32]) -> Result<NodeSaliencies> {
    check_inputs(&w, norms)?;
    let (s_in, s_out) = node_saliencies_f64(&w, norms);
    Ok(NodeSaliencies {
        s_in: s_in.into_iter().map(|v| v as f32).collect(),
        s_out: s_out.into_iter().map(|v| v as f32).collect(),
    })
}

pub fn score_multiflow(w: MatrixView<'_>, norms: &[f32]) -> Result<ScoreMatrix> {
    check_inputs(&w, norms)?;
    let (s_in, s_out) = node_saliencies_f64(&w, norms);
    let mut values = Vec::with_capacity(w.len());
    for (r, &so) in s_out.iter().enumerate() {
        values.extend(
            w.row(r)
                .iter()
                .zip(&s_in)
                .map(|(&x, &si)| (si * f64::from(x.abs()) * so) as f32),
        );
    }
    Ok(ScoreMatrix::new(
        Criterion::Multiflow,
        w.rows(),
        w.cols(),
        values,
    ))
}

/// Largest layer accepted by [`score_multiflow_bruteforce`].
pub const BRUTEFORCE_LIMIT: usize = 1_000_000;

/// Literal per-edge evaluation of the flow score, used as a test oracle.
/// Every edge recomputes both node sums from scratch.
#[allow(clippy::needless_range_loop)]
pub fn score_multiflow_bruteforce(w: MatrixView<'_>, norms: &[f32]) -> Result<ScoreMatrix> {
    if w.len() > BRUTEFORCE_LIMIT {
        return Err(Error::TooLarge(w.len()));
    }
    check_inputs(&w, norms)?;
    let (rows, cols) = (w.rows(), w.cols());
    let mut values = vec![0.0f32; rows * cols];
    for r in 0..rows {
        for l in 0..cols {
            let mut emitted = 0.0f64;
            for rr in 0..rows {
                emitted += f64::from(norms[l]) * f64::from(w.get(rr, l).abs());
            }
            emitted /= rows as f64;
            let mut received = 0.0f64;
            for ll in 0..cols {
                received += f64::from(norms[ll]) * f64::from(w.get(r, ll).abs());
            }
            received /= cols as f64;
            values[r * cols + l] = (emitted * f64::from(w.get(r, l).abs()) * received) as f32;
        }
    }
    Ok(ScoreMatrix::new(Criterion::Multiflow, rows, cols, values))
}

pub fn score_magnitude(w: MatrixView<'_>) -> Result<ScoreMatrix> {
    w.ensure_finite("weights")?;
    let values = w.data().iter().map(|x| x.abs()).collect();
    Ok(ScoreMatrix::new(
        Criterion::Magnitude,
        w.rows(),
        w.cols(),
        values,
    ))
}

/// Layer-adaptive magnitude score: each squared weight divided by the sum
/// of squares of all weights ranked at or above it. Among equal magnitudes
/// the lower flat index ranks higher, so the lowest-index largest weight is
/// the unique entry scoring exactly 1.
pub fn score_lamp(w: MatrixView<'_>) -> Result<ScoreMatrix> {
    w.ensure_finite("weights")?;
    let data = w.data();
    if data.iter().all(|&x| x == 0.0) {
        return Err(Error::DegenerateLayer("<layer>".into()));
    }
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.sort_unstable_by(|&a, &b| {
        data[a]
            .abs()
            .total_cmp(&data[b].abs())
            .then_with(|| b.cmp(&a))
    });
    let mut values = vec![0.0f32; data.len()];
    let mut suffix = 0.0f64;
    for &i in order.iter().rev() {
        let sq = f64::from(data[i]) * f64::from(data[i]);
        suffix += sq;
        values[i] = (sq / suffix) as f32;
    }
    Ok(ScoreMatrix::new(
        Criterion::Lamp,
        w.rows(),
        w.cols(),
        values,
    ))
}

pub fn score_l2norm(w: MatrixView<'_>) -> Result<ScoreMatrix> {
    w.ensure_finite("weights")?;
    let frob = w
        .data()
        .iter()
        .map(|&x| f64::from(x) * f64::from(x))
        .sum::<f64>()
        .sqrt();
    if frob == 0.0 {
        return Err(Error::DegenerateLayer("<layer>".into()));
    }
    let values = w
        .data()
        .iter()
        .map(|&x| (f64::from(x.abs()) / frob) as f32)
        .collect();
    Ok(ScoreMatrix::new(
        Criterion::L2norm,
        w.rows(),
        w.cols(),
        values,
    ))
}

/// Which factor of the flow score an ablation keeps.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AblationMode {
    EdgeOnly,
    NodesOnly,
}

/// Edge-only keeps `|W|`; nodes-only keeps `s_in[l] * s_out[r]`, i.e. the
/// flow score with the edge magnitude factor removed.
pub fn score_ablation(w: MatrixView<'_>, norms: &[f32], mode: AblationMode) -> Result<ScoreMatrix> {
    check_inputs(&w, norms)?;
    match mode {
        AblationMode::EdgeOnly => {
            let mut s = score_magnitude(w)?;
            s.criterion = Criterion::MultiflowEdgeOnly;
            Ok(s)
        }
        AblationMode::NodesOnly => {
            let (s_in, s_out) = node_saliencies_f64(&w, norms);
            let mut values = Vec::with_capacity(w.len());
            for so in &s_out {
                values.extend(s_in.iter().map(|si| (si * so) as f32));
            }
            Ok(ScoreMatrix::new(
                Criterion::MultiflowNodesOnly,
                w.rows(),
                w.cols(),
                values,
            ))
        }
    }
}

/// I.i.d. uniform `[0, 1)` scores from a seeded ChaCha stream.
pub fn score_random(rows: usize, cols: usize, seed: u64) -> ScoreMatrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let values = (0..rows * cols).map(|_| rng.random::<f32>()).collect();
    let mut s = ScoreMatrix::new(Criterion::Random, rows, cols, values);
    s.rng_seed = Some(seed);
    s
}

/// Dispatches one gradient-free criterion on a layer.
pub fn score_layer(
    criterion: Criterion,
    w: MatrixView<'_>,
    norms: Option<&[f32]>,
    seed: u64,
) -> Result<ScoreMatrix> {
    let need_norms = || {
        norms.ok_or_else(|| {
            Error::InvalidArgument(format!(
                "criterion {criterion} requires activation statistics"
            ))
        })
    };
    match criterion {
        Criterion::Multiflow => score_multiflow(w, need_norms()?),
        Criterion::Magnitude => score_magnitude(w),
        Criterion::Lamp => score_lamp(w),
        Criterion::L2norm => score_l2norm(w),
        Criterion::MultiflowEdgeOnly => {
            let mut s = score_magnitude(w)?;
            s.criterion = Criterion::MultiflowEdgeOnly;
            Ok(s)
        }
        Criterion::MultiflowNodesOnly => score_ablation(w, need_norms()?, AblationMode::NodesOnly),
        Criterion::Random => Ok(score_random(w.rows(), w.cols(), seed)),
        Criterion::Snip => Err(Error::InvalidArgument(
            "snip needs gradients; use the toy benchmark".into(),
        )),
    }
}
