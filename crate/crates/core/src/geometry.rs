//! Fixed-horizon trajectories, the ellipse-induced atomic distance, and
//! greedy ε-cover sparsification of a trajectory corpus.
//!
//! Trajectories used as bases are stored *deviation-encoded*: each sample is
//! the offset from the straight constant-speed path the vehicle would follow
//! if it kept its initial speed. Absolute positions are recovered at use
//! sites with [`Trajectory::reconstruct`].

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_DT: f64 = 0.1;
pub const DEFAULT_HORIZON: usize = 30;
pub const DEFAULT_ATOM_LONGITUDINAL: f64 = 2.0;
pub const DEFAULT_ATOM_LATERAL: f64 = 0.5;
pub const DEFAULT_EPSILON: f64 = 1.0;

/// A planar path sampled at `dt` for a fixed number of steps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    /// `(x, y)` per step; x longitudinal, y lateral, both in metres.
    samples: Vec<[f64; 2]>,
    dt: f64,
    source_id: String,
    /// Speed at step 0 [m/s].
    v0: f64,
}

impl Trajectory {
    pub fn new(samples: Vec<[f64; 2]>, dt: f64, source_id: impl Into<String>, v0: f64) -> Result<Self> {
        let source_id = source_id.into();
        if samples.is_empty() {
            return Err(Error::Data(format!("trajectory {source_id} has no samples")));
        }
        if !(dt.is_finite() && dt > 0.0) {
            return Err(Error::Data(format!("trajectory {source_id}: dt must be positive, got {dt}")));
        }
        if !v0.is_finite() {
            return Err(Error::Data(format!("trajectory {source_id}: non-finite v0")));
        }
        if let Some(k) = samples.iter().position(|p| !(p[0].is_finite() && p[1].is_finite())) {
            return Err(Error::Data(format!(
                "trajectory {source_id}: non-finite coordinate at step {k}"
            )));
        }
        Ok(Self {
            samples,
            dt,
            source_id,
            v0,
        })
    }

    pub fn samples(&self) -> &[[f64; 2]] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn source_id(&self) -> &str {
        &self.source_id
    }

    pub fn v0(&self) -> f64 {
        self.v0
    }

    /// Sample at continuous time `t` ≥ 0, linearly interpolated between steps
    /// and linearly extrapolated past the last one.
    pub fn at_time(&self, t: f64) -> [f64; 2] {
        let n = self.samples.len();
        if n == 1 || t <= 0.0 {
            return self.samples[0];
        }
        let s = t / self.dt;
        let k = (s.floor() as usize).min(n - 2);
        let frac = s - k as f64;
        let (p, q) = (self.samples[k], self.samples[k + 1]);
        [p[0] + frac * (q[0] - p[0]), p[1] + frac * (q[1] - p[1])]
    }

    /// Absolute positions of a deviation-encoded trajectory for a vehicle
    /// currently at `origin` driving at `speed`, at the instants `k * step`
    /// for `k in 0..count`.
    pub fn reconstruct(&self, origin: [f64; 2], speed: f64, step: f64, count: usize) -> Vec<[f64; 2]> {
        (0..count)
            .map(|k| {
                let t = k as f64 * step;
                let d = self.at_time(t);
                [origin[0] + speed * t + d[0], origin[1] + d[1]]
            })
            .collect()
    }

    /// Inverse of [`deviation_encode`]: adds the constant-velocity ramp back.
    pub fn deviation_decode(&self) -> Trajectory {
        let samples = self
            .samples
            .iter()
            .enumerate()
            .map(|(k, p)| [p[0] + self.v0 * k as f64 * self.dt, p[1]])
            .collect();
        Trajectory {
            samples,
            dt: self.dt,
            source_id: self.source_id.clone(),
            v0: self.v0,
        }
    }
}

/// Offsets a raw trajectory from the straight path at constant speed `v0`.
pub fn deviation_encode(raw: &Trajectory, v0: f64) -> Result<Trajectory> {
    if !(v0.is_finite() && v0 >= 0.0) {
        return Err(Error::Data(format!("v0 must be finite and non-negative, got {v0}")));
    }
    let samples: Vec<[f64; 2]> = raw
        .samples
        .iter()
        .enumerate()
        .map(|(k, p)| [p[0] - v0 * k as f64 * raw.dt, p[1]])
        .collect();
    Trajectory::new(samples, raw.dt, raw.source_id.clone(), v0)
}

/// Per-step uncertainty ellipses: semi-axis `a` longitudinal, `b` lateral.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AtomSet {
    pub a: Vec<f64>,
    pub b: Vec<f64>,
}

impl AtomSet {
    pub fn new(a: Vec<f64>, b: Vec<f64>) -> Result<Self> {
        if a.len() != b.len() || a.is_empty() {
            return Err(Error::Contract(format!(
                "atom set needs equal, non-zero lengths (a: {}, b: {})",
                a.len(),
                b.len()
            )));
        }
        if a.iter().chain(b.iter()).any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(Error::Contract("atom semi-axes must be positive and finite".into()));
        }
        Ok(Self { a, b })
    }

    pub fn uniform(horizon: usize, a: f64, b: f64) -> Result<Self> {
        Self::new(vec![a; horizon], vec![b; horizon])
    }

    pub fn horizon(&self) -> usize {
        self.a.len()
    }

    /// Largest longitudinal and lateral semi-axes over the horizon.
    pub fn max_axes(&self) -> (f64, f64) {
        let a = self.a.iter().cloned().fold(0.0, f64::max);
        let b = self.b.iter().cloned().fold(0.0, f64::max);
        (a, b)
    }
}

/// Max over steps of the ellipse-scaled deviation between `p` and `q`.
///
/// `distance <= eps` holds exactly when every sample of `q` lies inside the
/// ellipse of semi-axes `eps * (a_t, b_t)` centred on the matching sample of `p`.
pub fn atomic_distance(p: &Trajectory, q: &Trajectory, atoms: &AtomSet) -> Result<f64> {
    if p.len() != q.len() || p.len() != atoms.horizon() {
        return Err(Error::Contract(format!(
            "trajectory lengths {} and {} do not match atom horizon {}",
            p.len(),
            q.len(),
            atoms.horizon()
        )));
    }
    Ok(distance_unchecked(p.samples(), q.samples(), atoms))
}

fn distance_unchecked(p: &[[f64; 2]], q: &[[f64; 2]], atoms: &AtomSet) -> f64 {
    let mut worst_sq: f64 = 0.0;
    for t in 0..p.len() {
        let dx = (p[t][0] - q[t][0]) / atoms.a[t];
        let dy = (p[t][1] - q[t][1]) / atoms.b[t];
        worst_sq = worst_sq.max(dx * dx + dy * dy);
    }
    worst_sq.sqrt()
}

/// Adjacency lists of the "within ε" relation; each list is sorted and
/// contains the node itself.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CoverGraph {
    adjacency: Vec<Vec<usize>>,
}

impl CoverGraph {
    pub fn len(&self) -> usize {
        self.adjacency.len()
    }

    pub fn is_empty(&self) -> bool {
        self.adjacency.is_empty()
    }

    pub fn neighbors(&self, node: usize) -> &[usize] {
        &self.adjacency[node]
    }

    pub fn is_adjacent(&self, i: usize, j: usize) -> bool {
        self.adjacency[i].binary_search(&j).is_ok()
    }
}

fn validate_corpus(corpus: &[Trajectory], atoms: &AtomSet) -> Result<()> {
    if corpus.is_empty() {
        return Err(Error::Contract("corpus is empty".into()));
    }
    if let Some((i, t)) = corpus
        .iter()
        .enumerate()
        .find(|(_, t)| t.len() != atoms.horizon())
    {
        return Err(Error::Contract(format!(
            "corpus member {i} has {} samples, expected {}",
            t.len(),
            atoms.horizon()
        )));
    }
    Ok(())
}

pub fn cover_graph(corpus: &[Trajectory], epsilon: f64, atoms: &AtomSet) -> Result<CoverGraph> {
    validate_corpus(corpus, atoms)?;
    if !(epsilon.is_finite() && epsilon > 0.0) {
        return Err(Error::Contract(format!("epsilon must be positive, got {epsilon}")));
    }
    let n = corpus.len();
    let mut adjacency: Vec<Vec<usize>> = (0..n).map(|i| vec![i]).collect();
    for i in 0..n {
        for j in (i + 1)..n {
            if distance_unchecked(corpus[i].samples(), corpus[j].samples(), atoms) <= epsilon {
                adjacency[i].push(j);
                adjacency[j].push(i);
            }
        }
    }
    for list in &mut adjacency {
        list.sort_unstable();
    }
    Ok(CoverGraph { adjacency })
}

/// A set of representative deviation-encoded trajectories covering a corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryBasis {
    pub bases: Vec<Trajectory>,
    pub epsilon: f64,
    pub atoms: AtomSet,
    /// Corpus index of each base.
    pub source_indices: Vec<usize>,
}

impl TrajectoryBasis {
    pub fn len(&self) -> usize {
        self.bases.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bases.is_empty()
    }

    pub fn horizon(&self) -> usize {
        self.atoms.horizon()
    }

    pub fn dt(&self) -> f64 {
        self.bases[0].dt()
    }
}

/// Greedy set cover over the ε-graph: repeatedly take the node whose
/// neighbourhood contains the most still-uncovered nodes (lowest index on ties).
pub fn greedy_sparsify(corpus: &[Trajectory], epsilon: f64, atoms: &AtomSet) -> Result<TrajectoryBasis> {
    let graph = cover_graph(corpus, epsilon, atoms)?;
    let chosen = greedy_cover(&graph);
    Ok(TrajectoryBasis {
        bases: chosen.iter().map(|&i| corpus[i].clone()).collect(),
        epsilon,
        atoms: atoms.clone(),
        source_indices: chosen,
    })
}

pub(crate) fn greedy_cover(graph: &CoverGraph) -> Vec<usize> {
    let n = graph.len();
    let mut covered = vec![false; n];
    let mut remaining = n;
    let mut gain: Vec<usize> = (0..n).map(|i| graph.neighbors(i).len()).collect();
    let mut chosen = Vec::new();
    while remaining > 0 {
        let mut best = 0;
        for i in 1..n {
            if gain[i] > gain[best] {
                best = i;
            }
        }
        chosen.push(best);
        for &j in graph.neighbors(best) {
            if !covered[j] {
                covered[j] = true;
                remaining -= 1;
                // j no longer counts towards any neighbour's gain
                for &k in graph.neighbors(j) {
                    gain[k] -= 1;
                }
            }
        }
    }
    chosen
}

/// Index and distance of the closest base; lowest index wins ties.
pub fn nearest_base(traj: &Trajectory, basis: &TrajectoryBasis) -> Result<(usize, f64)> {
    if basis.is_empty() {
        return Err(Error::Contract("basis is empty".into()));
    }
    let mut best = (0, f64::INFINITY);
    for (i, base) in basis.bases.iter().enumerate() {
        let d = atomic_distance(traj, base, &basis.atoms)?;
        if d < best.1 {
            best = (i, d);
        }
    }
    Ok(best)
}
