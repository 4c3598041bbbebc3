//! Class grouping from label statistics.
//!
//! The pipeline is: count a conditional co-occurrence matrix `S` from binary
//! training labels, smooth and symmetrize it into a correlative affinity
//! (`CO`) and its all-ones complement (`DC`), build the symmetric normalized
//! Laplacian of each affinity graph, embed classes with the eigenvectors of
//! the smallest eigenvalues, and k-means the rows into disjoint class groups.
//!
//! Both partitions are computed independently; a class may land in
//! differently sized groups in the two modes.

pub mod dump;
mod kmeans;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::substream;

/// Binary relevance matrix: `N` examples by `K` classes, entries in {0,1}.
#[derive(Debug, Clone)]
pub struct LabelMatrix {
    data: Array2<u8>,
}

impl LabelMatrix {
    /// Validates shape and binary entries.
    pub fn new(data: Array2<u8>) -> Result<Self> {
        let (n, k) = data.dim();
        if n < 1 {
            return Err(Error::InvalidLabels("need at least one example".into()));
        }
        if k < 2 {
            return Err(Error::InvalidLabels("need at least two classes".into()));
        }
        if let Some(bad) = data.iter().find(|&&v| v > 1) {
            return Err(Error::InvalidLabels(format!(
                "entries must be 0 or 1, found {bad}"
            )));
        }
        Ok(Self { data })
    }

    pub fn n_examples(&self) -> usize {
        self.data.nrows()
    }

    pub fn n_classes(&self) -> usize {
        self.data.ncols()
    }

    pub fn get(&self, example: usize, class: usize) -> bool {
        self.data[[example, class]] == 1
    }

    pub fn as_array(&self) -> &Array2<u8> {
        &self.data
    }

    /// Fraction of examples in which each class is positive.
    pub fn marginals(&self) -> Array1<f64> {
        let n = self.n_examples() as f64;
        self.data
            .map_axis(ndarray::Axis(0), |col| {
                col.iter().map(|&v| v as f64).sum::<f64>() / n
            })
    }
}

/// Conditional co-occurrence matrix: `s[i][j] = P(j present | i present)`,
/// estimated by counting. Rows of classes with no positive examples are
/// all-zero and flagged in `zero_positive_classes`.
#[derive(Debug, Clone)]
pub struct CoOccurrenceMatrix {
    pub s: Array2<f64>,
    pub zero_positive_classes: Vec<usize>,
}

impl CoOccurrenceMatrix {
    pub fn n_classes(&self) -> usize {
        self.s.nrows()
    }
}

/// Which affinity graph a matrix or partition belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AffinityMode {
    /// Correlative: classes that co-occur belong together.
    Co,
    /// Discriminative: complement graph, classes that rarely co-occur belong together.
    Dc,
}

impl AffinityMode {
    pub fn name(self) -> &'static str {
        match self {
            AffinityMode::Co => "co",
            AffinityMode::Dc => "dc",
        }
    }
}

/// Symmetric affinity matrix over classes, for one mode.
#[derive(Debug, Clone)]
pub struct AffinityMatrix {
    pub m: Array2<f64>,
    pub mode: AffinityMode,
    pub tau: f64,
}

/// Disjoint class subsets covering `{0..K-1}`, the grouping output.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Partition {
    pub mode: AffinityMode,
    pub groups: Vec<Vec<usize>>,
    pub group_of: Vec<usize>,
}

impl Partition {
    /// Builds from per-class group labels; classes within a group are kept
    /// in ascending index order so the serialized form is canonical.
    pub fn from_labels(mode: AffinityMode, labels: &[usize], n_groups: usize) -> Result<Self> {
        let mut groups: Vec<Vec<usize>> = vec![Vec::new(); n_groups];
        for (class, &g) in labels.iter().enumerate() {
            if g >= n_groups {
                return Err(Error::InvalidConfig(format!(
                    "cluster label {g} out of range for {n_groups} groups"
                )));
            }
            groups[g].push(class);
        }
        let part = Self {
            mode,
            groups,
            group_of: labels.to_vec(),
        };
        part.validate()?;
        Ok(part)
    }

    pub fn n_groups(&self) -> usize {
        self.groups.len()
    }

    pub fn n_classes(&self) -> usize {
        self.group_of.len()
    }

    /// Checks the partition laws: groups disjoint, non-empty, covering all
    /// classes, and consistent with `group_of`.
    pub fn validate(&self) -> Result<()> {
        let k = self.group_of.len();
        let mut seen = vec![false; k];
        for (g, members) in self.groups.iter().enumerate() {
            if members.is_empty() {
                return Err(Error::InvalidConfig(format!("group {g} is empty")));
            }
            for &c in members {
                if c >= k || seen[c] {
                    return Err(Error::InvalidConfig(format!(
                        "class {c} missing or duplicated in partition"
                    )));
                }
                seen[c] = true;
                if self.group_of[c] != g {
                    return Err(Error::InvalidConfig(format!(
                        "group_of[{c}] disagrees with group membership"
                    )));
                }
            }
        }
        if !seen.iter().all(|&s| s) {
            return Err(Error::InvalidConfig("partition does not cover all classes".into()));
        }
        Ok(())
    }

    /// True if `self` and `other` induce the same grouping up to relabeling
    /// of group indices.
    pub fn same_up_to_relabeling(&self, other: &Partition) -> bool {
        if self.group_of.len() != other.group_of.len() {
            return false;
        }
        let canon = |p: &Partition| {
            let mut gs: Vec<Vec<usize>> = p.groups.iter().cloned().collect();
            for g in &mut gs {
                g.sort_unstable();
            }
            gs.sort();
            gs
        };
        canon(self) == canon(other)
    }
}

/// Hyperparameters for the grouping pipeline.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct GroupingConfig {
    pub n_groups: usize,
    pub tau: f64,
    pub degree_epsilon: f64,
    pub kmeans_restarts: usize,
    pub rng_seed: u64,
}

impl Default for GroupingConfig {
    fn default() -> Self {
        Self {
            n_groups: 5,
            tau: 2.0,
            degree_epsilon: 1e-8,
            kmeans_restarts: 10,
            rng_seed: 0,
        }
    }
}

impl GroupingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_groups < 1 {
            return Err(Error::InvalidConfig("n_groups must be >= 1".into()));
        }
        if !(self.tau > 0.0) {
            return Err(Error::InvalidConfig("tau must be > 0".into()));
        }
        if !(self.degree_epsilon > 0.0) {
            return Err(Error::InvalidConfig("degree_epsilon must be > 0".into()));
        }
        Ok(())
    }
}

/// Counts `s[i][j] = #(i and j both positive) / #(i positive)`.
///
/// Classes with zero positives get an all-zero row (including the diagonal)
/// and are reported in the result rather than failing the call.
pub fn build_cooccurrence(labels: &LabelMatrix) -> CoOccurrenceMatrix {
    let k = labels.n_classes();
    let n = labels.n_examples();
    let mut joint = Array2::<f64>::zeros((k, k));
    let mut pos = vec![0f64; k];

    for row in 0..n {
        let present: Vec<usize> = (0..k).filter(|&c| labels.get(row, c)).collect();
        for &i in &present {
            pos[i] += 1.0;
            for &j in &present {
                joint[[i, j]] += 1.0;
            }
        }
    }

    let mut s = Array2::<f64>::zeros((k, k));
    let mut zero_positive_classes = Vec::new();
    for i in 0..k {
        if pos[i] == 0.0 {
            zero_positive_classes.push(i);
            continue;
        }
        for j in 0..k {
            s[[i, j]] = joint[[i, j]] / pos[i];
        }
    }

    CoOccurrenceMatrix {
        s,
        zero_positive_classes,
    }
}

/// Smooths (elementwise `tau`-th root), symmetrizes, and for DC complements
/// against the all-ones matrix. Entries are clamped into `[0, 1]`.
pub fn build_affinity(s: &CoOccurrenceMatrix, tau: f64, mode: AffinityMode) -> Result<AffinityMatrix> {
    if !(tau > 0.0) {
        return Err(Error::InvalidConfig("tau must be > 0".into()));
    }
    let k = s.n_classes();
    let smoothed = s.s.mapv(|v| v.powf(1.0 / tau));
    let mut m = Array2::<f64>::zeros((k, k));
    for i in 0..k {
        for j in 0..k {
            let sym = 0.5 * (smoothed[[i, j]] + smoothed[[j, i]]);
            let v = match mode {
                AffinityMode::Co => sym,
                AffinityMode::Dc => 1.0 - sym,
            };
            m[[i, j]] = v.clamp(0.0, 1.0);
        }
    }
    Ok(AffinityMatrix { m, mode, tau })
}

/// Symmetric normalized Laplacian `L = I - D^{-1/2} M D^{-1/2}` with each
/// degree floored at `degree_epsilon` so isolated classes stay well-defined.
pub fn normalized_laplacian(m: &Array2<f64>, degree_epsilon: f64) -> Array2<f64> {
    let k = m.nrows();
    let d_inv_sqrt: Vec<f64> = (0..k)
        .map(|i| {
            let deg: f64 = m.row(i).sum();
            1.0 / deg.max(degree_epsilon).sqrt()
        })
        .collect();

    let mut l = Array2::<f64>::eye(k);
    for i in 0..k {
        for j in 0..k {
            l[[i, j]] -= d_inv_sqrt[i] * m[[i, j]] * d_inv_sqrt[j];
        }
    }
    l
}

/// Eigenvectors of the `n_groups` smallest Laplacian eigenvalues, as columns.
///
/// Eigenpairs are sorted ascending by eigenvalue (index as tie-break) so the
/// embedding is deterministic for a given input.
fn spectral_embedding(l: &Array2<f64>, n_groups: usize) -> Array2<f64> {
    let k = l.nrows();
    let mat = nalgebra::DMatrix::from_fn(k, k, |i, j| l[[i, j]]);
    // The Laplacian is symmetric by construction; symmetrize defensively
    // against rounding before the solver.
    let sym = (&mat + mat.transpose()) * 0.5;
    let eigen = nalgebra::SymmetricEigen::new(sym);

    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| {
        eigen.eigenvalues[a]
            .partial_cmp(&eigen.eigenvalues[b])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });

    let mut f = Array2::<f64>::zeros((k, n_groups));
    for (col, &idx) in order.iter().take(n_groups).enumerate() {
        for row in 0..k {
            f[[row, col]] = eigen.eigenvectors[(row, idx)];
        }
    }
    f
}

/// Row-normalizes the spectral embedding to unit length; zero rows are left
/// as zero.
fn normalize_rows(f: &mut Array2<f64>) {
    for mut row in f.rows_mut() {
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 0.0 {
            row.mapv_inplace(|v| v / norm);
        }
    }
}

/// Spectral clustering: Laplacian eigen-embedding followed by seeded k-means.
pub fn spectral_cluster(m: &AffinityMatrix, cfg: &GroupingConfig) -> Result<Partition> {
    cfg.validate()?;
    let k = m.m.nrows();
    if cfg.n_groups > k {
        return Err(Error::TooManyGroups {
            requested: cfg.n_groups,
            classes: k,
        });
    }

    let l = normalized_laplacian(&m.m, cfg.degree_epsilon);
    let mut embedding = spectral_embedding(&l, cfg.n_groups);
    normalize_rows(&mut embedding);

    let mut rng = substream(cfg.rng_seed, match m.mode {
        AffinityMode::Co => 0x636f,
        AffinityMode::Dc => 0x6463,
    });
    let labels = kmeans::cluster(&embedding, cfg.n_groups, cfg.kmeans_restarts, &mut rng);
    Partition::from_labels(m.mode, &labels, cfg.n_groups)
}

/// Output of the full grouping pipeline over both modes.
#[derive(Debug, Clone)]
pub struct GroupingOutcome {
    pub co: Partition,
    pub dc: Partition,
    pub cooccurrence: CoOccurrenceMatrix,
}

/// Runs co-occurrence counting, both affinities, and both clusterings.
pub fn group_classes(labels: &LabelMatrix, cfg: &GroupingConfig) -> Result<GroupingOutcome> {
    let s = build_cooccurrence(labels);
    let m_co = build_affinity(&s, cfg.tau, AffinityMode::Co)?;
    let m_dc = build_affinity(&s, cfg.tau, AffinityMode::Dc)?;
    let co = spectral_cluster(&m_co, cfg)?;
    let dc = spectral_cluster(&m_dc, cfg)?;
    Ok(GroupingOutcome {
        co,
        dc,
        cooccurrence: s,
    })
}
