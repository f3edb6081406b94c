//! Directed communication graph of the platoon: adjacency, in-degree,
//! Laplacian and pinning matrices, neighbor sets, and the spectral /
//! structural checks the stability results rest on.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;

use crate::error::PlatoonError;

/// The four preset topologies: predecessor following, predecessor-leader
/// following, and their two-predecessor variants.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TopologyKind {
    Pf,
    Plf,
    Tpf,
    Tplf,
}

impl std::str::FromStr for TopologyKind {
    type Err = PlatoonError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "pf" => Ok(TopologyKind::Pf),
            "plf" => Ok(TopologyKind::Plf),
            "tpf" => Ok(TopologyKind::Tpf),
            "tplf" => Ok(TopologyKind::Tplf),
            other => Err(PlatoonError::Config(format!("unknown topology preset '{other}'"))),
        }
    }
}

impl std::fmt::Display for TopologyKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            TopologyKind::Pf => "pf",
            TopologyKind::Plf => "plf",
            TopologyKind::Tpf => "tpf",
            TopologyKind::Tplf => "tplf",
        };
        write!(f, "{s}")
    }
}

/// Communication topology over N followers. `adjacency[i][j] = 1` means
/// follower i+1 receives the broadcast of follower j+1; `pinning[i] = 1`
/// means follower i+1 hears the leader directly.
///
/// Follower indices in the public API are 1-based (leader is node 0),
/// matching the front-to-back platoon ordering.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Topology {
    n: usize,
    adjacency: Vec<Vec<u8>>,
    pinning: Vec<u8>,
}

/// Eigenvalue magnitudes and nilpotency of the consensus matrix
/// (D + P)^-1 A.
#[derive(Debug, Clone, Serialize)]
pub struct SpectralReport {
    pub eigenvalue_magnitudes: Vec<f64>,
    pub spectral_radius: f64,
    /// Smallest k with M^k = 0, or None when no k <= N works.
    pub nilpotency_degree: Option<usize>,
}

impl Topology {
    pub fn new(adjacency: Vec<Vec<u8>>, pinning: Vec<u8>) -> Result<Self, PlatoonError> {
        let n = pinning.len();
        if n == 0 {
            return Err(PlatoonError::Topology("follower count must be at least 1".into()));
        }
        if adjacency.len() != n || adjacency.iter().any(|row| row.len() != n) {
            return Err(PlatoonError::Topology(format!(
                "adjacency must be {n}x{n} to match {n} pinning entries"
            )));
        }
        for (i, row) in adjacency.iter().enumerate() {
            for (j, &a) in row.iter().enumerate() {
                if a > 1 {
                    return Err(PlatoonError::Topology(format!(
                        "adjacency entries must be 0 or 1, got {a} at ({},{})",
                        i + 1,
                        j + 1
                    )));
                }
                if i == j && a != 0 {
                    return Err(PlatoonError::Topology(format!(
                        "self-loop at follower {}",
                        i + 1
                    )));
                }
            }
        }
        if pinning.iter().any(|&p| p > 1) {
            return Err(PlatoonError::Topology("pinning entries must be 0 or 1".into()));
        }
        Ok(Topology { n, adjacency, pinning })
    }

    pub fn from_preset(kind: TopologyKind, n: usize) -> Result<Self, PlatoonError> {
        if n == 0 {
            return Err(PlatoonError::Topology("preset needs at least one follower".into()));
        }
        let mut adjacency = vec![vec![0u8; n]; n];
        let mut pinning = vec![0u8; n];
        let two_pred = matches!(kind, TopologyKind::Tpf | TopologyKind::Tplf);
        let leader_all = matches!(kind, TopologyKind::Plf | TopologyKind::Tplf);
        for i in 1..n {
            adjacency[i][i - 1] = 1;
            if two_pred && i >= 2 {
                adjacency[i][i - 2] = 1;
            }
        }
        pinning[0] = 1;
        if two_pred && n >= 2 {
            pinning[1] = 1;
        }
        if leader_all {
            pinning.iter_mut().for_each(|p| *p = 1);
        }
        Topology::new(adjacency, pinning)
    }

    pub fn follower_count(&self) -> usize {
        self.n
    }

    pub fn adjacency_bit(&self, i: usize, j: usize) -> u8 {
        self.adjacency[i - 1][j - 1]
    }

    pub fn is_pinned(&self, i: usize) -> bool {
        self.pinning[i - 1] == 1
    }

    pub fn pinning_bits(&self) -> &[u8] {
        &self.pinning
    }

    pub fn adjacency_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.n, self.n, |i, j| f64::from(self.adjacency[i][j]))
    }

    pub fn degree(&self, i: usize) -> usize {
        self.adjacency[i - 1].iter().map(|&a| a as usize).sum()
    }

    pub fn degree_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.n, self.n, |i, j| {
            if i == j {
                self.degree(i + 1) as f64
            } else {
                0.0
            }
        })
    }

    /// L = D - A; every row sums to zero.
    pub fn laplacian(&self) -> DMatrix<f64> {
        self.degree_matrix() - self.adjacency_matrix()
    }

    pub fn pinning_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.n, self.n, |i, j| {
            if i == j {
                f64::from(self.pinning[i])
            } else {
                0.0
            }
        })
    }

    fn check_index(&self, i: usize) -> Result<(), PlatoonError> {
        if i == 0 || i > self.n {
            return Err(PlatoonError::Topology(format!(
                "follower index {i} out of range 1..={}",
                self.n
            )));
        }
        Ok(())
    }

    /// Followers whose broadcasts node i receives.
    pub fn neighbor_set(&self, i: usize) -> Result<BTreeSet<usize>, PlatoonError> {
        self.check_index(i)?;
        Ok((1..=self.n).filter(|&j| self.adjacency[i - 1][j - 1] == 1).collect())
    }

    /// Followers that receive node i's broadcasts.
    pub fn out_set(&self, i: usize) -> Result<BTreeSet<usize>, PlatoonError> {
        self.check_index(i)?;
        Ok((1..=self.n).filter(|&j| self.adjacency[j - 1][i - 1] == 1).collect())
    }

    /// `{0}` when node i is pinned to the leader, empty otherwise.
    pub fn leader_set(&self, i: usize) -> Result<BTreeSet<usize>, PlatoonError> {
        self.check_index(i)?;
        Ok(if self.pinning[i - 1] == 1 {
            BTreeSet::from([0])
        } else {
            BTreeSet::new()
        })
    }

    /// All senders visible to node i: neighbors plus the leader if pinned.
    pub fn info_set(&self, i: usize) -> Result<BTreeSet<usize>, PlatoonError> {
        let mut set = self.neighbor_set(i)?;
        set.extend(self.leader_set(i)?);
        Ok(set)
    }

    /// True iff every follower is reachable from the leader through the
    /// directed edges {(0,i): p_i = 1} and {(j,i): a_ij = 1}.
    pub fn has_spanning_tree(&self) -> bool {
        let mut reached = vec![false; self.n];
        let mut stack: Vec<usize> =
            (0..self.n).filter(|&i| self.pinning[i] == 1).collect();
        for &i in &stack {
            reached[i] = true;
        }
        while let Some(j) = stack.pop() {
            for i in 0..self.n {
                if !reached[i] && self.adjacency[i][j] == 1 {
                    reached[i] = true;
                    stack.push(i);
                }
            }
        }
        reached.iter().all(|&r| r)
    }

    /// True iff information flows only front-to-back, i.e. the adjacency
    /// matrix is strictly lower triangular in platoon order.
    pub fn is_unidirectional(&self) -> bool {
        (0..self.n).all(|i| (i..self.n).all(|j| self.adjacency[i][j] == 0))
    }

    /// The consensus matrix (D + P)^-1 A governing the terminal-error
    /// recursion. Fails when some follower has neither in-edges nor a
    /// leader link (singular D + P).
    pub fn consensus_matrix(&self) -> Result<DMatrix<f64>, PlatoonError> {
        let mut m = self.adjacency_matrix();
        for i in 0..self.n {
            let scale = self.degree(i + 1) as f64 + f64::from(self.pinning[i]);
            if scale == 0.0 {
                return Err(PlatoonError::Topology(format!(
                    "follower {} has no in-edges and is not pinned; D + P is singular",
                    i + 1
                )));
            }
            for j in 0..self.n {
                m[(i, j)] /= scale;
            }
        }
        Ok(m)
    }

    pub fn spectral_report(&self) -> Result<SpectralReport, PlatoonError> {
        let m = self.consensus_matrix()?;

        // M^k = 0 decided with an absolute threshold; entries are small
        // rationals so 1e-12 cannot produce false negatives.
        let mut nilpotency_degree = None;
        let mut power = DMatrix::identity(self.n, self.n);
        for k in 1..=self.n {
            power *= &m;
            if power.iter().all(|x| x.abs() < 1e-12) {
                nilpotency_degree = Some(k);
                break;
            }
        }

        // The QR iteration can cycle forever on exactly nilpotent matrices,
        // so those take the short path: every eigenvalue is zero. It can
        // also cycle on distinct eigenvalues of equal magnitude (e.g. a
        // +/- pair), which a diagonal shift breaks: eigenvalues of M + sI
        // are the eigenvalues of M shifted by s.
        let mut magnitudes: Vec<f64> = if nilpotency_degree.is_some() {
            vec![0.0; self.n]
        } else {
            let mut found = None;
            for shift in [0.0, 0.618_033_988_749_894_9, 1.324_717_957_244_746] {
                let shifted = &m + DMatrix::identity(self.n, self.n) * shift;
                if let Some(schur) = nalgebra::Schur::try_new(shifted, 1e-14, 100_000) {
                    found = Some(
                        schur
                            .complex_eigenvalues()
                            .iter()
                            .map(|e| (e - nalgebra::Complex::new(shift, 0.0)).norm())
                            .collect::<Vec<_>>(),
                    );
                    break;
                }
            }
            found.ok_or_else(|| {
                PlatoonError::Topology(
                    "eigenvalue iteration on the consensus matrix did not converge".into(),
                )
            })?
        };
        magnitudes.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let spectral_radius = magnitudes.last().copied().unwrap_or(0.0);

        Ok(SpectralReport { eigenvalue_magnitudes: magnitudes, spectral_radius, nilpotency_degree })
    }
}
