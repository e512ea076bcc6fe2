//! Directed physical graph of road cells and intersections with turning-ratio
//! data, validation, and neighbor-set queries.
//!
//! A cell is a directed road segment between two nodes. Nodes are either
//! internal intersections or the single exterior node through which vehicles
//! enter and leave the network. Adjacency between cells is declared through
//! turning entries: cell `j` is downstream of cell `i` when `i` carries a
//! turning triple toward `j`. U-turn pairs (the opposite lane of the same
//! street) carry no turning entry, so they are not neighbors even though
//! their end nodes line up.

use nalgebra::DMatrix;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scalar::{lit, Scalar};

pub const EXTERIOR_NODE: &str = "O";

/// Index of a cell inside a validated [`Network`] (description order).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct CellId(pub usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum NodeId {
    Intersection(usize),
    Exterior,
}

#[derive(Debug, Error)]
pub enum NetworkError {
    #[error("cell {0} violates source/sink reachability")]
    UnreachableCell(u32),
    #[error("cell {0}: nominal turning ratios sum to {1}, expected at most 1")]
    BadRowSum(u32, f64),
    #[error("exit share must lie in [0, 1), got {0}")]
    BadExitShare(f64),
    #[error("cell {from}: invalid turning entry toward {to}: {reason}")]
    InconsistentEdge { from: u32, to: u32, reason: String },
    #[error("unknown cell {0}")]
    UnknownCell(u32),
    #[error("grid dimensions must be at least 1x1, got {0}x{1}")]
    BadDimensions(usize, usize),
    #[error("matrix is not square: {0}x{1}")]
    NonSquare(usize, usize),
}

/// One turning triple: nominal split ratio toward `to` with its uncertainty
/// bounds.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TurnDesc {
    pub to: u32,
    pub r_nominal: f64,
    pub r_lower: f64,
    pub r_upper: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CellDesc {
    pub id: u32,
    /// Source node name; `"O"` is the exterior.
    pub source: String,
    /// Sink node name; `"O"` is the exterior.
    pub sink: String,
    #[serde(default)]
    pub turns: Vec<TurnDesc>,
}

/// Textual network description document (JSON on disk).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NetworkDescription {
    pub cells: Vec<CellDesc>,
}

impl NetworkDescription {
    pub fn from_json(s: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(s)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("description serializes")
    }

    /// Replace each cell's nominal splits by random positive weights
    /// normalized to sum 1, with bounds `nominal * (1 -+ delta_r)` clamped
    /// to `[0, 1]`.
    pub fn randomize_splits<R: Rng>(&mut self, delta_r: f64, rng: &mut R) {
        for cell in &mut self.cells {
            if cell.turns.is_empty() {
                continue;
            }
            let weights: Vec<f64> = cell.turns.iter().map(|_| rng.gen_range(0.2..1.0)).collect();
            let total: f64 = weights.iter().sum();
            for (turn, w) in cell.turns.iter_mut().zip(weights) {
                let nominal = w / total;
                turn.r_nominal = nominal;
                turn.r_lower = (nominal * (1.0 - delta_r)).max(0.0);
                turn.r_upper = (nominal * (1.0 + delta_r)).min(1.0);
            }
        }
    }
}

#[derive(Debug, Clone)]
struct Turn {
    to: usize,
    nominal: f64,
    lower: f64,
    upper: f64,
}

/// Validated road network.
#[derive(Debug, Clone)]
pub struct Network {
    ext_ids: Vec<u32>,
    node_names: Vec<String>,
    source: Vec<NodeId>,
    sink: Vec<NodeId>,
    turns: Vec<Vec<Turn>>,
    upstream: Vec<Vec<usize>>,
    same_sink: Vec<Vec<usize>>,
}

impl Network {
    /// Build and validate a network from its description document.
    pub fn build(desc: &NetworkDescription) -> Result<Self, NetworkError> {
        let n = desc.cells.len();
        let mut ext_ids = Vec::with_capacity(n);
        let mut node_names: Vec<String> = Vec::new();
        let mut source = Vec::with_capacity(n);
        let mut sink = Vec::with_capacity(n);

        let node_id = |names: &mut Vec<String>, name: &str| -> NodeId {
            if name == EXTERIOR_NODE {
                NodeId::Exterior
            } else {
                match names.iter().position(|s| s == name) {
                    Some(k) => NodeId::Intersection(k),
                    None => {
                        names.push(name.to_string());
                        NodeId::Intersection(names.len() - 1)
                    }
                }
            }
        };

        for cell in &desc.cells {
            if ext_ids.contains(&cell.id) {
                return Err(NetworkError::InconsistentEdge {
                    from: cell.id,
                    to: cell.id,
                    reason: "duplicate cell id".into(),
                });
            }
            ext_ids.push(cell.id);
            source.push(node_id(&mut node_names, &cell.source));
            sink.push(node_id(&mut node_names, &cell.sink));
        }

        let index_of = |id: u32| ext_ids.iter().position(|&e| e == id);

        let mut turns: Vec<Vec<Turn>> = vec![Vec::new(); n];
        for (i, cell) in desc.cells.iter().enumerate() {
            if sink[i] == NodeId::Exterior && !cell.turns.is_empty() {
                return Err(NetworkError::InconsistentEdge {
                    from: cell.id,
                    to: cell.turns[0].to,
                    reason: "destination cell cannot carry turning entries".into(),
                });
            }
            for t in &cell.turns {
                let j = index_of(t.to).ok_or(NetworkError::UnknownCell(t.to))?;
                if sink[i] != source[j] {
                    return Err(NetworkError::InconsistentEdge {
                        from: cell.id,
                        to: t.to,
                        reason: "turning entry on non-adjacent pair".into(),
                    });
                }
                let ordered = 0.0 <= t.r_lower
                    && t.r_lower <= t.r_nominal
                    && t.r_nominal <= t.r_upper
                    && t.r_upper <= 1.0;
                if !ordered {
                    return Err(NetworkError::InconsistentEdge {
                        from: cell.id,
                        to: t.to,
                        reason: format!(
                            "turning bounds not ordered in [0,1]: {} <= {} <= {}",
                            t.r_lower, t.r_nominal, t.r_upper
                        ),
                    });
                }
                if turns[i].iter().any(|u| u.to == j) {
                    return Err(NetworkError::InconsistentEdge {
                        from: cell.id,
                        to: t.to,
                        reason: "duplicate turning entry".into(),
                    });
                }
                turns[i].push(Turn {
                    to: j,
                    nominal: t.r_nominal,
                    lower: t.r_lower,
                    upper: t.r_upper,
                });
            }
            // rows may sum to less than one (traffic reaching destinations
            // on the link exits the network) but never more
            if sink[i] != NodeId::Exterior {
                let row_sum: f64 = turns[i].iter().map(|t| t.nominal).sum();
                if row_sum > 1.0 + 1e-9 {
                    return Err(NetworkError::BadRowSum(cell.id, row_sum));
                }
            }
        }

        let mut upstream: Vec<Vec<usize>> = vec![Vec::new(); n];
        for i in 0..n {
            for t in &turns[i] {
                upstream[t.to].push(i);
            }
        }

        let mut same_sink: Vec<Vec<usize>> = vec![Vec::new(); n];
        for i in 0..n {
            if sink[i] != NodeId::Exterior {
                same_sink[i] = (0..n).filter(|&j| sink[j] == sink[i]).collect();
            }
        }

        let net = Network {
            ext_ids,
            node_names,
            source,
            sink,
            turns,
            upstream,
            same_sink,
        };
        net.check_reachability()?;
        Ok(net)
    }

    /// Every cell must be reachable from a source cell and reach a
    /// destination cell.
    fn check_reachability(&self) -> Result<(), NetworkError> {
        let n = self.len();
        let forward: Vec<Vec<usize>> = (0..n)
            .map(|i| self.turns[i].iter().map(|t| t.to).collect())
            .collect();
        let seeds_fwd: Vec<usize> = (0..n).filter(|&i| self.source[i] == NodeId::Exterior).collect();
        let seeds_bwd: Vec<usize> = (0..n).filter(|&i| self.sink[i] == NodeId::Exterior).collect();
        let reached_fwd = bfs(n, &seeds_fwd, &forward);
        let reached_bwd = bfs(n, &seeds_bwd, &self.upstream);
        for i in 0..n {
            if !reached_fwd[i] || !reached_bwd[i] {
                return Err(NetworkError::UnreachableCell(self.ext_ids[i]));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.ext_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ext_ids.is_empty()
    }

    pub fn cells(&self) -> impl Iterator<Item = CellId> {
        (0..self.len()).map(CellId)
    }

    pub fn external_id(&self, i: CellId) -> u32 {
        self.ext_ids[i.0]
    }

    pub fn index_of(&self, ext_id: u32) -> Result<CellId, NetworkError> {
        self.ext_ids
            .iter()
            .position(|&e| e == ext_id)
            .map(CellId)
            .ok_or(NetworkError::UnknownCell(ext_id))
    }

    pub fn source(&self, i: CellId) -> NodeId {
        self.source[i.0]
    }

    pub fn sink(&self, i: CellId) -> NodeId {
        self.sink[i.0]
    }

    pub fn node_name(&self, node: NodeId) -> &str {
        match node {
            NodeId::Exterior => EXTERIOR_NODE,
            NodeId::Intersection(k) => &self.node_names[k],
        }
    }

    pub fn intersection_count(&self) -> usize {
        self.node_names.len()
    }

    /// Downstream neighbors `N-(i)`: cells receiving vehicles from `i`.
    pub fn downstream(&self, i: CellId) -> impl Iterator<Item = CellId> + '_ {
        self.turns[i.0].iter().map(|t| CellId(t.to))
    }

    /// Upstream neighbors `N+(i)`: cells sending vehicles into `i`.
    pub fn upstream(&self, i: CellId) -> impl Iterator<Item = CellId> + '_ {
        self.upstream[i.0].iter().map(|&j| CellId(j))
    }

    /// `I(i)`: cells sharing `i`'s sink intersection, `i` included. Empty for
    /// destination cells.
    pub fn same_sink(&self, i: CellId) -> impl Iterator<Item = CellId> + '_ {
        self.same_sink[i.0].iter().map(|&j| CellId(j))
    }

    /// The three neighbor sets of a cell, by external id.
    pub fn neighbor_sets(&self, ext_id: u32) -> Result<(Vec<u32>, Vec<u32>, Vec<u32>), NetworkError> {
        let i = self.index_of(ext_id)?;
        let mut down: Vec<u32> = self.downstream(i).map(|j| self.external_id(j)).collect();
        let mut up: Vec<u32> = self.upstream(i).map(|j| self.external_id(j)).collect();
        let mut same: Vec<u32> = self.same_sink(i).map(|j| self.external_id(j)).collect();
        down.sort_unstable();
        up.sort_unstable();
        same.sort_unstable();
        Ok((down, up, same))
    }

    /// Nominal ratio `r*_ij`, zero for non-neighbors.
    pub fn ratio_nominal(&self, i: CellId, j: CellId) -> f64 {
        self.turns[i.0]
            .iter()
            .find(|t| t.to == j.0)
            .map_or(0.0, |t| t.nominal)
    }

    pub fn ratio_lower(&self, i: CellId, j: CellId) -> f64 {
        self.turns[i.0]
            .iter()
            .find(|t| t.to == j.0)
            .map_or(0.0, |t| t.lower)
    }

    pub fn ratio_upper(&self, i: CellId, j: CellId) -> f64 {
        self.turns[i.0]
            .iter()
            .find(|t| t.to == j.0)
            .map_or(0.0, |t| t.upper)
    }

    /// Assemble `(R*, R_lower, R_upper, G = I - R*)`.
    pub fn turning_matrices<T: Scalar>(&self) -> (DMatrix<T>, DMatrix<T>, DMatrix<T>, DMatrix<T>) {
        let n = self.len();
        let mut nominal = DMatrix::zeros(n, n);
        let mut lower = DMatrix::zeros(n, n);
        let mut upper = DMatrix::zeros(n, n);
        for i in 0..n {
            for t in &self.turns[i] {
                nominal[(i, t.to)] = lit(t.nominal);
                lower[(i, t.to)] = lit(t.lower);
                upper[(i, t.to)] = lit(t.upper);
            }
        }
        let g = DMatrix::identity(n, n) - &nominal;
        (nominal, lower, upper, g)
    }

    /// Emit the description document for this network (round-trips through
    /// [`Network::build`]).
    pub fn to_description(&self) -> NetworkDescription {
        let cells = (0..self.len())
            .map(|i| CellDesc {
                id: self.ext_ids[i],
                source: self.node_name(self.source[i]).to_string(),
                sink: self.node_name(self.sink[i]).to_string(),
                turns: self.turns[i]
                    .iter()
                    .map(|t| TurnDesc {
                        to: self.ext_ids[t.to],
                        r_nominal: t.nominal,
                        r_lower: t.lower,
                        r_upper: t.upper,
                    })
                    .collect(),
            })
            .collect();
        NetworkDescription { cells }
    }
}

fn bfs(n: usize, seeds: &[usize], edges: &[Vec<usize>]) -> Vec<bool> {
    let mut seen = vec![false; n];
    let mut queue: Vec<usize> = Vec::new();
    for &s in seeds {
        if !seen[s] {
            seen[s] = true;
            queue.push(s);
        }
    }
    while let Some(i) = queue.pop() {
        for &j in &edges[i] {
            if !seen[j] {
                seen[j] = true;
                queue.push(j);
            }
        }
    }
    seen
}

/// Tight upper bound on the largest eigenvalue magnitude of a square
/// matrix: `||M^(2^k)||_inf^(1/2^k)` by repeated squaring with
/// renormalization. The norm power always dominates the spectral radius
/// and converges to it, so a value below a threshold certifies the radius
/// is below it too.
pub fn spectral_radius<T: Scalar>(m: &DMatrix<T>) -> Result<T, NetworkError> {
    if m.nrows() != m.ncols() {
        return Err(NetworkError::NonSquare(m.nrows(), m.ncols()));
    }
    if m.nrows() == 0 {
        return Ok(T::zero());
    }
    let inf_norm = |b: &DMatrix<T>| {
        (0..b.nrows())
            .map(|i| (0..b.ncols()).fold(T::zero(), |s, j| s + b[(i, j)].abs()))
            .fold(T::zero(), |a, v| if v > a { v } else { a })
    };
    let squarings = 14; // power 2^14 = 16384
    let mut b = m.clone();
    let mut log_est = T::zero();
    let mut weight = T::one();
    for _ in 0..squarings {
        let n = inf_norm(&b);
        if n == T::zero() {
            return Ok(T::zero()); // nilpotent
        }
        log_est += weight * n.ln();
        weight *= lit::<T>(0.5);
        b = (&b / n) * (&b / n);
    }
    log_est += weight * inf_norm(&b).ln();
    Ok(log_est.exp())
}

/// Parameters for the synthetic grid generator.
#[derive(Debug, Clone, Copy)]
pub struct GridParams {
    /// Relative half-width of turning-ratio uncertainty.
    pub delta_r: f64,
    /// Fraction of each cell's outflow that reaches a destination on the
    /// link itself and leaves the network (rows of the turning matrix sum
    /// to `1 - exit_share`).
    pub exit_share: f64,
}

impl Default for GridParams {
    fn default() -> Self {
        GridParams { delta_r: 0.05, exit_share: 0.2 }
    }
}

/// `m x n` grid of intersections, every adjacent pair of nodes joined by one
/// cell each way and every boundary approach attached to the exterior.
/// Nominal splits are uniform over each cell's downstream neighbors, with the
/// opposite lane of the same street excluded (no U-turns).
pub fn grid_network(m: usize, n: usize, params: GridParams) -> Result<Network, NetworkError> {
    let desc = grid_description(m, n, params)?;
    Network::build(&desc)
}

/// The description document underlying [`grid_network`].
pub fn grid_description(m: usize, n: usize, params: GridParams) -> Result<NetworkDescription, NetworkError> {
    if m < 1 || n < 1 {
        return Err(NetworkError::BadDimensions(m, n));
    }
    if !(0.0..1.0).contains(&params.exit_share) {
        return Err(NetworkError::BadExitShare(params.exit_share));
    }
    let node = |r: usize, c: usize| format!("I{}_{}", r + 1, c + 1);

    // (source, sink, partner-index placeholder) per cell; cells come in
    // opposite-lane pairs sharing one street gap.
    let mut ends: Vec<(String, String)> = Vec::new();
    let mut partner: Vec<usize> = Vec::new();
    let push_pair = |ends: &mut Vec<(String, String)>, partner: &mut Vec<usize>, a: String, b: String| {
        let k = ends.len();
        ends.push((a.clone(), b.clone()));
        ends.push((b, a));
        partner.push(k + 1);
        partner.push(k);
    };

    for r in 0..m {
        for gap in 0..=n {
            let left = if gap == 0 { EXTERIOR_NODE.to_string() } else { node(r, gap - 1) };
            let right = if gap == n { EXTERIOR_NODE.to_string() } else { node(r, gap) };
            push_pair(&mut ends, &mut partner, left, right);
        }
    }
    for c in 0..n {
        for gap in 0..=m {
            let top = if gap == 0 { EXTERIOR_NODE.to_string() } else { node(gap - 1, c) };
            let bottom = if gap == m { EXTERIOR_NODE.to_string() } else { node(gap, c) };
            push_pair(&mut ends, &mut partner, top, bottom);
        }
    }

    Ok(build_description(&ends, &partner, params.delta_r, params.exit_share))
}

/// Paper-numbered 24-cell network of two-by-two intersections (Fig. 1
/// layout); useful as a fixed benchmark instance.
pub fn fig1_network(delta_r: f64) -> Network {
    // (source, sink) for cells 1..=24.
    let ends: Vec<(String, String)> = [
        ("O", "I1"), // 1
        ("I1", "O"), // 2
        ("O", "I2"), // 3
        ("I2", "O"), // 4
        ("I1", "O"), // 5
        ("I2", "I1"), // 6
        ("O", "I2"), // 7
        ("O", "I1"), // 8
        ("I1", "I2"), // 9
        ("I2", "O"), // 10
        ("I1", "I3"), // 11
        ("I3", "I1"), // 12
        ("I2", "I4"), // 13
        ("I4", "I2"), // 14
        ("I3", "O"), // 15
        ("I4", "I3"), // 16
        ("O", "I4"), // 17
        ("O", "I3"), // 18
        ("I3", "I4"), // 19
        ("I4", "O"), // 20
        ("I3", "O"), // 21
        ("O", "I3"), // 22
        ("I4", "O"), // 23
        ("O", "I4"), // 24
    ]
    .iter()
    .map(|(a, b)| (a.to_string(), b.to_string()))
    .collect();
    // Opposite-lane pairs, 1-based.
    let pairs: [(usize, usize); 12] = [
        (1, 2),
        (3, 4),
        (8, 5),
        (7, 10),
        (6, 9),
        (12, 11),
        (13, 14),
        (16, 19),
        (18, 15),
        (17, 20),
        (22, 21),
        (24, 23),
    ];
    let mut partner = vec![usize::MAX; 24];
    for &(a, b) in &pairs {
        partner[a - 1] = b - 1;
        partner[b - 1] = a - 1;
    }
    let desc = build_description(&ends, &partner, delta_r, 0.0);
    Network::build(&desc).expect("fig1 network is valid")
}

fn build_description(
    ends: &[(String, String)],
    partner: &[usize],
    delta_r: f64,
    exit_share: f64,
) -> NetworkDescription {
    let n = ends.len();
    let cells = (0..n)
        .map(|i| {
            let (ref src, ref snk) = ends[i];
            let turns = if snk == EXTERIOR_NODE {
                Vec::new()
            } else {
                let downstream: Vec<usize> = (0..n)
                    .filter(|&j| j != partner[i] && ends[j].0 == *snk)
                    .collect();
                let nominal = (1.0 - exit_share) / downstream.len() as f64;
                downstream
                    .into_iter()
                    .map(|j| TurnDesc {
                        to: (j + 1) as u32,
                        r_nominal: nominal,
                        r_lower: (nominal * (1.0 - delta_r)).max(0.0),
                        r_upper: (nominal * (1.0 + delta_r)).min(1.0),
                    })
                    .collect()
            };
            CellDesc {
                id: (i + 1) as u32,
                source: src.clone(),
                sink: snk.clone(),
                turns,
            }
        })
        .collect();
    NetworkDescription { cells }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tandem() -> NetworkDescription {
        NetworkDescription {
            cells: vec![
                CellDesc {
                    id: 1,
                    source: "O".into(),
                    sink: "I1".into(),
                    turns: vec![TurnDesc {
                        to: 2,
                        r_nominal: 1.0,
                        r_lower: 1.0,
                        r_upper: 1.0,
                    }],
                },
                CellDesc {
                    id: 2,
                    source: "I1".into(),
                    sink: "O".into(),
                    turns: vec![],
                },
            ],
        }
    }

    #[test]
    fn fig1_has_24_cells_and_4_intersections() {
        let net = fig1_network(0.05);
        assert_eq!(net.len(), 24);
        assert_eq!(net.intersection_count(), 4);
    }

    #[test]
    fn fig1_cell6_neighbor_sets() {
        let net = fig1_network(0.05);
        let (down, up, same) = net.neighbor_sets(6).unwrap();
        assert_eq!(down, vec![2, 5, 11]);
        assert_eq!(up, vec![3, 7, 14]);
        assert_eq!(same, vec![1, 6, 8, 12]);
    }

    #[test]
    fn single_pass_through_cell_is_valid() {
        let desc = NetworkDescription {
            cells: vec![CellDesc {
                id: 1,
                source: "O".into(),
                sink: "O".into(),
                turns: vec![],
            }],
        };
        let net = Network::build(&desc).unwrap();
        let (down, up, same) = net.neighbor_sets(1).unwrap();
        assert!(down.is_empty() && up.is_empty() && same.is_empty());
    }

    #[test]
    fn two_cell_cycle_without_exterior_is_unreachable() {
        let desc = NetworkDescription {
            cells: vec![
                CellDesc {
                    id: 1,
                    source: "I2".into(),
                    sink: "I1".into(),
                    turns: vec![TurnDesc {
                        to: 2,
                        r_nominal: 1.0,
                        r_lower: 1.0,
                        r_upper: 1.0,
                    }],
                },
                CellDesc {
                    id: 2,
                    source: "I1".into(),
                    sink: "I2".into(),
                    turns: vec![TurnDesc {
                        to: 1,
                        r_nominal: 1.0,
                        r_lower: 1.0,
                        r_upper: 1.0,
                    }],
                },
            ],
        };
        assert!(matches!(
            Network::build(&desc),
            Err(NetworkError::UnreachableCell(_))
        ));
    }

    #[test]
    fn substochastic_row_is_accepted() {
        let mut desc = tandem();
        desc.cells[0].turns[0].r_nominal = 0.7;
        desc.cells[0].turns[0].r_lower = 0.6;
        desc.cells[0].turns[0].r_upper = 0.75;
        assert!(Network::build(&desc).is_ok());
    }

    #[test]
    fn superstochastic_row_is_rejected() {
        let desc = NetworkDescription {
            cells: vec![
                CellDesc {
                    id: 1,
                    source: "O".into(),
                    sink: "I1".into(),
                    turns: vec![
                        TurnDesc { to: 2, r_nominal: 0.7, r_lower: 0.7, r_upper: 0.7 },
                        TurnDesc { to: 3, r_nominal: 0.5, r_lower: 0.5, r_upper: 0.5 },
                    ],
                },
                CellDesc { id: 2, source: "I1".into(), sink: "O".into(), turns: vec![] },
                CellDesc { id: 3, source: "I1".into(), sink: "O".into(), turns: vec![] },
            ],
        };
        assert!(matches!(
            Network::build(&desc),
            Err(NetworkError::BadRowSum(1, _))
        ));
    }

    #[test]
    fn non_adjacent_turn_is_rejected() {
        let mut desc = tandem();
        desc.cells.push(CellDesc {
            id: 3,
            source: "O".into(),
            sink: "O".into(),
            turns: vec![],
        });
        desc.cells[0].turns.push(TurnDesc {
            to: 3,
            r_nominal: 0.0,
            r_lower: 0.0,
            r_upper: 0.0,
        });
        assert!(matches!(
            Network::build(&desc),
            Err(NetworkError::InconsistentEdge { .. })
        ));
    }

    #[test]
    fn tandem_neighbor_sets() {
        let net = Network::build(&tandem()).unwrap();
        let (down, up, same) = net.neighbor_sets(1).unwrap();
        assert_eq!(down, vec![2]);
        assert!(up.is_empty());
        assert_eq!(same, vec![1]);
        assert!(matches!(
            net.neighbor_sets(9),
            Err(NetworkError::UnknownCell(9))
        ));
    }

    #[test]
    fn tandem_turning_matrices() {
        let net = Network::build(&tandem()).unwrap();
        let (r, _, _, g) = net.turning_matrices::<f64>();
        assert_eq!(r, DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 0.0, 0.0]));
        assert_eq!(g, DMatrix::from_row_slice(2, 2, &[1.0, -1.0, 0.0, 1.0]));
        // nilpotent chain
        assert!(spectral_radius(&r).unwrap() < 1e-12);
    }

    #[test]
    fn g_times_inverse_is_identity() {
        let net = fig1_network(0.05);
        let (_, _, _, g) = net.turning_matrices::<f64>();
        let ginv = g.clone().try_inverse().unwrap();
        let err = (&g * &ginv - DMatrix::<f64>::identity(24, 24)).abs().max();
        assert!(err < 1e-12);
    }

    #[test]
    fn spectral_radius_identity_and_nonsquare() {
        assert!((spectral_radius(&DMatrix::<f64>::identity(3, 3)).unwrap() - 1.0).abs() < 1e-10);
        let rect = DMatrix::<f64>::zeros(2, 3);
        assert!(matches!(
            spectral_radius(&rect),
            Err(NetworkError::NonSquare(2, 3))
        ));
    }

    #[test]
    fn fig1_spectral_radius_below_one() {
        let net = fig1_network(0.05);
        let (r, _, _, _) = net.turning_matrices::<f64>();
        let rho = spectral_radius(&r).unwrap();
        assert!(rho < 1.0 - 1e-9, "rho = {rho}");
    }

    #[test]
    fn grid_counts() {
        let g22 = grid_network(2, 2, GridParams::default()).unwrap();
        assert_eq!(g22.len(), 24);
        assert_eq!(g22.intersection_count(), 4);
        let g11 = grid_network(1, 1, GridParams::default()).unwrap();
        assert_eq!(g11.len(), 8);
        assert_eq!(g11.intersection_count(), 1);
        let g25 = grid_network(2, 5, GridParams::default()).unwrap();
        assert_eq!(g25.len(), 2 * (2 * 6 + 5 * 3));
        assert_eq!(g25.intersection_count(), 10);
        assert!(matches!(
            grid_network(0, 3, GridParams::default()),
            Err(NetworkError::BadDimensions(0, 3))
        ));
    }

    #[test]
    fn grids_build_for_all_small_dimensions() {
        for m in 1..=20 {
            for n in 1..=20 {
                grid_network(m, n, GridParams::default()).unwrap();
            }
        }
    }

    #[test]
    fn description_round_trip() {
        let desc = grid_description(2, 3, GridParams::default()).unwrap();
        let json = desc.to_json();
        let back = NetworkDescription::from_json(&json).unwrap();
        let net = Network::build(&back).unwrap();
        assert_eq!(net.len(), Network::build(&desc).unwrap().len());
        let desc2 = net.to_description();
        assert_eq!(desc2.to_json(), json);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn random_valid_networks_have_substochastic_radius(
            m in 1usize..5, n in 1usize..5, seed in 0u64..1000, delta in 0.0f64..0.3
        ) {
            let mut desc = grid_description(m, n, GridParams { delta_r: delta, ..GridParams::default() }).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            desc.randomize_splits(delta, &mut rng);
            let net = Network::build(&desc).unwrap();
            let (r, _, _, g) = net.turning_matrices::<f64>();
            prop_assert!(spectral_radius(&r).unwrap() < 1.0 - 1e-9);
            // G is nonsingular: solving against every basis vector succeeds
            let lu = g.lu();
            let id = DMatrix::<f64>::identity(net.len(), net.len());
            prop_assert!(lu.solve(&id).is_some());
        }
    }
}
