//! Distributed per-cell agents solving the cycle program by neighbor
//! message exchange.
//!
//! Each cell runs the same deterministic state machine: learn annihilating
//! coefficients for its zeta- and flow-recursions, agree on the sweep count
//! `D_max` by flood-max, then iterate outer rounds of
//! `D_max - 1` Jacobi sweeps shortened by final-value computation, a
//! finals exchange with verification, projected multiplier updates, and a
//! flood of multiplier values, stop votes and violation notices.
//! Everything an agent reads comes from its own state or messages from
//! communication-graph neighbors.

use std::collections::HashMap;

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::ctm::{CellParams, ProblemData};
use crate::final_value::{final_value_from, HankelDetector};
use crate::network::{CellId, Network, NodeId};
use crate::qp::{ALPHA, BETA, GAMMA, LAMBDA, MULTS_PER_CELL, NU, THETA};
use crate::wire::Record;

#[derive(Debug, Error)]
pub enum DistributedError {
    #[error("agent {agent} round {round}: protocol violation: {detail}")]
    ProtocolViolation { agent: u32, round: usize, detail: String },
    #[error("agent {agent}: no Hankel defect within the sweep cap")]
    LearningFailed { agent: u32 },
    #[error("no convergence within {0} outer iterations")]
    NonConvergence(usize),
    #[error("message between non-neighbors {from} -> {to}")]
    NonNeighborTraffic { from: u32, to: u32 },
    #[error("communication graph is disconnected")]
    Disconnected,
}

#[derive(Debug, Clone, PartialEq)]
pub enum MsgBody {
    ZetaValue(f64),
    FlowValue(f64),
    EtaValues([f64; MULTS_PER_CELL]),
    /// Finalized `(zeta*, f*)` of the sender.
    FinalValues { zeta: f64, flow: f64 },
    ViolationNotice,
    DmaxBroadcast(usize),
    StopVote(bool),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Message {
    pub from: CellId,
    pub to: CellId,
    pub body: MsgBody,
}

impl MsgBody {
    pub fn kind(&self) -> u8 {
        match self {
            MsgBody::ZetaValue(_) => 0,
            MsgBody::FlowValue(_) => 1,
            MsgBody::EtaValues(_) => 2,
            MsgBody::FinalValues { .. } => 3,
            MsgBody::ViolationNotice => 4,
            MsgBody::DmaxBroadcast(_) => 5,
            MsgBody::StopVote(_) => 6,
        }
    }
}

impl Message {
    /// Wire encoding with external cell ids; `to` travels as the first
    /// payload slot so a byte transport can route it.
    pub fn to_record(&self, net: &Network) -> Record {
        let mut payload = vec![net.external_id(self.to) as f64];
        match &self.body {
            MsgBody::ZetaValue(v) | MsgBody::FlowValue(v) => payload.push(*v),
            MsgBody::EtaValues(e) => payload.extend_from_slice(e),
            MsgBody::FinalValues { zeta, flow } => payload.extend_from_slice(&[*zeta, *flow]),
            MsgBody::ViolationNotice => {}
            MsgBody::DmaxBroadcast(d) => payload.push(*d as f64),
            MsgBody::StopVote(b) => payload.push(if *b { 1.0 } else { 0.0 }),
        }
        Record { sender: net.external_id(self.from), kind: self.body.kind(), payload }
    }

    pub fn from_record(rec: &Record, net: &Network) -> Option<Message> {
        let from = net.index_of(rec.sender).ok()?;
        let to = net.index_of(*rec.payload.first()? as u32).ok()?;
        let p = &rec.payload[1..];
        let body = match rec.kind {
            0 => MsgBody::ZetaValue(*p.first()?),
            1 => MsgBody::FlowValue(*p.first()?),
            2 => MsgBody::EtaValues(<[f64; MULTS_PER_CELL]>::try_from(p).ok()?),
            3 => MsgBody::FinalValues { zeta: *p.first()?, flow: *p.get(1)? },
            4 => MsgBody::ViolationNotice,
            5 => MsgBody::DmaxBroadcast(*p.first()? as usize),
            6 => MsgBody::StopVote(*p.first()? != 0.0),
            _ => return None,
        };
        Some(Message { from, to, body })
    }
}

/// Synchronous round-based transport that only lets messages travel along
/// communication-graph edges.
pub struct SyncBus {
    neighbors: Vec<Vec<usize>>, // sorted, no self
    ext_ids: Vec<u32>,
}

impl SyncBus {
    pub fn new(net: &Network) -> Self {
        let n = net.len();
        let mut neighbors = vec![Vec::new(); n];
        for i in 0..n {
            let cell = CellId(i);
            let mut set: Vec<usize> = net
                .downstream(cell)
                .chain(net.upstream(cell))
                .chain(net.same_sink(cell))
                .map(|c| c.0)
                .filter(|&j| j != i)
                .collect();
            set.sort_unstable();
            set.dedup();
            neighbors[i] = set;
        }
        let ext_ids = (0..n).map(|i| net.external_id(CellId(i))).collect();
        SyncBus { neighbors, ext_ids }
    }

    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.neighbors[i]
    }

    /// Longest shortest path in the communication graph.
    pub fn diameter(&self) -> Result<usize, DistributedError> {
        let n = self.neighbors.len();
        let mut diameter = 0;
        for start in 0..n {
            let mut dist = vec![usize::MAX; n];
            dist[start] = 0;
            let mut queue = std::collections::VecDeque::from([start]);
            while let Some(u) = queue.pop_front() {
                for &v in &self.neighbors[u] {
                    if dist[v] == usize::MAX {
                        dist[v] = dist[u] + 1;
                        queue.push_back(v);
                    }
                }
            }
            let ecc = dist.iter().copied().max().unwrap_or(0);
            if ecc == usize::MAX {
                if n > 1 {
                    return Err(DistributedError::Disconnected);
                }
                continue;
            }
            diameter = diameter.max(ecc);
        }
        Ok(diameter)
    }

    /// Route one round of traffic; rejects non-edge messages.
    pub fn route(&self, outbox: Vec<Message>) -> Result<Vec<Vec<Message>>, DistributedError> {
        let mut inboxes = vec![Vec::new(); self.neighbors.len()];
        for msg in outbox {
            if !self.neighbors[msg.from.0].contains(&msg.to.0) {
                return Err(DistributedError::NonNeighborTraffic {
                    from: self.ext_ids[msg.from.0],
                    to: self.ext_ids[msg.to.0],
                });
            }
            inboxes[msg.to.0].push(msg);
        }
        Ok(inboxes)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ProtocolConfig {
    /// Shared dual step size (provisioned centrally, like the step bound).
    pub epsilon: f64,
    /// Local stopping threshold on `||eta_i(k+1) - eta_i(k)||_inf`.
    pub delta: f64,
    /// Rounds granted to each learning phase.
    pub sweep_cap: usize,
    pub max_outer: usize,
    pub seed: u64,
    /// Relative tolerance of the finals verification check.
    pub verify_tol: f64,
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        ProtocolConfig {
            epsilon: 0.0,
            delta: 1e-10,
            sweep_cap: 0,
            max_outer: 50_000,
            seed: 0,
            verify_tol: 1e-6,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Phase {
    LearnZeta,
    LearnFlow,
    FloodMax,
    SweepZeta,
    SweepFlow,
    Exchange,
    Flood,
    Done,
}

/// Static data an agent holds about one neighbor relationship.
#[derive(Debug, Clone)]
struct DownstreamEdge {
    j: usize,
    r_nominal: f64, // r_ij
    r_lower: f64,
    r_upper: f64,
}

#[derive(Debug, Clone)]
struct UpstreamEdge {
    j: usize,
    r_nominal: f64, // r_ji
    r_lower: f64,
    r_upper: f64,
}

pub struct AgentState {
    id: usize,
    ext_id: u32,
    // own problem constants
    a: f64,
    b: f64,
    w: f64,
    x0: f64,
    x_lower: f64,
    x_upper: f64,
    f_upper: f64,
    s_upper: f64,
    v: f64,
    cycle_time: f64,
    is_destination: bool,
    downstream: Vec<DownstreamEdge>,
    upstream: Vec<UpstreamEdge>,
    /// Cells sharing this cell's sink (incl. self) with their green factors.
    same_sink: Vec<(usize, f64)>,
    comm_neighbors: Vec<usize>,
    diameter: usize,

    pub eta: [f64; MULTS_PER_CELL],
    eta_prev: [f64; MULTS_PER_CELL],
    neighbor_eta: HashMap<usize, [f64; MULTS_PER_CELL]>,
    neighbor_final: HashMap<usize, (f64, f64)>,

    phase: Phase,
    k: usize,
    round: usize,
    outer_k: usize,
    epoch: u64,
    value: f64,
    window: Vec<f64>,
    detector: HankelDetector<f64>,
    theta_zeta: Option<DVector<f64>>,
    theta_flow: Option<DVector<f64>>,
    pub d_own: usize,
    pub d_own_flow: usize,
    d_local_max: usize,
    pub d_max: usize,
    zeta_star: f64,
    x_star: f64,
    pub f_star: f64,
    stop_vote: bool,
    violation: bool,
    finalizing: bool,
}

fn mix_seed(seed: u64, id: usize, epoch: u64, outer: usize, tag: u64) -> u64 {
    // splitmix-style scramble of the run seed with the agent/phase context
    let mut x = seed
        ^ (id as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ epoch.wrapping_mul(0xBF58_476D_1CE4_E5B9)
        ^ (outer as u64).wrapping_mul(0x94D0_49BB_1331_11EB)
        ^ tag;
    x ^= x >> 30;
    x = x.wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x ^= x >> 27;
    x = x.wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

impl AgentState {
    pub fn build(
        net: &Network,
        pd: &ProblemData<f64>,
        params: &[CellParams<f64>],
        bus: &SyncBus,
        diameter: usize,
        i: usize,
    ) -> AgentState {
        let cell = CellId(i);
        let downstream = net
            .downstream(cell)
            .map(|j| DownstreamEdge {
                j: j.0,
                r_nominal: net.ratio_nominal(cell, j),
                r_lower: net.ratio_lower(cell, j),
                r_upper: net.ratio_upper(cell, j),
            })
            .collect();
        let upstream = net
            .upstream(cell)
            .map(|j| UpstreamEdge {
                j: j.0,
                r_nominal: net.ratio_nominal(j, cell),
                r_lower: net.ratio_lower(j, cell),
                r_upper: net.ratio_upper(j, cell),
            })
            .collect();
        let is_destination = net.sink(cell) == NodeId::Exterior;
        let same_sink = if is_destination {
            Vec::new()
        } else {
            net.same_sink(cell).map(|j| (j.0, pd.v[j.0])).collect()
        };
        AgentState {
            id: i,
            ext_id: net.external_id(cell),
            a: params[i].a,
            b: params[i].b,
            w: params[i].w,
            x0: pd.x0[i],
            x_lower: pd.x_lower[i],
            x_upper: pd.x_upper[i],
            f_upper: pd.f_upper[i],
            s_upper: pd.s_upper[i],
            v: pd.v[i],
            cycle_time: pd.cycle_time,
            is_destination,
            downstream,
            upstream,
            same_sink,
            comm_neighbors: bus.neighbors(i).to_vec(),
            diameter,
            eta: [0.0; MULTS_PER_CELL],
            eta_prev: [0.0; MULTS_PER_CELL],
            neighbor_eta: HashMap::new(),
            neighbor_final: HashMap::new(),
            phase: Phase::LearnZeta,
            k: 0,
            round: 0,
            outer_k: 0,
            epoch: 0,
            value: 0.0,
            window: Vec::new(),
            detector: HankelDetector::new(),
            theta_zeta: None,
            theta_flow: None,
            d_own: 0,
            d_own_flow: 0,
            d_local_max: 0,
            d_max: 0,
            zeta_star: 0.0,
            x_star: 0.0,
            f_star: 0.0,
            stop_vote: false,
            violation: false,
            finalizing: false,
        }
    }

    pub fn is_done(&self) -> bool {
        self.phase == Phase::Done
    }

    /// True in the round right after a multiplier update (used by tests to
    /// snapshot the outer-iteration sequence).
    pub fn just_updated_eta(&self) -> bool {
        self.phase == Phase::Flood && self.k == 0
    }

    /// Damage the learned zeta coefficients (fault-injection hook).
    pub fn corrupt_theta(&mut self) {
        if let Some(theta) = self.theta_zeta.as_mut() {
            for v in theta.iter_mut() {
                *v += 0.37;
            }
        }
    }

    fn neighbor_eta(&self, j: usize) -> [f64; MULTS_PER_CELL] {
        self.neighbor_eta.get(&j).copied().unwrap_or([0.0; MULTS_PER_CELL])
    }

    /// Stationarity constant `h_i(eta)` from own and neighbor multipliers.
    fn h_value(&self) -> f64 {
        let mut h = self.w + self.eta[LAMBDA] - self.eta[THETA] - self.eta[ALPHA]
            + self.eta[BETA];
        for e in &self.downstream {
            let ne = self.neighbor_eta(e.j);
            h += -e.r_lower * ne[LAMBDA] + e.r_upper * (ne[THETA] + ne[NU]);
        }
        if !self.is_destination {
            let gamma_sum: f64 = self
                .same_sink
                .iter()
                .map(|&(j, _)| if j == self.id { self.eta[GAMMA] } else { self.neighbor_eta(j)[GAMMA] })
                .sum();
            h += self.v * gamma_sum;
        }
        h
    }

    /// One synchronous zeta sweep from downstream neighbor values.
    pub fn jacobi_zeta_step(
        &self,
        neighbor_zeta: &HashMap<usize, f64>,
    ) -> Result<f64, DistributedError> {
        let mut acc = self.h_value();
        for e in &self.downstream {
            let zj = neighbor_zeta.get(&e.j).ok_or_else(|| self.violation_err(
                format!("missing zeta value from neighbor {}", e.j),
            ))?;
            acc += e.r_nominal * zj;
        }
        Ok(acc)
    }

    /// One synchronous flow sweep from upstream neighbor values.
    pub fn jacobi_flow_step(
        &self,
        neighbor_flow: &HashMap<usize, f64>,
    ) -> Result<f64, DistributedError> {
        let mut acc = self.x0 - self.x_star;
        for e in &self.upstream {
            let fj = neighbor_flow.get(&e.j).ok_or_else(|| self.violation_err(
                format!("missing flow value from neighbor {}", e.j),
            ))?;
            acc += e.r_nominal * fj;
        }
        Ok(acc)
    }

    /// Projected update of the six own multipliers from finalized flows.
    pub fn eta_step(
        &self,
        epsilon: f64,
        own_f: f64,
        neighbor_f: &HashMap<usize, f64>,
    ) -> Result<[f64; MULTS_PER_CELL], DistributedError> {
        let get = |j: usize| -> Result<f64, DistributedError> {
            if j == self.id {
                Ok(own_f)
            } else {
                neighbor_f.get(&j).copied().ok_or_else(|| self.violation_err(
                    format!("missing final flow from neighbor {}", j),
                ))
            }
        };
        let mut inflow_lower = 0.0;
        let mut inflow_upper = 0.0;
        for e in &self.upstream {
            let fj = get(e.j)?;
            inflow_lower += e.r_lower * fj;
            inflow_upper += e.r_upper * fj;
        }
        let mut g = [0.0; MULTS_PER_CELL];
        g[LAMBDA] = own_f - inflow_lower - self.x_lower;
        g[THETA] = -own_f + inflow_upper - self.x_upper;
        g[ALPHA] = -own_f;
        g[BETA] = own_f - self.f_upper;
        g[NU] = inflow_upper - self.s_upper;
        if !self.is_destination {
            let mut green = 0.0;
            for &(j, vj) in &self.same_sink {
                green += vj * get(j)?;
            }
            g[GAMMA] = green - self.cycle_time;
        }
        let mut next = self.eta;
        for c in 0..MULTS_PER_CELL {
            next[c] = (next[c] + epsilon * g[c]).max(0.0);
        }
        if self.is_destination {
            next[GAMMA] = 0.0;
        }
        Ok(next)
    }

    fn violation_err(&self, detail: String) -> DistributedError {
        DistributedError::ProtocolViolation { agent: self.ext_id, round: self.round, detail }
    }

    fn broadcast(&self, body: MsgBody) -> Vec<Message> {
        self.comm_neighbors
            .iter()
            .map(|&j| Message { from: CellId(self.id), to: CellId(j), body: body.clone() })
            .collect()
    }

    fn rand_init(&self, tag: u64) -> f64 {
        let mut rng =
            ChaCha8Rng::seed_from_u64(mix_seed(0, self.id, self.epoch, self.outer_k, tag));
        rng.gen::<f64>()
    }

    fn inbox_values(inbox: &[Message], want_zeta: bool) -> HashMap<usize, f64> {
        let mut out = HashMap::new();
        for m in inbox {
            match (&m.body, want_zeta) {
                (MsgBody::ZetaValue(v), true) | (MsgBody::FlowValue(v), false) => {
                    out.insert(m.from.0, *v);
                }
                _ => {}
            }
        }
        out
    }

    fn enter_learn_zeta(&mut self, cfg: &ProtocolConfig) -> Vec<Message> {
        self.phase = Phase::LearnZeta;
        self.k = 0;
        self.detector = HankelDetector::new();
        self.theta_zeta = None;
        self.theta_flow = None;
        self.value = self.rand_init(cfg.seed ^ 0x5a);
        self.detector.observe(self.value);
        self.broadcast(MsgBody::ZetaValue(self.value))
    }

    fn enter_learn_flow(&mut self, cfg: &ProtocolConfig) -> Vec<Message> {
        self.phase = Phase::LearnFlow;
        self.k = 0;
        self.detector = HankelDetector::new();
        self.value = self.rand_init(cfg.seed ^ 0xf1);
        self.detector.observe(self.value);
        self.broadcast(MsgBody::FlowValue(self.value))
    }

    fn enter_flood_max(&mut self) -> Vec<Message> {
        self.phase = Phase::FloodMax;
        self.k = 0;
        self.d_local_max = self.d_own.max(self.d_own_flow);
        self.broadcast(MsgBody::DmaxBroadcast(self.d_local_max))
    }

    fn enter_sweep_zeta(&mut self, cfg: &ProtocolConfig) -> Vec<Message> {
        self.phase = Phase::SweepZeta;
        self.k = 0;
        self.value = self.rand_init(cfg.seed ^ 0x2b);
        self.window = vec![self.value];
        self.broadcast(MsgBody::ZetaValue(self.value))
    }

    fn enter_sweep_flow(&mut self, cfg: &ProtocolConfig) -> Vec<Message> {
        self.phase = Phase::SweepFlow;
        self.k = 0;
        self.value = self.rand_init(cfg.seed ^ 0x77);
        self.window = vec![self.value];
        self.broadcast(MsgBody::FlowValue(self.value))
    }

    fn finalize_window(
        &self,
        theta: &DVector<f64>,
    ) -> Result<f64, DistributedError> {
        final_value_from(theta, &self.window).map_err(|e| self.violation_err(e.to_string()))
    }

    fn verify_finals(&self, cfg: &ProtocolConfig) -> bool {
        // both recursion balances must hold at the exchanged finals
        let mut zeta_rhs = self.h_value();
        let mut flow_rhs = self.x0 - self.x_star;
        for e in &self.downstream {
            match self.neighbor_final.get(&e.j) {
                Some(&(zj, _)) => zeta_rhs += e.r_nominal * zj,
                None => return false,
            }
        }
        for e in &self.upstream {
            match self.neighbor_final.get(&e.j) {
                Some(&(_, fj)) => flow_rhs += e.r_nominal * fj,
                None => return false,
            }
        }
        let scale = 1.0 + self.zeta_star.abs().max(self.f_star.abs());
        (self.zeta_star - zeta_rhs).abs() <= cfg.verify_tol * scale
            && (self.f_star - flow_rhs).abs() <= cfg.verify_tol * scale
    }

    /// Process one synchronous round: consume the inbox, advance the phase
    /// machine, emit the outbox.
    pub fn agent_round(
        &mut self,
        inbox: &[Message],
        cfg: &ProtocolConfig,
    ) -> Result<Vec<Message>, DistributedError> {
        self.round += 1;
        let out = match self.phase {
            Phase::LearnZeta | Phase::SweepZeta => {
                let vals = Self::inbox_values(inbox, true);
                self.value = self.jacobi_zeta_step(&vals)?;
                self.k += 1;
                if self.phase == Phase::LearnZeta {
                    self.detector.observe(self.value);
                    if self.k == cfg.sweep_cap {
                        let theta = self
                            .detector
                            .theta()
                            .ok_or(DistributedError::LearningFailed { agent: self.ext_id })?
                            .clone();
                        self.d_own = self.detector.observations();
                        self.zeta_star = self
                            .detector
                            .final_value()
                            .expect("theta present")
                            .map_err(|e| self.violation_err(e.to_string()))?;
                        self.x_star = (self.zeta_star - self.b) / (2.0 * self.a);
                        self.theta_zeta = Some(theta);
                        self.enter_learn_flow(cfg)
                    } else {
                        self.broadcast(MsgBody::ZetaValue(self.value))
                    }
                } else {
                    self.window.push(self.value);
                    if self.k == self.d_max - 1 {
                        let theta = self.theta_zeta.clone().expect("learned");
                        self.window.truncate(theta.len() + 1);
                        self.zeta_star = self.finalize_window(&theta)?;
                        self.x_star = (self.zeta_star - self.b) / (2.0 * self.a);
                        self.enter_sweep_flow(cfg)
                    } else {
                        self.broadcast(MsgBody::ZetaValue(self.value))
                    }
                }
            }
            Phase::LearnFlow | Phase::SweepFlow => {
                let vals = Self::inbox_values(inbox, false);
                self.value = self.jacobi_flow_step(&vals)?;
                self.k += 1;
                if self.phase == Phase::LearnFlow {
                    self.detector.observe(self.value);
                    if self.k == cfg.sweep_cap {
                        let theta = self
                            .detector
                            .theta()
                            .ok_or(DistributedError::LearningFailed { agent: self.ext_id })?
                            .clone();
                        self.d_own_flow = self.detector.observations();
                        self.theta_flow = Some(theta);
                        self.enter_flood_max()
                    } else {
                        self.broadcast(MsgBody::FlowValue(self.value))
                    }
                } else {
                    self.window.push(self.value);
                    if self.k == self.d_max - 1 {
                        let theta = self.theta_flow.clone().expect("learned");
                        self.window.truncate(theta.len() + 1);
                        self.f_star = self.finalize_window(&theta)?;
                        if self.finalizing {
                            self.phase = Phase::Done;
                            Vec::new()
                        } else {
                            self.phase = Phase::Exchange;
                            self.k = 0;
                            self.neighbor_final.clear();
                            self.broadcast(MsgBody::FinalValues {
                                zeta: self.zeta_star,
                                flow: self.f_star,
                            })
                        }
                    } else {
                        self.broadcast(MsgBody::FlowValue(self.value))
                    }
                }
            }
            Phase::FloodMax => {
                for m in inbox {
                    if let MsgBody::DmaxBroadcast(d) = m.body {
                        self.d_local_max = self.d_local_max.max(d);
                    }
                }
                self.k += 1;
                if self.k == self.diameter + 1 {
                    self.d_max = self.d_local_max.max(2);
                    self.enter_sweep_zeta(cfg)
                } else {
                    self.broadcast(MsgBody::DmaxBroadcast(self.d_local_max))
                }
            }
            Phase::Exchange => {
                for m in inbox {
                    if let MsgBody::FinalValues { zeta, flow } = m.body {
                        self.neighbor_final.insert(m.from.0, (zeta, flow));
                    }
                }
                self.violation = !self.verify_finals(cfg);
                let neighbor_f: HashMap<usize, f64> =
                    self.neighbor_final.iter().map(|(&j, &(_, f))| (j, f)).collect();
                if !self.violation {
                    self.eta_prev = self.eta;
                    self.eta = self.eta_step(cfg.epsilon, self.f_star, &neighbor_f)?;
                }
                self.stop_vote = !self.violation
                    && self
                        .eta
                        .iter()
                        .zip(self.eta_prev.iter())
                        .all(|(a, b)| (a - b).abs() < cfg.delta);
                self.phase = Phase::Flood;
                self.k = 0;
                let mut out = self.broadcast(MsgBody::EtaValues(self.eta));
                out.extend(self.broadcast(MsgBody::StopVote(self.stop_vote)));
                if self.violation {
                    out.extend(self.broadcast(MsgBody::ViolationNotice));
                }
                out
            }
            Phase::Flood => {
                for m in inbox {
                    match m.body {
                        MsgBody::EtaValues(e) => {
                            self.neighbor_eta.insert(m.from.0, e);
                        }
                        MsgBody::StopVote(v) => self.stop_vote &= v,
                        MsgBody::ViolationNotice => self.violation = true,
                        _ => {}
                    }
                }
                self.k += 1;
                if self.k == self.diameter + 1 {
                    if self.violation {
                        self.epoch += 1;
                        self.violation = false;
                        self.enter_learn_zeta(cfg)
                    } else if self.stop_vote {
                        self.finalizing = true;
                        self.enter_sweep_zeta(cfg)
                    } else {
                        self.outer_k += 1;
                        self.enter_sweep_zeta(cfg)
                    }
                } else {
                    let mut out = self.broadcast(MsgBody::StopVote(self.stop_vote));
                    if self.violation {
                        out.extend(self.broadcast(MsgBody::ViolationNotice));
                    }
                    out
                }
            }
            Phase::Done => Vec::new(),
        };
        Ok(out)
    }

    fn start(&mut self, cfg: &ProtocolConfig) -> Vec<Message> {
        self.enter_learn_zeta(cfg)
    }
}

#[derive(Debug, Clone)]
pub struct DistributedReport {
    pub f: DVector<f64>,
    pub x: DVector<f64>,
    pub zeta: DVector<f64>,
    pub eta: DVector<f64>,
    pub outer_iterations: usize,
    pub rounds: usize,
    pub d_max: usize,
    pub recoveries: u64,
}

/// Optional test hook mutating each round's traffic before delivery.
pub type FaultHook<'a> = &'a mut dyn FnMut(usize, &mut Vec<Message>);

/// Run the full agent protocol on a network; agents only ever see messages
/// from their communication neighbors.
pub fn distributed_solve(
    net: &Network,
    pd: &ProblemData<f64>,
    params: &[CellParams<f64>],
    cfg: &ProtocolConfig,
) -> Result<DistributedReport, DistributedError> {
    run_protocol(net, pd, params, cfg, None, |_| {})
}

/// As [`distributed_solve`], with a fault-injection hook on the bus and a
/// per-round observer over agent states.
pub fn run_protocol(
    net: &Network,
    pd: &ProblemData<f64>,
    params: &[CellParams<f64>],
    cfg: &ProtocolConfig,
    mut fault: Option<FaultHook<'_>>,
    mut observe: impl FnMut(&[AgentState]),
) -> Result<DistributedReport, DistributedError> {
    let n = net.len();
    let bus = SyncBus::new(net);
    let diameter = bus.diameter()?;
    let mut cfg = *cfg;
    if cfg.sweep_cap == 0 {
        cfg.sweep_cap = 2 * n + 4;
    }
    let mut agents: Vec<AgentState> = (0..n)
        .map(|i| AgentState::build(net, pd, params, &bus, diameter, i))
        .collect();

    let mut traffic: Vec<Message> =
        agents.iter_mut().flat_map(|a| a.start(&cfg)).collect();
    let mut rounds = 0usize;
    // every outer iteration costs at most two sweep phases plus the
    // exchange/flood rounds; learning phases and recoveries add slack
    let round_cap = cfg
        .max_outer
        .saturating_mul(2 * (2 * n + 4) + diameter + 4)
        .saturating_add(16 * (cfg.sweep_cap + diameter + 4));

    loop {
        if let Some(hook) = fault.as_mut() {
            hook(rounds, &mut traffic);
        }
        let inboxes = bus.route(traffic)?;
        traffic = Vec::new();
        for (agent, inbox) in agents.iter_mut().zip(&inboxes) {
            traffic.extend(agent.agent_round(inbox, &cfg)?);
        }
        observe(&agents);
        rounds += 1;
        if agents.iter().all(|a| a.is_done()) {
            break;
        }
        if rounds > round_cap || agents[0].outer_k >= cfg.max_outer {
            return Err(DistributedError::NonConvergence(cfg.max_outer));
        }
    }

    let f = DVector::from_fn(n, |i, _| agents[i].f_star);
    let zeta = DVector::from_fn(n, |i, _| agents[i].zeta_star);
    let x = DVector::from_fn(n, |i, _| agents[i].x_star);
    let mut eta = DVector::zeros(MULTS_PER_CELL * n);
    for (i, a) in agents.iter().enumerate() {
        for c in 0..MULTS_PER_CELL {
            eta[MULTS_PER_CELL * i + c] = a.eta[c];
        }
    }
    Ok(DistributedReport {
        f,
        x,
        zeta,
        eta,
        outer_iterations: agents[0].outer_k,
        rounds,
        d_max: agents[0].d_max,
        recoveries: agents.iter().map(|a| a.epoch).max().unwrap_or(0),
    })
}
