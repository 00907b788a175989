//! Power packet grid: a tree of BSs rooted at the energy router, resistive
//! attenuation, unique routes and the mini-slot transfer scheduler.
//!
//! BS ids are `0..n`; the router is node `n`. A link is named by its child
//! node, since every non-root node has exactly one parent.

use std::collections::{BTreeSet, VecDeque};
use std::fmt;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::traces::SECONDS_PER_HOUR;

#[derive(Debug, Error)]
pub enum GridError {
    #[error("invalid grid parameters: {0}")]
    Params(String),
    #[error("invalid topology: {0}")]
    Topology(String),
    #[error("unknown node {0}")]
    UnknownNode(usize),
    #[error("route endpoints coincide at node {0}")]
    SameEndpoints(usize),
    #[error("line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error("I/O error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("job {job}: {reason}")]
    BadJob { job: usize, reason: String },
}

/// Physical constants of the grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GridParams {
    /// Length of every hop (m).
    pub hop_length: f64,
    /// Cable resistivity (Ω·mm²/m).
    pub resistivity: f64,
    /// Cable cross-section (mm²).
    pub cross_section: f64,
    /// Nominal DC voltage (V).
    pub v_nom: f64,
    /// Nominal link power (W).
    pub p_nom: f64,
    /// Energy a link carries in one mini-slot (J).
    pub e_max: f64,
    /// Mini-slot duration (s).
    pub minislot: f64,
}

impl Default for GridParams {
    fn default() -> Self {
        Self {
            hop_length: 100.0,
            resistivity: 0.023,
            cross_section: 10.0,
            v_nom: 400.0,
            p_nom: 1500.0,
            e_max: 90e3,
            minislot: 60.0,
        }
    }
}

impl GridParams {
    pub fn validate(&self) -> Result<(), GridError> {
        let positive = [
            ("hop_length", self.hop_length),
            ("resistivity", self.resistivity),
            ("cross_section", self.cross_section),
            ("v_nom", self.v_nom),
            ("e_max", self.e_max),
            ("minislot", self.minislot),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(GridError::Params(format!("{name} = {v} must be positive")));
            }
        }
        if !(self.p_nom >= 0.0 && self.p_nom.is_finite()) {
            return Err(GridError::Params(format!("p_nom = {} must be >= 0", self.p_nom)));
        }
        if self.minislot > SECONDS_PER_HOUR {
            return Err(GridError::Params("a mini-slot cannot exceed the hour".into()));
        }
        let d = self.loss_per_hop();
        if d >= 1.0 {
            return Err(GridError::Params(format!("per-hop loss fraction {d} >= 1")));
        }
        Ok(())
    }

    /// `R = ρ ℓ / A` (Ω).
    pub fn hop_resistance(&self) -> f64 {
        self.resistivity * self.hop_length / self.cross_section
    }

    /// Fraction of the sent energy dissipated on one hop.
    pub fn loss_per_hop(&self) -> f64 {
        self.p_nom * self.hop_resistance() / (self.v_nom * self.v_nom)
    }

    /// Fraction surviving `g` hops.
    pub fn attenuation(&self, g: usize) -> f64 {
        (1.0 - g as f64 * self.loss_per_hop()).max(0.0)
    }

    /// Mini-slots available in one hourly slot.
    pub fn minislots_per_slot(&self) -> usize {
        (SECONDS_PER_HOUR / self.minislot).floor() as usize
    }
}

pub fn required_minislots(energy: f64, e_max: f64) -> usize {
    if energy <= 0.0 {
        0
    } else {
        (energy / e_max).ceil() as usize
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PpgTopology {
    /// `parent[v]` for every node; `None` only for the router.
    parent: Vec<Option<usize>>,
    depth: Vec<usize>,
    params: GridParams,
}

impl PpgTopology {
    /// Builds the tree from `(parent, child)` links over BS ids `0..n_bs`
    /// and router id `n_bs`.
    pub fn new(n_bs: usize, links: &[(usize, usize)], params: GridParams) -> Result<Self, GridError> {
        params.validate()?;
        let nodes = n_bs + 1;
        let mut parent = vec![None; nodes];
        for &(p, c) in links {
            if p >= nodes || c >= nodes {
                return Err(GridError::UnknownNode(p.max(c)));
            }
            if c == n_bs {
                return Err(GridError::Topology("the router cannot have a parent".into()));
            }
            if p == c {
                return Err(GridError::Topology(format!("self-loop at node {c}")));
            }
            if parent[c].replace(p).is_some() {
                return Err(GridError::Topology(format!("node {c} has two parents")));
            }
        }
        let mut depth = vec![usize::MAX; nodes];
        depth[n_bs] = 0;
        for v in 0..n_bs {
            let mut path = Vec::new();
            let mut at = v;
            while depth[at] == usize::MAX {
                if path.len() > nodes {
                    return Err(GridError::Topology(format!("cycle through node {v}")));
                }
                path.push(at);
                at = parent[at].ok_or_else(|| GridError::Topology(format!("node {at} is not connected to the router")))?;
            }
            let mut d = depth[at];
            for &u in path.iter().rev() {
                d += 1;
                depth[u] = d;
            }
        }
        Ok(Self { parent, depth, params })
    }

    /// `branches` chains of `per_branch` BSs hanging off the router.
    /// BS `b·per_branch` is adjacent to the router.
    pub fn chains(branches: usize, per_branch: usize, params: GridParams) -> Result<Self, GridError> {
        let n = branches * per_branch;
        let mut links = Vec::with_capacity(n);
        for b in 0..branches {
            for k in 0..per_branch {
                let child = b * per_branch + k;
                let parent = if k == 0 { n } else { child - 1 };
                links.push((parent, child));
            }
        }
        Self::new(n, &links, params)
    }

    /// Parses `parent,child` lines. The router is written `router`; blank
    /// lines and `#` comments are skipped. BS ids must cover `0..n`.
    pub fn from_edge_list(text: &str, params: GridParams) -> Result<Self, GridError> {
        let mut raw = Vec::new();
        let mut max_id: Option<usize> = None;
        for (i, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let parse_err = |reason: String| GridError::Parse { line: i + 1, reason };
            let (a, b) = line
                .split_once(',')
                .ok_or_else(|| parse_err(format!("expected `parent,child`, got `{line}`")))?;
            let node = |s: &str| -> Result<Option<usize>, GridError> {
                let s = s.trim();
                if s.eq_ignore_ascii_case("router") {
                    Ok(None)
                } else {
                    s.parse::<usize>()
                        .map(Some)
                        .map_err(|_| parse_err(format!("bad node id `{s}`")))
                }
            };
            let (p, c) = (node(a)?, node(b)?);
            let c = c.ok_or_else(|| parse_err("the router cannot be a child".into()))?;
            for id in p.iter().chain(std::iter::once(&c)) {
                max_id = Some(max_id.map_or(*id, |m| m.max(*id)));
            }
            raw.push((p, c));
        }
        let n = max_id.map_or(0, |m| m + 1);
        let links: Vec<(usize, usize)> = raw.into_iter().map(|(p, c)| (p.unwrap_or(n), c)).collect();
        if links.len() != n {
            return Err(GridError::Topology(format!(
                "{} links for {n} BSs; every BS needs exactly one parent",
                links.len()
            )));
        }
        Self::new(n, &links, params)
    }

    pub fn load_edge_list(path: impl AsRef<Path>, params: GridParams) -> Result<Self, GridError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| GridError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_edge_list(&text, params)
    }

    pub fn to_edge_list(&self) -> String {
        let mut out = String::new();
        for c in 0..self.bs_count() {
            let p = self.parent[c].expect("BS nodes have parents");
            out += &format!("{},{}\n", self.label(p), c);
        }
        out
    }

    pub fn bs_count(&self) -> usize {
        self.parent.len() - 1
    }

    pub fn router(&self) -> usize {
        self.bs_count()
    }

    pub fn params(&self) -> &GridParams {
        &self.params
    }

    pub fn parent(&self, v: usize) -> Option<usize> {
        self.parent.get(v).copied().flatten()
    }

    pub fn label(&self, v: usize) -> String {
        if v == self.router() {
            "router".into()
        } else {
            v.to_string()
        }
    }

    pub fn attenuation(&self, g: usize) -> f64 {
        self.params.attenuation(g)
    }

    /// The tree path from `src` to `dst`, turning at their lowest common
    /// ancestor.
    pub fn unique_route(&self, src: usize, dst: usize) -> Result<Route, GridError> {
        let nodes = self.parent.len();
        for v in [src, dst] {
            if v >= nodes {
                return Err(GridError::UnknownNode(v));
            }
        }
        if src == dst {
            return Err(GridError::SameEndpoints(src));
        }
        let (mut a, mut b) = (src, dst);
        let mut up = vec![a];
        let mut down = vec![b];
        let mut links = Vec::new();
        let mut down_links = Vec::new();
        while self.depth[a] > self.depth[b] {
            links.push(a);
            a = self.parent[a].expect("deeper node has a parent");
            up.push(a);
        }
        while self.depth[b] > self.depth[a] {
            down_links.push(b);
            b = self.parent[b].expect("deeper node has a parent");
            down.push(b);
        }
        while a != b {
            links.push(a);
            down_links.push(b);
            a = self.parent[a].expect("non-root");
            b = self.parent[b].expect("non-root");
            up.push(a);
            down.push(b);
        }
        down.pop();
        up.extend(down.into_iter().rev());
        links.extend(down_links.into_iter().rev());
        Ok(Route { nodes: up, links })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Route {
    /// Visited nodes, source first.
    pub nodes: Vec<usize>,
    /// Links in traversal order, each named by its child node.
    pub links: Vec<usize>,
}

impl Route {
    pub fn hops(&self) -> usize {
        self.links.len()
    }

    pub fn source(&self) -> usize {
        self.nodes[0]
    }

    pub fn destination(&self) -> usize {
        *self.nodes.last().expect("routes are non-empty")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransferJob {
    pub source: usize,
    pub consumer: usize,
    /// Energy leaving the source (J).
    pub energy: f64,
    pub route: Route,
    pub minislots: usize,
}

impl TransferJob {
    pub fn new(topo: &PpgTopology, source: usize, consumer: usize, energy: f64) -> Result<Self, GridError> {
        if !(energy >= 0.0 && energy.is_finite()) {
            return Err(GridError::Params(format!("transfer energy {energy} must be finite and >= 0")));
        }
        let route = topo.unique_route(source, consumer)?;
        Ok(Self {
            source,
            consumer,
            energy,
            route,
            minislots: required_minislots(energy, topo.params.e_max),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ScheduledJob {
    /// Index into the job list.
    pub job: usize,
    pub start: usize,
    /// Exclusive.
    pub end: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MiniSlotSchedule {
    /// One entry per job, in job-list order.
    pub entries: Vec<ScheduledJob>,
    pub makespan: usize,
}

impl fmt::Display for MiniSlotSchedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for e in &self.entries {
            writeln!(f, "job {}: [{}, {})", e.job, e.start, e.end)?;
        }
        write!(f, "makespan {}", self.makespan)
    }
}

impl MiniSlotSchedule {
    /// Rows `job,source,consumer,link,minislot`, one per occupied
    /// (link, mini-slot) pair. Links are written `child-parent`.
    pub fn write_csv<W: Write>(&self, jobs: &[TransferJob], topo: &PpgTopology, w: W) -> csv::Result<()> {
        let mut w = csv::Writer::from_writer(w);
        w.write_record(["job", "source", "consumer", "link", "minislot"])?;
        for e in &self.entries {
            let job = &jobs[e.job];
            for &l in &job.route.links {
                let parent = topo.parent(l).expect("links are named by children");
                let link = format!("{}-{}", l, topo.label(parent));
                for t in e.start..e.end {
                    w.write_record(&[
                        e.job.to_string(),
                        job.source.to_string(),
                        job.consumer.to_string(),
                        link.clone(),
                        t.to_string(),
                    ])?;
                }
            }
        }
        w.flush()?;
        Ok(())
    }
}

fn check_job(topo: &PpgTopology, index: usize, job: &TransferJob) -> Result<(), GridError> {
    let expected = topo
        .unique_route(job.source, job.consumer)
        .map_err(|e| GridError::BadJob {
            job: index,
            reason: e.to_string(),
        })?;
    if expected != job.route {
        return Err(GridError::BadJob {
            job: index,
            reason: "route does not match the topology".into(),
        });
    }
    Ok(())
}

/// Greedy link-disjoint scheduling. At time 0 and whenever a transfer ends,
/// waiting jobs are scanned longest first (ties by source, then consumer,
/// then list position) and every job whose links are all free starts.
pub fn schedule_transfers(jobs: &[TransferJob], topo: &PpgTopology) -> Result<MiniSlotSchedule, GridError> {
    for (i, job) in jobs.iter().enumerate() {
        check_job(topo, i, job)?;
    }
    let mut order: Vec<usize> = (0..jobs.len()).collect();
    order.sort_by_key(|&i| (std::cmp::Reverse(jobs[i].minislots), jobs[i].source, jobs[i].consumer, i));

    let mut entries = vec![None; jobs.len()];
    let mut waiting: Vec<usize> = Vec::new();
    for &i in &order {
        if jobs[i].minislots == 0 {
            entries[i] = Some(ScheduledJob { job: i, start: 0, end: 0 });
        } else {
            waiting.push(i);
        }
    }
    let mut busy_until = vec![0usize; topo.parent.len()];
    let mut running: Vec<(usize, usize)> = Vec::new();
    let mut now = 0;
    while !waiting.is_empty() {
        waiting.retain(|&i| {
            let job = &jobs[i];
            if job.route.links.iter().all(|&l| busy_until[l] <= now) {
                let end = now + job.minislots;
                for &l in &job.route.links {
                    busy_until[l] = end;
                }
                entries[i] = Some(ScheduledJob { job: i, start: now, end });
                running.push((end, i));
                false
            } else {
                true
            }
        });
        if waiting.is_empty() {
            break;
        }
        running.retain(|&(end, _)| end > now);
        now = running
            .iter()
            .map(|&(end, _)| end)
            .min()
            .expect("a waiting job is blocked only by a running one");
    }
    let entries: Vec<ScheduledJob> = entries.into_iter().map(|e| e.expect("every job scheduled")).collect();
    let makespan = entries.iter().map(|e| e.end).max().unwrap_or(0);
    Ok(MiniSlotSchedule { entries, makespan })
}

/// Verifies completeness and link exclusivity of a schedule.
pub fn check_schedule(schedule: &MiniSlotSchedule, jobs: &[TransferJob]) -> Result<(), String> {
    if schedule.entries.len() != jobs.len() {
        return Err(format!("{} entries for {} jobs", schedule.entries.len(), jobs.len()));
    }
    let mut seen = BTreeSet::new();
    for (k, e) in schedule.entries.iter().enumerate() {
        if e.job >= jobs.len() || !seen.insert(e.job) {
            return Err(format!("entry {k} names job {} twice or out of range", e.job));
        }
        if e.end < e.start || e.end - e.start != jobs[e.job].minislots {
            return Err(format!("job {} runs [{}, {}) but needs {}", e.job, e.start, e.end, jobs[e.job].minislots));
        }
        if e.end > schedule.makespan {
            return Err(format!("job {} ends after the makespan", e.job));
        }
    }
    for (a, ea) in schedule.entries.iter().enumerate() {
        for eb in &schedule.entries[a + 1..] {
            let overlap = ea.start < eb.end && eb.start < ea.end;
            if !overlap {
                continue;
            }
            let la = &jobs[ea.job].route.links;
            if let Some(l) = jobs[eb.job].route.links.iter().find(|l| la.contains(l)) {
                return Err(format!("jobs {} and {} share link {l} while overlapping", ea.job, eb.job));
            }
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransferRecord {
    pub job: usize,
    pub source: usize,
    pub consumer: usize,
    pub hops: usize,
    pub requested: f64,
    pub sent: f64,
    pub delivered: f64,
    /// Cut by the mini-slot budget.
    pub over_budget: bool,
    /// Cut by the source buffer.
    pub source_short: bool,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TransferLedger {
    pub records: Vec<TransferRecord>,
}

impl TransferLedger {
    pub fn total_sent(&self) -> f64 {
        self.records.iter().map(|r| r.sent).sum()
    }

    pub fn total_delivered(&self) -> f64 {
        self.records.iter().map(|r| r.delivered).sum()
    }

    pub fn total_lost(&self) -> f64 {
        self.records.iter().map(|r| r.sent - r.delivered).sum()
    }

    /// Net change per BS: `+delivered` for consumers, `−sent` for sources.
    pub fn net(&self, n_bs: usize) -> Vec<f64> {
        let mut net = vec![0.0; n_bs];
        for r in &self.records {
            net[r.source] -= r.sent;
            net[r.consumer] += r.delivered;
        }
        net
    }
}

/// Moves energy between buffers according to a schedule. Jobs running past
/// the hourly mini-slot budget ship the fraction that fits; sources never go
/// negative. Consumers are credited without an upper clamp.
pub fn apply_transfers(
    schedule: &MiniSlotSchedule,
    jobs: &[TransferJob],
    topo: &PpgTopology,
    buffers: &mut [f64],
) -> Result<TransferLedger, GridError> {
    if buffers.len() != topo.bs_count() {
        return Err(GridError::Topology(format!(
            "{} buffers for {} BSs",
            buffers.len(),
            topo.bs_count()
        )));
    }
    let budget = topo.params.minislots_per_slot();
    let mut order: Vec<&ScheduledJob> = schedule.entries.iter().collect();
    order.sort_by_key(|e| (e.start, e.job));
    let mut ledger = TransferLedger::default();
    for e in order {
        let job = &jobs[e.job];
        let mut sent = job.energy;
        let over_budget = e.end > budget;
        if over_budget && job.minislots > 0 {
            let fits = budget.saturating_sub(e.start).min(job.minislots);
            sent = job.energy * fits as f64 / job.minislots as f64;
        }
        let available = buffers[job.source].max(0.0);
        let source_short = sent > available;
        if source_short {
            sent = available;
        }
        let a = topo.attenuation(job.route.hops());
        let delivered = sent * a;
        buffers[job.source] -= sent;
        buffers[job.consumer] += delivered;
        ledger.records.push(TransferRecord {
            job: e.job,
            source: job.source,
            consumer: job.consumer,
            hops: job.route.hops(),
            requested: job.energy,
            sent,
            delivered,
            over_budget,
            source_short,
        });
    }
    Ok(ledger)
}

/// Breadth-first shortest path, used as an independent route oracle.
pub fn bfs_path(topo: &PpgTopology, src: usize, dst: usize) -> Option<Vec<usize>> {
    let n = topo.parent.len();
    let mut adj = vec![Vec::new(); n];
    for c in 0..n {
        if let Some(p) = topo.parent[c] {
            adj[p].push(c);
            adj[c].push(p);
        }
    }
    let mut prev = vec![usize::MAX; n];
    let mut queue = VecDeque::from([src]);
    prev[src] = src;
    while let Some(v) = queue.pop_front() {
        if v == dst {
            let mut path = vec![dst];
            let mut at = dst;
            while at != src {
                at = prev[at];
                path.push(at);
            }
            path.reverse();
            return Some(path);
        }
        for &u in &adj[v] {
            if prev[u] == usize::MAX {
                prev[u] = v;
                queue.push_back(u);
            }
        }
    }
    None
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_tree(rng: &mut ChaCha8Rng, n_bs: usize) -> PpgTopology {
        // Each BS hangs off the router or an earlier BS, then ids are shuffled.
        let mut perm: Vec<usize> = (0..n_bs).collect();
        for i in (1..n_bs).rev() {
            perm.swap(i, rng.random_range(0..=i));
        }
        let links: Vec<(usize, usize)> = (0..n_bs)
            .map(|k| {
                let p = rng.random_range(0..=k);
                let parent = if p == k { n_bs } else { perm[p] };
                (parent, perm[k])
            })
            .collect();
        PpgTopology::new(n_bs, &links, GridParams::default()).unwrap()
    }

    fn random_jobs(rng: &mut ChaCha8Rng, topo: &PpgTopology) -> Vec<TransferJob> {
        let n = topo.bs_count();
        (0..rng.random_range(1..=8))
            .map(|_| {
                let s = rng.random_range(0..n);
                let mut c = rng.random_range(0..n - 1);
                if c >= s {
                    c += 1;
                }
                TransferJob::new(topo, s, c, rng.random_range(0.0..400e3)).unwrap()
            })
            .collect()
    }

    #[test]
    fn default_loss_constants() {
        let p = GridParams::default();
        assert_relative_eq!(p.hop_resistance(), 0.23, epsilon = 1e-15);
        assert_relative_eq!(p.loss_per_hop(), 0.23 * 1500.0 / 160_000.0, epsilon = 1e-15);
        assert_eq!(p.minislots_per_slot(), 60);
    }

    #[test]
    fn attenuation_clamps_and_decreases() {
        let p = GridParams::default();
        let d = p.loss_per_hop();
        let far = (1.0 / d).ceil() as usize;
        assert_eq!(p.attenuation(far), 0.0);
        for g in 1..far {
            assert!(p.attenuation(g) > p.attenuation(g + 1));
            assert!((0.0..=1.0).contains(&p.attenuation(g)));
        }
        let useless = GridParams {
            p_nom: 1e9,
            ..GridParams::default()
        };
        assert!(useless.validate().is_err());
    }

    #[test]
    fn minislot_counts() {
        assert_eq!(required_minislots(200e3, 90e3), 3);
        assert_eq!(required_minislots(90e3, 90e3), 1);
        assert_eq!(required_minislots(0.0, 90e3), 0);
    }

    #[test]
    fn routes_through_router_and_direct() {
        let t = PpgTopology::chains(2, 2, GridParams::default()).unwrap();
        // 1 - 0 - router - 2 - 3
        let r = t.unique_route(1, 3).unwrap();
        assert_eq!(r.hops(), 4);
        assert_eq!(r.nodes, vec![1, 0, 4, 2, 3]);
        assert_eq!(r.links, vec![1, 0, 2, 3]);
        assert_eq!(t.unique_route(0, 1).unwrap().hops(), 1);
        assert_eq!(t.unique_route(1, 0).unwrap().nodes, vec![1, 0]);
        assert!(matches!(t.unique_route(2, 2), Err(GridError::SameEndpoints(2))));
        assert!(matches!(t.unique_route(0, 9), Err(GridError::UnknownNode(9))));
    }

    #[test]
    fn topology_validation() {
        let p = GridParams::default();
        assert!(PpgTopology::new(2, &[(2, 0), (0, 1), (2, 1)], p).is_err());
        assert!(PpgTopology::new(2, &[(1, 0), (0, 1)], p).is_err());
        assert!(PpgTopology::new(2, &[(2, 0)], p).is_err());
        assert!(PpgTopology::new(1, &[(1, 0), (0, 1)], p).is_err());
    }

    #[test]
    fn edge_list_round_trip() {
        let text = "# two branches\nrouter,0\n0,1\nrouter,2\n";
        let t = PpgTopology::from_edge_list(text, GridParams::default()).unwrap();
        assert_eq!(t.bs_count(), 3);
        assert_eq!(t.parent(1), Some(0));
        assert_eq!(t.parent(2), Some(3));
        let back = PpgTopology::from_edge_list(&t.to_edge_list(), GridParams::default()).unwrap();
        assert_eq!(t, back);
        let err = PpgTopology::from_edge_list("router,0\n0;1\n", GridParams::default()).unwrap_err();
        assert!(matches!(err, GridError::Parse { line: 2, .. }));
        assert!(PpgTopology::from_edge_list("router,0\n1,router\n", GridParams::default()).is_err());
    }

    fn job_with(topo: &PpgTopology, s: usize, c: usize, n: usize) -> TransferJob {
        TransferJob::new(topo, s, c, n as f64 * topo.params().e_max).unwrap()
    }

    #[test]
    fn disjoint_jobs_run_in_parallel() {
        let t = PpgTopology::chains(4, 1, GridParams::default()).unwrap();
        let jobs = vec![job_with(&t, 0, 1, 3), job_with(&t, 2, 3, 5)];
        let s = schedule_transfers(&jobs, &t).unwrap();
        assert_eq!(s.entries.iter().map(|e| e.start).collect::<Vec<_>>(), vec![0, 0]);
        assert_eq!(s.makespan, 5);
        check_schedule(&s, &jobs).unwrap();
    }

    #[test]
    fn shared_link_serializes() {
        let t = PpgTopology::chains(3, 1, GridParams::default()).unwrap();
        let jobs = vec![job_with(&t, 0, 1, 3), job_with(&t, 0, 2, 5)];
        let s = schedule_transfers(&jobs, &t).unwrap();
        assert_eq!(s.makespan, 8);
        // Longest first.
        assert_eq!(s.entries[1].start, 0);
        assert_eq!(s.entries[0].start, 5);
        check_schedule(&s, &jobs).unwrap();
    }

    #[test]
    fn checker_catches_conflicts() {
        let t = PpgTopology::chains(3, 1, GridParams::default()).unwrap();
        let jobs = vec![job_with(&t, 0, 1, 3), job_with(&t, 0, 2, 5)];
        let bad = MiniSlotSchedule {
            entries: vec![ScheduledJob { job: 0, start: 0, end: 3 }, ScheduledJob { job: 1, start: 2, end: 7 }],
            makespan: 7,
        };
        assert!(check_schedule(&bad, &jobs).is_err());
        let short = MiniSlotSchedule {
            entries: vec![ScheduledJob { job: 0, start: 0, end: 2 }, ScheduledJob { job: 1, start: 3, end: 8 }],
            makespan: 8,
        };
        assert!(check_schedule(&short, &jobs).is_err());
    }

    #[test]
    fn foreign_route_rejected() {
        let t = PpgTopology::chains(3, 1, GridParams::default()).unwrap();
        let mut job = job_with(&t, 0, 1, 1);
        job.route.links.pop();
        assert!(matches!(schedule_transfers(&[job], &t), Err(GridError::BadJob { job: 0, .. })));
    }

    #[test]
    fn transfer_attenuates_and_conserves() {
        let t = PpgTopology::chains(2, 1, GridParams::default()).unwrap();
        let jobs = vec![TransferJob::new(&t, 0, 1, 100e3).unwrap()];
        let s = schedule_transfers(&jobs, &t).unwrap();
        let mut b = vec![200e3, 50e3];
        let ledger = apply_transfers(&s, &jobs, &t, &mut b).unwrap();
        let a = t.attenuation(2);
        assert_relative_eq!(b[0], 100e3);
        assert_relative_eq!(b[1], 50e3 + 100e3 * a);
        assert_relative_eq!(ledger.total_delivered(), ledger.total_sent() * a);
    }

    #[test]
    fn budget_truncates_long_jobs() {
        let t = PpgTopology::chains(2, 1, GridParams::default()).unwrap();
        let e = 61.0 * t.params().e_max;
        let jobs = vec![TransferJob::new(&t, 0, 1, e).unwrap()];
        assert_eq!(jobs[0].minislots, 61);
        let s = schedule_transfers(&jobs, &t).unwrap();
        let mut b = vec![1e9, 0.0];
        let ledger = apply_transfers(&s, &jobs, &t, &mut b).unwrap();
        let r = &ledger.records[0];
        assert!(r.over_budget);
        assert_relative_eq!(r.sent, 60.0 * t.params().e_max);
    }

    #[test]
    fn empty_source_is_flagged() {
        let t = PpgTopology::chains(2, 1, GridParams::default()).unwrap();
        let jobs = vec![TransferJob::new(&t, 0, 1, 50e3).unwrap()];
        let s = schedule_transfers(&jobs, &t).unwrap();
        let mut b = vec![20e3, 0.0];
        let ledger = apply_transfers(&s, &jobs, &t, &mut b).unwrap();
        assert!(ledger.records[0].source_short);
        assert_eq!(b[0], 0.0);
    }

    #[test]
    fn schedule_csv_rows() {
        let t = PpgTopology::chains(2, 1, GridParams::default()).unwrap();
        let jobs = vec![job_with(&t, 0, 1, 2)];
        let s = schedule_transfers(&jobs, &t).unwrap();
        let mut buf = Vec::new();
        s.write_csv(&jobs, &t, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 1 + 2 * 2);
        assert!(text.contains("0,0,1,0-router,1"));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(128))]

        #[test]
        fn route_matches_bfs(seed in any::<u64>(), n in 2usize..20) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let t = random_tree(&mut rng, n);
            for s in 0..=n {
                for d in 0..=n {
                    if s == d {
                        continue;
                    }
                    let r = t.unique_route(s, d).unwrap();
                    prop_assert_eq!(Some(r.nodes.clone()), bfs_path(&t, s, d));
                    prop_assert_eq!(r.hops() + 1, r.nodes.len());
                    let distinct: BTreeSet<_> = r.nodes.iter().collect();
                    prop_assert_eq!(distinct.len(), r.nodes.len());
                }
            }
        }

        #[test]
        fn schedules_are_valid(seed in any::<u64>(), n in 2usize..10) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let t = random_tree(&mut rng, n);
            let jobs = random_jobs(&mut rng, &t);
            let s = schedule_transfers(&jobs, &t).unwrap();
            prop_assert!(check_schedule(&s, &jobs).is_ok());
            let total: usize = jobs.iter().map(|j| j.minislots).sum();
            let longest = jobs.iter().map(|j| j.minislots).max().unwrap();
            prop_assert!(longest <= s.makespan && s.makespan <= total);
        }

        #[test]
        fn ledger_conserves(seed in any::<u64>(), n in 2usize..10) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let t = random_tree(&mut rng, n);
            let jobs = random_jobs(&mut rng, &t);
            let s = schedule_transfers(&jobs, &t).unwrap();
            let mut b: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..360e3)).collect();
            let before: f64 = b.iter().sum();
            let ledger = apply_transfers(&s, &jobs, &t, &mut b).unwrap();
            let expected: f64 = ledger.records.iter().map(|r| r.sent * t.attenuation(r.hops)).sum();
            prop_assert!((ledger.total_delivered() - expected).abs() <= 1e-9 * expected.max(1.0));
            let after: f64 = b.iter().sum();
            prop_assert!((before - ledger.total_lost() - after).abs() <= 1e-6 * before.max(1.0));
            prop_assert!(b.iter().all(|v| *v >= 0.0));
        }
    }
}
