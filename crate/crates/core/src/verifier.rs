//! Safety queries over the network suffix after a cut layer, decided by a
//! big-M MILP encoding and depth-first branch-and-bound on ReLU phases.
//!
//! The query asks for a cut-layer vector inside the bound set that the
//! characterizer assigns to class 1 and whose suffix output satisfies every
//! risk clause. No such vector means Safe; when the bound set came from a
//! dataset the proof is conditional on the runtime monitor never firing.

use std::path::Path;
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::{Condvar, Mutex};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::abstraction::{propagate_intervals, ActivationBounds, IntervalBox, Provenance};
use crate::characterizer::{decide, Characterizer};
use crate::error::{Error, Result};
use crate::lp::{lp_solve, LinearProgram, LpStatus, Relation};
use crate::network::{adjacent_differences, read_to_string, Layer, Network};

/// Tolerance for replaying witnesses against risk clauses and bound sets.
pub const WITNESS_TOL: f64 = 1e-6;
/// A relaxed binary within this distance of 0 or 1 counts as integral.
pub const INTEGRALITY_TOL: f64 = 1e-6;
/// Upper limit on each slack variable of the witness-polishing LP.
const POLISH_MARGIN_CAP: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RiskOp {
    #[serde(rename = "<=")]
    Le,
    #[serde(rename = ">=")]
    Ge,
    #[serde(rename = "<")]
    Lt,
    #[serde(rename = ">")]
    Gt,
}

impl RiskOp {
    /// Non-strict relation used in the MILP.
    pub fn relaxed(self) -> Relation {
        match self {
            RiskOp::Le | RiskOp::Lt => Relation::Le,
            RiskOp::Ge | RiskOp::Gt => Relation::Ge,
        }
    }

    pub fn is_strict(self) -> bool {
        matches!(self, RiskOp::Lt | RiskOp::Gt)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RiskClause {
    pub coeffs: Vec<f64>,
    pub op: RiskOp,
    pub rhs: f64,
}

impl RiskClause {
    pub fn new(coeffs: Vec<f64>, op: RiskOp, rhs: f64) -> Self {
        RiskClause { coeffs, op, rhs }
    }

    pub fn lhs(&self, output: &[f64]) -> f64 {
        self.coeffs.iter().zip(output).map(|(c, y)| c * y).sum()
    }

    /// Exact evaluation with the clause's own (possibly strict) relation.
    pub fn holds(&self, output: &[f64]) -> bool {
        let v = self.lhs(output);
        match self.op {
            RiskOp::Le => v <= self.rhs,
            RiskOp::Ge => v >= self.rhs,
            RiskOp::Lt => v < self.rhs,
            RiskOp::Gt => v > self.rhs,
        }
    }

    /// Violation of the relaxed (non-strict) clause.
    pub fn relaxed_violation(&self, output: &[f64]) -> f64 {
        self.op.relaxed().violation(self.lhs(output), self.rhs)
    }
}

/// Conjunction of linear clauses over the network output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct RiskCondition {
    pub clauses: Vec<RiskClause>,
}

impl RiskCondition {
    pub fn new(clauses: Vec<RiskClause>) -> Result<Self> {
        if clauses.is_empty() {
            return Err(Error::Value("risk condition needs at least one clause".into()));
        }
        if clauses.iter().any(|c| !c.rhs.is_finite() || c.coeffs.iter().any(|v| !v.is_finite())) {
            return Err(Error::Value("non-finite risk coefficient".into()));
        }
        Ok(RiskCondition { clauses })
    }

    pub fn holds(&self, output: &[f64]) -> bool {
        self.clauses.iter().all(|c| c.holds(output))
    }

    pub(crate) fn check_dim(&self, d_out: usize) -> Result<()> {
        match self.clauses.iter().position(|c| c.coeffs.len() != d_out) {
            Some(i) => Err(Error::shape(format!(
                "risk clause {i} has {} coefficients, network output has {d_out}",
                self.clauses[i].coeffs.len()
            ))),
            None => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SafetyQuery {
    pub cut_layer: usize,
    pub bounds: ActivationBounds,
    pub characterizer: Characterizer,
    pub risk: RiskCondition,
}

impl SafetyQuery {
    pub fn validate(&self, net: &Network) -> Result<()> {
        net.check_cut(self.cut_layer)?;
        self.bounds.validate()?;
        if self.bounds.layer != self.cut_layer {
            return Err(Error::InvalidConfig(format!(
                "bounds describe layer {}, query cuts at {}",
                self.bounds.layer, self.cut_layer
            )));
        }
        let d = net.dim_at(self.cut_layer);
        if self.bounds.dim() != d {
            return Err(Error::shape(format!("bounds have {} neurons, cut layer has {d}", self.bounds.dim())));
        }
        if self.characterizer.input_dim() != d {
            return Err(Error::shape(format!(
                "characterizer expects {} inputs, cut layer has {d}",
                self.characterizer.input_dim()
            )));
        }
        self.risk.check_dim(net.output_dim())
    }

    /// Reads the query JSON. Relative paths resolve against the query
    /// file's directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let base = path.parent().unwrap_or(Path::new("."));
        Self::from_json(&read_to_string(path)?, base)
    }

    pub fn from_json(text: &str, base: &Path) -> Result<Self> {
        let file: QueryFile = serde_json::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
        let bounds = match file.bounds {
            PathOr::Path(p) => ActivationBounds::load(base.join(p))?,
            PathOr::Inline(v) => ActivationBounds::from_json(&v.to_string())?,
        };
        let characterizer = match file.characterizer {
            PathOr::Path(p) => Characterizer::load(base.join(p))?,
            PathOr::Inline(v) => Characterizer::from_json(&v.to_string())?,
        };
        Ok(SafetyQuery {
            cut_layer: file.cut_layer,
            bounds,
            characterizer,
            risk: RiskCondition::new(file.risk)?,
        })
    }
}

#[derive(Deserialize)]
#[serde(untagged)]
enum PathOr {
    Path(String),
    Inline(serde_json::Value),
}

#[derive(Deserialize)]
struct QueryFile {
    cut_layer: usize,
    bounds: PathOr,
    characterizer: PathOr,
    risk: Vec<RiskClause>,
}

/// How a single ReLU neuron was encoded.
#[derive(Debug, Clone, PartialEq)]
pub struct ReluEncoding {
    pub input: usize,
    pub output: usize,
    /// Pre-activation interval from propagation of the cut-layer box.
    pub pre_lo: f64,
    pub pre_hi: f64,
    /// Indicator variable, present only for unstable neurons.
    pub binary: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct MilpProblem {
    pub lp: LinearProgram,
    pub cut_vars: Vec<usize>,
    pub output_vars: Vec<usize>,
    pub logit_var: usize,
    pub binaries: Vec<usize>,
    pub relus: Vec<ReluEncoding>,
    /// Row index of the `logit >= 0` constraint.
    pub logit_row: usize,
    /// Row indices of the risk clauses, in clause order.
    pub risk_rows: Vec<usize>,
}

impl MilpProblem {
    /// True iff `v` satisfies every emitted constraint that mentions only
    /// cut-layer variables (the box as variable bounds plus any relational
    /// rows), evaluated without tolerance.
    pub fn cut_constraints_satisfied(&self, v: &[f64]) -> bool {
        let mut x = vec![0.0; self.lp.num_vars()];
        for (var, val) in self.cut_vars.iter().zip(v) {
            x[*var] = *val;
        }
        let is_cut = |j: usize| self.cut_vars.contains(&j);
        let bounds_ok = self
            .cut_vars
            .iter()
            .all(|&j| self.lp.lower[j] <= x[j] && x[j] <= self.lp.upper[j]);
        bounds_ok
            && self
                .lp
                .constraints
                .iter()
                .filter(|c| !c.coeffs.is_empty() && c.coeffs.iter().all(|(j, _)| is_cut(*j)))
                .all(|c| c.relation.violation(c.lhs(&x), c.rhs) == 0.0)
    }
}

/// Builds the mixed-integer encoding of `query` over the suffix of `net`.
pub fn encode(net: &Network, query: &SafetyQuery) -> Result<MilpProblem> {
    query.validate(net)?;
    let b = &query.bounds;
    let mut lp = LinearProgram::new();
    let cut_vars: Vec<usize> = (0..b.dim()).map(|i| lp.add_var(b.lo[i], b.hi[i])).collect();
    if let (Some(dlo), Some(dhi)) = (&b.diff_lo, &b.diff_hi) {
        for i in 0..dlo.len() {
            let coeffs = vec![(cut_vars[i + 1], 1.0), (cut_vars[i], -1.0)];
            lp.add_constraint(coeffs.clone(), Relation::Ge, dlo[i]);
            lp.add_constraint(coeffs, Relation::Le, dhi[i]);
        }
    }
    let cut_box = b.as_box();
    let mut relus = Vec::new();
    let output_vars = encode_layers(&mut lp, net.suffix(query.cut_layer), &cut_vars, &cut_box, &mut relus)?;
    let head_out = encode_layers(&mut lp, query.characterizer.head.layers(), &cut_vars, &cut_box, &mut relus)?;
    let logit_var = head_out[0];

    let logit_row = lp.constraints.len();
    lp.add_constraint(vec![(logit_var, 1.0)], Relation::Ge, 0.0);
    let mut risk_rows = Vec::new();
    for clause in &query.risk.clauses {
        risk_rows.push(lp.constraints.len());
        let coeffs = output_vars
            .iter()
            .zip(&clause.coeffs)
            .filter(|(_, c)| **c != 0.0)
            .map(|(v, c)| (*v, *c))
            .collect();
        lp.add_constraint(coeffs, clause.op.relaxed(), clause.rhs);
    }
    let binaries = relus.iter().filter_map(|r| r.binary).collect();
    Ok(MilpProblem {
        lp,
        cut_vars,
        output_vars,
        logit_var,
        binaries,
        relus,
        logit_row,
        risk_rows,
    })
}

fn encode_layers(
    lp: &mut LinearProgram,
    layers: &[Layer],
    input_vars: &[usize],
    input_box: &IntervalBox,
    relus: &mut Vec<ReluEncoding>,
) -> Result<Vec<usize>> {
    let boxes = propagate_intervals(layers, input_box);
    let free = |lp: &mut LinearProgram| lp.add_var(f64::NEG_INFINITY, f64::INFINITY);
    let mut cur = input_vars.to_vec();
    for (k, layer) in layers.iter().enumerate() {
        cur = match layer {
            Layer::Dense { weights, bias } => weights
                .iter()
                .zip(bias)
                .map(|(row, b)| {
                    let y = free(lp);
                    let mut coeffs = vec![(y, 1.0)];
                    coeffs.extend(cur.iter().zip(row).filter(|(_, w)| **w != 0.0).map(|(x, w)| (*x, -w)));
                    lp.add_constraint(coeffs, Relation::Eq, *b);
                    y
                })
                .collect(),
            Layer::BatchNorm { .. } => layer
                .batchnorm_affine()
                .expect("batchnorm")
                .iter()
                .zip(&cur)
                .map(|((mul, shift), x)| {
                    let y = free(lp);
                    lp.add_constraint(vec![(y, 1.0), (*x, -mul)], Relation::Eq, *shift);
                    y
                })
                .collect(),
            Layer::Relu { .. } => {
                let pre = &boxes[k];
                let mut out = Vec::with_capacity(cur.len());
                for (i, &x) in cur.iter().enumerate() {
                    let (lo, hi) = (pre.lo[i], pre.hi[i]);
                    if !lo.is_finite() || !hi.is_finite() {
                        return Err(Error::UnboundedBigM { neuron: i });
                    }
                    let (y, binary) = if lo >= 0.0 {
                        let y = free(lp);
                        lp.add_constraint(vec![(y, 1.0), (x, -1.0)], Relation::Eq, 0.0);
                        (y, None)
                    } else if hi <= 0.0 {
                        let y = free(lp);
                        lp.add_constraint(vec![(y, 1.0)], Relation::Eq, 0.0);
                        (y, None)
                    } else {
                        let y = lp.add_var(0.0, f64::INFINITY);
                        let a = lp.add_var(0.0, 1.0);
                        lp.add_constraint(vec![(y, 1.0), (x, -1.0)], Relation::Ge, 0.0);
                        lp.add_constraint(vec![(y, 1.0), (x, -1.0), (a, -lo)], Relation::Le, -lo);
                        lp.add_constraint(vec![(y, 1.0), (a, -hi)], Relation::Le, 0.0);
                        (y, Some(a))
                    };
                    relus.push(ReluEncoding {
                        input: x,
                        output: y,
                        pre_lo: lo,
                        pre_hi: hi,
                        binary,
                    });
                    out.push(y);
                }
                out
            }
        };
    }
    Ok(cur)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Status {
    Safe,
    Unsafe,
    Unknown,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Budget {
    pub max_nodes: usize,
    pub max_seconds: f64,
}

impl Default for Budget {
    fn default() -> Self {
        Budget {
            max_nodes: 1_000_000,
            max_seconds: 600.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct SearchStats {
    pub nodes_explored: usize,
    pub lp_solves: usize,
    pub wall_time: Duration,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Verdict {
    pub status: Status,
    pub witness: Option<Vec<f64>>,
    pub witness_output: Option<Vec<f64>>,
    /// Set when the bound set came from data, so a Safe result holds only
    /// while the runtime monitor reports containment.
    pub conditional: bool,
    pub stats: SearchStats,
    pub warnings: Vec<String>,
}

#[derive(Serialize)]
struct StatsReport {
    nodes_explored: usize,
    lp_solves: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    wall_time_ms: Option<f64>,
}

#[derive(Serialize)]
struct VerdictReport<'a> {
    status: Status,
    conditional: bool,
    witness: &'a Option<Vec<f64>>,
    witness_output: &'a Option<Vec<f64>>,
    stats: StatsReport,
    warnings: &'a [String],
}

impl Verdict {
    /// Report JSON. Wall time is omitted unless asked for so that repeated
    /// runs produce identical files.
    pub fn report_json(&self, with_timing: bool) -> String {
        let report = VerdictReport {
            status: self.status,
            conditional: self.conditional,
            witness: &self.witness,
            witness_output: &self.witness_output,
            stats: StatsReport {
                nodes_explored: self.stats.nodes_explored,
                lp_solves: self.stats.lp_solves,
                wall_time_ms: with_timing.then_some(self.stats.wall_time.as_secs_f64() * 1e3),
            },
            warnings: &self.warnings,
        };
        serde_json::to_string_pretty(&report).expect("verdict serializes")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Replay {
    pub in_bounds: bool,
    pub characterizer: bool,
    pub risk_satisfied: bool,
    pub output: Vec<f64>,
}

impl Replay {
    pub fn all_hold(&self) -> bool {
        self.in_bounds && self.characterizer && self.risk_satisfied
    }
}

/// Re-derives the three witness facts by concrete evaluation.
pub fn replay_witness(net: &Network, query: &SafetyQuery, witness: &[f64]) -> Result<Replay> {
    let b = &query.bounds;
    if witness.len() != b.dim() {
        return Err(Error::shape(format!("witness has {} values, cut layer has {}", witness.len(), b.dim())));
    }
    let mut in_bounds = witness
        .iter()
        .zip(&b.lo)
        .zip(&b.hi)
        .all(|((v, lo), hi)| *v >= lo - WITNESS_TOL && *v <= hi + WITNESS_TOL);
    if let (Some(dlo), Some(dhi), true) = (&b.diff_lo, &b.diff_hi, witness.len() >= 2) {
        let d = adjacent_differences(witness)?;
        in_bounds &= d
            .iter()
            .zip(dlo)
            .zip(dhi)
            .all(|((v, lo), hi)| *v >= lo - WITNESS_TOL && *v <= hi + WITNESS_TOL);
    }
    let characterizer = decide(&query.characterizer, witness)?;
    let output = net.forward(witness, query.cut_layer, net.depth())?;
    let risk_satisfied = query
        .risk
        .clauses
        .iter()
        .all(|c| c.relaxed_violation(&output) <= WITNESS_TOL);
    Ok(Replay {
        in_bounds,
        characterizer,
        risk_satisfied,
        output,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VerifyOptions {
    pub budget: Budget,
    /// Parallel search workers; 1 gives a deterministic search order.
    pub workers: usize,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        VerifyOptions {
            budget: Budget::default(),
            workers: 1,
        }
    }
}

/// Single-worker verification.
pub fn verify(net: &Network, query: &SafetyQuery, budget: Budget) -> Result<Verdict> {
    verify_with(net, query, &VerifyOptions { budget, workers: 1 })
}

pub fn verify_with(net: &Network, query: &SafetyQuery, opts: &VerifyOptions) -> Result<Verdict> {
    let start = Instant::now();
    let problem = encode(net, query)?;
    let search = Search {
        net,
        query,
        problem: &problem,
        budget: opts.budget,
        start,
        nodes: AtomicUsize::new(0),
        lp_solves: AtomicUsize::new(0),
        stop: AtomicBool::new(false),
    };
    let outcome = if opts.workers <= 1 {
        search.run_sequential()?
    } else {
        search.run_parallel(opts.workers)?
    };
    let stats = SearchStats {
        nodes_explored: search.nodes.load(Ordering::SeqCst),
        lp_solves: search.lp_solves.load(Ordering::SeqCst),
        wall_time: start.elapsed(),
    };
    let conditional = query.bounds.provenance == Provenance::Dataset;
    Ok(match outcome {
        SearchOutcome::Exhausted => Verdict {
            status: Status::Safe,
            witness: None,
            witness_output: None,
            conditional,
            stats,
            warnings: Vec::new(),
        },
        SearchOutcome::OutOfBudget => Verdict {
            status: Status::Unknown,
            witness: None,
            witness_output: None,
            conditional,
            stats,
            warnings: Vec::new(),
        },
        SearchOutcome::Found(w) => Verdict {
            status: Status::Unsafe,
            witness: Some(w.point),
            witness_output: Some(w.output),
            conditional,
            stats,
            warnings: w.warnings,
        },
    })
}

/// Binary fixings along the path from the root; `None` is still relaxed.
type Node = Vec<Option<bool>>;

struct Witness {
    point: Vec<f64>,
    output: Vec<f64>,
    warnings: Vec<String>,
}

enum NodeResult {
    Pruned,
    Found(Witness),
    /// Children in exploration order.
    Branch([Node; 2]),
}

enum SearchOutcome {
    Exhausted,
    OutOfBudget,
    Found(Witness),
}

struct Search<'a> {
    net: &'a Network,
    query: &'a SafetyQuery,
    problem: &'a MilpProblem,
    budget: Budget,
    start: Instant,
    nodes: AtomicUsize,
    lp_solves: AtomicUsize,
    stop: AtomicBool,
}

impl Search<'_> {
    fn over_budget(&self) -> bool {
        self.nodes.load(Ordering::SeqCst) >= self.budget.max_nodes
            || self.start.elapsed().as_secs_f64() > self.budget.max_seconds
    }

    fn run_sequential(&self) -> Result<SearchOutcome> {
        let mut stack: Vec<Node> = vec![vec![None; self.problem.binaries.len()]];
        while let Some(node) = stack.pop() {
            if self.over_budget() {
                return Ok(SearchOutcome::OutOfBudget);
            }
            match self.process(&node)? {
                NodeResult::Pruned => {}
                NodeResult::Found(w) => return Ok(SearchOutcome::Found(w)),
                NodeResult::Branch([first, second]) => {
                    stack.push(second);
                    stack.push(first);
                }
            }
        }
        Ok(SearchOutcome::Exhausted)
    }

    fn run_parallel(&self, workers: usize) -> Result<SearchOutcome> {
        struct Shared {
            stack: Vec<Node>,
            active: usize,
            result: Option<Result<SearchOutcome>>,
        }
        let shared = Mutex::new(Shared {
            stack: vec![vec![None; self.problem.binaries.len()]],
            active: 0,
            result: None,
        });
        let wake = Condvar::new();
        std::thread::scope(|s| {
            for _ in 0..workers {
                s.spawn(|| loop {
                    let node = {
                        let mut g = shared.lock().expect("search lock");
                        loop {
                            if g.result.is_some() {
                                return;
                            }
                            if let Some(n) = g.stack.pop() {
                                if self.over_budget() {
                                    g.result = Some(Ok(SearchOutcome::OutOfBudget));
                                    self.stop.store(true, Ordering::SeqCst);
                                    wake.notify_all();
                                    return;
                                }
                                g.active += 1;
                                break n;
                            }
                            if g.active == 0 {
                                g.result = Some(Ok(SearchOutcome::Exhausted));
                                wake.notify_all();
                                return;
                            }
                            g = wake.wait(g).expect("search lock");
                        }
                    };
                    let res = self.process(&node);
                    let mut g = shared.lock().expect("search lock");
                    g.active -= 1;
                    match res {
                        Ok(NodeResult::Pruned) => {}
                        Ok(NodeResult::Branch([first, second])) => {
                            g.stack.push(second);
                            g.stack.push(first);
                        }
                        Ok(NodeResult::Found(w)) => {
                            if g.result.is_none() {
                                g.result = Some(Ok(SearchOutcome::Found(w)));
                            }
                            self.stop.store(true, Ordering::SeqCst);
                        }
                        Err(e) => {
                            if g.result.is_none() {
                                g.result = Some(Err(e));
                            }
                            self.stop.store(true, Ordering::SeqCst);
                        }
                    }
                    wake.notify_all();
                });
            }
        });
        shared
            .into_inner()
            .expect("search lock")
            .result
            .unwrap_or(Ok(SearchOutcome::Exhausted))
    }

    fn node_lp(&self, node: &Node) -> LinearProgram {
        let mut lp = self.problem.lp.clone();
        for (&var, fix) in self.problem.binaries.iter().zip(node) {
            if let Some(v) = fix {
                let v = if *v { 1.0 } else { 0.0 };
                lp.lower[var] = v;
                lp.upper[var] = v;
            }
        }
        lp
    }

    fn solve(&self, lp: &LinearProgram) -> Result<Option<Vec<f64>>> {
        self.lp_solves.fetch_add(1, Ordering::SeqCst);
        let out = lp_solve(lp)?;
        Ok(match out.status {
            LpStatus::Optimal => out.point,
            LpStatus::Infeasible => None,
            LpStatus::Unbounded => {
                return Err(Error::NumericalBreakdown("feasibility LP reported unbounded".into()))
            }
        })
    }

    fn process(&self, node: &Node) -> Result<NodeResult> {
        if self.stop.load(Ordering::SeqCst) {
            return Ok(NodeResult::Pruned);
        }
        self.nodes.fetch_add(1, Ordering::SeqCst);
        let lp = self.node_lp(node);
        let Some(point) = self.solve(&lp)? else {
            return Ok(NodeResult::Pruned);
        };

        // most fractional free binary, lowest index on ties
        let mut branch: Option<(usize, f64)> = None;
        for (k, (&var, fix)) in self.problem.binaries.iter().zip(node).enumerate() {
            if fix.is_some() {
                continue;
            }
            let v = point[var];
            if v.min(1.0 - v) > INTEGRALITY_TOL
                && branch.is_none_or(|(b, _)| (v - 0.5).abs() < (point[self.problem.binaries[b]] - 0.5).abs())
            {
                branch = Some((k, v));
            }
        }
        if branch.is_none() {
            let phases: Node = self
                .problem
                .binaries
                .iter()
                .zip(node)
                .map(|(&var, fix)| Some(fix.unwrap_or(point[var] >= 0.5)))
                .collect();
            if let Some(w) = self.extract_witness(&phases, &point)? {
                return Ok(NodeResult::Found(w));
            }
            // rounding broke feasibility; branch on the least integral free binary
            branch = self
                .problem
                .binaries
                .iter()
                .zip(node)
                .enumerate()
                .filter(|(_, (_, fix))| fix.is_none())
                .map(|(k, (&var, _))| (k, point[var]))
                .min_by(|a, b| (a.1 - 0.5).abs().total_cmp(&(b.1 - 0.5).abs()));
            if branch.is_none() {
                return Err(Error::NumericalBreakdown(
                    "fully fixed node is feasible but yields no witness".into(),
                ));
            }
        }
        let (k, v) = branch.expect("branch variable");
        let closer = v >= 0.5;
        let mut first = node.clone();
        first[k] = Some(closer);
        let mut second = node.clone();
        second[k] = Some(!closer);
        Ok(NodeResult::Branch([first, second]))
    }

    /// With every binary fixed, re-solves with slack on the characterizer
    /// row, the risk rows and each ReLU's phase condition, pulling the point
    /// off boundaries where concrete evaluation could flip a decision. The
    /// polished point (or the leaf itself) is then replayed.
    fn extract_witness(&self, phases: &Node, leaf: &[f64]) -> Result<Option<Witness>> {
        let mut lp = self.node_lp(phases);
        let margin = |lp: &mut LinearProgram| {
            let t = lp.add_var(0.0, POLISH_MARGIN_CAP);
            lp.objective[t] = -1.0;
            t
        };
        for row in std::iter::once(self.problem.logit_row).chain(self.problem.risk_rows.iter().copied()) {
            let t = margin(&mut lp);
            let c = &mut lp.constraints[row];
            let sign = if c.relation == Relation::Ge { -1.0 } else { 1.0 };
            c.coeffs.push((t, sign));
        }
        let fixed = self.problem.binaries.iter().zip(phases);
        for ((_, phase), relu) in fixed.zip(self.problem.relus.iter().filter(|r| r.binary.is_some())) {
            let t = margin(&mut lp);
            // active: x >= t, inactive: x <= -t
            let (coef, rel) = if phase.expect("fixed") { (-1.0, Relation::Ge) } else { (1.0, Relation::Le) };
            lp.add_constraint(vec![(relu.input, 1.0), (t, coef)], rel, 0.0);
        }
        let mut candidates = Vec::new();
        if let Some(p) = self.solve(&lp)? {
            candidates.push(p);
        } else if self.problem.binaries.iter().any(|&var| leaf[var] != 0.0 && leaf[var] != 1.0) {
            return Ok(None);
        }
        candidates.push(leaf.to_vec());
        // degenerate regions can pin the witness to a decision boundary where
        // LP round-off flips the outcome; a grid-snapped copy often lands on it exactly
        let snapped: Vec<Vec<f64>> = candidates
            .iter()
            .map(|p| p.iter().map(|v| (v * 1e9).round() / 1e9).collect())
            .collect();
        candidates.extend(snapped);

        let b = &self.query.bounds;
        let mut fallback = None;
        for p in candidates {
            let point: Vec<f64> = self
                .problem
                .cut_vars
                .iter()
                .enumerate()
                .map(|(i, &var)| p[var].clamp(b.lo[i], b.hi[i]))
                .collect();
            let replay = replay_witness(self.net, self.query, &point)?;
            let mut warnings = Vec::new();
            if self.query.risk.clauses.iter().any(|c| c.op.is_strict() && !c.holds(&replay.output)) {
                warnings.push("boundary_witness".to_string());
            }
            if replay.all_hold() {
                return Ok(Some(Witness {
                    point,
                    output: replay.output,
                    warnings,
                }));
            }
            if fallback.is_none() {
                warnings.push("witness_replay_failed".to_string());
                fallback = Some(Witness {
                    point,
                    output: replay.output,
                    warnings,
                });
            }
        }
        Ok(fallback)
    }
}
