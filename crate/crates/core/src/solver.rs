//! Levenberg-Marquardt over the factor graph with a sparse Cholesky solve
//! of the damped normal equations, plus an incremental session that
//! re-optimizes after every update.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector, SMatrix, SVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Factor, FactorGraph, FactorKind, State, STATE_DIM};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "size")]
pub enum IncrementalMode {
    FullBatch,
    SlidingWindow(usize),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverConfig {
    pub max_iterations: usize,
    /// Stop when an accepted step lowers the cost by less than this fraction.
    pub cost_tolerance: f64,
    pub step_tolerance: f64,
    pub initial_lambda: f64,
    pub lambda_up: f64,
    pub lambda_down: f64,
    pub mode: IncrementalMode,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            max_iterations: 50,
            cost_tolerance: 1e-10,
            step_tolerance: 1e-9,
            initial_lambda: 1e-5,
            lambda_up: 10.0,
            lambda_down: 10.0,
            mode: IncrementalMode::FullBatch,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.cost_tolerance > 0.0 && self.step_tolerance > 0.0) {
            return Err(Error::Config("solver: tolerances must be positive".into()));
        }
        if !(self.lambda_up > 1.0 && self.lambda_down > 1.0) {
            return Err(Error::Config("solver: lambda factors must exceed 1".into()));
        }
        if !(self.initial_lambda >= 0.0) {
            return Err(Error::Config("solver: initial lambda must be non-negative".into()));
        }
        if let IncrementalMode::SlidingWindow(0) = self.mode {
            return Err(Error::Config("solver: sliding window size must be positive".into()));
        }
        Ok(())
    }
}

/// λ above which the optimizer gives up.
pub const MAX_LAMBDA: f64 = 1e12;
/// Pivot tolerance relative to the matrix diagonal.
const PIVOT_TOLERANCE: f64 = 1e-12;

/// Whitened residual rows of one factor with its Jacobian blocks.
#[derive(Clone, Debug)]
pub struct FactorRows {
    pub offset: usize,
    pub blocks: Vec<(usize, DMatrix<f64>)>,
}

/// Whitened linearization `J δ + r` of the active factors.
#[derive(Clone, Debug)]
pub struct LinearSystem {
    pub rows: Vec<FactorRows>,
    pub residual: DVector<f64>,
    /// Column block of each variable, `None` when held fixed.
    pub column_of: Vec<Option<usize>>,
    /// Variables in column-block order.
    pub variables: Vec<usize>,
}

impl LinearSystem {
    pub fn cost(&self) -> f64 {
        self.residual.norm_squared()
    }

    pub fn ncols(&self) -> usize {
        self.variables.len() * STATE_DIM
    }

    /// Dense Jacobian, for tests and small problems.
    pub fn jacobian_dense(&self) -> DMatrix<f64> {
        let mut j = DMatrix::zeros(self.residual.len(), self.ncols());
        for fr in &self.rows {
            for (var, block) in &fr.blocks {
                if let Some(c) = self.column_of[*var] {
                    j.view_mut((fr.offset, c * STATE_DIM), block.shape()).copy_from(block);
                }
            }
        }
        j
    }

    fn normal_equations(&self) -> (BTreeMap<(usize, usize), DMatrix<f64>>, DVector<f64>) {
        let nb = self.variables.len();
        let mut h: BTreeMap<(usize, usize), DMatrix<f64>> = BTreeMap::new();
        for c in 0..nb {
            h.insert((c, c), DMatrix::zeros(STATE_DIM, STATE_DIM));
        }
        let mut g = DVector::zeros(nb * STATE_DIM);
        for fr in &self.rows {
            let r = self.residual.rows(fr.offset, fr.blocks.first().map_or(0, |b| b.1.nrows()));
            let active: Vec<(usize, &DMatrix<f64>)> = fr
                .blocks
                .iter()
                .filter_map(|(v, j)| self.column_of[*v].map(|c| (c, j)))
                .collect();
            for &(ci, ji) in &active {
                let mut gi = g.rows_mut(ci * STATE_DIM, STATE_DIM);
                gi += ji.transpose() * r;
                for &(cj, jj) in &active {
                    if ci <= cj {
                        *h.entry((ci, cj)).or_insert_with(|| DMatrix::zeros(STATE_DIM, STATE_DIM)) +=
                            ji.transpose() * jj;
                    }
                }
            }
        }
        (h, g)
    }
}

fn active_factor(f: &Factor, column_of: &[Option<usize>]) -> bool {
    f.keys().iter().any(|k| column_of[*k].is_some())
}

/// Linearizes every factor touching a free variable. `fixed[i]` holds
/// variable `i` constant.
pub fn linearize_with_fixed(graph: &FactorGraph, values: &[State], fixed: &[bool]) -> Result<LinearSystem> {
    if values.len() != graph.num_variables() {
        return Err(Error::LengthMismatch { expected: graph.num_variables(), got: values.len() });
    }
    let mut column_of = vec![None; values.len()];
    let mut variables = Vec::new();
    for (i, col) in column_of.iter_mut().enumerate() {
        if !fixed.get(i).copied().unwrap_or(false) {
            *col = Some(variables.len());
            variables.push(i);
        }
    }
    let factors: Vec<&Factor> = graph.factors().iter().filter(|f| active_factor(f, &column_of)).collect();
    let lin: Vec<(DVector<f64>, Vec<(usize, DMatrix<f64>)>)> =
        factors.par_iter().map(|f| f.linearize_whitened(values)).collect();
    let total: usize = lin.iter().map(|(r, _)| r.len()).sum();
    let mut residual = DVector::zeros(total);
    let mut rows = Vec::with_capacity(lin.len());
    let mut offset = 0;
    for (r, blocks) in lin {
        residual.rows_mut(offset, r.len()).copy_from(&r);
        rows.push(FactorRows { offset, blocks });
        offset += r.len();
    }
    Ok(LinearSystem { rows, residual, column_of, variables })
}

pub fn linearize(graph: &FactorGraph, values: &[State]) -> Result<LinearSystem> {
    linearize_with_fixed(graph, values, &[])
}

/// Elimination order over variable blocks: reverse temporal, or greedy
/// minimum degree when that produces less fill.
pub fn block_ordering(nb: usize, edges: &BTreeSet<(usize, usize)>) -> Vec<usize> {
    let reverse: Vec<usize> = (0..nb).rev().collect();
    let mut adj: Vec<BTreeSet<usize>> = vec![BTreeSet::new(); nb];
    for &(a, b) in edges {
        if a != b {
            adj[a].insert(b);
            adj[b].insert(a);
        }
    }
    let min_degree = {
        let mut g = adj.clone();
        let mut alive = vec![true; nb];
        let mut order = Vec::with_capacity(nb);
        for _ in 0..nb {
            let v = (0..nb)
                .filter(|&v| alive[v])
                .min_by_key(|&v| (g[v].len(), std::cmp::Reverse(v)))
                .expect("a live vertex remains");
            let nbrs: Vec<usize> = g[v].iter().copied().collect();
            for &a in &nbrs {
                g[a].remove(&v);
                for &b in &nbrs {
                    if a != b {
                        g[a].insert(b);
                    }
                }
            }
            g[v].clear();
            alive[v] = false;
            order.push(v);
        }
        order
    };
    if fill(&adj, &min_degree) < fill(&adj, &reverse) {
        min_degree
    } else {
        reverse
    }
}

/// Off-diagonal block count of the Cholesky factor for an elimination order.
fn fill(adj: &[BTreeSet<usize>], order: &[usize]) -> usize {
    let mut g: Vec<BTreeSet<usize>> = adj.to_vec();
    let mut alive = vec![true; adj.len()];
    let mut count = 0;
    for &v in order {
        let nbrs: Vec<usize> = g[v].iter().copied().filter(|&u| alive[u]).collect();
        count += nbrs.len();
        for &a in &nbrs {
            for &b in &nbrs {
                if a != b {
                    g[a].insert(b);
                }
            }
        }
        alive[v] = false;
    }
    count
}

type Block = SMatrix<f64, STATE_DIM, STATE_DIM>;
type BlockVector = SVector<f64, STATE_DIM>;

/// Dense Cholesky of one diagonal block. Pivots at or below the tolerance
/// relative to `original` (the undamped-by-elimination diagonal) are pushed
/// to `bad` as scalar indices from `base` and replaced so the sweep can
/// continue.
fn dense_cholesky(d: &Block, original: &[f64], base: usize, bad: &mut Vec<usize>) -> Block {
    let mut l = Block::zeros();
    for c in 0..STATE_DIM {
        let mut piv = d[(c, c)];
        for k in 0..c {
            piv -= l[(c, k)] * l[(c, k)];
        }
        if !(piv > PIVOT_TOLERANCE * original[c].abs()) || !piv.is_finite() {
            bad.push(base + c);
            piv = original[c].abs().max(1.0);
        }
        let root = piv.sqrt();
        l[(c, c)] = root;
        for r in c + 1..STATE_DIM {
            let mut v = d[(r, c)];
            for k in 0..c {
                v -= l[(r, k)] * l[(c, k)];
            }
            l[(r, c)] = v / root;
        }
    }
    l
}

/// Block lower Cholesky factor in elimination-position order. Column `j`
/// keeps the inverse of its diagonal factor and the blocks below it sorted
/// by row.
struct BlockCholesky {
    diag_inv: Vec<Block>,
    below: Vec<Vec<(usize, Block)>>,
}

impl BlockCholesky {
    /// Right-looking factorization of a lower triangle given as one map per
    /// column keyed by row position.
    fn factor(mut a: Vec<BTreeMap<usize, Block>>) -> std::result::Result<Self, Vec<usize>> {
        let nb = a.len();
        let original: Vec<f64> =
            a.iter().enumerate().flat_map(|(j, col)| col.get(&j).map_or([0.0; STATE_DIM], |d| d.diagonal().into())).collect();
        let mut diag_inv = Vec::with_capacity(nb);
        let mut below = Vec::with_capacity(nb);
        let mut bad = Vec::new();
        for j in 0..nb {
            let mut col = std::mem::take(&mut a[j]);
            let d = col.remove(&j).unwrap_or_else(Block::zeros);
            let l = dense_cholesky(&d, &original[j * STATE_DIM..(j + 1) * STATE_DIM], j * STATE_DIM, &mut bad);
            let l_inv = l.solve_lower_triangular(&Block::identity()).expect("diagonal is positive");
            let l_inv_t = l_inv.transpose();
            let entries: Vec<(usize, Block)> = col.into_iter().map(|(i, m)| (i, m * l_inv_t)).collect();
            for (p, (i, lij)) in entries.iter().enumerate() {
                for (k, lkj) in &entries[..=p] {
                    *a[*k].entry(*i).or_insert_with(Block::zeros) -= lij * lkj.transpose();
                }
            }
            diag_inv.push(l_inv);
            below.push(entries);
        }
        if bad.is_empty() {
            Ok(BlockCholesky { diag_inv, below })
        } else {
            Err(bad)
        }
    }

    fn solve(&self, b: &mut [BlockVector]) {
        for j in 0..b.len() {
            b[j] = self.diag_inv[j] * b[j];
            let y = b[j];
            for (i, lij) in &self.below[j] {
                b[*i] -= lij * y;
            }
        }
        for j in (0..b.len()).rev() {
            let mut t = b[j];
            for (i, lij) in &self.below[j] {
                t -= lij.transpose() * b[*i];
            }
            b[j] = self.diag_inv[j].transpose() * t;
        }
    }
}

/// Normal equations as a block lower triangle in elimination order.
struct NormalSystem {
    lower: Vec<BTreeMap<usize, Block>>,
    g: DVector<f64>,
    order: Vec<usize>,
    position: Vec<usize>,
}

impl NormalSystem {
    fn new(sys: &LinearSystem) -> Self {
        let (h, _) = sys.normal_equations();
        let edges: BTreeSet<(usize, usize)> = h.keys().copied().filter(|(a, b)| a != b).collect();
        let order = block_ordering(sys.variables.len(), &edges);
        Self::with_order(sys, order)
    }

    /// Reuses an elimination order computed for the same sparsity pattern.
    fn with_order(sys: &LinearSystem, order: Vec<usize>) -> Self {
        let (h, g) = sys.normal_equations();
        let nb = order.len();
        let mut position = vec![0; nb];
        for (p, &b) in order.iter().enumerate() {
            position[b] = p;
        }
        let mut lower: Vec<BTreeMap<usize, Block>> = vec![BTreeMap::new(); nb];
        for ((bi, bj), m) in h {
            let m = Block::from_iterator(m.iter().copied());
            let (pi, pj) = (position[bi], position[bj]);
            if pi >= pj {
                lower[pj].insert(pi, m);
            } else {
                lower[pi].insert(pj, m.transpose());
            }
        }
        NormalSystem { lower, g, order, position }
    }

    /// Solves `(H + λ diag H) δ = −g` in variable-block order.
    fn solve(&self, lambda: f64, variables: &[usize]) -> Result<DVector<f64>> {
        let mut a = self.lower.clone();
        for (j, col) in a.iter_mut().enumerate() {
            if let Some(d) = col.get_mut(&j) {
                for c in 0..STATE_DIM {
                    d[(c, c)] *= 1.0 + lambda;
                }
            }
        }
        let chol = BlockCholesky::factor(a).map_err(|bad| {
            let blocks: BTreeSet<usize> = bad.iter().map(|k| variables[self.order[k / STATE_DIM]]).collect();
            Error::Indeterminate(blocks.into_iter().collect())
        })?;
        let mut rhs = vec![BlockVector::zeros(); self.order.len()];
        for (b, &p) in self.position.iter().enumerate() {
            rhs[p] = -BlockVector::from_iterator(self.g.rows(b * STATE_DIM, STATE_DIM).iter().copied());
        }
        chol.solve(&mut rhs);
        let mut out = DVector::zeros(self.order.len() * STATE_DIM);
        for (b, &p) in self.position.iter().enumerate() {
            out.rows_mut(b * STATE_DIM, STATE_DIM).copy_from(&rhs[p]);
        }
        Ok(out)
    }
}

/// Solves the damped normal equations `(JᵀJ + λ·diag(JᵀJ)) δ = −Jᵀr`.
pub fn solve_normal_equations(sys: &LinearSystem, lambda: f64) -> Result<DVector<f64>> {
    NormalSystem::new(sys).solve(lambda, &sys.variables)
}

/// Applies a step laid out in column-block order.
pub fn retract_all(values: &[State], sys: &LinearSystem, delta: &DVector<f64>) -> Vec<State> {
    let mut out = values.to_vec();
    for (c, &v) in sys.variables.iter().enumerate() {
        out[v] = values[v].retract(delta.rows(c * STATE_DIM, STATE_DIM).as_slice());
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub cost: f64,
    pub lambda: f64,
    pub step_norm: f64,
    pub accepted: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SolverReport {
    pub initial_cost: f64,
    pub final_cost: f64,
    pub iterations: Vec<IterationRecord>,
    pub accepted_steps: usize,
    pub converged: bool,
    pub diverged: bool,
}

impl SolverReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("iteration,cost,lambda,step_norm\n");
        for r in &self.iterations {
            let _ = writeln!(s, "{},{:e},{:e},{:e}", r.iteration, r.cost, r.lambda, r.step_norm);
        }
        s
    }

    /// Costs after each accepted step, starting with the initial cost.
    pub fn accepted_costs(&self) -> Vec<f64> {
        std::iter::once(self.initial_cost)
            .chain(self.iterations.iter().filter(|r| r.accepted).map(|r| r.cost))
            .collect()
    }
}

fn whitened_cost(graph: &FactorGraph, values: &[State], column_of: &[Option<usize>]) -> f64 {
    graph
        .factors()
        .par_iter()
        .filter(|f| active_factor(f, column_of))
        .map(|f| f.cost(values))
        .sum()
}

/// Levenberg-Marquardt from `initial`, holding variables with `fixed[i]`.
pub fn optimize_with_fixed(
    graph: &FactorGraph,
    initial: &[State],
    fixed: &[bool],
    cfg: &SolverConfig,
) -> Result<(Vec<State>, SolverReport)> {
    cfg.validate()?;
    let mut values = initial.to_vec();
    let mut sys = linearize_with_fixed(graph, &values, fixed)?;
    let mut cost = sys.cost();
    let mut report = SolverReport { initial_cost: cost, final_cost: cost, ..Default::default() };
    if sys.variables.is_empty() {
        report.converged = true;
        return Ok((values, report));
    }
    let mut normal = NormalSystem::new(&sys);
    // The undamped system must be positive definite, otherwise damping would
    // silently pick a gauge. Its solution is tried as the first step.
    let mut gauss_newton = Some(normal.solve(0.0, &sys.variables)?);
    let mut lambda = cfg.initial_lambda;
    let mut iteration = 0;
    while iteration < cfg.max_iterations {
        iteration += 1;
        let first = gauss_newton.is_some();
        let step = match gauss_newton.take() {
            Some(d) => Ok(d),
            None => normal.solve(lambda, &sys.variables),
        };
        let delta = match step {
            Ok(d) => d,
            Err(Error::Indeterminate(_)) if lambda > 0.0 => {
                lambda *= cfg.lambda_up;
                if lambda > MAX_LAMBDA {
                    report.diverged = true;
                    break;
                }
                continue;
            }
            Err(e) => return Err(e),
        };
        let step_norm = delta.norm();
        if step_norm < cfg.step_tolerance {
            report.converged = true;
            break;
        }
        let candidate = retract_all(&values, &sys, &delta);
        let new_cost = whitened_cost(graph, &candidate, &sys.column_of);
        let accepted = new_cost.is_finite() && new_cost < cost;
        report.iterations.push(IterationRecord {
            iteration,
            cost: if accepted { new_cost } else { cost },
            lambda: if first { 0.0 } else { lambda },
            step_norm,
            accepted,
        });
        if accepted {
            let relative = (cost - new_cost) / cost.max(f64::MIN_POSITIVE);
            values = candidate;
            cost = new_cost;
            report.accepted_steps += 1;
            if !first {
                lambda /= cfg.lambda_down;
            }
            if relative < cfg.cost_tolerance || cost < 1e-30 {
                report.converged = true;
                break;
            }
            sys = linearize_with_fixed(graph, &values, fixed)?;
            normal = NormalSystem::with_order(&sys, std::mem::take(&mut normal.order));
        } else if !first {
            lambda = if lambda == 0.0 { cfg.initial_lambda.max(1e-9) } else { lambda * cfg.lambda_up };
            if lambda > MAX_LAMBDA {
                report.diverged = true;
                break;
            }
        }
    }
    report.final_cost = cost;
    Ok((values, report))
}

pub fn optimize(graph: &FactorGraph, initial: &[State], cfg: &SolverConfig) -> Result<(Vec<State>, SolverReport)> {
    optimize_with_fixed(graph, initial, &[], cfg)
}

/// Incremental smoothing by warm-started re-optimization.
#[derive(Clone, Debug)]
pub struct Session {
    graph: FactorGraph,
    cfg: SolverConfig,
    last_report: SolverReport,
}

impl Session {
    pub fn new(cfg: SolverConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Session { graph: FactorGraph::new(), cfg, last_report: SolverReport::default() })
    }

    pub fn graph(&self) -> &FactorGraph {
        &self.graph
    }

    pub fn estimate(&self) -> &[State] {
        self.graph.current_estimate()
    }

    pub fn last_report(&self) -> &SolverReport {
        &self.last_report
    }

    /// Adds `new_variables` states and the given factors, then re-optimizes.
    /// Each new state is initialized from the wheel factor linking it to its
    /// predecessor (or from its prior); velocity and bias are copied.
    pub fn update(&mut self, new_variables: usize, factors: Vec<Factor>) -> Result<&[State]> {
        let first_new = self.graph.num_variables();
        let mut inits = Vec::with_capacity(new_variables);
        for v in first_new..first_new + new_variables {
            let prev = if v == 0 {
                None
            } else if v == first_new {
                Some(self.graph.current_estimate()[v - 1])
            } else {
                inits.last().copied()
            };
            inits.push(initial_guess(v, prev, &factors)?);
        }
        for (i, init) in inits.into_iter().enumerate() {
            self.graph.insert_variable(first_new + i, init)?;
        }
        for f in factors {
            self.graph.add_factor(f)?;
        }
        self.reoptimize()
    }

    /// Like [`Session::update`] with caller-supplied initial values.
    pub fn update_with_initial(&mut self, initial: Vec<State>, factors: Vec<Factor>) -> Result<&[State]> {
        for s in initial {
            self.graph.add_variable(s);
        }
        for f in factors {
            self.graph.add_factor(f)?;
        }
        self.reoptimize()
    }

    fn reoptimize(&mut self) -> Result<&[State]> {
        let n = self.graph.num_variables();
        let fixed: Vec<bool> = match self.cfg.mode {
            IncrementalMode::FullBatch => vec![false; n],
            IncrementalMode::SlidingWindow(w) => (0..n).map(|i| i + w < n).collect(),
        };
        let (values, report) = optimize_with_fixed(&self.graph, self.graph.current_estimate(), &fixed, &self.cfg)?;
        self.graph.set_estimate(values)?;
        self.last_report = report;
        Ok(self.graph.current_estimate())
    }

    pub fn cost(&self) -> f64 {
        self.graph.cost(self.graph.current_estimate())
    }
}

fn initial_guess(v: usize, prev: Option<State>, factors: &[Factor]) -> Result<State> {
    if let Some(prev) = prev {
        for f in factors {
            if let Factor::Relative { kind: FactorKind::Wheel, from, to, measurement, .. } = f {
                if *from == v - 1 && *to == v {
                    return Ok(State { pose: prev.pose.compose(&measurement.inverse()), ..prev });
                }
            }
        }
    }
    for f in factors {
        if let Factor::Prior { var, value, .. } = f {
            if *var == v {
                return Ok(*value);
            }
        }
    }
    Err(Error::MissingOdometry(v.saturating_sub(1), v))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::Pose3;
    use crate::graph::{planar_odometry_measurement, NoiseConfig};

    /// Pins velocity and bias only, which wheel factors leave free.
    fn loose(i: usize, s: State) -> Factor {
        Factor::prior(i, s, &[1e3, 1e3, 1e3, 1e3, 1e3, 1e3, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0]).unwrap()
    }

    fn chain(n: usize, with_prior: bool) -> (FactorGraph, Vec<State>) {
        let nc = NoiseConfig::default();
        let mut g = FactorGraph::new();
        let truth: Vec<State> = (0..n).map(|i| State::at_rest(Pose3::planar(i as f64, 0.0, 0.0))).collect();
        for (i, s) in truth.iter().enumerate() {
            let perturbed = s.retract(&[0.0, 0.0, 0.01 * i as f64, 0.05, -0.03, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
            g.add_variable(perturbed);
        }
        if with_prior {
            let mut sig = nc.prior_sigmas();
            sig[6..].iter_mut().for_each(|s| *s = 1.0);
            g.add_factor(Factor::prior(0, truth[0], &sig).unwrap()).unwrap();
            for i in 1..n {
                g.add_factor(loose(i, truth[i])).unwrap();
            }
        }
        for i in 1..n {
            let z = planar_odometry_measurement(1.0, 0.0);
            g.add_factor(Factor::wheel(i - 1, i, z, nc.wheel_noise(1.0).unwrap())).unwrap();
        }
        (g, truth)
    }

    #[test]
    fn sparse_matches_dense() {
        let (g, _) = chain(5, true);
        let sys = linearize(&g, g.current_estimate()).unwrap();
        let j = sys.jacobian_dense();
        let h = j.transpose() * &j;
        let rhs = -(j.transpose() * &sys.residual);
        let dense = h.clone().cholesky().unwrap().solve(&rhs);
        let sparse = solve_normal_equations(&sys, 0.0).unwrap();
        assert!((dense - sparse).amax() < 1e-9);
    }

    #[test]
    fn missing_prior_is_indeterminate() {
        let (g, _) = chain(4, false);
        let err = optimize(&g, g.current_estimate(), &SolverConfig::default()).unwrap_err();
        assert!(matches!(err, Error::Indeterminate(ref v) if !v.is_empty()));
    }

    #[test]
    fn chain_recovers_truth() {
        let (g, truth) = chain(6, true);
        let (est, rep) = optimize(&g, g.current_estimate(), &SolverConfig::default()).unwrap();
        for (e, t) in est.iter().zip(&truth) {
            assert!((e.pose.translation - t.pose.translation).norm() < 1e-6);
        }
        let costs = rep.accepted_costs();
        assert!(costs.windows(2).all(|w| w[1] <= w[0]));
        let (_, again) = optimize(&g, &est, &SolverConfig::default()).unwrap();
        assert_eq!(again.accepted_steps, 0);
        assert!(again.converged);
    }

    #[test]
    fn ordering_prefers_no_fill_on_chain() {
        let edges: BTreeSet<(usize, usize)> = (0..9).map(|i| (i, i + 1)).collect();
        let order = block_ordering(10, &edges);
        let mut adj = vec![BTreeSet::new(); 10];
        for &(a, b) in &edges {
            adj[a].insert(b);
            adj[b].insert(a);
        }
        assert_eq!(fill(&adj, &order), 9);
    }

    #[test]
    fn session_first_update_and_missing_odometry() {
        let nc = NoiseConfig::default();
        let mut s = Session::new(SolverConfig::default()).unwrap();
        let x0 = State::at_rest(Pose3::planar(1.0, 2.0, 0.3));
        let est = s.update(1, vec![Factor::prior(0, x0, &nc.prior_sigmas()).unwrap()]).unwrap();
        assert!((est[0].pose.translation - x0.pose.translation).norm() < 1e-12);
        assert!(matches!(s.update(1, vec![]), Err(Error::MissingOdometry(0, 1))));
    }

    use crate::graph::NoiseModel;

    #[test]
    fn single_prior_is_one_gauss_newton_step() {
        let mut g = FactorGraph::new();
        g.add_variable(State::at_rest(Pose3::planar(0.3, -0.2, 0.0)));
        let target = State::at_rest(Pose3::planar(1.0, 2.0, 0.0));
        g.add_factor(Factor::prior(0, target, &NoiseConfig::default().prior_sigmas()).unwrap()).unwrap();
        let (est, rep) = optimize(&g, g.current_estimate(), &SolverConfig::default()).unwrap();
        assert_eq!(rep.iterations[0].lambda, 0.0);
        assert!(rep.iterations[0].accepted);
        assert!(est[0].pose.boxminus(&target.pose).norm() < 1e-12);
        assert!(rep.final_cost < 1e-20);
    }

    #[test]
    fn heavy_damping_shrinks_the_step() {
        let (g, _) = chain(4, true);
        let sys = linearize(&g, g.current_estimate()).unwrap();
        let gn = solve_normal_equations(&sys, 0.0).unwrap().norm();
        let damped = solve_normal_equations(&sys, 1e10).unwrap().norm();
        assert!(damped < 1e-8 * gn);
    }

    #[test]
    fn odometry_only_update_keeps_previous_states() {
        let nc = NoiseConfig::default();
        let mut s = Session::new(SolverConfig::default()).unwrap();
        s.update(1, vec![Factor::prior(0, State::at_rest(Pose3::identity()), &nc.prior_sigmas()).unwrap()]).unwrap();
        let z = planar_odometry_measurement(1.0, 0.1);
        for i in 1..5 {
            let x = State::at_rest(s.estimate()[i - 1].pose.compose(&z.inverse()));
            s.update(1, vec![Factor::wheel(i - 1, i, z, nc.wheel_noise(1.0).unwrap()), loose(i, x)]).unwrap();
        }
        let before = s.estimate().to_vec();
        let x = State::at_rest(before[4].pose.compose(&z.inverse()));
        s.update(1, vec![Factor::wheel(4, 5, z, nc.wheel_noise(1.0).unwrap()), loose(5, x)]).unwrap();
        for (a, b) in before.iter().zip(s.estimate()) {
            assert!(a.pose.boxminus(&b.pose).norm() < SolverConfig::default().step_tolerance);
        }
    }

    #[test]
    fn exact_loop_closure_reduces_endpoint_error() {
        let nc = NoiseConfig::default();
        // Four sides of a 4 m square driven with a 3 % long wheel.
        let truth: Vec<Pose3> = (0..=16)
            .map(|i| {
                let (side, step) = (i / 4, (i % 4) as f64);
                let corners = [(0.0, 0.0), (4.0, 0.0), (4.0, 4.0), (0.0, 4.0)];
                let (x0, y0) = corners[side % 4];
                let yaw = std::f64::consts::FRAC_PI_2 * (side % 4) as f64;
                if i == 16 {
                    Pose3::identity()
                } else {
                    Pose3::planar(x0 + step * yaw.cos(), y0 + step * yaw.sin(), yaw)
                }
            })
            .collect();
        let mut g = FactorGraph::new();
        let mut prior_sig = nc.prior_sigmas();
        prior_sig[6..].iter_mut().for_each(|s| *s = 1.0);
        g.add_variable(State::at_rest(truth[0]));
        g.add_factor(Factor::prior(0, State::at_rest(truth[0]), &prior_sig).unwrap()).unwrap();
        for i in 1..truth.len() {
            let rel = truth[i].inverse().compose(&truth[i - 1]);
            let z = Pose3::new(rel.rotation, rel.translation * 1.03);
            let prev = g.current_estimate()[i - 1];
            g.add_variable(State { pose: prev.pose.compose(&z.inverse()), ..prev });
            g.add_factor(Factor::wheel(i - 1, i, z, nc.wheel_noise(1.0).unwrap())).unwrap();
            g.add_factor(loose(i, State::at_rest(truth[i]))).unwrap();
        }
        let n = truth.len() - 1;
        let (odo, _) = optimize(&g, g.current_estimate(), &SolverConfig::default()).unwrap();
        let closure = truth[n].inverse().compose(&truth[0]);
        g.add_factor(Factor::gpr(0, n, closure, NoiseModel::from_sigmas(&[0.01; 6]).unwrap())).unwrap();
        let initial = g.cost(g.current_estimate());
        let (fixed, rep) = optimize(&g, &odo, &SolverConfig::default()).unwrap();
        let err = |est: &[State]| (est[n].pose.translation - truth[n].translation).norm();
        assert!(rep.final_cost < initial);
        assert!(err(&fixed) < 0.1 * err(&odo), "{} vs {}", err(&fixed), err(&odo));
    }

    #[test]
    fn sliding_window_holds_old_states() {
        let (g, _) = chain(6, true);
        let fixed = [true, true, true, false, false, false];
        let (est, _) = optimize_with_fixed(&g, g.current_estimate(), &fixed, &SolverConfig::default()).unwrap();
        for i in 0..3 {
            assert_eq!(est[i], g.current_estimate()[i]);
        }
        assert_ne!(est[5], g.current_estimate()[5]);
    }
}
