//! No-U-Turn sampler with windowed warmup adaptation, and convergence
//! diagnostics.
//!
//! The transition is the multinomial NUTS variant: trajectories are doubled
//! in a random direction, states are drawn from each subtree in proportion to
//! their Boltzmann weight and the generalized no-U-turn criterion is checked
//! across merged subtrees. Warmup tunes the step size by dual averaging and a
//! diagonal inverse metric from windowed sample variances.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Energy error beyond which a trajectory is flagged divergent.
const MAX_DELTA_H: f64 = 1000.0;
const INIT_RETRIES: usize = 100;

/// Differentiable unnormalized log density.
pub trait LogDensity: Sync {
    fn dim(&self) -> usize;

    /// Returns `log p(x)` and writes its gradient into `grad`.
    fn log_density_grad(&self, x: &[f64], grad: &mut [f64]) -> Result<f64>;

    /// Starting point for a chain. Defaults to uniform on `[-2, 2]^dim`.
    fn initial_point(&self, rng: &mut ChaCha8Rng) -> Vec<f64> {
        (0..self.dim()).map(|_| rng.random_range(-2.0..2.0)).collect()
    }
}

/// Adapter for a pair of closures.
pub struct FnDensity<F, G> {
    pub dim: usize,
    pub log_density: F,
    pub gradient: G,
}

impl<F, G> LogDensity for FnDensity<F, G>
where
    F: Fn(&[f64]) -> f64 + Sync,
    G: Fn(&[f64], &mut [f64]) + Sync,
{
    fn dim(&self) -> usize {
        self.dim
    }

    fn log_density_grad(&self, x: &[f64], grad: &mut [f64]) -> Result<f64> {
        (self.gradient)(x, grad);
        Ok((self.log_density)(x))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplerConfig {
    pub chains: usize,
    pub draws: usize,
    pub warmup: usize,
    pub seed: u64,
    pub target_accept: f64,
    pub max_tree_depth: usize,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            chains: 4,
            draws: 1000,
            warmup: 500,
            seed: 0,
            target_accept: 0.8,
            max_tree_depth: 10,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.chains == 0 || self.draws == 0 {
            return Err(Error::invalid("chains and draws must be at least 1"));
        }
        if !(self.target_accept > 0.0 && self.target_accept < 1.0) {
            return Err(Error::invalid("target_accept must be in (0, 1)"));
        }
        if self.max_tree_depth == 0 {
            return Err(Error::invalid("max_tree_depth must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainDiagnostics {
    /// One value per parameter; empty with fewer than two chains.
    pub split_rhat: Vec<f64>,
    pub acceptance_rate: Vec<f64>,
    pub divergence_count: Vec<usize>,
    /// Post-warmup transitions that hit the maximum tree depth.
    pub max_depth_hits: Vec<usize>,
    pub step_size: Vec<f64>,
    pub leapfrog_steps: Vec<u64>,
}

#[derive(Debug, Clone)]
pub struct SamplerOutput {
    /// `chains[c][t]` is draw `t` of chain `c`.
    pub chains: Vec<Vec<Vec<f64>>>,
    pub diagnostics: ChainDiagnostics,
}

#[derive(Debug, Clone)]
struct State {
    q: Vec<f64>,
    p: Vec<f64>,
    grad: Vec<f64>,
    logp: f64,
}

struct Hamiltonian<'a, D: LogDensity + ?Sized> {
    density: &'a D,
    inv_metric: Vec<f64>,
}

impl<D: LogDensity + ?Sized> Hamiltonian<'_, D> {
    fn kinetic(&self, p: &[f64]) -> f64 {
        0.5 * p.iter().zip(&self.inv_metric).map(|(p, m)| p * p * m).sum::<f64>()
    }

    fn energy(&self, s: &State) -> f64 {
        let h = -s.logp + self.kinetic(&s.p);
        if h.is_nan() {
            f64::INFINITY
        } else {
            h
        }
    }

    fn p_sharp(&self, p: &[f64]) -> Vec<f64> {
        p.iter().zip(&self.inv_metric).map(|(p, m)| p * m).collect()
    }

    fn sample_momentum(&self, s: &mut State, rng: &mut ChaCha8Rng) {
        for (p, m) in s.p.iter_mut().zip(&self.inv_metric) {
            let z: f64 = StandardNormal.sample(rng);
            *p = z / m.sqrt();
        }
    }

    fn evaluate(&self, s: &mut State) {
        s.logp = match self.density.log_density_grad(&s.q, &mut s.grad) {
            Ok(v) if v.is_finite() && s.grad.iter().all(|g| g.is_finite()) => v,
            _ => f64::NEG_INFINITY,
        };
    }

    fn leapfrog(&self, s: &mut State, eps: f64) {
        if !s.logp.is_finite() {
            return;
        }
        for (p, g) in s.p.iter_mut().zip(&s.grad) {
            *p += 0.5 * eps * g;
        }
        for ((q, p), m) in s.q.iter_mut().zip(&s.p).zip(&self.inv_metric) {
            *q += eps * m * p;
        }
        self.evaluate(s);
        if !s.logp.is_finite() {
            return;
        }
        for (p, g) in s.p.iter_mut().zip(&s.grad) {
            *p += 0.5 * eps * g;
        }
    }
}

#[inline]
fn log_sum_exp2(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn add(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

fn no_u_turn(p_sharp_minus: &[f64], p_sharp_plus: &[f64], rho: &[f64]) -> bool {
    dot(p_sharp_plus, rho) > 0.0 && dot(p_sharp_minus, rho) > 0.0
}

/// Per-transition bookkeeping of the tree builder.
struct Tree<'a, 'h, D: LogDensity + ?Sized> {
    ham: &'h Hamiltonian<'a, D>,
    eps: f64,
    h0: f64,
    n_leapfrog: u64,
    sum_metro_prob: f64,
    divergent: bool,
}

struct TreeEnds {
    p_sharp_beg: Vec<f64>,
    p_sharp_end: Vec<f64>,
    p_beg: Vec<f64>,
    p_end: Vec<f64>,
}

impl<D: LogDensity + ?Sized> Tree<'_, '_, D> {
    /// Extends the trajectory from `z` by `2^depth` leapfrog steps in
    /// direction `sign`. Returns `false` if the subtree is invalid (U-turn or
    /// divergence).
    #[allow(clippy::too_many_arguments)]
    fn build(
        &mut self,
        depth: usize,
        z: &mut State,
        z_propose: &mut State,
        ends: &mut TreeEnds,
        rho: &mut [f64],
        sign: f64,
        log_sum_weight: &mut f64,
        rng: &mut ChaCha8Rng,
    ) -> bool {
        if depth == 0 {
            self.ham.leapfrog(z, sign * self.eps);
            self.n_leapfrog += 1;
            let h = self.ham.energy(z);
            if h - self.h0 > MAX_DELTA_H {
                self.divergent = true;
            }
            *log_sum_weight = log_sum_exp2(*log_sum_weight, self.h0 - h);
            self.sum_metro_prob += if self.h0 - h > 0.0 { 1.0 } else { (self.h0 - h).exp() };
            z_propose.clone_from(z);
            ends.p_sharp_beg = self.ham.p_sharp(&z.p);
            ends.p_sharp_end.clone_from(&ends.p_sharp_beg);
            for (r, p) in rho.iter_mut().zip(&z.p) {
                *r += p;
            }
            ends.p_beg.clone_from(&z.p);
            ends.p_end.clone_from(&z.p);
            return !self.divergent;
        }

        let dim = z.q.len();
        let mut init = TreeEnds {
            p_sharp_beg: vec![0.0; dim],
            p_sharp_end: vec![0.0; dim],
            p_beg: vec![0.0; dim],
            p_end: vec![0.0; dim],
        };
        let mut lsw_init = f64::NEG_INFINITY;
        let mut rho_init = vec![0.0; dim];
        if !self.build(depth - 1, z, z_propose, &mut init, &mut rho_init, sign, &mut lsw_init, rng) {
            return false;
        }

        let mut z_propose_final = z.clone();
        let mut fin = TreeEnds {
            p_sharp_beg: vec![0.0; dim],
            p_sharp_end: vec![0.0; dim],
            p_beg: vec![0.0; dim],
            p_end: vec![0.0; dim],
        };
        let mut lsw_final = f64::NEG_INFINITY;
        let mut rho_final = vec![0.0; dim];
        if !self.build(depth - 1, z, &mut z_propose_final, &mut fin, &mut rho_final, sign, &mut lsw_final, rng) {
            return false;
        }

        let lsw_subtree = log_sum_exp2(lsw_init, lsw_final);
        *log_sum_weight = log_sum_exp2(*log_sum_weight, lsw_subtree);
        if lsw_final > lsw_subtree || rng.random::<f64>() < (lsw_final - lsw_subtree).exp() {
            *z_propose = z_propose_final;
        }

        let rho_subtree = add(&rho_init, &rho_final);
        for (r, s) in rho.iter_mut().zip(&rho_subtree) {
            *r += s;
        }

        let mut persist = no_u_turn(&init.p_sharp_beg, &fin.p_sharp_end, &rho_subtree);
        let rho_ext = add(&rho_init, &fin.p_beg);
        persist &= no_u_turn(&init.p_sharp_beg, &fin.p_sharp_beg, &rho_ext);
        let rho_ext = add(&rho_final, &init.p_end);
        persist &= no_u_turn(&init.p_sharp_end, &fin.p_sharp_end, &rho_ext);

        ends.p_sharp_beg = init.p_sharp_beg;
        ends.p_beg = init.p_beg;
        ends.p_sharp_end = fin.p_sharp_end;
        ends.p_end = fin.p_end;
        persist
    }
}

struct Transition {
    accept_stat: f64,
    divergent: bool,
    depth_hit: bool,
    n_leapfrog: u64,
}

fn nuts_transition<D: LogDensity + ?Sized>(
    ham: &Hamiltonian<'_, D>,
    current: &mut State,
    eps: f64,
    max_depth: usize,
    rng: &mut ChaCha8Rng,
) -> Transition {
    ham.sample_momentum(current, rng);
    let h0 = ham.energy(current);
    let mut tree = Tree {
        ham,
        eps,
        h0,
        n_leapfrog: 0,
        sum_metro_prob: 0.0,
        divergent: false,
    };

    let mut z_fwd = current.clone();
    let mut z_bck = current.clone();
    let mut z_sample = current.clone();
    let mut z_propose = current.clone();

    let p_sharp0 = ham.p_sharp(&current.p);
    let mut p_sharp_fwd_fwd = p_sharp0.clone();
    let mut p_fwd_bck = current.p.clone();
    let mut p_sharp_fwd_bck = p_sharp0.clone();
    let mut p_bck_fwd = current.p.clone();
    let mut p_sharp_bck_fwd = p_sharp0.clone();
    let mut p_sharp_bck_bck = p_sharp0;

    let mut rho = current.p.clone();
    let mut log_sum_weight = 0.0;
    let mut depth = 0;
    let dim = current.q.len();

    while depth < max_depth {
        let mut rho_fwd = vec![0.0; dim];
        let mut rho_bck = vec![0.0; dim];
        let mut lsw_subtree = f64::NEG_INFINITY;
        let valid;
        if rng.random::<f64>() > 0.5 {
            rho_bck.clone_from(&rho);
            p_bck_fwd.clone_from(&p_fwd_bck);
            p_sharp_bck_fwd.clone_from(&p_sharp_fwd_bck);
            let mut ends = TreeEnds {
                p_sharp_beg: vec![0.0; dim],
                p_sharp_end: vec![0.0; dim],
                p_beg: vec![0.0; dim],
                p_end: vec![0.0; dim],
            };
            valid = tree.build(depth, &mut z_fwd, &mut z_propose, &mut ends, &mut rho_fwd, 1.0, &mut lsw_subtree, rng);
            p_sharp_fwd_bck = ends.p_sharp_beg;
            p_sharp_fwd_fwd = ends.p_sharp_end;
            p_fwd_bck = ends.p_beg;
        } else {
            rho_fwd.clone_from(&rho);
            p_fwd_bck.clone_from(&p_bck_fwd);
            p_sharp_fwd_bck.clone_from(&p_sharp_bck_fwd);
            let mut ends = TreeEnds {
                p_sharp_beg: vec![0.0; dim],
                p_sharp_end: vec![0.0; dim],
                p_beg: vec![0.0; dim],
                p_end: vec![0.0; dim],
            };
            valid = tree.build(depth, &mut z_bck, &mut z_propose, &mut ends, &mut rho_bck, -1.0, &mut lsw_subtree, rng);
            p_sharp_bck_fwd = ends.p_sharp_beg;
            p_sharp_bck_bck = ends.p_sharp_end;
            p_bck_fwd = ends.p_beg;
        }
        if !valid {
            break;
        }
        depth += 1;

        if lsw_subtree > log_sum_weight || rng.random::<f64>() < (lsw_subtree - log_sum_weight).exp() {
            z_sample.clone_from(&z_propose);
        }
        log_sum_weight = log_sum_exp2(log_sum_weight, lsw_subtree);

        rho = add(&rho_bck, &rho_fwd);
        let mut persist = no_u_turn(&p_sharp_bck_bck, &p_sharp_fwd_fwd, &rho);
        let rho_ext = add(&rho_bck, &p_fwd_bck);
        persist &= no_u_turn(&p_sharp_bck_bck, &p_sharp_fwd_bck, &rho_ext);
        let rho_ext = add(&rho_fwd, &p_bck_fwd);
        persist &= no_u_turn(&p_sharp_bck_fwd, &p_sharp_fwd_fwd, &rho_ext);
        if !persist {
            break;
        }
    }

    let n = tree.n_leapfrog.max(1);
    *current = z_sample;
    Transition {
        accept_stat: tree.sum_metro_prob / n as f64,
        divergent: tree.divergent,
        depth_hit: depth >= max_depth,
        n_leapfrog: tree.n_leapfrog,
    }
}

/// Dual-averaging step-size adaptation.
#[derive(Debug, Clone)]
struct DualAveraging {
    mu: f64,
    delta: f64,
    gamma: f64,
    kappa: f64,
    t0: f64,
    counter: f64,
    s_bar: f64,
    x_bar: f64,
}

impl DualAveraging {
    fn new(delta: f64) -> Self {
        Self {
            mu: 0.5_f64.ln(),
            delta,
            gamma: 0.15,
            kappa: 0.75,
            t0: 10.0,
            counter: 0.0,
            s_bar: 0.0,
            x_bar: 0.0,
        }
    }

    fn restart(&mut self, eps: f64) {
        self.counter = 0.0;
        self.s_bar = 0.0;
        self.x_bar = 0.0;
        self.mu = (10.0 * eps).ln();
    }

    fn learn(&mut self, accept_stat: f64) -> f64 {
        self.counter += 1.0;
        let a = accept_stat.min(1.0);
        let eta = 1.0 / (self.counter + self.t0);
        self.s_bar = (1.0 - eta) * self.s_bar + eta * (self.delta - a);
        let x = self.mu - self.s_bar * self.counter.sqrt() / self.gamma;
        let x_eta = self.counter.powf(-self.kappa);
        self.x_bar = (1.0 - x_eta) * self.x_bar + x_eta * x;
        x.exp()
    }

    fn final_step(&self) -> f64 {
        self.x_bar.exp()
    }
}

/// Warmup schedule: initial fast buffer, doubling slow windows for the
/// metric, terminal fast buffer.
#[derive(Debug, Clone)]
struct WindowSchedule {
    warmup: usize,
    init_buffer: usize,
    term_buffer: usize,
    window_size: usize,
    next_window: usize,
    counter: usize,
    enabled: bool,
}

impl WindowSchedule {
    fn new(warmup: usize) -> Self {
        let (mut init_buffer, mut term_buffer, mut window_size) = (75, 50, 25);
        let enabled = warmup >= 20;
        if enabled && init_buffer + term_buffer + window_size > warmup {
            init_buffer = (0.15 * warmup as f64) as usize;
            term_buffer = (0.1 * warmup as f64) as usize;
            window_size = warmup - (init_buffer + term_buffer);
        }
        Self {
            warmup,
            init_buffer,
            term_buffer,
            window_size,
            next_window: init_buffer + window_size - 1,
            counter: 0,
            enabled,
        }
    }

    fn in_window(&self) -> bool {
        self.enabled
            && self.counter >= self.init_buffer
            && self.counter < self.warmup - self.term_buffer
            && self.counter != self.warmup
    }

    fn end_of_window(&self) -> bool {
        self.enabled && self.counter == self.next_window && self.counter != self.warmup
    }

    fn compute_next_window(&mut self) {
        let last = self.warmup - self.term_buffer - 1;
        if self.next_window == last {
            return;
        }
        self.window_size *= 2;
        self.next_window = self.counter + self.window_size;
        if self.next_window != last && self.next_window + 2 * self.window_size >= self.warmup - self.term_buffer {
            self.next_window = last;
        }
    }
}

/// Welford accumulator for per-coordinate variances.
#[derive(Debug, Clone)]
struct VarianceEstimator {
    n: f64,
    mean: Vec<f64>,
    m2: Vec<f64>,
}

impl VarianceEstimator {
    fn new(dim: usize) -> Self {
        Self {
            n: 0.0,
            mean: vec![0.0; dim],
            m2: vec![0.0; dim],
        }
    }

    fn add(&mut self, q: &[f64]) {
        self.n += 1.0;
        for ((m, s), x) in self.mean.iter_mut().zip(self.m2.iter_mut()).zip(q) {
            let delta = x - *m;
            *m += delta / self.n;
            *s += delta * (x - *m);
        }
    }

    /// Sample variance shrunk towards `1e-3`.
    fn regularized(&self) -> Vec<f64> {
        let n = self.n;
        self.m2
            .iter()
            .map(|s| {
                let var = if n > 1.0 { s / (n - 1.0) } else { 1.0 };
                (n / (n + 5.0)) * var + 1e-3 * (5.0 / (n + 5.0))
            })
            .collect()
    }
}

/// Heuristic initial step size: double or halve until the one-step
/// acceptance probability crosses 0.8.
fn find_step_size<D: LogDensity + ?Sized>(
    ham: &Hamiltonian<'_, D>,
    start: &State,
    mut eps: f64,
    rng: &mut ChaCha8Rng,
) -> f64 {
    let log_target = 0.8_f64.ln();
    let trial = |eps: f64, rng: &mut ChaCha8Rng| {
        let mut s = start.clone();
        ham.sample_momentum(&mut s, rng);
        let h0 = ham.energy(&s);
        ham.leapfrog(&mut s, eps);
        let dh = h0 - ham.energy(&s);
        if dh.is_nan() {
            f64::NEG_INFINITY
        } else {
            dh
        }
    };
    let direction = if trial(eps, rng) > log_target { 1.0 } else { -1.0 };
    for _ in 0..100 {
        let dh = trial(eps, rng);
        if direction > 0.0 && !(dh > log_target) {
            break;
        }
        if direction < 0.0 && !(dh < log_target) {
            break;
        }
        eps = if direction > 0.0 { 2.0 * eps } else { 0.5 * eps };
        if !(1e-12..=1e7).contains(&eps) {
            eps = eps.clamp(1e-12, 1e7);
            break;
        }
    }
    eps
}

struct ChainResult {
    draws: Vec<Vec<f64>>,
    accept_sum: f64,
    divergences: usize,
    depth_hits: usize,
    step_size: f64,
    leapfrog: u64,
}

fn chain_rng(seed: u64, chain: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(chain as u64 + 1);
    rng
}

fn initialize<D: LogDensity + ?Sized>(density: &D, rng: &mut ChaCha8Rng) -> Result<State> {
    let dim = density.dim();
    for _ in 0..INIT_RETRIES {
        let q = density.initial_point(rng);
        if q.len() != dim {
            return Err(Error::invalid("initial point has the wrong dimension"));
        }
        let mut s = State {
            q,
            p: vec![0.0; dim],
            grad: vec![0.0; dim],
            logp: f64::NEG_INFINITY,
        };
        let ham = Hamiltonian {
            density,
            inv_metric: vec![1.0; dim],
        };
        ham.evaluate(&mut s);
        if s.logp.is_finite() {
            return Ok(s);
        }
    }
    Err(Error::Initialization(format!(
        "log density was not finite at {INIT_RETRIES} initial points"
    )))
}

fn run_chain<D: LogDensity + ?Sized>(density: &D, cfg: &SamplerConfig, chain: usize) -> Result<ChainResult> {
    let mut rng = chain_rng(cfg.seed, chain);
    let dim = density.dim();
    let mut state = initialize(density, &mut rng)?;
    let mut ham = Hamiltonian {
        density,
        inv_metric: vec![1.0; dim],
    };
    let mut eps = find_step_size(&ham, &state, 1.0, &mut rng);
    let mut da = DualAveraging::new(cfg.target_accept);
    da.restart(eps);
    let mut schedule = WindowSchedule::new(cfg.warmup);
    let mut var_est = VarianceEstimator::new(dim);

    for _ in 0..cfg.warmup {
        let t = nuts_transition(&ham, &mut state, eps, cfg.max_tree_depth, &mut rng);
        eps = da.learn(t.accept_stat);
        if schedule.in_window() {
            var_est.add(&state.q);
        }
        if schedule.end_of_window() {
            schedule.compute_next_window();
            ham.inv_metric = var_est.regularized();
            var_est = VarianceEstimator::new(dim);
            eps = find_step_size(&ham, &state, eps, &mut rng);
            da.restart(eps);
        }
        schedule.counter += 1;
    }
    if cfg.warmup > 0 {
        eps = da.final_step();
    }

    let mut out = ChainResult {
        draws: Vec::with_capacity(cfg.draws),
        accept_sum: 0.0,
        divergences: 0,
        depth_hits: 0,
        step_size: eps,
        leapfrog: 0,
    };
    for _ in 0..cfg.draws {
        let t = nuts_transition(&ham, &mut state, eps, cfg.max_tree_depth, &mut rng);
        out.accept_sum += t.accept_stat;
        out.divergences += t.divergent as usize;
        out.depth_hits += t.depth_hit as usize;
        out.leapfrog += t.n_leapfrog;
        out.draws.push(state.q.clone());
    }
    Ok(out)
}

/// Runs `cfg.chains` independent chains (in parallel) and returns the
/// post-warmup draws. Results do not depend on thread scheduling.
pub fn nuts_sample<D: LogDensity + ?Sized>(density: &D, cfg: &SamplerConfig) -> Result<SamplerOutput> {
    cfg.validate()?;
    if density.dim() == 0 {
        return Err(Error::invalid("log density has zero dimension"));
    }
    let results: Vec<ChainResult> = (0..cfg.chains)
        .into_par_iter()
        .map(|c| run_chain(density, cfg, c))
        .collect::<Result<_>>()?;
    let chains: Vec<Vec<Vec<f64>>> = results.iter().map(|r| r.draws.clone()).collect();
    let split_rhat = if cfg.chains >= 2 && cfg.draws >= 4 {
        (0..density.dim())
            .map(|j| split_rhat(&parameter_chains(&chains, j)))
            .collect::<Result<_>>()?
    } else {
        Vec::new()
    };
    let diagnostics = ChainDiagnostics {
        split_rhat,
        acceptance_rate: results.iter().map(|r| r.accept_sum / cfg.draws as f64).collect(),
        divergence_count: results.iter().map(|r| r.divergences).collect(),
        max_depth_hits: results.iter().map(|r| r.depth_hits).collect(),
        step_size: results.iter().map(|r| r.step_size).collect(),
        leapfrog_steps: results.iter().map(|r| r.leapfrog).collect(),
    };
    Ok(SamplerOutput { chains, diagnostics })
}

/// Draws of parameter `j`, one vector per chain.
pub fn parameter_chains(chains: &[Vec<Vec<f64>>], j: usize) -> Vec<Vec<f64>> {
    chains.iter().map(|c| c.iter().map(|d| d[j]).collect()).collect()
}

fn mean_var(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, var)
}

/// Split potential scale reduction factor for one parameter.
///
/// Each chain is cut in half (the middle draw is dropped for odd lengths).
/// Returns exactly 1 when every half has zero variance.
pub fn split_rhat(chains: &[Vec<f64>]) -> Result<f64> {
    if chains.len() < 2 {
        return Err(Error::invalid("split R-hat needs at least two chains"));
    }
    let len = chains[0].len();
    if chains.iter().any(|c| c.len() != len) {
        return Err(Error::invalid("chains have unequal lengths"));
    }
    if len < 4 {
        return Err(Error::invalid("split R-hat needs at least four draws per chain"));
    }
    let half = len / 2;
    let halves: Vec<&[f64]> = chains
        .iter()
        .flat_map(|c| [&c[..half], &c[len - half..]])
        .collect();
    let stats: Vec<(f64, f64)> = halves.iter().map(|h| mean_var(h)).collect();
    let within = stats.iter().map(|s| s.1).sum::<f64>() / stats.len() as f64;
    if within == 0.0 {
        return Ok(1.0);
    }
    let means: Vec<f64> = stats.iter().map(|s| s.0).collect();
    let n = half as f64;
    let between = n * mean_var(&means).1;
    Ok((((n - 1.0) / n * within + between / n) / within).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Gaussian {
        var: Vec<f64>,
    }

    impl LogDensity for Gaussian {
        fn dim(&self) -> usize {
            self.var.len()
        }

        fn log_density_grad(&self, x: &[f64], grad: &mut [f64]) -> Result<f64> {
            let mut lp = 0.0;
            for i in 0..x.len() {
                lp -= 0.5 * x[i] * x[i] / self.var[i];
                grad[i] = -x[i] / self.var[i];
            }
            Ok(lp)
        }
    }

    struct Correlated {
        rho: f64,
    }

    impl LogDensity for Correlated {
        fn dim(&self) -> usize {
            2
        }

        fn log_density_grad(&self, x: &[f64], grad: &mut [f64]) -> Result<f64> {
            let c = 1.0 / (1.0 - self.rho * self.rho);
            let (a, b) = (x[0], x[1]);
            grad[0] = -c * (a - self.rho * b);
            grad[1] = -c * (b - self.rho * a);
            Ok(-0.5 * c * (a * a - 2.0 * self.rho * a * b + b * b))
        }
    }

    fn pooled(out: &SamplerOutput, j: usize) -> Vec<f64> {
        out.chains.iter().flat_map(|c| c.iter().map(move |d| d[j])).collect()
    }

    fn moments(x: &[f64]) -> (f64, f64) {
        mean_var(x)
    }

    #[test]
    fn leapfrog_conserves_energy_for_small_steps() {
        let g = Gaussian { var: vec![1.0] };
        let ham = Hamiltonian {
            density: &g,
            inv_metric: vec![1.0],
        };
        let mut s = State {
            q: vec![1.0],
            p: vec![0.0],
            grad: vec![0.0],
            logp: 0.0,
        };
        ham.evaluate(&mut s);
        let h0 = ham.energy(&s);
        ham.leapfrog(&mut s, 0.01);
        assert!((ham.energy(&s) - h0).abs() <= 1e-4);
    }

    #[test]
    fn standard_normal_calibration() {
        let g = Gaussian { var: vec![1.0] };
        let out = nuts_sample(&g, &SamplerConfig::default()).unwrap();
        assert_eq!(out.chains.len(), 4);
        assert!(out.chains.iter().all(|c| c.len() == 1000));
        let (mean, var) = moments(&pooled(&out, 0));
        assert!(mean.abs() <= 0.1, "mean {mean}");
        assert!((0.85..=1.15).contains(&var), "var {var}");
        assert!(out.diagnostics.split_rhat[0] <= 1.05);
        for a in &out.diagnostics.acceptance_rate {
            assert!((a - 0.8).abs() <= 0.1, "acceptance {a}");
        }
    }

    #[test]
    fn anisotropic_variances_are_recovered() {
        let g = Gaussian { var: vec![1.0, 100.0] };
        let out = nuts_sample(&g, &SamplerConfig { seed: 3, ..Default::default() }).unwrap();
        for (j, target) in [1.0, 100.0].iter().enumerate() {
            let (_, var) = moments(&pooled(&out, j));
            assert!((var / target - 1.0).abs() <= 0.2, "param {j}: {var}");
        }
    }

    #[test]
    fn correlated_gaussian_correlation() {
        let t = Correlated { rho: 0.8 };
        let out = nuts_sample(&t, &SamplerConfig { draws: 2000, seed: 5, ..Default::default() }).unwrap();
        let a = pooled(&out, 0);
        let b = pooled(&out, 1);
        let (ma, va) = moments(&a);
        let (mb, vb) = moments(&b);
        let cov = a.iter().zip(&b).map(|(x, y)| (x - ma) * (y - mb)).sum::<f64>() / (a.len() as f64 - 1.0);
        let corr = cov / (va * vb).sqrt();
        assert!((corr - 0.8).abs() <= 0.05, "corr {corr}");
    }

    #[test]
    fn identical_seeds_give_identical_chains() {
        let g = Gaussian { var: vec![1.0, 2.0] };
        let cfg = SamplerConfig {
            draws: 200,
            warmup: 100,
            seed: 9,
            ..Default::default()
        };
        let a = nuts_sample(&g, &cfg).unwrap();
        let b = nuts_sample(&g, &cfg).unwrap();
        assert_eq!(a.chains, b.chains);
        let c = nuts_sample(&g, &SamplerConfig { seed: 10, ..cfg }).unwrap();
        assert_ne!(a.chains, c.chains);
    }

    #[test]
    fn closure_adapter_and_short_warmup() {
        let f = FnDensity {
            dim: 1,
            log_density: |x: &[f64]| -0.5 * x[0] * x[0],
            gradient: |x: &[f64], g: &mut [f64]| g[0] = -x[0],
        };
        let out = nuts_sample(
            &f,
            &SamplerConfig {
                chains: 2,
                draws: 50,
                warmup: 10,
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!(out.diagnostics.split_rhat.len(), 1);
        let single = nuts_sample(&f, &SamplerConfig { chains: 1, draws: 10, warmup: 0, ..Default::default() }).unwrap();
        assert!(single.diagnostics.split_rhat.is_empty());
    }

    #[test]
    fn non_finite_everywhere_fails_initialization() {
        let f = FnDensity {
            dim: 2,
            log_density: |_: &[f64]| f64::NAN,
            gradient: |_: &[f64], _: &mut [f64]| {},
        };
        assert!(matches!(
            nuts_sample(&f, &SamplerConfig::default()),
            Err(Error::Initialization(_))
        ));
    }

    #[test]
    fn invalid_configurations() {
        let g = Gaussian { var: vec![1.0] };
        for cfg in [
            SamplerConfig { chains: 0, ..Default::default() },
            SamplerConfig { draws: 0, ..Default::default() },
            SamplerConfig { target_accept: 1.0, ..Default::default() },
            SamplerConfig { max_tree_depth: 0, ..Default::default() },
        ] {
            assert!(nuts_sample(&g, &cfg).is_err());
        }
    }

    #[test]
    fn tree_depth_limit_is_recorded() {
        let g = Gaussian { var: vec![1.0] };
        let out = nuts_sample(
            &g,
            &SamplerConfig {
                chains: 1,
                draws: 50,
                warmup: 0,
                max_tree_depth: 1,
                ..Default::default()
            },
        )
        .unwrap();
        assert!(out.diagnostics.max_depth_hits[0] > 0);
        assert!(out.diagnostics.leapfrog_steps[0] <= 50);
    }

    #[test]
    fn window_schedule_matches_reference_boundaries() {
        // 500 warmup iterations: windows end at 99, 149, 249, 449
        let mut s = WindowSchedule::new(500);
        let mut ends = Vec::new();
        for _ in 0..500 {
            if s.end_of_window() {
                ends.push(s.counter);
                s.compute_next_window();
            }
            s.counter += 1;
        }
        assert_eq!(ends, vec![99, 149, 249, 449]);
    }

    #[test]
    fn rhat_constant_chains() {
        assert_eq!(split_rhat(&[vec![2.0; 10], vec![2.0; 10]]).unwrap(), 1.0);
    }

    #[test]
    fn rhat_iid_chains_near_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let chains: Vec<Vec<f64>> = (0..4)
            .map(|_| (0..1000).map(|_| StandardNormal.sample(&mut rng)).collect())
            .collect();
        let r = split_rhat(&chains).unwrap();
        assert!((0.99..=1.02).contains(&r), "{r}");
    }

    #[test]
    fn rhat_separated_chains() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let chains: Vec<Vec<f64>> = [0.0, 10.0]
            .iter()
            .map(|m| (0..500).map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                m + z
            }).collect::<Vec<f64>>())
            .collect();
        assert!(split_rhat(&chains).unwrap() > 1.2);
    }

    #[test]
    fn rhat_preconditions() {
        assert!(split_rhat(&[vec![1.0, 2.0, 3.0, 4.0]]).is_err());
        assert!(split_rhat(&[vec![1.0, 2.0, 3.0], vec![1.0, 2.0, 3.0]]).is_err());
        assert!(split_rhat(&[vec![1.0; 4], vec![1.0; 6]]).is_err());
        let r = split_rhat(&[vec![1.0, 2.0, 0.0, 3.0, 1.5], vec![0.5, 2.5, 1.0, 1.0, 2.0]]).unwrap();
        assert!(r.is_finite() && r > 0.0);
    }
}
