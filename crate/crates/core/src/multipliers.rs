//! Dynamic Lagrange multipliers.
//!
//! For each parameter group the gradients of the three losses form the
//! columns of `Ĝ` (closed-loop ELBO, open-loop ELBO, RL return). Its nearest
//! matrix with orthonormal columns is `G* = U Vᵀ` from the thin SVD
//! `Ĝ = U Σ Vᵀ`. The multipliers solve `Ĝ λ = σ G* ω`, which gives
//! `λ* = σ V Σ⁻¹ Vᵀ ω` with `σ` the mean singular value. The combined
//! direction `Ĝ λ*` then moves along each orthogonalized objective in
//! proportion to its weight in `ω`.

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{svd_columns, Svd};
use crate::policy::{ParamGroup, ParamStore};

pub const DEFAULT_OMEGA: [f64; 3] = [0.6, 0.3, 0.1];

/// Singular values below this fraction of the largest are clamped.
pub const RANK_FLOOR: f64 = 1e-8;

/// `n × 3` gradient matrix of one parameter group, stored by column.
#[derive(Clone, Debug, PartialEq)]
pub struct GradientMatrix {
    pub columns: [Vec<f64>; 3],
}

impl GradientMatrix {
    pub fn new(columns: [Vec<f64>; 3]) -> Result<Self> {
        let n = columns[0].len();
        if columns.iter().any(|c| c.len() != n) {
            return Err(Error::Shape {
                op: "gradient_matrix",
                detail: format!("column lengths {:?}", columns.each_ref().map(Vec::len)),
            });
        }
        if columns.iter().flatten().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("gradient matrix"));
        }
        Ok(Self { columns })
    }

    /// From a row-major `n × 3` buffer.
    pub fn from_rows(n: usize, data: &[f64]) -> Result<Self> {
        if data.len() != 3 * n {
            return Err(Error::Shape {
                op: "gradient_matrix",
                detail: format!("{} entries for {n} rows", data.len()),
            });
        }
        Self::new(std::array::from_fn(|j| (0..n).map(|i| data[3 * i + j]).collect()))
    }

    pub fn rows(&self) -> usize {
        self.columns[0].len()
    }

    pub fn column_norms(&self) -> [f64; 3] {
        self.columns.each_ref().map(|c| norm(c))
    }

    /// `Ĝ λ`.
    pub fn combine(&self, lambda: &[f64; 3]) -> Vec<f64> {
        let mut out = vec![0.0; self.rows()];
        for (c, &l) in self.columns.iter().zip(lambda) {
            if l != 0.0 {
                for (o, x) in out.iter_mut().zip(c) {
                    *o += l * x;
                }
            }
        }
        out
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// The orthogonal Procrustes approximation of the nonzero columns of `Ĝ`.
#[derive(Clone, Debug)]
pub struct Procrustes {
    /// Indices of the nonzero columns of `Ĝ`, in order.
    pub active: Vec<usize>,
    pub svd: Svd,
    /// Columns of `G* = U Vᵀ` over the active columns.
    pub g_star: Vec<Vec<f64>>,
}

pub fn procrustes(g: &GradientMatrix) -> Procrustes {
    let active: Vec<usize> = (0..3).filter(|&j| g.columns[j].iter().any(|&x| x != 0.0)).collect();
    let svd = svd_columns(active.iter().map(|&j| g.columns[j].clone()).collect());
    let m = active.len();
    let n = g.rows();
    let g_star = (0..m)
        .map(|c| {
            let mut col = vec![0.0; n];
            for (k, u) in svd.u.iter().enumerate() {
                let w = svd.v[c * m + k];
                for (o, x) in col.iter_mut().zip(u) {
                    *o += w * x;
                }
            }
            col
        })
        .collect();
    Procrustes { active, svd, g_star }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MultiplierSolution {
    /// One multiplier per column; zero for columns that were dropped.
    pub lambda: [f64; 3],
    pub sigma: f64,
    /// `‖Ĝ λ* − σ G* ω‖`.
    pub residual: f64,
    /// `‖σ G* ω‖`, the scale the residual is judged against.
    pub target_norm: f64,
    /// Singular values of the active columns, descending.
    pub singular_values: Vec<f64>,
    pub active: [bool; 3],
    /// A singular value fell below the rank floor and was clamped.
    pub rank_deficient: bool,
}

/// Solves `Ĝ λ = σ G* ω` over the nonzero columns of `Ĝ`.
pub fn solve_multipliers(g: &GradientMatrix, omega: [f64; 3]) -> Result<MultiplierSolution> {
    if g.rows() < 3 {
        return Err(Error::Shape {
            op: "solve_multipliers",
            detail: format!("need at least 3 rows, got {}", g.rows()),
        });
    }
    let pr = procrustes(g);
    let m = pr.active.len();
    let mut active = [false; 3];
    for &j in &pr.active {
        active[j] = true;
    }
    if m == 0 {
        return Ok(MultiplierSolution {
            lambda: [0.0; 3],
            sigma: 0.0,
            residual: 0.0,
            target_norm: 0.0,
            singular_values: vec![],
            active,
            rank_deficient: true,
        });
    }
    let s = &pr.svd.sigma;
    let v = &pr.svd.v;
    let sigma = s.iter().sum::<f64>() / m as f64;
    let floor = RANK_FLOOR * s[0];
    let rank_deficient = s.iter().any(|&x| x < floor);
    let w: Vec<f64> = pr.active.iter().map(|&j| omega[j]).collect();

    // λ = σ V Σ⁻¹ Vᵀ ω
    let vt_w: Vec<f64> = (0..m).map(|k| (0..m).map(|r| v[r * m + k] * w[r]).sum()).collect();
    let scaled: Vec<f64> = vt_w.iter().zip(s).map(|(x, &sv)| x / sv.max(floor)).collect();
    let mut lambda = [0.0; 3];
    for (r, &j) in pr.active.iter().enumerate() {
        lambda[j] = sigma * (0..m).map(|k| v[r * m + k] * scaled[k]).sum::<f64>();
    }

    let lhs = g.combine(&lambda);
    let mut target = vec![0.0; g.rows()];
    for (col, &wj) in pr.g_star.iter().zip(&w) {
        for (t, x) in target.iter_mut().zip(col) {
            *t += sigma * wj * x;
        }
    }
    let residual = lhs.iter().zip(&target).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    Ok(MultiplierSolution {
        lambda,
        sigma,
        residual,
        target_norm: norm(&target),
        singular_values: s.clone(),
        active,
        rank_deficient,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    AdamW,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Global norm bound applied to each objective's gradient before combination.
    pub clip_norm: Option<f64>,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            kind: OptimizerKind::AdamW,
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            clip_norm: Some(1.0),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MomentState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

/// Per-group optimizer state.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Optimizer {
    pub cfg: OptimizerConfig,
    pub states: Vec<MomentState>,
}

impl Optimizer {
    pub fn new(cfg: OptimizerConfig) -> Self {
        Self {
            cfg,
            states: vec![MomentState::default(); ParamGroup::ALL.len()],
        }
    }

    /// Descends along `direction`.
    pub fn step(&mut self, group: ParamGroup, params: &mut [f64], direction: &[f64]) {
        let c = self.cfg;
        match c.kind {
            OptimizerKind::Sgd => {
                for (p, d) in params.iter_mut().zip(direction) {
                    *p -= c.lr * d;
                }
            }
            OptimizerKind::AdamW => {
                let st = &mut self.states[group.index()];
                if st.m.len() != params.len() {
                    st.m = vec![0.0; params.len()];
                    st.v = vec![0.0; params.len()];
                    st.t = 0;
                }
                st.t += 1;
                let bc1 = 1.0 - c.beta1.powi(st.t as i32);
                let bc2 = 1.0 - c.beta2.powi(st.t as i32);
                for (((p, d), m), v) in params.iter_mut().zip(direction).zip(&mut st.m).zip(&mut st.v) {
                    *p -= c.lr * c.weight_decay * *p;
                    *m = c.beta1 * *m + (1.0 - c.beta1) * d;
                    *v = c.beta2 * *v + (1.0 - c.beta2) * d * d;
                    *p -= c.lr * (*m / bc1) / ((*v / bc2).sqrt() + c.eps);
                }
            }
        }
    }
}

/// Scales each objective's gradient, taken over all groups, to norm at most
/// `max_norm`. `grads[objective][group]`; returns the norms before clipping.
pub fn clip_global_norm(grads: &mut [Vec<Vec<f64>>; 3], max_norm: f64) -> [f64; 3] {
    grads.each_mut().map(|g| {
        let n = g.iter().flatten().map(|x| x * x).sum::<f64>().sqrt();
        if n > max_norm {
            let k = max_norm / n;
            g.iter_mut().flatten().for_each(|x| *x *= k);
        }
        n
    })
}

/// Whether the update for a group was applied.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UpdateOutcome {
    Applied,
    Skipped,
}

/// Applies `μ ← step(μ, Ĝ λ*)` to one group; skips when `λ*` is not finite.
pub fn update_group(
    store: &mut ParamStore,
    group: ParamGroup,
    g: &GradientMatrix,
    sol: &MultiplierSolution,
    opt: &mut Optimizer,
) -> Result<UpdateOutcome> {
    if sol.lambda.iter().any(|l| !l.is_finite()) || !sol.sigma.is_finite() {
        warn!("{}: non-finite multipliers {:?}, update skipped", group.name(), sol.lambda);
        return Ok(UpdateOutcome::Skipped);
    }
    let direction = g.combine(&sol.lambda);
    let mut params = store.flat_values(group);
    if params.len() != direction.len() {
        return Err(Error::Shape {
            op: "update_group",
            detail: format!("{} parameters, direction of {}", params.len(), direction.len()),
        });
    }
    opt.step(group, &mut params, &direction);
    store.set_flat(group, &params)?;
    Ok(UpdateOutcome::Applied)
}

/// One group's share of a multiplier step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupStep {
    pub group: ParamGroup,
    /// Column norms after clipping.
    pub column_norms: [f64; 3],
    pub solution: MultiplierSolution,
    pub outcome: UpdateOutcome,
}

/// Clips, solves and updates every group. `grads[objective][group]` holds
/// loss gradients in [`ParamGroup::ALL`] order.
pub fn multiplier_step(
    store: &mut ParamStore,
    mut grads: [Vec<Vec<f64>>; 3],
    omega: [f64; 3],
    opt: &mut Optimizer,
) -> Result<Vec<GroupStep>> {
    if let Some(c) = opt.cfg.clip_norm {
        clip_global_norm(&mut grads, c);
    }
    let mut out = Vec::with_capacity(ParamGroup::ALL.len());
    for group in ParamGroup::ALL {
        let gi = group.index();
        let g = GradientMatrix::new(std::array::from_fn(|o| std::mem::take(&mut grads[o][gi])))?;
        let solution = solve_multipliers(&g, omega)?;
        if solution.rank_deficient && solution.active.iter().any(|&a| a) {
            warn!(
                "{}: gradient matrix below rank floor, singular values {:?}",
                group.name(),
                solution.singular_values
            );
        }
        let outcome = update_group(store, group, &g, &solution, opt)?;
        out.push(GroupStep {
            group,
            column_norms: g.column_norms(),
            solution,
            outcome,
        });
    }
    Ok(out)
}
