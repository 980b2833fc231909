//! Cross-step derivative analysis of a rollout.
//!
//! For the joint state `s` of the controlled agents, each step contributes
//! `∂s_{k+1}/∂s_k = A_k + B_k C_k`, with `A_k = ∂T/∂s_k` and `B_k = ∂T/∂a_k`
//! from the analytic motion-model Jacobians and `C_k = ∂a_k/∂s_k` read off
//! the tape. The cross-step derivative `∂s_t/∂s_j` is the ordered product of
//! these factors, and its norm is bounded by `(σˢ + σᵃ)^{t−j}` with
//! `σˢ = max‖A_k‖₂` and `σᵃ = max‖B_k C_k‖₂`.
//!
//! The product equals the true total derivative when the rollout ran with
//! [`RolloutOptions::detach_history`](super::RolloutOptions), which makes the
//! policy Markov in the joint state.

use std::fmt::Write as _;

use crate::autodiff::Tape;
use crate::error::Result;
use crate::linalg::{identity, matmul, spectral_norm};
use crate::tensor::Tensor;

use super::TapeRollout;

/// Dense row-major square matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Mat {
    pub n: usize,
    pub data: Vec<f64>,
}

impl Mat {
    pub fn identity(n: usize) -> Self {
        Self { n, data: identity(n) }
    }

    pub fn mul(&self, other: &Mat) -> Mat {
        Mat {
            n: self.n,
            data: matmul(self.n, self.n, self.n, &self.data, &other.data),
        }
    }

    pub fn norm2(&self) -> f64 {
        spectral_norm(self.n, self.n, &self.data)
    }

    /// Largest absolute entrywise difference.
    pub fn max_abs_diff(&self, other: &Mat) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// Per-step Jacobian blocks over the joint controlled state.
#[derive(Clone, Debug)]
pub struct StepFactors {
    /// `∂T/∂s_k`.
    pub state: Mat,
    /// `∂T/∂a_k · ∂a_k/∂s_k`.
    pub action: Mat,
}

impl StepFactors {
    pub fn total(&self) -> Mat {
        Mat {
            n: self.state.n,
            data: self
                .state
                .data
                .iter()
                .zip(&self.action.data)
                .map(|(a, b)| a + b)
                .collect(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct CrossStepReport {
    /// Controlled agents, in joint-state order.
    pub agents: Vec<usize>,
    pub factors: Vec<StepFactors>,
    pub sigma_s: f64,
    pub sigma_a: f64,
    /// `norms[t][j] = ‖∂s_t/∂s_j‖₂` for `j ≤ t`.
    pub norms: Vec<Vec<f64>>,
    /// `‖Π A_k‖₂`, the state branch alone.
    pub state_branch: Vec<Vec<f64>>,
    /// `‖Π A_k − I‖₂`, how far the state branch is from identity.
    pub highway_deviation: Vec<Vec<f64>>,
}

impl CrossStepReport {
    pub fn horizon(&self) -> usize {
        self.factors.len()
    }

    /// `(σˢ + σᵃ)^{t−j}`.
    pub fn bound(&self, t: usize, j: usize) -> f64 {
        (self.sigma_s + self.sigma_a).powi((t - j) as i32)
    }

    /// Largest `‖∂s_t/∂s_j‖ − bound`; non-positive when the bound holds.
    pub fn worst_bound_gap(&self) -> f64 {
        let mut worst = f64::NEG_INFINITY;
        for t in 0..self.norms.len() {
            for j in 0..=t {
                worst = worst.max(self.norms[t][j] - self.bound(t, j));
            }
        }
        worst
    }

    /// Mean cross-step norm per interval `d = t − j`, for `d = 0..=T`.
    pub fn growth_curve(&self) -> Vec<f64> {
        let t_max = self.norms.len();
        (0..t_max)
            .map(|d| {
                let vals: Vec<f64> = (d..t_max).map(|t| self.norms[t][t - d]).collect();
                vals.iter().sum::<f64>() / vals.len() as f64
            })
            .collect()
    }

    /// CSV with one row per interval.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("interval,mean_norm,max_norm,bound,state_branch_mean,highway_deviation_mean\n");
        let t_max = self.norms.len();
        let curve = self.growth_curve();
        for d in 0..t_max {
            let pairs: Vec<(usize, usize)> = (d..t_max).map(|t| (t, t - d)).collect();
            let max = pairs.iter().map(|&(t, j)| self.norms[t][j]).fold(0.0, f64::max);
            let mean = |m: &Vec<Vec<f64>>| pairs.iter().map(|&(t, j)| m[t][j]).sum::<f64>() / pairs.len() as f64;
            let _ = writeln!(
                s,
                "{d},{:.12e},{:.12e},{:.12e},{:.12e},{:.12e}",
                curve[d],
                max,
                self.bound(d, 0),
                mean(&self.state_branch),
                mean(&self.highway_deviation)
            );
        }
        s
    }
}

/// Assembles the per-step factors, using the analytic motion-model
/// Jacobians for `A_k`, `B_k` and the tape for `C_k`.
pub fn step_factors(tape: &Tape, tr: &TapeRollout) -> Result<(Vec<usize>, Vec<StepFactors>)> {
    let scene0 = &tr.rollout.scenes[0];
    let agents: Vec<usize> = (0..scene0.agents.len()).filter(|&i| scene0.controlled(i)).collect();
    let dim = 4 * agents.len();
    let mut out = Vec::with_capacity(tr.steps.len());
    for k in 0..tr.steps.len() {
        let mut a = vec![0.0; dim * dim];
        let mut ba = vec![0.0; dim * dim];
        for (bi, &i) in agents.iter().enumerate() {
            let lin = tr.steps[k][i].as_ref().expect("controlled agent stepped");
            for r in 0..4 {
                for c in 0..4 {
                    a[(4 * bi + r) * dim + 4 * bi + c] = lin.d_state[r][c];
                }
            }
            let Some(action) = tr.actions[k][i] else { continue };
            if !tape.requires_grad(action) {
                continue;
            }
            let m = lin.action_dim;
            // C rows for this agent: d a_i / d s_k (joint).
            let mut c_rows = vec![0.0; m * dim];
            for comp in 0..m {
                let mut seed = vec![0.0; m];
                seed[comp] = 1.0;
                let g = tape.backward_from(action, Tensor::vector(seed))?;
                for (bj, &j) in agents.iter().enumerate() {
                    let gs = g.wrt(tr.states[k][j]);
                    c_rows[comp * dim + 4 * bj..comp * dim + 4 * bj + 4].copy_from_slice(gs.data());
                }
            }
            // B_i C_i fills the rows of agent i.
            let prod = matmul(4, m, dim, &lin.d_action, &c_rows);
            for r in 0..4 {
                ba[(4 * bi + r) * dim..(4 * bi + r + 1) * dim].copy_from_slice(&prod[r * dim..(r + 1) * dim]);
            }
        }
        out.push(StepFactors {
            state: Mat { n: dim, data: a },
            action: Mat { n: dim, data: ba },
        });
    }
    Ok((agents, out))
}

/// Cross-step derivative norms and their geometric bound for a rollout.
pub fn gradient_diagnostics(tape: &Tape, tr: &TapeRollout) -> Result<CrossStepReport> {
    let (agents, factors) = step_factors(tape, tr)?;
    let dim = 4 * agents.len();
    let steps = factors.len();
    let sigma_s = factors.iter().map(|f| f.state.norm2()).fold(0.0, f64::max);
    let sigma_a = factors.iter().map(|f| f.action.norm2()).fold(0.0, f64::max);
    let totals: Vec<Mat> = factors.iter().map(StepFactors::total).collect();
    let eye = Mat::identity(dim);
    let mut norms = vec![Vec::new(); steps + 1];
    let mut state_branch = vec![Vec::new(); steps + 1];
    let mut highway = vec![Vec::new(); steps + 1];
    for t in 0..=steps {
        for j in 0..=t {
            let (full, branch) = cross_step_products(&factors, &totals, t, j);
            norms[t].push(full.norm2());
            state_branch[t].push(branch.norm2());
            let dev = Mat {
                n: dim,
                data: branch.data.iter().zip(&eye.data).map(|(a, b)| a - b).collect(),
            };
            highway[t].push(dev.norm2());
        }
    }
    Ok(CrossStepReport {
        agents,
        factors,
        sigma_s,
        sigma_a,
        norms,
        state_branch,
        highway_deviation: highway,
    })
}

/// `(Π_{k=j}^{t-1} (A_k + B_k C_k), Π A_k)`, later steps on the left.
fn cross_step_products(factors: &[StepFactors], totals: &[Mat], t: usize, j: usize) -> (Mat, Mat) {
    let dim = factors.first().map_or(0, |f| f.state.n);
    let mut full = Mat::identity(dim);
    let mut branch = Mat::identity(dim);
    for k in j..t {
        full = totals[k].mul(&full);
        branch = factors[k].state.mul(&branch);
    }
    (full, branch)
}

/// `∂s_t/∂s_j` from the analytic factors.
pub fn analytic_cross_step(report: &CrossStepReport, t: usize, j: usize) -> Mat {
    let totals: Vec<Mat> = report.factors.iter().map(StepFactors::total).collect();
    cross_step_products(&report.factors, &totals, t, j).0
}

/// `∂s_t/∂s_j` measured by backpropagation through the tape.
pub fn tape_cross_step(tape: &Tape, tr: &TapeRollout, agents: &[usize], t: usize, j: usize) -> Result<Mat> {
    let dim = 4 * agents.len();
    let mut data = vec![0.0; dim * dim];
    for (bi, &i) in agents.iter().enumerate() {
        for r in 0..4 {
            let mut seed = vec![0.0; 4];
            seed[r] = 1.0;
            let g = tape.backward_from(tr.states[t][i], Tensor::vector(seed))?;
            for (bj, &jj) in agents.iter().enumerate() {
                let gs = g.wrt(tr.states[j][jj]);
                let row = 4 * bi + r;
                data[row * dim + 4 * bj..row * dim + 4 * bj + 4].copy_from_slice(gs.data());
            }
        }
    }
    Ok(Mat { n: dim, data })
}
