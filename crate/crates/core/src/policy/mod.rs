//! Hierarchical policy networks.
//!
//! A [`TokenNet`] compresses an observation into one embedding by letting a
//! learned query attend to each modality in turn. The high-level policy maps
//! that embedding to logits over codebook indices; the selected row of the
//! agent type's codebook is the behavioral latent `z`, held for `H` steps.
//! The low-level policy runs a GRU over embeddings and maps `[h, z]` to a
//! bounded action with a per-type head. The posterior infers per-interval
//! index distributions from a logged trajectory.

pub mod layers;
pub mod params;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::world::{
    AgentType, Observation, ObservationVars, AGENT_FEATURES, EGO_FEATURES, LIGHT_FEATURES,
    MAP_FEATURES,
};

pub use layers::{sinusoidal_encoding, AttentionBlock, Gru, Linear, Mlp};
pub use params::{Bound, Param, ParamGroup, ParamId, ParamStore};

/// Width of the normalized state fed to the posterior.
pub const STATE_FEATURES: usize = 5;

/// Network widths.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetConfig {
    pub encode_dim: usize,
    pub query_dim: usize,
    pub cross_attn_heads: usize,
    pub self_attn_heads: usize,
    /// Hidden width of the feed-forward layer after each attention.
    pub ffn_dim: usize,
    pub codebook_size: usize,
    pub embed_dim: usize,
    pub gru_hidden: usize,
    pub mlp_hidden: usize,
    /// Hidden width of the index heads (high-level and posterior).
    pub index_hidden: usize,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            encode_dim: 32,
            query_dim: 128,
            cross_attn_heads: 4,
            self_attn_heads: 4,
            ffn_dim: 512,
            codebook_size: 128,
            embed_dim: 128,
            gru_hidden: 128,
            mlp_hidden: 128,
            index_hidden: 256,
        }
    }
}

impl NetConfig {
    /// Narrow widths for quick runs on synthetic scenes.
    pub fn desk() -> Self {
        Self {
            encode_dim: 16,
            query_dim: 32,
            cross_attn_heads: 4,
            self_attn_heads: 4,
            ffn_dim: 64,
            codebook_size: 32,
            embed_dim: 32,
            gru_hidden: 32,
            mlp_hidden: 32,
            index_hidden: 64,
        }
    }
}

/// `true` when a new latent is drawn at elapsed step `t`.
pub fn temporal_gate(t: usize, h: usize) -> bool {
    t % h == 0
}

/// Number of latent intervals covering `horizon` steps.
pub fn interval_count(horizon: usize, h: usize) -> usize {
    horizon.div_ceil(h)
}

/// Standard Gumbel samples.
pub fn gumbel_noise<R: Rng + ?Sized>(rng: &mut R, n: usize) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let u: f64 = rng.gen_range(f64::EPSILON..1.0);
            -(-u.ln()).ln()
        })
        .collect()
}

/// Fixed per-column input scaling so raw metre-valued features start near unit range.
fn feature_scale(modality: usize) -> Vec<f64> {
    let pos = 1.0 / 20.0;
    let vel = 1.0 / 10.0;
    let size = 1.0 / 5.0;
    let mut s = match modality {
        0 => vec![pos, pos, 1.0, 1.0, vel],
        1 => vec![pos, pos, 1.0, 1.0, vel, vel, vel, size, size],
        2 => vec![pos, pos],
        _ => vec![pos, pos],
    };
    let width = [EGO_FEATURES, AGENT_FEATURES, MAP_FEATURES, LIGHT_FEATURES][modality];
    s.resize(width, 1.0);
    s
}

/// An observation ready for [`TokenNet::forward`]: one padded matrix per
/// modality (ego, objects, map, lights) with its valid row count.
#[derive(Clone, Copy, Debug)]
pub struct ObsInput {
    pub vars: [Var; 4],
    pub counts: [usize; 4],
}

impl ObsInput {
    pub fn from_vars(o: &ObservationVars) -> Self {
        Self {
            vars: [o.ego, o.objects, o.map, o.lights],
            counts: o.value.valid_counts(),
        }
    }

    /// Records an observation as constants (no gradient to the scene).
    pub fn constant(tape: &mut Tape, o: &Observation) -> Self {
        Self {
            vars: [
                tape.constant(o.ego.clone()),
                tape.constant(o.objects.clone()),
                tape.constant(o.map.clone()),
                tape.constant(o.lights.clone()),
            ],
            counts: o.valid_counts(),
        }
    }
}

/// Observation encoder: a learned query cross-attends each modality in turn.
#[derive(Clone, Debug)]
pub struct TokenNet {
    pub query: ParamId,
    pub encoders: Vec<Mlp>,
    pub blocks: Vec<AttentionBlock>,
    pub dim: usize,
}

impl TokenNet {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        group: ParamGroup,
        cfg: &NetConfig,
        rng: &mut R,
    ) -> Self {
        let widths = [EGO_FEATURES, AGENT_FEATURES, MAP_FEATURES, LIGHT_FEATURES];
        let e = cfg.encode_dim;
        let q = cfg.query_dim;
        let query = store.add_uniform(format!("{name}.query"), group, &[1, q], 1.0 / (q as f64).sqrt(), rng);
        let mut encoders = Vec::new();
        let mut blocks = Vec::new();
        for (m, w) in widths.iter().enumerate() {
            encoders.push(Mlp::new(store, &format!("{name}.enc{m}"), group, &[*w, e, e], rng));
            blocks.push(AttentionBlock::new(
                store,
                &format!("{name}.attn{m}"),
                group,
                q,
                e,
                cfg.ffn_dim,
                cfg.cross_attn_heads,
                rng,
            ));
        }
        Self {
            query,
            encoders,
            blocks,
            dim: q,
        }
    }

    /// Embedding `[query_dim]`. Padding rows are dropped and modalities
    /// without valid rows are skipped.
    pub fn forward(&self, tape: &mut Tape, p: &Bound, obs: &ObsInput) -> Result<Var> {
        let mut x = p.var(self.query);
        for m in 0..4 {
            let n = obs.counts[m];
            if n == 0 {
                continue;
            }
            let var = obs.vars[m];
            let rows = if n < tape.value(var).rows() {
                let idx: Vec<usize> = (0..n).collect();
                tape.gather(var, &idx)?
            } else {
                var
            };
            let scale = tape.constant(Tensor::vector(feature_scale(m)));
            let scaled = tape.mul(rows, scale)?;
            let enc = self.encoders[m].forward(tape, p, scaled)?;
            x = self.blocks[m].forward(tape, p, x, enc)?;
        }
        tape.reshape(x, vec![self.dim])
    }
}

/// Prior over codebook indices given the current observation.
#[derive(Clone, Debug)]
pub struct HighLevel {
    pub tkn: TokenNet,
    pub head: Mlp,
}

impl HighLevel {
    pub fn logits(&self, tape: &mut Tape, p: &Bound, obs: &ObsInput) -> Result<Var> {
        let x = self.tkn.forward(tape, p, obs)?;
        self.head.forward(tape, p, x)
    }
}

/// One `[K, D]` codebook per agent type, hard-gated by type.
#[derive(Clone, Debug)]
pub struct Codebooks {
    pub books: Vec<ParamId>,
    pub size: usize,
    pub dim: usize,
}

impl Codebooks {
    pub fn id(&self, t: AgentType) -> ParamId {
        self.books[t.index()]
    }

    /// `z = onehot · E_type`.
    pub fn select(&self, tape: &mut Tape, p: &Bound, t: AgentType, onehot: Var) -> Result<Var> {
        tape.matmul(onehot, p.var(self.id(t)))
    }
}

/// A latent drawn at a gate step.
#[derive(Clone, Copy, Debug)]
pub struct LatentSample {
    pub logits: Var,
    pub onehot: Var,
    pub z: Var,
    pub index: usize,
}

/// The latent held by one agent.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentAssignment {
    pub index: usize,
    pub z: Vec<f64>,
    /// Steps since the latent was drawn; always below `H`.
    pub age: usize,
}

/// Draws a hard index from `logits + noise` (straight-through) and selects
/// the codebook row.
pub fn draw_latent(
    tape: &mut Tape,
    p: &Bound,
    books: &Codebooks,
    t: AgentType,
    logits: Var,
    noise: Option<&[f64]>,
) -> Result<LatentSample> {
    let onehot = tape.straight_through_onehot(logits, noise)?;
    let index = tape
        .value(onehot)
        .data()
        .iter()
        .position(|&v| v == 1.0)
        .expect("one-hot has a hot entry");
    let z = books.select(tape, p, t, onehot)?;
    Ok(LatentSample {
        logits,
        onehot,
        z,
        index,
    })
}

/// Recurrent action policy with per-type heads.
#[derive(Clone, Debug)]
pub struct LowLevel {
    pub tkn: TokenNet,
    pub gru: Gru,
    pub heads: Vec<Mlp>,
}

impl LowLevel {
    /// Returns the bounded action and the next recurrent state.
    #[allow(clippy::too_many_arguments)]
    pub fn step(
        &self,
        tape: &mut Tape,
        p: &Bound,
        obs: &ObsInput,
        z: Var,
        h: Var,
        t: AgentType,
        bounds: &[f64],
    ) -> Result<(Var, Var)> {
        let x = self.tkn.forward(tape, p, obs)?;
        let h = self.gru.forward(tape, p, x, h)?;
        let c = tape.concat(&[h, z])?;
        let raw = self.heads[t.index()].forward(tape, p, c)?;
        let squashed = tape.tanh(raw);
        let b = tape.constant(Tensor::vector(bounds.to_vec()));
        let a = tape.mul(squashed, b)?;
        Ok((a, h))
    }
}

/// Maps a policy action to the world frame. Delta-model displacements are
/// produced in the agent's frame and rotated by its heading `state[2]`;
/// bicycle-model actions pass through unchanged.
pub fn action_to_world(tape: &mut Tape, action: Var, state: Var, t: AgentType) -> Result<Var> {
    if t != AgentType::Pedestrian {
        return Ok(action);
    }
    let psi = tape.slice_cols(state, 2, 1)?;
    let c = tape.cos(psi);
    let s = tape.sin(psi);
    let dx = tape.slice_cols(action, 0, 1)?;
    let dy = tape.slice_cols(action, 1, 1)?;
    let dpsi = tape.slice_cols(action, 2, 1)?;
    let cdx = tape.mul(c, dx)?;
    let sdy = tape.mul(s, dy)?;
    let sdx = tape.mul(s, dx)?;
    let cdy = tape.mul(c, dy)?;
    let wx = tape.sub(cdx, sdy)?;
    let wy = tape.add(sdx, cdy)?;
    tape.concat(&[wx, wy, dpsi])
}

/// Per-interval index distributions inferred from a logged trajectory.
#[derive(Clone, Debug)]
pub struct Posterior {
    pub tkn: TokenNet,
    pub state_enc: Mlp,
    pub block: AttentionBlock,
    pub head: Mlp,
}

/// Features of `s` in the frame of `origin`: `[x, y, cos dψ, sin dψ, v]`.
pub fn normalized_state(origin: [f64; 4], s: [f64; 4]) -> [f64; STATE_FEATURES] {
    let (c, sn) = (origin[2].cos(), origin[2].sin());
    let dx = s[0] - origin[0];
    let dy = s[1] - origin[1];
    let dpsi = s[2] - origin[2];
    [c * dx + sn * dy, -sn * dx + c * dy, dpsi.cos(), dpsi.sin(), s[3]]
}

impl Posterior {
    /// `obs` and `states` cover steps `0..=T` (the first entry is the
    /// initial scene). Interval `k` max-pools steps `kH..=(k+1)H`, so each
    /// interval sees the states its latent produced. Returns `[intervals, K]`
    /// logits.
    pub fn logits(
        &self,
        tape: &mut Tape,
        p: &Bound,
        obs: &[ObsInput],
        states: &[[f64; STATE_FEATURES]],
        h: usize,
    ) -> Result<Var> {
        if obs.len() != states.len() || obs.len() < 2 {
            return Err(Error::Horizon {
                needed: 2.max(states.len()),
                have: obs.len(),
            });
        }
        let steps = obs.len();
        let tokens = obs
            .iter()
            .map(|o| {
                let e = self.tkn.forward(tape, p, o)?;
                tape.reshape(e, vec![1, self.tkn.dim])
            })
            .collect::<Result<Vec<_>>>()?;
        let tokens = tape.concat_rows(&tokens)?;
        let scale = feature_scale(0);
        let sdata = states
            .iter()
            .flat_map(|s| s.iter().zip(&scale).map(|(v, k)| v * k).collect::<Vec<_>>())
            .collect();
        let svar = tape.constant(Tensor::matrix(steps, STATE_FEATURES, sdata)?);
        let senc = self.state_enc.forward(tape, p, svar)?;
        let y = tape.add(tokens, senc)?;
        let pe = tape.constant(sinusoidal_encoding(steps, self.tkn.dim));
        let y = tape.add(y, pe)?;
        let y = self.block.forward(tape, p, y, y)?;
        let n = interval_count(steps - 1, h);
        let pooled = (0..n)
            .map(|k| {
                let rows: Vec<usize> = (k * h..=((k + 1) * h).min(steps - 1)).collect();
                let g = tape.gather(y, &rows)?;
                let m = tape.max_rows(g);
                tape.reshape(m, vec![1, self.tkn.dim])
            })
            .collect::<Result<Vec<_>>>()?;
        let pooled = tape.concat_rows(&pooled)?;
        self.head.forward(tape, p, pooled)
    }
}

/// All networks and their parameters.
#[derive(Clone, Debug)]
pub struct Policy {
    pub cfg: NetConfig,
    pub store: ParamStore,
    pub high: HighLevel,
    pub codebooks: Codebooks,
    pub low: LowLevel,
    pub posterior: Posterior,
}

impl Policy {
    pub fn new<R: Rng + ?Sized>(cfg: NetConfig, rng: &mut R) -> Self {
        use ParamGroup as G;
        let mut store = ParamStore::new();
        let k = cfg.codebook_size;
        let q = cfg.query_dim;
        let hi = cfg.index_hidden;

        let high = HighLevel {
            tkn: TokenNet::new(&mut store, "high.tkn", G::HighLevel, &cfg, rng),
            head: Mlp::new(&mut store, "high.head", G::HighLevel, &[q, hi, hi, k], rng),
        };

        let books = AgentType::ALL
            .iter()
            .map(|t| {
                store.add_uniform(
                    format!("codebook.{}", t.index()),
                    G::LowLevel,
                    &[k, cfg.embed_dim],
                    1.0 / k as f64,
                    rng,
                )
            })
            .collect();
        let codebooks = Codebooks {
            books,
            size: k,
            dim: cfg.embed_dim,
        };

        let low = LowLevel {
            tkn: TokenNet::new(&mut store, "low.tkn", G::LowLevel, &cfg, rng),
            gru: Gru::new(&mut store, "low.gru", G::LowLevel, q, cfg.gru_hidden, rng),
            heads: AgentType::ALL
                .iter()
                .map(|t| {
                    Mlp::new(
                        &mut store,
                        &format!("low.head{}", t.index()),
                        G::LowLevel,
                        &[cfg.gru_hidden + cfg.embed_dim, cfg.mlp_hidden, t.action_dim()],
                        rng,
                    )
                })
                .collect(),
        };

        let posterior = Posterior {
            tkn: TokenNet::new(&mut store, "post.tkn", G::Posterior, &cfg, rng),
            state_enc: Mlp::new(
                &mut store,
                "post.state",
                G::Posterior,
                &[STATE_FEATURES, cfg.encode_dim, q],
                rng,
            ),
            block: AttentionBlock::new(
                &mut store,
                "post.attn",
                G::Posterior,
                q,
                q,
                cfg.ffn_dim,
                cfg.self_attn_heads,
                rng,
            ),
            head: Mlp::new(&mut store, "post.head", G::Posterior, &[q, hi, hi, k], rng),
        };

        Self {
            cfg,
            store,
            high,
            codebooks,
            low,
            posterior,
        }
    }

    /// Parameter counts per group, in [`ParamGroup::ALL`] order.
    pub fn param_counts(&self) -> [usize; 3] {
        ParamGroup::ALL.map(|g| self.store.count(g))
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    #[test]
    fn gate_period() {
        assert!(temporal_gate(0, 5));
        assert!(!temporal_gate(3, 5));
        assert!(temporal_gate(10, 5));
        assert_eq!(interval_count(40, 5), 8);
    }

    #[test]
    fn normalized_state_origin() {
        let o = [3.0, 4.0, 1.0, 2.0];
        let n = normalized_state(o, o);
        assert!(n[0].abs() < 1e-15 && n[1].abs() < 1e-15);
        assert_eq!((n[2], n[3], n[4]), (1.0, 0.0, 2.0));
    }

    #[test]
    fn gumbel_is_seeded() {
        let a = gumbel_noise(&mut ChaCha8Rng::seed_from_u64(1), 4);
        let b = gumbel_noise(&mut ChaCha8Rng::seed_from_u64(1), 4);
        assert_eq!(a, b);
        assert!(a.iter().all(|x| x.is_finite()));
    }
}
