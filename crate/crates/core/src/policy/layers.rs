//! Dense, attention and recurrent layers recorded on a [`Tape`].

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::error::Result;
use crate::tensor::Tensor;

use super::params::{Bound, ParamGroup, ParamId, ParamStore};

/// `x W + b` with `W` of shape `[in, out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub input: usize,
    pub output: usize,
}

impl Linear {
    /// Uniform initialization in `±1/sqrt(in)`.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        group: ParamGroup,
        input: usize,
        output: usize,
        rng: &mut R,
    ) -> Self {
        let bound = 1.0 / (input as f64).sqrt();
        let w = store.add_uniform(format!("{name}.w"), group, &[input, output], bound, rng);
        let b = store.add_uniform(format!("{name}.b"), group, &[output], bound, rng);
        Self { w, b, input, output }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let y = tape.matmul(x, p.var(self.w))?;
        tape.add(y, p.var(self.b))
    }
}

/// Linear layers with ReLU in between (none after the last).
#[derive(Clone, Debug)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    /// `dims = [in, hidden.., out]`.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        group: ParamGroup,
        dims: &[usize],
        rng: &mut R,
    ) -> Self {
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(k, d)| Linear::new(store, &format!("{name}.{k}"), group, d[0], d[1], rng))
            .collect();
        Self { layers }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, mut x: Var) -> Result<Var> {
        for (k, l) in self.layers.iter().enumerate() {
            x = l.forward(tape, p, x)?;
            if k + 1 < self.layers.len() {
                x = tape.relu(x);
            }
        }
        Ok(x)
    }
}

/// Multi-head attention with a residual connection, followed by a residual
/// ReLU feed-forward layer.
#[derive(Clone, Debug)]
pub struct AttentionBlock {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub ff: Mlp,
    pub heads: usize,
}

impl AttentionBlock {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        group: ParamGroup,
        dim: usize,
        kv_dim: usize,
        ffn: usize,
        heads: usize,
        rng: &mut R,
    ) -> Self {
        assert!(heads > 0 && dim % heads == 0, "width {dim} not divisible by {heads} heads");
        Self {
            q: Linear::new(store, &format!("{name}.q"), group, dim, dim, rng),
            k: Linear::new(store, &format!("{name}.k"), group, kv_dim, dim, rng),
            v: Linear::new(store, &format!("{name}.v"), group, kv_dim, dim, rng),
            o: Linear::new(store, &format!("{name}.o"), group, dim, dim, rng),
            ff: Mlp::new(store, &format!("{name}.ff"), group, &[dim, ffn, dim], rng),
            heads,
        }
    }

    /// `x: [n, dim]` attends over `kv: [m, kv_dim]`; returns `[n, dim]`.
    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var, kv: Var) -> Result<Var> {
        let q = self.q.forward(tape, p, x)?;
        let k = self.k.forward(tape, p, kv)?;
        let v = self.v.forward(tape, p, kv)?;
        let dim = self.q.output;
        let dh = dim / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = tape.slice_cols(q, h * dh, dh)?;
            let kh = tape.slice_cols(k, h * dh, dh)?;
            let vh = tape.slice_cols(v, h * dh, dh)?;
            let kt = tape.transpose(kh)?;
            let scores = tape.matmul(qh, kt)?;
            let scores = tape.scale(scores, scale);
            let att = tape.softmax(scores);
            outs.push(tape.matmul(att, vh)?);
        }
        let heads = tape.concat(&outs)?;
        let attn = self.o.forward(tape, p, heads)?;
        let x = tape.add(x, attn)?;
        let ff = self.ff.forward(tape, p, x)?;
        tape.add(x, ff)
    }
}

/// Gated recurrent unit with fused `[r, z, n]` gate weights.
#[derive(Clone, Debug)]
pub struct Gru {
    pub wi: ParamId,
    pub wh: ParamId,
    pub bi: ParamId,
    pub bh: ParamId,
    pub hidden: usize,
}

impl Gru {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        group: ParamGroup,
        input: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Self {
        let bound = 1.0 / (hidden as f64).sqrt();
        Self {
            wi: store.add_uniform(format!("{name}.wi"), group, &[input, 3 * hidden], bound, rng),
            wh: store.add_uniform(format!("{name}.wh"), group, &[hidden, 3 * hidden], bound, rng),
            bi: store.add_uniform(format!("{name}.bi"), group, &[3 * hidden], bound, rng),
            bh: store.add_uniform(format!("{name}.bh"), group, &[3 * hidden], bound, rng),
            hidden,
        }
    }

    pub fn initial_state(&self, tape: &mut Tape) -> Var {
        tape.constant(Tensor::zeros(&[self.hidden]))
    }

    /// One step on vectors `x: [in]`, `h: [hidden]`.
    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var, h: Var) -> Result<Var> {
        let n = self.hidden;
        let gi = tape.matmul(x, p.var(self.wi))?;
        let gi = tape.add(gi, p.var(self.bi))?;
        let gh = tape.matmul(h, p.var(self.wh))?;
        let gh = tape.add(gh, p.var(self.bh))?;
        let ri = tape.slice_cols(gi, 0, n)?;
        let zi = tape.slice_cols(gi, n, n)?;
        let ni = tape.slice_cols(gi, 2 * n, n)?;
        let rh = tape.slice_cols(gh, 0, n)?;
        let zh = tape.slice_cols(gh, n, n)?;
        let nh = tape.slice_cols(gh, 2 * n, n)?;
        let r = tape.add(ri, rh)?;
        let r = tape.sigmoid(r);
        let z = tape.add(zi, zh)?;
        let z = tape.sigmoid(z);
        let rn = tape.mul(r, nh)?;
        let cand = tape.add(ni, rn)?;
        let cand = tape.tanh(cand);
        // h' = n + z (h - n)
        let diff = tape.sub(h, cand)?;
        let gated = tape.mul(z, diff)?;
        tape.add(cand, gated)
    }
}

/// Fixed sinusoidal step encoding, `[steps, dim]`.
pub fn sinusoidal_encoding(steps: usize, dim: usize) -> Tensor {
    let mut data = vec![0.0; steps * dim];
    for t in 0..steps {
        for i in 0..dim {
            let freq = 1.0 / 10000f64.powf((2 * (i / 2)) as f64 / dim as f64);
            let a = t as f64 * freq;
            data[t * dim + i] = if i % 2 == 0 { a.sin() } else { a.cos() };
        }
    }
    Tensor::new(vec![steps, dim], data).expect("shape matches data")
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    #[test]
    fn gru_matches_scalar_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let gru = Gru::new(&mut store, "g", ParamGroup::LowLevel, 2, 3, &mut rng);
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let x = [0.3, -0.7];
        let h = [0.1, 0.2, -0.4];
        let xv = tape.constant(Tensor::vector(x.to_vec()));
        let hv = tape.constant(Tensor::vector(h.to_vec()));
        let out = gru.forward(&mut tape, &p, xv, hv).unwrap();

        let wi = store.get(gru.wi);
        let wh = store.get(gru.wh);
        let (bi, bh) = (store.get(gru.bi).data(), store.get(gru.bh).data());
        let gate = |c: usize| {
            let a: f64 = (0..2).map(|k| x[k] * wi.at(k, c)).sum::<f64>() + bi[c];
            let b: f64 = (0..3).map(|k| h[k] * wh.at(k, c)).sum::<f64>() + bh[c];
            (a, b)
        };
        let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
        for j in 0..3 {
            let (ra, rb) = gate(j);
            let (za, zb) = gate(3 + j);
            let (na, nb) = gate(6 + j);
            let r = sig(ra + rb);
            let z = sig(za + zb);
            let n = (na + r * nb).tanh();
            let expect = (1.0 - z) * n + z * h[j];
            assert!((tape.value(out).data()[j] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn attention_is_permutation_invariant_in_keys() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::new();
        let blk = AttentionBlock::new(&mut store, "a", ParamGroup::HighLevel, 8, 3, 16, 2, &mut rng);
        let rows = [[1.0, 2.0, 3.0], [-1.0, 0.5, 0.0], [0.2, 0.2, -2.0]];
        let run = |order: [usize; 3]| {
            let mut tape = Tape::new();
            let p = store.bind(&mut tape);
            let q = tape.constant(Tensor::matrix(1, 8, (0..8).map(|k| k as f64 * 0.1).collect()).unwrap());
            let kv_data = order.iter().flat_map(|&r| rows[r]).collect();
            let kv = tape.constant(Tensor::matrix(3, 3, kv_data).unwrap());
            let out = blk.forward(&mut tape, &p, q, kv).unwrap();
            tape.value(out).data().to_vec()
        };
        let a = run([0, 1, 2]);
        let b = run([2, 0, 1]);
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn sinusoid_first_row() {
        let pe = sinusoidal_encoding(3, 4);
        assert_eq!(pe.row(0), &[0.0, 1.0, 0.0, 1.0]);
        assert!((pe.at(1, 0) - 1f64.sin()).abs() < 1e-15);
    }
}
