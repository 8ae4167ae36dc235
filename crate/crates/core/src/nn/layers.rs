//! Reusable building blocks expressed on a [`Tape`].

use rand::Rng;

use super::params::{ParamGroup, ParamKey, ParamStore};
use super::tape::{Matrix, Tape, Var};

/// Fully connected layer `x · W + b`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamKey,
    pub b: ParamKey,
}

impl Linear {
    /// Weights drawn from `N(0, 1/fan_in)`, zero bias.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        group: ParamGroup,
        fan_in: usize,
        fan_out: usize,
        rng: &mut R,
    ) -> Self {
        let std = 1.0 / (fan_in as f64).sqrt();
        Linear {
            w: store.add_normal(format!("{name}.w"), group, (fan_in, fan_out), std, rng),
            b: store.add_zeros(format!("{name}.b"), group, (1, fan_out)),
        }
    }

    pub fn zeros(store: &mut ParamStore, name: &str, group: ParamGroup, fan_in: usize, fan_out: usize) -> Self {
        Linear {
            w: store.add_zeros(format!("{name}.w"), group, (fan_in, fan_out)),
            b: store.add_zeros(format!("{name}.b"), group, (1, fan_out)),
        }
    }

    pub fn fan_in(&self, store: &ParamStore) -> usize {
        store.value(self.w).nrows()
    }

    pub fn fan_out(&self, store: &ParamStore) -> usize {
        store.value(self.w).ncols()
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Var {
        let w = tape.param(store, self.w);
        let b = tape.param(store, self.b);
        tape.linear(x, w, b)
    }
}

/// Layer normalization; its parameters always belong to [`ParamGroup::Norm`].
#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamKey,
    pub beta: ParamKey,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        LayerNorm {
            gamma: store.add_filled(format!("{name}.g"), ParamGroup::Norm, (1, dim), 1.0),
            beta: store.add_zeros(format!("{name}.b"), ParamGroup::Norm, (1, dim)),
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Var {
        let g = tape.param(store, self.gamma);
        let b = tape.param(store, self.beta);
        tape.layer_norm(x, g, b)
    }
}

/// Multi-head attention with separate query and key/value inputs.
#[derive(Clone, Debug)]
pub struct Attention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
}

impl Attention {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        group: ParamGroup,
        width: usize,
        heads: usize,
        rng: &mut R,
    ) -> Self {
        assert!(heads > 0 && width % heads == 0, "width must split evenly into heads");
        Attention {
            q: Linear::new(store, &format!("{name}.q"), group, width, width, rng),
            k: Linear::new(store, &format!("{name}.k"), group, width, width, rng),
            v: Linear::new(store, &format!("{name}.v"), group, width, width, rng),
            o: Linear::new(store, &format!("{name}.o"), group, width, width, rng),
            heads,
        }
    }

    /// `q_extra`, when given, is added to the projected queries. `mask` is an
    /// additive `n_q x n_kv` score bias (use large negatives to block).
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x_q: Var,
        x_kv: Var,
        q_extra: Option<Var>,
        mask: Option<&Matrix>,
    ) -> Var {
        let mut q = self.q.forward(tape, store, x_q);
        if let Some(extra) = q_extra {
            q = tape.add(q, extra);
        }
        let k = self.k.forward(tape, store, x_kv);
        let v = self.v.forward(tape, store, x_kv);
        let width = tape.shape(q).1;
        let dh = width / self.heads;
        let mask = mask.map(|m| tape.constant(m.clone()));
        let mut outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = tape.slice_cols(q, h * dh, (h + 1) * dh);
            let kh = tape.slice_cols(k, h * dh, (h + 1) * dh);
            let vh = tape.slice_cols(v, h * dh, (h + 1) * dh);
            let scores = tape.matmul_t(qh, kh);
            let mut scores = tape.scale(scores, 1.0 / (dh as f64).sqrt());
            if let Some(m) = mask {
                scores = tape.add(scores, m);
            }
            let att = tape.softmax_rows(scores);
            outs.push(tape.matmul(att, vh));
        }
        let cat = if outs.len() == 1 { outs[0] } else { tape.concat_cols(&outs) };
        self.o.forward(tape, store, cat)
    }
}

/// Two-layer GELU perceptron.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        group: ParamGroup,
        dims: (usize, usize, usize),
        rng: &mut R,
    ) -> Self {
        Mlp {
            fc1: Linear::new(store, &format!("{name}.fc1"), group, dims.0, dims.1, rng),
            fc2: Linear::new(store, &format!("{name}.fc2"), group, dims.1, dims.2, rng),
        }
    }

    /// `hidden_extra` is added to the first layer's pre-activation.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var, hidden_extra: Option<Var>) -> Var {
        let mut a = self.fc1.forward(tape, store, x);
        if let Some(extra) = hidden_extra {
            a = tape.add(a, extra);
        }
        let a = tape.gelu(a);
        self.fc2.forward(tape, store, a)
    }
}

/// Pre-norm transformer encoder block.
#[derive(Clone, Debug)]
pub struct EncoderBlock {
    pub ln1: LayerNorm,
    pub attn: Attention,
    pub ln2: LayerNorm,
    pub mlp: Mlp,
}

impl EncoderBlock {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        group: ParamGroup,
        width: usize,
        heads: usize,
        ffn: usize,
        rng: &mut R,
    ) -> Self {
        EncoderBlock {
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), width),
            attn: Attention::new(store, &format!("{name}.attn"), group, width, heads, rng),
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), width),
            mlp: Mlp::new(store, &format!("{name}.mlp"), group, (width, ffn, width), rng),
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var, mask: Option<&Matrix>) -> Var {
        let n = self.ln1.forward(tape, store, x);
        let a = self.attn.forward(tape, store, n, n, None, mask);
        let x = tape.add(x, a);
        let n = self.ln2.forward(tape, store, x);
        let m = self.mlp.forward(tape, store, n, None);
        tape.add(x, m)
    }
}

/// Additive attention mask that keeps tokens within their own segment.
/// `lengths` lists consecutive segment sizes.
pub fn block_diagonal_mask(lengths: &[usize]) -> Matrix {
    let n: usize = lengths.iter().sum();
    let mut seg = Vec::with_capacity(n);
    for (i, len) in lengths.iter().enumerate() {
        seg.extend(std::iter::repeat(i).take(*len));
    }
    Matrix::from_shape_fn((n, n), |(r, c)| if seg[r] == seg[c] { 0.0 } else { -1e9 })
}

/// `segments x n` matrix averaging the rows of each segment.
pub fn segment_mean_matrix(lengths: &[usize]) -> Matrix {
    let n: usize = lengths.iter().sum();
    let mut m = Matrix::zeros((lengths.len(), n));
    let mut start = 0;
    for (i, len) in lengths.iter().enumerate() {
        for c in start..start + len {
            m[[i, c]] = 1.0 / *len as f64;
        }
        start += len;
    }
    m
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::check_gradients;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn masked_batch_matches_separate_sequences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let block = EncoderBlock::new(&mut store, "enc", ParamGroup::Backbone, 8, 2, 16, &mut rng);
        let a = Matrix::from_shape_fn((2, 8), |(i, j)| (i * 8 + j) as f64 * 0.1 - 0.5);
        let b = Matrix::from_shape_fn((3, 8), |(i, j)| ((i + 2) * j) as f64 * 0.07 - 0.3);
        let run = |x: Matrix, mask: Option<&Matrix>| {
            let mut t = Tape::new();
            let v = t.constant(x);
            let o = block.forward(&mut t, &store, v, mask);
            t.value(o).clone()
        };
        let sa = run(a.clone(), None);
        let sb = run(b.clone(), None);
        let both = ndarray::concatenate(ndarray::Axis(0), &[a.view(), b.view()]).unwrap();
        let joint = run(both, Some(&block_diagonal_mask(&[2, 3])));
        for r in 0..2 {
            for c in 0..8 {
                assert!((joint[[r, c]] - sa[[r, c]]).abs() < 1e-12);
            }
        }
        for r in 0..3 {
            for c in 0..8 {
                assert!((joint[[r + 2, c]] - sb[[r, c]]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn segment_mean_rows_sum_to_one() {
        let m = segment_mean_matrix(&[1, 3]);
        assert_eq!(m.dim(), (2, 4));
        assert_eq!(m[[0, 0]], 1.0);
        assert!((m.row(1).sum() - 1.0).abs() < 1e-15);
        assert_eq!(m[[1, 0]], 0.0);
    }

    #[test]
    fn encoder_block_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut store = ParamStore::new();
        let block = EncoderBlock::new(&mut store, "enc", ParamGroup::Backbone, 4, 2, 8, &mut rng);
        let x = Matrix::from_shape_fn((3, 4), |(i, j)| ((i * 5 + j * 3) % 7) as f64 * 0.2 - 0.6);
        let r = check_gradients(
            &mut store,
            |t, s| {
                let v = t.constant(x.clone());
                let o = block.forward(t, s, v, None);
                let sq = t.mul(o, o);
                t.sum(sq)
            },
            1e-6,
            1e-4,
            16,
        );
        assert!(r.max_rel_err < 1e-5, "{r:?}");
    }
}
