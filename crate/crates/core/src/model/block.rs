use ndarray::{s, Array1, Array2, Array3, ArrayView2, Axis, Zip};
use rand::Rng;

use super::Parameters;
use crate::error::{Error, Result};

const LN_EPS: f64 = 1e-5;

/// Single-head transformer encoder layer (post-norm):
/// `h = LN(x + Attn(x))`, `y = LN(h + FFN(h))`.
#[derive(Debug, Clone, PartialEq)]
pub struct TransformerBlock {
    pub wq: Array2<f64>,
    pub bq: Array1<f64>,
    pub wk: Array2<f64>,
    pub bk: Array1<f64>,
    pub wv: Array2<f64>,
    pub bv: Array1<f64>,
    pub wo: Array2<f64>,
    pub bo: Array1<f64>,
    pub ln1_gain: Array1<f64>,
    pub ln1_bias: Array1<f64>,
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
    pub ln2_gain: Array1<f64>,
    pub ln2_bias: Array1<f64>,
}

struct LayerNormCache {
    normed: Array2<f64>,
    inv_std: Array1<f64>,
}

pub(super) struct BlockCache {
    tokens: usize,
    x: Array2<f64>,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    attention: Array3<f64>,
    context: Array2<f64>,
    h1: Array2<f64>,
    ln1: LayerNormCache,
    pre_act: Array2<f64>,
    act: Array2<f64>,
    ln2: LayerNormCache,
}

/// Intermediate values of one forward pass over a single sequence.
#[derive(Debug, Clone)]
pub struct BlockTrace {
    /// Row-stochastic attention weights, tokens × tokens.
    pub attention: Array2<f64>,
    /// Value projection of each token.
    pub values: Array2<f64>,
    /// Attention-weighted values, before the output projection.
    pub context: Array2<f64>,
    pub output: Array2<f64>,
}

pub(super) fn uniform(rng: &mut impl Rng, shape: (usize, usize), fan_in: usize) -> Array2<f64> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    Array2::from_shape_simple_fn(shape, || rng.random_range(-bound..bound))
}

fn gelu(u: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    0.5 * u * (1.0 + (C * (u + 0.044715 * u * u * u)).tanh())
}

fn gelu_grad(u: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4;
    let t = (C * (u + 0.044715 * u * u * u)).tanh();
    0.5 * (1.0 + t) + 0.5 * u * (1.0 - t * t) * C * (1.0 + 3.0 * 0.044715 * u * u)
}

fn layer_norm(x: &Array2<f64>, gain: &Array1<f64>, bias: &Array1<f64>) -> (Array2<f64>, LayerNormCache) {
    let d = x.ncols() as f64;
    let mut normed = x.clone();
    let mut inv_std = Array1::zeros(x.nrows());
    for (mut row, s) in normed.rows_mut().into_iter().zip(inv_std.iter_mut()) {
        let mean = row.sum() / d;
        row.mapv_inplace(|v| v - mean);
        let var = row.dot(&row) / d;
        *s = 1.0 / (var + LN_EPS).sqrt();
        row.mapv_inplace(|v| v * *s);
    }
    let y = &normed * gain + bias;
    (y, LayerNormCache { normed, inv_std })
}

fn layer_norm_backward(
    dy: &Array2<f64>,
    cache: &LayerNormCache,
    gain: &Array1<f64>,
    dgain: &mut Array1<f64>,
    dbias: &mut Array1<f64>,
) -> Array2<f64> {
    *dgain += &(dy * &cache.normed).sum_axis(Axis(0));
    *dbias += &dy.sum_axis(Axis(0));
    let d = dy.ncols() as f64;
    let mut dx = dy * gain;
    for ((mut row, xhat), &s) in dx.rows_mut().into_iter().zip(cache.normed.rows()).zip(&cache.inv_std) {
        let mean_g = row.sum() / d;
        let mean_gx = row.dot(&xhat) / d;
        Zip::from(&mut row).and(&xhat).for_each(|g, &xh| *g = s * (*g - mean_g - xh * mean_gx));
    }
    dx
}

fn softmax_rows_inplace(m: &mut Array2<f64>) {
    for mut row in m.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
}

impl TransformerBlock {
    pub fn new(dim: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        TransformerBlock {
            wq: uniform(rng, (dim, dim), dim),
            bq: Array1::zeros(dim),
            wk: uniform(rng, (dim, dim), dim),
            bk: Array1::zeros(dim),
            wv: uniform(rng, (dim, dim), dim),
            bv: Array1::zeros(dim),
            wo: uniform(rng, (dim, dim), dim),
            bo: Array1::zeros(dim),
            ln1_gain: Array1::ones(dim),
            ln1_bias: Array1::zeros(dim),
            w1: uniform(rng, (dim, hidden), dim),
            b1: Array1::zeros(hidden),
            w2: uniform(rng, (hidden, dim), hidden),
            b2: Array1::zeros(dim),
            ln2_gain: Array1::ones(dim),
            ln2_bias: Array1::zeros(dim),
        }
    }

    pub fn zeros_like(&self) -> Self {
        let z1 = |a: &Array1<f64>| Array1::zeros(a.raw_dim());
        let z2 = |a: &Array2<f64>| Array2::zeros(a.raw_dim());
        TransformerBlock {
            wq: z2(&self.wq),
            bq: z1(&self.bq),
            wk: z2(&self.wk),
            bk: z1(&self.bk),
            wv: z2(&self.wv),
            bv: z1(&self.bv),
            wo: z2(&self.wo),
            bo: z1(&self.bo),
            ln1_gain: z1(&self.ln1_gain),
            ln1_bias: z1(&self.ln1_bias),
            w1: z2(&self.w1),
            b1: z1(&self.b1),
            w2: z2(&self.w2),
            b2: z1(&self.b2),
            ln2_gain: z1(&self.ln2_gain),
            ln2_bias: z1(&self.ln2_bias),
        }
    }

    pub fn dim(&self) -> usize {
        self.wq.nrows()
    }

    /// Runs the block on one token sequence (tokens × dim).
    pub fn forward(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        Ok(self.trace(x)?.output)
    }

    pub fn trace(&self, x: ArrayView2<f64>) -> Result<BlockTrace> {
        if x.nrows() == 0 {
            return Err(Error::Shape("transformer block needs at least one token".into()));
        }
        if x.ncols() != self.dim() {
            return Err(Error::Shape(format!(
                "token width {} does not match block width {}",
                x.ncols(),
                self.dim()
            )));
        }
        let (output, cache) = self.forward_batch(&x.to_owned(), x.nrows());
        Ok(BlockTrace {
            attention: cache.attention.index_axis(Axis(0), 0).to_owned(),
            values: cache.v,
            context: cache.context,
            output,
        })
    }

    /// Forward over a batch of sequences stacked row-wise, `tokens` rows per
    /// sequence.
    pub(super) fn forward_batch(&self, x: &Array2<f64>, tokens: usize) -> (Array2<f64>, BlockCache) {
        let batch = x.nrows() / tokens;
        let scale = 1.0 / (self.dim() as f64).sqrt();
        let q = x.dot(&self.wq) + &self.bq;
        let k = x.dot(&self.wk) + &self.bk;
        let v = x.dot(&self.wv) + &self.bv;
        let mut attention = Array3::zeros((batch, tokens, tokens));
        let mut context = Array2::zeros(x.raw_dim());
        for b in 0..batch {
            let rows = s![b * tokens..(b + 1) * tokens, ..];
            let mut scores = q.slice(rows).dot(&k.slice(rows).t()) * scale;
            softmax_rows_inplace(&mut scores);
            context.slice_mut(rows).assign(&scores.dot(&v.slice(rows)));
            attention.index_axis_mut(Axis(0), b).assign(&scores);
        }
        let attended = context.dot(&self.wo) + &self.bo;
        let (h1, ln1) = layer_norm(&(x + &attended), &self.ln1_gain, &self.ln1_bias);
        let pre_act = h1.dot(&self.w1) + &self.b1;
        let act = pre_act.mapv(gelu);
        let ffn = act.dot(&self.w2) + &self.b2;
        let (y, ln2) = layer_norm(&(&h1 + &ffn), &self.ln2_gain, &self.ln2_bias);
        let cache = BlockCache {
            tokens,
            x: x.clone(),
            q,
            k,
            v,
            attention,
            context,
            h1,
            ln1,
            pre_act,
            act,
            ln2,
        };
        (y, cache)
    }

    /// Accumulates parameter gradients into `grads` and returns the
    /// gradient with respect to the block input.
    pub(super) fn backward_batch(&self, dy: &Array2<f64>, cache: &BlockCache, grads: &mut TransformerBlock) -> Array2<f64> {
        let tokens = cache.tokens;
        let batch = dy.nrows() / tokens;
        let scale = 1.0 / (self.dim() as f64).sqrt();

        let dr2 = layer_norm_backward(dy, &cache.ln2, &self.ln2_gain, &mut grads.ln2_gain, &mut grads.ln2_bias);
        grads.w2 += &cache.act.t().dot(&dr2);
        grads.b2 += &dr2.sum_axis(Axis(0));
        let mut dpre = dr2.dot(&self.w2.t());
        Zip::from(&mut dpre).and(&cache.pre_act).for_each(|g, &u| *g *= gelu_grad(u));
        grads.w1 += &cache.h1.t().dot(&dpre);
        grads.b1 += &dpre.sum_axis(Axis(0));
        let dh1 = dr2 + dpre.dot(&self.w1.t());

        let dr1 = layer_norm_backward(&dh1, &cache.ln1, &self.ln1_gain, &mut grads.ln1_gain, &mut grads.ln1_bias);
        grads.wo += &cache.context.t().dot(&dr1);
        grads.bo += &dr1.sum_axis(Axis(0));
        let dcontext = dr1.dot(&self.wo.t());

        let mut dq = Array2::zeros(dy.raw_dim());
        let mut dk = Array2::zeros(dy.raw_dim());
        let mut dv = Array2::zeros(dy.raw_dim());
        for b in 0..batch {
            let rows = s![b * tokens..(b + 1) * tokens, ..];
            let a = cache.attention.index_axis(Axis(0), b);
            let dc = dcontext.slice(rows);
            dv.slice_mut(rows).assign(&a.t().dot(&dc));
            let da = dc.dot(&cache.v.slice(rows).t());
            let mut ds = &da * &a;
            for (mut row, arow) in ds.rows_mut().into_iter().zip(a.rows()) {
                let total = row.sum();
                Zip::from(&mut row).and(&arow).for_each(|g, &p| *g -= p * total);
            }
            ds *= scale;
            dq.slice_mut(rows).assign(&ds.dot(&cache.k.slice(rows)));
            dk.slice_mut(rows).assign(&ds.t().dot(&cache.q.slice(rows)));
        }
        grads.wq += &cache.x.t().dot(&dq);
        grads.bq += &dq.sum_axis(Axis(0));
        grads.wk += &cache.x.t().dot(&dk);
        grads.bk += &dk.sum_axis(Axis(0));
        grads.wv += &cache.x.t().dot(&dv);
        grads.bv += &dv.sum_axis(Axis(0));
        dr1 + dq.dot(&self.wq.t()) + dk.dot(&self.wk.t()) + dv.dot(&self.wv.t())
    }
}

macro_rules! block_fields {
    ($mac:ident) => {
        $mac!(wq, bq, wk, bk, wv, bv, wo, bo, ln1_gain, ln1_bias, w1, b1, w2, b2, ln2_gain, ln2_bias)
    };
}

impl Parameters for TransformerBlock {
    fn tensors(&self) -> Vec<(String, Vec<usize>, &[f64])> {
        macro_rules! collect {
            ($($f:ident),*) => {
                vec![$((
                    stringify!($f).to_string(),
                    self.$f.shape().to_vec(),
                    self.$f.as_slice().expect("standard layout"),
                )),*]
            };
        }
        block_fields!(collect)
    }

    fn tensors_mut(&mut self) -> Vec<(String, &mut [f64])> {
        macro_rules! collect {
            ($($f:ident),*) => {
                vec![$((stringify!($f).to_string(), self.$f.as_slice_mut().expect("standard layout"))),*]
            };
        }
        block_fields!(collect)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn block(dim: usize, seed: u64) -> TransformerBlock {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut b = TransformerBlock::new(dim, 2 * dim, &mut rng);
        // Non-trivial biases and norms so every path carries gradient.
        for (_, t) in b.tensors_mut() {
            for v in t.iter_mut() {
                *v += rng.random_range(-0.3..0.3);
            }
        }
        b
    }

    #[test]
    fn single_token_attends_to_itself() {
        let b = block(5, 1);
        let x = Array2::from_shape_vec((1, 5), vec![0.3, -1.0, 0.2, 0.8, -0.4]).unwrap();
        let t = b.trace(x.view()).unwrap();
        assert_eq!(t.attention.shape(), &[1, 1]);
        assert!((t.attention[[0, 0]] - 1.0).abs() < 1e-15);
        let values = x.dot(&b.wv) + &b.bv;
        for (c, v) in t.context.iter().zip(values.iter()) {
            assert!((c - v).abs() < 1e-12);
        }
        assert_eq!(t.output.dim(), (1, 5));
    }

    #[test]
    fn identical_tokens_give_identical_outputs() {
        let b = block(4, 2);
        let x = Array2::from_shape_vec((2, 4), vec![0.5, -0.1, 0.9, 0.0, 0.5, -0.1, 0.9, 0.0]).unwrap();
        let y = b.forward(x.view()).unwrap();
        assert_eq!(y.row(0), y.row(1));
    }

    #[test]
    fn shape_errors() {
        let b = block(4, 3);
        assert!(matches!(b.forward(Array2::zeros((0, 4)).view()), Err(Error::Shape(_))));
        assert!(matches!(b.forward(Array2::zeros((3, 5)).view()), Err(Error::Shape(_))));
        assert_eq!(b.forward(Array2::zeros((3, 4)).view()).unwrap().dim(), (3, 4));
    }

    #[test]
    fn attention_rows_are_stochastic() {
        let b = block(6, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = Array2::from_shape_simple_fn((7, 6), || rng.random_range(-2.0..2.0));
        let t = b.trace(x.view()).unwrap();
        for row in t.attention.rows() {
            assert!((row.sum() - 1.0).abs() < 1e-12);
        }
    }

    /// Scalar test loss: Σ c ⊙ y for a fixed random c.
    #[test]
    fn block_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (dim, tokens, batch) = (4, 4, 2);
        let b = block(dim, 5);
        let x = Array2::from_shape_simple_fn((tokens * batch, dim), || rng.random_range(-1.0..1.0));
        let c = Array2::from_shape_simple_fn((tokens * batch, dim), || rng.random_range(-1.0..1.0));
        let loss = |blk: &TransformerBlock, x: &Array2<f64>| (&blk.forward_batch(x, tokens).0 * &c).sum();

        let (_, cache) = b.forward_batch(&x, tokens);
        let mut grads = b.zeros_like();
        let dx = b.backward_batch(&c, &cache, &mut grads);

        let h = 1e-6;
        let check = |analytic: f64, plus: f64, minus: f64, what: &str| {
            let fd = (plus - minus) / (2.0 * h);
            let rel = (analytic - fd).abs() / analytic.abs().max(fd.abs()).max(1e-6);
            assert!(rel < 1e-4, "{what}: analytic {analytic} vs fd {fd}");
        };
        let names: Vec<String> = b.tensors().into_iter().map(|(n, _, _)| n).collect();
        let analytic: Vec<Vec<f64>> = grads.tensors().into_iter().map(|(_, _, g)| g.to_vec()).collect();
        for (t, name) in names.iter().enumerate() {
            for i in 0..analytic[t].len() {
                let mut up = b.clone();
                up.tensors_mut()[t].1[i] += h;
                let mut down = b.clone();
                down.tensors_mut()[t].1[i] -= h;
                check(analytic[t][i], loss(&up, &x), loss(&down, &x), &format!("{name}[{i}]"));
            }
        }
        for i in 0..x.len() {
            let mut up = x.clone();
            up.as_slice_mut().unwrap()[i] += h;
            let mut down = x.clone();
            down.as_slice_mut().unwrap()[i] -= h;
            check(dx.as_slice().unwrap()[i], loss(&b, &up), loss(&b, &down), &format!("x[{i}]"));
        }
    }
}
