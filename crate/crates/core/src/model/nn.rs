//! Dense layers with hand-written backward passes.
//!
//! Every `forward` returns its output together with the tape the matching
//! `backward` needs. Gradients are accumulated (`+=`) into a parameter
//! struct of the same shape, so per-sample gradients can be summed in a
//! fixed order.

use ndarray::{s, Array1, Array2, ArrayView2, Axis, NdFloat, Zip};
use rand::Rng;

pub(crate) fn cst<F: NdFloat>(x: f64) -> F {
    F::from(x).expect("constant representable")
}

pub(crate) fn uniform<F: NdFloat>(shape: (usize, usize), bound: f64, rng: &mut impl Rng) -> Array2<F> {
    Array2::from_shape_fn(shape, |_| cst(rng.random_range(-bound..bound)))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Linear<F> {
    /// `in x out`
    pub w: Array2<F>,
    pub b: Array1<F>,
}

impl<F: NdFloat> Linear<F> {
    pub fn init(fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let w = uniform((fan_in, fan_out), bound, rng);
        let b = uniform((1, fan_out), bound, rng).remove_axis(Axis(0));
        Self { w, b }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            w: Array2::zeros(self.w.raw_dim()),
            b: Array1::zeros(self.b.raw_dim()),
        }
    }

    pub fn forward(&self, x: ArrayView2<F>) -> Array2<F> {
        x.dot(&self.w) + &self.b
    }

    /// Accumulates parameter gradients and returns `dL/dx`.
    pub fn backward(&self, x: ArrayView2<F>, dy: ArrayView2<F>, grad: &mut Self) -> Array2<F> {
        grad.w += &x.t().dot(&dy);
        grad.b += &dy.sum_axis(Axis(0));
        dy.dot(&self.w.t())
    }
}

pub const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm<F> {
    pub gain: Array1<F>,
    pub bias: Array1<F>,
}

pub struct LayerNormTape<F> {
    xhat: Array2<F>,
    rstd: Array1<F>,
}

impl<F: NdFloat> LayerNorm<F> {
    pub fn new(dim: usize) -> Self {
        Self {
            gain: Array1::ones(dim),
            bias: Array1::zeros(dim),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            gain: Array1::zeros(self.gain.raw_dim()),
            bias: Array1::zeros(self.bias.raw_dim()),
        }
    }

    pub fn forward(&self, x: ArrayView2<F>) -> (Array2<F>, LayerNormTape<F>) {
        let (n, d) = x.dim();
        let inv_d = F::one() / cst(d as f64);
        let eps = cst(LN_EPS);
        let mut xhat = Array2::zeros((n, d));
        let mut rstd = Array1::zeros(n);
        for ((row, mut out), r) in x.rows().into_iter().zip(xhat.rows_mut()).zip(rstd.iter_mut()) {
            let mean = row.sum() * inv_d;
            let var = row.fold(F::zero(), |acc, &v| acc + (v - mean) * (v - mean)) * inv_d;
            let rs = F::one() / (var + eps).sqrt();
            Zip::from(&mut out).and(&row).for_each(|o, &v| *o = (v - mean) * rs);
            *r = rs;
        }
        let y = &xhat * &self.gain + &self.bias;
        (y, LayerNormTape { xhat, rstd })
    }

    pub fn backward(&self, tape: &LayerNormTape<F>, dy: ArrayView2<F>, grad: &mut Self) -> Array2<F> {
        grad.gain += &(&dy * &tape.xhat).sum_axis(Axis(0));
        grad.bias += &dy.sum_axis(Axis(0));
        let d = dy.ncols();
        let inv_d = F::one() / cst(d as f64);
        let dxhat = &dy * &self.gain;
        let mut dx = Array2::zeros(dy.raw_dim());
        for (((g, xh), mut out), &rs) in dxhat
            .rows()
            .into_iter()
            .zip(tape.xhat.rows())
            .zip(dx.rows_mut())
            .zip(tape.rstd.iter())
        {
            let mean_g = g.sum() * inv_d;
            let mean_gx = g.iter().zip(xh.iter()).fold(F::zero(), |a, (&p, &q)| a + p * q) * inv_d;
            Zip::from(&mut out)
                .and(&g)
                .and(&xh)
                .for_each(|o, &gi, &xi| *o = rs * (gi - mean_g - xi * mean_gx));
        }
        dx
    }
}

const GELU_K: f64 = 0.797_884_560_802_865_4;
const GELU_C: f64 = 0.044_715;

/// Tanh approximation of GELU.
pub fn gelu<F: NdFloat>(x: F) -> F {
    let k = cst::<F>(GELU_K);
    let u = k * (x + cst::<F>(GELU_C) * x * x * x);
    cst::<F>(0.5) * x * (F::one() + u.tanh())
}

pub fn gelu_grad<F: NdFloat>(x: F) -> F {
    let k = cst::<F>(GELU_K);
    let c = cst::<F>(GELU_C);
    let half = cst::<F>(0.5);
    let th = (k * (x + c * x * x * x)).tanh();
    half * (F::one() + th) + half * x * (F::one() - th * th) * k * (F::one() + cst::<F>(3.0) * c * x * x)
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeedForward<F> {
    pub up: Linear<F>,
    pub down: Linear<F>,
}

pub struct FeedForwardTape<F> {
    x: Array2<F>,
    pre: Array2<F>,
    act: Array2<F>,
}

impl<F: NdFloat> FeedForward<F> {
    pub fn forward(&self, x: ArrayView2<F>) -> (Array2<F>, FeedForwardTape<F>) {
        let pre = self.up.forward(x);
        let act = pre.mapv(gelu);
        let y = self.down.forward(act.view());
        (
            y,
            FeedForwardTape {
                x: x.to_owned(),
                pre,
                act,
            },
        )
    }

    pub fn backward(&self, tape: &FeedForwardTape<F>, dy: ArrayView2<F>, grad: &mut Self) -> Array2<F> {
        let dact = self.down.backward(tape.act.view(), dy, &mut grad.down);
        let dpre = Zip::from(&dact).and(&tape.pre).map_collect(|&g, &p| g * gelu_grad(p));
        self.up.backward(tape.x.view(), dpre.view(), &mut grad.up)
    }
}

/// Multi-head self-attention. `mask[[i, j]] == true` lets row `i` attend to key `j`.
#[derive(Debug, Clone, PartialEq)]
pub struct Attention<F> {
    pub heads: usize,
    pub q: Linear<F>,
    pub k: Linear<F>,
    pub v: Linear<F>,
    pub o: Linear<F>,
}

pub struct AttentionTape<F> {
    x: Array2<F>,
    q: Array2<F>,
    k: Array2<F>,
    v: Array2<F>,
    probs: Vec<Array2<F>>,
    mixed: Array2<F>,
}

fn masked_softmax<F: NdFloat>(scores: &mut Array2<F>, mask: Option<&Array2<bool>>) {
    for (i, mut row) in scores.rows_mut().into_iter().enumerate() {
        let allowed = |j: usize| mask.is_none_or(|m| m[[i, j]]);
        let mut max = F::neg_infinity();
        for (j, &v) in row.iter().enumerate() {
            if allowed(j) && v > max {
                max = v;
            }
        }
        let mut sum = F::zero();
        for (j, v) in row.iter_mut().enumerate() {
            if allowed(j) {
                *v = (*v - max).exp();
                sum += *v;
            } else {
                *v = F::zero();
            }
        }
        row.mapv_inplace(|v| v / sum);
    }
}

impl<F: NdFloat> Attention<F> {
    pub fn head_dim(&self) -> usize {
        self.q.w.ncols() / self.heads
    }

    pub fn forward(&self, x: ArrayView2<F>, mask: Option<&Array2<bool>>) -> (Array2<F>, AttentionTape<F>) {
        let q = self.q.forward(x);
        let k = self.k.forward(x);
        let v = self.v.forward(x);
        let d = self.head_dim();
        let scale = F::one() / cst::<F>(d as f64).sqrt();
        let mut mixed = Array2::zeros(q.raw_dim());
        let mut probs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let cols = s![.., h * d..(h + 1) * d];
            let mut scores = q.slice(cols).dot(&k.slice(cols).t());
            scores.mapv_inplace(|s| s * scale);
            masked_softmax(&mut scores, mask);
            mixed.slice_mut(cols).assign(&scores.dot(&v.slice(cols)));
            probs.push(scores);
        }
        let y = self.o.forward(mixed.view());
        let tape = AttentionTape {
            x: x.to_owned(),
            q,
            k,
            v,
            probs,
            mixed,
        };
        (y, tape)
    }

    pub fn backward(&self, tape: &AttentionTape<F>, dy: ArrayView2<F>, grad: &mut Self) -> Array2<F> {
        let dmixed = self.o.backward(tape.mixed.view(), dy, &mut grad.o);
        let d = self.head_dim();
        let scale = F::one() / cst::<F>(d as f64).sqrt();
        let mut dq = Array2::zeros(tape.q.raw_dim());
        let mut dk = Array2::zeros(tape.k.raw_dim());
        let mut dv = Array2::zeros(tape.v.raw_dim());
        for (h, a) in tape.probs.iter().enumerate() {
            let cols = s![.., h * d..(h + 1) * d];
            let dout = dmixed.slice(cols);
            let da = dout.dot(&tape.v.slice(cols).t());
            dv.slice_mut(cols).assign(&a.t().dot(&dout));
            let mut ds = &da * a;
            let row_dot = ds.sum_axis(Axis(1));
            Zip::from(ds.rows_mut())
                .and(a.rows())
                .and(&row_dot)
                .for_each(|mut ds_row, a_row, &rd| {
                    Zip::from(&mut ds_row).and(&a_row).for_each(|g, &p| *g = *g - p * rd);
                });
            ds.mapv_inplace(|g| g * scale);
            dq.slice_mut(cols).assign(&ds.dot(&tape.k.slice(cols)));
            dk.slice_mut(cols).assign(&ds.t().dot(&tape.q.slice(cols)));
        }
        let x = tape.x.view();
        let mut dx = self.q.backward(x, dq.view(), &mut grad.q);
        dx += &self.k.backward(x, dk.view(), &mut grad.k);
        dx += &self.v.backward(x, dv.view(), &mut grad.v);
        dx
    }
}

/// Pre-norm transformer block: `x + attn(ln1(x))`, then `+ ffn(ln2(.))`.
#[derive(Debug, Clone, PartialEq)]
pub struct Block<F> {
    pub ln1: LayerNorm<F>,
    pub attn: Attention<F>,
    pub ln2: LayerNorm<F>,
    pub ffn: FeedForward<F>,
}

pub struct BlockTape<F> {
    ln1: LayerNormTape<F>,
    attn: AttentionTape<F>,
    ln2: LayerNormTape<F>,
    ffn: FeedForwardTape<F>,
}

impl<F: NdFloat> Block<F> {
    pub fn init(dim: usize, heads: usize, ffn_mult: usize, rng: &mut impl Rng) -> Self {
        Self {
            ln1: LayerNorm::new(dim),
            attn: Attention {
                heads,
                q: Linear::init(dim, dim, rng),
                k: Linear::init(dim, dim, rng),
                v: Linear::init(dim, dim, rng),
                o: Linear::init(dim, dim, rng),
            },
            ln2: LayerNorm::new(dim),
            ffn: FeedForward {
                up: Linear::init(dim, dim * ffn_mult, rng),
                down: Linear::init(dim * ffn_mult, dim, rng),
            },
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            ln1: self.ln1.zeros_like(),
            attn: Attention {
                heads: self.attn.heads,
                q: self.attn.q.zeros_like(),
                k: self.attn.k.zeros_like(),
                v: self.attn.v.zeros_like(),
                o: self.attn.o.zeros_like(),
            },
            ln2: self.ln2.zeros_like(),
            ffn: FeedForward {
                up: self.ffn.up.zeros_like(),
                down: self.ffn.down.zeros_like(),
            },
        }
    }

    pub fn forward(&self, x: ArrayView2<F>, mask: Option<&Array2<bool>>) -> (Array2<F>, BlockTape<F>) {
        let (n1, ln1) = self.ln1.forward(x);
        let (a, attn) = self.attn.forward(n1.view(), mask);
        let h = &x + &a;
        let (n2, ln2) = self.ln2.forward(h.view());
        let (f, ffn) = self.ffn.forward(n2.view());
        (h + f, BlockTape { ln1, attn, ln2, ffn })
    }

    pub fn backward(&self, tape: &BlockTape<F>, dy: ArrayView2<F>, grad: &mut Self) -> Array2<F> {
        let dn2 = self.ffn.backward(&tape.ffn, dy, &mut grad.ffn);
        let dh = &dy + &self.ln2.backward(&tape.ln2, dn2.view(), &mut grad.ln2);
        let dn1 = self.attn.backward(&tape.attn, dh.view(), &mut grad.attn);
        dh.clone() + self.ln1.backward(&tape.ln1, dn1.view(), &mut grad.ln1)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_mat(shape: (usize, usize), rng: &mut impl Rng) -> Array2<f64> {
        Array2::from_shape_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    /// Checks `d/dx sum(y * w)` against central differences for a layer closure.
    fn check_input_grad(
        x: &Array2<f64>,
        weight: &Array2<f64>,
        f: impl Fn(&Array2<f64>) -> Array2<f64>,
        analytic: &Array2<f64>,
    ) {
        let h = 1e-6;
        for idx in 0..x.len() {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp.as_slice_mut().unwrap()[idx] += h;
            xm.as_slice_mut().unwrap()[idx] -= h;
            let fd = ((f(&xp) * weight).sum() - (f(&xm) * weight).sum()) / (2.0 * h);
            let a = analytic.as_slice().unwrap()[idx];
            assert!((a - fd).abs() < 1e-6 * (1.0 + fd.abs()), "entry {idx}: {a} vs {fd}");
        }
    }

    #[test]
    fn gelu_derivative() {
        for &x in &[-3.0f64, -0.5, 0.0, 0.3, 2.0] {
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((gelu_grad(x) - fd).abs() < 1e-8);
        }
    }

    #[test]
    fn layer_norm_input_grad() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut ln = LayerNorm::<f64>::new(5);
        ln.gain = Array1::from_shape_fn(5, |_| rng.random_range(0.5..1.5));
        let x = rand_mat((3, 5), &mut rng);
        let w = rand_mat((3, 5), &mut rng);
        let (_, tape) = ln.forward(x.view());
        let mut g = ln.zeros_like();
        let dx = ln.backward(&tape, w.view(), &mut g);
        check_input_grad(&x, &w, |x| ln.forward(x.view()).0, &dx);
    }

    #[test]
    fn masked_attention_input_grad() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let block = Block::<f64>::init(8, 2, 2, &mut rng);
        let mask = Array2::from_shape_fn((5, 5), |(i, j)| j >= 3 || i == j);
        let x = rand_mat((5, 8), &mut rng);
        let w = rand_mat((5, 8), &mut rng);
        let (_, tape) = block.forward(x.view(), Some(&mask));
        let mut g = block.zeros_like();
        let dx = block.backward(&tape, w.view(), &mut g);
        check_input_grad(&x, &w, |x| block.forward(x.view(), Some(&mask)).0, &dx);
    }

    #[test]
    fn masked_keys_get_no_weight() {
        let mut scores = Array2::from_elem((2, 3), 1.0f64);
        let mask = Array2::from_shape_vec((2, 3), vec![true, false, true, false, false, true]).unwrap();
        masked_softmax(&mut scores, Some(&mask));
        assert_eq!(scores.row(0).to_vec(), vec![0.5, 0.0, 0.5]);
        assert_eq!(scores.row(1).to_vec(), vec![0.0, 0.0, 1.0]);
    }
}
