use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array1, Array2, ArrayView2, Axis, Zip};
use rand::Rng;

use super::{ParamId, ParamLayout, Params, Scalar};

pub fn sigmoid<S: Scalar>(x: S) -> S {
    S::one() / (S::one() + (-x).exp())
}

pub fn silu<S: Scalar>(x: S) -> S {
    x * sigmoid(x)
}

pub fn silu_grad<S: Scalar>(x: S) -> S {
    let s = sigmoid(x);
    s * (S::one() + x * (S::one() - s))
}

/// Mean squared error over every element.
pub fn mse<S: Scalar>(pred: &ArrayView2<S>, target: &ArrayView2<S>) -> S {
    let n = S::from_usize(pred.len()).expect("len");
    Zip::from(pred)
        .and(target)
        .fold(S::zero(), |acc, &p, &t| acc + (p - t) * (p - t))
        / n
}

pub fn mse_grad<S: Scalar>(pred: &ArrayView2<S>, target: &ArrayView2<S>) -> Array2<S> {
    let k = S::from_f64(2.0).expect("2") / S::from_usize(pred.len()).expect("len");
    Zip::from(pred).and(target).map_collect(|&p, &t| k * (p - t))
}

/// Sinusoidal embedding of a scalar position (used for the noise level).
pub fn sinusoidal_embedding<S: Scalar>(pos: f64, dim: usize) -> Array1<S> {
    let half = dim / 2;
    let mut out = Array1::zeros(dim);
    for i in 0..half {
        let freq = (-(10_000f64.ln()) * i as f64 / half as f64).exp();
        out[i] = S::from_f64_lossy((pos * freq).sin());
        out[i + half] = S::from_f64_lossy((pos * freq).cos());
    }
    out
}

/// Affine map `y = x W + b` applied to every row.
#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new(layout: &mut ParamLayout, name: &str, fan_in: usize, fan_out: usize) -> Self {
        Self {
            w: layout.add(format!("{name}.weight"), &[fan_in, fan_out]),
            b: layout.add(format!("{name}.bias"), &[fan_out]),
            fan_in,
            fan_out,
        }
    }

    pub fn init<S: Scalar, R: Rng + ?Sized>(&self, p: &mut Params<S>, gain: f64, rng: &mut R) {
        p.init_normal(self.w, gain / (self.fan_in as f64).sqrt(), rng);
        p.init_const(self.b, 0.0);
    }

    pub fn forward<S: Scalar>(&self, p: &Params<S>, x: &ArrayView2<S>) -> Array2<S> {
        let mut y = x.dot(&p.mat(self.w));
        y += &p.vec(self.b);
        y
    }

    /// Accumulates parameter gradients and returns `dL/dx` when requested.
    pub fn backward<S: Scalar>(
        &self,
        p: &Params<S>,
        g: &mut Params<S>,
        x: &ArrayView2<S>,
        dy: &ArrayView2<S>,
        want_dx: bool,
    ) -> Option<Array2<S>> {
        general_mat_mul(S::one(), &x.t(), dy, S::one(), &mut g.mat_mut(self.w));
        g.vec_mut(self.b).scaled_add(S::one(), &dy.sum_axis(Axis(0)));
        want_dx.then(|| dy.dot(&p.mat(self.w).t()))
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub dim: usize,
}

#[derive(Debug, Clone)]
pub struct LayerNormCache<S> {
    xhat: Array2<S>,
    rstd: Array1<S>,
}

impl LayerNorm {
    const EPS: f64 = 1e-5;

    pub fn new(layout: &mut ParamLayout, name: &str, dim: usize) -> Self {
        Self {
            gamma: layout.add(format!("{name}.gamma"), &[dim]),
            beta: layout.add(format!("{name}.beta"), &[dim]),
            dim,
        }
    }

    pub fn init<S: Scalar>(&self, p: &mut Params<S>) {
        p.init_const(self.gamma, 1.0);
        p.init_const(self.beta, 0.0);
    }

    pub fn forward<S: Scalar>(
        &self,
        p: &Params<S>,
        x: &ArrayView2<S>,
    ) -> (Array2<S>, LayerNormCache<S>) {
        let d = S::from_usize(self.dim).expect("dim");
        let eps = S::from_f64_lossy(Self::EPS);
        let mut xhat = x.to_owned();
        let mut rstd = Array1::zeros(x.nrows());
        for (mut row, r) in xhat.rows_mut().into_iter().zip(rstd.iter_mut()) {
            let mean = row.sum() / d;
            row.mapv_inplace(|v| v - mean);
            let var = row.fold(S::zero(), |acc, &v| acc + v * v) / d;
            *r = S::one() / (var + eps).sqrt();
            let k = *r;
            row.mapv_inplace(|v| v * k);
        }
        let mut y = &xhat * &p.vec(self.gamma);
        y += &p.vec(self.beta);
        (y, LayerNormCache { xhat, rstd })
    }

    pub fn backward<S: Scalar>(
        &self,
        p: &Params<S>,
        g: &mut Params<S>,
        cache: &LayerNormCache<S>,
        dy: &ArrayView2<S>,
    ) -> Array2<S> {
        let d = S::from_usize(self.dim).expect("dim");
        g.vec_mut(self.gamma)
            .scaled_add(S::one(), &(dy * &cache.xhat).sum_axis(Axis(0)));
        g.vec_mut(self.beta)
            .scaled_add(S::one(), &dy.sum_axis(Axis(0)));
        let mut dx = dy * &p.vec(self.gamma);
        for ((mut row, xh), &r) in dx
            .rows_mut()
            .into_iter()
            .zip(cache.xhat.rows())
            .zip(cache.rstd.iter())
        {
            let mean_d = row.sum() / d;
            let mean_dx = row.dot(&xh) / d;
            Zip::from(&mut row)
                .and(&xh)
                .for_each(|v, &h| *v = r * (*v - mean_d - h * mean_dx));
        }
        dx
    }
}

/// Full (non-causal) multi-head self-attention.
#[derive(Debug, Clone)]
pub struct Attention {
    pub qkv: Linear,
    pub out: Linear,
    pub heads: usize,
    pub dim: usize,
}

#[derive(Debug, Clone)]
pub struct AttentionCache<S> {
    x: Array2<S>,
    qkv: Array2<S>,
    probs: Vec<Array2<S>>,
    ctx: Array2<S>,
}

impl Attention {
    pub fn new(layout: &mut ParamLayout, name: &str, dim: usize, heads: usize) -> Self {
        assert!(heads > 0 && dim % heads == 0, "d_model must divide by n_heads");
        Self {
            qkv: Linear::new(layout, &format!("{name}.qkv"), dim, 3 * dim),
            out: Linear::new(layout, &format!("{name}.out"), dim, dim),
            heads,
            dim,
        }
    }

    pub fn init<S: Scalar, R: Rng + ?Sized>(&self, p: &mut Params<S>, out_gain: f64, rng: &mut R) {
        self.qkv.init(p, 1.0, rng);
        self.out.init(p, out_gain, rng);
    }

    fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    pub fn forward<S: Scalar>(
        &self,
        p: &Params<S>,
        x: &ArrayView2<S>,
    ) -> (Array2<S>, AttentionCache<S>) {
        let t = x.nrows();
        let hd = self.head_dim();
        let scale = S::one() / S::from_usize(hd).expect("hd").sqrt();
        let qkv = self.qkv.forward(p, x);
        let mut ctx = Array2::zeros((t, self.dim));
        let mut probs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let q = qkv.slice(s![.., h * hd..(h + 1) * hd]);
            let k = qkv.slice(s![.., self.dim + h * hd..self.dim + (h + 1) * hd]);
            let v = qkv.slice(s![.., 2 * self.dim + h * hd..2 * self.dim + (h + 1) * hd]);
            let mut att = q.dot(&k.t());
            for mut row in att.rows_mut() {
                let max = row.fold(S::neg_infinity(), |m, &v| m.max(v));
                row.mapv_inplace(|v| ((v - max) * scale).exp());
                let sum = row.sum();
                row.mapv_inplace(|v| v / sum);
            }
            general_mat_mul(
                S::one(),
                &att,
                &v,
                S::zero(),
                &mut ctx.slice_mut(s![.., h * hd..(h + 1) * hd]),
            );
            probs.push(att);
        }
        let y = self.out.forward(p, &ctx.view());
        let cache = AttentionCache {
            x: x.to_owned(),
            qkv,
            probs,
            ctx,
        };
        (y, cache)
    }

    pub fn backward<S: Scalar>(
        &self,
        p: &Params<S>,
        g: &mut Params<S>,
        cache: &AttentionCache<S>,
        dy: &ArrayView2<S>,
    ) -> Array2<S> {
        let hd = self.head_dim();
        let scale = S::one() / S::from_usize(hd).expect("hd").sqrt();
        let dctx = self
            .out
            .backward(p, g, &cache.ctx.view(), dy, true)
            .expect("dx");
        let mut dqkv = Array2::zeros(cache.qkv.raw_dim());
        for h in 0..self.heads {
            let (qs, ks, vs) = (
                h * hd,
                self.dim + h * hd,
                2 * self.dim + h * hd,
            );
            let q = cache.qkv.slice(s![.., qs..qs + hd]);
            let k = cache.qkv.slice(s![.., ks..ks + hd]);
            let v = cache.qkv.slice(s![.., vs..vs + hd]);
            let prob = &cache.probs[h];
            let d_out = dctx.slice(s![.., h * hd..(h + 1) * hd]);

            general_mat_mul(
                S::one(),
                &prob.t(),
                &d_out,
                S::zero(),
                &mut dqkv.slice_mut(s![.., vs..vs + hd]),
            );
            let mut ds = d_out.dot(&v.t());
            for (mut row, prow) in ds.rows_mut().into_iter().zip(prob.rows()) {
                let dot = row.dot(&prow);
                Zip::from(&mut row)
                    .and(&prow)
                    .for_each(|d, &pr| *d = pr * (*d - dot) * scale);
            }
            general_mat_mul(
                S::one(),
                &ds,
                &k,
                S::zero(),
                &mut dqkv.slice_mut(s![.., qs..qs + hd]),
            );
            general_mat_mul(
                S::one(),
                &ds.t(),
                &q,
                S::zero(),
                &mut dqkv.slice_mut(s![.., ks..ks + hd]),
            );
        }
        self.qkv
            .backward(p, g, &cache.x.view(), &dqkv.view(), true)
            .expect("dx")
    }
}

/// Position-wise `Linear -> SiLU -> Linear`.
#[derive(Debug, Clone)]
pub struct FeedForward {
    pub fc1: Linear,
    pub fc2: Linear,
}

#[derive(Debug, Clone)]
pub struct FeedForwardCache<S> {
    x: Array2<S>,
    pre: Array2<S>,
    act: Array2<S>,
}

impl FeedForward {
    pub fn new(layout: &mut ParamLayout, name: &str, dim: usize, hidden: usize) -> Self {
        Self {
            fc1: Linear::new(layout, &format!("{name}.fc1"), dim, hidden),
            fc2: Linear::new(layout, &format!("{name}.fc2"), hidden, dim),
        }
    }

    pub fn init<S: Scalar, R: Rng + ?Sized>(&self, p: &mut Params<S>, out_gain: f64, rng: &mut R) {
        self.fc1.init(p, 1.0, rng);
        self.fc2.init(p, out_gain, rng);
    }

    pub fn forward<S: Scalar>(
        &self,
        p: &Params<S>,
        x: &ArrayView2<S>,
    ) -> (Array2<S>, FeedForwardCache<S>) {
        let pre = self.fc1.forward(p, x);
        let act = pre.mapv(silu);
        let y = self.fc2.forward(p, &act.view());
        (
            y,
            FeedForwardCache {
                x: x.to_owned(),
                pre,
                act,
            },
        )
    }

    pub fn backward<S: Scalar>(
        &self,
        p: &Params<S>,
        g: &mut Params<S>,
        cache: &FeedForwardCache<S>,
        dy: &ArrayView2<S>,
    ) -> Array2<S> {
        let mut dact = self
            .fc2
            .backward(p, g, &cache.act.view(), dy, true)
            .expect("dx");
        Zip::from(&mut dact)
            .and(&cache.pre)
            .for_each(|d, &x| *d *= silu_grad(x));
        self.fc1
            .backward(p, g, &cache.x.view(), &dact.view(), true)
            .expect("dx")
    }
}

/// Pre-norm transformer block.
#[derive(Debug, Clone)]
pub struct Block {
    pub ln1: LayerNorm,
    pub attn: Attention,
    pub ln2: LayerNorm,
    pub ff: FeedForward,
}

#[derive(Debug, Clone)]
pub struct BlockCache<S> {
    ln1: LayerNormCache<S>,
    attn: AttentionCache<S>,
    ln2: LayerNormCache<S>,
    ff: FeedForwardCache<S>,
}

impl Block {
    pub fn new(
        layout: &mut ParamLayout,
        name: &str,
        dim: usize,
        heads: usize,
        hidden: usize,
    ) -> Self {
        Self {
            ln1: LayerNorm::new(layout, &format!("{name}.ln1"), dim),
            attn: Attention::new(layout, &format!("{name}.attn"), dim, heads),
            ln2: LayerNorm::new(layout, &format!("{name}.ln2"), dim),
            ff: FeedForward::new(layout, &format!("{name}.ff"), dim, hidden),
        }
    }

    pub fn init<S: Scalar, R: Rng + ?Sized>(&self, p: &mut Params<S>, out_gain: f64, rng: &mut R) {
        self.ln1.init(p);
        self.attn.init(p, out_gain, rng);
        self.ln2.init(p);
        self.ff.init(p, out_gain, rng);
    }

    pub fn forward<S: Scalar>(
        &self,
        p: &Params<S>,
        x: &ArrayView2<S>,
    ) -> (Array2<S>, BlockCache<S>) {
        let (a_in, ln1) = self.ln1.forward(p, x);
        let (a_out, attn) = self.attn.forward(p, &a_in.view());
        let x1 = a_out + x;
        let (f_in, ln2) = self.ln2.forward(p, &x1.view());
        let (f_out, ff) = self.ff.forward(p, &f_in.view());
        let x2 = f_out + &x1;
        (x2, BlockCache { ln1, attn, ln2, ff })
    }

    pub fn backward<S: Scalar>(
        &self,
        p: &Params<S>,
        g: &mut Params<S>,
        cache: &BlockCache<S>,
        dy: &ArrayView2<S>,
    ) -> Array2<S> {
        let d_fin = self.ff.backward(p, g, &cache.ff, dy);
        let mut dx1 = self.ln2.backward(p, g, &cache.ln2, &d_fin.view());
        dx1 += dy;
        let d_ain = self.attn.backward(p, g, &cache.attn, &dx1.view());
        let mut dx = self.ln1.backward(p, g, &cache.ln1, &d_ain.view());
        dx += &dx1;
        dx
    }
}

/// Stack of blocks, optional final norm and a linear read-out head.
///
/// Without the final norm the head sees the raw residual stream, so the
/// input embedding reaches the output through a purely linear path and the
/// magnitude of the input is not normalized away.
#[derive(Debug, Clone)]
pub struct Backbone {
    pub blocks: Vec<Block>,
    pub ln_f: Option<LayerNorm>,
    pub head: Linear,
}

#[derive(Debug, Clone)]
pub struct BackboneCache<S> {
    blocks: Vec<BlockCache<S>>,
    ln_f: Option<LayerNormCache<S>>,
    normed: Array2<S>,
}

impl Backbone {
    pub fn new(
        layout: &mut ParamLayout,
        dim: usize,
        layers: usize,
        heads: usize,
        hidden: usize,
        out_dim: usize,
        final_norm: bool,
    ) -> Self {
        Self {
            blocks: (0..layers)
                .map(|i| Block::new(layout, &format!("blocks.{i}"), dim, heads, hidden))
                .collect(),
            ln_f: final_norm.then(|| LayerNorm::new(layout, "ln_f", dim)),
            head: Linear::new(layout, "head", dim, out_dim),
        }
    }

    pub fn init<S: Scalar, R: Rng + ?Sized>(&self, p: &mut Params<S>, rng: &mut R) {
        let out_gain = 1.0 / (2.0 * self.blocks.len().max(1) as f64).sqrt();
        for b in &self.blocks {
            b.init(p, out_gain, rng);
        }
        if let Some(ln) = &self.ln_f {
            ln.init(p);
        }
        self.head.init(p, 0.1, rng);
    }

    pub fn forward<S: Scalar>(
        &self,
        p: &Params<S>,
        h0: Array2<S>,
    ) -> (Array2<S>, BackboneCache<S>) {
        let mut h = h0;
        let mut caches = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            let (next, cache) = b.forward(p, &h.view());
            caches.push(cache);
            h = next;
        }
        let (normed, ln_f) = match &self.ln_f {
            Some(ln) => {
                let (normed, cache) = ln.forward(p, &h.view());
                (normed, Some(cache))
            }
            None => (h, None),
        };
        let out = self.head.forward(p, &normed.view());
        (
            out,
            BackboneCache {
                blocks: caches,
                ln_f,
                normed,
            },
        )
    }

    /// Inference-only forward without caches.
    pub fn forward_inference<S: Scalar>(&self, p: &Params<S>, h0: Array2<S>) -> Array2<S> {
        let mut h = h0;
        for b in &self.blocks {
            let (a_in, _) = b.ln1.forward(p, &h.view());
            let (a_out, _) = b.attn.forward(p, &a_in.view());
            h += &a_out;
            let (f_in, _) = b.ln2.forward(p, &h.view());
            let (f_out, _) = b.ff.forward(p, &f_in.view());
            h += &f_out;
        }
        match &self.ln_f {
            Some(ln) => self.head.forward(p, &ln.forward(p, &h.view()).0.view()),
            None => self.head.forward(p, &h.view()),
        }
    }

    /// Returns `dL/dh0`.
    pub fn backward<S: Scalar>(
        &self,
        p: &Params<S>,
        g: &mut Params<S>,
        cache: &BackboneCache<S>,
        dout: &ArrayView2<S>,
    ) -> Array2<S> {
        let dnormed = self
            .head
            .backward(p, g, &cache.normed.view(), dout, true)
            .expect("dx");
        let mut dh = match (&self.ln_f, &cache.ln_f) {
            (Some(ln), Some(c)) => ln.backward(p, g, c, &dnormed.view()),
            _ => dnormed,
        };
        for (b, c) in self.blocks.iter().zip(&cache.blocks).rev() {
            dh = b.backward(p, g, c, &dh.view());
        }
        dh
    }
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Central-difference check of a scalar function of the parameters.
    fn check_grads(
        layout: Arc<ParamLayout>,
        init: impl Fn(&mut Params<f64>),
        loss: impl Fn(&Params<f64>, Option<&mut Params<f64>>) -> f64,
    ) {
        let mut p = Params::zeros(Arc::clone(&layout));
        init(&mut p);
        let mut g = Params::zeros(layout);
        loss(&p, Some(&mut g));
        let h = 1e-6;
        for i in 0..p.data().len() {
            let orig = p.data()[i];
            p.data_mut()[i] = orig + h;
            let up = loss(&p, None);
            p.data_mut()[i] = orig - h;
            let down = loss(&p, None);
            p.data_mut()[i] = orig;
            let fd = (up - down) / (2.0 * h);
            let an = g.data()[i];
            let tol = 1e-5 * fd.abs().max(an.abs()) + 1e-8;
            assert!((fd - an).abs() < tol, "param {i}: analytic {an} vs fd {fd}");
        }
    }

    fn input(t: usize, d: usize, seed: u64) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_fn((t, d), |_| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn layer_norm_gradients() {
        let mut layout = ParamLayout::new();
        let ln = LayerNorm::new(&mut layout, "ln", 5);
        let x = input(3, 5, 1);
        let target = input(3, 5, 2);
        check_grads(
            Arc::new(layout),
            |p| {
                let mut rng = ChaCha8Rng::seed_from_u64(3);
                p.init_normal(ln.gamma, 1.0, &mut rng);
                p.init_normal(ln.beta, 1.0, &mut rng);
            },
            |p, g| {
                let (y, cache) = ln.forward(p, &x.view());
                if let Some(g) = g {
                    let dy = mse_grad(&y.view(), &target.view());
                    ln.backward(p, g, &cache, &dy.view());
                }
                mse(&y.view(), &target.view())
            },
        );
    }

    #[test]
    fn block_gradients_including_input() {
        let mut layout = ParamLayout::new();
        let block = Block::new(&mut layout, "b", 6, 2, 8);
        let x = input(4, 6, 5);
        let target = input(4, 6, 6);
        let layout = Arc::new(layout);
        let mut p = Params::zeros(Arc::clone(&layout));
        block.init(&mut p, 1.0, &mut ChaCha8Rng::seed_from_u64(7));
        // input gradient via finite differences on x
        let mut g = Params::zeros(Arc::clone(&layout));
        let (y, cache) = block.forward(&p, &x.view());
        let dy = mse_grad(&y.view(), &target.view());
        let dx = block.backward(&p, &mut g, &cache, &dy.view());
        let h = 1e-6;
        for idx in [(0, 0), (1, 3), (3, 5)] {
            let mut xp = x.clone();
            xp[idx] += h;
            let mut xm = x.clone();
            xm[idx] -= h;
            let up = mse(&block.forward(&p, &xp.view()).0.view(), &target.view());
            let down = mse(&block.forward(&p, &xm.view()).0.view(), &target.view());
            let fd = (up - down) / (2.0 * h);
            assert!((fd - dx[idx]).abs() < 1e-7, "{fd} vs {}", dx[idx]);
        }
        check_grads(
            layout,
            |q| block.init(q, 1.0, &mut ChaCha8Rng::seed_from_u64(7)),
            |q, g| {
                let (y, cache) = block.forward(q, &x.view());
                if let Some(g) = g {
                    let dy = mse_grad(&y.view(), &target.view());
                    block.backward(q, g, &cache, &dy.view());
                }
                mse(&y.view(), &target.view())
            },
        );
    }

    #[test]
    fn inference_forward_matches_training_forward() {
        let mut layout = ParamLayout::new();
        let bb = Backbone::new(&mut layout, 8, 2, 2, 16, 3, true);
        let mut p = Params::<f32>::zeros(Arc::new(layout));
        bb.init(&mut p, &mut ChaCha8Rng::seed_from_u64(1));
        let x = input(5, 8, 9).mapv(|v| v as f32);
        let (a, _) = bb.forward(&p, x.clone());
        let b = bb.forward_inference(&p, x);
        assert_eq!(a, b);
    }

    #[test]
    fn sinusoidal_embedding_shape() {
        let e: Array1<f64> = sinusoidal_embedding(0.0, 6);
        assert_eq!(e.to_vec(), vec![0.0, 0.0, 0.0, 1.0, 1.0, 1.0]);
        let odd: Array1<f32> = sinusoidal_embedding(3.0, 5);
        assert_eq!(odd[4], 0.0);
    }
}
