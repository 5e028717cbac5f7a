//! The conditional sequence denoiser `x̂_θ(x_n, n, c)` and the two regression
//! baselines (per-frame MLP, sequence transformer).
//!
//! The denoiser turns every frame into one token: the noisy motor frame and
//! the blendshape frame are concatenated and projected to `d_model`, then a
//! learned positional embedding and the noise-level embedding are added. A
//! stack of full self-attention blocks mixes the tokens and a linear head
//! predicts the clean motor frame in diffusion space.

use std::sync::Arc;

use ndarray::{concatenate, s, Array1, Array2, ArrayView2, Axis, Zip};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffusion::X0Predictor;
use crate::error::{check_dim, Error, Result};
use crate::face::{BlendshapeFrame, BlendshapeSequence, MotorFrame, MotorSequence};
use crate::nn::{
    mse, mse_grad, sigmoid, silu, silu_grad, sinusoidal_embedding, Backbone, BackboneCache,
    Linear, ParamId, ParamLayout, Params, Scalar,
};

/// Shapes and hyperparameters shared by the three model families.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub dof: usize,
    pub blendshape_dim: usize,
    pub seq_len: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub mlp_hidden: usize,
    /// Layer norm between the last block and the output head.
    #[serde(default)]
    pub final_norm: bool,
}

impl ModelConfig {
    /// Full-size defaults.
    pub fn new(dof: usize, blendshape_dim: usize) -> Self {
        Self {
            dof,
            blendshape_dim,
            seq_len: crate::face::DEFAULT_SEQ_LEN,
            d_model: 128,
            n_layers: 4,
            n_heads: 4,
            d_ff: 256,
            mlp_hidden: 256,
            final_norm: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("dof", self.dof),
            ("blendshape_dim", self.blendshape_dim),
            ("seq_len", self.seq_len),
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("d_ff", self.d_ff),
            ("mlp_hidden", self.mlp_hidden),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::InvalidConfig(format!("{name} must be positive")));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::InvalidConfig(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        Ok(())
    }
}

fn check_params<S: Scalar>(p: &Params<S>, layout: &Arc<ParamLayout>) -> Result<()> {
    if p.layout().as_ref() != layout.as_ref() {
        return Err(Error::Model("parameter layout does not match the model".into()));
    }
    if !p.is_finite() {
        return Err(Error::Model("non-finite parameters".into()));
    }
    Ok(())
}

fn to_scalar<S: Scalar>(a: &Array2<f32>) -> Array2<S> {
    a.mapv(S::from_single)
}

/// Diffusion-transformer denoiser predicting the clean motor sequence.
#[derive(Debug, Clone)]
pub struct Denoiser {
    cfg: ModelConfig,
    layout: Arc<ParamLayout>,
    input: Linear,
    pos: ParamId,
    time1: Linear,
    time2: Linear,
    backbone: Backbone,
}

#[derive(Debug, Clone)]
pub struct DenoiserCache<S> {
    tokens_in: Array2<S>,
    time_sin: Array2<S>,
    time_pre: Array2<S>,
    time_act: Array2<S>,
    backbone: BackboneCache<S>,
}

impl Denoiser {
    pub fn new(cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.d_model;
        let mut layout = ParamLayout::new();
        let input = Linear::new(&mut layout, "input", cfg.dof + cfg.blendshape_dim, d);
        let pos = layout.add("pos_embedding", &[cfg.seq_len, d]);
        let time1 = Linear::new(&mut layout, "time.fc1", d, d);
        let time2 = Linear::new(&mut layout, "time.fc2", d, d);
        let backbone = Backbone::new(
            &mut layout,
            d,
            cfg.n_layers,
            cfg.n_heads,
            cfg.d_ff,
            cfg.dof,
            cfg.final_norm,
        );
        Ok(Self {
            cfg,
            layout: Arc::new(layout),
            input,
            pos,
            time1,
            time2,
            backbone,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn layout(&self) -> &Arc<ParamLayout> {
        &self.layout
    }

    pub fn init<S: Scalar, R: Rng + ?Sized>(&self, rng: &mut R) -> Params<S> {
        let mut p = Params::zeros(Arc::clone(&self.layout));
        self.input.init(&mut p, 1.0, rng);
        p.init_normal(self.pos, 0.1, rng);
        self.time1.init(&mut p, 1.0, rng);
        self.time2.init(&mut p, 1.0, rng);
        self.backbone.init(&mut p, rng);
        p
    }

    fn check_shapes(&self, t: usize, xn_dof: usize, c_dim: usize, n: usize) -> Result<()> {
        check_dim("denoiser motor channels", self.cfg.dof, xn_dof)?;
        check_dim("denoiser blendshape channels", self.cfg.blendshape_dim, c_dim)?;
        if t == 0 || t > self.cfg.seq_len {
            return Err(Error::Model(format!(
                "sequence length {t} outside 1..={}",
                self.cfg.seq_len
            )));
        }
        if n == 0 {
            return Err(Error::Model("noise level must be >= 1".into()));
        }
        Ok(())
    }

    fn embed<S: Scalar>(
        &self,
        p: &Params<S>,
        xn: &ArrayView2<S>,
        n: usize,
        c: &ArrayView2<S>,
    ) -> (Array2<S>, Array2<S>, Array2<S>, Array2<S>, Array2<S>) {
        let t = xn.nrows();
        let tokens_in = concatenate![Axis(1), *xn, *c];
        let mut h0 = self.input.forward(p, &tokens_in.view());
        h0 += &p.mat(self.pos).slice(s![..t, ..]);
        let time_sin = sinusoidal_embedding::<S>(n as f64, self.cfg.d_model).insert_axis(Axis(0));
        let time_pre = self.time1.forward(p, &time_sin.view());
        let time_act = time_pre.mapv(silu);
        let temb = self.time2.forward(p, &time_act.view());
        h0 += &temb.row(0);
        (h0, tokens_in, time_sin, time_pre, time_act)
    }

    /// Training forward pass; keeps activations for [`Denoiser::backward`].
    pub fn forward<S: Scalar>(
        &self,
        p: &Params<S>,
        xn: &ArrayView2<S>,
        n: usize,
        c: &ArrayView2<S>,
    ) -> (Array2<S>, DenoiserCache<S>) {
        let (h0, tokens_in, time_sin, time_pre, time_act) = self.embed(p, xn, n, c);
        let (out, backbone) = self.backbone.forward(p, h0);
        let cache = DenoiserCache {
            tokens_in,
            time_sin,
            time_pre,
            time_act,
            backbone,
        };
        (out, cache)
    }

    /// Accumulates `dL/dθ` into `g` given `dL/d(output)`.
    pub fn backward<S: Scalar>(
        &self,
        p: &Params<S>,
        g: &mut Params<S>,
        cache: &DenoiserCache<S>,
        dout: &ArrayView2<S>,
    ) {
        let dh0 = self.backbone.backward(p, g, &cache.backbone, dout);
        let t = dh0.nrows();
        g.mat_mut(self.pos)
            .slice_mut(s![..t, ..])
            .scaled_add(S::one(), &dh0);
        let demb = dh0.sum_axis(Axis(0)).insert_axis(Axis(0));
        let mut dact = self
            .time2
            .backward(p, g, &cache.time_act.view(), &demb.view(), true)
            .expect("dx");
        Zip::from(&mut dact)
            .and(&cache.time_pre)
            .for_each(|d, &x| *d *= silu_grad(x));
        self.time1
            .backward(p, g, &cache.time_sin.view(), &dact.view(), false);
        self.input
            .backward(p, g, &cache.tokens_in.view(), &dh0.view(), false);
    }

    /// MSE between the prediction and `x0`, accumulating gradients into `g`.
    pub fn loss_and_grad<S: Scalar>(
        &self,
        p: &Params<S>,
        g: &mut Params<S>,
        xn: &ArrayView2<S>,
        n: usize,
        c: &ArrayView2<S>,
        x0: &ArrayView2<S>,
        weight: S,
    ) -> S {
        let (out, cache) = self.forward(p, xn, n, c);
        let mut dout = mse_grad(&out.view(), x0);
        dout *= weight;
        self.backward(p, g, &cache, &dout.view());
        mse(&out.view(), x0)
    }

    /// Unchecked inference forward.
    pub fn forward_inference<S: Scalar>(
        &self,
        p: &Params<S>,
        xn: &ArrayView2<S>,
        n: usize,
        c: &ArrayView2<S>,
    ) -> Array2<S> {
        let (h0, ..) = self.embed(p, xn, n, c);
        self.backbone.forward_inference(p, h0)
    }

    /// Predicts the clean sequence `x̂_0` (diffusion space) from `x_n`.
    pub fn denoise_predict(
        &self,
        p: &Params<f32>,
        xn: &MotorSequence,
        n: usize,
        c: &BlendshapeSequence,
    ) -> Result<MotorSequence> {
        let out = self.predict_array(p, xn.data(), n, c)?;
        Ok(MotorSequence::noisy(out, 0))
    }

    fn predict_array(
        &self,
        p: &Params<f32>,
        xn: &Array2<f32>,
        n: usize,
        c: &BlendshapeSequence,
    ) -> Result<Array2<f32>> {
        check_params(p, &self.layout)?;
        if xn.nrows() != c.len() {
            return Err(Error::Model(format!(
                "motor length {} differs from blendshape length {}",
                xn.nrows(),
                c.len()
            )));
        }
        self.check_shapes(xn.nrows(), xn.ncols(), c.dim(), n)?;
        let out = self.forward_inference(p, &xn.view(), n, &c.data().view());
        if out.iter().any(|v| !v.is_finite()) {
            return Err(Error::Model("non-finite denoiser output".into()));
        }
        Ok(out)
    }

    /// Binds parameters so the model can drive the sampler.
    pub fn bind<'a>(&'a self, params: &'a Params<f32>) -> BoundDenoiser<'a> {
        BoundDenoiser {
            model: self,
            params,
        }
    }
}

/// A denoiser together with its parameters.
#[derive(Debug, Clone, Copy)]
pub struct BoundDenoiser<'a> {
    pub model: &'a Denoiser,
    pub params: &'a Params<f32>,
}

impl X0Predictor for BoundDenoiser<'_> {
    fn predict_x0(
        &self,
        xn: &Array2<f32>,
        n: usize,
        c: &BlendshapeSequence,
    ) -> Result<Array2<f32>> {
        self.model.predict_array(self.params, xn, n, c)
    }
}

/// Sequence regression baseline: the denoiser's backbone without the noisy
/// motor input or noise-level embedding, with a sigmoid-bounded head.
#[derive(Debug, Clone)]
pub struct TransformerBaseline {
    cfg: ModelConfig,
    layout: Arc<ParamLayout>,
    input: Linear,
    pos: ParamId,
    backbone: Backbone,
}

impl TransformerBaseline {
    pub fn new(cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut layout = ParamLayout::new();
        let input = Linear::new(&mut layout, "input", cfg.blendshape_dim, cfg.d_model);
        let pos = layout.add("pos_embedding", &[cfg.seq_len, cfg.d_model]);
        let backbone = Backbone::new(
            &mut layout,
            cfg.d_model,
            cfg.n_layers,
            cfg.n_heads,
            cfg.d_ff,
            cfg.dof,
            cfg.final_norm,
        );
        Ok(Self {
            cfg,
            layout: Arc::new(layout),
            input,
            pos,
            backbone,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn layout(&self) -> &Arc<ParamLayout> {
        &self.layout
    }

    pub fn init<S: Scalar, R: Rng + ?Sized>(&self, rng: &mut R) -> Params<S> {
        let mut p = Params::zeros(Arc::clone(&self.layout));
        self.input.init(&mut p, 1.0, rng);
        p.init_normal(self.pos, 0.1, rng);
        self.backbone.init(&mut p, rng);
        p
    }

    fn embed<S: Scalar>(&self, p: &Params<S>, c: &ArrayView2<S>) -> Array2<S> {
        let mut h0 = self.input.forward(p, c);
        h0 += &p.mat(self.pos).slice(s![..c.nrows(), ..]);
        h0
    }

    pub fn loss_and_grad<S: Scalar>(
        &self,
        p: &Params<S>,
        g: &mut Params<S>,
        c: &ArrayView2<S>,
        target: &ArrayView2<S>,
        weight: S,
    ) -> S {
        let (logits, cache) = self.backbone.forward(p, self.embed(p, c));
        let y = logits.mapv(sigmoid);
        let mut dy = mse_grad(&y.view(), target);
        dy *= weight;
        Zip::from(&mut dy)
            .and(&y)
            .for_each(|d, &v| *d *= v * (S::one() - v));
        let dh0 = self.backbone.backward(p, g, &cache, &dy.view());
        let t = c.nrows();
        g.mat_mut(self.pos)
            .slice_mut(s![..t, ..])
            .scaled_add(S::one(), &dh0);
        self.input.backward(p, g, c, &dh0.view(), false);
        mse(&y.view(), target)
    }

    /// Predicts a clean motor sequence for the whole conditioning sequence.
    pub fn transformer_predict(
        &self,
        p: &Params<f32>,
        c: &BlendshapeSequence,
    ) -> Result<MotorSequence> {
        check_params(p, &self.layout)?;
        check_dim("transformer blendshape channels", self.cfg.blendshape_dim, c.dim())?;
        if c.len() > self.cfg.seq_len {
            return Err(Error::Model(format!(
                "sequence length {} exceeds {}",
                c.len(),
                self.cfg.seq_len
            )));
        }
        let out = self
            .backbone
            .forward_inference(p, self.embed(p, &c.data().view()))
            .mapv(sigmoid);
        MotorSequence::clean(out).map_err(|e| Error::Model(e.to_string()))
    }
}

/// Per-frame feed-forward baseline `blendshape -> hidden -> dof`.
#[derive(Debug, Clone)]
pub struct MlpBaseline {
    cfg: ModelConfig,
    layout: Arc<ParamLayout>,
    fc1: Linear,
    fc2: Linear,
}

impl MlpBaseline {
    pub fn new(cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut layout = ParamLayout::new();
        let fc1 = Linear::new(&mut layout, "fc1", cfg.blendshape_dim, cfg.mlp_hidden);
        let fc2 = Linear::new(&mut layout, "fc2", cfg.mlp_hidden, cfg.dof);
        Ok(Self {
            cfg,
            layout: Arc::new(layout),
            fc1,
            fc2,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn layout(&self) -> &Arc<ParamLayout> {
        &self.layout
    }

    pub fn init<S: Scalar, R: Rng + ?Sized>(&self, rng: &mut R) -> Params<S> {
        let mut p = Params::zeros(Arc::clone(&self.layout));
        self.fc1.init(&mut p, 1.0, rng);
        self.fc2.init(&mut p, 0.1, rng);
        p
    }

    fn forward_rows<S: Scalar>(&self, p: &Params<S>, c: &ArrayView2<S>) -> (Array2<S>, Array2<S>) {
        let pre = self.fc1.forward(p, c);
        let act = pre.mapv(silu);
        let y = self.fc2.forward(p, &act.view()).mapv(sigmoid);
        (pre, y)
    }

    /// Frames are independent rows; `c` may hold any number of them.
    pub fn loss_and_grad<S: Scalar>(
        &self,
        p: &Params<S>,
        g: &mut Params<S>,
        c: &ArrayView2<S>,
        target: &ArrayView2<S>,
        weight: S,
    ) -> S {
        let (pre, y) = self.forward_rows(p, c);
        let act = pre.mapv(silu);
        let mut dy = mse_grad(&y.view(), target);
        dy *= weight;
        Zip::from(&mut dy)
            .and(&y)
            .for_each(|d, &v| *d *= v * (S::one() - v));
        let mut dact = self
            .fc2
            .backward(p, g, &act.view(), &dy.view(), true)
            .expect("dx");
        Zip::from(&mut dact)
            .and(&pre)
            .for_each(|d, &x| *d *= silu_grad(x));
        self.fc1.backward(p, g, c, &dact.view(), false);
        mse(&y.view(), target)
    }

    pub fn mlp_predict(&self, p: &Params<f32>, c: &BlendshapeFrame) -> Result<MotorFrame> {
        check_params(p, &self.layout)?;
        check_dim("mlp blendshape channels", self.cfg.blendshape_dim, c.dim())?;
        let row = Array1::from(c.values().to_vec()).insert_axis(Axis(0));
        let (_, y) = self.forward_rows(p, &row.view());
        MotorFrame::new(y.row(0).to_vec()).map_err(|e| Error::Model(e.to_string()))
    }

    /// Applies the per-frame model to every frame of a sequence.
    pub fn predict_sequence(
        &self,
        p: &Params<f32>,
        c: &BlendshapeSequence,
    ) -> Result<MotorSequence> {
        check_params(p, &self.layout)?;
        check_dim("mlp blendshape channels", self.cfg.blendshape_dim, c.dim())?;
        let (_, y) = self.forward_rows(p, &c.data().view());
        MotorSequence::clean(y).map_err(|e| Error::Model(e.to_string()))
    }
}

/// Which model family a parameter set belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Exface,
    Transformer,
    Mlp,
}

impl ModelKind {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Exface => "exface",
            Self::Transformer => "transformer",
            Self::Mlp => "mlp",
        }
    }
}

/// Any of the three trainable model families.
#[derive(Debug, Clone)]
pub enum Model {
    Exface(Denoiser),
    Transformer(TransformerBaseline),
    Mlp(MlpBaseline),
}

impl Model {
    pub fn new(kind: ModelKind, cfg: ModelConfig) -> Result<Self> {
        Ok(match kind {
            ModelKind::Exface => Self::Exface(Denoiser::new(cfg)?),
            ModelKind::Transformer => Self::Transformer(TransformerBaseline::new(cfg)?),
            ModelKind::Mlp => Self::Mlp(MlpBaseline::new(cfg)?),
        })
    }

    pub fn kind(&self) -> ModelKind {
        match self {
            Self::Exface(_) => ModelKind::Exface,
            Self::Transformer(_) => ModelKind::Transformer,
            Self::Mlp(_) => ModelKind::Mlp,
        }
    }

    pub fn config(&self) -> &ModelConfig {
        match self {
            Self::Exface(m) => m.config(),
            Self::Transformer(m) => m.config(),
            Self::Mlp(m) => m.config(),
        }
    }

    pub fn layout(&self) -> &Arc<ParamLayout> {
        match self {
            Self::Exface(m) => m.layout(),
            Self::Transformer(m) => m.layout(),
            Self::Mlp(m) => m.layout(),
        }
    }

    pub fn init<S: Scalar, R: Rng + ?Sized>(&self, rng: &mut R) -> Params<S> {
        match self {
            Self::Exface(m) => m.init(rng),
            Self::Transformer(m) => m.init(rng),
            Self::Mlp(m) => m.init(rng),
        }
    }
}

/// Converts an `f32` array into the model scalar type.
pub fn cast_array<S: Scalar>(a: &Array2<f32>) -> Array2<S> {
    to_scalar(a)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny() -> ModelConfig {
        ModelConfig {
            dof: 3,
            blendshape_dim: 5,
            seq_len: 4,
            d_model: 8,
            n_layers: 2,
            n_heads: 2,
            d_ff: 16,
            mlp_hidden: 6,
            final_norm: false,
        }
    }

    fn inputs(cfg: &ModelConfig, seed: u64) -> (MotorSequence, BlendshapeSequence) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let xn = Array2::from_shape_fn((cfg.seq_len, cfg.dof), |_| rng.gen_range(-1.5..1.5));
        let c = Array2::from_shape_fn((cfg.seq_len, cfg.blendshape_dim), |_| rng.gen_range(0.0..1.0));
        (
            MotorSequence::noisy(xn, 3),
            BlendshapeSequence::new(c, 60.0).unwrap(),
        )
    }

    #[test]
    fn output_shape_and_finiteness() {
        let cfg = ModelConfig::new(33, 55);
        let model = Denoiser::new(cfg).unwrap();
        let p = model.init(&mut ChaCha8Rng::seed_from_u64(0));
        let (xn, c) = inputs(&cfg, 1);
        let out = model.denoise_predict(&p, &xn, 7, &c).unwrap();
        assert_eq!(out.data().dim(), (120, 33));
        assert!(out.data().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn zero_network_outputs_head_bias() {
        let cfg = tiny();
        let model = Denoiser::new(cfg).unwrap();
        let mut p = Params::<f32>::zeros(Arc::clone(model.layout()));
        let bias = model.layout().find("head.bias").unwrap();
        p.slice_mut(bias).copy_from_slice(&[0.25, -1.0, 3.0]);
        let (xn, c) = inputs(&cfg, 2);
        let out = model.denoise_predict(&p, &xn, 2, &c).unwrap();
        for row in out.data().rows() {
            assert_eq!(row.to_vec(), vec![0.25, -1.0, 3.0]);
        }
    }

    #[test]
    fn rejects_bad_inputs() {
        let cfg = tiny();
        let model = Denoiser::new(cfg).unwrap();
        let mut p = model.init::<f32, _>(&mut ChaCha8Rng::seed_from_u64(0));
        let (xn, c) = inputs(&cfg, 3);
        let short = c.window(0, 3);
        assert!(model.denoise_predict(&p, &xn, 1, &short).is_err());
        p.data_mut()[0] = f32::NAN;
        assert!(matches!(
            model.denoise_predict(&p, &xn, 1, &c),
            Err(Error::Model(_))
        ));
    }

    #[test]
    fn frame_order_matters() {
        let cfg = tiny();
        let model = Denoiser::new(cfg).unwrap();
        let p = model.init(&mut ChaCha8Rng::seed_from_u64(4));
        let (xn, c) = inputs(&cfg, 5);
        let out = model.denoise_predict(&p, &xn, 2, &c).unwrap();
        let mut rev = c.data().clone();
        rev.invert_axis(Axis(0));
        let mut xrev = xn.data().clone();
        xrev.invert_axis(Axis(0));
        let out_rev = model
            .denoise_predict(
                &p,
                &MotorSequence::noisy(xrev, 3),
                2,
                &BlendshapeSequence::new(rev, 60.0).unwrap(),
            )
            .unwrap();
        let mut back = out_rev.into_data();
        back.invert_axis(Axis(0));
        let diff = (&back - out.data()).mapv(f32::abs).sum();
        assert!(diff > 1e-3, "positional information ignored");
    }

    #[test]
    fn baselines_zero_params_give_half() {
        let cfg = tiny();
        let mlp = MlpBaseline::new(cfg).unwrap();
        let p = Params::zeros(Arc::clone(mlp.layout()));
        let frame = BlendshapeFrame::new(vec![0.3; 5]).unwrap();
        assert_eq!(mlp.mlp_predict(&p, &frame).unwrap().values(), &[0.5; 3]);
        let tr = TransformerBaseline::new(cfg).unwrap();
        let p = Params::zeros(Arc::clone(tr.layout()));
        let (_, c) = inputs(&cfg, 6);
        let out = tr.transformer_predict(&p, &c).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn baseline_outputs_bounded() {
        let cfg = tiny();
        let mlp = MlpBaseline::new(cfg).unwrap();
        let mut p: Params<f32> = mlp.init(&mut ChaCha8Rng::seed_from_u64(1));
        p.scale(40.0);
        let (_, c) = inputs(&cfg, 7);
        let out = mlp.predict_sequence(&p, &c).unwrap();
        assert!(out.data().iter().all(|v| (0.0..=1.0).contains(v)));
        let tr = TransformerBaseline::new(cfg).unwrap();
        let mut p: Params<f32> = tr.init(&mut ChaCha8Rng::seed_from_u64(1));
        p.scale(10.0);
        let out = tr.transformer_predict(&p, &c).unwrap();
        assert!(out.data().iter().all(|v| (0.0..=1.0).contains(v)));
        assert!(mlp
            .mlp_predict(&Params::zeros(Arc::clone(mlp.layout())), &BlendshapeFrame::zeros(4))
            .is_err());
    }

    fn fd_check<F>(layout: &Arc<ParamLayout>, mut p: Params<f64>, loss: F)
    where
        F: Fn(&Params<f64>, Option<&mut Params<f64>>) -> f64,
    {
        let mut g = Params::zeros(Arc::clone(layout));
        loss(&p, Some(&mut g));
        let h = 1e-5;
        let mut worst: f64 = 0.0;
        for i in 0..p.data().len() {
            let orig = p.data()[i];
            p.data_mut()[i] = orig + h;
            let up = loss(&p, None);
            p.data_mut()[i] = orig - h;
            let down = loss(&p, None);
            p.data_mut()[i] = orig;
            let fd = (up - down) / (2.0 * h);
            let an = g.data()[i];
            let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-6);
            worst = worst.max(rel);
        }
        assert!(worst < 1e-3, "worst relative error {worst}");
    }

    #[test]
    fn baseline_gradients_match_finite_differences() {
        let cfg = tiny();
        let (_, c) = inputs(&cfg, 8);
        let c = cast_array::<f64>(c.data());
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let target = Array2::from_shape_fn((cfg.seq_len, cfg.dof), |_| rng.gen_range(0.0..1.0));

        let mlp = MlpBaseline::new(cfg).unwrap();
        fd_check(mlp.layout(), mlp.init(&mut rng), |p, g| match g {
            Some(g) => mlp.loss_and_grad(p, g, &c.view(), &target.view(), 1.0),
            None => mlp.loss_and_grad(p, &mut Params::zeros(Arc::clone(mlp.layout())), &c.view(), &target.view(), 1.0),
        });
        let tr = TransformerBaseline::new(cfg).unwrap();
        fd_check(tr.layout(), tr.init(&mut rng), |p, g| match g {
            Some(g) => tr.loss_and_grad(p, g, &c.view(), &target.view(), 1.0),
            None => tr.loss_and_grad(p, &mut Params::zeros(Arc::clone(tr.layout())), &c.view(), &target.view(), 1.0),
        });
    }
}
