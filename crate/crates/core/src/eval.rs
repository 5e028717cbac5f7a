//! Distances, method comparison reports and bootstrap curves.

use std::fmt::Write as _;
use std::path::Path;

use ndarray::{s, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::denoiser::{Denoiser, MlpBaseline, TransformerBaseline};
use crate::diffusion::{sample, DiffusionSchedule, SamplerConfig};
use crate::error::{Error, Result};
use crate::face::{BlendshapeSequence, MotorSequence};
use crate::nn::Params;
use crate::plant::{gen_human_sequence, PlantModel, SequenceMode};

/// Default validation length in frames.
pub const VALIDATION_FRAMES: usize = 2000;

/// Mean squared difference over frames and channels.
pub fn motor_distance(pred: &MotorSequence, truth: &MotorSequence) -> Result<f64> {
    mse(pred.data(), truth.data(), "motor distance")
}

/// MSE between the plant's noise-free response to `pred_motor` and `target`.
pub fn blendshape_distance(
    pred_motor: &MotorSequence,
    target: &BlendshapeSequence,
    plant: &PlantModel,
) -> Result<f64> {
    let observed = plant.observe_sequence(pred_motor, None)?;
    mse(observed.data(), target.data(), "blendshape distance")
}

fn mse(a: &Array2<f32>, b: &Array2<f32>, what: &str) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::InvalidInput(format!(
            "{what}: shapes {:?} and {:?} differ",
            a.dim(),
            b.dim()
        )));
    }
    if a.is_empty() {
        return Err(Error::InvalidInput(format!("{what}: empty input")));
    }
    let sum: f64 = a
        .iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = f64::from(x) - f64::from(y);
            d * d
        })
        .sum();
    Ok(sum / a.len() as f64)
}

/// A reachable human-like sequence with its ground-truth motors.
#[derive(Debug, Clone)]
pub struct ValidationSet {
    pub blendshapes: BlendshapeSequence,
    pub motors: MotorSequence,
    pub seed: u64,
}

impl ValidationSet {
    pub fn generate(plant: &PlantModel, frames: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = gen_human_sequence(plant, frames, SequenceMode::Reachable, &mut rng)?;
        Ok(Self {
            blendshapes: g.blendshapes,
            motors: g.motors.expect("reachable mode yields motors"),
            seed,
        })
    }

    pub fn id(&self) -> String {
        format!("human-reachable-{}f-seed{}", self.blendshapes.len(), self.seed)
    }
}

/// A way of turning blendshapes into motor commands.
#[derive(Debug, Clone, Copy)]
pub enum Method<'a> {
    /// Uniform random motors, resampled every frame.
    Random { dof: usize, seed: u64 },
    Mlp {
        model: &'a MlpBaseline,
        params: &'a Params<f32>,
    },
    Transformer {
        model: &'a TransformerBaseline,
        params: &'a Params<f32>,
    },
    Exface {
        model: &'a Denoiser,
        params: &'a Params<f32>,
        sched: &'a DiffusionSchedule,
        sampler: SamplerConfig,
        seed: u64,
    },
}

impl Method<'_> {
    pub fn name(&self) -> &'static str {
        match self {
            Self::Random { .. } => "random",
            Self::Mlp { .. } => "mlp",
            Self::Transformer { .. } => "transformer",
            Self::Exface { .. } => "exface",
        }
    }
}

/// Splits a sequence into model windows of `window` frames: consecutive
/// non-overlapping chunks, the last one shifted back to end on the final frame
/// (or, for sequences shorter than a window, front-padded with the first
/// frame). Returns `(start, skip)` pairs: the window begins at `start` and its
/// first `skip` output frames are discarded.
fn windows(len: usize, window: usize) -> Vec<(isize, usize)> {
    if len <= window {
        return vec![(len as isize - window as isize, window - len)];
    }
    let mut out = Vec::new();
    let mut start = 0;
    while start + window <= len {
        out.push((start as isize, 0));
        start += window;
    }
    if start < len {
        let shifted = len - window;
        out.push((shifted as isize, start - shifted));
    }
    out
}

fn window_of(c: &BlendshapeSequence, start: isize, window: usize) -> BlendshapeSequence {
    if start >= 0 {
        return c.window(start as usize, window);
    }
    let pad = (-start) as usize;
    let data = Array2::from_shape_fn((window, c.dim()), |(i, j)| {
        c.data()[[i.saturating_sub(pad), j]]
    });
    BlendshapeSequence::new(data, c.frame_rate_hz).expect("values come from a valid sequence")
}

/// Retargets an arbitrarily long blendshape sequence.
pub fn retarget(method: &Method<'_>, c: &BlendshapeSequence) -> Result<MotorSequence> {
    match *method {
        Method::Random { dof, seed } => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            MotorSequence::clean(Array2::from_shape_simple_fn((c.len(), dof), || {
                rng.gen::<f32>()
            }))
        }
        Method::Mlp { model, params } => model.predict_sequence(params, c),
        Method::Transformer { model, params } => {
            let t = model.config().seq_len;
            chunked(c, t, |_, w| model.transformer_predict(params, w))
        }
        Method::Exface {
            model,
            params,
            sched,
            sampler,
            seed,
        } => {
            let t = model.config().seq_len;
            let dof = model.config().dof;
            let bound = model.bind(params);
            chunked(c, t, |k, w| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(k as u64);
                sample(&bound, w, dof, sched, &mut rng, sampler)
            })
        }
    }
}

fn chunked<F>(c: &BlendshapeSequence, window: usize, mut run: F) -> Result<MotorSequence>
where
    F: FnMut(usize, &BlendshapeSequence) -> Result<MotorSequence>,
{
    let mut parts = Vec::new();
    for (k, (start, skip)) in windows(c.len(), window).into_iter().enumerate() {
        let out = run(k, &window_of(c, start, window))?;
        let kept = out.data().slice(s![skip.., ..]).to_owned();
        parts.push(MotorSequence::clean(kept)?);
    }
    MotorSequence::concat(&parts)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub method: String,
    pub motor_distance: f64,
    pub blendshape_distance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportMetadata {
    pub plant_seed: u64,
    pub checkpoint_id: String,
    pub validation_set_id: String,
    pub frames: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub rows: Vec<ReportRow>,
    pub metadata: ReportMetadata,
}

/// Published motor / blendshape distances measured on a physical robot; shown
/// for context only, since the simulated plant has a different scale.
pub const REFERENCE_ROWS: [(&str, f64, f64); 4] = [
    ("Random", 0.1461, 0.0105),
    ("MLP", 0.0465, 0.0039),
    ("Transformer", 0.0383, 0.0029),
    ("ExFace", 0.0353, 0.0025),
];

impl EvalReport {
    pub fn row(&self, method: &str) -> Option<&ReportRow> {
        self.rows.iter().find(|r| r.method == method)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{:<12} {:>16} {:>20}", "method", "motor_distance", "blendshape_distance");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{:<12} {:>16.6} {:>20.6}",
                r.method, r.motor_distance, r.blendshape_distance
            );
        }
        let m = &self.metadata;
        let _ = writeln!(
            out,
            "\nvalidation: {} ({} frames), plant seed {}, checkpoint {}",
            m.validation_set_id, m.frames, m.plant_seed, m.checkpoint_id
        );
        out.push_str(
            "blendshape distance is measured by replaying predicted motors through the \
             simulated plant (noise off).\n",
        );
        out.push_str("reference values from a physical-robot evaluation (not comparable in scale):\n");
        for (name, md, bd) in REFERENCE_ROWS {
            let _ = writeln!(out, "  {name:<12} {md:>8.4} {bd:>8.4}");
        }
        out
    }
}

/// Scores each method on the validation set.
pub fn run_comparison(
    methods: &[Method<'_>],
    val: &ValidationSet,
    plant: &PlantModel,
    checkpoint_id: &str,
) -> Result<EvalReport> {
    if methods.is_empty() {
        return Err(Error::InvalidInput("no methods to compare".into()));
    }
    let rows = methods
        .iter()
        .map(|m| {
            let pred = retarget(m, &val.blendshapes)?;
            Ok(ReportRow {
                method: m.name().to_string(),
                motor_distance: motor_distance(&pred, &val.motors)?,
                blendshape_distance: blendshape_distance(&pred, &val.blendshapes, plant)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalReport {
        rows,
        metadata: ReportMetadata {
            plant_seed: plant.spec().seed,
            checkpoint_id: checkpoint_id.to_string(),
            validation_set_id: val.id(),
            frames: val.blendshapes.len(),
        },
    })
}

/// Per-iteration validation metrics of the bootstrap loop.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IterationMetrics {
    pub iteration: usize,
    pub frames_total: usize,
    pub motor_distance: f64,
    pub blendshape_distance: f64,
}

pub fn curve_csv(history: &[IterationMetrics]) -> String {
    let mut out = String::from("iteration,frames_total,motor_distance,blendshape_distance\n");
    for h in history {
        let _ = writeln!(
            out,
            "{},{},{},{}",
            h.iteration, h.frames_total, h.motor_distance, h.blendshape_distance
        );
    }
    out
}

pub fn write_curve_csv(path: impl AsRef<Path>, history: &[IterationMetrics]) -> Result<()> {
    std::fs::write(path, curve_csv(history))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::plant::PlantSpec;

    fn seq(rows: &[&[f32]]) -> MotorSequence {
        let d = rows[0].len();
        MotorSequence::clean(
            Array2::from_shape_vec((rows.len(), d), rows.concat()).unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn motor_distance_hand_values() {
        let a = seq(&[&[0.5, 0.5]]);
        assert_eq!(motor_distance(&a, &a).unwrap(), 0.0);
        assert_eq!(motor_distance(&a, &seq(&[&[0.0, 1.0]])).unwrap(), 0.25);
        assert!(motor_distance(&a, &seq(&[&[0.0, 1.0, 0.0]])).is_err());
    }

    #[test]
    fn uniform_pairs_average_one_sixth() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let n = 1_000_000;
        let a = MotorSequence::clean(Array2::from_shape_simple_fn((n, 1), || rng.gen())).unwrap();
        let b = MotorSequence::clean(Array2::from_shape_simple_fn((n, 1), || rng.gen())).unwrap();
        let d = motor_distance(&a, &b).unwrap();
        assert!((d - 1.0 / 6.0).abs() < 0.01 / 6.0, "{d}");
    }

    #[test]
    fn blendshape_distance_zero_for_true_motors_positive_for_random() {
        let plant = PlantModel::new(PlantSpec::new(4, 5, 9)).unwrap();
        let val = ValidationSet::generate(&plant, 300, 1).unwrap();
        assert!(blendshape_distance(&val.motors, &val.blendshapes, &plant).unwrap() < 1e-12);
        let rnd = retarget(&Method::Random { dof: 5, seed: 2 }, &val.blendshapes).unwrap();
        assert!(blendshape_distance(&rnd, &val.blendshapes, &plant).unwrap() > 0.0);
    }

    #[test]
    fn windows_cover_every_frame_once() {
        for (len, w) in [(2000, 120), (240, 120), (7, 120), (121, 120), (120, 120)] {
            let mut covered = Vec::new();
            for (start, skip) in windows(len, w) {
                for i in skip..w {
                    covered.push(start + i as isize);
                }
            }
            let expect: Vec<isize> = (0..len as isize).collect();
            assert_eq!(covered, expect, "len {len}");
        }
    }

    #[test]
    fn chunked_identity_reconstructs_the_input() {
        let data = Array2::from_shape_fn((250, 3), |(i, j)| ((i * 3 + j) % 97) as f32 / 97.0);
        let c = BlendshapeSequence::new(data.clone(), 60.0).unwrap();
        let out = chunked(&c, 120, |_, w| MotorSequence::clean(w.data().clone())).unwrap();
        assert_eq!(out.data(), &data);
        let short = BlendshapeSequence::new(data.slice(s![..5, ..]).to_owned(), 60.0).unwrap();
        let out = chunked(&short, 120, |_, w| {
            assert_eq!(w.len(), 120);
            MotorSequence::clean(w.data().clone())
        })
        .unwrap();
        assert_eq!(out.data(), &data.slice(s![..5, ..]));
    }

    #[test]
    fn report_is_deterministic_and_renders() {
        let plant = PlantModel::new(PlantSpec::new(4, 5, 9)).unwrap();
        let val = ValidationSet::generate(&plant, 200, 1).unwrap();
        let methods = [Method::Random { dof: 5, seed: 3 }];
        let a = run_comparison(&methods, &val, &plant, "none").unwrap();
        let b = run_comparison(&methods, &val, &plant, "none").unwrap();
        assert_eq!(a, b);
        let table = a.to_table();
        assert!(table.contains("random"));
        assert!(table.contains("0.1461"));
        let back: EvalReport = serde_json::from_str(&a.to_json().unwrap()).unwrap();
        assert_eq!(back, a);
        assert!(run_comparison(&[], &val, &plant, "none").is_err());
    }

    #[test]
    fn curve_csv_has_header_and_rows() {
        let h = [IterationMetrics {
            iteration: 0,
            frames_total: 72000,
            motor_distance: 0.5,
            blendshape_distance: 0.25,
        }];
        assert_eq!(
            curve_csv(&h),
            "iteration,frames_total,motor_distance,blendshape_distance\n0,72000,0.5,0.25\n"
        );
    }
}
