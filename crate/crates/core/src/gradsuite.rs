//! Finite-difference checks of every differentiable op and of the full
//! forward + cross-entropy for every (attention, fusion, FiLM) combination.

use std::fmt::Write as _;
use std::time::{Duration, Instant};

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::fusion::CountSketch;
use crate::layers::{Bound, Mode};
use crate::model::{AttentionKind, BatchInput, FilmPlacement, FusionKind, MafConfig, MafNet};
use crate::rng::seeded;
use crate::tensor::{grad_check, GradCheckReport, Tape, Tensor, Var};

pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;

#[derive(Clone, Debug)]
pub struct CaseResult {
    pub name: String,
    pub max_rel_error: f64,
    pub coordinates: usize,
    pub passed: bool,
}

impl CaseResult {
    fn from_report(name: String, r: &GradCheckReport) -> Self {
        CaseResult {
            name,
            max_rel_error: r.max_rel_error,
            coordinates: r.coordinates,
            passed: r.passed,
        }
    }
}

#[derive(Clone, Debug)]
pub struct SuiteReport {
    pub cases: Vec<CaseResult>,
    pub elapsed: Duration,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.cases.iter().all(|c| c.passed)
    }

    pub fn worst(&self) -> Option<&CaseResult> {
        self.cases
            .iter()
            .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("case,max_rel_error,coordinates,passed\n");
        for c in &self.cases {
            let _ = writeln!(
                s,
                "{},{:e},{},{}",
                c.name, c.max_rel_error, c.coordinates, c.passed
            );
        }
        s
    }
}

fn uniform(rng: &mut ChaCha8Rng, dims: &[usize]) -> Tensor {
    let n = dims.iter().product();
    Tensor::new(
        dims.to_vec(),
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(),
    )
    .unwrap()
}

/// Values bounded away from zero, for ops with a kink there.
fn away_from_zero(rng: &mut ChaCha8Rng, dims: &[usize]) -> Tensor {
    uniform(rng, dims).map(|x| x.signum() * (0.1 + x.abs()))
}

/// Reduces any output to a scalar with fixed, non-uniform weights so every
/// output coordinate contributes a distinct amount.
fn project(tape: &mut Tape, y: Var) -> Result<Var> {
    let dims = tape.dims(y).to_vec();
    let n: usize = dims.iter().product();
    let w = Tensor::new(
        dims,
        (0..n).map(|i| (0.618 * i as f64 + 0.3).sin()).collect(),
    )?;
    let w = tape.constant(w);
    let p = tape.mul(y, w)?;
    Ok(tape.sum(p))
}

type OpFn = Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var>>;

fn op_cases(rng: &mut ChaCha8Rng) -> Vec<(&'static str, OpFn, Vec<Tensor>)> {
    let sketch = CountSketch::new(5, 4, rng.random()).unwrap();
    let mut keep = vec![true; 2 * 3 * 4];
    keep[1] = false;
    keep[6] = false;
    keep[7] = false;
    for k in &mut keep[12..16] {
        *k = false;
    }
    vec![
        (
            "matmul",
            Box::new(|t: &mut Tape, v: &[Var]| {
                let y = t.matmul(v[0], v[1])?;
                project(t, y)
            }) as OpFn,
            vec![uniform(rng, &[3, 4]), uniform(rng, &[4, 2])],
        ),
        (
            "add",
            Box::new(|t: &mut Tape, v: &[Var]| {
                let y = t.add(v[0], v[1])?;
                project(t, y)
            }),
            vec![uniform(rng, &[2, 3]), uniform(rng, &[2, 3])],
        ),
        (
            "sub",
            Box::new(|t: &mut Tape, v: &[Var]| {
                let y = t.sub(v[0], v[1])?;
                project(t, y)
            }),
            vec![uniform(rng, &[2, 3]), uniform(rng, &[2, 3])],
        ),
        (
            "mul",
            Box::new(|t: &mut Tape, v: &[Var]| {
                let y = t.mul(v[0], v[1])?;
                project(t, y)
            }),
            vec![uniform(rng, &[2, 3]), uniform(rng, &[2, 3])],
        ),
        (
            "scale",
            Box::new(|t: &mut Tape, v: &[Var]| {
                let y = t.scale(v[0], -1.7);
                project(t, y)
            }),
            vec![uniform(rng, &[5])],
        ),
        (
            "add_bias",
            Box::new(|t: &mut Tape, v: &[Var]| {
                let y = t.add_bias(v[0], v[1])?;
                project(t, y)
            }),
            vec![uniform(rng, &[2, 3, 4]), uniform(rng, &[4])],
        ),
        (
            "relu",
            Box::new(|t: &mut Tape, v: &[Var]| {
                let y = t.relu(v[0]);
                project(t, y)
            }),
            vec![away_from_zero(rng, &[3, 4])],
        ),
        (
            "tanh",
            Box::new(|t: &mut Tape, v: &[Var]| {
                let y = t.tanh(v[0]);
                project(t, y)
            }),
            vec![uniform(rng, &[3, 4])],
        ),
        (
            "signed_sqrt",
            Box::new(|t: &mut Tape, v: &[Var]| {
                let y = t.signed_sqrt(v[0], 1e-6);
                project(t, y)
            }),
            vec![away_from_zero(rng, &[2, 5])],
        ),
        (
            "l2_normalize",
            Box::new(|t: &mut Tape, v: &[Var]| {
                let y = t.l2_normalize(v[0], 1e-12)?;
                project(t, y)
            }),
            vec![uniform(rng, &[3, 5])],
        ),
        (
            "sum",
            Box::new(|t: &mut Tape, v: &[Var]| {
                let y = t.tanh(v[0]);
                Ok(t.sum(y))
            }),
            vec![uniform(rng, &[2, 3])],
        ),
        (
            "mean",
            Box::new(|t: &mut Tape, v: &[Var]| {
                let y = t.tanh(v[0]);
                Ok(t.mean(y))
            }),
            vec![uniform(rng, &[2, 3])],
        ),
        (
            "softmax_last_axis",
            Box::new(|t: &mut Tape, v: &[Var]| {
                let y = t.softmax(v[0], &[2], None)?;
                project(t, y)
            }),
            vec![uniform(rng, &[2, 3, 4])],
        ),
        (
            "softmax_joint_axes",
            Box::new(|t: &mut Tape, v: &[Var]| {
                let y = t.softmax(v[0], &[1, 2], None)?;
                project(t, y)
            }),
            vec![uniform(rng, &[2, 3, 4])],
        ),
        (
            "softmax_masked",
            Box::new(move |t: &mut Tape, v: &[Var]| {
                let y = t.softmax(v[0], &[2], Some(&keep))?;
                project(t, y)
            }),
            vec![uniform(rng, &[2, 3, 4])],
        ),
        (
            "mean_pool_spatial",
            Box::new(|t: &mut Tape, v: &[Var]| {
                let y = t.mean_pool_spatial(v[0])?;
                project(t, y)
            }),
            vec![uniform(rng, &[2, 3, 2, 4])],
        ),
        (
            "weighted_sum",
            Box::new(|t: &mut Tape, v: &[Var]| {
                let y = t.weighted_sum(v[0], v[1])?;
                project(t, y)
            }),
            vec![uniform(rng, &[2, 3, 4]), uniform(rng, &[2, 3])],
        ),
        (
            "film",
            Box::new(|t: &mut Tape, v: &[Var]| {
                let y = t.film(v[0], v[1], v[2])?;
                project(t, y)
            }),
            vec![
                uniform(rng, &[2, 2, 2, 3]),
                uniform(rng, &[2, 3]),
                uniform(rng, &[2, 3]),
            ],
        ),
        (
            "batch_norm",
            Box::new(|t: &mut Tape, v: &[Var]| {
                let (y, _) = t.batch_norm(v[0], v[1], v[2], 1e-5, None)?;
                project(t, y)
            }),
            vec![
                uniform(rng, &[4, 3]),
                uniform(rng, &[3]),
                uniform(rng, &[3]),
            ],
        ),
        (
            "cross_entropy",
            Box::new(|t: &mut Tape, v: &[Var]| t.cross_entropy(v[0], &[0, 3, 1])),
            vec![uniform(rng, &[3, 4])],
        ),
        (
            "concat",
            Box::new(|t: &mut Tape, v: &[Var]| {
                let y = t.concat(&[v[0], v[1]], 1)?;
                project(t, y)
            }),
            vec![uniform(rng, &[2, 3]), uniform(rng, &[2, 2])],
        ),
        (
            "slice",
            Box::new(|t: &mut Tape, v: &[Var]| {
                let y = t.slice(v[0], 1, 1, 3)?;
                project(t, y)
            }),
            vec![uniform(rng, &[3, 5])],
        ),
        (
            "reshape",
            Box::new(|t: &mut Tape, v: &[Var]| {
                let y = t.reshape(v[0], vec![3, 2])?;
                let y = t.tanh(y);
                project(t, y)
            }),
            vec![uniform(rng, &[2, 3])],
        ),
        (
            "circular_conv",
            Box::new(|t: &mut Tape, v: &[Var]| {
                let y = t.circular_conv(v[0], v[1])?;
                project(t, y)
            }),
            vec![uniform(rng, &[2, 6]), uniform(rng, &[2, 6])],
        ),
        (
            "count_sketch",
            Box::new(move |t: &mut Tape, v: &[Var]| {
                let y = t.count_sketch(v[0], sketch.hash.clone(), sketch.sign.clone(), 4)?;
                project(t, y)
            }),
            vec![uniform(rng, &[2, 5])],
        ),
    ]
}

/// Op-level checks on inputs drawn from `seed`.
pub fn run_op_checks(seed: u64) -> Result<Vec<CaseResult>> {
    let mut rng = seeded(seed);
    op_cases(&mut rng)
        .into_iter()
        .map(|(name, f, inputs)| {
            let r = grad_check(f, &inputs, STEP, TOLERANCE)?;
            Ok(CaseResult::from_report(format!("op/{name}/seed{seed}"), &r))
        })
        .collect()
}

/// Small network used for model-level checks.
pub fn toy_config(attention: AttentionKind, fusion: FusionKind, film: FilmPlacement) -> MafConfig {
    MafConfig {
        max_clips: 3,
        visual_shape: [2, 2, 3],
        audio_shape: [2, 1, 2],
        hidden: 4,
        residual_channels: 4,
        num_classes: 3,
        attention,
        fusion,
        film,
        mask_padding: true,
        mcb_dim: 6,
        seed: 11,
        ..MafConfig::default()
    }
}

/// A padded toy batch of three videos with 3, 2 and 1 real clips.
pub fn toy_batch(config: &MafConfig, seed: u64) -> Result<(BatchInput, Vec<usize>)> {
    let mut rng = seeded(seed);
    let b = 3;
    let t_actual = vec![3, 2, 1];
    let t = config.max_clips;
    let mut maps = Vec::new();
    for [h, w, d] in [config.visual_shape, config.audio_shape] {
        let mut x = uniform(&mut rng, &[b, t, h, w, d]);
        let clip = h * w * d;
        for (bi, &ta) in t_actual.iter().enumerate() {
            for v in &mut x.data_mut()[(bi * t + ta) * clip..(bi + 1) * t * clip] {
                *v = 0.0;
            }
        }
        maps.push(x);
    }
    let audio = maps.pop().unwrap();
    let visual = maps.pop().unwrap();
    Ok((
        BatchInput {
            visual,
            audio,
            t_actual,
        },
        vec![0, 2, 1],
    ))
}

/// Checks d(cross-entropy)/d(every parameter) of the train-mode forward.
///
/// Parameters are jittered away from their initial values first: zero biases
/// meeting zero-padded clips put ReLU inputs exactly on the kink, where
/// central differences are meaningless.
pub fn check_model(config: &MafConfig, seed: u64) -> Result<GradCheckReport> {
    let net = MafNet::new(config.clone())?;
    let (batch, labels) = toy_batch(config, seed)?;
    let mut rng = seeded(seed ^ 0x6a17);
    let params: Vec<Tensor> = net
        .store()
        .values()
        .into_iter()
        .map(|t| {
            let j = uniform(&mut rng, t.dims()).map(|x| 0.2 * x);
            Tensor::new(
                t.dims().to_vec(),
                t.data().iter().zip(j.data()).map(|(a, b)| a + b).collect(),
            )
        })
        .collect::<Result<_>>()?;
    grad_check(
        |tape, vars| {
            let p = Bound::from_vars(vars.to_vec());
            let out = net.forward_tape(tape, &p, &batch, Mode::Train)?;
            tape.cross_entropy(out.logits, &labels)
        },
        &params,
        STEP,
        TOLERANCE,
    )
}

/// Every (attention, fusion, FiLM placement) combination.
pub fn model_grid() -> Vec<MafConfig> {
    let mut out = Vec::new();
    for a in AttentionKind::ALL {
        for f in FusionKind::ALL {
            for film in FilmPlacement::ALL {
                out.push(toy_config(a, f, film));
            }
        }
    }
    out
}

/// Op checks over `op_seeds` seeds plus the full model grid.
pub fn run_suite(op_seeds: u64) -> Result<SuiteReport> {
    let start = Instant::now();
    let mut cases = Vec::new();
    for seed in 0..op_seeds {
        cases.extend(run_op_checks(seed)?);
    }
    for cfg in model_grid() {
        let r = check_model(&cfg, 7)?;
        let name = format!(
            "model/{}/{}/{}",
            cfg.attention.name(),
            cfg.fusion.name(),
            cfg.film.name()
        );
        cases.push(CaseResult::from_report(name, &r));
    }
    Ok(SuiteReport {
        cases,
        elapsed: start.elapsed(),
    })
}
