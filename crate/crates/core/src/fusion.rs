//! High-level fusion of the per-modality pooled vectors: addition,
//! concatenation, compact bilinear pooling (MCB) and dual multimodal residual
//! fusion (DMR).

use std::sync::Arc;

use rand::Rng;

use crate::error::{dim_err, Error, Result};
use crate::layers::{Activation, Bound, DenseLayer, ParamStore, PathTag};
use crate::rng::seeded;
use crate::tensor::{Tape, Var};

/// Smoothing constant of the signed square root applied after MCB.
pub const MCB_SQRT_EPS: f64 = 1e-6;
/// Floor inside the L2 norm applied after MCB.
pub const MCB_NORM_EPS: f64 = 1e-12;

/// Random count-sketch projection `R^n -> R^d`, fixed by its seed.
#[derive(Clone, Debug)]
pub struct CountSketch {
    pub out_dim: usize,
    pub hash: Arc<[usize]>,
    pub sign: Arc<[f64]>,
    pub seed: u64,
}

impl CountSketch {
    pub fn new(in_dim: usize, out_dim: usize, seed: u64) -> Result<Self> {
        if in_dim == 0 || out_dim == 0 {
            return Err(Error::Config(
                "count sketch needs non-zero dimensions".into(),
            ));
        }
        let mut rng = seeded(seed);
        let hash: Vec<usize> = (0..in_dim).map(|_| rng.random_range(0..out_dim)).collect();
        let sign: Vec<f64> = (0..in_dim)
            .map(|_| if rng.random::<bool>() { 1.0 } else { -1.0 })
            .collect();
        Ok(CountSketch {
            out_dim,
            hash: hash.into(),
            sign: sign.into(),
            seed,
        })
    }

    /// Sketch with explicit hash and sign tables.
    pub fn from_tables(out_dim: usize, hash: Vec<usize>, sign: Vec<f64>) -> Result<Self> {
        if hash.len() != sign.len() || hash.iter().any(|&h| h >= out_dim) {
            return dim_err("count sketch tables", &[hash.len(), out_dim], &[sign.len()]);
        }
        Ok(CountSketch {
            out_dim,
            hash: hash.into(),
            sign: sign.into(),
            seed: 0,
        })
    }

    pub fn in_dim(&self) -> usize {
        self.hash.len()
    }
}

pub fn fuse_add(tape: &mut Tape, audio: Var, visual: Var) -> Result<Var> {
    tape.add(audio, visual)
}

/// `[visual, audio]` along the last axis.
pub fn fuse_concat(tape: &mut Tape, visual: Var, audio: Var) -> Result<Var> {
    let rank = tape.dims(visual).len();
    if rank == 0 {
        return dim_err("fuse_concat", &[], tape.dims(audio));
    }
    tape.concat(&[visual, audio], rank - 1)
}

pub fn count_sketch_project(tape: &mut Tape, cs: &CountSketch, x: Var) -> Result<Var> {
    tape.count_sketch(x, cs.hash.clone(), cs.sign.clone(), cs.out_dim)
}

/// Compact bilinear pooling: the circular convolution of the two sketches,
/// equal to the count sketch of the outer product `visual (x) audio`.
pub fn fuse_mcb(
    tape: &mut Tape,
    cs_audio: &CountSketch,
    cs_visual: &CountSketch,
    audio: Var,
    visual: Var,
) -> Result<Var> {
    if cs_audio.out_dim != cs_visual.out_dim {
        return Err(Error::Config(format!(
            "MCB sketches disagree on output width: {} vs {}",
            cs_audio.out_dim, cs_visual.out_dim
        )));
    }
    let sv = count_sketch_project(tape, cs_visual, visual)?;
    let sa = count_sketch_project(tape, cs_audio, audio)?;
    tape.circular_conv(sv, sa)
}

/// Signed square root followed by L2 normalization, applied to the MCB output.
pub fn mcb_normalize(tape: &mut Tape, x: Var) -> Result<Var> {
    let s = tape.signed_sqrt(x, MCB_SQRT_EPS);
    tape.l2_normalize(s, MCB_NORM_EPS)
}

/// Residual merge layers for DMR, one per modality, each `[2D -> D]`.
#[derive(Clone, Debug)]
pub struct DmrBlock {
    pub merge_audio: DenseLayer,
    pub merge_visual: DenseLayer,
}

impl DmrBlock {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Result<Self> {
        Ok(DmrBlock {
            merge_audio: DenseLayer::new(
                store,
                &format!("{name}.merge_audio"),
                2 * dim,
                dim,
                Activation::Identity,
                PathTag::Shared,
            )?,
            merge_visual: DenseLayer::new(
                store,
                &format!("{name}.merge_visual"),
                2 * dim,
                dim,
                Activation::Identity,
                PathTag::Shared,
            )?,
        })
    }
}

/// `a' = tanh(a + merge_a([a, v]))`, `v' = tanh(v + merge_v([a, v]))`,
/// output `(a' + v') / 2`.
pub fn fuse_dmr(
    tape: &mut Tape,
    p: &Bound,
    dmr: &DmrBlock,
    audio: Var,
    visual: Var,
) -> Result<Var> {
    if tape.dims(audio) != tape.dims(visual) {
        return dim_err("fuse_dmr", tape.dims(audio), tape.dims(visual));
    }
    let rank = tape.dims(audio).len();
    let joint = tape.concat(&[audio, visual], rank - 1)?;
    let ma = dmr.merge_audio.forward(tape, p, joint)?;
    let mv = dmr.merge_visual.forward(tape, p, joint)?;
    let a = tape.add(audio, ma)?;
    let a = tape.tanh(a);
    let v = tape.add(visual, mv)?;
    let v = tape.tanh(v);
    let s = tape.add(a, v)?;
    Ok(tape.scale(s, 0.5))
}
