//! Temporal, modality, and joint modality-temporal attention.
//!
//! Every variant scores each input vector with the same small network,
//! `z = relu(w . x + b)`, and normalizes the scores with a softmax whose
//! domain defines the variant:
//!
//! | variant  | input          | softmax over | fused output                  |
//! |----------|----------------|--------------|-------------------------------|
//! | temporal | `[.., T, D]`   | T            | `sum_t a_t x_t`, `[.., D]`    |
//! | modality | `[.., K, D]`   | K            | `concat_k(p_k x_k)`, `[.., K*D]` |
//! | joint    | `[.., K, T, D]`| K and T      | `concat_k(sum_t l_tk x_tk)`   |
//!
//! Optional `keep` masks exclude cells (zero-padded clips) from the softmax.

use crate::error::{dim_err, Error, Result};
use crate::layers::{Activation, Bound, DenseLayer, ParamStore, PathTag};
use crate::tensor::{Tape, Tensor, Var};

/// Scalar scorer `relu(w . x + b)`.
#[derive(Clone, Debug)]
pub struct AttentionHead {
    pub scorer: DenseLayer,
}

impl AttentionHead {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Result<Self> {
        Ok(AttentionHead {
            scorer: DenseLayer::new(store, name, dim, 1, Activation::Relu, PathTag::Shared)?,
        })
    }

    pub fn dim(&self) -> usize {
        self.scorer.in_dim
    }

    /// `[.., D] -> [..]` intermediate scores.
    pub fn score(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let z = self.scorer.forward(tape, p, x)?;
        let dims = tape.dims(x);
        let out = dims[..dims.len() - 1].to_vec();
        if out.is_empty() {
            return Ok(z);
        }
        tape.reshape(z, out)
    }
}

/// Tape handles of an attention result.
#[derive(Clone, Copy, Debug)]
pub struct AttentionVars {
    pub scores: Var,
    pub fused: Var,
}

/// Attention scores and fused feature as plain values.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionOutput {
    pub scores: Tensor,
    pub fused: Tensor,
}

impl AttentionVars {
    pub fn output(&self, tape: &Tape) -> AttentionOutput {
        AttentionOutput {
            scores: tape.value(self.scores).clone(),
            fused: tape.value(self.fused).clone(),
        }
    }
}

fn check_width(tape: &Tape, head: &AttentionHead, x: Var, min_rank: usize) -> Result<Vec<usize>> {
    let dims = tape.dims(x).to_vec();
    if dims.len() < min_rank || dims[dims.len() - 1] != head.dim() {
        return dim_err("attention", &dims, &[head.dim()]);
    }
    Ok(dims)
}

/// Temporal attention over `x: [.., T, D]`.
pub fn temporal_attend(
    tape: &mut Tape,
    head: &AttentionHead,
    p: &Bound,
    x: Var,
    keep: Option<&[bool]>,
) -> Result<AttentionVars> {
    let dims = check_width(tape, head, x, 2)?;
    let z = head.score(tape, p, x)?;
    let alpha = tape.softmax(z, &[dims.len() - 2], keep)?;
    let fused = tape.weighted_sum(x, alpha)?;
    Ok(AttentionVars {
        scores: alpha,
        fused,
    })
}

/// Modality attention over a list of K same-width vectors `[.., D]`.
pub fn modality_attend(
    tape: &mut Tape,
    head: &AttentionHead,
    p: &Bound,
    xs: &[Var],
) -> Result<AttentionVars> {
    if xs.is_empty() {
        return Err(Error::Config(
            "modality attention needs at least one modality".into(),
        ));
    }
    let mut rows = Vec::with_capacity(xs.len());
    for &x in xs {
        let mut dims = tape.dims(x).to_vec();
        dims.insert(dims.len() - 1, 1);
        rows.push(tape.reshape(x, dims)?);
    }
    let rank = tape.dims(rows[0]).len();
    let stacked = tape.concat(&rows, rank - 2)?;
    modality_attend_stacked(tape, head, p, stacked, None)
}

/// Modality attention over pre-stacked `x: [.., K, D]`.
pub fn modality_attend_stacked(
    tape: &mut Tape,
    head: &AttentionHead,
    p: &Bound,
    x: Var,
    keep: Option<&[bool]>,
) -> Result<AttentionVars> {
    let dims = check_width(tape, head, x, 2)?;
    let r = dims.len();
    let (k, d) = (dims[r - 2], dims[r - 1]);
    let z = head.score(tape, p, x)?;
    let phi = tape.softmax(z, &[r - 2], keep)?;
    // weight each modality vector as a one-clip weighted sum
    let mut xd = dims.clone();
    xd.insert(r - 1, 1);
    let x1 = tape.reshape(x, xd)?;
    let mut pd = tape.dims(phi).to_vec();
    pd.push(1);
    let phi1 = tape.reshape(phi, pd)?;
    let weighted = tape.weighted_sum(x1, phi1)?;
    let mut out = dims[..r - 2].to_vec();
    out.push(k * d);
    let fused = tape.reshape(weighted, out)?;
    Ok(AttentionVars { scores: phi, fused })
}

/// Joint modality-temporal attention over `x: [.., K, T, D]`, one softmax
/// across all K*T cells.
pub fn joint_attend(
    tape: &mut Tape,
    head: &AttentionHead,
    p: &Bound,
    x: Var,
    keep: Option<&[bool]>,
) -> Result<AttentionVars> {
    let dims = check_width(tape, head, x, 3)?;
    let r = dims.len();
    let z = head.score(tape, p, x)?;
    let lambda = tape.softmax(z, &[r - 3, r - 2], keep)?;
    let pooled = tape.weighted_sum(x, lambda)?;
    let mut out = dims[..r - 3].to_vec();
    out.push(dims[r - 3] * dims[r - 1]);
    let fused = tape.reshape(pooled, out)?;
    Ok(AttentionVars {
        scores: lambda,
        fused,
    })
}

/// Uniform temporal pooling per modality followed by concatenation:
/// `x: [.., K, T, D] -> [.., K*D]`. Masked clips are left out of the mean.
pub fn no_attention_fuse(tape: &mut Tape, x: Var, keep: Option<&[bool]>) -> Result<Var> {
    let dims = tape.dims(x).to_vec();
    let r = dims.len();
    if r < 3 {
        return dim_err("no_attention_fuse", &dims, &[]);
    }
    let t = dims[r - 2];
    let weights = uniform_weights(&dims[..r - 1], t, keep)?;
    let w = tape.constant(weights);
    let pooled = tape.weighted_sum(x, w)?;
    let mut out = dims[..r - 3].to_vec();
    out.push(dims[r - 3] * dims[r - 1]);
    tape.reshape(pooled, out)
}

/// `1 / (#kept in group)` per kept cell, grouped over runs of `t` cells.
pub(crate) fn uniform_weights(dims: &[usize], t: usize, keep: Option<&[bool]>) -> Result<Tensor> {
    let n: usize = dims.iter().product();
    if let Some(k) = keep {
        if k.len() != n {
            return dim_err("attention mask", dims, &[k.len()]);
        }
    }
    let mut w = vec![0.0; n];
    for g in 0..n / t {
        let cells = g * t..(g + 1) * t;
        let kept = cells.clone().filter(|&i| keep.is_none_or(|k| k[i])).count();
        if kept == 0 {
            continue;
        }
        for i in cells {
            if keep.is_none_or(|k| k[i]) {
                w[i] = 1.0 / kept as f64;
            }
        }
    }
    Tensor::new(dims.to_vec(), w)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, dims: &[usize]) -> Tensor {
        let n = dims.iter().product();
        Tensor::new(
            dims.to_vec(),
            (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
        .unwrap()
    }

    /// Head whose score ignores the input: relu(bias).
    fn constant_head(dim: usize, bias: f64) -> (ParamStore, AttentionHead) {
        let mut store = ParamStore::new(0);
        let head = AttentionHead::new(&mut store, "att", dim).unwrap();
        store.value_mut(head.scorer.w).data_mut().fill(0.0);
        store.value_mut(head.scorer.b).data_mut()[0] = bias;
        (store, head)
    }

    #[test]
    fn temporal_equal_scores_give_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (store, head) = constant_head(3, 0.7);
        let x = rand_tensor(&mut rng, &[4, 3]);
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let xv = tape.constant(x.clone());
        let out = temporal_attend(&mut tape, &head, &p, xv, None)
            .unwrap()
            .output(&tape);
        assert!(out.scores.data().iter().all(|&a| (a - 0.25).abs() < 1e-15));
        for d in 0..3 {
            let mean = (0..4).map(|t| x.data()[t * 3 + d]).sum::<f64>() / 4.0;
            assert!((out.fused.data()[d] - mean).abs() < 1e-12);
        }
    }

    #[test]
    fn temporal_single_clip() {
        let (store, head) = constant_head(2, 0.3);
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let x = tape.constant(Tensor::new(vec![1, 2], vec![1.5, -2.0]).unwrap());
        let out = temporal_attend(&mut tape, &head, &p, x, None)
            .unwrap()
            .output(&tape);
        assert_eq!(out.scores.data(), &[1.0]);
        assert_eq!(out.fused.data(), &[1.5, -2.0]);
    }

    #[test]
    fn temporal_forced_ln3_scores() {
        // w = [1, 0], b = 0: z_t = relu(x_t[0]); x_1[0] = ln 3, x_2[0] = 0
        let mut store = ParamStore::new(0);
        let head = AttentionHead::new(&mut store, "att", 2).unwrap();
        store
            .value_mut(head.scorer.w)
            .data_mut()
            .copy_from_slice(&[1.0, 0.0]);
        let x = Tensor::new(vec![2, 2], vec![3f64.ln(), 5.0, 0.0, -1.0]).unwrap();
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let xv = tape.constant(x.clone());
        let out = temporal_attend(&mut tape, &head, &p, xv, None)
            .unwrap()
            .output(&tape);
        assert!((out.scores.data()[0] - 0.75).abs() < 1e-15);
        assert!((out.scores.data()[1] - 0.25).abs() < 1e-15);
        for d in 0..2 {
            let want = 0.75 * x.data()[d] + 0.25 * x.data()[2 + d];
            assert!((out.fused.data()[d] - want).abs() < 1e-15);
        }
    }

    #[test]
    fn modality_examples() {
        let (store, head) = constant_head(2, 0.0);
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let a = tape.constant(Tensor::vector(&[1.0, 2.0]));
        let b = tape.constant(Tensor::vector(&[-4.0, 6.0]));
        let out = modality_attend(&mut tape, &head, &p, &[a, b])
            .unwrap()
            .output(&tape);
        assert_eq!(out.scores.data(), &[0.5, 0.5]);
        assert_eq!(out.fused.data(), &[0.5, 1.0, -2.0, 3.0]);

        let single = modality_attend(&mut tape, &head, &p, &[a])
            .unwrap()
            .output(&tape);
        assert_eq!(single.scores.data(), &[1.0]);
        assert_eq!(single.fused.data(), &[1.0, 2.0]);

        assert!(matches!(
            modality_attend(&mut tape, &head, &p, &[]),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn modality_fused_width_is_k_times_d() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..10 {
            let k = rng.random_range(1..5);
            let d = rng.random_range(1..7);
            let mut store = ParamStore::new(rng.random());
            let head = AttentionHead::new(&mut store, "att", d).unwrap();
            let mut tape = Tape::new();
            let p = store.bind(&mut tape);
            let xs: Vec<Var> = (0..k)
                .map(|_| tape.constant(rand_tensor(&mut rng, &[d])))
                .collect();
            let out = modality_attend(&mut tape, &head, &p, &xs).unwrap();
            assert_eq!(tape.dims(out.fused), &[k * d]);
            assert!((tape.value(out.scores).sum() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn joint_uniform_scores_are_quarter() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (store, head) = constant_head(3, 0.4);
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let x = tape.constant(rand_tensor(&mut rng, &[2, 2, 3]));
        let out = joint_attend(&mut tape, &head, &p, x, None)
            .unwrap()
            .output(&tape);
        assert!(out.scores.data().iter().all(|&l| (l - 0.25).abs() < 1e-15));
        // joint normalization differs from per-modality softmax, which would give 0.5
        assert_eq!(out.fused.dims(), &[6]);
    }

    #[test]
    fn joint_with_one_modality_equals_temporal() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new(17);
        let head = AttentionHead::new(&mut store, "att", 4).unwrap();
        let x = rand_tensor(&mut rng, &[5, 4]);
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let xt = tape.constant(x.clone());
        let xj = tape.constant(x.reshape(vec![1, 5, 4]).unwrap());
        let t = temporal_attend(&mut tape, &head, &p, xt, None)
            .unwrap()
            .output(&tape);
        let j = joint_attend(&mut tape, &head, &p, xj, None)
            .unwrap()
            .output(&tape);
        assert!(t
            .scores
            .data()
            .iter()
            .zip(j.scores.data())
            .all(|(a, b)| (a - b).abs() <= 1e-12));
        assert!(t.fused.max_abs_diff(&j.fused) <= 1e-12);
    }

    #[test]
    fn no_attention_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = rand_tensor(&mut rng, &[2, 3, 4]);
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let fused = no_attention_fuse(&mut tape, xv, None).unwrap();
        let f = tape.value(fused).data().to_vec();
        for k in 0..2 {
            for d in 0..4 {
                let mean = (0..3).map(|t| x.data()[(k * 3 + t) * 4 + d]).sum::<f64>() / 3.0;
                assert!((f[k * 4 + d] - mean).abs() < 1e-12);
            }
        }

        // uniform joint scores put mass 1/(K*T) per cell, i.e. the per-modality mean scaled by 1/K
        let (store, head) = constant_head(4, 0.0);
        let p = store.bind(&mut tape);
        let j = joint_attend(&mut tape, &head, &p, xv, None).unwrap();
        let jf = tape.value(j.fused).data();
        assert!(f.iter().zip(jf).all(|(a, b)| (a / 2.0 - b).abs() < 1e-12));

        let one = tape.constant(Tensor::new(vec![1, 1, 3], vec![1.0, 2.0, 3.0]).unwrap());
        let fused = no_attention_fuse(&mut tape, one, None).unwrap();
        assert_eq!(tape.value(fused).data(), &[1.0, 2.0, 3.0]);
    }

    #[test]
    fn masked_cells_get_zero_score() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut store = ParamStore::new(2);
        let head = AttentionHead::new(&mut store, "att", 3).unwrap();
        let x = rand_tensor(&mut rng, &[2, 4, 3]);
        let keep = [true, true, true, false, true, true, true, false];
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let xv = tape.constant(x);
        let out = joint_attend(&mut tape, &head, &p, xv, Some(&keep))
            .unwrap()
            .output(&tape);
        assert_eq!(out.scores.data()[3], 0.0);
        assert_eq!(out.scores.data()[7], 0.0);
        assert!((out.scores.sum() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn joint_fused_is_weighted_sum_per_modality() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut store = ParamStore::new(3);
        let head = AttentionHead::new(&mut store, "att", 3).unwrap();
        store.value_mut(head.scorer.b).data_mut()[0] = 0.5;
        let x = rand_tensor(&mut rng, &[2, 4, 3]);
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let xv = tape.constant(x.clone());
        let out = joint_attend(&mut tape, &head, &p, xv, None)
            .unwrap()
            .output(&tape);
        let l = out.scores.data();
        for k in 0..2 {
            let mass: f64 = (0..4).map(|t| l[k * 4 + t]).sum();
            assert!(mass > 0.0 && mass < 1.0);
            for d in 0..3 {
                let s: f64 = (0..4)
                    .map(|t| l[k * 4 + t] * x.data()[(k * 4 + t) * 3 + d])
                    .sum();
                assert!((out.fused.data()[k * 3 + d] - s).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn permuting_clips_permutes_scores() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut store = ParamStore::new(4);
        let head = AttentionHead::new(&mut store, "att", 3).unwrap();
        store.value_mut(head.scorer.b).data_mut()[0] = 0.5;
        let x = rand_tensor(&mut rng, &[4, 3]);
        let perm = [2usize, 0, 3, 1];
        let xp: Vec<f64> = perm
            .iter()
            .flat_map(|&t| x.data()[t * 3..t * 3 + 3].to_vec())
            .collect();
        let xp = Tensor::new(vec![4, 3], xp).unwrap();
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let a = tape.constant(x);
        let b = tape.constant(xp);
        let oa = temporal_attend(&mut tape, &head, &p, a, None)
            .unwrap()
            .output(&tape);
        let ob = temporal_attend(&mut tape, &head, &p, b, None)
            .unwrap()
            .output(&tape);
        for (i, &t) in perm.iter().enumerate() {
            assert!((ob.scores.data()[i] - oa.scores.data()[t]).abs() < 1e-15);
        }
        assert!(oa.fused.max_abs_diff(&ob.fused) < 1e-12);
    }
}
