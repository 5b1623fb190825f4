//! Parameterized building blocks: dense layers, batch normalization, FiLM
//! generators and the residual block that hosts the FiLM lateral connection.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::rng::named_rng;
use crate::tensor::{BatchStats, Tape, Tensor, Var};

/// Which half of the network a parameter belongs to. Drop-off training skips
/// updates of [`PathTag::Visual`] parameters.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum PathTag {
    Visual,
    Audio,
    Shared,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub path: PathTag,
}

/// Owns every learnable tensor of a network.
#[derive(Clone, Debug)]
pub struct ParamStore {
    seed: u64,
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new(seed: u64) -> Self {
        ParamStore {
            seed,
            params: Vec::new(),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor, path: PathTag) -> ParamId {
        self.params.push(Param {
            name: name.into(),
            value,
            path,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn values(&self) -> Vec<Tensor> {
        self.params.iter().map(|p| p.value.clone()).collect()
    }

    /// Records every parameter on `tape` as a gradient-requiring leaf.
    pub fn bind(&self, tape: &mut Tape) -> Bound {
        Bound(
            self.params
                .iter()
                .map(|p| tape.param(p.value.clone()))
                .collect(),
        )
    }
}

/// Tape handles for a [`ParamStore`], index-aligned with it.
#[derive(Clone, Debug)]
pub struct Bound(Vec<Var>);

impl Bound {
    /// Wraps externally created leaves (e.g. perturbed copies in a gradient check).
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Bound(vars)
    }

    pub fn get(&self, id: ParamId) -> Var {
        self.0[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.0
    }

    pub fn grads(&self, tape: &Tape) -> Vec<Tensor> {
        self.0.iter().map(|&v| tape.grad_or_zeros(v)).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Identity,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// `activation(x . W + b)` over the last axis.
#[derive(Clone, Debug)]
pub struct DenseLayer {
    pub w: ParamId,
    pub b: ParamId,
    pub activation: Activation,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl DenseLayer {
    /// Uniform `±sqrt(6 / (in + out))` weights, zero bias.
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        activation: Activation,
        path: PathTag,
    ) -> Result<Self> {
        let limit = (6.0 / (in_dim + out_dim) as f64).sqrt();
        let mut rng = named_rng(store.seed(), &format!("{name}.w"));
        let w: Vec<f64> = (0..in_dim * out_dim)
            .map(|_| rng.random_range(-limit..limit))
            .collect();
        Self::with_values(
            store,
            name,
            Tensor::new(vec![in_dim, out_dim], w)?,
            Tensor::zeros(vec![out_dim])?,
            activation,
            path,
        )
    }

    pub fn with_values(
        store: &mut ParamStore,
        name: &str,
        w: Tensor,
        b: Tensor,
        activation: Activation,
        path: PathTag,
    ) -> Result<Self> {
        if w.dims().len() != 2 || b.dims() != [w.dims()[1]] {
            return dim_err("dense layer", w.dims(), b.dims());
        }
        let (in_dim, out_dim) = (w.dims()[0], w.dims()[1]);
        Ok(DenseLayer {
            w: store.add(format!("{name}.w"), w, path),
            b: store.add(format!("{name}.b"), b, path),
            activation,
            in_dim,
            out_dim,
        })
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let dims = tape.dims(x).to_vec();
        if dims.last() != Some(&self.in_dim) {
            return dim_err("dense", &dims, &[self.in_dim, self.out_dim]);
        }
        let rows = tape.value(x).len() / self.in_dim;
        let flat = tape.reshape(x, vec![rows, self.in_dim])?;
        let y = tape.matmul(flat, p.get(self.w))?;
        let y = tape.add_bias(y, p.get(self.b))?;
        let y = match self.activation {
            Activation::Relu => tape.relu(y),
            Activation::Identity => y,
        };
        let mut out_dims = dims;
        *out_dims.last_mut().unwrap() = self.out_dim;
        tape.reshape(y, out_dims)
    }
}

/// Batch normalization over `[B, D]` rows.
///
/// Running statistics are a bias-corrected moving average: after `n` updates
/// they weight batch `i` by `(1 - m) m^(n-i) / (1 - m^n)`, so the first update
/// replaces the (0, 1) initialization outright instead of decaying it.
#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub scale: ParamId,
    pub shift: ParamId,
    pub running_mean: Tensor,
    pub running_var: Tensor,
    /// Number of batches folded into the running statistics.
    pub updates: u64,
    pub eps: f64,
    pub momentum: f64,
}

impl BatchNorm {
    pub const EPS: f64 = 1e-5;
    pub const MOMENTUM: f64 = 0.99;

    pub fn new(store: &mut ParamStore, name: &str, dim: usize, path: PathTag) -> Result<Self> {
        Ok(BatchNorm {
            scale: store.add(format!("{name}.scale"), Tensor::ones(vec![dim])?, path),
            shift: store.add(format!("{name}.shift"), Tensor::zeros(vec![dim])?, path),
            running_mean: Tensor::zeros(vec![dim])?,
            running_var: Tensor::ones(vec![dim])?,
            updates: 0,
            eps: Self::EPS,
            momentum: Self::MOMENTUM,
        })
    }

    /// Pure forward. In train mode the batch statistics are returned and
    /// must be folded in with [`BatchNorm::update_running`].
    pub fn forward(
        &self,
        tape: &mut Tape,
        p: &Bound,
        x: Var,
        mode: Mode,
    ) -> Result<(Var, Option<BatchStats>)> {
        let running = match mode {
            Mode::Train => None,
            Mode::Eval => Some((&self.running_mean, &self.running_var)),
        };
        tape.batch_norm(x, p.get(self.scale), p.get(self.shift), self.eps, running)
    }

    pub fn update_running(&mut self, stats: &BatchStats) {
        self.updates += 1;
        let m = self.momentum;
        let w = (1.0 - m) / (1.0 - m.powf(self.updates as f64));
        let (mean, var) = stats;
        for (r, &b) in self.running_mean.data_mut().iter_mut().zip(mean.data()) {
            *r += w * (b - *r);
        }
        for (r, &b) in self.running_var.data_mut().iter_mut().zip(var.data()) {
            *r += w * (b - *r);
        }
    }

    /// Forward plus running-statistics update in one call.
    pub fn forward_mut(&mut self, tape: &mut Tape, p: &Bound, x: Var, mode: Mode) -> Result<Var> {
        let (y, stats) = self.forward(tape, p, x, mode)?;
        if let Some(s) = stats {
            self.update_running(&s);
        }
        Ok(y)
    }
}

/// Two linear heads producing FiLM `(gamma, beta)` from a conditioning vector.
/// Starts at identity modulation: zero weights, gamma bias one, beta bias zero.
#[derive(Clone, Debug)]
pub struct FilmGenerator {
    pub gamma: DenseLayer,
    pub beta: DenseLayer,
}

impl FilmGenerator {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        cond_dim: usize,
        channels: usize,
        path: PathTag,
    ) -> Result<Self> {
        let gamma = DenseLayer::with_values(
            store,
            &format!("{name}.gamma"),
            Tensor::zeros(vec![cond_dim, channels])?,
            Tensor::ones(vec![channels])?,
            Activation::Identity,
            path,
        )?;
        let beta = DenseLayer::with_values(
            store,
            &format!("{name}.beta"),
            Tensor::zeros(vec![cond_dim, channels])?,
            Tensor::zeros(vec![channels])?,
            Activation::Identity,
            path,
        )?;
        Ok(FilmGenerator { gamma, beta })
    }

    pub fn channels(&self) -> usize {
        self.gamma.out_dim
    }

    pub fn generate(&self, tape: &mut Tape, p: &Bound, cond: Var) -> Result<(Var, Var)> {
        let g = self.gamma.forward(tape, p, cond)?;
        let b = self.beta.forward(tape, p, cond)?;
        Ok((g, b))
    }
}

/// `gamma * f + beta` per channel, broadcast over the spatial axes.
pub fn film_apply(tape: &mut Tape, f: Var, gamma: Var, beta: Var) -> Result<Var> {
    tape.film(f, gamma, beta)
}

/// Residual block over per-clip feature maps:
/// `relu(film(conv_in(f))) + skip(f)` with a 1x1 convolution for `conv_in`.
#[derive(Clone, Debug)]
pub struct ResidualBlock {
    pub conv_in: DenseLayer,
    pub film: Option<FilmGenerator>,
    /// 1x1 projection, present only when input channels differ from `channels`.
    pub skip: Option<DenseLayer>,
    pub channels: usize,
}

impl ResidualBlock {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_channels: usize,
        channels: usize,
        film_cond_dim: Option<usize>,
        path: PathTag,
    ) -> Result<Self> {
        let conv_in = DenseLayer::new(
            store,
            &format!("{name}.conv"),
            in_channels,
            channels,
            Activation::Identity,
            path,
        )?;
        let film = film_cond_dim
            .map(|d| FilmGenerator::new(store, &format!("{name}.film"), d, channels, path))
            .transpose()?;
        let skip = (in_channels != channels)
            .then(|| {
                DenseLayer::new(
                    store,
                    &format!("{name}.skip"),
                    in_channels,
                    channels,
                    Activation::Identity,
                    path,
                )
            })
            .transpose()?;
        Ok(ResidualBlock {
            conv_in,
            film,
            skip,
            channels,
        })
    }

    /// `f: [N, H, W, C_in]`, `cond: [N, D_cond]` (clip `n` of `f` is modulated
    /// by row `n` of `cond`). Returns `[N, H, W, channels]`.
    pub fn forward(&self, tape: &mut Tape, p: &Bound, f: Var, cond: Option<Var>) -> Result<Var> {
        let mut h = self.conv_in.forward(tape, p, f)?;
        match (&self.film, cond) {
            (Some(gen), Some(c)) => {
                let (gamma, beta) = gen.generate(tape, p, c)?;
                h = film_apply(tape, h, gamma, beta)?;
            }
            (None, None) => {}
            (Some(_), None) => {
                return Err(Error::Config(
                    "residual block has a FiLM layer but no conditioning input".into(),
                ))
            }
            (None, Some(_)) => {
                return Err(Error::Config(
                    "conditioning input given to a residual block without FiLM".into(),
                ))
            }
        }
        let h = tape.relu(h);
        let skip = match &self.skip {
            Some(proj) => proj.forward(tape, p, f)?,
            None => f,
        };
        tape.add(h, skip)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::grad_check;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, dims: &[usize]) -> Tensor {
        let n = dims.iter().product();
        Tensor::new(
            dims.to_vec(),
            (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
        .unwrap()
    }

    fn t(dims: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(dims.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn dense_hand_examples() {
        let mut store = ParamStore::new(0);
        let l = DenseLayer::with_values(
            &mut store,
            "d",
            t(&[2, 1], &[1.0, 1.0]),
            t(&[1], &[0.0]),
            Activation::Identity,
            PathTag::Shared,
        )
        .unwrap();
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let x = tape.constant(Tensor::vector(&[2.0, 3.0]));
        let y = l.forward(&mut tape, &p, x).unwrap();
        assert_eq!(tape.value(y).data(), &[5.0]);

        let mut store = ParamStore::new(0);
        let l = DenseLayer::with_values(
            &mut store,
            "d",
            t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]),
            t(&[2], &[0.0, 0.0]),
            Activation::Relu,
            PathTag::Shared,
        )
        .unwrap();
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let x = tape.constant(Tensor::vector(&[-1.0, 2.0]));
        let y = l.forward(&mut tape, &p, x).unwrap();
        assert_eq!(tape.value(y).data(), &[0.0, 2.0]);
    }

    #[test]
    fn dense_matches_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new(11);
        let l =
            DenseLayer::new(&mut store, "d", 5, 3, Activation::Identity, PathTag::Shared).unwrap();
        store
            .value_mut(l.b)
            .data_mut()
            .copy_from_slice(&[0.1, -0.2, 0.3]);
        let x = rand_tensor(&mut rng, &[2, 4, 5]);
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let xv = tape.constant(x.clone());
        let y = l.forward(&mut tape, &p, xv).unwrap();
        assert_eq!(tape.dims(y), &[2, 4, 3]);
        let (w, b) = (store.value(l.w).data(), store.value(l.b).data());
        for r in 0..8 {
            for o in 0..3 {
                let mut s = b[o];
                for i in 0..5 {
                    s += x.data()[r * 5 + i] * w[i * 3 + o];
                }
                assert!((tape.value(y).data()[r * 3 + o] - s).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn dense_init_is_bounded_and_reproducible() {
        let mut a = ParamStore::new(5);
        let la = DenseLayer::new(&mut a, "x", 6, 10, Activation::Relu, PathTag::Audio).unwrap();
        let mut b = ParamStore::new(5);
        let _other = DenseLayer::new(&mut b, "y", 3, 3, Activation::Relu, PathTag::Audio).unwrap();
        let lb = DenseLayer::new(&mut b, "x", 6, 10, Activation::Relu, PathTag::Audio).unwrap();
        assert_eq!(a.value(la.w), b.value(lb.w));
        let limit = (6.0f64 / 16.0).sqrt();
        assert!(a.value(la.w).data().iter().all(|v| v.abs() <= limit));
        assert!(a.value(la.b).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn dense_width_mismatch() {
        let mut store = ParamStore::new(0);
        let l = DenseLayer::new(&mut store, "d", 3, 2, Activation::Relu, PathTag::Shared).unwrap();
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let x = tape.constant(Tensor::zeros(vec![4]).unwrap());
        assert!(matches!(
            l.forward(&mut tape, &p, x),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn batchnorm_identity_on_standardized_batch() {
        let mut store = ParamStore::new(0);
        let bn = BatchNorm::new(&mut store, "bn", 1, PathTag::Shared).unwrap();
        let x = t(&[2, 1], &[-1.0, 1.0]); // mean 0, biased var 1
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let xv = tape.constant(x.clone());
        let (y, _) = bn.forward(&mut tape, &p, xv, Mode::Train).unwrap();
        // |y - x| = |x| * (1 - 1/sqrt(1 + eps)) <= eps / 2
        assert!(tape.value(y).max_abs_diff(&x) <= BatchNorm::EPS / 2.0);
    }

    #[test]
    fn batchnorm_constant_column_is_zero() {
        let mut store = ParamStore::new(0);
        let bn = BatchNorm::new(&mut store, "bn", 2, PathTag::Shared).unwrap();
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let xv = tape.constant(t(&[3, 2], &[4.0, 1.0, 4.0, 2.0, 4.0, 3.0]));
        let (y, _) = bn.forward(&mut tape, &p, xv, Mode::Train).unwrap();
        let v = tape.value(y).data();
        assert_eq!([v[0], v[2], v[4]], [0.0, 0.0, 0.0]);
        assert!(v.iter().all(|x| x.is_finite()));
    }

    #[test]
    fn batchnorm_moments_match_direct_computation() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (b, d) = (64, 5);
        let x = Tensor::new(
            vec![b, d],
            (0..b * d)
                .map(|_| 3.0 + 2.0 * rng.random_range(-1.0..1.0))
                .collect(),
        )
        .unwrap();
        let mut store = ParamStore::new(0);
        let bn = BatchNorm::new(&mut store, "bn", d, PathTag::Shared).unwrap();
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let xv = tape.constant(x.clone());
        let (y, stats) = bn.forward(&mut tape, &p, xv, Mode::Train).unwrap();
        let y = tape.value(y).data();
        let (mean, var) = stats.unwrap();
        for j in 0..d {
            let col: Vec<f64> = (0..b).map(|i| x.data()[i * d + j]).collect();
            let m = col.iter().sum::<f64>() / b as f64;
            let v = col.iter().map(|c| (c - m) * (c - m)).sum::<f64>() / b as f64;
            assert!((mean.data()[j] - m).abs() < 1e-12);
            assert!((var.data()[j] - v).abs() < 1e-12);
            let ycol: Vec<f64> = (0..b).map(|i| y[i * d + j]).collect();
            let ym = ycol.iter().sum::<f64>() / b as f64;
            let yv = ycol.iter().map(|c| (c - ym) * (c - ym)).sum::<f64>() / b as f64;
            assert!(ym.abs() < 1e-9);
            // eps shrinks the variance by v / (v + eps)
            assert!((yv - 1.0).abs() < 1e-5 && (yv - v / (v + BatchNorm::EPS)).abs() < 1e-6);
        }
    }

    #[test]
    fn batchnorm_running_stats_and_eval_determinism() {
        let mut store = ParamStore::new(0);
        let mut bn = BatchNorm::new(&mut store, "bn", 1, PathTag::Shared).unwrap();
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let xv = tape.constant(t(&[2, 1], &[1.0, 3.0]));
        bn.forward_mut(&mut tape, &p, xv, Mode::Train).unwrap();
        // the first batch replaces the initialization
        assert!((bn.running_mean.data()[0] - 2.0).abs() < 1e-15);
        assert!((bn.running_var.data()[0] - 1.0).abs() < 1e-15);
        assert!(bn.running_var.data()[0] >= 0.0);

        let (e1, s1) = bn.forward(&mut tape, &p, xv, Mode::Eval).unwrap();
        let (e2, _) = bn.forward(&mut tape, &p, xv, Mode::Eval).unwrap();
        assert!(s1.is_none());
        assert_eq!(tape.value(e1).data(), tape.value(e2).data());
        // eval mode does not need two rows
        let one = tape.constant(t(&[1, 1], &[0.5]));
        assert!(bn.forward(&mut tape, &p, one, Mode::Eval).is_ok());
    }

    #[test]
    fn film_generator_identity_start() {
        let mut store = ParamStore::new(0);
        let gen = FilmGenerator::new(&mut store, "f", 4, 3, PathTag::Audio).unwrap();
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let x = tape.constant(Tensor::vector(&[0.3, -2.0, 1.0, 5.0]));
        let (g, b) = gen.generate(&mut tape, &p, x).unwrap();
        assert_eq!(tape.value(g).data(), &[1.0; 3]);
        assert_eq!(tape.value(b).data(), &[0.0; 3]);

        store.value_mut(gen.gamma.b).data_mut().fill(0.0);
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let x = tape.constant(Tensor::vector(&[0.3, -2.0, 1.0, 5.0]));
        let (g, _) = gen.generate(&mut tape, &p, x).unwrap();
        assert_eq!(tape.value(g).data(), &[0.0; 3]);

        let bad = tape.constant(Tensor::vector(&[1.0, 2.0]));
        assert!(gen.generate(&mut tape, &p, bad).is_err());
    }

    #[test]
    fn film_generator_matches_dense_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut store = ParamStore::new(0);
        let gen = FilmGenerator::new(&mut store, "f", 3, 2, PathTag::Audio).unwrap();
        for id in [gen.gamma.w, gen.gamma.b, gen.beta.w, gen.beta.b] {
            let dims = store.value(id).dims().to_vec();
            *store.value_mut(id) = rand_tensor(&mut rng, &dims);
        }
        let x = rand_tensor(&mut rng, &[3]);
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let xv = tape.constant(x.clone());
        let (g, b) = gen.generate(&mut tape, &p, xv).unwrap();
        for (out, layer) in [(g, &gen.gamma), (b, &gen.beta)] {
            let (w, bias) = (store.value(layer.w).data(), store.value(layer.b).data());
            for o in 0..2 {
                let s: f64 = bias[o] + (0..3).map(|i| x.data()[i] * w[i * 2 + o]).sum::<f64>();
                assert!((tape.value(out).data()[o] - s).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn film_apply_examples() {
        let mut tape = Tape::new();
        let f = tape.constant(Tensor::full(vec![2, 2, 3], 2.0).unwrap());
        let g = tape.constant(Tensor::full(vec![3], 3.0).unwrap());
        let b = tape.constant(Tensor::full(vec![3], 1.0).unwrap());
        let y = film_apply(&mut tape, f, g, b).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 7.0));

        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let fv = rand_tensor(&mut rng, &[3, 2, 4]);
        let f = tape.constant(fv.clone());
        let one = tape.constant(Tensor::ones(vec![4]).unwrap());
        let zero = tape.constant(Tensor::zeros(vec![4]).unwrap());
        let neg = tape.constant(Tensor::full(vec![4], -1.0).unwrap());
        let id = film_apply(&mut tape, f, one, zero).unwrap();
        assert_eq!(tape.value(id), &fv);
        let n = film_apply(&mut tape, f, neg, zero).unwrap();
        assert_eq!(tape.value(n), &fv.map(|v| -v));

        let three = tape.constant(Tensor::zeros(vec![3]).unwrap());
        assert!(matches!(
            film_apply(&mut tape, f, three, three),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn residual_block_identity_paths() {
        // conv_in = I, skip = identity, no film, nonnegative input -> 2x
        let mut store = ParamStore::new(0);
        let rb = ResidualBlock::new(&mut store, "rb", 3, 3, None, PathTag::Audio).unwrap();
        assert!(rb.skip.is_none());
        let eye = t(&[3, 3], &[1., 0., 0., 0., 1., 0., 0., 0., 1.]);
        *store.value_mut(rb.conv_in.w) = eye;
        let x = t(&[1, 2, 1, 3], &[0.5, 1.0, 2.0, 0.0, 3.0, 0.25]);
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let xv = tape.constant(x.clone());
        let y = rb.forward(&mut tape, &p, xv, None).unwrap();
        assert_eq!(tape.value(y), &x.map(|v| 2.0 * v));

        // zeroed conv path reproduces the skip input exactly
        store.value_mut(rb.conv_in.w).data_mut().fill(0.0);
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let xv = tape.constant(x.map(|v| v - 1.0));
        let y = rb.forward(&mut tape, &p, xv, None).unwrap();
        assert_eq!(tape.value(y), &x.map(|v| v - 1.0));
    }

    #[test]
    fn residual_block_identity_film_equals_plain() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut plain_store = ParamStore::new(21);
        let plain = ResidualBlock::new(&mut plain_store, "rb", 4, 6, None, PathTag::Audio).unwrap();
        let mut film_store = ParamStore::new(21);
        let filmed =
            ResidualBlock::new(&mut film_store, "rb", 4, 6, Some(5), PathTag::Audio).unwrap();
        assert!(plain.skip.is_some());
        let x = rand_tensor(&mut rng, &[3, 2, 2, 4]);
        let c = rand_tensor(&mut rng, &[3, 5]);

        let mut tape = Tape::new();
        let p = plain_store.bind(&mut tape);
        let xv = tape.constant(x.clone());
        let a = rb_out(&plain, &mut tape, &p, xv, None);
        let mut tape2 = Tape::new();
        let p2 = film_store.bind(&mut tape2);
        let xv2 = tape2.constant(x);
        let cv = tape2.constant(c);
        let b = rb_out(&filmed, &mut tape2, &p2, xv2, Some(cv));
        assert_eq!(tape.value(a), tape2.value(b));
        assert_eq!(tape2.dims(b), &[3, 2, 2, 6]);
    }

    fn rb_out(rb: &ResidualBlock, tape: &mut Tape, p: &Bound, x: Var, c: Option<Var>) -> Var {
        rb.forward(tape, p, x, c).unwrap()
    }

    #[test]
    fn residual_block_conditioning_contract() {
        let mut store = ParamStore::new(0);
        let rb = ResidualBlock::new(&mut store, "rb", 2, 2, Some(3), PathTag::Audio).unwrap();
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let x = tape.constant(Tensor::zeros(vec![1, 1, 1, 2]).unwrap());
        assert!(matches!(
            rb.forward(&mut tape, &p, x, None),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn residual_block_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::new(3);
        let rb = ResidualBlock::new(&mut store, "rb", 3, 4, Some(2), PathTag::Audio).unwrap();
        // move FiLM heads off the identity start so every path carries signal
        for id in [
            rb.film.as_ref().unwrap().gamma.w,
            rb.film.as_ref().unwrap().beta.w,
        ] {
            let dims = store.value(id).dims().to_vec();
            *store.value_mut(id) = rand_tensor(&mut rng, &dims);
        }
        let x = rand_tensor(&mut rng, &[2, 2, 1, 3]);
        let c = rand_tensor(&mut rng, &[2, 2]);
        let w = rand_tensor(&mut rng, &[2, 2, 1, 4]);
        let mut inputs = store.values();
        inputs.push(x);
        inputs.push(c);
        let np = store.len();
        let report = grad_check(
            |tape, vars| {
                let p = Bound::from_vars(vars[..np].to_vec());
                let y = rb.forward(tape, &p, vars[np], Some(vars[np + 1]))?;
                let wv = tape.constant(w.clone());
                let y = tape.mul(y, wv)?;
                Ok(tape.sum(y))
            },
            &inputs,
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(report.passed, "{report:?}");
    }

    #[test]
    fn every_layer_parameter_gets_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut store = ParamStore::new(4);
        let rb = ResidualBlock::new(&mut store, "rb", 3, 5, Some(2), PathTag::Audio).unwrap();
        let bn = BatchNorm::new(&mut store, "bn", 5, PathTag::Audio).unwrap();
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let x = tape.constant(rand_tensor(&mut rng, &[4, 2, 2, 3]));
        let c = tape.constant(rand_tensor(&mut rng, &[4, 2]));
        let y = rb.forward(&mut tape, &p, x, Some(c)).unwrap();
        let pooled = tape.mean_pool_spatial(y).unwrap();
        let (z, _) = bn.forward(&mut tape, &p, pooled, Mode::Train).unwrap();
        let wz = tape.constant(rand_tensor(&mut rng, &[4, 5]));
        let z = tape.mul(z, wz).unwrap();
        let loss = tape.sum(z);
        tape.backward(loss).unwrap();
        for (param, g) in store.params().iter().zip(p.grads(&tape)) {
            assert!(
                g.data().iter().any(|&v| v != 0.0),
                "dead parameter {}",
                param.name
            );
        }
    }

    #[test]
    fn batchnorm_running_stats_match_debiased_moving_average() {
        let mut store = ParamStore::new(0);
        let mut bn = BatchNorm::new(&mut store, "bn", 1, PathTag::Shared).unwrap();
        let batches = [[1.0, 3.0], [-4.0, 0.0], [10.0, 11.0], [0.5, 0.25]];
        for b in &batches {
            let mut tape = Tape::new();
            let p = store.bind(&mut tape);
            let xv = tape.constant(t(&[2, 1], b));
            bn.forward_mut(&mut tape, &p, xv, Mode::Train).unwrap();
        }
        let m: f64 = 0.99;
        let n = batches.len();
        let (mut mean, mut var, mut norm) = (0.0, 0.0, 0.0);
        for (i, b) in batches.iter().enumerate() {
            let w = (1.0 - m) * m.powi((n - 1 - i) as i32);
            let mu = (b[0] + b[1]) / 2.0;
            mean += w * mu;
            var += w * ((b[0] - mu).powi(2) + (b[1] - mu).powi(2)) / 2.0;
            norm += w;
        }
        assert_eq!(bn.updates, 4);
        assert!((bn.running_mean.data()[0] - mean / norm).abs() < 1e-12);
        assert!((bn.running_var.data()[0] - var / norm).abs() < 1e-12);
    }
}
