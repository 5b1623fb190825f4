//! The assembled network: feature maps -> optional residual/FiLM blocks ->
//! spatial pooling -> per-modality projection -> attention -> fusion ->
//! classifier.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{
    joint_attend, modality_attend_stacked, no_attention_fuse, temporal_attend, uniform_weights,
    AttentionHead, AttentionOutput,
};
use crate::data::FeatureRecord;
use crate::error::{dim_err, Error, Result};
use crate::fusion::{fuse_add, fuse_dmr, fuse_mcb, mcb_normalize, CountSketch, DmrBlock};
use crate::layers::{
    Activation, BatchNorm, Bound, DenseLayer, Mode, ParamStore, PathTag, ResidualBlock,
};
use crate::rng::named_rng;
use crate::tensor::{BatchStats, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionKind {
    None,
    Temporal,
    Modality,
    Joint,
}

impl AttentionKind {
    pub const ALL: [AttentionKind; 4] = [
        AttentionKind::None,
        AttentionKind::Temporal,
        AttentionKind::Modality,
        AttentionKind::Joint,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AttentionKind::None => "none",
            AttentionKind::Temporal => "temporal",
            AttentionKind::Modality => "modality",
            AttentionKind::Joint => "joint",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionKind {
    Add,
    Concat,
    Mcb,
    Dmr,
}

impl FusionKind {
    pub const ALL: [FusionKind; 4] = [
        FusionKind::Add,
        FusionKind::Concat,
        FusionKind::Mcb,
        FusionKind::Dmr,
    ];

    pub fn name(self) -> &'static str {
        match self {
            FusionKind::Add => "add",
            FusionKind::Concat => "concat",
            FusionKind::Mcb => "mcb",
            FusionKind::Dmr => "dmr",
        }
    }
}

/// Where residual blocks and FiLM lateral connections go.
///
/// `PlainResidual`, `Audio`, `Visual` and `Both` all put a residual block on
/// both paths; they differ only in which blocks carry a FiLM layer. `Audio`
/// modulates audio maps with pooled visual features, `Visual` the reverse.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FilmPlacement {
    None,
    PlainResidual,
    Audio,
    Visual,
    Both,
}

impl FilmPlacement {
    pub const ALL: [FilmPlacement; 5] = [
        FilmPlacement::None,
        FilmPlacement::PlainResidual,
        FilmPlacement::Audio,
        FilmPlacement::Visual,
        FilmPlacement::Both,
    ];

    pub fn name(self) -> &'static str {
        match self {
            FilmPlacement::None => "none",
            FilmPlacement::PlainResidual => "plain_residual",
            FilmPlacement::Audio => "audio",
            FilmPlacement::Visual => "visual",
            FilmPlacement::Both => "both",
        }
    }

    fn has_blocks(self) -> bool {
        self != FilmPlacement::None
    }

    fn film_on(self, m: Modality) -> bool {
        matches!(
            (self, m),
            (FilmPlacement::Both, _)
                | (FilmPlacement::Audio, Modality::Audio)
                | (FilmPlacement::Visual, Modality::Visual)
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    Visual,
    Audio,
}

impl Modality {
    pub fn index(self) -> usize {
        match self {
            Modality::Visual => 0,
            Modality::Audio => 1,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Modality::Visual => "visual",
            Modality::Audio => "audio",
        }
    }

    fn other(self) -> Modality {
        match self {
            Modality::Visual => Modality::Audio,
            Modality::Audio => Modality::Visual,
        }
    }

    fn path(self) -> PathTag {
        match self {
            Modality::Visual => PathTag::Visual,
            Modality::Audio => PathTag::Audio,
        }
    }
}

/// Which inputs the network consumes. Unimodal networks use temporal-only
/// style pooling over their single modality.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modalities {
    Both,
    Visual,
    Audio,
}

impl Modalities {
    pub fn active(self) -> &'static [Modality] {
        match self {
            Modalities::Both => &[Modality::Visual, Modality::Audio],
            Modalities::Visual => &[Modality::Visual],
            Modalities::Audio => &[Modality::Audio],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MafConfig {
    /// Clips per video (T); shorter videos are zero padded.
    pub max_clips: usize,
    pub modalities: Modalities,
    /// (H, W, D) of one visual clip feature map.
    pub visual_shape: [usize; 3],
    /// (H, W, D) of one audio clip feature map.
    pub audio_shape: [usize; 3],
    /// Width of the per-modality projection.
    pub hidden: usize,
    /// Filters of the residual blocks.
    pub residual_channels: usize,
    pub num_classes: usize,
    pub attention: AttentionKind,
    pub fusion: FusionKind,
    pub film: FilmPlacement,
    /// Exclude padded clips from attention normalization.
    pub mask_padding: bool,
    /// Sketch width for MCB fusion.
    pub mcb_dim: usize,
    pub seed: u64,
}

impl Default for MafConfig {
    fn default() -> Self {
        MafConfig {
            max_clips: 10,
            modalities: Modalities::Both,
            visual_shape: [7, 7, 1920],
            audio_shape: [12, 8, 512],
            hidden: 512,
            residual_channels: 512,
            num_classes: 28,
            attention: AttentionKind::Joint,
            fusion: FusionKind::Concat,
            film: FilmPlacement::Audio,
            mask_padding: false,
            mcb_dim: 1024,
            seed: 0,
        }
    }
}

impl MafConfig {
    pub fn num_modalities(&self) -> usize {
        self.modalities.active().len()
    }

    pub fn map_shape(&self, m: Modality) -> [usize; 3] {
        match m {
            Modality::Visual => self.visual_shape,
            Modality::Audio => self.audio_shape,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::Config(msg.to_string()));
        if self.max_clips == 0 {
            return bad("max_clips must be at least 1");
        }
        if self.hidden == 0 {
            return bad("hidden must be at least 1");
        }
        if self.residual_channels == 0 {
            return bad("residual_channels must be at least 1");
        }
        if self.num_classes < 2 {
            return bad("num_classes must be at least 2");
        }
        if self.mcb_dim == 0 {
            return bad("mcb_dim must be at least 1");
        }
        if self.visual_shape.contains(&0) || self.audio_shape.contains(&0) {
            return bad("feature map extents must be positive");
        }
        if self.modalities != Modalities::Both {
            if self.fusion != FusionKind::Concat {
                return bad("a unimodal network only supports concat fusion");
            }
            if self.film != FilmPlacement::None {
                return bad("a unimodal network cannot have residual or FiLM blocks");
            }
            if self.attention == AttentionKind::Modality || self.attention == AttentionKind::Joint {
                return bad("a unimodal network supports only none or temporal attention");
            }
        }
        Ok(())
    }

    /// Width of the vector fed to the classifier.
    pub fn fused_width(&self) -> usize {
        match self.fusion {
            FusionKind::Concat => self.num_modalities() * self.hidden,
            FusionKind::Add | FusionKind::Dmr => self.hidden,
            FusionKind::Mcb => self.mcb_dim,
        }
    }
}

#[derive(Clone, Debug)]
struct Projection {
    dense: DenseLayer,
    bn: BatchNorm,
}

#[derive(Clone, Debug)]
enum FusionParams {
    Plain,
    Mcb {
        audio: CountSketch,
        visual: CountSketch,
    },
    Dmr(DmrBlock),
}

#[derive(Clone, Debug)]
struct Path {
    modality: Modality,
    block: Option<ResidualBlock>,
    proj: Projection,
}

/// Zero-padded batch: `visual: [B, T, Hv, Wv, Dv]`, `audio: [B, T, Ha, Wa, Da]`.
#[derive(Clone, Debug)]
pub struct BatchInput {
    pub visual: Tensor,
    pub audio: Tensor,
    pub t_actual: Vec<usize>,
}

impl BatchInput {
    pub fn batch_size(&self) -> usize {
        self.t_actual.len()
    }

    fn maps(&self, m: Modality) -> &Tensor {
        match m {
            Modality::Visual => &self.visual,
            Modality::Audio => &self.audio,
        }
    }

    /// Stacks records into a zero-padded batch shaped by `config`.
    pub fn from_records(records: &[&FeatureRecord], config: &MafConfig) -> Result<Self> {
        if records.is_empty() {
            return Err(Error::Data("empty batch".into()));
        }
        let t = config.max_clips;
        let mut out = Vec::with_capacity(2);
        for m in [Modality::Visual, Modality::Audio] {
            let shape = config.map_shape(m);
            let clip: usize = shape.iter().product();
            let mut data = vec![0.0; records.len() * t * clip];
            for (b, r) in records.iter().enumerate() {
                let maps = r
                    .maps
                    .get(m.index())
                    .ok_or_else(|| Error::Data(format!("record has no {} maps", m.name())))?;
                let want = [r.t_actual, shape[0], shape[1], shape[2]];
                if maps.dims() != want {
                    return dim_err("batch assembly", maps.dims(), &want);
                }
                if r.t_actual > t {
                    return Err(Error::Data(format!(
                        "record has {} clips, more than max_clips {t}",
                        r.t_actual
                    )));
                }
                let base = b * t * clip;
                data[base..base + maps.len()].copy_from_slice(maps.data());
            }
            out.push(Tensor::new(
                vec![records.len(), t, shape[0], shape[1], shape[2]],
                data,
            )?);
        }
        let audio = out.pop().unwrap();
        let visual = out.pop().unwrap();
        Ok(BatchInput {
            visual,
            audio,
            t_actual: records.iter().map(|r| r.t_actual).collect(),
        })
    }
}

/// Result of a forward pass on a tape.
#[derive(Debug)]
pub struct ForwardOutput {
    /// `[B, N]`
    pub logits: Var,
    /// Classifier input `[B, fused_width]`.
    pub fused: Var,
    scores: Option<(Var, bool)>,
    /// Batch statistics per projection batch norm (train mode only), in path order.
    pub bn_stats: Vec<BatchStats>,
}

impl ForwardOutput {
    /// Attention scores laid out as `[B, K, T]`, or `None` without attention.
    pub fn scores(&self, tape: &Tape) -> Option<Tensor> {
        let (v, transposed) = self.scores?;
        let s = tape.value(v);
        if !transposed {
            return Some(s.clone());
        }
        // stored as [B, T, K]
        let d = s.dims();
        let (b, t, k) = (d[0], d[1], d[2]);
        let mut out = vec![0.0; s.len()];
        for bi in 0..b {
            for ti in 0..t {
                for ki in 0..k {
                    out[(bi * k + ki) * t + ti] = s.data()[(bi * t + ti) * k + ki];
                }
            }
        }
        Some(Tensor::new(vec![b, k, t], out).expect("non-empty scores"))
    }
}

/// One row of an attention export.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionRow {
    pub modality: Modality,
    pub clip: usize,
    pub score: f64,
}

/// Named tensors making up the full network state (parameters and
/// batch-norm running statistics).
pub type NetState = Vec<(String, Tensor)>;

#[derive(Clone, Debug)]
pub struct MafNet {
    config: MafConfig,
    store: ParamStore,
    paths: Vec<Path>,
    head: Option<AttentionHead>,
    fusion: FusionParams,
    classifier: DenseLayer,
}

fn check_finite(tape: &Tape, v: Var, stage: &str) -> Result<()> {
    if tape.value(v).is_finite() {
        Ok(())
    } else {
        Err(Error::Numeric {
            stage: stage.to_string(),
        })
    }
}

impl MafNet {
    /// Builds a network. Each parameter's initial value depends only on
    /// `(config.seed, parameter name)`, so configurations sharing a
    /// component start from identical weights for it.
    pub fn new(config: MafConfig) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new(config.seed);
        let mut paths = Vec::new();
        for &m in config.modalities.active() {
            let [_, _, d] = config.map_shape(m);
            let name = m.name();
            let block = if config.film.has_blocks() {
                let cond = config
                    .film
                    .film_on(m)
                    .then(|| config.map_shape(m.other())[2]);
                Some(ResidualBlock::new(
                    &mut store,
                    &format!("{name}.res"),
                    d,
                    config.residual_channels,
                    cond,
                    m.path(),
                )?)
            } else {
                None
            };
            let in_dim = block.as_ref().map_or(d, |b| b.channels);
            let dense = DenseLayer::new(
                &mut store,
                &format!("{name}.proj"),
                in_dim,
                config.hidden,
                Activation::Identity,
                m.path(),
            )?;
            let bn = BatchNorm::new(&mut store, &format!("{name}.bn"), config.hidden, m.path())?;
            paths.push(Path {
                modality: m,
                block,
                proj: Projection { dense, bn },
            });
        }
        let head = match config.attention {
            AttentionKind::None => None,
            _ => Some(AttentionHead::new(&mut store, "attention", config.hidden)?),
        };
        let fusion = match config.fusion {
            FusionKind::Add | FusionKind::Concat => FusionParams::Plain,
            FusionKind::Mcb => {
                let sa = named_rng(config.seed, "fusion.mcb.audio").random();
                let sv = named_rng(config.seed, "fusion.mcb.visual").random();
                FusionParams::Mcb {
                    audio: CountSketch::new(config.hidden, config.mcb_dim, sa)?,
                    visual: CountSketch::new(config.hidden, config.mcb_dim, sv)?,
                }
            }
            FusionKind::Dmr => {
                FusionParams::Dmr(DmrBlock::new(&mut store, "fusion.dmr", config.hidden)?)
            }
        };
        let classifier = DenseLayer::new(
            &mut store,
            "classifier",
            config.fused_width(),
            config.num_classes,
            Activation::Identity,
            PathTag::Shared,
        )?;
        Ok(MafNet {
            config,
            store,
            paths,
            head,
            fusion,
            classifier,
        })
    }

    pub fn config(&self) -> &MafConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    /// `true` for parameters on the visual path (drop-off targets).
    pub fn visual_path_mask(&self) -> Vec<bool> {
        self.store
            .params()
            .iter()
            .map(|p| p.path == PathTag::Visual)
            .collect()
    }

    pub fn residual_block(&self, m: Modality) -> Option<&ResidualBlock> {
        self.paths
            .iter()
            .find(|p| p.modality == m)
            .and_then(|p| p.block.as_ref())
    }

    fn check_input(&self, batch: &BatchInput) -> Result<()> {
        let b = batch.batch_size();
        if b == 0 {
            return Err(Error::Data("empty batch".into()));
        }
        for &m in self.config.modalities.active() {
            let [h, w, d] = self.config.map_shape(m);
            let want = [b, self.config.max_clips, h, w, d];
            if batch.maps(m).dims() != want {
                return dim_err("forward input", batch.maps(m).dims(), &want);
            }
        }
        if let Some(&t) = batch
            .t_actual
            .iter()
            .find(|&&t| t == 0 || t > self.config.max_clips)
        {
            return Err(Error::Data(format!(
                "t_actual {t} outside 1..={}",
                self.config.max_clips
            )));
        }
        Ok(())
    }

    /// Keep mask over `[B, K, T]` (or `[B, T, K]` when `time_major`).
    fn keep_mask(&self, t_actual: &[usize], time_major: bool) -> Option<Vec<bool>> {
        if !self.config.mask_padding {
            return None;
        }
        let (k, t) = (self.config.num_modalities(), self.config.max_clips);
        let mut keep = Vec::with_capacity(t_actual.len() * k * t);
        for &ta in t_actual {
            if time_major {
                for ti in 0..t {
                    keep.extend(std::iter::repeat_n(ti < ta, k));
                }
            } else {
                for _ in 0..k {
                    keep.extend((0..t).map(|ti| ti < ta));
                }
            }
        }
        Some(keep)
    }

    /// Full forward pass recorded on `tape` with parameters bound in `p`.
    /// Pure: batch statistics are returned, not applied.
    pub fn forward_tape(
        &self,
        tape: &mut Tape,
        p: &Bound,
        batch: &BatchInput,
        mode: Mode,
    ) -> Result<ForwardOutput> {
        self.check_input(batch)?;
        let cfg = &self.config;
        let (b, t) = (batch.batch_size(), cfg.max_clips);
        let hidden = cfg.hidden;

        // spatially pooled raw features, also the FiLM conditioning inputs
        let mut raw_maps = [None, None];
        let mut raw_pooled = [None, None];
        for m in [Modality::Visual, Modality::Audio] {
            let needed = cfg.modalities.active().contains(&m)
                || cfg.film.film_on(m.other()) && cfg.modalities == Modalities::Both;
            if !needed {
                continue;
            }
            let [h, w, d] = cfg.map_shape(m);
            let maps = tape.constant(batch.maps(m).reshape(vec![b * t, h, w, d])?);
            raw_pooled[m.index()] = Some(tape.mean_pool_spatial(maps)?);
            raw_maps[m.index()] = Some(maps);
        }

        let mut projected = Vec::with_capacity(self.paths.len());
        let mut bn_stats = Vec::new();
        for path in &self.paths {
            let m = path.modality;
            let stage = m.name();
            let feat = match &path.block {
                Some(block) => {
                    let cond = block
                        .film
                        .as_ref()
                        .map(|_| raw_pooled[m.other().index()].unwrap());
                    let y = block.forward(tape, p, raw_maps[m.index()].unwrap(), cond)?;
                    check_finite(tape, y, &format!("{stage} residual block"))?;
                    tape.mean_pool_spatial(y)?
                }
                None => raw_pooled[m.index()].unwrap(),
            };
            let h = path.proj.dense.forward(tape, p, feat)?;
            let (h, stats) = path.proj.bn.forward(tape, p, h, mode)?;
            if let Some(s) = stats {
                bn_stats.push(s);
            }
            let h = tape.relu(h);
            check_finite(tape, h, &format!("{stage} projection"))?;
            projected.push(h);
        }

        let k = projected.len();
        let (pooled, scores) = match cfg.attention {
            AttentionKind::Modality => {
                let rows = projected
                    .iter()
                    .map(|&h| tape.reshape(h, vec![b, t, 1, hidden]))
                    .collect::<Result<Vec<_>>>()?;
                let x = tape.concat(&rows, 2)?;
                let keep = self.keep_mask(&batch.t_actual, true);
                let head = self.head.as_ref().expect("modality attention has a head");
                let att = modality_attend_stacked(tape, head, p, x, keep.as_deref())?;
                // average the per-clip fused vectors over (unpadded) clips
                let keep_bt: Option<Vec<bool>> = cfg.mask_padding.then(|| {
                    batch
                        .t_actual
                        .iter()
                        .flat_map(|&ta| (0..t).map(move |ti| ti < ta))
                        .collect()
                });
                let w = tape.constant(uniform_weights(&[b, t], t, keep_bt.as_deref())?);
                let pooled = tape.weighted_sum(att.fused, w)?;
                (pooled, Some((att.scores, true)))
            }
            kind => {
                let rows = projected
                    .iter()
                    .map(|&h| tape.reshape(h, vec![b, 1, t, hidden]))
                    .collect::<Result<Vec<_>>>()?;
                let x = tape.concat(&rows, 1)?;
                let keep = self.keep_mask(&batch.t_actual, false);
                let keep = keep.as_deref();
                match kind {
                    AttentionKind::None => (no_attention_fuse(tape, x, keep)?, None),
                    AttentionKind::Temporal => {
                        let head = self.head.as_ref().expect("temporal attention has a head");
                        let att = temporal_attend(tape, head, p, x, keep)?;
                        let fused = tape.reshape(att.fused, vec![b, k * hidden])?;
                        (fused, Some((att.scores, false)))
                    }
                    AttentionKind::Joint => {
                        let head = self.head.as_ref().expect("joint attention has a head");
                        let att = joint_attend(tape, head, p, x, keep)?;
                        (att.fused, Some((att.scores, false)))
                    }
                    AttentionKind::Modality => unreachable!(),
                }
            }
        };
        check_finite(tape, pooled, "attention")?;

        let fused = match (&self.fusion, cfg.fusion) {
            (_, FusionKind::Concat) => pooled,
            (fp, kind) => {
                let v = tape.slice(pooled, 1, 0, hidden)?;
                let a = tape.slice(pooled, 1, hidden, hidden)?;
                match (fp, kind) {
                    (_, FusionKind::Add) => fuse_add(tape, a, v)?,
                    (FusionParams::Mcb { audio, visual }, _) => {
                        let y = fuse_mcb(tape, audio, visual, a, v)?;
                        mcb_normalize(tape, y)?
                    }
                    (FusionParams::Dmr(dmr), _) => fuse_dmr(tape, p, dmr, a, v)?,
                    _ => unreachable!("fusion parameters match the configured kind"),
                }
            }
        };
        check_finite(tape, fused, "fusion")?;
        let logits = self.classifier.forward(tape, p, fused)?;
        check_finite(tape, logits, "classifier")?;
        Ok(ForwardOutput {
            logits,
            fused,
            scores,
            bn_stats,
        })
    }

    /// Folds train-mode batch statistics into the running estimates.
    pub fn commit_bn_stats(&mut self, stats: &[BatchStats]) {
        for (path, s) in self.paths.iter_mut().zip(stats) {
            path.proj.bn.update_running(s);
        }
    }

    /// Eval-mode forward of one video: `visual: [T, Hv, Wv, Dv]`,
    /// `audio: [T, Ha, Wa, Da]`. Returns logits `[N]` and, when the network
    /// has attention, scores `[K, T]` with the fused feature.
    pub fn forward(
        &self,
        visual: &Tensor,
        audio: &Tensor,
        t_actual: usize,
    ) -> Result<(Tensor, Option<AttentionOutput>)> {
        let add_batch = |x: &Tensor| {
            let mut d = vec![1];
            d.extend_from_slice(x.dims());
            x.reshape(d)
        };
        let batch = BatchInput {
            visual: add_batch(visual)?,
            audio: add_batch(audio)?,
            t_actual: vec![t_actual],
        };
        let mut tape = Tape::new();
        let p = self.bind_constants(&mut tape);
        let out = self.forward_tape(&mut tape, &p, &batch, Mode::Eval)?;
        let n = self.config.num_classes;
        let logits = tape.value(out.logits).reshape(vec![n])?;
        let att = match out.scores(&tape) {
            Some(s) => {
                let (k, t) = (s.dims()[1], s.dims()[2]);
                let fused = tape
                    .value(out.fused)
                    .reshape(vec![self.config.fused_width()])?;
                Some(AttentionOutput {
                    scores: s.reshape(vec![k, t])?,
                    fused,
                })
            }
            None => None,
        };
        Ok((logits, att))
    }

    /// Binds parameters as constants (no gradient bookkeeping).
    fn bind_constants(&self, tape: &mut Tape) -> Bound {
        Bound::from_vars(
            self.store
                .params()
                .iter()
                .map(|p| tape.constant(p.value.clone()))
                .collect(),
        )
    }

    /// Eval-mode logits `[B, N]` for a batch.
    pub fn logits(&self, batch: &BatchInput) -> Result<Tensor> {
        let mut tape = Tape::new();
        let p = self.bind_constants(&mut tape);
        let out = self.forward_tape(&mut tape, &p, batch, Mode::Eval)?;
        Ok(tape.value(out.logits).clone())
    }

    /// Argmax class per record, ties to the lowest index. Eval mode.
    pub fn predict(&self, records: &[&FeatureRecord]) -> Result<Vec<usize>> {
        const CHUNK: usize = 64;
        let mut out = Vec::with_capacity(records.len());
        for chunk in records.chunks(CHUNK) {
            let batch = BatchInput::from_records(chunk, &self.config)?;
            let logits = self.logits(&batch)?;
            out.extend(logits.data().chunks(self.config.num_classes).map(argmax));
        }
        Ok(out)
    }

    /// Attention scores of one record as `(modality, clip, score)` rows.
    pub fn export_attention(&self, record: &FeatureRecord) -> Result<Vec<AttentionRow>> {
        if self.config.attention == AttentionKind::None {
            return Err(Error::Unsupported(
                "attention export needs a network with attention".into(),
            ));
        }
        let batch = BatchInput::from_records(&[record], &self.config)?;
        let mut tape = Tape::new();
        let p = self.bind_constants(&mut tape);
        let out = self.forward_tape(&mut tape, &p, &batch, Mode::Eval)?;
        let scores = out.scores(&tape).expect("attention network returns scores");
        let t = self.config.max_clips;
        let mut rows = Vec::with_capacity(scores.len());
        for (ki, &m) in self.config.modalities.active().iter().enumerate() {
            for clip in 0..t {
                rows.push(AttentionRow {
                    modality: m,
                    clip,
                    score: scores.data()[ki * t + clip],
                });
            }
        }
        Ok(rows)
    }

    /// Parameters followed by batch-norm running statistics and update counts.
    pub fn state(&self) -> NetState {
        let mut s: NetState = self
            .store
            .params()
            .iter()
            .map(|p| (p.name.clone(), p.value.clone()))
            .collect();
        for path in &self.paths {
            let n = path.modality.name();
            s.push((
                format!("{n}.bn.running_mean"),
                path.proj.bn.running_mean.clone(),
            ));
            s.push((
                format!("{n}.bn.running_var"),
                path.proj.bn.running_var.clone(),
            ));
            s.push((
                format!("{n}.bn.updates"),
                Tensor::scalar(path.proj.bn.updates as f64),
            ));
        }
        s
    }

    /// Restores a state produced by [`MafNet::state`] of an identically
    /// configured network. Names and shapes must match exactly.
    pub fn load_state(&mut self, state: &[(String, Tensor)]) -> Result<()> {
        let expected = self.state();
        if state.len() != expected.len() {
            return Err(Error::Config(format!(
                "state has {} tensors, network expects {}",
                state.len(),
                expected.len()
            )));
        }
        for ((name, t), (want_name, want)) in state.iter().zip(&expected) {
            if name != want_name {
                return Err(Error::Config(format!(
                    "state tensor {name} where {want_name} was expected"
                )));
            }
            if t.dims() != want.dims() {
                return dim_err("load_state", t.dims(), want.dims());
            }
        }
        let np = self.store.len();
        for (param, (_, t)) in self.store.params_mut().iter_mut().zip(state) {
            param.value = t.clone();
        }
        for (i, path) in self.paths.iter_mut().enumerate() {
            let bn = &state[np + 3 * i..np + 3 * i + 3];
            let updates = bn[2].1.item();
            if !(updates >= 0.0 && updates.fract() == 0.0) {
                return Err(Error::Config(format!(
                    "{} must be a non-negative integer, got {updates}",
                    bn[2].0
                )));
            }
            path.proj.bn.running_mean = bn[0].1.clone();
            path.proj.bn.running_var = bn[1].1.clone();
            path.proj.bn.updates = updates as u64;
        }
        Ok(())
    }
}

/// Index of the largest value, ties to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}
