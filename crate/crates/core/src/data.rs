//! Feature records, the "MAFF" on-disk format, zero padding, a synthetic
//! generator with planted (modality, clip) signal, and stratified splits.
//!
//! Byte layout (little-endian, no padding):
//! `"MAFF" | version u16 | K u16 | T_max u16 | num_classes u16 | count u32 |
//! K x (H u16, W u16, D u32) | count x (label u32, t_actual u16,
//! K x t_actual*H*W*D f32 in (t, h, w, d) order)`.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::model::Modality;
use crate::rng::seeded;
use crate::tensor::Tensor;

pub const DATASET_MAGIC: &[u8; 4] = b"MAFF";
pub const DATASET_VERSION: u16 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureRecord {
    pub label: usize,
    pub t_actual: usize,
    /// One `[t_actual, H, W, D]` tensor per modality (visual first).
    pub maps: Vec<Tensor>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetHeader {
    /// `(H, W, D)` per modality.
    pub shapes: Vec<[usize; 3]>,
    pub t_max: usize,
    pub num_classes: usize,
    pub record_count: usize,
}

impl DatasetHeader {
    /// DenseNet visual maps and VGGish audio maps, ten clips.
    pub fn full_scale(num_classes: usize, record_count: usize) -> Self {
        DatasetHeader {
            shapes: vec![[7, 7, 1920], [12, 8, 512]],
            t_max: 10,
            num_classes,
            record_count,
        }
    }

    pub fn num_modalities(&self) -> usize {
        self.shapes.len()
    }

    fn check_record(&self, r: &FeatureRecord) -> Result<()> {
        if r.label >= self.num_classes {
            return Err(Error::Data(format!(
                "label {} out of range for {} classes",
                r.label, self.num_classes
            )));
        }
        if r.t_actual == 0 || r.t_actual > self.t_max {
            return Err(Error::Data(format!(
                "t_actual {} outside 1..={}",
                r.t_actual, self.t_max
            )));
        }
        if r.maps.len() != self.shapes.len() {
            return Err(Error::Data(format!(
                "record has {} modalities, header has {}",
                r.maps.len(),
                self.shapes.len()
            )));
        }
        for (m, s) in r.maps.iter().zip(&self.shapes) {
            let want = [r.t_actual, s[0], s[1], s[2]];
            if m.dims() != want {
                return dim_err("dataset record", m.dims(), &want);
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub header: DatasetHeader,
    pub records: Vec<FeatureRecord>,
}

impl Dataset {
    pub fn new(header: DatasetHeader, records: Vec<FeatureRecord>) -> Result<Self> {
        if header.record_count != records.len() {
            return Err(Error::Data(format!(
                "header declares {} records, {} given",
                header.record_count,
                records.len()
            )));
        }
        for r in &records {
            header.check_record(r)?;
        }
        Ok(Dataset { header, records })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let records: Vec<_> = indices.iter().map(|&i| self.records[i].clone()).collect();
        Dataset {
            header: DatasetHeader {
                record_count: records.len(),
                ..self.header.clone()
            },
            records,
        }
    }

    pub fn labels(&self) -> Vec<usize> {
        self.records.iter().map(|r| r.label).collect()
    }
}

fn fit<T: TryFrom<usize>>(v: usize, what: &str) -> Result<T> {
    T::try_from(v).map_err(|_| Error::Data(format!("{what} {v} does not fit the file format")))
}

pub fn encode_dataset(ds: &Dataset) -> Result<Vec<u8>> {
    let h = &ds.header;
    if h.record_count != ds.records.len() {
        return Err(Error::Data(
            "header record count disagrees with records".into(),
        ));
    }
    let mut out = Vec::new();
    out.extend_from_slice(DATASET_MAGIC);
    out.extend_from_slice(&DATASET_VERSION.to_le_bytes());
    out.extend_from_slice(&fit::<u16>(h.num_modalities(), "K")?.to_le_bytes());
    out.extend_from_slice(&fit::<u16>(h.t_max, "T_max")?.to_le_bytes());
    out.extend_from_slice(&fit::<u16>(h.num_classes, "num_classes")?.to_le_bytes());
    out.extend_from_slice(&fit::<u32>(h.record_count, "record count")?.to_le_bytes());
    for s in &h.shapes {
        out.extend_from_slice(&fit::<u16>(s[0], "H")?.to_le_bytes());
        out.extend_from_slice(&fit::<u16>(s[1], "W")?.to_le_bytes());
        out.extend_from_slice(&fit::<u32>(s[2], "D")?.to_le_bytes());
    }
    for r in &ds.records {
        h.check_record(r)?;
        out.extend_from_slice(&fit::<u32>(r.label, "label")?.to_le_bytes());
        out.extend_from_slice(&fit::<u16>(r.t_actual, "t_actual")?.to_le_bytes());
        for m in &r.maps {
            for &x in m.data() {
                let f = x as f32;
                if !f.is_finite() {
                    return Err(Error::Data(format!(
                        "value {x} is not representable as f32"
                    )));
                }
                out.extend_from_slice(&f.to_le_bytes());
            }
        }
    }
    Ok(out)
}

/// Little-endian reader that reports the byte offset of every failure.
pub(crate) struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub(crate) fn new(bytes: &'a [u8]) -> Self {
        Reader { bytes, pos: 0 }
    }

    pub(crate) fn offset(&self) -> u64 {
        self.pos as u64
    }

    pub(crate) fn fail<T>(&self, message: impl Into<String>) -> Result<T> {
        Err(Error::Format {
            offset: self.offset(),
            message: message.into(),
        })
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return self.fail(format!(
                "truncated: need {n} bytes, {} remain",
                self.bytes.len() - self.pos
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub(crate) fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub(crate) fn finish(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return self.fail(format!("{} trailing bytes", self.bytes.len() - self.pos));
        }
        Ok(())
    }
}

pub fn decode_dataset(bytes: &[u8]) -> Result<Dataset> {
    let mut r = Reader::new(bytes);
    if r.take(4)? != DATASET_MAGIC {
        return Err(Error::Format {
            offset: 0,
            message: "bad magic, expected MAFF".into(),
        });
    }
    let at = r.offset();
    let version = r.u16()?;
    if version != DATASET_VERSION {
        return Err(Error::Format {
            offset: at,
            message: format!("unsupported version {version}"),
        });
    }
    let at = r.offset();
    let k = r.u16()? as usize;
    let t_max = r.u16()? as usize;
    let num_classes = r.u16()? as usize;
    let count = r.u32()? as usize;
    if k == 0 || t_max == 0 || num_classes == 0 {
        return Err(Error::Format {
            offset: at,
            message: "K, T_max and num_classes must be positive".into(),
        });
    }
    let mut shapes = Vec::with_capacity(k);
    for _ in 0..k {
        let at = r.offset();
        let s = [r.u16()? as usize, r.u16()? as usize, r.u32()? as usize];
        if s.contains(&0) {
            return Err(Error::Format {
                offset: at,
                message: format!("zero extent in map shape {s:?}"),
            });
        }
        shapes.push(s);
    }
    let header = DatasetHeader {
        shapes,
        t_max,
        num_classes,
        record_count: count,
    };
    let mut records = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let at = r.offset();
        let label = r.u32()? as usize;
        let t_actual = r.u16()? as usize;
        if label >= num_classes || t_actual == 0 || t_actual > t_max {
            return Err(Error::Format {
                offset: at,
                message: format!("record with label {label}, t_actual {t_actual} is out of range"),
            });
        }
        let mut maps = Vec::with_capacity(k);
        for s in &header.shapes {
            let n = t_actual * s[0] * s[1] * s[2];
            let raw = r.take(n * 4)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                .collect();
            maps.push(Tensor::new(vec![t_actual, s[0], s[1], s[2]], data)?);
        }
        records.push(FeatureRecord {
            label,
            t_actual,
            maps,
        });
    }
    r.finish()?;
    Ok(Dataset { header, records })
}

pub fn save_dataset(ds: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode_dataset(ds)?)?;
    Ok(())
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    decode_dataset(&fs::read(path)?)
}

/// Pads every modality to `[t_max, H, W, D]` with exact zeros.
pub fn zero_pad(record: &FeatureRecord, t_max: usize) -> Result<(Vec<Tensor>, usize)> {
    if record.t_actual > t_max {
        return Err(Error::Data(format!(
            "t_actual {} exceeds T_max {t_max}",
            record.t_actual
        )));
    }
    let padded = record
        .maps
        .iter()
        .map(|m| {
            let d = m.dims();
            let mut data = m.data().to_vec();
            data.resize(t_max * d[1] * d[2] * d[3], 0.0);
            Tensor::new(vec![t_max, d[1], d[2], d[3]], data)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((padded, record.t_actual))
}

/// A signal location: channel `channel` of clip `clip` in `modality`, spread
/// uniformly over H x W and normalized to unit norm.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlantedCell {
    pub modality: Modality,
    pub clip: usize,
    pub channel: usize,
}

fn one() -> f64 {
    1.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub num_classes: usize,
    /// Clips per sample.
    pub t: usize,
    pub visual_shape: [usize; 3],
    pub audio_shape: [usize; 3],
    /// Per class, the cells carrying that class's signal.
    pub planted: Vec<Vec<PlantedCell>>,
    pub sigma: f64,
    #[serde(default = "one")]
    pub amplitude: f64,
    pub samples_per_class: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    /// Four classes, each with a single planted cell at a distinct
    /// (modality, clip) and channel.
    fn default() -> Self {
        let cell = |modality, clip, channel| {
            vec![PlantedCell {
                modality,
                clip,
                channel,
            }]
        };
        SyntheticSpec {
            num_classes: 4,
            t: 6,
            visual_shape: [2, 2, 16],
            audio_shape: [3, 2, 8],
            planted: vec![
                cell(Modality::Visual, 1, 0),
                cell(Modality::Audio, 4, 1),
                cell(Modality::Visual, 3, 2),
                cell(Modality::Audio, 0, 3),
            ],
            sigma: 0.1,
            amplitude: 1.0,
            samples_per_class: 100,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    /// Four classes whose label is split across modalities: the visual cell
    /// encodes bit `c / 2`, the audio cell bit `c % 2`. Either modality alone
    /// can tell apart only two of the four classes.
    pub fn split_modalities(sigma: f64, samples_per_class: usize, seed: u64) -> Self {
        let planted = (0..4)
            .map(|c| {
                vec![
                    PlantedCell {
                        modality: Modality::Visual,
                        clip: 2,
                        channel: c / 2,
                    },
                    PlantedCell {
                        modality: Modality::Audio,
                        clip: 2,
                        channel: c % 2,
                    },
                ]
            })
            .collect();
        SyntheticSpec {
            planted,
            sigma,
            samples_per_class,
            seed,
            ..SyntheticSpec::default()
        }
    }

    fn shape(&self, m: Modality) -> [usize; 3] {
        match m {
            Modality::Visual => self.visual_shape,
            Modality::Audio => self.audio_shape,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.num_classes < 2 {
            return bad("synthetic data needs at least 2 classes".into());
        }
        if self.t == 0 || self.samples_per_class == 0 {
            return bad("t and samples_per_class must be positive".into());
        }
        if self.visual_shape.contains(&0) || self.audio_shape.contains(&0) {
            return bad("map extents must be positive".into());
        }
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return bad(format!("sigma must be positive, got {}", self.sigma));
        }
        if self.planted.len() != self.num_classes {
            return bad(format!(
                "{} planted-cell lists for {} classes",
                self.planted.len(),
                self.num_classes
            ));
        }
        for (c, cells) in self.planted.iter().enumerate() {
            if cells.is_empty() {
                return bad(format!("class {c} has no planted cell"));
            }
            for cell in cells {
                if cell.clip >= self.t || cell.channel >= self.shape(cell.modality)[2] {
                    return bad(format!("class {c} planted cell {cell:?} is out of range"));
                }
            }
            if self.planted[..c].contains(cells) {
                return bad(format!(
                    "class {c} shares its planted cells with another class"
                ));
            }
        }
        Ok(())
    }

    pub fn header(&self) -> DatasetHeader {
        DatasetHeader {
            shapes: vec![self.visual_shape, self.audio_shape],
            t_max: self.t,
            num_classes: self.num_classes,
            record_count: self.num_classes * self.samples_per_class,
        }
    }
}

/// Draws a balanced dataset (labels cycle `0, 1, .., N-1`). Values are
/// rounded to f32 so the result survives a save/load round trip exactly.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = seeded(spec.seed);
    let noise = Normal::new(0.0, spec.sigma).map_err(|e| Error::Config(e.to_string()))?;
    let n = spec.num_classes * spec.samples_per_class;
    let mut records = Vec::with_capacity(n);
    for i in 0..n {
        let label = i % spec.num_classes;
        let mut maps = Vec::with_capacity(2);
        for m in [Modality::Visual, Modality::Audio] {
            let [h, w, d] = spec.shape(m);
            let clip = h * w * d;
            let mut data: Vec<f64> = (0..spec.t * clip).map(|_| noise.sample(&mut rng)).collect();
            let level = spec.amplitude / ((h * w) as f64).sqrt();
            for cell in spec.planted[label].iter().filter(|c| c.modality == m) {
                for pos in 0..h * w {
                    data[cell.clip * clip + pos * d + cell.channel] += level;
                }
            }
            for x in &mut data {
                *x = *x as f32 as f64;
            }
            maps.push(Tensor::new(vec![spec.t, h, w, d], data)?);
        }
        records.push(FeatureRecord {
            label,
            t_actual: spec.t,
            maps,
        });
    }
    Dataset::new(spec.header(), records)
}

/// Per-class proportional split into (train, val, test) index lists, each
/// sorted ascending. `fractions` are (train, val, test); val and test counts
/// are rounded per class and train takes the remainder.
pub fn stratified_split(
    labels: &[usize],
    fractions: [f64; 3],
    seed: u64,
) -> Result<(Vec<usize>, Vec<usize>, Vec<usize>)> {
    if fractions.iter().any(|&f| !(0.0..=1.0).contains(&f))
        || (fractions.iter().sum::<f64>() - 1.0).abs() > 1e-9
    {
        return Err(Error::Config(format!(
            "split fractions {fractions:?} must be in [0, 1] and sum to 1"
        )));
    }
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &l) in labels.iter().enumerate() {
        by_class.entry(l).or_default().push(i);
    }
    let mut rng = seeded(seed);
    let (mut train, mut val, mut test) = (Vec::new(), Vec::new(), Vec::new());
    for (class, mut idx) in by_class {
        if idx.len() < 3 {
            return Err(Error::Data(format!(
                "class {class} has {} samples, at least 3 are needed to split",
                idx.len()
            )));
        }
        idx.shuffle(&mut rng);
        let n = idx.len() as f64;
        let n_val = (fractions[1] * n).round() as usize;
        let n_test = ((fractions[2] * n).round() as usize).min(idx.len() - n_val);
        val.extend_from_slice(&idx[..n_val]);
        test.extend_from_slice(&idx[n_val..n_val + n_test]);
        train.extend_from_slice(&idx[n_val + n_test..]);
    }
    train.sort_unstable();
    val.sort_unstable();
    test.sort_unstable();
    Ok((train, val, test))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec() -> SyntheticSpec {
        SyntheticSpec {
            samples_per_class: 3,
            ..SyntheticSpec::default()
        }
    }

    #[test]
    fn round_trip_is_bitwise() {
        let ds = generate_synthetic(&small_spec()).unwrap();
        let bytes = encode_dataset(&ds).unwrap();
        let back = decode_dataset(&bytes).unwrap();
        assert_eq!(back, ds);
        assert_eq!(encode_dataset(&back).unwrap(), bytes);
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.maff");
        let ds = generate_synthetic(&small_spec()).unwrap();
        save_dataset(&ds, &path).unwrap();
        assert_eq!(load_dataset(&path).unwrap(), ds);
    }

    #[test]
    fn byte_layout() {
        let header = DatasetHeader {
            shapes: vec![[1, 1, 2]],
            t_max: 3,
            num_classes: 2,
            record_count: 1,
        };
        let rec = FeatureRecord {
            label: 1,
            t_actual: 1,
            maps: vec![Tensor::new(vec![1, 1, 1, 2], vec![1.0, -2.0]).unwrap()],
        };
        let bytes = encode_dataset(&Dataset::new(header, vec![rec]).unwrap()).unwrap();
        let mut want = b"MAFF".to_vec();
        for v in [1u16, 1, 3, 2] {
            want.extend_from_slice(&v.to_le_bytes());
        }
        want.extend_from_slice(&1u32.to_le_bytes());
        want.extend_from_slice(&1u16.to_le_bytes());
        want.extend_from_slice(&1u16.to_le_bytes());
        want.extend_from_slice(&2u32.to_le_bytes());
        want.extend_from_slice(&1u32.to_le_bytes());
        want.extend_from_slice(&1u16.to_le_bytes());
        want.extend_from_slice(&1.0f32.to_le_bytes());
        want.extend_from_slice(&(-2.0f32).to_le_bytes());
        assert_eq!(bytes, want);
    }

    #[test]
    fn truncation_reports_offset() {
        let ds = generate_synthetic(&small_spec()).unwrap();
        let bytes = encode_dataset(&ds).unwrap();
        for cut in [0, 3, 5, 17, bytes.len() / 2, bytes.len() - 1] {
            match decode_dataset(&bytes[..cut]) {
                Err(Error::Format { offset, .. }) => assert!(offset <= cut as u64),
                other => panic!("cut {cut}: expected format error, got {other:?}"),
            }
        }
    }

    #[test]
    fn bad_magic_and_version() {
        let ds = generate_synthetic(&small_spec()).unwrap();
        let mut bytes = encode_dataset(&ds).unwrap();
        bytes[4] = 9;
        assert!(matches!(
            decode_dataset(&bytes),
            Err(Error::Format { offset: 4, .. })
        ));
        bytes[0] = b'X';
        assert!(matches!(
            decode_dataset(&bytes),
            Err(Error::Format { offset: 0, .. })
        ));
    }

    #[test]
    fn trailing_bytes_rejected() {
        let ds = generate_synthetic(&small_spec()).unwrap();
        let mut bytes = encode_dataset(&ds).unwrap();
        bytes.push(0);
        assert!(matches!(decode_dataset(&bytes), Err(Error::Format { .. })));
    }

    #[test]
    fn full_scale_header_round_trips() {
        let h = DatasetHeader::full_scale(28, 1);
        assert_eq!(h.shapes, vec![[7, 7, 1920], [12, 8, 512]]);
        assert_eq!(h.t_max, 10);
        let rec = FeatureRecord {
            label: 27,
            t_actual: 1,
            maps: vec![
                Tensor::zeros(vec![1, 7, 7, 1920]).unwrap(),
                Tensor::zeros(vec![1, 12, 8, 512]).unwrap(),
            ],
        };
        let ds = Dataset::new(h, vec![rec]).unwrap();
        assert_eq!(decode_dataset(&encode_dataset(&ds).unwrap()).unwrap(), ds);
    }

    fn record(t_actual: usize) -> FeatureRecord {
        let data = (0..t_actual * 8).map(|i| i as f64 + 1.0).collect();
        FeatureRecord {
            label: 0,
            t_actual,
            maps: vec![Tensor::new(vec![t_actual, 2, 2, 2], data).unwrap()],
        }
    }

    #[test]
    fn zero_pad_appends_zero_clips() {
        let r = record(7);
        let (p, t) = zero_pad(&r, 10).unwrap();
        assert_eq!(t, 7);
        assert_eq!(p[0].dims(), &[10, 2, 2, 2]);
        assert_eq!(&p[0].data()[..56], r.maps[0].data());
        assert!(p[0].data()[56..].iter().all(|&x| x == 0.0));
        assert_eq!(p[0].data()[56..].iter().sum::<f64>(), 0.0);
    }

    #[test]
    fn zero_pad_identity_and_error() {
        let r = record(4);
        assert_eq!(zero_pad(&r, 4).unwrap().0[0], r.maps[0]);
        assert!(matches!(zero_pad(&r, 3), Err(Error::Data(_))));
    }

    #[test]
    fn synthetic_is_deterministic_and_balanced() {
        let a = encode_dataset(&generate_synthetic(&small_spec()).unwrap()).unwrap();
        let b = encode_dataset(&generate_synthetic(&small_spec()).unwrap()).unwrap();
        assert_eq!(a, b);
        let ds = generate_synthetic(&small_spec()).unwrap();
        for c in 0..4 {
            assert_eq!(ds.labels().iter().filter(|&&l| l == c).count(), 3);
        }
    }

    #[test]
    fn noiseless_limit_is_separable_by_planted_cells() {
        let spec = SyntheticSpec {
            sigma: 1e-9,
            samples_per_class: 5,
            ..SyntheticSpec::default()
        };
        let ds = generate_synthetic(&spec).unwrap();
        // linear read-out: the signal energy at each class's planted cell
        for r in &ds.records {
            let energy: Vec<f64> = spec
                .planted
                .iter()
                .map(|cells| {
                    cells
                        .iter()
                        .map(|c| {
                            let m = &r.maps[c.modality.index()];
                            let d = m.dims();
                            let clip = d[1] * d[2] * d[3];
                            (0..d[1] * d[2])
                                .map(|p| m.data()[c.clip * clip + p * d[3] + c.channel])
                                .sum::<f64>()
                        })
                        .sum()
                })
                .collect();
            assert_eq!(crate::model::argmax(&energy), r.label);
        }
    }

    #[test]
    fn class_mean_recovers_signal_direction() {
        let spec = SyntheticSpec {
            sigma: 0.1,
            samples_per_class: 500,
            ..SyntheticSpec::default()
        };
        let ds = generate_synthetic(&spec).unwrap();
        for (c, cells) in spec.planted.iter().enumerate() {
            let cell = &cells[0];
            let [h, w, d] = spec.shape(cell.modality);
            let clip = h * w * d;
            let cell_map = |r: &FeatureRecord| {
                r.maps[cell.modality.index()].data()[cell.clip * clip..(cell.clip + 1) * clip]
                    .to_vec()
            };
            let mut class_mean = vec![0.0; clip];
            let mut global = vec![0.0; clip];
            let mut nc = 0.0;
            for r in &ds.records {
                let v = cell_map(r);
                for i in 0..clip {
                    global[i] += v[i] / ds.len() as f64;
                    if r.label == c {
                        class_mean[i] += v[i];
                    }
                }
                if r.label == c {
                    nc += 1.0;
                }
            }
            let diff: Vec<f64> = (0..clip).map(|i| class_mean[i] / nc - global[i]).collect();
            let mut dir = vec![0.0; clip];
            for p in 0..h * w {
                dir[p * d + cell.channel] = 1.0 / ((h * w) as f64).sqrt();
            }
            let dot: f64 = diff.iter().zip(&dir).map(|(a, b)| a * b).sum();
            let norm = diff.iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!(dot / norm >= 0.99, "class {c}: cosine {}", dot / norm);
        }
    }

    #[test]
    fn spec_validation() {
        let s = SyntheticSpec {
            sigma: 0.0,
            ..SyntheticSpec::default()
        };
        assert!(s.validate().is_err());
        let mut s = SyntheticSpec::default();
        s.planted[1] = s.planted[0].clone();
        assert!(s.validate().is_err());
        let mut s = SyntheticSpec::default();
        s.planted[0][0].clip = 6;
        assert!(s.validate().is_err());
        SyntheticSpec::split_modalities(0.1, 3, 0)
            .validate()
            .unwrap();
    }

    #[test]
    fn split_proportions() {
        let labels: Vec<usize> = (0..400).map(|i| i % 4).collect();
        let (tr, va, te) = stratified_split(&labels, [0.7, 0.15, 0.15], 3).unwrap();
        for c in 0..4 {
            let count = |s: &[usize]| s.iter().filter(|&&i| labels[i] == c).count();
            assert_eq!((count(&tr), count(&va), count(&te)), (70, 15, 15));
        }
        assert_eq!(
            stratified_split(&labels, [0.7, 0.15, 0.15], 3).unwrap(),
            (tr.clone(), va.clone(), te.clone())
        );
        let mut all = [tr, va, te].concat();
        all.sort_unstable();
        assert_eq!(all, (0..400).collect::<Vec<_>>());
    }

    #[test]
    fn split_rejects_small_class_and_bad_fractions() {
        let labels = [0, 0, 0, 1, 1];
        assert!(matches!(
            stratified_split(&labels, [0.7, 0.15, 0.15], 0),
            Err(Error::Data(_))
        ));
        assert!(matches!(
            stratified_split(&[0, 0, 0], [0.5, 0.6, 0.0], 0),
            Err(Error::Config(_))
        ));
    }
}
