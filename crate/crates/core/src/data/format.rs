//! The `AVB1` binary bag file.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "AVB1" | version u16 | C u16 | C × i8 labels (-1/+1)
//! M u32 | d_v u32 | T u32 | d_a u32
//! M·d_v f32 visual | T·d_a f32 audio
//! [flag u8; if 1: for each class: visual (u32 count, count × u32), audio (u32 count, count × u32)]
//! ```
//!
//! The ground-truth block is optional on read: a file ending right after the
//! audio features carries no ground truth.

use std::fs;
use std::path::Path;

use ndarray::Array2;

use super::{FeatureMatrix, GroundTruth, LabelVector, Modality, VideoBag};
use crate::error::{Error, FormatError, Result};

pub const BAG_MAGIC: [u8; 4] = *b"AVB1";
pub const BAG_VERSION: u16 = 1;

pub(crate) struct ByteWriter {
    buf: Vec<u8>,
}

impl ByteWriter {
    pub(crate) fn new() -> Self {
        Self { buf: Vec::new() }
    }

    pub(crate) fn bytes(&mut self, b: &[u8]) {
        self.buf.extend_from_slice(b);
    }

    pub(crate) fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }

    pub(crate) fn i8(&mut self, v: i8) {
        self.buf.push(v as u8);
    }

    pub(crate) fn u16(&mut self, v: u16) {
        self.bytes(&v.to_le_bytes());
    }

    pub(crate) fn u32(&mut self, v: u32) {
        self.bytes(&v.to_le_bytes());
    }

    pub(crate) fn f32s<'a>(&mut self, values: impl IntoIterator<Item = &'a f32>) {
        for v in values {
            self.bytes(&v.to_le_bytes());
        }
    }

    pub(crate) fn finish(self) -> Vec<u8> {
        self.buf
    }
}

pub(crate) struct ByteReader<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    pub(crate) fn new(data: &'a [u8]) -> Self {
        Self { data, pos: 0 }
    }

    pub(crate) fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8], FormatError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&end| end <= self.data.len())
            .ok_or(FormatError::Truncated(what))?;
        let out = &self.data[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    pub(crate) fn remaining(&self) -> usize {
        self.data.len() - self.pos
    }

    pub(crate) fn u8(&mut self, what: &'static str) -> Result<u8, FormatError> {
        Ok(self.take(1, what)?[0])
    }

    pub(crate) fn u16(&mut self, what: &'static str) -> Result<u16, FormatError> {
        let b = self.take(2, what)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    pub(crate) fn u32(&mut self, what: &'static str) -> Result<u32, FormatError> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    pub(crate) fn magic(&mut self, expected: [u8; 4]) -> Result<(), FormatError> {
        let b = self.take(4, "magic")?;
        let found = [b[0], b[1], b[2], b[3]];
        if found != expected {
            return Err(FormatError::BadMagic { found, expected });
        }
        Ok(())
    }

    /// Reads `count` finite f32 values.
    pub(crate) fn f32s(&mut self, count: usize, what: &'static str) -> Result<Vec<f32>, FormatError> {
        let len = count.checked_mul(4).ok_or(FormatError::Truncated(what))?;
        let raw = self.take(len, what)?;
        raw.chunks_exact(4)
            .enumerate()
            .map(|(index, b)| {
                let v = f32::from_le_bytes([b[0], b[1], b[2], b[3]]);
                if v.is_finite() {
                    Ok(v)
                } else {
                    Err(FormatError::NonFinite {
                        section: what,
                        index,
                    })
                }
            })
            .collect()
    }
}

fn dim(value: usize, what: &str) -> Result<u32> {
    u32::try_from(value).map_err(|_| Error::invalid(format!("{what} {value} exceeds u32")))
}

pub fn encode_bag(bag: &VideoBag) -> Result<Vec<u8>> {
    bag.validate()?;
    let c = u16::try_from(bag.num_classes())
        .map_err(|_| Error::invalid("class count exceeds u16"))?;
    let mut w = ByteWriter::new();
    w.bytes(&BAG_MAGIC);
    w.u16(BAG_VERSION);
    w.u16(c);
    for &l in bag.labels.values() {
        w.i8(l);
    }
    w.u32(dim(bag.visual.rows(), "M")?);
    w.u32(dim(bag.visual.cols(), "d_v")?);
    w.u32(dim(bag.audio.rows(), "T")?);
    w.u32(dim(bag.audio.cols(), "d_a")?);
    w.f32s(bag.visual.as_array().iter());
    w.f32s(bag.audio.as_array().iter());
    match &bag.ground_truth {
        None => w.u8(0),
        Some(gt) => {
            w.u8(1);
            for class in 0..bag.num_classes() {
                for modality in Modality::BOTH {
                    let indices = &gt.for_modality(modality)[class];
                    w.u32(dim(indices.len(), "ground-truth count")?);
                    for &i in indices {
                        w.u32(i);
                    }
                }
            }
        }
    }
    Ok(w.finish())
}

/// Decodes a bag. The bag id is not part of the file; it comes from the
/// manifest.
pub fn decode_bag(id: &str, bytes: &[u8]) -> Result<VideoBag> {
    let mut r = ByteReader::new(bytes);
    r.magic(BAG_MAGIC)?;
    let version = r.u16("version")?;
    if version != BAG_VERSION {
        return Err(FormatError::UnsupportedVersion(version).into());
    }
    let c = r.u16("class count")? as usize;
    if c == 0 {
        return Err(FormatError::DimensionMismatch("zero classes".into()).into());
    }
    let labels: Vec<i8> = r.take(c, "labels")?.iter().map(|&b| b as i8).collect();
    let labels = LabelVector::new(labels)?;
    let m = r.u32("M")? as usize;
    let d_v = r.u32("d_v")? as usize;
    let t = r.u32("T")? as usize;
    let d_a = r.u32("d_a")? as usize;
    for (value, name) in [(m, "M"), (d_v, "d_v"), (t, "T"), (d_a, "d_a")] {
        if value == 0 {
            return Err(FormatError::DimensionMismatch(format!("{name} is zero")).into());
        }
    }
    let visual = r.f32s(
        m.checked_mul(d_v).ok_or(FormatError::Truncated("visual features"))?,
        "visual features",
    )?;
    let audio = r.f32s(
        t.checked_mul(d_a).ok_or(FormatError::Truncated("audio features"))?,
        "audio features",
    )?;
    let ground_truth = if r.remaining() == 0 {
        None
    } else {
        match r.u8("ground-truth flag")? {
            0 => None,
            1 => {
                let mut gt = GroundTruth::empty(c);
                for class in 0..c {
                    for modality in Modality::BOTH {
                        let count = r.u32("ground-truth count")? as usize;
                        let len = if modality == Modality::Visual { m } else { t };
                        if count > len {
                            return Err(FormatError::DimensionMismatch(format!(
                                "{count} planted {modality} indices for {len} proposals"
                            ))
                            .into());
                        }
                        let mut indices = Vec::with_capacity(count);
                        for _ in 0..count {
                            let index = r.u32("ground-truth index")?;
                            if index as usize >= len {
                                return Err(FormatError::IndexOutOfRange { index, len }.into());
                            }
                            indices.push(index);
                        }
                        gt.for_modality_mut(modality)[class] = indices;
                    }
                }
                Some(gt)
            }
            flag => return Err(FormatError::InvalidFlag(flag).into()),
        }
    };
    if r.remaining() != 0 {
        return Err(FormatError::TrailingBytes(r.remaining()).into());
    }
    let visual = FeatureMatrix::new(
        Array2::from_shape_vec((m, d_v), visual).expect("length checked on read"),
    )?;
    let audio = FeatureMatrix::new(
        Array2::from_shape_vec((t, d_a), audio).expect("length checked on read"),
    )?;
    let bag = VideoBag {
        id: id.to_string(),
        visual,
        audio,
        labels,
        ground_truth,
    };
    bag.validate()?;
    Ok(bag)
}

pub fn write_bag(bag: &VideoBag, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_bag(bag)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Reads a bag file; the id is taken from the file stem.
pub fn read_bag(path: impl AsRef<Path>) -> Result<VideoBag> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    decode_bag(&id, &bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn tiny_bag() -> VideoBag {
        VideoBag::new(
            "tiny",
            FeatureMatrix::from_shape_vec(1, 1, vec![0.0]).unwrap(),
            FeatureMatrix::from_shape_vec(1, 1, vec![0.0]).unwrap(),
            LabelVector::new(vec![1]).unwrap(),
        )
    }

    #[test]
    fn tiny_bag_round_trips() {
        let bag = tiny_bag();
        let bytes = encode_bag(&bag).unwrap();
        assert_eq!(&bytes[..4], b"AVB1");
        assert_eq!(decode_bag("tiny", &bytes).unwrap(), bag);
    }

    #[test]
    fn full_scale_bag_accepted() {
        // 10 frames x 10 regions, 20 audio segments, caffenet RoI / vggish widths.
        let (m, d_v, t, d_a) = (100, 9216, 20, 128);
        let bag = VideoBag::new(
            "full",
            FeatureMatrix::from_shape_vec(m, d_v, (0..m * d_v).map(|i| (i % 7) as f32).collect())
                .unwrap(),
            FeatureMatrix::from_shape_vec(t, d_a, vec![0.25; t * d_a]).unwrap(),
            LabelVector::from_positives(17, &[3, 9]).unwrap(),
        );
        let back = decode_bag("full", &encode_bag(&bag).unwrap()).unwrap();
        assert_eq!(back.visual.rows(), 100);
        assert_eq!(back.audio.cols(), 128);
        assert_eq!(back, bag);
    }

    #[test]
    fn nan_feature_rejected() {
        let mut bytes = encode_bag(&tiny_bag()).unwrap();
        // header: 4 magic + 2 version + 2 C + 1 label + 16 dims
        let offset = 4 + 2 + 2 + 1 + 16;
        bytes[offset..offset + 4].copy_from_slice(&f32::NAN.to_le_bytes());
        let err = decode_bag("x", &bytes).unwrap_err();
        assert!(matches!(err, Error::Format(FormatError::NonFinite { .. })));
    }

    #[test]
    fn distinct_parse_errors() {
        let good = encode_bag(&tiny_bag()).unwrap();

        let mut bad_magic = good.clone();
        bad_magic[0] = b'X';
        assert!(matches!(
            decode_bag("x", &bad_magic),
            Err(Error::Format(FormatError::BadMagic { .. }))
        ));

        let mut bad_version = good.clone();
        bad_version[4] = 9;
        assert!(matches!(
            decode_bag("x", &bad_version),
            Err(Error::Format(FormatError::UnsupportedVersion(9)))
        ));

        assert!(matches!(
            decode_bag("x", &good[..good.len() - 3]),
            Err(Error::Format(FormatError::Truncated(_)))
        ));

        let mut zero_m = good.clone();
        zero_m[9..13].copy_from_slice(&0u32.to_le_bytes());
        assert!(matches!(
            decode_bag("x", &zero_m),
            Err(Error::Format(FormatError::DimensionMismatch(_)))
        ));

        let mut bad_label = good.clone();
        bad_label[8] = 0;
        assert!(matches!(
            decode_bag("x", &bad_label),
            Err(Error::Format(FormatError::InvalidLabel(0)))
        ));

        let mut trailing = good.clone();
        trailing.push(0);
        assert!(matches!(
            decode_bag("x", &trailing),
            Err(Error::Format(FormatError::TrailingBytes(1)))
        ));
    }

    #[test]
    fn ground_truth_block_optional() {
        let mut bytes = encode_bag(&tiny_bag()).unwrap();
        bytes.pop();
        assert_eq!(decode_bag("tiny", &bytes).unwrap(), tiny_bag());
    }

    fn arb_bag() -> impl Strategy<Value = VideoBag> {
        (1usize..4, 1usize..6, 1usize..5, 1usize..6, 1usize..4, any::<bool>()).prop_flat_map(
            |(c, m, d_v, t, d_a, with_gt)| {
                (
                    proptest::collection::vec(-1e6f32..1e6, m * d_v),
                    proptest::collection::vec(-1e6f32..1e6, t * d_a),
                    proptest::collection::vec(any::<bool>(), c),
                    proptest::collection::vec(proptest::collection::btree_set(0..m as u32, 0..3), c),
                    proptest::collection::vec(proptest::collection::btree_set(0..t as u32, 0..3), c),
                )
                    .prop_map(move |(v, a, pos, gv, ga)| {
                        let labels = pos.iter().map(|&p| if p { 1 } else { -1 }).collect();
                        let bag = VideoBag::new(
                            "p",
                            FeatureMatrix::from_shape_vec(m, d_v, v).unwrap(),
                            FeatureMatrix::from_shape_vec(t, d_a, a).unwrap(),
                            LabelVector::new(labels).unwrap(),
                        );
                        if with_gt {
                            bag.with_ground_truth(GroundTruth {
                                visual: gv.into_iter().map(|s| s.into_iter().collect()).collect(),
                                audio: ga.into_iter().map(|s| s.into_iter().collect()).collect(),
                            })
                            .unwrap()
                        } else {
                            bag
                        }
                    })
            },
        )
    }

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(bag in arb_bag()) {
            let bytes = encode_bag(&bag).unwrap();
            let back = decode_bag(&bag.id, &bytes).unwrap();
            prop_assert_eq!(encode_bag(&back).unwrap(), bytes);
            prop_assert_eq!(back, bag);
        }
    }
}
