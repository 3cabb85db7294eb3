//! Binary dataset container.
//!
//! Layout (little-endian):
//!
//! ```text
//! magic        8 bytes  "RAGCNDAT"
//! version      u32      1
//! C T V M      u32 x 4
//! num_classes  u32
//! class names  num_classes x (u32 length, UTF-8 bytes)
//! samples      u32 count, then per sample:
//!                id (u32 length, UTF-8), label u32, valid_frames u32,
//!                C*T*V*M f32 coordinates in [C, T, V, M] order
//! ```

use std::path::Path;

use super::{ByteReader, ByteWriter};
use crate::error::{Error, Result};
use crate::preprocess::{SkeletonSequence, COORDS};
use crate::tensor::Tensor;

pub const DATASET_MAGIC: &[u8; 8] = b"RAGCNDAT";
pub const DATASET_VERSION: usize = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetHeader {
    pub version: usize,
    pub channels: usize,
    pub frames: usize,
    pub joints: usize,
    pub bodies: usize,
    pub num_classes: usize,
    pub class_names: Vec<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetFile {
    pub header: DatasetHeader,
    pub samples: Vec<SkeletonSequence>,
}

impl DatasetFile {
    /// Builds a dataset, checking every sample against the shared shape.
    pub fn new(class_names: Vec<String>, samples: Vec<SkeletonSequence>) -> Result<Self> {
        let first = samples.first().ok_or_else(|| Error::Input("a dataset needs at least one sample".into()))?;
        let header = DatasetHeader {
            version: DATASET_VERSION,
            channels: COORDS,
            frames: first.frames(),
            joints: first.joints(),
            bodies: first.bodies(),
            num_classes: class_names.len(),
            class_names,
        };
        let file = DatasetFile { header, samples };
        file.validate()?;
        Ok(file)
    }

    pub fn validate(&self) -> Result<()> {
        let h = &self.header;
        let shape = [h.channels, h.frames, h.joints, h.bodies];
        for s in &self.samples {
            if s.data.shape() != shape {
                return Err(Error::Input(format!(
                    "sample {} has shape {:?}, dataset expects {:?}",
                    s.sample_id,
                    s.data.shape(),
                    shape
                )));
            }
            if s.label >= h.num_classes {
                return Err(Error::Input(format!(
                    "sample {} has label {} but the dataset has {} classes",
                    s.sample_id, s.label, h.num_classes
                )));
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.validate()?;
        let h = &self.header;
        let mut w = ByteWriter::default();
        w.bytes(DATASET_MAGIC);
        w.u32(DATASET_VERSION)?;
        for x in [h.channels, h.frames, h.joints, h.bodies, h.num_classes] {
            w.u32(x)?;
        }
        for name in &h.class_names {
            w.str(name)?;
        }
        w.u32(self.samples.len())?;
        for s in &self.samples {
            w.str(&s.sample_id)?;
            w.u32(s.label)?;
            w.u32(s.valid_frames)?;
            w.f32s(s.data.data());
        }
        Ok(w.buf)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        if r.take(8, "magic")? != DATASET_MAGIC {
            return Err(Error::Corrupt("not a dataset file (bad magic)".into()));
        }
        let version = r.u32("version")?;
        if version != DATASET_VERSION {
            return Err(Error::Load(format!("unsupported dataset version {version}")));
        }
        let channels = r.u32("channels")?;
        let frames = r.u32("frames")?;
        let joints = r.u32("joints")?;
        let bodies = r.u32("bodies")?;
        let num_classes = r.u32("class count")?;
        if channels != COORDS {
            return Err(Error::Corrupt(format!("dataset has {channels} coordinate channels, expected {COORDS}")));
        }
        let class_names = (0..num_classes).map(|_| r.str("class name")).collect::<Result<Vec<_>>>()?;
        let count = r.u32("sample count")?;
        let per_sample = channels * frames * joints * bodies;
        let mut samples = Vec::with_capacity(count.min(bytes.len() / per_sample.max(1)));
        for _ in 0..count {
            let id = r.str("sample id")?;
            let label = r.u32("label")?;
            let valid = r.u32("valid frames")?;
            let data = Tensor::new(vec![channels, frames, joints, bodies], r.f32s(per_sample, "coordinates")?)?;
            let seq = SkeletonSequence::new(data, valid, label, id).map_err(|e| Error::Corrupt(e.to_string()))?;
            samples.push(seq);
        }
        r.finish()?;
        let header = DatasetHeader { version, channels, frames, joints, bodies, num_classes, class_names };
        let file = DatasetFile { header, samples };
        file.validate().map_err(|e| Error::Corrupt(e.to_string()))?;
        Ok(file)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(id: &str, label: usize, valid: usize) -> SkeletonSequence {
        let mut data = Tensor::zeros(&[3, 4, 2, 1]);
        for c in 0..3 {
            for t in 0..valid {
                for v in 0..2 {
                    data.set(&[c, t, v, 0], 0.25 * (c + t + v) as f64 - 0.5);
                }
            }
        }
        SkeletonSequence::new(data, valid, label, id).unwrap()
    }

    #[test]
    fn round_trip() {
        let file = DatasetFile::new(vec!["a".into(), "b".into()], vec![sample("x", 0, 4), sample("y", 1, 2)]).unwrap();
        let bytes = file.to_bytes().unwrap();
        let back = DatasetFile::from_bytes(&bytes).unwrap();
        assert_eq!(back, file);
        assert_eq!(back.to_bytes().unwrap(), bytes);
    }

    #[test]
    fn corrupt_inputs() {
        let file = DatasetFile::new(vec!["a".into()], vec![sample("x", 0, 4)]).unwrap();
        let bytes = file.to_bytes().unwrap();
        assert!(matches!(DatasetFile::from_bytes(&bytes[..bytes.len() - 3]), Err(Error::Corrupt(_))));
        assert!(matches!(DatasetFile::from_bytes(b"NOTADATA"), Err(Error::Corrupt(_))));
        let mut wrong = bytes.clone();
        wrong[8] = 9;
        assert!(matches!(DatasetFile::from_bytes(&wrong), Err(Error::Load(_))));
        assert!(DatasetFile::new(vec!["a".into()], vec![sample("x", 1, 4)]).is_err());
    }
}
