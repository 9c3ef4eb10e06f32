//! Image feature vectors and extractors.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;

use sha2::{Digest, Sha256};

use crate::{fixture, Error, Result};

/// Content hash (SHA-256) of an image payload.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ImageId(pub [u8; 32]);

impl ImageId {
    pub fn of(payload: &[u8]) -> Self {
        Self(Sha256::digest(payload).into())
    }

    pub fn to_hex(&self) -> String {
        const HEX: &[u8; 16] = b"0123456789abcdef";
        let mut s = String::with_capacity(64);
        for b in self.0 {
            s.push(HEX[(b >> 4) as usize] as char);
            s.push(HEX[(b & 15) as usize] as char);
        }
        s
    }

    pub fn from_hex(s: &str) -> Result<Self> {
        let bytes = s.as_bytes();
        if bytes.len() != 64 {
            return Err(Error::InvalidArgument(format!("image id {s:?} is not 64 hex digits")));
        }
        let nibble = |c: u8| match c {
            b'0'..=b'9' => Ok(c - b'0'),
            b'a'..=b'f' => Ok(c - b'a' + 10),
            _ => Err(Error::InvalidArgument(format!("image id {s:?} is not lowercase hex"))),
        };
        let mut out = [0u8; 32];
        for (i, o) in out.iter_mut().enumerate() {
            *o = (nibble(bytes[2 * i])? << 4) | nibble(bytes[2 * i + 1])?;
        }
        Ok(Self(out))
    }
}

impl fmt::Debug for ImageId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "ImageId({})", &self.to_hex()[..12])
    }
}

impl fmt::Display for ImageId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageFeature {
    pub image_id: ImageId,
    pub vector: Vec<f32>,
    pub extractor_id: String,
}

/// Anything that maps payload bytes to a fixed-dimension vector.
pub trait FeatureExtractor {
    fn id(&self) -> String;
    fn dim(&self) -> usize;
    /// Raw (unnormalized) feature for `payload`.
    fn raw(&self, payload: &[u8]) -> Option<Vec<f64>>;
}

/// Extracts and L2-normalizes a feature for `payload`.
pub fn extract(payload: &[u8], extractor: &dyn FeatureExtractor) -> Result<ImageFeature> {
    let image_id = ImageId::of(payload);
    if payload.is_empty() {
        return Err(Error::Undecodable(image_id.to_hex()));
    }
    let raw = extractor.raw(payload).ok_or_else(|| Error::Undecodable(image_id.to_hex()))?;
    if raw.len() != extractor.dim() {
        return Err(Error::Dimension { expected: extractor.dim(), got: raw.len() });
    }
    if raw.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite(format!("feature of {image_id}")));
    }
    let norm = libm::sqrt(raw.iter().map(|x| x * x).sum::<f64>());
    if norm == 0.0 {
        return Err(Error::Undecodable(image_id.to_hex()));
    }
    Ok(ImageFeature {
        image_id,
        vector: raw.iter().map(|x| (x / norm) as f32).collect(),
        extractor_id: extractor.id(),
    })
}

/// One-hot-plus-noise features for fixture payloads: `alpha * e_c + eta`, with
/// `eta` uniform in `[-noise, noise]` derived from the payload hash.
#[derive(Debug, Clone, PartialEq)]
pub struct StubExtractor {
    pub dim: usize,
    pub n_concepts: u32,
    pub alpha: f64,
    pub noise: f64,
}

impl Default for StubExtractor {
    fn default() -> Self {
        Self { dim: 64, n_concepts: 16, alpha: 4.0, noise: 0.1 }
    }
}

impl StubExtractor {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.n_concepts == 0 || self.n_concepts as usize > self.dim {
            return Err(Error::InvalidArgument(format!(
                "stub extractor needs 1 <= n_concepts ({}) <= dim ({})",
                self.n_concepts, self.dim
            )));
        }
        if !(self.alpha > 0.0 && self.noise >= 0.0) {
            return Err(Error::InvalidArgument("stub alpha must be > 0 and noise >= 0".into()));
        }
        Ok(())
    }

    /// Noise vector for a payload, entries in `[-noise, noise]`.
    pub fn noise_vector(&self, payload: &[u8]) -> Vec<f64> {
        let key: [u8; 32] = Sha256::digest(payload).into();
        let mut out = Vec::with_capacity(self.dim);
        let mut block = 0u32;
        while out.len() < self.dim {
            let mut h = Sha256::new();
            h.update(b"ssmmt/stub/noise");
            h.update(key);
            h.update(block.to_le_bytes());
            let d = h.finalize();
            for chunk in d.chunks_exact(4) {
                if out.len() == self.dim {
                    break;
                }
                let u = u32::from_le_bytes(chunk.try_into().expect("4 bytes")) as f64 / 4294967296.0;
                out.push(self.noise * (2.0 * u - 1.0));
            }
            block += 1;
        }
        out
    }
}

impl FeatureExtractor for StubExtractor {
    fn id(&self) -> String {
        format!("stub-v1:d{}:c{}:a{}:n{}", self.dim, self.n_concepts, self.alpha, self.noise)
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn raw(&self, payload: &[u8]) -> Option<Vec<f64>> {
        let concept = fixture::payload_concept(payload)?;
        if concept >= self.n_concepts {
            return None;
        }
        let mut v = self.noise_vector(payload);
        v[concept as usize] += self.alpha;
        Some(v)
    }
}

/// Features keyed by image id, all from a single extractor.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureStore {
    dim: usize,
    extractor_id: String,
    features: BTreeMap<ImageId, Vec<f32>>,
}

impl FeatureStore {
    pub fn new(dim: usize, extractor_id: impl ToString) -> Self {
        Self { dim, extractor_id: extractor_id.to_string(), features: BTreeMap::new() }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn extractor_id(&self) -> &str {
        &self.extractor_id
    }

    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    pub fn contains(&self, id: &ImageId) -> bool {
        self.features.contains_key(id)
    }

    pub fn get(&self, id: &ImageId) -> Option<&[f32]> {
        self.features.get(id).map(Vec::as_slice)
    }

    pub fn insert(&mut self, feature: ImageFeature) -> Result<()> {
        if feature.extractor_id != self.extractor_id {
            return Err(Error::InvalidArgument(format!(
                "feature from extractor {} added to store of {}",
                feature.extractor_id, self.extractor_id
            )));
        }
        self.insert_vector(feature.image_id, feature.vector)
    }

    pub fn insert_vector(&mut self, id: ImageId, vector: Vec<f32>) -> Result<()> {
        if vector.len() != self.dim {
            return Err(Error::Dimension { expected: self.dim, got: vector.len() });
        }
        if vector.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite(format!("feature of {id}")));
        }
        self.features.insert(id, vector);
        Ok(())
    }

    /// Iterates in ascending image-id order.
    pub fn iter(&self) -> impl Iterator<Item = (&ImageId, &[f32])> {
        self.features.iter().map(|(k, v)| (k, v.as_slice()))
    }
}
