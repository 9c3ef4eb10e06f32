//! Visual-context files.
//!
//! Header `{D_img, temperature, weighting, matcher_ckpt_hash, count}`, then per
//! sentence: id (u64), flags (u8, bit 0 = no visual), candidate count (u32),
//! the 32-byte candidate ids, their f32 weights, the f32 pooled vector and the
//! f32 weight entropy.

use std::path::Path;

use serde::{Deserialize, Serialize};
use ssmmt_core::features::ImageId;
use ssmmt_core::filter::VisualContext;

use super::binary::{frame, put_f32s, unframe};
use crate::error::{Context, Error, Result};
use crate::io::{read, write_atomic};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContextHeader {
    #[serde(rename = "D_img")]
    pub d_img: usize,
    pub temperature: f64,
    pub weighting: String,
    pub matcher_ckpt_hash: String,
    pub count: usize,
}

pub fn encode(header: &ContextHeader, contexts: &[VisualContext]) -> Result<Vec<u8>> {
    if header.count != contexts.len() {
        return Err(Error::data(format!("header count {} for {} contexts", header.count, contexts.len())));
    }
    let mut body = Vec::new();
    for c in contexts {
        if c.pooled.len() != header.d_img {
            return Err(Error::data(format!("context {} has dimension {}", c.sentence_id, c.pooled.len())));
        }
        body.extend_from_slice(&c.sentence_id.to_le_bytes());
        body.push(u8::from(c.no_visual));
        body.extend_from_slice(&(c.candidates.len() as u32).to_le_bytes());
        for id in &c.candidates {
            body.extend_from_slice(&id.0);
        }
        put_f32s(&mut body, c.weights.iter().map(|&w| w as f32));
        put_f32s(&mut body, c.pooled.iter().map(|&w| w as f32));
        put_f32s(&mut body, [c.entropy as f32]);
    }
    frame(header, &body)
}

pub fn decode(bytes: &[u8]) -> Result<(ContextHeader, Vec<VisualContext>)> {
    let (h, mut r) = unframe::<ContextHeader>(bytes)?;
    let mut out = Vec::with_capacity(h.count);
    for _ in 0..h.count {
        let sentence_id = r.u64()?;
        let flags = r.u8()?;
        if flags > 1 {
            return Err(Error::data(format!("unknown flags {flags:#x} for sentence {sentence_id}")));
        }
        let n = r.u32()? as usize;
        let candidates = (0..n).map(|_| r.id().map(ImageId)).collect::<Result<Vec<_>>>()?;
        let weights = r.f32s(n)?.into_iter().map(f64::from).collect();
        let pooled = r.f32s(h.d_img)?.into_iter().map(f64::from).collect();
        let entropy = f64::from(r.f32s(1)?[0]);
        out.push(VisualContext { sentence_id, candidates, weights, pooled, entropy, no_visual: flags & 1 == 1 });
    }
    r.finish()?;
    Ok((h, out))
}

pub fn save(path: &Path, header: &ContextHeader, contexts: &[VisualContext]) -> Result<()> {
    write_atomic(path, &encode(header, contexts)?)
}

pub fn load(path: &Path) -> Result<(ContextHeader, Vec<VisualContext>)> {
    decode(&read(path)?).at(path)
}
