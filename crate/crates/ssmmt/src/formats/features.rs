//! Feature store: header `{extractor_id, D_img, count}` then `count` records
//! of a 32-byte image id followed by `D_img` f32 values.

use std::path::Path;

use serde::{Deserialize, Serialize};
use ssmmt_core::features::{FeatureStore, ImageId};

use super::binary::{frame, put_f32s, unframe};
use crate::error::{Context, Error, Result};
use crate::io::{read, write_atomic};

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    extractor_id: String,
    #[serde(rename = "D_img")]
    d_img: usize,
    count: usize,
}

pub fn encode(store: &FeatureStore) -> Result<Vec<u8>> {
    let mut body = Vec::with_capacity(store.len() * (32 + 4 * store.dim()));
    for (id, v) in store.iter() {
        body.extend_from_slice(&id.0);
        put_f32s(&mut body, v.iter().copied());
    }
    frame(&Header { extractor_id: store.extractor_id().to_string(), d_img: store.dim(), count: store.len() }, &body)
}

pub fn decode(bytes: &[u8]) -> Result<FeatureStore> {
    let (h, mut r) = unframe::<Header>(bytes)?;
    if h.d_img == 0 {
        return Err(Error::data("D_img must be positive"));
    }
    let mut store = FeatureStore::new(h.d_img, &h.extractor_id);
    for _ in 0..h.count {
        let id = ImageId(r.id()?);
        store.insert_vector(id, r.f32s(h.d_img)?)?;
    }
    r.finish()?;
    if store.len() != h.count {
        return Err(Error::data("duplicate image ids"));
    }
    Ok(store)
}

pub fn save(path: &Path, store: &FeatureStore) -> Result<()> {
    write_atomic(path, &encode(store)?)
}

pub fn load(path: &Path) -> Result<FeatureStore> {
    decode(&read(path)?).at(path)
}
