//! Disk cache for preprocessed tensors, keyed by sample id and pipeline
//! version. A stale or unreadable entry is treated as a miss, never an
//! error.

use std::path::{Path, PathBuf};

use ndarray::Array2;

use super::FaceImage;
use crate::error::{Error, Result};

/// Bumped whenever the preprocessing pipeline changes behavior, invalidating
/// all cached tensors.
pub const PIPELINE_VERSION: u32 = 1;

const MAGIC: &[u8; 4] = b"AGEF";

pub(crate) fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut hash = 0xcbf29ce484222325u64;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x100000001b3);
    }
    hash
}

/// Cache of preprocessed [`FaceImage`] tensors under one directory.
#[derive(Debug, Clone)]
pub struct TensorCache {
    dir: PathBuf,
}

impl TensorCache {
    pub fn new(dir: impl Into<PathBuf>) -> Result<Self> {
        let dir = dir.into();
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
        Ok(TensorCache { dir })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    fn path_for(&self, sample_id: &str) -> PathBuf {
        let sanitized: String = sample_id
            .chars()
            .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
            .take(64)
            .collect();
        let hash = fnv1a64(sample_id.as_bytes());
        self.dir.join(format!("{sanitized}-{hash:016x}-v{PIPELINE_VERSION}.tensor"))
    }

    /// Look up a cached tensor. Missing, stale, or corrupt entries return
    /// `Ok(None)`.
    pub fn load(&self, sample_id: &str) -> Result<Option<FaceImage>> {
        let path = self.path_for(sample_id);
        let bytes = match std::fs::read(&path) {
            Ok(b) => b,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(None),
            Err(e) => return Err(Error::io(path.display().to_string(), e)),
        };
        match decode(&bytes) {
            Some(img) => Ok(Some(img)),
            None => {
                log::warn!("discarding unreadable cache entry {}", path.display());
                Ok(None)
            }
        }
    }

    pub fn store(&self, sample_id: &str, image: &FaceImage) -> Result<()> {
        let path = self.path_for(sample_id);
        let bytes = encode(image);
        std::fs::write(&path, bytes).map_err(|e| Error::io(path.display().to_string(), e))
    }

    /// Fetch from cache or compute-and-store.
    pub fn load_or_compute(&self, sample_id: &str, compute: impl FnOnce() -> Result<FaceImage>) -> Result<FaceImage> {
        if let Some(hit) = self.load(sample_id)? {
            return Ok(hit);
        }
        let image = compute()?;
        self.store(sample_id, &image)?;
        Ok(image)
    }
}

fn encode(image: &FaceImage) -> Vec<u8> {
    let (h, w) = image.shape();
    let mut out = Vec::with_capacity(32 + h * w * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&PIPELINE_VERSION.to_le_bytes());
    out.extend_from_slice(&(h as u32).to_le_bytes());
    out.extend_from_slice(&(w as u32).to_le_bytes());
    match &image.landmarks {
        Some(lms) => {
            out.push(1);
            out.extend_from_slice(&(lms.len() as u32).to_le_bytes());
            for &(x, y) in lms {
                out.extend_from_slice(&x.to_le_bytes());
                out.extend_from_slice(&y.to_le_bytes());
            }
        }
        None => {
            out.push(0);
            out.extend_from_slice(&0u32.to_le_bytes());
        }
    }
    out.extend_from_slice(&(image.provenance.len() as u32).to_le_bytes());
    for step in &image.provenance {
        out.extend_from_slice(&(step.len() as u32).to_le_bytes());
        out.extend_from_slice(step.as_bytes());
    }
    for &v in image.pixels.iter() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

fn decode(bytes: &[u8]) -> Option<FaceImage> {
    struct Cursor<'a>(&'a [u8]);
    impl<'a> Cursor<'a> {
        fn take(&mut self, n: usize) -> Option<&'a [u8]> {
            if self.0.len() < n {
                return None;
            }
            let (head, tail) = self.0.split_at(n);
            self.0 = tail;
            Some(head)
        }
        fn u32(&mut self) -> Option<u32> {
            Some(u32::from_le_bytes(self.take(4)?.try_into().ok()?))
        }
        fn u8(&mut self) -> Option<u8> {
            Some(self.take(1)?[0])
        }
        fn f64(&mut self) -> Option<f64> {
            Some(f64::from_le_bytes(self.take(8)?.try_into().ok()?))
        }
    }

    let mut cur = Cursor(bytes);
    if cur.take(4)? != MAGIC || cur.u32()? != PIPELINE_VERSION {
        return None;
    }
    let h = cur.u32()? as usize;
    let w = cur.u32()? as usize;
    let has_landmarks = cur.u8()? == 1;
    let n_lm = cur.u32()? as usize;
    let mut lms = Vec::with_capacity(n_lm);
    for _ in 0..n_lm {
        lms.push((cur.f64()?, cur.f64()?));
    }
    let n_prov = cur.u32()? as usize;
    let mut provenance = Vec::with_capacity(n_prov);
    for _ in 0..n_prov {
        let len = cur.u32()? as usize;
        provenance.push(String::from_utf8(cur.take(len)?.to_vec()).ok()?);
    }
    let mut pixels = Vec::with_capacity(h * w);
    for _ in 0..h * w {
        pixels.push(cur.f64()?);
    }
    if !cur.0.is_empty() {
        return None;
    }
    Some(FaceImage {
        pixels: Array2::from_shape_vec((h, w), pixels).ok()?,
        landmarks: has_landmarks.then_some(lms),
        provenance,
    })
}
