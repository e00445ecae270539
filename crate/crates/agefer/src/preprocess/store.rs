//! Image sources: resolve a manifest's `image_ref` to pixel data, from disk
//! or memory.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use image::DynamicImage;

use crate::error::{Error, Result};

/// Resolves `image_ref` strings into images.
pub trait ImageStore: Send + Sync {
    fn load_image(&self, image_ref: &str) -> Result<DynamicImage>;
}

/// Loads images from files under a root directory; `image_ref` is a path
/// relative to the root.
#[derive(Debug, Clone)]
pub struct DirImageStore {
    root: PathBuf,
}

impl DirImageStore {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        DirImageStore { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }
}

impl ImageStore for DirImageStore {
    fn load_image(&self, image_ref: &str) -> Result<DynamicImage> {
        let path = self.root.join(image_ref);
        if !path.exists() {
            return Err(Error::MissingImage(image_ref.to_string()));
        }
        Ok(image::open(&path)?)
    }
}

/// In-memory image store, used by the synthetic generator and tests.
#[derive(Debug, Clone, Default)]
pub struct MemImageStore {
    images: HashMap<String, DynamicImage>,
}

impl MemImageStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, image_ref: impl Into<String>, image: DynamicImage) {
        self.images.insert(image_ref.into(), image);
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn refs(&self) -> impl Iterator<Item = &str> {
        self.images.keys().map(String::as_str)
    }

    /// Write every image as a PNG under `dir`, creating parent directories
    /// for refs that contain path separators.
    pub fn write_all_png(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        for (image_ref, image) in &self.images {
            let path = dir.join(image_ref);
            if let Some(parent) = path.parent() {
                std::fs::create_dir_all(parent).map_err(|e| Error::io(parent.display().to_string(), e))?;
            }
            image.save(&path)?;
        }
        Ok(())
    }
}

impl ImageStore for MemImageStore {
    fn load_image(&self, image_ref: &str) -> Result<DynamicImage> {
        self.images
            .get(image_ref)
            .cloned()
            .ok_or_else(|| Error::MissingImage(image_ref.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::{GrayImage, Luma};

    fn gray(v: u8) -> DynamicImage {
        DynamicImage::ImageLuma8(GrayImage::from_pixel(8, 8, Luma([v])))
    }

    #[test]
    fn mem_store_round_trip() {
        let mut store = MemImageStore::new();
        store.insert("a.png", gray(10));
        store.insert("b.png", gray(20));
        assert_eq!(store.len(), 2);
        assert_eq!(store.load_image("a.png").unwrap().to_luma8().get_pixel(0, 0).0[0], 10);
        assert!(matches!(store.load_image("c.png"), Err(Error::MissingImage(_))));
    }

    #[test]
    fn dir_store_loads_written_png() {
        let dir = tempfile::tempdir().unwrap();
        let mut mem = MemImageStore::new();
        mem.insert("sub/x.png", gray(77));
        mem.write_all_png(dir.path()).unwrap();

        let store = DirImageStore::new(dir.path());
        let img = store.load_image("sub/x.png").unwrap();
        assert_eq!(img.to_luma8().get_pixel(3, 3).0[0], 77);
        assert!(matches!(store.load_image("missing.png"), Err(Error::MissingImage(_))));
    }
}
