//! JSON sequence manifests. Relative paths resolve against the directory
//! holding the manifest file.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::pnm;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub frames: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alphas: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub masks: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fps: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(skip)]
    base_dir: PathBuf,
}

impl Manifest {
    pub fn new(frames: Vec<String>) -> Self {
        Manifest {
            frames,
            alphas: None,
            masks: None,
            fps: None,
            seed: None,
            base_dir: PathBuf::new(),
        }
    }

    /// Parse and validate a manifest file.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut m: Manifest =
            serde_json::from_str(&text).map_err(|e| Error::from(e).in_file(path))?;
        m.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        m.validate().map_err(|e| e.in_file(path))?;
        Ok(m)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("manifest serializes");
        s.push('\n');
        s
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn base_dir(&self) -> &Path {
        &self.base_dir
    }

    pub fn resolve(&self, entry: &str) -> PathBuf {
        let p = Path::new(entry);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    /// Check that coexisting lists have equal length and that every listed
    /// file exists and shares the first frame's dimensions.
    pub fn validate(&self) -> Result<()> {
        if self.frames.is_empty() {
            return Err(Error::Argument("manifest lists no frames".into()));
        }
        for (name, list) in [("alphas", &self.alphas), ("masks", &self.masks)] {
            if let Some(list) = list {
                if list.len() != self.frames.len() {
                    return Err(Error::Argument(format!(
                        "manifest has {} frames but {} {name}",
                        self.frames.len(),
                        list.len()
                    )));
                }
            }
        }
        let mut dims = None;
        let lists = std::iter::once(&self.frames)
            .chain(self.alphas.iter())
            .chain(self.masks.iter());
        for list in lists {
            for entry in list {
                let path = self.resolve(entry);
                let img = pnm::read_image(&path)?;
                match dims {
                    None => dims = Some(img.dims()),
                    Some(d) if d != img.dims() => {
                        return Err(Error::Argument(format!(
                            "{} is {}x{}, expected {}x{}",
                            path.display(),
                            img.height(),
                            img.width(),
                            d.0,
                            d.1
                        )))
                    }
                    _ => {}
                }
            }
        }
        Ok(())
    }

    fn load_list(&self, list: &[String], channels: usize) -> Result<Vec<Image>> {
        list.iter()
            .enumerate()
            .map(|(i, entry)| {
                let path = self.resolve(entry);
                let img = pnm::read_image(&path).map_err(|e| e.in_frame(i))?;
                if img.channels() != channels {
                    return Err(Error::Argument(format!(
                        "{} has {} channels, expected {channels}",
                        path.display(),
                        img.channels()
                    ))
                    .in_frame(i));
                }
                Ok(img)
            })
            .collect()
    }

    pub fn load_frames(&self) -> Result<Vec<Image>> {
        self.load_list(&self.frames, 3)
    }

    pub fn load_alphas(&self) -> Result<Option<Vec<Image>>> {
        self.alphas
            .as_ref()
            .map(|l| self.load_list(l, 1))
            .transpose()
    }

    pub fn load_masks(&self) -> Result<Option<Vec<Image>>> {
        self.masks.as_ref().map(|l| self.load_list(l, 1)).transpose()
    }
}
