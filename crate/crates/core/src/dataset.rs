//! Reading and writing clips as image files plus a manifest.
//!
//! A written clip holds `frame_NNNN.ppm`, `alpha_NNNN.pgm`, the union of the
//! instance masks as `mask_NNNN.pgm`, every instance mask as
//! `instance_K_NNNN.pgm`, `init_mask.pgm` (the first union mask) and
//! `manifest.json`.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::compositing::Clip;
use crate::error::{Error, Result};
use crate::image::{binarize, Image};
use crate::manifest::Manifest;
use crate::pnm::{self, BitDepth};

pub const MANIFEST: &str = "manifest.json";
pub const INIT_MASK: &str = "init_mask.pgm";

fn union(masks: &[Image]) -> Image {
    let (h, w) = (masks[0].height(), masks[0].width());
    Image::from_fn(h, w, 1, |y, x, _| {
        if masks.iter().any(|m| m.get(y, x, 0) == 1.0) {
            1.0
        } else {
            0.0
        }
    })
}

/// Encode a clip to named files, manifest included.
pub fn encode_clip(clip: &Clip, depth: BitDepth, seed: Option<u64>) -> BTreeMap<String, Vec<u8>> {
    let mut files = BTreeMap::new();
    let (mut frames, mut alphas, mut masks) = (Vec::new(), Vec::new(), Vec::new());
    for t in 0..clip.len() {
        let n = t + 1;
        let (f, a, m) = (
            format!("frame_{n:04}.ppm"),
            format!("alpha_{n:04}.pgm"),
            format!("mask_{n:04}.pgm"),
        );
        files.insert(f.clone(), pnm::encode(&clip.frames[t], depth));
        files.insert(a.clone(), pnm::encode(&clip.alphas[t], depth));
        let u = union(&clip.instance_masks[t]);
        files.insert(m.clone(), pnm::encode(&u, BitDepth::Eight));
        if t == 0 {
            files.insert(INIT_MASK.into(), pnm::encode(&u, BitDepth::Eight));
        }
        for (k, inst) in clip.instance_masks[t].iter().enumerate() {
            files.insert(
                format!("instance_{}_{n:04}.pgm", k + 1),
                pnm::encode(inst, BitDepth::Eight),
            );
        }
        frames.push(f);
        alphas.push(a);
        masks.push(m);
    }
    let mut manifest = Manifest::new(frames);
    manifest.alphas = Some(alphas);
    manifest.masks = Some(masks);
    manifest.seed = seed;
    files.insert(MANIFEST.into(), manifest.to_json().into_bytes());
    files
}

pub fn write_files(files: &BTreeMap<String, Vec<u8>>, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (name, bytes) in files {
        let path = dir.join(name);
        fs::write(&path, bytes).map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

/// Write a clip and return the path of its manifest.
pub fn write_clip(
    clip: &Clip,
    dir: impl AsRef<Path>,
    depth: BitDepth,
    seed: Option<u64>,
) -> Result<std::path::PathBuf> {
    let dir = dir.as_ref();
    write_files(&encode_clip(clip, depth, seed), dir)?;
    Ok(dir.join(MANIFEST))
}

/// Load a clip whose manifest lists alphas. Masks come from the manifest
/// when present, else from the alphas binarized at 0.5; either way each
/// frame gets a single instance.
pub fn load_clip(manifest: &Manifest) -> Result<Clip> {
    let frames = manifest.load_frames()?;
    let alphas = manifest
        .load_alphas()?
        .ok_or_else(|| Error::Argument("clip manifest needs alphas".into()))?;
    let masks = match manifest.load_masks()? {
        Some(m) => m.iter().map(|x| binarize(x, 0.5)).collect::<Result<Vec<_>>>()?,
        None => alphas.iter().map(|a| binarize(a, 0.5)).collect::<Result<_>>()?,
    };
    Clip::new(frames, alphas, masks.into_iter().map(|m| vec![m]).collect())
}
