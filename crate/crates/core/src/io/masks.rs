//! Mask directories: `view_<v>_mask_<m>.png` holds a 0/255 grayscale mask
//! and the optional `view_<v>_mask_<m>.emb` sidecar holds its embedding as
//! 512 little-endian f32 values.

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::io::embeddings::{encode_vector, unit_vector};
use crate::io::{write_atomic, Reader, Writer};
use crate::losses::InstanceMask;
use crate::render::BinaryMap;
use crate::scene::Camera;
use crate::EMBEDDING_DIM;

const CTX: &str = "mask sidecar";

fn stem(view: usize, mask: usize) -> String {
    format!("view_{view}_mask_{mask}")
}

/// Parses `view_<v>_mask_<m>.<ext>`.
fn parse_name(name: &str) -> Option<(usize, usize, &str)> {
    let (stem, ext) = name.rsplit_once('.')?;
    let rest = stem.strip_prefix("view_")?;
    let (v, m) = rest.split_once("_mask_")?;
    Some((v.parse().ok()?, m.parse().ok()?, ext))
}

/// Writes every mask under `dir`, numbering masks per view in input order.
pub fn save_masks(dir: impl AsRef<Path>, masks: &[InstanceMask]) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut next: BTreeMap<usize, usize> = BTreeMap::new();
    for m in masks {
        let slot = next.entry(m.view_id).or_default();
        let name = stem(m.view_id, *slot);
        *slot += 1;
        let pixels = m.mask.data.iter().map(|b| if *b { 255 } else { 0 }).collect();
        let img = ::image::GrayImage::from_raw(m.mask.width as u32, m.mask.height as u32, pixels)
            .ok_or_else(|| Error::validation("mask buffer does not match its size"))?;
        let path = dir.join(format!("{name}.png"));
        img.save(&path).map_err(|source| Error::Image { path, source })?;
        if let Some(e) = &m.embedding {
            let mut w = Writer::default();
            encode_vector(&mut w, e);
            write_atomic(&dir.join(format!("{name}.emb")), &w.buf)?;
        }
    }
    Ok(())
}

fn read_sidecar(path: &Path) -> Result<Vec<f64>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() != EMBEDDING_DIM * 4 {
        return Err(Error::validation(format!(
            "{} holds {} bytes, expected {}",
            path.display(),
            bytes.len(),
            EMBEDDING_DIM * 4
        )));
    }
    let mut r = Reader::new(&bytes, CTX);
    (0..EMBEDDING_DIM).map(|_| r.f32().map(f64::from)).collect()
}

/// Loads every mask in `dir`, grouped by view id and ordered by mask index.
///
/// Pixels at or above 128 are foreground. When `cameras` is given, each
/// mask must match its view's image size.
pub fn load_masks(
    dir: impl AsRef<Path>,
    cameras: Option<&[Camera]>,
) -> Result<BTreeMap<usize, Vec<InstanceMask>>> {
    let dir = dir.as_ref();
    let listing = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut found: BTreeMap<(usize, usize), std::path::PathBuf> = BTreeMap::new();
    for entry in listing {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let name = entry.file_name();
        let Some((v, m, ext)) = name.to_str().and_then(parse_name) else {
            continue;
        };
        if ext == "emb" {
            continue;
        }
        if found.insert((v, m), entry.path()).is_some() {
            return Err(Error::validation(format!(
                "more than one image for {}",
                stem(v, m)
            )));
        }
    }

    let mut out: BTreeMap<usize, Vec<InstanceMask>> = BTreeMap::new();
    for ((v, m), path) in found {
        let img = ::image::open(&path)
            .map_err(|source| Error::Image {
                path: path.clone(),
                source,
            })?
            .to_luma8();
        let (w, h) = (img.width() as usize, img.height() as usize);
        if let Some(cams) = cameras {
            let cam = cams.get(v).ok_or_else(|| {
                Error::validation(format!("{} refers to unknown view {v}", path.display()))
            })?;
            if (cam.width as usize, cam.height as usize) != (w, h) {
                return Err(Error::validation(format!(
                    "{} is {w}x{h}, view {v} renders {}x{}",
                    path.display(),
                    cam.width,
                    cam.height
                )));
            }
        }
        let data = img.into_raw().into_iter().map(|p| p >= 128).collect();
        let sidecar = dir.join(format!("{}.emb", stem(v, m)));
        let embedding = if sidecar.exists() {
            Some(unit_vector(read_sidecar(&sidecar)?, &stem(v, m))?.vector)
        } else {
            None
        };
        out.entry(v)
            .or_default()
            .push(InstanceMask::new(BinaryMap::new(w, h, data)?, v, embedding)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_parse() {
        assert_eq!(parse_name("view_3_mask_12.png"), Some((3, 12, "png")));
        assert_eq!(parse_name("view_3_mask_12.emb"), Some((3, 12, "emb")));
        assert_eq!(parse_name("view_x_mask_1.png"), None);
        assert_eq!(parse_name("notes.txt"), None);
    }

    #[test]
    fn empty_dir_gives_empty_set() {
        let dir = tempfile::tempdir().unwrap();
        assert!(load_masks(dir.path(), None).unwrap().is_empty());
    }

    #[test]
    fn three_masks_one_view() {
        let dir = tempfile::tempdir().unwrap();
        let masks: Vec<_> = (0..3)
            .map(|k| {
                let mut b = BinaryMap::empty(5, 4);
                b.data[k] = true;
                InstanceMask::new(b, 0, None).unwrap()
            })
            .collect();
        save_masks(dir.path(), &masks).unwrap();
        let loaded = load_masks(dir.path(), None).unwrap();
        assert_eq!(loaded.len(), 1);
        assert_eq!(loaded[&0], masks);
    }

    #[test]
    fn shape_mismatch_is_validation_error() {
        let dir = tempfile::tempdir().unwrap();
        let m = InstanceMask::new(BinaryMap::empty(5, 4), 0, None).unwrap();
        save_masks(dir.path(), &[m]).unwrap();
        let cam = Camera::identity(10.0, 10.0, 3.0, 3.0, 6, 6).unwrap();
        assert!(matches!(
            load_masks(dir.path(), Some(&[cam])),
            Err(Error::Validation(_))
        ));
    }
}
