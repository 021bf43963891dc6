//! Scene bundle: a plain-text manifest followed by tagged binary blocks.
//!
//! ```text
//! splatseg-bundle
//! version 1
//! points 2000
//! cameras 6
//! features 2000
//! end
//! <PNTS len payload><CAMS len payload><FEAT len payload>...
//! ```
//!
//! Floats are stored as little-endian f64 so a save/load cycle reproduces
//! every value bit for bit.

use std::path::Path;

use crate::association::{AuditEntry, InstanceRecord, InstanceTable};
use crate::codebook::{Codebook, TwoLevelCodebook};
use crate::error::{Error, Result};
use crate::io::{write_atomic, Reader, Writer};
use crate::scene::{Aabb, Camera, GaussianPoint, InstanceId, Scene};
use crate::{Feature, FEATURE_DIM};

pub const BUNDLE_VERSION: u32 = 1;

const MAGIC: &str = "splatseg-bundle";
const CTX: &str = "bundle";

/// Everything a session needs: geometry, cameras and the optional products
/// of training and association.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct Bundle {
    pub scene: Scene,
    pub cameras: Vec<Camera>,
    /// Continuous (stage-1) features, kept as association targets.
    pub features: Option<Vec<Feature>>,
    pub codebook: Option<TwoLevelCodebook>,
    pub table: Option<InstanceTable>,
}

impl Bundle {
    pub fn new(scene: Scene, cameras: Vec<Camera>) -> Self {
        Self {
            scene,
            cameras,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.scene.len();
        if n == 0 {
            return Err(Error::validation("bundle has no points"));
        }
        for cam in &self.cameras {
            cam.validate()?;
        }
        if let Some(f) = &self.features {
            if f.len() != n {
                return Err(Error::validation(format!(
                    "{} feature rows for {n} points",
                    f.len()
                )));
            }
        }
        if let Some(cb) = &self.codebook {
            if cb.point_count() != n {
                return Err(Error::validation(format!(
                    "codebook covers {} points, scene has {n}",
                    cb.point_count()
                )));
            }
        }
        if let Some(t) = &self.table {
            for (id, r) in t.iter() {
                if let Some(m) = r.members.iter().find(|m| **m >= n) {
                    return Err(Error::validation(format!(
                        "instance {id} member {m} out of range"
                    )));
                }
            }
        }
        Ok(())
    }
}

fn encode_points(scene: &Scene) -> Vec<u8> {
    let mut w = Writer::default();
    for p in scene.points() {
        w.f64s(&p.position);
        w.f64s(&p.rotation);
        w.f64s(&p.scale);
        w.f64(p.opacity);
        w.f64s(&p.color);
        w.f64s(&p.instance_feature);
    }
    w.buf
}

fn decode_points(r: &mut Reader, n: usize) -> Result<Scene> {
    let points = (0..n)
        .map(|_| {
            Ok(GaussianPoint {
                position: r.f64s()?,
                rotation: r.f64s()?,
                scale: r.f64s()?,
                opacity: r.f64()?,
                color: r.f64s()?,
                instance_feature: r.f64s()?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Scene::new(points)
}

fn encode_cameras(cams: &[Camera]) -> Vec<u8> {
    let mut w = Writer::default();
    for c in cams {
        w.f64s(&[c.fx, c.fy, c.cx, c.cy]);
        w.u32(c.width);
        w.u32(c.height);
        for row in &c.rotation {
            w.f64s(row);
        }
        w.f64s(&c.translation);
    }
    w.buf
}

fn decode_cameras(r: &mut Reader, n: usize) -> Result<Vec<Camera>> {
    (0..n)
        .map(|_| {
            let [fx, fy, cx, cy] = r.f64s()?;
            let (width, height) = (r.u32()?, r.u32()?);
            let rotation = [r.f64s()?, r.f64s()?, r.f64s()?];
            let translation = r.f64s()?;
            Camera::new(fx, fy, cx, cy, width, height, rotation, translation)
        })
        .collect()
}

fn encode_features(features: &[Feature]) -> Vec<u8> {
    let mut w = Writer::default();
    for f in features {
        w.f64s(f);
    }
    w.buf
}

fn decode_features(r: &mut Reader, n: usize) -> Result<Vec<Feature>> {
    (0..n).map(|_| r.f64s()).collect()
}

fn encode_codebook(cb: &TwoLevelCodebook) -> Vec<u8> {
    let mut w = Writer::default();
    w.u8(cb.use_position() as u8);
    match cb.bounds() {
        Some(b) => {
            w.u8(1);
            w.f64s(&b.min);
            w.f64s(&b.max);
        }
        None => w.u8(0),
    }
    let coarse = cb.coarse();
    w.u32(coarse.dim() as u32);
    w.u64(coarse.size() as u64);
    w.f64s(coarse.entries());
    w.u64(coarse.assignments().len() as u64);
    for a in coarse.assignments() {
        w.u32(*a);
    }
    for fine in cb.fine_entries() {
        w.u64(fine.len() as u64);
        for f in fine {
            w.f64s(f);
        }
    }
    for f in cb.fine_index() {
        w.u32(*f);
    }
    w.buf
}

fn decode_codebook(r: &mut Reader) -> Result<TwoLevelCodebook> {
    let use_position = r.u8()? != 0;
    let bounds = match r.u8()? {
        0 => None,
        _ => Some(Aabb {
            min: r.f64s()?,
            max: r.f64s()?,
        }),
    };
    let dim = r.u32()? as usize;
    let k = r.count(8 * dim.max(1))?;
    let entries = (0..k * dim).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
    let n = r.count(4)?;
    let assignments = (0..n).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
    let coarse = Codebook::from_parts(dim, entries, assignments)?;
    let fine_entries = (0..k)
        .map(|_| {
            let len = r.count(8 * FEATURE_DIM)?;
            (0..len).map(|_| r.f64s()).collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    let fine_index = (0..n).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
    TwoLevelCodebook::from_parts(use_position, bounds, coarse, fine_entries, fine_index)
}

fn encode_table(table: &InstanceTable) -> Vec<u8> {
    let mut w = Writer::default();
    for (id, r) in table.iter() {
        w.u32(id.coarse);
        w.u32(id.fine);
        w.u64(r.members.len() as u64);
        for m in &r.members {
            w.u64(*m as u64);
        }
        match &r.embedding {
            Some(e) => {
                w.u64(e.len() as u64);
                w.f64s(e);
            }
            None => w.u64(0),
        }
        w.u64(r.audit.len() as u64);
        for a in &r.audit {
            w.u32(a.view);
            w.u32(a.mask);
            w.f64(a.score);
        }
    }
    w.buf
}

fn decode_table(r: &mut Reader, count: usize) -> Result<InstanceTable> {
    let mut table = InstanceTable::new();
    for _ in 0..count {
        let id = InstanceId::new(r.u32()?, r.u32()?);
        let len = r.count(8)?;
        let members = (0..len)
            .map(|_| r.u64().map(|m| m as usize))
            .collect::<Result<Vec<_>>>()?;
        let dim = r.count(8)?;
        let embedding = match dim {
            0 => None,
            _ => Some((0..dim).map(|_| r.f64()).collect::<Result<Vec<_>>>()?),
        };
        let audits = r.count(16)?;
        let audit = (0..audits)
            .map(|_| {
                Ok(AuditEntry {
                    view: r.u32()?,
                    mask: r.u32()?,
                    score: r.f64()?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        if table.contains(id) {
            return Err(Error::parse(CTX, format!("duplicate instance {id}")));
        }
        table.insert(
            id,
            InstanceRecord {
                members,
                embedding,
                audit,
            },
        )?;
    }
    Ok(table)
}

/// Serializes the bundle to bytes.
pub fn encode_bundle(bundle: &Bundle) -> Result<Vec<u8>> {
    bundle.validate()?;
    let n = bundle.scene.len();
    let mut blocks: Vec<(&str, [u8; 4], usize, Vec<u8>)> = vec![
        ("points", *b"PNTS", n, encode_points(&bundle.scene)),
        ("cameras", *b"CAMS", bundle.cameras.len(), encode_cameras(&bundle.cameras)),
    ];
    if let Some(f) = &bundle.features {
        blocks.push(("features", *b"FEAT", f.len(), encode_features(f)));
    }
    if let Some(cb) = &bundle.codebook {
        blocks.push(("codebook", *b"CODE", cb.point_count(), encode_codebook(cb)));
    }
    if let Some(t) = &bundle.table {
        blocks.push(("table", *b"TABL", t.len(), encode_table(t)));
    }

    let mut out = format!("{MAGIC}\nversion {BUNDLE_VERSION}\n");
    for (name, _, count, _) in &blocks {
        out.push_str(&format!("{name} {count}\n"));
    }
    out.push_str("end\n");
    let mut bytes = out.into_bytes();
    for (_, tag, _, payload) in blocks {
        bytes.extend_from_slice(&tag);
        bytes.extend_from_slice(&(payload.len() as u64).to_le_bytes());
        bytes.extend_from_slice(&payload);
    }
    Ok(bytes)
}

struct Manifest {
    entries: Vec<(String, usize)>,
    body_offset: usize,
}

fn parse_manifest(bytes: &[u8]) -> Result<Manifest> {
    let mut entries = Vec::new();
    let mut pos = 0;
    let mut line_no = 0;
    loop {
        let Some(len) = bytes[pos..].iter().position(|b| *b == b'\n') else {
            return Err(Error::parse(CTX, "manifest is not terminated by 'end'"));
        };
        let line = std::str::from_utf8(&bytes[pos..pos + len])
            .map_err(|_| Error::parse(CTX, format!("manifest line {line_no} is not UTF-8")))?;
        pos += len + 1;
        match line_no {
            0 if line != MAGIC => {
                return Err(Error::parse(CTX, format!("bad magic {line:?}")));
            }
            0 => {}
            1 => {
                let v = line
                    .strip_prefix("version ")
                    .and_then(|v| v.parse::<u32>().ok())
                    .ok_or_else(|| Error::parse(CTX, format!("bad version line {line:?}")))?;
                if v != BUNDLE_VERSION {
                    return Err(Error::Version {
                        found: v,
                        supported: BUNDLE_VERSION,
                    });
                }
            }
            _ if line == "end" => break,
            _ => {
                let (name, count) = line
                    .split_once(' ')
                    .and_then(|(n, c)| Some((n, c.parse::<usize>().ok()?)))
                    .ok_or_else(|| Error::parse(CTX, format!("bad manifest line {line:?}")))?;
                entries.push((name.to_string(), count));
            }
        }
        line_no += 1;
    }
    Ok(Manifest {
        entries,
        body_offset: pos,
    })
}

/// Parses bytes produced by [`encode_bundle`].
pub fn decode_bundle(bytes: &[u8]) -> Result<Bundle> {
    let manifest = parse_manifest(bytes)?;
    let mut r = Reader::new(&bytes[manifest.body_offset..], CTX);
    let mut bundle = Bundle::default();
    let mut seen_points = false;
    for (name, count) in &manifest.entries {
        let tag = r.take(4)?;
        let len = r.u64()? as usize;
        let payload = r.take(len)?;
        let mut block = Reader::new(payload, CTX);
        let expected: &[u8; 4] = match name.as_str() {
            "points" => b"PNTS",
            "cameras" => b"CAMS",
            "features" => b"FEAT",
            "codebook" => b"CODE",
            "table" => b"TABL",
            other => return Err(Error::parse(CTX, format!("unknown block {other:?}"))),
        };
        if tag != expected {
            return Err(Error::parse(
                CTX,
                format!("block {name} has tag {:?}", String::from_utf8_lossy(tag)),
            ));
        }
        match name.as_str() {
            "points" => {
                bundle.scene = decode_points(&mut block, *count)?;
                seen_points = true;
            }
            "cameras" => bundle.cameras = decode_cameras(&mut block, *count)?,
            "features" => bundle.features = Some(decode_features(&mut block, *count)?),
            "codebook" => bundle.codebook = Some(decode_codebook(&mut block)?),
            _ => bundle.table = Some(decode_table(&mut block, *count)?),
        }
        if block.remaining() != 0 {
            return Err(Error::parse(
                CTX,
                format!("{} trailing bytes in block {name}", block.remaining()),
            ));
        }
    }
    if !seen_points {
        return Err(Error::parse(CTX, "missing points block"));
    }
    if r.remaining() != 0 {
        return Err(Error::parse(CTX, "trailing data after last block"));
    }
    bundle.validate()?;
    Ok(bundle)
}

pub fn save_bundle(path: impl AsRef<Path>, bundle: &Bundle) -> Result<()> {
    write_atomic(path.as_ref(), &encode_bundle(bundle)?)
}

pub fn load_bundle(path: impl AsRef<Path>) -> Result<Bundle> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_bundle(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_bundle() -> Bundle {
        let points = (0..5)
            .map(|i| {
                let mut p = GaussianPoint::isotropic([i as f64 * 0.1, 0.3, 2.0], 0.05, 0.7, [0.1, 0.2, 0.3]);
                p.instance_feature = [0.1 * i as f64, -1.0 / 3.0, 0.0, 1e-300, 2.5, -0.0];
                p
            })
            .collect();
        let cam = Camera::look_at([0.0, 0.0, -1.0], [0.0, 0.0, 2.0], [0.0, -1.0, 0.0], 30.0, 16, 12).unwrap();
        Bundle::new(Scene::new(points).unwrap(), vec![cam])
    }

    #[test]
    fn round_trip_minimal() {
        let b = small_bundle();
        let bytes = encode_bundle(&b).unwrap();
        assert_eq!(decode_bundle(&bytes).unwrap(), b);
    }

    #[test]
    fn negative_zero_survives() {
        let b = small_bundle();
        let back = decode_bundle(&encode_bundle(&b).unwrap()).unwrap();
        let v = back.scene.points()[0].instance_feature[5];
        assert!(v == 0.0 && v.is_sign_negative());
    }

    #[test]
    fn every_truncation_is_a_parse_error() {
        let bytes = encode_bundle(&small_bundle()).unwrap();
        for cut in 0..bytes.len() {
            match decode_bundle(&bytes[..cut]) {
                Err(Error::Parse { .. }) => {}
                other => panic!("cut {cut}: {other:?}"),
            }
        }
    }

    #[test]
    fn future_version_rejected() {
        let bytes = encode_bundle(&small_bundle()).unwrap();
        let at = bytes.windows(9).position(|w| w == b"version 1").unwrap();
        let mut patched = bytes.clone();
        patched[at + 8] = b'7';
        assert!(matches!(
            decode_bundle(&patched),
            Err(Error::Version { found: 7, supported: 1 })
        ));
    }

    #[test]
    fn empty_scene_refused() {
        assert!(encode_bundle(&Bundle::default()).is_err());
    }
}
