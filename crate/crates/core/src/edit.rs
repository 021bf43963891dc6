//! Instance-level scene edits. Inputs are never mutated; every edit returns
//! a new scene and a table whose member indices match the new point order.

use crate::association::{InstanceRecord, InstanceTable};
use crate::error::{Error, Result};
use crate::scene::{GaussianPoint, InstanceId, Scene};

/// Drops the instance and its points. Remaining points keep their relative
/// order; member indices of other instances are shifted accordingly.
pub fn remove_instance(
    scene: &Scene,
    table: &InstanceTable,
    id: InstanceId,
) -> Result<(Scene, InstanceTable)> {
    let record = table
        .get(id)
        .ok_or_else(|| Error::NotFound(format!("instance {id}")))?;
    let n = scene.len();
    let mut removed = vec![false; n];
    for &m in &record.members {
        if m >= n {
            return Err(Error::validation(format!("member {m} out of range")));
        }
        removed[m] = true;
    }
    // new index of every kept point
    let mut remap = vec![usize::MAX; n];
    let mut kept = Vec::with_capacity(n - record.members.len());
    for (i, p) in scene.points().iter().enumerate() {
        if !removed[i] {
            remap[i] = kept.len();
            kept.push(p.clone());
        }
    }
    let mut out = InstanceTable::new();
    for (other, r) in table.iter().filter(|(other, _)| *other != id) {
        let members = r
            .members
            .iter()
            .filter(|m| !removed[**m])
            .map(|m| remap[*m])
            .collect();
        out.insert(
            other,
            InstanceRecord {
                members,
                ..r.clone()
            },
        )?;
    }
    Ok((Scene::from_points_unchecked(kept), out))
}

/// Replaces the color of every member point.
pub fn recolor_instance(
    scene: &Scene,
    table: &InstanceTable,
    id: InstanceId,
    rgb: [f64; 3],
) -> Result<Scene> {
    if !rgb.iter().all(|c| (0.0..=1.0).contains(c)) {
        return Err(Error::validation(format!("color {rgb:?} outside [0, 1]")));
    }
    let record = table
        .get(id)
        .ok_or_else(|| Error::NotFound(format!("instance {id}")))?;
    let mut points = scene.points().to_vec();
    for &m in &record.members {
        points
            .get_mut(m)
            .ok_or_else(|| Error::validation(format!("member {m} out of range")))?
            .color = rgb;
    }
    Ok(Scene::from_points_unchecked(points))
}

/// Appends `points` as a new instance `id`.
pub fn insert_instance(
    scene: &Scene,
    table: &InstanceTable,
    points: &[GaussianPoint],
    id: InstanceId,
) -> Result<(Scene, InstanceTable)> {
    if table.contains(id) {
        return Err(Error::Conflict(format!("instance {id} already exists")));
    }
    for (i, p) in points.iter().enumerate() {
        p.validate()
            .map_err(|e| Error::validation(format!("inserted point {i}: {e}")))?;
    }
    let start = scene.len();
    let mut all = scene.points().to_vec();
    all.extend_from_slice(points);
    let mut out = table.clone();
    out.insert(
        id,
        InstanceRecord {
            members: (start..start + points.len()).collect(),
            ..Default::default()
        },
    )?;
    Ok((Scene::from_points_unchecked(all), out))
}
