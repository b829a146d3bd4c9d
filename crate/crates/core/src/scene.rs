//! Planar material patches under a footprint and their segmentation.
//!
//! Boundaries live on the beam-normal plane. Patches tilt about the plane's
//! `y` axis, so a pixel at `x` on a patch tilted by `tilt` sits
//! `x * tan(tilt)` further down range than the patch's axis point.

use serde::{Deserialize, Serialize};

use crate::beam::{FootprintGrid, Planar, Segmentation};
use crate::error::{domain, Error, Result};

/// Region a patch can occupy on the beam-normal plane.
#[derive(Debug, Clone, PartialEq)]
pub enum Boundary {
    /// Points with `p . n(angle) < offset`.
    HalfPlane { offset: f64, angle: f64 },
    /// Points with `lo <= p . n(angle) < hi`.
    Strip { lo: f64, hi: f64, angle: f64 },
    /// Points inside (or outside) a circle.
    Arc { center: Planar, radius: f64, inside: bool },
    Full,
}

impl Boundary {
    pub fn contains(&self, p: Planar) -> bool {
        match *self {
            Boundary::HalfPlane { offset, angle } => project(p, angle) < offset,
            Boundary::Strip { lo, hi, angle } => {
                let d = project(p, angle);
                lo <= d && d < hi
            }
            Boundary::Arc { center, radius, inside } => {
                let d2 = (p[0] - center[0]).powi(2) + (p[1] - center[1]).powi(2);
                (d2 < radius * radius) == inside
            }
            Boundary::Full => true,
        }
    }
}

fn project(p: Planar, angle: f64) -> f64 {
    let (s, c) = angle.sin_cos();
    p[0] * c + p[1] * s
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaterialPatch {
    pub label: String,
    pub reflectance: f64,
    /// Down-range offset from the layout's base range, metres.
    pub range_offset: f64,
    /// Angle between the surface normal and the beam, radians.
    pub tilt: f64,
    pub boundary: Boundary,
}

impl MaterialPatch {
    fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.reflectance) {
            return domain(format!("{}: reflectance {} outside [0, 1]", self.label, self.reflectance));
        }
        if !(self.range_offset.is_finite() && self.range_offset >= 0.0) {
            return domain(format!("{}: range offset must be >= 0", self.label));
        }
        if !(0.0..std::f64::consts::FRAC_PI_2).contains(&self.tilt) {
            return domain(format!("{}: tilt must lie in [0, pi/2)", self.label));
        }
        Ok(())
    }

    /// Range of a beam-plane point on this patch's surface.
    pub fn range_at(&self, base_range: f64, p: Planar) -> f64 {
        base_range + self.range_offset + p[0] * self.tilt.tan()
    }
}

/// Patches ordered front to back.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneLayout {
    patches: Vec<MaterialPatch>,
    base_range: f64,
    incidence: f64,
}

impl SceneLayout {
    pub fn new(patches: Vec<MaterialPatch>, base_range: f64, incidence: f64) -> Result<Self> {
        if patches.is_empty() {
            return domain("a layout needs at least one patch");
        }
        if !(base_range.is_finite() && base_range > 0.0) {
            return domain(format!("base range must be > 0, got {base_range}"));
        }
        if !(0.0..std::f64::consts::FRAC_PI_2).contains(&incidence) {
            return domain("incidence must lie in [0, pi/2)");
        }
        for p in &patches {
            p.validate()?;
        }
        Ok(Self { patches, base_range, incidence })
    }

    /// A single `Full` patch at normal incidence.
    pub fn extended(label: &str, reflectance: f64, base_range: f64) -> Result<Self> {
        Self::new(
            vec![MaterialPatch {
                label: label.to_string(),
                reflectance,
                range_offset: 0.0,
                tilt: 0.0,
                boundary: Boundary::Full,
            }],
            base_range,
            0.0,
        )
    }

    pub fn patches(&self) -> &[MaterialPatch] {
        &self.patches
    }

    pub fn base_range(&self) -> f64 {
        self.base_range
    }

    pub fn incidence(&self) -> f64 {
        self.incidence
    }

    /// `"Lf & Lf & Cc"`-style name of the material combination.
    pub fn combination(&self) -> String {
        self.patches.iter().map(|p| p.label.as_str()).collect::<Vec<_>>().join(" & ")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EdgeShape {
    Straight,
    Arc,
}

impl std::fmt::Display for EdgeShape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            EdgeShape::Straight => f.write_str("straight"),
            EdgeShape::Arc => f.write_str("arc"),
        }
    }
}

/// Geometry knobs of the controlled layouts. Lengths in metres.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EdgeGeometry {
    pub base_range_m: f64,
    /// Signed position of the (first) edge along its normal.
    pub edge_offset_m: f64,
    /// Orientation of the edge normal on the beam plane, degrees.
    pub edge_angle_deg: f64,
    /// Half distance between the two edges of a three-target layout.
    pub edge_spacing_m: f64,
    pub arc_radius_m: f64,
}

impl Default for EdgeGeometry {
    fn default() -> Self {
        Self { base_range_m: 50.0, edge_offset_m: 0.0, edge_angle_deg: 0.0, edge_spacing_m: 3e-3, arc_radius_m: 10e-3 }
    }
}

/// Layout with the default [`EdgeGeometry`].
pub fn controlled_layout(
    materials: &[(&str, f64)],
    count: usize,
    interval: f64,
    incidence: f64,
    edge_shape: EdgeShape,
) -> Result<SceneLayout> {
    controlled_layout_with(materials, count, interval, incidence, edge_shape, &EdgeGeometry::default())
}

/// Two or three boards staggered by `interval` down range. The front boards
/// cover an edge-bounded part of the footprint and the last board takes
/// whatever is left. Every board shares the incidence angle.
pub fn controlled_layout_with(
    materials: &[(&str, f64)],
    count: usize,
    interval: f64,
    incidence: f64,
    edge_shape: EdgeShape,
    geometry: &EdgeGeometry,
) -> Result<SceneLayout> {
    if count != 2 && count != 3 {
        return Err(Error::UnsupportedLayout(format!("{count} targets (supported: 2 or 3)")));
    }
    if materials.len() != count {
        return Err(Error::UnsupportedLayout(format!("{} materials for {count} targets", materials.len())));
    }
    if !(interval.is_finite() && interval > 0.0) {
        return domain(format!("interval must be > 0, got {interval}"));
    }
    let angle = geometry.edge_angle_deg.to_radians();
    let normal = [angle.cos(), angle.sin()];
    let radius = geometry.arc_radius_m;
    if edge_shape == EdgeShape::Arc && !(radius.is_finite() && radius > 0.0) {
        return domain("arc radius must be > 0");
    }
    let edges: Vec<f64> = match count {
        2 => vec![geometry.edge_offset_m],
        _ => vec![geometry.edge_offset_m - geometry.edge_spacing_m, geometry.edge_offset_m + geometry.edge_spacing_m],
    };
    let mut patches = Vec::with_capacity(count);
    for (n, &(label, reflectance)) in materials.iter().enumerate() {
        let boundary = match edges.get(n) {
            None => Boundary::Full,
            Some(&edge) => match edge_shape {
                EdgeShape::Straight => Boundary::HalfPlane { offset: edge, angle },
                EdgeShape::Arc => {
                    let c = edge - radius;
                    Boundary::Arc { center: [c * normal[0], c * normal[1]], radius, inside: true }
                }
            },
        };
        patches.push(MaterialPatch {
            label: label.to_string(),
            reflectance,
            range_offset: n as f64 * interval,
            tilt: incidence,
            boundary,
        });
    }
    SceneLayout::new(patches, geometry.base_range_m, incidence)
}

/// Assigns each pixel to the nearest patch containing it and returns the
/// segmentation together with each pixel's range.
pub fn segment_footprint(grid: &FootprintGrid, layout: &SceneLayout) -> Result<(Segmentation, Vec<f64>)> {
    let mut labels = Vec::with_capacity(grid.len());
    let mut ranges = Vec::with_capacity(grid.len());
    for (j, &p) in grid.centers().iter().enumerate() {
        let mut best: Option<(usize, f64)> = None;
        for (n, patch) in layout.patches.iter().enumerate() {
            if !patch.boundary.contains(p) {
                continue;
            }
            let r = patch.range_at(layout.base_range, p);
            if best.is_none_or(|(_, br)| r < br) {
                best = Some((n, r));
            }
        }
        let (n, r) = best.ok_or_else(|| Error::PartitionViolation {
            pixel: j,
            reason: "no patch covers this pixel".into(),
        })?;
        labels.push(n);
        ranges.push(r);
    }
    Ok((Segmentation::from_labels(labels, layout.patches.len())?, ranges))
}

pub fn reflectance_vector(layout: &SceneLayout) -> Vec<f64> {
    layout.patches.iter().map(|p| p.reflectance).collect()
}

// JSON representation: angles in degrees, lengths in metres.

#[derive(Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
enum BoundaryJson {
    HalfPlane { offset_m: f64, angle_deg: f64 },
    Strip { lo_m: f64, hi_m: f64, angle_deg: f64 },
    Arc { center_m: [f64; 2], radius_m: f64, inside: bool },
    Full,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PatchJson {
    label: String,
    reflectance: f64,
    range_offset_m: f64,
    tilt_deg: f64,
    boundary: BoundaryJson,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LayoutJson {
    base_range_m: f64,
    incidence_deg: f64,
    patches: Vec<PatchJson>,
}

impl Serialize for SceneLayout {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let patches = self
            .patches
            .iter()
            .map(|p| PatchJson {
                label: p.label.clone(),
                reflectance: p.reflectance,
                range_offset_m: p.range_offset,
                tilt_deg: p.tilt.to_degrees(),
                boundary: match p.boundary {
                    Boundary::HalfPlane { offset, angle } => {
                        BoundaryJson::HalfPlane { offset_m: offset, angle_deg: angle.to_degrees() }
                    }
                    Boundary::Strip { lo, hi, angle } => {
                        BoundaryJson::Strip { lo_m: lo, hi_m: hi, angle_deg: angle.to_degrees() }
                    }
                    Boundary::Arc { center, radius, inside } => {
                        BoundaryJson::Arc { center_m: center, radius_m: radius, inside }
                    }
                    Boundary::Full => BoundaryJson::Full,
                },
            })
            .collect();
        LayoutJson { base_range_m: self.base_range, incidence_deg: self.incidence.to_degrees(), patches }.serialize(s)
    }
}

impl<'de> Deserialize<'de> for SceneLayout {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let j = LayoutJson::deserialize(d)?;
        let patches = j
            .patches
            .into_iter()
            .map(|p| MaterialPatch {
                label: p.label,
                reflectance: p.reflectance,
                range_offset: p.range_offset_m,
                tilt: p.tilt_deg.to_radians(),
                boundary: match p.boundary {
                    BoundaryJson::HalfPlane { offset_m, angle_deg } => {
                        Boundary::HalfPlane { offset: offset_m, angle: angle_deg.to_radians() }
                    }
                    BoundaryJson::Strip { lo_m, hi_m, angle_deg } => {
                        Boundary::Strip { lo: lo_m, hi: hi_m, angle: angle_deg.to_radians() }
                    }
                    BoundaryJson::Arc { center_m, radius_m, inside } => {
                        Boundary::Arc { center: center_m, radius: radius_m, inside }
                    }
                    BoundaryJson::Full => Boundary::Full,
                },
            })
            .collect();
        SceneLayout::new(patches, j.base_range_m, j.incidence_deg.to_radians()).map_err(serde::de::Error::custom)
    }
}
