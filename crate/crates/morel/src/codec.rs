//! Bundle ⇄ record conversion.

use morel_core::deform::DeformationField;
use morel_core::diff::{gather, scatter};
use morel_core::mlp::Mlp;
use morel_core::model::Bundle;
use morel_core::scene::{AnchorPoint, AnchorShape, AnchorSpace, BlendParams, SpaceKind, ATTRS_PER_GAUSSIAN};

use crate::format::{Data, Record, Section};

const NO_LEVEL: u32 = u32::MAX;

pub fn bundle_to_record(b: &Bundle) -> Record {
    let s = &b.space;
    let k = s.len();
    let (kind, n, t_n) = match s.kind {
        SpaceKind::Global => (0.0, 0.0, 0.0),
        SpaceKind::Key { n, t_n } => (1.0, n as f64, t_n as f64),
    };
    let sh = s.shape;
    let mut sections = vec![
        Section::f64(
            "meta.space",
            &[7],
            vec![kind, n, t_n, s.grid_voxel, sh.feature_dim as f64, sh.n_offsets as f64, sh.hidden as f64],
        ),
        Section::f64("anchor.position", &[k, 2], s.anchors.iter().flat_map(|a| a.position).collect()),
        Section::u32(
            "anchor.level",
            &[k],
            s.anchors.iter().map(|a| a.level.map_or(NO_LEVEL, u32::from)).collect(),
        ),
        Section::f64("anchor.accum_grad", &[k], s.anchors.iter().map(|a| a.accum_grad).collect()),
        Section::u32("anchor.accum_count", &[k], s.anchors.iter().map(|a| a.accum_count).collect()),
        Section::f64("anchor.opacity_stat", &[k], s.anchors.iter().map(|a| a.opacity_stat).collect()),
    ];
    if let Some(f) = &b.field {
        sections.push(Section::f64(
            "meta.field",
            &[8],
            vec![
                f.owner as f64,
                f.resolution as f64,
                f.channels as f64,
                f.mlp.hidden as f64,
                f.bbox_min[0],
                f.bbox_min[1],
                f.bbox_max[0],
                f.bbox_max[1],
            ],
        ));
    }
    for a in gather(b).arrays {
        sections.push(Section::f64(a.name, &a.shape, a.data));
    }
    Record { sections }
}

fn bad(reason: impl Into<String>) -> String {
    reason.into()
}

fn f64s<'r>(rec: &'r Record, name: &str, len: usize) -> Result<&'r [f64], String> {
    let s = rec.get(name).ok_or_else(|| bad(format!("missing section {name}")))?;
    match &s.data {
        Data::F64(v) if v.len() == len => Ok(v),
        d => Err(bad(format!("section {name}: expected {len} f64 values, found {} {}", d.len(), d.dtype_name()))),
    }
}

fn u32s<'r>(rec: &'r Record, name: &str, len: usize) -> Result<&'r [u32], String> {
    let s = rec.get(name).ok_or_else(|| bad(format!("missing section {name}")))?;
    match &s.data {
        Data::U32(v) if v.len() == len => Ok(v),
        d => Err(bad(format!("section {name}: expected {len} u32 values, found {} {}", d.len(), d.dtype_name()))),
    }
}

fn as_count(v: f64, what: &str) -> Result<usize, String> {
    if v >= 0.0 && v.fract() == 0.0 && v < 1e9 {
        Ok(v as usize)
    } else {
        Err(bad(format!("{what} = {v} is not a count")))
    }
}

/// Rebuilds a bundle; the error string says which section is inconsistent.
pub fn record_to_bundle(rec: &Record) -> Result<Bundle, String> {
    let meta = f64s(rec, "meta.space", 7)?;
    let shape = AnchorShape {
        feature_dim: as_count(meta[4], "feature_dim")?,
        n_offsets: as_count(meta[5], "n_offsets")?,
        hidden: as_count(meta[6], "hidden")?,
    };
    let kind = match meta[0] {
        0.0 => SpaceKind::Global,
        1.0 => SpaceKind::Key { n: as_count(meta[1], "n")?, t_n: as_count(meta[2], "t_n")? },
        v => return Err(bad(format!("unknown space kind {v}"))),
    };
    let pos_sec = rec.get("anchor.position").ok_or_else(|| bad("missing section anchor.position"))?;
    let k = pos_sec.dims.first().copied().unwrap_or(0) as usize;
    let pos = f64s(rec, "anchor.position", 2 * k)?;
    let levels = u32s(rec, "anchor.level", k)?;
    let accum_grad = f64s(rec, "anchor.accum_grad", k)?;
    let accum_count = u32s(rec, "anchor.accum_count", k)?;
    let opacity_stat = f64s(rec, "anchor.opacity_stat", k)?;
    let mut anchors = Vec::with_capacity(k);
    for i in 0..k {
        let level = match levels[i] {
            NO_LEVEL => None,
            l if l <= 2 => Some(l as u8),
            l => return Err(bad(format!("anchor {i} has level {l}"))),
        };
        anchors.push(AnchorPoint {
            position: [pos[2 * i], pos[2 * i + 1]],
            feature: vec![0.0; shape.feature_dim],
            log_scaling: [0.0; 2],
            offsets: vec![[0.0; 2]; shape.n_offsets],
            level,
            blend_fw: BlendParams::default(),
            blend_bw: BlendParams::default(),
            accum_grad: accum_grad[i],
            accum_count: accum_count[i],
            opacity_stat: opacity_stat[i],
        });
    }
    let decoder = Mlp::zeros(shape.feature_dim + 2, shape.hidden, shape.n_offsets * ATTRS_PER_GAUSSIAN);
    let space = AnchorSpace { anchors, decoder, grid_voxel: meta[3], kind, shape };
    let field = match rec.get("meta.field") {
        None => None,
        Some(_) => {
            let m = f64s(rec, "meta.field", 8)?;
            let r = as_count(m[1], "resolution")?;
            let c = as_count(m[2], "channels")?;
            let plane = vec![0.0; r * r * c];
            Some(DeformationField {
                owner: as_count(m[0], "owner")?,
                resolution: r,
                channels: c,
                planes: [plane.clone(), plane.clone(), plane],
                mlp: Mlp::zeros(c, as_count(m[3], "hidden")?, 4 + shape.n_offsets),
                bbox_min: [m[4], m[5]],
                bbox_max: [m[6], m[7]],
            })
        }
    };
    let mut bundle = Bundle { space, field };
    let mut params = gather(&bundle);
    for a in &mut params.arrays {
        let s = rec.get(a.name).ok_or_else(|| bad(format!("missing section {}", a.name)))?;
        let dims: Vec<usize> = s.dims.iter().map(|&d| d as usize).collect();
        if dims != a.shape {
            return Err(bad(format!("section {}: shape {:?}, expected {:?}", a.name, dims, a.shape)));
        }
        let n = a.data.len();
        a.data.copy_from_slice(f64s(rec, a.name, n)?);
    }
    scatter(&mut bundle, &params).map_err(|e| e.to_string())?;
    Ok(bundle)
}

#[cfg(test)]
mod tests {
    use super::*;
    use morel_core::deform::DeformConfig;
    use morel_core::scene::init_anchor_space;

    #[test]
    fn global_and_key_bundles_roundtrip() {
        let pts: Vec<[f64; 2]> = (0..40).map(|i| [0.1 + 0.02 * i as f64, 0.5 + 0.01 * (i % 7) as f64]).collect();
        let mut space = init_anchor_space(&pts, 0.05, 3, AnchorShape::default()).unwrap();
        space.anchors[0].level = Some(2);
        space.anchors[1].accum_count = 9;
        let b = Bundle::new(space.clone());
        assert_eq!(record_to_bundle(&bundle_to_record(&b)).unwrap(), b);
        for a in &mut space.anchors {
            a.level.get_or_insert(0);
        }
        let key = space.derive_keyframe_space(2, 40).unwrap();
        let mut b = Bundle::new(key);
        b.field = Some(DeformationField::new(2, 4, &DeformConfig::default(), 9));
        assert_eq!(record_to_bundle(&bundle_to_record(&b)).unwrap(), b);
    }
}
