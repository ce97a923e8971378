use std::path::Path;

use super::classify::LabeledSet;
use super::scene::{Annotation, Domain, Scene};
use crate::codec::{ByteReader, ByteWriter};
use crate::error::{Error, Result};
use crate::geometry::BoundingBox;

const SCENE_MAGIC: &[u8; 8] = b"DASCENES";
const CLASS_MAGIC: &[u8; 8] = b"DAPOINTS";
const VERSION: u32 = 1;

/// Writes scenes as: magic, version, height, width, domain, scene count,
/// a JSON echo of the generating parameters, then per scene the row-major
/// `f64` pixels and its annotation records.
pub fn save_dataset(
    path: impl AsRef<Path>,
    scenes: &[Scene],
    params_echo: &str,
) -> Result<()> {
    std::fs::write(path, encode_scenes(scenes, params_echo)?)?;
    Ok(())
}

/// Returns the scenes and the parameter echo.
pub fn load_dataset(path: impl AsRef<Path>) -> Result<(Vec<Scene>, String)> {
    decode_scenes(&std::fs::read(path)?)
}

pub(crate) fn encode_scenes(scenes: &[Scene], params_echo: &str) -> Result<Vec<u8>> {
    let first = scenes
        .first()
        .ok_or_else(|| Error::Contract("cannot save an empty dataset".into()))?;
    let mut w = ByteWriter::new();
    w.bytes(SCENE_MAGIC);
    w.u32(VERSION);
    w.u32(first.height as u32);
    w.u32(first.width as u32);
    w.u8(match first.domain {
        Domain::Source => 0,
        Domain::Target => 1,
    });
    w.u32(scenes.len() as u32);
    w.text(params_echo);
    for s in scenes {
        if (s.height, s.width, s.domain) != (first.height, first.width, first.domain) {
            return Err(Error::Contract("scenes differ in size or domain".into()));
        }
        w.f64s(&s.pixels);
        w.u32(s.annotations.len() as u32);
        for a in &s.annotations {
            w.f64s(&[a.bbox.x, a.bbox.y, a.bbox.w, a.bbox.h]);
            w.u8(a.label);
            match a.confidence {
                Some(c) => {
                    w.u8(1);
                    w.f64(c);
                }
                None => w.u8(0),
            }
        }
    }
    Ok(w.finish())
}

pub(crate) fn decode_scenes(bytes: &[u8]) -> Result<(Vec<Scene>, String)> {
    let mut r = ByteReader::new(bytes);
    r.expect_magic(SCENE_MAGIC)?;
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported dataset version {version}")));
    }
    let height = r.u32()? as usize;
    let width = r.u32()? as usize;
    let domain = match r.u8()? {
        0 => Domain::Source,
        1 => Domain::Target,
        d => return Err(Error::Format(format!("unknown domain tag {d}"))),
    };
    let n = r.u32()? as usize;
    let echo = r.text()?.to_owned();
    let mut scenes = Vec::with_capacity(n.min(1 << 16));
    for _ in 0..n {
        let pixels = r.f64s(height * width)?;
        let n_ann = r.u32()? as usize;
        let mut annotations = Vec::with_capacity(n_ann.min(1024));
        for _ in 0..n_ann {
            let b = r.f64s(4)?;
            let label = r.u8()?;
            let confidence = match r.u8()? {
                0 => None,
                1 => Some(r.f64()?),
                f => return Err(Error::Format(format!("bad confidence flag {f}"))),
            };
            annotations.push(Annotation {
                bbox: BoundingBox::new(b[0], b[1], b[2], b[3]),
                label,
                confidence,
            });
        }
        let scene = Scene {
            height,
            width,
            pixels,
            annotations,
            domain,
        };
        scene.validate()?;
        scenes.push(scene);
    }
    r.finish()?;
    Ok((scenes, echo))
}

pub fn save_classification_set(
    path: impl AsRef<Path>,
    set: &LabeledSet,
    params_echo: &str,
) -> Result<()> {
    set.validate()?;
    let mut w = ByteWriter::new();
    w.bytes(CLASS_MAGIC);
    w.u32(VERSION);
    w.u32(set.dim as u32);
    w.u32(set.classes as u32);
    w.u32(set.len() as u32);
    w.text(params_echo);
    for i in 0..set.len() {
        w.u32(set.labels[i] as u32);
        w.f64s(set.point(i));
    }
    std::fs::write(path, w.finish())?;
    Ok(())
}

pub fn load_classification_set(path: impl AsRef<Path>) -> Result<(LabeledSet, String)> {
    let bytes = std::fs::read(path)?;
    let mut r = ByteReader::new(&bytes);
    r.expect_magic(CLASS_MAGIC)?;
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported dataset version {version}")));
    }
    let dim = r.u32()? as usize;
    let classes = r.u32()? as usize;
    let n = r.u32()? as usize;
    let echo = r.text()?.to_owned();
    let mut features = Vec::with_capacity((n * dim).min(1 << 20));
    let mut labels = Vec::with_capacity(n.min(1 << 20));
    for _ in 0..n {
        labels.push(r.u32()? as usize);
        features.extend(r.f64s(dim)?);
    }
    r.finish()?;
    let set = LabeledSet {
        dim,
        classes,
        features,
        labels,
    };
    set.validate()?;
    Ok((set, echo))
}
