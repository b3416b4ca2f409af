//! The `.vol` interchange format.
//!
//! Each object is two files: a small text sidecar (`name.vol`) and a raw
//! payload (`name.raw`) of little-endian `f32` values in `[z][y][x]` order,
//! x fastest. Multi-component objects store each component as one full
//! block, one after another.
//!
//! ```text
//! vol 1
//! shape = 32 32 32
//! spacing = 2 2 2
//! origin = -31 -31 -31
//! dtype = f32le
//! components = 3
//! kind = field
//! data = truth.raw
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::transform::DisplacementField;
use crate::volume::{Grid3, LabelKind, LabelMap, ScalarField, Volume};

const MAGIC: &str = "vol 1";

/// A decoded `.vol` object: grid, kind tag and one value block per
/// component.
#[derive(Debug, Clone, PartialEq)]
pub struct VolFile {
    pub grid: Grid3,
    pub kind: String,
    pub components: Vec<Vec<f64>>,
}

fn payload_path(path: &Path) -> PathBuf {
    path.with_extension("raw")
}

fn fmt3<T: std::fmt::Display>(v: [T; 3]) -> String {
    format!("{} {} {}", v[0], v[1], v[2])
}

impl VolFile {
    pub fn save(&self, path: &Path) -> Result<()> {
        let n = self.grid.len();
        if self.components.is_empty() || self.components.iter().any(|c| c.len() != n) {
            return Err(Error::InvalidArgument("component blocks must match the grid".into()));
        }
        let raw = payload_path(path);
        let raw_name = raw
            .file_name()
            .and_then(|s| s.to_str())
            .ok_or_else(|| Error::InvalidArgument(format!("bad path {}", path.display())))?
            .to_string();
        let header = format!(
            "{MAGIC}\nshape = {}\nspacing = {}\norigin = {}\ndtype = f32le\ncomponents = {}\nkind = {}\ndata = {}\n",
            fmt3(self.grid.shape()),
            fmt3(self.grid.spacing()),
            fmt3(self.grid.origin()),
            self.components.len(),
            self.kind,
            raw_name
        );
        let mut bytes = Vec::with_capacity(4 * n * self.components.len());
        for c in &self.components {
            for &v in c {
                bytes.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        if let Some(dir) = path.parent() {
            if !dir.as_os_str().is_empty() {
                fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            }
        }
        fs::write(&raw, bytes).map_err(|e| Error::io(&raw, e))?;
        fs::write(path, header).map_err(|e| Error::io(path, e))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bad = |reason: String| Error::Format { path: path.to_path_buf(), reason };
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut lines = text.lines();
        if lines.next().map(str::trim) != Some(MAGIC) {
            return Err(bad(format!("missing '{MAGIC}' header line")));
        }
        let mut shape = None;
        let mut spacing = None;
        let mut origin = None;
        let mut dtype = None;
        let mut comps = None;
        let mut kind = None;
        let mut data = None;
        for line in lines {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| bad(format!("expected 'key = value', got '{line}'")))?;
            let (k, v) = (k.trim(), v.trim());
            match k {
                "shape" => shape = Some(parse3::<usize>(v).ok_or_else(|| bad(format!("bad shape '{v}'")))?),
                "spacing" => spacing = Some(parse3::<f64>(v).ok_or_else(|| bad(format!("bad spacing '{v}'")))?),
                "origin" => origin = Some(parse3::<f64>(v).ok_or_else(|| bad(format!("bad origin '{v}'")))?),
                "dtype" => dtype = Some(v.to_string()),
                "components" => comps = Some(v.parse::<usize>().map_err(|_| bad(format!("bad component count '{v}'")))?),
                "kind" => kind = Some(v.to_string()),
                "data" => data = Some(v.to_string()),
                other => return Err(bad(format!("unknown key '{other}'"))),
            }
        }
        let missing = |k: &str| bad(format!("missing key '{k}'"));
        let shape = shape.ok_or_else(|| missing("shape"))?;
        let spacing = spacing.ok_or_else(|| missing("spacing"))?;
        let origin = origin.ok_or_else(|| missing("origin"))?;
        let dtype = dtype.ok_or_else(|| missing("dtype"))?;
        let comps = comps.ok_or_else(|| missing("components"))?;
        let kind = kind.ok_or_else(|| missing("kind"))?;
        let data = data.ok_or_else(|| missing("data"))?;
        if dtype != "f32le" {
            return Err(bad(format!("unsupported dtype '{dtype}'")));
        }
        if comps == 0 {
            return Err(bad("component count must be positive".into()));
        }
        let grid = Grid3::new(shape, spacing, origin).map_err(|e| bad(e.to_string()))?;
        let raw = path.parent().unwrap_or(Path::new(".")).join(&data);
        let bytes = fs::read(&raw).map_err(|e| Error::io(&raw, e))?;
        let expected = 4 * grid.len() * comps;
        if bytes.len() != expected {
            return Err(Error::Format {
                path: raw,
                reason: format!("expected {expected} bytes, found {}", bytes.len()),
            });
        }
        let mut components = Vec::with_capacity(comps);
        for block in bytes.chunks_exact(4 * grid.len()) {
            let vals: Vec<f64> = block
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
                .collect();
            if vals.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(raw.display().to_string()));
            }
            components.push(vals);
        }
        Ok(Self { grid, kind, components })
    }
}

fn parse3<T: std::str::FromStr>(s: &str) -> Option<[T; 3]> {
    let mut it = s.split_whitespace().map(|t| t.parse::<T>());
    let a = it.next()?.ok()?;
    let b = it.next()?.ok()?;
    let c = it.next()?.ok()?;
    if it.next().is_some() {
        return None;
    }
    Some([a, b, c])
}

fn expect_components(f: &VolFile, n: usize, path: &Path) -> Result<()> {
    if f.components.len() != n {
        return Err(Error::Format {
            path: path.to_path_buf(),
            reason: format!("expected {n} component(s), found {}", f.components.len()),
        });
    }
    Ok(())
}

pub fn save_volume(v: &Volume, path: &Path) -> Result<()> {
    VolFile { grid: *v.grid(), kind: "image".into(), components: vec![v.values().to_vec()] }.save(path)
}

pub fn load_volume(path: &Path) -> Result<Volume> {
    let f = VolFile::load(path)?;
    expect_components(&f, 1, path)?;
    Volume::new(f.grid, f.components.into_iter().next().unwrap_or_default())
}

pub fn save_field(d: &DisplacementField, path: &Path) -> Result<()> {
    VolFile { grid: *d.grid(), kind: "field".into(), components: d.components().to_vec() }.save(path)
}

pub fn load_field(path: &Path) -> Result<DisplacementField> {
    let f = VolFile::load(path)?;
    expect_components(&f, 3, path)?;
    let mut it = f.components.into_iter();
    let (x, y, z) = (it.next().unwrap(), it.next().unwrap(), it.next().unwrap());
    DisplacementField::new(f.grid, [x, y, z])
}

fn parse_kind(kind: &str, path: &Path) -> Result<LabelKind> {
    match kind {
        "gland" => Ok(LabelKind::Gland),
        "landmark" => Ok(LabelKind::Landmark),
        other => Err(Error::Format { path: path.to_path_buf(), reason: format!("'{other}' is not a label kind") }),
    }
}

/// Store several labels of one kind as the components of a single object.
pub fn save_labels(labels: &[&LabelMap], path: &Path) -> Result<()> {
    let first = labels.first().ok_or_else(|| Error::InvalidArgument("no labels to save".into()))?;
    let grid = *first.grid();
    for l in labels {
        grid.ensure_same(l.grid(), "label stack")?;
    }
    VolFile {
        grid,
        kind: first.kind().as_str().into(),
        components: labels.iter().map(|l| l.values().to_vec()).collect(),
    }
    .save(path)
}

pub fn load_labels(path: &Path) -> Result<Vec<LabelMap>> {
    let f = VolFile::load(path)?;
    let kind = parse_kind(&f.kind, path)?;
    f.components.into_iter().map(|c| LabelMap::soft(f.grid, c, kind)).collect()
}
