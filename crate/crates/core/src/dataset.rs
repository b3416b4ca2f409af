//! On-disk datasets: phantom case trees and prepared simulation sets.
//!
//! ```text
//! <root>/manifest                  ids, seeds, config hash
//! <root>/config                    generating config
//! <root>/cases/<id>/moving.vol     MR-like image
//! <root>/cases/<id>/fixed.vol      TRUS-like image
//! <root>/cases/<id>/labels.vol     gland: moving, fixed
//! <root>/cases/<id>/landmarks.vol  m moving landmarks, then m fixed
//! <root>/cases/<id>/truth.vol      ground-truth field
//!
//! <root>/sims/<patient>/<k>.vol    prepared local fields, mm
//! <root>/norm_stats
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use crate::config::text_hash;
use crate::error::{Error, Result};
use crate::io::{load_field, load_labels, load_volume, save_field, save_labels, save_volume};
use crate::rng::derive_seed;
use crate::sim::{
    compute_norm_stats, generate_phantom_case, prep_sim_sample, quantize, simulate_patient_sample, NormStats,
    PhantomCase, PhantomConfig, SurrogateConfig,
};
use crate::transform::{AffineRanges, DisplacementField};
use crate::volume::{Grid3, LabelKind, LabelMap, ScalarField, Volume};

const MANIFEST_MAGIC: &str = "manifest 1";

#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub kind: String,
    pub config_hash: String,
    /// (id, seed) per entry.
    pub entries: Vec<(String, u64)>,
}

impl Manifest {
    pub fn to_text(&self) -> String {
        let mut s = format!("{MANIFEST_MAGIC}\nkind = {}\nconfig_hash = {}\n", self.kind, self.config_hash);
        for (id, seed) in &self.entries {
            s.push_str(&format!("entry {id} {seed}\n"));
        }
        s
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let bad = |r: String| Error::Format { path: path.to_path_buf(), reason: r };
        let mut lines = text.lines();
        if lines.next() != Some(MANIFEST_MAGIC) {
            return Err(bad("missing manifest header".into()));
        }
        let mut kind = None;
        let mut hash = None;
        let mut entries = Vec::new();
        for line in lines.filter(|l| !l.trim().is_empty()) {
            if let Some(rest) = line.strip_prefix("entry ") {
                let mut it = rest.split_whitespace();
                let (Some(id), Some(seed), None) = (it.next(), it.next(), it.next()) else {
                    return Err(bad(format!("bad entry line '{line}'")));
                };
                let seed = seed.parse().map_err(|_| bad(format!("bad seed in '{line}'")))?;
                entries.push((id.to_string(), seed));
            } else if let Some((k, v)) = line.split_once('=') {
                match k.trim() {
                    "kind" => kind = Some(v.trim().to_string()),
                    "config_hash" => hash = Some(v.trim().to_string()),
                    other => return Err(bad(format!("unknown key '{other}'"))),
                }
            } else {
                return Err(bad(format!("unparseable line '{line}'")));
            }
        }
        Ok(Self {
            kind: kind.ok_or_else(|| bad("missing kind".into()))?,
            config_hash: hash.ok_or_else(|| bad("missing config_hash".into()))?,
            entries,
        })
    }
}

/// A registration case loaded from disk.
#[derive(Debug, Clone, PartialEq)]
pub struct CaseData {
    pub id: String,
    pub moving: Volume,
    pub fixed: Volume,
    pub moving_gland: LabelMap,
    pub fixed_gland: LabelMap,
    pub moving_landmarks: Vec<LabelMap>,
    pub fixed_landmarks: Vec<LabelMap>,
    pub truth: Option<DisplacementField>,
}

impl CaseData {
    pub fn from_phantom(id: impl Into<String>, c: PhantomCase) -> Self {
        Self {
            id: id.into(),
            moving: c.moving,
            fixed: c.fixed,
            moving_gland: c.moving_gland,
            fixed_gland: c.fixed_gland,
            moving_landmarks: c.moving_landmarks,
            fixed_landmarks: c.fixed_landmarks,
            truth: Some(c.truth),
        }
    }

    pub fn grid(&self) -> &Grid3 {
        self.fixed.grid()
    }
}

pub fn case_id(index: usize) -> String {
    format!("p{index:03}")
}

/// Refuse to write into `root` if `marker` already exists there.
pub fn ensure_writable(root: &Path, marker: &str, force: bool) -> Result<()> {
    let m = root.join(marker);
    if m.exists() && !force {
        return Err(Error::Exists(m));
    }
    fs::create_dir_all(root).map_err(|e| Error::io(root, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn write_case(dir: &Path, c: &CaseData) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut out = Vec::new();
    let p = dir.join("moving.vol");
    save_volume(&c.moving, &p)?;
    out.push(p);
    let p = dir.join("fixed.vol");
    save_volume(&c.fixed, &p)?;
    out.push(p);
    let p = dir.join("labels.vol");
    save_labels(&[&c.moving_gland, &c.fixed_gland], &p)?;
    out.push(p);
    let lms: Vec<&LabelMap> = c.moving_landmarks.iter().chain(&c.fixed_landmarks).collect();
    let p = dir.join("landmarks.vol");
    save_labels(&lms, &p)?;
    out.push(p);
    if let Some(t) = &c.truth {
        let p = dir.join("truth.vol");
        save_field(t, &p)?;
        out.push(p);
    }
    Ok(out)
}

pub fn load_case(dir: &Path, id: &str) -> Result<CaseData> {
    let moving = load_volume(&dir.join("moving.vol"))?;
    let fixed = load_volume(&dir.join("fixed.vol"))?;
    let bad = |r: &str| Error::Format { path: dir.to_path_buf(), reason: r.to_string() };
    let mut glands = load_labels(&dir.join("labels.vol"))?;
    if glands.len() != 2 || glands.iter().any(|l| l.kind() != LabelKind::Gland) {
        return Err(bad("labels.vol must hold the moving and fixed gland"));
    }
    let fixed_gland = glands.pop().expect("two labels");
    let moving_gland = glands.pop().expect("two labels");
    let mut lms = load_labels(&dir.join("landmarks.vol"))?;
    if lms.len() < 4 || lms.len() % 2 != 0 {
        return Err(bad("landmarks.vol must hold at least two paired landmarks"));
    }
    let fixed_landmarks = lms.split_off(lms.len() / 2);
    let truth_path = dir.join("truth.vol");
    let truth = if truth_path.exists() { Some(load_field(&truth_path)?) } else { None };
    moving.grid().ensure_same(fixed.grid(), "case images")?;
    Ok(CaseData {
        id: id.to_string(),
        moving,
        fixed,
        moving_gland,
        fixed_gland,
        moving_landmarks: lms,
        fixed_landmarks,
        truth,
    })
}

/// Generate `n` phantom cases under `root`. Case `i` uses seed
/// `derive_seed(seed, [i])`.
pub fn write_phantom_dataset(root: &Path, n: usize, seed: u64, cfg: &PhantomConfig, force: bool) -> Result<Vec<PathBuf>> {
    if n == 0 {
        return Err(Error::InvalidArgument("at least one case is required".into()));
    }
    cfg.validate()?;
    ensure_writable(root, "manifest", force)?;
    let cfg_text = cfg.to_text();
    let mut written = Vec::new();
    let mut entries = Vec::with_capacity(n);
    for i in 0..n {
        let id = case_id(i);
        let s = derive_seed(seed, &[i as u64]);
        let case = CaseData::from_phantom(id.clone(), generate_phantom_case(s, cfg)?);
        written.extend(write_case(&root.join("cases").join(&id), &case)?);
        entries.push((id, s));
    }
    let p = root.join("config");
    write_text(&p, &cfg_text)?;
    written.push(p);
    let m = Manifest { kind: "cases".into(), config_hash: text_hash(&cfg_text), entries };
    let p = root.join("manifest");
    write_text(&p, &m.to_text())?;
    written.push(p);
    Ok(written)
}

pub fn load_cases(root: &Path) -> Result<Vec<CaseData>> {
    let m = Manifest::load(&root.join("manifest"))?;
    if m.kind != "cases" {
        return Err(Error::Format { path: root.join("manifest"), reason: format!("expected a case manifest, got '{}'", m.kind) });
    }
    let cases: Vec<CaseData> = m.entries.iter().map(|(id, _)| load_case(&root.join("cases").join(id), id)).collect::<Result<_>>()?;
    if let Some(first) = cases.first() {
        for c in &cases[1..] {
            first.grid().ensure_same(c.grid(), &format!("case {}", c.id))?;
        }
    }
    Ok(cases)
}

/// What a simulation set is prepared for.
#[derive(Debug, Clone)]
pub struct SimSetSpec {
    pub patients: usize,
    pub per_patient: usize,
    pub seed: u64,
    pub surrogate: SurrogateConfig,
    pub train_grid: Grid3,
    pub augment: AffineRanges,
}

fn sim_config_text(s: &SimSetSpec) -> String {
    let g = s.train_grid;
    let a = s.augment;
    format!(
        "{}patients = {}\nper_patient = {}\nset_seed = {}\ngrid = {:?} {:?} {:?}\naugment = {} {} {} {} {:?} {:?}\n",
        s.surrogate.to_text(),
        s.patients,
        s.per_patient,
        s.seed,
        g.shape(),
        g.spacing(),
        g.origin(),
        a.rotation_deg,
        a.scale_min,
        a.scale_max,
        a.shear,
        a.translation,
        a.center
    )
}

fn prepare_sim_set(spec: &SimSetSpec, pool: &[LabelMap]) -> Result<(Vec<(String, u64)>, Vec<DisplacementField>)> {
    if spec.patients == 0 || spec.per_patient == 0 {
        return Err(Error::InvalidArgument("empty simulation set".into()));
    }
    spec.surrogate.validate()?;
    spec.augment.validate()?;
    let mut fields = Vec::with_capacity(spec.patients * spec.per_patient);
    let mut entries = Vec::new();
    for p in 0..spec.patients {
        for k in 0..spec.per_patient {
            let s = simulate_patient_sample(&spec.surrogate, spec.seed, p as u64, k as u64)?;
            let prep_seed = derive_seed(spec.seed, &[p as u64, k as u64, 1]);
            fields.push(quantize(&prep_sim_sample(&s, pool, &spec.train_grid, &spec.augment, prep_seed, None)?));
            entries.push((format!("{}/{k}", case_id(p)), s.seed));
        }
    }
    Ok((entries, fields))
}

/// Simulate and prepare a set in memory: fields in mm (f32-rounded) and
/// the statistics computed over them.
pub fn build_sim_set(spec: &SimSetSpec, pool: &[LabelMap]) -> Result<(Vec<DisplacementField>, NormStats)> {
    let (_, fields) = prepare_sim_set(spec, pool)?;
    let stats = compute_norm_stats(&fields)?;
    Ok((fields, stats))
}

/// Simulate, prepare and write a set; returns the frozen normalization.
///
/// Fields are stored in mm before normalization; the statistics are
/// computed over the stored (f32-rounded) values.
pub fn write_sim_dataset(root: &Path, spec: &SimSetSpec, pool: &[LabelMap], force: bool) -> Result<NormStats> {
    if spec.patients == 0 || spec.per_patient == 0 {
        return Err(Error::InvalidArgument("empty simulation set".into()));
    }
    ensure_writable(root, "manifest", force)?;
    let (entries, fields) = prepare_sim_set(spec, pool)?;
    for ((id, _), f) in entries.iter().zip(&fields) {
        save_field(f, &root.join("sims").join(format!("{id}.vol")))?;
    }
    let stats = compute_norm_stats(&fields)?;
    stats.save(&root.join("norm_stats"))?;
    let text = sim_config_text(spec);
    write_text(&root.join("config"), &text)?;
    let m = Manifest { kind: "sims".into(), config_hash: text_hash(&text), entries };
    write_text(&root.join("manifest"), &m.to_text())?;
    Ok(stats)
}

/// Prepared fields in mm and their frozen statistics.
pub fn load_sims(root: &Path) -> Result<(Vec<DisplacementField>, NormStats)> {
    let m = Manifest::load(&root.join("manifest"))?;
    if m.kind != "sims" {
        return Err(Error::Format { path: root.join("manifest"), reason: format!("expected a sims manifest, got '{}'", m.kind) });
    }
    let fields: Vec<DisplacementField> =
        m.entries.iter().map(|(id, _)| load_field(&root.join("sims").join(format!("{id}.vol")))).collect::<Result<_>>()?;
    if fields.is_empty() {
        return Err(Error::InvalidArgument("empty simulation set".into()));
    }
    let stats = NormStats::load(&root.join("norm_stats"))?;
    Ok((fields, stats))
}

/// Fixed glands for FOV matching: from real cases when available,
/// otherwise synthetic ellipsoids on the training grid.
pub fn fixed_gland_pool(cases: &[CaseData], grid: &Grid3, surrogate: &SurrogateConfig, seed: u64) -> Vec<LabelMap> {
    if !cases.is_empty() {
        return cases.iter().map(|c| c.fixed_gland.clone()).collect();
    }
    (0..8u64)
        .map(|i| {
            let mut rng = crate::rng::rng_for(seed, &[0x9001, i]);
            let e = crate::sim::draw_gland(&mut rng, &surrogate.semi_axes, 2.0);
            LabelMap::from_mask(*grid, LabelKind::Gland, |p| e.contains(p))
        })
        .collect()
}
