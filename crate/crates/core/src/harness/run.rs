use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::config::{PipelineConfig, Preconditioning, ResampleMethod, SimilarityCenter};
use super::report::{round_wall_seconds, CaseRow, RunReport, SkippedCase};
use crate::error::{Error, Result};
use crate::flow::{register, save_map, warp_volume, write_diagnostics_csv, Registration};
use crate::phantom::{PanelCase, WarpDescriptor};
use crate::swd::{
    apply_similarity, build_basis, estimate_similarity, forward_swd, forward_swd_about,
    inverse_swd, FilterSpec, QuadratureSpec, Resampler, SimilarityParams, SwdBasis,
};
use crate::volume::io::{load_volume, save_volume, VolumeFormat};
use crate::volume::{rmsd, GridGeometry, ScalarVolume};

/// Spherical wave basis on the ball inscribed in `g`.
pub fn basis_for(g: &GridGeometry, l_max: usize, n_max: usize) -> Result<Arc<SwdBasis>> {
    let a = g.extent().iter().cloned().fold(f64::INFINITY, f64::min) / 2.0;
    Ok(Arc::new(build_basis(
        a,
        l_max,
        n_max,
        QuadratureSpec::for_orders(l_max, n_max),
    )?))
}

/// Intensity-weighted mean position over the positive voxels, or the grid
/// centre when there are none.
pub fn intensity_centroid(v: &ScalarVolume) -> [f64; 3] {
    let g = &v.geometry;
    let (mut m, mut w) = ([0.0; 3], 0.0);
    for (i, &x) in v.data.iter().enumerate() {
        if x > 0.0 {
            let p = g.world_of(i);
            for a in 0..3 {
                m[a] += x * p[a];
            }
            w += x;
        }
    }
    if w > 0.0 {
        m.map(|c| c / w)
    } else {
        g.center()
    }
}

/// Centre of the similarity estimated between `fixed` and a moving volume.
pub fn similarity_center(fixed: &ScalarVolume, center: SimilarityCenter) -> [f64; 3] {
    match center {
        SimilarityCenter::Centroid => intensity_centroid(fixed),
        SimilarityCenter::GridCenter => fixed.geometry.center(),
    }
}

pub struct RegisterOutcome {
    pub registration: Registration,
    /// The moving volume on the fixed grid after any prealignment; the
    /// input of the deformable stage.
    pub moving: ScalarVolume,
    pub warped: ScalarVolume,
    /// Scale and rotation taking the fixed volume onto the moving one.
    pub prealignment: Option<SimilarityParams>,
    /// Wall time of the deformable registration alone.
    pub wall_seconds: f64,
}

/// Resamples `moving` onto the fixed grid, optionally undoes a similarity
/// transform, and registers it to `fixed`.
pub fn run_register(
    fixed: &ScalarVolume,
    moving: &ScalarVolume,
    cfg: &PipelineConfig,
) -> Result<RegisterOutcome> {
    cfg.validate()?;
    let target = &fixed.geometry;
    let swd = &cfg.swd;
    let basis = match (cfg.preconditioning, swd.resample) {
        (Preconditioning::None, ResampleMethod::Trilinear) => None,
        _ => Some(basis_for(target, swd.l_max, swd.n_max)?),
    };
    let resampler = match (&basis, swd.resample) {
        (Some(b), ResampleMethod::Swd) => Resampler::Swd(b.clone()),
        _ => Resampler::Trilinear,
    };
    let mut on_grid = if moving.geometry == *target {
        moving.clone()
    } else {
        match &resampler {
            Resampler::Trilinear => moving.resample(target),
            Resampler::Swd(_) => {
                let own = basis_for(&moving.geometry, swd.l_max, swd.n_max)?;
                let p = SimilarityParams::identity(moving.geometry.center());
                apply_similarity(moving, &p, target, &Resampler::Swd(own))?
            }
        }
    };
    let mut prealignment = None;
    if cfg.preconditioning == Preconditioning::SwdSimilarity {
        let b = basis.as_ref().expect("basis built for preconditioning");
        let c = similarity_center(fixed, swd.center);
        let p = estimate_similarity(
            &forward_swd_about(fixed, b, c),
            &forward_swd_about(&on_grid, b, c),
            &swd.search,
        )?;
        on_grid = apply_similarity(&on_grid, &p.inverse(), target, &resampler)?;
        prealignment = Some(p);
    }
    let flow = cfg.registration();
    let clock = Instant::now();
    let registration = register(fixed, &on_grid, &flow)?;
    let wall_seconds = clock.elapsed().as_secs_f64();
    let warped = warp_volume(&on_grid, &registration.map)?;
    Ok(RegisterOutcome {
        registration,
        moving: on_grid,
        warped,
        prealignment,
        wall_seconds,
    })
}

pub const MAP_FILE: &str = "map.sreg";
pub const WARPED_FILE: &str = "warped.nii";
pub const SHELLS_FILE: &str = "shells.csv";
pub const PREALIGN_FILE: &str = "prealign.json";

fn json<T: Serialize>(value: &T) -> Result<String> {
    serde_json::to_string_pretty(value).map_err(|e| Error::Serde(e.to_string()))
}

fn from_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    serde_json::from_str(&fs::read_to_string(path)?)
        .map_err(|e| Error::Serde(format!("{}: {e}", path.display())))
}

/// Writes the map, the warped volume, the shell table and any prealignment.
pub fn write_register_outputs(out: &RegisterOutcome, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    save_map(&out.registration.map, &dir.join(MAP_FILE))?;
    save_volume(&out.warped, &dir.join(WARPED_FILE), VolumeFormat::Nifti1)?;
    write_diagnostics_csv(
        fs::File::create(dir.join(SHELLS_FILE))?,
        &out.registration.diagnostics,
    )?;
    if let Some(p) = &out.prealignment {
        fs::write(dir.join(PREALIGN_FILE), json(p)?)?;
    }
    Ok(())
}

/// Relative L2 error of forward then inverse transform over the voxels
/// inside the expansion ball.
pub fn swd_round_trip_error(v: &ScalarVolume, l_max: usize, n_max: usize) -> Result<f64> {
    let basis = basis_for(&v.geometry, l_max, n_max)?;
    let back = inverse_swd(&forward_swd(v, &basis), &FilterSpec::AllPass, &v.geometry)?;
    let (c, a2) = (v.geometry.center(), basis.a * basis.a);
    let (mut num, mut den) = (0.0, 0.0);
    for i in 0..v.data.len() {
        let x = v.geometry.world_of(i);
        if (0..3).map(|k| (x[k] - c[k]).powi(2)).sum::<f64>() < a2 {
            num += (back.data[i] - v.data[i]).powi(2);
            den += v.data[i] * v.data[i];
        }
    }
    if den == 0.0 {
        return Err(Error::DegenerateProfile(
            "volume is zero inside the expansion ball".into(),
        ));
    }
    Ok((num / den).sqrt())
}

/// One scored comparison of two volumes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub reference: String,
    pub test: String,
    pub rmsd: f64,
}

pub fn eval_volumes(reference: &ScalarVolume, test: &ScalarVolume) -> Result<f64> {
    rmsd(reference, test)
}

fn case_row(case_id: &str, subject: &str, kind: &str, out: &RegisterOutcome) -> CaseRow {
    let r = &out.registration;
    CaseRow {
        case_id: case_id.to_string(),
        subject: subject.to_string(),
        warp_kind: kind.to_string(),
        rmsd_before: r.rmsd_before,
        rmsd_after: r.rmsd_after,
        shells: r.map.shells.len(),
        steps: r.steps(),
        wall_seconds: round_wall_seconds(out.wall_seconds),
    }
}

/// Registers every panel member back onto its reference, one case at a time.
pub fn run_panel_cases(
    reference: &ScalarVolume,
    cases: &[PanelCase],
    cfg: &PipelineConfig,
) -> Result<(RunReport, Vec<Registration>)> {
    let subject = &cfg.panel.subject;
    let mut rows = Vec::new();
    let mut regs = Vec::new();
    for case in cases {
        let kind = case.descriptor.kind.name();
        let out = run_register(reference, &case.warped, cfg)?;
        rows.push(case_row(&case_id(subject, kind), subject, kind, &out));
        regs.push(out.registration);
    }
    Ok((
        RunReport::from_rows(rows, Vec::new(), Some(cfg.resolved())),
        regs,
    ))
}

// Panel directory layout, for subject `s` and warp kind `k`:
//   s.reference.nii   the unwarped volume
//   s.k.nii           warped volume          s.k.truth.json  ground-truth warp
//   s.k.sreg          recovered map          s.k.row.json    report row
const REFERENCE_SUFFIX: &str = ".reference.nii";
const VOLUME_SUFFIX: &str = ".nii";

pub fn case_id(subject: &str, kind: &str) -> String {
    format!("{subject}.{kind}")
}

pub fn reference_path(dir: &Path, subject: &str) -> PathBuf {
    dir.join(format!("{subject}{REFERENCE_SUFFIX}"))
}

/// Writes the reference and every panel member with its ground truth.
pub fn write_panel(
    dir: &Path,
    subject: &str,
    reference: &ScalarVolume,
    cases: &[PanelCase],
) -> Result<Vec<String>> {
    fs::create_dir_all(dir)?;
    save_volume(
        reference,
        &reference_path(dir, subject),
        VolumeFormat::Nifti1,
    )?;
    let mut ids = Vec::new();
    for case in cases {
        let id = case_id(subject, case.descriptor.kind.name());
        save_volume(
            &case.warped,
            &dir.join(format!("{id}{VOLUME_SUFFIX}")),
            VolumeFormat::Nifti1,
        )?;
        fs::write(
            dir.join(format!("{id}.truth.json")),
            json(&case.descriptor)?,
        )?;
        ids.push(id);
    }
    Ok(ids)
}

/// Case ids of every warped volume in `dir`, sorted.
fn panel_case_ids(dir: &Path) -> Result<Vec<String>> {
    let mut ids = Vec::new();
    for entry in fs::read_dir(dir)? {
        let name = entry?.file_name().to_string_lossy().into_owned();
        if name.ends_with(REFERENCE_SUFFIX) {
            continue;
        }
        if let Some(id) = name.strip_suffix(VOLUME_SUFFIX) {
            if id.contains('.') {
                ids.push(id.to_string());
            }
        }
    }
    ids.sort();
    Ok(ids)
}

fn subject_of(id: &str) -> &str {
    id.split('.').next().unwrap_or(id)
}

/// Registers every case of a panel directory, writing maps, rows and the
/// report files next to the volumes.
pub fn run_panel_dir(dir: &Path, cfg: &PipelineConfig) -> Result<RunReport> {
    cfg.validate()?;
    let mut references: BTreeMap<String, ScalarVolume> = BTreeMap::new();
    let mut skipped = Vec::new();
    for id in panel_case_ids(dir)? {
        let truth = dir.join(format!("{id}.truth.json"));
        if !truth.exists() {
            skipped.push(SkippedCase {
                case_id: id,
                reason: "missing ground truth".into(),
            });
            continue;
        }
        let descriptor: WarpDescriptor = from_json(&truth)?;
        let subject = subject_of(&id).to_string();
        if !references.contains_key(&subject) {
            let path = reference_path(dir, &subject);
            if !path.exists() {
                skipped.push(SkippedCase {
                    case_id: id,
                    reason: "missing reference volume".into(),
                });
                continue;
            }
            references.insert(subject.clone(), load_volume(&path, VolumeFormat::Nifti1)?);
        }
        let moving = load_volume(
            &dir.join(format!("{id}{VOLUME_SUFFIX}")),
            VolumeFormat::Nifti1,
        )?;
        let out = run_register(&references[&subject], &moving, cfg)?;
        save_map(&out.registration.map, &dir.join(format!("{id}.sreg")))?;
        let row = case_row(&id, &subject, descriptor.kind.name(), &out);
        fs::write(dir.join(format!("{id}.row.json")), json(&row)?)?;
    }
    let report = collect_report(dir, cfg, skipped)?;
    write_report_files(&report, dir, cfg)?;
    Ok(report)
}

fn collect_report(
    dir: &Path,
    cfg: &PipelineConfig,
    mut skipped: Vec<SkippedCase>,
) -> Result<RunReport> {
    let mut rows = Vec::new();
    for id in panel_case_ids(dir)? {
        let row = dir.join(format!("{id}.row.json"));
        if row.exists() {
            rows.push(from_json(&row)?);
        } else if !skipped.iter().any(|s| s.case_id == id) {
            let reason = if dir.join(format!("{id}.truth.json")).exists() {
                "not registered yet"
            } else {
                "missing ground truth"
            };
            skipped.push(SkippedCase {
                case_id: id,
                reason: reason.into(),
            });
        }
    }
    Ok(RunReport::from_rows(rows, skipped, Some(cfg.resolved())))
}

/// Aggregates the rows already present in a panel directory.
pub fn report_dir(dir: &Path, cfg: &PipelineConfig) -> Result<RunReport> {
    collect_report(dir, cfg, Vec::new())
}

pub const REPORT_STEM: &str = "report";

/// `report.csv` or `report.md` per the configured format, plus `report.json`.
pub fn write_report_files(report: &RunReport, dir: &Path, cfg: &PipelineConfig) -> Result<()> {
    let ext = match cfg.report_format {
        super::config::ReportFormat::Csv => "csv",
        super::config::ReportFormat::Markdown => "md",
    };
    fs::write(
        dir.join(format!("{REPORT_STEM}.{ext}")),
        report.render(cfg.report_format)?,
    )?;
    fs::write(dir.join(format!("{REPORT_STEM}.json")), report.to_json()?)?;
    Ok(())
}
