//! CSV and JSON file formats.
//!
//! | file | layout |
//! |------|--------|
//! | grid | `voxel_id,x,y,z` |
//! | counts | `seed,target,count` plus a sidecar `<stem>.json` holding `{"streams_per_seed": N}` |
//! | masks | `component,voxel_id` |
//! | partition | `voxel_id,region` |
//! | manifest | `subject_id,group,counts,fmri` with paths relative to the manifest |
//! | fMRI | header of voxel ids, then one row per time point |
//!
//! Errors carry the file path and the 1-based line number.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Cohort, ComponentMask, CountRecord, StreamCounts, SubjectDataset, VoxelGrid};

fn io_error(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn format_error(path: &Path, line: usize, message: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        line,
        message: message.into(),
    }
}

/// Read a file as a string.
pub fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| io_error(path, e))
}

/// Write `contents`, creating parent directories.
pub fn write_text(path: &Path, contents: &str) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| io_error(parent, e))?;
    }
    fs::write(path, contents).map_err(|e| io_error(path, e))
}

/// Pretty JSON with a trailing newline.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value).map_err(|e| format_error(path, 0, e.to_string()))?;
    s.push('\n');
    write_text(path, &s)
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = read_text(path)?;
    serde_json::from_str(&text).map_err(|e| format_error(path, e.line(), e.to_string()))
}

/// Data rows of a CSV file with its header checked, paired with line numbers.
fn read_rows(path: &Path, header: &[&str]) -> Result<Vec<(usize, Vec<String>)>> {
    let text = read_text(path)?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let found = reader
        .headers()
        .map_err(|e| format_error(path, 1, e.to_string()))?
        .clone();
    let found: Vec<&str> = found.iter().collect();
    if found != header {
        return Err(format_error(
            path,
            1,
            format!("expected header `{}`, found `{}`", header.join(","), found.join(",")),
        ));
    }
    let mut rows = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line() as usize);
            format_error(path, line, e.to_string())
        })?;
        let line = record.position().map_or(0, |p| p.line() as usize);
        rows.push((line, record.iter().map(str::to_string).collect()));
    }
    Ok(rows)
}

fn parse<T: std::str::FromStr>(path: &Path, line: usize, field: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| format_error(path, line, format!("{field} `{value}` is not a valid value")))
}

fn voxel(grid: &VoxelGrid, path: &Path, line: usize, value: &str) -> Result<usize> {
    let id: i64 = parse(path, line, "voxel id", value)?;
    grid.index_of(id)
        .map_err(|_| format_error(path, line, format!("voxel id {id} is not in the grid")))
}

pub fn read_grid(path: &Path) -> Result<VoxelGrid> {
    let rows = read_rows(path, &["voxel_id", "x", "y", "z"])?;
    let mut ids = Vec::with_capacity(rows.len());
    let mut coords = Vec::with_capacity(rows.len());
    for (line, r) in &rows {
        ids.push(parse(path, *line, "voxel id", &r[0])?);
        coords.push([
            parse(path, *line, "x", &r[1])?,
            parse(path, *line, "y", &r[2])?,
            parse(path, *line, "z", &r[3])?,
        ]);
    }
    VoxelGrid::with_ids(ids, coords).map_err(|e| format_error(path, 0, e.to_string()))
}

pub fn grid_csv(grid: &VoxelGrid) -> String {
    let mut out = String::from("voxel_id,x,y,z\n");
    for (id, c) in grid.ids().iter().zip(grid.coords()) {
        out.push_str(&format!("{id},{},{},{}\n", c[0], c[1], c[2]));
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CountsSidecar {
    pub streams_per_seed: u32,
}

/// `counts.csv` → `counts.json`.
pub fn sidecar_path(counts: &Path) -> PathBuf {
    counts.with_extension("json")
}

pub fn read_counts(path: &Path, grid: &VoxelGrid) -> Result<StreamCounts> {
    let sidecar: CountsSidecar = read_json(&sidecar_path(path))?;
    let rows = read_rows(path, &["seed", "target", "count"])?;
    let mut records = Vec::with_capacity(rows.len());
    for (line, r) in &rows {
        let seed = voxel(grid, path, *line, &r[0])?;
        let target = voxel(grid, path, *line, &r[1])?;
        let count: u64 = parse(path, *line, "count", &r[2])?;
        if count > u64::from(sidecar.streams_per_seed) {
            return Err(format_error(
                path,
                *line,
                format!("count {count} exceeds streams per seed {}", sidecar.streams_per_seed),
            ));
        }
        records.push(CountRecord { seed, target, count });
    }
    StreamCounts::ingest_on_grid(grid, sidecar.streams_per_seed, &records)
}

/// One record per non-zero unordered pair, smaller grid index as seed.
pub fn counts_csv(counts: &StreamCounts, grid: &VoxelGrid) -> String {
    let mut out = String::from("seed,target,count\n");
    for r in counts.to_records() {
        out.push_str(&format!(
            "{},{},{}\n",
            grid.external_id(r.seed),
            grid.external_id(r.target),
            r.count
        ));
    }
    out
}

pub fn write_counts(path: &Path, counts: &StreamCounts, grid: &VoxelGrid) -> Result<()> {
    write_text(path, &counts_csv(counts, grid))?;
    write_json(
        &sidecar_path(path),
        &CountsSidecar {
            streams_per_seed: counts.streams_per_seed(),
        },
    )
}

/// Masks in order of first appearance.
pub fn read_masks(path: &Path, grid: &VoxelGrid) -> Result<Vec<ComponentMask>> {
    let rows = read_rows(path, &["component", "voxel_id"])?;
    let mut order: Vec<String> = Vec::new();
    let mut members: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    for (line, r) in &rows {
        if r[0].is_empty() {
            return Err(format_error(path, *line, "empty component label"));
        }
        let v = voxel(grid, path, *line, &r[1])?;
        let list = members.entry(r[0].clone()).or_insert_with(|| {
            order.push(r[0].clone());
            Vec::new()
        });
        if list.contains(&v) {
            return Err(format_error(
                path,
                *line,
                format!("voxel {} listed twice in {}", r[1], r[0]),
            ));
        }
        list.push(v);
    }
    order
        .into_iter()
        .map(|label| {
            let m = members.remove(&label).unwrap_or_default();
            ComponentMask::new(label, m, grid.len())
        })
        .collect()
}

/// Masks in order of first appearance, keeping those with fewer than two
/// voxels as `Err` so callers can report them per component.
pub fn read_masks_lenient(path: &Path, grid: &VoxelGrid) -> Result<Vec<(String, Result<ComponentMask>)>> {
    let rows = read_rows(path, &["component", "voxel_id"])?;
    let mut order: Vec<String> = Vec::new();
    let mut members: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    for (line, r) in &rows {
        if r[0].is_empty() {
            return Err(format_error(path, *line, "empty component label"));
        }
        let v = if r[1].is_empty() {
            None
        } else {
            Some(voxel(grid, path, *line, &r[1])?)
        };
        let list = members.entry(r[0].clone()).or_insert_with(|| {
            order.push(r[0].clone());
            Vec::new()
        });
        if let Some(v) = v {
            if list.contains(&v) {
                return Err(format_error(
                    path,
                    *line,
                    format!("voxel {} listed twice in {}", r[1], r[0]),
                ));
            }
            list.push(v);
        }
    }
    Ok(order
        .into_iter()
        .map(|label| {
            let m = members.remove(&label).unwrap_or_default();
            let mask = ComponentMask::new(label.clone(), m, grid.len());
            (label, mask)
        })
        .collect())
}

pub fn masks_csv(masks: &[ComponentMask], grid: &VoxelGrid) -> String {
    let mut out = String::from("component,voxel_id\n");
    for m in masks {
        for &v in m.members() {
            out.push_str(&format!("{},{}\n", m.label(), grid.external_id(v)));
        }
    }
    out
}

/// Parcellation as `(voxel index, region label)`.
pub fn read_partition(path: &Path, grid: &VoxelGrid) -> Result<Vec<(usize, String)>> {
    let rows = read_rows(path, &["voxel_id", "region"])?;
    let mut seen = vec![false; grid.len()];
    let mut out = Vec::with_capacity(rows.len());
    for (line, r) in &rows {
        let v = voxel(grid, path, *line, &r[0])?;
        if std::mem::replace(&mut seen[v], true) {
            return Err(format_error(path, *line, format!("voxel {} assigned twice", r[0])));
        }
        if r[1].is_empty() {
            return Err(format_error(path, *line, "empty region label"));
        }
        out.push((v, r[1].clone()));
    }
    Ok(out)
}

pub fn read_fmri(path: &Path, grid: &VoxelGrid) -> Result<DMatrix<f64>> {
    let text = read_text(path)?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let header = reader
        .headers()
        .map_err(|e| format_error(path, 1, e.to_string()))?
        .clone();
    let columns: Vec<usize> = header.iter().map(|h| voxel(grid, path, 1, h)).collect::<Result<_>>()?;
    if columns.len() != grid.len() {
        return Err(format_error(
            path,
            1,
            format!("{} voxel columns, grid has {}", columns.len(), grid.len()),
        ));
    }
    let mut values = Vec::new();
    let mut t = 0;
    for record in reader.records() {
        let record =
            record.map_err(|e| format_error(path, e.position().map_or(0, |p| p.line() as usize), e.to_string()))?;
        let line = record.position().map_or(0, |p| p.line() as usize);
        let mut row = vec![0.0; grid.len()];
        for (c, field) in record.iter().enumerate() {
            let x: f64 = parse(path, line, "value", field)?;
            if !x.is_finite() {
                return Err(format_error(path, line, "non-finite value"));
            }
            row[columns[c]] = x;
        }
        values.extend(row);
        t += 1;
    }
    if t == 0 {
        return Err(format_error(path, 1, "no time points"));
    }
    Ok(DMatrix::from_row_slice(t, grid.len(), &values))
}

pub fn fmri_csv(data: &DMatrix<f64>, grid: &VoxelGrid) -> String {
    let mut out = grid.ids().iter().map(|i| i.to_string()).collect::<Vec<_>>().join(",");
    out.push('\n');
    for row in data.row_iter() {
        out.push_str(&row.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(","));
        out.push('\n');
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub subject_id: String,
    pub group: Option<String>,
    pub counts: PathBuf,
    pub fmri: Option<PathBuf>,
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let rows = read_rows(path, &["subject_id", "group", "counts", "fmri"])?;
    let base = path.parent().unwrap_or(Path::new(""));
    let mut seen = std::collections::HashSet::new();
    rows.into_iter()
        .map(|(line, r)| {
            if r[0].is_empty() || !seen.insert(r[0].clone()) {
                return Err(format_error(
                    path,
                    line,
                    format!("missing or duplicate subject id `{}`", r[0]),
                ));
            }
            if r[2].is_empty() {
                return Err(format_error(path, line, "missing counts path"));
            }
            let opt = |s: &String| (!s.is_empty()).then(|| s.clone());
            Ok(ManifestEntry {
                subject_id: r[0].clone(),
                group: opt(&r[1]),
                counts: base.join(&r[2]),
                fmri: opt(&r[3]).map(|p| base.join(p)),
            })
        })
        .collect()
}

/// Manifest rows with paths written relative to `base`.
pub fn manifest_csv(entries: &[ManifestEntry], base: &Path) -> String {
    let rel = |p: &Path| p.strip_prefix(base).unwrap_or(p).display().to_string();
    let mut out = String::from("subject_id,group,counts,fmri\n");
    for e in entries {
        out.push_str(&format!(
            "{},{},{},{}\n",
            e.subject_id,
            e.group.as_deref().unwrap_or(""),
            rel(&e.counts),
            e.fmri.as_deref().map(rel).unwrap_or_default()
        ));
    }
    out
}

/// Subjects listed in a manifest, on a shared grid.
pub fn load_cohort(manifest: &Path, grid: VoxelGrid, with_fmri: bool) -> Result<Cohort> {
    let entries = read_manifest(manifest)?;
    let subjects = entries
        .into_iter()
        .map(|e| {
            let fmri = match (&e.fmri, with_fmri) {
                (Some(p), true) => Some(read_fmri(p, &grid)?),
                _ => None,
            };
            Ok(SubjectDataset {
                subject_id: e.subject_id,
                group: e.group,
                counts: read_counts(&e.counts, &grid)?,
                fmri,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Cohort::new(grid, subjects)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid() -> VoxelGrid {
        VoxelGrid::with_ids(
            vec![10, 20, 30, 40],
            vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [1.0, 1.0, 0.0]],
        )
        .unwrap()
    }

    #[test]
    fn grid_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("grid.csv");
        write_text(&p, &grid_csv(&grid())).unwrap();
        let g = read_grid(&p).unwrap();
        assert_eq!(g.ids(), grid().ids());
        assert_eq!(g.coords(), grid().coords());
    }

    #[test]
    fn counts_round_trip_with_sidecar() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s1.csv");
        write_text(&p, "seed,target,count\n10,20,10\n20,10,14\n30,40,3\n").unwrap();
        write_text(&dir.path().join("s1.json"), r#"{"streams_per_seed": 20}"#).unwrap();
        let c = read_counts(&p, &grid()).unwrap();
        assert_eq!(c.get(0, 1).unwrap(), 12);
        assert_eq!(c.get(2, 3).unwrap(), 3);
        let q = dir.path().join("out/s2.csv");
        write_counts(&q, &c, &grid()).unwrap();
        assert_eq!(read_counts(&q, &grid()).unwrap().to_dense(), c.to_dense());
    }

    #[test]
    fn errors_name_the_line() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.csv");
        write_text(&dir.path().join("c.json"), r#"{"streams_per_seed": 20}"#).unwrap();
        write_text(&p, "seed,target,count\n10,20,1\n10,99,2\n").unwrap();
        match read_counts(&p, &grid()) {
            Err(Error::Format { line, message, .. }) => {
                assert_eq!(line, 3);
                assert!(message.contains("99"));
            }
            other => panic!("{other:?}"),
        }
        write_text(&p, "seed,target,count\n10,20,21\n").unwrap();
        assert!(matches!(read_counts(&p, &grid()), Err(Error::Format { line: 2, .. })));
        write_text(&p, "seed,target,count\n10,20,x\n").unwrap();
        assert!(matches!(read_counts(&p, &grid()), Err(Error::Format { line: 2, .. })));
        write_text(&p, "from,to,count\n").unwrap();
        assert!(matches!(read_counts(&p, &grid()), Err(Error::Format { line: 1, .. })));
        let missing = dir.path().join("none.csv");
        assert!(matches!(read_counts(&missing, &grid()), Err(Error::Io { .. })));
    }

    #[test]
    fn masks_keep_file_order() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.csv");
        write_text(&p, "component,voxel_id\nB,30\nA,10\nB,40\nA,20\n").unwrap();
        let masks = read_masks(&p, &grid()).unwrap();
        assert_eq!(masks[0].label(), "B");
        assert_eq!(masks[0].members(), &[2, 3]);
        assert_eq!(masks[1].members(), &[0, 1]);
        assert_eq!(
            masks_csv(&masks, &grid()),
            "component,voxel_id\nB,30\nB,40\nA,10\nA,20\n"
        );
        write_text(&p, "component,voxel_id\nA,10\nA,10\n").unwrap();
        assert!(matches!(read_masks(&p, &grid()), Err(Error::Format { line: 3, .. })));
    }

    #[test]
    fn lenient_masks_report_small_components() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.csv");
        write_text(&p, "component,voxel_id\nA,10\nA,20\nE,\nS,30\n").unwrap();
        let masks = read_masks_lenient(&p, &grid()).unwrap();
        assert!(masks[0].1.is_ok());
        assert!(matches!(masks[1].1, Err(Error::MaskTooSmall { size: 0, .. })));
        assert!(matches!(masks[2].1, Err(Error::MaskTooSmall { size: 1, .. })));
    }

    #[test]
    fn manifest_and_fmri() {
        let dir = tempfile::tempdir().unwrap();
        let g = grid();
        let y = DMatrix::from_fn(3, 4, |t, v| (t * 4 + v) as f64 * 0.5);
        write_text(&dir.path().join("f.csv"), &fmri_csv(&y, &g)).unwrap();
        write_text(&dir.path().join("c.csv"), "seed,target,count\n10,20,1\n").unwrap();
        write_text(&dir.path().join("c.json"), r#"{"streams_per_seed": 5}"#).unwrap();
        write_text(
            &dir.path().join("manifest.csv"),
            "subject_id,group,counts,fmri\ns1,control,c.csv,f.csv\ns2,,c.csv,\n",
        )
        .unwrap();
        let cohort = load_cohort(&dir.path().join("manifest.csv"), g, true).unwrap();
        assert_eq!(cohort.subjects().len(), 2);
        assert_eq!(cohort.subjects()[0].fmri.as_ref().unwrap(), &y);
        assert_eq!(cohort.subjects()[1].group, None);
        let entries = read_manifest(&dir.path().join("manifest.csv")).unwrap();
        assert_eq!(
            manifest_csv(&entries, dir.path()),
            "subject_id,group,counts,fmri\ns1,control,c.csv,f.csv\ns2,,c.csv,\n"
        );
    }

    #[test]
    fn partition_rejects_double_assignment() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("p.csv");
        write_text(&p, "voxel_id,region\n10,a\n20,a\n30,b\n").unwrap();
        assert_eq!(read_partition(&p, &grid()).unwrap()[2], (2, "b".to_string()));
        write_text(&p, "voxel_id,region\n10,a\n10,b\n").unwrap();
        assert!(matches!(
            read_partition(&p, &grid()),
            Err(Error::Format { line: 3, .. })
        ));
    }
}
