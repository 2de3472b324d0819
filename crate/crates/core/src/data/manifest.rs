use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use super::{read_image, write_pgm, GrayImage, Label, Laterality, Sample};
use crate::error::{Error, Result};
use crate::model::View;

pub const MANIFEST_COLUMNS: [&str; 7] = [
    "breast_id",
    "laterality",
    "label",
    "crop_cc",
    "crop_mlo",
    "whole_cc",
    "whole_mlo",
];

/// Reads a manifest CSV. Image paths are relative to the manifest's
/// directory; every view is resized to `image_size` and right-breast views
/// are mirrored.
pub fn load_manifest(path: &Path, image_size: usize) -> Result<Vec<Sample>> {
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::Load {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
    let headers = reader
        .headers()
        .map_err(|e| Error::Schema(format!("{}: {e}", path.display())))?
        .clone();
    let column: HashMap<&str, usize> = headers.iter().enumerate().map(|(i, h)| (h, i)).collect();
    let index = |name: &str| {
        column
            .get(name)
            .copied()
            .ok_or_else(|| Error::Schema(format!("{}: missing column {name}", path.display())))
    };
    let idx: Vec<usize> = MANIFEST_COLUMNS.iter().map(|c| index(c)).collect::<Result<_>>()?;

    let mut samples = Vec::new();
    for (row, record) in reader.records().enumerate() {
        let record = record.map_err(|e| Error::Schema(format!("{}: row {}: {e}", path.display(), row + 1)))?;
        let field = |k: usize| record.get(idx[k]).unwrap_or("");
        let laterality: Laterality = field(1).parse()?;
        let label: Label = field(2).parse()?;
        let views = View::ALL
            .iter()
            .enumerate()
            .map(|(k, view)| {
                let rel = field(3 + k);
                if rel.is_empty() {
                    return Err(Error::Schema(format!("row {}: empty {view} path", row + 1)));
                }
                let img = read_image(&base.join(rel))?.resize(image_size, image_size);
                Ok(match laterality {
                    Laterality::Right => img.flip_horizontal(),
                    Laterality::Left => img,
                })
            })
            .collect::<Result<Vec<GrayImage>>>()?;
        samples.push(Sample {
            views: views.try_into().expect("four views"),
            label,
            breast_id: field(0).to_string(),
            laterality,
        });
    }
    Ok(samples)
}

/// Writes samples as PGM files plus `manifest.csv` under `dir`, storing
/// right-breast views unmirrored so that loading restores them exactly.
pub fn write_dataset(dir: &Path, samples: &[Sample]) -> Result<PathBuf> {
    let images = dir.join("images");
    fs::create_dir_all(&images)?;
    let manifest = dir.join("manifest.csv");
    let mut w = csv::Writer::from_path(&manifest).map_err(|e| Error::Load {
        path: manifest.clone(),
        reason: e.to_string(),
    })?;
    let csv_err = |e: csv::Error| Error::Io(std::io::Error::other(e));
    w.write_record(MANIFEST_COLUMNS).map_err(csv_err)?;
    for (i, s) in samples.iter().enumerate() {
        let mut record = vec![
            s.breast_id.clone(),
            s.laterality.name().to_string(),
            s.label.name().to_string(),
        ];
        for view in View::ALL {
            let rel = format!("images/{i:05}_{view}.pgm");
            let img = match s.laterality {
                Laterality::Right => s.view(view).flip_horizontal(),
                Laterality::Left => s.view(view).clone(),
            };
            write_pgm(&dir.join(&rel), &img)?;
            record.push(rel);
        }
        w.write_record(&record).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(manifest)
}
