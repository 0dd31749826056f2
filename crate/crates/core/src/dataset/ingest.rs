use std::fs;
use std::path::Path;

use rayon::prelude::*;

use super::{derived_stem, rel_path, DatasetManifest, Origin, SampleRecord};
use crate::error::{Error, Result};
use crate::imageproc::{preprocess, write_image, PreprocessParams, SUPPORTED_EXTENSIONS};

#[derive(Debug)]
pub struct Ingested {
    pub manifest: DatasetManifest,
    /// Files skipped because of an unsupported extension.
    pub skipped: usize,
}

fn sorted_entries(dir: &Path) -> Result<Vec<fs::DirEntry>> {
    let mut entries: Vec<_> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .collect::<std::io::Result<_>>()
        .map_err(|e| Error::io(dir, e))?;
    entries.sort_by_key(|e| e.file_name());
    Ok(entries)
}

/// Scans `<root>/<class_name>/<file>` into a manifest of original records.
///
/// Class ids follow the lexicographic order of directory names. Hidden
/// entries are ignored; files with unsupported extensions are skipped and
/// counted.
pub fn ingest(root: &Path) -> Result<Ingested> {
    let mut labels = Vec::new();
    let mut records = Vec::new();
    let mut skipped = 0;
    for entry in sorted_entries(root)? {
        let name = entry.file_name().to_string_lossy().into_owned();
        if name.starts_with('.') || !entry.path().is_dir() {
            continue;
        }
        let class_id = labels.len();
        let mut class_records = Vec::new();
        for file in sorted_entries(&entry.path())? {
            let file_name = file.file_name().to_string_lossy().into_owned();
            if file_name.starts_with('.') || !file.path().is_file() {
                continue;
            }
            let supported = Path::new(&file_name)
                .extension()
                .and_then(|e| e.to_str())
                .is_some_and(|e| SUPPORTED_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()));
            if !supported {
                skipped += 1;
                continue;
            }
            class_records.push(SampleRecord {
                path: rel_path(&[&name, &file_name]),
                class_id,
                class_name: name.clone(),
                split: None,
                fold: None,
                origin: Origin::Original,
            });
        }
        if class_records.is_empty() {
            return Err(Error::Ingest(format!("class directory '{name}' contains no supported images")));
        }
        labels.push(name);
        records.extend(class_records);
    }
    if labels.is_empty() {
        return Err(Error::Ingest(format!("no class directories found under {} (0 classes)", root.display())));
    }
    if skipped > 0 {
        log::warn!("skipped {skipped} files with unsupported extensions under {}", root.display());
    }
    let manifest = DatasetManifest::new(root.to_string_lossy(), labels, 0, records);
    Ok(Ingested { manifest, skipped })
}

/// Runs the preprocessing chain on every record and writes the results as
/// PNG under `<work_dir>/<subdir>/<class>/`. The returned manifest is
/// rooted at `work_dir` and keeps each record's split and origin.
pub fn preprocess_dataset(
    manifest: &DatasetManifest,
    params: &PreprocessParams,
    work_dir: &Path,
    subdir: &str,
) -> Result<DatasetManifest> {
    params.validate()?;
    let records = manifest
        .records
        .par_iter()
        .map(|r| {
            let img = manifest.load_image(r)?;
            let out = preprocess(&img, params)?;
            let rel = rel_path(&[subdir, &r.class_name, &format!("{}.png", derived_stem(&r.path))]);
            write_image(&work_dir.join(&rel), &out)?;
            Ok(SampleRecord { path: rel, ..r.clone() })
        })
        .collect::<Result<Vec<_>>>()?;
    let out = DatasetManifest::new(work_dir.to_string_lossy(), manifest.labels.clone(), manifest.seed, records);
    out.validate()?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imageproc::ImageU8;

    fn write_dummy(path: &Path) {
        fs::create_dir_all(path.parent().unwrap()).unwrap();
        write_image(path, &ImageU8::filled(16, 16, 3, 100).unwrap()).unwrap();
    }

    #[test]
    fn ingests_sorted_classes() {
        let dir = tempfile::tempdir().unwrap();
        for (class, n) in [("late", 3), ("early", 2), ("healthy", 1)] {
            for i in 0..n {
                write_dummy(&dir.path().join(class).join(format!("{i}.png")));
            }
        }
        fs::write(dir.path().join("early").join("notes.txt"), "x").unwrap();
        fs::write(dir.path().join("README"), "x").unwrap();
        let got = ingest(dir.path()).unwrap();
        assert_eq!(got.manifest.labels, vec!["early", "healthy", "late"]);
        assert_eq!(got.manifest.records.len(), 6);
        assert_eq!(got.skipped, 1);
        assert_eq!(got.manifest.records[0].path, "early/0.png");
        assert!(got.manifest.records.iter().all(|r| r.split.is_none() && r.is_original()));
        got.manifest.validate().unwrap();
    }

    #[test]
    fn single_file() {
        let dir = tempfile::tempdir().unwrap();
        write_dummy(&dir.path().join("only").join("a.png"));
        assert_eq!(ingest(dir.path()).unwrap().manifest.records.len(), 1);
    }

    #[test]
    fn empty_root_and_empty_class() {
        let dir = tempfile::tempdir().unwrap();
        let err = ingest(dir.path()).unwrap_err().to_string();
        assert!(err.contains("0 classes"), "{err}");

        fs::create_dir_all(dir.path().join("blank")).unwrap();
        write_dummy(&dir.path().join("full").join("a.png"));
        let err = ingest(dir.path()).unwrap_err().to_string();
        assert!(err.contains("blank"), "{err}");
    }

    #[test]
    fn preprocess_writes_resized_pngs() {
        let dir = tempfile::tempdir().unwrap();
        let data = dir.path().join("data");
        write_dummy(&data.join("a").join("x.png"));
        write_dummy(&data.join("a").join("x.ppm").with_extension("png").with_file_name("y.png"));
        let m = ingest(&data).unwrap().manifest;
        let work = dir.path().join("work");
        let params = PreprocessParams { size: 8, ..Default::default() };
        let out = preprocess_dataset(&m, &params, &work, "preprocessed").unwrap();
        assert_eq!(out.records[0].path, "preprocessed/a/x.png");
        let img = out.load_image(&out.records[0]).unwrap();
        assert_eq!((img.height(), img.width()), (8, 8));
    }
}
