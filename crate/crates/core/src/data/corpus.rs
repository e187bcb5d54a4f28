use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::image::{load_and_resize, save_ppm};
use super::split::{split_dataset, SplitRatios};
use super::synth::synth_dataset;
use super::voc::{parse_voc_xml, write_voc_xml, AnnotationRecord};
use super::{ClassMap, GroundTruth};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

/// One line of `manifest.csv`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestRow {
    pub filename: String,
    pub split: Split,
    pub class: String,
}

pub const MANIFEST: &str = "manifest.csv";
pub const IMAGE_DIR: &str = "images";
pub const ANNOTATION_DIR: &str = "annotations";

fn csv_err(path: &Path, e: csv::Error) -> Error {
    Error::Csv { path: path.to_path_buf(), detail: e.to_string() }
}

pub fn write_manifest(path: &Path, rows: &[ManifestRow]) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_path(path)
        .map_err(|e| csv_err(path, e))?;
    for row in rows {
        w.serialize(row).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestRow>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    let headers = r.headers().map_err(|e| csv_err(path, e))?.clone();
    if headers.iter().collect::<Vec<_>>() != ["filename", "split", "class"] {
        return Err(Error::Csv { path: path.to_path_buf(), detail: format!("unexpected header {headers:?}") });
    }
    r.deserialize().collect::<std::result::Result<Vec<ManifestRow>, _>>().map_err(|e| csv_err(path, e))
}

/// XML path for an image filename: `annotations/<stem>.xml`.
pub fn annotation_path(root: &Path, filename: &str) -> PathBuf {
    let stem = Path::new(filename).file_stem().map_or_else(|| filename.into(), |s| s.to_os_string());
    root.join(ANNOTATION_DIR).join(stem).with_extension("xml")
}

/// Splits annotated records per class (keyed by their first object) and
/// returns manifest rows sorted by filename.
pub fn build_manifest(records: &[AnnotationRecord], ratios: &SplitRatios, seed: u64) -> Result<Vec<ManifestRow>> {
    let mut groups: BTreeMap<String, Vec<String>> = BTreeMap::new();
    for r in records {
        let class = r
            .objects
            .first()
            .ok_or_else(|| Error::Validation(format!("{} has no object to take its class from", r.filename)))?;
        groups.entry(class.name.clone()).or_default().push(r.filename.clone());
    }
    let split = split_dataset(&groups, ratios, seed)?;
    let class_of: BTreeMap<&str, &str> =
        records.iter().map(|r| (r.filename.as_str(), r.objects[0].name.as_str())).collect();
    let mut rows: Vec<ManifestRow> = [(Split::Train, &split.train), (Split::Val, &split.val), (Split::Test, &split.test)]
        .into_iter()
        .flat_map(|(s, files)| {
            files.iter().map(move |f| (s, f)).collect::<Vec<_>>()
        })
        .map(|(split, f)| ManifestRow { filename: f.clone(), split, class: class_of[f.as_str()].to_string() })
        .collect();
    rows.sort_by(|a, b| a.filename.cmp(&b.filename));
    Ok(rows)
}

/// Generates a synthetic corpus under `root` (images, annotations and
/// manifest) and returns the manifest rows.
pub fn write_synthetic_corpus(
    root: &Path,
    n: usize,
    classes: &[String],
    size: usize,
    ratios: &SplitRatios,
    seed: u64,
) -> Result<Vec<ManifestRow>> {
    ratios.validate()?;
    let images = synth_dataset(n, classes, size, seed)?;
    for dir in [IMAGE_DIR, ANNOTATION_DIR] {
        fs::create_dir_all(root.join(dir)).map_err(|e| Error::io(root.join(dir), e))?;
    }
    for img in &images {
        save_ppm(&root.join(IMAGE_DIR).join(&img.record.filename), &img.image)?;
        let xml = annotation_path(root, &img.record.filename);
        fs::write(&xml, write_voc_xml(&img.record)).map_err(|e| Error::io(&xml, e))?;
    }
    let records: Vec<AnnotationRecord> = images.into_iter().map(|i| i.record).collect();
    let rows = build_manifest(&records, ratios, seed)?;
    write_manifest(&root.join(MANIFEST), &rows)?;
    Ok(rows)
}

/// Reads every `annotations/*.xml` under `root` (sorted by file name).
pub fn read_annotations(root: &Path) -> Result<Vec<AnnotationRecord>> {
    let dir = root.join(ANNOTATION_DIR);
    let mut paths: Vec<PathBuf> = fs::read_dir(&dir)
        .map_err(|e| Error::io(&dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "xml"))
        .collect();
    paths.sort();
    paths
        .iter()
        .map(|p| {
            let bytes = fs::read(p).map_err(|e| Error::io(p, e))?;
            parse_voc_xml(&bytes).map_err(|e| Error::Validation(format!("{}: {e}", p.display())))
        })
        .collect()
}

/// A loaded, resized image with boxes in resized coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub filename: String,
    pub split: Split,
    /// `[1, 3, S, S]`.
    pub image: Tensor,
    pub objects: Vec<GroundTruth>,
}

/// A corpus on disk: `manifest.csv`, `images/` and `annotations/`.
#[derive(Clone, Debug)]
pub struct Corpus {
    pub classes: ClassMap,
    pub samples: Vec<Sample>,
}

impl Corpus {
    /// Loads every manifest entry, resizing images to `size x size`. Class
    /// ids follow `classes` when given, otherwise the sorted class names in
    /// the manifest.
    pub fn load(root: &Path, size: usize, classes: Option<&ClassMap>) -> Result<Corpus> {
        let rows = read_manifest(&root.join(MANIFEST))?;
        let classes = match classes {
            Some(c) => c.clone(),
            None => ClassMap::new(rows.iter().map(|r| r.class.clone()).collect::<std::collections::BTreeSet<_>>().into_iter().collect())?,
        };
        let samples = rows
            .par_iter()
            .map(|row| {
                let xml_path = annotation_path(root, &row.filename);
                let bytes = fs::read(&xml_path).map_err(|e| Error::io(&xml_path, e))?;
                let record = parse_voc_xml(&bytes)
                    .map_err(|e| Error::Validation(format!("{}: {e}", xml_path.display())))?;
                let (img, sx, sy) = load_and_resize(&root.join(IMAGE_DIR).join(&row.filename), size)?;
                let objects = record
                    .objects
                    .iter()
                    .map(|o| {
                        let class_id = classes
                            .id(&o.name)
                            .ok_or_else(|| Error::Validation(format!("{}: unknown class `{}`", row.filename, o.name)))?;
                        Ok(GroundTruth { class_id, bbox: o.bbox.scaled(sx, sy)? })
                    })
                    .collect::<Result<Vec<_>>>()?;
                Ok(Sample { filename: row.filename.clone(), split: row.split, image: img.reshape(&[1, 3, size, size])?, objects })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Corpus { classes, samples })
    }

    pub fn split(&self, split: Split) -> Vec<&Sample> {
        self.samples.iter().filter(|s| s.split == split).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth::default_synth_classes;

    #[test]
    fn synthetic_corpus_round_trips_through_disk() {
        let root = std::env::temp_dir().join(format!("leafdet-corpus-{}", std::process::id()));
        let _ = fs::remove_dir_all(&root);
        let classes = default_synth_classes(3);
        let rows = write_synthetic_corpus(&root, 20, &classes, 64, &SplitRatios::default(), 4).unwrap();
        assert_eq!(rows.len(), 20);
        assert_eq!(read_manifest(&root.join(MANIFEST)).unwrap(), rows);
        let text = fs::read_to_string(root.join(MANIFEST)).unwrap();
        assert!(text.starts_with("filename,split,class\n") && !text.contains('\r'));

        let corpus = Corpus::load(&root, 64, None).unwrap();
        assert_eq!(corpus.classes.names(), &classes[..]);
        assert_eq!(corpus.samples.len(), 20);
        let synth = synth_dataset(20, &classes, 64, 4).unwrap();
        for (s, g) in corpus.samples.iter().zip(&synth) {
            assert_eq!(s.filename, g.record.filename);
            assert_eq!(s.objects[0].bbox, g.record.objects[0].bbox);
            let diff = s.image.data().iter().zip(g.image.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f32::max);
            assert!(diff <= 0.5 / 255.0 + 1e-6);
        }
        // per class 7 / 7 / 6 images: floor(4.9) = 4 train, round(1.4) = 1 val
        let train = rows.iter().filter(|r| r.split == Split::Train).count();
        assert_eq!(train, 4 + 4 + 4);

        let records = read_annotations(&root).unwrap();
        assert_eq!(build_manifest(&records, &SplitRatios::default(), 4).unwrap(), rows);
        fs::remove_dir_all(&root).unwrap();
    }
}
