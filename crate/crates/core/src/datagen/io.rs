//! Dataset files: a JSON manifest per split, a label CSV (`id,c0,...`), and
//! a raw image blob of little-endian f32 in `[n, C, H, W]` row-major order.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3, ArrayView1};
use serde::{Deserialize, Serialize};

use super::{GeneratedSplit, SynthConfig};
use crate::error::{Error, Result};
use crate::labelgraph::LabelMatrix;
use crate::rng::substream;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub split: String,
    pub n_examples: usize,
    pub n_classes: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    /// Relative to the manifest's directory.
    pub labels_path: String,
    pub images_path: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub planted_groups: Option<Vec<Vec<usize>>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub config: Option<SynthConfig>,
}

/// Writes `<name>.manifest.json`, `<name>.labels.csv`, `<name>.images.bin`
/// into `dir` and returns the manifest.
pub fn write_split(
    dir: &Path,
    split: &GeneratedSplit,
    cfg: &SynthConfig,
    planted_groups: Option<&[Vec<usize>]>,
) -> Result<DatasetManifest> {
    fs::create_dir_all(dir)?;
    let labels_name = format!("{}.labels.csv", split.name);
    let images_name = format!("{}.images.bin", split.name);

    write_labels_csv(&dir.join(&labels_name), &split.labels)?;
    write_image_blob(&dir.join(&images_name), &split.images)?;

    let (c, h, w) = split.images[0].dim();
    let manifest = DatasetManifest {
        split: split.name.clone(),
        n_examples: split.labels.n_examples(),
        n_classes: split.labels.n_classes(),
        channels: c,
        height: h,
        width: w,
        labels_path: labels_name,
        images_path: images_name,
        planted_groups: planted_groups.map(|g| g.to_vec()),
        config: Some(cfg.clone()),
    };
    let manifest_path = dir.join(format!("{}.manifest.json", split.name));
    let file = File::create(&manifest_path)?;
    serde_json::to_writer_pretty(BufWriter::new(file), &manifest)?;
    Ok(manifest)
}

pub fn write_labels_csv(path: &Path, labels: &LabelMatrix) -> Result<()> {
    let mut writer = csv::Writer::from_path(path)?;
    let k = labels.n_classes();
    let mut header = vec!["id".to_string()];
    header.extend((0..k).map(|c| format!("c{c}")));
    writer.write_record(&header)?;
    for i in 0..labels.n_examples() {
        let mut row = vec![i.to_string()];
        row.extend((0..k).map(|c| if labels.get(i, c) { "1".to_string() } else { "0".to_string() }));
        writer.write_record(&row)?;
    }
    writer.flush()?;
    Ok(())
}

/// Reads a labels CSV. The header row is skipped; columns after the first
/// (`id`) are parsed positionally as binary cells, so `c0,...` and `k0,...`
/// headers are both accepted.
pub fn read_labels_csv(path: &Path) -> Result<LabelMatrix> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_path(path)?;
    let mut rows: Vec<Vec<u8>> = Vec::new();
    for record in reader.records() {
        let record = record?;
        if record.len() < 2 {
            return Err(Error::DataFormat {
                path: path.display().to_string(),
                reason: format!("row {} has fewer than two columns", rows.len() + 1),
            });
        }
        let mut row = Vec::with_capacity(record.len() - 1);
        for cell in record.iter().skip(1) {
            match cell.trim() {
                "0" => row.push(0),
                "1" => row.push(1),
                other => {
                    return Err(Error::DataFormat {
                        path: path.display().to_string(),
                        reason: format!("non-binary label cell '{other}' in row {}", rows.len() + 1),
                    })
                }
            }
        }
        if let Some(first) = rows.first() {
            if first.len() != row.len() {
                return Err(Error::DataFormat {
                    path: path.display().to_string(),
                    reason: format!("ragged row {} ({} vs {} cells)", rows.len() + 1, row.len(), first.len()),
                });
            }
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(Error::DataFormat {
            path: path.display().to_string(),
            reason: "no data rows".into(),
        });
    }
    let k = rows[0].len();
    let flat: Vec<u8> = rows.into_iter().flatten().collect();
    let n = flat.len() / k;
    LabelMatrix::new(Array2::from_shape_vec((n, k), flat).unwrap())
}

fn write_image_blob(path: &Path, images: &[Array3<f64>]) -> Result<()> {
    let file = File::create(path)?;
    let mut writer = BufWriter::new(file);
    for img in images {
        for &v in img.iter() {
            writer.write_all(&(v as f32).to_le_bytes())?;
        }
    }
    writer.flush()?;
    Ok(())
}

fn read_image_blob(
    path: &Path,
    n: usize,
    channels: usize,
    height: usize,
    width: usize,
) -> Result<Vec<Array3<f64>>> {
    let per_image = channels * height * width;
    let expected_bytes = (n * per_image * 4) as u64;
    let file = File::open(path)?;
    let actual = file.metadata()?.len();
    if actual < expected_bytes {
        return Err(Error::TruncatedBlob {
            path: path.display().to_string(),
            offset: actual,
        });
    }
    if actual > expected_bytes {
        return Err(Error::DataFormat {
            path: path.display().to_string(),
            reason: format!("blob has {actual} bytes, expected {expected_bytes}"),
        });
    }
    let mut reader = BufReader::new(file);
    let mut buf = vec![0u8; per_image * 4];
    let mut images = Vec::with_capacity(n);
    for _ in 0..n {
        reader.read_exact(&mut buf)?;
        let pixels: Vec<f64> = buf
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
            .collect();
        images.push(Array3::from_shape_vec((channels, height, width), pixels).unwrap());
    }
    Ok(images)
}

/// A fully loaded split.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub labels: LabelMatrix,
    pub images: Vec<Array3<f64>>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn image(&self, i: usize) -> &Array3<f64> {
        &self.images[i]
    }

    pub fn label_row(&self, i: usize) -> ArrayView1<'_, u8> {
        self.labels.as_array().row(i)
    }

    /// Examples in manifest order.
    pub fn iter(&self) -> impl Iterator<Item = (usize, &Array3<f64>, ArrayView1<'_, u8>)> {
        (0..self.len()).map(move |i| (i, self.image(i), self.label_row(i)))
    }

    /// A seeded shuffle of the example indices.
    pub fn shuffled_indices(&self, seed: u64) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.len()).collect();
        let mut rng = substream(seed, 0x73687566);
        for i in (1..order.len()).rev() {
            let j = rand::Rng::gen_range(&mut rng, 0..=i);
            order.swap(i, j);
        }
        order
    }
}

/// Loads a split from its manifest path, validating row/image counts.
pub fn load_dataset(manifest_path: &Path) -> Result<Dataset> {
    let raw = fs::read_to_string(manifest_path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            Error::DataFormat {
                path: manifest_path.display().to_string(),
                reason: "manifest not found".into(),
            }
        } else {
            Error::Io(e)
        }
    })?;
    let manifest: DatasetManifest = serde_json::from_str(&raw)?;
    let base: PathBuf = manifest_path
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_default();

    let labels = read_labels_csv(&base.join(&manifest.labels_path))?;
    if labels.n_examples() != manifest.n_examples || labels.n_classes() != manifest.n_classes {
        return Err(Error::DataFormat {
            path: manifest.labels_path.clone(),
            reason: format!(
                "label matrix is {}x{}, manifest says {}x{}",
                labels.n_examples(),
                labels.n_classes(),
                manifest.n_examples,
                manifest.n_classes
            ),
        });
    }
    let images = read_image_blob(
        &base.join(&manifest.images_path),
        manifest.n_examples,
        manifest.channels,
        manifest.height,
        manifest.width,
    )?;
    Ok(Dataset {
        manifest,
        labels,
        images,
    })
}
