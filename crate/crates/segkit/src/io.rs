//! Bit-exact file formats (TSR1 tensors, PGM masks), dataset manifests,
//! weight containers, and the metrics CSV layout.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::autograd::ParamSet;
use crate::data::{Dataset, Sample};
use crate::error::{Error, Result};
use crate::labelling::{ClassThresholds, LabelMap};
use crate::tensor::Tensor;
use crate::topology::TopologySpec;
use crate::train::EvalReport;

const TSR_MAGIC: &[u8; 4] = b"TSR1";

/// Writes a rank-3 f32 tensor: magic "TSR1", rank byte 3, three
/// little-endian u32 dims (H, W, C), then row-major little-endian f32
/// values.
pub fn tsr_write(tensor: &Tensor<f32>, path: &Path) -> Result<()> {
    if !tensor.all_finite() {
        return Err(Error::Numeric(format!(
            "refusing to write non-finite values to {}",
            path.display()
        )));
    }
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(TSR_MAGIC)?;
    w.write_all(&[3u8])?;
    let (h, wd, c) = tensor.shape();
    for dim in [h, wd, c] {
        let v = u32::try_from(dim)
            .map_err(|_| Error::InvalidDimension(format!("dimension {dim} exceeds u32")))?;
        w.write_all(&v.to_le_bytes())?;
    }
    for v in tensor.data() {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a TSR1 file back into a tensor, rejecting bad magic, non-rank-3
/// payloads, and truncated or oversized files.
pub fn tsr_read(path: &Path) -> Result<Tensor<f32>> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|_| Error::Format(format!("{}: missing TSR1 header", path.display())))?;
    if &magic != TSR_MAGIC {
        return Err(Error::Format(format!("{}: bad magic bytes", path.display())));
    }
    let mut rank = [0u8; 1];
    r.read_exact(&mut rank)
        .map_err(|_| Error::Format(format!("{}: missing rank byte", path.display())))?;
    if rank[0] != 3 {
        return Err(Error::Format(format!("{}: rank {} unsupported", path.display(), rank[0])));
    }
    let mut dims = [0usize; 3];
    for d in &mut dims {
        let mut buf = [0u8; 4];
        r.read_exact(&mut buf)
            .map_err(|_| Error::Format(format!("{}: truncated dims", path.display())))?;
        *d = u32::from_le_bytes(buf) as usize;
    }
    let count = dims[0]
        .checked_mul(dims[1])
        .and_then(|n| n.checked_mul(dims[2]))
        .ok_or_else(|| Error::Format(format!("{}: dimension overflow", path.display())))?;
    let mut payload = vec![0u8; count * 4];
    r.read_exact(&mut payload)
        .map_err(|_| Error::Format(format!("{}: truncated payload", path.display())))?;
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing)? != 0 {
        return Err(Error::Format(format!("{}: trailing bytes after payload", path.display())));
    }
    let data: Vec<f32> = payload
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    Tensor::new(dims[0], dims[1], dims[2], data)
}

/// Writes a label map as binary PGM ("P5", maxval 255), one class index
/// per pixel byte.
pub fn pgm_write(mask: &LabelMap, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write!(w, "P5\n{} {}\n255\n", mask.width(), mask.height())?;
    w.write_all(mask.data())?;
    w.flush()?;
    Ok(())
}

fn pgm_token<R: Read>(r: &mut R) -> Result<String> {
    let mut token = String::new();
    let mut in_comment = false;
    loop {
        let mut byte = [0u8; 1];
        if r.read(&mut byte)? == 0 {
            if token.is_empty() {
                return Err(Error::Format("unexpected end of PGM header".into()));
            }
            return Ok(token);
        }
        let ch = byte[0] as char;
        if in_comment {
            if ch == '\n' {
                in_comment = false;
            }
            continue;
        }
        if ch == '#' {
            in_comment = true;
            continue;
        }
        if ch.is_ascii_whitespace() {
            if token.is_empty() {
                continue;
            }
            return Ok(token);
        }
        token.push(ch);
    }
}

/// Reads a binary PGM mask; the maxval must be 255.
pub fn pgm_read(path: &Path) -> Result<LabelMap> {
    let mut r = BufReader::new(File::open(path)?);
    let magic = pgm_token(&mut r)?;
    if magic != "P5" {
        return Err(Error::Format(format!("{}: not a binary PGM", path.display())));
    }
    let parse = |s: String| -> Result<usize> {
        s.parse::<usize>().map_err(|_| Error::Format(format!("bad PGM header token '{s}'")))
    };
    let w = parse(pgm_token(&mut r)?)?;
    let h = parse(pgm_token(&mut r)?)?;
    let maxval = parse(pgm_token(&mut r)?)?;
    if maxval != 255 {
        return Err(Error::Format(format!("{}: maxval {maxval}, expected 255", path.display())));
    }
    let mut data = vec![0u8; h * w];
    r.read_exact(&mut data)
        .map_err(|_| Error::Format(format!("{}: truncated pixel data", path.display())))?;
    LabelMap::new(h, w, data)
}

/// One dataset record: where the image/mask files live and which patient
/// the slice belongs to.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub id: String,
    pub patient_id: String,
    pub image_path: String,
    pub mask_path: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<String>,
}

/// Dataset index: class count plus one record per image/mask pair. Paths
/// are relative to the manifest file's directory.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub num_classes: usize,
    pub records: Vec<ManifestRecord>,
}

pub fn manifest_write(manifest: &Manifest, path: &Path) -> Result<()> {
    let json = serde_json::to_string_pretty(manifest)?;
    fs::write(path, json)?;
    Ok(())
}

pub fn manifest_read(path: &Path) -> Result<Manifest> {
    let text = fs::read_to_string(path)?;
    Ok(serde_json::from_str(&text)?)
}

/// Loads every record of a manifest, resolving paths relative to the
/// manifest location and validating shapes and label ranges.
pub fn load_dataset(manifest_path: &Path) -> Result<Dataset> {
    let manifest = manifest_read(manifest_path)?;
    let base = manifest_path.parent().unwrap_or_else(|| Path::new("."));
    let mut samples = Vec::with_capacity(manifest.records.len());
    for rec in &manifest.records {
        let image = tsr_read(&base.join(&rec.image_path))?;
        let mask = pgm_read(&base.join(&rec.mask_path))?;
        if (image.height(), image.width()) != (mask.height(), mask.width()) {
            return Err(Error::ShapeMismatch(format!(
                "record '{}': image {}x{} vs mask {}x{}",
                rec.id,
                image.height(),
                image.width(),
                mask.height(),
                mask.width()
            )));
        }
        if mask.data().iter().any(|&v| (v as usize) >= manifest.num_classes) {
            return Err(Error::InvalidArgument(format!(
                "record '{}': mask label out of range for {} classes",
                rec.id, manifest.num_classes
            )));
        }
        samples.push(Sample {
            id: rec.id.clone(),
            patient_id: rec.patient_id.clone(),
            image,
            mask: mask.clone(),
        });
    }
    Ok(Dataset { samples, num_classes: manifest.num_classes })
}

/// Writes a dataset as TSR1 images + PGM masks + `manifest.json` under a
/// directory; returns the manifest path.
pub fn save_dataset(dataset: &Dataset, dir: &Path) -> Result<PathBuf> {
    fs::create_dir_all(dir)?;
    let mut records = Vec::with_capacity(dataset.samples.len());
    for s in &dataset.samples {
        let image_path = format!("{}.tsr1", s.id);
        let mask_path = format!("{}.pgm", s.id);
        tsr_write(&s.image, &dir.join(&image_path))?;
        pgm_write(&s.mask, &dir.join(&mask_path))?;
        records.push(ManifestRecord {
            id: s.id.clone(),
            patient_id: s.patient_id.clone(),
            image_path,
            mask_path,
            split: None,
        });
    }
    let manifest = Manifest { num_classes: dataset.num_classes, records };
    let path = dir.join("manifest.json");
    manifest_write(&manifest, &path)?;
    Ok(path)
}

/// Index entry for one parameter inside a weights container.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct WeightEntry {
    pub name: String,
    pub offset: usize,
    pub len: usize,
    pub trainable: bool,
}

/// JSON side of a weights container: the topology, its input channel
/// count, and where each named parameter lives in the flat TSR1 payload.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeightsIndex {
    pub topology: TopologySpec,
    pub in_channels: usize,
    pub params: Vec<WeightEntry>,
}

/// Saves a parameter set as a 1×1×N TSR1 value blob plus a JSON index.
pub fn weights_write(
    params: &ParamSet<f32>,
    spec: &TopologySpec,
    in_channels: usize,
    tsr_path: &Path,
    index_path: &Path,
) -> Result<()> {
    let mut values = Vec::with_capacity(params.total_values());
    let mut entries = Vec::new();
    for (id, _) in params.iter() {
        let data = params.data(id);
        entries.push(WeightEntry {
            name: params.name(id).to_string(),
            offset: values.len(),
            len: data.len(),
            trainable: params.is_trainable(id),
        });
        values.extend_from_slice(data);
    }
    let blob = Tensor::new(1, 1, values.len(), values)?;
    tsr_write(&blob, tsr_path)?;
    let index = WeightsIndex { topology: spec.clone(), in_channels, params: entries };
    fs::write(index_path, serde_json::to_string_pretty(&index)?)?;
    Ok(())
}

/// Loads a weights container back into a parameter set (in index order,
/// so ids match a freshly built network of the same topology).
pub fn weights_read(tsr_path: &Path, index_path: &Path) -> Result<(ParamSet<f32>, WeightsIndex)> {
    let index: WeightsIndex = serde_json::from_str(&fs::read_to_string(index_path)?)?;
    let blob = tsr_read(tsr_path)?;
    if blob.height() != 1 || blob.width() != 1 {
        return Err(Error::Format("weights blob must be a 1x1xN tensor".into()));
    }
    let values = blob.data();
    let mut params = ParamSet::new();
    for entry in &index.params {
        let end = entry.offset.checked_add(entry.len).filter(|&e| e <= values.len());
        let end = end.ok_or_else(|| {
            Error::Format(format!("weights entry '{}' exceeds the blob", entry.name))
        })?;
        params.add(&entry.name, values[entry.offset..end].to_vec(), entry.trainable);
    }
    Ok((params, index))
}

pub fn fold_plan_write(plan: &crate::train::FoldPlan, path: &Path) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(plan)?)?;
    Ok(())
}

pub fn fold_plan_read(path: &Path) -> Result<crate::train::FoldPlan> {
    Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
}

pub fn thresholds_write(thresholds: &ClassThresholds, path: &Path) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(thresholds)?)?;
    Ok(())
}

pub fn thresholds_read(path: &Path) -> Result<ClassThresholds> {
    let th: ClassThresholds = serde_json::from_str(&fs::read_to_string(path)?)?;
    th.validate()?;
    Ok(th)
}

/// Writes the metrics CSV: one row per (image, class) with the confusion
/// counts and IoU, per-class totals under image id "all", then the two
/// mean-IoU summary rows. Totals are recomputed from the per-image rows
/// and cross-checked against the report.
pub fn metrics_csv<W: Write>(out: &mut W, report: &EvalReport) -> Result<()> {
    use crate::labelling::{iou_per_class, ConfusionCounts};
    let num_classes = report.totals.num_classes();
    writeln!(out, "image_id,class_id,m_cc,t_c,m_c,iou")?;
    let mut check = ConfusionCounts::new(num_classes);
    for s in &report.per_image {
        let iou = iou_per_class(&s.counts);
        for c in 0..num_classes {
            writeln!(
                out,
                "{},{},{},{},{},{}",
                s.id,
                c,
                s.counts.m_cc(c),
                s.counts.t_c(c),
                s.counts.m_c(c),
                iou[c]
            )?;
        }
        check.merge(&s.counts);
    }
    if check != report.totals {
        return Err(Error::Numeric(
            "per-image confusion counts do not sum to the report totals".into(),
        ));
    }
    for c in 0..num_classes {
        writeln!(
            out,
            "all,{},{},{},{},{}",
            c,
            report.totals.m_cc(c),
            report.totals.t_c(c),
            report.totals.m_c(c),
            report.iou[c]
        )?;
    }
    writeln!(out, "all,IoU without Bg.,,,,{}", report.mean_iou_no_bg)?;
    writeln!(out, "all,IoU with Bg.,,,,{}", report.mean_iou_with_bg)?;
    Ok(())
}

/// `metrics_csv` straight to a file.
pub fn metrics_csv_file(report: &EvalReport, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    metrics_csv(&mut buf, report)?;
    fs::write(path, buf)?;
    Ok(())
}
