//! Directory archive: `manifest.json`, one `f32le` binary per modality laid
//! out `[sample][time][feature]`, a label vector and a splits file.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{
    ArchiveMeta, FeatureArchive, LabelRange, Modality, ModalityDims, ModalitySequence,
    MultimodalSample, Splits, MODALITIES,
};
use crate::error::{Error, Result};
use crate::io::{read_f32le, write_f32le};
use crate::tensor::Tensor;

pub const ARCHIVE_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
const LABEL_FILE: &str = "labels.f32";
const SPLITS_FILE: &str = "splits.json";

#[derive(Debug, Serialize, Deserialize)]
struct ModalityEntry {
    name: String,
    #[serde(rename = "T")]
    t: usize,
    f: usize,
    file: String,
    dtype: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    version: u32,
    modalities: Vec<ModalityEntry>,
    sample_count: usize,
    label_file: String,
    label_range: [f32; 2],
    splits_file: String,
    #[serde(default)]
    provenance: String,
}

pub fn save_archive(archive: &FeatureArchive, dir: &Path) -> Result<()> {
    archive.validate()?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut entries = Vec::new();
    for m in MODALITIES {
        let dims = archive.meta.dims[m.index()];
        let file = format!("{}.f32", m.name());
        let mut values = Vec::with_capacity(archive.samples.len() * dims.t * dims.f);
        for s in &archive.samples {
            values.extend_from_slice(s.seq(m).features.data());
        }
        write_f32le(&dir.join(&file), &values)?;
        entries.push(ModalityEntry {
            name: m.name().to_string(),
            t: dims.t,
            f: dims.f,
            file,
            dtype: "f32le".into(),
        });
    }
    let labels: Vec<f32> = archive.samples.iter().map(|s| s.label).collect();
    write_f32le(&dir.join(LABEL_FILE), &labels)?;
    let splits = serde_json::to_string_pretty(&archive.splits).expect("splits serialize");
    fs::write(dir.join(SPLITS_FILE), splits).map_err(|e| Error::io(dir.join(SPLITS_FILE), e))?;
    let manifest = Manifest {
        version: ARCHIVE_VERSION,
        modalities: entries,
        sample_count: archive.samples.len(),
        label_file: LABEL_FILE.into(),
        label_range: [archive.meta.label_range.lo, archive.meta.label_range.hi],
        splits_file: SPLITS_FILE.into(),
        provenance: archive.meta.provenance.clone(),
    };
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serialize");
    fs::write(dir.join(MANIFEST_FILE), text).map_err(|e| Error::io(dir.join(MANIFEST_FILE), e))
}

/// Loads and validates an archive. Non-fatal issues (such as an empty split)
/// are logged; see [`FeatureArchive::warnings`].
pub fn load_archive(dir: &Path) -> Result<FeatureArchive> {
    let mpath = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let manifest: Manifest =
        serde_json::from_str(&text).map_err(|e| Error::format("manifest", e.to_string()))?;
    if manifest.version != ARCHIVE_VERSION {
        return Err(Error::format(
            "version",
            format!("unsupported archive version {} (expected {ARCHIVE_VERSION})", manifest.version),
        ));
    }
    let n = manifest.sample_count;

    let mut dims = [ModalityDims { t: 0, f: 0 }; 3];
    let mut values: [Vec<f32>; 3] = Default::default();
    let mut seen = [false; 3];
    for (k, e) in manifest.modalities.iter().enumerate() {
        let field = format!("modalities[{k}]");
        let m = Modality::parse(&e.name)
            .ok_or_else(|| Error::format(format!("{field}.name"), format!("unknown modality `{}`", e.name)))?;
        if seen[m.index()] {
            return Err(Error::format(format!("{field}.name"), format!("duplicate modality `{m}`")));
        }
        seen[m.index()] = true;
        if e.dtype != "f32le" {
            return Err(Error::format(format!("{field}.dtype"), format!("unsupported dtype `{}`", e.dtype)));
        }
        if e.t == 0 || e.f == 0 {
            return Err(Error::format(format!("{field}.T/f"), "dimensions must be >= 1"));
        }
        let data = read_f32le(&dir.join(&e.file))?;
        let expected = n * e.t * e.f;
        if data.len() != expected {
            let per_step = if n * e.t > 0 { data.len() as f64 / (n * e.t) as f64 } else { 0.0 };
            return Err(Error::format(
                format!("{field}.f"),
                format!(
                    "modality `{m}` declares T={} f={} for {n} samples ({expected} values) but `{}` holds {} values (f would be {per_step})",
                    e.t, e.f, e.file, data.len()
                ),
            ));
        }
        dims[m.index()] = ModalityDims { t: e.t, f: e.f };
        values[m.index()] = data;
    }
    if let Some(missing) = MODALITIES.iter().find(|m| !seen[m.index()]) {
        return Err(Error::format("modalities", format!("modality `{missing}` missing")));
    }

    let labels = read_f32le(&dir.join(&manifest.label_file))?;
    if labels.len() != n {
        return Err(Error::format(
            "label_file",
            format!("{} labels for sample_count {n}", labels.len()),
        ));
    }
    let spath = dir.join(&manifest.splits_file);
    let stext = fs::read_to_string(&spath).map_err(|e| Error::io(&spath, e))?;
    let splits: Splits =
        serde_json::from_str(&stext).map_err(|e| Error::format("splits_file", e.to_string()))?;

    let mut samples = Vec::with_capacity(n);
    for i in 0..n {
        let seqs = MODALITIES.map(|m| {
            let d = dims[m.index()];
            let sz = d.t * d.f;
            let chunk = values[m.index()][i * sz..(i + 1) * sz].to_vec();
            ModalitySequence::new(m, Tensor::new(vec![d.t, d.f], chunk).expect("sized"))
                .expect("dims >= 1")
        });
        samples.push(MultimodalSample {
            seqs,
            label: labels[i],
        });
    }
    let archive = FeatureArchive {
        samples,
        splits,
        meta: ArchiveMeta {
            dims,
            label_range: LabelRange {
                lo: manifest.label_range[0],
                hi: manifest.label_range[1],
            },
            provenance: manifest.provenance,
        },
    };
    archive.validate()?;
    for w in archive.warnings() {
        log::warn!("{}: {w}", dir.display());
    }
    Ok(archive)
}
