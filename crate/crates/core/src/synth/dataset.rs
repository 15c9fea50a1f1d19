use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{generate_sample, GenConfig, Sample, SegmentMap, Skeleton};
use crate::error::{Error, Result};
use crate::io::{read_flo, read_pnm, write_flo, write_pgm_bytes, write_ppm};
use crate::tensor::Shape;

pub const MANIFEST_NAME: &str = "manifest.json";
const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub id: String,
    pub image1: String,
    pub image2: String,
    pub flow: String,
    pub mask: String,
    pub segmap: String,
}

impl ManifestEntry {
    fn for_id(id: &str) -> Self {
        ManifestEntry {
            id: id.to_string(),
            image1: format!("{id}_img1.ppm"),
            image2: format!("{id}_img2.ppm"),
            flow: format!("{id}_flow.flo"),
            mask: format!("{id}_mask.pgm"),
            segmap: format!("{id}_seg.pgm"),
        }
    }

    fn files(&self) -> [&str; 5] {
        [
            &self.image1,
            &self.image2,
            &self.flow,
            &self.mask,
            &self.segmap,
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub version: u32,
    pub seed: u64,
    pub config: GenConfig,
    pub samples: Vec<ManifestEntry>,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub root: PathBuf,
    pub manifest: Manifest,
    pub samples: Vec<Sample>,
}

fn write_sample(dir: &Path, entry: &ManifestEntry, s: &Sample) -> Result<()> {
    let (h, w) = s.image1.shape().spatial();
    write_ppm(&s.image1, dir.join(&entry.image1))?;
    write_ppm(&s.image2, dir.join(&entry.image2))?;
    write_flo(&s.gt_flow, dir.join(&entry.flow))?;
    let mask: Vec<u8> = s
        .valid_mask
        .data()
        .iter()
        .map(|&m| if m > 0.5 { 255 } else { 0 })
        .collect();
    write_pgm_bytes(w, h, &mask, dir.join(&entry.mask))?;
    write_pgm_bytes(w, h, &s.segment_map.to_bytes(), dir.join(&entry.segmap))?;
    Ok(())
}

fn remove_outputs(dir: &Path, entries: &[ManifestEntry], created_dir: bool) {
    for e in entries {
        for f in e.files() {
            let _ = fs::remove_file(dir.join(f));
        }
    }
    let _ = fs::remove_file(dir.join(MANIFEST_NAME));
    if created_dir {
        let _ = fs::remove_dir(dir);
    }
}

/// Write `config.samples` samples plus `manifest.json` into `dir`.
///
/// On failure every file this call created is removed again.
pub fn generate_dataset(config: &GenConfig, dir: impl AsRef<Path>) -> Result<Manifest> {
    config.validate()?;
    let dir = dir.as_ref();
    let created_dir = !dir.exists();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let skeleton = Skeleton::humanoid(config.height);
    let entries: Vec<ManifestEntry> = (0..config.samples)
        .map(|i| ManifestEntry::for_id(&format!("{i:05}")))
        .collect();

    let written: Result<()> = entries.par_iter().enumerate().try_for_each(|(i, entry)| {
        write_sample(dir, entry, &generate_sample(config, &skeleton, i)?)
    });
    let manifest = Manifest {
        version: MANIFEST_VERSION,
        seed: config.seed,
        config: config.clone(),
        samples: entries,
    };
    let result = written.and_then(|_| {
        let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        let path = dir.join(MANIFEST_NAME);
        fs::write(&path, json + "\n").map_err(|e| Error::io(path, e))
    });
    if let Err(e) = result {
        remove_outputs(dir, &manifest.samples, created_dir);
        return Err(e);
    }
    Ok(manifest)
}

fn load_sample(dir: &Path, entry: &ManifestEntry, h: usize, w: usize) -> Result<Sample> {
    let check = |what: &str, got: (usize, usize)| {
        if got != (h, w) {
            return Err(Error::Dataset(format!(
                "{}: {what} is {}x{}, manifest says {w}x{h}",
                entry.id, got.1, got.0
            )));
        }
        Ok(())
    };
    let img1 = read_pnm(dir.join(&entry.image1))?;
    let img2 = read_pnm(dir.join(&entry.image2))?;
    let mask = read_pnm(dir.join(&entry.mask))?;
    let seg = read_pnm(dir.join(&entry.segmap))?;
    let flow = read_flo(dir.join(&entry.flow))?;
    for (what, p, ch) in [
        ("image1", &img1, 3),
        ("image2", &img2, 3),
        ("mask", &mask, 1),
        ("segmap", &seg, 1),
    ] {
        if p.channels != ch {
            return Err(Error::Dataset(format!(
                "{}: {what} has {} channel(s), expected {ch}",
                entry.id, p.channels
            )));
        }
        check(what, (p.height, p.width))?;
    }
    check("flow", flow.shape().spatial())?;
    let mut valid_mask = mask.to_tensor();
    valid_mask
        .data_mut()
        .iter_mut()
        .for_each(|m| *m = if *m > 0.5 { 1.0 } else { 0.0 });
    debug_assert_eq!(valid_mask.shape(), Shape::new(1, h, w));
    Ok(Sample {
        id: entry.id.clone(),
        image1: img1.to_tensor(),
        image2: img2.to_tensor(),
        gt_flow: flow,
        valid_mask,
        segment_map: SegmentMap::from_bytes(h, w, &seg.pixels),
    })
}

/// Read a directory written by [`generate_dataset`].
pub fn load_dataset(dir: impl AsRef<Path>) -> Result<Dataset> {
    let dir = dir.as_ref();
    let path = dir.join(MANIFEST_NAME);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: Manifest = serde_json::from_str(&text)
        .map_err(|e| Error::Dataset(format!("{}: {e}", path.display())))?;
    if manifest.version != MANIFEST_VERSION {
        return Err(Error::Dataset(format!(
            "unsupported manifest version {}",
            manifest.version
        )));
    }
    let (h, w) = (manifest.config.height, manifest.config.width);
    let samples = manifest
        .samples
        .par_iter()
        .map(|e| load_sample(dir, e, h, w))
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        root: dir.to_path_buf(),
        manifest,
        samples,
    })
}
