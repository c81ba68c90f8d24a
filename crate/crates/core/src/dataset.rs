//! On-disk datasets: one binary file per split plus a `key = value`
//! manifest recording the generator settings and content hashes.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::config::{parse_kv_text, parse_value};
use crate::error::{Error, Result};
use crate::synthdata::{generate_split, split_from_bytes, split_to_bytes, DatasetSpec, Sample, Split};

pub const MANIFEST: &str = "manifest.txt";

pub fn split_file(dir: &Path, split: Split) -> PathBuf {
    dir.join(format!("{}.i2cd", split.name()))
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().fold(String::with_capacity(2 * bytes.len()), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex(&Sha256::digest(bytes))
}

/// Hash over the per-split hashes, in split order.
fn combined_hash(split_hashes: &[String]) -> String {
    sha256_hex(split_hashes.join("\n").as_bytes())
}

pub const SPEC_KEYS: &[&str] = &[
    "num_classes",
    "image_size",
    "train_count",
    "val_count",
    "test_count",
    "clutter_blobs",
    "radius_min",
    "radius_max",
    "fg_saturation_min",
    "fg_saturation_max",
    "clutter_saturation",
    "noise",
    "seed",
];

/// Sets one generator key; `Ok(false)` if the key is not a generator key.
pub fn set_spec_key(spec: &mut DatasetSpec, key: &str, v: &str) -> Result<bool> {
    match key {
        "num_classes" => spec.num_classes = parse_value(key, v)?,
        "image_size" => spec.image_size = parse_value(key, v)?,
        "train_count" => spec.train_count = parse_value(key, v)?,
        "val_count" => spec.val_count = parse_value(key, v)?,
        "test_count" => spec.test_count = parse_value(key, v)?,
        "clutter_blobs" => spec.clutter_blobs = parse_value(key, v)?,
        "radius_min" => spec.radius_min = parse_value(key, v)?,
        "radius_max" => spec.radius_max = parse_value(key, v)?,
        "fg_saturation_min" => spec.fg_saturation.0 = parse_value(key, v)?,
        "fg_saturation_max" => spec.fg_saturation.1 = parse_value(key, v)?,
        "clutter_saturation" => spec.clutter_saturation = parse_value(key, v)?,
        "noise" => spec.noise = parse_value(key, v)?,
        "seed" => spec.seed = parse_value(key, v)?,
        _ => return Ok(false),
    }
    Ok(true)
}

pub fn spec_value(spec: &DatasetSpec, key: &str) -> String {
    match key {
        "num_classes" => spec.num_classes.to_string(),
        "image_size" => spec.image_size.to_string(),
        "train_count" => spec.train_count.to_string(),
        "val_count" => spec.val_count.to_string(),
        "test_count" => spec.test_count.to_string(),
        "clutter_blobs" => spec.clutter_blobs.to_string(),
        "radius_min" => spec.radius_min.to_string(),
        "radius_max" => spec.radius_max.to_string(),
        "fg_saturation_min" => spec.fg_saturation.0.to_string(),
        "fg_saturation_max" => spec.fg_saturation.1.to_string(),
        "clutter_saturation" => spec.clutter_saturation.to_string(),
        "noise" => spec.noise.to_string(),
        "seed" => spec.seed.to_string(),
        _ => String::new(),
    }
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub spec: DatasetSpec,
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
    pub test: Vec<Sample>,
    /// SHA-256 over the three split hashes.
    pub hash: String,
}

impl Dataset {
    pub fn split(&self, split: Split) -> &[Sample] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }
}

fn manifest_text(spec: &DatasetSpec, hashes: &[String]) -> String {
    let mut s = String::from("# synthetic shape dataset\n");
    for key in SPEC_KEYS {
        let _ = writeln!(s, "{key} = {}", spec_value(spec, key));
    }
    for (split, h) in Split::ALL.iter().zip(hashes) {
        let _ = writeln!(s, "sha256_{} = {h}", split.name());
    }
    let _ = writeln!(s, "dataset_hash = {}", combined_hash(hashes));
    s
}

/// Generates every split of `spec` into `dir`; returns the dataset hash.
pub fn write_dataset(dir: &Path, spec: &DatasetSpec) -> Result<String> {
    spec.validate()?;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut hashes = Vec::new();
    for split in Split::ALL {
        let bytes = split_to_bytes(&generate_split(spec, split)?);
        hashes.push(sha256_hex(&bytes));
        let path = split_file(dir, split);
        std::fs::write(&path, bytes).map_err(|e| Error::io(path, e))?;
    }
    let path = dir.join(MANIFEST);
    std::fs::write(&path, manifest_text(spec, &hashes)).map_err(|e| Error::io(path, e))?;
    Ok(combined_hash(&hashes))
}

/// Reads the manifest's generator settings, ignoring recorded hashes.
pub fn read_spec(path: &Path) -> Result<(DatasetSpec, Vec<(String, String)>)> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut spec = DatasetSpec::default();
    let mut rest = Vec::new();
    for (k, v) in parse_kv_text(&text)? {
        if !set_spec_key(&mut spec, &k, &v)? {
            rest.push((k, v));
        }
    }
    Ok((spec, rest))
}

/// Loads all splits, verifying them against the manifest hashes.
pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let (spec, recorded) = read_spec(&dir.join(MANIFEST))?;
    spec.validate()?;
    let lookup = |key: &str| recorded.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str());
    for (k, _) in &recorded {
        if !(k.starts_with("sha256_") || k == "dataset_hash") {
            return Err(Error::config(format!("unknown key `{k}` in dataset manifest")));
        }
    }
    let mut hashes = Vec::new();
    let mut splits = Vec::new();
    for split in Split::ALL {
        let path = split_file(dir, split);
        let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let h = sha256_hex(&bytes);
        if let Some(want) = lookup(&format!("sha256_{}", split.name())) {
            if want != h {
                return Err(Error::format(0, format!("{} does not match its manifest hash", path.display())));
            }
        }
        let samples = split_from_bytes(&bytes, spec.image_size, spec.num_classes)?;
        if samples.len() != spec.count(split) {
            return Err(Error::format(
                8,
                format!("{} holds {} samples, manifest says {}", path.display(), samples.len(), spec.count(split)),
            ));
        }
        hashes.push(h);
        splits.push(samples);
    }
    let test = splits.pop().expect("three splits");
    let val = splits.pop().expect("three splits");
    let train = splits.pop().expect("three splits");
    Ok(Dataset {
        spec,
        train,
        val,
        test,
        hash: combined_hash(&hashes),
    })
}
