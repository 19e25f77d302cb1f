//! `path,class,split` CSV manifests.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => Err(Error::Csv(format!("unknown split `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub path: String,
    pub class_name: String,
    pub split: Split,
}

/// Labeled file list. Class indices follow the lexicographic order of class names.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetManifest {
    pub entries: Vec<ManifestEntry>,
    pub class_names: Vec<String>,
}

impl DatasetManifest {
    pub fn from_entries(entries: Vec<ManifestEntry>) -> Result<Self> {
        if !entries.iter().any(|e| e.split == Split::Train) {
            return Err(Error::contract("manifest has no training entries"));
        }
        let class_names: Vec<String> =
            entries.iter().map(|e| e.class_name.clone()).collect::<BTreeSet<_>>().into_iter().collect();
        Ok(DatasetManifest { entries, class_names })
    }

    /// Stratified split: per class, the first `floor(train_fraction · n)` files
    /// of a seeded shuffle go to train, the rest to test.
    pub fn stratified(items: Vec<(String, String)>, train_fraction: f64, seed: u64) -> Result<Self> {
        if !(0.0..=1.0).contains(&train_fraction) {
            return Err(Error::config(format!("train fraction {train_fraction} outside [0, 1]")));
        }
        let classes: BTreeSet<String> = items.iter().map(|(_, c)| c.clone()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut entries = Vec::with_capacity(items.len());
        for class in &classes {
            let mut paths: Vec<&String> = items.iter().filter(|(_, c)| c == class).map(|(p, _)| p).collect();
            paths.shuffle(&mut rng);
            let n_train = (train_fraction * paths.len() as f64).floor() as usize;
            for (i, p) in paths.into_iter().enumerate() {
                let split = if i < n_train { Split::Train } else { Split::Test };
                entries.push(ManifestEntry { path: p.clone(), class_name: class.clone(), split });
            }
        }
        Self::from_entries(entries)
    }

    pub fn label_of(&self, class_name: &str) -> Option<usize> {
        self.class_names.binary_search_by(|c| c.as_str().cmp(class_name)).ok()
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        Self::parse_csv(&text, path)
    }

    pub fn parse_csv(text: &str, path: &Path) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(text.as_bytes());
        let header = rdr.headers().map_err(|e| Error::Csv(format!("{}: {e}", path.display())))?;
        if header.iter().collect::<Vec<_>>() != ["path", "class", "split"] {
            return Err(Error::Csv(format!("{}: header must be `path,class,split`", path.display())));
        }
        let mut entries = Vec::new();
        for rec in rdr.records() {
            let rec = rec.map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                line: e.position().map_or(0, |p| p.line() as usize),
                msg: e.to_string(),
            })?;
            let line = rec.position().map_or(0, |p| p.line() as usize);
            let split = rec[2].parse().map_err(|e: Error| Error::Parse {
                path: path.to_path_buf(),
                line,
                msg: e.to_string(),
            })?;
            entries.push(ManifestEntry { path: rec[0].to_string(), class_name: rec[1].to_string(), split });
        }
        Self::from_entries(entries)
    }

    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["path", "class", "split"]).expect("in-memory write");
        for e in &self.entries {
            w.write_record([e.path.as_str(), e.class_name.as_str(), e.split.as_str()]).expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8 input")
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_csv())?;
        Ok(())
    }

    /// Resolves an entry path relative to the manifest's directory.
    pub fn resolve(manifest_path: &Path, entry: &ManifestEntry) -> PathBuf {
        let p = Path::new(&entry.path);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            manifest_path.parent().unwrap_or(Path::new(".")).join(p)
        }
    }
}
