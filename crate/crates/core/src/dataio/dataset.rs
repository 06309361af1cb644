//! On-disk dataset layout:
//!
//! ```text
//! root/manifest.json    {"version":1,"domain":"source","splits":{"train":[..],"val":[..],"test":[..]}}
//! root/<id>.pgm         P5 grayscale patch
//! root/<id>.json        {"image":"<id>","points":[[x,y],...]}  (optional for target)
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{pgm, Domain, ImagePatch};
use crate::density::PointAnnotation;
use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const MANIFEST_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::InvalidArgument(format!("unknown split {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Splits {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

impl Splits {
    pub fn get(&self, split: Split) -> &[String] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub domain: Domain,
    pub splits: Splits,
}

#[derive(Serialize, Deserialize)]
struct Sidecar {
    image: String,
    points: Vec<(f64, f64)>,
}

/// Hex SHA-256 of an id; orders items for split assignment.
pub fn split_key(id: &str) -> String {
    let digest = Sha256::digest(id.as_bytes());
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

/// Deterministic split by id hash. Items are ranked by `split_key`; the
/// first `n * train / total` go to train, the next `n * val / total` to
/// val and the remainder to test. Each list is returned sorted by id.
pub fn assign_splits(ids: &[String], ratios: [u32; 3]) -> Splits {
    let mut ranked: Vec<(String, &String)> = ids.iter().map(|id| (split_key(id), id)).collect();
    ranked.sort();
    let total = ratios.iter().sum::<u32>().max(1) as usize;
    let n = ids.len();
    let n_train = n * ratios[0] as usize / total;
    let n_val = n * ratios[1] as usize / total;
    let take = |range: std::ops::Range<usize>| {
        let mut v: Vec<String> = ranked[range].iter().map(|(_, id)| (*id).clone()).collect();
        v.sort();
        v
    };
    Splits {
        train: take(0..n_train),
        val: take(n_train..n_train + n_val),
        test: take(n_train + n_val..n),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub root: PathBuf,
    pub split: Split,
    pub domain: Domain,
    pub items: Vec<ImagePatch>,
}

impl Dataset {
    pub fn new(domain: Domain, split: Split, items: Vec<ImagePatch>) -> Self {
        let mut items = items;
        items.sort_by(|a, b| a.id.cmp(&b.id));
        Dataset {
            root: PathBuf::new(),
            split,
            domain,
            items,
        }
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Copy with every annotation dropped.
    pub fn unlabeled(&self) -> Dataset {
        Dataset {
            items: self.items.iter().map(ImagePatch::without_annotation).collect(),
            ..self.clone()
        }
    }

    /// Hex SHA-256 over ids, pixels and any annotations, in item order.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        for it in &self.items {
            h.update(it.id.as_bytes());
            h.update([0]);
            h.update((it.width as u64).to_le_bytes());
            h.update((it.height as u64).to_le_bytes());
            h.update(&it.pixels);
            if let Some(a) = &it.annotation {
                h.update((a.len() as u64).to_le_bytes());
                for (x, y) in &a.points {
                    h.update(x.to_le_bytes());
                    h.update(y.to_le_bytes());
                }
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

fn read_manifest(root: &Path) -> Result<Manifest> {
    let path = root.join(MANIFEST_FILE);
    let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let m: Manifest =
        serde_json::from_slice(&bytes).map_err(|e| Error::malformed(&path, e.to_string()))?;
    if m.version != MANIFEST_VERSION {
        return Err(Error::malformed(&path, format!("unsupported version {}", m.version)));
    }
    Ok(m)
}

pub fn write_manifest(root: &Path, manifest: &Manifest) -> Result<PathBuf> {
    let path = root.join(MANIFEST_FILE);
    let mut bytes = serde_json::to_vec_pretty(manifest)?;
    bytes.push(b'\n');
    std::fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

fn load(root: &Path, split: Split, read_labels: bool) -> Result<Dataset> {
    let manifest = read_manifest(root)?;
    let mut ids = manifest.splits.get(split).to_vec();
    ids.sort();
    let mut items = Vec::with_capacity(ids.len());
    for id in ids {
        let img_path = root.join(format!("{id}.pgm"));
        let (w, h, pixels) = pgm::read(&img_path)?;
        let mut patch = ImagePatch::new(id.clone(), w, h, pixels)?;
        if read_labels {
            let side = root.join(format!("{id}.json"));
            match std::fs::read(&side) {
                Ok(bytes) => {
                    let sc: Sidecar = serde_json::from_slice(&bytes)
                        .map_err(|e| Error::malformed(&side, e.to_string()))?;
                    if sc.image != id {
                        return Err(Error::malformed(
                            &side,
                            format!("sidecar names image {:?}", sc.image),
                        ));
                    }
                    let ann = PointAnnotation::new(sc.points);
                    if let Some(i) = ann.first_out_of_bounds(w, h) {
                        return Err(Error::malformed(
                            &side,
                            format!("point {i} {:?} outside {w}x{h}", ann.points[i]),
                        ));
                    }
                    patch.annotation = Some(ann);
                }
                Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
                    if manifest.domain == Domain::Source {
                        return Err(Error::malformed(&side, "missing annotation for source image"));
                    }
                }
                Err(e) => return Err(Error::io(&side, e)),
            }
        }
        items.push(patch);
    }
    Ok(Dataset {
        root: root.to_path_buf(),
        split,
        domain: manifest.domain,
        items,
    })
}

/// Loads one split with annotations.
pub fn load_dataset(root: &Path, split: Split) -> Result<Dataset> {
    load(root, split, true)
}

/// Loads one split without opening any annotation sidecar.
pub fn load_dataset_unlabeled(root: &Path, split: Split) -> Result<Dataset> {
    load(root, split, false)
}

/// Writes `<id>.pgm` and, when annotated, `<id>.json`; returns the image path.
pub fn save_patch(img: &ImagePatch, root: &Path) -> Result<PathBuf> {
    let path = root.join(format!("{}.pgm", img.id));
    pgm::write(&path, img.width, img.height, &img.pixels)?;
    if let Some(ann) = &img.annotation {
        let side = root.join(format!("{}.json", img.id));
        let sc = Sidecar {
            image: img.id.clone(),
            points: ann.points.clone(),
        };
        let mut bytes = serde_json::to_vec(&sc)?;
        bytes.push(b'\n');
        std::fs::write(&side, bytes).map_err(|e| Error::io(&side, e))?;
    }
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_sizes_follow_ratio() {
        let ids: Vec<String> = (0..100).map(|i| format!("img{i:04}")).collect();
        let s = assign_splits(&ids, [60, 20, 20]);
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (60, 20, 20));
        let mut all: Vec<_> = s.train.iter().chain(&s.val).chain(&s.test).cloned().collect();
        all.sort();
        assert_eq!(all, ids);
        assert_eq!(assign_splits(&ids, [60, 20, 20]), s);
    }

    #[test]
    fn split_assignment_matches_hand_computed_hashes() {
        // sha256 prefixes: a -> ca97.., b -> 3e23.., c -> 2e7d.., d -> 18ac.., e -> 3f79..
        let ids: Vec<String> = ["a", "b", "c", "d", "e"].iter().map(|s| s.to_string()).collect();
        assert!(split_key("a").starts_with("ca978112"));
        let s = assign_splits(&ids, [60, 20, 20]);
        // ranked: d, c, b, e, a -> train 3, val 1, test 1
        assert_eq!(s.train, vec!["b", "c", "d"]);
        assert_eq!(s.val, vec!["e"]);
        assert_eq!(s.test, vec!["a"]);
    }

    #[test]
    fn empty_dataset_splits() {
        let s = assign_splits(&[], [60, 20, 20]);
        assert!(s.train.is_empty() && s.val.is_empty() && s.test.is_empty());
    }
}
