//! Paired source images, directory loading, random crops and the synthetic
//! toy set.

use std::path::{Path, PathBuf};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::image_io::{read_image, write_image, Chroma};
use crate::error::{Error, Result};
use crate::metrics::Gray8;
use crate::tensor::Tensor;

/// Two registered single-channel sources. `a` is the infrared (or MRI)
/// image and `b` the visible (or functional) one.
#[derive(Clone, Debug)]
pub struct ImagePair {
    pub id: String,
    pub a: Tensor,
    pub b: Tensor,
    pub chroma: Option<Chroma>,
}

fn plane_dims(t: &Tensor) -> Option<(usize, usize)> {
    match t.shape() {
        [1, h, w] => Some((*h, *w)),
        _ => None,
    }
}

impl ImagePair {
    pub fn new(id: impl Into<String>, a: Tensor, b: Tensor, chroma: Option<Chroma>) -> Result<Self> {
        let id = id.into();
        let (Some(da), Some(db)) = (plane_dims(&a), plane_dims(&b)) else {
            return Err(Error::dim(
                "image_pair",
                format!("{id}: sources must be 1xHxW, got {:?} and {:?}", a.shape(), b.shape()),
            ));
        };
        if da != db {
            return Err(Error::Pairing(format!(
                "{id}: {}x{} vs {}x{}",
                da.0, da.1, db.0, db.1
            )));
        }
        if let Some(c) = &chroma {
            if (c.h, c.w) != da {
                return Err(Error::Pairing(format!("{id}: chroma planes do not match luma")));
            }
        }
        Ok(Self { id, a, b, chroma })
    }

    pub fn height(&self) -> usize {
        self.a.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.a.shape()[2]
    }

    pub fn a8(&self) -> Gray8 {
        Gray8::quantize(&self.a).expect("single plane")
    }

    pub fn b8(&self) -> Gray8 {
        Gray8::quantize(&self.b).expect("single plane")
    }

    /// The `h×w` window with top-left corner `(top, left)` of both sources.
    pub fn window(&self, top: usize, left: usize, h: usize, w: usize) -> Result<Self> {
        if top + h > self.height() || left + w > self.width() || h == 0 || w == 0 {
            return Err(Error::contract(format!(
                "window {h}x{w} at ({top},{left}) exceeds {}x{}",
                self.height(),
                self.width()
            )));
        }
        let cut = |t: &Tensor| {
            let src_w = t.shape()[2];
            Tensor::from_fn(&[1, h, w], |i| t.data()[(top + i / w) * src_w + left + i % w])
        };
        Ok(Self {
            id: self.id.clone(),
            a: cut(&self.a),
            b: cut(&self.b),
            chroma: self.chroma.as_ref().map(|c| c.crop(top, left, h, w)),
        })
    }
}

/// Reads both files and converts colour sources to their luma plane. Chroma
/// is kept from `b` when it is colour, otherwise from `a`.
pub fn load_pair(path_a: &Path, path_b: &Path) -> Result<ImagePair> {
    let da = read_image(path_a)?;
    let db = read_image(path_b)?;
    let id = path_a
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let chroma = db.chroma.or(da.chroma);
    ImagePair::new(id, da.luma, db.luma, chroma).map_err(|e| match e {
        Error::Pairing(m) => Error::Pairing(format!(
            "{} and {}: {m}",
            path_a.display(),
            path_b.display()
        )),
        other => other,
    })
}

fn image_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir)? {
        let p = entry?.path();
        let ext = p.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase);
        if p.is_file() && matches!(ext.as_deref(), Some("png" | "pgm")) {
            out.push(p);
        }
    }
    out.sort();
    Ok(out)
}

/// Loads every pair under `dir/a` and `dir/b`, matched by file stem and
/// returned sorted by id.
pub fn load_dir(dir: &Path) -> Result<Vec<ImagePair>> {
    let (da, db) = (dir.join("a"), dir.join("b"));
    let bs = image_files(&db)?;
    let stem = |p: &Path| p.file_stem().map(|s| s.to_string_lossy().into_owned());
    let mut pairs = Vec::new();
    for pa in image_files(&da)? {
        let s = stem(&pa);
        let mut matches = bs.iter().filter(|pb| stem(pb) == s);
        let pb = matches
            .next()
            .ok_or_else(|| Error::Pairing(format!("{} has no counterpart in {}", pa.display(), db.display())))?;
        if matches.next().is_some() {
            return Err(Error::Pairing(format!("several files in {} share the stem of {}", db.display(), pa.display())));
        }
        pairs.push(load_pair(&pa, pb)?);
    }
    if pairs.len() != bs.len() {
        return Err(Error::Pairing(format!(
            "{} has {} images but {} has {}",
            da.display(),
            pairs.len(),
            db.display(),
            bs.len()
        )));
    }
    if pairs.is_empty() {
        return Err(Error::Pairing(format!("no image pairs under {}", dir.display())));
    }
    Ok(pairs)
}

/// Random `size×size` crop, the same window for both sources.
pub fn crop_sampler(pair: &ImagePair, size: usize, rng: &mut impl Rng) -> Result<ImagePair> {
    let (h, w) = (pair.height(), pair.width());
    if size == 0 || size > h.min(w) {
        return Err(Error::contract(format!("crop {size} does not fit {h}x{w}")));
    }
    let top = rng.random_range(0..=h - size);
    let left = rng.random_range(0..=w - size);
    pair.window(top, left, size, size)
}

/// Toy pairs on a dark background. Modality `a` carries bright discs and
/// modality `b` bright rectangles over a faint texture; the two shape sets
/// never overlap, so neither source alone contains all the salient content.
pub fn synthetic_pairs(count: usize, size: usize, seed: u64) -> Vec<ImagePair> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|k| {
            let n = size as f64;
            let mut occupied = vec![false; size * size];
            let mut a = vec![0.0; size * size];
            let mut b = vec![0.0; size * size];
            let (fx, fy) = (rng.random_range(0.15..0.35), rng.random_range(0.15..0.35));
            let phase = rng.random_range(0.0..std::f64::consts::TAU);
            for r in 0..size {
                for c in 0..size {
                    let i = r * size + c;
                    a[i] = 0.08 + 0.06 * (r as f64 / n);
                    b[i] = 0.2 + 0.06 * ((fx * c as f64 + fy * r as f64 + phase).sin());
                }
            }
            let mut place = |rng: &mut ChaCha8Rng, plane: &mut [f64], disc: bool| {
                for _ in 0..64 {
                    let half = rng.random_range(size / 10..=size / 5).max(2);
                    let cr = rng.random_range(half..size - half) as isize;
                    let cc = rng.random_range(half..size - half) as isize;
                    let level = rng.random_range(0.75..0.95);
                    let half = half as isize;
                    let inside = |r: isize, c: isize| {
                        let (dr, dc) = (r - cr, c - cc);
                        if disc {
                            dr * dr + dc * dc <= half * half
                        } else {
                            dr.abs() <= half && dc.abs() * 2 <= half * 3
                        }
                    };
                    let cells: Vec<usize> = (0..size as isize)
                        .flat_map(|r| (0..size as isize).map(move |c| (r, c)))
                        .filter(|&(r, c)| inside(r, c))
                        .map(|(r, c)| r as usize * size + c as usize)
                        .collect();
                    // keep a one-pixel moat between shapes of either modality
                    let clash = cells.iter().any(|&i| {
                        let (r, c) = ((i / size) as isize, (i % size) as isize);
                        (-1..=1).any(|dr| {
                            (-1..=1).any(|dc| {
                                let (rr, cc) = (r + dr, c + dc);
                                rr >= 0
                                    && cc >= 0
                                    && (rr as usize) < size
                                    && (cc as usize) < size
                                    && occupied[rr as usize * size + cc as usize]
                            })
                        })
                    });
                    if clash {
                        continue;
                    }
                    for &i in &cells {
                        occupied[i] = true;
                        plane[i] = level;
                    }
                    return;
                }
            };
            for _ in 0..2 {
                place(&mut rng, &mut a, true);
                place(&mut rng, &mut b, false);
            }
            let t = |v: Vec<f64>| Tensor::new(&[1, size, size], v).expect("plane size");
            ImagePair::new(format!("synth_{k:03}"), t(a), t(b), None).expect("equal dims")
        })
        .collect()
}

/// Writes pairs as `dir/a/<id>.pgm` and `dir/b/<id>.pgm`.
pub fn write_pairs(dir: &Path, pairs: &[ImagePair]) -> Result<()> {
    for sub in ["a", "b"] {
        std::fs::create_dir_all(dir.join(sub))?;
    }
    for p in pairs {
        write_image(&dir.join("a").join(format!("{}.pgm", p.id)), &p.a8(), None)?;
        write_image(&dir.join("b").join(format!("{}.pgm", p.id)), &p.b8(), None)?;
    }
    Ok(())
}
