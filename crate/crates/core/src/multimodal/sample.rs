//! Synthetic segmentation samples and their on-disk layout.
//!
//! One directory per sample:
//!
//! ```text
//! sample_0000/
//!   patch.pgm       8-bit grayscale patch, intensity = value / 255
//!   gt_mask.pgm     255 inside the tumor region, 0 elsewhere
//!   cell_000.pgm    one binary mask per cell, same encoding
//!   cells.csv       cell_id,label,<feature columns>
//!   prompt.txt      prompt stub, one value per line
//! ```

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::metrics::{cell_label_from_segmentation, CellLabel};
use crate::error::{Error, Result};

pub const PROMPT_DIM: usize = 8;
pub const TUMOR: usize = 1;
pub const NON_TUMOR: usize = 0;
pub const CELL_LABELS: [&str; 2] = ["non-tumor", "tumor"];

#[derive(Clone, Debug, PartialEq)]
pub struct SegSample {
    pub height: usize,
    pub width: usize,
    /// `[H, W, 1]` row-major, values on the `k/255` lattice.
    pub patch: Vec<f64>,
    pub cell_masks: Vec<Vec<bool>>,
    /// `[L][F]`
    pub cell_features: Vec<Vec<f64>>,
    /// [`TUMOR`] or [`NON_TUMOR`], from the coverage rule on `gt_mask`.
    pub cell_labels: Vec<usize>,
    pub gt_mask: Vec<bool>,
    pub prompt_stub: Vec<f64>,
}

impl SegSample {
    pub fn n_cells(&self) -> usize {
        self.cell_masks.len()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.height * self.width;
        let bad = |m: String| Err(Error::Data(m));
        if self.patch.len() != n || self.gt_mask.len() != n {
            return bad(format!("patch or mask does not match {}x{}", self.height, self.width));
        }
        if self.cell_masks.len() != self.cell_features.len() || self.cell_masks.len() != self.cell_labels.len() {
            return bad("cell masks, features and labels disagree in count".into());
        }
        let mut owner = vec![false; n];
        for (i, m) in self.cell_masks.iter().enumerate() {
            if m.len() != n {
                return bad(format!("cell {i} mask has {} pixels, expected {n}", m.len()));
            }
            for (o, &px) in owner.iter_mut().zip(m) {
                if px && *o {
                    return bad(format!("cell {i} overlaps an earlier cell"));
                }
                *o |= px;
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SegSynthSpec {
    pub n_samples: usize,
    /// Patch side; must be a multiple of the encoder stride.
    pub size: usize,
    pub cells_per_region: usize,
    /// Radiomics per cell: mean, std, area, then class-signal features.
    pub n_features: usize,
    pub seed: u64,
}

impl Default for SegSynthSpec {
    fn default() -> Self {
        Self {
            n_samples: 64,
            size: 16,
            cells_per_region: 3,
            n_features: 8,
            seed: 0,
        }
    }
}

const DARK: f64 = 0.3;
const BRIGHT: f64 = 0.7;
const LEVEL_JITTER: f64 = 0.05;
const PIXEL_NOISE: f64 = 0.04;
const CELL_SIGNAL: f64 = 1.0;
const CELL_SIGNAL_NOISE: f64 = 0.7;
/// Region boundaries fall on multiples of this.
pub const REGION_ALIGN: usize = 4;

fn quantize(v: f64) -> f64 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

/// Fixed prompt stub shared by every sample.
pub fn prompt_stub() -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x7072_6f6d_7074);
    (0..PROMPT_DIM).map(|_| StandardNormal.sample(&mut rng)).collect()
}

/// Two block-aligned regions, one dark and one bright. Which of them is
/// tumor is a coin flip, so the patch alone cannot tell; the cells inside
/// each region carry both their pixel statistics and a noisy class signal.
pub fn synthesize_seg_samples(spec: &SegSynthSpec) -> Result<Vec<SegSample>> {
    let s = spec.size;
    if s < 2 * REGION_ALIGN || s % REGION_ALIGN != 0 {
        return Err(Error::Config(format!(
            "patch size {s} must be a multiple of {REGION_ALIGN} and at least {}",
            2 * REGION_ALIGN
        )));
    }
    if spec.n_features < 4 || spec.cells_per_region == 0 {
        return Err(Error::Config("need at least 4 cell features and 1 cell per region".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let prompt = prompt_stub();
    (0..spec.n_samples)
        .map(|_| synth_one(spec, &prompt, &mut rng))
        .collect()
}

fn synth_one(spec: &SegSynthSpec, prompt: &[f64], rng: &mut ChaCha8Rng) -> Result<SegSample> {
    let s = spec.size;
    let vertical = rng.random_bool(0.5);
    let cut = REGION_ALIGN * rng.random_range(1..s / REGION_ALIGN);
    let in_a = |r: usize, c: usize| if vertical { c < cut } else { r < cut };
    let a_dark = rng.random_bool(0.5);
    let a_tumor = rng.random_bool(0.5);
    let jitter = |rng: &mut ChaCha8Rng| rng.random_range(-LEVEL_JITTER..LEVEL_JITTER);
    let (dark, bright) = (DARK + jitter(rng), BRIGHT + jitter(rng));
    let (level_a, level_b) = if a_dark { (dark, bright) } else { (bright, dark) };

    let mut patch = vec![0.0; s * s];
    let mut gt_mask = vec![false; s * s];
    for r in 0..s {
        for c in 0..s {
            let a = in_a(r, c);
            let level = if a { level_a } else { level_b };
            let noise: f64 = StandardNormal.sample(rng);
            patch[r * s + c] = quantize(level + PIXEL_NOISE * noise);
            gt_mask[r * s + c] = a == a_tumor;
        }
    }

    let mut occupied = vec![false; s * s];
    let mut cell_masks = Vec::new();
    for region_a in [true, false] {
        let mut placed = 0;
        let mut attempts = 0;
        while placed < spec.cells_per_region {
            attempts += 1;
            if attempts > 10_000 {
                return Err(Error::Config(format!(
                    "could not place {} cells per region in a {s}x{s} patch",
                    spec.cells_per_region
                )));
            }
            let side = rng.random_range(2..=3);
            let (r0, c0) = (rng.random_range(0..=s - side), rng.random_range(0..=s - side));
            let pixels: Vec<usize> = (r0..r0 + side)
                .flat_map(|r| (c0..c0 + side).map(move |c| (r, c)))
                .filter(|&(r, c)| in_a(r, c) == region_a)
                .map(|(r, c)| r * s + c)
                .collect();
            if pixels.len() != side * side || pixels.iter().any(|&p| occupied[p]) {
                continue;
            }
            let mut mask = vec![false; s * s];
            for p in pixels {
                mask[p] = true;
                occupied[p] = true;
            }
            cell_masks.push(mask);
            placed += 1;
        }
    }

    let mut cell_labels = Vec::with_capacity(cell_masks.len());
    let mut cell_features = Vec::with_capacity(cell_masks.len());
    for mask in &cell_masks {
        let label = match cell_label_from_segmentation(mask, &gt_mask)?.label {
            CellLabel::Tumor => TUMOR,
            CellLabel::NonTumor => NON_TUMOR,
        };
        let vals: Vec<f64> = mask.iter().zip(&patch).filter(|(m, _)| **m).map(|(_, v)| *v).collect();
        let n = vals.len() as f64;
        let mean = vals.iter().sum::<f64>() / n;
        let std = (vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt();
        let sign = if label == TUMOR { 1.0 } else { -1.0 };
        let mut f = vec![mean, std, n / 9.0];
        for _ in 3..spec.n_features {
            let noise: f64 = StandardNormal.sample(rng);
            f.push(sign * CELL_SIGNAL + CELL_SIGNAL_NOISE * noise);
        }
        cell_labels.push(label);
        cell_features.push(f);
    }

    let sample = SegSample {
        height: s,
        width: s,
        patch,
        cell_masks,
        cell_features,
        cell_labels,
        gt_mask,
        prompt_stub: prompt.to_vec(),
    };
    sample.validate()?;
    Ok(sample)
}

// ---- PGM ---------------------------------------------------------------

pub fn write_pgm(path: &Path, width: usize, height: usize, pixels: &[u8]) -> Result<()> {
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(pixels);
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Reads a binary (P5) 8-bit PGM. Returns `(width, height, pixels)`.
pub fn read_pgm(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |m: &str| Error::Data(format!("{}: {m}", path.display()));
    let mut pos = 0;
    let mut fields = Vec::new();
    while fields.len() < 4 {
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated header"));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    pos += 1; // single whitespace byte before the raster
    if fields[0] != "P5" {
        return Err(bad("not a binary PGM (P5)"));
    }
    let parse = |s: &str| s.parse::<usize>().map_err(|_| bad("bad header number"));
    let (w, h, max) = (parse(&fields[1])?, parse(&fields[2])?, parse(&fields[3])?);
    if max != 255 {
        return Err(bad("only maxval 255 is supported"));
    }
    let raster = bytes.get(pos..pos + w * h).ok_or_else(|| bad("truncated raster"))?;
    if pos + w * h != bytes.len() {
        return Err(bad("trailing bytes after raster"));
    }
    Ok((w, h, raster.to_vec()))
}

fn to_u8(v: &[f64]) -> Vec<u8> {
    v.iter().map(|x| (x.clamp(0.0, 1.0) * 255.0).round() as u8).collect()
}

fn mask_u8(m: &[bool]) -> Vec<u8> {
    m.iter().map(|&b| if b { 255 } else { 0 }).collect()
}

fn read_mask(path: &Path, w: usize, h: usize) -> Result<Vec<bool>> {
    let (mw, mh, px) = read_pgm(path)?;
    if (mw, mh) != (w, h) {
        return Err(Error::Data(format!("{}: size {mw}x{mh}, expected {w}x{h}", path.display())));
    }
    Ok(px.into_iter().map(|v| v >= 128).collect())
}

pub fn save_sample(dir: &Path, sample: &SegSample) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let (w, h) = (sample.width, sample.height);
    write_pgm(&dir.join("patch.pgm"), w, h, &to_u8(&sample.patch))?;
    write_pgm(&dir.join("gt_mask.pgm"), w, h, &mask_u8(&sample.gt_mask))?;
    for (i, m) in sample.cell_masks.iter().enumerate() {
        write_pgm(&dir.join(format!("cell_{i:03}.pgm")), w, h, &mask_u8(m))?;
    }
    let path = dir.join("cells.csv");
    let file = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
    let mut wr = csv::Writer::from_writer(file);
    let f = sample.cell_features.first().map_or(0, Vec::len);
    let mut header = vec!["cell_id".to_string(), "label".to_string()];
    header.extend((1..=f).map(|j| format!("f{j:03}")));
    wr.write_record(&header)?;
    for (i, (feat, &label)) in sample.cell_features.iter().zip(&sample.cell_labels).enumerate() {
        let mut row = vec![format!("cell_{i:03}"), CELL_LABELS[label].to_string()];
        row.extend(feat.iter().map(|v| v.to_string()));
        wr.write_record(&row)?;
    }
    wr.flush().map_err(|e| Error::io(&path, e))?;
    let mut prompt = String::new();
    for v in &sample.prompt_stub {
        let _ = writeln!(prompt, "{v}");
    }
    let path = dir.join("prompt.txt");
    fs::write(&path, prompt).map_err(|e| Error::io(&path, e))
}

pub fn load_sample(dir: &Path) -> Result<SegSample> {
    let (w, h, px) = read_pgm(&dir.join("patch.pgm"))?;
    let patch = px.into_iter().map(|v| v as f64 / 255.0).collect();
    let gt_mask = read_mask(&dir.join("gt_mask.pgm"), w, h)?;
    let path = dir.join("cells.csv");
    let mut rd = csv::Reader::from_path(&path)?;
    let mut cell_masks = Vec::new();
    let mut cell_features = Vec::new();
    let mut cell_labels = Vec::new();
    for rec in rd.records() {
        let rec = rec?;
        if rec.len() < 3 {
            return Err(Error::Data(format!("{}: row has too few fields", path.display())));
        }
        let id = &rec[0];
        let label = CELL_LABELS
            .iter()
            .position(|l| *l == &rec[1])
            .ok_or_else(|| Error::Data(format!("{}: unknown cell label {:?}", path.display(), &rec[1])))?;
        let feats = rec
            .iter()
            .skip(2)
            .map(|v| {
                v.parse::<f64>()
                    .map_err(|_| Error::Data(format!("{}: bad number {v:?}", path.display())))
            })
            .collect::<Result<Vec<_>>>()?;
        cell_masks.push(read_mask(&dir.join(format!("{id}.pgm")), w, h)?);
        cell_features.push(feats);
        cell_labels.push(label);
    }
    let path = dir.join("prompt.txt");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let prompt_stub = text
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            l.trim()
                .parse::<f64>()
                .map_err(|_| Error::Data(format!("{}: bad number {l:?}", path.display())))
        })
        .collect::<Result<_>>()?;
    let sample = SegSample {
        height: h,
        width: w,
        patch,
        cell_masks,
        cell_features,
        cell_labels,
        gt_mask,
        prompt_stub,
    };
    sample.validate()?;
    Ok(sample)
}

pub fn save_samples(dir: &Path, samples: &[SegSample]) -> Result<()> {
    for (i, s) in samples.iter().enumerate() {
        save_sample(&dir.join(format!("sample_{i:04}")), s)?;
    }
    Ok(())
}

/// Loads every `sample_*` directory under `dir` in name order.
pub fn load_samples(dir: &Path) -> Result<Vec<SegSample>> {
    let mut dirs: Vec<_> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| {
            p.is_dir()
                && p.file_name()
                    .and_then(|n| n.to_str())
                    .is_some_and(|n| n.starts_with("sample_"))
        })
        .collect();
    dirs.sort();
    dirs.iter().map(|d| load_sample(d)).collect()
}
