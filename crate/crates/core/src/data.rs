//! Volumes on disk, synthetic study data, and cross-validation plans.
//!
//! Volumes use the VSEG container. Byte layout, integers little-endian:
//!
//! ```text
//! magic    4 bytes  "VSEG"
//! version  u16      currently 1
//! dtype    u8       0 = f32 intensities, 1 = u8 binary labels
//! depth    u32
//! height   u32
//! width    u32
//! payload  depth-major, row-major voxels: f32 per voxel for dtype 0,
//!          one byte (0 or 1) per voxel for dtype 1
//! ```
//!
//! A dataset directory pairs `<case>.img.vseg` with `<case>.lbl.vseg`
//! and carries two CSV sidecars: `corruption.csv` marking degraded
//! slices and `manifest.csv` holding a sha256 per file so reruns can be
//! compared byte for byte.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"VSEG";
const VERSION: u16 = 1;
const DTYPE_F32: u8 = 0;
const DTYPE_U8: u8 = 1;

/// A scalar intensity volume. Values are held as f64 but stored as f32,
/// so a write/read round trip is exact once values were quantized.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    pub depth: usize,
    pub height: usize,
    pub width: usize,
    data: Vec<f64>,
}

/// A binary label volume, one byte per voxel.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelVolume {
    pub depth: usize,
    pub height: usize,
    pub width: usize,
    data: Vec<u8>,
}

fn check_dims(depth: usize, height: usize, width: usize, len: usize) -> Result<()> {
    if depth == 0 || height == 0 || width == 0 {
        return Err(Error::invalid("volume dimensions must be positive"));
    }
    if depth * height * width != len {
        return Err(Error::ShapeMismatch {
            context: "volume",
            expected: vec![depth, height, width],
            got: vec![len],
        });
    }
    Ok(())
}

impl Volume {
    pub fn zeros(depth: usize, height: usize, width: usize) -> Volume {
        Volume {
            depth,
            height,
            width,
            data: vec![0.0; depth * height * width],
        }
    }

    pub fn from_vec(depth: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Volume> {
        check_dims(depth, height, width, data.len())?;
        Ok(Volume {
            depth,
            height,
            width,
            data,
        })
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    fn idx(&self, t: usize, y: usize, x: usize) -> usize {
        (t * self.height + y) * self.width + x
    }

    pub fn get(&self, t: usize, y: usize, x: usize) -> f64 {
        self.data[self.idx(t, y, x)]
    }

    pub fn set(&mut self, t: usize, y: usize, x: usize, v: f64) {
        let i = self.idx(t, y, x);
        self.data[i] = v;
    }

    /// Rounds every voxel to its nearest f32, the precision the
    /// container stores.
    pub fn quantize(&mut self) {
        for v in &mut self.data {
            *v = *v as f32 as f64;
        }
    }

    /// Shifts and scales the whole volume to zero mean and unit
    /// standard deviation. Constant volumes only get centered; applying
    /// the map twice changes nothing beyond float rounding.
    pub fn normalize(&mut self) {
        let n = self.data.len() as f64;
        let mean = self.data.iter().sum::<f64>() / n;
        let var = self.data.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        let std = var.sqrt().max(1e-12);
        for v in &mut self.data {
            *v = (*v - mean) / std;
        }
    }

    /// One axial slice as a `[1, 1, H, W]` tensor.
    pub fn slice(&self, t: usize) -> Result<Tensor> {
        if t >= self.depth {
            return Err(Error::invalid(format!(
                "slice {t} out of range, volume depth is {}",
                self.depth
            )));
        }
        let start = t * self.height * self.width;
        let end = start + self.height * self.width;
        Tensor::from_vec(
            &[1, 1, self.height, self.width],
            self.data[start..end].to_vec(),
        )
    }

    /// All axial slices in stack order.
    pub fn slices(&self) -> Result<Vec<Tensor>> {
        (0..self.depth).map(|t| self.slice(t)).collect()
    }
}

impl LabelVolume {
    pub fn zeros(depth: usize, height: usize, width: usize) -> LabelVolume {
        LabelVolume {
            depth,
            height,
            width,
            data: vec![0; depth * height * width],
        }
    }

    pub fn from_vec(
        depth: usize,
        height: usize,
        width: usize,
        data: Vec<u8>,
    ) -> Result<LabelVolume> {
        check_dims(depth, height, width, data.len())?;
        if let Some(v) = data.iter().find(|&&v| v > 1) {
            return Err(Error::invalid(format!("label voxel {v} is not binary")));
        }
        Ok(LabelVolume {
            depth,
            height,
            width,
            data,
        })
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn get(&self, t: usize, y: usize, x: usize) -> u8 {
        self.data[(t * self.height + y) * self.width + x]
    }

    pub fn set(&mut self, t: usize, y: usize, x: usize, v: u8) {
        debug_assert!(v <= 1);
        self.data[(t * self.height + y) * self.width + x] = v;
    }

    /// One axial slice as a 0/1-valued `[1, 1, H, W]` tensor.
    pub fn slice(&self, t: usize) -> Result<Tensor> {
        if t >= self.depth {
            return Err(Error::invalid(format!(
                "slice {t} out of range, volume depth is {}",
                self.depth
            )));
        }
        let start = t * self.height * self.width;
        let end = start + self.height * self.width;
        Tensor::from_vec(
            &[1, 1, self.height, self.width],
            self.data[start..end].iter().map(|&v| v as f64).collect(),
        )
    }

    pub fn slices(&self) -> Result<Vec<Tensor>> {
        (0..self.depth).map(|t| self.slice(t)).collect()
    }

    pub fn foreground_count(&self) -> usize {
        self.data.iter().filter(|&&v| v == 1).count()
    }
}

/// Stacks per-slice `[1, C, H, W]` tensors into one `[N, C, H, W]`
/// batch.
pub fn stack_batch(slices: &[Tensor]) -> Result<Tensor> {
    if slices.is_empty() {
        return Err(Error::invalid("stack_batch needs at least one slice"));
    }
    let (n0, c, h, w) = slices[0].dims4()?;
    let mut data = Vec::with_capacity(slices.len() * slices[0].len());
    let mut batch = 0;
    for s in slices {
        let (n, sc, sh, sw) = s.dims4()?;
        if (sc, sh, sw) != (c, h, w) {
            return Err(Error::ShapeMismatch {
                context: "stack_batch",
                expected: vec![n, c, h, w],
                got: s.shape().to_vec(),
            });
        }
        batch += n;
        data.extend_from_slice(s.data());
    }
    let _ = n0;
    Tensor::from_vec(&[batch, c, h, w], data)
}

fn header_bytes(dtype: u8, depth: usize, height: usize, width: usize) -> Vec<u8> {
    let mut buf = Vec::with_capacity(19);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.push(dtype);
    buf.extend_from_slice(&(depth as u32).to_le_bytes());
    buf.extend_from_slice(&(height as u32).to_le_bytes());
    buf.extend_from_slice(&(width as u32).to_le_bytes());
    buf
}

pub fn volume_to_bytes(vol: &Volume) -> Vec<u8> {
    let mut buf = header_bytes(DTYPE_F32, vol.depth, vol.height, vol.width);
    for &v in &vol.data {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    buf
}

pub fn labels_to_bytes(vol: &LabelVolume) -> Vec<u8> {
    let mut buf = header_bytes(DTYPE_U8, vol.depth, vol.height, vol.width);
    buf.extend_from_slice(&vol.data);
    buf
}

fn parse_header(bytes: &[u8], path: &str) -> Result<(u8, usize, usize, usize)> {
    if bytes.len() < 19 {
        return Err(Error::format(path, "file shorter than a VSEG header"));
    }
    if &bytes[0..4] != MAGIC {
        return Err(Error::format(path, "bad magic, not a VSEG volume"));
    }
    let version = u16::from_le_bytes(bytes[4..6].try_into().unwrap());
    if version != VERSION {
        return Err(Error::format(
            path,
            format!("unsupported version {version}, expected {VERSION}"),
        ));
    }
    let dtype = bytes[6];
    let dim = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap()) as usize;
    Ok((dtype, dim(7), dim(11), dim(15)))
}

pub fn volume_from_bytes(bytes: &[u8], path: &str) -> Result<Volume> {
    let (dtype, depth, height, width) = parse_header(bytes, path)?;
    if dtype != DTYPE_F32 {
        return Err(Error::format(path, "expected an intensity volume"));
    }
    let payload = &bytes[19..];
    let voxels = depth
        .checked_mul(height)
        .and_then(|v| v.checked_mul(width))
        .ok_or_else(|| Error::format(path, "dimensions overflow"))?;
    if payload.len() != voxels * 4 {
        return Err(Error::format(
            path,
            format!(
                "payload holds {} bytes, header needs {}",
                payload.len(),
                voxels * 4
            ),
        ));
    }
    let mut data = Vec::with_capacity(voxels);
    for chunk in payload.chunks_exact(4) {
        let v = f32::from_le_bytes(chunk.try_into().unwrap());
        if !v.is_finite() {
            return Err(Error::format(path, "non-finite voxel"));
        }
        data.push(v as f64);
    }
    Volume::from_vec(depth, height, width, data)
}

pub fn labels_from_bytes(bytes: &[u8], path: &str) -> Result<LabelVolume> {
    let (dtype, depth, height, width) = parse_header(bytes, path)?;
    if dtype != DTYPE_U8 {
        return Err(Error::format(path, "expected a label volume"));
    }
    let payload = &bytes[19..];
    let voxels = depth
        .checked_mul(height)
        .and_then(|v| v.checked_mul(width))
        .ok_or_else(|| Error::format(path, "dimensions overflow"))?;
    if payload.len() != voxels {
        return Err(Error::format(
            path,
            format!(
                "payload holds {} bytes, header needs {voxels}",
                payload.len()
            ),
        ));
    }
    if let Some(v) = payload.iter().find(|&&v| v > 1) {
        return Err(Error::format(
            path,
            format!("label voxel {v} is not binary"),
        ));
    }
    LabelVolume::from_vec(depth, height, width, payload.to_vec())
}

pub fn write_volume(path: &Path, vol: &Volume) -> Result<()> {
    fs::write(path, volume_to_bytes(vol))?;
    Ok(())
}

pub fn read_volume(path: &Path) -> Result<Volume> {
    let bytes = fs::read(path)?;
    volume_from_bytes(&bytes, &path.display().to_string())
}

pub fn write_labels(path: &Path, vol: &LabelVolume) -> Result<()> {
    fs::write(path, labels_to_bytes(vol))?;
    Ok(())
}

pub fn read_labels(path: &Path) -> Result<LabelVolume> {
    let bytes = fs::read(path)?;
    labels_from_bytes(&bytes, &path.display().to_string())
}

pub fn image_path(dir: &Path, case_id: &str) -> PathBuf {
    dir.join(format!("{case_id}.img.vseg"))
}

pub fn label_path(dir: &Path, case_id: &str) -> PathBuf {
    dir.join(format!("{case_id}.lbl.vseg"))
}

/// Case ids in a dataset directory, sorted, requiring both the image
/// and the label file.
pub fn list_cases(dir: &Path) -> Result<Vec<String>> {
    let mut ids = Vec::new();
    for entry in fs::read_dir(dir)? {
        let name = entry?.file_name();
        let name = name.to_string_lossy();
        if let Some(id) = name.strip_suffix(".img.vseg") {
            if label_path(dir, id).exists() {
                ids.push(id.to_string());
            } else {
                return Err(Error::format(
                    &dir.display().to_string(),
                    format!("case {id} has an image but no labels"),
                ));
            }
        }
    }
    ids.sort();
    Ok(ids)
}

/// Loads one case and cross-checks the image and label geometry.
pub fn load_case(dir: &Path, case_id: &str) -> Result<(Volume, LabelVolume)> {
    let image = read_volume(&image_path(dir, case_id))?;
    let labels = read_labels(&label_path(dir, case_id))?;
    if (image.depth, image.height, image.width) != (labels.depth, labels.height, labels.width) {
        return Err(Error::ShapeMismatch {
            context: "case geometry",
            expected: vec![image.depth, image.height, image.width],
            got: vec![labels.depth, labels.height, labels.width],
        });
    }
    Ok((image, labels))
}

/// Settings for the synthetic study generator.
#[derive(Debug, Clone)]
pub struct SynthConfig {
    pub cases: usize,
    pub depth: usize,
    pub height: usize,
    pub width: usize,
    /// Target per-slice foreground fraction; every generated slice
    /// stays within half and one-and-a-half times this value.
    pub target_fg: f64,
    /// Standard deviation of the additive pixel noise.
    pub noise: f64,
    /// Largest per-axis centre movement between adjacent slices, in
    /// pixels.
    pub drift: f64,
    /// Fraction of cases that receive degraded slices.
    pub corrupt_cases: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> SynthConfig {
        SynthConfig {
            cases: 40,
            depth: 32,
            height: 64,
            width: 64,
            target_fg: 0.015,
            noise: 0.05,
            drift: 1.5,
            corrupt_cases: 0.5,
            seed: 7,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.cases == 0 || self.depth == 0 {
            return Err(Error::invalid("need at least one case and one slice"));
        }
        if self.height < 8 || self.width < 8 {
            return Err(Error::invalid("slices must be at least 8x8"));
        }
        if !(self.target_fg > 0.0 && self.target_fg <= 0.2) {
            return Err(Error::invalid("target_fg must lie in (0, 0.2]"));
        }
        if !(0.0..=1.0).contains(&self.corrupt_cases) {
            return Err(Error::invalid("corrupt_cases must lie in [0, 1]"));
        }
        if !(0.0..=1.0).contains(&self.noise) {
            return Err(Error::invalid("noise must lie in [0, 1]"));
        }
        if !(0.0..=4.0).contains(&self.drift) {
            return Err(Error::invalid("drift must lie in [0, 4]"));
        }
        Ok(())
    }
}

/// One generated case: intensities, labels, and a per-slice degradation
/// flag.
#[derive(Debug, Clone)]
pub struct SynthCase {
    pub id: String,
    pub image: Volume,
    pub labels: LabelVolume,
    pub corrupted: Vec<bool>,
}

fn case_seed(seed: u64, index: usize) -> u64 {
    seed ^ 0x9e37_79b9_7f4a_7c15u64.wrapping_mul(index as u64 + 1)
}

/// Generates one case: a smooth elliptical blob that drifts through the
/// stack over a cosine texture background. In degraded slices the
/// blob's contrast collapses to near the noise floor while the label
/// stays put, so those slices are ambiguous from intensity alone and
/// only context from neighbours resolves them. Degraded slices are
/// isolated: every fifth slice from a small offset, never slice 0.
pub fn synth_case(cfg: &SynthConfig, index: usize) -> Result<SynthCase> {
    cfg.validate()?;
    if index >= cfg.cases {
        return Err(Error::invalid("case index out of range"));
    }
    let mut r = rng::seeded(case_seed(cfg.seed, index));
    let (d, h, w) = (cfg.depth, cfg.height, cfg.width);
    let hf = h as f64;
    let wf = w as f64;

    let r0 = (cfg.target_fg * hf * wf / PI).sqrt();
    let aspect: f64 = r.random_range(0.9..1.1);
    let radius_phase: f64 = r.random_range(0.0..2.0 * PI);
    let freq_y: f64 = r.random_range(1.0..2.5);
    let freq_x: f64 = r.random_range(1.0..2.5);
    let phase_y: f64 = r.random_range(0.0..2.0 * PI);
    let phase_x: f64 = r.random_range(0.0..2.0 * PI);
    let contrast: f64 = r.random_range(0.75..0.95);

    let margin = 1.3 * r0;
    let mut cy: f64 = r.random_range(margin..hf - margin);
    let mut cx: f64 = r.random_range(margin..wf - margin);

    let n_corrupt = (cfg.cases as f64 * cfg.corrupt_cases).round() as usize;
    let has_corruption = index < n_corrupt;
    let offset = r.random_range(1..5usize);
    let corrupted: Vec<bool> = (0..d)
        .map(|t| has_corruption && t >= offset && (t - offset) % 5 == 0)
        .collect();

    let mut image = Volume::zeros(d, h, w);
    let mut labels = LabelVolume::zeros(d, h, w);
    for t in 0..d {
        cy = (cy + cfg.drift * r.random_range(-1.0..1.0)).clamp(margin, hf - margin);
        cx = (cx + cfg.drift * r.random_range(-1.0..1.0)).clamp(margin, wf - margin);
        let radius_mul = 1.0 + 0.15 * (2.0 * PI * t as f64 / d as f64 + radius_phase).sin();
        let ry = r0 * radius_mul * aspect;
        let rx = r0 * radius_mul / aspect;
        let shift: f64 = r.random_range(-0.05..0.05);
        // Partial contrast collapse: the blob stays faintly visible, so
        // a degraded slice alone supports only a rough guess and
        // neighbouring slices are needed to pin the region down.
        let blob_gain = if corrupted[t] { 0.15 } else { 1.0 };
        let noise_gain = if corrupted[t] { 2.0 } else { 1.0 };
        for y in 0..h {
            for x in 0..w {
                let texture = 0.15
                    * (2.0 * PI * freq_y * y as f64 / hf + phase_y).cos()
                    * (2.0 * PI * freq_x * x as f64 / wf + phase_x).cos();
                let noise = cfg.noise * noise_gain * rng::randn(&mut r);
                let dist = ((y as f64 - cy) / ry).powi(2) + ((x as f64 - cx) / rx).powi(2);
                let edge = crate::autodiff::sigmoid(6.0 * (1.0 - dist));
                image.set(
                    t,
                    y,
                    x,
                    texture + noise + shift + contrast * blob_gain * edge,
                );
                labels.set(t, y, x, u8::from(dist <= 1.0));
            }
        }
    }
    image.quantize();

    Ok(SynthCase {
        id: format!("case{index:03}"),
        image,
        labels,
        corrupted,
    })
}

fn sha256_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

/// Summary of a generated dataset.
#[derive(Debug, Clone)]
pub struct DatasetSummary {
    pub case_ids: Vec<String>,
    pub corrupted_slices: usize,
    pub total_slices: usize,
}

/// Generates a full dataset into `dir`: volume pairs, a corruption
/// sidecar, and a manifest of file hashes. Rerunning with the same
/// settings reproduces every file byte for byte.
pub fn generate_dataset(dir: &Path, cfg: &SynthConfig) -> Result<DatasetSummary> {
    cfg.validate()?;
    fs::create_dir_all(dir)?;
    let mut files = BTreeMap::new();
    let mut corruption_rows = String::from("case_id,slice,corrupted\n");
    let mut case_ids = Vec::with_capacity(cfg.cases);
    let mut corrupted_slices = 0;
    for index in 0..cfg.cases {
        let case = synth_case(cfg, index)?;
        let img = volume_to_bytes(&case.image);
        let lbl = labels_to_bytes(&case.labels);
        fs::write(image_path(dir, &case.id), &img)?;
        fs::write(label_path(dir, &case.id), &lbl)?;
        files.insert(format!("{}.img.vseg", case.id), sha256_hex(&img));
        files.insert(format!("{}.lbl.vseg", case.id), sha256_hex(&lbl));
        for (t, &flag) in case.corrupted.iter().enumerate() {
            corruption_rows.push_str(&format!("{},{},{}\n", case.id, t, if flag { 1 } else { 0 }));
            corrupted_slices += usize::from(flag);
        }
        case_ids.push(case.id);
    }
    fs::write(dir.join("corruption.csv"), &corruption_rows)?;
    files.insert(
        "corruption.csv".to_string(),
        sha256_hex(corruption_rows.as_bytes()),
    );

    let mut manifest = String::from("file,sha256\n");
    for (name, hash) in &files {
        manifest.push_str(&format!("{name},{hash}\n"));
    }
    fs::write(dir.join("manifest.csv"), manifest)?;

    Ok(DatasetSummary {
        case_ids,
        corrupted_slices,
        total_slices: cfg.cases * cfg.depth,
    })
}

/// Reads the corruption sidecar back as per-case flag vectors.
pub fn read_corruption(dir: &Path) -> Result<BTreeMap<String, Vec<bool>>> {
    let path = dir.join("corruption.csv");
    let text = fs::read_to_string(&path)?;
    let display = path.display().to_string();
    let mut map: BTreeMap<String, Vec<bool>> = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        if i == 0 {
            if line != "case_id,slice,corrupted" {
                return Err(Error::format(&display, "unexpected header"));
            }
            continue;
        }
        let mut parts = line.split(',');
        let (Some(id), Some(slice), Some(flag), None) =
            (parts.next(), parts.next(), parts.next(), parts.next())
        else {
            return Err(Error::format(&display, format!("bad row {line:?}")));
        };
        let slice: usize = slice
            .parse()
            .map_err(|_| Error::format(&display, format!("bad slice index {slice:?}")))?;
        let flag = match flag {
            "0" => false,
            "1" => true,
            _ => return Err(Error::format(&display, format!("bad flag {flag:?}"))),
        };
        let flags = map.entry(id.to_string()).or_default();
        if flags.len() != slice {
            return Err(Error::format(&display, "slice rows out of order"));
        }
        flags.push(flag);
    }
    Ok(map)
}

/// One case ready for training or scoring: normalized intensity
/// slices, binary label slices, and the per-slice degradation flags.
#[derive(Debug, Clone)]
pub struct CaseData {
    pub id: String,
    pub images: Vec<Tensor>,
    pub labels: Vec<Tensor>,
    pub corrupted: Vec<bool>,
}

impl SynthCase {
    /// Converts a generated case into training form without touching
    /// disk. Matches `load_cases` on a directory this case was written
    /// to: the image is quantized and normalized the same way.
    pub fn into_case(mut self) -> Result<CaseData> {
        self.image.normalize();
        Ok(CaseData {
            id: self.id,
            images: self.image.slices()?,
            labels: self.labels.slices()?,
            corrupted: self.corrupted,
        })
    }
}

/// Loads and normalizes the given cases from a dataset directory. The
/// corruption sidecar is honored when present; otherwise every slice
/// counts as clean.
pub fn load_cases(dir: &Path, ids: &[String]) -> Result<Vec<CaseData>> {
    let corruption = if dir.join("corruption.csv").exists() {
        read_corruption(dir)?
    } else {
        BTreeMap::new()
    };
    let mut cases = Vec::with_capacity(ids.len());
    for id in ids {
        let (mut image, labels) = load_case(dir, id)?;
        image.normalize();
        let corrupted = match corruption.get(id) {
            Some(flags) if flags.len() == image.depth => flags.clone(),
            Some(_) => {
                return Err(Error::format(
                    &dir.display().to_string(),
                    format!("corruption rows for {id} disagree with its depth"),
                ))
            }
            None => vec![false; image.depth],
        };
        cases.push(CaseData {
            id: id.clone(),
            images: image.slices()?,
            labels: labels.slices()?,
            corrupted,
        });
    }
    Ok(cases)
}

/// Splits case ids into `k` folds: a seeded shuffle followed by
/// round-robin assignment, so fold sizes differ by at most one and the
/// plan is a pure function of the sorted id list, `k`, and the seed.
pub fn make_folds(ids: &[String], k: usize, seed: u64) -> Result<Vec<Vec<String>>> {
    if k == 0 {
        return Err(Error::invalid("fold count must be at least 1"));
    }
    if ids.len() < k {
        return Err(Error::invalid(format!(
            "cannot split {} cases into {k} folds",
            ids.len()
        )));
    }
    let mut sorted: Vec<String> = ids.to_vec();
    sorted.sort();
    sorted.dedup();
    if sorted.len() != ids.len() {
        return Err(Error::invalid("duplicate case ids in fold plan"));
    }
    let mut r = rng::seeded(seed);
    sorted.shuffle(&mut r);
    let mut folds = vec![Vec::new(); k];
    for (i, id) in sorted.into_iter().enumerate() {
        folds[i % k].push(id);
    }
    for fold in &mut folds {
        fold.sort();
    }
    Ok(folds)
}

/// The fold plan as CSV, rows sorted by case id.
pub fn fold_plan_csv(folds: &[Vec<String>]) -> String {
    let mut rows: Vec<(String, usize)> = folds
        .iter()
        .enumerate()
        .flat_map(|(f, ids)| ids.iter().map(move |id| (id.clone(), f)))
        .collect();
    rows.sort();
    let mut out = String::from("case_id,fold\n");
    for (id, fold) in rows {
        out.push_str(&format!("{id},{fold}\n"));
    }
    out
}

/// Seeded train/validation split of a case list. The validation side
/// gets `round(n * val_fraction)` cases, at least one, and at least one
/// case stays in training.
pub fn split_train_val(
    ids: &[String],
    val_fraction: f64,
    seed: u64,
) -> Result<(Vec<String>, Vec<String>)> {
    if ids.len() < 2 {
        return Err(Error::invalid("need at least two cases to split"));
    }
    if !(0.0..1.0).contains(&val_fraction) {
        return Err(Error::invalid("val_fraction must lie in [0, 1)"));
    }
    let mut shuffled = ids.to_vec();
    shuffled.sort();
    let mut r = rng::seeded(seed);
    shuffled.shuffle(&mut r);
    let n_val = ((ids.len() as f64 * val_fraction).round() as usize)
        .max(1)
        .min(ids.len() - 1);
    let val = shuffled.split_off(shuffled.len() - n_val);
    let mut train = shuffled;
    train.sort();
    let mut val = val;
    val.sort();
    Ok((train, val))
}
