//! Portable artifact formats: the binary tensor container, label and
//! detection CSVs, run-length-encoded masks, the plain key/value config
//! format, and model bundles.
//!
//! The tensor container stores payloads as little-endian f32, so values
//! survive a round trip exactly when they are f32-representable; files
//! round-trip byte-for-byte always.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::dataset::NUM_CLASSES;
use crate::error::{HcplError, Result};
use crate::eval::{CellMask, Detection, GroundTruthCell};
use crate::layers::BackboneConfig;
use crate::models::{Model, ModelConfig, ModelFamily, ParamSet, ScatteringSettings};
use crate::tensor::Tensor;

pub const TENSOR_MAGIC: [u8; 4] = *b"HCPL";
pub const TENSOR_VERSION: u8 = 1;
pub const DTYPE_F32: u8 = 1;

fn parse_err(path: &str, detail: impl Into<String>) -> HcplError {
    HcplError::Parse { path: path.to_string(), detail: detail.into() }
}

/// Serialise a tensor: magic, version, dtype, rank, u32 LE dims, f32 LE
/// payload in row-major order.
pub fn tensor_to_bytes(t: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(7 + 4 * t.rank() + 4 * t.numel());
    out.extend_from_slice(&TENSOR_MAGIC);
    out.push(TENSOR_VERSION);
    out.push(DTYPE_F32);
    out.push(t.rank() as u8);
    for &d in t.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in t.data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out
}

pub fn tensor_from_bytes(bytes: &[u8], origin: &str) -> Result<Tensor> {
    if bytes.len() < 7 {
        return Err(parse_err(origin, "file shorter than the tensor header"));
    }
    if bytes[0..4] != TENSOR_MAGIC {
        return Err(parse_err(origin, "bad magic bytes"));
    }
    if bytes[4] != TENSOR_VERSION {
        return Err(parse_err(origin, format!("unsupported version {}", bytes[4])));
    }
    if bytes[5] != DTYPE_F32 {
        return Err(parse_err(origin, format!("unsupported dtype code {}", bytes[5])));
    }
    let rank = bytes[6] as usize;
    let dims_end = 7 + 4 * rank;
    if bytes.len() < dims_end {
        return Err(parse_err(origin, "truncated dimension list"));
    }
    let mut shape = Vec::with_capacity(rank);
    let mut numel = 1usize;
    for r in 0..rank {
        let d = u32::from_le_bytes(bytes[7 + 4 * r..11 + 4 * r].try_into().unwrap()) as usize;
        numel = numel
            .checked_mul(d)
            .ok_or_else(|| parse_err(origin, "dimension product overflows"))?;
        shape.push(d);
    }
    let expected = dims_end + 4 * numel;
    if bytes.len() < expected {
        return Err(parse_err(origin, "truncated payload"));
    }
    if bytes.len() > expected {
        return Err(parse_err(origin, "trailing bytes after payload"));
    }
    let mut data = Vec::with_capacity(numel);
    for i in 0..numel {
        let off = dims_end + 4 * i;
        data.push(f32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()) as f64);
    }
    Tensor::from_vec(shape, data)
}

pub fn write_tensor(path: impl AsRef<Path>, t: &Tensor) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, tensor_to_bytes(t)).map_err(|e| HcplError::io(path.display().to_string(), e))
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let bytes =
        fs::read(path).map_err(|e| HcplError::io(path.display().to_string(), e))?;
    tensor_from_bytes(&bytes, &path.display().to_string())
}

/// Run-length encoding of a pixel set: space-separated `start length` pairs
/// over row-major 0-based indices, runs in ascending order with at least a
/// one-pixel gap between them. The empty mask encodes as the empty string.
pub fn rle_encode(mask: &CellMask) -> String {
    let px = mask.pixels();
    let mut out = String::new();
    let mut i = 0;
    while i < px.len() {
        let start = px[i];
        let mut len = 1usize;
        while i + len < px.len() && px[i + len] == start + len as u32 {
            len += 1;
        }
        if !out.is_empty() {
            out.push(' ');
        }
        out.push_str(&format!("{start} {len}"));
        i += len;
    }
    out
}

pub fn rle_decode(s: &str, origin: &str) -> Result<CellMask> {
    let tokens: Vec<&str> = s.split_whitespace().collect();
    if tokens.len() % 2 != 0 {
        return Err(parse_err(origin, "run-length string has an odd token count"));
    }
    let mut pixels: Vec<u32> = Vec::new();
    for pair in tokens.chunks(2) {
        let start: u64 = pair[0]
            .parse()
            .map_err(|_| parse_err(origin, format!("bad run start '{}'", pair[0])))?;
        let len: u64 = pair[1]
            .parse()
            .map_err(|_| parse_err(origin, format!("bad run length '{}'", pair[1])))?;
        if len == 0 {
            return Err(parse_err(origin, "zero-length run"));
        }
        if start + len > u32::MAX as u64 {
            return Err(parse_err(origin, "run exceeds the index range"));
        }
        match pixels.last() {
            // canonical form: a gap of at least one pixel between runs
            Some(&last) if start <= last as u64 + 1 => {
                return Err(parse_err(origin, "runs overlap or should be merged"));
            }
            _ => {}
        }
        for p in start..start + len {
            pixels.push(p as u32);
        }
    }
    Ok(CellMask::from_indices(pixels))
}

/// One row of the labels table.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelRow {
    pub cell_id: u32,
    pub image_id: u32,
    /// Exactly [`NUM_CLASSES`] values in [0,1].
    pub labels: Vec<f64>,
}

fn labels_header() -> String {
    let mut h = String::from("cell_id,image_id");
    for c in 0..NUM_CLASSES {
        h.push_str(&format!(",c{c}"));
    }
    h
}

pub fn labels_csv_string(rows: &[LabelRow]) -> Result<String> {
    let mut out = labels_header();
    out.push('\n');
    for row in rows {
        if row.labels.len() != NUM_CLASSES {
            return Err(HcplError::Input(format!(
                "cell {} has {} label columns, expected {NUM_CLASSES}",
                row.cell_id,
                row.labels.len()
            )));
        }
        out.push_str(&format!("{},{}", row.cell_id, row.image_id));
        for &v in &row.labels {
            out.push_str(&format!(",{v}"));
        }
        out.push('\n');
    }
    Ok(out)
}

pub fn write_labels_csv(path: impl AsRef<Path>, rows: &[LabelRow]) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, labels_csv_string(rows)?)
        .map_err(|e| HcplError::io(path.display().to_string(), e))
}

pub fn read_labels_csv(path: impl AsRef<Path>) -> Result<Vec<LabelRow>> {
    let path = path.as_ref();
    let origin = path.display().to_string();
    let text =
        fs::read_to_string(path).map_err(|e| HcplError::io(origin.clone(), e))?;
    parse_labels_csv(&text, &origin)
}

pub fn parse_labels_csv(text: &str, origin: &str) -> Result<Vec<LabelRow>> {
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| parse_err(origin, "empty labels file"))?;
    if header != labels_header() {
        return Err(parse_err(origin, format!("unexpected header '{header}'")));
    }
    let mut rows = Vec::new();
    let mut seen = std::collections::HashSet::new();
    for (lineno, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 2 + NUM_CLASSES {
            return Err(parse_err(
                origin,
                format!("line {}: {} fields, expected {}", lineno + 2, fields.len(), 2 + NUM_CLASSES),
            ));
        }
        let cell_id: u32 = fields[0]
            .parse()
            .map_err(|_| parse_err(origin, format!("line {}: bad cell id", lineno + 2)))?;
        let image_id: u32 = fields[1]
            .parse()
            .map_err(|_| parse_err(origin, format!("line {}: bad image id", lineno + 2)))?;
        if !seen.insert(cell_id) {
            return Err(parse_err(origin, format!("duplicate cell id {cell_id}")));
        }
        let mut labels = Vec::with_capacity(NUM_CLASSES);
        for f in &fields[2..] {
            let v: f64 = f
                .parse()
                .map_err(|_| parse_err(origin, format!("line {}: bad label '{f}'", lineno + 2)))?;
            if !v.is_finite() || !(0.0..=1.0).contains(&v) {
                return Err(parse_err(origin, format!("line {}: label {v} outside [0,1]", lineno + 2)));
            }
            labels.push(v);
        }
        rows.push(LabelRow { cell_id, image_id, labels });
    }
    Ok(rows)
}

pub fn write_detections_csv(path: impl AsRef<Path>, dets: &[Detection]) -> Result<()> {
    let mut out = String::from("image_id,class,score,rle\n");
    for d in dets {
        out.push_str(&format!("{},{},{},{}\n", d.image_id, d.class_id, d.score, rle_encode(&d.mask)));
    }
    let path = path.as_ref();
    fs::write(path, out).map_err(|e| HcplError::io(path.display().to_string(), e))
}

pub fn read_detections_csv(path: impl AsRef<Path>) -> Result<Vec<Detection>> {
    let path = path.as_ref();
    let origin = path.display().to_string();
    let text = fs::read_to_string(path).map_err(|e| HcplError::io(origin.clone(), e))?;
    let mut lines = text.lines();
    match lines.next() {
        Some("image_id,class,score,rle") => {}
        other => return Err(parse_err(&origin, format!("unexpected header {other:?}"))),
    }
    let mut dets = Vec::new();
    for (lineno, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.splitn(4, ',').collect();
        if fields.len() != 4 {
            return Err(parse_err(&origin, format!("line {}: expected 4 fields", lineno + 2)));
        }
        let image_id = fields[0]
            .parse()
            .map_err(|_| parse_err(&origin, format!("line {}: bad image id", lineno + 2)))?;
        let class_id = fields[1]
            .parse()
            .map_err(|_| parse_err(&origin, format!("line {}: bad class", lineno + 2)))?;
        let score = fields[2]
            .parse()
            .map_err(|_| parse_err(&origin, format!("line {}: bad score", lineno + 2)))?;
        let mask = rle_decode(fields[3], &origin)?;
        dets.push(Detection { image_id, class_id, score, mask });
    }
    Ok(dets)
}

pub fn write_ground_truth_csv(path: impl AsRef<Path>, gts: &[GroundTruthCell]) -> Result<()> {
    let mut out = String::from("image_id,cell_id,classes,rle\n");
    for g in gts {
        let classes: Vec<String> = g.classes.iter().map(|c| c.to_string()).collect();
        out.push_str(&format!(
            "{},{},{},{}\n",
            g.image_id,
            g.cell_id,
            classes.join(";"),
            rle_encode(&g.mask)
        ));
    }
    let path = path.as_ref();
    fs::write(path, out).map_err(|e| HcplError::io(path.display().to_string(), e))
}

pub fn read_ground_truth_csv(path: impl AsRef<Path>) -> Result<Vec<GroundTruthCell>> {
    let path = path.as_ref();
    let origin = path.display().to_string();
    let text = fs::read_to_string(path).map_err(|e| HcplError::io(origin.clone(), e))?;
    let mut lines = text.lines();
    match lines.next() {
        Some("image_id,cell_id,classes,rle") => {}
        other => return Err(parse_err(&origin, format!("unexpected header {other:?}"))),
    }
    let mut gts = Vec::new();
    for (lineno, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.splitn(4, ',').collect();
        if fields.len() != 4 {
            return Err(parse_err(&origin, format!("line {}: expected 4 fields", lineno + 2)));
        }
        let image_id = fields[0]
            .parse()
            .map_err(|_| parse_err(&origin, format!("line {}: bad image id", lineno + 2)))?;
        let cell_id = fields[1]
            .parse()
            .map_err(|_| parse_err(&origin, format!("line {}: bad cell id", lineno + 2)))?;
        let mut classes = Vec::new();
        for c in fields[2].split(';') {
            classes.push(c.parse().map_err(|_| {
                parse_err(&origin, format!("line {}: bad class '{c}'", lineno + 2))
            })?);
        }
        let mask = rle_decode(fields[3], &origin)?;
        gts.push(GroundTruthCell { image_id, cell_id, classes, mask });
    }
    Ok(gts)
}

/// 64-bit FNV-1a, used for config hashes in run manifests.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// Plain UTF-8 key/value configuration with `[section]` headers, `#`
/// comments, and `key = value` lines.
#[derive(Debug, Clone)]
pub struct Config {
    sections: BTreeMap<String, BTreeMap<String, String>>,
    /// FNV-1a over the raw source text.
    pub source_hash: u64,
}

impl Config {
    pub fn parse(text: &str, origin: &str) -> Result<Config> {
        let mut sections: BTreeMap<String, BTreeMap<String, String>> = BTreeMap::new();
        let mut current = String::new();
        sections.insert(String::new(), BTreeMap::new());
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if let Some(name) = line.strip_prefix('[') {
                let name = name
                    .strip_suffix(']')
                    .ok_or_else(|| parse_err(origin, format!("line {}: unclosed section header", lineno + 1)))?
                    .trim();
                if name.is_empty() {
                    return Err(parse_err(origin, format!("line {}: empty section name", lineno + 1)));
                }
                if sections.contains_key(name) {
                    return Err(parse_err(origin, format!("line {}: section '{name}' reopened", lineno + 1)));
                }
                current = name.to_string();
                sections.insert(current.clone(), BTreeMap::new());
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                parse_err(origin, format!("line {}: expected 'key = value'", lineno + 1))
            })?;
            let (key, value) = (key.trim(), value.trim());
            if key.is_empty() {
                return Err(parse_err(origin, format!("line {}: empty key", lineno + 1)));
            }
            let section = sections.get_mut(&current).expect("current section exists");
            if section.insert(key.to_string(), value.to_string()).is_some() {
                return Err(parse_err(
                    origin,
                    format!("line {}: duplicate key '{key}' in section '{current}'", lineno + 1),
                ));
            }
        }
        Ok(Config { sections, source_hash: fnv1a64(text.as_bytes()) })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Config> {
        let path = path.as_ref();
        let origin = path.display().to_string();
        let text = fs::read_to_string(path).map_err(|e| HcplError::io(origin.clone(), e))?;
        Config::parse(&text, &origin)
    }

    pub fn get(&self, section: &str, key: &str) -> Option<&str> {
        self.sections.get(section).and_then(|s| s.get(key)).map(|v| v.as_str())
    }

    pub fn has_section(&self, section: &str) -> bool {
        self.sections.get(section).is_some_and(|s| !s.is_empty())
    }

    fn typed<T: std::str::FromStr>(&self, section: &str, key: &str) -> Result<Option<T>> {
        match self.get(section, key) {
            None => Ok(None),
            Some(raw) => raw.parse::<T>().map(Some).map_err(|_| {
                HcplError::Config(format!("{section}.{key}: cannot parse '{raw}'"))
            }),
        }
    }

    pub fn str_or(&self, section: &str, key: &str, default: &str) -> String {
        self.get(section, key).unwrap_or(default).to_string()
    }

    pub fn f64_or(&self, section: &str, key: &str, default: f64) -> Result<f64> {
        Ok(self.typed(section, key)?.unwrap_or(default))
    }

    pub fn usize_or(&self, section: &str, key: &str, default: usize) -> Result<usize> {
        Ok(self.typed(section, key)?.unwrap_or(default))
    }

    pub fn u64_or(&self, section: &str, key: &str, default: u64) -> Result<u64> {
        Ok(self.typed(section, key)?.unwrap_or(default))
    }

    pub fn bool_or(&self, section: &str, key: &str, default: bool) -> Result<bool> {
        Ok(self.typed(section, key)?.unwrap_or(default))
    }

    /// Comma-separated list of reals; `None` when the key is absent.
    pub fn f64_list(&self, section: &str, key: &str) -> Result<Option<Vec<f64>>> {
        match self.get(section, key) {
            None => Ok(None),
            Some(raw) => raw
                .split(',')
                .map(|t| {
                    t.trim().parse::<f64>().map_err(|_| {
                        HcplError::Config(format!("{section}.{key}: cannot parse '{}'", t.trim()))
                    })
                })
                .collect::<Result<Vec<f64>>>()
                .map(Some),
        }
    }

    pub fn usize_list_or(&self, section: &str, key: &str, default: &[usize]) -> Result<Vec<usize>> {
        match self.get(section, key) {
            None => Ok(default.to_vec()),
            Some(raw) => raw
                .split(',')
                .map(|t| {
                    t.trim().parse::<usize>().map_err(|_| {
                        HcplError::Config(format!("{section}.{key}: cannot parse '{}'", t.trim()))
                    })
                })
                .collect(),
        }
    }
}

/// Lossless text form of an f64: its IEEE-754 bits as 16 hex digits.
pub fn f64_to_hex(v: f64) -> String {
    format!("{:016x}", v.to_bits())
}

/// Inverse of [`f64_to_hex`].
pub fn f64_from_hex(s: &str, origin: &str) -> Result<f64> {
    u64::from_str_radix(s, 16)
        .map(f64::from_bits)
        .map_err(|_| parse_err(origin, format!("bad float bits '{s}'")))
}

/// Writes a model as a directory: `model.txt` manifest plus one tensor file
/// per parameter. Floats in the manifest are stored as IEEE bit patterns;
/// parameter payloads are at f32 precision per the container format.
pub fn save_model(dir: impl AsRef<Path>, model: &Model) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| HcplError::io(dir.display().to_string(), e))?;
    let cfg = &model.cfg;
    let widths: Vec<String> = cfg.backbone.stage_widths.iter().map(|w| w.to_string()).collect();
    let mut manifest = String::from("model v1\n");
    manifest.push_str(&format!("family {}\n", cfg.family.tag()));
    manifest.push_str(&format!("num_classes {}\n", cfg.num_classes));
    manifest.push_str(&format!("channels_in {}\n", cfg.backbone.channels_in));
    manifest.push_str(&format!("stage_widths {}\n", widths.join(",")));
    manifest.push_str(&format!("input_h {}\n", cfg.backbone.input_h));
    manifest.push_str(&format!("input_w {}\n", cfg.backbone.input_w));
    manifest.push_str(&format!("w1 {}\n", f64_to_hex(cfg.w1)));
    manifest.push_str(&format!("w2 {}\n", f64_to_hex(cfg.w2)));
    manifest.push_str(&format!("init_seed {}\n", model.init_seed));
    if let Some(s) = &cfg.scattering {
        manifest.push_str(&format!(
            "scattering {},{},{},{},{}\n",
            s.j_scales, s.orientations, s.kernel_size, s.max_order, s.mix_width
        ));
    }
    manifest.push_str(&format!("params {}\n", model.params.len()));
    for (name, tensor) in model.params.iter() {
        manifest.push_str(name);
        manifest.push('\n');
        write_tensor(dir.join(format!("{name}.hcpl")), tensor)?;
    }
    let manifest_path = dir.join("model.txt");
    fs::write(&manifest_path, manifest)
        .map_err(|e| HcplError::io(manifest_path.display().to_string(), e))
}

pub fn load_model(dir: impl AsRef<Path>) -> Result<Model> {
    let dir = dir.as_ref();
    let manifest_path = dir.join("model.txt");
    let origin = manifest_path.display().to_string();
    let text =
        fs::read_to_string(&manifest_path).map_err(|e| HcplError::io(origin.clone(), e))?;
    let mut lines = text.lines();
    if lines.next() != Some("model v1") {
        return Err(parse_err(&origin, "missing 'model v1' header"));
    }

    let mut fields: BTreeMap<String, String> = BTreeMap::new();
    let mut param_names: Vec<String> = Vec::new();
    let mut params_left: Option<usize> = None;
    for line in lines {
        if line.is_empty() {
            continue;
        }
        if let Some(n) = params_left {
            if param_names.len() < n {
                param_names.push(line.to_string());
                continue;
            }
            return Err(parse_err(&origin, format!("unexpected line '{line}' after params")));
        }
        let (key, value) = line
            .split_once(' ')
            .ok_or_else(|| parse_err(&origin, format!("malformed line '{line}'")))?;
        if key == "params" {
            let n = value
                .parse::<usize>()
                .map_err(|_| parse_err(&origin, "bad params count"))?;
            params_left = Some(n);
            continue;
        }
        fields.insert(key.to_string(), value.to_string());
    }
    let expected = params_left.ok_or_else(|| parse_err(&origin, "missing params section"))?;
    if param_names.len() != expected {
        return Err(parse_err(
            &origin,
            format!("expected {expected} parameter names, found {}", param_names.len()),
        ));
    }

    let req = |key: &str| -> Result<&String> {
        fields.get(key).ok_or_else(|| parse_err(&origin, format!("missing field '{key}'")))
    };
    let family = ModelFamily::from_tag(req("family")?)?;
    let num_classes: usize =
        req("num_classes")?.parse().map_err(|_| parse_err(&origin, "bad num_classes"))?;
    let channels_in: usize =
        req("channels_in")?.parse().map_err(|_| parse_err(&origin, "bad channels_in"))?;
    let stage_widths: Vec<usize> = req("stage_widths")?
        .split(',')
        .map(|t| t.parse().map_err(|_| parse_err(&origin, "bad stage width")))
        .collect::<Result<_>>()?;
    let input_h: usize =
        req("input_h")?.parse().map_err(|_| parse_err(&origin, "bad input_h"))?;
    let input_w: usize =
        req("input_w")?.parse().map_err(|_| parse_err(&origin, "bad input_w"))?;
    let w1 = f64_from_hex(req("w1")?, &origin)?;
    let w2 = f64_from_hex(req("w2")?, &origin)?;
    let init_seed: u64 =
        req("init_seed")?.parse().map_err(|_| parse_err(&origin, "bad init_seed"))?;
    let scattering = match fields.get("scattering") {
        None => None,
        Some(raw) => {
            let nums: Vec<usize> = raw
                .split(',')
                .map(|t| t.parse().map_err(|_| parse_err(&origin, "bad scattering settings")))
                .collect::<Result<_>>()?;
            if nums.len() != 5 {
                return Err(parse_err(&origin, "scattering needs 5 comma-separated values"));
            }
            Some(ScatteringSettings {
                j_scales: nums[0],
                orientations: nums[1],
                kernel_size: nums[2],
                max_order: nums[3],
                mix_width: nums[4],
            })
        }
    };

    let cfg = ModelConfig {
        family,
        backbone: BackboneConfig { channels_in, stage_widths, input_h, input_w },
        num_classes,
        w1,
        w2,
        scattering,
    };
    cfg.validate()?;

    let mut params = ParamSet::new();
    for name in &param_names {
        params.push(name.clone(), read_tensor(dir.join(format!("{name}.hcpl")))?);
    }
    let model = Model { cfg, params, init_seed };

    // Cross-check parameter names and shapes against a fresh initialisation.
    let reference = crate::models::init_model(&model.cfg, 0)?;
    if reference.params.len() != model.params.len() {
        return Err(parse_err(&origin, "parameter count does not match the model family"));
    }
    for ((n_ref, t_ref), (n_got, t_got)) in reference.params.iter().zip(model.params.iter()) {
        if n_ref != n_got || t_ref.shape() != t_got.shape() {
            return Err(parse_err(
                &origin,
                format!("parameter {n_got} {:?} does not match expected {n_ref} {:?}",
                    t_got.shape(), t_ref.shape()),
            ));
        }
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::init_model;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn tensor_round_trip_is_exact_for_f32_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let data: Vec<f64> =
            (0..60).map(|_| rng.random_range(-10.0f32..10.0) as f64).collect();
        let t = Tensor::from_vec(vec![3, 4, 5], data).unwrap();
        let bytes = tensor_to_bytes(&t);
        let back = tensor_from_bytes(&bytes, "mem").unwrap();
        assert_eq!(back.shape(), t.shape());
        assert_eq!(back.data(), t.data());
        // file-level idempotence
        assert_eq!(tensor_to_bytes(&back), bytes);
    }

    #[test]
    fn rank_zero_scalar_round_trips() {
        let t = Tensor::scalar(2.5);
        let back = tensor_from_bytes(&tensor_to_bytes(&t), "mem").unwrap();
        assert_eq!(back.rank(), 0);
        assert_eq!(back.item().unwrap(), 2.5);
    }

    #[test]
    fn corrupted_tensor_files_give_structured_errors() {
        let t = Tensor::from_vec(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let good = tensor_to_bytes(&t);

        let mut bad_magic = good.clone();
        bad_magic[0] = b'X';
        assert!(matches!(
            tensor_from_bytes(&bad_magic, "m"),
            Err(HcplError::Parse { .. })
        ));

        let truncated = &good[..good.len() - 3];
        assert!(tensor_from_bytes(truncated, "m").is_err());

        let mut bad_dtype = good.clone();
        bad_dtype[5] = 9;
        assert!(tensor_from_bytes(&bad_dtype, "m").is_err());

        let mut trailing = good.clone();
        trailing.push(0);
        assert!(tensor_from_bytes(&trailing, "m").is_err());
    }

    #[test]
    fn tensor_file_io_round_trips_on_disk() {
        let dir = std::env::temp_dir().join(format!("hcpl-io-{}", std::process::id()));
        fs::create_dir_all(&dir).unwrap();
        let t = Tensor::from_vec(vec![2, 3], vec![0.5, 1.5, -2.0, 8.0, 0.25, -0.125]).unwrap();
        let path = dir.join("t.hcpl");
        write_tensor(&path, &t).unwrap();
        let back = read_tensor(&path).unwrap();
        assert_eq!(back.data(), t.data());
        fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn rle_encodes_runs_and_round_trips() {
        let mask = CellMask::from_indices(vec![3, 4, 5, 9, 20, 21]);
        let s = rle_encode(&mask);
        assert_eq!(s, "3 3 9 1 20 2");
        assert_eq!(rle_decode(&s, "m").unwrap(), mask);
        assert_eq!(rle_encode(&CellMask::from_indices(vec![])), "");
        assert!(rle_decode("", "m").unwrap().is_empty());
    }

    #[test]
    fn malformed_rle_is_rejected() {
        assert!(rle_decode("3", "m").is_err());
        assert!(rle_decode("3 0", "m").is_err());
        assert!(rle_decode("3 x", "m").is_err());
        assert!(rle_decode("5 3 6 2", "m").is_err()); // overlap
        assert!(rle_decode("5 3 8 1", "m").is_err()); // adjacent, should merge
        assert!(rle_decode("4294967295 2", "m").is_err()); // out of range
    }

    proptest! {
        #[test]
        fn rle_round_trips_arbitrary_pixel_sets(px in prop::collection::btree_set(0u32..5000, 0..80)) {
            let mask = CellMask::from_indices(px.into_iter().collect());
            let encoded = rle_encode(&mask);
            let decoded = rle_decode(&encoded, "prop").unwrap();
            prop_assert_eq!(&decoded, &mask);
            prop_assert_eq!(rle_encode(&decoded), encoded);
        }
    }

    fn label_fixture() -> Vec<LabelRow> {
        let mut l0 = vec![0.0; NUM_CLASSES];
        l0[2] = 1.0;
        l0[7] = 0.4375; // exact binary fraction
        let mut l1 = vec![0.0; NUM_CLASSES];
        l1[0] = 1.0;
        vec![
            LabelRow { cell_id: 10, image_id: 0, labels: l0 },
            LabelRow { cell_id: 11, image_id: 1, labels: l1 },
        ]
    }

    #[test]
    fn labels_csv_round_trips_and_is_byte_stable() {
        let rows = label_fixture();
        let text = labels_csv_string(&rows).unwrap();
        let parsed = parse_labels_csv(&text, "m").unwrap();
        assert_eq!(parsed, rows);
        assert_eq!(labels_csv_string(&parsed).unwrap(), text);
    }

    #[test]
    fn labels_csv_rejects_duplicates_and_bad_values() {
        let rows = label_fixture();
        let mut dup = rows.clone();
        dup[1].cell_id = 10;
        let text = labels_csv_string(&dup).unwrap();
        assert!(parse_labels_csv(&text, "m").is_err());

        let text = labels_csv_string(&rows).unwrap();
        let broken = text.replace("0.4375", "1.5");
        assert!(parse_labels_csv(&broken, "m").is_err());
        assert!(parse_labels_csv("nonsense header\n1,2,3\n", "m").is_err());
    }

    #[test]
    fn detection_and_ground_truth_csvs_round_trip() {
        let dir = std::env::temp_dir().join(format!("hcpl-csv-{}", std::process::id()));
        fs::create_dir_all(&dir).unwrap();
        let dets = vec![
            Detection {
                image_id: 0,
                class_id: 3,
                score: 0.8125,
                mask: CellMask::from_indices(vec![1, 2, 3, 10]),
            },
            Detection {
                image_id: 1,
                class_id: 0,
                score: 1.0,
                mask: CellMask::from_indices(vec![40, 41]),
            },
        ];
        let dp = dir.join("dets.csv");
        write_detections_csv(&dp, &dets).unwrap();
        let back = read_detections_csv(&dp).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back[0].score, 0.8125);
        assert_eq!(back[0].mask, dets[0].mask);

        let gts = vec![GroundTruthCell {
            image_id: 0,
            cell_id: 5,
            classes: vec![2, 4],
            mask: CellMask::from_indices(vec![7, 8, 9]),
        }];
        let gp = dir.join("gt.csv");
        write_ground_truth_csv(&gp, &gts).unwrap();
        let back = read_ground_truth_csv(&gp).unwrap();
        assert_eq!(back[0].classes, vec![2, 4]);
        assert_eq!(back[0].mask, gts[0].mask);
        fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn config_parses_sections_comments_and_types() {
        let text = "\n# a comment\n[train]\nepochs = 5\nlr = 0.001\naugment = true\n\n[synth]\nmixture = 0.5, 0.5\nwidths = 4,8\nname = phantom run\n";
        let cfg = Config::parse(text, "m").unwrap();
        assert_eq!(cfg.usize_or("train", "epochs", 1).unwrap(), 5);
        assert_eq!(cfg.f64_or("train", "lr", 0.1).unwrap(), 0.001);
        assert!(cfg.bool_or("train", "augment", false).unwrap());
        assert_eq!(cfg.f64_list("synth", "mixture").unwrap().unwrap(), vec![0.5, 0.5]);
        assert_eq!(cfg.usize_list_or("synth", "widths", &[1]).unwrap(), vec![4, 8]);
        assert_eq!(cfg.str_or("synth", "name", ""), "phantom run");
        // defaults for absent keys
        assert_eq!(cfg.usize_or("train", "missing", 7).unwrap(), 7);
        assert!(cfg.get("nope", "epochs").is_none());
    }

    #[test]
    fn config_rejects_malformed_lines() {
        assert!(Config::parse("[broken\nk = v\n", "m").is_err());
        assert!(Config::parse("[s]\nno_equals_here\n", "m").is_err());
        assert!(Config::parse("[s]\nk = 1\nk = 2\n", "m").is_err());
        assert!(Config::parse("[s]\nk = 1\n[s]\nj = 2\n", "m").is_err());
        assert!(Config::parse("[s]\nk = x\n", "m").unwrap().usize_or("s", "k", 0).is_err());
    }

    #[test]
    fn config_hash_tracks_the_source_bytes() {
        let a = Config::parse("[s]\nk = 1\n", "m").unwrap();
        let b = Config::parse("[s]\nk = 1\n", "m").unwrap();
        let c = Config::parse("[s]\nk = 2\n", "m").unwrap();
        assert_eq!(a.source_hash, b.source_hash);
        assert_ne!(a.source_hash, c.source_hash);
        // reference value pins the FNV-1a implementation
        assert_eq!(fnv1a64(b""), 0xcbf29ce484222325);
        assert_eq!(fnv1a64(b"a"), 0xaf63dc4c8601ec8c);
    }

    #[test]
    fn model_bundle_round_trips_at_f32_precision() {
        let dir = std::env::temp_dir().join(format!("hcpl-model-{}", std::process::id()));
        let _ = fs::remove_dir_all(&dir);
        let backbone =
            BackboneConfig { channels_in: 4, stage_widths: vec![4, 8], input_h: 16, input_w: 16 };
        let cfg = ModelConfig::new(ModelFamily::Clh, backbone, 5);
        let model = init_model(&cfg, 42).unwrap();
        save_model(&dir, &model).unwrap();
        let back = load_model(&dir).unwrap();
        assert_eq!(back.cfg, model.cfg);
        assert_eq!(back.init_seed, 42);
        assert_eq!(back.params.len(), model.params.len());
        for ((name, orig), (n2, loaded)) in model.params.iter().zip(back.params.iter()) {
            assert_eq!(name, n2);
            for (a, b) in orig.data().iter().zip(loaded.data()) {
                assert_eq!(*a as f32, *b as f32, "param {name} drifted past f32");
            }
        }
        // a second save of the loaded model is byte-identical
        let dir2 = dir.join("again");
        save_model(&dir2, &back).unwrap();
        let m1 = fs::read(dir.join("model.txt")).unwrap();
        let m2 = fs::read(dir2.join("model.txt")).unwrap();
        assert_eq!(m1, m2);
        let p1 = fs::read(dir.join("head.w.hcpl")).unwrap();
        let p2 = fs::read(dir2.join("head.w.hcpl")).unwrap();
        assert_eq!(p1, p2);
        fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn loading_a_tampered_bundle_fails() {
        let dir = std::env::temp_dir().join(format!("hcpl-tamper-{}", std::process::id()));
        let _ = fs::remove_dir_all(&dir);
        let backbone =
            BackboneConfig { channels_in: 4, stage_widths: vec![4], input_h: 8, input_w: 8 };
        let model = init_model(&ModelConfig::new(ModelFamily::Cla, backbone, 3), 7).unwrap();
        save_model(&dir, &model).unwrap();
        // swap a parameter file for one with a different shape
        write_tensor(dir.join("head.b.hcpl"), &Tensor::zeros(vec![7])).unwrap();
        assert!(load_model(&dir).is_err());
        fs::remove_dir_all(&dir).unwrap();
    }
}
