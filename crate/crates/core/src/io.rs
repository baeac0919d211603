//! File formats and preprocessing: IDX ingestion, the packed OCCB dataset
//! format, checkpoints, split manifests, rotations and bilinear resizing.
//!
//! OCCB layout (all integers little-endian):
//!
//! ```text
//! "OCCB" | u16 version = 1 | u32 class_count | u32 counts[class_count]
//! | u8 shape kind: 0 -> u16 h, u16 w, u16 c ; 1 -> u32 dim
//! | f32 payload, classes concatenated, examples row-major (h, w, c)
//! ```
//!
//! OCCK checkpoint layout:
//!
//! ```text
//! "OCCK" | u16 version = 1
//! | u8 architecture: 0 -> conv (u32 blocks, u32 filters) ; 1 -> mlp (u32 len, u32 hidden[len])
//! | u8 head: 0 meta_svdd, 1 oc_protonet | f64 lambda
//! | u8 ndim, u32 input_shape[ndim] | u32 feature_dim
//! | u32 tensor count, per tensor: u16 name length, name, u8 ndim, u32 dims[ndim], f32 data
//! | u32 batch-norm layers, per layer: u32 channels, f64 momentum, f64 epsilon,
//!   f32 mean[channels], f32 variance[channels]
//! | u64 step | f64 best mean | f64 best ci low (NaN when absent)
//! ```

use std::collections::BTreeSet;
use std::path::Path;

use crate::encoder::{Architecture, BatchNormState, EncoderParams, NamedTensor};
use crate::episodes::{split_by_class, ClassIndexedDataset, SplitTag};
use crate::error::{Error, Result};
use crate::heads::{Head, HeadKind};
use crate::tensor::Tensor;

pub const OCCB_VERSION: u16 = 1;
pub const CHECKPOINT_VERSION: u16 = 1;

pub fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path.display().to_string(), e))
}

/// Bounds-checked little/big-endian reader that reports byte offsets.
struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        Reader { bytes, pos: 0 }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| {
                Error::parse(
                    self.pos,
                    format!(
                        "truncated {what}: expected {n} bytes, found {}",
                        self.bytes.len() - self.pos
                    ),
                )
            })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn array<const N: usize>(&mut self, what: &str) -> Result<[u8; N]> {
        Ok(self.take(N, what)?.try_into().expect("length checked"))
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.array::<1>(what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.array(what)?))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array(what)?))
    }

    fn u32_be(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_be_bytes(self.array(what)?))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array(what)?))
    }

    fn f64(&mut self, what: &str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.array(what)?))
    }

    fn f32s(&mut self, count: usize, what: &str) -> Result<Vec<f32>> {
        let bytes = count
            .checked_mul(4)
            .ok_or_else(|| Error::parse(self.pos, format!("{what}: element count overflows")))?;
        let raw = self.take(bytes, what)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect())
    }

    fn magic(&mut self, expected: &[u8; 4]) -> Result<()> {
        let m = self.array::<4>("magic")?;
        if &m != expected {
            return Err(Error::parse(
                0,
                format!(
                    "bad magic {:?}, expected {:?}",
                    String::from_utf8_lossy(&m),
                    String::from_utf8_lossy(expected)
                ),
            ));
        }
        Ok(())
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(Error::parse(
                self.pos,
                format!(
                    "{} trailing bytes after the payload",
                    self.bytes.len() - self.pos
                ),
            ));
        }
        Ok(())
    }
}

fn idx_header(r: &mut Reader, magic: u32, kind: &str) -> Result<Vec<usize>> {
    let m = r.u32_be("IDX magic")?;
    if m != magic {
        return Err(Error::parse(
            0,
            format!("{kind}: magic {m:#010x}, expected {magic:#010x}"),
        ));
    }
    let ndim = (magic & 0xff) as usize;
    (0..ndim)
        .map(|_| r.u32_be("IDX dimension").map(|d| d as usize))
        .collect()
}

/// Parses an unsigned-byte IDX image file (`0x00000803`) into
/// `(count, h, w)` and pixels scaled to `[0, 1]`.
pub fn parse_idx_images(bytes: &[u8]) -> Result<(usize, usize, usize, Vec<f32>)> {
    let mut r = Reader::new(bytes);
    let dims = idx_header(&mut r, 0x0000_0803, "images")?;
    let (n, h, w) = (dims[0], dims[1], dims[2]);
    let len = n
        .checked_mul(h)
        .and_then(|v| v.checked_mul(w))
        .ok_or_else(|| Error::parse(4, format!("image dimensions {n}x{h}x{w} overflow")))?;
    let pixels = r.take(len, "image payload")?;
    r.finish()?;
    Ok((
        n,
        h,
        w,
        pixels.iter().map(|&p| f32::from(p) / 255.0).collect(),
    ))
}

/// Parses an unsigned-byte IDX label file (`0x00000801`).
pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<u8>> {
    let mut r = Reader::new(bytes);
    let dims = idx_header(&mut r, 0x0000_0801, "labels")?;
    let labels = r.take(dims[0], "label payload")?.to_vec();
    r.finish()?;
    Ok(labels)
}

/// Builds a class-indexed dataset from IDX image and label bytes.
pub fn idx_dataset(images: &[u8], labels: &[u8]) -> Result<ClassIndexedDataset> {
    let (n, h, w, pixels) = parse_idx_images(images)?;
    let labels = parse_idx_labels(labels)?;
    if labels.len() != n {
        return Err(Error::parse(
            4,
            format!(
                "label file has {} entries but image file has {n}",
                labels.len()
            ),
        ));
    }
    let len = h * w;
    let examples = labels
        .iter()
        .enumerate()
        .map(|(i, &l)| (pixels[i * len..(i + 1) * len].to_vec(), i64::from(l)));
    split_by_class(examples, vec![h, w, 1], 1)
}

pub fn ingest_idx(images_path: &Path, labels_path: &Path) -> Result<ClassIndexedDataset> {
    idx_dataset(&read_file(images_path)?, &read_file(labels_path)?)
}

fn u16_dim(v: usize, what: &str) -> Result<u16> {
    u16::try_from(v).map_err(|_| Error::config(format!("{what} {v} does not fit the format")))
}

fn u32_count(v: usize, what: &str) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::config(format!("{what} {v} does not fit the format")))
}

pub fn save_occb(dataset: &ClassIndexedDataset) -> Result<Vec<u8>> {
    if dataset.class_count() == 0 {
        return Err(Error::config("cannot save a dataset with no classes"));
    }
    let mut out = Vec::new();
    out.extend_from_slice(b"OCCB");
    out.extend_from_slice(&OCCB_VERSION.to_le_bytes());
    out.extend_from_slice(&u32_count(dataset.class_count(), "class count")?.to_le_bytes());
    for c in 0..dataset.class_count() {
        out.extend_from_slice(&u32_count(dataset.class_size(c), "class size")?.to_le_bytes());
    }
    match dataset.example_shape() {
        &[h, w, c] => {
            out.push(0);
            for (v, what) in [(h, "height"), (w, "width"), (c, "channels")] {
                out.extend_from_slice(&u16_dim(v, what)?.to_le_bytes());
            }
        }
        &[d] => {
            out.push(1);
            out.extend_from_slice(&u32_count(d, "dimension")?.to_le_bytes());
        }
        other => {
            return Err(Error::config(format!(
                "OCCB stores (h, w, c) or flat examples, not {other:?}"
            )))
        }
    }
    for c in 0..dataset.class_count() {
        for v in dataset.class_data(c) {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

/// Loads an OCCB file. The split tag is not stored; the result is tagged
/// `Train`.
pub fn load_occb(bytes: &[u8]) -> Result<ClassIndexedDataset> {
    let mut r = Reader::new(bytes);
    r.magic(b"OCCB")?;
    let version = r.u16("version")?;
    if version != OCCB_VERSION {
        return Err(Error::parse(
            4,
            format!("unsupported OCCB version {version}"),
        ));
    }
    let class_count = r.u32("class count")? as usize;
    if class_count == 0 {
        return Err(Error::parse(6, "OCCB file declares zero classes"));
    }
    let counts_at = r.pos;
    // each count needs 4 bytes; reject absurd headers before allocating
    r.take(4 * class_count, "class counts")?;
    r.pos = counts_at;
    let counts: Vec<usize> = (0..class_count)
        .map(|_| r.u32("class count").map(|c| c as usize))
        .collect::<Result<_>>()?;
    let kind_at = r.pos;
    let shape = match r.u8("shape kind")? {
        0 => vec![
            r.u16("height")? as usize,
            r.u16("width")? as usize,
            r.u16("channels")? as usize,
        ],
        1 => vec![r.u32("dimension")? as usize],
        k => return Err(Error::parse(kind_at, format!("unknown shape kind {k}"))),
    };
    let len: usize = shape.iter().product();
    let mut classes = Vec::with_capacity(class_count);
    for (c, &count) in counts.iter().enumerate() {
        if count == 0 {
            return Err(Error::parse(
                counts_at + 4 * c,
                format!("class {c} is empty"),
            ));
        }
        classes.push(r.f32s(count * len, "payload")?);
    }
    r.finish()?;
    ClassIndexedDataset::new(shape, classes, SplitTag::Train)
}

pub fn read_occb(path: &Path) -> Result<ClassIndexedDataset> {
    load_occb(&read_file(path)?)
}

pub fn write_occb(path: &Path, dataset: &ClassIndexedDataset) -> Result<()> {
    write_file(path, &save_occb(dataset)?)
}

/// Encoder parameters plus training metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub head: Head,
    pub params: EncoderParams,
    pub step: u64,
    pub best_mean: Option<f64>,
    pub best_ci_low: Option<f64>,
}

fn put_u32(out: &mut Vec<u8>, v: usize, what: &str) -> Result<()> {
    out.extend_from_slice(&u32_count(v, what)?.to_le_bytes());
    Ok(())
}

fn put_f32s(out: &mut Vec<u8>, values: &[f64]) {
    for &v in values {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
}

fn put_shape(out: &mut Vec<u8>, shape: &[usize]) -> Result<()> {
    out.push(u8::try_from(shape.len()).map_err(|_| Error::config("tensor rank too large"))?);
    for &d in shape {
        put_u32(out, d, "dimension")?;
    }
    Ok(())
}

fn get_shape(r: &mut Reader) -> Result<Vec<usize>> {
    let ndim = r.u8("rank")? as usize;
    (0..ndim)
        .map(|_| r.u32("dimension").map(|d| d as usize))
        .collect()
}

fn f32_tensor(r: &mut Reader, shape: Vec<usize>, what: &str) -> Result<Tensor<f64>> {
    let at = r.pos;
    let n: usize = shape.iter().product();
    let data = r.f32s(n, what)?.into_iter().map(f64::from).collect();
    Tensor::new(shape, data).map_err(|e| Error::parse(at, format!("{what}: {e}")))
}

/// Serializes parameters as `f32`; values are rounded to single precision.
pub fn save_checkpoint(ck: &Checkpoint) -> Result<Vec<u8>> {
    let p = &ck.params;
    let mut out = Vec::new();
    out.extend_from_slice(b"OCCK");
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    match &p.architecture {
        Architecture::Conv { blocks, filters } => {
            out.push(0);
            put_u32(&mut out, *blocks, "blocks")?;
            put_u32(&mut out, *filters, "filters")?;
        }
        Architecture::Mlp { hidden } => {
            out.push(1);
            put_u32(&mut out, hidden.len(), "hidden layers")?;
            for &h in hidden {
                put_u32(&mut out, h, "hidden width")?;
            }
        }
    }
    out.push(match ck.head.kind {
        HeadKind::MetaSvdd => 0,
        HeadKind::OcProtonet => 1,
    });
    out.extend_from_slice(&ck.head.lambda.to_le_bytes());
    put_shape(&mut out, &p.input_shape)?;
    put_u32(&mut out, p.feature_dim, "feature dimension")?;
    put_u32(&mut out, p.tensors.len(), "tensor count")?;
    for t in &p.tensors {
        let name = t.name.as_bytes();
        out.extend_from_slice(&u16_dim(name.len(), "name length")?.to_le_bytes());
        out.extend_from_slice(name);
        put_shape(&mut out, t.value.shape())?;
        put_f32s(&mut out, t.value.data());
    }
    put_u32(&mut out, p.batch_norm.len(), "batch-norm layers")?;
    for bn in &p.batch_norm {
        put_u32(&mut out, bn.running_mean.len(), "channels")?;
        out.extend_from_slice(&bn.momentum.to_le_bytes());
        out.extend_from_slice(&bn.epsilon.to_le_bytes());
        put_f32s(&mut out, &bn.running_mean);
        put_f32s(&mut out, &bn.running_variance);
    }
    out.extend_from_slice(&ck.step.to_le_bytes());
    out.extend_from_slice(&ck.best_mean.unwrap_or(f64::NAN).to_le_bytes());
    out.extend_from_slice(&ck.best_ci_low.unwrap_or(f64::NAN).to_le_bytes());
    Ok(out)
}

pub fn load_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader::new(bytes);
    r.magic(b"OCCK")?;
    let version = r.u16("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::parse(
            4,
            format!("unsupported checkpoint version {version}"),
        ));
    }
    let arch_at = r.pos;
    let architecture = match r.u8("architecture")? {
        0 => Architecture::Conv {
            blocks: r.u32("blocks")? as usize,
            filters: r.u32("filters")? as usize,
        },
        1 => {
            let n = r.u32("hidden layers")? as usize;
            let hidden = (0..n)
                .map(|_| r.u32("hidden width").map(|h| h as usize))
                .collect::<Result<_>>()?;
            Architecture::Mlp { hidden }
        }
        t => {
            return Err(Error::parse(
                arch_at,
                format!("unknown architecture tag {t}"),
            ))
        }
    };
    let head_at = r.pos;
    let kind = match r.u8("head")? {
        0 => HeadKind::MetaSvdd,
        1 => HeadKind::OcProtonet,
        t => return Err(Error::parse(head_at, format!("unknown head tag {t}"))),
    };
    let lambda_at = r.pos;
    let head =
        Head::new(kind, r.f64("lambda")?).map_err(|e| Error::parse(lambda_at, e.to_string()))?;
    let input_shape = get_shape(&mut r)?;
    let feature_dim = r.u32("feature dimension")? as usize;
    let count = r.u32("tensor count")? as usize;
    let mut tensors = Vec::new();
    for _ in 0..count {
        let len = r.u16("name length")? as usize;
        let at = r.pos;
        let name = std::str::from_utf8(r.take(len, "tensor name")?)
            .map_err(|_| Error::parse(at, "tensor name is not UTF-8"))?
            .to_string();
        let shape = get_shape(&mut r)?;
        let value = f32_tensor(&mut r, shape, &name)?;
        tensors.push(NamedTensor { name, value });
    }
    let layers = r.u32("batch-norm layers")? as usize;
    let mut batch_norm = Vec::new();
    for _ in 0..layers {
        let channels = r.u32("channels")? as usize;
        let momentum = r.f64("momentum")?;
        let epsilon = r.f64("epsilon")?;
        let running_mean = r
            .f32s(channels, "running mean")?
            .into_iter()
            .map(f64::from)
            .collect();
        let running_variance = r
            .f32s(channels, "running variance")?
            .into_iter()
            .map(f64::from)
            .collect();
        batch_norm.push(BatchNormState {
            running_mean,
            running_variance,
            momentum,
            epsilon,
        });
    }
    let step = r.u64("step")?;
    let best_mean = Some(r.f64("best mean")?).filter(|v| !v.is_nan());
    let best_ci_low = Some(r.f64("best ci low")?).filter(|v| !v.is_nan());
    r.finish()?;
    let params = EncoderParams {
        architecture,
        input_shape,
        feature_dim,
        tensors,
        batch_norm,
    };
    params.check_consistency()?;
    Ok(Checkpoint {
        head,
        params,
        step,
        best_mean,
        best_ci_low,
    })
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    load_checkpoint(&read_file(path)?)
}

pub fn write_checkpoint(path: &Path, ck: &Checkpoint) -> Result<()> {
    write_file(path, &save_checkpoint(ck)?)
}

fn square_side(dataset: &ClassIndexedDataset) -> Result<(usize, usize)> {
    match dataset.example_shape() {
        &[h, w, c] if h == w => Ok((h, c)),
        other => Err(Error::config(format!(
            "rotation needs square (h, w, c) examples, got {other:?}"
        ))),
    }
}

/// Rotates one `(n, n, c)` example by 90 degrees counter-clockwise:
/// `out[i][j] = in[j][n - 1 - i]`.
pub fn rotate90(example: &[f32], side: usize, channels: usize) -> Vec<f32> {
    let mut out = vec![0.0; example.len()];
    for i in 0..side {
        for j in 0..side {
            let src = (j * side + (side - 1 - i)) * channels;
            let dst = (i * side + j) * channels;
            out[dst..dst + channels].copy_from_slice(&example[src..src + channels]);
        }
    }
    out
}

/// Class `i` becomes classes `4i + r`, holding its examples rotated by
/// `r * 90` degrees counter-clockwise.
pub fn augment_rotations(dataset: &ClassIndexedDataset) -> Result<ClassIndexedDataset> {
    let (side, channels) = square_side(dataset)?;
    let len = dataset.example_len();
    let mut classes = Vec::with_capacity(4 * dataset.class_count());
    for c in 0..dataset.class_count() {
        let mut current = dataset.class_data(c).to_vec();
        for r in 0..4 {
            if r > 0 {
                current = current
                    .chunks_exact(len)
                    .flat_map(|e| rotate90(e, side, channels))
                    .collect();
            }
            classes.push(current.clone());
        }
    }
    ClassIndexedDataset::new(dataset.example_shape().to_vec(), classes, dataset.split)
}

/// Bilinear resize of one `(h, w, c)` example using half-pixel centers.
pub fn resize_example(
    example: &[f32],
    h: usize,
    w: usize,
    c: usize,
    th: usize,
    tw: usize,
) -> Vec<f32> {
    let axis = |dst: usize, src_len: usize, dst_len: usize| {
        let scale = src_len as f64 / dst_len as f64;
        let s = ((dst as f64 + 0.5) * scale - 0.5).clamp(0.0, (src_len - 1) as f64);
        let i0 = s.floor() as usize;
        let i1 = (i0 + 1).min(src_len - 1);
        (i0, i1, s - i0 as f64)
    };
    let mut out = Vec::with_capacity(th * tw * c);
    for y in 0..th {
        let (y0, y1, fy) = axis(y, h, th);
        for x in 0..tw {
            let (x0, x1, fx) = axis(x, w, tw);
            for ch in 0..c {
                let at = |yy: usize, xx: usize| f64::from(example[(yy * w + xx) * c + ch]);
                let top = at(y0, x0) * (1.0 - fx) + at(y0, x1) * fx;
                let bottom = at(y1, x0) * (1.0 - fx) + at(y1, x1) * fx;
                out.push((top * (1.0 - fy) + bottom * fy) as f32);
            }
        }
    }
    out
}

pub fn resize_bilinear(
    dataset: &ClassIndexedDataset,
    target_h: usize,
    target_w: usize,
) -> Result<ClassIndexedDataset> {
    let &[h, w, c] = dataset.example_shape() else {
        return Err(Error::config(format!(
            "resize needs (h, w, c) examples, got {:?}",
            dataset.example_shape()
        )));
    };
    if target_h == 0 || target_w == 0 {
        return Err(Error::config("resize targets must be positive"));
    }
    let len = dataset.example_len();
    let classes = (0..dataset.class_count())
        .map(|k| {
            dataset
                .class_data(k)
                .chunks_exact(len)
                .flat_map(|e| resize_example(e, h, w, c, target_h, target_w))
                .collect()
        })
        .collect();
    ClassIndexedDataset::new(vec![target_h, target_w, c], classes, dataset.split)
}

/// Class-id lists per named split.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Manifest {
    pub splits: Vec<(String, Vec<usize>)>,
}

impl Manifest {
    /// Parses `split <name>` headers followed by whitespace-separated class ids.
    /// Blank lines and `#` comments are ignored. Splits must not share ids.
    pub fn parse(text: &str) -> Result<Self> {
        let mut splits: Vec<(String, Vec<usize>)> = Vec::new();
        let mut seen = BTreeSet::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(name) = line.strip_prefix("split ") {
                let name = name.trim().to_string();
                if splits.iter().any(|(n, _)| *n == name) {
                    return Err(Error::config(format!(
                        "manifest line {}: split '{name}' repeated",
                        lineno + 1
                    )));
                }
                splits.push((name, Vec::new()));
                continue;
            }
            let Some((name, ids)) = splits.last_mut() else {
                return Err(Error::config(format!(
                    "manifest line {}: class id before any split header",
                    lineno + 1
                )));
            };
            for token in line.split_whitespace() {
                let id: usize = token.parse().map_err(|_| {
                    Error::config(format!(
                        "manifest line {}: '{token}' is not a class id",
                        lineno + 1
                    ))
                })?;
                if !seen.insert(id) {
                    return Err(Error::config(format!(
                        "manifest: class {id} appears in more than one place (split '{name}')"
                    )));
                }
                ids.push(id);
            }
        }
        Ok(Manifest { splits })
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (name, ids) in &self.splits {
            s.push_str(&format!("split {name}\n"));
            for id in ids {
                s.push_str(&format!("{id}\n"));
            }
        }
        s
    }

    pub fn classes(&self, split: &str) -> Option<&[usize]> {
        self.splits
            .iter()
            .find(|(n, _)| n == split)
            .map(|(_, ids)| ids.as_slice())
    }

    /// The classes of `split` as a dataset.
    pub fn select(
        &self,
        dataset: &ClassIndexedDataset,
        split: &str,
    ) -> Result<ClassIndexedDataset> {
        let ids = self
            .classes(split)
            .ok_or_else(|| Error::config(format!("manifest has no split '{split}'")))?;
        let tag = split.parse().unwrap_or(SplitTag::Train);
        dataset.select_classes(ids, tag)
    }
}

pub fn read_manifest(path: &Path) -> Result<Manifest> {
    let text =
        std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    Manifest::parse(&text)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn idx_images(n: u32, h: u32, w: u32, pixels: &[u8]) -> Vec<u8> {
        let mut b = vec![0, 0, 8, 3];
        for d in [n, h, w] {
            b.extend_from_slice(&d.to_be_bytes());
        }
        b.extend_from_slice(pixels);
        b
    }

    fn idx_labels(labels: &[u8]) -> Vec<u8> {
        let mut b = vec![0, 0, 8, 1];
        b.extend_from_slice(&(labels.len() as u32).to_be_bytes());
        b.extend_from_slice(labels);
        b
    }

    #[test]
    fn idx_two_images() {
        let imgs = idx_images(2, 2, 2, &[0, 255, 51, 0, 1, 2, 3, 4]);
        let d = idx_dataset(&imgs, &idx_labels(&[4, 1])).unwrap();
        assert_eq!(d.class_count(), 2);
        assert_eq!(d.example_shape(), &[2, 2, 1]);
        assert_eq!(d.class_data(1)[1], 1.0);
        assert_eq!(d.class_data(1)[2], 0.2);
    }

    #[test]
    fn idx_truncated_reports_lengths() {
        let imgs = idx_images(2, 2, 2, &[0, 1, 2]);
        let err = parse_idx_images(&imgs).unwrap_err();
        let msg = err.to_string();
        assert!(matches!(err, Error::Parse { offset: 16, .. }), "{msg}");
        assert!(msg.contains("expected 8 bytes, found 3"), "{msg}");
    }

    #[test]
    fn idx_bad_magic_and_count_mismatch() {
        let mut imgs = idx_images(1, 1, 1, &[0]);
        imgs[3] = 1;
        assert!(matches!(
            parse_idx_images(&imgs),
            Err(Error::Parse { offset: 0, .. })
        ));
        let imgs = idx_images(1, 1, 1, &[0]);
        assert!(idx_dataset(&imgs, &idx_labels(&[0, 1])).is_err());
    }

    #[test]
    fn occb_round_trip() {
        let d = ClassIndexedDataset::new(
            vec![2],
            vec![vec![0.1, 0.2], vec![0.3, 0.4, 0.5, 0.6]],
            SplitTag::Train,
        )
        .unwrap();
        let bytes = save_occb(&d).unwrap();
        assert_eq!(load_occb(&bytes).unwrap(), d);
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(load_occb(&bad).is_err());
        let mut bad = bytes;
        bad[4] = 2;
        assert!(load_occb(&bad)
            .unwrap_err()
            .to_string()
            .contains("version 2"));
    }

    #[test]
    fn rotate_two_by_two() {
        // [[a, b], [c, d]] rotated counter-clockwise is [[b, d], [a, c]]
        assert_eq!(
            rotate90(&[1.0, 2.0, 3.0, 4.0], 2, 1),
            vec![2.0, 4.0, 1.0, 3.0]
        );
    }

    #[test]
    fn rotation_needs_square() {
        let d =
            ClassIndexedDataset::new(vec![2, 3, 1], vec![vec![0.0; 6]], SplitTag::Train).unwrap();
        assert!(matches!(augment_rotations(&d), Err(Error::Config(_))));
    }

    #[test]
    fn resize_examples() {
        assert_eq!(
            resize_example(&[0.0, 1.0, 1.0, 0.0], 2, 2, 1, 1, 1),
            vec![0.5]
        );
        let img: Vec<f32> = (0..12).map(|i| i as f32 / 12.0).collect();
        assert_eq!(resize_example(&img, 2, 3, 2, 2, 3), img);
        assert!(resize_example(&[0.7; 4], 2, 2, 1, 5, 3)
            .iter()
            .all(|&v| v == 0.7));
    }

    #[test]
    fn manifest_parsing() {
        let m = Manifest::parse("# splits\nsplit train\n0\n2\n\nsplit test\n1\n").unwrap();
        assert_eq!(m.classes("train"), Some(&[0, 2][..]));
        assert_eq!(Manifest::parse(&m.to_text()).unwrap(), m);
        assert!(Manifest::parse("split a\n0\nsplit b\n0\n").is_err());
        assert!(Manifest::parse("3\n").is_err());
    }
}
