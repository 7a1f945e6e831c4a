//! Volume persistence, the synthetic nested-ellipsoid phantom, and
//! sliding-window inference.
//!
//! The on-disk format is a short text header followed by the raw
//! little-endian payload in (C, D, H, W) row-major order:
//!
//! ```text
//! volume v1
//! dtype f32
//! shape 4 64 64 64
//! spacing 1 1 1
//! modalities T1 T1ce T2 FLAIR
//! end
//! <payload>
//! ```
//!
//! Label maps use the same container with dtype u8 and a single channel.
//! By convention images carry the .vol extension and label maps .seg,
//! though nothing in the reader depends on it.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::network::Network;
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::volume::{LabelVolume, Volume5};

const MAGIC: &str = "volume v1";

/// A single-case image with its physical metadata.
#[derive(Clone, Debug)]
pub struct VolumeFile<T> {
    /// Shape [1, C, D, H, W]; the container stores one case per file.
    pub volume: Volume5<T>,
    pub spacing: [f64; 3],
    pub modalities: Vec<String>,
}

fn header_string(
    dtype: &str,
    shape: [usize; 4],
    spacing: [f64; 3],
    modalities: &[String],
) -> String {
    format!(
        "{MAGIC}\ndtype {dtype}\nshape {} {} {} {}\nspacing {} {} {}\nmodalities {}\nend\n",
        shape[0],
        shape[1],
        shape[2],
        shape[3],
        spacing[0],
        spacing[1],
        spacing[2],
        modalities.join(" ")
    )
}

struct ParsedHeader {
    dtype: String,
    shape: [usize; 4],
    spacing: [f64; 3],
    modalities: Vec<String>,
    payload_start: usize,
}

fn parse_header(path: &Path, bytes: &[u8]) -> Result<ParsedHeader> {
    let bad = |detail: String| Error::format(path.display().to_string(), detail);
    // The header is pure ASCII terminated by an "end" line; scan line by
    // line so the binary payload is never interpreted as text.
    let mut pos = 0usize;
    let mut lines: Vec<String> = Vec::new();
    loop {
        let rest = &bytes[pos..];
        let nl = rest
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| bad("header not terminated by an end line".to_string()))?;
        let line = std::str::from_utf8(&rest[..nl])
            .map_err(|_| bad("header is not valid text".to_string()))?
            .to_string();
        pos += nl + 1;
        if line == "end" {
            break;
        }
        lines.push(line);
        if lines.len() > 16 {
            return Err(bad("header too long, missing end line".to_string()));
        }
    }
    if lines.first().map(String::as_str) != Some(MAGIC) {
        return Err(bad(format!("expected magic line '{MAGIC}'")));
    }
    let mut dtype = None;
    let mut shape = None;
    let mut spacing = None;
    let mut modalities = None;
    for line in &lines[1..] {
        let (key, rest) = line
            .split_once(' ')
            .ok_or_else(|| bad(format!("malformed header line '{line}'")))?;
        match key {
            "dtype" => dtype = Some(rest.to_string()),
            "shape" => {
                let dims: Vec<usize> = rest
                    .split_whitespace()
                    .map(|t| t.parse().map_err(|_| bad(format!("bad shape token '{t}'"))))
                    .collect::<Result<_>>()?;
                if dims.len() != 4 {
                    return Err(bad(format!("shape needs 4 extents, got {}", dims.len())));
                }
                shape = Some([dims[0], dims[1], dims[2], dims[3]]);
            }
            "spacing" => {
                let s: Vec<f64> = rest
                    .split_whitespace()
                    .map(|t| t.parse().map_err(|_| bad(format!("bad spacing token '{t}'"))))
                    .collect::<Result<_>>()?;
                if s.len() != 3 || s.iter().any(|v| !(*v > 0.0)) {
                    return Err(bad(format!("spacing must be 3 positive values, got '{rest}'")));
                }
                spacing = Some([s[0], s[1], s[2]]);
            }
            "modalities" => {
                modalities = Some(rest.split_whitespace().map(str::to_string).collect())
            }
            other => return Err(bad(format!("unknown header field '{other}'"))),
        }
    }
    Ok(ParsedHeader {
        dtype: dtype.ok_or_else(|| bad("missing dtype".to_string()))?,
        shape: shape.ok_or_else(|| bad("missing shape".to_string()))?,
        spacing: spacing.ok_or_else(|| bad("missing spacing".to_string()))?,
        modalities: modalities.unwrap_or_default(),
        payload_start: pos,
    })
}

fn check_payload(path: &Path, bytes: &[u8], start: usize, numel: usize, width: usize) -> Result<()> {
    let got = bytes.len() - start;
    let want = numel * width;
    if got != want {
        return Err(Error::format(
            path.display().to_string(),
            format!("payload holds {got} bytes, header shape needs {want}"),
        ));
    }
    Ok(())
}

pub fn write_volume<T: Scalar>(path: &Path, file: &VolumeFile<T>) -> Result<()> {
    let [b, c, d, h, w] = file.volume.shape();
    if b != 1 {
        return Err(Error::shape("write_volume", format!("one case per file, got batch {b}")));
    }
    if file.modalities.len() != c {
        return Err(Error::config(format!(
            "{} modality names for {c} channels",
            file.modalities.len()
        )));
    }
    let mut out =
        header_string(T::DTYPE, [c, d, h, w], file.spacing, &file.modalities).into_bytes();
    out.reserve(file.volume.numel() * T::BYTE_WIDTH);
    for &v in file.volume.data() {
        v.write_le(&mut out);
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn read_volume<T: Scalar>(path: &Path) -> Result<VolumeFile<T>> {
    let bytes = fs::read(path)?;
    let hdr = parse_header(path, &bytes)?;
    if hdr.dtype != T::DTYPE {
        return Err(Error::format(
            path.display().to_string(),
            format!("dtype '{}' where {} was requested", hdr.dtype, T::DTYPE),
        ));
    }
    let [c, d, h, w] = hdr.shape;
    let numel = c * d * h * w;
    check_payload(path, &bytes, hdr.payload_start, numel, T::BYTE_WIDTH)?;
    if !hdr.modalities.is_empty() && hdr.modalities.len() != c {
        return Err(Error::format(
            path.display().to_string(),
            format!("{} modality names for {c} channels", hdr.modalities.len()),
        ));
    }
    let mut data = Vec::with_capacity(numel);
    for i in 0..numel {
        let at = hdr.payload_start + i * T::BYTE_WIDTH;
        data.push(T::read_le(&bytes[at..at + T::BYTE_WIDTH]));
    }
    Ok(VolumeFile {
        volume: Volume5::new([1, c, d, h, w], data)?,
        spacing: hdr.spacing,
        modalities: hdr.modalities,
    })
}

/// Label maps ride in the same container: dtype u8, one channel named
/// "labels".
pub fn write_labels(path: &Path, labels: &LabelVolume, spacing: [f64; 3]) -> Result<()> {
    let [b, d, h, w] = labels.shape();
    if b != 1 {
        return Err(Error::shape("write_labels", format!("one case per file, got batch {b}")));
    }
    let names = vec!["labels".to_string()];
    let mut out = header_string("u8", [1, d, h, w], spacing, &names).into_bytes();
    out.extend_from_slice(labels.data());
    fs::write(path, out)?;
    Ok(())
}

pub fn read_labels(path: &Path) -> Result<(LabelVolume, [f64; 3])> {
    let bytes = fs::read(path)?;
    let hdr = parse_header(path, &bytes)?;
    if hdr.dtype != "u8" {
        return Err(Error::format(
            path.display().to_string(),
            format!("dtype '{}' where a u8 label map was requested", hdr.dtype),
        ));
    }
    let [c, d, h, w] = hdr.shape;
    if c != 1 {
        return Err(Error::format(
            path.display().to_string(),
            format!("label maps are single-channel, got {c}"),
        ));
    }
    check_payload(path, &bytes, hdr.payload_start, d * h * w, 1)?;
    let labels = LabelVolume::new([1, d, h, w], bytes[hdr.payload_start..].to_vec())?;
    Ok((labels, hdr.spacing))
}

/// Three concentric ellipsoids on a quiet background: label 1 is the outer
/// shell (edema analog), 2 the middle shell (core), 3 the center
/// (enhancing). Radii are voxel-unit semi-axes, strictly nested per axis.
#[derive(Clone, Debug)]
pub struct PhantomSpec {
    pub dims: [usize; 3],
    pub center: [f64; 3],
    /// Outer, middle, inner semi-axes.
    pub radii: [[f64; 3]; 3],
    /// Mean intensity per region (background, edema, core, enhancing) and
    /// modality.
    pub region_means: [[f64; 4]; 4],
    pub noise: f64,
    pub seed: u64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        PhantomSpec {
            dims: [64, 64, 64],
            center: [31.5, 31.5, 31.5],
            radii: [[24.0, 22.0, 20.0], [15.0, 14.0, 13.0], [8.0, 7.0, 6.0]],
            region_means: [
                [0.10, 0.12, 0.08, 0.11],
                [0.35, 0.30, 0.55, 0.60],
                [0.55, 0.50, 0.40, 0.45],
                [0.80, 0.85, 0.65, 0.70],
            ],
            noise: 0.02,
            seed: 0,
        }
    }
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        if self.dims.iter().any(|&d| d == 0) {
            return Err(Error::config(format!("phantom dims {:?} must be positive", self.dims)));
        }
        for axis in 0..3 {
            let [outer, middle, inner] =
                [self.radii[0][axis], self.radii[1][axis], self.radii[2][axis]];
            if !(inner > 0.0 && inner < middle && middle < outer) {
                return Err(Error::config(format!(
                    "radii along axis {axis} must nest strictly: {inner} < {middle} < {outer}"
                )));
            }
            let lo = self.center[axis] - outer;
            let hi = self.center[axis] + outer;
            if lo < 0.0 || hi > (self.dims[axis] - 1) as f64 {
                return Err(Error::config(format!(
                    "outer ellipsoid spans [{lo}, {hi}] outside axis {axis} of extent {}",
                    self.dims[axis]
                )));
            }
        }
        if self.noise < 0.0 || !self.noise.is_finite() {
            return Err(Error::config(format!("noise level {} must be nonnegative", self.noise)));
        }
        Ok(())
    }

    /// Innermost ellipsoid containing the voxel, as a label.
    fn label_at(&self, z: usize, y: usize, x: usize) -> u8 {
        let inside = |r: &[f64; 3]| -> bool {
            let dz = (z as f64 - self.center[0]) / r[0];
            let dy = (y as f64 - self.center[1]) / r[1];
            let dx = (x as f64 - self.center[2]) / r[2];
            dz * dz + dy * dy + dx * dx <= 1.0
        };
        if inside(&self.radii[2]) {
            3
        } else if inside(&self.radii[1]) {
            2
        } else if inside(&self.radii[0]) {
            1
        } else {
            0
        }
    }
}

/// Deterministic synthetic case: labels from ellipsoid membership, four
/// image channels at per-region means plus Gaussian noise drawn in a fixed
/// (channel, voxel) order.
pub fn generate_phantom<T: Scalar>(spec: &PhantomSpec) -> Result<(Volume5<T>, LabelVolume)> {
    spec.validate()?;
    let [d, h, w] = spec.dims;
    let mut labels = LabelVolume::zeros([1, d, h, w]);
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                labels.data_mut()[(z * h + y) * w + x] = spec.label_at(z, y, x);
            }
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let noise = if spec.noise > 0.0 {
        Some(Normal::new(0.0, spec.noise).map_err(|e| Error::config(e.to_string()))?)
    } else {
        None
    };
    let voxels = d * h * w;
    let mut image = Volume5::zeros([1, 4, d, h, w]);
    for c in 0..4 {
        for i in 0..voxels {
            let mean = spec.region_means[labels.data()[i] as usize][c];
            let sample = match &noise {
                Some(n) => mean + n.sample(&mut rng),
                None => mean,
            };
            image.data_mut()[c * voxels + i] = T::from_f64(sample);
        }
    }
    Ok((image, labels))
}

/// Tile start offsets along one axis: march by `stride` and clamp the last
/// tile inward so it ends exactly at the boundary.
pub fn tile_origins(dim: usize, patch: usize, stride: usize) -> Vec<usize> {
    let mut starts = Vec::new();
    let mut at = 0usize;
    loop {
        if at + patch >= dim {
            starts.push(dim - patch);
            return starts;
        }
        starts.push(at);
        at += stride;
    }
}

/// Per-axis strides for the given overlap fraction.
pub fn infer_strides(patch: [usize; 3], overlap: f64) -> Result<[usize; 3]> {
    if !(0.0..=0.9).contains(&overlap) {
        return Err(Error::config(format!("overlap {overlap} outside [0, 0.9]")));
    }
    let mut strides = [0usize; 3];
    for a in 0..3 {
        strides[a] = ((patch[a] as f64 * (1.0 - overlap)).round() as usize).max(1);
    }
    Ok(strides)
}

fn check_patch_fits(dims: [usize; 3], patch: [usize; 3]) -> Result<()> {
    if patch.iter().zip(&dims).any(|(p, d)| p > d) || patch.contains(&0) {
        return Err(Error::shape(
            "sliding window",
            format!("patch {patch:?} does not fit volume {dims:?}"),
        ));
    }
    Ok(())
}

/// How often each voxel is visited by the tiling; the normalization buffer
/// of the stitcher, computable without a model.
pub fn coverage_counts(dims: [usize; 3], patch: [usize; 3], overlap: f64) -> Result<Vec<u32>> {
    check_patch_fits(dims, patch)?;
    let strides = infer_strides(patch, overlap)?;
    let [d, h, w] = dims;
    let mut counts = vec![0u32; d * h * w];
    for z0 in tile_origins(d, patch[0], strides[0]) {
        for y0 in tile_origins(h, patch[1], strides[1]) {
            for x0 in tile_origins(w, patch[2], strides[2]) {
                for z in z0..z0 + patch[0] {
                    for y in y0..y0 + patch[1] {
                        for x in x0..x0 + patch[2] {
                            counts[(z * h + y) * w + x] += 1;
                        }
                    }
                }
            }
        }
    }
    Ok(counts)
}

/// Runs the model over every tile and stitches count-normalized softmax
/// probabilities. Tiles are evaluated in the order given by `order` (a
/// permutation of the raster tile list) but accumulated in raster order,
/// so the result is bitwise independent of evaluation order.
fn stitch_probs<T: Scalar>(
    net: &Network,
    store: &ParamStore<T>,
    image: &Volume5<T>,
    patch: [usize; 3],
    overlap: f64,
    order: Option<&[usize]>,
) -> Result<(Volume5<T>, Vec<u32>)> {
    let [b, c_in, d, h, w] = image.shape();
    if b != 1 {
        return Err(Error::shape("sliding window", format!("one case at a time, got batch {b}")));
    }
    check_patch_fits([d, h, w], patch)?;
    let strides = infer_strides(patch, overlap)?;
    let mut tiles = Vec::new();
    for z0 in tile_origins(d, patch[0], strides[0]) {
        for y0 in tile_origins(h, patch[1], strides[1]) {
            for x0 in tile_origins(w, patch[2], strides[2]) {
                tiles.push([z0, y0, x0]);
            }
        }
    }
    let eval_order: Vec<usize> = match order {
        Some(o) => {
            let mut seen = vec![false; tiles.len()];
            for &i in o {
                if i >= tiles.len() || seen[i] {
                    return Err(Error::config("order is not a tile permutation".to_string()));
                }
                seen[i] = true;
            }
            if o.len() != tiles.len() {
                return Err(Error::config("order is not a tile permutation".to_string()));
            }
            o.to_vec()
        }
        None => (0..tiles.len()).collect(),
    };
    let [pd, ph, pw] = patch;
    let mut outputs: Vec<Option<Volume5<T>>> = (0..tiles.len()).map(|_| None).collect();
    let mut classes = 0usize;
    for &t in &eval_order {
        let [z0, y0, x0] = tiles[t];
        let tile = Volume5::from_fn([1, c_in, pd, ph, pw], |idx| {
            let x = idx % pw;
            let y = (idx / pw) % ph;
            let z = (idx / (pw * ph)) % pd;
            let c = idx / (pw * ph * pd);
            image.data()[((c * d + z0 + z) * h + y0 + y) * w + x0 + x]
        });
        let mut tape = Tape::new();
        let xi = tape.leaf(tile);
        let logits = net.forward(&mut tape, store, xi)?;
        let probs = tape.softmax_channels(logits)?;
        let out = tape.value(probs).clone();
        classes = out.shape()[1];
        outputs[t] = Some(out);
    }
    let mut acc = Volume5::<T>::zeros([1, classes, d, h, w]);
    let mut counts = vec![0u32; d * h * w];
    for (t, &[z0, y0, x0]) in tiles.iter().enumerate() {
        let probs = outputs[t].as_ref().unwrap();
        for c in 0..classes {
            for z in 0..pd {
                for y in 0..ph {
                    for x in 0..pw {
                        let dst = ((c * d + z0 + z) * h + y0 + y) * w + x0 + x;
                        let src = ((c * pd + z) * ph + y) * pw + x;
                        acc.data_mut()[dst] = acc.data()[dst] + probs.data()[src];
                    }
                }
            }
        }
        for z in 0..pd {
            for y in 0..ph {
                for x in 0..pw {
                    counts[((z0 + z) * h + y0 + y) * w + x0 + x] += 1;
                }
            }
        }
    }
    let voxels = d * h * w;
    for c in 0..classes {
        for i in 0..voxels {
            let n = T::from_f64(counts[i] as f64);
            acc.data_mut()[c * voxels + i] = acc.data()[c * voxels + i] / n;
        }
    }
    Ok((acc, counts))
}

/// Count-normalized stitched class probabilities plus the visit counts.
pub fn sliding_window_probs<T: Scalar>(
    net: &Network,
    store: &ParamStore<T>,
    image: &Volume5<T>,
    patch: [usize; 3],
    overlap: f64,
) -> Result<(Volume5<T>, Vec<u32>)> {
    stitch_probs(net, store, image, patch, overlap, None)
}

/// Highest-probability class per voxel, first index winning ties.
pub fn argmax_channels<T: Scalar>(probs: &Volume5<T>) -> Result<LabelVolume> {
    let [b, c_n, d, h, w] = probs.shape();
    if c_n == 0 || c_n > 255 {
        return Err(Error::shape("argmax", format!("{c_n} channels do not fit a u8 label")));
    }
    let voxels = d * h * w;
    let mut out = LabelVolume::zeros([b, d, h, w]);
    for bi in 0..b {
        for i in 0..voxels {
            let mut best_c = 0usize;
            let mut best = probs.data()[(bi * c_n) * voxels + i];
            for c in 1..c_n {
                let v = probs.data()[(bi * c_n + c) * voxels + i];
                if v > best {
                    best = v;
                    best_c = c;
                }
            }
            out.data_mut()[bi * voxels + i] = best_c as u8;
        }
    }
    Ok(out)
}

/// Full-volume prediction: stitched softmax, then argmax.
pub fn sliding_window_infer<T: Scalar>(
    net: &Network,
    store: &ParamStore<T>,
    image: &Volume5<T>,
    patch: [usize; 3],
    overlap: f64,
) -> Result<LabelVolume> {
    let (probs, _) = sliding_window_probs(net, store, image, patch, overlap)?;
    argmax_channels(&probs)
}
