//! Monte Carlo dropout predictions, sliding-window heatmaps over a full
//! image, their smoothing and thresholded per-cell decisions, plus the
//! weights file format.

use std::path::Path;

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::GrayImage;
use crate::io::write_atomic;
use crate::labelgen::{patch_origin, OutcomeClass, PATCH_SIZE};
use crate::network::{Network, NetworkSpec, PatchSource, NUM_CLASSES};
use crate::par;

pub const HEATMAP_STRIDE: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub mean: [f64; NUM_CLASSES],
    /// Per-class sample variance across passes.
    pub variance: [f64; NUM_CLASSES],
    /// Mean of the per-class variances.
    pub uncertainty: f64,
}

impl Prediction {
    /// Most probable class; ties go to the earlier class in TP, FP, FN, TN.
    pub fn argmax(&self) -> OutcomeClass {
        let mut best = 0;
        for c in 1..NUM_CLASSES {
            if self.mean[c] > self.mean[best] {
                best = c;
            }
        }
        OutcomeClass::ALL[best]
    }

    pub fn confidence(&self) -> f64 {
        self.mean.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }
}

/// SplitMix64 finalizer over the seed and two coordinates, giving each patch
/// its own RNG stream regardless of evaluation order.
pub fn derive_seed(seed: u64, a: u64, b: u64) -> u64 {
    let mut z = seed ^ a.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ b.wrapping_mul(0xD1B5_4A32_D192_ED03);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// `passes` stochastic forward passes with fresh dropout masks. The trunk
/// has no dropout, so it is evaluated once.
pub fn predict_mc(net: &Network<f32>, patch: &[f32], passes: usize, seed: u64) -> Result<Prediction> {
    if passes == 0 {
        return Err(Error::invalid("passes", "at least one pass is required"));
    }
    let features = net.features(patch)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut mean, mut m2) = ([0.0f64; NUM_CLASSES], [0.0f64; NUM_CLASSES]);
    for t in 0..passes {
        let masks = net.sample_masks(&mut rng);
        let p = net.head(&features, masks.as_ref());
        // Welford
        for c in 0..NUM_CLASSES {
            let x = p[c] as f64;
            let d = x - mean[c];
            mean[c] += d / (t + 1) as f64;
            m2[c] += d * (x - mean[c]);
        }
    }
    let variance = if passes > 1 { m2.map(|v| (v / (passes - 1) as f64).max(0.0)) } else { [0.0; NUM_CLASSES] };
    let uncertainty = variance.iter().sum::<f64>() / NUM_CLASSES as f64;
    Ok(Prediction { mean, variance, uncertainty })
}

/// Patch grid over an image: patch (r, c) covers
/// `[c*stride, c*stride+patch) x [r*stride, r*stride+patch)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchGrid {
    pub rows: usize,
    pub cols: usize,
    pub patch: usize,
    pub stride: usize,
    pub width: usize,
    pub height: usize,
}

impl PatchGrid {
    pub fn new(width: usize, height: usize, patch: usize, stride: usize) -> Result<Self> {
        if width < patch || height < patch {
            return Err(Error::ImageTooSmall { width, height, min: patch });
        }
        if stride == 0 {
            return Err(Error::invalid("stride", "must be positive"));
        }
        let (rows, cols) = ((height - patch) / stride + 1, (width - patch) / stride + 1);
        Ok(Self { rows, cols, patch, stride, width, height })
    }

    pub fn for_image(image: &GrayImage) -> Result<Self> {
        Self::new(image.width(), image.height(), PATCH_SIZE, HEATMAP_STRIDE)
    }

    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn origin(&self, row: usize, col: usize) -> (usize, usize) {
        (col * self.stride, row * self.stride)
    }

    /// Cell whose patch is most nearly centered on pixel (u, v).
    pub fn cell_at(&self, u: f64, v: f64) -> (usize, usize) {
        let half = self.patch as f64 / 2.0;
        let idx = |p: f64, n: usize| (((p - half) / self.stride as f64).round().max(0.0) as usize).min(n - 1);
        (idx(v, self.rows), idx(u, self.cols))
    }
}

/// Row-major `(patch, row, col)` enumeration of 100x100 windows at stride 20.
pub fn slice_patches(image: &GrayImage) -> Result<Vec<(GrayImage, usize, usize)>> {
    let grid = PatchGrid::for_image(image)?;
    let mut out = Vec::with_capacity(grid.len());
    for r in 0..grid.rows {
        for c in 0..grid.cols {
            let (x0, y0) = grid.origin(r, c);
            out.push((image.crop(x0, y0, grid.patch, grid.patch), r, c));
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Heatmap {
    pub grid: PatchGrid,
    /// Row-major cells.
    pub cells: Vec<Prediction>,
}

impl Heatmap {
    pub fn get(&self, row: usize, col: usize) -> &Prediction {
        &self.cells[row * self.grid.cols + col]
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("row,col,p_tp,p_fp,p_fn,p_tn,uncertainty\n");
        for (i, p) in self.cells.iter().enumerate() {
            let (r, c) = (i / self.grid.cols, i % self.grid.cols);
            out.push_str(&format!(
                "{r},{c},{:.6},{:.6},{:.6},{:.6},{:.8}\n",
                p.mean[0], p.mean[1], p.mean[2], p.mean[3], p.uncertainty
            ));
        }
        out
    }

    /// One 8-bit image per class at cell resolution (255 = probability 1).
    pub fn class_image(&self, class: OutcomeClass) -> GrayImage {
        let values: Vec<f32> = self.cells.iter().map(|p| p.mean[class.index()] as f32).collect();
        GrayImage::from_f32(self.grid.cols, self.grid.rows, &values).unwrap()
    }
}

pub fn build_heatmap(net: &Network<f32>, image: &GrayImage, passes: usize, seed: u64) -> Result<Heatmap> {
    let grid = PatchGrid::for_image(image)?;
    if net.spec().input_size != grid.patch {
        return Err(Error::ShapeMismatch {
            expected: format!("{0}x{0} network input", grid.patch),
            actual: format!("{0}x{0}", net.spec().input_size),
        });
    }
    let cells = par::map_range(grid.len(), |i| {
        let (r, c) = (i / grid.cols, i % grid.cols);
        let (x0, y0) = grid.origin(r, c);
        let mut patch = vec![0.0f32; grid.patch * grid.patch];
        image.crop_f32(x0, y0, grid.patch, grid.patch, &mut patch);
        predict_mc(net, &patch, passes, derive_seed(seed, r as u64, c as u64))
    });
    Ok(Heatmap { grid, cells: cells.into_iter().collect::<Result<_>>()? })
}

/// Box filter over the cell grid (in-bounds neighbors only), applied per
/// class to the means and variances; means are renormalized to sum to 1.
pub fn mean_filter(heatmap: &Heatmap, kernel: usize) -> Result<Heatmap> {
    if kernel == 0 || kernel % 2 == 0 {
        return Err(Error::invalid("kernel", "must be odd and at least 1"));
    }
    let (rows, cols) = (heatmap.grid.rows, heatmap.grid.cols);
    let h = (kernel / 2) as isize;
    let mut cells = Vec::with_capacity(heatmap.cells.len());
    for r in 0..rows as isize {
        for c in 0..cols as isize {
            let mut mean = [0.0; NUM_CLASSES];
            let mut variance = [0.0; NUM_CLASSES];
            let mut n = 0.0;
            for rr in (r - h).max(0)..=(r + h).min(rows as isize - 1) {
                for cc in (c - h).max(0)..=(c + h).min(cols as isize - 1) {
                    let p = heatmap.get(rr as usize, cc as usize);
                    for k in 0..NUM_CLASSES {
                        mean[k] += p.mean[k];
                        variance[k] += p.variance[k];
                    }
                    n += 1.0;
                }
            }
            let total: f64 = mean.iter().sum();
            let mean = mean.map(|m| m / total);
            let variance = variance.map(|v| v / n);
            let uncertainty = variance.iter().sum::<f64>() / NUM_CLASSES as f64;
            cells.push(Prediction { mean, variance, uncertainty });
        }
    }
    Ok(Heatmap { grid: heatmap.grid, cells })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Decision {
    Class(OutcomeClass),
    Abstain,
}

impl Decision {
    pub fn class(self) -> Option<OutcomeClass> {
        match self {
            Decision::Class(c) => Some(c),
            Decision::Abstain => None,
        }
    }
}

/// Argmax class where the uncertainty is strictly below `u_max`.
pub fn decide(p: &Prediction, u_max: f64) -> Decision {
    if p.uncertainty < u_max {
        Decision::Class(p.argmax())
    } else {
        Decision::Abstain
    }
}

pub fn decide_cells(heatmap: &Heatmap, u_max: f64) -> Vec<Decision> {
    heatmap.cells.iter().map(|p| decide(p, u_max)).collect()
}

const WEIGHTS_FORMAT: &str = "introspect-weights";
const WEIGHTS_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WeightsHeader {
    pub format: String,
    pub version: u32,
    pub spec: NetworkSpec,
    pub seed: u64,
    pub params: usize,
}

/// One JSON header line, then the parameters as little-endian f32.
pub fn encode_weights(net: &Network<f32>, seed: u64) -> Vec<u8> {
    let header = WeightsHeader {
        format: WEIGHTS_FORMAT.into(),
        version: WEIGHTS_VERSION,
        spec: net.spec().clone(),
        seed,
        params: net.num_params(),
    };
    let mut out = serde_json::to_vec(&header).unwrap();
    out.push(b'\n');
    for p in net.params() {
        out.extend_from_slice(&p.to_le_bytes());
    }
    out
}

pub fn decode_weights(bytes: &[u8]) -> Result<(Network<f32>, WeightsHeader)> {
    let bad = |reason: String| Error::format("weights file", reason);
    let split = bytes.iter().position(|&b| b == b'\n').ok_or_else(|| bad("missing header line".into()))?;
    let header: WeightsHeader = serde_json::from_slice(&bytes[..split]).map_err(|e| bad(e.to_string()))?;
    if header.format != WEIGHTS_FORMAT || header.version != WEIGHTS_VERSION {
        return Err(bad(format!("unsupported format {} v{}", header.format, header.version)));
    }
    let blob = &bytes[split + 1..];
    if blob.len() != 4 * header.params {
        return Err(bad(format!("expected {} parameters, found {} bytes", header.params, blob.len())));
    }
    let params = blob.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
    let net = Network::from_params(header.spec.clone(), params)?;
    Ok((net, header))
}

pub fn save_weights(path: &Path, net: &Network<f32>, seed: u64) -> Result<()> {
    write_atomic(path, &encode_weights(net, seed))
}

pub fn load_weights(path: &Path) -> Result<(Network<f32>, WeightsHeader)> {
    if !path.exists() {
        return Err(Error::MissingArtifact(path.to_path_buf()));
    }
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_weights(&bytes)
}

/// A patch cut lazily from a stored frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PatchRef {
    pub image: u32,
    pub x0: u16,
    pub y0: u16,
    pub label: OutcomeClass,
}

/// Labeled patches referencing shared full frames, so a large training set
/// costs a few bytes per patch beyond the frames themselves.
#[derive(Debug, Clone, Default)]
pub struct PatchSet {
    pub images: Vec<GrayImage>,
    pub items: Vec<PatchRef>,
    pub size: usize,
}

impl PatchSet {
    pub fn new(size: usize) -> Self {
        Self { images: vec![], items: vec![], size }
    }

    /// Adds a frame and returns its index for [`PatchSet::push`].
    pub fn add_image(&mut self, image: GrayImage) -> u32 {
        self.images.push(image);
        (self.images.len() - 1) as u32
    }

    /// Adds the patch centered on (u, v) of image `image` (shifted inward at
    /// the borders).
    pub fn push(&mut self, image: u32, u: i64, v: i64, label: OutcomeClass) -> Result<()> {
        let img = &self.images[image as usize];
        let (x0, y0) = patch_origin(img.width(), img.height(), u, v, self.size)?;
        self.items.push(PatchRef { image, x0: x0 as u16, y0: y0 as u16, label });
        Ok(())
    }

    pub fn patch(&self, i: usize) -> Vec<f32> {
        let mut out = vec![0.0; self.size * self.size];
        self.fill(i, &mut out);
        out
    }

    pub fn extend(&mut self, other: PatchSet) {
        let base = self.images.len() as u32;
        self.images.extend(other.images);
        self.items.extend(other.items.into_iter().map(|r| PatchRef { image: r.image + base, ..r }));
    }
}

impl PatchSource for PatchSet {
    fn len(&self) -> usize {
        self.items.len()
    }

    fn label(&self, i: usize) -> OutcomeClass {
        self.items[i].label
    }

    fn fill(&self, i: usize, out: &mut [f32]) {
        let r = self.items[i];
        self.images[r.image as usize].crop_f32(r.x0 as usize, r.y0 as usize, self.size, self.size, out);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn uniform() -> Prediction {
        Prediction { mean: [0.25; 4], variance: [0.0; 4], uncertainty: 0.0 }
    }

    #[test]
    fn slice_counts() {
        assert_eq!(PatchGrid::new(960, 600, 100, 20).unwrap().len(), 44 * 26);
        assert_eq!(PatchGrid::new(100, 100, 100, 20).unwrap().len(), 1);
        assert_eq!(PatchGrid::new(120, 100, 100, 20).unwrap().len(), 2);
        assert!(PatchGrid::new(99, 100, 100, 20).is_err());
        let img = GrayImage::from_raw(120, 100, (0..12_000).map(|i| (i % 120) as u8).collect()).unwrap();
        let patches = slice_patches(&img).unwrap();
        assert_eq!(patches.len(), 2);
        assert_eq!((patches[1].1, patches[1].2), (0, 1));
        assert_eq!(patches[1].0.get_u8(0, 0), 20);
    }

    #[test]
    fn single_pass_has_zero_variance() {
        let net = Network::<f32>::init(NetworkSpec::default(), 2).unwrap();
        let patch = vec![0.4; 10_000];
        let p = predict_mc(&net, &patch, 1, 9).unwrap();
        assert_eq!(p.variance, [0.0; 4]);
        assert!(predict_mc(&net, &patch, 0, 9).is_err());
    }

    #[test]
    fn filter_spreads_a_peak() {
        let grid = PatchGrid::new(160, 160, 100, 20).unwrap();
        assert_eq!((grid.rows, grid.cols), (4, 4));
        let mut cells = vec![uniform(); 16];
        cells[5].mean = [1.0, 0.0, 0.0, 0.0];
        let hm = Heatmap { grid, cells };
        let f = mean_filter(&hm, 3).unwrap();
        // (2, 2) is an interior neighbor of the peak at (1, 1)
        assert!((f.get(2, 2).mean[0] - (0.25 + 0.75 / 9.0)).abs() < 1e-12);
        assert!((f.get(2, 2).mean[1] - (0.25 - 0.25 / 9.0)).abs() < 1e-12);
        assert_eq!(mean_filter(&hm, 1).unwrap(), hm);
        assert!(mean_filter(&hm, 2).is_err());
        let flat = Heatmap { grid, cells: vec![uniform(); 16] };
        assert_eq!(mean_filter(&flat, 3).unwrap(), flat);
    }

    #[test]
    fn decisions() {
        let p = Prediction { mean: [0.1, 0.6, 0.2, 0.1], variance: [0.001; 4], uncertainty: 0.001 };
        assert_eq!(decide(&p, 0.01), Decision::Class(OutcomeClass::FP));
        assert_eq!(decide(&p, 0.0), Decision::Abstain);
        assert_eq!(decide(&p, f64::INFINITY), Decision::Class(OutcomeClass::FP));
        assert_eq!(uniform().argmax(), OutcomeClass::TP);
    }

    #[test]
    fn weights_round_trip() {
        let net = Network::<f32>::init(NetworkSpec::default(), 5).unwrap();
        let bytes = encode_weights(&net, 5);
        let (back, header) = decode_weights(&bytes).unwrap();
        assert_eq!(back.params(), net.params());
        assert_eq!(header.seed, 5);
        assert!(decode_weights(&bytes[..bytes.len() - 1]).is_err());
    }
}
