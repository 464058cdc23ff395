use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::image::{GrayImage, Mask};
use crate::error::{Error, Result};
use crate::hash::Fnv1a;
use crate::nn::{Shape, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PatchRole {
    Train,
    Val,
    Tile,
}

/// Where a patch came from: source image index and the top-left corner on
/// that image's padded canvas.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct PatchOrigin {
    pub image: usize,
    pub row: usize,
    pub col: usize,
}

/// Geometry of one source image inside a patch set.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SourceInfo {
    pub id: String,
    /// Original `(height, width)`.
    pub dims: (usize, usize),
    /// Padded canvas `(height, width)`.
    pub canvas: (usize, usize),
    /// Zero rows/columns added above and left of the image.
    pub margin: usize,
}

impl SourceInfo {
    /// Pixel of the source image at canvas position `(row, col)`, zero outside.
    fn sample(&self, img: &GrayImage, row: usize, col: usize) -> f32 {
        let (r, c) = (row.wrapping_sub(self.margin), col.wrapping_sub(self.margin));
        if r < self.dims.0 && c < self.dims.1 {
            img.get(c, r)
        } else {
            0.0
        }
    }

    fn cut(&self, img: &GrayImage, origin: (usize, usize), size: usize, dst: &mut [f32]) {
        for y in 0..size {
            for x in 0..size {
                dst[y * size + x] = self.sample(img, origin.0 + y, origin.1 + x);
            }
        }
    }
}

/// Square patches plus the coordinates needed to put predictions back.
#[derive(Debug, Clone)]
pub struct PatchSet {
    pub role: PatchRole,
    pub size: usize,
    /// `(K, 1, size, size)`.
    pub inputs: Tensor,
    /// Groundtruth patches cut at the same coordinates, if known.
    pub targets: Option<Tensor>,
    pub origins: Vec<PatchOrigin>,
    pub sources: Vec<SourceInfo>,
}

impl PatchSet {
    pub fn len(&self) -> usize {
        self.origins.len()
    }

    pub fn is_empty(&self) -> bool {
        self.origins.is_empty()
    }

    /// Subset in the order of `indices`.
    pub fn select(&self, indices: &[usize], role: PatchRole) -> PatchSet {
        PatchSet {
            role,
            size: self.size,
            inputs: self.inputs.gather(indices),
            targets: self.targets.as_ref().map(|t| t.gather(indices)),
            origins: indices.iter().map(|&i| self.origins[i]).collect(),
            sources: self.sources.clone(),
        }
    }

    /// Concatenate sets with the same role and patch size; image indices are
    /// renumbered to follow `sources` order.
    pub fn merge(sets: &[PatchSet]) -> Result<PatchSet> {
        let first = sets.first().ok_or_else(|| Error::Config("nothing to merge".into()))?;
        if sets.iter().any(|s| s.size != first.size || s.role != first.role) {
            return Err(Error::Shape("cannot merge patch sets of different size or role".into()));
        }
        let has_targets = first.targets.is_some();
        if sets.iter().any(|s| s.targets.is_some() != has_targets) {
            return Err(Error::Shape("cannot merge labelled and unlabelled patch sets".into()));
        }
        let mut origins = Vec::new();
        let mut sources = Vec::new();
        for s in sets {
            let base = sources.len();
            origins.extend(s.origins.iter().map(|o| PatchOrigin { image: o.image + base, ..*o }));
            sources.extend(s.sources.iter().cloned());
        }
        let inputs = Tensor::cat_batch(&sets.iter().map(|s| s.inputs.clone()).collect::<Vec<_>>())?;
        let targets = if has_targets {
            Some(Tensor::cat_batch(&sets.iter().map(|s| s.targets.clone().expect("checked")).collect::<Vec<_>>())?)
        } else {
            None
        };
        Ok(PatchSet { role: first.role, size: first.size, inputs, targets, origins, sources })
    }
}

/// Seed of one image's sampling stream, derived from the run seed and the
/// image id so that images can be processed in any order.
pub fn image_seed(seed: u64, id: &str) -> u64 {
    let mut h = Fnv1a::default();
    h.update(&seed.to_le_bytes());
    h.update(id.as_bytes());
    h.finish()
}

/// Draw `n` patches of `size x size` whose centers are uniform over the
/// image. The image is zero-padded by `size / 2` on every side first, so
/// patches near (or beyond) the FOV border are always complete.
pub fn sample_training_patches(
    img: &GrayImage,
    gt: &Mask,
    id: &str,
    n: usize,
    size: usize,
    seed: u64,
) -> Result<PatchSet> {
    if img.dims() != gt.dims() {
        return Err(Error::Shape(format!(
            "image '{id}' is {}x{} but its groundtruth is {}x{}",
            img.width(),
            img.height(),
            gt.width(),
            gt.height()
        )));
    }
    if size == 0 || img.width() == 0 || img.height() == 0 {
        return Err(Error::Config(format!("cannot sample {size}px patches from image '{id}'")));
    }
    let (h, w) = img.dims();
    let margin = size / 2;
    let source = SourceInfo { id: id.to_string(), dims: (h, w), canvas: (h + size, w + size), margin };
    let mut rng = ChaCha8Rng::seed_from_u64(image_seed(seed, id));
    let origins: Vec<PatchOrigin> = (0..n)
        .map(|_| {
            let cy = rng.gen_range(0..h);
            let cx = rng.gen_range(0..w);
            // Center (cy, cx) sits at canvas (cy + margin, cx + margin).
            PatchOrigin { image: 0, row: cy, col: cx }
        })
        .collect();
    let labels = gt.to_gray();
    let shape = Shape::new(n, 1, size, size);
    let mut inputs = Tensor::zeros(shape);
    let mut targets = Tensor::zeros(shape);
    for (k, o) in origins.iter().enumerate() {
        source.cut(img, (o.row, o.col), size, inputs.item_slice_mut(k));
        source.cut(&labels, (o.row, o.col), size, targets.item_slice_mut(k));
    }
    Ok(PatchSet { role: PatchRole::Train, size, inputs, targets: Some(targets), origins, sources: vec![source] })
}

/// The last `val_count` patches drawn for each image become validation.
pub fn split_train_val(set: &PatchSet, val_count: usize) -> Result<(PatchSet, PatchSet)> {
    let mut per_image: Vec<Vec<usize>> = vec![Vec::new(); set.sources.len()];
    for (i, o) in set.origins.iter().enumerate() {
        per_image[o.image].push(i);
    }
    let mut train = Vec::new();
    let mut val = Vec::new();
    for (img, idx) in per_image.iter().enumerate() {
        if idx.len() < val_count {
            return Err(Error::Config(format!(
                "image '{}' has {} patches, fewer than the {val_count} held out for validation",
                set.sources[img].id,
                idx.len()
            )));
        }
        let cut = idx.len() - val_count;
        train.extend_from_slice(&idx[..cut]);
        val.extend_from_slice(&idx[cut..]);
    }
    Ok((set.select(&train, PatchRole::Train), set.select(&val, PatchRole::Val)))
}

/// Stride grid of overlapping tiles covering an image padded on the bottom
/// and right.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TileGrid {
    pub source: SourceInfo,
    pub size: usize,
    pub stride: usize,
}

impl TileGrid {
    pub fn new(id: &str, dims: (usize, usize), size: usize, stride: usize) -> Result<Self> {
        if size == 0 || stride == 0 {
            return Err(Error::Config(format!("patch size ({size}) and stride ({stride}) must be positive")));
        }
        let pad = |len: usize| size + (len.max(size) - size).div_ceil(stride) * stride;
        let canvas = (pad(dims.0), pad(dims.1));
        Ok(TileGrid { source: SourceInfo { id: id.to_string(), dims, canvas, margin: 0 }, size, stride })
    }

    /// Tiles along `(rows, cols)`.
    pub fn grid(&self) -> (usize, usize) {
        let (h, w) = self.source.canvas;
        ((h - self.size) / self.stride + 1, (w - self.size) / self.stride + 1)
    }

    pub fn len(&self) -> usize {
        let (r, c) = self.grid();
        r * c
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn origin(&self, k: usize) -> PatchOrigin {
        let cols = self.grid().1;
        PatchOrigin { image: 0, row: (k / cols) * self.stride, col: (k % cols) * self.stride }
    }

    /// Cut tiles `range` of `img` into a `(len, 1, size, size)` batch.
    pub fn batch(&self, img: &GrayImage, range: std::ops::Range<usize>) -> Tensor {
        let mut t = Tensor::zeros(Shape::new(range.len(), 1, self.size, self.size));
        for (slot, k) in range.enumerate() {
            let o = self.origin(k);
            self.source.cut(img, (o.row, o.col), self.size, t.item_slice_mut(slot));
        }
        t
    }
}

/// Every stride-`stride` tile of `img`, in row-major grid order.
pub fn extract_overlapping_patches(img: &GrayImage, id: &str, size: usize, stride: usize) -> Result<PatchSet> {
    let grid = TileGrid::new(id, img.dims(), size, stride)?;
    let inputs = grid.batch(img, 0..grid.len());
    let origins = (0..grid.len()).map(|k| grid.origin(k)).collect();
    Ok(PatchSet { role: PatchRole::Tile, size, inputs, targets: None, origins, sources: vec![grid.source] })
}

/// Per-pixel sum and coverage count over one padded canvas.
#[derive(Debug, Clone)]
pub struct RecomposeBuffer {
    source: SourceInfo,
    sum: Vec<f64>,
    count: Vec<u32>,
}

impl RecomposeBuffer {
    pub fn new(source: &SourceInfo) -> Self {
        let n = source.canvas.0 * source.canvas.1;
        RecomposeBuffer { source: source.clone(), sum: vec![0.0; n], count: vec![0; n] }
    }

    /// Accumulate one `size x size` prediction at `origin`.
    pub fn add(&mut self, origin: PatchOrigin, size: usize, patch: &[f32]) {
        let cw = self.source.canvas.1;
        for y in 0..size {
            let row = (origin.row + y) * cw + origin.col;
            for x in 0..size {
                self.sum[row + x] += f64::from(patch[y * size + x]);
                self.count[row + x] += 1;
            }
        }
    }

    /// Average over covering patches and crop to the original image.
    pub fn finish(&self) -> Result<GrayImage> {
        if let Some(i) = self.count.iter().position(|&c| c == 0) {
            let cw = self.source.canvas.1;
            return Err(Error::Internal(format!(
                "tile grid of '{}' leaves canvas pixel ({}, {}) uncovered",
                self.source.id,
                i / cw,
                i % cw
            )));
        }
        let (h, w) = self.source.dims;
        let cw = self.source.canvas.1;
        let m = self.source.margin;
        Ok(GrayImage::from_fn(w, h, |x, y| {
            let i = (y + m) * cw + x + m;
            (self.sum[i] / f64::from(self.count[i])) as f32
        }))
    }
}

/// Average `predictions` (aligned 1:1 with `set.origins`) back onto the
/// single source image of a tile set.
pub fn recompose(predictions: &Tensor, set: &PatchSet) -> Result<GrayImage> {
    let [k, c, ph, pw] = predictions.shape().dims();
    if set.sources.len() != 1 {
        return Err(Error::Config(format!("recompose needs a single-image patch set, got {}", set.sources.len())));
    }
    if k != set.len() || c != 1 || ph != set.size || pw != set.size {
        return Err(Error::Shape(format!(
            "predictions {} do not match {} patches of {}x{}",
            predictions.shape(),
            set.len(),
            set.size,
            set.size
        )));
    }
    let mut buf = RecomposeBuffer::new(&set.sources[0]);
    for (i, &o) in set.origins.iter().enumerate() {
        buf.add(o, set.size, predictions.item_slice(i));
    }
    buf.finish()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(w: usize, h: usize) -> GrayImage {
        GrayImage::from_fn(w, h, |x, y| ((x * 7 + y * 13) % 256) as f32 / 255.0)
    }

    #[test]
    fn tile_counts() {
        assert_eq!(TileGrid::new("a", (48, 48), 48, 5).unwrap().len(), 1);
        let g = TileGrid::new("b", (58, 53), 48, 5).unwrap();
        assert_eq!(g.source.canvas, (58, 53));
        assert_eq!(g.grid(), (3, 2));
        let g = TileGrid::new("drive", (584, 565), 48, 5).unwrap();
        assert_eq!(g.source.canvas, (588, 568));
        assert_eq!(g.len(), 11445);
    }

    #[test]
    fn small_images_pad_up_to_one_tile() {
        let g = TileGrid::new("tiny", (10, 30), 48, 5).unwrap();
        assert_eq!(g.source.canvas, (48, 48));
        assert_eq!(g.len(), 1);
    }

    #[test]
    fn copy_predictor_recomposes_exactly() {
        let img = ramp(61, 50);
        let set = extract_overlapping_patches(&img, "r", 48, 5).unwrap();
        let back = recompose(&set.inputs, &set).unwrap();
        assert_eq!(back, img);
    }

    #[test]
    fn constant_predictions_recompose_to_constant() {
        let img = ramp(53, 58);
        let set = extract_overlapping_patches(&img, "r", 48, 5).unwrap();
        let preds = Tensor::full(set.inputs.shape(), 0.7);
        let back = recompose(&preds, &set).unwrap();
        assert!(back.data().iter().all(|&v| (v - 0.7).abs() < 1e-6));
    }

    #[test]
    fn incomplete_grid_is_an_internal_error() {
        let img = ramp(50, 50);
        let mut set = extract_overlapping_patches(&img, "r", 48, 5).unwrap();
        set.origins.pop();
        let keep: Vec<usize> = (0..set.origins.len()).collect();
        set.inputs = set.inputs.gather(&keep);
        assert!(matches!(recompose(&set.inputs, &set), Err(Error::Internal(_))));
    }

    #[test]
    fn sampled_patches_match_their_groundtruth() {
        let img = ramp(30, 20);
        let gt = Mask::from_fn(30, 20, |x, y| (x + y) % 3 == 0);
        let set = sample_training_patches(&img, &gt, "s", 50, 16, 9).unwrap();
        let targets = set.targets.as_ref().unwrap();
        for (k, o) in set.origins.iter().enumerate() {
            assert!(o.row < 20 && o.col < 30);
            for y in 0..16 {
                for x in 0..16 {
                    let (r, c) = ((o.row + y) as isize - 8, (o.col + x) as isize - 8);
                    let inside = (0..20).contains(&r) && (0..30).contains(&c);
                    let (v, t) = (set.inputs.at(k, 0, y, x), targets.at(k, 0, y, x));
                    if inside {
                        assert_eq!(v, img.get(c as usize, r as usize));
                        assert_eq!(t == 1.0, gt.get(c as usize, r as usize));
                    } else {
                        assert_eq!((v, t), (0.0, 0.0));
                    }
                }
            }
        }
    }

    #[test]
    fn split_takes_the_tail_of_each_image() {
        let img = ramp(30, 30);
        let gt = Mask::filled(30, 30, false);
        let a = sample_training_patches(&img, &gt, "a", 10, 8, 1).unwrap();
        let b = sample_training_patches(&img, &gt, "b", 10, 8, 1).unwrap();
        let all = PatchSet::merge(&[a.clone(), b]).unwrap();
        let (train, val) = split_train_val(&all, 3).unwrap();
        assert_eq!((train.len(), val.len()), (14, 6));
        assert_eq!(&val.origins[..3], &a.origins[7..]);
        assert!(matches!(split_train_val(&all, 11), Err(Error::Config(_))));
    }

    #[test]
    fn image_seed_depends_on_id_and_seed() {
        assert_ne!(image_seed(1, "a"), image_seed(1, "b"));
        assert_ne!(image_seed(1, "a"), image_seed(2, "a"));
        assert_eq!(image_seed(1, "a"), image_seed(1, "a"));
    }
}
