//! Adversary models: patch placements of various shapes and sparse-k pixel
//! attacks, plus the input intervals they induce.

use crate::error::{Error, Result};
use crate::interval::IntervalTensor;
use crate::ops;
use crate::tensor::Tensor;
use std::fmt;
use std::path::Path;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ShapeKind {
    Square,
    Rectangle,
    Line,
    Diamond,
    Parallelogram,
    Custom,
}

impl fmt::Display for ShapeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            ShapeKind::Square => "square",
            ShapeKind::Rectangle => "rectangle",
            ShapeKind::Line => "line",
            ShapeKind::Diamond => "diamond",
            ShapeKind::Parallelogram => "parallelogram",
            ShapeKind::Custom => "custom",
        };
        f.write_str(s)
    }
}

/// A patch shape as cell offsets inside a tight bounding box.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ShapeMask {
    kind: ShapeKind,
    cells: Vec<(usize, usize)>,
    height: usize,
    width: usize,
}

impl ShapeMask {
    /// Normalizes offsets so the bounding box is tight, sorts row-major and
    /// removes duplicates.
    pub fn from_cells(kind: ShapeKind, cells: &[(usize, usize)]) -> Result<Self> {
        if cells.is_empty() {
            return Err(Error::Config("shape mask needs at least one cell".into()));
        }
        let min_r = cells.iter().map(|c| c.0).min().unwrap();
        let min_c = cells.iter().map(|c| c.1).min().unwrap();
        let mut cells: Vec<(usize, usize)> =
            cells.iter().map(|&(r, c)| (r - min_r, c - min_c)).collect();
        cells.sort_unstable();
        cells.dedup();
        let height = cells.iter().map(|c| c.0).max().unwrap() + 1;
        let width = cells.iter().map(|c| c.1).max().unwrap() + 1;
        Ok(ShapeMask {
            kind,
            cells,
            height,
            width,
        })
    }

    pub fn square(side: usize) -> Result<Self> {
        if side == 0 {
            return Err(Error::Config("square side must be positive".into()));
        }
        let cells: Vec<_> = (0..side)
            .flat_map(|r| (0..side).map(move |c| (r, c)))
            .collect();
        ShapeMask::from_cells(ShapeKind::Square, &cells)
    }

    pub fn rectangle(h: usize, w: usize) -> Result<Self> {
        if h == 0 || w == 0 {
            return Err(Error::Config("rectangle extents must be positive".into()));
        }
        let cells: Vec<_> = (0..h).flat_map(|r| (0..w).map(move |c| (r, c))).collect();
        let kind = if h == 1 || w == 1 {
            ShapeKind::Line
        } else {
            ShapeKind::Rectangle
        };
        ShapeMask::from_cells(kind, &cells)
    }

    pub fn kind(&self) -> ShapeKind {
        self.kind
    }

    pub fn cells(&self) -> &[(usize, usize)] {
        &self.cells
    }

    pub fn pixel_count(&self) -> usize {
        self.cells.len()
    }

    pub fn bounding_box(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    /// True if every cell of `self` is also a cell of `other`.
    pub fn fits_inside(&self, other: &ShapeMask) -> bool {
        self.cells.iter().all(|c| other.cells.binary_search(c).is_ok())
    }
}

/// A shape anchored at its bounding-box top-left corner in the image.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PatchPlacement {
    pub mask: ShapeMask,
    pub anchor: (usize, usize),
}

impl PatchPlacement {
    /// Flat input indices covered by this placement, spanning all channels.
    pub fn flat_indices(&self, channels: usize, h: usize, w: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(channels * self.mask.cells.len());
        for ch in 0..channels {
            for &(r, c) in &self.mask.cells {
                out.push(ch * h * w + (self.anchor.0 + r) * w + (self.anchor.1 + c));
            }
        }
        out
    }
}

/// All anchors keeping the mask inside an `h x w` image, in row-major order.
/// For an n-by-n square in an m-by-m image this has (m-n+1)^2 entries.
pub fn enumerate_placements(
    image_dims: (usize, usize),
    mask: &ShapeMask,
) -> Result<Vec<PatchPlacement>> {
    let (h, w) = image_dims;
    if mask.height > h || mask.width > w {
        return Err(Error::Config(format!(
            "mask bounding box {}x{} exceeds image {}x{}",
            mask.height, mask.width, h, w
        )));
    }
    let mut out = Vec::with_capacity((h - mask.height + 1) * (w - mask.width + 1));
    for r in 0..=(h - mask.height) {
        for c in 0..=(w - mask.width) {
            out.push(PatchPlacement {
                mask: mask.clone(),
                anchor: (r, c),
            });
        }
    }
    Ok(out)
}

#[derive(Clone, Debug)]
pub enum ThreatKind {
    Patch(ShapeMask),
    Sparse { k: usize },
}

/// The adversary's feasible set: which pixels may change and over what
/// intensity range, scaled by the training schedule's epsilon.
#[derive(Clone, Debug)]
pub struct ThreatModel {
    pub kind: ThreatKind,
    /// Per-channel (lo, hi) intensity range.
    pub range: Vec<(f32, f32)>,
    /// Interpolation between the clean image (0) and the full range (1).
    pub eps_scale: f32,
}

impl ThreatModel {
    pub fn patch(mask: ShapeMask, channels: usize) -> Self {
        ThreatModel {
            kind: ThreatKind::Patch(mask),
            range: vec![(0.0, 1.0); channels],
            eps_scale: 1.0,
        }
    }

    pub fn sparse(k: usize, channels: usize) -> Self {
        ThreatModel {
            kind: ThreatKind::Sparse { k },
            range: vec![(0.0, 1.0); channels],
            eps_scale: 1.0,
        }
    }

    pub fn with_eps(mut self, eps: f32) -> Self {
        self.eps_scale = eps;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.eps_scale) {
            return Err(Error::Config(format!(
                "epsilon scale must lie in [0,1], got {}",
                self.eps_scale
            )));
        }
        for &(lo, hi) in &self.range {
            if !(lo < hi) {
                return Err(Error::Config(format!(
                    "intensity range must satisfy lo < hi, got ({lo}, {hi})"
                )));
            }
        }
        if let ThreatKind::Sparse { k } = self.kind {
            if k == 0 {
                return Err(Error::Config("sparse k must be at least 1".into()));
            }
        }
        Ok(())
    }

    pub fn mid(&self) -> Vec<f32> {
        self.range.iter().map(|&(lo, hi)| 0.5 * (lo + hi)).collect()
    }

    pub fn half(&self) -> Vec<f32> {
        self.range.iter().map(|&(lo, hi)| 0.5 * (hi - lo)).collect()
    }
}

/// Input box induced by a patch at a fixed placement: outside the mask both
/// bounds equal the pixel; inside, bounds interpolate toward the channel's
/// full range by `eps_scale` (1 reproduces the full [lo, hi] patch bound).
pub fn patch_input_interval(
    image: &Tensor,
    placement: &PatchPlacement,
    range: &[(f32, f32)],
    eps_scale: f32,
) -> Result<IntervalTensor> {
    let s = image.shape();
    if s.len() != 3 {
        return Err(Error::Dimension {
            op: "patch_input_interval",
            lhs: s.to_vec(),
            rhs: vec![3],
        });
    }
    let (channels, h, w) = (s[0], s[1], s[2]);
    if range.len() != channels {
        return Err(Error::Config(format!(
            "range has {} channels, image has {}",
            range.len(),
            channels
        )));
    }
    let (mr, mc) = (placement.mask.height, placement.mask.width);
    if placement.anchor.0 + mr > h || placement.anchor.1 + mc > w {
        return Err(Error::Config(format!(
            "placement at {:?} with bbox {}x{} leaves the {}x{} image",
            placement.anchor, mr, mc, h, w
        )));
    }
    let mut lower = image.data().to_vec();
    let mut upper = image.data().to_vec();
    for ch in 0..channels {
        let (lo, hi) = range[ch];
        for &(r, c) in placement.mask.cells() {
            let idx = ch * h * w + (placement.anchor.0 + r) * w + (placement.anchor.1 + c);
            let x = image.data()[idx];
            lower[idx] = (1.0 - eps_scale) * x + eps_scale * lo;
            upper[idx] = (1.0 - eps_scale) * x + eps_scale * hi;
        }
    }
    IntervalTensor::new(
        Tensor::from_vec(s.to_vec(), lower)?,
        Tensor::from_vec(s.to_vec(), upper)?,
    )
}

/// Built-in shape constructor for the supported pixel counts.
///
/// Squares and parallelograms need a perfect-square count; lines take any
/// count; diamonds and rectangles come from a fixed menu for counts 4/16/25.
/// The slanted geometries are frozen here and mirrored by golden files.
pub fn make_shape(kind: ShapeKind, pixel_count: usize) -> Result<ShapeMask> {
    match kind {
        ShapeKind::Square => {
            let side = (pixel_count as f64).sqrt().round() as usize;
            if side * side != pixel_count {
                return Err(Error::Config(format!(
                    "square needs a perfect-square pixel count, got {pixel_count}"
                )));
            }
            ShapeMask::square(side)
        }
        ShapeKind::Line => ShapeMask::rectangle(1, pixel_count),
        ShapeKind::Rectangle => Ok(rectangle_menu(pixel_count)?.remove(0)),
        ShapeKind::Diamond => diamond_cells(pixel_count)
            .ok_or_else(|| {
                Error::Config(format!("no diamond geometry for pixel count {pixel_count}"))
            })
            .and_then(|cells| ShapeMask::from_cells(ShapeKind::Diamond, &cells)),
        ShapeKind::Parallelogram => {
            let side = (pixel_count as f64).sqrt().round() as usize;
            if side * side != pixel_count {
                return Err(Error::Config(format!(
                    "parallelogram needs a perfect-square pixel count, got {pixel_count}"
                )));
            }
            // n x n block sheared one column right per row (45 degrees)
            let cells: Vec<_> = (0..side)
                .flat_map(|r| (0..side).map(move |c| (r, r + c)))
                .collect();
            ShapeMask::from_cells(ShapeKind::Parallelogram, &cells)
        }
        ShapeKind::Custom => Err(Error::Config(
            "custom shapes are loaded from a cell list file".into(),
        )),
    }
}

/// L1-ball ring/fill diamonds with the documented cell sets.
fn diamond_cells(pixel_count: usize) -> Option<Vec<(usize, usize)>> {
    match pixel_count {
        // radius-1 ring: 4 edge midpoints of a 3x3 box
        4 => Some(vec![(0, 1), (1, 0), (1, 2), (2, 1)]),
        // rings 1 and 2 plus the four axis tips of ring 3 (7x7 box)
        16 => {
            let mut cells = Vec::new();
            for ring in [1usize, 2] {
                for (r, c) in ring_cells(3, ring) {
                    cells.push((r, c));
                }
            }
            cells.extend_from_slice(&[(0, 3), (3, 0), (3, 6), (6, 3)]);
            Some(cells)
        }
        // filled radius-3 diamond: |r-3| + |c-3| <= 3
        25 => {
            let mut cells = Vec::new();
            for r in 0..7usize {
                for c in 0..7usize {
                    if r.abs_diff(3) + c.abs_diff(3) <= 3 {
                        cells.push((r, c));
                    }
                }
            }
            Some(cells)
        }
        _ => None,
    }
}

fn ring_cells(center: usize, radius: usize) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    let n = 2 * center + 1;
    for r in 0..n {
        for c in 0..n {
            if r.abs_diff(center) + c.abs_diff(center) == radius {
                out.push((r, c));
            }
        }
    }
    out
}

/// The width/length menu evaluated for rectangle transfer; the worst
/// certified accuracy over the menu is what gets reported.
pub fn rectangle_menu(pixel_count: usize) -> Result<Vec<ShapeMask>> {
    let dims: &[(usize, usize)] = match pixel_count {
        16 => &[(2, 8), (8, 2), (2, 9), (9, 2)],
        25 => &[(2, 13), (13, 2), (3, 9), (9, 3)],
        _ => {
            return Err(Error::Config(format!(
                "no rectangle menu for pixel count {pixel_count} (supported: 16, 25)"
            )))
        }
    };
    dims.iter().map(|&(h, w)| ShapeMask::rectangle(h, w)).collect()
}

/// Parses a plain-text cell list: one `row col` pair per line; `#` comments
/// and blank lines are skipped.
pub fn load_custom_shape(path: &Path) -> Result<ShapeMask> {
    let text = std::fs::read_to_string(path)?;
    parse_custom_shape(&text).map_err(|detail| Error::Format {
        path: path.display().to_string(),
        detail,
        offset: 0,
    })
}

pub fn parse_custom_shape(text: &str) -> std::result::Result<ShapeMask, String> {
    let mut cells = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut parts = line.split_whitespace();
        let (r, c) = (parts.next(), parts.next());
        match (r, c, parts.next()) {
            (Some(r), Some(c), None) => {
                let r: usize = r
                    .parse()
                    .map_err(|_| format!("line {}: bad row '{r}'", lineno + 1))?;
                let c: usize = c
                    .parse()
                    .map_err(|_| format!("line {}: bad col '{c}'", lineno + 1))?;
                cells.push((r, c));
            }
            _ => return Err(format!("line {}: expected 'row col'", lineno + 1)),
        }
    }
    ShapeMask::from_cells(ShapeKind::Custom, &cells).map_err(|e| e.to_string())
}

/// First-layer interval under a sparse-k adversary: per output unit the
/// half-width is the sum of the k largest per-pixel aggregated |W| entries
/// (a perturbed pixel frees all of its channels).
pub fn sparse_first_layer_bounds(
    x: &Tensor,
    w: &Tensor,
    b: &Tensor,
    k: usize,
    channels: usize,
) -> Result<IntervalTensor> {
    let batch = if x.shape().len() == 1 {
        x.reshape(&[1, x.len()])?
    } else {
        x.clone()
    };
    let center = ops::affine(&batch, w, Some(b))?;
    let (half, _) = ops::topk_abs_row_sums(w, k, channels)?;
    let n = center.shape()[0];
    let out = center.shape()[1];
    let mut lower = center.data().to_vec();
    let mut upper = center.data().to_vec();
    for i in 0..n {
        for o in 0..out {
            lower[i * out + o] -= half.data()[o];
            upper[i * out + o] += half.data()[o];
        }
    }
    IntervalTensor::new(
        Tensor::from_vec(vec![n, out], lower)?,
        Tensor::from_vec(vec![n, out], upper)?,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn placement_counts_match_closed_form() {
        let sq2 = ShapeMask::square(2).unwrap();
        assert_eq!(enumerate_placements((28, 28), &sq2).unwrap().len(), 729);
        let sq5 = ShapeMask::square(5).unwrap();
        assert_eq!(enumerate_placements((32, 32), &sq5).unwrap().len(), 784);
        let full = ShapeMask::square(28).unwrap();
        let only = enumerate_placements((28, 28), &full).unwrap();
        assert_eq!(only.len(), 1);
        assert_eq!(only[0].anchor, (0, 0));
        let too_big = ShapeMask::square(29).unwrap();
        assert!(enumerate_placements((28, 28), &too_big).is_err());
    }

    #[test]
    fn placements_stay_in_bounds_for_slanted_shapes() {
        for count in [4, 16, 25] {
            for kind in [ShapeKind::Diamond, ShapeKind::Parallelogram] {
                let mask = make_shape(kind, count).unwrap();
                let placements = enumerate_placements((28, 28), &mask).unwrap();
                // brute-force validity scan must agree with the closed form
                let (mh, mw) = mask.bounding_box();
                let mut valid = 0;
                for r in 0..28 {
                    for c in 0..28 {
                        let ok = mask
                            .cells()
                            .iter()
                            .all(|&(dr, dc)| r + dr < 28 && c + dc < 28);
                        if ok {
                            valid += 1;
                        }
                    }
                }
                assert_eq!(placements.len(), valid);
                assert_eq!(placements.len(), (28 - mh + 1) * (28 - mw + 1));
                for p in &placements {
                    for &(dr, dc) in p.mask.cells() {
                        assert!(p.anchor.0 + dr < 28 && p.anchor.1 + dc < 28);
                    }
                }
            }
        }
    }

    #[test]
    fn patch_interval_full_epsilon() {
        let image = Tensor::full(&[1, 4, 4], 0.5);
        let mask = ShapeMask::square(2).unwrap();
        let placement = PatchPlacement {
            mask,
            anchor: (0, 0),
        };
        let z = patch_input_interval(&image, &placement, &[(0.0, 1.0)], 1.0).unwrap();
        let mut in_mask = 0;
        for i in 0..16 {
            let (l, u) = (z.lower().data()[i], z.upper().data()[i]);
            if l == 0.0 && u == 1.0 {
                in_mask += 1;
            } else {
                assert_eq!((l, u), (0.5, 0.5));
            }
        }
        assert_eq!(in_mask, 4);
    }

    #[test]
    fn patch_interval_zero_epsilon_is_the_image() {
        let image = Tensor::from_vec(vec![1, 2, 2], vec![0.1, 0.4, 0.6, 0.9]).unwrap();
        let placement = PatchPlacement {
            mask: ShapeMask::square(2).unwrap(),
            anchor: (0, 0),
        };
        let z = patch_input_interval(&image, &placement, &[(0.0, 1.0)], 0.0).unwrap();
        assert_eq!(z.lower().data(), image.data());
        assert_eq!(z.upper().data(), image.data());
    }

    #[test]
    fn patch_interval_interpolates() {
        let image = Tensor::full(&[1, 2, 2], 0.5);
        let placement = PatchPlacement {
            mask: ShapeMask::square(1).unwrap(),
            anchor: (1, 1),
        };
        let z = patch_input_interval(&image, &placement, &[(0.0, 1.0)], 0.5).unwrap();
        assert_abs_diff_eq!(z.lower().data()[3], 0.25, epsilon = 1e-6);
        assert_abs_diff_eq!(z.upper().data()[3], 0.75, epsilon = 1e-6);
    }

    #[test]
    fn patch_interval_out_of_bounds_is_config_error() {
        let image = Tensor::full(&[1, 4, 4], 0.5);
        let placement = PatchPlacement {
            mask: ShapeMask::square(2).unwrap(),
            anchor: (3, 3),
        };
        assert!(matches!(
            patch_input_interval(&image, &placement, &[(0.0, 1.0)], 1.0),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn full_epsilon_ignores_masked_pixel_values() {
        let mask = ShapeMask::square(2).unwrap();
        let placement = PatchPlacement {
            mask,
            anchor: (1, 1),
        };
        let a = Tensor::full(&[1, 4, 4], 0.3);
        let mut b_data = a.data().to_vec();
        for idx in placement.flat_indices(1, 4, 4) {
            b_data[idx] = 0.9;
        }
        let b = Tensor::from_vec(vec![1, 4, 4], b_data).unwrap();
        let za = patch_input_interval(&a, &placement, &[(0.0, 1.0)], 1.0).unwrap();
        let zb = patch_input_interval(&b, &placement, &[(0.0, 1.0)], 1.0).unwrap();
        for idx in placement.flat_indices(1, 4, 4) {
            assert_eq!(za.lower().data()[idx], zb.lower().data()[idx]);
            assert_eq!(za.upper().data()[idx], zb.upper().data()[idx]);
        }
    }

    #[test]
    fn builtin_shapes() {
        let sq = make_shape(ShapeKind::Square, 4).unwrap();
        assert_eq!(sq.cells(), &[(0, 0), (0, 1), (1, 0), (1, 1)]);
        let line = make_shape(ShapeKind::Line, 4).unwrap();
        assert_eq!(line.cells(), &[(0, 0), (0, 1), (0, 2), (0, 3)]);
        let d4 = make_shape(ShapeKind::Diamond, 4).unwrap();
        assert_eq!(d4.pixel_count(), 4);
        assert!(d4.bounding_box().0 > 2 && d4.bounding_box().1 > 2);
        for count in [16, 25] {
            let d = make_shape(ShapeKind::Diamond, count).unwrap();
            assert_eq!(d.pixel_count(), count);
            // 4-fold symmetry of the frozen diamonds
            let (h, w) = d.bounding_box();
            for &(r, c) in d.cells() {
                assert!(d.cells().contains(&(h - 1 - r, w - 1 - c)));
                assert!(d.cells().contains(&(c, r)));
            }
            let p = make_shape(ShapeKind::Parallelogram, count).unwrap();
            assert_eq!(p.pixel_count(), count);
        }
        assert!(make_shape(ShapeKind::Diamond, 9).is_err());
        assert!(make_shape(ShapeKind::Square, 5).is_err());
    }

    #[test]
    fn rectangle_menu_matches_spec_grid() {
        let m16: Vec<_> = rectangle_menu(16)
            .unwrap()
            .iter()
            .map(|m| m.bounding_box())
            .collect();
        assert_eq!(m16, vec![(2, 8), (8, 2), (2, 9), (9, 2)]);
        let m25: Vec<_> = rectangle_menu(25)
            .unwrap()
            .iter()
            .map(|m| m.bounding_box())
            .collect();
        assert_eq!(m25, vec![(2, 13), (13, 2), (3, 9), (9, 3)]);
        assert!(rectangle_menu(4).is_err());
    }

    #[test]
    fn custom_shape_parsing() {
        let mask = parse_custom_shape("# an L shape\n0 0\n1 0\n2 0\n2 1\n").unwrap();
        assert_eq!(mask.pixel_count(), 4);
        assert_eq!(mask.kind(), ShapeKind::Custom);
        assert!(parse_custom_shape("0\n").is_err());
        assert!(parse_custom_shape("a b\n").is_err());
    }

    #[test]
    fn sparse_bounds_direct_formula() {
        // W row [0.5, 0.2, 0.9], x = ones, b = 0, k = 2:
        // center 1.6, half-width 1.4 -> [0.2, 3.0]
        let w = Tensor::from_vec(vec![1, 3], vec![0.5, 0.2, 0.9]).unwrap();
        let b = Tensor::zeros(&[1]);
        let x = Tensor::from_vec(vec![3], vec![1.0, 1.0, 1.0]).unwrap();
        let z = sparse_first_layer_bounds(&x, &w, &b, 2, 1).unwrap();
        assert_abs_diff_eq!(z.lower().data()[0], 0.2, epsilon = 1e-6);
        assert_abs_diff_eq!(z.upper().data()[0], 3.0, epsilon = 1e-6);
    }

    #[test]
    fn sparse_saturation_matches_unit_radius_box() {
        // k = input size: half-width = sum |W_i|, i.e. the affine rule with
        // radius-one input boxes
        let w = Tensor::from_vec(vec![2, 3], vec![0.5, -0.2, 0.9, 1.0, 0.0, -1.0]).unwrap();
        let b = Tensor::from_vec(vec![2], vec![0.1, -0.3]).unwrap();
        let x = Tensor::from_vec(vec![3], vec![0.2, 0.4, 0.6]).unwrap();
        let z = sparse_first_layer_bounds(&x, &w, &b, 3, 1).unwrap();
        let box_in = IntervalTensor::new(
            x.map(|v| v - 1.0).reshape(&[1, 3]).unwrap(),
            x.map(|v| v + 1.0).reshape(&[1, 3]).unwrap(),
        )
        .unwrap();
        let z_box = crate::interval::propagate_affine(&box_in, &w, &b).unwrap();
        assert!(z.lower().max_abs_diff(z_box.lower()) < 1e-5);
        assert!(z.upper().max_abs_diff(z_box.upper()) < 1e-5);
    }

    #[test]
    fn sparse_half_width_is_monotone_in_k() {
        let w = Tensor::from_vec(
            vec![2, 4],
            vec![0.3, -0.8, 0.1, 0.5, -0.6, 0.2, 0.9, -0.4],
        )
        .unwrap();
        let mut prev = vec![0.0f32; 2];
        for k in 1..=4 {
            let (half, _) = ops::topk_abs_row_sums(&w, k, 1).unwrap();
            for (o, &h) in half.data().iter().enumerate() {
                assert!(h >= prev[o]);
                prev[o] = h;
            }
        }
    }
}
