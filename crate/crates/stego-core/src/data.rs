//! Dataset construction and image I/O.
//!
//! Two kinds of builders live here. The synthetic world generates a
//! complete desk-scale benchmark from scratch: a geometric source domain, a
//! deterministically restyled target domain with controllable unmatchable
//! content (glyphs the source never shows), ground-truth glyph masks, and a
//! paired glyph-free test split. The curation builders operate on
//! user-supplied imagery: ratio-controlled map selection, toponym masks
//! from aligned map variants, and tumor-slice labeling.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3, ArrayView2, ArrayView3};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{
    normalize_image, DatasetManifest, Domain, DomainError, ImageTensor, ManifestEntry, Split,
};
use crate::scalar::Scalar;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Image { path: PathBuf, message: String },
    #[error("expected a 3-channel image, got {0} channels")]
    BadChannels(usize),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("need {need} {category} images, found {have}")]
    InsufficientCategory {
        category: &'static str,
        need: usize,
        have: usize,
    },
    #[error("scene contains a color outside the palette: {0:?}")]
    UnknownColor([u8; 3]),
    #[error(transparent)]
    Manifest(#[from] DomainError),
    #[error("invalid configuration: {0}")]
    BadConfig(String),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io { path: path.to_path_buf(), source }
}

// ---------------------------------------------------------------------------
// Image file I/O. Raw images are `Array3<u8>` in channel-height-width order.
// ---------------------------------------------------------------------------

/// Load an 8-bit image. Grayscale files give 1 channel, everything else is
/// converted to RGB.
pub fn load_raw_image(path: &Path) -> Result<Array3<u8>, DataError> {
    let img = image::open(path).map_err(|e| DataError::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    let arr = match img {
        image::DynamicImage::ImageLuma8(g) => {
            let (w, h) = g.dimensions();
            Array3::from_shape_fn((1, h as usize, w as usize), |(_, i, j)| {
                g.get_pixel(j as u32, i as u32).0[0]
            })
        }
        other => {
            let rgb = other.to_rgb8();
            let (w, h) = rgb.dimensions();
            Array3::from_shape_fn((3, h as usize, w as usize), |(c, i, j)| {
                rgb.get_pixel(j as u32, i as u32).0[c]
            })
        }
    };
    Ok(arr)
}

/// Save an 8-bit image; 1 channel writes grayscale, 3 channels RGB.
pub fn save_raw_image(img: &ArrayView3<u8>, path: &Path) -> Result<(), DataError> {
    let (c, h, w) = img.dim();
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(io_err(path))?;
    }
    let result = match c {
        1 => {
            let buf = image::GrayImage::from_fn(w as u32, h as u32, |x, y| {
                image::Luma([img[[0, y as usize, x as usize]]])
            });
            buf.save(path)
        }
        3 => {
            let buf = image::RgbImage::from_fn(w as u32, h as u32, |x, y| {
                image::Rgb([
                    img[[0, y as usize, x as usize]],
                    img[[1, y as usize, x as usize]],
                    img[[2, y as usize, x as usize]],
                ])
            });
            buf.save(path)
        }
        other => return Err(DataError::BadChannels(other)),
    };
    result.map_err(|e| DataError::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

/// Load an image file straight into a normalized tensor.
pub fn load_image_tensor<S: Scalar>(
    path: &Path,
    domain: Domain,
) -> Result<ImageTensor<S>, DataError> {
    let raw = load_raw_image(path)?;
    Ok(normalize_image(&raw, domain)?)
}

/// Load a grayscale mask file; pixels above 127 are set.
pub fn load_mask(path: &Path) -> Result<Array2<bool>, DataError> {
    let raw = load_raw_image(path)?;
    let (_, h, w) = raw.dim();
    Ok(Array2::from_shape_fn((h, w), |(i, j)| raw[[0, i, j]] > 127))
}

/// Save a boolean mask as an 8-bit grayscale image (0 or 255).
pub fn save_mask(mask: &ArrayView2<bool>, path: &Path) -> Result<(), DataError> {
    let (h, w) = mask.dim();
    let img =
        Array3::from_shape_fn((1, h, w), |(_, i, j)| if mask[[i, j]] { 255 } else { 0 });
    save_raw_image(&img.view(), path)
}

/// Resolve a manifest directory field against the manifest's own location.
pub fn resolve_dir(manifest_dir: &Path, dir: &Path) -> PathBuf {
    if dir.is_absolute() {
        dir.to_path_buf()
    } else {
        manifest_dir.join(dir)
    }
}

/// Load the unpaired training sets named by a manifest as normalized
/// tensors. All images of a domain must share one shape.
pub fn load_training_sets<S: Scalar>(
    manifest: &DatasetManifest,
    manifest_dir: &Path,
) -> Result<(Vec<Array3<S>>, Vec<Array3<S>>), DataError> {
    let src_dir = resolve_dir(manifest_dir, &manifest.source_dir);
    let tgt_dir = resolve_dir(manifest_dir, &manifest.target_dir);
    let load_set = |dir: &Path, ids: Vec<&str>, domain: Domain| {
        let mut out = Vec::with_capacity(ids.len());
        for id in ids {
            let t = load_image_tensor::<S>(&dir.join(id), domain)?;
            if let Some(first) = out.first() {
                let f: &Array3<S> = first;
                if f.dim() != t.data.dim() {
                    return Err(DataError::ShapeMismatch(format!(
                        "{id} has shape {:?}, expected {:?}",
                        t.data.dim(),
                        f.dim()
                    )));
                }
            }
            out.push(t.data);
        }
        Ok(out)
    };
    let x = load_set(&src_dir, manifest.source_ids(), Domain::X)?;
    let y = load_set(&tgt_dir, manifest.target_ids(), Domain::Y)?;
    Ok((x, y))
}

/// Sorted list of image files (by file name) directly inside a directory.
pub fn list_images(dir: &Path) -> Result<Vec<PathBuf>, DataError> {
    let mut files = Vec::new();
    for entry in fs::read_dir(dir).map_err(io_err(dir))? {
        let entry = entry.map_err(io_err(dir))?;
        let path = entry.path();
        let ext = path
            .extension()
            .and_then(|e| e.to_str())
            .map(|e| e.to_ascii_lowercase());
        if matches!(ext.as_deref(), Some("png" | "jpg" | "jpeg" | "bmp")) {
            files.push(path);
        }
    }
    files.sort();
    Ok(files)
}

// ---------------------------------------------------------------------------
// Synthetic world.
// ---------------------------------------------------------------------------

/// Configuration for the synthetic benchmark builder.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticWorldConfig {
    /// Square image side in pixels; must be a multiple of 4.
    pub resolution: usize,
    /// Training images generated for each domain.
    pub n_train_per_domain: usize,
    /// Aligned source/target pairs in the test split (always glyph-free).
    pub n_test_pairs: usize,
    /// Fraction of target training images that carry glyphs.
    pub unmatchable_ratio: f64,
    /// Glyphs stamped on each glyph-bearing image.
    pub glyph_density: usize,
    pub seed: u64,
}

impl Default for SyntheticWorldConfig {
    fn default() -> Self {
        Self {
            resolution: 64,
            n_train_per_domain: 300,
            n_test_pairs: 50,
            unmatchable_ratio: 0.4,
            glyph_density: 3,
            seed: 7,
        }
    }
}

impl SyntheticWorldConfig {
    pub fn validate(&self) -> Result<(), DataError> {
        if !(0.0..=1.0).contains(&self.unmatchable_ratio) {
            return Err(DataError::BadConfig(format!(
                "unmatchable_ratio {} outside [0, 1]",
                self.unmatchable_ratio
            )));
        }
        if self.resolution < 24 || self.resolution % 4 != 0 {
            return Err(DataError::BadConfig(format!(
                "resolution {} must be a multiple of 4 and at least 24",
                self.resolution
            )));
        }
        if self.n_train_per_domain == 0 || self.n_test_pairs == 0 {
            return Err(DataError::BadConfig("image counts must be positive".into()));
        }
        Ok(())
    }
}

/// The fixed color vocabulary of both domains, plus the glyph color. The
/// target style is a per-pixel bijection of the source palette with
/// class-specific outline colors; outlines replace boundary pixels of a
/// shape, so mapping an outline color back to its fill color makes the
/// restyle exactly invertible.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Palette {
    pub x_bg: [[u8; 3]; 2],
    pub y_bg: [[u8; 3]; 2],
    pub x_circle: [u8; 3],
    pub y_circle: [u8; 3],
    pub y_circle_outline: [u8; 3],
    pub x_rect: [u8; 3],
    pub y_rect: [u8; 3],
    pub y_rect_outline: [u8; 3],
    pub glyph: [u8; 3],
}

impl Default for Palette {
    fn default() -> Self {
        Self {
            x_bg: [[64, 64, 64], [96, 96, 96]],
            y_bg: [[30, 30, 90], [50, 50, 130]],
            x_circle: [200, 50, 50],
            y_circle: [230, 210, 40],
            y_circle_outline: [140, 70, 20],
            x_rect: [60, 180, 60],
            y_rect: [40, 200, 200],
            y_rect_outline: [120, 20, 140],
            glyph: GLYPH_COLOR,
        }
    }
}

/// Glyph color stamped on unmatchable target images.
pub const GLYPH_COLOR: [u8; 3] = [250, 40, 220];

fn pixel(img: &Array3<u8>, i: usize, j: usize) -> [u8; 3] {
    [img[[0, i, j]], img[[1, i, j]], img[[2, i, j]]]
}

fn put_pixel(img: &mut Array3<u8>, i: usize, j: usize, c: [u8; 3]) {
    img[[0, i, j]] = c[0];
    img[[1, i, j]] = c[1];
    img[[2, i, j]] = c[2];
}

/// Smooth two-shade texture: coarse value noise, thresholded at zero.
fn texture_field(res: usize, rng: &mut ChaCha20Rng) -> Array2<bool> {
    const CELL: usize = 8;
    let nodes = res / CELL + 2;
    let grid = Array2::from_shape_fn((nodes, nodes), |_| rng.gen_range(-1.0f64..1.0));
    Array2::from_shape_fn((res, res), |(i, j)| {
        let (gi, gj) = (i / CELL, j / CELL);
        let (u, v) = (
            (i % CELL) as f64 / CELL as f64,
            (j % CELL) as f64 / CELL as f64,
        );
        let a = grid[[gi, gj]] * (1.0 - u) + grid[[gi + 1, gj]] * u;
        let b = grid[[gi, gj + 1]] * (1.0 - u) + grid[[gi + 1, gj + 1]] * u;
        a * (1.0 - v) + b * v > 0.0
    })
}

/// Draw one source-style scene: textured background plus 2 to 4 filled
/// shapes.
fn draw_scene(res: usize, rng: &mut ChaCha20Rng, p: &Palette) -> Array3<u8> {
    let tex = texture_field(res, rng);
    let mut img = Array3::zeros((3, res, res));
    for i in 0..res {
        for j in 0..res {
            put_pixel(&mut img, i, j, if tex[[i, j]] { p.x_bg[0] } else { p.x_bg[1] });
        }
    }
    let n_shapes = rng.gen_range(2..=4usize);
    let r = res as i64;
    for _ in 0..n_shapes {
        if rng.gen_bool(0.5) {
            let cy = rng.gen_range(0..r);
            let cx = rng.gen_range(0..r);
            let rad = rng.gen_range((r / 10).max(3)..=(r / 5).max(4));
            for i in (cy - rad).max(0)..(cy + rad + 1).min(r) {
                for j in (cx - rad).max(0)..(cx + rad + 1).min(r) {
                    if (i - cy) * (i - cy) + (j - cx) * (j - cx) <= rad * rad {
                        put_pixel(&mut img, i as usize, j as usize, p.x_circle);
                    }
                }
            }
        } else {
            let h = rng.gen_range((r / 8).max(4)..=(r / 3).max(5));
            let w = rng.gen_range((r / 8).max(4)..=(r / 3).max(5));
            let i0 = rng.gen_range(-h / 2..r - h / 2);
            let j0 = rng.gen_range(-w / 2..r - w / 2);
            for i in i0.max(0)..(i0 + h).min(r) {
                for j in j0.max(0)..(j0 + w).min(r) {
                    put_pixel(&mut img, i as usize, j as usize, p.x_rect);
                }
            }
        }
    }
    img
}

/// Deterministic restyle: remap every palette color, then replace shape
/// boundary pixels with the class's outline color. A shape pixel is a
/// boundary pixel when any 4-neighbor (or the image border) differs from
/// its fill color.
pub fn restyle_scene(x_img: &Array3<u8>, p: &Palette) -> Result<Array3<u8>, DataError> {
    let (c, h, w) = x_img.dim();
    if c != 3 {
        return Err(DataError::BadChannels(c));
    }
    let mut out = Array3::zeros((3, h, w));
    for i in 0..h {
        for j in 0..w {
            let px = pixel(x_img, i, j);
            let (fill_color, outline_color) = if px == p.x_circle {
                (p.y_circle, p.y_circle_outline)
            } else if px == p.x_rect {
                (p.y_rect, p.y_rect_outline)
            } else if px == p.x_bg[0] {
                put_pixel(&mut out, i, j, p.y_bg[0]);
                continue;
            } else if px == p.x_bg[1] {
                put_pixel(&mut out, i, j, p.y_bg[1]);
                continue;
            } else {
                return Err(DataError::UnknownColor(px));
            };
            let mut boundary = i == 0 || j == 0 || i == h - 1 || j == w - 1;
            if !boundary {
                for (ni, nj) in [(i - 1, j), (i + 1, j), (i, j - 1), (i, j + 1)] {
                    if pixel(x_img, ni, nj) != px {
                        boundary = true;
                        break;
                    }
                }
            }
            put_pixel(&mut out, i, j, if boundary { outline_color } else { fill_color });
        }
    }
    Ok(out)
}

/// Per-pixel inverse of [`restyle_scene`]: outline colors map back to their
/// fill, background and fill colors to their source counterparts. Pixels
/// with colors outside the target palette (glyphs) are left unchanged.
pub fn invert_restyle(y_img: &Array3<u8>, p: &Palette) -> Result<Array3<u8>, DataError> {
    let (c, h, w) = y_img.dim();
    if c != 3 {
        return Err(DataError::BadChannels(c));
    }
    let mut out = y_img.clone();
    for i in 0..h {
        for j in 0..w {
            let px = pixel(y_img, i, j);
            let mapped = if px == p.y_bg[0] {
                p.x_bg[0]
            } else if px == p.y_bg[1] {
                p.x_bg[1]
            } else if px == p.y_circle || px == p.y_circle_outline {
                p.x_circle
            } else if px == p.y_rect || px == p.y_rect_outline {
                p.x_rect
            } else {
                continue;
            };
            put_pixel(&mut out, i, j, mapped);
        }
    }
    Ok(out)
}

/// Stamp plus-shaped glyphs (7 pixels tall and wide, 1 pixel thick) at
/// uniform positions, recording every written pixel in the mask.
fn stamp_glyphs(
    img: &mut Array3<u8>,
    mask: &mut Array2<bool>,
    count: usize,
    color: [u8; 3],
    rng: &mut ChaCha20Rng,
) {
    let res = img.dim().1;
    const ARM: usize = 3;
    for _ in 0..count {
        let cy = rng.gen_range(ARM..res - ARM);
        let cx = rng.gen_range(ARM..res - ARM);
        for d in 0..=2 * ARM {
            for (i, j) in [(cy - ARM + d, cx), (cy, cx - ARM + d)] {
                put_pixel(img, i, j, color);
                mask[[i, j]] = true;
            }
        }
    }
}

/// Everything the synthetic builder produced, including in-memory records
/// that let callers verify the construction (the pre-glyph source scenes of
/// every target image, and the palette).
pub struct SyntheticOutput {
    pub train_manifest: DatasetManifest,
    pub test_manifest: DatasetManifest,
    pub train_manifest_path: PathBuf,
    pub test_manifest_path: PathBuf,
    pub palette: Palette,
    /// Source-style scenes that generated each target training image,
    /// before restyling and glyph stamping; index-aligned with the target
    /// entries.
    pub train_y_scenes: Vec<Array3<u8>>,
    /// Number of glyph-bearing target training images.
    pub glyph_image_count: usize,
}

/// Build the synthetic benchmark under `out_dir`:
/// `train_x/`, `train_y/`, `train_y_masks/`, `test_x/`, `test_y/`, and the
/// two manifests `train.manifest` / `test.manifest`.
pub fn build_synthetic(
    cfg: &SyntheticWorldConfig,
    out_dir: &Path,
) -> Result<SyntheticOutput, DataError> {
    cfg.validate()?;
    let palette = Palette::default();
    let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed);
    let n = cfg.n_train_per_domain;
    let res = cfg.resolution;

    // Source training images.
    let mut x_ids = Vec::with_capacity(n);
    for k in 0..n {
        let scene = draw_scene(res, &mut rng, &palette);
        let id = format!("x_{k:04}.png");
        save_raw_image(&scene.view(), &out_dir.join("train_x").join(&id))?;
        x_ids.push(id);
    }

    // Target training images: independent scenes, restyled; a seeded subset
    // carries glyphs.
    let glyph_count = (cfg.unmatchable_ratio * n as f64).round() as usize;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let glyph_set: BTreeSet<usize> = order.into_iter().take(glyph_count).collect();

    let mut y_entries = Vec::with_capacity(n);
    let mut train_y_scenes = Vec::with_capacity(n);
    for k in 0..n {
        let scene = draw_scene(res, &mut rng, &palette);
        let mut styled = restyle_scene(&scene, &palette)?;
        let mut mask = Array2::from_elem((res, res), false);
        if glyph_set.contains(&k) {
            stamp_glyphs(&mut styled, &mut mask, cfg.glyph_density, palette.glyph, &mut rng);
        }
        let id = format!("y_{k:04}.png");
        let mask_rel = format!("train_y_masks/y_{k:04}.png");
        save_raw_image(&styled.view(), &out_dir.join("train_y").join(&id))?;
        save_mask(&mask.view(), &out_dir.join(&mask_rel))?;
        y_entries.push((id, mask_rel));
        train_y_scenes.push(scene);
    }

    // Paired, glyph-free test split.
    let mut test_entries = Vec::with_capacity(cfg.n_test_pairs);
    for k in 0..cfg.n_test_pairs {
        let scene = draw_scene(res, &mut rng, &palette);
        let styled = restyle_scene(&scene, &palette)?;
        let id = format!("t_{k:04}.png");
        save_raw_image(&scene.view(), &out_dir.join("test_x").join(&id))?;
        save_raw_image(&styled.view(), &out_dir.join("test_y").join(&id))?;
        test_entries.push(id);
    }

    let train_manifest = DatasetManifest {
        source_dir: PathBuf::from("train_x"),
        target_dir: PathBuf::from("train_y"),
        split: Split::Train,
        unmatchable_ratio: glyph_count as f64 / n as f64,
        entries: x_ids
            .into_iter()
            .zip(y_entries)
            .map(|(sid, (tid, mask))| ManifestEntry {
                source_id: Some(sid),
                target_id: Some(tid),
                mask_path: Some(mask),
            })
            .collect(),
    };
    let test_manifest = DatasetManifest {
        source_dir: PathBuf::from("test_x"),
        target_dir: PathBuf::from("test_y"),
        split: Split::Test,
        unmatchable_ratio: 0.0,
        entries: test_entries
            .into_iter()
            .map(|id| ManifestEntry {
                source_id: Some(id.clone()),
                target_id: Some(id),
                mask_path: None,
            })
            .collect(),
    };
    let train_manifest_path = out_dir.join("train.manifest");
    let test_manifest_path = out_dir.join("test.manifest");
    train_manifest.save(&train_manifest_path)?;
    test_manifest.save(&test_manifest_path)?;
    Ok(SyntheticOutput {
        train_manifest,
        test_manifest,
        train_manifest_path,
        test_manifest_path,
        palette,
        train_y_scenes,
        glyph_image_count: glyph_count,
    })
}

// ---------------------------------------------------------------------------
// Map curation: highway detection and ratio-controlled selection.
// ---------------------------------------------------------------------------

/// Reference map color of the highway class.
pub const HIGHWAY_COLOR: [u8; 3] = [240, 160, 30];
/// Strict per-channel tolerance for color-rule detectors.
pub const COLOR_TOLERANCE: u8 = 20;

/// Pixels where every channel is strictly within [`COLOR_TOLERANCE`] of the
/// given color.
pub fn detect_color_pixels(
    img: &ArrayView3<u8>,
    color: [u8; 3],
) -> Result<Array2<bool>, DataError> {
    let (c, h, w) = img.dim();
    if c != 3 {
        return Err(DataError::BadChannels(c));
    }
    let tol = COLOR_TOLERANCE as i32;
    Ok(Array2::from_shape_fn((h, w), |(i, j)| {
        (0..3).all(|ch| (img[[ch, i, j]] as i32 - color[ch] as i32).abs() < tol)
    }))
}

/// Highway pixels under the map color rule.
pub fn detect_highway_pixels(img: &ArrayView3<u8>) -> Result<Array2<bool>, DataError> {
    detect_color_pixels(img, HIGHWAY_COLOR)
}

/// Glyph pixels of the synthetic world, under the same color rule.
pub fn detect_glyph_pixels(img: &ArrayView3<u8>) -> Result<Array2<bool>, DataError> {
    detect_color_pixels(img, GLYPH_COLOR)
}

/// Select a target set of exactly `total` images of which `⌊ratio·total⌋`
/// contain highway pixels, sampled without replacement. The source side
/// keeps only images whose same-named target counterpart (if any) is
/// highway-free, so the source never exposes the unmatchable class.
pub fn build_ratio_dataset(
    source_dir: &Path,
    target_dir: &Path,
    ratio: f64,
    total: usize,
    seed: u64,
) -> Result<DatasetManifest, DataError> {
    if !(0.0..=1.0).contains(&ratio) {
        return Err(DataError::BadConfig(format!("ratio {ratio} outside [0, 1]")));
    }
    let mut highway = Vec::new();
    let mut plain = Vec::new();
    let mut highway_names = BTreeSet::new();
    for path in list_images(target_dir)? {
        let img = load_raw_image(&path)?;
        let flagged = detect_highway_pixels(&img.view())?.iter().any(|&b| b);
        let name = path
            .file_name()
            .expect("listed file has a name")
            .to_string_lossy()
            .into_owned();
        if flagged {
            highway_names.insert(name.clone());
            highway.push(name);
        } else {
            plain.push(name);
        }
    }
    let want_highway = (ratio * total as f64).floor() as usize;
    let want_plain = total - want_highway;
    if highway.len() < want_highway {
        return Err(DataError::InsufficientCategory {
            category: "highway-bearing",
            need: want_highway,
            have: highway.len(),
        });
    }
    if plain.len() < want_plain {
        return Err(DataError::InsufficientCategory {
            category: "highway-free",
            need: want_plain,
            have: plain.len(),
        });
    }
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    highway.shuffle(&mut rng);
    plain.shuffle(&mut rng);
    let mut targets: Vec<String> = highway
        .into_iter()
        .take(want_highway)
        .chain(plain.into_iter().take(want_plain))
        .collect();
    targets.sort();

    let mut sources = Vec::new();
    for path in list_images(source_dir)? {
        let name = path
            .file_name()
            .expect("listed file has a name")
            .to_string_lossy()
            .into_owned();
        if !highway_names.contains(&name) {
            sources.push(name);
        }
    }
    sources.sort();

    let rows = sources.len().max(targets.len());
    let entries = (0..rows)
        .map(|i| ManifestEntry {
            source_id: sources.get(i).cloned(),
            target_id: targets.get(i).cloned(),
            mask_path: None,
        })
        .collect();
    let manifest = DatasetManifest {
        source_dir: source_dir.to_path_buf(),
        target_dir: target_dir.to_path_buf(),
        split: Split::Train,
        unmatchable_ratio: want_highway as f64 / total as f64,
        entries,
    };
    manifest.validate()?;
    Ok(manifest)
}

// ---------------------------------------------------------------------------
// Toponym masks and tumor-slice labels.
// ---------------------------------------------------------------------------

/// Binary any-channel difference of two aligned images, dilated by a
/// Euclidean disc of radius 4.
pub fn derive_toponym_mask(
    with_text: &ArrayView3<u8>,
    without_text: &ArrayView3<u8>,
) -> Result<Array2<bool>, DataError> {
    if with_text.dim() != without_text.dim() {
        return Err(DataError::ShapeMismatch(format!(
            "{:?} vs {:?}",
            with_text.dim(),
            without_text.dim()
        )));
    }
    let (c, h, w) = with_text.dim();
    let diff = Array2::from_shape_fn((h, w), |(i, j)| {
        (0..c).any(|ch| with_text[[ch, i, j]] != without_text[[ch, i, j]])
    });
    const RADIUS: i64 = 4;
    let mut offsets = Vec::new();
    for di in -RADIUS..=RADIUS {
        for dj in -RADIUS..=RADIUS {
            if di * di + dj * dj <= RADIUS * RADIUS {
                offsets.push((di, dj));
            }
        }
    }
    let mut out = Array2::from_elem((h, w), false);
    for i in 0..h as i64 {
        for j in 0..w as i64 {
            if diff[[i as usize, j as usize]] {
                for &(di, dj) in &offsets {
                    let (ni, nj) = (i + di, j + dj);
                    if ni >= 0 && nj >= 0 && ni < h as i64 && nj < w as i64 {
                        out[[ni as usize, nj as usize]] = true;
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Classification of an MRI slice by its tumor-pixel fraction.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SliceLabel {
    /// More than 1% tumor pixels.
    Tumorous,
    /// No tumor pixels at all.
    Healthy,
    /// In between; dropped from both categories.
    Excluded,
}

impl std::fmt::Display for SliceLabel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            SliceLabel::Tumorous => "tumorous",
            SliceLabel::Healthy => "healthy",
            SliceLabel::Excluded => "excluded",
        })
    }
}

/// Label a slice from its binary tumor mask.
pub fn label_mri_slice(tumor_mask: &ArrayView2<bool>) -> SliceLabel {
    let total = tumor_mask.len();
    let tumor = tumor_mask.iter().filter(|&&b| b).count();
    if tumor == 0 {
        SliceLabel::Healthy
    } else if tumor as f64 > 0.01 * total as f64 {
        SliceLabel::Tumorous
    } else {
        SliceLabel::Excluded
    }
}
