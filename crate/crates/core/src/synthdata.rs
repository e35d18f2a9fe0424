//! Synthetic fruit-field scenes and the on-disk dataset format.
//!
//! Each scene is a 64×64 RGB raster holding 1–6 disks ("fruit") on a noisy
//! gray background. Every disk carries a hidden continuous maturity
//! `y_true ~ U(0, 1)` that sets its color, a discrete stage derived from
//! equal thirds of `y_true`, and the training target mapped from the stage.
//!
//! Generation, per scene `i` with per-scene stream `substream(seed, i·2¹⁶ + retry)`:
//!
//! * object count `uniform{1..6}`;
//! * per object: radius `U[4, 10]` px, center `U[r/2, 64 − r/2]²`, resampled
//!   until every earlier center is at least `0.6·(r₁ + r₂)` away; an object
//!   needing more than 1 000 draws restarts the scene with `retry + 1`;
//!   then `y_true ~ U(0, 1)`, and a per-channel color jitter `U[−0.03, 0.03]`;
//! * background: every channel of every pixel `0.45 + U[−0.05, 0.05]`;
//! * disks painted in order (later disks occlude earlier ones) over pixels
//!   whose center lies within the radius, color
//!   `(1 − y)·(0.2, 0.7, 0.2) + y·(0.85, 0.15, 0.1) + jitter`;
//! * every channel is clamped to `[0, 1]` and quantized to `k/255`;
//! * box: the disk's bounding square clipped to the image, normalized by 64.
//!
//! Directory layout:
//!
//! ```text
//! images/NNNNNN.ppm   binary P6, 8-bit, one per scene (zero-padded index)
//! annotations.txt     "image_index cx cy w h stage" per object
//! truths.txt          "image_index y_true" per object, same order
//! ```
//!
//! Reals are written with 9 significant digits.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use crate::betax::Maturity;
use crate::error::{Error, Result};
use crate::geometry::BoxCXCYWH;
use crate::rng::RngState;

pub const IMAGE_SIZE: usize = 64;
pub const MAX_OBJECTS: usize = 6;
pub const RADIUS_RANGE: (f64, f64) = (4.0, 10.0);
pub const MIN_CENTER_SEPARATION: f64 = 0.6;
pub const MAX_PLACEMENT_ATTEMPTS: usize = 1000;
pub const UNRIPE_COLOR: [f64; 3] = [0.2, 0.7, 0.2];
pub const RIPE_COLOR: [f64; 3] = [0.85, 0.15, 0.1];
pub const COLOR_JITTER: f64 = 0.03;
pub const BACKGROUND: f64 = 0.45;
pub const BACKGROUND_NOISE: f64 = 0.05;

/// Square RGB raster, row-major, channels interleaved, values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    size: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn new(size: usize, data: Vec<f64>) -> Result<Self> {
        if size == 0 || data.len() != size * size * 3 {
            return Err(Error::Input(format!("{size}x{size}x3 image needs {} values, got {}", size * size * 3, data.len())));
        }
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Domain(format!("pixel value {v} outside [0, 1]")));
        }
        Ok(Image { size, data })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn pixel(&self, x: usize, y: usize) -> [f64; 3] {
        let i = (y * self.size + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GroundTruthObject {
    pub bbox: BoxCXCYWH,
    /// 0 unripe, 1 half-ripe, 2 ripe.
    pub stage: u8,
    pub y_target: Maturity,
    /// Generative maturity; only for evaluation, absent when not on disk.
    pub y_true: Option<Maturity>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub image: Image,
    pub objects: Vec<GroundTruthObject>,
}

/// Stage of a continuous maturity under equal-thirds thresholds.
pub fn stage_of(y_true: f64) -> u8 {
    if y_true < 1.0 / 3.0 {
        0
    } else if y_true < 2.0 / 3.0 {
        1
    } else {
        2
    }
}

/// Midpoint of each stage's third: 1/6, 1/2, 5/6.
pub fn stage_to_target(stage: u8) -> Result<Maturity> {
    match stage {
        0 => Maturity::new(1.0 / 6.0),
        1 => Maturity::new(0.5),
        2 => Maturity::new(5.0 / 6.0),
        s => Err(Error::Domain(format!("maturity stage {s} not in {{0, 1, 2}}"))),
    }
}

impl GroundTruthObject {
    /// An object labelled from its hidden maturity.
    pub fn from_truth(bbox: BoxCXCYWH, y_true: Maturity) -> Self {
        let stage = stage_of(y_true.value());
        GroundTruthObject {
            bbox,
            stage,
            y_target: stage_to_target(stage).expect("stage_of yields 0..=2"),
            y_true: Some(y_true),
        }
    }

    pub fn from_stage(bbox: BoxCXCYWH, stage: u8) -> Result<Self> {
        Ok(GroundTruthObject { bbox, stage, y_target: stage_to_target(stage)?, y_true: None })
    }
}

struct Disk {
    cx: f64,
    cy: f64,
    r: f64,
    y_true: f64,
    color: [f64; 3],
}

fn quantize(v: f64) -> f64 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

fn try_generate_scene(rng: &mut RngState) -> Option<Scene> {
    let s = IMAGE_SIZE as f64;
    let count = rng.int_range(1, MAX_OBJECTS);
    let mut disks: Vec<Disk> = Vec::with_capacity(count);
    for _ in 0..count {
        let r = rng.uniform_range(RADIUS_RANGE.0, RADIUS_RANGE.1);
        let mut placed = None;
        for _ in 0..MAX_PLACEMENT_ATTEMPTS {
            let cx = rng.uniform_range(0.5 * r, s - 0.5 * r);
            let cy = rng.uniform_range(0.5 * r, s - 0.5 * r);
            let clear = disks
                .iter()
                .all(|d| ((d.cx - cx).powi(2) + (d.cy - cy).powi(2)).sqrt() >= MIN_CENTER_SEPARATION * (d.r + r));
            if clear {
                placed = Some((cx, cy));
                break;
            }
        }
        let (cx, cy) = placed?;
        let y_true = rng.uniform();
        let mut color = [0.0; 3];
        for (ch, c) in color.iter_mut().enumerate() {
            *c = (1.0 - y_true) * UNRIPE_COLOR[ch] + y_true * RIPE_COLOR[ch]
                + rng.uniform_range(-COLOR_JITTER, COLOR_JITTER);
        }
        disks.push(Disk { cx, cy, r, y_true, color });
    }

    let mut data = Vec::with_capacity(IMAGE_SIZE * IMAGE_SIZE * 3);
    for _ in 0..IMAGE_SIZE * IMAGE_SIZE * 3 {
        data.push(BACKGROUND + rng.uniform_range(-BACKGROUND_NOISE, BACKGROUND_NOISE));
    }
    for d in &disks {
        let x_lo = (d.cx - d.r).floor().max(0.0) as usize;
        let x_hi = ((d.cx + d.r).ceil() as usize).min(IMAGE_SIZE);
        let y_lo = (d.cy - d.r).floor().max(0.0) as usize;
        let y_hi = ((d.cy + d.r).ceil() as usize).min(IMAGE_SIZE);
        for py in y_lo..y_hi {
            for px in x_lo..x_hi {
                let (dx, dy) = (px as f64 + 0.5 - d.cx, py as f64 + 0.5 - d.cy);
                if dx * dx + dy * dy <= d.r * d.r {
                    let i = (py * IMAGE_SIZE + px) * 3;
                    data[i..i + 3].copy_from_slice(&d.color);
                }
            }
        }
    }
    data.iter_mut().for_each(|v| *v = quantize(*v));

    let objects = disks
        .iter()
        .map(|d| {
            let x0 = (d.cx - d.r).max(0.0);
            let x1 = (d.cx + d.r).min(s);
            let y0 = (d.cy - d.r).max(0.0);
            let y1 = (d.cy + d.r).min(s);
            let bbox = BoxCXCYWH::new(0.5 * (x0 + x1) / s, 0.5 * (y0 + y1) / s, (x1 - x0) / s, (y1 - y0) / s)
                .expect("clipped disk boxes have positive extent");
            GroundTruthObject::from_truth(bbox, Maturity::new(d.y_true).expect("uniform draw in (0, 1)"))
        })
        .collect();
    Some(Scene { image: Image { size: IMAGE_SIZE, data }, objects })
}

/// Deterministic scene `index` of the stream `seed`.
pub fn generate_scene(seed: u64, index: usize) -> Scene {
    for retry in 0u64.. {
        let mut rng = RngState::substream(seed, ((index as u64) << 16) | retry);
        if let Some(scene) = try_generate_scene(&mut rng) {
            return scene;
        }
    }
    unreachable!("retry counter is unbounded")
}

pub fn generate(seed: u64, n_scenes: usize) -> Result<Vec<Scene>> {
    if n_scenes == 0 {
        return Err(Error::Domain("scene count must be at least 1".into()));
    }
    Ok((0..n_scenes).map(|i| generate_scene(seed, i)).collect())
}

/// Formats with 9 significant digits in positional notation.
pub fn fmt_sig9(x: f64) -> String {
    if x == 0.0 || !x.is_finite() {
        return format!("{x}");
    }
    let magnitude = x.abs().log10().floor() as i32;
    let decimals = (8 - magnitude).max(0) as usize;
    let s = format!("{x:.decimals$}");
    // `{:.N}` can round up into the next decade (e.g. 9.9999999995 → "10.00000000").
    let digits = s.chars().filter(char::is_ascii_digit).collect::<String>();
    let significant = digits.trim_start_matches('0').len();
    if significant > 9 && decimals > 0 {
        let decimals = decimals - 1;
        format!("{x:.decimals$}")
    } else {
        s
    }
}

pub fn write_ppm(path: &Path, image: &Image) -> Result<()> {
    let mut bytes = format!("P6\n{} {}\n255\n", image.size, image.size).into_bytes();
    bytes.extend(image.data.iter().map(|v| (v * 255.0).round().clamp(0.0, 255.0) as u8));
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_ppm(path: &Path) -> Result<Image> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |msg: &str| Error::Parse { file: path.display().to_string(), line: 1, msg: msg.to_string() };
    // Header: magic, width, height, maxval separated by whitespace, then one
    // whitespace byte before the raster.
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated PPM header"));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    pos += 1;
    if fields[0] != "P6" {
        return Err(bad("expected binary P6 magic"));
    }
    let dims: Vec<usize> =
        fields[1..].iter().map(|f| f.parse().map_err(|_| bad("non-numeric PPM header"))).collect::<Result<_>>()?;
    if dims[0] != dims[1] || dims[2] != 255 {
        return Err(bad("expected a square 8-bit PPM"));
    }
    let n = dims[0] * dims[1] * 3;
    let raster = bytes.get(pos..pos + n).ok_or_else(|| bad("truncated PPM raster"))?;
    if bytes.len() != pos + n {
        return Err(bad("trailing bytes after PPM raster"));
    }
    Image::new(dims[0], raster.iter().map(|&b| b as f64 / 255.0).collect())
}

pub fn image_file_name(index: usize) -> String {
    format!("{index:06}.ppm")
}

pub fn write_dataset(scenes: &[Scene], dir: &Path) -> Result<()> {
    let images = dir.join("images");
    fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
    let mut annotations = String::new();
    let mut truths = String::new();
    for (i, scene) in scenes.iter().enumerate() {
        write_ppm(&images.join(image_file_name(i)), &scene.image)?;
        for o in &scene.objects {
            let b = o.bbox;
            annotations.push_str(&format!(
                "{i} {} {} {} {} {}\n",
                fmt_sig9(b.cx),
                fmt_sig9(b.cy),
                fmt_sig9(b.w),
                fmt_sig9(b.h),
                o.stage
            ));
            if let Some(y) = o.y_true {
                truths.push_str(&format!("{i} {}\n", fmt_sig9(y.value())));
            }
        }
    }
    write_text(&dir.join("annotations.txt"), &annotations)?;
    if scenes.iter().flat_map(|s| &s.objects).any(|o| o.y_true.is_some()) {
        write_text(&dir.join("truths.txt"), &truths)?;
    }
    Ok(())
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
}

/// Parses one annotation line: `image_index cx cy w h stage`.
pub fn parse_annotation_line(line: &str) -> std::result::Result<(usize, GroundTruthObject), String> {
    let fields: Vec<&str> = line.split_whitespace().collect();
    if fields.len() != 6 {
        return Err(format!("expected 6 fields, found {}", fields.len()));
    }
    let index: usize = fields[0].parse().map_err(|_| format!("bad image index `{}`", fields[0]))?;
    let mut v = [0.0; 4];
    for (k, f) in fields[1..5].iter().enumerate() {
        v[k] = f.parse().map_err(|_| format!("bad number `{f}`"))?;
    }
    let stage: u8 = fields[5].parse().map_err(|_| format!("bad stage `{}`", fields[5]))?;
    let bbox = BoxCXCYWH::new(v[0], v[1], v[2], v[3]).map_err(|e| e.to_string())?;
    let obj = GroundTruthObject::from_stage(bbox, stage).map_err(|e| e.to_string())?;
    Ok((index, obj))
}

pub fn read_dataset(dir: &Path) -> Result<Vec<Scene>> {
    let images_dir = dir.join("images");
    let mut names: Vec<String> = fs::read_dir(&images_dir)
        .map_err(|e| Error::io(&images_dir, e))?
        .filter_map(|e| e.ok())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .filter(|n| n.ends_with(".ppm"))
        .collect();
    names.sort();
    if names.is_empty() {
        return Err(Error::Input(format!("no images in {}", images_dir.display())));
    }
    for (i, n) in names.iter().enumerate() {
        if *n != image_file_name(i) {
            return Err(Error::Input(format!("expected {} in {}, found {n}", image_file_name(i), images_dir.display())));
        }
    }
    let mut objects: Vec<Vec<GroundTruthObject>> = vec![Vec::new(); names.len()];
    let ann_path = dir.join("annotations.txt");
    let ann = fs::read_to_string(&ann_path).map_err(|e| Error::io(&ann_path, e))?;
    let parse_err = |path: &Path, line: usize, msg: String| Error::Parse { file: path.display().to_string(), line, msg };
    let mut order = Vec::new();
    for (ln, line) in ann.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let (idx, obj) = parse_annotation_line(line).map_err(|m| parse_err(&ann_path, ln + 1, m))?;
        let slot = objects
            .get_mut(idx)
            .ok_or_else(|| parse_err(&ann_path, ln + 1, format!("image index {idx} has no image file")))?;
        slot.push(obj);
        order.push((idx, slot.len() - 1));
    }
    if let Some(i) = objects.iter().position(Vec::is_empty) {
        return Err(Error::Input(format!("image {i} has no annotated objects")));
    }

    let truth_path = dir.join("truths.txt");
    if truth_path.exists() {
        let text = fs::read_to_string(&truth_path).map_err(|e| Error::io(&truth_path, e))?;
        let mut k = 0;
        for (ln, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split_whitespace().collect();
            let parsed = match fields.as_slice() {
                [i, y] => i.parse::<usize>().ok().zip(y.parse::<f64>().ok()),
                _ => None,
            };
            let (idx, y) = parsed.ok_or_else(|| parse_err(&truth_path, ln + 1, format!("malformed truth line `{line}`")))?;
            let &(want_idx, slot) = order
                .get(k)
                .ok_or_else(|| parse_err(&truth_path, ln + 1, "more truths than annotations".into()))?;
            if idx != want_idx {
                return Err(parse_err(&truth_path, ln + 1, format!("image index {idx}, annotations say {want_idx}")));
            }
            let y = Maturity::new(y).map_err(|e| parse_err(&truth_path, ln + 1, e.to_string()))?;
            objects[idx][slot].y_true = Some(y);
            k += 1;
        }
        if k != order.len() {
            return Err(Error::Input(format!("{} truths for {} annotations", k, order.len())));
        }
    }

    names
        .iter()
        .zip(objects)
        .map(|(name, objects)| Ok(Scene { image: read_ppm(&images_dir.join(name))?, objects }))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stage_targets() {
        assert_eq!(stage_to_target(1).unwrap().value(), 0.5);
        assert!((stage_to_target(0).unwrap().value() - 1.0 / 6.0).abs() < 1e-16);
        assert!((stage_to_target(2).unwrap().value() - 5.0 / 6.0).abs() < 1e-16);
        assert!(stage_to_target(3).is_err());
    }

    #[test]
    fn stage_thresholds() {
        assert_eq!(stage_of(0.0), 0);
        assert_eq!(stage_of(0.333), 0);
        assert_eq!(stage_of(1.0 / 3.0), 1);
        assert_eq!(stage_of(0.6666), 1);
        assert_eq!(stage_of(2.0 / 3.0), 2);
        assert_eq!(stage_of(1.0), 2);
    }

    #[test]
    fn sig9_formatting() {
        assert_eq!(fmt_sig9(0.5), "0.500000000");
        assert_eq!(fmt_sig9(0.123456789123), "0.123456789");
        assert_eq!(fmt_sig9(0.0123456789123), "0.0123456789");
        assert_eq!(fmt_sig9(1.0), "1.00000000");
        assert_eq!(fmt_sig9(0.99999999999), "1.00000000");
        assert_eq!(fmt_sig9(0.0), "0");
    }

    #[test]
    fn annotation_fixture_line() {
        let (idx, obj) = parse_annotation_line("3 0.25 0.5 0.125 0.0625 2").unwrap();
        assert_eq!(idx, 3);
        assert_eq!(obj.bbox.as_array(), [0.25, 0.5, 0.125, 0.0625]);
        assert_eq!(obj.stage, 2);
        assert_eq!(obj.y_target.value(), 5.0 / 6.0);
        assert_eq!(obj.y_true, None);
        assert!(parse_annotation_line("3 0.25 0.5 0.125 2").is_err());
        assert!(parse_annotation_line("3 0.25 0.5 0.125 0.1 7").is_err());
        assert!(parse_annotation_line("x 0.25 0.5 0.125 0.1 1").is_err());
        assert!(parse_annotation_line("0 0.25 0.5 0 0.1 1").is_err());
    }

    #[test]
    fn scenes_satisfy_invariants() {
        for scene in generate(3, 50).unwrap() {
            assert!((1..=MAX_OBJECTS).contains(&scene.objects.len()));
            assert_eq!(scene.image.size(), IMAGE_SIZE);
            for o in &scene.objects {
                let b = o.bbox.to_xyxy();
                let (x0, x1) = (b.x0.max(0.0), b.x1.min(1.0));
                let (y0, y1) = (b.y0.max(0.0), b.y1.min(1.0));
                assert!(x1 > x0 && y1 > y0);
                let y = o.y_true.unwrap().value();
                assert_eq!(o.stage, stage_of(y));
                assert_eq!(o.y_target, stage_to_target(o.stage).unwrap());
            }
            for v in scene.image.data() {
                assert_eq!((v * 255.0).round() / 255.0, *v);
            }
        }
    }

    #[test]
    fn zero_scenes_is_error() {
        assert!(generate(1, 0).is_err());
    }
}
