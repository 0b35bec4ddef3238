//! Binary PPM (P6) images and the `root/<class>/*.ppm` directory layout.

use std::fs;
use std::path::{Path, PathBuf};

use crate::data::{Dataset, SampleKind};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct PpmImage {
    pub width: usize,
    pub height: usize,
    /// `3×H×W`, normalized by the file's maxval.
    pub chw: Vec<f32>,
}

fn header_token(bytes: &[u8], pos: &mut usize) -> Option<String> {
    loop {
        while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < bytes.len() && bytes[*pos] == b'#' {
            while *pos < bytes.len() && bytes[*pos] != b'\n' {
                *pos += 1;
            }
            continue;
        }
        break;
    }
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() && bytes[*pos] != b'#' {
        *pos += 1;
    }
    (start < *pos).then(|| String::from_utf8_lossy(&bytes[start..*pos]).into_owned())
}

pub fn parse_ppm(bytes: &[u8]) -> Result<PpmImage> {
    let bad = |msg: String| Error::format("PPM", msg);
    let mut pos = 0;
    let magic = header_token(bytes, &mut pos).ok_or_else(|| bad("empty file".into()))?;
    if magic != "P6" {
        return Err(bad(format!("expected binary P6, found `{magic}`")));
    }
    let mut field = |name: &str| -> Result<usize> {
        let tok = header_token(bytes, &mut pos).ok_or_else(|| bad(format!("missing {name}")))?;
        tok.parse::<usize>()
            .map_err(|_| bad(format!("{name} `{tok}` is not a number")))
    };
    let width = field("width")?;
    let height = field("height")?;
    let maxval = field("maxval")?;
    if width == 0 || height == 0 {
        return Err(bad(format!("zero-sized image {width}x{height}")));
    }
    if maxval == 0 || maxval > 65535 {
        return Err(bad(format!("maxval {maxval} outside 1..=65535")));
    }
    // exactly one whitespace byte separates the header from the raster
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(bad("missing raster".into()));
    }
    pos += 1;
    let bps = if maxval > 255 { 2 } else { 1 };
    let need = width * height * 3 * bps;
    let raster = &bytes[pos..];
    if raster.len() < need {
        return Err(bad(format!("raster has {} bytes, need {need}", raster.len())));
    }
    let sample = |i: usize| -> f32 {
        let v = if bps == 1 {
            raster[i] as usize
        } else {
            (raster[2 * i] as usize) << 8 | raster[2 * i + 1] as usize
        };
        v.min(maxval) as f32 / maxval as f32
    };
    let hw = width * height;
    let mut chw = vec![0.0; 3 * hw];
    for p in 0..hw {
        for c in 0..3 {
            chw[c * hw + p] = sample(p * 3 + c);
        }
    }
    Ok(PpmImage { width, height, chw })
}

/// Encodes `3×H×W` values in `[0, 1]` as an 8-bit P6 file.
pub fn write_ppm(chw: &[f32], height: usize, width: usize) -> Vec<u8> {
    let hw = height * width;
    let mut out = format!("P6\n{width} {height}\n255\n").into_bytes();
    for p in 0..hw {
        for c in 0..3 {
            out.push((chw[c * hw + p].clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    out
}

/// Bilinear resize of a `C×H×W` buffer with half-pixel centers. Same-size
/// input is returned unchanged.
pub fn resize_bilinear(src: &[f32], c: usize, h: usize, w: usize, th: usize, tw: usize) -> Vec<f32> {
    if (h, w) == (th, tw) {
        return src.to_vec();
    }
    let axis = |out: usize, len_in: usize, len_out: usize| -> (usize, usize, f32) {
        let s = ((out as f32 + 0.5) * len_in as f32 / len_out as f32 - 0.5).max(0.0);
        let i0 = (s.floor() as usize).min(len_in - 1);
        let i1 = (i0 + 1).min(len_in - 1);
        (i0, i1, s - i0 as f32)
    };
    let mut out = Vec::with_capacity(c * th * tw);
    for plane in src.chunks_exact(h * w) {
        for oy in 0..th {
            let (y0, y1, fy) = axis(oy, h, th);
            for ox in 0..tw {
                let (x0, x1, fx) = axis(ox, w, tw);
                let top = plane[y0 * w + x0] + (plane[y0 * w + x1] - plane[y0 * w + x0]) * fx;
                let bot = plane[y1 * w + x0] + (plane[y1 * w + x1] - plane[y1 * w + x0]) * fx;
                out.push(top + (bot - top) * fy);
            }
        }
    }
    out
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut entries = fs::read_dir(dir)?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<Vec<_>>>()?;
    entries.sort();
    Ok(entries)
}

fn is_ppm(path: &Path) -> bool {
    path.is_file()
        && path
            .extension()
            .is_some_and(|e| e.eq_ignore_ascii_case("ppm"))
}

/// Loads `root/<class>/*.ppm`. Classes are indexed in sorted directory-name
/// order and every image is resized to `target` (`H×W`).
pub fn load_image_dir(root: &Path, target: (usize, usize)) -> Result<Dataset> {
    if !root.is_dir() {
        return Err(Error::Data(format!("{} is not a directory", root.display())));
    }
    let class_dirs: Vec<PathBuf> = sorted_entries(root)?.into_iter().filter(|p| p.is_dir()).collect();
    if class_dirs.is_empty() {
        return Err(Error::Data(format!("{} has no class subdirectories", root.display())));
    }
    let (th, tw) = target;
    let mut data = Vec::new();
    let mut labels = Vec::new();
    let mut class_names = Vec::new();
    for (label, dir) in class_dirs.iter().enumerate() {
        class_names.push(dir.file_name().unwrap_or_default().to_string_lossy().into_owned());
        let files: Vec<PathBuf> = sorted_entries(dir)?.into_iter().filter(|p| is_ppm(p)).collect();
        if files.is_empty() {
            return Err(Error::Data(format!("class directory {} has no .ppm images", dir.display())));
        }
        for f in files {
            let img = parse_ppm(&fs::read(&f)?).map_err(|e| Error::Data(format!("{}: {e}", f.display())))?;
            data.extend(resize_bilinear(&img.chw, 3, img.height, img.width, th, tw));
            labels.push(label);
        }
    }
    Ok(Dataset {
        kind: SampleKind::Image,
        sample_shape: [3, th, tw],
        data,
        labels,
        class_names,
    })
}

/// Writes an image dataset as `root/<class>/img_NNNNN.ppm`.
pub fn write_image_dir(dataset: &Dataset, root: &Path) -> Result<usize> {
    let [_, h, w] = dataset.sample_shape;
    let mut counters = vec![0usize; dataset.num_classes()];
    for name in &dataset.class_names {
        fs::create_dir_all(root.join(name))?;
    }
    for i in 0..dataset.len() {
        let label = dataset.labels[i];
        let path = root
            .join(&dataset.class_names[label])
            .join(format!("img_{:05}.ppm", counters[label]));
        counters[label] += 1;
        fs::write(path, write_ppm(dataset.sample(i), h, w))?;
    }
    Ok(dataset.len())
}
