//! File formats: PFM, 8-bit PNG with exposure sidecars, EHEV events, model checkpoints,
//! INI configuration, frame manifests and sample directories.

use std::collections::BTreeMap;
use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use ehdr_tensor::io as ehdt;
use ehdr_tensor::Tensor;

use crate::dataset::Capture;
use crate::error::{EhdrError, Result};
use crate::events::{Event, EventStream};
use crate::image::{HdrImage, LdrImage};
use crate::model::{EhdrConfig, EhdrModel};
use crate::sim::TimedFrame;

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(EhdrError::file(path))
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(EhdrError::file(path))
}

fn write_bytes(path: &Path, data: &[u8]) -> Result<()> {
    fs::write(path, data).map_err(EhdrError::file(path))
}

// ---------------------------------------------------------------- PFM

/// Little-endian colour PFM (`PF`, negative scale), rows stored bottom to top.
pub fn encode_pfm(img: &HdrImage) -> Vec<u8> {
    let mut out = format!("PF\n{} {}\n-1.0\n", img.width, img.height).into_bytes();
    for y in (0..img.height).rev() {
        let row = &img.pixels[y * img.width * 3..(y + 1) * img.width * 3];
        for v in row {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

// Next whitespace-delimited header token and the offset it started at.
fn pfm_token(bytes: &[u8], pos: &mut usize) -> Result<(usize, String)> {
    while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    if start == *pos {
        return Err(EhdrError::format(start, "truncated PFM header"));
    }
    Ok((start, String::from_utf8_lossy(&bytes[start..*pos]).into_owned()))
}

/// Reads colour (`PF`) and greyscale (`Pf`) PFM in either byte order. Greyscale is
/// replicated to RGB.
pub fn decode_pfm(bytes: &[u8]) -> Result<HdrImage> {
    let mut pos = 0;
    let (_, magic) = pfm_token(bytes, &mut pos)?;
    let channels = match magic.as_str() {
        "PF" => 3,
        "Pf" => 1,
        _ => return Err(EhdrError::format(0, format!("bad PFM magic {magic:?}"))),
    };
    let mut dim = |what: &str| -> Result<usize> {
        let (at, tok) = pfm_token(bytes, &mut pos)?;
        tok.parse::<usize>()
            .ok()
            .filter(|&d| d > 0)
            .ok_or_else(|| EhdrError::format(at, format!("bad PFM {what} {tok:?}")))
    };
    let (width, height) = (dim("width")?, dim("height")?);
    let (at, tok) = pfm_token(bytes, &mut pos)?;
    let scale: f32 = tok
        .parse()
        .ok()
        .filter(|s: &f32| *s != 0.0 && s.is_finite())
        .ok_or_else(|| EhdrError::format(at, format!("bad PFM scale {tok:?}")))?;
    // exactly one whitespace byte separates the header from the raster
    pos += 1;
    let count = width
        .checked_mul(height)
        .and_then(|n| n.checked_mul(channels))
        .ok_or_else(|| EhdrError::format(at, "PFM dimensions overflow"))?;
    let need = count * 4;
    if bytes.len() < pos + need {
        return Err(EhdrError::format(bytes.len().min(pos), "truncated PFM raster"));
    }
    if bytes.len() > pos + need {
        return Err(EhdrError::format(pos + need, "trailing bytes after PFM raster"));
    }
    let little = scale < 0.0;
    let mut pixels = vec![0.0f32; width * height * 3];
    for (i, c) in bytes[pos..pos + need].chunks_exact(4).enumerate() {
        let raw = [c[0], c[1], c[2], c[3]];
        let v = if little { f32::from_le_bytes(raw) } else { f32::from_be_bytes(raw) };
        let (pix, ch) = (i / channels, i % channels);
        let (x, y) = (pix % width, height - 1 - pix / width);
        let base = (y * width + x) * 3;
        if channels == 3 {
            pixels[base + ch] = v;
        } else {
            pixels[base..base + 3].fill(v);
        }
    }
    HdrImage::new(width, height, pixels)
}

pub fn write_pfm(path: impl AsRef<Path>, img: &HdrImage) -> Result<()> {
    write_bytes(path.as_ref(), &encode_pfm(img))?;
    Ok(())
}

pub fn read_pfm(path: impl AsRef<Path>) -> Result<HdrImage> {
    decode_pfm(&read_bytes(path.as_ref())?)
}

// ---------------------------------------------------------------- PNG

fn png_error(e: impl std::fmt::Display) -> EhdrError {
    EhdrError::format(0, format!("PNG: {e}"))
}

/// Writes `[0, 1]` RGB values as 8-bit PNG.
pub fn write_png_rgb(path: impl AsRef<Path>, width: usize, height: usize, pixels: &[f32]) -> Result<()> {
    let file = fs::File::create(path.as_ref()).map_err(EhdrError::file(path.as_ref()))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), width as u32, height as u32);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    let mut writer = enc.write_header().map_err(png_error)?;
    let data: Vec<u8> = pixels
        .iter()
        .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    writer.write_image_data(&data).map_err(png_error)?;
    writer.finish().map_err(png_error)?;
    Ok(())
}

/// Reads an 8-bit PNG as RGB values in `[0, 1]`; grey and alpha variants are converted.
pub fn read_png_rgb(path: impl AsRef<Path>) -> Result<(usize, usize, Vec<f32>)> {
    let file = fs::File::open(path.as_ref()).map_err(EhdrError::file(path.as_ref()))?;
    let mut decoder = png::Decoder::new(std::io::BufReader::new(file));
    decoder.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
    let mut reader = decoder.read_info().map_err(png_error)?;
    let mut buf = vec![0; reader.output_buffer_size().ok_or_else(|| png_error("image too large"))?];
    let info = reader.next_frame(&mut buf).map_err(png_error)?;
    let (w, h) = (info.width as usize, info.height as usize);
    let stride = match info.color_type {
        png::ColorType::Grayscale => 1,
        png::ColorType::GrayscaleAlpha => 2,
        png::ColorType::Rgb => 3,
        png::ColorType::Rgba => 4,
        other => return Err(png_error(format!("unsupported colour type {other:?}"))),
    };
    let mut pixels = Vec::with_capacity(w * h * 3);
    for px in buf[..w * h * stride].chunks_exact(stride) {
        let rgb = if stride < 3 { [px[0]; 3] } else { [px[0], px[1], px[2]] };
        pixels.extend(rgb.iter().map(|&v| v as f32 / 255.0));
    }
    Ok((w, h, pixels))
}

pub fn sidecar_path(png: &Path) -> PathBuf {
    png.with_extension("txt")
}

/// Writes a bracket as PNG plus a `key value` sidecar with its exposure metadata.
pub fn write_ldr(path: impl AsRef<Path>, img: &LdrImage) -> Result<()> {
    let path = path.as_ref();
    write_png_rgb(path, img.width, img.height, &img.pixels)?;
    let meta = format!(
        "fstop {}\nexposure_time {}\ntimestamp_us {}\n",
        img.fstop, img.exposure_time, img.timestamp_us
    );
    write_bytes(&sidecar_path(path), meta.as_bytes())?;
    Ok(())
}

pub fn read_ldr(path: impl AsRef<Path>) -> Result<LdrImage> {
    let path = path.as_ref();
    let (w, h, pixels) = read_png_rgb(path)?;
    let side = sidecar_path(path);
    let text = read_text(&side)?;
    let mut meta = BTreeMap::new();
    for line in text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#')) {
        let (k, v) = line
            .split_once(|c: char| c.is_whitespace() || c == '=')
            .ok_or_else(|| EhdrError::input(format!("{}: malformed line {line:?}", side.display())))?;
        meta.insert(k.trim().to_string(), v.trim().to_string());
    }
    let get = |k: &str| {
        meta.get(k)
            .ok_or_else(|| EhdrError::input(format!("{}: missing {k}", side.display())))
    };
    let bad = |k: &str| EhdrError::input(format!("{}: bad {k}", side.display()));
    let fstop: i32 = get("fstop")?.parse().map_err(|_| bad("fstop"))?;
    let exposure: f32 = get("exposure_time")?.parse().map_err(|_| bad("exposure_time"))?;
    let ts: u64 = match meta.get("timestamp_us") {
        Some(v) => v.parse().map_err(|_| bad("timestamp_us"))?,
        None => 0,
    };
    Ok(LdrImage::new(w, h, pixels, exposure, fstop)?.with_timestamp(ts))
}

// ---------------------------------------------------------------- EHEV

pub const EHEV_MAGIC: &[u8; 4] = b"EHEV";
pub const EHEV_VERSION: u8 = 1;
pub const EHEV_HEADER: usize = 17;
const EHEV_RECORD: usize = 13;

pub fn encode_events(s: &EventStream) -> Vec<u8> {
    let mut out = Vec::with_capacity(EHEV_HEADER + EHEV_RECORD * s.len());
    out.extend_from_slice(EHEV_MAGIC);
    out.push(EHEV_VERSION);
    out.extend_from_slice(&s.width.to_le_bytes());
    out.extend_from_slice(&s.height.to_le_bytes());
    out.extend_from_slice(&(s.len() as u64).to_le_bytes());
    for e in s.events() {
        out.extend_from_slice(&e.t.to_le_bytes());
        out.extend_from_slice(&e.x.to_le_bytes());
        out.extend_from_slice(&e.y.to_le_bytes());
        out.push(e.p as u8);
    }
    out
}

/// Decodes EHEV; polarity bytes `0` are read as `-1`.
pub fn decode_events(bytes: &[u8]) -> Result<EventStream> {
    if bytes.len() < EHEV_HEADER {
        return Err(EhdrError::format(bytes.len(), "truncated EHEV header"));
    }
    if &bytes[..4] != EHEV_MAGIC {
        return Err(EhdrError::format(0, "bad magic, expected EHEV"));
    }
    if bytes[4] != EHEV_VERSION {
        return Err(EhdrError::format(4, format!("unsupported EHEV version {}", bytes[4])));
    }
    let u16_at = |i: usize| u16::from_le_bytes([bytes[i], bytes[i + 1]]);
    let u64_at = |i: usize| u64::from_le_bytes(bytes[i..i + 8].try_into().expect("8 bytes"));
    let (width, height) = (u16_at(5), u16_at(7));
    let count = u64_at(9);
    let body = usize::try_from(count)
        .ok()
        .and_then(|c| c.checked_mul(EHEV_RECORD))
        .ok_or_else(|| EhdrError::format(9, "event count overflows"))?;
    if bytes.len() - EHEV_HEADER < body {
        let complete = (bytes.len() - EHEV_HEADER) / EHEV_RECORD;
        return Err(EhdrError::format(
            EHEV_HEADER + complete * EHEV_RECORD,
            format!("truncated EHEV body: header promises {count} events, found {complete}"),
        ));
    }
    if bytes.len() - EHEV_HEADER > body {
        return Err(EhdrError::format(EHEV_HEADER + body, "trailing bytes after EHEV records"));
    }
    let mut events = Vec::with_capacity(count as usize);
    for (i, r) in bytes[EHEV_HEADER..].chunks_exact(EHEV_RECORD).enumerate() {
        let at = EHEV_HEADER + i * EHEV_RECORD;
        let p = match r[12] as i8 {
            1 => 1,
            -1 | 0 => -1,
            other => return Err(EhdrError::format(at + 12, format!("bad polarity {other}"))),
        };
        let t = u64::from_le_bytes(r[..8].try_into().expect("8 bytes"));
        let (x, y) = (u16::from_le_bytes([r[8], r[9]]), u16::from_le_bytes([r[10], r[11]]));
        if x >= width || y >= height {
            return Err(EhdrError::format(at + 8, format!("event at ({x}, {y}) outside the sensor")));
        }
        if events.last().is_some_and(|prev: &Event| prev.t > t) {
            return Err(EhdrError::format(at, "events are not time-sorted"));
        }
        events.push(Event::new(t, x, y, p));
    }
    EventStream::new(width, height, events)
}

pub fn write_events(path: impl AsRef<Path>, s: &EventStream) -> Result<()> {
    write_bytes(path.as_ref(), &encode_events(s))?;
    Ok(())
}

pub fn read_events(path: impl AsRef<Path>) -> Result<EventStream> {
    decode_events(&read_bytes(path.as_ref())?)
}

/// `t_us,x,y,p` CSV; `p` may be `0`/`1` or `-1`/`1`.
pub fn events_to_csv(s: &EventStream) -> String {
    let mut out = String::from("t_us,x,y,p\n");
    for e in s.events() {
        out.push_str(&format!("{},{},{},{}\n", e.t, e.x, e.y, e.p));
    }
    out
}

pub fn events_from_csv(text: &str, width: u16, height: u16) -> Result<EventStream> {
    let mut events = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || (n == 0 && line.starts_with('t')) {
            continue;
        }
        let f: Vec<&str> = line.split(',').map(str::trim).collect();
        let bad = || EhdrError::input(format!("event CSV line {}: {line:?}", n + 1));
        if f.len() != 4 {
            return Err(bad());
        }
        let p: i8 = f[3].parse().map_err(|_| bad())?;
        events.push(Event::new(
            f[0].parse().map_err(|_| bad())?,
            f[1].parse().map_err(|_| bad())?,
            f[2].parse().map_err(|_| bad())?,
            if p > 0 { 1 } else { -1 },
        ));
    }
    events.sort_by_key(Event::sort_key);
    EventStream::new(width, height, events)
}

// ---------------------------------------------------------------- checkpoints

const MANIFEST: &str = "manifest.txt";

/// Writes `manifest.txt` (config plus `name shape` lines) and one EHDT blob per parameter.
pub fn save_checkpoint(dir: impl AsRef<Path>, model: &EhdrModel<f32>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(EhdrError::file(dir))?;
    let mut manifest = format!("ehdr-checkpoint 1\nbase_channels {}\n", model.cfg.base_channels);
    for p in model.params.iter() {
        let dims: Vec<String> = p.value.shape().iter().map(usize::to_string).collect();
        manifest.push_str(&format!("param {} {}\n", p.name, dims.join("x")));
        ehdt::write_file(dir.join(format!("{}.ehdt", p.name)), &p.value)?;
    }
    write_bytes(&dir.join(MANIFEST), manifest.as_bytes())?;
    Ok(())
}

pub fn load_checkpoint(dir: impl AsRef<Path>) -> Result<EhdrModel<f32>> {
    let dir = dir.as_ref();
    let text = read_text(&dir.join(MANIFEST))?;
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some("ehdr-checkpoint 1") {
        return Err(EhdrError::format(0, "not an ehdr checkpoint manifest"));
    }
    let mut cfg = EhdrConfig::default();
    let mut listed = Vec::new();
    for line in lines.filter(|l| !l.trim().is_empty()) {
        let f: Vec<&str> = line.split_whitespace().collect();
        match f.as_slice() {
            ["base_channels", v] => {
                cfg.base_channels = v
                    .parse()
                    .map_err(|_| EhdrError::input(format!("bad base_channels {v:?}")))?
            }
            ["param", name, _shape] => listed.push(name.to_string()),
            _ => return Err(EhdrError::input(format!("unrecognised manifest line {line:?}"))),
        }
    }
    let mut model = EhdrModel::<f32>::new(cfg, 0)?;
    if listed.len() != model.params.len() {
        return Err(EhdrError::input(format!(
            "checkpoint lists {} parameters, the model has {}",
            listed.len(),
            model.params.len()
        )));
    }
    for name in listed {
        let id = model
            .params
            .find(&name)
            .ok_or_else(|| EhdrError::input(format!("unknown parameter {name}")))?;
        let t: Tensor<f32> = ehdt::read_file(dir.join(format!("{name}.ehdt")))?;
        model.params.set(id, t)?;
    }
    Ok(model)
}

// ---------------------------------------------------------------- INI config

/// Flat `[section]` / `key = value` configuration.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Config {
    values: BTreeMap<(String, String), String>,
}

impl Config {
    pub fn parse(text: &str) -> Result<Self> {
        let mut section = String::new();
        let mut values = BTreeMap::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split(['#', ';']).next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                section = name.trim().to_string();
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| EhdrError::input(format!("config line {}: expected key = value", n + 1)))?;
            values.insert((section.clone(), k.trim().to_string()), v.trim().to_string());
        }
        Ok(Self { values })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&read_text(path.as_ref())?)
    }

    pub fn get(&self, section: &str, key: &str) -> Option<&str> {
        self.values
            .get(&(section.to_string(), key.to_string()))
            .map(String::as_str)
    }

    pub fn parse_or<T: std::str::FromStr>(&self, section: &str, key: &str, default: T) -> Result<T> {
        match self.get(section, key) {
            None => Ok(default),
            Some(v) => v
                .parse()
                .map_err(|_| EhdrError::input(format!("config [{section}] {key}: cannot parse {v:?}"))),
        }
    }
}

// ---------------------------------------------------------------- frame manifests

/// Reads `frame_idx timestamp_us filename` lines and the PFM frames they name.
pub fn read_frames(dir: impl AsRef<Path>) -> Result<Vec<TimedFrame>> {
    let dir = dir.as_ref();
    let text = read_text(&dir.join("manifest.txt"))?;
    let mut rows = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let f: Vec<&str> = line.split_whitespace().collect();
        let bad = || EhdrError::input(format!("frame manifest line {}: {line:?}", n + 1));
        if f.len() != 3 {
            return Err(bad());
        }
        let idx: usize = f[0].parse().map_err(|_| bad())?;
        let t: u64 = f[1].parse().map_err(|_| bad())?;
        rows.push((idx, t, f[2].to_string()));
    }
    rows.sort_by_key(|r| r.0);
    rows.into_iter()
        .map(|(_, t, name)| {
            Ok(TimedFrame {
                t_us: t,
                image: read_pfm(dir.join(name))?,
            })
        })
        .collect()
}

pub fn write_frames(dir: impl AsRef<Path>, frames: &[TimedFrame]) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(EhdrError::file(dir))?;
    let mut manifest = String::new();
    for (i, f) in frames.iter().enumerate() {
        let name = format!("frame_{i:04}.pfm");
        write_pfm(dir.join(&name), &f.image)?;
        manifest.push_str(&format!("{i} {} {name}\n", f.t_us));
    }
    write_bytes(&dir.join("manifest.txt"), manifest.as_bytes())?;
    Ok(())
}

// ---------------------------------------------------------------- sample directories

pub const BRACKET_FILES: [&str; 3] = ["bracket_prev.png", "bracket_ref.png", "bracket_next.png"];
pub const EVENTS_FILE: &str = "events.ehev";
pub const GT_FILE: &str = "gt.pfm";

/// A capture on disk: three bracket PNGs with sidecars, `events.ehev` and (optionally) `gt.pfm`.
pub fn write_capture(dir: impl AsRef<Path>, c: &Capture) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(EhdrError::file(dir))?;
    for (b, name) in c.brackets.iter().zip(BRACKET_FILES) {
        write_ldr(dir.join(name), b)?;
    }
    write_events(dir.join(EVENTS_FILE), &c.events)?;
    if let Some(gt) = &c.ground_truth {
        write_pfm(dir.join(GT_FILE), gt)?;
    }
    Ok(())
}

pub fn read_capture(dir: impl AsRef<Path>) -> Result<Capture> {
    let dir = dir.as_ref();
    let brackets = [
        read_ldr(dir.join(BRACKET_FILES[0]))?,
        read_ldr(dir.join(BRACKET_FILES[1]))?,
        read_ldr(dir.join(BRACKET_FILES[2]))?,
    ];
    let gt_path = dir.join(GT_FILE);
    Ok(Capture {
        brackets,
        events: read_events(dir.join(EVENTS_FILE))?,
        ground_truth: if gt_path.exists() { Some(read_pfm(gt_path)?) } else { None },
    })
}

/// Sub-directories of `root` holding a capture, sorted by name.
pub fn list_sample_dirs(root: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let mut dirs: Vec<PathBuf> = fs::read_dir(root.as_ref()).map_err(EhdrError::file(root.as_ref()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join(EVENTS_FILE).exists())
        .collect();
    dirs.sort();
    Ok(dirs)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_event_file_is_header_only() {
        let s = EventStream::empty(64, 48);
        let b = encode_events(&s);
        assert_eq!(b.len(), 17);
        assert_eq!(decode_events(&b).unwrap(), s);
    }

    #[test]
    fn truncated_events_report_offset() {
        let s = EventStream::new(4, 4, vec![Event::new(1, 0, 0, 1), Event::new(2, 1, 1, -1)]).unwrap();
        let b = encode_events(&s);
        match decode_events(&b[..b.len() - 3]) {
            Err(EhdrError::Format { offset, .. }) => assert_eq!(offset, 17 + 13),
            other => panic!("expected format error, got {other:?}"),
        }
        assert!(matches!(decode_events(&b[..10]), Err(EhdrError::Format { .. })));
    }

    #[test]
    fn zero_polarity_maps_to_negative() {
        let s = EventStream::new(4, 4, vec![Event::new(1, 0, 0, -1)]).unwrap();
        let mut b = encode_events(&s);
        *b.last_mut().unwrap() = 0;
        assert_eq!(decode_events(&b).unwrap(), s);
        let csv = "t_us,x,y,p\n5,1,2,0\n7,0,0,1\n";
        let e = events_from_csv(csv, 4, 4).unwrap();
        assert_eq!(e.events(), [Event::new(5, 1, 2, -1), Event::new(7, 0, 0, 1)]);
        assert_eq!(events_from_csv(&events_to_csv(&e), 4, 4).unwrap(), e);
    }

    #[test]
    fn pfm_reads_big_endian_and_greyscale() {
        let mut b = b"Pf\n2 1\n1.0\n".to_vec();
        b.extend_from_slice(&0.25f32.to_be_bytes());
        b.extend_from_slice(&4.0f32.to_be_bytes());
        let img = decode_pfm(&b).unwrap();
        assert_eq!(img.pixels, vec![0.25, 0.25, 0.25, 4.0, 4.0, 4.0]);
    }

    #[test]
    fn pfm_rows_are_bottom_up() {
        let img = HdrImage::new(1, 2, vec![1.0, 1.0, 1.0, 2.0, 2.0, 2.0]).unwrap();
        let b = encode_pfm(&img);
        let raster = &b[b.len() - 24..];
        assert_eq!(f32::from_le_bytes(raster[..4].try_into().unwrap()), 2.0);
    }

    #[test]
    fn pfm_header_errors_name_offsets() {
        assert!(matches!(decode_pfm(b"P6\n1 1\n-1\n"), Err(EhdrError::Format { offset: 0, .. })));
        assert!(matches!(decode_pfm(b"PF\n1 x\n-1\n"), Err(EhdrError::Format { offset: 5, .. })));
        let short = b"PF\n1 1\n-1\n\0\0\0\0";
        assert!(matches!(decode_pfm(short), Err(EhdrError::Format { .. })));
    }

    #[test]
    fn config_sections_and_comments() {
        let c = Config::parse("top = 1\n[train]\nlr = 0.001 # comment\n; note\n[model]\nbase_channels=8\n").unwrap();
        assert_eq!(c.get("", "top"), Some("1"));
        assert_eq!(c.parse_or("train", "lr", 0.0).unwrap(), 0.001);
        assert_eq!(c.parse_or("model", "base_channels", 0usize).unwrap(), 8);
        assert_eq!(c.parse_or("model", "missing", 3usize).unwrap(), 3);
        assert!(c.parse_or::<usize>("train", "lr", 0).is_err());
        assert!(Config::parse("novalue\n").is_err());
    }
}
