//! File formats: PFM for linear radiance, 8-bit PNG for display, CSV loss
//! traces and `key=value` parameter files.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::optim::TraceRow;
use crate::raster::{linear_to_u8, ImageBuffer};
use crate::render::MediumParams;

fn format_err(path: &Path, msg: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        msg: msg.into(),
    }
}

/// Color PFM, little-endian (scale -1.0), rows stored bottom to top.
/// Masked pixels are written as zero.
pub fn write_pfm(path: &Path, img: &ImageBuffer) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    encode_pfm(&mut out, img)?;
    out.flush()?;
    Ok(())
}

pub fn encode_pfm<W: Write>(out: &mut W, img: &ImageBuffer) -> Result<()> {
    write!(out, "PF\n{} {}\n-1.0\n", img.width, img.height)?;
    for j in (0..img.height).rev() {
        for i in 0..img.width {
            let k = img.index(i, j);
            let v = if img.mask[k] { img.data[k] } else { [0.0; 3] };
            for c in v {
                out.write_all(&(c as f32).to_le_bytes())?;
            }
        }
    }
    Ok(())
}

fn header_token<R: BufRead>(r: &mut R, path: &Path) -> Result<String> {
    let mut tok = String::new();
    let mut byte = [0u8; 1];
    loop {
        if r.read(&mut byte)? == 0 {
            return Err(format_err(path, "truncated header"));
        }
        let ch = byte[0] as char;
        if ch.is_ascii_whitespace() {
            if tok.is_empty() {
                continue;
            }
            return Ok(tok);
        }
        tok.push(ch);
    }
}

/// Read a color (`PF`) or grayscale (`Pf`) PFM of either endianness.
pub fn read_pfm(path: &Path) -> Result<ImageBuffer> {
    let mut r = BufReader::new(File::open(path)?);
    let magic = header_token(&mut r, path)?;
    let channels = match magic.as_str() {
        "PF" => 3,
        "Pf" => 1,
        _ => return Err(format_err(path, format!("bad magic '{magic}'"))),
    };
    let parse_usize = |s: String| s.parse::<usize>().map_err(|_| format_err(path, "bad dimensions"));
    let width = parse_usize(header_token(&mut r, path)?)?;
    let height = parse_usize(header_token(&mut r, path)?)?;
    let scale: f32 = header_token(&mut r, path)?
        .parse()
        .map_err(|_| format_err(path, "bad scale"))?;
    if width == 0 || height == 0 || scale == 0.0 {
        return Err(format_err(path, "empty image or zero scale"));
    }
    let little = scale < 0.0;
    let mut raw = vec![0u8; width * height * channels * 4];
    r.read_exact(&mut raw).map_err(|_| format_err(path, "truncated pixel data"))?;
    let mut img = ImageBuffer::new(width, height);
    for (n, chunk) in raw.chunks_exact(channels * 4).enumerate() {
        let mut px = [0.0f64; 3];
        for c in 0..channels {
            let b: [u8; 4] = chunk[c * 4..c * 4 + 4].try_into().unwrap();
            px[c] = if little { f32::from_le_bytes(b) } else { f32::from_be_bytes(b) } as f64;
        }
        if channels == 1 {
            px = [px[0]; 3];
        }
        let (i, row_from_bottom) = (n % width, n / width);
        img.set(i, height - 1 - row_from_bottom, px);
    }
    Ok(img)
}

/// 8-bit RGB after clamping and gamma 2.4 encoding; masked pixels are black.
///
/// Values pass through `f32` first so the PNG of an image is exactly the
/// encoding of its PFM.
pub fn to_srgb8(img: &ImageBuffer) -> Vec<u8> {
    let mut out = Vec::with_capacity(img.data.len() * 3);
    for (v, &ok) in img.data.iter().zip(&img.mask) {
        for c in v {
            out.push(if ok { linear_to_u8(*c as f32 as f64) } else { 0 });
        }
    }
    out
}

pub fn write_png(path: &Path, img: &ImageBuffer) -> Result<()> {
    image::save_buffer(path, &to_srgb8(img), img.width as u32, img.height as u32, image::ColorType::Rgb8)
        .map_err(|e| format_err(path, e.to_string()))
}

/// Validity mask as an 8-bit grayscale PNG (255 valid, 0 invalid).
pub fn write_mask_png(path: &Path, img: &ImageBuffer) -> Result<()> {
    let buf: Vec<u8> = img.mask.iter().map(|&m| if m { 255 } else { 0 }).collect();
    image::save_buffer(path, &buf, img.width as u32, img.height as u32, image::ColorType::L8)
        .map_err(|e| format_err(path, e.to_string()))
}

pub fn read_png_rgb8(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let img = image::open(path).map_err(|e| format_err(path, e.to_string()))?.to_rgb8();
    Ok((img.width() as usize, img.height() as usize, img.into_raw()))
}

pub const TRACE_COLUMNS: [&str; 11] = [
    "iteration", "lr", "recon", "cast", "total", "A_r", "A_g", "A_b", "beta_r", "beta_g", "beta_b",
];

pub fn write_trace_csv<W: Write>(out: W, trace: &[TraceRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let csv_err = |e: csv::Error| Error::Io(std::io::Error::other(e));
    w.write_record(TRACE_COLUMNS).map_err(csv_err)?;
    for row in trace {
        let m = &row.medium;
        let mut rec = vec![row.iteration.to_string()];
        rec.extend(
            [row.lr, row.recon, row.cast, row.total]
                .iter()
                .chain(m.a.iter())
                .chain(m.beta.iter())
                .map(|v| v.to_string()),
        );
        w.write_record(&rec).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_trace_file(path: &Path, trace: &[TraceRow]) -> Result<()> {
    write_trace_csv(BufWriter::new(File::create(path)?), trace)
}

const PARAM_KEYS: [&str; 6] = ["A_r", "A_g", "A_b", "beta_r", "beta_g", "beta_b"];

pub fn format_params(m: &MediumParams) -> String {
    PARAM_KEYS
        .iter()
        .zip(m.a.iter().chain(m.beta.iter()))
        .map(|(k, v)| format!("{k}={v}\n"))
        .collect()
}

pub fn parse_params(text: &str) -> Result<MediumParams> {
    let mut vals = [None; 6];
    for line in text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#')) {
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Manifest(format!("expected key=value, got '{line}'")))?;
        let slot = PARAM_KEYS
            .iter()
            .position(|p| *p == k.trim())
            .ok_or_else(|| Error::Manifest(format!("unknown parameter '{}'", k.trim())))?;
        vals[slot] = Some(
            v.trim()
                .parse::<f64>()
                .map_err(|_| Error::Manifest(format!("bad number for {k}: '{v}'")))?,
        );
    }
    let get = |i: usize| vals[i].ok_or_else(|| Error::Manifest(format!("missing {}", PARAM_KEYS[i])));
    Ok(MediumParams::new([get(0)?, get(1)?, get(2)?], [get(3)?, get(4)?, get(5)?]))
}

pub fn write_params(path: &Path, m: &MediumParams) -> Result<()> {
    std::fs::write(path, format_params(m))?;
    Ok(())
}

pub fn read_params(path: &Path) -> Result<MediumParams> {
    parse_params(&std::fs::read_to_string(path)?)
}
