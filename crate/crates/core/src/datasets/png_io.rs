//! 8-bit PNG reading and writing. Index masks are one byte per pixel with
//! the byte equal to the class index.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;

use super::DatasetError;

pub struct RgbImage {
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

pub struct IndexImage {
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

fn corrupt(path: &Path, msg: impl std::fmt::Display) -> DatasetError {
    DatasetError::CorruptSample { path: path.display().to_string(), reason: msg.to_string() }
}

fn decode(path: &Path) -> Result<(png::OutputInfo, Vec<u8>), DatasetError> {
    let file = File::open(path).map_err(|e| corrupt(path, e))?;
    let mut decoder = png::Decoder::new(std::io::BufReader::new(file));
    decoder.set_transformations(png::Transformations::IDENTITY);
    let mut reader = decoder.read_info().map_err(|e| corrupt(path, e))?;
    let mut buf = vec![0; reader.output_buffer_size().ok_or_else(|| corrupt(path, "image too large"))?];
    let info = reader.next_frame(&mut buf).map_err(|e| corrupt(path, e))?;
    buf.truncate(info.buffer_size());
    if info.bit_depth != png::BitDepth::Eight {
        return Err(corrupt(path, format!("unsupported bit depth {:?}", info.bit_depth)));
    }
    Ok((info, buf))
}

pub fn read_rgb(path: &Path) -> Result<RgbImage, DatasetError> {
    let (info, buf) = decode(path)?;
    let (h, w) = (info.height as usize, info.width as usize);
    let data = match info.color_type {
        png::ColorType::Rgb => buf,
        png::ColorType::Rgba => buf.chunks(4).flat_map(|p| [p[0], p[1], p[2]]).collect(),
        png::ColorType::Grayscale => buf.iter().flat_map(|&v| [v, v, v]).collect(),
        other => return Err(corrupt(path, format!("unsupported image color type {other:?}"))),
    };
    Ok(RgbImage { height: h, width: w, data })
}

/// Raw indices of a grayscale or palette PNG; palettes are never applied.
pub fn read_index(path: &Path) -> Result<IndexImage, DatasetError> {
    let (info, buf) = decode(path)?;
    match info.color_type {
        png::ColorType::Grayscale | png::ColorType::Indexed => {}
        other => return Err(corrupt(path, format!("annotation must be single-channel, got {other:?}"))),
    }
    Ok(IndexImage { height: info.height as usize, width: info.width as usize, data: buf })
}

fn encode(path: &Path, width: usize, height: usize, color: png::ColorType, data: &[u8]) -> Result<(), DatasetError> {
    let io = |e: std::io::Error| DatasetError::Io { path: path.display().to_string(), source: e };
    let tmp = path.with_extension("png.tmp");
    {
        let file = File::create(&tmp).map_err(io)?;
        let mut w = BufWriter::new(file);
        let mut enc = png::Encoder::new(&mut w, width as u32, height as u32);
        enc.set_color(color);
        enc.set_depth(png::BitDepth::Eight);
        let mut writer = enc.write_header().map_err(|e| io(std::io::Error::other(e)))?;
        writer.write_image_data(data).map_err(|e| io(std::io::Error::other(e)))?;
        writer.finish().map_err(|e| io(std::io::Error::other(e)))?;
        w.flush().map_err(io)?;
    }
    fs::rename(&tmp, path).map_err(io)
}

pub fn write_rgb(path: &Path, width: usize, height: usize, data: &[u8]) -> Result<(), DatasetError> {
    encode(path, width, height, png::ColorType::Rgb, data)
}

pub fn write_index(path: &Path, width: usize, height: usize, data: &[u8]) -> Result<(), DatasetError> {
    encode(path, width, height, png::ColorType::Grayscale, data)
}
