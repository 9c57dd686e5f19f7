//! Thin PNG helpers for the 8-bit RGB, 8-bit gray and 16-bit gray images the
//! engine reads and writes.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use png::{BitDepth, ColorType};

use crate::error::{Error, Result};

/// Decoded raster: width, height and row-major samples.
#[derive(Debug)]
pub struct Raster<T> {
    pub width: usize,
    pub height: usize,
    pub data: Vec<T>,
}

fn write(path: &Path, width: usize, height: usize, color: ColorType, depth: BitDepth, bytes: &[u8]) -> Result<()> {
    let file = File::create(path)?;
    let mut encoder = png::Encoder::new(BufWriter::new(file), width as u32, height as u32);
    encoder.set_color(color);
    encoder.set_depth(depth);
    let mut writer = encoder.write_header().map_err(|e| Error::Io(std::io::Error::other(e)))?;
    writer.write_image_data(bytes).map_err(|e| Error::Io(std::io::Error::other(e)))?;
    writer.finish().map_err(|e| Error::Io(std::io::Error::other(e)))?;
    Ok(())
}

pub fn write_rgb8(path: &Path, width: usize, height: usize, data: &[u8]) -> Result<()> {
    debug_assert_eq!(data.len(), width * height * 3);
    write(path, width, height, ColorType::Rgb, BitDepth::Eight, data)
}

pub fn write_gray8(path: &Path, width: usize, height: usize, data: &[u8]) -> Result<()> {
    debug_assert_eq!(data.len(), width * height);
    write(path, width, height, ColorType::Grayscale, BitDepth::Eight, data)
}

pub fn write_gray16(path: &Path, width: usize, height: usize, data: &[u16]) -> Result<()> {
    debug_assert_eq!(data.len(), width * height);
    // PNG stores 16-bit samples big-endian.
    let bytes: Vec<u8> = data.iter().flat_map(|v| v.to_be_bytes()).collect();
    write(path, width, height, ColorType::Grayscale, BitDepth::Sixteen, &bytes)
}

fn read(path: &Path, field: &'static str, color: ColorType, depth: BitDepth) -> Result<(usize, usize, Vec<u8>)> {
    let file = File::open(path).map_err(|e| Error::Decode { field, reason: format!("{}: {e}", path.display()) })?;
    let decoder = png::Decoder::new(BufReader::new(file));
    let mut reader = decoder.read_info().map_err(|e| Error::Decode { field, reason: format!("{}: {e}", path.display()) })?;
    let (got_color, got_depth) = reader.output_color_type();
    if got_color != color || got_depth != depth {
        return Err(Error::Decode {
            field,
            reason: format!("{}: expected {color:?}/{depth:?}, found {got_color:?}/{got_depth:?}", path.display()),
        });
    }
    let size = reader.output_buffer_size().ok_or_else(|| Error::Decode { field, reason: "image too large".into() })?;
    let mut buf = vec![0; size];
    let info = reader.next_frame(&mut buf).map_err(|e| Error::Decode { field, reason: format!("{}: {e}", path.display()) })?;
    buf.truncate(info.buffer_size());
    Ok((info.width as usize, info.height as usize, buf))
}

pub fn read_rgb8(path: &Path, field: &'static str) -> Result<Raster<u8>> {
    let (width, height, data) = read(path, field, ColorType::Rgb, BitDepth::Eight)?;
    Ok(Raster { width, height, data })
}

pub fn read_gray8(path: &Path, field: &'static str) -> Result<Raster<u8>> {
    let (width, height, data) = read(path, field, ColorType::Grayscale, BitDepth::Eight)?;
    Ok(Raster { width, height, data })
}

pub fn read_gray16(path: &Path, field: &'static str) -> Result<Raster<u16>> {
    let (width, height, bytes) = read(path, field, ColorType::Grayscale, BitDepth::Sixteen)?;
    let data = bytes.chunks_exact(2).map(|c| u16::from_be_bytes([c[0], c[1]])).collect();
    Ok(Raster { width, height, data })
}
