//! PNG output with optional sRGB encoding, and a raw G-buffer dump.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use byteorder::{LittleEndian, WriteBytesExt};

use crate::error::{Error, Result};
use crate::raster::GBuffer;
use crate::real::{self, lit, Real};
use crate::render::Image;

pub fn linear_to_srgb(v: f64) -> f64 {
    let v = v.clamp(0.0, 1.0);
    if v <= 0.0031308 {
        12.92 * v
    } else {
        1.055 * v.powf(1.0 / 2.4) - 0.055
    }
}

pub fn srgb_to_linear(v: f64) -> f64 {
    if v <= 0.04045 {
        v / 12.92
    } else {
        ((v + 0.055) / 1.055).powf(2.4)
    }
}

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// 8-bit RGB bytes, sRGB-encoded unless `linear`.
pub fn image_bytes<T: Real>(image: &Image<T>, linear: bool) -> Vec<u8> {
    image
        .pixels
        .iter()
        .flat_map(|p| {
            p.map(|c| {
                let v = real::to_f64(c);
                quantize(if linear { v } else { linear_to_srgb(v) })
            })
        })
        .collect()
}

pub fn write_png<W: Write, T: Real>(w: W, image: &Image<T>, linear: bool) -> Result<()> {
    let fmt = |e: png::EncodingError| Error::Format(format!("PNG encoding failed: {e}"));
    let mut enc = png::Encoder::new(w, image.width as u32, image.height as u32);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    if !linear {
        enc.set_source_srgb(png::SrgbRenderingIntent::Perceptual);
    }
    let mut writer = enc.write_header().map_err(fmt)?;
    writer.write_image_data(&image_bytes(image, linear)).map_err(fmt)?;
    writer.finish().map_err(fmt)
}

pub fn save_png<T: Real>(path: impl AsRef<Path>, image: &Image<T>, linear: bool) -> Result<()> {
    let path = path.as_ref();
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    write_png(&mut w, image, linear)?;
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads an 8-bit RGB or RGBA PNG; values are decoded from sRGB unless `linear`.
pub fn load_png<T: Real>(path: impl AsRef<Path>, linear: bool) -> Result<Image<T>> {
    let path = path.as_ref();
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    let fmt = |e: png::DecodingError| Error::Format(format!("{}: {e}", path.display()));
    let mut dec = png::Decoder::new(BufReader::new(f));
    dec.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
    let mut reader = dec.read_info().map_err(fmt)?;
    let mut buf = vec![0; reader.output_buffer_size().unwrap_or(0)];
    let info = reader.next_frame(&mut buf).map_err(fmt)?;
    let channels = match info.color_type {
        png::ColorType::Rgb => 3,
        png::ColorType::Rgba => 4,
        png::ColorType::Grayscale => 1,
        png::ColorType::GrayscaleAlpha => 2,
        other => return Err(Error::Format(format!("unsupported PNG colour type {other:?}"))),
    };
    let (w, h) = (info.width as usize, info.height as usize);
    let dec = |b: u8| -> T {
        let v = b as f64 / 255.0;
        lit(if linear { v } else { srgb_to_linear(v) })
    };
    let pixels = buf[..w * h * channels]
        .chunks(channels)
        .map(|c| if channels < 3 { [dec(c[0]); 3] } else { [dec(c[0]), dec(c[1]), dec(c[2])] })
        .collect();
    Ok(Image {
        width: w,
        height: h,
        pixels,
    })
}

/// Debug view of a G-buffer: red is the triangle id modulo 256, green and
/// blue are the first two barycentrics. Background pixels are black.
pub fn gbuffer_preview<T: Real>(gb: &GBuffer<T>) -> Image<f64> {
    let pixels = gb
        .triangle_id
        .iter()
        .zip(&gb.barycentrics)
        .map(|(&id, b)| {
            if id < 0 {
                [0.0; 3]
            } else {
                [(id % 256) as f64 / 255.0, real::to_f64(b[0]), real::to_f64(b[1])]
            }
        })
        .collect();
    Image {
        width: gb.width,
        height: gb.height,
        pixels,
    }
}

/// `GBF1` dump: width, height (u32), then per pixel an i32 triangle id,
/// three f32 barycentrics and an f32 NDC depth, little-endian.
pub fn save_gbuffer<T: Real>(path: impl AsRef<Path>, gb: &GBuffer<T>) -> Result<()> {
    let path = path.as_ref();
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    let write = |w: &mut BufWriter<File>| -> std::io::Result<()> {
        w.write_all(b"GBF1")?;
        w.write_u32::<LittleEndian>(gb.width as u32)?;
        w.write_u32::<LittleEndian>(gb.height as u32)?;
        for i in 0..gb.triangle_id.len() {
            w.write_i32::<LittleEndian>(gb.triangle_id[i])?;
            for b in gb.barycentrics[i] {
                w.write_f32::<LittleEndian>(real::to_f64(b) as f32)?;
            }
            w.write_f32::<LittleEndian>(real::to_f64(gb.ndc_depth[i]) as f32)?;
        }
        w.flush()
    };
    write(&mut w).map_err(|e| Error::io(path, e))
}
