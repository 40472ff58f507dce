//! Image and light-map file formats: linear 16-bit PNG for dataset images,
//! 8-bit gray PNG for masks, PFM for float environment maps, sRGB PNG for
//! presentation renders.

use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::{Array2, Array3};

use crate::error::{Error, Result};

/// H x W x 3 linear-light image in [0, 1].
pub type LinearImage = Array3<f64>;
/// H x W binary mask.
pub type Mask = Array2<bool>;

/// Write a linear image as 16-bit RGB PNG (no gamma).
pub fn write_linear_png(path: &Path, img: &LinearImage) -> Result<()> {
    let (h, w, _) = img.dim();
    let mut buf = image::ImageBuffer::<image::Rgb<u16>, Vec<u16>>::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let px = [0, 1, 2].map(|c| {
                let v = img[[y, x, c]].clamp(0.0, 1.0);
                (v * 65535.0).round() as u16
            });
            buf.put_pixel(x as u32, y as u32, image::Rgb(px));
        }
    }
    buf.save(path)?;
    Ok(())
}

/// Read a linear image from 8- or 16-bit RGB PNG.
pub fn read_linear_png(path: &Path) -> Result<LinearImage> {
    let img = image::open(path)?.into_rgb16();
    let (w, h) = img.dimensions();
    let mut out = Array3::zeros((h as usize, w as usize, 3));
    for (x, y, px) in img.enumerate_pixels() {
        for c in 0..3 {
            out[[y as usize, x as usize, c]] = px.0[c] as f64 / 65535.0;
        }
    }
    Ok(out)
}

/// Write an sRGB presentation PNG: linear values gamma-encoded at 2.2.
pub fn write_srgb_png(path: &Path, img: &LinearImage) -> Result<()> {
    let (h, w, _) = img.dim();
    let mut buf = image::ImageBuffer::<image::Rgb<u8>, Vec<u8>>::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let px = [0, 1, 2].map(|c| {
                let v = img[[y, x, c]].clamp(0.0, 1.0).powf(1.0 / 2.2);
                (v * 255.0).round() as u8
            });
            buf.put_pixel(x as u32, y as u32, image::Rgb(px));
        }
    }
    buf.save(path)?;
    Ok(())
}

/// Write a mask as 8-bit gray PNG (0 / 255).
pub fn write_mask_png(path: &Path, mask: &Mask) -> Result<()> {
    let (h, w) = mask.dim();
    let mut buf = image::ImageBuffer::<image::Luma<u8>, Vec<u8>>::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            buf.put_pixel(
                x as u32,
                y as u32,
                image::Luma([if mask[[y, x]] { 255 } else { 0 }]),
            );
        }
    }
    buf.save(path)?;
    Ok(())
}

/// Read a mask from gray PNG, thresholding at 0.5.
pub fn read_mask_png(path: &Path) -> Result<Mask> {
    let img = image::open(path)?.into_luma8();
    let (w, h) = img.dimensions();
    let mut out = Array2::from_elem((h as usize, w as usize), false);
    for (x, y, px) in img.enumerate_pixels() {
        out[[y as usize, x as usize]] = px.0[0] >= 128;
    }
    Ok(out)
}

/// Write a color PFM (little-endian, bottom-to-top rows per the format).
pub fn write_pfm(path: &Path, img: &LinearImage) -> Result<()> {
    let (h, w, _) = img.dim();
    let f = std::fs::File::create(path)?;
    let mut out = BufWriter::new(f);
    write!(out, "PF\n{} {}\n-1.0\n", w, h)?;
    for y in (0..h).rev() {
        for x in 0..w {
            for c in 0..3 {
                out.write_f32::<LittleEndian>(img[[y, x, c]] as f32)?;
            }
        }
    }
    Ok(())
}

/// Read a color PFM.
pub fn read_pfm(path: &Path) -> Result<LinearImage> {
    let f = std::fs::File::open(path)?;
    let mut r = BufReader::new(f);
    let mut header = String::new();
    r.read_line(&mut header)?;
    if header.trim() != "PF" {
        return Err(Error::Dataset {
            path: path.display().to_string(),
            detail: format!("not a color PFM (header {header:?})"),
        });
    }
    let mut dims = String::new();
    r.read_line(&mut dims)?;
    let mut it = dims.split_whitespace();
    let (w, h): (usize, usize) = match (it.next(), it.next()) {
        (Some(w), Some(h)) => (
            w.parse().map_err(|_| bad_pfm(path, "width"))?,
            h.parse().map_err(|_| bad_pfm(path, "height"))?,
        ),
        _ => return Err(bad_pfm(path, "dimensions")),
    };
    let mut scale_line = String::new();
    r.read_line(&mut scale_line)?;
    let scale: f64 = scale_line.trim().parse().map_err(|_| bad_pfm(path, "scale"))?;
    let little_endian = scale < 0.0;
    let mut out = Array3::zeros((h, w, 3));
    let mut raw = vec![0u8; w * h * 3 * 4];
    r.read_exact(&mut raw)?;
    let mut cursor = std::io::Cursor::new(raw);
    for y in (0..h).rev() {
        for x in 0..w {
            for c in 0..3 {
                let v = if little_endian {
                    cursor.read_f32::<LittleEndian>()?
                } else {
                    cursor.read_f32::<byteorder::BigEndian>()?
                };
                out[[y, x, c]] = v as f64;
            }
        }
    }
    Ok(out)
}

fn bad_pfm(path: &Path, what: &str) -> Error {
    Error::Dataset {
        path: path.display().to_string(),
        detail: format!("malformed PFM {what}"),
    }
}
