//! Binary PGM (P5) image I/O, 8-bit, maxval 255.
//!
//! Pixel values map linearly between [0,1] f64 and 0..=255; files carry no
//! timestamps or comments, so identical images produce identical bytes.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Image;

/// Quantizes a [0,1] single-channel image to 8 bits and writes P5.
pub fn write_pgm(path: &Path, im: &Image) -> Result<()> {
    if im.channels() != 1 {
        return Err(Error::shape(
            "write_pgm",
            "1 channel".to_string(),
            format!("{}", im.channels()),
        ));
    }
    let mut w = BufWriter::new(File::create(path)?);
    write!(w, "P5\n{} {}\n255\n", im.width(), im.height())?;
    let bytes: Vec<u8> = im
        .data()
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    w.write_all(&bytes)?;
    w.flush()?;
    Ok(())
}

/// Reads a binary P5 file into a [0,1] single-channel image.
pub fn read_pgm(path: &Path) -> Result<Image> {
    let mut buf = Vec::new();
    BufReader::new(
        File::open(path).map_err(|e| Error::Dataset(format!("{}: {e}", path.display())))?,
    )
    .read_to_end(&mut buf)?;
    parse_pgm(&buf).map_err(|msg| Error::Dataset(format!("{}: {msg}", path.display())))
}

fn parse_pgm(buf: &[u8]) -> std::result::Result<Image, String> {
    let mut pos = 0usize;
    let token = |pos: &mut usize| -> std::result::Result<String, String> {
        while *pos < buf.len() && buf[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        let start = *pos;
        while *pos < buf.len() && !buf[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if start == *pos {
            return Err("truncated header".into());
        }
        Ok(String::from_utf8_lossy(&buf[start..*pos]).into_owned())
    };
    if token(&mut pos)? != "P5" {
        return Err("not a binary PGM (P5) file".into());
    }
    let width: usize = token(&mut pos)?.parse().map_err(|_| "bad width")?;
    let height: usize = token(&mut pos)?.parse().map_err(|_| "bad height")?;
    let maxval: usize = token(&mut pos)?.parse().map_err(|_| "bad maxval")?;
    if maxval != 255 {
        return Err(format!("unsupported maxval {maxval}"));
    }
    pos += 1; // single whitespace byte after maxval
    if buf.len() < pos + width * height {
        return Err("truncated pixel data".into());
    }
    let data: Vec<f64> = buf[pos..pos + width * height]
        .iter()
        .map(|&b| b as f64 / 255.0)
        .collect();
    Image::from_vec(1, height, width, data).map_err(|e| e.to_string())
}
