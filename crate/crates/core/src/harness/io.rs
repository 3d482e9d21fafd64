//! Row-major float images, 8-bit PNG output and a lossless float dump.
//!
//! The float dump is one line of JSON header followed by the samples as
//! little-endian `f64`.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use nrt_kernel::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
struct RawHeader {
    format: String,
    height: usize,
    width: usize,
    channels: usize,
}

const RAW_FORMAT: &str = "f64le";

impl Image {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width * channels {
            return Err(invalid(format!(
                "{} samples for a {height}x{width}x{channels} image",
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f64) -> Self {
        Self {
            height,
            width,
            channels,
            data: vec![value; height * width * channels],
        }
    }

    pub fn pixel(&self, row: usize, col: usize) -> &[f64] {
        let i = (row * self.width + col) * self.channels;
        &self.data[i..i + self.channels]
    }

    pub fn pixel_mut(&mut self, row: usize, col: usize) -> &mut [f64] {
        let i = (row * self.width + col) * self.channels;
        &mut self.data[i..i + self.channels]
    }

    pub fn same_shape(&self, other: &Image) -> bool {
        (self.height, self.width, self.channels) == (other.height, other.width, other.channels)
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(&[self.height, self.width, self.channels], self.data.clone()).expect("consistent image")
    }

    pub fn clamped(&self) -> Self {
        Self {
            data: self.data.iter().map(|v| v.clamp(0.0, 1.0)).collect(),
            ..self.clone()
        }
    }

    /// Linearly maps `[lo, hi]` to `[0, 1]`.
    pub fn normalized(&self, lo: f64, hi: f64) -> Self {
        let span = if hi > lo { hi - lo } else { 1.0 };
        Self {
            data: self.data.iter().map(|v| ((v - lo) / span).clamp(0.0, 1.0)).collect(),
            ..self.clone()
        }
    }

    /// 8-bit PNG; one channel is written as greyscale, three as RGB.
    pub fn write_png(&self, path: &Path) -> Result<()> {
        let bytes: Vec<u8> = self.data.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
        let (w, h) = (self.width as u32, self.height as u32);
        match self.channels {
            1 => image::GrayImage::from_raw(w, h, bytes).expect("sized buffer").save(path)?,
            3 => image::RgbImage::from_raw(w, h, bytes).expect("sized buffer").save(path)?,
            c => return Err(invalid(format!("cannot write a {c}-channel PNG"))),
        }
        Ok(())
    }

    pub fn read_png(path: &Path) -> Result<Self> {
        let rgb = image::open(path)?.to_rgb8();
        let (w, h) = rgb.dimensions();
        let data = rgb.into_raw().into_iter().map(|b| b as f64 / 255.0).collect();
        Self::new(h as usize, w as usize, 3, data)
    }

    pub fn write_raw(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        let header = RawHeader {
            format: RAW_FORMAT.into(),
            height: self.height,
            width: self.width,
            channels: self.channels,
        };
        serde_json::to_writer(&mut w, &header).map_err(|e| Error::InvalidInput(e.to_string()))?;
        w.write_all(b"\n")?;
        for v in &self.data {
            w.write_all(&v.to_le_bytes())?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_raw(path: &Path) -> Result<Self> {
        let mut r = BufReader::new(File::open(path)?);
        let mut line = String::new();
        r.read_line(&mut line)?;
        let header: RawHeader = serde_json::from_str(line.trim_end())?;
        if header.format != RAW_FORMAT {
            return Err(invalid(format!("unsupported raw format {:?}", header.format)));
        }
        let n = header.height * header.width * header.channels;
        let mut bytes = vec![0u8; n * 8];
        r.read_exact(&mut bytes)?;
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        Self::new(header.height, header.width, header.channels, data)
    }
}
