//! RGB images with channel values in `[0, 1]`, stored height × width × 3.

use std::io::{BufRead, Write};
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || data.len() != height * width * 3 {
            return Err(Error::Contract(format!(
                "image {height}x{width} needs {} values, got {}",
                height * width * 3,
                data.len()
            )));
        }
        Ok(Self { height, width, data })
    }

    pub fn filled(height: usize, width: usize, rgb: [f64; 3]) -> Self {
        let data = (0..height * width).flat_map(|_| rgb).collect();
        Self { height, width, data }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn pixel(&self, y: usize, x: usize) -> [f64; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_pixel(&mut self, y: usize, x: usize, rgb: [f64; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    /// Pixel with coordinates clamped to the image border.
    pub fn pixel_clamped(&self, y: isize, x: isize) -> [f64; 3] {
        let y = y.clamp(0, self.height as isize - 1) as usize;
        let x = x.clamp(0, self.width as isize - 1) as usize;
        self.pixel(y, x)
    }

    /// Mean of the three channels at every pixel, row-major.
    pub fn gray(&self) -> Vec<f64> {
        self.data.chunks_exact(3).map(|p| (p[0] + p[1] + p[2]) / 3.0).collect()
    }

    pub fn mean_channels(&self) -> [f64; 3] {
        let mut m = [0.0; 3];
        for p in self.data.chunks_exact(3) {
            for c in 0..3 {
                m[c] += p[c];
            }
        }
        let n = (self.height * self.width) as f64;
        m.map(|v| v / n)
    }

    /// Snaps every channel to the nearest multiple of 1/255 so the image
    /// survives an 8-bit round trip unchanged.
    pub fn quantized(mut self) -> Self {
        for v in &mut self.data {
            *v = to_u8(*v) as f64 / 255.0;
        }
        self
    }

    /// Squared L2 distance between two images of equal size.
    pub fn l2_sq(&self, other: &Image) -> f64 {
        self.data.iter().zip(&other.data).map(|(a, b)| (a - b) * (a - b)).sum()
    }

    /// Splits the image into non-overlapping `p×p` patches, each flattened
    /// row-major with interleaved channels. Returns `(N^p, 3·p²)` data.
    pub fn patchify(&self, p: usize) -> Result<Vec<f64>> {
        if p == 0 || !self.height.is_multiple_of(p) || !self.width.is_multiple_of(p) {
            return Err(Error::Contract(format!(
                "image {}x{} is not divisible into {p}x{p} patches",
                self.height, self.width
            )));
        }
        let mut out = Vec::with_capacity(self.data.len());
        for py in 0..self.height / p {
            for px in 0..self.width / p {
                for y in 0..p {
                    let row = (py * p + y) * self.width + px * p;
                    out.extend_from_slice(&self.data[row * 3..(row + p) * 3]);
                }
            }
        }
        Ok(out)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        self.data.iter().map(|&v| to_u8(v)).collect()
    }

    pub fn from_bytes(height: usize, width: usize, bytes: &[u8]) -> Result<Self> {
        Self::new(height, width, bytes.iter().map(|&b| b as f64 / 255.0).collect())
    }

    /// Binary PPM (P6, maxval 255).
    pub fn write_ppm(&self, w: &mut impl Write) -> std::io::Result<()> {
        write!(w, "P6\n{} {}\n255\n", self.width, self.height)?;
        w.write_all(&self.to_bytes())
    }

    pub fn read_ppm(r: &mut impl BufRead) -> Result<Self> {
        let mut fields = Vec::new();
        let mut token = Vec::new();
        let mut byte = [0u8; 1];
        while fields.len() < 4 {
            if r.read(&mut byte).map_err(|e| Error::Format(e.to_string()))? == 0 {
                return Err(Error::Format("truncated PPM header".into()));
            }
            match byte[0] {
                b'#' if token.is_empty() => {
                    let mut skip = String::new();
                    r.read_line(&mut skip).map_err(|e| Error::Format(e.to_string()))?;
                }
                c if c.is_ascii_whitespace() => {
                    if !token.is_empty() {
                        fields.push(String::from_utf8_lossy(&token).into_owned());
                        token.clear();
                    }
                }
                c => token.push(c),
            }
        }
        if fields[0] != "P6" {
            return Err(Error::Format(format!("unsupported PPM magic {:?}", fields[0])));
        }
        let parse = |s: &str| {
            s.parse::<usize>()
                .map_err(|_| Error::Format(format!("bad PPM field {s:?}")))
        };
        let (width, height, max) = (parse(&fields[1])?, parse(&fields[2])?, parse(&fields[3])?);
        if max != 255 {
            return Err(Error::Format(format!("unsupported PPM maxval {max}")));
        }
        let mut bytes = vec![0u8; width * height * 3];
        r.read_exact(&mut bytes)
            .map_err(|_| Error::Format("truncated PPM pixel data".into()))?;
        Self::from_bytes(height, width, &bytes)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let ext = path.extension().and_then(|e| e.to_str()).unwrap_or("");
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = std::io::BufWriter::new(file);
        match ext {
            #[cfg(feature = "png")]
            "png" => self.write_png(&mut w).map_err(|e| Error::Format(e.to_string()))?,
            _ => self.write_ppm(&mut w).map_err(|e| Error::io(path, e))?,
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut r = std::io::BufReader::new(file);
        match path.extension().and_then(|e| e.to_str()) {
            #[cfg(feature = "png")]
            Some("png") => Self::read_png(r),
            _ => Self::read_ppm(&mut r),
        }
    }

    #[cfg(feature = "png")]
    fn write_png(&self, w: &mut impl Write) -> std::result::Result<(), png::EncodingError> {
        let mut enc = png::Encoder::new(w, self.width as u32, self.height as u32);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Eight);
        enc.write_header()?.write_image_data(&self.to_bytes())
    }

    #[cfg(feature = "png")]
    fn read_png(r: impl BufRead + std::io::Seek) -> Result<Self> {
        let fmt = |e: png::DecodingError| Error::Format(e.to_string());
        let mut reader = png::Decoder::new(r).read_info().map_err(fmt)?;
        let mut buf = vec![0; reader.output_buffer_size().unwrap_or(0)];
        let info = reader.next_frame(&mut buf).map_err(fmt)?;
        if info.color_type != png::ColorType::Rgb || info.bit_depth != png::BitDepth::Eight {
            return Err(Error::Format("only 8-bit RGB PNG is supported".into()));
        }
        Self::from_bytes(info.height as usize, info.width as usize, &buf[..info.buffer_size()])
    }
}

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ppm_round_trip_of_quantized_image() {
        let data = (0..4 * 6 * 3).map(|i| (i as f64 * 0.37) % 1.0).collect();
        let img = Image::new(4, 6, data).unwrap().quantized();
        let mut buf = Vec::new();
        img.write_ppm(&mut buf).unwrap();
        let back = Image::read_ppm(&mut &buf[..]).unwrap();
        assert_eq!(back, img);
    }

    #[test]
    fn truncated_ppm_is_rejected() {
        let img = Image::filled(3, 3, [0.5; 3]);
        let mut buf = Vec::new();
        img.write_ppm(&mut buf).unwrap();
        buf.truncate(buf.len() - 2);
        assert!(matches!(Image::read_ppm(&mut &buf[..]), Err(Error::Format(_))));
    }

    #[test]
    fn patchify_orders_patches_row_major() {
        let data = (0..4 * 4 * 3).map(|i| i as f64).collect();
        let img = Image::new(4, 4, data).unwrap();
        let p = img.patchify(2).unwrap();
        assert_eq!(p.len(), 48);
        // First patch: pixels (0,0),(0,1),(1,0),(1,1).
        assert_eq!(&p[..6], &[0.0, 1.0, 2.0, 3.0, 4.0, 5.0]);
        assert_eq!(&p[6..12], &[12.0, 13.0, 14.0, 15.0, 16.0, 17.0]);
        assert!(img.patchify(3).is_err());
    }
}
