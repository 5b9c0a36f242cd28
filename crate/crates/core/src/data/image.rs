//! 8-bit grayscale PNG output of single-channel maps.

use std::io::Write;

use ndarray::ArrayView2;

use crate::error::{Error, Result};

/// Writes `values` linearly mapped from `[lo, hi]` to `[0, 255]`, clamping
/// outside the window. Row `i` of the array is image row `i`.
pub fn write_png<W: Write>(w: W, values: ArrayView2<'_, f64>, lo: f64, hi: f64) -> Result<()> {
    if !(hi > lo) {
        return Err(Error::InvalidParameter(format!("empty display window [{lo}, {hi}]")));
    }
    let (n1, n2) = values.dim();
    let pixels: Vec<u8> = values
        .iter()
        .map(|&v| {
            let t = ((v - lo) / (hi - lo)).clamp(0.0, 1.0);
            if t.is_nan() {
                0
            } else {
                (t * 255.0).round() as u8
            }
        })
        .collect();
    let mut enc = png::Encoder::new(w, n2 as u32, n1 as u32);
    enc.set_color(png::ColorType::Grayscale);
    enc.set_depth(png::BitDepth::Eight);
    let mut writer = enc.write_header().map_err(|e| Error::Format(e.to_string()))?;
    writer.write_image_data(&pixels).map_err(|e| Error::Format(e.to_string()))?;
    writer.finish().map_err(|e| Error::Format(e.to_string()))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn decodes_to_the_window_mapping() {
        let a = ndarray::Array2::from_shape_fn((3, 5), |(i, j)| (i * 5 + j) as f64 * 10.0 - 20.0);
        let mut buf = Vec::new();
        write_png(&mut buf, a.view(), 0.0, 100.0).unwrap();
        let dec = png::Decoder::new(std::io::Cursor::new(buf));
        let mut reader = dec.read_info().unwrap();
        let mut out = vec![0; reader.output_buffer_size().unwrap()];
        let info = reader.next_frame(&mut out).unwrap();
        assert_eq!((info.width, info.height), (5, 3));
        assert_eq!(&out[..4], &[0, 0, 0, 26]);
        assert_eq!(out[14], 255);
        assert!(write_png(Vec::new(), a.view(), 1.0, 1.0).is_err());
    }
}
