//! 8-bit RGB frames as binary PPM or PNG, chosen by file extension.

use std::path::Path;

use image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
use image::{ExtendedColorType, ImageEncoder, ImageFormat, RgbImage};
use morel_core::image::{Frame8, Image};

use crate::error::{io_err, Error, Result};

fn image_err(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::Image { path: path.to_path_buf(), reason: e.to_string() }
}

pub fn write_frame(path: &Path, frame: &Frame8) -> Result<()> {
    let file = std::fs::File::create(path).map_err(io_err(path))?;
    let w = std::io::BufWriter::new(file);
    let (width, height) = (frame.width as u32, frame.height as u32);
    match path.extension().and_then(|e| e.to_str()) {
        Some("png") => image::codecs::png::PngEncoder::new(w)
            .write_image(&frame.data, width, height, ExtendedColorType::Rgb8)
            .map_err(|e| image_err(path, e)),
        _ => PnmEncoder::new(w)
            .with_subtype(PnmSubtype::Pixmap(SampleEncoding::Binary))
            .write_image(&frame.data, width, height, ExtendedColorType::Rgb8)
            .map_err(|e| image_err(path, e)),
    }
}

pub fn write_image(path: &Path, img: &Image) -> Result<()> {
    write_frame(path, &Frame8::from_image(img))
}

pub fn read_frame(path: &Path) -> Result<Frame8> {
    if !path.is_file() {
        return Err(Error::NotFound(path.display().to_string()));
    }
    let format = match path.extension().and_then(|e| e.to_str()) {
        Some("png") => ImageFormat::Png,
        _ => ImageFormat::Pnm,
    };
    let bytes = std::fs::read(path).map_err(io_err(path))?;
    let img: RgbImage = image::load_from_memory_with_format(&bytes, format).map_err(|e| image_err(path, e))?.to_rgb8();
    Ok(Frame8 { width: img.width() as usize, height: img.height() as usize, data: img.into_raw() })
}
