//! Lossless label-map storage as 16-bit RGB PNG: R holds the semantic class
//! (high byte zero), G the instance id, B the part id. Void pixels are
//! (0, 0, 0).

use std::path::Path;

use image::{ImageBuffer, Rgb};
use thiserror::Error;

use crate::label::{encode_label, LabelError, PanopticPartLabel, PanopticPartMap};

#[derive(Debug, Error)]
pub enum LabelMapError {
    #[error(transparent)]
    Label(#[from] LabelError),
    #[error("decode error: {0}")]
    Decode(String),
    #[error(transparent)]
    Image(#[from] image::ImageError),
}

pub fn write_labelmap_png(
    map: &PanopticPartMap,
    path: impl AsRef<Path>,
) -> Result<(), LabelMapError> {
    let (h, w) = map.shape();
    let mut img: ImageBuffer<Rgb<u16>, Vec<u16>> = ImageBuffer::new(w as u32, h as u32);
    for (i, label) in map.labels().enumerate() {
        // re-encode to surface overflow on maps built from raw values
        let _ = encode_label(label)?;
        let px = match label {
            PanopticPartLabel::Void => Rgb([0, 0, 0]),
            PanopticPartLabel::Segment { semantic, instance, part } => {
                Rgb([semantic as u16, instance as u16, part as u16])
            }
        };
        img.put_pixel((i % w) as u32, (i / w) as u32, px);
    }
    img.save_with_format(path, image::ImageFormat::Png)?;
    Ok(())
}

pub fn read_labelmap_png(path: impl AsRef<Path>) -> Result<PanopticPartMap, LabelMapError> {
    let img = image::open(path)?.into_rgb16();
    let (w, h) = img.dimensions();
    let mut map = PanopticPartMap::new_void(h as usize, w as usize);
    for (x, y, px) in img.enumerate_pixels() {
        let [r, g, b] = px.0;
        if (r, g, b) == (0, 0, 0) {
            continue;
        }
        if r > 0xff {
            return Err(LabelMapError::Decode(format!(
                "semantic value {r} at ({y},{x}) exceeds 8 bits"
            )));
        }
        if b > 0xff {
            return Err(LabelMapError::Decode(format!(
                "part value {b} at ({y},{x}) exceeds 8 bits"
            )));
        }
        map.set(
            y as usize,
            x as usize,
            PanopticPartLabel::segment(r as u32, g as u32, b as u32),
        )?;
    }
    Ok(map)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn void_map_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("void.png");
        let map = PanopticPartMap::new_void(3, 5);
        write_labelmap_png(&map, &path).unwrap();
        assert_eq!(read_labelmap_png(&path).unwrap(), map);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]
        #[test]
        fn random_map_roundtrip(
            labels in proptest::collection::vec((0u32..256, 0u32..65_536, 0u32..256), 12)
        ) {
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("map.png");
            let mut map = PanopticPartMap::new_void(3, 4);
            for (i, &(s, id, p)) in labels.iter().enumerate() {
                map.set(i / 4, i % 4, PanopticPartLabel::segment(s, id, p)).unwrap();
            }
            write_labelmap_png(&map, &path).unwrap();
            prop_assert_eq!(read_labelmap_png(&path).unwrap(), map);
        }
    }
}
