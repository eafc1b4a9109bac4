//! Qualitative rendering of a panoptic-part map: one base hue per semantic
//! class, brightness steps per part, and per-instance outlines. Void is
//! black. Output is deterministic.

use std::path::Path;

use image::{ImageBuffer, Rgb, RgbImage};

use crate::label::{PanopticPartLabel, PanopticPartMap};
use crate::taxonomy::ClassTaxonomy;

fn hsv_to_rgb(h: f32, s: f32, v: f32) -> [u8; 3] {
    let c = v * s;
    let hp = (h % 360.0) / 60.0;
    let x = c * (1.0 - (hp % 2.0 - 1.0).abs());
    let (r, g, b) = match hp as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [
        ((r + m) * 255.0).round() as u8,
        ((g + m) * 255.0).round() as u8,
        ((b + m) * 255.0).round() as u8,
    ]
}

fn class_hue(class_id: u32) -> f32 {
    // golden-angle spacing keeps nearby ids visually distinct
    (class_id as f32 * 137.508) % 360.0
}

fn body_color(semantic: u32, part: u32, max_parts: u32) -> [u8; 3] {
    let value = if max_parts == 0 {
        0.8
    } else {
        0.45 + 0.5 * part as f32 / max_parts.max(1) as f32
    };
    hsv_to_rgb(class_hue(semantic), 0.75, value)
}

fn outline_color(semantic: u32, instance: u32) -> [u8; 3] {
    // same hue family as the class, shifted per instance id
    hsv_to_rgb(class_hue(semantic) + 25.0 * (1 + (instance - 1) % 8) as f32, 0.9, 1.0)
}

pub fn render(map: &PanopticPartMap, taxonomy: &ClassTaxonomy) -> RgbImage {
    let (h, w) = map.shape();
    let mut img: RgbImage = ImageBuffer::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let color = match map.get(y, x) {
                PanopticPartLabel::Void => [0, 0, 0],
                PanopticPartLabel::Segment { semantic, instance, part } => {
                    if instance != 0 && is_instance_boundary(map, y, x) {
                        outline_color(semantic, instance)
                    } else {
                        body_color(semantic, part, taxonomy.part_count(semantic) as u32)
                    }
                }
            };
            img.put_pixel(x as u32, y as u32, Rgb(color));
        }
    }
    img
}

/// A pixel is on an instance outline when a 4-neighbor (or the canvas edge)
/// carries a different `(semantic, instance)`.
fn is_instance_boundary(map: &PanopticPartMap, y: usize, x: usize) -> bool {
    let (h, w) = map.shape();
    let this = map.encoded_at(y, x) & !0xffu32;
    let differs = |ny: i64, nx: i64| -> bool {
        if ny < 0 || nx < 0 || ny >= h as i64 || nx >= w as i64 {
            return true;
        }
        (map.encoded_at(ny as usize, nx as usize) & !0xffu32) != this
    };
    differs(y as i64 - 1, x as i64)
        || differs(y as i64 + 1, x as i64)
        || differs(y as i64, x as i64 - 1)
        || differs(y as i64, x as i64 + 1)
}

pub fn render_to_png(
    map: &PanopticPartMap,
    taxonomy: &ClassTaxonomy,
    path: impl AsRef<Path>,
) -> Result<(), image::ImageError> {
    render(map, taxonomy).save_with_format(path, image::ImageFormat::Png)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures;

    fn fill(m: &mut PanopticPartMap, y0: usize, y1: usize, x0: usize, x1: usize, s: u32, id: u32) {
        for y in y0..y1 {
            for x in x0..x1 {
                m.set(y, x, PanopticPartLabel::segment(s, id, 0)).unwrap();
            }
        }
    }

    #[test]
    fn void_map_renders_black() {
        let t = fixtures::cpp();
        let img = render(&PanopticPartMap::new_void(4, 4), &t);
        assert!(img.pixels().all(|p| p.0 == [0, 0, 0]));
    }

    #[test]
    fn rendering_is_deterministic() {
        let t = fixtures::cpp();
        let mut map = PanopticPartMap::new_void(8, 8);
        fill(&mut map, 0, 8, 0, 8, 1, 0);
        fill(&mut map, 1, 4, 1, 4, 12, 1);
        let a = render(&map, &t);
        let b = render(&map, &t);
        assert_eq!(a.as_raw(), b.as_raw());
    }

    #[test]
    fn two_instances_same_class_share_hue_but_not_outline() {
        let t = fixtures::cpp();
        let mut map = PanopticPartMap::new_void(8, 8);
        fill(&mut map, 0, 8, 0, 8, 1, 0);
        fill(&mut map, 1, 4, 0, 3, 12, 1);
        fill(&mut map, 1, 4, 5, 8, 12, 2);
        let img = render(&map, &t);
        // interior pixels share the class color
        assert_eq!(img.get_pixel(1, 2), img.get_pixel(6, 2));
        // outline pixels differ between the two instances
        assert_ne!(img.get_pixel(0, 1), img.get_pixel(5, 1));
    }
}
