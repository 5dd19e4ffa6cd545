//! Deterministic PNG rendering of an annotated image: a neutral background
//! with every object drawn as a filled, outlined box, largest first.

use image::{ImageEncoder, Rgb, RgbImage};
use pointqa::ImageAnnotation;

const BACKGROUND: Rgb<u8> = Rgb([236, 236, 232]);

fn named(color: &str) -> Option<Rgb<u8>> {
    Some(Rgb(match color {
        "red" => [200, 40, 40],
        "blue" => [40, 80, 200],
        "green" => [40, 160, 70],
        "yellow" => [230, 200, 40],
        "white" => [250, 250, 250],
        "black" => [25, 25, 25],
        "gray" | "grey" => [128, 128, 128],
        "brown" => [120, 80, 40],
        "orange" => [240, 140, 30],
        "pink" => [240, 150, 190],
        "purple" => [130, 60, 160],
        _ => return None,
    }))
}

/// FNV-1a, so class colors do not depend on the standard hasher.
fn fnv(s: &str) -> u32 {
    s.bytes().fold(0x811c_9dc5, |h, b| (h ^ b as u32).wrapping_mul(0x0100_0193))
}

fn object_color(names: &[String], attributes: &[String]) -> Rgb<u8> {
    attributes.iter().find_map(|a| named(a)).unwrap_or_else(|| {
        let h = fnv(names.first().map_or("", String::as_str)).to_le_bytes();
        // keep class colors mid-tone so outlines stay visible
        Rgb([64 + h[0] / 2, 64 + h[1] / 2, 64 + h[2] / 2])
    })
}

fn darker(c: Rgb<u8>) -> Rgb<u8> {
    Rgb(c.0.map(|v| v / 2))
}

pub fn rasterize(img: &ImageAnnotation) -> Result<Vec<u8>, image::ImageError> {
    let (w, h) = (img.width.max(1), img.height.max(1));
    let mut canvas = RgbImage::from_pixel(w, h, BACKGROUND);
    let mut objects: Vec<_> = img.objects.iter().collect();
    objects.sort_by(|a, b| b.bbox.area().total_cmp(&a.bbox.area()));
    for o in objects {
        let fill = object_color(&o.names, &o.attributes);
        let edge = darker(fill);
        let x0 = o.bbox.x.max(0.0) as u32;
        let y0 = o.bbox.y.max(0.0) as u32;
        let x1 = (o.bbox.right().ceil() as u32).min(w);
        let y1 = (o.bbox.bottom().ceil() as u32).min(h);
        for y in y0..y1 {
            for x in x0..x1 {
                let border = x == x0 || y == y0 || x + 1 == x1 || y + 1 == y1;
                canvas.put_pixel(x, y, if border { edge } else { fill });
            }
        }
    }
    let mut out = Vec::new();
    image::codecs::png::PngEncoder::new(&mut out).write_image(canvas.as_raw(), w, h, image::ExtendedColorType::Rgb8)?;
    Ok(out)
}
