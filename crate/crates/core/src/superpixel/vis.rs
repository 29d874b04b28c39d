//! Colour-coded rendering of a label map.

use super::slic::SuperpixelLabelMap;

fn hsv(h: f64, s: f64, v: f64) -> [u8; 3] {
    let i = (h * 6.0).floor();
    let f = h * 6.0 - i;
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - f * s), v * (1.0 - (1.0 - f) * s));
    let (r, g, b) = match i as i64 % 6 {
        0 => (v, t, p),
        1 => (q, v, p),
        2 => (p, v, t),
        3 => (p, q, v),
        4 => (t, p, v),
        _ => (v, p, q),
    };
    [r, g, b].map(|c| (c * 255.0).round() as u8)
}

/// Stable colour of label `l`; golden-ratio hue steps keep neighbours apart.
pub fn label_color(l: u32) -> [u8; 3] {
    let h = (l as f64 * 0.618_033_988_749_895).fract();
    hsv(h, 0.65, 0.95)
}

/// Interleaved RGB pixels: one flat colour per superpixel, boundaries black.
pub fn label_visualization(map: &SuperpixelLabelMap) -> Vec<u8> {
    let (h, w) = (map.height, map.width);
    let mut px = Vec::with_capacity(h * w * 3);
    for y in 0..h {
        for x in 0..w {
            let l = map.label(y, x);
            let edge = (x + 1 < w && map.label(y, x + 1) != l) || (y + 1 < h && map.label(y + 1, x) != l);
            px.extend_from_slice(&if edge { [0, 0, 0] } else { label_color(l) });
        }
    }
    px
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::superpixel::Source;

    #[test]
    fn boundaries_are_black() {
        let map = SuperpixelLabelMap::from_labels(1, 3, vec![0, 1, 1], Source::Rgb).unwrap();
        let px = label_visualization(&map);
        assert_eq!(&px[0..3], &[0, 0, 0]);
        assert_eq!(&px[3..6], &label_color(1));
        assert_ne!(label_color(0), label_color(1));
    }
}
