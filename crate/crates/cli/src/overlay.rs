use viact_core::geometry::Frame;

/// Blue (0) through green to red (1).
fn heat(v: f32) -> [u8; 3] {
    let v = v.clamp(0.0, 1.0);
    let r = (2.0 * v - 1.0).max(0.0);
    let b = (1.0 - 2.0 * v).max(0.0);
    let g = 1.0 - r - b;
    [r, g, b].map(|c| (c * 255.0).round() as u8)
}

/// Binary PPM of `frame` in gray with a 3x3 marker per point, colored by
/// its attention value.
pub fn overlay_ppm(frame: Frame<'_>, points: &[(f32, f32)], values: &[f32]) -> Vec<u8> {
    let (h, w) = (frame.height, frame.width);
    let mut rgb: Vec<u8> = frame
        .data
        .iter()
        .flat_map(|&v| {
            let g = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
            [g, g, g]
        })
        .collect();
    for (&(x, y), &v) in points.iter().zip(values) {
        let (cx, cy) = (x.round() as i64, y.round() as i64);
        let color = heat(v);
        for dy in -1..=1 {
            for dx in -1..=1 {
                let (px, py) = (cx + dx, cy + dy);
                if px >= 0 && py >= 0 && (px as usize) < w && (py as usize) < h {
                    let i = 3 * (py as usize * w + px as usize);
                    rgb[i..i + 3].copy_from_slice(&color);
                }
            }
        }
    }
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    out.extend(rgb);
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn heat_endpoints() {
        assert_eq!(heat(0.0), [0, 0, 255]);
        assert_eq!(heat(0.5), [0, 255, 0]);
        assert_eq!(heat(1.0), [255, 0, 0]);
    }

    #[test]
    fn marker_clipped_at_border() {
        let data = vec![0.5f32; 16];
        let frame = Frame { data: &data, height: 4, width: 4 };
        let ppm = overlay_ppm(frame, &[(0.0, 0.0)], &[1.0]);
        let header = b"P6\n4 4\n255\n".len();
        assert_eq!(ppm.len(), header + 48);
        let px = |x: usize, y: usize| &ppm[header + 3 * (y * 4 + x)..header + 3 * (y * 4 + x) + 3];
        assert_eq!(px(0, 0), &[255, 0, 0]);
        assert_eq!(px(1, 1), &[255, 0, 0]);
        assert_eq!(px(2, 2), &[128, 128, 128]);
    }
}
