//! Ten parametric image recipes. Every draw randomises placement, size,
//! foreground/background intensity and a faint texture, so classes are not
//! separable by any fixed pixel template.

use crate::tensor::Rng;

pub const NUM_RECIPES: usize = 10;

pub const RECIPE_NAMES: [&str; NUM_RECIPES] = [
    "disk",
    "ring",
    "square",
    "hollow_square",
    "h_stripes",
    "v_stripes",
    "d_stripes",
    "cross",
    "checker",
    "two_blobs",
];

struct Canvas<'a> {
    px: &'a mut [f64],
    size: usize,
    fg: f64,
}

impl Canvas<'_> {
    fn paint(&mut self, f: impl Fn(f64, f64) -> bool) {
        let n = self.size;
        for y in 0..n {
            for x in 0..n {
                if f(x as f64 + 0.5, y as f64 + 0.5) {
                    self.px[y * n + x] = self.fg;
                }
            }
        }
    }
}

/// Render one `size × size` single-channel image of class `label` into `px`.
pub fn render(label: usize, size: usize, rng: &mut Rng, px: &mut [f64]) {
    let s = size as f64;
    let bg = 0.05 + 0.25 * rng.uniform();
    let fg = 0.65 + 0.35 * rng.uniform();
    px.fill(bg);
    let cx = s * (0.3 + 0.4 * rng.uniform());
    let cy = s * (0.3 + 0.4 * rng.uniform());
    let r = s * (0.18 + 0.12 * rng.uniform());
    let period = 3.0 + 4.0 * rng.uniform();
    let phase = period * rng.uniform();
    let mut c = Canvas { px, size, fg };
    match label % NUM_RECIPES {
        0 => c.paint(|x, y| (x - cx).hypot(y - cy) <= r),
        1 => {
            let w = 1.5 + rng.uniform();
            c.paint(|x, y| ((x - cx).hypot(y - cy) - r).abs() <= w / 2.0)
        }
        2 => c.paint(|x, y| (x - cx).abs() <= r && (y - cy).abs() <= r),
        3 => {
            let w = 1.5 + rng.uniform();
            c.paint(|x, y| {
                let m = (x - cx).abs().max((y - cy).abs());
                m <= r && m >= r - w
            })
        }
        4 => c.paint(|_, y| (y + phase).rem_euclid(period) < period / 2.0),
        5 => c.paint(|x, _| (x + phase).rem_euclid(period) < period / 2.0),
        6 => {
            let dir = if rng.uniform() < 0.5 { 1.0 } else { -1.0 };
            c.paint(|x, y| (x + dir * y + phase).rem_euclid(period * 1.4) < period * 0.7)
        }
        7 => {
            let w = 2.0 + 2.0 * rng.uniform();
            c.paint(|x, y| ((x - cx).abs() <= w / 2.0 && (y - cy).abs() <= r) || ((y - cy).abs() <= w / 2.0 && (x - cx).abs() <= r))
        }
        8 => {
            let cell = 3.0 + 3.0 * rng.uniform();
            let ox = cell * rng.uniform();
            let oy = cell * rng.uniform();
            c.paint(|x, y| (((x + ox) / cell).floor() as i64 + ((y + oy) / cell).floor() as i64).rem_euclid(2) == 0)
        }
        _ => {
            let r2 = r * 0.6;
            let ang = std::f64::consts::TAU * rng.uniform();
            let d = r * 1.1;
            let (ax, ay) = (s / 2.0 + d * ang.cos(), s / 2.0 + d * ang.sin());
            let (bx, by) = (s / 2.0 - d * ang.cos(), s / 2.0 - d * ang.sin());
            c.paint(|x, y| (x - ax).hypot(y - ay) <= r2 || (x - bx).hypot(y - by) <= r2)
        }
    }
    for v in px.iter_mut() {
        *v = (*v + 0.03 * rng.normal()).clamp(0.0, 1.0);
    }
}
