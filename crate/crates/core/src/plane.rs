/// Single-channel `height x width` grid of `f32`, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Plane {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl Plane {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Self {
        assert_eq!(data.len(), height * width, "plane data length");
        Self { height, width, data }
    }

    pub fn filled(height: usize, width: usize, value: f32) -> Self {
        Self::new(height, width, vec![value; height * width])
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                data.push(f(y, x));
            }
        }
        Self { height, width, data }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> f32 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, v: f32) {
        self.data[y * self.width + x] = v;
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    /// Copy of the `h x w` window with top-left corner `(y, x)`.
    pub fn crop(&self, y: usize, x: usize, h: usize, w: usize) -> Plane {
        assert!(y + h <= self.height && x + w <= self.width, "crop outside plane");
        Plane::from_fn(h, w, |r, c| self.get(y + r, x + c))
    }

    /// Bilinear resize with corner-aligned sampling: output pixel `i` samples
    /// source coordinate `i * (in - 1) / (out - 1)`, so the four corners map
    /// exactly onto the source corners.
    pub fn resize_bilinear(&self, out_h: usize, out_w: usize) -> Plane {
        let ys = sample_coords(self.height, out_h);
        let xs = sample_coords(self.width, out_w);
        Plane::from_fn(out_h, out_w, |r, c| {
            let (y0, y1, fy) = ys[r];
            let (x0, x1, fx) = xs[c];
            let top = self.get(y0, x0) * (1.0 - fx) + self.get(y0, x1) * fx;
            let bottom = self.get(y1, x0) * (1.0 - fx) + self.get(y1, x1) * fx;
            top * (1.0 - fy) + bottom * fy
        })
    }

    pub fn scale(&mut self, factor: f32) {
        self.data.iter_mut().for_each(|v| *v *= factor);
    }
}

/// Geometric scale of a corner-aligned resize from `input` to `output` pixels.
pub fn resize_ratio(input: usize, output: usize) -> f32 {
    if input <= 1 || output <= 1 {
        output as f32 / input as f32
    } else {
        (output - 1) as f32 / (input - 1) as f32
    }
}

fn sample_coords(input: usize, output: usize) -> Vec<(usize, usize, f32)> {
    (0..output)
        .map(|i| {
            let src = if output <= 1 || input <= 1 {
                0.0
            } else {
                i as f64 * (input - 1) as f64 / (output - 1) as f64
            };
            let lo = (src.floor() as usize).min(input - 1);
            let hi = (lo + 1).min(input - 1);
            (lo, hi, (src - lo as f64) as f32)
        })
        .collect()
}
