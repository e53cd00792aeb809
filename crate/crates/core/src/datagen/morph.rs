//! Euclidean distance transform, disk erosion and Gaussian blur.

/// Squared Euclidean distance from every pixel to the nearest pixel where
/// `target` is true (infinite when there is none).
pub fn squared_distance_to(target: &[bool], height: usize, width: usize) -> Vec<f64> {
    let mut f: Vec<f64> = target.iter().map(|&t| if t { 0.0 } else { f64::INFINITY }).collect();
    let mut col = vec![0.0; height];
    let mut out = vec![0.0; height.max(width)];
    for x in 0..width {
        for y in 0..height {
            col[y] = f[y * width + x];
        }
        edt_1d(&col, &mut out[..height]);
        for y in 0..height {
            f[y * width + x] = out[y];
        }
    }
    for y in 0..height {
        let row = f[y * width..(y + 1) * width].to_vec();
        edt_1d(&row, &mut out[..width]);
        f[y * width..(y + 1) * width].copy_from_slice(&out[..width]);
    }
    f
}

/// Lower envelope of parabolas (Felzenszwalb and Huttenlocher).
fn edt_1d(f: &[f64], d: &mut [f64]) {
    let n = f.len();
    let finite: Vec<usize> = (0..n).filter(|&q| f[q].is_finite()).collect();
    if finite.is_empty() {
        d.iter_mut().for_each(|v| *v = f64::INFINITY);
        return;
    }
    let mut v = Vec::with_capacity(finite.len());
    let mut z: Vec<f64> = Vec::with_capacity(finite.len() + 1);
    v.push(finite[0]);
    z.push(f64::NEG_INFINITY);
    z.push(f64::INFINITY);
    for &q in &finite[1..] {
        loop {
            let p = *v.last().expect("non-empty");
            let s = ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64)) / (2.0 * (q as f64 - p as f64));
            if s <= z[v.len() - 1] {
                v.pop();
                z.pop();
                if v.is_empty() {
                    v.push(q);
                    z.push(f64::INFINITY);
                    break;
                }
            } else {
                *z.last_mut().expect("non-empty") = s;
                v.push(q);
                z.push(f64::INFINITY);
                break;
            }
        }
    }
    let mut k = 0;
    for (q, out) in d.iter_mut().enumerate().take(n) {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let p = v[k];
        let dq = q as f64 - p as f64;
        *out = dq * dq + f[p];
    }
}

/// Erosion of `set` by a closed disk of radius `r`: a pixel survives when
/// every pixel within distance `r` is in the set. Pixels beyond the frame
/// do not count against the set.
pub fn erode(set: &[bool], height: usize, width: usize, r: f64) -> Vec<bool> {
    let outside: Vec<bool> = set.iter().map(|&s| !s).collect();
    let d2 = squared_distance_to(&outside, height, width);
    d2.iter().map(|&d| d > r * r).collect()
}

/// Separable Gaussian blur of one plane with clamped borders.
pub fn gaussian_blur(plane: &[f32], height: usize, width: usize, sigma: f32) -> Vec<f32> {
    if sigma <= 0.0 {
        return plane.to_vec();
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let kernel: Vec<f32> = (-radius..=radius)
        .map(|i| (-(i * i) as f32 / (2.0 * sigma * sigma)).exp())
        .collect();
    let norm: f32 = kernel.iter().sum();
    let kernel: Vec<f32> = kernel.iter().map(|k| k / norm).collect();
    let clamp = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
    let mut tmp = vec![0.0f32; plane.len()];
    for y in 0..height {
        for x in 0..width {
            tmp[y * width + x] = kernel
                .iter()
                .enumerate()
                .map(|(k, w)| w * plane[y * width + clamp(x as isize + k as isize - radius, width)])
                .sum();
        }
    }
    let mut out = vec![0.0f32; plane.len()];
    for y in 0..height {
        for x in 0..width {
            out[y * width + x] = kernel
                .iter()
                .enumerate()
                .map(|(k, w)| w * tmp[clamp(y as isize + k as isize - radius, height) * width + x])
                .sum();
        }
    }
    out
}
