//! Independent, deliberately plain Canny: explicit padded arrays, a full 5x5
//! kernel, 2-D Sobel masks, angle-based direction buckets and fixpoint
//! hysteresis.

fn mirror(i: i64, n: i64) -> usize {
    let mut i = i;
    loop {
        if i < 0 {
            i = -i - 1;
        } else if i >= n {
            i = 2 * n - 1 - i;
        } else {
            return i as usize;
        }
    }
}

fn pad(src: &[Vec<i64>], p: i64) -> Vec<Vec<i64>> {
    let h = src.len() as i64;
    let w = src[0].len() as i64;
    (-p..h + p)
        .map(|y| (-p..w + p).map(|x| src[mirror(y, h)][mirror(x, w)]).collect())
        .collect()
}

pub fn reference_canny(pixels: &[Vec<u8>], low: u8, high: u8, sigma: f64) -> Vec<Vec<bool>> {
    let h = pixels.len();
    let w = pixels[0].len();
    let weights: Vec<i64> = (-2i32..=2)
        .map(|i| (1024.0 * (-(f64::from(i * i)) / (2.0 * sigma * sigma)).exp()).round() as i64)
        .collect();
    let mut kernel = [[0i64; 5]; 5];
    for i in 0..5 {
        for j in 0..5 {
            kernel[i][j] = weights[i] * weights[j];
        }
    }
    let norm2: i64 = kernel.iter().flatten().sum();

    let img: Vec<Vec<i64>> = pixels.iter().map(|r| r.iter().map(|&v| i64::from(v)).collect()).collect();
    let padded = pad(&img, 2);
    let mut blur = vec![vec![0i64; w]; h];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0;
            for i in 0..5 {
                for j in 0..5 {
                    acc += kernel[i][j] * padded[y + i][x + j];
                }
            }
            blur[y][x] = acc;
        }
    }

    let sobel_x = [[-1i64, 0, 1], [-2, 0, 2], [-1, 0, 1]];
    let sobel_y = [[-1i64, -2, -1], [0, 0, 0], [1, 2, 1]];
    let pb = pad(&blur, 1);
    let mut mag = vec![vec![0f64; w]; h];
    let mut bucket = vec![vec![0u8; w]; h];
    for y in 0..h {
        for x in 0..w {
            let (mut gx, mut gy) = (0i64, 0i64);
            for i in 0..3 {
                for j in 0..3 {
                    gx += sobel_x[i][j] * pb[y + i][x + j];
                    gy += sobel_y[i][j] * pb[y + i][x + j];
                }
            }
            let (fx, fy) = (gx as f64, gy as f64);
            mag[y][x] = (fx * fx + fy * fy).sqrt() / norm2 as f64;
            let angle = fy.abs().atan2(fx.abs()).to_degrees();
            bucket[y][x] = if angle <= 22.5 {
                0
            } else if angle > 67.5 {
                90
            } else if (gx > 0) == (gy > 0) {
                45
            } else {
                135
            };
        }
    }

    let at = |m: &Vec<Vec<f64>>, x: i64, y: i64| -> f64 {
        if x < 0 || y < 0 || x >= w as i64 || y >= h as i64 {
            0.0
        } else {
            m[y as usize][x as usize]
        }
    };
    let mut thin = vec![vec![0f64; w]; h];
    for y in 0..h {
        for x in 0..w {
            let m = mag[y][x];
            if m == 0.0 {
                continue;
            }
            let (xi, yi) = (x as i64, y as i64);
            let (a, b) = match bucket[y][x] {
                0 => (at(&mag, xi - 1, yi), at(&mag, xi + 1, yi)),
                90 => (at(&mag, xi, yi - 1), at(&mag, xi, yi + 1)),
                45 => (at(&mag, xi - 1, yi - 1), at(&mag, xi + 1, yi + 1)),
                _ => (at(&mag, xi + 1, yi - 1), at(&mag, xi - 1, yi + 1)),
            };
            if m > a && m >= b {
                thin[y][x] = m;
            }
        }
    }

    let mut strong: Vec<Vec<bool>> = thin.iter().map(|r| r.iter().map(|&m| m > f64::from(high)).collect()).collect();
    let weak: Vec<Vec<bool>> = thin.iter().map(|r| r.iter().map(|&m| m > f64::from(low)).collect()).collect();
    loop {
        let mut changed = false;
        for y in 0..h {
            for x in 0..w {
                if strong[y][x] || !weak[y][x] {
                    continue;
                }
                let touches = (-1i64..=1).any(|dy| {
                    (-1i64..=1).any(|dx| {
                        let (nx, ny) = (x as i64 + dx, y as i64 + dy);
                        nx >= 0 && ny >= 0 && nx < w as i64 && ny < h as i64 && strong[ny as usize][nx as usize]
                    })
                });
                if touches {
                    strong[y][x] = true;
                    changed = true;
                }
            }
        }
        if !changed {
            return strong;
        }
    }
}
