//! Straight-loop reference implementations, computed in f64.

pub fn conv2d(
    x: &[f64],
    [n, c, h, w]: [usize; 4],
    k: &[f64],
    [m, _, kh, kw]: [usize; 4],
    bias: &[f64],
    stride: [usize; 2],
    pad: [usize; 2],
) -> (Vec<f64>, [usize; 4]) {
    let oh = (h + 2 * pad[0] - kh) / stride[0] + 1;
    let ow = (w + 2 * pad[1] - kw) / stride[1] + 1;
    let mut out = vec![0.0; n * m * oh * ow];
    for b in 0..n {
        for o in 0..m {
            for i in 0..oh {
                for j in 0..ow {
                    let mut acc = bias[o];
                    for ci in 0..c {
                        for u in 0..kh {
                            for v in 0..kw {
                                let y = (i * stride[0] + u) as isize - pad[0] as isize;
                                let xx = (j * stride[1] + v) as isize - pad[1] as isize;
                                if y < 0 || xx < 0 || y >= h as isize || xx >= w as isize {
                                    continue;
                                }
                                let xi = ((b * c + ci) * h + y as usize) * w + xx as usize;
                                let ki = ((o * c + ci) * kh + u) * kw + v;
                                acc += x[xi] * k[ki];
                            }
                        }
                    }
                    out[((b * m + o) * oh + i) * ow + j] = acc;
                }
            }
        }
    }
    (out, [n, m, oh, ow])
}

pub fn maxpool2d(
    x: &[f64],
    [n, c, h, w]: [usize; 4],
    window: [usize; 2],
    stride: [usize; 2],
) -> (Vec<f64>, [usize; 4]) {
    let oh = (h - window[0]) / stride[0] + 1;
    let ow = (w - window[1]) / stride[1] + 1;
    let mut out = Vec::with_capacity(n * c * oh * ow);
    for p in 0..n * c {
        for i in 0..oh {
            for j in 0..ow {
                let mut best = f64::NEG_INFINITY;
                for u in 0..window[0] {
                    for v in 0..window[1] {
                        best = best.max(x[(p * h + i * stride[0] + u) * w + j * stride[1] + v]);
                    }
                }
                out.push(best);
            }
        }
    }
    (out, [n, c, oh, ow])
}

pub fn gap(x: &[f64], [n, c, h, w]: [usize; 4]) -> Vec<f64> {
    (0..n * c)
        .map(|p| x[p * h * w..(p + 1) * h * w].iter().sum::<f64>() / (h * w) as f64)
        .collect()
}

pub fn dense(x: &[f64], [n, d]: [usize; 2], wt: &[f64], m: usize, bias: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    for b in 0..n {
        for o in 0..m {
            let mut acc = bias[o];
            for i in 0..d {
                acc += x[b * d + i] * wt[o * d + i];
            }
            out[b * m + o] = acc;
        }
    }
    out
}
