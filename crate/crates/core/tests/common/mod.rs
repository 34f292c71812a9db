//! Helpers shared by the integration tests: a finite-difference gradient
//! checker, an FFT frequency-peak texture classifier, and a warped
//! checkerboard for rectification.
#![allow(dead_code)]

use rand::Rng as _;
use rustfft::{num_complex::Complex, FftPlanner};
use vistafuse::autodiff::{ParamStore, Tape, Tensor, Var};
use vistafuse::dataset::{homography, TextureImage};
use vistafuse::seed::{self, Rng};
use vistafuse::synthgen::{ClassTable, Milling, GRANULARITIES, PIXEL_PITCH_UM};

pub const FD_STEP: f64 = 1e-5;
pub const FD_REL_TOL: f64 = 1e-4;
/// Gradients this small are compared absolutely; relative error is noise there.
pub const FD_ABS_FLOOR: f64 = 1e-8;

pub fn random_tensor(shape: &[usize], lo: f64, hi: f64, rng: &mut Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// Outcome of one gradient check.
#[derive(Debug, Clone, Copy, Default)]
pub struct GradCheck {
    pub checked: usize,
    pub failed: usize,
    /// Partials whose stencil straddles a kink (ReLU at zero, a max-pool or
    /// max-fusion tie); the function is not differentiable there.
    pub kinks: usize,
    /// Largest relative error over partials with magnitude above 1e-4.
    pub worst_rel: f64,
}

impl GradCheck {
    pub fn merge(&mut self, other: GradCheck) {
        self.checked += other.checked;
        self.failed += other.failed;
        self.kinks += other.kinks;
        self.worst_rel = self.worst_rel.max(other.worst_rel);
    }

    /// No mismatches, and kinks are rare enough not to hide anything.
    pub fn ok(&self) -> bool {
        self.failed == 0 && self.checked > 0 && self.kinks * 100 <= self.checked
    }
}

type Forward<'a> = dyn Fn(&mut Tape, &ParamStore, &[Var]) -> Var + 'a;

/// Value of `sum(f(...) * proj)`, evaluated on a fresh tape.
fn project(tape: &mut Tape, out: Var, proj: &Tensor) -> Var {
    let p = tape.constant(proj.clone());
    let prod = tape.mul(out, p).unwrap();
    tape.sum(prod)
}

fn loss_value(store: &ParamStore, inputs: &[Tensor], f: &Forward, proj: &Tensor) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let out = f(&mut tape, store, &vars);
    let loss = project(&mut tape, out, proj);
    tape.value(loss)[0]
}

/// Compares reverse-mode gradients of `f` against central differences for
/// every input element and every parameter in `store`. The output of `f` is
/// reduced to a scalar with fixed random weights so that every output
/// element contributes.
pub fn gradcheck(store: &ParamStore, inputs: &[Tensor], f: &Forward, rng: &mut Rng) -> GradCheck {
    let shape = {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&mut tape, store, &vars);
        tape.shape(out).to_vec()
    };
    let proj = random_tensor(&shape, -1.0, 1.0, rng);

    let mut grads_store = store.clone();
    grads_store.zero_grad();
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(&t.clone().with_grad())).collect();
    let out = f(&mut tape, store, &vars);
    let loss = project(&mut tape, out, &proj);
    tape.backward(loss).unwrap();
    tape.export_grads(&mut grads_store).unwrap();

    let mut report = GradCheck::default();
    let base = loss_value(store, inputs, f, &proj);
    // (f(x+h), f(x-h)) -> compared partial
    let mut compare = |analytic: f64, plus: f64, minus: f64| {
        report.checked += 1;
        let (fwd, bwd) = ((plus - base) / FD_STEP, (base - minus) / FD_STEP);
        if (fwd - bwd).abs() > 1e-3 * fwd.abs().max(bwd.abs()).max(1.0) {
            report.kinks += 1;
            return;
        }
        let numeric = (plus - minus) / (2.0 * FD_STEP);
        let diff = (analytic - numeric).abs();
        let scale = analytic.abs().max(numeric.abs());
        if scale > 1e-4 {
            report.worst_rel = report.worst_rel.max(diff / scale);
        }
        if diff > FD_ABS_FLOOR && diff / scale > FD_REL_TOL {
            report.failed += 1;
        }
    };

    for (k, v) in vars.iter().enumerate() {
        let analytic = tape.grad(*v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; inputs[k].numel()]);
        for i in 0..inputs[k].numel() {
            let eval = |delta: f64| {
                let mut perturbed = inputs.to_vec();
                perturbed[k].data_mut()[i] += delta;
                loss_value(store, &perturbed, f, &proj)
            };
            compare(analytic[i], eval(FD_STEP), eval(-FD_STEP));
        }
    }
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let analytic = grads_store.get(id).grad().unwrap().to_vec();
        for i in 0..store.get(id).numel() {
            let eval = |delta: f64| {
                let mut s = store.clone();
                s.get_mut(id).data_mut()[i] += delta;
                loss_value(&s, inputs, f, &proj)
            };
            compare(analytic[i], eval(FD_STEP), eval(-FD_STEP));
        }
    }
    report
}

/// Spatial frequency (cycles/µm along rows, along columns) of the strongest
/// non-DC component of the image's gray levels.
pub fn spectral_peak(img: &TextureImage) -> (f64, f64) {
    let (h, w) = (img.height, img.width);
    let gray = img.gray();
    let mean = gray.iter().sum::<f64>() / gray.len() as f64;
    let mut buf: Vec<Complex<f64>> = gray.iter().map(|v| Complex::new(v - mean, 0.0)).collect();
    let mut planner = FftPlanner::new();
    let rows = planner.plan_fft_forward(w);
    for row in buf.chunks_exact_mut(w) {
        rows.process(row);
    }
    let cols = planner.plan_fft_forward(h);
    let mut col = vec![Complex::new(0.0, 0.0); h];
    for c in 0..w {
        for r in 0..h {
            col[r] = buf[r * w + c];
        }
        cols.process(&mut col);
        for r in 0..h {
            buf[r * w + c] = col[r];
        }
    }
    // skip the lowest bins: illumination gradients live there
    let near_dc = |k: usize, n: usize| k <= 1 || k == n - 1;
    let mut best = (0.0, 0, 0);
    for r in 0..h {
        for c in 0..w {
            if near_dc(r, h) && near_dc(c, w) {
                continue;
            }
            let m = buf[r * w + c].norm_sqr();
            if m > best.0 {
                best = (m, r, c);
            }
        }
    }
    let signed = |k: usize, n: usize| (if 2 * k > n { k as f64 - n as f64 } else { k as f64 }) / n as f64;
    let pitch = img.pixel_pitch.unwrap_or(PIXEL_PITCH_UM);
    (signed(best.1, h) / pitch[0], signed(best.2, w) / pitch[1])
}

/// Class predicted from the spectral peak alone: lay from the peak direction,
/// granularity from the nearest period on a log scale.
pub fn oracle_class(img: &TextureImage, table: &ClassTable) -> usize {
    let (fr, fc) = spectral_peak(img);
    let period = 1.0 / fr.hypot(fc);
    let angle = fc.abs().atan2(fr.abs()).to_degrees();
    // horizontal grooves vary along rows, vertical ones along columns
    let milling = if angle > 70.0 {
        Milling::H
    } else if angle < 20.0 {
        Milling::V
    } else {
        Milling::T
    };
    let g = (0..GRANULARITIES)
        .min_by(|&a, &b| {
            let da = (table.periods_um[a].ln() - period.ln()).abs();
            let db = (table.periods_um[b].ln() - period.ln()).abs();
            da.total_cmp(&db)
        })
        .unwrap();
    milling as usize * GRANULARITIES + g
}

/// A checkerboard of `cells` (rows, cols) photographed in perspective: the
/// board's corners land on `quad` (top-left, top-right, bottom-right,
/// bottom-left) in an image of `size`. Each pixel averages 4x4 subsamples.
pub fn warped_checkerboard(size: (usize, usize), quad: [(f64, f64); 4], cells: (usize, usize)) -> TextureImage {
    let unit = [(0.0, 0.0), (1.0, 0.0), (1.0, 1.0), (0.0, 1.0)];
    let to_unit = homography(quad, unit).unwrap();
    let mut pixels = Vec::with_capacity(size.0 * size.1 * 3);
    for r in 0..size.0 {
        for c in 0..size.1 {
            let mut acc = 0.0f64;
            for sy in 0..4 {
                for sx in 0..4 {
                    let x = c as f64 + (sx as f64 + 0.5) / 4.0;
                    let y = r as f64 + (sy as f64 + 0.5) / 4.0;
                    let (u, v) = to_unit.apply(x, y);
                    acc += if (0.0..1.0).contains(&u) && (0.0..1.0).contains(&v) {
                        let i = (v * cells.0 as f64).floor() as usize;
                        let j = (u * cells.1 as f64).floor() as usize;
                        if (i + j) % 2 == 0 { 230.0 } else { 25.0 }
                    } else {
                        128.0
                    };
                }
            }
            let g = (acc / 16.0).round() as u8;
            pixels.extend([g, g, g]);
        }
    }
    TextureImage::new(size.0, size.1, pixels).unwrap()
}

/// Interior grid intersections of a rectified `cells` checkerboard, located
/// by fitting a line through sub-pixel edge crossings along every grid line.
/// Coordinates are continuous (x along columns, y along rows), with pixel k
/// covering [k, k+1).
pub fn detect_grid(img: &TextureImage, cells: (usize, usize)) -> Vec<(f64, f64)> {
    let gray = img.gray();
    let (h, w) = (img.height, img.width);
    let at = |r: usize, c: usize| gray[r * w + c];
    let level = {
        let (lo, hi) = gray.iter().fold((f64::MAX, f64::MIN), |(a, b), &v| (a.min(v), b.max(v)));
        0.5 * (lo + hi)
    };
    let (cell_h, cell_w) = (h as f64 / cells.0 as f64, w as f64 / cells.1 as f64);
    // crossing between two samples along a scan line, as a continuous coordinate
    let crossing = |samples: &dyn Fn(usize) -> f64, guess: f64, n: usize, half: f64| -> Option<f64> {
        let lo = (guess - half).max(0.5) as usize;
        let hi = ((guess + half) as usize).min(n - 2);
        (lo..=hi).find_map(|k| {
            let (a, b) = (samples(k) - level, samples(k + 1) - level);
            (a * b < 0.0).then(|| k as f64 + 0.5 + a / (a - b))
        })
    };
    // x = a + b*y for each interior vertical line
    let vertical: Vec<(f64, f64)> = (1..cells.1)
        .map(|j| {
            let guess = j as f64 * cell_w;
            let pts: Vec<(f64, f64)> = (0..h)
                .filter(|&r| {
                    let frac = ((r as f64 + 0.5) / cell_h).fract();
                    (0.2..0.8).contains(&frac)
                })
                .filter_map(|r| crossing(&|k| at(r, k), guess, w, cell_w / 3.0).map(|x| (r as f64 + 0.5, x)))
                .collect();
            fit_line(&pts)
        })
        .collect();
    // y = a + b*x for each interior horizontal line
    let horizontal: Vec<(f64, f64)> = (1..cells.0)
        .map(|i| {
            let guess = i as f64 * cell_h;
            let pts: Vec<(f64, f64)> = (0..w)
                .filter(|&c| {
                    let frac = ((c as f64 + 0.5) / cell_w).fract();
                    (0.2..0.8).contains(&frac)
                })
                .filter_map(|c| crossing(&|k| at(k, c), guess, h, cell_h / 3.0).map(|y| (c as f64 + 0.5, y)))
                .collect();
            fit_line(&pts)
        })
        .collect();
    let mut out = Vec::new();
    for &(ya, yb) in &horizontal {
        for &(xa, xb) in &vertical {
            // x = xa + xb*y, y = ya + yb*x
            let y = (ya + yb * xa) / (1.0 - yb * xb);
            out.push((xa + xb * y, y));
        }
    }
    out
}

/// Least-squares `v = a + b*t` through `(t, v)` points.
fn fit_line(pts: &[(f64, f64)]) -> (f64, f64) {
    let n = pts.len() as f64;
    let (st, sv) = pts.iter().fold((0.0, 0.0), |(a, b), &(t, v)| (a + t, b + v));
    let (mt, mv) = (st / n, sv / n);
    let (num, den) = pts
        .iter()
        .fold((0.0, 0.0), |(a, b), &(t, v)| (a + (t - mt) * (v - mv), b + (t - mt).powi(2)));
    let b = if den > 0.0 { num / den } else { 0.0 };
    (mv - b * mt, b)
}

/// Where the interior intersections of a `cells` grid sit in an `out` image.
pub fn ideal_grid(out: (usize, usize), cells: (usize, usize)) -> Vec<(f64, f64)> {
    let (cell_h, cell_w) = (out.0 as f64 / cells.0 as f64, out.1 as f64 / cells.1 as f64);
    let mut v = Vec::new();
    for i in 1..cells.0 {
        for j in 1..cells.1 {
            v.push((j as f64 * cell_w, i as f64 * cell_h));
        }
    }
    v
}

pub fn rms_distance(a: &[(f64, f64)], b: &[(f64, f64)]) -> f64 {
    assert_eq!(a.len(), b.len());
    let ss: f64 = a.iter().zip(b).map(|(p, q)| (p.0 - q.0).powi(2) + (p.1 - q.1).powi(2)).sum();
    (ss / a.len() as f64).sqrt()
}

pub fn stream(label: &str, index: u64) -> Rng {
    seed::stream(0x7e57, label, index)
}
