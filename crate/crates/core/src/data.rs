//! k-space degradation, synthetic paired-contrast scenes, and the dataset
//! directory format.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;

use crate::config::KvMap;
use crate::error::{Error, Result};
use crate::io::{read_png, read_text, write_png, write_text, PngDepth};
use crate::tensor::Tensor;
use crate::train::Batch;

/// Unnormalized 2D DFT (or inverse) of an `h × w` row-major buffer.
fn fft2(buf: &mut [Complex64], h: usize, w: usize, inverse: bool) {
    let mut planner = FftPlanner::<f64>::new();
    let (row, col) = if inverse {
        (planner.plan_fft_inverse(w), planner.plan_fft_inverse(h))
    } else {
        (planner.plan_fft_forward(w), planner.plan_fft_forward(h))
    };
    row.process(buf);
    let mut column = vec![Complex64::default(); h];
    for x in 0..w {
        for y in 0..h {
            column[y] = buf[y * w + x];
        }
        col.process(&mut column);
        for y in 0..h {
            buf[y * w + x] = column[y];
        }
    }
}

/// Signed frequency of DFT bin `k` on a length-`n` axis, in `[-n/2, n/2)`.
fn signed(k: usize, n: usize) -> isize {
    if 2 * k >= n {
        k as isize - n as isize
    } else {
        k as isize
    }
}

/// Whether big-grid frequency `f` is kept on a small axis of length `m`.
/// For even `m` both `±m/2` are kept and land on the same small bin.
fn retained(f: isize, m: usize) -> bool {
    f.unsigned_abs() <= m / 2
}

fn small_bin(f: isize, m: usize) -> usize {
    f.rem_euclid(m as isize) as usize
}

fn plane_spectrum(plane: &[f64], h: usize, w: usize) -> Vec<Complex64> {
    let mut buf: Vec<Complex64> = plane.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    fft2(&mut buf, h, w, false);
    buf
}

fn check_divisible(op: &'static str, h: usize, w: usize, scale: usize) -> Result<()> {
    if scale == 0 || h % scale != 0 || w % scale != 0 {
        return Err(Error::invalid(op, format!("{h}x{w} not divisible by scale {scale}")));
    }
    Ok(())
}

/// Centered k-space crop to `(H/scale, W/scale)` without clamping.
///
/// On even output sizes the `±m/2` pair of the input spectrum folds into the
/// single output Nyquist bin, so a cosine at the output Nyquist frequency
/// keeps its amplitude and [`upsample_kspace`] is an exact right inverse.
pub fn lowpass_kspace(hr: &Tensor<f64>, scale: usize) -> Result<Tensor<f64>> {
    let [n, c, h, w] = hr.shape().0;
    check_divisible("degrade_kspace", h, w, scale)?;
    let (mh, mw) = (h / scale, w / scale);
    let norm = 1.0 / (h * w) as f64;
    let mut out = Tensor::zeros([n, c, mh, mw]);
    for b in 0..n {
        for ch in 0..c {
            let spec = plane_spectrum(hr.plane(b, ch), h, w);
            let mut small = vec![Complex64::default(); mh * mw];
            for u in 0..h {
                let fu = signed(u, h);
                if !retained(fu, mh) {
                    continue;
                }
                for v in 0..w {
                    let fv = signed(v, w);
                    if retained(fv, mw) {
                        small[small_bin(fu, mh) * mw + small_bin(fv, mw)] += spec[u * w + v];
                    }
                }
            }
            fft2(&mut small, mh, mw, true);
            let base = (b * c + ch) * mh * mw;
            for (k, z) in small.iter().enumerate() {
                out.data_mut()[base + k] = z.re * norm;
            }
        }
    }
    Ok(out)
}

/// k-space degradation: centered low-frequency crop, real part, clamp to
/// `[0, 1]`.
pub fn degrade_kspace(hr: &Tensor<f64>, scale: usize) -> Result<Tensor<f64>> {
    Ok(lowpass_kspace(hr, scale)?.map(|v| v.clamp(0.0, 1.0)))
}

/// Zero-filled k-space interpolation by `scale`; the output Nyquist bins of
/// an even input are split evenly over `±m/2`.
pub fn upsample_kspace(lr: &Tensor<f64>, scale: usize) -> Result<Tensor<f64>> {
    let [n, c, mh, mw] = lr.shape().0;
    if scale == 0 {
        return Err(Error::invalid("upsample_kspace", "scale must be positive"));
    }
    let (h, w) = (mh * scale, mw * scale);
    let norm = 1.0 / (mh * mw) as f64;
    // Big-grid bins fed by small bin `k` and their share of it.
    let targets = |k: usize, m: usize, big: usize| -> Vec<(usize, f64)> {
        let f = signed(k, m);
        if m % 2 == 0 && f == -((m / 2) as isize) && big > m {
            let half = (m / 2) as isize;
            vec![(small_bin(-half, big), 0.5), (small_bin(half, big), 0.5)]
        } else {
            vec![(small_bin(f, big), 1.0)]
        }
    };
    let mut out = Tensor::zeros([n, c, h, w]);
    for b in 0..n {
        for ch in 0..c {
            let spec = plane_spectrum(lr.plane(b, ch), mh, mw);
            let mut big = vec![Complex64::default(); h * w];
            for u in 0..mh {
                for (bu, su) in targets(u, mh, h) {
                    for v in 0..mw {
                        for (bv, sv) in targets(v, mw, w) {
                            big[bu * w + bv] += spec[u * mw + v] * (su * sv);
                        }
                    }
                }
            }
            fft2(&mut big, h, w, true);
            let base = (b * c + ch) * h * w;
            for (k, z) in big.iter().enumerate() {
                out.data_mut()[base + k] = z.re * norm;
            }
        }
    }
    Ok(out)
}

/// One HR/Ref/LR triple, each `(1, 1, ·, ·)` in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImagePair {
    pub id: String,
    pub hr: Tensor<f64>,
    pub reference: Tensor<f64>,
    pub lr: Tensor<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub seed: u64,
    pub count: usize,
    pub size: usize,
    pub scale: usize,
    pub ellipses: (usize, usize),
    /// Range of the exponent of the power-law contrast remap.
    pub gamma: (f64, f64),
    /// Range of the weight of the inverted contrast in the reference.
    pub inversion: (f64, f64),
    /// Amplitude of the sinusoidal texture relative to the scene.
    pub texture: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            seed: 0,
            count: 32,
            size: 64,
            scale: 2,
            ellipses: (3, 7),
            gamma: (0.6, 1.6),
            inversion: (0.7, 0.95),
            texture: 0.08,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.size != 32 && self.size != 64 {
            return Err(Error::Config(format!("size must be 32 or 64, got {}", self.size)));
        }
        if self.scale == 0 || self.size % self.scale != 0 {
            return Err(Error::Config(format!("scale {} does not divide size {}", self.scale, self.size)));
        }
        if self.ellipses.0 > self.ellipses.1 || self.gamma.0 > self.gamma.1 || self.inversion.0 > self.inversion.1 {
            return Err(Error::Config("empty generator range".into()));
        }
        if !(0.0..=1.0).contains(&self.inversion.0) || !(0.0..=1.0).contains(&self.inversion.1) || self.gamma.0 <= 0.0 {
            return Err(Error::Config("inversion must lie in [0, 1] and gamma be positive".into()));
        }
        Ok(())
    }

    pub fn to_kv(&self) -> KvMap {
        let mut kv = KvMap::default();
        kv.set("seed", self.seed);
        kv.set("count", self.count);
        kv.set("size", self.size);
        kv.set("scale", self.scale);
        kv.set("ellipses_min", self.ellipses.0);
        kv.set("ellipses_max", self.ellipses.1);
        kv.set("gamma_min", self.gamma.0);
        kv.set("gamma_max", self.gamma.1);
        kv.set("inversion_min", self.inversion.0);
        kv.set("inversion_max", self.inversion.1);
        kv.set("texture", self.texture);
        kv
    }

    /// Applies recognized keys of `kv`, leaving others untouched.
    pub fn apply(&mut self, kv: &KvMap) -> Result<()> {
        let num = |k: &str| -> Result<Option<f64>> {
            kv.get(k)
                .map(|v| v.parse::<f64>().map_err(|_| Error::Config(format!("invalid value `{v}` for `{k}`"))))
                .transpose()
        };
        let int = |k: &str| -> Result<Option<usize>> {
            kv.get(k)
                .map(|v| v.parse::<usize>().map_err(|_| Error::Config(format!("invalid value `{v}` for `{k}`"))))
                .transpose()
        };
        if let Some(v) = kv.get("seed") {
            self.seed = v.parse().map_err(|_| Error::Config(format!("invalid seed `{v}`")))?;
        }
        macro_rules! set {
            ($f:expr, $field:expr) => {
                if let Some(v) = $f? {
                    $field = v;
                }
            };
        }
        set!(int("count"), self.count);
        set!(int("size"), self.size);
        set!(int("scale"), self.scale);
        set!(int("ellipses_min"), self.ellipses.0);
        set!(int("ellipses_max"), self.ellipses.1);
        set!(num("gamma_min"), self.gamma.0);
        set!(num("gamma_max"), self.gamma.1);
        set!(num("inversion_min"), self.inversion.0);
        set!(num("inversion_max"), self.inversion.1);
        set!(num("texture"), self.texture);
        Ok(())
    }
}

/// Affine map of `x` onto `[0, 1]`; constant images map to zero.
pub fn min_max_normalize(x: &Tensor<f64>) -> Tensor<f64> {
    let (lo, hi) = min_max(x);
    affine(x, lo, hi)
}

fn min_max(x: &Tensor<f64>) -> (f64, f64) {
    x.data()
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
}

fn affine(x: &Tensor<f64>, lo: f64, hi: f64) -> Tensor<f64> {
    let span = hi - lo;
    if span > 0.0 {
        x.map(|v| ((v - lo) / span).clamp(0.0, 1.0))
    } else {
        x.map(|_| 0.0)
    }
}

/// Logistic edge at normalized radius 1; `width` is in radius units.
fn soft_inside(d: f64, width: f64) -> f64 {
    1.0 / (1.0 + ((d - 1.0) / width).exp())
}

/// Renders one scene: soft ellipses over a ramp with sinusoidal texture.
fn render_scene(rng: &mut ChaCha8Rng, spec: &SyntheticSpec) -> Tensor<f64> {
    let n = spec.size;
    let mut img = vec![0.0f64; n * n];
    let (gx, gy, g0) = (rng.gen_range(-0.3..0.3), rng.gen_range(-0.3..0.3), rng.gen_range(0.1..0.3));
    let count = rng.gen_range(spec.ellipses.0..=spec.ellipses.1);
    let ellipses: Vec<_> = (0..count)
        .map(|_| {
            let cy = rng.gen_range(0.2..0.8);
            let cx = rng.gen_range(0.2..0.8);
            let ry = rng.gen_range(0.08..0.35);
            let rx = rng.gen_range(0.08..0.35);
            let th: f64 = rng.gen_range(0.0..std::f64::consts::PI);
            let amp = rng.gen_range(0.2..1.0) * if rng.gen_bool(0.25) { -1.0 } else { 1.0 };
            (cy, cx, ry, rx, th.sin(), th.cos(), amp)
        })
        .collect();
    let (fy, fx, ph) = (rng.gen_range(1.0..6.0), rng.gen_range(1.0..6.0), rng.gen_range(0.0..6.3));
    for i in 0..n {
        for j in 0..n {
            let (y, x) = ((i as f64 + 0.5) / n as f64, (j as f64 + 0.5) / n as f64);
            let mut v = g0 + gx * (x - 0.5) + gy * (y - 0.5);
            for &(cy, cx, ry, rx, s, c, amp) in &ellipses {
                let (dy, dx) = (y - cy, x - cx);
                let (u, w) = (c * dx + s * dy, -s * dx + c * dy);
                let d = ((u / rx).powi(2) + (w / ry).powi(2)).sqrt();
                v += amp * soft_inside(d, 1.0 / (n as f64 * rx.min(ry)));
            }
            let tex = (std::f64::consts::TAU * (fy * y + fx * x) + ph).sin();
            img[i * n + j] = v + spec.texture * tex;
        }
    }
    min_max_normalize(&Tensor::from_vec([1, 1, n, n], img).expect("square scene"))
}

/// Generates `spec.count` pairs; the same spec yields identical pairs.
pub fn gen_synthetic(spec: &SyntheticSpec) -> Result<Vec<ImagePair>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut out = Vec::with_capacity(spec.count);
    for k in 0..spec.count {
        let hr = render_scene(&mut rng, spec);
        let gamma = rng.gen_range(spec.gamma.0..=spec.gamma.1);
        let inv = rng.gen_range(spec.inversion.0..=spec.inversion.1);
        let reference = min_max_normalize(&hr.map(|v| {
            let f = v.powf(gamma);
            inv * (1.0 - f) + (1.0 - inv) * f
        }));
        let lr = degrade_kspace(&hr, spec.scale)?;
        out.push(ImagePair {
            id: format!("{k:05}"),
            hr,
            reference,
            lr,
        });
    }
    Ok(out)
}

/// Pearson correlation of the forward-difference gradient fields of `a`
/// and `b`, both directions pooled.
pub fn gradient_correlation(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    let diffs = |t: &Tensor<f64>| -> Vec<f64> {
        let [n, c, h, w] = t.shape().0;
        let mut out = Vec::new();
        for p in 0..n * c {
            let d = &t.data()[p * h * w..(p + 1) * h * w];
            for i in 0..h {
                for j in 0..w {
                    if j + 1 < w {
                        out.push(d[i * w + j + 1] - d[i * w + j]);
                    }
                    if i + 1 < h {
                        out.push(d[(i + 1) * w + j] - d[i * w + j]);
                    }
                }
            }
        }
        out
    };
    let (x, y) = (diffs(a), diffs(b));
    let n = x.len() as f64;
    let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (p, q) in x.iter().zip(&y) {
        sxy += (p - mx) * (q - my);
        sxx += (p - mx) * (p - mx);
        syy += (q - my) * (q - my);
    }
    sxy / (sxx * syy).sqrt().max(f64::MIN_POSITIVE)
}

fn pair_path(dir: &Path, id: &str, kind: &str) -> std::path::PathBuf {
    dir.join("pairs").join(format!("{id}_{kind}.png"))
}

/// Writes 16-bit PNGs under `pairs/`, `manifest.txt`, and `spec.txt`.
pub fn write_dataset(dir: impl AsRef<Path>, pairs: &[ImagePair], spec: &KvMap) -> Result<()> {
    let dir = dir.as_ref();
    let pd = dir.join("pairs");
    std::fs::create_dir_all(&pd).map_err(|e| Error::io(&pd, e))?;
    let mut manifest = String::new();
    for p in pairs {
        write_png(pair_path(dir, &p.id, "hr"), &p.hr, PngDepth::Sixteen)?;
        write_png(pair_path(dir, &p.id, "ref"), &p.reference, PngDepth::Sixteen)?;
        write_png(pair_path(dir, &p.id, "lr"), &p.lr, PngDepth::Sixteen)?;
        manifest.push_str(&p.id);
        manifest.push('\n');
    }
    write_text(dir.join("manifest.txt"), &manifest)?;
    write_text(dir.join("spec.txt"), &spec.render())
}

/// Reads every pair in `manifest.txt` order. HR and Ref are min-max
/// normalized per image; LR goes through HR's affine map.
pub fn read_dataset(dir: impl AsRef<Path>) -> Result<Vec<ImagePair>> {
    let dir = dir.as_ref();
    let manifest = read_text(dir.join("manifest.txt"))?;
    let mut out = Vec::new();
    for id in manifest.lines().map(str::trim).filter(|l| !l.is_empty()) {
        let hr = read_png(pair_path(dir, id, "hr"))?;
        let reference = read_png(pair_path(dir, id, "ref"))?;
        let lr = read_png(pair_path(dir, id, "lr"))?;
        if hr.shape() != reference.shape() {
            return Err(Error::format(pair_path(dir, id, "ref"), format!("size {} differs from hr {}", reference.shape(), hr.shape())));
        }
        let (lo, hi) = min_max(&hr);
        out.push(ImagePair {
            id: id.to_string(),
            lr: affine(&lr, lo, hi),
            hr: affine(&hr, lo, hi),
            reference: min_max_normalize(&reference),
        });
    }
    Ok(out)
}

/// Reads `spec.txt` of a dataset directory.
pub fn read_dataset_spec(dir: impl AsRef<Path>) -> Result<KvMap> {
    KvMap::parse(&read_text(dir.as_ref().join("spec.txt"))?)
}

/// Stacks pairs `indices` into one batch of the given precision.
pub fn batch_of<S: crate::Scalar>(pairs: &[ImagePair], indices: &[usize]) -> Result<Batch<S>> {
    let pick = |f: fn(&ImagePair) -> &Tensor<f64>| -> Result<Tensor<S>> {
        let ts: Vec<Tensor<S>> = indices.iter().map(|&i| f(&pairs[i]).cast()).collect();
        Tensor::stack(&ts.iter().collect::<Vec<_>>())
    };
    Ok(Batch {
        lr: pick(|p| &p.lr)?,
        reference: pick(|p| &p.reference)?,
        hr: pick(|p| &p.hr)?,
    })
}

/// Indices of the minibatch used at `step`: consecutive pairs, wrapping.
pub fn batch_indices(step: usize, batch: usize, len: usize) -> Vec<usize> {
    (0..batch).map(|j| (step * batch + j) % len).collect()
}
