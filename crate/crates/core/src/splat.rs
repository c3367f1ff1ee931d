//! Differentiable 2D Gaussian-splat scene and rasterizer.
//!
//! A scene is N anisotropic Gaussian primitives — center, per-axis
//! log-scale, rotation, color, opacity logit — composited front-to-back in
//! fixed index order (later splats paint over earlier ones). Kernels are
//! truncated at 4σ with a shifted exponential, `exp(−q/2) − exp(−8)` for
//! q < 16, so each splat has *exactly* zero influence outside its footprint
//! and the image stays continuous at the cutoff. The backward pass
//! ([`render_vjp`]) is derived by hand and answers to the finite-difference
//! checker, not to the tape.

use crate::error::{Error, Result};
use crate::rng::{self, stream};
use crate::store::ParamStore;
use crate::tape::sigmoid;
use crate::tensor::{Scalar, Tensor};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Squared-radius cutoff (in σ units²): q = 16 is the 4σ boundary.
pub const KERNEL_Q_MAX: f64 = 16.0;
/// Scales below this are treated as degenerate and the splat is skipped.
pub const SCALE_FLOOR: f64 = 1e-6;

/// 2D similarity transform standing in for a camera: rotate about the canvas
/// center, translate, zoom about the center.
#[derive(Clone, Copy, Debug)]
pub struct CameraPose {
    pub angle: f64,
    pub translation: [f64; 2],
    pub zoom: f64,
}

impl CameraPose {
    pub fn identity() -> Self {
        CameraPose {
            angle: 0.0,
            translation: [0.0, 0.0],
            zoom: 1.0,
        }
    }
}

/// Mild random view: small rotation, sub-canvas translation, modest zoom.
pub fn sample_pose(r: &mut ChaCha8Rng, side: usize) -> CameraPose {
    let shift = side as f64 / 16.0;
    CameraPose {
        angle: r.random_range(-0.35..0.35),
        translation: [
            r.random_range(-shift..shift),
            r.random_range(-shift..shift),
        ],
        zoom: r.random_range(0.85..1.18),
    }
}

/// Parameter names of a scene inside its `ParamStore`.
pub const SCENE_PARAMS: [&str; 5] = [
    "centers",
    "colors",
    "log_scales",
    "opacity_logits",
    "rotations",
];

#[derive(Clone, Debug)]
pub struct SplatScene<S: Scalar = f32> {
    pub params: ParamStore<S>,
    n: usize,
    channels: usize,
}

impl<S: Scalar> SplatScene<S> {
    /// Validates the five parameter tensors and their shared splat count.
    pub fn new(params: ParamStore<S>) -> Result<Self> {
        let centers = params.value("centers")?;
        if centers.shape().len() != 2 || centers.shape()[1] != 2 {
            return Err(Error::shape(
                "scene",
                format!("centers {:?}, expected [N,2]", centers.shape()),
            ));
        }
        let n = centers.shape()[0];
        if n == 0 {
            return Err(Error::contract("scene needs at least one splat"));
        }
        let colors = params.value("colors")?;
        if colors.shape().len() != 2 || colors.shape()[0] != n {
            return Err(Error::shape(
                "scene",
                format!("colors {:?}, expected [{n},C]", colors.shape()),
            ));
        }
        let channels = colors.shape()[1];
        if channels != 1 && channels != 3 {
            return Err(Error::Config(format!(
                "colors must have 1 or 3 channels, got {channels}"
            )));
        }
        if params.value("log_scales")?.shape() != [n, 2] {
            return Err(Error::shape("scene", "log_scales must be [N,2]"));
        }
        if params.value("rotations")?.shape() != [n] {
            return Err(Error::shape("scene", "rotations must be [N]"));
        }
        if params.value("opacity_logits")?.shape() != [n] {
            return Err(Error::shape("scene", "opacity_logits must be [N]"));
        }
        Ok(SplatScene {
            params,
            n,
            channels,
        })
    }

    pub fn n_splats(&self) -> usize {
        self.n
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn cast<T: Scalar>(&self) -> SplatScene<T> {
        SplatScene {
            params: self.params.cast::<T>(),
            n: self.n,
            channels: self.channels,
        }
    }

    /// Adds externally computed gradients (e.g. from [`render_vjp`]) into
    /// this scene's gradient slots.
    pub fn accumulate_grads(&mut self, grads: &ParamStore<S>) -> Result<()> {
        for name in SCENE_PARAMS {
            self.params.accumulate_grad(name, grads.value(name)?)?;
        }
        Ok(())
    }
}

pub struct RenderOutput<S: Scalar = f32> {
    /// Clamped image, shape [C, side, side].
    pub image: Tensor<S>,
    /// Pre-clamp composite (diagnostics; also defines the clamp mask).
    pub unclamped: Tensor<S>,
    /// Per-pixel opacity coverage 1 − Π(1−α), shape [side, side]. Total
    /// coverage is monotone in every opacity logit, which makes it the
    /// right mass measure for opacity invariants (the color composite is
    /// not monotone: an added dark splat can darken pixels).
    pub coverage: Tensor<S>,
    /// Splats dropped for degenerate (underflowed) scales.
    pub skipped_splats: usize,
}

/// Per-splat quantities hoisted out of the pixel loop.
struct SplatCtx<S> {
    skip: bool,
    cx: S,
    cy: S,
    cos: S,
    sin: S,
    inv_sx2: S,
    inv_sy2: S,
    opacity: S,
}

fn prepare_splats<S: Scalar>(scene: &SplatScene<S>) -> Result<(Vec<SplatCtx<S>>, usize)> {
    let centers = scene.params.value("centers")?;
    let log_scales = scene.params.value("log_scales")?;
    let rotations = scene.params.value("rotations")?;
    let logits = scene.params.value("opacity_logits")?;
    let mut ctxs = Vec::with_capacity(scene.n);
    let mut skipped = 0usize;
    for i in 0..scene.n {
        let sx = log_scales.data()[2 * i].to_f64().exp();
        let sy = log_scales.data()[2 * i + 1].to_f64().exp();
        let skip = sx < SCALE_FLOOR || sy < SCALE_FLOOR;
        if skip {
            skipped += 1;
        }
        let theta = rotations.data()[i].to_f64();
        ctxs.push(SplatCtx {
            skip,
            cx: centers.data()[2 * i],
            cy: centers.data()[2 * i + 1],
            cos: S::from_f64(theta.cos()),
            sin: S::from_f64(theta.sin()),
            inv_sx2: S::from_f64(1.0 / (sx * sx)),
            inv_sy2: S::from_f64(1.0 / (sy * sy)),
            opacity: sigmoid(logits.data()[i]),
        });
    }
    Ok((ctxs, skipped))
}

struct PixelMap<S> {
    cos: S,
    sin: S,
    inv_zoom: S,
    tx: S,
    ty: S,
    cc: S,
}

impl<S: Scalar> PixelMap<S> {
    fn new(pose: &CameraPose, side: usize) -> Result<Self> {
        if pose.zoom <= 0.0 {
            return Err(Error::contract(format!(
                "camera zoom must be > 0, got {}",
                pose.zoom
            )));
        }
        Ok(PixelMap {
            cos: S::from_f64(pose.angle.cos()),
            sin: S::from_f64(pose.angle.sin()),
            inv_zoom: S::from_f64(1.0 / pose.zoom),
            tx: S::from_f64(pose.translation[0]),
            ty: S::from_f64(pose.translation[1]),
            cc: S::from_f64(side as f64 / 2.0),
        })
    }

    /// Screen pixel center -> world point the splats live in.
    #[inline]
    fn to_world(&self, px: S, py: S) -> (S, S) {
        let vx = (px - self.cc - self.tx) * self.inv_zoom;
        let vy = (py - self.cc - self.ty) * self.inv_zoom;
        (
            self.cos * vx + self.sin * vy + self.cc,
            self.cos * vy - self.sin * vx + self.cc,
        )
    }
}

/// Splat-frame offset and squared Mahalanobis radius of a world point.
#[inline]
fn splat_q<S: Scalar>(ctx: &SplatCtx<S>, wx: S, wy: S) -> (S, S, S) {
    let ex = wx - ctx.cx;
    let ey = wy - ctx.cy;
    let fx = ctx.cos * ex + ctx.sin * ey;
    let fy = ctx.cos * ey - ctx.sin * ex;
    (fx, fy, fx * fx * ctx.inv_sx2 + fy * fy * ctx.inv_sy2)
}

/// Rasterizes the scene under a pose. Deterministic; splats with degenerate
/// scales are skipped and counted in `skipped_splats`.
pub fn render<S: Scalar>(
    scene: &SplatScene<S>,
    pose: &CameraPose,
    side: usize,
) -> Result<RenderOutput<S>> {
    if side < 4 {
        return Err(Error::contract(format!("render side must be >= 4, got {side}")));
    }
    let map = PixelMap::new(pose, side)?;
    let (ctxs, skipped) = prepare_splats(scene)?;
    let colors = scene.params.value("colors")?;
    let c = scene.channels;
    let q_max = S::from_f64(KERNEL_Q_MAX);
    let w_floor = S::from_f64((-KERNEL_Q_MAX / 2.0).exp());
    let half = S::from_f64(0.5);

    let mut unclamped = vec![S::zero(); c * side * side];
    let mut coverage = vec![S::zero(); side * side];
    let mut acc = vec![S::zero(); 3];
    for row in 0..side {
        for col in 0..side {
            let px = S::from_f64(col as f64) + half;
            let py = S::from_f64(row as f64) + half;
            let (wx, wy) = map.to_world(px, py);
            acc[..c].fill(S::zero());
            let mut transmittance = S::one();
            for (i, ctx) in ctxs.iter().enumerate() {
                if ctx.skip {
                    continue;
                }
                let (_, _, q) = splat_q(ctx, wx, wy);
                if q >= q_max {
                    continue;
                }
                let w = (-q * half).exp() - w_floor;
                let alpha = ctx.opacity * w;
                let keep = S::one() - alpha;
                for (ch, a) in acc[..c].iter_mut().enumerate() {
                    *a = *a * keep + colors.data()[i * c + ch] * alpha;
                }
                transmittance = transmittance * keep;
            }
            let p = row * side + col;
            for ch in 0..c {
                unclamped[ch * side * side + p] = acc[ch];
            }
            coverage[p] = S::one() - transmittance;
        }
    }
    let unclamped = Tensor::new(vec![c, side, side], unclamped);
    let image = unclamped.clamp(S::zero(), S::one());
    Ok(RenderOutput {
        image,
        unclamped,
        coverage: Tensor::new(vec![side, side], coverage),
        skipped_splats: skipped,
    })
}

/// One recorded splat contribution at a pixel (forward re-run during the
/// backward pass).
struct Hit<S> {
    splat: usize,
    alpha: S,
    w: S,
    q: S,
    fx: S,
    fy: S,
    acc_prev: [S; 3],
}

/// Exact gradients of `⟨cotangent, render(scene, pose)⟩` with respect to
/// every splat parameter. Returns a store whose *values* are the gradients,
/// under the same names as the scene parameters.
pub fn render_vjp<S: Scalar>(
    scene: &SplatScene<S>,
    pose: &CameraPose,
    side: usize,
    cotangent: &Tensor<S>,
) -> Result<ParamStore<S>> {
    if side < 4 {
        return Err(Error::contract(format!("render side must be >= 4, got {side}")));
    }
    let c = scene.channels;
    if cotangent.shape() != [c, side, side] {
        return Err(Error::shape(
            "render_vjp",
            format!(
                "cotangent {:?}, expected [{c}, {side}, {side}]",
                cotangent.shape()
            ),
        ));
    }
    let map = PixelMap::new(pose, side)?;
    let (ctxs, _) = prepare_splats(scene)?;
    let colors = scene.params.value("colors")?;
    let n = scene.n;
    let q_max = S::from_f64(KERNEL_Q_MAX);
    let w_floor = S::from_f64((-KERNEL_Q_MAX / 2.0).exp());
    let half = S::from_f64(0.5);
    let one = S::one();
    let two = S::from_f64(2.0);

    let mut g_centers = vec![S::zero(); n * 2];
    let mut g_log_scales = vec![S::zero(); n * 2];
    let mut g_rotations = vec![S::zero(); n];
    let mut g_colors = vec![S::zero(); n * c];
    let mut g_logits = vec![S::zero(); n];

    let mut hits: Vec<Hit<S>> = Vec::with_capacity(n);
    let mut acc = [S::zero(); 3];
    let mut g = [S::zero(); 3];

    for row in 0..side {
        for col in 0..side {
            let px = S::from_f64(col as f64) + half;
            let py = S::from_f64(row as f64) + half;
            let (wx, wy) = map.to_world(px, py);

            // Forward re-run, recording each contribution.
            hits.clear();
            acc[..c].fill(S::zero());
            for (i, ctx) in ctxs.iter().enumerate() {
                if ctx.skip {
                    continue;
                }
                let (fx, fy, q) = splat_q(ctx, wx, wy);
                if q >= q_max {
                    continue;
                }
                let w = (-q * half).exp() - w_floor;
                let alpha = ctx.opacity * w;
                let mut acc_prev = [S::zero(); 3];
                acc_prev[..c].copy_from_slice(&acc[..c]);
                hits.push(Hit {
                    splat: i,
                    alpha,
                    w,
                    q,
                    fx,
                    fy,
                    acc_prev,
                });
                let keep = one - alpha;
                for (ch, a) in acc[..c].iter_mut().enumerate() {
                    *a = *a * keep + colors.data()[i * c + ch] * alpha;
                }
            }

            // Clamp mask, then walk the composite backwards.
            let p = row * side + col;
            for (ch, gv) in g[..c].iter_mut().enumerate() {
                let v = acc[ch];
                let pass = v >= S::zero() && v <= one;
                *gv = if pass {
                    cotangent.data()[ch * side * side + p]
                } else {
                    S::zero()
                };
            }
            for hit in hits.iter().rev() {
                let ctx = &ctxs[hit.splat];
                let mut d_alpha = S::zero();
                for ch in 0..c {
                    let col_v = colors.data()[hit.splat * c + ch];
                    d_alpha = d_alpha + g[ch] * (col_v - hit.acc_prev[ch]);
                    g_colors[hit.splat * c + ch] = g_colors[hit.splat * c + ch] + g[ch] * hit.alpha;
                    g[ch] = g[ch] * (one - hit.alpha);
                }
                // α = sigmoid(logit)·w(q)
                let d_op = d_alpha * hit.w;
                g_logits[hit.splat] =
                    g_logits[hit.splat] + d_op * ctx.opacity * (one - ctx.opacity);
                let d_w = d_alpha * ctx.opacity;
                let d_q = -d_w * half * (hit.w + w_floor); // d/dq exp(−q/2) = −½·exp(−q/2)
                let _ = hit.q;
                // q = (fx/sx)² + (fy/sy)²
                let ux = two * hit.fx * ctx.inv_sx2;
                let uy = two * hit.fy * ctx.inv_sy2;
                // log-scales: dq/d(ln sx) = −2·fx²/sx²
                g_log_scales[hit.splat * 2] =
                    g_log_scales[hit.splat * 2] - d_q * ux * hit.fx;
                g_log_scales[hit.splat * 2 + 1] =
                    g_log_scales[hit.splat * 2 + 1] - d_q * uy * hit.fy;
                // rotation: dfx/dθ = fy, dfy/dθ = −fx
                g_rotations[hit.splat] =
                    g_rotations[hit.splat] + d_q * (ux * hit.fy - uy * hit.fx);
                // center: dq/dcenter = −R·(ux, uy)
                g_centers[hit.splat * 2] = g_centers[hit.splat * 2]
                    - d_q * (ctx.cos * ux - ctx.sin * uy);
                g_centers[hit.splat * 2 + 1] = g_centers[hit.splat * 2 + 1]
                    - d_q * (ctx.sin * ux + ctx.cos * uy);
            }
        }
    }

    let mut grads = ParamStore::new();
    grads.insert("centers", Tensor::new(vec![n, 2], g_centers))?;
    grads.insert("colors", Tensor::new(vec![n, c], g_colors))?;
    grads.insert("log_scales", Tensor::new(vec![n, 2], g_log_scales))?;
    grads.insert("opacity_logits", Tensor::new(vec![n], g_logits))?;
    grads.insert("rotations", Tensor::new(vec![n], g_rotations))?;
    Ok(grads)
}

/// How to place the initial scene.
pub enum InitMode<'a, S: Scalar> {
    /// Centers uniform over the canvas, moderate scales, low opacity.
    Random,
    /// Splats at high-intensity pixels of a target image (sampled with
    /// probability proportional to intensity), colors matched to it.
    DataFitted { target: &'a Tensor<S> },
}

/// Builds a grayscale scene of `n` splats on a `side`×`side` canvas.
pub fn init_scene<S: Scalar>(
    mode: InitMode<'_, S>,
    n: usize,
    side: usize,
    seed: u64,
) -> Result<SplatScene<S>> {
    if n == 0 {
        return Err(Error::contract("init_scene requires n >= 1"));
    }
    let mut r = rng::rng(seed, stream::SCENE_INIT);
    let s = side as f64;
    let unit = s / 32.0; // scale lengths relative to the default canvas
    let mut centers = Vec::with_capacity(n * 2);
    let mut log_scales = Vec::with_capacity(n * 2);
    let mut rotations = Vec::with_capacity(n);
    let mut colors = Vec::with_capacity(n);
    let mut logits = Vec::with_capacity(n);

    match mode {
        InitMode::Random => {
            for _ in 0..n {
                centers.push(S::from_f64(r.random_range(0.1 * s..0.9 * s)));
                centers.push(S::from_f64(r.random_range(0.1 * s..0.9 * s)));
                log_scales.push(S::from_f64((r.random_range(1.0..3.0) * unit).ln()));
                log_scales.push(S::from_f64((r.random_range(1.0..3.0) * unit).ln()));
                rotations.push(S::from_f64(r.random_range(-std::f64::consts::PI..std::f64::consts::PI)));
                colors.push(S::from_f64(r.random_range(0.2..0.8)));
                logits.push(S::from_f64(r.random_range(-2.5..-1.9)));
            }
        }
        InitMode::DataFitted { target } => {
            if target.len() != side * side {
                return Err(Error::shape(
                    "init_scene",
                    format!("target {:?} vs side {side}", target.shape()),
                ));
            }
            // Cumulative intensity table for proportional pixel sampling.
            let mut cum = Vec::with_capacity(target.len());
            let mut total = 0.0f64;
            for v in target.data() {
                total += v.to_f64().max(0.0);
                cum.push(total);
            }
            if total <= 0.0 {
                return Err(Error::contract("data-fitted init needs a target with positive mass"));
            }
            for _ in 0..n {
                let u = r.random_range(0.0..total);
                let idx = cum.partition_point(|&acc| acc <= u).min(target.len() - 1);
                let row = idx / side;
                let col = idx % side;
                centers.push(S::from_f64(col as f64 + 0.5 + r.random_range(-0.5..0.5)));
                centers.push(S::from_f64(row as f64 + 0.5 + r.random_range(-0.5..0.5)));
                log_scales.push(S::from_f64((r.random_range(0.8..1.6) * unit).ln()));
                log_scales.push(S::from_f64((r.random_range(0.8..1.6) * unit).ln()));
                rotations.push(S::from_f64(r.random_range(-std::f64::consts::PI..std::f64::consts::PI)));
                colors.push(target.data()[idx]);
                logits.push(S::from_f64(0.3));
            }
        }
    }

    let mut params = ParamStore::new();
    params.insert("centers", Tensor::new(vec![n, 2], centers))?;
    params.insert("colors", Tensor::new(vec![n, 1], colors))?;
    params.insert("log_scales", Tensor::new(vec![n, 2], log_scales))?;
    params.insert("opacity_logits", Tensor::new(vec![n], logits))?;
    params.insert("rotations", Tensor::new(vec![n], rotations))?;
    SplatScene::new(params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{LabeledDataset, ShapeClass};
    use crate::gradcheck::{check_grads, GradCheckConfig};

    fn single_splat(cx: f64, cy: f64, sigma: f64, logit: f64, color: f64) -> SplatScene<f64> {
        let mut params = ParamStore::new();
        params.insert("centers", Tensor::new(vec![1, 2], vec![cx, cy])).unwrap();
        params.insert("colors", Tensor::new(vec![1, 1], vec![color])).unwrap();
        params
            .insert("log_scales", Tensor::new(vec![1, 2], vec![sigma.ln(), sigma.ln()]))
            .unwrap();
        params.insert("opacity_logits", Tensor::new(vec![1], vec![logit])).unwrap();
        params.insert("rotations", Tensor::new(vec![1], vec![0.0])).unwrap();
        SplatScene::new(params).unwrap()
    }

    fn random_scene(n: usize, side: usize, seed: u64) -> SplatScene<f64> {
        init_scene::<f64>(InitMode::Random, n, side, seed).unwrap()
    }

    #[test]
    fn transparent_scene_renders_background() {
        let mut scene = random_scene(8, 32, 1);
        let n = scene.n_splats();
        *scene.params.value_mut("opacity_logits").unwrap() = Tensor::full(vec![n], -30.0);
        let out = render(&scene, &CameraPose::identity(), 32).unwrap();
        assert!(out.image.max_abs() < 1e-9);
        assert_eq!(out.skipped_splats, 0);
    }

    #[test]
    fn single_splat_peaks_at_center_and_decays() {
        // Splat centered on the (16,16) pixel center.
        let scene = single_splat(16.5, 16.5, 3.0, 10.0, 1.0);
        let out = render(&scene, &CameraPose::identity(), 32).unwrap();
        let img = &out.image;
        let at = |row: usize, col: usize| img.data()[row * 32 + col].to_f64();
        let peak = at(16, 16);
        assert!(peak > 0.9, "peak {peak}");
        assert!((peak - img.max_abs()).abs() < 1e-12, "center is the max");
        // Monotone decay walking right from the center until the cutoff.
        let mut prev = peak;
        for col in 17..32 {
            let v = at(16, col);
            assert!(v <= prev + 1e-12, "non-monotone at col {col}: {v} > {prev}");
            prev = v;
        }
        assert_eq!(at(16, 31), 0.0, "outside 4sigma must be exactly zero");
    }

    #[test]
    fn zoom_scales_footprint_area() {
        let scene = single_splat(32.5, 32.5, 2.0, 6.0, 1.0);
        let side = 64;
        let count = |pose: &CameraPose| {
            let out = render(&scene, pose, side).unwrap();
            out.image.data().iter().filter(|v| v.to_f64() > 1e-3).count() as f64
        };
        let base = count(&CameraPose::identity());
        let zoomed = count(&CameraPose {
            zoom: 2.0,
            ..CameraPose::identity()
        });
        let ratio = zoomed / base;
        assert!(
            (3.2..=4.8).contains(&ratio),
            "footprint ratio {ratio} (base {base}, zoomed {zoomed})"
        );
    }

    #[test]
    fn degenerate_scale_is_skipped_with_warning() {
        let mut scene = random_scene(3, 32, 2);
        scene.params.value_mut("log_scales").unwrap().data_mut()[0] = -20.0;
        let out = render(&scene, &CameraPose::identity(), 32).unwrap();
        assert_eq!(out.skipped_splats, 1);
        // The other splats still paint something.
        assert!(out.image.max_abs() > 0.0);
    }

    #[test]
    fn vjp_zero_cotangent_gives_zero_grads() {
        let scene = random_scene(4, 32, 3);
        let cot = Tensor::<f64>::zeros(vec![1, 32, 32]);
        let grads = render_vjp(&scene, &CameraPose::identity(), 32, &cot).unwrap();
        for name in SCENE_PARAMS {
            assert_eq!(grads.value(name).unwrap().max_abs(), 0.0, "{name}");
        }
    }

    #[test]
    fn vjp_matches_finite_differences() {
        let side = 16;
        let scene = random_scene(5, side, 4);
        let pose = CameraPose {
            angle: 0.2,
            translation: [0.7, -0.4],
            zoom: 1.1,
        };
        let mut r = rng::rng(5, stream::EVAL);
        let cot = rng::randn::<f64>(vec![1, side, side], &mut r);

        let mut store = scene.params.clone();
        let grads = render_vjp(&scene, &pose, side, &cot).unwrap();
        for name in SCENE_PARAMS {
            store.accumulate_grad(name, grads.value(name).unwrap()).unwrap();
        }
        let cot_ref = &cot;
        let report = check_grads(
            &store,
            &store.names(),
            move |params| {
                let probe = SplatScene::new(params.clone())?;
                let out = render(&probe, &pose, side)?;
                Ok(out
                    .image
                    .data()
                    .iter()
                    .zip(cot_ref.data())
                    .map(|(a, b)| a * b)
                    .sum())
            },
            GradCheckConfig {
                step: 1e-4,
                rel_tolerance: 1e-3,
                max_coords_per_tensor: 0, // all coordinates; scenes are small
            },
        )
        .unwrap();
        assert!(report.passes(1e-3), "rel err {}", report.rel_err);
    }

    #[test]
    fn cotangent_outside_footprint_moves_nothing() {
        let side = 32;
        let scene = single_splat(8.5, 8.5, 1.0, 2.0, 0.8);
        // Support nonzero only for pixels further than 6px from the center:
        // strictly outside the 4σ = 4px footprint.
        let mut cot = vec![0.0f64; side * side];
        for row in 0..side {
            for col in 0..side {
                let dx = col as f64 + 0.5 - 8.5;
                let dy = row as f64 + 0.5 - 8.5;
                if (dx * dx + dy * dy).sqrt() > 6.0 {
                    cot[row * side + col] = 1.0;
                }
            }
        }
        let cot = Tensor::new(vec![1, side, side], cot);
        let grads = render_vjp(&scene, &CameraPose::identity(), side, &cot).unwrap();
        let center_grad = grads.value("centers").unwrap().max_abs();
        assert!(center_grad < 1e-6, "center grad {center_grad}");
    }

    #[test]
    fn low_opacity_compositing_is_order_insensitive() {
        let side = 32;
        let mut scene = random_scene(20, side, 6);
        let n = scene.n_splats();
        *scene.params.value_mut("opacity_logits").unwrap() = Tensor::full(vec![n], -3.5);
        let forward = render(&scene, &CameraPose::identity(), side).unwrap();

        // Reverse the splat order.
        let mut rev = ParamStore::new();
        for name in SCENE_PARAMS {
            let t = scene.params.value(name).unwrap();
            let rows = t.shape()[0];
            let w = t.len() / rows;
            let mut data = Vec::with_capacity(t.len());
            for i in (0..rows).rev() {
                data.extend_from_slice(&t.data()[i * w..(i + 1) * w]);
            }
            rev.insert(name, Tensor::new(t.shape().to_vec(), data)).unwrap();
        }
        let reversed = SplatScene::new(rev).unwrap();
        let backward = render(&reversed, &CameraPose::identity(), side).unwrap();
        let max_dev = forward.image.sub(&backward.image).max_abs();
        assert!(max_dev < 1e-3, "order sensitivity {max_dev}");
    }

    #[test]
    fn coverage_mass_is_monotone_in_opacity() {
        let side = 32;
        let scene = random_scene(10, side, 7);
        let base = render(&scene, &CameraPose::identity(), side).unwrap().coverage.sum();
        for splat in [0usize, 4, 9] {
            let mut bumped = scene.clone();
            bumped.params.value_mut("opacity_logits").unwrap().data_mut()[splat] =
                scene.params.value("opacity_logits").unwrap().data()[splat] + 0.5;
            let mass = render(&bumped, &CameraPose::identity(), side).unwrap().coverage.sum();
            assert!(
                mass >= base,
                "coverage mass fell when opacity rose: {mass} < {base}"
            );
        }
    }

    #[test]
    fn vjp_is_linear_in_cotangent() {
        let side = 16;
        let scene = random_scene(5, side, 8);
        let pose = CameraPose::identity();
        let mut r = rng::rng(9, stream::EVAL);
        let c1 = rng::randn::<f64>(vec![1, side, side], &mut r);
        let c2 = rng::randn::<f64>(vec![1, side, side], &mut r);
        let (a, b) = (0.6, -2.0);
        let combo = c1.scale(a).add(&c2.scale(b));
        let g1 = render_vjp(&scene, &pose, side, &c1).unwrap();
        let g2 = render_vjp(&scene, &pose, side, &c2).unwrap();
        let gc = render_vjp(&scene, &pose, side, &combo).unwrap();
        for name in SCENE_PARAMS {
            let lin = g1.value(name).unwrap().scale(a).add(&g2.value(name).unwrap().scale(b));
            let direct = gc.value(name).unwrap();
            assert!(direct.rel_err(&lin) < 1e-12, "{name}");
        }
    }

    #[test]
    fn random_init_is_seed_reproducible() {
        let a = random_scene(16, 32, 42);
        let b = random_scene(16, 32, 42);
        let c = random_scene(16, 32, 43);
        assert_eq!(a.params.fingerprint(), b.params.fingerprint());
        assert_ne!(a.params.fingerprint(), c.params.fingerprint());
    }

    #[test]
    fn data_fitted_centers_live_on_the_target_support() {
        let ds = LabeledDataset::<f64>::shapes(8, 32, 11);
        let mean = ds.class_mean(ShapeClass::Disk.label()).unwrap();
        let scene = init_scene(InitMode::DataFitted { target: &mean }, 64, 32, 12).unwrap();
        let threshold = 0.1 * mean.max_abs();
        let centers = scene.params.value("centers").unwrap();
        let mut inside = 0;
        for i in 0..scene.n_splats() {
            let col = centers.data()[2 * i].to_f64().floor() as usize;
            let row = centers.data()[2 * i + 1].to_f64().floor() as usize;
            if mean.data()[row.min(31) * 32 + col.min(31)].to_f64() > threshold {
                inside += 1;
            }
        }
        let frac = inside as f64 / scene.n_splats() as f64;
        assert!(frac >= 0.8, "only {frac} of centers on support");
    }

    #[test]
    fn data_fitted_init_starts_closer_than_random() {
        let ds = LabeledDataset::<f64>::shapes(8, 32, 13);
        let mean = ds.class_mean(ShapeClass::Disk.label()).unwrap();
        let mse = |scene: &SplatScene<f64>| {
            let out = render(scene, &CameraPose::identity(), 32).unwrap();
            out.image
                .data()
                .iter()
                .zip(mean.data())
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                / mean.len() as f64
        };
        let mut fitted_avg = 0.0;
        let mut random_avg = 0.0;
        for seed in 0..5 {
            fitted_avg += mse(&init_scene(InitMode::DataFitted { target: &mean }, 128, 32, seed).unwrap());
            random_avg += mse(&init_scene::<f64>(InitMode::Random, 128, 32, seed).unwrap());
        }
        assert!(
            fitted_avg < random_avg,
            "fitted {fitted_avg} !< random {random_avg}"
        );
    }

    #[test]
    fn scene_shape_validation() {
        let mut params = ParamStore::<f64>::new();
        params.insert("centers", Tensor::zeros(vec![2, 2])).unwrap();
        params.insert("colors", Tensor::zeros(vec![3, 1])).unwrap(); // wrong N
        params.insert("log_scales", Tensor::zeros(vec![2, 2])).unwrap();
        params.insert("opacity_logits", Tensor::zeros(vec![2])).unwrap();
        params.insert("rotations", Tensor::zeros(vec![2])).unwrap();
        assert!(SplatScene::new(params).is_err());
        assert!(init_scene::<f64>(InitMode::Random, 0, 32, 0).is_err());
    }
}
