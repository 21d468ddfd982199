use std::f64::consts::{FRAC_PI_4, PI};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Radius of the synthetic face mask as a fraction of the resolution.
pub const MASK_RADIUS: f64 = 0.45;
pub const MIN_RESOLUTION: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LightSpec {
    pub direction: [f64; 3],
    pub intensity: f64,
}

impl LightSpec {
    pub fn new(direction: [f64; 3], intensity: f64) -> Result<Self> {
        let light = LightSpec { direction, intensity };
        light.validate()?;
        Ok(light)
    }

    pub fn validate(&self) -> Result<()> {
        let [x, y, z] = self.direction;
        let len = (x * x + y * y + z * z).sqrt();
        if !((len - 1.0).abs() <= 1e-6) {
            return Err(Error::invalid("light", format!("direction {:?} is not unit length", self.direction)));
        }
        if !(z > 0.0) {
            return Err(Error::invalid("light", "direction must have positive z"));
        }
        if !(0.0..=2.0).contains(&self.intensity) {
            return Err(Error::invalid("light", format!("intensity {} outside [0, 2]", self.intensity)));
        }
        Ok(())
    }

    /// Direction uniform on the open upper hemisphere, intensity uniform in `[0, 2]`.
    pub fn random(rng: &mut impl Rng) -> Self {
        loop {
            let v: [f64; 3] = [rng.sample(StandardNormal), rng.sample(StandardNormal), rng.sample(StandardNormal)];
            let len = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
            if len < 1e-6 || v[2].abs() / len < 1e-6 {
                continue;
            }
            let direction = [v[0] / len, v[1] / len, v[2].abs() / len];
            return LightSpec {
                direction,
                intensity: rng.random_range(0.0..=2.0),
            };
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Bump {
    pub center: (f64, f64),
    pub amplitude: f64,
    pub width: f64,
}

/// Height field over the unit square. `x` follows columns and `y` follows
/// rows, both measured at pixel centres.
#[derive(Clone, Debug, PartialEq)]
pub enum Surface {
    Bumps(Vec<Bump>),
    /// `z = a * x + b * y + c`.
    Plane { a: f64, b: f64, c: f64 },
}

impl Surface {
    pub fn random_bumps(rng: &mut impl Rng, n_bumps: usize) -> Self {
        Surface::Bumps(
            (0..n_bumps)
                .map(|_| Bump {
                    center: (rng.random::<f64>(), rng.random::<f64>()),
                    amplitude: rng.random_range(-0.3..=0.3),
                    width: rng.random_range(0.05..=0.3),
                })
                .collect(),
        )
    }

    pub fn height(&self, x: f64, y: f64) -> f64 {
        match self {
            Surface::Plane { a, b, c } => a * x + b * y + c,
            Surface::Bumps(bumps) => bumps
                .iter()
                .map(|k| {
                    let (dx, dy) = (x - k.center.0, y - k.center.1);
                    k.amplitude * (-(dx * dx + dy * dy) / (2.0 * k.width * k.width)).exp()
                })
                .sum(),
        }
    }

    /// Analytic `(dz/dx, dz/dy)`.
    pub fn gradient(&self, x: f64, y: f64) -> (f64, f64) {
        match self {
            Surface::Plane { a, b, .. } => (*a, *b),
            Surface::Bumps(bumps) => bumps.iter().fold((0.0, 0.0), |(gx, gy), k| {
                let (dx, dy) = (x - k.center.0, y - k.center.1);
                let w2 = k.width * k.width;
                let g = k.amplitude * (-(dx * dx + dy * dy) / (2.0 * w2)).exp();
                (gx - g * dx / w2, gy - g * dy / w2)
            }),
        }
    }

    pub fn normal(&self, x: f64, y: f64) -> [f64; 3] {
        let (gx, gy) = self.gradient(x, y);
        let len = (gx * gx + gy * gy + 1.0).sqrt();
        [-gx / len, -gy / len, 1.0 / len]
    }

    /// The same surface rotated in the image plane by `angle` about the centre.
    pub fn rotated(&self, angle: f64) -> Self {
        let (s, c) = angle.sin_cos();
        match self {
            Surface::Bumps(bumps) => Surface::Bumps(
                bumps
                    .iter()
                    .map(|k| {
                        let (dx, dy) = (k.center.0 - 0.5, k.center.1 - 0.5);
                        Bump {
                            center: (0.5 + c * dx - s * dy, 0.5 + s * dx + c * dy),
                            ..*k
                        }
                    })
                    .collect(),
            ),
            Surface::Plane { a, b, c: z0 } => {
                let (ra, rb) = (c * a - s * b, s * a + c * b);
                // keep the height at the centre fixed
                let z_mid = a * 0.5 + b * 0.5 + z0;
                Surface::Plane {
                    a: ra,
                    b: rb,
                    c: z_mid - 0.5 * (ra + rb),
                }
            }
        }
    }

    /// Height raster `[1, 1, res, res]`.
    pub fn height_map(&self, res: usize) -> Tensor {
        raster(res, 1, |x, y| [self.height(x, y), 0.0, 0.0])
    }

    /// Unit normal raster `[1, 3, res, res]`.
    pub fn normal_map(&self, res: usize) -> Tensor {
        raster(res, 3, |x, y| self.normal(x, y))
    }
}

fn raster(res: usize, channels: usize, f: impl Fn(f64, f64) -> [f64; 3]) -> Tensor {
    let hw = res * res;
    let mut data = vec![0.0f32; channels * hw];
    for i in 0..res {
        for j in 0..res {
            let v = f((j as f64 + 0.5) / res as f64, (i as f64 + 0.5) / res as f64);
            for c in 0..channels {
                data[c * hw + i * res + j] = v[c] as f32;
            }
        }
    }
    Tensor::from_vec(&[1, channels, res, res], data).expect("raster shape")
}

/// Smooth RGB field in `[0.2, 1]`: a per-channel base tone plus one
/// low-frequency sinusoid.
pub fn random_albedo(rng: &mut impl Rng, res: usize) -> Tensor {
    let waves: Vec<[f64; 5]> = (0..3)
        .map(|_| {
            [
                rng.random_range(0.4..=0.8),
                rng.random_range(0.0..=0.2),
                rng.random_range(-2.0..=2.0),
                rng.random_range(-2.0..=2.0),
                rng.random_range(0.0..2.0 * PI),
            ]
        })
        .collect();
    let hw = res * res;
    let mut data = vec![0.0f32; 3 * hw];
    for (c, [base, amp, fx, fy, phase]) in waves.iter().enumerate() {
        for i in 0..res {
            for j in 0..res {
                let (x, y) = ((j as f64 + 0.5) / res as f64, (i as f64 + 0.5) / res as f64);
                let v = base + amp * (2.0 * PI * (fx * x + fy * y) + phase).sin();
                data[c * hw + i * res + j] = v.clamp(0.2, 1.0) as f32;
            }
        }
    }
    Tensor::from_vec(&[1, 3, res, res], data).expect("albedo shape")
}

/// Centred disk of radius `0.45 * res`, shape `[1, 1, res, res]`.
pub fn disk_mask(res: usize) -> Tensor {
    let r = MASK_RADIUS * res as f64;
    let mid = res as f64 / 2.0;
    let mut data = vec![0.0f32; res * res];
    for i in 0..res {
        for j in 0..res {
            let (dx, dy) = (j as f64 + 0.5 - mid, i as f64 + 0.5 - mid);
            if dx * dx + dy * dy <= r * r {
                data[i * res + j] = 1.0;
            }
        }
    }
    Tensor::from_vec(&[1, 1, res, res], data).expect("mask shape")
}

/// `clamp(albedo * intensity * max(0, <n, l>), 0, 1)` per pixel and channel.
pub fn render_lambertian(normals: &Tensor, albedo: &Tensor, light: &LightSpec) -> Result<Tensor> {
    light.validate()?;
    let [b, c, h, w] = normals.dims4("render_lambertian")?;
    if c != 3 {
        return Err(Error::invalid("render_lambertian", "normals need 3 channels"));
    }
    if albedo.shape() != normals.shape() {
        return Err(Error::shape("render_lambertian", normals.shape(), albedo.shape()));
    }
    let hw = h * w;
    let n = normals.data();
    let mut out = albedo.data().to_vec();
    let [lx, ly, lz] = light.direction;
    for bi in 0..b {
        let base = bi * 3 * hw;
        for s in 0..hw {
            let dot = n[base + s] as f64 * lx + n[base + hw + s] as f64 * ly + n[base + 2 * hw + s] as f64 * lz;
            let shade = light.intensity * dot.max(0.0);
            for ch in 0..3 {
                let i = base + ch * hw + s;
                out[i] = (out[i] as f64 * shade).clamp(0.0, 1.0) as f32;
            }
        }
    }
    Tensor::from_vec(normals.shape(), out)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenOptions {
    /// Rotate each surface in the image plane by an angle in `[-pi/4, pi/4]`.
    pub rotate_in_plane: bool,
}

/// Everything drawn for one synthetic face stand-in.
#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub surface: Surface,
    pub albedo: Tensor,
    pub light: LightSpec,
    pub normals: Tensor,
    pub image: Tensor,
    pub mask: Tensor,
}

impl Scene {
    pub fn generate(seed: u64, res: usize, n_bumps: usize, opts: GenOptions) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut surface = Surface::random_bumps(&mut rng, n_bumps);
        let albedo = random_albedo(&mut rng, res);
        let light = LightSpec::random(&mut rng);
        if opts.rotate_in_plane {
            surface = surface.rotated(rng.random_range(-FRAC_PI_4..=FRAC_PI_4));
        }
        Self::from_surface(surface, albedo, light, res)
    }

    pub fn from_surface(surface: Surface, albedo: Tensor, light: LightSpec, res: usize) -> Result<Self> {
        if res < MIN_RESOLUTION {
            return Err(Error::invalid("gen_sample", format!("resolution {res} is below {MIN_RESOLUTION}")));
        }
        let normals = surface.normal_map(res);
        let image = render_lambertian(&normals, &albedo, &light)?;
        Ok(Scene {
            surface,
            albedo,
            light,
            normals,
            image,
            mask: disk_mask(res),
        })
    }
}
