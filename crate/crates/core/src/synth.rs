//! Procedural multispectral scenes for tests, demos and the ablation toy set.
//!
//! A scene is a jittered-grid Voronoi partition into land-cover patches, each
//! with a material spectrum perturbed per patch, modulated by smooth value
//! noise; urban scenes get a road grid and coastal scenes a water body. All ten
//! bands are rendered on the 10m grid; the 20m bands are then 2x2 box
//! averages, which mimics the larger sensor footprint.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dataset::Landscape;
use crate::raster::{BandId, BandStack, COARSE_BANDS, FINE_BANDS};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Material {
    Water,
    Vegetation,
    Crop,
    Soil,
    Sand,
    Concrete,
    RedRoof,
    Asphalt,
}

impl Material {
    /// Reflectance in `BandId::ALL` order.
    fn spectrum(self) -> [f32; 10] {
        match self {
            Material::Water => [0.060, 0.050, 0.030, 0.025, 0.020, 0.018, 0.015, 0.013, 0.005, 0.003],
            Material::Vegetation => [0.030, 0.060, 0.035, 0.100, 0.280, 0.350, 0.380, 0.390, 0.200, 0.100],
            Material::Crop => [0.050, 0.080, 0.090, 0.140, 0.220, 0.260, 0.280, 0.290, 0.300, 0.200],
            Material::Soil => [0.080, 0.110, 0.150, 0.180, 0.200, 0.220, 0.240, 0.250, 0.320, 0.280],
            Material::Sand => [0.150, 0.190, 0.230, 0.260, 0.280, 0.290, 0.300, 0.310, 0.380, 0.330],
            Material::Concrete => [0.140, 0.150, 0.160, 0.170, 0.180, 0.190, 0.200, 0.200, 0.240, 0.220],
            Material::RedRoof => [0.070, 0.080, 0.150, 0.190, 0.210, 0.220, 0.230, 0.240, 0.280, 0.250],
            Material::Asphalt => [0.060, 0.065, 0.070, 0.075, 0.080, 0.085, 0.090, 0.090, 0.100, 0.090],
        }
    }
}

fn palette(l: Landscape) -> &'static [(Material, f32)] {
    use Material::*;
    match l {
        Landscape::Urban => &[(Concrete, 0.35), (RedRoof, 0.25), (Asphalt, 0.15), (Vegetation, 0.15), (Soil, 0.10)],
        Landscape::Rural => &[(Vegetation, 0.35), (Crop, 0.35), (Soil, 0.25), (Concrete, 0.05)],
        Landscape::Coastal => &[(Sand, 0.30), (Vegetation, 0.30), (Soil, 0.20), (Concrete, 0.20)],
        Landscape::Mixed => &[
            (Vegetation, 0.25),
            (Crop, 0.2),
            (Concrete, 0.2),
            (RedRoof, 0.1),
            (Soil, 0.15),
            (Water, 0.1),
        ],
    }
}

fn pick(rng: &mut ChaCha8Rng, options: &[(Material, f32)]) -> Material {
    let mut t = rng.gen::<f32>() * options.iter().map(|o| o.1).sum::<f32>();
    for &(m, w) in options {
        if t < w {
            return m;
        }
        t -= w;
    }
    options[options.len() - 1].0
}

/// Smooth lattice noise in roughly `[-1, 1]`.
struct ValueNoise {
    cell: f32,
    cols: usize,
    lattice: Vec<f32>,
}

impl ValueNoise {
    fn new(rng: &mut ChaCha8Rng, size: usize, cell: f32) -> Self {
        let cols = (size as f32 / cell).ceil() as usize + 2;
        let lattice = (0..cols * cols).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Self { cell, cols, lattice }
    }

    fn at(&self, y: usize, x: usize) -> f32 {
        let fy = y as f32 / self.cell;
        let fx = x as f32 / self.cell;
        let (iy, ix) = (fy as usize, fx as usize);
        let s = |t: f32| t * t * (3.0 - 2.0 * t);
        let (ty, tx) = (s(fy - iy as f32), s(fx - ix as f32));
        let l = |r: usize, c: usize| self.lattice[r * self.cols + c];
        let top = l(iy, ix) * (1.0 - tx) + l(iy, ix + 1) * tx;
        let bot = l(iy + 1, ix) * (1.0 - tx) + l(iy + 1, ix + 1) * tx;
        top * (1.0 - ty) + bot * ty
    }
}

/// Per-patch record: material and a spectral perturbation.
struct Patch {
    material: Material,
    gain: f32,
    tilt: [f32; 10],
}

/// Renders a `size x size` scene on the 10m grid; returns the four 10m bands
/// and the six 20m bands (`size / 2` pixels). `size` must be even.
pub fn generate_scene(landscape: Landscape, size: usize, seed: u64) -> (BandStack, BandStack) {
    assert!(size >= 2 && size % 2 == 0, "scene size must be even");
    split_resolutions(&render(landscape, size, seed), size)
}

/// All ten bands on the 10m grid, in `BandId::ALL` order.
fn render(landscape: Landscape, size: usize, seed: u64) -> Vec<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (landscape as u64) << 56);
    let cell = 14usize;
    let grid = size.div_ceil(cell) + 2;
    let sites: Vec<(f32, f32)> = (0..grid * grid)
        .map(|i| {
            let (gy, gx) = ((i / grid) as f32 - 1.0, (i % grid) as f32 - 1.0);
            (
                (gy + rng.gen::<f32>()) * cell as f32,
                (gx + rng.gen::<f32>()) * cell as f32,
            )
        })
        .collect();
    let patches: Vec<Patch> = (0..grid * grid)
        .map(|_| {
            let material = pick(&mut rng, palette(landscape));
            let mut tilt = [0.0; 10];
            tilt.iter_mut().for_each(|t| *t = rng.gen_range(-0.06..0.06));
            Patch {
                material,
                gain: rng.gen_range(0.85..1.15),
                tilt,
            }
        })
        .collect();
    let texture = ValueNoise::new(&mut rng, size, 6.0);
    let moisture = ValueNoise::new(&mut rng, size, 23.0);
    let shore = ValueNoise::new(&mut rng, size, 60.0);
    let road_period = rng.gen_range(36..52);
    let road_offset = rng.gen_range(0..road_period);

    let cell_of = |y: usize, x: usize| -> usize {
        let (fy, fx) = (y as f32 + 0.5, x as f32 + 0.5);
        let (cy, cx) = (y / cell + 1, x / cell + 1);
        let mut best = (f32::MAX, 0);
        for gy in cy - 1..=(cy + 1).min(grid - 1) {
            for gx in cx - 1..=(cx + 1).min(grid - 1) {
                let i = gy * grid + gx;
                let (sy, sx) = sites[i];
                let d = (sy - fy).powi(2) + (sx - fx).powi(2);
                if d < best.0 {
                    best = (d, i);
                }
            }
        }
        best.1
    };

    let plane = size * size;
    let mut full = vec![0.0f32; 10 * plane];
    for y in 0..size {
        for x in 0..size {
            let p = &patches[cell_of(y, x)];
            let mut material = p.material;
            let (mut gain, mut tilt) = (p.gain, p.tilt);
            let is_road = |v: usize| (v + road_offset) % road_period < 2;
            match landscape {
                Landscape::Urban | Landscape::Mixed if is_road(y) || is_road(x) => {
                    material = Material::Asphalt;
                    gain = 1.0;
                    tilt = [0.0; 10];
                }
                Landscape::Coastal if shore.at(y, x) + (x as f32 / size as f32 - 0.5) > 0.25 => {
                    material = Material::Water;
                }
                _ => {}
            }
            let spec = material.spectrum();
            let tex = 1.0 + 0.12 * texture.at(y, x);
            let wet = 0.08 * moisture.at(y, x);
            for (b, id) in BandId::ALL.iter().enumerate() {
                let swir = matches!(id, BandId::B11 | BandId::B12);
                let mut v = spec[b] * gain * (1.0 + tilt[b]) * tex;
                if swir {
                    v *= 1.0 - wet;
                }
                full[b * plane + y * size + x] = v.clamp(0.0, 1.0);
            }
        }
    }

    full
}

fn split_resolutions(full: &[f32], size: usize) -> (BandStack, BandStack) {
    let plane = size * size;
    let band_plane = |id: BandId| {
        let b = BandId::ALL.iter().position(|&x| x == id).unwrap();
        &full[b * plane..(b + 1) * plane]
    };
    let hr10: Vec<f32> = FINE_BANDS.iter().flat_map(|&id| band_plane(id).to_vec()).collect();
    let half = size / 2;
    let mut lr20 = Vec::with_capacity(6 * half * half);
    for &id in &COARSE_BANDS {
        let src = band_plane(id);
        for y in 0..half {
            for x in 0..half {
                let i = 2 * y * size + 2 * x;
                lr20.push(0.25 * (src[i] + src[i + 1] + src[i + size] + src[i + size + 1]));
            }
        }
    }
    (
        BandStack::new(FINE_BANDS.to_vec(), size, size, 100, hr10).expect("valid 10m stack"),
        BandStack::new(COARSE_BANDS.to_vec(), half, half, 200, lr20).expect("valid 20m stack"),
    )
}
