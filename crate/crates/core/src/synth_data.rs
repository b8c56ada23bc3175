//! Synthetic contextual scenes.
//!
//! Object identity is written only into the cells an object covers; the scene
//! type is written only into background cells. Categories of an ambiguous
//! pair share one appearance prototype and one size, so a model that reads
//! object interiors alone cannot tell them apart.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::numerics::{mix_seed, rng_from};

const MAX_PLACEMENT_TRIES: usize = 100;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Category {
    pub name: String,
    /// Interior cell value before noise; length `channels`.
    pub prototype: Vec<f64>,
    /// Relative placement weight per scene type, each in `[0, 1]`.
    pub scene_affinity: Vec<f64>,
    /// Width and height in whole cells.
    pub size: (u32, u32),
}

/// When `anchor` is placed, `partner` follows with probability `prob`,
/// centered at the anchor center plus `offset` plus rounded gaussian jitter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cooccurrence {
    pub anchor: usize,
    pub partner: usize,
    pub prob: f64,
    pub offset: (f64, f64),
    pub jitter: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldSpec {
    pub scene_names: Vec<String>,
    pub categories: Vec<Category>,
    pub cooccur: Vec<Cooccurrence>,
    pub ambiguous_pairs: Vec<(usize, usize)>,
    /// Background cell value per scene type; length `channels` each.
    pub scene_bias: Vec<Vec<f64>>,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub noise_sigma: f64,
    pub min_objects: usize,
    pub max_objects: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GtObject {
    pub bbox: BBox,
    pub category: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneSample {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    /// Row-major cells, channel-minor: `(y * width + x) * channels + c`.
    pub grid: Vec<f64>,
    pub scene_type: usize,
    pub gt: Vec<GtObject>,
}

impl SceneSample {
    pub fn cell(&self, x: usize, y: usize) -> &[f64] {
        let start = (y * self.width + x) * self.channels;
        &self.grid[start..start + self.channels]
    }

    pub fn cell_mut(&mut self, x: usize, y: usize) -> &mut [f64] {
        let start = (y * self.width + x) * self.channels;
        &mut self.grid[start..start + self.channels]
    }
}

/// Inclusive cell index range whose centers lie inside `[lo, hi]`, clamped to
/// `[0, n)`. `None` when no cell center falls inside.
pub fn covered_cells(lo: f64, hi: f64, n: usize) -> Option<(usize, usize)> {
    let first = (lo - 0.5).ceil().max(0.0);
    let last = (hi - 0.5).floor().min(n as f64 - 1.0);
    if first > last {
        None
    } else {
        Some((first as usize, last as usize))
    }
}

impl WorldSpec {
    pub fn num_scene_types(&self) -> usize {
        self.scene_names.len()
    }

    pub fn num_categories(&self) -> usize {
        self.categories.len()
    }

    pub fn category_index(&self, name: &str) -> Option<usize> {
        self.categories.iter().position(|c| c.name == name)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(format!("world: {msg}")));
        if self.height < 4 || self.width < 4 {
            return bad(format!("grid {}x{} must be at least 4x4", self.height, self.width));
        }
        if self.channels < 2 {
            return bad(format!("need at least 2 channels, got {}", self.channels));
        }
        if self.scene_names.is_empty() || self.categories.is_empty() {
            return bad("needs at least one scene type and one category".into());
        }
        if self.scene_bias.len() != self.num_scene_types()
            || self.scene_bias.iter().any(|b| b.len() != self.channels)
        {
            return bad("scene_bias must have one channels-long vector per scene type".into());
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return bad(format!("noise_sigma must be non-negative, got {}", self.noise_sigma));
        }
        if self.min_objects == 0 || self.min_objects > self.max_objects {
            return bad(format!(
                "objects per scene range {}..={} is invalid",
                self.min_objects, self.max_objects
            ));
        }
        let in_unit = |p: f64| (0.0..=1.0).contains(&p);
        for c in &self.categories {
            if c.prototype.len() != self.channels {
                return bad(format!("category {} prototype has wrong length", c.name));
            }
            if c.scene_affinity.len() != self.num_scene_types() || !c.scene_affinity.iter().all(|&p| in_unit(p)) {
                return bad(format!("category {} scene_affinity invalid", c.name));
            }
            let (w, h) = c.size;
            if w == 0 || h == 0 || w as usize > self.width || h as usize > self.height {
                return bad(format!("category {} size {w}x{h} does not fit the grid", c.name));
            }
        }
        for s in 0..self.num_scene_types() {
            if self.categories.iter().all(|c| c.scene_affinity[s] == 0.0) {
                return bad(format!("scene type {s} places no categories"));
            }
        }
        let k = self.num_categories();
        for r in &self.cooccur {
            if r.anchor >= k || r.partner >= k || !in_unit(r.prob) || r.jitter < 0.0 {
                return bad(format!("invalid co-occurrence rule {r:?}"));
            }
        }
        for &(a, b) in &self.ambiguous_pairs {
            if a >= k || b >= k || a == b {
                return bad(format!("invalid ambiguous pair ({a}, {b})"));
            }
            let (ca, cb) = (&self.categories[a], &self.categories[b]);
            if ca.prototype != cb.prototype || ca.size != cb.size {
                return bad(format!("ambiguous pair {} / {} must share prototype and size", ca.name, cb.name));
            }
        }
        Ok(())
    }

    pub fn is_similar(&self, a: usize, b: usize) -> bool {
        self.ambiguous_pairs
            .iter()
            .any(|&(x, y)| (x == a && y == b) || (x == b && y == a))
    }

    /// SHA-256 over the canonical JSON encoding.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("world spec serializes");
        hex::encode(Sha256::digest(&bytes))
    }
}

fn unit_prototype(channels: usize, identity: usize) -> Vec<f64> {
    let mut p = vec![0.0; channels];
    p[0] = 0.6;
    p[identity] = 0.8;
    p
}

/// Two scene types (river, office) and six categories. Boat and car share an
/// appearance and are separated only by scene; a mouse accompanies 90% of
/// laptops, placed just to the laptop's lower right.
pub fn default_world() -> WorldSpec {
    const C: usize = 8;
    let cat = |name: &str, identity: usize, river: f64, office: f64, size: (u32, u32)| Category {
        name: name.to_string(),
        prototype: unit_prototype(C, identity),
        scene_affinity: vec![river, office],
        size,
    };
    let categories = vec![
        cat("boat", 1, 0.95, 0.05, (5, 5)),
        cat("car", 1, 0.05, 0.95, (5, 5)),
        cat("bird", 2, 0.8, 0.2, (5, 5)),
        cat("laptop", 3, 0.1, 0.9, (5, 5)),
        cat("mouse", 4, 0.0, 0.0, (1, 1)),
        cat("chair", 5, 0.25, 0.6, (5, 5)),
    ];
    let mut river = vec![0.0; C];
    river[6] = 0.5;
    let mut office = vec![0.0; C];
    office[7] = 0.5;
    WorldSpec {
        scene_names: vec!["river".into(), "office".into()],
        categories,
        cooccur: vec![Cooccurrence {
            anchor: 3,
            partner: 4,
            prob: 0.9,
            offset: (4.0, 2.0),
            jitter: 1.0,
        }],
        ambiguous_pairs: vec![(0, 1)],
        scene_bias: vec![river, office],
        height: 16,
        width: 16,
        channels: C,
        noise_sigma: 0.25,
        min_objects: 2,
        max_objects: 5,
    }
}

struct Placer<'a> {
    world: &'a WorldSpec,
    placed: Vec<GtObject>,
}

impl Placer<'_> {
    fn fits(&self, b: &BBox) -> bool {
        b.within(self.world.width as f64, self.world.height as f64)
            && self.placed.iter().all(|o| o.bbox.intersection(b) <= 0.0)
    }

    fn try_place_random(&mut self, category: usize, rng: &mut ChaCha8Rng) -> bool {
        let (w, h) = self.world.categories[category].size;
        let max_x = self.world.width as u32 - w;
        let max_y = self.world.height as u32 - h;
        for _ in 0..MAX_PLACEMENT_TRIES {
            let x0 = rng.random_range(0..=max_x) as f64;
            let y0 = rng.random_range(0..=max_y) as f64;
            let b = BBox::from_corners(x0, y0, x0 + w as f64, y0 + h as f64);
            if self.fits(&b) {
                self.placed.push(GtObject { bbox: b, category });
                return true;
            }
        }
        false
    }

    fn try_place_near(&mut self, rule: &Cooccurrence, anchor: &BBox, rng: &mut ChaCha8Rng) -> bool {
        let (w, h) = self.world.categories[rule.partner].size;
        let (w, h) = (w as f64, h as f64);
        for _ in 0..MAX_PLACEMENT_TRIES {
            let jx: f64 = StandardNormal.sample(rng);
            let jy: f64 = StandardNormal.sample(rng);
            let cx = anchor.cx + rule.offset.0 + rule.jitter * jx;
            let cy = anchor.cy + rule.offset.1 + rule.jitter * jy;
            // snap the corner to the cell lattice
            let x0 = (cx - 0.5 * w).round();
            let y0 = (cy - 0.5 * h).round();
            let b = BBox::from_corners(x0, y0, x0 + w, y0 + h);
            if self.fits(&b) {
                self.placed.push(GtObject {
                    bbox: b,
                    category: rule.partner,
                });
                return true;
            }
        }
        false
    }
}

fn pick_weighted(weights: &[f64], rng: &mut ChaCha8Rng) -> usize {
    let total: f64 = weights.iter().sum();
    let mut u = rng.random_range(0.0..total);
    for (i, &w) in weights.iter().enumerate() {
        if u < w {
            return i;
        }
        u -= w;
    }
    weights.iter().rposition(|&w| w > 0.0).unwrap_or(0)
}

/// Generates sample `index` of the stream keyed by `seed`. Depends only on
/// `(world, seed, index)`.
pub fn generate_one(world: &WorldSpec, seed: u64, index: u64) -> SceneSample {
    let mut rng = rng_from(mix_seed(seed, index));
    let scene_type = rng.random_range(0..world.num_scene_types());
    let target = rng.random_range(world.min_objects..=world.max_objects);
    let weights: Vec<f64> = world.categories.iter().map(|c| c.scene_affinity[scene_type]).collect();

    let mut placer = Placer { world, placed: Vec::new() };
    let mut draws = 0;
    while placer.placed.len() < target && draws < 4 * MAX_PLACEMENT_TRIES {
        draws += 1;
        let category = pick_weighted(&weights, &mut rng);
        let rules: Vec<&Cooccurrence> = world.cooccur.iter().filter(|r| r.anchor == category).collect();
        // keep room for every partner this anchor might bring along
        if placer.placed.len() + 1 + rules.len() > world.max_objects {
            continue;
        }
        if !placer.try_place_random(category, &mut rng) {
            continue;
        }
        let anchor = placer.placed.last().expect("just placed").bbox;
        for rule in rules {
            if rng.random_bool(rule.prob) {
                placer.try_place_near(rule, &anchor, &mut rng);
            }
        }
    }
    let gt = placer.placed;

    let (h, w, c) = (world.height, world.width, world.channels);
    let noise = Normal::new(0.0, world.noise_sigma).expect("validated sigma");
    let mut sample = SceneSample {
        height: h,
        width: w,
        channels: c,
        grid: vec![0.0; h * w * c],
        scene_type,
        gt,
    };
    let mut owner: Vec<Option<usize>> = vec![None; h * w];
    for obj in &sample.gt {
        let (Some((xa, xb)), Some((ya, yb))) = (
            covered_cells(obj.bbox.x0(), obj.bbox.x1(), w),
            covered_cells(obj.bbox.y0(), obj.bbox.y1(), h),
        ) else {
            continue;
        };
        for y in ya..=yb {
            for x in xa..=xb {
                owner[y * w + x] = Some(obj.category);
            }
        }
    }
    for y in 0..h {
        for x in 0..w {
            let base = match owner[y * w + x] {
                Some(cat) => &world.categories[cat].prototype,
                None => &world.scene_bias[scene_type],
            };
            let cell = sample.cell_mut(x, y);
            for (v, b) in cell.iter_mut().zip(base) {
                *v = b + noise.sample(&mut rng);
            }
        }
    }
    sample
}

pub fn generate(world: &WorldSpec, seed: u64, n: usize) -> Result<Vec<SceneSample>> {
    world.validate()?;
    if n == 0 {
        return Err(Error::Config("generate: n must be at least 1".into()));
    }
    Ok((0..n as u64).map(|i| generate_one(world, seed, i)).collect())
}
