//! Seeded synthetic multidomain counting benchmark.
//!
//! Each domain draws a head count from a log-normal law and scatters the
//! heads either uniformly or around a few cluster centers. A domain may
//! borrow its partner's generative law with probability `overlap_weight`
//! while keeping its own collection label, which plants genuinely
//! overlapping scenes with known provenance.
//!
//! On disk a benchmark is
//!
//! ```text
//! <root>/manifest.json
//! <root>/{train,test}/domain_<m>/scene_<image_id>.json
//! ```
//!
//! where each scene record stores only `image_id`, `domain_id`, `points`,
//! `H` and `W`; density maps are re-rendered on load.
//!
//! Seeds: scene `i` of domain `m` in split `s` (train = 0, test = 1) is drawn
//! from `ChaCha8(derive_seed(seed, [s, m, i]))`, so any scene can be
//! regenerated independently of the others.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Matrix, Tensor4};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum Layout {
    Uniform,
    Clustered { n_clusters: usize, spread: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainSpec {
    pub domain_id: usize,
    /// Mean of `ln(count)`.
    pub count_log_mean: f64,
    /// Standard deviation of `ln(count)`.
    pub count_log_std: f64,
    pub layout: Layout,
    #[serde(default)]
    pub overlap_weight: f64,
    #[serde(default)]
    pub partner_id: Option<usize>,
}

impl DomainSpec {
    /// Mean of the untruncated log-normal count law.
    pub fn expected_count(&self) -> f64 {
        (self.count_log_mean + 0.5 * self.count_log_std * self.count_log_std).exp()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Geometry {
    pub height: usize,
    pub width: usize,
    pub kernel_size: usize,
    pub kernel_sigma: f64,
}

impl Default for Geometry {
    fn default() -> Self {
        Geometry {
            height: 16,
            width: 16,
            kernel_size: 5,
            kernel_sigma: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSizes {
    pub train: usize,
    pub test: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }

    fn tag(self) -> u64 {
        match self {
            Split::Train => 0,
            Split::Test => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchmarkSpec {
    pub seed: u64,
    #[serde(default)]
    pub geometry: Geometry,
    pub domains: Vec<DomainSpec>,
    /// One entry per domain.
    pub sizes: Vec<SplitSizes>,
}

impl BenchmarkSpec {
    /// Three domains on a 16×16 grid: a dominant sparse domain with 600
    /// training scenes and two minority domains with 150 each. The second
    /// minority borrows the dominant domain's law for a share of its scenes.
    pub fn default_recipe(seed: u64) -> Self {
        BenchmarkSpec {
            seed,
            geometry: Geometry::default(),
            domains: vec![
                DomainSpec {
                    domain_id: 0,
                    count_log_mean: 12f64.ln(),
                    count_log_std: 0.35,
                    layout: Layout::Uniform,
                    overlap_weight: 0.0,
                    partner_id: None,
                },
                DomainSpec {
                    domain_id: 1,
                    count_log_mean: 60f64.ln(),
                    count_log_std: 0.3,
                    layout: Layout::Clustered {
                        n_clusters: 3,
                        spread: 1.5,
                    },
                    overlap_weight: 0.0,
                    partner_id: None,
                },
                DomainSpec {
                    domain_id: 2,
                    count_log_mean: 30f64.ln(),
                    count_log_std: 0.3,
                    layout: Layout::Clustered {
                        n_clusters: 2,
                        spread: 3.0,
                    },
                    overlap_weight: 0.3,
                    partner_id: Some(0),
                },
            ],
            sizes: vec![
                SplitSizes { train: 600, test: 100 },
                SplitSizes { train: 150, test: 100 },
                SplitSizes { train: 150, test: 100 },
            ],
        }
    }

    pub fn num_domains(&self) -> usize {
        self.domains.len()
    }

    pub fn validate(&self) -> Result<()> {
        let m = self.domains.len();
        if m == 0 {
            return Err(Error::Config("at least one domain is required".into()));
        }
        if self.sizes.len() != m {
            return Err(Error::Config(format!(
                "{} split sizes given for {m} domains",
                self.sizes.len()
            )));
        }
        let g = &self.geometry;
        if g.height == 0 || g.width == 0 {
            return Err(Error::Config("grid must be non-empty".into()));
        }
        if g.kernel_size.is_multiple_of(2) {
            return Err(Error::Config(format!("kernel size {} must be odd", g.kernel_size)));
        }
        if g.kernel_sigma <= 0.0 {
            return Err(Error::Config("kernel sigma must be positive".into()));
        }
        for (i, d) in self.domains.iter().enumerate() {
            if d.domain_id != i {
                return Err(Error::Config(format!(
                    "domain at position {i} has id {}; ids must be 0..M in order",
                    d.domain_id
                )));
            }
            if !(0.0..=1.0).contains(&d.overlap_weight) {
                return Err(Error::Config(format!(
                    "domain {i}: overlap_weight {} outside [0, 1]",
                    d.overlap_weight
                )));
            }
            if !(d.count_log_std >= 0.0) || !d.count_log_mean.is_finite() {
                return Err(Error::Config(format!("domain {i}: invalid count law")));
            }
            match d.partner_id {
                Some(p) if p >= m || p == i => {
                    return Err(Error::Config(format!("domain {i}: invalid partner {p}")));
                }
                None if d.overlap_weight > 0.0 => {
                    return Err(Error::Config(format!(
                        "domain {i}: overlap_weight > 0 needs a partner_id"
                    )));
                }
                _ => {}
            }
            if let Layout::Clustered { n_clusters, spread } = d.layout {
                if n_clusters == 0 || !(spread > 0.0) {
                    return Err(Error::Config(format!("domain {i}: invalid cluster layout")));
                }
            }
        }
        for (i, s) in self.sizes.iter().enumerate() {
            if s.train == 0 || s.test == 0 {
                return Err(Error::Config(format!("domain {i}: split sizes must be at least 1")));
            }
        }
        Ok(())
    }
}

/// SplitMix64 finalizer.
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Expands a root seed along a path of counters:
/// `s₀ = splitmix64(seed)`, `s_{k+1} = splitmix64(s_k ⊕ path[k])`.
pub fn derive_seed(seed: u64, path: &[u64]) -> u64 {
    path.iter().fold(splitmix64(seed), |acc, &p| splitmix64(acc ^ p))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub image_id: u64,
    pub domain_id: usize,
    pub points: Vec<[f64; 2]>,
    /// Whether the scene was drawn from the partner domain's law.
    pub from_partner: bool,
    /// `(1, 1, H, W)` point impulses.
    pub input_grid: Tensor4,
    pub gt_density: Matrix,
    pub gt_count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SceneRecord {
    image_id: u64,
    domain_id: usize,
    points: Vec<[f64; 2]>,
    #[serde(rename = "H")]
    height: usize,
    #[serde(rename = "W")]
    width: usize,
}

impl Scene {
    pub fn from_points(
        image_id: u64,
        domain_id: usize,
        points: Vec<[f64; 2]>,
        geom: &Geometry,
    ) -> Result<Self> {
        let gt_density = render_density(&points, geom.height, geom.width, geom.kernel_size, geom.kernel_sigma)?;
        let mut input_grid = Tensor4::zeros([1, 1, geom.height, geom.width]);
        for p in &points {
            let (r, c) = (p[0].floor() as usize, p[1].floor() as usize);
            input_grid.data_mut()[r * geom.width + c] += 1.0;
        }
        Ok(Scene {
            image_id,
            domain_id,
            gt_count: points.len(),
            points,
            from_partner: false,
            input_grid,
            gt_density,
        })
    }

    fn record(&self) -> SceneRecord {
        let [_, _, h, w] = self.input_grid.shape();
        SceneRecord {
            image_id: self.image_id,
            domain_id: self.domain_id,
            points: self.points.clone(),
            height: h,
            width: w,
        }
    }
}

fn sample_points(law: &DomainSpec, geom: &Geometry, rng: &mut ChaCha8Rng) -> Result<Vec<[f64; 2]>> {
    let (h, w) = (geom.height as f64, geom.width as f64);
    let max_count = geom.height * geom.width;
    let lognormal = LogNormal::new(law.count_log_mean, law.count_log_std)
        .map_err(|e| Error::Config(format!("count law: {e}")))?;
    let count = (lognormal.sample(rng).round() as usize).clamp(1, max_count);
    let inside = |r: f64, c: f64| r >= 0.0 && r < h && c >= 0.0 && c < w;
    let mut points = Vec::with_capacity(count);
    match law.layout {
        Layout::Uniform => {
            for _ in 0..count {
                points.push([rng.random_range(0.0..h), rng.random_range(0.0..w)]);
            }
        }
        Layout::Clustered { n_clusters, spread } => {
            let centers: Vec<[f64; 2]> = (0..n_clusters)
                .map(|_| [rng.random_range(0.0..h), rng.random_range(0.0..w)])
                .collect();
            let offset = Normal::new(0.0, spread).map_err(|e| Error::Config(format!("cluster spread: {e}")))?;
            for _ in 0..count {
                let center = centers[rng.random_range(0..n_clusters)];
                let mut placed = None;
                for _ in 0..64 {
                    let r = center[0] + offset.sample(rng);
                    let c = center[1] + offset.sample(rng);
                    if inside(r, c) {
                        placed = Some([r, c]);
                        break;
                    }
                }
                points.push(placed.unwrap_or(center));
            }
        }
    }
    Ok(points)
}

/// Draws one scene. With probability `overlap_weight` the partner's law is
/// used; the collection label stays `spec.domain_id` either way.
pub fn sample_scene(
    spec: &DomainSpec,
    partner: Option<&DomainSpec>,
    geom: &Geometry,
    image_id: u64,
    seed: u64,
) -> Result<Scene> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let borrow = rng.random::<f64>() < spec.overlap_weight;
    let law = match (borrow, partner) {
        (true, Some(p)) => p,
        (true, None) => {
            return Err(Error::Config(format!(
                "domain {} overlaps but no partner law was supplied",
                spec.domain_id
            )))
        }
        (false, _) => spec,
    };
    let points = sample_points(law, geom, &mut rng)?;
    let mut scene = Scene::from_points(image_id, spec.domain_id, points, geom)?;
    scene.from_partner = borrow;
    Ok(scene)
}

/// Sum of a truncated Gaussian per head, centered on the head's real
/// coordinate within a `kernel_size` window around its pixel. Each head's
/// kernel is renormalized over the cells that fall inside the grid, so every
/// head contributes exactly unit mass.
pub fn render_density(
    points: &[[f64; 2]],
    height: usize,
    width: usize,
    kernel_size: usize,
    sigma: f64,
) -> Result<Matrix> {
    if kernel_size.is_multiple_of(2) {
        return Err(Error::InvalidArgument(format!("kernel size {kernel_size} must be odd")));
    }
    let half = (kernel_size / 2) as isize;
    let two_s2 = 2.0 * sigma * sigma;
    let mut map = Matrix::zeros(height, width);
    let mut weights = Vec::with_capacity(kernel_size * kernel_size);
    for p in points {
        let (r, c) = (p[0], p[1]);
        if !(r >= 0.0 && r < height as f64 && c >= 0.0 && c < width as f64) {
            return Err(Error::InvalidArgument(format!(
                "point ({r}, {c}) outside {height}x{width} grid"
            )));
        }
        let (pr, pc) = (r.floor() as isize, c.floor() as isize);
        weights.clear();
        let mut total = 0.0;
        for dr in -half..=half {
            for dc in -half..=half {
                let (i, j) = (pr + dr, pc + dc);
                if i < 0 || j < 0 || i >= height as isize || j >= width as isize {
                    continue;
                }
                let di = i as f64 + 0.5 - r;
                let dj = j as f64 + 0.5 - c;
                let wgt = (-(di * di + dj * dj) / two_s2).exp();
                total += wgt;
                weights.push((i as usize, j as usize, wgt));
            }
        }
        for &(i, j, wgt) in &weights {
            let v = map.get(i, j) + wgt / total;
            map.set(i, j, v);
        }
    }
    Ok(map)
}

pub fn count(map: &[f64]) -> f64 {
    map.iter().sum()
}

/// `MAE = mean |ĝ − g|`, `RMSE = sqrt(mean |ĝ − g|²)`.
pub fn mae_rmse(pred: &[f64], gt: &[f64]) -> Result<(f64, f64)> {
    if pred.len() != gt.len() {
        return Err(Error::shape("mae_rmse", gt.len(), pred.len()));
    }
    if pred.is_empty() {
        return Err(Error::InvalidArgument("no counts to score".into()));
    }
    let n = pred.len() as f64;
    let (mut abs, mut sq) = (0.0, 0.0);
    for (p, g) in pred.iter().zip(gt) {
        let d = (p - g).abs();
        abs += d;
        sq += d * d;
    }
    Ok((abs / n, (sq / n).sqrt()))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub geometry: Geometry,
    pub num_domains: usize,
    /// Sorted by `image_id`.
    pub scenes: Vec<Scene>,
}

impl Dataset {
    pub fn domain_counts(&self) -> Vec<usize> {
        let mut out = vec![0; self.num_domains];
        for s in &self.scenes {
            out[s.domain_id] += 1;
        }
        out
    }

    pub fn by_domain(&self, domain: usize) -> Vec<&Scene> {
        self.scenes.iter().filter(|s| s.domain_id == domain).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchmarkSummary {
    pub root: PathBuf,
    /// `(train, test)` scene counts per domain.
    pub counts: Vec<(usize, usize)>,
}

pub fn generate_split(spec: &BenchmarkSpec, split: Split) -> Result<Dataset> {
    spec.validate()?;
    let mut scenes = Vec::new();
    let mut next_id = match split {
        Split::Train => 0,
        Split::Test => spec.sizes.iter().map(|s| s.train as u64).sum(),
    };
    for (m, dom) in spec.domains.iter().enumerate() {
        let n = match split {
            Split::Train => spec.sizes[m].train,
            Split::Test => spec.sizes[m].test,
        };
        let partner = dom.partner_id.map(|p| &spec.domains[p]);
        for i in 0..n {
            let seed = derive_seed(spec.seed, &[split.tag(), m as u64, i as u64]);
            scenes.push(sample_scene(dom, partner, &spec.geometry, next_id, seed)?);
            next_id += 1;
        }
    }
    Ok(Dataset {
        geometry: spec.geometry,
        num_domains: spec.num_domains(),
        scenes,
    })
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::json(path.display(), e))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Writes the benchmark under `root`, which must not already contain one.
pub fn build_benchmark(spec: &BenchmarkSpec, root: &Path) -> Result<BenchmarkSummary> {
    spec.validate()?;
    let mut counts = vec![(0, 0); spec.num_domains()];
    for split in [Split::Train, Split::Test] {
        let data = generate_split(spec, split)?;
        for m in 0..spec.num_domains() {
            let dir = root.join(split.as_str()).join(format!("domain_{m}"));
            fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        }
        for scene in &data.scenes {
            let path = root
                .join(split.as_str())
                .join(format!("domain_{}", scene.domain_id))
                .join(format!("scene_{:06}.json", scene.image_id));
            write_json(&path, &scene.record())?;
            let c = &mut counts[scene.domain_id];
            match split {
                Split::Train => c.0 += 1,
                Split::Test => c.1 += 1,
            }
        }
    }
    write_json(&root.join("manifest.json"), spec)?;
    Ok(BenchmarkSummary {
        root: root.to_path_buf(),
        counts,
    })
}

pub fn read_manifest(root: &Path) -> Result<BenchmarkSpec> {
    let path = root.join("manifest.json");
    if !path.exists() {
        return Err(Error::MissingDataset(root.to_path_buf()));
    }
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let spec: BenchmarkSpec = serde_json::from_str(&text).map_err(|e| Error::json(path.display(), e))?;
    spec.validate()?;
    Ok(spec)
}

pub fn load_split(root: &Path, split: Split) -> Result<Dataset> {
    let spec = read_manifest(root)?;
    let geom = spec.geometry;
    let mut scenes = Vec::new();
    for m in 0..spec.num_domains() {
        let dir = root.join(split.as_str()).join(format!("domain_{m}"));
        let entries = fs::read_dir(&dir).map_err(|e| Error::io(&dir, e))?;
        let mut paths: Vec<PathBuf> = entries
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "json"))
            .collect();
        paths.sort();
        for path in paths {
            let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
            let rec: SceneRecord = serde_json::from_str(&text).map_err(|e| Error::json(path.display(), e))?;
            if rec.domain_id != m || rec.height != geom.height || rec.width != geom.width {
                return Err(Error::Config(format!(
                    "{} does not match the manifest geometry or its domain directory",
                    path.display()
                )));
            }
            scenes.push(Scene::from_points(rec.image_id, rec.domain_id, rec.points, &geom)?);
        }
    }
    scenes.sort_by_key(|s| s.image_id);
    Ok(Dataset {
        geometry: geom,
        num_domains: spec.num_domains(),
        scenes,
    })
}
