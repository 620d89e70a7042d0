//! Graph-based (Felzenszwalb–Huttenlocher) superpixels used as self-supervised
//! pseudo-labels.
//!
//! Conventions follow the widely used scikit-image variant so cached
//! superpixels are interchangeable with it: intensities are expected in
//! `[0, 1]` and `scale` is expressed on a 0–255 intensity scale (the merge
//! constant is `scale / 255`), the image is smoothed with a reflect-padded
//! Gaussian truncated at 4 sigma, and the graph is 8-connected.

use std::path::{Path, PathBuf};

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FelzenszwalbParams {
    /// Larger values produce larger regions.
    pub scale: f64,
    /// Gaussian pre-smoothing width in pixels.
    pub sigma: f64,
    /// Regions smaller than this are merged into a neighbour.
    pub min_size: usize,
}

impl Default for FelzenszwalbParams {
    fn default() -> Self {
        FelzenszwalbParams {
            scale: 100.0,
            sigma: 0.8,
            min_size: 400,
        }
    }
}

/// Region ids in `0..num_segments`, numbered in raster order of each
/// region's first pixel.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SuperpixelMap {
    pub segments: Array2<u32>,
    pub num_segments: usize,
}

impl SuperpixelMap {
    pub fn region_mask(&self, id: u32) -> Array2<f32> {
        self.segments.mapv(|s| if s == id { 1.0 } else { 0.0 })
    }

    pub fn region_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.num_segments];
        for &s in &self.segments {
            sizes[s as usize] += 1;
        }
        sizes
    }

    /// Builds a map from arbitrary integer labels, renumbering them densely.
    pub fn from_labels(labels: ArrayView2<i32>) -> Result<Self> {
        let mut remap = std::collections::HashMap::new();
        let mut segments = Array2::<u32>::zeros(labels.dim());
        for (idx, &l) in labels.indexed_iter() {
            let next = remap.len() as u32;
            segments[idx] = *remap.entry(l).or_insert(next);
        }
        if remap.is_empty() {
            return Err(Error::InvalidInput("empty superpixel map".into()));
        }
        Ok(SuperpixelMap {
            num_segments: remap.len(),
            segments,
        })
    }
}

struct Forest {
    parent: Vec<usize>,
    size: Vec<usize>,
}

impl Forest {
    fn new(n: usize) -> Self {
        Forest {
            parent: (0..n).collect(),
            size: vec![1; n],
        }
    }

    fn find(&mut self, mut x: usize) -> usize {
        let mut root = x;
        while self.parent[root] != root {
            root = self.parent[root];
        }
        while self.parent[x] != root {
            let next = self.parent[x];
            self.parent[x] = root;
            x = next;
        }
        root
    }

    /// Joins two roots; the smaller index becomes the new root.
    fn join(&mut self, a: usize, b: usize) -> usize {
        let (root, child) = if a < b { (a, b) } else { (b, a) };
        self.parent[child] = root;
        self.size[root] += self.size[child];
        root
    }
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (4.0 * sigma + 0.5) as isize;
    let mut k: Vec<f64> = (-radius..=radius)
        .map(|x| (-0.5 * (x as f64 / sigma).powi(2)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

/// Half-sample symmetric index reflection (`d c b a | a b c d | d c b a`).
fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let period = 2 * n;
    let mut m = i.rem_euclid(period);
    if m >= n {
        m = period - 1 - m;
    }
    m as usize
}

pub(crate) fn gaussian_smooth(image: &Array2<f64>, sigma: f64) -> Array2<f64> {
    if sigma <= 1e-15 {
        return image.clone();
    }
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as isize;
    let (h, w) = image.dim();
    let rows = Array2::from_shape_fn((h, w), |(y, x)| {
        k.iter()
            .enumerate()
            .map(|(t, kv)| kv * image[[reflect(y as isize + t as isize - r, h), x]])
            .sum::<f64>()
    });
    Array2::from_shape_fn((h, w), |(y, x)| {
        k.iter()
            .enumerate()
            .map(|(t, kv)| kv * rows[[y, reflect(x as isize + t as isize - r, w)]])
            .sum::<f64>()
    })
}

pub fn generate_superpixels(image: ArrayView2<f32>, params: &FelzenszwalbParams) -> Result<SuperpixelMap> {
    if image.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("superpixel input contains non-finite pixels".into()));
    }
    if !(params.scale.is_finite() && params.sigma.is_finite() && params.sigma >= 0.0) {
        return Err(Error::InvalidConfig(format!("bad felzenszwalb parameters {params:?}")));
    }
    let (h, w) = image.dim();
    if h == 0 || w == 0 {
        return Err(Error::InvalidInput("empty image".into()));
    }
    let smoothed = gaussian_smooth(&image.mapv(|v| v as f64), params.sigma);
    let k = params.scale / 255.0;
    let id = |y: usize, x: usize| y * w + x;

    // edge groups in the same order as the reference: right, down,
    // down-right, up-right
    let mut edges: Vec<(f64, usize, usize)> = Vec::with_capacity(4 * h * w);
    for y in 0..h {
        for x in 1..w {
            edges.push(((smoothed[[y, x]] - smoothed[[y, x - 1]]).abs(), id(y, x), id(y, x - 1)));
        }
    }
    for y in 1..h {
        for x in 0..w {
            edges.push(((smoothed[[y, x]] - smoothed[[y - 1, x]]).abs(), id(y, x), id(y - 1, x)));
        }
    }
    for y in 1..h {
        for x in 1..w {
            edges.push((
                (smoothed[[y, x]] - smoothed[[y - 1, x - 1]]).abs(),
                id(y, x),
                id(y - 1, x - 1),
            ));
        }
    }
    for y in 0..h.saturating_sub(1) {
        for x in 1..w {
            edges.push((
                (smoothed[[y + 1, x - 1]] - smoothed[[y, x]]).abs(),
                id(y, x),
                id(y + 1, x - 1),
            ));
        }
    }
    edges.sort_by(|a, b| a.0.total_cmp(&b.0));

    let mut forest = Forest::new(h * w);
    let mut internal = vec![0.0f64; h * w];
    for &(cost, a, b) in &edges {
        let (ra, rb) = (forest.find(a), forest.find(b));
        if ra == rb {
            continue;
        }
        let ta = internal[ra] + k / forest.size[ra] as f64;
        let tb = internal[rb] + k / forest.size[rb] as f64;
        if cost < ta.min(tb) {
            let root = forest.join(ra, rb);
            internal[root] = cost;
        }
    }
    for &(_, a, b) in &edges {
        let (ra, rb) = (forest.find(a), forest.find(b));
        if ra != rb && (forest.size[ra] < params.min_size || forest.size[rb] < params.min_size) {
            forest.join(ra, rb);
        }
    }

    let mut label_of_root = vec![u32::MAX; h * w];
    let mut next = 0u32;
    let mut segments = Array2::<u32>::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let root = forest.find(id(y, x));
            if label_of_root[root] == u32::MAX {
                label_of_root[root] = next;
                next += 1;
            }
            segments[[y, x]] = label_of_root[root];
        }
    }
    Ok(SuperpixelMap {
        segments,
        num_segments: next as usize,
    })
}

/// Per-slice superpixel files (`.npy`, int32) in a content-addressed directory.
#[derive(Clone, Debug)]
pub struct SuperpixelCache {
    dir: PathBuf,
}

impl SuperpixelCache {
    pub fn new(root: &Path, key: &str) -> Self {
        SuperpixelCache {
            dir: root.join("superpixels").join(key),
        }
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    fn path(&self, source: &str, z: usize) -> PathBuf {
        self.dir.join(format!("{source}_{z:04}.npy"))
    }

    pub fn get(&self, source: &str, z: usize) -> Result<Option<SuperpixelMap>> {
        let path = self.path(source, z);
        if !path.exists() {
            return Ok(None);
        }
        let labels: Array2<i32> = ndarray_npy::read_npy(&path).map_err(|e| Error::ArrayFile {
            path: path.clone(),
            message: e.to_string(),
        })?;
        SuperpixelMap::from_labels(labels.view()).map(Some)
    }

    /// Writes through a temporary file and renames, so concurrent readers
    /// never observe a partial file.
    pub fn put(&self, source: &str, z: usize, map: &SuperpixelMap) -> Result<()> {
        std::fs::create_dir_all(&self.dir).map_err(|e| Error::io(&self.dir, e))?;
        let path = self.path(source, z);
        let tmp = path.with_extension("npy.tmp");
        let labels = map.segments.mapv(|v| v as i32);
        ndarray_npy::write_npy(&tmp, &labels).map_err(|e| Error::ArrayFile {
            path: tmp.clone(),
            message: e.to_string(),
        })?;
        std::fs::rename(&tmp, &path).map_err(|e| Error::io(&path, e))
    }
}
