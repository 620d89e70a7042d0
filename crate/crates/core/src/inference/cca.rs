//! Connected-component filtering of binary predictions by mean foreground
//! probability.

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Connectivity {
    Four,
    #[default]
    Eight,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConnectedComponent {
    /// Raster-order index of the component's first pixel among all components.
    pub label: usize,
    pub pixels: Vec<(usize, usize)>,
    pub size: usize,
    /// Mean foreground probability; NaN until scored.
    pub confidence: f64,
}

fn find(parent: &mut [usize], mut x: usize) -> usize {
    while parent[x] != x {
        parent[x] = parent[parent[x]];
        x = parent[x];
    }
    x
}

/// Labels foreground (non-zero) pixels with a two-pass union-find scan.
/// Components come out in raster order of their first pixel.
pub fn connected_components(mask: ArrayView2<u8>, connectivity: Connectivity) -> Vec<ConnectedComponent> {
    let (h, w) = mask.dim();
    let idx = |r: usize, c: usize| r * w + c;
    let mut parent: Vec<usize> = (0..h * w).collect();
    for r in 0..h {
        for c in 0..w {
            if mask[[r, c]] == 0 {
                continue;
            }
            let mut neighbours = Vec::with_capacity(4);
            if c > 0 {
                neighbours.push((r, c - 1));
            }
            if r > 0 {
                neighbours.push((r - 1, c));
                if connectivity == Connectivity::Eight {
                    if c > 0 {
                        neighbours.push((r - 1, c - 1));
                    }
                    if c + 1 < w {
                        neighbours.push((r - 1, c + 1));
                    }
                }
            }
            for (nr, nc) in neighbours {
                if mask[[nr, nc]] != 0 {
                    let a = find(&mut parent, idx(r, c));
                    let b = find(&mut parent, idx(nr, nc));
                    if a != b {
                        parent[a.max(b)] = a.min(b);
                    }
                }
            }
        }
    }
    let mut slot = vec![usize::MAX; h * w];
    let mut comps: Vec<ConnectedComponent> = Vec::new();
    for r in 0..h {
        for c in 0..w {
            if mask[[r, c]] == 0 {
                continue;
            }
            let root = find(&mut parent, idx(r, c));
            if slot[root] == usize::MAX {
                slot[root] = comps.len();
                comps.push(ConnectedComponent {
                    label: comps.len(),
                    pixels: Vec::new(),
                    size: 0,
                    confidence: f64::NAN,
                });
            }
            let comp = &mut comps[slot[root]];
            comp.pixels.push((r, c));
            comp.size += 1;
        }
    }
    comps
}

/// Mean of `probs` over the component's pixels.
pub fn component_confidence(component: &ConnectedComponent, probs: ArrayView2<f32>) -> Result<f64> {
    if component.pixels.is_empty() {
        return Err(Error::InvalidInput("component has no pixels".into()));
    }
    let (h, w) = probs.dim();
    let mut sum = 0.0;
    for &(r, c) in &component.pixels {
        if r >= h || c >= w {
            return Err(Error::ShapeMismatch(format!(
                "component pixel ({r}, {c}) outside probability map {h}x{w}"
            )));
        }
        sum += probs[[r, c]] as f64;
    }
    Ok(sum / component.pixels.len() as f64)
}

/// Keeps only the component with the highest mean probability. Ties go to
/// the larger component, then to the lower label. An empty mask stays empty.
pub fn select_most_confident(
    mask: ArrayView2<u8>,
    probs: ArrayView2<f32>,
    connectivity: Connectivity,
) -> Result<Array2<u8>> {
    if mask.dim() != probs.dim() {
        return Err(Error::ShapeMismatch(format!(
            "mask {:?} vs probabilities {:?}",
            mask.dim(),
            probs.dim()
        )));
    }
    let mut best: Option<ConnectedComponent> = None;
    for mut comp in connected_components(mask, connectivity) {
        comp.confidence = component_confidence(&comp, probs)?;
        let better = match &best {
            None => true,
            Some(b) => comp.confidence > b.confidence || (comp.confidence == b.confidence && comp.size > b.size),
        };
        if better {
            best = Some(comp);
        }
    }
    let mut out = Array2::zeros(mask.dim());
    if let Some(b) = best {
        for (r, c) in b.pixels {
            out[[r, c]] = 1;
        }
    }
    Ok(out)
}
