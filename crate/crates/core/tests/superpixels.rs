//! Felzenszwalb segmentation against a reference labeling of fixed images.

use std::collections::HashMap;

use ndarray::Array2;
use serde::Deserialize;

use protoseg_core::data::{generate_superpixels, FelzenszwalbParams};

#[derive(Deserialize)]
struct Case {
    scale: f64,
    sigma: f64,
    min_size: usize,
    labels: Vec<Vec<i64>>,
}

#[derive(Deserialize)]
struct HalfPlanes {
    image: Vec<Vec<f32>>,
    #[serde(flatten)]
    case: Case,
}

#[derive(Deserialize)]
struct Fixture {
    image: Vec<Vec<f32>>,
    cases: Vec<Case>,
    half_planes: HalfPlanes,
}

fn fixture() -> Fixture {
    let text = include_str!("fixtures/felzenszwalb_reference.json");
    serde_json::from_str(text).expect("fixture parses")
}

fn grid<T: Copy>(rows: &[Vec<T>]) -> Array2<T> {
    let (h, w) = (rows.len(), rows[0].len());
    Array2::from_shape_fn((h, w), |(r, c)| rows[r][c])
}

/// True when both labelings induce the same partition of the pixels.
fn same_partition(a: &Array2<u32>, b: &Array2<i64>) -> bool {
    let mut fwd = HashMap::new();
    let mut back = HashMap::new();
    a.iter().zip(b.iter()).all(|(&x, &y)| *fwd.entry(x).or_insert(y) == y && *back.entry(y).or_insert(x) == x)
}

fn run(image: &[Vec<f32>], case: &Case) {
    let params = FelzenszwalbParams {
        scale: case.scale,
        sigma: case.sigma,
        min_size: case.min_size,
    };
    let got = generate_superpixels(grid(image).view(), &params).unwrap();
    let want = grid(&case.labels);
    assert!(
        same_partition(&got.segments, &want),
        "partition differs for scale {} sigma {} min_size {}:\n{:?}\nvs\n{:?}",
        case.scale,
        case.sigma,
        case.min_size,
        got.segments,
        want
    );
    let regions = want.iter().collect::<std::collections::HashSet<_>>().len();
    assert_eq!(got.num_segments, regions);
}

#[test]
fn matches_reference_partitions() {
    let f = fixture();
    for case in &f.cases {
        run(&f.image, case);
    }
}

#[test]
fn matches_reference_on_half_planes() {
    let f = fixture();
    run(&f.half_planes.image, &f.half_planes.case);
}
