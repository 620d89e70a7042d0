//! Section arithmetic of the volumetric 1-shot protocol: the class's slice
//! range in both scans is cut into `C` balanced sections, and each query
//! section is segmented from the middle slice of the matching support section.

use std::ops::Range;

/// Splits `range` into `min(sections, len)` contiguous chunks whose sizes
/// differ by at most one, larger chunks first.
pub fn balanced_partition(range: Range<usize>, sections: usize) -> Vec<Range<usize>> {
    let len = range.len();
    let n = sections.min(len);
    if n == 0 {
        return Vec::new();
    }
    let (base, extra) = (len / n, len % n);
    let mut out = Vec::with_capacity(n);
    let mut start = range.start;
    for i in 0..n {
        let size = base + usize::from(i < extra);
        out.push(start..start + size);
        start += size;
    }
    out
}

/// Middle slice (`start + len / 2`) of each support section.
pub fn support_reference_indices(range: Range<usize>, sections: usize) -> Vec<usize> {
    balanced_partition(range, sections)
        .into_iter()
        .map(|s| s.start + s.len() / 2)
        .collect()
}

/// Pairs every query section with its support reference slice. Both ranges
/// are cut into the same number of sections, `min(C, |query|, |support|)`.
pub fn section_plan(query: Range<usize>, support: Range<usize>, sections: usize) -> Vec<(Range<usize>, usize)> {
    let n = sections.min(query.len()).min(support.len());
    balanced_partition(query, n)
        .into_iter()
        .zip(support_reference_indices(support, n))
        .collect()
}
