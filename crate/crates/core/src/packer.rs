//! Padding-minimizing KV layouts for batched verification.
//!
//! Requests of different lengths are laid out in a `B x L` KV tensor.
//! Instead of padding every row to the longest request, long requests are
//! cut at row boundaries and their tail is stitched next to shorter ones.
//! Attention over the packed tensor stays exact because every score is
//! normalized only over cells owned by the same request (the indicator
//! mask), aggregated across all rows the request occupies.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    /// Index of the request within the packed batch.
    pub request: usize,
    pub row: usize,
    pub col_start: usize,
    pub col_end: usize,
    /// Position of the segment's first token inside its request.
    pub token_offset: usize,
}

impl Segment {
    pub fn len(&self) -> usize {
        self.col_end - self.col_start
    }

    pub fn is_empty(&self) -> bool {
        self.col_end == self.col_start
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PackedLayout {
    /// KV tensor length `L`.
    pub length: usize,
    /// KV tensor width `B` (rows).
    pub width: usize,
    pub kv_lens: Vec<usize>,
    pub segments: Vec<Segment>,
    pub padding_tokens: usize,
    /// Rows each request's queries must be replicated to.
    pub q_replica_rows: Vec<usize>,
}

impl PackedLayout {
    pub fn kv_cells(&self) -> usize {
        self.length * self.width
    }

    /// Query rows beyond one per request, the price of decomposition.
    pub fn extra_query_rows(&self) -> usize {
        self.q_replica_rows.iter().sum::<usize>() - self.kv_lens.len()
    }

    pub fn decomposed_requests(&self) -> usize {
        self.q_replica_rows.iter().filter(|&&r| r > 1).count()
    }

    /// Checks every structural invariant of the layout.
    pub fn validate(&self) -> Result<()> {
        let total: usize = self.kv_lens.iter().sum();
        if self.kv_cells() != total + self.padding_tokens {
            return Err(Error::Layout(format!(
                "B*L = {} but tokens + padding = {}",
                self.kv_cells(),
                total + self.padding_tokens
            )));
        }
        let mut covered = vec![0usize; self.kv_lens.len()];
        let mut rows: Vec<Vec<usize>> = vec![Vec::new(); self.kv_lens.len()];
        for req in 0..self.kv_lens.len() {
            let mut segs: Vec<&Segment> =
                self.segments.iter().filter(|s| s.request == req).collect();
            segs.sort_by_key(|s| s.token_offset);
            for s in segs {
                if s.token_offset != covered[req] {
                    return Err(Error::Layout(format!(
                        "request {req} segments do not tile its tokens in order"
                    )));
                }
                covered[req] += s.len();
                if !rows[req].contains(&s.row) {
                    rows[req].push(s.row);
                }
            }
        }
        for (req, (&c, &len)) in covered.iter().zip(&self.kv_lens).enumerate() {
            if c != len {
                return Err(Error::Layout(format!(
                    "request {req} covers {c} of {len} tokens"
                )));
            }
            if rows[req].len() != self.q_replica_rows[req] {
                return Err(Error::Layout(format!(
                    "request {req} spans {} rows but q_replica_rows = {}",
                    rows[req].len(),
                    self.q_replica_rows[req]
                )));
            }
        }
        build_indicator(self).map(|_| ())
    }
}

/// Padding of the conventional layout: every request padded to the longest.
pub fn naive_padding(kv_lens: &[usize]) -> Result<usize> {
    let max = kv_lens
        .iter()
        .copied()
        .max()
        .ok_or_else(|| Error::Input("naive_padding of an empty batch".into()))?;
    Ok(kv_lens.iter().map(|l| max - l).sum())
}

/// Searches the tensor length `L` for the layout with the fewest padding
/// tokens at fixed width; ties go to the smaller `L`.
pub fn pack(kv_lens: &[usize], width: usize) -> Result<PackedLayout> {
    if width == 0 {
        return Err(Error::Config("tensor width B must be >= 1".into()));
    }
    if kv_lens.contains(&0) {
        return Err(Error::Input("every kv_len must be >= 1".into()));
    }
    let total: usize = kv_lens.iter().sum();
    let max_len = kv_lens.iter().copied().max().unwrap_or(0);
    let lo = total.div_ceil(width);
    let hi = max_len.max(lo);

    // padding is B * L - total, so the shortest feasible length is optimal
    let best = (lo..=hi).find_map(|length| pack_with_length(kv_lens, width, length));
    best.ok_or_else(|| Error::Layout("no feasible tensor length".into()))
}

/// First-fit-decreasing into `width` rows of `length` cells. A request that
/// fits in no row whole is cut at row boundaries across the first rows
/// with free space. Returns `None` when the tokens do not fit.
pub fn pack_with_length(kv_lens: &[usize], width: usize, length: usize) -> Option<PackedLayout> {
    let total: usize = kv_lens.iter().sum();
    if width * length < total {
        return None;
    }
    let mut order: Vec<usize> = (0..kv_lens.len()).collect();
    order.sort_by(|&a, &b| kv_lens[b].cmp(&kv_lens[a]).then(a.cmp(&b)));

    let mut fill = vec![0usize; width];
    let mut segments = Vec::new();
    let mut q_replica_rows = vec![0usize; kv_lens.len()];

    for req in order {
        let len = kv_lens[req];
        if let Some(row) = (0..width).find(|&r| length - fill[r] >= len) {
            segments.push(Segment {
                request: req,
                row,
                col_start: fill[row],
                col_end: fill[row] + len,
                token_offset: 0,
            });
            fill[row] += len;
            q_replica_rows[req] = 1;
            continue;
        }
        let mut placed = 0;
        for row in 0..width {
            if placed == len {
                break;
            }
            let free = length - fill[row];
            if free == 0 {
                continue;
            }
            let take = free.min(len - placed);
            segments.push(Segment {
                request: req,
                row,
                col_start: fill[row],
                col_end: fill[row] + take,
                token_offset: placed,
            });
            fill[row] += take;
            placed += take;
            q_replica_rows[req] += 1;
        }
        if placed < len {
            return None;
        }
    }

    segments.sort_by_key(|s| (s.row, s.col_start));
    Some(PackedLayout {
        length,
        width,
        kv_lens: kv_lens.to_vec(),
        segments,
        padding_tokens: width * length - total,
        q_replica_rows,
    })
}

/// Dense `B x L` owner grid: `Some(request)` or `None` for padding.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IndicatorMask {
    pub width: usize,
    pub length: usize,
    pub cells: Vec<Option<usize>>,
}

impl IndicatorMask {
    pub fn get(&self, row: usize, col: usize) -> Option<usize> {
        self.cells[row * self.length + col]
    }

    pub fn empty_cells(&self) -> usize {
        self.cells.iter().filter(|c| c.is_none()).count()
    }

    /// Distinct owners in `row`, in column order.
    pub fn owners(&self, row: usize) -> Vec<usize> {
        let mut out = Vec::new();
        for c in 0..self.length {
            if let Some(req) = self.get(row, c) {
                if !out.contains(&req) {
                    out.push(req);
                }
            }
        }
        out
    }
}

pub fn build_indicator(layout: &PackedLayout) -> Result<IndicatorMask> {
    let mut cells = vec![None; layout.width * layout.length];
    for s in &layout.segments {
        if s.row >= layout.width || s.col_end > layout.length || s.col_start > s.col_end {
            return Err(Error::Layout(format!("segment {s:?} outside the tensor")));
        }
        for c in s.col_start..s.col_end {
            let cell = &mut cells[s.row * layout.length + c];
            if cell.is_some() {
                return Err(Error::Layout(format!(
                    "cell ({}, {c}) claimed twice",
                    s.row
                )));
            }
            *cell = Some(s.request);
        }
    }
    Ok(IndicatorMask {
        width: layout.width,
        length: layout.length,
        cells,
    })
}

/// Small dense row-major matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_rows(rows: Vec<Vec<f64>>) -> Self {
        let cols = rows.first().map_or(0, Vec::len);
        let n = rows.len();
        let data: Vec<f64> = rows.into_iter().flatten().collect();
        assert_eq!(data.len(), n * cols, "ragged rows");
        Self {
            rows: n,
            cols,
            data,
        }
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn max_abs_diff(&self, other: &Matrix) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Per-request attention operands: `w` query rows and `kv_len` key/value rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyAttentionInput {
    pub q: Matrix,
    pub k: Matrix,
    pub v: Matrix,
}

fn check_shapes(q: &Matrix, k: &Matrix, v: &Matrix) -> Result<()> {
    if k.rows == 0 {
        return Err(Error::Input("attention needs at least one key".into()));
    }
    if q.cols != k.cols {
        return Err(Error::Input(format!(
            "query dim {} != key dim {}",
            q.cols, k.cols
        )));
    }
    if k.rows != v.rows {
        return Err(Error::Input(format!(
            "{} keys but {} values",
            k.rows, v.rows
        )));
    }
    Ok(())
}

/// Softmax attention scores `exp(q_i . k_j) / sum_j exp(q_i . k_j)`.
pub fn attention_scores(q: &Matrix, k: &Matrix) -> Result<Matrix> {
    check_shapes(q, k, k)?;
    let mut scores = Matrix::zeros(q.rows, k.rows);
    for i in 0..q.rows {
        let logits: Vec<f64> = (0..k.rows).map(|j| dot(q.row(i), k.row(j))).collect();
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
        let denom: f64 = exps.iter().sum();
        for (j, e) in exps.iter().enumerate() {
            scores.row_mut(i)[j] = e / denom;
        }
    }
    Ok(scores)
}

/// Dense per-request attention `O_i = sum_j a_ij V_j`.
pub fn reference_attention(q: &Matrix, k: &Matrix, v: &Matrix) -> Result<Matrix> {
    check_shapes(q, k, v)?;
    let scores = attention_scores(q, k)?;
    let mut out = Matrix::zeros(q.rows, v.cols);
    for i in 0..q.rows {
        for j in 0..k.rows {
            let a = scores.get(i, j);
            for (o, x) in out.row_mut(i).iter_mut().zip(v.row(j)) {
                *o += a * x;
            }
        }
    }
    Ok(out)
}

/// Physical packed K/V tensors, `B x L` cells of `d` values, zero in padding.
struct PackedKv {
    length: usize,
    dim: usize,
    k: Vec<f64>,
    v: Vec<f64>,
}

impl PackedKv {
    fn build(inputs: &[ToyAttentionInput], layout: &PackedLayout) -> Self {
        let dim = inputs.first().map_or(0, |x| x.k.cols);
        let vdim = inputs.first().map_or(0, |x| x.v.cols);
        let cells = layout.kv_cells();
        let mut k = vec![0.0; cells * dim];
        let mut v = vec![0.0; cells * vdim];
        for s in &layout.segments {
            let src = &inputs[s.request];
            for (n, col) in (s.col_start..s.col_end).enumerate() {
                let cell = s.row * layout.length + col;
                let token = s.token_offset + n;
                k[cell * dim..(cell + 1) * dim].copy_from_slice(src.k.row(token));
                v[cell * vdim..(cell + 1) * vdim].copy_from_slice(src.v.row(token));
            }
        }
        Self {
            length: layout.length,
            dim,
            k,
            v,
        }
    }

    fn key(&self, row: usize, col: usize) -> &[f64] {
        let cell = row * self.length + col;
        &self.k[cell * self.dim..(cell + 1) * self.dim]
    }

    fn value(&self, row: usize, col: usize, vdim: usize) -> &[f64] {
        let cell = row * self.length + col;
        &self.v[cell * vdim..(cell + 1) * vdim]
    }
}

fn check_packed_inputs(
    inputs: &[ToyAttentionInput],
    layout: &PackedLayout,
    mask: &IndicatorMask,
) -> Result<()> {
    if inputs.len() != layout.kv_lens.len() {
        return Err(Error::Consistency(format!(
            "{} inputs for a layout of {} requests",
            inputs.len(),
            layout.kv_lens.len()
        )));
    }
    for (idx, x) in inputs.iter().enumerate() {
        check_shapes(&x.q, &x.k, &x.v)?;
        if x.k.rows != layout.kv_lens[idx] {
            return Err(Error::Consistency(format!(
                "request {idx} has {} kv rows, layout expects {}",
                x.k.rows, layout.kv_lens[idx]
            )));
        }
        if x.k.cols != inputs[0].k.cols || x.v.cols != inputs[0].v.cols {
            return Err(Error::Input("mixed head dimensions in batch".into()));
        }
    }
    if mask.width != layout.width || mask.length != layout.length {
        return Err(Error::Consistency("mask shape differs from layout".into()));
    }
    let expected = build_indicator(layout)?;
    if &expected != mask {
        return Err(Error::Consistency(
            "mask cells disagree with layout segments".into(),
        ));
    }
    Ok(())
}

/// Running softmax state for one query over a subset of cells.
#[derive(Clone)]
struct Partial {
    max: f64,
    denom: f64,
    acc: Vec<f64>,
}

impl Partial {
    fn empty(vdim: usize) -> Self {
        Self {
            max: f64::NEG_INFINITY,
            denom: 0.0,
            acc: vec![0.0; vdim],
        }
    }

    fn merge(&mut self, other: &Partial) {
        if other.denom == 0.0 {
            return;
        }
        let max = self.max.max(other.max);
        let a = if self.denom == 0.0 {
            0.0
        } else {
            (self.max - max).exp()
        };
        let b = (other.max - max).exp();
        self.denom = self.denom * a + other.denom * b;
        for (x, y) in self.acc.iter_mut().zip(&other.acc) {
            *x = *x * a + y * b;
        }
        self.max = max;
    }
}

/// Attention over the packed tensor. Each row holding a segment of request
/// `S` gets a copy of `S`'s queries; a cell contributes to the row's
/// partial sums only when the indicator marks it as owned by `S`. Partials
/// from all of `S`'s rows are then merged into one normalization.
pub fn decomposed_attention(
    inputs: &[ToyAttentionInput],
    layout: &PackedLayout,
    mask: &IndicatorMask,
) -> Result<Vec<Matrix>> {
    check_packed_inputs(inputs, layout, mask)?;
    let kv = PackedKv::build(inputs, layout);
    let vdim = inputs.first().map_or(0, |x| x.v.cols);

    let mut partials: Vec<Vec<Partial>> = inputs
        .iter()
        .map(|x| vec![Partial::empty(vdim); x.q.rows])
        .collect();

    for row in 0..layout.width {
        for owner in mask.owners(row) {
            let q = &inputs[owner].q;
            for i in 0..q.rows {
                let mut logits = Vec::new();
                for col in 0..layout.length {
                    if mask.get(row, col) == Some(owner) {
                        logits.push((col, dot(q.row(i), kv.key(row, col))));
                    }
                }
                let max = logits
                    .iter()
                    .map(|(_, l)| *l)
                    .fold(f64::NEG_INFINITY, f64::max);
                let mut part = Partial::empty(vdim);
                part.max = max;
                for (col, l) in logits {
                    let e = (l - max).exp();
                    part.denom += e;
                    for (a, x) in part.acc.iter_mut().zip(kv.value(row, col, vdim)) {
                        *a += e * x;
                    }
                }
                partials[owner][i].merge(&part);
            }
        }
    }

    Ok(partials
        .into_iter()
        .map(|rows| {
            let mut out = Matrix::zeros(rows.len(), vdim);
            for (i, p) in rows.iter().enumerate() {
                for (o, a) in out.row_mut(i).iter_mut().zip(&p.acc) {
                    *o = a / p.denom;
                }
            }
            out
        })
        .collect())
}

/// Attention scores computed through the packed layout, scattered back to
/// each request's token order.
pub fn decomposed_attention_scores(
    inputs: &[ToyAttentionInput],
    layout: &PackedLayout,
    mask: &IndicatorMask,
) -> Result<Vec<Matrix>> {
    check_packed_inputs(inputs, layout, mask)?;
    let kv = PackedKv::build(inputs, layout);
    let mut scores = Vec::with_capacity(inputs.len());
    for (owner, x) in inputs.iter().enumerate() {
        let segs: Vec<&Segment> = layout
            .segments
            .iter()
            .filter(|s| s.request == owner)
            .collect();
        let mut a = Matrix::zeros(x.q.rows, layout.kv_lens[owner]);
        for i in 0..x.q.rows {
            let mut logits = vec![0.0; layout.kv_lens[owner]];
            for s in &segs {
                for (n, col) in (s.col_start..s.col_end).enumerate() {
                    if mask.get(s.row, col) == Some(owner) {
                        logits[s.token_offset + n] = dot(x.q.row(i), kv.key(s.row, col));
                    }
                }
            }
            let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let denom: f64 = logits.iter().map(|l| (l - max).exp()).sum();
            for (j, l) in logits.iter().enumerate() {
                a.row_mut(i)[j] = (l - max).exp() / denom;
            }
        }
        scores.push(a);
    }
    Ok(scores)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn aligned_lengths_need_no_decomposition() {
        let l = pack(&[4, 4, 4], 3).unwrap();
        assert_eq!(l.length, 4);
        assert_eq!(l.padding_tokens, 0);
        assert_eq!(l.decomposed_requests(), 0);
        l.validate().unwrap();
    }

    #[test]
    fn eight_five_three_on_two_rows() {
        let l = pack(&[8, 5, 3], 2).unwrap();
        assert_eq!(l.length, 8);
        assert_eq!(l.padding_tokens, 0);
        let mask = build_indicator(&l).unwrap();
        assert!((0..8).all(|c| mask.get(0, c) == Some(0)));
        assert!((0..5).all(|c| mask.get(1, c) == Some(1)));
        assert!((5..8).all(|c| mask.get(1, c) == Some(2)));
    }

    #[test]
    fn long_request_beats_naive_padding() {
        // one request of 4 prompt + 3 candidate tokens, two of 5
        let lens = [7, 5, 5];
        assert_eq!(naive_padding(&lens).unwrap(), 4);
        let l = pack(&lens, 3).unwrap();
        assert!(l.padding_tokens < 4);
        assert_eq!(l.decomposed_requests(), 1);
        l.validate().unwrap();
    }

    #[test]
    fn naive_padding_values() {
        assert_eq!(naive_padding(&[4, 4, 4]).unwrap(), 0);
        assert_eq!(naive_padding(&[8, 5, 3]).unwrap(), 8);
        assert!(naive_padding(&[]).is_err());
    }

    #[test]
    fn zero_width_rejected() {
        assert!(matches!(pack(&[3], 0), Err(Error::Config(_))));
    }

    #[test]
    fn mask_counts_padding() {
        let l = pack(&[5, 2], 2).unwrap();
        let mask = build_indicator(&l).unwrap();
        assert_eq!(mask.empty_cells(), l.padding_tokens);
        let single = pack(&[6], 1).unwrap();
        let m = build_indicator(&single).unwrap();
        assert!(m.cells.iter().all(|c| *c == Some(0)));
    }

    #[test]
    fn overlap_is_corruption() {
        let mut l = pack(&[4, 4], 2).unwrap();
        l.segments[1].row = l.segments[0].row;
        assert!(matches!(build_indicator(&l), Err(Error::Layout(_))));
    }

    #[test]
    fn identical_keys_average_values() {
        let q = Matrix::from_rows(vec![vec![0.3, -0.2]]);
        let k = Matrix::from_rows(vec![vec![0.5, 0.5]; 3]);
        let v = Matrix::from_rows(vec![vec![1.0, 0.0], vec![2.0, 3.0], vec![3.0, 6.0]]);
        let o = reference_attention(&q, &k, &v).unwrap();
        assert!((o.get(0, 0) - 2.0).abs() < 1e-12);
        assert!((o.get(0, 1) - 3.0).abs() < 1e-12);
    }

    #[test]
    fn single_key_returns_value() {
        let q = Matrix::from_rows(vec![vec![0.9, 0.1]]);
        let k = Matrix::from_rows(vec![vec![-0.4, 0.7]]);
        let v = Matrix::from_rows(vec![vec![0.25, -0.5]]);
        assert_eq!(reference_attention(&q, &k, &v).unwrap(), v);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let q = Matrix::zeros(1, 3);
        let k = Matrix::zeros(2, 2);
        assert!(matches!(
            reference_attention(&q, &k, &k),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn mask_mismatch_rejected() {
        let l = pack(&[2, 2], 1).unwrap();
        let mut mask = build_indicator(&l).unwrap();
        mask.cells[0] = None;
        let x = ToyAttentionInput {
            q: Matrix::zeros(1, 2),
            k: Matrix::zeros(2, 2),
            v: Matrix::zeros(2, 2),
        };
        let r = decomposed_attention(&[x.clone(), x], &l, &mask);
        assert!(matches!(r, Err(Error::Consistency(_))));
    }
}
