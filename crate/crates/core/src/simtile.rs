//! Dense f32 similarity search over packed register tiles.
//!
//! Rows of both matrices are packed into panels stored `[k][lane]`, so one
//! `QR x TR` tile of dot products is a rank-1 update per descriptor
//! component. Tiles never leave the cache: each one updates the per-row
//! shortlists directly. The same generic body is compiled for AVX-512,
//! AVX2+FMA and the baseline target and picked at run time.

use nalgebra::DMatrix;

use crate::par;

/// Target rows per panel (tile width).
const TR: usize = 32;
/// Query rows per panel (tile height).
const QR: usize = 12;
/// Target rows packed at a time.
const TARGET_BLOCK: usize = 1024;
/// Fewest query rows handled per parallel task.
const MIN_QUERY_CHUNK: usize = 256;
/// Candidates kept per row.
pub(crate) const SHORTLIST: usize = 4;

/// The best few similarities seen by one row, descending.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Shortlist {
    pub sims: [f32; SHORTLIST],
    pub idx: [u32; SHORTLIST],
    pub len: usize,
}

impl Shortlist {
    fn new() -> Self {
        Self {
            sims: [f32::NEG_INFINITY; SHORTLIST],
            idx: [u32::MAX; SHORTLIST],
            len: 0,
        }
    }

    /// Similarity a new candidate must exceed to enter the list.
    #[inline(always)]
    fn floor(&self) -> f32 {
        if self.len == SHORTLIST {
            self.sims[SHORTLIST - 1]
        } else {
            f32::NEG_INFINITY
        }
    }

    /// Candidates must arrive in increasing index order so that equal
    /// similarities keep the smaller index ahead.
    #[inline(always)]
    fn push(&mut self, sim: f32, idx: u32) {
        if !(sim > self.floor()) {
            return;
        }
        let mut pos = self.len.min(SHORTLIST - 1);
        while pos > 0 && sim > self.sims[pos - 1] {
            self.sims[pos] = self.sims[pos - 1];
            self.idx[pos] = self.idx[pos - 1];
            pos -= 1;
        }
        self.sims[pos] = sim;
        self.idx[pos] = idx;
        self.len = (self.len + 1).min(SHORTLIST);
    }

    pub fn candidates(&self) -> impl Iterator<Item = usize> + '_ {
        self.idx[..self.len].iter().map(|&i| i as usize)
    }
}

/// `len` rows of `m` starting at `start`, packed in zero-padded panels of `R`.
struct Panels<const R: usize> {
    dim: usize,
    rows: usize,
    data: Vec<f32>,
}

impl<const R: usize> Panels<R> {
    fn new(dim: usize) -> Self {
        Self {
            dim,
            rows: 0,
            data: Vec::new(),
        }
    }

    fn pack(&mut self, m: &DMatrix<f32>, start: usize, len: usize) {
        let panels = len.div_ceil(R);
        self.rows = len;
        self.data.clear();
        self.data.resize(panels * self.dim * R, 0.0);
        for k in 0..self.dim {
            let at = k * m.nrows() + start;
            let col = &m.as_slice()[at..at + len];
            for (p, chunk) in col.chunks(R).enumerate() {
                let at = (p * self.dim + k) * R;
                self.data[at..at + chunk.len()].copy_from_slice(chunk);
            }
        }
    }

    fn panels(&self) -> usize {
        self.rows.div_ceil(R)
    }

    #[inline(always)]
    fn panel(&self, p: usize) -> &[f32] {
        &self.data[p * self.dim * R..(p + 1) * self.dim * R]
    }

    fn valid(&self, p: usize) -> usize {
        (self.rows - p * R).min(R)
    }
}

type Tile = [[f32; TR]; QR];

#[inline(always)]
fn tile_generic(qp: &[f32], tp: &[f32]) -> Tile {
    let mut acc = [[0.0f32; TR]; QR];
    for (t, q) in tp.chunks_exact(TR).zip(qp.chunks_exact(QR)) {
        for j in 0..QR {
            for l in 0..TR {
                acc[j][l] += q[j] * t[l];
            }
        }
    }
    acc
}

/// Two zmm registers per query row: sixteen accumulators.
#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx512f")]
fn tile_avx512(qp: &[f32], tp: &[f32]) -> Tile {
    use std::arch::x86_64::*;
    use std::mem::transmute;
    let mut acc = [[_mm512_setzero_ps(); 2]; QR];
    let (tp, _) = tp.as_chunks::<TR>();
    let (qp, _) = qp.as_chunks::<QR>();
    for (t, q) in tp.iter().zip(qp) {
        // By-value reinterpretation avoids the pointer-read checks that
        // debug builds attach to `_mm512_loadu_ps`.
        // SAFETY: [f32; 32] and [__m512; 2] have the same size and no invalid bit patterns.
        let [t0, t1] = unsafe { transmute::<[f32; TR], [__m512; 2]>(*t) };
        for (a, &b) in acc.iter_mut().zip(q) {
            let b = _mm512_set1_ps(b);
            a[0] = _mm512_fmadd_ps(b, t0, a[0]);
            a[1] = _mm512_fmadd_ps(b, t1, a[1]);
        }
    }
    // SAFETY: as above.
    acc.map(|a| unsafe { transmute::<[__m512; 2], [f32; TR]>(a) })
}

/// Sixteen ymm registers cannot hold the whole tile, so it is computed in
/// four quarters of four rows by sixteen columns.
#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2,fma")]
fn tile_avx2(qp: &[f32], tp: &[f32]) -> Tile {
    use std::arch::x86_64::*;
    let steps = tp.len() / TR;
    assert!(qp.len() >= steps * QR && tp.len() == steps * TR);
    let mut out = [[0.0f32; TR]; QR];
    // SAFETY: as in `tile_avx512`; the quarter offsets stay inside one step.
    unsafe {
        for r0 in (0..QR).step_by(4) {
            for c0 in [0, 16] {
                let mut acc = [[_mm256_setzero_ps(); 2]; 4];
                let (mut t, mut q) = (tp.as_ptr().wrapping_add(c0), qp.as_ptr().wrapping_add(r0));
                for _ in 0..steps {
                    let t0 = _mm256_loadu_ps(t);
                    let t1 = _mm256_loadu_ps(t.wrapping_add(8));
                    for (j, a) in acc.iter_mut().enumerate() {
                        let b = _mm256_set1_ps(*q.wrapping_add(j));
                        a[0] = _mm256_fmadd_ps(b, t0, a[0]);
                        a[1] = _mm256_fmadd_ps(b, t1, a[1]);
                    }
                    t = t.wrapping_add(TR);
                    q = q.wrapping_add(QR);
                }
                for (j, a) in acc.iter().enumerate() {
                    let o = out[r0 + j].as_mut_ptr().wrapping_add(c0);
                    _mm256_storeu_ps(o, a[0]);
                    _mm256_storeu_ps(o.wrapping_add(8), a[1]);
                }
            }
        }
    }
    out
}

#[inline(always)]
fn max_of(v: &[f32; TR]) -> f32 {
    let mut m = [f32::NEG_INFINITY; 8];
    for c in v.chunks_exact(8) {
        for l in 0..8 {
            m[l] = if c[l] > m[l] { c[l] } else { m[l] };
        }
    }
    m.iter().fold(f32::NEG_INFINITY, |a, &b| if b > a { b } else { a })
}

/// Scores one packed query chunk against one packed target block.
#[inline(always)]
fn block_body(
    tile: impl Fn(&[f32], &[f32]) -> Tile,
    q: &Panels<QR>,
    q_lists: &mut [Shortlist],
    t: &Panels<TR>,
    t_base: usize,
    mut t_lists: Option<&mut [Shortlist]>,
    q_base: usize,
) {
    for qp in 0..q.panels() {
        let qv = q.valid(qp);
        let qpanel = q.panel(qp);
        for tpi in 0..t.panels() {
            let tv = t.valid(tpi);
            let acc = tile(qpanel, t.panel(tpi));
            let t0 = t_base + tpi * TR;
            for (j, row) in acc.iter().enumerate().take(qv) {
                let list = &mut q_lists[qp * QR + j];
                if max_of(row) > list.floor() {
                    for (l, &s) in row.iter().enumerate().take(tv) {
                        list.push(s, (t0 + l) as u32);
                    }
                }
            }
            if let Some(tl) = t_lists.as_deref_mut() {
                let mut colmax = acc[0];
                for row in acc.iter().take(qv).skip(1) {
                    for l in 0..TR {
                        colmax[l] = if row[l] > colmax[l] { row[l] } else { colmax[l] };
                    }
                }
                for l in 0..tv {
                    let list = &mut tl[t0 + l];
                    if colmax[l] > list.floor() {
                        for (j, row) in acc.iter().enumerate().take(qv) {
                            list.push(row[l], (q_base + qp * QR + j) as u32);
                        }
                    }
                }
            }
        }
    }
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx512f,avx2,fma")]
fn block_avx512(
    q: &Panels<QR>,
    ql: &mut [Shortlist],
    t: &Panels<TR>,
    tb: usize,
    tl: Option<&mut [Shortlist]>,
    qb: usize,
) {
    block_body(|a, b| tile_avx512(a, b), q, ql, t, tb, tl, qb)
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2,fma")]
fn block_avx2(
    q: &Panels<QR>,
    ql: &mut [Shortlist],
    t: &Panels<TR>,
    tb: usize,
    tl: Option<&mut [Shortlist]>,
    qb: usize,
) {
    block_body(|a, b| tile_avx2(a, b), q, ql, t, tb, tl, qb)
}

fn block_generic(
    q: &Panels<QR>,
    ql: &mut [Shortlist],
    t: &Panels<TR>,
    tb: usize,
    tl: Option<&mut [Shortlist]>,
    qb: usize,
) {
    block_body(tile_generic, q, ql, t, tb, tl, qb)
}

#[derive(Clone, Copy)]
enum Kernel {
    #[cfg(target_arch = "x86_64")]
    Avx512,
    #[cfg(target_arch = "x86_64")]
    Avx2,
    Generic,
}

fn kernel() -> Kernel {
    #[cfg(target_arch = "x86_64")]
    {
        if is_x86_feature_detected!("avx512f") && is_x86_feature_detected!("avx2") && is_x86_feature_detected!("fma") {
            return Kernel::Avx512;
        }
        if is_x86_feature_detected!("avx2") && is_x86_feature_detected!("fma") {
            return Kernel::Avx2;
        }
    }
    Kernel::Generic
}

fn run_block(
    k: Kernel,
    q: &Panels<QR>,
    ql: &mut [Shortlist],
    t: &Panels<TR>,
    tb: usize,
    tl: Option<&mut [Shortlist]>,
    qb: usize,
) {
    match k {
        // SAFETY: the features were detected at run time.
        #[cfg(target_arch = "x86_64")]
        Kernel::Avx512 => unsafe { block_avx512(q, ql, t, tb, tl, qb) },
        #[cfg(target_arch = "x86_64")]
        Kernel::Avx2 => unsafe { block_avx2(q, ql, t, tb, tl, qb) },
        Kernel::Generic => block_generic(q, ql, t, tb, tl, qb),
    }
}

/// Shortlists of the most similar targets per query and, with `both`, of the
/// most similar queries per target. Both matrices hold one row per descriptor
/// and share their column count.
pub(crate) fn shortlists(query: &DMatrix<f32>, target: &DMatrix<f32>, both: bool) -> (Vec<Shortlist>, Vec<Shortlist>) {
    let (n, m, dim) = (query.nrows(), target.nrows(), query.ncols());
    assert_eq!(dim, target.ncols());
    assert!(n <= u32::MAX as usize && m <= u32::MAX as usize);
    let k = kernel();
    let chunk = n.div_ceil(par::current_threads()).max(MIN_QUERY_CHUNK);
    let chunks = n.div_ceil(chunk);
    let parts = par::map_range(chunks, |ci| {
        let q0 = ci * chunk;
        let len = chunk.min(n - q0);
        let mut qp = Panels::<QR>::new(dim);
        qp.pack(query, q0, len);
        let mut ql = vec![Shortlist::new(); len];
        let mut tl = if both { vec![Shortlist::new(); m] } else { Vec::new() };
        let mut tp = Panels::<TR>::new(dim);
        let mut t0 = 0;
        while t0 < m {
            let tlen = TARGET_BLOCK.min(m - t0);
            tp.pack(target, t0, tlen);
            run_block(k, &qp, &mut ql, &tp, t0, both.then_some(&mut tl[..]), q0);
            t0 += tlen;
        }
        (ql, tl)
    });
    let mut q_lists = Vec::with_capacity(n);
    let mut t_lists = if both { vec![Shortlist::new(); m] } else { Vec::new() };
    for (ql, tl) in parts {
        q_lists.extend(ql);
        for (acc, part) in t_lists.iter_mut().zip(&tl) {
            for c in 0..part.len {
                acc.push(part.sims[c], part.idx[c]);
            }
        }
    }
    (q_lists, t_lists)
}
