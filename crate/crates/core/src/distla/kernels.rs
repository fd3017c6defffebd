//! Worker-side procedures of the distributed kernels.
//!
//! Every kernel follows the same pattern: a worker exposes the blocks its
//! peers will need, then walks its own operations in one fixed global order,
//! fetching remote blocks from their owners as it goes. Because all workers
//! share that order, a worker only ever waits on a block produced earlier in
//! it, so no collective can deadlock.

use std::collections::BTreeMap;
use std::sync::Arc;

use crate::dense::{gemm, gemm_nt_sub, potrf_lower, syrk_lower_sub, trsm_left_lower, trsm_left_lower_trans, trsm_right_lower_trans, zero_upper};
use crate::error::Fault;
use crate::grid::{Coord, ObjectKind, ObjectLayout};
use crate::registry::ApplyFn;
use crate::transport::events::EventOp;
use crate::transport::protocol::{CholStats, Kernel, Phase, PhaseKind, Reply, Side, StoreValue, Tag, WorkerResult};
use crate::transport::worker::{DistLocal, Entry, Worker};

fn tag(name: &str, kind: PhaseKind, step: usize, i: usize, j: usize) -> Tag {
    Tag::new(name, Phase::new(kind, step), i, j)
}

/// Overwrites the padded entries of block `(i, j)` with the padding pattern:
/// identity for triangular objects, zero otherwise. Diagonal blocks of
/// triangular objects also get a zero strict upper triangle.
pub(crate) fn impose_padding(layout: &ObjectLayout, i: usize, j: usize, buf: &mut [f64]) {
    let (br, bc) = layout.block_shape();
    let tri = layout.kind == ObjectKind::Triangular;
    let vector = layout.kind == ObjectKind::Vector;
    for c in 0..bc {
        let gj = if vector { 0 } else { layout.cols.global0(j, c) };
        for r in 0..br {
            let gi = layout.rows.global0(i, r);
            if tri && i == j && r < c {
                buf[r + c * br] = 0.0;
            } else if layout.is_padding0(gi, gj) {
                buf[r + c * br] = if tri && gi == gj { 1.0 } else { 0.0 };
            }
        }
    }
}

/// Remembers the last few fetched blocks. Remote blocks held here are the
/// only temporaries counted by the Cholesky memory instrument.
struct BlockCache {
    cap: usize,
    slots: Vec<(Tag, Arc<Vec<f64>>, bool)>,
    live_remote: usize,
}

impl BlockCache {
    fn new(cap: usize) -> Self {
        BlockCache { cap, slots: Vec::with_capacity(cap), live_remote: 0 }
    }

    fn get(&mut self, w: &mut Worker, owner: Coord, t: Tag) -> Result<Arc<Vec<f64>>, Fault> {
        if let Some(pos) = self.slots.iter().position(|(k, _, _)| *k == t) {
            let entry = self.slots.remove(pos);
            let data = Arc::clone(&entry.1);
            self.slots.push(entry);
            return Ok(data);
        }
        let fetched = w.fetch(owner, &t)?;
        if self.slots.len() == self.cap {
            let (_, _, remote) = self.slots.remove(0);
            if remote {
                self.live_remote -= 1;
            }
        }
        if fetched.remote {
            self.live_remote += 1;
        }
        self.slots.push((t, Arc::clone(&fetched.data), fetched.remote));
        Ok(fetched.data)
    }
}

fn sorted_by_col(keys: impl Iterator<Item = (usize, usize)>) -> Vec<(usize, usize)> {
    let mut v: Vec<_> = keys.collect();
    v.sort_by_key(|&(i, j)| (j, i));
    v
}

impl Worker {
    pub(crate) fn run_kernel(&mut self, kernel: Kernel) -> WorkerResult {
        match kernel {
            Kernel::Construct { name, layout, generator, params, inputs } => {
                self.construct(&name, layout, &generator, &params, inputs.as_deref())
            }
            Kernel::Rnorm { name, layout, zero } => self.rnorm(&name, layout, zero),
            Kernel::Cholesky { input, output } => self.cholesky(&input, &output),
            Kernel::Solve { factor, rhs, output, side } => self.solve(&factor, &rhs, &output, side),
            Kernel::MultChol { factor, x, output } => self.mult_chol(&factor, &x, &output),
            Kernel::CrossprodMatVec { v, u, output } => self.crossprod_mat_vec(&v, &u, &output),
            Kernel::CrossprodSelf { v, output } => self.crossprod_self(&v, &output),
            Kernel::CrossprodSelfDiag { v, output } => self.crossprod_self_diag(&v, &output),
            Kernel::LogDet { factor } => self.log_det(&factor),
            Kernel::SumSquares { name } => self.sum_squares(&name),
            Kernel::Apply { func, inputs, output } => self.apply(&func, &inputs, &output),
        }
    }

    /// Exposes every local block of `name` under the `Input` phase.
    fn expose(&mut self, name: &str) -> Result<(), Fault> {
        let blocks: Vec<_> = self.dist(name)?.blocks.iter().map(|(&k, d)| (k, Arc::clone(d))).collect();
        for ((i, j), data) in blocks {
            self.publish(tag(name, PhaseKind::Input, 0, i, j), data, None);
        }
        Ok(())
    }

    fn store_dist(&mut self, name: &str, layout: ObjectLayout, blocks: BTreeMap<(usize, usize), Arc<Vec<f64>>>) {
        self.store.insert(name.to_owned(), Entry::Dist(DistLocal { layout, blocks }));
    }

    fn construct(
        &mut self,
        name: &str,
        layout: ObjectLayout,
        generator: &str,
        params: &[f64],
        inputs: Option<&str>,
    ) -> WorkerResult {
        let gen = self
            .registry
            .generator(generator)
            .cloned()
            .ok_or_else(|| Fault::UnknownFunction(generator.to_owned()))?;
        let inputs = match inputs {
            Some(n) => Some(self.inputs(n)?),
            None => None,
        };
        let (br, _) = layout.block_shape();
        let vector = layout.kind == ObjectKind::Vector;
        let tri = layout.kind == ObjectKind::Triangular;
        let owned = layout.blocks_of0(self.coord);
        let mut blocks = BTreeMap::new();
        for &(i, j) in &owned {
            let (br2, bc) = layout.block_shape();
            let mut buf = vec![0.0; br2 * bc];
            for (r, c) in layout.block_entries0(i, j) {
                let gi = layout.rows.global0(i, r);
                let gj = if vector { 0 } else { layout.cols.global0(j, c) };
                buf[r + c * br] = if layout.is_padding0(gi, gj) {
                    if tri && gi == gj {
                        1.0
                    } else {
                        0.0
                    }
                } else {
                    let v = gen.entry(params, inputs, gi + 1, gj + 1).map_err(Fault::Generator)?;
                    if !v.is_finite() {
                        return Err(Fault::Generator(format!("non-finite value at ({}, {})", gi + 1, gj + 1)));
                    }
                    v
                };
            }
            blocks.insert((i, j), Arc::new(buf));
        }
        for &(i, j) in &owned {
            self.record(EventOp::Construct, i, j, 0);
        }
        self.store_dist(name, layout, blocks);
        Ok(Reply::Ack)
    }

    fn rnorm(&mut self, name: &str, layout: ObjectLayout, zero: bool) -> WorkerResult {
        if layout.kind == ObjectKind::Triangular {
            return Err(Fault::DimensionMismatch("random objects are vectors or rectangular".into()));
        }
        let (br, bc) = layout.block_shape();
        let owned = layout.blocks_of0(self.coord);
        let mut blocks = BTreeMap::new();
        for &(i, j) in &owned {
            let mut buf = vec![0.0; br * bc];
            if !zero {
                self.streams.stream_mut().map_err(|_| Fault::StreamsUninitialized)?.fill(&mut buf);
            }
            impose_padding(&layout, i, j, &mut buf);
            blocks.insert((i, j), Arc::new(buf));
            self.record(EventOp::Rnorm, i, j, 0);
        }
        self.store_dist(name, layout, blocks);
        Ok(Reply::Ack)
    }

    fn cholesky(&mut self, input: &str, output: &str) -> WorkerResult {
        let layout = self.dist(input)?.layout;
        if layout.kind != ObjectKind::Triangular {
            return Err(Fault::DimensionMismatch(format!("`{input}` is not triangular")));
        }
        let work: BTreeMap<(usize, usize), Vec<f64>> = if input == output {
            let Some(Entry::Dist(d)) = self.store.remove(input) else { unreachable!() };
            d.blocks.into_iter().map(|(k, a)| (k, Arc::try_unwrap(a).unwrap_or_else(|a| (*a).clone()))).collect()
        } else {
            self.dist(input)?.blocks.iter().map(|(&k, a)| (k, a.as_ref().clone())).collect()
        };
        let owned = work.len();
        match self.cholesky_steps(output, &layout, work) {
            Ok((blocks, peak)) => {
                self.store_dist(output, layout, blocks);
                Ok(Reply::Chol(CholStats { rank: self.rank, coord: self.coord, owned_blocks: owned, peak_resident: peak }))
            }
            Err(f) => {
                self.store.remove(output);
                Err(f)
            }
        }
    }

    /// The two-level factorization. For each large step the panel columns
    /// are factored one at a time (diagonal block, column solves, updates
    /// inside the panel), then every trailing block owned here receives the
    /// updates from the whole panel.
    #[allow(clippy::type_complexity)]
    fn cholesky_steps(
        &mut self,
        output: &str,
        layout: &ObjectLayout,
        mut work: BTreeMap<(usize, usize), Vec<f64>>,
    ) -> Result<(BTreeMap<(usize, usize), Arc<Vec<f64>>>, usize), Fault> {
        let bs = layout.rows.block_size();
        let d = self.grid.order();
        let h = layout.rows.replication();
        let owned = work.len();
        let mut peak = owned;
        let mut done = BTreeMap::new();
        let mut cache = BlockCache::new(2);
        let ftag = |i: usize, j: usize| tag(output, PhaseKind::Factor, 0, i, j);

        for q in 0..h {
            let (p0, p1) = (q * d, (q + 1) * d);
            for k in p0..p1 {
                if let Some(mut a) = work.remove(&(k, k)) {
                    potrf_lower(&mut a, bs, bs)
                        .map_err(|c| Fault::NotPositiveDefinite { block: k + 1, row: k * bs + c + 1 })?;
                    zero_upper(&mut a, bs, bs);
                    let a = Arc::new(a);
                    self.record(EventOp::Factor, k, k, k);
                    self.publish(ftag(k, k), Arc::clone(&a), None);
                    done.insert((k, k), a);
                }
                let column: Vec<usize> = work.keys().filter(|&&(i, j)| j == k && i > k).map(|&(i, _)| i).collect();
                for i in column {
                    let lkk = cache.get(self, layout.owner0(k, k), ftag(k, k))?;
                    peak = peak.max(owned + cache.live_remote);
                    let mut a = work.remove(&(i, k)).expect("owned block");
                    trsm_right_lower_trans(&lkk, bs, bs, &mut a, bs, bs);
                    let a = Arc::new(a);
                    self.record(EventOp::Solve, i, k, k);
                    self.publish(ftag(i, k), Arc::clone(&a), None);
                    done.insert((i, k), a);
                }
                let inside = sorted_by_col(work.keys().copied().filter(|&(_, j)| j > k && j < p1));
                for (i, j) in inside {
                    self.chol_update(&mut cache, layout, output, &mut work, (i, j), k)?;
                    peak = peak.max(owned + cache.live_remote);
                }
            }
            let trailing = sorted_by_col(work.keys().copied().filter(|&(_, j)| j >= p1));
            for k in p0..p1 {
                for &(i, j) in &trailing {
                    self.chol_update(&mut cache, layout, output, &mut work, (i, j), k)?;
                    peak = peak.max(owned + cache.live_remote);
                }
            }
        }
        debug_assert!(work.is_empty());
        Ok((done, peak))
    }

    fn chol_update(
        &mut self,
        cache: &mut BlockCache,
        layout: &ObjectLayout,
        output: &str,
        work: &mut BTreeMap<(usize, usize), Vec<f64>>,
        (i, j): (usize, usize),
        k: usize,
    ) -> Result<(), Fault> {
        let bs = layout.rows.block_size();
        let lj = cache.get(self, layout.owner0(j, k), tag(output, PhaseKind::Factor, 0, j, k))?;
        let a = work.get_mut(&(i, j)).expect("owned block");
        if i == j {
            syrk_lower_sub(&lj, bs, bs, bs, a, bs);
        } else {
            let li = cache.get(self, layout.owner0(i, k), tag(output, PhaseKind::Factor, 0, i, k))?;
            let a = work.get_mut(&(i, j)).expect("owned block");
            gemm_nt_sub(&li, &lj, bs, bs, bs, bs, bs, a, bs);
        }
        self.record(EventOp::Update, i, j, k);
        Ok(())
    }

    fn triangular_pair(&self, factor: &str, other: &str) -> Result<(ObjectLayout, ObjectLayout), Fault> {
        let ll = self.dist(factor)?.layout;
        let ol = self.dist(other)?.layout;
        if ll.kind != ObjectKind::Triangular {
            return Err(Fault::DimensionMismatch(format!("`{factor}` is not triangular")));
        }
        if ol.kind == ObjectKind::Triangular || ol.rows != ll.rows {
            return Err(Fault::DimensionMismatch(format!("`{other}` does not conform to `{factor}`")));
        }
        Ok((ll, ol))
    }

    fn solve(&mut self, factor: &str, rhs: &str, output: &str, side: Side) -> WorkerResult {
        let (ll, rl) = self.triangular_pair(factor, rhs)?;
        self.expose(factor)?;
        let nb = ll.row_blocks();
        let ncb = rl.col_blocks();
        let (bs, bc) = rl.block_shape();
        let mut pending: BTreeMap<(usize, usize), Vec<f64>> =
            self.dist(rhs)?.blocks.iter().map(|(&k, v)| (k, v.as_ref().clone())).collect();
        let l_blocks = self.dist(factor)?.blocks.clone();
        let order: Vec<usize> = match side {
            Side::Forward => (0..nb).collect(),
            Side::Back => (0..nb).rev().collect(),
        };
        let stag = |t: usize, c: usize| tag(output, PhaseKind::Solved, 0, t, c);
        let ptag = |step: usize, t: usize, c: usize| tag(output, PhaseKind::Partial, step, t, c);
        let mut out = BTreeMap::new();

        for (pos, &t) in order.iter().enumerate() {
            for c in 0..ncb {
                let Some(mut b) = pending.remove(&(t, c)) else { continue };
                for &k in &order[..pos] {
                    let p = self.fetch(ll.owner0(t.max(k), t.min(k)), &ptag(k, t, c))?;
                    for (x, y) in b.iter_mut().zip(p.data.iter()) {
                        *x -= y;
                    }
                }
                let ltt = self.fetch(ll.owner0(t, t), &tag(factor, PhaseKind::Input, 0, t, t))?;
                for r in 0..bs {
                    if ltt.data[r + r * bs] == 0.0 {
                        return Err(Fault::SingularDiagonal { index: t * bs + r + 1 });
                    }
                }
                match side {
                    Side::Forward => trsm_left_lower(&ltt.data, bs, bs, &mut b, bc, bs),
                    Side::Back => trsm_left_lower_trans(&ltt.data, bs, bs, &mut b, bc, bs),
                }
                self.record(EventOp::VecSolve, t, c, t);
                let b = Arc::new(b);
                self.publish(stag(t, c), Arc::clone(&b), None);
                out.insert((t, c), b);
            }
            // Contributions of x_t to the blocks still to be solved.
            let targets: Vec<usize> = match side {
                Side::Forward => l_blocks.keys().filter(|&&(i, j)| j == t && i > t).map(|&(i, _)| i).collect(),
                Side::Back => l_blocks.keys().filter(|&&(i, j)| i == t && j < t).map(|&(_, j)| j).collect(),
            };
            if targets.is_empty() {
                continue;
            }
            for c in 0..ncb {
                let x = self.fetch(rl.owner0(t, c), &stag(t, c))?;
                for &s in &targets {
                    let mut p = vec![0.0; bs * bc];
                    match side {
                        Side::Forward => gemm(false, false, bs, bc, bs, 1.0, &l_blocks[&(s, t)], bs, &x.data, bs, 0.0, &mut p, bs),
                        Side::Back => gemm(true, false, bs, bc, bs, 1.0, &l_blocks[&(t, s)], bs, &x.data, bs, 0.0, &mut p, bs),
                    }
                    self.record(EventOp::Partial, s, c, t);
                    self.publish(ptag(t, s, c), Arc::new(p), Some(1));
                }
            }
        }
        self.store_dist(output, rl, out);
        Ok(Reply::Ack)
    }

    fn mult_chol(&mut self, factor: &str, x: &str, output: &str) -> WorkerResult {
        let (ll, xl) = self.triangular_pair(factor, x)?;
        self.expose(x)?;
        let ncb = xl.col_blocks();
        let (bs, bc) = xl.block_shape();
        let ptag = |step: usize, i: usize, c: usize| tag(output, PhaseKind::Partial, step, i, c);
        let l_blocks = self.dist(factor)?.blocks.clone();
        let mut cache = BlockCache::new(2);
        for (&(i, k), l) in &l_blocks {
            for c in 0..ncb {
                let xk = cache.get(self, xl.owner0(k, c), tag(x, PhaseKind::Input, 0, k, c))?;
                let mut p = vec![0.0; bs * bc];
                gemm(false, false, bs, bc, bs, 1.0, l, bs, &xk, bs, 0.0, &mut p, bs);
                self.record(EventOp::Partial, i, c, k);
                self.publish(ptag(k, i, c), Arc::new(p), Some(1));
            }
        }
        let mine: Vec<(usize, usize)> = self.dist(x)?.blocks.keys().copied().collect();
        let mut out = BTreeMap::new();
        for (i, c) in mine {
            let mut sum = vec![0.0; bs * bc];
            for k in 0..=i {
                let p = self.fetch(ll.owner0(i, k), &ptag(k, i, c))?;
                for (s, v) in sum.iter_mut().zip(p.data.iter()) {
                    *s += v;
                }
            }
            self.record(EventOp::Reduce, i, c, 0);
            out.insert((i, c), Arc::new(sum));
        }
        self.store_dist(output, xl, out);
        Ok(Reply::Ack)
    }

    fn rect_vector_pair(&self, v: &str, u: &str) -> Result<(ObjectLayout, ObjectLayout), Fault> {
        let vl = self.dist(v)?.layout;
        let ul = self.dist(u)?.layout;
        if vl.kind != ObjectKind::Rectangular {
            return Err(Fault::DimensionMismatch(format!("`{v}` is not rectangular")));
        }
        if ul.kind != ObjectKind::Vector || ul.rows != vl.rows {
            return Err(Fault::DimensionMismatch(format!("`{u}` does not conform to `{v}`")));
        }
        Ok((vl, ul))
    }

    fn crossprod_mat_vec(&mut self, v: &str, u: &str, output: &str) -> WorkerResult {
        let (vl, ul) = self.rect_vector_pair(v, u)?;
        self.expose(u)?;
        let (br, bc) = vl.block_shape();
        let ptag = |step: usize, c: usize| tag(output, PhaseKind::Partial, step, c, 0);
        let v_blocks = self.dist(v)?.blocks.clone();
        let mut cache = BlockCache::new(1);
        for ((i, c), blk) in sorted_pairs(&v_blocks) {
            let ui = cache.get(self, ul.owner0(i, 0), tag(u, PhaseKind::Input, 0, i, 0))?;
            let mut p = vec![0.0; bc];
            gemm(true, false, bc, 1, br, 1.0, &blk, br, &ui, br, 0.0, &mut p, bc);
            self.record(EventOp::Partial, c, 0, i);
            self.publish(ptag(i, c), Arc::new(p), Some(1));
        }
        let out_layout = ObjectLayout::vector(vl.cols);
        self.reduce_partials(&out_layout, &vl, output, ptag)
    }

    /// Sums, in ascending row-block order, the per-row-block partials of
    /// every output vector block owned here.
    fn reduce_partials(
        &mut self,
        out_layout: &ObjectLayout,
        src: &ObjectLayout,
        output: &str,
        ptag: impl Fn(usize, usize) -> Tag,
    ) -> WorkerResult {
        let (bc, _) = out_layout.block_shape();
        let mut out = BTreeMap::new();
        for (c, _) in out_layout.blocks_of0(self.coord) {
            let mut sum = vec![0.0; bc];
            for i in 0..src.row_blocks() {
                let p = self.fetch(src.owner0(i, c), &ptag(i, c))?;
                for (s, x) in sum.iter_mut().zip(p.data.iter()) {
                    *s += x;
                }
            }
            self.record(EventOp::Reduce, c, 0, 0);
            out.insert((c, 0), Arc::new(sum));
        }
        self.store_dist(output, *out_layout, out);
        Ok(Reply::Ack)
    }

    fn crossprod_self(&mut self, v: &str, output: &str) -> WorkerResult {
        let vl = self.dist(v)?.layout;
        if vl.kind != ObjectKind::Rectangular {
            return Err(Fault::DimensionMismatch(format!("`{v}` is not rectangular")));
        }
        self.expose(v)?;
        let (br, bc) = vl.block_shape();
        let wl = ObjectLayout::triangular(vl.cols);
        let mut out = BTreeMap::new();
        let mut cache = BlockCache::new(2);
        for (a, b) in wl.blocks_of0(self.coord) {
            let mut w = vec![0.0; bc * bc];
            for i in 0..vl.row_blocks() {
                let vb = cache.get(self, vl.owner0(i, b), tag(v, PhaseKind::Input, 0, i, b))?;
                let va = cache.get(self, vl.owner0(i, a), tag(v, PhaseKind::Input, 0, i, a))?;
                gemm(true, false, bc, bc, br, 1.0, &va, br, &vb, br, 1.0, &mut w, bc);
            }
            impose_padding(&wl, a, b, &mut w);
            self.record(EventOp::Crossprod, a, b, 0);
            out.insert((a, b), Arc::new(w));
        }
        self.store_dist(output, wl, out);
        Ok(Reply::Ack)
    }

    fn crossprod_self_diag(&mut self, v: &str, output: &str) -> WorkerResult {
        let vl = self.dist(v)?.layout;
        if vl.kind != ObjectKind::Rectangular {
            return Err(Fault::DimensionMismatch(format!("`{v}` is not rectangular")));
        }
        let (br, bc) = vl.block_shape();
        let ptag = |step: usize, c: usize| tag(output, PhaseKind::Partial, step, c, 0);
        let v_blocks = self.dist(v)?.blocks.clone();
        for ((i, c), blk) in sorted_pairs(&v_blocks) {
            let p: Vec<f64> = (0..bc).map(|col| blk[col * br..(col + 1) * br].iter().map(|x| x * x).sum()).collect();
            self.record(EventOp::Partial, c, 0, i);
            self.publish(ptag(i, c), Arc::new(p), Some(1));
        }
        let out_layout = ObjectLayout::vector(vl.cols);
        self.reduce_partials(&out_layout, &vl, output, ptag)
    }

    fn log_det(&mut self, factor: &str) -> WorkerResult {
        let d = self.dist(factor)?;
        if d.layout.kind != ObjectKind::Triangular {
            return Err(Fault::DimensionMismatch(format!("`{factor}` is not triangular")));
        }
        let bs = d.layout.rows.block_size();
        let n = d.layout.rows.len();
        let mut sum = 0.0;
        let mut diag_blocks = Vec::new();
        for (&(i, j), blk) in &d.blocks {
            if i != j {
                continue;
            }
            diag_blocks.push(i);
            for r in 0..bs {
                let g = i * bs + r;
                if g >= n {
                    break;
                }
                let v = blk[r + r * bs];
                if v.is_nan() || v <= 0.0 {
                    return Err(Fault::SingularDiagonal { index: g + 1 });
                }
                sum += 2.0 * v.ln();
            }
        }
        for i in diag_blocks {
            self.record(EventOp::LogDet, i, i, 0);
        }
        Ok(Reply::Scalar(sum))
    }

    fn sum_squares(&mut self, name: &str) -> WorkerResult {
        let d = self.dist(name)?;
        if d.layout.kind == ObjectKind::Triangular {
            return Err(Fault::DimensionMismatch(format!("`{name}` is triangular")));
        }
        // Padding is zero, so the whole block can be summed.
        let sum: f64 = d.blocks.values().map(|b| b.iter().map(|x| x * x).sum::<f64>()).sum();
        let keys: Vec<_> = d.blocks.keys().copied().collect();
        for (i, j) in keys {
            self.record(EventOp::SumSquares, i, j, 0);
        }
        Ok(Reply::Scalar(sum))
    }

    fn apply(&mut self, func: &str, inputs: &[String], output: &str) -> WorkerResult {
        let f = self.registry.function(func).cloned().ok_or_else(|| Fault::UnknownFunction(func.to_owned()))?;
        if f.arity() != inputs.len() {
            return Err(Fault::DimensionMismatch(format!(
                "`{func}` takes {} input(s), got {}",
                f.arity(),
                inputs.len()
            )));
        }
        let first = self.store.get(&inputs[0]).cloned().ok_or_else(|| Fault::NoSuchObject(inputs[0].clone()))?;
        let second = match inputs.get(1) {
            Some(n) => Some(self.store.get(n).cloned().ok_or_else(|| Fault::NoSuchObject(n.clone()))?),
            None => None,
        };
        let map = |a: &[f64], b: Option<&[f64]>| -> Vec<f64> {
            match (&f, b) {
                (ApplyFn::Unary(g), _) => a.iter().map(|&x| g(x)).collect(),
                (ApplyFn::Binary(g), Some(b)) => a.iter().zip(b).map(|(&x, &y)| g(x, y)).collect(),
                (ApplyFn::Binary(_), None) => unreachable!("arity checked"),
            }
        };
        let mismatch = || Fault::DimensionMismatch(format!("inputs of `{func}` do not conform"));
        let result = match (first, second) {
            (Entry::Dist(a), None) => Entry::Dist(self.map_dist(&a, None, &map)),
            (Entry::Dist(a), Some(Entry::Dist(b))) => {
                if a.layout != b.layout {
                    return Err(mismatch());
                }
                Entry::Dist(self.map_dist(&a, Some(&b), &map))
            }
            (Entry::Value(StoreValue::Numbers(a)), None) => Entry::Value(StoreValue::Numbers(map(&a, None))),
            (Entry::Value(StoreValue::Numbers(a)), Some(Entry::Value(StoreValue::Numbers(b)))) => {
                if a.len() != b.len() {
                    return Err(mismatch());
                }
                Entry::Value(StoreValue::Numbers(map(&a, Some(&b))))
            }
            _ => return Err(mismatch()),
        };
        self.store.insert(output.to_owned(), result);
        Ok(Reply::Ack)
    }

    fn map_dist(&mut self, a: &DistLocal, b: Option<&DistLocal>, map: &BlockMap<'_>) -> DistLocal {
        let mut blocks = BTreeMap::new();
        for (&(i, j), x) in &a.blocks {
            let mut y = map(x, b.map(|b| b.blocks[&(i, j)].as_slice()));
            impose_padding(&a.layout, i, j, &mut y);
            self.record(EventOp::Apply, i, j, 0);
            blocks.insert((i, j), Arc::new(y));
        }
        DistLocal { layout: a.layout, blocks }
    }
}

type BlockMap<'a> = dyn Fn(&[f64], Option<&[f64]>) -> Vec<f64> + 'a;
type Block = Arc<Vec<f64>>;

/// Blocks in column-major order (by column block, then row block).
fn sorted_pairs(blocks: &BTreeMap<(usize, usize), Block>) -> Vec<((usize, usize), Block)> {
    let mut v: Vec<_> = blocks.iter().map(|(&k, d)| (k, Arc::clone(d))).collect();
    v.sort_by_key(|&((i, j), _)| (j, i));
    v
}
