//! Distributed linear algebra on block-distributed objects.
//!
//! Objects live on the workers under a shared name; the master only keeps
//! their layouts. Every function here is one collective: it returns once
//! all workers have finished their part.

mod kernels;

use crate::dense::Matrix;
use crate::error::{Error, Result};
use crate::grid::{BlockLayout, ObjectKind, ObjectLayout};
use crate::transport::protocol::{BlockData, Command, Kernel, LocalPiece, Reply, Side};
use crate::transport::{unexpected, Cluster};

pub(crate) use kernels::impose_padding;

/// Master-side reference to a distributed object.
#[derive(Debug, Clone, PartialEq)]
pub struct DistHandle {
    name: String,
    layout: ObjectLayout,
}

impl DistHandle {
    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn layout(&self) -> ObjectLayout {
        self.layout
    }

    pub fn kind(&self) -> ObjectKind {
        self.layout.kind
    }

    /// Unpadded `(rows, cols)`; vectors report one column.
    pub fn dims(&self) -> (usize, usize) {
        self.layout.dims()
    }
}

fn handle(cluster: &mut Cluster, name: &str, layout: ObjectLayout) -> DistHandle {
    cluster.register(name, layout);
    DistHandle { name: name.to_owned(), layout }
}

fn check_grid(cluster: &Cluster, layout: &ObjectLayout) -> Result<()> {
    let d = cluster.grid().order();
    let cols_ok = layout.kind == ObjectKind::Vector || layout.cols.grid_order() == d;
    if layout.rows.grid_order() != d || !cols_ok {
        return Err(Error::DimensionMismatch(format!(
            "layout built for grid order {}, cluster has order {d}",
            layout.rows.grid_order()
        )));
    }
    Ok(())
}

/// Vector layout of length `n` with replication `h`, or the default `h`.
pub fn vector_layout(cluster: &Cluster, n: usize, h: Option<usize>) -> Result<ObjectLayout> {
    Ok(ObjectLayout::vector(block_layout(cluster, n, h)?))
}

/// Blocking of one dimension with replication `h`, or the default `h`.
pub fn block_layout(cluster: &Cluster, n: usize, h: Option<usize>) -> Result<BlockLayout> {
    Ok(match h {
        Some(h) => BlockLayout::new(n, h, cluster.grid())?,
        None => BlockLayout::with_default_h(n, cluster.grid())?,
    })
}

/// Splits a master-side object into blocks and sends each worker its piece.
/// `value(gi, gj)` is read at 0-based unpadded positions only.
fn distribute(cluster: &mut Cluster, name: &str, layout: ObjectLayout, value: impl Fn(usize, usize) -> f64) -> Result<DistHandle> {
    check_grid(cluster, &layout)?;
    let (br, bc) = layout.block_shape();
    let vector = layout.kind == ObjectKind::Vector;
    let mut batch = Vec::new();
    for (idx, coord) in cluster.grid().coords().enumerate() {
        let mut blocks = Vec::new();
        for (i, j) in layout.blocks_of0(coord) {
            let mut data = vec![0.0; br * bc];
            for (r, c) in layout.block_entries0(i, j) {
                let gi = layout.rows.global0(i, r);
                let gj = if vector { 0 } else { layout.cols.global0(j, c) };
                if !layout.is_padding0(gi, gj) {
                    data[r + c * br] = value(gi, gj);
                }
            }
            impose_padding(&layout, i, j, &mut data);
            blocks.push(BlockData { i, j, data });
        }
        batch.push((idx + 1, Command::Put { name: name.to_owned(), piece: LocalPiece { layout, blocks } }));
    }
    cluster.run(batch)?;
    Ok(handle(cluster, name, layout))
}

pub fn distribute_vector(cluster: &mut Cluster, name: &str, x: &[f64], layout: BlockLayout) -> Result<DistHandle> {
    if x.len() != layout.len() {
        return Err(Error::DimensionMismatch(format!("vector of length {} for a layout of {}", x.len(), layout.len())));
    }
    distribute(cluster, name, ObjectLayout::vector(layout), |i, _| x[i])
}

pub fn distribute_matrix(
    cluster: &mut Cluster,
    name: &str,
    m: &Matrix,
    rows: BlockLayout,
    cols: BlockLayout,
) -> Result<DistHandle> {
    if (m.rows(), m.cols()) != (rows.len(), cols.len()) {
        return Err(Error::DimensionMismatch(format!("{}x{} matrix for a {}x{} layout", m.rows(), m.cols(), rows.len(), cols.len())));
    }
    distribute(cluster, name, ObjectLayout::rectangular(rows, cols), |i, j| m[(i, j)])
}

/// Distributes the lower triangle of the square matrix `m`.
pub fn distribute_triangular(cluster: &mut Cluster, name: &str, m: &Matrix, layout: BlockLayout) -> Result<DistHandle> {
    if (m.rows(), m.cols()) != (layout.len(), layout.len()) {
        return Err(Error::DimensionMismatch(format!("{}x{} matrix for an order-{} layout", m.rows(), m.cols(), layout.len())));
    }
    distribute(cluster, name, ObjectLayout::triangular(layout), |i, j| m[(i, j)])
}

/// Evaluates the registered `generator` entrywise on every worker's local
/// index set. `inputs` names a pushed [`Inputs`](crate::transport::protocol::Inputs) object.
pub fn construct_distributed(
    cluster: &mut Cluster,
    name: &str,
    layout: ObjectLayout,
    generator: &str,
    params: &[f64],
    inputs: Option<&str>,
) -> Result<DistHandle> {
    check_grid(cluster, &layout)?;
    cluster.run_kernel(Kernel::Construct {
        name: name.to_owned(),
        layout,
        generator: generator.to_owned(),
        params: params.to_vec(),
        inputs: inputs.map(str::to_owned),
    })?;
    Ok(handle(cluster, name, layout))
}

/// Fills a vector or rectangular object with standard normals from each
/// worker's own stream.
pub fn construct_rnorm_distributed(cluster: &mut Cluster, name: &str, layout: ObjectLayout) -> Result<DistHandle> {
    rnorm(cluster, name, layout, false)
}

/// Same shape as [`construct_rnorm_distributed`] but all zeros, without
/// advancing any stream.
pub fn construct_zeros_distributed(cluster: &mut Cluster, name: &str, layout: ObjectLayout) -> Result<DistHandle> {
    rnorm(cluster, name, layout, true)
}

fn rnorm(cluster: &mut Cluster, name: &str, layout: ObjectLayout, zero: bool) -> Result<DistHandle> {
    check_grid(cluster, &layout)?;
    cluster.run_kernel(Kernel::Rnorm { name: name.to_owned(), layout, zero })?;
    Ok(handle(cluster, name, layout))
}

/// Lower Cholesky factor of the distributed symmetric matrix `input`.
/// `output` may equal `input` to factor in place. On failure no part of
/// `output` is kept.
pub fn distributed_cholesky(cluster: &mut Cluster, input: &str, output: &str) -> Result<DistHandle> {
    let layout = cluster.layout_of(input)?;
    if layout.kind != ObjectKind::Triangular {
        return Err(Error::DimensionMismatch(format!("`{input}` is not triangular")));
    }
    let replies = match cluster.run_kernel(Kernel::Cholesky { input: input.to_owned(), output: output.to_owned() }) {
        Ok(r) => r,
        Err(e) => {
            cluster.forget(output);
            if input == output {
                cluster.forget(input);
            }
            return Err(e);
        }
    };
    let stats = replies
        .into_iter()
        .map(|r| match r {
            Reply::Chol(s) => Ok(s),
            other => Err(unexpected(other)),
        })
        .collect::<Result<Vec<_>>>()?;
    cluster.set_cholesky_stats(stats);
    Ok(handle(cluster, output, layout))
}

fn factor_and_operand(cluster: &Cluster, factor: &str, other: &str) -> Result<ObjectLayout> {
    let ll = cluster.layout_of(factor)?;
    let ol = cluster.layout_of(other)?;
    if ll.kind != ObjectKind::Triangular {
        return Err(Error::DimensionMismatch(format!("`{factor}` is not triangular")));
    }
    if ol.kind == ObjectKind::Triangular || ol.rows != ll.rows {
        return Err(Error::DimensionMismatch(format!("`{other}` does not conform to `{factor}`")));
    }
    Ok(ol)
}

/// Solves `L x = b` (`Side::Forward`) or `L^T x = b` (`Side::Back`) for a
/// vector or rectangular right-hand side.
pub fn triangular_solve(cluster: &mut Cluster, factor: &str, rhs: &str, output: &str, side: Side) -> Result<DistHandle> {
    let layout = factor_and_operand(cluster, factor, rhs)?;
    cluster.run_kernel(Kernel::Solve { factor: factor.to_owned(), rhs: rhs.to_owned(), output: output.to_owned(), side })?;
    Ok(handle(cluster, output, layout))
}

/// `L x` for a lower-triangular `L`.
pub fn mult_chol(cluster: &mut Cluster, factor: &str, x: &str, output: &str) -> Result<DistHandle> {
    let layout = factor_and_operand(cluster, factor, x)?;
    cluster.run_kernel(Kernel::MultChol { factor: factor.to_owned(), x: x.to_owned(), output: output.to_owned() })?;
    Ok(handle(cluster, output, layout))
}

fn rectangular(cluster: &Cluster, v: &str) -> Result<ObjectLayout> {
    let vl = cluster.layout_of(v)?;
    if vl.kind != ObjectKind::Rectangular {
        return Err(Error::DimensionMismatch(format!("`{v}` is not rectangular")));
    }
    Ok(vl)
}

/// `V^T u` for `V` of shape `n x m` and `u` of length `n`.
pub fn crossprod_mat_vec(cluster: &mut Cluster, v: &str, u: &str, output: &str) -> Result<DistHandle> {
    let vl = rectangular(cluster, v)?;
    let ul = cluster.layout_of(u)?;
    if ul.kind != ObjectKind::Vector || ul.rows != vl.rows {
        return Err(Error::DimensionMismatch(format!("`{u}` does not conform to `{v}`")));
    }
    cluster.run_kernel(Kernel::CrossprodMatVec { v: v.to_owned(), u: u.to_owned(), output: output.to_owned() })?;
    Ok(handle(cluster, output, ObjectLayout::vector(vl.cols)))
}

/// `V^T V`, lower storage.
pub fn crossprod_self(cluster: &mut Cluster, v: &str, output: &str) -> Result<DistHandle> {
    let vl = rectangular(cluster, v)?;
    cluster.run_kernel(Kernel::CrossprodSelf { v: v.to_owned(), output: output.to_owned() })?;
    Ok(handle(cluster, output, ObjectLayout::triangular(vl.cols)))
}

/// The diagonal of `V^T V` as a distributed vector.
pub fn crossprod_self_diag(cluster: &mut Cluster, v: &str, output: &str) -> Result<DistHandle> {
    let vl = rectangular(cluster, v)?;
    cluster.run_kernel(Kernel::CrossprodSelfDiag { v: v.to_owned(), output: output.to_owned() })?;
    Ok(handle(cluster, output, ObjectLayout::vector(vl.cols)))
}

/// Reassembles the unpadded object on the master. Triangular objects come
/// back lower-triangular with a zero upper part; vectors as one column.
pub fn collect(cluster: &mut Cluster, name: &str) -> Result<Matrix> {
    let layout = cluster.layout_of(name)?;
    let (n, m) = layout.dims();
    let (br, _) = layout.block_shape();
    let vector = layout.kind == ObjectKind::Vector;
    let mut out = Matrix::zeros(n, m);
    for reply in cluster.run_all(Command::Collect { name: name.to_owned() })? {
        let piece = match reply {
            Reply::Piece(p) => p,
            other => return Err(unexpected(other)),
        };
        for b in piece.blocks {
            for (r, c) in layout.block_entries0(b.i, b.j) {
                let gi = layout.rows.global0(b.i, r);
                let gj = if vector { 0 } else { layout.cols.global0(b.j, c) };
                if !layout.is_padding0(gi, gj) {
                    out[(gi, gj)] = b.data[r + c * br];
                }
            }
        }
    }
    Ok(out)
}

fn collect_kind(cluster: &mut Cluster, name: &str, kind: ObjectKind) -> Result<Matrix> {
    let layout = cluster.layout_of(name)?;
    if layout.kind != kind {
        return Err(Error::DimensionMismatch(format!("`{name}` is {:?}, not {kind:?}", layout.kind)));
    }
    collect(cluster, name)
}

pub fn collect_vector(cluster: &mut Cluster, name: &str) -> Result<Vec<f64>> {
    collect_kind(cluster, name, ObjectKind::Vector).map(Matrix::into_vec)
}

pub fn collect_matrix(cluster: &mut Cluster, name: &str) -> Result<Matrix> {
    collect_kind(cluster, name, ObjectKind::Rectangular)
}

pub fn collect_triangular(cluster: &mut Cluster, name: &str) -> Result<Matrix> {
    collect_kind(cluster, name, ObjectKind::Triangular)
}

/// The unpadded diagonal of a triangular object.
pub fn collect_diagonal(cluster: &mut Cluster, name: &str) -> Result<Vec<f64>> {
    let layout = cluster.layout_of(name)?;
    if layout.kind != ObjectKind::Triangular {
        return Err(Error::DimensionMismatch(format!("`{name}` is not triangular")));
    }
    let n = layout.rows.len();
    let mut out = vec![0.0; n];
    for reply in cluster.run_all(Command::CollectDiagonal { name: name.to_owned() })? {
        let Reply::Diagonal(blocks) = reply else { return Err(unexpected(reply)) };
        for (i, diag) in blocks {
            for (r, v) in diag.into_iter().enumerate() {
                let g = layout.rows.global0(i, r);
                if g < n {
                    out[g] = v;
                }
            }
        }
    }
    Ok(out)
}

fn sum_scalars(replies: Vec<Reply>) -> Result<f64> {
    // Rank order keeps the sum reproducible.
    let mut sum = 0.0;
    for r in replies {
        match r {
            Reply::Scalar(v) => sum += v,
            other => return Err(unexpected(other)),
        }
    }
    Ok(sum)
}

/// `log det(L L^T) = 2 sum log L_ii` over the unpadded diagonal.
pub fn log_det_from_chol(cluster: &mut Cluster, factor: &str) -> Result<f64> {
    let layout = cluster.layout_of(factor)?;
    if layout.kind != ObjectKind::Triangular {
        return Err(Error::DimensionMismatch(format!("`{factor}` is not triangular")));
    }
    let replies = cluster.run_kernel(Kernel::LogDet { factor: factor.to_owned() })?;
    sum_scalars(replies)
}

/// Sum of squares of a distributed vector or rectangular object.
pub fn sum_of_squares(cluster: &mut Cluster, name: &str) -> Result<f64> {
    let layout = cluster.layout_of(name)?;
    if layout.kind == ObjectKind::Triangular {
        return Err(Error::DimensionMismatch(format!("`{name}` is triangular")));
    }
    let replies = cluster.run_kernel(Kernel::SumSquares { name: name.to_owned() })?;
    sum_scalars(replies)
}
