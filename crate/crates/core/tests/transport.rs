mod common;

use std::collections::HashMap;

use common::*;
use distgp::dense::Matrix;
use distgp::distla::*;
use distgp::grid::{BlockLayout, GridError, ObjectLayout};
use distgp::transport::events::{Event, EventOp};
use distgp::transport::protocol::{Side, StoreValue, GRID_OBJECT};
use distgp::transport::{SocketConfig, Targets};
use distgp::{Backend, Cluster, ClusterOptions, Error};

fn socket(p: usize, seed: u64) -> Cluster {
    let cfg = SocketConfig::new(env!("CARGO_BIN_EXE_distgp"));
    Cluster::spawn(ClusterOptions::new(p, seed).backend(Backend::Socket(cfg))).unwrap()
}

#[test]
fn spawn_sizes() {
    let cl = Cluster::in_process(1, 42).unwrap();
    assert_eq!(cl.grid().order(), 1);
    let cl = Cluster::in_process(10, 42).unwrap();
    assert_eq!(cl.grid().order(), 4);
    assert_eq!(cl.process_count(), 10);
    match Cluster::in_process(8, 42) {
        Err(Error::Grid(GridError::NotTriangularNumber(8))) => {}
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn push_pull_ls_rm() {
    let mut cl = Cluster::in_process(10, 42).unwrap();
    assert_eq!(cl.remote_ls(4).unwrap(), vec![GRID_OBJECT.to_owned()]);
    let theta = StoreValue::Numbers(vec![1.5, 0.25, f64::MIN_POSITIVE]);
    cl.push("theta", theta.clone(), &Targets::All).unwrap();
    assert_eq!(cl.pull("theta", 7).unwrap(), theta);
    for r in 1..=10 {
        assert!(cl.remote_ls(r).unwrap().contains(&"theta".to_owned()));
    }
    assert!(cl.pull("nothing", 1).unwrap_err().is_no_such_object());
    cl.remote_rm("theta", &Targets::All).unwrap();
    assert!(!cl.remote_ls(3).unwrap().contains(&"theta".to_owned()));
    assert!(cl.pull("theta", 7).unwrap_err().is_no_such_object());
    cl.remote_rm("theta", &Targets::All).unwrap();

    cl.push("only-two", StoreValue::Numbers(vec![2.0]), &Targets::Ranks(vec![2])).unwrap();
    assert!(cl.remote_ls(2).unwrap().contains(&"only-two".to_owned()));
    assert!(!cl.remote_ls(1).unwrap().contains(&"only-two".to_owned()));
    assert!(matches!(cl.pull(GRID_OBJECT, 5).unwrap(), StoreValue::Meta(m) if m.rank == 5 && m.grid_order == 4));
}

#[test]
fn operations_after_shutdown_fail() {
    let mut cl = Cluster::in_process(3, 1).unwrap();
    cl.shutdown().unwrap();
    assert!(!cl.is_running());
    assert!(matches!(cl.remote_ls(1), Err(Error::ClusterDown)));
    assert!(matches!(cl.push("x", StoreValue::Numbers(vec![]), &Targets::All), Err(Error::ClusterDown)));
    cl.shutdown().unwrap();
}

#[test]
fn worker_streams() {
    let draws = |seed| {
        let mut cl = Cluster::in_process(3, seed).unwrap();
        (1..=3).map(|r| cl.worker_standard_normals(r, 1000).unwrap()).collect::<Vec<_>>()
    };
    let a = draws(42);
    assert_eq!(a, draws(42));
    assert_ne!(a, draws(43));

    let mut cl = Cluster::in_process(3, 7).unwrap();
    let x = cl.worker_standard_normals(1, 100_000).unwrap();
    let y = cl.worker_standard_normals(2, 100_000).unwrap();
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    assert!(mean.abs() < 0.02 && (var - 1.0).abs() < 0.03, "mean {mean} var {var}");
    let my = y.iter().sum::<f64>() / n;
    let vy = y.iter().map(|v| (v - my).powi(2)).sum::<f64>() / (n - 1.0);
    let cov = x.iter().zip(&y).map(|(a, b)| (a - mean) * (b - my)).sum::<f64>() / (n - 1.0);
    assert!((cov / (var * vy).sqrt()).abs() < 0.02);
}

#[test]
fn in_process_runs_are_bit_identical() {
    let run = || {
        let mut cl = Cluster::in_process(6, 9).unwrap();
        let bl = block_layout(&cl, 50, Some(2)).unwrap();
        distribute_triangular(&mut cl, "C", &random_spd(1, 50), bl).unwrap();
        distributed_cholesky(&mut cl, "C", "L").unwrap();
        construct_rnorm_distributed(&mut cl, "z", ObjectLayout::vector(bl)).unwrap();
        mult_chol(&mut cl, "L", "z", "y").unwrap();
        collect_vector(&mut cl, "y").unwrap()
    };
    let a = run();
    let b = run();
    assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
}

/// Every distributed kernel on one cluster; the results are compared bit for bit.
fn kernel_suite(cl: &mut Cluster) -> Vec<Vec<f64>> {
    let (n, m) = (41, 13);
    let rows = block_layout(cl, n, Some(2)).unwrap();
    let cols = block_layout(cl, m, Some(1)).unwrap();
    let mut out = Vec::new();
    distribute_triangular(cl, "C", &random_spd(3, n), rows).unwrap();
    distributed_cholesky(cl, "C", "L").unwrap();
    out.push(collect_triangular(cl, "L").unwrap().into_vec());
    distribute_vector(cl, "b", &normals(4, n), rows).unwrap();
    triangular_solve(cl, "L", "b", "u", Side::Forward).unwrap();
    triangular_solve(cl, "L", "u", "x", Side::Back).unwrap();
    out.push(collect_vector(cl, "x").unwrap());
    distribute_matrix(cl, "B", &random_matrix(5, n, m), rows, cols).unwrap();
    triangular_solve(cl, "L", "B", "V", Side::Forward).unwrap();
    out.push(collect_matrix(cl, "V").unwrap().into_vec());
    mult_chol(cl, "L", "B", "M").unwrap();
    out.push(collect_matrix(cl, "M").unwrap().into_vec());
    crossprod_mat_vec(cl, "V", "u", "w").unwrap();
    out.push(collect_vector(cl, "w").unwrap());
    crossprod_self(cl, "V", "S").unwrap();
    out.push(collect_triangular(cl, "S").unwrap().into_vec());
    crossprod_self_diag(cl, "V", "s").unwrap();
    out.push(collect_vector(cl, "s").unwrap());
    out.push(vec![log_det_from_chol(cl, "L").unwrap(), sum_of_squares(cl, "u").unwrap()]);
    construct_rnorm_distributed(cl, "Z", ObjectLayout::rectangular(rows, cols)).unwrap();
    out.push(collect_matrix(cl, "Z").unwrap().into_vec());
    cl.remote_apply("subtract", &["b", "u"], "d").unwrap();
    out.push(collect_vector(cl, "d").unwrap());
    out.push(cl.worker_standard_normals(cl.process_count(), 10).unwrap());
    out
}

#[test]
fn socket_backend_matches_in_process_bit_for_bit() {
    for p in [3, 6] {
        let mut a = Cluster::in_process(p, 77).unwrap();
        let mut b = socket(p, 77);
        let ra = kernel_suite(&mut a);
        let rb = kernel_suite(&mut b);
        assert_eq!(ra.len(), rb.len());
        for (k, (x, y)) in ra.iter().zip(&rb).enumerate() {
            assert_eq!(x.len(), y.len());
            assert!(x.iter().zip(y).all(|(u, v)| u.to_bits() == v.to_bits()), "P={p}, output {k}");
        }
        b.shutdown().unwrap();
    }
}

#[test]
fn socket_backend_errors_and_store() {
    let mut cl = socket(3, 1);
    cl.push("v", StoreValue::Numbers(vec![1.0, 2.0]), &Targets::All).unwrap();
    assert_eq!(cl.pull("v", 3).unwrap(), StoreValue::Numbers(vec![1.0, 2.0]));
    let bl = BlockLayout::new(4, 1, cl.grid()).unwrap();
    distribute_triangular(&mut cl, "C", &Matrix::from_fn(4, 4, |i, j| if i == j { -1.0 } else { 0.0 }), bl).unwrap();
    let err = distributed_cholesky(&mut cl, "C", "L").unwrap_err();
    assert!(err.is_not_positive_definite(), "{err:?}");
    // The cluster stays usable after a failed collective.
    assert!(cl.remote_ls(2).unwrap().contains(&"v".to_owned()));
    cl.shutdown().unwrap();
    assert!(matches!(cl.remote_ls(1), Err(Error::ClusterDown)));
}

#[test]
fn custom_registry_needs_in_process_backend() {
    let cfg = SocketConfig::new(env!("CARGO_BIN_EXE_distgp"));
    let opts = ClusterOptions::new(1, 0).backend(Backend::Socket(cfg)).registry(distgp::registry::Registry::builtin());
    assert!(matches!(Cluster::spawn(opts), Err(Error::BackendUnavailable(_))));
}

fn factor_events(p: usize, n: usize, h: usize) -> Vec<Event> {
    let mut cl = Cluster::spawn(ClusterOptions::new(p, 0).event_log(true)).unwrap();
    let bl = BlockLayout::new(n, h, cl.grid()).unwrap();
    distribute_triangular(&mut cl, "C", &random_spd(2, n), bl).unwrap();
    cl.take_events().unwrap();
    distributed_cholesky(&mut cl, "C", "L").unwrap();
    cl.take_events().unwrap()
}

#[test]
fn critical_path_order() {
    for (p, h) in [(6, 1), (10, 1), (3, 2)] {
        let events = factor_events(p, 60, h);
        let seq_of = |op: EventOp, i: usize, j: usize, k: usize| {
            events.iter().find(|e| e.op == op && e.i == i && e.j == j && e.k == k).map(|e| e.seq).unwrap()
        };
        let b = events.iter().filter(|e| e.op == EventOp::Factor).count();
        assert_eq!(b, BlockLayout::new(60, h, &distgp::ProcessGrid::from_process_count(p).unwrap()).unwrap().nblocks());
        for k in 1..=b {
            let f = seq_of(EventOp::Factor, k, k, k);
            for i in k + 1..=b {
                let s = seq_of(EventOp::Solve, i, k, k);
                assert!(f < s, "factor {k} before solve ({i},{k})");
                for j in k + 1..=i {
                    let u = seq_of(EventOp::Update, i, j, k);
                    assert!(s < u && seq_of(EventOp::Solve, j, k, k) < u);
                }
            }
            if k > 1 {
                // The diagonal block is fully updated before it is factored.
                assert!(seq_of(EventOp::Update, k, k, k - 1) < f);
            }
        }
        let mut by_rank: HashMap<usize, u64> = HashMap::new();
        for e in &events {
            let last = by_rank.entry(e.rank).or_insert(0);
            assert!(e.seq > *last, "per-worker sequence numbers increase");
            *last = e.seq;
        }
    }
}

#[test]
fn peak_resident_blocks_are_bounded() {
    for (p, h) in [(3, 1), (6, 2), (10, 3), (15, 2)] {
        let mut cl = Cluster::in_process(p, 0).unwrap();
        let bl = BlockLayout::new(90, h, cl.grid()).unwrap();
        distribute_triangular(&mut cl, "C", &random_spd(2, 90), bl).unwrap();
        distributed_cholesky(&mut cl, "C", "L").unwrap();
        for s in cl.last_cholesky_stats() {
            let own = if s.coord.is_diagonal() { h * (h + 1) / 2 } else { h * h };
            assert_eq!(s.owned_blocks, own);
            assert!(s.peak_resident <= h * h + 4, "{s:?}");
        }
    }
}

#[test]
fn socket_workers_that_never_connect() {
    let mut cfg = SocketConfig::new("/bin/true");
    cfg.startup_timeout = std::time::Duration::from_secs(2);
    let err = Cluster::spawn(ClusterOptions::new(3, 0).backend(Backend::Socket(cfg))).unwrap_err();
    assert!(matches!(err, Error::BackendUnavailable(_) | Error::WorkerLost { .. }), "{err:?}");
}
