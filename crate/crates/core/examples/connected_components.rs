// Label the components of a marked-edge graph with the parallel
// min-label propagation and check it against sequential union-find.
//
//     cargo run --release --example connected_components

use std::time::Instant;

use uniap::ccl::{connected_components, label_propagation_components, union_find_oracle};
use uniap::graph::Edge;
use uniap::{with_workers, Assignment};

/// A `side×side` grid where horizontal links are cut every seventh column
/// and vertical links survive only on every fifth column.
fn striped_grid(side: usize) -> Vec<Edge> {
    let mut edges = Vec::new();
    for r in 0..side {
        for c in 0..side {
            let p = r * side + c;
            if c + 1 < side && c % 7 != 6 {
                edges.push((p, p + 1));
            }
            if r + 1 < side && c % 5 == 0 {
                edges.push((p, p + side));
            }
        }
    }
    edges
}

pub fn run_example() -> uniap::Result<Assignment> {
    let small = connected_components(4, &[(0, 1), (1, 2)])?;
    println!("4 nodes, path 0-1-2: labels {:?}", small.map());

    let side = 200;
    let edges = striped_grid(side);
    let start = Instant::now();
    let oracle = union_find_oracle(side * side, &edges)?;
    println!(
        "{} nodes, {} edges: union-find finds {} components in {:.2?}",
        side * side,
        edges.len(),
        oracle.num_supernodes(),
        start.elapsed()
    );
    for workers in [1, 2, 4] {
        let start = Instant::now();
        let labels = with_workers(workers, || label_propagation_components(side * side, &edges))?;
        println!(
            "  label propagation, {workers} worker(s): {:.2?}, same partition: {}",
            start.elapsed(),
            labels == oracle
        );
    }
    Ok(oracle)
}

fn main() -> uniap::Result<()> {
    run_example().map(|_| ())
}
