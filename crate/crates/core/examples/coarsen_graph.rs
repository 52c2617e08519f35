// Build the token grid graph of a small map and coarsen it step by step:
// score edges, keep those above the threshold, merge their components.
//
//     cargo run --example coarsen_graph

use uniap::ccl::connected_components;
use uniap::graph::{apply_assignment, init_grid_graph, make_fully_connected};
use uniap::pooling::{coarsen_to_fixpoint, edge_similarities, update_features};
use uniap::{FeatureMap, Graph, UniapConfig};

fn show(label: &str, g: &Graph) {
    let masks: Vec<Vec<usize>> = g.masks().iter().map(|m| m.iter().collect()).collect();
    println!("{label}: level {}, {} nodes {masks:?}, {} edges", g.level(), g.num_nodes(), g.edges().len());
}

pub fn run_example() -> uniap::Result<Graph> {
    // 3x4 map: left half along one axis, right half along another, with a
    // tilted copy of the left feature in the top-right corner
    let (a, b, c) = ([1.0, 0.0], [0.0, 1.0], [0.8, 0.6]);
    let rows = [a, a, b, c, a, a, b, b, a, a, b, b];
    let fm = FeatureMap::new(3, 4, 2, rows.concat())?;
    let cfg = UniapConfig {
        thresholds: vec![0.8],
        ..UniapConfig::default()
    };

    let g = init_grid_graph(&fm)?;
    show("grid", &g);
    let scores = edge_similarities(&g, &fm, &cfg)?;
    let marked: Vec<_> = g
        .edges()
        .iter()
        .zip(&scores)
        .filter(|(_, &s)| s >= 0.8)
        .map(|(e, _)| *e)
        .collect();
    println!("{} of {} edges score >= 0.8", marked.len(), scores.len());

    // one hand-driven merge step
    let assignment = connected_components(g.num_nodes(), &marked)?;
    let merged = update_features(&apply_assignment(&g, &assignment)?, &fm, cfg.sigma)?;
    show("after one step", &merged);

    // the same thing run until nothing scores above the threshold
    let fixpoint = coarsen_to_fixpoint(&g, &fm, 0.8, &cfg)?;
    show("fixpoint", &fixpoint);

    let semantic = coarsen_to_fixpoint(&make_fully_connected(&fixpoint), &fm, 0.8, &cfg)?;
    show("semantic", &semantic);
    Ok(fixpoint)
}

fn main() -> uniap::Result<()> {
    run_example().map(|_| ())
}
