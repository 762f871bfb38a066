//! Conditional independence queries on directed graphs, answered by active-trail
//! reachability and by moralizing the ancestral graph.
//!
//! Run with `cargo run --release --example d_separation`.

use edswitch::bn::{collider_example, d_separated_named, switching_ar_graph, switching_lgssm_dec_graph, Dag, Method};

fn query(g: &Dag, x: &[&str], y: &[&str], z: &[&str]) -> edswitch::Result<()> {
    let a = d_separated_named(g, x, y, z, Method::Pathwise)?;
    let b = d_separated_named(g, x, y, z, Method::Moralize)?;
    assert_eq!(a, b);
    let verdict = if a { "independent" } else { "dependent" };
    println!("  {x:?} and {y:?} given {z:?}: {verdict}");
    Ok(())
}

fn main() -> edswitch::Result<()> {
    println!("collider x1 -> x3 <- x2, x3 -> x4 <- x2");
    let g = collider_example();
    query(&g, &["x1"], &["x2"], &[])?;
    query(&g, &["x1"], &["x2"], &["x3"])?;
    query(&g, &["x1"], &["x2"], &["x4"])?;
    query(&g, &["x1"], &["x4"], &["x2", "x3"])?;

    println!("edge list");
    let g = Dag::parse_edge_list("rain -> wet\nsprinkler -> wet\nwet -> slippery\n")?;
    query(&g, &["rain"], &["sprinkler"], &["slippery"])?;
    query(&g, &["rain"], &["slippery"], &["wet"])?;

    println!("switching autoregression");
    let g = switching_ar_graph(4);
    query(&g, &["s1"], &["s3"], &["s2"])?;
    query(&g, &["s1"], &["s3"], &["s2", "v2"])?;
    query(&g, &["v1"], &["v3"], &["v2"])?;
    query(&g, &["v1"], &["v3"], &["v2", "s2", "s3"])?;

    for reset in [false, true] {
        println!("switching state-space model with counts, reset edges {reset}");
        let g = switching_lgssm_dec_graph(3, reset);
        query(&g, &["h1"], &["h3"], &["h2"])?;
        query(&g, &["v1"], &["v3"], &["s1", "s2", "s3", "c1", "c2", "c3"])?;
    }
    Ok(())
}
