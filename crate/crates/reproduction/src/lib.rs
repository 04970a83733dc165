//! Random taxonomies for the acceptance checks.

use hiclpl::taxonomy::NodeSpec;
use hiclpl::Taxonomy;
use rand::Rng;

/// Random uniform-depth tree: every internal node gets `1..=max_fanout`
/// children, until `max_nodes` would be exceeded (then one child each).
pub fn random_taxonomy<R: Rng>(rng: &mut R, depth: usize, max_fanout: usize, max_nodes: usize) -> Taxonomy {
    let mut specs = vec![NodeSpec { id: 0, parent: None, level: 0, count: None, name: "root".into() }];
    let mut frontier = vec![0usize];
    for level in 1..=depth {
        let remaining_levels = depth - level;
        let mut next = Vec::new();
        for (k, &p) in frontier.iter().enumerate() {
            let later_parents = frontier.len() - k - 1;
            // every remaining parent and every new node needs at least one descendant per level
            let reserve = later_parents * (remaining_levels + 1) + next.len() * remaining_levels;
            let budget = max_nodes.saturating_sub(specs.len() + reserve);
            let cap = (budget / (remaining_levels + 1)).clamp(1, max_fanout);
            let f = rng.random_range(1..=cap);
            for _ in 0..f {
                let id = specs.len();
                specs.push(NodeSpec {
                    id,
                    parent: Some(p),
                    level,
                    count: (level == depth).then(|| rng.random_range(1..=50)),
                    name: format!("n{id}"),
                });
                next.push(id);
            }
        }
        frontier = next;
    }
    Taxonomy::from_specs(specs).expect("random tree is valid")
}
