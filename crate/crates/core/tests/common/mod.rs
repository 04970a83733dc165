#![allow(dead_code)]

use hiclpl::taxonomy::NodeSpec;
use hiclpl::Taxonomy;
use rand::Rng;

/// Node counts per level below the root, plus the instance count given to every leaf.
pub struct Group {
    pub levels: Vec<usize>,
    pub per_leaf: u64,
}

/// Builds a uniform-depth tree from several groups of level-1 subtrees.
/// Within a group, the `n` children of a level are spread as evenly as
/// possible over the `p` parents above them.
pub fn shaped(groups: &[Group]) -> Taxonomy {
    let depth = groups[0].levels.len();
    let mut specs = vec![NodeSpec { id: 0, parent: None, level: 0, count: None, name: "root".into() }];
    let mut frontier: Vec<Vec<usize>> = groups.iter().map(|_| vec![0]).collect();
    for level in 1..=depth {
        for (g, group) in groups.iter().enumerate() {
            let n = group.levels[level - 1];
            let parents = &frontier[g];
            let mut next = Vec::with_capacity(n);
            for i in 0..n {
                let parent = if level == 1 { 0 } else { parents[i * parents.len() / n] };
                let id = specs.len();
                specs.push(NodeSpec {
                    id,
                    parent: Some(parent),
                    level,
                    count: (level == depth).then_some(group.per_leaf),
                    name: format!("l{level}_{id}"),
                });
                next.push(id);
            }
            frontier[g] = next;
        }
    }
    Taxonomy::from_specs(specs).expect("shaped tree is valid")
}

/// 32 orders, 132 families, 572 genera and 1432 species; the first seven
/// orders hold 94 families, 436 genera and 1145 species with far more
/// instances than the rest.
pub fn bird_shaped() -> Taxonomy {
    shaped(&[
        Group { levels: vec![7, 94, 436, 1145], per_leaf: 100 },
        Group { levels: vec![25, 38, 136, 287], per_leaf: 10 },
    ])
}

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
