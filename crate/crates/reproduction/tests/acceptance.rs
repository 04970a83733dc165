//! Acceptance checks. Runs without the libtest harness so that every
//! criterion prints exactly one PASS/FAIL line; exits non-zero if any fails.


use std::collections::BTreeMap;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use hiclpl::experiment::{ablation_run, desk_config, run_variant, AblationReport, Scenario, Variant};
use hiclpl::fixture::CorrectionFixture;
use hiclpl::inference::{beam_predict, exhaustive_predict, greedy_predict, BeamConfig};
use hiclpl::losses::{
    compute_node_probabilities, hicl_loss, prob_loss_with_draws, Aggregation, ForegroundBatch, HiclConfig, OthersDraws,
};
use hiclpl::memory::{momentum_coefficient, MemoryBank};
use hiclpl::model::{build_head, HierarchicalHead};
use hiclpl::numeric::{softmax_cross_entropy, NetGrads};
use hiclpl::rng;
use hiclpl::trainer::Ablation;
use hiclpl::{LeafPath, NodeId, Taxonomy};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use reproduction::random_taxonomy;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn normal_vec(r: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| r.sample(StandardNormal)).collect()
}

fn unit_vec(r: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let v = normal_vec(r, n);
    let len = v.iter().map(|a| a * a).sum::<f64>().sqrt();
    v.into_iter().map(|a| a / len).collect()
}

fn random_paths(r: &mut ChaCha8Rng, t: &Taxonomy, n: usize) -> Vec<LeafPath> {
    let leaves = t.leaves();
    (0..n).map(|_| t.path_of(leaves[r.random_range(0..leaves.len())]).unwrap()).collect()
}

fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Central differences of `f` around `point`, one coordinate at a time.
fn central_differences(point: &[f64], h: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut x = point.to_vec();
    (0..point.len())
        .map(|i| {
            x[i] = point[i] + h;
            let up = f(&x);
            x[i] = point[i] - h;
            let down = f(&x);
            x[i] = point[i];
            (up - down) / (2.0 * h)
        })
        .collect()
}

fn flat_features(batch: &ForegroundBatch<f64>) -> Vec<f64> {
    batch.features.concat()
}

fn with_features(batch: &ForegroundBatch<f64>, flat: &[f64], d: usize) -> ForegroundBatch<f64> {
    ForegroundBatch { features: flat.chunks(d).map(<[f64]>::to_vec).collect(), paths: batch.paths.clone() }
}

/// Analytic prob-loss gradients: per-example feature grads and per-classifier parameter grads.
fn prob_grads(
    batch: &ForegroundBatch<f64>,
    head: &HierarchicalHead<f64>,
    t: &Taxonomy,
    draws: &OthersDraws,
) -> (Vec<Vec<f64>>, BTreeMap<NodeId, NetGrads<f64>>) {
    let out = prob_loss_with_draws(batch, head, t, draws).unwrap();
    let d = head.feature_dim();
    let mut dx = vec![vec![0.0; d]; batch.len()];
    let mut dp: BTreeMap<NodeId, NetGrads<f64>> = BTreeMap::new();
    for (term, g) in out.terms.iter().zip(&out.logit_grads) {
        let net = &head.classifier(term.node).unwrap().net;
        let (_, cache) = net.forward(&batch.features[term.example], false).unwrap();
        let (pg, xg) = net.backward(&cache, g).unwrap();
        for (a, b) in dx[term.example].iter_mut().zip(xg) {
            *a += b;
        }
        dp.entry(term.node).or_insert_with(|| NetGrads::zeros_like(net)).accumulate(&pg);
    }
    (dx, dp)
}

fn criterion_1() -> Outcome {
    const D: usize = 8;
    const N: usize = 4;
    const H: f64 = 1e-5;
    let start = Instant::now();
    let mut r = rng::derive(101, &[]);
    let mut worst_hicl: f64 = 0.0;
    let mut worst_prob: f64 = 0.0;
    for config in 0..20u64 {
        let t = random_taxonomy(&mut r, 2, 3, 7);
        assert!(t.len() <= 7 && t.depth() == 2);
        let paths = random_paths(&mut r, &t, N);
        let batch = ForegroundBatch::new((0..N).map(|_| normal_vec(&mut r, D)).collect(), paths).unwrap();
        let x0 = flat_features(&batch);

        let protos = (0..t.len()).map(|_| unit_vec(&mut r, D)).collect();
        let bank = MemoryBank::from_prototypes(protos, 2, 0.1, true).unwrap();
        let agg = if config % 2 == 0 { Aggregation::Linear } else { Aggregation::Constant };
        let cfg = HiclConfig { tau: 0.2, agg };
        let (_, grads) = hicl_loss(&batch, &bank, &cfg).unwrap();
        let numeric = central_differences(&x0, H, |x| hicl_loss(&with_features(&batch, x, D), &bank, &cfg).unwrap().0);
        for (a, n) in grads.concat().iter().zip(&numeric) {
            worst_hicl = worst_hicl.max(rel_err(*a, *n));
        }

        let head: HierarchicalHead<f64> = build_head(&t, D, 6, 1000 + config);
        let table = compute_node_probabilities(&t, 1.0).unwrap();
        let draws = OthersDraws::sample(&t, &batch.paths, &table, &mut r);
        let (dx, dp) = prob_grads(&batch, &head, &t, &draws);
        let numeric = central_differences(&x0, H, |x| {
            prob_loss_with_draws(&with_features(&batch, x, D), &head, &t, &draws).unwrap().loss
        });
        for (a, n) in dx.concat().iter().zip(&numeric) {
            worst_prob = worst_prob.max(rel_err(*a, *n));
        }
        for (&node, grads) in &dp {
            let net = &head.classifier(node).unwrap().net;
            for (part, (_, analytic)) in grads.parts().iter().enumerate() {
                let point = net.parts()[part].1.to_vec();
                let numeric = central_differences(&point, H, |p| {
                    let mut h = head.clone();
                    let c = h.classifiers_mut().get_mut(&node).unwrap();
                    c.net.parts_mut()[part].1.copy_from_slice(p);
                    prob_loss_with_draws(&batch, &h, &t, &draws).unwrap().loss
                });
                for (a, n) in analytic.iter().zip(&numeric) {
                    worst_prob = worst_prob.max(rel_err(*a, *n));
                }
            }
        }
    }
    let took = start.elapsed();
    outcome(
        worst_hicl < 1e-4 && worst_prob < 1e-4 && took < Duration::from_secs(5),
        format!("max rel err hicl {worst_hicl:.2e}, prob {worst_prob:.2e} (< 1e-4); {took:.2?} (< 5 s)"),
    )
}

fn criterion_2() -> Outcome {
    let start = Instant::now();
    let expected = [0.99999, 0.9999, 0.999, 0.99, 0.9];
    let seq: Vec<f64> = (0..=4).map(|j| momentum_coefficient(j, 4, 0.1).unwrap()).collect();
    let seq_err = seq.iter().zip(expected).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);

    let mut r = rng::derive(102, &[]);
    let t = random_taxonomy(&mut r, 4, 3, 60);
    let d = 6;
    let protos = (0..t.len()).map(|_| unit_vec(&mut r, d)).collect();
    let mut bank = MemoryBank::from_prototypes(protos, 4, 0.1, true).unwrap();
    let leaves = t.leaves();
    for _ in 0..10_000 {
        let path = t.path_of(leaves[r.random_range(0..leaves.len())]).unwrap();
        let scale = 10f64.powf(r.random_range(-3.0..3.0));
        let x: Vec<f64> = normal_vec(&mut r, d).into_iter().map(|v| v * scale).collect();
        bank.ema_update(&x, &path).unwrap();
    }
    let norm_err = bank
        .prototypes()
        .iter()
        .map(|p| (p.iter().map(|a| a * a).sum::<f64>().sqrt() - 1.0).abs())
        .fold(0.0, f64::max);

    // every path prototype already equals x̄
    let mut fixed_ok = true;
    for leaf in &leaves {
        let path = t.path_of(*leaf).unwrap();
        let k = leaf.0 % d;
        let mut protos: Vec<Vec<f64>> = (0..t.len()).map(|_| unit_vec(&mut r, d)).collect();
        for n in path.nodes() {
            protos[n.0] = (0..d).map(|i| if i == k { 1.0 } else { 0.0 }).collect();
        }
        let mut bank = MemoryBank::from_prototypes(protos, 4, 0.1, true).unwrap();
        let before = bank.clone();
        let x: Vec<f64> = (0..d).map(|i| if i == k { 2.5 } else { 0.0 }).collect();
        bank.ema_update(&x, &path).unwrap();
        fixed_ok &= bank == before;
    }
    let took = start.elapsed();
    outcome(
        seq_err < 1e-12 && norm_err < 1e-12 && fixed_ok && took < Duration::from_secs(1),
        format!(
            "f(j) max err {seq_err:.1e} (< 1e-12); max |‖M‖-1| after 1e4 updates {norm_err:.1e}; fixed point exact: {fixed_ok}; {took:.2?} (< 1 s)"
        ),
    )
}

/// Straight-line enumeration of every leaf path's probability product.
fn brute_force_best(head: &HierarchicalHead<f64>, t: &Taxonomy, x: &[f64]) -> (NodeId, f64) {
    let mut best = (NodeId(usize::MAX), f64::NEG_INFINITY);
    for leaf in t.leaves() {
        let mut score = 1.0;
        let mut at = leaf;
        while let Some(parent) = t.node(at).unwrap().parent {
            let k = t.node(parent).unwrap().children.iter().position(|&c| c == at).unwrap();
            score *= head.classify_node(parent, x).unwrap()[k];
            at = parent;
        }
        if score > best.1 {
            best = (leaf, score);
        }
    }
    best
}

fn manual_greedy(head: &HierarchicalHead<f64>, t: &Taxonomy, x: &[f64]) -> NodeId {
    let mut at = t.root();
    while !t.is_leaf(at) {
        let node = t.node(at).unwrap();
        let p = head.classify_node(at, x).unwrap();
        let k = (0..node.children.len()).fold(0, |b, k| if p[k] > p[b] { k } else { b });
        at = node.children[k];
    }
    at
}

fn criterion_3() -> Outcome {
    let start = Instant::now();
    let mut r = rng::derive(103, &[]);
    let (mut beam_ok, mut greedy_ok, mut worst) = (0, 0, 0.0f64);
    for i in 0..100u64 {
        let depth = r.random_range(1..=4);
        let t = random_taxonomy(&mut r, depth, 5, 400);
        let d = 5;
        let head: HierarchicalHead<f64> = build_head(&t, d, 6, 2000 + i);
        let x = normal_vec(&mut r, d);
        let (leaf, score) = brute_force_best(&head, &t, &x);
        let wide = beam_predict(&head, &t, &x, BeamConfig { width: t.leaves().len() }).unwrap();
        let ex = exhaustive_predict(&head, &t, &x).unwrap();
        let err = ((wide.score - score) / score).abs().max(((ex.score - score) / score).abs());
        worst = worst.max(err);
        if wide.leaf == leaf && ex.leaf == leaf && err <= 1e-9 {
            beam_ok += 1;
        }
        let narrow = beam_predict(&head, &t, &x, BeamConfig { width: 1 }).unwrap();
        let greedy = greedy_predict(&head, &t, &x).unwrap();
        if narrow.leaf == manual_greedy(&head, &t, &x) && narrow == greedy {
            greedy_ok += 1;
        }
    }
    let took = start.elapsed();
    outcome(
        beam_ok == 100 && greedy_ok == 100 && took < Duration::from_secs(5),
        format!("B=leaves matches brute force {beam_ok}/100 (score rel err {worst:.1e}); B=1 matches greedy {greedy_ok}/100; {took:.2?} (< 5 s)"),
    )
}

fn criterion_4() -> Outcome {
    let start = Instant::now();
    let mut r = rng::derive(104, &[]);
    let (mut table_ok, mut root_ok, mut collapse_ok) = (0, 0, 0);
    for i in 0..50u64 {
        let depth = r.random_range(1..=4);
        let t = random_taxonomy(&mut r, depth, 4, 120);
        let beta: f64 = r.random_range(0.0..=1.0);
        let table = compute_node_probabilities(&t, beta).unwrap();
        let leaves = t.leaves();
        let total: u64 = leaves.iter().map(|l| t.node(*l).unwrap().instance_count).sum();
        let exact = t.internal_nodes().iter().all(|&n| {
            let under: u64 = leaves
                .iter()
                .filter(|l| t.path_of(**l).unwrap().contains(n))
                .map(|l| t.node(*l).unwrap().instance_count)
                .sum();
            table.get(n) == Some(under as f64 / total as f64 * beta)
        }) && table.values().len() == t.internal_nodes().len();
        table_ok += exact as usize;
        root_ok += (table.get(t.root()) == Some(beta)) as usize;

        let d = 4;
        let head: HierarchicalHead<f64> = build_head(&t, d, 5, 3000 + i);
        let n = 6;
        let batch = ForegroundBatch::new((0..n).map(|_| normal_vec(&mut r, d)).collect(), random_paths(&mut r, &t, n)).unwrap();
        let zero = compute_node_probabilities(&t, 0.0).unwrap();
        let draws = OthersDraws::sample(&t, &batch.paths, &zero, &mut r);
        let out = prob_loss_with_draws(&batch, &head, &t, &draws).unwrap();
        // hierarchical cross-entropy: on-path terms only, classifier-major
        let denom = (head.len() * n) as f64;
        let mut ce = 0.0;
        let mut ce_grads = Vec::new();
        for node in t.internal_nodes() {
            for (e, path) in batch.paths.iter().enumerate() {
                if let Some(pos) = path.nodes().iter().position(|&p| p == node) {
                    let k = t.node(node).unwrap().children.iter().position(|&c| c == path.at(pos + 1)).unwrap();
                    let (l, g) = softmax_cross_entropy(&head.logits(node, &batch.features[e]).unwrap(), k);
                    ce += l;
                    ce_grads.push(g.into_iter().map(|v| v / denom).collect::<Vec<f64>>());
                }
            }
        }
        let ce = ce / denom;
        if out.loss.to_bits() == ce.to_bits() && out.logit_grads == ce_grads && out.others_events == 0 {
            collapse_ok += 1;
        }
    }
    let took = start.elapsed();
    outcome(
        table_ok == 50 && root_ok == 50 && collapse_ok == 50 && took < Duration::from_secs(2),
        format!("table exact {table_ok}/50; root = beta {root_ok}/50; beta=0 bit-identical to hierarchical CE {collapse_ok}/50; {took:.2?} (< 2 s)"),
    )
}

struct Ladder {
    flat: usize,
    hihead: usize,
    hicl: usize,
    full: usize,
    constant: usize,
}

fn variants() -> (Vec<Variant>, Ladder) {
    let mut v = Variant::component_ladder();
    v.push(Variant::new(Ablation::FULL, Aggregation::Constant));
    let find = |v: &[Variant], want: &Variant| v.iter().position(|x| x == want).unwrap();
    let hicl = Variant::new("hihead,hicl".parse().unwrap(), Aggregation::Linear);
    let ladder = Ladder {
        flat: find(&v, &Variant::flat_frozen()),
        hihead: find(&v, &Variant::new("hihead".parse().unwrap(), Aggregation::Linear)),
        hicl: find(&v, &hicl),
        full: find(&v, &Variant::new(Ablation::FULL, Aggregation::Linear)),
        constant: find(&v, &Variant::new(Ablation::FULL, Aggregation::Constant)),
    };
    (v, ladder)
}

/// Seed-mean and per-seed check of `a − b ≥ margin` (or `> margin` when strict).
fn ordering(report: &AblationReport, a: usize, b: usize, margin: f64, strict: bool) -> (bool, String) {
    let (ra, rb) = (&report.rows[a], &report.rows[b]);
    let holds = |d: f64| if strict { d > margin } else { d >= margin };
    let seeds = ra.novel().iter().zip(rb.novel()).filter(|(x, y)| holds(*x - y)).count();
    let mean_ok = holds(ra.mean_novel - rb.mean_novel);
    let ok = mean_ok && seeds >= 4;
    let rel = if strict { ">" } else { "≥" };
    let detail = format!(
        "{} {:.1} vs {} {:.1} ({rel} +{:.0}): mean {}, seeds {seeds}/5",
        ra.variant.label,
        100.0 * ra.mean_novel,
        rb.variant.label,
        100.0 * rb.mean_novel,
        100.0 * margin,
        if mean_ok { "ok" } else { "no" },
    );
    (ok, detail)
}

fn criterion_5(report: &AblationReport, l: &Ladder, took: Duration) -> Outcome {
    let (a, da) = ordering(report, l.hicl, l.hihead, 0.03, false);
    let (b, db) = ordering(report, l.full, l.hicl, 0.0, false);
    let (c, dc) = ordering(report, l.full, l.flat, 0.0, true);
    let fast = took < Duration::from_secs(600);
    outcome(a && b && c && fast, format!("[{da}] [{db}] [{dc}]; {took:.1?} (< 10 min)"))
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    dot / (a.iter().map(|x| x * x).sum::<f64>().sqrt() * b.iter().map(|x| x * x).sum::<f64>().sqrt())
}

/// Sibling-leaf minus cross-top-level-leaf mean cosine, from the full cosine matrix.
fn cosine_gap(bank: &MemoryBank<f64>, t: &Taxonomy) -> f64 {
    let leaves = t.leaves();
    let top = |l: NodeId| t.path_of(l).unwrap().at(1);
    let parent = |l: NodeId| t.node(l).unwrap().parent;
    let (mut sib, mut ns, mut cross, mut nc) = (0.0, 0usize, 0.0, 0usize);
    for &a in &leaves {
        for &b in &leaves {
            if a >= b {
                continue;
            }
            let c = cosine(bank.prototype(a), bank.prototype(b));
            if parent(a) == parent(b) {
                sib += c;
                ns += 1;
            }
            if top(a) != top(b) {
                cross += c;
                nc += 1;
            }
        }
    }
    sib / ns as f64 - cross / nc as f64
}

fn criterion_6(report: &AblationReport, l: &Ladder, scenario: &Scenario, variants: &[Variant]) -> Outcome {
    let full: Vec<f64> = report.rows[l.full].per_seed.iter().map(|s| s.prototypes.gap).collect();
    let flat: Vec<f64> = report.rows[l.flat].per_seed.iter().map(|s| s.prototypes.gap).collect();
    let full_ok = full.iter().filter(|g| **g >= 0.1).count();
    let flat_small = flat.iter().filter(|g| **g < 0.05).count();
    let mean_full = full.iter().sum::<f64>() / full.len() as f64;

    // recompute seed 0 of the full method and check the summary against the cosine matrix
    let prepared = scenario.prepare(report.seeds[0]).unwrap();
    let (state, _) = run_variant(&prepared, &desk_config(), &variants[l.full], report.seeds[0]).unwrap();
    let oracle = cosine_gap(&state.bank, &state.taxonomy);
    let agrees = (oracle - full[0]).abs() < 1e-12;
    let fmt = |v: &[f64]| v.iter().map(|g| format!("{g:.3}")).collect::<Vec<_>>().join(" ");
    outcome(
        full_ok >= 4 && mean_full >= 0.1 && flat_small >= 4 && agrees,
        format!(
            "full gap [{}] ≥ 0.1 on {full_ok}/5; flat gap [{}] < 0.05 on {flat_small}/5; matrix oracle {oracle:.6} vs reported {:.6}",
            fmt(&full),
            fmt(&flat),
            full[0]
        ),
    )
}

fn criterion_7() -> Outcome {
    let start = Instant::now();
    let f = CorrectionFixture::build().unwrap();
    let greedy = f.greedy().unwrap();
    let beam = f.beam(3).unwrap();
    let others = f.others_probability().unwrap();
    let took = start.elapsed();
    let (leaf, _) = brute_force_best(&f.head, &f.taxonomy, &f.query);
    let pass = greedy.leaf != f.truth && beam.leaf == f.truth && leaf == f.truth && others > 0.5 && took < Duration::from_secs(1);
    outcome(
        pass,
        format!(
            "greedy leaf {} (truth {}), beam B=3 leaf {}, others probability on wrong branch {others:.3} (> 0.5); {took:.2?} (< 1 s)",
            greedy.leaf, f.truth, beam.leaf
        ),
    )
}

fn criterion_8(report: &AblationReport, l: &Ladder) -> Outcome {
    let (lin, con) = (&report.rows[l.full], &report.rows[l.constant]);
    outcome(
        lin.mean_novel >= con.mean_novel,
        format!("linear {:.2} vs constant {:.2} mean novel full-path accuracy", 100.0 * lin.mean_novel, 100.0 * con.mean_novel),
    )
}

fn main() -> ExitCode {
    let mut results: Vec<(u8, &str, Outcome)> = vec![
        (1, "gradient oracle", criterion_1()),
        (2, "EMA properties", criterion_2()),
        (3, "beam/exhaustive equivalence", criterion_3()),
        (4, "probability table", criterion_4()),
    ];

    let scenario = Scenario::default();
    let (variants, ladder) = variants();
    let start = Instant::now();
    let report = ablation_run(&scenario, &desk_config(), &variants, &[0, 1, 2, 3, 4]).unwrap();
    let took = start.elapsed();
    println!("{}", report.to_table());
    results.push((5, "component ablation ordering", criterion_5(&report, &ladder, took)));
    results.push((6, "hierarchy-consistent prototypes", criterion_6(&report, &ladder, &scenario, &variants)));
    results.push((7, "beam correction fixture", criterion_7()));
    results.push((8, "linear vs constant aggregation", criterion_8(&report, &ladder)));

    let mut failed = 0;
    for (k, name, o) in &results {
        println!("criterion {k} {name}: {} ({})", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        failed += (!o.pass) as usize;
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} criterion(s) failed");
        ExitCode::FAILURE
    }
}
