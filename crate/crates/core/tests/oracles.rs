//! Library routines checked against slow, independent reference
//! implementations.

use std::collections::{BTreeMap, BTreeSet};

use panicle_core::eval::{hungarian_match, PixelSet};
use panicle_core::instseg::{
    connected_components_segmentation, segment_instances_traced, total_fitness, ClusterAssignment, FitnessParams,
    PanicleSuperpixels,
};
use panicle_core::isotonic::pava;
use panicle_core::slic::SuperpixelMap;
use panicle_core::RasterGrid;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Best least-squares fit among piecewise-constant sequences with
/// non-decreasing block means, over every split into consecutive blocks.
fn monotone_projection(x: &[f64]) -> Vec<f64> {
    let n = x.len();
    let mut best: Option<(f64, Vec<f64>)> = None;
    for cuts in 0u32..(1 << (n - 1)) {
        let mut fit = Vec::with_capacity(n);
        let mut start = 0;
        let mut prev = f64::NEG_INFINITY;
        let mut feasible = true;
        for end in 1..=n {
            if end == n || cuts & (1 << (end - 1)) != 0 {
                let mean = x[start..end].iter().sum::<f64>() / (end - start) as f64;
                if mean < prev - 1e-12 {
                    feasible = false;
                    break;
                }
                prev = mean;
                fit.extend(std::iter::repeat(mean).take(end - start));
                start = end;
            }
        }
        if !feasible {
            continue;
        }
        let sse: f64 = fit.iter().zip(x).map(|(a, b)| (a - b) * (a - b)).sum();
        if best.as_ref().map_or(true, |(s, _)| sse < *s) {
            best = Some((sse, fit));
        }
    }
    best.expect("the single-block split is always feasible").1
}

#[test]
fn pava_matches_block_partition_search() {
    let grid = [-2.0, -0.5, 0.0, 1.5, 3.0];
    for len in 1..=5u32 {
        for code in 0..5usize.pow(len) {
            let x: Vec<f64> = (0..len).map(|k| grid[code / 5usize.pow(k) % 5]).collect();
            let fast = pava(&x).unwrap();
            let slow = monotone_projection(&x);
            assert!(fast.iter().zip(&slow).all(|(a, b)| (a - b).abs() < 1e-9), "{x:?}: {fast:?} vs {slow:?}");
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..300 {
        let len = rng.gen_range(1..=8);
        let x: Vec<f64> = (0..len).map(|_| rng.gen_range(-10.0..10.0)).collect();
        let fast = pava(&x).unwrap();
        let slow = monotone_projection(&x);
        assert!(fast.iter().zip(&slow).all(|(a, b)| (a - b).abs() < 1e-9));
    }
}

/// Random blobby instances on a `side × side` grid.
fn random_instances(rng: &mut ChaCha8Rng, count: usize, side: usize) -> Vec<(u32, PixelSet)> {
    (0..count)
        .map(|k| {
            let (ci, cj) = (rng.gen_range(0..side), rng.gen_range(0..side));
            let r = rng.gen_range(1..4usize);
            let px: Vec<usize> = (ci.saturating_sub(r)..(ci + r + 1).min(side))
                .flat_map(|i| (cj.saturating_sub(r)..(cj + r + 1).min(side)).map(move |j| i * side + j))
                .collect();
            (k as u32, PixelSet::new(px))
        })
        .collect()
}

/// Exact rational `p/q` with `q > 0`.
#[derive(Clone, Copy, Debug)]
struct Ratio(i128, i128);

impl Ratio {
    fn add(self, o: Ratio) -> Ratio {
        let (p, q) = (self.0 * o.1 + o.0 * self.1, self.1 * o.1);
        let g = gcd(p.abs(), q);
        Ratio(p / g, q / g)
    }
    fn cmp(self, o: Ratio) -> std::cmp::Ordering {
        (self.0 * o.1).cmp(&(o.0 * self.1))
    }
}

fn gcd(a: i128, b: i128) -> i128 {
    if b == 0 { a.max(1) } else { gcd(b, a % b) }
}

fn iou_ratio(a: &PixelSet, b: &PixelSet) -> Ratio {
    let inter = a.intersection_len(b) as i128;
    let union = (a.len() + b.len()) as i128 - inter;
    let g = gcd(inter, union);
    Ratio(inter / g, union / g)
}

/// Largest total IoU over all one-to-one partial matchings.
fn best_total_iou(preds: &[(u32, PixelSet)], truths: &[(u32, PixelSet)]) -> Ratio {
    fn go(i: usize, used: &mut Vec<bool>, preds: &[(u32, PixelSet)], truths: &[(u32, PixelSet)]) -> Ratio {
        if i == preds.len() {
            return Ratio(0, 1);
        }
        let mut best = go(i + 1, used, preds, truths);
        for j in 0..truths.len() {
            if !used[j] {
                used[j] = true;
                let cand = iou_ratio(&preds[i].1, &truths[j].1).add(go(i + 1, used, preds, truths));
                used[j] = false;
                if cand.cmp(best).is_gt() {
                    best = cand;
                }
            }
        }
        best
    }
    go(0, &mut vec![false; truths.len()], preds, truths)
}

fn greedy_total_iou(preds: &[(u32, PixelSet)], truths: &[(u32, PixelSet)]) -> f64 {
    let mut pairs: Vec<(f64, usize, usize)> = Vec::new();
    for (i, p) in preds.iter().enumerate() {
        for (j, t) in truths.iter().enumerate() {
            let inter = p.1.intersection_len(&t.1) as f64;
            pairs.push((inter / (p.1.len() as f64 + t.1.len() as f64 - inter), i, j));
        }
    }
    pairs.sort_by(|a, b| b.0.total_cmp(&a.0));
    let (mut pu, mut tu) = (vec![false; preds.len()], vec![false; truths.len()]);
    let mut total = 0.0;
    for (v, i, j) in pairs {
        if !pu[i] && !tu[j] {
            pu[i] = true;
            tu[j] = true;
            total += v;
        }
    }
    total
}

#[test]
fn hungarian_matches_exhaustive_search() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..120 {
        let (np, nt) = (rng.gen_range(0..=7), rng.gen_range(0..=7));
        let preds = random_instances(&mut rng, np, 14);
        let truths = random_instances(&mut rng, nt, 14);
        let m = hungarian_match(&preds, &truths).unwrap();
        let got = m.matches.iter().fold(Ratio(0, 1), |acc, x| {
            let p = &preds.iter().find(|p| p.0 == x.pred).unwrap().1;
            let t = &truths.iter().find(|t| t.0 == x.truth).unwrap().1;
            acc.add(iou_ratio(p, t))
        });
        let best = best_total_iou(&preds, &truths);
        assert!(got.cmp(best).is_eq(), "hungarian {got:?} vs exhaustive {best:?}");
        assert!(m.total_iou() + 1e-12 >= greedy_total_iou(&preds, &truths));

        let preds_seen: BTreeSet<u32> = m.matches.iter().map(|x| x.pred).chain(m.unmatched_preds.iter().copied()).collect();
        let truths_seen: BTreeSet<u32> =
            m.matches.iter().map(|x| x.truth).chain(m.unmatched_truths.iter().copied()).collect();
        assert_eq!(preds_seen.len(), preds.len());
        assert_eq!(truths_seen.len(), truths.len());
        assert!(m.matches.iter().all(|x| x.iou > 0.0));
    }
}

/// Label map made of random axis-aligned rectangles painted over each other;
/// every 4-connected piece becomes its own superpixel, numbered in raster order.
fn random_label_map(rng: &mut ChaCha8Rng, h: usize, w: usize) -> SuperpixelMap {
    let mut raw = vec![0u32; h * w];
    for k in 1..rng.gen_range(2..12u32) {
        let (i0, j0) = (rng.gen_range(0..h), rng.gen_range(0..w));
        let (i1, j1) = (rng.gen_range(i0..h) + 1, rng.gen_range(j0..w) + 1);
        for i in i0..i1 {
            for j in j0..j1 {
                raw[i * w + j] = k;
            }
        }
    }
    let mut labels = vec![u32::MAX; h * w];
    let mut next = 0;
    for s in 0..h * w {
        if labels[s] != u32::MAX {
            continue;
        }
        labels[s] = next;
        let mut stack = vec![s];
        while let Some(p) = stack.pop() {
            let (i, j) = (p / w, p % w);
            let mut nb = Vec::new();
            if i > 0 { nb.push(p - w); }
            if i + 1 < h { nb.push(p + w); }
            if j > 0 { nb.push(p - 1); }
            if j + 1 < w { nb.push(p + 1); }
            for q in nb {
                if labels[q] == u32::MAX && raw[q] == raw[p] {
                    labels[q] = next;
                    stack.push(q);
                }
            }
        }
        next += 1;
    }
    let map = SuperpixelMap::from_labels(h, w, labels, None).unwrap();
    assert!(map.is_connected());
    map
}

#[test]
fn adjacency_matches_pixel_pair_scan() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..50 {
        let (h, w) = (rng.gen_range(1..15), rng.gen_range(1..15));
        let map = random_label_map(&mut rng, h, w);
        let mut expect = BTreeSet::new();
        for p in 0..h * w {
            for q in 0..h * w {
                let (pi, pj, qi, qj) = (p / w, p % w, q / w, q % w);
                if pi.abs_diff(qi) + pj.abs_diff(qj) == 1 {
                    let (a, b) = (map.labels()[p], map.labels()[q]);
                    if a < b {
                        expect.insert((a, b));
                    }
                }
            }
        }
        assert_eq!(map.adjacency(), expect);
    }
}

#[test]
fn connected_components_match_flood_fill() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..40 {
        let map = random_label_map(&mut rng, 12, 12);
        let ids: Vec<u32> = (0..map.len() as u32).filter(|_| rng.gen_bool(0.6)).collect();
        let p = PanicleSuperpixels { ids: ids.clone(), probabilities: vec![1.0; ids.len()], alpha: 0.5 };
        let got = connected_components_segmentation(&p, &map);

        // pixel-level flood fill restricted to detected superpixels
        let chosen: BTreeSet<u32> = ids.iter().copied().collect();
        let w = map.width();
        let mut comp = vec![usize::MAX; map.labels().len()];
        let mut n_comp = 0;
        for s in 0..comp.len() {
            if comp[s] != usize::MAX || !chosen.contains(&map.labels()[s]) {
                continue;
            }
            let mut stack = vec![s];
            comp[s] = n_comp;
            while let Some(p) = stack.pop() {
                let (i, j) = ((p / w) as isize, (p % w) as isize);
                for (di, dj) in [(-1, 0), (1, 0), (0, -1), (0, 1)] {
                    let (a, b) = (i + di, j + dj);
                    if a < 0 || b < 0 || a >= map.height() as isize || b >= w as isize {
                        continue;
                    }
                    let q = a as usize * w + b as usize;
                    if comp[q] == usize::MAX && chosen.contains(&map.labels()[q]) {
                        comp[q] = n_comp;
                        stack.push(q);
                    }
                }
            }
            n_comp += 1;
        }
        assert_eq!(got.n_clusters(), n_comp);
        for (p, &c) in comp.iter().enumerate() {
            if c != usize::MAX {
                let cluster = got.assignment[&map.labels()[p]];
                let rep = comp.iter().position(|&x| x == c).unwrap();
                assert_eq!(cluster, got.assignment[&map.labels()[rep]]);
            }
        }
    }
}

/// Whether `block` induces a connected subgraph of `adj`.
fn connected(block: &[u32], adj: &BTreeSet<(u32, u32)>) -> bool {
    let mut seen = BTreeSet::from([block[0]]);
    let mut stack = vec![block[0]];
    while let Some(a) = stack.pop() {
        for &b in block {
            if !seen.contains(&b) && adj.contains(&(a.min(b), a.max(b))) {
                seen.insert(b);
                stack.push(b);
            }
        }
    }
    seen.len() == block.len()
}

/// All set partitions of `items` whose blocks are connected under `adj`.
fn connected_partitions(items: &[u32], adj: &BTreeSet<(u32, u32)>) -> Vec<Vec<Vec<u32>>> {
    fn go(i: usize, items: &[u32], blocks: &mut Vec<Vec<u32>>, out: &mut Vec<Vec<Vec<u32>>>) {
        if i == items.len() {
            out.push(blocks.clone());
            return;
        }
        for b in 0..blocks.len() {
            blocks[b].push(items[i]);
            go(i + 1, items, blocks, out);
            blocks[b].pop();
        }
        blocks.push(vec![items[i]]);
        go(i + 1, items, blocks, out);
        blocks.pop();
    }
    let mut all = Vec::new();
    go(0, items, &mut Vec::new(), &mut all);
    all.into_iter().filter(|p| p.iter().all(|b| connected(b, adj))).collect()
}

fn assignment_of(partition: &[Vec<u32>]) -> ClusterAssignment {
    let mut a = BTreeMap::new();
    for block in partition {
        let id = *block.iter().min().unwrap();
        for &s in block {
            a.insert(s, id);
        }
    }
    ClusterAssignment { assignment: a }
}

/// Two-row strip of square superpixels with one bright blob per group of
/// cells; the region density puts unit mass on each blob.
fn strip_scene(cells: usize, blobs: &[std::ops::Range<usize>], jitter: u64) -> (RasterGrid, SuperpixelMap, RasterGrid) {
    let s = 4;
    let (h, w) = (2 * s, cells.div_ceil(2) * s);
    let labels: Vec<u32> = (0..h * w).map(|p| ((p / w / s) + 2 * (p % w / s)) as u32).collect();
    let map = SuperpixelMap::from_labels(h, w, labels, None).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(jitter);
    let owner = |sp: u32| blobs.iter().position(|r| r.contains(&(sp as usize)));
    let image = RasterGrid::from_fn(h, w, 3, |i, j, c| {
        let sp = map.label(i, j);
        match owner(sp) {
            Some(b) => [0.9, 0.6, 0.3][c] * (1.0 - 0.2 * b as f64),
            None => 0.1,
        }
    })
    .map(|v| (v + rng.gen_range(-0.02..0.02)).clamp(0.0, 1.0));
    let mut region = RasterGrid::zeros(h, w, 1);
    for r in blobs {
        let px: Vec<usize> = (0..h * w).filter(|&p| r.contains(&(map.labels()[p] as usize))).collect();
        for &p in &px {
            region.data_mut()[p] += 1.0 / px.len() as f64;
        }
    }
    (image, map, region)
}

#[test]
fn greedy_segmentation_against_exhaustive_partitions() {
    let params = FitnessParams::default();
    let scenes: Vec<(usize, Vec<std::ops::Range<usize>>)> =
        vec![(4, vec![0..4]), (8, vec![0..4, 4..8]), (8, vec![0..2, 2..8]), (6, vec![0..3, 3..6]), (8, vec![0..8])];
    let mut gaps = Vec::new();
    for (k, (cells, blobs)) in scenes.iter().enumerate() {
        let (image, map, region) = strip_scene(*cells, blobs, k as u64);
        let ids: Vec<u32> = (0..map.len() as u32).collect();
        let p = PanicleSuperpixels { ids: ids.clone(), probabilities: vec![1.0; ids.len()], alpha: 0.5 };
        let (greedy, merges) = segment_instances_traced(&p, &image, &map, &region, &params).unwrap();
        let greedy_f = total_fitness(&greedy, &image, &map, &region, &params).unwrap();

        let adj = map.adjacency();
        let mut best = f64::INFINITY;
        for part in connected_partitions(&ids, &adj) {
            let f = total_fitness(&assignment_of(&part), &image, &map, &region, &params).unwrap();
            best = best.min(f);
        }
        assert!(greedy_f >= best - 1e-6 * best.abs().max(1.0));
        assert!(merges.iter().all(|m| m.delta < 0.0));
        assert!(greedy.clusters().values().all(|b| connected(b, &adj)));
        gaps.push((greedy_f - best) / best.abs().max(1.0));
        if blobs.len() == 1 && *cells == 4 {
            assert_eq!(greedy.n_clusters(), 1);
            assert!((greedy_f - best).abs() <= 1e-9 * best.abs().max(1.0));
        }
    }
    eprintln!("greedy relative gap over exhaustive optimum: {gaps:?}");
}
