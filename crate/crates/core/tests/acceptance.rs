//! Acceptance criteria A1 to A9. Each test prints one `PASS`/`FAIL` line
//! before asserting.

use std::collections::{BTreeMap, VecDeque};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tbps_core::assignment::{solve_assignment, CostMatrix};
use tbps_core::geometry::{box_loss, giou, iou};
use tbps_core::harness::{compute_rows, run_experiment, summarize, ExperimentConfig, SummaryRow};
use tbps_core::metrics::{davies_bouldin, evaluate, GroundTruth, QueryResult, RankedEntry};
use tbps_core::numgrad::{gradcheck, train_toy, TrainConfig, GRADCHECK_TOLERANCE};
use tbps_core::pud::PrototypeBank;
use tbps_core::reid::{cq_push, lut_update, CircularQueue, LookupTable};
use tbps_core::synth::{generate_world, GenConfig};
use tbps_core::{BBox, Embedding};

fn report(name: &str, ok: bool, detail: String) {
    println!("{} {name}: {detail}", if ok { "PASS" } else { "FAIL" });
}

fn jobs() -> usize {
    std::thread::available_parallelism().map_or(1, |n| n.get())
}

// A1

fn permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![Vec::new()];
    }
    let mut out = Vec::new();
    for p in permutations(n - 1) {
        for pos in 0..=p.len() {
            let mut q = p.clone();
            q.insert(pos, n - 1);
            out.push(q);
        }
    }
    out
}

fn row_order_total(rows: &[Vec<f64>], cols_of_rows: &[usize]) -> f64 {
    cols_of_rows
        .iter()
        .enumerate()
        .map(|(r, &c)| rows[r][c])
        .sum()
}

#[test]
fn a1_assignment_matches_exhaustive_search() {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let perms: Vec<Vec<Vec<usize>>> = (0..=7).map(permutations).collect();
    let mut mismatches = 0;
    for trial in 0..1000 {
        let n = rng.random_range(1..=7);
        // Even trials use small integers so that many optima tie.
        let rows: Vec<Vec<f64>> = (0..n)
            .map(|_| {
                (0..n)
                    .map(|_| {
                        if trial % 2 == 0 {
                            rng.random_range(0..5) as f64
                        } else {
                            rng.random_range(0.0..10.0)
                        }
                    })
                    .collect()
            })
            .collect();
        let best = perms[n]
            .iter()
            .map(|p| row_order_total(&rows, p))
            .fold(f64::INFINITY, f64::min);
        let m = solve_assignment(&CostMatrix::from_rows(&rows).unwrap());
        let cols: Vec<usize> = (0..n)
            .map(|r| m.col_of(r).expect("square matrices match every row"))
            .collect();
        if row_order_total(&rows, &cols) != best {
            mismatches += 1;
        }
    }
    let elapsed = started.elapsed();
    let ok = mismatches == 0 && elapsed < Duration::from_secs(10);
    report(
        "A1 assignment oracle",
        ok,
        format!("1000 matrices n<=7, {mismatches} mismatches, {elapsed:.2?} (limit 10s)"),
    );
    assert!(ok);
}

// A2

fn random_box(rng: &mut ChaCha8Rng, min_side: f64) -> BBox {
    let w = rng.random_range(min_side..1.0);
    let h = rng.random_range(min_side..1.0);
    let x = rng.random_range(0.0..=1.0 - w);
    let y = rng.random_range(0.0..=1.0 - h);
    BBox::new(x, y, x + w, y + h).unwrap()
}

/// Cell centres of a `1/cells` grid inside `[lo, hi)` on each axis, as
/// membership flags.
fn axis_cells(lo: f64, hi: f64, cells: usize) -> Vec<bool> {
    (0..cells)
        .map(|i| {
            let c = (i as f64 + 0.5) / cells as f64;
            lo <= c && c < hi
        })
        .collect()
}

/// IoU by counting grid cells; the box indicator separates into x and y.
fn grid_iou(a: &BBox, b: &BBox, cells: usize) -> f64 {
    let [ax1, ay1, ax2, ay2] = a.as_array();
    let [bx1, by1, bx2, by2] = b.as_array();
    let (axs, ays) = (axis_cells(ax1, ax2, cells), axis_cells(ay1, ay2, cells));
    let (bxs, bys) = (axis_cells(bx1, bx2, cells), axis_cells(by1, by2, cells));
    let count = |v: &[bool]| v.iter().filter(|x| **x).count() as f64;
    let both = |u: &[bool], v: &[bool]| u.iter().zip(v).filter(|(p, q)| **p && **q).count() as f64;
    let inter = both(&axs, &bxs) * both(&ays, &bys);
    let union = count(&axs) * count(&ays) + count(&bxs) * count(&bys) - inter;
    inter / union
}

#[test]
fn a2_geometry_properties_and_grid_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let mut violations = 0;
    for _ in 0..10_000 {
        let a = random_box(&mut rng, 1e-3);
        let b = if rng.random_bool(0.05) {
            a
        } else {
            random_box(&mut rng, 1e-3)
        };
        let (o, g, l) = (
            iou(&a, &b).unwrap(),
            giou(&a, &b).unwrap(),
            box_loss(&a, &b).unwrap(),
        );
        let identical = a == b;
        let fine = (0.0..=1.0).contains(&o)
            && g > -1.0
            && g <= o
            && o <= 1.0
            && l >= 0.0
            && ((l == 0.0) == identical)
            && iou(&b, &a).unwrap() == o
            && giou(&b, &a).unwrap() == g;
        violations += usize::from(!fine);
    }
    // Sides of at least 0.1 keep each box many cells wide at 1e-4.
    let cells = 10_000;
    let mut max_err: f64 = 0.0;
    for _ in 0..300 {
        let a = random_box(&mut rng, 0.1);
        let b = if rng.random_bool(0.5) {
            let [x1, y1, x2, y2] = a.as_array();
            let dx = rng.random_range(-0.1..0.1);
            let dy = rng.random_range(-0.1..0.1);
            BBox::new(
                (x1 + dx).max(0.0),
                (y1 + dy).max(0.0),
                (x2 + dx).min(1.0),
                (y2 + dy).min(1.0),
            )
            .unwrap()
        } else {
            random_box(&mut rng, 0.1)
        };
        max_err = max_err.max((iou(&a, &b).unwrap() - grid_iou(&a, &b, cells)).abs());
    }
    let ok = violations == 0 && max_err <= 2e-3;
    report(
        "A2 geometry",
        ok,
        format!("10000 pairs, {violations} violations; grid oracle max |dIoU| = {max_err:.2e} (tol 2e-3)"),
    );
    assert!(ok);
}

// A3

#[test]
fn a3_gradient_checks() {
    let started = Instant::now();
    let reports = gradcheck(100, 303).unwrap();
    let elapsed = started.elapsed();
    let mut ok = elapsed < Duration::from_secs(30);
    let mut parts = Vec::new();
    for r in &reports {
        ok &= r.points == 100 && r.max_rel_err < GRADCHECK_TOLERANCE;
        parts.push(format!(
            "{} {:.1e} ({} ties skipped)",
            r.loss, r.max_rel_err, r.skipped
        ));
    }
    report(
        "A3 gradient checks",
        ok,
        format!(
            "100 points each, tol 1e-4, {elapsed:.2?} (limit 30s): {}",
            parts.join(", ")
        ),
    );
    assert!(ok);
}

// A4

fn naive_iou(a: &BBox, b: &BBox) -> f64 {
    let [ax1, ay1, ax2, ay2] = a.as_array();
    let [bx1, by1, bx2, by2] = b.as_array();
    let iw = (ax2.min(bx2) - ax1.max(bx1)).max(0.0);
    let ih = (ay2.min(by2) - ay1.max(by1)).max(0.0);
    let inter = iw * ih;
    inter / ((ax2 - ax1) * (ay2 - ay1) + (bx2 - bx1) * (by2 - by1) - inter)
}

/// Ranked list by insertion sort: higher score first, lower gallery id on
/// equal scores, input order otherwise.
fn naive_sorted(entries: &[RankedEntry]) -> Vec<RankedEntry> {
    let mut out: Vec<RankedEntry> = Vec::new();
    for e in entries {
        let pos = out
            .iter()
            .position(|o| e.score > o.score || (e.score == o.score && e.gallery_id < o.gallery_id))
            .unwrap_or(out.len());
        out.insert(pos, *e);
    }
    out
}

/// (AP, first correct rank) with each ground truth credited at most once to
/// the best-overlapping uncredited box.
fn naive_query(entries: &[RankedEntry], gts: &[GroundTruth]) -> (f64, Option<usize>) {
    let ranked = naive_sorted(entries);
    let mut credited = vec![false; gts.len()];
    let mut hits = 0.0;
    let mut ap = 0.0;
    let mut first = None;
    for (k, e) in ranked.iter().enumerate() {
        let overlaps: Vec<(usize, f64)> = gts
            .iter()
            .enumerate()
            .filter(|(_, g)| g.gallery_id == e.gallery_id)
            .map(|(i, g)| (i, naive_iou(&e.bbox, &g.bbox)))
            .filter(|(_, o)| *o >= 0.5)
            .collect();
        if first.is_none() && !overlaps.is_empty() {
            first = Some(k + 1);
        }
        let mut best: Option<(usize, f64)> = None;
        for (i, o) in overlaps {
            if !credited[i] && best.is_none_or(|(_, b)| o > b) {
                best = Some((i, o));
            }
        }
        if let Some((i, _)) = best {
            credited[i] = true;
            hits += 1.0;
            ap += hits / (k + 1) as f64;
        }
    }
    (ap / gts.len() as f64, first)
}

fn random_result(rng: &mut ChaCha8Rng, query_id: u64) -> (Vec<RankedEntry>, Vec<GroundTruth>) {
    let galleries = rng.random_range(1..6u64);
    let mut gts = Vec::new();
    while gts.is_empty() {
        for g in 0..galleries {
            for _ in 0..rng.random_range(0..3) {
                gts.push(GroundTruth {
                    gallery_id: g,
                    bbox: random_box(rng, 0.05),
                });
            }
        }
    }
    let mut entries = Vec::new();
    for _ in 0..rng.random_range(0..25) {
        let gallery_id = rng.random_range(0..galleries);
        let on_target: Vec<&GroundTruth> =
            gts.iter().filter(|g| g.gallery_id == gallery_id).collect();
        let bbox = if !on_target.is_empty() && rng.random_bool(0.6) {
            let [x1, y1, x2, y2] = on_target[rng.random_range(0..on_target.len())]
                .bbox
                .as_array();
            let j = rng.random_range(0.0..0.1);
            BBox::new((x1 + j).min(x2 - 1e-3), y1, x2, (y2 - j).max(y1 + 1e-3)).unwrap()
        } else {
            random_box(rng, 0.05)
        };
        // A coarse score set produces ties.
        let score = rng.random_range(0..8) as f64 / 7.0;
        entries.push(RankedEntry {
            gallery_id,
            bbox,
            score,
        });
    }
    let _ = query_id;
    (entries, gts)
}

/// Davies-Bouldin straight from its definition, clusters keyed by label.
fn naive_db(points: &[Vec<f64>], labels: &[u64]) -> f64 {
    let dist = |a: &[f64], b: &[f64]| {
        a.iter()
            .zip(b)
            .map(|(x, y)| (x - y).powi(2))
            .sum::<f64>()
            .sqrt()
    };
    let mut groups: BTreeMap<u64, Vec<&Vec<f64>>> = BTreeMap::new();
    for (p, l) in points.iter().zip(labels) {
        groups.entry(*l).or_default().push(p);
    }
    let dim = points[0].len();
    let cents: Vec<Vec<f64>> = groups
        .values()
        .map(|m| {
            (0..dim)
                .map(|d| m.iter().map(|p| p[d]).sum::<f64>() / m.len() as f64)
                .collect()
        })
        .collect();
    let scat: Vec<f64> = groups
        .values()
        .zip(&cents)
        .map(|(m, c)| m.iter().map(|p| dist(p, c)).sum::<f64>() / m.len() as f64)
        .collect();
    let k = cents.len();
    (0..k)
        .map(|i| {
            (0..k)
                .filter(|&j| j != i)
                .map(|j| (scat[i] + scat[j]) / dist(&cents[i], &cents[j]))
                .fold(f64::NEG_INFINITY, f64::max)
        })
        .sum::<f64>()
        / k as f64
}

#[test]
fn a4_metrics_match_naive_references() {
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let mut max_err: f64 = 0.0;
    let mut results = Vec::new();
    let mut naive = Vec::new();
    for q in 0..1000u64 {
        let (entries, gts) = random_result(&mut rng, q);
        naive.push(naive_query(&entries, &gts));
        results.push(QueryResult::new(q, entries, gts).unwrap());
    }
    // Score the sets in batches of ten queries.
    for (chunk, expect) in results.chunks(10).zip(naive.chunks(10)) {
        let s = evaluate(chunk, 0.5).unwrap();
        let n = expect.len() as f64;
        let map = expect.iter().map(|e| e.0).sum::<f64>() / n;
        let cmc = |k: usize| {
            expect
                .iter()
                .filter(|e| e.1.is_some_and(|r| r <= k))
                .count() as f64
                / n
        };
        for (got, want) in [
            (s.map, map),
            (s.top1, cmc(1)),
            (s.top5, cmc(5)),
            (s.top10, cmc(10)),
        ] {
            max_err = max_err.max((got - want).abs());
        }
    }
    let mut db_err: f64 = 0.0;
    for _ in 0..100 {
        let dim = rng.random_range(1..8);
        let k = rng.random_range(2..6u64);
        let n = rng.random_range(k as usize..40);
        let labels: Vec<u64> = (0..n)
            .map(|i| {
                if (i as u64) < k {
                    i as u64
                } else {
                    rng.random_range(0..k)
                }
            })
            .collect();
        let points: Vec<Vec<f64>> = labels
            .iter()
            .map(|&l| {
                (0..dim)
                    .map(|_| l as f64 + rng.random_range(-1.0..1.0))
                    .collect()
            })
            .collect();
        let emb: Vec<Embedding> = points.iter().map(|p| Embedding::new(p.clone())).collect();
        let got = davies_bouldin(&emb, &labels).unwrap();
        db_err = db_err.max((got - naive_db(&points, &labels)).abs());
    }
    let ok = max_err <= 1e-12 && db_err <= 1e-9;
    report(
        "A4 metrics oracle",
        ok,
        format!("1000 result sets max |d| = {max_err:.1e} (tol 1e-12); 100 point sets DB max |d| = {db_err:.1e} (tol 1e-9)"),
    );
    assert!(ok);
}

// A5, A6

fn means_by<K: Ord + Copy>(
    summary: &[SummaryRow],
    key: impl Fn(&SummaryRow) -> K,
) -> Vec<(K, f64)> {
    let mut m: BTreeMap<K, (f64, usize)> = BTreeMap::new();
    for s in summary {
        let e = m.entry(key(s)).or_insert((0.0, 0));
        e.0 += s.map;
        e.1 += 1;
    }
    m.into_iter()
        .map(|(k, (sum, n))| (k, sum / n as f64))
        .collect()
}

#[test]
fn a5_beta_sweep_peaks_inside() {
    let started = Instant::now();
    let cfg = ExperimentConfig::beta_sweep();
    assert_eq!(cfg.seeds.len(), 5);
    assert_eq!((cfg.gen.num_identities, cfg.gen.num_scenes), (50, 200));
    let rows = compute_rows(&cfg, jobs()).unwrap();
    let summary = summarize(&rows);
    let means: Vec<(f64, f64)> = cfg
        .beta_grid
        .iter()
        .map(|&b| (b, summary.iter().find(|s| s.beta == b).unwrap().map))
        .collect();
    let (best_beta, best) =
        means.iter().copied().fold(
            (f64::NAN, f64::NEG_INFINITY),
            |a, m| if m.1 > a.1 { m } else { a },
        );
    let ends = [means[0].1, means[means.len() - 1].1];
    let elapsed = started.elapsed();
    let ok = [0.3, 0.5, 0.8].contains(&best_beta)
        && ends.iter().all(|e| best - e >= 0.02)
        && elapsed < Duration::from_secs(60);
    let table: Vec<String> = means
        .iter()
        .map(|(b, m)| format!("{b:.1}:{m:.4}"))
        .collect();
    report(
        "A5 beta sweep",
        ok,
        format!("mAP {} ; max at {best_beta}, endpoint gaps {:.4}/{:.4} (need >= 0.02), {elapsed:.2?} (limit 60s)",
            table.join(" "), best - ends[0], best - ends[1]),
    );
    assert!(ok);
}

/// Ranks with ties averaged, 1-based.
fn ranks(xs: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..xs.len()).collect();
    idx.sort_by(|&a, &b| xs[a].partial_cmp(&xs[b]).unwrap());
    let mut r = vec![0.0; xs.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && xs[idx[j + 1]] == xs[idx[i]] {
            j += 1;
        }
        for &k in &idx[i..=j] {
            r[k] = (i + j) as f64 / 2.0 + 1.0;
        }
        i = j + 1;
    }
    r
}

fn spearman(x: &[f64], y: &[f64]) -> f64 {
    let (rx, ry) = (ranks(x), ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
    cov / (vx * vy).sqrt()
}

#[test]
fn a6_gallery_size_trend_is_negative() {
    let started = Instant::now();
    let cfg = ExperimentConfig::gallery_sweep();
    assert_eq!(cfg.seeds.len(), 5);
    let rows = compute_rows(&cfg, jobs()).unwrap();
    let means = means_by(&summarize(&rows), |s| s.gallery_size);
    let sizes: Vec<f64> = means.iter().map(|m| m.0 as f64).collect();
    let maps: Vec<f64> = means.iter().map(|m| m.1).collect();
    let rho = spearman(&sizes, &maps);
    let elapsed = started.elapsed();
    let ok = rho < 0.0 && elapsed < Duration::from_secs(120);
    let table: Vec<String> = means.iter().map(|(g, m)| format!("{g}:{m:.4}")).collect();
    report(
        "A6 gallery trend",
        ok,
        format!(
            "mAP {} ; Spearman {rho:.3} (need < 0), {elapsed:.2?} (limit 120s)",
            table.join(" ")
        ),
    );
    assert!(ok);
}

// A7

#[test]
fn a7_training_tightens_clusters() {
    let started = Instant::now();
    let world = generate_world(&GenConfig {
        dim: 64,
        ..GenConfig::default()
    })
    .unwrap();
    let run = train_toy(&world, &TrainConfig::default(), 500).unwrap();
    let elapsed = started.elapsed();
    let (first, last) = (run.records.first().unwrap(), run.records.last().unwrap());
    assert_eq!((first.step, last.step), (0, 500));
    let drop = |a: f64, b: f64| (a - b) / a;
    let (di, dt) = (
        drop(first.db_image, last.db_image),
        drop(first.db_text, last.db_text),
    );
    let windows: Vec<f64> = run
        .state
        .loss_history
        .chunks(50)
        .map(|c| c.iter().sum::<f64>() / c.len() as f64)
        .collect();
    let monotone = windows.len() == 10 && windows.windows(2).all(|w| w[1] < w[0]);
    let ok = di >= 0.05 && dt >= 0.05 && monotone && elapsed < Duration::from_secs(120);
    let w: Vec<String> = windows.iter().map(|v| format!("{v:.4}")).collect();
    report(
        "A7 clustering",
        ok,
        format!(
            "DB image {:.4}->{:.4} ({:.1}%), text {:.4}->{:.4} ({:.1}%) (need >= 5%); 50-step means [{}]; {elapsed:.2?} (limit 120s)",
            first.db_image, last.db_image, 100.0 * di, first.db_text, last.db_text, 100.0 * dt, w.join(", ")
        ),
    );
    assert!(ok);
}

// A8

fn random_unit(rng: &mut ChaCha8Rng, dim: usize) -> Embedding {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        if let Ok(u) = Embedding::new(v).normalized() {
            return u;
        }
    }
}

fn unit_exact(v: &Embedding) -> bool {
    (v.iter().map(|x| x * x).sum::<f64>().sqrt() - 1.0).abs() <= 1e-12
}

fn brute_argmin(bank: &PrototypeBank, f: &[f64]) -> usize {
    let mut best = (0, f64::INFINITY);
    for (i, p) in bank.prototypes().iter().enumerate() {
        let d: f64 = p.iter().zip(f).map(|(a, b)| (a - b) * (a - b)).sum();
        if d < best.1 {
            best = (i, d);
        }
    }
    best.0
}

#[test]
fn a8_state_machines() {
    let mut rng = ChaCha8Rng::seed_from_u64(808);
    let (mut lut_bad, mut cq_bad, mut bank_bad, mut assign_bad) = (0, 0, 0, 0);
    for _ in 0..10_000 {
        let dim = rng.random_range(2..8);
        let ops = rng.random_range(1..30);

        let mut lut = LookupTable::new(rng.random_range(0.0..1.0), 8).unwrap();
        let cap = rng.random_range(1..6);
        let mut cq = CircularQueue::new(cap).unwrap();
        let mut model: VecDeque<Embedding> = VecDeque::new();
        let k = rng.random_range(1..10);
        let mut bank = PrototypeBank::random(k, dim, rng.random_range(0.0..1.0), &mut rng).unwrap();

        for _ in 0..ops {
            match rng.random_range(0..3) {
                0 => {
                    let label = rng.random_range(0..8u64);
                    let f = random_unit(&mut rng, dim);
                    if lut.contains(label) {
                        let gamma = lut.momentum();
                        lut_update(&mut lut, label, &f, gamma).unwrap();
                    } else {
                        lut.insert(label, &f).unwrap();
                    }
                    lut_bad += usize::from(!lut.iter().all(|(_, v)| unit_exact(v)));
                }
                1 => {
                    let f = random_unit(&mut rng, dim);
                    cq_push(&mut cq, f.clone()).unwrap();
                    model.push_back(f);
                    if model.len() > cap {
                        model.pop_front();
                    }
                    let same = cq.len() <= cap && cq.iter().eq(model.iter());
                    cq_bad += usize::from(!same || !cq.iter().all(unit_exact));
                }
                _ => {
                    let n = rng.random_range(0..4);
                    let mut assigned = Vec::new();
                    for _ in 0..n {
                        let f: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
                        let j = bank.assign(&f).unwrap();
                        assign_bad += usize::from(j != brute_argmin(&bank, &f));
                        assigned.push((j, Embedding::new(f)));
                    }
                    let nonzero: Vec<(usize, Embedding)> = assigned
                        .into_iter()
                        .filter(|(_, f)| f.norm() > 0.0)
                        .collect();
                    bank.update(&nonzero).unwrap();
                    bank_bad += usize::from(!bank.prototypes().iter().all(unit_exact));
                }
            }
        }
    }
    let ok = lut_bad + cq_bad + bank_bad + assign_bad == 0;
    report(
        "A8 state machines",
        ok,
        format!(
            "10000 sequences; violations: LUT norm {lut_bad}, CQ FIFO/capacity/norm {cq_bad}, bank norm {bank_bad}, assignment {assign_bad}"
        ),
    );
    assert!(ok);
}

// A9

#[test]
fn a9_results_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = ExperimentConfig {
        beta_grid: vec![0.0, 0.5, 1.0],
        gallery_grid: vec![50, 100],
        seeds: vec![0, 1, 2],
        ..ExperimentConfig::default()
    };
    let mut trained = ExperimentConfig {
        train_steps: 10,
        seeds: vec![5, 6],
        ..cfg.clone()
    };
    trained.gen.dim = 32;
    trained.model.num_prototypes = 32;
    let mut identical = true;
    let mut rows = 0;
    for (name, c) in [("eval", &mut cfg), ("trained", &mut trained)] {
        let mut bytes = Vec::new();
        for (run, jobs) in [(0, 1), (1, 1), (2, 4)] {
            c.out_dir = dir.path().join(format!("{name}{run}"));
            rows += run_experiment(c, jobs).unwrap().len();
            bytes.push(std::fs::read(c.out_dir.join("results.csv")).unwrap());
        }
        identical &= bytes.windows(2).all(|w| w[0] == w[1]);
    }
    report(
        "A9 determinism",
        identical,
        format!("two configs, runs with jobs 1, 1, 4: results.csv byte-identical = {identical} ({rows} rows total)"),
    );
    assert!(identical);
}
