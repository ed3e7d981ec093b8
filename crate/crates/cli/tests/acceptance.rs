//! Acceptance checks, one line per criterion. Run with
//! `cargo test -p docspot-cli --test acceptance`.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use docspot::eval::{average_precision, eval_ps, GroundTruth, GtQuery, Occurrence, ResultSet, PS_IOU};
use docspot::hashing::{hamming_distance, xor_popcount_many, BinaryCode};
use docspot::imgproc::{BinaryImage, Image};
use docspot::index::{build_index, BuildParams, FeatureSource, PageInput, StorageReport};
use docspot::proposals::{classify_edge_map, filter_invalid_region, FilterParams, FilterVerdict};
use docspot::search::{
    postprocess_union, scan_euclidean, scan_hamming, search, Mode, PostProcessParams, Query, QueryResult,
};
use docspot::segmentation::{felzenszwalb_segment, SegmentationParams};
use docspot::synth::{generate, SynthSpec};
use docspot::{iou, BoundingBox};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Check = Result<String, String>;
type Criterion = (&'static str, fn() -> Check);

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within(elapsed: Duration, limit: Duration) -> Result<(), String> {
    ensure(elapsed <= limit, || format!("took {elapsed:.2?}, limit {limit:?}"))
}

fn bb(x: u32, y: u32, w: u32, h: u32) -> BoundingBox {
    BoundingBox::new(x, y, w, h).unwrap()
}

fn hamming_oracle() -> Check {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut pairs = 0;
    for dims in [64usize, 65, 640, 1024] {
        let mut out = [0u32; 1];
        for _ in 0..10_000 {
            let a: Vec<bool> = (0..dims).map(|_| rng.gen()).collect();
            let b: Vec<bool> = (0..dims).map(|_| rng.gen()).collect();
            let naive = a.iter().zip(&b).filter(|(x, y)| x != y).count() as u32;
            let (ca, cb) = (BinaryCode::from_bits(&a), BinaryCode::from_bits(&b));
            let packed = hamming_distance(&ca, &cb).map_err(|e| e.to_string())?;
            xor_popcount_many(ca.words(), cb.words(), &mut out);
            ensure(packed == naive && out[0] == naive, || {
                format!("dims {dims}: packed {packed}, batch {}, naive {naive}", out[0])
            })?;
            pairs += 1;
        }
    }
    within(start.elapsed(), Duration::from_secs(5))?;
    Ok(format!("{pairs} pairs in {:.2?}", start.elapsed()))
}

fn storage_arithmetic() -> Check {
    let r = StorageReport::for_dims(786_718, 1024);
    let (f, b) = (r.float_gib(), r.binary_gib());
    ensure((f - 3.00).abs() <= 0.01, || format!("float {f} GiB"))?;
    ensure((b - 0.094).abs() <= 0.001, || format!("binary {b} GiB"))?;
    ensure(r.ratio == 32.0, || format!("ratio {}", r.ratio))?;
    Ok(format!("float {f:.4} GiB, binary {b:.4} GiB, ratio {}", r.ratio))
}

fn speed_direction() -> Check {
    const ROWS: usize = 100_000;
    const DIMS: usize = 1024;
    const QUERIES: usize = 50;
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let rows: Vec<f32> = (0..ROWS * DIMS).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let codes: Vec<u64> = (0..ROWS * DIMS / 64).map(|_| rng.gen()).collect();
    let queries: Vec<usize> = (0..QUERIES).map(|_| rng.gen_range(0..ROWS)).collect();

    let (mut euclid, mut hamming) = (Duration::ZERO, Duration::ZERO);
    for &q in &queries {
        let t = Instant::now();
        let hits = scan_euclidean(&rows, &rows[q * DIMS..(q + 1) * DIMS], 1000);
        euclid += t.elapsed();
        ensure(hits[0] == (0.0, q), || format!("euclidean self match {:?}", hits[0]))?;

        let t = Instant::now();
        let hits = scan_hamming(&codes, &codes[q * 16..(q + 1) * 16], 1000);
        hamming += t.elapsed();
        ensure(hits[0] == (0, q), || format!("hamming self match {:?}", hits[0]))?;
    }
    let (e, h) = (euclid / QUERIES as u32, hamming / QUERIES as u32);
    ensure(h.as_secs_f64() <= 0.5 * e.as_secs_f64(), || format!("hamming {h:.2?} vs euclidean {e:.2?}"))?;
    within(start.elapsed(), Duration::from_secs(120))?;
    Ok(format!("mean scan euclidean {e:.2?}, hamming {h:.2?} ({:.2}x)", h.as_secs_f64() / e.as_secs_f64()))
}

fn end_to_end() -> Check {
    let start = Instant::now();
    let spec = SynthSpec { page_count: 20, ..SynthSpec::default() };
    let corpus = generate(&spec).map_err(|e| e.to_string())?;
    ensure(corpus.plants.len() == 60, || format!("{} plants", corpus.plants.len()))?;
    let pages: Vec<PageInput> = corpus
        .pages
        .iter()
        .map(|(id, img)| PageInput { id: id.clone(), path: format!("{id}.png"), image: img.clone() })
        .collect();
    let index = build_index(&pages, &BuildParams::default(), &FeatureSource::Baseline).map_err(|e| e.to_string())?;

    // every planted instance is a query; its class is the relevant set
    let gt = GroundTruth {
        queries: corpus
            .plants
            .iter()
            .enumerate()
            .map(|(i, p)| GtQuery {
                id: format!("{}-{i:02}", p.class.name()),
                page: p.page.clone(),
                bbox: p.bbox,
                occurrences: corpus
                    .plants
                    .iter()
                    .filter(|o| o.class == p.class)
                    .map(|o| Occurrence { page: o.page.clone(), bbox: o.bbox })
                    .collect(),
            })
            .collect(),
    };
    let page_img: BTreeMap<&str, &Image> = corpus.pages.iter().map(|(id, img)| (id.as_str(), img)).collect();
    let pp = PostProcessParams::default();
    let mut summary = Vec::new();
    for mode in Mode::ALL {
        let mut set = ResultSet::new();
        for q in &gt.queries {
            let crop = page_img[q.page.as_str()].crop(&q.bbox).map_err(|e| e.to_string())?;
            let rs = search(&index, &Query::Image(crop), mode, 100, Some(&pp)).map_err(|e| e.to_string())?;
            let top = rs.first().ok_or_else(|| format!("{mode} {}: no results", q.id))?;
            let hit = q.occurrences.iter().any(|o| o.page == top.page_id && iou(&o.bbox, &top.bbox) >= PS_IOU);
            ensure(hit, || format!("{mode} {}: rank 1 {} {:?} is no occurrence", q.id, top.page_id, top.bbox))?;
            set.insert(q.id.clone(), rs);
        }
        let report = eval_ps(&set, &gt, &[100], PS_IOU).map_err(|e| e.to_string())?;
        let map = report.map_at(100).unwrap_or(0.0);
        ensure(map >= 0.9, || format!("{mode}: mAP@100 {map:.4}"))?;
        summary.push(format!("{mode} mAP@100 {map:.4}"));
    }
    within(start.elapsed(), Duration::from_secs(300))?;
    Ok(format!(
        "{} queries, {} regions, recall@1 1.0, {} in {:.1?}",
        gt.queries.len(),
        index.len(),
        summary.join(", "),
        start.elapsed()
    ))
}

fn ap_oracle() -> Check {
    // (relevance, total relevant, precision at each hit summed by hand / total)
    let cases: [(&str, usize, f64); 25] = [
        ("101", 2, (1.0 + 2.0 / 3.0) / 2.0),
        ("1", 1, 1.0),
        ("0", 1, 0.0),
        ("", 3, 0.0),
        ("111", 3, 1.0),
        ("000", 2, 0.0),
        ("01", 1, 0.5),
        ("001", 1, 1.0 / 3.0),
        ("0001", 1, 0.25),
        ("11", 4, 0.5),
        ("1100", 2, 1.0),
        ("0011", 2, (1.0 / 3.0 + 0.5) / 2.0),
        ("1010", 2, (1.0 + 2.0 / 3.0) / 2.0),
        ("0101", 2, (0.5 + 0.5) / 2.0),
        ("10101", 3, (1.0 + 2.0 / 3.0 + 3.0 / 5.0) / 3.0),
        ("10101", 5, (1.0 + 2.0 / 3.0 + 3.0 / 5.0) / 5.0),
        ("1001", 2, (1.0 + 0.5) / 2.0),
        ("0110", 2, (0.5 + 2.0 / 3.0) / 2.0),
        ("11011", 4, (1.0 + 1.0 + 0.75 + 0.8) / 4.0),
        ("00001", 1, 0.2),
        ("100000000", 1, 1.0),
        ("000000001", 1, 1.0 / 9.0),
        ("1111111111", 10, 1.0),
        ("0100100100", 3, (0.5 + 0.4 + 3.0 / 8.0) / 3.0),
        ("1101001", 5, (1.0 + 1.0 + 0.75 + 4.0 / 7.0) / 5.0),
    ];
    for (list, total, want) in cases {
        let rel: Vec<bool> = list.chars().map(|c| c == '1').collect();
        let got = average_precision(&rel, total).ok_or_else(|| format!("{list}: no value"))?;
        ensure((got - want).abs() <= 1e-9, || format!("[{list}] / {total}: {got} vs {want}"))?;
    }
    let pinned = average_precision(&[true, false, true], 2).unwrap();
    ensure((pinned - 0.8333).abs() < 1e-4, || format!("[1,0,1] gave {pinned}"))?;
    ensure(average_precision(&[true], 0).is_none(), || "zero relevant must have no AP".into())?;
    Ok(format!("{} lists", cases.len()))
}

fn pixel_iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let inside = |r: &BoundingBox, x: u32, y: u32| x >= r.x && x < r.x + r.w && y >= r.y && y < r.y + r.h;
    let (mut inter, mut union) = (0u64, 0u64);
    for y in 0..a.bottom().max(b.bottom()) {
        for x in 0..a.right().max(b.right()) {
            let (p, q) = (inside(a, x, y), inside(b, x, y));
            inter += u64::from(p && q);
            union += u64::from(p || q);
        }
    }
    inter as f64 / union as f64
}

fn iou_oracle() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut overlapping = 0;
    for _ in 0..100 {
        let mut r = || bb(rng.gen_range(0..40), rng.gen_range(0..40), rng.gen_range(1..40), rng.gen_range(1..40));
        let (a, b) = (r(), r());
        let (got, want) = (iou(&a, &b), pixel_iou(&a, &b));
        ensure((got - want).abs() <= 1e-9, || format!("{a:?} {b:?}: {got} vs {want}"))?;
        overlapping += usize::from(want > 0.0);
    }
    // the corners (0,0)-(10,10) and (5,0)-(15,10)
    let third = iou(&bb(0, 0, 10, 10), &bb(5, 0, 10, 10));
    ensure(third == 1.0 / 3.0, || format!("half overlap gave {third}"))?;
    Ok(format!("100 pairs ({overlapping} overlapping), half overlap exactly 1/3"))
}

/// Edge map with the given fraction of set pixels in each of 8 vertical strips.
fn striped(width: usize, height: usize, densities: [f64; 8]) -> BinaryImage {
    let strip = width / 8;
    let mut img = BinaryImage::zeros(width, height).unwrap();
    for (s, d) in densities.iter().enumerate() {
        let on = (d * (strip * height) as f64).round() as usize;
        for i in 0..on {
            img.set(s * strip + i % strip, i / strip, true);
        }
    }
    img
}

fn algorithm_one() -> Check {
    let p = FilterParams::default();
    ensure(p.alpha == 0.06, || format!("alpha {}", p.alpha))?;
    let dense = 0.2;
    let fixtures: Vec<(&str, BinaryImage, FilterVerdict)> = vec![
        ("blank", BinaryImage::zeros(80, 50).unwrap(), FilterVerdict::SparseEdges),
        ("sparse everywhere", striped(80, 50, [0.05; 8]), FilterVerdict::SparseEdges),
        ("dense everywhere", striped(80, 50, [dense; 8]), FilterVerdict::Valid),
        (
            "five empty sectors",
            striped(80, 50, [0.0, 0.0, 0.0, 0.0, 0.0, 0.4, 0.4, 0.4]),
            FilterVerdict::EmptySectors(5),
        ),
        ("four empty sectors", striped(80, 50, [0.0, 0.0, 0.0, 0.0, dense, dense, dense, dense]), FilterVerdict::Valid),
        (
            "sparse sectors at alpha",
            striped(80, 50, [0.06, 0.06, 0.06, 0.06, 0.06, dense, dense, dense]),
            FilterVerdict::Valid,
        ),
        (
            "five sectors just under alpha",
            striped(80, 50, [0.05, 0.05, 0.05, 0.05, 0.05, 0.5, 0.5, 0.5]),
            FilterVerdict::EmptySectors(5),
        ),
        (
            "all but one empty",
            striped(80, 50, [0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0]),
            FilterVerdict::EmptySectors(5),
        ),
    ];
    for (name, edges, want) in &fixtures {
        let got = classify_edge_map(edges, &p);
        ensure(got == *want, || format!("{name}: {got:?}, expected {want:?}"))?;
    }
    // narrower than 8: horizontal strips, edges only in the top rows
    let mut narrow = BinaryImage::zeros(4, 40).unwrap();
    for y in 0..10 {
        for x in 0..4 {
            narrow.set(x, y, true);
        }
    }
    let got = classify_edge_map(&narrow, &p);
    ensure(got == FilterVerdict::EmptySectors(5), || format!("narrow: {got:?}"))?;

    // through the edge detector: a flat crop is rejected, a framed one kept
    let flat = Image::filled(40, 40, &[0.8]).unwrap();
    ensure(!filter_invalid_region(&flat, &p).map_err(|e| e.to_string())?, || "flat crop accepted".into())?;
    let grid = Image::from_fn(40, 40, 1, |x, y, _| if x % 8 < 3 || y % 8 < 3 { 0.1 } else { 0.9 }).unwrap();
    ensure(filter_invalid_region(&grid, &p).map_err(|e| e.to_string())?, || "grid crop rejected".into())?;
    Ok(format!("{} edge-map fixtures, narrow fallback, 2 crops", fixtures.len()))
}

fn suppression_oracle(pool: &[QueryResult], t: f64) -> Vec<u64> {
    let mut kept: Vec<&QueryResult> = Vec::new();
    for r in pool {
        if !kept.iter().any(|k| k.page_id == r.page_id && pixel_iou(&k.bbox, &r.bbox) > t) {
            kept.push(r);
        }
    }
    kept.iter().map(|r| r.region_id).collect()
}

fn postprocess_conformance() -> Check {
    let params = PostProcessParams::default();
    ensure(params.union_iou == 0.85, || format!("threshold {}", params.union_iou))?;
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut pools = 0;
    let mut dropped = 0;
    let mut scripted = vec![vec![
        (0, bb(0, 0, 100, 1)),
        (0, bb(5, 0, 95, 1)),
        (0, bb(0, 0, 80, 1)),
        (0, bb(15, 0, 85, 1)),
        (1, bb(5, 0, 95, 1)),
    ]];
    for _ in 0..200 {
        let len = rng.gen_range(0..30);
        // clustered boxes so that many pairs sit near the threshold
        scripted.push(
            (0..len)
                .map(|_| {
                    let base = rng.gen_range(0..3) * 20;
                    (
                        rng.gen_range(0..2),
                        bb(
                            base + rng.gen_range(0..3),
                            rng.gen_range(0..3),
                            18 + rng.gen_range(0..3),
                            18 + rng.gen_range(0..3),
                        ),
                    )
                })
                .collect(),
        );
    }
    for boxes in &scripted {
        let pool: Vec<QueryResult> = boxes
            .iter()
            .enumerate()
            .map(|(i, (page, b))| QueryResult {
                region_id: i as u64,
                page_id: format!("p{page}"),
                bbox: *b,
                distance: i as f64,
                rank: i + 1,
            })
            .collect();
        let kept = postprocess_union(&pool, &params);
        let ids: Vec<u64> = kept.iter().map(|r| r.region_id).collect();
        ensure(ids == suppression_oracle(&pool, 0.85), || format!("pool {boxes:?}: kept {ids:?}"))?;
        ensure(kept.len() <= pool.len(), || "kept more than the pool".into())?;
        ensure(kept.iter().enumerate().all(|(i, r)| r.rank == i + 1), || "ranks not renumbered".into())?;
        dropped += pool.len() - kept.len();
        pools += 1;
    }
    let first: Vec<u64> = postprocess_union(
        &scripted[0]
            .iter()
            .enumerate()
            .map(|(i, (page, b))| QueryResult {
                region_id: i as u64 + 1,
                page_id: format!("p{page}"),
                bbox: *b,
                distance: 0.0,
                rank: i + 1,
            })
            .collect::<Vec<_>>(),
        &params,
    )
    .iter()
    .map(|r| r.region_id)
    .collect();
    ensure(first == [1, 3, 4, 5], || format!("five-box pool kept {first:?}"))?;
    Ok(format!("{pools} pools, {dropped} boxes suppressed"))
}

fn same_tree(a: &Path, b: &Path) -> Result<usize, String> {
    let list = |d: &Path| -> Result<Vec<String>, String> {
        let mut v: Vec<String> = fs::read_dir(d)
            .map_err(|e| e.to_string())?
            .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
            .collect();
        v.sort();
        Ok(v)
    };
    let names = list(a)?;
    ensure(names == list(b)?, || format!("file lists differ: {names:?}"))?;
    for n in &names {
        let (x, y) = (fs::read(a.join(n)).unwrap(), fs::read(b.join(n)).unwrap());
        ensure(x == y, || format!("{n} differs"))?;
    }
    Ok(names.len())
}

fn determinism() -> Check {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let d = |p: &str| dir.path().join(p).to_string_lossy().into_owned();
    let run = |args: &[&str]| {
        let code = docspot_cli::run(std::iter::once("docspot").chain(args.iter().copied()));
        ensure(code == 0, || format!("{args:?} exited {code}"))
    };
    run(&["synth", "--out", &d("corp"), "--pages", "6", "--seed", "11"])?;
    run(&["index", &d("corp/pages"), "--out", &d("a")])?;
    run(&["index", &d("corp/pages"), "--out", &d("b")])?;
    let files = same_tree(&dir.path().join("a"), &dir.path().join("b"))?;
    Ok(format!("{files} files byte-identical"))
}

fn felzenszwalb_properties() -> Check {
    let img = Image::from_fn(8, 8, 3, |x, _, c| if x < 4 { [0.9, 0.1, 0.1][c] } else { [0.1, 0.1, 0.9][c] })
        .map_err(|e| e.to_string())?;
    let seg = felzenszwalb_segment(&img, &SegmentationParams { k: 50.0, min_size: 20, ..Default::default() })
        .map_err(|e| e.to_string())?;
    ensure(seg.segment_count == 2, || format!("{} segments", seg.segment_count))?;
    for y in 0..8 {
        for x in 0..8 {
            let same = seg.label(x, y) == seg.label(0, 0);
            ensure(same == (x < 4), || format!("pixel ({x},{y}) in the wrong half"))?;
        }
    }

    let ks = [1.0, 10.0, 50.0, 100.0, 200.0, 400.0, 800.0, 2000.0];
    for seed in 0..10u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let cells: Vec<[f32; 3]> = (0..16).map(|_| [rng.gen(), rng.gen(), rng.gen()]).collect();
        let noise: Vec<f32> = (0..48 * 48 * 3).map(|_| rng.gen_range(-0.05..0.05)).collect();
        let img = Image::from_fn(48, 48, 3, |x, y, c| {
            (cells[(y / 12) * 4 + x / 12][c] + noise[(y * 48 + x) * 3 + c]).clamp(0.0, 1.0)
        })
        .map_err(|e| e.to_string())?;
        let counts: Vec<usize> = ks
            .iter()
            .map(|&k| {
                felzenszwalb_segment(&img, &SegmentationParams { k, min_size: 1, sigma: 0.8 }).map(|s| s.segment_count)
            })
            .collect::<Result<_, _>>()
            .map_err(|e| e.to_string())?;
        ensure(counts.windows(2).all(|w| w[1] <= w[0]), || format!("image {seed}: {counts:?}"))?;
    }
    Ok("halves split exactly, counts non-increasing in k on 10 images".into())
}

fn main() -> ExitCode {
    let checks: [Criterion; 10] = [
        ("hamming oracle equivalence", hamming_oracle),
        ("storage arithmetic", storage_arithmetic),
        ("speed direction", speed_direction),
        ("end-to-end synthetic PS", end_to_end),
        ("AP oracle", ap_oracle),
        ("IoU oracle", iou_oracle),
        ("invalid-region filter conformance", algorithm_one),
        ("post-processing conformance", postprocess_conformance),
        ("index determinism", determinism),
        ("segmentation properties", felzenszwalb_properties),
    ];
    let mut failed = 0;
    for (name, check) in checks {
        let start = Instant::now();
        let outcome = std::panic::catch_unwind(check).unwrap_or_else(|_| Err("panicked".into()));
        match outcome {
            Ok(detail) => println!("PASS  {name}: {detail} [{:.2?}]", start.elapsed()),
            Err(why) => {
                failed += 1;
                println!("FAIL  {name}: {why} [{:.2?}]", start.elapsed());
            }
        }
    }
    println!("{} of {} criteria passed", checks.len() - failed, checks.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
