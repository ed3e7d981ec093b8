//! Scoring ranked result lists against ground truth: page-level image
//! retrieval (IR) and box-level pattern spotting (PS), plus scan timing.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bbox::{iou, BoundingBox};
use crate::error::{Error, Result};
use crate::index::SearchIndex;
use crate::search::{ir_page_list, query_vector, rank, Mode, Query, QueryResult};

/// Cut-offs reported by default.
pub const DEFAULT_TOP_N: [usize; 5] = [100, 300, 500, 700, 1000];
pub const PS_IOU: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Ir,
    Ps,
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Task::Ir => "ir",
            Task::Ps => "ps",
        })
    }
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ir" => Ok(Task::Ir),
            "ps" => Ok(Task::Ps),
            _ => Err(Error::InvalidArgument(format!("unknown task {s:?} (expected ir or ps)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Occurrence {
    pub page: String,
    pub bbox: BoundingBox,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GtQuery {
    pub id: String,
    /// Page the query was cut from.
    pub page: String,
    pub bbox: BoundingBox,
    pub occurrences: Vec<Occurrence>,
}

impl GtQuery {
    fn relevant_pages(&self) -> HashSet<&str> {
        self.occurrences.iter().map(|o| o.page.as_str()).collect()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub queries: Vec<GtQuery>,
}

impl GroundTruth {
    pub fn load(path: &Path) -> Result<Self> {
        let gt: GroundTruth = serde_json::from_slice(&std::fs::read(path)?)?;
        gt.validate()?;
        Ok(gt)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut json = serde_json::to_vec_pretty(self)?;
        json.push(b'\n');
        std::fs::write(path, json)?;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.queries.is_empty() {
            return Err(Error::Empty("ground truth has no queries".into()));
        }
        let mut ids = HashSet::new();
        for q in &self.queries {
            if !ids.insert(q.id.as_str()) {
                return Err(Error::InvalidArgument(format!("duplicate query id {:?}", q.id)));
            }
        }
        Ok(())
    }

    /// Checks that every box lies inside its page; `size` returns the page
    /// dimensions, or `None` for an unknown page.
    pub fn validate_pages(&self, size: impl Fn(&str) -> Option<(u32, u32)>) -> Result<()> {
        for q in &self.queries {
            let boxes = std::iter::once((&q.page, &q.bbox)).chain(q.occurrences.iter().map(|o| (&o.page, &o.bbox)));
            for (page, b) in boxes {
                let (w, h) = size(page)
                    .ok_or_else(|| Error::InvalidArgument(format!("query {:?} names unknown page {page:?}", q.id)))?;
                if !b.fits_within(w, h) {
                    return Err(Error::InvalidArgument(format!(
                        "query {:?}: box {b:?} exceeds page {page:?} ({w}x{h})",
                        q.id
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn get(&self, id: &str) -> Option<&GtQuery> {
        self.queries.iter().find(|q| q.id == id)
    }
}

/// Non-interpolated average precision: the precision at each relevant rank,
/// summed and divided by `total_relevant`. Relevant items never retrieved
/// contribute zero. `None` when there is nothing to find.
pub fn average_precision(ranked_rel: &[bool], total_relevant: usize) -> Option<f64> {
    if total_relevant == 0 {
        return None;
    }
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (k, &rel) in ranked_rel.iter().enumerate() {
        if rel {
            hits += 1;
            sum += hits as f64 / (k + 1) as f64;
        }
    }
    Some(sum / total_relevant as f64)
}

/// Relevance of the page list derived from `results`, and the number of
/// relevant pages.
pub fn ir_relevance(results: &[QueryResult], gt: &GtQuery) -> (Vec<bool>, usize) {
    let pages = gt.relevant_pages();
    let rel = ir_page_list(results).iter().map(|p| pages.contains(p.as_str())).collect();
    (rel, pages.len())
}

/// True positives in rank order. A result matches the unmatched occurrence on
/// its page with the highest IoU, if that IoU reaches `iou_thresh`; each
/// occurrence matches at most once.
pub fn ps_relevance(results: &[QueryResult], gt: &GtQuery, iou_thresh: f64) -> (Vec<bool>, usize) {
    let mut matched = vec![false; gt.occurrences.len()];
    let rel = results
        .iter()
        .map(|r| {
            let best = gt
                .occurrences
                .iter()
                .enumerate()
                .filter(|(i, o)| !matched[*i] && o.page == r.page_id)
                .map(|(i, o)| (i, iou(&o.bbox, &r.bbox)))
                .filter(|&(_, v)| v >= iou_thresh)
                .fold(None::<(usize, f64)>, |acc, c| match acc {
                    Some(a) if a.1 >= c.1 => Some(a),
                    _ => Some(c),
                });
            match best {
                Some((i, _)) => {
                    matched[i] = true;
                    true
                }
                None => false,
            }
        })
        .collect();
    (rel, gt.occurrences.len())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapAtN {
    pub n: usize,
    pub map: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryAp {
    pub query_id: String,
    /// One value per cut-off, in the order of the report's `top_n`.
    pub ap: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingStats {
    pub queries: usize,
    pub extract_mean_ms: f64,
    pub extract_std_ms: f64,
    pub scan_mean_ms: f64,
    pub scan_std_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub task: Task,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mode: Option<Mode>,
    pub map: Vec<MapAtN>,
    pub per_query: Vec<QueryAp>,
    /// Queries without any relevant item; they do not count towards mAP.
    pub excluded: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub timing: Option<TimingStats>,
}

impl EvalReport {
    pub fn map_at(&self, n: usize) -> Option<f64> {
        self.map.iter().find(|m| m.n == n).map(|m| m.map)
    }

    /// Plain-text table, one row per cut-off.
    pub fn table(&self) -> String {
        let mode = self.mode.map_or(String::new(), |m| format!(" ({m})"));
        let mut s = format!("{}{mode}\n{:>6}  {:>8}\n", self.task.to_string().to_uppercase(), "top-n", "mAP");
        for m in &self.map {
            s.push_str(&format!("{:>6}  {:>8.4}\n", m.n, m.map));
        }
        s
    }
}

/// Results of every query, keyed by query id.
pub type ResultSet = BTreeMap<String, Vec<QueryResult>>;

fn evaluate(
    task: Task,
    results: &ResultSet,
    gt: &GroundTruth,
    top_n: &[usize],
    relevance: impl Fn(&[QueryResult], &GtQuery) -> (Vec<bool>, usize) + Sync,
) -> Result<EvalReport> {
    if top_n.is_empty() || top_n.contains(&0) {
        return Err(Error::InvalidArgument("top-n cut-offs must be at least 1".into()));
    }
    if results.is_empty() {
        return Err(Error::Empty("no query results to evaluate".into()));
    }
    gt.validate()?;
    let rows = results
        .par_iter()
        .map(|(id, rs)| {
            let q =
                gt.get(id).ok_or_else(|| Error::InvalidArgument(format!("query {id:?} missing from ground truth")))?;
            let (rel, total) = relevance(rs, q);
            Ok((id, top_n.iter().map(|&n| average_precision(&rel[..n.min(rel.len())], total)).collect::<Vec<_>>()))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut per_query = Vec::new();
    let mut excluded = Vec::new();
    for (id, aps) in rows {
        if aps.iter().any(Option::is_none) {
            log::warn!("query {id:?} has no relevant items; excluded from mAP");
            excluded.push(id.clone());
        } else {
            per_query.push(QueryAp { query_id: id.clone(), ap: aps.into_iter().flatten().collect() });
        }
    }
    if per_query.is_empty() {
        return Err(Error::Empty("no query has a relevant item".into()));
    }
    let map = top_n
        .iter()
        .enumerate()
        .map(|(j, &n)| MapAtN { n, map: per_query.iter().map(|q| q.ap[j]).sum::<f64>() / per_query.len() as f64 })
        .collect();
    Ok(EvalReport { task, mode: None, map, per_query, excluded, timing: None })
}

/// Page-level mAP: each result list becomes a page list, and a page is
/// relevant when it hosts an occurrence of the query.
pub fn eval_ir(results: &ResultSet, gt: &GroundTruth, top_n: &[usize]) -> Result<EvalReport> {
    evaluate(Task::Ir, results, gt, top_n, ir_relevance)
}

/// Box-level mAP with one-to-one matching at `iou_thresh`.
pub fn eval_ps(results: &ResultSet, gt: &GroundTruth, top_n: &[usize], iou_thresh: f64) -> Result<EvalReport> {
    if !(0.0..=1.0).contains(&iou_thresh) {
        return Err(Error::InvalidArgument(format!("iou threshold {iou_thresh} outside [0, 1]")));
    }
    evaluate(Task::Ps, results, gt, top_n, |rs, q| ps_relevance(rs, q, iou_thresh))
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Wall-clock time per query, split into descriptor extraction and
/// scan + sort of the top `n`. Queries run one after another; each scan may
/// still use every worker.
pub fn benchmark(index: &SearchIndex, queries: &[Query], mode: Mode, n: usize) -> Result<TimingStats> {
    if queries.is_empty() {
        return Err(Error::Empty("benchmark needs at least one query".into()));
    }
    let mut extract = Vec::with_capacity(queries.len());
    let mut scan = Vec::with_capacity(queries.len());
    for q in queries {
        let t = Instant::now();
        let v = query_vector(index, q)?;
        extract.push(t.elapsed().as_secs_f64() * 1e3);
        let t = Instant::now();
        std::hint::black_box(rank(index, v.values(), mode, n)?);
        scan.push(t.elapsed().as_secs_f64() * 1e3);
    }
    let (extract_mean_ms, extract_std_ms) = mean_std(&extract);
    let (scan_mean_ms, scan_std_ms) = mean_std(&scan);
    Ok(TimingStats { queries: queries.len(), extract_mean_ms, extract_std_ms, scan_mean_ms, scan_std_ms })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn bb(x: u32, y: u32, w: u32, h: u32) -> BoundingBox {
        BoundingBox::new(x, y, w, h).unwrap()
    }

    fn res(page: &str, b: BoundingBox, rank: usize) -> QueryResult {
        QueryResult { region_id: rank as u64, page_id: page.into(), bbox: b, distance: rank as f64, rank }
    }

    fn gt_query(id: &str, occ: &[(&str, BoundingBox)]) -> GtQuery {
        GtQuery {
            id: id.into(),
            page: occ[0].0.into(),
            bbox: occ[0].1,
            occurrences: occ.iter().map(|(p, b)| Occurrence { page: p.to_string(), bbox: *b }).collect(),
        }
    }

    #[test]
    fn ap_examples() {
        assert_eq!(average_precision(&[true], 1), Some(1.0));
        assert_eq!(average_precision(&[false, false, false], 2), Some(0.0));
        let ap = average_precision(&[true, false, true], 2).unwrap();
        assert!((ap - (1.0 + 2.0 / 3.0) / 2.0).abs() < 1e-12);
        assert_eq!(average_precision(&[true], 0), None);
    }

    #[test]
    fn ir_single_query() {
        let b = bb(0, 0, 10, 10);
        let gt = GroundTruth { queries: vec![gt_query("q", &[("A", b)])] };
        let results = ResultSet::from([("q".to_string(), vec![res("A", b, 1), res("B", b, 2)])]);
        assert_eq!(eval_ir(&results, &gt, &[100]).unwrap().map_at(100), Some(1.0));
        let results = ResultSet::from([("q".to_string(), vec![res("B", b, 1), res("C", b, 2)])]);
        assert_eq!(eval_ir(&results, &gt, &[100]).unwrap().map_at(100), Some(0.0));
    }

    #[test]
    fn ir_two_queries_hand_computed() {
        let b = bb(0, 0, 10, 10);
        let gt = GroundTruth { queries: vec![gt_query("q1", &[("A", b), ("C", b)]), gt_query("q2", &[("B", b)])] };
        // q1 pages [A, B, C]: (1/1 + 2/3) / 2; q2 pages [A, B]: (1/2) / 1
        let results = ResultSet::from([
            ("q1".to_string(), vec![res("A", b, 1), res("A", b, 2), res("B", b, 3), res("C", b, 4)]),
            ("q2".to_string(), vec![res("A", b, 1), res("B", b, 2)]),
        ]);
        let r = eval_ir(&results, &gt, &[100]).unwrap();
        let expected = ((1.0 + 2.0 / 3.0) / 2.0 + 0.5) / 2.0;
        assert!((r.map_at(100).unwrap() - expected).abs() < 1e-12);
        // cut-off 1: q1 AP 1/2, q2 AP 0
        let r = eval_ir(&results, &gt, &[1]).unwrap();
        assert!((r.map_at(1).unwrap() - 0.25).abs() < 1e-12);
    }

    #[test]
    fn ps_threshold_boundary() {
        let g = bb(0, 0, 100, 1);
        let gt = GroundTruth { queries: vec![gt_query("q", &[("A", g)])] };
        let exact = ResultSet::from([("q".to_string(), vec![res("A", g, 1)])]);
        assert_eq!(eval_ps(&exact, &gt, &[100], PS_IOU).unwrap().map_at(100), Some(1.0));
        // 49 of 100 columns: IoU 0.49
        let partial = ResultSet::from([("q".to_string(), vec![res("A", bb(0, 0, 49, 1), 1)])]);
        assert_eq!(eval_ps(&partial, &gt, &[100], PS_IOU).unwrap().map_at(100), Some(0.0));
    }

    #[test]
    fn ps_matches_each_occurrence_once() {
        let g = bb(10, 10, 20, 20);
        let gt = GroundTruth { queries: vec![gt_query("q", &[("A", g)])] };
        let (rel, total) = ps_relevance(&[res("A", g, 1), res("A", g, 2)], &gt.queries[0], PS_IOU);
        assert_eq!((rel, total), (vec![true, false], 1));
    }

    #[test]
    fn errors() {
        let b = bb(0, 0, 10, 10);
        let gt = GroundTruth { queries: vec![gt_query("q", &[("A", b)])] };
        let other = ResultSet::from([("zz".to_string(), vec![res("A", b, 1)])]);
        assert!(eval_ir(&other, &gt, &[100]).is_err());
        assert!(eval_ir(&ResultSet::new(), &gt, &[100]).is_err());
        let empty = GroundTruth::default();
        let ok = ResultSet::from([("q".to_string(), vec![res("A", b, 1)])]);
        assert!(eval_ps(&ok, &empty, &[100], 0.5).is_err());
        assert!("xx".parse::<Task>().is_err());
        assert_eq!("PS".parse::<Task>().unwrap(), Task::Ps);
    }

    #[test]
    fn queries_without_relevant_items_are_excluded() {
        let b = bb(0, 0, 10, 10);
        let mut none = gt_query("empty", &[("A", b)]);
        none.occurrences.clear();
        let gt = GroundTruth { queries: vec![gt_query("q", &[("A", b)]), none] };
        let results =
            ResultSet::from([("q".to_string(), vec![res("A", b, 1)]), ("empty".to_string(), vec![res("A", b, 1)])]);
        let r = eval_ps(&results, &gt, &[100], 0.5).unwrap();
        assert_eq!(r.excluded, ["empty"]);
        assert_eq!(r.map_at(100), Some(1.0));
    }

    #[test]
    fn gt_json_shape() {
        let json =
            r#"{"queries":[{"id":"q","page":"p1","bbox":[1,2,3,4],"occurrences":[{"page":"p2","bbox":[0,0,5,5]}]}]}"#;
        let gt: GroundTruth = serde_json::from_str(json).unwrap();
        assert_eq!(gt.queries[0].occurrences[0].bbox, bb(0, 0, 5, 5));
        assert_eq!(serde_json::to_string(&gt).unwrap(), json);
        assert!(gt.validate_pages(|_| Some((10, 10))).is_ok());
        assert!(gt.validate_pages(|_| Some((4, 4))).is_err());
    }

    proptest! {
        #[test]
        fn map_grows_with_n(rel in prop::collection::vec(any::<bool>(), 0..60), extra in 0usize..5) {
            let total = rel.iter().filter(|&&r| r).count() + extra;
            prop_assume!(total > 0);
            let mut last = 0.0;
            for n in 0..=rel.len() {
                let ap = average_precision(&rel[..n], total).unwrap();
                prop_assert!(ap >= last && ap <= 1.0);
                last = ap;
            }
        }

        #[test]
        fn promoting_a_hit_never_lowers_ap(rel in prop::collection::vec(any::<bool>(), 2..40), i in 0usize..40) {
            let total = rel.iter().filter(|&&r| r).count();
            prop_assume!(total > 0);
            let i = i % (rel.len() - 1);
            prop_assume!(!rel[i] && rel[i + 1]);
            let mut better = rel.clone();
            better.swap(i, i + 1);
            prop_assert!(average_precision(&better, total).unwrap() >= average_precision(&rel, total).unwrap());
        }

        #[test]
        fn ps_at_zero_iou_reduces_to_ir(
            order in Just((0..8).collect::<Vec<usize>>()).prop_shuffle(),
            relevant in prop::collection::vec(any::<bool>(), 8),
        ) {
            prop_assume!(relevant.iter().any(|&r| r));
            let pages: Vec<String> = (0..8).map(|p| format!("p{p}")).collect();
            let occ: Vec<(&str, BoundingBox)> = (0..8)
                .filter(|&p| relevant[p])
                .map(|p| (pages[p].as_str(), bb(0, 0, 10, 10)))
                .collect();
            let gt = GroundTruth { queries: vec![gt_query("q", &occ)] };
            // one result per page, boxes disjoint from the occurrence
            let rs: Vec<_> = order.iter().enumerate().map(|(k, &p)| res(&pages[p], bb(50, 50, 5, 5), k + 1)).collect();
            let set = ResultSet::from([("q".to_string(), rs)]);
            let ir = eval_ir(&set, &gt, &DEFAULT_TOP_N).unwrap();
            let ps = eval_ps(&set, &gt, &DEFAULT_TOP_N, 0.0).unwrap();
            prop_assert_eq!(ir.map, ps.map);
        }
    }
}
