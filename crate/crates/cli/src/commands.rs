use std::collections::HashMap;
use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use docspot::eval::{benchmark, eval_ir, eval_ps, GroundTruth, ResultSet, Task};
use docspot::features::{read_feature_table, ExtractorProfile, FeatureVector};
use docspot::imgproc::{draw_rect, Image};
use docspot::index::{
    build_from_proposals, load_pages, propose_pages, write_crops_manifest, FeatureSource, ProposalTable, SearchIndex,
};
use docspot::search::{search, write_jsonl, Mode, PostProcessParams, Query, QueryResult};
use docspot::synth::generate;
use serde::Serialize;

use crate::config::Config;
use crate::{BenchArgs, CmdResult, EvalArgs, Failure, IndexArgs, ProposalFlags, QueryArgs, SearchFlags, SynthArgs};

fn apply_proposal_flags(c: &mut Config, f: &ProposalFlags) {
    let set = |dst: &mut f64, v: Option<f64>| {
        if let Some(v) = v {
            *dst = v;
        }
    };
    set(&mut c.filter.alpha, f.alpha);
    set(&mut c.segmentation.k, f.k);
    set(&mut c.segmentation.sigma, f.seg_sigma);
    set(&mut c.filter.max_side_frac, f.max_side_frac);
    set(&mut c.filter.edges.sigma, f.canny_sigma);
    set(&mut c.filter.edges.low, f.canny_low);
    set(&mut c.filter.edges.high, f.canny_high);
    if let Some(v) = f.min_size {
        c.segmentation.min_size = v;
    }
    if let Some(v) = f.min_side {
        c.filter.min_side = v;
    }
}

fn apply_search_flags(c: &mut Config, f: &SearchFlags) {
    if let Some(m) = f.mode {
        c.search.mode = m;
    }
    if f.pp {
        c.search.pp = true;
    }
    if let Some(p) = f.pool_size {
        c.postprocess.pool_size = p as usize;
    }
    if let Some(t) = f.union_iou {
        c.postprocess.union_iou = t;
    }
}

fn pp_params(c: &Config) -> Option<PostProcessParams> {
    c.search.pp.then_some(c.postprocess)
}

fn output(path: Option<&Path>) -> Result<Box<dyn Write>, Failure> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(
            File::create(p).map_err(|e| Failure::data(format!("cannot create {}: {e}", p.display())))?,
        )),
        None => Box::new(BufWriter::new(io::stdout().lock())),
    })
}

fn require_dir(path: &Path, what: &str) -> CmdResult {
    if path.is_dir() {
        Ok(())
    } else {
        Err(Failure::data(format!("{what} {} is not a directory", path.display())))
    }
}

fn load_index(dir: &Path) -> Result<SearchIndex, Failure> {
    require_dir(dir, "index")?;
    SearchIndex::load(dir).map_err(|e| Failure::data(format!("cannot load index {}: {e}", dir.display())))
}

fn percent_drop(from: usize, to: usize) -> f64 {
    if from == 0 {
        0.0
    } else {
        100.0 * (from - to) as f64 / from as f64
    }
}

#[derive(Serialize)]
struct PageReport<'a> {
    page: &'a str,
    raw: usize,
    after_size: usize,
    after_edges: usize,
}

fn print_proposal_report(so: &mut impl Write, table: &ProposalTable) -> io::Result<()> {
    let t = table.totals();
    writeln!(so, "pages        {:>8}", table.pages.len())?;
    writeln!(so, "raw          {:>8}", t.raw)?;
    writeln!(so, "size filter  {:>8}  (-{:.1}%)", t.after_size, percent_drop(t.raw, t.after_size))?;
    writeln!(so, "edge filter  {:>8}  (-{:.1}%)", t.after_edges, percent_drop(t.after_size, t.after_edges))
}

pub fn cmd_index(args: &IndexArgs, config: &mut Config) -> CmdResult {
    apply_proposal_flags(config, &args.proposals);
    if let Some(p) = &args.profile {
        config.index.profile = p.clone();
    }
    if args.no_normalize {
        config.index.normalize = false;
    }
    config.validate()?;
    let profile = ExtractorProfile::by_name(&config.index.profile)?;
    match (&args.features, profile.is_baseline()) {
        (Some(_), true) => return Err(Failure::usage("--features needs an external --profile")),
        (None, false) if !args.manifest_only => {
            return Err(Failure::usage(format!("profile {:?} needs --features", profile.name)))
        }
        _ => {}
    }

    require_dir(&args.pages, "page directory")?;
    let pages = load_pages(&args.pages)?;
    let table = propose_pages(&pages, &config.proposals())?;
    let mut so = io::stdout().lock();
    print_proposal_report(&mut so, &table)?;
    if let Some(path) = &args.report {
        let mut w = output(Some(path))?;
        for p in &table.pages {
            let line = PageReport {
                page: &p.id,
                raw: p.counts.raw,
                after_size: p.counts.after_size,
                after_edges: p.counts.after_edges,
            };
            serde_json::to_writer(&mut w, &line)?;
            w.write_all(b"\n")?;
        }
        w.flush()?;
    }
    if let Some(path) = &args.manifest {
        write_crops_manifest(path, &table)?;
        writeln!(so, "manifest     {} ({} regions)", path.display(), table.regions.len())?;
    }
    if args.manifest_only {
        return Ok(());
    }

    let source = match &args.features {
        Some(path) => FeatureSource::External { table: read_feature_table(path, Some(profile.dims))?, profile },
        None => FeatureSource::Baseline,
    };
    let out = args.out.as_ref().ok_or_else(|| Failure::usage("--out is required"))?;
    let index = build_from_proposals(&pages, table, &source, config.index.normalize)?;
    index.save(out)?;
    writeln!(so, "indexed {} regions ({} dims) into {}", index.len(), index.dims(), out.display())?;
    Ok(())
}

fn is_image(p: &Path) -> bool {
    p.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "jpg" | "jpeg"))
}

fn stem(p: &Path) -> String {
    p.file_stem().and_then(|s| s.to_str()).unwrap_or_default().to_string()
}

/// Image queries from files and directories, in argument order; directory
/// contents sorted by name.
fn image_queries(paths: &[PathBuf]) -> Result<Vec<(String, Query)>, Failure> {
    let mut files = Vec::new();
    for p in paths {
        if p.is_dir() {
            let mut inner: Vec<PathBuf> =
                fs::read_dir(p)?.filter_map(|e| e.ok().map(|e| e.path())).filter(|p| is_image(p)).collect();
            inner.sort();
            files.extend(inner);
        } else if p.is_file() {
            files.push(p.clone());
        } else {
            return Err(Failure::data(format!("query {} does not exist", p.display())));
        }
    }
    files.iter().map(|f| Ok((stem(f), Query::Image(Image::load(f)?)))).collect()
}

fn vector_queries(path: &Path, dims: usize) -> Result<Vec<(u64, Query)>, Failure> {
    let table = read_feature_table(path, Some(dims))?;
    (0..table.len()).map(|i| Ok((table.ids[i], Query::Vector(FeatureVector::new(table.row(i).to_vec())?)))).collect()
}

fn write_overlays(index: &SearchIndex, qid: &str, results: &[QueryResult], top: usize, dir: &Path) -> CmdResult {
    fs::create_dir_all(dir)?;
    let mut by_page: Vec<(&str, Vec<&QueryResult>)> = Vec::new();
    for r in results.iter().take(top) {
        match by_page.iter_mut().find(|(p, _)| *p == r.page_id) {
            Some((_, v)) => v.push(r),
            None => by_page.push((&r.page_id, vec![r])),
        }
    }
    for (page, rs) in by_page {
        let record = index.page(page).ok_or_else(|| Failure::data(format!("page {page:?} not in index")))?;
        let mut img = Image::load(Path::new(&record.path))?.to_dynamic();
        // best hit in red, the rest in blue, drawn worst first
        for r in rs.iter().rev() {
            let color = if r.rank == 1 { [220, 20, 20] } else { [30, 60, 220] };
            draw_rect(&mut img, &r.bbox, color, 2);
        }
        img.save(dir.join(format!("{qid}.{page}.png"))).map_err(|e| Failure::Data(e.into()))?;
    }
    Ok(())
}

pub fn cmd_query(args: &QueryArgs, config: &mut Config) -> CmdResult {
    apply_search_flags(config, &args.search);
    if let Some(n) = args.n {
        config.search.top_n = vec![n as usize];
    }
    config.validate()?;
    let n = config.search.top_n.iter().copied().max().unwrap_or(1);
    let index = load_index(&args.index)?;
    let mut queries = image_queries(&args.queries)?;
    if let Some(v) = &args.vectors {
        queries.extend(vector_queries(v, index.dims())?.into_iter().map(|(id, q)| (id.to_string(), q)));
    }
    if queries.is_empty() {
        return Err(Failure::usage("no queries given"));
    }
    let mode = config.search.mode;
    let pp = pp_params(config);
    let mut out = output(args.out.as_deref())?;
    for (qid, q) in &queries {
        let results = search(&index, q, mode, n, pp.as_ref())?;
        write_jsonl(&mut out, qid, &results, mode)?;
        if let Some(dir) = &args.overlay {
            write_overlays(&index, qid, &results, args.overlay_top, dir)?;
        }
    }
    out.flush()?;
    Ok(())
}

/// One query per ground-truth entry, cut from its page as recorded in the
/// index.
fn gt_queries(index: &SearchIndex, gt: &GroundTruth) -> Result<Vec<(String, Query)>, Failure> {
    let mut pages: HashMap<&str, Image> = HashMap::new();
    let mut out = Vec::with_capacity(gt.queries.len());
    for q in &gt.queries {
        if !pages.contains_key(q.page.as_str()) {
            let record = index
                .page(&q.page)
                .ok_or_else(|| Failure::data(format!("query {:?}: page {:?} is not in the index", q.id, q.page)))?;
            pages.insert(&q.page, Image::load(Path::new(&record.path))?);
        }
        out.push((q.id.clone(), Query::Image(pages[q.page.as_str()].crop(&q.bbox)?)));
    }
    Ok(out)
}

pub fn cmd_eval(args: &EvalArgs, config: &mut Config) -> CmdResult {
    apply_search_flags(config, &args.search);
    if !args.top_n.is_empty() {
        config.search.top_n = args.top_n.iter().map(|&n| n as usize).collect();
    }
    if let Some(t) = args.ps_iou {
        config.search.ps_iou = t;
    }
    config.validate()?;
    let index = load_index(&args.index)?;
    let gt = GroundTruth::load(&args.gt).map_err(|e| Failure::data(format!("{}: {e}", args.gt.display())))?;
    gt.validate_pages(|p| index.page(p).map(|r| (r.width, r.height)))?;

    let queries: Vec<(String, Query)> = match &args.vectors {
        Some(v) => {
            let vs = vector_queries(v, index.dims())?;
            if vs.len() != gt.queries.len() {
                return Err(Failure::data(format!(
                    "{} query vectors for {} ground-truth queries",
                    vs.len(),
                    gt.queries.len()
                )));
            }
            gt.queries.iter().zip(vs).map(|(g, (_, q))| (g.id.clone(), q)).collect()
        }
        None => gt_queries(&index, &gt)?,
    };

    let mode = config.search.mode;
    let pp = pp_params(config);
    let n = config.search.top_n.iter().copied().max().unwrap_or(1);
    let mut results = ResultSet::new();
    for (id, q) in &queries {
        results.insert(id.clone(), search(&index, q, mode, n, pp.as_ref())?);
    }
    let mut report = match args.task {
        Task::Ir => eval_ir(&results, &gt, &config.search.top_n)?,
        Task::Ps => eval_ps(&results, &gt, &config.search.top_n, config.search.ps_iou)?,
    };
    report.mode = Some(mode);
    let plain: Vec<Query> = queries.into_iter().map(|(_, q)| q).collect();
    report.timing = Some(benchmark(&index, &plain, mode, n)?);

    eprint!("{}", report.table());
    let mut out = output(args.out.as_deref())?;
    serde_json::to_writer_pretty(&mut out, &report)?;
    out.write_all(b"\n")?;
    out.flush()?;
    Ok(())
}

#[derive(Serialize)]
struct BenchRow {
    mode: Mode,
    #[serde(flatten)]
    timing: docspot::eval::TimingStats,
}

#[derive(Serialize)]
struct BenchReport {
    rows: Vec<BenchRow>,
    storage: docspot::index::StorageReport,
    float_gib: f64,
    binary_gib: f64,
}

pub fn cmd_bench(args: &BenchArgs, config: &mut Config) -> CmdResult {
    let mut so = io::stdout().lock();
    config.validate()?;
    if args.modes.is_empty() {
        return Err(Failure::usage("--modes needs at least one mode"));
    }
    let index = load_index(&args.index)?;
    let queries: Vec<Query> = if let Some(gt) = &args.gt {
        let gt = GroundTruth::load(gt)?;
        gt_queries(&index, &gt)?.into_iter().map(|(_, q)| q).collect()
    } else if let Some(dir) = &args.queries {
        require_dir(dir, "query directory")?;
        image_queries(std::slice::from_ref(dir))?.into_iter().map(|(_, q)| q).collect()
    } else {
        let count = args.sample.min(index.len()).max(1);
        let dims = index.dims();
        let step = index.len() / count;
        (0..count)
            .map(|i| {
                let at = i * step;
                Ok(Query::Vector(FeatureVector::new(index.ranking_features()[at * dims..(at + 1) * dims].to_vec())?))
            })
            .collect::<Result<_, Failure>>()?
    };
    let mut rows = Vec::new();
    for &mode in &args.modes {
        rows.push(BenchRow { mode, timing: benchmark(&index, &queries, mode, args.n as usize)? });
    }
    let storage = index.storage_report();
    if args.json {
        let report = BenchReport { rows, storage, float_gib: storage.float_gib(), binary_gib: storage.binary_gib() };
        writeln!(so, "{}", serde_json::to_string_pretty(&report)?)?;
        return Ok(());
    }
    writeln!(so, "{:<10} {:>7} {:>12} {:>10} {:>12} {:>10}", "mode", "queries", "extract ms", "std", "scan ms", "std")?;
    for r in &rows {
        let t = &r.timing;
        writeln!(
            so,
            "{:<10} {:>7} {:>12.3} {:>10.3} {:>12.3} {:>10.3}",
            r.mode.as_str(),
            t.queries,
            t.extract_mean_ms,
            t.extract_std_ms,
            t.scan_mean_ms,
            t.scan_std_ms
        )?;
    }
    writeln!(so)?;
    writeln!(
        so,
        "{:<10} {:>10} {:>6} {:>14} {:>14} {:>7}",
        "storage", "records", "dims", "float GiB", "binary GiB", "ratio"
    )?;
    writeln!(
        so,
        "{:<10} {:>10} {:>6} {:>14.6} {:>14.6} {:>7.1}",
        "",
        storage.records,
        storage.dims,
        storage.float_gib(),
        storage.binary_gib(),
        storage.ratio
    )?;
    Ok(())
}

pub fn cmd_synth(args: &SynthArgs, config: &mut Config) -> CmdResult {
    let mut so = io::stdout().lock();
    let s = &mut config.synth;
    if let Some(v) = args.pages {
        s.page_count = v;
    }
    if let Some(v) = args.plants {
        s.plants_per_page = v;
    }
    if let Some(v) = args.seed {
        s.seed = v;
    }
    if let Some(v) = args.noise {
        s.noise = v;
    }
    if let Some(v) = args.width {
        s.width = v;
    }
    if let Some(v) = args.height {
        s.height = v;
    }
    if let Some(v) = args.glyph_size {
        s.glyph_size = v;
    }
    config.validate()?;
    let corpus = generate(&config.synth)?;
    corpus.write(&args.out)?;
    writeln!(
        so,
        "wrote {} pages, {} queries, {} occurrences to {}",
        corpus.pages.len(),
        corpus.queries.len(),
        corpus.occurrence_count(),
        args.out.display()
    )?;
    Ok(())
}
