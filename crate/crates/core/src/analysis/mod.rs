//! Behavioral analyses over finished runs: λ histograms and medians,
//! embedding dumps with Isomap/PCA projections, and the layer-placement
//! sweep.

pub mod isomap;
pub mod spectral;

use std::fmt::Write as _;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{ParamStore, Scalar, Tape};
use crate::config::{derive_seed, seed_tags, Config};
use crate::corpus::{LabeledExample, Vocabulary};
use crate::encoder::Encoder;
use crate::error::{Error, Result};
use crate::oommix::{mix_embeddings, propagate, sample_lambda, ContextualEmbedding, MixModel};
use crate::trainer::{argmax_class, train, Sinks};

// ── λ log ───────────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy)]
pub struct LambdaRecord {
    pub step: u64,
    pub alpha: f64,
    pub delta: f64,
    pub gamma: f64,
    pub lambda: f64,
    pub l_c: f64,
    pub l_g: f64,
    pub l_d: f64,
    pub e: f64,
}

/// Per-step mixing records in training order.
#[derive(Debug, Clone)]
pub struct LambdaLog {
    pub records: Vec<LambdaRecord>,
}

pub const LAMBDA_HEADER: &str = "step,alpha,delta,gamma,lambda,l_c,l_g,l_d,e";

impl LambdaLog {
    pub fn from_records(records: Vec<LambdaRecord>) -> Result<LambdaLog> {
        for (i, pair) in records.windows(2).enumerate() {
            if pair[1].step < pair[0].step {
                return Err(Error::Analysis(format!("λ log steps decrease at record {}", i + 1)));
            }
        }
        for (i, r) in records.iter().enumerate() {
            if r.gamma.is_finite() {
                let rebuilt = r.alpha + r.gamma * r.delta;
                if (rebuilt - r.lambda).abs() > 1e-6 {
                    return Err(Error::Analysis(format!(
                        "record {}: λ {} does not match α+γΔ = {}",
                        i, r.lambda, rebuilt
                    )));
                }
            }
        }
        Ok(LambdaLog { records })
    }

    pub fn load(path: &Path) -> Result<LambdaLog> {
        let mut reader =
            csv::ReaderBuilder::new().has_headers(true).from_path(path).map_err(csv_err)?;
        let head = reader.headers().map_err(csv_err)?.iter().collect::<Vec<_>>().join(",");
        if head != LAMBDA_HEADER {
            return Err(Error::Analysis(format!("unexpected λ log header {:?}", head)));
        }
        let mut records = Vec::new();
        for row in reader.records() {
            let row = row.map_err(csv_err)?;
            if row.len() != 9 {
                return Err(Error::Analysis(format!("λ log row has {} fields", row.len())));
            }
            let num = |i: usize| -> Result<f64> {
                row[i].parse::<f64>().map_err(|_| {
                    Error::Analysis(format!("λ log field {:?} is not a number", &row[i]))
                })
            };
            records.push(LambdaRecord {
                step: row[0]
                    .parse::<u64>()
                    .map_err(|_| Error::Analysis(format!("bad step {:?}", &row[0])))?,
                alpha: num(1)?,
                delta: num(2)?,
                gamma: num(3)?,
                lambda: num(4)?,
                l_c: num(5)?,
                l_g: num(6)?,
                l_d: num(7)?,
                e: num(8)?,
            });
        }
        LambdaLog::from_records(records)
    }

    /// First and second training phases, split at the midpoint step.
    pub fn phases(&self) -> (&[LambdaRecord], &[LambdaRecord]) {
        if self.records.is_empty() {
            return (&[], &[]);
        }
        let lo = self.records.first().unwrap().step as f64;
        let hi = self.records.last().unwrap().step as f64;
        let mid = 0.5 * (lo + hi);
        let cut = self.records.partition_point(|r| (r.step as f64) <= mid);
        self.records.split_at(cut)
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::Analysis(format!("csv: {}", e))
}

/// Per-phase histogram of λ over `bins` equal cells spanning [0, 1].
pub fn lambda_histogram(log: &LambdaLog, bins: usize) -> Result<[Vec<u64>; 2]> {
    if log.records.is_empty() {
        return Err(Error::Analysis("λ histogram needs a nonempty log".into()));
    }
    if bins == 0 {
        return Err(Error::Analysis("histogram needs at least one bin".into()));
    }
    let (first, second) = log.phases();
    let mut out = [vec![0u64; bins], vec![0u64; bins]];
    for (phase, records) in [first, second].into_iter().enumerate() {
        for r in records {
            let cell = ((r.lambda * bins as f64).floor() as i64).clamp(0, bins as i64 - 1);
            out[phase][cell as usize] += 1;
        }
    }
    Ok(out)
}

/// Exact median of λ over one phase (0 or 1).
pub fn median_lambda(log: &LambdaLog, phase: usize) -> Result<f64> {
    let (first, second) = log.phases();
    let records = match phase {
        0 => first,
        1 => second,
        other => return Err(Error::Analysis(format!("phase {} is not 0 or 1", other))),
    };
    if records.is_empty() {
        return Err(Error::Analysis(format!("phase {} is empty", phase)));
    }
    let mut lams: Vec<f64> = records.iter().map(|r| r.lambda).collect();
    lams.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = lams.len();
    Ok(if n % 2 == 1 { lams[n / 2] } else { 0.5 * (lams[n / 2 - 1] + lams[n / 2]) })
}

pub fn render_histogram_csv(hist: &[Vec<u64>; 2], bins: usize) -> String {
    let mut out = String::from("phase,bin_low,bin_high,count\n");
    for (phase, counts) in hist.iter().enumerate() {
        for (b, &c) in counts.iter().enumerate() {
            let lo = b as f64 / bins as f64;
            let hi = (b + 1) as f64 / bins as f64;
            writeln!(out, "{},{},{},{}", phase, lo, hi, c).unwrap();
        }
    }
    out
}

pub fn parse_histogram_csv(text: &str) -> Result<Vec<(usize, f64, f64, u64)>> {
    let mut lines = text.lines();
    match lines.next() {
        Some("phase,bin_low,bin_high,count") => {}
        other => return Err(Error::Analysis(format!("bad histogram header {:?}", other))),
    }
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        let parts: Vec<&str> = line.split(',').collect();
        if parts.len() != 4 {
            return Err(Error::Analysis(format!("histogram row {} malformed", i + 1)));
        }
        let bad = |what: &str| Error::Analysis(format!("histogram row {}: bad {}", i + 1, what));
        rows.push((
            parts[0].parse().map_err(|_| bad("phase"))?,
            parts[1].parse().map_err(|_| bad("bin_low"))?,
            parts[2].parse().map_err(|_| bad("bin_high"))?,
            parts[3].parse().map_err(|_| bad("count"))?,
        ));
    }
    Ok(rows)
}

// ── embedding dumps ─────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PointTag {
    Actual,
    Generated,
}

impl PointTag {
    pub fn name(self) -> &'static str {
        match self {
            PointTag::Actual => "actual",
            PointTag::Generated => "generated",
        }
    }
}

#[derive(Debug, Clone)]
pub struct DumpPoint {
    pub tag: PointTag,
    /// True class for actual points, argmax prediction for generated.
    pub class: usize,
    pub vector: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct EmbeddingDump {
    pub dim: usize,
    pub points: Vec<DumpPoint>,
}

/// Sentence embeddings (mean-pooled last layer) for every example, plus
/// `n_pairs` generator mixes propagated to the last layer, all in
/// evaluation mode.
pub fn dump_embeddings<T: Scalar>(
    store: &ParamStore<T>,
    enc: &Encoder,
    mix: Option<&MixModel>,
    vocab: &Vocabulary,
    examples: &[LabeledExample],
    n_pairs: usize,
    seed: u64,
) -> Result<EmbeddingDump> {
    if examples.len() < 2 && n_pairs > 0 {
        return Err(Error::Analysis("generated pairs need at least two examples".into()));
    }
    let model = match (mix, n_pairs) {
        (_, 0) => None,
        (Some(m), _) => Some(m),
        (None, _) => {
            return Err(Error::Analysis("generated pairs need a generator (oommix strategy)".into()))
        }
    };
    let seqs: Vec<crate::corpus::TokenSequence> =
        examples.iter().map(|e| vocab.encode(&e.text, enc.cfg.seq_len)).collect();
    let mut points = Vec::with_capacity(examples.len() + n_pairs);

    for (chunk, exs) in seqs.chunks(64).zip(examples.chunks(64)) {
        let mut tape: Tape<T> = Tape::eval();
        let binding = store.bind(&mut tape)?;
        for (s, ex) in chunk.iter().zip(exs) {
            let (ids, mask) = s.trimmed(0);
            let h0 = enc.embed(&mut tape, &binding, ids, mask)?;
            let hm = enc.forward_layers(&mut tape, &binding, h0, mask, 0, enc.cfg.layers)?;
            let pooled = enc.pool(&mut tape, hm, mask)?;
            let vector = tape.value(pooled).iter().map(|&v| Scalar::to_f64(v)).collect();
            points.push(DumpPoint { tag: PointTag::Actual, class: ex.label, vector });
        }
    }

    if let Some(model) = model {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, seed_tags::ANALYSIS));
        for _ in 0..n_pairs {
            let i = rng.random_range(0..examples.len());
            let mut j = rng.random_range(0..examples.len() - 1);
            if j >= i {
                j += 1;
            }
            let mut tape: Tape<T> = Tape::eval();
            let binding = store.bind(&mut tape)?;
            let (ids_i, mask_i) = seqs[i].trimmed(seqs[j].true_len);
            let (ids_j, mask_j) = seqs[j].trimmed(seqs[i].true_len);
            let hi = embed_to(&mut tape, &binding, enc, ids_i, mask_i, model.m_g)?;
            let hj = embed_to(&mut tape, &binding, enc, ids_j, mask_j, model.m_g)?;
            let (alpha, delta) = model.generator_interval(&mut tape, &binding, &hi, &hj)?;
            let (_gamma, lambda) = sample_lambda(&mut tape, alpha, delta, &mut rng)?;
            let mixed = mix_embeddings(&mut tape, &hi, &hj, lambda)?;
            let fin = propagate(&mut tape, &binding, enc, mixed, enc.cfg.layers)?;
            let pooled = enc.pool(&mut tape, fin.node, &fin.mask)?;
            let probs = enc.classify_pooled(&mut tape, &binding, pooled)?;
            let class = argmax_class(tape.value(probs));
            let vector = tape.value(pooled).iter().map(|&v| Scalar::to_f64(v)).collect();
            points.push(DumpPoint { tag: PointTag::Generated, class, vector });
        }
    }

    let dim = points.first().map(|p| p.vector.len()).unwrap_or(0);
    if points.iter().any(|p| p.vector.len() != dim) {
        return Err(Error::Analysis("dump vectors disagree on dimension".into()));
    }
    Ok(EmbeddingDump { dim, points })
}

fn embed_to<T: Scalar>(
    tape: &mut Tape<T>,
    binding: &crate::autodiff::Binding,
    enc: &Encoder,
    ids: &[usize],
    mask: &[u8],
    layer: usize,
) -> Result<ContextualEmbedding> {
    let h0 = enc.embed(tape, binding, ids, mask)?;
    let e0 = ContextualEmbedding { node: h0, layer: 0, mask: mask.to_vec() };
    propagate(tape, binding, enc, e0, layer)
}

pub fn render_dump_csv(dump: &EmbeddingDump) -> String {
    let mut out = String::from("tag,class");
    for i in 1..=dump.dim {
        write!(out, ",v_{}", i).unwrap();
    }
    out.push('\n');
    for p in &dump.points {
        write!(out, "{},{}", p.tag.name(), p.class).unwrap();
        for v in &p.vector {
            write!(out, ",{}", v).unwrap();
        }
        out.push('\n');
    }
    out
}

/// 3-D Isomap projection rows aligned with the dump's kept points.
pub fn render_projection_csv(dump: &EmbeddingDump, proj: &isomap::IsomapOutput) -> String {
    let mut out = String::from("tag,class,x,y,z\n");
    for (row, &idx) in proj.kept.iter().enumerate() {
        let p = &dump.points[idx];
        let c = &proj.coords[row];
        let coord = |m: usize| c.get(m).copied().unwrap_or(0.0);
        writeln!(out, "{},{},{},{},{}", p.tag.name(), p.class, coord(0), coord(1), coord(2))
            .unwrap();
    }
    out
}

pub struct ProjectionRow {
    pub tag: String,
    pub class: usize,
    pub xyz: [f64; 3],
}

pub fn parse_projection_csv(text: &str) -> Result<Vec<ProjectionRow>> {
    let mut lines = text.lines();
    match lines.next() {
        Some("tag,class,x,y,z") => {}
        other => return Err(Error::Analysis(format!("bad projection header {:?}", other))),
    }
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        let parts: Vec<&str> = line.split(',').collect();
        if parts.len() != 5 {
            return Err(Error::Analysis(format!("projection row {} malformed", i + 1)));
        }
        let bad = |what: &str| Error::Analysis(format!("projection row {}: bad {}", i + 1, what));
        rows.push(ProjectionRow {
            tag: parts[0].to_string(),
            class: parts[1].parse().map_err(|_| bad("class"))?,
            xyz: [
                parts[2].parse().map_err(|_| bad("x"))?,
                parts[3].parse().map_err(|_| bad("y"))?,
                parts[4].parse().map_err(|_| bad("z"))?,
            ],
        });
    }
    Ok(rows)
}

// ── layer sweep ─────────────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct SweepCell {
    pub m_g: usize,
    pub m_d: usize,
    /// Test accuracy per seed; empty when the pair was skipped.
    pub accs: Vec<f64>,
    pub mean: f64,
    pub std: f64,
    pub skipped: bool,
}

/// One training run per valid (m_g, m_d) pair per seed. Pairs with
/// m_g > m_d are skipped with a warning; equal pairs run only when
/// explicitly requested.
pub fn layer_sweep(
    base: &Config,
    m_gs: &[usize],
    m_ds: &[usize],
    seeds: &[u64],
    include_equal: bool,
    threads: usize,
) -> Result<Vec<SweepCell>> {
    if seeds.is_empty() || m_gs.is_empty() || m_ds.is_empty() {
        return Err(Error::Analysis("sweep needs nonempty ranges and seeds".into()));
    }
    let mut cells: Vec<SweepCell> = Vec::new();
    let mut runnable: Vec<usize> = Vec::new();
    for &g in m_gs {
        for &d in m_ds {
            let valid = g < d || (g == d && include_equal);
            if !valid {
                eprintln!("sweep: skipping m_g={} m_d={} (needs m_g < m_d)", g, d);
            } else {
                runnable.push(cells.len());
            }
            cells.push(SweepCell {
                m_g: g,
                m_d: d,
                accs: Vec::new(),
                mean: f64::NAN,
                std: f64::NAN,
                skipped: !valid,
            });
        }
    }

    let results: Mutex<Vec<Option<Result<Vec<f64>>>>> =
        Mutex::new((0..runnable.len()).map(|_| None).collect());
    let cursor = AtomicUsize::new(0);
    let workers = threads.max(1).min(runnable.len().max(1));
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let slot = cursor.fetch_add(1, Ordering::SeqCst);
                if slot >= runnable.len() {
                    break;
                }
                let cell = &cells[runnable[slot]];
                let outcome = run_cell(base, cell.m_g, cell.m_d, seeds);
                results.lock().unwrap()[slot] = Some(outcome);
            });
        }
    });

    let mut results = results.into_inner().unwrap();
    for (slot, &idx) in runnable.iter().enumerate() {
        let accs = results[slot]
            .take()
            .expect("sweep worker left a cell unfilled")?;
        let n = accs.len() as f64;
        let mean = accs.iter().sum::<f64>() / n;
        let var = accs.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / n;
        let cell = &mut cells[idx];
        cell.mean = mean;
        cell.std = var.sqrt();
        cell.accs = accs;
    }
    Ok(cells)
}

fn run_cell(base: &Config, m_g: usize, m_d: usize, seeds: &[u64]) -> Result<Vec<f64>> {
    let mut accs = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let mut cfg = base.clone();
        cfg.seed = seed;
        cfg.mix.m_g = m_g as i64;
        cfg.mix.m_d = m_d as i64;
        cfg.mix.allow_equal = m_g == m_d;
        let data = crate::corpus::prepare(&cfg, seed)?;
        let trained = train::<f32>(&cfg, &data, &Sinks::default())?;
        accs.push(trained.report.test_acc);
    }
    Ok(accs)
}

pub fn render_sweep_csv(cells: &[SweepCell]) -> String {
    let mut out = String::from("m_g,m_d,mean,std,seeds,status\n");
    for c in cells {
        writeln!(
            out,
            "{},{},{},{},{},{}",
            c.m_g,
            c.m_d,
            c.mean,
            c.std,
            c.accs.len(),
            if c.skipped { "skipped" } else { "ran" }
        )
        .unwrap();
    }
    out
}

pub struct SweepRow {
    pub m_g: usize,
    pub m_d: usize,
    pub mean: f64,
    pub std: f64,
    pub skipped: bool,
}

pub fn parse_sweep_csv(text: &str) -> Result<Vec<SweepRow>> {
    let mut lines = text.lines();
    match lines.next() {
        Some("m_g,m_d,mean,std,seeds,status") => {}
        other => return Err(Error::Analysis(format!("bad sweep header {:?}", other))),
    }
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        let parts: Vec<&str> = line.split(',').collect();
        if parts.len() != 6 {
            return Err(Error::Analysis(format!("sweep row {} malformed", i + 1)));
        }
        let bad = |what: &str| Error::Analysis(format!("sweep row {}: bad {}", i + 1, what));
        rows.push(SweepRow {
            m_g: parts[0].parse().map_err(|_| bad("m_g"))?,
            m_d: parts[1].parse().map_err(|_| bad("m_d"))?,
            mean: parts[2].parse().map_err(|_| bad("mean"))?,
            std: parts[3].parse().map_err(|_| bad("std"))?,
            skipped: parts[5] == "skipped",
        });
    }
    Ok(rows)
}

/// Trailing-window mean of the discriminator loss column.
pub fn final_running_ld(log: &LambdaLog, window: usize) -> Result<f64> {
    if log.records.is_empty() {
        return Err(Error::Analysis("λ log is empty".into()));
    }
    let w = window.max(1).min(log.records.len());
    let tail = &log.records[log.records.len() - w..];
    Ok(tail.iter().map(|r| r.l_d).sum::<f64>() / w as f64)
}

/// Actual-point matrix of a dump, optionally truncated.
pub fn actual_points(dump: &EmbeddingDump, cap: usize) -> Vec<Vec<f64>> {
    let mut out: Vec<Vec<f64>> = dump
        .points
        .iter()
        .filter(|p| p.tag == PointTag::Actual)
        .map(|p| p.vector.clone())
        .collect();
    if cap > 0 && out.len() > cap {
        out.truncate(cap);
    }
    out
}

/// 3-D Isomap over a dump (actual points capped, every generated point),
/// with kept indices remapped to dump positions so the projection CSV
/// lines up with the right tags and classes.
pub fn isomap_dump(dump: &EmbeddingDump, cap: usize, k: usize) -> Result<isomap::IsomapOutput> {
    let (idx, pts) = isomap_inputs(dump, cap);
    let mut proj = isomap::isomap(&pts, k, 3)?;
    for j in proj.kept.iter_mut() {
        *j = idx[*j];
    }
    Ok(proj)
}

/// Points fed to Isomap: capped actual points followed by every
/// generated point, with original dump indices.
pub fn isomap_inputs(dump: &EmbeddingDump, cap: usize) -> (Vec<usize>, Vec<Vec<f64>>) {
    let mut idx = Vec::new();
    let mut pts = Vec::new();
    let mut actual_seen = 0usize;
    for (i, p) in dump.points.iter().enumerate() {
        if p.tag == PointTag::Actual {
            if cap > 0 && actual_seen >= cap {
                continue;
            }
            actual_seen += 1;
        }
        idx.push(i);
        pts.push(p.vector.clone());
    }
    (idx, pts)
}
