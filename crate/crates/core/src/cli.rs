//! Batch commands behind the `httm` binary: scene generation, layout sweeps,
//! block-merging property checks and multiply-add reports.

use std::fmt::Write as _;
use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use thiserror::Error;

use crate::config::{self, Config, ConfigError, GridLayout};
use crate::merge_engine::{HttmConfig, MergeSettings};
use crate::oracle::{
    blocked_oracle_selection, block_best_matches, check_submatrix, global_merge_oracle, quality_metric, OracleError,
    Perturbation, DEFAULT_QUANTILE, MAX_ORACLE_TOKENS,
};
use crate::reorder::{divisor_layouts, BlockLayout};
use crate::similarity::{dst_stride, matching_cost, partition_src_dst, CostLayout, PartitionMode};
use crate::tensors::{save_dump, TensorError, TokenTensor};
use crate::toy_vggt::{gen_scene, run_stack, StackMerge, ToyError};

pub const SWEEP_SCHEMA: &str = "# schema=httm-sweep/1";

pub const SWEEP_HEADER: [&str; 13] = [
    "n_s",
    "n_t",
    "n_b",
    "q_ratio",
    "kv_ratio",
    "d",
    "quality_q10",
    "quality_mean",
    "matching_madds",
    "attention_madds",
    "end_to_end_rel_error",
    "seed",
    "status",
];

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Oracle(#[from] OracleError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Toy(#[from] ToyError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
}

impl CliError {
    /// Process exit code. Property failures are not errors; they exit 1
    /// through the report.
    pub fn exit_code(&self) -> i32 {
        2
    }
}

// ---------------------------------------------------------------------------
// gen
// ---------------------------------------------------------------------------

/// Generates the configured scene and writes it as a single-head dump.
pub fn cmd_gen(cfg: &Config, out: &Path) -> Result<String, CliError> {
    let spec = config::scene_spec(cfg)?;
    cfg.finish()?;
    let scene = gen_scene(&spec)?;
    let t = scene.as_tensor();
    save_dump(&t, out)?;
    Ok(format!(
        "wrote {}: {} frames x {} tokens, d_model {}, N = {}\n",
        out.display(),
        spec.num_frames,
        spec.frame_len,
        spec.d_model,
        t.seq_len()
    ))
}

// ---------------------------------------------------------------------------
// sweep
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepMetrics {
    /// `None` when nothing was merged.
    pub quality_q10: Option<f64>,
    pub quality_mean: Option<f64>,
    pub matching_madds: u64,
    pub attention_madds: u64,
    pub end_to_end_rel_error: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRecord {
    pub n_s: usize,
    pub n_t: usize,
    pub n_b: usize,
    pub q_ratio: f64,
    pub kv_ratio: f64,
    pub d: f64,
    pub seed: u64,
    /// `Err(reason)` for skipped grid points.
    pub result: Result<SweepMetrics, String>,
}

impl SweepRecord {
    pub fn status(&self) -> String {
        match &self.result {
            Ok(_) => "ok".into(),
            Err(reason) => format!("skipped:{reason}"),
        }
    }

    fn fields(&self) -> Vec<String> {
        let opt = |x: Option<f64>| x.map(|v| v.to_string()).unwrap_or_default();
        let mut f = vec![
            self.n_s.to_string(),
            self.n_t.to_string(),
            self.n_b.to_string(),
            self.q_ratio.to_string(),
            self.kv_ratio.to_string(),
            self.d.to_string(),
        ];
        match &self.result {
            Ok(m) => f.extend([
                opt(m.quality_q10),
                opt(m.quality_mean),
                m.matching_madds.to_string(),
                m.attention_madds.to_string(),
                m.end_to_end_rel_error.to_string(),
            ]),
            Err(_) => f.extend(std::iter::repeat_n(String::new(), 5)),
        }
        f.push(self.seed.to_string());
        f.push(self.status());
        f
    }
}

#[derive(Debug, Clone)]
struct SweepPlan {
    spec: crate::toy_vggt::SceneSpec,
    stack: crate::toy_vggt::StackConfig,
    layouts: Vec<GridLayout>,
    q_ratios: Vec<f64>,
    kv_ratios: Vec<f64>,
    ds: Vec<f64>,
    dst_ratio: Option<f64>,
    random_partition: bool,
    anchor: bool,
    seeds: u64,
}

fn sweep_plan(cfg: &Config, seeds_override: Option<u64>) -> Result<SweepPlan, CliError> {
    let spec = config::scene_spec(cfg)?;
    let stack = config::stack_config(cfg)?;
    let layouts: Vec<GridLayout> = cfg.list("layout")?;
    let q_ratios: Vec<f64> = cfg.list("q_ratio")?;
    let mut kv_ratios: Vec<f64> = cfg.list("kv_ratio")?;
    let mut ds: Vec<f64> = cfg.list("d")?;
    if kv_ratios.is_empty() {
        kv_ratios.push(0.0);
    }
    if ds.is_empty() {
        ds.push(0.0);
    }
    let dst_ratio = cfg.opt("dst_ratio")?;
    let random_partition = matches!(config::partition_mode(cfg, 0)?, PartitionMode::Random { .. });
    let anchor = cfg.flag("anchor", false)?;
    let seeds = cfg.get_or("seeds", 1u64)?;
    cfg.finish()?;
    if layouts.is_empty() || q_ratios.is_empty() {
        return Err(ConfigError::Invalid("sweep needs at least one `layout` and one `q_ratio`".into()).into());
    }
    for (name, v) in q_ratios.iter().map(|v| ("q_ratio", v)).chain(kv_ratios.iter().map(|v| ("kv_ratio", v))).chain(ds.iter().map(|v| ("d", v))) {
        if !(0.0..1.0).contains(v) {
            return Err(ConfigError::Invalid(format!("{name} = {v} outside [0, 1)")).into());
        }
    }
    let seeds = seeds_override.unwrap_or(seeds);
    if seeds == 0 {
        return Err(ConfigError::Invalid("seeds must be positive".into()).into());
    }
    Ok(SweepPlan { spec, stack, layouts, q_ratios, kv_ratios, ds, dst_ratio, random_partition, anchor, seeds })
}

fn sweep_point(plan: &SweepPlan, g: GridLayout, q: f64, kv: f64, d: f64, i: u64) -> SweepRecord {
    let mut spec = plan.spec.clone();
    spec.seed = plan.spec.seed + i;
    let mut stack = plan.stack.clone();
    stack.weights_seed = plan.stack.weights_seed + i;
    let result = (|| -> Result<SweepMetrics, String> {
        let layout = BlockLayout::build(spec.frame_len, spec.num_frames, g.n_s, g.n_t).map_err(|e| e.to_string())?;
        let mode = if plan.random_partition { PartitionMode::Random { seed: spec.seed } } else { PartitionMode::Stride };
        let settings = |ratio: f64| {
            let s = MergeSettings::new(ratio).anchored(plan.anchor).with_mode(mode);
            match plan.dst_ratio {
                Some(a) => s.with_dst_ratio(a),
                None => s,
            }
        };
        let config = HttmConfig { q: settings(q), kv: settings(kv), outlier_fraction: d };
        let scene = gen_scene(&spec).map_err(|e| e.to_string())?;
        let run = run_stack(&scene.tokens, spec.frame_len, &stack, Some(&StackMerge { layout, config }))
            .map_err(|e| e.to_string())?;
        let diags: Vec<_> = run.layers.iter().filter_map(|l| l.merge_diagnostics.as_ref()).collect();
        let scores: Vec<f32> = diags.first().map(|d| d.q_plans.iter().flat_map(|p| p.selected_scores()).collect()).unwrap_or_default();
        let quality_mean =
            (!scores.is_empty()).then(|| scores.iter().map(|&s| s as f64).sum::<f64>() / scores.len() as f64);
        Ok(SweepMetrics {
            quality_q10: quality_metric(&scores, DEFAULT_QUANTILE).ok(),
            quality_mean,
            matching_madds: diags.iter().map(|d| d.matching_madds).sum(),
            attention_madds: diags.iter().map(|d| d.attention_madds).sum(),
            end_to_end_rel_error: run.end_to_end_error().unwrap_or(0.0),
        })
    })();
    SweepRecord { n_s: g.n_s, n_t: g.n_t, n_b: g.n_s * g.n_t, q_ratio: q, kv_ratio: kv, d, seed: spec.seed, result }
}

/// Runs every grid point for every seed. Records come back in grid order:
/// layout, q_ratio, kv_ratio, d, then seed.
pub fn run_sweep(cfg: &Config, seeds_override: Option<u64>) -> Result<Vec<SweepRecord>, CliError> {
    let plan = sweep_plan(cfg, seeds_override)?;
    let mut points = Vec::new();
    for &g in &plan.layouts {
        for &q in &plan.q_ratios {
            for &kv in &plan.kv_ratios {
                for &d in &plan.ds {
                    for i in 0..plan.seeds {
                        points.push((g, q, kv, d, i));
                    }
                }
            }
        }
    }
    Ok(points.into_par_iter().map(|(g, q, kv, d, i)| sweep_point(&plan, g, q, kv, d, i)).collect())
}

pub fn write_sweep_csv<W: Write>(records: &[SweepRecord], mut out: W) -> Result<(), CliError> {
    writeln!(out, "{SWEEP_SCHEMA}")?;
    let mut w = csv::Writer::from_writer(out);
    w.write_record(SWEEP_HEADER)?;
    for r in records {
        w.write_record(r.fields())?;
    }
    w.flush()?;
    Ok(())
}

/// Parses a sweep CSV back into records.
pub fn read_sweep_csv(text: &str) -> Result<Vec<SweepRecord>, CliError> {
    let body = text.strip_prefix(SWEEP_SCHEMA).ok_or_else(|| ConfigError::Invalid("missing sweep schema line".into()))?;
    let mut r = csv::Reader::from_reader(body.trim_start().as_bytes());
    let bad = |what: &str| CliError::Config(ConfigError::Invalid(format!("malformed sweep row: {what}")));
    let mut out = Vec::new();
    for row in r.records() {
        let row = row?;
        let num = |i: usize| row.get(i).ok_or_else(|| bad(SWEEP_HEADER[i]));
        let int = |i: usize| num(i)?.parse::<u64>().map_err(|_| bad(SWEEP_HEADER[i]));
        let real = |i: usize| num(i)?.parse::<f64>().map_err(|_| bad(SWEEP_HEADER[i]));
        let opt = |i: usize| -> Result<Option<f64>, CliError> {
            let s = num(i)?;
            if s.is_empty() { Ok(None) } else { s.parse().map(Some).map_err(|_| bad(SWEEP_HEADER[i])) }
        };
        let status = num(12)?;
        let result = if status == "ok" {
            Ok(SweepMetrics {
                quality_q10: opt(6)?,
                quality_mean: opt(7)?,
                matching_madds: int(8)?,
                attention_madds: int(9)?,
                end_to_end_rel_error: real(10)?,
            })
        } else {
            Err(status.strip_prefix("skipped:").unwrap_or(status).to_string())
        };
        out.push(SweepRecord {
            n_s: int(0)? as usize,
            n_t: int(1)? as usize,
            n_b: int(2)? as usize,
            q_ratio: real(3)?,
            kv_ratio: real(4)?,
            d: real(5)?,
            seed: int(11)?,
            result,
        });
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// check-props
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct PropertyTally {
    pub name: &'static str,
    pub checked: usize,
    pub failed: usize,
}

impl PropertyTally {
    fn record(&mut self, ok: bool) {
        self.checked += 1;
        if !ok {
            self.failed += 1;
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PropsReport {
    pub instances: usize,
    pub properties: Vec<PropertyTally>,
}

impl PropsReport {
    pub fn passed(&self) -> bool {
        self.properties.iter().all(|p| p.failed == 0)
    }

    pub fn render(&self) -> String {
        let mut s = format!("{} instances\n", self.instances);
        for p in &self.properties {
            let verdict = if p.failed == 0 { "PASS" } else { "FAIL" };
            let _ = writeln!(s, "{verdict} {:<28} {} checked, {} failed", p.name, p.checked, p.failed);
        }
        s
    }
}

fn gaussian_tokens(n: usize, d: usize, frame_len: usize, seed: u64) -> TokenTensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..n * d).map(|_| StandardNormal.sample(&mut rng)).collect();
    TokenTensor::new(data, 1, n, d, frame_len).expect("shape")
}

/// Block `a` nests inside block `b` when both spans divide.
fn nested(a: (usize, usize), b: (usize, usize)) -> bool {
    a != b && b.0 % a.0 == 0 && b.1 % a.1 == 0
}

/// Checks the three block-merging propositions over seeded instances:
/// block similarity entries equal the global ones, blocked quality never
/// beats global quality, quality is non-decreasing under nesting and the
/// blocked matching cost is linear in the block size.
pub fn cmd_check_props(cfg: &Config, seeds_override: Option<u64>, mutate: bool) -> Result<PropsReport, CliError> {
    let num_frames: usize = cfg.get("num_frames")?;
    let frame_len: usize = cfg.get("frame_len")?;
    let head_dim: usize = cfg.get("head_dim")?;
    let instances: u64 = cfg.get_or("seeds", 10)?;
    let seed: u64 = cfg.get_or("seed", 0)?;
    let dst_ratio: f64 = cfg.get_or("dst_ratio", 0.25)?;
    let r_fraction: f64 = cfg.get_or("r_fraction", 0.5)?;
    let anchor = cfg.flag("anchor", false)?;
    let random = matches!(config::partition_mode(cfg, 0)?, PartitionMode::Random { .. });
    cfg.finish()?;
    let instances = seeds_override.unwrap_or(instances);
    let n = num_frames * frame_len;
    if n > MAX_ORACLE_TOKENS {
        return Err(OracleError::Guard { n, max: MAX_ORACLE_TOKENS }.into());
    }
    if n == 0 || head_dim == 0 {
        return Err(ConfigError::Invalid("num_frames, frame_len and head_dim must be positive".into()).into());
    }
    if !(0.0..=1.0).contains(&r_fraction) {
        return Err(ConfigError::Invalid(format!("r_fraction = {r_fraction} outside [0, 1]")).into());
    }
    let stride = dst_stride(dst_ratio).map_err(|e| ConfigError::Invalid(e.to_string()))?;
    let layouts = divisor_layouts(frame_len, num_frames);

    let per_instance: Vec<[PropertyTally; 3]> = (0..instances)
        .into_par_iter()
        .map(|i| -> Result<[PropertyTally; 3], CliError> {
            let s = seed + i;
            let tokens = gaussian_tokens(n, head_dim, frame_len, s);
            let mode = if random { PartitionMode::Random { seed: s } } else { PartitionMode::Stride };
            let partition = partition_src_dst(n, frame_len, dst_ratio, anchor, mode).map_err(OracleError::from)?;
            let head = tokens.head(0);
            let mut t = [
                PropertyTally { name: "submatrix", ..Default::default() },
                PropertyTally { name: "blocked<=global", ..Default::default() },
                PropertyTally { name: "nested-monotone+linear-cost", ..Default::default() },
            ];
            let built: Vec<BlockLayout> = layouts
                .iter()
                .map(|&(ns, nt)| BlockLayout::build(frame_len, num_frames, ns, nt).expect("divisor layout"))
                .collect();
            for (idx, layout) in built.iter().enumerate() {
                let perturb = (mutate && idx + 1 == built.len()).then_some(Perturbation { block: 0, delta: 1e-3 });
                t[0].record(check_submatrix(head, layout, &partition, perturb)?.holds);

                let available = block_best_matches(head, layout, &partition)?.len();
                let r = (r_fraction * available as f64).round() as usize;
                let blocked = blocked_oracle_selection(head, layout, &partition, r)?;
                let global = global_merge_oracle(head, &partition, r)?;
                t[1].record(blocked.quality <= global.quality);
            }
            for (a, la) in layouts.iter().zip(&built) {
                let available = block_best_matches(head, la, &partition)?.len();
                let r = (r_fraction * available as f64).round() as usize;
                let qa = blocked_oracle_selection(head, la, &partition, r)?.quality;
                for (b, lb) in layouts.iter().zip(&built) {
                    if !nested(*a, *b) {
                        continue;
                    }
                    let qb = blocked_oracle_selection(head, lb, &partition, r)?.quality;
                    let (nba, nbb) = (a.0 * a.1, b.0 * b.1);
                    let ca = matching_cost(n, head_dim, dst_ratio, CostLayout::Blocked { block_size: nba })
                        .map_err(OracleError::from)?;
                    let cb = matching_cost(n, head_dim, dst_ratio, CostLayout::Blocked { block_size: nbb })
                        .map_err(OracleError::from)?;
                    let exact = |nb: usize| (n * nb * head_dim * (stride - 1)) % (stride * stride) == 0;
                    let linear = !(exact(nba) && exact(nbb)) || ca as u128 * nbb as u128 == cb as u128 * nba as u128;
                    t[2].record(qb >= qa && linear);
                }
            }
            Ok(t)
        })
        .collect::<Result<_, _>>()?;

    let mut properties = vec![
        PropertyTally { name: "submatrix", ..Default::default() },
        PropertyTally { name: "blocked<=global", ..Default::default() },
        PropertyTally { name: "nested-monotone+linear-cost", ..Default::default() },
    ];
    for inst in per_instance {
        for (acc, t) in properties.iter_mut().zip(inst) {
            acc.checked += t.checked;
            acc.failed += t.failed;
        }
    }
    Ok(PropsReport { instances: instances as usize, properties })
}

// ---------------------------------------------------------------------------
// flops-report
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct FlopsReport {
    pub seq_len: usize,
    pub block_size: usize,
    pub num_heads: usize,
    pub head_dim: usize,
    pub num_global_layers: usize,
    /// Per head, Q and K matchings together.
    pub matching_global: u64,
    pub matching_blocked: u64,
    /// Reduced query and key lengths.
    pub m_q: usize,
    pub m_k: usize,
    /// Full and reduced attention multiply-adds for one layer, all heads.
    pub attention_full: u64,
    pub attention_reduced: u64,
}

impl FlopsReport {
    pub fn matching_ratio(&self) -> f64 {
        self.matching_global as f64 / self.matching_blocked as f64
    }

    /// `M_q·M_k / N²` as an exact fraction.
    pub fn qk_fraction(&self) -> (u128, u128) {
        (self.m_q as u128 * self.m_k as u128, self.seq_len as u128 * self.seq_len as u128)
    }

    /// Full attention over reduced attention plus blocked matching, one
    /// global layer.
    pub fn projected_speedup(&self) -> f64 {
        let merged = self.attention_reduced + self.num_heads as u64 * self.matching_blocked;
        self.attention_full as f64 / merged as f64
    }

    pub fn rows(&self) -> Vec<(&'static str, String)> {
        let (num, den) = self.qk_fraction();
        let layers = self.num_global_layers as u64;
        vec![
            ("seq_len", self.seq_len.to_string()),
            ("block_size", self.block_size.to_string()),
            ("num_heads", self.num_heads.to_string()),
            ("head_dim", self.head_dim.to_string()),
            ("num_global_layers", self.num_global_layers.to_string()),
            ("matching_madds_global_per_head", self.matching_global.to_string()),
            ("matching_madds_blocked_per_head", self.matching_blocked.to_string()),
            ("matching_ratio", format!("{:.6}", self.matching_ratio())),
            ("seq_len_over_block_size", format!("{:.6}", self.seq_len as f64 / self.block_size as f64)),
            ("reduced_q_len", self.m_q.to_string()),
            ("reduced_kv_len", self.m_k.to_string()),
            ("qk_fraction", format!("{:.6}", num as f64 / den as f64)),
            ("qk_fraction_exact", format!("{num}/{den}")),
            ("attention_madds_full_per_layer", self.attention_full.to_string()),
            ("attention_madds_reduced_per_layer", self.attention_reduced.to_string()),
            ("attention_madds_full_total", (self.attention_full * layers).to_string()),
            ("attention_madds_reduced_total", (self.attention_reduced * layers).to_string()),
            ("projected_speedup", format!("{:.4}", self.projected_speedup())),
        ]
    }

    pub fn render(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.rows() {
            let _ = writeln!(s, "{k:<36} {v}");
        }
        s
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<(), CliError> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["metric", "value"])?;
        for (k, v) in self.rows() {
            w.write_record([k, v.as_str()])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Cost arithmetic for one configuration. `q_merge` and `kv_merge` are merge
/// fractions; `d` restores that fraction of the queries, so the kept query
/// fraction is `1 − q_merge + d`.
pub fn flops_report(cfg: &Config) -> Result<FlopsReport, CliError> {
    let seq_len: usize = cfg.get("seq_len")?;
    let block_size: usize = cfg.get("block_size")?;
    let num_heads: usize = cfg.get("num_heads")?;
    let head_dim: usize = cfg.get("head_dim")?;
    let num_global_layers: usize = cfg.get_or("num_global_layers", 1)?;
    let q_merge: f64 = cfg.get("q_merge")?;
    let kv_merge: f64 = cfg.get("kv_merge")?;
    let d: f64 = cfg.get_or("d", 0.0)?;
    let q_dst: Option<f64> = cfg.opt("q_dst_ratio")?;
    let kv_dst: Option<f64> = cfg.opt("kv_dst_ratio")?;
    cfg.finish()?;
    for (name, v) in [("q_merge", q_merge), ("kv_merge", kv_merge), ("d", d)] {
        if !(0.0..1.0).contains(&v) {
            return Err(ConfigError::Invalid(format!("{name} = {v} outside [0, 1)")).into());
        }
    }
    if seq_len == 0 || head_dim == 0 || num_heads == 0 {
        return Err(ConfigError::Invalid("seq_len, num_heads and head_dim must be positive".into()).into());
    }
    let settings = |merge: f64, dst: Option<f64>| {
        let s = MergeSettings::new(merge);
        match dst {
            Some(a) => s.with_dst_ratio(a),
            None => s,
        }
    };
    let alpha_q = settings(q_merge, q_dst).resolved_dst_ratio();
    let alpha_k = settings(kv_merge, kv_dst).resolved_dst_ratio();
    let cost = |alpha: f64, layout| {
        matching_cost(seq_len, head_dim, alpha, layout).map_err(|e| CliError::Config(ConfigError::Invalid(e.to_string())))
    };
    let blocked = CostLayout::Blocked { block_size };
    let matching_global = cost(alpha_q, CostLayout::Global)? + cost(alpha_k, CostLayout::Global)?;
    let matching_blocked = cost(alpha_q, blocked)? + cost(alpha_k, blocked)?;
    let count = |f: f64| (f * seq_len as f64).round() as usize;
    let m_q = (seq_len - count(q_merge) + count(d)).min(seq_len);
    let m_k = seq_len - count(kv_merge);
    let per_head = |mq: usize, mk: usize| 2 * mq as u64 * mk as u64 * head_dim as u64;
    Ok(FlopsReport {
        seq_len,
        block_size,
        num_heads,
        head_dim,
        num_global_layers,
        matching_global,
        matching_blocked,
        m_q,
        m_k,
        attention_full: num_heads as u64 * per_head(seq_len, seq_len),
        attention_reduced: num_heads as u64 * per_head(m_q, m_k),
    })
}
