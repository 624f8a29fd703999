//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each and
//! exits non-zero if any fails.

mod common;

use std::path::PathBuf;
use std::time::Instant;

use common::{random_tensor, rel_frobenius};
use httm::cli::{flops_report, read_sweep_csv, run_sweep, write_sweep_csv, SweepRecord};
use httm::config::Config;
use httm::merge_engine::duplicate_rows;
use httm::oracle::{
    block_best_matches, blocked_oracle_selection, check_submatrix, fraction_in_blocks, global_merge_oracle,
};
use httm::reorder::divisor_layouts;
use httm::similarity::{matching_cost, partition_src_dst, CostLayout, PartitionMode};
use httm::toy_vggt::{gen_scene, run_stack, StackMerge};
use httm::{
    exact_attention, merged_attention, uniform_merge_baseline, BlockLayout, HttmConfig, SceneSpec, StackConfig,
    TokenTensor,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn configs_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn divisors(n: usize) -> Vec<usize> {
    (1..=n).filter(|d| n % d == 0).collect()
}

fn no_merge_identity() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst = 0f64;
    let mut largest = 0;
    for i in 0..50 {
        let h = rng.random_range(1..=8);
        let nf = rng.random_range(1..=8);
        let fl = rng.random_range(1..=2048 / nf);
        let d = [4, 8, 16][rng.random_range(0..3)];
        let n = fl * nf;
        largest = largest.max(n);
        let ns = *pick(&divisors(fl), &mut rng);
        let nt = *pick(&divisors(nf), &mut rng);
        let layout = BlockLayout::build(fl, nf, ns, nt).unwrap();
        let q = random_tensor(h, n, d, fl, 3 * i);
        let k = random_tensor(h, n, d, fl, 3 * i + 1);
        let v = random_tensor(h, n, d, fl, 3 * i + 2);
        let exact = exact_attention(&q, &k, &v).map_err(|e| e.to_string())?;
        let merged = merged_attention(&q, &k, &v, &layout, &HttmConfig::identity()).map_err(|e| e.to_string())?;
        worst = worst.max(rel_frobenius(&exact, &merged.output));
    }
    check(worst <= 1e-5, format!("50 instances up to N={largest}, max relative error {worst:.2e}"))
}

fn pick<'a, T>(xs: &'a [T], rng: &mut ChaCha8Rng) -> &'a T {
    &xs[rng.random_range(0..xs.len())]
}

fn submatrix() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut max = 0f64;
    let mut layouts = 0;
    for i in 0..50u64 {
        let fl = *pick(&[8, 12, 16, 24, 32, 64], &mut rng);
        let nf = *pick(&[1, 2, 4, 8], &mut rng);
        if fl * nf > 512 {
            continue;
        }
        let n = fl * nf;
        let t = random_tensor(1, n, 16, fl, 100 + i);
        let mode = if i % 2 == 0 { PartitionMode::Stride } else { PartitionMode::Random { seed: i } };
        let part = partition_src_dst(n, fl, 0.25, nf > 1 && i % 3 == 0, mode).map_err(|e| e.to_string())?;
        for (ns, nt) in divisor_layouts(fl, nf) {
            let layout = BlockLayout::build(fl, nf, ns, nt).unwrap();
            let rep = check_submatrix(t.head(0), &layout, &part, None).map_err(|e| e.to_string())?;
            max = max.max(rep.max_abs_discrepancy);
            layouts += 1;
        }
    }
    check(max == 0.0, format!("{layouts} layouts over 50 instances, max discrepancy {max}"))
}

fn blocked_below_global() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut violations = 0;
    for i in 0..200u64 {
        let fl = *pick(&[8, 16, 32], &mut rng);
        let nf = *pick(&[2, 4, 8], &mut rng);
        let n = fl * nf;
        let t = random_tensor(1, n, 8, fl, 1000 + i);
        let part = partition_src_dst(n, fl, 0.25, false, PartitionMode::Random { seed: i }).map_err(|e| e.to_string())?;
        let ns = *pick(&divisors(fl), &mut rng);
        let nt = *pick(&divisors(nf), &mut rng);
        let layout = BlockLayout::build(fl, nf, ns, nt).unwrap();
        let avail = block_best_matches(t.head(0), &layout, &part).map_err(|e| e.to_string())?.len();
        let r = rng.random_range(1..=avail.max(1)).min(avail);
        let blocked = blocked_oracle_selection(t.head(0), &layout, &part, r).map_err(|e| e.to_string())?;
        let global = global_merge_oracle(t.head(0), &part, r).map_err(|e| e.to_string())?;
        if blocked.quality > global.quality {
            violations += 1;
        }
    }
    check(violations == 0, format!("200 instances, {violations} with blocked quality above global"))
}

fn nested_quality() -> Outcome {
    let (fl, nf) = (64, 8);
    let n = fl * nf;
    let mut violations = 0;
    for seed in 0..20u64 {
        let t = random_tensor(1, n, 16, fl, 5000 + seed);
        let part = partition_src_dst(n, fl, 0.25, false, PartitionMode::Random { seed }).map_err(|e| e.to_string())?;
        let chain: Vec<BlockLayout> = [1, 2, 4, 8].iter().map(|&nt| BlockLayout::build(fl, nf, fl, nt).unwrap()).collect();
        let avail = block_best_matches(t.head(0), &chain[0], &part).map_err(|e| e.to_string())?.len();
        let r = avail / 2;
        let q: Vec<f64> = chain
            .iter()
            .map(|l| blocked_oracle_selection(t.head(0), l, &part, r).map(|g| g.quality))
            .collect::<Result<_, _>>()
            .map_err(|e| e.to_string())?;
        if q.windows(2).any(|w| w[1] < w[0]) {
            violations += 1;
        }
    }
    check(violations == 0, format!("n_b in 64,128,256,512 over 20 seeds, {violations} decreasing"))
}

fn cost_model() -> Outcome {
    let global = matching_cost(1000, 64, 0.25, CostLayout::Global).map_err(|e| e.to_string())?;
    let per_block: Vec<(usize, u64)> = divisors(1000)
        .into_iter()
        .map(|nb| (nb, matching_cost(1000, 64, 0.25, CostLayout::Blocked { block_size: nb }).unwrap()))
        .collect();
    let linear = per_block.iter().all(|&(nb, c)| c == 12_000 * nb as u64)
        && per_block.iter().all(|&(a, ca)| per_block.iter().all(|&(b, cb)| ca * b as u64 == cb * a as u64));
    let reference = matching_cost(3840, 64, 0.25, CostLayout::Blocked { block_size: 128 }).map_err(|e| e.to_string())?;
    let coeff = global as f64 / (1000f64 * 1000.0 * 64.0);
    check(
        global == 12_000_000 && linear && reference == 5_898_240 && (coeff - 0.19).abs() < 0.005,
        format!("global cost {global} (= {coeff:.4} N^2 d), blocked cost = 12000 n_b over {} block sizes", per_block.len()),
    )
}

fn outlier_ablation() -> Outcome {
    let (fl, nf) = (80, 4);
    let mut wins = 0;
    let mut equal_len = 0;
    let mut dev_ok = 0;
    for seed in 0..20u64 {
        let mut spec = SceneSpec::new(nf, fl, 64);
        spec.spatial_redundancy = 0.0;
        spec.temporal_continuity = 0.5;
        spec.seed = seed;
        let scene = gen_scene(&spec).map_err(|e| e.to_string())?;
        let mut cfg = StackConfig::new(1, 4, 16);
        cfg.weights_seed = seed;
        let layout = BlockLayout::build(fl, nf, 40, 2).unwrap();
        let run = |config: HttmConfig| {
            run_stack(&scene.tokens, fl, &cfg, Some(&StackMerge { layout: layout.clone(), config }))
                .map_err(|e| e.to_string())
        };
        let filtered = run(HttmConfig::new(0.9, 0.0, 0.1).with_dst_ratio(0.1))?;
        let plain = run(HttmConfig::new(0.8, 0.0, 0.0).with_dst_ratio(0.1))?;
        let (fd, pd) = (filtered.first_merge().unwrap(), plain.first_merge().unwrap());
        if fd.total_q_len() == pd.total_q_len() {
            equal_len += 1;
        }
        if filtered.end_to_end_error().unwrap() < plain.end_to_end_error().unwrap() {
            wins += 1;
        }
        if fd.max_deviation_after <= fd.max_deviation_before {
            dev_ok += 1;
        }
    }
    check(
        wins >= 16 && dev_ok == 20 && equal_len == 20,
        format!("filter wins {wins}/20 at equal reduced length on {equal_len}/20, max deviation non-increasing {dev_ok}/20"),
    )
}

fn temporal_reordering() -> Outcome {
    let (fl, nf) = (64, 8);
    let mut wins = 0;
    let mut worst_gap = f64::INFINITY;
    for seed in 0..20u64 {
        let mut spec = SceneSpec::new(nf, fl, 32);
        spec.temporal_continuity = 0.9;
        spec.seed = seed;
        let tokens = gen_scene(&spec).map_err(|e| e.to_string())?.as_tensor();
        let part = partition_src_dst(fl * nf, fl, 0.25, false, PartitionMode::Stride).map_err(|e| e.to_string())?;
        let r = part.src_indices().len() / 2;
        let global = global_merge_oracle(tokens.head(0), &part, r).map_err(|e| e.to_string())?;
        let spatial = fraction_in_blocks(&global, &BlockLayout::build(fl, nf, 64, 1).unwrap());
        let temporal = fraction_in_blocks(&global, &BlockLayout::build(fl, nf, 16, 4).unwrap());
        worst_gap = worst_gap.min(temporal - spatial);
        if temporal > spatial {
            wins += 1;
        }
    }
    check(wins == 20, format!("n_b=64: 16x4 holds more top pairs than 64x1 on {wins}/20 seeds (min gap {worst_gap:.3})"))
}

/// Share of seeds whose quality_q10 is non-decreasing along the config's
/// layout order.
fn trend(records: &[SweepRecord]) -> (usize, usize) {
    let mut seeds: Vec<u64> = records.iter().map(|r| r.seed).collect();
    seeds.sort_unstable();
    seeds.dedup();
    let good = seeds
        .iter()
        .filter(|&&s| {
            let q: Vec<f64> = records
                .iter()
                .filter(|r| r.seed == s)
                .map(|r| r.result.as_ref().ok().and_then(|m| m.quality_q10).unwrap_or(f64::NAN))
                .collect();
            q.windows(2).all(|w| w[1] >= w[0])
        })
        .count();
    (good, seeds.len())
}

fn pareto_trends() -> Outcome {
    let mut detail = Vec::new();
    let mut ok = true;
    for (name, axis) in [("continuous.cfg", "n_t"), ("sparse.cfg", "n_s")] {
        let cfg = Config::load(&configs_dir().join(name)).map_err(|e| e.to_string())?;
        let records = run_sweep(&cfg, None).map_err(|e| e.to_string())?;
        let mut csv = Vec::new();
        write_sweep_csv(&records, &mut csv).map_err(|e| e.to_string())?;
        let records = read_sweep_csv(std::str::from_utf8(&csv).unwrap()).map_err(|e| e.to_string())?;
        let n_b: Vec<usize> = records.iter().map(|r| r.n_b).collect();
        let fixed = n_b.iter().all(|&b| b == n_b[0]);
        // records come in grid order (layout, then seed); regroup per seed
        let mut by_seed = records.clone();
        by_seed.sort_by_key(|r| r.seed);
        let ordered = by_seed.chunk_by(|a, b| a.seed == b.seed).all(|c| {
            c.windows(2).all(|w| if axis == "n_t" { w[1].n_t > w[0].n_t } else { w[1].n_s > w[0].n_s })
        });
        let (good, total) = trend(&by_seed);
        ok &= fixed && ordered && n_b[0] <= 256 && good * 10 >= total * 7;
        detail.push(format!("{name}: n_b={} non-decreasing in {axis} on {good}/{total} seeds", n_b[0]));
    }
    check(ok, detail.join("; "))
}

/// Two heads that agree on every similarity scale but pair tokens
/// differently: head 0 pairs each src with the dst before it, head 1 with
/// the dst after it.
fn headwise_instance() -> (TokenTensor, TokenTensor, TokenTensor) {
    let n = 8;
    let unit = |deg: f64| [deg.to_radians().cos() as f32, deg.to_radians().sin() as f32];
    let dst_angle = |j: usize| 90.0 * (j / 2) as f64;
    let mut q = Vec::new();
    for head in 0..2 {
        for i in 0..n {
            let deg = if i % 2 == 0 {
                dst_angle(i)
            } else if head == 0 {
                dst_angle(i - 1) + 2.0 + i as f64
            } else {
                dst_angle((i + 1) % n) - 2.0 - i as f64
            };
            q.extend(unit(deg));
        }
    }
    let q = TokenTensor::new(q, 2, n, 2, n).unwrap();
    (q, random_tensor(2, n, 2, n, 77), random_tensor(2, n, 2, n, 78))
}

fn headwise_uniqueness() -> Outcome {
    let (q, k, v) = headwise_instance();
    let layout = BlockLayout::global(8, 1).unwrap();
    let cfg = HttmConfig::new(0.25, 0.0, 0.0).with_dst_ratio(0.5);
    let hw = merged_attention(&q, &k, &v, &layout, &cfg).map_err(|e| e.to_string())?;
    let uni = uniform_merge_baseline(&q, &k, &v, &layout, &cfg).map_err(|e| e.to_string())?;
    let (a, b) = (duplicate_rows(&hw.output), duplicate_rows(&uni.output));
    check(a < b, format!("duplicate output rows: head-wise {a}, uniform {b}"))
}

fn outlier_budget() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut checked = 0;
    let mut mismatches = 0;
    for i in 0..50u64 {
        let h = rng.random_range(1..=4);
        let (fl, nf) = (16, 4);
        let n = fl * nf;
        let d = rng.random_range(0.0..0.3);
        let q = random_tensor(h, n, 8, fl, 9000 + i);
        let k = random_tensor(h, n, 8, fl, 9100 + i);
        let layout = BlockLayout::build(fl, nf, 8, 2).unwrap();
        let cfg = HttmConfig::new(0.5, 0.25, d).with_dst_ratio(0.25);
        let out = merged_attention(&q, &k, &k, &layout, &cfg).map_err(|e| e.to_string())?;
        let diag = &out.diagnostics;
        let mut all: Vec<(f64, usize, usize)> = diag
            .deviations
            .iter()
            .enumerate()
            .flat_map(|(hi, row)| row.iter().enumerate().map(move |(p, &x)| (x, hi, p)))
            .filter(|e| e.0 > 0.0)
            .collect();
        let budget = (d * (h * n) as f64).round() as usize;
        if all.len() < budget {
            continue;
        }
        checked += 1;
        all.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        let mut expected: Vec<(usize, usize)> = all[..budget].iter().map(|e| (e.1, e.2)).collect();
        expected.sort();
        if diag.mask.popcount() != budget || diag.mask.flagged() != expected {
            mismatches += 1;
        }
    }
    check(mismatches == 0 && checked > 0, format!("{checked} instances, {mismatches} differ from the full-sort oracle"))
}

fn reorder_bijection() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut bad = 0;
    for i in 0..1000u64 {
        let fl = rng.random_range(1..=48);
        let nf = rng.random_range(1..=12);
        let ns = *pick(&divisors(fl), &mut rng);
        let nt = *pick(&divisors(nf), &mut rng);
        let l = BlockLayout::build(fl, nf, ns, nt).unwrap();
        let t = random_tensor(1, fl * nf, 2, fl, i);
        let back = l.apply_inverse(&l.apply_perm(&t).unwrap()).unwrap();
        let same = t.as_slice().iter().zip(back.as_slice()).all(|(a, b)| a.to_bits() == b.to_bits());
        let inverse = (0..fl * nf).all(|p| l.inv_perm()[l.perm()[p]] == p && l.perm()[l.inv_perm()[p]] == p);
        if !(same && inverse) {
            bad += 1;
        }
    }
    check(bad == 0, format!("1000 layouts, {bad} failed the round trip"))
}

fn flops_arithmetic() -> Outcome {
    let cfg = Config::load(&configs_dir().join("flops.cfg")).map_err(|e| e.to_string())?;
    let r = flops_report(&cfg).map_err(|e| e.to_string())?;
    let (num, den) = r.qk_fraction();
    let qk_exact = num * 100 == den * 6;
    let (n, nb) = (r.seq_len as u128, r.block_size as u128);
    let skew = (r.matching_global as u128 * nb).abs_diff(r.matching_blocked as u128 * n);
    let ratio_ok = skew <= 2 * n;
    check(
        qk_exact && ratio_ok && (n, nb) == (41220, 3840),
        format!(
            "QK fraction {num}/{den} = 0.06, matching ratio {:.6} vs N/n_b {:.6}",
            r.matching_ratio(),
            n as f64 / nb as f64
        ),
    )
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 12] = [
        ("no-merge identity", no_merge_identity),
        ("submatrix property", submatrix),
        ("blocked quality <= global quality", blocked_below_global),
        ("quality non-decreasing over nested blocks", nested_quality),
        ("matching cost model", cost_model),
        ("outlier filtering ablation", outlier_ablation),
        ("temporal reordering benefit", temporal_reordering),
        ("sweep quality trends", pareto_trends),
        ("head-wise uniqueness", headwise_uniqueness),
        ("outlier budget exactness", outlier_budget),
        ("reordering bijection", reorder_bijection),
        ("attention multiply-add arithmetic", flops_arithmetic),
    ];
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let outcome = run();
        let secs = start.elapsed().as_secs_f64();
        let (tag, detail) = match outcome {
            Ok(d) => ("PASS", d),
            Err(d) => {
                failed += 1;
                ("FAIL", d)
            }
        };
        println!("{tag} [{:>2}] {name}: {detail} ({secs:.1}s)", i + 1);
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
