//! End-to-end acceptance checks, one line per criterion.
//!
//! Runs sequentially as its own binary so the timing checks see an idle
//! process. Exits non-zero when any criterion fails.

use std::collections::{BTreeMap, BTreeSet};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use placerec_core::backbone::{arfm_forward, conv_forward, sparse_conv, ArfmConfig, ConvSpec, MapCache, SparseFeat};
use placerec_core::bench::attention_scaling;
use placerec_core::config::KvConfig;
use placerec_core::dataio::{generate_synthetic, pair_masks, PlaceDataset, SceneRecipe};
use placerec_core::eval::{evaluate, run_ablation, AblationReport, DbEntry, DescriptorDb, Protocol};
use placerec_core::model::{forward_batch, Model, ModelConfig};
use placerec_core::nn::{Mode, Session};
use placerec_core::params::ParamStore;
use placerec_core::suite::{self, DEFAULT_STEP, DEFAULT_TOLERANCE};
use placerec_core::training::{batch_hard_mine, BatchScheduler, TrainConfig};
use placerec_core::transformer::transformer_forward;
use placerec_core::voxel::{build_kernel_map, quantize, Coord, SparseGrid};
use placerec_core::{PointCloud, Tensor};

type Check = Result<String, String>;

fn ensure(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn repo_root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn c1_gradients() -> Check {
    let start = Instant::now();
    let results = suite::run(None, 1, DEFAULT_TOLERANCE, DEFAULT_STEP).map_err(|e| e.to_string())?;
    let secs = start.elapsed().as_secs_f64();
    let failed: Vec<String> = results.iter().filter(|r| !r.report.passed).map(|r| r.name.to_owned()).collect();
    ensure(failed.is_empty(), format!("failing cases: {failed:?}"))?;
    ensure(secs < 300.0, format!("took {secs:.1} s"))?;
    let worst = results.iter().map(|r| r.report.max_rel_error).fold(0.0, f64::max);
    Ok(format!("{} cases, worst rel {worst:.1e}, {secs:.1} s", results.len()))
}

// Independent enumerations for the oracle criterion.

fn offsets(k: usize) -> Vec<Coord> {
    let lo = if k % 2 == 1 { -((k / 2) as i32) } else { 0 };
    let r = 0..k as i32;
    r.clone()
        .flat_map(|x| r.clone().flat_map(move |y| (0..k as i32).map(move |z| [x + lo, y + lo, z + lo])))
        .collect()
}

fn out_sites(coords: &[Coord], s: i32) -> Vec<Coord> {
    let mut seen = BTreeSet::new();
    coords
        .iter()
        .map(|c| c.map(|v| (v as f64 / s as f64).floor() as i32 * s))
        .filter(|o| seen.insert(*o))
        .collect()
}

fn random_coords(rng: &mut impl Rng, n: usize, extent: i32) -> Vec<Coord> {
    let mut set = BTreeSet::new();
    let cap = (extent * extent * extent) as usize;
    while set.len() < n.min(cap) {
        set.insert([0; 3].map(|_: i32| rng.random_range(-extent / 2..extent - extent / 2)));
    }
    set.into_iter().collect()
}

fn conv_oracle(rng: &mut ChaCha8Rng) -> Result<f64, String> {
    let shapes = [(3, 1, 1), (3, 1, 2), (5, 1, 1), (1, 1, 1), (2, 2, 1), (3, 2, 1), (3, 1, 3)];
    let mut worst = 0.0f64;
    for trial in 0..120 {
        let (k, s, d) = shapes[trial % shapes.len()];
        let (n, extent) = (rng.random_range(1..=40), rng.random_range(2..=6));
        let coords = random_coords(rng, n, extent);
        let (ci, co) = (rng.random_range(1..=3), rng.random_range(1..=3));
        let feats: Vec<f64> = (0..coords.len() * ci).map(|_| rng.random_range(-1.0..1.0)).collect();
        let w: Vec<f64> = (0..k * k * k * ci * co).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut params = ParamStore::<f64>::new();
        params.insert("c.weight", Tensor::new(vec![k * k * k, ci, co], w.clone()), true);
        params.insert("c.bias", Tensor::zeros(&[co]), true);
        let spec = ConvSpec::new(k, s, ci, co).dilated(d).linear_output();
        let grid = SparseGrid::new(coords.clone(), Tensor::new(vec![coords.len(), ci], feats.clone()), 1).map_err(|e| e.to_string())?;
        let out = sparse_conv(&grid, &spec, &params, "c").map_err(|e| e.to_string())?;
        // Dense volume lookup: absent sites read as zero.
        let dense: BTreeMap<Coord, &[f64]> = coords.iter().enumerate().map(|(i, c)| (*c, &feats[i * ci..(i + 1) * ci])).collect();
        let sites = out_sites(&coords, s as i32);
        ensure(out.coords == sites, "output sites differ")?;
        for (r, o) in sites.iter().enumerate() {
            for (c, got) in out.feats.row(r).iter().enumerate() {
                let mut want = 0.0;
                for (q, off) in offsets(k).iter().enumerate() {
                    let p = [0, 1, 2].map(|a| o[a] + off[a] * d as i32);
                    if let Some(x) = dense.get(&p) {
                        want += (0..ci).map(|i| w[(q * ci + i) * co + c] * x[i]).sum::<f64>();
                    }
                }
                worst = worst.max((got - want).abs());
            }
        }
    }
    ensure(worst <= 1e-10, format!("conv deviation {worst:e}"))?;
    Ok(worst)
}

fn kernel_map_oracle(rng: &mut ChaCha8Rng) -> Result<usize, String> {
    let mut cases = 0;
    for _ in 0..60 {
        let (n, extent) = (rng.random_range(1..=200), rng.random_range(3..=9));
        let coords = random_coords(rng, n, extent);
        let (k, s, d) = (rng.random_range(1..=5), rng.random_range(1..=2), rng.random_range(1..=3));
        let grid = SparseGrid::<f64>::occupancy(coords.clone()).map_err(|e| e.to_string())?;
        let map = build_kernel_map(&grid, k, s, d).map_err(|e| e.to_string())?;
        let outs = out_sites(&coords, s as i32);
        let mut want = BTreeSet::new();
        for (o, oc) in outs.iter().enumerate() {
            for (i, ic) in coords.iter().enumerate() {
                for (q, off) in offsets(k).iter().enumerate() {
                    if (0..3).all(|a| oc[a] + off[a] * d as i32 == ic[a]) {
                        want.insert((i as u32, o as u32, q as u32));
                    }
                }
            }
        }
        let got: BTreeSet<_> = map.triples().iter().copied().collect();
        ensure(map.out_coords() == &outs[..] && got == want && got.len() == map.triples().len(), "kernel map differs")?;
        cases += 1;
    }
    Ok(cases)
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

fn mining_oracle(rng: &mut ChaCha8Rng) -> Result<usize, String> {
    for _ in 0..400 {
        let n = rng.random_range(2..=16);
        let pos: Vec<[f64; 2]> = (0..n).map(|_| [rng.random_range(0.0..150.0), 0.0]).collect();
        let descs: Vec<Vec<f64>> = (0..n).map(|_| (0..4).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let m = pair_masks(&pos, 10.0, 50.0);
        let mut want = Vec::new();
        for a in 0..n {
            let mut best: Option<(f64, usize, usize)> = None;
            for p in (0..n).filter(|&p| m.pos(a, p)) {
                for q in (0..n).filter(|&q| m.neg(a, q)) {
                    let v = dist(&descs[a], &descs[p]) - dist(&descs[a], &descs[q]);
                    if best.is_none_or(|b| v > b.0) {
                        best = Some((v, p, q));
                    }
                }
            }
            if let Some((_, p, q)) = best {
                want.push((a, p, q));
            }
        }
        ensure(batch_hard_mine(&descs, &m, 0.2).triples == want, "mined triples differ")?;
    }
    Ok(400)
}

fn recall_oracle(rng: &mut ChaCha8Rng) -> Result<(), String> {
    let unit = |rng: &mut ChaCha8Rng| -> Vec<f32> {
        let v: Vec<f64> = (0..16).map(|_| rng.random_range(-1.0..1.0)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.iter().map(|x| (x / n) as f32).collect()
    };
    let mut db = DescriptorDb::new(16);
    for i in 0..100u64 {
        let descriptor = unit(rng);
        db.push(DbEntry { place: i, position: [i as f64 * 30.0, 0.0], descriptor }).map_err(|e| e.to_string())?;
    }
    let queries: Vec<DbEntry> = (0..80)
        .map(|_| {
            let t = rng.random_range(0..100usize);
            let noise = rng.random_range(0.0..1.5f32);
            let j = unit(rng);
            DbEntry {
                place: t as u64,
                position: [t as f64 * 30.0, 0.0],
                descriptor: db.entries[t].descriptor.iter().zip(&j).map(|(a, b)| a + noise * b).collect(),
            }
        })
        .collect();
    let report = evaluate(&db, &queries, 25.0).map_err(|e| e.to_string())?;
    let f = |a: &[f32], b: &[f32]| dist(&a.iter().map(|&v| v as f64).collect::<Vec<_>>(), &b.iter().map(|&v| v as f64).collect::<Vec<_>>());
    let ranks: Vec<usize> = queries
        .iter()
        .map(|q| {
            let best = db.entries.iter().filter(|e| (e.position[0] - q.position[0]).abs() <= 25.0).map(|e| f(&e.descriptor, &q.descriptor)).fold(f64::INFINITY, f64::min);
            db.entries.iter().filter(|e| f(&e.descriptor, &q.descriptor) < best).count()
        })
        .collect();
    for n in 1..=100 {
        let want = ranks.iter().filter(|&&r| r < n).count() as f64 / ranks.len() as f64;
        ensure((report.recall(n) - want).abs() < 1e-12, format!("recall@{n} {} vs {want}", report.recall(n)))?;
    }
    Ok(())
}

fn c2_oracles() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let worst = conv_oracle(&mut rng)?;
    let maps = kernel_map_oracle(&mut rng)?;
    let mined = mining_oracle(&mut rng)?;
    recall_oracle(&mut rng)?;
    Ok(format!("conv 120 instances worst {worst:.1e}; {maps} kernel maps; {mined} minings; recall@1..100"))
}

fn c3_invariants() -> Check {
    let ds = generate_synthetic(&SceneRecipe { places: 2, traversals: 1, ..SceneRecipe::default() }).map_err(|e| e.to_string())?;
    let cfg = ModelConfig::desk();
    let model = Model::<f64>::new(cfg.clone(), 5).map_err(|e| e.to_string())?;
    let clouds: Vec<&PointCloud> = ds.places.iter().map(|p| &p.scans[0].cloud).collect();
    let mut worst_gate = 0.0f64;
    let mut worst_row = 0.0f64;
    let mut convex_violation = 0.0f64;
    for mode in [Mode::Train, Mode::Infer] {
        let mut sess = Session::new(&model.params, mode);
        let grid = quantize::<f64>(clouds[0], cfg.quant_step).map_err(|e| e.to_string())?;
        let x = sess.constant(grid.feats.clone());
        let feat = SparseFeat { node: x, coords: grid.coords.clone().into(), level: 1, segments: vec![grid.len()].into() };
        let mut cache = MapCache::new();
        let h = conv_forward(&mut sess, &mut cache, &feat, &cfg.backbone.conv0(), "conv0").map_err(|e| e.to_string())?;
        let h = conv_forward(&mut sess, &mut cache, &h, &cfg.backbone.conv1(), "conv1").map_err(|e| e.to_string())?;
        let arfm_cfg = cfg.backbone.arfm.clone().unwrap_or_default();
        let nodes = arfm_forward(&mut sess, &mut cache, &h, cfg.backbone.channels, &arfm_cfg, "arfm").map_err(|e| e.to_string())?;
        let g = &sess.graph;
        let gates = g.value(nodes.gates.ok_or("no gates")?);
        let b = nodes.branches.len();
        let per = gates.len() / b;
        let out = g.value(nodes.output.node);
        for e in 0..per {
            worst_gate = worst_gate.max(((0..b).map(|i| gates.data()[i * per + e]).sum::<f64>() - 1.0).abs());
            let vals: Vec<f64> = nodes.branches.iter().map(|&n| g.value(n).data()[e]).collect();
            let lo = vals.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let u = out.data()[e];
            convex_violation = convex_violation.max(lo - u).max(u - hi);
        }
        let t = transformer_forward(&mut sess, nodes.output.node, &cfg.transformer).map_err(|e| e.to_string())?;
        for layer in &t.layers {
            for &a in &layer.attention {
                let m = sess.graph.value(a);
                for r in 0..m.rows() {
                    worst_row = worst_row.max((m.row(r).iter().sum::<f64>() - 1.0).abs());
                }
            }
        }
    }
    ensure(worst_gate < 1e-12, format!("gate sum off by {worst_gate:e}"))?;
    ensure(worst_row < 1e-12, format!("attention row off by {worst_row:e}"))?;
    ensure(convex_violation <= 1e-12, format!("ARFM output leaves branch hull by {convex_violation:e}"))?;

    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst_perm = 0.0f64;
    let mut worst_norm = 0.0f64;
    for cloud in &clouds {
        let a = model.descriptor(cloud).map_err(|e| e.to_string())?;
        let mut pts = cloud.points.clone();
        pts.shuffle(&mut rng);
        let b = model.descriptor(&PointCloud::new(pts)).map_err(|e| e.to_string())?;
        worst_perm = worst_perm.max(a.iter().zip(&b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max));
        worst_norm = worst_norm.max((a.iter().map(|v| v * v).sum::<f64>().sqrt() - 1.0).abs());
    }
    let mut sess = Session::new(&model.params, Mode::Infer);
    let batch = forward_batch(&mut sess, &cfg, &clouds).map_err(|e| e.to_string())?;
    for (d, c) in batch.descriptors().iter().zip(&clouds) {
        let alone = model.descriptor(c).map_err(|e| e.to_string())?;
        ensure(sess.graph.value(*d).data() == &alone[..], "packed inference differs from single-cloud inference")?;
    }
    ensure(worst_perm < 1e-12, format!("permutation changed descriptor by {worst_perm:e}"))?;
    ensure(worst_norm < 1e-9, format!("descriptor norm off by {worst_norm:e}"))?;
    Ok(format!(
        "gates {worst_gate:.0e}, rows {worst_row:.0e}, hull {convex_violation:.0e}, permutation {worst_perm:.0e}, norm {worst_norm:.0e}"
    ))
}

fn c4_scaling() -> Check {
    let cfg = ModelConfig::desk().transformer;
    let r = attention_scaling(&cfg, &[256, 512, 1024, 2048], 5, 1).map_err(|e| e.to_string())?;
    let summary = format!(
        "external R2 {:.4} (exp {:.2}), reference exp {:.2}",
        r.external_r2, r.external_exponent, r.reference_exponent
    );
    ensure(r.external_r2 > 0.98, format!("not linear: {summary}"))?;
    ensure(r.reference_exponent > 1.5, format!("reference not superlinear: {summary}"))?;
    Ok(summary)
}

struct Benchmark {
    dataset: PlaceDataset,
    model: ModelConfig,
    train: TrainConfig,
    protocol: Protocol,
}

fn load_benchmark() -> Result<Benchmark, String> {
    let mut kv = KvConfig::load(&repo_root().join("configs/desk.conf")).map_err(|e| e.to_string())?;
    let recipe = SceneRecipe::from_kv(&mut kv).map_err(|e| e.to_string())?;
    let model = ModelConfig::from_kv(&mut kv).map_err(|e| e.to_string())?;
    let train = TrainConfig::from_kv(&mut kv).map_err(|e| e.to_string())?;
    let protocol = Protocol::from_kv(&mut kv).map_err(|e| e.to_string())?;
    kv.finish().map_err(|e| e.to_string())?;
    let dataset = generate_synthetic(&recipe).map_err(|e| e.to_string())?;
    Ok(Benchmark { dataset, model, train, protocol })
}

/// Frozen after the reference run of the baseline configuration.
const AR1_TARGET: f64 = 0.95;

fn c5_recall(b: &Benchmark, report: &AblationReport) -> Check {
    let base = report.row("baseline").ok_or("baseline row missing")?;
    let queries: Vec<u32> = b.protocol.query_traversals.clone();
    ensure(b.dataset.places.len() == 64, "expected 64 places")?;
    ensure(b.train.epochs <= 200, "epoch budget exceeded")?;
    ensure(queries.iter().all(|q| !b.protocol.train_traversals.contains(q)), "queries used in training")?;
    let ar1 = base.report.ar_at_1;
    let summary = format!(
        "AR@1 {ar1:.4}, AR@1% {:.4} after {} epochs over {} queries",
        base.report.ar_at_1pct, b.train.epochs, base.report.queries
    );
    ensure(ar1 >= AR1_TARGET, summary.clone())?;
    Ok(summary)
}

fn c6_ablation(b: &Benchmark, report: &AblationReport) -> Check {
    let base = report.row("baseline").ok_or("baseline row missing")?.report.ar_at_1;
    let no = report.row("no_arfm").ok_or("no_arfm row missing")?.report.ar_at_1;
    ensure(no < base, format!("no_arfm {no:.4} is not below baseline {base:.4}"))?;
    let conventional = ArfmConfig::default().branches(1).map_err(|e| e.to_string())?;
    let dilated = ArfmConfig { dilated: true, ..ArfmConfig::default() }.branches(1).map_err(|e| e.to_string())?;
    let (mut pc, mut pd) = (0, 0);
    for place in b.dataset.places.iter().take(8) {
        let grid = quantize::<f64>(&place.scans[0].cloud, b.model.quant_step).map_err(|e| e.to_string())?;
        // The module runs after the stride-2 stem.
        let down = build_kernel_map(&grid, 2, 2, 1).map_err(|e| e.to_string())?;
        let coarse = SparseGrid::<f64>::occupancy(down.out_coords().to_vec()).map_err(|e| e.to_string())?;
        let coarse = SparseGrid::new(coarse.coords, coarse.feats, down.out_stride_level).map_err(|e| e.to_string())?;
        let count = |bs: &[placerec_core::backbone::BranchSpec]| bs.iter().map(|s| s.active_pairs(&coarse)).sum::<placerec_core::Result<usize>>();
        let (c, d) = (count(&conventional).map_err(|e| e.to_string())?, count(&dilated).map_err(|e| e.to_string())?);
        ensure(d < c, format!("place {}: dilated {d} vs conventional {c}", place.id))?;
        pc += c;
        pd += d;
    }
    Ok(format!("AR@1 baseline {base:.4} > no_arfm {no:.4}; pairs dilated {pd} < conventional {pc}"))
}

fn c7_reproducible() -> Check {
    let bin = env!("CARGO_BIN_EXE_placerec");
    let config = repo_root().join("configs/smoke.conf");
    let run = |dir: &Path| -> Result<(), String> {
        for verb in ["gen-data", "train", "build-db", "eval"] {
            let out = Command::new(bin)
                .arg("--config")
                .arg(&config)
                .arg("--out")
                .arg(dir)
                .arg(verb)
                .output()
                .map_err(|e| e.to_string())?;
            ensure(out.status.success(), format!("{verb} failed: {}", String::from_utf8_lossy(&out.stderr)))?;
        }
        Ok(())
    };
    let a = tempfile::tempdir().map_err(|e| e.to_string())?;
    let b = tempfile::tempdir().map_err(|e| e.to_string())?;
    run(a.path())?;
    run(b.path())?;
    let files = ["model.ckpt", "train.log", "db.gdb", "queries.gdb", "report.txt", "recall.tsv"];
    for f in files {
        let x = std::fs::read(a.path().join(f)).map_err(|e| format!("{f}: {e}"))?;
        let y = std::fs::read(b.path().join(f)).map_err(|e| format!("{f}: {e}"))?;
        ensure(!x.is_empty() && x == y, format!("{f} differs between runs"))?;
    }
    Ok(format!("{} artifacts byte-identical", files.len()))
}

fn c8_scheduler() -> Check {
    let mut s = BatchScheduler::default();
    let mut trace = vec![s.batch_size];
    for _ in 0..12 {
        s = s.step(0, 100);
        if trace.last() != Some(&s.batch_size) {
            trace.push(s.batch_size);
        }
    }
    let want = [32, 45, 63, 89, 125, 175, 245, 256];
    ensure(trace == want, format!("trace {trace:?}"))?;
    Ok(trace.iter().map(|v| v.to_string()).collect::<Vec<_>>().join("->"))
}

fn guarded<R>(f: impl FnOnce() -> Result<R, String>) -> Result<R, String> {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(r) => r,
        Err(p) => Err(p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "panicked".into())),
    }
}

fn main() {
    let mut results: Vec<(&str, Check)> = Vec::new();
    let mut report = |name: &'static str, r: Check| {
        match &r {
            Ok(d) => println!("PASS  {name}: {d}"),
            Err(d) => println!("FAIL  {name}: {d}"),
        }
        results.push((name, r));
    };
    report("1 gradient checks", guarded(c1_gradients));
    report("2 oracles", guarded(c2_oracles));
    report("3 invariants", guarded(c3_invariants));
    report("4 attention scaling", guarded(c4_scaling));
    let trained = guarded(|| {
        let b = load_benchmark()?;
        let variants = ["baseline".to_string(), "no_arfm".to_string()];
        let start = Instant::now();
        let r = run_ablation(&b.model, &b.train, &b.dataset, &b.protocol, &variants, b.train.seed, |_, _| {})
            .map_err(|e| e.to_string())?;
        let secs = start.elapsed().as_secs_f64();
        let c5 = c5_recall(&b, &r).map(|d| format!("{d} ({secs:.0} s for both variants)"));
        Ok((c5, c6_ablation(&b, &r)))
    });
    let (c5, c6) = trained.unwrap_or_else(|e| (Err(e.clone()), Err(e)));
    report("5 synthetic recall", c5);
    report("6 ablation direction", c6);
    report("7 reproducible CLI runs", guarded(c7_reproducible));
    report("8 scheduler trace", guarded(c8_scheduler));
    let failed = results.iter().filter(|(_, r)| r.is_err()).count();
    println!("{} of {} criteria passed", results.len() - failed, results.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
