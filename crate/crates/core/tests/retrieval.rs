use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use placerec_core::backbone::ArfmConfig;
use placerec_core::dataio::{generate_synthetic, SceneRecipe};
use placerec_core::eval::{build_db, evaluate, DbEntry, DescriptorDb};
use placerec_core::model::{Model, ModelConfig};
use placerec_core::transformer::TransformerConfig;
use placerec_core::voxel::{quantize, SparseGrid};
use placerec_core::PointCloud;

fn random_unit(rng: &mut impl Rng, dim: usize) -> Vec<f32> {
    let v: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter().map(|x| (x / n) as f32).collect()
}

fn l2(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| (x as f64 - y as f64).powi(2)).sum::<f64>().sqrt()
}

/// A 100-entry database on a line plus queries that are noisy copies of
/// planted database entries.
fn planted(seed: u64) -> (DescriptorDb, Vec<DbEntry>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut db = DescriptorDb::new(16);
    for i in 0..100u64 {
        db.push(DbEntry {
            place: i,
            position: [i as f64 * 30.0, 0.0],
            descriptor: random_unit(&mut rng, 16),
        })
        .unwrap();
    }
    let queries = (0..60)
        .map(|_| {
            let target = rng.random_range(0..100usize);
            let noise = rng.random_range(0.0..1.5f32);
            let base = &db.entries[target].descriptor;
            let jitter = random_unit(&mut rng, 16);
            DbEntry {
                place: target as u64,
                position: [target as f64 * 30.0 + rng.random_range(-5.0..5.0), 0.0],
                descriptor: base.iter().zip(&jitter).map(|(b, j)| b + noise * j).collect(),
            }
        })
        .collect();
    (db, queries)
}

/// recall@N from the count of database entries strictly closer than the
/// nearest true positive.
fn oracle_recall(db: &DescriptorDb, queries: &[DbEntry], radius: f64) -> Vec<f64> {
    let ranks: Vec<usize> = queries
        .iter()
        .filter_map(|q| {
            let truth: Vec<&DbEntry> = db
                .entries
                .iter()
                .filter(|e| ((e.position[0] - q.position[0]).powi(2) + (e.position[1] - q.position[1]).powi(2)).sqrt() <= radius)
                .collect();
            let best = truth.iter().map(|e| l2(&e.descriptor, &q.descriptor)).fold(f64::INFINITY, f64::min);
            best.is_finite()
                .then(|| db.entries.iter().filter(|e| l2(&e.descriptor, &q.descriptor) < best).count())
        })
        .collect();
    (1..=db.len())
        .map(|n| ranks.iter().filter(|&&r| r < n).count() as f64 / ranks.len() as f64)
        .collect()
}

#[test]
fn recall_matches_brute_force_oracle() {
    for seed in 0..5 {
        let (db, queries) = planted(seed);
        let r = evaluate(&db, &queries, 25.0).unwrap();
        let want = oracle_recall(&db, &queries, 25.0);
        assert_eq!(r.recall_at.len(), 100);
        for (n, (a, b)) in r.recall_at.iter().zip(&want).enumerate() {
            assert!((a - b).abs() < 1e-12, "seed {seed} N={}: {a} vs {b}", n + 1);
        }
        assert_eq!(r.ar_at_1, r.recall_at[0]);
        assert_eq!(r.one_percent_n, 1);
        assert_eq!(r.queries + r.skipped, queries.len());
    }
}

#[test]
fn recall_is_monotone_and_reaches_one() {
    let (db, queries) = planted(9);
    let r = evaluate(&db, &queries, 25.0).unwrap();
    assert!(r.recall_at.windows(2).all(|w| w[0] <= w[1]));
    assert_eq!(*r.recall_at.last().unwrap(), 1.0);
    assert!(r.recall_at.iter().all(|v| (0.0..=1.0).contains(v)));
}

#[test]
fn database_order_does_not_matter() {
    let (db, queries) = planted(11);
    let mut shuffled = db.clone();
    shuffled.entries.shuffle(&mut ChaCha8Rng::seed_from_u64(1));
    assert_eq!(evaluate(&db, &queries, 25.0).unwrap(), evaluate(&shuffled, &queries, 25.0).unwrap());
}

#[test]
fn one_percent_uses_ceiling() {
    let mut db = DescriptorDb::new(1);
    for i in 0..250u64 {
        db.push(DbEntry {
            place: i,
            position: [i as f64 * 100.0, 0.0],
            descriptor: vec![i as f32],
        })
        .unwrap();
    }
    let q = DbEntry {
        place: 7,
        position: [700.0, 0.0],
        descriptor: vec![8.4],
    };
    let r = evaluate(&db, &[q], 25.0).unwrap();
    assert_eq!(r.one_percent_n, 3);
    assert_eq!((r.ar_at_1, r.ar_at_1pct), (0.0, 1.0));
}

#[test]
fn empty_database_is_rejected() {
    assert!(evaluate(&DescriptorDb::new(4), &[], 25.0).is_err());
}

#[test]
fn gdb_file_round_trip() {
    let (db, _) = planted(3);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("db.gdb");
    db.save(&path).unwrap();
    let bytes = std::fs::read(&path).unwrap();
    assert_eq!(&bytes[..4], b"GDB1");
    assert_eq!(bytes.len(), 12 + 100 * (8 + 16 * 4));
    let back = DescriptorDb::load(&path).unwrap();
    assert_eq!(back.dim, 16);
    for (a, b) in db.entries.iter().zip(&back.entries) {
        assert_eq!(a.place, b.place);
        assert_eq!(a.descriptor, b.descriptor);
    }
    std::fs::write(&path, b"GDB2\0\0\0\0\0\0\0\0").unwrap();
    assert!(DescriptorDb::load(&path).is_err());
}

fn tiny_model() -> ModelConfig {
    let mut cfg = ModelConfig::desk();
    cfg.quant_step = 0.25;
    cfg.backbone.channels = 4;
    cfg.transformer = TransformerConfig {
        d_model: 4,
        heads: 2,
        memory_sizes: vec![4],
        out_dim: 8,
    };
    cfg.aggregation.in_dim = 8;
    cfg.aggregation.clusters = 2;
    cfg.aggregation.output_dim = 12;
    cfg
}

#[test]
fn build_db_examples() {
    let model = Model::<f64>::new(tiny_model(), 1).unwrap();
    assert!(build_db(&model, &[]).unwrap().is_empty());
    let ds = generate_synthetic(&SceneRecipe {
        places: 2,
        traversals: 2,
        raw_points: 2000,
        ..SceneRecipe::default()
    })
    .unwrap();
    let scans = ds.scans(None);
    let db = build_db(&model, &scans).unwrap();
    assert_eq!(db.len(), 4);
    for e in &db.entries {
        assert_eq!(e.descriptor.len(), 12);
        let n = e.descriptor.iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt();
        assert!((n - 1.0).abs() < 1e-6);
    }
    assert_eq!(build_db(&model, &scans).unwrap().to_bytes(), db.to_bytes());
}

#[test]
fn ablation_structure() {
    let base = ModelConfig::desk();
    let no_arfm = base.ablation("no_arfm").unwrap().init_params::<f64>(1).unwrap();
    assert!(no_arfm.paths().all(|p| !p.contains("arfm.gate")));
    let full = base.init_params::<f64>(1).unwrap();
    assert!(full.paths().any(|p| p.contains("arfm.gate")));
    assert_eq!(base.ablation("branches_5").unwrap(), base);
    let concat = base.ablation("no_fusion_attention").unwrap().init_params::<f64>(1).unwrap();
    assert!(concat.paths().any(|p| p.starts_with("arfm.fuse")));
    assert!(concat.paths().all(|p| !p.contains("arfm.gate")));
    let err = base.ablation("no_such_variant").unwrap_err().to_string();
    assert!(err.contains("no_arfm") && err.contains("layers_k"));
}

/// Points on the surface of a sphere and of a few box shells.
fn shell_scan(seed: u64) -> PointCloud {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pts = Vec::new();
    for _ in 0..3000 {
        let v: [f64; 3] = [0; 3].map(|_: i32| rng.random_range(-1.0..1.0));
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-9);
        pts.push(v.map(|x| 0.8 * x / n));
    }
    for _ in 0..1000 {
        let face = rng.random_range(0..6);
        let mut p: [f64; 3] = [0; 3].map(|_: i32| rng.random_range(-0.3..0.3));
        p[face / 2] = if face % 2 == 0 { -0.3 } else { 0.3 };
        pts.push(p);
    }
    PointCloud::new(pts)
}

#[test]
fn dilated_branches_reach_fewer_neighbours_on_shells() {
    let cfg = ArfmConfig::default();
    for seed in 0..3 {
        let grid: SparseGrid<f64> = quantize(&shell_scan(seed), 0.05).unwrap();
        let conventional = cfg.branches(1).unwrap();
        let dilated = ArfmConfig { dilated: true, ..cfg.clone() }.branches(1).unwrap();
        let count = |bs: &[placerec_core::backbone::BranchSpec]| -> usize { bs.iter().map(|b| b.active_pairs(&grid).unwrap()).sum() };
        let (c, d) = (count(&conventional), count(&dilated));
        assert!(d < c, "seed {seed}: dilated {d} vs conventional {c}");
        for (bc, bd) in conventional.iter().zip(&dilated).skip(1) {
            assert_eq!(bc.receptive_field(), bd.receptive_field());
            assert!(bd.active_pairs(&grid).unwrap() <= bc.active_pairs(&grid).unwrap());
        }
    }
}

#[test]
fn descriptor_db_rejects_mixed_dimensions() {
    let mut db = DescriptorDb::new(3);
    assert!(db
        .push(DbEntry {
            place: 0,
            position: [0.0, 0.0],
            descriptor: vec![1.0],
        })
        .is_err());
}
