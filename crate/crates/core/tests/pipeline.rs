use marf::config::RunConfig;
use marf::data::{Dataset, ShapeSource};
use marf::eval::{evaluate, predict_field, predict_oracle, protocol_rays, score, RESULTS_HEADER};
use marf::geometry::{MedialAtom, Vec3};
use marf::raycast::Field;
use marf::trainer::{metrics_header, Trainer, CHECKPOINT_MAGIC};
use marf::MarfError;

/// A few seconds of training on a tiny sphere problem.
fn tiny() -> (RunConfig, Dataset) {
    let mut cfg = RunConfig::desk();
    cfg.network.hidden_layers = 2;
    cfg.network.width = 32;
    cfg.network.n_atoms = 4;
    cfg.train.epochs = 4;
    cfg.train.hold_epochs = 1;
    cfg.train.decay_epochs = 3;
    cfg.train.warmup_steps = 4;
    cfg.data.views = 4;
    cfg.data.resolution = 16;
    cfg.data.stride = 2;
    let shape = ShapeSource::parse("sphere:0.5").unwrap();
    let ds = Dataset::generate(&[shape], 4, 16, 16, 0).unwrap();
    (cfg, ds)
}

#[test]
fn checkpoint_round_trip_is_exact() {
    let (cfg, ds) = tiny();
    let mut t = Trainer::new(cfg, 1).unwrap();
    t.train_epoch(&ds).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("a.ckpt");
    t.save(&p).unwrap();
    let bytes = std::fs::read(&p).unwrap();
    assert_eq!(&bytes[..10], CHECKPOINT_MAGIC);
    let u = Trainer::load(&p).unwrap();
    assert_eq!(u.params.tensors, t.params.tensors);
    assert_eq!(u.adam.m, t.adam.m);
    assert_eq!(u.adam.v, t.adam.v);
    assert_eq!((u.epoch, u.step), (t.epoch, t.step));
    assert_eq!(u.config, t.config);
}

#[test]
fn resume_matches_an_uninterrupted_run() {
    let (cfg, ds) = tiny();
    let mut straight = Trainer::new(cfg.clone(), 1).unwrap();
    let full = straight.run(&ds, None, None, |_| {}).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("r.ckpt");
    let mut first = Trainer::new(cfg, 1).unwrap();
    first.train_epoch(&ds).unwrap();
    first.train_epoch(&ds).unwrap();
    first.save(&p).unwrap();
    let mut resumed = Trainer::load(&p).unwrap();
    let rest = resumed.run(&ds, None, None, |_| {}).unwrap();

    assert_eq!(resumed.params.tensors, straight.params.tensors);
    assert_eq!(rest.len(), 2);
    for (a, b) in rest.iter().zip(&full[2..]) {
        assert_eq!(a.loss, b.loss);
        assert_eq!(a.lr, b.lr);
    }
}

#[test]
fn non_positive_learning_rate_is_rejected() {
    let (mut cfg, _) = tiny();
    cfg.train.final_lr = 0.0;
    assert!(matches!(Trainer::new(cfg, 1), Err(MarfError::InvalidInput(_))));
}

#[test]
fn training_reduces_the_loss() {
    let (mut cfg, ds) = tiny();
    cfg.train.epochs = 8;
    cfg.train.hold_epochs = 4;
    cfg.train.decay_epochs = 4;
    let mut t = Trainer::new(cfg, 1).unwrap();
    let r = t.run(&ds, None, None, |_| {}).unwrap();
    assert!(r.last().unwrap().loss.total < r[0].loss.total, "{} vs {}", r.last().unwrap().loss.total, r[0].loss.total);
}

#[test]
fn metrics_file_has_the_documented_header() {
    let (cfg, ds) = tiny();
    let dir = tempfile::tempdir().unwrap();
    let m = dir.path().join("metrics.csv");
    let mut t = Trainer::new(cfg, 1).unwrap();
    t.run(&ds, None, Some(&m), |_| {}).unwrap();
    let text = std::fs::read_to_string(&m).unwrap();
    let lines: Vec<_> = text.lines().collect();
    assert_eq!(lines[0], "epoch,lr,p,n,s,h,r,ih,im,sigma,mv,z,bce,total,wall_secs");
    assert_eq!(lines[0], metrics_header());
    assert_eq!(lines.len(), 5);
    for (i, l) in lines[1..].iter().enumerate() {
        let cols: Vec<_> = l.split(',').collect();
        assert_eq!(cols.len(), 15);
        assert_eq!(cols[0], i.to_string());
    }
}

#[test]
fn damaged_checkpoints_are_format_errors() {
    let (cfg, _) = tiny();
    let t = Trainer::new(cfg, 1).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("c.ckpt");
    t.save(&p).unwrap();
    let good = std::fs::read(&p).unwrap();

    let cases: Vec<(&str, Vec<u8>)> = vec![
        ("magic", {
            let mut b = good.clone();
            b[0] = b'X';
            b
        }),
        ("truncated", good[..good.len() - 8].to_vec()),
        ("payload", {
            let mut b = good.clone();
            let n = b.len();
            b[n - 3] ^= 0x40;
            b
        }),
        ("empty", Vec::new()),
    ];
    for (what, bytes) in cases {
        std::fs::write(&p, bytes).unwrap();
        match Trainer::load(&p) {
            Err(e @ MarfError::Format(_)) => assert_eq!(e.exit_code(), 2),
            Err(e) => panic!("{what}: expected a format error, got {e}"),
            Ok(_) => panic!("{what}: damaged checkpoint loaded"),
        }
    }
    let missing = Trainer::load(&dir.path().join("none.ckpt")).err().unwrap();
    assert_eq!(missing.exit_code(), 2);
}

#[test]
fn oracle_scores_itself_perfectly() {
    let cfg = RunConfig::desk().eval;
    for spec in ["sphere:0.5", "torus:0.5,0.2", "sphere:0.3@0.45,0,0+sphere:0.3@-0.45,0,0"] {
        let shape = ShapeSource::parse(spec).unwrap();
        let r = evaluate(None, &shape, &cfg).unwrap();
        assert_eq!((r.precision, r.recall, r.iou), (1.0, 1.0, 1.0), "{spec}");
        assert_eq!(r.cd, 0.0);
        assert!((r.cos - 1.0).abs() < 1e-12);
    }
}

#[test]
fn exact_sphere_atom_scores_near_perfectly() {
    let cfg = RunConfig::desk().eval;
    let shape = ShapeSource::parse("sphere:0.5").unwrap();
    let field = Field::FixedAtoms(vec![MedialAtom::new(Vec3::zeros(), 0.5)]);
    let r = evaluate(Some(&field), &shape, &cfg).unwrap();
    assert!(r.iou >= 0.999, "{r:?}");
    assert!(r.cd <= 1e-5, "{r:?}");
    assert!(r.cos_medial.unwrap() > 0.999_999);
}

#[test]
fn chord_hit_fraction_matches_monte_carlo() {
    use rand::{Rng, SeedableRng};
    // Chords between uniform points on the unit sphere hit a centered ball
    // of radius 0.5 when their distance to the origin is below 0.5.
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
    let unit = |rng: &mut rand_chacha::ChaCha8Rng| loop {
        let v = Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
        let n = v.norm();
        if n > 1e-3 && n <= 1.0 {
            return v / n;
        }
    };
    let n = 200_000;
    let hits = (0..n)
        .filter(|_| {
            let (a, b) = (unit(&mut rng), unit(&mut rng));
            let d = (b - a).normalize();
            (a - d * a.dot(&d)).norm() < 0.5
        })
        .count();
    let expected = hits as f64 / n as f64;

    let rays = protocol_rays(4000, 20_000, 0);
    let shape = ShapeSource::parse("sphere:0.5").unwrap();
    let got = predict_oracle(&shape, &rays).hit.iter().filter(|&&h| h).count() as f64 / rays.len() as f64;
    assert!((got - expected).abs() < 0.01, "{got} vs {expected}");
}

#[test]
fn scoring_counts_only_shared_hits() {
    let shape = ShapeSource::parse("sphere:0.5").unwrap();
    let rays = protocol_rays(200, 2000, 1);
    let gt = predict_oracle(&shape, &rays);
    let bigger = Field::FixedAtoms(vec![MedialAtom::new(Vec3::zeros(), 0.6)]);
    let pred = predict_field(&bigger, &rays).unwrap();
    let r = score(&pred, &gt, 300, 0).unwrap();
    assert_eq!(r.recall, 1.0);
    assert!(r.precision < 1.0);
    assert_eq!(r.fn_, 0);
    assert!(r.tp > 300);
    assert_eq!(r.samples, 300);
    let all = score(&pred, &gt, 100_000, 0).unwrap();
    assert_eq!(all.samples, all.tp);
    assert_eq!(all.notes.len(), 1);
    assert!(r.cd > 0.05 && r.cd < 0.25, "{}", r.cd);
}

#[test]
fn results_header_is_stable() {
    assert_eq!(
        RESULTS_HEADER,
        "checkpoint,shape,seed,tp,fp,fn,tn,precision,recall,iou,cd,cos,cos_medial,rays,samples"
    );
}
