use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn marf(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_marf"))
        .args(args)
        .env_remove("MARF_THREADS")
        .output()
        .expect("spawn marf")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

const TINY: &str = r#"{
  "preset": "desk",
  "network": {"hidden_layers": 2, "width": 16, "n_atoms": 4},
  "train": {"epochs": 2, "hold_epochs": 1, "decay_epochs": 1, "warmup_steps": 2},
  "data": {"stride": 4},
  "eval": {"viewpoints": 40, "ray_budget": 400, "samples": 100}
}"#;

struct Run {
    dir: tempfile::TempDir,
}

impl Run {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("tiny.json"), TINY).unwrap();
        Self { dir }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn dataset(&self, shapes: &[&str]) -> PathBuf {
        let out = self.path("d.marfds");
        let mut args = vec!["dataset", "--views", "3", "--res", "16", "--out", s(&out)];
        for sh in shapes {
            args.extend(["--shape", sh]);
        }
        let o = marf(&args);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        out
    }

    fn train(&self, data: &Path, out: &str, extra: &[&str]) -> PathBuf {
        let ckpt = self.path(out);
        let cfg = self.path("tiny.json");
        let mut args = vec!["--threads", "1", "train", "--quiet", "--config", s(&cfg), "--dataset", s(data), "--out", s(&ckpt)];
        args.extend(extra);
        let o = marf(&args);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        ckpt
    }
}

fn strip_wall(csv: &str) -> Vec<String> {
    csv.lines().map(|l| l.rsplit_once(',').unwrap().0.to_string()).collect()
}

#[test]
fn dataset_writes_a_valid_file_and_sidecar() {
    let r = Run::new();
    let out = r.path("s.marfds");
    let o = marf(&["dataset", "--shape", "sphere:0.5", "--views", "20", "--res", "16", "--out", s(&out)]);
    assert_eq!(code(&o), 0);
    let bytes = std::fs::read(&out).unwrap();
    assert_eq!(&bytes[..8], b"MARFDS1\0");
    assert_eq!(u32::from_le_bytes(bytes[16..20].try_into().unwrap()), 20);
    let side: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(r.path("s.marfds.json")).unwrap()).unwrap();
    assert_eq!(side["shapes"][0], "sphere:0.5");
}

#[test]
fn bad_input_exits_with_usage_code() {
    let r = Run::new();
    let out = r.path("x.marfds");
    let o = marf(&["dataset", "--shape", "blob:1", "--out", s(&out)]);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("usage"));
    assert_eq!(code(&marf(&["dataset"])), 1);
    assert_eq!(code(&marf(&["frobnicate"])), 1);
    assert_eq!(code(&marf(&["--help"])), 0);
    let o = Command::new(env!("CARGO_BIN_EXE_marf"))
        .args(["gradcheck", "--term", "p"])
        .env("MARF_THREADS", "many")
        .output()
        .unwrap();
    assert_eq!(code(&o), 1);
}

#[test]
fn gradcheck_passes_and_its_self_test_fails() {
    let o = marf(&["gradcheck", "--term", "mv"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let rep: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(rep["passed"], true);
    assert_eq!(rep["terms"][0]["term"], "mv");
    let o = marf(&["gradcheck", "--term", "p", "--perturb", "0.01"]);
    assert_eq!(code(&o), 3);
}

#[test]
fn oracle_eval_is_perfect() {
    let o = marf(&["eval", "--oracle", "--shape", "torus:0.5,0.2", "--viewpoints", "50", "--rays", "1000", "--samples", "200"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let rep: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(rep["iou"], 1.0);
    assert_eq!(rep["cd"], 0.0);
}

#[test]
fn missing_checkpoint_fails() {
    let r = Run::new();
    let o = marf(&["eval", "--checkpoint", s(&r.path("nope.ckpt")), "--shape", "sphere:0.5"]);
    assert_eq!(code(&o), 2);
    let o = marf(&["render", "--checkpoint", s(&r.path("nope.ckpt")), "--out", s(&r.path("a.ppm"))]);
    assert_ne!(code(&o), 0);
}

#[test]
fn train_render_eval_and_resume() {
    let r = Run::new();
    let data = r.dataset(&["sphere:0.5"]);
    let full = r.train(&data, "full.ckpt", &[]);
    let metrics = std::fs::read_to_string(r.path("full.ckpt.metrics.csv")).unwrap();
    assert_eq!(metrics.lines().next().unwrap(), "epoch,lr,p,n,s,h,r,ih,im,sigma,mv,z,bce,total,wall_secs");
    assert_eq!(metrics.lines().count(), 3);

    // Resuming after one epoch continues exactly.
    let half = r.train(&data, "half.ckpt", &["--epochs", "1"]);
    let o = marf(&["--threads", "1", "train", "--quiet", "--dataset", s(&data), "--out", s(&half), "--resume", s(&half), "--epochs", "2"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(std::fs::read(&half).unwrap(), std::fs::read(&full).unwrap());
    let resumed = std::fs::read_to_string(r.path("half.ckpt.metrics.csv")).unwrap();
    assert_eq!(strip_wall(&resumed), strip_wall(&metrics));

    for mode in [
        "lambertian",
        "candidate_color",
        "medial_axis",
        "medial_radius",
        "medial_normal_rgb",
        "analytical_normal_rgb",
        "mean_curvature",
        "translucency",
        "ward",
    ] {
        let img = r.path(&format!("{mode}.ppm"));
        let o = marf(&["render", "--checkpoint", s(&full), "--mode", mode, "--width", "24", "--height", "20", "--out", s(&img)]);
        assert_eq!(code(&o), 0, "{mode}: {}", String::from_utf8_lossy(&o.stderr));
        let bytes = std::fs::read(&img).unwrap();
        assert!(bytes.starts_with(b"P6\n24 20\n255\n"));
        assert_eq!(bytes.len(), b"P6\n24 20\n255\n".len() + 24 * 20 * 3);
        let stats: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(r.path(&format!("{mode}.ppm.stats.json"))).unwrap()).unwrap();
        assert_eq!(stats["stats"]["mode"], mode);
    }
    let o = marf(&["render", "--checkpoint", s(&full), "--mode", "sketch", "--out", s(&r.path("x.ppm"))]);
    assert_eq!(code(&o), 1);

    let o = marf(&["render", "--checkpoint", s(&full), "--orbit", "8", "--width", "8", "--height", "8", "--out", s(&r.path("orbit.ppm"))]);
    assert_eq!(code(&o), 0);
    for k in 0..8 {
        assert!(r.path(&format!("orbit_{k:03}.ppm")).exists());
    }

    let results = r.path("results.csv");
    let o = marf(&["eval", "--checkpoint", s(&full), "--dataset", s(&data), "--results", s(&results)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let rep: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert!(rep["cos_medial"].is_number());
    assert!(rep["cos"].is_number());
    let table = std::fs::read_to_string(&results).unwrap();
    assert!(table.starts_with("checkpoint,shape,seed,tp,fp,fn,tn,precision,recall,iou,cd,cos,cos_medial,rays,samples\n"));
    assert_eq!(table.lines().count(), 2);
}

#[test]
fn rendering_is_deterministic() {
    let r = Run::new();
    let data = r.dataset(&["sphere:0.4"]);
    let ckpt = r.train(&data, "c.ckpt", &["--epochs", "1"]);
    let render = |name: &str| {
        let p = r.path(name);
        let o = marf(&["render", "--checkpoint", s(&ckpt), "--mode", "ward", "--width", "32", "--height", "32", "--out", s(&p)]);
        assert_eq!(code(&o), 0);
        std::fs::read(p).unwrap()
    };
    assert_eq!(render("a.ppm"), render("b.ppm"));
}

#[test]
fn latent_interpolation_and_prif() {
    let r = Run::new();
    let data = r.dataset(&["sphere:0.4", "box:0.3,0.3,0.3"]);
    let o = marf(&["train", "--quiet", "--config", s(&r.path("tiny.json")), "--dataset", s(&data), "--out", s(&r.path("x.ckpt"))]);
    assert_eq!(code(&o), 1, "multi-shape data without a latent must be rejected");
    let ckpt = r.train(&data, "multi.ckpt", &["--epochs", "1", "--latent-dim", "4"]);
    let o = marf(&["render", "--checkpoint", s(&ckpt), "--latent-interp", "0", "1", "4", "--width", "8", "--height", "8", "--out", s(&r.path("i.ppm"))]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let o = marf(&["interp", "--checkpoint", s(&ckpt), "--width", "8", "--height", "8", "--out", s(&r.path("j.ppm")), "0", "1", "3"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    for k in 0..4 {
        assert!(r.path(&format!("i_{k:03}.ppm")).exists());
    }
    for k in 0..3 {
        assert!(r.path(&format!("j_{k:03}.ppm")).exists());
    }
    // End points of the path are the training latents themselves.
    let single = r.path("s.ppm");
    let o = marf(&["render", "--checkpoint", s(&ckpt), "--shape-id", "1", "--width", "8", "--height", "8", "--out", s(&single)]);
    assert_eq!(code(&o), 0);
    assert_eq!(std::fs::read(&single).unwrap(), std::fs::read(r.path("i_003.ppm")).unwrap());

    let one = r.dataset(&["sphere:0.5"]);
    let prif = r.train(&one, "prif.ckpt", &["--epochs", "1", "--head", "prif", "--prif-normal", "--prif-multiview"]);
    let o = marf(&["render", "--checkpoint", s(&prif), "--mode", "analytical_normal_rgb", "--width", "8", "--height", "8", "--out", s(&r.path("p.ppm"))]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let o = marf(&["render", "--checkpoint", s(&prif), "--mode", "medial_radius", "--out", s(&r.path("q.ppm"))]);
    assert_eq!(code(&o), 1);
    let o = marf(&["eval", "--checkpoint", s(&prif), "--shape", "sphere:0.5"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
}
