use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use catanet::data::{checkpoint_save, degrade_bicubic, load_image, psnr_y, save_image, ssim_y};
use catanet::network::{Model, ModelConfig};
use catanet::tensor::bicubic_resize_to;
use catanet::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tempfile::TempDir;

fn catanet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_catanet"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap_or(-1)
}

const TINY: [&str; 16] = [
    "--dim",
    "8",
    "--groups",
    "1",
    "--centers",
    "2",
    "--group-size",
    "8",
    "--heads",
    "2",
    "--patch",
    "4",
    "--overlap",
    "1",
    "--scale",
    "2",
];

fn tiny_config() -> ModelConfig {
    ModelConfig {
        dim: 8,
        groups: 1,
        centers: 2,
        group_size: 8,
        refine_iters: 2,
        decay: 0.999,
        heads: 2,
        patch: 4,
        overlap: 1,
        ffn_expand: 2.0,
        scale: 2,
    }
}

fn write_pngs(dir: &Path, n: usize, h: usize, w: usize, seed: u64) -> Vec<PathBuf> {
    std::fs::create_dir_all(dir).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let p = dir.join(format!("img{i}.png"));
            let t = Tensor::rand_uniform(&[3, h, w], 0.0, 1.0, &mut rng);
            save_image(&t, &p).unwrap();
            p
        })
        .collect()
}

fn save_model(model: &Model, dir: &Path, name: &str) -> PathBuf {
    let p = dir.join(name);
    checkpoint_save(model, &p).unwrap();
    p
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn params_matches_closed_form_and_repeats() {
    let a = catanet(&["params"]);
    assert_eq!(code(&a), 0);
    let out = stdout(&a);
    assert!(out.contains("params=535088\n"), "{out}");
    assert!(out.contains("buffers=16384\n"));
    assert_eq!(stdout(&catanet(&["params"])), out);
}

#[test]
fn config_file_then_flags() {
    let dir = TempDir::new().unwrap();
    let cfg = dir.path().join("m.cfg");
    std::fs::write(&cfg, "# small\ndim=16\nheads=2\n").unwrap();
    let base = stdout(&catanet(&["params", "--config", s(&cfg), "--size", "8", "8"]));
    let over = stdout(&catanet(&[
        "params",
        "--config",
        s(&cfg),
        "--dim",
        "8",
        "--size",
        "8",
        "8",
    ]));
    let flag = stdout(&catanet(&[
        "params", "--dim", "8", "--heads", "2", "--size", "8", "8",
    ]));
    assert_ne!(base, over);
    assert_eq!(over, flag);
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(code(&catanet(&["params", "--no-such-flag"])), 1);
    assert_eq!(code(&catanet(&["params", "--dim", "10", "--heads", "3"])), 1);
    assert_eq!(code(&catanet(&["params", "--preset", "XL"])), 1);
    assert_eq!(code(&catanet(&["--help"])), 0);
    let o = Command::new(env!("CARGO_BIN_EXE_catanet"))
        .args(["params"])
        .env("CATANET_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(code(&o), 1);
}

#[test]
fn io_errors_exit_two() {
    let dir = TempDir::new().unwrap();
    let o = catanet(&[
        "infer",
        "--checkpoint",
        "/no/such.ckpt",
        "--input",
        "a.png",
        "--output",
        "b.png",
    ]);
    assert_eq!(code(&o), 2);
    let junk = dir.path().join("junk.ckpt");
    std::fs::write(&junk, b"not a checkpoint").unwrap();
    let o = catanet(&[
        "infer",
        "--checkpoint",
        s(&junk),
        "--input",
        "a.png",
        "--output",
        "b.png",
    ]);
    assert_eq!(code(&o), 2);
}

#[test]
fn scale_conflict_is_rejected() {
    let dir = TempDir::new().unwrap();
    let ck = save_model(&Model::new(tiny_config(), 0).unwrap(), dir.path(), "m.ckpt");
    let img = &write_pngs(&dir.path().join("in"), 1, 6, 6, 0)[0];
    let out = dir.path().join("o.png");
    let o = catanet(&[
        "infer",
        "--checkpoint",
        s(&ck),
        "--input",
        s(img),
        "--output",
        s(&out),
        "--scale",
        "3",
    ]);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("conflicts"));
}

#[test]
fn zero_model_infers_bicubic() {
    let dir = TempDir::new().unwrap();
    let mut m = Model::new(tiny_config(), 3).unwrap();
    m.zero_reconstruction();
    let ck = save_model(&m, dir.path(), "zero.ckpt");
    let img = &write_pngs(&dir.path().join("in"), 1, 7, 9, 1)[0];
    let out = dir.path().join("sr.png");
    assert_eq!(
        code(&catanet(&[
            "infer",
            "--checkpoint",
            s(&ck),
            "--input",
            s(img),
            "--output",
            s(&out)
        ])),
        0
    );
    let lr = load_image(img).unwrap();
    let want = dir.path().join("bicubic.png");
    save_image(&bicubic_resize_to(&lr, 14, 18).unwrap(), &want).unwrap();
    let (a, b) = (load_image(&out).unwrap(), load_image(&want).unwrap());
    assert_eq!(psnr_y(&a, &b, 0).unwrap(), f64::INFINITY);
}

#[test]
fn infer_repeats_and_ensemble_differs() {
    let dir = TempDir::new().unwrap();
    let ck = save_model(&Model::new(tiny_config(), 5).unwrap(), dir.path(), "m.ckpt");
    let img = &write_pngs(&dir.path().join("in"), 1, 8, 6, 2)[0];
    let run = |name: &str, extra: &[&str]| {
        let out = dir.path().join(name);
        let mut args = vec![
            "infer",
            "--checkpoint",
            s(&ck),
            "--input",
            s(img),
            "--output",
            s(&out),
        ];
        args.extend_from_slice(extra);
        assert_eq!(code(&catanet(&args)), 0);
        std::fs::read(&out).unwrap()
    };
    let a = run("a.png", &[]);
    assert_eq!(a, run("b.png", &[]));
    let e = run("e.png", &["--self-ensemble"]);
    assert_ne!(a, e);
    assert_eq!(e, run("f.png", &["--self-ensemble"]));
}

fn parse_csv(text: &str) -> Vec<(String, f64, f64)> {
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("image,psnr_db,ssim"));
    lines
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            (f[0].to_string(), f[1].parse().unwrap(), f[2].parse().unwrap())
        })
        .collect()
}

#[test]
fn eval_zero_model_reports_bicubic_baseline() {
    let dir = TempDir::new().unwrap();
    let mut m = Model::new(tiny_config(), 4).unwrap();
    m.zero_reconstruction();
    let ck = save_model(&m, dir.path(), "zero.ckpt");
    let hr_dir = dir.path().join("hr");
    let paths = write_pngs(&hr_dir, 3, 16, 18, 7);
    let o = catanet(&["eval", "--checkpoint", s(&ck), "--hr-dir", s(&hr_dir)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let rows = parse_csv(&stdout(&o));
    assert_eq!(rows.len(), 4);
    for (p, row) in paths.iter().zip(&rows) {
        let hr = load_image(p).unwrap();
        let up = bicubic_resize_to(&degrade_bicubic(&hr, 2).unwrap(), 16, 18).unwrap();
        assert_eq!(row.0, p.file_name().unwrap().to_str().unwrap());
        assert_eq!(row.1, psnr_y(&up, &hr, 2).unwrap());
        assert_eq!(row.2, ssim_y(&up, &hr, 2).unwrap());
    }
    let mean = &rows[3];
    assert_eq!(mean.0, "mean");
    assert!((mean.1 - rows[..3].iter().map(|r| r.1).sum::<f64>() / 3.0).abs() < 1e-9);
    assert!((mean.2 - rows[..3].iter().map(|r| r.2).sum::<f64>() / 3.0).abs() < 1e-9);

    let csv = dir.path().join("scores.csv");
    let o = catanet(&[
        "eval",
        "--checkpoint",
        s(&ck),
        "--hr-dir",
        s(&hr_dir),
        "--csv",
        s(&csv),
    ]);
    assert_eq!(code(&o), 0);
    assert_eq!(
        std::fs::read_to_string(&csv).unwrap(),
        stdout(&catanet(&[
            "eval",
            "--checkpoint",
            s(&ck),
            "--hr-dir",
            s(&hr_dir)
        ]))
    );
}

#[test]
fn eval_empty_dir_is_usage_error() {
    let dir = TempDir::new().unwrap();
    let ck = save_model(&Model::new(tiny_config(), 0).unwrap(), dir.path(), "m.ckpt");
    let empty = dir.path().join("empty");
    std::fs::create_dir(&empty).unwrap();
    assert_eq!(
        code(&catanet(&["eval", "--checkpoint", s(&ck), "--hr-dir", s(&empty)])),
        1
    );
}

#[test]
fn train_then_infer_round_trip() {
    let dir = TempDir::new().unwrap();
    let data = dir.path().join("data");
    write_pngs(&data, 4, 12, 12, 9);
    let ck = dir.path().join("toy.ckpt");
    let mut args = vec![
        "train",
        "--data",
        s(&data),
        "--out",
        s(&ck),
        "--steps",
        "4",
        "--crop",
        "8",
        "--batch",
        "2",
    ];
    args.extend_from_slice(&TINY);
    let o = catanet(&args);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let csv = std::fs::read_to_string(dir.path().join("toy.ckpt.loss.csv")).unwrap();
    assert!(csv.starts_with("step,loss,lr\n"));
    assert_eq!(csv.lines().count(), 5);

    let img = dir.path().join("data").join("img0.png");
    let out = dir.path().join("sr.png");
    assert_eq!(
        code(&catanet(&[
            "infer",
            "--checkpoint",
            s(&ck),
            "--input",
            s(&img),
            "--output",
            s(&out)
        ])),
        0
    );
    assert_eq!(load_image(&out).unwrap().shape(), &[3, 24, 24]);

    let ck2 = dir.path().join("again.ckpt");
    args[4] = s(&ck2);
    assert_eq!(code(&catanet(&args)), 0);
    assert_eq!(std::fs::read(&ck).unwrap(), std::fs::read(&ck2).unwrap());
}

fn read_masks(dir: &Path) -> Vec<Tensor> {
    let mut paths: Vec<_> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .collect();
    paths.sort();
    paths.iter().map(|p| load_image(p).unwrap()).collect()
}

#[test]
fn group_vis_masks_partition() {
    let dir = TempDir::new().unwrap();
    let mut cfg = tiny_config();
    cfg.centers = 4;
    cfg.groups = 2;
    let ck = save_model(&Model::new(cfg, 2).unwrap(), dir.path(), "m.ckpt");
    let img = &write_pngs(&dir.path().join("in"), 1, 9, 10, 3)[0];
    let out = dir.path().join("masks");
    let o = catanet(&[
        "group-vis",
        "--checkpoint",
        s(&ck),
        "--input",
        s(img),
        "--out-dir",
        s(&out),
        "--rg",
        "1",
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let masks = read_masks(&out);
    assert!(!masks.is_empty());
    for p in 0..90 {
        let on = masks.iter().filter(|m| m.data()[p] == 1.0).count();
        assert_eq!(on, 1);
        assert!(masks.iter().all(|m| m.data()[p] == 0.0 || m.data()[p] == 1.0));
    }
    let o = catanet(&[
        "group-vis",
        "--checkpoint",
        s(&ck),
        "--input",
        s(img),
        "--out-dir",
        s(&out),
        "--rg",
        "2",
    ]);
    assert_eq!(code(&o), 1);
}

#[test]
fn group_vis_single_center_is_all_white() {
    let dir = TempDir::new().unwrap();
    let mut cfg = tiny_config();
    cfg.centers = 1;
    let ck = save_model(&Model::new(cfg, 2).unwrap(), dir.path(), "m.ckpt");
    let img = &write_pngs(&dir.path().join("in"), 1, 5, 6, 4)[0];
    let out = dir.path().join("masks");
    assert_eq!(
        code(&catanet(&[
            "group-vis",
            "--checkpoint",
            s(&ck),
            "--input",
            s(img),
            "--out-dir",
            s(&out)
        ])),
        0
    );
    let masks = read_masks(&out);
    assert_eq!(masks.len(), 1);
    assert!(masks[0].data().iter().all(|&v| v == 1.0));
}

#[test]
fn bench_report_shape() {
    for mode in ["subgrouped", "naive-groups"] {
        let mut args = vec!["bench", "--size", "6", "6", "--mode", mode];
        args.extend_from_slice(&TINY);
        let o = catanet(&args);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        let out = stdout(&o);
        assert!(out.contains(&format!("mode={mode} samples=100 ")), "{out}");
        let field = |k: &str| -> f64 {
            out.split_whitespace()
                .find_map(|t| t.strip_prefix(&format!("{k}=")))
                .unwrap()
                .parse()
                .unwrap()
        };
        assert!(field("min_ms") <= field("mean_ms") && field("mean_ms") <= field("max_ms"));
    }
    assert_eq!(code(&catanet(&["bench", "--mode", "fast"])), 1);
}
