use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};
use trajflow::degsim::{
    build_dataset, degrade, gaussian_kernel, psnr, reflect_index, render_scene, DataConfig,
    DegradationOp, SceneKind,
};
use trajflow::image::Image;
use trajflow::numcore::RngState;
use trajflow::par::Exec;

/// Direct 2-D convolution with the outer-product kernel and mirrored edges.
fn convolve_2d(img: &Image, sigma: f64) -> Vec<f64> {
    let taps = gaussian_kernel(sigma);
    let r = (taps.len() / 2) as i64;
    let (_, h, w) = img.dims();
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for dy in -r..=r {
                for dx in -r..=r {
                    let k = taps[(dy + r) as usize] * taps[(dx + r) as usize];
                    let sy = reflect_index(y as i64 + dy, h);
                    let sx = reflect_index(x as i64 + dx, w);
                    acc += k * img.at(0, sy, sx);
                }
            }
            out[y * w + x] = acc.clamp(0.0, 1.0);
        }
    }
    out
}

#[test]
fn blur_matches_direct_convolution() {
    let op = DegradationOp::default();
    for (seed, kind) in [(1, SceneKind::Checker), (2, SceneKind::BlobMixture), (3, SceneKind::Gradient)] {
        let img = render_scene(seed, kind).image;
        for s in [1.5, 2.0, 3.0, 4.0] {
            let fast = degrade(&img, s, &op).unwrap();
            let slow = convolve_2d(&img, op.sigma(s).unwrap());
            let worst = fast
                .pixels()
                .iter()
                .zip(&slow)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            assert!(worst < 1e-10, "{kind:?} s={s}: {worst}");
        }
    }
}

#[test]
fn psnr_matches_loop_oracle() {
    let mut rng = RngState::new(4);
    for _ in 0..50 {
        let a: Vec<f64> = (0..256).map(|_| rng.uniform()).collect();
        let b: Vec<f64> = (0..256).map(|_| rng.uniform()).collect();
        let mut sq = 0.0;
        for i in 0..256 {
            sq += (a[i] - b[i]) * (a[i] - b[i]);
        }
        let oracle = 10.0 * (1.0 / (sq / 256.0)).log10();
        let got = psnr(
            &Image::new(1, 16, 16, a).unwrap(),
            &Image::new(1, 16, 16, b).unwrap(),
        )
        .unwrap();
        assert!((got - oracle).abs() < 1e-9);
    }
}

#[test]
fn psnr_falls_with_scale() {
    let op = DegradationOp::default();
    for seed in 0..30 {
        let img = render_scene(seed, SceneKind::ALL[seed as usize % 3]).image;
        let mut last = f64::INFINITY;
        for i in 0..=12 {
            let s = 1.0 + 0.25 * i as f64;
            let p = psnr(&degrade(&img, s, &op).unwrap(), &img).unwrap();
            assert!(p <= last + 1e-12, "seed {seed} s={s}");
            last = p;
        }
    }
}

#[test]
fn kernel_sums_to_one_and_mean_is_kept_on_constant_rows() {
    for i in 1..40 {
        let taps = gaussian_kernel(0.1 * i as f64);
        assert!((taps.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
    let rows: Vec<f64> = (0..16).flat_map(|y| std::iter::repeat_n(y as f64 / 15.0, 16)).collect();
    let img = Image::new(1, 16, 16, rows).unwrap();
    let out = degrade(&img, 2.5, &DegradationOp::default()).unwrap();
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    for x in 0..16 {
        for y in 0..16 {
            assert!((out.at(0, y, x) - out.at(0, y, 0)).abs() < 1e-12);
        }
    }
    assert!((mean(out.pixels()) - mean(img.pixels())).abs() < 0.02);
}

fn digest_tree(root: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                out.insert(rel, Sha256::digest(fs::read(&path).unwrap()).to_vec());
            }
        }
    }
    out
}

#[test]
fn regeneration_is_byte_identical() {
    let cfg = DataConfig {
        n_train_scenes: 6,
        n_eval_scenes: 3,
        ..DataConfig::default()
    };
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    build_dataset(&cfg, 21, a.path(), Exec::Parallel).unwrap();
    build_dataset(&cfg, 21, b.path(), Exec::Sequential).unwrap();
    let (da, db) = (digest_tree(a.path()), digest_tree(b.path()));
    assert_eq!(da.len(), 9 * 4 + 1);
    assert_eq!(da, db);
}

#[test]
fn empty_dataset_is_allowed() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = DataConfig {
        n_train_scenes: 0,
        n_eval_scenes: 0,
        ..DataConfig::default()
    };
    let ds = build_dataset(&cfg, 0, dir.path(), Exec::default()).unwrap();
    assert!(ds.manifest.scenes.is_empty());
    assert!(dir.path().join("manifest.json").exists());
}
