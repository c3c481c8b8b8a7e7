use aamulet::data_io::{write_manifest, write_pgm, BinaryMask, ImageSample};
use aamulet::metrics::{
    evaluate, evaluate_dataset, f_adaptive, f_max, f_measure, mae, mae_between, pr_curve, pr_threshold, s_measure,
    s_measure_parts, GroundTruth, SaliencyMap, ETA2, PR_THRESHOLDS,
};
use aamulet::rng::Rng;
use aamulet::tensor::{Dims, Tensor};
use aamulet::Error;
use proptest::prelude::*;

fn random_map(h: usize, w: usize, seed: u64) -> SaliencyMap {
    let mut rng = Rng::new(seed);
    SaliencyMap::from_fn(format!("m{seed}"), h, w, |_, _| rng.uniform()).unwrap()
}

fn random_gt(h: usize, w: usize, seed: u64, p: f64) -> GroundTruth {
    let mut rng = Rng::new(seed ^ 0xabc);
    GroundTruth::new(format!("g{seed}"), BinaryMask::from_fn(h, w, |_, _| rng.chance(p)))
}

fn constant(h: usize, w: usize, v: f64) -> SaliencyMap {
    SaliencyMap::new("c", h, w, vec![v; h * w]).unwrap()
}

fn flat(p: &SaliencyMap) -> Vec<f64> {
    p.values().to_vec()
}

fn labels(g: &GroundTruth) -> Vec<bool> {
    g.mask().data().iter().map(|&v| v == 1).collect()
}

/// (precision, recall) of one image at one threshold, counted pixel by pixel.
fn oracle_pr(p: &[f64], g: &[bool], t: f64) -> (f64, Option<f64>) {
    let (mut tp, mut fp, mut fneg) = (0u32, 0u32, 0u32);
    for i in 0..p.len() {
        let pos = p[i] > t;
        if pos && g[i] {
            tp += 1;
        }
        if pos && !g[i] {
            fp += 1;
        }
        if !pos && g[i] {
            fneg += 1;
        }
    }
    let precision = if tp + fp == 0 {
        1.0
    } else {
        tp as f64 / (tp + fp) as f64
    };
    let recall = if tp + fneg == 0 {
        None
    } else {
        Some(tp as f64 / (tp + fneg) as f64)
    };
    (precision, recall)
}

fn oracle_f(p: f64, r: f64) -> f64 {
    if 0.3 * p + r == 0.0 {
        0.0
    } else {
        1.3 * p * r / (0.3 * p + r)
    }
}

#[test]
fn perfect_binary_prediction_has_unit_precision_and_recall() {
    let g = random_gt(8, 8, 1, 0.4);
    let c = pr_curve(&[g.to_map()], &[g]).unwrap();
    assert_eq!(c.precision.len(), PR_THRESHOLDS);
    for k in 0..255 {
        assert_eq!((c.precision[k], c.recall[k]), (1.0, 1.0), "k = {k}");
    }
}

#[test]
fn all_ones_prediction_recalls_everything() {
    let g = random_gt(8, 8, 2, 0.3);
    let c = pr_curve(&[constant(8, 8, 1.0)], std::slice::from_ref(&g)).unwrap();
    for k in 0..255 {
        assert_eq!(c.recall[k], 1.0);
        assert_eq!(c.precision[k], g.mean());
    }
}

#[test]
fn pr_curve_matches_exhaustive_counting() {
    let preds: Vec<SaliencyMap> = (0..6).map(|s| random_map(8, 8, s)).collect();
    let gts: Vec<GroundTruth> = (0..6).map(|s| random_gt(8, 8, s, 0.35)).collect();
    for (p, g) in preds.iter().zip(&gts) {
        let single = pr_curve(std::slice::from_ref(p), std::slice::from_ref(g)).unwrap();
        for k in 0..PR_THRESHOLDS {
            let (op, or) = oracle_pr(&flat(p), &labels(g), k as f64 / 255.0);
            assert_eq!(single.precision[k], op);
            assert_eq!(single.recall[k], or.unwrap());
        }
    }
    let all = pr_curve(&preds, &gts).unwrap();
    for k in 0..PR_THRESHOLDS {
        let (mut ps, mut rs) = (0.0, 0.0);
        for (p, g) in preds.iter().zip(&gts) {
            let (op, or) = oracle_pr(&flat(p), &labels(g), k as f64 / 255.0);
            ps += op;
            rs += or.unwrap();
        }
        assert!((all.precision[k] - ps / 6.0).abs() <= 1e-12);
        assert!((all.recall[k] - rs / 6.0).abs() <= 1e-12);
    }
}

#[test]
fn quantized_maps_sweep_on_exact_levels() {
    // values sitting exactly on a threshold are not above it
    let p = SaliencyMap::new("q", 1, 3, vec![0.0, 128.0 / 255.0, 1.0]).unwrap();
    let g = GroundTruth::from_values("g", 1, 3, &[0.0, 1.0, 1.0]).unwrap();
    let c = pr_curve(&[p], &[g]).unwrap();
    assert_eq!(c.recall[127], 1.0);
    assert_eq!(c.recall[128], 0.5);
    assert_eq!(c.recall[255], 0.0);
    assert_eq!(c.precision[255], 1.0);
}

#[test]
fn pr_curve_rejects_mismatched_sizes() {
    let err = pr_curve(&[random_map(8, 8, 1)], &[random_gt(8, 7, 1, 0.5)]).unwrap_err();
    assert!(matches!(err, Error::Shape { .. }));
    assert!(matches!(pr_curve(&[], &[]), Err(Error::Input(_))));
}

#[test]
fn f_measure_examples() {
    for p in [0.0, 0.1, 0.37, 0.5, 0.9, 1.0] {
        assert!((f_measure(p, p, ETA2) - p).abs() <= 1e-12);
    }
    assert_eq!(f_measure(1.0, 0.0, ETA2), 0.0);
    assert!((f_measure(0.8, 0.6, 0.3) - 1.3 * 0.48 / 0.84).abs() < 1e-12);
    assert!((f_measure(0.8, 0.6, 0.3) - 0.742_857_142_857).abs() < 1e-11);
}

#[test]
fn adaptive_f_examples() {
    let g = GroundTruth::new("g", BinaryMask::from_fn(8, 8, |y, _| y < 2));
    assert_eq!(g.mean(), 0.25);
    assert_eq!(f_adaptive(&g.to_map(), &g).unwrap(), 1.0);
    assert_eq!(f_adaptive(&constant(8, 8, 0.0), &g).unwrap(), 0.0);
}

#[test]
fn adaptive_f_matches_recomputation() {
    for seed in 0..20 {
        let p = random_map(8, 8, seed);
        let g = random_gt(8, 8, seed, 0.3);
        let v = flat(&p);
        let t = (2.0 * v.iter().sum::<f64>() / 64.0).min(1.0);
        let l = labels(&g);
        let (mut tp, mut pos) = (0.0, 0.0);
        for i in 0..64 {
            if v[i] >= t {
                pos += 1.0;
                if l[i] {
                    tp += 1.0;
                }
            }
        }
        let fg = l.iter().filter(|&&b| b).count() as f64;
        let precision = if pos == 0.0 { 1.0 } else { tp / pos };
        let want = oracle_f(precision, tp / fg);
        assert!((f_adaptive(&p, &g).unwrap() - want).abs() < 1e-9);
    }
}

#[test]
fn f_max_is_the_best_threshold() {
    for seed in 0..10 {
        let p = random_map(8, 8, seed);
        let g = random_gt(8, 8, seed, 0.5);
        let best = (0..PR_THRESHOLDS)
            .map(|k| {
                let (op, or) = oracle_pr(&flat(&p), &labels(&g), pr_threshold(k));
                oracle_f(op, or.unwrap())
            })
            .fold(0.0, f64::max);
        assert!((f_max(&p, &g).unwrap() - best).abs() < 1e-12);
    }
}

#[test]
fn mae_examples_and_oracle() {
    let g = random_gt(8, 8, 4, 0.5);
    assert_eq!(mae(&g.to_map(), &g).unwrap(), 0.0);
    let empty = GroundTruth::new("z", BinaryMask::from_fn(8, 8, |_, _| false));
    assert_eq!(mae(&constant(8, 8, 1.0), &empty).unwrap(), 1.0);
    for seed in 0..10 {
        let p = random_map(8, 8, seed);
        let g = random_gt(8, 8, seed, 0.4);
        let mut sum = 0.0;
        for y in 0..8 {
            for x in 0..8 {
                sum += (p.get(y, x) - if g.get(y, x) { 1.0 } else { 0.0 }).abs();
            }
        }
        assert!((mae(&p, &g).unwrap() - sum / 64.0).abs() < 1e-12);
    }
    assert!(matches!(mae(&random_map(4, 4, 0), &g), Err(Error::Shape { .. })));
}

/// Independent structure-measure derivation: quadrants by label, moments in
/// two passes.
mod s_oracle {
    pub fn mean(v: &[f64]) -> f64 {
        v.iter().sum::<f64>() / v.len() as f64
    }

    fn object(v: &[f64]) -> f64 {
        if v.is_empty() {
            return 0.0;
        }
        let m = mean(v);
        let sd = if v.len() > 1 {
            (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64).sqrt()
        } else {
            0.0
        };
        2.0 * m / (m * m + 1.0 + sd + f64::EPSILON)
    }

    fn ssim(p: &[f64], g: &[f64]) -> f64 {
        let n = p.len() as f64;
        let (mx, my) = (mean(p), mean(g));
        let cov = |a: &[f64], ma: f64, b: &[f64], mb: f64| {
            a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum::<f64>() / (n - 1.0 + f64::EPSILON)
        };
        let (vx, vy, vxy) = (cov(p, mx, p, mx), cov(g, my, g, my), cov(p, mx, g, my));
        let a = 4.0 * mx * my * vxy;
        let b = (mx * mx + my * my) * (vx + vy);
        if a != 0.0 {
            a / (b + f64::EPSILON)
        } else if b == 0.0 {
            1.0
        } else {
            0.0
        }
    }

    /// Returns (object, region) for a non-degenerate ground truth.
    pub fn parts(p: &[f64], g: &[bool], h: usize, w: usize) -> (f64, f64) {
        let gf: Vec<f64> = g.iter().map(|&b| b as u8 as f64).collect();
        let u = mean(&gf);
        let fg: Vec<f64> = (0..p.len()).filter(|&i| g[i]).map(|i| p[i]).collect();
        let bg: Vec<f64> = (0..p.len()).filter(|&i| !g[i]).map(|i| 1.0 - p[i]).collect();
        let object = u * object(&fg) + (1.0 - u) * object(&bg);

        let cnt = fg.len() as f64;
        let cx = ((0..p.len()).filter(|&i| g[i]).map(|i| (i % w + 1) as f64).sum::<f64>() / cnt).round() as usize;
        let cy = ((0..p.len()).filter(|&i| g[i]).map(|i| (i / w + 1) as f64).sum::<f64>() / cnt).round() as usize;
        let mut quads: [(Vec<f64>, Vec<f64>); 4] = Default::default();
        for i in 0..p.len() {
            let (y, x) = (i / w, i % w);
            let q = usize::from(x >= cx) + 2 * usize::from(y >= cy);
            quads[q].0.push(p[i]);
            quads[q].1.push(gf[i]);
        }
        let region = quads
            .iter()
            .filter(|(qp, _)| !qp.is_empty())
            .map(|(qp, qg)| qp.len() as f64 / (h * w) as f64 * ssim(qp, qg))
            .sum();
        (object, region)
    }
}

#[test]
fn s_measure_hand_example() {
    // 1x2: the region half sees two single-pixel blocks, each scoring 1
    let p = SaliencyMap::new("p", 1, 2, vec![0.5, 0.5]).unwrap();
    let g = GroundTruth::from_values("g", 1, 2, &[1.0, 0.0]).unwrap();
    let parts = s_measure_parts(&p, &g).unwrap();
    assert!((parts.object - 0.8).abs() < 1e-12);
    assert_eq!(parts.region, 1.0);
    assert!((s_measure(&p, &g, 0.5).unwrap() - 0.9).abs() < 1e-12);
}

#[test]
fn s_measure_matches_rederivation() {
    for (seed, (h, w)) in [(8, 8), (9, 7), (5, 12), (16, 16)].into_iter().enumerate() {
        for k in 0..5 {
            let s = seed as u64 * 10 + k;
            let p = random_map(h, w, s);
            let g = random_gt(h, w, s, 0.2 + 0.1 * k as f64);
            let (o, r) = s_oracle::parts(&flat(&p), &labels(&g), h, w);
            let r = r.clamp(0.0, 1.0);
            let parts = s_measure_parts(&p, &g).unwrap();
            assert!((parts.object - o).abs() < 1e-12, "object {} vs {o}", parts.object);
            assert!((parts.region - r).abs() < 1e-12, "region {} vs {r}", parts.region);
        }
    }
}

#[test]
fn s_measure_perfect_and_constant() {
    for seed in 0..10 {
        let g = random_gt(12, 12, seed, 0.3);
        let perfect = s_measure(&g.to_map(), &g, 0.5).unwrap();
        assert!((perfect - 1.0).abs() < 1e-6, "{perfect}");
        let flat = s_measure(&constant(12, 12, g.mean()), &g, 0.5).unwrap();
        assert!(flat < perfect, "{flat}");
    }
}

#[test]
fn s_measure_degenerate_ground_truth() {
    let p = random_map(6, 6, 3);
    let empty = GroundTruth::new("e", BinaryMask::from_fn(6, 6, |_, _| false));
    let full = GroundTruth::new("f", BinaryMask::from_fn(6, 6, |_, _| true));
    assert!((s_measure(&p, &empty, 0.5).unwrap() - (1.0 - p.mean())).abs() < 1e-12);
    assert!((s_measure(&p, &full, 0.5).unwrap() - p.mean()).abs() < 1e-12);
    assert!(s_measure(&p, &full, 1.5).is_err());
}

#[test]
fn s_measure_endpoints_are_the_parts() {
    for seed in 0..10 {
        let p = random_map(10, 10, seed);
        let g = random_gt(10, 10, seed, 0.4);
        let parts = s_measure_parts(&p, &g).unwrap();
        assert_eq!(s_measure(&p, &g, 1.0).unwrap(), parts.object);
        if parts.region >= 0.0 {
            assert_eq!(s_measure(&p, &g, 0.0).unwrap(), parts.region);
        }
    }
}

fn sample_from(g: &GroundTruth) -> ImageSample {
    let image = Tensor::full(Dims::new(1, 3, g.height(), g.width()), 0.5f32);
    ImageSample::new(g.id(), image, g.mask().clone()).unwrap()
}

fn map_tensor(p: &SaliencyMap) -> Tensor<f32> {
    Tensor::new(
        Dims::new(1, 1, p.height(), p.width()),
        p.values().iter().map(|&v| v as f32).collect(),
    )
    .unwrap()
}

#[test]
fn perfect_dataset_scores_one() {
    let g = random_gt(16, 16, 5, 0.3);
    let r = evaluate(&[g.to_map()], &[g], 1).unwrap();
    assert_eq!(r.mean.f_adaptive, 1.0);
    assert_eq!(r.mean.f_max, 1.0);
    assert_eq!(r.mean.mae, 0.0);
    assert!((r.mean.s_measure - 1.0).abs() < 1e-6);
}

#[test]
fn dataset_means_match_recomputation() {
    let gts: Vec<GroundTruth> = (0..16).map(|s| random_gt(12, 12, s, 0.35)).collect();
    let preds: Vec<SaliencyMap> = (0..16).map(|s| random_map(12, 12, 100 + s)).collect();
    let r = evaluate(&preds, &gts, 1).unwrap();
    let (mut fa, mut fm, mut m, mut s) = (0.0, 0.0, 0.0, 0.0);
    for (p, g) in preds.iter().zip(&gts) {
        let (pv, gl) = (flat(p), labels(g));
        let t = (2.0 * s_oracle::mean(&pv)).min(1.0);
        let thresholded: Vec<f64> = pv.iter().map(|&v| if v >= t { 1.0 } else { 0.0 }).collect();
        let (ap, ar) = oracle_pr(&thresholded, &gl, 0.5);
        fa += oracle_f(ap, ar.unwrap());
        fm += (0..PR_THRESHOLDS)
            .map(|k| {
                let (op, or) = oracle_pr(&pv, &gl, k as f64 / 255.0);
                oracle_f(op, or.unwrap())
            })
            .fold(0.0, f64::max);
        m += pv
            .iter()
            .zip(&gl)
            .map(|(v, &b)| (v - b as u8 as f64).abs())
            .sum::<f64>()
            / pv.len() as f64;
        let (o, rg) = s_oracle::parts(&pv, &gl, 12, 12);
        s += 0.5 * o + 0.5 * rg.clamp(0.0, 1.0);
    }
    assert!((r.mean.f_adaptive - fa / 16.0).abs() < 1e-9);
    assert!((r.mean.f_max - fm / 16.0).abs() < 1e-9);
    assert!((r.mean.mae - m / 16.0).abs() < 1e-9);
    assert!((r.mean.s_measure - s / 16.0).abs() < 1e-9);

    let parallel = evaluate(&preds, &gts, 5).unwrap();
    assert_eq!(parallel, r);
}

#[test]
fn report_csv_layout() {
    let gts: Vec<GroundTruth> = (0..2).map(|s| random_gt(8, 8, s, 0.5)).collect();
    let preds: Vec<SaliencyMap> = (0..2).map(|s| random_map(8, 8, s)).collect();
    let r = evaluate(&preds, &gts, 1).unwrap();
    let csv = r.to_csv();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "id,f_adaptive,f_max,mae,s_measure");
    assert_eq!(lines.len(), 4);
    assert!(lines[1].starts_with("g0,"));
    assert!(lines[3].starts_with("MEAN,"));
    let cols: Vec<&str> = lines[3].split(',').collect();
    assert!(cols[1..].iter().all(|c| c.split('.').nth(1).map(str::len) == Some(6)));
    let mean_mae: f64 = cols[3].parse().unwrap();
    assert!((mean_mae - (r.images[0].mae + r.images[1].mae) / 2.0).abs() < 1e-6);

    let pr = r.pr.to_csv();
    let pr_lines: Vec<&str> = pr.lines().collect();
    assert_eq!(pr_lines[0], "threshold,precision,recall");
    assert_eq!(pr_lines.len(), 257);
    assert!(pr_lines[256].starts_with("1.000000,"));
}

#[test]
fn dataset_evaluation_from_files() {
    let dir = tempfile::tempdir().unwrap();
    let gts: Vec<GroundTruth> = (0..3).map(|s| random_gt(10, 10, s, 0.3)).collect();
    let manifest = write_manifest(
        &gts.iter().map(sample_from).collect::<Vec<_>>(),
        dir.path().join("data"),
    )
    .unwrap();
    let pred_dir = dir.path().join("pred");
    std::fs::create_dir_all(&pred_dir).unwrap();

    let err = evaluate_dataset(&pred_dir, &manifest, 1).unwrap_err();
    assert!(matches!(err, Error::MissingData(ref ids) if ids.len() == 3));

    let preds: Vec<SaliencyMap> = (0..3).map(|s| random_map(10, 10, s)).collect();
    for (p, g) in preds.iter().zip(&gts).take(2) {
        write_pgm(pred_dir.join(format!("{}.pgm", g.id())), &map_tensor(p)).unwrap();
    }
    let err = evaluate_dataset(&pred_dir, &manifest, 1).unwrap_err();
    assert!(
        matches!(err, Error::MissingData(ref ids) if ids == &["g2".to_string()]),
        "{err}"
    );

    for g in &gts {
        write_pgm(pred_dir.join(format!("{}.pgm", g.id())), &g.mask().to_tensor()).unwrap();
    }
    let r = evaluate_dataset(&pred_dir, &manifest, 2).unwrap();
    assert_eq!(r.images.len(), 3);
    assert_eq!(r.mean.f_adaptive, 1.0);
    assert_eq!(r.mean.mae, 0.0);
    assert!(r
        .to_csv()
        .lines()
        .last()
        .unwrap()
        .starts_with("MEAN,1.000000,1.000000,0.000000,1.000000"));
}

fn map_and_gt() -> impl Strategy<Value = (SaliencyMap, GroundTruth, SaliencyMap)> {
    (2usize..10, 2usize..10).prop_flat_map(|(h, w)| {
        (
            prop::collection::vec(0.0f64..=1.0, h * w),
            prop::collection::vec(any::<bool>(), h * w),
            prop::collection::vec(0.0f64..=1.0, h * w),
        )
            .prop_map(move |(p, g, q)| {
                (
                    SaliencyMap::new("p", h, w, p).unwrap(),
                    GroundTruth::new(
                        "g",
                        BinaryMask::new(h, w, g.into_iter().map(u8::from).collect()).unwrap(),
                    ),
                    SaliencyMap::new("q", h, w, q).unwrap(),
                )
            })
    })
}

proptest! {
    #[test]
    fn metrics_stay_in_unit_interval((p, g, _) in map_and_gt()) {
        for v in [f_adaptive(&p, &g).unwrap(), f_max(&p, &g).unwrap(), mae(&p, &g).unwrap(), s_measure(&p, &g, 0.5).unwrap()] {
            prop_assert!((0.0..=1.0).contains(&v), "{v}");
        }
        let c = pr_curve(std::slice::from_ref(&p), std::slice::from_ref(&g)).unwrap();
        prop_assert!(c.precision.iter().chain(&c.recall).all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn mae_is_symmetric((p, _, q) in map_and_gt()) {
        prop_assert_eq!(mae_between(&p, &q).unwrap(), mae_between(&q, &p).unwrap());
    }

    #[test]
    fn f_measure_fixed_point(p in 0.0f64..=1.0) {
        prop_assert!((f_measure(p, p, ETA2) - p).abs() <= 1e-12);
    }

    #[test]
    fn recall_never_rises_with_the_threshold((p, g, _) in map_and_gt()) {
        prop_assume!(g.mask().foreground_count() > 0);
        let c = pr_curve(&[p], &[g]).unwrap();
        prop_assert!(c.recall.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn s_measure_is_affine_in_lambda((p, g, _) in map_and_gt(), lambda in 0.0f64..=1.0) {
        let parts = s_measure_parts(&p, &g).unwrap();
        prop_assume!(parts.region >= 0.0);
        let (s0, s1) = (s_measure(&p, &g, 0.0).unwrap(), s_measure(&p, &g, 1.0).unwrap());
        let s = s_measure(&p, &g, lambda).unwrap();
        prop_assert!((s - (lambda * s1 + (1.0 - lambda) * s0)).abs() < 1e-12);
    }
}
