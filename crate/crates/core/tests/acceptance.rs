//! Acceptance criteria, one PASS/FAIL line each. Exits nonzero on any failure.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::Instant;

use segqc::conformal::{
    calibrate, conformal_threshold, nonconformity_cqr, predict_interval, CalibrationRecord,
    ConformalCalibration, ConformalParams, NonconformityKind, QuantilePair,
};
use segqc::dataset::Case;
use segqc::metrics::{assd, dsc_binary, dsc_multiclass, hausdorff};
use segqc::pipeline::{calibrate_cases, evaluate_cases, PipelineConfig, SegmenterChoice};
use segqc::raster::GrayImage;
use segqc::rca::{ReferenceDatabase, ReferenceRecord, ScoreSet};
use segqc::report::pearson;
use segqc::retrieval::{EmbeddingIndex, EmbeddingVector, Similarity};
use segqc::segmenter::{atlas_register, atlas_segment, warp_mask, AtlasConfig};
use segqc::synthval::{
    run_synthetic_trial, sample_beta22, synth_score_set, SeededRng, SyntheticConfig,
};
use segqc::{EvaluationMetric, LabelMask, PointEstimate};

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn synthetic_coverage() -> Outcome {
    let start = Instant::now();
    let coverages: Vec<f64> = (0..50u64)
        .map(|seed| {
            let cfg = SyntheticConfig {
                seed,
                ..SyntheticConfig::default()
            };
            run_synthetic_trial::<f64>(&cfg)
                .map(|t| t.coverage)
                .map_err(|e| e.to_string())
        })
        .collect::<Result<_, _>>()?;
    let mean = coverages.iter().sum::<f64>() / coverages.len() as f64;
    let secs = start.elapsed().as_secs_f64();
    check(
        (0.89..=0.97).contains(&mean) && secs < 60.0,
        format!("mean coverage {mean:.4} over 50 seeds in {secs:.1}s"),
    )
}

fn cqr_calibration(q_hat: f64) -> ConformalCalibration<f64> {
    ConformalCalibration {
        alpha: 0.1,
        p_low: 0.4,
        p_high: 0.95,
        q_hat,
        n: 200,
        kind: NonconformityKind::CqrEmpirical,
        mode: PointEstimate::Max,
        metric: EvaluationMetric::Dsc,
        created_from: None,
    }
}

fn conformal_inversion() -> Outcome {
    let mut rng = SeededRng::new(7);
    let step = 1e-3;
    for trial in 0..1000 {
        let m = 1 + rng.below(64);
        let scores: Vec<f64> = (0..m).map(|_| rng.next_f64()).collect();
        let set = ScoreSet::from_scores(EvaluationMetric::Dsc, &scores).unwrap();
        let q_hat = if trial % 20 == 0 {
            f64::INFINITY
        } else {
            rng.next_f64() * 0.6 - 0.3
        };
        let pi = predict_interval(&set, &cqr_calibration(q_hat)).unwrap();
        let q = QuantilePair::from_scores(&set, 0.4, 0.95).unwrap();
        let inside: Vec<f64> = (0..=1000)
            .map(|i| i as f64 * step)
            .filter(|&y| nonconformity_cqr(&q, y) <= q_hat)
            .collect();
        let ok = match (inside.first(), inside.last()) {
            (Some(&lo), Some(&hi)) => {
                !pi.degenerate && (pi.lower - lo).abs() <= step && (pi.upper - hi).abs() <= step
            }
            _ => pi.degenerate || pi.width() <= step,
        };
        if !ok {
            return Err(format!(
                "trial {trial}: interval [{}, {}] vs grid set {:?}..{:?}",
                pi.lower,
                pi.upper,
                inside.first(),
                inside.last()
            ));
        }
    }
    Ok("1000 instances match the inversion set".into())
}

fn oracle_threshold(scores: &[f64], alpha_milli: usize) -> f64 {
    let n = scores.len();
    // ceil((1 - a/1000)(n + 1)) in integers
    let k = ((1000 - alpha_milli) * (n + 1)).div_ceil(1000);
    if k > n {
        return f64::INFINITY;
    }
    let mut sorted = scores.to_vec();
    sorted.sort_by(f64::total_cmp);
    sorted[k - 1]
}

fn threshold_rule() -> Outcome {
    let mut rng = SeededRng::new(11);
    let mut infinite = 0;
    let mut cases: Vec<(Vec<f64>, usize)> = vec![(vec![0.1, 0.2, 0.3, 0.4, 0.5], 100)];
    for _ in 1..1000 {
        let n = 1 + rng.below(500);
        let scores = (0..n)
            .map(|_| {
                // coarse values so ties occur
                if rng.below(4) == 0 {
                    rng.below(10) as f64 / 10.0
                } else {
                    rng.next_f64() * 2.0 - 1.0
                }
            })
            .collect();
        cases.push((scores, 1 + rng.below(999)));
    }
    for (scores, a) in &cases {
        let got = conformal_threshold(scores, *a as f64 / 1000.0).unwrap();
        let want = oracle_threshold(scores, *a);
        if got != want {
            return Err(format!(
                "n={} alpha={}: {got} != {want}",
                scores.len(),
                *a as f64 / 1000.0
            ));
        }
        if want.is_infinite() {
            infinite += 1;
        }
    }
    check(
        infinite > 0,
        format!("1000 vectors exact, {infinite} infinite"),
    )
}

fn random_mask(rng: &mut SeededRng, classes: usize, density: f64) -> LabelMask {
    LabelMask::from_fn(16, 16, classes, |_, _| {
        if rng.next_f64() < density {
            1 + rng.below(classes - 1) as u8
        } else {
            0
        }
    })
}

fn oracle_dice(a: &LabelMask, b: &LabelMask, class: u8) -> f64 {
    let (mut tp, mut fp, mut fn_) = (0usize, 0usize, 0usize);
    for (&p, &g) in a.labels().iter().zip(b.labels()) {
        tp += usize::from(p == class && g == class);
        fp += usize::from(p == class && g != class);
        fn_ += usize::from(p != class && g == class);
    }
    if tp + fp + fn_ == 0 {
        1.0
    } else {
        2.0 * tp as f64 / (2 * tp + fp + fn_) as f64
    }
}

fn oracle_boundary(m: &LabelMask) -> Vec<(f64, f64)> {
    let fg =
        |x: i64, y: i64| x >= 0 && y >= 0 && x < 16 && y < 16 && m.get(x as usize, y as usize) == 1;
    let mut out = Vec::new();
    for y in 0..16i64 {
        for x in 0..16i64 {
            if fg(x, y) && !(fg(x - 1, y) && fg(x + 1, y) && fg(x, y - 1) && fg(x, y + 1)) {
                out.push((x as f64, y as f64));
            }
        }
    }
    out
}

fn oracle_distances(a: &LabelMask, b: &LabelMask) -> (f64, f64) {
    let (ba, bb) = (oracle_boundary(a), oracle_boundary(b));
    let nearest = |p: &(f64, f64), set: &[(f64, f64)]| {
        set.iter()
            .map(|q| ((p.0 - q.0).powi(2) + (p.1 - q.1).powi(2)).sqrt())
            .fold(f64::INFINITY, f64::min)
    };
    let da: Vec<f64> = ba.iter().map(|p| nearest(p, &bb)).collect();
    let db: Vec<f64> = bb.iter().map(|p| nearest(p, &ba)).collect();
    let hd = da.iter().chain(&db).cloned().fold(0.0, f64::max);
    let mean = (da.iter().sum::<f64>() + db.iter().sum::<f64>()) / (da.len() + db.len()) as f64;
    (hd, mean)
}

fn metric_oracles() -> Outcome {
    let mut rng = SeededRng::new(13);
    for i in 0..1000 {
        let density = rng.next_f64();
        let (a, b) = (
            random_mask(&mut rng, 2, density),
            random_mask(&mut rng, 2, density),
        );
        let got: f64 = dsc_binary(&a, &b).unwrap();
        if got != oracle_dice(&a, &b, 1) {
            return Err(format!("binary instance {i}: {got}"));
        }
        let classes = 3 + rng.below(3);
        let (a, b) = (
            random_mask(&mut rng, classes, density),
            random_mask(&mut rng, classes, density),
        );
        let want = (1..classes as u8)
            .map(|c| oracle_dice(&a, &b, c))
            .sum::<f64>()
            / (classes - 1) as f64;
        let got: f64 = dsc_multiclass(&a, &b).unwrap();
        if got != want {
            return Err(format!("multiclass instance {i}: {got} != {want}"));
        }
    }
    let mut worst = 0.0f64;
    let mut done = 0;
    while done < 100 {
        let density = 0.05 + 0.9 * rng.next_f64();
        let (a, b) = (
            random_mask(&mut rng, 2, density),
            random_mask(&mut rng, 2, density),
        );
        if !a.labels().contains(&1) || !b.labels().contains(&1) {
            continue;
        }
        let (hd, mean) = oracle_distances(&a, &b);
        let h: f64 = hausdorff(&a, &b).unwrap();
        let s: f64 = assd(&a, &b).unwrap();
        worst = worst.max((h - hd).abs()).max((s - mean).abs());
        done += 1;
    }
    check(
        worst <= 1e-9,
        format!("dice exact on 1000, distance max error {worst:.2e} on 100"),
    )
}

fn retrieval_exactness() -> Outcome {
    let mut rng = SeededRng::new(17);
    let vector = |id: String, rng: &mut SeededRng| {
        EmbeddingVector::new(id, (0..64).map(|_| rng.next_normal() as f32).collect()).unwrap()
    };
    let data: Vec<_> = (0..1000)
        .map(|i| vector(format!("v{i}"), &mut rng))
        .collect();
    let index = EmbeddingIndex::new(data.clone()).unwrap();
    for qi in 0..100 {
        let q = vector(format!("q{qi}"), &mut rng);
        let mut scan: Vec<(f64, usize)> = data
            .iter()
            .enumerate()
            .map(|(i, v)| {
                let (mut dot, mut nv, mut nq) = (0.0f64, 0.0f64, 0.0f64);
                for (&x, &y) in v.values().iter().zip(q.values()) {
                    dot += x as f64 * y as f64;
                    nv += x as f64 * x as f64;
                    nq += y as f64 * y as f64;
                }
                (dot / (nv.sqrt() * nq.sqrt()), i)
            })
            .collect();
        scan.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        for k in [1, 8, 32, 2000] {
            let got: Vec<String> = index
                .top_k(&q, k, Similarity::Cosine)
                .unwrap()
                .into_iter()
                .map(|n| n.id)
                .collect();
            let want: Vec<String> = scan
                .iter()
                .take(k)
                .map(|&(_, i)| data[i].id.clone())
                .collect();
            if got != want {
                return Err(format!("query {qi}, k={k}: order differs"));
            }
        }
    }
    Ok("100 queries x 4 k values match the linear scan".into())
}

fn disk(n: usize, cx: f64, r: f64) -> (GrayImage<f64>, LabelMask) {
    let cy = n as f64 / 2.0 - 0.5;
    let img = GrayImage::from_fn(n, n, |x, y| {
        let d = ((x as f64 - cx).powi(2) + (y as f64 - cy).powi(2)).sqrt();
        0.1 + 0.8 / (1.0 + ((d - r) / 1.5).exp())
    });
    let mask = LabelMask::from_fn(n, n, 2, |x, y| {
        u8::from((x as f64 - cx).powi(2) + (y as f64 - cy).powi(2) <= r * r)
    });
    (img, mask)
}

fn atlas_identity_and_shift() -> Outcome {
    let cfg = AtlasConfig::default();
    let (img, mask) = disk(64, 31.5, 14.0);
    let same = atlas_segment(&img, &mask, &img, &cfg).unwrap();
    let identity_dsc: f64 = dsc_binary(&same, &mask).unwrap();

    let (atlas, atlas_mask) = disk(64, 30.0, 14.0);
    let (query, query_mask) = disk(64, 33.0, 14.0);
    let t = atlas_register(&atlas, &query, &cfg).unwrap().transform;
    let warped = warp_mask(&atlas_mask, &t, 64, 64).unwrap();
    let shift_dsc: f64 = dsc_binary(&warped, &query_mask).unwrap();
    check(
        identity_dsc == 1.0 && (t.tx + 3.0).abs() <= 0.5 && shift_dsc >= 0.9,
        format!(
            "identity DSC {identity_dsc}, shift tx {:.3}, DSC {shift_dsc:.4}",
            t.tx
        ),
    )
}

fn end_to_end() -> Outcome {
    let n = 48;
    let refs: Vec<ReferenceRecord<f64>> = (0..8)
        .map(|i| {
            let c = common::phantom_case(&format!("ref{i}"), n, 0, 500 + i);
            ReferenceRecord::new(c.id, c.image, c.gt.unwrap()).unwrap()
        })
        .collect();
    let db = ReferenceDatabase::new(refs).unwrap();
    let cases: Vec<Case<f64>> = (0..64)
        .map(|i| common::phantom_case(&format!("case{i:02}"), n, i % 9, 9000 + i as u64))
        .collect();
    let cfg = PipelineConfig {
        resize: None,
        segmenter: SegmenterChoice::Atlas(AtlasConfig::default()),
        ..PipelineConfig::default()
    };
    let report = evaluate_cases(&cases, &db, &cfg, None).map_err(|e| e.to_string())?;
    let predicted: Vec<f64> = report.pairs.iter().map(|r| r.predicted).collect();
    let truth: Vec<f64> = report.pairs.iter().map(|r| r.true_score).collect();
    let r = pearson(&predicted, &truth).map_err(|e| e.to_string())?;

    let (cal, test): (Vec<_>, Vec<_>) =
        cases.into_iter().enumerate().partition(|(i, _)| i % 2 == 0);
    let cal: Vec<_> = cal.into_iter().map(|(_, c)| c).collect();
    let test: Vec<_> = test.into_iter().map(|(_, c)| c).collect();
    let run = calibrate_cases(&cal, &db, &cfg).map_err(|e| e.to_string())?;
    let held =
        evaluate_cases(&test, &db, &cfg, Some(&run.calibration)).map_err(|e| e.to_string())?;
    let coverage = held.summary.coverage.unwrap_or(0.0);
    check(
        r >= 0.5 && coverage >= 0.8,
        format!(
            "pearson {r:.3} over 64 cases, held-out coverage {coverage:.3} (q_hat {:.4})",
            run.calibration.q_hat
        ),
    )
}

fn nestedness() -> Outcome {
    let mut rng = SeededRng::new(23);
    let records: Vec<_> = (0..200)
        .map(|i| {
            let y: f64 = sample_beta22(&mut rng);
            CalibrationRecord::new(
                format!("c{i}"),
                synth_score_set(y, 32, 0.1, &mut rng).unwrap(),
                y,
            )
        })
        .collect();
    let wide = calibrate(
        &records,
        &ConformalParams {
            alpha: 0.05,
            ..Default::default()
        },
    )
    .unwrap();
    let narrow = calibrate(
        &records,
        &ConformalParams {
            alpha: 0.2,
            ..Default::default()
        },
    )
    .unwrap();
    let mut violations = 0;
    for _ in 0..100 {
        let y: f64 = sample_beta22(&mut rng);
        let set = synth_score_set(y, 32, 0.1, &mut rng).unwrap();
        let (a, b) = (
            predict_interval(&set, &wide).unwrap(),
            predict_interval(&set, &narrow).unwrap(),
        );
        if !(a.raw_lower <= b.raw_lower && b.raw_upper <= a.raw_upper) {
            violations += 1;
        }
    }
    check(
        violations == 0,
        format!(
            "{violations} violations on 100 sets (q_hat {:.4} vs {:.4})",
            wide.q_hat, narrow.q_hat
        ),
    )
}

fn main() {
    let criteria: [Criterion; 8] = [
        ("synthetic coverage", synthetic_coverage),
        ("conformal inversion", conformal_inversion),
        ("threshold rule", threshold_rule),
        ("metric oracles", metric_oracles),
        ("retrieval exactness", retrieval_exactness),
        ("atlas identity and shift", atlas_identity_and_shift),
        ("end-to-end RCA", end_to_end),
        ("nestedness", nestedness),
    ];
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let result = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        match result {
            Ok(detail) => println!("PASS AC{} {name}: {detail}", i + 1),
            Err(detail) => {
                failed += 1;
                println!("FAIL AC{} {name}: {detail}", i + 1);
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
