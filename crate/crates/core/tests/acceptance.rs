//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fails.

use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use ovw::autolabel::{image_decision, region_filter, rescore, LabelReport, RegionProposal};
use ovw::bbox::BBox;
use ovw::grad::{grad_check, GradOp, DEFAULT_EPS};
use ovw::head::{contrastive_similarity, head_forward, nms, HeadParams, Scored, SimilarityMatrix};
use ovw::loss::{
    iou_loss, region_text_contrastive_loss, task_aligned_assign, total_loss, AssignConfig, Assignment, GroundTruth,
    Positive, RegionText, Source,
};
use ovw::pan::{FeaturePyramid, FusionParams, POOL_TOKENS};
use ovw::reparam::{verify_equivalence, VerifyOptions};
use ovw::rng;
use ovw::text::toy_encode;
use ovw::Tensor;
use rand::Rng;

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures")
}

fn random_vocab(c: usize, dim: usize, seed: u64) -> ovw::text::TextEmbeddings {
    let nouns: Vec<String> = (0..c).map(|i| format!("w{seed}-{i}")).collect();
    toy_encode(&nouns, dim, seed).unwrap()
}

fn reparam_equivalence() -> Outcome {
    let start = Instant::now();
    let params = FusionParams::seeded(32, 4, 11).map_err(|e| e.to_string())?;
    let mut pyramids = 0;
    let mut worst = 0.0f64;
    // Ten vocabularies cycling through C = 1, 8, 80, ten pyramids each.
    for v in 0..10u64 {
        let c = [1usize, 8, 80][v as usize % 3];
        let vocab = random_vocab(c, 32, v);
        let opts = VerifyOptions { trials: 10, tol: 1e-6, seed: v, corrupt: None };
        {
            let rep = verify_equivalence(&params, &vocab, opts).map_err(|e| e.to_string())?;
            ensure(rep.passed, || format!("C={c} vocab {v}: failed checks {:?}", rep.failures()))?;
            let tokens = rep.check("pool_tokens").unwrap();
            ensure(tokens.passed && tokens.max_abs == 0.0, || "pooled tokens differ".into())?;
            for ch in rep.checks.iter().filter(|ch| ch.name.starts_with("tcsp_fold")) {
                worst = worst.max(ch.max_rel);
            }
            pyramids += rep.trials;
        }
    }
    let took = start.elapsed();
    ensure(took < Duration::from_secs(10), || format!("took {took:?}"))?;
    Ok(format!("{pyramids} pyramids over 10 vocabularies with C in {{1, 8, 80}}, max rel dev {worst:.2e}, {took:.2?}"))
}

fn orthogonal_to(v: &[f64], r: &mut impl Rng) -> Vec<f64> {
    let u: Vec<f64> = (0..v.len()).map(|_| r.gen_range(-1.0..1.0)).collect();
    let vv: f64 = v.iter().map(|x| x * x).sum();
    let uv: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    u.iter().zip(v).map(|(a, b)| a - uv / vv * b).collect()
}

fn head_contract() -> Outcome {
    let mut r = rng::seeded(2);
    let d = 32;
    for trial in 0..1000 {
        let alpha: f64 = r.gen_range(0.1..5.0);
        let beta: f64 = r.gen_range(-3.0..3.0);
        let e: Vec<f64> = (0..d).map(|_| r.gen_range(-1.0..1.0)).collect();
        let scale: f64 = r.gen_range(0.01..100.0);
        let par: Vec<f64> = e.iter().map(|x| x * scale).collect();
        let anti: Vec<f64> = e.iter().map(|x| -x * scale).collect();
        let orth = orthogonal_to(&e, &mut r);
        let w = Tensor::from_rows(&[par, orth, anti]).unwrap();
        let s = contrastive_similarity(&Tensor::from_rows(std::slice::from_ref(&e)).unwrap(), &w, alpha, beta).unwrap();
        let want = [alpha + beta, beta, beta - alpha];
        for (j, w) in want.iter().enumerate() {
            let got = s.get(0, j);
            ensure((got - w).abs() <= 1e-12, || format!("trial {trial} case {j}: {got} vs {w}"))?;
        }

        let k = r.gen_range(1..12);
        let c = r.gen_range(1..12);
        let emb = rng::uniform(&mut r, &[k, d], 1.0);
        let txt = rng::uniform(&mut r, &[c, d], 1.0);
        let s = contrastive_similarity(&emb, &txt, alpha, beta).unwrap();
        for &v in s.values.data() {
            ensure(v >= beta - alpha - 1e-12 && v <= beta + alpha + 1e-12, || format!("trial {trial}: {v} out of range"))?;
        }
        let scales: Vec<f64> = (0..k).map(|_| r.gen_range(0.01..100.0)).collect();
        let scaled_data: Vec<f64> = emb.rows().zip(&scales).flat_map(|(row, f)| row.iter().map(move |x| x * f)).collect();
        let scaled = Tensor::new(vec![k, d], scaled_data).unwrap();
        let s2 = contrastive_similarity(&scaled, &txt, alpha, beta).unwrap();
        for row in 0..k {
            let am = |m: &SimilarityMatrix| {
                (0..c).fold(0, |b, j| if m.get(row, j) > m.get(row, b) { j } else { b })
            };
            ensure(am(&s) == am(&s2), || format!("trial {trial}: argmax moved under rescaling"))?;
        }
    }
    Ok("1000 trials, parallel/orthogonal/antiparallel within 1e-12, range and argmax invariance hold".into())
}

fn gradient_suite() -> Outcome {
    let start = Instant::now();
    let ops = [GradOp::Similarity, GradOp::MaxSigmoid, GradOp::TextUpdate, GradOp::Contrastive, GradOp::Iou, GradOp::Dfl];
    let mut worst = Vec::new();
    for op in ops {
        let mut m = 0.0f64;
        for seed in 0..100 {
            let row = grad_check(op, seed, DEFAULT_EPS).map_err(|e| format!("{op}: {e}"))?;
            ensure(row.max_rel_error < 1e-4, || format!("{op} seed {seed}: {:.3e}", row.max_rel_error))?;
            m = m.max(row.max_rel_error);
        }
        worst.push(format!("{op} {m:.1e}"));
    }
    let took = start.elapsed();
    ensure(took < Duration::from_secs(60), || format!("took {took:?}"))?;
    Ok(format!("100 seeds per op, worst: {}, {took:.2?}", worst.join(", ")))
}

fn loss_identities() -> Outcome {
    for c in [2usize, 80, 1203] {
        let k = 5;
        let sim = SimilarityMatrix { values: Tensor::full(&[k, c], 0.37).unwrap(), alpha: 1.0, beta: 0.0 };
        let labels = (0..k).map(|i| if i % 2 == 0 { Some(Positive { gt: 0, text: i % c }) } else { None }).collect();
        let l = region_text_contrastive_loss(&sim, &Assignment { labels }).unwrap();
        let want = (c as f64).ln();
        ensure((l - want).abs() <= 1e-9, || format!("C={c}: {l} vs ln C = {want}"))?;
    }

    let mut r = rng::seeded(4);
    let pyr = FeaturePyramid::random(3, 3, 16, &mut r).unwrap();
    let head = head_forward(&pyr, &HeadParams::seeded(16, 16, 5).unwrap()).unwrap();
    let text = rng::uniform(&mut r, &[6, 16], 1.0);
    let sim = contrastive_similarity(&head.embeddings, &text, 1.0, 0.0).unwrap();
    let mut gated = 0;
    for trial in 0..50 {
        let n = r.gen_range(1..4);
        let anns: Vec<RegionText> = (0..n)
            .map(|_| {
                let x: f64 = r.gen_range(0.0..60.0);
                let y: f64 = r.gen_range(0.0..60.0);
                RegionText {
                    bbox: BBox::new(x, y, x + r.gen_range(10.0..36.0), y + r.gen_range(10.0..36.0)),
                    text_index: r.gen_range(0..6),
                    box_accurate: r.gen_bool(0.5),
                }
            })
            .collect();
        let gt = GroundTruth::new(Source::ImageText, anns, 6).unwrap();
        let assign = task_aligned_assign(&sim, &head.boxes, &head.anchors, &gt, AssignConfig::default()).unwrap();
        let total = total_loss(&sim, &head, &gt, &assign).unwrap().total;
        let con = region_text_contrastive_loss(&sim, &assign).unwrap();
        ensure(total.to_bits() == con.to_bits(), || format!("trial {trial}: total {total} vs con {con}"))?;
        gated += assign.num_positives();
    }
    ensure(gated > 0, || "no positives assigned in gating trials".into())?;

    let l = iou_loss(&BBox::new(0.0, 0.0, 2.0, 2.0), &BBox::new(1.0, 0.0, 3.0, 2.0)).unwrap();
    ensure(l == 2.0 / 3.0, || format!("IoU loss {l:?} != 2/3"))?;
    Ok("ln C for C in {2, 80, 1203}; image-text total bit-equal to contrastive over 50 samples; IoU loss == 2/3".into())
}

/// Per-text greedy suppression computed from a precomputed IoU matrix.
fn nms_oracle(dets: &[Scored], thr: f64) -> Vec<usize> {
    let n = dets.len();
    let iou: Vec<Vec<f64>> = (0..n).map(|i| (0..n).map(|j| dets[i].bbox.iou(&dets[j].bbox)).collect()).collect();
    let mut texts: Vec<usize> = dets.iter().map(|d| d.text_id).collect();
    texts.sort_unstable();
    texts.dedup();
    let better = |a: usize, b: usize| dets[a].score > dets[b].score || (dets[a].score == dets[b].score && a < b);
    let mut kept = Vec::new();
    for t in texts {
        let group: Vec<usize> = (0..n).filter(|&i| dets[i].text_id == t).collect();
        let mut alive = vec![true; n];
        loop {
            let top = group.iter().copied().filter(|&i| alive[i] && !kept.contains(&i)).reduce(|a, b| if better(a, b) { a } else { b });
            let Some(top) = top else { break };
            kept.push(top);
            for &j in &group {
                if j != top && iou[top][j] > thr {
                    alive[j] = false;
                }
            }
        }
    }
    kept.sort_by(|&a, &b| if better(a, b) { std::cmp::Ordering::Less } else { std::cmp::Ordering::Greater });
    kept
}

fn nms_equivalence() -> Outcome {
    let mut r = rng::seeded(5);
    let mut cross_text = 0;
    for inst in 0..500 {
        let mut dets: Vec<Scored> = (0..50)
            .map(|_| {
                let x: f64 = r.gen_range(0.0..40.0);
                let y: f64 = r.gen_range(0.0..40.0);
                Scored {
                    bbox: BBox::new(x, y, x + r.gen_range(5.0..30.0), y + r.gen_range(5.0..30.0)),
                    text_id: r.gen_range(0..3),
                    score: (r.gen_range(0.0..1.0f64) * 20.0).round() / 20.0,
                }
            })
            .collect();
        // A same-box, different-text twin must never be suppressed by its original.
        let twin = Scored { text_id: (dets[0].text_id + 1) % 3, score: dets[0].score * 0.5, ..dets[0] };
        dets[49] = twin;
        let thr = [0.3, 0.5, 0.7][inst % 3];
        let got = nms(&dets, thr).map_err(|e| e.to_string())?;
        let want = nms_oracle(&dets, thr);
        ensure(got == want, || format!("instance {inst}: {got:?} vs oracle {want:?}"))?;
        let same_text_dup = (0..49).any(|j| {
            dets[j].text_id == twin.text_id && got.contains(&j) && dets[j].bbox.iou(&twin.bbox) > thr && {
                let (a, b) = (j, 49);
                dets[a].score > dets[b].score || (dets[a].score == dets[b].score && a < b)
            }
        });
        if !same_text_dup {
            ensure(got.contains(&49), || format!("instance {inst}: cross-text twin suppressed"))?;
            cross_text += 1;
        }
    }
    Ok(format!("500 instances of 50 boxes match the oracle; {cross_text} cross-text twins kept"))
}

fn run_bin(args: &[&str], threads: Option<&str>) -> Result<i32, String> {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_ovw"));
    cmd.args(args);
    match threads {
        Some(t) => cmd.env("OVW_THREADS", t),
        None => cmd.env_remove("OVW_THREADS"),
    };
    let out = cmd.output().map_err(|e| e.to_string())?;
    Ok(out.status.code().unwrap_or(-1))
}

fn label_into(dir: &Path, tag: &str, relabel: bool, threads: Option<&str>) -> Result<(Vec<u8>, Vec<u8>), String> {
    let f = fixtures();
    let ann = dir.join(format!("{tag}.jsonl"));
    let rep = dir.join(format!("{tag}.report.json"));
    let mut args = vec![
        "label".to_string(),
        "--dataset".into(),
        f.join("captions.jsonl").display().to_string(),
        "--fixtures".into(),
        f.join("label_fixtures.json").display().to_string(),
        "--out".into(),
        ann.display().to_string(),
    ];
    if relabel {
        args.push("--relabel".into());
    }
    let args: Vec<&str> = args.iter().map(String::as_str).collect();
    let code = run_bin(&args, threads)?;
    ensure(code == 0, || format!("label exited {code}"))?;
    Ok((std::fs::read(&ann).map_err(|e| e.to_string())?, std::fs::read(&rep).map_err(|e| e.to_string())?))
}

fn proposal(c: f64, s_r: f64) -> RegionProposal {
    RegionProposal {
        bbox: BBox::new(0.0, 0.0, 10.0, 10.0),
        text: "x".into(),
        confidence: c,
        region_score: Some(s_r),
        rescored: Some(rescore(c, s_r).unwrap()),
    }
}

fn pipeline_golden() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let f = fixtures();
    for (relabel, suffix) in [(false, ""), (true, "_relabel")] {
        let (ann, rep) = label_into(dir.path(), &format!("run{suffix}"), relabel, None)?;
        let golden_ann = std::fs::read(f.join(format!("golden_annotations{suffix}.jsonl"))).unwrap();
        let golden_rep = std::fs::read(f.join(format!("golden_report{suffix}.json"))).unwrap();
        ensure(ann == golden_ann, || format!("annotations{suffix} differ from golden"))?;
        ensure(rep == golden_rep, || format!("report{suffix} differs from golden"))?;
        let report: LabelReport = serde_json::from_slice(&rep).map_err(|e| e.to_string())?;
        ensure(report.reconciles(), || format!("report{suffix} does not reconcile: {report:?}"))?;
    }

    let at = proposal(0.5, 0.18);
    ensure(at.rescored == Some(0.3), || format!("c̃ = {:?}, wanted 0.3", at.rescored))?;
    ensure(region_filter(&[at], 0.5, 0.3).unwrap().kept.is_empty(), || "c̃ = 0.3 kept".into())?;
    let above = proposal(0.31, 0.31);
    ensure(above.rescored == Some(0.31), || format!("c̃ = {:?}, wanted 0.31", above.rescored))?;
    ensure(region_filter(&[above], 0.5, 0.3).unwrap().kept == [0], || "c̃ = 0.31 dropped".into())?;
    let d = image_decision(0.5, 0.18, 0.3).unwrap();
    ensure(d.s == 0.3 && !d.keep, || format!("s = {} keep = {}", d.s, d.keep))?;
    let a = BBox::new(0.0, 0.0, 2.0, 1.0);
    let b = BBox::new(0.0, 0.0, 1.0, 1.0);
    let half = [RegionProposal { bbox: a, ..proposal(0.9, 0.9) }, RegionProposal { bbox: b, ..proposal(0.8, 0.8) }];
    ensure(a.iou(&b) == 0.5, || "IoU fixture is not 0.5".into())?;
    ensure(region_filter(&half, 0.5, 0.3).unwrap().kept == [0, 1], || "IoU = 0.5 suppressed".into())?;
    Ok("golden annotations and reports byte-identical (relabel off and on), counts reconcile; boundaries c̃ 0.3/0.31, s 0.3, IoU 0.5 hold".into())
}

fn token_contract() -> Outcome {
    let mut r = rng::seeded(7);
    let mut n = 0;
    for h5 in 3..=9 {
        for w5 in 3..=9 {
            for dim in [2usize, 4, 8, 32] {
                let pyr = FeaturePyramid::random(h5, w5, dim, &mut r).unwrap();
                let t = ovw::reparam::pool_tokens(&pyr).map_err(|e| e.to_string())?;
                ensure(t.shape() == [POOL_TOKENS, dim] && POOL_TOKENS == 27, || format!("{h5}×{w5}×{dim}: {:?}", t.shape()))?;
                n += 1;
            }
        }
    }
    Ok(format!("{n} pyramids (level 5 from 3×3 to 9×9) all pool to 27 tokens"))
}

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let f = fixtures();
    let vocab = f.join("vocab.json").display().to_string();
    let golden_detect = std::fs::read(f.join("golden_detect.json")).unwrap();
    let golden_ann = std::fs::read(f.join("golden_annotations.jsonl")).unwrap();
    let mut runs = 0;
    for threads in ["1", "4"] {
        for rep in 0..2 {
            let out = dir.path().join(format!("detect-{threads}-{rep}.json"));
            let code = run_bin(&["detect", "--vocab", &vocab, "--seed", "0", "--out", &out.display().to_string()], Some(threads))?;
            ensure(code == 0, || format!("detect exited {code}"))?;
            ensure(std::fs::read(&out).unwrap() == golden_detect, || format!("detect output differs (threads {threads}, run {rep})"))?;
            let (ann, _) = label_into(dir.path(), &format!("label-{threads}-{rep}"), false, Some(threads))?;
            ensure(ann == golden_ann, || format!("label output differs (threads {threads}, run {rep})"))?;
            runs += 1;
        }
    }
    Ok(format!("detect and label byte-identical across {runs} runs with OVW_THREADS in {{1, 4}}"))
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 8] = [
        ("reparameterization equivalence", reparam_equivalence),
        ("similarity head contract", head_contract),
        ("gradient suite", gradient_suite),
        ("loss identities", loss_identities),
        ("NMS oracle equivalence", nms_equivalence),
        ("labeling pipeline golden run", pipeline_golden),
        ("27-token contract", token_contract),
        ("determinism", determinism),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        if !filter.is_empty() && !filter.iter().any(|p| name.contains(p.as_str())) {
            continue;
        }
        match std::panic::catch_unwind(f) {
            Ok(Ok(detail)) => println!("criterion {}: PASS {name}: {detail}", i + 1),
            Ok(Err(why)) => {
                failed += 1;
                println!("criterion {}: FAIL {name}: {why}", i + 1);
            }
            Err(_) => {
                failed += 1;
                println!("criterion {}: FAIL {name}: panicked", i + 1);
            }
        }
    }
    if failed > 0 {
        eprintln!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
