//! End-to-end acceptance checks. Runs without the libtest harness so every
//! criterion prints its verdict even when captured output is hidden.

use std::collections::HashMap;
use std::path::Path;
use std::process::ExitCode;
use std::time::Instant;

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::ToPrimitive;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rangeseg::gradcheck::{run_suite, TOLERANCE};
use rangeseg::metrics::ConfusionMatrix;
use rangeseg::model::weights::{decode_weights, encode_weights};
use rangeseg::model::{init_params, model_param_count, Model, ModelConfig};
use rangeseg::projection::{flatten, project, unflatten, BeamTable, Reduce};
use rangeseg::scan_io::{
    builtin_config, encode_kitti_scan, encode_labels, parse_kitti_labels, parse_kitti_scan, Point, RawScan,
};
use rangeseg::synthetic::synthetic_scan;
use rangeseg::tensor::ops::{bilinear_resize, conv2d, linear, softmax, ConvSpec};
use rangeseg::Tensor;

type Verdict = Result<String, String>;

fn check(ok: bool, detail: String) -> Verdict {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(-1.0..1.0))
}

fn projection_geometry() -> Verdict {
    let cfg = builtin_config("semantickitti").map_err(|e| e.to_string())?;
    let beams = BeamTable::uniform(&cfg).map_err(|e| e.to_string())?;
    for seed in 0..100 {
        let scan = synthetic_scan(4096, seed, &cfg).map_err(|e| e.to_string())?;
        let index = project(&scan, &beams, &cfg).map_err(|e| e.to_string())?;
        if index.resolution() != (64, 1024) {
            return Err(format!("resolution {:?}", index.resolution()));
        }
        if (0..4096).any(|j| {
            let (v, u) = index.pixel(j);
            v >= 64 || u >= 1024
        }) {
            return Err(format!("scan {seed}: point out of bounds"));
        }
        let mut seen = vec![0u8; 4096];
        for cell in index.cells() {
            for &j in index.members(cell) {
                seen[j] += 1;
            }
        }
        if seen.iter().any(|&s| s != 1) {
            return Err(format!("scan {seed}: cells do not partition the points"));
        }
    }
    Ok("100 scans, N=4096, H×W=64×1024".into())
}

fn scatter_gather() -> Verdict {
    let cfg = builtin_config("semantickitti").map_err(|e| e.to_string())?;
    let beams = BeamTable::uniform(&cfg).map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst: f64 = 0.0;
    for seed in 0..20 {
        let scan = synthetic_scan(2000, seed, &cfg).map_err(|e| e.to_string())?;
        let index = project(&scan, &beams, &cfg).map_err(|e| e.to_string())?;
        let keep: Vec<Point> = index.cells().iter().map(|c| scan.points()[index.members(c)[0]]).collect();
        let single = RawScan::new(keep).map_err(|e| e.to_string())?;
        let sidx = project(&single, &beams, &cfg).map_err(|e| e.to_string())?;
        let f = random(&[single.len(), 3], &mut rng);
        let back = flatten(&f, &sidx, Reduce::Mean).and_then(|img| unflatten(&img, &sidx));
        if back.map_err(|e| e.to_string())? != f {
            return Err(format!("scan {seed}: singleton round trip is not exact"));
        }

        // every point three times with different intensity
        let mut pts = Vec::new();
        for p in scan.points() {
            for k in 0..3 {
                pts.push(Point::new(p.x, p.y, p.z, k as f32 * 0.3));
            }
        }
        let multi = RawScan::new(pts).map_err(|e| e.to_string())?;
        let midx = project(&multi, &beams, &cfg).map_err(|e| e.to_string())?;
        let f = random(&[multi.len(), 4], &mut rng);
        let img = flatten(&f, &midx, Reduce::Mean).map_err(|e| e.to_string())?;
        let mut sums: HashMap<(usize, usize), (Vec<f64>, usize)> = HashMap::new();
        for j in 0..multi.len() {
            let e = sums.entry(midx.pixel(j)).or_insert((vec![0.0; 4], 0));
            for k in 0..4 {
                e.0[k] += f.row(j)[k];
            }
            e.1 += 1;
        }
        for ((v, u), (s, n)) in sums {
            for k in 0..4 {
                worst = worst.max((img.data()[(v * 1024 + u) * 4 + k] - s[k] / n as f64).abs());
            }
        }
    }
    check(worst < 1e-5, format!("singleton round trip exact, flatten-mean max abs err {worst:.2e}"))
}

fn naive_conv(x: &Tensor<f64>, k: &Tensor<f64>, stride: usize, dil: usize, pad: usize) -> Tensor<f64> {
    let (h, w, cin) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (kh, kw, cout) = (k.shape()[0], k.shape()[1], k.shape()[3]);
    let oh = (h + 2 * pad - (kh - 1) * dil - 1) / stride + 1;
    let ow = (w + 2 * pad - (kw - 1) * dil - 1) / stride + 1;
    Tensor::from_fn([oh, ow, cout], |i| {
        let (oy, ox, co) = (i / (ow * cout), (i / cout) % ow, i % cout);
        let mut acc = 0.0;
        for ky in 0..kh {
            for kx in 0..kw {
                let iy = (oy * stride + ky * dil) as i64 - pad as i64;
                let ix = (ox * stride + kx * dil) as i64 - pad as i64;
                if iy < 0 || ix < 0 || iy >= h as i64 || ix >= w as i64 {
                    continue;
                }
                for ci in 0..cin {
                    acc += x.data()[((iy as usize) * w + ix as usize) * cin + ci]
                        * k.data()[((ky * kw + kx) * cin + ci) * cout + co];
                }
            }
        }
        acc
    })
}

fn naive_resize(x: &Tensor<f64>, oh: usize, ow: usize) -> Tensor<f64> {
    let (h, w, c) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let weight = |o: usize, i: usize, input: usize, output: usize| {
        let src = ((o as f64 + 0.5) * input as f64 / output as f64 - 0.5).clamp(0.0, (input - 1) as f64);
        (1.0 - (src - i as f64).abs()).max(0.0)
    };
    Tensor::from_fn([oh, ow, c], |idx| {
        let (oy, ox, k) = (idx / (ow * c), (idx / c) % ow, idx % c);
        let mut acc = 0.0;
        for iy in 0..h {
            for ix in 0..w {
                acc += weight(oy, iy, h, oh) * weight(ox, ix, w, ow) * x.data()[(iy * w + ix) * c + k];
            }
        }
        acc
    })
}

fn numeric_kernels() -> Verdict {
    const INSTANCES: usize = 60;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (mut conv, mut lin, mut soft, mut resize, mut sums) = (0.0f64, 0.0f64, 0.0f64, 0.0f64, 0.0f64);
    for i in 0..INSTANCES {
        let (h, w) = (rng.gen_range(3..10), rng.gen_range(3..10));
        let (cin, cout) = (rng.gen_range(1..5), rng.gen_range(1..5));
        let dil = 1 + i % 2;
        let stride = 1 + (i / 2) % 2;
        let x = random(&[h, w, cin], &mut rng);
        let k = random(&[3, 3, cin, cout], &mut rng);
        let got = conv2d(&x, &k, ConvSpec { stride, dilation: dil, padding: dil }).map_err(|e| e.to_string())?;
        conv = conv.max(got.max_abs_diff(&naive_conv(&x, &k, stride, dil, dil)).map_err(|e| e.to_string())?);

        let n = rng.gen_range(1..20);
        let x = random(&[n, cin], &mut rng);
        let wgt = random(&[cin, cout], &mut rng);
        let b = random(&[cout], &mut rng);
        let got = linear(&x, &wgt, &b).map_err(|e| e.to_string())?;
        let want = Tensor::from_fn([n, cout], |j| {
            let (r, o) = (j / cout, j % cout);
            b.data()[o] + (0..cin).map(|c| x.data()[r * cin + c] * wgt.data()[c * cout + o]).sum::<f64>()
        });
        lin = lin.max(got.max_abs_diff(&want).map_err(|e| e.to_string())?);

        let c = rng.gen_range(1..12);
        let x = random(&[n, c], &mut rng).scale(5.0);
        let got = softmax(&x, 1).map_err(|e| e.to_string())?;
        let want = Tensor::from_fn([n, c], |j| {
            let r = j / c;
            x.data()[j].exp() / (0..c).map(|kk| x.data()[r * c + kk].exp()).sum::<f64>()
        });
        soft = soft.max(got.max_abs_diff(&want).map_err(|e| e.to_string())?);
        let got32 = softmax(&x.cast::<f32>(), 1).map_err(|e| e.to_string())?;
        for r in 0..n {
            sums = sums.max((got.row(r).iter().sum::<f64>() - 1.0).abs());
            sums = sums.max((got32.row(r).iter().map(|&v| v as f64).sum::<f64>() - 1.0).abs());
        }

        let x = random(&[rng.gen_range(1..7), rng.gen_range(1..7), 2], &mut rng);
        let (oh, ow) = (rng.gen_range(1..14), rng.gen_range(1..14));
        let got = bilinear_resize(&x, oh, ow).map_err(|e| e.to_string())?;
        resize = resize.max(got.max_abs_diff(&naive_resize(&x, oh, ow)).map_err(|e| e.to_string())?);
    }
    check(
        conv < 1e-5 && lin < 1e-5 && soft < 1e-5 && resize < 1e-5 && sums < 1e-6,
        format!(
            "{INSTANCES} instances each; conv {conv:.1e}, linear {lin:.1e}, softmax {soft:.1e}, \
             resize {resize:.1e}, slice-sum {sums:.1e}"
        ),
    )
}

fn gradient_checks() -> Verdict {
    let reports = run_suite(0, None).map_err(|e| e.to_string())?;
    let worst = reports.iter().map(|r| r.max_rel_error).fold(0.0, f64::max);
    let failing: Vec<&str> = reports.iter().filter(|r| !r.passes(TOLERANCE)).map(|r| r.name.as_str()).collect();
    let summary = format!("{} blocks, worst rel err {worst:.2e}", reports.len());
    if failing.is_empty() {
        Ok(summary)
    } else {
        Err(format!("{summary}; failing: {}", failing.join(", ")))
    }
}

fn metrics_oracle() -> Verdict {
    const IGNORE: u32 = 255;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let k: u32 = rng.gen_range(1..20);
        let n = rng.gen_range(1..500);
        let pred: Vec<u32> = (0..n).map(|_| rng.gen_range(0..k)).collect();
        let gt: Vec<u32> = (0..n).map(|_| if rng.gen_bool(0.05) { IGNORE } else { rng.gen_range(0..k) }).collect();
        let mut cm = ConfusionMatrix::new(k as usize);
        cm.accumulate(&pred, &gt, IGNORE).map_err(|e| e.to_string())?;
        let mut iou_sum = BigRational::from_integer(0.into());
        let mut acc_sum = BigRational::from_integer(0.into());
        let (mut present, mut with_gt) = (0usize, 0usize);
        for c in 0..k {
            let kept = || pred.iter().zip(&gt).filter(|(_, &g)| g != IGNORE);
            let tp = kept().filter(|(&p, &g)| p == c && g == c).count();
            let union = kept().filter(|(&p, &g)| p == c || g == c).count();
            let in_gt = kept().filter(|(_, &g)| g == c).count();
            if union > 0 {
                iou_sum += BigRational::new(BigInt::from(tp), BigInt::from(union));
                present += 1;
            }
            if in_gt > 0 {
                acc_sum += BigRational::new(BigInt::from(tp), BigInt::from(in_gt));
                with_gt += 1;
            }
        }
        let exact = |sum: BigRational, count: usize| (sum / BigRational::from_integer(count.into())).to_f64();
        if present > 0 {
            let want = exact(iou_sum, present).unwrap_or(f64::NAN);
            worst = worst.max((cm.iou().mean().unwrap_or(f64::NAN) - want).abs());
        }
        if with_gt > 0 {
            let want = exact(acc_sum, with_gt).unwrap_or(f64::NAN);
            worst = worst.max((cm.acc().mean().unwrap_or(f64::NAN) - want).abs());
        }
    }
    let labels: Vec<u32> = (0..200).map(|i| i % 19).collect();
    let mut perfect = ConfusionMatrix::new(19);
    perfect.accumulate(&labels, &labels, IGNORE).map_err(|e| e.to_string())?;
    let mut half = ConfusionMatrix::new(2);
    half.accumulate(&[0, 0, 0, 0, 1, 1], &[0, 0, 0, 1, 0, 0], IGNORE).map_err(|e| e.to_string())?;
    let ok = worst < 1e-12
        && perfect.iou().mean() == Some(1.0)
        && perfect.acc().mean() == Some(1.0)
        && half.iou().per_class[0] == Some(0.5);
    check(ok, format!("1000 pairs, max err vs rational {worst:.1e}; perfect = 1; TP3/FP1/FN2 IoU = 0.5"))
}

fn depth_ordering() -> Verdict {
    let mut counts = Vec::new();
    for depths in [[1, 1, 1, 1], [2, 2, 2, 2], [3, 3, 3, 3], [3, 4, 6, 3]] {
        let mut cfg = ModelConfig::default();
        cfg.backbone.depths = depths.to_vec();
        counts.push(model_param_count(&cfg).map_err(|e| e.to_string())?);
    }
    let text: Vec<String> = counts.iter().map(|c| format!("{:.2}M", *c as f64 / 1e6)).collect();
    check(counts.windows(2).all(|w| w[0] < w[1]), format!("C=128 counts {}", text.join(" < ")))
}

fn end_to_end() -> Verdict {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/desk.cfg");
    let cfg = ModelConfig::load(&path).map_err(|e| e.to_string())?;
    let model = Model::from_seed(&cfg, cfg.seed).map_err(|e| e.to_string())?;
    let scan = synthetic_scan(2048, 17, model.dataset()).map_err(|e| e.to_string())?;
    let start = Instant::now();
    let a = model.forward(&scan).map_err(|e| e.to_string())?;
    let secs = start.elapsed().as_secs_f64();
    let b = model.forward(&scan).map_err(|e| e.to_string())?;
    let bits = |t: &Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<u32>>();
    let mut order: Vec<usize> = (0..scan.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(8));
    let p = model.forward(&scan.permuted(&order).map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
    let equivariant = order
        .iter()
        .enumerate()
        .all(|(i, &j)| p.scores.row(i).iter().zip(a.scores.row(j)).all(|(x, y)| x.to_bits() == y.to_bits()));
    let shape_ok = a.scores.shape() == [2048, 19];
    let finite = a.scores.all_finite();
    let repeat = bits(&a.scores) == bits(&b.scores);
    check(
        shape_ok && finite && repeat && equivariant && secs < 5.0,
        format!(
            "C={} forward {secs:.2}s, shape {:?}, finite {finite}, repeatable {repeat}, permutation-exact {equivariant}",
            cfg.channels,
            a.scores.shape()
        ),
    )
}

fn format_round_trips() -> Verdict {
    let cfg = builtin_config("semantickitti").map_err(|e| e.to_string())?;
    let scan = synthetic_scan(1000, 23, &cfg).map_err(|e| e.to_string())?;
    let bytes = encode_kitti_scan(&scan);
    let back = parse_kitti_scan(&bytes).map_err(|e| e.to_string())?;
    let scan_ok = encode_kitti_scan(&back) == bytes && back.points() == scan.points();
    let raw = scan.labels().unwrap_or_default().to_vec();
    let labels_ok = parse_kitti_labels(&encode_labels(&raw)).map_err(|e| e.to_string())? == raw;

    let desk = ModelConfig::load(&Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/desk.cfg"))
        .map_err(|e| e.to_string())?;
    let store = init_params(&desk, 3).map_err(|e| e.to_string())?;
    let encoded = encode_weights(&store);
    let decoded = decode_weights(&encoded).map_err(|e| e.to_string())?;
    let weights_ok = decoded == store && encode_weights(&decoded) == encoded;

    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let pred: Vec<u32> = (0..1000).map(|_| rng.gen_range(0..cfg.num_classes as u32)).collect();
    let pred_bytes = encode_labels(&pred);
    let reparsed = parse_kitti_labels(&pred_bytes).map_err(|e| e.to_string())?;
    let pred_ok = pred_bytes.len() == 4000
        && reparsed == pred
        && reparsed.iter().all(|&l| (l as usize) < cfg.num_classes);
    check(
        scan_ok && labels_ok && weights_ok && pred_ok,
        format!(
            "scan {scan_ok}, labels {labels_ok}, weights {weights_ok} ({} tensors), pred {pred_ok}",
            store.len()
        ),
    )
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Verdict); 8] = [
        ("projection geometry", projection_geometry),
        ("scatter/gather", scatter_gather),
        ("numeric kernels", numeric_kernels),
        ("gradient checks", gradient_checks),
        ("metrics oracle", metrics_oracle),
        ("depth ordering", depth_ordering),
        ("end-to-end forward", end_to_end),
        ("format round trips", format_round_trips),
    ];
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        match run() {
            Ok(detail) => println!("criterion {} {name}: PASS ({detail})", i + 1),
            Err(detail) => {
                failed += 1;
                println!("criterion {} {name}: FAIL ({detail})", i + 1);
            }
        }
    }
    println!("acceptance: {}/{} passed", criteria.len() - failed, criteria.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
