//! Acceptance suite: one test per release criterion, each printing a
//! PASS line with its measured numbers. Run with
//! `cargo test --test acceptance -- --nocapture --test-threads=1` to see
//! them in order.

use std::time::Instant;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use gaec::bits::{BitReader, BitWriter};
use gaec::container::{
    archive_classes, compress, compression_ratio, decompress, decompress_with_workers, Archive,
    CompressConfig,
};
use gaec::entropy::{
    self, count_values, decode_values, encode_values, HuffmanTable, QuantizedValue, Quantizer,
    Symbol,
};
use gaec::grid::{self, Field, PadPolicy, PartitionSpec, Shape};
use gaec::guarantee::{self, masked_l2, train_basis};
use gaec::metrics::{self, DetectionSet, RateOutcome};
use gaec::predictor::PredictorKind;
use gaec::roi::{self, Connectivity, PatchClass, PatchClassMap, RoiMask};
use gaec::synth::{self, SynthParams};

fn random_field(rng: &mut ChaCha8Rng, shape: Shape, scale: f64) -> Field {
    let smooth_amp = scale * (0.2 + rng.gen::<f64>());
    let noise_amp = scale * 0.1 * rng.gen::<f64>();
    let (ft, fh, fw) = (
        rng.gen_range(0.1..0.9) / shape.t.max(2) as f64,
        rng.gen_range(0.1..0.9) / shape.h.max(2) as f64,
        rng.gen_range(0.1..0.9) / shape.w.max(2) as f64,
    );
    let mut samples = Vec::with_capacity(shape.len());
    for t in 0..shape.t {
        for h in 0..shape.h {
            for w in 0..shape.w {
                let phase = std::f64::consts::TAU
                    * (ft * t as f64 + fh * h as f64 + fw * w as f64);
                let v = smooth_amp * phase.sin() + noise_amp * (rng.gen::<f64>() - 0.5);
                samples.push(v as f32);
            }
        }
    }
    Field::new("case", shape, samples, None).unwrap()
}

fn random_mask(rng: &mut ChaCha8Rng, shape: Shape) -> RoiMask {
    let density = rng.gen::<f64>() * 0.4;
    let bits = (0..shape.len()).map(|_| rng.gen::<f64>() < density).collect();
    RoiMask::new(shape, bits).unwrap()
}

/// Re-partition original and decoded fields and count bound violations
/// against the taus recorded in the archive.
fn verify_archive_bounds(
    original: &Field,
    decoded: &Field,
    archive: &Archive,
    spec: &PartitionSpec,
) -> (usize, usize, f64) {
    let classes = archive_classes(archive).unwrap();
    let orig = grid::partition(original, spec).unwrap();
    let back = grid::partition(decoded, spec).unwrap();
    assert_eq!(orig.len(), classes.len());
    let mut violations = 0;
    let mut worst_margin = 0.0f64;
    for ((a, b), (_, tau)) in orig.iter().zip(&back).zip(&classes) {
        let b32: Vec<f32> = b.vector.iter().map(|&v| v as f32).collect();
        let err = masked_l2(&a.vector, &b32, Some(&a.valid));
        if err > *tau {
            violations += 1;
        }
        worst_margin = worst_margin.max(err / tau);
    }
    (orig.len(), violations, worst_margin)
}

#[test]
fn acceptance_01_unconditional_guarantee() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let predictors = [
        PredictorKind::Zero,
        PredictorKind::BlockMean,
        PredictorKind::Downsample { ft: 1, fh: 2, fw: 2 },
        PredictorKind::Downsample { ft: 2, fh: 2, fw: 2 },
    ];
    let pads = [PadPolicy::Edge, PadPolicy::Reflect, PadPolicy::Zero];

    let mut cases = 0usize;
    let mut violations = 0usize;
    let mut fallbacks = 0usize;
    let mut configs = 0usize;
    while cases < 10_000 {
        // patch dimension pool, biased toward small; D tops out at 512
        let (pt, ph, pw) = match configs % 20 {
            0..=11 => (2, 4, 4),
            12..=16 => (2, 8, 8),
            17 | 18 => (4, 8, 8),
            _ => (8, 8, 8),
        };
        let spec = PartitionSpec {
            patch_t: pt,
            patch_h: ph,
            patch_w: pw,
            pad: Some(pads[configs % pads.len()]),
        };
        let shape = Shape::new(
            pt * rng.gen_range(2..4) + rng.gen_range(0..pt),
            ph * rng.gen_range(3..6) + rng.gen_range(0..ph),
            pw * rng.gen_range(3..6) + rng.gen_range(0..pw),
        );
        let scale = 10f64.powf(rng.gen_range(-2.0..3.0));
        let field = random_field(&mut rng, shape, scale);
        let predictor = predictors[configs % predictors.len()].clone();

        // bounds relative to the typical patch norm at this scale
        let norm_hint = (spec.dim() as f64).sqrt() * scale * 0.5;
        let tau_roi = norm_hint * 10f64.powf(rng.gen_range(-3.0..0.0));
        let tau_buf = tau_roi * 10f64.powf(rng.gen_range(0.0..0.6));
        let tau_bg = tau_buf * 10f64.powf(rng.gen_range(0.0..0.6));
        let coeff_bin = tau_roi * 10f64.powf(rng.gen_range(-1.5..0.5));

        let mask = random_mask(&mut rng, shape);
        let connectivity = if configs % 2 == 0 {
            Connectivity::Eight
        } else {
            Connectivity::Four
        };
        let class_map = roi::classify_patches(
            &mask,
            shape,
            &spec,
            0.3,
            connectivity,
            1,
            (tau_roi, tau_buf, tau_bg),
        )
        .unwrap();

        let mut cfg = CompressConfig::new(spec, predictor, coeff_bin);
        if configs % 5 == 4 {
            cfg.k_store = Some((spec.dim() / 2).max(1));
        }
        let archive = compress(&field, &class_map, &cfg, None).unwrap();
        let decoded = decompress(&archive, None).unwrap();
        assert_eq!(decoded.shape(), field.shape());

        let (patch_cases, patch_violations, _) =
            verify_archive_bounds(&field, &decoded, &archive, &spec);
        cases += patch_cases;
        violations += patch_violations;
        fallbacks += archive
            .patch_summaries()
            .unwrap()
            .iter()
            .filter(|p| p.fallback)
            .count();
        configs += 1;
    }
    let elapsed = start.elapsed();
    assert_eq!(violations, 0, "bound violations detected");
    assert!(
        elapsed.as_secs_f64() < 300.0,
        "guarantee sweep took {elapsed:?}"
    );
    println!(
        "acceptance 01 unconditional-guarantee: PASS ({cases} patch cases, {configs} configs, \
         0 violations, {fallbacks} fallbacks exercised, {:.1}s)",
        elapsed.as_secs_f64()
    );
}

#[test]
fn acceptance_02_complete_recovery() {
    let mut rng = ChaCha8Rng::seed_from_u64(4096);
    let dim = 64;
    let patches: Vec<(Vec<f64>, Vec<f64>)> = (0..1000)
        .map(|_| {
            let x: Vec<f64> = (0..dim)
                .map(|_| ((rng.gen::<f64>() - 0.5) * 20.0) as f32 as f64)
                .collect();
            let xr: Vec<f64> = (0..dim)
                .map(|_| ((rng.gen::<f64>() - 0.5) * 20.0) as f32 as f64)
                .collect();
            (x, xr)
        })
        .collect();
    let residuals: Vec<Vec<f64>> = patches
        .iter()
        .map(|(x, xr)| x.iter().zip(xr).map(|(a, b)| a - b).collect())
        .collect();
    let basis = train_basis(&residuals, dim).unwrap();
    let mut worst = 0.0f64;
    for (x, xr) in &patches {
        let c = guarantee::project(x, xr, &basis).unwrap();
        let mut recon = xr.clone();
        for (k, &ck) in c.iter().enumerate() {
            let col = basis.column(k);
            for i in 0..dim {
                recon[i] += ck * col[i];
            }
        }
        let num: f64 = recon
            .iter()
            .zip(x)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        let den: f64 = x
            .iter()
            .zip(xr)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        worst = worst.max(num / den);
    }
    assert!(worst <= 1e-5, "worst relative recovery error {worst}");
    println!(
        "acceptance 02 complete-recovery: PASS (1000 patches, worst relative error {worst:.2e})"
    );
}

#[test]
fn acceptance_03_isometry_and_orthonormality() {
    let mut rng = ChaCha8Rng::seed_from_u64(333);
    let mut worst_defect = 0.0f64;
    let mut worst_isometry = 0.0f64;
    for &dim in &[16usize, 64, 128, 256, 512] {
        let count = (dim * 2).max(64);
        let residuals: Vec<Vec<f64>> = (0..count)
            .map(|_| {
                (0..dim)
                    .map(|_| ((rng.gen::<f64>() - 0.5) * 6.0) as f32 as f64)
                    .collect()
            })
            .collect();
        let basis = train_basis(&residuals, dim).unwrap();
        let defect = basis.orthonormality_defect();
        assert!(defect <= 1e-6, "dim {dim}: defect {defect}");
        worst_defect = worst_defect.max(defect);
        for r in residuals.iter().take(50) {
            let c = basis.project(r).unwrap();
            let nr = r.iter().map(|v| v * v).sum::<f64>().sqrt();
            let nc = c.iter().map(|v| v * v).sum::<f64>().sqrt();
            let rel = (nr - nc).abs() / nr.max(1e-300);
            assert!(rel <= 1e-6, "dim {dim}: isometry deviation {rel}");
            worst_isometry = worst_isometry.max(rel);
        }
    }
    println!(
        "acceptance 03 isometry-orthonormality: PASS (D up to 512, worst defect {worst_defect:.2e}, \
         worst isometry deviation {worst_isometry:.2e})"
    );
}

#[test]
fn acceptance_04_quantizer_contract() {
    let bins = [1e-4, 1e-2, 1.0, 1e2, 1e4];
    let mut checks = 0usize;
    for &d in &bins {
        let q = Quantizer::new(d).unwrap();
        // grids spanning 6 orders of magnitude of |v|/d on both sides of
        // zero; the offset and step keep every point measurably away from
        // a bin boundary, where the error is d/2 by definition
        for k in -3..=3 {
            let base = 10f64.powi(k) * d;
            for j in 0..2000 {
                for sign in [-1.0, 1.0] {
                    let v = sign * (1.0003711 + 0.00137 * j as f64) * base;
                    let err = (v - q.dequantize(q.quantize(v))).abs();
                    assert!(err <= d / 2.0, "v={v} d={d} err={err}");
                    checks += 1;
                }
            }
        }
        // representative fixed points and the zero cell
        for &v in &[0.0, 0.5 * d, -0.5 * d, 0.25 * d] {
            let err = (v - q.dequantize(q.quantize(v))).abs();
            assert!(err <= d / 2.0);
            checks += 1;
        }
    }
    println!("acceptance 04 quantizer-contract: PASS ({checks} grid points, 0 violations)");
}

#[test]
fn acceptance_05_lossless_entropy_layer() {
    let mut rng = ChaCha8Rng::seed_from_u64(555);

    // million-symbol random stream, mixed distribution plus escapes
    let values: Vec<QuantizedValue> = (0..1_000_000)
        .map(|_| match rng.gen_range(0..100) {
            0..=59 => QuantizedValue::Bin(rng.gen_range(-8i64..8)),
            60..=94 => QuantizedValue::Bin(rng.gen_range(-2000i64..2000)),
            95..=98 => QuantizedValue::Bin(rng.gen_range(-2_000_000i64..2_000_000)),
            _ => QuantizedValue::Raw((rng.gen::<f32>() - 0.5) * 1e30),
        })
        .collect();
    let table = HuffmanTable::build(&count_values(values.iter().copied())).unwrap();
    let mut w = BitWriter::new();
    encode_values(&values, &table, &mut w).unwrap();
    let (bytes, bit_len) = w.finish();
    let mut r = BitReader::new(&bytes, bit_len).unwrap();
    let back = decode_values(values.len(), &table, &mut r).unwrap();
    assert_eq!(back, values, "million-symbol roundtrip");
    assert_eq!(r.remaining(), 0);

    // textbook frequency multiset 4:2:1:1 -> lengths 1,2,3,3
    let mut freqs = std::collections::BTreeMap::new();
    freqs.insert(Symbol::Bin(10), 4);
    freqs.insert(Symbol::Bin(20), 2);
    freqs.insert(Symbol::Bin(30), 1);
    freqs.insert(Symbol::Bin(40), 1);
    let table = HuffmanTable::build(&freqs).unwrap();
    let mut lengths: Vec<u8> = table.entries().iter().map(|&(_, l)| l).collect();
    lengths.sort_unstable();
    assert_eq!(lengths, vec![1, 2, 3, 3]);

    // index-code worked example: {0, 2} over D=8 -> prefix 101, length 3
    let code = entropy::index_encode(&[0, 2], 8).unwrap();
    assert_eq!(code.prefix_len, 3);
    assert_eq!(code.bits, vec![true, false, true]);
    let mut w = BitWriter::new();
    entropy::write_index_bits(&code, &mut w);
    let (bytes, len) = w.finish();
    assert_eq!((bytes.as_slice(), len), (&[0b1010_0000u8][..], 3));

    // corrected-patch outputs roundtrip bit-exactly through the same path
    let mut rng2 = ChaCha8Rng::seed_from_u64(556);
    let dim = 32;
    let residuals: Vec<Vec<f64>> = (0..128)
        .map(|_| {
            (0..dim)
                .map(|_| ((rng2.gen::<f64>() - 0.5) * 4.0) as f32 as f64)
                .collect()
        })
        .collect();
    let basis = train_basis(&residuals, dim).unwrap();
    let q = Quantizer::new(0.01).unwrap();
    let mut corrected: Vec<QuantizedValue> = Vec::new();
    for r0 in &residuals {
        let zero = vec![0.0; dim];
        let (_, corr) = guarantee::correct_patch(r0, &zero, &basis, 0.05, &q, None).unwrap();
        corrected.extend(corr.entries.iter().map(|e| e.1));
    }
    assert!(corrected.len() > 1000, "fixture produced real corrections");
    let table = HuffmanTable::build(&count_values(corrected.iter().copied())).unwrap();
    let mut w = BitWriter::new();
    encode_values(&corrected, &table, &mut w).unwrap();
    let (bytes, bit_len) = w.finish();
    let mut r = BitReader::new(&bytes, bit_len).unwrap();
    assert_eq!(
        decode_values(corrected.len(), &table, &mut r).unwrap(),
        corrected
    );

    println!(
        "acceptance 05 lossless-entropy: PASS (1e6-symbol roundtrip, 4:2:1:1 -> 1,2,3,3, \
         index {{0,2}}/8 -> 101 len 3, {} corrected coefficients roundtripped)",
        corrected.len()
    );
}

#[test]
fn acceptance_06_greedy_selection_optimality() {
    let mut rng = ChaCha8Rng::seed_from_u64(666);
    let mut checked = 0usize;
    while checked < 500 {
        let dim = rng.gen_range(4..=8usize);
        let count = 32;
        let residuals: Vec<Vec<f64>> = (0..count)
            .map(|_| {
                (0..dim)
                    .map(|_| ((rng.gen::<f64>() - 0.5) * 4.0) as f32 as f64)
                    .collect()
            })
            .collect();
        let basis = train_basis(&residuals, dim).unwrap();
        for r in residuals.iter().take(8) {
            let c = basis.project(r).unwrap();
            let energy: f64 = c.iter().map(|v| v * v).sum();
            let mut order: Vec<usize> = (0..dim).collect();
            order.sort_by(|&a, &b| (c[b] * c[b]).partial_cmp(&(c[a] * c[a])).unwrap());
            for m in 1..=dim {
                // minimum delta <=> maximum removed energy; compare the
                // removed sums so sqrt does not amplify cancellation noise
                let greedy_removed: f64 = order[..m].iter().map(|&k| c[k] * c[k]).sum();
                // exhaustive enumeration of all m-subsets
                let mut best_removed = 0.0f64;
                for subset in 0u32..(1 << dim) {
                    if subset.count_ones() as usize != m {
                        continue;
                    }
                    let removed: f64 = (0..dim)
                        .filter(|k| subset & (1 << k) != 0)
                        .map(|k| c[k] * c[k])
                        .sum();
                    best_removed = best_removed.max(removed);
                }
                assert!(
                    greedy_removed >= best_removed - 1e-12 * energy.max(1.0),
                    "dim {dim} m {m}: greedy removed {greedy_removed} vs best {best_removed}"
                );
            }
            checked += 1;
        }
    }
    println!(
        "acceptance 06 greedy-optimality: PASS ({checked} residuals, D in 4..=8, exhaustive subsets)"
    );
}

#[test]
fn acceptance_07_end_to_end_determinism() {
    let shape = Shape::new(6, 20, 20);
    let mut params = SynthParams::new(shape);
    params.coverage = 0.15;
    let out = synth::generate(99, &params).unwrap();
    let spec = PartitionSpec::new(2, 4, 4);
    let class_map = roi::classify_patches(
        &out.mask,
        shape,
        &spec,
        0.3,
        Connectivity::Eight,
        1,
        (0.05, 0.2, 0.4),
    )
    .unwrap();
    let mut cfg = CompressConfig::new(spec, PredictorKind::BlockMean, 0.01);

    let archive_a = compress(&out.field, &class_map, &cfg, None).unwrap();
    let archive_b = compress(&out.field, &class_map, &cfg, None).unwrap();
    assert_eq!(
        archive_a.as_bytes(),
        archive_b.as_bytes(),
        "repeat compression"
    );
    cfg.workers = Some(1);
    let archive_w1 = compress(&out.field, &class_map, &cfg, None).unwrap();
    cfg.workers = Some(8);
    let archive_w8 = compress(&out.field, &class_map, &cfg, None).unwrap();
    assert_eq!(archive_a.as_bytes(), archive_w1.as_bytes(), "1 worker");
    assert_eq!(archive_a.as_bytes(), archive_w8.as_bytes(), "8 workers");

    let d1 = decompress_with_workers(&archive_a, None, Some(1)).unwrap();
    let d2 = decompress_with_workers(&archive_a, None, Some(2)).unwrap();
    let d8 = decompress_with_workers(&archive_a, None, Some(8)).unwrap();
    assert_eq!(d1.samples(), d2.samples());
    assert_eq!(d1.samples(), d8.samples());
    println!(
        "acceptance 07 determinism: PASS (byte-identical archives across repeats and worker \
         counts 1/8; decode bit-exact across 1/2/8 workers; {} bytes)",
        archive_a.size()
    );
}

/// Frozen corpus and bounds for the differential-benefit check.
fn differential_fixture() -> (Field, RoiMask, PartitionSpec, f64) {
    let shape = Shape::new(16, 96, 96);
    let mut params = SynthParams::new(shape);
    params.coverage = 0.10;
    let out = synth::generate(7, &params).unwrap();
    assert!(
        out.coverage > 0.05 && out.coverage < 0.15,
        "corpus coverage {} strayed from the 10% target",
        out.coverage
    );
    (out.field, out.mask, PartitionSpec::new(4, 4, 4), 0.1)
}

#[test]
fn acceptance_08_differential_bound_benefit() {
    let start = Instant::now();
    let (field, mask, spec, tau_roi) = differential_fixture();
    let shape = field.shape();
    let bounds = (tau_roi, 4.0 * tau_roi, 8.0 * tau_roi);
    let class_map = roi::classify_patches(
        &mask,
        shape,
        &spec,
        0.3,
        Connectivity::Eight,
        1,
        bounds,
    )
    .unwrap();
    let uniform_map = PatchClassMap::uniform(spec.blocks(shape), tau_roi).unwrap();
    let cfg = CompressConfig::new(spec, PredictorKind::BlockMean, 0.015);

    let differential = compress(&field, &class_map, &cfg, None).unwrap();
    let uniform = compress(&field, &uniform_map, &cfg, None).unwrap();
    let ratio_diff = compression_ratio(&field, &differential);
    let ratio_unif = compression_ratio(&field, &uniform);
    let factor = ratio_diff / ratio_unif;
    assert!(
        factor >= 1.5,
        "differential ratio {ratio_diff:.2} vs uniform {ratio_unif:.2}: factor {factor:.3} < 1.5"
    );

    // every ROI patch of the differential archive still meets tau_roi
    let decoded = decompress(&differential, None).unwrap();
    let classes = archive_classes(&differential).unwrap();
    let orig = grid::partition(&field, &spec).unwrap();
    let back = grid::partition(&decoded, &spec).unwrap();
    let mut roi_patches = 0usize;
    for ((a, b), (class, tau)) in orig.iter().zip(&back).zip(&classes) {
        if *class != PatchClass::Roi {
            continue;
        }
        roi_patches += 1;
        assert!((*tau - tau_roi).abs() < 1e-12);
        let b32: Vec<f32> = b.vector.iter().map(|&v| v as f32).collect();
        let err = masked_l2(&a.vector, &b32, Some(&a.valid));
        assert!(err <= tau_roi, "roi patch err {err} > {tau_roi}");
    }
    assert!(roi_patches > 0);
    let elapsed = start.elapsed();
    assert!(elapsed.as_secs_f64() < 120.0, "took {elapsed:?}");
    println!(
        "acceptance 08 differential-benefit: PASS (differential CR {ratio_diff:.2} vs uniform \
         {ratio_unif:.2}, factor {factor:.2} >= 1.5, {roi_patches} ROI patches at tau, {:.1}s)",
        elapsed.as_secs_f64()
    );
}

#[test]
fn acceptance_09_metrics_fidelity() {
    // tc error rate: 10 events, one displaced beyond the radius -> 10%
    let truth: Vec<(usize, f64, f64)> = (0..10).map(|i| (i, 20.0, 20.0)).collect();
    let mut test = truth.clone();
    test[3] = (3, 40.0, 40.0);
    let report = metrics::tc_error_rate(
        &DetectionSet {
            tc: truth.clone(),
            ar: None,
        },
        &DetectionSet {
            tc: test,
            ar: None,
        },
        2.0,
    )
    .unwrap();
    assert_eq!(report.rate_percent, RateOutcome::Rate(10.0));
    assert_eq!(report.errors, 1);

    // iou: truth 100 cells, test those plus 50 extra -> 100/150
    let shape = Shape::new(1, 20, 20);
    let mut truth_mask = RoiMask::empty(shape);
    for i in 0..100 {
        truth_mask.set(0, i / 20, i % 20, true);
    }
    let mut test_mask = truth_mask.clone();
    for i in 100..150 {
        test_mask.set(0, i / 20, i % 20, true);
    }
    let iou = metrics::iou(&truth_mask, &test_mask).unwrap();
    assert!((iou.iou - 100.0 / 150.0).abs() < 1e-15);
    assert_eq!((iou.tp, iou.fp, iou.fn_), (100, 50, 0));

    // relative l2: single-cell perturbation -> eps / ||x||
    let x = Field::new(
        "x",
        Shape::new(1, 2, 2),
        vec![1.0, 2.0, 3.0, 4.0],
        None,
    )
    .unwrap();
    let mut samples = x.samples().to_vec();
    samples[0] += 0.125;
    let xp = Field::new("x", x.shape(), samples, None).unwrap();
    let expected = 0.125f64 / (1.0f64 + 4.0 + 9.0 + 16.0).sqrt();
    assert!((metrics::relative_l2(&x, &xp).unwrap() - expected).abs() < 1e-15);

    // fn ratio: 1 of 20 points uncovered -> 0.05
    let shape2 = Shape::new(2, 8, 8);
    let mut mask = RoiMask::empty(shape2);
    for h in 0..8 {
        for w in 0..8 {
            mask.set(0, h, w, true);
        }
    }
    let pts: Vec<(usize, f64, f64)> = (0..20)
        .map(|i| (usize::from(i == 5), (i % 8) as f64, (i / 8) as f64))
        .collect();
    assert_eq!(
        metrics::fn_ratio_points(&pts, &mask).unwrap(),
        RateOutcome::Rate(0.05)
    );

    // classification: single interior ROI patch grows exactly 8 buffers
    let shape3 = Shape::new(1, 10, 10);
    let spec = PartitionSpec::new(1, 2, 2);
    let mut roi_mask = RoiMask::empty(shape3);
    for h in 4..6 {
        for w in 4..6 {
            roi_mask.set(0, h, w, true);
        }
    }
    let map = roi::classify_patches(
        &roi_mask,
        shape3,
        &spec,
        0.5,
        Connectivity::Eight,
        1,
        (0.1, 0.2, 0.9),
    )
    .unwrap();
    assert_eq!(map.class_counts(), (1, 8, 16));

    println!(
        "acceptance 09 metrics-fidelity: PASS (tc 10%, iou 0.667, relative-l2 analytic, \
         fn-ratio 0.05, single-roi -> 8 buffers)"
    );
}

#[test]
fn acceptance_10_composed_error_bound() {
    let mut results = Vec::new();

    // corpus run
    let (field, mask, spec, tau_roi) = differential_fixture();
    let class_map = roi::classify_patches(
        &mask,
        field.shape(),
        &spec,
        0.3,
        Connectivity::Eight,
        1,
        (tau_roi, 4.0 * tau_roi, 8.0 * tau_roi),
    )
    .unwrap();
    let cfg = CompressConfig::new(spec, PredictorKind::BlockMean, 0.015);
    let archive = compress(&field, &class_map, &cfg, None).unwrap();
    results.push((field, spec, archive));

    // a second run with a different predictor and uniform bounds
    let mut rng = ChaCha8Rng::seed_from_u64(1010);
    let shape = Shape::new(6, 24, 24);
    let field2 = random_field(&mut rng, shape, 5.0);
    let spec2 = PartitionSpec::new(2, 4, 4);
    let map2 = PatchClassMap::uniform(spec2.blocks(shape), 0.25).unwrap();
    let cfg2 = CompressConfig::new(spec2, PredictorKind::Downsample { ft: 2, fh: 2, fw: 2 }, 0.03);
    let archive2 = compress(&field2, &map2, &cfg2, None).unwrap();
    results.push((field2, spec2, archive2));

    for (field, spec, archive) in &results {
        let decoded = decompress(archive, None).unwrap();
        let rel = metrics::relative_l2(field, &decoded).unwrap();
        let classes = archive_classes(archive).unwrap();
        let tau_sq_sum: f64 = classes.iter().map(|(_, tau)| tau * tau).sum();
        let field_norm: f64 = field
            .samples()
            .iter()
            .map(|&v| (v as f64) * (v as f64))
            .sum::<f64>()
            .sqrt();
        let bound = tau_sq_sum.sqrt() / field_norm;
        assert!(
            rel <= bound,
            "relative l2 {rel} exceeds composed bound {bound}"
        );
        let _ = spec;
    }
    println!(
        "acceptance 10 composed-error-bound: PASS ({} corpus runs, relative l2 within \
         sqrt(sum tau^2)/||x||)",
        results.len()
    );
}

#[test]
fn acceptance_11_fuzzed_archives_fail_loudly() {
    let start = Instant::now();
    // two small archives with different predictors and pad policies
    let mut rng = ChaCha8Rng::seed_from_u64(1111);
    let field_a = random_field(&mut rng, Shape::new(3, 9, 9), 2.0);
    let spec_a = PartitionSpec::new(2, 4, 4).with_pad(Some(PadPolicy::Reflect));
    let map_a = PatchClassMap::uniform(spec_a.blocks(field_a.shape()), 0.2).unwrap();
    let cfg_a = CompressConfig::new(spec_a, PredictorKind::BlockMean, 0.05);
    let base_a = compress(&field_a, &map_a, &cfg_a, None).unwrap().into_bytes();

    let field_b = random_field(&mut rng, Shape::new(4, 8, 8), 100.0);
    let spec_b = PartitionSpec::new(2, 4, 4);
    let map_b = PatchClassMap::uniform(spec_b.blocks(field_b.shape()), 1.0).unwrap();
    let cfg_b = CompressConfig::new(spec_b, PredictorKind::Zero, 0.1);
    let base_b = compress(&field_b, &map_b, &cfg_b, None).unwrap().into_bytes();

    let bases = [base_a, base_b];
    let iterations = 100_000usize;
    for i in 0..iterations {
        let base = &bases[i % bases.len()];
        let mut bytes = base.clone();
        match i % 4 {
            // single and multi bit flips at distinct positions
            0 | 1 => {
                let flips = 1 + i % 3;
                let mut positions = std::collections::BTreeSet::new();
                while positions.len() < flips {
                    positions.insert(rng.gen_range(0..bytes.len() * 8));
                }
                for bit in positions {
                    bytes[bit / 8] ^= 1 << (bit % 8);
                }
            }
            // truncation
            2 => {
                let keep = rng.gen_range(0..bytes.len());
                bytes.truncate(keep);
            }
            // trailing junk
            _ => {
                let extra = rng.gen_range(1..64);
                for _ in 0..extra {
                    bytes.push(rng.gen());
                }
            }
        }
        match Archive::from_bytes(bytes) {
            Err(_) => {}
            Ok(archive) => {
                // a verified parse of corrupted bytes must still decode or
                // error, never panic; reaching here means a checksum
                // collision, which the 64-bit sums make implausible
                panic!(
                    "fuzz iteration {i}: corrupted archive passed verification ({} bytes)",
                    archive.size()
                );
            }
        }
    }
    let elapsed = start.elapsed();
    println!(
        "acceptance 11 fuzz-robustness: PASS ({iterations} corrupted archives, all rejected \
         with explicit errors, {:.1}s)",
        elapsed.as_secs_f64()
    );
}

#[test]
fn acceptance_uniform_bounds_collapse_to_uniform_output() {
    // equal class bounds must reproduce the uniform result bit for bit on
    // the decoded data
    let (field, mask, spec, tau) = {
        let shape = Shape::new(4, 24, 24);
        let mut params = SynthParams::new(shape);
        params.coverage = 0.12;
        let out = synth::generate(21, &params).unwrap();
        (out.field, out.mask, PartitionSpec::new(2, 4, 4), 0.2)
    };
    let class_map = roi::classify_patches(
        &mask,
        field.shape(),
        &spec,
        0.3,
        Connectivity::Eight,
        1,
        (tau, tau, tau),
    )
    .unwrap();
    let uniform_map = PatchClassMap::uniform(spec.blocks(field.shape()), tau).unwrap();
    let cfg = CompressConfig::new(spec, PredictorKind::BlockMean, 0.02);
    let a = compress(&field, &class_map, &cfg, None).unwrap();
    let b = compress(&field, &uniform_map, &cfg, None).unwrap();
    let da = decompress(&a, None).unwrap();
    let db = decompress(&b, None).unwrap();
    assert_eq!(da.samples(), db.samples());
    println!("acceptance extra class-collapse: PASS (equal bounds decode identically)");
}
