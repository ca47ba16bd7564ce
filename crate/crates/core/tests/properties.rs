//! Property tests for the library invariants.

use std::collections::BTreeSet;

use proptest::prelude::*;

use gaec::bits::{BitReader, BitWriter};
use gaec::entropy::{
    self, count_values, decode_values, encode_values, HuffmanTable, QuantizedValue, Quantizer,
};
use gaec::grid::{self, Field, PadPolicy, PartitionSpec, Shape};
use gaec::guarantee::{self, correct_patch, train_basis, ResidualBasis};
use gaec::predictor::{predict, regenerate, PredictorKind};
use gaec::roi::{self, Connectivity, ProbabilityMap, RoiMask};

fn field_strategy() -> impl Strategy<Value = Field> {
    (1usize..5, 1usize..12, 1usize..12)
        .prop_flat_map(|(t, h, w)| {
            let shape = Shape::new(t, h, w);
            (
                Just(shape),
                proptest::collection::vec(-1e4f32..1e4f32, shape.len()),
            )
        })
        .prop_map(|(shape, samples)| Field::new("prop", shape, samples, None).unwrap())
}

fn spec_strategy() -> impl Strategy<Value = PartitionSpec> {
    (
        1usize..5,
        1usize..7,
        1usize..7,
        prop_oneof![
            Just(Some(PadPolicy::Edge)),
            Just(Some(PadPolicy::Reflect)),
            Just(Some(PadPolicy::Zero)),
        ],
    )
        .prop_map(|(t, h, w, pad)| PartitionSpec {
            patch_t: t,
            patch_h: h,
            patch_w: w,
            pad,
        })
}

proptest! {
    #[test]
    fn partition_reassemble_bijection(field in field_strategy(), spec in spec_strategy()) {
        let patches = grid::partition(&field, &spec).unwrap();
        let (nt, nh, nw) = spec.blocks(field.shape());
        prop_assert_eq!(patches.len(), nt * nh * nw);
        let back = grid::reassemble(&patches, field.shape(), &spec).unwrap();
        prop_assert_eq!(back.samples(), field.samples());
    }

    #[test]
    fn ivt_matches_cellwise_oracle(
        pairs in proptest::collection::vec((-1e3f32..1e3f32, -1e3f32..1e3f32), 12)
    ) {
        let shape = Shape::new(1, 3, 4);
        let tvq: Vec<f32> = pairs.iter().map(|p| p.0).collect();
        let tuq: Vec<f32> = pairs.iter().map(|p| p.1).collect();
        let a = Field::new("TVQ", shape, tvq.clone(), None).unwrap();
        let b = Field::new("TUQ", shape, tuq.clone(), None).unwrap();
        let ivt = grid::compute_ivt(&a, &b).unwrap();
        for i in 0..12 {
            let expect = ((tvq[i] as f64).powi(2) + (tuq[i] as f64).powi(2)).sqrt() as f32;
            prop_assert_eq!(ivt.samples()[i], expect);
            prop_assert!(ivt.samples()[i] >= 0.0);
        }
        let na = Field::new("TVQ", shape, tvq.iter().map(|v| -v).collect(), None).unwrap();
        let nb = Field::new("TUQ", shape, tuq.iter().map(|v| -v).collect(), None).unwrap();
        let negated = grid::compute_ivt(&na, &nb).unwrap();
        prop_assert_eq!(negated.samples(), ivt.samples());
    }

    #[test]
    fn threshold_is_antitone(
        values in proptest::collection::vec(0f64..1f64, 48),
        a1 in 0f64..1f64,
        a2 in 0f64..1f64,
    ) {
        let (lo, hi) = if a1 <= a2 { (a1, a2) } else { (a2, a1) };
        let map = ProbabilityMap { h: 6, w: 8, values };
        let m_lo = roi::threshold_map(&map, lo).unwrap();
        let m_hi = roi::threshold_map(&map, hi).unwrap();
        for (l, h) in m_lo.iter().zip(&m_hi) {
            prop_assert!(*l || !*h, "raising the threshold added a bit");
        }
    }

    #[test]
    fn quantizer_half_bin_contract(
        ratio in -2e9f64..2e9f64,
        exp in -6i32..7,
    ) {
        // within the archive's index width; larger ratios escape to raw
        // floats instead of bins
        let d = 10f64.powi(exp);
        let v = ratio * d;
        let q = Quantizer::new(d).unwrap();
        let err = (v - q.dequantize(q.quantize(v))).abs();
        // the 1e-9 relative slack absorbs representative rounding when v
        // lands exactly on a bin boundary
        prop_assert!(err <= d / 2.0 * (1.0 + 1e-9), "v={v} d={d} err={err}");
    }

    #[test]
    fn huffman_symbol_roundtrip(symbols in proptest::collection::vec(-500i64..500, 1..400)) {
        let values: Vec<QuantizedValue> = symbols.iter().map(|&s| QuantizedValue::Bin(s)).collect();
        let table = HuffmanTable::build(&count_values(values.iter().copied())).unwrap();
        let mut w = BitWriter::new();
        encode_values(&values, &table, &mut w).unwrap();
        let (bytes, len) = w.finish();
        let mut r = BitReader::new(&bytes, len).unwrap();
        let back = decode_values(values.len(), &table, &mut r).unwrap();
        prop_assert_eq!(back, values);
        prop_assert!(r.remaining() == 0);
    }

    #[test]
    fn huffman_table_survives_serialization_order(
        symbols in proptest::collection::vec(-50i64..50, 1..200)
    ) {
        let values: Vec<QuantizedValue> = symbols.iter().map(|&s| QuantizedValue::Bin(s)).collect();
        let table = HuffmanTable::build(&count_values(values.iter().copied())).unwrap();
        let rebuilt = HuffmanTable::from_lengths(table.entries().to_vec()).unwrap();
        prop_assert_eq!(&rebuilt, &table);
    }

    #[test]
    fn index_code_roundtrip(raw in proptest::collection::btree_set(0u32..96, 0..40)) {
        let dim = 96;
        let selected: Vec<u32> = raw.iter().copied().collect();
        let code = entropy::index_encode(&selected, dim).unwrap();
        let expect_len = selected.iter().max().map_or(0, |m| m + 1);
        prop_assert_eq!(code.prefix_len, expect_len);
        let back = entropy::index_decode(&code, dim).unwrap();
        prop_assert_eq!(back, selected);
    }
}

fn seeded_residuals(seed: u64, dim: usize, count: usize) -> Vec<Vec<f64>> {
    use rand::prelude::*;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            (0..dim)
                .map(|_| ((rng.gen::<f64>() - 0.5) * 8.0) as f32 as f64)
                .collect()
        })
        .collect()
}

fn l2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

#[test]
fn unquantized_correction_error_is_monotone_and_vanishes() {
    // pure f64 view of the correction math: with quantization off, adding
    // coefficients never increases the true reconstruction error and all
    // of them together remove it
    let dim = 48;
    let residuals = seeded_residuals(5, dim, 160);
    let basis = train_basis(&residuals, dim).unwrap();
    for r in residuals.iter().take(24) {
        let c = basis.project(r).unwrap();
        let mut order: Vec<usize> = (0..dim).collect();
        order.sort_by(|&a, &b| (c[b] * c[b]).partial_cmp(&(c[a] * c[a])).unwrap());
        let norm = l2(r);
        let mut recon = vec![0.0f64; dim];
        let mut prev = norm;
        for (m, &k) in order.iter().enumerate() {
            let col = basis.column(k);
            for i in 0..dim {
                recon[i] += c[k] * col[i];
            }
            let tail: Vec<f64> = r.iter().zip(&recon).map(|(a, b)| a - b).collect();
            let delta = l2(&tail);
            assert!(
                delta <= prev + 1e-6 * norm,
                "delta grew at m={} ({prev} -> {delta})",
                m + 1
            );
            prev = delta;
        }
        assert!(prev <= 1e-5 * norm, "residual tail {prev} after all {dim}");
    }
}

#[test]
fn quantized_tail_bound_holds() {
    let dim = 32;
    let residuals = seeded_residuals(11, dim, 128);
    let basis = train_basis(&residuals, dim).unwrap();
    use rand::prelude::*;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(12);
    for case in 0..80 {
        let x: Vec<f64> = (0..dim)
            .map(|_| ((rng.gen::<f64>() - 0.5) * 4.0) as f32 as f64)
            .collect();
        let x_r: Vec<f64> = (0..dim)
            .map(|_| ((rng.gen::<f64>() - 0.5) * 4.0) as f32 as f64)
            .collect();
        let d = [0.5, 0.05, 0.005][case % 3];
        let tau = 0.05 + rng.gen::<f64>() * 2.0;
        let q = Quantizer::new(d).unwrap();
        let (_, corr) = correct_patch(&x, &x_r, &basis, tau, &q, None).unwrap();
        if corr.fallback.is_some() || corr.entries.is_empty() {
            continue;
        }
        let residual: Vec<f64> = x.iter().zip(&x_r).map(|(a, b)| a - b).collect();
        let c = basis.project(&residual).unwrap();
        let selected: BTreeSet<u32> = corr.entries.iter().map(|e| e.0).collect();
        let unselected: f64 = (0..dim as u32)
            .filter(|k| !selected.contains(k))
            .map(|k| c[k as usize] * c[k as usize])
            .sum();
        let m = corr.entries.len() as f64;
        let bound = (unselected + m * (d / 2.0) * (d / 2.0)).sqrt();
        let slack = 1e-6 * (1.0 + l2(&x) + l2(&x_r));
        assert!(
            corr.achieved_error <= bound + slack,
            "delta {} > bound {bound} (case {case})",
            corr.achieved_error
        );
    }
}

#[test]
fn classification_partitions_lattice_and_buffers_touch_roi() {
    use rand::prelude::*;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
    for _ in 0..40 {
        let shape = Shape::new(
            rng.gen_range(1..4usize),
            rng.gen_range(6..20usize),
            rng.gen_range(6..20usize),
        );
        let bits: Vec<bool> = (0..shape.len()).map(|_| rng.gen::<f64>() < 0.2).collect();
        let mask = RoiMask::new(shape, bits).unwrap();
        let spec = PartitionSpec::new(1, rng.gen_range(2..4), rng.gen_range(2..4));
        let conn = if rng.gen() {
            Connectivity::Eight
        } else {
            Connectivity::Four
        };
        let frac_hi = 0.4;
        let frac_lo = 0.1;
        let hi = roi::classify_patches(&mask, shape, &spec, frac_hi, conn, 1, (0.1, 0.2, 0.9))
            .unwrap();
        let lo = roi::classify_patches(&mask, shape, &spec, frac_lo, conn, 1, (0.1, 0.2, 0.9))
            .unwrap();

        // every patch has exactly one class by construction; check buffer
        // adjacency and roi monotonicity in the fraction
        let (nt, nh, nw) = hi.blocks;
        let at = |m: &gaec::roi::PatchClassMap, bt: usize, bh: usize, bw: usize| {
            m.classes[(bt * nh + bh) * nw + bw]
        };
        for bt in 0..nt {
            for bh in 0..nh {
                for bw in 0..nw {
                    use gaec::roi::PatchClass;
                    if at(&hi, bt, bh, bw) == PatchClass::Roi {
                        assert_eq!(at(&lo, bt, bh, bw), PatchClass::Roi, "roi set shrank");
                    }
                    if at(&hi, bt, bh, bw) != PatchClass::Buffer {
                        continue;
                    }
                    let mut touches = false;
                    for dh in -1i64..=1 {
                        for dw in -1i64..=1 {
                            if dh == 0 && dw == 0 {
                                continue;
                            }
                            if conn == Connectivity::Four && dh.abs() + dw.abs() > 1 {
                                continue;
                            }
                            let (qh, qw) = (bh as i64 + dh, bw as i64 + dw);
                            if qh >= 0
                                && qw >= 0
                                && (qh as usize) < nh
                                && (qw as usize) < nw
                                && at(&hi, bt, qh as usize, qw as usize) == PatchClass::Roi
                            {
                                touches = true;
                            }
                        }
                    }
                    assert!(touches, "buffer patch with no roi neighbor");
                }
            }
        }
    }
}

#[test]
fn predict_regenerate_roundtrip_over_kinds() {
    use rand::prelude::*;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(17);
    let spec = PartitionSpec::new(4, 6, 6);
    let pq = Quantizer::new(0.01).unwrap();
    let lq = Quantizer::new(0.01).unwrap();
    let kinds = [
        PredictorKind::Zero,
        PredictorKind::BlockMean,
        PredictorKind::Downsample { ft: 2, fh: 3, fw: 2 },
        PredictorKind::Downsample { ft: 1, fh: 2, fw: 3 },
        PredictorKind::Downsample { ft: 4, fh: 6, fw: 6 },
    ];
    for _ in 0..300 {
        let vector: Vec<f64> = (0..spec.dim())
            .map(|_| ((rng.gen::<f64>() - 0.5) * 100.0) as f32 as f64)
            .collect();
        for kind in &kinds {
            let (xr, payload) = predict(&vector, kind, &spec, &pq, &lq, None).unwrap();
            let regen = regenerate(&payload, kind, &spec, &pq, None).unwrap();
            assert_eq!(xr, regen, "{kind:?}");
        }
    }
}

#[test]
fn zero_predictor_still_respects_bounds_end_to_end() {
    use gaec::container::{compress, decompress, CompressConfig};
    use gaec::roi::PatchClassMap;
    use rand::prelude::*;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(23);
    for _ in 0..8 {
        let shape = Shape::new(2, rng.gen_range(6..12), rng.gen_range(6..12));
        let samples: Vec<f32> = (0..shape.len())
            .map(|_| (rng.gen::<f32>() - 0.5) * 10.0)
            .collect();
        let field = Field::new("z", shape, samples, None).unwrap();
        let spec = PartitionSpec::new(2, 3, 3);
        let tau = 10f64.powf(rng.gen_range(-3.0..0.5));
        let cfg = CompressConfig::new(spec, PredictorKind::Zero, tau / 8.0);
        let class_map = PatchClassMap::uniform(spec.blocks(shape), tau).unwrap();
        let archive = compress(&field, &class_map, &cfg, None).unwrap();
        let decoded = decompress(&archive, None).unwrap();
        let orig = grid::partition(&field, &spec).unwrap();
        let back = grid::partition(&decoded, &spec).unwrap();
        for (a, b) in orig.iter().zip(&back) {
            let b32: Vec<f32> = b.vector.iter().map(|&v| v as f32).collect();
            let err = guarantee::masked_l2(&a.vector, &b32, Some(&a.valid));
            assert!(err <= tau, "tau {tau} err {err}");
        }
    }
}

#[test]
fn basis_truncation_keeps_leading_columns() {
    let dim = 24;
    let residuals = seeded_residuals(31, dim, 96);
    let basis = train_basis(&residuals, dim).unwrap();
    let truncated = basis.clone().truncate(7).unwrap();
    assert_eq!(truncated.stored(), 7);
    for k in 0..7 {
        assert_eq!(truncated.column(k), basis.column(k));
    }
    assert!(ResidualBasis::identity(dim).orthonormality_defect() == 0.0);
}
