use gaec::grid::{self, PartitionSpec};
use gaec::predictor::{predict, PredictorKind};
use gaec::roi::{classify_patches, Connectivity, PatchClass};
use gaec::synth::{generate, SynthParams};
use gaec::entropy::Quantizer;
use gaec::guarantee::masked_l2;

fn main() {
    let shape = gaec::grid::Shape::new(16, 96, 96);
    let mut params = SynthParams::new(shape);
    params.coverage = 0.10;
    let out = generate(7, &params).unwrap();
    println!("coverage {}", out.coverage);
    let spec = PartitionSpec::new(4, 4, 4);
    let patches = grid::partition(&out.field, &spec).unwrap();
    let q = Quantizer::new(0.05).unwrap();
    let kind = PredictorKind::BlockMean;
    let map = classify_patches(&out.mask, shape, &spec, 0.3, Connectivity::Eight, 1,
        (0.1, 0.1, 0.8)).unwrap();
    let mut norms: Vec<(PatchClass, f64)> = Vec::new();
    for (i, p) in patches.iter().enumerate() {
        let (xr, _) = predict(&p.vector, &kind, &spec, &q, &q, None).unwrap();
        let xr32: Vec<f32> = xr.iter().map(|&v| v as f32).collect();
        let n = masked_l2(&p.vector, &xr32, Some(&p.valid));
        norms.push((map.classes[i], n));
    }
    for class in [PatchClass::Roi, PatchClass::Buffer, PatchClass::NonRoi] {
        let mut v: Vec<f64> = norms.iter().filter(|(c, _)| *c == class).map(|(_, n)| *n).collect();
        v.sort_by(f64::total_cmp);
        if v.is_empty() { println!("{class:?}: none"); continue; }
        println!("{class:?}: count {} min {:.3} p25 {:.3} median {:.3} p75 {:.3} max {:.3}",
            v.len(), v[0], v[v.len()/4], v[v.len()/2], v[3*v.len()/4], v[v.len()-1]);
    }
}
