use ctxpair::sampler::mismatch_rate;
use ctxpair::slidegen::{generate_dataset, generate_slide, GenConfig, SplitCounts, TissueClass, VirtualSlide};

fn lesion_slides(n: u32) -> Vec<VirtualSlide> {
    let cfg = GenConfig::default();
    (0..n)
        .map(|id| {
            let class = if id % 2 == 0 { TissueClass::Dysplasia } else { TissueClass::Malignant };
            generate_slide(&cfg, id, class).unwrap()
        })
        .collect()
}

#[test]
fn lesions_are_spatially_coherent() {
    let slides = lesion_slides(20);
    let (near, far) = (mismatch_rate(&slides, 1).unwrap(), mismatch_rate(&slides, 8).unwrap());
    assert!(near < far, "d=1 {near} vs d=8 {far}");
    assert!(near > 0.0);
    // each slide on its own, not just pooled
    for s in &slides {
        let one = std::slice::from_ref(s);
        assert!(mismatch_rate(one, 1).unwrap() <= mismatch_rate(one, 8).unwrap());
    }
}

#[test]
fn mismatch_rises_with_distance() {
    let slides = lesion_slides(20);
    let rates: Vec<f64> = [1, 2, 4, 8].iter().map(|&d| mismatch_rate(&slides, d).unwrap()).collect();
    assert!(rates.windows(2).all(|w| w[0] < w[1]), "{rates:?}");
}

#[test]
fn malignant_cells_are_a_minority() {
    let cfg = GenConfig::default();
    let mut total = 0.0;
    for id in 0..30 {
        let s = generate_slide(&cfg, id, TissueClass::Malignant).unwrap();
        let frac = s.labels.iter().filter(|&&l| l == TissueClass::Malignant).count() as f64 / s.cell_count() as f64;
        assert!(frac > 0.0 && frac < 0.6, "slide {id}: {frac}");
        total += frac;
    }
    let mean = total / 30.0;
    assert!((0.02..0.4).contains(&mean), "mean malignant fraction {mean}");
}

#[test]
fn prototypes_stand_out_from_noise() {
    let cfg = GenConfig::default();
    assert!(cfg.prototype_separation() > 3.0 * cfg.noise_std);
    // benign and malignant cell means differ on real slides too
    let s = generate_slide(&cfg, 5, TissueClass::Malignant).unwrap();
    let mean_of = |class: TissueClass| -> Vec<f64> {
        let c = s.dims.channels;
        let mut acc = vec![0.0; c];
        let mut n = 0usize;
        for cell in 0..s.cell_count() {
            if s.labels[cell] == class {
                for px in s.patch_at(cell).chunks(c) {
                    acc.iter_mut().zip(px).for_each(|(a, &v)| *a += f64::from(v));
                    n += 1;
                }
            }
        }
        acc.iter().map(|a| a / n as f64).collect()
    };
    let (b, m) = (mean_of(TissueClass::Benign), mean_of(TissueClass::Malignant));
    let dist = b.iter().zip(&m).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    assert!(dist > 3.0 * cfg.noise_std, "observed separation {dist}");
}

#[test]
fn default_dataset_shape() {
    let ds = generate_dataset(&GenConfig::default(), &SplitCounts::default()).unwrap();
    assert_eq!((ds.train.len(), ds.val.len(), ds.test.len()), (30, 9, 9));
    for s in ds.all_slides() {
        assert_eq!((s.rows, s.cols), (32, 32));
        assert_eq!(s.pixels.len(), 32 * 32 * 16 * 16 * 3);
    }
    let again = generate_dataset(&GenConfig::default(), &SplitCounts::default()).unwrap();
    assert_eq!(ds, again);
}
