use std::fs;

use gaitchd::backbone::{FRAME_HEIGHT, FRAME_WIDTH};
use gaitchd::data::{
    export_dataset, index_casia_b, preprocess_silhouette, sample_frames, split_lt, synth_dataset, Capture, SplitRule,
    SynthSpec,
};
use image::{GrayImage, Luma};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// A filled ellipse on an arbitrary canvas.
fn blob(w: u32, h: u32, cx: f64, cy: f64, rx: f64, ry: f64) -> GrayImage {
    GrayImage::from_fn(w, h, |x, y| {
        let dx = (f64::from(x) + 0.5 - cx) / rx;
        let dy = (f64::from(y) + 0.5 - cy) / ry;
        Luma([if dx * dx + dy * dy <= 1.0 { 255 } else { 0 }])
    })
}

proptest! {
    #[test]
    fn preprocess_geometry_and_idempotence(
        w in 20u32..120, h in 20u32..160, fx in 0.2f64..0.8, fy in 0.2f64..0.8, aspect in 0.05f64..0.55, ry in 4.0f64..40.0,
    ) {
        // narrow enough that nothing is cropped at 44 columns, which makes
        // the output a conformant frame
        let (cx, cy, rx) = (fx * f64::from(w), fy * f64::from(h), (aspect * ry).max(1.0));
        prop_assume!(cx >= rx && cx + rx <= f64::from(w) && cy >= ry && cy + ry <= f64::from(h));
        let img = blob(w, h, cx, cy, rx, ry);
        let f = preprocess_silhouette(&img).unwrap();
        prop_assert_eq!(f.pixels().len(), FRAME_HEIGHT * FRAME_WIDTH);
        let t = f.to_tensor();
        prop_assert!(t.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        // the silhouette spans the full height
        prop_assert!((0..FRAME_WIDTH).any(|x| f.get(0, x) > 0));
        prop_assert!((0..FRAME_WIDTH).any(|x| f.get(FRAME_HEIGHT - 1, x) > 0));
        let again = preprocess_silhouette(&f.to_image()).unwrap();
        prop_assert_eq!(again, f);
    }

}

proptest! {
    // each case renders a small synthetic dataset
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn split_is_an_ordered_partition(n in 2usize..12, rule in prop_oneof![Just(SplitRule::Auto), Just(SplitRule::Fraction)]) {
        let data = synth_dataset(&SynthSpec::new(n, &[90], 8), 5).unwrap();
        let (train, test) = split_lt(&data, rule).unwrap();
        prop_assert!(!train.subjects.is_empty() && !test.subjects.is_empty());
        let mut joined = train.subjects.clone();
        joined.extend(test.subjects.iter().cloned());
        prop_assert_eq!(&joined, &data.subjects);
        prop_assert_eq!(train.sequences.len() + test.sequences.len(), data.sequences.len());
        prop_assert!(split_lt(&data, SplitRule::Lt).is_err());
    }
}

proptest! {
    #[test]
    fn frame_sampling(len in 1usize..60, count in 1usize..40, seed in any::<u64>()) {
        let idx = sample_frames(len, count, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        prop_assert_eq!(idx.len(), count);
        prop_assert!(idx.windows(2).all(|p| p[0] <= p[1]));
        prop_assert!(idx.iter().all(|&i| i < len));
        if len >= count {
            prop_assert!(idx.windows(2).all(|p| p[0] < p[1]));
        }
    }
}

#[test]
fn empty_image_is_rejected() {
    assert!(preprocess_silhouette(&GrayImage::new(30, 40)).is_err());
}

#[test]
fn synth_is_pure_and_complete() {
    let spec = SynthSpec::new(3, &[0, 90], 9);
    let a = synth_dataset(&spec, 11).unwrap();
    let b = synth_dataset(&spec, 11).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, synth_dataset(&spec, 12).unwrap());
    assert_eq!(a.sequences.len(), 3 * 10 * 2);
    let all = Capture::all();
    for s in &a.sequences {
        assert!(all.contains(&s.capture));
        assert_eq!(s.frame_count(), 9);
    }
}

#[test]
fn export_then_index_is_identity() {
    let data = synth_dataset(&SynthSpec::new(2, &[36, 144], 8), 4).unwrap();
    let dir = tempfile::tempdir().unwrap();
    export_dataset(&data, dir.path()).unwrap();
    let (index, report) = index_casia_b(dir.path()).unwrap();
    assert!(report.skipped.is_empty());
    let (loaded, skipped) = index.materialize().unwrap();
    assert!(skipped.is_empty());
    assert_eq!(loaded.subjects, data.subjects);
    assert_eq!(loaded.sequences.len(), data.sequences.len());
    for (x, y) in loaded.sequences.iter().zip(&data.sequences) {
        assert_eq!((&x.subject, x.capture, x.view), (&y.subject, y.capture, y.view));
        assert_eq!(x.load().unwrap(), y.load().unwrap());
    }
}

#[test]
fn index_reports_foreign_entries() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let frame = blob(40, 80, 20.0, 40.0, 8.0, 30.0);
    let good = root.join("001/nm-01/090");
    fs::create_dir_all(&good).unwrap();
    frame.save(good.join("001.png")).unwrap();
    frame.save(good.join("002.png")).unwrap();
    fs::write(good.join("notes.txt"), "ignored").unwrap();
    for bad in ["001/xx-99/090", "001/nm-02/091", "abc/nm-01/090", "002/cl-01/018"] {
        fs::create_dir_all(root.join(bad)).unwrap();
    }
    // an empty-frames sequence under an otherwise valid capture
    let blank = root.join("002/bg-01/000");
    fs::create_dir_all(&blank).unwrap();
    GrayImage::new(40, 80).save(blank.join("001.png")).unwrap();

    let (index, report) = index_casia_b(root).unwrap();
    let skipped: Vec<String> = report
        .skipped
        .iter()
        .map(|s| s.path.strip_prefix(root).unwrap().to_string_lossy().into_owned())
        .collect();
    assert!(skipped.contains(&"001/xx-99".to_string()), "{skipped:?}");
    assert!(skipped.contains(&"001/nm-02/091".to_string()));
    assert!(skipped.contains(&"abc".to_string()));
    assert!(skipped.contains(&"002/cl-01/018".to_string()));
    assert_eq!(index.sequences.len(), 2);

    let (loaded, dropped) = index.materialize().unwrap();
    assert_eq!(loaded.sequences.len(), 1);
    assert_eq!(dropped.len(), 1);
    assert_eq!(loaded.sequences[0].label(), "001/nm-01/090");
}
