//! Property tests for metrics, gating, IDX storage and batching.

use proptest::prelude::*;

use cycada::data::{batch_iterator, denormalize, epoch_order, load_idx, normalize, paired_batches, save_idx, IdxTensor};
use cycada::eval::{confusion, seg_metrics, ConfusionMatrix};
use cycada::trainer::GateMonitor;

fn label_pair(max_len: usize, classes: u32) -> impl Strategy<Value = (Vec<u32>, Vec<u32>)> {
    (1..max_len).prop_flat_map(move |n| (prop::collection::vec(0..classes, n), prop::collection::vec(0..classes, n)))
}

proptest! {
    #[test]
    fn confusion_counts_every_pixel_once((pred, truth) in label_pair(200, 5)) {
        let cm = confusion(&pred, &truth, 5).unwrap();
        prop_assert_eq!(cm.total(), pred.len() as u64);
        let agree = pred.iter().zip(&truth).filter(|(p, t)| p == t).count() as u64;
        prop_assert_eq!(cm.trace(), agree);
        for c in 0..5 {
            prop_assert_eq!(cm.row_sum(c), truth.iter().filter(|&&t| t == c as u32).count() as u64);
            prop_assert_eq!(cm.col_sum(c), pred.iter().filter(|&&p| p == c as u32).count() as u64);
        }
    }

    #[test]
    fn seg_metrics_are_bounded_and_consistent((pred, truth) in label_pair(200, 4)) {
        let m = seg_metrics(&confusion(&pred, &truth, 4).unwrap()).unwrap();
        for iou in m.per_class_iou.iter().flatten() {
            prop_assert!((0.0..=1.0).contains(iou));
        }
        prop_assert!((0.0..=1.0).contains(&m.miou));
        prop_assert!((0.0..=1.0 + 1e-12).contains(&m.fwiou));
        // IoU_i <= n_ii / t_i, so the frequency-weighted mean is at most pixel accuracy.
        prop_assert!(m.fwiou <= m.pixel_acc + 1e-12);
        let perfect = seg_metrics(&confusion(&truth, &truth, 4).unwrap()).unwrap();
        prop_assert_eq!(perfect.miou, 1.0);
        prop_assert_eq!(perfect.pixel_acc, 1.0);
    }

    #[test]
    fn seg_metrics_ignore_label_permutations((pred, truth) in label_pair(100, 3), perm in Just([2u32, 0, 1])) {
        let a = seg_metrics(&confusion(&pred, &truth, 3).unwrap()).unwrap();
        let p: Vec<u32> = pred.iter().map(|&c| perm[c as usize]).collect();
        let t: Vec<u32> = truth.iter().map(|&c| perm[c as usize]).collect();
        let b = seg_metrics(&confusion(&p, &t, 3).unwrap()).unwrap();
        prop_assert!((a.miou - b.miou).abs() < 1e-12);
        prop_assert!((a.fwiou - b.fwiou).abs() < 1e-12);
        prop_assert_eq!(a.pixel_acc, b.pixel_acc);
    }

    #[test]
    fn merged_confusions_add(
        (p1, t1) in label_pair(50, 3),
        (p2, t2) in label_pair(50, 3),
    ) {
        let mut cm = confusion(&p1, &t1, 3).unwrap();
        cm.merge(&confusion(&p2, &t2, 3).unwrap()).unwrap();
        let joint: ConfusionMatrix = confusion(&[p1, p2].concat(), &[t1, t2].concat(), 3).unwrap();
        prop_assert_eq!(cm, joint);
    }

    #[test]
    fn gate_matches_window_count(
        window in 1usize..30,
        threshold in 0.0f64..1.0,
        history in prop::collection::vec(any::<bool>(), 1..120),
    ) {
        let mut gate = GateMonitor::new(window, threshold).unwrap();
        for (i, &d) in history.iter().enumerate() {
            gate.record([d]);
            let recent = &history[(i + 1).saturating_sub(window)..=i];
            let acc = recent.iter().filter(|&&c| c).count() as f64 / recent.len() as f64;
            prop_assert_eq!(gate.accuracy(), Some(acc));
            prop_assert_eq!(gate.permits(), acc > threshold);
        }
    }

    #[test]
    fn idx_round_trips(n in 0usize..6, h in 1usize..6, w in 1usize..6, c in 1usize..4, seed in any::<u8>()) {
        let dir = tempfile::tempdir().unwrap();
        for dims in [vec![n], vec![n, h, w], vec![n, c, h, w]] {
            let len: usize = dims.iter().product();
            let data: Vec<u8> = (0..len).map(|i| (i as u8).wrapping_mul(31).wrapping_add(seed)).collect();
            let t = IdxTensor::new(dims, data).unwrap();
            let path = dir.path().join("t.idx.gz");
            save_idx(&t, &path).unwrap();
            prop_assert_eq!(load_idx(&path).unwrap(), t);
        }
    }

    #[test]
    fn normalization_inverts(v in any::<u8>()) {
        prop_assert_eq!(denormalize(normalize(v)), v);
        prop_assert!((-1.0..=1.0).contains(&normalize(v)));
    }

    #[test]
    fn epochs_are_permutations(len in 1usize..200, seed in any::<u64>(), epoch in 0u64..50) {
        let mut order = epoch_order(len, seed, epoch);
        prop_assert_eq!(order.clone(), epoch_order(len, seed, epoch));
        order.sort_unstable();
        prop_assert_eq!(order, (0..len).collect::<Vec<_>>());
    }

    #[test]
    fn batches_cover_each_epoch(len in 1usize..100, batch in 1usize..20, seed in any::<u64>()) {
        prop_assume!(batch <= len);
        let mut seen = vec![0usize; len];
        for b in batch_iterator(len, batch, seed, 0..2).unwrap() {
            prop_assert!(!b.indices.is_empty() && b.indices.len() <= batch);
            for i in b.indices {
                seen[i] += 1;
            }
        }
        prop_assert!(seen.iter().all(|&c| c == 2));
    }

    #[test]
    fn paired_batches_are_aligned(a in 1usize..60, b in 1usize..60, batch in 1usize..10, seed in any::<u64>()) {
        prop_assume!(batch <= a.min(b));
        let pairs = paired_batches(a, b, batch, seed, 0).unwrap();
        let mut seen_a = vec![false; a];
        let mut seen_b = vec![false; b];
        for (x, y) in &pairs {
            prop_assert_eq!(x.len(), y.len());
            x.iter().for_each(|&i| seen_a[i] = true);
            y.iter().for_each(|&i| seen_b[i] = true);
        }
        // The larger domain is covered in full; the smaller one wraps.
        if a >= b {
            prop_assert!(seen_a.iter().all(|&s| s));
        } else {
            prop_assert!(seen_b.iter().all(|&s| s));
        }
    }
}
