mod common;

use candle_core::{DType, Device, Tensor};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use savos_lab::evalkit::{convex_predictions, evaluate, MetricsTable};
use savos_lab::grid::{Field, Mask};
use savos_lab::losses::{
    merge_bidirectional, merge_weights, occlusion_weight, soft_iou_distance, total_loss,
    FramePrediction, LossWeights,
};
use savos_lab::model::{ModelConfig, SavosModel};
use savos_lab::patch::{extract_all, ObjectSequence, SequenceBatch};
use savos_lab::synthgen::{generate_video, verify_sample, GenConfig, ShapeKind, VideoSample};
use savos_lab::warp::FlowField;

fn desk(seed: u64) -> VideoSample {
    generate_video(&GenConfig::desk().with_seed(seed)).unwrap()
}

fn small_model(seed: u64) -> SavosModel {
    let cfg = ModelConfig {
        patch_size: 32,
        feature_channels: 6,
        hidden_channels: 6,
        side_channels: 3,
        decoder_channels: 4,
        seed,
        ..ModelConfig::default()
    };
    SavosModel::new(cfg, &Device::Cpu, DType::F32).unwrap()
}

fn binary(rng: &mut ChaCha8Rng, h: usize, w: usize, p: f64) -> Mask {
    use rand::Rng;
    Mask::from_fn(h, w, |_, _| u8::from(rng.random_bool(p)))
}

fn unit_field(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Field {
    use rand::Rng;
    Field::from_fn(h, w, |_, _| rng.random_range(0.0f32..=1.0))
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 12, .. ProptestConfig::default() })]

    #[test]
    fn synthgen_visible_masks_are_disjoint_subsets(seed in any::<u64>(), star in any::<bool>()) {
        let shape = if star { ShapeKind::Star } else { ShapeKind::Gum };
        let v = generate_video(&GenConfig { shape, ..GenConfig::desk().with_seed(seed) }).unwrap();
        for t in 0..v.num_frames() {
            let (h, w) = v.canvas();
            let mut owners = vec![0u8; h * w];
            for k in 0..v.num_objects() {
                prop_assert!(v.visible[t][k].is_subset_of(&v.amodal[t][k]), "t {t} k {k}");
                for (o, &b) in owners.iter_mut().zip(v.visible[t][k].data()) {
                    *o += b;
                }
            }
            prop_assert!(owners.iter().all(|&c| c <= 1), "overlapping visible masks at t {t}");
        }
        prop_assert!(verify_sample(&v).is_ok());
    }

    #[test]
    fn synthgen_covers_hidden_parts_and_occludes(seed in any::<u64>()) {
        let v = desk(seed);
        // Some object is partly hidden in every frame.
        for t in 0..v.num_frames() {
            prop_assert!((0..v.num_objects()).any(|k| v.visible[t][k] != v.amodal[t][k]), "no occlusion at t {t}");
        }
        // Every object is seen somewhere at every frame.
        for t in 0..v.num_frames() {
            for k in 0..v.num_objects() {
                prop_assert!(!v.visible[t][k].is_empty_mask());
            }
        }
    }

    #[test]
    fn synthgen_is_deterministic(seed in any::<u64>()) {
        prop_assert_eq!(desk(seed), desk(seed));
    }

    #[test]
    fn soft_iou_is_symmetric(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = unit_field(&mut rng, 6, 5);
        let b = unit_field(&mut rng, 6, 5);
        let d = soft_iou_distance(&a, &b).unwrap();
        prop_assert_eq!(d, soft_iou_distance(&b, &a).unwrap());
        prop_assert!((0.0..=1.0).contains(&d));
    }

    #[test]
    fn occlusion_weight_masks_other_objects_only(seed in any::<u64>(), k_len in 1usize..5) {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (h, w) = (7, 6);
        let owner: Vec<usize> = (0..h * w).map(|_| rng.random_range(0..=k_len)).collect();
        let visible: Vec<Mask> = (0..k_len)
            .map(|k| Mask::from_vec(h, w, owner.iter().map(|&o| u8::from(o == k)).collect()).unwrap())
            .collect();
        for k in 0..k_len {
            let wt = occlusion_weight(&visible, k).unwrap();
            for (i, &o) in owner.iter().enumerate() {
                let want = if o == k_len || o == k { 1.0 } else { 0.0 };
                prop_assert_eq!(wt.data()[i], want);
            }
        }
    }

    #[test]
    fn total_is_the_weighted_sum(seed in any::<u64>(), l1 in 0.0f64..3.0, l2 in 0.0f64..3.0) {
        prop_assume!(l1 + l2 > 0.0);
        let inst = common::random_instance(seed, 3, 2, 5, 5);
        let (h, w) = (inst.h, inst.w);
        let f = |v: &[f64]| Field::from_vec(h, w, v.iter().map(|&x| x as f32).collect()).unwrap();
        let preds: Vec<Vec<FramePrediction>> = (0..3)
            .map(|t| (0..2).map(|k| FramePrediction {
                mask: f(&inst.mask[t][k]),
                motion: FlowField { dx: f(&inst.dx[t][k]), dy: f(&inst.dy[t][k]) },
            }).collect())
            .collect();
        let vis: Vec<Vec<Mask>> = inst.visible.iter()
            .map(|fr| fr.iter().map(|v| Mask::from_vec(h, w, v.clone()).unwrap()).collect())
            .collect();
        let r = total_loss(&preds, &vis, LossWeights { lambda1: l1, lambda2: l2 }).unwrap();
        prop_assert!((r.total - (l1 * r.l_m + l2 * r.l_c)).abs() < 1e-9);
        let only_c = total_loss(&preds, &vis, LossWeights { lambda1: 0.0, lambda2: l2.max(0.1) }).unwrap();
        prop_assert!((only_c.total - l2.max(0.1) * only_c.l_c).abs() < 1e-12);
        let dm: f64 = r.per_frame.iter().map(|d| d.d_m).sum();
        let dc: f64 = r.per_frame.iter().map(|d| d.d_c).sum();
        prop_assert!((dm - r.l_m).abs() < 1e-9 && (dc - r.l_c).abs() < 1e-9);
    }

    #[test]
    fn merge_weights_are_a_partition(a in -60.0f64..60.0, b in -60.0f64..60.0, seed in any::<u64>()) {
        let (wf, wb) = merge_weights(a, b);
        prop_assert!((wf + wb - 1.0).abs() < 1e-6);
        prop_assert!(wf >= 0.0 && wb >= 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (mf, mb) = (unit_field(&mut rng, 4, 4), unit_field(&mut rng, 4, 4));
        let (la, lb) = (Field::filled(4, 4, a as f32), Field::filled(4, 4, b as f32));
        let merged = merge_bidirectional(&mf, &la, &mb, &lb).unwrap();
        for i in 0..16 {
            let v = merged.data()[i];
            prop_assert!((0.0..=1.0).contains(&v));
            let lo = mf.data()[i].min(mb.data()[i]) - 1e-6;
            let hi = mf.data()[i].max(mb.data()[i]) + 1e-6;
            prop_assert!(v >= lo && v <= hi);
        }
        let same = merge_bidirectional(&mf, &la, &mb, &la).unwrap();
        for i in 0..16 {
            prop_assert!((same.data()[i] - 0.5 * (mf.data()[i] + mb.data()[i])).abs() < 1e-6);
        }
    }
}

fn max_diff(a: &Tensor, b: &Tensor) -> f32 {
    (a - b)
        .unwrap()
        .abs()
        .unwrap()
        .max_all()
        .unwrap()
        .to_scalar::<f32>()
        .unwrap()
}

fn batch(seqs: &[&ObjectSequence]) -> SequenceBatch {
    SequenceBatch::from_sequences(seqs, &Device::Cpu, DType::F32).unwrap()
}

#[test]
fn rollout_is_batch_independent() {
    let model = small_model(1);
    let seqs_a = extract_all(&desk(3), 32).unwrap();
    let seqs_b = extract_all(&desk(4), 32).unwrap();
    let pair = model.rollout(&batch(&[&seqs_a[0], &seqs_b[1]])).unwrap();
    let alone_a = model.rollout(&batch(&[&seqs_a[0]])).unwrap();
    let alone_b = model.rollout(&batch(&[&seqs_b[1]])).unwrap();
    for t in 0..pair.len() {
        for (row, alone) in [(0, &alone_a), (1, &alone_b)] {
            let took = |x: &Tensor| x.narrow(0, row, 1).unwrap();
            assert!(
                max_diff(&took(&pair[t].mask_logits), &alone[t].mask_logits) < 1e-5,
                "t {t} row {row}"
            );
            assert!(max_diff(&took(&pair[t].amodal_motion), &alone[t].amodal_motion) < 1e-5);
            assert!(max_diff(&took(&pair[t].alpha_logit), &alone[t].alpha_logit) < 1e-5);
        }
    }
}

#[test]
fn rollout_is_causal() {
    let model = small_model(2);
    let seq = extract_all(&desk(5), 32).unwrap().remove(0);
    let full = model.rollout(&batch(&[&seq])).unwrap();
    let mut prefix = seq.clone();
    prefix.frames.truncate(6);
    let short = model.rollout(&batch(&[&prefix])).unwrap();
    for t in 0..6 {
        assert_eq!(
            max_diff(&full[t].mask_logits, &short[t].mask_logits),
            0.0,
            "t {t}"
        );
        assert_eq!(
            max_diff(&full[t].amodal_motion, &short[t].amodal_motion),
            0.0
        );
    }
}

#[test]
fn backward_pass_is_the_reversed_rollout() {
    use savos_lab::model::Direction;
    let model = small_model(3);
    let seq = extract_all(&desk(6), 32).unwrap().remove(1);
    let b = batch(&[&seq]);
    let bwd = model.forward_pass(&b, Direction::Backward).unwrap();
    let manual = model.rollout(&b.reversed().unwrap()).unwrap();
    let n = bwd.len();
    for t in 0..n {
        assert_eq!(
            max_diff(&bwd[t].mask_logits, &manual[n - 1 - t].mask_logits),
            0.0
        );
    }
    let fwd = model.forward_pass(&b, Direction::Forward).unwrap();
    assert!(max_diff(&fwd[n - 1].mask_logits, &bwd[n - 1].mask_logits) > 0.0);
}

fn close(a: &MetricsTable, b: &MetricsTable) {
    assert_eq!(a.n_objects, b.n_objects);
    assert_eq!(a.n_occluded, b.n_occluded);
    assert!((a.full_miou - b.full_miou).abs() < 1e-12);
    assert!((a.occluded_miou - b.occluded_miou).abs() < 1e-12);
    for (x, y) in a.per_bucket.iter().zip(&b.per_bucket) {
        assert_eq!(x.count, y.count);
        assert!((x.full_miou - y.full_miou).abs() < 1e-12);
        assert!((x.occluded_miou - y.occluded_miou).abs() < 1e-12);
    }
}

#[test]
fn evaluation_ignores_video_and_object_order() {
    let videos: Vec<VideoSample> = (20..24).map(desk).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    // Mix convex completions with random noise so scores are not all alike.
    let preds: Vec<Vec<Vec<Mask>>> = convex_predictions(&videos)
        .into_iter()
        .map(|v| {
            v.into_iter()
                .map(|f| {
                    f.into_iter()
                        .map(|m| m.or(&binary(&mut rng, 64, 64, 0.02)))
                        .collect()
                })
                .collect()
        })
        .collect();
    let base = evaluate(&preds, &videos, None).unwrap();

    let mut order: Vec<usize> = (0..videos.len()).collect();
    order.shuffle(&mut rng);
    let pv: Vec<VideoSample> = order.iter().map(|&i| videos[i].clone()).collect();
    let pp: Vec<Vec<Vec<Mask>>> = order.iter().map(|&i| preds[i].clone()).collect();
    close(&base, &evaluate(&pp, &pv, None).unwrap());

    let perm = [2usize, 0, 1];
    let swap = |frames: &Vec<Vec<Mask>>| -> Vec<Vec<Mask>> {
        frames
            .iter()
            .map(|f| perm.iter().map(|&k| f[k].clone()).collect())
            .collect()
    };
    let sv: Vec<VideoSample> = videos
        .iter()
        .map(|v| VideoSample {
            amodal: swap(&v.amodal),
            visible: swap(&v.visible),
            ..v.clone()
        })
        .collect();
    let sp: Vec<Vec<Vec<Mask>>> = preds.iter().map(swap).collect();
    close(&base, &evaluate(&sp, &sv, None).unwrap());
}

#[test]
fn bucket_counts_sum_and_filter_restricts() {
    let videos: Vec<VideoSample> = (30..33).map(desk).collect();
    let preds = convex_predictions(&videos);
    let all = evaluate(&preds, &videos, None).unwrap();
    assert_eq!(
        all.per_bucket.iter().map(|b| b.count).sum::<usize>(),
        all.n_objects
    );
    assert_eq!(all.n_objects, 3 * 3 * 16);
    let heavy = evaluate(&preds, &videos, Some((0.3, 1.0))).unwrap();
    assert!(heavy.n_objects < all.n_objects);
    assert_eq!(
        heavy.per_bucket.iter().map(|b| b.count).sum::<usize>(),
        heavy.n_objects
    );
    assert!(heavy
        .per_bucket
        .iter()
        .filter(|b| b.hi <= 0.3 - 1e-9)
        .all(|b| b.count == 0));
    for (h, a) in heavy
        .per_bucket
        .iter()
        .zip(&all.per_bucket)
        .filter(|(b, _)| b.lo >= 0.3 + 1e-9)
    {
        assert_eq!(h.count, a.count);
    }
}
