use proptest::prelude::*;

use rimatte::compositing::{composite, init_state, MattingState, ObservedImage, Space, Trimap, TrimapLabel};
use rimatte::datagen::color::{hsv_to_rgb, rgb_to_hsv};
use rimatte::datagen::{gen_trimap, ALPHA_EPSILON};
use rimatte::numerics::Tensor;
use rimatte::pipeline::{color_metrics_masked, TileConfig, TilePlan};
use rimatte::rim::IterationConfig;
use rimatte::service::{EditCommand, EditTarget, Session};
use rimatte::training::reconstruction_loss;

fn unit(dims: &'static [usize]) -> impl Strategy<Value = Tensor> {
    let n: usize = dims.iter().product();
    prop::collection::vec(0.0f32..=1.0, n).prop_map(move |v| Tensor::from_vec(dims, v).unwrap())
}

const H: usize = 6;
const W: usize = 5;
static RGB: [usize; 4] = [1, 3, H, W];
static GRAY: [usize; 4] = [1, 1, H, W];

fn state() -> impl Strategy<Value = MattingState> {
    (unit(&RGB), unit(&RGB), unit(&GRAY))
        .prop_map(|(f, b, a)| MattingState::new(Space::Canonical, f, b, a).unwrap())
}

fn trimap() -> impl Strategy<Value = Trimap> {
    prop::collection::vec(0u8..3, H * W).prop_map(|v| {
        let labels = v
            .into_iter()
            .map(|l| [TrimapLabel::Background, TrimapLabel::Unknown, TrimapLabel::Foreground][l as usize])
            .collect();
        Trimap::new(W, H, labels).unwrap()
    })
}

fn with_unknown(t: Trimap) -> Trimap {
    if t.count(TrimapLabel::Unknown) > 0 {
        return t;
    }
    let mut labels = t.labels().to_vec();
    labels[0] = TrimapLabel::Unknown;
    Trimap::new(W, H, labels).unwrap()
}

/// `into` on unknown pixels, `from` everywhere else.
fn overwrite_known(into: &MattingState, from: &MattingState, t: &Trimap) -> MattingState {
    let (mut a, b) = (into.packed(), from.packed());
    let hw = H * W;
    for c in 0..7 {
        for p in 0..hw {
            if t.labels()[p] != TrimapLabel::Unknown {
                a.data_mut()[c * hw + p] = b.data()[c * hw + p];
            }
        }
    }
    MattingState::from_packed(&a, Space::Canonical).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn space_round_trip(x in state()) {
        let back = x.to_network_space().unwrap().to_canonical_space().unwrap();
        prop_assert!(back.packed().max_abs_diff(&x.packed()).unwrap() < 1e-6);
    }

    #[test]
    fn composite_lies_between_foreground_and_background(x in state()) {
        let i = composite(&x).unwrap();
        let hw = H * W;
        for c in 0..3 {
            for p in 0..hw {
                let (f, b) = (x.fg.data()[c * hw + p], x.bg.data()[c * hw + p]);
                let v = i.data()[c * hw + p];
                prop_assert!(v >= f.min(b) - 1e-6 && v <= f.max(b) + 1e-6);
            }
        }
    }

    #[test]
    fn loss_ignores_pixels_outside_the_unknown_region(
        x in state(), y in state(), target in state(), t in trimap()
    ) {
        let t = with_unknown(t);
        let mask = t.unknown_mask();
        let y = overwrite_known(&x, &y, &t);
        let (lx, ly) = (
            reconstruction_loss(&x, &target, &mask).unwrap(),
            reconstruction_loss(&y, &target, &mask).unwrap(),
        );
        prop_assert!((lx - ly).abs() < 1e-9);
        prop_assert!(lx >= 0.0);
        prop_assert_eq!(reconstruction_loss(&target, &target, &mask).unwrap(), 0.0);
    }

    #[test]
    fn metrics_are_zero_on_truth_and_symmetric_for_equal_alpha(
        x in state(), y in state(), t in trimap()
    ) {
        let t = with_unknown(t);
        let m = color_metrics_masked(&x, &x, &t).unwrap();
        prop_assert_eq!((m.fg_sad, m.bg_sad, m.alpha_sad, m.fg_mse), (0.0, 0.0, 0.0, 0.0));
        let y = MattingState::new(Space::Canonical, y.fg, y.bg, x.alpha.clone()).unwrap();
        let (a, b) = (color_metrics_masked(&x, &y, &t).unwrap(), color_metrics_masked(&y, &x, &t).unwrap());
        prop_assert!((a.fg_sad - b.fg_sad).abs() < 1e-9 && (a.bg_mse - b.bg_mse).abs() < 1e-9);
        let z = overwrite_known(&x, &y, &t);
        let c = color_metrics_masked(&z, &y, &t).unwrap();
        prop_assert!((a.fg_sad - c.fg_sad).abs() < 1e-9);
    }

    #[test]
    fn tile_plans_cover_every_pixel_once(
        h in 1usize..300, w in 1usize..300, half in 8usize..80, overlap in 0usize..16
    ) {
        let cfg = TileConfig { tile_size: 2 * half.max(overlap), overlap, workers: 1 };
        let plan = TilePlan::new(h, w, &cfg).unwrap();
        prop_assert!(plan.coverage().iter().all(|&c| c == 1));
        for tile in &plan.tiles {
            let (s, d) = (tile.src, tile.dst);
            prop_assert_eq!((s.top % 2, s.left % 2), (0, 0));
            prop_assert!(s.top <= d.top.saturating_sub(overlap) && s.left <= d.left.saturating_sub(overlap));
            prop_assert!(s.bottom() >= (d.bottom() + overlap).min(h) && s.right() >= (d.right() + overlap).min(w));
            prop_assert!(s.bottom() <= h && s.right() <= w);
        }
    }

    #[test]
    fn hsv_round_trip(r in 0.0f64..=1.0, g in 0.0f64..=1.0, b in 0.0f64..=1.0) {
        let back = hsv_to_rgb(rgb_to_hsv([r, g, b]));
        for (u, v) in back.iter().zip([r, g, b]) {
            prop_assert!((u - v).abs() < 1e-9);
        }
    }

    #[test]
    fn trimap_labels_agree_with_alpha(a in unit(&GRAY), r1 in 0usize..3, r2 in 0usize..3) {
        let (small, large) = (r1.min(r2), r1.max(r2));
        let (ts, tl) = (gen_trimap(&a, small).unwrap(), gen_trimap(&a, large).unwrap());
        for p in 0..H * W {
            let v = a.data()[p];
            match ts.labels()[p] {
                TrimapLabel::Foreground => prop_assert!(v >= 1.0 - ALPHA_EPSILON),
                TrimapLabel::Background => prop_assert!(v <= ALPHA_EPSILON),
                TrimapLabel::Unknown => prop_assert_eq!(tl.labels()[p], TrimapLabel::Unknown),
            }
            if v > ALPHA_EPSILON && v < 1.0 - ALPHA_EPSILON {
                prop_assert_eq!(ts.labels()[p], TrimapLabel::Unknown);
            }
        }
    }

    #[test]
    fn initial_state_copies_the_image_on_known_pixels(img in unit(&RGB), a in unit(&GRAY), t in trimap()) {
        let image = ObservedImage::new(img.clone()).unwrap();
        let x0 = init_state(&image, Some(&t), &a).unwrap();
        let hw = H * W;
        prop_assert_eq!(x0.alpha.data(), a.data());
        for p in 0..hw {
            let label = t.labels()[p];
            for c in 0..3 {
                let v = img.data()[c * hw + p];
                let want_f = if label == TrimapLabel::Foreground { v } else { 0.0 };
                let want_b = if label == TrimapLabel::Background { v } else { 0.0 };
                prop_assert_eq!(x0.fg.data()[c * hw + p], want_f);
                prop_assert_eq!(x0.bg.data()[c * hw + p], want_b);
            }
        }
    }

    #[test]
    fn later_edits_take_precedence(
        img in unit(&RGB), a in unit(&GRAY),
        m1 in prop::collection::vec(any::<bool>(), H * W),
        m2 in prop::collection::vec(any::<bool>(), H * W),
        v1 in unit(&GRAY), v2 in unit(&GRAY),
    ) {
        let mask = |m: &[bool]| {
            Tensor::from_vec(&GRAY, m.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect()).unwrap()
        };
        let mut s = Session::new(
            "p".into(),
            ObservedImage::new(img).unwrap(),
            &a,
            None,
            IterationConfig::with_iterations(1),
        )
        .unwrap();
        s.apply_edit(EditCommand::new(EditTarget::Alpha, mask(&m1), v1.clone())).unwrap();
        s.apply_edit(EditCommand::new(EditTarget::Alpha, mask(&m2), v2.clone())).unwrap();
        let got = s.state().alpha.data().to_vec();
        for p in 0..H * W {
            let want = if m2[p] {
                v2.data()[p]
            } else if m1[p] {
                v1.data()[p]
            } else {
                a.data()[p]
            };
            prop_assert_eq!(got[p], want);
        }
        prop_assert_eq!(s.history().len(), 2);
    }
}
