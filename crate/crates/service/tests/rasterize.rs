use longiseg_core::{Grid, LabelVolume, Lesion, Plane};
use longiseg_service::rle::{decode, encode};
use longiseg_service::{rasterize_strokes, Stroke};
use proptest::prelude::*;

const SHAPE: [usize; 3] = [12, 9, 7];

fn plane() -> impl Strategy<Value = Plane> {
    prop_oneof![Just(Plane::Axial), Just(Plane::Coronal), Just(Plane::Sagittal)]
}

fn stroke() -> impl Strategy<Value = Stroke> {
    (plane(), 1u8..=2, prop_oneof![Just(1i8), Just(-1i8)], 0usize..3).prop_flat_map(|(plane, cls, polarity, radius)| {
        let [rows, cols] = plane.slice_shape(SHAPE);
        (
            0..plane.slice_count(SHAPE),
            prop::collection::vec((0..rows, 0..cols).prop_map(|(r, c)| [r, c]), 1..5),
        )
            .prop_map(move |(slice_index, polyline)| Stroke {
                plane,
                slice_index,
                cls,
                polarity,
                polyline,
                brush_radius: radius,
            })
    })
}

fn dist2_to_segment(p: [usize; 2], a: [usize; 2], b: [usize; 2]) -> f64 {
    let (px, py) = (p[0] as f64, p[1] as f64);
    let (ax, ay, bx, by) = (a[0] as f64, a[1] as f64, b[0] as f64, b[1] as f64);
    let (dx, dy) = (bx - ax, by - ay);
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((px - ax) * dx + (py - ay) * dy) / len2).clamp(0.0, 1.0)
    };
    let (qx, qy) = (ax + t * dx, ay + t * dy);
    (px - qx).powi(2) + (py - qy).powi(2)
}

proptest! {
    #[test]
    fn stroke_voxels_stay_on_their_slice_with_their_sign(s in stroke()) {
        let edits = rasterize_strokes(SHAPE, std::slice::from_ref(&s)).unwrap();
        let lesion = s.lesion().unwrap();
        let other = Lesion::ALL.into_iter().find(|&l| l != lesion).unwrap();
        prop_assert!(edits.channel(other).as_slice().iter().all(|&v| v == 0));
        let ch = edits.channel(lesion);
        let mut count = 0;
        for lin in 0..ch.len() {
            let v = ch.unravel(lin);
            if ch.as_slice()[lin] != 0 {
                count += 1;
                prop_assert_eq!(ch.as_slice()[lin], s.polarity);
                prop_assert_eq!(v[s.plane.normal_axis()], s.slice_index);
            }
        }
        prop_assert_eq!(count, s.pixels(SHAPE).len());
    }

    #[test]
    fn stroke_covers_its_vertices_and_stays_near_the_path(s in stroke()) {
        let pixels = s.pixels(SHAPE);
        for v in &s.polyline {
            prop_assert!(pixels.contains(v));
        }
        // digital lines stray at most half a pixel diagonal from the true segment
        let reach = s.brush_radius as f64 + std::f64::consts::FRAC_1_SQRT_2 + 1e-9;
        for p in &pixels {
            let d2 = if s.polyline.len() == 1 {
                dist2_to_segment(*p, s.polyline[0], s.polyline[0])
            } else {
                s.polyline.windows(2).map(|w| dist2_to_segment(*p, w[0], w[1])).fold(f64::MAX, f64::min)
            };
            prop_assert!(d2.sqrt() <= reach, "{:?} is {} from the stroke", p, d2.sqrt());
        }
    }

    #[test]
    fn later_strokes_overwrite_earlier(a in stroke(), b in stroke()) {
        let both = rasterize_strokes(SHAPE, &[a.clone(), b.clone()]).unwrap();
        let lb = b.lesion().unwrap();
        for p in b.pixels(SHAPE) {
            prop_assert_eq!(both.channel(lb)[b.plane.voxel(b.slice_index, p)], b.polarity);
        }
    }

    #[test]
    fn rle_round_trip(data in prop::collection::vec(prop_oneof![8 => Just(0u8), 1 => Just(1u8), 1 => Just(2u8)], 24)) {
        let labels = LabelVolume::new(Grid::from_vec([2, 3, 4], data).unwrap()).unwrap();
        let rle = encode(&labels);
        prop_assert_eq!(rle.rle.chunks(2).map(|c| c[1]).sum::<usize>(), 24);
        prop_assert!(rle.rle.chunks(2).all(|c| c[1] > 0));
        prop_assert!(rle.rle.chunks(2).collect::<Vec<_>>().windows(2).all(|w| w[0][0] != w[1][0]));
        prop_assert_eq!(decode(&rle).unwrap(), labels);
    }
}

#[test]
fn brush_disc_shape() {
    let s = Stroke {
        plane: Plane::Axial,
        slice_index: 0,
        cls: 1,
        polarity: 1,
        polyline: vec![[5, 4]],
        brush_radius: 1,
    };
    assert_eq!(s.pixels(SHAPE), vec![[4, 4], [5, 3], [5, 4], [5, 5], [6, 4]]);
    // clipped at the slice border
    let corner = Stroke { polyline: vec![[0, 0]], brush_radius: 2, ..s };
    assert_eq!(corner.pixels(SHAPE), vec![[0, 0], [0, 1], [0, 2], [1, 0], [1, 1], [2, 0]]);
}

#[test]
fn invalid_strokes_name_the_problem() {
    let base = Stroke {
        plane: Plane::Sagittal,
        slice_index: 8,
        cls: 1,
        polarity: 1,
        polyline: vec![[0, 0]],
        brush_radius: 0,
    };
    assert!(base.validate(SHAPE).is_ok());
    let cases = [
        (Stroke { slice_index: 9, ..base.clone() }, "slice 9"),
        (Stroke { cls: 0, ..base.clone() }, "class 0"),
        (Stroke { polarity: 0, ..base.clone() }, "polarity 0"),
        (Stroke { polyline: vec![], ..base.clone() }, "empty polyline"),
        (Stroke { polyline: vec![[0, 7]], ..base.clone() }, "outside"),
    ];
    for (s, needle) in cases {
        let err = s.validate(SHAPE).unwrap_err();
        assert!(err.contains(needle), "{err}");
    }
}
