use proptest::prelude::*;
use steerkit::annotations::{rasterize_polygon, BoundingBox, ImageRecord, ObjectAnnotation, Polygon};
use steerkit::facts::{build_fact_set, classify_shape, iou, relation_between, FactConfig, Relation, ShapeThresholds};

fn regular(n: usize, r: f64) -> Polygon {
    Polygon::new(
        (0..n)
            .map(|i| {
                let t = std::f64::consts::TAU * i as f64 / n as f64;
                (50.0 + r * t.cos(), 50.0 + r * t.sin())
            })
            .collect(),
    )
    .unwrap()
}

#[test]
fn relation_examples() {
    let at = |cx: f64, cy: f64| BoundingBox::new(cx - 1.0, cy - 1.0, 2.0, 2.0).unwrap();
    assert_eq!(relation_between(&at(1.0, 5.0), &at(10.0, 5.0), 0.1), Relation::LeftOf);
    assert_eq!(relation_between(&at(5.0, 1.0), &at(5.0, 10.0), 0.1), Relation::Above);
    let big = BoundingBox::new(0.0, 0.0, 10.0, 10.0).unwrap();
    let inner = BoundingBox::new(1.0, 1.0, 8.0, 8.0).unwrap();
    assert_eq!(relation_between(&big, &inner, 0.1), Relation::Overlapping);
}

fn arb_box() -> impl Strategy<Value = BoundingBox> {
    (0.0..100.0f64, 0.0..100.0f64, 0.1..50.0f64, 0.1..50.0f64).prop_map(|(x, y, w, h)| BoundingBox::new(x, y, w, h).unwrap())
}

fn object(id: i64, category: &str, poly: Polygon) -> ObjectAnnotation {
    let (x0, y0, x1, y1) = poly.bounds();
    ObjectAnnotation {
        object_id: id,
        category: category.to_string(),
        bbox: BoundingBox::new(x0, y0, x1 - x0, y1 - y0).unwrap(),
        parts: vec![poly],
    }
}

fn arb_image() -> impl Strategy<Value = ImageRecord> {
    let shape = (0usize..4, 10.0..150.0f64, 10.0..150.0f64, 4.0..30.0f64);
    prop::collection::vec(shape, 1..6).prop_map(|specs| {
        let objects = specs
            .into_iter()
            .enumerate()
            .map(|(i, (kind, x, y, s))| {
                let poly = match kind {
                    0 => Polygon::new(vec![(x, y), (x + s, y), (x + s, y + s), (x, y + s)]),
                    1 => Polygon::new(vec![(x, y), (x + 2.0 * s, y), (x + 2.0 * s, y + s), (x, y + s)]),
                    2 => Polygon::new(vec![(x, y), (x + s, y), (x + s / 2.0, y + s)]),
                    _ => Ok(regular(32, s / 2.0).translated(x - 50.0, y - 50.0)),
                }
                .unwrap();
                object(i as i64 + 1, ["cat", "dog", "cup"][i % 3], poly)
            })
            .collect();
        ImageRecord {
            image_id: 1,
            width: 400,
            height: 400,
            file_name: "x.ppm".into(),
            pixels: None,
            objects,
        }
    })
}

proptest! {
    #[test]
    fn iou_is_symmetric_and_bounded(a in arb_box(), b in arb_box()) {
        let ab = iou(&a, &b);
        prop_assert_eq!(ab, iou(&b, &a));
        prop_assert!((0.0..=1.0).contains(&ab));
        prop_assert!((iou(&a, &a) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn swapping_a_pair_inverts_direction(a in arb_box(), b in arb_box()) {
        let forward = relation_between(&a, &b, 0.1);
        prop_assert_eq!(relation_between(&b, &a, 0.1), forward.inverse());
    }

    #[test]
    fn shape_class_is_scale_invariant(n in 3usize..40, r in 1.0..30.0f64, s in 0.05..20.0f64) {
        let t = ShapeThresholds::default();
        let p = regular(n, r);
        prop_assert_eq!(classify_shape(&p.scaled(s), &t).unwrap(), classify_shape(&p, &t).unwrap());
    }

    #[test]
    fn facts_are_translation_invariant(img in arb_image(), dx in -5.0..200.0f64, dy in -5.0..200.0f64) {
        let cfg = FactConfig { colors: false, ..FactConfig::default() };
        let mut moved = img.clone();
        moved.objects = img.objects.iter().map(|o| o.translated(dx, dy)).collect();
        let a = build_fact_set(&img, &cfg).unwrap();
        let b = build_fact_set(&moved, &cfg).unwrap();
        prop_assert_eq!(&a.categories, &b.categories);
        prop_assert_eq!(&a.attributes, &b.attributes);
        prop_assert_eq!(&a.relations, &b.relations);
        let total: usize = a.categories.iter().map(|c| a.count_of(&c.category).unwrap()).sum();
        prop_assert_eq!(total, img.objects.len());
    }

    #[test]
    fn raster_area_converges_to_shoelace(n in 3usize..12, r in 0.5..1.0f64) {
        let p = regular(n, r).translated(-50.0, -50.0).translated(1.0, 1.0);
        let res = 64.0 * p.diameter().ceil();
        let scaled = p.scaled(res / 2.0);
        let side = (res + 4.0) as usize;
        let mask = rasterize_polygon(&scaled, side, side).unwrap();
        let area = scaled.area();
        prop_assert!((mask.count() as f64 - area).abs() <= 0.05 * area);
    }
}
