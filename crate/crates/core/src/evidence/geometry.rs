use crate::corpus::BoundingBox;

/// Intersection over union; 0 for disjoint boxes.
pub fn iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let ix1 = a.x1().max(b.x1());
    let iy1 = a.y1().max(b.y1());
    let ix2 = a.x2().min(b.x2());
    let iy2 = a.y2().min(b.y2());
    if ix1 >= ix2 || iy1 >= iy2 {
        return 0.0;
    }
    let inter = u64::from(ix2 - ix1) * u64::from(iy2 - iy1);
    let union = a.area() + b.area() - inter;
    inter as f64 / union as f64
}

/// Pads each side by `pad_fraction` of the box's own extent (rounded to the
/// nearest pixel) and clamps to the frame.
pub fn extend_box(b: &BoundingBox, frame_w: u32, frame_h: u32, pad_fraction: f64) -> BoundingBox {
    let pad_x = (f64::from(b.width()) * pad_fraction).round() as u32;
    let pad_y = (f64::from(b.height()) * pad_fraction).round() as u32;
    let x1 = b.x1().saturating_sub(pad_x);
    let y1 = b.y1().saturating_sub(pad_y);
    let x2 = b.x2().saturating_add(pad_x).min(frame_w).max(b.x2());
    let y2 = b.y2().saturating_add(pad_y).min(frame_h).max(b.y2());
    BoundingBox::new(x1, y1, x2, y2).expect("extension of a valid box is valid")
}

/// Smallest box containing every input, or `None` for an empty input.
pub fn merge_boxes<'a>(boxes: impl IntoIterator<Item = &'a BoundingBox>) -> Option<BoundingBox> {
    boxes.into_iter().fold(None, |acc, b| {
        Some(match acc {
            None => *b,
            Some(m) => BoundingBox::new(
                m.x1().min(b.x1()),
                m.y1().min(b.y1()),
                m.x2().max(b.x2()),
                m.y2().max(b.y2()),
            )
            .expect("hull of valid boxes is valid"),
        })
    })
}
