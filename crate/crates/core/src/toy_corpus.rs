//! Procedural corpus of colored shapes with exact segmentation masks.
//! Identity is the shape + color combination; pose (position, size,
//! background shade) varies freely between frames of a group.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dataset::{Frame, GroupKind, SourceGroup};
use crate::image_data::{ImageTensor, SegMask};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Shape {
    Circle,
    Square,
    Triangle,
}

impl Shape {
    pub fn name(self) -> &'static str {
        match self {
            Shape::Circle => "circle",
            Shape::Square => "square",
            Shape::Triangle => "triangle",
        }
    }

    fn contains(self, x: f32, y: f32, cx: f32, cy: f32, r: f32) -> bool {
        match self {
            Shape::Circle => (x - cx).powi(2) + (y - cy).powi(2) <= r * r,
            Shape::Square => (x - cx).abs() <= r && (y - cy).abs() <= r,
            // upward triangle inscribed in the radius-r box
            Shape::Triangle => {
                let u = (y - cy + r) / (2.0 * r);
                if !(0.0..=1.0).contains(&u) {
                    return false;
                }
                (x - cx).abs() <= r * u
            }
        }
    }
}

pub const PALETTE: &[(&str, [f32; 3])] = &[
    ("red", [0.85, 0.10, 0.10]),
    ("green", [0.10, 0.75, 0.15]),
    ("blue", [0.10, 0.20, 0.85]),
    ("yellow", [0.90, 0.85, 0.10]),
    ("purple", [0.60, 0.15, 0.75]),
    ("cyan", [0.10, 0.80, 0.80]),
];

#[derive(Debug, Clone, Copy)]
pub struct ToyIdentity {
    pub shape: Shape,
    pub color_index: usize,
}

impl ToyIdentity {
    pub fn color_name(&self) -> &'static str {
        PALETTE[self.color_index].0
    }

    pub fn caption(&self) -> String {
        format!("a photo of a {} {}", self.color_name(), self.shape.name())
    }
}

/// Render one frame: shaded background, one shape at a random pose, exact mask.
pub fn render_frame(
    identity: ToyIdentity,
    size: usize,
    rng: &mut ChaCha8Rng,
) -> (ImageTensor, SegMask) {
    let s = size as f32;
    let r = rng.gen_range(0.18 * s..0.30 * s);
    let cx = rng.gen_range(r..s - r);
    let cy = rng.gen_range(r..s - r);
    let bg = rng.gen_range(0.25..0.75_f32);
    let color = PALETTE[identity.color_index].1;
    let mut image = ImageTensor::constant(bg, size, size).expect("nonzero size");
    let mut mask = SegMask::zeros(size, size);
    for y in 0..size {
        for x in 0..size {
            if identity
                .shape
                .contains(x as f32 + 0.5, y as f32 + 0.5, cx, cy, r)
            {
                for (c, v) in color.iter().enumerate() {
                    image.set(c, y, x, *v);
                }
                mask.set(y, x, 1);
            }
        }
    }
    (image, mask)
}

/// Build `n_identities` multiview groups of `frames_per_identity` frames each.
/// Identities cycle through the shape/color grid so the corpus covers it.
pub fn generate_toy_groups(
    n_identities: usize,
    frames_per_identity: usize,
    image_size: usize,
    seed: u64,
) -> Vec<SourceGroup> {
    let shapes = [Shape::Circle, Shape::Square, Shape::Triangle];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n_identities)
        .map(|i| {
            let identity = ToyIdentity {
                shape: shapes[i % shapes.len()],
                color_index: (i / shapes.len()) % PALETTE.len(),
            };
            let object_id = format!("obj-{i:03}");
            let frames = (0..frames_per_identity)
                .map(|_| {
                    let (image, mask) = render_frame(identity, image_size, &mut rng);
                    Frame {
                        image,
                        mask,
                        object_id: object_id.clone(),
                    }
                })
                .collect();
            SourceGroup {
                group_id: format!("toy-{i:03}"),
                kind: GroupKind::Multiview,
                frames,
                caption: identity.caption(),
                class_word: identity.shape.name().to_string(),
                category: identity.shape.name().to_string(),
            }
        })
        .collect()
}
