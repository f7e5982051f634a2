//! Reference/target pair dataset pipeline: pair generation from frame groups
//! or single images, the resolution filter, line-delimited manifests, and a
//! procedural toy corpus with ground-truth identities.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::image_data::{ImageTensor, SegMask};

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroupKind {
    Video,
    Multiview,
    Single,
}

/// One frame of a source group.
#[derive(Debug, Clone)]
pub struct Frame {
    pub image: ImageTensor,
    pub mask: SegMask,
    pub object_id: String,
}

/// A clip, multi-view set or single image sharing one object identity.
#[derive(Debug, Clone)]
pub struct SourceGroup {
    pub group_id: String,
    pub kind: GroupKind,
    pub frames: Vec<Frame>,
    pub caption: String,
    pub class_word: String,
    pub category: String,
}

/// Raster pair produced by the pair generators.
#[derive(Debug, Clone)]
pub struct PairImages {
    pub ref_image: ImageTensor,
    pub ref_mask: SegMask,
    pub target_image: ImageTensor,
    pub object_id: String,
}

/// One manifest line.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestRecord {
    pub sample_id: String,
    pub ref_image_path: String,
    pub ref_mask_path: String,
    pub target_image_path: String,
    pub caption: String,
    pub class_word: String,
    pub category: String,
}

/// Parsed manifest with per-category counts.
#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub records: Vec<ManifestRecord>,
    pub stats: BTreeMap<String, usize>,
}

impl Manifest {
    pub fn from_records(records: Vec<ManifestRecord>) -> Self {
        let mut stats = BTreeMap::new();
        for r in &records {
            *stats.entry(r.category.clone()).or_insert(0) += 1;
        }
        Self { records, stats }
    }
}

/// Keep images whose height and width are both at least `min_side`
/// (boundary inclusive).
pub fn filter_resolution(images: Vec<ImageTensor>, min_side: usize) -> Vec<ImageTensor> {
    images
        .into_iter()
        .filter(|i| passes_resolution(i.height(), i.width(), min_side))
        .collect()
}

pub fn passes_resolution(height: usize, width: usize, min_side: usize) -> bool {
    height >= min_side && width >= min_side
}

/// Uniform crop window fully containing the mask bounding box: side per axis
/// in `[bbox_side, min(frame_side, 2 * bbox_side)]`, position uniform among
/// placements covering the box.
fn random_crop_around(
    image: &ImageTensor,
    mask: &SegMask,
    rng: &mut ChaCha8Rng,
) -> Result<(ImageTensor, SegMask)> {
    let Some((top, left, bh, bw)) = mask.bbox() else {
        return Err(Error::validation("cannot crop around an empty mask"));
    };
    let fh = image.height();
    let fw = image.width();
    let ch = rng.gen_range(bh..=(2 * bh).min(fh));
    let cw = rng.gen_range(bw..=(2 * bw).min(fw));
    let top_min = (top + bh).saturating_sub(ch);
    let top_max = top.min(fh - ch);
    let left_min = (left + bw).saturating_sub(cw);
    let left_max = left.min(fw - cw);
    let cy = rng.gen_range(top_min..=top_max);
    let cx = rng.gen_range(left_min..=left_max);
    Ok((image.crop(cy, cx, ch, cw)?, mask.crop(cy, cx, ch, cw)?))
}

#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PairOptions {
    /// Minimum index distance between the two sampled frames.
    pub min_frame_gap: usize,
}

impl Default for PairOptions {
    fn default() -> Self {
        Self { min_frame_gap: 1 }
    }
}

/// Pick two distinct frames sharing an object id, crop each around the
/// object, and return (reference with mask, target). `None` signals a group
/// with no shareable object id.
pub fn make_pair_from_group(
    group: &SourceGroup,
    opts: PairOptions,
    rng: &mut ChaCha8Rng,
) -> Result<Option<PairImages>> {
    if group.kind == GroupKind::Single {
        return Err(Error::validation(
            "single-image groups pair via make_pair_from_single",
        ));
    }
    // candidate ordered pairs sharing an object id at the required gap
    let mut pairs = Vec::new();
    for i in 0..group.frames.len() {
        for j in 0..group.frames.len() {
            if i != j
                && i.abs_diff(j) >= opts.min_frame_gap
                && group.frames[i].object_id == group.frames[j].object_id
            {
                pairs.push((i, j));
            }
        }
    }
    if pairs.is_empty() {
        return Ok(None);
    }
    let (ri, ti) = pairs[rng.gen_range(0..pairs.len())];
    let ref_frame = &group.frames[ri];
    let tar_frame = &group.frames[ti];
    let (ref_image, ref_mask) = random_crop_around(&ref_frame.image, &ref_frame.mask, rng)?;
    let (target_image, _) = random_crop_around(&tar_frame.image, &tar_frame.mask, rng)?;
    Ok(Some(PairImages {
        ref_image,
        ref_mask,
        target_image,
        object_id: ref_frame.object_id.clone(),
    }))
}

/// Knobs of the single-image augmentation sampler.
#[derive(Debug, Clone, Copy)]
pub struct AugmentParams {
    pub flip: bool,
    pub jitter_brightness: f32,
    pub jitter_saturation: f32,
}

fn sample_augment(rng: &mut ChaCha8Rng) -> AugmentParams {
    AugmentParams {
        flip: rng.gen_bool(0.5),
        jitter_brightness: rng.gen_range(0.9..1.1),
        jitter_saturation: rng.gen_range(0.9..1.1),
    }
}

/// Two independent augmentations of one image form the pair: flip + crop
/// containing the object for both; mild color jitter on the target only, so
/// the reference keeps the exact object colors. The reference mask follows
/// the reference augmentation.
pub fn make_pair_from_single(
    image: &ImageTensor,
    mask: &SegMask,
    object_id: &str,
    rng: &mut ChaCha8Rng,
) -> Result<PairImages> {
    let ref_aug = sample_augment(rng);
    let (mut ref_image, mut ref_mask) = (image.clone(), mask.clone());
    if ref_aug.flip {
        ref_image = ref_image.hflip();
        ref_mask = ref_mask.hflip();
    }
    let (ref_image, ref_mask) = random_crop_around(&ref_image, &ref_mask, rng)?;

    let tar_aug = sample_augment(rng);
    let (mut tar_image, mut tar_mask) = (image.clone(), mask.clone());
    if tar_aug.flip {
        tar_image = tar_image.hflip();
        tar_mask = tar_mask.hflip();
    }
    let (tar_image, _) = random_crop_around(&tar_image, &tar_mask, rng)?;
    let tar_image = tar_image.color_jitter(tar_aug.jitter_brightness, tar_aug.jitter_saturation);
    Ok(PairImages {
        ref_image,
        ref_mask,
        target_image: tar_image,
        object_id: object_id.to_string(),
    })
}

/// Write a line-delimited manifest, one JSON record per line.
pub fn write_manifest(records: &[ManifestRecord], path: &Path) -> Result<Manifest> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    for r in records {
        let line = serde_json::to_string(r)?;
        writeln!(f, "{line}").map_err(|e| Error::io(path, e))?;
    }
    Ok(Manifest::from_records(records.to_vec()))
}

/// Read and validate a manifest. Problems (malformed lines, missing files)
/// are itemized; stats are recomputed from the parsed records.
pub fn read_manifest(path: &Path) -> Result<Manifest> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    let mut records = Vec::new();
    let mut problems = Vec::new();
    for (idx, line) in std::io::BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<ManifestRecord>(&line) {
            Ok(r) => {
                for p in [&r.ref_image_path, &r.ref_mask_path, &r.target_image_path] {
                    if !base.join(p).exists() {
                        problems.push(format!("line {}: missing file {p}", idx + 1));
                    }
                }
                records.push(r);
            }
            Err(e) => problems.push(format!("line {}: malformed record: {e}", idx + 1)),
        }
    }
    if problems.is_empty() {
        Ok(Manifest::from_records(records))
    } else {
        Err(Error::ManifestValidation(problems))
    }
}

/// Resolve a record path against the manifest location.
pub fn resolve_path(manifest_path: &Path, record_path: &str) -> PathBuf {
    manifest_path
        .parent()
        .unwrap_or_else(|| Path::new("."))
        .join(record_path)
}

/// Check every referenced image against the resolution filter.
pub fn check_min_side(manifest: &Manifest, manifest_path: &Path, min_side: usize) -> Result<()> {
    let mut problems = Vec::new();
    for r in &manifest.records {
        for p in [&r.ref_image_path, &r.target_image_path] {
            let full = resolve_path(manifest_path, p);
            match image::image_dimensions(&full) {
                Ok((w, h)) => {
                    if !passes_resolution(h as usize, w as usize, min_side) {
                        problems.push(format!("{p}: {w}x{h} below {min_side}"));
                    }
                }
                Err(e) => problems.push(format!("{p}: unreadable: {e}")),
            }
        }
    }
    if problems.is_empty() {
        Ok(())
    } else {
        Err(Error::ManifestValidation(problems))
    }
}

/// Deterministic dataset build: filter frames by resolution, draw
/// `pairs_per_group` pairs per group, write rasters and the manifest under
/// `out_dir`.
pub fn build_dataset(
    groups: &[SourceGroup],
    out_dir: &Path,
    seed: u64,
    min_side: usize,
    pairs_per_group: usize,
) -> Result<Manifest> {
    let images_dir = out_dir.join("images");
    std::fs::create_dir_all(&images_dir).map_err(|e| Error::io(&images_dir, e))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut records = Vec::new();
    let mut sorted: Vec<&SourceGroup> = groups.iter().collect();
    sorted.sort_by(|a, b| a.group_id.cmp(&b.group_id));
    for group in sorted {
        let frames: Vec<&Frame> = group
            .frames
            .iter()
            .filter(|f| passes_resolution(f.image.height(), f.image.width(), min_side))
            .collect();
        for k in 0..pairs_per_group {
            let pair = match group.kind {
                GroupKind::Single => {
                    let Some(frame) = frames.first() else { break };
                    Some(make_pair_from_single(
                        &frame.image,
                        &frame.mask,
                        &frame.object_id,
                        &mut rng,
                    )?)
                }
                _ => {
                    if frames.len() < 2 {
                        break;
                    }
                    let filtered = SourceGroup {
                        frames: frames.iter().map(|f| (*f).clone()).collect(),
                        ..group.clone()
                    };
                    make_pair_from_group(&filtered, PairOptions::default(), &mut rng)?
                }
            };
            let Some(pair) = pair else { break };
            if !passes_resolution(pair.ref_image.height(), pair.ref_image.width(), min_side)
                || !passes_resolution(
                    pair.target_image.height(),
                    pair.target_image.width(),
                    min_side,
                )
            {
                continue;
            }
            let sample_id = format!("{}-{k:03}", group.group_id);
            let ref_image_path = format!("images/{sample_id}_ref.png");
            let ref_mask_path = format!("images/{sample_id}_mask.png");
            let target_image_path = format!("images/{sample_id}_tar.png");
            pair.ref_image.save_png(&out_dir.join(&ref_image_path))?;
            pair.ref_mask.save_png(&out_dir.join(&ref_mask_path))?;
            pair.target_image
                .save_png(&out_dir.join(&target_image_path))?;
            records.push(ManifestRecord {
                sample_id,
                ref_image_path,
                ref_mask_path,
                target_image_path,
                caption: group.caption.clone(),
                class_word: group.class_word.clone(),
                category: group.category.clone(),
            });
        }
    }
    write_manifest(&records, &out_dir.join("manifest.jsonl"))
}

/// A loaded pair sample ready for training or evaluation.
pub struct LoadedSample {
    pub record: ManifestRecord,
    pub ref_image: ImageTensor,
    pub ref_mask: SegMask,
    pub target_image: ImageTensor,
}

pub fn load_samples(manifest: &Manifest, manifest_path: &Path) -> Result<Vec<LoadedSample>> {
    manifest
        .records
        .iter()
        .map(|r| {
            Ok(LoadedSample {
                record: r.clone(),
                ref_image: ImageTensor::load_png(&resolve_path(manifest_path, &r.ref_image_path))?,
                ref_mask: SegMask::load_png(&resolve_path(manifest_path, &r.ref_mask_path))?,
                target_image: ImageTensor::load_png(&resolve_path(
                    manifest_path,
                    &r.target_image_path,
                ))?,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::toy_corpus::{generate_toy_groups, render_frame, Shape, ToyIdentity};

    fn blank(h: usize, w: usize) -> ImageTensor {
        ImageTensor::constant(0.5, h, w).unwrap()
    }

    #[test]
    fn resolution_filter_boundary_is_inclusive() {
        let imgs = vec![
            blank(300, 300),
            blank(299, 300),
            blank(300, 299),
            blank(301, 500),
        ];
        let kept = filter_resolution(imgs, 300);
        assert_eq!(kept.len(), 2);
        assert!(kept.iter().all(|i| i.height() >= 300 && i.width() >= 300));
    }

    #[test]
    fn crop_window_bounds_contain_bbox() {
        // frame 400x400 with a 350x350 box: crop side must land in [350, 400]
        let image = blank(400, 400);
        let mut mask = SegMask::zeros(400, 400);
        for y in 20..370 {
            for x in 30..380 {
                mask.set(y, x, 1);
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..20 {
            let (ci, cm) = random_crop_around(&image, &mask, &mut rng).unwrap();
            assert!((350..=400).contains(&ci.height()));
            assert!((350..=400).contains(&ci.width()));
            // the whole object survives the crop
            assert_eq!(cm.count_nonzero(), 350 * 350);
        }
    }

    #[test]
    fn empty_mask_cannot_anchor_a_crop() {
        let image = blank(64, 64);
        let mask = SegMask::zeros(64, 64);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(random_crop_around(&image, &mask, &mut rng).is_err());
    }

    #[test]
    fn group_pairs_use_two_distinct_frames() {
        let groups = generate_toy_groups(1, 4, 64, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let pair = make_pair_from_group(&groups[0], PairOptions::default(), &mut rng)
            .unwrap()
            .expect("shared object id present");
        assert!(pair.ref_mask.count_nonzero() > 0);
        assert_eq!(pair.object_id, "obj-000");
    }

    #[test]
    fn group_without_shared_id_yields_none() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let id = ToyIdentity {
            shape: Shape::Circle,
            color_index: 1,
        };
        let frames: Vec<Frame> = (0..2)
            .map(|i| {
                let (image, mask) = render_frame(id, 48, &mut rng);
                Frame {
                    image,
                    mask,
                    object_id: format!("distinct-{i}"),
                }
            })
            .collect();
        let group = SourceGroup {
            group_id: "g".into(),
            kind: GroupKind::Video,
            frames,
            caption: "a photo".into(),
            class_word: "circle".into(),
            category: "circle".into(),
        };
        let got = make_pair_from_group(&group, PairOptions::default(), &mut rng).unwrap();
        assert!(got.is_none());
    }

    #[test]
    fn single_image_pair_keeps_reference_colors_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let id = ToyIdentity {
            shape: Shape::Square,
            color_index: 2,
        };
        let (image, mask) = render_frame(id, 96, &mut rng);
        let color = crate::toy_corpus::PALETTE[2].1;
        let pair = make_pair_from_single(&image, &mask, "obj", &mut rng).unwrap();
        // wherever the cropped mask is on, the reference pixel is the exact
        // object color: the reference side gets no color jitter
        let mut checked = 0;
        for y in 0..pair.ref_mask.height() {
            for x in 0..pair.ref_mask.width() {
                if pair.ref_mask.get(y, x) == 1 {
                    for (c, expected) in color.iter().enumerate() {
                        assert_eq!(pair.ref_image.get(c, y, x), *expected);
                    }
                    checked += 1;
                }
            }
        }
        assert!(checked > 0);
    }

    #[test]
    fn manifest_round_trip_and_stats() {
        let dir = tempfile::tempdir().unwrap();
        let groups = generate_toy_groups(2, 3, 48, 11);
        let manifest = build_dataset(&groups, dir.path(), 5, 16, 2).unwrap();
        assert_eq!(manifest.records.len(), 4);
        let reread = read_manifest(&dir.path().join("manifest.jsonl")).unwrap();
        assert_eq!(reread, manifest);
        assert_eq!(reread.stats.values().sum::<usize>(), 4);
    }

    #[test]
    fn missing_files_are_itemized() {
        let dir = tempfile::tempdir().unwrap();
        let rec = ManifestRecord {
            sample_id: "s0".into(),
            ref_image_path: "nope_ref.png".into(),
            ref_mask_path: "nope_mask.png".into(),
            target_image_path: "nope_tar.png".into(),
            caption: "a photo of a red circle".into(),
            class_word: "circle".into(),
            category: "circle".into(),
        };
        let path = dir.path().join("manifest.jsonl");
        write_manifest(&[rec], &path).unwrap();
        match read_manifest(&path) {
            Err(Error::ManifestValidation(problems)) => assert_eq!(problems.len(), 3),
            other => panic!("expected itemized validation failure, got {other:?}"),
        }
    }

    #[test]
    fn malformed_lines_are_itemized_with_line_numbers() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("manifest.jsonl");
        std::fs::write(&path, "{not json}\n").unwrap();
        match read_manifest(&path) {
            Err(Error::ManifestValidation(problems)) => {
                assert!(problems[0].starts_with("line 1:"), "{problems:?}");
            }
            other => panic!("expected itemized validation failure, got {other:?}"),
        }
    }

    #[test]
    fn build_is_deterministic_in_the_seed() {
        let groups = generate_toy_groups(2, 3, 48, 11);
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        let m1 = build_dataset(&groups, d1.path(), 9, 16, 1).unwrap();
        let m2 = build_dataset(&groups, d2.path(), 9, 16, 1).unwrap();
        assert_eq!(m1.records, m2.records);
        for r in &m1.records {
            let a = std::fs::read(d1.path().join(&r.ref_image_path)).unwrap();
            let b = std::fs::read(d2.path().join(&r.ref_image_path)).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn min_side_check_flags_small_rasters() {
        let dir = tempfile::tempdir().unwrap();
        let groups = generate_toy_groups(1, 2, 48, 3);
        let manifest = build_dataset(&groups, dir.path(), 1, 16, 1).unwrap();
        let path = dir.path().join("manifest.jsonl");
        assert!(check_min_side(&manifest, &path, 16).is_ok());
        assert!(check_min_side(&manifest, &path, 300).is_err());
    }
}
