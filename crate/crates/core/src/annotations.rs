//! Polygon annotation documents, their rasterization into ground-truth
//! masks, and video-level dataset splits.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

pub use crate::imaging::BinaryMask;

#[derive(Debug, Error)]
pub enum AnnotationError {
    #[error("malformed JSON at byte {offset}: {message}")]
    Malformed { offset: usize, message: String },
    #[error("schema error: missing or invalid field `{field}` in {context}")]
    Schema { field: String, context: String },
    #[error("polygon `{label}` in image `{image_name}` has {count} vertices, need at least 3")]
    TooFewVertices {
        image_name: String,
        label: String,
        count: usize,
    },
    #[error("cannot hold out a test split from {0} video(s); need at least 2")]
    TooFewVideos(usize),
    #[error("split fraction {0} must lie strictly between 0 and 1")]
    BadFraction(f64),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Polygon {
    pub label: String,
    pub vertices: Vec<(f64, f64)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AnnotationDoc {
    pub image_name: String,
    pub image_width: usize,
    pub image_height: usize,
    pub polygons: Vec<Polygon>,
}

fn byte_offset(text: &str, line: usize, column: usize) -> usize {
    let line_start: usize = text.split_inclusive('\n').take(line.saturating_sub(1)).map(str::len).sum();
    (line_start + column.saturating_sub(1)).min(text.len())
}

fn schema(field: &str, context: impl Into<String>) -> AnnotationError {
    AnnotationError::Schema {
        field: field.to_string(),
        context: context.into(),
    }
}

fn get<'a>(obj: &'a Value, field: &str, context: &str) -> Result<&'a Value, AnnotationError> {
    obj.get(field).ok_or_else(|| schema(field, context))
}

fn get_dim(obj: &Value, field: &str, context: &str) -> Result<usize, AnnotationError> {
    match get(obj, field, context)?.as_u64() {
        Some(v) if v >= 1 => Ok(v as usize),
        _ => Err(schema(field, context)),
    }
}

/// Parses the annotation document format:
///
/// ```json
/// {"images":[{"name":"frame.png","width":W,"height":H,
///   "annotations":[{"label":"stone","points":[[x,y],...]}]}]}
/// ```
pub fn parse_annotations(text: &str) -> Result<Vec<AnnotationDoc>, AnnotationError> {
    let root: Value = serde_json::from_str(text).map_err(|e| AnnotationError::Malformed {
        offset: byte_offset(text, e.line(), e.column()),
        message: e.to_string(),
    })?;
    let images = get(&root, "images", "document")?
        .as_array()
        .ok_or_else(|| schema("images", "document"))?;

    images
        .iter()
        .enumerate()
        .map(|(i, img)| {
            let ctx = format!("images[{i}]");
            let image_name = get(img, "name", &ctx)?
                .as_str()
                .filter(|s| !s.is_empty())
                .ok_or_else(|| schema("name", ctx.as_str()))?
                .to_string();
            let image_width = get_dim(img, "width", &ctx)?;
            let image_height = get_dim(img, "height", &ctx)?;
            let anns = get(img, "annotations", &ctx)?
                .as_array()
                .ok_or_else(|| schema("annotations", ctx.as_str()))?;
            let polygons = anns
                .iter()
                .enumerate()
                .map(|(j, ann)| {
                    let actx = format!("{ctx}.annotations[{j}]");
                    let label = get(ann, "label", &actx)?
                        .as_str()
                        .ok_or_else(|| schema("label", actx.as_str()))?
                        .to_string();
                    let points = get(ann, "points", &actx)?
                        .as_array()
                        .ok_or_else(|| schema("points", actx.as_str()))?;
                    let vertices = points
                        .iter()
                        .map(|p| match p.as_array().map(Vec::as_slice) {
                            Some([x, y]) => match (x.as_f64(), y.as_f64()) {
                                (Some(x), Some(y)) => Ok((x, y)),
                                _ => Err(schema("points", actx.as_str())),
                            },
                            _ => Err(schema("points", actx.as_str())),
                        })
                        .collect::<Result<Vec<_>, _>>()?;
                    if vertices.len() < 3 {
                        return Err(AnnotationError::TooFewVertices {
                            image_name: image_name.clone(),
                            label,
                            count: vertices.len(),
                        });
                    }
                    Ok(Polygon { label, vertices })
                })
                .collect::<Result<Vec<_>, _>>()?;
            Ok(AnnotationDoc {
                image_name,
                image_width,
                image_height,
                polygons,
            })
        })
        .collect()
}

/// Serializes documents back into the annotation format.
pub fn annotations_to_json(docs: &[AnnotationDoc]) -> String {
    let images: Vec<Value> = docs
        .iter()
        .map(|d| {
            serde_json::json!({
                "name": d.image_name,
                "width": d.image_width,
                "height": d.image_height,
                "annotations": d.polygons.iter().map(|p| serde_json::json!({
                    "label": p.label,
                    "points": p.vertices.iter().map(|&(x, y)| [x, y]).collect::<Vec<_>>(),
                })).collect::<Vec<_>>(),
            })
        })
        .collect();
    serde_json::json!({ "images": images }).to_string()
}

/// Even-odd crossing test of a point against a closed vertex loop.
///
/// An edge counts when it straddles `py` half-open (`y > py` differs at its
/// ends) and its crossing lies strictly right of `px`.
#[inline]
pub fn point_in_polygon(vertices: &[(f64, f64)], px: f64, py: f64) -> bool {
    let mut inside = false;
    let n = vertices.len();
    let mut j = n - 1;
    for i in 0..n {
        let (a, b) = (vertices[i], vertices[j]);
        if (a.1 > py) != (b.1 > py) && px < crossing_x(a, b, py) {
            inside = !inside;
        }
        j = i;
    }
    inside
}

#[inline]
fn crossing_x(a: (f64, f64), b: (f64, f64), y: f64) -> f64 {
    (b.0 - a.0) * (y - a.1) / (b.1 - a.1) + a.0
}

fn clamp_vertices(poly: &Polygon, w: usize, h: usize) -> Vec<(f64, f64)> {
    poly.vertices
        .iter()
        .map(|&(x, y)| (x.clamp(0.0, w as f64), y.clamp(0.0, h as f64)))
        .collect()
}

/// Scanline fill of one polygon into `mask` (OR). Samples pixel centers
/// with exactly the crossing predicate of [`point_in_polygon`].
fn fill_polygon(mask: &mut BinaryMask, vertices: &[(f64, f64)]) {
    let (w, h) = (mask.width(), mask.height());
    let n = vertices.len();
    let mut xs: Vec<f64> = Vec::with_capacity(n);
    for row in 0..h {
        let py = row as f64 + 0.5;
        xs.clear();
        let mut j = n - 1;
        for i in 0..n {
            let (a, b) = (vertices[i], vertices[j]);
            if (a.1 > py) != (b.1 > py) {
                xs.push(crossing_x(a, b, py));
            }
            j = i;
        }
        if xs.is_empty() {
            continue;
        }
        xs.sort_by(f64::total_cmp);
        // A center is inside when an odd number of crossings lie strictly to
        // its right. Walk columns left to right, dropping passed crossings.
        let mut k = 0;
        for col in 0..w {
            let px = col as f64 + 0.5;
            while k < xs.len() && xs[k] <= px {
                k += 1;
            }
            if (xs.len() - k) % 2 == 1 {
                mask.set(col, row, true);
            }
        }
    }
}

/// Ground-truth mask: a pixel is set when its center lies inside any
/// polygon under the even-odd rule. Vertices are clamped to the image.
pub fn rasterize_polygons(doc: &AnnotationDoc) -> BinaryMask {
    let mut mask = BinaryMask::zeros(doc.image_width, doc.image_height);
    for poly in &doc.polygons {
        let verts = clamp_vertices(poly, doc.image_width, doc.image_height);
        fill_polygon(&mut mask, &verts);
    }
    mask
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct IndexEntry {
    pub video_id: String,
    pub frame_path: String,
    pub mask_path: String,
    pub split: Split,
}

/// Frame/mask pairs with a per-video split assignment.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetIndex {
    pub entries: Vec<IndexEntry>,
    pub seed: u64,
}

/// Conventional on-disk layout of frame `i` of a video.
pub fn frame_paths(video_id: &str, i: usize) -> (String, String) {
    (
        format!("{video_id}/frame_{i:06}.png"),
        format!("{video_id}/mask_{i:06}.png"),
    )
}

fn holdout_count(n: usize, fraction: f64) -> usize {
    ((fraction * n as f64).round() as usize).clamp(1, n - 1)
}

fn shuffled_ids(videos: &[(String, usize)], seed: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..videos.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    order
}

/// Holds out `round(fraction * videos)` whole videos (at least one, never
/// all) as the test split, chosen by a seeded shuffle.
pub fn split_dataset(videos: &[(String, usize)], fraction: f64, seed: u64) -> Result<DatasetIndex, AnnotationError> {
    split_dataset_with_val(videos, fraction, 0.0, seed)
}

/// Like [`split_dataset`], additionally moving `round(val_fraction * videos)`
/// of the remaining videos to a validation split.
pub fn split_dataset_with_val(
    videos: &[(String, usize)],
    test_fraction: f64,
    val_fraction: f64,
    seed: u64,
) -> Result<DatasetIndex, AnnotationError> {
    if videos.len() < 2 {
        return Err(AnnotationError::TooFewVideos(videos.len()));
    }
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(AnnotationError::BadFraction(test_fraction));
    }
    if !(0.0..1.0).contains(&val_fraction) {
        return Err(AnnotationError::BadFraction(val_fraction));
    }
    let n = videos.len();
    let n_test = holdout_count(n, test_fraction);
    let n_val = ((val_fraction * n as f64).round() as usize).min(n - n_test - 1);
    let mut split = vec![Split::Train; n];
    for (rank, &v) in shuffled_ids(videos, seed).iter().enumerate() {
        if rank < n_test {
            split[v] = Split::Test;
        } else if rank < n_test + n_val {
            split[v] = Split::Val;
        }
    }
    let entries = videos
        .iter()
        .zip(&split)
        .flat_map(|((id, frames), &s)| {
            (0..*frames).map(move |i| {
                let (frame_path, mask_path) = frame_paths(id, i);
                IndexEntry {
                    video_id: id.clone(),
                    frame_path,
                    mask_path,
                    split: s,
                }
            })
        })
        .collect();
    Ok(DatasetIndex { entries, seed })
}

impl DatasetIndex {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &IndexEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }

    /// Distinct video ids assigned to `split`, in first-seen order.
    pub fn videos(&self, split: Split) -> Vec<&str> {
        let mut out: Vec<&str> = Vec::new();
        for e in self.split(split) {
            if out.last() != Some(&e.video_id.as_str()) && !out.contains(&e.video_id.as_str()) {
                out.push(&e.video_id);
            }
        }
        out
    }

    pub fn load(path: &Path) -> Result<Self, AnnotationError> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }

    pub fn save(&self, path: &Path) -> Result<(), AnnotationError> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn oracle(doc: &AnnotationDoc) -> BinaryMask {
        BinaryMask::from_fn(doc.image_width, doc.image_height, |x, y| {
            doc.polygons
                .iter()
                .any(|p| point_in_polygon(&p.vertices, x as f64 + 0.5, y as f64 + 0.5))
        })
    }

    fn doc(w: usize, h: usize, polys: Vec<Vec<(f64, f64)>>) -> AnnotationDoc {
        AnnotationDoc {
            image_name: "f.png".into(),
            image_width: w,
            image_height: h,
            polygons: polys
                .into_iter()
                .map(|vertices| Polygon {
                    label: "stone".into(),
                    vertices,
                })
                .collect(),
        }
    }

    #[test]
    fn parse_single_square() {
        let text = r#"{"images":[{"name":"a.png","width":8,"height":8,
            "annotations":[{"label":"stone","points":[[1,1],[5,1],[5,5],[1,5]]}]}]}"#;
        let docs = parse_annotations(text).unwrap();
        assert_eq!(docs.len(), 1);
        assert_eq!(docs[0].polygons[0].vertices, vec![(1.0, 1.0), (5.0, 1.0), (5.0, 5.0), (1.0, 5.0)]);
        assert_eq!(parse_annotations(&annotations_to_json(&docs)).unwrap(), docs);
    }

    #[test]
    fn parse_empty_and_errors() {
        assert!(parse_annotations(r#"{"images":[]}"#).unwrap().is_empty());

        let two = r#"{"images":[{"name":"b.png","width":4,"height":4,
            "annotations":[{"label":"stone","points":[[0,0],[1,1]]}]}]}"#;
        match parse_annotations(two) {
            Err(AnnotationError::TooFewVertices { image_name, count, .. }) => {
                assert_eq!(image_name, "b.png");
                assert_eq!(count, 2);
            }
            other => panic!("unexpected {other:?}"),
        }

        let missing = r#"{"images":[{"name":"c.png","height":4,"annotations":[]}]}"#;
        match parse_annotations(missing) {
            Err(AnnotationError::Schema { field, .. }) => assert_eq!(field, "width"),
            other => panic!("unexpected {other:?}"),
        }

        let broken = "{\"images\":\n [1, }";
        match parse_annotations(broken) {
            Err(AnnotationError::Malformed { offset, .. }) => assert_eq!(&broken[offset..offset + 1], "}"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn square_covers_inner_block() {
        let d = doc(8, 8, vec![vec![(1.0, 1.0), (5.0, 1.0), (5.0, 5.0), (1.0, 5.0)]]);
        let m = rasterize_polygons(&d);
        let expected = BinaryMask::from_fn(8, 8, |x, y| (1..5).contains(&x) && (1..5).contains(&y));
        assert_eq!(m, expected);
        assert_eq!(m, oracle(&d));
    }

    #[test]
    fn triangle_matches_half_plane() {
        let d = doc(8, 8, vec![vec![(0.0, 0.0), (8.0, 0.0), (0.0, 8.0)]]);
        let m = rasterize_polygons(&d);
        assert_eq!(m, oracle(&d));
        // centers (x+.5, y+.5) strictly below the hypotenuse x + y = 8
        assert_eq!(m, BinaryMask::from_fn(8, 8, |x, y| x + y < 7));
        assert_eq!(m.count_ones(), 28);
    }

    #[test]
    fn disjoint_union_adds_counts() {
        let a = vec![(0.0, 0.0), (3.0, 0.0), (3.0, 3.0), (0.0, 3.0)];
        let b = vec![(5.0, 5.0), (9.0, 5.0), (9.0, 8.0), (5.0, 8.0)];
        let both = rasterize_polygons(&doc(10, 10, vec![a.clone(), b.clone()]));
        let na = rasterize_polygons(&doc(10, 10, vec![a])).count_ones();
        let nb = rasterize_polygons(&doc(10, 10, vec![b])).count_ones();
        assert_eq!(both.count_ones(), na + nb);
    }

    #[test]
    fn out_of_bounds_vertices_are_clamped() {
        let d = doc(6, 6, vec![vec![(-3.0, -3.0), (20.0, -1.0), (20.0, 20.0), (-1.0, 9.0)]]);
        assert_eq!(rasterize_polygons(&d).count_ones(), 36);
    }

    #[test]
    fn split_27_videos() {
        let vids: Vec<(String, usize)> = (0..27).map(|i| (format!("v{i:02}"), 30)).collect();
        let idx = split_dataset(&vids, 5.0 / 27.0, 42).unwrap();
        assert_eq!(idx.videos(Split::Test).len(), 5);
        assert_eq!(idx.videos(Split::Train).len(), 22);
        for v in idx.videos(Split::Test) {
            assert!(idx.entries.iter().filter(|e| e.video_id == v).all(|e| e.split == Split::Test));
        }
    }

    #[test]
    fn split_is_seeded_and_has_minimum() {
        let vids: Vec<(String, usize)> = (0..10).map(|i| (format!("v{i}"), 3)).collect();
        let a = split_dataset(&vids, 0.2, 9).unwrap();
        assert_eq!(a, split_dataset(&vids, 0.2, 9).unwrap());
        assert_eq!(a.videos(Split::Test).len(), 2);

        let two = vec![("a".to_string(), 1), ("b".to_string(), 1)];
        assert_eq!(split_dataset(&two, 0.1, 0).unwrap().videos(Split::Test).len(), 1);
        assert!(matches!(
            split_dataset(&two[..1], 0.1, 0),
            Err(AnnotationError::TooFewVideos(1))
        ));
    }

    #[test]
    fn index_json_roundtrip() {
        let vids: Vec<(String, usize)> = (0..6).map(|i| (format!("v{i}"), 2)).collect();
        let idx = split_dataset_with_val(&vids, 0.2, 0.2, 1).unwrap();
        assert_eq!(idx.videos(Split::Val).len(), 1);
        let text = serde_json::to_string(&idx).unwrap();
        assert!(text.contains("\"split\":\"test\""));
        assert_eq!(serde_json::from_str::<DatasetIndex>(&text).unwrap(), idx);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn star_polygon() -> impl Strategy<Value = Vec<(f64, f64)>> {
            (3usize..13, 2.0f64..19.5, 0.0f64..1.0, 20.0f64..44.0, 20.0f64..44.0).prop_flat_map(|(n, r, phase, cx, cy)| {
                proptest::collection::vec((0.0f64..1.0, 0.3f64..1.0), n).prop_map(move |v| {
                    let mut angles: Vec<(f64, f64)> = v;
                    angles.sort_by(|a, b| a.0.total_cmp(&b.0));
                    angles
                        .iter()
                        .map(|&(a, rr)| {
                            let t = (a + phase) * std::f64::consts::TAU;
                            (cx + r * rr * t.cos(), cy + r * rr * t.sin())
                        })
                        .collect()
                })
            })
        }

        proptest! {
            #[test]
            fn scanline_matches_point_test(p in star_polygon()) {
                let d = doc(64, 64, vec![p]);
                prop_assert_eq!(rasterize_polygons(&d), oracle(&d));
            }

            #[test]
            fn union_is_order_independent(a in star_polygon(), b in star_polygon()) {
                let ab = rasterize_polygons(&doc(64, 64, vec![a.clone(), b.clone()]));
                let ba = rasterize_polygons(&doc(64, 64, vec![b, a]));
                prop_assert_eq!(ab, ba);
            }
        }
    }
}
