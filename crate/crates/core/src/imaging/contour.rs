use super::{BinaryMask, Rect};

/// Outer boundary of one 8-connected foreground component.
///
/// Points are pixel-corner coordinates: pixel `(x, y)` spans
/// `[x, x+1] x [y, y+1]`. Consecutive points (and last/first) are one unit
/// apart along an axis, and the loop runs clockwise on screen with the
/// component on its right. The shoelace area therefore counts the pixels
/// of the component plus any holes it encloses.
#[derive(Clone, Debug, PartialEq)]
pub struct Contour {
    pub points: Vec<(i64, i64)>,
    pub area: f64,
    /// Number of pixels in the traced component.
    pub pixel_count: usize,
    /// Tight pixel bounds of the component.
    pub bounds: Rect,
}

/// Labels 8-connected foreground components in raster order of their first
/// pixel. Returns per-pixel labels (0 = background, components from 1) and
/// the component count.
pub fn label_components(mask: &BinaryMask) -> (Vec<u32>, usize) {
    let (w, h) = (mask.width(), mask.height());
    let data = mask.data();
    let mut labels = vec![0u32; w * h];
    let mut next = 0u32;
    let mut stack = Vec::new();
    for start in 0..w * h {
        if data[start] == 0 || labels[start] != 0 {
            continue;
        }
        next += 1;
        labels[start] = next;
        stack.push(start);
        while let Some(i) = stack.pop() {
            let (x, y) = ((i % w) as i64, (i / w) as i64);
            for dy in -1..=1 {
                for dx in -1..=1 {
                    let (nx, ny) = (x + dx, y + dy);
                    if nx < 0 || ny < 0 || nx >= w as i64 || ny >= h as i64 {
                        continue;
                    }
                    let j = ny as usize * w + nx as usize;
                    if data[j] != 0 && labels[j] == 0 {
                        labels[j] = next;
                        stack.push(j);
                    }
                }
            }
        }
    }
    (labels, next as usize)
}

// Clockwise on screen (y down): east, south, west, north.
const STEPS: [(i64, i64); 4] = [(1, 0), (0, 1), (-1, 0), (0, -1)];

/// Pixels ahead of vertex `(vx, vy)` when heading `dir`: (left, right).
#[inline]
fn ahead(vx: i64, vy: i64, dir: usize) -> ((i64, i64), (i64, i64)) {
    match dir {
        0 => ((vx, vy - 1), (vx, vy)),
        1 => ((vx, vy), (vx - 1, vy)),
        2 => ((vx - 1, vy), (vx - 1, vy - 1)),
        _ => ((vx - 1, vy - 1), (vx, vy - 1)),
    }
}

fn trace_outer(mask: &BinaryMask, start_x: usize, start_y: usize) -> Vec<(i64, i64)> {
    let (w, h) = (mask.width() as i64, mask.height() as i64);
    let fg = |(x, y): (i64, i64)| x >= 0 && y >= 0 && x < w && y < h && mask.get(x as usize, y as usize);

    let origin = (start_x as i64, start_y as i64);
    let mut pos = origin;
    let mut dir = 0usize;
    let mut points = Vec::new();
    loop {
        points.push(pos);
        pos = (pos.0 + STEPS[dir].0, pos.1 + STEPS[dir].1);
        let (left, right) = ahead(pos.0, pos.1, dir);
        dir = if fg(left) {
            (dir + 3) % 4
        } else if fg(right) {
            dir
        } else {
            (dir + 1) % 4
        };
        if pos == origin && dir == 0 {
            return points;
        }
    }
}

fn shoelace(points: &[(i64, i64)]) -> f64 {
    let n = points.len();
    let twice: i64 = (0..n)
        .map(|i| {
            let (a, b) = (points[i], points[(i + 1) % n]);
            a.0 * b.1 - b.0 * a.1
        })
        .sum();
    twice.unsigned_abs() as f64 / 2.0
}

/// One contour per 8-connected foreground component, in raster order of
/// each component's first pixel.
pub fn find_contours(mask: &BinaryMask) -> Vec<Contour> {
    let (labels, count) = label_components(mask);
    let w = mask.width();
    let mut first = vec![usize::MAX; count];
    let mut pixels = vec![0usize; count];
    for (i, &l) in labels.iter().enumerate() {
        if l != 0 {
            let k = l as usize - 1;
            if first[k] == usize::MAX {
                first[k] = i;
            }
            pixels[k] += 1;
        }
    }
    first
        .iter()
        .zip(&pixels)
        .map(|(&start, &pixel_count)| {
            let points = trace_outer(mask, start % w, start / w);
            let (mut x0, mut y0, mut x1, mut y1) = (i64::MAX, i64::MAX, i64::MIN, i64::MIN);
            for &(x, y) in &points {
                x0 = x0.min(x);
                y0 = y0.min(y);
                x1 = x1.max(x);
                y1 = y1.max(y);
            }
            Contour {
                area: shoelace(&points),
                points,
                pixel_count,
                bounds: Rect {
                    x0: x0 as usize,
                    y0: y0 as usize,
                    w: (x1 - x0) as usize,
                    h: (y1 - y0) as usize,
                },
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Independent 8-connected flood fill returning component sizes and
    /// bounds in raster order.
    fn oracle(mask: &BinaryMask) -> Vec<(usize, (usize, usize, usize, usize))> {
        let (w, h) = (mask.width(), mask.height());
        let mut seen = vec![false; w * h];
        let mut out = Vec::new();
        for y in 0..h {
            for x in 0..w {
                if !mask.get(x, y) || seen[y * w + x] {
                    continue;
                }
                let mut queue = std::collections::VecDeque::from([(x, y)]);
                seen[y * w + x] = true;
                let (mut n, mut b) = (0, (x, y, x, y));
                while let Some((cx, cy)) = queue.pop_front() {
                    n += 1;
                    b = (b.0.min(cx), b.1.min(cy), b.2.max(cx), b.3.max(cy));
                    for ny in cy.saturating_sub(1)..=(cy + 1).min(h - 1) {
                        for nx in cx.saturating_sub(1)..=(cx + 1).min(w - 1) {
                            if mask.get(nx, ny) && !seen[ny * w + nx] {
                                seen[ny * w + nx] = true;
                                queue.push_back((nx, ny));
                            }
                        }
                    }
                }
                out.push((n, b));
            }
        }
        out
    }

    fn check_loop(c: &Contour) {
        assert!(c.points.len() >= 4);
        for i in 0..c.points.len() {
            let (a, b) = (c.points[i], c.points[(i + 1) % c.points.len()]);
            assert_eq!((a.0 - b.0).abs() + (a.1 - b.1).abs(), 1, "non-unit step");
        }
        assert_eq!(c.area, shoelace(&c.points));
    }

    #[test]
    fn empty_mask_has_no_contours() {
        assert!(find_contours(&BinaryMask::zeros(7, 5)).is_empty());
    }

    #[test]
    fn filled_square() {
        let m = BinaryMask::from_fn(10, 10, |x, y| (3..7).contains(&x) && (2..6).contains(&y));
        let cs = find_contours(&m);
        assert_eq!(cs.len(), 1);
        check_loop(&cs[0]);
        assert_eq!(cs[0].pixel_count, oracle(&m)[0].0);
        assert_eq!(cs[0].pixel_count, 16);
        assert_eq!(cs[0].area, 16.0);
        assert_eq!(cs[0].bounds, Rect { x0: 3, y0: 2, w: 4, h: 4 });
    }

    #[test]
    fn two_squares_ordered_like_oracle() {
        let m = BinaryMask::from_fn(20, 12, |x, y| {
            ((1..4).contains(&x) && (1..4).contains(&y)) || ((8..15).contains(&x) && (4..10).contains(&y))
        });
        let cs = find_contours(&m);
        let or = oracle(&m);
        assert_eq!(cs.len(), 2);
        for (c, o) in cs.iter().zip(&or) {
            check_loop(c);
            assert_eq!(c.pixel_count, o.0);
        }
        assert!(cs[0].area < cs[1].area);
        assert!(or[0].0 < or[1].0);
    }

    #[test]
    fn diagonal_pixels_are_one_component() {
        let m = BinaryMask::from_fn(4, 4, |x, y| x == y);
        let cs = find_contours(&m);
        assert_eq!(cs.len(), 1);
        check_loop(&cs[0]);
        assert_eq!(cs[0].area, 4.0);
        assert_eq!(cs[0].pixel_count, 4);
    }

    #[test]
    fn single_pixel_and_ring() {
        let m = BinaryMask::from_fn(3, 3, |x, y| x == 1 && y == 1);
        let cs = find_contours(&m);
        assert_eq!(cs[0].points, vec![(1, 1), (2, 1), (2, 2), (1, 2)]);
        assert_eq!(cs[0].area, 1.0);

        let ring = BinaryMask::from_fn(5, 5, |x, y| x == 0 || y == 0 || x == 4 || y == 4);
        let cs = find_contours(&ring);
        assert_eq!(cs.len(), 1);
        assert_eq!(cs[0].pixel_count, 16);
        // outer boundary encloses the hole
        assert_eq!(cs[0].area, 25.0);
    }

    #[test]
    fn random_masks_partition_like_flood_fill() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let (w, h) = (rng.random_range(1..24), rng.random_range(1..24));
            let p: f64 = rng.random_range(0.1..0.7);
            let m = BinaryMask::from_fn(w, h, |_, _| rng.random_bool(p));
            let cs = find_contours(&m);
            let or = oracle(&m);
            assert_eq!(cs.len(), or.len());
            let total: usize = cs.iter().map(|c| c.pixel_count).sum();
            assert_eq!(total, m.count_ones());
            for (c, (n, b)) in cs.iter().zip(&or) {
                check_loop(c);
                assert_eq!(c.pixel_count, *n);
                assert_eq!(c.bounds, Rect { x0: b.0, y0: b.1, w: b.2 - b.0 + 1, h: b.3 - b.1 + 1 });
                assert!(c.area >= c.pixel_count as f64);
            }
        }
    }
}
