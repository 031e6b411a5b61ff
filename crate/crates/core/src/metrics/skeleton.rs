//! Topology-preserving thinning: two-subiteration thinning in 2D and
//! directional simple-point peeling (26/6 connectivity) in 3D.

use super::{full_offsets, for_each_offset, label_components, BinaryMask, Connectivity};

/// One-cell-wide skeleton that keeps every component of `mask`.
pub fn skeletonize(mask: &BinaryMask) -> BinaryMask {
    match mask.shape().dim() {
        2 => thin_2d(mask),
        _ => thin_3d(mask),
    }
}

fn thin_2d(mask: &BinaryMask) -> BinaryMask {
    let ext = mask.shape().extents();
    let (h, w) = (ext[0] as isize, ext[1] as isize);
    let mut img: Vec<u8> = mask.bits().to_vec();
    // iteration in which each cell was removed, used to restore vanished components
    let mut removed_at = vec![0usize; img.len()];
    let px = |img: &[u8], y: isize, x: isize| -> u8 {
        if y < 0 || x < 0 || y >= h || x >= w {
            0
        } else {
            img[(y * w + x) as usize]
        }
    };
    let mut iteration = 0;
    loop {
        let mut changed = false;
        for sub in 0..2 {
            iteration += 1;
            let mut doomed = Vec::new();
            for y in 0..h {
                for x in 0..w {
                    if px(&img, y, x) == 0 {
                        continue;
                    }
                    // P2..P9 clockwise from north
                    let n = [
                        px(&img, y - 1, x),
                        px(&img, y - 1, x + 1),
                        px(&img, y, x + 1),
                        px(&img, y + 1, x + 1),
                        px(&img, y + 1, x),
                        px(&img, y + 1, x - 1),
                        px(&img, y, x - 1),
                        px(&img, y - 1, x - 1),
                    ];
                    let b: u8 = n.iter().sum();
                    if !(2..=6).contains(&b) {
                        continue;
                    }
                    let a = (0..8).filter(|&i| n[i] == 0 && n[(i + 1) % 8] == 1).count();
                    if a != 1 {
                        continue;
                    }
                    let (p2, p4, p6, p8) = (n[0], n[2], n[4], n[6]);
                    let keep = if sub == 0 {
                        p2 * p4 * p6 != 0 || p4 * p6 * p8 != 0
                    } else {
                        p2 * p4 * p8 != 0 || p2 * p6 * p8 != 0
                    };
                    if !keep {
                        doomed.push((y * w + x) as usize);
                    }
                }
            }
            for &p in &doomed {
                img[p] = 0;
                removed_at[p] = iteration;
            }
            changed |= !doomed.is_empty();
        }
        if !changed {
            break;
        }
    }
    let mut out = BinaryMask::new(mask.shape().clone(), img).expect("binary by construction");
    restore_vanished(mask, &mut out, &removed_at);
    out
}

/// Puts back one cell (the last removed) of any component that thinning erased.
fn restore_vanished(original: &BinaryMask, thinned: &mut BinaryMask, removed_at: &[usize]) {
    let (labels, count) = label_components(original, Connectivity::Full);
    let mut survives = vec![false; count + 1];
    let mut last: Vec<Option<usize>> = vec![None; count + 1];
    for p in 0..labels.len() {
        let l = labels[p] as usize;
        if l == 0 {
            continue;
        }
        if thinned.is_set(p) {
            survives[l] = true;
        }
        match last[l] {
            Some(q) if removed_at[q] >= removed_at[p] => {}
            _ => last[l] = Some(p),
        }
    }
    for l in 1..=count {
        if !survives[l] {
            if let Some(p) = last[l] {
                thinned.set(p, true);
            }
        }
    }
}

/// 3×3×3 neighbourhood, index `9·dz + 3·dy + dx` with offsets shifted to 0..3.
type Cube = [bool; 27];

const CENTER: usize = 13;

fn cube_coords(i: usize) -> [i32; 3] {
    [(i / 9) as i32, ((i / 3) % 3) as i32, (i % 3) as i32]
}

fn cube_components(cube: &Cube, member: impl Fn(usize) -> bool, face_only: bool) -> Vec<Vec<usize>> {
    let mut seen = [false; 27];
    let mut comps = Vec::new();
    for start in 0..27 {
        if start == CENTER || seen[start] || !member(start) {
            continue;
        }
        let mut comp = vec![start];
        seen[start] = true;
        let mut i = 0;
        while i < comp.len() {
            let a = cube_coords(comp[i]);
            for j in 0..27 {
                if j == CENTER || seen[j] || !member(j) {
                    continue;
                }
                let b = cube_coords(j);
                let d: Vec<i32> = (0..3).map(|k| (a[k] - b[k]).abs()).collect();
                let adjacent = if face_only {
                    d.iter().sum::<i32>() == 1
                } else {
                    d.iter().all(|&v| v <= 1)
                };
                if adjacent {
                    seen[j] = true;
                    comp.push(j);
                }
            }
            i += 1;
        }
        comps.push(comp);
    }
    let _ = cube;
    comps
}

/// Simple point for the (26, 6) topology pair.
fn is_simple(cube: &Cube) -> bool {
    let fg = cube_components(cube, |i| cube[i], false);
    if fg.len() != 1 {
        return false;
    }
    let in_n18 = |i: usize| {
        let c = cube_coords(i);
        (0..3).filter(|&k| c[k] != 1).count() < 3
    };
    let face = |i: usize| {
        let c = cube_coords(i);
        (0..3).filter(|&k| c[k] != 1).count() == 1
    };
    let bg = cube_components(cube, |i| !cube[i] && in_n18(i), true);
    bg.iter().filter(|comp| comp.iter().any(|&i| face(i))).count() == 1
}

fn thin_3d(mask: &BinaryMask) -> BinaryMask {
    let shape = mask.shape().clone();
    let ext = shape.extents().to_vec();
    let strides = shape.strides();
    let mut img = mask.clone();
    let offsets = full_offsets(3);

    let cube_at = |img: &BinaryMask, p: usize| -> Cube {
        let c = shape.coords(p);
        let mut cube = [false; 27];
        for (i, slot) in cube.iter_mut().enumerate() {
            let o = cube_coords(i);
            let mut q = 0usize;
            let mut inside = true;
            for a in 0..3 {
                let v = c[a] as isize + o[a] as isize - 1;
                if v < 0 || v >= ext[a] as isize {
                    inside = false;
                    break;
                }
                q += v as usize * strides[a];
            }
            *slot = inside && img.is_set(q);
        }
        cube
    };
    let neighbours = |img: &BinaryMask, p: usize| {
        let mut n = 0;
        for_each_offset(&shape, p, &offsets, |q| n += img.is_set(q) as usize);
        n
    };
    let removable = |img: &BinaryMask, p: usize| img.is_set(p) && neighbours(img, p) > 1 && is_simple(&cube_at(img, p));

    loop {
        let mut changed = false;
        for axis in 0..3 {
            for sign in [-1isize, 1] {
                let candidates: Vec<usize> = (0..shape.len())
                    .filter(|&p| {
                        if !img.is_set(p) {
                            return false;
                        }
                        let c = shape.coords(p);
                        let v = c[axis] as isize + sign;
                        let open = v < 0
                            || v >= ext[axis] as isize
                            || !img.is_set((p as isize + sign * strides[axis] as isize) as usize);
                        open && removable(&img, p)
                    })
                    .collect();
                for p in candidates {
                    if removable(&img, p) {
                        img.set(p, false);
                        changed = true;
                    }
                }
            }
        }
        if !changed {
            break;
        }
    }
    img
}
