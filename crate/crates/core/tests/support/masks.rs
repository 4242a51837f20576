use dgst_core::metrics::Mask;

pub fn square(h: usize, w: usize, top: usize, left: usize, size: usize) -> Mask {
    let mut m = Mask::empty(h, w);
    for y in top..top + size {
        for x in left..left + size {
            m.set(y, x, true);
        }
    }
    m
}

pub fn from_bits(h: usize, w: usize, bits: &[bool]) -> Mask {
    Mask::new(h, w, bits.to_vec()).unwrap()
}

/// Boundary and distances by exhaustive search.
pub fn nsd_brute(a: &Mask, b: &Mask, tol: f64) -> f64 {
    let (h, w) = (a.height(), a.width());
    let edge = |m: &Mask| -> Vec<(i64, i64)> {
        let mut out = Vec::new();
        for y in 0..h as i64 {
            for x in 0..w as i64 {
                if !m.get(y as usize, x as usize) {
                    continue;
                }
                let on = |yy: i64, xx: i64| {
                    yy >= 0 && xx >= 0 && yy < h as i64 && xx < w as i64 && m.get(yy as usize, xx as usize)
                };
                if !(on(y - 1, x) && on(y + 1, x) && on(y, x - 1) && on(y, x + 1)) {
                    out.push((y, x));
                }
            }
        }
        out
    };
    if a.count() == 0 && b.count() == 0 {
        return 1.0;
    }
    if a.count() == 0 || b.count() == 0 {
        return 0.0;
    }
    let (ea, eb) = (edge(a), edge(b));
    let close = |from: &[(i64, i64)], to: &[(i64, i64)]| {
        from.iter()
            .filter(|p| {
                to.iter()
                    .any(|q| (((p.0 - q.0).pow(2) + (p.1 - q.1).pow(2)) as f64).sqrt() <= tol)
            })
            .count()
    };
    (close(&ea, &eb) + close(&eb, &ea)) as f64 / (ea.len() + eb.len()) as f64
}
