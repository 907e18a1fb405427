//! Static contact transfer by dense feature correspondence with the top-1
//! retrieved reference.

use crate::error::{Error, Result};
use crate::geometry::{Pixel, Vec2};
use crate::image::PixelFeatureMap;

/// Rounds a real-valued contact to the nearest in-bounds pixel.
pub fn contact_pixel(contact: Vec2, width: usize, height: usize) -> Result<Pixel> {
    let (x, y) = (contact.x.round(), contact.y.round());
    if !(x >= 0.0 && y >= 0.0 && x < width as f64 && y < height as f64) {
        return Err(Error::contract(format!(
            "contact ({}, {}) outside a {width}x{height} image",
            contact.x, contact.y
        )));
    }
    Ok(Pixel::new(x as usize, y as usize))
}

/// Mean feature of the 3×3 neighbourhood of `c`, clipped at the borders.
pub fn reference_contact_feature(reference: &PixelFeatureMap, c: Pixel) -> Result<Vec<f64>> {
    let (w, h) = (reference.width(), reference.height());
    if c.x >= w || c.y >= h {
        return Err(Error::contract(format!(
            "reference contact ({}, {}) outside a {w}x{h} map",
            c.x, c.y
        )));
    }
    let mut acc = vec![0.0; reference.channels()];
    let mut count = 0usize;
    for y in c.y.saturating_sub(1)..=(c.y + 1).min(h - 1) {
        for x in c.x.saturating_sub(1)..=(c.x + 1).min(w - 1) {
            for (a, v) in acc.iter_mut().zip(reference.pixel(x, y)) {
                *a += v;
            }
            count += 1;
        }
    }
    for a in &mut acc {
        *a /= count as f64;
    }
    Ok(acc)
}

/// The query pixel whose feature has maximal cosine similarity with the
/// reference's contact feature. Ties go to the smallest row-major index.
pub fn transfer_contact(
    reference: &PixelFeatureMap,
    c_r: Pixel,
    query: &PixelFeatureMap,
) -> Result<Pixel> {
    if reference.channels() != query.channels() {
        return Err(Error::Dimension {
            op: "transfer_contact",
            lhs: vec![reference.channels()],
            rhs: vec![query.channels()],
        });
    }
    let feat = reference_contact_feature(reference, c_r)?;
    let fnorm = feat.iter().map(|v| v * v).sum::<f64>().sqrt();
    if fnorm == 0.0 {
        return Err(Error::NoCorrespondence(
            "reference contact feature has zero norm".into(),
        ));
    }
    let mut best: Option<(f64, usize)> = None;
    let w = query.width();
    for (idx, px) in query.data().chunks(query.channels()).enumerate() {
        let (mut dot, mut n2) = (0.0, 0.0);
        for (a, b) in feat.iter().zip(px) {
            dot += a * b;
            n2 += b * b;
        }
        if n2 == 0.0 {
            continue;
        }
        let score = dot / (fnorm * n2.sqrt());
        // (score desc, index asc): strict improvement keeps the earlier index
        if best.is_none_or(|(s, _)| score > s) {
            best = Some((score, idx));
        }
    }
    let (_, idx) = best.ok_or_else(|| {
        Error::NoCorrespondence("every query pixel has a zero feature".into())
    })?;
    Ok(Pixel::new(idx % w, idx / w))
}
