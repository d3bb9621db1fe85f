use serde::{Deserialize, Serialize};

use crate::annotations::{ImageRecord, ObjectAnnotation, Rgb};
use crate::error::{Error, Result};

/// A named RGB anchor.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PaletteColor {
    pub name: String,
    pub rgb: Rgb,
}

/// Ordered list of anchors; order is the tie-break order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Palette(pub Vec<PaletteColor>);

impl Default for Palette {
    fn default() -> Self {
        const ANCHORS: [(&str, Rgb); 12] = [
            ("black", [0, 0, 0]),
            ("white", [255, 255, 255]),
            ("gray", [128, 128, 128]),
            ("red", [255, 0, 0]),
            ("orange", [255, 165, 0]),
            ("yellow", [255, 255, 0]),
            ("green", [0, 128, 0]),
            ("cyan", [0, 255, 255]),
            ("blue", [0, 0, 255]),
            ("purple", [128, 0, 128]),
            ("pink", [255, 192, 203]),
            ("brown", [139, 69, 19]),
        ];
        Palette(
            ANCHORS
                .iter()
                .map(|&(name, rgb)| PaletteColor {
                    name: name.to_string(),
                    rgb,
                })
                .collect(),
        )
    }
}

impl Palette {
    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.0.iter().map(|c| c.name.as_str())
    }

    pub fn contains(&self, name: &str) -> bool {
        self.0.iter().any(|c| c.name == name)
    }

    pub fn rgb(&self, name: &str) -> Option<Rgb> {
        self.0.iter().find(|c| c.name == name).map(|c| c.rgb)
    }

    /// Index of the anchor nearest to `px` in RGB Euclidean distance;
    /// the earliest anchor wins ties.
    pub fn nearest(&self, px: Rgb) -> usize {
        let dist = |a: Rgb| -> i32 {
            (0..3)
                .map(|i| {
                    let d = px[i] as i32 - a[i] as i32;
                    d * d
                })
                .sum()
        };
        let mut best = 0;
        let mut best_d = i32::MAX;
        for (i, c) in self.0.iter().enumerate() {
            let d = dist(c.rgb);
            if d < best_d {
                best = i;
                best_d = d;
            }
        }
        best
    }
}

/// Palette color covering the largest share of the object's mask.
pub fn extract_color(img: &ImageRecord, obj: &ObjectAnnotation, palette: &Palette) -> Result<String> {
    let pixels = img.pixels.as_ref().ok_or(Error::NoPixels {
        image_id: img.image_id,
    })?;
    let (w, h) = (img.width as usize, img.height as usize);
    let mask = obj.mask(w, h)?;
    let mut tally = vec![0usize; palette.0.len()];
    for (bit, px) in mask.bits.iter().zip(pixels) {
        if *bit {
            tally[palette.nearest(*px)] += 1;
        }
    }
    if tally.iter().all(|&n| n == 0) {
        return Err(Error::EmptyMask {
            object_id: obj.object_id,
        });
    }
    // first maximum in palette order
    let winner = tally
        .iter()
        .enumerate()
        .fold((0, 0), |best, (i, &n)| if n > best.1 { (i, n) } else { best })
        .0;
    Ok(palette.0[winner].name.clone())
}
