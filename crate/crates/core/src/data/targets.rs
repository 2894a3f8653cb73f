use ndarray::Array2;

use crate::error::{Error, Result};
use crate::types::PanopticTarget;

/// Ground-truth centerness heatmap, `[H, W]` in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct CenternessTarget {
    pub map: Array2<f64>,
}

/// Gaussian splat per parcel with `sigma = max(1, side / 6)` per axis, merged
/// by pixelwise max. Centers get exactly 1.
pub fn make_centerness_target(target: &PanopticTarget) -> Result<CenternessTarget> {
    let (h, w) = target.semantic.dim();
    let mut map = Array2::<f64>::zeros((h, w));
    for p in &target.parcels {
        let (cr, cc) = p.center;
        if cr >= h || cc >= w {
            return Err(Error::Target(format!(
                "parcel {} center ({cr}, {cc}) outside {h}x{w} image",
                p.parcel_id
            )));
        }
        let sh = (p.box_height / 6.0).max(1.0);
        let sw = (p.box_width / 6.0).max(1.0);
        // beyond 4 sigma the contribution is below 4e-4; skip it
        let rr = (4.0 * sh).ceil() as usize;
        let rc = (4.0 * sw).ceil() as usize;
        for r in cr.saturating_sub(rr)..(cr + rr + 1).min(h) {
            let dy = r as f64 - cr as f64;
            for c in cc.saturating_sub(rc)..(cc + rc + 1).min(w) {
                let dx = c as f64 - cc as f64;
                let v = (-(dy * dy) / (2.0 * sh * sh) - (dx * dx) / (2.0 * sw * sw)).exp();
                if v > map[[r, c]] {
                    map[[r, c]] = v;
                }
            }
        }
        map[[cr, cc]] = 1.0;
    }
    Ok(CenternessTarget { map })
}
