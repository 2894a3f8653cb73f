use ndarray::{Array4, Axis, Zip};

use crate::error::{Error, Result};
use crate::types::AcquisitionSeries;

/// Resamples radar onto the multispectral dates by piecewise-linear
/// interpolation over time. Dates outside the radar span take the nearest
/// end value.
pub fn align_radar_to_multispec(series: &AcquisitionSeries) -> Result<AcquisitionSeries> {
    if series.radar_dates == series.dates && series.radar.shape()[0] == series.dates.len() {
        return Ok(series.clone());
    }
    let src = &series.radar_dates;
    if src.len() < 2 {
        return Err(Error::Alignment(format!(
            "series {}: need at least 2 radar observations, got {}",
            series.patch_id,
            src.len()
        )));
    }
    if src.len() != series.radar.shape()[0] {
        return Err(Error::Alignment(format!(
            "series {}: {} radar dates for {} radar frames",
            series.patch_id,
            src.len(),
            series.radar.shape()[0]
        )));
    }
    if src.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::Alignment(format!(
            "series {}: radar dates not strictly increasing",
            series.patch_id
        )));
    }
    let (_, c, h, w) = series.radar.dim();
    let mut out = Array4::<f32>::zeros((series.dates.len(), c, h, w));
    for (t, &day) in series.dates.iter().enumerate() {
        let (i0, i1, frac) = bracket(src, day);
        let a = series.radar.index_axis(Axis(0), i0);
        let b = series.radar.index_axis(Axis(0), i1);
        Zip::from(out.index_axis_mut(Axis(0), t))
            .and(&a)
            .and(&b)
            .for_each(|o, &x, &y| *o = ((1.0 - frac) * x as f64 + frac * y as f64) as f32);
    }
    Ok(AcquisitionSeries {
        patch_id: series.patch_id.clone(),
        multispec: series.multispec.clone(),
        radar: out,
        dates: series.dates.clone(),
        radar_dates: series.dates.clone(),
    })
}

/// Indices and weight of `day` between its neighbouring source dates.
fn bracket(src: &[i64], day: i64) -> (usize, usize, f64) {
    let last = src.len() - 1;
    if day <= src[0] {
        return (0, 0, 0.0);
    }
    if day >= src[last] {
        return (last, last, 0.0);
    }
    let hi = src.partition_point(|&d| d <= day);
    let lo = hi - 1;
    if src[lo] == day {
        return (lo, lo, 0.0);
    }
    let frac = (day - src[lo]) as f64 / (src[hi] - src[lo]) as f64;
    (lo, hi, frac)
}
