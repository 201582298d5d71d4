//! Minimal line charts of JSONL logs.
//!
//! Each line of the log is a JSON object. The plotted field is `loss` when
//! present in the first record, else `mAP@0.5`; the x axis is `epoch` when
//! present, else the record index. Axes carry tick marks but no labels.

use std::path::Path;

use image::{Rgb, RgbImage};

use crate::error::{io_err, Error, Result};

pub const WIDTH: u32 = 640;
pub const HEIGHT: u32 = 400;
const MARGIN: u32 = 40;

/// `(x, y)` points of the chosen field, in file order.
pub fn read_series(text: &str, field: Option<&str>) -> Result<(String, Vec<(f64, f64)>)> {
    let records: Vec<serde_json::Value> = text
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(serde_json::from_str)
        .collect::<std::result::Result<_, _>>()?;
    let first = records
        .first()
        .ok_or_else(|| Error::Format("log has no records".into()))?;
    let field = match field {
        Some(f) => f.to_string(),
        None if first.get("loss").is_some() => "loss".into(),
        None => "mAP@0.5".into(),
    };
    let pts = records
        .iter()
        .enumerate()
        .filter_map(|(i, r)| {
            let y = r.get(&field)?.as_f64()?;
            let x = r.get("epoch").and_then(|e| e.as_f64()).unwrap_or(i as f64);
            Some((x, y))
        })
        .collect::<Vec<_>>();
    if pts.is_empty() {
        return Err(Error::Format(format!("no numeric {field:?} values in log")));
    }
    Ok((field, pts))
}

pub fn render(points: &[(f64, f64)]) -> RgbImage {
    let mut img = RgbImage::from_pixel(WIDTH, HEIGHT, Rgb([255, 255, 255]));
    let axis = Rgb([0, 0, 0]);
    let (x0, y0, x1, y1) = (MARGIN, MARGIN, WIDTH - MARGIN, HEIGHT - MARGIN);
    for x in x0..=x1 {
        img.put_pixel(x, y1, axis);
    }
    for y in y0..=y1 {
        img.put_pixel(x0, y, axis);
    }
    for i in 0..=10 {
        let tx = x0 + (x1 - x0) * i / 10;
        let ty = y0 + (y1 - y0) * i / 10;
        for d in 0..5 {
            img.put_pixel(tx, y1 + d, axis);
            img.put_pixel(x0 - d, ty, axis);
        }
    }
    let (mut xmin, mut xmax, mut ymin, mut ymax) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
    for &(x, y) in points {
        xmin = xmin.min(x);
        xmax = xmax.max(x);
        ymin = ymin.min(y);
        ymax = ymax.max(y);
    }
    let span = |lo: f64, hi: f64| if hi > lo { hi - lo } else { 1.0 };
    let (sx, sy) = (span(xmin, xmax), span(ymin, ymax));
    let to_px = |(x, y): (f64, f64)| {
        let px = x0 as f64 + (x - xmin) / sx * (x1 - x0) as f64;
        let py = y1 as f64 - (y - ymin) / sy * (y1 - y0) as f64;
        (px, py)
    };
    let line = Rgb([31, 119, 180]);
    let pts: Vec<(f64, f64)> = points.iter().map(|&p| to_px(p)).collect();
    for w in pts.windows(2) {
        let (a, b) = (w[0], w[1]);
        let steps = ((b.0 - a.0).abs().max((b.1 - a.1).abs()).ceil() as usize).max(1);
        for k in 0..=steps {
            let t = k as f64 / steps as f64;
            let (x, y) = (a.0 + t * (b.0 - a.0), a.1 + t * (b.1 - a.1));
            img.put_pixel(x.round() as u32, y.round() as u32, line);
        }
    }
    for &(x, y) in &pts {
        for dy in -1i32..=1 {
            for dx in -1i32..=1 {
                img.put_pixel((x.round() as i32 + dx) as u32, (y.round() as i32 + dy) as u32, line);
            }
        }
    }
    img
}

/// Reads `log` and writes the chart to `out`; returns the plotted field.
pub fn plot_log(log: &Path, out: &Path, field: Option<&str>) -> Result<String> {
    let text = std::fs::read_to_string(log).map_err(io_err(log))?;
    let (field, pts) = read_series(&text, field)?;
    render(&pts).save(out)?;
    Ok(field)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn picks_loss_and_epoch() {
        let log = "{\"epoch\":0,\"loss\":2.0}\n{\"epoch\":1,\"loss\":1.0}\n";
        let (f, pts) = read_series(log, None).unwrap();
        assert_eq!(f, "loss");
        assert_eq!(pts, vec![(0.0, 2.0), (1.0, 1.0)]);
        let img = render(&pts);
        assert_eq!(img.dimensions(), (WIDTH, HEIGHT));
        assert_eq!(*img.get_pixel(MARGIN, MARGIN), Rgb([31, 119, 180]));
    }

    #[test]
    fn rejects_empty_or_missing() {
        assert!(read_series("", None).is_err());
        assert!(read_series("{\"x\":1}\n", None).is_err());
        let (_, p) = read_series("{\"mAP@0.5\":0.5}\n", None).unwrap();
        assert_eq!(p, vec![(0.0, 0.5)]);
    }
}
