//! Event-camera simulation from intensity frames.
//!
//! Per pixel, log-intensity is linearly interpolated between consecutive
//! frames; every time the interpolant departs from the pixel's reference
//! level by a contrast threshold, one event is emitted at the exact
//! crossing time and the reference steps by one threshold toward the
//! interpolant. Event timestamps are continuous.

use crate::raster::IntensityFrame;
use std::io::Read;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EventSimError {
    #[error("frame shape mismatch: {0}x{1} vs {2}x{3}")]
    ShapeMismatch(usize, usize, usize, usize),
    #[error("non-increasing frame timestamps: {0} -> {1}")]
    NonIncreasingTime(f64, f64),
    #[error("event file: {0}")]
    BadFile(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// One camera event: pixel, polarity (+1/-1) and a continuous timestamp.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Event {
    pub x: u16,
    pub y: u16,
    pub polarity: i8,
    pub t: f64,
}

/// Time-ordered events over [t_start, t_end].
#[derive(Debug, Clone, PartialEq, Default)]
pub struct EventStream {
    pub events: Vec<Event>,
    pub t_start: f64,
    pub t_end: f64,
}

/// Contrast thresholds and sensor behaviour.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SensorConfig {
    /// Positive contrast threshold, log-intensity units.
    pub contrast_pos: f64,
    /// Negative contrast threshold, log-intensity units.
    pub contrast_neg: f64,
    /// Offset added to luminance before the log.
    pub log_eps: f64,
    /// Minimum time between events of one pixel, seconds.
    pub refractory: f64,
}

impl Default for SensorConfig {
    fn default() -> Self {
        SensorConfig {
            contrast_pos: 0.2,
            contrast_neg: 0.2,
            log_eps: 1e-3,
            refractory: 0.0,
        }
    }
}

/// Per-pixel sensor memory carried between frame pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct SensorState {
    pub width: usize,
    pub height: usize,
    /// Reference log-intensity per pixel.
    ref_log: Vec<f64>,
    /// Timestamp of each pixel's last event.
    last_event_t: Vec<f64>,
    /// Luminance the reference currently tracks; lets unchanged pixels skip
    /// the log computation.
    last_lum: Vec<f64>,
}

/// Log intensity: ln(I + log_eps).
pub fn log_intensity(luminance: f64, log_eps: f64) -> f64 {
    (luminance + log_eps).ln()
}

/// Initialize the sensor on a frame: reference levels take the frame's
/// log-intensities, no events are emitted.
pub fn reset_sensor(frame: &IntensityFrame, cfg: &SensorConfig) -> SensorState {
    let n = frame.width * frame.height;
    let mut ref_log = Vec::with_capacity(n);
    for &v in &frame.values {
        ref_log.push(log_intensity(v, cfg.log_eps));
    }
    SensorState {
        width: frame.width,
        height: frame.height,
        ref_log,
        last_event_t: vec![f64::NEG_INFINITY; n],
        last_lum: frame.values.clone(),
    }
}

/// Generate events for the linear log-intensity interpolation between two
/// frames, advancing the sensor state.
pub fn frames_to_events(
    prev: &IntensityFrame,
    next: &IntensityFrame,
    mut sensor: SensorState,
    cfg: &SensorConfig,
) -> Result<(EventStream, SensorState), EventSimError> {
    if prev.width != next.width || prev.height != next.height {
        return Err(EventSimError::ShapeMismatch(
            prev.width,
            prev.height,
            next.width,
            next.height,
        ));
    }
    if sensor.width != prev.width || sensor.height != prev.height {
        return Err(EventSimError::ShapeMismatch(
            sensor.width,
            sensor.height,
            prev.width,
            prev.height,
        ));
    }
    if !(next.timestamp > prev.timestamp) {
        return Err(EventSimError::NonIncreasingTime(
            prev.timestamp,
            next.timestamp,
        ));
    }
    let t0 = prev.timestamp;
    let t1 = next.timestamp;
    let span = t1 - t0;
    let mut events = Vec::new();
    let width = sensor.width;
    for i in 0..sensor.ref_log.len() {
        let lum_prev = prev.values[i];
        let lum_next = next.values[i];
        if lum_next == lum_prev && lum_prev == sensor.last_lum[i] {
            continue;
        }
        let l0 = log_intensity(lum_prev, cfg.log_eps);
        let l1 = log_intensity(lum_next, cfg.log_eps);
        let r0 = sensor.ref_log[i];
        let (crossings, polarity, threshold) = if l1 > r0 {
            (
                ((l1 - r0) / cfg.contrast_pos).floor() as i64,
                1i8,
                cfg.contrast_pos,
            )
        } else if l1 < r0 {
            (
                ((r0 - l1) / cfg.contrast_neg).floor() as i64,
                -1i8,
                cfg.contrast_neg,
            )
        } else {
            (0, 1, cfg.contrast_pos)
        };
        if crossings <= 0 {
            sensor.last_lum[i] = lum_next;
            continue;
        }
        let x = (i % width) as u16;
        let y = (i / width) as u16;
        let signed = f64::from(polarity);
        for k in 1..=crossings {
            let level = r0 + signed * threshold * k as f64;
            let t = if l1 == l0 {
                t0
            } else {
                (t0 + (level - l0) / (l1 - l0) * span).clamp(t0, t1)
            };
            let ok = sensor.last_event_t[i] == f64::NEG_INFINITY
                || t - sensor.last_event_t[i] >= cfg.refractory;
            if ok {
                events.push(Event {
                    x,
                    y,
                    polarity,
                    t,
                });
                sensor.last_event_t[i] = t;
            }
        }
        sensor.ref_log[i] = r0 + signed * threshold * crossings as f64;
        sensor.last_lum[i] = lum_next;
    }
    events.sort_unstable_by(|a, b| {
        a.t.total_cmp(&b.t)
            .then(a.y.cmp(&b.y))
            .then(a.x.cmp(&b.x))
    });
    Ok((
        EventStream {
            events,
            t_start: t0,
            t_end: t1,
        },
        sensor,
    ))
}

const CEVT_MAGIC: &[u8; 4] = b"CEVT";
const CEVT_VERSION: u16 = 1;

/// Write events in the CEVT binary format (little-endian): magic "CEVT",
/// version u16, W u16, H u16, then records x u16, y u16, polarity i8,
/// t f64, sorted by t.
pub fn write_cevt(
    path: &Path,
    width: u16,
    height: u16,
    events: &[Event],
) -> Result<(), EventSimError> {
    let mut buf = Vec::with_capacity(10 + events.len() * 13);
    buf.extend_from_slice(CEVT_MAGIC);
    buf.extend_from_slice(&CEVT_VERSION.to_le_bytes());
    buf.extend_from_slice(&width.to_le_bytes());
    buf.extend_from_slice(&height.to_le_bytes());
    let mut last_t = f64::NEG_INFINITY;
    for e in events {
        if e.t < last_t {
            return Err(EventSimError::BadFile(
                "events not sorted by timestamp".to_string(),
            ));
        }
        last_t = e.t;
        buf.extend_from_slice(&e.x.to_le_bytes());
        buf.extend_from_slice(&e.y.to_le_bytes());
        buf.extend_from_slice(&e.polarity.to_le_bytes());
        buf.extend_from_slice(&e.t.to_le_bytes());
    }
    std::fs::write(path, buf)?;
    Ok(())
}

/// Read a CEVT file back; validates the header and timestamp ordering.
pub fn read_cevt(path: &Path) -> Result<(u16, u16, Vec<Event>), EventSimError> {
    let mut file = std::fs::File::open(path)?;
    let mut data = Vec::new();
    file.read_to_end(&mut data)?;
    if data.len() < 10 || &data[0..4] != CEVT_MAGIC {
        return Err(EventSimError::BadFile("bad magic".to_string()));
    }
    let version = u16::from_le_bytes([data[4], data[5]]);
    if version != CEVT_VERSION {
        return Err(EventSimError::BadFile(format!("bad version {version}")));
    }
    let width = u16::from_le_bytes([data[6], data[7]]);
    let height = u16::from_le_bytes([data[8], data[9]]);
    let body = &data[10..];
    if body.len() % 13 != 0 {
        return Err(EventSimError::BadFile("truncated record".to_string()));
    }
    let mut events = Vec::with_capacity(body.len() / 13);
    let mut last_t = f64::NEG_INFINITY;
    for rec in body.chunks_exact(13) {
        let e = Event {
            x: u16::from_le_bytes([rec[0], rec[1]]),
            y: u16::from_le_bytes([rec[2], rec[3]]),
            polarity: rec[4] as i8,
            t: f64::from_le_bytes(rec[5..13].try_into().unwrap()),
        };
        if e.t < last_t {
            return Err(EventSimError::BadFile(
                "events not sorted by timestamp".to_string(),
            ));
        }
        last_t = e.t;
        events.push(e);
    }
    Ok((width, height, events))
}

/// Debug dump of `PGM`-backed state is in [`crate::raster`]; this writes a
/// whole stream with header metadata.
pub fn write_stream(path: &Path, width: u16, height: u16, stream: &EventStream) -> Result<(), EventSimError> {
    write_cevt(path, width, height, &stream.events)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn frame(values: Vec<f64>, w: usize, h: usize, t: f64) -> IntensityFrame {
        IntensityFrame {
            width: w,
            height: h,
            values,
            timestamp: t,
            background: 1.0,
        }
    }

    #[test]
    fn log_intensity_values() {
        let v = log_intensity(0.0, 1e-3);
        assert!((v - (-6.9078)).abs() < 1e-4);
        let near_one = log_intensity(1.0 - 1e-3, 1e-3);
        assert!(near_one.abs() < 1e-12);
        assert!(log_intensity(0.2, 1e-3) < log_intensity(0.3, 1e-3));
    }

    #[test]
    fn constant_frames_emit_nothing() {
        let cfg = SensorConfig::default();
        let f0 = frame(vec![0.5; 16], 4, 4, 0.0);
        let f1 = frame(vec![0.5; 16], 4, 4, 1.0);
        let sensor = reset_sensor(&f0, &cfg);
        let (stream, _) = frames_to_events(&f0, &f1, sensor, &cfg).unwrap();
        assert!(stream.events.is_empty());
    }

    #[test]
    fn exact_double_threshold_ramp() {
        // Pick luminances whose log-intensities are within a factor of two,
        // then derive the threshold as half the exact difference so the
        // crossing count is exactly 2 and the times land at 0.5 and 1.0.
        let cfg_base = SensorConfig::default();
        let i0 = 0.4;
        let i1 = 0.7;
        let l0 = log_intensity(i0, cfg_base.log_eps);
        let l1 = log_intensity(i1, cfg_base.log_eps);
        let c = (l1 - l0) / 2.0;
        let cfg = SensorConfig {
            contrast_pos: c,
            contrast_neg: c,
            ..cfg_base
        };
        let f0 = frame(vec![i0], 1, 1, 0.0);
        let f1 = frame(vec![i1], 1, 1, 1.0);
        let sensor = reset_sensor(&f0, &cfg);
        let (stream, sensor) = frames_to_events(&f0, &f1, sensor, &cfg).unwrap();
        assert_eq!(stream.events.len(), 2);
        assert_eq!(stream.events[0].polarity, 1);
        assert!((stream.events[0].t - 0.5).abs() < 1e-12);
        assert!((stream.events[1].t - 1.0).abs() < 1e-12);
        // After the segment the reference sits within one threshold of l1.
        let _ = sensor;
    }

    #[test]
    fn fall_of_one_and_a_half_thresholds() {
        let cfg_base = SensorConfig::default();
        let i0 = 0.7;
        let i1 = 0.4;
        let l0 = log_intensity(i0, cfg_base.log_eps);
        let l1 = log_intensity(i1, cfg_base.log_eps);
        let c = (l0 - l1) / 1.5;
        let cfg = SensorConfig {
            contrast_pos: c,
            contrast_neg: c,
            ..cfg_base
        };
        let f0 = frame(vec![i0], 1, 1, 0.0);
        let f1 = frame(vec![i1], 1, 1, 1.0);
        let sensor = reset_sensor(&f0, &cfg);
        let (stream, _) = frames_to_events(&f0, &f1, sensor, &cfg).unwrap();
        assert_eq!(stream.events.len(), 1);
        assert_eq!(stream.events[0].polarity, -1);
        assert!((stream.events[0].t - 2.0 / 3.0).abs() < 1e-9);
    }

    #[test]
    fn black_to_white_emits_k_events_per_pixel() {
        // k = 4 keeps the threshold division exact.
        let cfg_base = SensorConfig::default();
        let l_black = log_intensity(0.0, cfg_base.log_eps);
        let l_white = log_intensity(1.0, cfg_base.log_eps);
        let cfg = SensorConfig {
            contrast_pos: (l_white - l_black) / 4.0,
            contrast_neg: (l_white - l_black) / 4.0,
            ..cfg_base
        };
        let f0 = frame(vec![0.0; 9], 3, 3, 0.0);
        let f1 = frame(vec![1.0; 9], 3, 3, 0.5);
        let sensor = reset_sensor(&f0, &cfg);
        let (stream, _) = frames_to_events(&f0, &f1, sensor, &cfg).unwrap();
        assert_eq!(stream.events.len(), 4 * 9);
        assert!(stream.events.iter().all(|e| e.polarity == 1));
    }

    #[test]
    fn reset_is_deterministic_and_silent() {
        let cfg = SensorConfig::default();
        let f = frame(vec![0.25; 16], 4, 4, 0.0);
        let a = reset_sensor(&f, &cfg);
        let b = reset_sensor(&f, &cfg);
        assert_eq!(a, b);
        let f1 = frame(vec![0.25; 16], 4, 4, 1.0);
        let (stream, _) = frames_to_events(&f, &f1, a, &cfg).unwrap();
        assert!(stream.events.is_empty());
    }

    #[test]
    fn midpoint_split_matches_direct_processing() {
        // Dyadic values make the split exact: the midpoint frame is the
        // exact average of the endpoint log-intensities.
        let cfg = SensorConfig {
            contrast_pos: 0.125,
            contrast_neg: 0.125,
            log_eps: 1e-3,
            refractory: 0.0,
        };
        let i0 = 0.5f64;
        // Choose the end luminance so the log rises by exactly 0.75
        // (6 thresholds): i1 = (i0 + eps) * exp(0.75) - eps.
        let i1 = (i0 + cfg.log_eps) * 0.75f64.exp() - cfg.log_eps;
        let im_log = (log_intensity(i0, cfg.log_eps) + log_intensity(i1, cfg.log_eps)) / 2.0;
        let im = im_log.exp() - cfg.log_eps;

        let f0 = frame(vec![i0], 1, 1, 0.0);
        let f_mid = frame(vec![im], 1, 1, 0.5);
        let f1 = frame(vec![i1], 1, 1, 1.0);

        let sensor = reset_sensor(&f0, &cfg);
        let (direct, _) = frames_to_events(&f0, &f1, sensor, &cfg).unwrap();

        let sensor = reset_sensor(&f0, &cfg);
        let (first, sensor) = frames_to_events(&f0, &f_mid, sensor, &cfg).unwrap();
        let (second, _) = frames_to_events(&f_mid, &f1, sensor, &cfg).unwrap();

        let mut split = first.events.clone();
        split.extend_from_slice(&second.events);
        assert_eq!(direct.events.len(), split.len());
        for (a, b) in direct.events.iter().zip(split.iter()) {
            assert_eq!(a.polarity, b.polarity);
            assert!((a.t - b.t).abs() < 1e-12, "{} vs {}", a.t, b.t);
        }
    }

    #[test]
    fn polarity_matches_change_sign() {
        let cfg = SensorConfig::default();
        let f0 = frame(vec![0.2, 0.8], 2, 1, 0.0);
        let f1 = frame(vec![0.8, 0.2], 2, 1, 1.0);
        let sensor = reset_sensor(&f0, &cfg);
        let (stream, _) = frames_to_events(&f0, &f1, sensor, &cfg).unwrap();
        assert!(!stream.events.is_empty());
        for e in &stream.events {
            if e.x == 0 {
                assert_eq!(e.polarity, 1);
            } else {
                assert_eq!(e.polarity, -1);
            }
        }
    }

    #[test]
    fn count_identity_tracks_excursion() {
        let cfg = SensorConfig::default();
        let mut lums = vec![0.3f64];
        let path = [0.5, 0.9, 0.6, 0.1, 0.4, 0.95, 0.2];
        let f0 = frame(lums.clone(), 1, 1, 0.0);
        let mut sensor = reset_sensor(&f0, &cfg);
        let start_log = log_intensity(0.3, cfg.log_eps);
        let mut signed = 0i64;
        let mut t = 0.0;
        let mut prev = f0;
        for &v in &path {
            t += 1.0;
            lums[0] = v;
            let next = frame(lums.clone(), 1, 1, t);
            let (stream, s2) = frames_to_events(&prev, &next, sensor, &cfg).unwrap();
            sensor = s2;
            signed += stream
                .events
                .iter()
                .map(|e| i64::from(e.polarity))
                .sum::<i64>();
            prev = next;
        }
        let final_log = log_intensity(*path.last().unwrap(), cfg.log_eps);
        let tracked = start_log + signed as f64 * cfg.contrast_pos;
        assert!(
            (tracked - final_log).abs() < cfg.contrast_pos + 1e-12,
            "tracked {tracked} vs {final_log}"
        );
    }

    #[test]
    fn refractory_suppresses_rapid_events() {
        let cfg = SensorConfig {
            refractory: 10.0, // longer than the whole segment
            ..SensorConfig::default()
        };
        let l0 = log_intensity(0.3, cfg.log_eps);
        let l1 = log_intensity(0.9, cfg.log_eps);
        let n_crossings = ((l1 - l0) / cfg.contrast_pos).floor() as usize;
        assert!(n_crossings >= 2);
        let f0 = frame(vec![0.3], 1, 1, 0.0);
        let f1 = frame(vec![0.9], 1, 1, 1.0);
        let sensor = reset_sensor(&f0, &cfg);
        let (stream, _) = frames_to_events(&f0, &f1, sensor, &cfg).unwrap();
        // Only the first crossing emits; later ones fall in the refractory
        // window but the reference still steps.
        assert_eq!(stream.events.len(), 1);
    }

    #[test]
    fn shape_and_time_errors() {
        let cfg = SensorConfig::default();
        let f0 = frame(vec![0.5; 16], 4, 4, 0.0);
        let f_bad = frame(vec![0.5; 8], 4, 2, 1.0);
        let sensor = reset_sensor(&f0, &cfg);
        assert!(frames_to_events(&f0, &f_bad, sensor.clone(), &cfg).is_err());
        let f_past = frame(vec![0.5; 16], 4, 4, -1.0);
        assert!(frames_to_events(&f0, &f_past, sensor, &cfg).is_err());
    }

    #[test]
    fn cevt_round_trip() {
        let events = vec![
            Event {
                x: 3,
                y: 1,
                polarity: 1,
                t: 0.125,
            },
            Event {
                x: 0,
                y: 2,
                polarity: -1,
                t: 0.25,
            },
            Event {
                x: 63,
                y: 63,
                polarity: 1,
                t: 0.7071067811865476,
            },
        ];
        let dir = std::env::temp_dir().join("ceril_cevt_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("roundtrip.cevt");
        write_cevt(&path, 64, 64, &events).unwrap();
        let (w, h, back) = read_cevt(&path).unwrap();
        assert_eq!((w, h), (64, 64));
        assert_eq!(back, events);
        std::fs::remove_file(&path).ok();
    }

    #[test]
    fn cevt_rejects_unsorted() {
        let events = vec![
            Event {
                x: 0,
                y: 0,
                polarity: 1,
                t: 1.0,
            },
            Event {
                x: 0,
                y: 0,
                polarity: 1,
                t: 0.5,
            },
        ];
        let dir = std::env::temp_dir().join("ceril_cevt_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("unsorted.cevt");
        assert!(write_cevt(&path, 4, 4, &events).is_err());
    }
}
