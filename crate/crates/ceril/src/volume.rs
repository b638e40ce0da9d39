//! Dense discretizations of an event-stream segment.
//!
//! A [`VoxelGrid`] bins events by polarity, time bin and pixel; an
//! [`AggregatedEventImage`] collapses the time axis over one interval.
//! Channel 0 counts positive events, channel 1 negative events. Binning is
//! half-open: an event exactly on a bin boundary belongs to the later bin,
//! and an event at `t_end` is rejected.

use crate::events::Event;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum VolumeError {
    #[error("invalid interval: [{0}, {1})")]
    BadInterval(f64, f64),
    #[error("event at t={0} outside [{1}, {2})")]
    EventOutOfRange(f64, f64, f64),
    #[error("event pixel ({0}, {1}) outside {2}x{3} grid")]
    PixelOutOfRange(u16, u16, usize, usize),
    #[error("sample time {0} outside [{1}, {2})")]
    SampleOutOfRange(f64, f64, f64),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Dense [2 polarities, D time bins, H, W] grid of event counts.
#[derive(Debug, Clone, PartialEq)]
pub struct VoxelGrid {
    pub width: usize,
    pub height: usize,
    pub bins: usize,
    /// Counts in [2, D, H, W] layout.
    pub counts: Vec<u32>,
    pub t_start: f64,
    pub t_end: f64,
}

impl VoxelGrid {
    pub fn zeros(width: usize, height: usize, bins: usize, t_start: f64, t_end: f64) -> Self {
        VoxelGrid {
            width,
            height,
            bins,
            counts: vec![0; 2 * bins * width * height],
            t_start,
            t_end,
        }
    }

    fn index(&self, polarity_channel: usize, bin: usize, y: usize, x: usize) -> usize {
        ((polarity_channel * self.bins + bin) * self.height + y) * self.width + x
    }

    pub fn count(&self, polarity_channel: usize, bin: usize, y: usize, x: usize) -> u32 {
        self.counts[self.index(polarity_channel, bin, y, x)]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().map(|&c| u64::from(c)).sum()
    }

    /// Copy of one time bin as a [2, H, W] slice.
    pub fn bin_slice(&self, bin: usize) -> Vec<u32> {
        let plane = self.width * self.height;
        let mut out = Vec::with_capacity(2 * plane);
        for channel in 0..2 {
            let start = (channel * self.bins + bin) * plane;
            out.extend_from_slice(&self.counts[start..start + plane]);
        }
        out
    }

    /// Flat binary debug dump: eight u32 little-endian header words (magic,
    /// version, 2, D, H, W, reserved, reserved) followed by f32 counts in
    /// [2, D, H, W] order.
    pub fn write_debug_dump(&self, path: &Path) -> Result<(), VolumeError> {
        let mut buf = Vec::with_capacity(32 + self.counts.len() * 4);
        let header: [u32; 8] = [
            u32::from_le_bytes(*b"CVOX"),
            1,
            2,
            self.bins as u32,
            self.height as u32,
            self.width as u32,
            0,
            0,
        ];
        for word in header {
            buf.extend_from_slice(&word.to_le_bytes());
        }
        for &c in &self.counts {
            buf.extend_from_slice(&(c as f32).to_le_bytes());
        }
        std::fs::write(path, buf)?;
        Ok(())
    }
}

/// Per-interval event counts with positive and negative polarities as
/// separate channels: [2, H, W].
#[derive(Debug, Clone, PartialEq)]
pub struct AggregatedEventImage {
    pub width: usize,
    pub height: usize,
    pub counts: Vec<u32>,
    pub t_start: f64,
    pub t_end: f64,
}

fn polarity_channel(polarity: i8) -> usize {
    if polarity >= 0 {
        0
    } else {
        1
    }
}

fn bin_of(t: f64, t_start: f64, t_end: f64, bins: usize) -> usize {
    let raw = (bins as f64 * (t - t_start) / (t_end - t_start)).floor() as usize;
    raw.min(bins - 1)
}

/// Bin events into a `D`-bin voxel grid over [t_start, t_end).
pub fn encode_volume(
    events: &[Event],
    t_start: f64,
    t_end: f64,
    bins: usize,
    width: usize,
    height: usize,
) -> Result<VoxelGrid, VolumeError> {
    if !(t_end > t_start) || bins == 0 {
        return Err(VolumeError::BadInterval(t_start, t_end));
    }
    let mut grid = VoxelGrid::zeros(width, height, bins, t_start, t_end);
    for e in events {
        if e.t < t_start || e.t >= t_end {
            return Err(VolumeError::EventOutOfRange(e.t, t_start, t_end));
        }
        if usize::from(e.x) >= width || usize::from(e.y) >= height {
            return Err(VolumeError::PixelOutOfRange(e.x, e.y, width, height));
        }
        let bin = bin_of(e.t, t_start, t_end, bins);
        let idx = grid.index(
            polarity_channel(e.polarity),
            bin,
            usize::from(e.y),
            usize::from(e.x),
        );
        grid.counts[idx] += 1;
    }
    Ok(grid)
}

/// Accumulate events of each polarity per pixel over [t_start, t_end).
/// Equals a one-bin voxel grid collapsed over the bin axis.
pub fn aggregate_frame(
    events: &[Event],
    t_start: f64,
    t_end: f64,
    width: usize,
    height: usize,
) -> Result<AggregatedEventImage, VolumeError> {
    let grid = encode_volume(events, t_start, t_end, 1, width, height)?;
    Ok(AggregatedEventImage {
        width,
        height,
        counts: grid.counts,
        t_start,
        t_end,
    })
}

/// The [2, H, W] spatial slice of the bin containing `t`.
pub fn sample_state(volume: &VoxelGrid, t: f64) -> Result<Vec<u32>, VolumeError> {
    if t < volume.t_start || t >= volume.t_end {
        return Err(VolumeError::SampleOutOfRange(t, volume.t_start, volume.t_end));
    }
    let bin = bin_of(t, volume.t_start, volume.t_end, volume.bins);
    Ok(volume.bin_slice(bin))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ev(x: u16, y: u16, polarity: i8, t: f64) -> Event {
        Event { x, y, polarity, t }
    }

    #[test]
    fn empty_stream_gives_zero_grid() {
        let g = encode_volume(&[], 0.0, 1.0, 4, 8, 8).unwrap();
        assert_eq!(g.total(), 0);
    }

    #[test]
    fn boundary_event_lands_in_bin_zero() {
        let g = encode_volume(&[ev(2, 3, 1, 0.0)], 0.0, 1.0, 4, 8, 8).unwrap();
        assert_eq!(g.count(0, 0, 3, 2), 1);
        assert_eq!(g.total(), 1);
    }

    #[test]
    fn midpoint_goes_to_later_bin() {
        let g = encode_volume(&[ev(0, 0, 1, 0.5)], 0.0, 1.0, 2, 4, 4).unwrap();
        assert_eq!(g.count(0, 1, 0, 0), 1);
        assert_eq!(g.count(0, 0, 0, 0), 0);
    }

    #[test]
    fn event_at_end_is_rejected() {
        assert!(encode_volume(&[ev(0, 0, 1, 1.0)], 0.0, 1.0, 2, 4, 4).is_err());
        assert!(encode_volume(&[ev(0, 0, 1, -0.1)], 0.0, 1.0, 2, 4, 4).is_err());
    }

    #[test]
    fn aggregate_equals_collapsed_volume() {
        let events = vec![
            ev(1, 1, 1, 0.1),
            ev(1, 1, 1, 0.9),
            ev(2, 3, -1, 0.5),
            ev(0, 0, -1, 0.25),
        ];
        let img = aggregate_frame(&events, 0.0, 1.0, 4, 4).unwrap();
        assert_eq!(img.counts[1 * 4 + 1], 2); // channel 0, pixel (1,1)
        let d4 = encode_volume(&events, 0.0, 1.0, 4, 4, 4).unwrap();
        // Collapse bins of the D=4 grid.
        let plane = 16;
        for channel in 0..2 {
            for p in 0..plane {
                let collapsed: u32 = (0..4).map(|b| d4.counts[(channel * 4 + b) * plane + p]).sum();
                assert_eq!(collapsed, img.counts[channel * plane + p]);
            }
        }
    }

    #[test]
    fn sample_state_picks_bins() {
        let events = vec![ev(0, 0, 1, 0.1), ev(1, 0, -1, 0.7)];
        let g = encode_volume(&events, 0.0, 1.0, 2, 2, 1).unwrap();
        let first = sample_state(&g, 0.0).unwrap();
        assert_eq!(first[0], 1); // channel 0, (0,0)
        let second = sample_state(&g, 0.5).unwrap();
        assert_eq!(second[2 + 1], 1); // channel 1, (0,1)
        assert!(sample_state(&g, 1.0).is_err());
        // Brute-force bin index agreement on random times.
        for k in 0..100 {
            let t = k as f64 / 100.0;
            let expected = ((2.0 * t).floor() as usize).min(1);
            let slice = sample_state(&g, t).unwrap();
            let direct = g.bin_slice(expected);
            assert_eq!(slice, direct);
        }
    }

    proptest! {
        #[test]
        fn conservation_and_refinement(
            raw in proptest::collection::vec((0u16..8, 0u16..8, prop_oneof![Just(1i8), Just(-1i8)], 0.0f64..1.0), 0..200),
            d in 1usize..6,
        ) {
            let events: Vec<Event> = raw.iter().map(|&(x, y, p, t)| ev(x, y, p, t)).collect();
            let coarse = encode_volume(&events, 0.0, 1.0, d, 8, 8).unwrap();
            prop_assert_eq!(coarse.total(), events.len() as u64);
            let fine = encode_volume(&events, 0.0, 1.0, 2 * d, 8, 8).unwrap();
            prop_assert_eq!(fine.total(), events.len() as u64);
            // A D-bin grid equals the 2D-bin grid with adjacent bins summed.
            let plane = 64;
            for channel in 0..2 {
                for bin in 0..d {
                    for p in 0..plane {
                        let merged = fine.counts[(channel * 2 * d + 2 * bin) * plane + p]
                            + fine.counts[(channel * 2 * d + 2 * bin + 1) * plane + p];
                        prop_assert_eq!(coarse.counts[(channel * d + bin) * plane + p], merged);
                    }
                }
            }
        }
    }

    #[test]
    fn debug_dump_has_header() {
        let g = encode_volume(&[ev(0, 0, 1, 0.1)], 0.0, 1.0, 2, 4, 4).unwrap();
        let dir = std::env::temp_dir().join("ceril_voxel_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("grid.bin");
        g.write_debug_dump(&path).unwrap();
        let data = std::fs::read(&path).unwrap();
        assert_eq!(&data[0..4], b"CVOX");
        assert_eq!(data.len(), 32 + 2 * 2 * 4 * 4 * 4);
        std::fs::remove_file(&path).ok();
    }
}
