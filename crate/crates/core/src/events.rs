//! Event stream model, fixed-duration chunking and voxel-grid rasterisation.

use ehdr_tensor::{Scalar, Tensor};

use crate::error::{EhdrError, Result};

/// Temporal bins of every voxel grid fed to the network.
pub const VOXEL_BINS: usize = 5;

/// A single brightness-change event. `p` is `+1` or `-1`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Event {
    pub t: u64,
    pub x: u16,
    pub y: u16,
    pub p: i8,
}

impl Event {
    pub fn new(t: u64, x: u16, y: u16, p: i8) -> Self {
        debug_assert!(p == 1 || p == -1, "polarity must be +-1");
        Self { t, x, y, p }
    }

    /// Deterministic total order used whenever streams are merged: time, then y, x, polarity.
    pub fn sort_key(&self) -> (u64, u16, u16, i8) {
        (self.t, self.y, self.x, self.p)
    }
}

/// Time-sorted events of one sensor.
#[derive(Clone, Debug, PartialEq)]
pub struct EventStream {
    pub width: u16,
    pub height: u16,
    events: Vec<Event>,
}

impl EventStream {
    pub fn new(width: u16, height: u16, events: Vec<Event>) -> Result<Self> {
        for (i, e) in events.iter().enumerate() {
            if e.x >= width || e.y >= height {
                return Err(EhdrError::input(format!(
                    "event {i} at ({}, {}) lies outside the {width}x{height} sensor",
                    e.x, e.y
                )));
            }
            if e.p != 1 && e.p != -1 {
                return Err(EhdrError::input(format!("event {i} has polarity {}", e.p)));
            }
            if i > 0 && events[i - 1].t > e.t {
                return Err(EhdrError::input(format!("event {i} breaks time ordering")));
            }
        }
        Ok(Self {
            width,
            height,
            events,
        })
    }

    pub fn empty(width: u16, height: u16) -> Self {
        Self {
            width,
            height,
            events: Vec::new(),
        }
    }

    pub fn events(&self) -> &[Event] {
        &self.events
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    /// Events with `t0 <= t < t1`.
    pub fn window(&self, t0: u64, t1: u64) -> &[Event] {
        let lo = self.events.partition_point(|e| e.t < t0);
        let hi = self.events.partition_point(|e| e.t < t1);
        &self.events[lo..hi.max(lo)]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    Forward,
    /// Chunks run from `t0` toward `t1` as a time-reversed, polarity-negated stream.
    Backward,
}

/// Events of one window `[t_start, t_start + duration)`.
///
/// Backward chunks store mirrored timestamps `t_start + (t_start + duration - 1 - t)`.
#[derive(Clone, Debug, PartialEq)]
pub struct EventChunk {
    pub t_start: u64,
    pub duration: u64,
    pub width: u16,
    pub height: u16,
    pub events: Vec<Event>,
}

/// Splits `[min(t0, t1), max(t0, t1))` into consecutive `tau`-long chunks ordered from `t0`
/// toward `t1`. The chunk reaching `t1` is truncated when `tau` does not divide the window.
pub fn chunk_stream(
    stream: &EventStream,
    t0: u64,
    t1: u64,
    tau: u64,
    direction: Direction,
) -> Result<Vec<EventChunk>> {
    if t0 == t1 {
        return Err(EhdrError::input("chunk window is empty (t0 == t1)"));
    }
    if tau == 0 {
        return Err(EhdrError::input("chunk duration must be positive"));
    }
    let span = t0.abs_diff(t1);
    let count = span.div_ceil(tau);
    let mut chunks = Vec::with_capacity(count as usize);
    for i in 0..count {
        let near = i * tau;
        let far = ((i + 1) * tau).min(span);
        let (lo, hi) = if t1 > t0 {
            (t0 + near, t0 + far)
        } else {
            (t0 - far, t0 - near)
        };
        let raw = stream.window(lo, hi);
        let events = match direction {
            Direction::Forward => raw.to_vec(),
            Direction::Backward => {
                let mut mirrored: Vec<Event> = raw
                    .iter()
                    .map(|e| Event::new(lo + (hi - 1 - e.t), e.x, e.y, -e.p))
                    .collect();
                mirrored.sort_by_key(Event::sort_key);
                mirrored
            }
        };
        chunks.push(EventChunk {
            t_start: lo,
            duration: hi - lo,
            width: stream.width,
            height: stream.height,
            events,
        });
    }
    Ok(chunks)
}

/// Signed event mass in `bins x height x width` cells.
#[derive(Clone, Debug, PartialEq)]
pub struct VoxelGrid {
    pub bins: usize,
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
}

impl VoxelGrid {
    pub fn zeros(bins: usize, width: usize, height: usize) -> Self {
        Self {
            bins,
            width,
            height,
            data: vec![0.0; bins * width * height],
        }
    }

    pub fn get(&self, bin: usize, x: usize, y: usize) -> f32 {
        self.data[(bin * self.height + y) * self.width + x]
    }

    pub fn total_mass(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum()
    }

    /// `1 x bins x H x W` tensor.
    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        Tensor::from_fn(&[1, self.bins, self.height, self.width], |i| {
            T::of(self.data[i] as f64)
        })
    }
}

/// Deposits each event's polarity into its two temporally nearest bins with linear weights.
pub fn voxelize(chunk: &EventChunk) -> VoxelGrid {
    voxelize_bins(chunk, VOXEL_BINS)
}

pub fn voxelize_bins(chunk: &EventChunk, bins: usize) -> VoxelGrid {
    let (w, h) = (chunk.width as usize, chunk.height as usize);
    let mut grid = VoxelGrid::zeros(bins, w, h);
    if chunk.duration == 0 || bins == 0 {
        return grid;
    }
    let scale = (bins - 1) as f64 / chunk.duration as f64;
    for e in &chunk.events {
        let ts = (e.t.saturating_sub(chunk.t_start)) as f64 * scale;
        let lower = (ts.floor() as usize).min(bins - 1);
        let frac = ts - lower as f64;
        let pixel = e.y as usize * w + e.x as usize;
        let p = e.p as f64;
        grid.data[lower * w * h + pixel] += (p * (1.0 - frac)) as f32;
        if frac > 0.0 && lower + 1 < bins {
            grid.data[(lower + 1) * w * h + pixel] += (p * frac) as f32;
        }
    }
    grid
}

/// Events per frame interval within `[t0, t1)`.
pub fn event_rate(stream: &EventStream, t0: u64, t1: u64, frame_interval_us: u64) -> Result<f64> {
    if t1 <= t0 || frame_interval_us == 0 {
        return Err(EhdrError::input("event_rate needs t1 > t0 and a positive frame interval"));
    }
    let intervals = (t1 - t0) as f64 / frame_interval_us as f64;
    Ok(stream.window(t0, t1).len() as f64 / intervals)
}
