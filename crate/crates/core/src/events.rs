//! Event generation: intensity sequences to polarity event streams.
//!
//! A pixel emits an event whenever its log intensity has moved by at least
//! the contrast threshold `C` since the last event at that pixel; the stored
//! reference then advances by `p * C`, so one large jump can emit several
//! events within a single frame. Timestamps are integer frame indices.

use std::io::{BufRead, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Additive floor inside the brightness logarithm.
pub const LOG_INTENSITY_EPS: f64 = 1e-3;
/// Default contrast threshold in feature-log space.
pub const DEFAULT_CONTRAST: f64 = 0.30;

/// A single polarity event.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Event {
    /// Pixel column.
    pub x: u32,
    /// Pixel row.
    pub y: u32,
    /// Frame index.
    pub t: u32,
    /// Polarity, exactly -1 or +1.
    pub p: i8,
}

/// Events ordered by `(t, y, x)`.
#[derive(Clone, Debug, Default)]
pub struct EventStream {
    pub events: Vec<Event>,
}

impl EventStream {
    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }
}

/// Per-pixel reference state of the event generator.
#[derive(Clone, Debug)]
pub struct EgmState {
    /// Log intensity at the last event per pixel, row-major `[rows, cols]`.
    pub last_log_intensity: Vec<f64>,
    pub rows: usize,
    pub cols: usize,
    /// Contrast threshold, strictly positive.
    pub contrast_threshold: f64,
}

impl EgmState {
    pub fn new(first_log_frame: &[f64], rows: usize, cols: usize, c: f64) -> Result<Self> {
        if c <= 0.0 {
            return Err(Error::NumericDomain {
                op: "egm",
                detail: format!("contrast threshold must be > 0, got {c}"),
            });
        }
        if first_log_frame.len() != rows * cols {
            return Err(Error::ShapeMismatch {
                op: "egm",
                left: vec![rows, cols],
                right: vec![first_log_frame.len()],
            });
        }
        Ok(EgmState {
            last_log_intensity: first_log_frame.to_vec(),
            rows,
            cols,
            contrast_threshold: c,
        })
    }
}

/// Dense grid form of an event stream: signed polarity at occupied cells,
/// exactly zero elsewhere. Shape is `[t, rows, cols]` or `[t, cols]`.
#[derive(Clone, Debug)]
pub struct EventGrid {
    tensor: Tensor,
}

impl EventGrid {
    pub fn tensor(&self) -> &Tensor {
        &self.tensor
    }

    pub fn shape(&self) -> &[usize] {
        self.tensor.shape()
    }

    /// Wrap an existing tensor, checking the `{-1, 0, +1}` invariant.
    pub fn from_tensor(tensor: Tensor) -> Result<Self> {
        for v in tensor.data() {
            if *v != -1.0 && *v != 0.0 && *v != 1.0 {
                return Err(Error::contract(format!(
                    "event grid entries must be in {{-1, 0, +1}}, found {v}"
                )));
            }
        }
        Ok(EventGrid { tensor })
    }

    pub fn count_nonzero(&self) -> usize {
        self.tensor.data().iter().filter(|v| **v != 0.0).count()
    }
}

/// Log of brightness with an additive epsilon floor.
///
/// Rejects negative input; intensities are non-negative by contract.
pub fn log_intensity(frame: &[f64]) -> Result<Vec<f64>> {
    for v in frame {
        if *v < 0.0 {
            return Err(Error::NumericDomain {
                op: "log_intensity",
                detail: format!("negative brightness {v}"),
            });
        }
    }
    Ok(frame.iter().map(|v| (v + LOG_INTENSITY_EPS).ln()).collect())
}

/// One frame of intensities as a `rows x cols` grid.
#[derive(Clone, Debug)]
pub struct Frame {
    pub data: Vec<f64>,
    pub rows: usize,
    pub cols: usize,
}

impl Frame {
    pub fn new(data: Vec<f64>, rows: usize, cols: usize) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::ShapeMismatch {
                op: "frame",
                left: vec![rows, cols],
                right: vec![data.len()],
            });
        }
        Ok(Frame { data, rows, cols })
    }
}

/// Convert a frame sequence into an event stream.
///
/// The reference log intensity is initialized from frame 0; frames `1..`
/// each emit `floor`-many events per pixel while the accumulated change
/// still reaches the threshold. The stream comes out ordered by `(t, y, x)`.
pub fn generate_events(frames: &[Frame], c: f64) -> Result<EventStream> {
    if frames.len() < 2 {
        return Err(Error::contract(format!(
            "event generation needs at least 2 frames, got {}",
            frames.len()
        )));
    }
    let (rows, cols) = (frames[0].rows, frames[0].cols);
    for f in frames {
        if f.rows != rows || f.cols != cols {
            return Err(Error::ShapeMismatch {
                op: "generate_events",
                left: vec![rows, cols],
                right: vec![f.rows, f.cols],
            });
        }
    }

    let first_log = log_intensity(&frames[0].data)?;
    let mut state = EgmState::new(&first_log, rows, cols, c)?;
    let mut events = Vec::new();
    for (t, frame) in frames.iter().enumerate().skip(1) {
        let log_frame = log_intensity(&frame.data)?;
        for y in 0..rows {
            for x in 0..cols {
                let idx = y * cols + x;
                let target = log_frame[idx];
                loop {
                    let delta = target - state.last_log_intensity[idx];
                    if delta.abs() < c {
                        break;
                    }
                    let p: i8 = if delta >= 0.0 { 1 } else { -1 };
                    events.push(Event {
                        x: x as u32,
                        y: y as u32,
                        t: t as u32,
                        p,
                    });
                    state.last_log_intensity[idx] += f64::from(p) * c;
                }
            }
        }
    }
    Ok(EventStream { events })
}

/// Rasterize a stream onto a dense `[t, rows, cols]` grid. Later events at
/// the same cell within the same frame overwrite earlier ones.
pub fn rasterize(stream: &EventStream, t_len: usize, rows: usize, cols: usize) -> Result<EventGrid> {
    let mut data = vec![0.0; t_len * rows * cols];
    for e in &stream.events {
        let (x, y, t) = (e.x as usize, e.y as usize, e.t as usize);
        if t >= t_len || y >= rows || x >= cols {
            return Err(Error::IndexOutOfRange {
                op: "rasterize",
                index: t.max(y).max(x),
                shape: vec![t_len, rows, cols],
            });
        }
        data[t * rows * cols + y * cols + x] = f64::from(e.p);
    }
    let tensor = Tensor::new(data, vec![t_len, rows, cols])?;
    Ok(EventGrid { tensor })
}

/// Event generation over a feature sequence `[t, d]`: each feature dimension
/// is one pixel, each row one frame, with `|feature|` as pseudo-brightness.
pub fn feature_egm(features: &Tensor, c: f64) -> Result<EventGrid> {
    let shape = features.shape();
    if shape.len() != 2 {
        return Err(Error::ShapeMismatch {
            op: "feature_egm",
            left: shape.to_vec(),
            right: vec![0, 0],
        });
    }
    let (t_len, d) = (shape[0], shape[1]);
    if t_len < 2 {
        return Err(Error::contract(format!(
            "feature_egm needs at least 2 frames, got {t_len}"
        )));
    }
    let frames: Vec<Frame> = (0..t_len)
        .map(|t| {
            let row: Vec<f64> = features.data()[t * d..(t + 1) * d]
                .iter()
                .map(|v| v.abs())
                .collect();
            Frame::new(row, 1, d)
        })
        .collect::<Result<_>>()?;
    let stream = generate_events(&frames, c)?;
    let grid = rasterize(&stream, t_len, 1, d)?;
    let flat = grid.tensor.reshape(vec![t_len, d])?;
    Ok(EventGrid { tensor: flat })
}

/// Write a stream as text lines `t x y p`, sorted by `t`.
pub fn write_stream<W: Write>(stream: &EventStream, mut w: W) -> Result<()> {
    for e in &stream.events {
        writeln!(w, "{} {} {} {}", e.t, e.x, e.y, e.p)
            .map_err(|err| Error::io("<event stream>", err))?;
    }
    Ok(())
}

pub fn write_stream_file(stream: &EventStream, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    write_stream(stream, std::io::BufWriter::new(file))
}

/// Parse a `t x y p` text stream.
pub fn read_stream<R: BufRead>(r: R) -> Result<EventStream> {
    let mut events = Vec::new();
    for (lineno, line) in r.lines().enumerate() {
        let line = line.map_err(|e| Error::io("<event stream>", e))?;
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        let fields: Vec<&str> = trimmed.split_whitespace().collect();
        if fields.len() != 4 {
            return Err(Error::data(format!(
                "event stream line {}: expected 4 fields, got {}",
                lineno + 1,
                fields.len()
            )));
        }
        let parse_u32 = |s: &str| -> Result<u32> {
            s.parse()
                .map_err(|_| Error::data(format!("event stream line {}: bad field {s:?}", lineno + 1)))
        };
        let t = parse_u32(fields[0])?;
        let x = parse_u32(fields[1])?;
        let y = parse_u32(fields[2])?;
        let p: i8 = fields[3]
            .parse()
            .map_err(|_| Error::data(format!("event stream line {}: bad polarity", lineno + 1)))?;
        if p != 1 && p != -1 {
            return Err(Error::data(format!(
                "event stream line {}: polarity must be -1 or +1",
                lineno + 1
            )));
        }
        events.push(Event { x, y, t, p });
    }
    Ok(EventStream { events })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn frame1(v: &[f64]) -> Frame {
        Frame::new(v.to_vec(), 1, v.len()).unwrap()
    }

    #[test]
    fn log_intensity_constant_frame() {
        let out = log_intensity(&[1.0, 1.0]).unwrap();
        for v in out {
            assert!((v - 1.001f64.ln()).abs() < 1e-12);
            assert!((v - 9.995e-4).abs() < 1e-6);
        }
    }

    #[test]
    fn log_intensity_zero_hits_floor() {
        let out = log_intensity(&[0.0]).unwrap();
        assert!((out[0] - (-6.9078)).abs() < 1e-4);
    }

    #[test]
    fn log_intensity_rejects_negative() {
        assert!(log_intensity(&[-0.5]).is_err());
    }

    #[test]
    fn constant_video_emits_nothing() {
        let frames = vec![frame1(&[0.4, 0.7]); 5];
        let stream = generate_events(&frames, 0.3).unwrap();
        assert!(stream.is_empty());
    }

    #[test]
    fn single_threshold_crossing() {
        // Log sequence 0.00, 0.15, 0.35 per pixel with C = 0.30: one +1 event
        // at t = 2, reference advances to 0.30.
        let to_intensity = |log: f64| log.exp() - LOG_INTENSITY_EPS;
        let frames = vec![
            frame1(&[to_intensity(0.0)]),
            frame1(&[to_intensity(0.15)]),
            frame1(&[to_intensity(0.35)]),
        ];
        let stream = generate_events(&frames, 0.30).unwrap();
        assert_eq!(stream.len(), 1);
        assert_eq!(stream.events[0], Event { x: 0, y: 0, t: 2, p: 1 });
    }

    #[test]
    fn large_jump_emits_two_events_same_frame() {
        let to_intensity = |log: f64| log.exp() - LOG_INTENSITY_EPS;
        let frames = vec![frame1(&[to_intensity(0.0)]), frame1(&[to_intensity(0.65)])];
        let stream = generate_events(&frames, 0.30).unwrap();
        assert_eq!(stream.len(), 2);
        assert!(stream.events.iter().all(|e| e.p == 1 && e.t == 1));
    }

    #[test]
    fn mismatched_frames_are_rejected() {
        let frames = vec![frame1(&[1.0, 2.0]), frame1(&[1.0])];
        assert!(generate_events(&frames, 0.3).is_err());
    }

    #[test]
    fn rasterize_empty_stream_is_all_zero() {
        let grid = rasterize(&EventStream::default(), 2, 2, 2).unwrap();
        assert!(grid.tensor().data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn rasterize_single_write() {
        let stream = EventStream {
            events: vec![Event { x: 1, y: 0, t: 0, p: -1 }],
        };
        let grid = rasterize(&stream, 1, 2, 2).unwrap();
        assert_eq!(grid.tensor().data(), &[0.0, -1.0, 0.0, 0.0]);
    }

    #[test]
    fn rasterize_rejects_out_of_range() {
        let stream = EventStream {
            events: vec![Event { x: 5, y: 0, t: 0, p: 1 }],
        };
        assert!(rasterize(&stream, 1, 2, 2).is_err());
    }

    #[test]
    fn feature_egm_constant_sequence_is_zero_grid() {
        let feats = Tensor::new(vec![0.3; 8], vec![4, 2]).unwrap();
        let grid = feature_egm(&feats, 0.3).unwrap();
        assert_eq!(grid.count_nonzero(), 0);
        assert_eq!(grid.shape(), &[4, 2]);
    }

    #[test]
    fn feature_egm_needs_two_frames() {
        let feats = Tensor::new(vec![0.3; 2], vec![1, 2]).unwrap();
        assert!(feature_egm(&feats, 0.3).is_err());
    }

    #[test]
    fn feature_egm_step_produces_positive_events() {
        // Row 0 near zero, row 1 large: log-space jump exceeds C.
        let feats = Tensor::new(vec![0.0, 0.0, 5.0, 5.0], vec![2, 2]).unwrap();
        let grid = feature_egm(&feats, 0.3).unwrap();
        let d = grid.tensor().data();
        assert_eq!(&d[0..2], &[0.0, 0.0]);
        assert_eq!(&d[2..4], &[1.0, 1.0]);
    }

    #[test]
    fn stream_text_round_trip() {
        let stream = EventStream {
            events: vec![
                Event { x: 1, y: 0, t: 0, p: 1 },
                Event { x: 0, y: 2, t: 3, p: -1 },
            ],
        };
        let mut buf = Vec::new();
        write_stream(&stream, &mut buf).unwrap();
        let back = read_stream(std::io::Cursor::new(buf)).unwrap();
        assert_eq!(back.events, stream.events);
    }
}
