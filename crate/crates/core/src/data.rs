//! Episodic observation stores, preprocessing, triple sampling and probe
//! splits.
//!
//! The `OBSV` container is little-endian:
//!
//! ```text
//! "OBSV" · version u8 (=1) · flags u8 (bit0 = has_actions) · H u16 · W u16
//! · C u8 · reserved u8 (=0) · n_episodes u32
//! · per episode: n_frames u32 · n_frames·H·W·C bytes (row-major, channel-last)
//!                · [n_frames action bytes, when has_actions]
//! ```

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::augment::Image;
use crate::diffcore::{Cursor, Tensor};
use crate::error::{Error, Result};
use crate::resample;

const MAGIC: &[u8; 4] = b"OBSV";
const VERSION: u8 = 1;
const FLAG_ACTIONS: u8 = 1;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Episode {
    /// `n_frames · H · W · C` bytes, channel-last.
    pub frames: Vec<u8>,
    pub actions: Option<Vec<u8>>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ObservationStore {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub has_actions: bool,
    pub episodes: Vec<Episode>,
}

impl ObservationStore {
    pub fn new(height: usize, width: usize, channels: usize, has_actions: bool) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 || height > u16::MAX as usize || width > u16::MAX as usize || channels > u8::MAX as usize {
            return Err(Error::contract(format!("unsupported frame shape {height}×{width}×{channels}")));
        }
        Ok(Self {
            height,
            width,
            channels,
            has_actions,
            episodes: Vec::new(),
        })
    }

    pub fn frame_len(&self) -> usize {
        self.height * self.width * self.channels
    }

    /// Appends an episode given as channel-last frames.
    pub fn push_episode(&mut self, frames: Vec<u8>, actions: Option<Vec<u8>>) -> Result<()> {
        let fl = self.frame_len();
        if frames.is_empty() || frames.len() % fl != 0 {
            return Err(Error::contract(format!(
                "episode of {} bytes is not a positive multiple of the frame size {fl}",
                frames.len()
            )));
        }
        let n = frames.len() / fl;
        match (&actions, self.has_actions) {
            (Some(a), true) if a.len() == n => {}
            (None, false) => {}
            (Some(a), true) => {
                return Err(Error::contract(format!("{} actions for {n} frames", a.len())))
            }
            _ => return Err(Error::contract("actions must be present iff the store carries them")),
        }
        self.episodes.push(Episode { frames, actions });
        Ok(())
    }

    pub fn episode_lengths(&self) -> Vec<usize> {
        self.episodes.iter().map(|e| e.frames.len() / self.frame_len()).collect()
    }

    pub fn total_frames(&self) -> usize {
        self.episode_lengths().iter().sum()
    }

    pub fn frame_bytes(&self, episode: usize, t: usize) -> &[u8] {
        let fl = self.frame_len();
        &self.episodes[episode].frames[t * fl..(t + 1) * fl]
    }

    pub fn action(&self, episode: usize, t: usize) -> Option<u8> {
        self.episodes[episode].actions.as_ref().map(|a| a[t])
    }

    /// Frame as a `C×H×W` image scaled to `[0, 1]`.
    pub fn frame(&self, episode: usize, t: usize) -> Image {
        let (h, w, c) = (self.height, self.width, self.channels);
        let src = self.frame_bytes(episode, t);
        let mut data = vec![0.0f32; c * h * w];
        for (i, px) in src.chunks(c).enumerate() {
            for (ch, &v) in px.iter().enumerate() {
                data[ch * h * w + i] = v as f32 / 255.0;
            }
        }
        Tensor::new(vec![c, h, w], data).expect("sized above")
    }

    pub fn write_to(&self, w: &mut impl Write) -> std::io::Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&[VERSION, if self.has_actions { FLAG_ACTIONS } else { 0 }])?;
        w.write_all(&(self.height as u16).to_le_bytes())?;
        w.write_all(&(self.width as u16).to_le_bytes())?;
        w.write_all(&[self.channels as u8, 0])?;
        w.write_all(&(self.episodes.len() as u32).to_le_bytes())?;
        let fl = self.frame_len();
        for e in &self.episodes {
            w.write_all(&((e.frames.len() / fl) as u32).to_le_bytes())?;
            w.write_all(&e.frames)?;
            if let Some(a) = &e.actions {
                w.write_all(a)?;
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut v = Vec::new();
        self.write_to(&mut v).expect("writing to a Vec cannot fail");
        v
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Cursor { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::format(0, "bad magic, expected OBSV"));
        }
        let version = r.take(1)?[0];
        if version != VERSION {
            return Err(Error::format(4, format!("unsupported version {version}")));
        }
        let flags = r.take(1)?[0];
        if flags & !FLAG_ACTIONS != 0 {
            return Err(Error::format(5, format!("unknown flag bits {flags:#04x}")));
        }
        let h = r.u16()? as usize;
        let w = r.u16()? as usize;
        let c = r.take(1)?[0] as usize;
        if h == 0 || w == 0 || c == 0 {
            return Err(Error::format(6, format!("empty frame shape {h}×{w}×{c}")));
        }
        if r.take(1)?[0] != 0 {
            return Err(Error::format(11, "reserved byte must be zero"));
        }
        let n_episodes = r.u32()?;
        let mut store = ObservationStore::new(h, w, c, flags & FLAG_ACTIONS != 0)?;
        let fl = store.frame_len();
        for _ in 0..n_episodes {
            let at = r.pos as u64;
            let n = r.u32()? as usize;
            if n == 0 {
                return Err(Error::format(at, "episode with zero frames"));
            }
            let size = n.checked_mul(fl).ok_or_else(|| Error::format(at, "episode size overflows"))?;
            let frames = r.take(size)?.to_vec();
            let actions = if store.has_actions {
                Some(r.take(n)?.to_vec())
            } else {
                None
            };
            store.episodes.push(Episode { frames, actions });
        }
        if r.pos != bytes.len() {
            return Err(Error::format(r.pos as u64, "trailing bytes after last episode"));
        }
        Ok(store)
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PixelRange {
    /// Values in `[0, 255]`.
    Byte,
    /// Values in `[0, 1]`.
    Unit,
}

/// A raw channel-last image before preprocessing.
#[derive(Clone, Debug)]
pub struct RawImage {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f32>,
    pub range: PixelRange,
}

/// Resizes to `out × out` (bilinear), optionally converts to luminance, and
/// scales to `[0, 1]`. Returns `C×out×out` with `C = 1` when `grayscale`.
/// Stacking consecutive frames into one observation is the caller's job,
/// see [`stack_frames`].
pub fn preprocess(raw: &RawImage, out: usize, grayscale: bool) -> Result<Image> {
    let (h, w, c) = (raw.height, raw.width, raw.channels);
    if h == 0 || w == 0 || c == 0 || raw.data.len() != h * w * c || out == 0 {
        return Err(Error::contract(format!(
            "cannot preprocess a {h}×{w}×{c} image with {} values",
            raw.data.len()
        )));
    }
    let divisor = match raw.range {
        PixelRange::Byte => 255.0,
        PixelRange::Unit => 1.0,
    };
    let mut planes: Vec<Vec<f32>> = (0..c)
        .map(|ch| (0..h * w).map(|i| raw.data[i * c + ch] / divisor).collect())
        .collect();
    if grayscale && c == 3 {
        let lum = (0..h * w)
            .map(|i| 0.299 * planes[0][i] + 0.587 * planes[1][i] + 0.114 * planes[2][i])
            .collect();
        planes = vec![lum];
    } else if grayscale && c != 1 {
        let lum = (0..h * w)
            .map(|i| planes.iter().map(|p| p[i]).sum::<f32>() / c as f32)
            .collect();
        planes = vec![lum];
    }
    let mut data = Vec::with_capacity(planes.len() * out * out);
    for p in &planes {
        let resized = if h == out && w == out {
            p.clone()
        } else {
            resample::resize_plane(p, w, 0, 0, h, w, out, out)
        };
        data.extend(resized.into_iter().map(|v| v.clamp(0.0, 1.0)));
    }
    Tensor::new(vec![planes.len(), out, out], data)
}

/// Stacks single-channel frames (oldest first) into one multi-channel
/// observation.
pub fn stack_frames(frames: &[Image]) -> Result<Image> {
    let first = frames.first().ok_or_else(|| Error::contract("no frames to stack"))?;
    let (h, w) = (first.shape()[1], first.shape()[2]);
    let mut data = Vec::with_capacity(frames.len() * h * w);
    for f in frames {
        if f.shape() != [1, h, w] {
            return Err(Error::Shape {
                op: "stack_frames",
                lhs: vec![1, h, w],
                rhs: f.shape().to_vec(),
            });
        }
        data.extend_from_slice(f.data());
    }
    Tensor::new(vec![frames.len(), h, w], data)
}

/// Converts a `C×H×W` image in `[0, 1]` to channel-last bytes.
pub fn image_to_bytes(img: &Image) -> Vec<u8> {
    let s = img.shape();
    let (c, hw) = (s[0], s[1] * s[2]);
    let d = img.data();
    let mut out = Vec::with_capacity(c * hw);
    for i in 0..hw {
        for ch in 0..c {
            out.push((d[ch * hw + i].clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    out
}

/// Three consecutive observations centered at `center` in `episode`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Triple {
    pub episode: usize,
    pub center: usize,
}

impl Triple {
    /// `(x_{t−1}, x_t, x_{t+1})`.
    pub fn frames(&self, store: &ObservationStore) -> [Image; 3] {
        [
            store.frame(self.episode, self.center - 1),
            store.frame(self.episode, self.center),
            store.frame(self.episode, self.center + 1),
        ]
    }
}

/// Every center index with a full triple inside its episode.
pub fn valid_triples(store: &ObservationStore) -> Vec<Triple> {
    store
        .episode_lengths()
        .into_iter()
        .enumerate()
        .flat_map(|(episode, len)| (1..len.saturating_sub(1)).map(move |center| Triple { episode, center }))
        .collect()
}

/// Draws triples for pretraining.
pub struct TripleSampler {
    triples: Vec<Triple>,
}

impl TripleSampler {
    pub fn new(store: &ObservationStore) -> Result<Self> {
        let triples = valid_triples(store);
        if triples.is_empty() {
            return Err(Error::contract("store has no episode of length ≥ 3"));
        }
        Ok(Self { triples })
    }

    pub fn len(&self) -> usize {
        self.triples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.triples.is_empty()
    }

    /// One epoch: every valid triple exactly once, shuffled.
    pub fn epoch(&self, rng: &mut impl Rng) -> Vec<Triple> {
        let mut order = self.triples.clone();
        order.shuffle(rng);
        order
    }

    /// `batch_size` independent uniform draws.
    pub fn sample(&self, batch_size: usize, rng: &mut impl Rng) -> Vec<Triple> {
        (0..batch_size)
            .map(|_| self.triples[rng.random_range(0..self.triples.len())])
            .collect()
    }
}

/// Frame indices and action labels for probing.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProbeSet {
    pub frames: Vec<(usize, usize)>,
    pub labels: Vec<usize>,
}

impl ProbeSet {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn images(&self, store: &ObservationStore) -> Vec<Image> {
        self.frames.iter().map(|&(e, t)| store.frame(e, t)).collect()
    }
}

/// Disjoint, seed-determined train/test split over all frames.
pub fn probe_split(store: &ObservationStore, train_n: usize, test_n: usize, rng: &mut impl Rng) -> Result<(ProbeSet, ProbeSet)> {
    if !store.has_actions {
        return Err(Error::contract("probing needs a store with actions"));
    }
    let mut all: Vec<(usize, usize)> = store
        .episode_lengths()
        .into_iter()
        .enumerate()
        .flat_map(|(e, n)| (0..n).map(move |t| (e, t)))
        .collect();
    if train_n + test_n > all.len() {
        return Err(Error::contract(format!(
            "split of {train_n} + {test_n} exceeds {} frames",
            all.len()
        )));
    }
    all.shuffle(rng);
    let make = |idx: &[(usize, usize)]| ProbeSet {
        frames: idx.to_vec(),
        labels: idx
            .iter()
            .map(|&(e, t)| store.action(e, t).expect("store has actions") as usize)
            .collect(),
    };
    Ok((make(&all[..train_n]), make(&all[train_n..train_n + test_n])))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SyntheticKind {
    /// A white dot on black, drifting rightwards (wrapping) and bouncing
    /// vertically; each observation stacks three consecutive frames, action =
    /// quadrant of the dot in the newest frame.
    Dots,
    /// Independent uniform noise per frame, random actions.
    Noise,
}

impl std::str::FromStr for SyntheticKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dots" => Ok(Self::Dots),
            "noise" => Ok(Self::Noise),
            other => Err(Error::config("synthetic.kind", format!("unknown kind `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub kind: SyntheticKind,
    pub episodes: usize,
    pub episode_len: usize,
    pub size: usize,
    pub dot_radius: usize,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            kind: SyntheticKind::Dots,
            episodes: 20,
            episode_len: 102,
            size: 84,
            dot_radius: 6,
        }
    }
}

/// Generates a deterministic synthetic store with 3-channel observations.
pub fn gen_synthetic(spec: &SyntheticSpec, rng: &mut impl Rng) -> Result<ObservationStore> {
    let s = spec.size;
    if s < 4 || spec.episode_len == 0 {
        return Err(Error::config("synthetic", "size must be ≥ 4 and episodes non-empty"));
    }
    let mut store = ObservationStore::new(s, s, 3, true)?;
    for _ in 0..spec.episodes {
        let n = spec.episode_len;
        let mut frames = Vec::with_capacity(n * s * s * 3);
        let mut actions = Vec::with_capacity(n);
        match spec.kind {
            SyntheticKind::Noise => {
                for _ in 0..n * s * s * 3 {
                    frames.push(rng.random::<u8>());
                }
                for _ in 0..n {
                    actions.push(rng.random_range(0..4u8));
                }
            }
            SyntheticKind::Dots => {
                let sf = s as f64;
                let mut x = rng.random::<f64>() * sf;
                let mut y = rng.random::<f64>() * sf;
                let vx = sf / 28.0 * (1.0 + rng.random::<f64>());
                let mut vy = sf / 42.0 * (2.0 * rng.random::<f64>() - 1.0);
                // Positions for frames -2..n so every observation stacks three.
                let mut pos = Vec::with_capacity(n + 2);
                for _ in 0..n + 2 {
                    pos.push((x, y));
                    x = (x + vx).rem_euclid(sf);
                    y += vy;
                    if y < 0.0 || y >= sf {
                        vy = -vy;
                        y = y.clamp(0.0, sf - 1e-9);
                    }
                }
                let planes: Vec<Vec<u8>> = pos.iter().map(|&(px, py)| dot_plane(s, px, py, spec.dot_radius)).collect();
                for t in 0..n {
                    for i in 0..s * s {
                        for k in 0..3 {
                            frames.push(planes[t + k][i]);
                        }
                    }
                    let (px, py) = pos[t + 2];
                    actions.push(((py >= sf / 2.0) as u8) * 2 + (px >= sf / 2.0) as u8);
                }
            }
        }
        store.push_episode(frames, Some(actions))?;
    }
    Ok(store)
}

/// A black plane with a white disc of radius `r` centred at `(cx, cy)`.
fn dot_plane(s: usize, cx: f64, cy: f64, r: usize) -> Vec<u8> {
    let mut p = vec![0; s * s];
    let r2 = (r * r) as f64;
    for y in 0..s {
        for x in 0..s {
            let dy = y as f64 + 0.5 - cy;
            let dx = x as f64 + 0.5 - cx;
            if dx * dx + dy * dy <= r2 {
                p[y * s + x] = 255;
            }
        }
    }
    p
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_store(lengths: &[usize]) -> ObservationStore {
        let mut s = ObservationStore::new(4, 4, 3, true).unwrap();
        for (e, &n) in lengths.iter().enumerate() {
            let frames: Vec<u8> = (0..n * 48).map(|i| (i * 7 + e * 13) as u8).collect();
            let actions: Vec<u8> = (0..n).map(|t| (t % 3) as u8).collect();
            s.push_episode(frames, Some(actions)).unwrap();
        }
        s
    }

    #[test]
    fn roundtrip_keeps_episodes() {
        let s = small_store(&[5, 3]);
        let back = ObservationStore::from_bytes(&s.to_bytes()).unwrap();
        assert_eq!(back, s);
        assert_eq!(back.episode_lengths(), vec![5, 3]);
    }

    #[test]
    fn header_corruption_rejected() {
        let bytes = small_store(&[5, 3]).to_bytes();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(ObservationStore::from_bytes(&bad), Err(Error::Format { offset: 0, .. })));
        let mut bad = bytes.clone();
        bad[4] = 2;
        assert!(matches!(ObservationStore::from_bytes(&bad), Err(Error::Format { offset: 4, .. })));
        assert!(ObservationStore::from_bytes(&bytes[..bytes.len() - 1]).is_err());
    }

    #[test]
    fn frames_are_channel_first_scaled() {
        let s = small_store(&[3]);
        let f = s.frame(0, 1);
        assert_eq!(f.shape(), &[3, 4, 4]);
        let raw = s.frame_bytes(0, 1);
        assert_eq!(f.data()[16 + 2], raw[2 * 3 + 1] as f32 / 255.0);
    }

    #[test]
    fn triple_counts() {
        assert_eq!(valid_triples(&small_store(&[3])).len(), 1);
        assert_eq!(valid_triples(&small_store(&[5, 3])).len(), 4);
        assert!(TripleSampler::new(&small_store(&[2, 1])).is_err());
    }

    #[test]
    fn epoch_covers_each_center_once() {
        let store = small_store(&[6, 4, 3]);
        let sampler = TripleSampler::new(&store).unwrap();
        let mut epoch = sampler.epoch(&mut ChaCha8Rng::seed_from_u64(1));
        epoch.sort();
        assert_eq!(epoch, valid_triples(&store));
    }

    #[test]
    fn triple_frames_are_exact() {
        let store = small_store(&[5]);
        let t = Triple { episode: 0, center: 2 };
        let [a, b, c] = t.frames(&store);
        assert_eq!(a, store.frame(0, 1));
        assert_eq!(b, store.frame(0, 2));
        assert_eq!(c, store.frame(0, 3));
    }

    #[test]
    fn probe_split_is_disjoint_and_seeded() {
        let store = small_store(&[5, 3]);
        let (tr, te) = probe_split(&store, 5, 3, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let mut all: Vec<_> = tr.frames.iter().chain(&te.frames).copied().collect();
        all.sort();
        all.dedup();
        assert_eq!(all.len(), 8);
        let again = probe_split(&store, 5, 3, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        assert_eq!((tr, te), again);
        assert!(probe_split(&store, 6, 3, &mut ChaCha8Rng::seed_from_u64(2)).is_err());
        let mut no_actions = ObservationStore::new(4, 4, 3, false).unwrap();
        no_actions.push_episode(vec![0; 48 * 3], None).unwrap();
        assert!(probe_split(&no_actions, 1, 1, &mut ChaCha8Rng::seed_from_u64(2)).is_err());
    }

    #[test]
    fn preprocess_contracts() {
        let raw = RawImage {
            height: 210,
            width: 160,
            channels: 3,
            data: vec![255.0; 210 * 160 * 3],
            range: PixelRange::Byte,
        };
        let out = preprocess(&raw, 84, true).unwrap();
        assert_eq!(out.shape(), &[1, 84, 84]);
        assert!(out.data().iter().all(|&v| (v - 1.0).abs() < 1e-6));

        let g: Vec<f32> = (0..84 * 84).map(|i| (i % 256) as f32).collect();
        let raw = RawImage {
            height: 84,
            width: 84,
            channels: 1,
            data: g.clone(),
            range: PixelRange::Byte,
        };
        let out = preprocess(&raw, 84, true).unwrap();
        for (a, b) in out.data().iter().zip(&g) {
            assert_eq!(*a, b / 255.0);
        }
        let empty = RawImage {
            height: 0,
            width: 0,
            channels: 1,
            data: vec![],
            range: PixelRange::Unit,
        };
        assert!(preprocess(&empty, 84, false).is_err());
    }

    #[test]
    fn synthetic_dots_shape_and_actions() {
        let spec = SyntheticSpec {
            episodes: 2,
            episode_len: 10,
            size: 32,
            ..SyntheticSpec::default()
        };
        let a = gen_synthetic(&spec, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let b = gen_synthetic(&spec, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.episode_lengths(), vec![10, 10]);
        assert!(a.episodes.iter().flat_map(|e| e.actions.as_ref().unwrap()).all(|&x| x < 4));
        // consecutive observations share two frames: channel k+1 of t equals channel k of t+1
        let (f0, f1) = (a.frame(0, 3), a.frame(0, 4));
        let hw = 32 * 32;
        assert_eq!(&f0.data()[hw..2 * hw], &f1.data()[..hw]);
    }
}
