//! Magnitude-aware clipping state.
//!
//! Each layer keeps one clipping scale per output channel. Every backward
//! pass updates it from the current channel statistics: Gaussian channels take
//! `s = |g|_max`, Inverted-T channels follow `s_t = (1 − kA)·s_{t−1} + A·|g|_max,t`.
//! A channel seen for the first time starts at `|g|_max`.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quant::QuantScale;
use crate::stats::{ChannelStats, DistributionClass};
use crate::tensor::ByteReader;

/// Hyper-parameters of the clipping strategy and the discriminator threshold.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MCSHyper {
    pub k: f32,
    #[serde(rename = "A")]
    pub a: f32,
    pub lambda: f32,
    /// Accept `k·A > 1`, where the recurrence coefficient `1 − kA` is negative.
    pub allow_oscillation: bool,
}

impl Default for MCSHyper {
    fn default() -> Self {
        MCSHyper {
            k: 1.0,
            a: 0.8,
            lambda: 0.3,
            allow_oscillation: false,
        }
    }
}

impl MCSHyper {
    pub fn new(k: f32, a: f32, lambda: f32) -> Result<Self> {
        let h = MCSHyper {
            k,
            a,
            lambda,
            allow_oscillation: false,
        };
        h.validate()?;
        Ok(h)
    }

    pub fn with_oscillation(mut self, allow: bool) -> Self {
        self.allow_oscillation = allow;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.k > 0.0 && self.k.is_finite()) {
            return Err(Error::Config(format!("k must be positive, got {}", self.k)));
        }
        if !(self.a > 0.0 && self.a <= 1.0) {
            return Err(Error::Config(format!("A must lie in (0, 1], got {}", self.a)));
        }
        if !(self.lambda > 0.0 && self.lambda < 1.0) {
            return Err(Error::Config(format!("lambda must lie in (0, 1), got {}", self.lambda)));
        }
        let decay = self.decay();
        if decay < 0.0 && !self.allow_oscillation {
            return Err(Error::Config(format!(
                "1 - k*A = {decay} is negative (k = {}, A = {}); the recurrence oscillates in sign. \
                 Set allow_oscillation to run it anyway",
                self.k, self.a
            )));
        }
        if decay <= -1.0 {
            return Err(Error::Config(format!("1 - k*A = {decay} makes the recurrence diverge")));
        }
        Ok(())
    }

    /// Recurrence coefficient `1 − kA`.
    pub fn decay(&self) -> f32 {
        1.0 - self.k * self.a
    }
}

/// New scale for one channel.
///
/// Fails with [`Error::DegenerateSlice`] when `stats.g_max` is not positive.
pub fn update_channel_scale(
    prev: Option<f32>,
    stats: &ChannelStats,
    class: DistributionClass,
    hyper: &MCSHyper,
) -> Result<f32> {
    if !(stats.g_max > 0.0) {
        return Err(Error::DegenerateSlice);
    }
    let s = match (prev, class) {
        (None, _) | (_, DistributionClass::Gaussian) => stats.g_max,
        (Some(p), DistributionClass::InvertedT) => hyper.decay() * p + hyper.a * stats.g_max,
    };
    // only reachable with allow_oscillation: a sign-flipped recurrence falls back to |g|_max
    if s > 0.0 && s.is_finite() {
        Ok(s)
    } else {
        Ok(stats.g_max)
    }
}

/// Scales of one layer; `None` marks a channel that has only ever been all-zero.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerClip {
    pub scales: Vec<Option<f32>>,
    pub updates: u64,
}

/// Clipping scales of every layer, keyed by layer id.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ClipState {
    layers: BTreeMap<u32, LayerClip>,
    iteration: u64,
}

impl ClipState {
    pub fn new() -> Self {
        Self::default()
    }

    /// Completed backward passes.
    pub fn iteration(&self) -> u64 {
        self.iteration
    }

    /// Marks the end of one backward pass over the network.
    pub fn finish_iteration(&mut self) {
        self.iteration += 1;
    }

    pub fn layer(&self, id: u32) -> Option<&LayerClip> {
        self.layers.get(&id)
    }

    pub fn layers(&self) -> impl Iterator<Item = (u32, &LayerClip)> {
        self.layers.iter().map(|(&k, v)| (k, v))
    }

    /// Stored scale of one channel.
    pub fn scale(&self, layer: u32, channel: usize) -> Option<QuantScale> {
        self.layers
            .get(&layer)
            .and_then(|l| l.scales.get(channel).copied().flatten())
            .and_then(|s| QuantScale::new(s).ok())
    }

    /// Applies [`update_channel_scale`] to every channel of a layer; degenerate
    /// channels keep their previous scale. Returns the layer's scales.
    pub fn update_layer(
        &mut self,
        layer: u32,
        stats: &[ChannelStats],
        classes: &[DistributionClass],
        hyper: &MCSHyper,
    ) -> Result<Vec<Option<f32>>> {
        if stats.len() != classes.len() {
            return Err(Error::dim(format!("{} stats for {} classes", stats.len(), classes.len())));
        }
        let entry = self.layers.entry(layer).or_insert_with(|| LayerClip {
            scales: vec![None; stats.len()],
            updates: 0,
        });
        if entry.scales.len() != stats.len() {
            return Err(Error::dim(format!(
                "layer {layer} stores {} channel scales but received {} channels",
                entry.scales.len(),
                stats.len()
            )));
        }
        for ((slot, st), &class) in entry.scales.iter_mut().zip(stats).zip(classes) {
            match update_channel_scale(*slot, st, class, hyper) {
                Ok(s) => *slot = Some(s),
                Err(Error::DegenerateSlice) => {}
                Err(e) => return Err(e),
            }
        }
        entry.updates += 1;
        Ok(entry.scales.clone())
    }

    /// Errors unless every layer in `expected` (id, channels) matches the stored topology.
    pub fn check_topology(&self, expected: &[(u32, usize)]) -> Result<()> {
        for (id, layer) in &self.layers {
            match expected.iter().find(|(e, _)| e == id) {
                None => return Err(Error::Checkpoint(format!("clip state has unknown layer {id}"))),
                Some(&(_, c)) if c != layer.scales.len() => {
                    return Err(Error::Checkpoint(format!(
                        "layer {id} has {} channels in the clip state but {c} in the model",
                        layer.scales.len()
                    )))
                }
                _ => {}
            }
        }
        Ok(())
    }
}

const CLIP_MAGIC: &[u8; 8] = b"DAQ8CLIP";
const CLIP_VERSION: u32 = 1;

/// Serializes the state: magic, version, iteration, layer count, then per
/// layer its id, update count, channel count and scales (`0.0` for unset).
pub fn save_state<W: Write>(state: &ClipState, mut out: W) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(CLIP_MAGIC);
    buf.extend_from_slice(&CLIP_VERSION.to_le_bytes());
    buf.extend_from_slice(&state.iteration.to_le_bytes());
    buf.extend_from_slice(&(state.layers.len() as u32).to_le_bytes());
    for (id, layer) in &state.layers {
        buf.extend_from_slice(&id.to_le_bytes());
        buf.extend_from_slice(&layer.updates.to_le_bytes());
        buf.extend_from_slice(&(layer.scales.len() as u32).to_le_bytes());
        for s in &layer.scales {
            buf.extend_from_slice(&s.unwrap_or(0.0).to_le_bytes());
        }
    }
    out.write_all(&buf)?;
    Ok(())
}

pub fn load_state<R: Read>(input: R) -> Result<ClipState> {
    let mut r = ByteReader::new(input);
    let bad = |e: Error| Error::Checkpoint(format!("clip state: {e}"));
    r.expect_magic(CLIP_MAGIC).map_err(bad)?;
    let version = r.read_u32().map_err(bad)?;
    if version != CLIP_VERSION {
        return Err(Error::Checkpoint(format!(
            "clip state version {version} is not supported (expected {CLIP_VERSION})"
        )));
    }
    let iteration = r.read_u64().map_err(bad)?;
    let count = r.read_u32().map_err(bad)?;
    let mut layers = BTreeMap::new();
    for _ in 0..count {
        let id = r.read_u32().map_err(bad)?;
        let updates = r.read_u64().map_err(bad)?;
        let channels = r.read_u32().map_err(bad)? as usize;
        let mut scales = Vec::with_capacity(channels.min(1 << 20));
        for _ in 0..channels {
            let s = r.read_f32().map_err(bad)?;
            scales.push(match s {
                v if v == 0.0 => None,
                v if v > 0.0 && v.is_finite() => Some(v),
                v => return Err(Error::Checkpoint(format!("layer {id}: invalid stored scale {v}"))),
            });
        }
        if layers.insert(id, LayerClip { scales, updates }).is_some() {
            return Err(Error::Checkpoint(format!("duplicate layer {id}")));
        }
    }
    r.expect_eof().map_err(bad)?;
    Ok(ClipState { layers, iteration })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn st(g_max: f32) -> ChannelStats {
        ChannelStats {
            g_max,
            sigma: g_max / 3.0,
            mu: 0.0,
            tail_fraction: 0.1,
        }
    }

    #[test]
    fn hyper_validation() {
        assert!(MCSHyper::new(1.0, 0.8, 0.3).is_ok());
        assert!(MCSHyper::new(1.2, 0.8, 0.3).is_ok());
        assert!(MCSHyper::new(1.5, 0.8, 0.3).is_err());
        assert!(MCSHyper {
            k: 1.5,
            a: 0.8,
            lambda: 0.3,
            allow_oscillation: true
        }
        .validate()
        .is_ok());
        assert!(MCSHyper::new(1.0, 0.0, 0.3).is_err());
        assert!(MCSHyper::new(1.0, 0.8, 1.0).is_err());
        assert!(MCSHyper::new(-1.0, 0.8, 0.3).is_err());
    }

    #[test]
    fn gaussian_takes_g_max() {
        let h = MCSHyper::default();
        assert_eq!(update_channel_scale(Some(5.0), &st(0.37), DistributionClass::Gaussian, &h).unwrap(), 0.37);
        assert_eq!(update_channel_scale(None, &st(0.37), DistributionClass::Gaussian, &h).unwrap(), 0.37);
        // idempotent
        let once = update_channel_scale(Some(1.0), &st(0.37), DistributionClass::Gaussian, &h).unwrap();
        let twice = update_channel_scale(Some(once), &st(0.37), DistributionClass::Gaussian, &h).unwrap();
        assert_eq!(once, twice);
    }

    #[test]
    fn inverted_t_recurrence_step() {
        let h = MCSHyper::default();
        let s = update_channel_scale(Some(1.0), &st(0.5), DistributionClass::InvertedT, &h).unwrap();
        assert!((s - 0.6).abs() < 1e-6, "{s}");
        assert_eq!(update_channel_scale(None, &st(0.5), DistributionClass::InvertedT, &h).unwrap(), 0.5);
    }

    #[test]
    fn degenerate_slice_is_signalled() {
        let h = MCSHyper::default();
        assert!(matches!(
            update_channel_scale(Some(1.0), &st(0.0), DistributionClass::InvertedT, &h),
            Err(Error::DegenerateSlice)
        ));
    }

    #[test]
    fn geometric_convergence_to_constant_g_max() {
        let h = MCSHyper::default();
        let (m, s0) = (0.25f64, 2.0f64);
        let mut s = s0 as f32;
        for t in 1..=20 {
            s = update_channel_scale(Some(s), &st(m as f32), DistributionClass::InvertedT, &h).unwrap();
            let expect = 0.2f64.powi(t) * (s0 - m);
            assert!(((s as f64 - m) - expect).abs() <= 4.0 * f32::EPSILON as f64 * s0, "t={t}");
        }
    }

    #[test]
    fn update_layer_mixed_and_fresh() {
        let h = MCSHyper::default();
        let mut state = ClipState::new();
        let stats = [st(1.0), st(2.0), st(0.0)];
        let classes = [DistributionClass::Gaussian, DistributionClass::InvertedT, DistributionClass::InvertedT];
        let s = state.update_layer(4, &stats, &classes, &h).unwrap();
        assert_eq!(s, vec![Some(1.0), Some(2.0), None]);

        let stats2 = [st(0.5), st(1.0), st(0.3)];
        let s = state.update_layer(4, &stats2, &classes, &h).unwrap();
        let expect1 = update_channel_scale(Some(2.0), &stats2[1], DistributionClass::InvertedT, &h).unwrap();
        assert_eq!(s[0], Some(0.5));
        assert_eq!(s[1], Some(expect1));
        assert_eq!(s[2], Some(0.3));
        assert_eq!(state.layer(4).unwrap().updates, 2);

        assert!(matches!(state.update_layer(4, &stats[..2], &classes[..2], &h), Err(Error::Dimension(_))));
    }

    #[test]
    fn all_gaussian_layer_equals_g_max_vector() {
        let mut state = ClipState::new();
        let stats = [st(0.1), st(0.7), st(3.0)];
        let classes = [DistributionClass::Gaussian; 3];
        let h = MCSHyper::default();
        state.update_layer(0, &stats, &classes, &h).unwrap();
        let s = state.update_layer(0, &stats, &classes, &h).unwrap();
        assert_eq!(s, vec![Some(0.1), Some(0.7), Some(3.0)]);
    }

    #[test]
    fn save_load_roundtrip() {
        let h = MCSHyper::default();
        let mut state = ClipState::new();
        let mut buf = Vec::new();
        save_state(&state, &mut buf).unwrap();
        assert_eq!(load_state(&buf[..]).unwrap(), state);

        state
            .update_layer(0, &[st(0.3), st(0.0)], &[DistributionClass::Gaussian; 2], &h)
            .unwrap();
        state.update_layer(7, &[st(1.5)], &[DistributionClass::InvertedT], &h).unwrap();
        state.finish_iteration();
        let mut buf = Vec::new();
        save_state(&state, &mut buf).unwrap();
        let back = load_state(&buf[..]).unwrap();
        assert_eq!(back, state);
        assert!(back.check_topology(&[(0, 2), (7, 1)]).is_ok());
        assert!(matches!(back.check_topology(&[(0, 3), (7, 1)]), Err(Error::Checkpoint(_))));
        assert!(back.check_topology(&[(0, 2)]).is_err());

        let mut bad = buf.clone();
        bad[8] = 9;
        assert!(matches!(load_state(&bad[..]), Err(Error::Checkpoint(_))));
        assert!(load_state(&buf[..buf.len() - 3]).is_err());
    }

    proptest::proptest! {
        #[test]
        fn recurrence_stays_within_bounds(seq in proptest::collection::vec(0.5f32..2.0, 30..60), s0 in 0.01f32..10.0) {
            let h = MCSHyper::default();
            let (m, big_m) = (0.5f32, 2.0f32);
            let mut s = s0;
            for (t, &g) in seq.iter().enumerate() {
                s = update_channel_scale(Some(s), &st(g), DistributionClass::InvertedT, &h).unwrap();
                if t >= 20 {
                    proptest::prop_assert!(s >= m * (1.0 - 1e-5) && s <= big_m * (1.0 + 1e-5), "t={} s={}", t, s);
                }
            }
        }
    }
}
