//! Spike events and time-bucketed spike waves.
//!
//! A [`SpikeWave`] is the only thing that flows between layers: `T` buckets,
//! one per time step, each holding the spikes emitted during that step. Every
//! neuron fires at most once per stimulus, so a neuron appears in at most one
//! bucket.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Shape of a stack of retinotopic neuronal maps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Extent {
    pub maps: usize,
    pub height: usize,
    pub width: usize,
}

impl Extent {
    pub fn new(maps: usize, height: usize, width: usize) -> Self {
        Self {
            maps,
            height,
            width,
        }
    }

    pub fn len(&self) -> usize {
        self.maps * self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn locations(&self) -> usize {
        self.height * self.width
    }

    /// Map-major linear index.
    #[inline]
    pub fn index(&self, map: usize, y: usize, x: usize) -> usize {
        (map * self.height + y) * self.width + x
    }

    #[inline]
    pub fn contains(&self, map: usize, y: usize, x: usize) -> bool {
        map < self.maps && y < self.height && x < self.width
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SpikeEvent {
    pub map: u16,
    pub x: u16,
    pub y: u16,
    pub step: u16,
}

impl SpikeEvent {
    pub fn new(map: usize, x: usize, y: usize, step: usize) -> Self {
        debug_assert!(map <= u16::MAX as usize && x <= u16::MAX as usize);
        debug_assert!(y <= u16::MAX as usize && step <= u16::MAX as usize);
        Self {
            map: map as u16,
            x: x as u16,
            y: y as u16,
            step: step as u16,
        }
    }

    #[inline]
    pub fn map(&self) -> usize {
        self.map as usize
    }

    #[inline]
    pub fn x(&self) -> usize {
        self.x as usize
    }

    #[inline]
    pub fn y(&self) -> usize {
        self.y as usize
    }

    #[inline]
    pub fn step(&self) -> usize {
        self.step as usize
    }

    /// Raster key used for canonical ordering inside a bucket.
    #[inline]
    pub fn raster_key(&self) -> (u16, u16, u16) {
        (self.map, self.y, self.x)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SpikeWave {
    extent: Extent,
    buckets: Vec<Vec<SpikeEvent>>,
}

impl SpikeWave {
    pub fn new(extent: Extent, steps: usize) -> Self {
        Self {
            extent,
            buckets: vec![Vec::new(); steps],
        }
    }

    pub fn extent(&self) -> Extent {
        self.extent
    }

    pub fn steps(&self) -> usize {
        self.buckets.len()
    }

    pub fn bucket(&self, step: usize) -> &[SpikeEvent] {
        &self.buckets[step]
    }

    pub fn buckets(&self) -> &[Vec<SpikeEvent>] {
        &self.buckets
    }

    pub fn total_spikes(&self) -> usize {
        self.buckets.iter().map(Vec::len).sum()
    }

    pub fn is_silent(&self) -> bool {
        self.buckets.iter().all(Vec::is_empty)
    }

    pub fn events(&self) -> impl Iterator<Item = &SpikeEvent> + '_ {
        self.buckets.iter().flatten()
    }

    /// Appends a spike to its bucket after checking bounds. Does not check
    /// the at-most-once property; see [`SpikeWave::validate`].
    pub fn push(&mut self, event: SpikeEvent) -> Result<()> {
        if event.step() >= self.steps() {
            return Err(Error::Topology(format!(
                "spike step {} outside wave of {} steps",
                event.step,
                self.steps()
            )));
        }
        if !self.extent.contains(event.map(), event.y(), event.x()) {
            return Err(Error::Topology(format!(
                "spike at map {} ({}, {}) outside extent {:?}",
                event.map, event.x, event.y, self.extent
            )));
        }
        self.buckets[event.step()].push(event);
        Ok(())
    }

    /// Replaces one bucket wholesale. Events must carry `step`.
    pub(crate) fn set_bucket(&mut self, step: usize, events: Vec<SpikeEvent>) {
        debug_assert!(events.iter().all(|e| e.step() == step));
        self.buckets[step] = events;
    }

    /// Checks bounds, step labels and the one-spike-per-neuron property.
    pub fn validate(&self) -> Result<()> {
        let mut seen = vec![false; self.extent.len()];
        for (step, bucket) in self.buckets.iter().enumerate() {
            for e in bucket {
                if e.step() != step {
                    return Err(Error::Topology(format!(
                        "spike labelled step {} stored in bucket {step}",
                        e.step
                    )));
                }
                if !self.extent.contains(e.map(), e.y(), e.x()) {
                    return Err(Error::Topology(format!(
                        "spike at map {} ({}, {}) outside extent {:?}",
                        e.map, e.x, e.y, self.extent
                    )));
                }
                let idx = self.extent.index(e.map(), e.y(), e.x());
                if std::mem::replace(&mut seen[idx], true) {
                    return Err(Error::Topology(format!(
                        "neuron map {} ({}, {}) spiked more than once",
                        e.map, e.x, e.y
                    )));
                }
            }
        }
        Ok(())
    }

    /// Dense first-spike step per neuron, indexed by [`Extent::index`].
    pub fn first_spike_steps(&self) -> Vec<Option<u16>> {
        let mut steps = vec![None; self.extent.len()];
        for e in self.events() {
            let slot = &mut steps[self.extent.index(e.map(), e.y(), e.x())];
            if slot.is_none() {
                *slot = Some(e.step);
            }
        }
        steps
    }

    /// Same wave with every bucket in raster order; useful for comparing
    /// waves as sets.
    pub fn canonical(&self) -> SpikeWave {
        let mut out = self.clone();
        for b in &mut out.buckets {
            b.sort_unstable_by_key(SpikeEvent::raster_key);
        }
        out
    }
}
