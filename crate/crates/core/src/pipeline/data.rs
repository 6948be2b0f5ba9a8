//! Clip loading: waveform → log-mel → normalize → fixed length.
//!
//! Clips are decoded by a worker pool that feeds a bounded queue. A reorder
//! buffer on the consumer side delivers results in manifest order, so the
//! output never depends on the number of workers.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::mpsc::sync_channel;

use crate::error::{EatError, Result};
use crate::frontend::{load_spectrogram, normalize, pad_to_length, FrontendConfig, NormStats, Spectrogram};
use crate::numerics::Tensor;

use super::manifest::Manifest;

/// Maps `f` over `items` on `workers` threads with at most `capacity` results
/// in flight, returning results in input order. The first error wins.
pub fn ordered_map<I, O, F>(items: &[I], workers: usize, capacity: usize, f: F) -> Result<Vec<O>>
where
    I: Sync,
    O: Send,
    F: Fn(&I) -> Result<O> + Sync,
{
    let workers = workers.clamp(1, items.len().max(1));
    let next = AtomicUsize::new(0);
    std::thread::scope(|s| {
        // The receiver must drop before the scope joins so blocked senders wake.
        let (tx, rx) = sync_channel::<(usize, Result<O>)>(capacity.max(1));
        for _ in 0..workers {
            let tx = tx.clone();
            let (next, f) = (&next, &f);
            s.spawn(move || loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= items.len() || tx.send((i, f(&items[i]))).is_err() {
                    break;
                }
            });
        }
        drop(tx);
        let mut pending = BTreeMap::new();
        let mut out = Vec::with_capacity(items.len());
        for (i, r) in rx.iter() {
            pending.insert(i, r);
            while let Some(r) = pending.remove(&out.len()) {
                match r {
                    Ok(v) => out.push(v),
                    Err(e) => {
                        next.store(items.len(), Ordering::Relaxed);
                        return Err(e);
                    }
                }
            }
        }
        Ok(out)
    })
}

/// Worker count: the available parallelism, at least one.
pub fn default_workers() -> usize {
    std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1)
}

/// Normalizes, then pads or crops to `target_frames`. Longer clips keep their
/// leading `target_frames` frames.
pub fn prepare(spec: &Spectrogram, norm: NormStats, target_frames: usize, cfg: &FrontendConfig) -> Result<Tensor> {
    let spec = normalize(spec, norm.mean, norm.std)?;
    if spec.frames() > target_frames {
        let bins = spec.bins();
        let data = spec.values().data()[..target_frames * bins].to_vec();
        return Ok(Tensor::new(vec![target_frames, bins], data)?);
    }
    Ok(pad_to_length(&spec, target_frames, cfg)?.into_values())
}

/// Raw log-mel spectrograms of every manifest row, in manifest order.
pub fn load_raw(manifest: &Manifest, cfg: &FrontendConfig, workers: usize) -> Result<Vec<Spectrogram>> {
    if manifest.is_empty() {
        return Err(EatError::Data("manifest has no rows".into()));
    }
    let paths: Vec<_> = manifest.rows().iter().map(|r| manifest.resolve(r)).collect();
    ordered_map(&paths, workers, 2 * workers.max(1), |p| load_spectrogram(p, cfg))
}

/// Model-ready `[target_frames, mel_bins]` inputs in manifest order.
pub fn load_inputs(
    manifest: &Manifest,
    cfg: &FrontendConfig,
    norm: NormStats,
    target_frames: usize,
    workers: usize,
) -> Result<Vec<Tensor>> {
    load_raw(manifest, cfg, workers)?
        .iter()
        .map(|s| prepare(s, norm, target_frames, cfg))
        .collect()
}
