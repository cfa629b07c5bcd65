//! Packet sources behind the `--scene`, `--pcap`, `--raw` and `--udp` inputs.

use std::path::Path;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use anyhow::{anyhow, Context};
use streamseg::io::{IoError, PcapReader, RawReader, UdpSource};
use streamseg::packet::BeamCalibration;
use streamseg::synth::{bundled_scene, raycast_scan, scene_to_packets, SceneSpec};

use crate::config::{Input, RunConfig};
use crate::Usage;

type Packets = Box<dyn Iterator<Item = Result<Vec<u8>, IoError>> + Send>;

pub struct Source {
    pub calib: BeamCalibration,
    pub packets: Packets,
    pub live: bool,
}

/// A scene file, or else a bundled scene of that name.
pub fn resolve_scene(name: &str) -> anyhow::Result<(String, SceneSpec)> {
    let path = Path::new(name);
    if path.exists() {
        let spec = SceneSpec::load(path)?;
        let stem = path.file_stem().map_or_else(|| name.to_owned(), |s| s.to_string_lossy().into_owned());
        let label = if spec.name.is_empty() { stem } else { spec.name.clone() };
        return Ok((label, spec));
    }
    bundled_scene(name)
        .map(|spec| (name.to_owned(), spec))
        .ok_or_else(|| anyhow!("no scene file or bundled scene named `{name}`"))
}

fn calibration(config: &RunConfig) -> anyhow::Result<BeamCalibration> {
    match &config.calibration {
        Some(path) => BeamCalibration::load(path, 32).with_context(|| format!("calibration {}", path.display())),
        None => Ok(BeamCalibration::vlp32c()),
    }
}

pub fn open(config: &RunConfig, stop: &Arc<AtomicBool>) -> anyhow::Result<Source> {
    let input = config.input.as_ref().ok_or_else(|| Usage("no input given".into()))?;
    Ok(match input {
        Input::Scene(name) => {
            let (_, spec) = resolve_scene(name)?;
            let scan = raycast_scan(&spec)?;
            let packets: Vec<_> = scene_to_packets(&scan, 0).into_iter().map(|p| Ok(p.to_vec())).collect();
            Source { calib: scan.calib, packets: Box::new(packets.into_iter()), live: false }
        }
        Input::Pcap(path) => Source {
            calib: calibration(config)?,
            packets: Box::new(PcapReader::open(path, config.port).with_context(|| format!("opening {}", path.display()))?),
            live: false,
        },
        Input::Raw(path) => Source {
            calib: calibration(config)?,
            packets: Box::new(RawReader::open(path).with_context(|| format!("opening {}", path.display()))?),
            live: false,
        },
        Input::Udp(addr) => {
            let socket = UdpSource::bind(addr, stop.clone(), Duration::from_millis(100))
                .with_context(|| format!("binding {addr}"))?;
            tracing::info!("listening on {addr}");
            Source { calib: calibration(config)?, packets: Box::new(socket.map(Ok)), live: true }
        }
    })
}

/// Yields payloads until the source ends, fails, or `stop` is set. The first
/// read error is kept in `error`.
pub struct Guarded {
    pub inner: Packets,
    pub stop: Arc<AtomicBool>,
    pub error: Arc<Mutex<Option<IoError>>>,
}

impl Iterator for Guarded {
    type Item = Vec<u8>;

    fn next(&mut self) -> Option<Vec<u8>> {
        if self.stop.load(Ordering::Relaxed) {
            return None;
        }
        match self.inner.next()? {
            Ok(p) => Some(p),
            Err(e) => {
                *self.error.lock().expect("error slot") = Some(e);
                None
            }
        }
    }
}
