//! The five networks of the method, their seeded initialization and
//! checkpoint serialization.

use dehaze_tensor::ModelParams;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{DehazeError, Result};
use crate::estimators::{AtmosphericConfig, AtmosphericEstimator, TransmissionConfig, TransmissionEstimator};
use crate::image::{AtmosphericLight, ImagePlane};
use crate::ipudn::{Ipudn, IpudnConfig, Trajectory};
use crate::pipeline::checkpoint::Checkpoint;
use crate::pipeline::config::TrainConfig;

pub const NETWORKS: [&str; 5] = ["transmission", "atmospheric", "dehazer", "t_updater", "a_updater"];

/// Architecture hyper-parameters of every network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Architecture {
    pub transmission: TransmissionConfig,
    pub atmospheric: AtmosphericConfig,
    pub ipudn: IpudnConfig,
}

impl From<&TrainConfig> for Architecture {
    fn from(cfg: &TrainConfig) -> Self {
        Architecture {
            transmission: cfg.transmission.clone(),
            atmospheric: cfg.atmospheric.clone(),
            ipudn: cfg.ipudn.clone(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Models {
    arch: Architecture,
    pub transmission: TransmissionEstimator,
    pub atmospheric: AtmosphericEstimator,
    pub ipudn: Ipudn,
}

/// Output of the full inference path on one image.
#[derive(Debug, Clone)]
pub struct Dehazed {
    pub image: ImagePlane,
    pub transmission: ImagePlane,
    pub airlight: AtmosphericLight,
    pub trajectory: Trajectory,
}

impl Models {
    /// Fresh networks; each draws from its own stream of `seed`.
    pub fn new(arch: Architecture, seed: u64) -> Result<Self> {
        let rng = |stream: u64| {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            r.set_stream(stream);
            r
        };
        let transmission = TransmissionEstimator::new(arch.transmission.clone(), &mut rng(1))?;
        let atmospheric = AtmosphericEstimator::new(arch.atmospheric.clone(), &mut rng(2))?;
        let ipudn = Ipudn::new(arch.ipudn.clone(), &mut rng(3))?;
        Ok(Models {
            arch,
            transmission,
            atmospheric,
            ipudn,
        })
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn network(&self, name: &str) -> Option<&ModelParams> {
        Some(match name {
            "transmission" => self.transmission.params(),
            "atmospheric" => self.atmospheric.params(),
            "dehazer" => self.ipudn.dehazer.params(),
            "t_updater" => self.ipudn.t_updater.params(),
            "a_updater" => self.ipudn.a_updater.params(),
            _ => return None,
        })
    }

    pub fn network_mut(&mut self, name: &str) -> Option<&mut ModelParams> {
        Some(match name {
            "transmission" => self.transmission.params_mut(),
            "atmospheric" => self.atmospheric.params_mut(),
            "dehazer" => self.ipudn.dehazer.params_mut(),
            "t_updater" => self.ipudn.t_updater.params_mut(),
            "a_updater" => self.ipudn.a_updater.params_mut(),
            _ => return None,
        })
    }

    /// Writes every parameter under `{prefix}/{network}/{param}`.
    pub fn write(&self, ckpt: &mut Checkpoint, prefix: &str) {
        for net in NETWORKS {
            for p in self.network(net).expect("known network").iter() {
                ckpt.insert_tensor(format!("{prefix}/{net}/{}", p.name), p.value.clone());
            }
        }
    }

    /// Overwrites the networks named in `nets` from blobs written by
    /// [`Models::write`].
    pub fn read_networks(&mut self, ckpt: &Checkpoint, prefix: &str, nets: &[&str]) -> Result<()> {
        for &net in nets {
            let params = self
                .network_mut(net)
                .ok_or_else(|| DehazeError::Checkpoint(format!("unknown network {net}")))?;
            let names: Vec<String> = params.iter().map(|p| p.name.clone()).collect();
            for name in &names {
                let key = format!("{prefix}/{net}/{name}");
                let t = ckpt.tensor(&key)?;
                params
                    .set(name, t.clone())
                    .map_err(|e| DehazeError::Checkpoint(format!("{key}: {e}")))?;
            }
            let stored = ckpt
                .names()
                .filter(|n| n.starts_with(&format!("{prefix}/{net}/")))
                .count();
            if stored != names.len() {
                return Err(DehazeError::Checkpoint(format!(
                    "{prefix}/{net} holds {stored} parameters, the architecture has {}",
                    names.len()
                )));
            }
        }
        Ok(())
    }

    pub fn read(arch: Architecture, ckpt: &Checkpoint, prefix: &str) -> Result<Self> {
        let mut m = Models::new(arch, 0)?;
        m.read_networks(ckpt, prefix, &NETWORKS)?;
        Ok(m)
    }

    /// A standalone checkpoint holding the architecture and weights.
    pub fn to_checkpoint(&self, cfg: &TrainConfig) -> Checkpoint {
        let mut ckpt = Checkpoint::new();
        ckpt.insert_text("config", cfg.to_toml());
        self.write(&mut ckpt, "model");
        ckpt
    }

    /// Reads the `model/` weights of any checkpoint with a config blob.
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<(Self, TrainConfig)> {
        let cfg = TrainConfig::from_toml(ckpt.text("config")?)
            .map_err(|e| DehazeError::Checkpoint(e.to_string()))?;
        let m = Models::read(Architecture::from(&cfg), ckpt, "model")?;
        Ok((m, cfg))
    }

    /// Estimators followed by `steps` IPUDN iterations.
    pub fn dehaze(&self, hazy: &ImagePlane, steps: usize) -> Result<Dehazed> {
        let transmission = self.transmission.estimate(hazy)?;
        let airlight = self.atmospheric.estimate(hazy)?;
        let (image, trajectory) = self.ipudn.run(hazy, &transmission, airlight, steps)?;
        Ok(Dehazed {
            image,
            transmission,
            airlight,
            trajectory,
        })
    }

    /// True when every parameter of `net` is bitwise equal in both.
    pub fn same_network(&self, other: &Models, net: &str) -> bool {
        match (self.network(net), other.network(net)) {
            (Some(a), Some(b)) => a
                .iter()
                .zip(b.iter())
                .all(|(p, q)| p.value.shape() == q.value.shape() && bits(p.value.data()) == bits(q.value.data())),
            _ => false,
        }
    }
}

fn bits(v: &[f64]) -> Vec<u64> {
    v.iter().map(|x| x.to_bits()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> Architecture {
        Architecture::from(&TrainConfig::desk(1))
    }

    #[test]
    fn seeded_init_is_reproducible_and_seed_sensitive() {
        let a = Models::new(tiny(), 5).unwrap();
        let b = Models::new(tiny(), 5).unwrap();
        let c = Models::new(tiny(), 6).unwrap();
        for net in NETWORKS {
            assert!(a.same_network(&b, net));
            assert!(!a.same_network(&c, net));
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let cfg = TrainConfig::desk(1);
        let m = Models::new(Architecture::from(&cfg), 11).unwrap();
        let ckpt = m.to_checkpoint(&cfg);
        let bytes = ckpt.to_bytes();
        let (back, cfg2) = Models::from_checkpoint(&Checkpoint::from_bytes(&bytes).unwrap()).unwrap();
        assert_eq!(cfg2, cfg);
        for net in NETWORKS {
            assert!(m.same_network(&back, net));
        }
        assert_eq!(back.to_checkpoint(&cfg).to_bytes(), bytes);
    }

    #[test]
    fn architecture_mismatch_is_a_checkpoint_error() {
        let cfg = TrainConfig::desk(1);
        let ckpt = Models::new(Architecture::from(&cfg), 1).unwrap().to_checkpoint(&cfg);
        let mut arch = Architecture::from(&cfg);
        arch.ipudn.features = 12;
        assert!(matches!(Models::read(arch, &ckpt, "model"), Err(DehazeError::Checkpoint(_))));
    }
}
