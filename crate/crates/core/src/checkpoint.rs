//! Binary checkpoints for trained networks and policy bundles.
//!
//! Layout: magic, version, model name, then named entries. A network entry
//! carries its spec and little-endian f32 parameters; a plain array entry
//! carries a shape and f32 data; a metadata entry carries f64 values
//! (normalization statistics and flags).

use std::path::Path;

use crate::binio::{Reader, Writer};
use crate::dataset::{Moments, NormStats};
use crate::epimodel::EpiModels;
use crate::error::{Error, Result};
use crate::nn::{Activation, Mlp, NetworkParams, NetworkSpec};
use crate::policy::{GaussianPolicy, PolicyModel, RecurrentPolicy};
use crate::training::{OracleObs, Osi, PolicyBundle};

const MAGIC: &[u8; 8] = b"EPICKPT\0";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub enum Entry {
    Network(Mlp),
    Array { shape: Vec<usize>, data: Vec<f32> },
    Meta(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Checkpoint {
    pub name: String,
    pub entries: Vec<(String, Entry)>,
}

impl Checkpoint {
    pub fn new(name: &str) -> Self {
        Self {
            name: name.to_string(),
            entries: Vec::new(),
        }
    }

    pub fn push(&mut self, key: &str, e: Entry) {
        self.entries.push((key.to_string(), e));
    }

    fn get(&self, key: &str) -> Result<&Entry> {
        self.entries
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, e)| e)
            .ok_or_else(|| Error::Format(format!("checkpoint `{}` has no entry `{key}`", self.name)))
    }

    pub fn network(&self, key: &str) -> Result<Mlp> {
        match self.get(key)? {
            Entry::Network(m) => Ok(m.clone()),
            _ => Err(Error::Format(format!("entry `{key}` is not a network"))),
        }
    }

    pub fn array(&self, key: &str) -> Result<(Vec<usize>, Vec<f32>)> {
        match self.get(key)? {
            Entry::Array { shape, data } => Ok((shape.clone(), data.clone())),
            _ => Err(Error::Format(format!("entry `{key}` is not an array"))),
        }
    }

    pub fn meta(&self, key: &str) -> Result<Vec<f64>> {
        match self.get(key)? {
            Entry::Meta(v) => Ok(v.clone()),
            _ => Err(Error::Format(format!("entry `{key}` is not metadata"))),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.bytes(MAGIC);
        w.u32(CHECKPOINT_VERSION);
        w.str(&self.name);
        w.u32(self.entries.len() as u32);
        for (key, e) in &self.entries {
            w.str(key);
            match e {
                Entry::Network(m) => {
                    w.u8(0);
                    w.usizes(m.spec.layer_sizes());
                    let codes: Vec<usize> = m.spec.hidden_activations().iter().map(|a| a.code() as usize).collect();
                    w.usizes(&codes);
                    w.f32s(m.params.as_slice());
                }
                Entry::Array { shape, data } => {
                    w.u8(1);
                    w.usizes(shape);
                    w.f32s(data);
                }
                Entry::Meta(v) => {
                    w.u8(2);
                    w.f64s(v);
                }
            }
        }
        w.finish()
    }

    pub fn from_bytes(b: &[u8]) -> Result<Self> {
        let mut r = Reader::new(b);
        if r.take(MAGIC.len()).ok() != Some(&MAGIC[..]) {
            return Err(Error::Format("not a checkpoint (bad magic bytes)".into()));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::VersionMismatch {
                found: version,
                expected: CHECKPOINT_VERSION,
            });
        }
        let name = r.str()?;
        let n = r.u32()? as usize;
        let mut entries = Vec::with_capacity(n.min(1024));
        for _ in 0..n {
            let key = r.str()?;
            let e = match r.u8()? {
                0 => {
                    let sizes = r.usizes()?;
                    let acts = r
                        .usizes()?
                        .into_iter()
                        .map(|c| {
                            u8::try_from(c)
                                .ok()
                                .and_then(Activation::from_code)
                                .ok_or_else(|| Error::Format(format!("unknown activation code {c}")))
                        })
                        .collect::<Result<Vec<_>>>()?;
                    let spec = NetworkSpec::new(sizes, acts).map_err(|e| Error::Format(e.to_string()))?;
                    let params = NetworkParams::from_flat(&spec, r.f32s()?).map_err(|e| Error::Format(e.to_string()))?;
                    Entry::Network(Mlp::from_parts(spec, params)?)
                }
                1 => {
                    let shape = r.usizes()?;
                    let data = r.f32s()?;
                    if shape.iter().product::<usize>() != data.len() {
                        return Err(Error::Format(format!("array `{key}` does not match its shape")));
                    }
                    Entry::Array { shape, data }
                }
                2 => Entry::Meta(r.f64s()?),
                t => return Err(Error::Format(format!("unknown entry type {t}"))),
            };
            entries.push((key, e));
        }
        if !r.is_empty() {
            return Err(Error::Format("trailing bytes after checkpoint".into()));
        }
        Ok(Self { name, entries })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir)?;
        }
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let b = std::fs::read(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::MissingArtifact(path.to_path_buf()),
            _ => Error::Io(e),
        })?;
        Self::from_bytes(&b)
    }
}

fn put_gaussian(c: &mut Checkpoint, key: &str, p: &GaussianPolicy) {
    c.push(&format!("{key}.mean"), Entry::Network(p.mean.clone()));
    c.push(
        &format!("{key}.log_std"),
        Entry::Array {
            shape: vec![p.log_std.len()],
            data: p.log_std.clone(),
        },
    );
}

fn get_gaussian(c: &Checkpoint, key: &str) -> Result<GaussianPolicy> {
    let (_, log_std) = c.array(&format!("{key}.log_std"))?;
    GaussianPolicy::from_parts(c.network(&format!("{key}.mean"))?, log_std)
}

fn put_moments(c: &mut Checkpoint, key: &str, m: &Moments) {
    c.push(&format!("{key}.mean"), Entry::Meta(m.mean.clone()));
    c.push(&format!("{key}.std"), Entry::Meta(m.std.clone()));
}

fn get_moments(c: &Checkpoint, key: &str) -> Result<Moments> {
    Ok(Moments {
        mean: c.meta(&format!("{key}.mean"))?,
        std: c.meta(&format!("{key}.std"))?,
    })
}

pub fn models_to_checkpoint(c: &mut Checkpoint, m: &EpiModels) {
    c.push("f", Entry::Network(m.f.clone()));
    c.push("f_epi", Entry::Network(m.f_epi.clone()));
    c.push("psi", Entry::Network(m.psi.clone()));
    put_moments(c, "stats.s", &m.stats.s);
    put_moments(c, "stats.a", &m.stats.a);
    put_moments(c, "stats.s_next", &m.stats.s_next);
    c.push("predict_delta", Entry::Meta(vec![m.predict_delta as u8 as f64]));
    put_moments(c, "embedding_norm", &m.embedding_norm);
}

pub fn models_from_checkpoint(c: &Checkpoint) -> Result<EpiModels> {
    Ok(EpiModels {
        f: c.network("f")?,
        f_epi: c.network("f_epi")?,
        psi: c.network("psi")?,
        stats: NormStats {
            s: get_moments(c, "stats.s")?,
            a: get_moments(c, "stats.a")?,
            s_next: get_moments(c, "stats.s_next")?,
        },
        predict_delta: c.meta("predict_delta")?.first() == Some(&1.0),
        embedding_norm: get_moments(c, "embedding_norm")?,
    })
}

pub fn policy_checkpoint(name: &str, p: &GaussianPolicy) -> Checkpoint {
    let mut c = Checkpoint::new(name);
    put_gaussian(&mut c, "policy", p);
    c
}

pub fn policy_from_checkpoint(c: &Checkpoint) -> Result<GaussianPolicy> {
    get_gaussian(c, "policy")
}

pub fn bundle_to_checkpoint(b: &PolicyBundle) -> Checkpoint {
    let name = match b {
        PolicyBundle::Plain(_) => "plain",
        PolicyBundle::Oracle { .. } => "oracle",
        PolicyBundle::RandomInteraction(_) => "random_interaction",
        PolicyBundle::History(_) => "history",
        PolicyBundle::Recurrent(_) => "recurrent",
        PolicyBundle::DirectReward { .. } => "direct_reward",
        PolicyBundle::SystemId { .. } => "system_id",
        PolicyBundle::Epi { .. } => "epi",
    };
    let mut c = Checkpoint::new(name);
    match b {
        PolicyBundle::Plain(p) | PolicyBundle::RandomInteraction(p) | PolicyBundle::History(p) => {
            put_gaussian(&mut c, "policy", p)
        }
        PolicyBundle::Oracle { policy, obs } => {
            put_gaussian(&mut c, "policy", policy);
            c.push("oracle.mean", Entry::Meta(obs.mean.clone()));
            c.push("oracle.std", Entry::Meta(obs.std.clone()));
        }
        PolicyBundle::Recurrent(p) => {
            c.push(
                "recurrent.dims",
                Entry::Meta(vec![p.obs_dim() as f64, p.hidden_size() as f64, p.act_dim() as f64]),
            );
            let data = p.params();
            c.push(
                "recurrent.params",
                Entry::Array {
                    shape: vec![data.len()],
                    data,
                },
            );
        }
        PolicyBundle::DirectReward { probe, task } => {
            put_gaussian(&mut c, "probe", probe);
            put_gaussian(&mut c, "task", task);
        }
        PolicyBundle::SystemId { policy, osi } => {
            put_gaussian(&mut c, "policy", policy);
            c.push("osi", Entry::Network(osi.net.clone()));
            put_moments(&mut c, "osi.input", &osi.input);
        }
        PolicyBundle::Epi {
            probe,
            models,
            task,
            reset_after_probe,
        } => {
            put_gaussian(&mut c, "probe", probe);
            put_gaussian(&mut c, "task", task);
            models_to_checkpoint(&mut c, models);
            c.push("reset_after_probe", Entry::Meta(vec![*reset_after_probe as u8 as f64]));
        }
    }
    c
}

pub fn bundle_from_checkpoint(c: &Checkpoint) -> Result<PolicyBundle> {
    Ok(match c.name.as_str() {
        "plain" => PolicyBundle::Plain(get_gaussian(c, "policy")?),
        "random_interaction" => PolicyBundle::RandomInteraction(get_gaussian(c, "policy")?),
        "history" => PolicyBundle::History(get_gaussian(c, "policy")?),
        "oracle" => PolicyBundle::Oracle {
            policy: get_gaussian(c, "policy")?,
            obs: OracleObs {
                mean: c.meta("oracle.mean")?,
                std: c.meta("oracle.std")?,
            },
        },
        "recurrent" => {
            let d = c.meta("recurrent.dims")?;
            if d.len() != 3 {
                return Err(Error::Format("recurrent dims must have three entries".into()));
            }
            let (_, params) = c.array("recurrent.params")?;
            PolicyBundle::Recurrent(RecurrentPolicy::from_flat(d[0] as usize, d[1] as usize, d[2] as usize, params)?)
        }
        "direct_reward" => PolicyBundle::DirectReward {
            probe: get_gaussian(c, "probe")?,
            task: get_gaussian(c, "task")?,
        },
        "system_id" => PolicyBundle::SystemId {
            policy: get_gaussian(c, "policy")?,
            osi: Osi {
                net: c.network("osi")?,
                input: get_moments(c, "osi.input")?,
            },
        },
        "epi" => PolicyBundle::Epi {
            probe: get_gaussian(c, "probe")?,
            task: get_gaussian(c, "task")?,
            models: models_from_checkpoint(c)?,
            reset_after_probe: c.meta("reset_after_probe")?.first() == Some(&1.0),
        },
        other => return Err(Error::Format(format!("unknown policy bundle `{other}`"))),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn gaussian(seed: u64) -> GaussianPolicy {
        GaussianPolicy::new(4, &[5, 3], 2, -0.3, seed).unwrap()
    }

    fn stats() -> NormStats {
        let m = |n: usize| Moments {
            mean: (0..n).map(|i| i as f64 * 0.1).collect(),
            std: vec![std::f64::consts::E; n],
        };
        NormStats {
            s: m(10),
            a: m(2),
            s_next: m(10),
        }
    }

    proptest! {
        #[test]
        fn random_params_round_trip_bit_exactly(seed in any::<u64>(), bits in proptest::collection::vec(any::<u32>(), 1..40)) {
            let mut p = gaussian(seed);
            let mut flat = p.params();
            for (v, b) in flat.iter_mut().zip(&bits) {
                let f = f32::from_bits(*b);
                if f.is_finite() {
                    *v = f;
                }
            }
            p.set_params(&flat).unwrap();
            let c = policy_checkpoint("p", &p);
            let back = policy_from_checkpoint(&Checkpoint::from_bytes(&c.to_bytes()).unwrap()).unwrap();
            let a: Vec<u32> = back.params().iter().map(|v| v.to_bits()).collect();
            let b: Vec<u32> = p.params().iter().map(|v| v.to_bits()).collect();
            prop_assert_eq!(a, b);
        }
    }

    #[test]
    fn every_bundle_round_trips() {
        let models = EpiModels::new(10, 2, 2, stats(), 3).unwrap();
        let bundles = vec![
            PolicyBundle::Plain(gaussian(1)),
            PolicyBundle::RandomInteraction(gaussian(2)),
            PolicyBundle::History(gaussian(3)),
            PolicyBundle::Oracle {
                policy: gaussian(4),
                obs: OracleObs {
                    mean: vec![1.5, 0.75],
                    std: vec![0.7, 0.2],
                },
            },
            PolicyBundle::Recurrent(RecurrentPolicy::new(4, 6, 2, -0.5, 5).unwrap()),
            PolicyBundle::DirectReward {
                probe: gaussian(6),
                task: gaussian(7),
            },
            PolicyBundle::SystemId {
                policy: gaussian(8),
                osi: Osi {
                    net: Mlp::new(NetworkSpec::uniform(&[120, 4, 2], Activation::Tanh).unwrap(), 9),
                    input: Moments {
                        mean: vec![0.1; 120],
                        std: vec![2.0; 120],
                    },
                },
            },
            PolicyBundle::Epi {
                probe: gaussian(10),
                models,
                task: gaussian(11),
                reset_after_probe: false,
            },
        ];
        for b in bundles {
            let c = bundle_to_checkpoint(&b);
            let back = bundle_from_checkpoint(&Checkpoint::from_bytes(&c.to_bytes()).unwrap()).unwrap();
            assert_eq!(back, b);
        }
    }

    #[test]
    fn version_and_magic_are_checked() {
        let mut b = policy_checkpoint("p", &gaussian(0)).to_bytes();
        b[8] = 9;
        match Checkpoint::from_bytes(&b) {
            Err(Error::VersionMismatch { found: 9, expected: 1 }) => {}
            other => panic!("{other:?}"),
        }
        b[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&b), Err(Error::Format(_))));
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            Checkpoint::load(&dir.path().join("none.ckpt")),
            Err(Error::MissingArtifact(_))
        ));
    }
}
