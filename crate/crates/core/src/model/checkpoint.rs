//! Binary checkpoint format.
//!
//! ```text
//! b"LGEN" | version: u32 LE | header_len: u32 LE | header: UTF-8 key=value lines
//!        | parameters: f64 LE, row-major, in `Parameters::named` order
//! ```

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{HybridModel, LayerMap, ModelConfig, Placement};
use crate::error::{Error, Result};
use crate::numerics::RopeConfig;
use crate::sparsity::{Pattern, PatternSpec};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"LGEN";
pub const CHECKPOINT_VERSION: u32 = 1;

fn header_text(model: &HybridModel, map: &LayerMap) -> String {
    let c = &model.config;
    let layers: Vec<String> = map.specs().iter().map(|s| s.pattern.to_string()).collect();
    // f64 Display is the shortest round-tripping representation
    format!(
        "n_layers={}\nn_heads={}\nhead_dim={}\nffn_mult={}\nvocab_size={}\nblock_size={}\n\
         rope_base={}\nseed={}\ntied_embeddings={}\nplacement={}\nfull_fraction={}\nlayers={}\n",
        c.n_layers,
        c.n_heads,
        c.head_dim,
        c.ffn_mult,
        c.vocab_size,
        c.block_size,
        c.rope.base,
        c.seed,
        c.tied_embeddings,
        map.placement,
        map.full_fraction,
        layers.join(";"),
    )
}

pub fn write_checkpoint(w: &mut impl Write, model: &HybridModel, map: &LayerMap) -> Result<()> {
    map.check(&model.config)?;
    let header = header_text(model, map);
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    w.write_all(&(header.len() as u32).to_le_bytes())?;
    w.write_all(header.as_bytes())?;
    for (_, m) in model.params.named() {
        for v in m.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn save_checkpoint(path: impl AsRef<Path>, model: &HybridModel, map: &LayerMap) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_checkpoint(&mut w, model, map)?;
    w.flush()?;
    Ok(())
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

pub fn read_checkpoint(r: &mut impl Read) -> Result<(HybridModel, LayerMap)> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(bad("bad magic bytes"));
    }
    let mut word = [0u8; 4];
    r.read_exact(&mut word)?;
    let version = u32::from_le_bytes(word);
    if version != CHECKPOINT_VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    r.read_exact(&mut word)?;
    let mut header = vec![0u8; u32::from_le_bytes(word) as usize];
    r.read_exact(&mut header)?;
    let header = String::from_utf8(header).map_err(|_| bad("header is not UTF-8"))?;
    let fields: BTreeMap<&str, &str> = header
        .lines()
        .filter_map(|l| l.split_once('='))
        .map(|(k, v)| (k.trim(), v.trim()))
        .collect();
    let get = |k: &str| fields.get(k).copied().ok_or_else(|| bad(format!("missing `{k}`")));
    fn num<T: std::str::FromStr>(k: &str, v: &str) -> Result<T> {
        v.parse().map_err(|_| bad(format!("bad value for `{k}`: {v}")))
    }

    let head_dim: usize = num("head_dim", get("head_dim")?)?;
    let config = ModelConfig {
        n_layers: num("n_layers", get("n_layers")?)?,
        n_heads: num("n_heads", get("n_heads")?)?,
        head_dim,
        ffn_mult: num("ffn_mult", get("ffn_mult")?)?,
        vocab_size: num("vocab_size", get("vocab_size")?)?,
        block_size: num("block_size", get("block_size")?)?,
        rope: RopeConfig {
            head_dim,
            base: num("rope_base", get("rope_base")?)?,
        },
        seed: num("seed", get("seed")?)?,
        tied_embeddings: num("tied_embeddings", get("tied_embeddings")?)?,
    };
    config.validate()?;
    let specs = get("layers")?
        .split(';')
        .map(|s| {
            s.parse::<Pattern>().map(|pattern| PatternSpec {
                pattern,
                block_size: config.block_size,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let placement: Placement = get("placement")?.parse()?;
    let mut map = LayerMap::from_specs(specs, placement)?;
    map.full_fraction = num("full_fraction", get("full_fraction")?)?;
    map.check(&config)?;

    let mut model = HybridModel {
        params: super::Parameters::zeros(&config),
        config,
    };
    let mut buf = [0u8; 8];
    for m in model.params.tensors_mut() {
        for v in m.data_mut() {
            r.read_exact(&mut buf).map_err(|_| bad("truncated parameter data"))?;
            *v = f64::from_le_bytes(buf);
        }
    }
    if r.read(&mut buf)? != 0 {
        return Err(bad("trailing bytes after parameters"));
    }
    Ok((model, map))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(HybridModel, LayerMap)> {
    read_checkpoint(&mut BufReader::new(File::open(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::build_layer_map;

    fn model() -> (HybridModel, LayerMap) {
        let cfg = ModelConfig {
            n_layers: 3,
            n_heads: 2,
            head_dim: 4,
            ffn_mult: 2,
            vocab_size: 11,
            block_size: 4,
            rope: RopeConfig {
                head_dim: 4,
                base: RopeConfig::DEFAULT_BASE,
            },
            seed: 99,
            tied_embeddings: false,
        };
        let map =
            build_layer_map(&cfg, PatternSpec::block_stride(3, 4), Placement::Middle, 1.0 / 3.0)
                .unwrap();
        (HybridModel::init(cfg).unwrap(), map)
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let (m, map) = model();
        let mut bytes = Vec::new();
        write_checkpoint(&mut bytes, &m, &map).unwrap();
        assert_eq!(&bytes[..4], b"LGEN");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        let (m2, map2) = read_checkpoint(&mut bytes.as_slice()).unwrap();
        assert_eq!(m, m2);
        assert_eq!(map, map2);
        let bits = |m: &HybridModel| m.params.to_flat().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&m), bits(&m2));
    }

    #[test]
    fn file_round_trip() {
        let (m, map) = model();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("toy.lgen");
        save_checkpoint(&path, &m, &map).unwrap();
        let (m2, map2) = load_checkpoint(&path).unwrap();
        assert_eq!((m, map), (m2, map2));
    }

    #[test]
    fn corrupt_inputs_are_rejected() {
        let (m, map) = model();
        let mut bytes = Vec::new();
        write_checkpoint(&mut bytes, &m, &map).unwrap();
        let mut bad_magic = bytes.clone();
        bad_magic[0] = b'X';
        assert!(read_checkpoint(&mut bad_magic.as_slice()).is_err());
        let truncated = &bytes[..bytes.len() - 3];
        assert!(read_checkpoint(&mut &truncated[..]).is_err());
        let mut trailing = bytes.clone();
        trailing.push(0);
        assert!(read_checkpoint(&mut trailing.as_slice()).is_err());
    }
}
