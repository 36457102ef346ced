//! Model file format: magic `UMDL`, version, config block, provenance,
//! then every parameter block in fixed order as little-endian f64. The
//! serialization is deterministic, so save → load → save is byte-identical.

use std::path::Path;

use crate::error::{Error, Result};
use crate::io::{BinReader, BinWriter};
use crate::types::ItemId;
use crate::uncertainty::HeteroscedasticHead;

use super::mlp::{Layer, Mlp};
use super::{ModelConfig, TrainedModel};

const UMDL_MAGIC: &[u8; 4] = b"UMDL";
const UMDL_VERSION: u32 = 1;
const META_MAGIC: &[u8; 4] = b"META";

pub fn save_model(model: &TrainedModel, path: &Path) -> Result<()> {
    save_model_with_meta(model, path, None)
}

/// Save variant appending an optional `META` trailer with the config hash of
/// the producing run. Readers accept files with or without it.
pub fn save_model_with_meta(
    model: &TrainedModel,
    path: &Path,
    config_hash: Option<u64>,
) -> Result<()> {
    let mut w = BinWriter::create(path)?;
    w.bytes(UMDL_MAGIC)?;
    w.u32(UMDL_VERSION)?;
    write_config(&mut w, &model.config)?;
    w.u64(model.split_hash)?;
    let index = model.item_index();
    w.u64(index.len() as u64)?;
    for item in index.keys() {
        w.u64(item.0)?;
    }
    write_f64s(&mut w, &model.item_features)?;
    write_mlp(&mut w, &model.item_tower)?;
    write_mlp(&mut w, &model.user_head)?;
    write_head(&mut w, &model.u2i_head)?;
    write_head(&mut w, &model.i2i_head)?;
    if let Some(hash) = config_hash {
        w.bytes(META_MAGIC)?;
        w.u64(hash)?;
    }
    w.flush()
}

pub fn load_model(path: &Path) -> Result<TrainedModel> {
    load_model_with_meta(path).map(|(model, _)| model)
}

/// Load variant that also surfaces the `META` config hash if present.
pub fn load_model_with_meta(path: &Path) -> Result<(TrainedModel, Option<u64>)> {
    let mut r = BinReader::open(path)?;
    r.expect_magic(UMDL_MAGIC)?;
    let version = r.u32()?;
    if version != UMDL_VERSION {
        return Err(Error::Format(format!(
            "{}: unsupported model file version {version}",
            path.display()
        )));
    }
    let config = read_config(&mut r)?;
    config.validate()?;
    let split_hash = r.u64()?;
    let count = r.u64()? as usize;
    let mut items = Vec::with_capacity(count);
    for _ in 0..count {
        items.push(ItemId(r.u64()?));
    }
    let mut model = TrainedModel::init_zeros(&items, config)?;
    model.split_hash = split_hash;
    let n_features = model.item_features.len();
    model.item_features = read_f64s(&mut r, n_features)?;
    model.item_tower = read_mlp(&mut r, &model.item_tower)?;
    model.user_head = read_mlp(&mut r, &model.user_head)?;
    model.u2i_head = read_head(&mut r, model.config.u2i_repr_dim())?;
    model.i2i_head = read_head(&mut r, model.config.i2i_repr_dim())?;
    let meta = match r.remaining()? {
        0 => None,
        12 => {
            let mut magic = [0u8; 4];
            r.bytes(&mut magic)?;
            if &magic != META_MAGIC {
                return Err(Error::Format(format!(
                    "{}: unrecognized trailer after model blocks",
                    path.display()
                )));
            }
            Some(r.u64()?)
        }
        n => {
            return Err(Error::Format(format!(
                "{}: {n} unexpected trailing bytes after model blocks",
                path.display()
            )))
        }
    };
    Ok((model, meta))
}

fn write_config(w: &mut BinWriter, c: &ModelConfig) -> Result<()> {
    w.u32(c.embedding_dim as u32)?;
    write_widths(w, &c.item_tower_layers)?;
    write_widths(w, &c.user_head_layers)?;
    w.u32(c.context_dim as u32)?;
    w.f64(c.temperature)?;
    w.f64(c.lambda_i2i)?;
    w.u32(c.sample_pos as u32)?;
    w.u32(c.sample_neg as u32)?;
    w.u32(c.u2i_negatives as u32)?;
    w.f64(c.learning_rate)?;
    w.f64(c.logvar_decay)?;
    w.u32(c.batch_size as u32)?;
    w.u32(c.epochs as u32)?;
    w.u32(c.mc_train as u32)?;
    w.u32(c.mc_eval as u32)?;
    w.u64(c.seed)
}

fn read_config(r: &mut BinReader) -> Result<ModelConfig> {
    Ok(ModelConfig {
        embedding_dim: r.u32()? as usize,
        item_tower_layers: read_widths(r)?,
        user_head_layers: read_widths(r)?,
        context_dim: r.u32()? as usize,
        temperature: r.f64()?,
        lambda_i2i: r.f64()?,
        sample_pos: r.u32()? as usize,
        sample_neg: r.u32()? as usize,
        u2i_negatives: r.u32()? as usize,
        learning_rate: r.f64()?,
        logvar_decay: r.f64()?,
        batch_size: r.u32()? as usize,
        epochs: r.u32()? as usize,
        mc_train: r.u32()? as usize,
        mc_eval: r.u32()? as usize,
        seed: r.u64()?,
    })
}

fn write_widths(w: &mut BinWriter, widths: &[usize]) -> Result<()> {
    w.u32(widths.len() as u32)?;
    for &d in widths {
        w.u32(d as u32)?;
    }
    Ok(())
}

fn read_widths(r: &mut BinReader) -> Result<Vec<usize>> {
    let n = r.u32()? as usize;
    if n > 64 {
        return Err(Error::Format(format!("implausible layer count {n}")));
    }
    (0..n).map(|_| Ok(r.u32()? as usize)).collect()
}

fn write_f64s(w: &mut BinWriter, values: &[f64]) -> Result<()> {
    for &v in values {
        w.f64(v)?;
    }
    Ok(())
}

fn read_f64s(r: &mut BinReader, n: usize) -> Result<Vec<f64>> {
    (0..n).map(|_| r.f64()).collect()
}

fn write_mlp(w: &mut BinWriter, mlp: &Mlp) -> Result<()> {
    for layer in &mlp.layers {
        w.u32(layer.in_dim as u32)?;
        w.u32(layer.out_dim as u32)?;
        w.bytes(&[layer.relu as u8])?;
        write_f64s(w, &layer.w)?;
        write_f64s(w, &layer.b)?;
    }
    Ok(())
}

/// Reads layers against the expected shape (from the config-built skeleton),
/// so a corrupted shape is caught as a format error rather than misread.
fn read_mlp(r: &mut BinReader, skeleton: &Mlp) -> Result<Mlp> {
    let mut layers = Vec::with_capacity(skeleton.layers.len());
    for expect in &skeleton.layers {
        let in_dim = r.u32()? as usize;
        let out_dim = r.u32()? as usize;
        let mut relu = [0u8; 1];
        r.bytes(&mut relu)?;
        if in_dim != expect.in_dim || out_dim != expect.out_dim || (relu[0] != 0) != expect.relu {
            return Err(Error::Format(format!(
                "layer shape ({in_dim}x{out_dim}, relu={}) does not match config ({}x{}, relu={})",
                relu[0] != 0,
                expect.in_dim,
                expect.out_dim,
                expect.relu
            )));
        }
        layers.push(Layer {
            w: read_f64s(r, in_dim * out_dim)?,
            b: read_f64s(r, out_dim)?,
            in_dim,
            out_dim,
            relu: relu[0] != 0,
        });
    }
    Ok(Mlp { layers })
}

fn write_head(w: &mut BinWriter, head: &HeteroscedasticHead) -> Result<()> {
    w.u32(head.width() as u32)?;
    w.u32(head.mc_samples() as u32)?;
    w.u64(head.seed())?;
    write_f64s(w, &head.mu_w)?;
    w.f64(head.mu_b)?;
    write_f64s(w, &head.logvar_w)?;
    w.f64(head.logvar_b)
}

fn read_head(r: &mut BinReader, expect_width: usize) -> Result<HeteroscedasticHead> {
    let width = r.u32()? as usize;
    if width != expect_width {
        return Err(Error::Format(format!(
            "head width {width} does not match config width {expect_width}"
        )));
    }
    let mc_samples = r.u32()? as usize;
    let seed = r.u64()?;
    // The frozen Monte-Carlo draws regenerate from (mc_samples, seed).
    let mut head = HeteroscedasticHead::zeros(width, mc_samples, seed)?;
    head.mu_w = read_f64s(r, width)?;
    head.mu_b = r.f64()?;
    head.logvar_w = read_f64s(r, width)?;
    head.logvar_b = r.f64()?;
    Ok(head)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::{UserFeatures, UserId};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn sample_model(seed: u64) -> TrainedModel {
        let items: Vec<ItemId> = (0..12).map(|i| ItemId(i * 3)).collect();
        let config = ModelConfig {
            embedding_dim: 4,
            item_tower_layers: vec![6, 4],
            user_head_layers: vec![8, 5, 1],
            seed,
            ..ModelConfig::default()
        };
        let mut model = TrainedModel::init(&items, config).unwrap();
        model.split_hash = 0x1234_5678_9abc_def0;
        // Perturb the heads so serialization covers non-zero values.
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xF);
        for v in model
            .u2i_head
            .mu_w
            .iter_mut()
            .chain(model.i2i_head.logvar_w.iter_mut())
        {
            *v = rng.random_range(-1.0..1.0);
        }
        model.u2i_head.logvar_b = -0.5;
        model
    }

    #[test]
    fn round_trip_preserves_every_parameter() {
        let model = sample_model(21);
        let file = tempfile::NamedTempFile::new().unwrap();
        save_model(&model, file.path()).unwrap();
        let loaded = load_model(file.path()).unwrap();
        assert_eq!(model, loaded);
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let model = sample_model(22);
        let f1 = tempfile::NamedTempFile::new().unwrap();
        save_model(&model, f1.path()).unwrap();
        let loaded = load_model(f1.path()).unwrap();
        let f2 = tempfile::NamedTempFile::new().unwrap();
        save_model(&loaded, f2.path()).unwrap();
        assert_eq!(
            std::fs::read(f1.path()).unwrap(),
            std::fs::read(f2.path()).unwrap()
        );
    }

    #[test]
    fn truncated_file_is_rejected() {
        let model = sample_model(23);
        let file = tempfile::NamedTempFile::new().unwrap();
        save_model(&model, file.path()).unwrap();
        let bytes = std::fs::read(file.path()).unwrap();
        std::fs::write(file.path(), &bytes[..bytes.len() / 2]).unwrap();
        let err = load_model(file.path()).unwrap_err();
        assert!(matches!(err, Error::Format(_) | Error::Corruption(_)));
    }

    #[test]
    fn wrong_version_is_a_format_error() {
        let model = sample_model(24);
        let file = tempfile::NamedTempFile::new().unwrap();
        save_model(&model, file.path()).unwrap();
        let mut bytes = std::fs::read(file.path()).unwrap();
        bytes[4] = 99;
        std::fs::write(file.path(), &bytes).unwrap();
        assert!(matches!(
            load_model(file.path()).unwrap_err(),
            Error::Format(_)
        ));
    }

    #[test]
    fn loaded_model_scores_match_in_memory_model() {
        let model = sample_model(25);
        let file = tempfile::NamedTempFile::new().unwrap();
        save_model(&model, file.path()).unwrap();
        let loaded = load_model(file.path()).unwrap();
        let items: Vec<ItemId> = model.items().collect();
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for _ in 0..100 {
            let a = items[rng.random_range(0..items.len())];
            let b = items[rng.random_range(0..items.len())];
            let (la, _) = model.score_i2i(a, b).unwrap();
            let (lb, _) = loaded.score_i2i(a, b).unwrap();
            assert!((la - lb).abs() <= 1e-12);
            let user = UserFeatures::new(UserId(1), vec![a]);
            let (ua, ra) = model.score_u2i(&user, b).unwrap();
            let (ub, rb) = loaded.score_u2i(&user, b).unwrap();
            assert!((ua - ub).abs() <= 1e-12);
            assert_eq!(ra, rb);
        }
    }
}
