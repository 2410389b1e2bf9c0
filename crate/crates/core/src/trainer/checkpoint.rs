//! Checkpoint directory layout:
//!
//! * `manifest.txt`: one `name<TAB>shape<TAB>byte offset` line per tensor
//! * `params.bin`: little-endian `f64` values in manifest order
//! * `model.conf`: the model configuration
//! * `dataset.meta.json`: metadata of the training dataset

use std::fs;
use std::path::Path;

use crate::anchor::AnchorTable;
use crate::config::{model_config_from_text, model_config_to_text};
use crate::data::{meta_to_json, parse_meta, DatasetMeta, Normalizer};
use crate::error::{contract, Error, Result};
use crate::model::{Model, ModelParams};
use crate::tensor::Tensor;

pub const MANIFEST: &str = "manifest.txt";
pub const BLOB: &str = "params.bin";
pub const MODEL_CONF: &str = "model.conf";
pub const META: &str = "dataset.meta.json";

const NORMALIZER: &str = "normalizer";
const ANCHOR: &str = "anchor.xbar";
const ANCHOR_INFO: &str = "anchor.info";

fn extra_tensors(model: &Model) -> Vec<(String, Tensor)> {
    let n = &model.normalizer;
    let mut out = vec![(NORMALIZER.to_string(), Tensor::matrix(1, 2, vec![n.mean, n.std]).expect("shape"))];
    if let Some(a) = &model.anchors {
        out.push((ANCHOR.into(), a.xbar.clone()));
        let info = vec![a.steps_per_week as f64, a.week_phase_of_origin as f64, a.segments as f64];
        out.push((ANCHOR_INFO.into(), Tensor::matrix(1, 3, info).expect("shape")));
    }
    out
}

pub fn save_checkpoint(dir: &Path, model: &Model, meta: &DatasetMeta) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut manifest = String::new();
    let mut blob = Vec::new();
    let mut write = |name: &str, t: &Tensor| {
        let shape: Vec<String> = t.shape().iter().map(|d| d.to_string()).collect();
        manifest.push_str(&format!("{name}\t{}\t{}\n", shape.join(","), blob.len()));
        for v in t.data() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    };
    model.params.visit(&mut |name, t| write(&name, t));
    for (name, t) in extra_tensors(model) {
        write(&name, &t);
    }
    fs::write(dir.join(MANIFEST), manifest)?;
    fs::write(dir.join(BLOB), blob)?;
    fs::write(dir.join(MODEL_CONF), model_config_to_text(&model.cfg))?;
    fs::write(dir.join(META), meta_to_json(meta))?;
    Ok(())
}

fn bad(msg: impl Into<String>) -> Error {
    contract(format!("corrupt checkpoint: {}", msg.into()))
}

fn read_tensors(dir: &Path) -> Result<Vec<(String, Tensor)>> {
    let manifest = fs::read_to_string(dir.join(MANIFEST))?;
    let blob = fs::read(dir.join(BLOB))?;
    let mut out = Vec::new();
    let mut expected_offset = 0usize;
    for (i, line) in manifest.lines().enumerate() {
        let fields: Vec<&str> = line.split('\t').collect();
        let [name, shape, offset] = fields[..] else {
            return Err(Error::Parse { line: i + 1, msg: format!("expected three tab-separated fields in `{line}`") });
        };
        let shape: Vec<usize> = shape
            .split(',')
            .map(|d| d.parse().map_err(|_| Error::Parse { line: i + 1, msg: format!("bad shape `{shape}`") }))
            .collect::<Result<_>>()?;
        let offset: usize =
            offset.parse().map_err(|_| Error::Parse { line: i + 1, msg: format!("bad offset `{offset}`") })?;
        if offset != expected_offset {
            return Err(bad(format!("`{name}` at offset {offset}, expected {expected_offset}")));
        }
        let count: usize = shape.iter().product();
        let end = offset + 8 * count;
        let bytes = blob.get(offset..end).ok_or_else(|| bad(format!("`{name}` runs past the end of {BLOB}")))?;
        let data = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        out.push((name.to_string(), Tensor::new(shape, data)?));
        expected_offset = end;
    }
    if expected_offset != blob.len() {
        return Err(bad(format!("{} trailing bytes in {BLOB}", blob.len() - expected_offset)));
    }
    Ok(out)
}

pub fn load_checkpoint(dir: &Path) -> Result<(Model, DatasetMeta)> {
    let cfg = model_config_from_text(&fs::read_to_string(dir.join(MODEL_CONF))?)?;
    let meta = parse_meta(&fs::read_to_string(dir.join(META))?)?;
    let template = ModelParams::init(&cfg, 0)?;
    let mut tensors = read_tensors(dir)?.into_iter();

    let mut values = Vec::new();
    for (name, t) in template.named() {
        let (got, value) = tensors.next().ok_or_else(|| bad(format!("missing `{name}`")))?;
        if got != name || value.shape() != t.shape() {
            return Err(bad(format!("expected `{name}` {:?}, found `{got}` {:?}", t.shape(), value.shape())));
        }
        values.push(value);
    }
    let params = template.with_flat(values)?;

    let (name, norm) = tensors.next().ok_or_else(|| bad("missing normalizer"))?;
    if name != NORMALIZER || norm.len() != 2 {
        return Err(bad(format!("expected normalizer, found `{name}`")));
    }
    let normalizer = Normalizer { mean: norm.data()[0], std: norm.data()[1], null_value: meta.null_value };

    let anchors = match tensors.next() {
        None => None,
        Some((name, xbar)) => {
            let (info_name, info) = tensors.next().ok_or_else(|| bad("missing anchor info"))?;
            if name != ANCHOR || info_name != ANCHOR_INFO || info.len() != 3 {
                return Err(bad(format!("unexpected tensors `{name}`, `{info_name}`")));
            }
            let d = info.data();
            Some(AnchorTable {
                xbar,
                steps_per_week: d[0] as usize,
                week_phase_of_origin: d[1] as usize,
                segments: d[2] as usize,
            })
        }
    };
    if let Some((name, _)) = tensors.next() {
        return Err(bad(format!("unexpected tensor `{name}`")));
    }
    if cfg.uses_anchor() != anchors.is_some() {
        return Err(bad("anchor table presence does not match the model configuration"));
    }
    Ok((Model { cfg, params, normalizer, anchors }, meta))
}
