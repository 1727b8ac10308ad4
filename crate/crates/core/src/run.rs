//! Evaluation and single-image editing from a trained checkpoint, plus the
//! image file formats the command line accepts.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::config::PipelineConfig;
use crate::dataforge::{Dataset, Split};
use crate::encoders::{image_dims, validate_image};
use crate::error::{Error, Result};
use crate::metrics::{evaluate, EvalItem, MetricReport, ToyEmbedder};
use crate::model::{EditOutput, Model};
use crate::params::write_archive;
use crate::rng;
use crate::tensor::Tensor;
use crate::train::check_dataset_dims;

/// Binary PPM (P6) preview; non-RGB images are written as grey from channel 0.
pub fn write_ppm(path: &Path, img: &Tensor) -> Result<()> {
    let (h, w, c) = image_dims(img)?;
    let mut bytes = format!("P6\n{w} {h}\n255\n").into_bytes();
    for px in img.data().chunks_exact(c) {
        for k in 0..3 {
            let v = if c >= 3 { px[k] } else { px[0] };
            bytes.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_ppm(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |m: &str| Error::format(path, m.to_string());
    let mut fields = Vec::new();
    let mut i = 0;
    while fields.len() < 4 {
        while i < bytes.len() && (bytes[i].is_ascii_whitespace() || bytes[i] == b'#') {
            if bytes[i] == b'#' {
                while i < bytes.len() && bytes[i] != b'\n' {
                    i += 1;
                }
            } else {
                i += 1;
            }
        }
        let start = i;
        while i < bytes.len() && !bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        if start == i {
            return Err(bad("truncated PPM header"));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..i]).into_owned());
    }
    if fields[0] != "P6" {
        return Err(bad("only binary P6 PPM is supported"));
    }
    let num = |s: &str| s.parse::<usize>().map_err(|_| bad("bad PPM header number"));
    let (w, h, max) = (num(&fields[1])?, num(&fields[2])?, num(&fields[3])?);
    if max == 0 || max > 255 {
        return Err(bad("PPM maxval must be 1..=255"));
    }
    let body = &bytes[(i + 1).min(bytes.len())..];
    if body.len() != w * h * 3 {
        return Err(bad(&format!("expected {} pixel bytes, found {}", w * h * 3, body.len())));
    }
    Tensor::new(&[h, w, 3], body.iter().map(|&b| b as f64 / max as f64).collect())
}

/// `.ppm` files are decoded as PPM; anything else must be an RBT1 tensor.
pub fn read_image(path: &Path) -> Result<Tensor> {
    let img = match path.extension().and_then(|e| e.to_str()) {
        Some("ppm") => read_ppm(path)?,
        _ => Tensor::load(path)?,
    };
    image_dims(&img).map_err(|e| Error::format(path, e.to_string()))?;
    Ok(img)
}

/// Sampler stream for one evaluation sample; independent of evaluation order.
pub fn sample_rng(seed: u64, id: &str) -> rng::StreamRng {
    rng::stream(seed, &format!("{}/{id}", rng::SAMPLER), 0)
}

/// Edit every validation sample (or copy targets when `oracle`) and score the results.
/// Writes `report.json` and `report.txt` into `out_dir`.
pub fn evaluate_checkpoint(
    cfg: &PipelineConfig,
    dataset_dir: &Path,
    checkpoint: &Path,
    out_dir: &Path,
    oracle: bool,
) -> Result<MetricReport> {
    let model = Model::load(cfg, checkpoint)?;
    let ds = Dataset::open(dataset_dir)?;
    check_dataset_dims(cfg, &ds)?;
    let mut items = Vec::new();
    let mut outputs = BTreeMap::new();
    for rec in ds.split(Split::Val) {
        let s = ds.load(rec)?;
        let out = if oracle {
            s.target.clone()
        } else {
            model.edit(&s.source, &s.instruction, &mut sample_rng(cfg.seed, &rec.id))?.image
        };
        outputs.insert(rec.id.clone(), out);
        items.push(EvalItem {
            id: rec.id.clone(),
            category: rec.category.name().to_string(),
            source: s.source,
            target: s.target,
            source_caption: rec.source_caption.clone(),
            target_caption: rec.target_caption.clone(),
        });
    }
    let report = evaluate(&items, &outputs, &ToyEmbedder::new(cfg.seed), &ToyEmbedder::dino(cfg.seed))?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    cfg.write_effective(out_dir)?;
    let json = out_dir.join("report.json");
    fs::write(&json, report.to_json()).map_err(|e| Error::io(&json, e))?;
    let txt = out_dir.join("report.txt");
    fs::write(&txt, report.to_table()).map_err(|e| Error::io(&txt, e))?;
    Ok(report)
}

/// Edit one image file. Writes `out` (RBT1) plus a `.ppm` preview next to it and,
/// when asked, an archive of the guidance tensors.
pub fn edit_file(
    cfg: &PipelineConfig,
    checkpoint: &Path,
    image: &Path,
    instruction: &str,
    out: &Path,
    dump: Option<&Path>,
) -> Result<EditOutput> {
    let model = Model::load(cfg, checkpoint)?;
    let src = read_image(image)?;
    validate_image(&src, cfg)?;
    let result = model.edit(&src, instruction, &mut rng::stream(cfg.seed, rng::SAMPLER, 0))?;
    result.image.save(out)?;
    write_ppm(&out.with_extension("ppm"), &result.image)?;
    if let Some(path) = dump {
        let entries = result.dump.entries();
        write_archive(path, &entries, serde_json::json!({ "instruction": instruction }))?;
    }
    Ok(result)
}
