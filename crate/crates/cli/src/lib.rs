//! Pipeline commands behind the `trajcast` binary. Each command is a
//! plain function over paths so tests can drive the full pipeline
//! in-process.

use std::io::Write;
use std::path::Path;

use trajcast_core::config::RunConfig;
use trajcast_core::data::{
    build_windows, generate_synthetic, normalize_scene, pad_scenes, parse_records, read_archive,
    retain_neighbors, temporal_split, validate_scene, write_archive, write_records, GenConfig,
    Scene,
};
use trajcast_core::error::{Error, Result};
use trajcast_core::eval::{evaluate, export_attention_trace, spatial_error_field, GridSpec};
use trajcast_core::model::{load_checkpoint, save_checkpoint, train_epochs, Trainer};
use trajcast_core::modes::{load_bank, modes_from_training, save_bank};

/// Generate a synthetic record file.
pub fn cmd_gen(config_path: &Path, out: &Path, seed_override: Option<u64>) -> Result<()> {
    let config = GenConfig::load(config_path)?;
    let seed = seed_override.unwrap_or(config.seed);
    let records = generate_synthetic(&config, seed)?;
    let file = std::fs::File::create(out)?;
    let mut w = std::io::BufWriter::new(file);
    write_records(&mut w, &records)?;
    w.flush()?;
    Ok(())
}

/// Windows -> neighbor retention -> normalization -> padding -> temporal
/// split; writes `train.jsonl` and `test.jsonl` under `out_dir`.
pub fn cmd_preprocess(input: &Path, config_path: &Path, out_dir: &Path) -> Result<()> {
    let config = RunConfig::load(config_path)?;
    let file = std::fs::File::open(input)?;
    let records = parse_records(std::io::BufReader::new(file))?;
    if records.is_empty() {
        return Err(Error::Data(format!("no records in {}", input.display())));
    }
    let h = &config.horizons;
    let windows = build_windows(&records, h.dt, h.t_obs, h.t_pre);
    if windows.is_empty() {
        return Err(Error::Data(
            "no complete observation/prediction windows".into(),
        ));
    }
    let mut scenes = Vec::with_capacity(windows.len());
    for w in &windows {
        let kept = retain_neighbors(w, config.neighbor_radius, h.t_obs);
        scenes.push(normalize_scene(w, &kept, h.t_obs, h.t_pre)?);
    }
    pad_scenes(&mut scenes, h.t_obs);
    for s in &scenes {
        validate_scene(s, h.t_obs, h.t_pre)?;
    }
    let (train, test) = temporal_split(scenes, config.split_ratio);
    std::fs::create_dir_all(out_dir)?;
    write_archive(&out_dir.join("train.jsonl"), &train)?;
    write_archive(&out_dir.join("test.jsonl"), &test)?;
    Ok(())
}

/// Fit the motion-mode bank from the training archive.
pub fn cmd_cluster(
    train_path: &Path,
    config_path: &Path,
    out: &Path,
    seed_override: Option<u64>,
) -> Result<()> {
    let config = RunConfig::load(config_path)?;
    let scenes = load_scenes(train_path, &config)?;
    let seed = seed_override.unwrap_or(config.training.seed);
    let bank = modes_from_training(&scenes, config.model.k_modes, config.horizons.t_pre, seed)?;
    save_bank(&bank, out)
}

/// Train and write the checkpoint plus a line-delimited epoch log.
pub fn cmd_train(
    train_path: &Path,
    bank_path: &Path,
    config_path: &Path,
    out: &Path,
    log_path: &Path,
    seed_override: Option<u64>,
) -> Result<()> {
    let config = RunConfig::load(config_path)?;
    let scenes = load_scenes(train_path, &config)?;
    let bank = load_bank(bank_path)?;
    let seed = seed_override.unwrap_or(config.training.seed);
    let mut trainer = Trainer::new(config.clone(), bank, seed)?;
    let log = train_epochs(&mut trainer, &scenes, config.training.epochs, seed)?;
    let file = std::fs::File::create(log_path)?;
    let mut w = std::io::BufWriter::new(file);
    for entry in &log {
        let line = serde_json::to_string(entry)
            .map_err(|e| Error::Format(format!("log serialization failed: {e}")))?;
        writeln!(w, "{line}")?;
    }
    w.flush()?;
    save_checkpoint(&trainer.params, &config, seed, out)
}

/// Metrics plus both spatial error fields, written under `out_dir`.
#[allow(clippy::too_many_arguments)]
pub fn cmd_eval(
    checkpoint: &Path,
    test_path: &Path,
    bank_path: &Path,
    config_path: &Path,
    out_dir: &Path,
    sigma: f64,
    grid_size: usize,
    threads: usize,
) -> Result<()> {
    let config = RunConfig::load(config_path)?;
    let (params, _) = load_checkpoint(checkpoint, &config)?;
    let scenes = load_scenes(test_path, &config)?;
    let bank = load_bank(bank_path)?;
    if bank.k != config.model.k_modes {
        return Err(Error::Config(format!(
            "bank holds K = {} modes, config expects {}",
            bank.k, config.model.k_modes
        )));
    }
    let report = evaluate(
        &params,
        &bank,
        &config,
        &scenes,
        config.model.k_top,
        &[2.0, 3.0],
        0.2,
        threads,
    )?;
    std::fs::create_dir_all(out_dir)?;
    write_json(&out_dir.join("metrics.json"), &report)?;

    let per_sample = report
        .per_sample
        .as_ref()
        .expect("evaluate records samples");
    let ade: Vec<f64> = per_sample.iter().map(|p| p.min_ade).collect();
    let fde: Vec<f64> = per_sample.iter().map(|p| p.min_fde).collect();
    let obs_anchors: Vec<[f64; 2]> = per_sample.iter().map(|p| p.obs_end).collect();
    let gt_anchors: Vec<[f64; 2]> = per_sample.iter().map(|p| p.gt_end).collect();
    let pad = 2.0 * sigma;
    let ade_grid = GridSpec::covering(&obs_anchors, pad, grid_size, grid_size);
    let fde_grid = GridSpec::covering(&gt_anchors, pad, grid_size, grid_size);
    write_json(
        &out_dir.join("field_minade.json"),
        &spatial_error_field(&ade, &obs_anchors, &ade_grid, sigma)?,
    )?;
    write_json(
        &out_dir.join("field_minfde.json"),
        &spatial_error_field(&fde, &gt_anchors, &fde_grid, sigma)?,
    )?;
    Ok(())
}

/// Export the attention trace for one archived scene.
pub fn cmd_explain(
    checkpoint: &Path,
    archive: &Path,
    scene_index: usize,
    config_path: &Path,
    bank_path: &Path,
    out: &Path,
) -> Result<()> {
    let config = RunConfig::load(config_path)?;
    let (params, _) = load_checkpoint(checkpoint, &config)?;
    let bank = load_bank(bank_path)?;
    let scenes = read_archive(archive)?;
    let scene = scenes.get(scene_index).ok_or_else(|| {
        Error::Config(format!(
            "scene index {scene_index} out of range; archive holds {}",
            scenes.len()
        ))
    })?;
    export_attention_trace(&params, &bank, &config, scene, out)?;
    Ok(())
}

fn load_scenes(path: &Path, config: &RunConfig) -> Result<Vec<Scene>> {
    let scenes = read_archive(path)?;
    if scenes.is_empty() {
        return Err(Error::Data(format!("no scenes in {}", path.display())));
    }
    for s in &scenes {
        validate_scene(s, config.horizons.t_obs, config.horizons.t_pre)?;
    }
    Ok(scenes)
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)
        .map_err(|e| Error::Format(format!("serialization failed: {e}")))?;
    std::fs::write(path, text)?;
    Ok(())
}

/// Map an error to the documented process exit code.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) | Error::Contract(_) => 2,
        Error::Data(_) | Error::Format(_) | Error::Io(_) | Error::Shape(_) => 3,
        Error::Numeric(_) => 4,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes_follow_the_contract() {
        assert_eq!(exit_code(&Error::Config("k".into())), 2);
        assert_eq!(exit_code(&Error::Contract("c".into())), 2);
        assert_eq!(exit_code(&Error::Data("d".into())), 3);
        assert_eq!(exit_code(&Error::Format("f".into())), 3);
        assert_eq!(exit_code(&Error::Numeric("nan".into())), 4);
    }
}
