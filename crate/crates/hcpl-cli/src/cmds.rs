//! One function per subcommand. Each is a thin deterministic wrapper over
//! the library: read artifacts, run the module, write artifacts.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use log::info;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use hcpl_core::dataset::{CellDataset, NUM_CLASSES};
use hcpl_core::fusion::{correlation_profile, fuse_matrix, DEFAULT_BINS, DEFAULT_RHO_TH};
use hcpl_core::gbt::{gbt_train, GbtConfig};
use hcpl_core::io::{
    load_model, read_detections_csv, read_ground_truth_csv, read_labels_csv, read_tensor,
    save_model, write_labels_csv, write_tensor, LabelRow,
};
use hcpl_core::layers::BackboneConfig;
use hcpl_core::loss::LossKind;
use hcpl_core::models::{
    init_model, model_cam, predict, Model, ModelConfig, ModelFamily, PredictionMatrix,
};
use hcpl_core::phantom::{generate_phantom, PhantomConfig};
use hcpl_core::segpost::{segment_batch, ProbabilityMaps, SegmentConfig};
use hcpl_core::tensor::Tensor;
use hcpl_core::train::{train, TrainConfig};
use hcpl_core::vid::{
    crop_dataset_gen, init_crop_ratio_model, train_crop_ratio, VidModel, INTENSITY_FLAG_THRESHOLD,
    VISIBILITY_VALUES,
};
use hcpl_core::{cra, HcplError, Result};

use crate::artifacts::{
    build_cells, cell_map_path, cells_csv_string, fusion_profile_string, image_path, list_ids,
    load_cell_pairs, mask_path, nuclei_map_path, parse_cells_csv, parse_fusion_profile,
    write_matrix_detections, CellEntry, IMAGES_DIR, LABELS_FILE, MAPS_DIR, MASKS_DIR, TRUTH_FILE,
};
use crate::run::{read_text, write_text, Ctx};

fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| HcplError::io(path.display().to_string(), e))
}

fn phantom_config(ctx: &Ctx) -> Result<PhantomConfig> {
    let c = &ctx.config;
    let mixture = match c.f64_list("phantom", "mixture")? {
        Some(m) => m,
        None => PhantomConfig::uniform_mixture(c.usize_or("phantom", "active_classes", 8)?),
    };
    Ok(PhantomConfig {
        image_size: c.usize_or("phantom", "image_size", 64)?,
        num_images: c.usize_or("phantom", "num_images", 20)?,
        cells_per_image: c.usize_or("phantom", "cells_per_image", 8)?,
        cell_radius: c.usize_or("phantom", "cell_radius", 6)?,
        mixture,
        noise: c.f64_or("phantom", "noise", 0.02)?,
        seed: ctx.seed,
    })
}

pub fn cmd_synth(ctx: &mut Ctx) -> Result<()> {
    let cfg = phantom_config(ctx)?;
    let ds = generate_phantom(&cfg)?;
    create_dir(&ctx.out_path(IMAGES_DIR))?;
    create_dir(&ctx.out_path(MASKS_DIR))?;
    create_dir(&ctx.out_path(MAPS_DIR))?;
    for img in &ds.images {
        write_tensor(image_path(&ctx.out, img.image_id), &img.image)?;
        write_tensor(mask_path(&ctx.out_path(MASKS_DIR), img.image_id), &img.instances.to_tensor())?;
        write_tensor(nuclei_map_path(&ctx.out, img.image_id), &img.maps.nuclei)?;
        write_tensor(cell_map_path(&ctx.out, img.image_id), &img.maps.cell)?;
    }
    write_labels_csv(ctx.out_path(LABELS_FILE), &ds.weak_label_rows())?;
    hcpl_core::io::write_ground_truth_csv(ctx.out_path(TRUTH_FILE), &ds.ground_truth())?;
    let cells: usize = ds.images.iter().map(|i| i.cell_classes.len()).sum();
    info!("synthesised {} images, {} cells", ds.images.len(), cells);
    println!("images {} cells {} over_label_rate {:.4}", ds.images.len(), cells, ds.over_label_rate());
    Ok(())
}

pub fn cmd_segment(ctx: &mut Ctx, data: &Path) -> Result<()> {
    let data = ctx.input(data);
    let c = &ctx.config;
    let cfg = SegmentConfig {
        t_nuc: c.f64_or("segment", "t_nuc", 0.5)?,
        t_cell: c.f64_or("segment", "t_cell", 0.5)?,
        min_area: c.usize_or("segment", "min_area", 64)?,
        compare: c.bool_or("segment", "compare", false)?,
    };
    let ids = list_ids(&data.join(MAPS_DIR), "nuc")?;
    let maps = hcpl_core::par::try_map_indices(ids.len(), |k| {
        ProbabilityMaps::new(
            read_tensor(nuclei_map_path(&data, ids[k]))?,
            read_tensor(cell_map_path(&data, ids[k]))?,
        )
    })?;
    let results = segment_batch(&maps, &cfg)?;
    create_dir(&ctx.out_path(MASKS_DIR))?;
    let mut report = String::new();
    let mut total = 0usize;
    for (id, (masks, rep)) in ids.iter().zip(&results) {
        write_tensor(mask_path(&ctx.out_path(MASKS_DIR), *id), &masks.to_tensor())?;
        total += masks.count;
        let _ = write!(
            report,
            "image {id} instances {} removed_small {} removed_opening {}",
            masks.count, rep.cleanup.pixels_removed_small, rep.cleanup.pixels_removed_opening
        );
        if let Some(cmp) = &rep.comparison {
            let _ = write!(
                report,
                " full_count {} fast_count {} matched {} mean_iou {:.4}",
                cmp.full_count, cmp.fast_count, cmp.matched, cmp.mean_matched_iou
            );
        }
        report.push('\n');
    }
    write_text(&ctx.out_path("report.txt"), &report)?;
    info!("segmented {} images into {} instances", ids.len(), total);
    println!("images {} instances {}", ids.len(), total);
    Ok(())
}

fn model_config(ctx: &Ctx) -> Result<(ModelConfig, usize)> {
    let c = &ctx.config;
    let family = ModelFamily::from_tag(&c.str_or("model", "family", "cla"))?;
    let crop = c.usize_or("model", "crop", 24)?;
    let stages = c.usize_list_or("model", "stages", &[8, 16])?;
    let backbone =
        BackboneConfig { channels_in: 4, stage_widths: stages, input_h: crop, input_w: crop };
    let mut cfg = ModelConfig::new(family, backbone, NUM_CLASSES);
    cfg.w1 = c.f64_or("model", "w1", cfg.w1)?;
    cfg.w2 = c.f64_or("model", "w2", cfg.w2)?;
    cfg.validate()?;
    Ok((cfg, crop))
}

fn train_config(ctx: &Ctx, dataset: &CellDataset, seed: u64) -> Result<TrainConfig> {
    let c = &ctx.config;
    let mut cfg = TrainConfig::new(NUM_CLASSES).with_lr(c.f64_or("train", "lr0", 2e-4)?);
    cfg.epochs = c.usize_or("train", "epochs", 1)?;
    cfg.batch_size = c.usize_or("train", "batch", 16)?;
    cfg.seed = seed;
    cfg.loss = match c.str_or("train", "loss", "bce").as_str() {
        "bce" => LossKind::WeightedBce,
        "focal" => LossKind::Focal { gamma: c.f64_or("train", "gamma", 2.0)? },
        other => return Err(HcplError::Config(format!("unknown loss {other:?}"))),
    };
    if c.str_or("train", "weights", "uniform") == "inverse" {
        cfg.class_weights = dataset.inverse_frequency_weights();
    }
    if c.bool_or("train", "augment", false)? {
        cfg.augment = Some(Default::default());
    }
    Ok(cfg)
}

fn labels_map(path: &Path) -> Result<BTreeMap<u32, Vec<f64>>> {
    Ok(read_labels_csv(path)?.into_iter().map(|r| (r.cell_id, r.labels)).collect())
}

/// Per-cell image-label rows (the weak union over each cell's bag).
fn bag_labels(dataset: &CellDataset) -> Vec<Vec<f64>> {
    let mut rows = vec![Vec::new(); dataset.cells.len()];
    for (_, indices) in dataset.bags() {
        let union = dataset.image_label(&indices);
        for i in indices {
            rows[i] = union.clone();
        }
    }
    rows
}

pub fn cmd_train(ctx: &mut Ctx, data: &Path) -> Result<()> {
    let data = ctx.input(data);
    let (model_cfg, crop) = model_config(ctx)?;
    let labels = labels_map(&data.join(LABELS_FILE))?;
    let (dataset, _) = build_cells(&data, &data.join(MASKS_DIR), crop, Some(&labels))?;
    let train_cfg = train_config(ctx, &dataset, ctx.seed)?;

    let mut model = init_model(&model_cfg, ctx.seed)?;
    let report = train(&mut model, &dataset, &train_cfg)?;
    save_model(&ctx.out, &model)?;

    if model_cfg.family == ModelFamily::Dsa {
        let preds = predict(&model, &dataset.cells)?;
        let rho_th = ctx.config.f64_or("train", "rho_th", DEFAULT_RHO_TH)?;
        let profile = correlation_profile(&preds, &bag_labels(&dataset), rho_th, DEFAULT_BINS)?;
        write_text(&ctx.out_path("fusion.txt"), &fusion_profile_string(&profile))?;
    }

    let mut text = String::new();
    for (e, loss) in report.epoch_losses.iter().enumerate() {
        let _ = writeln!(text, "epoch {e} loss {loss:.6}");
    }
    let _ = writeln!(text, "steps {} final_lr {:.8}", report.total_steps, report.final_lr);
    write_text(&ctx.out_path("train_report.txt"), &text)?;
    info!("trained {} cells for {} steps", dataset.cells.len(), report.total_steps);
    println!(
        "cells {} steps {} final_loss {:.6}",
        dataset.cells.len(),
        report.total_steps,
        report.epoch_losses.last().copied().unwrap_or(f64::NAN)
    );
    Ok(())
}

pub fn cmd_relabel(ctx: &mut Ctx, data: &Path) -> Result<()> {
    let data = ctx.input(data);
    let (model_cfg, crop) = model_config(ctx)?;
    let labels = labels_map(&data.join(LABELS_FILE))?;
    let (dataset, _) = build_cells(&data, &data.join(MASKS_DIR), crop, Some(&labels))?;
    let c = &ctx.config;
    let cra_cfg = cra::CraConfig {
        beta: c.f64_or("relabel", "beta", 0.5)?,
        rounds: c.usize_or("relabel", "rounds", 2)?,
        committee: c.usize_or("relabel", "committee", 3)?,
    };

    let base_seed = ctx.seed;
    let committee = cra_cfg.committee;
    let trainer_ctx: &Ctx = ctx;
    let trainer = |ds: &CellDataset, round: usize| -> Result<Vec<PredictionMatrix>> {
        (0..committee)
            .map(|m| {
                let seed = base_seed.wrapping_add(((round * committee + m) as u64 + 1) * 9973);
                let mut model = init_model(&model_cfg, seed)?;
                let cfg = train_config(trainer_ctx, ds, seed)?;
                train(&mut model, ds, &cfg)?;
                predict(&model, &ds.cells)
            })
            .collect()
    };
    let (relabelled, report) = cra::run_cra(&dataset, trainer, &cra_cfg)?;

    let rows: Vec<LabelRow> = relabelled
        .cells
        .iter()
        .map(|cell| LabelRow {
            cell_id: cell.cell_id,
            image_id: cell.image_id,
            labels: cell.labels.clone(),
        })
        .collect();
    write_labels_csv(ctx.out_path(LABELS_FILE), &rows)?;

    let mut text = format!("positives {}\n", report.positive_count);
    for (round, hist) in report.histograms.iter().enumerate() {
        let counts: Vec<String> = hist.iter().map(|c| c.to_string()).collect();
        let _ = writeln!(text, "round {round} histogram {}", counts.join(","));
    }
    write_text(&ctx.out_path("histograms.txt"), &text)?;
    info!("relabelled {} cells over {} rounds", rows.len(), cra_cfg.rounds);
    println!("cells {} rounds {}", rows.len(), cra_cfg.rounds);
    Ok(())
}

pub fn cmd_infer(ctx: &mut Ctx, model_dir: &Path, data: &Path, masks: Option<&Path>) -> Result<()> {
    let model_dir = ctx.input(model_dir);
    let data = ctx.input(data);
    let masks = match masks {
        Some(m) => ctx.input(m),
        None => data.join(MASKS_DIR),
    };
    let model = load_model(&model_dir)?;
    let crop = model.cfg.backbone.input_h;
    let (dataset, entries) = build_cells(&data, &masks, crop, None)?;

    let started = Instant::now();
    let preds = predict(&model, &dataset.cells)?;
    let wall_ms = started.elapsed().as_millis();

    write_tensor(ctx.out_path("cell_probs.hcpl"), &preds.cell)?;
    if let Some(image) = &preds.image {
        write_tensor(ctx.out_path("image_probs.hcpl"), image)?;
    }
    let fusion_path = model_dir.join("fusion.txt");
    let final_probs = if model.cfg.family == ModelFamily::Dsa && fusion_path.is_file() {
        let profile = parse_fusion_profile(&read_text(&fusion_path)?, &fusion_path.display().to_string())?;
        let fused = fuse_matrix(&preds, &profile)?;
        write_tensor(ctx.out_path("fused_probs.hcpl"), &fused)?;
        fused
    } else {
        preds.cell.clone()
    };
    write_text(&ctx.out_path("cells.csv"), &cells_csv_string(&entries))?;
    write_matrix_detections(&ctx.out_path("detections.csv"), &final_probs, &entries)?;

    let n = entries.len().max(1);
    let per_cell = wall_ms as f64 / n as f64;
    info!("inferred {} cells in {} ms", entries.len(), wall_ms);
    println!("cells {} wall_ms {wall_ms} per_cell_ms {per_cell:.3}", entries.len());
    Ok(())
}

/// Reads one ensemble member's final probability matrix.
fn member_matrix(dir: &Path) -> Result<Tensor> {
    let fused = dir.join("fused_probs.hcpl");
    if fused.is_file() {
        read_tensor(&fused)
    } else {
        read_tensor(dir.join("cell_probs.hcpl"))
    }
}

fn train_vid(
    ctx: &Ctx,
    pairs: &[(Tensor, Tensor)],
    crop: usize,
) -> Result<VidModel> {
    let c = &ctx.config;
    let max_cells = c.usize_or("vid", "max_cells", 150)?;
    let stride = pairs.len().div_ceil(max_cells).max(1);
    let selected: Vec<usize> = (0..pairs.len()).step_by(stride).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(ctx.seed.wrapping_add(0xD1D));

    // boosted trees: intact masks against synthetically damaged ones
    let mut features = Vec::new();
    let mut labels = Vec::new();
    for &i in &selected {
        let (image, mask) = &pairs[i];
        features.push(hcpl_core::vid::morph_features(mask, image, INTENSITY_FLAG_THRESHOLD)?.to_vec());
        labels.push(1.0);
        let fraction = rng.random_range(0.35..0.9);
        let (dimg, dmask, _) = crop_dataset_gen(image, mask, fraction, rng.random())?;
        features.push(hcpl_core::vid::morph_features(&dmask, &dimg, INTENSITY_FLAG_THRESHOLD)?.to_vec());
        labels.push(0.0);
    }
    let gbt_cfg = GbtConfig {
        n_trees: c.usize_or("vid", "trees", 30)?,
        max_depth: c.usize_or("vid", "depth", 3)?,
        learning_rate: c.f64_or("vid", "gbt_lr", 0.2)?,
        ..Default::default()
    };
    let (gbt, _) = gbt_train(&features, &labels, &gbt_cfg)?;

    // crop-ratio classifier: originals plus one sample per removed-area band
    let mut examples = Vec::new();
    for &i in &selected {
        let (image, mask) = &pairs[i];
        examples.push((image.clone(), 1u8));
        for band in [0.32..0.48, 0.52..0.78, 0.82..0.95] {
            let fraction = rng.random_range(band);
            let (dimg, _, class) = crop_dataset_gen(image, mask, fraction, rng.random())?;
            examples.push((dimg, class));
        }
    }
    let backbone = BackboneConfig {
        channels_in: 4,
        stage_widths: c.usize_list_or("vid", "stages", &[6, 12])?,
        input_h: crop,
        input_w: crop,
    };
    let mut crop_model = init_crop_ratio_model(backbone, ctx.seed)?;
    train_crop_ratio(
        &mut crop_model,
        &examples,
        c.usize_or("vid", "epochs", 2)?,
        c.usize_or("vid", "batch", 16)?,
        c.f64_or("vid", "lr", 1e-3)?,
        ctx.seed,
    )?;

    Ok(VidModel {
        gbt,
        crop: crop_model,
        visibility: VISIBILITY_VALUES,
        intensity_threshold: INTENSITY_FLAG_THRESHOLD,
    })
}

pub fn cmd_ensemble(ctx: &mut Ctx, data: &Path, masks: Option<&Path>) -> Result<()> {
    let data = ctx.input(data);
    let masks = match masks {
        Some(m) => ctx.input(m),
        None => data.join(MASKS_DIR),
    };
    let spec = ctx
        .config
        .get("ensemble", "groups")
        .ok_or_else(|| HcplError::Config("ensemble needs [ensemble] groups".into()))?
        .to_string();

    // groups separated by ';', members by ','
    let mut groups: Vec<Vec<Tensor>> = Vec::new();
    let mut cells_text: Option<String> = None;
    let mut members = 0usize;
    for group_spec in spec.split(';') {
        let mut group = Vec::new();
        for member in group_spec.split(',').map(str::trim).filter(|s| !s.is_empty()) {
            let dir = ctx.input(Path::new(member));
            let text = read_text(&dir.join("cells.csv"))?;
            match &cells_text {
                None => cells_text = Some(text),
                Some(first) if *first == text => {}
                Some(_) => {
                    return Err(HcplError::Input(format!(
                        "{member}: cell table differs from the first member"
                    )))
                }
            }
            group.push(member_matrix(&dir)?);
            members += 1;
        }
        if !group.is_empty() {
            groups.push(group);
        }
    }
    let cells_text =
        cells_text.ok_or_else(|| HcplError::Config("ensemble groups list no members".into()))?;
    let entries: Vec<CellEntry> = parse_cells_csv(&cells_text, "cells.csv")?;

    let combined = hcpl_core::fusion::ensemble_hierarchical(&groups)?;
    if combined.shape()[0] != entries.len() {
        return Err(HcplError::Input(format!(
            "predictions cover {} cells, cell table {}",
            combined.shape()[0],
            entries.len()
        )));
    }

    let crop = ctx.config.usize_or("vid", "crop", 24)?;
    let weights = if ctx.config.bool_or("vid", "enable", true)? {
        let pairs = load_cell_pairs(&data, &masks, crop)?;
        if pairs.len() != entries.len() {
            return Err(HcplError::Input(format!(
                "dataset yields {} cells, cell table {}",
                pairs.len(),
                entries.len()
            )));
        }
        let vid = train_vid(ctx, &pairs, crop)?;
        let per_cell = hcpl_core::par::try_map_indices(pairs.len(), |i| {
            vid.weight(&pairs[i].0, &pairs[i].1)
        })?;
        per_cell
    } else {
        vec![1.0; entries.len()]
    };

    let matrix = PredictionMatrix { cell: combined, image: None };
    let final_probs = hcpl_core::fusion::apply_vid(&matrix, &weights)?.cell;

    write_tensor(ctx.out_path("final_probs.hcpl"), &final_probs)?;
    let mut vid_text = String::from("row,cell_id,weight\n");
    for (row, (e, w)) in entries.iter().zip(&weights).enumerate() {
        let _ = writeln!(vid_text, "{row},{},{w}", e.cell_id);
    }
    write_text(&ctx.out_path("vid.csv"), &vid_text)?;
    write_text(&ctx.out_path("cells.csv"), &cells_text)?;
    write_matrix_detections(&ctx.out_path("detections.csv"), &final_probs, &entries)?;
    info!("combined {} members over {} groups", members, groups.len());
    println!("members {members} groups {} cells {}", groups.len(), entries.len());
    Ok(())
}

pub fn cmd_evaluate(ctx: &mut Ctx, detections: &Path, truth: &Path) -> Result<()> {
    let detections = ctx.input(detections);
    let truth = ctx.input(truth);
    let dets = read_detections_csv(&detections)?;
    let gts = read_ground_truth_csv(&truth)?;
    let report = hcpl_core::eval::map19(&dets, &gts)?;

    let mut text = String::new();
    for (c, ap) in report.per_class.iter().enumerate() {
        match ap {
            Some(v) => {
                let _ = writeln!(text, "class {c} AP {v:.4}");
            }
            None => {
                let _ = writeln!(text, "class {c} AP -");
            }
        }
    }
    let _ = writeln!(text, "mAP {:.4}", report.map);
    print!("{text}");
    write_text(&ctx.out_path("report.txt"), &text)?;
    Ok(())
}

fn save_heatmap_png(path: &Path, heat: &Tensor, out_h: usize, out_w: usize) -> Result<()> {
    let (fh, fw) = (heat.shape()[0], heat.shape()[1]);
    let mut buf = Vec::with_capacity(out_h * out_w);
    for i in 0..out_h {
        for j in 0..out_w {
            let v = heat.at2(i * fh / out_h, j * fw / out_w);
            buf.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    let img = image::GrayImage::from_raw(out_w as u32, out_h as u32, buf)
        .expect("buffer sized to dimensions");
    img.save(path)
        .map_err(|e| HcplError::io(path.display().to_string(), std::io::Error::other(e)))
}

pub fn cmd_cam(ctx: &mut Ctx, model_dir: &Path, data: &Path) -> Result<()> {
    let model_dir = ctx.input(model_dir);
    let data = ctx.input(data);
    let model: Model = load_model(&model_dir)?;
    let crop = model.cfg.backbone.input_h;
    let (dataset, entries) = build_cells(&data, &data.join(MASKS_DIR), crop, None)?;

    let c = &ctx.config;
    let wanted = c.usize_list_or("cam", "cells", &[])?;
    let rows: Vec<usize> = if wanted.is_empty() {
        let count = c.usize_or("cam", "count", 4)?;
        (0..entries.len().min(count)).collect()
    } else {
        wanted
            .iter()
            .map(|id| {
                entries
                    .iter()
                    .position(|e| e.cell_id == *id as u32)
                    .ok_or_else(|| HcplError::Input(format!("cell {id} not in dataset")))
            })
            .collect::<Result<_>>()?
    };

    let class_spec = c.str_or("cam", "class", "auto");
    let auto_classes: Option<Vec<usize>> = if class_spec == "auto" {
        let preds = predict(&model, &dataset.cells)?;
        Some(
            (0..preds.num_cells())
                .map(|n| {
                    let row = preds.cell_row(n);
                    row.iter()
                        .enumerate()
                        .max_by(|a, b| a.1.partial_cmp(b.1).expect("finite probabilities"))
                        .map(|(c, _)| c)
                        .unwrap_or(0)
                })
                .collect(),
        )
    } else {
        None
    };
    let fixed_class: Option<usize> = match auto_classes {
        Some(_) => None,
        None => {
            let idx: usize = class_spec
                .parse()
                .map_err(|_| HcplError::Config(format!("cam class {class_spec:?} is not an index")))?;
            if idx >= NUM_CLASSES {
                return Err(HcplError::Config(format!("cam class {idx} out of range")));
            }
            Some(idx)
        }
    };

    let png = c.bool_or("cam", "png", true)?;
    for &row in &rows {
        let class = fixed_class.unwrap_or_else(|| auto_classes.as_ref().expect("auto mode")[row]);
        let heat = model_cam(&model, &dataset.cells[row].crop, class)?;
        let stem = format!("cam_{}_c{}", entries[row].cell_id, class);
        write_tensor(ctx.out_path(&format!("{stem}.hcpl")), &heat)?;
        if png {
            save_heatmap_png(&ctx.out_path(&format!("{stem}.png")), &heat, crop, crop)?;
        }
    }
    info!("wrote {} activation maps", rows.len());
    println!("maps {}", rows.len());
    Ok(())
}
