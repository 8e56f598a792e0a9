"""Experiment orchestration: dataset generation, training, reconstruction
sweeps and reporting.

Everything below the output directory is a pure function of (config, seed):
randomness is derived per artifact, float formats are pinned, and JSON/CSV
writers use canonical layouts, so reruns are byte-identical in
single-threaded mode. Sweep cells are independent; with --workers > 1 they
run in separate processes and still produce identical bytes.
"""

import csv
import io
import json
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import degrade, gridio, metrics, phantoms, solver, tomo, xmodal
from .config import ExperimentConfig
from .diffusion import TrainConfig, TrainResult, make_schedule, train_denoiser
from .errors import ConfigError, XmctError
from .seeding import derive_seed
from .xmodal import XmodalTrainConfig, XmodalTrainResult

REPORT_CSV_COLUMNS = ["steps", "views", "noise",
                      "uni_psnr", "uni_ssim", "cross_psnr", "cross_ssim",
                      "delta_psnr", "delta_ssim"]


def _paths(cfg: ExperimentConfig):
    out = Path(cfg.out_dir)
    return {
        "out": out,
        "data": out / "data",
        "train": out / "data" / "train",
        "test": out / "data" / "test",
        "pairs": out / "data" / "pairs",
        "ckpt": out / "checkpoints",
        "results": out / "results",
        "cells": out / "results" / "cells",
        "report": out / "report",
    }


def _spec_record(spec: degrade.DegradationSpec):
    return {"num_views": spec.num_views, "noise": spec.noise_relative_sigma,
            "blur": spec.blur_sigma, "keep": spec.sampling_keep_fraction,
            "seed": spec.seed}


def _spec_from_record(rec):
    return degrade.DegradationSpec(rec["num_views"], rec["noise"], rec["blur"],
                                   rec["keep"], rec["seed"])


# ---------------------------------------------------------------- generate

def cmd_generate_data(cfg: ExperimentConfig):
    """Emit train/test paired volumes, prior-training slices and the paired
    translator dataset, plus a manifest describing all of them."""
    p = _paths(cfg)
    for k in ("data", "train", "test", "pairs"):
        p[k].mkdir(parents=True, exist_ok=True)
    counts = cfg.raw["data"]
    records = []

    echo = {s: dict(v) for s, v in cfg.raw.items()}
    echo["experiment"].pop("out_dir", None)   # location must not affect content
    with open(p["data"] / "config_echo.json", "w", encoding="utf-8") as fh:
        json.dump(echo, fh, sort_keys=True, indent=1)
        fh.write("\n")

    pairs_seed = derive_seed(cfg.seed, "train-data")
    for j in range(counts["train_volumes"]):
        vol_seed = derive_seed(pairs_seed, "vol", j)
        main, aux = phantoms.generate_paired_volume(cfg.recipe, vol_seed)
        mf, af = f"vol_{j:03d}_main.xmg", f"vol_{j:03d}_aux.xmg"
        gridio.write_grid(p["train"] / mf, main)
        gridio.write_grid(p["train"] / af, aux)
        records.append({"kind": "train_volume", "index": j, "seed": vol_seed,
                        "main": f"train/{mf}", "aux": f"train/{af}"})

    for j in range(counts["test_volumes"]):
        vol_seed = derive_seed(cfg.seed, "test-vol", j)
        main, aux = phantoms.generate_paired_volume(cfg.recipe, vol_seed)
        mf, af = f"vol_{j:03d}_main.xmg", f"vol_{j:03d}_aux.xmg"
        gridio.write_grid(p["test"] / mf, main)
        gridio.write_grid(p["test"] / af, aux)
        records.append({"kind": "test_volume", "index": j, "seed": vol_seed,
                        "main": f"test/{mf}", "aux": f"test/{af}"})

    if counts["prior_slices"] > 0:
        slices = np.stack([
            phantoms.sample_prior_slice(cfg.recipe, derive_seed(cfg.seed, "prior", i))
            for i in range(counts["prior_slices"])])
        gridio.write_grid(p["data"] / "prior_slices.xmg", slices)
        records.append({"kind": "prior_slices", "path": "prior_slices.xmg",
                        "count": counts["prior_slices"]})

    if counts["pair_count"] > 0:
        grid = degrade.default_spec_grid(counts["view_budget"])
        samples = degrade.build_paired_dataset(cfg.recipe, cfg.ideal_spec, grid,
                                               counts["pair_count"], pairs_seed)
        pair_records = []
        for i, s in enumerate(samples):
            files = {}
            for tag, arr in (("dmain", s.degraded_main), ("daux", s.degraded_aux),
                             ("ideal", s.ideal_main)):
                fname = f"pair_{i:05d}_{tag}.xmg"
                gridio.write_grid(p["pairs"] / fname, arr)
                files[tag] = fname
            pair_records.append({"index": i, "files": files,
                                 "spec_main": _spec_record(s.spec_main),
                                 "spec_aux": _spec_record(s.spec_aux)})
        gridio.write_jsonl(p["pairs"] / "manifest.jsonl", pair_records)
        records.append({"kind": "pairs", "path": "pairs",
                        "count": counts["pair_count"]})

    gridio.write_jsonl(p["data"] / "manifest.jsonl", records)
    return p["data"]


def load_pairs(pairs_dir):
    pairs_dir = Path(pairs_dir)
    manifest = pairs_dir / "manifest.jsonl"
    if not manifest.exists():
        raise ConfigError(f"paired dataset manifest not found: {manifest}")
    samples = []
    for rec in gridio.read_jsonl(manifest):
        f = rec["files"]
        samples.append(degrade.PairedSample(
            degraded_main=np.asarray(gridio.read_grid(pairs_dir / f["dmain"]), np.float64),
            degraded_aux=np.asarray(gridio.read_grid(pairs_dir / f["daux"]), np.float64),
            ideal_main=np.asarray(gridio.read_grid(pairs_dir / f["ideal"]), np.float64),
            spec_main=_spec_from_record(rec["spec_main"]),
            spec_aux=_spec_from_record(rec["spec_aux"])))
    return samples


def _write_loss_csv(path, start_step, losses):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["step", "loss"])
        for i, v in enumerate(losses):
            writer.writerow([start_step + i, f"{v:.6f}"])


# ------------------------------------------------------------------ train

def cmd_train_prior(cfg: ExperimentConfig, resume=None):
    p = _paths(cfg)
    slices_path = p["data"] / "prior_slices.xmg"
    if not slices_path.exists():
        raise ConfigError(f"prior training data not found: {slices_path} "
                          "(run generate-data first)")
    images = gridio.read_grid(slices_path)
    pr = cfg.raw["prior"]
    tc = TrainConfig(epochs=pr["epochs"], batch=pr["batch"], lr=pr["lr"],
                     momentum=pr["momentum"], grad_clip=pr["grad_clip"],
                     seed=derive_seed(cfg.seed, "train-prior"))
    sched = make_schedule(cfg.raw["schedule"]["timesteps"],
                          cfg.raw["schedule"]["beta_start"],
                          cfg.raw["schedule"]["beta_end"])
    start = None
    if resume is not None:
        params, sched_desc, steps, momentum = gridio.read_prior_checkpoint(resume)
        start = TrainResult(params=params, steps=steps, optimizer_state=momentum)
    result = train_denoiser(images, sched, tc, arch=cfg.prior_arch, start=start)
    p["ckpt"].mkdir(parents=True, exist_ok=True)
    ckpt = p["ckpt"] / "prior.ckpt"
    gridio.write_prior_checkpoint(ckpt, result.params, sched.describe(),
                                  steps=result.steps,
                                  optimizer_state=result.optimizer_state)
    _write_loss_csv(p["ckpt"] / "prior_loss.csv",
                    start.steps if start else 0, result.step_losses)
    return ckpt, result


def cmd_train_xmodal(cfg: ExperimentConfig, resume=None):
    p = _paths(cfg)
    samples = load_pairs(p["pairs"])
    xc = cfg.raw["xmodal"]
    train_idx, val_idx = xmodal.validation_split(
        len(samples), xc["val_fraction"], derive_seed(cfg.seed, "xmodal-val"))
    tc = XmodalTrainConfig(epochs=xc["epochs"], batch=xc["batch"], lr=xc["lr"],
                           momentum=xc["momentum"],
                           adversarial_weight=xc["adversarial_weight"],
                           grad_clip=xc["grad_clip"],
                           seed=derive_seed(cfg.seed, "train-xmodal"))
    start = None
    if resume is not None:
        model, steps, momentum = gridio.read_xmodal_checkpoint(resume)
        start = XmodalTrainResult(model=model, steps=steps, optimizer_state=momentum)
    result = xmodal.train_translation([samples[i] for i in train_idx], tc,
                                      arch=cfg.xmodal_arch, start=start)
    gate = xmodal.validation_gate(result.model, [samples[i] for i in val_idx])
    p["ckpt"].mkdir(parents=True, exist_ok=True)
    ckpt = p["ckpt"] / "xmodal.ckpt"
    gridio.write_xmodal_checkpoint(ckpt, result.model, steps=result.steps,
                                   optimizer_state=result.optimizer_state)
    _write_loss_csv(p["ckpt"] / "xmodal_loss.csv",
                    start.steps if start else 0, result.step_losses)
    gate["val_indices"] = [int(i) for i in val_idx]
    with open(p["ckpt"] / "xmodal_val.json", "w", encoding="utf-8") as fh:
        json.dump(gate, fh, sort_keys=True, indent=1)
        fh.write("\n")
    return ckpt, result, gate


# ------------------------------------------------------------- reconstruct

def _cell_name(vol, views, steps, noise):
    return f"vol{vol:02d}_views{views:03d}_steps{steps:02d}_noise{noise:g}"


def _load_test_volume(cfg, vol):
    p = _paths(cfg)
    main = p["test"] / f"vol_{vol:03d}_main.xmg"
    aux = p["test"] / f"vol_{vol:03d}_aux.xmg"
    if not main.exists():
        raise ConfigError(f"test volume not found: {main} (run generate-data first)")
    return (np.asarray(gridio.read_grid(main), np.float64),
            np.asarray(gridio.read_grid(aux), np.float64))


def build_aux_image(cfg: ExperimentConfig, aux_volume, vol_index):
    """Degraded auxiliary reconstruction fed to the translator (per test
    volume, shared by every sweep cell of that volume)."""
    spec = cfg.aux_spec
    budget = cfg.raw["data"]["view_budget"]
    geo = cfg.raw["geometry"]
    out = np.empty_like(aux_volume)
    for k in range(aux_volume.shape[0]):
        sl_spec = degrade.DegradationSpec(
            spec.num_views, spec.noise_relative_sigma, spec.blur_sigma,
            spec.sampling_keep_fraction, derive_seed(cfg.seed, "aux", vol_index, k))
        out[k] = degrade.degraded_reconstruction(
            aux_volume[k], budget, sl_spec, cfg.raw["solver"]["fbp_filter"],
            geo["pixel_pitch"], geo["detector_pitch"])
    return out


def measure_y_main(cfg: ExperimentConfig, main_volume, vol, views, noise):
    """Noisy sparse-view measurements; independent of solver mode by
    construction (the derivation key excludes the mode)."""
    geom = tomo.make_parallel_geometry(views, main_volume.shape[1],
                                       cfg.raw["geometry"]["pixel_pitch"],
                                       cfg.raw["geometry"]["detector_pitch"])
    stack = tomo.project_volume(main_volume, geom)
    sinos = []
    for k in range(stack.shape[0]):
        s = tomo.Sinogram(geom, stack[k])
        s = tomo.add_noise(s, noise, derive_seed(cfg.seed, "ym", vol, views,
                                                 f"{noise:g}", k))
        sinos.append(s)
    return sinos


def _run_cell(cfg, vol, views, steps, noise, mode, prior_params, sched, xm_model):
    p = _paths(cfg)
    cell = p["cells"] / _cell_name(vol, views, steps, noise)
    mode_dir = cell / ("cross" if mode == "crossmodal" else "uni")
    mode_dir.mkdir(parents=True, exist_ok=True)
    try:
        main_vol, aux_vol = _load_test_volume(cfg, vol)
        sinos = measure_y_main(cfg, main_vol, vol, views, noise)
        y_path = cell / "y_main.xmg"
        if not y_path.exists():
            gridio.write_grid(y_path, np.stack([s.values for s in sinos]),
                              dtype=np.float64)
        aux_img = None
        if mode == "crossmodal":
            aux_path = cell / "aux_image.xmg"
            if aux_path.exists():
                aux_img = np.asarray(gridio.read_grid(aux_path), np.float64)
            else:
                aux_img = build_aux_image(cfg, aux_vol, vol)
                gridio.write_grid(aux_path, aux_img, dtype=np.float64)
        scfg = cfg.solver_config(
            num_adapt_steps=steps, crossmodal_enabled=(mode == "crossmodal"),
            seed=derive_seed(cfg.seed, "solver", vol, views, steps, f"{noise:g}"))
        recon, state = solver.reconstruct(
            sinos, aux_img, prior_params, scfg,
            xmodal_model=xm_model if mode == "crossmodal" else None,
            sched=sched, ground_truth=main_vol)
        gridio.write_grid(mode_dir / "recon.xmg", recon)
        gridio.write_jsonl(mode_dir / "trace.jsonl", gridio.trace_records(state))
        status = {"status": "ok"}
    except XmctError as exc:
        status = {"status": "failed", "error": str(exc)}
    with open(mode_dir / "status.json", "w", encoding="utf-8") as fh:
        json.dump(status, fh, sort_keys=True)
        fh.write("\n")
    return status


def sweep_cells(cfg: ExperimentConfig):
    sw = cfg.raw["sweep"]
    data = cfg.raw["data"]
    return [(vol, views, steps, noise, mode)
            for vol in range(data["test_volumes"])
            for views in sw["views"]
            for steps in sw["steps"]
            for noise in sw["noise"]
            for mode in sw["modes"]]


def cmd_reconstruct(cfg: ExperimentConfig, workers=1):
    p = _paths(cfg)
    prior_path = p["ckpt"] / "prior.ckpt"
    if not prior_path.exists():
        raise ConfigError(f"prior checkpoint not found: {prior_path} "
                          "(run train-prior first)")
    prior_params, sched_desc, _, _ = gridio.read_prior_checkpoint(prior_path)
    sched = make_schedule(sched_desc["timesteps"], sched_desc["beta_start"],
                          sched_desc["beta_end"])
    cells = sweep_cells(cfg)
    xm_model = None
    if any(mode == "crossmodal" for *_, mode in cells):
        xm_path = p["ckpt"] / "xmodal.ckpt"
        if not xm_path.exists():
            raise ConfigError(f"translator checkpoint not found: {xm_path} "
                              "(run train-xmodal first)")
        xm_model, _, _ = gridio.read_xmodal_checkpoint(xm_path)
    p["cells"].mkdir(parents=True, exist_ok=True)

    statuses = {}
    if workers <= 1:
        for vol, views, steps, noise, mode in cells:
            statuses[(vol, views, steps, noise, mode)] = _run_cell(
                cfg, vol, views, steps, noise, mode, prior_params, sched, xm_model)
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            futures = {
                pool.submit(_run_cell, cfg, vol, views, steps, noise, mode,
                            prior_params, sched, xm_model):
                (vol, views, steps, noise, mode)
                for vol, views, steps, noise, mode in cells}
            for fut, key in futures.items():
                statuses[key] = fut.result()
    failed = {k: v for k, v in statuses.items() if v["status"] != "ok"}
    return statuses, failed


# --------------------------------------------------------------- evaluate

def cmd_evaluate(cfg: ExperimentConfig):
    p = _paths(cfg)
    reports = []
    for vol, views, steps, noise, mode in sweep_cells(cfg):
        mode_dir = (p["cells"] / _cell_name(vol, views, steps, noise)
                    / ("cross" if mode == "crossmodal" else "uni"))
        recon_path = mode_dir / "recon.xmg"
        if not recon_path.exists():
            continue
        main_vol, _ = _load_test_volume(cfg, vol)
        recon = np.asarray(gridio.read_grid(recon_path), np.float64)
        reports.append(metrics.volume_report(
            recon, main_vol, volume=vol, views=views, steps=steps,
            noise=noise, mode=mode))
    p["results"].mkdir(parents=True, exist_ok=True)
    with open(p["results"] / "metrics.csv", "w", encoding="utf-8", newline="") as fh:
        fh.write(metrics.reports_to_csv(reports))
    return reports


# ----------------------------------------------------------------- report

def _aggregate(rows):
    """metrics.csv rows -> {(steps, views, noise): {mode: (psnr, ssim)}}."""
    acc = {}
    for row in rows:
        key = (int(row["steps"]), int(row["views"]), row["noise"])
        acc.setdefault(key, {}).setdefault(row["mode"], []).append(
            (float(row["psnr"]), float(row["ssim"])))
    out = {}
    for key, modes in acc.items():
        out[key] = {m: (float(np.mean([p for p, _ in v])),
                        float(np.mean([s for _, s in v])))
                    for m, v in modes.items()}
    return out


def cmd_report(cfg: ExperimentConfig):
    p = _paths(cfg)
    metrics_path = p["results"] / "metrics.csv"
    rows = []
    if metrics_path.exists():
        with open(metrics_path, "r", encoding="utf-8", newline="") as fh:
            rows = list(csv.DictReader(fh))
    agg = _aggregate(rows)

    p["report"].mkdir(parents=True, exist_ok=True)
    (p["report"] / "img").mkdir(exist_ok=True)

    keys = sorted(agg.keys(), key=lambda k: (k[0], k[1], float(k[2])))
    csv_lines = []
    md = io.StringIO()
    md.write(f"# Reconstruction quality: {cfg.name}\n\n")
    md.write("Volume-averaged PSNR [dB] / SSIM per sweep cell; "
             "delta = crossmodal - unimodal.\n\n")
    md.write("| Steps | #Views | Noise | Unimodal PSNR | Unimodal SSIM | "
             "Cross-modal PSNR | Cross-modal SSIM | dPSNR | dSSIM |\n")
    md.write("|---|---|---|---|---|---|---|---|---|\n")
    for steps, views, noise in keys:
        modes = agg[(steps, views, noise)]
        uni = modes.get("unimodal")
        cross = modes.get("crossmodal")
        delta = (None if uni is None or cross is None
                 else (cross[0] - uni[0], cross[1] - uni[1]))

        def fmt(pair, idx, spec):
            return "" if pair is None else format(pair[idx], spec)

        csv_lines.append([
            steps, views, noise,
            fmt(uni, 0, ".4f"), fmt(uni, 1, ".6f"),
            fmt(cross, 0, ".4f"), fmt(cross, 1, ".6f"),
            fmt(delta, 0, "+.4f"), fmt(delta, 1, "+.6f")])
        md.write(f"| {steps} | {views} | {noise} "
                 f"| {fmt(uni, 0, '.2f')} | {fmt(uni, 1, '.3f')} "
                 f"| {fmt(cross, 0, '.2f')} | {fmt(cross, 1, '.3f')} "
                 f"| {fmt(delta, 0, '+.2f')} | {fmt(delta, 1, '+.3f')} |\n")

    failures = []
    for vol, views, steps, noise, mode in sweep_cells(cfg):
        mode_dir = (p["cells"] / _cell_name(vol, views, steps, noise)
                    / ("cross" if mode == "crossmodal" else "uni"))
        status_path = mode_dir / "status.json"
        if status_path.exists():
            with open(status_path, encoding="utf-8") as fh:
                status = json.load(fh)
            if status.get("status") != "ok":
                failures.append((vol, views, steps, noise, mode,
                                 status.get("error", "unknown")))
        elif rows:
            failures.append((vol, views, steps, noise, mode, "missing"))
    if failures:
        md.write("\n## Failed or missing cells\n\n")
        for vol, views, steps, noise, mode, err in failures:
            md.write(f"- vol {vol}, views {views}, steps {steps}, "
                     f"noise {noise:g}, {mode}: {err}\n")

    with open(p["report"] / "report.csv", "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(REPORT_CSV_COLUMNS)
        writer.writerows(csv_lines)
    with open(p["report"] / "report.md", "w", encoding="utf-8") as fh:
        fh.write(md.getvalue())

    _dump_images(cfg)
    return p["report"]


def _dump_images(cfg):
    p = _paths(cfg)
    sw = cfg.raw["sweep"]
    if cfg.raw["data"]["test_volumes"] == 0:
        return
    vol = 0
    for steps in sw["steps"]:
        for views in sw["views"]:
            for noise in sw["noise"]:
                cell = p["cells"] / _cell_name(vol, views, steps, noise)
                uni = cell / "uni" / "recon.xmg"
                cross = cell / "cross" / "recon.xmg"
                if not uni.exists() and not cross.exists():
                    continue
                main_vol, _ = _load_test_volume(cfg, vol)
                mid = main_vol.shape[0] // 2
                panels = []
                for path in (uni, cross):
                    if path.exists():
                        arr = gridio.read_grid(path)
                        panels.append(np.asarray(arr, np.float64)[mid])
                    else:
                        panels.append(np.zeros_like(main_vol[mid]))
                panels.append(main_vol[mid])
                name = f"steps{steps:02d}_views{views:03d}_noise{noise:g}.pgm"
                gridio.write_triptych_pgm(p["report"] / "img" / name, panels)
