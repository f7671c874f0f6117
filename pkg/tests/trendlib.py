"""Shared driver for the end-to-end trend check (used by acceptance tests).

Builds the seeded desk-scale dataset once, then trains/evaluates the
dual-domain network for a given seed and reports held-out metrics against
the four-angle reference.
"""
import json
import os

import numpy as np

from fewspect.datamodel import read_volume
from fewspect.geometry import DESK_GEOMETRY, AngleEntry, AngleSet, build_geometry
from fewspect.losses import LossWeights
from fewspect.metrics import defect_size, psnr, rmse, ssim
from fewspect.model import DualDomainGenerator, desk_config, VolumeCritic
from fewspect.phantom import make_dataset
from fewspect.training import TrainConfig, infer_sample, prepare_sample, train

DESK_GRID = (24, 24, 16)
DESK_VOXEL = (2.0, 2.0, 2.0)
N_SUBJECTS = 64
N_HELDOUT = 8
COUNTS_PER_ANGLE = 5e5
TREND_STEPS = 500
DATASET_SEED = 20240


def desk_angles():
    # four positions interleaving the 10-degree module pitch
    return AngleSet(tuple(AngleEntry(k * 2.5) for k in range(4)))


def build_trend_dataset(root):
    """Generate (or reuse) the 64-subject desk dataset; returns manifest path."""
    manifest_path = os.path.join(root, "dataset", "manifest.json")
    if not os.path.exists(manifest_path):
        geom = build_geometry(DESK_GEOMETRY)
        make_dataset(
            N_SUBJECTS, geom, desk_angles(), DESK_GRID, DESK_VOXEL,
            os.path.join(root, "dataset"),
            counts_per_angle=COUNTS_PER_ANGLE, mlem_iters=50, base_seed=DATASET_SEED,
        )
    return manifest_path


def load_trend_samples(manifest_path):
    """Returns (samples, aux) where aux holds raw reference/baseline arrays."""
    from fewspect.datamodel import read_projections

    with open(manifest_path, "r", encoding="utf-8") as fh:
        manifest = json.load(fh)
    root = os.path.dirname(os.path.abspath(manifest_path))
    cfg = desk_config()
    samples, aux = [], []
    for entry in manifest["subjects"]:
        sdir = os.path.join(root, entry["dir"])
        proj_one = read_projections(os.path.join(sdir, "proj_one"))
        bp = read_volume(os.path.join(sdir, "bp_one"))
        mlem_one = read_volume(os.path.join(sdir, "mlem_one"))
        mlem_four = read_volume(os.path.join(sdir, "mlem_four"))
        myo = read_volume(os.path.join(sdir, "mask_myocardium")).values > 0.5
        samples.append(
            prepare_sample(entry["subject_id"], proj_one, bp, mlem_one, mlem_four, cfg,
                           has_defect=entry["has_defect"])
        )
        aux.append(
            {
                "subject_id": entry["subject_id"],
                "has_defect": entry["has_defect"],
                "one": mlem_one.grid3d(),
                "four": mlem_four.grid3d(),
                "myo": myo,
            }
        )
    return samples, aux


def run_trend(samples, aux, seed, steps=TREND_STEPS, out_dir=None):
    """Train on the first 56 subjects, evaluate the last 8; returns a summary."""
    cfg = desk_config()
    train_samples = samples[: N_SUBJECTS - N_HELDOUT]
    generator = DualDomainGenerator(cfg)
    critic = VolumeCritic(cfg)
    tc = TrainConfig(steps=steps, seed=seed)
    result = train(train_samples, generator, critic, tc, LossWeights(), out_dir=out_dir)

    rows = []
    for sample, info in zip(samples[N_SUBJECTS - N_HELDOUT :], aux[N_SUBJECTS - N_HELDOUT :]):
        _, final = infer_sample(generator, sample)
        ref = info["four"]
        peak = max(float(ref.max()), 1e-12)
        rows.append(
            {
                "subject_id": info["subject_id"],
                "has_defect": info["has_defect"],
                "ssim_one": ssim(info["one"], ref, peak=peak),
                "ssim_final": ssim(final, ref, peak=peak),
                "rmse_one": rmse(info["one"], ref),
                "rmse_final": rmse(final, ref),
                "psnr_one": psnr(info["one"], ref, peak=peak),
                "psnr_final": psnr(final, ref, peak=peak),
                "ds_one": defect_size(info["one"], info["myo"]),
                "ds_final": defect_size(final, info["myo"]),
                "ds_four": defect_size(ref, info["myo"]),
            }
        )
    defect_rows = [r for r in rows if r["has_defect"]]
    summary = {
        "seed": seed,
        "mean_ssim_one": float(np.mean([r["ssim_one"] for r in rows])),
        "mean_ssim_final": float(np.mean([r["ssim_final"] for r in rows])),
        "ds_gap_one": abs(
            float(np.mean([r["ds_one"] for r in defect_rows]))
            - float(np.mean([r["ds_four"] for r in defect_rows]))
        ),
        "ds_gap_final": abs(
            float(np.mean([r["ds_final"] for r in defect_rows]))
            - float(np.mean([r["ds_four"] for r in defect_rows]))
        ),
        "rows": rows,
        "log": result.log,
    }
    return summary
