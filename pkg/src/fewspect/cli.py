"""Command-line entry point.

Subcommands: phantom, project, mlem, train, infer, eval, render, selftest.
Configuration is a nested JSON document merged from scale defaults
(--scale desk|paper), an optional --config file, and command-line flags;
unknown keys are rejected and the effective configuration is echoed into
the output directory so any run can be reproduced exactly.

Exit codes: 0 success, 2 configuration error, 3 numerical failure,
4 I/O or format error.  Failures emit a machine-readable JSON object on
stderr.
"""
from __future__ import annotations

import argparse
import copy
import json
import math
import os
import sys

import numpy as np

from . import __version__
from . import autodiff as ad
from .datamodel import (
    VolumeGrid,
    read_projections,
    read_volume,
    write_projections,
    write_volume,
)
from .errors import ConfigError, FewspectError, FormatError, NumericalError
from .geometry import (
    AngleEntry,
    AngleSet,
    GeometryConfig,
    build_geometry,
    build_system_matrix,
    forward_project,
)
from .losses import LossWeights
from .metrics import MetricReport, defect_size, psnr, rmse, ssim
from .mlem import MLEMConfig, mlem_reconstruct, poisson_loglik
from .model import DualDomainGenerator, ModelConfig, TransformerConfig, VolumeCritic
from .phantom import make_dataset
from .training import TrainConfig, infer_sample, load_into, prepare_sample, train

DESK_DEFAULTS = {
    "seed": 0,
    "grid": {"shape": [24, 24, 16], "voxel_size_mm": [2.0, 2.0, 2.0]},
    "geometry": {
        "n_modules": 19, "nu": 16, "nv": 16, "pitch_mm": 2.0,
        "arc_span_deg": 180.0, "arc_radius_mm": 90.0, "focal_mm": 45.0,
        "fov_radius_mm": 24.0,
    },
    "angles": {"count": 4, "step_deg": 2.5},
    "mlem": {"n_iters": 50, "initial_value": 1.0},
    "model": {
        "patch_size": 4, "embed_dim": 64, "n_heads": 2, "n_layers": 2, "mlp_ratio": 2,
        "slice_cnn_channels": [32, 16], "unet_widths": [16, 32, 64],
        "critic_channels": [8, 16, 32, 64, 64],
    },
    "training": {
        "steps": 500, "batch_size": 2, "lr": 1e-4, "adam_beta1": 0.5, "adam_beta2": 0.9,
        "critic_steps_per_gen": 5, "checkpoint_interval": 250, "pretrain_steps": 0,
    },
    "loss": {
        "lambda_a": 0.1, "lambda_b": 0.005, "lambda_c": 0.8, "lambda_d": 0.1,
        "lambda_gp": 10.0,
    },
    "dataset": {"n_subjects": 8, "counts_per_angle": 5e5},
}

PAPER_OVERRIDES = {
    "grid": {"shape": [70, 70, 50], "voxel_size_mm": [2.0, 2.0, 2.0]},
    "geometry": {
        "nu": 32, "nv": 32, "pitch_mm": 4.0, "arc_radius_mm": 210.0, "focal_mm": 80.0,
        "fov_radius_mm": 70.0,
    },
}


def _merge(base, override, path=""):
    out = copy.deepcopy(base)
    for key, value in override.items():
        where = f"{path}.{key}" if path else key
        if key not in base:
            raise ConfigError(f"unknown configuration key: {where}")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"configuration key {where} expects an object")
            out[key] = _merge(base[key], value, where)
        else:
            out[key] = value
    return out


def load_run_config(scale="desk", config_path=None, seed=None):
    cfg = copy.deepcopy(DESK_DEFAULTS)
    if scale == "paper":
        cfg = _merge(cfg, PAPER_OVERRIDES)
    elif scale != "desk":
        raise ConfigError(f"unknown scale {scale!r} (expected desk or paper)")
    if config_path is not None:
        with open(config_path, "r", encoding="utf-8") as fh:
            try:
                user = json.load(fh)
            except json.JSONDecodeError as exc:
                raise FormatError(f"{config_path}: invalid JSON: {exc}") from exc
        cfg = _merge(cfg, user)
    if seed is not None:
        cfg["seed"] = int(seed)
    return cfg


def echo_config(cfg, out_dir):
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "effective_config.json"), "w", encoding="utf-8") as fh:
        json.dump(cfg, fh, indent=1, sort_keys=True)
        fh.write("\n")


def geometry_from(cfg):
    g = cfg["geometry"]
    return build_geometry(
        GeometryConfig(
            n_modules=g["n_modules"], nu=g["nu"], nv=g["nv"], pitch_mm=g["pitch_mm"],
            arc_span_deg=g["arc_span_deg"], arc_radius_mm=g["arc_radius_mm"],
            focal_mm=g["focal_mm"], fov_radius_mm=g["fov_radius_mm"],
        )
    )


def angles_from(cfg):
    a = cfg["angles"]
    return AngleSet(tuple(AngleEntry(k * a["step_deg"]) for k in range(a["count"])))


def model_config_from(cfg):
    m = cfg["model"]
    g = cfg["grid"]
    return ModelConfig(
        grid_shape=tuple(g["shape"]),
        n_modules=cfg["geometry"]["n_modules"],
        nu=cfg["geometry"]["nu"],
        nv=cfg["geometry"]["nv"],
        transformer=TransformerConfig(
            patch_size=m["patch_size"], embed_dim=m["embed_dim"], n_heads=m["n_heads"],
            n_layers=m["n_layers"], mlp_ratio=m["mlp_ratio"],
        ),
        slice_cnn_channels=tuple(m["slice_cnn_channels"]),
        unet_widths=tuple(m["unet_widths"]),
        critic_channels=tuple(m["critic_channels"]),
    )


def loss_weights_from(cfg):
    return LossWeights(**cfg["loss"])


def load_subjects(manifest_path, model_cfg):
    with open(manifest_path, "r", encoding="utf-8") as fh:
        manifest = json.load(fh)
    if manifest.get("format") != "dataset":
        raise FormatError(f"{manifest_path}: not a dataset manifest")
    root = os.path.dirname(os.path.abspath(manifest_path))
    subjects = []
    for entry in manifest["subjects"]:
        sdir = os.path.join(root, entry["dir"])
        files = entry["files"]
        proj_one = read_projections(os.path.join(sdir, files["proj_one"]))
        sample = prepare_sample(
            entry["subject_id"],
            proj_one,
            read_volume(os.path.join(sdir, files["bp_one"])),
            read_volume(os.path.join(sdir, files["mlem_one"])),
            read_volume(os.path.join(sdir, files["mlem_four"])),
            model_cfg,
            has_defect=entry["has_defect"],
        )
        subjects.append((entry, sample, sdir))
    return manifest, subjects


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def cmd_phantom(args):
    cfg = load_run_config(args.scale, args.config, args.seed)
    echo_config(cfg, args.out)
    geom = geometry_from(cfg)
    angles = angles_from(cfg)
    n = args.n if args.n is not None else cfg["dataset"]["n_subjects"]
    manifest = make_dataset(
        n, geom, angles, tuple(cfg["grid"]["shape"]), tuple(cfg["grid"]["voxel_size_mm"]),
        os.path.join(args.out, "dataset"),
        counts_per_angle=cfg["dataset"]["counts_per_angle"],
        mlem_iters=cfg["mlem"]["n_iters"],
        base_seed=cfg["seed"],
    )
    print(f"wrote {manifest['n_subjects']} subjects to {os.path.join(args.out, 'dataset')}")
    return 0


def cmd_project(args):
    cfg = load_run_config(args.scale, args.config, args.seed)
    echo_config(cfg, args.out)
    geom = geometry_from(cfg)
    angles = angles_from(cfg) if not args.stationary else AngleSet.stationary()
    vol = read_volume(args.truth)
    S = build_system_matrix(geom, angles, vol.shape, vol.voxel_size)
    y = forward_project(S, vol)
    write_projections(os.path.join(args.out, "projections"), y)
    print(f"wrote projections ({y.n_angles} angle(s), {y.n_bins} bins)")
    return 0


def cmd_mlem(args):
    cfg = load_run_config(args.scale, args.config, args.seed)
    echo_config(cfg, args.out)
    geom = geometry_from(cfg)
    proj = read_projections(args.proj)
    all_angles = angles_from(cfg)
    if proj.n_angles > all_angles.n_angles:
        raise ConfigError(
            f"projection set has {proj.n_angles} angles, config only defines {all_angles.n_angles}"
        )
    angles = AngleSet(all_angles.entries[: proj.n_angles])
    S = build_system_matrix(
        geom, angles, tuple(cfg["grid"]["shape"]), tuple(cfg["grid"]["voxel_size_mm"])
    )
    iters = args.iters if args.iters is not None else cfg["mlem"]["n_iters"]
    x = mlem_reconstruct(S, proj, MLEMConfig(n_iters=iters))
    write_volume(os.path.join(args.out, "recon"), x)
    print(f"wrote recon after {iters} iterations")
    return 0


def cmd_train(args):
    cfg = load_run_config(args.scale, args.config, args.seed)
    echo_config(cfg, args.out)
    model_cfg = model_config_from(cfg)
    _, subjects = load_subjects(args.dataset, model_cfg)
    samples = [s for _, s, _ in subjects]
    t = cfg["training"]
    tc = TrainConfig(
        steps=args.steps if args.steps is not None else t["steps"],
        batch_size=t["batch_size"], lr=t["lr"],
        adam_beta1=t["adam_beta1"], adam_beta2=t["adam_beta2"],
        critic_steps_per_gen=t["critic_steps_per_gen"], seed=cfg["seed"],
        checkpoint_interval=t["checkpoint_interval"], fold_index=args.fold,
        pretrain_steps=t["pretrain_steps"],
    )
    generator = DualDomainGenerator(model_cfg)
    critic = VolumeCritic(model_cfg)
    result = train(samples, generator, critic, tc, loss_weights_from(cfg), out_dir=args.out)
    if result.heldout is not None:
        print("held-out:", json.dumps(result.heldout, sort_keys=True))
    print(f"trained {tc.steps} steps; checkpoints: {len(result.checkpoints)}")
    return 0


def _load_models(checkpoint, model_cfg):
    generator = DualDomainGenerator(model_cfg)
    critic = VolumeCritic(model_cfg)
    load_into(generator, critic, ad.load_checkpoint(checkpoint))
    return generator, critic


def cmd_infer(args):
    cfg = load_run_config(args.scale, args.config, args.seed)
    echo_config(cfg, args.out)
    model_cfg = model_config_from(cfg)
    _, subjects = load_subjects(args.dataset, model_cfg)
    wanted = {s for s in (args.subject or [])}
    generator, _ = _load_models(args.checkpoint, model_cfg)
    vox = tuple(cfg["grid"]["voxel_size_mm"])
    nx, ny, nz = model_cfg.grid_shape
    count = 0
    for entry, sample, _ in subjects:
        if wanted and entry["subject_id"] not in wanted:
            continue
        img_p, final = infer_sample(generator, sample)
        base = os.path.join(args.out, entry["subject_id"])
        os.makedirs(base, exist_ok=True)
        write_volume(os.path.join(base, "img_p"), VolumeGrid(nx, ny, nz, vox, img_p.reshape(-1)))
        write_volume(os.path.join(base, "final"), VolumeGrid(nx, ny, nz, vox, final.reshape(-1)))
        count += 1
    print(f"wrote projection-domain and final volumes for {count} subject(s)")
    return 0


def cmd_eval(args):
    cfg = load_run_config(args.scale, args.config, args.seed)
    echo_config(cfg, args.out)
    model_cfg = model_config_from(cfg)
    _, subjects = load_subjects(args.dataset, model_cfg)
    generator = None
    if args.checkpoint is not None:
        generator, _ = _load_models(args.checkpoint, model_cfg)
    report = MetricReport()
    root = os.path.dirname(os.path.abspath(args.dataset))
    for entry, sample, sdir in subjects:
        ref = read_volume(os.path.join(sdir, entry["files"]["mlem_four"])).grid3d()
        one = read_volume(os.path.join(sdir, entry["files"]["mlem_one"])).grid3d()
        myo = read_volume(os.path.join(sdir, entry["files"]["mask_myocardium"])).values > 0.5
        peak = max(float(ref.max()), 1e-12)
        rows = {"one_angle_mlem": one, "four_angle_reference": ref}
        if generator is not None:
            img_p, final = infer_sample(generator, sample)
            rows["projection_net"] = img_p
            rows["dual_domain_final"] = final
        for method, vol3 in rows.items():
            values = {
                "ssim": ssim(vol3, ref, peak=peak),
                "rmse": rmse(vol3, ref),
                "psnr": psnr(vol3, ref, peak=peak),
                "defect_size_pct": defect_size(vol3, myo),
            }
            report.add(entry["subject_id"], method, values)
    os.makedirs(args.out, exist_ok=True)
    with open(os.path.join(args.out, "report.json"), "w", encoding="utf-8") as fh:
        json.dump(report.to_json(), fh, indent=1, sort_keys=True, allow_nan=True)
        fh.write("\n")
    with open(os.path.join(args.out, "report.csv"), "w", encoding="utf-8") as fh:
        fh.write(report.to_csv())
    agg = report.aggregate()
    for method in report.methods():
        s = agg[method].get("ssim", {})
        print(f"{method}: ssim {s.get('mean', float('nan')):.4f} +/- {s.get('std', 0.0):.4f}")
    return 0


def _slice_grid(vol3, axis):
    n = vol3.shape[axis]
    tiles = [np.take(vol3, i, axis=axis) for i in range(n)]
    cols = int(math.ceil(math.sqrt(n)))
    rows = int(math.ceil(n / cols))
    th, tw = tiles[0].shape
    canvas = np.zeros((rows * th, cols * tw))
    for i, tile in enumerate(tiles):
        r, c = divmod(i, cols)
        canvas[r * th : (r + 1) * th, c * tw : (c + 1) * tw] = tile
    return canvas


def write_pgm(path, image, vmax=None):
    """8-bit binary PGM with a shared intensity window [0, vmax]."""
    img = np.asarray(image, dtype=np.float64)
    if vmax is None:
        vmax = float(img.max())
    vmax = max(vmax, 1e-12)
    data = np.clip(img / vmax * 255.0, 0, 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{data.shape[1]} {data.shape[0]}\n255\n".encode())
        fh.write(data.tobytes())


def cmd_render(args):
    cfg = load_run_config(args.scale, args.config, args.seed)
    os.makedirs(args.out, exist_ok=True)
    vol = read_volume(args.volume)
    g = vol.grid3d()
    vmax = float(g.max())
    # short axis: z slices; long axis: y slices; shared window
    write_pgm(os.path.join(args.out, "short_axis.pgm"), _slice_grid(g, 0), vmax)
    write_pgm(os.path.join(args.out, "long_axis.pgm"), _slice_grid(g, 1), vmax)
    print(f"wrote short_axis.pgm and long_axis.pgm (window 0..{vmax:.4g})")
    return 0


def cmd_selftest(args):
    cfg = load_run_config(args.scale, args.config, args.seed)
    rng = np.random.default_rng(cfg["seed"])
    failures = []

    geom = geometry_from(cfg)
    small = (12, 12, 8)
    S = build_system_matrix(geom, AngleSet.stationary(), small, (4.0, 4.0, 4.0))
    worst = 0.0
    for _ in range(20):
        x = rng.random(S.n_cols)
        y = rng.random(S.n_rows)
        sx = S.matrix @ x
        sty = S.matrix.T @ y
        resid = abs(float(sx @ y) - float(x @ sty)) / (
            float(np.linalg.norm(sx) * np.linalg.norm(y)) + 1e-12
        )
        worst = max(worst, resid)
    print(f"adjoint residual (worst of 20): {worst:.3e}")
    if worst > 1e-5:
        failures.append("adjoint")

    x = ad.Tensor(rng.standard_normal((2, 3, 5, 5)) + 3.0, requires_grad=True)
    w = ad.Tensor(rng.standard_normal((4, 3, 3, 3)) * 0.3, requires_grad=True)

    def conv_loss(a, b):
        h = ad.conv2d(a, b, padding=1)
        return ad.tmean(ad.mul(h, h))

    err = ad.grad_check(conv_loss, [x, w], step=1e-4)
    print(f"gradient check (conv2d): {err:.3e}")
    if err > 1e-5:
        failures.append("gradient")

    from .phantom import AcquisitionSpec, PhantomSpec, generate_phantom, simulate_acquisition

    vol, _ = generate_phantom(
        PhantomSpec(semi_axes_mm=(14.0, 12.0, 12.0), wall_mm=5.0), small, (4.0, 4.0, 4.0)
    )
    y = simulate_acquisition(vol, S, AcquisitionSpec(1e5, seed=cfg["seed"]))
    logliks = []
    mlem_reconstruct(
        S, y, MLEMConfig(n_iters=20),
        callback=lambda it, xv: logliks.append(poisson_loglik(S, xv, y)),
    )
    drops = np.diff(np.array(logliks)) / (np.abs(logliks[0]) + 1e-30)
    print(f"MLEM log-likelihood monotonicity: min step {drops.min():.3e}")
    if drops.min() < -1e-9:
        failures.append("mlem-monotonicity")

    if failures:
        raise NumericalError("selftest failed: " + ", ".join(failures))
    print("selftest passed")
    return 0


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------

def build_parser():
    parser = argparse.ArgumentParser(prog="fewspect", description=__doc__)
    parser.add_argument("--version", action="version", version=f"fewspect {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, needs_out=True):
        p.add_argument("--config", default=None, help="JSON config overriding scale defaults")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--scale", choices=("desk", "paper"), default="desk")
        if needs_out:
            p.add_argument("--out", required=True, help="output directory")

    p = sub.add_parser("phantom", help="generate a paired one-/multi-angle dataset")
    common(p)
    p.add_argument("--n", type=int, default=None, help="number of subjects")
    p.set_defaults(func=cmd_phantom)

    p = sub.add_parser("project", help="forward project a volume")
    common(p)
    p.add_argument("--truth", required=True, help="input volume (.vol pair)")
    p.add_argument("--stationary", action="store_true", help="single angular position only")
    p.set_defaults(func=cmd_project)

    p = sub.add_parser("mlem", help="iterative reconstruction from projections")
    common(p)
    p.add_argument("--proj", required=True, help="projection set (.proj pair)")
    p.add_argument("--iters", type=int, default=None)
    p.set_defaults(func=cmd_mlem)

    p = sub.add_parser("train", help="train the dual-domain network")
    common(p)
    p.add_argument("--dataset", required=True, help="dataset manifest.json")
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--fold", type=int, default=None, help="leave-one-out fold index")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="run a checkpoint over dataset subjects")
    common(p)
    p.add_argument("--dataset", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--subject", action="append", help="restrict to subject id (repeatable)")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", help="metric report against the multi-angle reference")
    common(p)
    p.add_argument("--dataset", required=True)
    p.add_argument("--checkpoint", default=None)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("render", help="slice grids as PGM images")
    common(p)
    p.add_argument("--volume", required=True)
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("selftest", help="adjoint, gradient, and MLEM monotonicity checks")
    common(p, needs_out=False)
    p.set_defaults(func=cmd_selftest)

    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        json.dump({"error": "config", "message": str(exc)}, sys.stderr)
        sys.stderr.write("\n")
        return 2
    except NumericalError as exc:
        json.dump({"error": "numerical", "message": str(exc)}, sys.stderr)
        sys.stderr.write("\n")
        return 3
    except (FormatError, OSError) as exc:
        json.dump({"error": "io", "message": str(exc)}, sys.stderr)
        sys.stderr.write("\n")
        return 4
    except FewspectError as exc:
        json.dump({"error": "error", "message": str(exc)}, sys.stderr)
        sys.stderr.write("\n")
        return 1


if __name__ == "__main__":
    sys.exit(main())
