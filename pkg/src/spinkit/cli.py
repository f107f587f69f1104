"""Command-line front-end: batch workflows over the library modules.

Exit codes: 0 success, 1 usage error, 2 data error, 3 property-check
failure. Every subcommand accepts --config pointing at a JSON file whose
keys are long flag names; explicit flags take precedence over the file.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np

from .autodiff import ConvSpec, ParamStore
from .checks import run_equivariance_suite
from .descriptor import DescriptorConfig, ablate, describe_batch
from .errors import SpinKitError
from .evaluate import evaluate_pairs, sweep_inputs
from .geometry import RigidTransform, median_spacing
from .io import (
    PairEntry,
    read_cloud,
    read_descriptors,
    read_manifest,
    write_cloud,
    write_descriptors,
    write_manifest,
)
from .registration import EvalThresholds, fmr_threshold_sweep, mutual_nn, write_sweep_csv
from .synthetic import SyntheticSceneSpec, rotated_copy, synth_pair
from .training import TrainConfig, train
from .volume import VolumeConfig


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def descriptor_config_to_dict(cfg: DescriptorConfig) -> dict:
    return {
        "volume": asdict(cfg.volume),
        "point_mlp_widths": list(cfg.point_mlp_widths),
        "conv_stack": [
            {
                "in_channels": s.in_channels,
                "out_channels": s.out_channels,
                "kernel": list(s.kernel),
                "stride": list(s.stride),
            }
            for s in cfg.conv_stack
        ],
        "l2_normalize": cfg.l2_normalize,
        "density_signature": cfg.density_signature,
        "voxel_relative_coords": cfg.voxel_relative_coords,
    }


def descriptor_config_from_dict(data: dict) -> DescriptorConfig:
    vol = dict(data["volume"])
    vol["viewpoint"] = tuple(vol.get("viewpoint", (0.0, 0.0, 0.0)))
    return DescriptorConfig(
        volume=VolumeConfig(**vol),
        point_mlp_widths=tuple(data["point_mlp_widths"]),
        conv_stack=tuple(
            ConvSpec(s["in_channels"], s["out_channels"], tuple(s["kernel"]), tuple(s["stride"]))
            for s in data["conv_stack"]
        ),
        l2_normalize=data.get("l2_normalize", True),
        density_signature=data.get("density_signature", False),
        voxel_relative_coords=data.get("voxel_relative_coords", False),
    )


def _load_config_file(path: str | None) -> dict:
    if not path:
        return {}
    with open(path) as fh:
        data = json.load(fh)
    if not isinstance(data, dict):
        raise UsageError("config file must hold a JSON object")
    return data


def _opt(args, config: dict, name: str, default):
    """Flag value if given, else config-file value, else the default."""
    value = getattr(args, name.replace("-", "_"))
    if value is not None:
        return value
    if name in config:
        return config[name]
    return default


def _resolve_threads(args, config) -> int:
    value = _opt(args, config, "threads", None)
    if value is None:
        value = os.environ.get("SPINKIT_THREADS", 1)
    return max(1, int(value))


def _descriptor_config(args, config) -> DescriptorConfig:
    if getattr(args, "model_config", None):
        return descriptor_config_from_dict(_load_config_file(args.model_config))
    cfg = DescriptorConfig.desk_scale(
        support_radius=float(_opt(args, config, "support-radius", 0.3)),
        seed=int(_opt(args, config, "seed", 0)),
    )
    vol = replace(
        cfg.volume,
        radial_bins=int(_opt(args, config, "radial-bins", cfg.volume.radial_bins)),
        elevation_bins=int(_opt(args, config, "elevation-bins", cfg.volume.elevation_bins)),
        azimuth_bins=int(_opt(args, config, "azimuth-bins", cfg.volume.azimuth_bins)),
        voxel_radius=float(_opt(args, config, "voxel-radius", cfg.volume.voxel_radius)),
        points_per_voxel=int(_opt(args, config, "points-per-voxel", cfg.volume.points_per_voxel)),
        axis_alignment_enabled=not bool(_opt(args, config, "no-axis-alignment", False)),
        xy_transform_enabled=not bool(_opt(args, config, "no-xy-transform", False)),
    )
    cfg = replace(cfg, volume=vol)
    ablation = _opt(args, config, "ablation", None)
    if ablation in ("density", "mlp-conv"):
        cfg = ablate(cfg, ablation)
    elif ablation in ("no-axis", "no-xy"):
        cfg = ablate(cfg, ablation)
    elif ablation:
        raise UsageError(f"unknown ablation {ablation!r}")
    return cfg


def _sidecar_config(checkpoint: str) -> DescriptorConfig | None:
    for candidate in (Path(checkpoint).with_suffix(".json"), Path(checkpoint).parent / "config.json"):
        if candidate.exists():
            return descriptor_config_from_dict(json.loads(candidate.read_text()))
    return None


def _checkpoint_and_config(args, config) -> tuple[ParamStore, DescriptorConfig]:
    params = ParamStore.load(args.checkpoint)
    cfg = None
    if getattr(args, "model_config", None):
        cfg = descriptor_config_from_dict(_load_config_file(args.model_config))
    if cfg is None:
        cfg = _sidecar_config(args.checkpoint)
    if cfg is None:
        cfg = _descriptor_config(args, config)
    return params, cfg


def _add_common(p: _Parser):
    p.add_argument("--config", help="JSON file with default values for the flags")
    p.add_argument("--seed", type=int)


def _add_model_flags(p: _Parser):
    p.add_argument("--model-config", help="JSON descriptor architecture file")
    p.add_argument("--support-radius", type=float)
    p.add_argument("--radial-bins", type=int)
    p.add_argument("--elevation-bins", type=int)
    p.add_argument("--azimuth-bins", type=int)
    p.add_argument("--voxel-radius", type=float)
    p.add_argument("--points-per-voxel", type=int)
    p.add_argument("--no-axis-alignment", action="store_const", const=True)
    p.add_argument("--no-xy-transform", action="store_const", const=True)
    p.add_argument("--ablation", choices=["no-axis", "no-xy", "density", "mlp-conv"])


def build_parser() -> _Parser:
    parser = _Parser(prog="spinkit", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic fragment pair")
    _add_common(p)
    p.add_argument("--overlap", type=float)
    p.add_argument("--points", type=int)
    p.add_argument("--noise-sigma", type=float)
    p.add_argument("--density-variation", type=float)
    p.add_argument("--planes", type=int)
    p.add_argument("--spheres", type=int)
    p.add_argument("--boxes", type=int)
    p.add_argument("--cylinders", type=int)
    p.add_argument("--rotate", action="store_const", const=True, help="extra SO(3) rotation of fragment B")
    p.add_argument("--binary", action="store_const", const=True, help="write .spc binary clouds")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--manifest", help="manifest CSV to create or append to")

    p = sub.add_parser("train", help="train a descriptor network")
    _add_common(p)
    _add_model_flags(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--epochs", type=int)
    p.add_argument("--anchors", type=int)
    p.add_argument("--budget", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--positive-margin", type=float)
    p.add_argument("--negative-margin", type=float)

    p = sub.add_parser("describe", help="compute descriptors for anchor points")
    _add_common(p)
    _add_model_flags(p)
    p.add_argument("--cloud", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--anchors", help="text file with one anchor index per line")
    p.add_argument("--num-anchors", type=int)
    p.add_argument("--budget", type=int)
    p.add_argument("--threads", type=int)
    p.add_argument("--out", required=True)

    p = sub.add_parser("match", help="mutual-NN matching of two descriptor files")
    _add_common(p)
    p.add_argument("--desc-a", required=True)
    p.add_argument("--desc-b", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("register", help="register two clouds with a trained model")
    _add_common(p)
    _add_model_flags(p)
    p.add_argument("--cloud-a", required=True)
    p.add_argument("--cloud-b", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--gt", help="12 comma-separated floats: r00..r22,t0,t1,t2")
    p.add_argument("--num-anchors", type=int)
    p.add_argument("--budget", type=int)
    p.add_argument("--ransac-iterations", type=int)
    p.add_argument("--inlier-distance", type=float)
    p.add_argument("--report", required=True)

    p = sub.add_parser("eval", help="evaluate a model over a manifest")
    _add_common(p)
    _add_model_flags(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--report", required=True)
    p.add_argument("--csv")
    p.add_argument("--sweep")
    p.add_argument("--num-anchors", type=int)
    p.add_argument("--budget", type=int)
    p.add_argument("--tau1", type=float)
    p.add_argument("--tau2", type=float)
    p.add_argument("--rte-bound", type=float)
    p.add_argument("--rre-bound", type=float)
    p.add_argument("--ransac-iterations", type=int)

    p = sub.add_parser("check-equivariance", help="run the property suites")
    _add_common(p)
    _add_model_flags(p)
    p.add_argument("--checkpoint")
    return parser


def cmd_synth(args, config) -> int:
    seed = int(_opt(args, config, "seed", 0))
    spec = SyntheticSceneSpec(
        seed=seed,
        overlap=float(_opt(args, config, "overlap", 0.5)),
        points_per_fragment=int(_opt(args, config, "points", 2000)),
        noise_sigma=float(_opt(args, config, "noise-sigma", 0.0)),
        density_variation=float(_opt(args, config, "density-variation", 0.0)),
        planes=int(_opt(args, config, "planes", 2)),
        spheres=int(_opt(args, config, "spheres", 2)),
        boxes=int(_opt(args, config, "boxes", 1)),
        cylinders=int(_opt(args, config, "cylinders", 1)),
    )
    frag_a, frag_b, transform, mask = synth_pair(spec)
    if _opt(args, config, "rotate", False):
        rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, 99])))
        frag_b, transform = rotated_copy(frag_b, transform, rng)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    suffix = ".spc" if _opt(args, config, "binary", False) else ".xyz"
    path_a = out_dir / f"pair{seed:04d}_a{suffix}"
    path_b = out_dir / f"pair{seed:04d}_b{suffix}"
    write_cloud(path_a, frag_a)
    write_cloud(path_b, frag_b)
    entry = PairEntry(str(path_a), str(path_b), spec.overlap, transform)
    if args.manifest:
        manifest = Path(args.manifest)
        manifest.parent.mkdir(parents=True, exist_ok=True)
        # Manifest rows are stored relative to the manifest so the file
        # stays portable; consumers join them against its directory.
        entry = PairEntry(
            os.path.relpath(path_a, manifest.parent),
            os.path.relpath(path_b, manifest.parent),
            spec.overlap,
            transform,
        )
        existing = read_manifest(manifest) if manifest.exists() else []
        write_manifest(manifest, existing + [entry])
    print(f"wrote {path_a} and {path_b} (overlap {spec.overlap}, {mask.sum()} shared points)")
    return 0


def cmd_train(args, config) -> int:
    entries = read_manifest(args.manifest)
    desc_cfg = _descriptor_config(args, config)
    tcfg = TrainConfig(
        anchors_per_fragment=int(_opt(args, config, "anchors", 20)),
        patch_point_budget=int(_opt(args, config, "budget", 2048)),
        batch_size=_opt(args, config, "batch-size", None),
        epochs=int(_opt(args, config, "epochs", 20)),
        lr=float(_opt(args, config, "lr", 0.001)),
        positive_margin=float(_opt(args, config, "positive-margin", 0.1)),
        negative_margin=float(_opt(args, config, "negative-margin", 1.4)),
        seed=int(_opt(args, config, "seed", 0)),
    )
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config.json").write_text(json.dumps(descriptor_config_to_dict(desc_cfg), indent=2))
    result = train(entries, desc_cfg, tcfg, out_dir, manifest_root=Path(args.manifest).parent)
    first = np.mean([h[2] for h in result.history if h[1] == 0])
    last = np.mean([h[2] for h in result.history if h[1] == tcfg.epochs - 1])
    print(f"trained {tcfg.epochs} epochs, {len(result.history)} steps")
    print(f"mean loss epoch 0: {first:.4f}  final epoch: {last:.4f}")
    print(f"best checkpoint: {result.best_checkpoint}")
    return 0


def cmd_describe(args, config) -> int:
    params, desc_cfg = _checkpoint_and_config(args, config)
    cloud = read_cloud(args.cloud)
    seed = int(_opt(args, config, "seed", 0))
    if args.anchors:
        anchors = [int(line) for line in Path(args.anchors).read_text().split()]
    else:
        count = int(_opt(args, config, "num-anchors", 64))
        rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, 11])))
        anchors = sorted(rng.choice(len(cloud), size=min(count, len(cloud)), replace=False).tolist())
    batch = describe_batch(
        cloud,
        anchors,
        desc_cfg,
        params,
        budget=int(_opt(args, config, "budget", 2048)),
        seed=seed,
        threads=_resolve_threads(args, config),
    )
    stacked, kept = batch.stacked()
    write_descriptors(args.out, np.asarray(anchors)[kept], stacked)
    for pos, reason in batch.skipped:
        print(f"skipped anchor {anchors[pos]}: {reason}", file=sys.stderr)
    print(f"wrote {len(stacked)} descriptors to {args.out}")
    return 0


def cmd_match(args, config) -> int:
    anchors_a, desc_a = read_descriptors(args.desc_a)
    anchors_b, desc_b = read_descriptors(args.desc_b)
    corr = mutual_nn(desc_a, desc_b)
    with open(args.out, "w") as fh:
        fh.write("anchor_a,anchor_b,distance\n")
        for (i, j), d in zip(corr.pairs, corr.distances):
            fh.write(f"{anchors_a[i]},{anchors_b[j]},{d!r}\n")
    print(f"{len(corr)} mutual correspondences -> {args.out}")
    return 0


def _parse_gt(text: str) -> RigidTransform:
    values = [float(v) for v in text.split(",")]
    if len(values) != 12:
        raise UsageError("--gt needs 12 comma-separated floats (r00..r22,t0,t1,t2)")
    return RigidTransform(np.array(values[:9]).reshape(3, 3), np.array(values[9:]))


def cmd_register(args, config) -> int:
    params, desc_cfg = _checkpoint_and_config(args, config)
    frag_a = read_cloud(args.cloud_a)
    frag_b = read_cloud(args.cloud_b)
    gt = _parse_gt(args.gt) if args.gt else None
    spacing = median_spacing(frag_a)
    thresholds = EvalThresholds(
        inlier_distance=float(_opt(args, config, "inlier-distance", 2.0 * spacing)),
        inlier_ratio=0.05,
    )
    from .evaluate import evaluate_pair

    result = evaluate_pair(
        frag_a,
        frag_b,
        gt,
        desc_cfg,
        params,
        thresholds,
        anchors_per_fragment=int(_opt(args, config, "num-anchors", 256)),
        budget=int(_opt(args, config, "budget", 2048)),
        seed=int(_opt(args, config, "seed", 0)),
        ransac_iterations=int(_opt(args, config, "ransac-iterations", 2000)),
    )
    payload = {
        "correspondences": int(len(result.correspondences)),
        "note": result.note,
        "estimate": None,
    }
    if result.estimate is not None:
        payload["estimate"] = {
            "rotation": result.estimate.rotation.tolist(),
            "translation": result.estimate.translation.tolist(),
        }
    if gt is not None:
        payload.update(
            inlier_ratio=result.inlier_ratio,
            matched=result.matched,
            rre_deg=result.rre_deg,
            rte=result.rte,
            success=result.success,
        )
    Path(args.report).write_text(json.dumps(payload, indent=2) + "\n")
    print(f"register: {payload.get('success', 'no ground truth')} -> {args.report}")
    return 0


def cmd_eval(args, config) -> int:
    params, desc_cfg = _checkpoint_and_config(args, config)
    entries = read_manifest(args.manifest)
    root = Path(args.manifest).parent
    pair_data = []
    for e in entries:
        fa = read_cloud(root / e.frag_a if not Path(e.frag_a).is_absolute() else e.frag_a)
        fb = read_cloud(root / e.frag_b if not Path(e.frag_b).is_absolute() else e.frag_b)
        pair_data.append((fa, fb, e.transform))
    spacing = median_spacing(pair_data[0][0])
    thresholds = EvalThresholds(
        inlier_distance=float(_opt(args, config, "tau1", 2.0 * spacing)),
        inlier_ratio=float(_opt(args, config, "tau2", 0.05)),
        rte_bound=float(_opt(args, config, "rte-bound", 2.0)),
        rre_bound_deg=float(_opt(args, config, "rre-bound", 5.0)),
    )
    report, evaluations = evaluate_pairs(
        pair_data,
        desc_cfg,
        params,
        thresholds,
        anchors_per_fragment=int(_opt(args, config, "num-anchors", 256)),
        budget=int(_opt(args, config, "budget", 2048)),
        seed=int(_opt(args, config, "seed", 0)),
        ransac_iterations=int(_opt(args, config, "ransac-iterations", 2000)),
    )
    report.to_json(args.report)
    if args.csv:
        report.to_csv(args.csv)
    if args.sweep:
        base = thresholds
        rows = fmr_threshold_sweep(
            sweep_inputs(evaluations),
            tau1_values=np.linspace(0.25, 3.0, 12) * base.inlier_distance,
            tau2_values=np.linspace(0.01, 0.4, 12),
            base=base,
        )
        write_sweep_csv(args.sweep, rows)
    agg = report.aggregates()
    print(f"FMR {agg['fmr']:.3f}  SR {agg['success_rate']:.3f} -> {args.report}")
    return 0


def cmd_check_equivariance(args, config) -> int:
    seed = int(_opt(args, config, "seed", 0))
    cfg = None
    params = None
    if args.checkpoint:
        params, cfg = _checkpoint_and_config(args, config)
    results = run_equivariance_suite(seed=seed, cfg=cfg, params=params)
    failed = False
    for r in results:
        status = "ok" if r.passed else "FAIL"
        print(f"{r.name}: max deviation {r.max_deviation:.3e} (tolerance {r.tolerance:.0e}) {status}")
        for key, value in r.details.items():
            print(f"    {key}: {value}")
        failed = failed or not r.passed
    return 3 if failed else 0


def dispatch(argv) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    config = _load_config_file(args.config)
    handlers = {
        "synth": cmd_synth,
        "train": cmd_train,
        "describe": cmd_describe,
        "match": cmd_match,
        "register": cmd_register,
        "eval": cmd_eval,
        "check-equivariance": cmd_check_equivariance,
    }
    return handlers[args.command](args, config)


def main(argv=None) -> int:
    try:
        return dispatch(sys.argv[1:] if argv is None else argv)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except (SpinKitError, OSError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
