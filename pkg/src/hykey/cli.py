"""Command line entry point: dataset generation, training, evaluation, matching.

Option precedence everywhere is config file < environment < flags.
numpy and the package internals are imported inside the command handlers
so the HYKEY_THREADS cap can be applied to the BLAS thread pools before
numpy first loads.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

THREAD_ENV_VARS = (
    "OMP_NUM_THREADS",
    "OPENBLAS_NUM_THREADS",
    "MKL_NUM_THREADS",
    "NUMEXPR_NUM_THREADS",
    "VECLIB_MAXIMUM_THREADS",
)


class CliError(Exception):
    """User-facing failure: message goes to stderr, ``code`` becomes the exit status."""

    def __init__(self, message: str, code: int = 2):
        super().__init__(message)
        self.code = code


def apply_thread_env(environ=None) -> int | None:
    """Propagate HYKEY_THREADS to the BLAS pool variables; call before numpy loads."""
    environ = os.environ if environ is None else environ
    raw = environ.get("HYKEY_THREADS")
    if raw is None or raw == "":
        return None
    try:
        n = int(raw)
    except ValueError:
        raise CliError(f"HYKEY_THREADS must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise CliError(f"HYKEY_THREADS must be a positive integer, got {raw!r}")
    for var in THREAD_ENV_VARS:
        environ[var] = str(n)
    return n


def env_seed(environ=None) -> int | None:
    environ = os.environ if environ is None else environ
    raw = environ.get("HYKEY_SEED")
    if raw is None or raw == "":
        return None
    try:
        return int(raw)
    except ValueError:
        raise CliError(f"HYKEY_SEED must be an integer, got {raw!r}") from None


def load_config_file(path) -> dict:
    p = Path(path)
    try:
        raw = p.read_bytes()
    except OSError as exc:
        raise CliError(f"cannot read config {p}: {exc}", code=1) from exc
    if p.suffix.lower() == ".toml":
        try:
            import tomllib
        except ModuleNotFoundError:
            import tomli as tomllib

        try:
            cfg = tomllib.loads(raw.decode("utf-8"))
        except (tomllib.TOMLDecodeError, UnicodeDecodeError) as exc:
            raise CliError(f"config {p} is not valid TOML: {exc}") from exc
    else:
        try:
            cfg = json.loads(raw.decode("utf-8"))
        except (json.JSONDecodeError, UnicodeDecodeError) as exc:
            raise CliError(f"config {p} is not valid JSON: {exc}") from exc
    if not isinstance(cfg, dict):
        raise CliError(f"config {p} must hold a table/object at top level")
    return cfg


def _typed(cfg: dict, key: str, kind, path: str, default=None):
    """Fetch cfg[key] as ``kind``, naming the offending field path on error."""
    if key not in cfg:
        return default
    value = cfg[key]
    if kind is float and isinstance(value, (int, float)) and not isinstance(value, bool):
        return float(value)
    if kind is int and isinstance(value, int) and not isinstance(value, bool):
        return int(value)
    if kind is bool and isinstance(value, bool):
        return value
    if kind is str and isinstance(value, str):
        return value
    if kind is dict and isinstance(value, dict):
        return value
    raise CliError(f"config error at {path}: expected {kind.__name__}, got {value!r}")


def _spec_from(cfg: dict, mode: str, seed: int, path: str):
    from .synth import PairSpec

    kwargs = {}
    for name in ("rotation_deg", "scale_max", "translation_frac", "perspective",
                 "gain_jitter", "gamma_jitter", "noise_std", "band_gain_jitter"):
        v = _typed(cfg, name, float, f"{path}.{name}")
        if v is not None:
            kwargs[name] = v
    unknown = set(cfg) - set(kwargs) - {"mode", "seed"}
    if unknown:
        raise CliError(f"config error at {path}.{sorted(unknown)[0]}: unknown field")
    try:
        return PairSpec(mode=mode, seed=seed, **kwargs)
    except ValueError as exc:
        raise CliError(f"config error at {path}: {exc}") from exc


# -- gen-data ----------------------------------------------------------------

def cmd_gen_data(args) -> int:
    cfg = load_config_file(args.config) if args.config else {}
    mode = args.mode or _typed(cfg, "mode", str, "mode")
    if mode not in ("planar", "epipolar"):
        raise CliError(f"--mode must be planar or epipolar, got {mode!r}")
    count = args.count if args.count is not None else _typed(cfg, "count", int, "count")
    if count is None:
        raise CliError("--count is required (flag or config file)")
    seed = _typed(cfg, "seed", int, "seed", default=0)
    env = env_seed()
    if env is not None:
        seed = env
    if args.seed is not None:
        seed = args.seed

    from .data import write_dataset

    spec = _spec_from(_typed(cfg, "spec", dict, "spec", default={}), mode, seed, "spec")
    try:
        manifest = write_dataset(
            args.out, mode, count, seed, spec=spec,
            bands=_typed(cfg, "bands", int, "bands", default=16),
            height=_typed(cfg, "height", int, "height", default=64),
            width=_typed(cfg, "width", int, "width", default=64),
            force=args.force,
        )
    except FileExistsError as exc:
        raise CliError(str(exc), code=1) from exc
    except ValueError as exc:
        raise CliError(f"config error: {exc}") from exc
    print(f"wrote {len(manifest['items'])} {mode} pairs to {args.out}")
    return 0


# -- train -------------------------------------------------------------------

def _build_train_config(raw: dict, no_pe_flag: bool, seed_flag: int | None):
    from dataclasses import fields

    from .losses import LossWeights
    from .model import HyKeyConfig
    from .training import TrainConfig

    kwargs = {}
    for name, kind in (("learning_rate", float), ("warmup_steps", int),
                       ("batch_size", int), ("epoch_frames", int), ("epochs", int),
                       ("epi_epoch", int), ("seed", int), ("grad_clip", float),
                       ("max_steps", int), ("no_pe", bool)):
        v = _typed(raw, name, kind, name)
        if v is not None:
            kwargs[name] = v

    w_cfg = _typed(raw, "weights", dict, "weights", default={})
    w_names = {f.name for f in fields(LossWeights)}
    w_kwargs = {}
    for name in w_cfg:
        if name not in w_names:
            raise CliError(f"config error at weights.{name}: unknown field")
        w_kwargs[name] = _typed(w_cfg, name, float, f"weights.{name}")
    kwargs["weights"] = LossWeights(**w_kwargs)

    m_cfg = _typed(raw, "model", dict, "model", default={})
    m_fields = {f.name: f for f in fields(HyKeyConfig)}
    m_kwargs = {}
    for name, value in m_cfg.items():
        if name not in m_fields:
            raise CliError(f"config error at model.{name}: unknown field")
        if name == "channels":
            if (not isinstance(value, (list, tuple)) or len(value) != 3
                    or not all(isinstance(c, int) and not isinstance(c, bool) for c in value)):
                raise CliError(f"config error at model.channels: expected three integers, got {value!r}")
            m_kwargs[name] = tuple(value)
        else:
            kind = float if m_fields[name].type in ("float", float) else int
            m_kwargs[name] = _typed(m_cfg, name, kind, f"model.{name}")
    try:
        kwargs["model"] = HyKeyConfig(**m_kwargs)
    except ValueError as exc:
        raise CliError(f"config error at model: {exc}") from exc

    if no_pe_flag:
        kwargs["no_pe"] = True
    if seed_flag is not None:
        kwargs["seed"] = seed_flag
        os.environ.pop("HYKEY_SEED", None)  # a seed flag outranks the env override
    try:
        return TrainConfig(**kwargs)
    except Exception as exc:
        raise CliError(f"config error: {exc}") from exc


def _build_datasets(data_cfg, config):
    from .data import DiskEpipolarScenes, DiskPlanarPairs, ManifestError
    from .synth import EpipolarSceneDataset, PairSpec, PlanarPairDataset
    from .training import EpipolarTriplets, PlanarTriplets, effective_seed

    if not isinstance(data_cfg, dict) or not any(k in data_cfg for k in ("planar", "epipolar")):
        raise CliError("config error at data: need a 'planar' and/or 'epipolar' entry")
    unknown = set(data_cfg) - {"planar", "epipolar"}
    if unknown:
        raise CliError(f"config error at data.{sorted(unknown)[0]}: unknown field")
    seed = effective_seed(config)
    out = []
    for key in ("planar", "epipolar"):
        if key not in data_cfg:
            continue
        entry = data_cfg[key]
        path = f"data.{key}"
        if isinstance(entry, str):
            try:
                ds = DiskPlanarPairs(entry) if key == "planar" else DiskEpipolarScenes(entry)
            except ManifestError as exc:
                raise CliError(f"config error at {path}: {exc}") from exc
        elif isinstance(entry, dict):
            count = _typed(entry, "count", int, f"{path}.count")
            if count is None or count < 1:
                raise CliError(f"config error at {path}.count: need a positive pair count")
            spec = _spec_from(_typed(entry, "spec", dict, f"{path}.spec", default={}),
                              key, _typed(entry, "seed", int, f"{path}.seed", default=seed),
                              f"{path}.spec")
            dims = dict(
                bands=_typed(entry, "bands", int, f"{path}.bands", default=config.model.bands),
                height=_typed(entry, "height", int, f"{path}.height", default=32),
                width=_typed(entry, "width", int, f"{path}.width", default=32),
            )
            cls = PlanarPairDataset if key == "planar" else EpipolarSceneDataset
            ds = cls(count, spec=spec, **dims)
        else:
            raise CliError(f"config error at {path}: expected a dataset directory or a table")
        if key == "planar":
            out.append(PlanarTriplets(ds))
        else:
            out.append(EpipolarTriplets(ds, warp_spec=PairSpec(seed=seed)))
    return out


def cmd_train(args) -> int:
    from dataclasses import asdict

    from .model import HyKeyNetwork
    from .training import Trainer, TrainingConfigError, effective_seed

    raw = load_config_file(args.config)
    config = _build_train_config(raw, args.no_pe, args.seed)
    try:
        seed = effective_seed(config)
        datasets = _build_datasets(raw.get("data"), config)
        network = HyKeyNetwork(config.model, seed=seed)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        resolved = {
            "command": "train",
            "seed": seed,
            "train": asdict(config),
            "data": raw.get("data"),
        }
        with open(out / "config.json", "w", encoding="utf-8") as fh:
            json.dump(resolved, fh, indent=1, sort_keys=True, default=list)
            fh.write("\n")
        log_path = out / "train_log.jsonl"
        log_path.unlink(missing_ok=True)
        trainer = Trainer(network, datasets, config, log_path=log_path)
        trainer.run()
        trainer.save(out / "checkpoint_final.ckpt")
    except TrainingConfigError as exc:
        raise CliError(f"config error: {exc}") from exc
    totals = [r["loss_total"] for r in trainer.records]
    last = f"{totals[-1]:.4f}" if totals else "n/a"
    print(f"trained {len(trainer.records)} steps over {config.epochs} epochs "
          f"(final loss {last}); artifacts in {out}")
    return 0


# -- eval --------------------------------------------------------------------

def _network_from_checkpoint(ckpt, max_kpts: int | None):
    from dataclasses import replace

    from .model import CheckpointError, load_checkpoint

    try:
        network, meta, _ = load_checkpoint(ckpt)
    except (OSError, CheckpointError) as exc:
        raise CliError(f"cannot load checkpoint {ckpt}: {exc}", code=1) from exc
    if max_kpts is not None and max_kpts != network.config.max_keypoints:
        network.config = replace(network.config, max_keypoints=max_kpts)
    return network, meta


def _values_or_none(values: list) -> list | None:
    return None if any(v is None for v in values) else values


def cmd_eval(args) -> int:
    import numpy as np

    from dataclasses import asdict

    from .data import DiskEpipolarScenes, DiskPlanarPairs, ManifestError, load_manifest
    from .geometry import DegenerateGeometryError, estimate_relative_pose, pose_error_deg
    from .matching import mnn_match, similarity
    from .metrics import THRESHOLDS_PX, EvalReport, matching_score, mha, mma, repeatability

    cfg = load_config_file(args.config) if args.config else {}
    max_kpts = args.max_kpts if args.max_kpts is not None else _typed(
        cfg, "max_keypoints", int, "max_keypoints", default=1024)
    seed = _typed(cfg, "seed", int, "seed", default=0)
    env = env_seed()
    if env is not None:
        seed = env
    if args.seed is not None:
        seed = args.seed

    try:
        manifest = load_manifest(args.data)
    except ManifestError as exc:
        raise CliError(f"cannot read dataset {args.data}: {exc}", code=1) from exc
    need = "planar" if args.mode == "homography" else "epipolar"
    if manifest["mode"] != need:
        raise CliError(f"--mode {args.mode} needs a {need} dataset, "
                       f"but {args.data} holds {manifest['mode']} data")

    network, _ = _network_from_checkpoint(args.ckpt, max_kpts)
    resolved = {
        "command": "eval",
        "mode": args.mode,
        "ckpt": str(args.ckpt),
        "data": str(args.data),
        "max_keypoints": network.config.max_keypoints,
        "seed": seed,
        "model": asdict(network.config),
    }
    report = EvalReport(resolved)

    def detect(cube):
        out = network.forward(cube.data)
        return out.keypoints.data, out.descriptors.data

    if args.mode == "homography":
        pairs = DiskPlanarPairs(args.data)
        for i in range(len(pairs)):
            p = pairs[i]
            k0, d0 = detect(p.cube0)
            k1, d1 = detect(p.cube1)
            matches = mnn_match(similarity(d0, d1))
            shape0 = (p.cube0.height, p.cube0.width)
            shape1 = (p.cube1.height, p.cube1.width)
            rng = np.random.default_rng((seed, 5, i))
            report.add_pair(
                f"pair_{i:04d}",
                {
                    "repeatability": _values_or_none(
                        [repeatability(k0, k1, p.homography, shape0, shape1, t, mask1=p.valid1)
                         for t in THRESHOLDS_PX]),
                    "matching_score": _values_or_none(
                        [matching_score(k0, k1, matches, p.homography, shape0, shape1, t,
                                        mask1=p.valid1) for t in THRESHOLDS_PX]),
                    "mma": _values_or_none(
                        [mma(k0, k1, matches, p.homography, t) for t in THRESHOLDS_PX]),
                    "mha": [mha(k0, k1, matches, p.homography, shape0, t, rng=rng)
                            for t in THRESHOLDS_PX],
                },
                counts={"keypoints0": len(k0), "keypoints1": len(k1), "matches": len(matches)},
            )
    else:
        scenes = DiskEpipolarScenes(args.data)
        for i in range(len(scenes)):
            s = scenes[i]
            k0, d0 = detect(s.cube0)
            k2, d2 = detect(s.cube1)
            matches = mnn_match(similarity(d0, d2))
            err = float("inf")
            if len(matches) >= 8:
                try:
                    R, t, _ = estimate_relative_pose(
                        k0[matches[:, 0]], k2[matches[:, 1]], s.K0, s.K1,
                        rng=np.random.default_rng((seed, 5, i)))
                    err = pose_error_deg(R, t, s.R, s.t)
                except DegenerateGeometryError:
                    pass
            report.add_pair(
                f"pair_{i:04d}", {},
                counts={"keypoints0": len(k0), "keypoints1": len(k2), "matches": len(matches)},
                pose_error_deg=err,
            )

    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    report.write_json(out)
    report.write_csv(out.with_suffix(".csv"))
    svgs = report.write_svgs(out.parent)
    agg = report.aggregate()
    if args.mode == "homography":
        summary = ", ".join(f"{name} AUC {vals['auc']:.3f}" if vals else f"{name} n/a"
                            for name, vals in agg["metrics"].items())
    else:
        summary = ", ".join(f"mAA@{t} {v:.3f}" if v is not None else f"mAA@{t} n/a"
                            for t, v in (agg.get("maa") or {}).items())
    print(f"evaluated {agg['num_pairs']} pairs: {summary}; "
          f"report {out}, {len(svgs)} curve plots")
    return 0


# -- match -------------------------------------------------------------------

def cmd_match(args) -> int:
    import numpy as np

    from .cube import CubeFormatError, load_cube
    from .geometry import apply_homography, sampson_error
    from .matching import mnn_match, similarity
    from .viz import match_overlay_svg, pseudo_rgb

    try:
        cube_a = load_cube(args.a)
        cube_b = load_cube(args.b)
    except (OSError, CubeFormatError) as exc:
        raise CliError(f"cannot read cube: {exc}", code=1) from exc
    network, _ = _network_from_checkpoint(args.ckpt, args.max_kpts)

    out_a = network.forward(cube_a.data)
    out_b = network.forward(cube_b.data)
    k0, d0 = out_a.keypoints.data, out_a.descriptors.data
    k1, d1 = out_b.keypoints.data, out_b.descriptors.data
    matches = mnn_match(similarity(d0, d1))

    correct = None
    gt_kind = None
    if args.gt:
        gt = load_config_file(args.gt)
        if "h01" in gt:
            h01 = np.asarray(gt["h01"], dtype=np.float64)
            if h01.shape != (3, 3):
                raise CliError("config error at h01: expected a 3x3 matrix")
            gt_kind = "homography"
            if len(matches):
                err = np.linalg.norm(
                    apply_homography(h01, k0[matches[:, 0]]) - k1[matches[:, 1]], axis=1)
                correct = [bool(e <= 3.0) for e in err]
            else:
                correct = []
        elif "f02" in gt:
            f02 = np.asarray(gt["f02"], dtype=np.float64)
            if f02.shape != (3, 3):
                raise CliError("config error at f02: expected a 3x3 matrix")
            gt_kind = "epipolar"
            if len(matches):
                err = np.sqrt(sampson_error(f02, k0[matches[:, 0]], k1[matches[:, 1]]))
                correct = [bool(e < 5.0) for e in err]
            else:
                correct = []
        else:
            raise CliError("config error: ground truth file needs an 'h01' or 'f02' matrix")

    svg = match_overlay_svg(
        pseudo_rgb(cube_a.data, cube_a.wavelengths_nm),
        pseudo_rgb(cube_b.data, cube_b.wavelengths_nm),
        k0, k1, matches, correct=correct,
    )
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(svg, encoding="utf-8")

    sims = similarity(d0, d1)
    records = []
    for n, (i, j) in enumerate(np.asarray(matches).reshape(-1, 2)):
        rec = {
            "index0": int(i), "index1": int(j),
            "xy0": [float(k0[i, 0]), float(k0[i, 1])],
            "xy1": [float(k1[j, 0]), float(k1[j, 1])],
            "similarity": float(sims[i, j]),
        }
        if correct is not None:
            rec["correct"] = correct[n]
        records.append(rec)
    doc = {
        "config": {
            "command": "match", "ckpt": str(args.ckpt), "a": str(args.a), "b": str(args.b),
            "max_keypoints": network.config.max_keypoints,
            "gt": str(args.gt) if args.gt else None, "gt_kind": gt_kind,
        },
        "keypoints0": len(k0),
        "keypoints1": len(k1),
        "matches": records,
        "num_correct": (None if correct is None else int(sum(correct))),
    }
    json_path = out.with_suffix(".json")
    with open(json_path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=1, sort_keys=True)
        fh.write("\n")
    flagged = "" if correct is None else f", {doc['num_correct']} correct"
    print(f"matched {len(records)} keypoint pairs{flagged}; wrote {out} and {json_path}")
    return 0


# -- parser ------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="hykey",
        description="Spectral-spatial keypoint toolbox: synthetic data, training, "
                    "evaluation, and match inspection.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic pair dataset")
    p.add_argument("--mode", choices=["planar", "epipolar"])
    p.add_argument("--count", type=int, help="number of pairs")
    p.add_argument("--out", required=True, help="dataset directory")
    p.add_argument("--seed", type=int)
    p.add_argument("--force", action="store_true", help="overwrite a non-empty directory")
    p.add_argument("--config", help="JSON or TOML file with defaults")
    p.set_defaults(handler=cmd_gen_data)

    p = sub.add_parser("train", help="train a model from a config file")
    p.add_argument("--config", required=True, help="JSON or TOML training config")
    p.add_argument("--out", required=True, help="run directory for checkpoint and logs")
    p.add_argument("--no-pe", action="store_true", dest="no_pe",
                   help="disable the epipolar loss term permanently")
    p.add_argument("--seed", type=int)
    p.set_defaults(handler=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    p.add_argument("--mode", choices=["homography", "pose"], required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--max-kpts", type=int, dest="max_kpts", help="keypoint budget (default 1024)")
    p.add_argument("--out", default="report.json")
    p.add_argument("--seed", type=int)
    p.add_argument("--config", help="JSON or TOML file with defaults")
    p.set_defaults(handler=cmd_eval)

    p = sub.add_parser("match", help="match two cubes and render the correspondences")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--a", required=True, help="first cube file")
    p.add_argument("--b", required=True, help="second cube file")
    p.add_argument("--out", default="viz.svg")
    p.add_argument("--gt", help="JSON file with an 'h01' or 'f02' matrix for coloring")
    p.add_argument("--max-kpts", type=int, dest="max_kpts")
    p.set_defaults(handler=cmd_match)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        apply_thread_env()
        return args.handler(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except (OSError, ValueError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
