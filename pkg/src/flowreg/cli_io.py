"""File formats, run configuration, and the command implementations.

Volumes, vector fields, and label masks share one purpose-built binary
container ("FRG1"): a fixed little-endian header followed by the raw
payload, so round trips are bit-exact and testable. MLP checkpoints get
their own header ("FRGP") with a float64 payload in layer order. Run
configuration is a flat key/value text format with dotted section
prefixes; unknown keys are hard errors.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import struct
import time
from pathlib import Path

import numpy as np

from . import __version__
from .dynamics import FlowConfig, intermediate_warp
from .evalsynth import (
    BumpDeformSpec,
    EvalReport,
    PhantomSpec,
    dice_report,
    endpoint_error,
    fold_fraction,
    jacobian_determinant,
    make_bump_deformation,
    make_phantom,
    synth_pair,
)
from .objective import LossBreakdown
from .registration import (
    DivergenceError,
    OptimConfig,
    RegistrationConfig,
    apply_final,
    coarse_to_fine,
)
from .velocity_net import MLPParams, NetConfig
from .volume import (
    GridSpec,
    LabelMask,
    VectorField3,
    Volume3,
    resample_field,
    warp_mask_nearest,
)

MAGIC_VOLUME = b"FRG1"
MAGIC_PARAMS = b"FRGP"

KIND_SCALAR = 0
KIND_VECTOR = 1
KIND_MASK = 2

_HEADER = struct.Struct("<4sB3I3d3d")
_PARAMS_HEADER = struct.Struct("<4sIBdQ")

_ACTIVATION_CODES = {"sine": 0, "tanh": 1}
_ACTIVATION_NAMES = {v: k for k, v in _ACTIVATION_CODES.items()}


class FileFormatError(ValueError):
    """A file does not match the container contract."""


class ConfigError(ValueError):
    """A configuration file has unknown keys or bad values."""


# ---------------------------------------------------------------------------
# volume container


def write_volume(path, obj) -> None:
    """Write a Volume3, VectorField3, or LabelMask to the binary container."""
    path = Path(path)
    if isinstance(obj, Volume3):
        kind, payload = KIND_SCALAR, obj.data.astype("<f4").tobytes()
    elif isinstance(obj, VectorField3):
        kind, payload = KIND_VECTOR, obj.data.astype("<f4").tobytes()
    elif isinstance(obj, LabelMask):
        kind, payload = KIND_MASK, obj.data.astype("<u2").tobytes()
    else:
        raise TypeError(f"cannot serialize {type(obj).__name__}")
    g = obj.grid
    header = _HEADER.pack(MAGIC_VOLUME, kind, *g.dims, *g.spacing, *g.origin)
    try:
        path.write_bytes(header + payload)
    except OSError as exc:
        raise OSError(f"failed to write {path}: {exc}") from exc


def read_volume(path):
    """Read the container back; exact inverse of write_volume."""
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as exc:
        raise OSError(f"failed to read {path}: {exc}") from exc
    if len(blob) < _HEADER.size:
        raise FileFormatError(f"{path}: truncated header ({len(blob)} bytes)")
    magic, kind, nx, ny, nz, sx, sy, sz, ox, oy, oz = _HEADER.unpack_from(blob)
    if magic != MAGIC_VOLUME:
        raise FileFormatError(f"{path}: bad magic {magic!r}, expected {MAGIC_VOLUME!r}")
    if kind not in (KIND_SCALAR, KIND_VECTOR, KIND_MASK):
        raise FileFormatError(f"{path}: unknown kind byte {kind}")
    if min(nx, ny, nz) < 2:
        raise FileFormatError(f"{path}: dims ({nx}, {ny}, {nz}) must be >= 2 per axis")
    grid = GridSpec((nx, ny, nz), (sx, sy, sz), (ox, oy, oz))
    n_nodes = nx * ny * nz
    payload = blob[_HEADER.size:]
    itemsize = 2 if kind == KIND_MASK else 4
    per_node = 3 if kind == KIND_VECTOR else 1
    expected = n_nodes * per_node * itemsize
    if len(payload) < expected:
        raise FileFormatError(
            f"{path}: truncated payload ({len(payload)} bytes, expected {expected})"
        )
    if len(payload) > expected:
        raise FileFormatError(
            f"{path}: oversized payload ({len(payload)} bytes, expected {expected})"
        )
    if kind == KIND_SCALAR:
        data = np.frombuffer(payload, dtype="<f4").astype(np.float64)
        return Volume3(grid, data.reshape(grid.shape_zyx))
    if kind == KIND_VECTOR:
        data = np.frombuffer(payload, dtype="<f4").astype(np.float64)
        return VectorField3(grid, data.reshape(grid.shape_zyx + (3,)))
    data = np.frombuffer(payload, dtype="<u2").astype(np.uint16)
    return LabelMask(grid, data.reshape(grid.shape_zyx))


# ---------------------------------------------------------------------------
# parameter checkpoints


def write_params(path, params: MLPParams) -> None:
    """Checkpoint: NetConfig header + float64 payload in layer order."""
    cfg = params.cfg
    header = _PARAMS_HEADER.pack(
        MAGIC_PARAMS,
        cfg.hidden_width,
        _ACTIVATION_CODES[cfg.activation],
        cfg.sine_frequency,
        cfg.seed,
    )
    payload = b"".join(a.astype("<f8").tobytes() for a in params.arrays())
    Path(path).write_bytes(header + payload)


def read_params(path) -> MLPParams:
    path = Path(path)
    blob = path.read_bytes()
    if len(blob) < _PARAMS_HEADER.size:
        raise FileFormatError(f"{path}: truncated header ({len(blob)} bytes)")
    magic, width, act_code, freq, seed = _PARAMS_HEADER.unpack_from(blob)
    if magic != MAGIC_PARAMS:
        raise FileFormatError(f"{path}: bad magic {magic!r}, expected {MAGIC_PARAMS!r}")
    if act_code not in _ACTIVATION_NAMES:
        raise FileFormatError(f"{path}: unknown activation code {act_code}")
    cfg = NetConfig(hidden_width=width, activation=_ACTIVATION_NAMES[act_code],
                    sine_frequency=freq, seed=seed)
    shapes = [(width, 4), (width,), (width, width), (width,), (3, width), (3,)]
    expected = sum(int(np.prod(s)) for s in shapes) * 8
    payload = blob[_PARAMS_HEADER.size:]
    if len(payload) != expected:
        raise FileFormatError(
            f"{path}: truncated payload ({len(payload)} bytes, expected {expected})"
        )
    arrays = []
    offset = 0
    for shape in shapes:
        n = int(np.prod(shape))
        arrays.append(np.frombuffer(payload, dtype="<f8", count=n, offset=offset).reshape(shape).copy())
        offset += n * 8
    return MLPParams(cfg, *arrays)


# ---------------------------------------------------------------------------
# configuration files


def _parse_kv_text(text: str, path: str) -> dict[str, str]:
    entries: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key or not value:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {raw!r}")
        if key in entries:
            raise ConfigError(f"{path}:{lineno}: duplicate key {key!r}")
        entries[key] = value
    return entries


def _to_int(key: str, value: str) -> int:
    try:
        return int(value)
    except ValueError:
        raise ConfigError(f"{key}: expected an integer, got {value!r}") from None


def _to_float(key: str, value: str) -> float:
    try:
        return float(value)
    except ValueError:
        raise ConfigError(f"{key}: expected a number, got {value!r}") from None


def _to_triple(key: str, value: str, conv) -> tuple:
    parts = value.replace(",", " ").split()
    if len(parts) != 3:
        raise ConfigError(f"{key}: expected 3 values, got {value!r}")
    return tuple(conv(key, p) for p in parts)


def _to_pair(key: str, value: str) -> tuple:
    parts = value.replace(",", " ").split()
    if len(parts) != 2:
        raise ConfigError(f"{key}: expected 2 values, got {value!r}")
    return tuple(_to_float(key, p) for p in parts)


def _to_choice(key: str, value: str, choices) -> str:
    v = value.lower()
    if v not in choices:
        raise ConfigError(f"{key}: expected one of {choices}, got {value!r}")
    return v


_OPTIM_KEYS = {
    "learning_rate": _to_float,
    "beta1": _to_float,
    "beta2": _to_float,
    "epsilon": _to_float,
    "max_iters": _to_int,
    "plateau_tol": _to_float,
    "plateau_window": _to_int,
}


def parse_registration_config(text: str, path: str = "<config>") -> RegistrationConfig:
    """Parse the run configuration; unspecified keys take module defaults."""
    entries = _parse_kv_text(text, path)
    top: dict = {}
    net: dict = {}
    optims: dict[str, dict] = {"coarse_optim": {}, "distill_optim": {}, "fine_optim": {}}

    for key, value in entries.items():
        if key == "coarse_dims":
            top["coarse_dims"] = _to_triple(key, value, _to_int)
        elif key == "fine_dims":
            top["fine_dims"] = _to_triple(key, value, _to_int)
        elif key == "n_steps":
            top["n_steps"] = _to_int(key, value)
        elif key == "metric":
            top["metric"] = _to_choice(key, value, ("mse", "ncc"))
        elif key == "lambda":
            top["lam"] = _to_float(key, value)
        elif key == "gamma":
            top["gamma"] = _to_float(key, value)
        elif key == "seed":
            top["seed"] = _to_int(key, value)
        elif key.startswith("net."):
            sub = key[len("net."):]
            if sub == "hidden_width":
                net[sub] = _to_int(key, value)
            elif sub == "activation":
                net[sub] = _to_choice(key, value, ("sine", "tanh"))
            elif sub == "sine_frequency":
                net[sub] = _to_float(key, value)
            elif sub == "seed":
                net[sub] = _to_int(key, value)
            else:
                raise ConfigError(f"unknown config key {key!r}")
        else:
            section, _, sub = key.partition(".")
            if section in optims and sub in _OPTIM_KEYS:
                optims[section][sub] = _OPTIM_KEYS[sub](key, value)
            else:
                raise ConfigError(f"unknown config key {key!r}")

    defaults = RegistrationConfig()
    try:
        return RegistrationConfig(
            **top,
            net=NetConfig(**{**dataclasses.asdict(defaults.net), **net}),
            coarse_optim=OptimConfig(**{**dataclasses.asdict(defaults.coarse_optim), **optims["coarse_optim"]}),
            distill_optim=OptimConfig(**{**dataclasses.asdict(defaults.distill_optim), **optims["distill_optim"]}),
            fine_optim=OptimConfig(**{**dataclasses.asdict(defaults.fine_optim), **optims["fine_optim"]}),
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def load_config(path) -> RegistrationConfig:
    return parse_registration_config(Path(path).read_text(), str(path))


def parse_synth_spec(text: str, path: str = "<spec>") -> tuple[PhantomSpec, BumpDeformSpec]:
    """Parse the phantom + deformation spec used by the synth command."""
    entries = _parse_kv_text(text, path)
    ph: dict = {}
    bump: dict = {}
    for key, value in entries.items():
        if key == "phantom.dims":
            ph["dims"] = _to_triple(key, value, _to_int)
        elif key == "phantom.n_blobs":
            ph["n_blobs"] = _to_int(key, value)
        elif key == "phantom.intensity_range":
            ph["intensity_range"] = _to_pair(key, value)
        elif key == "phantom.seed":
            ph["seed"] = _to_int(key, value)
        elif key == "bump.center":
            bump["center"] = _to_triple(key, value, _to_float)
        elif key == "bump.amplitude_voxels":
            bump["amplitude_voxels"] = _to_float(key, value)
        elif key == "bump.direction":
            bump["direction"] = _to_triple(key, value, _to_float)
        elif key == "bump.sigma":
            bump["sigma"] = _to_float(key, value)
        else:
            raise ConfigError(f"unknown config key {key!r}")
    try:
        return PhantomSpec(**ph), BumpDeformSpec(**bump)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


# ---------------------------------------------------------------------------
# run manifest


def _sha256(path) -> str:
    h = hashlib.sha256()
    h.update(Path(path).read_bytes())
    return h.hexdigest()


def _breakdown_row(b: LossBreakdown) -> list[float]:
    return [b.total, b.similarity, b.regularizer, b.distill]


def build_manifest(config: RegistrationConfig, inputs: dict[str, str],
                   histories: dict[str, list[LossBreakdown]],
                   timings: dict[str, float], outputs: dict[str, str],
                   summary: dict) -> dict:
    return {
        "tool_version": __version__,
        "created_unix": time.time(),
        "config": dataclasses.asdict(config),
        "inputs": {name: {"path": p, "sha256": _sha256(p)} for name, p in inputs.items()},
        "stages": {
            name: {
                "iterations": len(hist),
                "seconds": timings.get(name, 0.0),
                "history": [_breakdown_row(b) for b in hist],
                "history_columns": ["total", "similarity", "regularizer", "distill"],
            }
            for name, hist in histories.items()
        },
        "outputs": outputs,
        "summary": summary,
    }


def write_manifest(path, manifest: dict) -> None:
    Path(path).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def load_manifest(path) -> dict:
    return json.loads(Path(path).read_text())


def verify_manifest_inputs(manifest: dict) -> bool:
    """Re-hash the recorded inputs; True when every digest still matches."""
    return all(
        Path(entry["path"]).exists() and _sha256(entry["path"]) == entry["sha256"]
        for entry in manifest["inputs"].values()
    )


def write_loss_table(path, history: list[LossBreakdown]) -> None:
    lines = ["iteration\ttotal\tsimilarity\tregularizer\tdistill"]
    for i, b in enumerate(history, start=1):
        lines.append(f"{i}\t{b.total:.12g}\t{b.similarity:.12g}\t{b.regularizer:.12g}\t{b.distill:.12g}")
    Path(path).write_text("\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# commands


class _StageRecorder:
    """Loss sink that keeps per-stage histories and wall-clock timings."""

    def __init__(self):
        self.histories: dict[str, list[LossBreakdown]] = {}
        self.timings: dict[str, float] = {}
        self._started: dict[str, float] = {}

    def __call__(self, stage: str, iteration: int, breakdown: LossBreakdown) -> None:
        now = time.perf_counter()
        self._started.setdefault(stage, now)
        self.histories.setdefault(stage, []).append(breakdown)
        self.timings[stage] = now - self._started[stage]


def cmd_register(moving_path, fixed_path, config_path=None, out_dir="out",
                 seed=None) -> int:
    """Run the full coarse-to-fine registration and write all artifacts."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    try:
        moving = read_volume(moving_path)
        fixed = read_volume(fixed_path)
    except (FileFormatError, OSError) as exc:
        print(f"error: {exc}")
        return 1
    if not isinstance(moving, Volume3) or not isinstance(fixed, Volume3):
        print("error: register expects scalar volumes for moving and fixed")
        return 1
    if moving.grid.dims != fixed.grid.dims:
        print(f"error: grid mismatch: moving {moving.grid.dims} vs fixed {fixed.grid.dims}")
        return 2

    try:
        config = load_config(config_path) if config_path else RegistrationConfig()
    except (ConfigError, OSError) as exc:
        print(f"error: {exc}")
        return 1
    if seed is not None:
        config = dataclasses.replace(config, seed=int(seed))

    recorder = _StageRecorder()
    t0 = time.perf_counter()
    inputs = {"moving": str(moving_path), "fixed": str(fixed_path)}
    if config_path:
        inputs["config"] = str(config_path)

    try:
        result = coarse_to_fine(config, moving, fixed, sink=recorder)
    except DivergenceError as exc:
        print(f"error: optimization diverged: {exc}")
        manifest = build_manifest(config, inputs, recorder.histories, recorder.timings,
                                  outputs={}, summary={"status": "diverged"})
        write_manifest(out / "manifest.json", manifest)
        return 3

    moved = apply_final(moving, result.displacement)
    field_path = out / "displacement.frg"
    moved_path = out / "moved.frg"
    write_volume(field_path, result.displacement)
    write_volume(moved_path, moved)

    outputs = {"displacement": str(field_path), "moved": str(moved_path)}
    for stage, hist in recorder.histories.items():
        table = out / f"loss_{stage}.tsv"
        write_loss_table(table, hist)
        outputs[f"loss_{stage}"] = str(table)

    from .report import save_loss_figure, save_overlay_figure

    save_loss_figure(recorder.histories, out / "loss_curves.png")
    save_overlay_figure(moving, fixed, moved, out / "overlay.png")
    outputs["loss_curves"] = str(out / "loss_curves.png")
    outputs["overlay"] = str(out / "overlay.png")

    scale = (np.asarray(result.displacement.grid.dims, dtype=np.float64) - 1.0) / 2.0
    mean_abs_vox = float(np.mean(np.linalg.norm(result.displacement.vectors * scale, axis=1)))
    summary = {
        "status": "ok",
        "final_loss": recorder.histories.get("fine", [LossBreakdown(0, 0, 0, 0, 0)])[-1].total,
        "mean_abs_displacement_voxels": mean_abs_vox,
        "total_seconds": time.perf_counter() - t0,
    }
    manifest = build_manifest(config, inputs, recorder.histories, recorder.timings, outputs, summary)
    write_manifest(out / "manifest.json", manifest)
    print(f"register: done in {summary['total_seconds']:.1f}s, "
          f"mean |S| = {mean_abs_vox:.4f} voxels, outputs in {out}")
    return 0


def _format_report(report: EvalReport) -> str:
    lines = ["metric\tvalue"]
    for label in sorted(report.dice_per_label):
        lines.append(f"dice_label_{label}\t{report.dice_per_label[label]:.6f}")
    lines.append(f"dice_mean\t{report.dice_mean:.6f}")
    lines.append(f"fold_fraction\t{report.fold_fraction:.8f}")
    if report.mean_endpoint_error_voxels is not None:
        lines.append(f"mean_endpoint_error_voxels\t{report.mean_endpoint_error_voxels:.6f}")
        lines.append(f"max_endpoint_error_voxels\t{report.max_endpoint_error_voxels:.6f}")
    lines.append(f"runtime_seconds\t{report.runtime_seconds:.3f}")
    return "\n".join(lines) + "\n"


def cmd_evaluate(field_path, moving_mask_path, fixed_mask_path,
                 gt_field_path=None, out_path="report.tsv") -> int:
    """Score a displacement field against masks (and optional ground truth)."""
    t0 = time.perf_counter()
    try:
        field = read_volume(field_path)
        moving_mask = read_volume(moving_mask_path)
        fixed_mask = read_volume(fixed_mask_path)
        gt = read_volume(gt_field_path) if gt_field_path else None
    except (FileFormatError, OSError) as exc:
        print(f"error: {exc}")
        return 1
    if not isinstance(field, VectorField3):
        print(f"error: {field_path} is not a vector field")
        return 1
    if not isinstance(moving_mask, LabelMask) or not isinstance(fixed_mask, LabelMask):
        print("error: evaluate expects label masks")
        return 1
    if moving_mask.grid.dims != fixed_mask.grid.dims:
        print(f"error: grid mismatch: {moving_mask.grid.dims} vs {fixed_mask.grid.dims}")
        return 2

    warped = warp_mask_nearest(moving_mask, field, fixed_mask.grid)
    per_label, mean = dice_report(warped, fixed_mask)
    detj = jacobian_determinant(field)
    report = EvalReport(
        dice_per_label=per_label,
        dice_mean=mean,
        fold_fraction=fold_fraction(detj),
    )
    if gt is not None:
        if not isinstance(gt, VectorField3):
            print(f"error: {gt_field_path} is not a vector field")
            return 1
        recovered = field if field.grid.dims == gt.grid.dims else resample_field(field, gt.grid.dims)
        ee_mean, ee_max = endpoint_error(recovered, gt)
        report.mean_endpoint_error_voxels = ee_mean
        report.max_endpoint_error_voxels = ee_max
    report.runtime_seconds = time.perf_counter() - t0

    out_path = Path(out_path)
    if out_path.parent != Path(""):
        out_path.parent.mkdir(parents=True, exist_ok=True)
    out_path.write_text(_format_report(report))

    from .report import save_eval_figure

    save_eval_figure(report, detj, out_path.with_suffix(".png"))
    print(f"evaluate: dice_mean = {mean:.4f}, fold_fraction = {report.fold_fraction:.4%}")
    return 0


def cmd_synth(spec_path=None, out_dir="synth") -> int:
    """Generate the synthetic pair, ground truth, and recovery target."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    try:
        if spec_path:
            phantom_spec, bump_spec = parse_synth_spec(Path(spec_path).read_text(), str(spec_path))
        else:
            phantom_spec, bump_spec = PhantomSpec(), BumpDeformSpec()
    except (ConfigError, OSError) as exc:
        print(f"error: {exc}")
        return 1

    try:
        phantom = make_phantom(phantom_spec)
    except ValueError as exc:
        print(f"error: {exc}")
        return 1
    try:
        s_gt = make_bump_deformation(bump_spec, phantom_spec.dims)
    except ValueError as exc:
        print(f"error: {exc}")
        return 4
    pair = synth_pair(phantom, s_gt, bump=bump_spec)

    files = {
        "moving.frg": pair.moving,
        "fixed.frg": pair.fixed,
        "moving_mask.frg": pair.moving_mask,
        "fixed_mask.frg": pair.fixed_mask,
        "gt_field.frg": s_gt,
        "recovery_target.frg": pair.recovery_target,
    }
    for name, obj in files.items():
        write_volume(out / name, obj)
    print(f"synth: wrote {len(files)} files to {out}")
    return 0


def cmd_snapshots(moving_path, params_path, config_path=None, out_dir="snapshots") -> int:
    """Write the n+1 intermediate warps of the moving image (time-lapse)."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    try:
        moving = read_volume(moving_path)
        params = read_params(params_path)
        config = load_config(config_path) if config_path else RegistrationConfig()
    except (FileFormatError, ConfigError, OSError) as exc:
        print(f"error: {exc}")
        return 1
    if not isinstance(moving, Volume3):
        print(f"error: {moving_path} is not a scalar volume")
        return 1

    flow = FlowConfig(config.fine_dims, config.n_steps)
    snaps = []
    for k in range(flow.n_steps + 1):
        snap = intermediate_warp(moving, params, flow, k)
        write_volume(out / f"snapshot_{k:03d}.frg", snap)
        snaps.append(snap)

    from .report import save_snapshot_figure

    save_snapshot_figure(snaps, out / "snapshots.png")
    print(f"snapshots: wrote {flow.n_steps + 1} volumes to {out}")
    return 0
