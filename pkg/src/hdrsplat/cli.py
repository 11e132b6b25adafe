"""Command-line workflows, the flat key-value config, and PPM/PFM/camera file I/O.

Every option is a config key; command-line flags are shorthands that
override keys, so the resolved config written beside each command's
outputs reproduces the command on its own.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import evalgen, renderer
from .imaging import CurveDatabase, reinhard_tonemap, select_crf
from .renderer import Camera
from .scene import SceneFormatError, read_scene, write_scene
from .training import (
    HDR_SUPERVISED,
    CheckpointFormatError,
    TrainConfig,
    TrainingDiverged,
    View,
    read_checkpoint,
    render_bracketed,
    render_ldr,
    train,
    write_checkpoint,
)

log = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_NUMERIC = 1
EXIT_USAGE = 2

RESOLVED_NAME = "resolved_config.txt"
CAMERA_FILE = "cameras.json"
SCENE_FILE = "scene.bin"
CHECKPOINT_FILE = "checkpoint.bin"
LOSS_LOG = "loss.csv"
DOMAINS = ("ldr", "hdr", "bracketed:j")


class ConfigError(ValueError):
    pass


class ImageFormatError(ValueError):
    """Malformed PPM or PFM data."""


# ---------------------------------------------------------------------------
# atomic writes and image formats


def atomic_write_bytes(path, data: bytes) -> None:
    path = os.fspath(path)
    tmp = f"{path}.tmp{os.getpid()}"
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


def atomic_write_text(path, text: str) -> None:
    atomic_write_bytes(path, text.encode())


def ppm_bytes(img: np.ndarray) -> bytes:
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 2:
        img = np.repeat(img[:, :, None], 3, axis=2)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError(f"PPM needs an (H, W, 3) image, got {img.shape}")
    data = np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8)
    h, w = data.shape[:2]
    return f"P6\n{w} {h}\n255\n".encode() + data.tobytes()


def write_ppm(path, img: np.ndarray) -> None:
    """8-bit binary PPM; values quantized as round(x * 255) clamped to [0, 255]."""
    atomic_write_bytes(path, ppm_bytes(img))


def _header_tokens(data: bytes, count: int):
    """First ``count`` whitespace-separated header tokens (``#`` comments skipped) and the data offset."""
    tokens = []
    pos = 0
    n = len(data)
    while len(tokens) < count:
        while pos < n and data[pos : pos + 1].isspace():
            pos += 1
        if pos < n and data[pos : pos + 1] == b"#":
            while pos < n and data[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < n and not data[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ImageFormatError("truncated header")
        tokens.append(data[start:pos])
    if pos >= n:
        raise ImageFormatError("missing pixel data")
    return tokens, pos + 1  # exactly one whitespace byte ends the header


def parse_ppm(data: bytes) -> np.ndarray:
    tokens, off = _header_tokens(data, 4)
    if tokens[0] != b"P6":
        raise ImageFormatError(f"not a binary PPM (magic {tokens[0]!r})")
    try:
        w, h, maxval = (int(t) for t in tokens[1:])
    except ValueError as exc:
        raise ImageFormatError(f"non-integer PPM header field in {tokens[1:]!r}") from exc
    if w < 1 or h < 1 or not 0 < maxval < 256:
        raise ImageFormatError(f"unsupported PPM geometry {w}x{h}, maxval {maxval}")
    need = w * h * 3
    if len(data) - off < need:
        raise ImageFormatError(f"PPM pixel data truncated: {len(data) - off} of {need} bytes")
    px = np.frombuffer(data, dtype=np.uint8, count=need, offset=off).reshape(h, w, 3)
    return px.astype(np.float64) / maxval


def read_ppm(path) -> np.ndarray:
    return parse_ppm(Path(path).read_bytes())


def pfm_bytes(img: np.ndarray) -> bytes:
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 3 and img.shape[2] == 3:
        magic = b"PF"
    elif img.ndim == 2:
        magic = b"Pf"
    else:
        raise ValueError(f"PFM needs an (H, W, 3) or (H, W) image, got {img.shape}")
    h, w = img.shape[:2]
    # rows are stored bottom to top; negative scale marks little-endian
    body = np.ascontiguousarray(img[::-1], dtype="<f4").tobytes()
    return magic + f"\n{w} {h}\n-1.0\n".encode() + body


def write_pfm(path, img: np.ndarray) -> None:
    """32-bit float PFM, little-endian (scale -1.0)."""
    atomic_write_bytes(path, pfm_bytes(img))


def parse_pfm(data: bytes) -> np.ndarray:
    tokens, off = _header_tokens(data, 4)
    if tokens[0] == b"PF":
        channels = 3
    elif tokens[0] == b"Pf":
        channels = 1
    else:
        raise ImageFormatError(f"not a PFM (magic {tokens[0]!r})")
    try:
        w, h = int(tokens[1]), int(tokens[2])
        scale = float(tokens[3])
    except ValueError as exc:
        raise ImageFormatError(f"bad PFM header field in {tokens[1:]!r}") from exc
    if w < 1 or h < 1 or scale == 0.0 or not np.isfinite(scale):
        raise ImageFormatError(f"unsupported PFM geometry {w}x{h}, scale {scale}")
    dtype = "<f4" if scale < 0 else ">f4"
    count = w * h * channels
    if len(data) - off < 4 * count:
        raise ImageFormatError(f"PFM pixel data truncated: {len(data) - off} of {4 * count} bytes")
    px = np.frombuffer(data, dtype=dtype, count=count, offset=off)
    shape = (h, w, 3) if channels == 3 else (h, w)
    return px.reshape(shape)[::-1].astype(np.float64)


def read_pfm(path) -> np.ndarray:
    return parse_pfm(Path(path).read_bytes())


# ---------------------------------------------------------------------------
# camera file


def cameras_to_json(cameras, exposure: float, train_idx, test_idx) -> str:
    doc = {
        "exposure": float(exposure),
        "train": [int(i) for i in train_idx],
        "test": [int(i) for i in test_idx],
        "cameras": [c.to_dict() for c in cameras],
    }
    return json.dumps(doc, indent=1, sort_keys=True) + "\n"


def read_cameras(path) -> dict:
    try:
        doc = json.loads(Path(path).read_text())
        doc["cameras"] = [Camera.from_dict(d) for d in doc["cameras"]]
        doc["exposure"] = float(doc["exposure"])
        doc.setdefault("train", list(range(len(doc["cameras"]))))
        doc.setdefault("test", [])
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"malformed camera file {path}: {exc}") from exc
    return doc


# ---------------------------------------------------------------------------
# config


def _spec_defaults() -> dict:
    out = {}
    for f in dataclasses.fields(evalgen.SyntheticSpec):
        if f.name != "seed":
            out[f"synthetic.{f.name}"] = f.default
    return out


def _train_defaults() -> dict:
    out = {}
    for f in dataclasses.fields(TrainConfig):
        if f.name not in ("seed", "ratios"):
            out[f"train.{f.name}"] = f.default
    return out


def default_config() -> dict:
    cfg = {
        "seed": 0,
        "output_dir": "run",
        "data_dir": "",  # empty: <output_dir>/data
        "checkpoint": "",  # empty: <output_dir>/checkpoint.bin
        "scene.path": "",  # empty: <data_dir>/scene.bin
        "crf.database": "",  # empty: built-in curves
        "crf.name": "auto",  # "auto" selects from the database on a training view
        "crf.probe": 0,  # index into the training views used for selection
        "plan.ratios": TrainConfig.ratios,
        "render.domain": "hdr",
        "render.views": "all",
        "eval.views": "test",
        "eval.baseline": True,
    }
    cfg.update(_spec_defaults())
    cfg.update(_train_defaults())
    return cfg


def _convert(key: str, raw: str, default):
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low in ("true", "yes", "1", "on"):
                return True
            if low in ("false", "no", "0", "off"):
                return False
            raise ValueError(f"not a boolean: {raw!r}")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            return tuple(float(x) for x in raw.split(",") if x.strip())
    except ValueError as exc:
        raise ConfigError(f"{key}: {exc}") from exc
    return raw


def parse_config(text: str, base: dict | None = None, source: str = "<config>") -> dict:
    """``key = value`` lines with ``#`` comments; keys must already exist in ``base``."""
    cfg = dict(base if base is not None else default_config())
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        set_key(cfg, key, value, f"{source}:{lineno}")
    return cfg


def set_key(cfg: dict, key: str, value: str, where: str = "override") -> None:
    if key not in cfg:
        raise ConfigError(f"{where}: unknown config key {key!r}")
    cfg[key] = _convert(key, value, cfg[key])


def _format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ", ".join(repr(float(x)) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def format_config(cfg: dict) -> str:
    lines = [f"{k} = {_format_value(cfg[k])}" for k in sorted(cfg)]
    return "\n".join(lines) + "\n"


def load_config(path=None, overrides=()) -> dict:
    cfg = default_config()
    if path is not None:
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        cfg = parse_config(text, cfg, os.fspath(path))
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override must be key=value, got {item!r}")
        key, value = item.split("=", 1)
        set_key(cfg, key.strip(), value)
    return cfg


def synthetic_spec(cfg: dict) -> evalgen.SyntheticSpec:
    kw = {k.split(".", 1)[1]: v for k, v in cfg.items() if k.startswith("synthetic.")}
    kw["seed"] = cfg["seed"]
    return evalgen.SyntheticSpec(**kw)


def train_config(cfg: dict) -> TrainConfig:
    kw = {k.split(".", 1)[1]: v for k, v in cfg.items() if k.startswith("train.")}
    return TrainConfig(seed=cfg["seed"], ratios=cfg["plan.ratios"], **kw)


def data_dir(cfg: dict) -> Path:
    return Path(cfg["data_dir"] or os.path.join(cfg["output_dir"], "data"))


def checkpoint_path(cfg: dict) -> Path:
    return Path(cfg["checkpoint"] or os.path.join(cfg["output_dir"], CHECKPOINT_FILE))


def curve_database(cfg: dict) -> CurveDatabase:
    if cfg["crf.database"]:
        try:
            return CurveDatabase.load(cfg["crf.database"])
        except (OSError, ValueError) as exc:
            raise ConfigError(f"cannot load curve database {cfg['crf.database']}: {exc}") from exc
    return CurveDatabase.builtin()


def _ensure_dir(path) -> Path:
    path = Path(path)
    try:
        path.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ConfigError(f"cannot create output directory {path}: {exc}") from exc
    if not os.access(path, os.W_OK):
        raise ConfigError(f"output directory {path} is not writable")
    return path


def _write_resolved(cfg: dict, directory: Path, command: str) -> None:
    atomic_write_text(directory / RESOLVED_NAME, f"# command: {command}\n" + format_config(cfg))


def _view_list(spec: str, n: int, test: list, train_idx: list) -> list:
    spec = spec.strip()
    if spec == "all":
        return list(range(n))
    if spec == "test":
        return list(test)
    if spec == "train":
        return list(train_idx)
    try:
        idx = [int(x) for x in spec.split(",") if x.strip()]
    except ValueError as exc:
        raise ConfigError(f"view list must be all, test, train or comma-separated indices, got {spec!r}") from exc
    bad = [i for i in idx if not 0 <= i < n]
    if bad:
        raise ConfigError(f"view indices {bad} out of range for {n} cameras")
    return idx


def parse_domain(tag: str, n_exposures: int | None = None):
    """('ldr'|'hdr', None) or ('bracketed', j) with 1-based j; j = 1 is the capture exposure."""
    tag = tag.strip()
    if tag in ("ldr", "hdr"):
        return tag, None
    if tag.startswith("bracketed:"):
        try:
            j = int(tag.split(":", 1)[1])
        except ValueError as exc:
            raise ConfigError(f"bad bracket index in domain {tag!r}") from exc
        if j < 1 or (n_exposures is not None and j > n_exposures):
            raise ConfigError(f"bracket index {j} outside 1..{n_exposures}")
        return "bracketed", j
    raise ConfigError(f"unknown domain {tag!r}; expected one of {DOMAINS}")


def bracket_slot(plan, j: int) -> int:
    """Sorted exposure slot of 1-based bracket ``j``: 1 is the capture, then the plan ratios in order."""
    if j == 1:
        return plan.base_index
    ratio = plan.ratios[j - 2]
    return int(np.nonzero(plan.all_ratios() == ratio)[0][0])


# ---------------------------------------------------------------------------
# data set on disk


def ldr_name(i: int) -> str:
    return f"ldr_{i:03d}.ppm"


def hdr_name(i: int) -> str:
    return f"hdr_{i:03d}.pfm"


def _load_views(cfg: dict, indices, need_hdr: bool = False):
    d = data_dir(cfg)
    cams = read_cameras(d / CAMERA_FILE)
    views = []
    for i in indices:
        try:
            ldr = read_ppm(d / ldr_name(i))
        except OSError as exc:
            raise ConfigError(f"missing LDR capture for view {i}: {exc}") from exc
        hdr = None
        path = d / hdr_name(i)
        if path.exists():
            hdr = read_pfm(path)
        elif need_hdr:
            raise ConfigError(f"HDR reference {path} required but not found")
        views.append(View(cams["cameras"][i], ldr, cams["exposure"], hdr))
    return cams, views


# ---------------------------------------------------------------------------
# commands


def cmd_gen_scene(cfg: dict) -> int:
    spec = synthetic_spec(cfg)
    out = _ensure_dir(data_dir(cfg))
    syn = evalgen.generate(spec, curve_database(cfg) if cfg["crf.database"] else None)
    for i in range(spec.n_cameras):
        write_ppm(out / ldr_name(i), syn.ldr[i])
        write_pfm(out / hdr_name(i), syn.hdr[i])
    write_scene(syn.scene, out / SCENE_FILE)
    atomic_write_text(out / CAMERA_FILE, cameras_to_json(syn.cameras, spec.exposure, spec.train_indices,
                                                       spec.test_indices))
    _write_resolved(cfg, out, "gen-scene")
    print(f"wrote {spec.n_cameras} views, references, scene and cameras to {out}")
    return EXIT_OK


def _select_curve(cfg: dict, views):
    db = curve_database(cfg)
    if cfg["crf.name"] != "auto":
        try:
            return db[cfg["crf.name"]]
        except KeyError as exc:
            raise ConfigError(f"curve {cfg['crf.name']!r} not in database {db.names()}") from exc
    probe = cfg["crf.probe"]
    if not 0 <= probe < len(views):
        raise ConfigError(f"crf.probe {probe} outside the {len(views)} training views")
    return select_crf(db, views[probe].ldr)


def cmd_train(cfg: dict) -> int:
    tcfg = train_config(cfg)
    d = data_dir(cfg)
    cams = read_cameras(d / CAMERA_FILE)
    _, views = _load_views(cfg, cams["train"], need_hdr=tcfg.mode == HDR_SUPERVISED)
    scene_path = Path(cfg["scene.path"] or d / SCENE_FILE)
    try:
        geometry = read_scene(scene_path)
    except OSError as exc:
        raise ConfigError(f"cannot read initial scene {scene_path}: {exc}") from exc
    curve = _select_curve(cfg, views)
    ck_path = checkpoint_path(cfg)
    out = _ensure_dir(ck_path.parent)
    _ensure_dir(cfg["output_dir"])
    log_path = Path(cfg["output_dir"]) / LOSS_LOG
    ck = train(tcfg, views, geometry, curve, log_path=log_path)
    ck.extra = {"curve": curve.name, "train_views": list(cams["train"])}
    write_checkpoint(ck, ck_path)
    _write_resolved(cfg, out, "train")
    print(f"trained {tcfg.iterations} iterations with curve {curve.name}; checkpoint {ck_path}")
    return EXIT_OK


def _read_checkpoint(cfg: dict):
    path = checkpoint_path(cfg)
    try:
        return read_checkpoint(path)
    except OSError as exc:
        raise ConfigError(f"cannot read checkpoint {path}: {exc}") from exc


def render_views(model, cameras, domain: str, j: int | None):
    """Images of ``model`` at ``cameras`` in the given domain."""
    if domain == "ldr":
        hdr_scene = model.hdr_scene()
        return [render_ldr(hdr_scene, model.curve, model.exposure, c) for c in cameras]
    if domain == "hdr":
        hdr_scene = model.hdr_scene()
        return [renderer.render(hdr_scene, c) for c in cameras]
    slot = bracket_slot(model.plan, j)
    return [render_bracketed(model, c, slot) for c in cameras]


def cmd_render(cfg: dict) -> int:
    ck = _read_checkpoint(cfg)
    model = ck.model
    domain, j = parse_domain(cfg["render.domain"], model.plan.n)
    cams = read_cameras(data_dir(cfg) / CAMERA_FILE)
    idx = _view_list(cfg["render.views"], len(cams["cameras"]), cams["test"], cams["train"])
    tag = domain if j is None else f"bracketed_{j}"
    out = _ensure_dir(Path(cfg["output_dir"]) / f"render_{tag}")
    images = render_views(model, [cams["cameras"][i] for i in idx], domain, j)
    for i, img in zip(idx, images):
        if domain == "ldr":
            write_ppm(out / f"view_{i:03d}.ppm", img)
        else:
            write_pfm(out / f"view_{i:03d}.pfm", img)
            write_ppm(out / f"view_{i:03d}_preview.ppm", reinhard_tonemap(img))
    _write_resolved(cfg, out, "render")
    print(f"rendered {len(idx)} view(s) in domain {cfg['render.domain']} to {out}")
    return EXIT_OK


def cmd_fuse(cfg: dict) -> int:
    ck = _read_checkpoint(cfg)
    out = _ensure_dir(cfg["output_dir"])
    path = out / "fused_scene.bin"
    write_scene(ck.model.hdr_scene(), path)
    _write_resolved(cfg, out, "fuse")
    print(f"wrote fused HDR Gaussians to {path}")
    return EXIT_OK


def cmd_eval(cfg: dict) -> int:
    ck = _read_checkpoint(cfg)
    model = ck.model
    d = data_dir(cfg)
    cams = read_cameras(d / CAMERA_FILE)
    idx = _view_list(cfg["eval.views"], len(cams["cameras"]), cams["test"], cams["train"])
    if not idx:
        raise ConfigError("no views selected for evaluation")
    cameras = [cams["cameras"][i] for i in idx]
    have_refs = all((d / hdr_name(i)).exists() for i in idx)
    out = _ensure_dir(Path(cfg["output_dir"]) / "eval")
    if have_refs:
        refs = [read_pfm(d / hdr_name(i)) for i in idx]
        report = evalgen.evaluate_model(model, cameras, refs, views=idx)
        hdr_scene = model.hdr_scene()
        previews = [(f"view_{i:03d}", renderer.render(hdr_scene, c)) for i, c in zip(idx, cameras)]
        evalgen.write_report(report, out, previews)
        if cfg["eval.baseline"]:
            base = evalgen.baseline_report(model, cameras, refs, views=idx)
            evalgen.write_report(base, out / "baseline")
            print(f"baseline mean mu-law PSNR {base.mean_psnr:.3f} dB")
    else:
        _, views = _load_views(cfg, idx)
        report = evalgen.evaluate_model(model, cameras, ldr_refs=[v.ldr for v in views], views=idx)
        evalgen.write_report(report, out)
    _write_resolved(cfg, out, "eval")
    print(report.summary(), end="")
    return EXIT_OK


COMMANDS = {
    "gen-scene": cmd_gen_scene,
    "train": cmd_train,
    "render": cmd_render,
    "fuse": cmd_fuse,
    "eval": cmd_eval,
}

# flag -> config key
SHORTHANDS = {
    "output": "output_dir",
    "data": "data_dir",
    "checkpoint": "checkpoint",
    "seed": "seed",
    "mode": "train.mode",
    "iterations": "train.iterations",
    "crf": "crf.name",
    "domain": "render.domain",
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hdrsplat", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="key = value config file (defaults apply to missing keys)")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override any config key")
        p.add_argument("--output", help="output_dir")
        p.add_argument("--data", help="data_dir (defaults to <output_dir>/data)")
        p.add_argument("--seed", help="seed")
        if name != "gen-scene":
            p.add_argument("--checkpoint", help="checkpoint path")
        if name == "train":
            p.add_argument("--mode", help="self-supervised or hdr-supervised")
            p.add_argument("--iterations")
            p.add_argument("--crf", help="curve name or 'auto'")
        if name == "render":
            p.add_argument("--domain", help="ldr, hdr or bracketed:j (j = 1 is the capture exposure)")
        if name in ("render", "eval"):
            p.add_argument("--views", help="all, test, train or comma-separated indices")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        overrides = list(args.set)
        for flag, key in SHORTHANDS.items():
            value = getattr(args, flag, None)
            if value is not None:
                overrides.append(f"{key}={value}")
        views = getattr(args, "views", None)
        if views is not None:
            overrides.append(f"{'render' if args.command == 'render' else 'eval'}.views={views}")
        cfg = load_config(args.config, overrides)
        return COMMANDS[args.command](cfg)
    except TrainingDiverged as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except FloatingPointError as exc:
        print(f"error: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ConfigError, ImageFormatError, SceneFormatError, CheckpointFormatError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
