"""Flat sectioned key=value experiment configuration.

The format is deliberately primitive so any tooling can parse it: sections
are `[kind]` or `[kind label]` headers, entries are `key = value` lines,
`#` starts a comment. Repeated `[attack NAME]` and `[defense NAME]`
sections build the evaluation grid in file order. `parse_config` and
`serialize_config` round-trip losslessly; the canonical serialization is
what gets hashed into report provenance.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, replace

from .attacks import AttackConfig
from .models import TrainConfig

__all__ = [
    "ConfigError",
    "ExperimentConfig",
    "DatasetConfig",
    "ModelConfig",
    "DefenseSpec",
    "StereoConfig",
    "parse_config",
    "parse_config_file",
    "serialize_config",
    "config_hash",
    "CONFIG_FORMAT_HELP",
]


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class DatasetConfig:
    kind: str = "synthetic-shapes"
    size: int = 32
    noise: float = 0.25
    fg: float = 0.7
    bg: float = 0.0
    classes: tuple = ("square", "disk", "cross", "triangle")
    train_count: int = 1500
    train_images: str = ""
    train_labels: str = ""
    test_images: str = ""
    test_labels: str = ""


@dataclass(frozen=True)
class ModelConfig:
    input_shape: tuple = (1, 32, 32)
    layers: tuple = (
        "conv:8:3:1:1",
        "relu",
        "maxpool:2",
        "conv:16:3:1:1",
        "relu",
        "maxpool:2",
        "flatten",
        "linear:4",
    )
    taps: tuple = ("block1@3", "block2@6")
    num_classes: int = 4
    init_seed: int = 0
    weights: str = ""


@dataclass(frozen=True)
class DefenseSpec:
    name: str
    mode: str = "none"
    d_x: int = 0
    d_y: int = 0
    tap: str = ""
    pad: str = "zeros"
    action: str = "translate"
    angles: tuple = ()


@dataclass(frozen=True)
class StereoConfig:
    pairs: int = 20
    height: int = 48
    width: int = 96
    d_max: int = 16
    blocks: int = 4
    block_min: int = 10
    block_max: int = 24
    disparity_step: int = 2
    levels: int = 8
    contrast: float = 0.4
    smoothness: int = 1
    encoder: str = "conv"
    window: int = 5
    channels: tuple = (16, 16)
    kernel: int = 3
    pool: int = 2
    pool_after: int = 1
    encoder_seed: int = 1
    temperature: float = 0.05
    objective: str = "mae"


@dataclass(frozen=True)
class ExperimentConfig:
    task: str = "classification"
    seed: int = 0
    sample_count: int = 500
    threads: int = 1
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    attacks: tuple = ()  # of (name, AttackConfig)
    defenses: tuple = ()  # of DefenseSpec
    stereo: StereoConfig = field(default_factory=StereoConfig)


def _parse_bool(v):
    if v.lower() in ("true", "1", "yes", "on"):
        return True
    if v.lower() in ("false", "0", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {v!r}")


def _parse_float(v):
    if "/" in v:
        num, den = v.split("/", 1)
        return float(num) / float(den)
    return float(v)


def _parse_tuple(v, conv):
    v = v.strip()
    if not v:
        return ()
    return tuple(conv(p.strip()) for p in v.replace(",", " ").split())


def _sections(text):
    out = []
    current = None
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("["):
            if not line.endswith("]"):
                raise ConfigError(f"line {lineno}: malformed section header {raw.strip()!r}")
            header = line[1:-1].strip().split(None, 1)
            kind = header[0]
            label = header[1] if len(header) > 1 else ""
            current = (kind, label, {})
            out.append(current)
        else:
            if current is None:
                raise ConfigError(f"line {lineno}: entry before any section: {raw.strip()!r}")
            if "=" not in line:
                raise ConfigError(f"line {lineno}: expected key = value, got {raw.strip()!r}")
            k, v = line.split("=", 1)
            current[2][k.strip()] = v.strip()
    return out


def _apply(obj, entries, converters, section):
    known = dict(converters)
    updates = {}
    for k, v in entries.items():
        if k not in known:
            raise ConfigError(f"[{section}]: unknown key {k!r}; known keys: {sorted(known)}")
        try:
            updates[k] = known[k](v)
        except (ValueError, ConfigError) as e:
            raise ConfigError(f"[{section}] {k}: {e}") from None
    return replace(obj, **updates)


def parse_config(text):
    """Parse the sectioned key=value format into an ExperimentConfig."""
    cfg = ExperimentConfig()
    attacks = []
    defenses = []
    for kind, label, entries in _sections(text):
        if kind == "experiment":
            for k, v in entries.items():
                if k == "task":
                    if v not in ("classification", "stereo"):
                        raise ConfigError(f"unknown task {v!r}")
                    cfg = replace(cfg, task=v)
                elif k == "seed":
                    cfg = replace(cfg, seed=int(v))
                elif k == "sample_count":
                    cfg = replace(cfg, sample_count=int(v))
                elif k == "threads":
                    cfg = replace(cfg, threads=int(v))
                else:
                    raise ConfigError(f"[experiment]: unknown key {k!r}")
        elif kind == "dataset":
            cfg = replace(
                cfg,
                dataset=_apply(
                    cfg.dataset,
                    entries,
                    {
                        "kind": str,
                        "size": int,
                        "noise": _parse_float,
                        "fg": _parse_float,
                        "bg": _parse_float,
                        "classes": lambda v: _parse_tuple(v, str),
                        "train_count": int,
                        "train_images": str,
                        "train_labels": str,
                        "test_images": str,
                        "test_labels": str,
                    },
                    "dataset",
                ),
            )
        elif kind == "model":
            cfg = replace(
                cfg,
                model=_apply(
                    cfg.model,
                    entries,
                    {
                        "input_shape": lambda v: _parse_tuple(v, int),
                        "layers": lambda v: _parse_tuple(v, str),
                        "taps": lambda v: _parse_tuple(v, str),
                        "num_classes": int,
                        "init_seed": int,
                        "weights": str,
                    },
                    "model",
                ),
            )
        elif kind == "train":
            cfg = replace(
                cfg,
                train=_apply(
                    cfg.train,
                    entries,
                    {
                        "lr": _parse_float,
                        "epochs": int,
                        "batch": int,
                        "seed": int,
                        "momentum": _parse_float,
                    },
                    "train",
                ),
            )
        elif kind == "attack":
            if not label:
                raise ConfigError("attack sections need a name: [attack NAME]")
            ac = AttackConfig(kind="pgd", epsilon=8.0 / 255.0)
            conv = {
                "kind": str,
                "epsilon": _parse_float,
                "steps": int,
                "alpha": lambda v: None if v == "" else _parse_float(v),
                "random_start": _parse_bool,
                "adaptive": _parse_bool,
                "seed": int,
                "kappa": _parse_float,
            }
            updates = {}
            for k, v in entries.items():
                if k not in conv:
                    raise ConfigError(f"[attack {label}]: unknown key {k!r}")
                updates[k] = conv[k](v)
            try:
                ac = replace(ac, **updates)
            except ValueError as e:
                raise ConfigError(f"[attack {label}]: {e}") from None
            attacks.append((label, ac))
        elif kind == "defense":
            if not label:
                raise ConfigError("defense sections need a name: [defense NAME]")
            ds = DefenseSpec(name=label)
            ds = _apply(
                ds,
                entries,
                {
                    "mode": str,
                    "d_x": int,
                    "d_y": int,
                    "tap": str,
                    "pad": str,
                    "action": str,
                    "angles": lambda v: _parse_tuple(v, float),
                },
                f"defense {label}",
            )
            defenses.append(ds)
        elif kind == "stereo":
            cfg = replace(
                cfg,
                stereo=_apply(
                    cfg.stereo,
                    entries,
                    {
                        "pairs": int,
                        "height": int,
                        "width": int,
                        "d_max": int,
                        "blocks": int,
                        "block_min": int,
                        "block_max": int,
                        "disparity_step": int,
                        "levels": int,
                        "contrast": _parse_float,
                        "smoothness": int,
                        "encoder": str,
                        "window": int,
                        "channels": lambda v: _parse_tuple(v, int),
                        "kernel": int,
                        "pool": int,
                        "pool_after": int,
                        "encoder_seed": int,
                        "temperature": _parse_float,
                        "objective": str,
                    },
                    "stereo",
                ),
            )
        else:
            raise ConfigError(f"unknown section [{kind}]")
    return replace(cfg, attacks=tuple(attacks), defenses=tuple(defenses))


def parse_config_file(path):
    with open(path, "r", encoding="utf-8") as f:
        return parse_config(f.read())


def _fmt(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, tuple):
        return ",".join(_fmt(x) for x in v)
    return str(v)


def serialize_config(cfg):
    """Canonical text form; parse(serialize(cfg)) == cfg."""
    lines = ["[experiment]"]
    lines += [f"task = {cfg.task}", f"seed = {cfg.seed}", f"sample_count = {cfg.sample_count}", f"threads = {cfg.threads}"]
    lines.append("")
    lines.append("[dataset]")
    d = cfg.dataset
    for k in ("kind", "size", "noise", "fg", "bg", "classes", "train_count", "train_images", "train_labels", "test_images", "test_labels"):
        lines.append(f"{k} = {_fmt(getattr(d, k))}")
    lines.append("")
    lines.append("[model]")
    m = cfg.model
    lines.append(f"input_shape = {_fmt(m.input_shape)}")
    lines.append(f"layers = {' '.join(m.layers)}")
    lines.append(f"taps = {' '.join(m.taps)}")
    for k in ("num_classes", "init_seed", "weights"):
        lines.append(f"{k} = {_fmt(getattr(m, k))}")
    lines.append("")
    lines.append("[train]")
    t = cfg.train
    for k in ("lr", "epochs", "batch", "seed", "momentum"):
        lines.append(f"{k} = {_fmt(getattr(t, k))}")
    for name, a in cfg.attacks:
        lines.append("")
        lines.append(f"[attack {name}]")
        lines.append(f"kind = {a.kind}")
        lines.append(f"epsilon = {_fmt(a.epsilon)}")
        lines.append(f"steps = {a.steps}")
        lines.append(f"alpha = {'' if a.alpha is None else _fmt(a.alpha)}")
        lines.append(f"random_start = {_fmt(a.random_start)}")
        lines.append(f"adaptive = {_fmt(a.adaptive)}")
        lines.append(f"seed = {a.seed}")
        lines.append(f"kappa = {_fmt(a.kappa)}")
    for ds in cfg.defenses:
        lines.append("")
        lines.append(f"[defense {ds.name}]")
        for k in ("mode", "d_x", "d_y", "tap", "pad", "action", "angles"):
            lines.append(f"{k} = {_fmt(getattr(ds, k))}")
    lines.append("")
    lines.append("[stereo]")
    s = cfg.stereo
    for k in (
        "pairs", "height", "width", "d_max", "blocks", "block_min", "block_max",
        "disparity_step", "levels", "contrast", "smoothness", "encoder", "window",
        "channels", "kernel", "pool", "pool_after", "encoder_seed", "temperature", "objective",
    ):
        lines.append(f"{k} = {_fmt(getattr(s, k))}")
    return "\n".join(lines) + "\n"


def config_hash(cfg):
    return hashlib.sha256(serialize_config(cfg).encode("utf-8")).hexdigest()


CONFIG_FORMAT_HELP = """\
Configuration file format: sections of key = value lines; '#' starts a
comment. Sections and keys:

[experiment]   task (classification|stereo), seed, sample_count, threads
[dataset]      kind (synthetic-shapes|mnist-idx), size, noise, fg, bg,
               classes (comma list), train_count,
               train_images/train_labels/test_images/test_labels (IDX paths)
[model]        input_shape (C,H,W), layers (space-separated descriptors),
               taps (name@layer_index ...), num_classes, init_seed,
               weights (optional bundle path; skips training)
               layer descriptors: conv:OUT:K[:STRIDE[:PAD[:zeros|circular]]],
               relu, maxpool:K, avgpool:K, gap, flatten, linear:OUT,
               resblock[:K[:zeros|circular]]
[train]        lr, epochs, batch, seed, momentum
[attack NAME]  kind (fgsm|pgd|cw_margin|dense_pgd), epsilon (float or a/b),
               steps, alpha (empty = 2.5*epsilon/steps), random_start,
               adaptive, seed, kappa     -- one section per attack column
[defense NAME] mode (none|sr|latent_smooth|input_smooth|output_ensemble),
               d_x, d_y, tap, pad (zeros|circular), action (translate|rotate),
               angles (degrees, rotate only)  -- one section per defense row
[stereo]       pairs, height, width, d_max, blocks, block_min, block_max,
               disparity_step, levels, contrast, smoothness,
               encoder (conv|patch), window, channels, kernel, pool,
               pool_after, encoder_seed, temperature, objective (mae|epe)
"""
