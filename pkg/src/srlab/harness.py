"""Experiment driver: train -> attack -> defend -> evaluate -> report.

Grid semantics: every [defense] section is a report row, every [attack]
section a column. Non-adaptive attacks are crafted once against the
undefended model and the resulting examples are reused for every defense
row; attacks marked adaptive are re-crafted per row with the loss composed
through that row's defended forward pass. Crafted examples can be cached
on disk (same binary container as weights) keyed by config hash, so
defenses can be re-evaluated without re-attacking.

Everything is deterministically seeded: dataset seeds, attack seeds and
per-example random starts derive from the experiment seed via the
splitmix64 mixer, so reports are hash-identical across reruns and thread
counts.
"""

from __future__ import annotations

import hashlib
import os
import time
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from . import tensor as T
from .attacks import AttackConfig, dense_pgd, fgsm, make_adaptive, pgd
from .config import ExperimentConfig, config_hash
from .datasets import gen_synthetic_shapes, load_mnist_idx
from .defense import DefenseConfig, build_shift_set, sr_forward
from .models import ModelSpec, TapPoint, build_model, load_weights, parse_layer, train
from .report import ExperimentReport, error_reduced_percent
from .seeding import mix_seed
from .serialize import FormatError, load_tensors, save_tensors
from .stereo import (
    BlockStructure,
    StereoPair,
    conv_encoder,
    gen_random_dot_stereogram,
    patch_encoder,
    stereo_match,
    stereo_metrics,
    stereo_predict,
)
from .tensor import Tensor

__all__ = [
    "build_model_from_config",
    "build_datasets",
    "resolve_defense",
    "get_model",
    "craft_attack",
    "evaluate_flags",
    "run_experiment",
    "build_stereo_encoder",
]

EVAL_BATCH = 250
ATTACK_CHUNK = 250
ADAPTIVE_CHUNK = 50

# fixed stream tags for seed derivation
_TRAIN_STREAM = 101
_TEST_STREAM = 202
_PAIR_STREAM = 1000


def build_model_from_config(mc):
    layers = tuple(parse_layer(s) for s in mc.layers)
    taps = []
    for t in mc.taps:
        if "@" not in t:
            raise ValueError(f"tap {t!r} must be name@layer_index")
        name, idx = t.split("@", 1)
        taps.append(TapPoint(name, int(idx)))
    spec = ModelSpec(
        layers=layers,
        num_classes=mc.num_classes,
        input_shape=tuple(mc.input_shape),
        taps=tuple(taps),
    )
    return build_model(spec, seed=mc.init_seed)


def build_datasets(cfg):
    """(train_X, train_y), (test_X, test_y) per the dataset section."""
    d = cfg.dataset
    if d.kind == "synthetic-shapes":
        tr = gen_synthetic_shapes(
            d.train_count, classes=d.classes, size=d.size, noise=d.noise,
            seed=mix_seed(cfg.seed, _TRAIN_STREAM), fg=d.fg, bg=d.bg,
        )
        te = gen_synthetic_shapes(
            cfg.sample_count, classes=d.classes, size=d.size, noise=d.noise,
            seed=mix_seed(cfg.seed, _TEST_STREAM), fg=d.fg, bg=d.bg,
        )
        return tr, te
    if d.kind == "mnist-idx":
        Xtr, ytr = load_mnist_idx(d.train_images, d.train_labels)
        Xte, yte = load_mnist_idx(d.test_images, d.test_labels)
        return (Xtr[: d.train_count], ytr[: d.train_count]), (Xte[: cfg.sample_count], yte[: cfg.sample_count])
    raise ValueError(f"unknown dataset kind {d.kind!r}")


def resolve_defense(ds):
    """DefenseSpec (config row) -> runtime DefenseConfig."""
    if ds.mode == "none":
        return DefenseConfig(mode="none")
    return DefenseConfig(
        mode=ds.mode,
        shift_set=build_shift_set(ds.d_x, ds.d_y) if ds.action == "translate" else None,
        tap=ds.tap or None,
        action_kind=ds.action,
        pad_policy=ds.pad,
        angles=tuple(ds.angles),
    )


def get_model(cfg, train_data=None, val_data=None):
    """Load weights if configured, otherwise train on the provided data."""
    model = build_model_from_config(cfg.model)
    if cfg.model.weights:
        model.set_bundle(load_weights(cfg.model.weights))
        return model, None
    if train_data is None:
        raise ValueError("no weights path configured and no training data supplied")
    bundle = train(model, train_data, cfg.train, val=val_data)
    return model, bundle


def _attack_loss(model, labels, defense_cfg, attack):
    if attack.kind == "cw_margin":
        def loss(x):
            from .attacks import margin_loss_each

            return margin_loss_each(sr_forward(model, x, defense_cfg), labels, attack.kappa)

        return loss
    return make_adaptive(lambda lg: T.cross_entropy_each(lg, labels), model, defense_cfg)


def craft_attack(model, X, y, attack, defense_cfg=None, seed_offset=0):
    """Craft one attack over a dataset in memory-bounded chunks; chunking
    never changes the result because crafting is per-example."""
    chunk = ADAPTIVE_CHUNK if (defense_cfg is not None and defense_cfg.mode != "none") else ATTACK_CHUNK
    xs, traces = [], []
    linf = 0.0
    step_seconds = []
    eff = AttackConfig(
        kind=attack.kind,
        epsilon=attack.epsilon,
        steps=attack.steps,
        alpha=attack.alpha,
        random_start=attack.random_start,
        adaptive=attack.adaptive,
        seed=mix_seed(seed_offset, attack.seed),
        kappa=attack.kappa,
    )
    for lo in range(0, len(X), chunk):
        xb, yb = X[lo : lo + chunk], y[lo : lo + chunk]
        loss = _attack_loss(model, yb, defense_cfg, eff)
        if eff.kind == "fgsm":
            ex = fgsm(loss, Tensor(xb), eff)
        else:
            ex = pgd(loss, Tensor(xb), eff, sample_offset=lo)
        xs.append(ex.x_adv)
        traces.append(ex.loss_trace)
        linf = max(linf, ex.achieved_linf)
        step_seconds.append(ex.step_seconds)
    from .attacks import AdversarialExample

    return AdversarialExample(
        x_adv=np.concatenate(xs),
        x_clean=X.copy(),
        achieved_linf=linf,
        loss_trace=np.concatenate(traces, axis=1),
        step_seconds=float(np.mean(step_seconds)),
    )


def _cache_path(cache_dir, chash, attack_name, defense_name):
    key = hashlib.sha256(f"{chash}|{attack_name}|{defense_name}|v1".encode()).hexdigest()[:24]
    return os.path.join(cache_dir, f"adv-{key}.srlc")


def _load_cached(path, chash, attack_name, defense_name):
    try:
        tensors, meta = load_tensors(path)
    except (OSError, FormatError):
        return None
    if meta.get("config_hash") != chash or meta.get("attack") != attack_name or meta.get("defense") != defense_name:
        return None
    return tensors["x_adv"]


def _store_cache(path, ex, chash, attack_name, defense_name):
    os.makedirs(os.path.dirname(path), exist_ok=True)
    save_tensors(
        path,
        {"x_adv": ex.x_adv, "x_clean": ex.x_clean,
         "achieved_linf": np.asarray(ex.achieved_linf), "loss_trace": ex.loss_trace},
        {"config_hash": chash, "attack": attack_name, "defense": defense_name},
    )


def evaluate_flags(model, X, y, defense_cfg=None, batch=EVAL_BATCH):
    """Per-sample correctness of the (defended) classifier."""
    flags = []
    for lo in range(0, len(X), batch):
        logits = sr_forward(model, Tensor(X[lo : lo + batch]), defense_cfg)
        flags.extend((logits.data.argmax(axis=1) == y[lo : lo + batch]).astype(int).tolist())
    return flags


def run_experiment(cfg, threads=None, cache_dir=None, log=None):
    """Execute the configured grid; returns an ExperimentReport.

    Deterministic given the config (including its seed): rerunning, or
    changing `threads`, yields a hash-identical report.
    """
    if threads is None:
        threads = cfg.threads
    say = log or (lambda msg: None)
    if cfg.task == "stereo":
        return _run_stereo(cfg, threads, say)

    chash = config_hash(cfg)
    timings = {}
    t0 = time.perf_counter()
    train_data, (Xte, yte) = build_datasets(cfg)
    timings["data"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    say(f"model: {'loading ' + cfg.model.weights if cfg.model.weights else 'training'}")
    model, bundle = get_model(cfg, train_data, val_data=(Xte, yte))
    timings["model"] = time.perf_counter() - t0

    defenses = [(ds.name, resolve_defense(ds)) for ds in cfg.defenses] or [("none", DefenseConfig(mode="none"))]
    attack_names = [name for name, _ in cfg.attacks]

    # craft: non-adaptive once per attack, adaptive once per (attack, defense)
    t0 = time.perf_counter()
    crafted = {}
    for ai, (aname, attack) in enumerate(cfg.attacks):
        targets = defenses if attack.adaptive else [("", DefenseConfig(mode="none"))]
        for dname, dcfg in targets:
            key = (aname, dname if attack.adaptive else "")
            path = _cache_path(cache_dir, chash, *key) if cache_dir else None
            x_adv = _load_cached(path, chash, *key) if path else None
            if x_adv is None:
                say(f"attack {aname}" + (f" (adaptive vs {dname})" if attack.adaptive else ""))
                ex = craft_attack(
                    model, Xte, yte, attack,
                    defense_cfg=dcfg if attack.adaptive else None,
                    seed_offset=mix_seed(cfg.seed, 7000 + ai),
                )
                if path:
                    _store_cache(path, ex, chash, *key)
                x_adv = ex.x_adv
            crafted[key] = x_adv
    timings["attacks"] = time.perf_counter() - t0

    # evaluate the grid
    t0 = time.perf_counter()
    jobs = []
    for dname, dcfg in defenses:
        jobs.append(("natural", dname, dcfg, Xte))
        for aname, attack in cfg.attacks:
            jobs.append((aname, dname, dcfg, crafted[(aname, dname if attack.adaptive else "")]))

    def run_job(job):
        aname, dname, dcfg, X = job
        return evaluate_flags(model, X, yte, dcfg)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(run_job, jobs))
    else:
        results = [run_job(j) for j in jobs]
    timings["evaluate"] = time.perf_counter() - t0

    natural, cells, flags = {}, {}, {}
    for job, f in zip(jobs, results):
        aname, dname, _, _ = job
        acc = float(np.mean(f)) if f else 0.0
        if aname == "natural":
            natural[dname] = acc
            flags[f"{dname}|natural"] = f
        else:
            cells.setdefault(dname, {})[aname] = acc
            flags[f"{dname}|{aname}"] = f

    report = ExperimentReport(
        task="classification",
        attack_names=attack_names,
        defense_names=[d for d, _ in defenses],
        natural=natural,
        cells={d: cells.get(d, {}) for d, _ in defenses},
        flags=flags,
        meta={
            "seed": cfg.seed,
            "config_hash": chash,
            "n_samples": int(len(Xte)),
            "timings": timings,
            "train_meta": (bundle.meta if bundle else {"loaded": cfg.model.weights}),
        },
    )
    if attack_names:
        report.ensemble = report.recompute_ensemble()
    return report


# -- stereo track --------------------------------------------------------------


def build_stereo_encoder(sc):
    if sc.encoder == "patch":
        return patch_encoder(window=sc.window, pool=sc.pool, pad_mode="zeros")
    if sc.encoder == "conv":
        return conv_encoder(
            seed=sc.encoder_seed, channels=tuple(sc.channels), kernel=sc.kernel,
            pool=sc.pool, pool_after=sc.pool_after, pad_mode="zeros",
        )
    raise ValueError(f"unknown stereo encoder {sc.encoder!r}")


def _gen_pairs(cfg):
    sc = cfg.stereo
    bs = BlockStructure(sc.blocks, sc.block_min, sc.block_max, sc.disparity_step)
    return [
        gen_random_dot_stereogram(
            sc.height, sc.width, sc.d_max, bs,
            seed=mix_seed(cfg.seed, _PAIR_STREAM + k),
            levels=sc.levels, contrast=sc.contrast, smoothness=sc.smoothness,
        )
        for k in range(sc.pairs)
    ]


def _stereo_field_fn(encoder, d_max, defense_cfg, temperature):
    def field_fn(t):
        left = T.narrow(t, 0, 0, 1)
        right = T.narrow(t, 0, 1, 1)
        return stereo_predict(left, right, encoder, d_max, defense_cfg, temperature)

    return field_fn


def attack_stereo_pair(pair, encoder, attack, temperature, objective="mae", defense_cfg=None, seed=0):
    """Craft a dense attack on one pair (both images perturbed jointly);
    returns the attacked StereoPair."""
    stacked = np.concatenate([pair.left, pair.right], axis=0)
    eff = AttackConfig(
        kind=attack.kind, epsilon=attack.epsilon, steps=attack.steps, alpha=attack.alpha,
        random_start=attack.random_start, adaptive=attack.adaptive,
        seed=mix_seed(seed, attack.seed), kappa=attack.kappa,
    )
    ex = dense_pgd(
        _stereo_field_fn(encoder, pair.d_max, defense_cfg, temperature),
        Tensor(stacked),
        pair.gt_disparity[None],
        eff,
        objective=objective,
        valid_mask=pair.valid_mask[None],
    )
    return StereoPair(
        left=ex.x_adv[0:1], right=ex.x_adv[1:2],
        gt_disparity=pair.gt_disparity, d_max=pair.d_max, valid_mask=pair.valid_mask,
    )


def _mean_metrics(rows):
    return {k: float(np.mean([r[k] for r in rows])) for k in ("mae", "rmse", "d1")}


def _run_stereo(cfg, threads, say):
    sc = cfg.stereo
    chash = config_hash(cfg)
    timings = {}
    t0 = time.perf_counter()
    pairs = _gen_pairs(cfg)
    encoder = build_stereo_encoder(sc)
    timings["data"] = time.perf_counter() - t0

    defenses = [(ds.name, resolve_defense(ds)) for ds in cfg.defenses] or [("none", DefenseConfig(mode="none"))]
    attack_names = [name for name, _ in cfg.attacks]

    t0 = time.perf_counter()
    attacked = {}  # (attack, defense_or_"") -> list of pairs
    for ai, (aname, attack) in enumerate(cfg.attacks):
        targets = defenses if attack.adaptive else [("", None)]
        for dname, dcfg in targets:
            say(f"stereo attack {aname}" + (f" (adaptive vs {dname})" if attack.adaptive else ""))
            attacked[(aname, dname if attack.adaptive else "")] = [
                attack_stereo_pair(
                    p, encoder, attack, sc.temperature, sc.objective,
                    defense_cfg=dcfg, seed=mix_seed(cfg.seed, 8000 + 97 * ai + k),
                )
                for k, p in enumerate(pairs)
            ]
    timings["attacks"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    jobs = []
    for dname, dcfg in defenses:
        jobs.append(("natural", dname, dcfg, pairs))
        for aname, attack in cfg.attacks:
            jobs.append((aname, dname, dcfg, attacked[(aname, dname if attack.adaptive else "")]))

    def run_job(job):
        _, _, dcfg, job_pairs = job
        per = [
            stereo_metrics(stereo_match(p, encoder, dcfg, sc.temperature), p.gt_disparity)
            for p in job_pairs
        ]
        return _mean_metrics(per)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(run_job, jobs))
    else:
        results = [run_job(j) for j in jobs]
    timings["evaluate"] = time.perf_counter() - t0

    natural, cells = {}, {}
    for job, m in zip(jobs, results):
        aname, dname, _, _ = job
        if aname == "natural":
            natural[dname] = m
        else:
            cells.setdefault(dname, {})[aname] = m

    error_reduced = {}
    baseline = next((d for d, dc in defenses if dc.mode == "none"), None)
    if baseline is not None:
        for dname, _ in defenses:
            if dname == baseline:
                continue
            error_reduced[dname] = {
                aname: error_reduced_percent(cells[baseline][aname], cells[dname][aname])
                for aname in attack_names
            }

    return ExperimentReport(
        task="stereo",
        attack_names=attack_names,
        defense_names=[d for d, _ in defenses],
        natural=natural,
        cells={d: cells.get(d, {}) for d, _ in defenses},
        error_reduced=error_reduced,
        meta={
            "seed": cfg.seed,
            "config_hash": chash,
            "n_samples": sc.pairs,
            "timings": timings,
        },
    )
