"""Command-line driver.

Subcommands mirror the pipeline stages: `train` produces a weight bundle,
`attack` pre-computes adversarial caches, `defend-eval` runs the full
attack x defense grid, `stereo-demo` runs the dense-prediction track, and
`report` emits CSV/JSON plus rendered figures. Every subcommand takes
--config, --seed (overrides the config seed) and --out. Failures exit
nonzero with a message naming the failing stage.
"""

from __future__ import annotations

import argparse
import os
import sys
from dataclasses import replace

from .config import CONFIG_FORMAT_HELP, parse_config_file
from .figures import render_report_figures
from .harness import build_datasets, craft_attack, get_model, run_experiment
from .models import save_weights
from .report import emit_report, load_report, report_hash
from .serialize import write_disparity_text, write_pgm


class StageFailure(RuntimeError):
    def __init__(self, stage, cause):
        super().__init__(f"[{stage}] {cause}")
        self.stage = stage


def _load_config(args, stage):
    try:
        cfg = parse_config_file(args.config)
    except (OSError, ValueError) as e:
        raise StageFailure(stage, e) from e
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    return cfg


def _outdir(path):
    os.makedirs(path, exist_ok=True)
    return path


def cmd_train(args):
    cfg = _load_config(args, "config")
    try:
        train_data, test_data = build_datasets(cfg)
    except Exception as e:
        raise StageFailure("dataset", e) from e
    try:
        cfg = replace(cfg, model=replace(cfg.model, weights=""))  # force training
        model, bundle = get_model(cfg, train_data, val_data=test_data)
    except Exception as e:
        raise StageFailure("train", e) from e
    out = args.out if args.out.endswith(".srw") else os.path.join(_outdir(args.out), "weights.srw")
    save_weights(bundle, out)
    print(f"trained: train_acc={bundle.meta['final_train_accuracy']:.4f} "
          f"val_acc={bundle.meta.get('final_val_accuracy', float('nan')):.4f}")
    print(f"weights written to {out}")
    return 0


def cmd_attack(args):
    cfg = _load_config(args, "config")
    try:
        train_data, (Xte, yte) = build_datasets(cfg)
        model, _ = get_model(cfg, train_data, val_data=(Xte, yte))
    except Exception as e:
        raise StageFailure("model", e) from e
    outdir = _outdir(args.out)
    cache_dir = os.path.join(outdir, "cache")
    from .config import config_hash
    from .harness import _cache_path, _store_cache  # stable cache layout shared with defend-eval
    from .seeding import mix_seed

    chash = config_hash(cfg)
    for ai, (aname, attack) in enumerate(cfg.attacks):
        if attack.adaptive:
            print(f"skipping adaptive attack {aname}: crafted per defense row during defend-eval")
            continue
        try:
            ex = craft_attack(model, Xte, yte, attack, seed_offset=mix_seed(cfg.seed, 7000 + ai))
        except Exception as e:
            raise StageFailure(f"attack:{aname}", e) from e
        path = _cache_path(cache_dir, chash, aname, "")
        _store_cache(path, ex, chash, aname, "")
        print(f"{aname}: achieved_linf={ex.achieved_linf:.6f} cached at {path}")
    return 0


def _emit_all(report, outdir, stem="report"):
    jpath = os.path.join(outdir, f"{stem}.json")
    cpath = os.path.join(outdir, f"{stem}.csv")
    emit_report(report, "json", jpath)
    emit_report(report, "csv", cpath)
    figures = render_report_figures(report, outdir, stem=stem)
    print(f"report hash {report_hash(report)}")
    for p in (jpath, cpath, *figures):
        print(f"wrote {p}")


def cmd_defend_eval(args):
    cfg = _load_config(args, "config")
    outdir = _outdir(args.out)
    try:
        report = run_experiment(cfg, cache_dir=os.path.join(outdir, "cache"), log=lambda m: print(f"  {m}"))
    except Exception as e:
        raise StageFailure("evaluate", e) from e
    _emit_all(report, outdir)
    return 0


def cmd_stereo_demo(args):
    cfg = _load_config(args, "config")
    if cfg.task != "stereo":
        cfg = replace(cfg, task="stereo")
    outdir = _outdir(args.out)
    try:
        report = run_experiment(cfg, log=lambda m: print(f"  {m}"))
    except Exception as e:
        raise StageFailure("stereo", e) from e
    _emit_all(report, outdir, stem="stereo")
    try:
        from .harness import _gen_pairs, build_stereo_encoder
        from .stereo import stereo_match

        pair = _gen_pairs(cfg)[0]
        encoder = build_stereo_encoder(cfg.stereo)
        pred = stereo_match(pair, encoder, None, cfg.stereo.temperature)
        write_pgm(os.path.join(outdir, "pair0_left.pgm"), pair.left[0, 0])
        write_pgm(os.path.join(outdir, "pair0_right.pgm"), pair.right[0, 0])
        write_disparity_text(os.path.join(outdir, "pair0_gt.disp"), pair.gt_disparity, pair.valid_mask)
        write_disparity_text(os.path.join(outdir, "pair0_pred.disp"), pred.values, pred.valid_mask)
        print(f"wrote pair0 PGM images and disparity sidecars to {outdir}")
    except Exception as e:
        raise StageFailure("dump", e) from e
    return 0


def cmd_report(args):
    outdir = _outdir(args.out)
    if args.config.endswith(".json"):
        try:
            report = load_report(args.config)
        except Exception as e:
            raise StageFailure("load-report", e) from e
    else:
        cfg = _load_config(args, "config")
        try:
            report = run_experiment(cfg, cache_dir=os.path.join(outdir, "cache"), log=lambda m: print(f"  {m}"))
        except Exception as e:
            raise StageFailure("evaluate", e) from e
    _emit_all(report, outdir)
    return 0


def build_parser():
    p = argparse.ArgumentParser(
        prog="srlab",
        description="Test-time defense laboratory: latent ensembling over shifted inputs, "
        "white-box attacks, and a differentiable stereo track.",
        epilog=CONFIG_FORMAT_HELP,
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    sub = p.add_subparsers(dest="command", required=True)
    for name, fn, doc in (
        ("train", cmd_train, "train the configured model and save a weight bundle"),
        ("attack", cmd_attack, "pre-compute adversarial example caches for the configured attacks"),
        ("defend-eval", cmd_defend_eval, "run the full attack x defense grid and write the report"),
        ("stereo-demo", cmd_stereo_demo, "run the stereo track and write report plus PGM/sidecar dumps"),
        ("report", cmd_report, "emit CSV/JSON and figures from a config run or an existing report.json"),
    ):
        sp = sub.add_parser(name, help=doc, epilog=CONFIG_FORMAT_HELP,
                            formatter_class=argparse.RawDescriptionHelpFormatter)
        sp.add_argument("--config", required=True, help="experiment config path (report also accepts a report.json)")
        sp.add_argument("--seed", type=int, default=None, help="override the config seed")
        sp.add_argument("--out", required=True, help="output file or directory")
        sp.set_defaults(fn=fn)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except StageFailure as e:
        print(str(e), file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
