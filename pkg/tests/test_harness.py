import os

import numpy as np
import pytest

from srlab.cli import main as cli_main
from srlab.config import parse_config
from srlab.harness import (
    build_datasets,
    build_model_from_config,
    craft_attack,
    get_model,
    resolve_defense,
    run_experiment,
)
from srlab.models import save_weights
from srlab.report import load_report, report_hash
from srlab.seeding import mix_seed, splitmix64

TINY_CFG = """
[experiment]
task = classification
seed = 13
sample_count = 40

[dataset]
noise = 0.25
fg = 0.7
train_count = 120

[train]
epochs = 1

[attack fgsm]
kind = fgsm
epsilon = 8/255

[attack pgd3]
kind = pgd
epsilon = 8/255
steps = 3
random_start = true

[defense none]
mode = none

[defense sr-d1]
mode = sr
d_x = 1
d_y = 1
tap = block2
"""

TINY_STEREO = """
[experiment]
task = stereo
seed = 2

[stereo]
pairs = 2

[attack fgsm-02]
kind = fgsm
epsilon = 0.02

[defense none]
mode = none

[defense sr-d1]
mode = sr
d_x = 1
d_y = 1
"""


def test_splitmix_determinism():
    assert splitmix64(0) == splitmix64(0)
    assert mix_seed(1, 2) != mix_seed(2, 1)
    assert mix_seed(5, 7) == mix_seed(5, 7)
    vals = {mix_seed(0, k) for k in range(1000)}
    assert len(vals) == 1000  # no collisions in a small window


def test_empty_attack_list_gives_clean_only_report():
    cfg = parse_config(TINY_CFG.split("[attack")[0] + "[defense none]\nmode = none\n")
    rep = run_experiment(cfg)
    assert rep.attack_names == []
    assert rep.cells == {"none": {}}
    assert rep.ensemble == {}
    assert "none" in rep.natural


def test_reports_identical_across_runs_and_threads():
    cfg = parse_config(TINY_CFG)
    h = [report_hash(run_experiment(cfg, threads=t)) for t in (1, 1, 3)]
    assert h[0] == h[1] == h[2]


def test_stereo_report_and_determinism():
    cfg = parse_config(TINY_STEREO)
    rep = run_experiment(cfg)
    assert rep.task == "stereo"
    assert set(rep.cells["none"]) == {"fgsm-02"}
    assert "sr-d1" in rep.error_reduced
    assert report_hash(run_experiment(cfg, threads=2)) == report_hash(rep)


def test_attack_cache_round_trip(tmp_path):
    cfg = parse_config(TINY_CFG)
    cache = str(tmp_path / "cache")
    r1 = run_experiment(cfg, cache_dir=cache)
    files = os.listdir(cache)
    assert any(f.endswith(".srlc") for f in files)
    r2 = run_experiment(cfg, cache_dir=cache)
    assert report_hash(r1) == report_hash(r2)
    # corrupt one cache file: harness must recraft, not crash
    victim = os.path.join(cache, sorted(files)[0])
    with open(victim, "wb") as f:
        f.write(b"garbage")
    r3 = run_experiment(cfg, cache_dir=cache)
    assert report_hash(r3) == report_hash(r1)


def test_get_model_with_weights_path(tmp_path):
    cfg = parse_config(TINY_CFG)
    train_data, test_data = build_datasets(cfg)
    model, bundle = get_model(cfg, train_data, val_data=test_data)
    wpath = tmp_path / "w.srw"
    save_weights(bundle, wpath)
    cfg2 = parse_config(TINY_CFG.replace("[train]", f"[model]\nweights = {wpath}\n\n[train]"))
    model2, bundle2 = get_model(cfg2)
    assert bundle2 is None
    for k in model.params:
        assert np.array_equal(model.params[k].data, model2.params[k].data)


def test_resolve_defense_and_model_builder():
    cfg = parse_config(TINY_CFG)
    dc = resolve_defense(cfg.defenses[1])
    assert dc.mode == "sr" and len(dc.shift_set) == 9 and dc.tap == "block2"
    assert resolve_defense(cfg.defenses[0]).mode == "none"
    m = build_model_from_config(cfg.model)
    assert m.spec.tap("block2").cumulative_stride == 4
    with pytest.raises(ValueError, match="name@layer_index"):
        from srlab.config import ModelConfig

        build_model_from_config(ModelConfig(taps=("oops",)))


def test_adaptive_attack_crafted_per_defense():
    text = TINY_CFG.replace("[attack pgd3]\nkind = pgd\nepsilon = 8/255\nsteps = 3\nrandom_start = true",
                            "[attack adpgd]\nkind = pgd\nepsilon = 8/255\nsteps = 2\nadaptive = true")
    cfg = parse_config(text)
    rep = run_experiment(cfg)
    assert "adpgd" in rep.attack_names
    assert set(rep.cells["sr-d1"]) == {"fgsm", "adpgd"}


def test_craft_attack_chunking_invariance(desk_model, desk_data):
    import srlab.harness as H

    _, (Xte, yte) = desk_data
    X, y = Xte[:30], yte[:30]
    atk = parse_config(TINY_CFG).attacks[1][1]  # pgd3 with random start
    full = craft_attack(desk_model, X, y, atk, seed_offset=5)
    old = H.ATTACK_CHUNK
    try:
        H.ATTACK_CHUNK = 7
        parts = craft_attack(desk_model, X, y, atk, seed_offset=5)
    finally:
        H.ATTACK_CHUNK = old
    assert np.array_equal(full.x_adv, parts.x_adv)


def _write(tmp_path, name, text):
    p = tmp_path / name
    p.write_text(text)
    return str(p)


def test_cli_full_flow(tmp_path, capsys):
    cfgp = _write(tmp_path, "exp.cfg", TINY_CFG)
    out = str(tmp_path / "run")
    assert cli_main(["train", "--config", cfgp, "--out", str(tmp_path / "w.srw")]) == 0
    assert (tmp_path / "w.srw").exists()
    assert cli_main(["attack", "--config", cfgp, "--out", out]) == 0
    assert cli_main(["defend-eval", "--config", cfgp, "--out", out]) == 0
    rep = load_report(os.path.join(out, "report.json"))
    assert rep.task == "classification"
    assert os.path.exists(os.path.join(out, "report.csv"))
    assert os.path.exists(os.path.join(out, "report_accuracy.png"))
    # report subcommand from existing report.json
    out2 = str(tmp_path / "rep2")
    assert cli_main(["report", "--config", os.path.join(out, "report.json"), "--out", out2]) == 0
    assert report_hash(load_report(os.path.join(out2, "report.json"))) == report_hash(rep)


def test_cli_stereo_demo(tmp_path):
    cfgp = _write(tmp_path, "st.cfg", TINY_STEREO)
    out = str(tmp_path / "stereo")
    assert cli_main(["stereo-demo", "--config", cfgp, "--out", out]) == 0
    for f in ("stereo.json", "stereo.csv", "stereo_metrics.png", "pair0_left.pgm", "pair0_gt.disp", "pair0_pred.disp"):
        assert os.path.exists(os.path.join(out, f)), f


def test_cli_seed_override(tmp_path):
    cfgp = _write(tmp_path, "exp.cfg", TINY_STEREO)
    a = str(tmp_path / "a")
    b = str(tmp_path / "b")
    assert cli_main(["stereo-demo", "--config", cfgp, "--out", a]) == 0
    assert cli_main(["stereo-demo", "--config", cfgp, "--seed", "99", "--out", b]) == 0
    ra = load_report(os.path.join(a, "stereo.json"))
    rb = load_report(os.path.join(b, "stereo.json"))
    assert report_hash(ra) != report_hash(rb)
    assert rb.meta["seed"] == 99


def test_cli_stage_tagged_failure(tmp_path, capsys):
    rc = cli_main(["train", "--config", str(tmp_path / "missing.cfg"), "--out", str(tmp_path)])
    assert rc == 2
    err = capsys.readouterr().err
    assert err.startswith("[config]")


def test_cli_bad_config_fails_in_config_stage(tmp_path, capsys):
    cfgp = _write(tmp_path, "bad.cfg", "[experiment]\ntask = nonsense\n")
    rc = cli_main(["defend-eval", "--config", cfgp, "--out", str(tmp_path / "o")])
    assert rc == 2
    assert "[config]" in capsys.readouterr().err
