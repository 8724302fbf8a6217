import copy
import json

import pytest

from ghostpose.errors import CapabilityError, ConfigurationError, GhostPoseError
from ghostpose.experiment import (
    DEFAULT_CONFIG,
    config_fingerprint,
    resolve_config,
    run_experiment_dict,
    run_sweep_dict,
    _apply_axis,
    _stable_run_seed,
)

# A pipeline small enough for unit testing; attacks do not need to land.
TINY = {
    "dataset": {"train_count": 80, "test_count": 20, "image_size": 64, "seed": 1},
    "model": {"kind": "regression", "epochs": 1},
    "attack": {"design": "S", "poison_count": 10, "seed": 7},
}


def tiny(**overrides):
    cfg = copy.deepcopy(TINY)
    for key, value in overrides.items():
        if isinstance(value, dict) and isinstance(cfg.get(key), dict):
            cfg[key].update(value)
        else:
            cfg[key] = value
    return cfg


# --- config resolution ----------------------------------------------------

def test_defaults_filled_and_traceable():
    cfg = resolve_config({})
    assert cfg["attack"]["design"] == "none"
    assert cfg["model"]["epochs"] == DEFAULT_CONFIG["model"]["epochs"]
    assert cfg["dataset"]["image_size"] == [64, 64]
    assert cfg["attack"]["trigger"]["color"] == [255, 0, 0]


@pytest.mark.parametrize(
    "patch, field",
    [
        ({"metric": "mse"}, "metric"),
        ({"model": {"kind": "vit"}}, "model.kind"),
        ({"model": {"epochs": -2}}, "model.epochs"),
        ({"attack": {"design": "Z"}}, "attack.design"),
        ({"attack": {"poison_count": 5, "poison_rate": 0.1}}, "attack.poison_count"),
        ({"attack": {"trigger": {"location": "nowhere"}}}, "attack.trigger.location"),
        ({"attack": {"diverse": True}}, "attack.diverse"),
        ({"defenses": [{"name": "magic"}]}, "defenses[0].name"),
        ({"dataset": {"source": "imagenet"}}, "dataset.source"),
        ({"typo_key": 1}, "typo_key"),
    ],
)
def test_field_level_errors(patch, field):
    cfg = copy.deepcopy(TINY) if "attack" in patch else {}
    cfg.update(patch)
    with pytest.raises(ConfigurationError) as err:
        resolve_config(cfg)
    assert field in str(err.value)


def test_capability_violation_surfaces():
    with pytest.raises(CapabilityError, match="attack.design"):
        resolve_config(tiny(attack={"design": "E"}, model={"kind": "regression"}))


def test_fingerprint_tracks_config():
    a = resolve_config(tiny())
    b = resolve_config(tiny())
    assert config_fingerprint(a) == config_fingerprint(b)
    c = resolve_config(tiny(attack={"seed": 8}))
    assert config_fingerprint(a) != config_fingerprint(c)


# --- run_experiment -------------------------------------------------------

def test_clean_run_has_no_asr():
    report, _ = run_experiment_dict(tiny(attack={"design": "none", "poison_count": None, "seed": 7}),
                                    write=False)
    assert "asr" not in report and "racu" not in report
    assert report["utility"] == report["clean_utility"]
    assert report["attack"] is None
    assert report["config"]["model"]["epochs"] == 1  # resolved config embedded


def test_attack_run_report_contents():
    report, _ = run_experiment_dict(tiny(), write=False)
    for key in ("clean_utility", "utility", "asr", "racu", "attack", "metric"):
        assert key in report
    assert report["attack"]["label_kind"] == "S"
    assert len(report["attack"]["poisoned_ids"]) == 10
    assert report["attack"]["design"] == "S"
    assert report["timing"]["wall_seconds"] > 0


def test_reports_identical_except_timing():
    a, _ = run_experiment_dict(tiny(), write=False)
    b, _ = run_experiment_dict(tiny(), write=False)
    a.pop("timing"), b.pop("timing")
    assert json.dumps(a, sort_keys=True, default=str) == json.dumps(b, sort_keys=True, default=str)


def test_report_written_under_fingerprint(tmp_path):
    cfg = tiny(output_dir=str(tmp_path / "reports"))
    report, path = run_experiment_dict(cfg, write=True)
    assert path.exists()
    assert path.parent.name == report["fingerprint"]
    assert (path.parent / "model.pt").exists()
    assert (path.parent / "clean_model.pt").exists()
    on_disk = json.loads(path.read_text())
    assert on_disk["asr"] == report["asr"]


def test_clean_checkpoint_reused(tmp_path):
    base = tiny(output_dir=str(tmp_path / "r1"))
    _, path = run_experiment_dict(base, write=True)
    ckpt = path.parent / "clean_model.pt"
    again = tiny(clean_checkpoint=str(ckpt))
    report, _ = run_experiment_dict(again, write=False)
    assert report["timing"]["clean_train_seconds"] < 0.5
    mismatched = tiny(clean_checkpoint=str(ckpt), model={"kind": "heatmap"})
    with pytest.raises(ConfigurationError, match="clean_checkpoint"):
        run_experiment_dict(mismatched, write=False)


def test_defense_blocks_before_after():
    cfg = tiny(defenses=[{"name": "fine_prune", "params": {"fraction": 0.5}},
                         {"name": "strip", "params": {"n_queries": 5, "n_overlays": 4}}])
    report, _ = run_experiment_dict(cfg, write=False)
    prune, strip = report["defenses"]
    assert prune["name"] == "fine_prune"
    for key in ("utility_before", "utility_after", "asr_before", "asr_after"):
        assert prune[key] is not None
    assert strip["name"] == "strip"
    assert 0.0 <= strip["flag_rate_clean"] <= 1.0
    assert 0.0 <= strip["flag_rate_triggered"] <= 1.0


# --- sweeps ---------------------------------------------------------------

def test_sweep_rows_and_purity():
    report, _ = run_sweep_dict(tiny(), "trigger_size", [3, 5], write=False)
    assert report["status"] == "complete"
    assert [r["value"] for r in report["rows"]] == [3, 5]
    # pure function of (config, axis, values)
    again, _ = run_sweep_dict(tiny(), "trigger_size", [3, 5], write=False)
    assert [r["asr"] for r in report["rows"]] == [r["asr"] for r in again["rows"]]
    # per-run seeds derive from (master, axis, value), not run order
    assert report["rows"][0]["run_seed"] == _stable_run_seed(7, "trigger_size", 3)
    assert report["rows"][0]["run_seed"] != report["rows"][1]["run_seed"]


def test_degenerate_sweep_equals_single_run():
    sweep, _ = run_sweep_dict(tiny(), "poison_count", [10], write=False)
    row = sweep["rows"][0]
    run_cfg = _apply_axis(resolve_config(tiny()), "poison_count", 10)
    run_cfg["attack"]["seed"] = row["run_seed"]
    single, _ = run_experiment_dict(run_cfg, write=False)
    assert row["utility"] == single["utility"]
    assert row["asr"] == single["asr"]


def test_sweep_partial_marker():
    report, _ = run_sweep_dict(tiny(), "trigger_size", [4, 400], write=False)
    assert report["status"] == "partial"
    assert len(report["rows"]) == 1
    assert report["failure"]["value"] == 400
    assert "PlacementError" in report["failure"]["error"]


def test_sweep_axis_validation():
    with pytest.raises(ConfigurationError):
        run_sweep_dict(tiny(), "epochs", [1], write=False)
    with pytest.raises(ConfigurationError):
        run_sweep_dict(tiny(), "trigger_size", [], write=False)
    none_cfg = tiny(attack={"design": "none", "poison_count": None, "seed": 7})
    report, _ = run_sweep_dict(none_cfg, "trigger_size", [4], write=False)
    assert report["status"] == "partial"
    assert "requires an attack" in report["failure"]["error"]
    l_only, _ = run_sweep_dict(tiny(), "intc_l_mode", ["plain"], write=False)
    assert l_only["status"] == "partial"
    assert "attack.design=L" in l_only["failure"]["error"]
