"""Experiment orchestration: config schema with defaults, the full
generate -> poison -> train -> evaluate -> defend pipeline, and ablation
sweeps.

Configs are YAML/JSON mappings; every run resolves all defaults into the
report so each number is traceable to the settings that produced it. Reports
land in ``<output_dir>/<fingerprint>/report.json`` where the fingerprint
hashes the resolved config.
"""

from __future__ import annotations

import copy
import hashlib
import json
import time
from datetime import datetime, timezone
from pathlib import Path

import numpy as np
import yaml

from .data import Dataset, generate_synthetic_dataset, load_coco_keypoints
from .defenses import (
    DEFENSES,
    filter_defense,
    fine_prune_defense,
    purify_defense,
)
from .errors import CapabilityError, ConfigurationError, GhostPoseError
from .landscape import average_label, generate_landscape_images, landscape_labels
from .metrics import METRIC_KINDS, asr, racu, utility
from .models import (
    MODEL_KINDS,
    PoseModel,
    TrainConfig,
    default_heatmap_side,
    train_model,
)
from .poisoning import (
    GRID_LOCATIONS,
    LabelDesign,
    PoisonConfig,
    TriggerSpec,
    attack_target_label,
    inject_trigger,
    poison_dataset,
    split_for_poisoning,
)

ATTACK_DESIGNS = ("none", "B", "S", "E", "L")
SWEEP_AXES = ("trigger_size", "trigger_color", "trigger_location", "poison_count", "intc_l_mode")

DEFAULT_CONFIG: dict = {
    "dataset": {
        "source": "synthetic",      # or "coco"
        "train_count": 2000,
        "test_count": 500,
        "image_size": 64,
        "n_keypoints": 5,
        "seed": 1,
        "annotation_file": None,    # coco source only
        "image_dir": None,
    },
    "model": {
        "kind": "regression",
        "epochs": 16,
        "batch_size": 32,
        "learning_rate": 2e-3,
        "seed": 0,
        "heatmap_sigma": 2.0,
    },
    "attack": {
        "design": "none",
        "poison_count": None,       # defaults to 100 when attacking
        "poison_rate": None,
        "seed": 7,
        "trigger": {"size": None, "color": [255, 0, 0], "location": "middle_middle"},
        "point": None,              # design S: explicit (row, col)
        "source_id": None,          # design B: id of the donor train sample
        "diverse": False,           # design L
        "landscape_count": 50,
        "landscape_seed": 11,
    },
    "metric": "pckh",
    "defenses": [],                 # [{"name": ..., "params": {...}}, ...]
    "clean_checkpoint": None,       # reuse a clean model instead of training
    "output_dir": "reports",
}


# ---------------------------------------------------------------------------
# config handling
# ---------------------------------------------------------------------------

def _merge_defaults(defaults: dict, given: dict, path: str = "") -> dict:
    out = {}
    for key, default in defaults.items():
        if key in given:
            value = given[key]
            if isinstance(default, dict) and isinstance(value, dict) and key != "params":
                out[key] = _merge_defaults(default, value, f"{path}{key}.")
            else:
                out[key] = value
        else:
            out[key] = copy.deepcopy(default)
    stray = set(given) - set(defaults)
    if stray:
        raise ConfigurationError(f"{path}{sorted(stray)[0]}: unknown config field")
    return out


def resolve_config(config: dict) -> dict:
    """Fill defaults, normalize, and validate. Raises ConfigurationError (or
    CapabilityError) with a field-level path on the first problem found."""
    if not isinstance(config, dict):
        raise ConfigurationError("config: expected a mapping")
    cfg = _merge_defaults(DEFAULT_CONFIG, config)

    ds = cfg["dataset"]
    if ds["source"] not in ("synthetic", "coco"):
        raise ConfigurationError(f"dataset.source: unknown source {ds['source']!r}")
    if ds["source"] == "coco" and not ds["annotation_file"]:
        raise ConfigurationError("dataset.annotation_file: required for dataset.source=coco")
    if isinstance(ds["image_size"], int):
        ds["image_size"] = [ds["image_size"], ds["image_size"]]
    if ds["source"] == "synthetic":
        for field in ("train_count", "test_count"):
            if not (isinstance(ds[field], int) and ds[field] >= 1):
                raise ConfigurationError(f"dataset.{field}: must be a positive integer")

    mdl = cfg["model"]
    if mdl["kind"] not in MODEL_KINDS:
        raise ConfigurationError(f"model.kind: unknown kind {mdl['kind']!r}, expected one of {MODEL_KINDS}")
    if not (isinstance(mdl["epochs"], int) and mdl["epochs"] >= 0):
        raise ConfigurationError("model.epochs: must be a nonnegative integer")

    atk = cfg["attack"]
    design = str(atk["design"])
    design = design if design == "none" else design.upper()
    if design not in ATTACK_DESIGNS:
        raise ConfigurationError(
            f"attack.design: unknown design {atk['design']!r}, expected one of {ATTACK_DESIGNS}"
        )
    atk["design"] = design
    if design == "E" and mdl["kind"] != "heatmap":
        raise CapabilityError(
            "attack.design: design E trains on empty heatmaps and requires model.kind=heatmap"
        )
    if atk["poison_count"] is not None and atk["poison_rate"] is not None:
        raise ConfigurationError("attack.poison_count: give poison_count or poison_rate, not both")
    trig = atk["trigger"]
    loc = trig["location"]
    if isinstance(loc, str):
        if loc.lower() not in GRID_LOCATIONS:
            raise ConfigurationError(
                f"attack.trigger.location: unknown location {loc!r}"
            )
    elif not (isinstance(loc, (list, tuple)) and len(loc) == 2):
        raise ConfigurationError("attack.trigger.location: expected a grid name or [row, col]")
    if atk["diverse"] and design != "L":
        raise ConfigurationError("attack.diverse: only meaningful for attack.design=L")

    if cfg["metric"] not in METRIC_KINDS:
        raise ConfigurationError(f"metric: unknown metric {cfg['metric']!r}, expected one of {METRIC_KINDS}")

    if not isinstance(cfg["defenses"], list):
        raise ConfigurationError("defenses: expected a list of {name, params} entries")
    for i, entry in enumerate(cfg["defenses"]):
        if not isinstance(entry, dict) or "name" not in entry:
            raise ConfigurationError(f"defenses[{i}]: expected a mapping with a 'name'")
        if entry["name"] not in DEFENSES:
            raise ConfigurationError(
                f"defenses[{i}].name: unknown defense {entry['name']!r}, expected one of {sorted(DEFENSES)}"
            )
        entry.setdefault("params", {})
        if not isinstance(entry["params"], dict):
            raise ConfigurationError(f"defenses[{i}].params: expected a mapping")
    return cfg


def load_config(config_file: str | Path) -> dict:
    text = Path(config_file).read_text()
    doc = yaml.safe_load(text)
    if doc is None:
        doc = {}
    return resolve_config(doc)


def config_fingerprint(resolved: dict) -> str:
    canon = json.dumps(resolved, sort_keys=True, default=str)
    return hashlib.sha256(canon.encode()).hexdigest()[:12]


def _stable_run_seed(master_seed: int, axis: str, value) -> int:
    digest = hashlib.sha256(f"{master_seed}|{axis}|{value!r}".encode()).digest()
    return int.from_bytes(digest[:4], "big")


# ---------------------------------------------------------------------------
# pipeline pieces
# ---------------------------------------------------------------------------

def _build_datasets(cfg: dict) -> tuple[Dataset, Dataset]:
    ds = cfg["dataset"]
    size = tuple(ds["image_size"])
    if ds["source"] == "coco":
        full = load_coco_keypoints(ds["annotation_file"], ds["image_dir"])
        n_test = max(1, len(full) // 5)
        train = Dataset(full.samples[:-n_test], full.n_keypoints, full.image_size, "train", dict(full.meta))
        test = Dataset(full.samples[-n_test:], full.n_keypoints, full.image_size, "test", dict(full.meta))
        return train, test
    train = generate_synthetic_dataset(
        ds["train_count"], size, ds["n_keypoints"], seed=ds["seed"], split_tag="train", id_start=0
    )
    test = generate_synthetic_dataset(
        ds["test_count"], size, ds["n_keypoints"], seed=ds["seed"] + 1,
        split_tag="test", id_start=ds["train_count"],
    )
    return train, test


def _train_config(cfg: dict) -> TrainConfig:
    mdl = cfg["model"]
    return TrainConfig(
        epochs=mdl["epochs"],
        batch_size=mdl["batch_size"],
        learning_rate=float(mdl["learning_rate"]),
        seed=mdl["seed"],
    )


def _build_attack(cfg: dict, train: Dataset, clean_model: PoseModel):
    """Resolve the attack section into (PoisonConfig, target keypoints,
    landscape info). Returns (None, None, None) when design is none."""
    atk = cfg["attack"]
    if atk["design"] == "none":
        return None, None, None
    trigger = TriggerSpec(
        size=atk["trigger"]["size"],
        color=tuple(atk["trigger"]["color"]),
        location=(
            atk["trigger"]["location"]
            if isinstance(atk["trigger"]["location"], str)
            else tuple(atk["trigger"]["location"])
        ),
    )
    landscape_info = None
    if atk["design"] == "B":
        probe = PoisonConfig(
            trigger=trigger, poison_count=atk["poison_count"],
            poison_rate=atk["poison_rate"], seed=atk["seed"],
        )
        _, poison_ids = split_for_poisoning(train, probe)
        poisoned = set(poison_ids)
        if atk["source_id"] is not None:
            source = train.by_id(atk["source_id"])
            if source.id in poisoned:
                raise ConfigurationError(
                    f"attack.source_id: sample {source.id} falls inside the poisoned subset"
                )
        else:
            source = next(s for s in train.samples if s.id not in poisoned)
        label = LabelDesign(kind="B", source_sample=source)
    elif atk["design"] == "S":
        point = tuple(atk["point"]) if atk["point"] is not None else None
        label = LabelDesign(kind="S", point=point)
    elif atk["design"] == "E":
        label = LabelDesign(kind="E")
    else:
        scapes = generate_landscape_images(
            atk["landscape_count"], tuple(cfg["dataset"]["image_size"]), seed=atk["landscape_seed"]
        )
        labels = landscape_labels(clean_model, scapes)
        label = LabelDesign(kind="L", landscape_labels=tuple(labels), diverse=atk["diverse"])
        landscape_info = {
            "count": len(labels),
            "seed": atk["landscape_seed"],
            "average_label": average_label(labels).tolist(),
        }
    pois_cfg = PoisonConfig(
        trigger=trigger,
        label=label,
        poison_count=atk["poison_count"],
        poison_rate=atk["poison_rate"],
        seed=atk["seed"],
    )
    target = attack_target_label(
        label, trigger, tuple(cfg["dataset"]["image_size"]), train.n_keypoints
    )
    return pois_cfg, target, landscape_info


def _triggered_copy(dataset: Dataset, trigger: TriggerSpec) -> Dataset:
    out = copy.deepcopy(dataset)
    for s in out.samples:
        s.image = inject_trigger(s.image, trigger)
    return out


def _apply_defense(
    name: str,
    params: dict,
    model: PoseModel,
    train: Dataset,
    test: Dataset,
    cfg: dict,
    pois_cfg: PoisonConfig | None,
    target,
    manifest: dict | None,
) -> dict:
    """Run one defense against the backdoored baseline and report metric
    movement. Each defense is evaluated independently."""
    metric = cfg["metric"]
    trigger = pois_cfg.trigger if pois_cfg is not None else None
    block: dict = {"name": name, "params": params}

    def _asr(mdl, test_ds):
        if trigger is None:
            return None
        return asr(mdl, test_ds, trigger, target, metric=metric).value

    before_u = utility(model, test, metric=metric).value
    before_a = _asr(model, test)
    block["utility_before"] = before_u
    block["asr_before"] = before_a

    if name == "filter":
        _, filtered, rep = filter_defense(model, train, **params)
        if manifest is not None:
            flagged = set(rep["flagged_ids"])
            poisoned = set(manifest["poisoned_ids"])
            rep["flagged_poisoned"] = len(flagged & poisoned)
            rep["flagged_clean"] = len(flagged - poisoned)
            rep["false_positive_rate"] = (
                len(flagged - poisoned) / max(1, len(train) - len(poisoned))
            )
        retrained = train_model(
            filtered, cfg["model"]["kind"], _train_config(cfg),
            heatmap_sigma=cfg["model"]["heatmap_sigma"],
        )
        block["utility_after"] = utility(retrained, test, metric=metric).value
        block["asr_after"] = _asr(retrained, test)
    elif name == "fine_prune":
        clean_images = [s.image for s in test.samples[:200]]
        pruned, _, rep = fine_prune_defense(model, train, clean_images=clean_images, **params)
        block["utility_after"] = utility(pruned, test, metric=metric).value
        block["asr_after"] = _asr(pruned, test)
    elif name == "purify":
        if params.get("method") == "learned" and "clean_images" not in params:
            params = dict(params)
            params["clean_images"] = [s.image for s in train.samples[:200]]
        _, pure_test, rep = purify_defense(model, test, **params)
        block["utility_after"] = utility(model, pure_test, metric=metric).value
        if trigger is None:
            block["asr_after"] = None
        else:
            triggered = _triggered_copy(test, trigger)
            _, pure_trig, _ = purify_defense(model, triggered, **params)
            preds = model.predict(pure_trig)
            from .metrics import oks, pckh  # local import avoids a cycle at module load

            scorer = pckh if metric == "pckh" else oks
            block["asr_after"] = float(np.mean([
                scorer(p, s, target=target) for p, s in zip(preds, pure_trig.samples)
            ]))
        params = {k: v for k, v in params.items() if k != "clean_images"}
        block["params"] = params
    else:
        raise ConfigurationError(f"defenses: defense {name!r} cannot run in a pipeline")

    block["report"] = rep
    return block


def _strip_block(
    params: dict,
    model: PoseModel,
    train: Dataset,
    test: Dataset,
    cfg: dict,
    pois_cfg: PoisonConfig | None,
) -> dict:
    """STRIP is a detector: report flag rates on clean and triggered queries
    instead of before/after metrics."""
    from .defenses import strip_defense

    params = dict(params)
    n_queries = int(params.pop("n_queries", 100))
    overlay_pool = [s.image for s in train.samples[:64]]
    queries = Dataset(
        samples=test.samples[:n_queries],
        n_keypoints=test.n_keypoints,
        image_size=test.image_size,
        split_tag="test",
    )
    _, kept_clean, rep_clean = strip_defense(model, queries, overlays=overlay_pool, **params)
    block = {
        "name": "strip",
        "params": params,
        "threshold": rep_clean["threshold"],
        "flag_rate_clean": rep_clean["n_flagged"] / len(queries),
        "report": {k: v for k, v in rep_clean.items() if k != "variances"},
    }
    if pois_cfg is not None:
        triggered = _triggered_copy(queries, pois_cfg.trigger)
        _, _, rep_trig = strip_defense(
            model, triggered, overlays=overlay_pool,
            threshold=rep_clean["threshold"], **{k: v for k, v in params.items() if k != "threshold"},
        )
        block["flag_rate_triggered"] = rep_trig["n_flagged"] / len(queries)
    return block


# ---------------------------------------------------------------------------
# run_experiment / run_sweep
# ---------------------------------------------------------------------------

def run_experiment_dict(config: dict, write: bool = True) -> tuple[dict, Path | None]:
    """Library form of run_experiment: takes a config mapping, returns the
    report dict (and the written path when write=True)."""
    cfg = resolve_config(config)
    t_start = time.time()
    timing: dict = {}

    t0 = time.time()
    train, test = _build_datasets(cfg)
    timing["data_seconds"] = round(time.time() - t0, 3)

    tcfg = _train_config(cfg)
    kind = cfg["model"]["kind"]
    sigma = cfg["model"]["heatmap_sigma"]

    t0 = time.time()
    if cfg["clean_checkpoint"]:
        clean_model = PoseModel.load(cfg["clean_checkpoint"])
        if clean_model.kind != kind or clean_model.n_keypoints != train.n_keypoints \
                or tuple(clean_model.image_size) != tuple(train.image_size):
            raise ConfigurationError(
                "clean_checkpoint: checkpoint does not match the configured model/dataset"
            )
    else:
        clean_model = train_model(train, kind, tcfg, heatmap_sigma=sigma)
    timing["clean_train_seconds"] = round(time.time() - t0, 3)

    metric = cfg["metric"]
    clean_utility = utility(clean_model, test, train_ids=train.ids(), metric=metric).value

    report: dict = {
        "config": cfg,
        "fingerprint": config_fingerprint(cfg),
        "metric": metric,
        "clean_utility": clean_utility,
        "dataset": {
            "train_count": len(train),
            "test_count": len(test),
            "n_keypoints": train.n_keypoints,
            "image_size": list(train.image_size),
        },
    }

    pois_cfg, target, landscape_info = _build_attack(cfg, train, clean_model)
    if pois_cfg is None:
        report["utility"] = clean_utility
        report["attack"] = None
        model, train_for_defense, manifest = clean_model, train, None
        report["model"] = {"kind": kind, "loss_curve": clean_model.loss_curve}
    else:
        t0 = time.time()
        poisoned, manifest = poison_dataset(
            train, pois_cfg, model_kind=kind,
            m=default_heatmap_side(train.image_size),
        )
        timing["poison_seconds"] = round(time.time() - t0, 3)
        t0 = time.time()
        model = train_model(poisoned, kind, tcfg, heatmap_sigma=sigma)
        timing["attack_train_seconds"] = round(time.time() - t0, 3)

        report["utility"] = utility(model, test, train_ids=train.ids(), metric=metric).value
        asr_report = asr(model, test, pois_cfg.trigger, target, metric=metric)
        report["asr"] = asr_report.value
        report["racu"] = racu(asr_report.value, clean_utility)
        report["attack"] = manifest
        report["attack"]["design"] = cfg["attack"]["design"]
        report["attack"]["target_label"] = np.asarray(target).tolist()
        if cfg["attack"]["design"] == "B":
            point_ref = attack_target_label(
                LabelDesign(kind="S"), pois_cfg.trigger,
                tuple(train.image_size), train.n_keypoints,
            )
            report["asr_vs_point_target"] = asr(
                model, test, pois_cfg.trigger, point_ref, metric=metric
            ).value
        if landscape_info is not None:
            report["landscape"] = landscape_info
        report["model"] = {"kind": kind, "loss_curve": model.loss_curve}
        train_for_defense = poisoned

    t0 = time.time()
    blocks = []
    for entry in cfg["defenses"]:
        name, params = entry["name"], dict(entry["params"])
        if name == "strip":
            blocks.append(_strip_block(params, model, train_for_defense, test, cfg, pois_cfg))
        else:
            blocks.append(
                _apply_defense(
                    name, params, model, train_for_defense, test, cfg, pois_cfg, target, manifest
                )
            )
    if blocks:
        timing["defense_seconds"] = round(time.time() - t0, 3)
    report["defenses"] = blocks

    timing["wall_seconds"] = round(time.time() - t_start, 3)
    timing["timestamp"] = datetime.now(timezone.utc).isoformat()
    report["timing"] = timing

    path = None
    if write:
        out_dir = Path(cfg["output_dir"]) / report["fingerprint"]
        out_dir.mkdir(parents=True, exist_ok=True)
        path = out_dir / "report.json"
        path.write_text(json.dumps(report, indent=1, sort_keys=True, default=str))
        model.save(out_dir / "model.pt")
        if pois_cfg is not None:
            clean_model.save(out_dir / "clean_model.pt")
    return report, path


def run_experiment(config_file: str | Path) -> Path:
    """Execute the pipeline described by a config file; returns the report
    path."""
    cfg = load_config(config_file)
    _, path = run_experiment_dict(cfg, write=True)
    return path


def _apply_axis(cfg: dict, axis: str, value) -> dict:
    out = copy.deepcopy(cfg)
    atk = out["attack"]
    if axis != "poison_count" and atk["design"] == "none":
        raise ConfigurationError(f"sweep axis {axis}: requires an attack design, got none")
    if axis == "trigger_size":
        atk["trigger"]["size"] = int(value)
    elif axis == "trigger_color":
        color = list(value)
        if len(color) != 3:
            raise ConfigurationError(f"sweep value {value!r}: trigger color needs three components")
        atk["trigger"]["color"] = color
    elif axis == "trigger_location":
        atk["trigger"]["location"] = value
    elif axis == "poison_count":
        if atk["design"] == "none":
            raise ConfigurationError("sweep axis poison_count: requires an attack design, got none")
        atk["poison_count"] = int(value)
        atk["poison_rate"] = None
    elif axis == "intc_l_mode":
        if atk["design"] != "L":
            raise ConfigurationError("sweep axis intc_l_mode: requires attack.design=L")
        if value not in ("plain", "diverse"):
            raise ConfigurationError(f"sweep value {value!r}: expected 'plain' or 'diverse'")
        atk["diverse"] = value == "diverse"
    else:
        raise ConfigurationError(f"sweep axis {axis!r}: expected one of {SWEEP_AXES}")
    return out


def run_sweep_dict(config: dict, axis: str, values: list, write: bool = True) -> tuple[dict, Path | None]:
    """Run the base config once per axis value under the shared seed policy;
    collect a table of Utility/ASR rows. A failing run stops the sweep and
    marks the result partial."""
    cfg = resolve_config(config)
    if axis not in SWEEP_AXES:
        raise ConfigurationError(f"sweep axis {axis!r}: expected one of {SWEEP_AXES}")
    if not values:
        raise ConfigurationError("sweep values: need at least one value")
    master_seed = cfg["attack"]["seed"]

    rows = []
    failure = None
    for value in values:
        run_seed = _stable_run_seed(master_seed, axis, value)
        try:
            run_cfg = _apply_axis(cfg, axis, value)
            run_cfg["attack"]["seed"] = run_seed
            rep, rep_path = run_experiment_dict(run_cfg, write=write)
        except GhostPoseError as e:
            failure = {"value": value, "error": f"{type(e).__name__}: {e}"}
            break
        rows.append({
            "value": value,
            "run_seed": run_seed,
            "utility": rep["utility"],
            "asr": rep.get("asr"),
            "racu": rep.get("racu"),
            "report_path": str(rep_path) if rep_path else None,
        })

    sweep_report = {
        "axis": axis,
        "values": list(values),
        "master_seed": master_seed,
        "status": "partial" if failure else "complete",
        "failure": failure,
        "rows": rows,
    }
    path = None
    if write:
        out_dir = Path(cfg["output_dir"])
        out_dir.mkdir(parents=True, exist_ok=True)
        path = out_dir / f"sweep_{axis}_{config_fingerprint(cfg)}.json"
        path.write_text(json.dumps(sweep_report, indent=1, sort_keys=True, default=str))
    return sweep_report, path


def run_sweep(config_file: str | Path, axis: str, values: list) -> Path:
    cfg = load_config(config_file)
    report, path = run_sweep_dict(cfg, axis, values, write=True)
    if report["status"] == "partial":
        raise GhostPoseError(
            f"sweep aborted at value {report['failure']['value']!r}: "
            f"{report['failure']['error']} (partial results at {path})"
        )
    return path
