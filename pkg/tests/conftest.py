"""Shared fixtures. The expensive one, attack_suite, trains every toy model
the acceptance criteria need exactly once per session."""

import time

import pytest

from ghostpose.data import generate_synthetic_dataset
from ghostpose.landscape import generate_landscape_images, landscape_labels
from ghostpose.models import TrainConfig, train_model
from ghostpose.poisoning import (
    LabelDesign,
    PoisonConfig,
    TriggerSpec,
    attack_target_label,
    poison_dataset,
)

# The toy pipeline: 2000 train / 500 test, 64x64, 5 keypoints, fixed seeds.
TOY_IMAGE_SIZE = (64, 64)
TOY_N_KEYPOINTS = 5
TOY_TRAIN_COUNT = 2000
TOY_TEST_COUNT = 500
TOY_TRAIN_SEED = 1
TOY_TEST_SEED = 2
TOY_POISON_COUNT = 100
TOY_POISON_SEED = 7
TOY_LANDSCAPE_SEED = 11
TOY_TRAIN_CONFIG = TrainConfig(epochs=16, batch_size=32, learning_rate=2e-3, seed=0)


@pytest.fixture(scope="session")
def toy_data():
    train = generate_synthetic_dataset(
        TOY_TRAIN_COUNT, TOY_IMAGE_SIZE, TOY_N_KEYPOINTS,
        seed=TOY_TRAIN_SEED, split_tag="train", id_start=0,
    )
    test = generate_synthetic_dataset(
        TOY_TEST_COUNT, TOY_IMAGE_SIZE, TOY_N_KEYPOINTS,
        seed=TOY_TEST_SEED, split_tag="test", id_start=10_000,
    )
    return train, test


@pytest.fixture(scope="session")
def small_data():
    """A quick 200/60 split for unit tests that need a real trained model."""
    train = generate_synthetic_dataset(200, TOY_IMAGE_SIZE, 5, seed=21, id_start=0)
    test = generate_synthetic_dataset(60, TOY_IMAGE_SIZE, 5, seed=22, id_start=5_000, split_tag="test")
    return train, test


@pytest.fixture(scope="session")
def small_model(small_data):
    train, _ = small_data
    return train_model(train, "regression", TrainConfig(epochs=2, seed=5))


@pytest.fixture(scope="session")
def attack_suite(toy_data):
    """Clean and backdoored models for both kinds on the toy pipeline.

    Keys: models (clean_reg, clean_hm, b_reg, b_hm, s_reg, s_hm, l_reg,
    l_hm, e_hm), the poisoned training sets and manifests behind them, the
    attack targets per design/kind, and the wall time spent building it all.
    """
    t_start = time.time()
    train, test = toy_data
    trigger = TriggerSpec()
    cfg = TOY_TRAIN_CONFIG

    models = {}
    poisoned = {}
    manifests = {}
    targets = {}

    models["clean_reg"] = train_model(train, "regression", cfg)
    models["clean_hm"] = train_model(train, "heatmap", cfg)

    # Attack target for the single-point design (and the "disappearance
    # style" reference every design is measured against in criterion 4d).
    targets["point"] = attack_target_label(
        LabelDesign(kind="S"), trigger, TOY_IMAGE_SIZE, TOY_N_KEYPOINTS
    )
    targets["corner"] = attack_target_label(
        LabelDesign(kind="E"), trigger, TOY_IMAGE_SIZE, TOY_N_KEYPOINTS
    )

    # Baseline design: relabel with a clean pose from outside the train set.
    source = test.samples[0]
    targets["b"] = source.keypoints.copy()
    label_b = LabelDesign(kind="B", source_sample=source)
    pois_b, man_b = poison_dataset(
        train, PoisonConfig(trigger=trigger, label=label_b,
                            poison_count=TOY_POISON_COUNT, seed=TOY_POISON_SEED)
    )
    poisoned["b"], manifests["b"] = pois_b, man_b
    models["b_reg"] = train_model(pois_b, "regression", cfg)
    models["b_hm"] = train_model(pois_b, "heatmap", cfg)

    # Single-point design.
    pois_s, man_s = poison_dataset(
        train, PoisonConfig(trigger=trigger, label=LabelDesign(kind="S"),
                            poison_count=TOY_POISON_COUNT, seed=TOY_POISON_SEED)
    )
    poisoned["s"], manifests["s"] = pois_s, man_s
    models["s_reg"] = train_model(pois_s, "regression", cfg)
    models["s_hm"] = train_model(pois_s, "heatmap", cfg)

    # Landscape design: labels come from each kind's own clean model.
    scapes = generate_landscape_images(50, TOY_IMAGE_SIZE, seed=TOY_LANDSCAPE_SEED)
    labels_by_kind = {}
    for kind, key in (("regression", "reg"), ("heatmap", "hm")):
        labels = landscape_labels(models[f"clean_{key}"], scapes)
        labels_by_kind[key] = labels
        label_l = LabelDesign(kind="L", landscape_labels=tuple(labels))
        pois_l, man_l = poison_dataset(
            train, PoisonConfig(trigger=trigger, label=label_l,
                                poison_count=TOY_POISON_COUNT, seed=TOY_POISON_SEED)
        )
        poisoned[f"l_{key}"], manifests[f"l_{key}"] = pois_l, man_l
        models[f"l_{key}"] = train_model(pois_l, kind, cfg)
        targets[f"l_{key}"] = attack_target_label(
            label_l, trigger, TOY_IMAGE_SIZE, TOY_N_KEYPOINTS
        )

    # Empty-heatmap design (heatmap models only).
    pois_e, man_e = poison_dataset(
        train, PoisonConfig(trigger=trigger, label=LabelDesign(kind="E"),
                            poison_count=TOY_POISON_COUNT, seed=TOY_POISON_SEED),
        model_kind="heatmap", m=16,
    )
    poisoned["e"], manifests["e"] = pois_e, man_e
    models["e_hm"] = train_model(pois_e, "heatmap", cfg)

    return {
        "train": train,
        "test": test,
        "trigger": trigger,
        "models": models,
        "poisoned": poisoned,
        "manifests": manifests,
        "targets": targets,
        "landscapes": scapes,
        "landscape_labels": labels_by_kind,
        "build_seconds": time.time() - t_start,
    }
