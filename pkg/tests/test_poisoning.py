import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ghostpose.data import generate_synthetic_dataset
from ghostpose.errors import CapabilityError, ConfigurationError, PlacementError
from ghostpose.poisoning import (
    GRID_LOCATIONS,
    LabelDesign,
    PoisonConfig,
    TriggerSpec,
    attack_target_label,
    inject_trigger,
    poison_dataset,
    split_for_poisoning,
    transform_label_b,
    transform_label_e,
    transform_label_l,
    transform_label_s,
)

from reference_metrics import ref_patch_extent


# --- trigger geometry -----------------------------------------------------

def test_grid_centers_at_256():
    t = TriggerSpec(size=16, location="middle_middle")
    assert t.center((256, 256)) == (128, 128)
    assert t.extent((256, 256)) == (120, 135, 120, 135)
    t = TriggerSpec(size=16, location="upper_left")
    assert t.center((256, 256)) == (43, 43)
    assert t.extent((256, 256)) == (35, 50, 35, 50)


def test_default_size_tracks_image():
    assert TriggerSpec().resolved_size((256, 256)) == 16
    assert TriggerSpec().resolved_size((64, 64)) == 4
    assert TriggerSpec(size=7).resolved_size((64, 64)) == 7


def test_explicit_location_and_odd_size():
    t = TriggerSpec(size=3, location=(10.0, 20.0))
    assert t.center((64, 64)) == (10.0, 20.0)
    assert t.extent((64, 64)) == (9, 11, 19, 21)


def test_trigger_validation():
    with pytest.raises(ConfigurationError):
        TriggerSpec(size=0)
    with pytest.raises(ConfigurationError):
        TriggerSpec(color=(300, 0, 0))
    with pytest.raises(ConfigurationError):
        TriggerSpec(location="center")


def test_inject_trigger_exact_patch():
    img = np.arange(64 * 64 * 3, dtype=np.uint8).reshape(64, 64, 3)
    t = TriggerSpec(size=4, color=(1, 2, 3), location="middle_middle")
    out = inject_trigger(img, t)
    r0, r1, c0, c1 = t.extent((64, 64))
    assert (out[r0:r1 + 1, c0:c1 + 1] == np.array([1, 2, 3], dtype=np.uint8)).all()
    mask = np.ones((64, 64), dtype=bool)
    mask[r0:r1 + 1, c0:c1 + 1] = False
    assert np.array_equal(out[mask], img[mask])
    # the input is never mutated
    assert img[r0, c0].tolist() != [1, 2, 3]


def test_oversize_trigger_never_clipped():
    img = np.zeros((64, 64, 3), dtype=np.uint8)
    with pytest.raises(PlacementError):
        inject_trigger(img, TriggerSpec(size=80))
    with pytest.raises(PlacementError):
        inject_trigger(img, TriggerSpec(size=8, location=(2.0, 32.0)))


@settings(max_examples=60, deadline=None)
@given(
    size=st.integers(min_value=1, max_value=12),
    loc=st.sampled_from(GRID_LOCATIONS),
)
def test_trigger_extent_matches_reference(size, loc):
    t = TriggerSpec(size=size, location=loc)
    assert t.extent((64, 64)) == ref_patch_extent(t.center((64, 64)), size)


# --- selection ------------------------------------------------------------

def test_split_partition_and_determinism():
    ds = generate_synthetic_dataset(50, (64, 64), seed=0)
    cfg = PoisonConfig(poison_count=12, seed=3)
    clean_ids, poison_ids = split_for_poisoning(ds, cfg)
    assert len(poison_ids) == 12
    assert sorted(clean_ids + poison_ids) == ds.ids()
    again = split_for_poisoning(ds, cfg)
    assert again == (clean_ids, poison_ids)
    other = split_for_poisoning(ds, PoisonConfig(poison_count=12, seed=4))
    assert other[1] != poison_ids


def test_poison_rate_rounds():
    ds = generate_synthetic_dataset(50, (64, 64), seed=0)
    _, pois = split_for_poisoning(ds, PoisonConfig(poison_rate=0.25, seed=0))
    assert len(pois) == round(0.25 * 50)
    _, none = split_for_poisoning(ds, PoisonConfig(poison_rate=0.0, seed=0))
    assert none == []


def test_poison_config_validation():
    with pytest.raises(ConfigurationError):
        PoisonConfig(poison_count=5, poison_rate=0.1)
    with pytest.raises(ConfigurationError):
        PoisonConfig(poison_count=-1)
    with pytest.raises(ConfigurationError):
        PoisonConfig(poison_rate=1.5)
    ds = generate_synthetic_dataset(30, (64, 64), seed=0)
    # the default count (100) exceeds this dataset
    with pytest.raises(ConfigurationError, match="exceeds"):
        split_for_poisoning(ds, PoisonConfig(seed=0))


# --- label designs --------------------------------------------------------

def test_label_design_field_discipline():
    src = generate_synthetic_dataset(1, (64, 64), seed=0).samples[0]
    with pytest.raises(ConfigurationError):
        LabelDesign(kind="B")  # missing source
    with pytest.raises(ConfigurationError):
        LabelDesign(kind="S", source_sample=src)  # stray field
    with pytest.raises(ConfigurationError):
        LabelDesign(kind="E", point=(1.0, 2.0))
    with pytest.raises(ConfigurationError):
        LabelDesign(kind="L", landscape_labels=())
    with pytest.raises(ConfigurationError):
        LabelDesign(kind="Q")
    assert LabelDesign(kind="s").kind == "S"


def test_transforms_are_exact():
    ds = generate_synthetic_dataset(3, (64, 64), seed=1)
    sample, donor = ds.samples[0], ds.samples[1]

    b = transform_label_b(sample, donor)
    assert np.array_equal(b.keypoints, donor.keypoints)
    assert b.keypoints is not donor.keypoints

    s = transform_label_s(sample, (12.0, 34.0))
    assert (s.keypoints == np.array([12.0, 34.0])).all()
    assert s.visibility.all()

    e = transform_label_e(sample, m=16)
    assert e.heatmap_label.shape == (5, 16, 16)
    assert (e.heatmap_label == 0).all()

    labels = [np.full((5, 2), 10.0), np.full((5, 2), 30.0)]
    l_avg = transform_label_l(sample, labels)
    assert (l_avg.keypoints == 20.0).all()
    l_div = transform_label_l(sample, labels, diverse=True, index=3)
    assert (l_div.keypoints == 30.0).all()  # 3 mod 2 -> labels[1]


def test_attack_target_labels():
    trig = TriggerSpec()
    pt = attack_target_label(LabelDesign(kind="S"), trig, (64, 64), 5)
    assert (pt == np.array([32.0, 32.0])).all()
    corner = attack_target_label(LabelDesign(kind="E"), trig, (64, 64), 5)
    assert (corner == np.array([2.0, 2.0])).all()


# --- the full poisoning step ----------------------------------------------

def _random_poison_case(rng):
    side = int(rng.choice([48, 64]))
    ds = generate_synthetic_dataset(30, (side, side), seed=int(rng.integers(1000)))
    kind = rng.choice(["B", "S", "L", "E"])
    if kind == "B":
        donor = generate_synthetic_dataset(1, (side, side), seed=999, id_start=7000).samples[0]
        label = LabelDesign(kind="B", source_sample=donor)
    elif kind == "S":
        label = LabelDesign(kind="S")
    elif kind == "L":
        labels = tuple(rng.uniform(0, side, size=(5, 2)) for _ in range(4))
        label = LabelDesign(kind="L", landscape_labels=labels, diverse=bool(rng.integers(2)))
    else:
        label = LabelDesign(kind="E")
    trigger = TriggerSpec(
        size=int(rng.choice([2, 3, 4, 6])),
        location=str(rng.choice(GRID_LOCATIONS)),
    )
    config = PoisonConfig(
        trigger=trigger, label=label,
        poison_count=int(rng.integers(1, 12)), seed=int(rng.integers(10_000)),
    )
    return ds, config


def test_poison_dataset_invariants_randomized():
    """Partition, trigger locality, label exactness and determinism over a
    batch of random configurations (the library-level version of the
    acceptance exactness gate)."""
    rng = np.random.default_rng(123)
    for _ in range(8):
        ds, config = _random_poison_case(rng)
        out, manifest = poison_dataset(ds, config, model_kind="heatmap", m=16)
        assert len(out) == len(ds)
        assert out.ids() == ds.ids()
        poisoned = set(manifest["poisoned_ids"])
        assert len(poisoned) == config.resolved_count(len(ds))
        r0, r1, c0, c1 = config.trigger.extent(ds.image_size)
        for orig, new in zip(ds.samples, out.samples):
            if orig.id not in poisoned:
                assert new.image is orig.image  # untouched, not copied
                continue
            patch = new.image[r0:r1 + 1, c0:c1 + 1]
            assert (patch == np.array(config.trigger.color, dtype=np.uint8)).all()
            mask = np.ones(ds.image_size, dtype=bool)
            mask[r0:r1 + 1, c0:c1 + 1] = False
            assert np.array_equal(new.image[mask], orig.image[mask])
        again, manifest2 = poison_dataset(ds, config, model_kind="heatmap", m=16)
        assert manifest2["poisoned_ids"] == manifest["poisoned_ids"]
        for a, b in zip(out.samples, again.samples):
            assert np.array_equal(a.image, b.image)


def test_poison_manifest_contents():
    ds = generate_synthetic_dataset(30, (64, 64), seed=5)
    out, manifest = poison_dataset(
        ds, PoisonConfig(label=LabelDesign(kind="S"), poison_count=6, seed=2)
    )
    assert manifest["label_kind"] == "S"
    assert manifest["poison_count"] == 6
    assert manifest["seed"] == 2
    assert manifest["trigger"]["size"] == 4
    assert sorted(manifest["poisoned_ids"] + manifest["clean_ids"]) == ds.ids()


def test_poison_guards():
    ds = generate_synthetic_dataset(30, (64, 64), seed=5)
    with pytest.raises(CapabilityError):
        poison_dataset(ds, PoisonConfig(label=LabelDesign(kind="E"), poison_count=5),
                       model_kind="regression")
    test_split = generate_synthetic_dataset(5, (64, 64), seed=5, split_tag="test")
    with pytest.raises(ConfigurationError, match="split"):
        poison_dataset(test_split, PoisonConfig(label=LabelDesign(kind="S"), poison_count=2))
    # a donor pose drawn from inside the poisoned subset is rejected
    cfg = PoisonConfig(label=LabelDesign(kind="S"), poison_count=5, seed=1)
    _, poison_ids = split_for_poisoning(ds, cfg)
    donor = ds.by_id(poison_ids[0])
    bad = PoisonConfig(label=LabelDesign(kind="B", source_sample=donor), poison_count=5, seed=1)
    with pytest.raises(ConfigurationError, match="inside the poisoned subset"):
        poison_dataset(ds, bad)


def test_diverse_cycling_follows_dataset_order():
    ds = generate_synthetic_dataset(10, (64, 64), seed=6)
    labels = tuple(np.full((5, 2), float(v)) for v in (1.0, 2.0, 3.0))
    cfg = PoisonConfig(
        label=LabelDesign(kind="L", landscape_labels=labels, diverse=True),
        poison_count=5, seed=0,
    )
    out, manifest = poison_dataset(ds, cfg)
    poisoned = [s for s in out.samples if s.id in set(manifest["poisoned_ids"])]
    expected = [1.0, 2.0, 3.0, 1.0, 2.0]
    for s, want in zip(poisoned, expected):
        assert (s.keypoints == want).all()
