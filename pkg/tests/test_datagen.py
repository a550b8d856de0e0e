import json

import numpy as np
import pytest

from semdan import datagen
from semdan.datagen import Dataset, DomainShiftSpec, ParseError, bayes_oracle, generate, load_csv, save_csv
from semdan.nn import ConfigError


def test_same_seed_is_bit_identical():
    a, b = generate(datagen.swap3(seed=4)), generate(datagen.swap3(seed=4))
    for x, y in zip(a, b):
        np.testing.assert_array_equal(x.features, y.features)
        np.testing.assert_array_equal(x.eval_labels(), y.eval_labels())


def test_seeds_differ():
    assert not np.array_equal(generate(datagen.swap3(seed=0))[0].features, generate(datagen.swap3(seed=1))[0].features)


def test_swap3_contract():
    spec = datagen.swap3()
    src, tgt = generate(spec)
    assert (spec.c, spec.modes_per_class, spec.in_dim, spec.rotation_deg) == (3, 1, 2, 25.0)
    assert src.features.shape == (600, 2) and tgt.features.shape == (600, 2)
    assert np.bincount(src.labels).tolist() == [200, 200, 200]


def test_target_labels_hidden_from_training():
    _, tgt = generate(datagen.swap3())
    with pytest.raises(PermissionError):
        tgt.labels
    assert len(tgt.eval_labels()) == 600


def test_rotation_moves_class_means():
    spec = datagen.swap3(n_s=4000, n_t=4000, seed=2)
    _, tgt = generate(spec)
    expected = spec.transform(np.asarray(spec.means))
    y = tgt.eval_labels()
    for e in range(spec.c):
        pts = tgt.features[y == e]
        se = spec.stds[e] / np.sqrt(len(pts))
        assert np.all(np.abs(pts.mean(axis=0) - expected[e]) < 3 * se)


def test_null_shift_is_indistinguishable():
    spec = datagen.swap3(rotation_deg=0.0, translation=None, n_s=3000, n_t=3000, seed=9)
    src, tgt = generate(spec)
    pooled = np.concatenate([src.features, tgt.features])
    sigma = pooled.std(axis=0)
    gap = np.abs(src.features.mean(axis=0) - tgt.features.mean(axis=0))
    assert np.all(gap < 3 * sigma * np.sqrt(2 / 3000))


def test_label_noise_fraction():
    spec = datagen.swap3(label_noise=0.2, n_s=5000, seed=1)
    src, _ = generate(spec)
    clean = generate(datagen.swap3(n_s=5000, seed=1))[0]
    np.testing.assert_array_equal(src.features, clean.features)
    # flips land on a uniformly drawn class, so ~2/3 of the 20% actually change
    assert abs(np.mean(src.labels != clean.labels) - 0.2 * 2 / 3) < 0.02


@pytest.mark.parametrize("bad", [{"c": 0}, {"stds": [0.5, -1, 0.5]}, {"mode_swap": [0, 0, 1]},
                                 {"label_noise": 1.0}, {"translation": [1.0]}, {"n_s": 0}])
def test_invalid_specs(bad):
    with pytest.raises(ConfigError):
        datagen.swap3(**bad)


def test_spec_json_round_trip():
    spec = datagen.swap3_trap(seed=5, label_noise=0.1)
    assert DomainShiftSpec.from_dict(json.loads(spec.to_json())) == spec


def test_oracle_mode_centers():
    spec = datagen.swap3()
    for domain in ("source", "target"):
        means, _ = spec.cluster_params(domain)
        assert bayes_oracle(spec, means, domain).tolist() == [0, 1, 2]


def test_oracle_tie_goes_to_lower_class():
    spec = DomainShiftSpec(c=2, means=[[-1.0, 0.0], [1.0, 0.0]], stds=[1.0, 1.0])
    assert bayes_oracle(spec, np.array([[0.0, 3.0]]), "source").tolist() == [0]


def test_oracle_two_modes_per_class():
    spec = DomainShiftSpec(c=2, modes_per_class=2, means=[[-5, 0], [5, 0], [0, 5], [0, -5]], stds=[1] * 4)
    assert bayes_oracle(spec, np.array([[5.0, 0.0], [0.0, -5.0]]), "source").tolist() == [0, 1]


def test_trap_misaligns_source_oracle():
    # on the trap, the source-domain Bayes rule transported by the known transform mislabels the swapped pair
    spec = datagen.swap3_trap(n_t=3000)
    _, tgt = generate(spec)
    y = tgt.eval_labels()
    inv = tgt.features - np.asarray(spec.translation)
    th = np.radians(spec.rotation_deg)
    inv = inv @ np.array([[np.cos(th), -np.sin(th)], [np.sin(th), np.cos(th)]])
    pred = bayes_oracle(spec, inv, "source")
    swapped = y != 0
    assert np.mean(pred[swapped] == y[swapped]) < 0.1
    assert np.mean(pred[~swapped] == 0) > 0.9
    ident = datagen.swap3(n_t=3000)
    _, tgt = generate(ident)
    assert np.mean(bayes_oracle(ident, tgt.features, "target") == tgt.eval_labels()) > 0.95


def test_csv_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    ds = Dataset(rng.normal(size=(50, 3)) * 1e3, rng.integers(0, 4, size=50), "source")
    save_csv(ds, tmp_path / "a.csv")
    back = load_csv(tmp_path / "a.csv")
    np.testing.assert_allclose(back.features, ds.features, rtol=0, atol=1e-12)
    np.testing.assert_array_equal(back.labels, ds.labels)


def test_csv_unlabeled_rows(tmp_path):
    ds = Dataset(np.ones((3, 2)), np.array([0, 1, 2]), "target")
    save_csv(ds, tmp_path / "t.csv", include_labels=False)
    back = load_csv(tmp_path / "t.csv", "target")
    assert back.eval_labels().tolist() == [-1, -1, -1] and not back.has_labels


@pytest.mark.parametrize("content,line", [
    ("1.0,2.0,0\n3.0,4.0,1\n", 1),
    ("x0,x1,label\n1.0,2.0,0\n3.0,1\n", 3),
    ("x0,x1,label\n1.0,abc,0\n", 2),
    ("", 1),
])
def test_csv_parse_errors(tmp_path, content, line):
    p = tmp_path / "bad.csv"
    p.write_text(content)
    with pytest.raises(ParseError, match=f"line {line}"):
        load_csv(p)
