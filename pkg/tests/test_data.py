import collections
import json

import numpy as np
import pytest
from hypothesis import HealthCheck, given, settings
from hypothesis import strategies as st

from relrank.data import (
    EQUALITY_DELTA,
    ComparisonPair,
    ImageSample,
    LoadError,
    PairDataset,
    ParseError,
    SyntheticSpec,
    ValidationError,
    blob_box,
    generate_synthetic,
    label_for,
    load_dataset,
    load_pairs,
    minibatches,
    read_png,
    render,
    save_dataset,
    save_pairs,
    write_png,
)
from relrank.evaluate import pairwise_accuracy

HEADER = "image_i,image_j,target,attribute\n"


def _write_images(d, ids, size=4):
    d.mkdir(exist_ok=True)
    for k, i in enumerate(ids):
        write_png(d / f"{i}.png", np.full((1, size, size), k / max(1, len(ids) - 1)))


def test_empty_pairs_file(tmp_path):
    (tmp_path / "p.csv").write_text(HEADER)
    ds = load_pairs(tmp_path, tmp_path / "p.csv")
    assert ds.train_pairs == [] and ds.samples == {}


def test_direct_row_parse(tmp_path):
    _write_images(tmp_path / "im", ["a", "b"])
    (tmp_path / "p.csv").write_text(HEADER + "a.png,b.png,1.0,pointy\n")
    ds = load_pairs(tmp_path / "im", tmp_path / "p.csv")
    assert ds.train_pairs == [ComparisonPair("a", "b", 1.0, "pointy")]
    assert ds.attribute == "pointy"
    assert ds.samples["a"].pixels.shape == (1, 4, 4)


def test_missing_image_names_id(tmp_path):
    _write_images(tmp_path / "im", ["a"])
    (tmp_path / "p.csv").write_text(HEADER + "a.png,ghost.png,1,x\n")
    with pytest.raises(LoadError, match="ghost"):
        load_pairs(tmp_path / "im", tmp_path / "p.csv")


def test_malformed_row_reports_line(tmp_path):
    _write_images(tmp_path / "im", ["a", "b"])
    (tmp_path / "p.csv").write_text(HEADER + "a.png,b.png,1,x\na.png,b.png\n")
    with pytest.raises(ParseError, match=":3:"):
        load_pairs(tmp_path / "im", tmp_path / "p.csv")


def test_bad_target_rejected(tmp_path):
    _write_images(tmp_path / "im", ["a", "b"])
    (tmp_path / "p.csv").write_text(HEADER + "a.png,b.png,0.7,x\n")
    with pytest.raises(ValidationError):
        load_pairs(tmp_path / "im", tmp_path / "p.csv")


def test_size_mismatch_rejected_unless_resize(tmp_path):
    d = tmp_path / "im"
    d.mkdir()
    write_png(d / "a.png", np.zeros((1, 4, 4)))
    write_png(d / "b.png", np.zeros((1, 6, 6)))
    (tmp_path / "p.csv").write_text(HEADER + "a.png,b.png,1,x\n")
    with pytest.raises(ValidationError):
        load_pairs(d, tmp_path / "p.csv")
    ds = load_pairs(d, tmp_path / "p.csv", image_shape=(1, 4, 4), resize=True)
    assert ds.samples["b"].pixels.shape == (1, 4, 4)


def test_mixed_attributes_need_choice(tmp_path):
    _write_images(tmp_path / "im", ["a", "b", "c"])
    (tmp_path / "p.csv").write_text(HEADER + "a.png,b.png,1,x\nb.png,c.png,0,y\n")
    with pytest.raises(ValidationError):
        load_pairs(tmp_path / "im", tmp_path / "p.csv")
    ds = load_pairs(tmp_path / "im", tmp_path / "p.csv", attribute="y")
    assert [p.key() for p in ds.train_pairs] == [("b", "c", "y")]


def test_png_round_trip_exact_for_quantized(tmp_path, rng):
    img = np.round(rng.random((3, 5, 7)) * 255) / 255
    write_png(tmp_path / "x.png", img)
    np.testing.assert_array_equal(read_png(tmp_path / "x.png"), img)


def test_dataset_invariants():
    s = {"a": ImageSample("a", np.zeros((1, 2, 2))), "b": ImageSample("b", np.ones((1, 2, 2)))}
    with pytest.raises(ValidationError):
        PairDataset(s, [ComparisonPair("a", "z", 1.0, "x")], [], "x")
    with pytest.raises(ValidationError):
        PairDataset(s, [ComparisonPair("a", "b", 1.0, "x")], [ComparisonPair("a", "b", 0.0, "x")], "x")
    with pytest.raises(ValidationError):
        PairDataset({"a": ImageSample("a", np.full((1, 2, 2), 1.5))}, [], [], "x")
    with pytest.raises(ValidationError):
        PairDataset({**s, "c": ImageSample("c", np.zeros((1, 3, 3)))}, [], [], "x")


@pytest.fixture(scope="module")
def small_synth():
    return generate_synthetic(SyntheticSpec(kind="blob_size", n_images=40, image_size=12, n_train_pairs=40,
                                            n_test_pairs=10, equality_fraction=0.2, seed=9,
                                            test_image_fraction=0.5))


def test_save_load_round_trip(tmp_path, small_synth):
    ds, manifest = small_synth
    save_dataset(ds, tmp_path, manifest)
    back = load_dataset(tmp_path)
    assert back.train_pairs == ds.train_pairs and back.test_pairs == ds.test_pairs
    assert set(back.samples) == set(ds.samples)
    for k, s in ds.samples.items():
        np.testing.assert_array_equal(back.samples[k].pixels, s.pixels)
        assert back.samples[k].latent_strength == s.latent_strength


def test_save_pairs_round_trip(tmp_path, small_synth):
    ds, _ = small_synth
    save_dataset(ds, tmp_path)
    save_pairs(ds.train_pairs, tmp_path / "again.csv")
    assert (tmp_path / "again.csv").read_bytes() == (tmp_path / "train_pairs.csv").read_bytes()


MUTATIONS = ["drop_image", "bad_target", "short_row", "bad_header", "train_in_test", "bad_number", "corrupt_png"]


@settings(max_examples=30, deadline=None, suppress_health_check=[HealthCheck.function_scoped_fixture])
@given(mutation=st.sampled_from(MUTATIONS), row=st.integers(0, 39))
def test_loader_rejects_mutated_files(tmp_path_factory, small_synth, mutation, row):
    d = tmp_path_factory.mktemp("mut")
    ds, manifest = small_synth
    save_dataset(ds, d)
    lines = (d / "train_pairs.csv").read_text().splitlines()
    k = 1 + row
    a, b, t, attr = lines[k].split(",")
    if mutation == "drop_image":
        (d / "images" / a).unlink()
    elif mutation == "bad_target":
        lines[k] = f"{a},{b},0.25,{attr}"
    elif mutation == "short_row":
        lines[k] = f"{a},{b},{t}"
    elif mutation == "bad_header":
        lines[0] = "left,right,label,attr"
    elif mutation == "bad_number":
        lines[k] = f"{a},{b},yes,{attr}"
    elif mutation == "train_in_test":
        with open(d / "test_pairs.csv", "a") as fh:
            fh.write(lines[k] + "\n")
    elif mutation == "corrupt_png":
        (d / "images" / a).write_bytes(b"not a png")
    (d / "train_pairs.csv").write_text("\n".join(lines) + "\n")
    with pytest.raises((LoadError, ParseError, ValidationError)):
        load_dataset(d)


# --- generator ---------------------------------------------------------------

def test_brightness_endpoints():
    assert render("brightness", 0.0, 8).mean() == pytest.approx(0.1, abs=1e-15)
    assert render("brightness", 1.0, 8).mean() == pytest.approx(0.9, abs=1e-15)


@pytest.mark.parametrize("kind", ["brightness", "blob_size"])
def test_rendering_strictly_monotone(kind):
    means = [render(kind, s, 32).mean() for s in np.linspace(0, 1, 101)]
    assert np.all(np.diff(means) > 0)


def test_vertical_position_moves_up():
    rows = np.arange(32)
    heights = []
    for s in np.linspace(0, 1, 21):
        img = render("vertical_position", s, 32)[0] - 0.1
        heights.append(-(img.sum(axis=1) @ rows) / img.sum())
    assert np.all(np.diff(heights) > 0)
    # mass stays nearly constant while it moves (sub-pixel rasterization wobbles slightly)
    totals = [render("vertical_position", s, 32).sum() for s in np.linspace(0, 1, 21)]
    assert np.ptp(totals) / np.mean(totals) < 0.01


def test_blob_box_contains_blob():
    for s in np.linspace(0, 1, 11):
        img = render("blob_size", s, 32)[0] - 0.1
        r0, r1, c0, c1 = blob_box(s, 32)
        assert img[r0:r1, c0:c1].sum() == pytest.approx(img.sum(), rel=1e-12)


def test_equality_rule():
    assert label_for(0.3, 0.3) == 0.5
    assert label_for(0.5, 0.5 - EQUALITY_DELTA * 0.99) == 0.5
    assert label_for(0.9, 0.2) == 1.0 and label_for(0.2, 0.9) == 0.0


@pytest.mark.parametrize("kind", ["brightness", "blob_size", "vertical_position"])
def test_labels_agree_with_latents(kind):
    ds, _ = generate_synthetic(SyntheticSpec(kind=kind, n_images=60, image_size=8, n_train_pairs=150,
                                             n_test_pairs=20, equality_fraction=0.3, seed=4))
    lat = ds.latent()
    for p in ds.train_pairs + ds.test_pairs:
        assert p.t == label_for(lat[p.id_i], lat[p.id_j])
    oracle = pairwise_accuracy(lat, ds.train_pairs + ds.test_pairs, epsilon=EQUALITY_DELTA)
    assert oracle.ordered_accuracy == 1.0 and oracle.equality_accuracy == 1.0


def test_equality_fraction_exact():
    ds, _ = generate_synthetic(SyntheticSpec(n_images=100, image_size=8, n_train_pairs=200,
                                             n_test_pairs=50, equality_fraction=0.3, seed=1))
    assert sum(p.t == 0.5 for p in ds.train_pairs) == 60
    assert sum(p.t == 0.5 for p in ds.test_pairs) == 15


def test_generator_deterministic_and_seeded():
    spec = SyntheticSpec(n_images=20, image_size=8, n_train_pairs=30, n_test_pairs=6, seed=5, noise=0.1)
    a, ma = generate_synthetic(spec)
    b, mb = generate_synthetic(spec)
    assert a.train_pairs == b.train_pairs and json.dumps(ma) == json.dumps(mb)
    assert all(np.array_equal(a.samples[k].pixels, b.samples[k].pixels) for k in a.samples)
    c, _ = generate_synthetic(SyntheticSpec(n_images=20, image_size=8, n_train_pairs=30, n_test_pairs=6, seed=6))
    assert c.train_pairs != a.train_pairs


def test_test_pairs_use_held_out_images():
    ds, manifest = generate_synthetic(SyntheticSpec(n_images=40, image_size=8, n_train_pairs=60,
                                                    n_test_pairs=20, seed=2))
    held = set(manifest["test_image_ids"])
    assert len(held) == 10
    assert set(ds.ids_in(ds.test_pairs)) <= held
    assert not set(ds.ids_in(ds.train_pairs)) & held


@pytest.mark.parametrize("kwargs", [dict(kind="hue"), dict(n_images=1), dict(equality_fraction=1.5),
                                    dict(noise=-1.0), dict(n_images=4, n_train_pairs=100)])
def test_generator_rejects_invalid(kwargs):
    with pytest.raises(ValidationError):
        generate_synthetic(SyntheticSpec(**{"image_size": 8, **kwargs}))


# --- minibatches --------------------------------------------------------------

def test_minibatch_sizes():
    assert [len(b) for b in minibatches(list(range(33)), 16, seed=0, epoch=0)] == [16, 16, 1]


def test_minibatch_determinism():
    pairs = list(range(50))
    assert minibatches(pairs, 7, 3, 2) == minibatches(pairs, 7, 3, 2)
    assert minibatches(pairs, 7, 3, 2) != minibatches(pairs, 7, 3, 3)


@settings(max_examples=50, deadline=None)
@given(pairs=st.lists(st.integers(0, 5), max_size=60), batch=st.integers(1, 20),
       seed=st.integers(0, 100), epoch=st.integers(0, 100))
def test_minibatch_multiset_preserved(pairs, batch, seed, epoch):
    out = [p for b in minibatches(pairs, batch, seed, epoch) for p in b]
    assert collections.Counter(out) == collections.Counter(pairs)
    assert all(1 <= len(b) <= batch for b in minibatches(pairs, batch, seed, epoch))


def test_minibatch_rejects_zero():
    with pytest.raises(ValueError):
        minibatches([1], 0, 0, 0)
