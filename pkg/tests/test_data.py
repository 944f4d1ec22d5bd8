import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mgml import arrays
from mgml.boxes import Box, BoxError, apply_deltas, encode_deltas, iou, iou_matrix
from mgml.data import (
    AnnotatedObject,
    AnnotationParseError,
    AnnotationValidationError,
    ClassSplit,
    Dataset,
    EpisodeSampler,
    InsufficientShotsError,
    Scene,
    assign_targets,
    builtin_splits,
    generate_proposals,
    get_split,
    load_annotations,
    region_inputs,
    sample_episode,
    save_annotations,
)
from mgml.synthworld import WorldSpec, build_world, generate_dataset

TOY = ClassSplit("toy", ("a", "b"), ("n",))


@pytest.fixture(scope="module")
def world_data():
    w = build_world(WorldSpec(rng_seed=1))
    return w, generate_dataset(w, w.split, 20, 10, rng_seed=1)


def write_jsonl(path, records):
    path.write_text("".join(json.dumps(r) + "\n" for r in records))
    return path


# --- boxes -------------------------------------------------------------------


class TestBoxes:
    def test_iou_exact_fraction(self):
        assert iou(Box(0, 0, 10, 10), Box(5, 5, 15, 15)) == 25 / 175

    def test_iou_identity_and_disjoint(self):
        b = Box(1, 2, 5, 9)
        assert iou(b, b) == 1.0
        assert iou(b, Box(6, 2, 8, 9)) == 0.0

    def test_degenerate_box_rejected(self):
        with pytest.raises(BoxError):
            Box(5, 0, 5, 3)
        with pytest.raises(BoxError):
            Box(0, 0, float("nan"), 3)

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 10_000))
    def test_iou_matrix_matches_pairwise(self, seed):
        rng = np.random.default_rng(seed)
        a = rng.uniform(0, 50, size=(4, 2))
        a = np.hstack([a, a + rng.uniform(1, 20, size=(4, 2))])
        b = rng.uniform(0, 50, size=(3, 2))
        b = np.hstack([b, b + rng.uniform(1, 20, size=(3, 2))])
        m = iou_matrix(a, b)
        for i in range(4):
            for j in range(3):
                assert m[i, j] == pytest.approx(iou(Box(*a[i]), Box(*b[j])), abs=1e-15)

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 10_000))
    def test_delta_round_trip(self, seed):
        rng = np.random.default_rng(seed)
        p = rng.uniform(0, 50, size=(5, 2))
        p = np.hstack([p, p + rng.uniform(2, 30, size=(5, 2))])
        g = p + rng.uniform(-3, 3, size=(5, 4))
        g[:, 2:] = np.maximum(g[:, 2:], g[:, :2] + 1)
        np.testing.assert_allclose(apply_deltas(encode_deltas(g, p), p), g, atol=1e-9)


# --- splits ------------------------------------------------------------------


class TestSplits:
    def test_registry_names(self):
        assert [s.name for s in builtin_splits()] == [
            "IDD-10-split1", "IDD-10-split2", "IDD-OS", "VOC-split1", "VOC-split2", "VOC-split3",
        ]

    def test_idd_os_novel_and_sizes(self):
        s = get_split("IDD-OS")
        assert s.novel_classes == ("street cart", "tractor", "water tanker", "excavator")
        assert (s.num_base, s.num_novel) == (10, 4)

    @pytest.mark.parametrize(
        "name,novel",
        [
            ("IDD-10-split1", ("bicycle", "bus", "truck")),
            ("IDD-10-split2", ("autorickshaw", "motorcycle", "truck")),
        ],
    )
    def test_idd10(self, name, novel):
        s = get_split(name)
        assert s.novel_classes == novel
        assert s.num_base == 7 and not set(novel) & set(s.base_classes)

    @pytest.mark.parametrize(
        "name,novel",
        [
            ("VOC-split1", ("bird", "bus", "cow", "motorbike", "sofa")),
            ("VOC-split2", ("aeroplane", "bottle", "cow", "horse", "sofa")),
            ("VOC-split3", ("boat", "cat", "motorbike", "sheep", "sofa")),
        ],
    )
    def test_voc(self, name, novel):
        s = get_split(name)
        assert s.novel_classes == novel
        assert s.num_base == 15 and s.num_classes == 20

    def test_layout_base_first_background_last(self):
        s = get_split("VOC-split1")
        assert s.classes[: s.num_base] == s.base_classes
        assert s.background == 20
        assert s.is_novel(s.index_of("sofa")) and not s.is_novel(0)

    def test_unknown_split(self):
        with pytest.raises(KeyError, match="unknown split"):
            get_split("nope")

    def test_split_json_round_trip(self, tmp_path):
        p = tmp_path / "s.json"
        p.write_text(json.dumps(TOY.to_dict()))
        assert get_split(str(p)) == TOY


# --- annotation files --------------------------------------------------------


class TestAnnotations:
    def rec(self, **kw):
        r = {"scene_id": "s0", "width": 100, "height": 80, "objects": [{"class": "a", "bbox": [1, 2, 30, 40]}],
             "features": {"0": [0.1, 0.2]}}
        r.update(kw)
        return r

    def test_load_basic(self, tmp_path):
        ds = load_annotations(write_jsonl(tmp_path / "a.jsonl", [self.rec()]), TOY)
        assert len(ds) == 1
        assert ds.scenes[0].objects[0] == AnnotatedObject(0, Box(1, 2, 30, 40))
        assert ds.payload_dim == 2 and ds.input_width == 6

    def test_unknown_class_dropped_and_counted(self, tmp_path):
        r = self.rec(objects=[{"class": "a", "bbox": [1, 2, 30, 40]}, {"class": "zebra", "bbox": [1, 1, 5, 5]}])
        ds = load_annotations(write_jsonl(tmp_path / "a.jsonl", [r]), TOY)
        assert ds.dropped == 1 and len(ds.scenes[0].objects) == 1

    def test_bad_json_names_line(self, tmp_path):
        p = tmp_path / "a.jsonl"
        p.write_text(json.dumps(self.rec()) + "\n{oops\n")
        with pytest.raises(AnnotationParseError, match="line 2"):
            load_annotations(p, TOY)

    def test_out_of_extent_names_scene(self, tmp_path):
        r = self.rec(scene_id="far", objects=[{"class": "a", "bbox": [1, 2, 300, 40]}])
        with pytest.raises(AnnotationValidationError, match="far"):
            load_annotations(write_jsonl(tmp_path / "a.jsonl", [r]), TOY)

    def test_degenerate_box_names_scene(self, tmp_path):
        r = self.rec(scene_id="flat", objects=[{"class": "a", "bbox": [10, 2, 10, 40]}])
        with pytest.raises(AnnotationValidationError, match="flat"):
            load_annotations(write_jsonl(tmp_path / "a.jsonl", [r]), TOY)

    def test_synthetic_round_trip(self, tmp_path, world_data):
        _, data = world_data
        written = save_annotations(data.val, tmp_path / "val.jsonl")
        assert [p.name for p in written] == ["val.jsonl", "val.jsonl.patches"]
        assert load_annotations(tmp_path / "val.jsonl", data.val.split) == data.val

    def test_save_is_byte_stable(self, tmp_path, world_data):
        _, data = world_data
        save_annotations(data.val, tmp_path / "a.jsonl")
        save_annotations(data.val, tmp_path / "b.jsonl")
        assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()
        assert (tmp_path / "a.jsonl.patches").read_bytes() == (tmp_path / "b.jsonl.patches").read_bytes()


class TestArrayFile:
    def test_round_trip(self, tmp_path):
        blob = {"x": np.arange(6.0).reshape(2, 3), "s": np.float64(3.5) * np.ones(()), "t": arrays.encode_text("héllo")}
        arrays.save(tmp_path / "f", blob)
        back = arrays.load(tmp_path / "f")
        assert list(back) == list(blob)
        for k in blob:
            np.testing.assert_array_equal(back[k], blob[k])
        assert arrays.decode_text(back["t"]) == "héllo"

    def test_magic_header(self, tmp_path):
        arrays.save(tmp_path / "f", {"x": np.zeros(1)})
        assert (tmp_path / "f").read_bytes()[:4] == b"MGCK"

    def test_truncated_file(self, tmp_path):
        arrays.save(tmp_path / "f", {"x": np.zeros(5)})
        data = (tmp_path / "f").read_bytes()
        (tmp_path / "g").write_bytes(data[:-3])
        with pytest.raises(arrays.ArrayFileError):
            arrays.load(tmp_path / "g")


# --- regions and proposals ---------------------------------------------------


def two_object_scene():
    objs = (AnnotatedObject(0, Box(0, 0, 20, 20)), AnnotatedObject(2, Box(50, 50, 80, 90)))
    payload = {0: np.array([1.0, 0.0]), 1: np.array([0.0, 1.0])}
    return Scene("s", 100.0, 100.0, objs, payload, "feature")


class TestRegions:
    def test_exact_box_gives_own_payload_and_zero_offsets(self):
        s = two_object_scene()
        x = region_inputs(s, np.array([[0, 0, 20, 20]]))
        np.testing.assert_array_equal(x, [[1.0, 0.0, 0, 0, 0, 0]])

    def test_empty_region_is_zero(self):
        x = region_inputs(two_object_scene(), np.array([[30, 0, 40, 10]]))
        np.testing.assert_array_equal(x, np.zeros((1, 6)))

    def test_partial_overlap_scales_payload(self):
        x = region_inputs(two_object_scene(), np.array([[10, 0, 30, 20]]))
        w = iou(Box(10, 0, 30, 20), Box(0, 0, 20, 20))
        np.testing.assert_allclose(x[0, :2], [w, 0.0])
        np.testing.assert_allclose(x[0, 2:], w * np.array([-10, 0, -10, 0]) / 20)

    def test_proposals_include_gt_and_counts(self):
        s = two_object_scene()
        p = generate_proposals(s, np.random.default_rng(0), n_jitter=3, n_background=5)
        assert p.shape == (2 * 4 + 5, 4)
        np.testing.assert_array_equal(p[0], [0, 0, 20, 20])
        np.testing.assert_array_equal(p[4], [50, 50, 80, 90])
        assert (p[:, 2] > p[:, 0]).all() and (p[:, 3] > p[:, 1]).all()
        assert (p >= 0).all() and (p <= 100).all()

    def test_assign_targets(self):
        s = two_object_scene()
        props = np.array([[0, 0, 20, 20], [50, 50, 80, 90], [30, 0, 40, 10]])
        labels, gt = assign_targets(props, s, {0: 0, 2: 1}, background=2)
        np.testing.assert_array_equal(labels, [0, 1, 2])
        np.testing.assert_array_equal(gt[:2], props[:2])

    def test_assign_targets_ignores_classes_outside_episode(self):
        s = two_object_scene()
        labels, _ = assign_targets(np.array([[50, 50, 80, 90]]), s, {0: 0}, background=1)
        np.testing.assert_array_equal(labels, [1])


# --- episodes ----------------------------------------------------------------


class TestEpisodes:
    def test_shapes(self, world_data):
        w, data = world_data
        ep = sample_episode(data.train, w.split, 3, 5, 8, "base", rng_seed=0)
        assert len(ep.classes) == 3 and len(ep.support) == 15 and len(ep.query) == 8
        for c in ep.classes:
            assert sum(s.class_id == c for s in ep.support) == 5

    def test_base_stage_never_sees_novel(self, world_data):
        w, data = world_data
        sampler = EpisodeSampler(data.train, 6, 5, 8, "base", seed=3)
        novel = set(w.split.novel_ids)
        for _ in range(20):
            ep = sampler.sample()
            assert not set(ep.classes) & novel
            assert not any(s.class_ids() & novel for s in ep.query)

    def test_adaptation_has_every_novel_class(self, world_data):
        w, data = world_data
        ep = sample_episode(data.train, w.split, 5, 10, 12, "adaptation", rng_seed=0)
        assert set(w.split.novel_ids) <= set(ep.classes)
        for c in w.split.novel_ids:
            assert sum(s.class_id == c for s in ep.support) == 10

    def test_support_respects_min_size(self, world_data):
        w, data = world_data
        ep = sample_episode(data.train, w.split, 4, 5, 8, "base", rng_seed=2, min_size_frac=0.2)
        for s in ep.support:
            assert s.box.width >= 0.2 * s.scene.width and s.box.height >= 0.2 * s.scene.height

    def test_same_seed_same_episode(self, world_data):
        w, data = world_data
        a = sample_episode(data.train, w.split, 4, 5, 8, "base", rng_seed=11)
        b = sample_episode(data.train, w.split, 4, 5, 8, "base", rng_seed=11)
        assert a.support_keys() == b.support_keys()
        assert [s.scene_id for s in a.query] == [s.scene_id for s in b.query]

    def test_too_few_shots(self, world_data):
        w, data = world_data
        with pytest.raises(InsufficientShotsError, match="novel"):
            sample_episode(data.train, w.split, 3, 11, 12, "adaptation", rng_seed=0)

    def test_query_must_exceed_shots(self, world_data):
        w, data = world_data
        with pytest.raises(ValueError, match="Q > K"):
            sample_episode(data.train, w.split, 3, 5, 5, "base", rng_seed=0)

    def test_split_mismatch(self, world_data):
        _, data = world_data
        with pytest.raises(ValueError, match="split"):
            sample_episode(data.train, TOY, 2, 1, 2, "base", rng_seed=0)

    def test_dataset_subset(self, world_data):
        _, data = world_data
        sub = data.train.subset([0, 2])
        assert isinstance(sub, Dataset) and sub.scenes == (data.train.scenes[0], data.train.scenes[2])
