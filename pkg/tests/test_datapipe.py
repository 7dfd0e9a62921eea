
import numpy as np
import pytest

from volalign import datapipe as dp
from volalign.datapipe import ManifestEntry, SynthSpec, Volume
from volalign.diffmath import Tensor, fnv1a64
from volalign.errors import ConfigurationError, FormatError, InputError, LoadError


def make_entry(**kw):
    base = dict(id="a", path="samples/a.vol", kind="2d", body_region="Chest",
                modality="CT", condition=None, label=0, split="train")
    base.update(kw)
    return ManifestEntry(**base)


class TestManifest:
    def test_empty_manifest_is_valid(self, tmp_path):
        path = tmp_path / "manifest.json"
        path.write_text("[]")
        assert dp.load_manifest(path) == []

    def test_round_trip(self, tmp_path):
        vol = Volume(Tensor(np.zeros((1, 8, 8))))
        (tmp_path / "samples").mkdir()
        dp.save_volume(vol, tmp_path / "samples" / "a.vol")
        dp.save_volume(vol, tmp_path / "samples" / "b.vol")
        entries = [make_entry(), make_entry(id="b", path="samples/b.vol",
                                            condition="Nodule", label=1, split="test")]
        dp.save_manifest(entries, tmp_path / "manifest.json")
        assert dp.load_manifest(tmp_path / "manifest.json") == entries

    def test_duplicate_id_names_the_id(self, tmp_path):
        vol = Volume(Tensor(np.zeros((1, 8, 8))))
        (tmp_path / "samples").mkdir()
        dp.save_volume(vol, tmp_path / "samples" / "a.vol")
        dp.save_manifest([make_entry(), make_entry()], tmp_path / "manifest.json")
        with pytest.raises(LoadError, match="'a'"):
            dp.load_manifest(tmp_path / "manifest.json")

    def test_dangling_path(self, tmp_path):
        dp.save_manifest([make_entry(path="samples/missing.vol")], tmp_path / "manifest.json")
        with pytest.raises(LoadError, match="not found"):
            dp.load_manifest(tmp_path / "manifest.json")

    def test_parse_failure_reports_line(self, tmp_path):
        path = tmp_path / "manifest.json"
        path.write_text("[\n{bad json}\n]")
        with pytest.raises(LoadError, match="line"):
            dp.load_manifest(path)

    def test_bad_enum_values(self, tmp_path):
        dp.save_manifest([make_entry(kind="4d", path="x")], tmp_path / "m.json")
        with pytest.raises(LoadError, match="kind"):
            dp.load_manifest(tmp_path / "m.json")


class TestVol1:
    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(0)
        vol = Volume(Tensor(rng.normal(size=(3, 5, 7)).astype(np.float32).astype(np.float64)))
        dp.save_volume(vol, tmp_path / "v.vol")
        back = dp.load_volume(tmp_path / "v.vol")
        assert back.voxels.shape == (3, 5, 7)
        assert np.array_equal(back.voxels.data, vol.voxels.data)

    def test_header_layout(self, tmp_path):
        vol = Volume(Tensor(np.zeros((2, 3, 4))))
        dp.save_volume(vol, tmp_path / "v.vol")
        blob = (tmp_path / "v.vol").read_bytes()
        assert blob[:4] == b"VOL1"
        import struct
        assert struct.unpack("<III", blob[4:16]) == (2, 3, 4)
        assert len(blob) == 16 + 2 * 3 * 4 * 4

    def test_bad_magic(self, tmp_path):
        (tmp_path / "v.vol").write_bytes(b"NOPE" + b"\x00" * 20)
        with pytest.raises(FormatError, match="magic"):
            dp.load_volume(tmp_path / "v.vol")

    def test_truncated_payload(self, tmp_path):
        vol = Volume(Tensor(np.zeros((2, 3, 4))))
        dp.save_volume(vol, tmp_path / "v.vol")
        blob = (tmp_path / "v.vol").read_bytes()
        (tmp_path / "t.vol").write_bytes(blob[:-5])
        with pytest.raises(FormatError, match="expected"):
            dp.load_volume(tmp_path / "t.vol")

    def test_non_finite_rejected(self, tmp_path):
        import struct
        payload = struct.pack("<f", float("nan")) * 4
        (tmp_path / "v.vol").write_bytes(b"VOL1" + struct.pack("<III", 1, 2, 2) + payload)
        with pytest.raises(FormatError, match="finite"):
            dp.load_volume(tmp_path / "v.vol")


class TestResize:
    def test_identity_exact(self):
        rng = np.random.default_rng(1)
        img = rng.normal(size=(9, 13))
        out = dp.resize_bilinear(Tensor(img), 9, 13)
        assert np.abs(out.data - img).max() < 1e-12

    def test_constant_image(self):
        out = dp.resize_bilinear(Tensor(np.full((5, 5), 3.25)), 11, 7)
        assert np.allclose(out.data, 3.25, atol=1e-12)

    def test_two_by_two_down_to_one(self):
        out = dp.resize_bilinear(Tensor([[0.0, 0.0], [2.0, 2.0]]), 1, 1)
        assert out.data.shape == (1, 1)
        assert abs(out.data[0, 0] - 1.0) < 1e-15

    def test_zero_target_rejected(self):
        with pytest.raises(InputError):
            dp.resize_bilinear(Tensor(np.zeros((4, 4))), 0, 4)


class TestZscore:
    def test_two_values(self):
        out = dp.zscore(Tensor([[0.0, 2.0]]))
        assert np.allclose(out.data, [[-1.0, 1.0]], atol=1e-15)

    def test_constant_image_maps_to_zeros(self):
        out = dp.zscore(Tensor(np.full((4, 4), 9.0)))
        assert np.array_equal(out.data, np.zeros((4, 4)))

    def test_moments_on_random_input(self):
        rng = np.random.default_rng(2)
        out = dp.zscore(Tensor(rng.normal(3.0, 7.0, size=(32, 32)))).data
        assert abs(out.mean()) < 1e-10
        assert abs(out.std() - 1.0) < 1e-10

    def test_preprocess_order_resize_then_zscore(self):
        rng = np.random.default_rng(3)
        vol = Volume(Tensor(rng.normal(size=(2, 8, 8))))
        pre = dp.preprocess_volume(vol, 4, 4)
        for i in range(2):
            sl = pre.voxels.data[i]
            assert abs(sl.mean()) < 1e-10
            assert abs(sl.std() - 1.0) < 1e-10
            manual = dp.zscore(dp.resize_bilinear(Tensor(vol.voxels.data[i]), 4, 4))
            assert np.array_equal(sl, manual.data)


class TestCaptions:
    def test_brain_mri_with_condition(self):
        e = make_entry(body_region="Brain", modality="MRI", condition="Pituitary Tumor")
        assert dp.build_caption(e) == "Brain MRI with Pituitary Tumor"

    def test_abdomen_ct_with_condition(self):
        e = make_entry(body_region="Abdomen", modality="CT", condition="Prostate Lesion")
        assert dp.build_caption(e) == "Abdomen CT with Prostate Lesion"

    def test_condition_omitted(self):
        e = make_entry(body_region="Chest", modality="X-ray", condition=None)
        assert dp.build_caption(e) == "Chest X-ray"

    def test_empty_required_field(self):
        with pytest.raises(InputError):
            dp.build_caption(make_entry(body_region=" "))
        with pytest.raises(InputError):
            dp.build_caption(make_entry(modality=""))


class TestTokenize:
    def test_case_folding(self):
        assert dp.tokenize("MRI") == dp.tokenize("mri")
        assert len(dp.tokenize("MRI")) == 1

    def test_split_semantics(self):
        a = dp.tokenize("Brain MRI")
        b = dp.tokenize("MRI Brain")
        assert sorted(a) == sorted(b)
        assert dp.tokenize("Chest X-ray") == dp.tokenize("chest x ray")

    def test_golden_brain_id(self):
        # pinned: FNV-1a 64-bit of "brain", mod 4096
        assert fnv1a64("brain") % 4096 == 2771
        assert dp.tokenize("brain") == [2771]

    def test_no_alphanumeric_content(self):
        with pytest.raises(InputError):
            dp.tokenize("--- !!! ---")

    def test_ids_below_vocab(self):
        ids = dp.tokenize("Brain MRI with Pituitary Tumor", vocab=128)
        assert all(0 <= i < 128 for i in ids)


class TestSynth:
    def test_same_seed_bitwise_identical_corpus(self, tmp_path):
        spec = SynthSpec(family="pattern", classes=2, per_class=6, slices=3,
                         height=8, width=8)
        dp.synth_dataset(spec, seed=7, out_dir=tmp_path / "a")
        dp.synth_dataset(spec, seed=7, out_dir=tmp_path / "b")
        for rel in sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file()):
            assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes(), rel

    def test_different_seed_differs(self, tmp_path):
        spec = SynthSpec(family="pattern", classes=2, per_class=6, height=8, width=8, kind="2d")
        dp.synth_dataset(spec, seed=1, out_dir=tmp_path / "a")
        dp.synth_dataset(spec, seed=2, out_dir=tmp_path / "b")
        a = (tmp_path / "a" / "samples" / "c0_0000.vol").read_bytes()
        b = (tmp_path / "b" / "samples" / "c0_0000.vol").read_bytes()
        assert a != b

    def test_order_coded_shares_multiset(self, tmp_path):
        spec = SynthSpec(family="order-coded", classes=2, per_class=6, slices=4,
                         height=8, width=8)
        entries = dp.synth_dataset(spec, seed=3, out_dir=tmp_path)
        by_class = {}
        for e in entries:
            if e.label not in by_class:
                by_class[e.label] = dp.load_volume(tmp_path / e.path)
        v0 = by_class[0].voxels.data
        v1 = by_class[1].voxels.data
        # same multiset of slices, different order
        key = lambda v: sorted(v.reshape(v.shape[0], -1).tolist())
        assert key(v0) == key(v1)
        assert not np.array_equal(v0, v1)

    def test_order_coded_class_marker_at_position_zero(self, tmp_path):
        spec = SynthSpec(family="order-coded", classes=2, per_class=6, slices=4,
                         height=8, width=8)
        entries = dp.synth_dataset(spec, seed=3, out_dir=tmp_path)
        vols = {e.id: dp.load_volume(tmp_path / e.path) for e in entries if e.label == 0}
        first = next(iter(vols.values())).voxels.data[0]
        for v in vols.values():
            assert np.array_equal(v.voxels.data[0], first)

    def test_split_counts(self, tmp_path):
        spec = SynthSpec(family="pattern", classes=2, per_class=20, height=8, width=8, kind="2d")
        entries = dp.synth_dataset(spec, seed=5, out_dir=tmp_path)
        for label in (0, 1):
            splits = [e.split for e in entries if e.label == label]
            assert splits.count("train") == 14
            assert splits.count("val") == 2
            assert splits.count("test") == 4

    def test_captions_file(self, tmp_path):
        spec = SynthSpec(family="order-coded", classes=3, per_class=5, slices=4,
                         height=8, width=8)
        dp.synth_dataset(spec, seed=0, out_dir=tmp_path)
        caps = dp.load_captions(tmp_path / "captions.json")
        assert [c.text for c in caps] == ["Brain MRI with Sequence A",
                                          "Brain MRI with Sequence B",
                                          "Brain MRI with Sequence C"]

    def test_invalid_spec(self):
        with pytest.raises(ConfigurationError):
            SynthSpec(family="nope").validate()
        with pytest.raises(ConfigurationError):
            SynthSpec(family="pattern", classes=9).validate()
        with pytest.raises(ConfigurationError):
            SynthSpec(family="order-coded", classes=5, slices=4).validate()
        with pytest.raises(ConfigurationError):
            SynthSpec(family="order-coded", kind="2d").validate()

    def test_pattern_classes_linearly_separable_in_pixel_space(self, tmp_path):
        # probe oracle on raw flattened voxels; evalkit has the probe itself,
        # here a perceptron-style check keeps the module self-contained
        spec = SynthSpec(family="pattern", classes=4, per_class=12, slices=4,
                         height=16, width=16)
        entries = dp.synth_dataset(spec, seed=11, out_dir=tmp_path)
        xs = np.stack([dp.load_volume(tmp_path / e.path).voxels.data.ravel() for e in entries])
        ys = np.array([e.label for e in entries])
        # multinomial logistic regression, full batch
        x1 = np.hstack([xs, np.ones((len(xs), 1))])
        w = np.zeros((x1.shape[1], 4))
        onehot = np.eye(4)[ys]
        for _ in range(300):
            z = x1 @ w
            z -= z.max(axis=1, keepdims=True)
            p = np.exp(z)
            p /= p.sum(axis=1, keepdims=True)
            w -= 0.05 * x1.T @ (p - onehot) / len(xs)
        acc = ((x1 @ w).argmax(axis=1) == ys).mean()
        assert acc >= 0.99
