import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gradmerge.errors import (
    ConfigError,
    CorruptCheckpointError,
    IoError,
    LayoutError,
    NumericError,
    SingularCurvatureError,
)
from gradmerge.params import (
    Checkpoint,
    DiagCurvature,
    ParamLayout,
    ParamVector,
    combine,
    load_checkpoint,
    precondition_combine,
    save_checkpoint,
)

LAYOUT3 = ParamLayout((("w", (3,)),))
LAYOUT1 = ParamLayout((("w", (1,)),))


def vec(values, layout=None):
    values = np.atleast_1d(np.asarray(values, dtype=float))
    layout = layout or ParamLayout((("w", (values.size,)),))
    return ParamVector(layout, values)


def diag(values, layout=None):
    values = np.atleast_1d(np.asarray(values, dtype=float))
    layout = layout or ParamLayout((("w", (values.size,)),))
    return DiagCurvature(layout, values)


class TestParamLayout:
    def test_total_len_sums_shape_products(self):
        layout = ParamLayout((("w1", (4, 3)), ("b1", (4,)), ("w2", (4,)), ("b2", (1,))))
        assert layout.total_len == 12 + 4 + 4 + 1

    def test_duplicate_names_rejected(self):
        with pytest.raises(LayoutError):
            ParamLayout((("w", (2,)), ("w", (3,))))

    def test_empty_name_rejected(self):
        with pytest.raises(LayoutError):
            ParamLayout((("", (2,)),))

    def test_nonpositive_shape_rejected(self):
        with pytest.raises(LayoutError):
            ParamLayout((("w", (0,)),))

    def test_slices_are_contiguous_in_order(self):
        layout = ParamLayout((("a", (2,)), ("b", (3,))))
        slices = layout.slices()
        assert slices["a"] == slice(0, 2)
        assert slices["b"] == slice(2, 5)


class TestParamVector:
    def test_length_mismatch_rejected(self):
        with pytest.raises(LayoutError):
            ParamVector(LAYOUT3, np.zeros(2))

    def test_nan_rejected(self):
        with pytest.raises(NumericError):
            ParamVector(LAYOUT3, [1.0, np.nan, 0.0])

    def test_inf_rejected(self):
        with pytest.raises(NumericError):
            ParamVector(LAYOUT3, [1.0, np.inf, 0.0])

    def test_values_read_only(self):
        v = vec([1.0, 2.0, 3.0])
        with pytest.raises(ValueError):
            v.values[0] = 9.0

    def test_tensor_view_reshapes(self):
        layout = ParamLayout((("w1", (2, 2)), ("b1", (2,))))
        v = ParamVector(layout, [1, 2, 3, 4, 5, 6])
        assert v.tensor("w1").shape == (2, 2)
        np.testing.assert_array_equal(v.tensor("b1"), [5.0, 6.0])


class TestDiagCurvature:
    def test_negative_rejected(self):
        with pytest.raises(NumericError):
            DiagCurvature(LAYOUT3, [1.0, -1e-12, 0.0])

    def test_zero_allowed(self):
        d = DiagCurvature.zeros(LAYOUT3)
        assert np.all(d.values == 0.0)


class TestCombine:
    def test_identity(self):
        v = vec([1.0, -2.0, 3.5])
        out = combine([(1.0, v)])
        np.testing.assert_array_equal(out.values, v.values)

    def test_convexity_on_equal_inputs(self):
        v = vec([1.0, -2.0, 3.5])
        out = combine([(0.5, v), (0.5, v)])
        np.testing.assert_allclose(out.values, v.values, atol=1e-15)

    def test_self_cancellation(self):
        v = vec([1.0, 2.0])
        out = combine([(1.0, v), (-1.0, v)])
        np.testing.assert_array_equal(out.values, [0.0, 0.0])

    def test_empty_terms_rejected(self):
        with pytest.raises(ConfigError):
            combine([])

    def test_layout_mismatch_rejected(self):
        with pytest.raises(LayoutError):
            combine([(1.0, vec([1.0])), (1.0, vec([1.0, 2.0]))])

    def test_overflow_rejected(self):
        v = vec([1e308, 1e308])
        with pytest.raises(NumericError):
            combine([(10.0, v)])

    @given(
        st.lists(
            st.tuples(
                st.floats(-3, 3),
                st.lists(st.floats(-1e6, 1e6), min_size=4, max_size=4),
            ),
            min_size=2,
            max_size=6,
        ),
        st.randoms(use_true_random=False),
    )
    @settings(max_examples=50, deadline=None)
    def test_permutation_invariance(self, raw_terms, rnd):
        layout = ParamLayout((("w", (4,)),))
        terms = [(w, ParamVector(layout, vals)) for w, vals in raw_terms]
        shuffled = list(terms)
        rnd.shuffle(shuffled)
        a = combine(terms).values
        b = combine(shuffled).values
        np.testing.assert_allclose(a, b, atol=1e-12 * max(1.0, np.abs(a).max()))


class TestPreconditionCombine:
    def test_zero_increments_return_anchor(self):
        anchor = vec([1.0, -1.0, 2.0])
        h = diag([1.0, 2.0, 3.0], anchor.layout)
        out = precondition_combine(anchor, [(1.0, h, h, anchor)], hbar=h)
        np.testing.assert_array_equal(out.values, anchor.values)

    def test_single_task_identity_preconditioner_recovers_task(self):
        anchor = vec([0.0, 0.0])
        theta = vec([2.0, -3.0], anchor.layout)
        ones = diag([1.0, 1.0], anchor.layout)
        zeros = DiagCurvature.zeros(anchor.layout)
        out = precondition_combine(anchor, [(1.0, ones, zeros, theta)], hbar=ones)
        np.testing.assert_allclose(out.values, theta.values, atol=1e-15)

    def test_two_task_scalar_fixture(self):
        # 1-D fixture: anchor 0, thetas 1 and 2, unit anchor and task
        # curvatures, pooled curvature 3.  Both increments get weight
        # (1+1)/3, so the output is 2/3 + 4/3 = 2.0, which equals the
        # jointly trained closed-form solution for the same data.
        anchor = vec([0.0])
        one = diag([1.0], anchor.layout)
        out = precondition_combine(
            anchor,
            [
                (1.0, one, one, vec([1.0], anchor.layout)),
                (1.0, one, one, vec([2.0], anchor.layout)),
            ],
            hbar=diag([3.0], anchor.layout),
        )
        np.testing.assert_allclose(out.values, [2.0], atol=1e-12)

    def test_nonpositive_hbar_rejected(self):
        anchor = vec([0.0, 0.0])
        one = diag([1.0, 1.0], anchor.layout)
        bad = DiagCurvature(anchor.layout, [1.0, 0.0])
        with pytest.raises(SingularCurvatureError):
            precondition_combine(anchor, [(1.0, one, one, anchor)], hbar=bad)

    def test_layout_mismatch_rejected(self):
        anchor = vec([0.0, 0.0])
        one = diag([1.0, 1.0], anchor.layout)
        with pytest.raises(LayoutError):
            precondition_combine(anchor, [(1.0, one, one, vec([1.0]))], hbar=one)

    @given(
        st.floats(1e-6, 1e6),
        st.lists(st.floats(-10, 10), min_size=3, max_size=3),
        st.lists(st.floats(0.01, 10), min_size=3, max_size=3),
        st.lists(st.floats(0.0, 10), min_size=3, max_size=3),
        st.lists(st.floats(0.01, 10), min_size=3, max_size=3),
    )
    @settings(max_examples=50, deadline=None)
    def test_scale_invariance(self, c, theta, h0, ht, hbar):
        layout = ParamLayout((("w", (3,)),))
        anchor = ParamVector(layout, [0.5, -0.5, 1.0])
        term = (0.7, DiagCurvature(layout, h0), DiagCurvature(layout, ht), ParamVector(layout, theta))
        base = precondition_combine(anchor, [term], DiagCurvature(layout, hbar)).values
        scaled_term = (
            0.7,
            DiagCurvature(layout, c * np.asarray(h0)),
            DiagCurvature(layout, c * np.asarray(ht)),
            ParamVector(layout, theta),
        )
        scaled = precondition_combine(
            anchor, [scaled_term], DiagCurvature(layout, c * np.asarray(hbar))
        ).values
        np.testing.assert_allclose(scaled, base, atol=1e-12 * max(1.0, np.abs(base).max()))


class TestCheckpointIO:
    def make_ckpt(self, with_curvature):
        layout = ParamLayout((("w", (3,)),))
        params = ParamVector(layout, [1.5, -2.25, 0.0])
        curvature = DiagCurvature(layout, [0.5, 1.0, 2.0]) if with_curvature else None
        return Checkpoint(layout, params, curvature, "anchor-0", {"seed": "7", "note": "x"})

    def test_round_trip_bit_exact(self, tmp_path):
        ckpt = self.make_ckpt(True)
        stem = tmp_path / "ck"
        save_checkpoint(ckpt, stem)
        back = load_checkpoint(stem)
        assert back.layout == ckpt.layout
        assert back.params.values.tobytes() == ckpt.params.values.tobytes()
        assert back.curvature.values.tobytes() == ckpt.curvature.values.tobytes()
        assert back.anchor_id == ckpt.anchor_id
        assert back.meta == ckpt.meta

    def test_blob_size_without_curvature(self, tmp_path):
        save_checkpoint(self.make_ckpt(False), tmp_path / "ck")
        assert (tmp_path / "ck.f64le").stat().st_size == 24

    def test_blob_size_with_curvature(self, tmp_path):
        save_checkpoint(self.make_ckpt(True), tmp_path / "ck")
        assert (tmp_path / "ck.f64le").stat().st_size == 48

    def test_truncated_blob_rejected(self, tmp_path):
        stem = tmp_path / "ck"
        save_checkpoint(self.make_ckpt(True), stem)
        blob = (tmp_path / "ck.f64le").read_bytes()
        (tmp_path / "ck.f64le").write_bytes(blob[:-8])
        with pytest.raises(CorruptCheckpointError):
            load_checkpoint(stem)

    def test_missing_layout_key_rejected(self, tmp_path):
        import json

        stem = tmp_path / "ck"
        save_checkpoint(self.make_ckpt(False), stem)
        doc = json.loads((tmp_path / "ck.meta.json").read_text())
        del doc["layout"]
        (tmp_path / "ck.meta.json").write_text(json.dumps(doc))
        with pytest.raises(CorruptCheckpointError):
            load_checkpoint(stem)

    def test_missing_files_rejected(self, tmp_path):
        with pytest.raises(IoError):
            load_checkpoint(tmp_path / "nope")

    def test_nan_in_blob_rejected(self, tmp_path):
        stem = tmp_path / "ck"
        save_checkpoint(self.make_ckpt(False), stem)
        (tmp_path / "ck.f64le").write_bytes(np.array([1.0, np.nan, 2.0]).tobytes())
        with pytest.raises(NumericError):
            load_checkpoint(stem)

    def test_unparseable_meta_rejected(self, tmp_path):
        stem = tmp_path / "ck"
        save_checkpoint(self.make_ckpt(False), stem)
        (tmp_path / "ck.meta.json").write_text("{not json")
        with pytest.raises(CorruptCheckpointError):
            load_checkpoint(stem)

    def test_checkpoint_layout_mismatch_rejected(self):
        layout = ParamLayout((("w", (2,)),))
        other = ParamLayout((("w", (3,)),))
        with pytest.raises(LayoutError):
            Checkpoint(other, ParamVector(layout, [1.0, 2.0]))

    @given(values=st.lists(st.floats(-1e300, 1e300, allow_nan=False), min_size=1, max_size=16))
    @settings(max_examples=50, deadline=None)
    def test_round_trip_property(self, values):
        import tempfile

        layout = ParamLayout((("w", (len(values),)),))
        ckpt = Checkpoint.of(ParamVector(layout, values))
        with tempfile.TemporaryDirectory() as tmp:
            stem = f"{tmp}/c"
            save_checkpoint(ckpt, stem)
            back = load_checkpoint(stem)
        assert back.params.values.tobytes() == ckpt.params.values.tobytes()
