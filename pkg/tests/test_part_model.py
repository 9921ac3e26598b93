import numpy as np
import pytest

from dpnet.errors import ContractError, FormatError
from dpnet.part_model import (
    PartModel,
    bag_of_parts,
    forward,
    init_u_from_descriptors,
    init_v,
    load_checkpoint,
    predict,
    save_checkpoint,
    score,
)


def random_model(p=6, d=5, c=3, q=2, seed=0):
    rng = np.random.default_rng(seed)
    return PartModel(
        u=rng.normal(size=(p, d)),
        v=rng.normal(size=(c, p)),
        parts_per_class=q,
        num_classes=c,
        descriptor_dim=d,
    )


class TestScore:
    def test_identity_parts_select_coordinates(self):
        model = PartModel(
            u=np.eye(4), v=np.zeros((2, 4)), parts_per_class=2, num_classes=2, descriptor_dim=4
        )
        x = np.eye(4)[:, [2, 0]]
        s = score(model, x)
        np.testing.assert_array_equal(s, np.eye(4)[:, [2, 0]])

    def test_scalar_case(self):
        model = PartModel(
            u=np.array([[2.0, -1.0]]), v=np.ones((1, 1)), parts_per_class=1,
            num_classes=1, descriptor_dim=2,
        )
        s = score(model, np.array([[3.0], [4.0]]))
        assert s.shape == (1, 1)
        assert s[0, 0] == 2.0 * 3.0 + (-1.0) * 4.0

    def test_matches_dot_product_oracle(self):
        model = random_model(seed=1)
        x = np.random.default_rng(2).normal(size=(5, 9))
        s = score(model, x)
        for p in range(6):
            for r in range(9):
                acc = 0.0
                for t in range(5):
                    acc += model.u[p, t] * x[t, r]
                assert s[p, r] == acc

    def test_dimension_mismatch(self):
        with pytest.raises(ContractError):
            score(random_model(), np.zeros((4, 3)))


class TestBagOfParts:
    def test_one_hot_rows(self):
        s = np.eye(4)[:, ::-1]  # each row has a single 1
        b_raw, argmax_r, b = bag_of_parts(s)
        np.testing.assert_array_equal(b_raw, np.ones(4))
        np.testing.assert_allclose(b, 0.5)

    def test_tie_break_lowest_region(self):
        s = np.array([[0.0, 7.0, 1.0, 7.0], [1.0, 0.0, 2.0, 0.0]])
        b_raw, argmax_r, b = bag_of_parts(s)
        assert argmax_r[0] == 1
        assert argmax_r[1] == 2
        np.testing.assert_array_equal(b_raw, [7.0, 2.0])
        assert s[0, argmax_r[0]] == b_raw[0]

    def test_column_permutation_invariance(self):
        rng = np.random.default_rng(3)
        s = rng.normal(size=(5, 8))
        perm = rng.permutation(8)
        _, _, b1 = bag_of_parts(s)
        _, _, b2 = bag_of_parts(s[:, perm])
        np.testing.assert_array_equal(b1, b2)


class TestPredict:
    def test_zero_weights_uniform(self):
        model = random_model()
        model.v[:] = 0.0
        logits, o = predict(model, np.random.default_rng(4).normal(size=6))
        np.testing.assert_allclose(o, 1 / 3, rtol=0, atol=1e-15)

    def test_two_class_closed_form(self):
        model = PartModel(
            u=np.ones((2, 2)), v=np.array([[1.0, 0.0], [1.0, 0.0]]),
            parts_per_class=1, num_classes=2, descriptor_dim=2,
        )
        # logits (c, c + ln 2) via direct construction
        c0 = 0.37
        model.v = np.array([[c0, 0.0], [c0 + np.log(2.0), 0.0]])
        logits, o = predict(model, np.array([1.0, 0.0]))
        np.testing.assert_allclose(o, [1 / 3, 2 / 3], rtol=1e-12)

    def test_probabilities_sum_to_one(self):
        rng = np.random.default_rng(5)
        model = random_model(seed=6)
        for _ in range(20):
            _, o = predict(model, rng.normal(size=6))
            assert abs(o.sum() - 1.0) <= 1e-12


class TestForward:
    def test_composition_matches_stages(self):
        model = random_model(seed=7)
        x = np.random.default_rng(8).normal(size=(5, 11))
        tr = forward(model, x)
        s = score(model, x)
        b_raw, argmax_r, b = bag_of_parts(s)
        logits, o = predict(model, b)
        np.testing.assert_array_equal(tr.s, s)
        np.testing.assert_array_equal(tr.b_raw, b_raw)
        np.testing.assert_array_equal(tr.argmax_r, argmax_r)
        np.testing.assert_array_equal(tr.b, b)
        np.testing.assert_array_equal(tr.logits, logits)
        np.testing.assert_array_equal(tr.o, o)
        assert abs(tr.o.sum() - 1.0) <= 1e-12

    def test_duplicated_regions_leave_bag_unchanged(self):
        model = random_model(seed=9)
        x = np.random.default_rng(10).normal(size=(5, 7))
        tr1 = forward(model, x)
        tr2 = forward(model, np.concatenate([x, x], axis=1))
        np.testing.assert_array_equal(tr1.b, tr2.b)
        np.testing.assert_array_equal(tr1.o, tr2.o)

    def test_positive_scaling_invariance(self):
        # Scaling X by 2 scales b_raw by 2 exactly; b and o are unchanged.
        model = random_model(seed=11)
        x = np.random.default_rng(12).normal(size=(5, 7))
        tr1 = forward(model, x)
        tr2 = forward(model, 2.0 * x)
        np.testing.assert_array_equal(tr2.b_raw, 2.0 * tr1.b_raw)
        np.testing.assert_array_equal(tr1.b, tr2.b)
        np.testing.assert_array_equal(tr1.o, tr2.o)

    def test_trace_argmax_consistency(self):
        model = random_model(seed=13)
        x = np.random.default_rng(14).normal(size=(5, 9))
        tr = forward(model, x)
        np.testing.assert_array_equal(tr.s[np.arange(6), tr.argmax_r], tr.b_raw)

    def test_determinism(self):
        model = random_model(seed=15)
        x = np.random.default_rng(16).normal(size=(5, 9))
        tr1 = forward(model, x)
        tr2 = forward(model, x)
        np.testing.assert_array_equal(tr1.o, tr2.o)
        np.testing.assert_array_equal(tr1.s, tr2.s)


class TestInit:
    def test_u_from_descriptors_rows_are_normalized_columns(self):
        rng = np.random.default_rng(17)
        columns = rng.normal(size=(4, 50))
        u = init_u_from_descriptors(columns, 8, seed=0)
        assert u.shape == (8, 4)
        np.testing.assert_allclose(np.linalg.norm(u, axis=1), 1.0, atol=1e-12)
        normalized = columns / np.linalg.norm(columns, axis=0, keepdims=True)
        for row in u:
            diffs = np.linalg.norm(normalized - row[:, None], axis=0)
            assert diffs.min() < 1e-12  # row is one of the data columns

    def test_u_gaussian_fallback(self):
        columns = np.random.default_rng(18).normal(size=(4, 3))
        u = init_u_from_descriptors(columns, 8, seed=0)
        assert u.shape == (8, 4)
        np.testing.assert_allclose(np.linalg.norm(u, axis=1), 1.0, atol=1e-12)

    def test_v_block_structure(self):
        v = init_v(3, 6, 2, class_specific=True, seed=0)
        expected = np.zeros((3, 6))
        for c in range(3):
            expected[c, 2 * c : 2 * c + 2] = 1.0
        np.testing.assert_array_equal(v, expected)

    def test_v_gaussian(self):
        v = init_v(3, 6, 2, class_specific=False, seed=0)
        assert v.shape == (3, 6)
        assert np.abs(v).max() < 0.1  # sigma = 0.01
        np.testing.assert_array_equal(v, init_v(3, 6, 2, class_specific=False, seed=0))

    def test_v_block_scale(self):
        v = init_v(2, 4, 2, class_specific=True, seed=0, block_scale=12.0)
        assert v[0, 0] == 12.0 and v[0, 2] == 0.0

    def test_kmeans_rows_unit_and_deterministic(self):
        from dpnet.part_model import spherical_kmeans_rows
        from dpnet.rng import Xoshiro256StarStar

        rng = np.random.default_rng(20)
        columns = rng.normal(size=(6, 80))
        a = spherical_kmeans_rows(columns, 4, Xoshiro256StarStar(3))
        b = spherical_kmeans_rows(columns, 4, Xoshiro256StarStar(3))
        np.testing.assert_array_equal(a, b)
        np.testing.assert_allclose(np.linalg.norm(a, axis=1), 1.0, atol=1e-12)
        # centers are spread out, not duplicates of one direction
        gram = a @ a.T
        off = gram[~np.eye(4, dtype=bool)]
        assert np.abs(off).max() < 0.999

    def test_kmeans_fallback_when_too_few_columns(self):
        from dpnet.part_model import spherical_kmeans_rows
        from dpnet.rng import Xoshiro256StarStar

        columns = np.random.default_rng(21).normal(size=(5, 2))
        rows = spherical_kmeans_rows(columns, 4, Xoshiro256StarStar(1))
        assert rows.shape == (4, 5)
        np.testing.assert_allclose(np.linalg.norm(rows, axis=1), 1.0, atol=1e-12)


class TestCheckpoint:
    def test_round_trip_bit_exact(self, tmp_path):
        model = random_model(seed=19)
        trailer = {"class_names": ["a", "b", "c"], "config": {"seed": 5}, "metadata": {}}
        path = tmp_path / "model.dpck"
        save_checkpoint(model, path, trailer)
        back, trailer2 = load_checkpoint(path)
        np.testing.assert_array_equal(back.u, model.u)
        np.testing.assert_array_equal(back.v, model.v)
        assert back.parts_per_class == model.parts_per_class
        assert trailer2 == trailer
        save_checkpoint(back, tmp_path / "model2.dpck", trailer2)
        assert (tmp_path / "model.dpck").read_bytes() == (tmp_path / "model2.dpck").read_bytes()

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "model.dpck"
        save_checkpoint(random_model(), path, {})
        raw = bytearray(path.read_bytes())
        raw[:4] = b"WHAT"
        path.write_bytes(bytes(raw))
        with pytest.raises(FormatError, match="magic"):
            load_checkpoint(path)

    def test_truncated(self, tmp_path):
        path = tmp_path / "model.dpck"
        save_checkpoint(random_model(), path, {"k": 1})
        raw = path.read_bytes()
        path.write_bytes(raw[:-3])
        with pytest.raises(FormatError, match="truncated"):
            load_checkpoint(path)


class TestModelInvariants:
    def test_shape_consistency_enforced(self):
        with pytest.raises(ContractError):
            PartModel(
                u=np.zeros((4, 3)), v=np.zeros((2, 5)),
                parts_per_class=2, num_classes=2, descriptor_dim=3,
            )

    def test_nonfinite_rejected(self):
        u = np.zeros((2, 2))
        u[0, 0] = np.inf
        with pytest.raises(ContractError):
            PartModel(u=u, v=np.zeros((1, 2)), parts_per_class=2, num_classes=1, descriptor_dim=2)
