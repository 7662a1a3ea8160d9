"""Source-point topology and first/second order feature fusion."""

import itertools

import numpy as np
import pytest

from gridloc.errors import InputError, ShapeError
from gridloc.fusion import FusionTopology, TransferBank, fuse_first_order, fuse_second_order, source_points
from gridloc.gridgeom import GridSpec
from gridloc.numkit import Tensor, check_gradients, make_rng
from gridloc.numkit import ops

GRID_3X3 = GridSpec.from_name("3x3")


def _maps(n, channels=2, size=5, seed=0, positive=False):
    rng = make_rng(seed)
    out = []
    for _ in range(n):
        values = rng.uniform(0.1, 1.0, (1, channels, size, size)) if positive else rng.standard_normal((1, channels, size, size))
        out.append(Tensor(values))
    return out


def _identity_bank(bank: TransferBank) -> None:
    """Every conv becomes a centre-tap identity, so a stack passes non-negative maps through unchanged."""
    for stack in bank.stacks.values():
        for conv in stack.convs:
            out_ch, in_ch, k, _ = conv.weight.shape
            w = np.zeros(conv.weight.shape)
            for c in range(min(out_ch, in_ch)):
                w[c, c, k // 2, k // 2] = 1.0
            conv.weight.data = w.astype(conv.weight.data.dtype)
            conv.bias.data = np.zeros_like(conv.bias.data)


def _l1(a, b):
    return abs(a[0] - b[0]) + abs(a[1] - b[1])


# =============================================================================
# TOPOLOGY
# =============================================================================

class TestTopology:
    def test_3x3_examples(self):
        assert source_points(0, GRID_3X3) == (1, 3)
        assert source_points(4, GRID_3X3) == (1, 3, 5, 7)

    def test_source_counts(self):
        """Corners see 2 points, edge midpoints 3, the center 4."""
        sizes = [len(s) for s in FusionTopology.from_spec(GRID_3X3).sources]
        assert sizes == [2, 3, 2, 3, 4, 3, 2, 3, 2]

    def test_matches_brute_force(self):
        for name in ("2x2", "3x3", "4x4"):
            spec = GridSpec.from_name(name)
            topo = FusionTopology.from_spec(spec)
            for i, j in itertools.product(range(spec.n_points), repeat=2):
                assert (j in topo.sources[i]) == (_l1(spec.points[i], spec.points[j]) == 1)
                assert (j in topo.sources[i]) == (i in topo.sources[j])

    def test_two_point_is_inert(self):
        topo = FusionTopology.from_spec(GridSpec.from_name("2pt"))
        assert topo.sources == ((), ())
        assert topo.is_inert

    def test_four_point_neighbours(self):
        assert source_points(0, GridSpec.from_name("2x2")) == (1, 2)

    def test_index_checked(self):
        with pytest.raises(InputError):
            source_points(9, GRID_3X3)


class TestTransferBank:
    def test_parameter_names(self):
        bank = TransferBank("fusion.o1", FusionTopology.from_spec(GRID_3X3), 2, seed=0)
        assert len(bank.stacks) == 24
        assert bank.stacks[(1, 0)].convs[2].weight.name == "fusion.o1.j1_to_i0.conv2.weight"
        assert bank.stacks[(1, 0)].convs[0].weight.shape == (2, 2, 5, 5)

    def test_banks_are_independent(self):
        topo = FusionTopology.from_spec(GRID_3X3)
        first = TransferBank("fusion.o1", topo, 2, seed=0)
        second = TransferBank("fusion.o2", topo, 2, seed=0)
        a, b = list(first.parameters()), list(second.parameters())
        assert len(a) == len(b) == 24 * 3 * 2
        assert not {id(p) for p in a} & {id(p) for p in b}
        assert not np.array_equal(a[0].data, b[0].data)


# =============================================================================
# FUSION
# =============================================================================

class TestFusion:
    def test_zero_banks_are_identity(self, f64):
        topo = FusionTopology.from_spec(GRID_3X3)
        first = TransferBank("o1", topo, 2, seed=1)
        second = TransferBank("o2", topo, 2, seed=1)
        first.zero_()
        second.zero_()
        maps = _maps(9)
        out = fuse_second_order(fuse_first_order(maps, topo, first), topo, second)
        for f, g in zip(maps, out):
            np.testing.assert_array_equal(f.data, g.data)

    def test_two_point_ignores_weights(self, f64):
        topo = FusionTopology.from_spec(GridSpec.from_name("2pt"))
        bank = TransferBank("o1", topo, 2, seed=1)
        maps = _maps(2)
        assert fuse_first_order(maps, topo, bank) == maps

    def test_single_point(self, f64):
        topo = FusionTopology.from_points([(0, 0)])
        bank = TransferBank("o1", topo, 2, seed=1)
        maps = _maps(1)
        assert fuse_second_order(fuse_first_order(maps, topo, bank), topo, bank) == maps

    def test_constant_maps_sum(self, f64):
        """With identity transfers the center receives its four edge midpoints."""
        topo = FusionTopology.from_spec(GRID_3X3)
        bank = TransferBank("o1", topo, 2, seed=2)
        _identity_bank(bank)
        consts = [1.0 + k for k in range(9)]
        maps = [Tensor(np.full((1, 2, 5, 5), c)) for c in consts]
        out = fuse_first_order(maps, topo, bank)
        np.testing.assert_allclose(out[4].data, consts[4] + consts[1] + consts[3] + consts[5] + consts[7])
        np.testing.assert_allclose(out[0].data, consts[0] + consts[1] + consts[3])

    def test_reach_is_l1_two(self, f64):
        """Perturbing F_j changes F''_i exactly when the grid L1 distance is at most 2."""
        topo = FusionTopology.from_spec(GRID_3X3)
        first = TransferBank("o1", topo, 2, seed=3)
        second = TransferBank("o2", topo, 2, seed=4)
        maps = _maps(9, seed=5, positive=True)

        def run(features):
            once = fuse_first_order(features, topo, first)
            return once, fuse_second_order(once, topo, second)

        base_first, base_second = run(maps)
        for j in range(9):
            bumped = list(maps)
            bumped[j] = Tensor(maps[j].data + make_rng(100 + j).uniform(1.0, 3.0, maps[j].shape))
            got_first, got_second = run(bumped)
            for i in range(9):
                distance = _l1(GRID_3X3.points[i], GRID_3X3.points[j])
                changed_first = not np.allclose(got_first[i].data, base_first[i].data)
                changed_second = not np.allclose(got_second[i].data, base_second[i].data)
                assert changed_first == (distance <= 1), (i, j)
                assert changed_second == (distance <= 2), (i, j)

    def test_center_reaches_corner_only_after_second_order(self, f64):
        topo = FusionTopology.from_spec(GRID_3X3)
        first = TransferBank("o1", topo, 2, seed=3)
        second = TransferBank("o2", topo, 2, seed=4)
        maps = _maps(9, seed=6, positive=True)
        bumped = list(maps)
        bumped[4] = Tensor(maps[4].data * 5.0)
        base = fuse_first_order(maps, topo, first)
        moved = fuse_first_order(bumped, topo, first)
        np.testing.assert_array_equal(base[0].data, moved[0].data)
        assert not np.allclose(fuse_second_order(base, topo, second)[0].data,
                               fuse_second_order(moved, topo, second)[0].data)

    def test_shape_mismatch(self):
        topo = FusionTopology.from_spec(GridSpec.from_name("2x2"))
        bank = TransferBank("o1", topo, 2, seed=0)
        maps = _maps(4)
        maps[2] = Tensor(np.zeros((1, 2, 5, 6)))
        with pytest.raises(ShapeError, match="dim 3"):
            fuse_first_order(maps, topo, bank)
        with pytest.raises(ShapeError):
            fuse_first_order(_maps(3), topo, bank)

    def test_gradients(self, f64):
        """Two-channel 2x2 grid through both fusion orders."""
        topo = FusionTopology.from_spec(GridSpec.from_name("2x2"))
        first = TransferBank("o1", topo, 2, seed=7)
        second = TransferBank("o2", topo, 2, seed=8)
        maps = _maps(4, size=4, seed=9)
        weights = [first.stacks[(1, 0)].convs[0].weight, second.stacks[(2, 3)].convs[2].bias]
        r = make_rng(10).standard_normal((1, 4 * 2 * 16))

        def loss():
            fused = fuse_second_order(fuse_first_order(maps, topo, first), topo, second)
            flat = ops.reshape(ops.concat(fused, axis=1), (1, -1))
            return ops.linear(flat, Tensor(r), Tensor(np.zeros(1)))

        assert check_gradients(loss, maps + weights) <= 1e-5
