import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vaeprior.errors import DimensionMismatchError, DomainError, InvalidArgumentError, ParseError
from vaeprior.spatial import (
    SpatialStructure,
    StructureKind,
    adjacency_from_edges,
    areal_graph,
    build_irregular_grid_1d,
    build_regular_grid_1d,
    build_regular_grid_2d,
    is_connected,
    load_adjacency_matrix,
    load_areal_dataset,
    load_lip_cancer,
    observation_count,
)


class TestRegularGrid1d:
    def test_spacing_n400(self):
        g = build_regular_grid_1d(400, 0, 1)
        assert g.spacing == 0.0025
        assert g.n == 400 and g.kind is StructureKind.GRID_1D

    def test_two_points(self):
        np.testing.assert_array_equal(build_regular_grid_1d(2, 0, 1).coords, [0.25, 0.75])

    def test_endpoints_n100(self):
        c = build_regular_grid_1d(100, 0, 1).coords
        assert c[0] == pytest.approx(0.005, abs=1e-15)
        assert c[99] == pytest.approx(0.995, abs=1e-15)

    @pytest.mark.parametrize("n", [2, 7, 100, 400])
    def test_uniform_spacing(self, n):
        g = build_regular_grid_1d(n)
        assert np.max(np.abs(np.diff(g.coords) - g.spacing)) <= 1e-15

    @pytest.mark.parametrize("args", [(1, 0, 1), (10, 1, 1), (10, 2, 1)])
    def test_invalid(self, args):
        with pytest.raises(InvalidArgumentError):
            build_regular_grid_1d(*args)


class TestIrregularGrid1d:
    def test_deterministic(self):
        a, b = build_irregular_grid_1d(400, 0, 1, 7), build_irregular_grid_1d(400, 0, 1, 7)
        np.testing.assert_array_equal(a.coords, b.coords)
        assert a.fingerprint == b.fingerprint
        assert not a.regular

    @given(n=st.integers(2, 300), seed=st.integers(0, 2**32 - 1))
    @settings(max_examples=30, deadline=None)
    def test_sorted_in_range(self, n, seed):
        c = build_irregular_grid_1d(n, 0, 1, seed).coords
        assert np.all(np.diff(c) > 0)
        assert c[0] > 0 and c[-1] < 1

    def test_invalid(self):
        with pytest.raises(InvalidArgumentError):
            build_irregular_grid_1d(1)


class TestGrid2d:
    def test_size(self):
        assert build_regular_grid_2d(25).n == 625

    def test_two_segments_row_major(self):
        pts = build_regular_grid_2d(2).points
        np.testing.assert_array_equal(pts, [[0.25, 0.25], [0.75, 0.25], [0.25, 0.75], [0.75, 0.75]])

    @pytest.mark.parametrize("frac,count", [(0.01, 6), (0.02, 12), (0.05, 31)])
    def test_observation_counts(self, frac, count):
        assert observation_count(frac, 625) == count

    @pytest.mark.parametrize("frac,count", [(0.005, 2), (0.01, 4), (0.015, 6)])
    def test_observation_counts_1d(self, frac, count):
        assert observation_count(frac, 400) == count

    def test_invalid(self):
        with pytest.raises(InvalidArgumentError):
            build_regular_grid_2d(1)


class TestFingerprint:
    def test_roundtrip(self):
        for s in (build_regular_grid_1d(50), build_irregular_grid_1d(30, seed=3), build_regular_grid_2d(4)):
            back = SpatialStructure.from_dict(json.loads(json.dumps(s.to_dict())))
            assert back.fingerprint == s.fingerprint

    def test_areal_roundtrip(self):
        s = load_lip_cancer().structure
        assert SpatialStructure.from_dict(s.to_dict()).fingerprint == s.fingerprint

    def test_differs(self):
        assert build_regular_grid_1d(400).fingerprint != build_regular_grid_1d(401).fingerprint
        assert build_regular_grid_1d(4).fingerprint != build_regular_grid_2d(2).fingerprint

    def test_tampered_dict(self):
        d = build_regular_grid_1d(5).to_dict()
        d["coords"][0] = 0.0
        with pytest.raises(ParseError):
            SpatialStructure.from_dict(d)

    def test_immutable(self):
        g = build_regular_grid_1d(5)
        with pytest.raises(ValueError):
            g.coords[0] = 3.0


class TestArealGraph:
    def test_degrees_are_row_sums(self):
        s = load_lip_cancer().structure
        np.testing.assert_array_equal(s.degrees(), s.adjacency.sum(axis=1))

    def test_validation(self):
        with pytest.raises(InvalidArgumentError):
            areal_graph(np.array([[0, 1], [0, 0]]))
        with pytest.raises(InvalidArgumentError):
            areal_graph(np.array([[1, 0], [0, 0]]))

    def test_asymmetric_rejected_by_default(self):
        a = np.array([[0, 1, 0], [0, 0, 1], [0, 1, 0]])
        with pytest.raises(InvalidArgumentError):
            load_adjacency_matrix(a)
        sym = load_adjacency_matrix(a, symmetrize=True)
        np.testing.assert_array_equal(sym, sym.T)

    def test_edges(self):
        a = adjacency_from_edges(4, np.array([[0, 1], [1, 2], [2, 3]]))
        np.testing.assert_array_equal(areal_graph(a).edges(), [[0, 1], [1, 2], [2, 3]])
        assert is_connected(a)
        assert not is_connected(adjacency_from_edges(4, np.array([[0, 1], [2, 3]])))


class TestArealDataset:
    def test_lip_cancer(self):
        ds = load_lip_cancer()
        assert ds.n == 56
        assert ds.y.sum() == 536
        assert np.all(ds.E > 0)
        assert ds.covariate_names[0] == "aff"
        assert is_connected(ds.structure.adjacency)

    def _write(self, tmp_path, rows, edges="1 2\n2 3\n"):
        data = tmp_path / "d.csv"
        data.write_text("name,y,E,aff\n" + "".join(rows))
        adj = tmp_path / "a.txt"
        adj.write_text(edges)
        return data, adj

    def test_loads_small(self, tmp_path):
        ds = load_areal_dataset(*self._write(tmp_path, ["a,1,1.5,0\n", "b,2,2.0,1\n", "c,0,0.5,2\n"]))
        assert ds.n == 3
        np.testing.assert_array_equal(ds.y, [1, 2, 0])
        assert ds.names == ("a", "b", "c")

    def test_zero_expected_rejected(self, tmp_path):
        with pytest.raises(DomainError):
            load_areal_dataset(*self._write(tmp_path, ["a,1,1.5,0\n", "b,2,0,1\n", "c,0,0.5,2\n"]))

    def test_parse_error_has_line(self, tmp_path):
        with pytest.raises(ParseError) as info:
            load_areal_dataset(*self._write(tmp_path, ["a,1,1.5,0\n", "b,x,2,1\n", "c,0,0.5,2\n"]))
        assert info.value.line == 3

    def test_adjacency_size_mismatch(self, tmp_path):
        with pytest.raises(DimensionMismatchError):
            load_areal_dataset(*self._write(tmp_path, ["a,1,1.5,0\n", "b,2,2,1\n", "c,0,0.5,2\n"], "1 4\n"))
