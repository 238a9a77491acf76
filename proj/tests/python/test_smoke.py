import math

import numpy as np
import pytest

import demslam


def test_sim3_round_trip():
    xi = np.array([0.3, -1.2, 0.5, 0.2, -0.4, 0.9, 0.1])
    T = demslam.sim3_exp(xi)
    assert T.shape == (4, 4)
    assert np.allclose(demslam.sim3_log(T), xi, atol=1e-12)


def test_reducers():
    assert demslam.reduce_heights([1.0, 3.0], "mean") == 2.0
    assert demslam.reduce_heights([1.0, 3.0], "max") == 3.0
    soft = demslam.reduce_heights([0.0, 1.0], "softmax", 1.0)
    assert soft == pytest.approx(math.e / (1 + math.e))


def test_errors_carry_a_code():
    with pytest.raises(demslam.Error) as info:
        demslam.reduce_heights([], "mean")
    assert info.value.code == "EmptyInput"


def test_index_search_and_snapshot(tmp_path):
    rng = np.random.default_rng(0)
    vecs = rng.normal(size=(200, 16))
    idx = demslam.HnswIndex(16, seed=3)
    for i, v in enumerate(vecs):
        idx.insert(i, v)
    assert len(idx) == 200
    hits = idx.search(vecs[42], 5)
    assert hits[0][0] == 42
    assert hits[0][1] == pytest.approx(1.0)
    idx.save(str(tmp_path / "a.hnsw"))
    back = demslam.HnswIndex.load(str(tmp_path / "a.hnsw"))
    assert [h[0] for h in back.search(vecs[7], 5)] == [h[0] for h in idx.search(vecs[7], 5)]


def test_token_files(tmp_path):
    pos = np.array([[7.0, 7.0], [7.0, 21.0]])
    feat = np.arange(2 * 6, dtype=np.float64).reshape(2, 6) / 4.0
    demslam.save_tokens(str(tmp_path / "t.tok"), pos, feat, 14)
    p2, f2, patch = demslam.load_tokens(str(tmp_path / "t.tok"), 6)
    assert patch == 14
    assert np.array_equal(p2, pos)
    assert np.array_equal(f2, feat)
    with pytest.raises(demslam.Error):
        demslam.load_tokens(str(tmp_path / "t.tok"), 5)


def test_ate_identical(tmp_path):
    lines = [f"{t:.1f} {t} {t * t} 0 0 0 0 1" for t in range(5)]
    path = tmp_path / "t.tum"
    path.write_text("\n".join(lines) + "\n")
    assert demslam.ate_rmse(str(path), str(path)) < 1e-12


def test_config_keys():
    keys = demslam.config_keys()
    assert "dem.reducer" in keys
    assert "loops.rho" in keys
