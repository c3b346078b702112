import numpy as np
from scipy import stats

from dopo_tomography.rng import NormalStream, counter_mix, trajectory_keys


def test_keys_match_scalar_mix():
    keys = trajectory_keys(12345, 10, 20)
    assert [int(k) for k in keys] == [counter_mix(12345, i) for i in range(10, 20)]


def test_keys_distinct_and_seed_dependent():
    a = trajectory_keys(1, 0, 10000)
    b = trajectory_keys(2, 0, 10000)
    assert len(np.unique(a)) == a.size
    assert not np.any(a == b)


def test_normal_stream_statistics():
    s = NormalStream(trajectory_keys(7, 0, 20000))
    n1, n2 = s.pair(3)
    for v in (n1, n2):
        assert abs(v.mean()) < 4 / np.sqrt(v.size)
        assert abs(v.var() - 1) < 0.05
        assert stats.kstest(v, "norm").pvalue > 1e-3
    assert abs(np.corrcoef(n1, n2)[0, 1]) < 0.03
    m1, _ = s.pair(4)
    assert abs(np.corrcoef(n1, m1)[0, 1]) < 0.03


def test_stream_is_stateless():
    keys = trajectory_keys(99, 0, 50)
    a = NormalStream(keys).pair(17)
    b = NormalStream(keys[10:20]).pair(17)
    np.testing.assert_array_equal(a[0][10:20], b[0])
    np.testing.assert_array_equal(a[1][10:20], b[1])
